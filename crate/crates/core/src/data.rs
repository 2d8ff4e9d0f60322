//! Latent mixture-of-Gaussians data on a manifold and the forward noising
//! process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::Manifold;
use crate::numerics::{Matrix, Rng, Vector};

/// Isotropic mixture of Gaussians in latent coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MogLatent {
    weights: Vec<f64>,
    means: Vec<Vector>,
    std: f64,
}

impl MogLatent {
    pub fn new(weights: Vec<f64>, means: Vec<Vector>, std: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::InvalidArgument(
                "need one weight per mean and at least one component".into(),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}")));
        }
        let k = means[0].len();
        if means.iter().any(|m| m.len() != k) {
            return Err(Error::Dimension("mixture means differ in length".into()));
        }
        if !(std >= 0.0) {
            return Err(Error::InvalidArgument("latent std must be nonnegative".into()));
        }
        Ok(Self { weights, means, std })
    }

    /// `c` equal-weight components with means equally spaced on a circle of
    /// `radius` in the first two latent coordinates; the remaining
    /// coordinates of every mean are zero.
    pub fn ring(k: usize, c: usize, radius: f64, std: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Dimension("ring layout needs k >= 2".into()));
        }
        let means = (0..c)
            .map(|i| {
                let th = std::f64::consts::TAU * i as f64 / c as f64;
                let mut m = Vector::zeros(k);
                m[0] = radius * th.cos();
                m[1] = radius * th.sin();
                m
            })
            .collect();
        Self::new(vec![1.0 / c as f64; c], means, std)
    }

    /// Single centered Gaussian `N(0, std^2 I_k)`.
    pub fn centered(k: usize, std: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![Vector::zeros(k)], std)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vector] {
        &self.means
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vector {
        let c = rng.categorical(&self.weights);
        let k = self.dim();
        let mut z = self.means[c].clone();
        for i in 0..k {
            z[i] += self.std * rng.gauss();
        }
        z
    }

    pub fn mean(&self) -> Vector {
        self.weights
            .iter()
            .zip(&self.means)
            .fold(Vector::zeros(self.dim()), |acc, (w, m)| acc + m * *w)
    }

    /// Closed-form mixture covariance.
    pub fn covariance(&self) -> Matrix {
        let k = self.dim();
        let mu = self.mean();
        let mut c = Matrix::identity(k, k) * (self.std * self.std);
        for (w, m) in self.weights.iter().zip(&self.means) {
            c += (m * m.transpose()) * *w;
        }
        c - &mu * mu.transpose()
    }
}

/// Noise level of the forward process at one time: `x_t = a x_0 + sqrt(h) eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub h: f64,
    pub a: f64,
}

impl NoiseLevel {
    /// Variance-preserving level with `a = sqrt(1 - h)`.
    pub fn vp(h: f64) -> Self {
        Self { h, a: (1.0 - h).max(0.0).sqrt() }
    }

    /// Pure additive noise, `a = 1`.
    pub fn additive(h: f64) -> Self {
        Self { h, a: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSchedule {
    /// Linear `beta(t)` from `beta_min` to `beta_max` over `[0, horizon]`.
    VpLinear { beta_min: f64, beta_max: f64, horizon: f64 },
    /// `x_t = x_0 + sigma eps` at every `t`.
    Fixed { sigma: f64, horizon: f64 },
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::VpLinear { beta_min: 0.1, beta_max: 20.0, horizon: 1.0 }
    }
}

impl NoiseSchedule {
    pub fn fixed(sigma: f64) -> Self {
        NoiseSchedule::Fixed { sigma, horizon: 1.0 }
    }

    pub fn horizon(&self) -> f64 {
        match *self {
            NoiseSchedule::VpLinear { horizon, .. } | NoiseSchedule::Fixed { horizon, .. } => {
                horizon
            }
        }
    }

    pub fn is_vp(&self) -> bool {
        matches!(self, NoiseSchedule::VpLinear { .. })
    }

    fn check_t(&self, t: f64) -> Result<()> {
        let hi = self.horizon();
        if !(0.0..=hi).contains(&t) {
            return Err(Error::TimeOutOfRange { t, lo: 0.0, hi });
        }
        Ok(())
    }

    /// `int_0^t beta(s) ds` for the VP schedule.
    fn integrated_beta(beta_min: f64, beta_max: f64, horizon: f64, t: f64) -> f64 {
        beta_min * t + 0.5 * (beta_max - beta_min) * t * t / horizon
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        Ok(match *self {
            NoiseSchedule::VpLinear { beta_min, beta_max, horizon } => {
                (-Self::integrated_beta(beta_min, beta_max, horizon, t)).exp()
            }
            NoiseSchedule::Fixed { .. } => 1.0,
        })
    }

    /// `h(t) = 1 - alpha_bar(t)`; `sigma^2` in fixed mode.
    pub fn h(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        Ok(match *self {
            NoiseSchedule::VpLinear { beta_min, beta_max, horizon } => {
                -(-Self::integrated_beta(beta_min, beta_max, horizon, t)).exp_m1()
            }
            NoiseSchedule::Fixed { sigma, .. } => sigma * sigma,
        })
    }

    pub fn level(&self, t: f64) -> Result<NoiseLevel> {
        let h = self.h(t)?;
        Ok(match self {
            NoiseSchedule::VpLinear { .. } => NoiseLevel { h, a: self.alpha_bar(t)?.sqrt() },
            NoiseSchedule::Fixed { .. } => NoiseLevel::additive(h),
        })
    }

    /// `beta(t)`; `None` in fixed mode.
    pub fn beta(&self, t: f64) -> Option<f64> {
        match *self {
            NoiseSchedule::VpLinear { beta_min, beta_max, horizon } => {
                Some(beta_min + (beta_max - beta_min) * t / horizon)
            }
            NoiseSchedule::Fixed { .. } => None,
        }
    }

    /// Inverse of `h` on the VP schedule.
    pub fn t_for_h(&self, h: f64) -> Result<f64> {
        match *self {
            NoiseSchedule::VpLinear { beta_min, beta_max, horizon } => {
                let h_max = self.h(horizon)?;
                if !(0.0..=h_max).contains(&h) {
                    return Err(Error::InvalidArgument(format!(
                        "h = {h} outside the schedule range [0, {h_max}]"
                    )));
                }
                // beta_min t + c t^2 = -ln(1 - h)
                let target = -(-h).ln_1p();
                let c = 0.5 * (beta_max - beta_min) / horizon;
                let t = if c.abs() < 1e-15 {
                    target / beta_min
                } else {
                    2.0 * target / (beta_min + (beta_min * beta_min + 4.0 * c * target).sqrt())
                };
                Ok(t.clamp(0.0, horizon))
            }
            NoiseSchedule::Fixed { .. } => Err(Error::InvalidArgument(
                "fixed-noise schedule has no inverse".into(),
            )),
        }
    }
}

/// Clean samples: `x_0 = A z` on a subspace, `x_0 = gamma(theta)` on a circle
/// with a one-dimensional angle mixture.
pub fn sample_x0(manifold: &Manifold, mog: &MogLatent, rng: &mut Rng, n: usize) -> Result<Matrix> {
    if mog.dim() != manifold.intrinsic_dim() {
        return Err(Error::Dimension(format!(
            "latent dimension {} does not match manifold dimension {}",
            mog.dim(),
            manifold.intrinsic_dim()
        )));
    }
    let d = manifold.ambient_dim();
    let mut out = Matrix::zeros(d, n);
    match manifold {
        Manifold::Linear(lin) => {
            let mut z = Matrix::zeros(mog.dim(), n);
            for j in 0..n {
                z.set_column(j, &mog.sample(rng));
            }
            out = lin.basis() * z;
        }
        Manifold::Circle(c) => {
            for j in 0..n {
                let th = mog.sample(rng)[0];
                out.set_column(j, &c.embed(th));
            }
        }
    }
    Ok(out)
}

/// One corrupted draw with the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSample {
    pub x0: Vector,
    pub xt: Vector,
    pub eps: Vector,
    pub t: f64,
    pub level: NoiseLevel,
}

impl ForwardSample {
    pub fn reconstruct(&self) -> Vector {
        &self.x0 * self.level.a + &self.eps * self.level.h.sqrt()
    }
}

pub fn forward_perturb(
    sched: &NoiseSchedule,
    x0: &Vector,
    t: f64,
    rng: &mut Rng,
) -> Result<ForwardSample> {
    let level = sched.level(t)?;
    let eps = rng.gauss_vector(x0.len());
    let xt = x0 * level.a + &eps * level.h.sqrt();
    Ok(ForwardSample { x0: x0.clone(), xt, eps, t, level })
}

/// Denoising target `-eps / sqrt(h)`.
pub fn dsm_target(sample: &ForwardSample) -> Result<Vector> {
    if !(sample.level.h > 0.0) {
        return Err(Error::ZeroNoise);
    }
    Ok(&sample.eps * (-1.0 / sample.level.h.sqrt()))
}

/// A batch of corrupted draws stored column-wise; each column may sit at its
/// own noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardBatch {
    pub x0: Matrix,
    pub xt: Matrix,
    pub eps: Matrix,
    pub levels: Vec<NoiseLevel>,
}

impl ForwardBatch {
    /// Corrupts every column of `x0` at the same level.
    pub fn at_level(x0: Matrix, level: NoiseLevel, rng: &mut Rng) -> Self {
        let n = x0.ncols();
        Self::at_levels(x0, vec![level; n], rng)
    }

    pub fn at_levels(x0: Matrix, levels: Vec<NoiseLevel>, rng: &mut Rng) -> Self {
        assert_eq!(x0.ncols(), levels.len());
        let eps = crate::numerics::gauss_matrix(rng, x0.nrows(), x0.ncols(), 1.0);
        let mut xt = x0.clone();
        for (j, lv) in levels.iter().enumerate() {
            let s = lv.h.sqrt();
            let mut col = xt.column_mut(j);
            col *= lv.a;
            col.axpy(s, &eps.column(j), 1.0);
        }
        Self { x0, xt, eps, levels }
    }

    pub fn len(&self) -> usize {
        self.xt.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, j: usize, t: f64) -> ForwardSample {
        ForwardSample {
            x0: self.x0.column(j).into_owned(),
            xt: self.xt.column(j).into_owned(),
            eps: self.eps.column(j).into_owned(),
            t,
            level: self.levels[j],
        }
    }

    /// Column-wise `-eps / sqrt(h)`.
    pub fn dsm_targets(&self) -> Result<Matrix> {
        let mut y = self.eps.clone();
        for (j, lv) in self.levels.iter().enumerate() {
            if !(lv.h > 0.0) {
                return Err(Error::ZeroNoise);
            }
            y.column_mut(j).scale_mut(-1.0 / lv.h.sqrt());
        }
        Ok(y)
    }
}

/// Source of clean training data.
#[derive(Clone, Debug)]
pub enum CleanSource {
    /// Fresh draws from the model on every request.
    Stream { manifold: Manifold, mog: MogLatent },
    /// Columns resampled with replacement from a fixed training set.
    Dataset(Matrix),
}

impl CleanSource {
    pub fn draw(&self, rng: &mut Rng, n: usize) -> Result<Matrix> {
        match self {
            CleanSource::Stream { manifold, mog } => sample_x0(manifold, mog, rng, n),
            CleanSource::Dataset(x) => {
                let m = x.ncols();
                if m == 0 {
                    return Err(Error::InvalidArgument("empty training set".into()));
                }
                let mut out = Matrix::zeros(x.nrows(), n);
                for j in 0..n {
                    let i = (rng.next_u64() % m as u64) as usize;
                    out.set_column(j, &x.column(i));
                }
                Ok(out)
            }
        }
    }
}
