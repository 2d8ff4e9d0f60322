//! High-noise head: spatial random features modulated by a Fourier basis in
//! time, fitted by one stacked ridge solve, and the hard-gated full score.

use serde::{Deserialize, Serialize};

use crate::data::{CleanSource, ForwardBatch, NoiseLevel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{gauss_matrix, Matrix, Rng, Vector};
use crate::par::{self, Exec};
use crate::stage1::Stage1Params;
use crate::stage2::{sild_score, sild_score_columns, RFHead, RidgeAccumulator, FEATURE_CHUNK};

/// `phi_0 = 1`, `phi_{2j-1} = sqrt2 cos(2 pi j u)`, `phi_{2j} = sqrt2 sin(2 pi j u)`
/// with `u = (t - t_max)/(horizon - t_max)`.
pub fn fourier_basis(l: usize, t_max: f64, horizon: f64, t: f64) -> Result<Vector> {
    if !(t_max..=horizon).contains(&t) {
        return Err(Error::TimeOutOfRange { t, lo: t_max, hi: horizon });
    }
    let u = (t - t_max) / (horizon - t_max);
    let s2 = std::f64::consts::SQRT_2;
    Ok(Vector::from_iterator(
        l,
        (0..l).map(|i| {
            if i == 0 {
                1.0
            } else {
                let j = i.div_ceil(2) as f64;
                let arg = std::f64::consts::TAU * j * u;
                if i % 2 == 1 {
                    s2 * arg.cos()
                } else {
                    s2 * arg.sin()
                }
            }
        }),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HNHead {
    pub t_max: f64,
    pub horizon: f64,
    /// One `d x m2` frozen matrix per Fourier mode.
    pub v: Vec<Matrix>,
    /// `d x (L m2)`, block `l` multiplies the features of mode `l`.
    pub u: Matrix,
    pub lambda: f64,
}

impl HNHead {
    pub fn new(rng: &mut Rng, d: usize, m2: usize, l: usize, t_max: f64, horizon: f64) -> Result<Self> {
        if l == 0 || m2 == 0 {
            return Err(Error::InvalidArgument("need at least one mode and one feature".into()));
        }
        if !(t_max < horizon) {
            return Err(Error::InvalidArgument(format!(
                "phase boundary {t_max} must lie below the horizon {horizon}"
            )));
        }
        let std = 1.0 / (d as f64).sqrt();
        let v = (0..l).map(|_| gauss_matrix(rng, d, m2, std)).collect();
        Ok(Self { t_max, horizon, v, u: Matrix::zeros(d, l * m2), lambda: 0.0 })
    }

    pub fn modes(&self) -> usize {
        self.v.len()
    }

    pub fn width(&self) -> usize {
        self.v[0].ncols()
    }

    pub fn dim(&self) -> usize {
        self.v[0].nrows()
    }

    pub fn u_block(&self, l: usize) -> Matrix {
        let m2 = self.width();
        self.u.columns(l * m2, m2).into_owned()
    }

    /// Spatial features of mode `l` without the time factor, `m2 x n`.
    pub fn spatial(&self, l: usize, x: &Matrix) -> Matrix {
        let scale = 1.0 / (self.width() as f64).sqrt();
        let mut z = self.v[l].tr_mul(x);
        z.apply(|v| *v = v.tanh() * scale);
        z
    }

    /// Stacked features `(L m2) x n` with one time per column.
    pub fn features(&self, x: &Matrix, ts: &[f64]) -> Result<Matrix> {
        assert_eq!(x.ncols(), ts.len());
        let m2 = self.width();
        let l = self.modes();
        let basis: Vec<Vector> = ts
            .iter()
            .map(|t| fourier_basis(l, self.t_max, self.horizon, *t))
            .collect::<Result<_>>()?;
        let mut psi = Matrix::zeros(l * m2, x.ncols());
        for li in 0..l {
            let s = self.spatial(li, x);
            for j in 0..x.ncols() {
                let f = basis[j][li];
                let mut blk = psi.view_mut((li * m2, j), (m2, 1));
                blk.copy_from(&(s.column(j) * f));
            }
        }
        Ok(psi)
    }

    pub fn hn_features(&self, x: &Vector, t: f64) -> Result<Vector> {
        Ok(self
            .features(&Matrix::from_column_slice(x.len(), 1, x.as_slice()), &[t])?
            .column(0)
            .into_owned())
    }

    pub fn forward(&self, x: &Vector, t: f64) -> Result<Vector> {
        Ok(&self.u * self.hn_features(x, t)?)
    }

    pub fn forward_columns(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        Ok(&self.u * self.features(x, &vec![t; x.ncols()])?)
    }
}

/// Corrupted draws at times uniform on `[t_max, horizon]` with their DSM
/// targets.
pub fn hn_training_data(
    head: &HNHead,
    sched: &NoiseSchedule,
    source: &CleanSource,
    rng: &mut Rng,
    n: usize,
) -> Result<(ForwardBatch, Vec<f64>, Matrix)> {
    let ts: Vec<f64> = (0..n).map(|_| rng.uniform(head.t_max, head.horizon)).collect();
    let levels: Vec<NoiseLevel> = ts.iter().map(|t| sched.level(*t)).collect::<Result<_>>()?;
    let x0 = source.draw(rng, n)?;
    let batch = ForwardBatch::at_levels(x0, levels, rng);
    let y = batch.dsm_targets()?;
    Ok((batch, ts, y))
}

/// Single stacked ridge solve over all `L m2` features. Returns the KKT
/// residual.
pub fn hn_ridge_fit(
    head: &mut HNHead,
    x: &Matrix,
    ts: &[f64],
    y: &Matrix,
    lambda: Option<f64>,
    exec: Exec,
) -> Result<f64> {
    let width = head.modes() * head.width();
    let parts = par::map_chunks(exec, x.ncols(), FEATURE_CHUNK, |r| {
        let xb = x.columns(r.start, r.len()).into_owned();
        let psi = head.features(&xb, &ts[r.clone()])?;
        let mut acc = RidgeAccumulator::new(head.dim(), width);
        acc.add(&psi, &y.columns(r.start, r.len()).into_owned());
        Ok(acc)
    });
    let mut acc = RidgeAccumulator::new(head.dim(), width);
    for p in parts {
        acc.merge(&p?);
    }
    let lam = lambda.unwrap_or_else(|| acc.default_lambda());
    head.u = acc.solve(lam)?;
    head.lambda = lam;
    Ok(acc.kkt_residual(&head.u, lam))
}

/// The gated score: the manifold-regime score while `h(t) <= gate_threshold`,
/// the high-noise head above.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullScore {
    pub stage1: Stage1Params,
    pub rf: RFHead,
    pub hn: HNHead,
    pub gate_threshold: f64,
    pub schedule: NoiseSchedule,
}

/// Anything that can be integrated by the samplers.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;
    fn score(&self, x: &Vector, t: f64) -> Result<Vector>;

    fn score_columns(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.nrows(), x.ncols());
        for j in 0..x.ncols() {
            out.set_column(j, &self.score(&x.column(j).into_owned(), t)?);
        }
        Ok(out)
    }
}

impl FullScore {
    pub fn in_manifold_regime(&self, t: f64) -> Result<bool> {
        Ok(self.schedule.h(t)? <= self.gate_threshold)
    }

    /// Mean `|s_manifold - s_hn|` at `t_max` over `probes`, relative to the
    /// mean `|s_hn|`.
    pub fn gate_jump(&self, probes: &Matrix) -> Result<f64> {
        let t = self.hn.t_max;
        let h = self.schedule.h(t)?;
        let low = sild_score_columns(&self.stage1, &self.rf, probes, h);
        let high = self.hn.forward_columns(probes, t)?;
        let n = probes.ncols() as f64;
        let num: f64 = (0..probes.ncols()).map(|j| (low.column(j) - high.column(j)).norm()).sum();
        let den: f64 = high.column_iter().map(|c| c.norm()).sum();
        Ok((num / n) / (den / n).max(1e-300))
    }
}

impl ScoreField for FullScore {
    fn dim(&self) -> usize {
        self.stage1.dim()
    }

    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        let h = self.schedule.h(t)?;
        if h <= self.gate_threshold {
            Ok(sild_score(&self.stage1, &self.rf, x, h))
        } else {
            self.hn.forward(x, t)
        }
    }

    fn score_columns(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        let h = self.schedule.h(t)?;
        if h <= self.gate_threshold {
            Ok(sild_score_columns(&self.stage1, &self.rf, x, h))
        } else {
            self.hn.forward_columns(x, t)
        }
    }
}

/// Exact score of a Gaussian-mixture model on a subspace under a schedule.
#[derive(Clone, Debug)]
pub struct OracleField {
    pub manifold: crate::manifold::LinearManifold,
    pub mog: crate::data::MogLatent,
    pub schedule: NoiseSchedule,
}

impl ScoreField for OracleField {
    fn dim(&self) -> usize {
        self.manifold.basis().nrows()
    }

    fn score(&self, x: &Vector, t: f64) -> Result<Vector> {
        let lv = self.schedule.level(t)?;
        crate::oracle::exact_score_linear(&self.manifold, &self.mog, lv, x)
    }

    fn score_columns(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        let lv = self.schedule.level(t)?;
        let amb = crate::oracle::AmbientMog::new(&self.manifold, &self.mog, lv)?;
        Ok(amb.score_columns(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn basis_at_phase_start() {
        let phi = fourier_basis(5, 0.3, 1.0, 0.3).unwrap();
        let s2 = std::f64::consts::SQRT_2;
        let expected = [1.0, s2, 0.0, s2, 0.0];
        for (a, b) in phi.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(fourier_basis(1, 0.3, 1.0, 0.8).unwrap(), Vector::from_element(1, 1.0));
        assert!(fourier_basis(3, 0.3, 1.0, 0.2).is_err());
    }

    #[test]
    fn basis_is_orthonormal() {
        let n = 10_000;
        let (t0, t1) = (0.4, 1.0);
        let mut g = Matrix::zeros(5, 5);
        for i in 0..n {
            // midpoint rule, exact for trigonometric polynomials of low degree
            let t = t0 + (t1 - t0) * (i as f64 + 0.5) / n as f64;
            let phi = fourier_basis(5, t0, t1, t).unwrap();
            g += &phi * phi.transpose() / n as f64;
        }
        assert!((g - Matrix::identity(5, 5)).amax() < 1e-6);
    }

    #[test]
    fn single_mode_matches_bias_free_rf_features() {
        let mut rng = Rng::new(1);
        let head = HNHead::new(&mut rng, 4, 6, 1, 0.5, 1.0).unwrap();
        let mut rf = RFHead::new(&mut rng, 4, 6, false);
        rf.vx = head.v[0].clone();
        rf.b_feat.fill(0.0);
        let x = rng.gauss_vector(4);
        let a = head.hn_features(&x, 0.77).unwrap();
        let b = rf.rf_features(&x, 0.0);
        assert!((a - b).amax() < 1e-15);
    }

    #[test]
    fn blocks_recombine() {
        let mut rng = Rng::new(2);
        let mut head = HNHead::new(&mut rng, 3, 4, 3, 0.2, 1.0).unwrap();
        let x = rng.gauss_vector(3);
        let t = 0.65;
        let psi = head.hn_features(&x, t).unwrap();
        let phi = fourier_basis(3, 0.2, 1.0, t).unwrap();
        let xm = Matrix::from_column_slice(3, 1, x.as_slice());
        for l in 0..3 {
            let sp = head.spatial(l, &xm).column(0) * phi[l];
            assert_eq!(psi.rows(l * 4, 4).into_owned(), sp);
        }
        let phi_sq: f64 = phi.iter().map(|v| v * v).sum();
        assert!(psi.norm_squared() <= phi_sq + 1e-12);
        for v in head.v.iter_mut() {
            v.fill(0.0);
        }
        assert_eq!(head.hn_features(&x, t).unwrap(), Vector::zeros(12));
    }

    #[test]
    fn ridge_fit_is_reproducible_and_shrinks() {
        let sched = NoiseSchedule::default();
        let lin = crate::manifold::LinearManifold::random(&mut Rng::new(3), 6, 2, 1.0).unwrap();
        let mog = crate::data::MogLatent::centered(2, 1.0).unwrap();
        let source = CleanSource::Stream { manifold: crate::manifold::Manifold::Linear(lin), mog };
        let fit = |lam: Option<f64>| {
            let mut rng = Rng::new(4);
            let mut head = HNHead::new(&mut rng, 6, 16, 3, 0.3, 1.0).unwrap();
            let (batch, ts, y) = hn_training_data(&head, &sched, &source, &mut rng, 400).unwrap();
            let kkt = hn_ridge_fit(&mut head, &batch.xt, &ts, &y, lam, Exec::Sequential).unwrap();
            (head, kkt)
        };
        let (a, kkt) = fit(None);
        let (b, _) = fit(None);
        assert!(kkt < 1e-8);
        assert_eq!(a.u, b.u);
        let (c, _) = fit(Some(1e8));
        assert!(c.u.norm() < 1e-6);
    }
}
