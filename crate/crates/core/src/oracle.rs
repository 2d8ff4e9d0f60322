//! Ground-truth scores for the synthetic models.
//!
//! For a latent mixture `z ~ sum_c pi_c N(mu_c, s^2 I_k)` pushed through an
//! orthonormal basis `A` and corrupted as `x = a A z + sqrt(h) eps`, the
//! marginal is a Gaussian mixture whose covariances all share the form
//! `a^2 s^2 A A^T + h I`. The posterior weights then depend only on the latent
//! coordinates `A^T x`, and the score splits exactly into `-(I - AA^T) x / h`
//! plus the lifted score of the latent mixture `N(a mu_c, (a^2 s^2 + h) I_k)`.

use crate::data::{MogLatent, NoiseLevel};
use crate::error::{Error, Result};
use crate::manifold::{CircleManifold, LinearManifold, Manifold};
use crate::numerics::{Matrix, Vector};

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of log-weights, computed with the max subtracted.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Corrupted mixture-on-subspace at one noise level.
#[derive(Clone, Debug)]
pub struct AmbientMog {
    basis: Matrix,
    weights: Vec<f64>,
    latent_means: Vec<Vector>,
    std: f64,
    level: NoiseLevel,
}

impl AmbientMog {
    pub fn new(manifold: &LinearManifold, mog: &MogLatent, level: NoiseLevel) -> Result<Self> {
        if mog.dim() != manifold.basis().ncols() {
            return Err(Error::Dimension("latent and manifold dimensions differ".into()));
        }
        if !(level.h > 0.0) {
            return Err(Error::ZeroNoise);
        }
        Ok(Self {
            basis: manifold.basis().clone(),
            weights: mog.weights().to_vec(),
            latent_means: mog.means().to_vec(),
            std: mog.std(),
            level,
        })
    }

    pub fn level(&self) -> NoiseLevel {
        self.level
    }

    fn latent_var(&self) -> f64 {
        let a = self.level.a;
        a * a * self.std * self.std + self.level.h
    }

    /// Means `a A mu_c` in ambient coordinates.
    pub fn ambient_means(&self) -> Vec<Vector> {
        self.latent_means
            .iter()
            .map(|m| &self.basis * m * self.level.a)
            .collect()
    }

    /// Dense `Sigma_t = a^2 s^2 A A^T + h I`.
    pub fn covariance(&self) -> Matrix {
        let d = self.basis.nrows();
        let a2s2 = (self.level.a * self.std).powi(2);
        &self.basis * self.basis.transpose() * a2s2 + Matrix::identity(d, d) * self.level.h
    }

    /// `Sigma_t^{-1} v = (v - gamma A A^T v) / h` with
    /// `gamma = a^2 s^2 / (h + a^2 s^2)`.
    pub fn cov_inv_apply(&self, v: &Vector) -> Vector {
        let a2s2 = (self.level.a * self.std).powi(2);
        let gamma = a2s2 / (self.level.h + a2s2);
        let pv = &self.basis * self.basis.tr_mul(v);
        (v - pv * gamma) / self.level.h
    }

    fn latent_logits(&self, z: &Vector) -> Vec<f64> {
        let var = self.latent_var();
        self.weights
            .iter()
            .zip(&self.latent_means)
            .map(|(w, m)| w.ln() - (z - m * self.level.a).norm_squared() / (2.0 * var))
            .collect()
    }

    /// Posterior component probabilities at `x`.
    pub fn posterior(&self, x: &Vector) -> Vec<f64> {
        softmax(&self.latent_logits(&self.basis.tr_mul(x)))
    }

    /// Score of the latent mixture `N(a mu_c, (a^2 s^2 + h) I_k)` at `z`.
    pub fn latent_score(&self, z: &Vector) -> Vector {
        let var = self.latent_var();
        let w = softmax(&self.latent_logits(z));
        let mut g = Vector::zeros(z.len());
        for (wc, m) in w.iter().zip(&self.latent_means) {
            g += (m * self.level.a - z) * (*wc / var);
        }
        g
    }

    /// `log p_t(x)`.
    pub fn log_density(&self, x: &Vector) -> f64 {
        let d = self.basis.nrows() as f64;
        let k = self.basis.ncols() as f64;
        let h = self.level.h;
        let var = self.latent_var();
        let z = self.basis.tr_mul(x);
        let perp2 = (x.norm_squared() - z.norm_squared()).max(0.0);
        let log_det = (d - k) * h.ln() + k * var.ln();
        let base = -0.5 * d * std::f64::consts::TAU.ln() - 0.5 * log_det - perp2 / (2.0 * h);
        base + log_sum_exp(&self.latent_logits(&z))
    }

    /// Exact `grad log p_t(x)`.
    pub fn score(&self, x: &Vector) -> Vector {
        let z = self.basis.tr_mul(x);
        let g = self.latent_score(&z);
        let perp = x - &self.basis * &z;
        &self.basis * g - perp / self.level.h
    }

    /// Scores of every column of `x`.
    pub fn score_columns(&self, x: &Matrix) -> Matrix {
        let z = self.basis.tr_mul(x);
        let mut g = Matrix::zeros(z.nrows(), z.ncols());
        for j in 0..z.ncols() {
            g.set_column(j, &self.latent_score(&z.column(j).into_owned()));
        }
        let perp = x - &self.basis * &z;
        &self.basis * g - perp / self.level.h
    }
}

/// Exact score of the corrupted mixture on a subspace.
pub fn exact_score_linear(
    manifold: &LinearManifold,
    mog: &MogLatent,
    level: NoiseLevel,
    x: &Vector,
) -> Result<Vector> {
    Ok(AmbientMog::new(manifold, mog, level)?.score(x))
}

/// Splits a score value at `x` into the normal restoring force
/// `-(x - Pi(x)) / h` and the remaining residual.
pub fn decompose_score(
    manifold: &Manifold,
    level: NoiseLevel,
    score: &Vector,
    x: &Vector,
) -> Result<(Vector, Vector)> {
    if !(level.h > 0.0) {
        return Err(Error::ZeroNoise);
    }
    let proj = manifold.project(x)?;
    if let Manifold::Circle(c) = manifold {
        if (x - &proj).norm() > 0.5 * c.radius() {
            return Err(Error::InvalidArgument("point outside the half-reach tube".into()));
        }
    }
    let normal = (x - proj) * (-1.0 / level.h);
    let residual = score - &normal;
    Ok((normal, residual))
}

/// Residual intrinsic score at an on-manifold point: the lifted latent
/// mixture score for a subspace, the quadrature score for a circle.
pub fn residual_score(
    manifold: &Manifold,
    model: &DataModel,
    level: NoiseLevel,
    z: &Vector,
) -> Result<Vector> {
    let proj = manifold.project(z)?;
    let off = (z - &proj).norm();
    if off > 1e-8 {
        return Err(Error::OffManifold(off));
    }
    match (manifold, model) {
        (Manifold::Linear(lin), DataModel::Latent(mog)) => {
            let amb = AmbientMog::new(lin, mog, level)?;
            Ok(lin.lift(&amb.latent_score(&lin.coords(z))))
        }
        (Manifold::Circle(c), DataModel::Angle(angle)) => {
            quadrature_score_circle(c, angle, level, z, 512)
        }
        _ => Err(Error::InvalidArgument("data model does not match the manifold".into())),
    }
}

/// Which pair of moments enters the affine high-noise score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AffineMoments {
    /// Moments of `p_0` tilted by `exp(-a^2 |z|^2 / 2h)`; exact for Gaussians.
    #[default]
    Tilted,
    /// Raw moments of `p_0`.
    Raw,
}

/// Mean and covariance (latent coordinates) used by the affine score.
pub fn affine_moments(mog: &MogLatent, level: NoiseLevel, kind: AffineMoments) -> (Vector, Matrix) {
    let k = mog.dim();
    match kind {
        AffineMoments::Raw => (mog.mean(), mog.covariance()),
        AffineMoments::Tilted => {
            let s2 = mog.std() * mog.std();
            let a2 = level.a * level.a;
            let denom = level.h + a2 * s2;
            let shrink = level.h / denom;
            let var = s2 * shrink;
            let logits: Vec<f64> = mog
                .weights()
                .iter()
                .zip(mog.means())
                .map(|(w, m)| w.ln() - a2 * m.norm_squared() / (2.0 * denom))
                .collect();
            let w = softmax(&logits);
            let means: Vec<Vector> = mog.means().iter().map(|m| m * shrink).collect();
            let mu = w
                .iter()
                .zip(&means)
                .fold(Vector::zeros(k), |acc, (wc, m)| acc + m * *wc);
            let mut cov = Matrix::identity(k, k) * var;
            for (wc, m) in w.iter().zip(&means) {
                cov += (m * m.transpose()) * *wc;
            }
            cov -= &mu * mu.transpose();
            (mu, cov)
        }
    }
}

/// Affine approximation `-x/h + (a/h) mu + (a^2/h^2) C x` of the high-noise
/// score.
pub fn affine_score(
    manifold: &LinearManifold,
    mog: &MogLatent,
    level: NoiseLevel,
    x: &Vector,
    kind: AffineMoments,
) -> Result<Vector> {
    if !(level.h > 0.0) {
        return Err(Error::ZeroNoise);
    }
    let (mu, cov) = affine_moments(mog, level, kind);
    let h = level.h;
    let a = level.a;
    let a_mat = manifold.basis();
    let cx = a_mat * (&cov * a_mat.tr_mul(x));
    Ok(x * (-1.0 / h) + a_mat * mu * (a / h) + cx * (a * a / (h * h)))
}

/// Intrinsic density of the angle on a circle.
#[derive(Clone, Debug, PartialEq)]
pub enum AngleDensity {
    Uniform,
    /// One-dimensional mixture in the angle, wrapped onto `[0, 2 pi)`.
    Wrapped(MogLatent),
}

impl AngleDensity {
    pub fn log_density(&self, theta: f64) -> f64 {
        use std::f64::consts::TAU;
        match self {
            AngleDensity::Uniform => -TAU.ln(),
            AngleDensity::Wrapped(mog) => {
                let s = mog.std();
                let wraps = (6.0 * s / TAU).ceil() as i64 + 1;
                let mut terms = Vec::new();
                for (w, m) in mog.weights().iter().zip(mog.means()) {
                    for j in -wraps..=wraps {
                        let u = (theta - m[0]).rem_euclid(TAU) + TAU * j as f64;
                        terms.push(
                            w.ln() - 0.5 * (TAU * s * s).ln() - u * u / (2.0 * s * s),
                        );
                    }
                }
                log_sum_exp(&terms)
            }
        }
    }
}

/// Data model attached to a manifold.
#[derive(Clone, Debug, PartialEq)]
pub enum DataModel {
    Latent(MogLatent),
    Angle(AngleDensity),
}

fn circle_log_terms(
    circle: &CircleManifold,
    angle: &AngleDensity,
    level: NoiseLevel,
    x: &Vector,
    n_quad: usize,
) -> (Vec<f64>, Vec<Vector>) {
    let d = x.len() as f64;
    let h = level.h;
    let step = std::f64::consts::TAU / n_quad as f64;
    let norm = -0.5 * d * (std::f64::consts::TAU * h).ln() + step.ln();
    let mut logs = Vec::with_capacity(n_quad);
    let mut points = Vec::with_capacity(n_quad);
    for i in 0..n_quad {
        let th = step * i as f64;
        let g = circle.embed(th) * level.a;
        logs.push(angle.log_density(th) - (x - &g).norm_squared() / (2.0 * h) + norm);
        points.push(g);
    }
    (logs, points)
}

/// `log p_t(x)` for the circle model by periodic trapezoid quadrature.
pub fn quadrature_log_density(
    circle: &CircleManifold,
    angle: &AngleDensity,
    level: NoiseLevel,
    x: &Vector,
    n_quad: usize,
) -> f64 {
    let (logs, _) = circle_log_terms(circle, angle, level, x, n_quad);
    log_sum_exp(&logs)
}

fn quadrature_score_once(
    circle: &CircleManifold,
    angle: &AngleDensity,
    level: NoiseLevel,
    x: &Vector,
    n_quad: usize,
) -> Vector {
    let (logs, points) = circle_log_terms(circle, angle, level, x, n_quad);
    let w = softmax(&logs);
    let mut s = Vector::zeros(x.len());
    for (wi, g) in w.iter().zip(&points) {
        s += (g - x) * *wi;
    }
    s / level.h
}

/// Score of the corrupted circle model, differentiated under the quadrature.
/// Evaluated at `n_quad` and `2 n_quad` nodes; the finer value is returned and
/// a relative change above `1e-6` is reported as non-convergence.
pub fn quadrature_score_circle(
    circle: &CircleManifold,
    angle: &AngleDensity,
    level: NoiseLevel,
    x: &Vector,
    n_quad: usize,
) -> Result<Vector> {
    if n_quad < 256 {
        return Err(Error::InvalidArgument("n_quad must be at least 256".into()));
    }
    if !(level.h > 0.0) {
        return Err(Error::ZeroNoise);
    }
    let coarse = quadrature_score_once(circle, angle, level, x, n_quad);
    let fine = quadrature_score_once(circle, angle, level, x, 2 * n_quad);
    let rel = (&fine - &coarse).norm() / fine.norm().max(1e-300);
    if rel > 1e-6 {
        return Err(Error::NonConvergence(rel));
    }
    Ok(fine)
}

/// Relative change between `n_quad` and `2 n_quad` nodes.
pub fn quadrature_refinement(
    circle: &CircleManifold,
    angle: &AngleDensity,
    level: NoiseLevel,
    x: &Vector,
    n_quad: usize,
) -> f64 {
    let coarse = quadrature_score_once(circle, angle, level, x, n_quad);
    let fine = quadrature_score_once(circle, angle, level, x, 2 * n_quad);
    (&fine - &coarse).norm() / fine.norm().max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use approx::assert_relative_eq;

    fn subspace(d: usize, k: usize) -> LinearManifold {
        LinearManifold::random(&mut Rng::new(21), d, k, 10.0).unwrap()
    }

    #[test]
    fn centered_gaussian_orthogonal_input_sees_isotropic_noise() {
        let lin = subspace(20, 3);
        let mog = MogLatent::centered(3, 0.5).unwrap();
        let level = NoiseLevel::additive(0.01);
        let g = Rng::new(1).gauss_vector(20);
        let x = &g - lin.project(&g);
        let s = exact_score_linear(&lin, &mog, level, &x).unwrap();
        assert_relative_eq!(s, -&x / 0.01, epsilon = 1e-10, max_relative = 1e-12);
    }

    #[test]
    fn centered_gaussian_score_is_linear() {
        let lin = subspace(15, 4);
        let mog = MogLatent::centered(4, 0.7).unwrap();
        let level = NoiseLevel::vp(0.3);
        let amb = AmbientMog::new(&lin, &mog, level).unwrap();
        let x = Rng::new(2).gauss_vector(15);
        let via_dense = -crate::numerics::solve_spd(&amb.covariance(), &Matrix::from_column_slice(15, 1, x.as_slice()))
            .unwrap()
            .column(0)
            .into_owned();
        assert_relative_eq!(amb.score(&x), via_dense, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn woodbury_inverse_matches_dense_solve() {
        let lin = subspace(30, 5);
        let mog = MogLatent::ring(5, 3, 2.0, 0.5).unwrap();
        let amb = AmbientMog::new(&lin, &mog, NoiseLevel::additive(0.01)).unwrap();
        let v = Rng::new(3).gauss_vector(30);
        let dense = crate::numerics::solve_spd(&amb.covariance(), &Matrix::from_column_slice(30, 1, v.as_slice()))
            .unwrap();
        let w = amb.cov_inv_apply(&v);
        assert!((w - dense.column(0)).norm() / dense.norm() < 1e-9);
    }

    #[test]
    fn batch_and_single_scores_agree() {
        let lin = subspace(12, 2);
        let mog = MogLatent::ring(2, 3, 2.0, 0.5).unwrap();
        let amb = AmbientMog::new(&lin, &mog, NoiseLevel::vp(0.2)).unwrap();
        let x = crate::numerics::gauss_matrix(&mut Rng::new(4), 12, 6, 1.0);
        let batch = amb.score_columns(&x);
        for j in 0..6 {
            let single = amb.score(&x.column(j).into_owned());
            assert!((batch.column(j) - single).amax() < 1e-12);
        }
    }

    #[test]
    fn score_is_stable_at_tiny_noise() {
        let lin = subspace(10, 2);
        let mog = MogLatent::ring(2, 3, 2.0, 0.01).unwrap();
        let amb = AmbientMog::new(&lin, &mog, NoiseLevel::additive(1e-6)).unwrap();
        let x = lin.lift(&Vector::from_column_slice(&[5.0, -3.0]));
        assert!(amb.score(&x).iter().all(|v| v.is_finite()));
        assert!(amb.log_density(&x).is_finite());
    }

    #[test]
    fn decomposition_terms() {
        let lin = subspace(20, 3);
        let m = Manifold::Linear(lin.clone());
        let mog = MogLatent::ring(3, 3, 2.0, 0.5).unwrap();
        let level = NoiseLevel::additive(0.01);
        let amb = AmbientMog::new(&lin, &mog, level).unwrap();
        let z = lin.lift(&Vector::from_column_slice(&[1.0, 0.5, -0.2]));
        let (n, r) = decompose_score(&m, level, &amb.score(&z), &z).unwrap();
        assert!(n.norm() < 1e-9);
        assert!((&n + &r - amb.score(&z)).amax() < 1e-12);
        let g = Rng::new(5).gauss_vector(20);
        let nu = {
            let p = &g - lin.project(&g);
            p.normalize()
        };
        let x = &z + &nu * 0.1;
        let s = amb.score(&x);
        let (n, r) = decompose_score(&m, level, &s, &x).unwrap();
        assert_relative_eq!(n.norm(), 10.0, epsilon = 1e-9);
        let model = DataModel::Latent(mog.clone());
        let r_star = residual_score(&m, &model, level, &z).unwrap();
        assert!((&r - &r_star).amax() < 1e-9 * (1.0 + r_star.amax()));
        let sum = &n + &r;
        let ulp = s.amax() * f64::EPSILON * 4.0;
        assert!((sum - &s).amax() <= ulp);
    }

    #[test]
    fn residual_is_tangential_and_gaussian_for_single_component() {
        let lin = subspace(25, 4);
        let m = Manifold::Linear(lin.clone());
        let mog = MogLatent::centered(4, 0.5).unwrap();
        let model = DataModel::Latent(mog.clone());
        let level = NoiseLevel::additive(1e-4);
        let zero = residual_score(&m, &model, level, &Vector::zeros(25)).unwrap();
        assert!(zero.norm() < 1e-14);
        let u = Vector::from_column_slice(&[0.3, -0.2, 0.1, 0.4]);
        let z = lin.lift(&u);
        let r = residual_score(&m, &model, level, &z).unwrap();
        let expected = lin.lift(&u) * (-1.0 / (0.25 + 1e-4));
        assert_relative_eq!(r, expected, epsilon = 1e-10);
        assert!((&r - lin.project(&r)).norm() < 1e-10);
        // h << s^2: close to the clean intrinsic score -A u / s^2
        assert!((r - lin.lift(&u) * (-4.0)).norm() / (u.norm() * 4.0) < 1e-3);
        assert!(residual_score(&m, &model, level, &(z + Rng::new(1).gauss_vector(25))).is_err());
    }

    #[test]
    fn affine_is_exact_for_centered_gaussian() {
        let lin = subspace(20, 5);
        let mog = MogLatent::centered(5, 0.5).unwrap();
        let mut rng = Rng::new(6);
        for h in [0.2, 0.5, 0.9] {
            let level = NoiseLevel::vp(h);
            let amb = AmbientMog::new(&lin, &mog, level).unwrap();
            for _ in 0..10 {
                let x = rng.gauss_vector(20);
                let a = affine_score(&lin, &mog, level, &x, AffineMoments::Tilted).unwrap();
                let e = amb.score(&x);
                assert!((&a - &e).norm() / e.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn raw_moments_are_not_exact_for_gaussians() {
        let lin = subspace(20, 5);
        let mog = MogLatent::centered(5, 0.5).unwrap();
        let level = NoiseLevel::vp(0.5);
        let amb = AmbientMog::new(&lin, &mog, level).unwrap();
        let x = lin.lift(&Vector::from_element(5, 1.0));
        let a = affine_score(&lin, &mog, level, &x, AffineMoments::Raw).unwrap();
        assert!((&a - amb.score(&x)).norm() / amb.score(&x).norm() > 1e-3);
    }

    #[test]
    fn affine_vanishes_at_origin_for_centered_mixture() {
        let lin = subspace(20, 5);
        let mog = MogLatent::ring(5, 3, 2.0, 0.5).unwrap();
        let s = affine_score(&lin, &mog, NoiseLevel::vp(0.7), &Vector::zeros(20), AffineMoments::Tilted)
            .unwrap();
        assert!(s.norm() < 1e-14);
        assert!(affine_score(&lin, &mog, NoiseLevel::vp(0.0), &Vector::zeros(20), AffineMoments::Tilted).is_err());
    }

    #[test]
    fn uniform_circle_has_no_tangential_score_on_symmetry_axis() {
        let c = CircleManifold::axis_aligned(3, 2.0).unwrap();
        let x = Vector::from_column_slice(&[1.3, 0.0, 0.4]);
        let s = quadrature_score_circle(&c, &AngleDensity::Uniform, NoiseLevel::additive(0.05), &x, 512)
            .unwrap();
        assert!(s[1].abs() < 1e-12 * s.norm());
    }

    #[test]
    fn circle_quadrature_converges() {
        let c = CircleManifold::axis_aligned(3, 2.0).unwrap();
        let mog = MogLatent::new(
            vec![0.5, 0.5],
            vec![Vector::from_element(1, 0.3), Vector::from_element(1, 2.5)],
            0.4,
        )
        .unwrap();
        let angle = AngleDensity::Wrapped(mog);
        let x = Vector::from_column_slice(&[1.5, 1.1, -0.2]);
        let rel = quadrature_refinement(&c, &angle, NoiseLevel::additive(0.05), &x, 512);
        assert!(rel < 1e-8, "relative change {rel:e}");
        assert!(quadrature_score_circle(&c, &angle, NoiseLevel::additive(0.05), &x, 256).is_ok());
        assert!(quadrature_score_circle(&c, &angle, NoiseLevel::additive(0.05), &x, 128).is_err());
    }

    #[test]
    fn wrapped_angle_density_integrates_to_one() {
        let mog = MogLatent::new(vec![1.0], vec![Vector::from_element(1, 3.0)], 1.5).unwrap();
        let a = AngleDensity::Wrapped(mog);
        let n = 4096;
        let step = std::f64::consts::TAU / n as f64;
        let total: f64 = (0..n).map(|i| a.log_density(step * i as f64).exp() * step).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-10);
    }
}
