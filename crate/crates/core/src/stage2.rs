//! Stage 2: a frozen random-feature map on the Stage-1 denoiser output with a
//! linear read-out fitted by ridge regression, and the assembled score
//! `-(x - x_hat)/h + U phi(x_hat)`.

use serde::{Deserialize, Serialize};

use crate::data::{CleanSource, ForwardBatch, NoiseLevel};
use crate::error::{Error, Result};
use crate::manifold::Manifold;
use crate::numerics::{gauss_matrix, solve_spd, sym_eigvals, Matrix, Rng, Vector};
use crate::oracle::{residual_score, DataModel};
use crate::par::{self, Exec};
use crate::stage1::Projector;

/// Columns per feature block when streaming Gram accumulation.
pub const FEATURE_CHUNK: usize = 512;

/// Time coordinate of the head input. Noise levels span decades, so the
/// head sees `ln h`.
pub fn time_coord(h: f64) -> f64 {
    h.ln()
}

/// Random-feature head. With `time_input` the map sees `(x_hat, ln h)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RFHead {
    /// `(d or d+1) x m2` frozen input weights.
    pub vx: Matrix,
    pub b_feat: Vector,
    /// `d x m2` read-out.
    pub u: Matrix,
    pub lambda: f64,
    pub time_input: bool,
}

impl RFHead {
    /// `V_x ~ N(0, 1/d)`, `b ~ U(-1, 1)`, `U = 0`.
    pub fn new(rng: &mut Rng, d: usize, m2: usize, time_input: bool) -> Self {
        let rows = d + usize::from(time_input);
        let vx = gauss_matrix(rng, rows, m2, 1.0 / (d as f64).sqrt());
        let b_feat = Vector::from_iterator(m2, (0..m2).map(|_| rng.uniform(-1.0, 1.0)));
        Self { vx, b_feat, u: Matrix::zeros(d, m2), lambda: 0.0, time_input }
    }

    pub fn width(&self) -> usize {
        self.vx.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.u.nrows()
    }

    /// `V_x^T x_hat + b`, plus the time row at `h` when given.
    fn pre_activation(&self, x_hat: &Matrix, h: Option<f64>) -> Matrix {
        let d = self.out_dim();
        let mut z = self.vx.rows(0, d).tr_mul(x_hat);
        let time_row = match h {
            Some(h) if self.time_input => Some((self.vx.row(d).transpose(), time_coord(h))),
            _ => None,
        };
        for mut col in z.column_iter_mut() {
            col += &self.b_feat;
            if let Some((v, tc)) = &time_row {
                col.axpy(*tc, v, 1.0);
            }
        }
        z
    }

    /// Feature matrix `m2 x n`, one column per input column, all at noise
    /// level `h` (ignored without a time input).
    pub fn features(&self, x_hat: &Matrix, h: f64) -> Matrix {
        let scale = 1.0 / (self.width() as f64).sqrt();
        let mut z = self.pre_activation(x_hat, Some(h));
        z.apply(|v| *v = v.tanh() * scale);
        z
    }

    /// Features with a per-column noise level.
    pub fn features_at(&self, x_hat: &Matrix, hs: &[f64]) -> Matrix {
        assert_eq!(x_hat.ncols(), hs.len());
        if !self.time_input {
            return self.features(x_hat, 0.0);
        }
        let scale = 1.0 / (self.width() as f64).sqrt();
        let mut z = self.pre_activation(x_hat, None);
        let tv = self.vx.row(self.out_dim()).transpose();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.axpy(time_coord(hs[j]), &tv, 1.0);
            col.apply(|v| *v = v.tanh() * scale);
        }
        z
    }

    pub fn rf_features(&self, x_hat: &Vector, h: f64) -> Vector {
        self.features(&Matrix::from_column_slice(x_hat.len(), 1, x_hat.as_slice()), h)
            .column(0)
            .into_owned()
    }

    /// `U phi(x_hat)` for every column.
    pub fn forward_columns(&self, x_hat: &Matrix, h: f64) -> Matrix {
        &self.u * self.features(x_hat, h)
    }

    pub fn forward(&self, x_hat: &Vector, h: f64) -> Vector {
        &self.u * self.rf_features(x_hat, h)
    }
}

/// Streaming sufficient statistics of a vector-valued least-squares problem:
/// `G = sum phi phi^T`, `C = sum y phi^T`, `sum |y|^2` and the count.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeAccumulator {
    pub gram: Matrix,
    pub cross: Matrix,
    pub y_sq: f64,
    pub n: usize,
}

impl RidgeAccumulator {
    pub fn new(out_dim: usize, width: usize) -> Self {
        Self {
            gram: Matrix::zeros(width, width),
            cross: Matrix::zeros(out_dim, width),
            y_sq: 0.0,
            n: 0,
        }
    }

    pub fn add(&mut self, phi: &Matrix, y: &Matrix) {
        assert_eq!(phi.ncols(), y.ncols());
        self.gram.gemm(1.0, phi, &phi.transpose(), 1.0);
        self.cross.gemm(1.0, y, &phi.transpose(), 1.0);
        self.y_sq += y.norm_squared();
        self.n += phi.ncols();
    }

    pub fn merge(&mut self, other: &RidgeAccumulator) {
        self.gram += &other.gram;
        self.cross += &other.cross;
        self.y_sq += other.y_sq;
        self.n += other.n;
    }

    /// `1e-4 tr(G) / (n m)`.
    pub fn default_lambda(&self) -> f64 {
        1e-4 * self.gram.trace() / (self.n.max(1) as f64 * self.gram.nrows() as f64)
    }

    fn regularized(&self, lambda: f64) -> Matrix {
        let mut a = self.gram.clone();
        let shift = self.n as f64 * lambda;
        for i in 0..a.nrows() {
            a[(i, i)] += shift;
        }
        a
    }

    /// Minimizer of `(1/n) sum |U phi_i - y_i|^2 + lambda |U|_F^2`.
    pub fn solve(&self, lambda: f64) -> Result<Matrix> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("ridge coefficient {lambda} must be positive")));
        }
        if self.n == 0 {
            return Err(Error::InvalidArgument("ridge fit needs at least one sample".into()));
        }
        let ut = solve_spd(&self.regularized(lambda), &self.cross.transpose())?;
        Ok(ut.transpose())
    }

    /// `|C - U (G + n lambda I)|_F / |C|_F`.
    pub fn kkt_residual(&self, u: &Matrix, lambda: f64) -> f64 {
        let r = &self.cross - u * self.regularized(lambda);
        let c = self.cross.norm();
        if c == 0.0 {
            r.norm()
        } else {
            r.norm() / c
        }
    }

    /// Ridge objective evaluated from the statistics.
    pub fn objective(&self, u: &Matrix, lambda: f64) -> f64 {
        let n = self.n as f64;
        let fit = self.y_sq - 2.0 * u.dot(&self.cross) + (u * &self.gram).dot(u);
        fit / n + lambda * u.norm_squared()
    }
}

/// Ridge objective evaluated directly on the data.
pub fn ridge_objective(u: &Matrix, phi: &Matrix, y: &Matrix, lambda: f64) -> f64 {
    let r = u * phi - y;
    r.norm_squared() / phi.ncols() as f64 + lambda * u.norm_squared()
}

/// Plain full-batch gradient descent on the ridge objective with step
/// `lr`; `None` picks `1/L` for the smoothness constant `L`.
pub fn ridge_gradient_descent(
    acc: &RidgeAccumulator,
    lambda: f64,
    steps: usize,
    lr: Option<f64>,
) -> Result<Matrix> {
    let n = acc.n as f64;
    let g = &acc.gram / n;
    let c = &acc.cross / n;
    let lr = match lr {
        Some(v) => v,
        None => {
            let top = sym_eigvals(&g)?.first().copied().unwrap_or(0.0);
            1.0 / (2.0 * (top + lambda))
        }
    };
    let mut u = Matrix::zeros(acc.cross.nrows(), acc.cross.ncols());
    for _ in 0..steps {
        let grad = (&u * &g - &c + &u * lambda) * 2.0;
        u -= grad * lr;
    }
    Ok(u)
}

/// Adam on the ridge objective over mini-batches, resumable so callers can
/// log between chunks of steps.
#[derive(Clone, Debug)]
pub struct IterativeRidge {
    pub u: Matrix,
    adam: crate::optim::Adam,
    slot: crate::optim::AdamSlot,
}

impl IterativeRidge {
    pub fn new(out_dim: usize, width: usize, lr: f64) -> Self {
        Self {
            u: Matrix::zeros(out_dim, width),
            adam: crate::optim::Adam::new(lr),
            slot: crate::optim::AdamSlot::new(out_dim * width),
        }
    }

    pub fn run(&mut self, phi: &Matrix, y: &Matrix, lambda: f64, batch: usize, steps: usize, rng: &mut Rng) {
        let n = phi.ncols();
        let bs = batch.min(n).max(1);
        for _ in 0..steps {
            let idx: Vec<usize> = (0..bs).map(|_| (rng.next_u64() % n as u64) as usize).collect();
            let pb = phi.select_columns(&idx);
            let yb = y.select_columns(&idx);
            let grad = ((&self.u * &pb - yb) * pb.transpose()) * (2.0 / bs as f64)
                + &self.u * (2.0 * lambda);
            self.adam.tick();
            self.adam.update(&mut self.slot, self.u.as_mut_slice(), grad.as_slice());
        }
    }
}

/// Accumulates statistics over column blocks in a fixed order.
pub fn accumulate(
    head: &RFHead,
    x_hat: &Matrix,
    hs: &[f64],
    y: &Matrix,
    exec: Exec,
) -> RidgeAccumulator {
    accumulate_weighted(head, x_hat, hs, y, None, exec)
}

/// Sufficient statistics of the weighted problem: sample `i` enters with
/// weight `w_i`, i.e. as `(sqrt(w_i) phi_i, sqrt(w_i) y_i)`.
pub fn accumulate_weighted(
    head: &RFHead,
    x_hat: &Matrix,
    hs: &[f64],
    y: &Matrix,
    weights: Option<&[f64]>,
    exec: Exec,
) -> RidgeAccumulator {
    let parts = par::map_chunks(exec, x_hat.ncols(), FEATURE_CHUNK, |r| {
        let xb = x_hat.columns(r.start, r.len()).into_owned();
        let mut phi = head.features_at(&xb, &hs[r.clone()]);
        let mut yb = y.columns(r.start, r.len()).into_owned();
        if let Some(w) = weights {
            scale_columns(&mut phi, &w[r.clone()]);
            scale_columns(&mut yb, &w[r.clone()]);
        }
        let mut acc = RidgeAccumulator::new(head.out_dim(), head.width());
        acc.add(&phi, &yb);
        acc
    });
    let mut acc = RidgeAccumulator::new(head.out_dim(), head.width());
    for p in &parts {
        acc.merge(p);
    }
    acc
}

/// Multiplies column `j` by `sqrt(w_j)`.
pub fn scale_columns(m: &mut Matrix, w: &[f64]) {
    for (mut col, wj) in m.column_iter_mut().zip(w) {
        col *= wj.sqrt();
    }
}

/// Fits `U` in closed form. `lambda = None` uses the scale-aware default.
/// Returns the KKT residual of the solve.
pub fn ridge_fit(
    head: &mut RFHead,
    x_hat: &Matrix,
    hs: &[f64],
    y: &Matrix,
    lambda: Option<f64>,
    exec: Exec,
) -> Result<f64> {
    ridge_fit_weighted(head, x_hat, hs, y, None, lambda, exec)
}

pub fn ridge_fit_weighted(
    head: &mut RFHead,
    x_hat: &Matrix,
    hs: &[f64],
    y: &Matrix,
    weights: Option<&[f64]>,
    lambda: Option<f64>,
    exec: Exec,
) -> Result<f64> {
    let acc = accumulate_weighted(head, x_hat, hs, y, weights, exec);
    let lam = lambda.unwrap_or_else(|| acc.default_lambda());
    head.u = acc.solve(lam)?;
    head.lambda = lam;
    Ok(acc.kkt_residual(&head.u, lam))
}

/// `-(x - x_hat)/h + U phi(x_hat)`.
pub fn sild_score<P: Projector + ?Sized>(stage1: &P, head: &RFHead, x: &Vector, h: f64) -> Vector {
    let x_hat = stage1.project_one(x);
    let head_out = head.forward(&x_hat, h);
    (&x_hat - x) / h + head_out
}

pub fn sild_score_columns<P: Projector + ?Sized>(
    stage1: &P,
    head: &RFHead,
    x: &Matrix,
    h: f64,
) -> Matrix {
    let x_hat = stage1.project_columns(x);
    let head_out = head.forward_columns(&x_hat, h);
    (&x_hat - x) / h + head_out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    Dsm,
    Oracle,
}

/// Regression data for the head.
#[derive(Clone, Debug)]
pub struct Stage2Data {
    pub x_hat: Matrix,
    pub y: Matrix,
    pub hs: Vec<f64>,
    /// Regression weights `h / max h`. Residual targets carry noise of
    /// variance `1/h`, so unweighted small-`h` samples swamp the fit.
    pub weights: Vec<f64>,
    pub batch: ForwardBatch,
}

/// Draws `n` corrupted points at each of `levels` (cycled) and forms the
/// residual targets. Dsm mode uses `-eps/sqrt(h) + (x_t - x_hat)/h`; oracle
/// mode evaluates the exact residual score at the projection of `x_hat`.
pub fn build_stage2_targets<P: Projector + ?Sized>(
    mode: TargetMode,
    stage1: &P,
    source: &CleanSource,
    oracle: Option<(&Manifold, &DataModel)>,
    levels: &[NoiseLevel],
    gate_threshold: f64,
    rng: &mut Rng,
    n: usize,
) -> Result<Stage2Data> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("no stage-2 noise levels".into()));
    }
    for lv in levels {
        if !(lv.h > 0.0) {
            return Err(Error::ZeroNoise);
        }
        if lv.h > gate_threshold {
            return Err(Error::PhaseViolation { h: lv.h, threshold: gate_threshold });
        }
    }
    let x0 = source.draw(rng, n)?;
    let lv: Vec<NoiseLevel> = (0..n).map(|j| levels[j % levels.len()]).collect();
    let batch = ForwardBatch::at_levels(x0, lv, rng);
    let x_hat = stage1.project_columns(&batch.xt);
    let hs: Vec<f64> = batch.levels.iter().map(|l| l.h).collect();
    let y = match mode {
        TargetMode::Dsm => {
            let mut y = batch.dsm_targets()?;
            for j in 0..n {
                let gap = (batch.xt.column(j) - x_hat.column(j)) / hs[j];
                let mut col = y.column_mut(j);
                col += gap;
            }
            y
        }
        TargetMode::Oracle => {
            let (manifold, model) = oracle.ok_or_else(|| {
                Error::InvalidArgument("oracle targets need the data model".into())
            })?;
            let mut y = Matrix::zeros(x_hat.nrows(), n);
            for j in 0..n {
                let z = manifold.project(&x_hat.column(j).into_owned())?;
                y.set_column(j, &residual_score(manifold, model, batch.levels[j], &z)?);
            }
            y
        }
    };
    let h_max = hs.iter().cloned().fold(0.0, f64::max);
    let weights = hs.iter().map(|h| h / h_max).collect();
    Ok(Stage2Data { x_hat, y, hs, weights, batch })
}

/// Eigenvalues of the empirical feature Gram `K_ij = phi_i^T phi_j`, sorted
/// descending.
pub fn kernel_spectrum(head: &RFHead, x: &Matrix, h: f64) -> Result<Vec<f64>> {
    if x.ncols() > 2048 {
        return Err(Error::SizeCap { n: x.ncols(), cap: 2048 });
    }
    let phi = head.features(x, h);
    let k = phi.tr_mul(&phi);
    sym_eigvals(&k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_weights_give_zero_features() {
        let mut head = RFHead::new(&mut Rng::new(1), 4, 6, false);
        head.vx.fill(0.0);
        head.b_feat.fill(0.0);
        let phi = head.rf_features(&Vector::from_element(4, 3.0), 0.1);
        assert_eq!(phi, Vector::zeros(6));
    }

    #[test]
    fn single_feature_by_hand() {
        let mut head = RFHead::new(&mut Rng::new(2), 3, 1, false);
        head.vx.fill(0.0);
        head.vx[(0, 0)] = 1.0;
        head.b_feat.fill(0.0);
        let e1 = Vector::from_column_slice(&[1.0, 0.0, 0.0]);
        let phi = head.rf_features(&e1, 0.0);
        assert_relative_eq!(phi[0], 1f64.tanh(), epsilon = 1e-15);
        assert!((phi[0] - 0.76159).abs() < 1e-5);
    }

    #[test]
    fn feature_energy_is_bounded() {
        let head = RFHead::new(&mut Rng::new(3), 5, 40, true);
        let mut rng = Rng::new(4);
        let x = gauss_matrix(&mut rng, 5, 2000, 10.0);
        let phi = head.features(&x, 0.7);
        for c in phi.column_iter() {
            assert!(c.norm_squared() <= 1.0);
        }
    }

    #[test]
    fn scalar_ridge_matches_normal_equation() {
        let mut rng = Rng::new(5);
        let mut head = RFHead::new(&mut rng, 1, 1, false);
        let x = gauss_matrix(&mut rng, 1, 50, 1.0);
        let y = gauss_matrix(&mut rng, 1, 50, 1.0);
        let lambda = 0.3;
        ridge_fit(&mut head, &x, &vec![0.0; 50], &y, Some(lambda), Exec::Sequential).unwrap();
        let phi = head.features(&x, 0.0);
        let syp: f64 = phi.iter().zip(y.iter()).map(|(p, y)| p * y).sum();
        let spp: f64 = phi.iter().map(|p| p * p).sum();
        let expected = syp / (spp + 50.0 * lambda);
        assert!((head.u[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn heavy_ridge_shrinks_to_zero() {
        let mut rng = Rng::new(6);
        let mut head = RFHead::new(&mut rng, 3, 8, false);
        let x = gauss_matrix(&mut rng, 3, 100, 1.0);
        let y = gauss_matrix(&mut rng, 3, 100, 1.0);
        ridge_fit(&mut head, &x, &vec![0.0; 100], &y, Some(1e6), Exec::Sequential).unwrap();
        assert!(head.u.norm() < 1e-5);
    }

    #[test]
    fn kkt_and_objective_agree() {
        let mut rng = Rng::new(7);
        let mut head = RFHead::new(&mut rng, 4, 10, false);
        let x = gauss_matrix(&mut rng, 4, 300, 1.0);
        let y = gauss_matrix(&mut rng, 4, 300, 1.0);
        let hs = vec![0.0; 300];
        let kkt = ridge_fit(&mut head, &x, &hs, &y, Some(1e-3), Exec::Sequential).unwrap();
        assert!(kkt < 1e-10);
        let acc = accumulate(&head, &x, &hs, &y, Exec::Sequential);
        let phi = head.features(&x, 0.0);
        let direct = ridge_objective(&head.u, &phi, &y, 1e-3);
        assert_relative_eq!(acc.objective(&head.u, 1e-3), direct, max_relative = 1e-10);
        let mut perturbed = head.u.clone();
        perturbed[(0, 0)] += 1e-3;
        assert!(ridge_objective(&perturbed, &phi, &y, 1e-3) > direct);
    }

    #[test]
    fn zero_head_gives_pure_contraction() {
        let mut rng = Rng::new(8);
        let lin = crate::manifold::LinearManifold::random(&mut rng, 6, 2, 1.0).unwrap();
        let head = RFHead::new(&mut rng, 6, 5, false);
        let x = rng.gauss_vector(6);
        let s = sild_score(&lin, &head, &x, 0.25);
        let expected = (lin.project(&x) - &x) / 0.25;
        assert_eq!(s, expected);
        let on = lin.project(&x);
        assert!(sild_score(&lin, &head, &on, 0.25).amax() < 1e-14);
    }

    #[test]
    fn dsm_target_vanishes_for_clean_on_manifold_draw() {
        let mut rng = Rng::new(9);
        let lin = crate::manifold::LinearManifold::random(&mut rng, 5, 2, 1.0).unwrap();
        let mog = crate::data::MogLatent::centered(2, 1.0).unwrap();
        let source = CleanSource::Stream { manifold: Manifold::Linear(lin.clone()), mog };
        let lv = NoiseLevel::additive(0.1);
        let mut data =
            build_stage2_targets(TargetMode::Dsm, &lin, &source, None, &[lv], 1.0, &mut rng, 3)
                .unwrap();
        // rebuild with eps = 0
        data.batch.eps.fill(0.0);
        data.batch.xt = data.batch.x0.clone();
        let x_hat = lin.project_columns(&data.batch.xt);
        let y = (&data.batch.xt - &x_hat) / 0.1;
        assert!(y.amax() < 1e-12);
    }

    #[test]
    fn phase_violation_is_reported() {
        let mut rng = Rng::new(10);
        let lin = crate::manifold::LinearManifold::random(&mut rng, 5, 2, 1.0).unwrap();
        let mog = crate::data::MogLatent::centered(2, 1.0).unwrap();
        let source = CleanSource::Stream { manifold: Manifold::Linear(lin.clone()), mog };
        let r = build_stage2_targets(
            TargetMode::Dsm,
            &lin,
            &source,
            None,
            &[NoiseLevel::additive(0.5)],
            0.25,
            &mut rng,
            4,
        );
        assert!(matches!(r, Err(Error::PhaseViolation { .. })));
    }

    #[test]
    fn oracle_targets_are_tangential() {
        let mut rng = Rng::new(11);
        let lin = crate::manifold::LinearManifold::random(&mut rng, 8, 2, 1.0).unwrap();
        let mog = crate::data::MogLatent::ring(2, 3, 1.0, 0.3).unwrap();
        let m = Manifold::Linear(lin.clone());
        let model = DataModel::Latent(mog.clone());
        let source = CleanSource::Stream { manifold: m.clone(), mog };
        let data = build_stage2_targets(
            TargetMode::Oracle,
            &lin,
            &source,
            Some((&m, &model)),
            &[NoiseLevel::additive(0.05)],
            1.0,
            &mut rng,
            64,
        )
        .unwrap();
        let normal = &data.y - lin.project_columns(&data.y);
        assert!(normal.norm() / data.y.norm() < 1e-8);
    }

    #[test]
    fn spectrum_of_single_sample_and_duplicates() {
        let mut rng = Rng::new(12);
        let head = RFHead::new(&mut rng, 4, 16, false);
        let x = gauss_matrix(&mut rng, 4, 1, 1.0);
        let ev = kernel_spectrum(&head, &x, 0.0).unwrap();
        assert_eq!(ev.len(), 1);
        assert_relative_eq!(ev[0], head.features(&x, 0.0).norm_squared(), epsilon = 1e-14);
        let base = gauss_matrix(&mut rng, 4, 3, 1.0);
        let dup = Matrix::from_columns(&[
            base.column(0).into_owned(),
            base.column(1).into_owned(),
            base.column(0).into_owned(),
            base.column(2).into_owned(),
            base.column(1).into_owned(),
        ]);
        let ev = kernel_spectrum(&head, &dup, 0.0).unwrap();
        let nonzero = ev.iter().filter(|v| **v > 1e-10).count();
        assert!(nonzero <= 3);
        assert!(ev.iter().all(|v| *v >= -1e-10));
    }

    #[test]
    fn parallel_accumulation_is_identical() {
        let mut rng = Rng::new(13);
        let head = RFHead::new(&mut rng, 5, 12, true);
        let x = gauss_matrix(&mut rng, 5, 1300, 1.0);
        let y = gauss_matrix(&mut rng, 5, 1300, 1.0);
        let hs: Vec<f64> = (0..1300).map(|i| 0.01 * (i % 7) as f64).collect();
        let a = accumulate(&head, &x, &hs, &y, Exec::Parallel);
        let b = accumulate(&head, &x, &hs, &y, Exec::Sequential);
        assert_eq!(a, b);
    }
}
