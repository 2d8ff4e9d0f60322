//! Stage 1: the conservative-form network
//! `f1(x) = (W diag(a) tanh(W^T x + b) - x) / h1`, its potential, exact
//! gradients of the denoising loss, the training loop and its diagnostics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{CleanSource, ForwardBatch, NoiseLevel};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Vector};
use crate::optim::{sgd_update, Adam, AdamSlot, OptimizerKind};
use crate::par::{self, Exec};

/// Columns per gradient chunk. Fixed so reductions happen in one order.
const GRAD_CHUNK: usize = 512;
const PL_FLOOR: f64 = 1e-12;

/// Anything that maps noisy points to an estimate of their projection.
pub trait Projector: Sync {
    fn project_columns(&self, x: &Matrix) -> Matrix;

    fn project_one(&self, x: &Vector) -> Vector {
        self.project_columns(&Matrix::from_column_slice(x.len(), 1, x.as_slice()))
            .column(0)
            .into_owned()
    }
}

impl Projector for crate::manifold::LinearManifold {
    fn project_columns(&self, x: &Matrix) -> Matrix {
        crate::manifold::LinearManifold::project_columns(self, x)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

/// `log cosh z` without overflow.
fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Params {
    pub w: Matrix,
    pub a: Vector,
    pub b: Vector,
    pub h1: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub freeze_ab: bool,
    #[serde(default)]
    pub l2_w: f64,
}

/// Initialization law: `W ~ N(0, sigma_w^2)`, `a = +-alpha0/m`,
/// `b ~ U(-1, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Init {
    pub width: usize,
    /// `None` means `1/sqrt(d)`.
    pub sigma_w: Option<f64>,
    pub alpha0: f64,
}

impl Default for Stage1Init {
    fn default() -> Self {
        Self { width: 200, sigma_w: None, alpha0: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Grads {
    pub w: Matrix,
    pub a: Vector,
    pub b: Vector,
}

/// Intermediate activations for a block of columns.
struct Activations {
    s: Matrix,
    a_s: Matrix,
    x_hat: Matrix,
}

impl Stage1Params {
    pub fn init(rng: &mut Rng, d: usize, h1: f64, init: &Stage1Init) -> Self {
        let m = init.width;
        let sigma_w = init.sigma_w.unwrap_or(1.0 / (d as f64).sqrt());
        let w = crate::numerics::gauss_matrix(rng, d, m, sigma_w);
        let a = Vector::from_iterator(m, (0..m).map(|_| rng.rademacher() * init.alpha0 / m as f64));
        let b = Vector::from_iterator(m, (0..m).map(|_| rng.uniform(-1.0, 1.0)));
        Self { w, a, b, h1, activation: Activation::Tanh, freeze_ab: false, l2_w: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn width(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.a.iter()).chain(self.b.iter()).all(|v| v.is_finite())
    }

    fn activations(&self, x: &Matrix) -> Activations {
        let mut s = self.w.tr_mul(x);
        for mut col in s.column_iter_mut() {
            col += &self.b;
            col.apply(|v| *v = v.tanh());
        }
        let mut a_s = s.clone();
        for mut col in a_s.column_iter_mut() {
            col.component_mul_assign(&self.a);
        }
        let x_hat = &self.w * &a_s;
        Activations { s, a_s, x_hat }
    }

    /// Induced denoiser `x_hat = W diag(a) tanh(W^T x + b)` for every column.
    pub fn projection_columns(&self, x: &Matrix) -> Matrix {
        self.activations(x).x_hat
    }

    pub fn projection_hat(&self, x: &Vector) -> Vector {
        let mut s = self.w.tr_mul(x) + &self.b;
        s.apply(|v| *v = v.tanh());
        &self.w * s.component_mul(&self.a)
    }

    /// `f1(x) = (x_hat - x) / h1`.
    pub fn forward(&self, x: &Vector) -> Vector {
        (self.projection_hat(x) - x) / self.h1
    }

    pub fn forward_columns(&self, x: &Matrix) -> Matrix {
        (self.projection_columns(x) - x) / self.h1
    }

    /// `Phi(x) = |x|^2 / (2 h1) - (1/h1) sum_j a_j log cosh(w_j^T x + b_j)`,
    /// with `f1 = -grad Phi`.
    pub fn potential(&self, x: &Vector) -> f64 {
        let z = self.w.tr_mul(x) + &self.b;
        let s: f64 = z.iter().zip(self.a.iter()).map(|(zj, aj)| aj * log_cosh(*zj)).sum();
        x.norm_squared() / (2.0 * self.h1) - s / self.h1
    }

    /// `(1/m) sum_j |w_j|^2`.
    pub fn second_moment(&self) -> f64 {
        self.w.norm_squared() / self.width() as f64
    }

    /// Backpropagates `G = dL/dx_hat` (already scaled) through the denoiser.
    fn backprop(&self, x: &Matrix, act: &Activations, g: &Matrix) -> Stage1Grads {
        let q = self.w.tr_mul(g);
        let ga = Vector::from_iterator(
            self.width(),
            (0..self.width()).map(|j| act.s.row(j).dot(&q.row(j))),
        );
        let mut dmat = q;
        for i in 0..dmat.ncols() {
            for j in 0..dmat.nrows() {
                let sv = act.s[(j, i)];
                dmat[(j, i)] *= self.a[j] * (1.0 - sv * sv);
            }
        }
        let gb = dmat.column_sum();
        let gw = g * act.a_s.transpose() + x * dmat.transpose();
        Stage1Grads { w: gw, a: ga, b: gb }
    }

    /// Mean of `1/2 |f1(x_t) + eps/sqrt(h1)|^2` over the batch plus
    /// `(l2_w / 2) |W|_F^2 / m`, with exact gradients. Every column must sit
    /// at noise level `h1`.
    pub fn dsm_loss_and_grads(&self, batch: &ForwardBatch, exec: Exec) -> (f64, Stage1Grads) {
        let n = batch.len();
        assert!(n > 0, "empty batch");
        let inv_sqrt_h = 1.0 / self.h1.sqrt();
        let h1 = self.h1;
        let parts = par::map_chunks(exec, n, GRAD_CHUNK, |r| {
            let x = batch.xt.columns(r.start, r.len()).into_owned();
            let eps = batch.eps.columns(r.start, r.len());
            let act = self.activations(&x);
            let resid = (&act.x_hat - &x) / h1 + eps * inv_sqrt_h;
            let loss = 0.5 * resid.norm_squared();
            let g = resid / h1;
            (loss, self.backprop(&x, &act, &g))
        });
        let m = self.width() as f64;
        let mut loss = 0.0;
        let mut grads = Stage1Grads {
            w: Matrix::zeros(self.dim(), self.width()),
            a: Vector::zeros(self.width()),
            b: Vector::zeros(self.width()),
        };
        for (l, g) in parts {
            loss += l;
            grads.w += g.w;
            grads.a += g.a;
            grads.b += g.b;
        }
        let inv_n = 1.0 / n as f64;
        loss *= inv_n;
        grads.w *= inv_n;
        grads.a *= inv_n;
        grads.b *= inv_n;
        if self.l2_w > 0.0 {
            loss += 0.5 * self.l2_w * self.w.norm_squared() / m;
            grads.w += &self.w * (self.l2_w / m);
        }
        (loss, grads)
    }

    /// Loss only, for finite-difference checks.
    pub fn dsm_loss(&self, batch: &ForwardBatch) -> f64 {
        self.dsm_loss_and_grads(batch, Exec::Sequential).0
    }
}

impl Projector for Stage1Params {
    fn project_columns(&self, x: &Matrix) -> Matrix {
        self.projection_columns(x)
    }

    fn project_one(&self, x: &Vector) -> Vector {
        self.projection_hat(x)
    }
}

/// One diagnostics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub dsm_loss: f64,
    pub manifold_err: f64,
    pub orthogonal_err: f64,
    pub alignment_risk_f: f64,
    pub second_moment_m2: f64,
    pub pl_ratio: f64,
    pub wall_ms: u64,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str =
        "step,dsm_loss,manifold_err,orthogonal_err,alignment_risk_F,second_moment_m2,pl_ratio,wall_ms";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            self.step,
            self.dsm_loss,
            self.manifold_err,
            self.orthogonal_err,
            self.alignment_risk_f,
            self.second_moment_m2,
            self.pl_ratio,
            self.wall_ms
        )
    }
}

/// Renders rows as CSV with the fixed header.
pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from(TrainLogRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Fixed evaluation draws with everything the diagnostics need from the
/// oracle precomputed: true projections and true scores.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub batch: ForwardBatch,
    pub proj: Matrix,
    pub score: Matrix,
    /// `score + (x - proj) / h`: what the residual head should output.
    pub residual: Matrix,
    pub level: NoiseLevel,
}

impl EvalSet {
    pub fn new(batch: ForwardBatch, proj: Matrix, score: Matrix) -> Result<Self> {
        let level = *batch
            .levels
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty evaluation batch".into()))?;
        if batch.levels.iter().any(|l| *l != level) {
            return Err(Error::InvalidArgument("evaluation batch mixes noise levels".into()));
        }
        if !(level.h > 0.0) {
            return Err(Error::ZeroNoise);
        }
        let residual = &score + (&batch.xt - &proj) / level.h;
        Ok(Self { batch, proj, score, residual, level })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }
}

/// Diagnostic quantities at one parameter state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnostics {
    pub dsm_loss: f64,
    pub manifold_err: f64,
    pub orthogonal_err: f64,
    pub alignment_risk_f: f64,
    pub second_moment_m2: f64,
    pub pl_ratio: f64,
}

/// Evaluates the diagnostics of a Stage-1 network, optionally with residual
/// head outputs `head_out` (one column per evaluation point).
///
/// The model score is read in its structural form `c(x) + r(x)` with the
/// contraction `c(x) = -(x - x_hat)/h` and the head `r` (zero when absent),
/// and each part is compared to its exact counterpart:
/// `orthogonal_err = mean |c - c*|^2` with `c* = -(x - Pi x)/h`, and
/// `manifold_err = mean |r - r*|^2` with `r* = s* - c*`.
/// `alignment_risk_F = 1/2 mean |x_hat - Pi x|^2`, so `orthogonal_err` equals
/// `2 F / h^2`. `dsm_loss` is the denoising loss of `c + r` at the
/// evaluation level, plus the weight penalty.
pub fn diagnostics(p: &Stage1Params, eval: &EvalSet, head_out: Option<&Matrix>) -> Diagnostics {
    let n = eval.len() as f64;
    let x = &eval.batch.xt;
    let act = p.activations(x);
    let gap = &act.x_hat - &eval.proj;
    let f = 0.5 * gap.norm_squared() / n;
    let h = eval.level.h;
    let orthogonal_err = gap.norm_squared() / (h * h) / n;
    let manifold_err = match head_out {
        Some(r) => (r - &eval.residual).norm_squared() / n,
        None => eval.residual.norm_squared() / n,
    };
    // dF/dW with G = gap / n
    let g = &gap / n;
    let grads = p.backprop(x, &act, &g);
    let m = p.width() as f64;
    let pl_ratio = m * grads.w.norm_squared() / f.max(PL_FLOOR);
    // denoising loss of the model score c + r at the evaluation level
    let mut resid = (&act.x_hat - x) / h + &eval.batch.eps / h.sqrt();
    if let Some(r) = head_out {
        resid += r;
    }
    let dsm_loss = 0.5 * resid.norm_squared() / n
        + 0.5 * p.l2_w * p.w.norm_squared() / p.width() as f64;
    Diagnostics {
        dsm_loss,
        manifold_err,
        orthogonal_err,
        alignment_risk_f: f,
        second_moment_m2: p.second_moment(),
        pl_ratio,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub min_steps: usize,
    pub log_every: usize,
    pub optimizer: OptimizerKind,
    /// Steps covered by each moving-average window of `orthogonal_err`.
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Stop when the plateau rule fires; otherwise run to `max_steps`.
    pub stop_on_plateau: bool,
    pub divergence_factor: f64,
    /// Write elapsed milliseconds into `wall_ms`; off keeps logs byte-stable.
    pub record_wall_time: bool,
    pub exec: Exec,
}

impl Default for Stage1TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 4096,
            max_steps: 4000,
            min_steps: 400,
            log_every: 20,
            optimizer: OptimizerKind::Adam,
            plateau_window: 200,
            plateau_tol: 1e-3,
            stop_on_plateau: true,
            divergence_factor: 1e3,
            record_wall_time: false,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub params: Stage1Params,
    pub log: Vec<TrainLogRow>,
    pub steps: usize,
    pub plateaued: bool,
}

fn plateau_reached(rows: &[TrainLogRow], per_window: usize, tol: f64) -> bool {
    if per_window == 0 || rows.len() < 2 * per_window {
        return false;
    }
    let n = rows.len();
    let mean = |s: &[TrainLogRow]| s.iter().map(|r| r.orthogonal_err).sum::<f64>() / s.len() as f64;
    let recent = mean(&rows[n - per_window..]);
    let before = mean(&rows[n - 2 * per_window..n - per_window]);
    (before - recent).abs() / before.abs().max(1e-300) < tol
}

/// Trains the network on fresh corrupted draws at `level` and logs
/// diagnostics on `eval`. With `freeze_ab` only `W` moves.
pub fn train_stage1(
    mut params: Stage1Params,
    cfg: &Stage1TrainConfig,
    source: &CleanSource,
    level: NoiseLevel,
    eval: &EvalSet,
    rng: &mut Rng,
) -> Result<Stage1Outcome> {
    if cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(Error::InvalidArgument("batch size and log interval must be positive".into()));
    }
    if (level.h - params.h1).abs() > 1e-12 * params.h1 {
        return Err(Error::InvalidArgument("training level differs from h1".into()));
    }
    let start = Instant::now();
    let wall = |on: bool| if on { start.elapsed().as_millis() as u64 } else { 0 };
    let mut adam = Adam::new(cfg.lr);
    let mut slots = (
        AdamSlot::new(params.w.len()),
        AdamSlot::new(params.a.len()),
        AdamSlot::new(params.b.len()),
    );
    let mut log = Vec::new();
    let record = |p: &Stage1Params, step: usize, log: &mut Vec<TrainLogRow>| {
        let dg = diagnostics(p, eval, None);
        log.push(TrainLogRow {
            step,
            dsm_loss: dg.dsm_loss,
            manifold_err: dg.manifold_err,
            orthogonal_err: dg.orthogonal_err,
            alignment_risk_f: dg.alignment_risk_f,
            second_moment_m2: dg.second_moment_m2,
            pl_ratio: dg.pl_ratio,
            wall_ms: wall(cfg.record_wall_time),
        });
    };
    record(&params, 0, &mut log);
    let per_window = cfg.plateau_window.div_ceil(cfg.log_every);
    let mut initial_loss = None;
    let mut plateaued = false;
    let mut step = 0;
    while step < cfg.max_steps {
        let x0 = source.draw(rng, cfg.batch_size)?;
        let batch = ForwardBatch::at_level(x0, level, rng);
        let (loss, grads) = params.dsm_loss_and_grads(&batch, cfg.exec);
        let init = *initial_loss.get_or_insert(loss);
        if !loss.is_finite() || loss > cfg.divergence_factor * init {
            return Err(Error::Divergence { step, loss, initial: init });
        }
        match cfg.optimizer {
            OptimizerKind::Adam => {
                adam.tick();
                adam.update(&mut slots.0, params.w.as_mut_slice(), grads.w.as_slice());
                if !params.freeze_ab {
                    adam.update(&mut slots.1, params.a.as_mut_slice(), grads.a.as_slice());
                    adam.update(&mut slots.2, params.b.as_mut_slice(), grads.b.as_slice());
                }
            }
            OptimizerKind::Sgd => {
                sgd_update(cfg.lr, params.w.as_mut_slice(), grads.w.as_slice());
                if !params.freeze_ab {
                    sgd_update(cfg.lr, params.a.as_mut_slice(), grads.a.as_slice());
                    sgd_update(cfg.lr, params.b.as_mut_slice(), grads.b.as_slice());
                }
            }
        }
        step += 1;
        if !params.is_finite() {
            return Err(Error::Divergence { step, loss: f64::NAN, initial: init });
        }
        if step % cfg.log_every == 0 || step == cfg.max_steps {
            record(&params, step, &mut log);
            if cfg.stop_on_plateau
                && step >= cfg.min_steps
                && plateau_reached(&log, per_window, cfg.plateau_tol)
            {
                plateaued = true;
                break;
            }
        }
    }
    Ok(Stage1Outcome { params, log, steps: step, plateaued })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small(seed: u64, d: usize, m: usize) -> Stage1Params {
        let mut rng = Rng::new(seed);
        let mut p = Stage1Params::init(&mut rng, d, 0.05, &Stage1Init { width: m, sigma_w: Some(0.6), alpha0: 3.0 });
        // spread a so all paths carry weight
        for j in 0..m {
            p.a[j] = rng.uniform(-1.0, 1.0);
        }
        p
    }

    #[test]
    fn zero_output_weights_give_pure_contraction() {
        let mut p = small(1, 6, 4);
        p.a.fill(0.0);
        let x = Rng::new(2).gauss_vector(6);
        assert_relative_eq!(p.forward(&x), -&x / p.h1, epsilon = 1e-12);
        assert_eq!(p.projection_hat(&x), Vector::zeros(6));
        assert_relative_eq!(p.potential(&x), x.norm_squared() / (2.0 * p.h1), epsilon = 1e-12);
    }

    #[test]
    fn single_neuron_by_hand() {
        let mut w = Matrix::zeros(3, 1);
        w[(0, 0)] = 1.0;
        let p = Stage1Params {
            w,
            a: Vector::from_element(1, 1.0),
            b: Vector::zeros(1),
            h1: 1.0,
            activation: Activation::Tanh,
            freeze_ab: false,
            l2_w: 0.0,
        };
        let x = Vector::from_column_slice(&[1.0, 0.0, 0.0]);
        let f = p.forward(&x);
        assert_relative_eq!(f[0], 1f64.tanh() - 1.0, epsilon = 1e-15);
        assert!((f[0] + 0.23841).abs() < 1e-5);
        assert_eq!(f[1], 0.0);
    }

    #[test]
    fn output_is_affine_in_a() {
        let p = small(3, 5, 7);
        let x = Rng::new(4).gauss_vector(5);
        let mut p2 = p.clone();
        p2.a *= 2.0;
        let mut p0 = p.clone();
        p0.a.fill(0.0);
        let lhs = p2.forward(&x) - p.forward(&x);
        let rhs = p.forward(&x) - p0.forward(&x);
        assert!((lhs - rhs).amax() < 1e-12 * (1.0 + p.forward(&x).amax()));
    }

    #[test]
    fn potential_at_origin_with_zero_bias() {
        let mut p = small(5, 4, 3);
        p.b.fill(0.0);
        assert_eq!(p.potential(&Vector::zeros(4)), 0.0);
    }

    #[test]
    fn potential_gradient_is_minus_forward() {
        let p = small(6, 8, 5);
        let mut rng = Rng::new(7);
        for _ in 0..5 {
            let x = rng.gauss_vector(8);
            let step = 1e-5;
            let mut g = Vector::zeros(8);
            for i in 0..8 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += step;
                xm[i] -= step;
                g[i] = (p.potential(&xp) - p.potential(&xm)) / (2.0 * step);
            }
            let f = p.forward(&x);
            assert!((g + &f).norm() / f.norm() < 1e-6);
        }
    }

    #[test]
    fn projection_recombines_with_forward() {
        let p = small(8, 6, 4);
        let x = Rng::new(9).gauss_vector(6);
        let lhs = &x + p.forward(&x) * p.h1;
        assert!((lhs - p.projection_hat(&x)).amax() < 1e-13);
        let cols = Matrix::from_columns(&[x.clone(), x.clone() * 0.5]);
        let batch = p.projection_columns(&cols);
        assert!((batch.column(0) - p.projection_hat(&x)).amax() < 1e-13);
    }

    #[test]
    fn stationary_at_zero_residual() {
        let p = small(10, 5, 4);
        let mut rng = Rng::new(11);
        let x0 = crate::numerics::gauss_matrix(&mut rng, 5, 16, 1.0);
        let mut batch = ForwardBatch::at_level(x0, NoiseLevel::additive(p.h1), &mut rng);
        // choose eps so that f1(x_t) = -eps / sqrt(h1)
        let f = p.forward_columns(&batch.xt);
        batch.eps = -f * p.h1.sqrt();
        let (loss, g) = p.dsm_loss_and_grads(&batch, Exec::Sequential);
        assert!(loss < 1e-20);
        assert!(g.w.amax() < 1e-12 && g.a.amax() < 1e-12 && g.b.amax() < 1e-12);
    }

    #[test]
    fn weight_decay_adds_scaled_w() {
        let mut p = small(12, 5, 4);
        let mut rng = Rng::new(13);
        let x0 = crate::numerics::gauss_matrix(&mut rng, 5, 8, 1.0);
        let batch = ForwardBatch::at_level(x0, NoiseLevel::additive(p.h1), &mut rng);
        let (_, g0) = p.dsm_loss_and_grads(&batch, Exec::Sequential);
        p.l2_w = 0.3;
        let (_, g1) = p.dsm_loss_and_grads(&batch, Exec::Sequential);
        let diff = g1.w - g0.w - &p.w * (0.3 / 4.0);
        assert!(diff.amax() < 1e-12);
        assert_eq!(g1.a, g0.a);
    }

    #[test]
    fn parallel_and_sequential_gradients_are_identical() {
        let p = small(14, 10, 8);
        let mut rng = Rng::new(15);
        let x0 = crate::numerics::gauss_matrix(&mut rng, 10, 1500, 1.0);
        let batch = ForwardBatch::at_level(x0, NoiseLevel::additive(p.h1), &mut rng);
        let a = p.dsm_loss_and_grads(&batch, Exec::Parallel);
        let b = p.dsm_loss_and_grads(&batch, Exec::Sequential);
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn diagnostics_with_exact_projection_and_zero_weights() {
        let mut p = small(16, 6, 5);
        p.w.fill(0.0);
        let mut rng = Rng::new(17);
        let x0 = crate::numerics::gauss_matrix(&mut rng, 6, 10, 1.0);
        let batch = ForwardBatch::at_level(x0, NoiseLevel::additive(p.h1), &mut rng);
        let proj = Matrix::zeros(6, 10);
        let score = -&batch.xt / p.h1;
        let eval = EvalSet::new(batch, proj, score).unwrap();
        let d = diagnostics(&p, &eval, None);
        assert_eq!(d.second_moment_m2, 0.0);
        assert_eq!(d.alignment_risk_f, 0.0);
        assert_eq!(d.orthogonal_err, 0.0);
        assert!(d.manifold_err < 1e-20);
    }

    #[test]
    fn csv_header_is_fixed() {
        assert_eq!(
            TrainLogRow::CSV_HEADER,
            "step,dsm_loss,manifold_err,orthogonal_err,alignment_risk_F,second_moment_m2,pl_ratio,wall_ms"
        );
    }

    #[test]
    fn log_cosh_is_stable() {
        assert_eq!(log_cosh(0.0), 0.0);
        assert_relative_eq!(log_cosh(1.0), 1f64.cosh().ln(), epsilon = 1e-15);
        assert_relative_eq!(log_cosh(800.0), 800.0 - std::f64::consts::LN_2, epsilon = 1e-12);
    }
}
