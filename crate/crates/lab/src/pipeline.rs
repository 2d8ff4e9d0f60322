//! The experiment pipeline shared by the CLI and the acceptance suite:
//! problem construction, both training stages, the high-noise head, sampling
//! and the theory sweeps.

use serde::{Deserialize, Serialize};

use sild::data::{CleanSource, ForwardBatch, MogLatent, NoiseLevel, NoiseSchedule};
use sild::highnoise::{hn_ridge_fit, hn_training_data, FullScore, HNHead, OracleField};
use sild::manifold::{LinearManifold, Manifold};
use sild::metrics::{self, ScoreMse};
use sild::numerics::{Matrix, Rng};
use sild::oracle::{AmbientMog, DataModel};
use sild::optim::OptimizerKind;
use sild::sampler;
use sild::stage1::{
    diagnostics, train_stage1, EvalSet, Stage1Init, Stage1Outcome, Stage1Params, Stage1TrainConfig,
    TrainLogRow,
};
use sild::stage2::{
    accumulate_weighted, build_stage2_targets, ridge_fit_weighted, scale_columns,
    sild_score_columns, IterativeRidge, RFHead,
};

use crate::config::RunConfig;
use crate::error::{LabError, StageContext};

/// Sub-stream keys, one per independent source of randomness.
mod keys {
    pub const MANIFOLD: u64 = 1;
    pub const TRAIN_SET: u64 = 2;
    pub const STAGE1_INIT: u64 = 3;
    pub const STAGE1_TRAIN: u64 = 4;
    pub const STAGE1_EVAL: u64 = 5;
    pub const STAGE2_HEAD: u64 = 6;
    pub const STAGE2_DATA: u64 = 7;
    pub const STAGE2_EVAL: u64 = 8;
    pub const HN_HEAD: u64 = 9;
    pub const HN_DATA: u64 = 10;
    pub const SAMPLER: u64 = 11;
    pub const HELDOUT: u64 = 12;
    pub const PROBES: u64 = 13;
    pub const STAGE2_ITER: u64 = 14;
}

/// The synthetic data model of one run.
#[derive(Clone, Debug)]
pub struct Problem {
    pub lin: LinearManifold,
    pub manifold: Manifold,
    pub mog: MogLatent,
    pub source: CleanSource,
    pub root: Rng,
}

impl Problem {
    pub fn new(cfg: &RunConfig) -> Result<Self, LabError> {
        let root = Rng::new(cfg.seed);
        let m = &cfg.model;
        let reach = m.effective_reach.unwrap_or(10.0 * (m.intrinsic_dim as f64).sqrt());
        let lin = LinearManifold::random(
            &mut root.substream(keys::MANIFOLD),
            m.ambient_dim,
            m.intrinsic_dim,
            reach,
        )
        .stage("setup")?;
        let mog = if m.components == 1 {
            MogLatent::centered(m.intrinsic_dim, m.latent_std)
        } else {
            MogLatent::ring(m.intrinsic_dim, m.components, m.radius, m.latent_std)
        }
        .stage("setup")?;
        let manifold = Manifold::Linear(lin.clone());
        let stream = CleanSource::Stream { manifold: manifold.clone(), mog: mog.clone() };
        let source = match m.n_train {
            None => stream,
            Some(n) => CleanSource::Dataset(
                stream.draw(&mut root.substream(keys::TRAIN_SET), n).stage("setup")?,
            ),
        };
        Ok(Self { lin, manifold, mog, source, root })
    }

    pub fn rng(&self, key: u64) -> Rng {
        self.root.substream(key)
    }

    /// Fresh draws from the data law, independent of the training set.
    pub fn heldout(&self, key: u64, n: usize) -> Result<Matrix, LabError> {
        let stream = CleanSource::Stream { manifold: self.manifold.clone(), mog: self.mog.clone() };
        stream.draw(&mut self.rng(keys::HELDOUT).substream(key), n).stage("setup")
    }

    pub fn oracle(&self, level: NoiseLevel) -> Result<AmbientMog, LabError> {
        AmbientMog::new(&self.lin, &self.mog, level).stage("oracle")
    }

    /// Evaluation draws at `level` with exact projections and scores.
    pub fn eval_set(&self, level: NoiseLevel, n: usize, rng: &mut Rng) -> Result<EvalSet, LabError> {
        let stream = CleanSource::Stream { manifold: self.manifold.clone(), mog: self.mog.clone() };
        let x0 = stream.draw(rng, n).stage("evaluation")?;
        let batch = ForwardBatch::at_level(x0, level, rng);
        let proj = self.lin.project_columns(&batch.xt);
        let score = self.oracle(level)?.score_columns(&batch.xt);
        EvalSet::new(batch, proj, score).stage("evaluation")
    }

    /// `tau^2` for the hard gate.
    pub fn gate_threshold(&self, cfg: &RunConfig) -> f64 {
        cfg.hn.gate_threshold.unwrap_or_else(|| {
            let r = self.manifold.reach();
            r * r
        })
    }
}

/// Level of the process at noise variance `h` under `sched`.
pub fn level_for(sched: &NoiseSchedule, h: f64) -> NoiseLevel {
    if sched.is_vp() {
        NoiseLevel::vp(h)
    } else {
        NoiseLevel::additive(h)
    }
}

pub fn stage1_train_config(cfg: &RunConfig) -> Stage1TrainConfig {
    Stage1TrainConfig { exec: cfg.exec, ..cfg.stage1.train.clone() }
}

pub fn init_stage1(cfg: &RunConfig, problem: &Problem) -> Stage1Params {
    let mut p = Stage1Params::init(
        &mut problem.rng(keys::STAGE1_INIT),
        cfg.model.ambient_dim,
        cfg.stage1.h1,
        &cfg.stage1.init,
    );
    p.freeze_ab = cfg.stage1.freeze_ab;
    p.l2_w = cfg.stage1.l2_w;
    p
}

/// Trains Stage 1 and returns the outcome with its evaluation set.
pub fn run_stage1(cfg: &RunConfig, problem: &Problem) -> Result<(Stage1Outcome, EvalSet), LabError> {
    let level = level_for(&cfg.schedule, cfg.stage1.h1);
    let eval = problem.eval_set(level, cfg.stage1.n_eval, &mut problem.rng(keys::STAGE1_EVAL))?;
    let p0 = init_stage1(cfg, problem);
    let out = train_stage1(
        p0,
        &stage1_train_config(cfg),
        &problem.source,
        level,
        &eval,
        &mut problem.rng(keys::STAGE1_TRAIN),
    )
    .stage("stage 1")?;
    Ok((out, eval))
}

/// Held-out score errors at one noise level, before and after the head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage2Eval {
    pub h2: f64,
    /// Projector split of the Stage-1-only score error.
    pub before: ScoreMse,
    /// Projector split of the assembled score error.
    pub after: ScoreMse,
    /// `mean |r*|^2`: head error with the head off.
    pub head_err_before: f64,
    /// `mean |U phi - r*|^2`.
    pub head_err_after: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub head: RFHead,
    pub kkt: f64,
    pub evals: Vec<Stage2Eval>,
    pub log: Vec<TrainLogRow>,
    /// Ridge objective of the closed form and of the iterative path.
    pub objective_closed: f64,
    pub objective_iterative: Option<f64>,
}

pub fn stage2_levels(cfg: &RunConfig) -> Vec<NoiseLevel> {
    cfg.stage2.h2.iter().map(|h| level_for(&cfg.schedule, *h)).collect()
}

/// Errors of the Stage-1-only and assembled scores on held-out draws.
pub fn evaluate_stage2(
    problem: &Problem,
    stage1: &Stage1Params,
    head: &RFHead,
    level: NoiseLevel,
    eval: &EvalSet,
) -> Stage2Eval {
    let x = &eval.batch.xt;
    let h = level.h;
    let zero = RFHead { u: Matrix::zeros(head.u.nrows(), head.u.ncols()), ..head.clone() };
    let s0 = sild_score_columns(stage1, &zero, x, h);
    let s1 = sild_score_columns(stage1, head, x, h);
    let x_hat = stage1.projection_columns(x);
    let r = head.forward_columns(&x_hat, h);
    let n = x.ncols() as f64;
    Stage2Eval {
        h2: h,
        before: metrics::score_mse_decomposed(&problem.lin, &s0, &eval.score),
        after: metrics::score_mse_decomposed(&problem.lin, &s1, &eval.score),
        head_err_before: eval.residual.norm_squared() / n,
        head_err_after: (r - &eval.residual).norm_squared() / n,
    }
}

fn log_row(step: usize, p: &Stage1Params, eval: &EvalSet, head: Option<&RFHead>) -> TrainLogRow {
    let out = head.map(|hd| {
        let x_hat = p.projection_columns(&eval.batch.xt);
        hd.forward_columns(&x_hat, eval.level.h)
    });
    let d = diagnostics(p, eval, out.as_ref());
    TrainLogRow {
        step,
        dsm_loss: d.dsm_loss,
        manifold_err: d.manifold_err,
        orthogonal_err: d.orthogonal_err,
        alignment_risk_f: d.alignment_risk_f,
        second_moment_m2: d.second_moment_m2,
        pl_ratio: d.pl_ratio,
        wall_ms: 0,
    }
}

/// Fits the head on the frozen Stage-1 projection. Log rows continue the
/// step count from `first_step`. They use `stage1_eval` when its level is a
/// training level of the head, and otherwise fresh draws at the first level
/// of the same size. The first row is the head switched off.
pub fn run_stage2(
    cfg: &RunConfig,
    problem: &Problem,
    stage1: &Stage1Params,
    first_step: usize,
    stage1_eval: Option<&EvalSet>,
) -> Result<Stage2Outcome, LabError> {
    let levels = stage2_levels(cfg);
    let time_input = levels.len() > 1;
    let d = cfg.model.ambient_dim;
    let mut head = RFHead::new(&mut problem.rng(keys::STAGE2_HEAD), d, cfg.stage2.width, time_input);
    let threshold = problem.gate_threshold(cfg);
    let model = DataModel::Latent(problem.mog.clone());
    let data = build_stage2_targets(
        cfg.stage2.target,
        stage1,
        &problem.source,
        Some((&problem.manifold, &model)),
        &levels,
        threshold,
        &mut problem.rng(keys::STAGE2_DATA),
        cfg.stage2.n_samples,
    )
    .stage("stage 2")?;
    let w = Some(data.weights.as_slice());
    let kkt = ridge_fit_weighted(&mut head, &data.x_hat, &data.hs, &data.y, w, cfg.stage2.lambda, cfg.exec)
        .stage("stage 2")?;
    let acc = accumulate_weighted(&head, &data.x_hat, &data.hs, &data.y, w, cfg.exec);
    let objective_closed = acc.objective(&head.u, head.lambda);

    let own_eval;
    let log_eval = match stage1_eval {
        Some(e) if levels.iter().any(|l| (l.h - e.level.h).abs() < 1e-15) => Some(e),
        Some(e) => {
            let mut rng = problem.rng(keys::STAGE2_EVAL).substream(1);
            own_eval = problem.eval_set(levels[0], e.batch.len(), &mut rng)?;
            Some(&own_eval)
        }
        None => None,
    };
    let mut log = Vec::new();
    if let Some(e) = log_eval {
        let off = RFHead { u: Matrix::zeros(head.u.nrows(), head.u.ncols()), ..head.clone() };
        log.push(log_row(first_step, stage1, e, Some(&off)));
    }
    let mut objective_iterative = None;
    if cfg.stage2.iterative {
        let mut phi = head.features_at(&data.x_hat, &data.hs);
        let mut y = data.y.clone();
        scale_columns(&mut phi, &data.weights);
        scale_columns(&mut y, &data.weights);
        let steps = cfg.stage2.iterative_steps;
        let every = cfg.stage1.train.log_every.max(1);
        let mut solver = IterativeRidge::new(head.out_dim(), head.width(), cfg.stage2.iterative_lr);
        let mut probe = head.clone();
        let mut rng = problem.rng(keys::STAGE2_ITER);
        let mut done = 0;
        while done < steps {
            let chunk = every.min(steps - done);
            solver.run(&phi, &y, head.lambda, cfg.stage2.iterative_batch, chunk, &mut rng);
            done += chunk;
            if let Some(e) = log_eval {
                probe.u = solver.u.clone();
                log.push(log_row(first_step + done, stage1, e, Some(&probe)));
            }
        }
        objective_iterative =
            Some(sild::stage2::ridge_objective(&solver.u, &phi, &y, head.lambda));
    } else if let Some(e) = log_eval {
        log.push(log_row(first_step + 1, stage1, e, Some(&head)));
    }

    let mut evals = Vec::new();
    let mut eval_rng = problem.rng(keys::STAGE2_EVAL);
    for lv in &levels {
        let e = problem.eval_set(*lv, cfg.stage2.n_eval, &mut eval_rng)?;
        evals.push(evaluate_stage2(problem, stage1, &head, *lv, &e));
    }
    Ok(Stage2Outcome { head, kkt, evals, log, objective_closed, objective_iterative })
}

/// Fits the high-noise head on `[t_max, T]` where `h(t_max) = tau^2`.
pub fn run_hn(cfg: &RunConfig, problem: &Problem) -> Result<(HNHead, f64), LabError> {
    let sched = &cfg.schedule;
    let threshold = problem.gate_threshold(cfg);
    let t_max = sched.t_for_h(threshold).stage("high-noise head")?;
    let mut head = HNHead::new(
        &mut problem.rng(keys::HN_HEAD),
        cfg.model.ambient_dim,
        cfg.hn.width,
        cfg.hn.modes,
        t_max,
        sched.horizon(),
    )
    .stage("high-noise head")?;
    let mut rng = problem.rng(keys::HN_DATA);
    let (batch, ts, y) =
        hn_training_data(&head, sched, &problem.source, &mut rng, cfg.hn.n_samples)
            .stage("high-noise head")?;
    let kkt = hn_ridge_fit(&mut head, &batch.xt, &ts, &y, cfg.hn.lambda, cfg.exec)
        .stage("high-noise head")?;
    Ok((head, kkt))
}

/// Everything the Figure-1 reproduction produces.
#[derive(Clone, Debug)]
pub struct ToyRun {
    pub stage1: Stage1Outcome,
    pub stage2: Stage2Outcome,
    pub log: Vec<TrainLogRow>,
    pub switch_step: usize,
}

pub fn reproduce_toy(cfg: &RunConfig) -> Result<ToyRun, LabError> {
    reproduce_toy_on(cfg, &Problem::new(cfg)?)
}

pub fn reproduce_toy_on(cfg: &RunConfig, problem: &Problem) -> Result<ToyRun, LabError> {
    let (s1, eval) = run_stage1(cfg, problem)?;
    let switch_step = s1.steps;
    let s2 = run_stage2(cfg, problem, &s1.params, switch_step, Some(&eval))?;
    let mut log = s1.log.clone();
    log.extend(s2.log.iter().cloned());
    Ok(ToyRun { stage1: s1, stage2: s2, log, switch_step })
}

/// Stage-1 run used by the rate sweep: small problem, frozen `(a, b)`,
/// plain SGD, fixed step budget scaled so every `h1` covers comparable decay.
pub fn rate_run(cfg: &RunConfig, h1: f64, seed: u64) -> Result<Vec<TrainLogRow>, LabError> {
    let rs = &cfg.sweep.rate;
    let mut c = cfg.clone();
    c.seed = seed;
    c.model.ambient_dim = rs.ambient_dim;
    c.model.n_train = None;
    c.stage1.h1 = h1;
    c.stage1.freeze_ab = true;
    c.stage1.init = Stage1Init { width: rs.width, sigma_w: None, alpha0: rs.alpha0 };
    let h_min = rs.h1.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = (h1 / h_min).powi(2);
    c.stage1.train = Stage1TrainConfig {
        lr: rs.lr,
        batch_size: rs.batch_size,
        max_steps: (rs.base_steps as f64 * scale).round() as usize,
        min_steps: 0,
        log_every: rs.log_every,
        optimizer: OptimizerKind::Sgd,
        stop_on_plateau: false,
        ..Stage1TrainConfig::default()
    };
    let problem = Problem::new(&c)?;
    Ok(run_stage1(&c, &problem)?.0.log)
}

/// Early-phase exponential rate of the alignment risk.
pub fn collapse_rate(log: &[TrainLogRow]) -> Result<f64, LabError> {
    let series: Vec<(f64, f64)> =
        log.iter().map(|r| (r.step as f64, r.alignment_risk_f)).collect();
    metrics::fit_exp_rate(&series, None).stage("rate fit")
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Stage-1 network trained at `h1` for the Stage-2 sweeps.
pub fn sweep_stage1(cfg: &RunConfig, h1: f64, seed: u64) -> Result<(Problem, Stage1Params), LabError> {
    let mut c = cfg.clone();
    c.seed = seed;
    c.stage1.h1 = h1;
    c.stage1.train.max_steps = cfg.sweep.stage2.stage1_steps;
    c.stage1.train.stop_on_plateau = false;
    let problem = Problem::new(&c)?;
    let (out, _) = run_stage1(&c, &problem)?;
    Ok((problem, out.params))
}

/// Held-out Stage-2 results with `n` regression samples at `h2`.
pub fn sweep_stage2_cell(
    cfg: &RunConfig,
    problem: &Problem,
    stage1: &Stage1Params,
    n: usize,
) -> Result<Stage2Eval, LabError> {
    let mut c = cfg.clone();
    c.stage2.h2 = vec![cfg.sweep.stage2.h2];
    c.stage2.n_samples = n;
    c.stage2.n_eval = cfg.sweep.stage2.n_eval;
    c.stage2.iterative = false;
    let out = run_stage2(&c, problem, stage1, 0, None)?;
    Ok(out.evals[0].clone())
}

/// All three heads for the VP model.
pub fn train_full_score(cfg: &RunConfig) -> Result<(Problem, FullScore, TrainSummary), LabError> {
    if !cfg.schedule.is_vp() {
        return Err(LabError::Config("sampling needs the vp_linear schedule".into()));
    }
    let problem = Problem::new(cfg)?;
    let (s1, _) = run_stage1(cfg, &problem)?;
    let s2 = run_stage2(cfg, &problem, &s1.params, s1.steps, None)?;
    let (hn, hn_kkt) = run_hn(cfg, &problem)?;
    let fs = FullScore {
        stage1: s1.params.clone(),
        rf: s2.head.clone(),
        hn,
        gate_threshold: problem.gate_threshold(cfg),
        schedule: cfg.schedule.clone(),
    };
    let summary = TrainSummary {
        stage1_steps: s1.steps,
        stage1_plateaued: s1.plateaued,
        stage2_kkt: s2.kkt,
        hn_kkt,
        stage2_evals: s2.evals,
    };
    Ok((problem, fs, summary))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage1_steps: usize,
    pub stage1_plateaued: bool,
    pub stage2_kkt: f64,
    pub hn_kkt: f64,
    pub stage2_evals: Vec<Stage2Eval>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleReport {
    pub n_samples: usize,
    pub t_min: f64,
    pub w2: f64,
    pub w2_baseline: f64,
    pub mode_count: usize,
    pub mode_frequencies: Vec<f64>,
    pub mean_manifold_distance: f64,
    pub gate_jump: f64,
}

/// Samples from `field` and compares with held-out data perturbed to `t_min`.
/// `sample_seed` selects the sampler stream; the held-out sets are shared.
pub fn sample_and_eval<S: sild::highnoise::ScoreField + ?Sized>(
    cfg: &RunConfig,
    problem: &Problem,
    field: &S,
    gate_jump: f64,
    sample_seed: u64,
) -> Result<(Matrix, SampleReport), LabError> {
    let sc = &cfg.sampler.config;
    let sc = sild::sampler::SamplerConfig { exec: cfg.exec, ..sc.clone() };
    let n = cfg.sampler.n_samples;
    let x = sampler::sample(field, &cfg.schedule, &sc, &problem.rng(keys::SAMPLER).substream(sample_seed), n)
        .stage("sampler")?;
    let level = cfg.schedule.level(sc.t_min).stage("sampler")?;
    let mut rng = problem.rng(keys::HELDOUT);
    let perturb = |x0: Matrix, rng: &mut Rng| ForwardBatch::at_level(x0, level, rng).xt;
    let a0 = problem.heldout(1, n)?;
    let b0 = problem.heldout(2, n)?;
    let ha = perturb(a0, &mut rng);
    let hb = perturb(b0, &mut rng);
    let w2 = metrics::w2_auto(&x, &ha, &mut rng.substream(1), cfg.exec).stage("metrics")?.value;
    let w2_baseline =
        metrics::w2_auto(&hb, &ha, &mut rng.substream(1), cfg.exec).stage("metrics")?.value;
    let (mode_count, mode_frequencies) = metrics::mode_coverage(&problem.lin, &problem.mog, &x);
    let off = &x - problem.lin.project_columns(&x);
    let mean_manifold_distance = off.column_iter().map(|c| c.norm()).sum::<f64>() / n.max(1) as f64;
    Ok((
        x,
        SampleReport {
            n_samples: n,
            t_min: sc.t_min,
            w2,
            w2_baseline,
            mode_count,
            mode_frequencies,
            mean_manifold_distance,
            gate_jump,
        },
    ))
}

/// The exact score of the VP model, for calibrating the sampler.
pub fn oracle_field(cfg: &RunConfig, problem: &Problem) -> OracleField {
    OracleField { manifold: problem.lin.clone(), mog: problem.mog.clone(), schedule: cfg.schedule.clone() }
}

/// Probe points for the gate diagnostic: held-out data at `t_max`.
pub fn gate_probes(cfg: &RunConfig, problem: &Problem, fs: &FullScore) -> Result<Matrix, LabError> {
    let level = cfg.schedule.level(fs.hn.t_max).stage("probes")?;
    let x0 = problem.heldout(3, cfg.metrics.n_probe)?;
    Ok(ForwardBatch::at_level(x0, level, &mut problem.rng(keys::PROBES)).xt)
}
