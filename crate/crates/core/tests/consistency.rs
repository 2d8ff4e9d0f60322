//! Statistical and cross-module checks that exercise several modules at once.

use sild::data::{sample_x0, CleanSource, ForwardBatch, MogLatent, NoiseLevel, NoiseSchedule};
use sild::highnoise::{hn_ridge_fit, hn_training_data, FullScore, HNHead, OracleField, ScoreField};
use sild::manifold::{LinearManifold, Manifold};
use sild::metrics::{mode_coverage, w2_auto};
use sild::numerics::{Matrix, Rng, Vector};
use sild::oracle::AmbientMog;
use sild::par::Exec;
use sild::sampler::{sample, SamplerConfig, SamplerKind};
use sild::stage1::{Stage1Init, Stage1Params};
use sild::stage2::RFHead;

fn toy(d: usize) -> (LinearManifold, MogLatent) {
    let mut rng = Rng::new(1);
    let lin = LinearManifold::random(&mut rng, d, 2, 10.0).unwrap();
    (lin, MogLatent::ring(2, 3, 3.0, 0.3).unwrap())
}

#[test]
fn forward_marginal_moments() {
    let (lin, mog) = toy(6);
    let m = Manifold::Linear(lin.clone());
    let mut rng = Rng::new(2);
    let n = 40_000;
    let level = NoiseLevel::vp(0.4);
    let x0 = sample_x0(&m, &mog, &mut rng, n).unwrap();
    let xt = ForwardBatch::at_level(x0, level, &mut rng).xt;
    let mean = xt.column_mean();
    let expect = lin.lift(&mog.mean()) * level.a;
    assert!((mean - &expect).norm() < 0.05);

    let centred = &xt - &expect * Matrix::from_element(1, n, 1.0);
    let cov = &centred * centred.transpose() / n as f64;
    let oracle = AmbientMog::new(&lin, &mog, level).unwrap();
    let mut total = oracle.covariance();
    for (w, m) in mog.weights().iter().zip(oracle.ambient_means()) {
        let dm = m - &expect;
        total += &dm * dm.transpose() * *w;
    }
    let rel = (&cov - &total).norm() / total.norm();
    assert!(rel < 0.03, "covariance mismatch {rel}");
}

#[test]
fn dsm_minimizer_is_the_oracle_score() {
    // E[target | x_t] equals the score: the DSM loss of the oracle sits below
    // that of a perturbed field by the perturbation energy.
    let (lin, mog) = toy(5);
    let m = Manifold::Linear(lin.clone());
    let mut rng = Rng::new(3);
    let level = NoiseLevel::additive(0.2);
    let n = 200_000;
    let x0 = sample_x0(&m, &mog, &mut rng, n).unwrap();
    let batch = ForwardBatch::at_level(x0, level, &mut rng);
    let y = batch.dsm_targets().unwrap();
    let oracle = AmbientMog::new(&lin, &mog, level).unwrap();
    let s = oracle.score_columns(&batch.xt);
    let shift = Vector::from_fn(5, |i, _| 0.1 * (i as f64 + 1.0));
    let base: f64 = (&s - &y).column_iter().map(|c| c.norm_squared()).sum::<f64>() / n as f64;
    let moved: f64 = (0..n).map(|j| (s.column(j) + &shift - y.column(j)).norm_squared()).sum::<f64>() / n as f64;
    let gap = moved - base;
    assert!((gap - shift.norm_squared()).abs() < 0.1 * shift.norm_squared(), "gap {gap}");
}

#[test]
fn tweedie_identity_on_the_mixture() {
    // E[x0 | x_t] = (x_t + h s(x_t)) / a, checked by binning on one draw.
    let (lin, mog) = toy(4);
    let m = Manifold::Linear(lin.clone());
    let mut rng = Rng::new(4);
    let level = NoiseLevel::vp(0.3);
    let n = 100_000;
    let x0 = sample_x0(&m, &mog, &mut rng, n).unwrap();
    let batch = ForwardBatch::at_level(x0, level, &mut rng);
    let oracle = AmbientMog::new(&lin, &mog, level).unwrap();
    let s = oracle.score_columns(&batch.xt);
    let denoised = (&batch.xt + &s * level.h) / level.a;
    // The residual x0 - E[x0|x_t] is uncorrelated with any function of x_t.
    let resid = &batch.x0 - &denoised;
    let corr = &resid * batch.xt.transpose() / n as f64;
    assert!(corr.norm() < 0.05, "correlation {}", corr.norm());
    assert!(resid.column_mean().norm() < 0.02);
}

fn small_full_score(rng: &mut Rng) -> FullScore {
    let d = 5;
    let schedule = NoiseSchedule::default();
    let gate = 0.25;
    let t_max = schedule.t_for_h(gate).unwrap();
    let mut stage1 = Stage1Params::init(rng, d, 0.05, &Stage1Init { width: 6, sigma_w: None, alpha0: 1.0 });
    stage1.a = Vector::from_fn(6, |_, _| rng.uniform(-1.0, 1.0));
    let mut rf = RFHead::new(rng, d, 8, true);
    rf.u = sild::numerics::gauss_matrix(rng, d, 8, 0.1);
    let (lin, mog) = toy(d);
    let mut hn = HNHead::new(rng, d, 8, 3, t_max, schedule.horizon()).unwrap();
    let source = CleanSource::Stream { manifold: Manifold::Linear(lin), mog };
    let (batch, ts, y) = hn_training_data(&hn, &schedule, &source, rng, 2048).unwrap();
    hn_ridge_fit(&mut hn, &batch.xt, &ts, &y, None, Exec::Parallel).unwrap();
    FullScore { stage1, rf, hn, gate_threshold: gate, schedule }
}

#[test]
fn gate_switches_exactly_at_the_threshold() {
    let mut rng = Rng::new(5);
    let fs = small_full_score(&mut rng);
    let x = rng.gauss_vector(5);
    let t_gate = fs.schedule.t_for_h(fs.gate_threshold).unwrap();
    for t in [0.01, 0.5 * t_gate, t_gate * (1.0 - 1e-9)] {
        let h = fs.schedule.h(t).unwrap();
        assert!(h <= fs.gate_threshold);
        let expect = sild::stage2::sild_score(&fs.stage1, &fs.rf, &x, h);
        assert_eq!(fs.score(&x, t).unwrap(), expect);
    }
    for t in [t_gate * (1.0 + 1e-6), 0.7, 1.0] {
        assert_eq!(fs.score(&x, t).unwrap(), fs.hn.forward(&x, t).unwrap());
    }
    let cols = Matrix::from_columns(&[x.clone(), -x.clone()]);
    let batch = fs.score_columns(&cols, 0.9).unwrap();
    assert_eq!(batch.column(1).into_owned(), fs.score(&-x, 0.9).unwrap());
}

#[test]
fn oracle_driven_sampler_recovers_the_mixture() {
    let (lin, mog) = toy(6);
    let schedule = NoiseSchedule::default();
    let field = OracleField { manifold: lin.clone(), mog: mog.clone(), schedule: schedule.clone() };
    let cfg = SamplerConfig { n_steps: 400, t_min: 1e-3, kind: SamplerKind::DdpmAncestral, ..Default::default() };
    let x = sample(&field, &schedule, &cfg, &Rng::new(6), 1500).unwrap();
    let (count, freqs) = mode_coverage(&lin, &mog, &x);
    assert_eq!(count, 3);
    assert!(freqs.iter().all(|f| (f - 1.0 / 3.0).abs() < 0.06), "{freqs:?}");

    let mut rng = Rng::new(7);
    let reference = sample_x0(&Manifold::Linear(lin.clone()), &mog, &mut rng, 1500).unwrap();
    let other = sample_x0(&Manifold::Linear(lin), &mog, &mut rng, 1500).unwrap();
    let w = w2_auto(&x, &reference, &mut rng, Exec::Parallel).unwrap().value;
    let base = w2_auto(&other, &reference, &mut rng, Exec::Parallel).unwrap().value;
    assert!(w < 1.5 * base, "sampler W2 {w} vs sampling noise {base}");
}

#[test]
fn sampler_is_identical_across_execution_modes() {
    let mut rng = Rng::new(8);
    let fs = small_full_score(&mut rng);
    let mut cfg = SamplerConfig { n_steps: 50, kind: SamplerKind::DdpmAncestral, ..Default::default() };
    let a = sample(&fs, &fs.schedule, &cfg, &Rng::new(9), 300).unwrap();
    cfg.exec = Exec::Sequential;
    let b = sample(&fs, &fs.schedule, &cfg, &Rng::new(9), 300).unwrap();
    assert_eq!(a, b);
}
