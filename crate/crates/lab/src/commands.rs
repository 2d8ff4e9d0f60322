//! The CLI commands. Each one runs a pipeline, writes its artifacts into an
//! output directory and returns the numbers it wrote for callers that want
//! to check them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use sild::numerics::Vector;
use sild::sampler::{samples_to_csv, write_samples_bin, SamplerConfig};
use sild::stage1::{log_to_csv, Projector, TrainLogRow};
use sild::stage2::sild_score;

use crate::checkpoint::{Checkpoint, StepCounts};
use crate::config::RunConfig;
use crate::error::{LabError, StageContext};
use crate::pipeline::{self, Problem, SampleReport, Stage2Eval, ToyRun};
use crate::svg;

/// Files written by one command, recorded in `manifest.json`.
pub struct OutDir {
    root: PathBuf,
    command: String,
    config_hash: String,
    files: Vec<(String, String, usize)>,
}

#[derive(Serialize)]
struct ManifestFile<'a> {
    name: &'a str,
    sha256: &'a str,
    bytes: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    version: &'a str,
    files: Vec<ManifestFile<'a>>,
}

impl OutDir {
    pub fn create(root: &Path, command: &str, cfg: &RunConfig) -> Result<Self, LabError> {
        std::fs::create_dir_all(root)
            .map_err(|source| LabError::Io { path: root.display().to_string(), source })?;
        Ok(Self { root: root.to_path_buf(), command: command.into(), config_hash: cfg.hash(), files: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), LabError> {
        let path = self.path(name);
        std::fs::write(&path, bytes)
            .map_err(|source| LabError::Io { path: path.display().to_string(), source })?;
        let digest: String = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
        self.files.retain(|f| f.0 != name);
        self.files.push((name.into(), digest, bytes.len()));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), LabError> {
        let text = serde_json::to_string_pretty(value).expect("report is always representable");
        self.write(name, text.as_bytes())
    }

    pub fn finish(self) -> Result<PathBuf, LabError> {
        let manifest = Manifest {
            command: &self.command,
            config_hash: &self.config_hash,
            version: env!("CARGO_PKG_VERSION"),
            files: self
                .files
                .iter()
                .map(|(n, s, b)| ManifestFile { name: n, sha256: s, bytes: *b })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest is always representable");
        let path = self.path("manifest.json");
        std::fs::write(&path, text)
            .map_err(|source| LabError::Io { path: path.display().to_string(), source })?;
        Ok(self.root)
    }
}

/// Output directory: `--out`, then the config's `out`, then `out/<command>`.
pub fn out_dir(cfg: &RunConfig, flag: Option<&Path>, command: &str) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(command))
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64).collect()
}

/// Score along a tangent line through the origin: the tangent component of
/// the assembled score against the exact one, at the first Stage-2 level.
pub fn manifold_profile(cfg: &RunConfig, problem: &Problem, run: &ToyRun) -> Result<String, LabError> {
    let h2 = cfg.stage2.h2[0];
    let level = pipeline::level_for(&cfg.schedule, h2);
    let oracle = problem.oracle(level)?;
    let e: Vector = problem.lin.basis().column(0).into_owned();
    let s = linspace(-4.0, 4.0, 81);
    let mut learned = Vec::with_capacity(s.len());
    let mut analytic = Vec::with_capacity(s.len());
    for &si in &s {
        let x = &e * si;
        learned.push(e.dot(&sild_score(&run.stage1.params, &run.stage2.head, &x, h2)));
        analytic.push(e.dot(&oracle.score(&x)));
    }
    Ok(svg::profile_csv(&s, &learned, &analytic))
}

/// Stage-1 field along a normal line through the first mode centre against
/// the restoring force `-x_perp/h1`.
pub fn normal_profile(cfg: &RunConfig, problem: &Problem, run: &ToyRun) -> Result<String, LabError> {
    let h1 = cfg.stage1.h1;
    let d = cfg.model.ambient_dim;
    let centre = problem.lin.lift(&problem.mog.means()[0]);
    let probe = Vector::from_fn(d, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let mut nu = &probe - problem.lin.project(&probe);
    if nu.norm() < 1e-8 {
        nu = Vector::from_fn(d, |i, _| if i == 1 { 1.0 } else { 0.0 });
        nu -= problem.lin.project(&nu.clone());
    }
    nu /= nu.norm();
    let width = 4.0 * h1.sqrt();
    let s = linspace(-width, width, 81);
    let p = &run.stage1.params;
    let mut learned = Vec::with_capacity(s.len());
    let mut analytic = Vec::with_capacity(s.len());
    for &si in &s {
        let x = &centre + &nu * si;
        learned.push(nu.dot(&((p.project_one(&x) - &x) / h1)));
        analytic.push(-si / h1);
    }
    Ok(svg::profile_csv(&s, &learned, &analytic))
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyMetrics {
    pub config_hash: String,
    pub stage1_steps: usize,
    pub stage1_plateaued: bool,
    pub orthogonal_err_initial: f64,
    pub orthogonal_err_final: f64,
    pub orthogonal_drop: f64,
    pub manifold_err_initial: f64,
    pub manifold_err_final: f64,
    pub manifold_err_change: f64,
    pub second_moment_step100: f64,
    pub second_moment_max: f64,
    pub stage2_kkt: f64,
    pub stage2_lambda: f64,
    pub stage2_objective_closed: f64,
    pub stage2_objective_iterative: Option<f64>,
    pub stage2: Vec<Stage2Eval>,
    /// Tangential (manifold-component) score MSE, Stage-1-only over assembled.
    pub manifold_mse_drop: f64,
    pub runtime_s: f64,
}

/// Stage-1 summary numbers from the log rows of Stage 1 only.
pub fn stage1_summary(rows: &[TrainLogRow]) -> (f64, f64, f64, f64, f64, f64) {
    let first = &rows[0];
    let last = rows.last().expect("log has the initial row");
    let m2_100 = rows
        .iter()
        .find(|r| r.step >= 100)
        .unwrap_or(last)
        .second_moment_m2;
    let m2_max = rows.iter().map(|r| r.second_moment_m2).fold(f64::NEG_INFINITY, f64::max);
    (first.orthogonal_err, last.orthogonal_err, first.manifold_err, last.manifold_err, m2_100, m2_max)
}

pub fn toy_metrics(cfg: &RunConfig, run: &ToyRun, runtime_s: f64) -> ToyMetrics {
    let (o0, o1, m0, m1, m2_100, m2_max) = stage1_summary(&run.stage1.log);
    let ev = &run.stage2.evals[0];
    ToyMetrics {
        config_hash: cfg.hash(),
        stage1_steps: run.stage1.steps,
        stage1_plateaued: run.stage1.plateaued,
        orthogonal_err_initial: o0,
        orthogonal_err_final: o1,
        orthogonal_drop: o0 / o1,
        manifold_err_initial: m0,
        manifold_err_final: m1,
        manifold_err_change: (m1 - m0).abs() / m0.abs().max(1e-300),
        second_moment_step100: m2_100,
        second_moment_max: m2_max,
        stage2_kkt: run.stage2.kkt,
        stage2_lambda: run.stage2.head.lambda,
        stage2_objective_closed: run.stage2.objective_closed,
        stage2_objective_iterative: run.stage2.objective_iterative,
        stage2: run.stage2.evals.clone(),
        manifold_mse_drop: ev.before.tangential / ev.after.tangential,
        runtime_s,
    }
}

pub struct ToyOutput {
    pub run: ToyRun,
    pub metrics: ToyMetrics,
    pub dir: PathBuf,
}

pub fn reproduce_toy(cfg: &RunConfig, dir: &Path) -> Result<ToyOutput, LabError> {
    let start = Instant::now();
    let problem = Problem::new(cfg)?;
    let run = pipeline::reproduce_toy_on(cfg, &problem)?;
    let runtime_s = start.elapsed().as_secs_f64();
    let mut out = OutDir::create(dir, "reproduce-toy", cfg)?;
    let csv = log_to_csv(&run.log);
    out.write("train_log.csv", csv.as_bytes())?;
    out.write("loss_curves.svg", svg::loss_curves(&csv)?.as_bytes())?;
    let mp = manifold_profile(cfg, &problem, &run)?;
    out.write("manifold_profile.csv", mp.as_bytes())?;
    let title = format!("Score along the manifold, h = {}", cfg.stage2.h2[0]);
    out.write(
        "manifold_profile.svg",
        svg::profile(&mp, &title, "tangent coordinate", "tangent score", "analytic")?.as_bytes(),
    )?;
    let np = normal_profile(cfg, &problem, &run)?;
    out.write("normal_profile.csv", np.as_bytes())?;
    let title = format!("Normal-direction score, h = {}", cfg.stage1.h1);
    out.write(
        "normal_profile.svg",
        svg::profile(&np, &title, "normal offset", "normal score", "-x_perp/h")?.as_bytes(),
    )?;
    let metrics = toy_metrics(cfg, &run, runtime_s);
    out.write_json("metrics.json", &metrics)?;
    let mut ck = Checkpoint::new(cfg, &problem.lin, &run.stage1.params);
    ck.rf = Some(run.stage2.head.clone());
    ck.steps = StepCounts { stage1: run.stage1.steps, stage2: 1, hn: 0 };
    out.write("checkpoint.json", ck.to_json_string().as_bytes())?;
    out.write("config.toml", cfg.to_toml_string().as_bytes())?;
    let dir = out.finish()?;
    Ok(ToyOutput { run, metrics, dir })
}

#[derive(Clone, Debug, Serialize)]
pub struct RateCell {
    pub h1: f64,
    pub seed: u64,
    pub rate: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateSweep {
    pub config_hash: String,
    pub cells: Vec<RateCell>,
    /// `(h1, median rate)`, `h1` descending.
    pub medians: Vec<(f64, f64)>,
    /// Strictly increasing median rate as `h1` decreases; `None` for a
    /// single `h1`.
    pub verdict: Option<bool>,
}

fn sorted_desc(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    v
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

pub fn run_rate_sweep(cfg: &RunConfig) -> Result<(RateSweep, Vec<(f64, u64, Vec<TrainLogRow>)>), LabError> {
    let rs = &cfg.sweep.rate;
    if rs.h1.is_empty() || rs.seeds.is_empty() {
        return Err(LabError::Config("rate sweep needs at least one h1 and one seed".into()));
    }
    let hs = sorted_desc(&rs.h1);
    let mut cells = Vec::new();
    let mut logs = Vec::new();
    let mut medians = Vec::new();
    for &h1 in &hs {
        let mut rates = Vec::new();
        for &seed in &rs.seeds {
            let cell = match pipeline::rate_run(cfg, h1, seed).and_then(|log| {
                let r = pipeline::collapse_rate(&log);
                logs.push((h1, seed, log));
                r
            }) {
                Ok(r) => {
                    rates.push(r);
                    RateCell { h1, seed, rate: Some(r), error: None }
                }
                Err(e) => RateCell { h1, seed, rate: None, error: Some(e.to_string()) },
            };
            cells.push(cell);
        }
        medians.push((h1, pipeline::median(&mut rates)));
    }
    let verdict = (hs.len() > 1).then(|| {
        let m: Vec<f64> = medians.iter().map(|p| p.1).collect();
        m.iter().all(|v| v.is_finite()) && strictly_increasing(&m)
    });
    Ok((RateSweep { config_hash: cfg.hash(), cells, medians, verdict }, logs))
}

pub fn rate_sweep(cfg: &RunConfig, dir: &Path) -> Result<RateSweep, LabError> {
    let (sweep, logs) = run_rate_sweep(cfg)?;
    let mut out = OutDir::create(dir, "rate-sweep", cfg)?;
    let mut csv = String::from("h1,seed,rate,error\n");
    for c in &sweep.cells {
        let rate = c.rate.map(|r| format!("{r:e}")).unwrap_or_default();
        let err = c.error.as_deref().unwrap_or("").replace(',', ";");
        let _ = writeln!(csv, "{:e},{},{rate},{err}", c.h1, c.seed);
    }
    out.write("rate_table.csv", csv.as_bytes())?;
    let mut fcsv = String::from("h1,seed,step,alignment_risk_F\n");
    for (h1, seed, log) in &logs {
        for r in log {
            let _ = writeln!(fcsv, "{h1:e},{seed},{},{:e}", r.step, r.alignment_risk_f);
        }
    }
    out.write("rate_curves.csv", fcsv.as_bytes())?;
    out.write("rate_curves.svg", rate_curves_svg(&fcsv)?.as_bytes())?;
    out.write_json("metrics.json", &sweep)?;
    out.finish()?;
    Ok(sweep)
}

/// Alignment-risk curves of the first seed of every `h1`.
pub fn rate_curves_svg(csv: &str) -> Result<String, LabError> {
    let t = svg::Table::parse(csv)?;
    let (h, seed, step, f) = (t.column("h1")?, t.column("seed")?, t.column("step")?, t.column("alignment_risk_F")?);
    let first_seed = seed.first().copied().unwrap_or(0.0);
    let mut series: Vec<svg::Series> = Vec::new();
    for i in 0..h.len() {
        if seed[i] != first_seed {
            continue;
        }
        let name = format!("h1 = {}", h[i]);
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((step[i], f[i])),
            None => series.push(svg::Series { name, points: vec![(step[i], f[i])], dashed: false }),
        }
    }
    Ok(svg::Plot {
        title: "Alignment risk under frozen (a, b)".into(),
        x_label: "step".into(),
        y_label: "F".into(),
        log_y: true,
        series,
        marker: None,
    }
    .render())
}

#[derive(Clone, Debug, Serialize)]
pub struct Stage2Cell {
    pub n: usize,
    pub h1: f64,
    pub seed: u64,
    pub mse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Stage2Sweep {
    pub config_hash: String,
    pub n_cells: Vec<Stage2Cell>,
    pub h1_cells: Vec<Stage2Cell>,
    /// `(n, median MSE)`, `n` ascending.
    pub n_medians: Vec<(usize, f64)>,
    /// `(h1, median MSE)`, `h1` ascending.
    pub h1_medians: Vec<(f64, f64)>,
    pub n_verdict: Option<bool>,
    pub h1_verdict: Option<bool>,
}

/// Held-out assembled-score MSE at `h(t2)` over a grid of regression sizes
/// at the configured `h1`, and over a grid of `h1` at a fixed size.
pub fn run_stage2_sweep(cfg: &RunConfig) -> Result<Stage2Sweep, LabError> {
    let ss = &cfg.sweep.stage2;
    if ss.n.is_empty() || ss.h1.is_empty() || ss.seeds.is_empty() {
        return Err(LabError::Config("stage-2 sweep needs non-empty n, h1 and seed grids".into()));
    }
    let mut ns = ss.n.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut h1s = sorted_desc(&ss.h1);
    h1s.reverse();
    let mut cache: Vec<((u64, u64), Result<(Problem, sild::stage1::Stage1Params), String>)> = Vec::new();
    let mut stage1 = |h1: f64, seed: u64| -> Result<(Problem, sild::stage1::Stage1Params), String> {
        let key = (h1.to_bits(), seed);
        if let Some((_, r)) = cache.iter().find(|(k, _)| *k == key) {
            return r.clone();
        }
        let r = pipeline::sweep_stage1(cfg, h1, seed).map_err(|e| e.to_string());
        cache.push((key, r.clone()));
        r
    };
    let mut cell = |n: usize, h1: f64, seed: u64| -> Stage2Cell {
        let res = stage1(h1, seed).and_then(|(problem, p)| {
            pipeline::sweep_stage2_cell(cfg, &problem, &p, n).map_err(|e| e.to_string())
        });
        match res {
            Ok(ev) => Stage2Cell { n, h1, seed, mse: Some(ev.after.total), error: None },
            Err(e) => Stage2Cell { n, h1, seed, mse: None, error: Some(e) },
        }
    };
    let median_of = |cells: &[Stage2Cell]| {
        let mut v: Vec<f64> = cells.iter().filter_map(|c| c.mse).collect();
        if v.len() < cells.len() {
            f64::NAN
        } else {
            pipeline::median(&mut v)
        }
    };
    let mut n_cells = Vec::new();
    let mut n_medians = Vec::new();
    for &n in &ns {
        let cells: Vec<Stage2Cell> = ss.seeds.iter().map(|&s| cell(n, cfg.stage1.h1, s)).collect();
        n_medians.push((n, median_of(&cells)));
        n_cells.extend(cells);
    }
    let mut h1_cells = Vec::new();
    let mut h1_medians = Vec::new();
    for &h1 in &h1s {
        let cells: Vec<Stage2Cell> = ss.seeds.iter().map(|&s| cell(ss.n_for_h1, h1, s)).collect();
        h1_medians.push((h1, median_of(&cells)));
        h1_cells.extend(cells);
    }
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    let nm: Vec<f64> = n_medians.iter().map(|p| p.1).collect();
    let hm: Vec<f64> = h1_medians.iter().map(|p| p.1).collect();
    Ok(Stage2Sweep {
        config_hash: cfg.hash(),
        n_verdict: (nm.len() > 1).then(|| finite(&nm) && strictly_decreasing(&nm)),
        h1_verdict: (hm.len() > 1).then(|| finite(&hm) && strictly_increasing(&hm)),
        n_cells,
        h1_cells,
        n_medians,
        h1_medians,
    })
}

pub fn stage2_sweep(cfg: &RunConfig, dir: &Path) -> Result<Stage2Sweep, LabError> {
    let sweep = run_stage2_sweep(cfg)?;
    let mut out = OutDir::create(dir, "stage2-sweep", cfg)?;
    let mut csv = String::from("grid,n,h1,seed,mse,error\n");
    for (grid, cells) in [("n", &sweep.n_cells), ("h1", &sweep.h1_cells)] {
        for c in cells {
            let mse = c.mse.map(|m| format!("{m:e}")).unwrap_or_default();
            let err = c.error.as_deref().unwrap_or("").replace(',', ";");
            let _ = writeln!(csv, "{grid},{},{:e},{},{mse},{err}", c.n, c.h1, c.seed);
        }
    }
    out.write("stage2_table.csv", csv.as_bytes())?;
    out.write_json("metrics.json", &sweep)?;
    out.finish()?;
    Ok(sweep)
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleMetrics {
    pub config_hash: String,
    pub report: SampleReport,
    pub train: Option<pipeline::TrainSummary>,
}

/// The gated score from a checkpoint, or trained from scratch.
pub fn full_score_for(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<(Problem, sild::highnoise::FullScore, Option<pipeline::TrainSummary>), LabError> {
    match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let problem = Problem::new(cfg)?;
            ck.check_compatible(cfg, &problem.lin)?;
            Ok((problem, ck.full_score()?, None))
        }
        None => {
            let (problem, fs, summary) = pipeline::train_full_score(cfg)?;
            Ok((problem, fs, Some(summary)))
        }
    }
}

pub fn sample_eval(cfg: &RunConfig, checkpoint: Option<&Path>, dir: &Path) -> Result<SampleMetrics, LabError> {
    let (problem, fs, train) = full_score_for(cfg, checkpoint)?;
    let probes = pipeline::gate_probes(cfg, &problem, &fs)?;
    let jump = fs.gate_jump(&probes).stage("probes")?;
    let (x, report) = pipeline::sample_and_eval(cfg, &problem, &fs, jump, 0)?;
    let mut out = OutDir::create(dir, "sample-eval", cfg)?;
    let mut bin = Vec::new();
    write_samples_bin(&mut bin, &x).map_err(|source| LabError::Io { path: "samples.bin".into(), source })?;
    out.write("samples.bin", &bin)?;
    out.write("samples.csv", samples_to_csv(&x).as_bytes())?;
    if train.is_some() {
        let steps = StepCounts { stage1: train.as_ref().map_or(0, |t| t.stage1_steps), stage2: 1, hn: 1 };
        let ck = Checkpoint::from_full_score(cfg, &problem.lin, &fs, steps);
        out.write("checkpoint.json", ck.to_json_string().as_bytes())?;
    }
    let metrics = SampleMetrics { config_hash: cfg.hash(), report, train };
    out.write_json("metrics.json", &metrics)?;
    out.finish()?;
    Ok(metrics)
}

#[derive(Clone, Debug, Serialize)]
pub struct NTrainCell {
    pub n_train: usize,
    pub t_min: f64,
    pub reports: Vec<SampleReport>,
    pub median_w2: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SamplingSweep {
    pub config_hash: String,
    pub cells: Vec<NTrainCell>,
    /// Median W2 non-increasing in `n_train`.
    pub verdict: Option<bool>,
}

/// Trains the full score per training-set size and samples once per seed.
/// `t_min` follows the training-set size.
pub fn run_sampling_sweep(cfg: &RunConfig) -> Result<SamplingSweep, LabError> {
    let mut ns = cfg.sweep.n_train.clone();
    ns.sort_unstable();
    ns.dedup();
    if ns.is_empty() || cfg.sweep.sample_seeds.is_empty() {
        return Err(LabError::Config("sampling sweep needs training sizes and seeds".into()));
    }
    let mut cells = Vec::new();
    for n in ns {
        let mut c = cfg.clone();
        c.model.n_train = Some(n);
        c.sampler.config.t_min = SamplerConfig::default_t_min(n);
        let (problem, fs, _) = pipeline::train_full_score(&c)?;
        let probes = pipeline::gate_probes(&c, &problem, &fs)?;
        let jump = fs.gate_jump(&probes).stage("probes")?;
        let mut reports = Vec::new();
        for &s in &cfg.sweep.sample_seeds {
            reports.push(pipeline::sample_and_eval(&c, &problem, &fs, jump, s)?.1);
        }
        let mut w: Vec<f64> = reports.iter().map(|r| r.w2).collect();
        let median_w2 = pipeline::median(&mut w);
        cells.push(NTrainCell { n_train: n, t_min: c.sampler.config.t_min, reports, median_w2 });
    }
    let m: Vec<f64> = cells.iter().map(|c| c.median_w2).collect();
    let verdict = (m.len() > 1).then(|| m.windows(2).all(|w| w[1] <= w[0]));
    Ok(SamplingSweep { config_hash: cfg.hash(), cells, verdict })
}

pub fn sampling_sweep(cfg: &RunConfig, dir: &Path) -> Result<SamplingSweep, LabError> {
    let sweep = run_sampling_sweep(cfg)?;
    let mut out = OutDir::create(dir, "sample-eval", cfg)?;
    let mut csv = String::from("n_train,seed,w2,w2_baseline,mode_count\n");
    for c in &sweep.cells {
        for (r, s) in c.reports.iter().zip(&cfg.sweep.sample_seeds) {
            let _ = writeln!(csv, "{},{s},{:e},{:e},{}", c.n_train, r.w2, r.w2_baseline, r.mode_count);
        }
    }
    out.write("n_train_table.csv", csv.as_bytes())?;
    out.write_json("metrics.json", &sweep)?;
    out.finish()?;
    Ok(sweep)
}

#[derive(Clone, Debug, Serialize)]
pub struct StageMetrics {
    pub config_hash: String,
    pub stage1_steps: usize,
    pub stage1_plateaued: bool,
    pub kkt: Option<f64>,
    pub stage2: Vec<Stage2Eval>,
}

pub fn train_stage1(cfg: &RunConfig, dir: &Path) -> Result<StageMetrics, LabError> {
    let problem = Problem::new(cfg)?;
    let (s1, _) = pipeline::run_stage1(cfg, &problem)?;
    let mut out = OutDir::create(dir, "train-stage1", cfg)?;
    let csv = log_to_csv(&s1.log);
    out.write("train_log.csv", csv.as_bytes())?;
    out.write("loss_curves.svg", svg::loss_curves(&csv)?.as_bytes())?;
    let mut ck = Checkpoint::new(cfg, &problem.lin, &s1.params);
    ck.steps.stage1 = s1.steps;
    out.write("checkpoint.json", ck.to_json_string().as_bytes())?;
    let m = StageMetrics {
        config_hash: cfg.hash(),
        stage1_steps: s1.steps,
        stage1_plateaued: s1.plateaued,
        kkt: None,
        stage2: Vec::new(),
    };
    out.write_json("metrics.json", &m)?;
    out.finish()?;
    Ok(m)
}

fn load_compatible(cfg: &RunConfig, path: &Path, problem: &Problem) -> Result<Checkpoint, LabError> {
    let ck = Checkpoint::load(path)?;
    ck.check_compatible(cfg, &problem.lin)?;
    Ok(ck)
}

/// Fits the Stage-2 head on a Stage-1 checkpoint, or trains Stage 1 first.
pub fn train_stage2(cfg: &RunConfig, checkpoint: Option<&Path>, dir: &Path) -> Result<StageMetrics, LabError> {
    let problem = Problem::new(cfg)?;
    let (mut ck, plateaued) = match checkpoint {
        Some(p) => (load_compatible(cfg, p, &problem)?, false),
        None => {
            let (s1, _) = pipeline::run_stage1(cfg, &problem)?;
            let mut ck = Checkpoint::new(cfg, &problem.lin, &s1.params);
            ck.steps.stage1 = s1.steps;
            (ck, s1.plateaued)
        }
    };
    let s2 = pipeline::run_stage2(cfg, &problem, &ck.stage1, ck.steps.stage1, None)?;
    ck.rf = Some(s2.head.clone());
    ck.steps.stage2 = 1;
    ck.config = cfg.clone();
    ck.config_hash = cfg.hash();
    let mut out = OutDir::create(dir, "train-stage2", cfg)?;
    out.write("checkpoint.json", ck.to_json_string().as_bytes())?;
    let m = StageMetrics {
        config_hash: cfg.hash(),
        stage1_steps: ck.steps.stage1,
        stage1_plateaued: plateaued,
        kkt: Some(s2.kkt),
        stage2: s2.evals,
    };
    out.write_json("metrics.json", &m)?;
    out.finish()?;
    Ok(m)
}

/// Adds the high-noise head to a checkpoint holding Stage 1 and Stage 2.
pub fn fit_hn(cfg: &RunConfig, checkpoint: &Path, dir: &Path) -> Result<f64, LabError> {
    let problem = Problem::new(cfg)?;
    let mut ck = load_compatible(cfg, checkpoint, &problem)?;
    if ck.rf.is_none() {
        return Err(LabError::Config("checkpoint has no Stage-2 head; run train-stage2 first".into()));
    }
    let (hn, kkt) = pipeline::run_hn(cfg, &problem)?;
    ck.hn = Some(hn);
    ck.gate_threshold = Some(problem.gate_threshold(cfg));
    ck.steps.hn = 1;
    ck.config = cfg.clone();
    ck.config_hash = cfg.hash();
    let mut out = OutDir::create(dir, "fit-hn", cfg)?;
    out.write("checkpoint.json", ck.to_json_string().as_bytes())?;
    #[derive(Serialize)]
    struct HnMetrics {
        config_hash: String,
        kkt: f64,
        gate_threshold: f64,
    }
    out.write_json(
        "metrics.json",
        &HnMetrics { config_hash: cfg.hash(), kkt, gate_threshold: problem.gate_threshold(cfg) },
    )?;
    out.finish()?;
    Ok(kkt)
}
