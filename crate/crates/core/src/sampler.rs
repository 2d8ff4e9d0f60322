//! Reverse-time samplers for the variance-preserving process.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::NoiseSchedule;
use crate::error::{Error, Result};
use crate::highnoise::ScoreField;
use crate::numerics::{Matrix, Rng};
use crate::par::{self, Exec};

/// Trajectories integrated together in one score evaluation.
const TRAJ_CHUNK: usize = 64;
const SAMPLE_MAGIC: &[u8; 8] = b"SILDSMP1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeGrid {
    Uniform,
    #[default]
    GeometricInH,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    EulerMaruyamaSde,
    DdpmAncestral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub t_min: f64,
    pub horizon: f64,
    pub grid: TimeGrid,
    pub kind: SamplerKind,
    pub exec: Exec,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 500,
            t_min: 1e-3,
            horizon: 1.0,
            grid: TimeGrid::GeometricInH,
            kind: SamplerKind::EulerMaruyamaSde,
            exec: Exec::Parallel,
        }
    }
}

impl SamplerConfig {
    /// `max(1/n_train, 1e-3)`.
    pub fn default_t_min(n_train: usize) -> f64 {
        (1.0 / n_train.max(1) as f64).max(1e-3)
    }

    pub fn validate(&self, t_max: Option<f64>) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.horizon) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < t_min < T, got t_min = {}, T = {}",
                self.t_min, self.horizon
            )));
        }
        if let Some(tm) = t_max {
            if !(self.t_min < tm && tm < self.horizon) {
                return Err(Error::InvalidArgument(format!(
                    "phase boundary {tm} must lie strictly between t_min and T"
                )));
            }
        }
        Ok(())
    }
}

/// Descending times `T = t_0 > ... > t_n = t_min`. The geometric grid spaces
/// `h(t)` log-uniformly.
pub fn time_grid(cfg: &SamplerConfig, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    cfg.validate(None)?;
    let n = cfg.n_steps;
    let (t0, t1) = (cfg.horizon, cfg.t_min);
    if n == 0 {
        return Ok(vec![t0]);
    }
    let mut ts: Vec<f64> = match cfg.grid {
        TimeGrid::Uniform => (0..=n).map(|i| t0 + (t1 - t0) * i as f64 / n as f64).collect(),
        TimeGrid::GeometricInH => {
            let (h0, h1) = (sched.h(t0)?, sched.h(t1)?);
            let ratio = (h1 / h0).ln();
            (0..=n)
                .map(|i| sched.t_for_h(h0 * (ratio * i as f64 / n as f64).exp()))
                .collect::<Result<_>>()?
        }
    };
    ts[0] = t0;
    ts[n] = t1;
    if ts.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::InvalidArgument("time grid is not strictly decreasing".into()));
    }
    Ok(ts)
}

fn integrate<S: ScoreField + ?Sized>(
    field: &S,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &Rng,
    n: usize,
) -> Result<Matrix> {
    if !sched.is_vp() {
        return Err(Error::InvalidArgument("reverse sampling needs a VP schedule".into()));
    }
    let ts = time_grid(cfg, sched)?;
    let d = field.dim();
    let steps = ts.len() - 1;
    let blocks = par::map_chunks(cfg.exec, n, TRAJ_CHUNK, |r| -> Result<Matrix> {
        let mut streams: Vec<Rng> = r.clone().map(|j| rng.substream(j as u64)).collect();
        let mut x = Matrix::zeros(d, r.len());
        for (c, s) in streams.iter_mut().enumerate() {
            x.set_column(c, &s.gauss_vector(d));
        }
        for i in 0..steps {
            let (t, t_next) = (ts[i], ts[i + 1]);
            let s = field.score_columns(&x, t)?;
            let last = i + 1 == steps;
            match cfg.kind {
                SamplerKind::EulerMaruyamaSde => {
                    let beta = sched.beta(t).expect("vp schedule");
                    let dt = t - t_next;
                    x += (&x * (0.5 * beta) + s * beta) * dt;
                    if !last {
                        let sd = (beta * dt).sqrt();
                        for (c, st) in streams.iter_mut().enumerate() {
                            x.column_mut(c).axpy(sd, &st.gauss_vector(d), 1.0);
                        }
                    }
                }
                SamplerKind::DdpmAncestral => {
                    let alpha = sched.alpha_bar(t)? / sched.alpha_bar(t_next)?;
                    let beta = 1.0 - alpha;
                    x = (&x + s * beta) / alpha.sqrt();
                    if !last {
                        let sd = beta.sqrt();
                        for (c, st) in streams.iter_mut().enumerate() {
                            x.column_mut(c).axpy(sd, &st.gauss_vector(d), 1.0);
                        }
                    }
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i + 1));
            }
        }
        Ok(x)
    });
    let mut out = Matrix::zeros(d, n);
    let mut col = 0;
    for b in blocks {
        let b = b?;
        out.columns_mut(col, b.ncols()).copy_from(&b);
        col += b.ncols();
    }
    Ok(out)
}

/// Euler-Maruyama on `dx = [beta x/2 + beta s] dt + sqrt(beta) dW` in reverse
/// time from `N(0, I)` at `T` down to `t_min`; the last step adds no noise.
/// Trajectory `j` draws from sub-stream `j` of `rng`.
pub fn reverse_sde_sample<S: ScoreField + ?Sized>(
    field: &S,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &Rng,
    n: usize,
) -> Result<Matrix> {
    let cfg = SamplerConfig { kind: SamplerKind::EulerMaruyamaSde, ..cfg.clone() };
    integrate(field, sched, &cfg, rng, n)
}

/// DDPM-style ancestral steps `x <- (x + beta_i s)/sqrt(alpha_i) + sqrt(beta_i) z`
/// with `alpha_i = abar(t_i)/abar(t_{i+1})`.
pub fn ancestral_sample<S: ScoreField + ?Sized>(
    field: &S,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &Rng,
    n: usize,
) -> Result<Matrix> {
    let cfg = SamplerConfig { kind: SamplerKind::DdpmAncestral, ..cfg.clone() };
    integrate(field, sched, &cfg, rng, n)
}

/// Dispatches on `cfg.kind`.
pub fn sample<S: ScoreField + ?Sized>(
    field: &S,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &Rng,
    n: usize,
) -> Result<Matrix> {
    integrate(field, sched, cfg, rng, n)
}

/// One row per coordinate, one column per sample.
pub fn samples_to_csv(x: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..x.nrows() {
        let row: Vec<String> = (0..x.ncols()).map(|c| format!("{:e}", x[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn samples_from_csv(text: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("bad sample value {v:?}: {e}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let d = rows.len();
    let n = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension("ragged sample CSV".into()));
    }
    Ok(Matrix::from_fn(d, n, |i, j| rows[i][j]))
}

/// Little-endian: 8-byte magic, `d` and `n` as u32, then column-major f64.
pub fn write_samples_bin<W: Write>(mut w: W, x: &Matrix) -> std::io::Result<()> {
    w.write_all(SAMPLE_MAGIC)?;
    w.write_all(&(x.nrows() as u32).to_le_bytes())?;
    w.write_all(&(x.ncols() as u32).to_le_bytes())?;
    for v in x.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_samples_bin<R: Read>(mut r: R) -> Result<Matrix> {
    let io = |e: std::io::Error| Error::InvalidArgument(format!("sample file: {e}"));
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(io)?;
    if &head[..8] != SAMPLE_MAGIC {
        return Err(Error::InvalidArgument("not a sample file".into()));
    }
    let d = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; 8 * d * n];
    r.read_exact(&mut buf).map_err(io)?;
    let vals: Vec<f64> =
        buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Matrix::from_vec(d, n, vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Vector;

    struct Zero(usize);

    impl ScoreField for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn score(&self, x: &Vector, _t: f64) -> Result<Vector> {
            Ok(Vector::zeros(x.len()))
        }
    }

    /// Exact score of `N(0, I)`, invariant under the VP process.
    struct StdNormal(usize);

    impl ScoreField for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn score(&self, x: &Vector, _t: f64) -> Result<Vector> {
            Ok(-x)
        }
    }

    #[test]
    fn uniform_grid_by_hand() {
        let cfg = SamplerConfig {
            n_steps: 4,
            t_min: 0.1,
            horizon: 0.9,
            grid: TimeGrid::Uniform,
            ..Default::default()
        };
        let ts = time_grid(&cfg, &NoiseSchedule::default()).unwrap();
        let expected = [0.9, 0.7, 0.5, 0.3, 0.1];
        for (a, b) in ts.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let one = time_grid(&SamplerConfig { n_steps: 1, ..cfg }, &NoiseSchedule::default()).unwrap();
        assert_eq!(one, vec![0.9, 0.1]);
    }

    #[test]
    fn geometric_grid_has_constant_ratio() {
        let sched = NoiseSchedule::default();
        let cfg = SamplerConfig { n_steps: 50, t_min: 1e-3, ..Default::default() };
        let ts = time_grid(&cfg, &sched).unwrap();
        let hs: Vec<f64> = ts.iter().map(|t| sched.h(*t).unwrap()).collect();
        let r0 = hs[0] / hs[1];
        for w in hs.windows(2) {
            assert!(((w[0] / w[1]) / r0 - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        let cfg = SamplerConfig { t_min: 1.5, ..Default::default() };
        assert!(time_grid(&cfg, &NoiseSchedule::default()).is_err());
        let cfg = SamplerConfig::default();
        assert!(cfg.validate(Some(1e-4)).is_err());
        assert!(cfg.validate(Some(0.5)).is_ok());
    }

    #[test]
    fn zero_steps_return_the_initial_draw() {
        let cfg = SamplerConfig { n_steps: 0, ..Default::default() };
        let rng = Rng::new(1);
        let x = reverse_sde_sample(&Zero(3), &NoiseSchedule::default(), &cfg, &rng, 5).unwrap();
        for j in 0..5 {
            let expected = rng.substream(j as u64).gauss_vector(3);
            assert_eq!(x.column(j).into_owned(), expected);
        }
    }

    #[test]
    fn empty_request_gives_empty_matrix() {
        let cfg = SamplerConfig { n_steps: 10, ..Default::default() };
        let x = ancestral_sample(&Zero(4), &NoiseSchedule::default(), &cfg, &Rng::new(2), 0).unwrap();
        assert_eq!(x.shape(), (4, 0));
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let sched = NoiseSchedule::default();
        let mut cfg = SamplerConfig { n_steps: 40, ..Default::default() };
        let a = reverse_sde_sample(&StdNormal(3), &sched, &cfg, &Rng::new(3), 150).unwrap();
        cfg.exec = Exec::Sequential;
        let b = reverse_sde_sample(&StdNormal(3), &sched, &cfg, &Rng::new(3), 150).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn standard_normal_is_preserved() {
        let sched = NoiseSchedule::default();
        for (kind, grid) in [
            (SamplerKind::EulerMaruyamaSde, TimeGrid::Uniform),
            (SamplerKind::DdpmAncestral, TimeGrid::GeometricInH),
        ] {
            let cfg = SamplerConfig { n_steps: 200, kind, grid, ..Default::default() };
            let x = sample(&StdNormal(2), &sched, &cfg, &Rng::new(4), 4000).unwrap();
            let var = x.norm_squared() / x.len() as f64;
            assert!((var - 1.0).abs() < 0.1, "{kind:?}: {var}");
        }
    }

    #[test]
    fn binary_round_trip() {
        let x = Matrix::from_fn(3, 4, |i, j| i as f64 - 0.25 * j as f64);
        let mut buf = Vec::new();
        write_samples_bin(&mut buf, &x).unwrap();
        assert_eq!(buf.len(), 16 + 8 * 12);
        assert_eq!(read_samples_bin(buf.as_slice()).unwrap(), x);
        assert_eq!(samples_from_csv(&samples_to_csv(&x)).unwrap(), x);
    }
}
