//! Sample-quality and training metrics.

use serde::{Deserialize, Serialize};

use crate::data::MogLatent;
use crate::error::{Error, Result};
use crate::manifold::LinearManifold;
use crate::numerics::{Matrix, Rng};
use crate::par::{self, Exec};

pub const W2_EXACT_CAP: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Method {
    ExactAssignment,
    Sliced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct W2Result {
    pub value: f64,
    pub method: W2Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_projections: Option<usize>,
}

/// Minimum-cost perfect matching for a square cost matrix (Hungarian
/// algorithm with potentials). Returns `assign[row] = col`.
pub fn hungarian(cost: &Matrix) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols());
    // 1-based arrays; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn check_pair(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.nrows() != y.nrows() || x.ncols() != y.ncols() {
        return Err(Error::Dimension(format!(
            "point sets of shape {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// `sqrt(min over matchings of mean squared distance)`.
pub fn w2_exact(x: &Matrix, y: &Matrix) -> Result<W2Result> {
    check_pair(x, y)?;
    let n = x.ncols();
    if n > W2_EXACT_CAP {
        return Err(Error::SizeCap { n, cap: W2_EXACT_CAP });
    }
    if n == 0 {
        return Ok(W2Result { value: 0.0, method: W2Method::ExactAssignment, n_projections: None });
    }
    let cost = Matrix::from_fn(n, n, |i, j| (x.column(i) - y.column(j)).norm_squared());
    let assign = hungarian(&cost);
    let total: f64 = assign.iter().enumerate().map(|(i, j)| cost[(i, *j)]).sum();
    Ok(W2Result {
        value: (total / n as f64).max(0.0).sqrt(),
        method: W2Method::ExactAssignment,
        n_projections: None,
    })
}

fn sorted_projection(x: &Matrix, dir: &crate::numerics::Vector) -> Vec<f64> {
    let mut p: Vec<f64> = x.column_iter().map(|c| c.dot(dir)).collect();
    p.sort_by(f64::total_cmp);
    p
}

/// Root-mean over random unit directions of the one-dimensional squared W2.
pub fn w2_sliced(x: &Matrix, y: &Matrix, n_proj: usize, rng: &mut Rng, exec: Exec) -> Result<W2Result> {
    check_pair(x, y)?;
    if n_proj == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let d = x.nrows();
    let n = x.ncols();
    let dirs: Vec<_> = (0..n_proj).map(|_| rng.unit_vector(d)).collect();
    let per = par::map_indices(exec, n_proj, |k| {
        let a = sorted_projection(x, &dirs[k]);
        let b = sorted_projection(y, &dirs[k]);
        a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n.max(1) as f64
    });
    let mean = per.iter().sum::<f64>() / n_proj as f64;
    Ok(W2Result { value: mean.sqrt(), method: W2Method::Sliced, n_projections: Some(n_proj) })
}

/// Exact below the cap, sliced with 256 projections above.
pub fn w2_auto(x: &Matrix, y: &Matrix, rng: &mut Rng, exec: Exec) -> Result<W2Result> {
    if x.ncols() <= W2_EXACT_CAP {
        w2_exact(x, y)
    } else {
        w2_sliced(x, y, 256, rng, exec)
    }
}

/// Assigns each sample to the nearest latent mean in `A^T x` coordinates.
/// Returns the number of modes hit and the frequency of each mode.
pub fn mode_coverage(lin: &LinearManifold, mog: &MogLatent, x: &Matrix) -> (usize, Vec<f64>) {
    let c = mog.n_components();
    let mut counts = vec![0usize; c];
    let z = lin.basis().tr_mul(x);
    for col in z.column_iter() {
        let best = mog
            .means()
            .iter()
            .enumerate()
            .map(|(k, m)| (k, (col - m).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        counts[best] += 1;
    }
    let n = x.ncols().max(1) as f64;
    let hit = counts.iter().filter(|k| **k > 0).count();
    (hit, counts.iter().map(|k| *k as f64 / n).collect())
}

/// Mean squared score error split by the subspace projector:
/// `(total, tangential, normal)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMse {
    pub total: f64,
    pub tangential: f64,
    pub normal: f64,
}

pub fn score_mse_decomposed(lin: &LinearManifold, score: &Matrix, oracle: &Matrix) -> ScoreMse {
    let e = score - oracle;
    let n = e.ncols().max(1) as f64;
    let t = lin.project_columns(&e);
    let nrm = &e - &t;
    ScoreMse {
        total: e.norm_squared() / n,
        tangential: t.norm_squared() / n,
        normal: nrm.norm_squared() / n,
    }
}

/// Least-squares decay rate of `log value` against `step` over the early
/// window where the value exceeds ten times its plateau (the mean of the
/// last tenth of the series). `max_points` truncates the window further.
pub fn fit_exp_rate(series: &[(f64, f64)], max_points: Option<usize>) -> Result<f64> {
    if series.len() < 3 {
        return Err(Error::RateFit("series too short".into()));
    }
    let tail = (series.len() / 10).max(1);
    let plateau =
        series[series.len() - tail..].iter().map(|p| p.1).sum::<f64>() / tail as f64;
    let mut window: Vec<(f64, f64)> =
        series.iter().take_while(|p| p.1 > 10.0 * plateau).copied().collect();
    if let Some(m) = max_points {
        window.truncate(m);
    }
    if window.len() < 2 {
        return Err(Error::RateFit("no decay window above ten times the plateau".into()));
    }
    if let Some(p) = window.iter().find(|p| !(p.1 > 0.0)) {
        return Err(Error::RateFit(format!("nonpositive value {} at step {}", p.1, p.0)));
    }
    let n = window.len() as f64;
    let mx = window.iter().map(|p| p.0).sum::<f64>() / n;
    let my = window.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxy: f64 = window.iter().map(|p| (p.0 - mx) * (p.1.ln() - my)).sum();
    let sxx: f64 = window.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::RateFit("window has a single step value".into()));
    }
    Ok(-sxy / sxx)
}
