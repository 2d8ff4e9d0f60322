//! Seeded random numbers and the small dense linear algebra used everywhere
//! else. Everything is `f64`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Deterministic generator. Sub-streams are keyed by `(seed, key)` only, so
/// they do not depend on how much of the parent stream has been consumed.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and `key`.
    pub fn substream(&self, key: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(key.wrapping_add(0xA5A5_5A5A))))
    }

    /// Draws a fresh seed from the current stream and returns a generator on it.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn gauss(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.inner.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    /// Index drawn from a probability vector.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.inner.random::<f64>();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    pub fn gauss_vector(&mut self, n: usize) -> Vector {
        Vector::from_iterator(n, (0..n).map(|_| self.gauss()))
    }

    /// Unit vector uniform on the sphere in `R^n`.
    pub fn unit_vector(&mut self, n: usize) -> Vector {
        loop {
            let v = self.gauss_vector(n);
            let norm = v.norm();
            if norm > 1e-12 {
                return v / norm;
            }
        }
    }
}

/// Matrix with i.i.d. `N(0, std^2)` entries, filled column by column.
pub fn gauss_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    assert!(std >= 0.0, "standard deviation must be nonnegative");
    let mut m = Matrix::zeros(rows, cols);
    for v in m.iter_mut() {
        *v = std * rng.gauss();
    }
    m
}

/// Haar-distributed `d x k` matrix with orthonormal columns (QR of a Gaussian
/// matrix with the signs of `R`'s diagonal folded into `Q`).
pub fn orthonormal_basis(rng: &mut Rng, d: usize, k: usize) -> Result<Matrix> {
    if k > d {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {k} orthonormal columns in dimension {d}"
        )));
    }
    if k == 0 {
        return Ok(Matrix::zeros(d, 0));
    }
    let g = gauss_matrix(rng, d, k, 1.0);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix; only the
/// lower triangle of `m` is read.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!("{}x{} is not square", n, m.ncols())));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)];
        for p in 0..j {
            diag -= l[(j, p)] * l[(j, p)];
        }
        if !(diag > 0.0) {
            return Err(Error::NotPositiveDefinite { row: j, pivot: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L L^T X = B` given the lower factor `L`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = l.nrows();
    if b.nrows() != n {
        return Err(Error::Dimension(format!(
            "right-hand side has {} rows, system has {}",
            b.nrows(),
            n
        )));
    }
    let mut x = b.clone();
    for c in 0..x.ncols() {
        let mut col = x.column_mut(c);
        for i in 0..n {
            let mut s = col[i];
            for p in 0..i {
                s -= l[(i, p)] * col[p];
            }
            col[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for p in (i + 1)..n {
                s -= l[(p, i)] * col[p];
            }
            col[i] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Solves `M X = B` for symmetric positive-definite `M`.
pub fn solve_spd(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    let l = cholesky(m)?;
    let x = cholesky_solve(&l, b)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { row: 0, pivot: f64::NAN });
    }
    Ok(x)
}

/// Eigenvalues of a symmetric matrix, largest first.
pub fn sym_eigvals(m: &Matrix) -> Result<Vec<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!("{}x{} is not square", n, m.ncols())));
    }
    let scale = m.amax().max(1.0);
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > 1e-10 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}
