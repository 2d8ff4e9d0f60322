//! Geometry of the data support: nearest-point projection, distance,
//! tangent/normal splitting, reach, and the `H(z, nu)` shrinkage/curvature
//! correction that enters the small-noise score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Vector};

const CUT_LOCUS_TOL: f64 = 1e-12;
const ON_MANIFOLD_TOL: f64 = 1e-8;

/// Linear subspace `range(A)` through the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearManifold {
    basis: Matrix,
    effective_reach: f64,
}

impl LinearManifold {
    /// `basis` must have orthonormal columns. The true reach is infinite;
    /// `effective_reach` only positions the high-noise gate.
    pub fn new(basis: Matrix, effective_reach: f64) -> Result<Self> {
        let k = basis.ncols();
        let dev = (basis.transpose() * &basis - Matrix::identity(k, k)).amax();
        if dev > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "basis columns are not orthonormal (deviation {dev:e})"
            )));
        }
        if !(effective_reach > 0.0) {
            return Err(Error::InvalidArgument("effective reach must be positive".into()));
        }
        Ok(Self { basis, effective_reach })
    }

    /// Default effective reach `10 sqrt(k)`.
    pub fn with_default_reach(basis: Matrix) -> Result<Self> {
        let k = basis.ncols() as f64;
        Self::new(basis, 10.0 * k.sqrt())
    }

    pub fn random(rng: &mut Rng, d: usize, k: usize, effective_reach: f64) -> Result<Self> {
        let basis = crate::numerics::orthonormal_basis(rng, d, k)?;
        Self::new(basis, effective_reach)
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// Latent coordinates `A^T x`.
    pub fn coords(&self, x: &Vector) -> Vector {
        self.basis.tr_mul(x)
    }

    pub fn lift(&self, z: &Vector) -> Vector {
        &self.basis * z
    }

    pub fn project(&self, x: &Vector) -> Vector {
        self.lift(&self.coords(x))
    }

    /// Column-wise projection of a `d x n` matrix.
    pub fn project_columns(&self, x: &Matrix) -> Matrix {
        &self.basis * self.basis.tr_mul(x)
    }
}

/// Circle of radius `R` in the plane spanned by orthonormal `u1, u2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleManifold {
    u1: Vector,
    u2: Vector,
    radius: f64,
}

impl CircleManifold {
    pub fn new(u1: Vector, u2: Vector, radius: f64) -> Result<Self> {
        if u1.len() != u2.len() || u1.len() < 2 {
            return Err(Error::Dimension("circle needs two vectors in R^d, d >= 2".into()));
        }
        if (u1.norm() - 1.0).abs() > 1e-10
            || (u2.norm() - 1.0).abs() > 1e-10
            || u1.dot(&u2).abs() > 1e-10
        {
            return Err(Error::InvalidArgument("u1, u2 must be orthonormal".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument("radius must be positive".into()));
        }
        Ok(Self { u1, u2, radius })
    }

    /// Circle in the plane of the first two coordinate axes.
    pub fn axis_aligned(d: usize, radius: f64) -> Result<Self> {
        let mut u1 = Vector::zeros(d);
        let mut u2 = Vector::zeros(d);
        u1[0] = 1.0;
        u2[1] = 1.0;
        Self::new(u1, u2, radius)
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn u1(&self) -> &Vector {
        &self.u1
    }

    pub fn u2(&self) -> &Vector {
        &self.u2
    }

    /// Embedding `gamma(theta) = R (cos theta u1 + sin theta u2)`.
    pub fn embed(&self, theta: f64) -> Vector {
        (&self.u1 * theta.cos() + &self.u2 * theta.sin()) * self.radius
    }

    pub fn angle(&self, x: &Vector) -> f64 {
        self.u2.dot(x).atan2(self.u1.dot(x))
    }

    fn plane_part(&self, x: &Vector) -> Vector {
        &self.u1 * self.u1.dot(x) + &self.u2 * self.u2.dot(x)
    }

    pub fn project(&self, x: &Vector) -> Result<Vector> {
        let p = self.plane_part(x);
        let n = p.norm();
        if n <= CUT_LOCUS_TOL {
            return Err(Error::CutLocus);
        }
        Ok(p * (self.radius / n))
    }

    /// Unit tangent at an on-manifold point `z`.
    fn unit_tangent(&self, z: &Vector) -> Vector {
        let c1 = self.u1.dot(z);
        let c2 = self.u2.dot(z);
        (&self.u2 * c1 - &self.u1 * c2) / self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Manifold {
    Linear(LinearManifold),
    Circle(CircleManifold),
}

impl Manifold {
    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Linear(m) => m.basis.nrows(),
            Manifold::Circle(c) => c.u1.len(),
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            Manifold::Linear(m) => m.basis.ncols(),
            Manifold::Circle(_) => 1,
        }
    }

    /// Reach used by the phase gate: the configured effective value for a
    /// subspace, the radius for a circle.
    pub fn reach(&self) -> f64 {
        match self {
            Manifold::Linear(m) => m.effective_reach,
            Manifold::Circle(c) => c.radius,
        }
    }

    pub fn as_linear(&self) -> Option<&LinearManifold> {
        match self {
            Manifold::Linear(m) => Some(m),
            Manifold::Circle(_) => None,
        }
    }

    pub fn project(&self, x: &Vector) -> Result<Vector> {
        self.check_dim(x)?;
        match self {
            Manifold::Linear(m) => Ok(m.project(x)),
            Manifold::Circle(c) => c.project(x),
        }
    }

    pub fn distance(&self, x: &Vector) -> Result<f64> {
        Ok((x - self.project(x)?).norm())
    }

    /// Splits `v` at the on-manifold point `z` into `(tangential, normal)`.
    /// The normal part is formed as `v - tangential`, so the parts recombine
    /// to `v` up to one rounding per entry.
    pub fn split_tangent_normal(&self, z: &Vector, v: &Vector) -> Result<(Vector, Vector)> {
        self.check_dim(z)?;
        self.check_dim(v)?;
        self.check_on_manifold(z)?;
        let tangential = match self {
            Manifold::Linear(m) => m.project(v),
            Manifold::Circle(c) => {
                let e = c.unit_tangent(z);
                let s = e.dot(v);
                e * s
            }
        };
        let normal = v - &tangential;
        Ok((tangential, normal))
    }

    /// `H(z, nu) = -1/2 <nu, z> - 1/2 log det(I_k - B_nu)`, the first term only
    /// when `vp_mode` is set. `B_nu` is the shape operator in direction `nu`:
    /// zero for a subspace, `-<nu, z>/R^2` for a circle of radius `R`.
    pub fn h_correction(&self, z: &Vector, nu: &Vector, vp_mode: bool) -> Result<f64> {
        self.check_dim(z)?;
        self.check_dim(nu)?;
        self.check_on_manifold(z)?;
        let (t, _) = self.split_tangent_normal(z, nu)?;
        if t.norm() > ON_MANIFOLD_TOL * (1.0 + nu.norm()) {
            return Err(Error::InvalidArgument(format!(
                "offset is not normal (tangential part {:e})",
                t.norm()
            )));
        }
        if let Manifold::Circle(c) = self {
            if nu.norm() >= c.radius {
                return Err(Error::InvalidArgument("normal offset exceeds the reach".into()));
            }
        }
        let shrink = if vp_mode { -0.5 * nu.dot(z) } else { 0.0 };
        let curvature = match self {
            Manifold::Linear(_) => 0.0,
            Manifold::Circle(c) => {
                // II(e, e) = -z / R^2 for the unit-speed tangent e.
                let b = -nu.dot(z) / (c.radius * c.radius);
                let eig = 1.0 - b;
                if !(eig > 0.0) {
                    return Err(Error::LogDetDomain(eig));
                }
                -0.5 * eig.ln()
            }
        };
        Ok(shrink + curvature)
    }

    fn check_dim(&self, x: &Vector) -> Result<()> {
        if x.len() != self.ambient_dim() {
            return Err(Error::Dimension(format!(
                "vector has length {}, ambient dimension is {}",
                x.len(),
                self.ambient_dim()
            )));
        }
        Ok(())
    }

    fn check_on_manifold(&self, z: &Vector) -> Result<()> {
        let off = match self {
            Manifold::Linear(m) => (z - m.project(z)).norm(),
            Manifold::Circle(c) => {
                let p = c.plane_part(z);
                (z - &p).norm() + (p.norm() - c.radius).abs()
            }
        };
        if off > ON_MANIFOLD_TOL {
            return Err(Error::OffManifold(off));
        }
        Ok(())
    }
}
