//! Rotation representations: axis-angle, the continuous 6D form and
//! rotation matrices, plus the Gram-Schmidt backward pass used by the
//! losses.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Below this angle (radians) the Rodrigues formula switches to its
/// second-order Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Orthonormality tolerance accepted by [`RotMat::new`].
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Minimum column norm (and non-parallelism) accepted by [`sixd_to_rotmat`].
pub const SIXD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AxisAngle(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

/// First two columns of a rotation matrix, stored as `[a; b]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
}

impl Rot6D {
    pub fn new(a: Vector3<f64>, b: Vector3<f64>) -> Self {
        Rot6D { a, b }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Rot6D {
            a: Vector3::new(s[0], s[1], s[2]),
            b: Vector3::new(s[3], s[4], s[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a.x, self.a.y, self.a.z, self.b.x, self.b.y, self.b.z]
    }
}

/// A proper rotation matrix. Construction through [`RotMat::new`] checks
/// orthonormality and the determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotMat(Matrix3<f64>);

impl RotMat {
    pub const IDENTITY: RotMat = RotMat(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0));

    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rotation matrix"));
        }
        let err = orthonormality_error(&m);
        if err > ORTHONORMAL_TOL {
            return Err(Error::NotARotation(err));
        }
        Ok(RotMat(m))
    }

    /// Wraps a matrix the caller knows to be a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        RotMat(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> RotMat {
        RotMat(self.0.transpose())
    }

    pub fn compose(&self, other: &RotMat) -> RotMat {
        RotMat(self.0 * other.0)
    }

    /// Rotation about a coordinate axis (0 = x, 1 = y, 2 = z).
    pub fn about_axis(axis: usize, angle: f64) -> RotMat {
        let mut v = Vector3::zeros();
        v[axis] = angle;
        aa_to_rotmat(&AxisAngle(v)).expect("finite angle")
    }
}

/// Max of `‖RᵀR − I‖_F` and `|det R − 1|`.
pub fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    let gram = m.transpose() * m - Matrix3::identity();
    gram.norm().max((m.determinant() - 1.0).abs())
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn aa_to_rotmat(aa: &AxisAngle) -> Result<RotMat> {
    let v = aa.0;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("axis-angle"));
    }
    let theta = v.norm();
    let k = skew(&v);
    let k2 = k * k;
    let m = if theta < SMALL_ANGLE {
        Matrix3::identity() + k + k2 * 0.5
    } else {
        let s = theta.sin() / theta;
        let c = (1.0 - theta.cos()) / (theta * theta);
        Matrix3::identity() + k * s + k2 * c
    };
    Ok(RotMat(m))
}

fn vee_antisym(m: &Matrix3<f64>) -> Vector3<f64> {
    // vee(M - Mᵀ)
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

fn canonical_sign(axis: Vector3<f64>) -> Vector3<f64> {
    for i in 0..3 {
        if axis[i].abs() > 1e-12 {
            return if axis[i] < 0.0 { -axis } else { axis };
        }
    }
    axis
}

/// Inverse of [`aa_to_rotmat`], angle in `[0, π]`. At exactly π the axis sign
/// is fixed so its first nonzero component is nonnegative.
pub fn rotmat_to_aa(r: &RotMat) -> Result<AxisAngle> {
    let m = RotMat::new(r.0)?.0;
    let w = vee_antisym(&m);
    let s = 0.5 * w.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        return Ok(AxisAngle(w * 0.5));
    }
    if s > 1e-6 {
        return Ok(AxisAngle(w * (theta / (2.0 * s))));
    }
    // Near π: the axis comes from the symmetric part, aaᵀ = (S - cI)/(1 - c).
    let sym = (m + m.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity() * c) / (1.0 - c);
    let mut best = 0;
    for i in 1..3 {
        if outer[(i, i)] > outer[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = outer.column(best).into();
    axis /= axis.norm();
    let dir = axis.dot(&w);
    axis = if dir.abs() > 1e-15 {
        if dir < 0.0 {
            -axis
        } else {
            axis
        }
    } else {
        canonical_sign(axis)
    };
    Ok(AxisAngle(axis * theta))
}

pub fn rotmat_to_6d(r: &RotMat) -> Rot6D {
    Rot6D {
        a: r.0.column(0).into(),
        b: r.0.column(1).into(),
    }
}

/// Gram-Schmidt decoding of a 6D rotation.
pub fn sixd_to_rotmat(d: &Rot6D) -> Result<RotMat> {
    if d.a.iter().chain(d.b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("6D rotation"));
    }
    let na = d.a.norm();
    if na < SIXD_EPS {
        return Err(Error::Degenerate6d("first column has near-zero norm"));
    }
    let a = d.a / na;
    let bp = d.b - a * a.dot(&d.b);
    let nb = bp.norm();
    if nb < SIXD_EPS {
        return Err(Error::Degenerate6d("columns are parallel"));
    }
    let b = bp / nb;
    let c = a.cross(&b);
    Ok(RotMat(Matrix3::from_columns(&[a, b, c])))
}

/// Vector-Jacobian product of [`sixd_to_rotmat`]: given `∂L/∂R`, returns
/// `(∂L/∂a, ∂L/∂b)` for the raw (unnormalized) input columns.
pub fn sixd_backward(d: &Rot6D, grad_r: &Matrix3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let na = d.a.norm();
    let a = d.a / na;
    let dot_ab = a.dot(&d.b);
    let bp = d.b - a * dot_ab;
    let nb = bp.norm();
    let b = bp / nb;

    let g1: Vector3<f64> = grad_r.column(0).into();
    let g2: Vector3<f64> = grad_r.column(1).into();
    let g3: Vector3<f64> = grad_r.column(2).into();

    // c = a × b
    let mut ga = g1 + b.cross(&g3);
    let gb = g2 + g3.cross(&a);

    // b = bp / |bp|
    let gbp = (gb - b * b.dot(&gb)) / nb;
    // bp = b_raw - (a·b_raw) a
    let gb_raw = gbp - a * a.dot(&gbp);
    ga -= gbp * dot_ab + d.b * a.dot(&gbp);

    // a = a_raw / |a_raw|
    let ga_raw = (ga - a * a.dot(&ga)) / na;
    (ga_raw, gb_raw)
}

/// Angle of `R1ᵀR2`, in `[0, π]`.
///
/// Equal to `arccos((tr(R1ᵀR2) − 1)/2)`; evaluated with `atan2` so that
/// nearly identical rotations keep full precision.
pub fn geodesic_dist(r1: &RotMat, r2: &RotMat) -> f64 {
    let m = r1.0.transpose() * r2.0;
    let s = 0.5 * vee_antisym(&m).norm();
    let c = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    s.atan2(c)
}
