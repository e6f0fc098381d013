//! Camera models and the frame conversions used by calibrated and
//! calibration-free operation.

use nalgebra::{Matrix2x3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::rotation::RotMat;

/// Minimum camera-frame depth accepted by perspective projection (meters).
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0.0
            && self.height > 0.0
            && (0.0..=self.width).contains(&self.cx)
            && (0.0..=self.height).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidCamera(format!("invalid intrinsics {self:?}")))
        }
    }
}

/// World-to-camera transform: `x_cam = R · x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: RotMat,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Perspective,
    /// Normalized coordinates `(s·x + tx, s·y + ty)`, mapped to pixels around
    /// the principal point with a half-extent of `max(width, height)/2`.
    WeakPerspective { scale: f64, tx: f64, ty: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub projection: Projection,
    pub intrinsics: Intrinsics,
    /// Absent in calibration-free mode.
    pub extrinsics: Option<Extrinsics>,
    /// Translation taking body-model coordinates (camera-oriented root) into
    /// the camera frame.
    pub body_offset: Vector3<f64>,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if let Projection::WeakPerspective { scale, tx, ty } = self.projection {
            if !(scale > 0.0 && scale.is_finite() && tx.is_finite() && ty.is_finite()) {
                return Err(Error::InvalidCamera(format!("weak-perspective scale {scale} must be positive")));
            }
        }
        if !self.body_offset.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidCamera("non-finite body offset".into()));
        }
        Ok(())
    }

    fn weak_half_extent(&self) -> f64 {
        0.5 * self.intrinsics.width.max(self.intrinsics.height)
    }

    /// Normalized weak-perspective coordinates before pixel scaling.
    pub fn weak_normalized(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        match self.projection {
            Projection::WeakPerspective { scale, tx, ty } => Some(Vector2::new(scale * p.x + tx, scale * p.y + ty)),
            Projection::Perspective => None,
        }
    }

    /// Projects one camera-frame point; returns the pixel and its Jacobian.
    pub fn project_point(&self, index: usize, p: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
        let k = &self.intrinsics;
        match self.projection {
            Projection::Perspective => {
                let z = p.z;
                if !(z > MIN_DEPTH) {
                    return Err(Error::NonPositiveDepth { index, depth: z });
                }
                let u = k.fx * p.x / z + k.cx;
                let v = k.fy * p.y / z + k.cy;
                let jac = Matrix2x3::new(
                    k.fx / z,
                    0.0,
                    -k.fx * p.x / (z * z),
                    0.0,
                    k.fy / z,
                    -k.fy * p.y / (z * z),
                );
                Ok((Vector2::new(u, v), jac))
            }
            Projection::WeakPerspective { scale, tx, ty } => {
                let h = self.weak_half_extent();
                let u = k.cx + h * (scale * p.x + tx);
                let v = k.cy + h * (scale * p.y + ty);
                let jac = Matrix2x3::new(h * scale, 0.0, 0.0, 0.0, h * scale, 0.0);
                Ok((Vector2::new(u, v), jac))
            }
        }
    }

    /// Projects points to pixels. With `in_camera_frame == false` the points
    /// are first mapped through the extrinsics (which must then be present).
    pub fn project(&self, pts: &[Vector3<f64>], in_camera_frame: bool) -> Result<Vec<Vector2<f64>>> {
        let ext = if in_camera_frame {
            None
        } else {
            Some(self.extrinsics.ok_or_else(|| {
                Error::InvalidCamera("world-frame projection requires extrinsics".into())
            })?)
        };
        pts.iter()
            .enumerate()
            .map(|(i, p)| {
                let pc = match &ext {
                    Some(e) => e.to_camera(p),
                    None => *p,
                };
                self.project_point(i, &pc).map(|(uv, _)| uv)
            })
            .collect()
    }
}

/// Camera-frame body orientation expressed in the world frame: `Rᵀ_ext · root`.
pub fn orient_to_world(root: &RotMat, ext: &Extrinsics) -> RotMat {
    ext.rotation.transpose().compose(root)
}

/// Inverse of [`orient_to_world`].
pub fn orient_to_view(root_world: &RotMat, ext: &Extrinsics) -> RotMat {
    ext.rotation.compose(root_world)
}
