//! Parametric body model: shape blendshapes, forward kinematics over a
//! joint tree and linear blend skinning, with a hand-written backward pass.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::rotation::RotMat;

pub const NUM_JOINTS: usize = 24;
pub const NUM_BODY_JOINTS: usize = NUM_JOINTS - 1;
pub const NUM_BETAS: usize = 10;
pub const NUM_KEYPOINTS: usize = 44;
pub const NUM_LANDMARKS: usize = 35;
/// Joint used for pelvis alignment in the metrics.
pub const PELVIS: usize = 0;

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    /// Global orientation (joint 0).
    pub root: RotMat,
    /// Joints 1..J, relative to their parent.
    pub body: Vec<RotMat>,
}

impl PoseParams {
    pub fn identity(n_joints: usize) -> Self {
        PoseParams {
            root: RotMat::IDENTITY,
            body: vec![RotMat::IDENTITY; n_joints - 1],
        }
    }

    pub fn n_joints(&self) -> usize {
        self.body.len() + 1
    }

    pub fn joint(&self, k: usize) -> &RotMat {
        if k == 0 {
            &self.root
        } else {
            &self.body[k - 1]
        }
    }

    pub fn joint_mut(&mut self, k: usize) -> &mut RotMat {
        if k == 0 {
            &mut self.root
        } else {
            &mut self.body[k - 1]
        }
    }

    pub fn matrices(&self) -> Vec<Matrix3<f64>> {
        (0..self.n_joints()).map(|k| *self.joint(k).matrix()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams {
    pub beta: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros(n: usize) -> Self {
        ShapeParams { beta: vec![0.0; n] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshResult {
    pub vertices: Vec<Vector3<f64>>,
    pub joints3d: Vec<Vector3<f64>>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PosedBody {
    pub shaped: Vec<Vector3<f64>>,
    pub rest_joints: Vec<Vector3<f64>>,
    pub world_rot: Vec<Matrix3<f64>>,
    pub joints: Vec<Vector3<f64>>,
    pub vertices: Vec<Vector3<f64>>,
}

impl PosedBody {
    pub fn mesh(&self) -> MeshResult {
        MeshResult {
            vertices: self.vertices.clone(),
            joints3d: self.joints.clone(),
        }
    }
}

/// Gradients of a scalar with respect to the per-joint rotations and betas.
#[derive(Debug, Clone)]
pub struct BodyGrad {
    pub rotations: Vec<Matrix3<f64>>,
    pub beta: Vec<f64>,
}

/// Template mesh, blendshapes, kinematic tree, skinning weights and regressors.
///
/// Dense arrays are row-major: `shape_dirs[(v*3 + c)*B + b]`,
/// `joint_regressor[k*V + v]`, `skin_weights[v*J + k]`, `kp_regressor[i*V + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    template: Vec<Vector3<f64>>,
    shape_dirs: Vec<f64>,
    n_betas: usize,
    parents: Vec<i32>,
    joint_regressor: Vec<f64>,
    skin_weights: Vec<f64>,
    kp_regressor: Vec<f64>,
    landmark_indices: Vec<u32>,
    // sparse views of the dense arrays
    skin_sparse: Vec<Vec<(usize, f64)>>,
    jreg_sparse: Vec<Vec<(usize, f64)>>,
    kp_sparse: Vec<Vec<(usize, f64)>>,
}

fn sparse_rows(dense: &[f64], rows: usize, cols: usize) -> Vec<Vec<(usize, f64)>> {
    (0..rows)
        .map(|r| {
            dense[r * cols..(r + 1) * cols]
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(c, w)| (c, *w))
                .collect()
        })
        .collect()
}

impl BodyModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        template: Vec<Vector3<f64>>,
        shape_dirs: Vec<f64>,
        n_betas: usize,
        parents: Vec<i32>,
        joint_regressor: Vec<f64>,
        skin_weights: Vec<f64>,
        kp_regressor: Vec<f64>,
        landmark_indices: Vec<u32>,
    ) -> Result<Self> {
        let nv = template.len();
        let nj = parents.len();
        let inv = |m: String| Err(Error::Invariant(m));
        if nv == 0 || nj == 0 {
            return inv("model needs at least one vertex and one joint".into());
        }
        if shape_dirs.len() != nv * 3 * n_betas {
            return inv(format!("shape_dirs has {} entries, expected {}", shape_dirs.len(), nv * 3 * n_betas));
        }
        if joint_regressor.len() != nj * nv {
            return inv("joint_regressor size does not match J x V".into());
        }
        if skin_weights.len() != nv * nj {
            return inv("skin_weights size does not match V x J".into());
        }
        if kp_regressor.len() % nv != 0 {
            return inv("kp_regressor size is not a multiple of V".into());
        }
        let all_finite = template.iter().flat_map(|v| v.iter()).all(|x| x.is_finite())
            && shape_dirs.iter().chain(&joint_regressor).chain(&skin_weights).chain(&kp_regressor).all(|x| x.is_finite());
        if !all_finite {
            return inv("non-finite model entry".into());
        }
        if parents[0] != -1 {
            return inv("joint 0 must be the root (parent -1)".into());
        }
        for (k, &p) in parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= k {
                return inv(format!("joint {k} has parent {p}; parents must precede children"));
            }
        }
        for v in 0..nv {
            let row = &skin_weights[v * nj..(v + 1) * nj];
            if row.iter().any(|w| *w < 0.0) {
                return inv(format!("negative skin weight at vertex {v}"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return inv(format!("skin weights of vertex {v} sum to {s}"));
            }
        }
        let n_kp = kp_regressor.len() / nv;
        for i in 0..n_kp {
            let s: f64 = kp_regressor[i * nv..(i + 1) * nv].iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return inv(format!("keypoint regressor row {i} sums to {s}"));
            }
        }
        if let Some(bad) = landmark_indices.iter().find(|&&i| i as usize >= nv) {
            return inv(format!("landmark index {bad} out of range for {nv} vertices"));
        }
        let skin_sparse = sparse_rows(&skin_weights, nv, nj);
        let jreg_sparse = sparse_rows(&joint_regressor, nj, nv);
        let kp_sparse = sparse_rows(&kp_regressor, n_kp, nv);
        Ok(BodyModel {
            template,
            shape_dirs,
            n_betas,
            parents,
            joint_regressor,
            skin_weights,
            kp_regressor,
            landmark_indices,
            skin_sparse,
            jreg_sparse,
            kp_sparse,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.template.len()
    }
    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }
    pub fn n_betas(&self) -> usize {
        self.n_betas
    }
    pub fn n_keypoints(&self) -> usize {
        self.kp_sparse.len()
    }
    pub fn n_landmarks(&self) -> usize {
        self.landmark_indices.len()
    }
    pub fn template(&self) -> &[Vector3<f64>] {
        &self.template
    }
    pub fn shape_dirs(&self) -> &[f64] {
        &self.shape_dirs
    }
    pub fn parents(&self) -> &[i32] {
        &self.parents
    }
    pub fn joint_regressor(&self) -> &[f64] {
        &self.joint_regressor
    }
    pub fn skin_weights(&self) -> &[f64] {
        &self.skin_weights
    }
    pub fn kp_regressor(&self) -> &[f64] {
        &self.kp_regressor
    }
    pub fn landmark_indices(&self) -> &[u32] {
        &self.landmark_indices
    }

    pub fn shaped_template(&self, beta: &[f64]) -> Vec<Vector3<f64>> {
        let nb = self.n_betas;
        self.template
            .iter()
            .enumerate()
            .map(|(v, t)| {
                let mut p = *t;
                for c in 0..3 {
                    let dirs = &self.shape_dirs[(v * 3 + c) * nb..(v * 3 + c + 1) * nb];
                    p[c] += dirs.iter().zip(beta).map(|(d, b)| d * b).sum::<f64>();
                }
                p
            })
            .collect()
    }

    fn regress_rest_joints(&self, shaped: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.jreg_sparse
            .iter()
            .map(|row| row.iter().fold(Vector3::zeros(), |acc, &(v, w)| acc + shaped[v] * w))
            .collect()
    }

    /// Forward pass from per-joint rotation matrices (root first).
    pub fn pose_body(&self, rotations: &[Matrix3<f64>], beta: &[f64]) -> Result<PosedBody> {
        let nj = self.n_joints();
        if rotations.len() != nj {
            return Err(Error::DimensionMismatch {
                what: "pose joints",
                expected: nj,
                got: rotations.len(),
            });
        }
        if beta.len() != self.n_betas {
            return Err(Error::DimensionMismatch {
                what: "betas",
                expected: self.n_betas,
                got: beta.len(),
            });
        }
        let shaped = self.shaped_template(beta);
        let rest_joints = self.regress_rest_joints(&shaped);

        let mut world_rot = Vec::with_capacity(nj);
        let mut joints = Vec::with_capacity(nj);
        for k in 0..nj {
            if k == 0 {
                world_rot.push(rotations[0]);
                joints.push(rest_joints[0]);
            } else {
                let p = self.parents[k] as usize;
                joints.push(world_rot[p] * (rest_joints[k] - rest_joints[p]) + joints[p]);
                world_rot.push(world_rot[p] * rotations[k]);
            }
        }

        let vertices = shaped
            .iter()
            .zip(&self.skin_sparse)
            .map(|(t, weights)| {
                weights.iter().fold(Vector3::zeros(), |acc, &(k, w)| {
                    acc + (world_rot[k] * (t - rest_joints[k]) + joints[k]) * w
                })
            })
            .collect();

        Ok(PosedBody {
            shaped,
            rest_joints,
            world_rot,
            joints,
            vertices,
        })
    }

    pub fn forward(&self, pose: &PoseParams, shape: &ShapeParams) -> Result<MeshResult> {
        Ok(self.pose_body(&pose.matrices(), &shape.beta)?.mesh())
    }

    /// Vector-Jacobian product of [`BodyModel::pose_body`].
    pub fn backward(
        &self,
        rotations: &[Matrix3<f64>],
        posed: &PosedBody,
        d_vertices: &[Vector3<f64>],
        d_joints: Option<&[Vector3<f64>]>,
    ) -> BodyGrad {
        let nj = self.n_joints();
        let nv = self.n_vertices();
        let mut d_wrot = vec![Matrix3::zeros(); nj];
        let mut d_pos = vec![Vector3::zeros(); nj];
        let mut d_rest = vec![Vector3::zeros(); nj];
        let mut d_shaped = vec![Vector3::zeros(); nv];

        if let Some(dj) = d_joints {
            for (acc, g) in d_pos.iter_mut().zip(dj) {
                *acc += g;
            }
        }

        for v in 0..nv {
            let g = d_vertices[v];
            if g == Vector3::zeros() {
                continue;
            }
            let t = posed.shaped[v];
            for &(k, w) in &self.skin_sparse[v] {
                let gw = g * w;
                d_wrot[k] += gw * (t - posed.rest_joints[k]).transpose();
                d_pos[k] += gw;
                let back = posed.world_rot[k].transpose() * gw;
                d_shaped[v] += back;
                d_rest[k] -= back;
            }
        }

        let mut d_rot = vec![Matrix3::zeros(); nj];
        for k in (1..nj).rev() {
            let p = self.parents[k] as usize;
            let wp = posed.world_rot[p];
            // world_rot[k] = wp * R_k
            let dk = d_wrot[k];
            d_wrot[p] += dk * rotations[k].transpose();
            d_rot[k] = wp.transpose() * d_wrot[k];
            // joints[k] = wp * (J_k - J_p) + joints[p]
            let gpos = d_pos[k];
            d_wrot[p] += gpos * (posed.rest_joints[k] - posed.rest_joints[p]).transpose();
            let back = wp.transpose() * gpos;
            d_rest[k] += back;
            d_rest[p] -= back;
            d_pos[p] += gpos;
        }
        d_rot[0] = d_wrot[0];
        d_rest[0] += d_pos[0];

        for (k, row) in self.jreg_sparse.iter().enumerate() {
            for &(v, w) in row {
                d_shaped[v] += d_rest[k] * w;
            }
        }

        let nb = self.n_betas;
        let mut d_beta = vec![0.0; nb];
        for (v, g) in d_shaped.iter().enumerate() {
            for c in 0..3 {
                if g[c] == 0.0 {
                    continue;
                }
                let dirs = &self.shape_dirs[(v * 3 + c) * nb..(v * 3 + c + 1) * nb];
                for (db, d) in d_beta.iter_mut().zip(dirs) {
                    *db += g[c] * d;
                }
            }
        }

        BodyGrad {
            rotations: d_rot,
            beta: d_beta,
        }
    }

    fn check_vertices(&self, n: usize) -> Result<()> {
        if n != self.n_vertices() {
            return Err(Error::DimensionMismatch {
                what: "mesh vertices",
                expected: self.n_vertices(),
                got: n,
            });
        }
        Ok(())
    }

    /// `kp_regressor · vertices`.
    pub fn regress_keypoints(&self, mesh: &MeshResult) -> Result<Vec<Vector3<f64>>> {
        self.check_vertices(mesh.vertices.len())?;
        Ok(self.regress_keypoints_from(&mesh.vertices))
    }

    pub(crate) fn regress_keypoints_from(&self, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.kp_sparse
            .iter()
            .map(|row| row.iter().fold(Vector3::zeros(), |acc, &(v, w)| acc + vertices[v] * w))
            .collect()
    }

    /// Adds `kp_regressorᵀ · d_keypoints` into `d_vertices`.
    pub(crate) fn keypoints_backward(&self, d_keypoints: &[Vector3<f64>], d_vertices: &mut [Vector3<f64>]) {
        for (row, g) in self.kp_sparse.iter().zip(d_keypoints) {
            for &(v, w) in row {
                d_vertices[v] += g * w;
            }
        }
    }

    pub fn extract_landmarks(&self, mesh: &MeshResult) -> Result<Vec<Vector3<f64>>> {
        self.check_vertices(mesh.vertices.len())?;
        Ok(self.landmark_indices.iter().map(|&i| mesh.vertices[i as usize]).collect())
    }
}
