//! Synthetic oracle: a procedural SMPL-like rig, ground-truth bodies, camera
//! rings, noisy detections and perturbed per-view priors.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, MeshResult, PoseParams, ShapeParams, NUM_BETAS, NUM_JOINTS, NUM_KEYPOINTS, NUM_LANDMARKS};
use crate::camera::{orient_to_view, CameraModel, Extrinsics, Intrinsics, Projection};
use crate::error::{Error, Result};
use crate::losses::{Detection2D, ViewState, ViewVariable};
use crate::metrics::MetricReport;
use crate::optimizer::{run_tta, TtaConfig};
use crate::prior::{encode_params, PriorHead, Token, BETA_OFFSET, PARAM_DIM};
use crate::rotation::{aa_to_rotmat, rotmat_to_6d, sixd_to_rotmat, AxisAngle, RotMat, Rot6D};

/// SMPL kinematic tree.
pub const PARENTS: [i32; NUM_JOINTS] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2", "left_ankle", "right_ankle",
    "spine3", "left_foot", "right_foot", "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
];

/// Rest joint centers (meters, y up, body facing +z).
const REST_JOINTS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.06, -0.09, 0.0],
    [-0.06, -0.09, 0.0],
    [0.0, 0.11, -0.02],
    [0.10, -0.47, 0.01],
    [-0.10, -0.47, 0.01],
    [0.0, 0.24, 0.0],
    [0.09, -0.87, -0.03],
    [-0.09, -0.87, -0.03],
    [0.0, 0.29, 0.02],
    [0.12, -0.93, 0.09],
    [-0.12, -0.93, 0.09],
    [0.0, 0.50, -0.01],
    [0.08, 0.41, 0.0],
    [-0.08, 0.41, 0.0],
    [0.0, 0.58, 0.04],
    [0.19, 0.45, -0.01],
    [-0.19, 0.45, -0.01],
    [0.45, 0.43, -0.03],
    [-0.45, 0.43, -0.03],
    [0.71, 0.44, -0.03],
    [-0.71, 0.44, -0.03],
    [0.79, 0.43, -0.04],
    [-0.79, 0.43, -0.04],
];

/// Child joint each bone points at; `None` for leaves.
const BONE_TARGET: [Option<usize>; NUM_JOINTS] = [
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(10),
    Some(11),
    Some(12),
    None,
    None,
    Some(15),
    Some(16),
    Some(17),
    None,
    Some(18),
    Some(19),
    Some(20),
    Some(21),
    Some(22),
    Some(23),
    None,
    None,
];

const RADII: [f64; NUM_JOINTS] = [
    0.12, 0.08, 0.08, 0.11, 0.06, 0.06, 0.12, 0.045, 0.045, 0.12, 0.04, 0.04, 0.05, 0.05, 0.05, 0.09, 0.055, 0.055,
    0.045, 0.045, 0.035, 0.035, 0.03, 0.03,
];

const LEAF_LENGTH: f64 = 0.08;
const VERTS_PER_JOINT: usize = 8;
/// Joints carrying a second landmark on the far side of their bone.
const EXTRA_LANDMARK_JOINTS: [usize; 11] = [4, 5, 7, 8, 15, 16, 17, 18, 19, 20, 21];
/// Minimum vertex count of [`build_rig`].
pub const MIN_RIG_VERTICES: usize = NUM_JOINTS * VERTS_PER_JOINT;

fn bone_end(k: usize) -> Vector3<f64> {
    let j = Vector3::from(REST_JOINTS[k]);
    match BONE_TARGET[k] {
        Some(t) => Vector3::from(REST_JOINTS[t]),
        None => {
            let p = Vector3::from(REST_JOINTS[PARENTS[k] as usize]);
            j + (j - p).normalize() * LEAF_LENGTH
        }
    }
}

/// Orthonormal pair spanning the plane normal to `d`.
fn normal_frame(d: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = d.cross(&helper).normalize();
    let e2 = d.cross(&e1);
    (e1, e2)
}

/// Builds the procedural 24-joint rig with `n_vertices ≥ 192` vertices.
///
/// Each joint owns a ring of four vertices at its center (half parent, half
/// own skinning; the joint regressor averages them) and four vertices around
/// the middle of its bone (fully own skinning). Remaining vertices are spread
/// along the bones. Keypoints are the 24 joints followed by 20 mid-bone
/// centers; landmarks are off-axis surface vertices that see twist.
pub fn build_rig(n_vertices: usize, seed: u64) -> Result<BodyModel> {
    if n_vertices < MIN_RIG_VERTICES {
        return Err(Error::invalid(format!("rig needs at least {MIN_RIG_VERTICES} vertices, got {n_vertices}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nj = NUM_JOINTS;
    let mut template = Vec::with_capacity(n_vertices);
    let mut owner = Vec::with_capacity(n_vertices);
    let mut radial = Vec::with_capacity(n_vertices);
    let mut skin = vec![0.0; n_vertices * nj];

    for k in 0..nj {
        let j = Vector3::from(REST_JOINTS[k]);
        let end = bone_end(k);
        let d = (end - j).normalize();
        let (e1, e2) = normal_frame(&d);
        let r = RADII[k];
        for q in 0..4 {
            let a = std::f64::consts::FRAC_PI_2 * q as f64;
            let u = e1 * a.cos() + e2 * a.sin();
            let v = template.len();
            template.push(j + u * r);
            owner.push(k);
            radial.push(u);
            if k == 0 {
                skin[v * nj] = 1.0;
            } else {
                skin[v * nj + PARENTS[k] as usize] = 0.5;
                skin[v * nj + k] = 0.5;
            }
        }
        let mid = j + (end - j) * 0.5;
        for q in 0..4 {
            let a = std::f64::consts::FRAC_PI_4 + std::f64::consts::FRAC_PI_2 * q as f64;
            let u = e1 * a.cos() + e2 * a.sin();
            let v = template.len();
            template.push(mid + u * r);
            owner.push(k);
            radial.push(u);
            skin[v * nj + k] = 1.0;
        }
    }
    for i in MIN_RIG_VERTICES..n_vertices {
        let k = i % nj;
        let j = Vector3::from(REST_JOINTS[k]);
        let end = bone_end(k);
        let d = (end - j).normalize();
        let (e1, e2) = normal_frame(&d);
        let t: f64 = rng.random_range(0.2..0.9);
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let u = e1 * a.cos() + e2 * a.sin();
        template.push(j + (end - j) * t + u * RADII[k]);
        owner.push(k);
        radial.push(u);
        skin[i * nj + k] = 1.0;
    }

    // Shape directions: global scale, girth, then per-joint offsets.
    let nb = NUM_BETAS;
    let offsets: Vec<Vec<Vector3<f64>>> = (2..nb)
        .map(|_| {
            (0..nj)
                .map(|_| {
                    let g = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
                    Vector3::new(g(&mut rng), g(&mut rng), g(&mut rng)) * 0.01
                })
                .collect()
        })
        .collect();
    let mut shape_dirs = vec![0.0; n_vertices * 3 * nb];
    for v in 0..n_vertices {
        for c in 0..3 {
            let base = (v * 3 + c) * nb;
            shape_dirs[base] = 0.03 * template[v][c];
            shape_dirs[base + 1] = 0.01 * radial[v][c];
            for b in 2..nb {
                shape_dirs[base + b] = offsets[b - 2][owner[v]][c];
            }
        }
    }

    let mut joint_regressor = vec![0.0; nj * n_vertices];
    for k in 0..nj {
        for q in 0..4 {
            joint_regressor[k * n_vertices + VERTS_PER_JOINT * k + q] = 0.25;
        }
    }
    let mut kp_regressor = joint_regressor.clone();
    kp_regressor.resize(NUM_KEYPOINTS * n_vertices, 0.0);
    for (row, k) in (nj..NUM_KEYPOINTS).zip(1..) {
        for q in 4..8 {
            kp_regressor[row * n_vertices + VERTS_PER_JOINT * k + q] = 0.25;
        }
    }
    let mut landmarks: Vec<u32> = (0..nj).map(|k| (VERTS_PER_JOINT * k + 4) as u32).collect();
    landmarks.extend(EXTRA_LANDMARK_JOINTS.iter().map(|&k| (VERTS_PER_JOINT * k + 6) as u32));
    debug_assert_eq!(landmarks.len(), NUM_LANDMARKS);

    BodyModel::new(
        template,
        shape_dirs,
        nb,
        PARENTS.to_vec(),
        joint_regressor,
        skin,
        kp_regressor,
        landmarks,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigSpec {
    /// Camera distance from the body (m).
    pub ring_radius: f64,
    /// Camera height above the pelvis (m).
    pub height: f64,
    /// Uniform jitter of the look-at point (m) and of the ring angle (rad).
    pub look_at_jitter: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec {
            ring_radius: 3.0,
            height: 0.3,
            look_at_jitter: 0.05,
        }
    }
}

/// Extra rotation applied to one joint of one view's prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierSpec {
    pub view: usize,
    pub joint: usize,
    pub offset_rad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_views: usize,
    pub rig: RigSpec,
    pub detection_noise_px: f64,
    pub detection_dropout: f64,
    /// Per-axis noise on the body joints of each prior (rad).
    pub prior_pose_noise_rad: f64,
    /// Per-axis noise on each prior's global orientation (rad).
    pub prior_orient_noise_rad: f64,
    pub prior_shape_noise: f64,
    pub outliers: Vec<OutlierSpec>,
    pub calibrated: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            n_views: 4,
            rig: RigSpec::default(),
            detection_noise_px: 3.0,
            detection_dropout: 0.05,
            prior_pose_noise_rad: 0.15,
            prior_orient_noise_rad: 0.0,
            prior_shape_noise: 0.1,
            outliers: Vec::new(),
            calibrated: true,
        }
    }
}

impl SceneSpec {
    /// Every noise source switched off.
    pub fn noiseless(seed: u64) -> Self {
        SceneSpec {
            seed,
            detection_noise_px: 0.0,
            detection_dropout: 0.0,
            prior_pose_noise_rad: 0.0,
            prior_orient_noise_rad: 0.0,
            prior_shape_noise: 0.0,
            ..SceneSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.detection_noise_px,
            self.prior_pose_noise_rad,
            self.prior_orient_noise_rad, self.prior_shape_noise, self.rig.look_at_jitter];
        if self.n_views == 0 {
            return Err(Error::invalid("a scene needs at least one view"));
        }
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("noise levels must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.detection_dropout) {
            return Err(Error::invalid("dropout probability must lie in [0, 1]"));
        }
        if !(self.rig.ring_radius > 0.0 && self.rig.ring_radius.is_finite() && self.rig.height.is_finite()) {
            return Err(Error::invalid("ring radius must be positive"));
        }
        for o in &self.outliers {
            if o.view >= self.n_views || o.joint >= NUM_JOINTS || !o.offset_rad.is_finite() {
                return Err(Error::invalid(format!("outlier {o:?} is out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Pose with the root in the world frame.
    pub pose: PoseParams,
    pub shape: ShapeParams,
    /// World-frame joints and vertices.
    pub joints3d: Vec<Vector3<f64>>,
    pub vertices: Vec<Vector3<f64>>,
    /// Root orientation as seen from each camera.
    pub view_roots: Vec<RotMat>,
}

impl GroundTruth {
    pub fn mesh(&self) -> MeshResult {
        MeshResult {
            vertices: self.vertices.clone(),
            joints3d: self.joints3d.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub model: BodyModel,
    pub head: PriorHead,
    pub cameras: Vec<CameraModel>,
    pub detections: Vec<Detection2D>,
    pub tokens: Vec<Token>,
    pub calibrated: bool,
    pub gt: Option<GroundTruth>,
}

/// Which per-view variable the optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    #[default]
    LearnedToken,
    SmplParams,
}

impl Scene {
    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if n == 0 {
            return Err(Error::invalid("scene has no views"));
        }
        if self.detections.len() != n || self.tokens.len() != n {
            return Err(Error::invalid("scene has inconsistent per-view arrays"));
        }
        let d = self.head.token_dim();
        if let Some(t) = self.tokens.iter().find(|t| t.0.len() != d) {
            return Err(Error::DimensionMismatch { what: "scene token", expected: d, got: t.0.len() });
        }
        let (nk, nl) = (self.model.n_keypoints(), self.model.n_landmarks());
        if self.detections.iter().any(|det| det.keypoints.len() != nk || det.landmarks.len() != nl) {
            return Err(Error::invalid("detection counts do not match the body model"));
        }
        for c in &self.cameras {
            c.validate()?;
            if self.calibrated && c.extrinsics.is_none() {
                return Err(Error::InvalidCamera("calibrated scene with a camera lacking extrinsics".into()));
            }
        }
        if let Some(gt) = &self.gt {
            if gt.view_roots.len() != n {
                return Err(Error::invalid("ground truth has the wrong number of view roots"));
            }
        }
        Ok(())
    }

    pub fn extrinsics(&self) -> Option<Vec<Extrinsics>> {
        if self.calibrated {
            self.cameras.iter().map(|c| c.extrinsics).collect()
        } else {
            None
        }
    }

    /// Per-view prior bodies (camera-frame roots) decoded from the tokens.
    pub fn prior_bodies(&self) -> Result<(Vec<PoseParams>, Vec<ShapeParams>)> {
        let mut poses = Vec::new();
        let mut shapes = Vec::new();
        for t in &self.tokens {
            let (p, s) = self.head.decode(t)?;
            poses.push(p);
            shapes.push(s);
        }
        Ok((poses, shapes))
    }

    pub fn initial_views(&self, component: Component) -> Result<Vec<ViewState>> {
        self.validate()?;
        self.tokens
            .iter()
            .zip(&self.cameras)
            .zip(&self.detections)
            .map(|((t, cam), det)| {
                let variable = match component {
                    Component::LearnedToken => ViewVariable::Token(t.clone()),
                    Component::SmplParams => ViewVariable::Direct(self.head.decode_vector(t)?),
                };
                ViewState::new(&self.model, &self.head, variable, *cam, det.clone())
            })
            .collect()
    }

    /// The scene restricted to its first `n` views.
    pub fn subset(&self, n: usize) -> Result<Scene> {
        if n == 0 || n > self.n_views() {
            return Err(Error::invalid(format!("cannot take {n} of {} views", self.n_views())));
        }
        let mut s = self.clone();
        s.cameras.truncate(n);
        s.detections.truncate(n);
        s.tokens.truncate(n);
        if let Some(gt) = s.gt.as_mut() {
            gt.view_roots.truncate(n);
        }
        Ok(s)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(normal(rng), normal(rng), normal(rng))
}

/// Rotation vector with uniformly distributed direction and norm in `[0, max)`.
fn bounded_aa(rng: &mut ChaCha8Rng, max: f64) -> AxisAngle {
    let dir = loop {
        let v = normal3(rng);
        if v.norm() > 1e-6 {
            break v.normalize();
        }
    };
    AxisAngle(dir * rng.random_range(0.0..max))
}

/// Maximum norm of the per-joint rotation vectors drawn for ground truth.
pub const GT_POSE_BOUND: f64 = 0.6;

fn body_vector(aa: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(PARAM_DIM - 6);
    for k in 0..aa.len() / 3 {
        let r = aa_to_rotmat(&AxisAngle::new(aa[3 * k], aa[3 * k + 1], aa[3 * k + 2]))?;
        out.extend(rotmat_to_6d(&r).to_array());
    }
    out.extend_from_slice(beta);
    Ok(out)
}

const GT_PROJECTION_TOL: f64 = 1e-12;

/// Moves a body (joint rotation vectors + betas) onto the set the head can
/// represent exactly, with Gauss-Newton on the out-of-range residual.
fn project_onto_head(head: &PriorHead, aa: &mut [f64], beta: &mut [f64]) -> Result<()> {
    let d = head.token_dim();
    if d <= 6 {
        return Err(Error::invalid("ground-truth projection needs a token dimension above 6"));
    }
    let w_body = head.weight().view((6, 6), (PARAM_DIM - 6, d - 6)).into_owned();
    let b_body = head.bias().rows(6, PARAM_DIM - 6).into_owned();
    let svd = w_body.svd(true, false);
    let tol = svd.singular_values.max() * 1e-10;
    let u_all = svd.u.expect("requested U");
    let cols: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > tol).collect();
    if cols.len() >= PARAM_DIM - 6 {
        return Ok(());
    }
    let u = u_all.select_columns(cols.iter());
    let residual = |aa: &[f64], beta: &[f64]| -> Result<DVector<f64>> {
        let x = DVector::from_vec(body_vector(aa, beta)?) - &b_body;
        Ok(&x - &u * u.tr_mul(&x))
    };
    let n_aa = aa.len();
    let n = n_aa + beta.len();
    // Converges in a handful of iterations, then stalls at rounding level
    // (around 1e-13), so stop at the acceptance tolerance.
    for _ in 0..60 {
        let r = residual(aa, beta)?;
        if r.norm() < GT_PROJECTION_TOL {
            return Ok(());
        }
        let mut jac = DMatrix::zeros(r.len(), n);
        let h = 1e-7;
        for i in 0..n {
            let mut ap = aa.to_vec();
            let mut bp = beta.to_vec();
            let mut am = aa.to_vec();
            let mut bm = beta.to_vec();
            if i < n_aa {
                ap[i] += h;
                am[i] -= h;
            } else {
                bp[i - n_aa] += h;
                bm[i - n_aa] -= h;
            }
            let col = (residual(&ap, &bp)? - residual(&am, &bm)?) / (2.0 * h);
            jac.set_column(i, &col);
        }
        let step = jac
            .svd(true, true)
            .solve(&r, 1e-10)
            .map_err(|e| Error::Invariant(format!("ground-truth projection failed: {e}")))?;
        for i in 0..n {
            if i < n_aa {
                aa[i] -= step[i];
            } else {
                beta[i - n_aa] -= step[i];
            }
        }
    }
    let r = residual(aa, beta)?;
    if r.norm() < GT_PROJECTION_TOL {
        Ok(())
    } else {
        Err(Error::Invariant(format!("ground-truth projection did not converge (residual {:e})", r.norm())))
    }
}

/// Draws a ground-truth body that the head reproduces exactly.
pub fn sample_ground_truth(model: &BodyModel, head: &PriorHead, rng: &mut ChaCha8Rng) -> Result<(PoseParams, ShapeParams)> {
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let tilt = AxisAngle::new(0.1 * normal(rng), 0.0, 0.1 * normal(rng));
    let root = aa_to_rotmat(&AxisAngle::new(0.0, yaw, 0.0))?.compose(&aa_to_rotmat(&tilt)?);
    let nj = model.n_joints();
    let mut aa = Vec::with_capacity(3 * (nj - 1));
    for _ in 1..nj {
        aa.extend(bounded_aa(rng, GT_POSE_BOUND).0.iter());
    }
    let mut beta: Vec<f64> = (0..model.n_betas()).map(|_| rng.random_range(-1.0..1.0)).collect();
    project_onto_head(head, &mut aa, &mut beta)?;
    let mut pose = PoseParams::identity(nj);
    pose.root = root;
    for k in 1..nj {
        *pose.joint_mut(k) = aa_to_rotmat(&AxisAngle::new(aa[3 * (k - 1)], aa[3 * k - 2], aa[3 * k - 1]))?;
    }
    Ok((pose, ShapeParams { beta }))
}

fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 1000.0,
        fy: 1000.0,
        cx: 500.0,
        cy: 500.0,
        width: 1000.0,
        height: 1000.0,
    }
}

/// World-to-camera transform of a camera at `center` looking at `target`
/// (x right, y down, z forward; world y is up).
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Result<Extrinsics> {
    let z = target - center;
    if z.norm() < 1e-9 {
        return Err(Error::InvalidCamera("camera coincides with its target".into()));
    }
    let z = z.normalize();
    let down = Vector3::new(0.0, -1.0, 0.0);
    let x = down.cross(&z);
    if x.norm() < 1e-9 {
        return Err(Error::InvalidCamera("camera looks straight up or down".into()));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let rotation = RotMat::new(r)?;
    Ok(Extrinsics {
        rotation,
        translation: -(r * center),
    })
}

const MIN_SCENE_DEPTH: f64 = 0.1;
const PLACEMENT_ATTEMPTS: usize = 100;

fn place_camera(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    view: usize,
    mesh: &MeshResult,
    keypoints: &[Vector3<f64>],
) -> Result<Extrinsics> {
    let base = std::f64::consts::TAU * view as f64 / spec.n_views as f64;
    let j = spec.rig.look_at_jitter;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let angle = base + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 };
        let center = Vector3::new(spec.rig.ring_radius * angle.sin(), spec.rig.height, spec.rig.ring_radius * angle.cos());
        let mut target = mesh.joints3d[0];
        if j > 0.0 {
            target += Vector3::new(rng.random_range(-j..j), rng.random_range(-j..j), rng.random_range(-j..j));
        }
        let Ok(ext) = look_at(&center, &target) else {
            continue;
        };
        let visible = keypoints
            .iter()
            .chain(&mesh.vertices)
            .all(|p| ext.to_camera(p).z > MIN_SCENE_DEPTH);
        if visible {
            return Ok(ext);
        }
    }
    Err(Error::Placement(view))
}

/// Generates a deterministic scene for `spec`.
pub fn generate_scene(model: &BodyModel, head: &PriorHead, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    if model.n_joints() != NUM_JOINTS || model.n_betas() != NUM_BETAS {
        return Err(Error::invalid("scenes require a 24-joint, 10-beta body model"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (gt_pose, gt_shape) = sample_ground_truth(model, head, &mut rng)?;
    let gt_mesh = model.forward(&gt_pose, &gt_shape)?;
    let gt_kps = model.regress_keypoints(&gt_mesh)?;
    let gt_lms = model.extract_landmarks(&gt_mesh)?;
    let rest_root = model.forward(&PoseParams::identity(NUM_JOINTS), &gt_shape)?.joints3d[0];

    let mut cameras = Vec::new();
    let mut detections = Vec::new();
    let mut tokens = Vec::new();
    let mut view_roots = Vec::new();
    for i in 0..spec.n_views {
        let ext = place_camera(&mut rng, spec, i, &gt_mesh, &gt_kps)?;
        // Camera-frame point = forward(camera-frame root) + offset.
        let body_offset = ext.rotation.matrix() * rest_root + ext.translation - rest_root;
        let camera = CameraModel {
            projection: Projection::Perspective,
            intrinsics: default_intrinsics(),
            extrinsics: spec.calibrated.then_some(ext),
            body_offset,
        };
        let mut project = |pts: &[Vector3<f64>], offset: usize| -> Result<Vec<[f64; 3]>> {
            pts.iter()
                .enumerate()
                .map(|(idx, p)| {
                    let (uv, _) = camera.project_point(offset + idx, &ext.to_camera(p))?;
                    let nu = spec.detection_noise_px * normal(&mut rng);
                    let nv = spec.detection_noise_px * normal(&mut rng);
                    let dropped = spec.detection_dropout > 0.0 && rng.random_bool(spec.detection_dropout);
                    let conf = if dropped {
                        rng.random_range(0.0..0.9)
                    } else {
                        rng.random_range(0.95..=1.0)
                    };
                    Ok([uv.x + nu, uv.y + nv, conf])
                })
                .collect()
        };
        let keypoints = project(&gt_kps, 0)?;
        let landmarks = project(&gt_lms, gt_kps.len())?;

        let view_root = orient_to_view(&gt_pose.root, &ext);
        let mut prior = gt_pose.clone();
        prior.root = view_root;
        for k in 0..NUM_JOINTS {
            let sigma = if k == 0 {
                spec.prior_orient_noise_rad
            } else {
                spec.prior_pose_noise_rad
            };
            if sigma > 0.0 {
                let noise = aa_to_rotmat(&AxisAngle(normal3(&mut rng) * sigma))?;
                *prior.joint_mut(k) = prior.joint(k).compose(&noise);
            }
        }
        for o in spec.outliers.iter().filter(|o| o.view == i) {
            let axis = normal3(&mut rng).normalize();
            let offset = aa_to_rotmat(&AxisAngle(axis * o.offset_rad))?;
            *prior.joint_mut(o.joint) = prior.joint(o.joint).compose(&offset);
        }
        let mut shape = gt_shape.clone();
        if spec.prior_shape_noise > 0.0 {
            for b in &mut shape.beta {
                *b += spec.prior_shape_noise * normal(&mut rng);
            }
        }
        let fit = head.fit_token(&prior, &shape)?;
        cameras.push(camera);
        detections.push(Detection2D { keypoints, landmarks });
        tokens.push(fit.token);
        view_roots.push(view_root);
    }
    Ok(Scene {
        model: model.clone(),
        head: head.clone(),
        cameras,
        detections,
        tokens,
        calibrated: spec.calibrated,
        gt: Some(GroundTruth {
            pose: gt_pose,
            shape: gt_shape,
            joints3d: gt_mesh.joints3d,
            vertices: gt_mesh.vertices,
            view_roots,
        }),
    })
}

/// Normalized 6D of a raw block, used to compare decoded bodies.
pub(crate) fn normalized_block(raw: &[f64]) -> Result<[f64; 6]> {
    Ok(rotmat_to_6d(&sixd_to_rotmat(&Rot6D::from_slice(raw))?).to_array())
}

/// Distance of a decoded prior from the exact encoding of a target body.
pub fn prior_error(head: &PriorHead, token: &Token, pose: &PoseParams, shape: &ShapeParams) -> Result<f64> {
    let target = encode_params(pose, shape)?;
    let raw = head.decode_vector(token)?;
    let mut err: f64 = 0.0;
    for k in 0..NUM_JOINTS {
        let a = normalized_block(&raw[6 * k..6 * k + 6])?;
        for (x, y) in a.iter().zip(&target[6 * k..6 * k + 6]) {
            err = err.max((x - y).abs());
        }
    }
    for (x, y) in raw[BETA_OFFSET..].iter().zip(&target[BETA_OFFSET..]) {
        err = err.max((x - y).abs());
    }
    Ok(err)
}

/// Parameter varied by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Number of views; cells use the first `n` views of one scene.
    NViews,
    /// TTA step count (warm-up shortened when it would exceed it).
    Steps,
    /// View learning rate.
    Lr,
    /// Detection noise in pixels.
    Noise,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n-views" | "n_views" | "views" => Ok(SweepAxis::NViews),
            "steps" => Ok(SweepAxis::Steps),
            "lr" => Ok(SweepAxis::Lr),
            "noise" => Ok(SweepAxis::Noise),
            _ => Err(Error::invalid(format!("unknown sweep axis '{s}' (n-views, steps, lr, noise)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub metrics: MetricReport,
}

fn count_value(axis: SweepAxis, v: f64) -> Result<usize> {
    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
        return Err(Error::invalid(format!("{axis:?} sweep values must be nonnegative integers, got {v}")));
    }
    Ok(v as usize)
}

fn sweep_run(scene: &Scene, cfg: &TtaConfig, axis: SweepAxis, value: f64) -> Result<SweepRow> {
    let metrics = run_tta(scene, cfg)?.final_metrics().ok_or(Error::MissingGroundTruth)?;
    Ok(SweepRow { axis, value, metrics })
}

/// Sweeps an existing scene. View counts take prefixes of its views; the
/// noise axis needs [`sweep`], which regenerates the scene.
pub fn sweep_scene(scene: &Scene, config: &TtaConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    values
        .iter()
        .map(|&v| match axis {
            SweepAxis::NViews => sweep_run(&scene.subset(count_value(axis, v)?)?, config, axis, v),
            SweepAxis::Steps => {
                let steps = count_value(axis, v)?;
                let cfg = TtaConfig { steps, warmup_steps: config.warmup_steps.min(steps), ..config.clone() };
                sweep_run(scene, &cfg, axis, v)
            }
            SweepAxis::Lr => sweep_run(scene, &TtaConfig { eta: v, ..config.clone() }, axis, v),
            SweepAxis::Noise => Err(Error::invalid("the noise axis regenerates scenes; sweep from a scene spec")),
        })
        .collect()
}

/// Runs one TTA per value of `axis` and reports the final metrics of each.
pub fn sweep(
    model: &BodyModel,
    head: &PriorHead,
    spec: &SceneSpec,
    config: &TtaConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    match axis {
        SweepAxis::NViews => {
            let max = values.iter().map(|&v| count_value(axis, v)).collect::<Result<Vec<_>>>()?.into_iter().max();
            let scene = generate_scene(model, head, &SceneSpec { n_views: max.unwrap_or(1), ..spec.clone() })?;
            sweep_scene(&scene, config, axis, values)
        }
        SweepAxis::Steps | SweepAxis::Lr => sweep_scene(&generate_scene(model, head, spec)?, config, axis, values),
        SweepAxis::Noise => values
            .iter()
            .map(|&v| {
                let scene = generate_scene(model, head, &SceneSpec { detection_noise_px: v, ..spec.clone() })?;
                sweep_run(&scene, config, axis, v)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::synth_head;
    use crate::rotation::geodesic_dist;

    fn fixtures() -> (BodyModel, PriorHead) {
        (build_rig(200, 0).unwrap(), synth_head(1, 128).unwrap())
    }

    #[test]
    fn rig_has_the_expected_layout() {
        let m = build_rig(200, 0).unwrap();
        assert_eq!(m.n_vertices(), 200);
        assert_eq!(m.n_joints(), NUM_JOINTS);
        assert_eq!(m.n_keypoints(), NUM_KEYPOINTS);
        assert_eq!(m.n_landmarks(), NUM_LANDMARKS);
        assert!(build_rig(100, 0).is_err());
        assert_eq!(build_rig(300, 4).unwrap(), build_rig(300, 4).unwrap());
        let rest = m.forward(&PoseParams::identity(24), &ShapeParams::zeros(10)).unwrap();
        for (j, r) in rest.joints3d.iter().zip(REST_JOINTS.iter()) {
            assert!((j - Vector3::from(*r)).norm() < 1e-12);
        }
    }

    #[test]
    fn look_at_centers_the_target() {
        let ext = look_at(&Vector3::new(3.0, 0.5, 1.0), &Vector3::new(0.1, 0.0, -0.2)).unwrap();
        let p = ext.to_camera(&Vector3::new(0.1, 0.0, -0.2));
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        // World up maps to image up (negative camera y).
        let up = ext.rotation.matrix() * Vector3::y();
        assert!(up.y < 0.0);
    }

    #[test]
    fn ground_truth_is_reproduced_by_the_head() {
        let (m, head) = fixtures();
        let scene = generate_scene(&m, &head, &SceneSpec::noiseless(7)).unwrap();
        let gt = scene.gt.as_ref().unwrap();
        for (t, root) in scene.tokens.iter().zip(&gt.view_roots) {
            let mut pose = gt.pose.clone();
            pose.root = *root;
            assert!(prior_error(&head, t, &pose, &gt.shape).unwrap() < 1e-12);
        }
    }

    #[test]
    fn noiseless_detections_reproject_exactly() {
        let (m, head) = fixtures();
        for calibrated in [true, false] {
            let spec = SceneSpec {
                calibrated,
                ..SceneSpec::noiseless(3)
            };
            let scene = generate_scene(&m, &head, &spec).unwrap();
            let (poses, shapes) = scene.prior_bodies().unwrap();
            for i in 0..scene.n_views() {
                let cam = &scene.cameras[i];
                let mesh = m.forward(&poses[i], &shapes[i]).unwrap();
                let kps = m.regress_keypoints(&mesh).unwrap();
                for (d, k) in scene.detections[i].keypoints.iter().zip(&kps) {
                    let (uv, _) = cam.project_point(0, &(k + cam.body_offset)).unwrap();
                    assert!((uv.x - d[0]).abs() < 1e-9 && (uv.y - d[1]).abs() < 1e-9);
                    assert!(d[2] >= 0.95);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let (m, head) = fixtures();
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(&m, &head, &spec).unwrap(), generate_scene(&m, &head, &spec).unwrap());
        let other = SceneSpec { seed: 1, ..spec };
        assert_ne!(generate_scene(&m, &head, &other).unwrap(), generate_scene(&m, &head, &SceneSpec::default()).unwrap());
    }

    #[test]
    fn outlier_view_is_far_from_truth() {
        let (m, head) = fixtures();
        let spec = SceneSpec {
            seed: 5,
            outliers: vec![OutlierSpec {
                view: 1,
                joint: 18,
                offset_rad: 1.5,
            }],
            ..SceneSpec::noiseless(5)
        };
        let scene = generate_scene(&m, &head, &spec).unwrap();
        let (poses, _) = scene.prior_bodies().unwrap();
        let gt = scene.gt.as_ref().unwrap();
        let d = geodesic_dist(poses[1].joint(18), gt.pose.joint(18));
        assert!((d - 1.5).abs() < 0.35, "outlier elbow at {d} rad");
        for i in [0, 2, 3] {
            assert!(geodesic_dist(poses[i].joint(18), gt.pose.joint(18)) < 1e-9);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let (m, head) = fixtures();
        let bad = [
            SceneSpec { n_views: 0, ..SceneSpec::default() },
            SceneSpec { detection_noise_px: -1.0, ..SceneSpec::default() },
            SceneSpec { detection_dropout: 1.5, ..SceneSpec::default() },
            SceneSpec {
                outliers: vec![OutlierSpec { view: 9, joint: 1, offset_rad: 1.0 }],
                ..SceneSpec::default()
            },
        ];
        for spec in bad {
            assert!(generate_scene(&m, &head, &spec).is_err());
        }
    }

    #[test]
    fn full_dropout_yields_low_confidence() {
        let (m, head) = fixtures();
        let spec = SceneSpec {
            detection_dropout: 1.0,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&m, &head, &spec).unwrap();
        assert!(scene.detections.iter().all(|d| d.active_count() == 0));
    }

    #[test]
    fn sweep_rows_follow_values() {
        let m = build_rig(200, 0).unwrap();
        let head = synth_head(1, 128).unwrap();
        let spec = SceneSpec { seed: 2, ..SceneSpec::default() };
        let cfg = TtaConfig { steps: 5, warmup_steps: 2, ..TtaConfig::default() };
        let rows = sweep(&m, &head, &spec, &cfg, SweepAxis::Lr, &[0.03]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].value, 0.03);

        let rows = sweep(&m, &head, &spec, &cfg, SweepAxis::Steps, &[0.0, 3.0]).unwrap();
        let direct = run_tta(&generate_scene(&m, &head, &spec).unwrap(), &TtaConfig { steps: 0, warmup_steps: 0, ..cfg.clone() })
            .unwrap()
            .final_metrics()
            .unwrap();
        assert_eq!(rows[0].metrics, direct);

        let rows = sweep(&m, &head, &spec, &cfg, SweepAxis::NViews, &[2.0, 3.0]).unwrap();
        assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![2.0, 3.0]);

        assert!(sweep(&m, &head, &spec, &cfg, SweepAxis::NViews, &[2.5]).is_err());
        assert!(sweep(&m, &head, &spec, &cfg, SweepAxis::Steps, &[-1.0]).is_err());
        assert!(sweep(&m, &head, &spec, &cfg, SweepAxis::Noise, &[]).is_err());
        assert!("bogus".parse::<SweepAxis>().is_err());
        assert_eq!("n-views".parse::<SweepAxis>().unwrap(), SweepAxis::NViews);
    }
}
