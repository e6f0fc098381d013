//! Test-time losses: 2D reprojection, cross-view consistency (pairwise and
//! star), regularization towards the initial predictions, and the
//! virtual-view consistency loss. Every loss returns its value together with
//! the gradient with respect to the optimized variables.
//!
//! Each `‖·‖₂` term is the mean Euclidean norm over its rows (keypoints,
//! joints, vertices); single-row terms (root orientation, betas) are plain
//! norms.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, MeshResult, PoseParams, PosedBody, ShapeParams};
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::fusion::{OrientMode, VirtualView};
use crate::prior::{add_sixd_grad, decode_params, encode_params, sixd_of, PriorHead, Token, BETA_OFFSET, PARAM_DIM};
use crate::rotation::{sixd_backward, Rot6D, RotMat};

/// Detections at or below this confidence are ignored.
pub const CONFIDENCE_THRESHOLD: f64 = 0.9;

/// Loss weights. Defaults are the CameraHMR column of the published table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_kp: f64,
    pub lambda_ana: f64,
    pub lambda_reg_orient: f64,
    pub lambda_reg_pose: f64,
    pub lambda_reg_betas: f64,
    pub lambda_reg_vertice: f64,
    pub lambda_con_orient: f64,
    pub lambda_con_pose: f64,
    pub lambda_con_betas: f64,
    pub lambda_con_vertice: f64,
    pub lambda_virtual_orient: f64,
    pub lambda_virtual_pose: f64,
    pub lambda_virtual_betas: f64,
    pub lambda_virtual_vertice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_kp: 3e-1,
            lambda_ana: 3e-1,
            lambda_reg_orient: 3e1,
            lambda_reg_pose: 1e-1,
            lambda_reg_betas: 2e-2,
            lambda_reg_vertice: 1e-2,
            lambda_con_orient: 5.0,
            lambda_con_pose: 5.0,
            lambda_con_betas: 5.0,
            lambda_con_vertice: 3e-1,
            lambda_virtual_orient: 3e2,
            lambda_virtual_pose: 1e1,
            lambda_virtual_betas: 1.0,
            lambda_virtual_vertice: 1e-1,
        }
    }
}

impl LossWeights {
    pub fn all_zero() -> Self {
        LossWeights {
            lambda_kp: 0.0,
            lambda_ana: 0.0,
            lambda_reg_orient: 0.0,
            lambda_reg_pose: 0.0,
            lambda_reg_betas: 0.0,
            lambda_reg_vertice: 0.0,
            lambda_con_orient: 0.0,
            lambda_con_pose: 0.0,
            lambda_con_betas: 0.0,
            lambda_con_vertice: 0.0,
            lambda_virtual_orient: 0.0,
            lambda_virtual_pose: 0.0,
            lambda_virtual_betas: 0.0,
            lambda_virtual_vertice: 0.0,
        }
    }

    fn values(&self) -> [f64; 14] {
        [
            self.lambda_kp,
            self.lambda_ana,
            self.lambda_reg_orient,
            self.lambda_reg_pose,
            self.lambda_reg_betas,
            self.lambda_reg_vertice,
            self.lambda_con_orient,
            self.lambda_con_pose,
            self.lambda_con_betas,
            self.lambda_con_vertice,
            self.lambda_virtual_orient,
            self.lambda_virtual_pose,
            self.lambda_virtual_betas,
            self.lambda_virtual_vertice,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values().iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("loss weights must be finite and nonnegative"))
        }
    }
}

/// Per-view 2D observations: `(u, v, confidence)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D {
    pub keypoints: Vec<[f64; 3]>,
    pub landmarks: Vec<[f64; 3]>,
}

impl Detection2D {
    pub fn validate(&self) -> Result<()> {
        for d in self.keypoints.iter().chain(&self.landmarks) {
            if !(d[0].is_finite() && d[1].is_finite()) || !(0.0..=1.0).contains(&d[2]) {
                return Err(Error::invalid(format!("invalid detection {d:?}")));
            }
        }
        Ok(())
    }

    pub fn active_count(&self) -> usize {
        self.keypoints
            .iter()
            .chain(&self.landmarks)
            .filter(|d| d[2] > CONFIDENCE_THRESHOLD)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyMode {
    #[default]
    Pairwise,
    Star,
}

/// The optimized per-view variable.
#[derive(Debug, Clone, PartialEq)]
pub enum ViewVariable {
    /// Latent token decoded through the frozen head.
    Token(Token),
    /// The raw parameter vector itself (6D blocks + betas).
    Direct(Vec<f64>),
}

impl ViewVariable {
    pub fn values(&self) -> &[f64] {
        match self {
            ViewVariable::Token(t) => &t.0,
            ViewVariable::Direct(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodySnapshot {
    pub pose: PoseParams,
    pub shape: ShapeParams,
    pub mesh: MeshResult,
}

/// One camera view under optimization. The decoded body and mesh always
/// follow the current variable; the initial snapshot is fixed at creation.
#[derive(Debug, Clone)]
pub struct ViewState {
    variable: ViewVariable,
    pub camera: CameraModel,
    pub detection: Detection2D,
    raw: Vec<f64>,
    pose: PoseParams,
    shape: ShapeParams,
    posed: PosedBody,
    initial: BodySnapshot,
}

fn raw_of(head: &PriorHead, variable: &ViewVariable) -> Result<Vec<f64>> {
    match variable {
        ViewVariable::Token(t) => head.decode_vector(t),
        ViewVariable::Direct(v) => {
            if v.len() != PARAM_DIM {
                return Err(Error::DimensionMismatch {
                    what: "direct parameters",
                    expected: PARAM_DIM,
                    got: v.len(),
                });
            }
            Ok(v.clone())
        }
    }
}

impl ViewState {
    pub fn new(
        model: &BodyModel,
        head: &PriorHead,
        variable: ViewVariable,
        camera: CameraModel,
        detection: Detection2D,
    ) -> Result<Self> {
        camera.validate()?;
        detection.validate()?;
        if detection.keypoints.len() != model.n_keypoints() || detection.landmarks.len() != model.n_landmarks() {
            return Err(Error::DimensionMismatch {
                what: "detections",
                expected: model.n_keypoints() + model.n_landmarks(),
                got: detection.keypoints.len() + detection.landmarks.len(),
            });
        }
        let raw = raw_of(head, &variable)?;
        let (pose, shape) = decode_params(&raw)?;
        let posed = model.pose_body(&pose.matrices(), &shape.beta)?;
        let initial = BodySnapshot {
            pose: pose.clone(),
            shape: shape.clone(),
            mesh: posed.mesh(),
        };
        Ok(ViewState {
            variable,
            camera,
            detection,
            raw,
            pose,
            shape,
            posed,
            initial,
        })
    }

    /// Replaces the variable and re-decodes; the snapshot is kept.
    pub fn set_values(&mut self, model: &BodyModel, head: &PriorHead, values: &[f64]) -> Result<()> {
        let variable = match &self.variable {
            ViewVariable::Token(_) => ViewVariable::Token(Token(values.to_vec())),
            ViewVariable::Direct(_) => ViewVariable::Direct(values.to_vec()),
        };
        let raw = raw_of(head, &variable)?;
        let (pose, shape) = decode_params(&raw)?;
        self.posed = model.pose_body(&pose.matrices(), &shape.beta)?;
        self.variable = variable;
        self.raw = raw;
        self.pose = pose;
        self.shape = shape;
        Ok(())
    }

    pub fn variable(&self) -> &ViewVariable {
        &self.variable
    }
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }
    pub fn pose(&self) -> &PoseParams {
        &self.pose
    }
    pub fn shape(&self) -> &ShapeParams {
        &self.shape
    }
    pub fn mesh(&self) -> MeshResult {
        self.posed.mesh()
    }
    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.posed.vertices
    }
    pub fn initial(&self) -> &BodySnapshot {
        &self.initial
    }
}

/// Shared inputs of every loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub model: &'a BodyModel,
    pub head: &'a PriorHead,
    pub weights: &'a LossWeights,
    pub calibrated: bool,
}

/// Value and per-view gradients of a multi-view loss.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
    /// Row comparisons performed (instrumentation for the cost contract).
    pub ops: usize,
}

#[derive(Debug, Clone)]
pub struct Loss2d {
    pub value: f64,
    pub grad: Vec<f64>,
    pub active: usize,
    pub masked: usize,
}

/// Residual norms at or below this count as exact agreement: value and gradient
/// are zero. The norms are unsquared, so without the floor rounding noise at an
/// optimum yields unit-length gradients and the optimizer walks away from it.
pub const RESIDUAL_FLOOR: f64 = 1e-9;

/// `‖a − b‖` and its gradient with respect to `a` (zero within the floor).
fn diff_norm(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > RESIDUAL_FLOOR {
        (n, d.into_iter().map(|v| v / n).collect())
    } else {
        (0.0, vec![0.0; a.len()])
    }
}

fn diff_norm3(a: &Vector3<f64>, b: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let d = a - b;
    let n = d.norm();
    if n > RESIDUAL_FLOOR {
        (n, d / n)
    } else {
        (0.0, Vector3::zeros())
    }
}

/// Quantities compared across views: root and body 6D in the shared frame,
/// betas, and the mesh posed with the shared-frame root.
struct CommonBody {
    root6: Option<[f64; 6]>,
    body6: Vec<[f64; 6]>,
    beta: Vec<f64>,
    rots: Vec<Matrix3<f64>>,
    posed: PosedBody,
    ext_rot: Option<Matrix3<f64>>,
}

impl CommonBody {
    fn n_rows(&self) -> usize {
        self.root6.is_some() as usize + self.body6.len() + 1 + self.posed.vertices.len()
    }
}

fn common_body(ctx: &LossContext, view: &ViewState) -> Result<CommonBody> {
    let (root, ext_rot) = if ctx.calibrated {
        let ext = view
            .camera
            .extrinsics
            .ok_or_else(|| Error::InvalidCamera("calibrated mode requires extrinsics on every view".into()))?;
        (crate::camera::orient_to_world(&view.pose.root, &ext), Some(*ext.rotation.matrix()))
    } else {
        (RotMat::IDENTITY, None)
    };
    let mut rots = view.pose.matrices();
    rots[0] = *root.matrix();
    let posed = ctx.model.pose_body(&rots, &view.shape.beta)?;
    Ok(CommonBody {
        root6: ext_rot.map(|_| sixd_of(&root)),
        body6: view.pose.body.iter().map(sixd_of).collect(),
        beta: view.shape.beta.clone(),
        rots,
        posed,
        ext_rot,
    })
}

/// Accumulated cotangents for one view.
struct Cotangent {
    d_rot: Vec<Matrix3<f64>>,
    d_beta: Vec<f64>,
    d_vert: Vec<Vector3<f64>>,
    d_root_common: Matrix3<f64>,
    d_vert_common: Option<Vec<Vector3<f64>>>,
}

impl Cotangent {
    fn new(model: &BodyModel) -> Self {
        Cotangent {
            d_rot: vec![Matrix3::zeros(); model.n_joints()],
            d_beta: vec![0.0; model.n_betas()],
            d_vert: vec![Vector3::zeros(); model.n_vertices()],
            d_root_common: Matrix3::zeros(),
            d_vert_common: None,
        }
    }

    fn vert_common(&mut self, n: usize) -> &mut Vec<Vector3<f64>> {
        self.d_vert_common.get_or_insert_with(|| vec![Vector3::zeros(); n])
    }
}

/// Pulls rotation-matrix and beta gradients back to a raw parameter vector.
fn raw_gradient(raw: &[f64], d_rot: &[Matrix3<f64>], d_beta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; PARAM_DIM];
    for (k, dr) in d_rot.iter().enumerate() {
        if *dr == Matrix3::zeros() {
            continue;
        }
        let (ga, gb) = sixd_backward(&Rot6D::from_slice(&raw[6 * k..6 * k + 6]), dr);
        g[6 * k..6 * k + 3].copy_from_slice(ga.as_slice());
        g[6 * k + 3..6 * k + 6].copy_from_slice(gb.as_slice());
    }
    g[BETA_OFFSET..].copy_from_slice(d_beta);
    g
}

fn finalize(ctx: &LossContext, view: &ViewState, common: Option<&CommonBody>, mut cot: Cotangent) -> Vec<f64> {
    let model = ctx.model;
    let rots = view.pose.matrices();
    let g = model.backward(&rots, &view.posed, &cot.d_vert, None);
    for (acc, d) in cot.d_rot.iter_mut().zip(&g.rotations) {
        *acc += d;
    }
    for (acc, d) in cot.d_beta.iter_mut().zip(&g.beta) {
        *acc += d;
    }
    if let (Some(c), Some(dv)) = (common, cot.d_vert_common.as_ref()) {
        let gc = model.backward(&c.rots, &c.posed, dv, None);
        for k in 1..cot.d_rot.len() {
            cot.d_rot[k] += gc.rotations[k];
        }
        cot.d_root_common += gc.rotations[0];
        for (acc, d) in cot.d_beta.iter_mut().zip(&gc.beta) {
            *acc += d;
        }
    }
    // Shared-frame root is Rᵀ_ext · R_cam; without extrinsics it is constant.
    if let Some(ext) = common.and_then(|c| c.ext_rot) {
        cot.d_rot[0] += ext * cot.d_root_common;
    }
    let g_raw = raw_gradient(&view.raw, &cot.d_rot, &cot.d_beta);
    match view.variable {
        ViewVariable::Token(_) => ctx.head.pullback(&g_raw),
        ViewVariable::Direct(_) => g_raw,
    }
}

fn accumulate_2d(ctx: &LossContext, view: &ViewState, cot: &mut Cotangent) -> Result<(f64, usize, usize)> {
    let model = ctx.model;
    let w = ctx.weights;
    let cam = &view.camera;
    let offset = cam.body_offset;
    let kps = model.regress_keypoints_from(&view.posed.vertices);
    let mut value = 0.0;

    let active_kp: Vec<usize> = (0..kps.len()).filter(|&i| view.detection.keypoints[i][2] > CONFIDENCE_THRESHOLD).collect();
    let lm_idx = model.landmark_indices();
    let active_lm: Vec<usize> = (0..lm_idx.len()).filter(|&i| view.detection.landmarks[i][2] > CONFIDENCE_THRESHOLD).collect();
    let masked = kps.len() + lm_idx.len() - active_kp.len() - active_lm.len();

    if !active_kp.is_empty() && w.lambda_kp > 0.0 {
        let scale = w.lambda_kp / active_kp.len() as f64;
        let mut d_kp = vec![Vector3::zeros(); kps.len()];
        for &i in &active_kp {
            let (uv, jac) = cam.project_point(i, &(kps[i] + offset))?;
            let det = &view.detection.keypoints[i];
            let r = nalgebra::Vector2::new(uv.x - det[0], uv.y - det[1]);
            let n = r.norm();
            if n > RESIDUAL_FLOOR {
                value += scale * n;
                d_kp[i] = jac.transpose() * (r * (scale / n));
            }
        }
        model.keypoints_backward(&d_kp, &mut cot.d_vert);
    }
    if !active_lm.is_empty() && w.lambda_ana > 0.0 {
        let scale = w.lambda_ana / active_lm.len() as f64;
        for &i in &active_lm {
            let v = lm_idx[i] as usize;
            let (uv, jac) = cam.project_point(kps.len() + i, &(view.posed.vertices[v] + offset))?;
            let det = &view.detection.landmarks[i];
            let r = nalgebra::Vector2::new(uv.x - det[0], uv.y - det[1]);
            let n = r.norm();
            if n > RESIDUAL_FLOOR {
                value += scale * n;
                cot.d_vert[v] += jac.transpose() * (r * (scale / n));
            }
        }
    }
    Ok((value, active_kp.len() + active_lm.len(), masked))
}

fn accumulate_reg(ctx: &LossContext, view: &ViewState, cot: &mut Cotangent) -> f64 {
    let w = ctx.weights;
    let init = &view.initial;
    let mut value = 0.0;
    if w.lambda_reg_orient > 0.0 {
        let (n, g) = diff_norm(&sixd_of(&view.pose.root), &sixd_of(&init.pose.root));
        value += w.lambda_reg_orient * n;
        let g: Vec<f64> = g.iter().map(|x| x * w.lambda_reg_orient).collect();
        add_sixd_grad(&g, &mut cot.d_rot[0]);
    }
    let nb = view.pose.body.len();
    if w.lambda_reg_pose > 0.0 && nb > 0 {
        let scale = w.lambda_reg_pose / nb as f64;
        for k in 0..nb {
            let (n, g) = diff_norm(&sixd_of(&view.pose.body[k]), &sixd_of(&init.pose.body[k]));
            value += scale * n;
            let g: Vec<f64> = g.iter().map(|x| x * scale).collect();
            add_sixd_grad(&g, &mut cot.d_rot[k + 1]);
        }
    }
    if w.lambda_reg_betas > 0.0 {
        let (n, g) = diff_norm(&view.shape.beta, &init.shape.beta);
        value += w.lambda_reg_betas * n;
        for (acc, x) in cot.d_beta.iter_mut().zip(g) {
            *acc += w.lambda_reg_betas * x;
        }
    }
    if w.lambda_reg_vertice > 0.0 {
        let nv = view.posed.vertices.len();
        let scale = w.lambda_reg_vertice / nv as f64;
        for v in 0..nv {
            let (n, g) = diff_norm3(&view.posed.vertices[v], &init.mesh.vertices[v]);
            value += scale * n;
            cot.d_vert[v] += g * scale;
        }
    }
    value
}

/// Weights of one consistency family (orient, pose, betas, vertices).
#[derive(Clone, Copy)]
struct FamilyWeights {
    orient: f64,
    pose: f64,
    betas: f64,
    vertices: f64,
}

impl FamilyWeights {
    fn con(w: &LossWeights) -> Self {
        FamilyWeights {
            orient: w.lambda_con_orient,
            pose: w.lambda_con_pose,
            betas: w.lambda_con_betas,
            vertices: w.lambda_con_vertice,
        }
    }
    fn virtual_(w: &LossWeights) -> Self {
        FamilyWeights {
            orient: w.lambda_virtual_orient,
            pose: w.lambda_virtual_pose,
            betas: w.lambda_virtual_betas,
            vertices: w.lambda_virtual_vertice,
        }
    }
}

/// Flat view of a `CommonBody`-like target used as a constant reference.
#[derive(Debug, Clone)]
struct Reference {
    root6: Option<[f64; 6]>,
    body6: Vec<[f64; 6]>,
    beta: Vec<f64>,
    vertices: Vec<Vector3<f64>>,
}

impl Reference {
    fn of(c: &CommonBody) -> Self {
        Reference {
            root6: c.root6,
            body6: c.body6.clone(),
            beta: c.beta.clone(),
            vertices: c.posed.vertices.clone(),
        }
    }
}

/// Distance of `body` from a constant reference; gradient lands on `body`'s
/// cotangent. Returns the weighted value.
fn deviation(fw: FamilyWeights, body: &CommonBody, reference: &Reference, cot: &mut Cotangent) -> f64 {
    let mut value = 0.0;
    if let (Some(r), Some(rr)) = (body.root6, reference.root6) {
        if fw.orient > 0.0 {
            let (n, g) = diff_norm(&r, &rr);
            value += fw.orient * n;
            let g: Vec<f64> = g.iter().map(|x| x * fw.orient).collect();
            add_sixd_grad(&g, &mut cot.d_root_common);
        }
    }
    let nb = body.body6.len();
    if fw.pose > 0.0 && nb > 0 {
        let scale = fw.pose / nb as f64;
        for k in 0..nb {
            let (n, g) = diff_norm(&body.body6[k], &reference.body6[k]);
            value += scale * n;
            let g: Vec<f64> = g.iter().map(|x| x * scale).collect();
            add_sixd_grad(&g, &mut cot.d_rot[k + 1]);
        }
    }
    if fw.betas > 0.0 {
        let (n, g) = diff_norm(&body.beta, &reference.beta);
        value += fw.betas * n;
        for (acc, x) in cot.d_beta.iter_mut().zip(g) {
            *acc += fw.betas * x;
        }
    }
    if fw.vertices > 0.0 {
        let nv = body.posed.vertices.len();
        let scale = fw.vertices / nv as f64;
        let dv = cot.vert_common(nv);
        for v in 0..nv {
            let (n, g) = diff_norm3(&body.posed.vertices[v], &reference.vertices[v]);
            value += scale * n;
            dv[v] += g * scale;
        }
    }
    value
}

fn accumulate_pairwise(ctx: &LossContext, commons: &[CommonBody], cots: &mut [Cotangent]) -> Result<(f64, usize)> {
    let n = commons.len();
    if n < 2 {
        return Err(Error::invalid("consistency loss needs at least two views"));
    }
    let fw = FamilyWeights::con(ctx.weights);
    let mut value = 0.0;
    let mut ops = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            // Each pair once; the gradient w.r.t. j mirrors that w.r.t. i.
            let ref_j = Reference::of(&commons[j]);
            value += deviation(fw, &commons[i], &ref_j, &mut cots[i]);
            let ref_i = Reference::of(&commons[i]);
            deviation(fw, &commons[j], &ref_i, &mut cots[j]);
            ops += commons[i].n_rows();
        }
    }
    Ok((value, ops))
}

fn mean_reference(commons: &[CommonBody]) -> Result<(Reference, usize)> {
    let n = commons.len();
    if n < 2 {
        return Err(Error::invalid("consistency loss needs at least two views"));
    }
    let nf = n as f64;
    let first = &commons[0];
    let mut mean = Reference {
        root6: first.root6.map(|_| [0.0; 6]),
        body6: vec![[0.0; 6]; first.body6.len()],
        beta: vec![0.0; first.beta.len()],
        vertices: vec![Vector3::zeros(); first.posed.vertices.len()],
    };
    let mut ops = 0;
    for c in commons {
        if let (Some(acc), Some(r)) = (mean.root6.as_mut(), c.root6) {
            for (a, x) in acc.iter_mut().zip(r) {
                *a += x / nf;
            }
        }
        for (acc, b) in mean.body6.iter_mut().zip(&c.body6) {
            for (a, x) in acc.iter_mut().zip(b) {
                *a += x / nf;
            }
        }
        for (a, x) in mean.beta.iter_mut().zip(&c.beta) {
            *a += x / nf;
        }
        for (a, x) in mean.vertices.iter_mut().zip(&c.posed.vertices) {
            *a += x / nf;
        }
        ops += c.n_rows();
    }
    Ok((mean, ops))
}

fn accumulate_star_against(
    ctx: &LossContext,
    commons: &[CommonBody],
    mean: &Reference,
    cots: &mut [Cotangent],
) -> Result<(f64, usize)> {
    if commons.len() < 2 {
        return Err(Error::invalid("consistency loss needs at least two views"));
    }
    if mean.body6.len() != commons[0].body6.len() || mean.vertices.len() != commons[0].posed.vertices.len() {
        return Err(Error::invalid("star reference does not match the views"));
    }
    if mean.root6.is_some() != commons[0].root6.is_some() {
        return Err(Error::invalid("star reference and views disagree on calibration"));
    }
    let fw = FamilyWeights::con(ctx.weights);
    let mut value = 0.0;
    let mut ops = 0;
    for (c, cot) in commons.iter().zip(cots.iter_mut()) {
        value += deviation(fw, c, mean, cot);
        ops += c.n_rows();
    }
    Ok((value, ops))
}

fn accumulate_star(ctx: &LossContext, commons: &[CommonBody], cots: &mut [Cotangent]) -> Result<(f64, usize)> {
    let (mean, ops_mean) = mean_reference(commons)?;
    let (value, ops) = accumulate_star_against(ctx, commons, &mean, cots)?;
    Ok((value, ops_mean + ops))
}

fn check_views(views: &[ViewState]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::invalid("at least one view is required"));
    }
    Ok(())
}

/// 2D reprojection loss of one view.
pub fn loss_2d(ctx: &LossContext, view: &ViewState) -> Result<Loss2d> {
    let mut cot = Cotangent::new(ctx.model);
    let (value, active, masked) = accumulate_2d(ctx, view, &mut cot)?;
    let grad = finalize(ctx, view, None, cot);
    Ok(Loss2d {
        value,
        grad,
        active,
        masked,
    })
}

fn multi_view<F>(ctx: &LossContext, views: &[ViewState], needs_common: bool, f: F) -> Result<LossEval>
where
    F: FnOnce(&[CommonBody], &mut [Cotangent]) -> Result<(f64, usize)>,
{
    check_views(views)?;
    let commons: Vec<CommonBody> = if needs_common {
        views.iter().map(|v| common_body(ctx, v)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut cots: Vec<Cotangent> = views.iter().map(|_| Cotangent::new(ctx.model)).collect();
    let (value, ops) = f(&commons, &mut cots)?;
    let grads = views
        .iter()
        .zip(cots)
        .enumerate()
        .map(|(i, (v, cot))| finalize(ctx, v, commons.get(i), cot))
        .collect();
    Ok(LossEval { value, grads, ops })
}

/// Consistency over every unordered pair of views.
pub fn loss_consistency_pairwise(ctx: &LossContext, views: &[ViewState]) -> Result<LossEval> {
    multi_view(ctx, views, true, |c, cots| accumulate_pairwise(ctx, c, cots))
}

/// Consistency of each view against the (constant) mean of all views.
pub fn loss_consistency_star(ctx: &LossContext, views: &[ViewState]) -> Result<LossEval> {
    multi_view(ctx, views, true, |c, cots| accumulate_star(ctx, c, cots))
}

/// The constant mean body the star loss compares every view against.
#[derive(Debug, Clone)]
pub struct StarReference(Reference);

pub fn star_reference(ctx: &LossContext, views: &[ViewState]) -> Result<StarReference> {
    check_views(views)?;
    let commons: Vec<CommonBody> = views.iter().map(|v| common_body(ctx, v)).collect::<Result<_>>()?;
    Ok(StarReference(mean_reference(&commons)?.0))
}

/// Star consistency against a fixed reference. With the reference taken from
/// the same views this equals [`loss_consistency_star`] except for the
/// operation count of building the mean.
pub fn loss_consistency_star_against(
    ctx: &LossContext,
    views: &[ViewState],
    reference: &StarReference,
) -> Result<LossEval> {
    multi_view(ctx, views, true, |c, cots| accumulate_star_against(ctx, c, &reference.0, cots))
}

pub fn loss_regularization(ctx: &LossContext, views: &[ViewState]) -> Result<LossEval> {
    multi_view(ctx, views, false, |_, cots| {
        let v: f64 = views.iter().zip(cots.iter_mut()).map(|(view, cot)| accumulate_reg(ctx, view, cot)).sum();
        Ok((v, 0))
    })
}

/// Which per-view loss families participate in the view update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossTerms {
    pub reprojection: bool,
    pub consistency: bool,
    pub regularization: bool,
    /// Reprojection of the virtual view into every calibrated camera.
    pub virtual_reprojection: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            reprojection: true,
            consistency: true,
            regularization: true,
            virtual_reprojection: true,
        }
    }
}

/// Combined per-view objective for one optimizer step.
#[derive(Debug, Clone)]
pub struct ViewObjective {
    pub loss_2d: f64,
    pub loss_con: f64,
    pub loss_reg: f64,
    pub grads: Vec<Vec<f64>>,
    pub masked: Vec<usize>,
    pub active: Vec<usize>,
    pub ops: usize,
}

impl ViewObjective {
    pub fn total(&self) -> f64 {
        self.loss_2d + self.loss_con + self.loss_reg
    }
}

/// `L_2d + L_con + L_reg` summed over views, with one backward pass per view.
pub fn view_objective(
    ctx: &LossContext,
    views: &[ViewState],
    mode: ConsistencyMode,
    terms: LossTerms,
) -> Result<ViewObjective> {
    check_views(views)?;
    let use_con = terms.consistency && views.len() >= 2;
    let commons: Vec<CommonBody> = if use_con {
        views.iter().map(|v| common_body(ctx, v)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut cots: Vec<Cotangent> = views.iter().map(|_| Cotangent::new(ctx.model)).collect();
    let mut out = ViewObjective {
        loss_2d: 0.0,
        loss_con: 0.0,
        loss_reg: 0.0,
        grads: Vec::new(),
        masked: Vec::new(),
        active: Vec::new(),
        ops: 0,
    };
    for (view, cot) in views.iter().zip(cots.iter_mut()) {
        if terms.reprojection {
            let (v, active, masked) = accumulate_2d(ctx, view, cot)?;
            out.loss_2d += v;
            out.active.push(active);
            out.masked.push(masked);
        }
        if terms.regularization {
            out.loss_reg += accumulate_reg(ctx, view, cot);
        }
    }
    if use_con {
        let (v, ops) = match mode {
            ConsistencyMode::Pairwise => accumulate_pairwise(ctx, &commons, &mut cots)?,
            ConsistencyMode::Star => accumulate_star(ctx, &commons, &mut cots)?,
        };
        out.loss_con = v;
        out.ops = ops;
    }
    out.grads = views
        .iter()
        .zip(cots)
        .enumerate()
        .map(|(i, (v, cot))| finalize(ctx, v, commons.get(i), cot))
        .collect();
    Ok(out)
}

/// Optimizable virtual view: raw 6D blocks and betas.
#[derive(Debug, Clone)]
pub struct VirtualState {
    raw: Vec<f64>,
    pose: PoseParams,
    shape: ShapeParams,
    orient_mode: OrientMode,
    rots_common: Vec<Matrix3<f64>>,
    posed_common: PosedBody,
}

impl VirtualState {
    pub fn new(model: &BodyModel, view: &VirtualView) -> Result<Self> {
        let raw = encode_params(&view.pose, &view.shape)?;
        Self::from_raw(model, raw, view.orient_mode)
    }

    pub fn from_raw(model: &BodyModel, raw: Vec<f64>, orient_mode: OrientMode) -> Result<Self> {
        let (pose, shape) = decode_params(&raw)?;
        let mut rots_common = pose.matrices();
        if orient_mode == OrientMode::PerViewFree {
            rots_common[0] = Matrix3::identity();
        }
        let posed_common = model.pose_body(&rots_common, &shape.beta)?;
        Ok(VirtualState {
            raw,
            pose,
            shape,
            orient_mode,
            rots_common,
            posed_common,
        })
    }

    pub fn set_raw(&mut self, model: &BodyModel, raw: Vec<f64>) -> Result<()> {
        *self = Self::from_raw(model, raw, self.orient_mode)?;
        Ok(())
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn view(&self) -> VirtualView {
        VirtualView {
            pose: self.pose.clone(),
            shape: self.shape.clone(),
            orient_mode: self.orient_mode,
        }
    }

    fn as_common(&self) -> CommonBody {
        CommonBody {
            root6: match self.orient_mode {
                OrientMode::World => Some(sixd_of(&self.pose.root)),
                OrientMode::PerViewFree => None,
            },
            body6: self.pose.body.iter().map(sixd_of).collect(),
            beta: self.shape.beta.clone(),
            rots: self.rots_common.clone(),
            posed: self.posed_common.clone(),
            ext_rot: None,
        }
    }
}

/// Value and raw-parameter gradient of the virtual-view objective.
#[derive(Debug, Clone)]
pub struct VirtualEval {
    pub value: f64,
    pub consistency: f64,
    pub reprojection: f64,
    pub grad: Vec<f64>,
}

/// Virtual-view consistency against every camera view, plus (calibrated,
/// world-frame virtual view, `reproject` set) the 2D reprojection of the
/// virtual body into every camera. Only the virtual parameters receive a
/// gradient.
pub fn loss_virtual(ctx: &LossContext, virt: &VirtualState, views: &[ViewState], reproject: bool) -> Result<VirtualEval> {
    check_views(views)?;
    if virt.orient_mode == OrientMode::World && !ctx.calibrated {
        return Err(Error::invalid("world-frame virtual view requires calibrated cameras"));
    }
    let body = virt.as_common();
    let fw = FamilyWeights::virtual_(ctx.weights);
    let mut cot = Cotangent::new(ctx.model);
    let mut consistency = 0.0;
    for v in views {
        let reference = Reference::of(&common_body(ctx, v)?);
        consistency += deviation(fw, &body, &reference, &mut cot);
    }
    if let Some(dv) = cot.d_vert_common.as_ref() {
        let g = ctx.model.backward(&body.rots, &body.posed, dv, None);
        for k in 1..cot.d_rot.len() {
            cot.d_rot[k] += g.rotations[k];
        }
        cot.d_root_common += g.rotations[0];
        for (acc, d) in cot.d_beta.iter_mut().zip(&g.beta) {
            *acc += d;
        }
    }
    if virt.orient_mode == OrientMode::World {
        cot.d_rot[0] += cot.d_root_common;
    }
    let mut grad = raw_gradient(&virt.raw, &cot.d_rot, &cot.d_beta);
    let mut reprojection = 0.0;
    if reproject && virt.orient_mode == OrientMode::World {
        for v in views {
            let (value, g) = virtual_2d(ctx, virt, v)?;
            reprojection += value;
            for (acc, x) in grad.iter_mut().zip(g) {
                *acc += x;
            }
        }
    }
    Ok(VirtualEval {
        value: consistency + reprojection,
        consistency,
        reprojection,
        grad,
    })
}

/// 2D loss of the virtual body seen through one view's camera. Rotating both
/// raw root columns by the extrinsic rotation rotates the decoded root the
/// same way, so the camera-frame raw vector is a linear image of the virtual
/// one and the gradient pulls back through the transpose.
fn virtual_2d(ctx: &LossContext, virt: &VirtualState, view: &ViewState) -> Result<(f64, Vec<f64>)> {
    let ext = view
        .camera
        .extrinsics
        .ok_or_else(|| Error::InvalidCamera("calibrated mode requires extrinsics on every view".into()))?;
    let r = *ext.rotation.matrix();
    let mut raw = virt.raw.clone();
    for c in 0..2 {
        let col = r * Vector3::from_column_slice(&virt.raw[3 * c..3 * c + 3]);
        raw[3 * c..3 * c + 3].copy_from_slice(col.as_slice());
    }
    let (pose, shape) = decode_params(&raw)?;
    let posed = ctx.model.pose_body(&pose.matrices(), &shape.beta)?;
    let probe = ViewState {
        variable: ViewVariable::Direct(Vec::new()),
        camera: view.camera.clone(),
        detection: view.detection.clone(),
        raw,
        initial: BodySnapshot {
            pose: pose.clone(),
            shape: shape.clone(),
            mesh: posed.mesh(),
        },
        pose,
        shape,
        posed,
    };
    let mut cot = Cotangent::new(ctx.model);
    let (value, _, _) = accumulate_2d(ctx, &probe, &mut cot)?;
    let mut g = finalize(ctx, &probe, None, cot);
    for c in 0..2 {
        let back = r.transpose() * Vector3::from_column_slice(&g[3 * c..3 * c + 3]);
        g[3 * c..3 * c + 3].copy_from_slice(back.as_slice());
    }
    Ok((value, g))
}
