//! Evaluation metrics. Positions are in meters; errors are reported in mm.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::body::{PoseParams, ShapeParams, PELVIS};
use crate::error::{Error, Result};
use crate::fusion::OrientMode;
use crate::losses::CONFIDENCE_THRESHOLD;
use crate::synth::Scene;

pub const MM_PER_M: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub pck: f64,
    pub auc: f64,
    pub epe: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub pck_threshold_mm: f64,
    pub auc_max_mm: f64,
    pub auc_steps: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            pck_threshold_mm: 150.0,
            auc_max_mm: 150.0,
            auc_steps: 31,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pck_threshold_mm > 0.0 && self.auc_max_mm > 0.0 && self.auc_steps >= 2) {
            return Err(Error::invalid("PCK threshold and AUC grid must be positive with at least two steps"));
        }
        Ok(())
    }

    pub fn auc_grid(&self) -> Vec<f64> {
        let n = self.auc_steps;
        (0..n).map(|i| self.auc_max_mm * i as f64 / (n - 1) as f64).collect()
    }
}

fn check_pair(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            what: "metric point sets",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("metric point sets are empty"));
    }
    Ok(())
}

/// Pelvis-aligned per-point errors in mm.
pub fn aligned_errors(pred: &[Vector3<f64>], gt: &[Vector3<f64>], pelvis: usize) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    if pelvis >= pred.len() {
        return Err(Error::invalid(format!("pelvis index {pelvis} out of range")));
    }
    let (pp, gp) = (pred[pelvis], gt[pelvis]);
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p - pp) - (g - gp)).norm() * MM_PER_M)
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>], pelvis: usize) -> Result<f64> {
    Ok(mean(&aligned_errors(pred, gt, pelvis)?))
}

/// Vertex error after aligning the root joint positions.
pub fn mpvpe(
    pred_verts: &[Vector3<f64>],
    gt_verts: &[Vector3<f64>],
    pred_pelvis: &Vector3<f64>,
    gt_pelvis: &Vector3<f64>,
) -> Result<f64> {
    check_pair(pred_verts, gt_verts)?;
    let e: Vec<f64> = pred_verts
        .iter()
        .zip(gt_verts)
        .map(|(p, g)| ((p - pred_pelvis) - (g - gt_pelvis)).norm() * MM_PER_M)
        .collect();
    Ok(mean(&e))
}

/// Least-squares similarity `(s, R, t)` with `s·R·pred + t ≈ gt`.
pub fn similarity_fit(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<Vector3<f64>>() / n;
    let my = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut cov_gt = Matrix3::zeros();
    let mut var_x = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (xc, yc) = (p - mx, g - my);
        cov += yc * xc.transpose();
        cov_gt += yc * yc.transpose();
        var_x += xc.norm_squared();
    }
    let sv_gt = cov_gt.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv_gt.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if pred.len() < 3 || !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::DegenerateCloud("ground truth is collinear"));
    }
    if !(var_x > 0.0) {
        return Err(Error::DegenerateCloud("prediction collapses to a point"));
    }
    let svd = (cov / n).svd(true, true);
    let (u, vt) = (svd.u.expect("U"), svd.v_t.expect("Vt"));
    let mut s_diag = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s_diag[(2, 2)] = -1.0;
    }
    let r = u * s_diag * vt;
    let d = Matrix3::from_diagonal(&svd.singular_values);
    let scale = (d * s_diag).trace() / (var_x / n);
    let t = my - r * mx * scale;
    Ok((scale, r, t))
}

pub fn pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let (s, r, t) = similarity_fit(pred, gt)?;
    let e: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((r * p) * s + t - g).norm() * MM_PER_M)
        .collect();
    Ok(mean(&e))
}

/// Percentage of pelvis-aligned errors at or below `threshold_mm`.
pub fn pck(pred: &[Vector3<f64>], gt: &[Vector3<f64>], pelvis: usize, threshold_mm: f64) -> Result<f64> {
    if !(threshold_mm > 0.0) {
        return Err(Error::invalid("PCK threshold must be positive"));
    }
    Ok(pck_of_errors(&aligned_errors(pred, gt, pelvis)?, threshold_mm))
}

pub fn pck_of_errors(errors: &[f64], threshold_mm: f64) -> f64 {
    100.0 * errors.iter().filter(|e| **e <= threshold_mm).count() as f64 / errors.len() as f64
}

/// Area under the PCK curve over `thresholds` (trapezoid rule, normalized by
/// the grid span).
pub fn auc(pred: &[Vector3<f64>], gt: &[Vector3<f64>], pelvis: usize, thresholds: &[f64]) -> Result<f64> {
    auc_of_errors(&aligned_errors(pred, gt, pelvis)?, thresholds)
}

pub fn auc_of_errors(errors: &[f64], thresholds: &[f64]) -> Result<f64> {
    if thresholds.len() < 2 || thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("AUC needs at least two strictly increasing thresholds"));
    }
    let curve: Vec<f64> = thresholds.iter().map(|t| pck_of_errors(errors, *t)).collect();
    let area: f64 = thresholds
        .windows(2)
        .zip(curve.windows(2))
        .map(|(t, p)| 0.5 * (p[0] + p[1]) * (t[1] - t[0]))
        .sum();
    Ok(area / (thresholds[thresholds.len() - 1] - thresholds[0]))
}

/// Mean 2D distance in pixels.
pub fn epe(pred2d: &[Vector2<f64>], gt2d: &[Vector2<f64>]) -> Result<f64> {
    if pred2d.len() != gt2d.len() || pred2d.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "2D point sets",
            expected: gt2d.len(),
            got: pred2d.len(),
        });
    }
    Ok(pred2d.iter().zip(gt2d).map(|(a, b)| (a - b).norm()).sum::<f64>() / pred2d.len() as f64)
}

/// Detector error of the scene: confident keypoints against the exact
/// projections of the ground truth. Zero when nothing is confident.
pub fn scene_epe(scene: &Scene) -> Result<f64> {
    let gt = scene.gt.as_ref().ok_or(Error::MissingGroundTruth)?;
    let model = &scene.model;
    let mut det = Vec::new();
    let mut proj = Vec::new();
    for (view, (cam, d)) in scene.cameras.iter().zip(&scene.detections).enumerate() {
        let mut pose = gt.pose.clone();
        pose.root = gt.view_roots[view];
        let kps = model.regress_keypoints(&model.forward(&pose, &gt.shape)?)?;
        for (i, k) in d.keypoints.iter().enumerate() {
            if k[2] > CONFIDENCE_THRESHOLD {
                det.push(Vector2::new(k[0], k[1]));
                proj.push(cam.project_point(i, &(kps[i] + cam.body_offset))?.0);
            }
        }
    }
    if det.is_empty() {
        return Ok(0.0);
    }
    epe(&det, &proj)
}

/// Metrics of an output body against the scene ground truth. In world mode
/// the root is a world orientation; otherwise it is the first camera's.
pub fn evaluate_body(
    scene: &Scene,
    pose: &PoseParams,
    shape: &ShapeParams,
    mode: OrientMode,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let gt = scene.gt.as_ref().ok_or(Error::MissingGroundTruth)?;
    let model = &scene.model;
    let gt_mesh = match mode {
        OrientMode::World => gt.mesh(),
        OrientMode::PerViewFree => {
            let mut p = gt.pose.clone();
            p.root = gt.view_roots[0];
            model.forward(&p, &gt.shape)?
        }
    };
    let mesh = model.forward(pose, shape)?;
    let errors = aligned_errors(&mesh.joints3d, &gt_mesh.joints3d, PELVIS)?;
    Ok(MetricReport {
        mpjpe: mean(&errors),
        pa_mpjpe: pa_mpjpe(&mesh.joints3d, &gt_mesh.joints3d)?,
        mpvpe: mpvpe(&mesh.vertices, &gt_mesh.vertices, &mesh.joints3d[PELVIS], &gt_mesh.joints3d[PELVIS])?,
        pck: pck_of_errors(&errors, cfg.pck_threshold_mm),
        auc: auc_of_errors(&errors, &cfg.auc_grid())?,
        epe: scene_epe(scene)?,
    })
}
