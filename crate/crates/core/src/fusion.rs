//! Virtual-view initialization from per-view predictions: per-joint
//! reliability filtering of 6D rotations, averaging, and shape averaging.

use serde::{Deserialize, Serialize};

use crate::body::{PoseParams, ShapeParams};
use crate::camera::{orient_to_world, Extrinsics};
use crate::error::{Error, Result};
use crate::rotation::{rotmat_to_6d, sixd_to_rotmat, RotMat, Rot6D};

/// Relative slack on the retention threshold, so that samples sitting exactly
/// on the threshold are not lost to rounding.
const THRESHOLD_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrientMode {
    /// Root orientation lives in the shared world frame.
    World,
    /// No shared frame; the root is a placeholder and carries no cross-view terms.
    PerViewFree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualView {
    pub pose: PoseParams,
    pub shape: ShapeParams,
    pub orient_mode: OrientMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    None,
    TPose,
    Averaged,
    Weighted,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InitStrategy::None),
            "t-pose" | "tpose" => Ok(InitStrategy::TPose),
            "averaged" => Ok(InitStrategy::Averaged),
            "weighted" => Ok(InitStrategy::Weighted),
            other => Err(Error::invalid(format!("unknown init strategy '{other}'"))),
        }
    }
}

/// Spread statistic compared against each sample's distance to the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpreadRule {
    /// `sqrt(mean(d²))`: the standard deviation of the 6D samples about their mean.
    #[default]
    RmsDeviation,
    /// Population standard deviation of the distances `d` themselves.
    DistanceStd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointFilter {
    pub retained: Vec<usize>,
    pub distances: Vec<f64>,
    pub threshold: f64,
    /// True when nothing passed the threshold and every index was kept.
    pub fallback: bool,
}

fn mean6(samples: &[[f64; 6]], idx: impl Iterator<Item = usize>) -> [f64; 6] {
    let mut acc = [0.0; 6];
    let mut n = 0usize;
    for i in idx {
        for c in 0..6 {
            acc[c] += samples[i][c];
        }
        n += 1;
    }
    acc.map(|v| v / n as f64)
}

/// Reliability filter for one joint over N views.
pub fn filter_joint_with(rotations: &[Rot6D], rule: SpreadRule) -> Result<JointFilter> {
    let n = rotations.len();
    if n == 0 {
        return Err(Error::invalid("filter_joint needs at least one view"));
    }
    let samples: Vec<[f64; 6]> = rotations.iter().map(|r| r.to_array()).collect();
    let mu = mean6(&samples, 0..n);
    let distances: Vec<f64> = samples
        .iter()
        .map(|s| s.iter().zip(&mu).map(|(a, m)| (a - m) * (a - m)).sum::<f64>().sqrt())
        .collect();
    let nf = n as f64;
    let threshold = match rule {
        SpreadRule::RmsDeviation => (distances.iter().map(|d| d * d).sum::<f64>() / nf).sqrt(),
        SpreadRule::DistanceStd => {
            let md = distances.iter().sum::<f64>() / nf;
            (distances.iter().map(|d| (d - md) * (d - md)).sum::<f64>() / nf).sqrt()
        }
    };
    let cut = threshold * (1.0 + THRESHOLD_SLACK);
    let retained: Vec<usize> = (0..n).filter(|&i| distances[i] <= cut).collect();
    let fallback = retained.is_empty();
    Ok(JointFilter {
        retained: if fallback { (0..n).collect() } else { retained },
        distances,
        threshold,
        fallback,
    })
}

/// Indices of the reliable views for one joint (default spread rule).
pub fn filter_joint(rotations: &[Rot6D]) -> Result<Vec<usize>> {
    Ok(filter_joint_with(rotations, SpreadRule::default())?.retained)
}

fn average_rotations(sixd: &[Rot6D], retained: &[usize]) -> Result<RotMat> {
    let samples: Vec<[f64; 6]> = sixd.iter().map(|r| r.to_array()).collect();
    let m = mean6(&samples, retained.iter().copied());
    sixd_to_rotmat(&Rot6D::from_slice(&m))
}

/// Per-joint retained view indices from the last fusion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusionReport {
    pub retained: Vec<Vec<usize>>,
}

fn check_extrinsics(n: usize, extrinsics: Option<&[Extrinsics]>) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("fusion needs at least one view"));
    }
    if let Some(e) = extrinsics {
        if e.len() != n {
            return Err(Error::invalid(format!(
                "mixed calibration: {} extrinsics for {} views",
                e.len(),
                n
            )));
        }
    }
    Ok(())
}

/// Fuses per-view poses joint by joint. `filtered == false` gives the plain 6D mean.
pub fn fuse_pose(
    views: &[PoseParams],
    extrinsics: Option<&[Extrinsics]>,
    filtered: bool,
    rule: SpreadRule,
) -> Result<(PoseParams, OrientMode, FusionReport)> {
    let n = views.len();
    check_extrinsics(n, extrinsics)?;
    let nj = views[0].n_joints();
    if views.iter().any(|v| v.n_joints() != nj) {
        return Err(Error::invalid("views disagree on joint count"));
    }
    let mut out = PoseParams::identity(nj);
    let mut report = FusionReport {
        retained: vec![Vec::new(); nj],
    };
    let all: Vec<usize> = (0..n).collect();
    let mode = if extrinsics.is_some() {
        OrientMode::World
    } else {
        OrientMode::PerViewFree
    };
    for k in 0..nj {
        let sixd: Vec<Rot6D> = if k == 0 {
            match extrinsics {
                Some(ext) => views.iter().zip(ext).map(|(v, e)| rotmat_to_6d(&orient_to_world(&v.root, e))).collect(),
                None => {
                    out.root = views[0].root;
                    report.retained[0] = vec![0];
                    continue;
                }
            }
        } else {
            views.iter().map(|v| rotmat_to_6d(v.joint(k))).collect()
        };
        let retained = if filtered {
            filter_joint_with(&sixd, rule)?.retained
        } else {
            all.clone()
        };
        *out.joint_mut(k) = average_rotations(&sixd, &retained)?;
        report.retained[k] = retained;
    }
    Ok((out, mode, report))
}

/// Reliability-filtered virtual pose.
pub fn init_virtual_pose(views: &[PoseParams], extrinsics: Option<&[Extrinsics]>) -> Result<(PoseParams, OrientMode)> {
    let (pose, mode, _) = fuse_pose(views, extrinsics, true, SpreadRule::default())?;
    Ok((pose, mode))
}

pub fn init_virtual_shape(views: &[ShapeParams]) -> Result<ShapeParams> {
    let n = views.len();
    if n == 0 {
        return Err(Error::invalid("fusion needs at least one view"));
    }
    let nb = views[0].beta.len();
    let mut beta = vec![0.0; nb];
    for v in views {
        if v.beta.len() != nb {
            return Err(Error::invalid("views disagree on shape dimension"));
        }
        for (acc, b) in beta.iter_mut().zip(&v.beta) {
            *acc += b;
        }
    }
    Ok(ShapeParams {
        beta: beta.into_iter().map(|b| b / n as f64).collect(),
    })
}

/// Builds the virtual view for one of the initialization strategies.
pub fn init_strategy(
    poses: &[PoseParams],
    shapes: &[ShapeParams],
    strategy: InitStrategy,
    extrinsics: Option<&[Extrinsics]>,
    rule: SpreadRule,
) -> Result<(Option<VirtualView>, FusionReport)> {
    check_extrinsics(poses.len(), extrinsics)?;
    if shapes.len() != poses.len() {
        return Err(Error::invalid("pose and shape view counts differ"));
    }
    let mode = if extrinsics.is_some() {
        OrientMode::World
    } else {
        OrientMode::PerViewFree
    };
    match strategy {
        InitStrategy::None => Ok((None, FusionReport::default())),
        InitStrategy::TPose => {
            let vv = VirtualView {
                pose: PoseParams::identity(poses[0].n_joints()),
                shape: ShapeParams::zeros(shapes[0].beta.len()),
                orient_mode: mode,
            };
            Ok((Some(vv), FusionReport::default()))
        }
        InitStrategy::Averaged | InitStrategy::Weighted => {
            let filtered = strategy == InitStrategy::Weighted;
            let (pose, orient_mode, report) = fuse_pose(poses, extrinsics, filtered, rule)?;
            let shape = init_virtual_shape(shapes)?;
            Ok((
                Some(VirtualView {
                    pose,
                    shape,
                    orient_mode,
                }),
                report,
            ))
        }
    }
}
