//! Finite-difference harness shared by the integration targets.
#![allow(dead_code)]

use mvfuse::fusion::{init_strategy, InitStrategy, SpreadRule};
use mvfuse::losses::{
    loss_2d, loss_consistency_pairwise, loss_consistency_star_against, loss_regularization, star_reference, loss_virtual, LossContext,
    LossWeights, ViewState, VirtualState,
};
use mvfuse::optimizer::Component;
use mvfuse::prior::{synth_head, PriorHead};
use mvfuse::synth::{build_rig, generate_scene, Scene, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn rig() -> (mvfuse::body::BodyModel, PriorHead) {
    (build_rig(200, 0).unwrap(), synth_head(1, 128).unwrap())
}

pub fn scene(seed: u64, calibrated: bool) -> Scene {
    let (model, head) = rig();
    generate_scene(&model, &head, &SceneSpec { seed, calibrated, ..SceneSpec::default() }).unwrap()
}

/// Relative error of two gradient vectors, with an absolute floor on the scale.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(FD_ABS_FLOOR)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// One seeded configuration: views moved off their snapshot and a virtual
/// view moved off its initialization, so that no norm sits at its kink.
pub struct FdCase {
    pub scene: Scene,
    pub views: Vec<ViewState>,
    pub virt: VirtualState,
    pub calibrated: bool,
}

pub fn fd_case(seed: u64, component: Component) -> FdCase {
    let calibrated = seed % 2 == 0;
    let scene = scene(seed, calibrated);
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let jitter = Normal::new(0.0, 0.02).unwrap();
    let mut views = scene.initial_views(component).unwrap();
    for v in views.iter_mut() {
        let moved: Vec<f64> = v.variable().values().iter().map(|x| x + jitter.sample(&mut rng)).collect();
        v.set_values(&scene.model, &scene.head, &moved).unwrap();
    }
    let poses: Vec<_> = views.iter().map(|v| v.pose().clone()).collect();
    let shapes: Vec<_> = views.iter().map(|v| v.shape().clone()).collect();
    let ext = if calibrated { Some(scene.extrinsics().unwrap()) } else { None };
    let (vv, _) = init_strategy(&poses, &shapes, InitStrategy::Averaged, ext.as_deref(), SpreadRule::default()).unwrap();
    let mut virt = VirtualState::new(&scene.model, &vv.unwrap()).unwrap();
    let raw: Vec<f64> = virt.raw().iter().map(|x| x + jitter.sample(&mut rng)).collect();
    virt.set_raw(&scene.model, raw).unwrap();
    FdCase { scene, views, virt, calibrated }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Reprojection,
    Pairwise,
    Star,
    Regularization,
    Virtual,
}

impl LossKind {
    pub const ALL: [LossKind; 5] =
        [LossKind::Reprojection, LossKind::Pairwise, LossKind::Star, LossKind::Regularization, LossKind::Virtual];
}

/// Worst relative gradient error of one loss over every optimizable variable
/// of the case.
pub fn fd_worst(case: &FdCase, kind: LossKind) -> f64 {
    let weights = LossWeights::default();
    let scene = &case.scene;
    let ctx = LossContext { model: &scene.model, head: &scene.head, weights: &weights, calibrated: case.calibrated };
    // The star mean is a stop-gradient constant: differentiate with it frozen.
    let frozen = star_reference(&ctx, &case.views).unwrap();
    let eval_views = |views: &[ViewState]| -> (f64, Vec<Vec<f64>>) {
        match kind {
            LossKind::Reprojection => {
                let ls: Vec<_> = views.iter().map(|v| loss_2d(&ctx, v).unwrap()).collect();
                (ls.iter().map(|l| l.value).sum(), ls.into_iter().map(|l| l.grad).collect())
            }
            LossKind::Pairwise => {
                let e = loss_consistency_pairwise(&ctx, views).unwrap();
                (e.value, e.grads)
            }
            LossKind::Star => {
                let e = loss_consistency_star_against(&ctx, views, &frozen).unwrap();
                (e.value, e.grads)
            }
            LossKind::Regularization => {
                let e = loss_regularization(&ctx, views).unwrap();
                (e.value, e.grads)
            }
            LossKind::Virtual => unreachable!(),
        }
    };
    if kind == LossKind::Virtual {
        let g = loss_virtual(&ctx, &case.virt, &case.views, true).unwrap().grad;
        let mut probe = case.virt.clone();
        let n = numeric_gradient(case.virt.raw(), |x| {
            probe.set_raw(&scene.model, x.to_vec()).unwrap();
            loss_virtual(&ctx, &probe, &case.views, true).unwrap().value
        });
        return rel_error(&g, &n);
    }
    let (_, grads) = eval_views(&case.views);
    let mut worst: f64 = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let mut probe = case.views.clone();
        let x = case.views[i].variable().values().to_vec();
        let n = numeric_gradient(&x, |x| {
            probe[i].set_values(&scene.model, &scene.head, x).unwrap();
            eval_views(&probe).0
        });
        worst = worst.max(rel_error(g, &n));
    }
    worst
}
