//! Test-time adaptation loop: per step, a view update (reprojection,
//! consistency and regularization losses on each view's variable) followed by
//! a virtual-view update, both with warm-up and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::body::{PoseParams, ShapeParams};
use crate::error::{Error, Result};
use crate::fusion::{fuse_pose, init_strategy, init_virtual_shape, InitStrategy, OrientMode, SpreadRule, VirtualView};
use crate::losses::{
    loss_virtual, view_objective, ConsistencyMode, VirtualEval, LossContext, LossTerms, LossWeights, ViewState, VirtualState,
};
use crate::metrics::{evaluate_body, MetricConfig, MetricReport};
use crate::prior::BETA_OFFSET;
use crate::synth::Scene;

pub use crate::synth::Component;

/// Which parts of the virtual view are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VirtualComponents {
    pub pose: bool,
    pub orientation: bool,
    pub shape: bool,
}

impl Default for VirtualComponents {
    fn default() -> Self {
        VirtualComponents {
            pose: true,
            orientation: true,
            shape: true,
        }
    }
}

impl VirtualComponents {
    fn mask(&self, g: &mut [f64]) {
        if !self.orientation {
            g[..6].fill(0.0);
        }
        if !self.pose {
            g[6..BETA_OFFSET].fill(0.0);
        }
        if !self.shape {
            g[BETA_OFFSET..].fill(0.0);
        }
    }
}

/// Update rule applied to the clipped gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    #[default]
    Sgd,
    /// Heavy-ball gradient descent, velocity decay 0.9.
    Momentum,
    /// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub eta: f64,
    pub eta_virtual: f64,
    pub weights: LossWeights,
    pub consistency_mode: ConsistencyMode,
    pub component: Component,
    pub virtual_components: VirtualComponents,
    /// Use extrinsics when the scene has them.
    pub calibrated: bool,
    pub strategy: InitStrategy,
    pub spread_rule: SpreadRule,
    pub optimizer: OptimizerKind,
    /// Momentum by default: the virtual loss is a sum of unsquared norms, so plain
    /// gradient steps under clipping cannot travel far enough in the step budget and
    /// Adam's normalized steps leave a jitter proportional to the learning rate.
    pub optimizer_virtual: OptimizerKind,
    pub terms: LossTerms,
    pub metrics: MetricConfig,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            steps: 200,
            warmup_steps: 20,
            clip_norm: 0.1,
            eta: 6e-2,
            eta_virtual: 1e-2,
            weights: LossWeights::default(),
            consistency_mode: ConsistencyMode::Pairwise,
            component: Component::LearnedToken,
            virtual_components: VirtualComponents::default(),
            calibrated: true,
            strategy: InitStrategy::Weighted,
            spread_rule: SpreadRule::default(),
            optimizer: OptimizerKind::Sgd,
            optimizer_virtual: OptimizerKind::Momentum,
            terms: LossTerms::default(),
            metrics: MetricConfig::default(),
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(Error::invalid(format!(
                "warmup_steps ({}) exceeds steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite() && self.eta_virtual > 0.0 && self.eta_virtual.is_finite()) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        self.weights.validate()?;
        self.metrics.validate()
    }

    /// Warm-up factor for update `t ≥ 1`: rises linearly to 1 at `warmup_steps`.
    pub fn ramp(&self, t: usize) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            (t as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Rescales `g` to norm `max_norm` when it is longer.
pub fn clip_gradient(g: &[f64], max_norm: f64) -> Result<Vec<f64>> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid("max_norm must be positive"));
    }
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        Ok(g.iter().map(|x| x * s).collect())
    } else {
        Ok(g.to_vec())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Returns the update direction for one step.
    fn direction(&mut self, kind: OptimizerKind, g: &[f64]) -> Vec<f64> {
        match kind {
            OptimizerKind::Sgd => g.to_vec(),
            OptimizerKind::Momentum => {
                for (m, gi) in self.m.iter_mut().zip(g) {
                    *m = 0.9 * *m + gi;
                }
                self.m.clone()
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        self.m[i] = B1 * self.m[i] + (1.0 - B1) * gi;
                        self.v[i] = B2 * self.v[i] + (1.0 - B2) * gi * gi;
                        (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS)
                    })
                    .collect()
            }
        }
    }
}

/// One line of the per-step trace (step 0 is the initialization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss_2d: f64,
    pub loss_con: f64,
    pub loss_reg: f64,
    pub loss_virtual: f64,
    pub total: f64,
    /// Effective learning rates of the update that produced this state.
    pub lr: f64,
    pub lr_virtual: f64,
    pub clipped_views: usize,
    pub clipped_virtual: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Detections at or below the confidence threshold, per view.
    pub masked: Vec<usize>,
    pub clip_events: usize,
    /// No view had a confident detection; only consistency and
    /// regularization drove the views.
    pub no_detections: bool,
    pub retained: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct FinalView {
    pub values: Vec<f64>,
    pub pose: PoseParams,
    pub shape: ShapeParams,
}

/// The body reported by a run: the virtual view, or the plain per-view mean.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputBody {
    pub pose: PoseParams,
    pub shape: ShapeParams,
    pub orient_mode: OrientMode,
}

#[derive(Debug, Clone)]
pub struct TtaResult {
    pub views: Vec<FinalView>,
    pub virtual_view: Option<VirtualView>,
    pub output: OutputBody,
    pub trace: Vec<StepRecord>,
    pub diagnostics: Diagnostics,
}

impl TtaResult {
    pub fn final_metrics(&self) -> Option<MetricReport> {
        self.trace.last().and_then(|r| r.metrics)
    }
}

fn check_finite(step: usize, term: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericAbort { step, term })
    }
}

fn check_finite_grads(step: usize, term: &'static str, grads: &[Vec<f64>]) -> Result<()> {
    if grads.iter().flatten().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericAbort { step, term })
    }
}

fn output_body(views: &[ViewState], virt: Option<&VirtualState>, calibrated: bool) -> Result<OutputBody> {
    if let Some(v) = virt {
        let vv = v.view();
        return Ok(OutputBody {
            pose: vv.pose,
            shape: vv.shape,
            orient_mode: vv.orient_mode,
        });
    }
    let poses: Vec<PoseParams> = views.iter().map(|v| v.pose().clone()).collect();
    let shapes: Vec<ShapeParams> = views.iter().map(|v| v.shape().clone()).collect();
    let ext: Option<Vec<_>> = if calibrated {
        views.iter().map(|v| v.camera.extrinsics).collect()
    } else {
        None
    };
    let (pose, orient_mode, _) = fuse_pose(&poses, ext.as_deref(), false, SpreadRule::default())?;
    Ok(OutputBody {
        pose,
        shape: init_virtual_shape(&shapes)?,
        orient_mode,
    })
}

/// Runs test-time adaptation on a scene with the configured component.
pub fn run_tta(scene: &Scene, config: &TtaConfig) -> Result<TtaResult> {
    config.validate()?;
    let mut views = scene.initial_views(config.component)?;
    let calibrated = config.calibrated && scene.calibrated;
    let ext = if calibrated { scene.extrinsics() } else { None };
    let poses: Vec<PoseParams> = views.iter().map(|v| v.pose().clone()).collect();
    let shapes: Vec<ShapeParams> = views.iter().map(|v| v.shape().clone()).collect();
    let (init, report) = init_strategy(&poses, &shapes, config.strategy, ext.as_deref(), config.spread_rule)?;
    let mut virt = init.as_ref().map(|v| VirtualState::new(&scene.model, v)).transpose()?;

    let ctx = LossContext {
        model: &scene.model,
        head: &scene.head,
        weights: &config.weights,
        calibrated,
    };
    let mut diagnostics = Diagnostics {
        masked: Vec::new(),
        clip_events: 0,
        no_detections: views.iter().all(|v| v.detection.active_count() == 0),
        retained: report.retained,
    };
    let evaluate = |views: &[ViewState], virt: Option<&VirtualState>| -> Result<Option<MetricReport>> {
        if scene.gt.is_none() {
            return Ok(None);
        }
        let out = output_body(views, virt, calibrated)?;
        evaluate_body(scene, &out.pose, &out.shape, out.orient_mode, &config.metrics).map(Some)
    };

    let mut view_moments: Vec<Moments> = views.iter().map(|v| Moments::new(v.variable().values().len())).collect();
    let mut virt_moments = virt.as_ref().map(|v| Moments::new(v.raw().len()));
    let mut trace = Vec::with_capacity(config.steps + 1);
    let mut pending = (0.0, 0.0, 0usize, false);

    for t in 0..=config.steps {
        let obj = view_objective(&ctx, &views, config.consistency_mode, config.terms)?;
        check_finite(t, "view loss", obj.total())?;
        check_finite_grads(t, "view gradient", &obj.grads)?;
        if t == 0 {
            diagnostics.masked = obj.masked.clone();
        }
        let loss_v = match &virt {
            Some(v) => {
                let value = loss_virtual(&ctx, v, &views, config.terms.virtual_reprojection)?.value;
                check_finite(t, "virtual loss", value)?;
                value
            }
            None => 0.0,
        };
        trace.push(StepRecord {
            step: t,
            loss_2d: obj.loss_2d,
            loss_con: obj.loss_con,
            loss_reg: obj.loss_reg,
            loss_virtual: loss_v,
            total: obj.total() + loss_v,
            lr: pending.0,
            lr_virtual: pending.1,
            clipped_views: pending.2,
            clipped_virtual: pending.3,
            metrics: evaluate(&views, virt.as_ref())?,
        });
        if t == config.steps {
            break;
        }

        // Update t + 1, view phase.
        let ramp = config.ramp(t + 1);
        let lr = config.eta * ramp;
        let mut clipped_views = 0;
        for ((view, g), moments) in views.iter_mut().zip(&obj.grads).zip(&mut view_moments) {
            let gc = clip_gradient(g, config.clip_norm)?;
            if gc != *g {
                clipped_views += 1;
            }
            let dir = moments.direction(config.optimizer, &gc);
            let values: Vec<f64> = view.variable().values().iter().zip(&dir).map(|(x, d)| x - lr * d).collect();
            view.set_values(&scene.model, &scene.head, &values)?;
        }

        // Virtual phase, against the updated views.
        let lr_virtual = config.eta_virtual * ramp;
        let mut clipped_virtual = false;
        if let (Some(v), Some(moments)) = (virt.as_mut(), virt_moments.as_mut()) {
            let VirtualEval { value, grad: mut g, .. } = loss_virtual(&ctx, v, &views, config.terms.virtual_reprojection)?;
            check_finite(t + 1, "virtual loss", value)?;
            check_finite_grads(t + 1, "virtual gradient", std::slice::from_ref(&g))?;
            config.virtual_components.mask(&mut g);
            let gc = clip_gradient(&g, config.clip_norm)?;
            clipped_virtual = gc != g;
            let mut dir = moments.direction(config.optimizer_virtual, &gc);
            config.virtual_components.mask(&mut dir);
            let raw: Vec<f64> = v.raw().iter().zip(&dir).map(|(x, d)| x - lr_virtual * d).collect();
            v.set_raw(&scene.model, raw)?;
        }
        diagnostics.clip_events += clipped_views + clipped_virtual as usize;
        pending = (lr, lr_virtual, clipped_views, clipped_virtual);
    }

    let output = output_body(&views, virt.as_ref(), calibrated)?;
    Ok(TtaResult {
        views: views
            .iter()
            .map(|v| FinalView {
                values: v.variable().values().to_vec(),
                pose: v.pose().clone(),
                shape: v.shape().clone(),
            })
            .collect(),
        virtual_view: virt.map(|v| v.view()),
        output,
        trace,
        diagnostics,
    })
}

/// The same loop with the raw SMPL parameters of each view as the variable.
pub fn optimize_smpl_direct(scene: &Scene, config: &TtaConfig) -> Result<TtaResult> {
    let cfg = TtaConfig {
        component: Component::SmplParams,
        ..config.clone()
    };
    run_tta(scene, &cfg)
}
