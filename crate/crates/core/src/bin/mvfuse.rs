use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use mvfuse::config::RunConfig;
use mvfuse::fusion::{init_strategy, InitStrategy, OrientMode, SpreadRule};
use mvfuse::io::{export_result, load_body, load_scene, save_body, save_scene, BodyRecord, ExportFormat};
use mvfuse::losses::{ConsistencyMode, LossTerms};
use mvfuse::metrics::{evaluate_body, MetricReport};
use mvfuse::optimizer::{run_tta, Component, OptimizerKind, TtaConfig, VirtualComponents};
use mvfuse::prior::synth_head;
use mvfuse::rotation::{geodesic_dist, RotMat};
use mvfuse::synth::{build_rig, generate_scene, sweep, sweep_scene, OutlierSpec, Scene, SceneSpec, SweepAxis, JOINT_NAMES};
use mvfuse::Error;

#[derive(Parser)]
#[command(name = "mvfuse", version, about = "Multi-view body fusion with test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene file.
    Synth {
        #[command(flatten)]
        spec: SpecFlags,
        /// Store the scene without extrinsics.
        #[arg(long)]
        uncalibrated: bool,
        /// Destination scene file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the virtual view of a scene and summarize it.
    Init {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "weighted", value_parser = parse_kebab::<InitStrategy>)]
        strategy: InitStrategy,
        #[arg(long, value_parser = parse_kebab::<SpreadRule>)]
        spread_rule: Option<SpreadRule>,
        /// Ignore the scene's extrinsics.
        #[arg(long)]
        uncalibrated: bool,
        /// Save the virtual view as a body file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run test-time adaptation on a scene.
    Optimize {
        /// Scene file (overrides the config's `scene`).
        #[arg(long)]
        scene: Option<PathBuf>,
        #[command(flatten)]
        tta: TtaFlags,
        /// Directory for records.jsonl, summary.json and body.json.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Sweep one configuration axis and tabulate final metrics.
    Ablate {
        /// Scene file; without it the scene is generated from the synth flags.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[command(flatten)]
        spec: SpecFlags,
        #[command(flatten)]
        tta: TtaFlags,
        /// views, steps, lr, noise, strategy, component, consistency, terms or virtual-components.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; `+` joins the parts of a set-valued value.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Also write the rows as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a body file against a scene's ground truth.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        body: PathBuf,
    },
}

#[derive(Args, Clone)]
struct SpecFlags {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    views: usize,
    #[arg(long, default_value_t = 200)]
    vertices: usize,
    #[arg(long, default_value_t = 128)]
    token_dim: usize,
    #[arg(long, default_value_t = 1)]
    head_seed: u64,
    #[arg(long, default_value_t = 0)]
    rig_seed: u64,
    /// Detection noise (pixels).
    #[arg(long)]
    noise_px: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Prior body-joint noise (radians per axis).
    #[arg(long)]
    pose_noise: Option<f64>,
    /// Prior global-orientation noise (radians per axis).
    #[arg(long)]
    orient_noise: Option<f64>,
    #[arg(long)]
    shape_noise: Option<f64>,
    /// VIEW:JOINT:RADIANS, joint by index or name; repeatable.
    #[arg(long, value_parser = parse_outlier)]
    outlier: Vec<OutlierSpec>,
    /// Zero every noise level not set explicitly.
    #[arg(long)]
    noiseless: bool,
}

impl SpecFlags {
    fn spec(&self, calibrated: bool) -> SceneSpec {
        let base = if self.noiseless {
            SceneSpec::noiseless(self.seed)
        } else {
            SceneSpec { seed: self.seed, ..SceneSpec::default() }
        };
        SceneSpec {
            n_views: self.views,
            detection_noise_px: self.noise_px.unwrap_or(base.detection_noise_px),
            detection_dropout: self.dropout.unwrap_or(base.detection_dropout),
            prior_pose_noise_rad: self.pose_noise.unwrap_or(base.prior_pose_noise_rad),
            prior_orient_noise_rad: self.orient_noise.unwrap_or(base.prior_orient_noise_rad),
            prior_shape_noise: self.shape_noise.unwrap_or(base.prior_shape_noise),
            outliers: self.outlier.clone(),
            calibrated,
            ..base
        }
    }

    fn generate(&self, calibrated: bool) -> mvfuse::Result<Scene> {
        let model = build_rig(self.vertices, self.rig_seed)?;
        let head = synth_head(self.head_seed, self.token_dim)?;
        generate_scene(&model, &head, &self.spec(calibrated))
    }
}

/// Overrides applied on top of the config file.
#[derive(Args, Clone)]
struct TtaFlags {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    eta_virtual: Option<f64>,
    #[arg(long, value_parser = parse_kebab::<InitStrategy>)]
    strategy: Option<InitStrategy>,
    #[arg(long, value_parser = parse_kebab::<ConsistencyMode>)]
    consistency: Option<ConsistencyMode>,
    #[arg(long, value_parser = parse_kebab::<Component>)]
    component: Option<Component>,
    /// Subset of pose, orientation, shape joined by `+`.
    #[arg(long, value_parser = parse_virtual_components)]
    virtual_components: Option<VirtualComponents>,
    #[arg(long, value_parser = parse_kebab::<OptimizerKind>)]
    optimizer: Option<OptimizerKind>,
    #[arg(long, value_parser = parse_kebab::<OptimizerKind>)]
    optimizer_virtual: Option<OptimizerKind>,
    #[arg(long, value_parser = parse_kebab::<SpreadRule>)]
    spread_rule: Option<SpreadRule>,
    /// Ignore the scene's extrinsics.
    #[arg(long)]
    uncalibrated: bool,
}

impl TtaFlags {
    /// Defaults, then the config file, then these flags.
    fn resolve(&self) -> mvfuse::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.tta;
        if let Some(s) = self.steps {
            t.steps = s;
            if self.warmup_steps.is_none() {
                t.warmup_steps = t.warmup_steps.min(s);
            }
        }
        if let Some(w) = self.warmup_steps {
            t.warmup_steps = w;
        }
        if let Some(c) = self.clip_norm {
            t.clip_norm = c;
        }
        if let Some(e) = self.eta {
            t.eta = e;
        }
        if let Some(e) = self.eta_virtual {
            t.eta_virtual = e;
        }
        if let Some(s) = self.strategy {
            t.strategy = s;
        }
        if let Some(c) = self.consistency {
            t.consistency_mode = c;
        }
        if let Some(c) = self.component {
            t.component = c;
        }
        if let Some(v) = self.virtual_components {
            t.virtual_components = v;
        }
        if let Some(o) = self.optimizer {
            t.optimizer = o;
        }
        if let Some(o) = self.optimizer_virtual {
            t.optimizer_virtual = o;
        }
        if let Some(r) = self.spread_rule {
            t.spread_rule = r;
        }
        if self.uncalibrated {
            t.calibrated = false;
        }
        t.validate()?;
        Ok(cfg)
    }
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_outlier(s: &str) -> Result<OutlierSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [view, joint, rad] = parts[..] else {
        return Err(format!("expected VIEW:JOINT:RADIANS, got '{s}'"));
    };
    let view = view.parse().map_err(|_| format!("bad view '{view}'"))?;
    let joint = match joint.parse::<usize>() {
        Ok(j) => j,
        Err(_) => JOINT_NAMES.iter().position(|n| *n == joint).ok_or(format!("unknown joint '{joint}'"))?,
    };
    let offset_rad = rad.parse().map_err(|_| format!("bad angle '{rad}'"))?;
    Ok(OutlierSpec { view, joint, offset_rad })
}

fn parse_virtual_components(s: &str) -> Result<VirtualComponents, String> {
    let mut c = VirtualComponents { pose: false, orientation: false, shape: false };
    for part in s.split('+').filter(|p| !p.is_empty() && *p != "none") {
        match part {
            "pose" => c.pose = true,
            "orientation" | "orient" => c.orientation = true,
            "shape" => c.shape = true,
            other => return Err(format!("unknown virtual component '{other}'")),
        }
    }
    Ok(c)
}

fn parse_terms(s: &str) -> Result<LossTerms, String> {
    let mut t = LossTerms { reprojection: false, consistency: false, regularization: false, virtual_reprojection: false };
    for part in s.split('+') {
        match part {
            "2d" => {
                t.reprojection = true;
                t.virtual_reprojection = true;
            }
            "con" => t.consistency = true,
            "reg" => t.regularization = true,
            other => return Err(format!("unknown loss term '{other}' (2d, con, reg)")),
        }
    }
    Ok(t)
}

/// Failure classes and their exit codes.
enum Failure {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NumericAbort { .. } | Error::NonFinite(_) => Failure::Numeric(msg),
            Error::MissingFile(_)
            | Error::Io(_)
            | Error::MalformedHeader(_)
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::ChecksumMismatch { .. }
            | Error::Json(_) => Failure::Io(msg),
            _ => Failure::Usage(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn print_line(v: serde_json::Value) {
    println!("{v}");
}

fn metrics_json(m: Option<MetricReport>) -> serde_json::Value {
    m.map(|m| serde_json::to_value(m).expect("plain struct")).unwrap_or(serde_json::Value::Null)
}

fn cmd_synth(spec: &SpecFlags, uncalibrated: bool, out: &Path) -> CmdResult {
    let scene = spec.generate(!uncalibrated)?;
    save_scene(&scene, out)?;
    let s = spec.spec(!uncalibrated);
    print_line(json!({
        "command": "synth",
        "path": out,
        "views": scene.n_views(),
        "vertices": scene.model.n_vertices(),
        "token_dim": scene.head.token_dim(),
        "calibrated": scene.calibrated,
        "seed": s.seed,
        "detection_noise_px": s.detection_noise_px,
        "detection_dropout": s.detection_dropout,
        "prior_pose_noise_rad": s.prior_pose_noise_rad,
        "prior_orient_noise_rad": s.prior_orient_noise_rad,
        "prior_shape_noise": s.prior_shape_noise,
        "outliers": s.outliers.len(),
    }));
    Ok(())
}

fn cmd_init(
    scene: &Path,
    strategy: InitStrategy,
    rule: Option<SpreadRule>,
    uncalibrated: bool,
    out: Option<&Path>,
) -> CmdResult {
    let scene = load_scene(scene)?;
    let (poses, shapes) = scene.prior_bodies()?;
    let ext = if uncalibrated { None } else { scene.extrinsics() };
    let (vv, report) = init_strategy(&poses, &shapes, strategy, ext.as_deref(), rule.unwrap_or_default())?;
    let Some(vv) = vv else {
        print_line(json!({ "command": "init", "strategy": strategy, "virtual_view": false }));
        return Ok(());
    };
    let max_angle = std::iter::once(&vv.pose.root)
        .chain(&vv.pose.body)
        .map(|r| geodesic_dist(r, &RotMat::IDENTITY))
        .fold(0.0, f64::max);
    let metrics = match &scene.gt {
        Some(_) => Some(evaluate_body(&scene, &vv.pose, &vv.shape, vv.orient_mode, &Default::default())?),
        None => None,
    };
    print_line(json!({
        "command": "init",
        "strategy": strategy,
        "virtual_view": true,
        "orient_mode": vv.orient_mode,
        "identity_pose": max_angle == 0.0,
        "max_joint_angle_rad": max_angle,
        "retained_counts": report.retained.iter().map(Vec::len).collect::<Vec<_>>(),
        "metrics": metrics_json(metrics),
    }));
    if let Some(p) = out {
        save_body(&BodyRecord::of_virtual(&vv), p)?;
    }
    Ok(())
}

fn cmd_optimize(scene: Option<&Path>, tta: &TtaFlags, out_dir: Option<&Path>) -> CmdResult {
    let run = tta.resolve()?;
    let scene_path = scene
        .map(Path::to_path_buf)
        .or(run.scene.clone())
        .ok_or_else(|| Failure::Usage("no scene given (--scene or `scene` in the config)".into()))?;
    let scene = load_scene(&scene_path)?;
    let result = run_tta(&scene, &run.tta)?;
    let first = &result.trace[0];
    let last = result.trace.last().expect("trace has the initial record");
    if let Some(dir) = out_dir.map(Path::to_path_buf).or(run.output.clone()) {
        fs::create_dir_all(&dir)?;
        export_result(&result, &dir.join("records.jsonl"), ExportFormat::Records)?;
        if scene.gt.is_some() {
            export_result(&result, &dir.join("summary.json"), ExportFormat::Summary)?;
        }
        let o = &result.output;
        save_body(&BodyRecord::new(&o.pose, &o.shape, o.orient_mode), &dir.join("body.json"))?;
    }
    print_line(json!({
        "command": "optimize",
        "steps": run.tta.steps,
        "loss_initial": first.total,
        "loss_final": last.total,
        "initial": metrics_json(first.metrics),
        "final": metrics_json(last.metrics),
        "clip_events": result.diagnostics.clip_events,
        "no_detections": result.diagnostics.no_detections,
    }));
    Ok(())
}

/// One ablation cell: a label and the config it runs.
fn categorical_cells(axis: &str, values: &[String], base: &TtaConfig) -> Result<Vec<(String, TtaConfig)>, Failure> {
    values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            match axis {
                "strategy" => cfg.strategy = parse_kebab(v).map_err(Failure::Usage)?,
                "component" => cfg.component = parse_kebab(v).map_err(Failure::Usage)?,
                "consistency" => cfg.consistency_mode = parse_kebab(v).map_err(Failure::Usage)?,
                "terms" => cfg.terms = parse_terms(v).map_err(Failure::Usage)?,
                "virtual-components" => cfg.virtual_components = parse_virtual_components(v).map_err(Failure::Usage)?,
                other => return Err(Failure::Usage(format!("unknown axis '{other}'"))),
            }
            Ok((v.clone(), cfg))
        })
        .collect()
}

fn cmd_ablate(
    scene: Option<&Path>,
    spec: &SpecFlags,
    tta: &TtaFlags,
    axis: &str,
    values: &[String],
    out: Option<&Path>,
) -> CmdResult {
    let run = tta.resolve()?;
    let scene_path = scene.map(Path::to_path_buf).or(run.scene.clone());
    let rows: Vec<(String, MetricReport)> = match axis.parse::<SweepAxis>() {
        Ok(numeric) => {
            let nums = values
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| Failure::Usage(format!("'{v}' is not a number"))))
                .collect::<Result<Vec<_>, _>>()?;
            let table = match &scene_path {
                Some(p) => sweep_scene(&load_scene(p)?, &run.tta, numeric, &nums)?,
                None => {
                    let model = build_rig(spec.vertices, spec.rig_seed)?;
                    let head = synth_head(spec.head_seed, spec.token_dim)?;
                    sweep(&model, &head, &spec.spec(run.tta.calibrated), &run.tta, numeric, &nums)?
                }
            };
            values.iter().cloned().zip(table.into_iter().map(|r| r.metrics)).collect()
        }
        Err(_) => {
            let cells = categorical_cells(axis, values, &run.tta)?;
            let scene = match &scene_path {
                Some(p) => load_scene(p)?,
                None => spec.generate(run.tta.calibrated)?,
            };
            let mut rows = Vec::new();
            for (label, cfg) in cells {
                let r = run_tta(&scene, &cfg)?;
                rows.push((label, r.final_metrics().ok_or(Error::MissingGroundTruth)?));
            }
            rows
        }
    };
    let width = rows.iter().map(|(l, _)| l.len()).chain([axis.len()]).max().unwrap_or(0);
    println!(
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}  {:>7}  {:>7}",
        axis, "mpjpe", "pa_mpjpe", "mpvpe", "pck", "auc", "epe"
    );
    for (label, m) in &rows {
        println!(
            "{:<width$}  {:>9.3}  {:>9.3}  {:>9.3}  {:>7.2}  {:>7.2}  {:>7.3}",
            label, m.mpjpe, m.pa_mpjpe, m.mpvpe, m.pck, m.auc, m.epe
        );
    }
    if let Some(p) = out {
        let mut text = String::new();
        for (label, m) in &rows {
            text.push_str(&json!({ "axis": axis, "value": label, "metrics": m }).to_string());
            text.push('\n');
        }
        fs::write(p, text)?;
    }
    Ok(())
}

fn cmd_eval(scene: &Path, body: &Path) -> CmdResult {
    let scene = load_scene(scene)?;
    let record = load_body(body)?;
    let (pose, shape) = record.to_params()?;
    if pose.n_joints() != scene.model.n_joints() || shape.beta.len() != scene.model.n_betas() {
        return Err(Failure::Usage("body does not match the scene's model".into()));
    }
    if record.orient_mode == OrientMode::World && !scene.calibrated {
        return Err(Failure::Usage("world-frame body on an uncalibrated scene".into()));
    }
    let m = evaluate_body(&scene, &pose, &shape, record.orient_mode, &Default::default())?;
    print_line(json!({ "command": "eval", "metrics": m }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Synth { spec, uncalibrated, out } => cmd_synth(spec, *uncalibrated, out),
        Command::Init { scene, strategy, spread_rule, uncalibrated, out } => {
            cmd_init(scene, *strategy, *spread_rule, *uncalibrated, out.as_deref())
        }
        Command::Optimize { scene, tta, out_dir } => cmd_optimize(scene.as_deref(), tta, out_dir.as_deref()),
        Command::Ablate { scene, spec, tta, axis, values, out } => {
            cmd_ablate(scene.as_deref(), spec, tta, axis, values, out.as_deref())
        }
        Command::Eval { scene, body } => cmd_eval(scene, body),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
