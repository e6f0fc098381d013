//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Each criterion reports its measured values so a failure says by how much it
//! missed. Seeded sweeps fan out over threads.

mod common;

use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use common::{fd_case, fd_worst, LossKind, FD_REL_TOL};
use mvfuse::body::{BodyModel, PoseParams};
use mvfuse::fusion::{filter_joint_with, fuse_pose, init_strategy, SpreadRule};
use mvfuse::io::{decode_head, decode_model, decode_scene, encode_head, encode_model, encode_scene};
use mvfuse::losses::{loss_consistency_star, ConsistencyMode, LossContext, LossWeights};
use mvfuse::metrics::{auc_of_errors, mpjpe, pa_mpjpe, pck, pck_of_errors, MetricConfig};
use mvfuse::optimizer::{clip_gradient, optimize_smpl_direct, run_tta, Component, TtaConfig};
use mvfuse::prior::{synth_head, PriorHead};
use mvfuse::rotation::{
    aa_to_rotmat, geodesic_dist, rotmat_to_6d, rotmat_to_aa, sixd_to_rotmat, AxisAngle, Rot6D, RotMat,
};
use mvfuse::synth::{build_rig, generate_scene, Scene, SceneSpec, SweepAxis};
use mvfuse::Error;

const TREND_SEEDS: std::ops::Range<u64> = 0..10;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

fn rig() -> (BodyModel, PriorHead) {
    (build_rig(200, 0).unwrap(), synth_head(1, 128).unwrap())
}

fn default_scene(seed: u64) -> Scene {
    let (model, head) = rig();
    generate_scene(&model, &head, &SceneSpec { seed, ..SceneSpec::default() }).unwrap()
}

fn final_mpjpe(scene: &Scene, config: &TtaConfig) -> f64 {
    run_tta(scene, config).unwrap().final_metrics().unwrap().mpjpe
}

/// Runs `f` for every trend seed on its own thread, in seed order.
fn per_seed<T: Send>(f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    thread::scope(|s| {
        let handles: Vec<_> = TREND_SEEDS.map(|seed| { let f = &f; s.spawn(move || f(seed)) }).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> (AxisAngle, RotMat) {
    let axis = Vector3::<f64>::from_fn(|_, _| StandardNormal.sample(rng)).normalize();
    let angle = rng.random_range(0.0..max_angle);
    let aa = AxisAngle(axis * angle);
    let r = aa_to_rotmat(&aa).unwrap();
    (aa, r)
}

fn max_abs(m: &Matrix3<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let worst = thread::scope(|s| {
        let handles: Vec<_> = (0..20u64)
            .map(|seed| {
                s.spawn(move || {
                    let mut worst = (0.0f64, String::new());
                    for component in [Component::LearnedToken, Component::SmplParams] {
                        let case = fd_case(seed, component);
                        for kind in LossKind::ALL {
                            let e = fd_worst(&case, kind);
                            if e > worst.0 {
                                worst = (e, format!("seed {seed} {component:?} {kind:?}"));
                            }
                        }
                    }
                    worst
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .fold((0.0f64, String::new()), |a, b| if b.0 > a.0 { b } else { a })
    });
    let elapsed = start.elapsed();
    Outcome::new(
        worst.0 < FD_REL_TOL && elapsed < Duration::from_secs(60),
        format!("worst relative error {:.2e} ({}), {:.1} s", worst.0, worst.1, elapsed.as_secs_f64()),
    )
}

fn rotations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut aa_err, mut r_err, mut sixd_err, mut gs_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (aa, r) = random_rotation(&mut rng, 3.1);
        let back = rotmat_to_aa(&r).unwrap();
        aa_err = aa_err.max((back.0 - aa.0).norm());
        let again = aa_to_rotmat(&back).unwrap();
        r_err = r_err.max(max_abs(&(again.matrix() - r.matrix())));
        let d = rotmat_to_6d(&r);
        sixd_err = sixd_err.max(max_abs(&(sixd_to_rotmat(&d).unwrap().matrix() - r.matrix())));

        let raw = Rot6D::new(
            Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng)),
            Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng)),
        );
        let (sa, sb) = (rng.random_range(0.01..100.0), rng.random_range(0.01..100.0));
        let scaled = Rot6D::new(raw.a * sa, raw.b * sb);
        gs_err = gs_err.max(max_abs(&(sixd_to_rotmat(&scaled).unwrap().matrix() - sixd_to_rotmat(&raw).unwrap().matrix())));
    }
    let round = aa_err.max(r_err).max(sixd_err);
    Outcome::new(
        round < 1e-9 && gs_err < 1e-12,
        format!("aa {aa_err:.1e}, R {r_err:.1e}, 6D {sixd_err:.1e}, scale invariance {gs_err:.1e}"),
    )
}

/// Normalized 6D mean of `rs`, computed without the library's fusion code.
fn sixd_mean(rs: &[RotMat]) -> RotMat {
    let n = rs.len() as f64;
    let a: Vector3<f64> = rs.iter().map(|r| r.matrix().column(0).into_owned()).sum::<Vector3<f64>>() / n;
    let b: Vector3<f64> = rs.iter().map(|r| r.matrix().column(1).into_owned()).sum::<Vector3<f64>>() / n;
    let c0 = a.normalize();
    let c1 = (b - c0 * c0.dot(&b)).normalize();
    RotMat::new(Matrix3::from_columns(&[c0, c1, c0.cross(&c1)])).unwrap()
}

/// Four views of one joint: `clean[0..3]` plus a far outlier in slot 2.
fn one_outlier_fusion(clean: &[RotMat; 3], outlier: RotMat) -> (Vec<usize>, f64) {
    const JOINT: usize = 5;
    let slots = [clean[0], clean[1], outlier, clean[2]];
    let views: Vec<PoseParams> = slots
        .iter()
        .map(|r| {
            let mut p = PoseParams::identity(24);
            p.body[JOINT - 1] = *r;
            p
        })
        .collect();
    let (fused, _, report) = fuse_pose(&views, None, true, SpreadRule::default()).unwrap();
    (report.retained[JOINT].clone(), geodesic_dist(&fused.body[JOINT - 1], &sixd_mean(clean)))
}

fn filtering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = random_rotation(&mut rng, 1.0).1;
    // Three identical rotations and one 2.0 rad away.
    let (kept, dist) = one_outlier_fusion(&[base; 3], base.compose(&RotMat::about_axis(1, 2.0)));
    // Same with slightly different clean rotations, so the clean mean is not trivial.
    let clean = [0, 1, 2].map(|_| base.compose(&random_rotation(&mut rng, 0.05).1));
    let (kept_jittered, dist_jittered) = one_outlier_fusion(&clean, base.compose(&RotMat::about_axis(1, 2.2)));
    let excluded = kept == vec![0, 1, 3] && kept_jittered == vec![0, 1, 3];
    let dist = dist.max(dist_jittered);

    // Four rotations equidistant from their mean.
    let symmetric: Vec<Rot6D> =
        [(0, 0.3), (0, -0.3), (1, 0.3), (1, -0.3)].iter().map(|&(ax, a)| rotmat_to_6d(&RotMat::about_axis(ax, a))).collect();
    let degenerate = filter_joint_with(&symmetric, SpreadRule::DistanceStd).unwrap();
    let rms = filter_joint_with(&symmetric, SpreadRule::RmsDeviation).unwrap();
    let all = degenerate.fallback && degenerate.retained == vec![0, 1, 2, 3] && rms.retained == vec![0, 1, 2, 3];
    Outcome::new(
        excluded && dist < 1e-9 && all,
        format!("retained {kept:?} and {kept_jittered:?}, geodesic to clean mean {dist:.1e}, symmetric case keeps all: {all}"),
    )
}

fn fixed_point() -> Outcome {
    let (model, head) = rig();
    let mut worst_drift = 0.0f64;
    let mut worst_loss = 0.0f64;
    for calibrated in [true, false] {
        let scene = generate_scene(&model, &head, &SceneSpec { calibrated, ..SceneSpec::noiseless(11) }).unwrap();
        let config = TtaConfig { steps: 200, ..TtaConfig::default() };
        let initial = scene.initial_views(config.component).unwrap();
        let (poses, shapes) = scene.prior_bodies().unwrap();
        let ext = scene.extrinsics();
        let (virt0, _) = init_strategy(&poses, &shapes, config.strategy, ext.as_deref(), config.spread_rule).unwrap();
        let result = run_tta(&scene, &config).unwrap();
        worst_loss = result.trace.iter().map(|r| r.total).fold(worst_loss, f64::max);
        for (v0, v) in initial.iter().zip(&result.views) {
            for (a, b) in v0.variable().values().iter().zip(&v.values) {
                worst_drift = worst_drift.max((a - b).abs());
            }
        }
        if let (Some(a), Some(b)) = (&virt0, &result.virtual_view) {
            for (ra, rb) in std::iter::once((&a.pose.root, &b.pose.root)).chain(a.pose.body.iter().zip(&b.pose.body)) {
                worst_drift = worst_drift.max(max_abs(&(ra.matrix() - rb.matrix())));
            }
            for (x, y) in a.shape.beta.iter().zip(&b.shape.beta) {
                worst_drift = worst_drift.max((x - y).abs());
            }
        }
    }
    Outcome::new(
        worst_drift < 1e-9 && worst_loss < 1e-12,
        format!("max parameter drift {worst_drift:.1e}, max total loss {worst_loss:.1e}"),
    )
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let config = TtaConfig::default();
    let rows = per_seed(|seed| {
        let scene = default_scene(seed);
        let weighted = run_tta(&scene, &config).unwrap();
        let step0 = weighted.trace[0].metrics.unwrap().mpjpe;
        let w = weighted.final_metrics().unwrap().mpjpe;
        let a = final_mpjpe(&scene, &TtaConfig { strategy: mvfuse::fusion::InitStrategy::Averaged, ..config.clone() });
        let t = final_mpjpe(&scene, &TtaConfig { strategy: mvfuse::fusion::InitStrategy::TPose, ..config.clone() });
        (step0, w, a, t)
    });
    let elapsed = start.elapsed();
    let reduced = rows.iter().filter(|(s0, w, _, _)| *w < 0.6 * s0).count();
    let ordered = rows.iter().filter(|(_, w, a, t)| w <= a && a <= t).count();
    let table: Vec<String> = rows.iter().map(|(s0, w, a, t)| format!("{s0:.1}->{w:.1}/{a:.1}/{t:.1}")).collect();
    Outcome::new(
        reduced == rows.len() && ordered >= 8 && elapsed < Duration::from_secs(300),
        format!(
            "reduction below 0.6x on {reduced}/10, weighted<=averaged<=t-pose on {ordered}/10, {:.0} s [step0->weighted/averaged/t-pose mm: {}]",
            elapsed.as_secs_f64(),
            table.join(" ")
        ),
    )
}

fn view_count() -> Outcome {
    let config = TtaConfig::default();
    let (model, head) = rig();
    let rows = per_seed(|seed| {
        let spec = SceneSpec { seed, ..SceneSpec::default() };
        mvfuse::synth::sweep(&model, &head, &spec, &config, SweepAxis::NViews, &[2.0, 3.0, 4.0])
            .unwrap()
            .iter()
            .map(|r| r.metrics.mpjpe)
            .collect::<Vec<_>>()
    });
    let monotone = rows.iter().filter(|m| m[0] >= m[1] && m[1] >= m[2]).count();
    let table: Vec<String> = rows.iter().map(|m| format!("{:.1}/{:.1}/{:.1}", m[0], m[1], m[2])).collect();
    Outcome::new(monotone >= 8, format!("nonincreasing on {monotone}/10 [2/3/4 views mm: {}]", table.join(" ")))
}

fn star_vs_pairwise() -> Outcome {
    let config = TtaConfig::default();
    let rows = per_seed(|seed| {
        let scene = default_scene(seed);
        let pair = final_mpjpe(&scene, &TtaConfig { consistency_mode: ConsistencyMode::Pairwise, ..config.clone() });
        let star = final_mpjpe(&scene, &TtaConfig { consistency_mode: ConsistencyMode::Star, ..config.clone() });
        (star - pair).abs() / pair
    });
    let within = rows.iter().filter(|r| **r < 0.10).count();
    let worst = rows.iter().cloned().fold(0.0, f64::max);

    let (model, head) = rig();
    let ops = |n: usize| {
        let scene = generate_scene(&model, &head, &SceneSpec { seed: 1, n_views: n, ..SceneSpec::default() }).unwrap();
        let views = scene.initial_views(Component::LearnedToken).unwrap();
        let weights = LossWeights::default();
        let ctx = LossContext { model: &scene.model, head: &scene.head, weights: &weights, calibrated: true };
        loss_consistency_star(&ctx, &views).unwrap().ops
    };
    let ratio = ops(8) as f64 / ops(4) as f64;
    Outcome::new(
        within == rows.len() && (1.8..=2.2).contains(&ratio),
        format!("within 10% on {within}/10 (worst {:.1}%), op ratio N=8/N=4 {ratio:.3}", 100.0 * worst),
    )
}

fn component_ordering() -> Outcome {
    let config = TtaConfig::default();
    let rows = per_seed(|seed| {
        let scene = default_scene(seed);
        let token = final_mpjpe(&scene, &TtaConfig { component: Component::LearnedToken, ..config.clone() });
        let direct = optimize_smpl_direct(&scene, &config).unwrap().final_metrics().unwrap().mpjpe;
        (token, direct)
    });
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        0.5 * (v[4] + v[5])
    };
    let token = median(rows.iter().map(|r| r.0).collect());
    let direct = median(rows.iter().map(|r| r.1).collect());
    Outcome::new(direct >= token, format!("median final MPJPE direct {direct:.2} mm, token {token:.2} mm"))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cloud = |rng: &mut ChaCha8Rng| -> Vec<Vector3<f64>> {
        (0..24).map(|_| Vector3::from_fn(|_, _| StandardNormal.sample(rng)) * 0.3).collect()
    };
    let mut pa_similarity = 0.0f64;
    let mut violations = 0;
    for _ in 0..1000 {
        let gt = cloud(&mut rng);
        let r = random_rotation(&mut rng, 3.1).1;
        let s = rng.random_range(0.5..2.0);
        let t = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let moved: Vec<_> = gt.iter().map(|p| r.matrix() * p * s + t).collect();
        pa_similarity = pa_similarity.max(pa_mpjpe(&moved, &gt).unwrap());
        let pred = cloud(&mut rng);
        if pa_mpjpe(&pred, &gt).unwrap() > mpjpe(&pred, &gt, 0).unwrap() {
            violations += 1;
        }
    }

    // A joint exactly at the threshold counts as correct.
    let gt = vec![Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0)];
    let pred = vec![Vector3::zeros(), Vector3::new(0.625, 0.0, 0.0)];
    let inclusive = pck(&pred, &gt, 0, 125.0).unwrap() == 100.0
        && pck(&pred, &gt, 0, 124.999).unwrap() == 50.0
        && pck_of_errors(&[150.0], 150.0) == 100.0;

    // Closed form per error: the PCK step at e enters the trapezoid as half an
    // interval in the cell containing e and a full interval above it.
    let grid = MetricConfig::default().auc_grid();
    let n = grid.len();
    let mut auc_err = 0.0f64;
    for _ in 0..200 {
        let errors: Vec<f64> = (0..17).map(|_| rng.random_range(-5.0..170.0)).collect();
        let direct: f64 = errors
            .iter()
            .map(|&e| match grid.iter().position(|t| e <= *t) {
                None => 0.0,
                Some(0) => 1.0,
                Some(k) => ((n - 1 - k) as f64 + 0.5) / (n - 1) as f64,
            })
            .sum::<f64>()
            * 100.0
            / errors.len() as f64;
        auc_err = auc_err.max((auc_of_errors(&errors, &grid).unwrap() - direct).abs());
    }
    Outcome::new(
        pa_similarity < 1e-9 && violations == 0 && inclusive && auc_err < 1e-12,
        format!(
            "PA under similarity {pa_similarity:.1e} mm, pa>mpjpe on {violations}/1000, inclusive PCK {inclusive}, AUC gap {auc_err:.1e}"
        ),
    )
}

fn clipping_and_warmup() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut clip_err = 0.0f64;
    for _ in 0..1000 {
        let scale = 10f64.powf(rng.random_range(-4.0..2.0));
        let g: Vec<f64> = (0..154).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z }).collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let c = clip_gradient(&g, 0.1).unwrap();
        let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        clip_err = clip_err.max((cn - norm.min(0.1)).abs());
    }
    let config = TtaConfig { steps: 60, ..TtaConfig::default() };
    let trace = run_tta(&default_scene(0), &config).unwrap().trace;
    let w = config.warmup_steps;
    let rising = trace[1..=w].windows(2).all(|p| p[1].lr >= p[0].lr && p[1].lr_virtual >= p[0].lr_virtual);
    let flat = trace[w..].iter().all(|r| r.lr == config.eta && r.lr_virtual == config.eta_virtual);
    Outcome::new(
        clip_err < 1e-12 && rising && flat && w == 20,
        format!("clip norm error {clip_err:.1e}, warm-up {w} steps nondecreasing {rising}, constant after {flat}"),
    )
}

fn io_round_trip() -> Outcome {
    let scene = default_scene(4);
    let model_bytes = encode_model(&scene.model);
    let head_bytes = encode_head(&scene.head);
    let scene_bytes = encode_scene(&scene);
    let model = decode_model(&model_bytes).unwrap();
    let head = decode_head(&head_bytes).unwrap();
    let back = decode_scene(&scene_bytes).unwrap();
    let exact = model == scene.model
        && head == scene.head
        && back == scene
        && encode_model(&model) == model_bytes
        && encode_head(&head) == head_bytes
        && encode_scene(&back) == scene_bytes;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut rejected, mut checksum) = (0, 0);
    for _ in 0..100 {
        let mut bytes = scene_bytes.clone();
        let bit = rng.random_range(0..bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        match decode_scene(&bytes) {
            Ok(_) => {}
            Err(e) => {
                rejected += 1;
                checksum += matches!(e, Error::ChecksumMismatch { .. }) as usize;
            }
        }
    }
    Outcome::new(
        exact && rejected == 100,
        format!("bit-exact round trip {exact}, {rejected}/100 flips rejected ({checksum} by checksum)"),
    )
}

fn determinism() -> Outcome {
    let scene = default_scene(5);
    let config = TtaConfig { steps: 100, ..TtaConfig::default() };
    let a = run_tta(&scene, &config).unwrap();
    let b = run_tta(&scene, &config).unwrap();
    let again = default_scene(5);
    let bits = |r: &mvfuse::optimizer::TtaResult| -> Vec<u64> {
        r.trace.iter().flat_map(|s| {
            let m = s.metrics.unwrap();
            [s.total, m.mpjpe, m.pa_mpjpe, m.mpvpe, m.pck, m.auc, m.epe].map(f64::to_bits)
        }).collect()
    };
    let identical = bits(&a) == bits(&b) && a.trace == b.trace && again == scene;
    Outcome::new(identical, format!("two runs bitwise identical over {} records: {identical}", a.trace.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient correctness", gradients),
        ("rotation suite", rotations),
        ("reliability filtering", filtering),
        ("noiseless fixed point", fixed_point),
        ("convergence trend", convergence),
        ("view-count monotonicity", view_count),
        ("star vs pairwise", star_vs_pairwise),
        ("component ordering", component_ordering),
        ("metrics oracle", metrics_oracle),
        ("clipping and warm-up", clipping_and_warmup),
        ("file round trip", io_round_trip),
        ("determinism", determinism),
    ];
    // One criterion at a time so the timed ones are not slowed by the others.
    let outcomes: Vec<Outcome> = criteria
        .iter()
        .map(|(_, f)| std::panic::catch_unwind(f).unwrap_or_else(|_| Outcome::new(false, "panicked".into())))
        .collect();
    let mut failed = 0;
    for (i, ((name, _), o)) in criteria.iter().zip(&outcomes).enumerate() {
        println!("{} criterion {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        failed += !o.pass as usize;
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
