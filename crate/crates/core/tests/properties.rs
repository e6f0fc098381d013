mod common;

use nalgebra::Vector3;
use proptest::prelude::*;

use common::fd_case;
use mvfuse::body::{PoseParams, ShapeParams};
use mvfuse::fusion::{init_strategy, InitStrategy, SpreadRule};
use mvfuse::io::{decode_head, decode_scene, encode_head, encode_scene};
use mvfuse::losses::{
    loss_2d, loss_consistency_pairwise, loss_consistency_star, loss_regularization, loss_virtual, LossContext,
    LossWeights,
};
use mvfuse::metrics::{auc_of_errors, mpjpe, pa_mpjpe, pck_of_errors, MetricConfig};
use mvfuse::optimizer::{run_tta, Component, TtaConfig};
use mvfuse::rotation::{aa_to_rotmat, geodesic_dist, orthonormality_error, rotmat_to_aa, sixd_to_rotmat, AxisAngle, Rot6D};
use mvfuse::synth::{generate_scene, SceneSpec};

fn vec3() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-1.0f64..1.0).prop_map(Vector3::from)
}

fn cloud(n: usize) -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec(vec3(), n)
}

fn pose(j: usize) -> impl Strategy<Value = PoseParams> {
    prop::collection::vec(prop::array::uniform3(-0.6f64..0.6), j).prop_map(|aas| {
        let mut rots = aas.iter().map(|a| aa_to_rotmat(&AxisAngle::new(a[0], a[1], a[2])).unwrap());
        PoseParams { root: rots.next().unwrap(), body: rots.collect() }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn axis_angle_round_trip(axis in vec3(), angle in 1e-6f64..(std::f64::consts::PI - 1e-3)) {
        prop_assume!(axis.norm() > 1e-3);
        let r = aa_to_rotmat(&AxisAngle(axis.normalize() * angle)).unwrap();
        let back = aa_to_rotmat(&rotmat_to_aa(&r).unwrap()).unwrap();
        prop_assert!(geodesic_dist(&r, &back) < 1e-9);
    }

    #[test]
    fn decoded_6d_is_a_proper_rotation(a in vec3(), b in vec3()) {
        prop_assume!(a.norm() > 1e-3 && a.normalize().cross(&b).norm() > 1e-3);
        let r = sixd_to_rotmat(&Rot6D::new(a, b)).unwrap();
        prop_assert!(orthonormality_error(r.matrix()) < 1e-9);
        prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_views_always_fuse_like_plain_averaging(p in pose(24), q in pose(24)) {
        // With two samples both sit at the same distance from their mean, so the
        // filter keeps both and the weighted strategy reduces to averaging.
        let shapes = vec![ShapeParams::zeros(10), ShapeParams::zeros(10)];
        let views = [p, q];
        let (w, report) = init_strategy(&views, &shapes, InitStrategy::Weighted, None, SpreadRule::default()).unwrap();
        let (a, _) = init_strategy(&views, &shapes, InitStrategy::Averaged, None, SpreadRule::default()).unwrap();
        prop_assert!(report.retained.iter().skip(1).all(|r| r.len() == 2));
        prop_assert_eq!(w, a);
    }

    #[test]
    fn procrustes_never_worse_than_pelvis_alignment(pred in cloud(24), gt in cloud(24)) {
        prop_assert!(pa_mpjpe(&pred, &gt).unwrap() <= mpjpe(&pred, &gt, 0).unwrap() + 1e-9);
    }

    #[test]
    fn metrics_ignore_consistent_reordering(pred in cloud(12), gt in cloud(12), shift in 1usize..12) {
        // Rotate the order while keeping the pelvis (index 0) first.
        let reorder = |c: &[Vector3<f64>]| {
            let mut rest = c[1..].to_vec();
            let k = shift % rest.len();
            rest.rotate_left(k);
            std::iter::once(c[0]).chain(rest).collect::<Vec<_>>()
        };
        let (p2, g2) = (reorder(&pred), reorder(&gt));
        prop_assert!((mpjpe(&pred, &gt, 0).unwrap() - mpjpe(&p2, &g2, 0).unwrap()).abs() < 1e-9);
        prop_assert!((pa_mpjpe(&pred, &gt).unwrap() - pa_mpjpe(&p2, &g2).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn pck_monotone_and_auc_bounded(errors in prop::collection::vec(0.0f64..200.0, 1..40)) {
        let grid = MetricConfig::default().auc_grid();
        let curve: Vec<f64> = grid.iter().map(|t| pck_of_errors(&errors, *t)).collect();
        prop_assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        let auc = auc_of_errors(&errors, &grid).unwrap();
        prop_assert!(auc >= curve[0] - 1e-12 && auc <= curve[curve.len() - 1] + 1e-12);
    }

    #[test]
    fn head_bit_flips_are_rejected(bit in 0usize..1_000_000) {
        let bytes = encode_head(&common::rig().1);
        let mut corrupt = bytes.clone();
        let bit = bit % (bytes.len() * 8);
        corrupt[bit / 8] ^= 1 << (bit % 8);
        prop_assert!(decode_head(&corrupt).is_err());
    }

    #[test]
    fn truncated_scenes_are_rejected(cut in 0usize..1_000_000) {
        let bytes = encode_scene(&common::scene(0, true));
        let cut = cut % bytes.len();
        prop_assert!(decode_scene(&bytes[..cut]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn losses_are_nonnegative_and_permutation_invariant(seed in 0u64..1000, token in any::<bool>()) {
        let component = if token { Component::LearnedToken } else { Component::SmplParams };
        let case = fd_case(seed, component);
        let weights = LossWeights::default();
        let ctx = LossContext { model: &case.scene.model, head: &case.scene.head, weights: &weights, calibrated: case.calibrated };
        let pair = loss_consistency_pairwise(&ctx, &case.views).unwrap().value;
        let star = loss_consistency_star(&ctx, &case.views).unwrap().value;
        prop_assert!(pair > 0.0 && star > 0.0);
        prop_assert!(loss_regularization(&ctx, &case.views).unwrap().value >= 0.0);
        prop_assert!(loss_virtual(&ctx, &case.virt, &case.views, true).unwrap().value >= 0.0);
        for v in &case.views {
            prop_assert!(loss_2d(&ctx, v).unwrap().value >= 0.0);
        }
        let mut reversed = case.views.clone();
        reversed.reverse();
        let pair_r = loss_consistency_pairwise(&ctx, &reversed).unwrap().value;
        let star_r = loss_consistency_star(&ctx, &reversed).unwrap().value;
        prop_assert!((pair - pair_r).abs() <= 1e-12 * pair);
        prop_assert!((star - star_r).abs() <= 1e-12 * star);
    }
}

#[test]
fn pairwise_and_star_vanish_together() {
    let case = fd_case(3, Component::LearnedToken);
    let weights = LossWeights::default();
    let ctx = LossContext { model: &case.scene.model, head: &case.scene.head, weights: &weights, calibrated: false };
    let same = vec![case.views[0].clone(); 3];
    assert_eq!(loss_consistency_pairwise(&ctx, &same).unwrap().value, 0.0);
    assert_eq!(loss_consistency_star(&ctx, &same).unwrap().value, 0.0);
    let mixed = vec![case.views[0].clone(), case.views[0].clone(), case.views[1].clone()];
    assert!(loss_consistency_pairwise(&ctx, &mixed).unwrap().value > 0.0);
    assert!(loss_consistency_star(&ctx, &mixed).unwrap().value > 0.0);
}

#[test]
fn head_is_untouched_by_optimization() {
    let scene = common::scene(2, true);
    let before = encode_head(&scene.head);
    let config = TtaConfig { steps: 30, ..TtaConfig::default() };
    run_tta(&scene, &config).unwrap();
    assert_eq!(encode_head(&scene.head), before);
}

#[test]
fn more_detection_noise_means_larger_final_error() {
    let (model, head) = common::rig();
    let config = TtaConfig::default();
    let mut ordered = 0;
    let seeds = 0..5u64;
    for seed in seeds.clone() {
        let err: Vec<f64> = [0.0, 3.0, 8.0]
            .iter()
            .map(|&px| {
                let spec = SceneSpec { seed, detection_noise_px: px, ..SceneSpec::default() };
                let scene = generate_scene(&model, &head, &spec).unwrap();
                run_tta(&scene, &config).unwrap().final_metrics().unwrap().mpjpe
            })
            .collect();
        println!("seed {seed}: {err:?}");
        ordered += (err[0] <= err[1] && err[1] <= err[2]) as usize;
    }
    assert_eq!(ordered, seeds.count(), "noise ordering held on {ordered} seeds");
}
