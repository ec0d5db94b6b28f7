use proptest::prelude::*;

use ooal_core::analysis::{pca_project, similarity_map};
use ooal_core::data::{densify, AffordanceTarget, KeypointAnnotation, TargetKind};
use ooal_core::decoder::{decode, DecoderParams, MaskMode, Prediction};
use ooal_core::features::{synth_text_tokens, FeatureStack, UMD_AFFORDANCES};
use ooal_core::metrics::{hiou, iou_per_class, kld, miou, nss, sim};
use ooal_core::model::{Ablation, Model, ModelDims};
use ooal_core::training::sgd_step;
use ooal_core::rng;

fn positive_map(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..10.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_container_round_trips(
        n_layers in 1usize..4, h in 1usize..4, w in 1usize..4, c in 1usize..5, seed in any::<u64>(),
    ) {
        let mut r = rng::stream(seed, "prop/stack");
        let layers = (0..n_layers).map(|_| rng::gaussian_mat(&mut r, h * w, c, 3.0)).collect();
        let s = FeatureStack::new(layers, rng::gaussian_vec(&mut r, c, 1.0), (h, w), (h + 2, w + 5)).unwrap();
        let bytes = s.to_bytes().unwrap();
        let back = FeatureStack::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn densify_ignores_keypoint_order(
        pts in prop::collection::vec((0.0f64..15.0, 0.0f64..11.0), 1..6), sigma in 0.5f64..4.0,
    ) {
        let mut rev = pts.clone();
        rev.reverse();
        let a = densify(&KeypointAnnotation { points: vec![pts] }, sigma, 12, 16).unwrap();
        let b = densify(&KeypointAnnotation { points: vec![rev] }, sigma, 12, 16).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sim_and_kld_absorb_scale(p in positive_map(9), g in positive_map(9), a in 0.1f64..50.0, b in 0.1f64..50.0) {
        let ps: Vec<f64> = p.iter().map(|v| v * a).collect();
        let gs: Vec<f64> = g.iter().map(|v| v * b).collect();
        prop_assert!((sim(&p, &g).unwrap() - sim(&g, &p).unwrap()).abs() <= 1e-12);
        prop_assert!((sim(&p, &g).unwrap() - sim(&ps, &gs).unwrap()).abs() <= 1e-12);
        prop_assert!((kld(&p, &g).unwrap() - kld(&ps, &gs).unwrap()).abs() <= 1e-9);
        prop_assert!(kld(&p, &p).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn nss_affine_invariant(p in positive_map(8), a in 0.1f64..20.0, b in -5.0f64..5.0) {
        let fix: Vec<bool> = (0..8).map(|i| i % 3 == 0).collect();
        let q: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        prop_assert!((nss(&p, &fix).unwrap() - nss(&q, &fix).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn hiou_bounds(s in 0.0f64..1.0, u in 0.0f64..1.0) {
        let h = hiou(s, u).unwrap();
        prop_assert!(h >= s.min(u) - 1e-15);
        prop_assert!(h <= (s + u) / 2.0 + 1e-15);
        prop_assert!((hiou(s, s).unwrap() - s).abs() <= 1e-15);
    }

    #[test]
    fn miou_ignores_class_order(scores in prop::collection::vec(0.0f64..1.0, 36), labels in prop::collection::vec(any::<bool>(), 36)) {
        // 3×4 image, 3 classes; reverse the class order of both sides.
        let y: Vec<f64> = labels.iter().map(|&b| f64::from(u8::from(b))).collect();
        let swap = |v: &[f64]| -> Vec<f64> { v.chunks(3).flat_map(|c| [c[2], c[1], c[0]]).collect() };
        let t = AffordanceTarget::new(3, 4, 3, y.clone(), TargetKind::DenseBinary).unwrap();
        let ts = AffordanceTarget::new(3, 4, 3, swap(&y), TargetKind::DenseBinary).unwrap();
        let p = Prediction::from_scores(scores.clone(), (3, 4), 3).unwrap();
        let ps = Prediction::from_scores(swap(&scores), (3, 4), 3).unwrap();
        let a = miou(&iou_per_class(&p, &t, 0.5).unwrap());
        let b = miou(&iou_per_class(&ps, &ts, 0.5).unwrap());
        prop_assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn iou_stable_inside_threshold_margin(scores in prop::collection::vec(prop_oneof![0.0f64..0.4, 0.6f64..1.0], 12), labels in prop::collection::vec(any::<bool>(), 12)) {
        let y: Vec<f64> = labels.iter().map(|&b| f64::from(u8::from(b))).collect();
        let t = AffordanceTarget::new(3, 4, 1, y, TargetKind::DenseBinary).unwrap();
        let p = Prediction::from_scores(scores, (3, 4), 1).unwrap();
        prop_assert_eq!(iou_per_class(&p, &t, 0.45).unwrap(), iou_per_class(&p, &t, 0.55).unwrap());
    }

    #[test]
    fn decoder_ignores_patch_order(seed in any::<u64>(), shift in 1usize..5) {
        let mut r = rng::stream(seed, "prop/decoder");
        let ft = rng::gaussian_mat(&mut r, 3, 6, 1.0);
        let fv = rng::gaussian_mat(&mut r, 5, 6, 1.0);
        let cls = rng::gaussian_vec(&mut r, 4, 1.0);
        let dp = DecoderParams::init(2, 6, 4, seed);
        let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
        let a = decode(&ft, &fv, &cls, &dp, MaskMode::ClsGuided).unwrap();
        let b = decode(&ft, &fv.permute_rows(&perm), &cls, &dp, MaskMode::ClsGuided).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn similarity_ignores_query_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut r = rng::stream(seed, "prop/sim");
        let layer = rng::gaussian_mat(&mut r, 6, 5, 1.0);
        let stack = FeatureStack::new(vec![layer], vec![0.0; 5], (2, 3), (2, 3)).unwrap();
        let q = rng::gaussian_vec(&mut r, 5, 1.0);
        let qs: Vec<f64> = q.iter().map(|v| v * scale).collect();
        let a = similarity_map(&q, &stack, 0).unwrap();
        let b = similarity_map(&qs, &stack, 0).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(x));
        }
    }

    #[test]
    fn pca_scores_follow_row_permutation(seed in any::<u64>(), shift in 1usize..12) {
        let mut r = rng::stream(seed, "prop/pca");
        let x = rng::gaussian_mat(&mut r, 12, 5, 1.0);
        let perm: Vec<usize> = (0..12).map(|i| (i + shift) % 12).collect();
        let a = pca_project(&x, 3).unwrap();
        let b = pca_project(&x.permute_rows(&perm), 3).unwrap();
        for k in 0..3 {
            let sign = if a.components.get(k, 0) * b.components.get(k, 0) < 0.0 { -1.0 } else { 1.0 };
            for (i, &src) in perm.iter().enumerate() {
                prop_assert!((b.scores.get(i, k) - sign * a.scores.get(src, k)).abs() <= 1e-6);
            }
        }
        let ev = &a.explained_variance;
        prop_assert!(ev.windows(2).all(|w| w[0] >= w[1]) && ev.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn small_sgd_steps_descend() {
    let dims = ModelDims {
        p: 2,
        j: 2,
        t: 2,
        c: 8,
        c_t: 6,
        c_v: 6,
        n_classes: 2,
    };
    let names: Vec<String> = UMD_AFFORDANCES[..2].iter().map(|s| s.to_string()).collect();
    let mut descended = 0;
    for trial in 0..100u64 {
        let table = synth_text_tokens(&names, dims.c_t, trial).unwrap();
        let model = Model::new(dims, Ablation::none(), table, trial).unwrap();
        let mut r = rng::stream(trial, "prop/descent");
        let layers = (0..3).map(|_| rng::gaussian_mat(&mut r, 4, 6, 1.0)).collect();
        let stack = FeatureStack::new(layers, rng::gaussian_vec(&mut r, 6, 1.0), (2, 2), (5, 5)).unwrap();
        let y: Vec<f64> = rng::gaussian_vec(&mut r, 50, 1.0).iter().map(|v| f64::from(u8::from(*v > 0.0))).collect();
        let target = AffordanceTarget::new(5, 5, 2, y, TargetKind::DenseBinary).unwrap();
        let (before, g) = model.loss_and_grad(&stack, &target).unwrap();
        let mut p = model.params.clone();
        sgd_step(&mut p, &g, 1e-4).unwrap();
        let after = Model { params: p, ..model }.loss(&stack, &target).unwrap();
        if after <= before {
            descended += 1;
        }
    }
    assert!(descended >= 99, "{descended}/100");
}
