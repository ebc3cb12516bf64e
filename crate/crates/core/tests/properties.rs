use proptest::prelude::*;
use pseudoseg::appg::{filter_valid, PseudoLabelRecord};
use pseudoseg::aurcl::{
    adaptive_threshold, aurcl_loss, confidence_map, low_conf_mask, patch_features, reverse_probs, top_k_count,
    PatchFeatureSet, View,
};
use pseudoseg::backbone::{ema_update, BackboneHandle, MicroNet, SegNet};
use pseudoseg::losses::{seg_loss, total_loss, LossWeights};
use pseudoseg::metrics::{dice, iou};
use pseudoseg::synth::{generate_case, LesionShape, SynthConfig};
use pseudoseg::trainer::plan_epoch;
use pseudoseg::uewf::pixel_entropy;
use pseudoseg::{make_splits, BinaryMask, FeatureGrid, ProbMap};
use std::collections::BTreeSet;

fn prob_map() -> impl Strategy<Value = ProbMap> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.0f64..=1.0, h * w).prop_map(move |v| ProbMap::new(h, w, v).unwrap())
    })
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        (
            proptest::collection::vec(0u8..=1, h * w),
            proptest::collection::vec(0u8..=1, h * w),
        )
            .prop_map(move |(a, b)| {
                (
                    BinaryMask::new("a", h, w, a).unwrap(),
                    BinaryMask::new("b", h, w, b).unwrap(),
                )
            })
    })
}

fn handle(p: [f64; 4]) -> BackboneHandle<MicroNet> {
    BackboneHandle::new(MicroNet::new(p[0], p[1], p[2], p[3]))
}

proptest! {
    #[test]
    fn splits_partition_the_ids(n in 10usize..300, ratio in 0.001f64..=1.0, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let s = make_splits(&ids, ratio, seed).unwrap();
        let all: BTreeSet<&String> = s.labeled_ids.iter().chain(&s.unlabeled_ids).chain(&s.val_ids).chain(&s.test_ids).collect();
        prop_assert_eq!(all.len(), n);
        let n_val = (n as f64 / 10.0).round() as usize;
        prop_assert_eq!(s.val_ids.len(), n_val);
        prop_assert_eq!(s.test_ids.len(), n_val);
        let train = s.train_len();
        prop_assert_eq!(train, n - 2 * n_val);
        let want = ((ratio * train as f64).round() as usize).clamp(1, train);
        prop_assert_eq!(s.labeled_ids.len(), want);
    }

    #[test]
    fn entropy_is_bounded(p in prob_map()) {
        let e = pixel_entropy(&p, 1e-8);
        for v in &e.values {
            prop_assert!(*v >= 0.0 && *v <= std::f64::consts::LN_2 + 1e-6);
        }
    }

    #[test]
    fn double_reversal_is_the_identity(
        h in 1usize..12,
        w in 1usize..12,
        grid in proptest::collection::vec(0u32..=(1 << 24), 144),
        noise in proptest::collection::vec(0.0f64..=1.0, 144),
        bits in proptest::collection::vec(any::<bool>(), 144),
    ) {
        let m = BinaryMask::from_fn("", h, w, |r, c| bits[r * w + c]);
        // bit-exact whenever 1 - p is representable, e.g. on a dyadic grid
        let p = ProbMap::new(h, w, grid[..h * w].iter().map(|k| f64::from(*k) / f64::from(1u32 << 24)).collect()).unwrap();
        let twice = reverse_probs(&reverse_probs(&p, &m).unwrap(), &m).unwrap();
        let a: Vec<u64> = twice.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = p.values().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
        // otherwise within one rounding of 1 - p
        let p = ProbMap::new(h, w, noise[..h * w].to_vec()).unwrap();
        let twice = reverse_probs(&reverse_probs(&p, &m).unwrap(), &m).unwrap();
        for (x, y) in twice.values().iter().zip(p.values()) {
            prop_assert!((x - y).abs() <= f64::EPSILON / 2.0);
            if *y >= 0.5 {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn threshold_respects_the_floor(p in prob_map(), r in 0.01f64..0.99, tau_fix in 0.01f64..0.99) {
        let tau = adaptive_threshold(&confidence_map(&p), r, tau_fix);
        prop_assert!(tau >= tau_fix);
        prop_assert!(adaptive_threshold(&confidence_map(&p), r, 0.2) >= 0.2);
    }

    #[test]
    fn distinct_grids_select_exactly_k(h in 2usize..12, w in 2usize..12, r in 0.01f64..0.99, seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        // distinct confidences spread over (0.5, 1)
        let n = h * w;
        let mut v: Vec<f64> = (0..n).map(|i| 0.5 * (i as f64 + 1.0) / (n as f64 + 1.0)).collect();
        v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let p = ProbMap::new(h, w, v).unwrap();
        let c = confidence_map(&p);
        let tau = adaptive_threshold(&c, r, 0.2);
        prop_assert_eq!(low_conf_mask(&c, tau).count(), top_k_count(n, r));
    }

    #[test]
    fn info_nce_ignores_feature_scale(
        n in 2usize..8,
        d in 1usize..5,
        raw in proptest::collection::vec(-1.0f64..1.0, 2 * 8 * 5),
        scale_a in 0.01f64..100.0,
        scale_b in 0.01f64..100.0,
    ) {
        let make = |off: usize, s: f64, view| PatchFeatureSet {
            n,
            d,
            features: raw[off..off + n * d].iter().map(|v| (v + 1.5) * s).collect(),
            view,
        };
        let a = make(0, 1.0, View::Original);
        let b = make(40, 1.0, View::Reversed);
        let base = aurcl_loss(&a, &b, 0.1, 1e-8).unwrap();
        let scaled = aurcl_loss(&make(0, scale_a, View::Original), &make(40, scale_b, View::Reversed), 0.1, 1e-8).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9, "{} vs {}", base, scaled);
    }

    #[test]
    fn patch_count_covers_the_grid(h in 1usize..20, w in 1usize..20, ps in 1usize..8) {
        let f = FeatureGrid::new(2, h, w, vec![0.5; 2 * h * w]).unwrap();
        let s = patch_features(&f, &vec![1.0; h * w], ps, 1e-8, View::Original).unwrap();
        prop_assert_eq!(s.n, h.div_ceil(ps) * w.div_ceil(ps));
        prop_assert!(s.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dice_and_iou_agree((a, b) in mask_pair()) {
        let d = dice(&a, &b).unwrap();
        let i = iou(&a, &b).unwrap();
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
        prop_assert!(i <= d + 1e-15);
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&i));
    }

    #[test]
    fn seg_loss_is_finite_and_non_negative(p in prob_map(), bits in proptest::collection::vec(any::<bool>(), 144)) {
        let (h, w) = p.shape();
        let t = BinaryMask::from_fn("", h, w, |r, c| bits[r * w + c]).to_prob();
        let l = seg_loss(&p, &t).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn total_loss_is_the_weighted_sum(l_s in 0.0f64..10.0, l_u in 0.0f64..10.0, l_c in 0.0f64..10.0, lu in 0.0f64..2.0, lc in 0.0f64..2.0) {
        let b = total_loss(l_s, l_u, l_c, &LossWeights { lambda_u: lu, lambda_c: lc });
        prop_assert!((b.total - (l_s + lu * l_u + lc * l_c)).abs() <= 1e-9);
    }

    #[test]
    fn ema_contracts_toward_the_student(
        t in proptest::array::uniform4(-1.0f64..1.0),
        s in proptest::array::uniform4(-1.0f64..1.0),
        m in 0.0f64..=1.0,
    ) {
        let mut teacher = handle(t);
        let student = handle(s);
        ema_update(&mut teacher, &student, m).unwrap();
        for i in 0..4 {
            let after = teacher.params().data()[i];
            prop_assert!(((after - s[i]) - m * (t[i] - s[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn dyadic_ema_contraction_is_exact(
        t in proptest::array::uniform4(-1024i32..1024),
        s in proptest::array::uniform4(-1024i32..1024),
        m in prop_oneof![Just(0.0), Just(0.25), Just(0.5), Just(0.75), Just(1.0)],
    ) {
        let t = t.map(|v| f64::from(v) / 1024.0);
        let s = s.map(|v| f64::from(v) / 1024.0);
        let mut teacher = handle(t);
        ema_update(&mut teacher, &handle(s), m).unwrap();
        for i in 0..4 {
            prop_assert_eq!(teacher.params().data()[i] - s[i], m * (t[i] - s[i]));
        }
    }

    #[test]
    fn snapshots_round_trip(a in proptest::array::uniform4(-5.0f64..5.0), b in proptest::array::uniform4(-5.0f64..5.0)) {
        let mut h = handle(a);
        let snap = h.snapshot();
        h.params_mut().unwrap().load(&b).unwrap();
        prop_assert_eq!(h.params().data(), &b[..]);
        h.restore(&snap).unwrap();
        prop_assert_eq!(h.params().data(), &a[..]);
        prop_assert_eq!(h.net().params().data(), &a[..]);
    }

    #[test]
    fn filtered_records_satisfy_the_area_rule(
        areas in proptest::collection::vec((0usize..=100, any::<bool>()), 0..40),
        tau in 0.0f64..0.5,
    ) {
        let records: Vec<PseudoLabelRecord> = areas
            .iter()
            .enumerate()
            .map(|(i, (count, has_mask))| {
                let mask = has_mask.then(|| BinaryMask::from_fn("", 10, 10, |r, c| r * 10 + c < *count));
                PseudoLabelRecord {
                    image_id: format!("r{i:03}"),
                    boxes: Vec::new(),
                    area_fraction: mask.as_ref().map_or(0.0, |m| m.area_fraction()),
                    mask,
                    valid: false,
                    backend_name: "test".into(),
                    prompt_rendered: String::new(),
                    failure: None,
                }
            })
            .collect();
        let kept = filter_valid(&records, tau);
        for r in &kept {
            let m = r.mask.as_ref().unwrap();
            prop_assert!(r.valid && r.area_fraction > tau);
            prop_assert_eq!(r.area_fraction, m.count() as f64 / 100.0);
        }
        let expected = records.iter().filter(|r| r.mask.is_some() && r.area_fraction > tau).count();
        prop_assert_eq!(kept.len(), expected);
    }

    #[test]
    fn batch_halves_are_equal(nl in 1usize..20, nu in 0usize..40, half in 1usize..6, seed in any::<u64>(), epoch in 1usize..5) {
        let b = 2 * half;
        for plan in plan_epoch(nl, nu, b, None, seed, epoch) {
            prop_assert_eq!(plan.labeled.len(), half);
            prop_assert!(plan.unlabeled.is_empty() || plan.unlabeled.len() == half);
            prop_assert!(plan.labeled.iter().all(|i| *i < nl));
            prop_assert!(plan.unlabeled.iter().all(|i| *i < nu));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_cases_are_well_formed(
        seed in any::<u64>(),
        index in 0usize..1000,
        size in 32usize..72,
        shape in prop_oneof![Just(LesionShape::Oval), Just(LesionShape::Round), Just(LesionShape::Lobulated)],
    ) {
        let cfg = SynthConfig { image_size: size, lesion_shape: shape, seed, count: index + 1, ..SynthConfig::default() };
        let (img, mask) = generate_case(&cfg, index).unwrap();
        prop_assert_eq!(img.shape(), (size, size));
        prop_assert_eq!(mask.shape(), (size, size));
        prop_assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(mask.pixels().iter().all(|v| *v <= 1));
        prop_assert!(!mask.is_empty());
        prop_assert_eq!(generate_case(&cfg, index).unwrap(), (img, mask));
    }
}
