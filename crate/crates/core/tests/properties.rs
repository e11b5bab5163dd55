use afa_core::affinity::{
    affinity_loss_values, derive_affinity_label, propagate, transition_matrix, AffinityMatrix,
    PairLabel, TransitionMatrix,
};
use afa_core::attention::{symmetrize_combine, AttentionStack, HeadCombiner};
use afa_core::cam::{
    generate_cam, threshold_dual, top_k_pool, ActivationMap, BackgroundThresholds,
    ClassifierWeights,
};
use afa_core::eval::ConfusionMatrix;
use afa_core::losses::{classification_loss, combine, segmentation_loss_values, LossWeights};
use afa_core::par::{build_kernel, build_neighbors, refine, ParConfig};
use afa_core::{LabelImage, RgbImage, Tensor, IGNORE};
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f32> {
    (0u32..=1000).prop_map(|v| v as f32 / 1000.0)
}

fn rgb_image(h: usize, w: usize) -> impl Strategy<Value = RgbImage> {
    proptest::collection::vec([unit(), unit(), unit()], h * w)
        .prop_map(move |px| RgbImage::new(h, w, px).unwrap())
}

fn map(h: usize, w: usize, c: usize) -> impl Strategy<Value = ActivationMap> {
    proptest::collection::vec(unit(), h * w * c).prop_map(move |v| {
        ActivationMap::from_tensor(Tensor::new(vec![h, w, c], v).unwrap()).unwrap()
    })
}

fn label_map(h: usize, w: usize) -> impl Strategy<Value = LabelImage> {
    proptest::collection::vec(
        prop_oneof![Just(0u8), Just(1), Just(2), Just(IGNORE)],
        h * w,
    )
    .prop_map(move |v| LabelImage::new(h, w, v).unwrap())
}

fn affinity(n: usize) -> impl Strategy<Value = AffinityMatrix> {
    proptest::collection::vec(-8.0f32..8.0, n * n)
        .prop_map(move |v| AffinityMatrix::new(n, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_rows_are_distributions(a in (1usize..=16).prop_flat_map(affinity), alpha in 1.0f32..4.0) {
        let t = transition_matrix(&a, alpha).unwrap();
        for p in 0..t.size() {
            let row = t.row(p);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "row {} sums to {}", p, s);
        }
    }

    #[test]
    fn higher_power_concentrates_rows(a in (2usize..=12).prop_flat_map(affinity)) {
        let t1 = transition_matrix(&a, 1.0).unwrap();
        let t3 = transition_matrix(&a, 3.0).unwrap();
        for p in 0..a.size() {
            let top = |t: &TransitionMatrix| t.row(p).iter().cloned().fold(0.0f32, f32::max);
            prop_assert!(top(&t3) >= top(&t1) - 1e-6);
        }
    }

    #[test]
    fn identity_transition_is_exact(m in map(3, 4, 2)) {
        let out = propagate(&m, &TransitionMatrix::identity(12)).unwrap();
        prop_assert_eq!(out, m);
    }

    #[test]
    fn propagation_preserves_range(m in map(2, 3, 2), a in affinity(6)) {
        let t = transition_matrix(&a, 2.0).unwrap();
        let out = propagate(&m, &t).unwrap();
        for c in 0..2 {
            let col = |x: &ActivationMap| (0..6).map(|p| x.pixel(p)[c]).collect::<Vec<_>>();
            let (lo, hi) = col(&m).into_iter().fold((f32::MAX, f32::MIN), |(l, h), v| (l.min(v), h.max(v)));
            for v in col(&out) {
                prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn affinity_labels_are_symmetric_and_windowed(yp in label_map(5, 6), r in 1usize..=6) {
        let y = derive_affinity_label(&yp, r, 5, 6).unwrap();
        for p in 0..30 {
            for q in 0..30 {
                prop_assert_eq!(y.get(p, q), y.get(q, p));
                let cheb = (p / 6).abs_diff(q / 6).max((p % 6).abs_diff(q % 6));
                if cheb > r {
                    prop_assert_eq!(y.get(p, q), PairLabel::Ignored);
                }
            }
        }
    }

    #[test]
    fn affinity_gradient_signs(yp in label_map(3, 3), logits in proptest::collection::vec(-5.0f64..5.0, 81)) {
        let y = derive_affinity_label(&yp, 2, 3, 3).unwrap();
        let r = affinity_loss_values(&logits, &y).unwrap();
        prop_assert!(r.loss >= 0.0 && r.loss <= 2.0);
        for (g, l) in r.grad.iter().zip(y.labels()) {
            match l {
                PairLabel::Positive => prop_assert!(*g <= 0.0),
                PairLabel::Negative => prop_assert!(*g >= 0.0),
                PairLabel::Ignored => prop_assert_eq!(*g, 0.0),
            }
        }
    }

    #[test]
    fn combined_attention_is_symmetric(s in proptest::collection::vec(-3.0f32..3.0, 6 * 6 * 2), w in [-1.0f32..1.0, -1.0f32..1.0], b in -1.0f32..1.0) {
        let stack = AttentionStack::from_tensor(Tensor::new(vec![6, 6, 2], s).unwrap(), 2, 3).unwrap();
        let a = symmetrize_combine(&stack, &HeadCombiner { weights: w.to_vec(), bias: b }).unwrap();
        for p in 0..6 {
            for q in 0..6 {
                prop_assert_eq!(a.get(p, q).to_bits(), a.get(q, p).to_bits());
            }
        }
    }

    #[test]
    fn par_rows_sum_to_one_plus_w3(img in rgb_image(6, 5), w3 in 0.0f32..0.5) {
        let cfg = ParConfig { dilations: vec![1, 2, 4], w3, ..ParConfig::default() };
        let k = build_kernel(&img, &build_neighbors(6, 5, &cfg.dilations), &cfg).unwrap();
        for p in 0..30 {
            let (_, w) = k.row(p);
            let s: f64 = w.iter().map(|&v| f64::from(v)).sum();
            prop_assert!((s - 1.0 - f64::from(w3)).abs() < 1e-5);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn par_is_linear(img in rgb_image(4, 4), m1 in map(4, 4, 2), m2 in map(4, 4, 2), a in 0.0f32..2.0, b in 0.0f32..2.0) {
        let cfg = ParConfig { dilations: vec![1, 2], iterations: 3, ..ParConfig::default() };
        let k = build_kernel(&img, &build_neighbors(4, 4, &cfg.dilations), &cfg).unwrap();
        let mix: Vec<f32> = m1.data().iter().zip(m2.data()).map(|(x, y)| a * x + b * y).collect();
        let mix = ActivationMap::from_tensor(Tensor::new(vec![4, 4, 2], mix).unwrap()).unwrap();
        let lhs = refine(&mix, &k, 3).unwrap();
        let (r1, r2) = (refine(&m1, &k, 3).unwrap(), refine(&m2, &k, 3).unwrap());
        for i in 0..lhs.data().len() {
            let rhs = a * r1.data()[i] + b * r2.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() < 1e-4);
        }
    }

    #[test]
    fn cam_ignores_weight_scale(f in proptest::collection::vec(-1.0f32..1.0, 4 * 4 * 3), w in proptest::collection::vec(-1.0f32..1.0, 6), s in 0.1f32..10.0) {
        let features = Tensor::new(vec![4, 4, 3], f).unwrap();
        let base = ClassifierWeights::new(Tensor::new(vec![3, 2], w.clone()).unwrap()).unwrap();
        let scaled = ClassifierWeights::new(Tensor::new(vec![3, 2], w.iter().map(|v| v * s).collect()).unwrap()).unwrap();
        let m1 = generate_cam(&features, &base, &[1, 2]).unwrap();
        let m2 = generate_cam(&features, &scaled, &[1, 2]).unwrap();
        for (x, y) in m1.data().iter().zip(m2.data()) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn cam_values_lie_in_unit_interval(f in proptest::collection::vec(-1.0f32..1.0, 3 * 5 * 2), w in proptest::collection::vec(-1.0f32..1.0, 6)) {
        let features = Tensor::new(vec![3, 5, 2], f).unwrap();
        let weights = ClassifierWeights::new(Tensor::new(vec![2, 3], w).unwrap()).unwrap();
        let m = generate_cam(&features, &weights, &[1, 3]).unwrap();
        prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((0..15).all(|p| m.pixel(p)[1] == 0.0));
    }

    #[test]
    fn dual_threshold_never_labels_absent_evidence(m in map(3, 3, 2)) {
        let labels = threshold_dual(&m, BackgroundThresholds::default());
        for p in 0..9 {
            let px = m.pixel(p);
            let top = px[0].max(px[1]);
            match labels.labels()[p] {
                0 => prop_assert!(top <= 0.35),
                IGNORE => prop_assert!(top > 0.35 && top < 0.55),
                c => prop_assert!(top >= 0.55 && px[usize::from(c) - 1] == top),
            }
        }
    }

    #[test]
    fn top_k_is_monotone(values in proptest::collection::vec(-10.0f32..10.0, 1..40), k1 in 1.0f64..100.0, k2 in 1.0f64..100.0) {
        let n = values.len();
        let t = Tensor::new(vec![1, n, 1], values).unwrap();
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        let a = top_k_pool(&t, lo).unwrap().data()[0];
        let b = top_k_pool(&t, hi).unwrap().data()[0];
        prop_assert!(a >= b - 1e-5);
    }

    #[test]
    fn miou_commutes_with_label_permutation(pred in proptest::collection::vec(0u8..4, 12), truth in proptest::collection::vec(0u8..4, 12), perm in Just([0u8, 1, 2, 3]).prop_shuffle()) {
        let img = |v: &[u8]| LabelImage::new(3, 4, v.to_vec()).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&img(&pred), &img(&truth)).unwrap();
        let mapped = |v: &[u8]| v.iter().map(|&x| perm[usize::from(x)]).collect::<Vec<_>>();
        let mut cp = ConfusionMatrix::new(4);
        cp.accumulate(&img(&mapped(&pred)), &img(&mapped(&truth))).unwrap();
        let (r, rp) = (cm.miou().unwrap(), cp.miou().unwrap());
        for (iou, &to) in r.per_class.iter().zip(&perm) {
            prop_assert_eq!(*iou, rp.per_class[usize::from(to)]);
        }
        prop_assert!((r.mean - rp.mean).abs() < 1e-12);
    }

    #[test]
    fn confusion_accumulation_order_is_irrelevant(a in label_map(2, 3), b in label_map(2, 3), c in label_map(2, 3)) {
        let mut fwd = ConfusionMatrix::new(3);
        fwd.accumulate(&a, &b).unwrap();
        fwd.accumulate(&b, &c).unwrap();
        let mut rev = ConfusionMatrix::new(3);
        rev.accumulate(&b, &c).unwrap();
        let mut other = ConfusionMatrix::new(3);
        other.accumulate(&a, &b).unwrap();
        rev.merge(&other).unwrap();
        prop_assert_eq!(fwd, rev);
    }

    #[test]
    fn classification_loss_is_non_negative(p in proptest::collection::vec(0.0f64..=1.0, 1..10), seed in any::<u64>()) {
        let y: Vec<bool> = (0..p.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let r = classification_loss(&p, &y).unwrap();
        prop_assert!(r.loss >= 0.0 && r.loss.is_finite());
    }

    #[test]
    fn segmentation_loss_falls_as_true_logit_rises(z in proptest::collection::vec(-3.0f64..3.0, 3), target in 0u8..3, bump in 0.01f64..2.0) {
        let t = LabelImage::new(1, 1, vec![target]).unwrap();
        let before = segmentation_loss_values(&z, 3, &t).unwrap().loss;
        let mut raised = z.clone();
        raised[usize::from(target)] += bump;
        let after = segmentation_loss_values(&raised, 3, &t).unwrap().loss;
        prop_assert!(after < before);
    }

    #[test]
    fn combine_is_linear(x in proptest::collection::vec(0.0f64..5.0, 4), y in proptest::collection::vec(0.0f64..5.0, 4), s in 0.0f64..3.0) {
        let w = LossWeights::default();
        let f = |v: &[f64]| combine(v[0], v[1], v[2], v[3], &w).unwrap();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + s * b).collect();
        prop_assert!((f(&sum) - (f(&x) + s * f(&y))).abs() < 1e-9);
    }
}
