use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rankup::data::{augment, augment_batch, generate_synthetic, split_labeled, AugmentConfig, AugmentKind, Dataset};
use rankup::losses::{
    arc_labeled_loss, arc_pair_softmax, arc_unlabeled_fixmatch_loss, ranknet_loss, warmup_factor, ArcLossConfig,
};
use rankup::metrics::{mae, r2, srcc};
use rankup::model::{EmaState, Layout, TwoHeadModel};
use rankup::rda::{align, align_with, interpolate_labeled_distribution, SortDirection};
use rankup::{LabelScaler, SplitSpec, SyntheticTask};

fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 1..=max)
}

fn paired(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

fn sorted_multiset(v: &[f64]) -> Vec<u64> {
    let mut bits: Vec<f64> = v.to_vec();
    bits.sort_by(f64::total_cmp);
    bits.into_iter().map(f64::to_bits).collect()
}

fn dataset(n: usize) -> Dataset {
    let x = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
    Dataset::new(x, (0..n).map(|i| i as f64).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn split_partitions_ids(n in 2usize..200, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let n_labeled = ((n as f64 * frac) as usize).clamp(1, n - 1);
        let (lb, ulb) = split_labeled(&dataset(n), SplitSpec { n_labeled, seed }).unwrap();
        prop_assert_eq!(lb.len(), n_labeled);
        let mut all: Vec<usize> = lb.ids.iter().chain(ulb.ids()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn scaler_is_monotone_and_invertible(ys in prop::collection::vec(-1e3f64..1e3, 2..30), a in -2e3f64..2e3, b in -2e3f64..2e3) {
        prop_assume!(ys.iter().any(|y| *y != ys[0]));
        let s = LabelScaler::fit(&ys).unwrap();
        if a < b {
            prop_assert!(s.normalize(a) < s.normalize(b));
        }
        for y in &ys {
            let z = s.normalize(*y);
            prop_assert!((0.0..=1.0).contains(&z));
            prop_assert!((s.denormalize(z) - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn augmentation_keeps_shape_and_finiteness(x in prop::collection::vec(-1e6f64..1e6, 1..12), seed in any::<u64>()) {
        let cfg = AugmentConfig::default();
        for kind in [AugmentKind::Weak, AugmentKind::Strong] {
            let out = augment(&x, kind, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(out.len(), x.len());
            prop_assert!(out.iter().all(|v| v.is_finite()));
            let batch = Array2::from_shape_vec((1, x.len()), x.clone()).unwrap();
            let row = augment_batch(batch.view(), kind, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(row.row(0).to_vec(), out);
        }
    }

    #[test]
    fn synthetic_generation_is_bit_deterministic(n in 2usize..50, seed in any::<u64>(), noise in 0.0f64..1.0) {
        for task in [SyntheticTask::Sine, SyntheticTask::Polynomial, SyntheticTask::Friedman] {
            let a = generate_synthetic(task, n, noise, seed).unwrap();
            let b = generate_synthetic(task, n, noise, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn pair_softmax_antisymmetric(ri in -50.0f64..50.0, rj in -50.0f64..50.0) {
        let a = arc_pair_softmax(ri, rj);
        let b = arc_pair_softmax(rj, ri);
        prop_assert!((a[1] + b[1] - 1.0).abs() < 1e-12);
        prop_assert!((a[0] + a[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn losses_are_shift_invariant((s, labels) in paired(10), weak in scores(10), c in -100.0f64..100.0, tau in 0.51f64..1.0) {
        let n = s.len().min(weak.len());
        let (s, labels, weak) = (&s[..n], &labels[..n], &weak[..n]);
        let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
        let a = arc_labeled_loss(s, labels).unwrap();
        let b = arc_labeled_loss(&shift(s), labels).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-10);

        let cfg = ArcLossConfig { tau, ..ArcLossConfig::default() };
        let a = arc_unlabeled_fixmatch_loss(weak, s, &cfg).unwrap();
        let b = arc_unlabeled_fixmatch_loss(&shift(weak), &shift(s), &cfg).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-10);
        prop_assert_eq!(a.mask_rate, b.mask_rate);

        let t = |i: usize, j: usize| if labels[i] > labels[j] { 1.0 } else { 0.0 };
        prop_assert!((ranknet_loss(s, t).value - ranknet_loss(&shift(s), t).value).abs() < 1e-10);
    }

    #[test]
    fn diagonal_pairs_carry_no_gradient(r in -20.0f64..20.0, y in -5.0f64..5.0, w in -20.0f64..20.0) {
        // A batch of one has only its diagonal pair.
        let l = arc_labeled_loss(&[r], &[y]).unwrap();
        prop_assert_eq!(l.grad, vec![0.0]);
        prop_assert!(l.value > 0.0);
        let cfg = ArcLossConfig { tau: 0.51, ..ArcLossConfig::default() };
        let f = arc_unlabeled_fixmatch_loss(&[w], &[r], &cfg).unwrap();
        prop_assert_eq!(f.grad_strong, vec![0.0]);
    }

    #[test]
    fn masking_is_monotone_in_tau((weak, strong) in paired(12), t1 in 0.51f64..1.0, t2 in 0.51f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let rate = |tau: f64| {
            let cfg = ArcLossConfig { tau, ..ArcLossConfig::default() };
            arc_unlabeled_fixmatch_loss(&weak, &strong, &cfg).unwrap().mask_rate
        };
        let (a, b) = (rate(lo), rate(hi));
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        prop_assert!(b <= a);
        prop_assert_eq!(rate(1.0), 0.0);
    }

    #[test]
    fn warmup_is_nondecreasing(alpha in 1u64..10_000, i in 0u64..20_000, step in 0u64..1_000) {
        let a = warmup_factor(i, alpha).unwrap();
        let b = warmup_factor(i + step, alpha).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(a <= b);
    }

    #[test]
    fn alignment_properties(labels in prop::collection::vec(-10.0f64..10.0, 2..=16), pseudo in prop::collection::vec(-20.0f64..20.0, 1..=64)) {
        let dist = interpolate_labeled_distribution(&labels, pseudo.len()).unwrap();
        let out = align(&pseudo, &dist).unwrap();
        prop_assert_eq!(sorted_multiset(&out), sorted_multiset(dist.values()));
        let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.iter().all(|v| *v >= lo && *v <= hi));
        for i in 0..pseudo.len() {
            for j in 0..pseudo.len() {
                if pseudo[i] < pseudo[j] {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
        prop_assert_eq!(&align_with(&pseudo, &dist, SortDirection::Descending).unwrap(), &out);
        if dist.values().windows(2).all(|w| w[0] < w[1]) {
            prop_assert_eq!(align(&out, &dist).unwrap(), out);
        }
    }

    #[test]
    fn interpolation_is_sorted_and_anchored(labels in prop::collection::vec(-10.0f64..10.0, 2..=16), m in 2usize..100) {
        let d = interpolate_labeled_distribution(&labels, m).unwrap();
        prop_assert_eq!(d.len(), m);
        prop_assert!(d.values().windows(2).all(|w| w[0] <= w[1]));
        let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(d.values()[0], lo);
        prop_assert_eq!(d.values()[m - 1], hi);
    }

    #[test]
    fn srcc_invariant_under_increasing_maps((p, t) in paired(30)) {
        prop_assume!(p.len() >= 2);
        prop_assume!(p.iter().any(|x| *x != p[0]) && t.iter().any(|x| *x != t[0]));
        let base = srcc(&p, &t).unwrap();
        let warped: Vec<f64> = p.iter().map(|x| x.exp() + 3.0 * x).collect();
        prop_assert!((srcc(&warped, &t).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn mae_translation_equivariant((p, t) in paired(30), c in -100.0f64..100.0) {
        let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
        prop_assert!((mae(&shift(&p), &shift(&t)).unwrap() - mae(&p, &t).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn r2_is_one_only_for_exact_predictions((p, t) in paired(30)) {
        prop_assume!(t.len() >= 2 && t.iter().any(|x| *x != t[0]));
        prop_assert_eq!(r2(&t, &t).unwrap(), 1.0);
        if p != t {
            prop_assert!(r2(&p, &t).unwrap() < 1.0);
        }
    }

    #[test]
    fn ema_contracts_toward_fixed_params(decay in 0.0f64..0.999, k in 1u32..20, seed in 0u64..1000) {
        let layout = Layout::new(2, vec![3]).unwrap();
        let start = TwoHeadModel::init(layout.clone(), seed);
        let target = TwoHeadModel::init(layout, seed + 1);
        let mut ema = EmaState::new(decay, &start).unwrap();
        for _ in 0..k {
            ema.update(&target).unwrap();
        }
        let bound = decay.powi(k as i32);
        for ((s, p), s0) in ema.shadow.iter().zip(target.params()).zip(start.params()) {
            prop_assert!((s - p).abs() <= bound * (s0 - p).abs() + 1e-12);
        }
    }
}
