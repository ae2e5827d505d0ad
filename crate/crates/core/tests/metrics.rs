use balistd_core::imaging::{BinaryMask, ProbabilityMap};
use balistd_core::metrics::*;
use proptest::prelude::*;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(prop::bool::weighted(0.2), h * w)
        .prop_map(move |v| BinaryMask::from_fn(h, w, |r, c| v[r * w + c]))
}

#[test]
fn pd_fa_constructed_scene() {
    let mut gt = BinaryMask::empty(32, 32);
    let mut pred = BinaryMask::empty(32, 32);
    // Target A: 3×3 centred at (5,5); target B: 3×3 centred at (25,25).
    for r in 4..7 {
        for c in 4..7 {
            gt.set(r, c, true);
        }
    }
    for r in 24..27 {
        for c in 24..27 {
            gt.set(r, c, true);
        }
    }
    // Hit on A, centroid shifted by (1,1): distance √2 ≤ 2.
    for r in 5..8 {
        for c in 5..8 {
            pred.set(r, c, true);
        }
    }
    // Spurious plus-shaped 5-pixel blob far from both targets.
    for (r, c) in [(15, 4), (14, 4), (16, 4), (15, 3), (15, 5)] {
        pred.set(r, c, true);
    }
    let (pd, fa) = pd_fa(&pred, &gt, &TargetMatchConfig::default()).unwrap();
    assert_eq!(pd, 0.5);
    assert_eq!(fa, 5.0 / 1024.0);
}

#[test]
fn iou_matches_set_counting_on_all_3x3_pairs() {
    let fixed = BinaryMask::from_fn(3, 3, |r, c| (r + c) % 2 == 0);
    for bits in 0u32..512 {
        let m = BinaryMask::from_fn(3, 3, |r, c| bits >> (r * 3 + c) & 1 == 1);
        let a: std::collections::BTreeSet<usize> = (0..9).filter(|i| bits >> i & 1 == 1).collect();
        let b: std::collections::BTreeSet<usize> = (0..9).filter(|&i| (i / 3 + i % 3) % 2 == 0).collect();
        let union = a.union(&b).count();
        let expect = if union == 0 { 1.0 } else { a.intersection(&b).count() as f64 / union as f64 };
        assert_eq!(iou(&m, &fixed).unwrap(), expect, "bits {bits:09b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_symmetric_and_bounded(a in mask_strategy(9, 11), b in mask_strategy(9, 11)) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn pd_fa_bounded_and_self_match_perfect(a in mask_strategy(12, 12), b in mask_strategy(12, 12)) {
        let cfg = TargetMatchConfig::default();
        let (pd, fa) = pd_fa(&a, &b, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&pd) && (0.0..=1.0).contains(&fa));
        let (pd_self, fa_self) = pd_fa(&b, &b, &cfg).unwrap();
        prop_assert_eq!(pd_self, 1.0);
        prop_assert_eq!(fa_self, 0.0);
    }

    #[test]
    fn rce_scale_invariant(a in 0.01f64..1.0, b in 0.0f64..1.0, s in 0.1f64..200.0) {
        let x = rce(a, b).unwrap();
        prop_assert!((rce(s * a, s * b).unwrap() - x).abs() < 1e-9);
    }

    #[test]
    fn soft_iou_in_unit_interval(m in mask_strategy(6, 6), p in prop::collection::vec(0.0f64..=1.0, 36)) {
        let pm = ProbabilityMap { height: 6, width: 6, values: p };
        let l = soft_iou_loss(&pm, &m).unwrap();
        prop_assert!((0.0..1.0).contains(&l));
        prop_assert_eq!(soft_iou_loss(&ProbabilityMap::from_mask(&m), &m).unwrap(), 0.0);
    }
}
