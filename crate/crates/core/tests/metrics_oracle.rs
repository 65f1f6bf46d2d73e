mod common;

use common::{count_oracle, hd95_bruteforce, random_blob_mask};
use patchconv::data::Grid;
use patchconv::metrics::{confusion, hausdorff, hd95, region_mask, Region, RegionMask};
use patchconv::LabelVolume;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn as_mask(d: [usize; 3], m: Vec<bool>, spacing: [f64; 3]) -> RegionMask {
    RegionMask {
        mask: Grid::new(d, m).unwrap(),
        kind: Region::WT,
        spacing_mm: spacing,
    }
}

#[test]
fn overlap_scores_match_counting_on_random_masks() {
    let d = [8, 8, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..100 {
        let p: Vec<bool> = (0..512).map(|_| rng.random_bool(0.3)).collect();
        let t: Vec<bool> = (0..512).map(|_| rng.random_bool(0.3)).collect();
        let o = count_oracle(&p, &t);
        let c = confusion(&as_mask(d, p, [1.0; 3]), &as_mask(d, t, [1.0; 3])).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (o.tp, o.fp, o.fn_, o.tn));
        let dsc = 2.0 * o.tp as f64 / (o.fp + 2 * o.tp + o.fn_) as f64;
        assert_eq!(c.dsc(), Some(dsc));
        assert_eq!(c.sensitivity(), Some(o.tp as f64 / (o.tp + o.fn_) as f64));
        assert_eq!(c.ppv(), Some(o.tp as f64 / (o.tp + o.fp) as f64));
        assert_eq!(c.specificity(), Some(o.tn as f64 / (o.tn + o.fp) as f64));
    }
}

#[test]
fn hd95_matches_all_pairs_oracle() {
    let d = [12, 12, 12];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut compared = 0;
    for case in 0..40 {
        let spacing = if case % 2 == 0 { [1.0; 3] } else { [2.5, 0.9, 1.3] };
        let a = random_blob_mask(d, &mut rng);
        let b = random_blob_mask(d, &mut rng);
        let want = hd95_bruteforce(&a, &b, d, spacing);
        let got = hd95(&as_mask(d, a, spacing), &as_mask(d, b, spacing)).unwrap();
        match (want, got) {
            (Some(w), Some(g)) => {
                assert!((w - g).abs() < 1e-9, "case {case}: {g} vs {w}");
                compared += 1;
            }
            (w, g) => assert_eq!(w, g, "case {case}"),
        }
    }
    assert!(compared >= 20);
}

#[test]
fn hausdorff_bounds_hd95() {
    let d = [10, 11, 9];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let a = as_mask(d, random_blob_mask(d, &mut rng), [1.0; 3]);
        let b = as_mask(d, random_blob_mask(d, &mut rng), [1.0; 3]);
        if let (Some(h95), Some(h)) = (hd95(&a, &b).unwrap(), hausdorff(&a, &b).unwrap()) {
            assert!(h95 <= h + 1e-12);
        }
    }
}

#[test]
fn regions_nest() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<u8> = (0..6 * 6 * 6).map(|_| rng.random_range(0..4)).collect();
    let l = LabelVolume::new(Grid::new([6, 6, 6], labels).unwrap(), 4, [1.0; 3]).unwrap();
    let wt = region_mask(&l, Region::WT);
    let tc = region_mask(&l, Region::TC);
    let et = region_mask(&l, Region::ET);
    for i in 0..216 {
        assert!(!et.mask.data()[i] || tc.mask.data()[i]);
        assert!(!tc.mask.data()[i] || wt.mask.data()[i]);
    }
}

fn mask_pair() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (
        proptest::collection::vec(any::<bool>(), 125),
        proptest::collection::vec(any::<bool>(), 125),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dsc_symmetric_and_bounded((p, t) in mask_pair()) {
        let d = [5, 5, 5];
        let a = as_mask(d, p, [1.0; 3]);
        let b = as_mask(d, t, [1.0; 3]);
        let ab = confusion(&a, &b).unwrap();
        let ba = confusion(&b, &a).unwrap();
        prop_assert_eq!(ab.dsc(), ba.dsc());
        prop_assert_eq!(ab.sensitivity(), ba.ppv());
        prop_assert_eq!(ab.total(), 125);
        for v in [ab.dsc(), ab.sensitivity(), ab.ppv(), ab.specificity()].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn hd95_symmetric_nonnegative((p, t) in mask_pair()) {
        let d = [5, 5, 5];
        let a = as_mask(d, p, [1.0, 2.0, 0.5]);
        let b = as_mask(d, t, [1.0, 2.0, 0.5]);
        let ab = hd95(&a, &b).unwrap();
        prop_assert_eq!(ab, hd95(&b, &a).unwrap());
        if let Some(h) = ab {
            prop_assert!(h >= 0.0);
        }
        prop_assert_eq!(hd95(&a, &a).unwrap(), Some(0.0));
    }
}
