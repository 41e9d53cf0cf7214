mod common;

use common::{brute_percentile, brute_surface, random_blob_mask, random_mask, rng};
use geoseg::geometry::BinaryMask;
use geoseg::metrics::{
    dice_jaccard, percentile, surface_distances, surface_distances_at, CaseMetrics, MetricReport, METRIC_CSV_HEADER,
};
use proptest::prelude::*;

fn pair_strategy() -> impl Strategy<Value = (Vec<usize>, u64)> {
    (
        prop_oneof![
            prop::collection::vec(2usize..=32, 2),
            prop::collection::vec(2usize..=10, 3),
        ],
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn surface_metrics_match_all_pairs((shape, seed) in pair_strategy()) {
        let mut r = rng(seed);
        let a = random_blob_mask(&shape, &mut r);
        let b = random_blob_mask(&shape, &mut r);
        let got = surface_distances(&a, &b).unwrap();
        match brute_surface(&a, &b) {
            None => prop_assert!(got.is_none()),
            Some(d) => {
                let got = got.unwrap();
                let asd = d.iter().sum::<f64>() / d.len() as f64;
                prop_assert!((got.asd - asd).abs() <= 1e-9);
                prop_assert!((got.hd95 - brute_percentile(&d, 95.0)).abs() <= 1e-9);
                let hd = surface_distances_at(&a, &b, 100.0).unwrap().unwrap().hd95;
                prop_assert_eq!(hd, d.iter().cloned().fold(0.0, f64::max));
            }
        }
    }

    #[test]
    fn jaccard_follows_from_dice((shape, seed) in pair_strategy(), density in 0.05f64..0.9) {
        let mut r = rng(seed);
        let a = random_mask(&shape, density, &mut r);
        let b = random_mask(&shape, density, &mut r);
        let (d, j) = dice_jaccard(&a, &b).unwrap();
        prop_assert!((j - d / (2.0 - d)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn percentile_matches_sorted_interpolation(v in prop::collection::vec(0.0f64..50.0, 1..200), q in 0.0f64..=100.0) {
        prop_assert!((percentile(&v, q) - brute_percentile(&v, q)).abs() <= 1e-12);
    }
}

#[test]
fn identical_masks_score_perfectly() {
    let a = random_blob_mask(&[20, 20], &mut rng(1));
    let (d, j) = dice_jaccard(&a, &a).unwrap();
    assert_eq!((d, j), (1.0, 1.0));
    let s = surface_distances(&a, &a).unwrap().unwrap();
    assert_eq!((s.asd, s.hd95), (0.0, 0.0));
}

#[test]
fn empty_prediction_is_degenerate() {
    let truth = BinaryMask::from_fn(vec![8, 8], |i| i[0] < 4);
    let case = CaseMetrics::compute("c", &BinaryMask::zeros(vec![8, 8]), &truth).unwrap();
    assert_eq!(case.dice, 0.0);
    assert!(case.degenerate());
    assert_eq!(case.csv_row(), "c,0,0,undefined,undefined,1");
    let ok = CaseMetrics::compute("d", &truth, &truth).unwrap();
    let report = MetricReport::from_cases(vec![case, ok]).unwrap();
    assert_eq!(report.aggregate.degenerate_cases, 1);
    assert_eq!(report.aggregate.asd, Some(0.0));
    assert_eq!(report.aggregate.dice, 0.5);
    let csv = report.to_csv();
    assert_eq!(csv.lines().nth(1).unwrap(), METRIC_CSV_HEADER);
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn shape_mismatch_is_rejected() {
    let a = BinaryMask::zeros(vec![4, 4]);
    let b = BinaryMask::zeros(vec![4, 5]);
    assert!(dice_jaccard(&a, &b).is_err());
    assert!(surface_distances(&a, &b).is_err());
}
