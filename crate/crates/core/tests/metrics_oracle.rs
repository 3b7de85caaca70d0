mod common;

use proptest::prelude::*;
use skinseg::catalog::DiagnosisClass;
use skinseg::labels::LabelMap;
use skinseg::metrics::{aggregate, confusion, dice, mcc, sensitivity, specificity, AggregationMode, ConfusionCounts};

fn library_metrics(pred: &LabelMap, truth: &LabelMap, class: DiagnosisClass) -> [f64; 4] {
    let c = confusion(pred, truth, class).unwrap();
    [dice(&c), sensitivity(&c), specificity(&c), mcc(&c)]
}

#[test]
fn random_pairs_match_naive_reference() {
    let mut rng = common::rng(7);
    for class in DiagnosisClass::ALL {
        for _ in 0..1000 {
            let pred = common::random_label(&mut rng, 8, 8);
            let truth = common::random_label(&mut rng, 8, 8);
            let got = library_metrics(&pred, &truth, class);
            let want = common::naive_metrics(&pred.view().to_owned(), &truth.view().to_owned(), class.code());
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() <= 1e-12, "{class}: {got:?} vs {want:?}");
            }
        }
    }
}

#[test]
fn worked_example() {
    let c = ConfusionCounts::new(50, 10, 30, 10);
    assert!((dice(&c) - 0.7143).abs() < 1e-4);
    assert!((sensitivity(&c) - 0.625).abs() < 1e-4);
    assert!((specificity(&c) - 0.5).abs() < 1e-4);
    assert!((mcc(&c) - 0.1021).abs() < 1e-4);
}

#[test]
fn micro_pooling_equals_metrics_of_summed_counts() {
    let per = [ConfusionCounts::new(5, 1, 2, 40), ConfusionCounts::new(0, 3, 0, 45)];
    let micro = aggregate(DiagnosisClass::Benign, &per, AggregationMode::Micro);
    let pooled = ConfusionCounts::new(5, 4, 2, 85).metrics();
    assert_eq!(micro.metrics, Some(pooled));
    let macro_row = aggregate(DiagnosisClass::Benign, &per, AggregationMode::Macro);
    assert_eq!(macro_row.images, 1);
    assert_eq!(macro_row.metrics, Some(per[0].metrics()));
}

fn label_strategy() -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        let cells = proptest::collection::vec(0u8..4, h * w);
        (cells.clone(), cells).prop_map(move |(a, b)| {
            let a = LabelMap::new(ndarray::Array2::from_shape_vec((h, w), a).unwrap()).unwrap();
            let b = LabelMap::new(ndarray::Array2::from_shape_vec((h, w), b).unwrap()).unwrap();
            (a, b)
        })
    })
}

proptest! {
    #[test]
    fn confusion_counts_cover_every_pixel((pred, truth) in label_strategy(), code in 1u8..4) {
        let class = DiagnosisClass::from_code(code).unwrap();
        let c = confusion(&pred, &truth, class).unwrap();
        prop_assert_eq!(c.total() as usize, pred.height() * pred.width());
    }

    #[test]
    fn metrics_are_bounded((pred, truth) in label_strategy(), code in 1u8..4) {
        let class = DiagnosisClass::from_code(code).unwrap();
        let [d, se, sp, m] = library_metrics(&pred, &truth, class);
        for v in [d, se, sp] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((-1.0..=1.0).contains(&m));
    }

    #[test]
    fn perfect_prediction_scores_one(truth in label_strategy().prop_map(|p| p.1), code in 1u8..4) {
        let class = DiagnosisClass::from_code(code).unwrap();
        let [d, se, sp, _] = library_metrics(&truth, &truth, class);
        prop_assert_eq!((d, se, sp), (1.0, 1.0, 1.0));
    }

    #[test]
    fn dice_is_symmetric((pred, truth) in label_strategy(), code in 1u8..4) {
        let class = DiagnosisClass::from_code(code).unwrap();
        let a = dice(&confusion(&pred, &truth, class).unwrap());
        let b = dice(&confusion(&truth, &pred, class).unwrap());
        prop_assert_eq!(a, b);
    }
}
