use std::collections::BTreeSet;

use proptest::prelude::*;
use skinseg::catalog::{stratified_folds, DiagnosisClass, NUM_FOLDS};

fn catalog(counts: [usize; 3]) -> Vec<(String, DiagnosisClass)> {
    let mut out = Vec::new();
    for (class, n) in DiagnosisClass::ALL.into_iter().zip(counts) {
        for i in 0..n {
            out.push((format!("{}_{i:05}", class.slug()), class));
        }
    }
    out
}

fn class_of(ids: &[String], class: DiagnosisClass) -> usize {
    ids.iter().filter(|id| id.starts_with(class.slug())).count()
}

#[test]
fn reference_totals_give_reference_training_counts() {
    let items = catalog([1843, 521, 386]);
    let folds = stratified_folds(items.iter().map(|(i, c)| (i.as_str(), *c)), 0).unwrap();
    for f in &folds {
        for (class, want) in DiagnosisClass::ALL.into_iter().zip([1290usize, 365, 271]) {
            let got = class_of(&f.train_ids, class);
            assert!(got.abs_diff(want) <= 1, "fold {} {class}: {got}", f.fold_index);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn test_sets_partition_the_catalog(b in 5usize..200, m in 5usize..80, s in 5usize..80, seed in any::<u64>()) {
        let items = catalog([b, m, s]);
        let folds = stratified_folds(items.iter().map(|(i, c)| (i.as_str(), *c)), seed).unwrap();
        prop_assert_eq!(folds.len(), NUM_FOLDS);
        let mut seen = BTreeSet::new();
        for f in &folds {
            for id in &f.test_ids {
                prop_assert!(seen.insert(id.clone()), "{} tested twice", id);
            }
            let parts: Vec<BTreeSet<&String>> = [&f.train_ids, &f.validation_ids, &f.test_ids]
                .iter()
                .map(|p| p.iter().collect())
                .collect();
            prop_assert!(parts[0].is_disjoint(&parts[1]));
            prop_assert!(parts[0].is_disjoint(&parts[2]));
            prop_assert!(parts[1].is_disjoint(&parts[2]));
            prop_assert_eq!(f.all_ids().count(), items.len());
        }
        prop_assert_eq!(seen.len(), items.len());
    }

    #[test]
    fn folds_are_reproducible(seed in any::<u64>()) {
        let items = catalog([40, 12, 9]);
        let a = stratified_folds(items.iter().map(|(i, c)| (i.as_str(), *c)), seed).unwrap();
        let b = stratified_folds(items.iter().rev().map(|(i, c)| (i.as_str(), *c)), seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn small_classes_are_rejected() {
    let items = catalog([20, 4, 9]);
    assert!(stratified_folds(items.iter().map(|(i, c)| (i.as_str(), *c)), 0).is_err());
}
