mod common;

use proptest::prelude::*;

use genrel_core::heads::{LabelSpace, Prediction};
use genrel_core::metrics::{auroc, average_precision, mcc, micro_accuracy, micro_f1, report, ScoredBatch};

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..8).prop_map(|v| v as f64 / 8.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_and_ap_match_enumeration((scores, pos) in scored()) {
        match (auroc(&scores, &pos), common::brute_auroc(&scores, &pos)) {
            (Ok(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
        match (average_precision(&scores, &pos), common::brute_ap(&scores, &pos)) {
            (Ok(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }

    #[test]
    fn auroc_is_invariant_under_monotone_maps((scores, pos) in scored()) {
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 1.0).collect();
        if let (Ok(a), Ok(b)) = (auroc(&scores, &pos), auroc(&mapped, &pos)) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn ap_is_a_probability((scores, pos) in scored()) {
        if let Ok(ap) = average_precision(&scores, &pos) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        }
    }

    #[test]
    fn multiclass_f1_equals_accuracy(
        rows in prop::collection::vec((prop::collection::vec(1u8..9, 4), 1i64..=4), 1..40)
    ) {
        let preds: Vec<Prediction> = rows.iter().map(|(raw, _)| {
            let s: f64 = raw.iter().map(|&v| v as f64).sum();
            Prediction { probs: raw.iter().map(|&v| v as f64 / s).collect() }
        }).collect();
        let labels: Vec<i64> = rows.iter().map(|(_, y)| *y).collect();
        let b = ScoredBatch::new(&preds, &labels, LabelSpace::multiclass(4, false).unwrap()).unwrap();
        prop_assert_eq!(micro_f1(&b).unwrap().0, micro_accuracy(&b).unwrap());
        let (m, _) = mcc(&b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m));
    }
}

#[test]
fn perfect_binary_predictions() {
    let preds: Vec<Prediction> = [0.9, 0.2, 0.7, 0.1].iter().map(|&p| Prediction { probs: vec![p] }).collect();
    let labels = [1, 0, 1, 0];
    let b = ScoredBatch::new(&preds, &labels, LabelSpace::binary(false)).unwrap();
    let r = report(&b).unwrap();
    assert_eq!(r.acc, 1.0);
    assert_eq!(r.auroc, Some(1.0));
    assert_eq!(r.aupr, Some(1.0));
    assert_eq!(r.f1, 1.0);
    assert_eq!(r.mcc, 1.0);
    let back: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back["acc"], 1.0);
}

#[test]
fn batches_with_bad_probabilities_are_rejected() {
    let preds = vec![Prediction { probs: vec![0.5, 0.6, 0.1] }];
    assert!(ScoredBatch::new(&preds, &[1], LabelSpace::multiclass(3, false).unwrap()).is_err());
    let preds = vec![Prediction { probs: vec![1.5] }];
    assert!(ScoredBatch::new(&preds, &[1], LabelSpace::binary(false)).is_err());
}
