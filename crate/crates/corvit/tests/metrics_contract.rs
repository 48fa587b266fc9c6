//! Contract for the evaluation metrics: trapezoidal AUC must equal the
//! exhaustive pairwise statistic, the threshold rule must return the largest
//! qualifying score, and confusion rates must handle empty denominators.

use corvit::metrics::{
    confusion_metrics, evaluate_scores, roc_auc, softmax_rows, threshold_for_sensitivity,
};
use corvit::rng::RngStream;
use corvit::Error;

/// O(n^2) reference: compare every positive/negative pair directly, counting
/// ties as half a win.
fn pairwise_auc(scores: &[f64], positives: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (sp, &lp) in scores.iter().zip(positives) {
        if !lp {
            continue;
        }
        for (sn, &ln) in scores.iter().zip(positives) {
            if ln {
                continue;
            }
            pairs += 1;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs as f64
}

#[test]
fn separated_scores_give_extreme_auc() {
    let scores = vec![0.9, 0.8, 0.7, 0.2, 0.1];
    let labels = vec![true, true, true, false, false];
    assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
    let flipped: Vec<bool> = labels.iter().map(|b| !b).collect();
    assert_eq!(roc_auc(&scores, &flipped).unwrap(), 0.0);
}

#[test]
fn identical_scores_give_half_by_the_tie_convention() {
    let scores = vec![0.4; 8];
    let labels = vec![true, false, true, false, true, false, false, true];
    assert_eq!(roc_auc(&scores, &labels).unwrap(), 0.5);
}

#[test]
fn single_class_input_is_undefined() {
    assert!(matches!(
        roc_auc(&[0.1, 0.2], &[true, true]),
        Err(Error::UndefinedAuc)
    ));
    assert!(matches!(
        roc_auc(&[0.1, 0.2], &[false, false]),
        Err(Error::UndefinedAuc)
    ));
}

#[test]
fn trapezoid_matches_the_pairwise_oracle_on_random_instances() {
    let mut rng = RngStream::new(70, "metrics-test", 0);
    for trial in 0..1000 {
        let n = 5 + rng.range(56); // 5..60 samples
        // draw from a coarse grid so ties are common
        let grid = 2 + rng.range(9);
        let scores: Vec<f64> = (0..n).map(|_| rng.range(grid) as f64 / grid as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
        // force both classes to exist
        labels[0] = true;
        labels[1] = false;
        let fast = roc_auc(&scores, &labels).unwrap();
        let slow = pairwise_auc(&scores, &labels);
        assert!(
            (fast - slow).abs() < 1e-12,
            "trial {trial}: trapezoid {fast} vs pairwise {slow}"
        );
    }
}

#[test]
fn auc_complement_and_monotone_invariance() {
    let mut rng = RngStream::new(71, "metrics-test", 0);
    for _ in 0..50 {
        let n = 10 + rng.range(30);
        // continuous draws: ties have probability zero
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
        labels[0] = true;
        labels[1] = false;
        let auc = roc_auc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let auc_neg = roc_auc(&neg, &labels).unwrap();
        assert!((auc + auc_neg - 1.0).abs() < 1e-12);

        // order-preserving transform leaves the ranking, hence the AUC, alone
        let warped: Vec<f64> = scores.iter().map(|s| s.exp() + 3.0 * s).collect();
        assert_eq!(roc_auc(&warped, &labels).unwrap(), auc);
    }
}

#[test]
fn threshold_picks_the_largest_qualifying_score() {
    // cleanly separated: the highest positive score qualifies on its own
    // when it covers enough positives -- here every positive scores 0.9
    let scores = vec![0.9, 0.9, 0.9, 0.9, 0.1, 0.1];
    let labels = vec![true, true, true, true, false, false];
    let choice = threshold_for_sensitivity(&scores, &labels, 0.8).unwrap();
    assert_eq!(choice.threshold, 0.9);
    assert!(choice.attained);
    assert_eq!(choice.sensitivity, 1.0);

    // ten positives at 0.1, 0.2, ..., 1.0: threshold 0.3 keeps 8 of 10
    let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let labels = vec![true; 10];
    let choice = threshold_for_sensitivity(&scores, &labels, 0.8).unwrap();
    assert!((choice.threshold - 0.3).abs() < 1e-12);
    assert!(choice.attained);
    assert!((choice.sensitivity - 0.8).abs() < 1e-12);

    // a vacuous target selects the largest observed score
    let scores = vec![0.2, 0.5, 0.8];
    let labels = vec![true, false, false];
    let choice = threshold_for_sensitivity(&scores, &labels, 0.0).unwrap();
    assert_eq!(choice.threshold, 0.8);
    assert!(choice.attained);
}

#[test]
fn unattainable_target_falls_back_to_the_minimum_score() {
    let scores = vec![0.7, 0.4, 0.2];
    let labels = vec![true, false, true];
    let choice = threshold_for_sensitivity(&scores, &labels, 1.5).unwrap();
    assert_eq!(choice.threshold, 0.2);
    assert!(!choice.attained);
    assert_eq!(choice.sensitivity, 1.0);

    assert!(matches!(
        threshold_for_sensitivity(&scores, &[false, false, false], 0.8),
        Err(Error::NoPositives)
    ));
}

#[test]
fn confusion_rates_from_hand_built_tables() {
    // perfect classifier
    let m = confusion_metrics(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false], 0.5).unwrap();
    assert_eq!(m.sensitivity_pct, Some(100.0));
    assert_eq!(m.specificity_pct, Some(100.0));
    assert_eq!(m.accuracy_pct, Some(100.0));

    // threshold below everything: everyone predicted positive
    let m = confusion_metrics(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false], 0.0).unwrap();
    assert_eq!(m.sensitivity_pct, Some(100.0));
    assert_eq!(m.specificity_pct, Some(0.0));

    // 3 TP, 1 FN, 1 TN, 1 FP
    let scores = vec![0.9, 0.8, 0.7, 0.1, 0.2, 0.6];
    let labels = vec![true, true, true, true, false, false];
    let m = confusion_metrics(&scores, &labels, 0.5).unwrap();
    assert_eq!(m.sensitivity_pct, Some(75.0));
    assert_eq!(m.specificity_pct, Some(50.0));
    let acc = m.accuracy_pct.unwrap();
    assert!((acc - 400.0 / 6.0).abs() < 1e-12, "accuracy {acc}");

    // no negatives: specificity is undefined, not zero
    let m = confusion_metrics(&[0.9, 0.1], &[true, true], 0.5).unwrap();
    assert_eq!(m.specificity_pct, None);
    assert_eq!(m.sensitivity_pct, Some(50.0));
}

#[test]
fn rates_move_monotonically_with_the_threshold() {
    let mut rng = RngStream::new(72, "metrics-test", 0);
    let n = 60;
    let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let labels: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    let mut prev_sens = f64::INFINITY;
    let mut prev_spec = f64::NEG_INFINITY;
    for step in 0..=20 {
        let threshold = step as f64 / 20.0;
        let m = confusion_metrics(&scores, &labels, threshold).unwrap();
        let sens = m.sensitivity_pct.unwrap();
        let spec = m.specificity_pct.unwrap();
        assert!(sens <= prev_sens + 1e-12, "sensitivity rose with threshold");
        assert!(spec >= prev_spec - 1e-12, "specificity fell with threshold");
        prev_sens = sens;
        prev_spec = spec;
    }
}

#[test]
fn oracle_probabilities_score_perfectly() {
    let labels = vec![0usize, 1, 2, 0, 1, 2, 2, 1];
    let mut probs = Vec::new();
    for &l in &labels {
        let mut row = vec![0.05; 3];
        row[l] = 0.9;
        probs.extend(row);
    }
    let names = ["normal", "other-infection", "covid"];
    let report = evaluate_scores(&probs, 3, &labels, &names, 0.8).unwrap();
    assert_eq!(report.macro_auc, 1.0);
    for c in &report.classes {
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.sensitivity_pct, Some(100.0));
        assert_eq!(c.specificity_pct, Some(100.0));
        assert_eq!(c.accuracy_pct, Some(100.0));
        assert!(c.target_attained);
    }
    assert_eq!(report.macro_sensitivity_pct, Some(100.0));
    assert_eq!(report.samples, labels.len());
}

#[test]
fn indifferent_probabilities_score_half() {
    let labels = vec![0usize, 1, 2, 0, 1, 2];
    let probs = vec![1.0 / 3.0; labels.len() * 3];
    let names = ["a", "b", "c"];
    let report = evaluate_scores(&probs, 3, &labels, &names, 0.8).unwrap();
    for c in &report.classes {
        assert_eq!(c.auc, 0.5, "{}: tie convention", c.name);
    }
    assert_eq!(report.macro_auc, 0.5);
}

#[test]
fn malformed_probability_rows_are_rejected() {
    let labels = vec![0usize, 1];
    let names = ["a", "b"];
    // rows not summing to one
    let bad = vec![0.9, 0.3, 0.5, 0.5];
    assert!(evaluate_scores(&bad, 2, &labels, &names, 0.8).is_err());
    // label out of range
    let probs = vec![0.6, 0.4, 0.3, 0.7];
    assert!(matches!(
        evaluate_scores(&probs, 2, &[0, 5], &names, 0.8),
        Err(Error::ClassOutOfRange { class: 5, .. })
    ));
    // wrong matrix size
    assert!(evaluate_scores(&probs[..2], 2, &labels, &names, 0.8).is_err());
}

#[test]
fn report_renders_text_and_tsv() {
    let labels = vec![0usize, 1, 2, 0, 1, 2, 1, 0];
    let mut rng = RngStream::new(73, "metrics-test", 0);
    let logits: Vec<f64> = (0..labels.len() * 3).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
    let probs = softmax_rows(&logits, 3);
    let names = ["normal", "other-infection", "covid"];
    let report = evaluate_scores(&probs, 3, &labels, &names, 0.8).unwrap();

    let text = report.to_text();
    for name in names {
        assert!(text.contains(name), "text report missing {name}");
    }
    assert!(text.contains("macro"));

    let tsv = report.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 1); // header, class rows, macro row
    assert!(lines[0].starts_with("class\tauc\t"));
    for line in &lines[1..4] {
        assert_eq!(line.split('\t').count(), 7);
    }
}

#[test]
fn softmax_rows_are_valid_distributions() {
    let logits = vec![1000.0, 1001.0, 999.0, -5.0, 0.0, 5.0];
    let probs = softmax_rows(&logits, 3);
    for row in probs.chunks(3) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
    }
    // extreme logits must not overflow
    assert!(probs[1] > probs[0] && probs[0] > probs[2]);
}
