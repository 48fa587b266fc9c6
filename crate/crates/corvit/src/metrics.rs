//! Evaluation protocol: one-vs-rest ROC AUC via trapezoidal integration
//! (exactly the pairwise-comparison statistic, ties counted half), a
//! sensitivity-anchored threshold rule, and confusion-table rates reported
//! as percentages with division-by-zero cases surfaced as `None`.

use crate::error::{Error, Result};

/// Sensitivity floor the threshold rule aims for when evaluating.
pub const DEFAULT_TARGET_SENSITIVITY: f64 = 0.80;

fn check_scores(op: &'static str, scores: &[f64], positives: &[bool]) -> Result<()> {
    if scores.len() != positives.len() {
        return Err(Error::invalid(
            op,
            format!("{} scores vs {} labels", scores.len(), positives.len()),
        ));
    }
    if scores.is_empty() {
        return Err(Error::invalid(op, "empty score set"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(op, format!("non-finite score {bad}")));
    }
    Ok(())
}

/// Area under the ROC curve by trapezoidal integration over the thresholds
/// observed in `scores`. Ties between a positive and a negative contribute
/// half, so the result equals P(score+ > score-) + 0.5 * P(score+ = score-).
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    check_scores("roc_auc", scores, positives)?;
    let p = positives.iter().filter(|&&b| b).count();
    let n = positives.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // walk threshold groups of equal score; the area increments are exact
    // halves of integer products, so no precision is lost before the final
    // division
    let mut area_twice = 0.0; // 2 * area, in units of (TP * FP)
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut dp, mut dn) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positives[order[j]] {
                dp += 1;
            } else {
                dn += 1;
            }
            j += 1;
        }
        // trapezoid across the tie block: width dn, heights tp and tp + dp
        area_twice += (dn * (tp + tp + dp)) as f64;
        tp += dp;
        fp += dn;
        i = j;
    }
    debug_assert_eq!((tp, fp), (p, n));
    Ok(area_twice / (2.0 * p as f64 * n as f64))
}

/// Outcome of the sensitivity-anchored threshold search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// Sensitivity actually achieved at `threshold`, as a fraction.
    pub sensitivity: f64,
    /// False when no observed threshold reaches the target and the minimum
    /// score was returned as a fallback.
    pub attained: bool,
}

/// Largest observed score usable as a decision threshold (prediction =
/// score >= threshold) that still keeps sensitivity at or above `target`.
/// Candidates are exactly the observed scores. When even the smallest score
/// cannot reach the target, the smallest score is returned with
/// `attained = false`.
pub fn threshold_for_sensitivity(
    scores: &[f64],
    positives: &[bool],
    target: f64,
) -> Result<ThresholdChoice> {
    check_scores("threshold_for_sensitivity", scores, positives)?;
    let p = positives.iter().filter(|&&b| b).count();
    if p == 0 {
        return Err(Error::NoPositives);
    }
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(|a, b| b.total_cmp(a)); // descending
    candidates.dedup();
    let sens_at = |threshold: f64| -> f64 {
        let hit = scores
            .iter()
            .zip(positives)
            .filter(|(s, &pos)| pos && **s >= threshold)
            .count();
        hit as f64 / p as f64
    };
    for &threshold in &candidates {
        let sensitivity = sens_at(threshold);
        if sensitivity >= target {
            return Ok(ThresholdChoice {
                threshold,
                sensitivity,
                attained: true,
            });
        }
    }
    let fallback = *candidates.last().unwrap();
    Ok(ThresholdChoice {
        threshold: fallback,
        sensitivity: sens_at(fallback),
        attained: false,
    })
}

/// Confusion-table rates at a fixed threshold, in percent. A rate whose
/// denominator is zero (no positives, no negatives, or no samples) is `None`
/// rather than zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionMetrics {
    pub sensitivity_pct: Option<f64>,
    pub specificity_pct: Option<f64>,
    pub accuracy_pct: Option<f64>,
}

pub fn confusion_metrics(scores: &[f64], positives: &[bool], threshold: f64) -> Result<ConfusionMetrics> {
    check_scores("confusion_metrics", scores, positives)?;
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (s, &pos) in scores.iter().zip(positives) {
        let predicted = *s >= threshold;
        match (pos, predicted) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let pct = |num: usize, den: usize| -> Option<f64> {
        (den > 0).then(|| 100.0 * num as f64 / den as f64)
    };
    Ok(ConfusionMetrics {
        sensitivity_pct: pct(tp, tp + fn_),
        specificity_pct: pct(tn, tn + fp),
        accuracy_pct: pct(tp + tn, tp + fn_ + tn + fp),
    })
}

/// One class's row of the evaluation report.
#[derive(Debug, Clone)]
pub struct ClassEval {
    pub name: String,
    pub auc: f64,
    pub threshold: f64,
    /// Whether the sensitivity target was reachable at any observed score.
    pub target_attained: bool,
    pub sensitivity_pct: Option<f64>,
    pub specificity_pct: Option<f64>,
    pub accuracy_pct: Option<f64>,
}

/// One-vs-rest evaluation of a probability matrix, with unweighted macro
/// averages across classes.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub classes: Vec<ClassEval>,
    pub macro_auc: f64,
    pub macro_sensitivity_pct: Option<f64>,
    pub macro_specificity_pct: Option<f64>,
    pub macro_accuracy_pct: Option<f64>,
    pub samples: usize,
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v?;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// Evaluate an (n, num_classes) row-major probability matrix against integer
/// labels. Each row must sum to 1 (within 1e-9); every class must appear at
/// least once so each one-vs-rest AUC is defined.
pub fn evaluate_scores(
    probs: &[f64],
    num_classes: usize,
    labels: &[usize],
    class_names: &[&str],
    target_sensitivity: f64,
) -> Result<EvalReport> {
    let n = labels.len();
    if num_classes < 2 || class_names.len() != num_classes {
        return Err(Error::invalid(
            "evaluate_scores",
            format!("{num_classes} classes with {} names", class_names.len()),
        ));
    }
    if probs.len() != n * num_classes || n == 0 {
        return Err(Error::invalid(
            "evaluate_scores",
            format!("{} probabilities for {n} samples of {num_classes} classes", probs.len()),
        ));
    }
    for (i, row) in probs.chunks(num_classes).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(
                "evaluate_scores",
                format!("sample {i}: probabilities sum to {sum}"),
            ));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            num_classes,
        });
    }

    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let scores: Vec<f64> = (0..n).map(|i| probs[i * num_classes + c]).collect();
        let positives: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let auc = roc_auc(&scores, &positives)?;
        let choice = threshold_for_sensitivity(&scores, &positives, target_sensitivity)?;
        let rates = confusion_metrics(&scores, &positives, choice.threshold)?;
        classes.push(ClassEval {
            name: class_names[c].to_string(),
            auc,
            threshold: choice.threshold,
            target_attained: choice.attained,
            sensitivity_pct: rates.sensitivity_pct,
            specificity_pct: rates.specificity_pct,
            accuracy_pct: rates.accuracy_pct,
        });
    }
    let macro_auc = classes.iter().map(|c| c.auc).sum::<f64>() / num_classes as f64;
    Ok(EvalReport {
        macro_sensitivity_pct: macro_mean(classes.iter().map(|c| c.sensitivity_pct)),
        macro_specificity_pct: macro_mean(classes.iter().map(|c| c.specificity_pct)),
        macro_accuracy_pct: macro_mean(classes.iter().map(|c| c.accuracy_pct)),
        classes,
        macro_auc,
        samples: n,
    })
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.1}"),
        None => "n/a".to_string(),
    }
}

impl EvalReport {
    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("samples: {}\n", self.samples));
        out.push_str(&format!(
            "{:<18} {:>7} {:>11} {:>8} {:>8} {:>8}\n",
            "class", "auc", "threshold", "sens%", "spec%", "acc%"
        ));
        for c in &self.classes {
            let marker = if c.target_attained { "" } else { " (target missed)" };
            out.push_str(&format!(
                "{:<18} {:>7.4} {:>11.6} {:>8} {:>8} {:>8}{}\n",
                c.name,
                c.auc,
                c.threshold,
                fmt_pct(c.sensitivity_pct),
                fmt_pct(c.specificity_pct),
                fmt_pct(c.accuracy_pct),
                marker,
            ));
        }
        out.push_str(&format!(
            "{:<18} {:>7.4} {:>11} {:>8} {:>8} {:>8}\n",
            "macro",
            self.macro_auc,
            "-",
            fmt_pct(self.macro_sensitivity_pct),
            fmt_pct(self.macro_specificity_pct),
            fmt_pct(self.macro_accuracy_pct),
        ));
        out
    }

    /// Machine-readable tab-separated rows (one per class plus a macro row).
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("class\tauc\tthreshold\tattained\tsensitivity\tspecificity\taccuracy\n");
        let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        for c in &self.classes {
            out.push_str(&format!(
                "{}\t{:.12}\t{:.12}\t{}\t{}\t{}\t{}\n",
                c.name,
                c.auc,
                c.threshold,
                c.target_attained,
                cell(c.sensitivity_pct),
                cell(c.specificity_pct),
                cell(c.accuracy_pct),
            ));
        }
        out.push_str(&format!(
            "macro\t{:.12}\t\t\t{}\t{}\t{}\n",
            self.macro_auc,
            cell(self.macro_sensitivity_pct),
            cell(self.macro_specificity_pct),
            cell(self.macro_accuracy_pct),
        ));
        out
    }
}

/// Numerically stable softmax over each row of an (n, c) logit matrix.
pub fn softmax_rows(logits: &[f64], num_classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(num_classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

/// Read a delimited score file for offline evaluation. The header row is
/// `label` followed by one class name per column; each data row is an
/// integer label and one probability per class. Returns (labels, row-major
/// probabilities, class names).
pub fn read_score_tsv(path: &std::path::Path) -> Result<(Vec<usize>, Vec<f64>, Vec<String>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read scores {}", path.display()), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::invalid("read_score_tsv", "empty score file"))?;
    let mut cols = header.split('\t');
    if cols.next() != Some("label") {
        return Err(Error::invalid(
            "read_score_tsv",
            "header must start with a `label` column",
        ));
    }
    let names: Vec<String> = cols.map(|s| s.to_string()).collect();
    if names.len() < 2 {
        return Err(Error::invalid("read_score_tsv", "need at least two class columns"));
    }
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != names.len() + 1 {
            return Err(Error::invalid(
                "read_score_tsv",
                format!("line {}: expected {} fields, got {}", i + 1, names.len() + 1, fields.len()),
            ));
        }
        let label: usize = fields[0].parse().map_err(|_| {
            Error::invalid("read_score_tsv", format!("line {}: bad label `{}`", i + 1, fields[0]))
        })?;
        labels.push(label);
        for f in &fields[1..] {
            let p: f64 = f.parse().map_err(|_| {
                Error::invalid("read_score_tsv", format!("line {}: bad score `{f}`", i + 1))
            })?;
            probs.push(p);
        }
    }
    Ok((labels, probs, names))
}
