//! Confusion matrix, per-class precision/recall/F1 with macro and
//! weighted aggregates, one-vs-rest ROC-AUC, and report rendering.
//!
//! Zero-denominator metrics report 0.0 with an explicit undefined flag
//! instead of NaN, so reports on degenerate splits stay printable and
//! the information is preserved.

use crate::error::{Error, Result};

/// Row-major K x K counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
            names: (0..k).map(|i| format!("class {i}")).collect(),
        }
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.k {
            return Err(Error::config(format!(
                "confusion matrix has {} classes but {} names",
                self.k,
                names.len()
            )));
        }
        self.names = names;
        Ok(self)
    }

    /// Count `(true, predicted)` pairs.
    pub fn from_pairs(true_labels: &[usize], pred_labels: &[usize], k: usize) -> Result<Self> {
        if true_labels.len() != pred_labels.len() {
            return Err(Error::shape(format!(
                "confusion: {} true labels vs {} predictions",
                true_labels.len(),
                pred_labels.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(k);
        for (&t, &p) in true_labels.iter().zip(pred_labels) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, true_label: usize, pred_label: usize) -> Result<()> {
        if true_label >= self.k || pred_label >= self.k {
            return Err(Error::data(format!(
                "confusion: pair ({true_label}, {pred_label}) outside 0..{}",
                self.k
            )));
        }
        self.counts[true_label * self.k + pred_label] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn at(&self, true_label: usize, pred_label: usize) -> u64 {
        self.counts[true_label * self.k + pred_label]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row support: samples whose true class is `label`.
    pub fn support(&self, label: usize) -> u64 {
        (0..self.k).map(|j| self.at(label, j)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for name in &self.names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for i in 0..self.k {
            out.push_str(&self.names[i]);
            for j in 0..self.k {
                out.push_str(&format!(",{}", self.at(i, j)));
            }
            out.push('\n');
        }
        out
    }

    pub fn render_text(&self) -> String {
        let label_w = self.names.iter().map(|n| n.len()).max().unwrap_or(0).max(9);
        let cell_w = self
            .counts
            .iter()
            .map(|c| c.to_string().len())
            .max()
            .unwrap_or(1)
            .max(self.names.iter().map(|n| n.len()).max().unwrap_or(1))
            + 2;
        let mut out = format!("{:label_w$}", "true\\pred");
        for name in &self.names {
            out.push_str(&format!("{name:>cell_w$}"));
        }
        out.push('\n');
        for i in 0..self.k {
            out.push_str(&format!("{:label_w$}", self.names[i]));
            for j in 0..self.k {
                out.push_str(&format!("{:>cell_w$}", self.at(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// One row of the classification report. `precision_defined` /
/// `recall_defined` are false when the respective denominator was zero
/// (the value is then reported as 0.0).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

impl ClassMetrics {
    pub fn defined(precision: f64, recall: f64, f1: f64, support: u64) -> Self {
        ClassMetrics {
            precision,
            recall,
            f1,
            support,
            precision_defined: true,
            recall_defined: true,
        }
    }
}

/// Per-class metrics plus aggregate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub names: Vec<String>,
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub total: u64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

impl ClassReport {
    /// Aggregate existing per-class rows. Macro averages are unweighted
    /// means (undefined metrics counted as their reported 0.0); weighted
    /// averages use supports. Accuracy is the weighted recall, which for
    /// single-label classification equals trace/total.
    pub fn from_rows(names: Vec<String>, classes: Vec<ClassMetrics>) -> Result<Self> {
        if names.len() != classes.len() || classes.is_empty() {
            return Err(Error::shape(format!(
                "class report: {} names vs {} rows",
                names.len(),
                classes.len()
            )));
        }
        let total: u64 = classes.iter().map(|c| c.support).sum();
        if total == 0 {
            return Err(Error::data("class report: zero total support".to_string()));
        }
        let k = classes.len() as f64;
        let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
            classes.iter().map(|c| f(c)).sum::<f64>() / k
        };
        let weighted = |f: &dyn Fn(&ClassMetrics) -> f64| {
            classes.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
        };
        let weighted_recall = weighted(&|c| c.recall);
        Ok(ClassReport {
            names,
            accuracy: weighted_recall,
            total,
            macro_precision: mean(&|c| c.precision),
            macro_recall: mean(&|c| c.recall),
            macro_f1: mean(&|c| c.f1),
            weighted_precision: weighted(&|c| c.precision),
            weighted_recall,
            weighted_f1: weighted(&|c| c.f1),
            classes,
        })
    }

    pub fn any_undefined(&self) -> bool {
        self.classes.iter().any(|c| !c.precision_defined || !c.recall_defined)
    }
}

/// Compute the full report from a confusion matrix.
pub fn class_report(cm: &ConfusionMatrix) -> Result<ClassReport> {
    if cm.total() == 0 {
        return Err(Error::data("class report: empty confusion matrix".to_string()));
    }
    let k = cm.num_classes();
    let mut rows = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.at(c, c);
        let predicted: u64 = (0..k).map(|i| cm.at(i, c)).sum();
        let support = cm.support(c);
        let precision_defined = predicted > 0;
        let recall_defined = support > 0;
        let precision = if precision_defined { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if recall_defined { tp as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        rows.push(ClassMetrics { precision, recall, f1, support, precision_defined, recall_defined });
    }
    ClassReport::from_rows(cm.names().to_vec(), rows)
}

/// One-vs-rest ROC analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    /// Per-class AUC; `None` when the class lacks positives or negatives.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the defined classes.
    pub macro_auc: f64,
    /// Per-class (FPR, TPR) points from (0,0) to (1,1); empty for
    /// undefined classes.
    pub curves: Vec<Vec<(f64, f64)>>,
}

/// AUC by the rank (Mann-Whitney) formulation: average rank of the
/// positives with ties sharing credit equally.
fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie block spanning ranks i+1..=j+1 gives
        // every member the average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Some(auc)
}

fn roc_curve(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg, tp as f64 / n_pos));
    }
    points
}

/// One-vs-rest AUC for every class of an `N x K` score matrix.
pub fn roc_auc_ovr(true_labels: &[usize], scores: &[f64], k: usize) -> Result<RocResult> {
    if k == 0 || true_labels.len() * k != scores.len() {
        return Err(Error::shape(format!(
            "roc: {} labels with k = {k} do not match {} scores",
            true_labels.len(),
            scores.len()
        )));
    }
    if let Some(&bad) = true_labels.iter().find(|&&t| t >= k) {
        return Err(Error::data(format!("roc: label {bad} outside 0..{k}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("roc: non-finite score".to_string()));
    }
    let n = true_labels.len();
    let mut per_class = Vec::with_capacity(k);
    let mut curves = Vec::with_capacity(k);
    for c in 0..k {
        let class_scores: Vec<f64> = (0..n).map(|i| scores[i * k + c]).collect();
        let positive: Vec<bool> = true_labels.iter().map(|&t| t == c).collect();
        match auc_binary(&class_scores, &positive) {
            Some(auc) => {
                per_class.push(Some(auc));
                curves.push(roc_curve(&class_scores, &positive));
            }
            None => {
                per_class.push(None);
                curves.push(Vec::new());
            }
        }
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|&a| a).collect();
    if defined.is_empty() {
        return Err(Error::data(
            "roc: every class lacks positives or negatives; AUC undefined".to_string(),
        ));
    }
    let macro_auc = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(RocResult { per_class, macro_auc, curves })
}

/// Two-decimal half-up rounding used by the rendered report.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Fixed-width report in the classification-report layout: one row per
/// class, then Accuracy, Macro Avg, and Weighted Avg. Undefined metrics
/// print as 0.00 and the affected rows are marked with `*`.
pub fn render_report(report: &ClassReport) -> String {
    let label_w = report
        .names
        .iter()
        .map(|n| n.len() + 2)
        .chain(["Weighted Avg".len() + 2].into_iter())
        .max()
        .unwrap();
    let mut out = format!(
        "{:<label_w$}{:>10}{:>10}{:>10}{:>9}\n",
        "Label", "Precision", "Recall", "F1-Score", "Support"
    );
    for (name, row) in report.names.iter().zip(&report.classes) {
        let mark = if row.precision_defined && row.recall_defined { "" } else { "*" };
        out.push_str(&format!(
            "{:<label_w$}{:>10.2}{:>10.2}{:>10.2}{:>9}\n",
            format!("{name}{mark}"),
            round2(row.precision),
            round2(row.recall),
            round2(row.f1),
            row.support
        ));
    }
    out.push_str(&format!(
        "{:<label_w$}{:>10}{:>10}{:>10.2}{:>9}\n",
        "Accuracy",
        "-",
        "-",
        round2(report.accuracy),
        report.total
    ));
    out.push_str(&format!(
        "{:<label_w$}{:>10.2}{:>10.2}{:>10.2}{:>9}\n",
        "Macro Avg",
        round2(report.macro_precision),
        round2(report.macro_recall),
        round2(report.macro_f1),
        report.total
    ));
    out.push_str(&format!(
        "{:<label_w$}{:>10.2}{:>10.2}{:>10.2}{:>9}\n",
        "Weighted Avg",
        round2(report.weighted_precision),
        round2(report.weighted_recall),
        round2(report.weighted_f1),
        report.total
    ));
    if report.any_undefined() {
        out.push_str("* undefined metric (zero denominator) reported as 0.00\n");
    }
    out
}

/// Full-precision CSV companion to the rendered text.
pub fn report_csv(report: &ClassReport) -> String {
    let mut out = String::from("label,precision,recall,f1,support\n");
    for (name, row) in report.names.iter().zip(&report.classes) {
        out.push_str(&format!(
            "{name},{},{},{},{}\n",
            row.precision, row.recall, row.f1, row.support
        ));
    }
    out.push_str(&format!("accuracy,,,{},{}\n", report.accuracy, report.total));
    out.push_str(&format!(
        "macro_avg,{},{},{},{}\n",
        report.macro_precision, report.macro_recall, report.macro_f1, report.total
    ));
    out.push_str(&format!(
        "weighted_avg,{},{},{},{}\n",
        report.weighted_precision, report.weighted_recall, report.weighted_f1, report.total
    ));
    out
}
