//! Confusion matrices, top-k accuracy, one-vs-rest ROC analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    Length { what: &'static str, got: usize, expected: usize },
    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: usize, classes: usize },
    #[error("k = {k} invalid for {classes} classes")]
    InvalidK { k: usize, classes: usize },
    #[error("ROC needs at least one positive and one negative example")]
    Degenerate,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("no examples to score")]
    Empty,
}

/// `K×K` counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.get(i, i)).sum()
    }

    /// Overall accuracy; `None` when empty.
    pub fn accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| self.trace() as f64 / t as f64)
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes().max(1)).map(<[u64]>::to_vec).collect()
    }
}

fn default_names(k: usize) -> Vec<String> {
    (0..k).map(|i| i.to_string()).collect()
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix, MetricsError> {
    confusion_named(preds, labels, default_names(k))
}

pub fn confusion_named(preds: &[usize], labels: &[usize], class_names: Vec<String>) -> Result<ConfusionMatrix, MetricsError> {
    let k = class_names.len();
    if preds.len() != labels.len() {
        return Err(MetricsError::Length {
            what: "predictions",
            got: preds.len(),
            expected: labels.len(),
        });
    }
    let mut counts = vec![0u64; k * k];
    for (&p, &t) in preds.iter().zip(labels) {
        for id in [p, t] {
            if id >= k {
                return Err(MetricsError::ClassOutOfRange { id, classes: k });
            }
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { class_names, counts })
}

/// Index of the highest score; the lower index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_probs(probs: &[Vec<f64>], labels: &[usize]) -> Result<usize, MetricsError> {
    if probs.len() != labels.len() {
        return Err(MetricsError::Length {
            what: "score rows",
            got: probs.len(),
            expected: labels.len(),
        });
    }
    let k = probs.first().map_or(0, Vec::len);
    for (i, (row, &y)) in probs.iter().zip(labels).enumerate() {
        if row.len() != k {
            return Err(MetricsError::Length {
                what: "score row",
                got: row.len(),
                expected: k,
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite(i));
        }
        if y >= k {
            return Err(MetricsError::ClassOutOfRange { id: y, classes: k });
        }
    }
    Ok(k)
}

/// Fraction of rows whose true class is among the `k` highest scores, ranking
/// tied scores by lower class id first.
pub fn topk_accuracy(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64, MetricsError> {
    let classes = check_probs(probs, labels)?;
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    if k == 0 || k > classes {
        return Err(MetricsError::InvalidK { k, classes });
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let s = row[y];
            let rank = row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < y)).count();
            rank < k
        })
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

/// One-vs-rest counts and ratios for one class. Ratios with a zero
/// denominator are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn per_class_report(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    let k = cm.num_classes();
    let total = cm.total();
    (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..k).map(|t| cm.get(t, c)).sum();
            let (fn_, fp) = (row - tp, col - tp);
            let tn = total - tp - fn_ - fp;
            ClassMetrics {
                name: cm.class_names[c].clone(),
                tp,
                fp,
                fn_,
                tn,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
                accuracy: ratio(tp + tn, total),
            }
        })
        .collect()
}

/// ROC points at descending thresholds, starting from a `+∞` sentinel at
/// `(0, 0)` and ending at the lowest score at `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    pub positive: String,
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

/// Example counts as predicted positive when `score >= threshold`.
pub fn roc_curve(scores: &[f64], labels: &[bool], positive: &str) -> Result<RocCurve, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length {
            what: "scores",
            got: scores.len(),
            expected: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::Degenerate);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = RocCurve {
        positive: positive.to_string(),
        thresholds: vec![f64::INFINITY],
        fpr: vec![0.0],
        tpr: vec![0.0],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(t);
        curve.fpr.push(fp as f64 / neg as f64);
        curve.tpr.push(tp as f64 / pos as f64);
    }
    Ok(curve)
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    let mut a = 0.0;
    for i in 1..curve.fpr.len() {
        a += (curve.fpr[i] - curve.fpr[i - 1]) * (curve.tpr[i] + curve.tpr[i - 1]) / 2.0;
    }
    a.clamp(0.0, 1.0)
}

/// How the operating point is chosen from a curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffRule {
    /// Minimal Euclidean distance to `(fpr 0, tpr 1)`.
    #[default]
    ClosestToIdeal,
    /// Maximal `tpr − fpr`.
    Youden,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CutOff {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// `sqrt(fpr² + (1 − tpr)²)`.
    pub distance: f64,
}

pub fn optimal_cutoff(curve: &RocCurve) -> CutOff {
    cutoff_with(curve, CutoffRule::ClosestToIdeal)
}

/// Best point under `rule`; ties go to the higher threshold.
pub fn cutoff_with(curve: &RocCurve, rule: CutoffRule) -> CutOff {
    let score = |i: usize| match rule {
        CutoffRule::ClosestToIdeal => -(curve.fpr[i].powi(2) + (1.0 - curve.tpr[i]).powi(2)).sqrt(),
        CutoffRule::Youden => curve.tpr[i] - curve.fpr[i],
    };
    let mut best = 0;
    for i in 1..curve.thresholds.len() {
        if score(i) > score(best) {
            best = i;
        }
    }
    CutOff {
        threshold: curve.thresholds[best],
        tpr: curve.tpr[best],
        fpr: curve.fpr[best],
        distance: (curve.fpr[best].powi(2) + (1.0 - curve.tpr[best]).powi(2)).sqrt(),
    }
}

/// ROC analysis of one class against the rest; `None` fields mean the class
/// lacks positives or negatives in the labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRoc {
    pub name: String,
    pub positives: usize,
    pub negatives: usize,
    pub curve: Option<RocCurve>,
    pub auc: Option<f64>,
    pub cutoff: Option<CutOff>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OvrReport {
    pub classes: Vec<ClassRoc>,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
}

/// A named column of reference AUCs keyed by class name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReferenceColumn {
    pub title: String,
    pub values: BTreeMap<String, f64>,
}

pub fn one_vs_rest_report(probs: &[Vec<f64>], labels: &[usize], class_names: &[String]) -> Result<OvrReport, MetricsError> {
    one_vs_rest_report_with(probs, labels, class_names, CutoffRule::ClosestToIdeal)
}

pub fn one_vs_rest_report_with(probs: &[Vec<f64>], labels: &[usize], class_names: &[String], rule: CutoffRule) -> Result<OvrReport, MetricsError> {
    let k = class_names.len();
    if k < 2 {
        return Err(MetricsError::TooFewClasses(k));
    }
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let got = check_probs(probs, labels)?;
    if got != k {
        return Err(MetricsError::Length {
            what: "score columns",
            got,
            expected: k,
        });
    }
    let classes = (0..k)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
            let bin: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            let positives = bin.iter().filter(|&&b| b).count();
            let curve = roc_curve(&scores, &bin, &class_names[c]).ok();
            ClassRoc {
                name: class_names[c].clone(),
                positives,
                negatives: bin.len() - positives,
                auc: curve.as_ref().map(auc),
                cutoff: curve.as_ref().map(|cv| cutoff_with(cv, rule)),
                curve,
            }
        })
        .collect();
    let preds: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    let confusion = confusion_named(&preds, labels, class_names.to_vec())?;
    Ok(OvrReport {
        classes,
        accuracy: confusion.accuracy().unwrap_or(0.0),
        per_class: per_class_report(&confusion),
        confusion,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

impl OvrReport {
    /// One row per class: name, any reference columns, then this model's AUC.
    /// Unavailable values print as `-`.
    pub fn render_table(&self, references: &[ReferenceColumn]) -> String {
        let name_w = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(0).max("Total accuracy".len()) + 2;
        let mut titles: Vec<&str> = references.iter().map(|r| r.title.as_str()).collect();
        titles.push("AUC");
        let col_w = titles.iter().map(|t| t.len()).max().unwrap_or(0).max(4) + 2;
        let mut s = String::new();
        let _ = write!(s, "{:<name_w$}", "Lesion");
        for t in &titles {
            let _ = write!(s, "{t:>col_w$}");
        }
        s.push('\n');
        for c in &self.classes {
            let _ = write!(s, "{:<name_w$}", c.name);
            for r in references {
                let _ = write!(s, "{:>col_w$}", cell(r.values.get(&c.name).copied()));
            }
            let _ = writeln!(s, "{:>col_w$}", cell(c.auc));
        }
        let _ = write!(s, "{:<name_w$}", "Total accuracy");
        for _ in references {
            let _ = write!(s, "{:>col_w$}", "");
        }
        let _ = writeln!(s, "{:>col_w$}", format!("{:.2}", self.accuracy));
        s
    }

    /// Operating points per class: threshold, sensitivity, specificity and
    /// distance to the ideal corner.
    pub fn render_cutoffs(&self) -> String {
        let name_w = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(0) + 2;
        let mut s = format!("{:<name_w$}{:>11}{:>13}{:>13}{:>10}\n", "Lesion", "Threshold", "Sensitivity", "Specificity", "Distance");
        for c in &self.classes {
            match &c.cutoff {
                Some(k) => {
                    let _ = writeln!(
                        s,
                        "{:<name_w$}{:>11.4}{:>13.2}{:>13.2}{:>10.4}",
                        c.name,
                        k.threshold,
                        k.tpr,
                        1.0 - k.fpr,
                        k.distance
                    );
                }
                None => {
                    let _ = writeln!(s, "{:<name_w$}{:>11}{:>13}{:>13}{:>10}", c.name, "-", "-", "-", "-");
                }
            }
        }
        s
    }

    /// One JSON object per class: name, auc, cutoff threshold, tpr, fpr.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for c in &self.classes {
            let v = serde_json::json!({
                "name": c.name,
                "auc": c.auc,
                "threshold": c.cutoff.as_ref().map(|k| json_num(k.threshold)),
                "tpr": c.cutoff.as_ref().map(|k| k.tpr),
                "fpr": c.cutoff.as_ref().map(|k| k.fpr),
            });
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }

    /// `class,threshold,fpr,tpr` rows for every available curve.
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("class,threshold,fpr,tpr\n");
        for c in &self.classes {
            if let Some(cv) = &c.curve {
                for i in 0..cv.thresholds.len() {
                    let t = if cv.thresholds[i].is_infinite() { "inf".to_string() } else { cv.thresholds[i].to_string() };
                    let _ = writeln!(s, "\"{}\",{t},{},{}", c.name.replace('"', "\"\""), cv.fpr[i], cv.tpr[i]);
                }
            }
        }
        s
    }
}

/// JSON has no infinity; the sentinel threshold is written as a string.
fn json_num(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!("inf")
    }
}
