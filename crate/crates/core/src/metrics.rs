//! Training loss and evaluation metrics.
//!
//! Score and truth matrices are `N × C` (samples by classes); truths are
//! 0/1. Predictions are positive when `score >= threshold`.

use std::fmt;

use ndarray::{Array2, ArrayView1};

use crate::data::LabelMode;
use crate::error::{MccError, Result};
use crate::graph::{asymmetric_term, PROB_CLAMP};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Probabilities and binary truths for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    probs: Vec<f64>,
    truth: Vec<bool>,
}

impl PredictionVector {
    pub fn new(probs: Vec<f64>, truth: Vec<bool>) -> Result<Self> {
        if probs.len() != truth.len() {
            return Err(MccError::shape(format!(
                "{} probabilities for {} labels",
                probs.len(),
                truth.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
            return Err(MccError::Numerical(format!("probability {p} outside [0, 1]")));
        }
        Ok(PredictionVector { probs, truth })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn truth(&self) -> &[bool] {
        &self.truth
    }

    pub fn loss(&self, gamma_pos: f64, gamma_neg: f64) -> f64 {
        let y: Vec<f64> = self.truth.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        asymmetric_loss(&self.probs, &y, gamma_pos, gamma_neg)
    }
}

/// Mean over entries of `-[y (1-p)^γ+ ln p + (1-y) p^γ− ln(1-p)]`, with `p`
/// clamped to `[1e-8, 1-1e-8]`.
pub fn asymmetric_loss(p: &[f64], y: &[f64], gamma_pos: f64, gamma_neg: f64) -> f64 {
    assert_eq!(p.len(), y.len(), "loss operand lengths");
    if p.is_empty() {
        return 0.0;
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| asymmetric_term(p, y, gamma_pos, gamma_neg, PROB_CLAMP))
        .sum();
    total / p.len() as f64
}

fn check_pair(scores: &Array2<f64>, truth: &Array2<f64>) -> Result<()> {
    if scores.dim() != truth.dim() {
        return Err(MccError::shape(format!(
            "scores are {:?}, truths are {:?}",
            scores.dim(),
            truth.dim()
        )));
    }
    if scores.nrows() == 0 {
        return Err(MccError::Data("metrics need at least one sample".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(MccError::Numerical("non-finite score".into()));
    }
    Ok(())
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Confusion counts that can be accumulated over shards and merged.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct F1Counts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    pub sample_f1_sum: f64,
    pub samples: usize,
}

impl F1Counts {
    pub fn new(num_classes: usize) -> Self {
        F1Counts {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            sample_f1_sum: 0.0,
            samples: 0,
        }
    }

    pub fn add_sample(&mut self, scores: ArrayView1<f64>, truth: ArrayView1<f64>, threshold: f64) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (c, (&s, &y)) in scores.iter().zip(truth.iter()).enumerate() {
            match (s >= threshold, y > 0.5) {
                (true, true) => {
                    self.tp[c] += 1;
                    tp += 1;
                }
                (true, false) => {
                    self.fp[c] += 1;
                    fp += 1;
                }
                (false, true) => {
                    self.fn_[c] += 1;
                    fn_ += 1;
                }
                (false, false) => {}
            }
        }
        self.sample_f1_sum += f1(tp, fp, fn_);
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &F1Counts) {
        for c in 0..self.tp.len() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.sample_f1_sum += other.sample_f1_sum;
        self.samples += other.samples;
    }

    pub fn scores(&self) -> F1Scores {
        let per_class: Vec<f64> = (0..self.tp.len())
            .map(|c| f1(self.tp[c], self.fp[c], self.fn_[c]))
            .collect();
        let macro_f1 = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().sum::<f64>() / per_class.len() as f64
        };
        let sum = |v: &[usize]| v.iter().sum::<usize>();
        F1Scores {
            macro_f1,
            micro_f1: f1(sum(&self.tp), sum(&self.fp), sum(&self.fn_)),
            samples_f1: if self.samples == 0 {
                0.0
            } else {
                self.sample_f1_sum / self.samples as f64
            },
            per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub samples_f1: f64,
    pub per_class: Vec<f64>,
}

pub fn f1_suite(scores: &Array2<f64>, truth: &Array2<f64>, threshold: f64) -> Result<F1Scores> {
    check_pair(scores, truth)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MccError::config(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut counts = F1Counts::new(scores.ncols());
    for (s, y) in scores.rows().into_iter().zip(truth.rows()) {
        counts.add_sample(s, y, threshold);
    }
    Ok(counts.scores())
}

/// Sample order by descending score, ties by ascending sample index.
fn ranking(scores: ArrayView1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Mean precision at each positive; `None` for a class without positives.
pub fn average_precision(scores: ArrayView1<f64>, truth: ArrayView1<f64>) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if truth[i] > 0.5 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

/// mAP over classes with at least one positive, plus per-class AP.
pub fn mean_average_precision(scores: &Array2<f64>, truth: &Array2<f64>) -> Result<(f64, Vec<Option<f64>>)> {
    check_pair(scores, truth)?;
    let per_class: Vec<Option<f64>> = (0..scores.ncols())
        .map(|c| average_precision(scores.column(c), truth.column(c)))
        .collect();
    let skipped: Vec<usize> = (0..per_class.len()).filter(|&c| per_class[c].is_none()).collect();
    if !skipped.is_empty() {
        log::info!("classes without positives skipped in mAP: {skipped:?}");
    }
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(MccError::Data("no class has a positive sample; mAP is undefined".into()));
    }
    Ok((vals.iter().sum::<f64>() / vals.len() as f64, per_class))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` if either side is empty.
pub fn roc_auc(scores: ArrayView1<f64>, truth: ArrayView1<f64>) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mid-ranks over tied groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut n_pos = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if truth[k] > 0.5 {
                rank_sum_pos += mid;
                n_pos += 1;
            }
        }
        i = j + 1;
    }
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Fraction of samples whose top-scoring class is a true label. In
/// multi-class mode this is the usual argmax accuracy.
pub fn top1_accuracy(scores: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let hits = scores
        .rows()
        .into_iter()
        .zip(truth.rows())
        .filter(|(s, y)| {
            let mut best = 0;
            for c in 1..s.len() {
                if s[c] > s[best] {
                    best = c;
                }
            }
            y[best] > 0.5
        })
        .count();
    hits as f64 / scores.nrows() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyAuc {
    pub accuracy: f64,
    pub macro_auc: Option<f64>,
    pub per_class_auc: Vec<Option<f64>>,
}

pub fn accuracy_and_auc(scores: &Array2<f64>, truth: &Array2<f64>, mode: LabelMode) -> Result<AccuracyAuc> {
    check_pair(scores, truth)?;
    if mode == LabelMode::MultiClass {
        for (i, row) in truth.rows().into_iter().enumerate() {
            if row.iter().filter(|&&v| v > 0.5).count() != 1 {
                return Err(MccError::Data(format!("sample {i} is not one-hot in multi-class mode")));
            }
        }
    }
    let per_class_auc: Vec<Option<f64>> = (0..scores.ncols())
        .map(|c| roc_auc(scores.column(c), truth.column(c)))
        .collect();
    let skipped: Vec<usize> = (0..per_class_auc.len()).filter(|&c| per_class_auc[c].is_none()).collect();
    if !skipped.is_empty() {
        log::info!("classes lacking positives or negatives skipped in AUC: {skipped:?}");
    }
    let vals: Vec<f64> = per_class_auc.iter().flatten().copied().collect();
    let macro_auc = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    Ok(AccuracyAuc {
        accuracy: top1_accuracy(scores, truth),
        macro_auc,
        per_class_auc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub samples_f1: f64,
    pub map: f64,
    pub accuracy: f64,
    pub macro_auc: Option<f64>,
    pub per_class_f1: Vec<f64>,
    pub per_class_ap: Vec<Option<f64>>,
}

pub fn compute_metrics(
    scores: &Array2<f64>,
    truth: &Array2<f64>,
    mode: LabelMode,
    threshold: f64,
) -> Result<MetricsReport> {
    let f = f1_suite(scores, truth, threshold)?;
    let (map, per_class_ap) = mean_average_precision(scores, truth)?;
    let aa = accuracy_and_auc(scores, truth, mode)?;
    Ok(MetricsReport {
        threshold,
        macro_f1: f.macro_f1,
        micro_f1: f.micro_f1,
        samples_f1: f.samples_f1,
        map,
        accuracy: aa.accuracy,
        macro_auc: aa.macro_auc,
        per_class_f1: f.per_class,
        per_class_ap,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

impl MetricsReport {
    /// Machine-readable `key: value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("threshold: {}\n", self.threshold));
        out.push_str(&format!("macro_f1: {}\n", self.macro_f1));
        out.push_str(&format!("micro_f1: {}\n", self.micro_f1));
        out.push_str(&format!("samples_f1: {}\n", self.samples_f1));
        out.push_str(&format!("map: {}\n", self.map));
        out.push_str(&format!("accuracy: {}\n", self.accuracy));
        out.push_str(&format!("macro_auc: {}\n", opt(self.macro_auc)));
        for (c, v) in self.per_class_f1.iter().enumerate() {
            out.push_str(&format!("f1.{c}: {v}\n"));
        }
        for (c, v) in self.per_class_ap.iter().enumerate() {
            out.push_str(&format!("ap.{c}: {}\n", opt(*v)));
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        writeln!(f, "{:<12} {:>7}", "metric", "value")?;
        writeln!(f, "{:<12} {:>7}", "Macro F1", pct(self.macro_f1))?;
        writeln!(f, "{:<12} {:>7}", "Micro F1", pct(self.micro_f1))?;
        writeln!(f, "{:<12} {:>7}", "Samples F1", pct(self.samples_f1))?;
        writeln!(f, "{:<12} {:>7}", "mAP", pct(self.map))?;
        writeln!(f, "{:<12} {:>7}", "ACC", pct(self.accuracy))?;
        match self.macro_auc {
            Some(a) => writeln!(f, "{:<12} {:>7}", "AUC", pct(a))?,
            None => writeln!(f, "{:<12} {:>7}", "AUC", "n/a")?,
        }
        write!(f, "(threshold {})", self.threshold)
    }
}
