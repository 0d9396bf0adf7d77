//! Shared helpers for integration tests: independent oracles and small
//! fixtures.
#![allow(dead_code)]

use mccl::data::{ClueDictionary, Dataset, SyntheticSpec};
use ndarray::{Array2, ArrayView1};

/// Index of the dictionary row (clues first, then background) with the
/// largest dot product against `x`.
fn nearest_entry(x: ArrayView1<f64>, clues: &Array2<f64>, background: &Array2<f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, row) in clues.rows().into_iter().chain(background.rows()).enumerate() {
        let d = row.dot(&x);
        if d > best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Classifies every sample by looking up the generator's own clue map:
/// class `c` is predicted when each of its clues is the nearest dictionary
/// entry of some patch in at least half of the stages. Returns `N × C` 0/1.
pub fn clue_oracle(data: &Dataset, dict: &ClueDictionary) -> Array2<f64> {
    let c = dict.class_clues.len();
    let num_clues = dict.clues[0].nrows();
    let stages = dict.clues.len();
    let mut out = Array2::zeros((data.len(), c));
    for (i, sample) in data.samples.iter().enumerate() {
        let mut seen = vec![0usize; num_clues];
        for (s, fmap) in sample.features_by_stage.iter().enumerate() {
            let mut here = vec![false; num_clues];
            for row in fmap.patches().rows() {
                let k = nearest_entry(row, &dict.clues[s], &dict.background[s]);
                if k < num_clues {
                    here[k] = true;
                }
            }
            for (k, h) in here.iter().enumerate() {
                seen[k] += *h as usize;
            }
        }
        for cls in 0..c {
            if dict.class_clues[cls].iter().all(|&k| 2 * seen[k] >= stages) {
                out[[i, cls]] = 1.0;
            }
        }
    }
    out
}

/// Samples F1 computed directly from 0/1 matrices, 0/0 counted as 0.
pub fn samples_f1(pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (p, t) in pred.rows().into_iter().zip(truth.rows()) {
        let tp = p.iter().zip(t.iter()).filter(|(a, b)| **a > 0.5 && **b > 0.5).count();
        let np = p.iter().filter(|a| **a > 0.5).count();
        let nt = t.iter().filter(|a| **a > 0.5).count();
        if np + nt > 0 {
            total += 2.0 * tp as f64 / (np + nt) as f64;
        }
    }
    total / pred.nrows() as f64
}

/// The desk-scale task used by the end-to-end checks.
pub fn desk_spec(noise_std: f64) -> SyntheticSpec {
    SyntheticSpec {
        noise_std,
        ..SyntheticSpec::default()
    }
}

/// Macro, micro and samples F1 plus per-class F1 from explicit loops.
pub fn f1_oracle(scores: &Array2<f64>, truth: &Array2<f64>, t: f64) -> (f64, f64, f64, Vec<f64>) {
    let (n, c) = scores.dim();
    let f = |tp: f64, fp: f64, fn_: f64| if tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    let mut per = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0);
    for j in 0..c {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let p = scores[[i, j]] >= t;
            let y = truth[[i, j]] > 0.5;
            match (p, y) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        per.push(f(tp, fp, fn_));
    }
    let mut samples = 0.0;
    for i in 0..n {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for j in 0..c {
            let p = scores[[i, j]] >= t;
            let y = truth[[i, j]] > 0.5;
            tp += (p && y) as u8 as f64;
            fp += (p && !y) as u8 as f64;
            fn_ += (!p && y) as u8 as f64;
        }
        samples += f(tp, fp, fn_);
    }
    let macro_ = per.iter().sum::<f64>() / c as f64;
    (macro_, f(tp_all, fp_all, fn_all), samples / n as f64, per)
}

/// Rank of every item: position after sorting by score descending, earlier
/// index first on ties, counted from one.
fn ranks(scores: &[f64]) -> Vec<usize> {
    (0..scores.len())
        .map(|i| {
            1 + (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
        })
        .collect()
}

/// Mean over positives of precision at that positive's rank.
pub fn ap_oracle(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let r = ranks(scores);
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| truth[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| pos.iter().filter(|&&j| r[j] <= r[i]).count() as f64 / r[i] as f64)
        .sum();
    Some(total / pos.len() as f64)
}

/// Fraction of positive/negative pairs ordered correctly, ties counting half.
pub fn auc_oracle(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let (mut hits, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if truth[i] && !truth[j] {
                pairs += 1.0;
                hits += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| hits / pairs)
}

/// Whether integer budgets with `K_c >= 1` and `|K_c - q_c| < 1` summing
/// to `k` exist for real quotas `q`.
pub fn allocation_feasible(quotas: &[f64], k: usize) -> bool {
    let lo: usize = quotas.iter().map(|q| (q.floor() as usize).max(1)).sum();
    let hi: usize = quotas.iter().map(|q| (q.ceil() as usize).max(1)).sum();
    lo <= k && k <= hi
}

/// Inverse-frequency quotas with zero counts treated as one.
pub fn quota_oracle(counts: &[usize], k: usize) -> Vec<f64> {
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let s: f64 = inv.iter().sum();
    inv.iter().map(|w| w / s * k as f64).collect()
}
