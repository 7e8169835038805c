//! Multi-label evaluation metrics, reported as "higher is better".
//!
//! Label rankings sort by descending score and break ties by ascending label
//! index. Samples or labels a metric cannot score (no positives, or no
//! negatives where pairs are needed) are skipped and counted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const HAMMING_THRESHOLD: f64 = 0.5;

/// Column order of the CSV row.
pub const CSV_HEADER: [&str; 6] = ["AP", "1-HL", "1-RL", "AUC", "1-OE", "1-Cov"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub one_minus_hl: f64,
    pub one_minus_rl: f64,
    pub auc: f64,
    pub one_minus_oe: f64,
    pub one_minus_cov: f64,
    /// Samples without any positive label (skipped by AP, 1-OE, 1-Cov).
    pub skipped_no_positive: usize,
    /// Samples skipped by 1-RL (all positive or all negative).
    pub skipped_rl_samples: usize,
    /// Labels skipped by AUC (constant column).
    pub skipped_auc_labels: usize,
}

impl MetricsReport {
    pub fn values(&self) -> [f64; 6] {
        [
            self.ap,
            self.one_minus_hl,
            self.one_minus_rl,
            self.auc,
            self.one_minus_oe,
            self.one_minus_cov,
        ]
    }

    pub fn csv_header() -> String {
        CSV_HEADER.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn check(p: &Matrix, y: &Matrix) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::dim("metrics", p.shape(), y.shape()));
    }
    if !y.is_binary() {
        return Err(Error::Contract("metric labels must be binary".into()));
    }
    Ok(())
}

/// 1-based rank of every label of `scores` (descending, ties by index).
fn ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut rank = vec![0; scores.len()];
    for (pos, &j) in order.iter().enumerate() {
        rank[j] = pos + 1;
    }
    rank
}

fn positives(labels: &[f64]) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, &y)| y == 1.0).map(|(j, _)| j).collect()
}

fn mean_or_undefined(sum: f64, count: usize, name: &'static str) -> Result<f64> {
    if count == 0 {
        Err(Error::UndefinedMetric(name))
    } else {
        Ok(sum / count as f64)
    }
}

pub fn average_precision(p: &Matrix, y: &Matrix) -> Result<f64> {
    check(p, y)?;
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..p.rows() {
        let pos = positives(y.row(i));
        if pos.is_empty() {
            continue;
        }
        let rank = ranks(p.row(i));
        let mut sample = 0.0;
        for &j in &pos {
            let above = pos.iter().filter(|&&k| rank[k] <= rank[j]).count();
            sample += above as f64 / rank[j] as f64;
        }
        sum += sample / pos.len() as f64;
        count += 1;
    }
    mean_or_undefined(sum, count, "average precision")
}

/// Returns `1 − HL`; scores at the threshold count as positive.
pub fn hamming(p: &Matrix, y: &Matrix, threshold: f64) -> Result<f64> {
    check(p, y)?;
    if p.is_empty() {
        return Err(Error::UndefinedMetric("hamming loss"));
    }
    let mismatches = p
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .filter(|(&s, &t)| (s >= threshold) != (t == 1.0))
        .count();
    Ok(1.0 - mismatches as f64 / p.len() as f64)
}

/// Returns `1 − RL`.
pub fn ranking_loss(p: &Matrix, y: &Matrix) -> Result<f64> {
    check(p, y)?;
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..p.rows() {
        let (s, t) = (p.row(i), y.row(i));
        let pos = positives(t);
        let neg: Vec<usize> = (0..t.len()).filter(|&j| t[j] == 0.0).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut bad = 0.0;
        for &a in &pos {
            for &b in &neg {
                if s[a] < s[b] {
                    bad += 1.0;
                } else if s[a] == s[b] {
                    bad += 0.5;
                }
            }
        }
        sum += bad / (pos.len() * neg.len()) as f64;
        count += 1;
    }
    mean_or_undefined(sum, count, "ranking loss").map(|rl| 1.0 - rl)
}

/// Label-wise macro AUC via midrank sums.
pub fn auc(p: &Matrix, y: &Matrix) -> Result<f64> {
    check(p, y)?;
    let n = p.rows();
    let mut sum = 0.0;
    let mut count = 0;
    for j in 0..p.cols() {
        let scores: Vec<f64> = (0..n).map(|i| p.get(i, j)).collect();
        let n_pos = (0..n).filter(|&i| y.get(i, j) == 1.0).count();
        let n_neg = n - n_pos;
        if n_pos == 0 || n_neg == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        // Doubled midranks keep every quantity an integer.
        let mut rank2 = vec![0usize; n];
        let mut start = 0;
        while start < n {
            let mut end = start;
            while end + 1 < n && scores[order[end + 1]] == scores[order[start]] {
                end += 1;
            }
            for &i in &order[start..=end] {
                rank2[i] = start + end + 2;
            }
            start = end + 1;
        }
        let pos_rank2: usize = (0..n).filter(|&i| y.get(i, j) == 1.0).map(|i| rank2[i]).sum();
        let u2 = pos_rank2 - n_pos * (n_pos + 1);
        sum += u2 as f64 / (2 * n_pos * n_neg) as f64;
        count += 1;
    }
    mean_or_undefined(sum, count, "auc")
}

/// Returns `1 − OE`; the top label is the lowest index among the maxima.
pub fn one_error(p: &Matrix, y: &Matrix) -> Result<f64> {
    check(p, y)?;
    let mut errors = 0;
    let mut count = 0;
    for i in 0..p.rows() {
        let t = y.row(i);
        if !t.contains(&1.0) {
            continue;
        }
        let rank = ranks(p.row(i));
        let top = rank.iter().position(|&r| r == 1).expect("nonempty row");
        if t[top] != 1.0 {
            errors += 1;
        }
        count += 1;
    }
    mean_or_undefined(errors as f64, count, "one error").map(|oe| 1.0 - oe)
}

/// Returns `1 − Cov` with `Cov_i = (deepest positive rank − 1) / c`.
pub fn coverage(p: &Matrix, y: &Matrix) -> Result<f64> {
    check(p, y)?;
    let c = p.cols() as f64;
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..p.rows() {
        let pos = positives(y.row(i));
        if pos.is_empty() {
            continue;
        }
        let rank = ranks(p.row(i));
        let deepest = pos.iter().map(|&j| rank[j]).max().unwrap();
        sum += (deepest - 1) as f64 / c;
        count += 1;
    }
    mean_or_undefined(sum, count, "coverage").map(|cov| 1.0 - cov)
}

pub fn evaluate_all(p: &Matrix, y: &Matrix) -> Result<MetricsReport> {
    check(p, y)?;
    let skipped_no_positive = (0..y.rows()).filter(|&i| !y.row(i).contains(&1.0)).count();
    let skipped_rl_samples = (0..y.rows())
        .filter(|&i| !(y.row(i).contains(&1.0) && y.row(i).contains(&0.0)))
        .count();
    let skipped_auc_labels = (0..y.cols())
        .filter(|&j| {
            let pos = (0..y.rows()).filter(|&i| y.get(i, j) == 1.0).count();
            pos == 0 || pos == y.rows()
        })
        .count();
    Ok(MetricsReport {
        ap: average_precision(p, y)?,
        one_minus_hl: hamming(p, y, HAMMING_THRESHOLD)?,
        one_minus_rl: ranking_loss(p, y)?,
        auc: auc(p, y)?,
        one_minus_oe: one_error(p, y)?,
        one_minus_cov: coverage(p, y)?,
        skipped_no_positive,
        skipped_rl_samples,
        skipped_auc_labels,
    })
}
