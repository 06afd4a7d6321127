//! Threshold-free detection metrics. The positive class is OOD and a higher
//! score means "more OOD" everywhere.

use std::fmt::Write as _;

use crate::error::{Error, Result};

fn check(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyInput("metrics need nonempty positive and negative scores"));
    }
    Ok(())
}

/// Distinct thresholds in descending order with the cumulative counts of
/// positives and negatives scoring at or above each.
fn sweep(pos: &[f64], neg: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, &(s, is_pos)) in all.iter().enumerate() {
        if is_pos {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = all.get(i + 1).is_none_or(|next| next.0.total_cmp(&s).is_ne());
        if last_of_group {
            out.push((s, tp, fp));
        }
    }
    out
}

/// Mann–Whitney statistic `(#{pos > neg} + ½·#{pos = neg}) / (|pos|·|neg|)`.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check(pos, neg)?;
    // twice the statistic in integers: each tie group adds 2·p·(neg below) + p·q
    let mut twice: u128 = 0;
    let mut neg_below = neg.len() as u128;
    let mut prev = (0usize, 0usize);
    for (_, tp, fp) in sweep(pos, neg) {
        let (p, q) = ((tp - prev.0) as u128, (fp - prev.1) as u128);
        neg_below -= q;
        twice += 2 * p * neg_below + p * q;
        prev = (tp, fp);
    }
    Ok(twice as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64)
}

/// Step-wise area under the precision–recall curve: `Σ precision·Δrecall`
/// over distinct thresholds.
pub fn auprc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check(pos, neg)?;
    let n = pos.len() as f64;
    let (mut area, mut prev_recall) = (0.0, 0.0);
    for (_, tp, fp) in sweep(pos, neg) {
        let recall = tp as f64 / n;
        if tp > 0 {
            area += tp as f64 / (tp + fp) as f64 * (recall - prev_recall);
        }
        prev_recall = recall;
    }
    Ok(area)
}

/// Smallest false-positive rate among thresholds whose true-positive rate
/// reaches `target_tpr`; equal scores are flagged together.
pub fn fpr_at_tpr(pos: &[f64], neg: &[f64], target_tpr: f64) -> Result<f64> {
    check(pos, neg)?;
    if !(0.0..=1.0).contains(&target_tpr) {
        return Err(Error::Domain(format!("target TPR {target_tpr} outside [0, 1]")));
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    for (_, tp, fp) in sweep(pos, neg) {
        if tp as f64 / np >= target_tpr {
            return Ok(fp as f64 / nn);
        }
    }
    Ok(1.0)
}

pub fn fpr80(pos: &[f64], neg: &[f64]) -> Result<f64> {
    fpr_at_tpr(pos, neg, 0.8)
}

/// `−nats / (D·ln 2)` per entry.
pub fn bits_per_dim(nats_per_example: &[f64], dims: usize) -> Vec<f64> {
    nats_per_example
        .iter()
        .map(|&n| crate::hvae::bits_per_dim(n, dims))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// Descending; the first entry is `+∞` for the `(0, 0)` point.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

impl RocCurve {
    pub fn trapezoid_area(&self) -> f64 {
        self.fpr
            .windows(2)
            .zip(self.tpr.windows(2))
            .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for i in 0..self.fpr.len() {
            writeln!(out, "{:.16e},{:.16e},{:.16e}", self.thresholds[i], self.fpr[i], self.tpr[i]).unwrap();
        }
        out
    }
}

pub fn roc_curve(pos: &[f64], neg: &[f64]) -> Result<RocCurve> {
    check(pos, neg)?;
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        fpr: vec![0.0],
        tpr: vec![0.0],
    };
    for (s, tp, fp) in sweep(pos, neg) {
        curve.thresholds.push(s);
        curve.fpr.push(fp as f64 / nn);
        curve.tpr.push(tp as f64 / np);
    }
    Ok(curve)
}
