//! LLR scores over datasets, k selection, the per-example threshold rule,
//! OOD reports and estimator-variance diagnostics.

use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::data::{balanced_indices, binarize_eval, IdxDataset};
use crate::error::{Error, Result};
use crate::hvae::{evaluate, BoundKind, BoundResult, HvaeModel, LatentNoise};
use crate::metrics::{auprc, auroc, fpr80};
use crate::rng::{streams, substream};

pub const SCORE_TABLE_VERSION: u32 = 1;

/// Examples per evaluation batch when scoring a dataset.
const SCORE_BATCH: usize = 500;

/// Per-example bound values in nats plus `llr_k = elbo − gt_k`.
///
/// Column vectors are indexed `[column][row]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub dataset: String,
    pub samples: usize,
    pub seed: u64,
    pub indices: Vec<usize>,
    pub elbo: Vec<f64>,
    pub ks: Vec<usize>,
    pub gt: Vec<Vec<f64>>,
    pub ls: Vec<usize>,
    pub lt: Vec<Vec<f64>>,
    pub llr: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn llr_for(&self, k: usize) -> Option<&[f64]> {
        self.ks.iter().position(|&c| c == k).map(|c| self.llr[c].as_slice())
    }

    /// Rows `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        Self {
            dataset: self.dataset.clone(),
            samples: self.samples,
            seed: self.seed,
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
            elbo: pick(&self.elbo),
            ks: self.ks.clone(),
            gt: self.gt.iter().map(pick).collect(),
            ls: self.ls.clone(),
            lt: self.lt.iter().map(pick).collect(),
            llr: self.llr.iter().map(pick).collect(),
        }
    }

    /// Audits `llr_k == elbo − gt_k` on every row, exactly.
    pub fn recompute_check(&self) -> Result<()> {
        for (c, &k) in self.ks.iter().enumerate() {
            for r in 0..self.len() {
                if self.llr[c][r] != self.elbo[r] - self.gt[c][r] {
                    return Err(Error::SchemaMismatch(format!("llr_{k} differs from elbo − gt_{k} at row {r}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# hvae-ood score table v{SCORE_TABLE_VERSION}; crate {}; dataset={} S={} seed={}",
            env!("CARGO_PKG_VERSION"),
            self.dataset,
            self.samples,
            self.seed
        )
        .unwrap();
        writeln!(
            out,
            "# lt_l: z_1..z_l from the posterior, z_(l+1)..z_L from the prior; integrand log p(x|z_1) + sum_(i<=l) log p(z_i|.)/q(z_i|.) (no second p(z_<l) factor)"
        )
        .unwrap();
        out.push_str("dataset,index,S,seed,elbo");
        for k in &self.ks {
            write!(out, ",gt_{k}").unwrap();
        }
        for l in &self.ls {
            write!(out, ",lt_{l}").unwrap();
        }
        for k in &self.ks {
            write!(out, ",llr_{k}").unwrap();
        }
        out.push('\n');
        for r in 0..self.len() {
            write!(out, "{},{},{},{},{:.16e}", self.dataset, self.indices[r], self.samples, self.seed, self.elbo[r]).unwrap();
            for col in self.gt.iter().chain(&self.lt).chain(&self.llr) {
                write!(out, ",{:.16e}", col[r]).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::SchemaMismatch(m);
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("score table has no header".into()))?.split(',').collect();
        if header.len() < 5 || header[..5] != ["dataset", "index", "S", "seed", "elbo"] {
            return Err(bad(format!("unexpected score table header {header:?}")));
        }
        let suffix = |prefix: &str| -> Result<Vec<usize>> {
            header
                .iter()
                .filter_map(|h| h.strip_prefix(prefix))
                .map(|v| v.parse().map_err(|_| bad(format!("bad column {prefix}{v}"))))
                .collect()
        };
        let (ks, ls, llr_ks) = (suffix("gt_")?, suffix("lt_")?, suffix("llr_")?);
        if ks != llr_ks || header.len() != 5 + ks.len() * 2 + ls.len() {
            return Err(bad("gt and llr columns do not match".into()));
        }
        let mut t = ScoreTable {
            dataset: String::new(),
            samples: 0,
            seed: 0,
            indices: Vec::new(),
            elbo: Vec::new(),
            gt: vec![Vec::new(); ks.len()],
            lt: vec![Vec::new(); ls.len()],
            llr: vec![Vec::new(); ks.len()],
            ks,
            ls,
        };
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(bad(format!("row {n} has {} fields, expected {}", f.len(), header.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {n}: bad number `{s}`")));
            let int = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("row {n}: bad integer `{s}`")));
            if n == 0 {
                t.dataset = f[0].to_string();
                t.samples = int(f[2])? as usize;
                t.seed = int(f[3])?;
            } else if f[0] != t.dataset || int(f[2])? as usize != t.samples || int(f[3])? != t.seed {
                return Err(bad(format!("row {n} disagrees with the table's dataset, S or seed")));
            }
            t.indices.push(int(f[1])? as usize);
            t.elbo.push(num(f[4])?);
            for (at, col) in (5..).zip(t.gt.iter_mut().chain(t.lt.iter_mut()).chain(t.llr.iter_mut())) {
                col.push(num(f[at])?);
            }
        }
        Ok(t)
    }
}

/// Scores `indices` of `dataset`. Every bound of one example shares the same
/// per-example noise, so the posterior samples of the ELBO and `L^{>k}` are
/// common random numbers. Binarization and noise depend only on
/// `(seed, index)`.
pub fn score_dataset(
    model: &HvaeModel,
    dataset: &IdxDataset,
    indices: &[usize],
    ks: &[usize],
    ls: &[usize],
    samples: usize,
    seed: u64,
) -> Result<ScoreTable> {
    if indices.is_empty() {
        return Err(Error::EmptyInput("no examples to score"));
    }
    let mut t = ScoreTable {
        dataset: dataset.name.clone(),
        samples,
        seed,
        indices: indices.to_vec(),
        elbo: Vec::with_capacity(indices.len()),
        ks: ks.to_vec(),
        gt: vec![Vec::with_capacity(indices.len()); ks.len()],
        ls: ls.to_vec(),
        lt: vec![Vec::with_capacity(indices.len()); ls.len()],
        llr: vec![Vec::with_capacity(indices.len()); ks.len()],
    };
    for chunk in indices.chunks(SCORE_BATCH) {
        let x = binarize_eval(dataset, chunk, seed).data;
        let noise = LatentNoise::for_examples(seed, chunk, samples, model.latent_dims());
        let e = evaluate(model, &x, BoundKind::Elbo, &noise)?;
        t.elbo.extend(e.per_example_value.iter());
        for (c, &k) in ks.iter().enumerate() {
            let g = evaluate(model, &x, BoundKind::GtK(k), &noise)?;
            t.gt[c].extend(g.per_example_value.iter());
            t.llr[c].extend((&e.per_example_value - &g.per_example_value).iter());
        }
        for (c, &l) in ls.iter().enumerate() {
            let r = evaluate(model, &x, BoundKind::LtL(l), &noise)?;
            t.lt[c].extend(r.per_example_value.iter());
        }
    }
    Ok(t)
}

/// `LLR^{>k}_{<l} = L^{<l} − L^{>k}` per example.
pub fn llr_generalized(lt_l: &BoundResult, gt_k: &BoundResult) -> Result<Array1<f64>> {
    let (a, b) = (&lt_l.per_example_value, &gt_k.per_example_value);
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a - b)
}

fn check_compatible(a: &ScoreTable, b: &ScoreTable) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyTable(if a.is_empty() { a.dataset.clone() } else { b.dataset.clone() }));
    }
    if a.ks != b.ks || a.samples != b.samples {
        return Err(Error::SchemaMismatch(format!(
            "tables differ in k set or S: {:?}/S={} vs {:?}/S={}",
            a.ks, a.samples, b.ks, b.samples
        )));
    }
    Ok(())
}

/// `argmax_k AUROC(llr_k)` with OOD rows as positives; ties go to the
/// smaller k. Returns `(k*, [(k, AUROC)])`.
pub fn select_k(in_table: &ScoreTable, out_table: &ScoreTable) -> Result<(usize, Vec<(usize, f64)>)> {
    check_compatible(in_table, out_table)?;
    if in_table.ks.is_empty() {
        return Err(Error::EmptyTable("no llr columns".into()));
    }
    let mut per_k = Vec::with_capacity(in_table.ks.len());
    for (c, &k) in in_table.ks.iter().enumerate() {
        per_k.push((k, auroc(&out_table.llr[c], &in_table.llr[c])?));
    }
    let mut order = per_k.clone();
    order.sort_by_key(|p| p.0);
    let best = order
        .iter()
        .fold(order[0], |best, &cand| if cand.1 > best.1 { cand } else { best });
    Ok((best.0, per_k))
}

pub const MIN_REFERENCE_ROWS: usize = 100;

/// Per-k empirical quantile thresholds of in-distribution LLR scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdRule {
    pub flag_quantile: f64,
    pub ks: Vec<usize>,
    /// Sorted reference scores per k.
    pub reference: Vec<Vec<f64>>,
    /// The `flag_quantile` empirical quantile per k: the smallest reference
    /// value whose empirical CDF reaches the quantile.
    pub thresholds: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flag {
    pub k: usize,
    /// Empirical CDF of the row's score minus the flag quantile.
    pub exceedance: f64,
}

pub fn threshold_rule(in_table: &ScoreTable, flag_quantile: f64) -> Result<ThresholdRule> {
    if in_table.len() < MIN_REFERENCE_ROWS {
        return Err(Error::InsufficientReference {
            found: in_table.len(),
            required: MIN_REFERENCE_ROWS,
        });
    }
    if !(flag_quantile > 0.0 && flag_quantile < 1.0) {
        return Err(Error::Domain(format!("flag quantile {flag_quantile} outside (0, 1)")));
    }
    let n = in_table.len();
    let rank = ((flag_quantile * n as f64).ceil() as usize).clamp(1, n) - 1;
    let mut reference = Vec::new();
    let mut thresholds = Vec::new();
    for col in &in_table.llr {
        let mut s = col.clone();
        s.sort_by(f64::total_cmp);
        thresholds.push(s[rank]);
        reference.push(s);
    }
    Ok(ThresholdRule {
        flag_quantile,
        ks: in_table.ks.clone(),
        reference,
        thresholds,
    })
}

impl ThresholdRule {
    fn ecdf(&self, c: usize, v: f64) -> f64 {
        let r = &self.reference[c];
        r.partition_point(|&x| x <= v) as f64 / r.len() as f64
    }

    /// Flags a row (one LLR per k, in `ks` order) when any score exceeds
    /// its threshold; reports the k that differs the most in ECDF units,
    /// ties to the smaller k.
    pub fn classify(&self, llr: &[f64]) -> Result<Option<Flag>> {
        if llr.len() != self.ks.len() {
            return Err(Error::LengthMismatch {
                left: llr.len(),
                right: self.ks.len(),
            });
        }
        let mut best: Option<Flag> = None;
        for (c, &v) in llr.iter().enumerate() {
            if v > self.thresholds[c] {
                let flag = Flag {
                    k: self.ks[c],
                    exceedance: self.ecdf(c, v) - self.flag_quantile,
                };
                let better = match best {
                    None => true,
                    Some(b) => flag.exceedance > b.exceedance || (flag.exceedance == b.exceedance && flag.k < b.k),
                };
                if better {
                    best = Some(flag);
                }
            }
        }
        Ok(best)
    }

    /// Fraction of rows flagged by the column of `k` alone.
    pub fn flag_rate(&self, table: &ScoreTable, k: usize) -> Option<f64> {
        let c = self.ks.iter().position(|&x| x == k)?;
        let col = table.llr_for(k)?;
        Some(col.iter().filter(|&&v| v > self.thresholds[c]).count() as f64 / col.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// ELBO and `L^{>k}` replicates reuse the same noise.
    Shared,
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VarianceReport {
    pub var_elbo: f64,
    pub var_gt_k: f64,
    pub var_llr: f64,
    pub cov: f64,
    pub mean_elbo: f64,
    pub mean_gt_k: f64,
}

fn sample_moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut va, mut vb, mut c) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        c += (x - ma) * (y - mb);
    }
    (ma, mb, va / (n - 1.0), vb / (n - 1.0), c / (n - 1.0))
}

/// `R` replicate estimates of the ELBO and `L^{>k}` (each with `S` samples)
/// for the single example `x`, and their sample variances and covariance.
pub fn estimator_variance(
    model: &HvaeModel,
    x: &Array2<f64>,
    k: usize,
    samples: usize,
    repeats: usize,
    mode: NoiseMode,
    seed: u64,
) -> Result<VarianceReport> {
    if x.nrows() != 1 {
        return Err(Error::Domain(format!("estimator_variance takes one example, got {}", x.nrows())));
    }
    if repeats < 100 {
        return Err(Error::Domain(format!("need at least 100 repeats, got {repeats}")));
    }
    let xs = x.broadcast((repeats, x.ncols())).expect("one row").to_owned();
    let dims = model.latent_dims();
    let shared = LatentNoise::draw(&mut substream(seed, streams::ANALYSIS, 0), repeats, samples, dims);
    let other = match mode {
        NoiseMode::Shared => shared.clone(),
        NoiseMode::Independent => LatentNoise::draw(&mut substream(seed, streams::ANALYSIS, 1), repeats, samples, dims),
    };
    let e = evaluate(model, &xs, BoundKind::Elbo, &shared)?.per_example_value.to_vec();
    let g = evaluate(model, &xs, BoundKind::GtK(k), &other)?.per_example_value.to_vec();
    let llr: Vec<f64> = e.iter().zip(&g).map(|(a, b)| a - b).collect();
    let (mean_elbo, mean_gt_k, var_elbo, var_gt_k, cov) = sample_moments(&e, &g);
    let (_, _, var_llr, _, _) = sample_moments(&llr, &llr);
    Ok(VarianceReport {
        var_elbo,
        var_gt_k,
        var_llr,
        cov,
        mean_elbo,
        mean_gt_k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreMetrics {
    pub score: String,
    pub auroc: f64,
    pub auprc: f64,
    pub fpr80: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub score: String,
    pub edges: Vec<f64>,
    pub in_counts: Vec<usize>,
    pub out_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OodReport {
    pub in_dataset: String,
    pub out_dataset: String,
    pub orientation: String,
    pub samples: usize,
    pub score_seed_in: u64,
    pub score_seed_out: u64,
    pub balance_seed: u64,
    pub n_in: usize,
    pub n_out: usize,
    pub n_balanced: usize,
    pub k_star: usize,
    pub auroc_per_k: Vec<(usize, f64)>,
    pub scores: Vec<ScoreMetrics>,
    pub histograms: Vec<Histogram>,
}

pub const HISTOGRAM_BINS: usize = 40;

fn histogram(score: &str, a: &[f64], b: &[f64]) -> Histogram {
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
    let edges = (0..=HISTOGRAM_BINS).map(|i| lo + i as f64 * width).collect();
    let count = |v: &[f64]| {
        let mut c = vec![0; HISTOGRAM_BINS];
        for &x in v {
            c[(((x - lo) / width) as usize).min(HISTOGRAM_BINS - 1)] += 1;
        }
        c
    };
    Histogram {
        score: score.to_string(),
        edges,
        in_counts: count(a),
        out_counts: count(b),
    }
}

/// Named OOD scores of a table, oriented so that higher means more OOD.
pub fn oriented_scores(t: &ScoreTable) -> Vec<(String, Vec<f64>)> {
    let neg = |v: &Vec<f64>| v.iter().map(|x| -x).collect::<Vec<_>>();
    let mut out = vec![("neg_elbo".to_string(), neg(&t.elbo))];
    for (c, k) in t.ks.iter().enumerate() {
        out.push((format!("neg_gt_{k}"), neg(&t.gt[c])));
    }
    for (c, l) in t.ls.iter().enumerate() {
        out.push((format!("neg_lt_{l}"), neg(&t.lt[c])));
    }
    for (c, k) in t.ks.iter().enumerate() {
        out.push((format!("llr_{k}"), t.llr[c].clone()));
    }
    for (cl, l) in t.ls.iter().enumerate() {
        for (ck, k) in t.ks.iter().enumerate() {
            let v = t.lt[cl].iter().zip(&t.gt[ck]).map(|(a, b)| a - b).collect();
            out.push((format!("llr_{k}_lt_{l}"), v));
        }
    }
    out
}

/// Equal-size random subsets of both tables; the smaller table is kept whole.
pub fn balanced_tables(in_table: &ScoreTable, out_table: &ScoreTable, balance_seed: u64) -> Result<(ScoreTable, ScoreTable)> {
    let (a, b) = balanced_indices(in_table.len(), out_table.len(), &mut substream(balance_seed, streams::BALANCE, 0))?;
    Ok((in_table.subset(&a), out_table.subset(&b)))
}

/// Balances the two tables, then reports every score's metrics and the
/// selected k.
pub fn ood_report(in_table: &ScoreTable, out_table: &ScoreTable, balance_seed: u64) -> Result<OodReport> {
    check_compatible(in_table, out_table)?;
    if in_table.ls != out_table.ls {
        return Err(Error::SchemaMismatch("tables differ in l set".into()));
    }
    let (ins, outs) = balanced_tables(in_table, out_table, balance_seed)?;
    let (k_star, auroc_per_k) = select_k(&ins, &outs)?;
    let mut scores = Vec::new();
    let mut histograms = Vec::new();
    for ((name, si), (_, so)) in oriented_scores(&ins).into_iter().zip(oriented_scores(&outs)) {
        scores.push(ScoreMetrics {
            score: name.clone(),
            auroc: auroc(&so, &si)?,
            auprc: auprc(&so, &si)?,
            fpr80: fpr80(&so, &si)?,
        });
        histograms.push(histogram(&name, &si, &so));
    }
    Ok(OodReport {
        in_dataset: in_table.dataset.clone(),
        out_dataset: out_table.dataset.clone(),
        orientation: "positive class = out-of-distribution; higher score = more OOD".into(),
        samples: in_table.samples,
        score_seed_in: in_table.seed,
        score_seed_out: out_table.seed,
        balance_seed,
        n_in: in_table.len(),
        n_out: out_table.len(),
        n_balanced: ins.len(),
        k_star,
        auroc_per_k,
        scores,
        histograms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(name: &str, elbo: Vec<f64>, gts: Vec<Vec<f64>>) -> ScoreTable {
        let n = elbo.len();
        let ks: Vec<usize> = (1..=gts.len()).collect();
        let llr = gts.iter().map(|g| elbo.iter().zip(g).map(|(e, g)| e - g).collect()).collect();
        ScoreTable {
            dataset: name.into(),
            samples: 1,
            seed: 3,
            indices: (0..n).collect(),
            elbo,
            ks,
            gt: gts,
            ls: vec![1],
            lt: vec![(0..n).map(|i| -(i as f64)).collect()],
            llr,
        }
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let t = table("fm", vec![-300.1234567890123, 1e-300, -0.0], vec![vec![1.0 / 3.0, 2.0, 3.0], vec![-1e10, 0.1, 0.2]]);
        let csv = t.to_csv();
        assert!(csv.lines().nth(2).unwrap() == "dataset,index,S,seed,elbo,gt_1,gt_2,lt_1,llr_1,llr_2");
        let back = ScoreTable::from_csv(&csv).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_csv(), csv);
        back.recompute_check().unwrap();
        let mut broken = back.clone();
        broken.llr[0][1] += 1e-12;
        assert!(broken.recompute_check().is_err());
    }

    #[test]
    fn select_k_examples() {
        let base: Vec<f64> = (0..50).map(|i| -(i as f64)).collect();
        let same = table("a", base.clone(), vec![base.iter().map(|v| v - 1.0).collect(), base.iter().map(|v| v - 2.0).collect()]);
        let (k, per) = select_k(&same, &same).unwrap();
        assert_eq!(k, 1);
        assert!(per.iter().all(|&(_, a)| a == 0.5));

        let zeros = vec![0.0; 50];
        let ins = table("in", zeros.clone(), vec![base.clone(), zeros.iter().map(|_| 0.0).collect()]);
        let outs = table("out", zeros.clone(), vec![base.clone(), zeros.iter().map(|_| -5.0).collect()]);
        let (k, per) = select_k(&ins, &outs).unwrap();
        assert_eq!(k, 2);
        assert_eq!(per[1], (2, 1.0));
        let empty = ins.subset(&[]);
        assert!(matches!(select_k(&empty, &outs), Err(Error::EmptyTable(_))));
    }

    #[test]
    fn k0_llr_vanishes() {
        let mut t = table("a", vec![-1.5, -2.5], vec![vec![-1.5, -2.5]]);
        t.ks = vec![0];
        assert!(t.llr[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_rule_examples() {
        let n = 1000;
        let vals: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let t = table("in", vec![0.0; n], vec![vals.iter().map(|v| -v).collect(), vals.iter().map(|v| -v).collect()]);
        let rule = threshold_rule(&t, 0.95).unwrap();
        assert_eq!(rule.thresholds, vec![949.0, 949.0]);
        assert_eq!(rule.classify(&[500.0, 500.0]).unwrap(), None);
        let f = rule.classify(&[2000.0, 10.0]).unwrap().unwrap();
        assert_eq!(f.k, 1);
        assert!((f.exceedance - 0.05).abs() < 1e-12);
        assert_eq!(rule.classify(&[2000.0, 2000.0]).unwrap().unwrap().k, 1);
        assert_eq!(rule.classify(&[960.0, 2000.0]).unwrap().unwrap().k, 2);
        assert_eq!(rule.flag_rate(&t, 1), Some(0.05));
        assert!(matches!(threshold_rule(&t.subset(&[1, 2, 3]), 0.95), Err(Error::InsufficientReference { found: 3, .. })));
    }

    #[test]
    fn threshold_rule_false_positive_rate_on_held_out_rows() {
        use rand::Rng as _;
        let mut rng = substream(1, "fpr", 0);
        let mut draw = |n: usize| {
            let e: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            table("in", e, vec![g])
        };
        let reference = draw(200_000);
        let held_out = draw(5000);
        let rule = threshold_rule(&reference, 0.95).unwrap();
        let rate = rule.flag_rate(&held_out, 1).unwrap();
        let se = (0.05f64 * 0.95 / 5000.0).sqrt();
        assert!((rate - 0.05).abs() < 2.0 * se, "{rate}");
    }

    #[test]
    fn report_orients_scores() {
        let ins = table("in", (0..200).map(|i| -(i as f64)).collect(), vec![vec![0.0; 200]]);
        let outs = table("out", (0..300).map(|i| -(i as f64) - 1000.0).collect(), vec![vec![0.0; 300]]);
        let r = ood_report(&ins, &outs, 5).unwrap();
        assert_eq!(r.n_balanced, 200);
        let e = r.scores.iter().find(|s| s.score == "neg_elbo").unwrap();
        assert_eq!(e.auroc, 1.0);
        assert_eq!(e.fpr80, 0.0);
        assert_eq!(r, ood_report(&ins, &outs, 5).unwrap());
    }

    proptest! {
        #[test]
        fn constant_shift_leaves_llr_auroc_unchanged(c in -1000i32..1000, seed in 0u64..1000) {
            use rand::Rng as _;
            let mut rng = substream(seed, "shift", 0);
            let mut col = |n: usize| (0..n).map(|_| rng.random_range(0..8) as f64).collect::<Vec<_>>();
            let (e1, g1, e2, g2) = (col(40), col(40), col(60), col(60));
            let shift = |v: &Vec<f64>| v.iter().map(|x| x + c as f64).collect::<Vec<_>>();
            let a = select_k(&table("i", e1.clone(), vec![g1.clone()]), &table("o", e2.clone(), vec![g2.clone()])).unwrap();
            let b = select_k(&table("i", shift(&e1), vec![shift(&g1)]), &table("o", shift(&e2), vec![shift(&g2)])).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
