//! Inverse-volume analysis of Gaussian Jacobians and cross-model
//! correlation of latent representations.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, Axis};
use serde::Serialize;

use crate::data::{binarize_eval, IdxDataset};
use crate::dist::standard_normal;
use crate::error::{Error, Result};
use crate::hvae::HvaeModel;
use crate::nn::Matrix;
use crate::rng::{streams, substream};

pub const SWEEP_VERSION: u32 = 1;

/// Jacobian samples are `d_in × d_out`, so `JᵀJ` is a `d_out × d_out`
/// Wishart matrix with `d_in` degrees of freedom.
pub const JACOBIAN_ORIENTATION: &str = "J has shape d_in x d_out; J^T J ~ Wishart_{d_out}(d_in, sigma^2 I)";

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `log Γ(x)` for `x > 0` by the Lanczos approximation; small integer
/// arguments use the factorial.
pub fn ln_gamma(x: f64) -> Result<f64> {
    if x <= 0.0 || !x.is_finite() {
        return Err(Error::Domain(format!("log-gamma argument {x} must be positive and finite")));
    }
    if x.fract() == 0.0 && x <= 23.0 {
        return Ok((1..x as u64).map(|v| v as f64).product::<f64>().ln());
    }
    if x < 0.5 {
        // Γ(x)Γ(1−x) = π / sin(πx)
        return Ok((PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x)?);
    }
    let x = x - 1.0;
    let t = x + LANCZOS_G + 0.5;
    let series = LANCZOS[1..]
        .iter()
        .enumerate()
        .fold(LANCZOS[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    Ok(0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + series.ln())
}

/// `log Γ_d(a) = d(d−1)/4·log π + Σ_{j=1..d} log Γ(a + (1−j)/2)`.
pub fn log_multivariate_gamma(d: usize, a: f64) -> Result<f64> {
    if d == 0 || a.is_nan() || a <= (d as f64 - 1.0) / 2.0 {
        return Err(Error::Domain(format!("multivariate gamma needs d ≥ 1 and a > (d−1)/2, got d={d}, a={a}")));
    }
    let mut sum = (d * (d - 1)) as f64 / 4.0 * PI.ln();
    for j in 1..=d {
        sum += ln_gamma(a + (1.0 - j as f64) / 2.0)?;
    }
    Ok(sum)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JacobianLayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub sigma: f64,
}

impl JacobianLayerSpec {
    pub fn new(d_in: usize, d_out: usize, sigma: f64) -> Result<Self> {
        if d_out < 1 || d_in <= d_out {
            return Err(Error::Domain(format!("need d_in > d_out ≥ 1, got d_in={d_in}, d_out={d_out}")));
        }
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::Domain(format!("sigma {sigma} must be positive")));
        }
        Ok(Self { d_in, d_out, sigma })
    }
}

/// `log E[(det JᵀJ)^{−1/2}]` in closed form.
pub fn expected_inverse_volume(layer: JacobianLayerSpec) -> Result<f64> {
    let JacobianLayerSpec { d_in, d_out, sigma } = JacobianLayerSpec::new(layer.d_in, layer.d_out, layer.sigma)?;
    let (n, p) = (d_in as f64, d_out as f64);
    Ok(-p * sigma.ln() - p / 2.0 * 2f64.ln() + ln_gamma((n - p) / 2.0)? - ln_gamma(n / 2.0)?)
}

/// `log det` of a symmetric positive-definite matrix by Cholesky.
fn spd_log_det(a: &Matrix) -> Option<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    let mut log_det = 0.0;
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d.is_nan() || d <= 0.0 {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        log_det += 2.0 * d.ln();
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Some(log_det)
}

pub const MC_SHARDS: usize = 16;
pub const MAX_MC_DIM: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub samples: usize,
}

/// Monte Carlo estimate of `E[(det JᵀJ)^{−1/2}]` (not in log space).
/// Samples are split across fixed shards with their own substreams and
/// reduced in shard order.
pub fn mc_inverse_volume(layer: JacobianLayerSpec, samples: usize, seed: u64) -> Result<McEstimate> {
    let layer = JacobianLayerSpec::new(layer.d_in, layer.d_out, layer.sigma)?;
    if samples < 1000 {
        return Err(Error::Domain(format!("need at least 1000 samples, got {samples}")));
    }
    if layer.d_in > MAX_MC_DIM {
        return Err(Error::Domain(format!("d_in {} exceeds the Monte Carlo limit {MAX_MC_DIM}", layer.d_in)));
    }
    let shard = |s: usize| -> Result<(f64, f64)> {
        let count = samples / MC_SHARDS + usize::from(s < samples % MC_SHARDS);
        let mut rng = substream(seed, streams::ANALYSIS, s as u64);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..count {
            let j = standard_normal(layer.d_in, layer.d_out, &mut rng) * layer.sigma;
            let log_det = spd_log_det(&j.t().dot(&j))
                .ok_or_else(|| Error::NumericalInstability("Jacobian Gram matrix is not positive definite".into()))?;
            let v = (-0.5 * log_det).exp();
            sum += v;
            sum_sq += v * v;
        }
        Ok((sum, sum_sq))
    };
    let parts: Vec<Result<(f64, f64)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..MC_SHARDS).map(|s| scope.spawn(move || shard(s))).collect();
        handles.into_iter().map(|h| h.join().expect("shard panicked")).collect()
    });
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        sum += a;
        sum_sq += b;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(McEstimate {
        mean,
        standard_error: (var / n).sqrt(),
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub d_in: usize,
    pub d_out: usize,
    pub sigma: f64,
    pub log_expected_inverse_volume: f64,
}

/// One row per `d_in` in `d_range` with `d_out = d_in − gap`; the log values
/// must decrease strictly.
pub fn dimension_sweep(gap: usize, d_range: impl IntoIterator<Item = usize>, sigma: f64) -> Result<Vec<SweepRow>> {
    let mut rows: Vec<SweepRow> = Vec::new();
    for d in d_range {
        let d_out = d.checked_sub(gap).ok_or_else(|| Error::Domain(format!("d_in {d} is smaller than gap {gap}")))?;
        let value = expected_inverse_volume(JacobianLayerSpec::new(d, d_out, sigma)?)?;
        if let Some(prev) = rows.last() {
            if value.is_nan() || value >= prev.log_expected_inverse_volume {
                return Err(Error::Domain(format!(
                    "sweep not strictly decreasing at d_in={d}: {value} after {}",
                    prev.log_expected_inverse_volume
                )));
            }
        }
        rows.push(SweepRow {
            d_in: d,
            d_out,
            sigma,
            log_expected_inverse_volume: value,
        });
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "# hvae-ood jacobian sweep v{SWEEP_VERSION}; crate {}; {JACOBIAN_ORIENTATION}\nd_in,d_out,sigma,log_expected_inverse_volume\n",
        env!("CARGO_PKG_VERSION")
    );
    for r in rows {
        writeln!(out, "{},{},{:.16e},{:.16e}", r.d_in, r.d_out, r.sigma, r.log_expected_inverse_volume).unwrap();
    }
    out
}

pub const MIN_CORRELATION_EXAMPLES: usize = 1000;

/// Absolute Pearson correlations between the units of one layer of each
/// model. Units with zero variance are masked and get correlation 0.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap {
    /// 1-based layer indices.
    pub layer_a: usize,
    pub layer_b: usize,
    pub matrix: Array2<f64>,
    pub dead_a: Vec<bool>,
    pub dead_b: Vec<bool>,
}

impl CorrelationMap {
    /// Mean over entries whose units are both alive; 0 when none are.
    pub fn mean_abs(&self) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for ((i, j), v) in self.matrix.indexed_iter() {
            if !self.dead_a[i] && !self.dead_b[j] {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# hvae-ood correlation v{SWEEP_VERSION}; layer_a={} layer_b={}; rows: units of model a, columns: units of model b; dead units have correlation 0\nunit_a,dead_a",
            self.layer_a, self.layer_b
        );
        for (j, dead) in self.dead_b.iter().enumerate() {
            write!(out, ",b{j}{}", if *dead { "_dead" } else { "" }).unwrap();
        }
        out.push('\n');
        for (i, row) in self.matrix.rows().into_iter().enumerate() {
            write!(out, "{i},{}", u8::from(self.dead_a[i])).unwrap();
            for v in row {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn standardize(column: ArrayView1<f64>) -> Option<Vec<f64>> {
    let n = column.len() as f64;
    let mean = column.sum() / n;
    let centered: Vec<f64> = column.iter().map(|v| v - mean).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 * (1.0 + mean.abs()) * n.sqrt() {
        return None;
    }
    Some(centered.into_iter().map(|v| v / norm).collect())
}

/// `|corr|` between every column of `a` and every column of `b`.
pub fn abs_correlation(a: &Matrix, b: &Matrix) -> Result<(Array2<f64>, Vec<bool>, Vec<bool>)> {
    if a.nrows() != b.nrows() {
        return Err(Error::LengthMismatch {
            left: a.nrows(),
            right: b.nrows(),
        });
    }
    let sa: Vec<Option<Vec<f64>>> = a.axis_iter(Axis(1)).map(standardize).collect();
    let sb: Vec<Option<Vec<f64>>> = b.axis_iter(Axis(1)).map(standardize).collect();
    let mut m = Array2::zeros((a.ncols(), b.ncols()));
    for (i, u) in sa.iter().enumerate() {
        for (j, v) in sb.iter().enumerate() {
            if let (Some(u), Some(v)) = (u, v) {
                let r: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                m[[i, j]] = r.abs().min(1.0);
            }
        }
    }
    Ok((m, sa.iter().map(Option::is_none).collect(), sb.iter().map(Option::is_none).collect()))
}

/// Posterior means of both models on the same binarized examples, correlated
/// for every pair of layers (row-major in `(layer_a, layer_b)`).
pub fn cross_model_correlation(
    model_a: &HvaeModel,
    model_b: &HvaeModel,
    dataset: &IdxDataset,
    indices: &[usize],
    binarize_seed: u64,
) -> Result<Vec<CorrelationMap>> {
    if indices.len() < MIN_CORRELATION_EXAMPLES {
        return Err(Error::Domain(format!(
            "correlation needs at least {MIN_CORRELATION_EXAMPLES} examples, got {}",
            indices.len()
        )));
    }
    let x = binarize_eval(dataset, indices, binarize_seed).data;
    let (za, zb) = (model_a.posterior_modes(&x)?, model_b.posterior_modes(&x)?);
    let mut maps = Vec::with_capacity(za.len() * zb.len());
    for (i, a) in za.iter().enumerate() {
        for (j, b) in zb.iter().enumerate() {
            let (matrix, dead_a, dead_b) = abs_correlation(a, b)?;
            maps.push(CorrelationMap {
                layer_a: i + 1,
                layer_b: j + 1,
                matrix,
                dead_a,
                dead_b,
            });
        }
    }
    Ok(maps)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationBlock {
    pub layer_a: usize,
    pub layer_b: usize,
    pub mean_abs_correlation: f64,
    pub dead_units_a: usize,
    pub dead_units_b: usize,
}

pub fn correlation_summary(maps: &[CorrelationMap]) -> Vec<CorrelationBlock> {
    maps.iter()
        .map(|m| CorrelationBlock {
            layer_a: m.layer_a,
            layer_b: m.layer_b,
            mean_abs_correlation: m.mean_abs(),
            dead_units_a: m.dead_a.iter().filter(|&&d| d).count(),
            dead_units_b: m.dead_b.iter().filter(|&&d| d).count(),
        })
        .collect()
}
