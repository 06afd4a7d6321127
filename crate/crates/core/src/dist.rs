//! Diagonal Gaussians, Bernoulli likelihoods and the free-bits schedule.
//!
//! The tape functions in [`graph`] are the single implementation; the value
//! functions below record a throwaway tape around them.

use std::f64::consts::{LN_2, PI};

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Matrix, Tape};
use crate::rng::Rng;

/// Variance activation: softplus with β = log 2 gives variance 1 at zero input.
pub const VARIANCE_SOFTPLUS_BETA: f64 = LN_2;
pub const LOG_VARIANCE_MIN: f64 = -14.0;
pub const LOG_VARIANCE_MAX: f64 = 14.0;

pub(crate) fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Matrix,
    pub log_variance: Matrix,
}

impl DiagGaussian {
    pub fn new(mean: Matrix, log_variance: Matrix) -> Result<Self> {
        check_same("DiagGaussian::new", &mean, &log_variance)?;
        Ok(Self { mean, log_variance })
    }

    pub fn standard(rows: usize, dim: usize) -> Self {
        Self {
            mean: Array2::zeros((rows, dim)),
            log_variance: Array2::zeros((rows, dim)),
        }
    }

    pub fn std(&self) -> Matrix {
        self.log_variance.mapv(|lv| (0.5 * lv).exp())
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn column(m: &Matrix) -> Array1<f64> {
    m.index_axis(Axis(1), 0).to_owned()
}

pub fn gaussian_log_prob(dist: &DiagGaussian, z: &Matrix) -> Result<Array1<f64>> {
    check_same("gaussian_log_prob", &dist.mean, z)?;
    let mut t = Tape::new();
    let (m, lv, zv) = (
        t.input(dist.mean.clone()),
        t.input(dist.log_variance.clone()),
        t.input(z.clone()),
    );
    let out = graph::gaussian_log_prob(&mut t, m, lv, zv);
    Ok(column(t.value(out)))
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Reparameterized sample `z = μ + σ ⊙ ε`; the noise is returned for reuse.
pub fn gaussian_rsample(dist: &DiagGaussian, rng: &mut Rng) -> (Matrix, Matrix) {
    let (rows, cols) = dist.mean.dim();
    let noise = standard_normal(rows, cols, rng);
    (gaussian_rsample_with(dist, &noise), noise)
}

pub fn gaussian_rsample_with(dist: &DiagGaussian, noise: &Matrix) -> Matrix {
    let mut t = Tape::new();
    let (m, lv, e) = (
        t.input(dist.mean.clone()),
        t.input(dist.log_variance.clone()),
        t.input(noise.clone()),
    );
    let z = graph::rsample(&mut t, m, lv, e);
    t.value(z).clone()
}

pub fn gaussian_kl(q: &DiagGaussian, p: &DiagGaussian) -> Result<Array1<f64>> {
    check_same("gaussian_kl", &q.mean, &p.mean)?;
    let mut t = Tape::new();
    let (qm, qlv, pm, plv) = (
        t.input(q.mean.clone()),
        t.input(q.log_variance.clone()),
        t.input(p.mean.clone()),
        t.input(p.log_variance.clone()),
    );
    let out = graph::gaussian_kl(&mut t, qm, qlv, pm, plv);
    Ok(column(t.value(out)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliLikelihood {
    pub logits: Matrix,
}

impl BernoulliLikelihood {
    pub fn mean(&self) -> Matrix {
        self.logits.mapv(crate::nn::tape::sigmoid)
    }
}

pub fn check_binary(x: &Matrix) -> Result<()> {
    match x.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&v) => Err(Error::NonBinaryInput(v)),
        None => Ok(()),
    }
}

pub fn bernoulli_log_prob(lik: &BernoulliLikelihood, x: &Matrix) -> Result<Array1<f64>> {
    check_same("bernoulli_log_prob", &lik.logits, x)?;
    check_binary(x)?;
    let mut t = Tape::new();
    let (l, xv) = (t.input(lik.logits.clone()), t.input(x.clone()));
    let out = graph::bernoulli_log_prob(&mut t, l, xv);
    Ok(column(t.value(out)))
}

/// Free-bits floor λ(epoch): constant, then linearly annealed to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeBitsSchedule {
    pub lambda_nats: f64,
    pub constant_epochs: usize,
    pub anneal_epochs: usize,
}

impl FreeBitsSchedule {
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch < self.constant_epochs {
            self.lambda_nats
        } else if epoch < self.constant_epochs + self.anneal_epochs {
            let progress = (epoch - self.constant_epochs) as f64 / self.anneal_epochs as f64;
            self.lambda_nats * (1.0 - progress)
        } else {
            0.0
        }
    }
}

/// One clamp per stochastic layer: `max(KL_i, λ(epoch))`.
pub fn free_bits_kl(kl_per_layer: &[f64], schedule: &FreeBitsSchedule, epoch: usize) -> Vec<f64> {
    let lambda = schedule.lambda_at(epoch);
    kl_per_layer.iter().map(|&kl| kl.max(lambda)).collect()
}

/// Tape versions of the densities; every result is a `[B, 1]` column.
pub mod graph {
    use super::*;
    use crate::nn::Var;

    pub fn gaussian_log_prob(t: &mut Tape, mean: Var, log_var: Var, z: Var) -> Var {
        let d = t.sub(z, mean);
        let sq = t.square(d);
        let neg_lv = t.scale(log_var, -1.0);
        let inv_var = t.exp(neg_lv);
        let maha = t.mul(sq, inv_var);
        let s = t.add(log_var, maha);
        let s = t.offset(s, 2.0 * half_log_two_pi());
        let s = t.scale(s, -0.5);
        t.sum_cols(s)
    }

    /// Standard normal density `N(0, I)` at `z`.
    pub fn standard_log_prob(t: &mut Tape, z: Var) -> Var {
        let sq = t.square(z);
        let s = t.offset(sq, 2.0 * half_log_two_pi());
        let s = t.scale(s, -0.5);
        t.sum_cols(s)
    }

    pub fn rsample(t: &mut Tape, mean: Var, log_var: Var, noise: Var) -> Var {
        let half = t.scale(log_var, 0.5);
        let std = t.exp(half);
        let scaled = t.mul(std, noise);
        t.add(mean, scaled)
    }

    pub fn gaussian_kl(t: &mut Tape, q_mean: Var, q_lv: Var, p_mean: Var, p_lv: Var) -> Var {
        let lv_diff = t.sub(q_lv, p_lv);
        let ratio = t.exp(lv_diff);
        let d = t.sub(p_mean, q_mean);
        let sq = t.square(d);
        let neg_plv = t.scale(p_lv, -1.0);
        let inv_p = t.exp(neg_plv);
        let maha = t.mul(sq, inv_p);
        let s = t.add(ratio, maha);
        let s = t.offset(s, -1.0);
        let neg_diff = t.scale(lv_diff, -1.0);
        let s = t.add(s, neg_diff);
        let s = t.scale(s, 0.5);
        t.sum_cols(s)
    }

    /// `Σ_D x·l − softplus(l)`, i.e. `x·logσ(l) + (1−x)·logσ(−l)`.
    pub fn bernoulli_log_prob(t: &mut Tape, logits: Var, x: Var) -> Var {
        let xl = t.mul(x, logits);
        let sp = t.softplus(logits, 1.0);
        let ll = t.sub(xl, sp);
        t.sum_cols(ll)
    }

    /// Splits a `[B, 2d]` head output into `(mean, log_variance)` with the
    /// variance produced by softplus(β = log 2) and the log-variance clamped.
    pub fn gaussian_head(t: &mut Tape, raw: Var, dim: usize) -> (Var, Var) {
        let mean = t.slice(raw, 0, dim);
        let pre = t.slice(raw, dim, 2 * dim);
        let var = t.softplus(pre, VARIANCE_SOFTPLUS_BETA);
        let lv = t.log(var);
        let lv = t.clamp(lv, LOG_VARIANCE_MIN, LOG_VARIANCE_MAX);
        (mean, lv)
    }
}
