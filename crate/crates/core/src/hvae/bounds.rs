//! ELBO, L^{>k}, L^{<l} and their importance-weighted versions, evaluated by
//! one shared pass parameterized by which layers come from the posterior.

use std::fmt;

use ndarray::{Array1, Array2, Axis};

use crate::dist::{check_binary, graph, DiagGaussian};
use crate::error::{Error, Result};
use crate::nn::{tape, Forward, Matrix, Var};
use crate::rng::Rng;

use super::model::HvaeModel;
use super::noise::LatentNoise;

/// Rows (examples × importance samples) per forward pass during evaluation.
pub const CHUNK_ROWS: usize = 2048;

/// Which layers are inferred, forwarded as modes, or drawn from the prior.
///
/// Layer `i` (1-based) is
/// * drawn from the conditional prior with its inference-side value replaced
///   by the posterior mean when `i ≤ mode_upto`,
/// * drawn from the posterior (and scored) when `mode_upto < i ≤ top`,
/// * drawn from the prior (and not scored) when `i > top`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Plan {
    pub mode_upto: usize,
    pub top: usize,
}

impl Plan {
    pub fn elbo(layers: usize) -> Self {
        Self {
            mode_upto: 0,
            top: layers,
        }
    }

    pub fn gt_k(k: usize, layers: usize) -> Self {
        Self { mode_upto: k, top: layers }
    }

    pub fn lt_l(l: usize) -> Self {
        Self { mode_upto: 0, top: l }
    }

    pub fn prior_only() -> Self {
        Self { mode_upto: 0, top: 0 }
    }

    pub fn source(&self, i: usize) -> Proposal {
        if i > self.top || i <= self.mode_upto {
            Proposal::ConditionalPrior
        } else {
            Proposal::Posterior
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Proposal {
    Posterior,
    ConditionalPrior,
    DeterministicMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundKind {
    Elbo,
    /// `L^{>k}`: the k lowest latents regenerated from the conditional prior.
    GtK(usize),
    /// `L^{<l}`: the latents above `l` drawn from the prior.
    LtL(usize),
}

impl BoundKind {
    pub fn plan(self, layers: usize) -> Result<Plan> {
        match self {
            BoundKind::Elbo => Ok(Plan::elbo(layers)),
            BoundKind::GtK(k) if k < layers => Ok(Plan::gt_k(k, layers)),
            BoundKind::GtK(k) => Err(Error::InvalidK { k, layers }),
            BoundKind::LtL(l) if (1..=layers).contains(&l) => Ok(Plan::lt_l(l)),
            BoundKind::LtL(l) => Err(Error::InvalidL { l, layers }),
        }
    }
}

impl fmt::Display for BoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundKind::Elbo => write!(f, "elbo"),
            BoundKind::GtK(k) => write!(f, "gt_{k}"),
            BoundKind::LtL(l) => write!(f, "lt_{l}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundId {
    pub kind: BoundKind,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundResult {
    pub bound: BoundId,
    /// Nats per example.
    pub per_example_value: Array1<f64>,
    /// `[B, L+1]`: decoder term then one log-ratio per layer (zero where the
    /// layer is not scored). For `S > 1` these are means over samples.
    pub per_layer_terms: Array2<f64>,
}

#[derive(Default)]
pub(crate) struct InferenceVars {
    /// Inference-side value per layer: the posterior mean (mode-forwarded
    /// layers) or the posterior sample.
    pub values: Vec<Var>,
    pub posterior: Vec<Option<(Var, Var)>>,
}

pub(crate) struct PassVars {
    pub inference: InferenceVars,
    pub z: Vec<Var>,
    pub prior: Vec<(Var, Var)>,
    /// Index 0 is `log p(x|z₁)`, index `i` the log-ratio for `z_i`.
    pub terms: Vec<Option<Var>>,
    pub logits: Var,
}

impl HvaeModel {
    pub(crate) fn infer(&self, f: &mut Forward<'_>, x: Var, plan: Plan, noise: &LatentNoise) -> Result<InferenceVars> {
        let mut inf = InferenceVars::default();
        for j in 0..plan.top {
            let below = if j == 0 { x } else { inf.values[j - 1] };
            let skip = match j {
                0 => None,
                1 => Some(x),
                _ => Some(inf.values[j - 2]),
            };
            let (m, lv) = self.posterior_params(f, j, below, skip)?;
            let value = if j < plan.mode_upto {
                m
            } else {
                let e = f.tape.input(noise.posterior[j].clone());
                graph::rsample(&mut f.tape, m, lv, e)
            };
            inf.values.push(value);
            inf.posterior.push(Some((m, lv)));
        }
        Ok(inf)
    }

    pub(crate) fn generate(
        &self,
        f: &mut Forward<'_>,
        x: Var,
        plan: Plan,
        inf: &InferenceVars,
        noise: &LatentNoise,
    ) -> Result<PassVars> {
        let l = self.num_layers();
        let mut z: Vec<Option<Var>> = vec![None; l];
        let mut prior: Vec<Option<(Var, Var)>> = vec![None; l];
        let mut terms: Vec<Option<Var>> = vec![None; l + 1];
        for j in (0..l).rev() {
            let params = if j + 1 == l {
                None
            } else {
                let above = z[j + 1].expect("generated top-down");
                let skip = if j + 2 < l { z[j + 2] } else { None };
                Some(self.prior_params(f, j, above, skip)?)
            };
            let zj = match plan.source(j + 1) {
                Proposal::Posterior => {
                    let zj = inf.values[j];
                    let lp = match params {
                        Some((pm, plv)) => graph::gaussian_log_prob(&mut f.tape, pm, plv, zj),
                        None => graph::standard_log_prob(&mut f.tape, zj),
                    };
                    let (qm, qlv) = inf.posterior[j].expect("posterior layer was inferred");
                    let lq = graph::gaussian_log_prob(&mut f.tape, qm, qlv, zj);
                    terms[j + 1] = Some(f.tape.sub(lp, lq));
                    zj
                }
                _ => {
                    let e = f.tape.input(noise.prior[j].clone());
                    match params {
                        Some((pm, plv)) => graph::rsample(&mut f.tape, pm, plv, e),
                        None => e,
                    }
                }
            };
            z[j] = Some(zj);
            prior[j] = Some(match params {
                Some(p) => p,
                None => {
                    let zero = f.tape.input(Matrix::zeros(f.tape.value(zj).raw_dim()));
                    (zero, zero)
                }
            });
        }
        let z: Vec<Var> = z.into_iter().map(|v| v.expect("all layers generated")).collect();
        let logits = self.decoder_logits(f, z[0], z.get(1).copied())?;
        terms[0] = Some(graph::bernoulli_log_prob(&mut f.tape, logits, x));
        Ok(PassVars {
            inference: InferenceVars {
                values: inf.values.clone(),
                posterior: inf.posterior.clone(),
            },
            z,
            prior: prior.into_iter().map(|p| p.expect("all layers generated")).collect(),
            terms,
            logits,
        })
    }

    /// Records the whole pass for `plan` on `f`'s tape. `x` must already be
    /// replicated to `noise.rows()` rows.
    pub(crate) fn pass(&self, f: &mut Forward<'_>, x: Var, plan: Plan, noise: &LatentNoise) -> Result<PassVars> {
        let inf = self.infer(f, x, plan, noise)?;
        self.generate(f, x, plan, &inf, noise)
    }
}

impl HvaeModel {
    /// Records a bound on `f`'s tape and returns its per-layer terms as
    /// `[rows, 1]` columns (decoder first; excluded layers omitted).
    pub fn record_terms(&self, f: &mut Forward<'_>, x: Var, plan: Plan, noise: &LatentNoise) -> Result<Vec<Var>> {
        Ok(self.pass(f, x, plan, noise)?.terms.into_iter().flatten().collect())
    }
}

fn replicate(x: &Matrix, samples: usize) -> Matrix {
    if samples == 1 {
        return x.clone();
    }
    let idx: Vec<usize> = (0..x.nrows()).flat_map(|b| std::iter::repeat_n(b, samples)).collect();
    x.select(Axis(0), &idx)
}

fn check_input(model: &HvaeModel, x: &Matrix, noise: &LatentNoise) -> Result<()> {
    if x.ncols() != model.config.input_dim {
        return Err(Error::ShapeMismatch {
            op: "bound",
            left: x.shape().to_vec(),
            right: vec![x.nrows(), model.config.input_dim],
        });
    }
    if noise.samples == 0 {
        return Err(Error::Domain("importance samples must be positive".into()));
    }
    let dims: Vec<usize> = noise.posterior.iter().map(|m| m.ncols()).collect();
    if noise.rows() != x.nrows() * noise.samples || dims != model.latent_dims() {
        return Err(Error::ShapeMismatch {
            op: "bound noise",
            left: vec![noise.rows(), dims.len()],
            right: vec![x.nrows() * noise.samples, model.num_layers()],
        });
    }
    check_binary(x)
}

/// `log (1/n) Σ exp(v)`.
pub fn log_mean_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += (v - max).exp();
        n += 1;
    }
    max + (sum / n as f64).ln()
}

/// Evaluates `kind` on binary `x` using the given noise.
pub fn evaluate(model: &HvaeModel, x: &Matrix, kind: BoundKind, noise: &LatentNoise) -> Result<BoundResult> {
    let l = model.num_layers();
    let plan = kind.plan(l)?;
    check_input(model, x, noise)?;
    let s = noise.samples;
    let b = x.nrows();
    let chunk = (CHUNK_ROWS / s).max(1);

    let mut terms = Array2::zeros((b * s, l + 1));
    let mut start = 0;
    while start < b {
        let end = (start + chunk).min(b);
        let xs = replicate(&x.slice(ndarray::s![start..end, ..]).to_owned(), s);
        let ns = noise.examples(start, end);
        let mut f = Forward::new(&model.store);
        let xv = f.tape.input(xs);
        let pass = model.pass(&mut f, xv, plan, &ns)?;
        for (c, t) in pass.terms.iter().enumerate() {
            if let Some(t) = t {
                terms
                    .slice_mut(ndarray::s![start * s..end * s, c])
                    .assign(&f.tape.value(*t).column(0));
            }
        }
        start = end;
    }

    // sequential column sum, so the row-sum identity holds exactly
    let row_values: Vec<f64> = terms.rows().into_iter().map(|r| r.iter().fold(0.0, |a, &t| a + t)).collect();
    let (per_example_value, per_layer_terms) = if s == 1 {
        (Array1::from(row_values), terms)
    } else {
        let values = (0..b).map(|i| log_mean_exp(row_values[i * s..(i + 1) * s].iter().copied())).collect();
        let means = terms
            .into_shape_with_order((b, s, l + 1))
            .expect("example-major rows")
            .mean_axis(Axis(1))
            .expect("samples > 0");
        (values, means)
    };
    Ok(BoundResult {
        bound: BoundId { kind, samples: s },
        per_example_value,
        per_layer_terms,
    })
}

fn draw(model: &HvaeModel, x: &Matrix, samples: usize, rng: &mut Rng) -> LatentNoise {
    LatentNoise::draw(rng, x.nrows(), samples, model.latent_dims())
}

/// Single-sample (`S = 1`) or importance-weighted ELBO.
pub fn elbo(model: &HvaeModel, x: &Matrix, samples: usize, rng: &mut Rng) -> Result<BoundResult> {
    evaluate(model, x, BoundKind::Elbo, &draw(model, x, samples, rng))
}

/// `L^{>k}`: `z_{>k} ~ q(·|d_k(x))`, `z_{≤k} ~ p(·|z_{>k})`, scored as
/// `log p(x|z) + log p(z_{>k}) − log q(z_{>k}|d_k(x))`.
pub fn bound_gt_k(model: &HvaeModel, x: &Matrix, k: usize, samples: usize, rng: &mut Rng) -> Result<BoundResult> {
    evaluate(model, x, BoundKind::GtK(k), &draw(model, x, samples, rng))
}

/// `L^{<l}`: `z_{≤l}` from the posterior bottom-up, `z_{>l}` from the prior
/// chain, scored as `log p(x|z₁) + Σ_{i≤l} log p(z_i|·)/q(z_i|·)`.
pub fn bound_lt_l(model: &HvaeModel, x: &Matrix, l: usize, samples: usize, rng: &mut Rng) -> Result<BoundResult> {
    evaluate(model, x, BoundKind::LtL(l), &draw(model, x, samples, rng))
}

/// Single-sample terms of the hierarchical KL sum.
#[derive(Clone, Debug, PartialEq)]
pub struct KlDecomposition {
    pub decoder: Array1<f64>,
    /// `[B, L]`: `log p(z_i|z_{i+1}) − log q(z_i|z_{i−1})`, top layer against `N(0, I)`.
    pub terms: Array2<f64>,
}

pub fn kl_decomposition_with(model: &HvaeModel, x: &Matrix, noise: &LatentNoise) -> Result<KlDecomposition> {
    let r = evaluate(model, x, BoundKind::Elbo, noise)?;
    Ok(KlDecomposition {
        decoder: r.per_layer_terms.column(0).to_owned(),
        terms: r.per_layer_terms.slice(ndarray::s![.., 1..]).to_owned(),
    })
}

pub fn kl_decomposition(model: &HvaeModel, x: &Matrix, rng: &mut Rng) -> Result<KlDecomposition> {
    kl_decomposition_with(model, x, &draw(model, x, 1, rng))
}

/// Latent reconstruction: `z_{>k}` from the posterior (its mean when
/// `use_mode`), `z_{≤k}` from the conditional prior; returns Bernoulli means.
pub fn reconstruct(model: &HvaeModel, x: &Matrix, k: usize, rng: &mut Rng, use_mode: bool) -> Result<Matrix> {
    let plan = BoundKind::GtK(k).plan(model.num_layers())?;
    let mut noise = draw(model, x, 1, rng);
    if use_mode {
        noise.posterior.iter_mut().for_each(|m| m.fill(0.0));
    }
    check_input(model, x, &noise)?;
    let mut f = Forward::new(&model.store);
    let xv = f.tape.input(x.clone());
    let pass = model.pass(&mut f, xv, plan, &noise)?;
    Ok(f.tape.value(pass.logits).mapv(tape::sigmoid))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    /// How the inference side treated this layer, if it was inferred.
    pub inference: Option<(Proposal, DiagGaussian)>,
    /// Distribution the generative-side value was taken from.
    pub proposal: Proposal,
    pub prior: DiagGaussian,
    pub sample: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPass {
    pub layers: Vec<LayerRecord>,
    pub decoder_logits: Matrix,
}

/// Every intermediate quantity of one single-sample evaluation.
pub fn latent_pass(model: &HvaeModel, x: &Matrix, kind: BoundKind, noise: &LatentNoise) -> Result<LatentPass> {
    let plan = kind.plan(model.num_layers())?;
    check_input(model, x, noise)?;
    let mut f = Forward::new(&model.store);
    let xv = f.tape.input(replicate(x, noise.samples));
    let pass = model.pass(&mut f, xv, plan, noise)?;
    let gaussian = |(m, lv): (Var, Var)| DiagGaussian {
        mean: f.tape.value(m).clone(),
        log_variance: f.tape.value(lv).clone(),
    };
    let layers = (0..model.num_layers())
        .map(|j| {
            let inference = pass.inference.posterior.get(j).copied().flatten().map(|q| {
                let tag = if j < plan.mode_upto {
                    Proposal::DeterministicMode
                } else {
                    Proposal::Posterior
                };
                (tag, gaussian(q))
            });
            LayerRecord {
                inference,
                proposal: plan.source(j + 1),
                prior: gaussian(pass.prior[j]),
                sample: f.tape.value(pass.z[j]).clone(),
            }
        })
        .collect();
    Ok(LatentPass {
        layers,
        decoder_logits: f.tape.value(pass.logits).clone(),
    })
}
