use std::path::Path;

use crate::data::BinarizedBatch;
use crate::dist::{check_binary, graph};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, Forward, Matrix, ParamStore, ResidualBlock, Var, WeightNormDense};
use crate::rng::{streams, substream, Rng};

use super::bounds::{self, Plan};
use super::config::HvaeConfig;
use super::noise::LatentNoise;

/// Deterministic transform followed by a linear head:
/// `head(relu(blocks(input(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub input: WeightNormDense,
    pub blocks: Vec<ResidualBlock>,
    pub head: WeightNormDense,
}

impl Transform {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, hidden: usize, blocks: usize, out: usize, rng: &mut Rng) -> Self {
        Self {
            input: WeightNormDense::new(store, &format!("{name}.in"), fan_in, hidden, rng),
            blocks: (0..blocks)
                .map(|b| ResidualBlock::new(store, &format!("{name}.block{b}"), hidden, rng))
                .collect(),
            head: WeightNormDense::new(store, &format!("{name}.head"), hidden, out, rng),
        }
    }

    pub fn apply(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let mut h = self.input.apply(f, x)?;
        for b in &self.blocks {
            h = b.apply(f, h)?;
        }
        let h = f.tape.relu(h);
        self.head.apply(f, h)
    }
}

/// A stochastic layer's transform plus the optional skip projection that
/// brings in the variable two steps away.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub transform: Transform,
    pub skip: Option<WeightNormDense>,
}

impl Stage {
    /// Runs the stage on `primary` and, when wired, `concat(primary, proj(skip))`.
    pub fn apply(&self, f: &mut Forward<'_>, primary: Var, skip: Option<Var>) -> Result<Var> {
        let input = match (&self.skip, skip) {
            (Some(proj), Some(s)) => {
                let p = proj.apply(f, s)?;
                f.tape.concat(primary, p)
            }
            (None, None) => primary,
            _ => unreachable!("skip wiring mismatch"),
        };
        self.transform.apply(f, input)
    }
}

/// Bottom-up hierarchical VAE.
///
/// Inference: `q(z₁|x)·Π q(z_i|z_{i−1})`. Generative: `p(x|z₁)·Π p(z_i|z_{i+1})·p(z_L)`
/// with `p(z_L) = N(0, I)`. Skip connections feed `z_i` (with `z₀ = x`) into the
/// transform producing `z_{i+2}` in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct HvaeModel {
    pub config: HvaeConfig,
    pub store: ParamStore,
    /// `inference[j]` parameterizes `q(z_{j+1} | ·)`.
    pub inference: Vec<Stage>,
    /// `generative[j]` parameterizes `p(z_{j+1} | z_{j+2}, ·)`, for `j < L−1`.
    pub generative: Vec<Stage>,
    pub decoder: Stage,
}

impl HvaeModel {
    /// Registers all parameters (with random directions but no data-dependent
    /// initialization). Registration order is fixed by the architecture.
    pub fn skeleton(config: &HvaeConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let dims = &config.latent_dims;
        let l = dims.len();
        let (h, nb, d_in) = (config.hidden_dim, config.blocks_per_transform, config.input_dim);
        let dim_of = |i: usize| if i == 0 { d_in } else { dims[i - 1] };
        let mut store = ParamStore::default();

        let mut inference = Vec::with_capacity(l);
        for (j, &out_dim) in dims.iter().enumerate() {
            // q(z_{j+1} | z_j, z_{j-1})
            let primary = dim_of(j);
            let skip = (j >= 1).then(|| WeightNormDense::new(&mut store, &format!("inf{j}.skip"), dim_of(j - 1), primary, rng));
            let width = if skip.is_some() { 2 * primary } else { primary };
            let transform = Transform::new(&mut store, &format!("inf{j}"), width, h, nb, 2 * out_dim, rng);
            inference.push(Stage { transform, skip });
        }

        let mut generative = Vec::with_capacity(l.saturating_sub(1));
        for j in 0..l.saturating_sub(1) {
            // p(z_{j+1} | z_{j+2}, z_{j+3})
            let primary = dims[j + 1];
            let skip = (j + 2 < l).then(|| WeightNormDense::new(&mut store, &format!("gen{j}.skip"), dims[j + 2], primary, rng));
            let width = if skip.is_some() { 2 * primary } else { primary };
            let transform = Transform::new(&mut store, &format!("gen{j}"), width, h, nb, 2 * dims[j], rng);
            generative.push(Stage { transform, skip });
        }

        let skip = (l >= 2).then(|| WeightNormDense::new(&mut store, "dec.skip", dims[1], dims[0], rng));
        let width = if skip.is_some() { 2 * dims[0] } else { dims[0] };
        let transform = Transform::new(&mut store, "dec", width, h, nb, d_in, rng);
        let decoder = Stage { transform, skip };

        Ok(Self {
            config: config.clone(),
            store,
            inference,
            generative,
            decoder,
        })
    }

    /// Builds the model and runs data-dependent initialization: the inference
    /// stack bottom-up on `init_batch`, then the generative stack top-down on
    /// a sample from the prior.
    pub fn build(config: &HvaeConfig, init_batch: &BinarizedBatch) -> Result<Self> {
        let mut rng = substream(config.seed, streams::INIT, 0);
        let mut model = Self::skeleton(config, &mut rng)?;
        let x = &init_batch.data;
        if x.nrows() < 2 {
            return Err(Error::DegenerateBatch { variance: 0.0 });
        }
        if x.ncols() != config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "build",
                left: x.shape().to_vec(),
                right: vec![x.nrows(), config.input_dim],
            });
        }
        check_binary(x)?;

        let noise = LatentNoise::draw(&mut rng, x.nrows(), 1, &config.latent_dims);
        let arch = model.clone();
        let mut store = std::mem::take(&mut model.store);
        {
            let mut f = Forward::initializing(&mut store, &mut rng);
            let xv = f.tape.input(x.clone());
            arch.infer(&mut f, xv, Plan::elbo(arch.num_layers()), &noise)?;
        }
        {
            let mut f = Forward::initializing(&mut store, &mut rng);
            let xv = f.tape.input(x.clone());
            let inf = bounds::InferenceVars::default();
            arch.generate(&mut f, xv, Plan::prior_only(), &inf, &noise)?;
        }
        model.store = store;
        Ok(model)
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers()
    }

    pub fn latent_dims(&self) -> &[usize] {
        &self.config.latent_dims
    }

    /// `(mean, log_variance)` of `q(z_{j+1} | below, skip)`.
    pub(crate) fn posterior_params(&self, f: &mut Forward<'_>, j: usize, below: Var, skip: Option<Var>) -> Result<(Var, Var)> {
        let raw = self.inference[j].apply(f, below, skip)?;
        Ok(graph::gaussian_head(&mut f.tape, raw, self.config.latent_dims[j]))
    }

    /// `(mean, log_variance)` of `p(z_{j+1} | above, skip)` for `j < L−1`.
    pub(crate) fn prior_params(&self, f: &mut Forward<'_>, j: usize, above: Var, skip: Option<Var>) -> Result<(Var, Var)> {
        let raw = self.generative[j].apply(f, above, skip)?;
        Ok(graph::gaussian_head(&mut f.tape, raw, self.config.latent_dims[j]))
    }

    pub(crate) fn decoder_logits(&self, f: &mut Forward<'_>, z1: Var, skip: Option<Var>) -> Result<Var> {
        self.decoder.apply(f, z1, skip)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.config.descriptor(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (descriptor, values) = checkpoint::load(path)?;
        let config = HvaeConfig::from_descriptor(&descriptor)?;
        let mut model = Self::skeleton(&config, &mut substream(config.seed, streams::INIT, 0))?;
        checkpoint::fill(&mut model.store, &values)?;
        Ok(model)
    }

    /// Forwards posterior means through every inference layer and returns
    /// them, bottom first.
    pub fn posterior_modes(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut f = Forward::new(&self.store);
        let xv = f.tape.input(x.clone());
        let l = self.num_layers();
        let noise = LatentNoise::zeros(x.nrows(), 1, self.latent_dims());
        let inf = self.infer(&mut f, xv, Plan::gt_k(l, l), &noise)?;
        Ok(inf.posterior.iter().map(|p| f.tape.value(p.expect("all layers inferred").0).clone()).collect())
    }
}
