use crate::data::PIXELS;
use crate::dist::FreeBitsSchedule;
use crate::error::{Error, Result};
use crate::nn::checkpoint::Descriptor;

/// Architecture and training schedule of a bottom-up hierarchical VAE.
#[derive(Clone, Debug, PartialEq)]
pub struct HvaeConfig {
    /// One entry per stochastic layer, bottom (z₁) first.
    pub latent_dims: Vec<usize>,
    pub hidden_dim: usize,
    pub blocks_per_transform: usize,
    pub input_dim: usize,
    pub free_bits: FreeBitsSchedule,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_batch_size: usize,
    pub seed: u64,
}

impl Default for HvaeConfig {
    fn default() -> Self {
        Self::with_epochs(200)
    }
}

impl HvaeConfig {
    /// Desk-scale defaults with warmup, free-bits plateau and free-bits
    /// annealing each lasting a tenth of the run.
    pub fn with_epochs(epochs: usize) -> Self {
        let tenth = epochs / 10;
        Self {
            latent_dims: vec![64, 32, 16],
            hidden_dim: 256,
            blocks_per_transform: 2,
            input_dim: PIXELS,
            free_bits: FreeBitsSchedule {
                lambda_nats: 2.0,
                constant_epochs: tenth,
                anneal_epochs: tenth,
            },
            warmup_epochs: tenth,
            learning_rate: 3e-4,
            batch_size: 128,
            epochs,
            init_batch_size: 512,
            seed: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.latent_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.latent_dims.is_empty() {
            return bad("latent_dims must name at least one layer");
        }
        if self.latent_dims.contains(&0) {
            return bad("latent dimensions must be positive");
        }
        if self.hidden_dim == 0 || self.input_dim == 0 {
            return bad("hidden_dim and input_dim must be positive");
        }
        if self.blocks_per_transform == 0 {
            return bad("blocks_per_transform must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.init_batch_size < 2 {
            return bad("init_batch_size must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.free_bits.lambda_nats.is_nan() || self.free_bits.lambda_nats < 0.0 {
            return bad("free-bits lambda must be non-negative");
        }
        Ok(())
    }

    /// β(epoch) = min(1, epoch / warmup).
    pub fn warmup_beta(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.warmup_epochs as f64).min(1.0)
        }
    }

    pub fn descriptor(&self) -> Descriptor {
        let dims: Vec<String> = self.latent_dims.iter().map(|d| d.to_string()).collect();
        [
            ("latent_dims", dims.join(",")),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("blocks_per_transform", self.blocks_per_transform.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("free_bits_lambda", format!("{:e}", self.free_bits.lambda_nats)),
            ("free_bits_constant_epochs", self.free_bits.constant_epochs.to_string()),
            ("free_bits_anneal_epochs", self.free_bits.anneal_epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("learning_rate", format!("{:e}", self.learning_rate)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("init_batch_size", self.init_batch_size.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_descriptor(d: &Descriptor) -> Result<Self> {
        let get = |key: &str| {
            d.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::SchemaMismatch(format!("checkpoint descriptor lacks `{key}`")))
        };
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::SchemaMismatch(format!("bad value `{v}` for `{key}`")))
        }
        let latent_dims = get("latent_dims")?
            .split(',')
            .map(|s| parse("latent_dims", s))
            .collect::<Result<Vec<usize>>>()?;
        let cfg = Self {
            latent_dims,
            hidden_dim: parse("hidden_dim", get("hidden_dim")?)?,
            blocks_per_transform: parse("blocks_per_transform", get("blocks_per_transform")?)?,
            input_dim: parse("input_dim", get("input_dim")?)?,
            free_bits: FreeBitsSchedule {
                lambda_nats: parse("free_bits_lambda", get("free_bits_lambda")?)?,
                constant_epochs: parse("free_bits_constant_epochs", get("free_bits_constant_epochs")?)?,
                anneal_epochs: parse("free_bits_anneal_epochs", get("free_bits_anneal_epochs")?)?,
            },
            warmup_epochs: parse("warmup_epochs", get("warmup_epochs")?)?,
            learning_rate: parse("learning_rate", get("learning_rate")?)?,
            batch_size: parse("batch_size", get("batch_size")?)?,
            epochs: parse("epochs", get("epochs")?)?,
            init_batch_size: parse("init_batch_size", get("init_batch_size")?)?,
            seed: parse("seed", get("seed")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_scale_with_epochs() {
        let c = HvaeConfig::with_epochs(200);
        assert_eq!(c.warmup_epochs, 20);
        assert_eq!(c.free_bits.constant_epochs, 20);
        assert_eq!(c.free_bits.anneal_epochs, 20);
        assert_eq!(c.warmup_beta(0), 0.0);
        assert_eq!(c.warmup_beta(10), 0.5);
        assert_eq!(c.warmup_beta(50), 1.0);
        assert_eq!(c.latent_dims, vec![64, 32, 16]);
    }

    #[test]
    fn descriptor_roundtrip() {
        let mut c = HvaeConfig::with_epochs(30);
        c.learning_rate = 1.234e-3;
        c.seed = 99;
        assert_eq!(HvaeConfig::from_descriptor(&c.descriptor()).unwrap(), c);
    }
}
