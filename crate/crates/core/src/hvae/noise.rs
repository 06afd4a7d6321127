use ndarray::{s, Array2};

use crate::dist::standard_normal;
use crate::nn::Matrix;
use crate::rng::{streams, substream, Rng};

/// Standard-normal noise for every stochastic layer, for posterior and prior
/// sampling separately. Rows are example-major: row `b·S + s` is importance
/// sample `s` of example `b`.
///
/// Evaluating several bounds with one `LatentNoise` shares their random
/// numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    pub samples: usize,
    pub posterior: Vec<Matrix>,
    pub prior: Vec<Matrix>,
}

impl LatentNoise {
    pub fn draw(rng: &mut Rng, batch: usize, samples: usize, dims: &[usize]) -> Self {
        let rows = batch * samples;
        let mut posterior = Vec::with_capacity(dims.len());
        let mut prior = Vec::with_capacity(dims.len());
        for &d in dims {
            posterior.push(standard_normal(rows, d, rng));
            prior.push(standard_normal(rows, d, rng));
        }
        Self {
            samples,
            posterior,
            prior,
        }
    }

    /// Noise for dataset rows `indices`: each example draws from its own
    /// substream, so its noise does not depend on batching.
    pub fn for_examples(seed: u64, indices: &[usize], samples: usize, dims: &[usize]) -> Self {
        let rows = indices.len() * samples;
        let mut posterior: Vec<Matrix> = dims.iter().map(|&d| Array2::zeros((rows, d))).collect();
        let mut prior = posterior.clone();
        for (b, &index) in indices.iter().enumerate() {
            let mut rng = substream(seed, streams::SCORE, index as u64);
            let rows = s![b * samples..(b + 1) * samples, ..];
            for (j, &d) in dims.iter().enumerate() {
                posterior[j].slice_mut(rows).assign(&standard_normal(samples, d, &mut rng));
                prior[j].slice_mut(rows).assign(&standard_normal(samples, d, &mut rng));
            }
        }
        Self {
            samples,
            posterior,
            prior,
        }
    }

    pub fn zeros(batch: usize, samples: usize, dims: &[usize]) -> Self {
        let z: Vec<Matrix> = dims.iter().map(|&d| Array2::zeros((batch * samples, d))).collect();
        Self {
            samples,
            posterior: z.clone(),
            prior: z,
        }
    }

    pub fn rows(&self) -> usize {
        self.posterior.first().map_or(0, |m| m.nrows())
    }

    pub fn batch(&self) -> usize {
        self.rows() / self.samples
    }

    /// Examples `start..end`.
    pub fn examples(&self, start: usize, end: usize) -> Self {
        let r = s![start * self.samples..end * self.samples, ..];
        Self {
            samples: self.samples,
            posterior: self.posterior.iter().map(|m| m.slice(r).to_owned()).collect(),
            prior: self.prior.iter().map(|m| m.slice(r).to_owned()).collect(),
        }
    }
}
