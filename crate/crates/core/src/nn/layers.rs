use ndarray::{Array2, Axis};
use rand_distr::{Distribution, Normal};

use super::params::{ParamId, ParamStore};
use super::tape::{self, column_norms, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Standard deviation of the Gaussian used to draw weight-norm directions.
pub const DIRECTION_INIT_STD: f64 = 0.05;

/// Elementwise `(1/β)·log(1 + exp(βx))`.
pub fn softplus_beta(x: &Matrix, beta: f64) -> Matrix {
    assert!(beta > 0.0, "softplus_beta: beta must be positive");
    x.mapv(|v| tape::softplus(v, beta))
}

enum ParamAccess<'a> {
    Frozen(&'a ParamStore),
    Init {
        store: &'a mut ParamStore,
        rng: &'a mut Rng,
    },
}

/// A forward pass being recorded on a tape.
///
/// In initializing mode every dense layer re-initializes itself from the
/// activations it receives before recording, which realizes data-dependent
/// initialization in topological order.
pub struct Forward<'a> {
    pub tape: Tape,
    params: ParamAccess<'a>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params: ParamAccess::Frozen(store),
        }
    }

    pub fn initializing(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            tape: Tape::new(),
            params: ParamAccess::Init { store, rng },
        }
    }

    pub fn store(&self) -> &ParamStore {
        match &self.params {
            ParamAccess::Frozen(s) => s,
            ParamAccess::Init { store, .. } => store,
        }
    }

    pub fn is_initializing(&self) -> bool {
        matches!(self.params, ParamAccess::Init { .. })
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store: &ParamStore = match &self.params {
            ParamAccess::Frozen(s) => s,
            ParamAccess::Init { store, .. } => store,
        };
        self.tape.param(store, id)
    }
}

/// Dense layer with weight normalization `W = g · v / ||v||` (per output column).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNormDense {
    pub direction: ParamId,
    pub scale: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl WeightNormDense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let v = gaussian_matrix(fan_in, fan_out, DIRECTION_INIT_STD, rng);
        let g = Array2::from_shape_vec((1, fan_out), column_norms(&v)).expect("shape");
        Self {
            direction: store.add(format!("{name}.v"), v),
            scale: store.add(format!("{name}.g"), g),
            bias: store.add(format!("{name}.b"), Array2::zeros((1, fan_out))),
            fan_in,
            fan_out,
        }
    }

    /// Builds a layer around existing parameters.
    pub fn from_params(store: &ParamStore, direction: ParamId, scale: ParamId, bias: ParamId) -> Self {
        let (fan_in, fan_out) = store.value(direction).dim();
        Self {
            direction,
            scale,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn effective_weight(&self, store: &ParamStore) -> Matrix {
        let v = store.value(self.direction);
        let g = store.value(self.scale);
        let norms = column_norms(v);
        let mut w = v.clone();
        for (j, mut col) in w.axis_iter_mut(Axis(1)).enumerate() {
            col *= g[[0, j]] / norms[j];
        }
        w
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.fan_in {
            return Err(Error::ShapeMismatch {
                op: "dense_forward",
                left: vec![cols],
                right: vec![self.fan_in, self.fan_out],
            });
        }
        Ok(())
    }

    /// `y = x · W + b` without recording.
    pub fn forward_value(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        self.check_input(x.ncols())?;
        Ok(x.dot(&self.effective_weight(store)) + store.value(self.bias))
    }

    pub fn apply(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        self.check_input(f.tape.value(x).ncols())?;
        if let ParamAccess::Init { store, rng } = &mut f.params {
            let batch = f.tape.value(x).clone();
            self.data_dependent_init(store, &batch, rng)?;
        }
        let v = f.param(self.direction);
        let g = f.param(self.scale);
        let b = f.param(self.bias);
        let w = f.tape.weight_norm(v, g);
        let y = f.tape.matmul(x, w);
        Ok(f.tape.add_row(y, b))
    }

    /// Redraws the direction and sets scale and bias so that the layer's
    /// output on `batch` has zero mean and unit variance per unit.
    pub fn data_dependent_init(&self, store: &mut ParamStore, batch: &Matrix, rng: &mut Rng) -> Result<()> {
        self.check_input(batch.ncols())?;
        if batch.nrows() < 2 {
            return Err(Error::DegenerateBatch { variance: 0.0 });
        }
        let v = gaussian_matrix(self.fan_in, self.fan_out, DIRECTION_INIT_STD, rng);
        let norms = column_norms(&v);
        let mut unit = v.clone();
        for (j, mut col) in unit.axis_iter_mut(Axis(1)).enumerate() {
            col /= norms[j];
        }
        let t = batch.dot(&unit);
        let mean = t.mean_axis(Axis(0)).expect("nonempty batch");
        let var = t.var_axis(Axis(0), 0.0);
        if let Some(&worst) = var.iter().find(|&&s| s < 1e-10 || !s.is_finite()) {
            return Err(Error::DegenerateBatch { variance: worst });
        }
        let inv_std = var.mapv(|s| 1.0 / s.sqrt());
        *store.value_mut(self.direction) = v;
        *store.value_mut(self.scale) = inv_std.clone().insert_axis(Axis(0));
        *store.value_mut(self.bias) = (-&mean * &inv_std).insert_axis(Axis(0));
        Ok(())
    }
}

/// Dense residual block: `y = Linear(Act(Linear(Act(x)))) + x` with ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub first: WeightNormDense,
    pub second: WeightNormDense,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut Rng) -> Self {
        Self {
            first: WeightNormDense::new(store, &format!("{name}.0"), width, width, rng),
            second: WeightNormDense::new(store, &format!("{name}.1"), width, width, rng),
        }
    }

    pub fn apply(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = f.tape.relu(x);
        let h = self.first.apply(f, h)?;
        let h = f.tape.relu(h);
        let h = self.second.apply(f, h)?;
        Ok(f.tape.add(h, x))
    }
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::array;
    use std::f64::consts::LN_2;

    fn layer(fan_in: usize, fan_out: usize, seed: u64) -> (ParamStore, WeightNormDense) {
        let mut store = ParamStore::default();
        let mut rng = substream(seed, "test", 0);
        let l = WeightNormDense::new(&mut store, "l", fan_in, fan_out, &mut rng);
        (store, l)
    }

    #[test]
    fn identity_configuration() {
        let (mut store, l) = layer(3, 3, 1);
        *store.value_mut(l.direction) = Array2::eye(3) * 2.5;
        *store.value_mut(l.scale) = array![[1.0, 1.0, 1.0]];
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]];
        let y = l.forward_value(&store, &x).unwrap();
        assert!((&y - &x).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn zero_input_gives_bias() {
        let (mut store, l) = layer(4, 2, 2);
        *store.value_mut(l.bias) = array![[0.25, -3.0]];
        let y = l.forward_value(&store, &Array2::zeros((3, 4))).unwrap();
        for row in y.rows() {
            assert_eq!(row.to_vec(), vec![0.25, -3.0]);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (store, l) = layer(4, 2, 3);
        assert!(matches!(
            l.forward_value(&store, &Array2::zeros((2, 5))),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn direction_scaling_leaves_weight_unchanged() {
        let (mut store, l) = layer(5, 4, 4);
        let before = l.effective_weight(&store);
        store.value_mut(l.direction).column_mut(2).mapv_inplace(|x| x * 7.3);
        let after = l.effective_weight(&store);
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn data_dependent_init_normalizes_outputs() {
        let (mut store, l) = layer(6, 5, 5);
        let mut rng = substream(9, "batch", 0);
        let batch = gaussian_matrix(64, 6, 3.0, &mut rng) + 1.5;
        l.data_dependent_init(&mut store, &batch, &mut rng).unwrap();
        let y = l.forward_value(&store, &batch).unwrap();
        let mean = y.mean_axis(Axis(0)).unwrap();
        let var = y.var_axis(Axis(0), 0.0);
        assert!(mean.iter().all(|m| m.abs() < 1e-6), "{mean}");
        assert!(var.iter().all(|v| (0.999..=1.001).contains(v)), "{var}");
    }

    #[test]
    fn constant_batch_is_degenerate() {
        let (mut store, l) = layer(3, 2, 6);
        let batch = Array2::from_elem((8, 3), 0.7);
        let mut rng = substream(0, "x", 0);
        assert!(matches!(
            l.data_dependent_init(&mut store, &batch, &mut rng),
            Err(Error::DegenerateBatch { .. })
        ));
    }

    #[test]
    fn different_batches_give_different_scales() {
        let mut rng = substream(3, "batches", 0);
        let a = gaussian_matrix(32, 4, 1.0, &mut rng);
        let b = gaussian_matrix(32, 4, 2.0, &mut rng);
        let (mut s1, l1) = layer(4, 3, 7);
        let (mut s2, l2) = layer(4, 3, 7);
        l1.data_dependent_init(&mut s1, &a, &mut substream(1, "init", 0)).unwrap();
        l2.data_dependent_init(&mut s2, &b, &mut substream(1, "init", 0)).unwrap();
        assert_ne!(s1.value(l1.scale), s2.value(l2.scale));
    }

    #[test]
    fn residual_block_with_zero_weights_is_identity() {
        let mut store = ParamStore::default();
        let mut rng = substream(1, "rb", 0);
        let block = ResidualBlock::new(&mut store, "rb", 4, &mut rng);
        for l in [&block.first, &block.second] {
            store.value_mut(l.scale).fill(0.0);
        }
        let x = gaussian_matrix(3, 4, 1.0, &mut rng);
        let mut f = Forward::new(&store);
        let xv = f.tape.input(x.clone());
        let y = block.apply(&mut f, xv).unwrap();
        assert_eq!(f.tape.value(y), &x);
    }

    #[test]
    fn softplus_beta_values() {
        let out = softplus_beta(&array![[0.0, 50.0, -50.0]], LN_2);
        assert!((out[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(((out[[0, 1]] - 50.0) / 50.0).abs() < 1e-12);
        // series oracle: log(1 + e^u) = e^u - e^{2u}/2 + ... for u = -50 ln 2
        let u = -50.0 * LN_2;
        let series = (u.exp() - (2.0 * u).exp() / 2.0) / LN_2;
        assert!(out[[0, 2]] > 0.0 && out[[0, 2]] < 1e-14);
        assert!(((out[[0, 2]] - series) / series).abs() < 1e-12);
    }
}
