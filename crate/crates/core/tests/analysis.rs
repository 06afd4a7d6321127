use hvae_core::analysis::*;
use hvae_core::data::{binarize_eval, IdxDataset, Split};
use hvae_core::hvae::{HvaeConfig, HvaeModel};
use hvae_core::rng::substream;
use ndarray::Array3;
use rand::Rng as _;
use statrs::function::gamma::ln_gamma as oracle_ln_gamma;

fn layer(d_in: usize, d_out: usize, sigma: f64) -> JacobianLayerSpec {
    JacobianLayerSpec::new(d_in, d_out, sigma).unwrap()
}

fn within_3se(s: JacobianLayerSpec, samples: usize, seed: u64) -> (bool, f64, McEstimate) {
    let exact = expected_inverse_volume(s).unwrap().exp();
    let mc = mc_inverse_volume(s, samples, seed).unwrap();
    ((mc.mean - exact).abs() <= 3.0 * mc.standard_error, exact, mc)
}

#[test]
fn ln_gamma_matches_reference_implementation() {
    let mut rng = substream(0, "lgamma", 0);
    for _ in 0..2000 {
        let x = 10f64.powf(rng.random_range(-3.0..4.0));
        let (a, b) = (ln_gamma(x).unwrap(), oracle_ln_gamma(x));
        assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "x={x}: {a} vs {b}");
    }
    for x in [0.5, 1.5, 2.5, 10.0, 171.5, 5000.0] {
        assert!((ln_gamma(x).unwrap() - oracle_ln_gamma(x)).abs() < 1e-12 * (1.0 + oracle_ln_gamma(x).abs()));
    }
}

#[test]
fn monte_carlo_matches_closed_form_examples() {
    let (ok, exact, mc) = within_3se(layer(4, 2, 1.0), 1_000_000, 1);
    assert_eq!(exact, 0.5);
    assert!(ok, "{mc:?}");
    let (ok, _, mc) = within_3se(layer(3, 1, 1.0), 200_000, 2);
    assert!(ok, "{mc:?}");

    let one = mc_inverse_volume(layer(5, 2, 1.0), 200_000, 3).unwrap();
    let two = mc_inverse_volume(layer(5, 2, 2.0), 200_000, 4).unwrap();
    let ratio = two.mean / one.mean;
    let ratio_se = ratio * ((one.standard_error / one.mean).powi(2) + (two.standard_error / two.mean).powi(2)).sqrt();
    assert!((ratio - 0.25).abs() < 3.0 * ratio_se, "{ratio} ± {ratio_se}");
}

#[test]
fn monte_carlo_is_deterministic_and_checks_inputs() {
    let s = layer(4, 3, 0.7);
    assert_eq!(mc_inverse_volume(s, 5000, 9).unwrap(), mc_inverse_volume(s, 5000, 9).unwrap());
    assert!(mc_inverse_volume(s, 999, 9).is_err());
    assert!(mc_inverse_volume(layer(13, 3, 1.0), 5000, 9).is_err());
    assert!(JacobianLayerSpec::new(3, 3, 1.0).is_err());
    assert!(JacobianLayerSpec::new(3, 1, 0.0).is_err());
}

#[test]
fn closed_form_matches_monte_carlo_on_grid() {
    let mut failures = Vec::new();
    let mut seed = 100;
    for d_in in 2..=10 {
        for d_out in 1..d_in {
            for sigma in [0.5, 1.0, 2.0] {
                seed += 1;
                let (ok, exact, mc) = within_3se(layer(d_in, d_out, sigma), 100_000, seed);
                if !ok {
                    failures.push((d_in, d_out, sigma, exact, mc));
                }
            }
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn log_space_is_stable_at_large_dimension() {
    for d in [100, 1000, 10_000] {
        let v = expected_inverse_volume(layer(d, d - 2, 1.0)).unwrap();
        assert!(v.is_finite() && v < 0.0);
    }
    let rows = dimension_sweep(2, (1000..=10_000).step_by(1000), 1.0).unwrap();
    assert_eq!(rows.len(), 10);
}

fn model(seed: u64) -> HvaeModel {
    let mut rng = substream(seed, "images", 0);
    let images = Array3::from_shape_simple_fn((32, 28, 28), || rng.random::<u8>());
    let d = IdxDataset::new(images, None, "init", Split::Train).unwrap();
    let cfg = HvaeConfig {
        latent_dims: vec![4, 3, 2],
        hidden_dim: 8,
        blocks_per_transform: 1,
        init_batch_size: 32,
        seed,
        ..HvaeConfig::with_epochs(1)
    };
    HvaeModel::build(&cfg, &binarize_eval(&d, &(0..32).collect::<Vec<_>>(), seed)).unwrap()
}

#[test]
fn self_correlation_has_unit_diagonal() {
    let mut rng = substream(5, "images", 1);
    let images = Array3::from_shape_simple_fn((MIN_CORRELATION_EXAMPLES, 28, 28), || rng.random::<u8>());
    let d = IdxDataset::new(images, None, "toy", Split::Test).unwrap();
    let all: Vec<usize> = (0..d.len()).collect();
    let (a, b) = (model(1), model(2));
    let maps = cross_model_correlation(&a, &a, &d, &all, 3).unwrap();
    assert_eq!(maps.len(), 9);
    for m in &maps {
        assert!(m.matrix.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if m.layer_a == m.layer_b {
            for i in 0..m.matrix.nrows() {
                if !m.dead_a[i] {
                    assert!((m.matrix[[i, i]] - 1.0).abs() < 1e-12);
                }
            }
            assert!(m.matrix.iter().zip(m.matrix.t().iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
    let summary = correlation_summary(&maps);
    assert_eq!((summary[4].layer_a, summary[4].layer_b), (2, 2));
    let cross = cross_model_correlation(&a, &b, &d, &all, 3).unwrap();
    assert!(cross[0].mean_abs() < maps[0].mean_abs());
    assert!(cross_model_correlation(&a, &b, &d, &all[..999], 3).is_err());
}
