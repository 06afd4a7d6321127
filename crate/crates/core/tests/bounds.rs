use std::f64::consts::{LN_2, PI};

use hvae_core::data::BinarizedBatch;
use hvae_core::hvae::*;
use hvae_core::nn::{finite_diff_check, Forward, Matrix, WeightNormDense};
use hvae_core::rng::substream;
use hvae_core::Error;
use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng as _;

fn random_batch(rows: usize, cols: usize, seed: u64) -> BinarizedBatch {
    let mut rng = substream(seed, "test-batch", 0);
    let data = Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 });
    BinarizedBatch {
        data,
        source_indices: (0..rows).collect(),
        seed_state: "test".into(),
    }
}

fn config(dims: &[usize], hidden: usize, input: usize) -> HvaeConfig {
    HvaeConfig {
        latent_dims: dims.to_vec(),
        hidden_dim: hidden,
        input_dim: input,
        blocks_per_transform: 1,
        init_batch_size: 32,
        ..HvaeConfig::with_epochs(10)
    }
}

fn model(dims: &[usize], hidden: usize, input: usize, seed: u64) -> (HvaeModel, Matrix) {
    let mut cfg = config(dims, hidden, input);
    cfg.seed = seed;
    let m = HvaeModel::build(&cfg, &random_batch(64, input, seed)).unwrap();
    (m, random_batch(9, input, seed + 100).data)
}

#[test]
fn k0_and_l_top_reduce_to_elbo_bit_exactly() {
    let (m, x) = model(&[6, 4, 3], 12, 20, 1);
    for samples in [1, 5] {
        let noise = LatentNoise::for_examples(3, &(0..x.nrows()).collect::<Vec<_>>(), samples, m.latent_dims());
        let e = evaluate(&m, &x, BoundKind::Elbo, &noise).unwrap();
        let g = evaluate(&m, &x, BoundKind::GtK(0), &noise).unwrap();
        let l = evaluate(&m, &x, BoundKind::LtL(3), &noise).unwrap();
        assert_eq!(e.per_example_value, g.per_example_value);
        assert_eq!(e.per_example_value, l.per_example_value);
        assert_eq!(e.per_layer_terms, g.per_layer_terms);
    }
}

#[test]
fn per_example_value_is_row_sum_of_terms() {
    let (m, x) = model(&[6, 4, 3], 12, 20, 2);
    let noise = LatentNoise::draw(&mut substream(1, "n", 0), x.nrows(), 1, m.latent_dims());
    for kind in [BoundKind::Elbo, BoundKind::GtK(1), BoundKind::GtK(2), BoundKind::LtL(1), BoundKind::LtL(2)] {
        let r = evaluate(&m, &x, kind, &noise).unwrap();
        assert_eq!(r.per_layer_terms.dim(), (9, 4));
        for (v, row) in r.per_example_value.iter().zip(r.per_layer_terms.rows()) {
            assert!((v - row.sum()).abs() < 1e-10, "{kind}");
        }
    }
    // excluded layers contribute nothing
    let g = evaluate(&m, &x, BoundKind::GtK(2), &noise).unwrap();
    assert!(g.per_layer_terms.slice(s![.., 1..3]).iter().all(|&t| t == 0.0));
    let l = evaluate(&m, &x, BoundKind::LtL(1), &noise).unwrap();
    assert!(l.per_layer_terms.slice(s![.., 2..]).iter().all(|&t| t == 0.0));
}

#[test]
fn kl_decomposition_sums_to_elbo() {
    let (m, x) = model(&[6, 4, 3], 12, 20, 3);
    let noise = LatentNoise::draw(&mut substream(2, "n", 0), x.nrows(), 1, m.latent_dims());
    let e = evaluate(&m, &x, BoundKind::Elbo, &noise).unwrap();
    let d = kl_decomposition_with(&m, &x, &noise).unwrap();
    assert_eq!(d.terms.ncols(), 3);
    for b in 0..x.nrows() {
        let total = d.decoder[b] + d.terms.row(b).sum();
        assert!((total - e.per_example_value[b]).abs() < 1e-10);
    }
}

#[test]
fn single_layer_decomposition_is_negative_kl_estimate() {
    let (m, x) = model(&[5], 10, 20, 4);
    let noise = LatentNoise::draw(&mut substream(2, "n", 0), x.nrows(), 1, m.latent_dims());
    let d = kl_decomposition_with(&m, &x, &noise).unwrap();
    let pass = latent_pass(&m, &x, BoundKind::Elbo, &noise).unwrap();
    let (_, q) = pass.layers[0].inference.clone().unwrap();
    let z = &pass.layers[0].sample;
    let log_q = hvae_core::dist::gaussian_log_prob(&q, z).unwrap();
    let log_p = hvae_core::dist::gaussian_log_prob(&hvae_core::dist::DiagGaussian::standard(z.nrows(), 5), z).unwrap();
    for b in 0..x.nrows() {
        assert!((d.terms[[b, 0]] - (log_p[b] - log_q[b])).abs() < 1e-12);
    }
}

#[test]
fn zero_logit_decoder_gives_uniform_likelihood() {
    let (mut m, x) = model(&[6, 4, 3], 12, 784, 5);
    let head = m.decoder.transform.head.clone();
    m.store.value_mut(head.scale).fill(0.0);
    m.store.value_mut(head.bias).fill(0.0);
    let r = elbo(&m, &x, 1, &mut substream(0, "n", 0)).unwrap();
    for v in r.per_layer_terms.column(0) {
        assert!((v + 784.0 * LN_2).abs() < 1e-9, "{v}");
    }
    assert!((784.0 * LN_2 - 543.43).abs() < 5e-3);
}

#[test]
fn importance_weighting_tightens_the_bound() {
    let (m, _) = model(&[6, 4, 3], 12, 20, 6);
    let x = random_batch(200, 20, 60).data;
    let one = elbo(&m, &x, 1, &mut substream(1, "iw", 0)).unwrap();
    let many = elbo(&m, &x, 1000, &mut substream(1, "iw", 1)).unwrap();
    let (a, b) = (one.per_example_value.mean().unwrap(), many.per_example_value.mean().unwrap());
    assert!(b >= a - 0.5, "{b} vs {a}");
    assert_eq!(many.bound.samples, 1000);
}

#[test]
fn evaluation_is_deterministic_and_survives_checkpointing() {
    let (m, x) = model(&[6, 4, 3], 12, 20, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let loaded = HvaeModel::load(&path).unwrap();
    for kind in [BoundKind::Elbo, BoundKind::GtK(1), BoundKind::LtL(2)] {
        let a = evaluate(&m, &x, kind, &LatentNoise::for_examples(9, &[0, 1, 2, 3, 4, 5, 6, 7, 8], 3, m.latent_dims())).unwrap();
        let b = evaluate(&loaded, &x, kind, &LatentNoise::for_examples(9, &[0, 1, 2, 3, 4, 5, 6, 7, 8], 3, m.latent_dims())).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn invalid_indices_are_rejected() {
    let (m, x) = model(&[6, 4, 3], 12, 20, 8);
    let mut rng = substream(0, "n", 0);
    assert!(matches!(bound_gt_k(&m, &x, 3, 1, &mut rng), Err(Error::InvalidK { k: 3, layers: 3 })));
    assert!(matches!(bound_lt_l(&m, &x, 0, 1, &mut rng), Err(Error::InvalidL { l: 0, .. })));
    assert!(matches!(bound_lt_l(&m, &x, 4, 1, &mut rng), Err(Error::InvalidL { l: 4, .. })));
    assert!(matches!(reconstruct(&m, &x, 3, &mut rng, true), Err(Error::InvalidK { .. })));
    let mut bad = x.clone();
    bad[[0, 0]] = 0.5;
    assert!(matches!(elbo(&m, &bad, 1, &mut rng), Err(Error::NonBinaryInput(_))));
}

#[test]
fn latent_pass_tags_follow_the_bound() {
    let (m, x) = model(&[6, 4, 3], 12, 20, 9);
    let noise = LatentNoise::draw(&mut substream(0, "n", 0), x.nrows(), 1, m.latent_dims());
    let p = latent_pass(&m, &x, BoundKind::GtK(2), &noise).unwrap();
    let tags: Vec<_> = p.layers.iter().map(|r| (r.inference.as_ref().map(|i| i.0), r.proposal)).collect();
    assert_eq!(
        tags,
        vec![
            (Some(Proposal::DeterministicMode), Proposal::ConditionalPrior),
            (Some(Proposal::DeterministicMode), Proposal::ConditionalPrior),
            (Some(Proposal::Posterior), Proposal::Posterior),
        ]
    );
    let p = latent_pass(&m, &x, BoundKind::LtL(1), &noise).unwrap();
    assert!(p.layers[1].inference.is_none());
    assert_eq!(p.layers[2].proposal, Proposal::ConditionalPrior);
}

#[test]
fn reconstructions_are_probabilities() {
    let (m, x) = model(&[6, 4, 3], 12, 20, 10);
    for k in 0..3 {
        let r = reconstruct(&m, &x, k, &mut substream(0, "r", k as u64), true).unwrap();
        assert_eq!(r.dim(), x.dim());
        assert!(r.iter().all(|&p| p > 0.0 && p < 1.0));
    }
    let a = reconstruct(&m, &x, 0, &mut substream(0, "r", 0), true).unwrap();
    let b = reconstruct(&m, &x, 0, &mut substream(0, "r", 1), true).unwrap();
    assert_eq!(a, b, "k=0 mode reconstruction uses no noise");
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let mut cfg = config(&[4, 3, 2], 8, 16);
    cfg.init_batch_size = 16;
    let m = HvaeModel::build(&cfg, &random_batch(16, 16, 11)).unwrap();
    let x = random_batch(2, 16, 12).data;
    let noise = LatentNoise::draw(&mut substream(0, "gc", 0), 2, 1, m.latent_dims());
    let report = finite_diff_check(&m.store, 1e-5, |store| {
        let mut f = Forward::new(store);
        let xv = f.tape.input(x.clone());
        let pass = m.record_terms(&mut f, xv, Plan::elbo(3), &noise)?;
        let mut total = pass[0];
        for &t in &pass[1..] {
            total = f.tape.add(total, t);
        }
        let out = f.tape.sum(total);
        Ok((f.tape, out))
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
    assert_eq!(report.coordinates, m.store.numel());
}

// ---- straight-line oracle for a two-layer model -------------------------

fn dense(m: &HvaeModel, l: &WeightNormDense, x: &Matrix) -> Matrix {
    x.dot(&l.effective_weight(&m.store)) + m.store.value(l.bias)
}

fn relu(x: Matrix) -> Matrix {
    x.mapv(|v| v.max(0.0))
}

fn stage(m: &HvaeModel, s: &hvae_core::hvae::model::Stage, primary: &Matrix, skip: Option<&Matrix>) -> Matrix {
    let input = match (&s.skip, skip) {
        (Some(p), Some(z)) => concatenate![Axis(1), primary.view(), dense(m, p, z).view()],
        _ => primary.clone(),
    };
    let mut h = dense(m, &s.transform.input, &input);
    for b in &s.transform.blocks {
        let r = dense(m, &b.second, &relu(dense(m, &b.first, &relu(h.clone()))));
        h = r + &h;
    }
    dense(m, &s.transform.head, &relu(h))
}

fn head(raw: &Matrix, d: usize) -> (Matrix, Matrix) {
    let mean = raw.slice(s![.., ..d]).to_owned();
    let lv = raw
        .slice(s![.., d..])
        .mapv(|u| (((LN_2 * u).exp()).ln_1p() / LN_2).ln().clamp(-14.0, 14.0));
    (mean, lv)
}

fn log_normal(mean: &Matrix, lv: &Matrix, z: &Matrix) -> Array1<f64> {
    let mut out = Array1::zeros(z.nrows());
    for b in 0..z.nrows() {
        for j in 0..z.ncols() {
            let d = z[[b, j]] - mean[[b, j]];
            out[b] += -0.5 * ((2.0 * PI).ln() + lv[[b, j]] + d * d / lv[[b, j]].exp());
        }
    }
    out
}

fn bernoulli(logits: &Matrix, x: &Matrix) -> Array1<f64> {
    let mut out = Array1::zeros(x.nrows());
    for b in 0..x.nrows() {
        for j in 0..x.ncols() {
            let l = logits[[b, j]];
            let p = 1.0 / (1.0 + (-l).exp());
            out[b] += if x[[b, j]] == 1.0 { p.ln() } else { (1.0 - p).ln() };
        }
    }
    out
}

#[test]
fn two_layer_bounds_match_hand_assembled_evaluation() {
    let (m, x) = model(&[5, 3], 10, 12, 13);
    let noise = LatentNoise::draw(&mut substream(4, "n", 0), x.nrows(), 1, m.latent_dims());
    let (e1p, e2p) = (&noise.posterior[0], &noise.posterior[1]);
    let (e1r, e2r) = (&noise.prior[0], &noise.prior[1]);
    let sample = |mean: &Matrix, lv: &Matrix, e: &Matrix| mean + &(lv.mapv(|v| (0.5 * v).exp()) * e);
    let zeros = |d: usize| Array2::<f64>::zeros((x.nrows(), d));

    // L^{<1}: z1 ~ q(z1|x), z2 ~ N(0, I)
    let (q1m, q1v) = head(&stage(&m, &m.inference[0], &x, None), 5);
    let z1 = sample(&q1m, &q1v, e1p);
    let z2 = e2r.clone();
    let (p1m, p1v) = head(&stage(&m, &m.generative[0], &z2, None), 5);
    let logits = stage(&m, &m.decoder, &z1, Some(&z2));
    let oracle = bernoulli(&logits, &x) + (log_normal(&p1m, &p1v, &z1) - log_normal(&q1m, &q1v, &z1));
    let got = evaluate(&m, &x, BoundKind::LtL(1), &noise).unwrap();
    for (a, b) in got.per_example_value.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    // L^{>1}: d1 = mean of q(z1|x), z2 ~ q(z2|d1, x), z1 ~ p(z1|z2)
    let (q2m, q2v) = head(&stage(&m, &m.inference[1], &q1m, Some(&x)), 3);
    let z2 = sample(&q2m, &q2v, e2p);
    let (p1m, p1v) = head(&stage(&m, &m.generative[0], &z2, None), 5);
    let z1 = sample(&p1m, &p1v, e1r);
    let logits = stage(&m, &m.decoder, &z1, Some(&z2));
    let oracle = bernoulli(&logits, &x) + log_normal(&zeros(3), &zeros(3), &z2) - log_normal(&q2m, &q2v, &z2);
    let got = evaluate(&m, &x, BoundKind::GtK(1), &noise).unwrap();
    for (a, b) in got.per_example_value.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    // ELBO
    let z1 = sample(&q1m, &q1v, e1p);
    let (q2m, q2v) = head(&stage(&m, &m.inference[1], &z1, Some(&x)), 3);
    let z2 = sample(&q2m, &q2v, e2p);
    let (p1m, p1v) = head(&stage(&m, &m.generative[0], &z2, None), 5);
    let logits = stage(&m, &m.decoder, &z1, Some(&z2));
    let oracle = bernoulli(&logits, &x) + log_normal(&p1m, &p1v, &z1) - log_normal(&q1m, &q1v, &z1)
        + log_normal(&zeros(3), &zeros(3), &z2)
        - log_normal(&q2m, &q2v, &z2);
    let got = evaluate(&m, &x, BoundKind::Elbo, &noise).unwrap();
    for (a, b) in got.per_example_value.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}
