use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::data::{binarize_dynamic, BinarizedBatch, IdxDataset};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Forward};
use crate::rng::{streams, substream};

use super::bounds::Plan;
use super::model::HvaeModel;
use super::noise::LatentNoise;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean single-sample training ELBO in nats.
    pub elbo_nats: f64,
    pub bpd: f64,
    /// Mean single-sample KL estimate per layer, before clamping.
    pub kl: Vec<f64>,
    pub lambda_effective: f64,
    pub warmup_beta: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self, layers: usize) -> String {
        let mut out = String::from("epoch,elbo_nats,bpd");
        for i in 1..=layers {
            write!(out, ",kl_z{i}").unwrap();
        }
        out.push_str(",lambda_effective,warmup_beta\n");
        for r in &self.records {
            write!(out, "{},{:.16e},{:.16e}", r.epoch, r.elbo_nats, r.bpd).unwrap();
            for k in &r.kl {
                write!(out, ",{k:.16e}").unwrap();
            }
            writeln!(out, ",{:.16e},{:.16e}", r.lambda_effective, r.warmup_beta).unwrap();
        }
        out
    }
}

/// Nats per example to bits per dimension.
pub fn bits_per_dim(nats: f64, dims: usize) -> f64 {
    -nats / (dims as f64 * std::f64::consts::LN_2)
}

/// Dynamically binarized batch used for data-dependent initialization.
pub fn init_batch(model_seed: u64, init_batch_size: usize, dataset: &IdxDataset) -> BinarizedBatch {
    let mut rng = substream(model_seed, streams::INIT, 1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(init_batch_size.min(dataset.len()));
    binarize_dynamic(dataset, &order, &mut rng, format!("{}:{model_seed}:1", streams::INIT))
}

/// Builds a model on `dataset` and trains it for `config.epochs` epochs.
pub fn fit(
    config: &super::HvaeConfig,
    dataset: &IdxDataset,
    on_epoch: impl FnMut(&EpochRecord, &HvaeModel) -> Result<()>,
) -> Result<(HvaeModel, TrainLog)> {
    let mut model = HvaeModel::build(config, &init_batch(config.seed, config.init_batch_size, dataset))?;
    let log = train(&mut model, dataset, on_epoch)?;
    Ok((model, log))
}

/// Minimizes `−[log p(x|z₁) + β·Σ_i min(−KL_i, −λ)]` per minibatch with Adam,
/// where `KL_i` is the batch-mean single-sample KL estimate of layer `i`.
pub fn train(
    model: &mut HvaeModel,
    dataset: &IdxDataset,
    mut on_epoch: impl FnMut(&EpochRecord, &HvaeModel) -> Result<()>,
) -> Result<TrainLog> {
    let config = model.config.clone();
    let l = config.num_layers();
    let mut adam = AdamState::new(&model.store, config.learning_rate);
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let mut rng = substream(config.seed, streams::TRAIN, epoch as u64);
        let mut bin_rng = substream(config.seed, streams::BINARIZE_TRAIN, epoch as u64);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let beta = config.warmup_beta(epoch);
        let lambda = config.free_bits.lambda_at(epoch);

        let (mut elbo_sum, mut kl_sum, mut count) = (0.0, vec![0.0; l], 0usize);
        for (batch_index, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = binarize_dynamic(dataset, rows, &mut bin_rng, "");
            let noise = LatentNoise::draw(&mut rng, rows.len(), 1, model.latent_dims());
            let mut f = Forward::new(&model.store);
            let xv = f.tape.input(batch.data);
            let pass = model.pass(&mut f, xv, Plan::elbo(l), &noise)?;
            let terms: Vec<_> = pass.terms.iter().map(|t| t.expect("all layers scored")).collect();

            let rec = f.tape.mean(terms[0]);
            let mut loss = f.tape.scale(rec, -1.0);
            let mut batch_elbo = f.tape.value(terms[0]).sum();
            for (i, &t) in terms.iter().enumerate().skip(1) {
                let m = f.tape.mean(t);
                let kl = f.tape.scale(m, -1.0);
                kl_sum[i - 1] += f.tape.scalar(kl) * rows.len() as f64;
                batch_elbo += f.tape.value(t).sum();
                let clamped = f.tape.max_scalar(kl, lambda);
                let weighted = f.tape.scale(clamped, beta);
                loss = f.tape.add(loss, weighted);
            }
            if !f.tape.scalar(loss).is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                });
            }
            elbo_sum += batch_elbo;
            count += rows.len();
            let grads = f.tape.backward(loss);
            drop(f);
            adam.step(&mut model.store, &grads)?;
        }

        let elbo_nats = elbo_sum / count as f64;
        let record = EpochRecord {
            epoch,
            elbo_nats,
            bpd: bits_per_dim(elbo_nats, config.input_dim),
            kl: kl_sum.iter().map(|k| k / count as f64).collect(),
            lambda_effective: lambda,
            warmup_beta: beta,
        };
        on_epoch(&record, model)?;
        log.records.push(record);
    }
    Ok(log)
}
