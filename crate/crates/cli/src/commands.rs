//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hvae_core::analysis::{
    correlation_summary, cross_model_correlation, dimension_sweep, sweep_to_csv, CorrelationBlock, JACOBIAN_ORIENTATION,
};
use hvae_core::data::{binarize_eval, IdxDataset, PIXELS};
use hvae_core::hvae::{bits_per_dim, fit, reconstruct, HvaeModel, TrainLog};
use hvae_core::metrics::roc_curve;
use hvae_core::nn::checkpoint::write_atomic;
use hvae_core::rng::{streams, substream};
use hvae_core::scoring::{
    balanced_tables, estimator_variance, ood_report, oriented_scores, score_dataset, threshold_rule, NoiseMode, OodReport,
    ScoreTable, VarianceReport,
};
use serde::Serialize;

use crate::config::{DatasetRef, RunConfig};

pub const OUTPUT_VERSION: u32 = 1;

fn load_dataset(cfg: &RunConfig, r: &DatasetRef) -> Result<IdxDataset> {
    let mut d = IdxDataset::load(&cfg.data_dir.join(&r.name), &r.name, r.split)
        .with_context(|| format!("loading {r} from {}", cfg.data_dir.display()))?;
    d.name = r.label();
    Ok(d)
}

fn load_model(path: &Path) -> Result<HvaeModel> {
    HvaeModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, bytes.as_ref()).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn first_n(n: Option<usize>, len: usize) -> Vec<usize> {
    (0..n.map_or(len, |n| n.min(len))).collect()
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    format_version: u32,
    provenance: BTreeMap<&'static str, String>,
    command: &'a str,
    result: T,
}

fn envelope<'a, T: Serialize>(cfg: &RunConfig, command: &'a str, result: T) -> Envelope<'a, T> {
    Envelope {
        format_version: OUTPUT_VERSION,
        provenance: cfg.provenance(),
        command,
        result,
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let full = load_dataset(cfg, &DatasetRef::parse(&format!("{}:train", cfg.dataset))?)?;
    let data = match cfg.train_limit {
        Some(n) => full.truncated(n),
        None => full,
    };
    let layers = cfg.model.num_layers();
    let log_path = cfg.out_dir.join("train_log.csv");
    let header = format!(
        "# hvae-ood train log v{OUTPUT_VERSION}; crate {}; dataset={} examples={} seed={} epochs={}\n",
        env!("CARGO_PKG_VERSION"),
        data.name,
        data.len(),
        cfg.model.seed,
        cfg.model.epochs
    );
    let mut log = TrainLog::default();
    let (model, _) = fit(&cfg.model, &data, |record, _| {
        log.records.push(record.clone());
        eprintln!(
            "epoch {:>4}  elbo {:.3} nats  {:.4} bpd  beta {:.3}  lambda {:.3}",
            record.epoch, record.elbo_nats, record.bpd, record.warmup_beta, record.lambda_effective
        );
        write(&log_path, format!("{header}{}", log.to_csv(layers))).map_err(|e| hvae_core::Error::Checkpoint(format!("{e:#}")))
    })?;
    model
        .save(&cfg.checkpoint)
        .with_context(|| format!("writing checkpoint {}", cfg.checkpoint.display()))?;
    eprintln!("wrote {} and {}", cfg.checkpoint.display(), log_path.display());
    Ok(())
}

pub fn score_path(cfg: &RunConfig, r: &DatasetRef) -> PathBuf {
    cfg.out_dir.join(format!("scores_{}.csv", r.label()))
}

pub fn score(cfg: &RunConfig, datasets: &[DatasetRef]) -> Result<()> {
    let model = load_model(&cfg.checkpoint)?;
    let datasets = if datasets.is_empty() { &cfg.score_datasets } else { datasets };
    for r in datasets {
        let d = load_dataset(cfg, r)?;
        let indices = first_n(cfg.score_limit, d.len());
        let table = score_dataset(&model, &d, &indices, &cfg.ks, &cfg.ls, cfg.samples, cfg.score_seed)?;
        let path = score_path(cfg, r);
        write(&path, table.to_csv())?;
        let mean = |v: &[f64]| bits_per_dim(v.iter().sum::<f64>() / v.len() as f64, PIXELS);
        eprintln!("{}: {} rows, mean ELBO {:.4} bpd -> {}", r, table.len(), mean(&table.elbo), path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct MeanBpd {
    dataset: String,
    elbo: f64,
    gt_k: Vec<(usize, f64)>,
    lt_l: Vec<(usize, f64)>,
}

fn mean_bpd(t: &ScoreTable) -> MeanBpd {
    let m = |v: &[f64]| bits_per_dim(v.iter().sum::<f64>() / v.len() as f64, PIXELS);
    MeanBpd {
        dataset: t.dataset.clone(),
        elbo: m(&t.elbo),
        gt_k: t.ks.iter().zip(&t.gt).map(|(&k, v)| (k, m(v))).collect(),
        lt_l: t.ls.iter().zip(&t.lt).map(|(&l, v)| (l, m(v))).collect(),
    }
}

#[derive(Serialize)]
struct FlagRate {
    k: usize,
    threshold: f64,
    in_flag_rate: f64,
    out_flag_rate: f64,
}

#[derive(Serialize)]
pub struct ReportFile {
    report: OodReport,
    mean_bpd: Vec<MeanBpd>,
    flag_quantile: f64,
    flag_rates: Vec<FlagRate>,
    flagged_out_fraction: Option<f64>,
}

fn read_table(path: &Path) -> Result<ScoreTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let t = ScoreTable::from_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
    t.recompute_check().with_context(|| format!("auditing {}", path.display()))?;
    Ok(t)
}

pub fn report_dir(cfg: &RunConfig, in_table: &ScoreTable, out_table: &ScoreTable) -> PathBuf {
    cfg.out_dir.join(format!("report_{}_vs_{}", in_table.dataset, out_table.dataset))
}

pub fn report(cfg: &RunConfig, in_csv: &Path, out_csv: &Path) -> Result<PathBuf> {
    let (ins, outs) = (read_table(in_csv)?, read_table(out_csv)?);
    let report = ood_report(&ins, &outs, cfg.balance_seed)?;
    let dir = report_dir(cfg, &ins, &outs);

    let (bal_in, bal_out) = balanced_tables(&ins, &outs, cfg.balance_seed)?;
    for ((name, si), (_, so)) in oriented_scores(&bal_in).into_iter().zip(oriented_scores(&bal_out)) {
        let roc = roc_curve(&so, &si)?;
        write(&dir.join(format!("roc_{name}.csv")), roc.to_csv())?;
    }

    let (flag_rates, flagged_out_fraction) = match threshold_rule(&ins, cfg.flag_quantile) {
        Ok(rule) => {
            let rates = rule
                .ks
                .iter()
                .zip(&rule.thresholds)
                .map(|(&k, &threshold)| FlagRate {
                    k,
                    threshold,
                    in_flag_rate: rule.flag_rate(&ins, k).unwrap_or(f64::NAN),
                    out_flag_rate: rule.flag_rate(&outs, k).unwrap_or(f64::NAN),
                })
                .collect();
            let mut flagged = 0usize;
            for r in 0..outs.len() {
                let row: Vec<f64> = outs.llr.iter().map(|c| c[r]).collect();
                flagged += usize::from(rule.classify(&row)?.is_some());
            }
            (rates, Some(flagged as f64 / outs.len() as f64))
        }
        Err(hvae_core::Error::InsufficientReference { .. }) | Err(hvae_core::Error::EmptyTable(_)) => (Vec::new(), None),
        Err(e) => return Err(e.into()),
    };
    let file = ReportFile {
        mean_bpd: vec![mean_bpd(&ins), mean_bpd(&outs)],
        flag_quantile: cfg.flag_quantile,
        flag_rates,
        flagged_out_fraction,
        report,
    };
    let path = dir.join("report.json");
    write_json(&path, &envelope(cfg, "report", &file))?;
    eprintln!(
        "k* = {}; AUROC(llr_k*) = {:.4}; orientation: {} -> {}",
        file.report.k_star,
        file.report
            .auroc_per_k
            .iter()
            .find(|(k, _)| *k == file.report.k_star)
            .map_or(f64::NAN, |p| p.1),
        file.report.orientation,
        path.display()
    );
    Ok(path)
}

pub fn pgm(pixels: impl IntoIterator<Item = u8>) -> Vec<u8> {
    let mut out = b"P5\n28 28\n255\n".to_vec();
    out.extend(pixels);
    out
}

#[derive(Serialize)]
struct ReconstructionEntry {
    index: usize,
    input: String,
    reconstruction: String,
    mean_abs_error: f64,
}

#[derive(Serialize)]
struct ReconstructionManifest {
    dataset: String,
    k: usize,
    mode: bool,
    binarize_seed: u64,
    entries: Vec<ReconstructionEntry>,
}

pub fn reconstruct_cmd(cfg: &RunConfig) -> Result<PathBuf> {
    let model = load_model(&cfg.checkpoint)?;
    let r = &cfg.reconstruct_dataset;
    let d = load_dataset(cfg, r)?;
    let k = cfg.reconstruct_k;
    let indices = first_n(Some(cfg.reconstruct_n), d.len());
    let x = binarize_eval(&d, &indices, cfg.reconstruct_seed).data;
    let mut rng = substream(cfg.reconstruct_seed, streams::ANALYSIS, 0);
    let probs = reconstruct(&model, &x, k, &mut rng, cfg.reconstruct_mode)?;
    let dir = cfg.out_dir.join(format!("reconstruct_{}_k{k}", r.label()));
    let mut entries = Vec::new();
    for (row, &index) in indices.iter().enumerate() {
        let (input, recon) = (format!("input_{index}.pgm"), format!("recon_{index}.pgm"));
        write(&dir.join(&input), pgm(x.row(row).iter().map(|&v| (255.0 * v) as u8)))?;
        write(&dir.join(&recon), pgm(probs.row(row).iter().map(|&p| (255.0 * p).round() as u8)))?;
        let mean_abs_error = x.row(row).iter().zip(probs.row(row)).map(|(a, b)| (a - b).abs()).sum::<f64>() / PIXELS as f64;
        entries.push(ReconstructionEntry {
            index,
            input,
            reconstruction: recon,
            mean_abs_error,
        });
    }
    let manifest = ReconstructionManifest {
        dataset: r.label(),
        k,
        mode: cfg.reconstruct_mode,
        binarize_seed: cfg.reconstruct_seed,
        entries,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &envelope(cfg, "reconstruct", manifest))?;
    eprintln!("wrote {} reconstructions to {}", indices.len(), dir.display());
    Ok(path)
}

pub fn jacobian_sweep(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.sweep_d_min > cfg.sweep_d_max {
        bail!("sweep_d_min {} exceeds sweep_d_max {}", cfg.sweep_d_min, cfg.sweep_d_max);
    }
    let rows = dimension_sweep(cfg.sweep_gap, (cfg.sweep_d_min..=cfg.sweep_d_max).step_by(2), cfg.sweep_sigma)?;
    let path = cfg.out_dir.join("jacobian_sweep.csv");
    write(&path, sweep_to_csv(&rows))?;
    eprintln!("{} rows ({JACOBIAN_ORIENTATION}) -> {}", rows.len(), path.display());
    Ok(path)
}

#[derive(Serialize)]
struct CorrelationFile {
    model_a: String,
    model_b: String,
    dataset: String,
    examples: usize,
    binarize_seed: u64,
    blocks: Vec<CorrelationBlock>,
}

pub fn correlate(cfg: &RunConfig) -> Result<PathBuf> {
    let Some(other) = &cfg.correlate_checkpoint else {
        bail!(crate::config::UsageError("analyze correlate needs correlate_checkpoint".into()));
    };
    let (a, b) = (load_model(&cfg.checkpoint)?, load_model(other)?);
    let d = load_dataset(cfg, &cfg.correlate_dataset)?;
    let indices = first_n(Some(cfg.correlate_n), d.len());
    let maps = cross_model_correlation(&a, &b, &d, &indices, cfg.score_seed)?;
    let dir = cfg.out_dir.join("correlation");
    for m in &maps {
        write(&dir.join(format!("layer{}_layer{}.csv", m.layer_a, m.layer_b)), m.to_csv())?;
    }
    let file = CorrelationFile {
        model_a: cfg.checkpoint.display().to_string(),
        model_b: other.display().to_string(),
        dataset: d.name.clone(),
        examples: indices.len(),
        binarize_seed: cfg.score_seed,
        blocks: correlation_summary(&maps),
    };
    for b in &file.blocks {
        if b.layer_a == b.layer_b {
            eprintln!("layer {} x layer {}: mean |corr| {:.4}", b.layer_a, b.layer_b, b.mean_abs_correlation);
        }
    }
    let path = dir.join("summary.json");
    write_json(&path, &envelope(cfg, "analyze correlate", file))?;
    Ok(path)
}

#[derive(Serialize)]
struct VarianceRecord {
    index: usize,
    seed: u64,
    #[serde(flatten)]
    report: VarianceReport,
    identity_residual: f64,
    ordering_holds: bool,
}

#[derive(Serialize)]
struct VarianceFile {
    dataset: String,
    k: usize,
    samples: usize,
    repeats: usize,
    noise: &'static str,
    binarize_seed: u64,
    images_with_ordering: usize,
    records: Vec<VarianceRecord>,
}

pub fn variance(cfg: &RunConfig) -> Result<PathBuf> {
    let model = load_model(&cfg.checkpoint)?;
    let d = load_dataset(cfg, &cfg.variance_dataset)?;
    let indices = first_n(Some(cfg.variance_images), d.len());
    let x = binarize_eval(&d, &indices, cfg.score_seed).data;
    let mut records = Vec::new();
    for (row, &index) in indices.iter().enumerate() {
        let seed = cfg.variance_seed.wrapping_add(index as u64);
        let xi = x.slice(ndarray::s![row..row + 1, ..]).to_owned();
        let report = estimator_variance(
            &model,
            &xi,
            cfg.variance_k,
            cfg.variance_samples,
            cfg.variance_repeats,
            cfg.variance_noise,
            seed,
        )?;
        records.push(VarianceRecord {
            index,
            seed,
            identity_residual: report.var_llr - (report.var_elbo + report.var_gt_k - 2.0 * report.cov),
            ordering_holds: report.var_elbo < report.var_llr && report.var_llr < report.var_gt_k && report.cov > 0.0,
            report,
        });
    }
    let file = VarianceFile {
        dataset: d.name.clone(),
        k: cfg.variance_k,
        samples: cfg.variance_samples,
        repeats: cfg.variance_repeats,
        noise: match cfg.variance_noise {
            NoiseMode::Shared => "shared",
            NoiseMode::Independent => "independent",
        },
        binarize_seed: cfg.score_seed,
        images_with_ordering: records.iter().filter(|r| r.ordering_holds).count(),
        records,
    };
    eprintln!("ordering var_elbo < var_llr < var_gt_k with cov > 0 on {}/{} images", file.images_with_ordering, file.records.len());
    let path = cfg.out_dir.join("variance.json");
    write_json(&path, &envelope(cfg, "analyze variance", file))?;
    Ok(path)
}
