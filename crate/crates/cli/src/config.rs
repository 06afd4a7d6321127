//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use hvae_core::data::Split;
use hvae_core::hvae::HvaeConfig;
use hvae_core::scoring::NoiseMode;

/// A configuration or command-line mistake; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const KEYS: &[&str] = &[
    "data_dir",
    "out_dir",
    "dataset",
    "train_limit",
    "checkpoint",
    "latent_dims",
    "hidden_dim",
    "blocks_per_transform",
    "free_bits_lambda",
    "free_bits_constant_epochs",
    "free_bits_anneal_epochs",
    "warmup_epochs",
    "learning_rate",
    "batch_size",
    "epochs",
    "init_batch_size",
    "seed",
    "score_datasets",
    "score_limit",
    "ks",
    "ls",
    "samples",
    "score_seed",
    "balance_seed",
    "flag_quantile",
    "reconstruct_dataset",
    "reconstruct_k",
    "reconstruct_n",
    "reconstruct_mode",
    "reconstruct_seed",
    "sweep_gap",
    "sweep_d_min",
    "sweep_d_max",
    "sweep_sigma",
    "correlate_checkpoint",
    "correlate_dataset",
    "correlate_n",
    "variance_dataset",
    "variance_k",
    "variance_samples",
    "variance_repeats",
    "variance_images",
    "variance_noise",
    "variance_seed",
];

/// `name` or `name:split` with the split defaulting to test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetRef {
    pub name: String,
    pub split: Split,
}

impl DatasetRef {
    pub fn parse(s: &str) -> anyhow::Result<Self> {
        let (name, split) = match s.split_once(':') {
            Some((n, "train")) => (n, Split::Train),
            Some((n, "test")) => (n, Split::Test),
            Some((_, other)) => return Err(usage(format!("unknown split `{other}` in `{s}`"))),
            None => (s, Split::Test),
        };
        if name.is_empty() {
            return Err(usage(format!("empty dataset name in `{s}`")));
        }
        Ok(Self {
            name: name.to_string(),
            split,
        })
    }

    /// `name-split`, used in file names and table labels.
    pub fn label(&self) -> String {
        format!("{}-{}", self.name, self.split)
    }
}

impl fmt::Display for DatasetRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub dataset: String,
    pub train_limit: Option<usize>,
    pub checkpoint: PathBuf,
    pub model: HvaeConfig,
    pub score_datasets: Vec<DatasetRef>,
    pub score_limit: Option<usize>,
    pub ks: Vec<usize>,
    pub ls: Vec<usize>,
    pub samples: usize,
    pub score_seed: u64,
    pub balance_seed: u64,
    pub flag_quantile: f64,
    pub reconstruct_dataset: DatasetRef,
    pub reconstruct_k: usize,
    pub reconstruct_n: usize,
    pub reconstruct_mode: bool,
    pub reconstruct_seed: u64,
    pub sweep_gap: usize,
    pub sweep_d_min: usize,
    pub sweep_d_max: usize,
    pub sweep_sigma: f64,
    pub correlate_checkpoint: Option<PathBuf>,
    pub correlate_dataset: DatasetRef,
    pub correlate_n: usize,
    pub variance_dataset: DatasetRef,
    pub variance_k: usize,
    pub variance_samples: usize,
    pub variance_repeats: usize,
    pub variance_images: usize,
    pub variance_noise: NoiseMode,
    pub variance_seed: u64,
}

/// Reads `key = value` lines; `#` starts a comment. Later entries win.
pub fn parse_entries(text: &str) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("line {}: expected key = value, got `{raw}`", n + 1)))?;
        insert(&mut out, k.trim(), v.trim())?;
    }
    Ok(out)
}

fn insert(map: &mut BTreeMap<String, String>, key: &str, value: &str) -> anyhow::Result<()> {
    if !KEYS.contains(&key) {
        return Err(usage(format!("unknown configuration key `{key}`")));
    }
    map.insert(key.to_string(), value.to_string());
    Ok(())
}

/// Compile-time location of the workspace `data/` directory.
fn workspace_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

impl RunConfig {
    /// Loads `config` (if any), applies `--set` overrides, and resolves paths
    /// relative to the config file's directory (or the working directory).
    pub fn load(config: Option<&Path>, overrides: &[String], out_dir: Option<&Path>) -> anyhow::Result<Self> {
        let (mut entries, base) = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (parse_entries(&text)?, base)
            }
            None => (BTreeMap::new(), PathBuf::new()),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects key=value, got `{o}`")))?;
            insert(&mut entries, k.trim(), v.trim())?;
        }
        let mut cfg = Self::from_entries(&entries, &base)?;
        if let Some(dir) = out_dir {
            let default_checkpoint = !entries.contains_key("checkpoint");
            cfg.out_dir = dir.to_path_buf();
            if default_checkpoint {
                cfg.checkpoint = cfg.out_dir.join("model.ckpt");
            }
        }
        Ok(cfg)
    }

    pub fn from_entries(e: &BTreeMap<String, String>, base: &Path) -> anyhow::Result<Self> {
        let get = |k: &str| e.get(k).map(String::as_str);
        let path = |k: &str| get(k).map(|v| base.join(v));
        fn num<T: std::str::FromStr>(k: &str, v: Option<&str>, default: T) -> anyhow::Result<T> {
            match v {
                None => Ok(default),
                Some(s) => s.parse().map_err(|_| usage(format!("bad value `{s}` for `{k}`"))),
            }
        }
        fn list(k: &str, v: &str) -> anyhow::Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|s| s.trim().parse().map_err(|_| usage(format!("bad list entry `{s}` for `{k}`"))))
                .collect()
        }
        let opt = |k: &str| -> anyhow::Result<Option<usize>> { get(k).map(|v| num(k, Some(v), 0)).transpose() };

        let epochs = num("epochs", get("epochs"), 200usize)?;
        let mut model = HvaeConfig::with_epochs(epochs);
        if let Some(v) = get("latent_dims") {
            model.latent_dims = list("latent_dims", v)?;
        }
        model.hidden_dim = num("hidden_dim", get("hidden_dim"), model.hidden_dim)?;
        model.blocks_per_transform = num("blocks_per_transform", get("blocks_per_transform"), model.blocks_per_transform)?;
        model.free_bits.lambda_nats = num("free_bits_lambda", get("free_bits_lambda"), model.free_bits.lambda_nats)?;
        model.free_bits.constant_epochs =
            num("free_bits_constant_epochs", get("free_bits_constant_epochs"), model.free_bits.constant_epochs)?;
        model.free_bits.anneal_epochs = num("free_bits_anneal_epochs", get("free_bits_anneal_epochs"), model.free_bits.anneal_epochs)?;
        model.warmup_epochs = num("warmup_epochs", get("warmup_epochs"), model.warmup_epochs)?;
        model.learning_rate = num("learning_rate", get("learning_rate"), model.learning_rate)?;
        model.batch_size = num("batch_size", get("batch_size"), model.batch_size)?;
        model.init_batch_size = num("init_batch_size", get("init_batch_size"), model.init_batch_size)?;
        model.seed = num("seed", get("seed"), 1)?;
        model.validate().map_err(|e| usage(e.to_string()))?;
        let layers = model.num_layers();

        let data_dir = path("data_dir")
            .or_else(|| std::env::var_os("HVAE_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(workspace_data_dir);
        let out_dir = path("out_dir").unwrap_or_else(|| base.join("out"));
        let checkpoint = path("checkpoint").unwrap_or_else(|| out_dir.join("model.ckpt"));
        let dataset_ref = |k: &str, default: &str| DatasetRef::parse(get(k).unwrap_or(default));
        let score_datasets = get("score_datasets")
            .unwrap_or("fashion-mnist:test,mnist:test")
            .split(',')
            .map(|s| DatasetRef::parse(s.trim()))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let ks = match get("ks") {
            Some(v) => list("ks", v)?,
            None => (1..layers).collect(),
        };
        let ls = match get("ls") {
            Some(v) => list("ls", v)?,
            None => (1..layers).collect(),
        };
        if let Some(&k) = ks.iter().find(|&&k| k >= layers) {
            return Err(usage(format!("k = {k} must be below the number of layers {layers}")));
        }
        if let Some(&l) = ls.iter().find(|&&l| l == 0 || l > layers) {
            return Err(usage(format!("l = {l} must lie in 1..={layers}")));
        }
        let variance_noise = match get("variance_noise").unwrap_or("shared") {
            "shared" => NoiseMode::Shared,
            "independent" => NoiseMode::Independent,
            other => return Err(usage(format!("variance_noise must be shared or independent, got `{other}`"))),
        };
        let cfg = Self {
            data_dir,
            out_dir,
            dataset: get("dataset").unwrap_or("fashion-mnist").to_string(),
            train_limit: opt("train_limit")?,
            checkpoint,
            score_datasets,
            score_limit: opt("score_limit")?,
            ks,
            ls,
            samples: num("samples", get("samples"), 1)?,
            score_seed: num("score_seed", get("score_seed"), 7)?,
            balance_seed: num("balance_seed", get("balance_seed"), 11)?,
            flag_quantile: num("flag_quantile", get("flag_quantile"), 0.95)?,
            reconstruct_dataset: dataset_ref("reconstruct_dataset", "fashion-mnist:test")?,
            reconstruct_k: num("reconstruct_k", get("reconstruct_k"), 0)?,
            reconstruct_n: num("reconstruct_n", get("reconstruct_n"), 8)?,
            reconstruct_mode: num("reconstruct_mode", get("reconstruct_mode"), true)?,
            reconstruct_seed: num("reconstruct_seed", get("reconstruct_seed"), 13)?,
            sweep_gap: num("sweep_gap", get("sweep_gap"), 2)?,
            sweep_d_min: num("sweep_d_min", get("sweep_d_min"), 4)?,
            sweep_d_max: num("sweep_d_max", get("sweep_d_max"), 40)?,
            sweep_sigma: num("sweep_sigma", get("sweep_sigma"), 1.0)?,
            correlate_checkpoint: path("correlate_checkpoint"),
            correlate_dataset: dataset_ref("correlate_dataset", "fashion-mnist:test")?,
            correlate_n: num("correlate_n", get("correlate_n"), 1000)?,
            variance_dataset: dataset_ref("variance_dataset", "fashion-mnist:test")?,
            variance_k: num("variance_k", get("variance_k"), 1.min(layers - 1))?,
            variance_samples: num("variance_samples", get("variance_samples"), 1)?,
            variance_repeats: num("variance_repeats", get("variance_repeats"), 500)?,
            variance_images: num("variance_images", get("variance_images"), 10)?,
            variance_noise,
            variance_seed: num("variance_seed", get("variance_seed"), 17)?,
            model,
        };
        if cfg.samples == 0 || cfg.variance_samples == 0 {
            return Err(usage("samples must be positive"));
        }
        if !(cfg.flag_quantile > 0.0 && cfg.flag_quantile < 1.0) {
            return Err(usage("flag_quantile must lie in (0, 1)"));
        }
        Ok(cfg)
    }

    /// Seeds and settings embedded in every output.
    pub fn provenance(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("version", env!("CARGO_PKG_VERSION").to_string()),
            ("model_seed", self.model.seed.to_string()),
            ("score_seed", self.score_seed.to_string()),
            ("balance_seed", self.balance_seed.to_string()),
            ("samples", self.samples.to_string()),
        ])
    }
}
