//! Experiment configuration, data resolution and error classification.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use deepssm::data::{
    load_csv, load_csv_auto, synthetic_splits, Benchmark, NoiseReading, SequenceDataset, CANONICAL_TEST_SEED,
};
use deepssm::model::{ModelConfig, Variant};
use deepssm::train::TrainLoopConfig;
use serde::{Deserialize, Serialize};

pub const OUTPUT_ROOT_ENV: &str = "DEEPSSM_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Other,
}

/// An error carrying its exit-code class.
#[derive(Debug)]
pub struct Tagged {
    pub kind: ErrorKind,
    pub message: String,
}

impl fmt::Display for Tagged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Tagged {}

pub fn tagged(kind: ErrorKind, message: impl Into<String>) -> anyhow::Error {
    Tagged {
        kind,
        message: message.into(),
    }
    .into()
}

pub fn classify(err: &anyhow::Error) -> ErrorKind {
    use deepssm::model::ModelError;
    use deepssm::train::TrainError;
    for cause in err.chain() {
        if let Some(t) = cause.downcast_ref::<Tagged>() {
            return t.kind;
        }
        if cause.is::<serde_json::Error>() {
            return ErrorKind::Config;
        }
        if cause.is::<deepssm::data::DataError>() || cause.is::<deepssm::metrics::MetricsError>() {
            return ErrorKind::Data;
        }
        match cause.downcast_ref::<TrainError>() {
            Some(TrainError::Config(_)) => return ErrorKind::Config,
            Some(TrainError::TooShort { .. } | TrainError::NoData) => return ErrorKind::Data,
            Some(TrainError::NonFiniteGrad { .. }) => return ErrorKind::Numeric,
            _ => {}
        }
        match cause.downcast_ref::<ModelError>() {
            Some(ModelError::Config(_)) => return ErrorKind::Config,
            Some(ModelError::Dimension(_)) => return ErrorKind::Data,
            Some(ModelError::Autodiff(_) | ModelError::AtStep { .. }) => return ErrorKind::Numeric,
            _ => {}
        }
    }
    ErrorKind::Other
}

/// Architecture hyperparameters; input/output widths come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub h_dim: usize,
    pub z_dim: usize,
    #[serde(default = "one")]
    pub n_layers: usize,
    #[serde(default)]
    pub mixtures: Option<usize>,
    #[serde(default)]
    pub batchnorm: bool,
    #[serde(default = "one")]
    pub mc_samples: usize,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn to_config(&self, u_dim: usize, y_dim: usize) -> ModelConfig {
        let mut c = ModelConfig::new(self.variant, u_dim, y_dim, self.h_dim, self.z_dim, self.n_layers);
        if self.mixtures.is_some() {
            c.mixtures = self.mixtures;
        }
        c.batchnorm = self.batchnorm;
        c.mc_samples = self.mc_samples;
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub n_train: Option<usize>,
    pub n_val: Option<usize>,
    pub n_test: Option<usize>,
    pub noise_reading: Option<NoiseReading>,
    /// Seed of the training realization; validation uses `seed + 1`.
    #[serde(default = "default_data_seed")]
    pub seed: u64,
    #[serde(default = "canonical_test_seed")]
    pub test_seed: u64,
    /// CSV files (required for wiener-hammerstein).
    pub train_file: Option<PathBuf>,
    pub val_file: Option<PathBuf>,
    #[serde(default)]
    pub test_files: Vec<PathBuf>,
    #[serde(default)]
    pub u_columns: Vec<String>,
    #[serde(default)]
    pub y_columns: Vec<String>,
    pub sample_rate: Option<f64>,
}

fn default_data_seed() -> u64 {
    1
}

fn canonical_test_seed() -> u64 {
    CANONICAL_TEST_SEED
}

/// Lists swept by `gridsearch`; absent lists keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub variant: Vec<Variant>,
    #[serde(default)]
    pub h_dim: Vec<usize>,
    #[serde(default)]
    pub z_dim: Vec<usize>,
    #[serde(default)]
    pub n_layers: Vec<usize>,
    #[serde(default)]
    pub n_train: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub model: ModelSpec,
    /// Overrides on top of the benchmark's training defaults.
    #[serde(default)]
    pub train: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Training defaults per benchmark.
pub fn default_train_config(bench: Benchmark) -> TrainLoopConfig {
    match bench {
        Benchmark::LinearToy => TrainLoopConfig {
            chunk_length: 50,
            batch_size: 8,
            ..Default::default()
        },
        Benchmark::NarendraLi => TrainLoopConfig {
            chunk_length: 50,
            batch_size: 32,
            ..Default::default()
        },
        Benchmark::WienerHammerstein => TrainLoopConfig {
            chunk_length: 2048,
            batch_size: 2,
            ..Default::default()
        },
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(tagged(ErrorKind::Config, "seeds must not be empty"));
        }
        self.model.to_config(1, 1).validate()?;
        self.train_config(0)?;
        if self.benchmark == Benchmark::WienerHammerstein {
            let d = &self.data;
            if d.train_file.is_none() || d.test_files.is_empty() {
                return Err(tagged(
                    ErrorKind::Config,
                    "wiener-hammerstein needs data.train_file and data.test_files",
                ));
            }
            for f in d.train_file.iter().chain(&d.val_file).chain(&d.test_files) {
                if !f.exists() {
                    return Err(tagged(ErrorKind::Data, format!("data file {} does not exist", f.display())));
                }
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainLoopConfig> {
        let mut base = serde_json::to_value(default_train_config(self.benchmark))?;
        let obj = base.as_object_mut().expect("struct serializes to an object");
        for (k, v) in &self.train {
            if !obj.contains_key(k) {
                return Err(tagged(ErrorKind::Config, format!("unknown training option {k:?}")));
            }
            obj.insert(k.clone(), v.clone());
        }
        let mut cfg: TrainLoopConfig = serde_json::from_value(base).context("training options")?;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        let (a, b, c) = self.benchmark.default_sizes();
        (
            self.data.n_train.unwrap_or(a),
            self.data.n_val.unwrap_or(b),
            self.data.n_test.unwrap_or(c),
        )
    }

    pub fn noise_reading(&self) -> NoiseReading {
        self.data
            .noise_reading
            .unwrap_or_else(|| self.benchmark.default_noise_reading())
    }
}

/// `--out`, else the config's `output_dir`, else `$DEEPSSM_OUTPUT_ROOT/<stem>`,
/// else `runs/<stem>`.
pub fn output_dir(cfg: &ExperimentConfig, config_path: &Path, cli_out: Option<&Path>) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into());
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(stem)
}

/// A named test sequence.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub name: String,
    pub data: SequenceDataset,
}

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: SequenceDataset,
    pub val: SequenceDataset,
    pub tests: Vec<TestSet>,
}

pub const DATA_DIR: &str = "data";

fn load_file(cfg: &ExperimentConfig, path: &Path) -> Result<SequenceDataset> {
    let d = &cfg.data;
    let ds = if d.u_columns.is_empty() && d.y_columns.is_empty() {
        let mut ds = load_csv_auto(path)?;
        if d.sample_rate.is_some() {
            ds.sample_rate = d.sample_rate;
        }
        ds
    } else {
        let u: Vec<&str> = d.u_columns.iter().map(String::as_str).collect();
        let y: Vec<&str> = d.y_columns.iter().map(String::as_str).collect();
        load_csv(path, &u, &y, d.sample_rate)?
    };
    Ok(ds)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "test".into())
}

/// Simulated splits, or the files written by `simulate` when present.
pub fn resolve_datasets(cfg: &ExperimentConfig, out: &Path, n_train: Option<usize>) -> Result<Datasets> {
    if cfg.benchmark.is_synthetic() {
        let data_dir = out.join(DATA_DIR);
        let files = ["train.csv", "val.csv", "test.csv"].map(|f| data_dir.join(f));
        if n_train.is_none() && files.iter().all(|f| f.exists()) {
            let [train, val, test] = files.map(|f| load_csv_auto(&f));
            return Ok(Datasets {
                train: train?,
                val: val?,
                tests: vec![TestSet {
                    name: "test".into(),
                    data: test?,
                }],
            });
        }
        let mut sizes = cfg.sizes();
        if let Some(n) = n_train {
            sizes.0 = n;
        }
        let s = synthetic_splits(cfg.benchmark, sizes, cfg.noise_reading(), cfg.data.seed, cfg.data.test_seed)
            .expect("synthetic benchmark");
        return Ok(Datasets {
            train: s.train,
            val: s.val,
            tests: vec![TestSet {
                name: "test".into(),
                data: s.test,
            }],
        });
    }
    let train_path = cfg.data.train_file.as_ref().expect("validated");
    let train = load_file(cfg, train_path)?;
    // Without a validation file, early stopping monitors the training sequence.
    let val = match &cfg.data.val_file {
        Some(p) => load_file(cfg, p)?,
        None => train.clone(),
    };
    let tests = cfg
        .data
        .test_files
        .iter()
        .map(|p| {
            Ok(TestSet {
                name: stem(p),
                data: load_file(cfg, p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Datasets { train, val, tests })
}

/// Independent stream seed for job `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
