//! Benchmark simulators, excitation signals, CSV datasets, normalization and
//! the exact Kalman likelihood of the linear toy system.
//!
//! Both simulators start from `x_0 = 0` and apply the input of step `k`
//! before emitting `y_k`:
//!
//! ```text
//! x_k = f(x_{k-1}, u_k) + v_k
//! y_k = g(x_k) + w_k
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: String },
    #[error("dataset is empty")]
    Empty,
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: String, column: String },
    #[error("{path}: row {row}, column {column:?}: cannot parse {value:?}")]
    Parse {
        path: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: row {row} has {found} cells, header has {expected}")]
    Ragged {
        path: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
    #[error("{path}: malformed metadata line {line}")]
    Metadata { path: String, line: usize },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("innovation variance {value} at step {step} is not positive")]
    NonPositiveInnovation { step: usize, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// How the second argument of `N(0, s)` in a noise specification is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseReading {
    /// `s` is the variance.
    Variance,
    /// `s` is the standard deviation.
    StdDev,
}

impl NoiseReading {
    pub fn variance(self, s: f64) -> f64 {
        match self {
            NoiseReading::Variance => s,
            NoiseReading::StdDev => s * s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// i.i.d. `U[-2.5, 2.5]`.
    Uniform,
    /// `u_k = sin(2kπ/10) + sin(2kπ/25)`, `k = 1, 2, ...`.
    TestSine,
}

pub const UNIFORM_BOUND: f64 = 2.5;

pub fn gen_input<R: Rng + ?Sized>(kind: InputKind, n: usize, rng: &mut R) -> Vec<f64> {
    match kind {
        InputKind::Uniform => (0..n).map(|_| rng.random_range(-UNIFORM_BOUND..=UNIFORM_BOUND)).collect(),
        InputKind::TestSine => (1..=n).map(test_sine).collect(),
    }
}

pub fn test_sine(k: usize) -> f64 {
    let k = k as f64;
    let tau = 2.0 * std::f64::consts::PI;
    (tau * k / 10.0).sin() + (tau * k / 25.0).sin()
}

/// Aligned raw input/output sequences, `T × dim` each.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub u: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub provenance: String,
    pub sample_rate: Option<f64>,
}

impl SequenceDataset {
    pub fn new(u: Vec<Vec<f64>>, y: Vec<Vec<f64>>, provenance: impl Into<String>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(DataError::Length(format!("u has {} samples, y has {}", u.len(), y.len())));
        }
        for (name, rows) in [("u", &u), ("y", &y)] {
            if let Some(first) = rows.first() {
                if let Some(t) = rows.iter().position(|r| r.len() != first.len()) {
                    return Err(DataError::Length(format!("{name} row {t} has {} channels", rows[t].len())));
                }
            }
        }
        Ok(SequenceDataset {
            u,
            y,
            provenance: provenance.into(),
            sample_rate: None,
        })
    }

    /// Single-input single-output dataset.
    pub fn siso(u: &[f64], y: &[f64], provenance: impl Into<String>) -> Result<Self> {
        Self::new(u.iter().map(|&v| vec![v]).collect(), y.iter().map(|&v| vec![v]).collect(), provenance)
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn u_dim(&self) -> usize {
        self.u.first().map_or(0, Vec::len)
    }

    pub fn y_dim(&self) -> usize {
        self.y.first().map_or(0, Vec::len)
    }

    /// First output channel as a flat series.
    pub fn y_channel(&self, c: usize) -> Vec<f64> {
        self.y.iter().map(|r| r[c]).collect()
    }

    pub fn u_channel(&self, c: usize) -> Vec<f64> {
        self.u.iter().map(|r| r[c]).collect()
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    fn fit(rows: &[Vec<f64>], prefix: &str) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        let dim = rows[0].len();
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        if let Some(c) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(DataError::ZeroVariance {
                channel: format!("{prefix}{c}"),
            });
        }
        Ok(ChannelStats { mean, std })
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
            .collect()
    }

    pub fn invert(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect())
            .collect()
    }
}

/// Normalization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub u: ChannelStats,
    pub y: ChannelStats,
}

impl Normalization {
    pub fn fit(train: &SequenceDataset) -> Result<Self> {
        Ok(Normalization {
            u: ChannelStats::fit(&train.u, "u")?,
            y: ChannelStats::fit(&train.y, "y")?,
        })
    }

    fn check(&self, ds: &SequenceDataset) -> Result<()> {
        if ds.u_dim() != self.u.mean.len() || ds.y_dim() != self.y.mean.len() {
            return Err(DataError::Length(format!(
                "dataset has {}/{} channels, statistics have {}/{}",
                ds.u_dim(),
                ds.y_dim(),
                self.u.mean.len(),
                self.y.mean.len()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, ds: &SequenceDataset) -> Result<SequenceDataset> {
        self.check(ds)?;
        Ok(SequenceDataset {
            u: self.u.apply(&ds.u),
            y: self.y.apply(&ds.y),
            provenance: ds.provenance.clone(),
            sample_rate: ds.sample_rate,
        })
    }

    pub fn denormalize(&self, ds: &SequenceDataset) -> Result<SequenceDataset> {
        self.check(ds)?;
        Ok(SequenceDataset {
            u: self.u.invert(&ds.u),
            y: self.y.invert(&ds.y),
            provenance: ds.provenance.clone(),
            sample_rate: ds.sample_rate,
        })
    }
}

type Mat2 = [[f64; 2]; 2];

/// Two-state SISO linear-Gaussian system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    pub a: Mat2,
    pub b: [f64; 2],
    pub c: [f64; 2],
    /// Process-noise covariance.
    pub q: Mat2,
    /// Measurement-noise variance.
    pub r: f64,
}

impl LinearSystem {
    /// The toy benchmark: `A = [[0.7, 0.8], [0, 0.1]]`, `B = [-1, 0.1]ᵀ`,
    /// `C = [1, 0]`, `v ~ N(0, 0.5·I)`, `w ~ N(0, 1)` under `reading`.
    pub fn toy(reading: NoiseReading) -> Self {
        let q = reading.variance(0.5);
        LinearSystem {
            a: [[0.7, 0.8], [0.0, 0.1]],
            b: [-1.0, 0.1],
            c: [1.0, 0.0],
            q: [[q, 0.0], [0.0, q]],
            r: reading.variance(1.0),
        }
    }

    fn propagate(&self, x: [f64; 2], u: f64) -> [f64; 2] {
        [
            self.a[0][0] * x[0] + self.a[0][1] * x[1] + self.b[0] * u,
            self.a[1][0] * x[0] + self.a[1][1] * x[1] + self.b[1] * u,
        ]
    }

    fn output(&self, x: [f64; 2]) -> f64 {
        self.c[0] * x[0] + self.c[1] * x[1]
    }

    fn q_cholesky(&self) -> Mat2 {
        let l00 = self.q[0][0].max(0.0).sqrt();
        let l10 = if l00 > 0.0 { self.q[1][0] / l00 } else { 0.0 };
        let l11 = (self.q[1][1] - l10 * l10).max(0.0).sqrt();
        [[l00, 0.0], [l10, l11]]
    }
}

/// Simulated trajectory with its noiseless output component `C x_k`.
#[derive(Clone, Debug)]
pub struct LinearTrajectory {
    pub states: Vec<[f64; 2]>,
    pub clean: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn simulate_linear_trajectory<R: Rng + ?Sized>(
    sys: &LinearSystem,
    u: &[f64],
    rng: &mut R,
    noise: bool,
) -> LinearTrajectory {
    let l = sys.q_cholesky();
    let r_std = sys.r.sqrt();
    let mut x = [0.0; 2];
    let mut out = LinearTrajectory {
        states: Vec::with_capacity(u.len()),
        clean: Vec::with_capacity(u.len()),
        y: Vec::with_capacity(u.len()),
    };
    for &uk in u {
        x = sys.propagate(x, uk);
        if noise {
            let e0: f64 = StandardNormal.sample(rng);
            let e1: f64 = StandardNormal.sample(rng);
            x[0] += l[0][0] * e0;
            x[1] += l[1][0] * e0 + l[1][1] * e1;
        }
        let clean = sys.output(x);
        let w = if noise {
            let e: f64 = StandardNormal.sample(rng);
            r_std * e
        } else {
            0.0
        };
        out.states.push(x);
        out.clean.push(clean);
        out.y.push(clean + w);
    }
    out
}

pub fn simulate_linear<R: Rng + ?Sized>(sys: &LinearSystem, u: &[f64], rng: &mut R, noise: bool) -> SequenceDataset {
    let traj = simulate_linear_trajectory(sys, u, rng, noise);
    let tag = if noise { "linear-toy" } else { "linear-toy noiseless" };
    SequenceDataset::siso(u, &traj.y, tag).expect("aligned by construction")
}

/// Measurement-noise variance of the Narendra-Li benchmark.
pub const NARENDRA_LI_NOISE_VAR: f64 = 0.1;

pub fn narendra_li_step(x: [f64; 2], u: f64) -> [f64; 2] {
    let [x1, x2] = x;
    let next1 = (x1 / (1.0 + x1 * x1) + 1.0) * x2.sin();
    let next2 = x2 * x2.cos()
        + x1 * (-(x1 * x1 + x2 * x2) / 8.0).exp()
        + u.powi(3) / (1.0 + u * u + 0.5 * (x1 + x2).cos());
    [next1, next2]
}

pub fn narendra_li_output(x: [f64; 2]) -> f64 {
    let [x1, x2] = x;
    x1 / (1.0 + 0.5 * x2.sin()) + x2 / (1.0 + 0.5 * x1.sin())
}

/// Simulates `n` steps; `noise_var = 0` gives the noiseless system.
pub fn simulate_narendra_li<R: Rng + ?Sized>(
    n: usize,
    kind: InputKind,
    noise_var: f64,
    rng: &mut R,
) -> SequenceDataset {
    let u = gen_input(kind, n, rng);
    let sd = noise_var.sqrt();
    let mut x = [0.0; 2];
    let y: Vec<f64> = u
        .iter()
        .map(|&uk| {
            x = narendra_li_step(x, uk);
            let e = if sd > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                sd * e
            } else {
                0.0
            };
            narendra_li_output(x) + e
        })
        .collect();
    SequenceDataset::siso(&u, &y, "narendra-li").expect("aligned by construction")
}

/// Exact average per-step log-likelihood `(1/T) Σ log p(y_t | y_{1:t-1})`
/// of a SISO linear-Gaussian system, from `x_0 = 0`, `P_0 = 0`.
pub fn kalman_log_likelihood(sys: &LinearSystem, u: &[f64], y: &[f64]) -> Result<f64> {
    if u.len() != y.len() {
        return Err(DataError::Length(format!("u has {} samples, y has {}", u.len(), y.len())));
    }
    if u.is_empty() {
        return Err(DataError::Empty);
    }
    let (a, c) = (sys.a, sys.c);
    let mut x = [0.0; 2];
    let mut p: Mat2 = [[0.0; 2]; 2];
    let mut total = 0.0;
    for (t, (&uk, &yk)) in u.iter().zip(y).enumerate() {
        x = sys.propagate(x, uk);
        // P <- A P Aᵀ + Q
        let mut ap = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                ap[i][j] = a[i][0] * p[0][j] + a[i][1] * p[1][j];
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                p[i][j] = ap[i][0] * a[j][0] + ap[i][1] * a[j][1] + sys.q[i][j];
            }
        }
        let pc = [p[0][0] * c[0] + p[0][1] * c[1], p[1][0] * c[0] + p[1][1] * c[1]];
        let s = c[0] * pc[0] + c[1] * pc[1] + sys.r;
        if !(s > 0.0) {
            return Err(DataError::NonPositiveInnovation { step: t, value: s });
        }
        let e = yk - sys.output(x);
        total += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + e * e / s);
        let k = [pc[0] / s, pc[1] / s];
        x = [x[0] + k[0] * e, x[1] + k[1] * e];
        let prev = p;
        for i in 0..2 {
            for j in 0..2 {
                p[i][j] = prev[i][j] - k[i] * pc[j];
            }
        }
    }
    Ok(total / u.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Benchmark {
    LinearToy,
    NarendraLi,
    WienerHammerstein,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::LinearToy => "linear-toy",
            Benchmark::NarendraLi => "narendra-li",
            Benchmark::WienerHammerstein => "wiener-hammerstein",
        }
    }

    pub fn is_synthetic(self) -> bool {
        self != Benchmark::WienerHammerstein
    }

    /// The linear toy reads its noise levels as standard deviations, which
    /// reproduces the reference true-model RMSE; Narendra-Li reads variances.
    pub fn default_noise_reading(self) -> NoiseReading {
        match self {
            Benchmark::LinearToy => NoiseReading::StdDev,
            _ => NoiseReading::Variance,
        }
    }

    /// Default `(n_train, n_val, n_test)`.
    pub fn default_sizes(self) -> (usize, usize, usize) {
        match self {
            Benchmark::LinearToy => (2000, 2000, 5000),
            Benchmark::NarendraLi => (50_000, 5000, 5000),
            Benchmark::WienerHammerstein => (8192, 8192, 16_384),
        }
    }
}

/// Seed of the test realization shared by all runs.
pub const CANONICAL_TEST_SEED: u64 = 20_190_517;

/// Train, validation and test realizations of a synthetic benchmark.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SequenceDataset,
    pub val: SequenceDataset,
    pub test: SequenceDataset,
}

/// Simulates independent realizations: uniform input for train and
/// validation (streams `seed` and `seed + 1`), the test sine with noise
/// from `test_seed` for testing.
pub fn synthetic_splits(
    bench: Benchmark,
    sizes: (usize, usize, usize),
    reading: NoiseReading,
    seed: u64,
    test_seed: u64,
) -> Option<Splits> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let make = |n: usize, kind: InputKind, s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut ds = match bench {
            Benchmark::LinearToy => {
                let u = gen_input(kind, n, &mut rng);
                simulate_linear(&LinearSystem::toy(reading), &u, &mut rng, true)
            }
            Benchmark::NarendraLi => {
                simulate_narendra_li(n, kind, reading.variance(NARENDRA_LI_NOISE_VAR), &mut rng)
            }
            Benchmark::WienerHammerstein => unreachable!(),
        };
        ds.provenance = format!("{} seed={s}", bench.name());
        ds
    };
    bench.is_synthetic().then(|| Splits {
        train: make(sizes.0, InputKind::Uniform, seed),
        val: make(sizes.1, InputKind::Uniform, seed.wrapping_add(1)),
        test: make(sizes.2, InputKind::TestSine, test_seed),
    })
}

pub fn default_columns(u_dim: usize, y_dim: usize) -> (Vec<String>, Vec<String>) {
    (
        (0..u_dim).map(|i| format!("u{i}")).collect(),
        (0..y_dim).map(|i| format!("y{i}")).collect(),
    )
}

/// Path of the `key=value` metadata sidecar for a dataset file.
pub fn metadata_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes `u0,..,y0,..` CSV plus a metadata sidecar.
pub fn save_csv(path: &Path, ds: &SequenceDataset) -> Result<()> {
    let p = path.display().to_string();
    let csv_err = |e: csv::Error| DataError::Csv {
        path: p.clone(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let (uc, yc) = default_columns(ds.u_dim(), ds.y_dim());
    w.write_record(uc.iter().chain(&yc)).map_err(csv_err)?;
    for (u, y) in ds.u.iter().zip(&ds.y) {
        w.write_record(u.iter().chain(y).map(|v| format!("{v:?}"))).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    let mut meta = BTreeMap::new();
    meta.insert("provenance".to_string(), ds.provenance.clone());
    meta.insert("samples".to_string(), ds.len().to_string());
    if let Some(fs_hz) = ds.sample_rate {
        meta.insert("sample_rate".to_string(), format!("{fs_hz:?}"));
    }
    write_metadata(&metadata_path(path), &meta)
}

pub fn write_metadata(path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
    let body: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(path, body).map_err(io_err(path))
}

pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DataError::Metadata {
            path: path.display().to_string(),
            line: i + 1,
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn read_headed(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let p = path.display().to_string();
    let csv_err = |e: csv::Error| DataError::Csv {
        path: p.clone(),
        message: e.to_string(),
    };
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.is_empty() {
        return Err(DataError::Empty);
    }
    let records = r.records().collect::<std::result::Result<Vec<_>, _>>().map_err(csv_err)?;
    Ok((header, records))
}

/// Reads the named columns of a headed CSV file.
///
/// `sample_rate` overrides the sidecar's `sample_rate` entry when given.
/// Row numbers in errors count the header as row 1.
pub fn load_csv(path: &Path, u_cols: &[&str], y_cols: &[&str], sample_rate: Option<f64>) -> Result<SequenceDataset> {
    let p = path.display().to_string();
    let (header, records) = read_headed(path)?;
    let index = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn {
            path: p.clone(),
            column: name.to_string(),
        })
    };
    let ui: Vec<usize> = u_cols.iter().map(|c| index(c)).collect::<Result<_>>()?;
    let yi: Vec<usize> = y_cols.iter().map(|c| index(c)).collect::<Result<_>>()?;
    let mut u = Vec::with_capacity(records.len());
    let mut y = Vec::with_capacity(records.len());
    for rec in &records {
        let row = rec.position().map_or(0, |pos| pos.line() as usize);
        if rec.len() != header.len() {
            return Err(DataError::Ragged {
                path: p.clone(),
                row,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let parse = |i: usize| {
            rec[i].parse::<f64>().map_err(|_| DataError::Parse {
                path: p.clone(),
                row,
                column: header[i].clone(),
                value: rec[i].to_string(),
            })
        };
        u.push(ui.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?);
        y.push(yi.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?);
    }
    let meta_path = metadata_path(path);
    let meta = if meta_path.exists() {
        read_metadata(&meta_path)?
    } else {
        BTreeMap::new()
    };
    let mut ds = SequenceDataset::new(u, y, meta.get("provenance").cloned().unwrap_or(p))?;
    ds.sample_rate = sample_rate.or_else(|| meta.get("sample_rate").and_then(|s| s.parse().ok()));
    Ok(ds)
}

/// Loads every `u<k>` and `y<k>` column, in header order.
pub fn load_csv_auto(path: &Path) -> Result<SequenceDataset> {
    let (header, _) = read_headed(path)?;
    let pick = |prefix: char| -> Vec<&str> {
        header
            .iter()
            .map(String::as_str)
            .filter(|n| n.len() > 1 && n.starts_with(prefix) && n[1..].chars().all(|c| c.is_ascii_digit()))
            .collect()
    };
    let (u, y) = (pick('u'), pick('y'));
    if y.is_empty() {
        return Err(DataError::MissingColumn {
            path: path.display().to_string(),
            column: "y0".into(),
        });
    }
    load_csv(path, &u, &y, None)
}
