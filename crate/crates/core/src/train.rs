//! Adam, plateau learning-rate schedule, early stopping and chunked
//! mini-batching.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::data::SequenceDataset;
use crate::layers::{Ctx, ParamSet};
use crate::model::{DeepSsm, ModelError, SeqBatch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset of length {len} is shorter than one chunk of {chunk}")]
    TooShort { len: usize, chunk: usize },
    #[error("no training data")]
    NoData,
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGrad { name: String },
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.trainable && p.grad.iter().any(|g| !g.is_finite())) {
            return Err(TrainError::NonFiniteGrad { name: p.name.clone() });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = &p.grad;
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter_mut().filter(|p| p.trainable) {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainLoopConfig {
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub chunk_length: usize,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        TrainLoopConfig {
            lr: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 5,
            min_lr: 1e-6,
            early_stop_patience: 15,
            max_epochs: 300,
            batch_size: 64,
            chunk_length: 100,
            grad_clip: Some(10.0),
            seed: 0,
        }
    }
}

impl TrainLoopConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail("plateau_factor must lie in (0, 1)");
        }
        if self.chunk_length < 2 {
            return fail("chunk_length must be at least 2");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return fail("patience values must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be at least 1");
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 {
            return fail("lr must be positive and min_lr nonnegative");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return fail("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Splits every sequence into non-overlapping chunks (dropping each partial
/// tail), shuffles them and stacks them into batches of `batch_size`.
///
/// A trailing batch with a single chunk is dropped unless it is the only one.
pub fn chunk_sequences<R: rand::Rng + ?Sized>(
    data: &[SequenceDataset],
    chunk_length: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<SeqBatch>> {
    if data.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut chunks: Vec<(usize, usize)> = Vec::new();
    for (d, ds) in data.iter().enumerate() {
        if ds.len() < chunk_length {
            return Err(TrainError::TooShort {
                len: ds.len(),
                chunk: chunk_length,
            });
        }
        chunks.extend((0..ds.len() / chunk_length).map(|c| (d, c * chunk_length)));
    }
    chunks.shuffle(rng);
    let n_batches = chunks.len().div_ceil(batch_size);
    let mut out = Vec::with_capacity(n_batches);
    for group in chunks.chunks(batch_size) {
        if group.len() == 1 && !out.is_empty() {
            break;
        }
        let u: Vec<&[Vec<f64>]> = group.iter().map(|&(d, s)| &data[d].u[s..s + chunk_length]).collect();
        let y: Vec<&[Vec<f64>]> = group.iter().map(|&(d, s)| &data[d].y[s..s + chunk_length]).collect();
        out.push(SeqBatch::from_sequences(&u, &y)?);
    }
    Ok(out)
}

/// A model trainable by the loop: a parameter set, a differentiable batch
/// loss and a tape-free validation loss.
pub trait Objective {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn batch_loss<'t>(&self, ctx: &Ctx<'t>, batch: &SeqBatch, rng: &mut ChaCha8Rng) -> Result<Var<'t>>;
    fn validation_loss(&self, val: &[SequenceDataset], rng: &mut ChaCha8Rng) -> Result<f64>;
}

impl Objective for DeepSsm {
    fn params(&self) -> &ParamSet {
        DeepSsm::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        DeepSsm::params_mut(self)
    }

    fn batch_loss<'t>(&self, ctx: &Ctx<'t>, batch: &SeqBatch, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        Ok(self.elbo_loss(ctx, batch, rng)?.loss)
    }

    /// Negative ELBO per step, averaged over the validation sequences.
    fn validation_loss(&self, val: &[SequenceDataset], rng: &mut ChaCha8Rng) -> Result<f64> {
        if val.is_empty() {
            return Err(TrainError::NoData);
        }
        let mut total = 0.0;
        for ds in val {
            total -= self.elbo_estimate(&ds.u, &ds.y, self.config().mc_samples, rng)?.mean;
        }
        Ok(total / val.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    LrFloor,
    NanAbort,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::EarlyStop => "early-stop",
            StopReason::MaxEpochs => "max-epochs",
            StopReason::LrFloor => "lr-floor",
            StopReason::NanAbort => "nan-abort",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Error text when the run aborted.
    pub abort_detail: Option<String>,
    pub wall_clock_secs: f64,
    pub test_rmse: Option<f64>,
    pub test_nll: Option<f64>,
    pub config: TrainLoopConfig,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str = "kind,epoch,train_loss,val_loss,lr,stop_reason,best_epoch,test_rmse,test_nll,wall_clock_s";

    /// One row per epoch followed by a summary row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut s = String::new();
        writeln!(s, "{}", Self::CSV_HEADER).unwrap();
        for e in &self.epochs {
            writeln!(s, "epoch,{},{:?},{:?},{:?},,,,,", e.epoch, e.train_loss, e.val_loss, e.lr).unwrap();
        }
        writeln!(
            s,
            "summary,{},,{:?},,{},{},{},{},{:.3}",
            self.stop_epoch,
            self.best_val_loss,
            self.stop_reason.as_str(),
            self.best_epoch,
            opt(self.test_rmse),
            opt(self.test_nll),
            self.wall_clock_secs
        )
        .unwrap();
        s
    }
}

const VALIDATION_STREAM: u64 = 0x5eed_0f_7a1;

/// Runs the training protocol; on return the model holds the parameters
/// with the best validation loss.
pub fn train<M: Objective>(
    model: &mut M,
    train_set: &[SequenceDataset],
    val_set: &[SequenceDataset],
    cfg: &TrainLoopConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params(), cfg.lr);
    let mut best = model.params().clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut since_plateau = 0;
    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut abort_detail = None;

    for epoch in 1..=cfg.max_epochs {
        let outcome = run_epoch(model, train_set, cfg, &mut adam, &mut rng).and_then(|train_loss| {
            // Common validation noise across epochs.
            let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_STREAM);
            let val = model.validation_loss(val_set, &mut vrng)?;
            if !val.is_finite() {
                return Err(TrainError::Model(ModelError::Config(format!("validation loss {val}"))));
            }
            Ok((train_loss, val))
        });
        let (train_loss, val_loss) = match outcome {
            Ok(v) => v,
            Err(e @ (TrainError::Config(_) | TrainError::TooShort { .. } | TrainError::NoData)) => return Err(e),
            Err(TrainError::Model(ModelError::Dimension(d))) => {
                return Err(TrainError::Model(ModelError::Dimension(d)))
            }
            Err(e) => {
                stop = StopReason::NanAbort;
                abort_detail = Some(format!("epoch {epoch}: {e}"));
                break;
            }
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: adam.lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.params().clone();
            since_best = 0;
            since_plateau = 0;
        } else {
            since_best += 1;
            since_plateau += 1;
            if since_plateau >= cfg.plateau_patience {
                adam.lr *= cfg.plateau_factor;
                since_plateau = 0;
            }
        }
        if since_best >= cfg.early_stop_patience {
            stop = StopReason::EarlyStop;
            break;
        }
        if adam.lr < cfg.min_lr {
            stop = StopReason::LrFloor;
            break;
        }
    }

    model.params_mut().load_values(&best).map_err(ModelError::from)?;
    let stop_epoch = match stop {
        StopReason::NanAbort => epochs.len() + 1,
        _ => epochs.len(),
    };
    Ok(RunRecord {
        epochs,
        stop_epoch,
        stop_reason: stop,
        best_epoch,
        best_val_loss: best_val,
        abort_detail,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        test_rmse: None,
        test_nll: None,
        config: cfg.clone(),
    })
}

fn run_epoch<M: Objective>(
    model: &mut M,
    train_set: &[SequenceDataset],
    cfg: &TrainLoopConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batches = chunk_sequences(train_set, cfg.chunk_length, cfg.batch_size, rng)?;
    let mut total = 0.0;
    for batch in &batches {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, model.params(), true);
        let loss = model.batch_loss(&ctx, batch, rng)?;
        total += loss.item();
        let grads = tape.backward(loss)?;
        let bn = ctx.take_bn_updates();
        let params = model.params_mut();
        params.zero_grad();
        params.accumulate(&grads, ctx.vars());
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(params, c);
        }
        adam.step(params)?;
        params.apply_bn_updates(&bn);
    }
    Ok(total / batches.len() as f64)
}
