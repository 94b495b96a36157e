//! The six deep state-space model variants.
//!
//! Every variant shares the same building blocks: feature extractors for
//! `u`, `y` and `z` (2-layer MLPs, optionally batch-normalized), a 3-layer
//! encoder and decoder, a generative GRU stack over `h_t`, and depending on
//! the variant a 2-layer prior network or a second inference GRU stack.
//!
//! | variant        | recurrence input          | prior        | decoder input     | encoder input       |
//! |----------------|---------------------------|--------------|-------------------|---------------------|
//! | VAE-RNN        | `φu(u_t)`                 | `NN(h_t)`    | `φz(z_t)`         | `[φy(y_t), h_t]`    |
//! | VRNN-Gauss/GMM | `[φu(u_t), φz(z_{t-1})]`  | `NN(h_t)`    | `[φz(z_t), h_t]`  | `[φy(y_t), h_t]`    |
//! | VRNN-*-I       | `[φu(u_t), φz(z_{t-1})]`  | `N(0, I)`    | `[φz(z_t), h_t]`  | `[φy(y_t), h_t]`    |
//! | STORN          | `[φu(u_t), φz(z_t)]`      | `N(0, I)`    | `h_t`             | `[d_t, h_{t-1}]`    |
//!
//! STORN's `d_t = GRU_d(d_{t-1}, φy(y_t))` runs forward over the outputs.
//! During training the VRNN recurrence consumes the posterior sample of
//! `z_{t-1}`; during generation it consumes the prior sample.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::Normalization;
use crate::distributions::{standard_normal, DiagGaussianParams, Gaussian, GmmParams, Mixture};
use crate::layers::{BatchNorm, Ctx, GruStack, LayerError, Mlp, ParamSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("at time step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence must contain at least one step")]
    EmptySequence,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "VAE-RNN")]
    VaeRnn,
    #[serde(rename = "VRNN-Gauss")]
    VrnnGauss,
    #[serde(rename = "VRNN-Gauss-I")]
    VrnnGaussI,
    #[serde(rename = "VRNN-GMM")]
    VrnnGmm,
    #[serde(rename = "VRNN-GMM-I")]
    VrnnGmmI,
    #[serde(rename = "STORN")]
    Storn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::VaeRnn,
        Variant::VrnnGauss,
        Variant::VrnnGaussI,
        Variant::VrnnGmm,
        Variant::VrnnGmmI,
        Variant::Storn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VaeRnn => "VAE-RNN",
            Variant::VrnnGauss => "VRNN-Gauss",
            Variant::VrnnGaussI => "VRNN-Gauss-I",
            Variant::VrnnGmm => "VRNN-GMM",
            Variant::VrnnGmmI => "VRNN-GMM-I",
            Variant::Storn => "STORN",
        }
    }

    pub fn is_gmm(self) -> bool {
        matches!(self, Variant::VrnnGmm | Variant::VrnnGmmI)
    }

    pub fn static_prior(self) -> bool {
        matches!(self, Variant::VrnnGaussI | Variant::VrnnGmmI | Variant::Storn)
    }

    fn is_vrnn(self) -> bool {
        matches!(
            self,
            Variant::VrnnGauss | Variant::VrnnGaussI | Variant::VrnnGmm | Variant::VrnnGmmI
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant {s:?}; expected one of {}", names.join(", "))
            })
    }
}

pub const DEFAULT_MIXTURES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub u_dim: usize,
    pub y_dim: usize,
    pub h_dim: usize,
    pub z_dim: usize,
    pub n_layers: usize,
    /// Mixture components; `Some` exactly for the GMM variants.
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

impl ModelConfig {
    /// Config with the variant's default mixture count and no batch norm.
    pub fn new(variant: Variant, u_dim: usize, y_dim: usize, h_dim: usize, z_dim: usize, n_layers: usize) -> Self {
        ModelConfig {
            variant,
            u_dim,
            y_dim,
            h_dim,
            z_dim,
            n_layers,
            mixtures: variant.is_gmm().then_some(DEFAULT_MIXTURES),
            batchnorm: false,
            mc_samples: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("u_dim", self.u_dim),
            ("y_dim", self.y_dim),
            ("h_dim", self.h_dim),
            ("z_dim", self.z_dim),
            ("n_layers", self.n_layers),
            ("mc_samples", self.mc_samples),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        match (self.variant.is_gmm(), self.mixtures) {
            (true, Some(k)) if k >= 1 => Ok(()),
            (true, _) => Err(ModelError::Config(format!("{} needs a mixture count >= 1", self.variant))),
            (false, Some(_)) => Err(ModelError::Config(format!("{} has no mixture head", self.variant))),
            (false, None) => Ok(()),
        }
    }

    fn rnn_in(&self) -> usize {
        match self.variant {
            Variant::VaeRnn => self.h_dim,
            _ => 2 * self.h_dim,
        }
    }

    fn decoder_in(&self) -> usize {
        match self.variant {
            Variant::VaeRnn | Variant::Storn => self.h_dim,
            _ => 2 * self.h_dim,
        }
    }

    fn decoder_out(&self) -> usize {
        match self.mixtures {
            Some(k) => Mixture::raw_width(k, self.y_dim),
            None => 2 * self.y_dim,
        }
    }

    fn feature_dims(&self, in_dim: usize) -> [usize; 3] {
        [in_dim, self.h_dim, self.h_dim]
    }

    fn encoder_dims(&self) -> [usize; 4] {
        [2 * self.h_dim, self.h_dim, self.h_dim, 2 * self.z_dim]
    }

    fn decoder_dims(&self) -> [usize; 4] {
        [self.decoder_in(), self.h_dim, self.h_dim, self.decoder_out()]
    }

    fn prior_dims(&self) -> [usize; 3] {
        [self.h_dim, self.h_dim, 2 * self.z_dim]
    }
}

/// Exact number of trainable scalars for a config.
///
/// Sum of: three feature extractors `[d, h, h]` (d = u, y, z), encoder
/// `[2h, h, h, 2z]`, decoder `[d_in, h, h, d_out]`, the generative GRU stack,
/// plus a prior `[h, h, 2z]` for dynamic-prior variants, an inference GRU
/// stack over `φy` for STORN, and `2h` per batch-norm layer when enabled.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let c = config;
    let mut n = Mlp::num_params(&c.feature_dims(c.u_dim))
        + Mlp::num_params(&c.feature_dims(c.y_dim))
        + Mlp::num_params(&c.feature_dims(c.z_dim))
        + Mlp::num_params(&c.encoder_dims())
        + Mlp::num_params(&c.decoder_dims())
        + GruStack::num_params(c.rnn_in(), c.h_dim, c.n_layers);
    if !c.variant.static_prior() {
        n += Mlp::num_params(&c.prior_dims());
    }
    if c.variant == Variant::Storn {
        n += GruStack::num_params(c.h_dim, c.h_dim, c.n_layers);
    }
    if c.batchnorm {
        n += 3 * BatchNorm::num_params(c.h_dim);
    }
    n
}

#[derive(Clone, Debug)]
struct Nets {
    phi_u: Mlp,
    phi_y: Mlp,
    phi_z: Mlp,
    bn_u: Option<BatchNorm>,
    bn_y: Option<BatchNorm>,
    bn_z: Option<BatchNorm>,
    encoder: Mlp,
    decoder: Mlp,
    prior: Option<Mlp>,
    rnn: GruStack,
    rnn_d: Option<GruStack>,
}

/// Output distribution of one step, on the tape.
#[derive(Clone, Debug)]
pub enum OutputHead<'t> {
    Gaussian(Gaussian<'t>),
    Mixture(Mixture<'t>),
}

impl<'t> OutputHead<'t> {
    pub fn log_prob(&self, y: &Var<'t>) -> Result<Var<'t>> {
        Ok(match self {
            OutputHead::Gaussian(g) => g.log_prob(y)?,
            OutputHead::Mixture(m) => m.log_prob(y)?,
        })
    }

    /// Point prediction: the mean, or the mixture mean.
    pub fn mean(&self) -> Result<Var<'t>> {
        Ok(match self {
            OutputHead::Gaussian(g) => g.mu,
            OutputHead::Mixture(m) => m.mean()?,
        })
    }

    pub fn params_row(&self, r: usize) -> OutputParams {
        match self {
            OutputHead::Gaussian(g) => OutputParams::Gaussian(g.params_row(r)),
            OutputHead::Mixture(m) => OutputParams::Mixture(m.params_row(r)),
        }
    }
}

/// Output distribution of one step for one sequence, as values.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputParams {
    Gaussian(DiagGaussianParams),
    Mixture(GmmParams),
}

impl OutputParams {
    pub fn log_prob(&self, y: &[f64]) -> f64 {
        match self {
            OutputParams::Gaussian(g) => g.log_prob(y),
            OutputParams::Mixture(m) => m.log_prob(y),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            OutputParams::Gaussian(g) => g.mu.clone(),
            OutputParams::Mixture(m) => m.mean(),
        }
    }

    pub fn std(&self) -> Vec<f64> {
        match self {
            OutputParams::Gaussian(g) => g.sigma.clone(),
            OutputParams::Mixture(m) => m.std(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            OutputParams::Gaussian(g) => g.sample(rng),
            OutputParams::Mixture(m) => m.sample(rng),
        }
    }

    /// Gaussian with the mixture's first two moments (identity for Gaussians).
    pub fn moment_matched(&self) -> DiagGaussianParams {
        DiagGaussianParams {
            mu: self.mean(),
            sigma: self.std(),
        }
    }

    /// Maps normalized-unit parameters to raw units: `y = mean + std * y_norm`.
    pub fn denormalize(&self, mean: &[f64], std: &[f64]) -> OutputParams {
        let g = |p: &DiagGaussianParams| DiagGaussianParams {
            mu: p.mu.iter().zip(mean).zip(std).map(|((m, a), s)| a + s * m).collect(),
            sigma: p.sigma.iter().zip(std).map(|(x, s)| x * s).collect(),
        };
        match self {
            OutputParams::Gaussian(p) => OutputParams::Gaussian(g(p)),
            OutputParams::Mixture(m) => OutputParams::Mixture(GmmParams {
                logits: m.logits.clone(),
                components: m.components.iter().map(g).collect(),
            }),
        }
    }
}

/// Prior, posterior and output distributions of one inference step.
#[derive(Clone, Debug)]
pub struct StepDistributions<'t> {
    pub prior: Gaussian<'t>,
    pub posterior: Gaussian<'t>,
    pub output: OutputHead<'t>,
    /// `log p(y_t | ·)` at the posterior sample, `[rows, 1]`.
    pub log_lik: Var<'t>,
    /// `KL(q(z_t | ·) ‖ p(z_t | ·))`, `[rows, 1]`.
    pub kl: Var<'t>,
}

/// Recurrent state on a tape: per-layer `h`, per-layer `d` (STORN), last `z`.
#[derive(Clone, Debug)]
pub struct State<'t> {
    pub h: Vec<Var<'t>>,
    pub d: Vec<Var<'t>>,
    pub z: Var<'t>,
}

/// Recurrent state detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct StateValues {
    pub h: Vec<Tensor>,
    pub d: Vec<Tensor>,
    pub z: Tensor,
}

impl StateValues {
    pub fn attach<'t>(&self, tape: &'t Tape) -> State<'t> {
        State {
            h: self.h.iter().map(|t| tape.constant(t)).collect(),
            d: self.d.iter().map(|t| tape.constant(t)).collect(),
            z: tape.constant(&self.z),
        }
    }
}

impl State<'_> {
    pub fn detach(&self) -> StateValues {
        StateValues {
            h: self.h.iter().map(|v| v.value()).collect(),
            d: self.d.iter().map(|v| v.value()).collect(),
            z: self.z.value(),
        }
    }
}

/// Aligned input/output sequences as `T` arrays of shape `[rows, dim]`.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub u: Vec<Tensor>,
    pub y: Vec<Tensor>,
}

impl SeqBatch {
    /// Stacks equal-length sequences (`[T][dim]` each) into a batch.
    pub fn from_sequences(u: &[&[Vec<f64>]], y: &[&[Vec<f64>]]) -> Result<Self> {
        let stack = |seqs: &[&[Vec<f64>]]| -> Result<Vec<Tensor>> {
            let t_len = seqs.first().map_or(0, |s| s.len());
            if seqs.iter().any(|s| s.len() != t_len) {
                return Err(ModelError::Dimension("ragged batch".into()));
            }
            (0..t_len)
                .map(|t| {
                    let rows: Vec<Vec<f64>> = seqs.iter().map(|s| s[t].clone()).collect();
                    Tensor::from_rows(&rows).map_err(ModelError::from)
                })
                .collect()
        };
        let batch = SeqBatch {
            u: stack(u)?,
            y: stack(y)?,
        };
        if batch.u.len() != batch.y.len() {
            return Err(ModelError::Dimension(format!(
                "u has {} steps, y has {}",
                batch.u.len(),
                batch.y.len()
            )));
        }
        Ok(batch)
    }

    pub fn single(u: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Self> {
        Self::from_sequences(&[u], &[y])
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.u.first().map_or(0, |t| t.rows())
    }

    /// Repeats every row `times` times (Monte-Carlo replication).
    pub fn tile(&self, times: usize) -> SeqBatch {
        let tile = |t: &Tensor| {
            let mut data = Vec::with_capacity(t.len() * times);
            for _ in 0..times {
                data.extend_from_slice(t.data());
            }
            Tensor::new(&[t.rows() * times, t.cols()], data).expect("tiled shape")
        };
        SeqBatch {
            u: self.u.iter().map(tile).collect(),
            y: self.y.iter().map(tile).collect(),
        }
    }
}

/// Loss on a tape, with the per-step distributions.
pub struct ElboOutput<'t> {
    /// `-(1/T) Σ_t [log p(y_t|·) - KL_t]`, averaged over rows.
    pub loss: Var<'t>,
    pub steps: Vec<StepDistributions<'t>>,
}

/// Tape-free ELBO estimate over one sequence.
#[derive(Clone, Debug)]
pub struct ElboEstimate {
    /// Per-step ELBO averaged over samples (normalized units).
    pub per_step: Vec<f64>,
    /// Mean per-step ELBO over steps and samples.
    pub mean: f64,
    /// Standard error of `mean` across the independent samples.
    pub std_error: f64,
    /// Per-sample mean per-step ELBO.
    pub samples: Vec<f64>,
}

/// Open-loop rollout of one sequence (normalized units).
#[derive(Clone, Debug)]
pub struct Rollout {
    pub outputs: Vec<OutputParams>,
    /// Point predictions: decoder means (mixture mean for GMM heads).
    pub means: Vec<Vec<f64>>,
    pub samples: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct DeepSsm {
    config: ModelConfig,
    params: ParamSet,
    nets: Nets,
    /// Normalization fitted on the training data, stored with checkpoints.
    pub normalization: Option<Normalization>,
}

impl DeepSsm {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut set = ParamSet::new();
        let phi_u = Mlp::new(&mut set, "phi_u", &c.feature_dims(c.u_dim), rng);
        let phi_y = Mlp::new(&mut set, "phi_y", &c.feature_dims(c.y_dim), rng);
        let phi_z = Mlp::new(&mut set, "phi_z", &c.feature_dims(c.z_dim), rng);
        let (bn_u, bn_y, bn_z) = if c.batchnorm {
            (
                Some(BatchNorm::new(&mut set, "bn_u", c.h_dim)),
                Some(BatchNorm::new(&mut set, "bn_y", c.h_dim)),
                Some(BatchNorm::new(&mut set, "bn_z", c.h_dim)),
            )
        } else {
            (None, None, None)
        };
        let encoder = Mlp::new(&mut set, "encoder", &c.encoder_dims(), rng);
        let decoder = Mlp::new(&mut set, "decoder", &c.decoder_dims(), rng);
        let prior = (!c.variant.static_prior()).then(|| Mlp::new(&mut set, "prior", &c.prior_dims(), rng));
        let rnn = GruStack::new(&mut set, "rnn", c.rnn_in(), c.h_dim, c.n_layers, rng);
        let rnn_d = (c.variant == Variant::Storn)
            .then(|| GruStack::new(&mut set, "rnn_d", c.h_dim, c.h_dim, c.n_layers, rng));
        Ok(DeepSsm {
            config,
            params: set,
            nets: Nets {
                phi_u,
                phi_y,
                phi_z,
                bn_u,
                bn_y,
                bn_z,
                encoder,
                decoder,
                prior,
                rnn,
                rnn_d,
            },
            normalization: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn zero_state(&self, rows: usize) -> StateValues {
        let c = &self.config;
        let d_layers = if c.variant == Variant::Storn { c.n_layers } else { 0 };
        StateValues {
            h: vec![Tensor::zeros(&[rows, c.h_dim]); c.n_layers],
            d: vec![Tensor::zeros(&[rows, c.h_dim]); d_layers],
            z: Tensor::zeros(&[rows, c.z_dim]),
        }
    }

    fn feature<'t>(&self, ctx: &Ctx<'t>, mlp: &Mlp, bn: &Option<BatchNorm>, x: &Var<'t>) -> Result<Var<'t>> {
        let f = mlp.forward(ctx, x)?;
        Ok(match bn {
            Some(bn) => bn.forward(ctx, &f)?,
            None => f,
        })
    }

    fn prior_dist<'t>(&self, ctx: &Ctx<'t>, h_top: &Var<'t>) -> Result<Gaussian<'t>> {
        let rows = h_top.value().rows();
        Ok(match &self.nets.prior {
            Some(net) => Gaussian::from_raw(&net.forward(ctx, h_top)?, self.config.z_dim)?,
            None => Gaussian::standard(ctx.tape, rows, self.config.z_dim),
        })
    }

    fn output_head<'t>(&self, ctx: &Ctx<'t>, dec_in: &Var<'t>) -> Result<OutputHead<'t>> {
        let raw = self.nets.decoder.forward(ctx, dec_in)?;
        Ok(match self.config.mixtures {
            Some(k) => OutputHead::Mixture(Mixture::from_raw(&raw, k, self.config.y_dim)?),
            None => OutputHead::Gaussian(Gaussian::from_raw(&raw, self.config.y_dim)?),
        })
    }

    fn check_step(&self, u: &Var<'_>, y: Option<&Var<'_>>) -> Result<()> {
        let uc = u.shape().last().copied().unwrap_or(0);
        if uc != self.config.u_dim {
            return Err(ModelError::Dimension(format!("u has {uc} channels, model expects {}", self.config.u_dim)));
        }
        if let Some(y) = y {
            let yc = y.shape().last().copied().unwrap_or(0);
            if yc != self.config.y_dim {
                return Err(ModelError::Dimension(format!("y has {yc} channels, model expects {}", self.config.y_dim)));
            }
        }
        Ok(())
    }

    /// One step of the inference network; `eps` is the standard-normal draw
    /// for the posterior sample.
    pub fn infer_step<'t>(
        &self,
        ctx: &Ctx<'t>,
        state: &State<'t>,
        u: &Var<'t>,
        y: &Var<'t>,
        eps: &Var<'t>,
    ) -> Result<(State<'t>, StepDistributions<'t>)> {
        self.check_step(u, Some(y))?;
        let n = &self.nets;
        let fu = self.feature(ctx, &n.phi_u, &n.bn_u, u)?;
        let fy = self.feature(ctx, &n.phi_y, &n.bn_y, y)?;
        let variant = self.config.variant;

        let (h, d, z, prior, posterior, output) = if variant == Variant::Storn {
            let rnn_d = n.rnn_d.as_ref().expect("STORN has an inference RNN");
            let d = rnn_d.step(ctx, &state.d, &fy)?;
            let h_prev = *state.h.last().expect("at least one layer");
            let enc_in = Var::concat(&[*d.last().unwrap(), h_prev])?;
            let posterior = Gaussian::from_raw(&n.encoder.forward(ctx, &enc_in)?, self.config.z_dim)?;
            let z = posterior.rsample(eps)?;
            let fz = self.feature(ctx, &n.phi_z, &n.bn_z, &z)?;
            let h = n.rnn.step(ctx, &state.h, &Var::concat(&[fu, fz])?)?;
            let h_top = *h.last().unwrap();
            let prior = self.prior_dist(ctx, &h_top)?;
            let output = self.output_head(ctx, &h_top)?;
            (h, d, z, prior, posterior, output)
        } else {
            let rnn_in = if variant.is_vrnn() {
                let fz_prev = self.feature(ctx, &n.phi_z, &n.bn_z, &state.z)?;
                Var::concat(&[fu, fz_prev])?
            } else {
                fu
            };
            let h = n.rnn.step(ctx, &state.h, &rnn_in)?;
            let h_top = *h.last().unwrap();
            let prior = self.prior_dist(ctx, &h_top)?;
            let enc_in = Var::concat(&[fy, h_top])?;
            let posterior = Gaussian::from_raw(&n.encoder.forward(ctx, &enc_in)?, self.config.z_dim)?;
            let z = posterior.rsample(eps)?;
            let fz = self.feature(ctx, &n.phi_z, &n.bn_z, &z)?;
            let dec_in = if variant.is_vrnn() { Var::concat(&[fz, h_top])? } else { fz };
            let output = self.output_head(ctx, &dec_in)?;
            (h, Vec::new(), z, prior, posterior, output)
        };

        let log_lik = output.log_prob(y)?;
        let kl = posterior.kl(&prior)?;
        Ok((
            State { h, d, z },
            StepDistributions {
                prior,
                posterior,
                output,
                log_lik,
                kl,
            },
        ))
    }

    /// One step of the generative network; `eps` is the draw for the prior sample.
    pub fn generate_step<'t>(
        &self,
        ctx: &Ctx<'t>,
        state: &State<'t>,
        u: &Var<'t>,
        eps: &Var<'t>,
    ) -> Result<(State<'t>, OutputHead<'t>)> {
        self.check_step(u, None)?;
        let n = &self.nets;
        let fu = self.feature(ctx, &n.phi_u, &n.bn_u, u)?;
        let variant = self.config.variant;
        if variant == Variant::Storn {
            let rows = eps.value().rows();
            let z = Gaussian::standard(ctx.tape, rows, self.config.z_dim).rsample(eps)?;
            let fz = self.feature(ctx, &n.phi_z, &n.bn_z, &z)?;
            let h = n.rnn.step(ctx, &state.h, &Var::concat(&[fu, fz])?)?;
            let output = self.output_head(ctx, h.last().unwrap())?;
            return Ok((State { h, d: Vec::new(), z }, output));
        }
        let rnn_in = if variant.is_vrnn() {
            let fz_prev = self.feature(ctx, &n.phi_z, &n.bn_z, &state.z)?;
            Var::concat(&[fu, fz_prev])?
        } else {
            fu
        };
        let h = n.rnn.step(ctx, &state.h, &rnn_in)?;
        let h_top = *h.last().unwrap();
        let z = self.prior_dist(ctx, &h_top)?.rsample(eps)?;
        let fz = self.feature(ctx, &n.phi_z, &n.bn_z, &z)?;
        let dec_in = if variant.is_vrnn() { Var::concat(&[fz, h_top])? } else { fz };
        let output = self.output_head(ctx, &dec_in)?;
        Ok((State { h, d: Vec::new(), z }, output))
    }

    /// Negative ELBO per time step over a batch, recorded on `ctx`'s tape.
    ///
    /// Every row is replicated `mc_samples` times; each replica draws its own
    /// reparameterized noise. `h_0`, `d_0` and `z_0` are zero.
    pub fn elbo_loss<'t, R: Rng + ?Sized>(&self, ctx: &Ctx<'t>, batch: &SeqBatch, rng: &mut R) -> Result<ElboOutput<'t>> {
        if batch.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let batch = if self.config.mc_samples > 1 {
            batch.tile(self.config.mc_samples)
        } else {
            batch.clone()
        };
        let rows = batch.rows();
        let mut state = self.zero_state(rows).attach(ctx.tape);
        let mut total: Option<Var<'t>> = None;
        let mut steps = Vec::with_capacity(batch.len());
        for (t, (u, y)) in batch.u.iter().zip(&batch.y).enumerate() {
            let at = |e: ModelError| ModelError::AtStep {
                step: t,
                source: Box::new(e),
            };
            let u = ctx.tape.constant(u);
            let y = ctx.tape.constant(y);
            let eps = ctx.tape.constant(&standard_normal(rng, rows, self.config.z_dim));
            let (next, dists) = self.infer_step(ctx, &state, &u, &y, &eps).map_err(at)?;
            let term = dists.log_lik.sub(&dists.kl).map_err(|e| at(e.into()))?;
            total = Some(match total {
                None => term,
                Some(acc) => acc.add(&term).map_err(|e| at(e.into()))?,
            });
            steps.push(dists);
            state = next;
        }
        let scale = -1.0 / (batch.len() * rows) as f64;
        let loss = total.expect("non-empty").sum()?.scale(scale)?;
        Ok(ElboOutput { loss, steps })
    }

    /// ELBO of one sequence with `samples` independent noise replicas,
    /// evaluated step by step without retaining a graph.
    pub fn elbo_estimate<R: Rng + ?Sized>(
        &self,
        u: &[Vec<f64>],
        y: &[Vec<f64>],
        samples: usize,
        rng: &mut R,
    ) -> Result<ElboEstimate> {
        if u.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let batch = SeqBatch::single(u, y)?.tile(samples.max(1));
        let rows = batch.rows();
        let mut state = self.zero_state(rows);
        let mut sums = vec![0.0; rows];
        let mut per_step = Vec::with_capacity(batch.len());
        for (t, (ut, yt)) in batch.u.iter().zip(&batch.y).enumerate() {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.params, false);
            let eps = tape.constant(&standard_normal(rng, rows, self.config.z_dim));
            let (next, dists) = self
                .infer_step(&ctx, &state.attach(&tape), &tape.constant(ut), &tape.constant(yt), &eps)
                .map_err(|e| ModelError::AtStep {
                    step: t,
                    source: Box::new(e),
                })?;
            let ll = dists.log_lik.value();
            let kl = dists.kl.value();
            let mut step_sum = 0.0;
            for r in 0..rows {
                let v = ll.data()[r] - kl.data()[r];
                sums[r] += v;
                step_sum += v;
            }
            per_step.push(step_sum / rows as f64);
            state = next.detach();
        }
        let t_len = batch.len() as f64;
        let samples: Vec<f64> = sums.iter().map(|s| s / t_len).collect();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std_error = if samples.len() > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Ok(ElboEstimate {
            per_step,
            mean,
            std_error,
            samples,
        })
    }

    /// Open-loop rollout from `h_0 = 0` driven by `u` only.
    pub fn generate<R: Rng + ?Sized>(&self, u: &[Vec<f64>], rng: &mut R) -> Result<Rollout> {
        let mut state = self.zero_state(1);
        let mut outputs = Vec::with_capacity(u.len());
        let mut means = Vec::with_capacity(u.len());
        let mut samples = Vec::with_capacity(u.len());
        for (t, ut) in u.iter().enumerate() {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.params, false);
            let ut = Tensor::new(&[1, ut.len()], ut.clone())?;
            let eps = tape.constant(&standard_normal(rng, 1, self.config.z_dim));
            let (next, head) = self
                .generate_step(&ctx, &state.attach(&tape), &tape.constant(&ut), &eps)
                .map_err(|e| ModelError::AtStep {
                    step: t,
                    source: Box::new(e),
                })?;
            let params = head.params_row(0);
            means.push(head.mean()?.value().row(0).to_vec());
            samples.push(params.sample(rng));
            outputs.push(params);
            state = next.detach();
        }
        Ok(Rollout {
            outputs,
            means,
            samples,
        })
    }

    /// Model checkpoint: a text header (magic, config JSON, optional
    /// normalization JSON) followed by the parameter blob.
    ///
    /// ```text
    /// deepssm-model 1
    /// config {"variant":"STORN",...}
    /// normalization {...}|none
    /// <parameter checkpoint>
    /// ```
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "deepssm-model 1")?;
        let cfg = serde_json::to_string(&self.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        writeln!(out, "config {cfg}")?;
        match &self.normalization {
            Some(n) => {
                let s = serde_json::to_string(n).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
                writeln!(out, "normalization {s}")?;
            }
            None => writeln!(out, "normalization none")?,
        }
        self.params.write_checkpoint(&mut out)?;
        Ok(())
    }

    pub fn load<R: BufRead>(mut input: R) -> Result<Self> {
        let mut line = String::new();
        let mut read_line = |input: &mut R| -> Result<String> {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Err(ModelError::Checkpoint("unexpected end of file".into()));
            }
            Ok(line.trim_end().to_string())
        };
        let magic = read_line(&mut input)?;
        if magic != "deepssm-model 1" {
            return Err(ModelError::Checkpoint(format!("bad header {magic:?}")));
        }
        let cfg_line = read_line(&mut input)?;
        let cfg_json = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| ModelError::Checkpoint("missing config line".into()))?;
        let config: ModelConfig =
            serde_json::from_str(cfg_json).map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
        let norm_line = read_line(&mut input)?;
        let norm_json = norm_line
            .strip_prefix("normalization ")
            .ok_or_else(|| ModelError::Checkpoint("missing normalization line".into()))?;
        let normalization = if norm_json == "none" {
            None
        } else {
            Some(serde_json::from_str(norm_json).map_err(|e| ModelError::Checkpoint(format!("normalization: {e}")))?)
        };
        let stored = ParamSet::read_checkpoint(input)?;
        // Structure comes from the config; values from the blob.
        let mut model = DeepSsm::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        model.params.load_values(&stored)?;
        model.normalization = normalization;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn seq(r: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
    }

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig::new(variant, 2, 1, 4, 2, 1)
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let err = "LSTM".parse::<Variant>().unwrap_err();
        for v in Variant::ALL {
            assert!(err.contains(v.name()));
        }
    }

    #[test]
    fn config_validation() {
        assert!(small(Variant::VrnnGmm).validate().is_ok());
        let mut c = small(Variant::VrnnGmm);
        c.mixtures = None;
        assert!(c.validate().is_err());
        let mut c = small(Variant::Storn);
        c.mixtures = Some(5);
        assert!(c.validate().is_err());
        let mut c = small(Variant::VaeRnn);
        c.h_dim = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unit_dims_vae_rnn_count_by_hand() {
        let c = ModelConfig::new(Variant::VaeRnn, 1, 1, 1, 1, 1);
        // phi_u, phi_y, phi_z: [1,1,1] -> 2 + 2 each
        // encoder [2,1,1,2] -> 3 + 2 + 4; decoder [1,1,1,2] -> 2 + 2 + 4
        // prior [1,1,2] -> 2 + 4; GRU in 1, h 1 -> 3 * (1 + 1 + 1)
        let hand = 3 * 4 + 9 + 8 + 6 + 9;
        assert_eq!(count_parameters(&c), hand);
        assert_eq!(DeepSsm::new(c, &mut rng(0)).unwrap().num_parameters(), hand);
    }

    #[test]
    fn parameter_count_matches_registered_for_every_variant() {
        for v in Variant::ALL {
            for bn in [false, true] {
                let mut c = ModelConfig::new(v, 2, 3, 5, 2, 2);
                c.batchnorm = bn;
                let m = DeepSsm::new(c.clone(), &mut rng(1)).unwrap();
                assert_eq!(m.num_parameters(), count_parameters(&c), "{v} bn={bn}");
            }
        }
    }

    #[test]
    fn parameter_count_monotone_and_storn_superset() {
        for v in Variant::ALL {
            let a = ModelConfig::new(v, 1, 1, 10, 3, 1);
            let b = ModelConfig::new(v, 1, 1, 20, 3, 1);
            assert!(count_parameters(&b) > count_parameters(&a));
        }
        let storn = ModelConfig::new(Variant::Storn, 1, 1, 8, 3, 1);
        let vrnn_i = ModelConfig::new(Variant::VrnnGaussI, 1, 1, 8, 3, 1);
        assert!(count_parameters(&storn) > count_parameters(&vrnn_i));
    }

    fn zero_params(m: &mut DeepSsm) {
        for p in m.params_mut().iter_mut() {
            if p.trainable {
                p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    #[test]
    fn zeroed_vae_rnn_loss_is_pure_reconstruction() {
        let mut m = DeepSsm::new(ModelConfig::new(Variant::VaeRnn, 1, 1, 3, 2, 1), &mut rng(2)).unwrap();
        zero_params(&mut m);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, m.params(), true);
        let batch = SeqBatch::single(&[vec![0.7]], &[vec![1.5]]).unwrap();
        let out = m.elbo_loss(&ctx, &batch, &mut rng(3)).unwrap();
        let step = &out.steps[0];
        assert_eq!(step.kl.item(), 0.0);
        // Decoder emits mu = 0, sigma = softplus(0) + floor regardless of z.
        let sigma = std::f64::consts::LN_2 + crate::distributions::SIGMA_FLOOR;
        let expect = 0.5 * (2.0 * std::f64::consts::PI).ln() + sigma.ln() + 1.5f64.powi(2) / (2.0 * sigma * sigma);
        assert!((out.loss.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn static_prior_posterior_pinned_gives_zero_kl() {
        let tape = Tape::new();
        let prior = Gaussian::standard(&tape, 1, 3);
        let posterior = Gaussian {
            mu: tape.constant(&Tensor::zeros(&[1, 3])),
            sigma: tape.constant(&Tensor::full(&[1, 3], 1.0)),
        };
        assert_eq!(posterior.kl(&prior).unwrap().item(), 0.0);
    }

    #[test]
    fn kl_terms_nonnegative_for_all_variants() {
        let mut r = rng(4);
        for v in Variant::ALL {
            let m = DeepSsm::new(small(v), &mut r).unwrap();
            let (u, y) = (seq(&mut r, 6, 2), seq(&mut r, 6, 1));
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, m.params(), false);
            let out = m.elbo_loss(&ctx, &SeqBatch::single(&u, &y).unwrap(), &mut r).unwrap();
            for s in &out.steps {
                assert!(s.kl.item() >= 0.0, "{v}");
            }
        }
    }

    #[test]
    fn tape_and_stepwise_elbo_agree() {
        let mut r = rng(5);
        for v in Variant::ALL {
            let m = DeepSsm::new(small(v), &mut r).unwrap();
            let (u, y) = (seq(&mut r, 7, 2), seq(&mut r, 7, 1));
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, m.params(), false);
            let loss = m.elbo_loss(&ctx, &SeqBatch::single(&u, &y).unwrap(), &mut rng(6)).unwrap().loss.item();
            let est = m.elbo_estimate(&u, &y, 1, &mut rng(6)).unwrap();
            assert!((loss + est.mean).abs() < 1e-12, "{v}: {loss} vs {}", est.mean);
        }
    }

    #[test]
    fn elbo_loss_rejects_empty_and_mismatched_input() {
        let m = DeepSsm::new(small(Variant::Storn), &mut rng(7)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, m.params(), false);
        let empty = SeqBatch { u: vec![], y: vec![] };
        assert!(matches!(m.elbo_loss(&ctx, &empty, &mut rng(8)), Err(ModelError::EmptySequence)));
        let bad = SeqBatch::single(&[vec![0.0]], &[vec![0.0]]).unwrap();
        assert!(m.elbo_loss(&ctx, &bad, &mut rng(8)).is_err());
    }

    #[test]
    fn generate_is_seeded_and_causal() {
        let mut r = rng(9);
        for v in Variant::ALL {
            let m = DeepSsm::new(small(v), &mut r).unwrap();
            let u = seq(&mut r, 10, 2);
            let a = m.generate(&u, &mut rng(10)).unwrap();
            let b = m.generate(&u, &mut rng(10)).unwrap();
            assert_eq!(a.means, b.means);
            assert_eq!(a.samples, b.samples);
            let prefix = m.generate(&u[..4], &mut rng(10)).unwrap();
            assert_eq!(prefix.means[..], a.means[..4]);
            assert_eq!(prefix.outputs[..], a.outputs[..4]);
        }
    }

    #[test]
    fn zeroed_vae_rnn_generates_constant_mean() {
        let mut m = DeepSsm::new(ModelConfig::new(Variant::VaeRnn, 1, 1, 3, 2, 1), &mut rng(11)).unwrap();
        zero_params(&mut m);
        let u: Vec<Vec<f64>> = (0..20).map(|k| vec![(k as f64).sin()]).collect();
        let out = m.generate(&u, &mut rng(12)).unwrap();
        assert!(out.means.iter().all(|mu| mu == &out.means[0]));
    }

    #[test]
    fn elbo_is_causal_in_inputs_and_outputs() {
        let mut r = rng(13);
        for v in Variant::ALL {
            let m = DeepSsm::new(small(v), &mut r).unwrap();
            let (u, y) = (seq(&mut r, 8, 2), seq(&mut r, 8, 1));
            let mut u2 = u.clone();
            let mut y2 = y.clone();
            u2[5] = vec![3.0, -3.0];
            y2[6] = vec![-4.0];
            let a = m.elbo_estimate(&u, &y, 1, &mut rng(14)).unwrap();
            let b = m.elbo_estimate(&u2, &y2, 1, &mut rng(14)).unwrap();
            assert_eq!(a.per_step[..5], b.per_step[..5], "{v}");
            assert_ne!(a.per_step[5..], b.per_step[5..], "{v}");
        }
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let mut r = rng(18);
        for v in Variant::ALL {
            let mut c = ModelConfig::new(v, 2, 1, 3, 2, 1);
            c.mixtures = v.is_gmm().then_some(2);
            c.batchnorm = v == Variant::VrnnGauss;
            let mut m = DeepSsm::new(c, &mut r).unwrap();
            // Zero biases behind dead ReLUs would sit exactly on the kink.
            for p in m.params_mut().iter_mut().filter(|p| p.trainable) {
                p.value.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.3..0.3));
            }
            let u = seq(&mut r, 3, 2);
            let u2 = seq(&mut r, 3, 2);
            let (y, y2) = (seq(&mut r, 3, 1), seq(&mut r, 3, 1));
            let batch = SeqBatch::from_sequences(&[&u, &u2], &[&y, &y2]).unwrap();
            let inputs: Vec<Tensor> = m.params().iter().map(|p| p.value.clone()).collect();
            let err = crate::autodiff::finite_difference_check(
                |tape, vars| {
                    let ctx = Ctx::from_vars(tape, vars.to_vec(), true);
                    // Re-seeding freezes the reparameterization noise.
                    Ok(m.elbo_loss(&ctx, &batch, &mut rng(19)).expect("finite loss").loss)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{v}: {err}");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut c = small(Variant::VrnnGmm);
        c.batchnorm = true;
        let m = DeepSsm::new(c, &mut rng(15)).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = DeepSsm::load(buf.as_slice()).unwrap();
        assert_eq!(back.config(), m.config());
        let u = seq(&mut rng(16), 5, 2);
        assert_eq!(m.generate(&u, &mut rng(17)).unwrap().means, back.generate(&u, &mut rng(17)).unwrap().means);
    }
}
