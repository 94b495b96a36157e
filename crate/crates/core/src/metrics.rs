//! RMSE, per-step NLL and open-loop evaluation in raw units.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, SequenceDataset};
use crate::model::{DeepSsm, ModelError, OutputParams};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {predicted} predictions, {observed} observations")]
    Length { predicted: usize, observed: usize },
    #[error("empty sequence")]
    Empty,
    #[error("model expects {expected} {what} channels, test data has {found}")]
    Channels {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_len(predicted: usize, observed: usize) -> Result<()> {
    if predicted != observed {
        return Err(MetricsError::Length { predicted, observed });
    }
    if observed == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// `sqrt(mean((ŷ - y)²))` over all steps and channels.
pub fn rmse(yhat: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    check_len(yhat.len(), y.len())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in yhat.iter().zip(y) {
        for (p, q) in a.iter().zip(b) {
            sum += (p - q).powi(2);
            n += 1;
        }
    }
    Ok((sum / n as f64).sqrt())
}

pub fn rmse_scalar(yhat: &[f64], y: &[f64]) -> Result<f64> {
    check_len(yhat.len(), y.len())?;
    let sum: f64 = yhat.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
    Ok((sum / y.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NllMode {
    /// Exact likelihood of the output head (mixture for GMM heads).
    Exact,
    /// Gaussian with the head's mean and standard deviation.
    MomentMatched,
}

/// Per-step values of `-log p(y_t)`.
pub fn nll_per_step(outputs: &[OutputParams], y: &[Vec<f64>], mode: NllMode) -> Result<Vec<f64>> {
    check_len(outputs.len(), y.len())?;
    Ok(outputs
        .iter()
        .zip(y)
        .map(|(o, yt)| match mode {
            NllMode::Exact => -o.log_prob(yt),
            NllMode::MomentMatched => -o.moment_matched().log_prob(yt),
        })
        .collect())
}

/// Mean per-step negative log-likelihood.
pub fn nll(outputs: &[OutputParams], y: &[Vec<f64>], mode: NllMode) -> Result<f64> {
    let steps = nll_per_step(outputs, y, mode)?;
    Ok(steps.iter().sum::<f64>() / steps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPrediction {
    pub t: usize,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub h_dim: usize,
    pub z_dim: usize,
    pub n_layers: usize,
    pub seed: Option<u64>,
    pub rmse: f64,
    /// NLL under the exact output likelihood.
    pub nll: f64,
    /// NLL under the moment-matched Gaussian; differs from `nll` for GMM heads.
    pub nll_moment_matched: f64,
    pub steps: Vec<StepPrediction>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "variant,h_dim,z_dim,n_layers,seed,rmse,nll,nll_moment_matched,steps";
    pub const STEP_CSV_HEADER: &'static str = "t,u,y,mu,sigma";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:?},{:?},{:?},{}",
            self.variant,
            self.h_dim,
            self.z_dim,
            self.n_layers,
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            self.rmse,
            self.nll,
            self.nll_moment_matched,
            self.steps.len()
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    /// Per-step predictions of the first input and output channel.
    pub fn steps_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", Self::STEP_CSV_HEADER).unwrap();
        for p in &self.steps {
            let u = p.u.first().copied().unwrap_or(f64::NAN);
            writeln!(s, "{},{:?},{:?},{:?},{:?}", p.t, u, p.y[0], p.mu[0], p.sigma[0]).unwrap();
        }
        s
    }

    /// `μ ± k·σ` of output channel `c`.
    pub fn band(&self, c: usize, k: f64) -> (Vec<f64>, Vec<f64>) {
        self.steps
            .iter()
            .map(|p| (p.mu[c] - k * p.sigma[c], p.mu[c] + k * p.sigma[c]))
            .unzip()
    }
}

/// Rolls the model out from `h_0 = 0` over the raw test input and scores the
/// raw test output.
///
/// Inputs are normalized and predictions denormalized with the model's
/// stored training statistics (identity when none are stored).
pub fn evaluate_open_loop<R: Rng + ?Sized>(model: &DeepSsm, test: &SequenceDataset, rng: &mut R) -> Result<EvalReport> {
    let cfg = model.config();
    if test.u_dim() != cfg.u_dim {
        return Err(MetricsError::Channels {
            what: "input",
            expected: cfg.u_dim,
            found: test.u_dim(),
        });
    }
    if test.y_dim() != cfg.y_dim {
        return Err(MetricsError::Channels {
            what: "output",
            expected: cfg.y_dim,
            found: test.y_dim(),
        });
    }
    if test.is_empty() {
        return Err(MetricsError::Empty);
    }
    let outputs: Vec<OutputParams> = match &model.normalization {
        Some(n) => model
            .generate(&n.u.apply(&test.u), rng)?
            .outputs
            .iter()
            .map(|o| o.denormalize(&n.y.mean, &n.y.std))
            .collect(),
        None => model.generate(&test.u, rng)?.outputs,
    };
    let means: Vec<Vec<f64>> = outputs.iter().map(OutputParams::mean).collect();
    let rmse = rmse(&means, &test.y)?;
    let nll_exact = nll(&outputs, &test.y, NllMode::Exact)?;
    let nll_mm = nll(&outputs, &test.y, NllMode::MomentMatched)?;
    let steps = outputs
        .iter()
        .zip(means)
        .enumerate()
        .map(|(t, (o, mu))| StepPrediction {
            t: t + 1,
            u: test.u[t].clone(),
            y: test.y[t].clone(),
            mu,
            sigma: o.std(),
        })
        .collect();
    Ok(EvalReport {
        variant: cfg.variant.to_string(),
        h_dim: cfg.h_dim,
        z_dim: cfg.z_dim,
        n_layers: cfg.n_layers,
        seed: None,
        rmse,
        nll: nll_exact,
        nll_moment_matched: nll_mm,
        steps,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_input, simulate_linear, InputKind, LinearSystem, NoiseReading, Normalization};
    use crate::distributions::{DiagGaussianParams, GmmParams};
    use crate::model::{ModelConfig, Variant};
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    fn gauss(mu: f64, sigma: f64) -> OutputParams {
        OutputParams::Gaussian(DiagGaussianParams {
            mu: vec![mu],
            sigma: vec![sigma],
        })
    }

    #[test]
    fn rmse_basic_cases() {
        let y = col(&[1.0, -2.0, 3.5]);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let shifted = col(&[1.7, -1.3, 4.2]);
        assert!((rmse(&shifted, &y).unwrap() - 0.7).abs() < 1e-12);
        assert!(matches!(rmse(&y[..2], &y), Err(MetricsError::Length { predicted: 2, observed: 3 })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rmse_permutation_invariant(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50), seed in 0u64..1000) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (c, d): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
            let r1 = rmse_scalar(&a, &b).unwrap();
            let r2 = rmse_scalar(&c, &d).unwrap();
            prop_assert!((r1 - r2).abs() <= 1e-12 * r1.max(1.0));
        }
    }

    #[test]
    fn nll_hand_values() {
        let y = col(&[0.3, -1.2, 2.0]);
        let unit: Vec<OutputParams> = y.iter().map(|v| gauss(v[0], 1.0)).collect();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((nll(&unit, &y, NllMode::Exact).unwrap() - half_ln_2pi).abs() < 1e-12);
        assert!((half_ln_2pi - 0.918_938_533_204_672_7).abs() < 1e-12);
        let wide: Vec<OutputParams> = y.iter().map(|v| gauss(v[0], 2.0)).collect();
        let diff = nll(&wide, &y, NllMode::Exact).unwrap() - nll(&unit, &y, NllMode::Exact).unwrap();
        assert!((diff - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn nll_is_mean_of_steps() {
        let y = col(&[0.1, 0.5, -0.4, 1.1]);
        let outs: Vec<OutputParams> = (0..4).map(|k| gauss(k as f64 * 0.2, 0.5 + k as f64 * 0.1)).collect();
        let steps = nll_per_step(&outs, &y, NllMode::Exact).unwrap();
        let total = nll(&outs, &y, NllMode::Exact).unwrap();
        assert!((steps.iter().sum::<f64>() / 4.0 - total).abs() < 1e-15);
    }

    #[test]
    fn mixture_and_moment_matched_differ() {
        let m = OutputParams::Mixture(GmmParams {
            logits: vec![0.0, 0.0],
            components: vec![
                DiagGaussianParams {
                    mu: vec![-2.0],
                    sigma: vec![0.3],
                },
                DiagGaussianParams {
                    mu: vec![2.0],
                    sigma: vec![0.3],
                },
            ],
        });
        let y = vec![vec![2.0]];
        let exact = nll(std::slice::from_ref(&m), &y, NllMode::Exact).unwrap();
        let mm = nll(std::slice::from_ref(&m), &y, NllMode::MomentMatched).unwrap();
        assert!(exact < mm);
        let g = gauss(0.5, 1.5);
        assert_eq!(
            nll(std::slice::from_ref(&g), &y, NllMode::Exact).unwrap(),
            nll(std::slice::from_ref(&g), &y, NllMode::MomentMatched).unwrap()
        );
    }

    #[test]
    fn raw_unit_nll_adds_log_std() {
        let g = gauss(0.2, 0.8);
        let raw = g.denormalize(&[3.0], &[2.5]);
        let y_norm = 0.7;
        let y_raw = 3.0 + 2.5 * y_norm;
        let a = -g.log_prob(&[y_norm]);
        let b = -raw.log_prob(&[y_raw]);
        assert!((b - a - 2.5f64.ln()).abs() < 1e-12);
    }

    fn trained_free_model(seed: u64) -> (DeepSsm, SequenceDataset) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let sys = LinearSystem::toy(NoiseReading::StdDev);
        let u = gen_input(InputKind::Uniform, 200, &mut r);
        let train = simulate_linear(&sys, &u, &mut r, true);
        let mut m = DeepSsm::new(ModelConfig::new(Variant::VrnnGmm, 1, 1, 4, 2, 1), &mut r).unwrap();
        m.normalization = Some(Normalization::fit(&train).unwrap());
        let test = simulate_linear(&sys, &gen_input(InputKind::TestSine, 50, &mut r), &mut r, true);
        (m, test)
    }

    #[test]
    fn evaluation_is_seeded_and_consistent() {
        let (m, test) = trained_free_model(1);
        let a = evaluate_open_loop(&m, &test, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = evaluate_open_loop(&m, &test, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.rmse, b.rmse);
        assert_eq!(a.nll, b.nll);
        assert_eq!(a.steps.len(), test.len());
        let mus: Vec<Vec<f64>> = a.steps.iter().map(|s| s.mu.clone()).collect();
        assert_eq!(rmse(&mus, &test.y).unwrap(), a.rmse);
        let (lo, hi) = a.band(0, 3.0);
        assert!(lo.iter().zip(&hi).all(|(l, h)| l < h));
        assert_eq!(a.steps_csv().lines().count(), test.len() + 1);
        assert_eq!(a.to_csv().lines().nth(1).unwrap().split(',').count(), 9);
    }

    #[test]
    fn evaluation_rejects_channel_mismatch() {
        let (m, _) = trained_free_model(2);
        let bad = SequenceDataset::new(vec![vec![0.0, 1.0]; 5], vec![vec![0.0]; 5], "x").unwrap();
        assert!(matches!(
            evaluate_open_loop(&m, &bad, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(MetricsError::Channels { what: "input", .. })
        ));
    }

    #[test]
    fn mean_std_small() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
