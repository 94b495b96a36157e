//! Diagonal Gaussian and Gaussian-mixture heads.
//!
//! Tape-level heads ([`Gaussian`], [`Mixture`]) operate on `[batch, dim]`
//! variables and reduce over the last axis, giving `[batch, 1]` results.
//! Value-level parameters ([`DiagGaussianParams`], [`GmmParams`]) hold one
//! time step of a single sequence and are what evaluation consumes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{logsumexp, softplus, Result, Tensor, Var};

/// Lower bound added to every standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `softplus(raw) + SIGMA_FLOOR`.
pub fn make_sigma<'t>(raw: &Var<'t>) -> Result<Var<'t>> {
    raw.softplus()?.shift(SIGMA_FLOOR)
}

pub fn make_sigma_value(raw: f64) -> f64 {
    softplus(raw) + SIGMA_FLOOR
}

/// Diagonal Gaussian with `[batch, dim]` mean and standard deviation.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

impl<'t> Gaussian<'t> {
    /// Splits `[batch, 2*dim]` network output into mean and raw scale.
    pub fn from_raw(out: &Var<'t>, dim: usize) -> Result<Self> {
        Ok(Gaussian {
            mu: out.slice(0, dim)?,
            sigma: make_sigma(&out.slice(dim, 2 * dim)?)?,
        })
    }

    /// Standard normal with the given shape, as constants.
    pub fn standard(tape: &'t crate::Tape, rows: usize, dim: usize) -> Self {
        Gaussian {
            mu: tape.constant(&Tensor::zeros(&[rows, dim])),
            sigma: tape.constant(&Tensor::full(&[rows, dim], 1.0)),
        }
    }

    /// `Σ_i [-½ log 2π - log σ_i - (y_i - μ_i)² / (2σ_i²)]` per row.
    pub fn log_prob(&self, y: &Var<'t>) -> Result<Var<'t>> {
        let dim = self.mu.shape().last().copied().unwrap_or(1) as f64;
        let z = y.sub(&self.mu)?.div(&self.sigma)?;
        let quad = z.square()?.scale(0.5)?;
        let terms = quad.add(&self.sigma.log()?)?;
        terms.sum_last()?.neg()?.shift(-HALF_LN_2PI * dim)
    }

    /// Reparameterized draw `μ + σ ⊙ ε` for a constant `ε`.
    pub fn rsample(&self, eps: &Var<'t>) -> Result<Var<'t>> {
        self.mu.add(&self.sigma.mul(eps)?)
    }

    /// Closed-form `KL(self ‖ p)` per row.
    pub fn kl(&self, p: &Gaussian<'t>) -> Result<Var<'t>> {
        let log_ratio = p.sigma.log()?.sub(&self.sigma.log()?)?;
        let num = self.sigma.square()?.add(&self.mu.sub(&p.mu)?.square()?)?;
        let frac = num.div(&p.sigma.square()?.scale(2.0)?)?;
        log_ratio.add(&frac)?.shift(-0.5)?.sum_last()
    }

    /// Values of row `r`.
    pub fn params_row(&self, r: usize) -> DiagGaussianParams {
        DiagGaussianParams {
            mu: self.mu.value().row(r).to_vec(),
            sigma: self.sigma.value().row(r).to_vec(),
        }
    }
}

/// K-component mixture of diagonal Gaussians.
#[derive(Clone, Debug)]
pub struct Mixture<'t> {
    /// `[batch, K]`
    pub logits: Var<'t>,
    pub components: Vec<Gaussian<'t>>,
}

impl<'t> Mixture<'t> {
    /// Network output layout: `K` logits, then `K·dim` means, then `K·dim` raw scales.
    pub fn from_raw(out: &Var<'t>, k: usize, dim: usize) -> Result<Self> {
        let logits = out.slice(0, k)?;
        let components = (0..k)
            .map(|c| {
                let mu = out.slice(k + c * dim, k + (c + 1) * dim)?;
                let raw = out.slice(k + (k + c) * dim, k + (k + c + 1) * dim)?;
                Ok(Gaussian {
                    mu,
                    sigma: make_sigma(&raw)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Mixture { logits, components })
    }

    pub fn raw_width(k: usize, dim: usize) -> usize {
        k + 2 * k * dim
    }

    fn log_weights(&self) -> Result<Var<'t>> {
        self.logits.sub(&self.logits.logsumexp_last()?.expand_like(&self.logits)?)
    }

    /// `log Σ_k w_k N(y | μ_k, σ_k)` per row, through log-sum-exp.
    pub fn log_prob(&self, y: &Var<'t>) -> Result<Var<'t>> {
        let comps: Vec<Var<'t>> = self
            .components
            .iter()
            .map(|c| c.log_prob(y))
            .collect::<Result<_>>()?;
        Var::concat(&comps)?.add(&self.log_weights()?)?.logsumexp_last()
    }

    /// Mixture mean `Σ_k w_k μ_k`.
    pub fn mean(&self) -> Result<Var<'t>> {
        let w = self.log_weights()?.exp()?;
        let mut acc: Option<Var<'t>> = None;
        for (k, c) in self.components.iter().enumerate() {
            let dim = c.mu.shape().last().copied().unwrap_or(1);
            let wk = w.slice(k, k + 1)?;
            let wk = Var::concat(&vec![wk; dim])?;
            let term = c.mu.mul(&wk)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        Ok(acc.expect("mixture has at least one component"))
    }

    pub fn params_row(&self, r: usize) -> GmmParams {
        GmmParams {
            logits: self.logits.value().row(r).to_vec(),
            components: self.components.iter().map(|c| c.params_row(r)).collect(),
        }
    }
}

impl<'t> Var<'t> {
    /// Repeats a `[.., 1]` column to the width of `like`.
    fn expand_like(&self, like: &Var<'t>) -> Result<Var<'t>> {
        let cols = like.shape().last().copied().unwrap_or(1);
        Var::concat(&vec![*self; cols])
    }
}

/// One time step of a diagonal Gaussian, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiagGaussianParams {
    pub fn log_prob(&self, y: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), self.mu.len());
        self.mu
            .iter()
            .zip(&self.sigma)
            .zip(y)
            .map(|((m, s), y)| -HALF_LN_2PI - s.ln() - (y - m).powi(2) / (2.0 * s * s))
            .sum()
    }

    pub fn kl(&self, p: &DiagGaussianParams) -> f64 {
        self.mu
            .iter()
            .zip(&self.sigma)
            .zip(p.mu.iter().zip(&p.sigma))
            .map(|((mq, sq), (mp, sp))| (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5)
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| {
                let e: f64 = StandardNormal.sample(rng);
                m + s * e
            })
            .collect()
    }
}

/// One time step of a Gaussian mixture, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub logits: Vec<f64>,
    pub components: Vec<DiagGaussianParams>,
}

impl GmmParams {
    pub fn weights(&self) -> Vec<f64> {
        let lse = logsumexp(&self.logits);
        self.logits.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn log_prob(&self, y: &[f64]) -> f64 {
        let lse = logsumexp(&self.logits);
        let terms: Vec<f64> = self
            .logits
            .iter()
            .zip(&self.components)
            .map(|(l, c)| l - lse + c.log_prob(y))
            .collect();
        logsumexp(&terms)
    }

    pub fn mean(&self) -> Vec<f64> {
        let w = self.weights();
        let dim = self.components[0].mu.len();
        (0..dim)
            .map(|i| w.iter().zip(&self.components).map(|(w, c)| w * c.mu[i]).sum())
            .collect()
    }

    /// Per-dimension standard deviation of the mixture (law of total variance).
    pub fn std(&self) -> Vec<f64> {
        let w = self.weights();
        let mean = self.mean();
        (0..mean.len())
            .map(|i| {
                w.iter()
                    .zip(&self.components)
                    .map(|(w, c)| w * (c.sigma[i].powi(2) + (c.mu[i] - mean[i]).powi(2)))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// Draws a component from the mixture weights, then samples it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.sample_component(rng);
        self.components[k].sample(rng)
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let w = self.weights();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, wk) in w.iter().enumerate() {
            acc += wk;
            if u < acc {
                return k;
            }
        }
        w.len() - 1
    }
}

/// Matrix of i.i.d. standard-normal draws.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row<'t>(tape: &'t Tape, xs: &[f64]) -> Var<'t> {
        tape.constant(&Tensor::new(&[1, xs.len()], xs.to_vec()).unwrap())
    }

    fn gauss(mu: &[f64], sigma: &[f64]) -> DiagGaussianParams {
        DiagGaussianParams {
            mu: mu.to_vec(),
            sigma: sigma.to_vec(),
        }
    }

    #[test]
    fn log_prob_at_mean_and_one_sigma() {
        let tape = Tape::new();
        let g = Gaussian {
            mu: row(&tape, &[0.3]),
            sigma: row(&tape, &[1.0]),
        };
        let at_mean = g.log_prob(&row(&tape, &[0.3])).unwrap().item();
        assert!((at_mean + 0.918_938_533_204_672_7).abs() < 1e-12);
        let off = g.log_prob(&row(&tape, &[1.3])).unwrap().item();
        assert!((off - (at_mean - 0.5)).abs() < 1e-12);
        let p = gauss(&[0.3], &[1.0]);
        assert!((p.log_prob(&[1.3]) - off).abs() < 1e-14);
    }

    #[test]
    fn log_prob_gradient_vanishes_at_mean() {
        let tape = Tape::new();
        let mu = tape.leaf(&Tensor::new(&[1, 2], vec![0.4, -1.0]).unwrap());
        let g = Gaussian {
            mu,
            sigma: row(&tape, &[0.7, 2.0]),
        };
        let lp = g.log_prob(&row(&tape, &[0.4, -1.0])).unwrap().sum().unwrap();
        let grads = tape.backward(lp).unwrap();
        assert!(grads.wrt(mu).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn density_integrates_to_one() {
        let p = gauss(&[0.7], &[1.3]);
        // Composite Simpson over ±12σ.
        let (a, b, n) = (0.7 - 12.0 * 1.3, 0.7 + 12.0 * 1.3, 20_000);
        let h = (b - a) / n as f64;
        let f = |x: f64| p.log_prob(&[x]).exp();
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rsample_moments_and_reparameterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let eps = standard_normal(&mut rng, n, 1);
        let mean = eps.data().iter().sum::<f64>() / n as f64;
        let var = eps.data().iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.02);

        let tape = Tape::new();
        let mu = tape.leaf(&Tensor::new(&[1, 1], vec![5.0]).unwrap());
        let g = Gaussian {
            mu,
            sigma: row(&tape, &[SIGMA_FLOOR]),
        };
        let e = tape.constant(&standard_normal(&mut rng, 1, 1));
        let s = g.rsample(&e).unwrap();
        assert!((s.item() - 5.0).abs() < 4.0 * SIGMA_FLOOR * e.item().abs().max(1.0));
        let grads = tape.backward(s.sum().unwrap()).unwrap();
        assert_eq!(grads.wrt(mu).unwrap(), &[1.0]);
    }

    #[test]
    fn kl_hand_values() {
        let tape = Tape::new();
        let g = |m: f64, s: f64| Gaussian {
            mu: row(&tape, &[m]),
            sigma: row(&tape, &[s]),
        };
        assert_eq!(g(0.2, 0.9).kl(&g(0.2, 0.9)).unwrap().item(), 0.0);
        assert!((g(1.0, 1.0).kl(&g(0.0, 1.0)).unwrap().item() - 0.5).abs() < 1e-15);
        // N(0, var 4) against N(0, 1): log(1/2) + 4/2 - 1/2
        let expect = 0.5f64.ln() + 2.0 - 0.5;
        assert!((g(0.0, 2.0).kl(&g(0.0, 1.0)).unwrap().item() - expect).abs() < 1e-15);
        assert!((expect - 0.806_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut failures = 0;
        for _ in 0..20 {
            let d = 2;
            let q = gauss(
                &(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(),
                &(0..d).map(|_| rng.random_range(0.3..2.0)).collect::<Vec<_>>(),
            );
            let p = gauss(
                &(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(),
                &(0..d).map(|_| rng.random_range(0.3..2.0)).collect::<Vec<_>>(),
            );
            let samples: Vec<f64> = (0..n)
                .map(|_| {
                    let z = q.sample(&mut rng);
                    q.log_prob(&z) - p.log_prob(&z)
                })
                .collect();
            let mean = samples.iter().sum::<f64>() / n as f64;
            let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            let se = sd / (n as f64).sqrt();
            if (mean - q.kl(&p)).abs() > 3.0 * se {
                failures += 1;
            }
        }
        // 3σ bands: allow at most one exceedance in 20 trials.
        assert!(failures <= 1, "{failures} exceedances");
    }

    #[test]
    fn make_sigma_values() {
        assert!((make_sigma_value(0.0) - (std::f64::consts::LN_2 + 1e-4)).abs() < 1e-15);
        assert!((make_sigma_value(-40.0) - 1e-4).abs() < 1e-15);
        let mut prev = 0.0;
        for i in -50..50 {
            let s = make_sigma_value(i as f64 * 0.5);
            assert!(s > prev);
            prev = s;
        }
    }

    fn mixture_from_values<'t>(tape: &'t Tape, m: &GmmParams) -> Mixture<'t> {
        Mixture {
            logits: row(tape, &m.logits),
            components: m
                .components
                .iter()
                .map(|c| Gaussian {
                    mu: row(tape, &c.mu),
                    sigma: row(tape, &c.sigma),
                })
                .collect(),
        }
    }

    #[test]
    fn mixture_collapses_to_single_gaussian() {
        let g = gauss(&[0.5, -0.2], &[0.8, 1.7]);
        let m = GmmParams {
            logits: vec![0.3, -1.0, 2.0, 0.0, 0.1],
            components: vec![g.clone(); 5],
        };
        let tape = Tape::new();
        let mix = mixture_from_values(&tape, &m);
        for y in [[0.0, 0.0], [3.0, -2.0], [0.5, -0.2]] {
            let lp = mix.log_prob(&row(&tape, &y)).unwrap().item();
            assert!((lp - g.log_prob(&y)).abs() < 1e-12);
            assert!((m.log_prob(&y) - g.log_prob(&y)).abs() < 1e-12);
        }
        let single = GmmParams {
            logits: vec![0.7],
            components: vec![g.clone()],
        };
        assert_eq!(single.log_prob(&[1.0, 2.0]), g.log_prob(&[1.0, 2.0]));
    }

    #[test]
    fn saturated_logits_select_first_component() {
        let a = gauss(&[1.0], &[0.5]);
        let b = gauss(&[-3.0], &[2.0]);
        let m = GmmParams {
            logits: vec![30.0, -30.0],
            components: vec![a.clone(), b],
        };
        for y in [0.0, 1.0, 2.5] {
            assert!((m.log_prob(&[y]) - a.log_prob(&[y])).abs() < 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..1000).all(|_| m.sample_component(&mut rng) == 0));
    }

    #[test]
    fn mixture_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (k, d, rows) = (5, 2, 3);
        let mut draw = |n: usize| -> Tensor {
            Tensor::new(&[rows, n], (0..rows * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let raw = draw(Mixture::raw_width(k, d));
        let y = draw(d);
        let err = finite_difference_check(
            |_, v| {
                let mix = Mixture::from_raw(&v[0], k, d)?;
                mix.log_prob(&v[1])?.sum()?.add(&mix.mean()?.sum()?)
            },
            &[raw, y],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn mixture_mean_matches_values() {
        let m = GmmParams {
            logits: vec![0.0, 1.0],
            components: vec![gauss(&[1.0], &[1.0]), gauss(&[3.0], &[1.0])],
        };
        let tape = Tape::new();
        let mix = mixture_from_values(&tape, &m);
        let w1 = 1.0 / (1.0 + std::f64::consts::E);
        let expect = w1 * 1.0 + (1.0 - w1) * 3.0;
        assert!((mix.mean().unwrap().item() - expect).abs() < 1e-12);
        assert!((m.mean()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_uniform_component_frequencies() {
        let m = GmmParams {
            logits: vec![0.0; 5],
            components: vec![gauss(&[0.0], &[1.0]); 5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            counts[m.sample_component(&mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.2).abs() < 0.01);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(6);
        let mut r2 = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(m.sample(&mut r1), m.sample(&mut r2));
    }

    #[test]
    fn dominant_component_sample_statistics() {
        let m = GmmParams {
            logits: vec![-30.0, 30.0, -30.0],
            components: vec![gauss(&[-5.0], &[1.0]), gauss(&[2.0], &[0.5]), gauss(&[9.0], &[1.0])],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| m.sample(&mut rng)[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.02);
        assert!((var - 0.25).abs() < 0.02);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let mut g = || {
                gauss(
                    &[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
                    &[rng.random_range(0.01..4.0), rng.random_range(0.01..4.0)],
                )
            };
            let (q, p) = (g(), g());
            assert!(q.kl(&p) >= 0.0);
            assert!(q.kl(&q).abs() < 1e-12);
        }
    }
}
