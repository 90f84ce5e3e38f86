//! Deterministic numeric kernels shared by every other module: vector
//! algebra, cosine activations, Gaussian moment estimation, the mean-one
//! softmax normalizer, seeded random streams and a small SGD driver.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rng = ChaCha8Rng;

/// Stream identifiers for [`rng`]. Each consumer of randomness draws from
/// its own stream so that adding draws in one place never shifts another.
pub mod streams {
    pub const CAV_INIT: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const REPAIR: u64 = 3;
    pub const PAIR_SAMPLE: u64 = 4;
    pub const PROBES: u64 = 5;
    pub const EXAMPLES: u64 = 6;
    pub const WORLD: u64 = 7;
}

/// Counter-based generator for `(seed, stream)`; the only randomness source
/// in the crate.
pub fn rng(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a / |a|`, or an error for the zero vector.
pub fn unit(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm(format!("cannot normalize vector with norm {n}")));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

/// Cosine similarity. Zero-norm inputs are an error rather than a silent 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with dims {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine with a zero-norm vector".into()));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Mean and standard deviation of an activation population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gaussian parameters must be finite with sigma >= 0, got ({mu}, {sigma})"
            )));
        }
        Ok(Self { mu, sigma })
    }

    /// Zero spread: the population cannot be standardized.
    pub fn is_degenerate(&self) -> bool {
        self.sigma == 0.0
    }
}

/// Arithmetic mean and population (divide-by-n) standard deviation.
///
/// A zero standard deviation is returned as-is; check
/// [`GaussianParams::is_degenerate`].
pub fn estimate_gaussian(samples: &[f64]) -> Result<GaussianParams> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 samples to estimate a gaussian, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidData("non-finite activation sample".into()));
    }
    let n = samples.len() as f64;
    // Identical samples: report them exactly rather than via a rounded mean.
    if samples.iter().all(|&s| s == samples[0]) {
        log::warn!("degenerate activation distribution (sigma = 0, mu = {})", samples[0]);
        return Ok(GaussianParams {
            mu: samples[0],
            sigma: 0.0,
        });
    }
    let mu = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
    let params = GaussianParams {
        mu,
        sigma: var.sqrt(),
    };
    if params.is_degenerate() {
        log::warn!("degenerate activation distribution (sigma = 0, mu = {mu})");
    }
    Ok(params)
}

/// `n * softmax(scores)`: positive weights whose arithmetic mean is 1.
///
/// Uses max-subtraction so large scores never overflow. Weights that would
/// underflow to zero are floored at the smallest normal `f64`, which keeps
/// them strictly positive without visibly moving the mean.
pub fn mean_one_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty score list".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidData("non-finite softmax score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let n = scores.len() as f64;
    Ok(exps
        .into_iter()
        .map(|e| (n * e / total).max(f64::MIN_POSITIVE))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// One gradient step per epoch over all samples.
    Full,
    /// Shuffled mini-batches of the given size.
    MiniBatch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: BatchMode,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            batch: BatchMode::Full,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch == BatchMode::MiniBatch(0) {
            return Err(Error::InvalidArgument("mini-batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A differentiable training objective over indexable samples.
pub trait Objective {
    fn num_samples(&self) -> usize;

    /// Loss and gradient over `batch` (all samples when `None`).
    fn loss_and_grad(&self, params: &[f64], batch: Option<&[usize]>) -> Result<(f64, Vec<f64>)>;

    /// Hook run before every step; may move `params` off a singular point.
    /// Returns whether it changed anything.
    fn repair(&self, _params: &mut [f64], _rng: &mut Rng) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdOutcome {
    pub params: Vec<f64>,
    /// Per epoch: loss at the start of the epoch (full batch) or the
    /// sample-weighted mean of the mini-batch losses.
    pub trace: Vec<f64>,
    /// Number of times [`Objective::repair`] changed the iterate.
    pub repairs: usize,
}

pub fn sgd_minimize<O: Objective + ?Sized>(
    objective: &O,
    init: Vec<f64>,
    cfg: &SgdConfig,
) -> Result<SgdOutcome> {
    cfg.validate()?;
    let mut params = init;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut repairs = 0;
    let mut batch_rng = rng(cfg.seed, streams::BATCHES);
    let mut repair_rng = rng(cfg.seed, streams::REPAIR);
    let n = objective.num_samples();
    let mut order: Vec<usize> = (0..n).collect();

    let mut step = |params: &mut Vec<f64>, batch: Option<&[usize]>, epoch: usize| -> Result<f64> {
        if objective.repair(params, &mut repair_rng) {
            repairs += 1;
        }
        let (loss, grad) = objective.loss_and_grad(params, batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
        Ok(loss)
    };

    for epoch in 0..cfg.epochs {
        match cfg.batch {
            BatchMode::Full => trace.push(step(&mut params, None, epoch)?),
            BatchMode::MiniBatch(size) => {
                order.shuffle(&mut batch_rng);
                let mut total = 0.0;
                for chunk in order.chunks(size) {
                    total += step(&mut params, Some(chunk), epoch)? * chunk.len() as f64;
                }
                trace.push(if n == 0 { 0.0 } else { total / n as f64 });
            }
        }
    }
    Ok(SgdOutcome {
        params,
        trace,
        repairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[3.0, 4.0], &[4.0, 3.0]).unwrap() - 0.96).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm(_))));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn gaussian_examples() {
        let g = estimate_gaussian(&[1.0, 2.0, 3.0]).unwrap();
        assert!((g.mu - 2.0).abs() < 1e-15);
        assert!((g.sigma - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);

        let flat = estimate_gaussian(&[0.7, 0.7, 0.7]).unwrap();
        assert!(flat.is_degenerate());
        assert!((flat.mu - 0.7).abs() < 1e-15);

        assert!(estimate_gaussian(&[1.0]).is_err());
        assert!(estimate_gaussian(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn gaussian_recovers_seeded_normal() {
        let mut r = rng(42, 0);
        let dist = Normal::new(0.5, 0.1).unwrap();
        let draws: Vec<f64> = (0..100_000).map(|_| dist.sample(&mut r)).collect();
        let g = estimate_gaussian(&draws).unwrap();
        assert!((g.mu - 0.5).abs() < 0.005, "mu {}", g.mu);
        assert!((g.sigma - 0.1).abs() < 0.005, "sigma {}", g.sigma);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(mean_one_softmax(&[0.3, 0.3, 0.3]).unwrap(), vec![1.0; 3]);
        let w = mean_one_softmax(&[3f64.ln(), 0.0]).unwrap();
        assert!((w[0] - 1.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        let w = mean_one_softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(w[0], 2.0);
        assert!(w[1] > 0.0 && w[1] < 1e-300);
        assert!(mean_one_softmax(&[]).is_err());
    }

    struct Quadratic {
        target: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn num_samples(&self) -> usize {
            1
        }
        fn loss_and_grad(&self, p: &[f64], _: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
            let diff: Vec<f64> = p.iter().zip(&self.target).map(|(x, a)| x - a).collect();
            Ok((dot(&diff, &diff), diff.iter().map(|d| 2.0 * d).collect()))
        }
    }

    struct Flat;

    impl Objective for Flat {
        fn num_samples(&self) -> usize {
            4
        }
        fn loss_and_grad(&self, p: &[f64], _: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
            Ok((1.0, vec![0.0; p.len()]))
        }
    }

    #[test]
    fn sgd_reaches_quadratic_optimum() {
        let q = Quadratic {
            target: vec![0.3, -1.2, 2.5],
        };
        let cfg = SgdConfig {
            learning_rate: 0.1,
            epochs: 200,
            ..SgdConfig::default()
        };
        let out = sgd_minimize(&q, vec![0.0; 3], &cfg).unwrap();
        for (x, a) in out.params.iter().zip(&q.target) {
            assert!((x - a).abs() < 1e-3);
        }
        assert_eq!(out.trace.len(), 200);
    }

    #[test]
    fn sgd_zero_gradient_and_determinism() {
        let init = vec![0.25, -0.5];
        let cfg = SgdConfig {
            batch: BatchMode::MiniBatch(3),
            ..SgdConfig::default()
        };
        let out = sgd_minimize(&Flat, init.clone(), &cfg).unwrap();
        assert_eq!(out.params, init);

        let q = Quadratic {
            target: vec![1.0, 2.0],
        };
        let a = sgd_minimize(&q, vec![0.0; 2], &cfg).unwrap();
        let b = sgd_minimize(&q, vec![0.0; 2], &cfg).unwrap();
        assert_eq!(a, b);
    }

    struct Exploding;

    impl Objective for Exploding {
        fn num_samples(&self) -> usize {
            1
        }
        fn loss_and_grad(&self, p: &[f64], _: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
            let loss = if p[0] > 10.0 { f64::INFINITY } else { p[0] };
            Ok((loss, vec![-100.0]))
        }
    }

    #[test]
    fn sgd_reports_divergence_epoch() {
        let cfg = SgdConfig {
            learning_rate: 1.0,
            epochs: 5,
            ..SgdConfig::default()
        };
        assert!(matches!(
            sgd_minimize(&Exploding, vec![0.0], &cfg),
            Err(Error::Diverged { epoch: 1 })
        ));
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            u in proptest::collection::vec(-10.0f64..10.0, 4),
            v in proptest::collection::vec(-10.0f64..10.0, 4),
            a in 1e-3f64..1e3,
            b in 1e-3f64..1e3,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
            let c = cosine(&u, &v).unwrap();
            prop_assert!((c - cosine(&su, &sv).unwrap()).abs() < 1e-12);
            prop_assert!(c.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn softmax_mean_is_one(s in proptest::collection::vec(-50.0f64..50.0, 1..200)) {
            let w = mean_one_softmax(&s).unwrap();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn gaussian_equivariance(
            s in proptest::collection::vec(-5.0f64..5.0, 2..50),
            shift in -10.0f64..10.0,
            scale in 0.1f64..10.0,
        ) {
            let g = estimate_gaussian(&s).unwrap();
            let t: Vec<f64> = s.iter().map(|x| x * scale + shift).collect();
            let h = estimate_gaussian(&t).unwrap();
            prop_assert!((h.mu - (g.mu * scale + shift)).abs() < 1e-9);
            prop_assert!((h.sigma - g.sigma * scale).abs() < 1e-9);
        }
    }
}
