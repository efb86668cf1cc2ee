//! Sampling and log-densities for the two policy heads.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{logsumexp, Graph, Var};
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Categorical distribution parameterized by unnormalized logits.
#[derive(Clone, Debug)]
pub struct Categorical {
    log_probs: Vec<f64>,
}

impl Categorical {
    pub fn from_logits(logits: &[f64]) -> Self {
        assert!(!logits.is_empty(), "categorical over zero classes");
        let lse = logsumexp(logits);
        Categorical {
            log_probs: logits.iter().map(|l| l - lse).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.log_probs.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, class: usize) -> Result<f64> {
        self.log_probs.get(class).copied().ok_or_else(|| {
            Error::argument(format!(
                "class {class} outside support of {} classes",
                self.log_probs.len()
            ))
        })
    }

    /// Inverse-CDF sampling from one uniform draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, lp) in self.log_probs.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                return i;
            }
        }
        // Rounding can leave `acc` a hair below 1.
        self.log_probs
            .iter()
            .rposition(|lp| lp.exp() > 0.0)
            .unwrap_or(self.log_probs.len() - 1)
    }

    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (i, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self
            .log_probs
            .iter()
            .map(|&lp| if lp.is_finite() { lp.exp() * lp } else { 0.0 })
            .sum::<f64>()
    }
}

/// Diagonal Gaussian with per-dimension mean and log standard deviation.
#[derive(Clone, Debug)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_std.len(), "mean/log_std length mismatch");
        DiagGaussian { mean, log_std }
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.mean.len() {
            return Err(Error::argument(format!(
                "sample of dimension {} for a {}-dimensional gaussian",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.log_std)
            .map(|((&x, &m), &ls)| {
                let z = (x - m) / ls.exp();
                -0.5 * z * z - ls - HALF_LN_2PI
            })
            .sum())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()
    }
}

/// Differentiable `log π(class)` per row: `logits: B x n`, one class per row.
pub fn categorical_log_prob(g: &mut Graph, logits: Var, classes: &[usize]) -> Var {
    let lp = g.log_softmax_rows(logits);
    g.gather(lp, classes)
}

/// Differentiable per-row categorical entropy, `B x 1`.
pub fn categorical_entropy(g: &mut Graph, logits: Var) -> Var {
    let lp = g.log_softmax_rows(logits);
    let p = g.exp(lp);
    let plp = g.mul(p, lp);
    let s = g.sum_cols(plp);
    g.neg(s)
}

/// Differentiable diagonal-Gaussian log-density per row.
///
/// `mean: B x n`, `log_std: 1 x n` (shared across rows), `x: B x n` constants.
pub fn gaussian_log_prob(g: &mut Graph, mean: Var, log_std: Var, x: Var) -> Var {
    let n = g.value(mean).cols() as f64;
    let diff = g.sub(x, mean);
    let neg_log_std = g.neg(log_std);
    let inv_std = g.exp(neg_log_std);
    let z = g.mul(diff, inv_std);
    let z2 = g.square(z);
    let quad = g.scale(z2, -0.5);
    let per_row = g.sum_cols(quad);
    let log_std_sum = g.sum(log_std);
    let out = g.sub(per_row, log_std_sum);
    g.add_scalar(out, -HALF_LN_2PI * n)
}
