//! Beta-binomial prior filter.
//!
//! The filter is a causal tap vector `p(k) = C(n,k) B(k+α, n−k+β) / B(α,β)`
//! for `k = 0..=n`. Convolving the previous alignment with it and taking the
//! log gives additive energy terms that only permit bounded forward motion;
//! positions the filter cannot reach get the floor value.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numerics::{conv1d, softmax, ConvMode, Real};

/// Value assigned to prior logits whose convolved mass is zero.
pub const PRIOR_LOGIT_FLOOR: f64 = -1e6;

/// Default shape parameters and support, giving a length-11 filter with a
/// mean forward step of exactly one position.
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_SUPPORT: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorFilter {
    taps: Vec<f64>,
    alpha: f64,
    beta: f64,
    n: usize,
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Beta-binomial probabilities for `k = 0..=n`, evaluated in log space.
pub fn beta_binomial_taps(alpha: f64, beta: f64, n: usize) -> Result<PriorFilter> {
    if !(alpha > 0.0 && alpha.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "beta-binomial shape parameters must be positive, got alpha={alpha}, beta={beta}"
        )));
    }
    let nf = n as f64;
    let ln_norm = ln_beta(alpha, beta);
    let ln_n_fact = ln_gamma(nf + 1.0);
    let taps = (0..=n)
        .map(|k| {
            let kf = k as f64;
            let ln_choose = ln_n_fact - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0);
            (ln_choose + ln_beta(kf + alpha, nf - kf + beta) - ln_norm).exp()
        })
        .collect();
    Ok(PriorFilter {
        taps,
        alpha,
        beta,
        n,
    })
}

impl Default for PriorFilter {
    fn default() -> Self {
        beta_binomial_taps(DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_SUPPORT)
            .expect("default prior parameters are valid")
    }
}

impl PriorFilter {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Support size `n`; the filter has `n + 1` taps.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Expected forward step, `Σ k·p(k)`.
    pub fn mean(&self) -> f64 {
        self.taps
            .iter()
            .enumerate()
            .map(|(k, p)| k as f64 * p)
            .sum()
    }

    /// Closed-form mean `αn / (α + β)`.
    pub fn analytic_mean(&self) -> f64 {
        self.alpha * self.n as f64 / (self.alpha + self.beta)
    }
}

/// `max(log(P ∗ α_prev), floor)` with causal convolution.
pub fn prior_logits<T: Real>(filter: &PriorFilter, alpha_prev: &[T]) -> Result<Vec<T>> {
    let taps: Vec<T> = filter.taps.iter().map(|&t| T::lit(t)).collect();
    let smoothed = conv1d(alpha_prev, &taps, ConvMode::Causal)?;
    let floor = T::lit(PRIOR_LOGIT_FLOOR);
    Ok(smoothed
        .into_iter()
        .map(|v| if v > T::zero() { v.ln().max(floor) } else { floor })
        .collect())
}

/// Alignment produced by the prior alone: start one-hot at position 0 and
/// repeatedly apply `softmax(prior_logits(·))`. Returns `steps + 1`
/// snapshots, the first being the initial one-hot.
pub fn prior_rollout(filter: &PriorFilter, steps: usize, len: usize) -> Result<Vec<Vec<f64>>> {
    if len == 0 {
        return Err(Error::Empty("prior_rollout length"));
    }
    let mut alpha = vec![0.0; len];
    alpha[0] = 1.0;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(alpha.clone());
    for _ in 0..steps {
        alpha = softmax(&prior_logits(filter, &alpha)?)?;
        out.push(alpha.clone());
    }
    Ok(out)
}

/// Mean and standard deviation of position under a (normalized) alignment.
pub fn position_moments(alpha: &[f64]) -> (f64, f64) {
    let total: f64 = alpha.iter().sum();
    let mean = alpha
        .iter()
        .enumerate()
        .map(|(j, a)| j as f64 * a)
        .sum::<f64>()
        / total;
    let var = alpha
        .iter()
        .enumerate()
        .map(|(j, a)| (j as f64 - mean).powi(2) * a)
        .sum::<f64>()
        / total;
    (mean, var.max(0.0).sqrt())
}
