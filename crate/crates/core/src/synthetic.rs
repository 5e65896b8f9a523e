//! Synthetic datasets whose missingness pattern carries label information.
//!
//! `synthetic_mnar` draws binary labels, then splits the features into two
//! halves. For label 1 each entry of the first half goes missing with
//! probability `0.5 + delta` and each entry of the second half with
//! `0.5 - delta`; label 0 swaps the halves. Complete values are
//! `N(+-mu, 1)` depending on the label. `delta` and `mu` are solved from
//! target Bayes accuracies of the mask alone and of the complete values
//! alone.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::datasets::{Dataset, Sample, SequenceDataset, SequenceSample, Step};
use crate::error::{GilError, Result};
use crate::seeded_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticMnarSpec {
    pub n: usize,
    /// Must be even.
    pub d: usize,
    /// Bayes accuracy achievable from the mask alone.
    pub mask_signal: f64,
    /// Bayes accuracy achievable from the complete values alone.
    pub value_signal: f64,
    pub seed: u64,
}

impl Default for SyntheticMnarSpec {
    fn default() -> Self {
        SyntheticMnarSpec { n: 2000, d: 20, mask_signal: 0.9, value_signal: 0.7, seed: 0 }
    }
}

/// The same samples before and after masking.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub complete: Dataset,
    pub observed: Dataset,
}

fn binom_pmf(n: usize, p: f64) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    let mut c = 1.0;
    for k in 0..=n {
        out[k] = c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32);
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    out
}

/// Bayes accuracy from the mask of a `d`-feature sample. The likelihood
/// ratio reduces to comparing the missing counts of the two halves, with
/// ties broken by a fair coin.
pub fn mask_bayes_accuracy(d: usize, delta: f64) -> f64 {
    let half = d / 2;
    let hi = binom_pmf(half, 0.5 + delta);
    let lo = binom_pmf(half, 0.5 - delta);
    let mut acc = 0.0;
    for (a, pa) in hi.iter().enumerate() {
        for (b, pb) in lo.iter().enumerate() {
            acc += pa * pb * if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    acc
}

/// `delta` giving mask Bayes accuracy `target`, by bisection.
pub fn solve_mask_delta(d: usize, target: f64) -> Result<f64> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(GilError::config(format!("synthetic_mnar needs an even d >= 2, got {d}")));
    }
    let max = mask_bayes_accuracy(d, 0.5);
    if !(target >= 0.5 && target < max) {
        return Err(GilError::config(format!("mask_signal must lie in [0.5, {max:.4}) for d = {d}, got {target}")));
    }
    let (mut lo, mut hi) = (0.0, 0.5);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mask_bayes_accuracy(d, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Class-mean offset `mu` such that `Phi(mu sqrt(d)) = target`.
pub fn value_mean_shift(d: usize, target: f64) -> Result<f64> {
    if !(0.5..1.0).contains(&target) {
        return Err(GilError::config(format!("value_signal must lie in [0.5, 1), got {target}")));
    }
    let z = StatNormal::new(0.0, 1.0).expect("standard normal").inverse_cdf(target);
    Ok(z / (d as f64).sqrt())
}

pub fn synthetic_mnar(spec: &SyntheticMnarSpec, placeholder: f64) -> Result<SyntheticData> {
    if spec.n < 2 {
        return Err(GilError::config("synthetic_mnar needs n >= 2"));
    }
    let delta = solve_mask_delta(spec.d, spec.mask_signal)?;
    let mu = value_mean_shift(spec.d, spec.value_signal)?;
    let mut rng = seeded_rng(spec.seed, 0x5e7a);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let half = spec.d / 2;
    let mut complete = Vec::with_capacity(spec.n);
    let mut observed = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let y = usize::from(rng.random::<bool>());
        let sign = if y == 1 { 1.0 } else { -1.0 };
        let x: Vec<f64> = (0..spec.d).map(|_| sign * mu + noise.sample(&mut rng)).collect();
        let keep: Vec<bool> = (0..spec.d)
            .map(|j| {
                let first_half = j < half;
                let p_missing = if first_half == (y == 1) { 0.5 + delta } else { 0.5 - delta };
                rng.random::<f64>() >= p_missing
            })
            .collect();
        let full = Sample::from_raw(x, y, placeholder);
        observed.push(full.masked(|j| keep[j], placeholder));
        complete.push(full);
    }
    Ok(SyntheticData { complete: Dataset::new(complete, 2, placeholder), observed: Dataset::new(observed, 2, placeholder) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSequenceSpec {
    pub n: usize,
    pub d: usize,
    pub horizon: usize,
    /// Per-step drift added in the direction of the label.
    pub signal: f64,
    pub seed: u64,
}

impl Default for SyntheticSequenceSpec {
    fn default() -> Self {
        SyntheticSequenceSpec { n: 1000, d: 6, horizon: 8, signal: 0.15, seed: 0 }
    }
}

/// Complete AR(1) sequences with a label-dependent drift.
pub fn synthetic_sequences(spec: &SyntheticSequenceSpec, placeholder: f64) -> Result<SequenceDataset> {
    if spec.n < 2 || spec.d == 0 || spec.horizon == 0 {
        return Err(GilError::config("synthetic sequences need n >= 2, d >= 1 and horizon >= 1"));
    }
    let mut rng = seeded_rng(spec.seed, 0x5e9a);
    let noise = Normal::new(0.0, 0.5).expect("normal");
    let samples = (0..spec.n)
        .map(|_| {
            let y = usize::from(rng.random::<bool>());
            let drift = if y == 1 { spec.signal } else { -spec.signal };
            let mut state = vec![0.0; spec.d];
            let steps = (0..spec.horizon)
                .map(|_| {
                    for v in state.iter_mut() {
                        *v = 0.7 * *v + drift + noise.sample(&mut rng);
                    }
                    Step::from_raw(state.clone(), placeholder)
                })
                .collect();
            SequenceSample { steps, y }
        })
        .collect();
    Ok(SequenceDataset::new(samples, 2, placeholder))
}
