//! Synthetic missingness: MCAR, image MAR and self-censoring MNAR masks.
//!
//! Masks are only ever added. Observed values are never changed; a masked
//! entry becomes `NaN` in `x` and the dataset placeholder in `x_filled`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Sample, SequenceDataset, SequenceSample, Step};
use crate::error::{GilError, Result};
use crate::linalg::sigmoid;
use crate::seeded_rng;

pub const DEFAULT_OBSERVABLE_ROWS: usize = 14;
pub const DEFAULT_STEEPNESS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Keep the data's own missingness.
    None,
    Mcar,
    MarImage,
    MnarThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub mechanism: Mechanism,
    /// Target missing fraction for MCAR.
    pub rate: f64,
    /// Fixed mask seed; when absent each run uses its own seed.
    pub seed: Option<u64>,
    pub observable_rows: usize,
    pub steepness: f64,
    /// Per-feature quantile above which values are censored.
    pub quantile: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            mechanism: Mechanism::None,
            rate: 0.0,
            seed: None,
            observable_rows: DEFAULT_OBSERVABLE_ROWS,
            steepness: DEFAULT_STEEPNESS,
            quantile: 0.5,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mechanism {
            Mechanism::Mcar if !(0.0..1.0).contains(&self.rate) => {
                Err(GilError::config(format!("mcar rate must lie in [0, 1), got {}", self.rate)))
            }
            Mechanism::MnarThreshold if !(self.quantile > 0.0 && self.quantile < 1.0) => {
                Err(GilError::config(format!("mnar quantile must lie in (0, 1), got {}", self.quantile)))
            }
            _ => Ok(()),
        }
    }

    /// Apply the mechanism with `seed` unless `self.seed` is set.
    pub fn apply(&self, ds: &Dataset, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let seed = self.seed.unwrap_or(seed);
        match self.mechanism {
            Mechanism::None => Ok(ds.clone()),
            Mechanism::Mcar => apply_mcar(ds, self.rate, seed),
            Mechanism::MarImage => apply_mar_image(ds, self.observable_rows, self.steepness, seed),
            Mechanism::MnarThreshold => apply_mnar_threshold(ds, self.quantile),
        }
    }

    pub fn apply_sequences(&self, ds: &SequenceDataset, seed: u64) -> Result<SequenceDataset> {
        self.validate()?;
        let seed = self.seed.unwrap_or(seed);
        match self.mechanism {
            Mechanism::None => Ok(ds.clone()),
            Mechanism::Mcar => apply_mcar_sequences(ds, self.rate, seed),
            other => Err(GilError::config(format!("{other:?} masks are only defined for tabular data"))),
        }
    }
}

/// Mask every entry independently with probability `rate`.
pub fn apply_mcar(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(GilError::config(format!("mcar rate must lie in [0, 1), got {rate}")));
    }
    let mut rng = seeded_rng(seed, 0x3c4a);
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let keep: Vec<bool> = (0..s.dim()).map(|_| rng.random::<f64>() >= rate).collect();
            s.masked(|j| keep[j], ds.placeholder)
        })
        .collect();
    Ok(Dataset::new(samples, ds.num_classes, ds.placeholder))
}

pub fn apply_mcar_sequences(ds: &SequenceDataset, rate: f64, seed: u64) -> Result<SequenceDataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(GilError::config(format!("mcar rate must lie in [0, 1), got {rate}")));
    }
    let mut rng = seeded_rng(seed, 0x3c4b);
    let samples = ds
        .samples
        .iter()
        .map(|seq| SequenceSample {
            y: seq.y,
            steps: seq
                .steps
                .iter()
                .map(|t| {
                    let x = t.x.iter().map(|&v| if rng.random::<f64>() < rate { f64::NAN } else { v }).collect();
                    Step::from_raw(x, ds.placeholder)
                })
                .collect(),
        })
        .collect();
    Ok(SequenceDataset::new(samples, ds.num_classes, ds.placeholder))
}

/// Probability that a pixel below the observable band goes missing, given the
/// mean intensity of the band.
pub fn mar_missing_probability(top_mean: f64, steepness: f64) -> f64 {
    sigmoid(steepness * (top_mean - 0.5))
}

/// Square-image MAR: the top `observable_rows` rows are never masked; every
/// lower pixel is masked with a probability that depends only on the mean
/// intensity of the observable rows.
pub fn apply_mar_image(ds: &Dataset, observable_rows: usize, steepness: f64, seed: u64) -> Result<Dataset> {
    let side = (ds.d as f64).sqrt().round() as usize;
    if side * side != ds.d {
        return Err(GilError::config(format!("mar_image needs square images, got d = {}", ds.d)));
    }
    if observable_rows == 0 || observable_rows >= side {
        return Err(GilError::config(format!("observable_rows must lie in [1, {side}), got {observable_rows}")));
    }
    let band = observable_rows * side;
    let mut rng = seeded_rng(seed, 0x3a2);
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let p = mar_missing_probability(top_band_mean(s, band), steepness);
            let keep: Vec<bool> = (0..s.dim()).map(|j| j < band || rng.random::<f64>() >= p).collect();
            s.masked(|j| keep[j], ds.placeholder)
        })
        .collect();
    Ok(Dataset::new(samples, ds.num_classes, ds.placeholder))
}

fn top_band_mean(s: &Sample, band: usize) -> f64 {
    let (sum, n) = (0..band)
        .filter(|&j| s.m[j] != 0.0)
        .fold((0.0, 0usize), |(acc, n), j| (acc + s.x[j], n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Self-censoring MNAR: an entry is masked iff its value exceeds its column's
/// `q`-quantile (the order statistic at rank `ceil(q n)` of the observed values).
pub fn apply_mnar_threshold(ds: &Dataset, q: f64) -> Result<Dataset> {
    if !(q > 0.0 && q < 1.0) {
        return Err(GilError::config(format!("mnar quantile must lie in (0, 1), got {q}")));
    }
    let thresholds: Vec<f64> = (0..ds.d)
        .map(|j| {
            let mut col: Vec<f64> =
                ds.samples.iter().filter(|s| s.m[j] != 0.0).map(|s| s.x[j]).collect();
            if col.is_empty() {
                return f64::INFINITY;
            }
            col.sort_by(|a, b| a.total_cmp(b));
            let rank = ((q * col.len() as f64).ceil() as usize).clamp(1, col.len());
            col[rank - 1]
        })
        .collect();
    let samples = ds
        .samples
        .iter()
        .map(|s| s.masked(|j| s.m[j] != 0.0 && s.x[j] <= thresholds[j], ds.placeholder))
        .collect();
    Ok(Dataset::new(samples, ds.num_classes, ds.placeholder))
}

/// Fraction of entries with `m = 0`.
pub fn missing_rate(ds: &Dataset) -> f64 {
    let total = ds.len() * ds.d;
    if total == 0 {
        return 0.0;
    }
    let missing: usize = ds.samples.iter().map(|s| s.missing_count()).sum();
    missing as f64 / total as f64
}

pub fn missing_rate_sequences(ds: &SequenceDataset) -> f64 {
    let mut total = 0usize;
    let mut missing = 0usize;
    for s in &ds.samples {
        for t in &s.steps {
            total += t.m.len();
            missing += t.m.iter().filter(|&&v| v == 0.0).count();
        }
    }
    if total == 0 {
        0.0
    } else {
        missing as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn uniform_ds(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = seeded_rng(seed, 1);
        let samples = (0..n)
            .map(|i| Sample::from_raw((0..d).map(|_| rng.random::<f64>()).collect(), i % 10, 0.0))
            .collect();
        Dataset::new(samples, 10, 0.0)
    }

    #[test]
    fn mcar_rate_zero_is_identity() {
        let ds = uniform_ds(20, 16, 1);
        assert_eq!(apply_mcar(&ds, 0.0, 3).unwrap(), ds);
    }

    #[test]
    fn mcar_half_rate_within_binomial_interval() {
        // p = 0.5, N = 784000: sigma = sqrt(N p (1-p)) / N ~ 5.6e-4; the stated
        // [0.494, 0.506] band is about 10 sigma wide on each side.
        let ds = uniform_ds(1000, 784, 2);
        let masked = apply_mcar(&ds, 0.5, 11).unwrap();
        let r = missing_rate(&masked);
        assert!((0.494..=0.506).contains(&r), "rate {r}");
    }

    #[test]
    fn mcar_rate_070() {
        let ds = uniform_ds(500, 784, 3);
        let r = missing_rate(&apply_mcar(&ds, 0.7, 5).unwrap());
        assert!((r - 0.7).abs() <= 0.005, "rate {r}");
    }

    #[test]
    fn mcar_is_deterministic_and_keeps_observed_values() {
        let ds = uniform_ds(30, 50, 4);
        let a = apply_mcar(&ds, 0.9, 8).unwrap();
        let b = apply_mcar(&ds, 0.9, 8).unwrap();
        for (s, t) in a.samples.iter().zip(&b.samples) {
            assert_eq!(s.m, t.m);
        }
        for (orig, s) in ds.samples.iter().zip(&a.samples) {
            for j in 0..orig.dim() {
                if s.m[j] == 1.0 {
                    assert_eq!(s.x[j], orig.x[j]);
                    assert_eq!(s.x_filled[j], orig.x[j]);
                } else {
                    assert!(s.x[j].is_nan());
                    assert_eq!(s.x_filled[j], ds.placeholder);
                }
            }
        }
        assert!(apply_mcar(&ds, 1.0, 8).is_err());
    }

    #[test]
    fn mcar_mask_uncorrelated_with_values() {
        let ds = uniform_ds(200, 784, 6);
        let masked = apply_mcar(&ds, 0.5, 13).unwrap();
        let mut xs = Vec::new();
        let mut ms = Vec::new();
        for (o, s) in ds.samples.iter().zip(&masked.samples) {
            xs.extend_from_slice(&o.x);
            ms.extend_from_slice(&s.m);
        }
        let n = xs.len() as f64;
        let (mx, mm) = (xs.iter().sum::<f64>() / n, ms.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ms).map(|(x, m)| (x - mx) * (m - mm)).sum::<f64>() / n;
        let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sm = (ms.iter().map(|m| (m - mm).powi(2)).sum::<f64>() / n).sqrt();
        assert!((cov / (sx * sm)).abs() <= 0.02);
    }

    fn image(top: f64, bottom: f64) -> Sample {
        Sample::from_raw((0..784).map(|j| if j < 14 * 28 { top } else { bottom }).collect(), 0, 0.0)
    }

    #[test]
    fn mar_closed_form_probabilities() {
        assert_eq!(mar_missing_probability(0.7, 0.0), 0.5);
        let p = mar_missing_probability(0.0, 10.0);
        assert!((p - 0.006692850924284856).abs() < 1e-15);
    }

    #[test]
    fn mar_never_masks_observable_rows() {
        let samples = (0..50).map(|i| image(i as f64 / 50.0, 0.5)).collect();
        let ds = Dataset::new(samples, 10, 0.0);
        let masked = apply_mar_image(&ds, 14, 4.0, 9).unwrap();
        for s in &masked.samples {
            assert!(s.m[..14 * 28].iter().all(|&v| v == 1.0));
        }
        assert!(missing_rate(&masked) > 0.0);
    }

    #[test]
    fn mar_steepness_zero_masks_half_of_lower_pixels() {
        let samples = (0..200).map(|_| image(0.9, 0.3)).collect();
        let ds = Dataset::new(samples, 10, 0.0);
        let masked = apply_mar_image(&ds, 14, 0.0, 1).unwrap();
        let lower = 14 * 28 * 200;
        let missing: usize = masked.samples.iter().map(|s| s.missing_count()).sum();
        let r = missing as f64 / lower as f64;
        // 3 sigma for p = 0.5 over 78400 draws is about 0.0054
        assert!((r - 0.5).abs() < 0.0054, "rate {r}");
    }

    #[test]
    fn mar_identical_top_halves_share_distribution() {
        // Two samples sharing the observable band but differing below it must
        // see the same expected lower-pixel rate (Monte-Carlo, 200 redraws).
        let a = image(0.6, 0.0);
        let b = image(0.6, 1.0);
        let p = mar_missing_probability(0.6, 4.0);
        let ds = Dataset::new(vec![a, b], 10, 0.0);
        let (mut ra, mut rb) = (0.0, 0.0);
        for seed in 0..200 {
            let m = apply_mar_image(&ds, 14, 4.0, seed).unwrap();
            ra += m.samples[0].missing_count() as f64;
            rb += m.samples[1].missing_count() as f64;
        }
        let draws = 200.0 * 392.0;
        let (ra, rb) = (ra / draws, rb / draws);
        let sigma = (p * (1.0 - p) / draws).sqrt();
        assert!((ra - p).abs() < 3.0 * sigma && (rb - p).abs() < 3.0 * sigma, "{ra} {rb} {p}");
        assert!((ra - rb).abs() < 3.0 * 2f64.sqrt() * sigma);
    }

    #[test]
    fn mar_rejects_bad_shapes() {
        let ds = uniform_ds(3, 20, 1);
        assert!(apply_mar_image(&ds, 2, 1.0, 1).is_err());
        let ds = Dataset::new(vec![image(0.0, 0.0)], 10, 0.0);
        assert!(apply_mar_image(&ds, 28, 1.0, 1).is_err());
    }

    #[test]
    fn mnar_threshold_counts_and_ordering() {
        for n in [10usize, 11] {
            let samples = (0..n)
                .map(|i| Sample::from_raw(vec![(i * 7 % n) as f64, i as f64 * 0.5], 0, 0.0))
                .collect();
            let ds = Dataset::new(samples, 2, 0.0);
            let masked = apply_mnar_threshold(&ds, 0.5).unwrap();
            for j in 0..2 {
                let k = masked.samples.iter().filter(|s| s.m[j] == 0.0).count();
                assert!(k == n / 2 || k == n.div_ceil(2), "n={n} k={k}");
                // every censored value exceeds every kept value
                let kept_max = ds
                    .samples
                    .iter()
                    .zip(&masked.samples)
                    .filter(|(_, s)| s.m[j] == 1.0)
                    .map(|(o, _)| o.x[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                for (o, s) in ds.samples.iter().zip(&masked.samples) {
                    if s.m[j] == 0.0 {
                        assert!(o.x[j] > kept_max);
                    }
                }
            }
            let none = apply_mnar_threshold(&ds, 0.9999).unwrap();
            assert_eq!(missing_rate(&none), 0.0);
        }
    }

    #[test]
    fn missing_rate_extremes() {
        let ds = uniform_ds(4, 5, 1);
        assert_eq!(missing_rate(&ds), 0.0);
        let gone = Dataset::new(ds.samples.iter().map(|s| s.masked(|_| false, 0.0)).collect(), 10, 0.0);
        assert_eq!(missing_rate(&gone), 1.0);
    }
}
