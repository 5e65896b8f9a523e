//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export has a plain-Rust counterpart returning `Result<_, String>`
//! so the logic is testable off the browser.

use wasm_bindgen::prelude::*;

use gil_core::datasets::{split, Dataset, Sample};
use gil_core::gil::{train, train_baseline, ModelSpec, TrainConfig, Variant};
use gil_core::linalg::{outer, Activation};
use gil_core::missingness::{Mechanism, MaskSpec};
use gil_core::optim::weighted_input;
use gil_core::rl::RlConfig;
use gil_core::synthetic::{synthetic_mnar, SyntheticMnarSpec};

pub const SIDE: usize = 28;
const PREVIEW_BATCH: usize = 32;

/// A ring drawn on a 28x28 canvas; `radius` in pixels.
fn ring(radius: f64, cx: f64, cy: f64) -> Vec<f64> {
    (0..SIDE * SIDE)
        .map(|p| {
            let (r, c) = ((p / SIDE) as f64, (p % SIDE) as f64);
            let dist = ((r - cy).powi(2) + (c - cx).powi(2)).sqrt();
            (-(dist - radius).powi(2) / 3.0).exp()
        })
        .collect()
}

/// Rings of varying size; some mechanisms need a batch to be meaningful.
fn ring_batch() -> Dataset {
    let samples = (0..PREVIEW_BATCH)
        .map(|k| {
            let t = k as f64 / PREVIEW_BATCH as f64;
            Sample::from_raw(ring(5.0 + 5.0 * t, 13.5 + 2.0 * (7.0 * t).sin(), 13.5 + 2.0 * (5.0 * t).cos()), 0, 0.0)
        })
        .collect();
    Dataset::new(samples, 1, 0.0)
}

pub fn demo_image_impl() -> Vec<f64> {
    ring_batch().samples[0].x.to_vec()
}

/// The first demo image after masking, `NaN` where missing.
pub fn mask_preview_impl(mechanism: &str, rate: f64, seed: u64) -> Result<Vec<f64>, String> {
    let spec = match mechanism {
        "mcar" => MaskSpec { mechanism: Mechanism::Mcar, rate, ..Default::default() },
        // steepness follows the slider so the effect is visible
        "mar_image" => MaskSpec { mechanism: Mechanism::MarImage, steepness: 1.0 + 10.0 * rate, ..Default::default() },
        "mnar_threshold" => MaskSpec { mechanism: Mechanism::MnarThreshold, quantile: 1.0 - rate, ..Default::default() },
        other => return Err(format!("unknown mechanism {other:?}")),
    };
    let masked = spec.apply(&ring_batch(), seed).map_err(|e| e.to_string())?;
    Ok(masked.samples[0].x.to_vec())
}

/// Row-major `e x d` matrix `outer(delta, x * a)`.
pub fn importance_gradient_impl(delta: &[f64], x: &[f64], a: &[f64]) -> Result<Vec<f64>, String> {
    let xa = weighted_input(x, a).map_err(|e| e.to_string())?;
    Ok(outer(delta, &xa).as_slice().to_vec())
}

/// Train one variant on a small synthetic task; returns JSON with the
/// evaluation curve.
pub fn train_curve_impl(variant: &str, iterations: u32, seed: u64) -> Result<String, String> {
    let variant = match variant {
        "gil" => Variant::Gil,
        "gil_h" => Variant::GilH,
        "zero" => Variant::Baseline,
        other => return Err(format!("unknown variant {other:?}")),
    };
    if !(10..=2000).contains(&iterations) {
        return Err("iterations must lie in [10, 2000]".into());
    }
    let data = synthetic_mnar(&SyntheticMnarSpec { n: 600, d: 10, seed, ..Default::default() }, 0.0).map_err(|e| e.to_string())?;
    let (tr, te) = split(&data.observed, 0.25, seed).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        variant,
        model: ModelSpec::Mlp { hidden: vec![32], activation: Activation::Relu },
        max_iter: iterations as usize,
        batch_size: 32,
        eval_every: 10,
        rl: RlConfig { hidden: vec![32, 32], ..Default::default() },
        seed,
        ..Default::default()
    };
    let out = if variant == Variant::Baseline {
        train_baseline(&tr, &te, &cfg, None).map(|(o, _)| o)
    } else {
        train(&tr, &te, &cfg)
    }
    .map_err(|e| e.to_string())?;
    let r = &out.report;
    let curve = serde_json::json!({
        "iteration": r.points.iter().map(|p| p.iteration).collect::<Vec<_>>(),
        "accuracy": r.points.iter().map(|p| p.eval.accuracy).collect::<Vec<_>>(),
        "train_loss": r.points.iter().map(|p| p.train_loss).collect::<Vec<_>>(),
        "reward": r.rewards,
    });
    Ok(curve.to_string())
}

#[wasm_bindgen]
pub fn demo_image() -> Vec<f64> {
    demo_image_impl()
}

#[wasm_bindgen]
pub fn mask_preview(mechanism: &str, rate: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    mask_preview_impl(mechanism, rate, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn importance_gradient(delta: &[f64], x: &[f64], a: &[f64]) -> Result<Vec<f64>, JsError> {
    importance_gradient_impl(delta, x, a).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn train_curve(variant: &str, iterations: u32, seed: u32) -> Result<String, JsError> {
    train_curve_impl(variant, iterations, seed.into()).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_preview_keeps_observed_pixels() {
        let clean = demo_image_impl();
        for mech in ["mcar", "mar_image", "mnar_threshold"] {
            let masked = mask_preview_impl(mech, 0.5, 3).unwrap();
            assert_eq!(masked.len(), SIDE * SIDE);
            let missing = masked.iter().filter(|v| v.is_nan()).count();
            assert!(missing > 0, "{mech} masked nothing");
            assert!(masked.iter().zip(&clean).all(|(m, c)| m.is_nan() || m == c));
        }
        assert!(mask_preview_impl("nope", 0.5, 0).is_err());
    }

    #[test]
    fn importance_zeroes_columns() {
        let g = importance_gradient_impl(&[1.0, 2.0], &[3.0, 4.0, 5.0], &[1.0, 0.0, 0.5]).unwrap();
        assert_eq!(g, vec![3.0, 0.0, 2.5, 6.0, 0.0, 5.0]);
        assert!(importance_gradient_impl(&[1.0], &[1.0], &[2.0]).is_err());
    }

    #[test]
    fn train_curve_returns_points() {
        let json: serde_json::Value = serde_json::from_str(&train_curve_impl("gil_h", 30, 1).unwrap()).unwrap();
        assert_eq!(json["iteration"].as_array().unwrap().len(), 3);
        assert!(train_curve_impl("zero", 5, 1).is_err());
    }
}
