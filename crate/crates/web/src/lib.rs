//! WebAssembly bindings for the demo page. Each operation has a plain Rust
//! function returning JSON (tested natively) and a thin exported wrapper.

use dlora_core::autograd::softmax;
use dlora_core::backbone::{BackboneConfig, Module};
use dlora_core::data::{chronological_split, make_windows, synth_generate, SplitSpec, SynthKind, SynthSpec, WindowBatch};
use dlora_core::dlora::{entropy_bits, top_n_gates};
use dlora_core::metrics;
use dlora_core::model::{Forecaster, ModelConfig, Variant};
use dlora_core::training::{self, TrainConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// A synthetic series with the seasonal-naive forecast of its final window.
pub fn synth_preview(kind: &str, channels: usize, length: usize, seed: u64, lookback: usize, horizon: usize, season: usize) -> Result<Value, String> {
    let kind: SynthKind = kind.parse().map_err(err)?;
    if channels == 0 || channels > 8 || length > 20_000 {
        return Err("channels must be 1..=8 and length at most 20000".into());
    }
    if lookback + horizon > length || season == 0 || season > lookback {
        return Err(format!("need season ≤ lookback and lookback + horizon ≤ length ({length})"));
    }
    let (s, _) = synth_generate(&SynthSpec::new(kind, channels, length, seed)).map_err(err)?;
    let start = length - lookback - horizon;
    let mut out = Vec::with_capacity(channels);
    for c in 0..channels {
        let values: Vec<f64> = (0..length).map(|t| s.value(t, c)).collect();
        let hist = &values[start..start + lookback];
        let truth = &values[start + lookback..];
        let naive = metrics::naive_seasonal_forecast(hist, season, horizon).map_err(err)?;
        out.push(json!({
            "name": s.channel_names()[c],
            "values": values,
            "naive": naive,
            "mse": metrics::mse(truth, &naive).map_err(err)?,
            "smape": metrics::smape(truth, &naive).map_err(err)?,
        }));
    }
    Ok(json!({ "forecast_start": start + lookback, "channels": out }))
}

/// Softmax probabilities, the top-`n` gates and this sample's load-balance
/// term for seven router logits.
pub fn explore_router(logits: &[f64], n: usize) -> Result<Value, String> {
    if logits.len() != 7 || logits.iter().any(|v| !v.is_finite()) {
        return Err("expected 7 finite logits".into());
    }
    if !(1..=7).contains(&n) {
        return Err(format!("n = {n} outside 1..=7"));
    }
    let p = softmax(logits);
    let gates = top_n_gates(&p, n);
    let argmax = (0..7).fold(0, |b, i| if p[i] > p[b] { i } else { b });
    Ok(json!({
        "modules": Module::ALL.map(Module::name),
        "probs": p,
        "gates": gates,
        "entropy_bits": entropy_bits(&p),
        "load_balance": 7.0 * p[argmax],
    }))
}

fn demo_config(seed: u64) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            d_ffn: 32,
            ..BackboneConfig::desk()
        },
        align_heads: 4,
        rank: 2,
        top_n: 3,
        variant: Variant::Full,
        seed,
        ..ModelConfig::desk(32, 8)
    }
}

/// Trains a small model on a two-channel sine mixture and forecasts the last
/// test window.
pub fn train_demo(epochs: usize, seed: u64) -> Result<Value, String> {
    if !(1..=10).contains(&epochs) {
        return Err("epochs must be 1..=10".into());
    }
    let (s, _) = synth_generate(&SynthSpec::new(SynthKind::SineMixture, 2, 400, seed)).map_err(err)?;
    let sp = chronological_split(&s, SplitSpec::proportional(s.len()), 32).map_err(err)?;
    let mut model = Forecaster::new(demo_config(seed)).map_err(err)?;
    let cfg = TrainConfig {
        epochs,
        stride: 2,
        seed,
        ..TrainConfig::default()
    };
    let out = training::train(&mut model, sp.train, sp.val, &cfg).map_err(err)?;
    let test_mse = training::evaluate_mse(&model, sp.test, 64).map_err(err)?;
    let ws = make_windows(sp.test, 32, 8, 1);
    let last = *ws.windows.last().ok_or("empty test split")?;
    let batch = WindowBatch::build(sp.test, &[last]);
    let (y_hat, _) = model.predict(&batch.x).map_err(err)?;
    let channels: Vec<Value> = (0..2)
        .map(|c| {
            json!({
                "history": &batch.x.data()[c * 32..(c + 1) * 32],
                "truth": &batch.y.data()[c * 8..(c + 1) * 8],
                "forecast": &y_hat.data()[c * 8..(c + 1) * 8],
            })
        })
        .collect();
    Ok(json!({
        "train_loss": out.history.train_losses(),
        "val_loss": out.history.records.iter().map(|r| r.val_loss).collect::<Vec<_>>(),
        "best_epoch": out.history.best_epoch,
        "test_mse": test_mse,
        "channels": channels,
        "routing": out.routing.to_json(),
        "trainable": model.param_report().trainable,
        "total": model.param_report().total,
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = synthPreview)]
pub fn synth_preview_js(kind: &str, channels: usize, length: usize, seed: u32, lookback: usize, horizon: usize, season: usize) -> Result<String, JsValue> {
    to_js(synth_preview(kind, channels, length, seed as u64, lookback, horizon, season))
}

#[wasm_bindgen(js_name = exploreRouter)]
pub fn explore_router_js(logits: &[f64], n: usize) -> Result<String, JsValue> {
    to_js(explore_router(logits, n))
}

#[wasm_bindgen(js_name = trainDemo)]
pub fn train_demo_js(epochs: usize, seed: u32) -> Result<String, JsValue> {
    to_js(train_demo(epochs, seed as u64))
}
