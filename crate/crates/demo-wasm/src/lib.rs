//! Browser bindings for the static demo page in `www/`.
//!
//! Three operations: fold and cost one quantized conv layer, compute a
//! Pareto front from pasted CSV, and sample a quantizer transfer curve.
//! Every binding returns a JSON string. The plain functions underneath take
//! the same arguments and are used by the native tests.

use nash_core::hwlower::{estimate_resources, fold_layers, CostModel, FoldTarget, GraphIR, IrOp};
use nash_core::quant::QuantSpec;
use nash_core::report::{emit_svg, load_csv, pareto_front, ResourceKey};
use serde_json::json;
use wasm_bindgen::prelude::*;

#[allow(clippy::too_many_arguments)]
pub fn layer_cost(
    channels_in: usize,
    channels_out: usize,
    kernel: usize,
    fmap: usize,
    wbits: u8,
    abits: u8,
    cap_pe: usize,
    cap_simd: usize,
    clock_mhz: f64,
) -> Result<String, String> {
    if channels_in == 0 || channels_out == 0 || kernel == 0 || fmap == 0 || cap_pe == 0 || cap_simd == 0 {
        return Err("sizes and caps must be positive".into());
    }
    if !(1..=8).contains(&wbits) || !(1..=8).contains(&abits) {
        return Err(format!("bit widths must be in 1..=8, got w{wbits} a{abits}"));
    }
    let thresholds = |bits: u8| (1..(1usize << bits)).map(|t| t as f32).collect::<Vec<_>>();
    let mh = channels_out;
    let mw = channels_in * kernel * kernel;
    let mut g = GraphIR::new();
    let x = g.push("input", IrOp::Input, vec![], vec![channels_in, fmap, fmap]);
    let q = g.push(
        "act_in",
        IrOp::MultiThreshold { thresholds: thresholds(abits), out_bias: 0, obits: abits },
        vec![x],
        vec![channels_in, fmap, fmap],
    );
    let conv = IrOp::Conv { weights: vec![0.0; mh * mw], mh, c: channels_in, k: kernel, stride: 1, pad: kernel / 2, wbits };
    let c = g.push("conv", conv, vec![q], vec![mh, fmap, fmap]);
    g.output = g.push(
        "act_out",
        IrOp::MultiThreshold { thresholds: thresholds(abits), out_bias: 0, obits: abits },
        vec![c],
        vec![mh, fmap, fmap],
    );
    let folding = fold_layers(&g, FoldTarget::MaxParallel { cap_pe, cap_simd });
    let model = CostModel { clock_mhz, ..CostModel::default() };
    let est = estimate_resources(&g, &folding, &model).map_err(|e| e.to_string())?;
    let layer = est.layers.iter().find(|l| l.name == "conv").ok_or("conv layer missing")?;
    let fold = &folding.layers[0];
    Ok(json!({
        "mh": mh, "mw": mw, "pe": fold.pe, "simd": fold.simd,
        "cycles": layer.cycles, "bram": layer.bram, "lut": layer.lut,
        "latency_ms": layer.cycles as f64 / (clock_mhz * 1e3),
    })
    .to_string())
}

/// `csv` uses the `nash pareto` column layout.
pub fn front(csv: &str, resource: &str) -> Result<String, String> {
    let key: ResourceKey = resource.parse().map_err(|e: nash_core::NashError| e.to_string())?;
    let points = load_csv(csv).map_err(|e| e.to_string())?;
    let front = pareto_front(&points, key).map_err(|e| e.to_string())?;
    let svg = emit_svg(&points, &front, key).map_err(|e| e.to_string())?;
    let labels: Vec<&str> = front.iter().map(|p| p.label.as_str()).collect();
    Ok(json!({ "front": labels, "svg": svg }).to_string())
}

/// `[[x, q(x)], ...]` for `samples` evenly spaced inputs in `[lo, hi]`.
pub fn quantizer_curve(kind: &str, bits: u8, range: f32, lo: f32, hi: f32, samples: usize) -> Result<String, String> {
    let spec = match kind {
        "relu" => QuantSpec::relu(bits, range),
        "hardtanh" => QuantSpec::hardtanh(bits),
        "identity" => QuantSpec::identity(bits, range),
        _ => return Err(format!("unknown quantizer `{kind}`")),
    }
    .map_err(|e| e.to_string())?;
    if samples < 2 || !(hi > lo) {
        return Err("need hi > lo and at least two samples".into());
    }
    let levels = spec.levels().map_err(|e| e.to_string())?;
    let pts: Vec<[f32; 2]> = (0..samples)
        .map(|i| {
            let x = lo + (hi - lo) * i as f32 / (samples - 1) as f32;
            [x, levels.quantize(x)]
        })
        .collect();
    Ok(json!({ "points": pts, "thresholds": levels.thresholds }).to_string())
}

#[wasm_bindgen(js_name = layerCost)]
#[allow(clippy::too_many_arguments)]
pub fn layer_cost_js(
    channels_in: usize,
    channels_out: usize,
    kernel: usize,
    fmap: usize,
    wbits: u8,
    abits: u8,
    cap_pe: usize,
    cap_simd: usize,
    clock_mhz: f64,
) -> Result<String, JsError> {
    layer_cost(channels_in, channels_out, kernel, fmap, wbits, abits, cap_pe, cap_simd, clock_mhz).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = paretoFront)]
pub fn front_js(csv: &str, resource: &str) -> Result<String, JsError> {
    front(csv, resource).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = quantizerCurve)]
pub fn quantizer_curve_js(kind: &str, bits: u8, range: f32, lo: f32, hi: f32, samples: usize) -> Result<String, JsError> {
    quantizer_curve(kind, bits, range, lo, hi, samples).map_err(|e| JsError::new(&e))
}
