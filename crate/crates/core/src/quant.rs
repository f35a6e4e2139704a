//! Uniform quantizers with straight-through gradients and the per-branch
//! bit-width plan.
//!
//! Activations are quantized by counting crossed thresholds, which is exactly
//! what the lowered `MultiThreshold` node computes, so the trained model and
//! its IR agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{NashError, Result};
use crate::search::Variant;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    Weight,
    ReluAct,
    HardtanhAct,
    IdentityAct,
}

/// Quantizer configuration for one site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub signed: bool,
    pub kind: QuantKind,
    /// Upper clip for `relu_act`, half-width for `identity_act`; unused otherwise.
    #[serde(default = "default_range")]
    pub range: f32,
}

fn default_range() -> f32 {
    2.0
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(NashError::invalid(format!("bit width {bits} outside [1, 8]")));
    }
    Ok(())
}

impl QuantSpec {
    pub fn weight(bits: u8) -> Result<Self> {
        check_bits(bits)?;
        Ok(QuantSpec { bits, signed: true, kind: QuantKind::Weight, range: 0.0 })
    }

    pub fn relu(bits: u8, range: f32) -> Result<Self> {
        check_bits(bits)?;
        if !(range > 0.0 && range.is_finite()) {
            return Err(NashError::invalid(format!("relu range must be positive, got {range}")));
        }
        Ok(QuantSpec { bits, signed: false, kind: QuantKind::ReluAct, range })
    }

    pub fn hardtanh(bits: u8) -> Result<Self> {
        check_bits(bits)?;
        Ok(QuantSpec { bits, signed: true, kind: QuantKind::HardtanhAct, range: 1.0 })
    }

    pub fn identity(bits: u8, range: f32) -> Result<Self> {
        check_bits(bits)?;
        if !(range > 0.0 && range.is_finite()) {
            return Err(NashError::invalid(format!("identity range must be positive, got {range}")));
        }
        Ok(QuantSpec { bits, signed: true, kind: QuantKind::IdentityAct, range })
    }

    pub fn is_activation(&self) -> bool {
        self.kind != QuantKind::Weight
    }

    /// Number of representable values.
    pub fn level_count(&self) -> usize {
        match self.kind {
            QuantKind::Weight if self.bits == 1 => 2,
            QuantKind::Weight => (1usize << self.bits) - 1,
            QuantKind::HardtanhAct if self.bits > 1 => (1usize << self.bits) - 1,
            _ => 1usize << self.bits,
        }
    }

    /// Threshold grid of an activation quantizer.
    pub fn levels(&self) -> Result<ActLevels> {
        check_bits(self.bits)?;
        let b = self.bits as u32;
        Ok(match self.kind {
            QuantKind::Weight => return Err(NashError::invalid("weight quantizers have no activation grid")),
            QuantKind::ReluAct => {
                ActLevels::new(self.range / ((1u32 << b) - 1) as f32, 0, (1i32 << b) - 1, 0.0)
            }
            QuantKind::HardtanhAct if b == 1 => ActLevels::new(2.0, 0, 1, -1.0),
            QuantKind::HardtanhAct => {
                let qmax = (1i32 << (b - 1)) - 1;
                ActLevels::new(1.0 / qmax as f32, -qmax, qmax, 0.0)
            }
            QuantKind::IdentityAct => {
                let half = 1i32 << (b - 1);
                ActLevels::new(self.range / half as f32, -half, half - 1, 0.0)
            }
        })
    }
}

/// `value = offset + index * step` for `index` in `min_index..=max_index`.
/// `index = min_index + #{t in thresholds : x >= t}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActLevels {
    pub step: f32,
    pub min_index: i32,
    pub max_index: i32,
    pub offset: f32,
    pub thresholds: Vec<f32>,
}

impl ActLevels {
    fn new(step: f32, min_index: i32, max_index: i32, offset: f32) -> Self {
        let thresholds = (min_index + 1..=max_index).map(|k| offset + (k as f32 - 0.5) * step).collect();
        ActLevels { step, min_index, max_index, offset, thresholds }
    }

    /// Number of thresholds `<= x`, offset by `min_index`. Equal to a
    /// `partition_point` over `thresholds`; the arithmetic guess only saves the search.
    pub fn index(&self, x: f32) -> i32 {
        let t = &self.thresholds;
        if t.is_empty() || x.is_nan() {
            return self.min_index;
        }
        // truncating cast saturates and avoids a libm floor call
        let d = (x - t[0]) / self.step;
        let mut p = if d >= 0.0 { (d as usize).saturating_add(1).min(t.len()) } else { 0 };
        while p > 0 && t[p - 1] > x {
            p -= 1;
        }
        while p < t.len() && t[p] <= x {
            p += 1;
        }
        self.min_index + p as i32
    }

    pub fn value_of(&self, index: i32) -> f32 {
        index as f32 * self.step + self.offset
    }

    pub fn quantize(&self, x: f32) -> f32 {
        self.value_of(self.index(x))
    }

    pub fn lo(&self) -> f32 {
        self.value_of(self.min_index)
    }

    pub fn hi(&self) -> f32 {
        self.value_of(self.max_index)
    }
}

/// Integer weight levels plus a per-output-channel scale: `w_q = q * scale[o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeight {
    pub shape: Vec<usize>,
    pub q: Vec<f32>,
    pub scale: Vec<f32>,
    /// Straight-through multiplier from d/d(q) back to d/d(w): `mask / scale`.
    pub grad_scale: Vec<f32>,
}

impl QuantizedWeight {
    pub fn dequantized(&self) -> Vec<f32> {
        let per = self.q.len() / self.scale.len();
        self.q.iter().enumerate().map(|(i, q)| q * self.scale[i / per]).collect()
    }
}

/// Splits `w` (output channels on axis 0) into integer levels and scales.
///
/// One bit: `s = mean(|w|)` per output channel, `q = sign(w)` with `sign(0) = +1`.
/// More bits: `s = max(|w|) / (2^(b-1) - 1)` per tensor, `q = round(w / s)`.
pub fn quantize_weight_parts(w: &Tensor, spec: &QuantSpec) -> Result<QuantizedWeight> {
    if spec.kind != QuantKind::Weight {
        return Err(NashError::invalid("quantize_weight needs a weight spec"));
    }
    check_bits(spec.bits)?;
    let out = *w.shape.first().ok_or_else(|| NashError::invalid("weight tensor has rank 0"))?;
    let per = w.numel() / out.max(1);
    let mut q = vec![0.0f32; w.numel()];
    let mut grad_scale = vec![0.0f32; w.numel()];
    let scale: Vec<f32>;
    if spec.bits == 1 {
        scale = w
            .data
            .chunks(per)
            .map(|row| (row.iter().map(|v| v.abs() as f64).sum::<f64>() / per as f64) as f32)
            .collect();
        for (i, &v) in w.data.iter().enumerate() {
            let s = scale[i / per];
            q[i] = if v >= 0.0 { 1.0 } else { -1.0 };
            grad_scale[i] = if v.abs() <= s && s > 0.0 { 1.0 / s } else { 0.0 };
        }
    } else {
        let qmax = ((1i32 << (spec.bits - 1)) - 1) as f32;
        let max_abs = w.data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let s = if max_abs > 0.0 { (max_abs as f64 / qmax as f64) as f32 } else { 1.0 };
        for (i, &v) in w.data.iter().enumerate() {
            q[i] = (v / s).round().clamp(-qmax, qmax);
            grad_scale[i] = if v.abs() <= s * qmax { 1.0 / s } else { 0.0 };
        }
        scale = vec![s; out];
    }
    Ok(QuantizedWeight { shape: w.shape.clone(), q, scale, grad_scale })
}

/// Quantized weight values `s * q` on the declared grid.
pub fn quantize_weight(w: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    let parts = quantize_weight_parts(w, spec)?;
    Tensor::new(w.shape.clone(), parts.dequantized())
}

/// Elementwise activation quantization.
pub fn act_quant(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    let levels = spec.levels()?;
    Tensor::new(x.shape.clone(), x.data.iter().map(|&v| levels.quantize(v)).collect())
}

/// Activation quantizer on the tape; gradients pass straight through inside
/// the representable range and are zero outside it.
pub fn act_quant_var(tape: &mut Tape, x: Var, spec: &QuantSpec) -> Result<Var> {
    let levels = spec.levels()?;
    let (lo, hi) = (levels.lo(), levels.hi());
    let xs = tape.value(x);
    let values = xs.iter().map(|&v| levels.quantize(v)).collect();
    let mask = xs.iter().map(|&v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 }).collect();
    Ok(tape.straight_through(x, values, mask))
}

/// Integer weight levels on the tape plus their per-channel scale. The caller
/// applies the scale after the linear op, as the lowered graph does.
pub fn weight_quant_var(tape: &mut Tape, w: Var, spec: &QuantSpec) -> Result<(Var, Vec<f32>)> {
    let t = tape.tensor(w);
    let parts = quantize_weight_parts(&t, spec)?;
    let v = tape.straight_through(w, parts.q, parts.grad_scale);
    Ok((v, parts.scale))
}

/// Which activation closes each branch before an addition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act2Kind {
    #[default]
    Identity,
    Hardtanh,
}

/// Activation ranges and the pre-addition activation choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActConfig {
    pub relu_range: f32,
    pub identity_range: f32,
    #[serde(default)]
    pub act2: Act2Kind,
}

impl Default for ActConfig {
    fn default() -> Self {
        ActConfig { relu_range: 2.0, identity_range: 2.0, act2: Act2Kind::Identity }
    }
}

impl ActConfig {
    pub fn act1(&self, bits: u8) -> Result<QuantSpec> {
        QuantSpec::relu(bits, self.relu_range)
    }

    pub fn act2(&self, bits: u8) -> Result<QuantSpec> {
        match self.act2 {
            Act2Kind::Identity => QuantSpec::identity(bits, self.identity_range),
            Act2Kind::Hardtanh => QuantSpec::hardtanh(bits),
        }
    }
}

/// Bit widths per site: the backbone's wXaY pair, residual branches, NAS branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitWidthPlan {
    pub backbone_w: u8,
    pub backbone_a: u8,
    pub residual_w: u8,
    pub residual_a: u8,
    pub nas_a: u8,
    pub nas_w: u8,
}

const SUPPORTED_BITS: [u8; 4] = [1, 2, 4, 8];

/// Residual and NAS activations are always 8 bit; NAS weights are 1 bit for
/// v1-v3 and 8 bit for v4.
pub fn resolve_plan(variant: Variant, wbits: u8, abits: u8) -> Result<BitWidthPlan> {
    if !SUPPORTED_BITS.contains(&wbits) || !SUPPORTED_BITS.contains(&abits) {
        return Err(NashError::invalid(format!("unsupported bit-width pair w{wbits}a{abits}")));
    }
    let nas_w = if variant == Variant::V4 { 8 } else { 1 };
    Ok(BitWidthPlan { backbone_w: wbits, backbone_a: abits, residual_w: 8, residual_a: 8, nas_a: 8, nas_w })
}
