//! Quantized convolution and linear layers shared by the search and final models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::quant::{act_quant_var, weight_quant_var, QuantSpec};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Convolution with quantized weights: `y = conv(x, q) * scale`, one scale per output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub wspec: QuantSpec,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: impl Into<String>,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        wspec: QuantSpec,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (in_c * k * k) as f32).sqrt();
        let weight = store.add(name, Tensor::randn(&[out_c, in_c, k, k], std, rng));
        ConvLayer { weight, in_c, out_c, k, stride, pad: k / 2, wspec }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let (q, scale) = weight_quant_var(tape, w, &self.wspec)?;
        let y = tape.conv2d(x, q, self.stride, self.pad)?;
        tape.channel_scale(y, scale)
    }

    /// Rows of the weight matrix (output neurons).
    pub fn mh(&self) -> usize {
        self.out_c
    }

    /// Synapses per neuron.
    pub fn mw(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

/// Fully connected layer with quantized weights and no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub in_f: usize,
    pub out_f: usize,
    pub wspec: QuantSpec,
}

impl LinearLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: impl Into<String>,
        in_f: usize,
        out_f: usize,
        wspec: QuantSpec,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / in_f as f32).sqrt();
        let weight = store.add(name, Tensor::randn(&[out_f, in_f], std, rng));
        LinearLayer { weight, in_f, out_f, wspec }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let (q, scale) = weight_quant_var(tape, w, &self.wspec)?;
        let y = tape.linear(x, q)?;
        tape.channel_scale(y, scale)
    }
}

/// `act2(op(act1(x)))`, the shape of every branch feeding an addition.
pub fn quant_branch(
    tape: &mut Tape,
    x: Var,
    act1: &QuantSpec,
    act2: &QuantSpec,
    op: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let a = act_quant_var(tape, x, act1)?;
    let y = op(tape, a)?;
    act_quant_var(tape, y, act2)
}
