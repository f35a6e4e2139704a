use super::kernels::*;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{NashError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    MaxPool { x: Var, argmax: Vec<u32> },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    ChannelScale { x: Var, scale: Vec<f32> },
    Relu { x: Var },
    Square { x: Var },
    Sum { x: Var },
    Linear { x: Var, w: Var },
    GlobalAvgPool { x: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f32>, labels: Vec<usize> },
    ReplicateChannels { x: Var },
    StraightThrough { x: Var, grad_scale: Vec<f32> },
    Gate { x: Var, edge: usize, slot: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

/// Gradient of the loss with respect to a sampled op's gate on one edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateGrad {
    pub edge: usize,
    pub slot: usize,
    pub grad: f32,
}

/// Recorded primitive applications, replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one optional gradient per recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, usize)>,
    gates: Vec<GateGrad>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn gates(&self) -> &[GateGrad] {
        &self.gates
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(pid).accumulate_grad(g);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shapes are consistent")
    }

    fn dims4(&self, v: Var) -> Result<[usize; 4]> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(NashError::invalid(format!("expected an N,C,H,W tensor, got shape {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Records an input. Gradients are kept for it when `requires_grad`.
    pub fn input(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.input(t, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape.clone(), t.data.clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.dims4(x)?;
        let ws = self.dims4(w)?;
        if stride == 0 {
            return Err(NashError::invalid("conv2d stride must be positive"));
        }
        if xs[1] != ws[1] {
            return Err(NashError::invalid(format!("conv2d channel mismatch: input {} vs weight {}", xs[1], ws[1])));
        }
        if ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(NashError::invalid(format!("conv2d kernel must be square and odd, got {}x{}", ws[2], ws[3])));
        }
        let ho = conv_out_extent(xs[2], ws[2], stride, pad);
        let wo = conv_out_extent(xs[3], ws[2], stride, pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(NashError::invalid("conv2d window does not fit the input"));
        };
        let out = conv2d_forward(self.value(x), xs, self.value(w), ws, stride, pad);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![xs[0], ws[0], ho, wo], out, Op::Conv2d { x, w, stride, pad }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.dims4(x)?;
        let (Some(ho), Some(wo)) = (conv_out_extent(xs[2], k, stride, pad), conv_out_extent(xs[3], k, stride, pad)) else {
            return Err(NashError::invalid("maxpool window does not fit the input"));
        };
        let (out, argmax) = maxpool2d_forward(self.value(x), xs, k, stride, pad);
        let rg = self.rg(x);
        Ok(self.push(vec![xs[0], xs[1], ho, wo], out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NashError::invalid(format!("add shape mismatch: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f32> = self.value(a).iter().zip(self.value(b)).map(|(p, q)| p + q).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, c }, rg)
    }

    /// Multiplies channel `c` (axis 1) by `scale[c]`.
    pub fn channel_scale(&mut self, x: Var, scale: Vec<f32>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[1] != scale.len() {
            return Err(NashError::invalid(format!("channel_scale: {} scales for shape {shape:?}", scale.len())));
        }
        let inner: usize = shape[2..].iter().product();
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * scale[(i / inner) % shape[1]])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::ChannelScale { x, scale }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu { x }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v * v).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Square { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum { x }, rg)
    }

    /// `x` is N,F and `w` is O,F.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(NashError::invalid(format!("linear shape mismatch: input {xs:?} weight {ws:?}")));
        }
        let out = linear_forward(self.value(x), xs[0], xs[1], self.value(w), ws[0]);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![xs[0], ws[0]], out, Op::Linear { x, w }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.dims4(x)?;
        let out = global_avg_pool_forward(self.value(x), xs);
        let rg = self.rg(x);
        Ok(self.push(vec![xs[0], xs[1]], out, Op::GlobalAvgPool { x }, rg))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(NashError::invalid(format!("logits {s:?} vs {} labels", labels.len())));
        }
        let (n, o) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= o) {
            return Err(NashError::invalid(format!("label {bad} out of range for {o} classes")));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0f32; n * o];
        let mut loss = 0.0f32;
        for b in 0..n {
            let row = &z[b * o..(b + 1) * o];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for (j, v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[b * o + j] = e;
                denom += e;
            }
            for p in &mut probs[b * o..(b + 1) * o] {
                *p /= denom;
            }
            loss += denom.ln() + m - row[labels[b]];
        }
        let rg = self.rg(logits);
        let op = Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() };
        Ok(self.push(vec![1], vec![loss / n as f32], op, rg))
    }

    /// Channel replication (self-concatenation) up to `out_c` channels.
    pub fn replicate_channels(&mut self, x: Var, out_c: usize) -> Result<Var> {
        let xs = self.dims4(x)?;
        let out = replicate_channels_forward(self.value(x), xs, out_c);
        let rg = self.rg(x);
        Ok(self.push(vec![xs[0], out_c, xs[2], xs[3]], out, Op::ReplicateChannels { x }, rg))
    }

    /// Emits precomputed `values` in the forward pass; backward multiplies the
    /// upstream gradient elementwise by `grad_scale` (a straight-through estimator).
    pub fn straight_through(&mut self, x: Var, values: Vec<f32>, grad_scale: Vec<f32>) -> Var {
        assert_eq!(values.len(), self.value(x).len());
        assert_eq!(grad_scale.len(), values.len());
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), values, Op::StraightThrough { x, grad_scale }, rg)
    }

    /// Identity in value; records d(loss)/d(gate) for the op sampled on `edge`.
    pub fn gate(&mut self, x: Var, edge: usize, slot: usize) -> Var {
        let value = self.value(x).to_vec();
        self.push(self.shape(x).to_vec(), value, Op::Gate { x, edge, slot }, true)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NashError::invalid("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut gates = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Conv2d { x, w, stride, pad } => {
                    let xs = self.dims4(*x)?;
                    let ws = self.dims4(*w)?;
                    if self.rg(*x) {
                        let gx = conv2d_backward_input(&g, xs, self.value(*w), ws, *stride, *pad);
                        acc(&mut grads, *x, gx);
                    }
                    if self.rg(*w) {
                        let gw = conv2d_backward_weight(&g, self.value(*x), xs, ws, *stride, *pad);
                        acc(&mut grads, *w, gw);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        gx[src as usize] += gi;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::Scale { x, c } => acc(&mut grads, *x, g.iter().map(|v| v * c).collect()),
                Op::ChannelScale { x, scale } => {
                    let inner: usize = node.shape[2..].iter().product();
                    let c = node.shape[1];
                    let gx = g.iter().enumerate().map(|(j, v)| v * scale[(j / inner) % c]).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Relu { x } => {
                    let gx = g.iter().zip(self.value(*x)).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Square { x } => {
                    let gx = g.iter().zip(self.value(*x)).map(|(gv, xv)| 2.0 * xv * gv).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Sum { x } => acc(&mut grads, *x, vec![g[0]; self.value(*x).len()]),
                Op::Linear { x, w } => {
                    let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let o = self.shape(*w)[0];
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.rg(*x) {
                        let mut gx = vec![0.0f32; n * f];
                        for b in 0..n {
                            for j in 0..o {
                                let gj = g[b * o + j];
                                for k in 0..f {
                                    gx[b * f + k] += gj * wv[j * f + k];
                                }
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                    if self.rg(*w) {
                        let mut gw = vec![0.0f32; o * f];
                        for b in 0..n {
                            for j in 0..o {
                                let gj = g[b * o + j];
                                for k in 0..f {
                                    gw[j * f + k] += gj * xv[b * f + k];
                                }
                            }
                        }
                        acc(&mut grads, *w, gw);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let [_, _, h, w] = self.dims4(*x)?;
                    let hw = h * w;
                    let gx = (0..self.value(*x).len()).map(|j| g[j / hw] / hw as f32).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                    let n = labels.len();
                    let o = probs.len() / n;
                    let mut gx = probs.clone();
                    for (b, &l) in labels.iter().enumerate() {
                        gx[b * o + l] -= 1.0;
                    }
                    let s = g[0] / n as f32;
                    gx.iter_mut().for_each(|v| *v *= s);
                    acc(&mut grads, *logits, gx);
                }
                Op::ReplicateChannels { x } => {
                    let [n, c, h, w] = self.dims4(*x)?;
                    let out_c = node.shape[1];
                    let hw = h * w;
                    let mut gx = vec![0.0f32; n * c * hw];
                    for b in 0..n {
                        for j in 0..out_c {
                            let dst = (b * c + j % c) * hw;
                            let src = (b * out_c + j) * hw;
                            for t in 0..hw {
                                gx[dst + t] += g[src + t];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::StraightThrough { x, grad_scale } => {
                    let gx = g.iter().zip(grad_scale).map(|(a, b)| a * b).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Gate { x, edge, slot } => {
                    let dot = g.iter().zip(self.value(*x)).fold(0.0f32, |s, (a, b)| s + a * b);
                    gates.push(GateGrad { edge: *edge, slot: *slot, grad: dot });
                    if self.rg(*x) {
                        acc(&mut grads, *x, g.clone());
                    }
                }
            }
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(pid) => Some((pid, i)),
                _ => None,
            })
            .collect();
        gates.reverse();
        Ok(Gradients { grads, params, gates })
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Largest mixed relative error between tape gradients and central differences
/// of the scalar function `f` at `x`. The error of each element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x, true);
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(xv).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f32> {
        let mut t = Tape::new();
        let v = t.input(probe, false);
        let out = f(&mut t, v)?;
        Ok(t.value(out)[0])
    };

    let mut worst = 0.0f32;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data[i];
        probe.data[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
