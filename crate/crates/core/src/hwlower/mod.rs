//! Lowering to a typed inference graph, streamlining passes, folding and the
//! dataflow resource model.
//!
//! Quantized activations become `MultiThreshold` nodes (output = number of
//! thresholds crossed + `out_bias`), followed by a `Mul` by the quantizer
//! step. Weights are stored as integer levels with a `Mul` by the per-channel
//! scale after the layer.

mod cost;
mod export;
mod interp;
mod passes;

pub use cost::{
    estimate_resources, fold_layers, largest_divisor_at_most, CostModel, FoldTarget, FoldingConfig, LayerEstimate,
    LayerFold, ResourceEstimate,
    matrix_dims,
};
pub use export::export_ir;
pub use interp::interpret;
pub use passes::{cascade_lowering, pass_absorb_sign_bias, pass_move_mul_past_maxpool, streamline};

use serde::{Deserialize, Serialize};

use crate::error::{NashError, Result};

pub const IR_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum IrOp {
    Input,
    /// `weights` are integer levels laid out `[mh][c][k][k]`.
    Conv { weights: Vec<f32>, mh: usize, c: usize, k: usize, stride: usize, pad: usize, wbits: u8 },
    /// `weights` are integer levels laid out `[mh][mw]`.
    Linear { weights: Vec<f32>, mh: usize, mw: usize, wbits: u8 },
    /// Elementwise product with one scale or one per channel.
    Mul { scale: Vec<f32> },
    AddConst { value: f32 },
    /// `count(x >= t for t in thresholds) + out_bias`; thresholds ascending.
    MultiThreshold { thresholds: Vec<f32>, out_bias: i32, obits: u8 },
    MaxPool { k: usize, stride: usize, pad: usize },
    /// Elementwise sum of all inputs, left to right.
    Add,
    /// Channel self-concatenation: output channel `j` copies input channel `j % C`.
    Concat { out_channels: usize },
    GlobalAvgPool,
}

impl IrOp {
    pub fn kind(&self) -> &'static str {
        match self {
            IrOp::Input => "input",
            IrOp::Conv { .. } => "conv",
            IrOp::Linear { .. } => "linear",
            IrOp::Mul { .. } => "mul",
            IrOp::AddConst { .. } => "add_const",
            IrOp::MultiThreshold { .. } => "multi_threshold",
            IrOp::MaxPool { .. } => "max_pool",
            IrOp::Add => "add",
            IrOp::Concat { .. } => "concat",
            IrOp::GlobalAvgPool => "global_avg_pool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrNode {
    pub name: String,
    #[serde(flatten)]
    pub op: IrOp,
    pub inputs: Vec<usize>,
    /// Per-sample output shape: `[C, H, W]` for feature maps, `[F]` for vectors.
    pub shape: Vec<usize>,
}

/// Nodes are stored in topological order and referenced by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphIR {
    pub schema_version: u32,
    pub nodes: Vec<IrNode>,
    pub output: usize,
}

impl GraphIR {
    pub fn new() -> Self {
        GraphIR { schema_version: IR_SCHEMA_VERSION, nodes: Vec::new(), output: 0 }
    }

    pub fn push(&mut self, name: impl Into<String>, op: IrOp, inputs: Vec<usize>, shape: Vec<usize>) -> usize {
        self.nodes.push(IrNode { name: name.into(), op, inputs, shape });
        self.nodes.len() - 1
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.nodes.iter().find(|n| n.op == IrOp::Input).map(|n| n.shape.as_slice())
    }

    pub fn consumers(&self, id: usize) -> Vec<usize> {
        self.nodes.iter().enumerate().filter(|(_, n)| n.inputs.contains(&id)).map(|(i, _)| i).collect()
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Checks index ordering, arities and shape agreement along every edge.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != IR_SCHEMA_VERSION {
            return Err(NashError::invalid(format!("IR schema {} unsupported", self.schema_version)));
        }
        if self.output >= self.nodes.len() {
            return Err(NashError::invalid("IR output index out of range"));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.iter().any(|&p| p >= i) {
                return Err(NashError::invalid(format!("node {i} ({}) is not topologically ordered", n.name)));
            }
            let arity_ok = match n.op {
                IrOp::Input => n.inputs.is_empty(),
                IrOp::Add => n.inputs.len() >= 2,
                _ => n.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(NashError::invalid(format!("node {i} ({}) has {} inputs", n.name, n.inputs.len())));
            }
            if let IrOp::Add = n.op {
                if n.inputs.iter().any(|&p| self.nodes[p].shape != n.shape) {
                    return Err(NashError::invalid(format!("add node {i} ({}) mixes shapes", n.name)));
                }
            }
        }
        Ok(())
    }

    /// Drops nodes the output does not depend on and renumbers the rest in a
    /// stable topological order (lowest original index first).
    pub fn compact(&self) -> GraphIR {
        let n = self.nodes.len();
        let mut live = vec![false; n];
        let mut stack = vec![self.output];
        while let Some(v) = stack.pop() {
            if !live[v] {
                live[v] = true;
                stack.extend(self.nodes[v].inputs.iter().copied());
            }
        }
        let mut indeg = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate().filter(|(i, _)| live[*i]) {
            for &p in &node.inputs {
                indeg[i] += 1;
                users[p].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| live[i] && indeg[i] == 0).collect();
        let mut order = Vec::new();
        while let Some(&v) = ready.iter().next() {
            ready.remove(&v);
            order.push(v);
            for &u in &users[v] {
                indeg[u] -= 1;
                if indeg[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        let mut remap = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let nodes = order
            .iter()
            .map(|&old| {
                let mut node = self.nodes[old].clone();
                node.inputs = node.inputs.iter().map(|&p| remap[p]).collect();
                node
            })
            .collect();
        GraphIR { schema_version: self.schema_version, nodes, output: remap[self.output] }
    }
}

impl Default for GraphIR {
    fn default() -> Self {
        Self::new()
    }
}
