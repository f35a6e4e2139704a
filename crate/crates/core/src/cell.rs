//! The searchable convolutional cell: a fixed backbone group running in
//! parallel with a DAG of candidate operations.
//!
//! Node 0 is the cell input. Node `j` sums, in this order, the backbone
//! convolution from node `j - 1`, the residual shortcut into `j` (if any),
//! and one operation per incoming DAG edge. Every summand is
//! `act2(op(act1(x)))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NashError, Result};
use crate::layers::{quant_branch, ConvLayer};
use crate::quant::{ActConfig, BitWidthPlan, QuantSpec};
use crate::tensor::{GateGrad, ParamStore, Tape, Var};

/// Candidate operations on a DAG edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Zero,
    MaxPool3,
    Identity,
    Conv1,
    Conv3,
    Conv5,
}

impl OpKind {
    pub const ALL: [OpKind; 6] =
        [OpKind::Zero, OpKind::MaxPool3, OpKind::Identity, OpKind::Conv1, OpKind::Conv3, OpKind::Conv5];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn kernel(self) -> Option<usize> {
        match self {
            OpKind::Conv1 => Some(1),
            OpKind::Conv3 => Some(3),
            OpKind::Conv5 => Some(5),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::MaxPool3 => "max_pool_3x3",
            OpKind::Identity => "identity",
            OpKind::Conv1 => "conv_1x1",
            OpKind::Conv3 => "conv_3x3",
            OpKind::Conv5 => "conv_5x5",
        }
    }
}

fn default_nodes() -> usize {
    5
}

fn default_true() -> bool {
    true
}

/// Channel and stride description of the convolutional group a cell replaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// ResNet-style shortcuts into nodes 2 and 4.
    #[serde(default = "default_true")]
    pub residual: bool,
}

impl GroupSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        GroupSpec { in_channels, out_channels, stride, nodes: 5, residual: true }
    }

    fn validate(&self) -> Result<()> {
        if !(self.stride == 1 || self.stride == 2) {
            return Err(NashError::invalid(format!("group stride must be 1 or 2, got {}", self.stride)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(NashError::invalid("group channels must be positive"));
        }
        if !(2..=5).contains(&self.nodes) {
            return Err(NashError::invalid(format!("cells have 2 to 5 nodes, got {}", self.nodes)));
        }
        Ok(())
    }

    pub fn changes_shape(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }

    /// Only edges leaving the input node cross the group's downsample.
    pub fn edge_changes_shape(&self, from: usize) -> bool {
        from == 0 && self.changes_shape()
    }

    pub fn node_channels(&self, j: usize) -> usize {
        if j == 0 {
            self.in_channels
        } else {
            self.out_channels
        }
    }

    /// All DAG edges `(i, j)` with `i < j`, ordered by target then source.
    pub fn all_edges(&self) -> Vec<(usize, usize)> {
        (1..self.nodes).flat_map(|j| (0..j).map(move |i| (i, j))).collect()
    }

    /// Residual shortcuts `(from, to)`.
    pub fn residual_edges(&self) -> Vec<(usize, usize)> {
        if !self.residual {
            return Vec::new();
        }
        [(0, 2), (2, 4)].into_iter().filter(|&(_, to)| to < self.nodes).collect()
    }
}

/// Allowed candidate ops per DAG edge, in `GroupSpec::all_edges` order.
#[derive(Clone, Debug, PartialEq)]
pub struct OpMask(pub Vec<Vec<OpKind>>);

impl OpMask {
    pub fn uniform(group: &GroupSpec, ops: &[OpKind]) -> Self {
        OpMask(group.all_edges().iter().map(|_| ops.to_vec()).collect())
    }

    pub fn all(group: &GroupSpec) -> Self {
        Self::uniform(group, &OpKind::ALL)
    }
}

/// Per-site quantizers of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellQuant {
    pub backbone_w: QuantSpec,
    pub backbone_act1: QuantSpec,
    pub residual_w: QuantSpec,
    pub residual_act1: QuantSpec,
    pub nas_w: QuantSpec,
    pub nas_act1: QuantSpec,
    pub act2: QuantSpec,
}

impl CellQuant {
    pub fn from_plan(plan: &BitWidthPlan, acts: &ActConfig) -> Result<Self> {
        Ok(CellQuant {
            backbone_w: QuantSpec::weight(plan.backbone_w)?,
            backbone_act1: acts.act1(plan.backbone_a)?,
            residual_w: QuantSpec::weight(plan.residual_w)?,
            residual_act1: acts.act1(plan.residual_a)?,
            nas_w: QuantSpec::weight(plan.nas_w)?,
            nas_act1: acts.act1(plan.nas_a)?,
            act2: acts.act2(plan.residual_a)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub from: usize,
    pub to: usize,
    /// 1x1 projection when the shortcut crosses a shape change.
    pub conv: Option<ConvLayer>,
}

/// One DAG edge with its candidate ops and their weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NasEdge {
    pub from: usize,
    pub to: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub shape_changing: bool,
    pub candidates: Vec<OpKind>,
    pub convs: Vec<Option<ConvLayer>>,
}

impl NasEdge {
    pub fn slot_of(&self, op: OpKind) -> Option<usize> {
        self.candidates.iter().position(|&c| c == op)
    }
}

/// One op (as a candidate slot) per edge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathChoice(pub Vec<usize>);

/// Executions per `(edge, slot)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounters(pub Vec<Vec<u64>>);

impl OpCounters {
    pub fn for_cell(cell: &CellGraph) -> Self {
        OpCounters(cell.edges.iter().map(|e| vec![0; e.candidates.len()]).collect())
    }

    pub fn edge_total(&self, e: usize) -> u64 {
        self.0[e].iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellGraph {
    pub group: GroupSpec,
    pub quant: CellQuant,
    pub backbone: Vec<ConvLayer>,
    pub residuals: Vec<Residual>,
    pub edges: Vec<NasEdge>,
    pub alpha: Vec<Vec<f32>>,
    #[serde(skip)]
    pub alpha_grad: Vec<Vec<f32>>,
}

/// Derivation result for one node `j >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedNode {
    pub pred: usize,
    pub op: OpKind,
}

/// A discretized cell: one predecessor and one op per node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedCell {
    /// Entry `j - 1` belongs to node `j`.
    pub nodes: Vec<DerivedNode>,
    pub plan: BitWidthPlan,
    pub group_spec: GroupSpec,
}

impl DerivedCell {
    pub fn is_shape_changing(&self, node: &DerivedNode) -> bool {
        self.group_spec.edge_changes_shape(node.pred)
    }

    pub fn count_op(&self, op: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op == op).count()
    }

    pub fn shape_changing_maxpools(&self) -> usize {
        self.nodes.iter().filter(|n| n.op == OpKind::MaxPool3 && self.is_shape_changing(n)).count()
    }
}

pub fn softmax(v: &[f32]) -> Vec<f32> {
    let m = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl CellGraph {
    /// Builds a search cell over every DAG edge. Identity is dropped on
    /// shape-changing edges since it cannot change the channel count.
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: GroupSpec,
        op_mask: &OpMask,
        quant: CellQuant,
        rng: &mut R,
    ) -> Result<Self> {
        group.validate()?;
        let edges = group.all_edges();
        if op_mask.0.len() != edges.len() {
            return Err(NashError::invalid(format!(
                "op mask covers {} edges, cell has {}",
                op_mask.0.len(),
                edges.len()
            )));
        }
        let spec: Vec<(usize, usize, Vec<OpKind>)> = edges
            .into_iter()
            .zip(&op_mask.0)
            .map(|((i, j), ops)| {
                let mut ops: Vec<OpKind> = ops
                    .iter()
                    .copied()
                    .filter(|&op| !(op == OpKind::Identity && group.edge_changes_shape(i)))
                    .collect();
                ops.sort();
                ops.dedup();
                (i, j, ops)
            })
            .collect();
        if let Some((i, j, _)) = spec.iter().find(|(_, _, ops)| ops.is_empty()) {
            return Err(NashError::invalid(format!("edge ({i},{j}) has no allowed candidate op")));
        }
        Self::with_edges(store, prefix, group, spec, quant, rng)
    }

    /// Builds the fixed cell of a derived architecture.
    pub fn from_derived<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        derived: &DerivedCell,
        quant: CellQuant,
        rng: &mut R,
    ) -> Result<Self> {
        let group = derived.group_spec;
        group.validate()?;
        if derived.nodes.len() != group.nodes - 1 {
            return Err(NashError::invalid(format!(
                "derived cell lists {} nodes, group has {}",
                derived.nodes.len(),
                group.nodes - 1
            )));
        }
        let mut spec = Vec::new();
        for (j, node) in (1..).zip(&derived.nodes) {
            if node.pred >= j {
                return Err(NashError::invalid(format!("node {j} has non-causal predecessor {}", node.pred)));
            }
            if node.op == OpKind::Zero {
                return Err(NashError::invalid(format!("node {j} keeps a zero op")));
            }
            if node.op == OpKind::Identity && group.edge_changes_shape(node.pred) {
                return Err(NashError::invalid(format!("identity cannot change shape on ({},{j})", node.pred)));
            }
            spec.push((node.pred, j, vec![node.op]));
        }
        Self::with_edges(store, prefix, group, spec, quant, rng)
    }

    /// Backbone plus residual shortcuts, no DAG edges.
    pub fn backbone_only<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: GroupSpec,
        quant: CellQuant,
        rng: &mut R,
    ) -> Result<Self> {
        group.validate()?;
        Self::with_edges(store, prefix, group, Vec::new(), quant, rng)
    }

    fn with_edges<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: GroupSpec,
        edges: Vec<(usize, usize, Vec<OpKind>)>,
        quant: CellQuant,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = (1..group.nodes)
            .map(|j| {
                let (in_c, stride) = if j == 1 { (group.in_channels, group.stride) } else { (group.out_channels, 1) };
                ConvLayer::new(
                    store,
                    format!("{prefix}.backbone.{j}"),
                    in_c,
                    group.out_channels,
                    3,
                    stride,
                    quant.backbone_w,
                    rng,
                )
            })
            .collect();
        let residuals = group
            .residual_edges()
            .into_iter()
            .map(|(from, to)| {
                let conv = group.edge_changes_shape(from).then(|| {
                    ConvLayer::new(
                        store,
                        format!("{prefix}.residual.{from}_{to}"),
                        group.node_channels(from),
                        group.out_channels,
                        1,
                        group.stride,
                        quant.residual_w,
                        rng,
                    )
                });
                Residual { from, to, conv }
            })
            .collect();
        let edges: Vec<NasEdge> = edges
            .into_iter()
            .map(|(from, to, candidates)| {
                let shape_changing = group.edge_changes_shape(from);
                let in_c = group.node_channels(from);
                let stride = if shape_changing { group.stride } else { 1 };
                let convs = candidates
                    .iter()
                    .map(|op| {
                        op.kernel().map(|k| {
                            ConvLayer::new(
                                store,
                                format!("{prefix}.edge{from}_{to}.{}", op.name()),
                                in_c,
                                group.out_channels,
                                k,
                                stride,
                                quant.nas_w,
                                rng,
                            )
                        })
                    })
                    .collect();
                NasEdge { from, to, in_c, out_c: group.out_channels, stride, shape_changing, candidates, convs }
            })
            .collect();
        let alpha: Vec<Vec<f32>> = edges.iter().map(|e| vec![0.0; e.candidates.len()]).collect();
        let alpha_grad = alpha.clone();
        Ok(CellGraph { group, quant, backbone, residuals, edges, alpha, alpha_grad })
    }

    pub fn candidate_counts(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.candidates.len()).collect()
    }

    pub fn probabilities(&self, edge: usize) -> Vec<f32> {
        softmax(&self.alpha[edge])
    }

    /// Path that activates slot 0 on every edge (the only slot in a derived cell).
    pub fn fixed_path(&self) -> PathChoice {
        PathChoice(vec![0; self.edges.len()])
    }

    /// Draws one op per edge from `softmax(alpha)`.
    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PathChoice> {
        let mut slots = Vec::with_capacity(self.edges.len());
        for (e, a) in self.alpha.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(NashError::state(format!("alpha on edge {e} is not finite")));
            }
            let p = softmax(a);
            let u: f32 = rng.gen();
            let mut acc = 0.0f32;
            let mut pick = p.len() - 1;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            // never land on a zero-probability slot through rounding
            while p[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            slots.push(pick);
        }
        Ok(PathChoice(slots))
    }

    fn edge_op(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        edge: &NasEdge,
        slot: usize,
        x: Var,
    ) -> Result<Option<Var>> {
        let op = edge.candidates[slot];
        let q = &self.quant;
        let y = match op {
            OpKind::Zero => return Ok(None),
            OpKind::Identity => quant_branch(tape, x, &q.nas_act1, &q.act2, |_, a| Ok(a))?,
            OpKind::MaxPool3 => quant_branch(tape, x, &q.nas_act1, &q.act2, |t, a| {
                let p = t.maxpool2d(a, 3, edge.stride, 1)?;
                if edge.in_c != edge.out_c {
                    t.replicate_channels(p, edge.out_c)
                } else {
                    Ok(p)
                }
            })?,
            _ => {
                let conv = edge.convs[slot].as_ref().expect("conv candidates carry weights");
                quant_branch(tape, x, &q.nas_act1, &q.act2, |t, a| conv.forward(t, store, a))?
            }
        };
        Ok(Some(y))
    }

    /// Forward through the cell with `path` selecting one op per edge.
    ///
    /// With `gate_base = Some(b)` each active op output is wrapped in a gate
    /// tagged `b + edge` so architecture gradients can be read off the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        path: &PathChoice,
        x: Var,
        gate_base: Option<usize>,
        mut counters: Option<&mut OpCounters>,
    ) -> Result<Var> {
        if path.0.len() != self.edges.len() {
            return Err(NashError::invalid(format!("path has {} slots for {} edges", path.0.len(), self.edges.len())));
        }
        let expect_c = self.group.in_channels;
        if tape.shape(x).get(1) != Some(&expect_c) {
            return Err(NashError::invalid(format!("cell expects {expect_c} input channels, got {:?}", tape.shape(x))));
        }
        let q = &self.quant;
        let mut nodes: Vec<Var> = vec![x];
        for j in 1..self.group.nodes {
            let mut terms = Vec::new();
            let conv = &self.backbone[j - 1];
            let prev = nodes[j - 1];
            terms.push(quant_branch(tape, prev, &q.backbone_act1, &q.act2, |t, a| conv.forward(t, store, a))?);
            for r in self.residuals.iter().filter(|r| r.to == j) {
                let src = nodes[r.from];
                let y = match &r.conv {
                    Some(c) => quant_branch(tape, src, &q.residual_act1, &q.act2, |t, a| c.forward(t, store, a))?,
                    None => quant_branch(tape, src, &q.residual_act1, &q.act2, |_, a| Ok(a))?,
                };
                terms.push(y);
            }
            for (e, edge) in self.edges.iter().enumerate().filter(|(_, e)| e.to == j) {
                let slot = path.0[e];
                if slot >= edge.candidates.len() {
                    return Err(NashError::invalid(format!("slot {slot} out of range on edge {e}")));
                }
                if let Some(c) = counters.as_deref_mut() {
                    c.0[e][slot] += 1;
                }
                if let Some(mut y) = self.edge_op(tape, store, edge, slot, nodes[edge.from])? {
                    if let Some(base) = gate_base {
                        y = tape.gate(y, base + e, slot);
                    }
                    terms.push(y);
                }
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                if tape.shape(acc) != tape.shape(t) {
                    return Err(NashError::state(format!(
                        "shape map bug at node {j}: {:?} vs {:?}",
                        tape.shape(acc),
                        tape.shape(t)
                    )));
                }
                acc = tape.add(acc, t)?;
            }
            nodes.push(acc);
        }
        Ok(*nodes.last().expect("cell has at least two nodes"))
    }

    /// Accumulates architecture gradients from the sampled gates, treating the
    /// hard one-hot sample as `softmax(alpha)` in the backward pass:
    /// `d/d alpha_m += g_k * p_k * (delta_km - p_m)`.
    pub fn update_alpha_gradients(&mut self, gates: &[GateGrad], gate_base: usize) {
        if self.alpha_grad.len() != self.alpha.len() {
            self.alpha_grad = self.alpha.iter().map(|a| vec![0.0; a.len()]).collect();
        }
        for g in gates {
            if g.edge < gate_base || g.edge >= gate_base + self.edges.len() {
                continue;
            }
            let e = g.edge - gate_base;
            let p = softmax(&self.alpha[e]);
            let k = g.slot;
            for (m, pm) in p.iter().enumerate() {
                let delta = if m == k { 1.0 } else { 0.0 };
                self.alpha_grad[e][m] += g.grad * p[k] * (delta - pm);
            }
        }
    }

    /// Plain gradient step on alpha, then clears the accumulators.
    pub fn step_alpha(&mut self, lr: f32) {
        for (a, g) in self.alpha.iter_mut().zip(&mut self.alpha_grad) {
            for (av, gv) in a.iter_mut().zip(g.iter_mut()) {
                *av -= lr * *gv;
                *gv = 0.0;
            }
        }
    }

    pub fn alpha_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.alpha.iter().flatten() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// `(softmax mass, pred, op)` for every non-zero candidate into node `j`,
    /// best first; ties resolved by lowest `(pred, op index)`.
    pub fn ranked_candidates(&self, j: usize) -> Vec<(f32, usize, OpKind)> {
        let mut out = Vec::new();
        for (e, edge) in self.edges.iter().enumerate().filter(|(_, e)| e.to == j) {
            let p = self.probabilities(e);
            for (k, &op) in edge.candidates.iter().enumerate() {
                if op != OpKind::Zero {
                    out.push((p[k], edge.from, op));
                }
            }
        }
        out.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        out
    }

    /// Keeps the highest-mass non-zero `(pred, op)` per node.
    pub fn derive(&self, plan: BitWidthPlan) -> Result<DerivedCell> {
        let mut nodes = Vec::new();
        for j in 1..self.group.nodes {
            let best = self.ranked_candidates(j).into_iter().next().ok_or_else(|| {
                NashError::state(format!("node {j} only offers the zero op"))
            })?;
            nodes.push(DerivedNode { pred: best.1, op: best.2 });
        }
        Ok(DerivedCell { nodes, plan, group_spec: self.group })
    }
}
