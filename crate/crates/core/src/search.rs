//! Alternating architecture/weight search and the four rules for getting
//! shape-changing max pooling out of the derived cell.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{CellGraph, DerivedCell, DerivedNode, OpKind, OpMask, PathChoice};
use crate::data::Dataset;
use crate::error::{NashError, Result};
use crate::model::{CellPlan, Network, NetworkSpec, GATE_STRIDE};
use crate::quant::{resolve_plan, BitWidthPlan};
use crate::tensor::{Sgd, Tape, Tensor};

pub const SEARCH_SCHEMA_VERSION: u32 = 1;

/// `Original` is the backbone-only baseline; it is never searched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Original,
    V1,
    V2,
    V3,
    V4,
}

impl Variant {
    pub const NASH: [Variant; 4] = [Variant::V1, Variant::V2, Variant::V3, Variant::V4];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Original => "o",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = NashError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "o" | "original" => Ok(Variant::Original),
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            "v4" => Ok(Variant::V4),
            _ => Err(NashError::invalid(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr_w: f32,
    pub lr_alpha: f32,
    pub momentum: f32,
    pub seed: u64,
    pub variant: Variant,
    /// Fraction of the search data used for weight updates; the rest drives alpha.
    pub split: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 2,
            batches_per_epoch: 8,
            batch_size: 16,
            lr_w: 0.05,
            lr_alpha: 0.5,
            momentum: 0.9,
            seed: 0,
            variant: Variant::V1,
            split: 0.5,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(NashError::Config("search epochs, batches and batch size must be >= 1".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(NashError::Config(format!("search split {} outside (0, 1)", self.split)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.lr_w < 0.0 || self.lr_alpha < 0.0 {
            return Err(NashError::Config("learning rates must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.variant == Variant::Original {
            return Err(NashError::Config("the original baseline has nothing to search".into()));
        }
        Ok(())
    }
}

/// What a variant rule did to the search space or the derived cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    /// v1: a shape-changing op replaced after derivation.
    Replaced { node: usize, pred: usize, from: OpKind, to: OpKind },
    /// v2: a candidate removed from an edge before the search.
    Masked { from: usize, to: usize, op: OpKind },
    /// v3: a ranked candidate skipped during derivation.
    Rejected { node: usize, pred: usize, op: OpKind, mass: f32 },
}

impl AuditEvent {
    pub fn involves_maxpool(&self) -> bool {
        match *self {
            AuditEvent::Replaced { from, to, .. } => from == OpKind::MaxPool3 || to == OpKind::MaxPool3,
            AuditEvent::Masked { op, .. } | AuditEvent::Rejected { op, .. } => op == OpKind::MaxPool3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub cell: usize,
    #[serde(flatten)]
    pub event: AuditEvent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub schema_version: u32,
    pub variant: Variant,
    pub cells: Vec<DerivedCell>,
    /// `[epoch][cell][edge][slot]` alpha snapshots taken at the end of each epoch.
    pub alpha_history: Vec<Vec<Vec<Vec<f32>>>>,
    /// Candidate ops per `[cell][edge]`, matching the alpha layout.
    pub candidates: Vec<Vec<Vec<OpKind>>>,
    pub val_loss: Vec<f32>,
    pub audit: Vec<AuditEntry>,
}

/// Seeded shuffle split into `(train, val)` with `frac` of the samples in `train`.
pub fn split_dataset(d: &Dataset, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    d.split(frac, seed)
}

/// Candidate list with max pooling removed everywhere.
pub fn variant_v4_ops() -> Vec<OpKind> {
    OpKind::ALL.iter().copied().filter(|&op| op != OpKind::MaxPool3).collect()
}

/// Removes max pooling from every shape-changing edge of a search cell.
pub fn variant_v2_mask(cell: &CellGraph) -> (CellGraph, Vec<AuditEvent>) {
    let mut out = cell.clone();
    let mut audit = Vec::new();
    for (e, edge) in out.edges.iter_mut().enumerate() {
        if !edge.shape_changing {
            continue;
        }
        if let Some(slot) = edge.slot_of(OpKind::MaxPool3) {
            if edge.candidates.len() == 1 {
                continue;
            }
            edge.candidates.remove(slot);
            edge.convs.remove(slot);
            out.alpha[e].remove(slot);
            if e < out.alpha_grad.len() {
                out.alpha_grad[e].remove(slot);
            }
            audit.push(AuditEvent::Masked { from: edge.from, to: edge.to, op: OpKind::MaxPool3 });
        }
    }
    (out, audit)
}

/// Replaces every shape-changing max pool in a derived cell with a 1x1 convolution.
pub fn variant_v1(derived: &DerivedCell) -> (DerivedCell, Vec<AuditEvent>) {
    let mut out = derived.clone();
    let mut audit = Vec::new();
    for (j, node) in (1..).zip(out.nodes.iter_mut()) {
        if node.op == OpKind::MaxPool3 && derived.group_spec.edge_changes_shape(node.pred) {
            audit.push(AuditEvent::Replaced { node: j, pred: node.pred, from: OpKind::MaxPool3, to: OpKind::Conv1 });
            node.op = OpKind::Conv1;
        }
    }
    (out, audit)
}

/// Per node, walks candidates by descending softmax mass and keeps the first
/// that is not a shape-changing max pool.
pub fn variant_v3_reject(cell: &CellGraph, plan: BitWidthPlan) -> Result<(DerivedCell, Vec<AuditEvent>)> {
    let mut nodes = Vec::new();
    let mut audit = Vec::new();
    for j in 1..cell.group.nodes {
        let mut pick = None;
        for (mass, pred, op) in cell.ranked_candidates(j) {
            if op == OpKind::MaxPool3 && cell.group.edge_changes_shape(pred) {
                audit.push(AuditEvent::Rejected { node: j, pred, op, mass });
                continue;
            }
            pick = Some(DerivedNode { pred, op });
            break;
        }
        nodes.push(pick.ok_or_else(|| NashError::state(format!("node {j} has no acceptable candidate")))?);
    }
    Ok((DerivedCell { nodes, plan, group_spec: cell.group }, audit))
}

/// Builds the search network for a variant, with its pre-search audit events.
pub fn build_search_network(
    spec: &NetworkSpec,
    variant: Variant,
    plan: BitWidthPlan,
    seed: u64,
) -> Result<(Network, Vec<AuditEntry>)> {
    let groups = spec.group_specs();
    let plans = groups
        .iter()
        .map(|g| match variant {
            Variant::V4 => CellPlan::Search(OpMask::uniform(g, &variant_v4_ops())),
            _ => CellPlan::Search(OpMask::all(g)),
        })
        .collect();
    let mut net = Network::build(spec, plan, plans, seed)?;
    let mut audit = Vec::new();
    if variant == Variant::V2 {
        for (c, cell) in net.cells.iter_mut().enumerate() {
            let (masked, events) = variant_v2_mask(cell);
            *cell = masked;
            audit.extend(events.into_iter().map(|event| AuditEntry { cell: c, event }));
        }
    }
    Ok((net, audit))
}

fn check_finite(loss: f32, what: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(NashError::NumericAbort(format!("{what} loss is {loss} at search step {step}")))
    }
}

pub fn sample_paths(net: &Network, rng: &mut ChaCha8Rng) -> Result<Vec<PathChoice>> {
    net.cells.iter().map(|c| c.sample_path(rng)).collect()
}

/// Architecture half of a search step: weights frozen, alpha updated from the
/// validation loss. Returns the loss.
pub fn alpha_phase(net: &mut Network, x: &Tensor, labels: &[usize], lr_alpha: f32, rng: &mut ChaCha8Rng) -> Result<f32> {
    let paths = sample_paths(net, rng)?;
    let mut tape = Tape::new();
    let logits = net.forward(&mut tape, x, &paths, true, None)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    for (c, cell) in net.cells.iter_mut().enumerate() {
        cell.update_alpha_gradients(grads.gates(), c * GATE_STRIDE);
        cell.step_alpha(lr_alpha);
    }
    Ok(value)
}

/// Weight half of a search step: alpha frozen, weights updated from the training loss.
pub fn weight_phase(net: &mut Network, x: &Tensor, labels: &[usize], opt: &mut Sgd, rng: &mut ChaCha8Rng) -> Result<f32> {
    let paths = sample_paths(net, rng)?;
    let mut tape = Tape::new();
    let logits = net.forward(&mut tape, x, &paths, false, None)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    grads.accumulate_into(&mut net.store);
    opt.step(&mut net.store);
    Ok(value)
}

/// One alternating step; returns `(val_loss, train_loss)`.
pub fn search_step(
    net: &mut Network,
    val_batch: (&Tensor, &[usize]),
    train_batch: (&Tensor, &[usize]),
    lr_alpha: f32,
    opt: &mut Sgd,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, f32)> {
    if val_batch.1.is_empty() || train_batch.1.is_empty() {
        return Err(NashError::invalid("search batches must be nonempty"));
    }
    let v = alpha_phase(net, val_batch.0, val_batch.1, lr_alpha, rng)?;
    check_finite(v, "validation", 0)?;
    let t = weight_phase(net, train_batch.0, train_batch.1, opt, rng)?;
    check_finite(t, "training", 0)?;
    Ok((v, t))
}

/// Discretizes a searched cell with the variant's rule. v2 and v4 constrain
/// the search space instead, so they use the plain argmax here.
pub fn derive_for_variant(cell: &CellGraph, variant: Variant, plan: BitWidthPlan) -> Result<(DerivedCell, Vec<AuditEvent>)> {
    match variant {
        Variant::V1 => Ok(variant_v1(&cell.derive(plan)?)),
        Variant::V3 => variant_v3_reject(cell, plan),
        Variant::V2 | Variant::V4 => Ok((cell.derive(plan)?, Vec::new())),
        Variant::Original => Err(NashError::invalid("the original baseline has no cell to derive")),
    }
}

fn draw(d: &Dataset, batch: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let idx = sample(rng, d.len(), batch.min(d.len())).into_vec();
    d.batch(&idx)
}

/// Runs `epochs * batches_per_epoch` alternating steps on `data`, then
/// discretizes every cell with the variant's rule.
pub fn run_search(cfg: &SearchConfig, spec: &NetworkSpec, plan: BitWidthPlan, data: &Dataset) -> Result<SearchResult> {
    cfg.validate()?;
    let (mut net, mut audit) = build_search_network(spec, cfg.variant, plan, cfg.seed)?;
    let (train, val) = split_dataset(data, cfg.split, cfg.seed ^ 0x5eed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Sgd::new(cfg.lr_w, cfg.momentum);
    let mut alpha_history = Vec::with_capacity(cfg.epochs);
    let mut val_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        let mut sum = 0.0f32;
        for _ in 0..cfg.batches_per_epoch {
            let (vx, vy) = draw(&val, cfg.batch_size, &mut rng);
            let (tx, ty) = draw(&train, cfg.batch_size, &mut rng);
            let v = alpha_phase(&mut net, &vx, &vy, cfg.lr_alpha, &mut rng)?;
            check_finite(v, "validation", step)?;
            let t = weight_phase(&mut net, &tx, &ty, &mut opt, &mut rng)?;
            check_finite(t, "training", step)?;
            sum += v;
            step += 1;
        }
        val_loss.push(sum / cfg.batches_per_epoch as f32);
        alpha_history.push(net.cells.iter().map(|c| c.alpha.clone()).collect());
    }

    let mut cells = Vec::with_capacity(net.cells.len());
    for (c, cell) in net.cells.iter().enumerate() {
        let (derived, events) = derive_for_variant(cell, cfg.variant, plan)?;
        audit.extend(events.into_iter().map(|event| AuditEntry { cell: c, event }));
        cells.push(derived);
    }
    Ok(SearchResult {
        schema_version: SEARCH_SCHEMA_VERSION,
        variant: cfg.variant,
        cells,
        alpha_history,
        candidates: net.cells.iter().map(|c| c.edges.iter().map(|e| e.candidates.clone()).collect()).collect(),
        val_loss,
        audit,
    })
}

/// Convenience: resolve the plan from a wXaY pair and search.
pub fn run_search_bits(cfg: &SearchConfig, spec: &NetworkSpec, wbits: u8, abits: u8, data: &Dataset) -> Result<SearchResult> {
    let plan = resolve_plan(cfg.variant, wbits, abits)?;
    run_search(cfg, spec, plan, data)
}
