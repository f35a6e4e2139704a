//! PE/SIMD folding and the deterministic cycles / BRAM / LUT model.
//!
//! For a matrix-vector layer with `MH` output neurons, `MW` synapses per
//! neuron and an `OFM_H x OFM_W` output map:
//!
//! * cycles = OFM_H * OFM_W * (MH / PE) * (MW / SIMD)
//! * weight memory per PE lane: depth (MH / PE) * (MW / SIMD), width SIMD * wbits
//! * BRAM = PE * ceil(width / 36) * ceil(depth / 1024)   (36 Kb blocks, 1024 x 36)
//! * LUT = k1 * PE * SIMD * wbits * abits + k2 * PE * thresholds * obits
//!
//! Every other node costs one cycle per output element and no memory.

use serde::{Deserialize, Serialize};

use super::{GraphIR, IrOp};
use crate::error::{NashError, Result};

pub fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n).max(1)).rev().find(|d| n % d == 0).unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FoldTarget {
    /// Largest PE dividing MH and SIMD dividing MW within the caps.
    MaxParallel { cap_pe: usize, cap_simd: usize },
    /// Largest PE * SIMD not above `budget`, preferring wider SIMD on ties.
    Budget { cap_pe: usize, cap_simd: usize, budget: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFold {
    pub node: usize,
    pub name: String,
    pub mh: usize,
    pub mw: usize,
    pub pe: usize,
    pub simd: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldingConfig {
    pub layers: Vec<LayerFold>,
}

impl FoldingConfig {
    pub fn for_node(&self, node: usize) -> Option<&LayerFold> {
        self.layers.iter().find(|l| l.node == node)
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn choose(mh: usize, mw: usize, target: FoldTarget) -> (usize, usize) {
    match target {
        FoldTarget::MaxParallel { cap_pe, cap_simd } => {
            (largest_divisor_at_most(mh, cap_pe), largest_divisor_at_most(mw, cap_simd))
        }
        FoldTarget::Budget { cap_pe, cap_simd, budget } => {
            let mut best = (1, 1);
            for pe in divisors(mh).into_iter().filter(|&p| p <= cap_pe) {
                for simd in divisors(mw).into_iter().filter(|&s| s <= cap_simd) {
                    if pe * simd > budget.max(1) {
                        continue;
                    }
                    let better = pe * simd > best.0 * best.1 || (pe * simd == best.0 * best.1 && simd > best.1);
                    if better {
                        best = (pe, simd);
                    }
                }
            }
            best
        }
    }
}

/// `(MH, MW)` of a matrix-vector node, `None` for everything else.
pub fn matrix_dims(op: &IrOp) -> Option<(usize, usize)> {
    match *op {
        IrOp::Conv { mh, c, k, .. } => Some((mh, c * k * k)),
        IrOp::Linear { mh, mw, .. } => Some((mh, mw)),
        _ => None,
    }
}

pub fn fold_layers(g: &GraphIR, target: FoldTarget) -> FoldingConfig {
    let layers = g
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(i, n)| {
            matrix_dims(&n.op).map(|(mh, mw)| {
                let (pe, simd) = choose(mh, mw, target);
                LayerFold { node: i, name: n.name.clone(), mh, mw, pe, simd }
            })
        })
        .collect();
    FoldingConfig { layers }
}

/// Calibration constants and clock of the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub clock_mhz: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { clock_mhz: 100.0, kappa1: 0.35, kappa2: 0.08 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEstimate {
    pub node: usize,
    pub name: String,
    pub kind: String,
    pub cycles: u64,
    pub bram: u64,
    pub lut: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub layers: Vec<LayerEstimate>,
    pub total_cycles: u64,
    pub max_cycles: u64,
    pub bram: u64,
    pub lut: f64,
    pub clock_mhz: f64,
    pub latency_ms: f64,
    pub throughput_fps: f64,
}

/// Bits of the activation feeding node `id`, found by walking back through
/// scale/offset nodes to the producing threshold node. Graph inputs count as 8 bit.
fn input_bits(g: &GraphIR, id: usize) -> u8 {
    let mut cur = g.nodes[id].inputs[0];
    loop {
        match &g.nodes[cur].op {
            IrOp::MultiThreshold { obits, .. } => return *obits,
            IrOp::Mul { .. } | IrOp::AddConst { .. } | IrOp::MaxPool { .. } | IrOp::Concat { .. } => {
                cur = g.nodes[cur].inputs[0]
            }
            _ => return 8,
        }
    }
}

/// `(threshold count, output bits)` of the threshold node fused behind `id`,
/// looking through its scale node.
fn fused_threshold(g: &GraphIR, id: usize) -> (usize, u8) {
    let mut frontier = vec![id];
    for _ in 0..3 {
        let mut next = Vec::new();
        for f in frontier {
            for u in g.consumers(f) {
                match &g.nodes[u].op {
                    IrOp::MultiThreshold { thresholds, obits, .. } => return (thresholds.len(), *obits),
                    IrOp::Mul { .. } | IrOp::AddConst { .. } => next.push(u),
                    _ => {}
                }
            }
        }
        frontier = next;
    }
    (0, 0)
}

pub fn estimate_resources(g: &GraphIR, folding: &FoldingConfig, model: &CostModel) -> Result<ResourceEstimate> {
    if !(model.clock_mhz > 0.0) {
        return Err(NashError::invalid("clock must be positive"));
    }
    let mut layers = Vec::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if n.op == IrOp::Input {
            continue;
        }
        let est = match matrix_dims(&n.op) {
            Some((mh, mw)) => {
                let f = folding
                    .for_node(i)
                    .ok_or_else(|| NashError::invalid(format!("no folding for layer {i} ({})", n.name)))?;
                if mh % f.pe != 0 || mw % f.simd != 0 {
                    return Err(NashError::invalid(format!(
                        "folding of {} violates divisibility: MH {mh} PE {} MW {mw} SIMD {}",
                        n.name, f.pe, f.simd
                    )));
                }
                let wbits = match n.op {
                    IrOp::Conv { wbits, .. } | IrOp::Linear { wbits, .. } => wbits as u64,
                    _ => unreachable!(),
                };
                let ofm: u64 = if n.shape.len() == 3 { (n.shape[1] * n.shape[2]) as u64 } else { 1 };
                let (pe, simd) = (f.pe as u64, f.simd as u64);
                let depth = (mh as u64 / pe) * (mw as u64 / simd);
                let width = simd * wbits;
                let abits = input_bits(g, i) as f64;
                let (thr, obits) = fused_threshold(g, i);
                LayerEstimate {
                    node: i,
                    name: n.name.clone(),
                    kind: n.op.kind().into(),
                    cycles: ofm * depth,
                    bram: pe * width.div_ceil(36) * depth.div_ceil(1024),
                    lut: model.kappa1 * (pe * simd * wbits) as f64 * abits
                        + model.kappa2 * pe as f64 * thr as f64 * obits as f64,
                }
            }
            None => LayerEstimate {
                node: i,
                name: n.name.clone(),
                kind: n.op.kind().into(),
                cycles: n.shape.iter().product::<usize>() as u64,
                bram: 0,
                lut: 0.0,
            },
        };
        layers.push(est);
    }
    let total_cycles = layers.iter().map(|l| l.cycles).sum::<u64>();
    let max_cycles = layers.iter().map(|l| l.cycles).max().unwrap_or(0);
    let bram = layers.iter().map(|l| l.bram).sum();
    let lut = layers.iter().map(|l| l.lut).sum();
    let hz = model.clock_mhz * 1e6;
    Ok(ResourceEstimate {
        layers,
        total_cycles,
        max_cycles,
        bram,
        lut,
        clock_mhz: model.clock_mhz,
        latency_ms: total_cycles as f64 / hz * 1e3,
        throughput_fps: if max_cycles > 0 { hz / max_cycles as f64 } else { f64::INFINITY },
    })
}
