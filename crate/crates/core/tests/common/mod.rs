//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod grads;
pub mod graphs;

use nash_core::cell::{DerivedCell, DerivedNode, OpKind};
use nash_core::model::NetworkSpec;
use nash_core::quant::resolve_plan;
use nash_core::search::Variant;
use nash_core::train::{ModelArch, ARCH_SCHEMA_VERSION};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A derived architecture with uniformly drawn predecessors and legal ops.
pub fn random_arch(variant: Variant, wbits: u8, abits: u8, rng: &mut ChaCha8Rng) -> ModelArch {
    let spec = NetworkSpec::default();
    let plan = resolve_plan(variant, wbits, abits).unwrap();
    let cells = if variant == Variant::Original {
        vec![None; spec.groups.len()]
    } else {
        spec.group_specs()
            .into_iter()
            .map(|g| {
                let nodes = (1..g.nodes)
                    .map(|j| {
                        let pred = rng.gen_range(0..j);
                        let mut ops = vec![OpKind::Conv1, OpKind::Conv3, OpKind::Conv5];
                        if variant != Variant::V4 {
                            ops.push(OpKind::MaxPool3);
                        }
                        if !g.edge_changes_shape(pred) {
                            ops.push(OpKind::Identity);
                        }
                        DerivedNode { pred, op: *ops.choose(rng).unwrap() }
                    })
                    .collect();
                Some(DerivedCell { nodes, plan, group_spec: g })
            })
            .collect()
    };
    ModelArch {
        schema_version: ARCH_SCHEMA_VERSION,
        network: spec,
        variant,
        plan,
        cells,
        init_seed: rng.gen(),
    }
}

/// Draws `configs` random alpha settings for every cell of the variant's search
/// network and checks the derived cells against the variant's max-pool rule.
/// Returns the number of v1 replacements seen.
pub fn variant_soundness(variant: Variant, configs: usize, seed: u64) -> Result<usize, String> {
    use nash_core::search::{build_search_network, derive_for_variant, AuditEvent};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    let spec = NetworkSpec::default();
    let plan = resolve_plan(variant, 1, 1).map_err(|e| e.to_string())?;
    let (mut net, _) = build_search_network(&spec, variant, plan, seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = Normal::new(0.0f32, 3.0).unwrap();
    let mut replaced = 0;
    for k in 0..configs {
        for cell in &mut net.cells {
            for a in cell.alpha.iter_mut().flatten() {
                *a = spread.sample(&mut rng);
            }
            // every so often make a shape-changing max pool the clear favourite
            if k % 3 == 0 {
                for (e, edge) in cell.edges.iter().enumerate() {
                    if let (true, Some(s)) = (edge.shape_changing, edge.slot_of(OpKind::MaxPool3)) {
                        cell.alpha[e][s] = 20.0;
                    }
                }
            }
            let (d, events) = derive_for_variant(cell, variant, plan).map_err(|e| e.to_string())?;
            if d.nodes.iter().any(|n| n.op == OpKind::Zero) {
                return Err(format!("{variant:?}: derived cell keeps a zero op"));
            }
            let bad = match variant {
                Variant::V4 => d.count_op(OpKind::MaxPool3),
                _ => d.shape_changing_maxpools(),
            };
            if bad > 0 {
                return Err(format!("{variant:?} config {k}: {bad} forbidden max pools in {:?}", d.nodes));
            }
            for ev in &events {
                match (variant, ev) {
                    (Variant::V1, AuditEvent::Replaced { from: OpKind::MaxPool3, to: OpKind::Conv1, .. }) => replaced += 1,
                    (Variant::V1, other) => return Err(format!("v1 audit holds {other:?}")),
                    (Variant::V4, other) if other.involves_maxpool() => return Err(format!("v4 audit holds {other:?}")),
                    _ => {}
                }
            }
        }
    }
    Ok(replaced)
}
