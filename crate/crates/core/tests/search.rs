mod common;

use common::variant_soundness;
use nash_core::cell::{CellGraph, DerivedCell, DerivedNode, GroupSpec, OpKind, OpMask};
use nash_core::data::{synth_dataset, Dataset, SynthSpec};
use nash_core::model::{GroupCfg, NetworkSpec};
use nash_core::quant::resolve_plan;
use nash_core::search::{
    alpha_phase, build_search_network, derive_for_variant, run_search, search_step, split_dataset, variant_v1,
    variant_v2_mask, variant_v3_reject, variant_v4_ops, weight_phase, AuditEvent, SearchConfig, Variant,
};
use nash_core::tensor::{ParamStore, Sgd};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synth(classes: usize, n: usize, seed: u64) -> Dataset {
    synth_dataset(&SynthSpec { classes, n_per_class: n, hw: 16, channels: 3, noise: 0.1 }, seed).unwrap()
}

#[test]
fn split_is_a_seeded_partition() {
    let d = synth(4, 25, 0);
    let (a, b) = split_dataset(&d, 0.5, 9).unwrap();
    assert_eq!((a.len(), b.len()), (50, 50));
    let (a2, b2) = split_dataset(&d, 0.5, 9).unwrap();
    assert_eq!((a.labels.clone(), b.labels.clone()), (a2.labels, b2.labels));
    // union of the halves is the original multiset of images
    let key = |ds: &Dataset| -> Vec<Vec<u32>> {
        let per = ds.images.numel() / ds.len();
        ds.images.data.chunks(per).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect()
    };
    let mut all = key(&a);
    all.extend(key(&b));
    all.sort();
    let mut want = key(&d);
    want.sort();
    assert_eq!(all, want);
    assert!(split_dataset(&d.subset(&[0]), 0.5, 0).is_err());
}

fn search_net(variant: Variant, seed: u64) -> nash_core::model::Network {
    let spec = NetworkSpec { classes: 2, ..NetworkSpec::default() };
    build_search_network(&spec, variant, resolve_plan(variant, 1, 1).unwrap(), seed).unwrap().0
}

#[test]
fn phases_touch_only_their_own_parameters() {
    let d = synth(2, 8, 1);
    let (x, y) = d.batch(&(0..8).collect::<Vec<_>>());
    let mut net = search_net(Variant::V1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut opt = Sgd::new(0.05, 0.9);
    for _ in 0..3 {
        let (w, a) = (net.store.checksum(), net.alpha_checksum());
        alpha_phase(&mut net, &x, &y, 0.5, &mut rng).unwrap();
        assert_eq!(net.store.checksum(), w);
        assert_ne!(net.alpha_checksum(), a);
        let a = net.alpha_checksum();
        weight_phase(&mut net, &x, &y, &mut opt, &mut rng).unwrap();
        assert_eq!(net.alpha_checksum(), a);
        assert_ne!(net.store.checksum(), w);
    }

    let (w, a) = (net.store.checksum(), net.alpha_checksum());
    let mut frozen = Sgd::new(0.0, 0.0);
    search_step(&mut net, (&x, &y), (&x, &y), 0.0, &mut frozen, &mut rng).unwrap();
    assert_eq!((net.store.checksum(), net.alpha_checksum()), (w, a));
    assert!(search_step(&mut net, (&x, &[]), (&x, &y), 0.5, &mut opt, &mut rng).is_err());
}

#[test]
fn validation_loss_trends_down() {
    let d = synth(2, 32, 3);
    let (train, val) = split_dataset(&d, 0.5, 3).unwrap();
    let mut deltas: Vec<f32> = (0..5)
        .map(|seed| {
            let mut net = search_net(Variant::V2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut opt = Sgd::new(0.05, 0.9);
            let all_t: Vec<usize> = (0..train.len()).collect();
            let all_v: Vec<usize> = (0..val.len()).collect();
            let mut losses = Vec::new();
            for step in 0..50 {
                let pick = |n: usize| -> Vec<usize> { (0..8).map(|k| (step * 8 + k) % n).collect() };
                let (vx, vy) = val.batch(&pick(all_v.len()));
                let (tx, ty) = train.batch(&pick(all_t.len()));
                let (v, _) = search_step(&mut net, (&vx, &vy), (&tx, &ty), 0.5, &mut opt, &mut rng).unwrap();
                losses.push(v);
            }
            let head: f32 = losses[..10].iter().sum::<f32>() / 10.0;
            let tail: f32 = losses[40..].iter().sum::<f32>() / 10.0;
            tail - head
        })
        .collect();
    deltas.sort_by(f32::total_cmp);
    assert!(deltas[2] < 0.0, "loss changes {deltas:?}");
}

fn tiny_cfg(variant: Variant) -> SearchConfig {
    SearchConfig { variant, epochs: 1, batches_per_epoch: 1, batch_size: 8, seed: 4, ..SearchConfig::default() }
}

#[test]
fn tiny_search_is_reproducible() {
    let d = synth(4, 8, 0);
    let spec = NetworkSpec::default();
    for v in [Variant::V1, Variant::V2, Variant::V3, Variant::V4] {
        let plan = resolve_plan(v, 1, 1).unwrap();
        let a = run_search(&tiny_cfg(v), &spec, plan, &d).unwrap();
        let b = run_search(&tiny_cfg(v), &spec, plan, &d).unwrap();
        let (ja, jb) = (serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_eq!(ja, jb, "{v:?}");
        assert_eq!(a.cells.len(), spec.groups.len());
        assert_eq!(a.val_loss.len(), 1);
        for c in &a.cells {
            let back: DerivedCell = serde_json::from_str(&serde_json::to_string(c).unwrap()).unwrap();
            assert_eq!(&back, c);
        }
        if v == Variant::V4 {
            assert!(a.audit.iter().all(|e| !e.event.involves_maxpool()));
        }
    }
    let bad = SearchConfig { epochs: 0, ..tiny_cfg(Variant::V1) };
    assert!(run_search(&bad, &spec, resolve_plan(Variant::V1, 1, 1).unwrap(), &d).is_err());
}

fn derived(group: GroupSpec, nodes: &[(usize, OpKind)]) -> DerivedCell {
    DerivedCell {
        nodes: nodes.iter().map(|&(pred, op)| DerivedNode { pred, op }).collect(),
        plan: resolve_plan(Variant::V1, 1, 1).unwrap(),
        group_spec: group,
    }
}

#[test]
fn v1_replaces_only_shape_changing_pools() {
    let g = GroupSpec::new(8, 16, 2);
    let d = derived(g, &[(0, OpKind::Conv3), (0, OpKind::MaxPool3), (1, OpKind::MaxPool3), (2, OpKind::Identity)]);
    let (out, audit) = variant_v1(&d);
    assert_eq!(out.nodes[1], DerivedNode { pred: 0, op: OpKind::Conv1 });
    assert_eq!(out.nodes[2], DerivedNode { pred: 1, op: OpKind::MaxPool3 });
    assert_eq!(audit, [AuditEvent::Replaced { node: 2, pred: 0, from: OpKind::MaxPool3, to: OpKind::Conv1 }]);

    let plain = derived(g, &[(0, OpKind::Conv3), (1, OpKind::Conv5), (2, OpKind::Identity), (0, OpKind::Conv1)]);
    assert_eq!(variant_v1(&plain), (plain.clone(), vec![]));
}

fn search_cell(group: GroupSpec, ops: &[OpKind]) -> (ParamStore, CellGraph) {
    let mut store = ParamStore::new();
    let plan = resolve_plan(Variant::V1, 1, 1).unwrap();
    let quant = nash_core::cell::CellQuant::from_plan(&plan, &Default::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cell = CellGraph::build(&mut store, "c", group, &OpMask::uniform(&group, ops), quant, &mut rng).unwrap();
    (store, cell)
}

#[test]
fn v2_masks_shape_changing_edges() {
    let (_, cell) = search_cell(GroupSpec::new(8, 16, 2), &OpKind::ALL);
    let (masked, audit) = variant_v2_mask(&cell);
    for (e, edge) in masked.edges.iter().enumerate() {
        let n = edge.candidates.len();
        if edge.shape_changing {
            assert!(!edge.candidates.contains(&OpKind::MaxPool3));
            // identity never applies where the shape changes
            assert_eq!(n, 4);
        } else {
            assert_eq!(n, 6);
        }
        assert_eq!(masked.alpha[e].len(), n);
    }
    assert_eq!(audit.len(), masked.edges.iter().filter(|e| e.shape_changing).count());

    // same-shape group: all six kept
    let (_, cell) = search_cell(GroupSpec::new(8, 8, 1), &OpKind::ALL);
    assert!(variant_v2_mask(&cell).1.is_empty());

    // a two-node downsampling group has only shape-changing edges
    let mut g = GroupSpec::new(4, 8, 2);
    g.nodes = 2;
    g.residual = false;
    let (_, cell) = search_cell(g, &OpKind::ALL);
    let (masked, _) = variant_v2_mask(&cell);
    assert!(masked.edges.iter().all(|e| !e.candidates.contains(&OpKind::MaxPool3)));
}

fn set_alpha(cell: &mut CellGraph, from: usize, to: usize, op: OpKind, v: f32) {
    let e = cell.edges.iter().position(|e| e.from == from && e.to == to).unwrap();
    let s = cell.edges[e].slot_of(op).unwrap();
    cell.alpha[e][s] = v;
}

#[test]
fn v3_walks_the_ranking() {
    let plan = resolve_plan(Variant::V3, 1, 1).unwrap();
    let (_, mut cell) = search_cell(GroupSpec::new(8, 16, 2), &OpKind::ALL);
    cell.alpha.iter_mut().flatten().for_each(|a| *a = 0.0);
    // node 1: [MaxPool3 (sc), Conv3, ...] -> Conv3
    set_alpha(&mut cell, 0, 1, OpKind::MaxPool3, 5.0);
    set_alpha(&mut cell, 0, 1, OpKind::Conv3, 4.0);
    // node 2: [Conv5, ...] -> Conv5, nothing rejected
    set_alpha(&mut cell, 1, 2, OpKind::Conv5, 5.0);
    // node 3: [MaxPool3 (sc), Zero, MaxPool3 (same shape)] -> the same-shape pool
    set_alpha(&mut cell, 0, 3, OpKind::MaxPool3, 6.0);
    set_alpha(&mut cell, 2, 3, OpKind::Zero, 5.5);
    set_alpha(&mut cell, 2, 3, OpKind::MaxPool3, 5.0);
    // node 4: [MaxPool3 (sc), Conv1 (sc)] -> Conv1
    set_alpha(&mut cell, 0, 4, OpKind::MaxPool3, 7.0);
    set_alpha(&mut cell, 0, 4, OpKind::Conv1, 6.5);
    let (d, audit) = variant_v3_reject(&cell, plan).unwrap();
    let got: Vec<(usize, OpKind)> = d.nodes.iter().map(|n| (n.pred, n.op)).collect();
    assert_eq!(got, [(0, OpKind::Conv3), (1, OpKind::Conv5), (2, OpKind::MaxPool3), (0, OpKind::Conv1)]);
    let rejected: Vec<usize> = audit
        .iter()
        .map(|e| match e {
            AuditEvent::Rejected { node, op: OpKind::MaxPool3, .. } => *node,
            other => panic!("{other:?}"),
        })
        .collect();
    assert_eq!(rejected, [1, 3, 4]);

    // with an acceptable favourite everywhere v3 is the plain argmax
    let (_, mut cell) = search_cell(GroupSpec::new(8, 16, 2), &OpKind::ALL);
    for (e, edge) in cell.edges.clone().iter().enumerate() {
        if let Some(s) = edge.slot_of(OpKind::MaxPool3) {
            cell.alpha[e][s] = -9.0;
        }
    }
    let (d, audit) = variant_v3_reject(&cell, plan).unwrap();
    assert!(audit.is_empty());
    assert_eq!(d, cell.derive(plan).unwrap());
}

#[test]
fn v4_ops_and_cells() {
    let ops = variant_v4_ops();
    assert_eq!(ops, [OpKind::Zero, OpKind::Identity, OpKind::Conv1, OpKind::Conv3, OpKind::Conv5]);
    let net = search_net(Variant::V4, 1);
    assert!(net.cells.iter().all(|c| c.edges.iter().all(|e| !e.candidates.contains(&OpKind::MaxPool3))));
    let plan = resolve_plan(Variant::V4, 1, 1).unwrap();
    assert_eq!(plan.nas_w, 8);
    for c in &net.cells {
        let (d, _) = derive_for_variant(c, Variant::V4, plan).unwrap();
        assert!(d.nodes.iter().all(|n| matches!(n.op, OpKind::Identity | OpKind::Conv1 | OpKind::Conv3 | OpKind::Conv5)));
    }
}

#[test]
fn variants_are_sound_on_random_alphas() {
    for v in [Variant::V1, Variant::V2, Variant::V3, Variant::V4] {
        let replaced = variant_soundness(v, 100, 7).unwrap();
        if v == Variant::V1 {
            assert!(replaced > 0);
        }
    }
}

#[test]
fn deeper_specs_build() {
    let spec = NetworkSpec {
        groups: vec![GroupCfg { out_channels: 8, stride: 1 }, GroupCfg { out_channels: 16, stride: 2 }, GroupCfg { out_channels: 16, stride: 2 }],
        ..NetworkSpec::default()
    };
    let (net, _) = build_search_network(&spec, Variant::V2, resolve_plan(Variant::V2, 2, 2).unwrap(), 0).unwrap();
    assert_eq!(net.cells.len(), 3);
}
