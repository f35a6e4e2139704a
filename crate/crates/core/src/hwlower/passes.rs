//! Semantics-preserving graph rewrites. Each pass runs to a fixed point, so
//! applying it a second time changes nothing.

use super::{GraphIR, IrOp};

fn redirect(g: &mut GraphIR, from: usize, to: usize) {
    for n in &mut g.nodes {
        for p in &mut n.inputs {
            if *p == from {
                *p = to;
            }
        }
    }
    if g.output == from {
        g.output = to;
    }
}

fn sole_consumer(g: &GraphIR, id: usize) -> Option<usize> {
    let users = g.consumers(id);
    (users.len() == 1 && g.output != id).then(|| users[0])
}

/// Folds `MultiThreshold -> AddConst(b)` with integer `b` into the threshold
/// node's output bias.
pub fn pass_absorb_sign_bias(g: &GraphIR) -> GraphIR {
    let mut g = g.clone();
    loop {
        let hit = g.nodes.iter().enumerate().find_map(|(i, n)| match n.op {
            IrOp::AddConst { value } if value.fract() == 0.0 && value.abs() < i32::MAX as f32 => {
                let src = n.inputs[0];
                let is_mt = matches!(g.nodes[src].op, IrOp::MultiThreshold { .. });
                (is_mt && sole_consumer(&g, src) == Some(i)).then_some((i, src, value as i32))
            }
            _ => None,
        });
        let Some((add, mt, b)) = hit else { break };
        if let IrOp::MultiThreshold { out_bias, .. } = &mut g.nodes[mt].op {
            *out_bias += b;
        }
        redirect(&mut g, add, mt);
        g = g.compact();
    }
    g.compact()
}

/// Rewrites `Mul(c) -> MaxPool` into `MaxPool -> Mul(c)` when every `c >= 0`.
pub fn pass_move_mul_past_maxpool(g: &GraphIR) -> GraphIR {
    let mut g = g.clone();
    loop {
        let hit = g.nodes.iter().enumerate().find_map(|(i, n)| match n.op {
            IrOp::MaxPool { .. } => {
                let src = n.inputs[0];
                match &g.nodes[src].op {
                    IrOp::Mul { scale } if scale.iter().all(|&c| c >= 0.0) && sole_consumer(&g, src) == Some(i) => {
                        Some((src, i))
                    }
                    _ => None,
                }
            }
            _ => None,
        });
        let Some((mul, pool)) = hit else { break };
        // pool now reads the mul's input; the mul moves behind the pool
        let pre = g.nodes[mul].inputs[0];
        let pool_shape = g.nodes[pool].shape.clone();
        g.nodes[pool].inputs = vec![pre];
        redirect(&mut g, pool, mul);
        g.nodes[mul].inputs = vec![pool];
        g.nodes[mul].shape = pool_shape;
        g = g.compact();
    }
    g.compact()
}

/// Replaces every n-input `Add` (n > 2) with a left-to-right chain of 2-input adds.
pub fn cascade_lowering(g: &GraphIR) -> GraphIR {
    let mut g = g.clone();
    let wide: Vec<usize> =
        g.nodes.iter().enumerate().filter(|(_, n)| n.op == IrOp::Add && n.inputs.len() > 2).map(|(i, _)| i).collect();
    for id in wide {
        let inputs = g.nodes[id].inputs.clone();
        let shape = g.nodes[id].shape.clone();
        let name = g.nodes[id].name.clone();
        let mut acc = inputs[0];
        for (k, &next) in inputs[1..inputs.len() - 1].iter().enumerate() {
            acc = g.push(format!("{name}.cascade{k}"), IrOp::Add, vec![acc, next], shape.clone());
        }
        g.nodes[id].inputs = vec![acc, inputs[inputs.len() - 1]];
    }
    g.compact()
}

/// Streamline pipeline order: sign-bias absorption first, then moving
/// scales past max pooling, then the cascade rewrite of wide additions.
pub fn streamline(g: &GraphIR) -> GraphIR {
    cascade_lowering(&pass_move_mul_past_maxpool(&pass_absorb_sign_bias(g)))
}
