//! Random IR graphs that contain a rewrite pattern, and the pass checker.

use nash_core::hwlower::{interpret, GraphIR, IrOp};
use nash_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Pattern {
    SignBias,
    MulPool,
    Cascade,
}

/// Random same-shape DAG with at least one instance of `pattern`. In integer
/// mode every constant is an integer so all values stay exactly representable.
pub fn random_graph(rng: &mut ChaCha8Rng, pattern: Pattern, integer: bool) -> GraphIR {
    let c = rng.gen_range(1..=3);
    let shape = vec![c, rng.gen_range(3..=6), rng.gen_range(3..=6)];
    let mut g = GraphIR::new();
    let mut pool = vec![g.push("in", IrOp::Input, vec![], shape.clone())];
    let konst = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| -> f32 {
        if integer {
            rng.gen_range(lo as i32..=hi as i32) as f32
        } else {
            rng.gen_range(lo..hi)
        }
    };
    let thresholds = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        let k = rng.gen_range(1..=7);
        let mut t: Vec<f32> = (0..k).map(|_| rng.gen_range(-12..12) as f32 + 0.5).collect();
        t.sort_by(f32::total_cmp);
        t.dedup();
        t
    };
    let steps = rng.gen_range(4..10);
    let inject = rng.gen_range(0..steps);
    for step in 0..steps {
        let src = *pool.choose(rng).unwrap();
        let name = format!("n{step}");
        let force = step == inject;
        let choice = if force { 100 } else { rng.gen_range(0..7) };
        let id = match choice {
            0 => {
                let scale = if rng.gen_bool(0.5) {
                    vec![konst(rng, -2.0, 2.0)]
                } else {
                    (0..c).map(|_| konst(rng, -2.0, 2.0)).collect()
                };
                g.push(name, IrOp::Mul { scale }, vec![src], shape.clone())
            }
            1 => g.push(name, IrOp::AddConst { value: konst(rng, -3.0, 3.0) }, vec![src], shape.clone()),
            2 => {
                let t = thresholds(rng);
                g.push(name, IrOp::MultiThreshold { thresholds: t, out_bias: rng.gen_range(-4..=4), obits: 4 }, vec![src], shape.clone())
            }
            3 => g.push(name, IrOp::MaxPool { k: 3, stride: 1, pad: 1 }, vec![src], shape.clone()),
            4 => {
                let k = [1usize, 3][rng.gen_range(0..2)];
                let weights = (0..c * c * k * k).map(|_| rng.gen_range(-2..=2) as f32).collect();
                g.push(name, IrOp::Conv { weights, mh: c, c, k, stride: 1, pad: k / 2, wbits: 2 }, vec![src], shape.clone())
            }
            5 | 6 => {
                let n = rng.gen_range(2..=3);
                let ins = (0..n).map(|_| *pool.choose(rng).unwrap()).collect();
                g.push(name, IrOp::Add, ins, shape.clone())
            }
            _ => match pattern {
                Pattern::SignBias => {
                    let t = thresholds(rng);
                    let mt = g.push(
                        format!("{name}.mt"),
                        IrOp::MultiThreshold { thresholds: t, out_bias: rng.gen_range(-8..=0), obits: 4 },
                        vec![src],
                        shape.clone(),
                    );
                    let b = rng.gen_range(-8..=8) as f32;
                    g.push(name, IrOp::AddConst { value: b }, vec![mt], shape.clone())
                }
                Pattern::MulPool => {
                    let scale = if rng.gen_bool(0.5) {
                        vec![konst(rng, 0.0, 3.0)]
                    } else {
                        (0..c).map(|_| konst(rng, 0.0, 3.0)).collect()
                    };
                    let m = g.push(format!("{name}.mul"), IrOp::Mul { scale }, vec![src], shape.clone());
                    g.push(name, IrOp::MaxPool { k: 3, stride: 1, pad: 1 }, vec![m], shape.clone())
                }
                Pattern::Cascade => {
                    let n = rng.gen_range(3..=6);
                    let ins = (0..n).map(|_| *pool.choose(rng).unwrap()).collect();
                    g.push(name, IrOp::Add, ins, shape.clone())
                }
            },
        };
        pool.push(id);
    }
    let used: std::collections::BTreeSet<usize> = g.nodes.iter().flat_map(|n| n.inputs.iter().copied()).collect();
    let sinks: Vec<usize> = (0..g.nodes.len()).filter(|i| !used.contains(i)).collect();
    g.output = if sinks.len() == 1 { sinks[0] } else { g.push("out", IrOp::Add, sinks, shape) };
    g.validate().unwrap();
    g
}

pub fn integer_input(rng: &mut ChaCha8Rng, g: &GraphIR) -> Tensor {
    let shape = g.input_shape().unwrap();
    let mut full = vec![4];
    full.extend_from_slice(shape);
    let n: usize = full.iter().product();
    // every integer in [-12, 12] appears, the rest are random
    let mut data: Vec<f32> = (0..n).map(|i| if i < 25 { i as f32 - 12.0 } else { rng.gen_range(-12..=12) as f32 }).collect();
    data.shuffle(rng);
    Tensor::new(full, data).unwrap()
}

pub fn float_input(rng: &mut ChaCha8Rng, g: &GraphIR) -> Tensor {
    let mut full = vec![4];
    full.extend_from_slice(g.input_shape().unwrap());
    Tensor::uniform(&full, -6.0, 6.0, rng)
}

fn has_sign_bias(g: &GraphIR) -> bool {
    g.nodes.iter().enumerate().any(|(i, n)| match n.op {
        IrOp::AddConst { value } if value.fract() == 0.0 => {
            let src = n.inputs[0];
            matches!(g.nodes[src].op, IrOp::MultiThreshold { .. }) && g.consumers(src) == vec![i] && g.output != src
        }
        _ => false,
    })
}

fn has_mul_pool(g: &GraphIR) -> bool {
    g.nodes.iter().enumerate().any(|(i, n)| {
        matches!(n.op, IrOp::MaxPool { .. }) && {
            let src = n.inputs[0];
            matches!(&g.nodes[src].op, IrOp::Mul { scale } if scale.iter().all(|&c| c >= 0.0))
                && g.consumers(src) == vec![i]
                && g.output != src
        }
    })
}

pub fn check_pass(pattern: Pattern, pass: fn(&GraphIR) -> GraphIR, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..200 {
        let integer = case % 2 == 0 || pattern == Pattern::SignBias;
        let g = random_graph(&mut rng, pattern, integer);
        let before = match pattern {
            Pattern::SignBias => has_sign_bias(&g),
            Pattern::MulPool => has_mul_pool(&g),
            Pattern::Cascade => g.nodes.iter().any(|n| n.op == IrOp::Add && n.inputs.len() > 2),
        };
        assert!(before, "case {case}: generator missed the pattern");
        let p = pass(&g);
        p.validate().unwrap();
        let after = match pattern {
            Pattern::SignBias => has_sign_bias(&p),
            Pattern::MulPool => has_mul_pool(&p),
            Pattern::Cascade => p.nodes.iter().any(|n| n.op == IrOp::Add && n.inputs.len() > 2),
        };
        assert!(!after, "case {case}: pattern survived");
        assert_eq!(pass(&p), p, "case {case}: not a fixed point");
        for _ in 0..3 {
            let x = if integer { integer_input(&mut rng, &g) } else { float_input(&mut rng, &g) };
            let a = interpret(&g, &x).unwrap();
            let b = interpret(&p, &x).unwrap();
            if integer {
                assert_eq!(a.data, b.data, "case {case}: integer outputs differ");
            } else {
                assert!(a.max_abs_diff(&b) < 1e-5, "case {case}: float outputs differ by {}", a.max_abs_diff(&b));
            }
        }
    }
}

