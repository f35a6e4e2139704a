//! Tape gradients against central finite differences.
//!
//! Every case reduces to `sum(square(op(x)))`, which is piecewise quadratic in
//! `x`, so central differences are exact up to rounding away from kinks.
//! Inputs to ReLU and max pooling are kept clear of their kinks.

use nash_core::cell::softmax;
use nash_core::tensor::{grad_check, Tape, Tensor, Var};
use nash_core::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 20;
const TOL: f32 = 1e-3;
const H: f32 = 1e-2;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sq_sum(t: &mut Tape, y: Var) -> Var {
    let s = t.square(y);
    t.sum(s)
}

fn check(name: &str, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> f32) {
    let mut r = rng(seed);
    let worst = (0..CASES).map(|_| case(&mut r)).fold(0.0f32, f32::max);
    assert!(worst < TOL, "{name}: worst relative error {worst}");
}

/// Values at least `gap` apart in a random order, so max pooling has no near ties.
fn spaced(shape: &[usize], gap: f32, r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * gap).collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Uniform in `[-1, 1]` with `|x| >= 0.05`.
fn off_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f32 = r.gen_range(0.05..1.0);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn small(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -0.5, 0.5, r)
}

fn run(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f32 {
    grad_check(f, x, H).unwrap()
}

pub fn conv2d_input_and_weight() {
    check("conv2d", 1, |r| {
        let (n, c, m) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let k = [1, 3, 5][r.gen_range(0..3)];
        let hw = r.gen_range(k.max(3)..7);
        let stride = r.gen_range(1..3);
        let pad = k / 2;
        let x = small(&[n, c, hw, hw], r);
        let w = small(&[m, c, k, k], r);
        let ex = run(&x, |t, xv| {
            let wv = t.constant(&w);
            let y = t.conv2d(xv, wv, stride, pad)?;
            Ok(sq_sum(t, y))
        });
        let ew = run(&w, |t, wv| {
            let xv = t.constant(&x);
            let y = t.conv2d(xv, wv, stride, pad)?;
            Ok(sq_sum(t, y))
        });
        ex.max(ew)
    });
}

pub fn maxpool2d() {
    check("maxpool2d", 2, |r| {
        let (n, c, hw) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(3..7));
        let stride = r.gen_range(1..3);
        let x = spaced(&[n, c, hw, hw], 0.05, r);
        run(&x, |t, xv| {
            let y = t.maxpool2d(xv, 3, stride, 1)?;
            Ok(sq_sum(t, y))
        })
    });
}

pub fn add_both_operands() {
    check("add", 3, |r| {
        let shape = [r.gen_range(1..4), r.gen_range(1..5)];
        let (a, b) = (small(&shape, r), small(&shape, r));
        let ea = run(&a, |t, av| {
            let bv = t.constant(&b);
            let y = t.add(av, bv)?;
            Ok(sq_sum(t, y))
        });
        // the same leaf on both sides accumulates twice
        let eb = run(&b, |t, bv| {
            let y = t.add(bv, bv)?;
            Ok(sq_sum(t, y))
        });
        ea.max(eb)
    });
}

pub fn scale() {
    check("scale", 4, |r| {
        let x = small(&[r.gen_range(1..10)], r);
        let c: f32 = r.gen_range(-2.0..2.0);
        run(&x, |t, xv| {
            let y = t.scale(xv, c);
            Ok(sq_sum(t, y))
        })
    });
}

pub fn channel_scale() {
    check("channel_scale", 5, |r| {
        let (n, c) = (r.gen_range(1..3), r.gen_range(1..4));
        let x = small(&[n, c, 3, 3], r);
        let s: Vec<f32> = (0..c).map(|_| r.gen_range(-2.0..2.0)).collect();
        run(&x, |t, xv| {
            let y = t.channel_scale(xv, s.clone())?;
            Ok(sq_sum(t, y))
        })
    });
}

pub fn relu() {
    check("relu", 6, |r| {
        let x = off_zero(&[r.gen_range(1..20)], r);
        run(&x, |t, xv| {
            let y = t.relu(xv);
            Ok(sq_sum(t, y))
        })
    });
}

pub fn square_and_sum() {
    check("square/sum", 7, |r| {
        let x = small(&[r.gen_range(1..20)], r);
        let e1 = run(&x, |t, xv| Ok(sq_sum(t, xv)));
        let e2 = run(&x, |t, xv| Ok(t.sum(xv)));
        e1.max(e2)
    });
}

pub fn linear_input_and_weight() {
    check("linear", 8, |r| {
        let (n, f, o) = (r.gen_range(1..4), r.gen_range(1..8), r.gen_range(1..5));
        let x = small(&[n, f], r);
        let w = small(&[o, f], r);
        let ex = run(&x, |t, xv| {
            let wv = t.constant(&w);
            let y = t.linear(xv, wv)?;
            Ok(sq_sum(t, y))
        });
        let ew = run(&w, |t, wv| {
            let xv = t.constant(&x);
            let y = t.linear(xv, wv)?;
            Ok(sq_sum(t, y))
        });
        ex.max(ew)
    });
}

pub fn global_avg_pool() {
    check("global_avg_pool", 9, |r| {
        let x = small(&[r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5)], r);
        run(&x, |t, xv| {
            let y = t.global_avg_pool(xv)?;
            Ok(sq_sum(t, y))
        })
    });
}

pub fn softmax_cross_entropy() {
    check("softmax_cross_entropy", 10, |r| {
        let (n, o) = (r.gen_range(1..5), r.gen_range(2..6));
        let x = Tensor::uniform(&[n, o], -2.0, 2.0, r);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..o)).collect();
        run(&x, |t, xv| t.softmax_cross_entropy(xv, &labels))
    });
}

pub fn replicate_channels() {
    check("replicate_channels", 11, |r| {
        let c = r.gen_range(1..4);
        let out_c = c * r.gen_range(1..4) + r.gen_range(0..c);
        let x = small(&[1, c, 2, 3], r);
        run(&x, |t, xv| {
            let y = t.replicate_channels(xv, out_c)?;
            Ok(sq_sum(t, y))
        })
    });
}

pub fn composite_branch() {
    // conv -> square -> add skip -> gap -> linear -> cross entropy; smooth, so
    // random conv outputs cannot land on a kink
    check("composite", 12, |r| {
        let x = small(&[2, 2, 5, 5], r);
        let w = small(&[2, 2, 3, 3], r);
        let fc = small(&[3, 2], r);
        run(&x, |t, xv| {
            let wv = t.constant(&w);
            let c = t.conv2d(xv, wv, 1, 1)?;
            let a = t.square(c);
            let s = t.add(a, xv)?;
            let g = t.global_avg_pool(s)?;
            let fv = t.constant(&fc);
            let l = t.linear(g, fv)?;
            t.softmax_cross_entropy(l, &[0, 2])
        })
    });
}

pub fn straight_through_scales_upstream() {
    let mut r = rng(13);
    for _ in 0..CASES {
        let n = r.gen_range(1..10);
        let x = small(&[n], &mut r);
        let values: Vec<f32> = x.data.iter().map(|v| v.round()).collect();
        let mask: Vec<f32> = (0..n).map(|_| r.gen_range(0..2) as f32).collect();
        let mut t = Tape::new();
        let xv = t.input(&x, true);
        let q = t.straight_through(xv, values.clone(), mask.clone());
        assert_eq!(t.value(q), &values[..]);
        let loss = sq_sum(&mut t, q);
        let g = t.backward(loss).unwrap();
        let gx = g.wrt(xv).unwrap();
        for i in 0..n {
            assert_eq!(gx[i], 2.0 * values[i] * mask[i]);
        }
    }
}

pub fn gate_gradient_is_derivative_of_output_scale() {
    // d L(c * y) / dc at c = 1, with y the gated tensor
    let mut r = rng(14);
    for _ in 0..CASES {
        let y = small(&[r.gen_range(1..12)], &mut r);
        let mut t = Tape::new();
        let yv = t.input(&y, false);
        let gv = t.gate(yv, 3, 1);
        let loss = sq_sum(&mut t, gv);
        let grads = t.backward(loss).unwrap();
        let gate = grads.gates()[0];
        assert_eq!((gate.edge, gate.slot), (3, 1));
        let f = |c: f32| -> f32 { y.data.iter().map(|v| (c * v) * (c * v)).sum() };
        let numeric = (f(1.0 + H) - f(1.0 - H)) / (2.0 * H);
        let err = (gate.grad - numeric).abs() / gate.grad.abs().max(numeric.abs()).max(1.0);
        assert!(err < TOL, "gate grad {} vs {numeric}", gate.grad);
    }
}

pub fn softmax_jacobian() {
    // d p_k / d a_m = p_k (delta_km - p_m), the factor used for alpha updates
    let mut r = rng(15);
    for _ in 0..CASES {
        let n = r.gen_range(2..7);
        let a: Vec<f32> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let p = softmax(&a);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        for m in 0..n {
            let (mut hi, mut lo) = (a.clone(), a.clone());
            hi[m] += 1e-2;
            lo[m] -= 1e-2;
            let (ph, pl) = (softmax(&hi), softmax(&lo));
            for k in 0..n {
                let numeric = (ph[k] - pl[k]) / 2e-2;
                let analytic = p[k] * (if k == m { 1.0 } else { 0.0 } - p[m]);
                assert!((numeric - analytic).abs() < 1e-3, "k {k} m {m}: {numeric} vs {analytic}");
            }
        }
    }
}

/// Every primitive check, by name.
pub const ALL: &[(&str, fn())] = &[
    ("conv2d_input_and_weight", conv2d_input_and_weight),
    ("maxpool2d", maxpool2d),
    ("add_both_operands", add_both_operands),
    ("scale", scale),
    ("channel_scale", channel_scale),
    ("relu", relu),
    ("square_and_sum", square_and_sum),
    ("linear_input_and_weight", linear_input_and_weight),
    ("global_avg_pool", global_avg_pool),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("replicate_channels", replicate_channels),
    ("composite_branch", composite_branch),
    ("straight_through_scales_upstream", straight_through_scales_upstream),
    ("gate_gradient_is_derivative_of_output_scale", gate_gradient_is_derivative_of_output_scale),
    ("softmax_jacobian", softmax_jacobian),
];
