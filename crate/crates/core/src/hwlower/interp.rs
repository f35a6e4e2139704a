use super::{GraphIR, IrOp};
use crate::error::{NashError, Result};
use crate::tensor::{
    conv2d_forward, global_avg_pool_forward, linear_forward, maxpool2d_forward, replicate_channels_forward, Tensor,
};

/// Reference evaluation of the graph on a batch. `input` is `[N, ..input shape]`.
pub fn interpret(g: &GraphIR, input: &Tensor) -> Result<Tensor> {
    g.validate()?;
    let n = *input.shape.first().ok_or_else(|| NashError::invalid("interpreter input has rank 0"))?;
    let mut values: Vec<Option<Vec<f32>>> = vec![None; g.nodes.len()];
    for (i, node) in g.nodes.iter().enumerate() {
        let arg = |k: usize| -> &Vec<f32> { values[node.inputs[k]].as_ref().expect("inputs precede their users") };
        let in_shape = |k: usize| -> Vec<usize> { g.nodes[node.inputs[k]].shape.clone() };
        let dims4 = |s: &[usize]| -> Result<[usize; 4]> {
            if s.len() != 3 {
                return Err(NashError::invalid(format!("node {} expects a C,H,W input, got {s:?}", node.name)));
            }
            Ok([n, s[0], s[1], s[2]])
        };
        let out = match &node.op {
            IrOp::Input => {
                if input.shape[1..] != node.shape[..] {
                    return Err(NashError::invalid(format!(
                        "input shape {:?} does not match graph input {:?}",
                        &input.shape[1..],
                        node.shape
                    )));
                }
                input.data.clone()
            }
            IrOp::Conv { weights, mh, c, k, stride, pad, .. } => {
                let xs = dims4(&in_shape(0))?;
                conv2d_forward(arg(0), xs, weights, [*mh, *c, *k, *k], *stride, *pad)
            }
            IrOp::Linear { weights, mh, mw, .. } => linear_forward(arg(0), n, *mw, weights, *mh),
            IrOp::Mul { scale } => {
                let x = arg(0);
                if scale.len() == 1 {
                    x.iter().map(|v| v * scale[0]).collect()
                } else {
                    let s = in_shape(0);
                    let inner: usize = s[1..].iter().product();
                    x.iter().enumerate().map(|(j, v)| v * scale[(j / inner) % s[0]]).collect()
                }
            }
            IrOp::AddConst { value } => arg(0).iter().map(|v| v + value).collect(),
            IrOp::MultiThreshold { thresholds, out_bias, .. } => arg(0)
                .iter()
                .map(|&v| (thresholds.partition_point(|&t| t <= v) as i32 + out_bias) as f32)
                .collect(),
            IrOp::MaxPool { k, stride, pad } => maxpool2d_forward(arg(0), dims4(&in_shape(0))?, *k, *stride, *pad).0,
            IrOp::Add => {
                let mut acc = arg(0).clone();
                for k in 1..node.inputs.len() {
                    for (a, b) in acc.iter_mut().zip(arg(k)) {
                        *a += b;
                    }
                }
                acc
            }
            IrOp::Concat { out_channels } => replicate_channels_forward(arg(0), dims4(&in_shape(0))?, *out_channels),
            IrOp::GlobalAvgPool => global_avg_pool_forward(arg(0), dims4(&in_shape(0))?),
        };
        let expect = n * node.shape.iter().product::<usize>();
        if out.len() != expect {
            return Err(NashError::invalid(format!(
                "node {i} ({}) produced {} values, shape {:?} needs {expect}",
                node.name,
                out.len(),
                node.shape
            )));
        }
        values[i] = Some(out);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&g.nodes[g.output].shape);
    Tensor::new(shape, values[g.output].take().expect("output evaluated"))
}
