use super::{GraphIR, IrOp};
use crate::cell::{CellGraph, OpKind};
use crate::error::{NashError, Result};
use crate::layers::{ConvLayer, LinearLayer};
use crate::quant::{quantize_weight_parts, QuantSpec};
use crate::tensor::{conv_out_extent, ParamStore};
use crate::train::Model;

struct Lowering<'a> {
    g: GraphIR,
    store: &'a ParamStore,
}

impl Lowering<'_> {
    fn shape(&self, id: usize) -> Vec<usize> {
        self.g.nodes[id].shape.clone()
    }

    fn act(&mut self, name: &str, x: usize, spec: &QuantSpec) -> Result<usize> {
        if !spec.is_activation() {
            return Err(NashError::UnsupportedOp {
                node: name.to_string(),
                reason: "weight quantizer in an activation position".into(),
            });
        }
        let levels = spec.levels()?;
        let shape = self.shape(x);
        let mt = self.g.push(
            format!("{name}.mt"),
            IrOp::MultiThreshold { thresholds: levels.thresholds.clone(), out_bias: levels.min_index, obits: spec.bits },
            vec![x],
            shape.clone(),
        );
        let mut y = self.g.push(format!("{name}.step"), IrOp::Mul { scale: vec![levels.step] }, vec![mt], shape.clone());
        if levels.offset != 0.0 {
            y = self.g.push(format!("{name}.offset"), IrOp::AddConst { value: levels.offset }, vec![y], shape);
        }
        Ok(y)
    }

    fn conv(&mut self, name: &str, x: usize, layer: &ConvLayer) -> Result<usize> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != layer.in_c {
            return Err(NashError::UnsupportedOp { node: name.into(), reason: format!("conv input shape {s:?}") });
        }
        let parts = quantize_weight_parts(self.store.get(layer.weight), &layer.wspec)?;
        let ho = conv_out_extent(s[1], layer.k, layer.stride, layer.pad)
            .ok_or_else(|| NashError::UnsupportedOp { node: name.into(), reason: "window does not fit".into() })?;
        let wo = conv_out_extent(s[2], layer.k, layer.stride, layer.pad)
            .ok_or_else(|| NashError::UnsupportedOp { node: name.into(), reason: "window does not fit".into() })?;
        let shape = vec![layer.out_c, ho, wo];
        let c = self.g.push(
            name,
            IrOp::Conv {
                weights: parts.q,
                mh: layer.out_c,
                c: layer.in_c,
                k: layer.k,
                stride: layer.stride,
                pad: layer.pad,
                wbits: layer.wspec.bits,
            },
            vec![x],
            shape.clone(),
        );
        Ok(self.g.push(format!("{name}.scale"), IrOp::Mul { scale: parts.scale }, vec![c], shape))
    }

    fn linear(&mut self, name: &str, x: usize, layer: &LinearLayer) -> Result<usize> {
        let parts = quantize_weight_parts(self.store.get(layer.weight), &layer.wspec)?;
        let shape = vec![layer.out_f];
        let l = self.g.push(
            name,
            IrOp::Linear { weights: parts.q, mh: layer.out_f, mw: layer.in_f, wbits: layer.wspec.bits },
            vec![x],
            shape.clone(),
        );
        Ok(self.g.push(format!("{name}.scale"), IrOp::Mul { scale: parts.scale }, vec![l], shape))
    }

    fn add(&mut self, name: &str, terms: Vec<usize>) -> usize {
        if terms.len() == 1 {
            return terms[0];
        }
        let shape = self.shape(terms[0]);
        self.g.push(name, IrOp::Add, terms, shape)
    }

    fn cell(&mut self, prefix: &str, cell: &CellGraph, x: usize) -> Result<usize> {
        let q = &cell.quant;
        let mut nodes = vec![x];
        for j in 1..cell.group.nodes {
            let mut terms = Vec::new();
            let bb = format!("{prefix}.backbone.{j}");
            let a = self.act(&format!("{bb}.act1"), nodes[j - 1], &q.backbone_act1)?;
            let y = self.conv(&bb, a, &cell.backbone[j - 1])?;
            terms.push(self.act(&format!("{bb}.act2"), y, &q.act2)?);
            for r in cell.residuals.iter().filter(|r| r.to == j) {
                let rn = format!("{prefix}.residual.{}_{}", r.from, r.to);
                let a = self.act(&format!("{rn}.act1"), nodes[r.from], &q.residual_act1)?;
                let y = match &r.conv {
                    Some(c) => self.conv(&rn, a, c)?,
                    None => a,
                };
                terms.push(self.act(&format!("{rn}.act2"), y, &q.act2)?);
            }
            for edge in cell.edges.iter().filter(|e| e.to == j) {
                // final models carry exactly one candidate per edge
                let op = edge.candidates[0];
                let en = format!("{prefix}.edge{}_{}.{}", edge.from, edge.to, op.name());
                let y = match op {
                    OpKind::Zero => continue,
                    OpKind::Identity => self.act(&format!("{en}.act1"), nodes[edge.from], &q.nas_act1)?,
                    OpKind::MaxPool3 => {
                        let a = self.act(&format!("{en}.act1"), nodes[edge.from], &q.nas_act1)?;
                        let s = self.shape(a);
                        let h = conv_out_extent(s[1], 3, edge.stride, 1).expect("pool fits");
                        let w = conv_out_extent(s[2], 3, edge.stride, 1).expect("pool fits");
                        let p = self.g.push(
                            en.clone(),
                            IrOp::MaxPool { k: 3, stride: edge.stride, pad: 1 },
                            vec![a],
                            vec![s[0], h, w],
                        );
                        if edge.in_c != edge.out_c {
                            self.g.push(
                                format!("{en}.concat"),
                                IrOp::Concat { out_channels: edge.out_c },
                                vec![p],
                                vec![edge.out_c, h, w],
                            )
                        } else {
                            p
                        }
                    }
                    _ => {
                        let a = self.act(&format!("{en}.act1"), nodes[edge.from], &q.nas_act1)?;
                        let conv = edge.convs[0].as_ref().expect("conv ops carry weights");
                        self.conv(&en, a, conv)?
                    }
                };
                terms.push(self.act(&format!("{en}.act2"), y, &q.act2)?);
            }
            nodes.push(self.add(&format!("{prefix}.node{j}.add"), terms));
        }
        Ok(*nodes.last().expect("cells have nodes"))
    }
}

/// Lowers a trained final model to the inference IR.
pub fn export_ir(m: &Model) -> Result<GraphIR> {
    let net = &m.net;
    if net.cells.iter().any(|c| c.edges.iter().any(|e| e.candidates.len() != 1)) {
        return Err(NashError::UnsupportedOp {
            node: "cell".into(),
            reason: "mixed (search) edges cannot be lowered; derive the architecture first".into(),
        });
    }
    let mut l = Lowering { g: GraphIR::new(), store: &net.store };
    let spec = &net.spec;
    let x = l.g.push("input", IrOp::Input, vec![], vec![spec.in_channels, spec.image_hw, spec.image_hw]);
    let mut h = l.conv("stem", x, &net.stem)?;
    for (c, cell) in net.cells.iter().enumerate() {
        h = l.cell(&format!("cell{c}"), cell, h)?;
    }
    let a = l.act("head.act", h, &net.head_act)?;
    let c = l.shape(a)[0];
    let p = l.g.push("head.pool", IrOp::GlobalAvgPool, vec![a], vec![c]);
    let out = l.linear("head.fc", p, &net.head)?;
    l.g.output = out;
    l.g.validate()?;
    Ok(l.g)
}
