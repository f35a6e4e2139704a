//! Whole network: quantized stem, one cell per convolutional group, and a
//! pooled linear classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{CellGraph, CellQuant, DerivedCell, GroupSpec, OpCounters, OpMask, PathChoice};
use crate::error::{NashError, Result};
use crate::layers::{ConvLayer, LinearLayer};
use crate::quant::{act_quant_var, ActConfig, BitWidthPlan, QuantSpec};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Gate tags are `cell_index * GATE_STRIDE + edge`.
pub const GATE_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupCfg {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub image_hw: usize,
    pub stem_channels: usize,
    pub groups: Vec<GroupCfg>,
    pub classes: usize,
    #[serde(default)]
    pub acts: ActConfig,
}

impl Default for NetworkSpec {
    /// Two-group mini ResNet: 8 then 16 channels on 16x16 inputs.
    fn default() -> Self {
        NetworkSpec {
            in_channels: 3,
            image_hw: 16,
            stem_channels: 8,
            groups: vec![GroupCfg { out_channels: 8, stride: 1 }, GroupCfg { out_channels: 16, stride: 2 }],
            classes: 4,
            acts: ActConfig::default(),
        }
    }
}

impl NetworkSpec {
    pub fn group_specs(&self) -> Vec<GroupSpec> {
        let mut in_c = self.stem_channels;
        self.groups
            .iter()
            .map(|g| {
                let s = GroupSpec::new(in_c, g.out_channels, g.stride);
                in_c = g.out_channels;
                s
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.classes < 2 || self.groups.is_empty() {
            return Err(NashError::Config(format!("degenerate network spec {self:?}")));
        }
        let mut hw = self.image_hw;
        for g in &self.groups {
            if !(g.stride == 1 || g.stride == 2) {
                return Err(NashError::Config(format!("group stride {} not in {{1, 2}}", g.stride)));
            }
            hw = hw.div_ceil(g.stride);
        }
        if hw == 0 {
            return Err(NashError::Config("image too small for the group strides".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub plan: BitWidthPlan,
    pub store: ParamStore,
    pub stem: ConvLayer,
    pub cells: Vec<CellGraph>,
    pub head_act: QuantSpec,
    pub head: LinearLayer,
}

/// How each group's cell is instantiated.
pub enum CellPlan<'a> {
    Backbone,
    Search(OpMask),
    Derived(&'a DerivedCell),
}

impl Network {
    pub fn build(spec: &NetworkSpec, plan: BitWidthPlan, cells: Vec<CellPlan<'_>>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let groups = spec.group_specs();
        if cells.len() != groups.len() {
            return Err(NashError::invalid(format!("{} cell plans for {} groups", cells.len(), groups.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w8 = QuantSpec::weight(8)?;
        let stem = ConvLayer::new(&mut store, "stem", spec.in_channels, spec.stem_channels, 3, 1, w8, &mut rng);
        let quant = CellQuant::from_plan(&plan, &spec.acts)?;
        let mut built = Vec::with_capacity(groups.len());
        for (g, (group, cp)) in groups.iter().zip(cells).enumerate() {
            let prefix = format!("cell{g}");
            let cell = match cp {
                CellPlan::Backbone => CellGraph::backbone_only(&mut store, &prefix, *group, quant, &mut rng)?,
                CellPlan::Search(mask) => CellGraph::build(&mut store, &prefix, *group, &mask, quant, &mut rng)?,
                CellPlan::Derived(d) => {
                    if d.group_spec != *group {
                        return Err(NashError::invalid(format!(
                            "derived cell {g} was searched for {:?}, network has {:?}",
                            d.group_spec, group
                        )));
                    }
                    CellGraph::from_derived(&mut store, &prefix, d, quant, &mut rng)?
                }
            };
            built.push(cell);
        }
        let last_c = groups.last().map(|g| g.out_channels).unwrap_or(spec.stem_channels);
        let head_act = spec.acts.act1(plan.residual_a)?;
        let head = LinearLayer::new(&mut store, "head", last_c, spec.classes, w8, &mut rng);
        Ok(Network { spec: spec.clone(), plan, store, stem, cells: built, head_act, head })
    }

    pub fn fixed_paths(&self) -> Vec<PathChoice> {
        self.cells.iter().map(CellGraph::fixed_path).collect()
    }

    /// Records a forward pass and returns the logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        paths: &[PathChoice],
        gated: bool,
        mut counters: Option<&mut [OpCounters]>,
    ) -> Result<Var> {
        if x.shape.len() != 4 || x.shape[1] != self.spec.in_channels {
            return Err(NashError::invalid(format!(
                "network expects N,{},H,W input, got {:?}",
                self.spec.in_channels, x.shape
            )));
        }
        let xin = tape.constant(x);
        let mut h = self.stem.forward(tape, &self.store, xin)?;
        for (c, cell) in self.cells.iter().enumerate() {
            let ctr = counters.as_deref_mut().map(|cs| &mut cs[c]);
            let base = gated.then_some(c * GATE_STRIDE);
            h = cell.forward(tape, &self.store, &paths[c], h, base, ctr)?;
        }
        let a = act_quant_var(tape, h, &self.head_act)?;
        let pooled = tape.global_avg_pool(a)?;
        self.head.forward(tape, &self.store, pooled)
    }

    /// Inference logits with every cell on its fixed path.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, &self.fixed_paths(), false, None)?;
        Ok(tape.tensor(out))
    }

    /// Logits for a dataset evaluated in fixed-size batches.
    pub fn logits_batched(&self, images: &Tensor, batch: usize) -> Result<Tensor> {
        let n = images.shape[0];
        let mut data = Vec::with_capacity(n * self.spec.classes);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(batch.max(1)) {
            data.extend(self.logits(&images.gather_batch(chunk))?.data);
        }
        Tensor::new(vec![n, self.spec.classes], data)
    }

    pub fn alpha_checksum(&self) -> u64 {
        self.cells.iter().fold(0u64, |h, c| h.rotate_left(7) ^ c.alpha_checksum())
    }
}
