//! Final-model construction, quantization-aware training and top-k evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{DerivedCell, OpKind};
use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{NashError, Result};
use crate::model::{CellPlan, Network, NetworkSpec};
use crate::quant::BitWidthPlan;
use crate::search::Variant;
use crate::tensor::{Sgd, Tape, Tensor};

pub const ARCH_SCHEMA_VERSION: u32 = 1;
pub const ARCH_FILE: &str = "model.json";

/// Everything needed to rebuild a final model, minus its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub schema_version: u32,
    pub network: NetworkSpec,
    pub variant: Variant,
    pub plan: BitWidthPlan,
    /// One entry per group; `None` keeps the plain backbone.
    pub cells: Vec<Option<DerivedCell>>,
    pub init_seed: u64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: ModelArch,
    pub net: Network,
}

/// Builds the plain feed-forward network for a derived (or baseline) architecture.
pub fn build_final_model(arch: ModelArch) -> Result<Model> {
    if arch.cells.len() != arch.network.groups.len() {
        return Err(NashError::invalid(format!(
            "{} cells for {} groups",
            arch.cells.len(),
            arch.network.groups.len()
        )));
    }
    for (c, cell) in arch.cells.iter().enumerate() {
        let Some(d) = cell else { continue };
        if d.plan != arch.plan {
            return Err(NashError::invalid(format!("cell {c} was derived under a different bit-width plan")));
        }
        if arch.variant == Variant::V4 && d.count_op(OpKind::MaxPool3) > 0 {
            return Err(NashError::invalid(format!("cell {c} keeps max pooling under the v4 plan")));
        }
        if arch.variant == Variant::Original {
            return Err(NashError::invalid("the original baseline has no derived cells"));
        }
    }
    let plans = arch.cells.iter().map(|c| c.as_ref().map_or(CellPlan::Backbone, CellPlan::Derived)).collect();
    let net = Network::build(&arch.network, arch.plan, plans, arch.init_seed)?;
    Ok(Model { arch, net })
}

impl Model {
    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.net.store)?;
        let p = dir.join(ARCH_FILE);
        std::fs::write(&p, serde_json::to_vec_pretty(&self.arch)?).map_err(|e| NashError::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let p = dir.join(ARCH_FILE);
        let arch: ModelArch = serde_json::from_slice(&std::fs::read(&p).map_err(|e| NashError::io(&p, e))?)?;
        let mut m = build_final_model(arch)?;
        checkpoint::load_into(dir, &mut m.net.store)?;
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` once `at_fraction` of the epochs are done.
    StepDecay { at_fraction: f32, factor: f32 },
}

impl LrSchedule {
    pub fn rate(&self, base: f32, epoch: usize, epochs: usize) -> f32 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { at_fraction, factor } => {
                if (epoch as f32) >= at_fraction * epochs as f32 {
                    base * factor
                } else {
                    base
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            schedule: LrSchedule::StepDecay { at_fraction: 0.5, factor: 0.1 },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NashError::Config("train epochs and batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.lr < 0.0 {
            return Err(NashError::Config("lr must be >= 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f32,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub top1: f64,
    pub top5: f64,
}

impl TopK {
    /// `100 - accuracy` in percent.
    pub fn error_pct(&self) -> f64 {
        100.0 - 100.0 * self.top1
    }
}

/// Position of `label` when classes are sorted by descending logit, ties by
/// ascending class index.
pub fn label_rank(row: &[f32], label: usize) -> usize {
    let l = row[label];
    row.iter().enumerate().filter(|&(j, &v)| v > l || (v == l && j < label)).count()
}

/// Fraction of rows whose label ranks within the top `k`.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> f64 {
    let o = logits.shape[1];
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().enumerate().filter(|&(b, &l)| label_rank(&logits.data[b * o..(b + 1) * o], l) < k).count();
    hits as f64 / labels.len() as f64
}

pub fn topk_from_logits(logits: &Tensor, labels: &[usize]) -> TopK {
    TopK { top1: topk_accuracy(logits, labels, 1), top5: topk_accuracy(logits, labels, 5) }
}

pub fn evaluate_topk(net: &Network, d: &Dataset) -> Result<TopK> {
    let logits = net.logits_batched(&d.images, 64)?;
    Ok(topk_from_logits(&logits, &d.labels))
}

/// Seeded minibatch SGD on cross-entropy for `cfg.epochs` epochs. Metrics are
/// evaluated on `eval` (or the training set when `None`) after every epoch.
pub fn train_model(m: &mut Model, d: &Dataset, cfg: &TrainConfig, eval: Option<&Dataset>) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if d.is_empty() {
        return Err(NashError::invalid("cannot train on an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let paths = m.net.fixed_paths();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..d.len()).collect();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.schedule.rate(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = d.batch(chunk);
            let mut tape = Tape::new();
            let logits = m.net.forward(&mut tape, &x, &paths, false, None)?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(NashError::NumericAbort(format!(
                    "training loss is {value} at epoch {epoch}, step {step} (lr {})",
                    opt.lr
                )));
            }
            total += value as f64 * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&mut m.net.store);
            opt.step(&mut m.net.store);
        }
        let acc = evaluate_topk(&m.net, eval.unwrap_or(d))?;
        history.push(EpochMetrics { epoch: epoch + 1, loss: (total / d.len() as f64) as f32, top1: acc.top1, top5: acc.top5 });
    }
    Ok(history)
}

/// Metrics as CSV with header `epoch,loss,top1,top5`.
pub fn metrics_csv(history: &[EpochMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for h in history {
        w.serialize(h)?;
    }
    let bytes = w.into_inner().map_err(|e| NashError::invalid(e.to_string()))?;
    if history.is_empty() {
        return Ok("epoch,loss,top1,top5\n".to_string());
    }
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
