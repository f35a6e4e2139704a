//! JSON run configuration, validation and the canonical config hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_cifar10_dir, synth_dataset, Dataset, SynthSpec};
use crate::error::{NashError, Result};
use crate::hwlower::{CostModel, FoldTarget};
use crate::model::NetworkSpec;
use crate::quant::{resolve_plan, BitWidthPlan};
use crate::search::{SearchConfig, Variant};
use crate::train::{LrSchedule, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
/// Overrides `data.dir` for CIFAR-10 sources.
pub const ENV_DATA_DIR: &str = "NASH_DATA_DIR";
/// Overrides `out_dir`.
pub const ENV_OUT_DIR: &str = "NASH_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        #[serde(default = "d_classes")]
        classes: usize,
        #[serde(default = "d_train_per_class")]
        train_per_class: usize,
        #[serde(default = "d_test_per_class")]
        test_per_class: usize,
        #[serde(default = "d_noise")]
        noise: f32,
    },
    /// Directory with the six CIFAR-10 binary batch files.
    Cifar10 {
        dir: PathBuf,
        /// Keep only the first `limit` training images (0 keeps all).
        #[serde(default)]
        limit: usize,
    },
}

fn d_classes() -> usize {
    4
}
fn d_train_per_class() -> usize {
    48
}
fn d_test_per_class() -> usize {
    32
}
fn d_noise() -> f32 {
    0.1
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            classes: d_classes(),
            train_per_class: d_train_per_class(),
            test_per_class: d_test_per_class(),
            noise: d_noise(),
        }
    }
}

/// Search hyperparameters; variant and seed come from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchParams {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr_w: f32,
    pub lr_alpha: f32,
    pub momentum: f32,
    pub split: f64,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams { epochs: 2, batches_per_epoch: 4, batch_size: 16, lr_w: 0.05, lr_alpha: 0.5, momentum: 0.9, split: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub schedule: LrSchedule,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 4,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            schedule: LrSchedule::StepDecay { at_fraction: 0.75, factor: 0.1 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HwParams {
    pub clock_mhz: f64,
    pub cap_pe: usize,
    pub cap_simd: usize,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl Default for HwParams {
    fn default() -> Self {
        let c = CostModel::default();
        HwParams { clock_mhz: c.clock_mhz, cap_pe: 64, cap_simd: 64, kappa1: c.kappa1, kappa2: c.kappa2 }
    }
}

impl HwParams {
    pub fn cost_model(&self) -> CostModel {
        CostModel { clock_mhz: self.clock_mhz, kappa1: self.kappa1, kappa2: self.kappa2 }
    }

    pub fn fold_target(&self) -> FoldTarget {
        FoldTarget::MaxParallel { cap_pe: self.cap_pe, cap_simd: self.cap_simd }
    }
}

/// Cartesian grid expanded by `nash run`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub variants: Vec<Variant>,
    /// `[wbits, abits]` pairs.
    pub bits: Vec<[u8; 2]>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub variant: Variant,
    pub wbits: u8,
    pub abits: u8,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub search: SearchParams,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default)]
    pub hw: HwParams,
    /// Where run directories go; not part of the config hash.
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

fn d_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            variant: Variant::V1,
            wbits: 1,
            abits: 1,
            seed: 0,
            data: DataSource::default(),
            network: NetworkSpec::default(),
            search: SearchParams::default(),
            train: TrainParams::default(),
            hw: HwParams::default(),
            out_dir: d_out_dir(),
            grid: None,
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> NashError {
    NashError::Config(e.to_string())
}

impl RunConfig {
    /// Parses and validates; unknown fields and bad values are config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NashError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env();
        Ok(cfg)
    }

    /// Path overrides from the environment. Nothing else can be overridden.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(ENV_OUT_DIR) {
            self.out_dir = PathBuf::from(dir);
        }
        if let (Some(d), DataSource::Cifar10 { dir, .. }) = (std::env::var_os(ENV_DATA_DIR), &mut self.data) {
            *dir = PathBuf::from(d);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(cfg_err(format!(
                "config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.plan()?;
        self.network.validate()?;
        if let DataSource::Synthetic { classes, train_per_class, test_per_class, noise } = self.data {
            if classes < 2 || train_per_class == 0 || test_per_class == 0 || !(noise >= 0.0 && noise.is_finite()) {
                return Err(cfg_err("synthetic data needs >= 2 classes, non-empty splits and finite noise"));
            }
            if classes != self.network.classes {
                return Err(cfg_err(format!("data has {classes} classes, network {}", self.network.classes)));
            }
        } else if self.network.classes != 10 || self.network.in_channels != 3 {
            return Err(cfg_err("CIFAR-10 needs a 3-channel, 10-class network"));
        }
        if self.variant != Variant::Original {
            self.search_config(self.variant, self.seed).validate()?;
        }
        self.train_config(self.seed).validate()?;
        let h = &self.hw;
        if !(h.clock_mhz > 0.0 && h.clock_mhz.is_finite()) || h.cap_pe == 0 || h.cap_simd == 0 {
            return Err(cfg_err("hw clock must be positive and caps >= 1"));
        }
        if !(h.kappa1 >= 0.0 && h.kappa2 >= 0.0) {
            return Err(cfg_err("kappa constants must be >= 0"));
        }
        if let Some(g) = &self.grid {
            if g.variants.is_empty() || g.bits.is_empty() || g.seeds.is_empty() {
                return Err(cfg_err("grid axes must be non-empty"));
            }
            for &v in &g.variants {
                for &[w, a] in &g.bits {
                    resolve_plan(v, w, a).map_err(cfg_err)?;
                }
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<BitWidthPlan> {
        resolve_plan(self.variant, self.wbits, self.abits).map_err(cfg_err)
    }

    pub fn label(&self) -> String {
        format!("{}-w{}a{}", self.variant.label(), self.wbits, self.abits)
    }

    pub fn search_config(&self, variant: Variant, seed: u64) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            epochs: s.epochs,
            batches_per_epoch: s.batches_per_epoch,
            batch_size: s.batch_size,
            lr_w: s.lr_w,
            lr_alpha: s.lr_alpha,
            momentum: s.momentum,
            seed,
            variant,
            split: s.split,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            schedule: t.schedule,
            seed: seed.wrapping_add(3),
        }
    }

    /// Seed for the final model's weight initialisation.
    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    /// One single-run config per grid cell, in variant, bits, seed order.
    /// Without a grid this is just `[self]`.
    pub fn expand(&self) -> Vec<RunConfig> {
        let Some(g) = &self.grid else { return vec![self.clone()] };
        let mut out = Vec::new();
        for &variant in &g.variants {
            for &[wbits, abits] in &g.bits {
                for &seed in &g.seeds {
                    out.push(RunConfig { variant, wbits, abits, seed, grid: None, ..self.clone() });
                }
            }
        }
        out
    }

    /// SHA-256 over the canonical JSON of every semantic field (keys sorted,
    /// `out_dir` and `grid` excluded).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
            m.remove("grid");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// `(train, test)` datasets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synthetic { classes, train_per_class, test_per_class, noise } => {
                let spec = |n| SynthSpec {
                    classes: *classes,
                    n_per_class: n,
                    hw: self.network.image_hw,
                    channels: self.network.in_channels,
                    noise: *noise,
                };
                let train = synth_dataset(&spec(*train_per_class), self.seed)?;
                let test = synth_dataset(&spec(*test_per_class), self.seed ^ 0x7e57_7e57)?;
                Ok((train, test))
            }
            DataSource::Cifar10 { dir, limit } => {
                let (train, test) = load_cifar10_dir(dir)?;
                if train.hw() != self.network.image_hw {
                    return Err(cfg_err(format!("CIFAR images are {}px, network expects {}", train.hw(), self.network.image_hw)));
                }
                let train = if *limit > 0 && *limit < train.len() {
                    train.subset(&(0..*limit).collect::<Vec<_>>())
                } else {
                    train
                };
                Ok((train, test))
            }
        }
    }
}
