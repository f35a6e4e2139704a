//! search -> train -> lower -> estimate -> report, with one directory and
//! one manifest per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{NashError, Result};
use crate::hwlower::{estimate_resources, export_ir, fold_layers, streamline, FoldingConfig, GraphIR, ResourceEstimate};
use crate::report::{emit_csv, emit_svg, pareto_front, ParetoPoint, ResourceKey};
use crate::search::{run_search, SearchResult, Variant};
use crate::train::{build_final_model, evaluate_topk, metrics_csv, train_model, Model, ModelArch, ARCH_SCHEMA_VERSION};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const ESTIMATE_SCHEMA_VERSION: u32 = 1;

pub const SEARCH_FILE: &str = "search.json";
pub const CKPT_DIR: &str = "ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const IR_FILE: &str = "model.ir.json";
pub const ESTIMATE_FILE: &str = "estimate.json";
pub const POINT_FILE: &str = "run.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateArtifact {
    pub schema_version: u32,
    pub folding: FoldingConfig,
    pub estimate: ResourceEstimate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    pub artifacts: Vec<ArtifactRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub point: ParetoPoint,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| NashError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| NashError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| NashError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| NashError::Format { offset: e.column() as u64, message: format!("{}: {e}", path.display()) })
}

/// Final architecture for a run: the searched cells, or the bare backbone
/// for the original baseline.
pub fn arch_for(cfg: &RunConfig, search: Option<&SearchResult>) -> Result<ModelArch> {
    let cells = match (cfg.variant, search) {
        (Variant::Original, _) => vec![None; cfg.network.groups.len()],
        (_, Some(r)) => {
            if r.variant != cfg.variant {
                return Err(NashError::Config(format!(
                    "search result is {:?} but the config asks for {:?}",
                    r.variant, cfg.variant
                )));
            }
            r.cells.iter().cloned().map(Some).collect()
        }
        (_, None) => return Err(NashError::Config(format!("variant {:?} needs a search result", cfg.variant))),
    };
    Ok(ModelArch {
        schema_version: ARCH_SCHEMA_VERSION,
        network: cfg.network.clone(),
        variant: cfg.variant,
        plan: cfg.plan()?,
        cells,
        init_seed: cfg.init_seed(),
    })
}

/// Exports and streamlines a trained model.
pub fn lower_model(m: &Model) -> Result<GraphIR> {
    let g = streamline(&export_ir(m)?);
    g.validate()?;
    Ok(g)
}

pub fn estimate_ir(g: &GraphIR, cfg: &crate::config::HwParams) -> Result<EstimateArtifact> {
    let folding = fold_layers(g, cfg.fold_target());
    let estimate = estimate_resources(g, &folding, &cfg.cost_model())?;
    Ok(EstimateArtifact { schema_version: ESTIMATE_SCHEMA_VERSION, folding, estimate })
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(format!("{}-s{}", cfg.label(), cfg.seed))
}

struct Recorder<'a> {
    dir: &'a Path,
    stages: Vec<StageRecord>,
}

impl Recorder<'_> {
    fn artifact(&self, rel: &str) -> Result<ArtifactRecord> {
        let p = self.dir.join(rel);
        let bytes = std::fs::read(&p).map_err(|e| NashError::io(&p, e))?;
        Ok(ArtifactRecord { path: rel.to_string(), sha256: sha256_hex(&bytes) })
    }

    fn stage<T>(&mut self, name: &str, files: &[&str], f: impl FnOnce() -> Result<T>) -> Result<T> {
        let out = f().and_then(|v| {
            let artifacts = files.iter().map(|r| self.artifact(r)).collect::<Result<Vec<_>>>()?;
            Ok((v, artifacts))
        });
        match out {
            Ok((v, artifacts)) => {
                self.stages.push(StageRecord { stage: name.into(), status: StageStatus::Ok, artifacts, error: None });
                Ok(v)
            }
            Err(e) => {
                self.stages.push(StageRecord {
                    stage: name.into(),
                    status: StageStatus::Failed,
                    artifacts: Vec::new(),
                    error: Some(e.to_string()),
                });
                Err(e)
            }
        }
    }

    fn skip(&mut self, name: &str) {
        self.stages.push(StageRecord { stage: name.into(), status: StageStatus::Skipped, artifacts: Vec::new(), error: None });
    }
}

fn stages(cfg: &RunConfig, dir: &Path, rec: &mut Recorder, data: Option<(Dataset, Dataset)>) -> Result<ParetoPoint> {
    let (train, test) = rec.stage("data", &[], || match data {
        Some(d) => Ok(d),
        None => cfg.load_data(),
    })?;
    let search = if cfg.variant == Variant::Original {
        rec.skip("search");
        None
    } else {
        Some(rec.stage("search", &[SEARCH_FILE], || {
            let r = run_search(&cfg.search_config(cfg.variant, cfg.seed), &cfg.network, cfg.plan()?, &train)?;
            write_json(&dir.join(SEARCH_FILE), &r)?;
            Ok(r)
        })?)
    };
    let ckpt = format!("{CKPT_DIR}/{}", crate::checkpoint::WEIGHTS_FILE);
    let arch = format!("{CKPT_DIR}/{}", crate::train::ARCH_FILE);
    let (model, top) = rec.stage("train", &[&arch, &ckpt, METRICS_FILE], || {
        let mut m = build_final_model(arch_for(cfg, search.as_ref())?)?;
        let history = train_model(&mut m, &train, &cfg.train_config(cfg.seed), Some(&test))?;
        m.save(&dir.join(CKPT_DIR))?;
        write_file(&dir.join(METRICS_FILE), metrics_csv(&history)?.as_bytes())?;
        let top = evaluate_topk(&m.net, &test)?;
        Ok((m, top))
    })?;
    let ir = rec.stage("lower", &[IR_FILE], || {
        let g = lower_model(&model)?;
        write_json(&dir.join(IR_FILE), &g)?;
        Ok(g)
    })?;
    let est = rec.stage("estimate", &[ESTIMATE_FILE], || {
        let e = estimate_ir(&ir, &cfg.hw)?;
        write_json(&dir.join(ESTIMATE_FILE), &e)?;
        Ok(e.estimate)
    })?;
    rec.stage("report", &[POINT_FILE], || {
        let p = ParetoPoint {
            label: cfg.label(),
            variant: cfg.variant.label().into(),
            wbits: cfg.wbits,
            abits: cfg.abits,
            error_pct: top.error_pct(),
            bram: est.bram,
            lut: est.lut,
            latency_ms: est.latency_ms,
            throughput_fps: est.throughput_fps,
        };
        write_json(&dir.join(POINT_FILE), &p)?;
        Ok(p)
    })
}

/// Runs every stage for a single (non-grid) config. The manifest is written
/// even when a stage fails; the failure is recorded there and returned.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome> {
    run_pipeline_with(cfg, None)
}

/// As [`run_pipeline`], reusing already loaded `(train, test)` data.
pub fn run_pipeline_with(cfg: &RunConfig, data: Option<(Dataset, Dataset)>) -> Result<RunOutcome> {
    if cfg.grid.is_some() {
        return Err(NashError::Config("run_pipeline takes a single run; use run_grid".into()));
    }
    cfg.validate()?;
    let dir = run_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| NashError::io(&dir, e))?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    let mut rec = Recorder { dir: &dir, stages: Vec::new() };
    let result = stages(cfg, &dir, &mut rec, data);
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        label: cfg.label(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        stages: rec.stages,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    let point = result?;
    Ok(RunOutcome { dir, manifest, point })
}

/// Expands the grid and runs each cell in order, then writes the BRAM and
/// LUT fronts (`front-bram.csv`, `front-bram.svg`, ...) next to the runs.
/// Every cell runs even if one fails; the first failure is returned.
pub fn run_grid(cfg: &RunConfig) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let mut outcomes = Vec::new();
    let mut first_err = None;
    let mut cache: std::collections::BTreeMap<u64, (Dataset, Dataset)> = Default::default();
    for run in cfg.expand() {
        // synthetic and CIFAR data only depend on the seed, so share it across variants
        let data = match cache.get(&run.seed) {
            Some(d) => d.clone(),
            None => {
                let d = run.load_data()?;
                cache.insert(run.seed, d.clone());
                d
            }
        };
        match run_pipeline_with(&run, Some(data)) {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if !outcomes.is_empty() {
        let points: Vec<ParetoPoint> = outcomes.iter().map(|o| o.point.clone()).collect();
        for key in [ResourceKey::Bram, ResourceKey::Lut] {
            let front = pareto_front(&points, key)?;
            write_file(&cfg.out_dir.join(format!("front-{}.csv", key.name())), emit_csv(&front)?.as_bytes())?;
            write_file(&cfg.out_dir.join(format!("front-{}.svg", key.name())), emit_svg(&points, &front, key)?.as_bytes())?;
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(outcomes),
    }
}
