use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nash_core::config::{DataSource, HwParams, RunConfig};
use nash_core::hwlower::GraphIR;
use nash_core::pipeline::{
    arch_for, estimate_ir, lower_model, read_json, run_grid, run_pipeline, write_file, write_json, METRICS_FILE,
};
use nash_core::report::{emit_csv, emit_svg, pareto_front, ParetoPoint, ResourceKey};
use nash_core::search::{run_search, SearchResult, Variant};
use nash_core::train::{build_final_model, evaluate_topk, metrics_csv, train_model, Model};
use nash_core::{NashError, Result};

#[derive(Parser)]
#[command(name = "nash", version, about = "Hardware-aware architecture search for quantized CNNs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search a cell architecture and write the derived cells.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `synthetic` or a CIFAR-10 binary directory.
        #[arg(long)]
        data: Option<String>,
        #[arg(long, default_value = "result.json")]
        out: PathBuf,
    },
    /// Train the final model for a search result (or the baseline backbone).
    Train {
        /// Search result; omit for the original backbone.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ckpt")]
        out: PathBuf,
    },
    /// Export a checkpoint to the streamlined inference IR.
    Lower {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "model.ir.json")]
        out: PathBuf,
    },
    /// Fold an IR and estimate cycles, BRAM and LUT.
    Estimate {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        clock: f64,
        #[arg(long, default_value_t = 64)]
        cap_pe: usize,
        #[arg(long, default_value_t = 64)]
        cap_simd: usize,
        #[arg(long, default_value_t = 0.35)]
        kappa1: f64,
        #[arg(long, default_value_t = 0.08)]
        kappa2: f64,
        #[arg(long, default_value = "estimate.json")]
        out: PathBuf,
    },
    /// Pareto front of run points.
    Pareto {
        /// `run.json` files or run directories containing one.
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "bram")]
        resource: String,
        #[arg(long, default_value = "front.csv")]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Full pipeline for one config, or every cell of its grid.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: Option<&Path>, data: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env();
            c
        }
    };
    match data {
        None => {}
        Some("synthetic") => {
            if !matches!(cfg.data, DataSource::Synthetic { .. }) {
                cfg.data = DataSource::default();
            }
        }
        Some(dir) => cfg.data = DataSource::Cifar10 { dir: dir.into(), limit: 0 },
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Search { config, data, out } => {
            let cfg = load_config(config.as_deref(), data.as_deref())?;
            if cfg.variant == Variant::Original {
                return Err(NashError::Config("variant `o` has nothing to search".into()));
            }
            let (train, _) = cfg.load_data()?;
            let r = run_search(&cfg.search_config(cfg.variant, cfg.seed), &cfg.network, cfg.plan()?, &train)?;
            write_json(&out, &r)?;
            println!("searched {} cells ({}), audit events: {}", r.cells.len(), cfg.label(), r.audit.len());
        }
        Cmd::Train { arch, data, config, out } => {
            let cfg = load_config(config.as_deref(), data.as_deref())?;
            let search: Option<SearchResult> = arch.as_deref().map(read_json).transpose()?;
            let (train, test) = cfg.load_data()?;
            let mut m = build_final_model(arch_for(&cfg, search.as_ref())?)?;
            let history = train_model(&mut m, &train, &cfg.train_config(cfg.seed), Some(&test))?;
            m.save(&out)?;
            write_file(&out.join(METRICS_FILE), metrics_csv(&history)?.as_bytes())?;
            let top = evaluate_topk(&m.net, &test)?;
            println!("top1 {:.4} top5 {:.4} -> {}", top.top1, top.top5, out.display());
        }
        Cmd::Lower { ckpt, out } => {
            let m = Model::load(&ckpt)?;
            let g = lower_model(&m)?;
            write_json(&out, &g)?;
            println!("{} nodes -> {}", g.nodes.len(), out.display());
        }
        Cmd::Estimate { ir, clock, cap_pe, cap_simd, kappa1, kappa2, out } => {
            let g: GraphIR = read_json(&ir)?;
            g.validate()?;
            let hw = HwParams { clock_mhz: clock, cap_pe, cap_simd, kappa1, kappa2 };
            if !(clock > 0.0) || cap_pe == 0 || cap_simd == 0 {
                return Err(NashError::Config("clock must be positive and caps >= 1".into()));
            }
            let e = estimate_ir(&g, &hw)?;
            write_json(&out, &e)?;
            let r = &e.estimate;
            println!(
                "latency {:.4} ms, {:.1} fps, BRAM {}, LUT {:.0}",
                r.latency_ms, r.throughput_fps, r.bram, r.lut
            );
        }
        Cmd::Pareto { inputs, resource, out, plot } => {
            let key: ResourceKey = resource.parse().map_err(|e: NashError| NashError::Config(e.to_string()))?;
            let mut points = Vec::new();
            for p in inputs {
                let file = if p.is_dir() { p.join(nash_core::pipeline::POINT_FILE) } else { p };
                points.push(read_json::<ParetoPoint>(&file)?);
            }
            let front = pareto_front(&points, key)?;
            write_file(&out, emit_csv(&front)?.as_bytes())?;
            if let Some(svg) = plot {
                write_file(&svg, emit_svg(&points, &front, key)?.as_bytes())?;
            }
            for p in &front {
                println!("{:<12} error {:6.2}%  {} {}", p.label, p.error_pct, key.name(), key.of(p));
            }
        }
        Cmd::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcomes = if cfg.grid.is_some() { run_grid(&cfg)? } else { vec![run_pipeline(&cfg)?] };
            for o in outcomes {
                let p = &o.point;
                println!(
                    "{:<10} seed {:<3} error {:6.2}%  BRAM {:5}  LUT {:9.0}  latency {:.4} ms  {}",
                    p.label,
                    o.manifest.seed,
                    p.error_pct,
                    p.bram,
                    p.lut,
                    p.latency_ms,
                    o.dir.display()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
