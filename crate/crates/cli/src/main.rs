//! `ctta` — continual test-time adaptation runs over synthetic detection
//! streams: pretrain a source model, adapt it online, sweep the ablation
//! matrix, and render comparison reports.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ctta_core::config::RunConfig;
use ctta_core::{engine, report};

#[derive(Parser)]
#[command(name = "ctta", version, about = "Continual test-time adaptation on a toy detector")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (`section.key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set trainer.gamma=0.02 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
        }
        for kv in &self.set {
            cfg.apply_override(kv)
                .with_context(|| format!("applying --set {kv}"))?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the source model on clean scenes and save it with provenance.
    Pretrain(CommonArgs),
    /// Adapt over the configured stream; writes trace.csv, summary.json, and
    /// the effective config into run.out_dir.
    Run(CommonArgs),
    /// Run the 6-row component matrix plus the 6-row variant matrix and
    /// write the combined comparison under run.out_dir.
    Ablate(CommonArgs),
    /// Render comparison tables over completed run directories (the first is
    /// the gain baseline).
    Report {
        /// Output directory for the report files.
        #[arg(long)]
        out: PathBuf,
        /// Run directories containing summary.json, in table order.
        dirs: Vec<PathBuf>,
    },
    /// Write stream frames as PGM images plus a labels file.
    DumpStream {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory for frames and labels.txt.
        #[arg(long)]
        out: PathBuf,
        /// Only the first N frames.
        #[arg(long)]
        frames: Option<usize>,
    },
}

fn real_main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Pretrain(common) => {
            let cfg = common.load()?;
            let map = engine::pretrain_to_file(&cfg)?;
            println!(
                "pretrained source model: clean held-out mAP@0.5 = {map:.4} -> {}",
                cfg.source_model.display()
            );
        }
        Cmd::Run(common) => {
            let cfg = common.load()?;
            let summary = engine::run(&cfg)?;
            println!(
                "run {}: mean mAP@0.5 = {:.4}, adapted {} / paused {} -> {}",
                summary.name,
                summary.mean_map,
                summary.adapted_iterations,
                summary.paused_iterations,
                cfg.out_dir.display()
            );
        }
        Cmd::Ablate(common) => {
            let cfg = common.load()?;
            let summaries = engine::ablate(&cfg)?;
            for s in &summaries {
                println!(
                    "{:<12} {:<10} mean mAP {:.4}  iter {}",
                    s.group, s.name, s.mean_map, s.adapted_iterations
                );
            }
            println!("tables -> {}", cfg.out_dir.display());
        }
        Cmd::Report { out, dirs } => {
            let rows = report::load_summaries(&dirs)?;
            report::write_report(&out, &rows)?;
            println!("report over {} runs -> {}", rows.len(), out.display());
        }
        Cmd::DumpStream {
            common,
            out,
            frames,
        } => {
            let cfg = common.load()?;
            let n = engine::dump_stream(&cfg, &out, frames)?;
            println!("wrote {n} frames -> {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = real_main() {
        // One machine-parseable line on stderr.
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
