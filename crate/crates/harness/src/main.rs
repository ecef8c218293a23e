use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use sbp_core::analysis::{measure_ratios, predict_space_ratio_stt, predict_time_ratio};
use sbp_harness::compare::compare_runs;
use sbp_harness::config::{ExperimentConfig, Mode, ModelFamily};
use sbp_harness::data::{gen_synthetic_dataset, DatasetSpec};
use sbp_harness::train::{audit_grad, audit_memory, run_experiment, RunRecord};

#[derive(Parser)]
#[command(name = "sbp", about = "Stochastic backpropagation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset of a config as CSV.
    GenData(Overrides),
    /// Train one configuration and write its record.
    Run(Overrides),
    /// Compare run records (record.json files or run directories).
    Compare {
        records: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cached elements and op counts of one step against end-to-end.
    AuditMemory(Overrides),
    /// Gradients of one stochastic-backprop step against the masked oracle.
    AuditGrad(Overrides),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    keep_ratio: Option<f64>,
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    boundary: Option<usize>,
}

impl Overrides {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(r) = self.keep_ratio {
            cfg.sbp.keep_ratio = r;
        }
        if let Some(s) = &self.sampler {
            cfg.sbp.sampler = s.clone();
        }
        if let Some(b) = self.boundary {
            cfg.sbp.boundary = Some(b);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn record_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("record.json")
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData(o) => {
            let cfg = o.load()?;
            let ds = gen_synthetic_dataset(&DatasetSpec::from_config(&cfg))?;
            let path = match &cfg.output {
                Some(p) if p.extension().is_some_and(|e| e == "csv") => p.clone(),
                Some(p) => {
                    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
                    p.join("dataset.csv")
                }
                None => PathBuf::from("dataset.csv"),
            };
            ds.write_csv(&path)?;
            println!("{} {}", path.display(), ds.hash());
        }
        Command::Run(o) => {
            let cfg = o.load()?;
            let rec = run_experiment(&cfg)?;
            println!(
                "{} r={} seed={} test_accuracy={:.4} cached_elements={} status={}",
                rec.mode,
                rec.keep_ratio,
                rec.seed,
                rec.test_accuracy,
                rec.cached_elements_total,
                rec.aborted.as_deref().unwrap_or("ok")
            );
            return Ok(rec.aborted.is_none());
        }
        Command::Compare { records, out } => {
            if records.len() < 2 {
                bail!("compare needs at least two records");
            }
            let recs = records
                .iter()
                .map(|p| RunRecord::load(&record_path(p)))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = compare_runs(&recs, out.as_deref())?;
            if out.is_none() {
                let mut w = csv::Writer::from_writer(std::io::stdout());
                for r in &rows {
                    w.serialize(r)?;
                }
                w.flush()?;
            }
        }
        Command::AuditMemory(o) => {
            let cfg = o.load()?;
            let a = audit_memory(&cfg)?;
            let m = measure_ratios(&a.e2e, &a.run)?;
            println!("e2e cached_elements={}", a.e2e.memory.cached_elements_total);
            println!("{} cached_elements={}", cfg.mode, a.run.memory.cached_elements_total);
            println!("space_ratio={:.4} time_ratio={:.4}", m.space, m.time);
            if cfg.mode == Mode::Sbp {
                let r = cfg.sbp.keep_ratio;
                if cfg.model.family == ModelFamily::Stt && cfg.boundary() == 1 {
                    let ms = a.e2e.memory.layer(Some(0)) as f64;
                    let mc = a.e2e.memory.cached_elements_total as f64 - ms;
                    println!("predicted_space_ratio={:.4}", predict_space_ratio_stt(ms, mc, r)?);
                }
                println!("predicted_time_ratio={:.4}", predict_time_ratio(r)?);
            }
        }
        Command::AuditGrad(o) => {
            let cfg = o.load()?;
            let a = audit_grad(&cfg)?;
            println!(
                "wrapped={:?} kept={}/{} max_rel_error={:.3e}",
                a.wrapped, a.kept, a.nodes, a.max_rel_error
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
