use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fracmod::evalx::BoxSource;
use fracmod::experiment::{read_grid_reports, run_stats, write_outputs, Experiment, ExperimentConfig};
use fracmod::ingest::make_synthetic_fixture;
use fracmod::{ModalityConfig, Resolution};

#[derive(Parser)]
#[command(
    name = "fracmod",
    version,
    about = "Multimodal wrist fracture classification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment TOML; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory of the run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where test-time fracture boxes come from: gt, detector or cached.
    #[arg(long)]
    box_source: Option<BoxSource>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = &self.dataset_root {
            cfg.dataset_root = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(b) = self.box_source {
            cfg.eval.box_source = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn open(&self) -> anyhow::Result<Experiment> {
        let cfg = self.load()?;
        Experiment::open(cfg).context("loading the dataset")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a small synthetic dataset in the on-disk layout.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        rows: usize,
        #[arg(long, default_value_t = 32)]
        cols: usize,
    },
    /// Contrastive pretraining of the image encoder and report projection.
    Clip(Common),
    /// Train and evaluate a single modality configuration.
    Train {
        #[command(flatten)]
        common: Common,
        /// Modalities besides the radiograph, e.g. `seg,loc,report`.
        #[arg(long, default_value = "")]
        modalities: String,
    },
    /// Evaluate a trained configuration, optionally with another box source.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "")]
        modalities: String,
    },
    /// Train and evaluate all eight configurations, then run the statistics.
    Grid(Common),
    /// Linear probes on frozen encoders.
    Probe(Common),
    /// Recompute the paired tests from stored grid reports.
    Stats(Common),
    /// Rewrite table1.csv and the ROC curves from stored grid reports.
    Report(Common),
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Fixture {
            out,
            n,
            seed,
            rows,
            cols,
        } => {
            let cfg = ExperimentConfig::default();
            make_synthetic_fixture(&out, seed, n, Resolution::new(rows, cols), &cfg.label_space)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Clip(common) => {
            let exp = common.open()?;
            let backbone = exp.cfg.model.text.build(exp.cfg.seed)?;
            let (_, hash) = exp.clip_pretrain(backbone.as_ref())?;
            println!("clip checkpoint {hash} in {}", exp.cfg.checkpoint_dir().display());
        }
        Command::Train { common, modalities } => {
            let exp = common.open()?;
            let m = ModalityConfig::parse_list(&modalities)?;
            let text = if m.use_report {
                Some(exp.text_embeddings()?)
            } else {
                None
            };
            let row = exp.run_config(m, &exp.class_weights()?, text.as_ref(), &exp.box_provider()?)?;
            print_json(&row)?;
        }
        Command::Eval { common, modalities } => {
            let exp = common.open()?;
            let report = exp.evaluate_checkpoint(ModalityConfig::parse_list(&modalities)?)?;
            print_json(&report)?;
        }
        Command::Grid(common) => {
            let exp = common.open()?;
            let grid = exp.run_grid(&ModalityConfig::all())?;
            for row in &grid.rows {
                let auroc = row
                    .report
                    .macro_avg
                    .auroc
                    .map_or("nan".to_string(), |a| format!("{a:.4}"));
                println!(
                    "{:<24} AUROC {auroc}{}",
                    row.modalities.name(),
                    if row.reused { " (reused)" } else { "" }
                );
            }
            if !grid.failures.is_empty() {
                for (name, err) in &grid.failures {
                    eprintln!("FAILED {name}: {err}");
                }
                return Ok(ExitCode::FAILURE);
            }
            println!("results in {}", exp.cfg.output_dir.display());
        }
        Command::Probe(common) => {
            let exp = common.open()?;
            for (name, r) in exp.run_linear_probes()? {
                let auroc = r.macro_avg.auroc.map_or("nan".to_string(), |a| format!("{a:.4}"));
                println!("{name:<24} AUROC {auroc}");
            }
        }
        Command::Stats(common) => {
            let cfg = common.load()?;
            let (results, excluded) = run_stats(&cfg.output_dir, &cfg.label_space, &cfg.stats)?;
            if !excluded.is_empty() {
                println!("excluded classes: {}", excluded.join(", "));
            }
            print!("{}", fracmod::stats::render_significance(&results));
        }
        Command::Report(common) => {
            let cfg = common.load()?;
            let reports = read_grid_reports(&cfg.output_dir)?;
            if reports.is_empty() {
                bail!("no grid reports under {}", cfg.output_dir.join("reports").display());
            }
            write_outputs(&cfg.output_dir, &reports)?;
            println!(
                "wrote {} rows to {}",
                reports.len(),
                cfg.output_dir.join("table1.csv").display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
