use std::path::{Path, PathBuf};
use std::process::ExitCode;

use affine_ssl::data::{data_root_from_env, load_dataset, DatasetId, LoadOptions, Split};
use affine_ssl::eval::{evaluate, EvalRecord};
use affine_ssl::experiment::{
    read_store, render_curves, render_tables, run_cells, run_grid, Cell, ExperimentConfig, GridOptions, GridReport, GridSpec,
};
use affine_ssl::rng::{derive_seed, purpose};
use affine_ssl::train::load_model;
use affine_ssl::Error;
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_RUN: u8 = 4;

#[derive(Parser)]
#[command(name = "affine-ssl", version, about = "Self-supervised pretraining with an affine-prediction module")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Directory holding the datasets (defaults to $AFFINE_SSL_DATA_ROOT).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Override the configuration's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Built-in profile (smoke or paper) used when no config file is given.
    #[arg(long, default_value = "smoke")]
    profile: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train and probe one configuration under each of its seeds.
    Run {
        /// Experiment TOML file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cells to run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run every cell of an ablation grid, skipping finished cells.
    Grid {
        /// Grid TOML file: a [grid] table of axes plus an optional base configuration.
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Linear-probe a checkpoint.
    Eval {
        /// Checkpoint file.
        checkpoint: PathBuf,
        /// Experiment TOML the checkpoint was trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Datasets to probe (defaults to the configuration's evaluation datasets).
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Render result tables and accuracy curves from an output directory.
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

/// Maps a failure onto the process exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Ingestion { .. }) => EXIT_DATA,
        _ => EXIT_RUN,
    }
}

fn base_config(path: Option<&Path>, common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::profile(&common.profile)?,
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_root(common: &Common) -> Option<PathBuf> {
    common.data_root.clone().or_else(data_root_from_env)
}

fn summarize(report: &GridReport) -> anyhow::Result<()> {
    println!("ran {}, skipped {}, failed {}", report.ran.len(), report.skipped.len(), report.failed.len());
    for f in &report.failed {
        eprintln!("cell {} failed: {}", &f.hash[..16], f.message);
    }
    match report.failed.first() {
        None => Ok(()),
        Some(f) if report.failed.iter().all(|f| f.data_error) => Err(Error::Ingestion { path: PathBuf::new(), reason: f.message.clone() }.into()),
        Some(f) => Err(anyhow::anyhow!("{} cell(s) failed, first: {}", report.failed.len(), f.message)),
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run { config, jobs, common } => {
            let cfg = base_config(config.as_deref(), &common)?;
            let cells: Vec<Cell> = cfg
                .seeds
                .iter()
                .map(|&s| {
                    let mut c = cfg.clone();
                    c.seeds = vec![s];
                    Cell::new(c)
                })
                .collect();
            let opts = GridOptions { out_dir: common.out.clone(), data_root: data_root(&common), jobs };
            summarize(&run_cells(&cells, &opts))
        }
        Command::Grid { spec, jobs, common } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let mut grid = GridSpec::from_toml(&text, Some(ExperimentConfig::profile(&common.profile)?))?;
            if let Some(seed) = common.seed {
                grid.base.seeds = vec![seed];
                grid.axes.seed.clear();
            }
            let opts = GridOptions { out_dir: common.out.clone(), data_root: data_root(&common), jobs };
            summarize(&run_grid(&grid, &opts)?)
        }
        Command::Eval { checkpoint, config, datasets, common } => {
            let cfg = base_config(config.as_deref(), &common)?;
            let seed = cfg.seeds[0];
            let (header, model) = load_model(&cfg.run_spec(seed), &checkpoint)?;
            let ids: Vec<DatasetId> = if datasets.is_empty() {
                cfg.data.eval_datasets()
            } else {
                datasets.iter().map(|d| d.parse()).collect::<Result<_, _>>()?
            };
            let root = data_root(&common);
            let resolution = cfg.data.resolution();
            std::fs::create_dir_all(&common.out)?;
            let sink = common.out.join("probes.ndjson");
            for id in ids {
                let load = |split, limit| load_dataset(id, root.as_deref(), split, &LoadOptions { resolution, limit, seed: 0 });
                let record = match load(Split::Train, cfg.probe.train_limit).and_then(|tr| Ok((tr, load(Split::Eval, cfg.probe.eval_limit)?))) {
                    Ok((train, test)) => {
                        let label = checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                        EvalRecord::Probe(evaluate(&model, &train, &test, &cfg.probe, derive_seed(seed, &[purpose::PROBE]), &label, header.epoch)?)
                    }
                    Err(e @ (Error::Ingestion { .. } | Error::Config(_))) => {
                        log::warn!("skipping {id}: {e}");
                        EvalRecord::Skipped { dataset: id, epoch: header.epoch, reason: e.to_string() }
                    }
                    Err(e) => return Err(e.into()),
                };
                let line = serde_json::to_string(&record)?;
                println!("{line}");
                use std::io::Write;
                let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&sink).with_context(|| sink.display().to_string())?;
                writeln!(f, "{line}")?;
            }
            Ok(())
        }
        Command::Report { out } => {
            let store = read_store(&out)?;
            let report = render_tables(&store)?;
            let markdown = report.to_markdown();
            std::fs::write(out.join("report.md"), &markdown)?;
            std::fs::write(out.join("report.json"), report.to_json()?)?;
            let figures = render_curves(&store, &out.join("curves"))?;
            print!("{markdown}");
            println!("\nwrote {} and {} curve files", out.join("report.md").display(), figures.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
