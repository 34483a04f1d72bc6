//! `softguard`: generate data, train both background heads, evaluate and compare.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use softguard::distinct::IdSoftmaxMode;
use softguard::experiment::{self, ExperimentConfig};
use softguard::{Error, HeadKind};

#[derive(Parser)]
#[command(name = "softguard", version, about = "Explicit vs implicit background estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args)]
struct Opts {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Restrict to one head kind (default: both).
    #[arg(long, global = true, value_name = "explicit|implicit")]
    head: Option<HeadKind>,
    /// Restrict to one seed (default: the config's seed list).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory: the data root for `generate`, the maps directory for
    /// `maps`, the runs directory otherwise.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Number of equal-width confidence bins for ECE.
    #[arg(long, global = true, value_name = "M")]
    ece_bins: Option<usize>,
    /// In-distribution membership: softmax over the ID sub-vector or the full vector.
    #[arg(long, global = true, value_name = "sub|full")]
    id_softmax: Option<IdSoftmaxMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train, val, noise and texture datasets.
    Generate,
    /// Train one checkpoint per (head, seed).
    Train,
    /// Evaluate checkpoints on the val, texture and noise sets.
    Eval,
    /// Render membership maps and the predicted segmentation for images.
    Maps {
        #[arg(required = true, value_name = "IMAGE")]
        images: Vec<PathBuf>,
    },
    /// Side-by-side explicit/implicit table with directional checks.
    Compare,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::Io { .. } | Error::Format(_) | Error::Generation(_) => 2,
        Error::Divergence { .. } => 3,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("SOFTGUARD_THREADS") else {
        return Ok(());
    };
    match value.trim().parse::<usize>() {
        Ok(n) if n >= 1 => {
            softguard::par::init_global(n);
            Ok(())
        }
        _ => Err(Error::InvalidArgument(format!(
            "SOFTGUARD_THREADS must be a positive integer, got {value:?}"
        ))),
    }
}

fn resolve(opts: &Opts, command: &Command) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = opts.ece_bins {
        cfg.metrics.ece_bins = m;
    }
    if let Some(mode) = opts.id_softmax {
        cfg.metrics.id_softmax = mode;
    }
    if let Some(seed) = opts.seed {
        cfg.seeds = vec![seed];
    }
    match (command, &opts.out) {
        (Command::Generate, Some(out)) => cfg.data_root = out.clone(),
        (Command::Maps { .. }, _) | (_, None) => {}
        (_, Some(out)) => cfg.out_dir = out.clone(),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn heads(opts: &Opts) -> Vec<HeadKind> {
    opts.head.map_or(HeadKind::ALL.to_vec(), |h| vec![h])
}

fn run(cli: Cli) -> Result<(), Error> {
    init_threads()?;
    let opts = &cli.opts;
    let cfg = resolve(opts, &cli.command)?;
    let hash = cfg.hash();
    match &cli.command {
        Command::Generate => {
            for m in experiment::generate(&cfg, opts.force)? {
                println!("{:<8} {:>5} items  {}", m.dataset_id, m.items.len(), cfg.split_dir(&m.dataset_id).display());
            }
            println!("config {hash}");
        }
        Command::Train => {
            for &seed in &cfg.seeds {
                for head in heads(opts) {
                    let (_, log) = experiment::train_run(&cfg, head, seed, opts.force)?;
                    let last = log.last().expect("at least one epoch");
                    println!(
                        "{}: {} epochs, loss {:.4}, pixel accuracy {:.4}  {}",
                        experiment::run_name(head, seed),
                        log.len(),
                        last.loss,
                        last.pixel_accuracy,
                        cfg.checkpoint_path(head, seed).display()
                    );
                }
            }
        }
        Command::Eval => {
            let sets = experiment::load_eval_sets(&cfg)?;
            for &seed in &cfg.seeds {
                for head in heads(opts) {
                    let report = experiment::eval_run(&cfg, head, seed, &sets)?;
                    let row = experiment::table_row(&report)?;
                    let cells: Vec<String> = experiment::COMPARE_COLUMNS
                        .iter()
                        .zip(row)
                        .map(|(c, v)| format!("{c}={v:.3}"))
                        .collect();
                    println!("{}: {}", experiment::run_name(head, seed), cells.join(" "));
                }
            }
        }
        Command::Maps { images } => {
            let root = opts.out.clone().unwrap_or_else(|| cfg.out_dir.join("maps"));
            let seed = cfg.seeds[0];
            for head in heads(opts) {
                let params = experiment::load_run(&cfg, head, seed)?;
                let dir = root.join(experiment::run_name(head, seed));
                for path in experiment::render_maps(&cfg, &params, images, &dir, opts.force)? {
                    println!("{}", path.display());
                }
            }
        }
        Command::Compare => {
            let report = experiment::compare(&cfg, &cfg.seeds)?;
            print!("{}", report.render_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("softguard: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
