mod config;
mod report;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use cnnprune::finetune::{fine_tune_with, FineTuneConfig};
use cnnprune::model::{build_model, count_params, load_checkpoint, save_checkpoint};
use cnnprune::tree::{load_session, read_manifest, save_session, PruneTree, SessionConfig, MANIFEST};

use crate::config::{parse_ratio, usage, Config, UsageError};
use crate::report::Report;

#[derive(Parser)]
#[command(name = "cnnprune", version, about = "Iterative structured filter pruning for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the initial (root) model and write its checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Auto-prune a checkpoint and write the session plus report.json/report.csv.
    Autoprune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fraction of the remaining filters removed per iteration, e.g. 1/3.
        #[arg(long, value_parser = parse_ratio)]
        ratio: Option<f64>,
        #[arg(long = "stop-acc")]
        stop_acc: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print a session report.
    Export {
        #[arg(long)]
        session: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a session over HTTP. A missing session is created from --checkpoint.
    Serve {
        #[arg(long)]
        session: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of built front-end assets served at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn train(config: Option<&Path>, seed: Option<u64>, epochs: Option<usize>, out: &Path) -> anyhow::Result<()> {
    let mut cfg = Config::load_or_default(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let data = cfg.dataset.load().context("loading dataset")?;
    let arch = cfg.architecture(data.train.image_shape(), data.train.class_names.clone())?;
    let model = build_model(arch, cfg.train.seed)?;
    eprintln!(
        "training {} parameters on {} images for {} epochs",
        count_params(&model),
        data.train.len(),
        cfg.train.epochs
    );
    let schedule = FineTuneConfig {
        delta_loss: 0.0,
        target_accuracy: 1.0,
        max_epochs: cfg.train.epochs,
        learning_rate: cfg.train.learning_rate,
        optimizer: cfg.train.optimizer,
        batch_size: cfg.train.batch_size,
        seed: cfg.train.seed,
        drop_last: false,
    };
    let (trained, trace) = fine_tune_with(
        &model,
        &data.train,
        &data.test,
        &schedule,
        &mut |s| eprintln!("epoch {}: loss {:.5}, test accuracy {:.4}", s.epoch, s.mean_loss, s.test_accuracy),
        None,
    )?;
    let acc = trace.epoch_accuracies.last().copied().unwrap_or(0.0);
    save_checkpoint(&trained, out)?;
    println!("final accuracy: {acc:.4}");
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn write_reports(dir: &Path) -> anyhow::Result<Report> {
    let report = Report::from_manifest(&read_manifest(dir)?);
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    std::fs::write(dir.join("report.csv"), report.to_csv()?)?;
    Ok(report)
}

fn autoprune(
    checkpoint: &Path,
    ratio: Option<f64>,
    stop_acc: Option<f64>,
    out: &Path,
    seed: Option<u64>,
    config: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = Config::load_or_default(config)?;
    let ratio = ratio
        .or(cfg.autoprune.ratio)
        .ok_or_else(|| usage("--ratio is required (or autoprune.ratio in the config)"))?;
    parse_ratio(&ratio.to_string()).map_err(usage)?;
    let stop = stop_acc.or(cfg.autoprune.stop_accuracy).unwrap_or(cfg.finetune.target_accuracy);
    if !(0.0..=1.0).contains(&stop) {
        return Err(usage(format!("--stop-acc {stop} must lie in [0, 1]")));
    }
    if let Some(s) = seed {
        cfg.finetune.seed = s;
        cfg.sensitivity.base_seed = s;
    }
    cfg.validate()?;
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = cfg.dataset.load().context("loading dataset")?;
    let session = SessionConfig {
        dataset: cfg.dataset.clone(),
        finetune: cfg.finetune,
        sensitivity: cfg.sensitivity,
    };
    let mut tree = PruneTree::create_session(model, data, session)?;
    let root = tree.node(0)?;
    eprintln!("root: {} filters, accuracy {:.4}", root.filter_count, root.accuracy);
    save_session(&mut tree, out)?;
    let ft = cfg.finetune;
    tree.auto_prune_with(0, ratio, stop, &ft, &mut |t, id| {
        let m = t.node(id)?;
        eprintln!(
            "node {id}: {} filters {:?}, accuracy {:.4}, {} epochs, converged {}",
            m.filter_count,
            m.layer_widths.iter().map(|w| w.filters).collect::<Vec<_>>(),
            m.accuracy,
            m.trace.as_ref().map_or(0, |t| t.epochs_used),
            m.converged
        );
        save_session(t, out)
    })?;
    let report = write_reports(out)?;
    let last = report.nodes.iter().rev().find(|n| n.converged && n.node_id != 0);
    println!("nodes: {}", report.nodes.len());
    match last {
        Some(n) => println!(
            "last converged node: {} with {} filters, accuracy {:.4}",
            n.node_id, n.filters, n.accuracy
        ),
        None => println!("no pruned node converged"),
    }
    println!("report: {}", out.join("report.json").display());
    Ok(())
}

fn export(session: &Path, format: Format, out: Option<&Path>) -> anyhow::Result<()> {
    if !session.join(MANIFEST).is_file() {
        return Err(usage(format!("{} is not a session directory", session.display())));
    }
    let report = Report::from_manifest(&read_manifest(session)?);
    let bytes = match format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv()?,
    };
    match out {
        Some(p) => std::fs::write(p, bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
        }
    }
    Ok(())
}

fn serve(
    session: &Path,
    bind: &str,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    ui: Option<PathBuf>,
) -> anyhow::Result<()> {
    let addr: SocketAddr = bind.parse().map_err(|_| usage(format!("cannot parse --bind {bind:?}")))?;
    let tree = if session.join(MANIFEST).is_file() {
        load_session(session)?
    } else {
        let checkpoint =
            checkpoint.ok_or_else(|| usage("no session found; pass --checkpoint to start a new one"))?;
        let cfg = Config::load_or_default(config)?;
        cfg.validate()?;
        let model = load_checkpoint(checkpoint)?;
        let data = cfg.dataset.load().context("loading dataset")?;
        let mut tree = PruneTree::create_session(
            model,
            data,
            SessionConfig {
                dataset: cfg.dataset.clone(),
                finetune: cfg.finetune,
                sensitivity: cfg.sensitivity,
            },
        )?;
        save_session(&mut tree, session)?;
        tree
    };
    let state = cnnprune_server::AppState::new(tree, Some(session.to_path_buf()));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(cnnprune_server::serve(state, addr, ui))
        .with_context(|| format!("serving on {addr}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            seed,
            epochs,
            out,
        } => train(config.as_deref(), *seed, *epochs, out),
        Command::Autoprune {
            checkpoint,
            ratio,
            stop_acc,
            out,
            seed,
            config,
        } => autoprune(checkpoint, *ratio, *stop_acc, out, *seed, config.as_deref()),
        Command::Export {
            session,
            format,
            out,
        } => export(session, *format, out.as_deref()),
        Command::Serve {
            session,
            bind,
            checkpoint,
            config,
            ui,
        } => serve(session, bind, checkpoint.as_deref(), config.as_deref(), ui.clone()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
