//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand};
use log::info;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, read_dataset, write_dataset, Dataset, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::probe::{layer_unique_token_stats, render_report};
use crate::train::{evaluate, gradient_suite, probe_dataset, train};

/// Relative error above which `gradcheck` fails.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "ctcprobe", version, about = "CTC-guided attention probing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Args)]
struct Flags {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "X")]
    lambda: Option<f64>,
    #[arg(long, global = true, value_name = "X")]
    alpha: Option<f64>,
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    data: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate train.acpd and test.acpd into --out
    Synth,
    /// Train on --data and write --checkpoint
    Train,
    /// Greedy-decode --data with --checkpoint and report token error rate
    Eval,
    /// Write one probe TSV per utterance of --data into --out
    Probe,
    /// Per-layer unique-token statistics over --data
    Stats,
    /// Finite-difference check of the joint loss gradient
    Gradcheck,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn require<'a>(flag: &'a Option<PathBuf>, name: &str, cmd: &str) -> std::result::Result<&'a Path, Failure> {
    flag.as_deref()
        .ok_or_else(|| Failure::Usage(format!("`{cmd}` requires --{name}")))
}

fn resolve_config(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(lambda) = flags.lambda {
        cfg.train.lambda = lambda;
    }
    if let Some(alpha) = flags.alpha {
        cfg.train.alpha = alpha;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes to `<out>/<name>` when `--out` is given, otherwise to stdout.
fn emit(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join(name), text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(flags: &Flags, cmd: &str) -> std::result::Result<(Model, Dataset), Failure> {
    let ck_path = require(&flags.checkpoint, "checkpoint", cmd)?;
    let data_path = require(&flags.data, "data", cmd)?;
    let model = load_checkpoint(ck_path)?.to_model()?;
    let data = read_dataset(data_path)?;
    Ok((model, data))
}

fn run_command(cmd: Command, flags: &Flags) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Synth => {
            let out = require(&flags.out, "out", "synth")?;
            let cfg = resolve_config(flags)?;
            let all = generate_synthetic(&cfg.synth)?;
            let (train_set, test_set) = all.split_at(cfg.synth.utterances - cfg.test_utterances);
            create_dir(out)?;
            write_dataset(&train_set, &out.join("train.acpd"))?;
            write_dataset(&test_set, &out.join("test.acpd"))?;
            println!("wrote {} train and {} test utterances to {}", train_set.len(), test_set.len(), out.display());
        }
        Command::Train => {
            let data_path = require(&flags.data, "data", "train")?;
            let ck_path = require(&flags.checkpoint, "checkpoint", "train")?;
            let cfg = resolve_config(flags)?;
            let data = read_dataset(data_path)?;
            let mut model_cfg = cfg.model.clone();
            model_cfg.vocab_size = data.vocab_size;
            model_cfg.feature_dim = data.feature_dim;
            let outcome = train(&data, &model_cfg, &cfg.train)?;
            save_checkpoint(
                &Checkpoint::from_model(&outcome.model, outcome.steps, outcome.rng_state),
                ck_path,
            )?;
            let mut tsv = String::from("epoch\tloss\tloss_per_token\tctc\tattention\treg\n");
            for e in &outcome.history {
                let _ = writeln!(
                    tsv,
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    e.epoch + 1,
                    e.loss,
                    e.loss_per_token,
                    e.ctc,
                    e.attention,
                    e.reg
                );
            }
            emit(flags.out.as_deref(), "history.tsv", &tsv)?;
            info!("saved {} after {} steps", ck_path.display(), outcome.steps);
        }
        Command::Eval => {
            let (model, data) = load(flags, "eval")?;
            let report = evaluate(&data, &model)?;
            let vocab = Vocab::with_size(data.vocab_size);
            let mut tsv = String::from("utterance\tter\thypothesis\n");
            for u in &report.utterances {
                let hyp: Vec<&str> = u.hypothesis.iter().map(|&t| vocab.name(t)).collect();
                let _ = writeln!(tsv, "{}\t{:.6}\t{}", u.id, u.ter, hyp.join(" "));
            }
            let _ = writeln!(tsv, "mean\t{:.6}\t", report.mean_ter);
            emit(flags.out.as_deref(), "eval.tsv", &tsv)?;
        }
        Command::Probe => {
            let out = require(&flags.out, "out", "probe")?;
            let (model, data) = load(flags, "probe")?;
            let cfg = resolve_config(flags)?;
            let vocab = Vocab::with_size(data.vocab_size);
            create_dir(out)?;
            for report in probe_dataset(&model, &data)? {
                let text = render_report(&report, &vocab, cfg.posterior_threshold)?;
                write_file(&out.join(format!("{}.tsv", report.utterance_id)), &text)?;
            }
        }
        Command::Stats => {
            let (model, data) = load(flags, "stats")?;
            let stats = layer_unique_token_stats(&probe_dataset(&model, &data)?)?;
            let mut tsv = String::from("layer\tmean_unique\tstd_unique\n");
            for s in &stats {
                let _ = writeln!(tsv, "{}\t{:.4}\t{:.4}", s.layer + 1, s.mean, s.std);
            }
            emit(flags.out.as_deref(), "stats.tsv", &tsv)?;
        }
        Command::Gradcheck => {
            let seed = flags.seed.unwrap_or(0);
            let report = gradient_suite(seed, 1e-5)?;
            println!(
                "checked {} scalars; max relative error {:.3e} at {}[{}]",
                report.checked, report.max_rel_error, report.worst_param, report.worst_index
            );
            if report.max_rel_error > GRADCHECK_TOL {
                return Err(Failure::Runtime(Error::Inconsistency(format!(
                    "gradient error {:.3e} exceeds {GRADCHECK_TOL:e}",
                    report.max_rel_error
                ))));
            }
        }
    }
    Ok(())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn cli_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let _ = e.print();
                    1
                }
            };
        }
    };
    match run_command(cli.command, &cli.flags) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
