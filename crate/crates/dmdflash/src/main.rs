//! Command-line front end: training with checkpoint/metrics persistence,
//! checkpoint evaluation, sample export, and the canned ablation suites.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dmdflash::checkpoint;
use dmdflash::config::RunConfig;
use dmdflash::suites;
use dmdflash::trainer::{export_samples, Event, Trainer};
use dmdflash::{Error, Result};

#[derive(Parser)]
#[command(name = "dmdflash", version, about = "Few-step diffusion distillation on analytic mixture targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, optionally resuming from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Recompute all metrics for a checkpoint and export a sample cloud.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
    },
    /// Run a named ablation suite over a shared seed set.
    Ablate {
        #[arg(long)]
        suite: String,
        /// Comma-separated seed list; defaults to 0,1,2,3,4.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Export clean generator samples from a checkpoint as CSV.
    ExportSamples {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
    },
}

/// Output root override; when set, configured output directories are
/// re-rooted underneath it.
fn out_root() -> Option<PathBuf> {
    std::env::var_os("DMDFLASH_OUT").map(PathBuf::from)
}

fn resolve_out_dir(configured: &str) -> PathBuf {
    match out_root() {
        Some(root) => root.join(configured),
        None => PathBuf::from(configured),
    }
}

/// Output directory for checkpoint-relative artifacts (eval.json, samples.csv).
fn ckpt_out_dir(ckpt: &Path) -> PathBuf {
    match out_root() {
        Some(root) => root,
        None => ckpt.parent().unwrap_or(Path::new(".")).to_path_buf(),
    }
}

fn cmd_train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let mut trainer = match resume {
        Some(ckpt_path) => {
            // the checkpoint's config echo governs the resumed run
            let (session, state) = checkpoint::load(ckpt_path)?;
            Trainer::from_parts(session, state)
        }
        None => {
            let config = RunConfig::from_path(config_path)?;
            Trainer::new(config)?
        }
    };
    let out_dir = resolve_out_dir(&trainer.session.config.out_dir);
    fs::create_dir_all(&out_dir)?;
    if trainer.is_done() {
        println!("run already complete at {} updates; nothing to do", trainer.state.total_updates());
        return Ok(());
    }
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .write(true)
        .open(&metrics_path)?;
    trainer.run(|session, event| match event {
        Event::Metrics(rec) => {
            let line = serde_json::to_string(rec)
                .map_err(|e| Error::InvalidArgument(format!("metrics serialization: {e}")))?;
            writeln!(metrics_file, "{line}")?;
            metrics_file.flush()?;
            Ok(())
        }
        Event::Checkpoint(state) => {
            let path = out_dir.join(format!("ckpt_{}.bin", state.total_updates()));
            checkpoint::save(&path, &session.config, state)
        }
    })?;
    println!(
        "trained to {} updates; outputs in {}",
        trainer.state.total_updates(),
        out_dir.display()
    );
    Ok(())
}

fn write_samples_csv(path: &Path, samples: &dmdflash::numerics::Tensor, conditions: &[i64]) -> Result<()> {
    let d = samples.shape()[1];
    let mut file = fs::File::create(path)?;
    for (i, cond) in conditions.iter().enumerate() {
        let row = &samples.data()[i * d..(i + 1) * d];
        for v in row {
            write!(file, "{v},")?;
        }
        writeln!(file, "{cond}")?;
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, n: usize) -> Result<()> {
    let (session, state) = checkpoint::load(ckpt)?;
    let trainer = Trainer::from_parts(session, state);
    let record = trainer.evaluate_now()?;
    let out_dir = ckpt_out_dir(ckpt);
    fs::create_dir_all(&out_dir)?;
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::InvalidArgument(format!("metrics serialization: {e}")))?;
    fs::write(out_dir.join("eval.json"), json + "\n")?;
    let (samples, conditions) = export_samples(&trainer.state, &trainer.session, n)?;
    write_samples_csv(&out_dir.join("samples.csv"), &samples, &conditions)?;
    println!(
        "kl={} coverage={} mean_reward={}; wrote eval.json and samples.csv to {}",
        record.kl_gen_to_teacher,
        record.mode_coverage,
        record.mean_reward,
        out_dir.display()
    );
    Ok(())
}

fn cmd_export_samples(ckpt: &Path, n: usize) -> Result<()> {
    let (session, state) = checkpoint::load(ckpt)?;
    let (samples, conditions) = export_samples(&state, &session, n)?;
    let out_dir = ckpt_out_dir(ckpt);
    fs::create_dir_all(&out_dir)?;
    let path = out_dir.join("samples.csv");
    write_samples_csv(&path, &samples, &conditions)?;
    println!("wrote {n} samples to {}", path.display());
    Ok(())
}

fn cmd_ablate(suite: &str, seeds: &[u64]) -> Result<()> {
    let runs = suites::run_suite(suite, seeds)?;
    let out_dir = resolve_out_dir(&format!("runs/ablate_{suite}"));
    fs::create_dir_all(&out_dir)?;
    suites::write_runs_csv(&out_dir.join("runs.csv"), &runs)?;
    suites::write_summary_csv(&out_dir.join("summary.csv"), &runs)?;
    println!(
        "{} runs complete; wrote runs.csv and summary.csv to {}",
        runs.len(),
        out_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Eval { ckpt, n } => cmd_eval(&ckpt, n),
        Command::Ablate { suite, seeds } => {
            let seeds = seeds.unwrap_or_else(|| suites::DEFAULT_SEEDS.to_vec());
            cmd_ablate(&suite, &seeds)
        }
        Command::ExportSamples { ckpt, n } => cmd_export_samples(&ckpt, n),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        Error::NanAbort { .. } => 3,
        Error::Io(_) => 4,
        Error::CheckpointVersion { .. } => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
