use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apex_harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use apex_harness::config::load_config;
use apex_harness::error::{HarnessError, Result};
use apex_harness::experiment::{
    aggregate, context_with_model, evaluate_seed, prepare_seed, run_experiment, train_seed, world_for,
    zero_shot_report, ExperimentConfig,
};
use apex_harness::report::{
    alpha_table_csv, emit_records, emit_report, loss_trace_csv, write_atomic, LabeledReport, ReportFormat,
};
use clap::{Parser, Subcommand};
use serde::Serialize;

/// Base-to-novel prompt and adapter tuning on a synthetic dual encoder.
#[derive(Debug, Parser)]
#[command(name = "apex", version)]
struct Cli {
    /// TOML experiment config; APEX_<SECTION>_<KEY> variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, traces and report files.
    #[arg(long, global = true, default_value = "apex-out")]
    out: PathBuf,
    /// csv, json-lines or pretty-table.
    #[arg(long, global = true, default_value = "pretty-table", value_parser = parse_format)]
    format: ReportFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every seed; writes a checkpoint and loss trace per seed.
    Train,
    /// Evaluate a checkpoint on its seed's base and novel splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Zero-shot accuracy and relative transfer difficulty per seed.
    Rtd,
    /// Intra/inter-class similarity of zero-shot image features per seed.
    Separability,
    /// Full experiment; writes the report, alpha tables and loss traces.
    Report,
    /// Full experiment for each data separability value.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4,8")]
        values: Vec<f64>,
    },
}

fn parse_format(s: &str) -> std::result::Result<ReportFormat, String> {
    s.parse().map_err(|e: HarnessError| e.to_string())
}

fn extension(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Csv => "csv",
        ReportFormat::JsonLines => "jsonl",
        ReportFormat::PrettyTable => "txt",
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize)]
struct TrainRow {
    seed: u64,
    steps: usize,
    final_loss: f64,
    checkpoint: String,
}

#[derive(Serialize)]
struct RtdRow {
    seed: u64,
    num_classes: usize,
    zero_shot_acc: f64,
    rtd: f64,
}

#[derive(Serialize)]
struct SeparabilityRow {
    seed: u64,
    intra: f64,
    inter: f64,
    ratio: f64,
}

fn train(config: &ExperimentConfig, out: &Path, format: ReportFormat) -> Result<String> {
    ensure_dir(out)?;
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let ctx = prepare_seed(config, seed)?;
        let outcome = train_seed(config, &ctx)?;
        let path = out.join(format!("checkpoint-seed{seed}.apex"));
        write_atomic(&out.join(format!("loss-seed{seed}.csv")), loss_trace_csv(&outcome.trace)?.as_bytes())?;
        save_checkpoint(&path, &Checkpoint::new(config.clone(), seed, ctx.model, outcome.tuning))?;
        rows.push(TrainRow {
            seed,
            steps: outcome.trace.len(),
            final_loss: outcome.trace.last().map_or(f64::NAN, |r| r.loss),
            checkpoint: path.display().to_string(),
        });
    }
    emit_records(&rows, format)
}

fn eval(path: &Path, format: ReportFormat) -> Result<String> {
    let ckpt = load_checkpoint(path)?;
    let config = ckpt.metadata.experiment;
    let seed = ckpt.metadata.seed;
    let ctx = context_with_model(&config, seed, ckpt.model, &world_for(&config, seed))?;
    let seed_report = evaluate_seed(&config, &ctx, &ckpt.tuning, Vec::new())?;
    let report = aggregate(&config, vec![seed_report])?;
    emit_report(
        &[LabeledReport {
            label: format!("seed {seed}"),
            report,
        }],
        format,
    )
}

fn report(config: &ExperimentConfig, out: &Path, format: ReportFormat) -> Result<String> {
    let report = run_experiment(config)?;
    ensure_dir(out)?;
    for s in &report.per_seed {
        write_atomic(&out.join(format!("alpha-seed{}.csv", s.seed)), alpha_table_csv(&s.alpha_table)?.as_bytes())?;
        write_atomic(&out.join(format!("loss-seed{}.csv", s.seed)), loss_trace_csv(&s.loss_trace)?.as_bytes())?;
    }
    let text = emit_report(
        &[LabeledReport {
            label: "default".into(),
            report,
        }],
        format,
    )?;
    write_atomic(&out.join(format!("report.{}", extension(format))), text.as_bytes())?;
    Ok(text)
}

fn sweep(config: &ExperimentConfig, values: &[f64], out: &Path, format: ReportFormat) -> Result<String> {
    let reports = values
        .iter()
        .map(|&s| {
            let mut cfg = config.clone();
            cfg.data.separability = s;
            Ok(LabeledReport {
                label: format!("s={s}"),
                report: run_experiment(&cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let text = emit_report(&reports, format)?;
    ensure_dir(out)?;
    write_atomic(&out.join(format!("sweep.{}", extension(format))), text.as_bytes())?;
    Ok(text)
}

fn run(cli: Cli) -> Result<String> {
    let mut config = load_config(cli.config.as_deref(), std::env::vars())?;
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    match cli.command {
        Command::Train => train(&config, &cli.out, cli.format),
        Command::Eval { checkpoint } => eval(&checkpoint, cli.format),
        Command::Rtd => {
            let rows = config
                .seeds
                .iter()
                .map(|&seed| {
                    let z = zero_shot_report(&config, &prepare_seed(&config, seed)?)?;
                    Ok(RtdRow {
                        seed,
                        num_classes: z.num_classes,
                        zero_shot_acc: z.zero_shot_acc,
                        rtd: z.rtd,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            emit_records(&rows, cli.format)
        }
        Command::Separability => {
            let rows = config
                .seeds
                .iter()
                .map(|&seed| {
                    let s = zero_shot_report(&config, &prepare_seed(&config, seed)?)?.separability;
                    Ok(SeparabilityRow {
                        seed,
                        intra: s.intra,
                        inter: s.inter,
                        ratio: s.ratio,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            emit_records(&rows, cli.format)
        }
        Command::Report => report(&config, &cli.out, cli.format),
        Command::Sweep { values } => sweep(&config, &values, &cli.out, cli.format),
    }
}

/// Configuration problems are usage errors; everything else is a runtime failure.
fn exit_code(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Config(_) | HarnessError::Core(apex_core::Error::Config(_)) => 1,
        HarnessError::Stage { source, .. } => exit_code(source),
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
