//! `qdlr` — train once, serve any rank in the range.
//!
//! Subcommands: quantize-inspect, train, eval-sweep, compare, audit,
//! export-merged. Human-readable tables go to stdout; machine-readable
//! reports are written to files via --json. Exit code is 0 only when the
//! requested artifact was fully written.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qdlr_core::checkpoint;
use qdlr_core::config::RunConfig;
use qdlr_core::error::{Error, Result};
use qdlr_core::eval::{self, update_frequency_audit};
use qdlr_core::model::mse;
use qdlr_core::quant::{quantize, quantize_single_level, Nf4Codebook};
use qdlr_core::run;
use qdlr_core::tensor::{Matrix, Rng};
use qdlr_core::train::StepRecord;

#[derive(Parser)]
#[command(
    name = "qdlr",
    about = "Training engine for 4-bit-quantized dynamic low-rank adapters",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a matrix and report codebook, bits/param, and round-trip error
    QuantizeInspect(QuantizeInspectArgs),
    /// Train per config; writes a checkpoint and a step-history log
    Train(TrainArgs),
    /// Evaluate a checkpoint at a list of ranks against a dataset file
    EvalSweep(EvalSweepArgs),
    /// Train dynamic and static arms under one budget and compare per rank
    Compare(CompareArgs),
    /// Slice-update frequency audit of a training log
    Audit(AuditArgs),
    /// Materialize the dense effective weight at one rank
    ExportMerged(ExportMergedArgs),
}

#[derive(Args)]
struct QuantizeInspectArgs {
    /// Dense matrix container to inspect
    #[arg(long, conflicts_with = "random")]
    input: Option<PathBuf>,
    /// Generate a random standard-normal matrix: D M SEED
    #[arg(long, num_args = 3, value_names = ["D", "M", "SEED"])]
    random: Option<Vec<u64>>,
    /// First-level block size
    #[arg(long, default_value_t = 64)]
    block: usize,
    /// Second-level superblock size
    #[arg(long, default_value_t = 256)]
    superblock: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Step-history log (JSON lines); defaults to <out>.log
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write the generated dataset next to the checkpoint
    #[arg(long)]
    save_data: Option<PathBuf>,
    /// Keep dequantized bases resident during training (memory for speed)
    #[arg(long)]
    dq_cache: bool,
    /// Override the config's training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's iteration budget
    #[arg(long)]
    iterations: Option<usize>,
    /// Override the config's learning rate
    #[arg(long)]
    lr: Option<f32>,
}

#[derive(Args)]
struct EvalSweepArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset container (the test split is used)
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated rank list; defaults to 1,2,4,... clipped to r_max
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    /// Write the report as JSON to this path
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Write the report as JSON to this path
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Step-history log written by `train`
    #[arg(long)]
    log: PathBuf,
    /// Slice count to audit; defaults to the largest rank in the log
    #[arg(long)]
    r_max: Option<usize>,
    /// Write the report as JSON to this path
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ExportMergedArgs {
    /// Checkpoint holding a single-layer model
    #[arg(long)]
    ckpt: PathBuf,
    /// Rank at which to merge
    #[arg(long)]
    rank: usize,
    /// Dense matrix container output path
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::QuantizeInspect(args) => cmd_quantize_inspect(args),
        Command::Train(args) => cmd_train(args),
        Command::EvalSweep(args) => cmd_eval_sweep(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Audit(args) => cmd_audit(args),
        Command::ExportMerged(args) => cmd_export_merged(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &PathBuf, args: Option<&TrainArgs>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(a) = args {
        // flags override config-file values
        if let Some(seed) = a.seed {
            cfg.train.seed = seed;
        }
        if let Some(iterations) = a.iterations {
            cfg.train.iterations = iterations;
        }
        if let Some(lr) = a.lr {
            cfg.train.lr = lr;
        }
        cfg.validate()?;
    }
    println!("resolved configuration (hash {}):", cfg.hash());
    println!("{}", cfg.to_toml_string());
    Ok(cfg)
}

fn rmse(a: &Matrix, b: &Matrix) -> f64 {
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    (sum / a.len() as f64).sqrt()
}

fn cmd_quantize_inspect(args: QuantizeInspectArgs) -> Result<()> {
    let source = match (&args.input, &args.random) {
        (Some(path), None) => checkpoint::load_matrix(path)?,
        (None, Some(spec)) => {
            if spec.len() != 3 {
                return Err(Error::InvalidArgument {
                    context: "--random takes exactly D M SEED".into(),
                });
            }
            let (d, m, seed) = (spec[0] as usize, spec[1] as usize, spec[2]);
            println!("source: random {m}x{d} standard normal, seed {seed}");
            Matrix::gaussian(&mut Rng::new(seed), m, d, 0.0, 1.0)?
        }
        _ => {
            return Err(Error::InvalidArgument {
                context: "provide exactly one of --input or --random D M SEED".into(),
            })
        }
    };
    println!(
        "settings: block {} superblock {} ({} parameters)",
        args.block,
        args.superblock,
        source.len()
    );

    let cb = Nf4Codebook::get();
    println!("codebook levels:");
    for (i, v) in cb.values().iter().enumerate() {
        println!("  [{i:2}] {v:+.7}");
    }

    let q = quantize(&source, args.block, args.superblock)?;
    let report = q.memory_footprint();
    let back = q.dequantize()?;
    let q_raw = quantize_single_level(&source, args.block)?;
    let back_raw = q_raw.dequantize()?;
    let rmse_dq = rmse(&source, &back);
    let rmse_raw = rmse(&source, &back_raw);

    println!("bits per parameter : {:.4}", report.bits_per_param);
    println!(
        "stored bytes       : {} ({} codes + {} constants)",
        report.total_bytes, report.code_bytes, report.constant_bytes
    );
    println!("round-trip RMSE    : {rmse_dq:.6}");
    println!("RMSE, raw consts   : {rmse_raw:.6}");
    if rmse_raw > 0.0 {
        println!("double-quant ratio : {:.6}", rmse_dq / rmse_raw);
    } else {
        println!("double-quant ratio : 1.000000 (exact on this input)");
    }
    Ok(())
}

fn write_step_log(path: &PathBuf, history: &[StepRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for record in history {
        let line = serde_json::to_string(record).map_err(|e| Error::CorruptContainer {
            message: format!("log serialization failed: {e}"),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_step_log(path: &PathBuf) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut history = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: StepRecord =
            serde_json::from_str(line).map_err(|e| Error::CorruptContainer {
                message: format!("log line {}: {e}", i + 1),
            })?;
        history.push(record);
    }
    Ok(history)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, Some(&args))?;
    let run = run::run_training(&cfg, args.dq_cache)?;

    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log"));
    write_step_log(&log_path, &run.history)?;
    checkpoint::save_checkpoint(
        &args.out,
        &run.model,
        &cfg.hash(),
        cfg.train.seed,
        Some(&run.optimizer),
    )?;
    if let Some(data_path) = &args.save_data {
        checkpoint::save_dataset(data_path, &run.dataset)?;
    }

    if let Some(last) = run.history.last() {
        println!("final step {}: loss {:.6}", last.step, last.loss);
    } else {
        println!("zero iterations requested; checkpoint equals initialization");
    }
    let r_max = cfg.adapter.r_max;
    let mut histogram = vec![0u64; r_max + 1];
    for record in &run.history {
        histogram[record.rank.min(r_max)] += 1;
    }
    println!("sampled-rank histogram:");
    for (rank, count) in histogram.iter().enumerate().skip(1) {
        if *count > 0 {
            println!("  rank {rank:>3}: {count}");
        }
    }
    let test_mse = mse(
        &run.model
            .forward_eval(&run.dataset.test_inputs, cfg.adapter.r_max)?,
        &run.dataset.test_targets,
    )?;
    println!("test MSE at r_max: {test_mse:.6}");
    println!("checkpoint: {}", args.out.display());
    println!("step log  : {}", log_path.display());
    Ok(())
}

fn cmd_eval_sweep(args: EvalSweepArgs) -> Result<()> {
    let (model, _) = checkpoint::load_checkpoint(&args.ckpt)?;
    let dataset = checkpoint::load_dataset(&args.data)?;
    let info = checkpoint::inspect(&args.ckpt)?;
    let (seed, hash) = match info.header {
        checkpoint::Header::Checkpoint {
            seed,
            train_config_hash,
            ..
        } => (seed, train_config_hash),
        _ => unreachable!("load_checkpoint validated the kind"),
    };
    let ranks = args
        .ranks
        .unwrap_or_else(|| eval::default_rank_list(model.r_max()));
    println!(
        "evaluating {} at ranks {ranks:?} (seed {seed}, config {hash})",
        args.ckpt.display()
    );
    let report = eval::rank_sweep(
        &model,
        &dataset.test_inputs,
        &dataset.test_targets,
        &ranks,
        seed,
        hash,
    )?;
    print!("{}", report.render_table());
    if let Some(json_path) = &args.json {
        std::fs::write(json_path, report.to_json()).map_err(|e| Error::io(json_path, e))?;
        println!("report written to {}", json_path.display());
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let cfg = load_config(&args.config, None)?;
    let report = run::run_compare(&cfg)?;
    print!("{}", report.render_table());
    if let Some(json_path) = &args.json {
        std::fs::write(json_path, report.to_json()).map_err(|e| Error::io(json_path, e))?;
        println!("report written to {}", json_path.display());
    }
    Ok(())
}

fn cmd_audit(args: AuditArgs) -> Result<()> {
    let history = read_step_log(&args.log)?;
    let r_max = match args.r_max {
        Some(r) => r,
        None => history.iter().map(|r| r.rank).max().unwrap_or(0),
    };
    if r_max == 0 {
        return Err(Error::EmptyInput {
            context: "training history",
        });
    }
    let report = update_frequency_audit(&history, r_max)?;
    print!("{}", report.render_table());
    if let Some(json_path) = &args.json {
        std::fs::write(json_path, report.to_json()).map_err(|e| Error::io(json_path, e))?;
        println!("report written to {}", json_path.display());
    }
    Ok(())
}

fn cmd_export_merged(args: ExportMergedArgs) -> Result<()> {
    let (model, _) = checkpoint::load_checkpoint(&args.ckpt)?;
    if model.layers().len() != 1 {
        return Err(Error::InvalidArgument {
            context: format!(
                "export-merged needs a single-layer model, checkpoint has {} layers",
                model.layers().len()
            ),
        });
    }
    let merged = model.layers()[0].merge(args.rank)?;
    checkpoint::save_matrix(&args.out, &merged)?;
    println!(
        "merged {}x{} weight at rank {} written to {}",
        merged.rows(),
        merged.cols(),
        args.rank,
        args.out.display()
    );
    Ok(())
}
