//! Command-line front end: train, eval, verify, and count subcommands.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dttn::config::{self, Config};
use dttn::data::{self, Split};
use dttn::error::{DttnError, Result};
use dttn::model::{count_flops_analytic, count_params_analytic, Dttn};
use dttn::tensor::{Dtype, Scalar};
use dttn::{checkpoint, train, verify};

#[derive(Parser)]
#[command(name = "dttn", version, about = "Activation-free multilinear image classifier")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model, writing history.csv and checkpoints to the run directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split
    Eval(EvalArgs),
    /// Run the algebraic verification suite
    Verify(VerifyArgs),
    /// Print parameter and multiply-accumulate counts for a configuration
    Count(CountArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set trainer.epochs=1
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset root holding mnist/, fashion/, cifar10/
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Run directory for history.csv and checkpoints
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
    /// Override model.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Continue a run from its ckpt_latest.dttn
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by the train subcommand
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override one configuration key stored in the checkpoint
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Dataset root holding mnist/, fashion/, cifar10/
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only the named checks (repeatable); default runs all
    #[arg(long, value_name = "NAME")]
    only: Vec<String>,
    /// Seed for the random trial data
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Emit the reports as JSON instead of text lines
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Emit the counts as JSON instead of a table
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Count(args) => cmd_count(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(args: &ConfigArgs, extra: &[String]) -> Result<Config> {
    let text = match &args.config {
        Some(path) => Some(std::fs::read_to_string(path).map_err(|e| {
            DttnError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?),
        None => None,
    };
    let mut sets = args.sets.clone();
    sets.extend_from_slice(extra);
    config::resolve(text.as_deref(), &sets)
}

fn require_data_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(DttnError::Config(format!(
            "data directory {} does not exist; pass --data-dir or run scripts/fetch_data.py",
            dir.display()
        )))
    }
}

fn cmd_train(args: TrainArgs) -> Result<u8> {
    let extra: Vec<String> = args
        .seed
        .map(|s| vec![format!("model.seed={s}")])
        .unwrap_or_default();
    let cfg = load_config(&args.cfg, &extra)?;
    require_data_dir(&args.data_dir)?;
    let train_ds = data::load(cfg.data.dataset, &args.data_dir, Split::Train)?;
    let test_ds = data::load(cfg.data.dataset, &args.data_dir, Split::Test)?;
    let outcome = train::run(&cfg, &train_ds, &test_ds, &args.out_dir, args.resume.as_deref())?;
    println!("final_top1={:.6}", outcome.final_top1);
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<u8> {
    match checkpoint::peek_dtype(&args.checkpoint)? {
        Dtype::F32 => eval_typed::<f32>(&args),
        Dtype::F64 => eval_typed::<f64>(&args),
    }
}

fn eval_typed<T: Scalar>(args: &EvalArgs) -> Result<u8> {
    let ck = checkpoint::load::<T>(&args.checkpoint)?;
    let cfg = config::resolve(Some(&ck.config), &args.sets)?;
    let model = train::model_from_checkpoint(&ck, &cfg.model)?;
    require_data_dir(&args.data_dir)?;
    let ds = data::load(cfg.data.dataset, &args.data_dir, Split::Test)?;
    let (loss, top1) = train::evaluate(&model, &ds, &cfg)?;
    println!("top1={top1:.6} loss={loss:.6}");
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<u8> {
    let reports = verify::run_checks(&args.only, args.seed)?;
    if args.json {
        println!("{}", to_json(&reports)?);
    } else {
        for r in &reports {
            println!(
                "{:<24} {:<28} trials {:>4}  worst {:>9.2e}  {}",
                r.name,
                r.size,
                r.trials,
                r.worst_err,
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(if reports.iter().all(|r| r.pass) { 0 } else { 1 })
}

#[derive(Serialize)]
struct CountOutput {
    blocks: usize,
    params_analytic: dttn::model::AnalyticParams,
    params_enumerated: dttn::model::ParamCensus,
    flops: dttn::model::AnalyticFlops,
}

fn cmd_count(args: CountArgs) -> Result<u8> {
    let cfg = load_config(&args.cfg, &[])?;
    // counts only depend on the architecture, so build at f32
    let model = Dttn::<f32>::build(&cfg.model)?;
    let out = CountOutput {
        blocks: cfg.model.total_blocks(),
        params_analytic: count_params_analytic(&cfg.model),
        params_enumerated: model.enumerate_params(),
        flops: count_flops_analytic(&cfg.model),
    };
    if args.json {
        println!("{}", to_json(&out)?);
        return Ok(0);
    }
    let a = &out.params_analytic;
    let e = &out.params_enumerated;
    println!("blocks          {:>14}", out.blocks);
    println!(
        "{:<14}{:>16}{:>16}{:>16}",
        "params", "analytic", "enum core", "enum stored"
    );
    for (label, av, bucket) in [
        ("  embed", a.embed, e.embed),
        ("  blocks", a.blocks, e.blocks),
        ("  downsamplers", a.downsamplers, e.downsamplers),
        ("  head", a.head, e.head),
        ("  total", a.total, e.total),
    ] {
        println!(
            "{:<14}{:>16}{:>16}{:>16}",
            label,
            av,
            bucket.core,
            bucket.stored()
        );
    }
    let f = &out.flops;
    println!("{:<14}{:>16}", "macs", f.total_macs);
    println!("{:<14}{:>16}", "  embed", f.embed_macs);
    println!("{:<14}{:>16}", "  blocks", f.blocks_macs);
    println!("{:<14}{:>16}", "  downsamplers", f.downsampler_macs);
    println!("{:<14}{:>16}", "  head", f.head_macs);
    println!("{:<14}{:>16}", "bias adds", f.bias_adds);
    println!("{:<14}{:>16}", "pool adds", f.pool_adds);
    println!("{:<14}{:>16}", "hadamard", f.hadamard_mults);
    println!("{:<14}{:>16}", "flops (2x)", f.flops_2x);
    Ok(0)
}

fn to_json<S: Serialize>(value: &S) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map_err(|e| DttnError::Format(format!("JSON encoding failed: {e}")))
}
