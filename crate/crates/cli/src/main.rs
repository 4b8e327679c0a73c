use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gmenet::harness::{self, InputSide, ResolvedConfig};
use gmenet::{Error, Result, Scalar};

/// Low-resolution facial expression recognition: data preparation,
/// teacher training, attention distillation, evaluation and ablation.
#[derive(Parser, Debug)]
#[command(name = "gmenet", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-key override, e.g. `schedule.epochs=5`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan (or synthesise) the source images, fabricate the low-resolution copy, write the manifest.
    PrepareData,
    /// Train the high-resolution teacher.
    TrainTeacher,
    /// Distil a frozen teacher into a low-resolution student.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Side::Lr)]
        input: Side,
    },
    /// Run the six-row ablation matrix.
    Ablation,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Side {
    Hr,
    Lr,
}

fn resolve(cli: &Cli) -> Result<ResolvedConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(harness::string_override("output_dir", &out.to_string_lossy()));
    }
    if let Some(p) = &cli.precision {
        overrides.push(format!("precision={p}"));
    }
    harness::resolve_config(cli.config.as_deref(), &overrides)
}

fn print(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch<T: Scalar>(cli: &Cli, rc: &ResolvedConfig) -> Result<()> {
    match &cli.command {
        Command::PrepareData => {
            let out = harness::cmd_prepare_data(rc)?;
            print(&serde_json::json!({
                "manifest": out.manifest_path,
                "records": out.manifest.records.len(),
                "failures": out.failures,
            }))
        }
        Command::TrainTeacher => print(&harness::cmd_train_teacher::<T>(rc)?),
        Command::Distill { teacher } => print(&harness::cmd_distill_student::<T>(rc, teacher)?),
        Command::Evaluate { checkpoint, input } => {
            let side = match input {
                Side::Hr => InputSide::Hr,
                Side::Lr => InputSide::Lr,
            };
            print(&harness::cmd_evaluate::<T>(rc, checkpoint, side)?)
        }
        Command::Ablation => {
            let table = harness::cmd_ablation::<T>(rc)?;
            eprint!("{}", table.to_markdown());
            print(&table)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let rc = resolve(cli)?;
    let device = harness::apply_device_from_env()?;
    log::info!("device {device}, precision {}", rc.config.precision);
    match rc.config.precision {
        64 => dispatch::<f64>(cli, &rc),
        32 => dispatch::<f32>(cli, &rc),
        p => Err(Error::Config(format!("unsupported precision {p}"))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
