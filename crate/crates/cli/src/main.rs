//! `otter`: build shards, train, generate, evaluate, verify and inspect.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use otter_core::verify::Fault;

use commands::VerifyFailed;
use config::{RunConfig, OUT_DIR_ENV};

#[derive(Parser, Debug)]
#[command(name = "otter", version, about = "Toy-scale multimodal in-context instruction tuning")]
struct Cli {
    /// Directory every configured path is relative to.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,

    /// TOML run configuration (relative to --root); defaults apply when absent.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic fixture corpus (JSONL plus raw RGB images).
    Fixture {
        /// Output directory, relative to --root.
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
    /// Ingest the corpus, build in-context samples and write shards.
    BuildData,
    /// Train on the shards, writing checkpoints and a CSV log.
    Train {
        /// Continue from the most advanced checkpoint in the checkpoint dir.
        #[arg(long)]
        resume: bool,
        /// Stop after this many global steps and checkpoint there.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Answer an instruction about images, optionally after demonstrations.
    Generate(GenerateArgs),
    /// Perplexity and exact-match answer accuracy over the shards.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only evaluate the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the invariant suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        grad_coords: usize,
        /// Inject a known defect to check that it is caught.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
    },
    /// Dump a packed sample: ids, tokens, supervision and media routing.
    Inspect {
        /// Sample index in shard order.
        #[arg(long)]
        index: Option<usize>,
        /// Sample id, or a query id to show all its samples.
        #[arg(long)]
        id: Option<String>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Demonstration as `images::instruction::answer`. Repeatable.
    #[arg(long = "shot", value_name = "SHOT")]
    shots: Vec<String>,
    /// Query image id. Repeatable.
    #[arg(long = "image", value_name = "ID")]
    images: Vec<String>,
    #[arg(long)]
    instruction: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_new_tokens: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    UnfreezeVision,
}

fn resolve(root: &Path, p: Option<PathBuf>) -> Option<PathBuf> {
    p.map(|p| root.join(p))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = cli.root.clone();
    let mut cfg = RunConfig::load(resolve(&root, cli.config).as_deref(), &cli.overrides)?;
    let out_dir = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    cfg.resolve(&root, out_dir);
    match cli.command {
        Command::Fixture { out, image_size } => commands::fixture(&root.join(out), image_size),
        Command::BuildData => commands::build_data(&cfg),
        Command::Train { resume, stop_after } => commands::train_cmd(&cfg, resume, stop_after),
        Command::Generate(a) => {
            if let Some(n) = a.max_new_tokens {
                cfg.decode.max_new_tokens = n as usize;
            }
            cfg.decode.validate()?;
            let ck = commands::checkpoint_dir(&cfg, resolve(&root, a.checkpoint).as_deref());
            commands::generate_cmd(&cfg, &ck, &a.shots, &a.images, &a.instruction)
        }
        Command::Eval { checkpoint, limit } => {
            let ck = commands::checkpoint_dir(&cfg, resolve(&root, checkpoint).as_deref());
            commands::eval_cmd(&cfg, &ck, limit)
        }
        Command::Verify {
            seed,
            grad_coords,
            fault,
        } => commands::verify(seed, grad_coords, fault.map(|FaultArg::UnfreezeVision| Fault::UnfreezeVision)),
        Command::Inspect { index, id } => commands::inspect(&cfg, index, id.as_deref()),
        Command::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

/// 0 success, 1 input or config error, 2 training abort, 3 verification failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerifyFailed>().is_some() {
        return 3;
    }
    let aborted = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<otter_core::Error>(), Some(otter_core::Error::NonFiniteLoss { .. })));
    if aborted {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
