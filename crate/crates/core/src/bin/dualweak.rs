use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualweak::pipeline::{self, EvalTarget, RunConfig};
use dualweak::wsod::Variant;
use dualweak::Error;

#[derive(Parser)]
#[command(name = "dualweak", version, about = "Dual-domain weakly supervised detection on a toy world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// warmup: stop after this stage; train-wsod: source checkpoint;
    /// eval: warm-up checkpoint to score.
    #[arg(long, global = true)]
    stage: Option<usize>,
    #[arg(long, global = true, value_parser = ["oicr", "casd"])]
    variant: Option<String>,
    /// Do not initialise WSOD features from the adapted detector.
    #[arg(long, global = true)]
    no_fe: bool,
    /// Use the dense grid instead of detector proposals.
    #[arg(long, global = true)]
    no_op: bool,
    /// Drop the copy-paste stage from the warm-up plan.
    #[arg(long, global = true)]
    skip_g2: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source, target and background datasets.
    GenData,
    /// Run the progressive warm-up and score every stage.
    Warmup,
    /// Train the weakly supervised detector.
    TrainWsod,
    /// Score a checkpoint on the target evaluation split.
    Eval {
        /// Checkpoint file; defaults to the WSOD checkpoint of the config,
        /// or the warm-up checkpoint given by --stage.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare warm-up stage orders.
    AblateOrder,
    /// Summarise evaluated checkpoints.
    Report,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 3,
        Error::MissingArtifact(_) => 4,
        Error::HashMismatch { .. } => 5,
        Error::Stage { .. } => 6,
        Error::InvalidInput(_) | Error::Validation(_) | Error::InvalidBox { .. } => 7,
        _ => 1,
    }
}

fn build_config(c: &Common, command: &Command) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(v) = &c.variant {
        cfg.wsod.variant = v.parse::<Variant>()?;
    }
    if c.no_fe {
        cfg.wsod.use_fe = false;
    }
    if c.no_op {
        cfg.wsod.use_op = false;
    }
    if c.skip_g2 {
        cfg.warmup = cfg.warmup.without_g2();
    }
    if let Some(k) = c.stage {
        match command {
            Command::Warmup => {
                if k == 0 || k > cfg.warmup.stages.len() {
                    return Err(Error::Config(format!("--stage {k} outside 1..={}", cfg.warmup.stages.len())));
                }
                cfg.warmup.stages.truncate(k);
            }
            Command::TrainWsod => cfg.fsod_stage = Some(k),
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = build_config(&cli.common, &cli.command)?;
    log::info!("config hash {} seed {}", cfg.full_hash(), cfg.seed);
    match &cli.command {
        Command::GenData => {
            pipeline::cmd_gen_data(&cfg)?;
        }
        Command::Warmup => {
            for r in pipeline::cmd_warmup(&cfg)? {
                println!("{} {} mAP {:.4}", r.tag, r.kind, r.target_map);
            }
        }
        Command::TrainWsod => {
            let path = pipeline::cmd_train_wsod(&cfg)?;
            println!("{}", path.display());
        }
        Command::Eval { checkpoint } => {
            let target = match (checkpoint, cli.common.stage) {
                (Some(p), _) => EvalTarget::File(p.clone()),
                (None, Some(k)) => EvalTarget::Stage(k),
                (None, None) => EvalTarget::Wsod,
            };
            let s = pipeline::cmd_eval(&cfg, &target)?;
            println!("mAP {:.4}", s.ap.map);
        }
        Command::AblateOrder => {
            for r in pipeline::cmd_ablate_order(&cfg)? {
                println!("{} mAP {:.4}", r.order, r.final_map);
            }
        }
        Command::Report => {
            for r in pipeline::cmd_report(&cfg)? {
                println!("{} mAP {:.4}", r.checkpoint, r.map);
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let report = serde_json::json!({"error": e.to_string(), "exit_code": code});
            eprintln!("{report}");
            ExitCode::from(code)
        }
    }
}
