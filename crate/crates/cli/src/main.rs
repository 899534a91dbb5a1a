use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use obsr_cli::bundled::bundled;
use obsr_cli::error::{CliError, Result, Stage, StageExt};
use obsr_cli::{selftest, Pipeline, PipelineConfig, Task};

/// Geospatial benchmark pipeline: regionize, split, embed, train and evaluate.
#[derive(Parser)]
#[command(name = "obsr", version)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, env = "OBSR_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config JSON, or `bundled:<task>` for a shipped synthetic config.
    #[arg(long)]
    config: String,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training repetitions to average.
    #[arg(long)]
    runs: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long, env = "OBSR_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load or synthesize the raw data.
    Ingest(Common),
    /// Aggregate points into cells at every resolution.
    Regionize(Common),
    /// Snap trajectories to the grid and fill gaps.
    Hexify(Common),
    /// Assign cells or trajectories to train and test.
    Split(Common),
    /// Compute region embeddings.
    Embed(Common),
    /// Train the task baseline for every embedder.
    Train(Common),
    /// Evaluate trained checkpoints.
    Eval(Common),
    /// Write markdown result tables.
    Report(Common),
    /// Every stage in order, plus the hashed run manifest.
    Run(Common),
    /// Run the invariant suite.
    Selftest {
        /// Only these criteria (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

fn load(common: &Common) -> Result<(PipelineConfig, PathBuf)> {
    let mut cfg = match common.config.strip_prefix("bundled:") {
        Some(name) => {
            let task = Task::ALL
                .into_iter()
                .find(|t| t.name() == name)
                .ok_or_else(|| anyhow::anyhow!("no bundled config named {name:?}"))
                .stage(Stage::Config)?;
            bundled(task)?
        }
        None => PipelineConfig::load(std::path::Path::new(&common.config))?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = common.runs {
        cfg.runs = r;
    }
    cfg.validate().stage(Stage::Config)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("obsr-out").join(cfg.task.name()));
    Ok((cfg, out))
}

fn dispatch(cmd: Command) -> Result<bool> {
    let (common, stage): (Common, &str) = match cmd {
        Command::Selftest { only } => {
            let ids = if only.is_empty() { selftest::criterion_ids() } else { only };
            let mut all = true;
            for id in ids {
                let outcome = selftest::run_criterion(id)
                    .ok_or_else(|| anyhow::anyhow!("no criterion {id}"))
                    .stage(Stage::Config)?;
                println!("{outcome}");
                all &= outcome.passed;
            }
            return Ok(all);
        }
        Command::Ingest(c) => (c, "ingest"),
        Command::Regionize(c) => (c, "regionize"),
        Command::Hexify(c) => (c, "hexify"),
        Command::Split(c) => (c, "split"),
        Command::Embed(c) => (c, "embed"),
        Command::Train(c) => (c, "train"),
        Command::Eval(c) => (c, "eval"),
        Command::Report(c) => (c, "report"),
        Command::Run(c) => (c, "run"),
    };
    let (cfg, out) = load(&common)?;
    let p = Pipeline::new(cfg, &out);
    match stage {
        "ingest" => {
            let s = p.ingest()?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        }
        "regionize" => {
            for (r, ds) in p.regionize()? {
                println!("res {r}: {} cells", ds.len());
            }
        }
        "hexify" => println!("{} trajectories prepared", p.hexify()?.len()),
        "split" => {
            for (r, m) in p.split()? {
                println!("res {r}: {} train, {} test", m.train.len(), m.test.len());
            }
        }
        "embed" => p.embed()?,
        "train" => p.train()?,
        "eval" => {
            for f in p.eval()? {
                println!("res {} {}: {:?}", f.resolution, f.display_name, f.mean);
            }
        }
        "report" => print!("{}", p.report()?),
        _ => {
            let s = p.run()?;
            print!("{}", s.report);
            eprintln!("wrote {} artifacts to {} in {:.1}s", s.manifest.artifacts.len(), out.display(), s.timing.total_seconds);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Stage::Config.exit_code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", CliError::new(Stage::Config, e));
            return ExitCode::from(Stage::Config.exit_code() as u8);
        }
    }
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(Stage::Evaluate.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
