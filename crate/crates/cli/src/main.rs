use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stv_core::harness::{self, RunConfig};
use stv_core::intervene::count_search_passes;

/// Sensitivity-aware task vector experiments on a toy transformer.
#[derive(Parser, Debug)]
#[command(name = "stv", version)]
struct Cli {
    /// TOML run configuration; defaults apply to missing fields.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set sense.k=4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output root (overrides `out_dir` in the config).
    #[arg(long, env = "STV_OUT", global = true)]
    out: Option<PathBuf>,

    /// Worker threads for batched forward passes and clustering.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Replace an existing stage directory instead of failing.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the model on the task library.
    Train,
    /// Estimate per-head sensitivity and pick the top-K locations.
    Sense,
    /// Cluster context activations into a candidate bank.
    Bank,
    /// Learn which bank vector to insert at each location.
    Select,
    /// Evaluate the selected plan on held-out queries.
    Eval,
    /// Sense, bank, select and eval in sequence.
    Run,
    /// All methods over several seeds.
    Compare,
    /// Sweep one pipeline setting over several seeds.
    Ablate,
    /// Print the effective configuration.
    Config,
    /// Forward passes spent on location search by each method.
    Accounting {
        /// Random location sets tried by the baseline search.
        #[arg(long)]
        candidates: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    if let Some(n) = cli.threads {
        harness::init_threads(n)?;
    }
    let force = cli.force;
    let done = |dir: PathBuf| println!("{}", dir.display());
    match cli.command {
        Command::Train => done(harness::cmd_train(&cfg, force)?),
        Command::Sense => done(harness::cmd_sense(&cfg, force)?),
        Command::Bank => done(harness::cmd_bank(&cfg, force)?),
        Command::Select => done(harness::cmd_select(&cfg, force)?),
        Command::Eval => done(harness::cmd_eval(&cfg, force)?),
        Command::Run => {
            done(harness::cmd_sense(&cfg, force)?);
            done(harness::cmd_bank(&cfg, force)?);
            done(harness::cmd_select(&cfg, force)?);
            done(harness::cmd_eval(&cfg, force)?);
        }
        Command::Compare => done(harness::cmd_compare(&cfg, force)?),
        Command::Ablate => done(harness::cmd_ablate(&cfg, force)?),
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::Accounting { candidates } => {
            let a = count_search_passes(
                cfg.sense.pairs,
                candidates.unwrap_or(cfg.baselines.candidates),
                cfg.select.reward_batch,
            );
            println!("pairs={} stv_passes={}", a.pairs, a.stv_passes);
            println!(
                "candidate_sets={} eval_batch={} random_search_passes={}",
                a.candidate_sets, a.eval_batch, a.random_search_passes
            );
            println!("ratio={:.6}", a.ratio);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<stv_core::Error>()
                .map_or(1, stv_core::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
