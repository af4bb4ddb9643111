use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser};
use discover_cli::{parse_config, run_suite, ConfigError, RunConfig, Subcommand, SuiteError};

const EXIT_CONFIG: u8 = 1;

#[derive(Parser)]
#[command(name = "discover-opt", version, about = "Run clustered variance-reduction experiments")]
enum Cli {
    /// Train one optimizer over all seeds
    Train(Common),
    /// Windowed between-cluster variance for several optimizers
    Variance(Common),
    /// Check seed-averaged MSD against the convergence bound
    VerifyBound(Common),
    /// Hyperparameter grid from the config's `sweep` block
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file, or `preset:<name>`
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's `output_dir`, then `out`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds overriding the config
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Number of shards; the global batch size is kept
    #[arg(long)]
    shards: Option<usize>,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DISCOVER_OPT_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("DISCOVER_OPT_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot size the worker pool")?;
    }
    Ok(())
}

fn load(c: &Common) -> Result<RunConfig, ConfigError> {
    let mut cfg = parse_config(&c.config)?;
    if let Some(seeds) = &c.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(k) = c.shards {
        cfg.loop_.n_shards = k;
    }
    cfg.validated()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let (cmd, common) = match &cli {
        Cli::Train(c) => (Subcommand::Train, c),
        Cli::Variance(c) => (Subcommand::Variance, c),
        Cli::VerifyBound(c) => (Subcommand::VerifyBound, c),
        Cli::Sweep(c) => (Subcommand::Sweep, c),
    };
    match execute(cmd, common) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn execute(cmd: Subcommand, common: &Common) -> anyhow::Result<u8> {
    let cfg = load(common)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let outcome = match run_suite(&cfg, cmd, &out) {
        Ok(o) => o,
        Err(SuiteError::Config(e)) => return Err(e.into()),
        Err(e) => return Err(e).with_context(|| format!("{cmd} failed")),
    };
    let s = &outcome.summary;
    for r in &s.runs {
        println!(
            "{} seed {}: {:?} after {} steps, loss {:.6e}{}{}",
            r.variant,
            r.seed,
            r.status,
            r.steps_run,
            r.final_loss,
            r.final_msd.map(|m| format!(", msd {m:.6e}")).unwrap_or_default(),
            r.final_val_acc.map(|a| format!(", val acc {a:.4}")).unwrap_or_default(),
        );
    }
    if let Some(v) = &s.verification {
        println!(
            "bound: {} of {} steps violated ({:.4}), out_of_regime={}, passed={:?}",
            v.violations, v.n_steps, v.violation_fraction, v.out_of_regime, v.passed
        );
    }
    if let Some(vs) = &s.variance {
        for v in vs {
            println!(
                "{}: windowed between-cluster variance {:.4e} -> {:.4e}, below 10% at {:?}",
                v.variant, v.initial, v.final_value, v.decay_step
            );
        }
    }
    println!("wrote {} ({:.1}s)", out.display(), s.wall_time_seconds);
    Ok(outcome.verdict.exit_code() as u8)
}
