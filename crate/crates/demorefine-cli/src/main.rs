//! Command-line harness for the benchmark pipeline.
//!
//! Exit codes: 0 success, 2 config error, 3 artifact mismatch, 4 runtime
//! failure.

use clap::{Parser, Subcommand};
use demorefine::harness::{self, BenchmarkConfig, HarnessError, RSpec, SweepResult};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "demorefine",
    about = "Retarget hand demonstrations and refine them with a diffusion policy",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Benchmark config (TOML). Uses the built-in frozen benchmark when
    /// omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for datasets, checkpoints, demos, and results.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for episode cells and training.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scripted-expert training dataset.
    GenData,
    /// Train the diffusion policy on the generated dataset.
    Train,
    /// Record one hand demonstration per benchmark task.
    Demo,
    /// Evaluate one noise level r, or `auto` to pick r per task from a
    /// base-policy probe.
    Eval {
        #[arg(long)]
        r: String,
    },
    /// Evaluate the full noise-level grid and write sweep.csv.
    Sweep,
    /// Run the noisy-keypoint and thumb+index retargeting ablations.
    Ablate,
    /// Extract per-task (r, mean, std) triples from sweep.csv.
    PlotData,
}

fn load(cli: &Cli) -> Result<BenchmarkConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => harness::load_config(path)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.root_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(label: &str, result: &SweepResult) {
    println!("{label}: {} cells, {:.1}s", result.rows.len(), result.wall_clock_secs);
    for (task, rate) in &result.probe_rates {
        println!("  probe {task}: base policy rate {rate:.4}");
    }
    for agg in &result.aggregates {
        if agg.task == "ALL" {
            println!(
                "  r={:.2} {:<22} mean {:.4} (std {:.4})",
                agg.r, agg.method, agg.mean, agg.std
            );
        }
    }
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("--jobs: {e}")))?;
    }
    let cfg = load(cli)?;
    match &cli.command {
        Command::GenData => {
            let report = harness::cmd_gen_data(&cfg, &cli.out)?;
            println!(
                "wrote {} episodes ({} attempts) to {}",
                report.episodes,
                report.attempts,
                report.dataset_path.display()
            );
            println!("dataset fingerprint {}", report.dataset_fingerprint);
        }
        Command::Train => {
            let outcome = harness::cmd_train(&cfg, &cli.out)?;
            println!(
                "trained on {} windows; loss {:.5} -> {:.5}; checkpoint {}",
                outcome.windows,
                outcome.loss_at_100,
                outcome.loss_final,
                outcome.checkpoint_stem.display()
            );
        }
        Command::Demo => {
            let paths = harness::cmd_demo(&cfg, &cli.out)?;
            for path in paths {
                println!("wrote {}", path.display());
            }
        }
        Command::Eval { r } => {
            let spec = if r == "auto" {
                RSpec::Auto
            } else {
                let value: f64 = r.parse().map_err(|_| {
                    HarnessError::Config(format!("--r must be a float or 'auto', got {r}"))
                })?;
                RSpec::Fixed(value)
            };
            let result = harness::cmd_eval(&cfg, &cli.out, spec)?;
            print_summary("eval", &result);
        }
        Command::Sweep => {
            let result = harness::cmd_sweep(&cfg, &cli.out)?;
            print_summary("sweep", &result);
        }
        Command::Ablate => {
            let result = harness::cmd_ablate(&cfg, &cli.out)?;
            print_summary("ablate", &result);
        }
        Command::PlotData => {
            let path = harness::cmd_plot_data(&cfg, &cli.out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
