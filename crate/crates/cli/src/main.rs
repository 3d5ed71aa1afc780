use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grap::harness::{self, BenchConfig, Method, RunConfig};
use grap::oracles::suites;
use grap::{tasks, Error};

/// Exit status for a verification suite that ran to completion but failed.
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "grap", version, about = "Gradient-aligned tuning of pretraining loss weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write trajectory, summary, config echo and checkpoint.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of configs and write one aggregated table.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Comma-separated labeled fractions; defaults to the config value.
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        /// Methods to compare; `fixed:` methods are separated by `;`.
        #[arg(long, value_delimiter = ';')]
        methods: Vec<String>,
        /// Add every fixed weight vector drawn from these per-loss values.
        #[arg(long, value_delimiter = ',')]
        fixed_grid: Vec<f64>,
        /// Aggregated CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-run summaries to this CSV.
        #[arg(long)]
        runs_out: Option<PathBuf>,
    },
    /// Time plain, embedding-space and naive steps for several K.
    Benchmark(BenchArgs),
    /// Tune weights online, then retrain with their medians held fixed.
    Tuned {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; receives `tuning/` and `retrained/`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute the numerical oracle suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export the generated dataset of a config as CSV.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; every field has a default.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the method, e.g. `grap` or `fixed:1,0.5,2`.
    #[arg(long)]
    method: Option<String>,
    /// Overrides both the run seed and the task seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.method {
            cfg.method = m.parse()?;
        }
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(steps) = self.steps {
            cfg.steps = steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_summary(label: &str, out: &harness::RunOutput) {
    let s = &out.summary;
    let weights: Vec<String> = s.median_weights.iter().map(|w| format!("{w:.4}")).collect();
    println!(
        "{label}: method {} seed {} steps {}; val loss {:.6}, val metric {:.6}; median weights [{}]",
        s.method,
        s.seed,
        s.steps,
        s.final_loss_down_val,
        s.final_metric_val,
        weights.join(", ")
    );
}

fn write_or_print(path: Option<&Path>, csv: &str) -> Result<(), Error> {
    match path {
        Some(p) => Ok(std::fs::write(p, csv)?),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn sweep_configs(base: &RunConfig, seeds: &[u64], fractions: &[f64], methods: &[String], grid: &[f64]) -> Result<Vec<RunConfig>, Error> {
    let methods = if methods.is_empty() {
        vec![base.method.clone()]
    } else {
        methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>()?
    };
    let fractions = if fractions.is_empty() { vec![base.task.labeled_fraction] } else { fractions.to_vec() };
    let mut bases: Vec<RunConfig> = methods
        .into_iter()
        .map(|method| RunConfig {
            method,
            ..base.clone()
        })
        .collect();
    if !grid.is_empty() {
        bases.extend(harness::fixed_grid_configs(base, grid));
    }
    let configs: Vec<RunConfig> = bases
        .iter()
        .flat_map(|b| harness::fraction_configs(b, &fractions, seeds))
        .collect();
    for c in &configs {
        c.validate()?;
    }
    Ok(configs)
}

fn execute(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Run { config, out } => {
            let cfg = config.load()?;
            let result = harness::run(&cfg)?;
            if let Some(dir) = out.or_else(|| cfg.output_dir.clone()) {
                harness::write_outputs(&cfg, &result, &dir)?;
            }
            print_summary("run", &result);
        }
        Command::Sweep {
            config,
            seeds,
            fractions,
            methods,
            fixed_grid,
            out,
            runs_out,
        } => {
            let base = config.load()?;
            let configs = sweep_configs(&base, &seeds, &fractions, &methods, &fixed_grid)?;
            let result = harness::sweep(&configs)?;
            if let Some(path) = runs_out {
                let k = base.task.num_losses();
                let mut csv = harness::RunSummary::csv_header(k) + "\n";
                for r in &result.runs {
                    csv += &r.csv_row();
                    csv.push('\n');
                }
                std::fs::write(path, csv)?;
            }
            write_or_print(out.as_deref(), &result.to_csv())?;
        }
        Command::Benchmark(args) => {
            let cfg = BenchConfig {
                ks: args.ks,
                steps: args.steps,
                warmup: args.warmup,
                batch_size: args.batch_size,
                seed: args.seed,
                ..BenchConfig::default()
            };
            let report = harness::benchmark(&cfg)?;
            write_or_print(args.out.as_deref(), &report.to_csv())?;
            eprintln!(
                "slopes in K: plain {:.3}, embedding {:.3}, naive {:.3}; mean embedding overhead {:.1}%",
                report.plain_slope,
                report.embedding_slope,
                report.naive_slope,
                100.0 * (report.mean_embedding_overhead() - 1.0)
            );
        }
        Command::Tuned { config, out } => {
            let cfg = config.load()?;
            let result = harness::tuned(&cfg)?;
            if let Some(dir) = out.or_else(|| cfg.output_dir.clone()) {
                harness::write_outputs(&cfg, &result.tuning, &dir.join("tuning"))?;
                let fixed = RunConfig {
                    method: Method::Fixed(result.weights.clone()),
                    ..cfg.clone()
                };
                harness::write_outputs(&fixed, &result.retrained, &dir.join("retrained"))?;
            }
            print_summary("tuning", &result.tuning);
            print_summary("retrained", &result.retrained);
        }
        Command::Verify { seed } => {
            let reports = suites::run_all(seed)?;
            for r in &reports {
                println!("{r}");
            }
            if !reports.iter().all(|r| r.passed()) {
                return Ok(ExitCode::from(EXIT_VERIFY));
            }
        }
        Command::Generate { config, out } => {
            let cfg = config.load()?;
            let data = tasks::generate(&cfg.task)?;
            tasks::write_dataset_csv(&data, &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// 2 for config errors, 3 for numerical failures, 1 otherwise.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
