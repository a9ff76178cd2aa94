use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lies::bench::{desk_suite, load_suite, run_pipeline, run_tasks, Config, SuiteOptions};
use lies::expr::{equivalent_up_to_affine, parse, EquivalenceConfig};
use lies::sampling::{generate, Task};

#[derive(Parser)]
#[command(name = "lies", version, about = "Symbolic regression with sparse LIES networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a task and write `x1,..,xn,y` rows as CSV.
    Generate {
        /// Task name from the suite, or a formula when `--ranges` is given.
        task: String,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        source: TaskSource,
    },
    /// Run the full pipeline once.
    Train {
        task: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        source: TaskSource,
    },
    /// Run seeded trials of every task in a suite file (`desk` for the
    /// built-in suite).
    Benchmark {
        suite: String,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Seed of the first trial; trial `i` uses `seed + i`.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Decide whether two formulas agree up to `a·f + b`.
    Check {
        first: String,
        second: String,
        /// Comma separated `lo:hi` per variable.
        #[arg(long)]
        ranges: String,
    },
}

#[derive(clap::Args)]
struct TaskSource {
    /// Suite file to look the task up in; the built-in suite by default.
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Treat the task argument as a formula over these `lo:hi` ranges.
    #[arg(long)]
    ranges: Option<String>,
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn parse_ranges(s: &str) -> Res<Vec<(f64, f64)>> {
    s.split(',')
        .map(|r| {
            let (lo, hi) = r.trim().split_once(':').ok_or_else(|| format!("range {r:?} is not lo:hi"))?;
            Ok((lo.trim().parse()?, hi.trim().parse()?))
        })
        .collect()
}

fn resolve_task(name: &str, source: &TaskSource) -> Res<Task> {
    if let Some(r) = &source.ranges {
        return Ok(Task::new("cli", name, parse_ranges(r)?, 2000)?);
    }
    let tasks = match &source.suite {
        Some(p) => load_suite(p)?,
        None => desk_suite(),
    };
    tasks.into_iter().find(|t| t.name == name).ok_or_else(|| format!("no task named {name}").into())
}

fn load_config(path: Option<&Path>) -> Res<Config> {
    let cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Res<bool> {
    match cli.command {
        Command::Generate { task, count, seed, out, source } => {
            let task = resolve_task(&task, &source)?;
            let ds = generate(&task, count, seed)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            let header: Vec<String> = (1..=task.arity).map(|i| format!("x{i}")).collect();
            writeln!(w, "{},y", header.join(","))?;
            for (x, y) in ds.x.iter().zip(&ds.y) {
                let row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{},{y}", row.join(","))?;
            }
            w.flush()?;
            Ok(true)
        }
        Command::Train { task, config, seed, report, source } => {
            let task = resolve_task(&task, &source)?;
            let cfg = load_config(config.as_deref())?;
            let r = run_pipeline(&task, &cfg, seed);
            println!("{} seed {}: {:?} in {:.2}s", r.task, r.seed, r.outcome, r.total_secs);
            if let Some(e) = &r.final_expr {
                println!("formula: {e}");
            }
            if let Some(m) = &r.metrics {
                println!("test R2: {:.6}  scale {:.6} offset {:.3e}", m.test_r2, m.equivalence.scale, m.equivalence.offset);
            }
            if let Some(f) = &r.failure {
                println!("failure: {f}");
            }
            if let Some(p) = report {
                std::fs::write(p, serde_json::to_string_pretty(&r)?)?;
            }
            Ok(r.outcome.completed())
        }
        Command::Benchmark { suite, trials, jobs, seed, config, csv, json } => {
            let tasks = if suite == "desk" { desk_suite() } else { load_suite(Path::new(&suite))? };
            let cfg = load_config(config.as_deref())?;
            let opts = SuiteOptions { trials, jobs, first_seed: seed, ..SuiteOptions::default() };
            let s = run_tasks(&tasks, &cfg, &opts)?;
            print!("{}", s.to_text());
            if let Some(p) = csv {
                std::fs::write(p, s.to_csv())?;
            }
            if let Some(p) = json {
                std::fs::write(p, s.to_json())?;
            }
            Ok(s.all_completed())
        }
        Command::Check { first, second, ranges } => {
            let (a, b) = (parse(&first)?, parse(&second)?);
            let r = equivalent_up_to_affine(&a, &b, &parse_ranges(&ranges)?, &EquivalenceConfig::default());
            println!("{:?} (a = {}, b = {}, residual {:.3e})", r.verdict, r.scale, r.offset, r.residual_std);
            if let Some(d) = r.diagnostic {
                println!("{d}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
