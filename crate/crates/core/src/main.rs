use std::fs::{self, File};
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use fedbl::datagen::{write_csv, write_node_csv};
use fedbl::experiment::{
    build_model, build_task, check_hypergrad, run_experiment, ExperimentConfig, RunOptions,
    SolverKind,
};
use fedbl::simplex::project;
use fedbl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fedbl",
    version,
    about = "Bilevel node weighting for federated learning"
)]
struct Cli {
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration, or a summary.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// bilevel-convex, bilevel-nonconvex, fedavg, local or static-w.
    #[arg(long)]
    solver: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write telemetry.
    Run(Common),
    /// Compare approximate, dense and finite-difference hypergradients.
    CheckHypergrad {
        #[command(flatten)]
        common: Common,
        /// Number of random weight vectors.
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Write the generated task data as CSV.
    GenData(Common),
    /// Project vectors read from stdin onto the capped simplex.
    Project {
        #[arg(long, default_value_t = 1.0)]
        cap: f64,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &c.out_dir {
        cfg.output.dir = dir.clone();
    }
    if let Some(name) = &c.solver {
        cfg.outer.solver = SolverKind::parse(name)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_vector(line: &str) -> Result<Vec<f64>> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("not a number: `{t}`")))
        })
        .collect()
}

fn project_stdin(cap: f64) -> Result<()> {
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_vector(&line).and_then(|v| project(&v, cap)) {
            Ok(r) => {
                let w: Vec<String> = r.w.values().iter().map(|x| x.to_string()).collect();
                writeln!(out, "{}  multiplier={}", w.join(" "), r.multiplier)?;
            }
            Err(e) => writeln!(out, "error: {e}")?,
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<bool> {
    let opts = RunOptions::default();
    match cli.command {
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let s = run_experiment(&cfg, &opts)?;
            if !cli.quiet {
                let r = &s.final_record;
                println!("run {} finished in {:.2}s", s.run_id, s.wall_time);
                println!("  weights      {:?}", s.weights);
                println!("  F estimate   {:.6e}", r.f_estimate);
                if let Some(t) = r.test_loss {
                    println!("  test loss    {t:.6e}");
                }
                if let Some(g) = r.gen_gap {
                    println!("  gen. gap     {g:.6e}");
                }
                println!("  comm rounds  {}", r.comm_rounds);
                println!("  output       {}", cfg.output.dir.display());
            }
            Ok(true)
        }
        Command::CheckHypergrad { common, points } => {
            let cfg = load_config(&common)?;
            let report = check_hypergrad(&cfg, points, &opts)?;
            if !cli.quiet {
                for (i, p) in report.points.iter().enumerate() {
                    println!(
                        "point {i:>2}: abs err {:.3e}  rel err {:.3e}",
                        p.abs_error, p.rel_error
                    );
                }
                println!(
                    "max abs err {:.3e}, max rel err {:.3e}: {}",
                    report.max_abs_error,
                    report.max_rel_error,
                    if report.passed { "ok" } else { "FAILED" }
                );
            }
            Ok(report.passed)
        }
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let model = build_model(&cfg.task)?;
            let task = build_task(&cfg, model.as_ref())?;
            fs::create_dir_all(&cfg.output.dir)?;
            write_csv(&task.fed, File::create(cfg.output.dir.join("train.csv"))?)?;
            write_node_csv(
                &task.truth.test,
                File::create(cfg.output.dir.join("test.csv"))?,
            )?;
            if !cli.quiet {
                println!("wrote {}", cfg.output.dir.display());
            }
            Ok(true)
        }
        Command::Project { cap } => {
            project_stdin(cap)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
