use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evohom::cli_harness::{export_kernel, run_gconv, run_selftest, scenario_kernel, RunConfig, Verdict};
use evohom::scenario_suite::{default_params, SCENARIO_NAMES};
use evohom::{EvoError, Result};

const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "evohom", version, about = "Homogenization experiments for evolutionary equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem of a scenario and report diagnostics.
    Solve {
        #[command(flatten)]
        run: RunArgs,
        /// Oscillation index; defaults to the last schedule entry.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Sweep the schedule and decide whether the solutions converge weakly.
    Gconv(RunArgs),
    /// Run the built-in invariant checks.
    Selftest,
    /// Write the memory kernel of a scenario's limit as CSV.
    Kernel(RunArgs),
    /// List scenario names with their default parameters.
    ListScenarios,
}

#[derive(Args)]
struct RunArgs {
    /// RunConfig JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario name, used when no config file is given.
    #[arg(long)]
    scenario: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial weight rate.
    #[arg(long)]
    nu: Option<f64>,
    /// Comma-separated oscillation indices, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<usize>>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.scenario) {
            (Some(path), _) => RunConfig::from_path(path)?,
            (None, Some(name)) => RunConfig::for_scenario(name),
            (None, None) => return Err(EvoError::ConfigInvalid("give --config or --scenario".into())),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(nu) = self.nu {
            cfg.nu_policy.initial = Some(nu);
        }
        if let Some(s) = &self.schedule {
            cfg.schedule = Some(s.clone());
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn solve(run: &RunArgs, k: Option<usize>) -> Result<u8> {
    let cfg = run.config()?;
    let sc = cfg.build(cfg.nu_policy.initial)?;
    let k = k.unwrap_or(*sc.schedule.last().unwrap());
    let s = sc.solve(k)?;
    let summary = serde_json::json!({
        "scenario": sc.name,
        "k": k,
        "nu": sc.grid.nu,
        "terms_used": s.terms_used,
        "tail_bound": s.tail_bound,
        "contraction_q": s.contraction_q,
        "norms": s.u.iter().map(|u| u.norm()).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        for (c, u) in s.u.iter().enumerate() {
            if u.ndof() > 0 {
                u.save_csv(&dir.join(format!("solution_{c}.csv")))?;
            }
        }
    }
    Ok(0)
}

fn gconv(run: &RunArgs) -> Result<u8> {
    let cfg = run.config()?;
    let report = run_gconv(&cfg)?;
    if let (Some(dir), Some(_)) = (&cfg.output_dir, &report.kernel) {
        export_kernel(&report, &dir.join("kernel.csv"))?;
    }
    for (k, g) in &report.gap_curve {
        println!("k={k:<5} gap={g:.3e}");
    }
    if let Some(w) = &report.wot {
        println!(
            "wot: converged={} rate={:.3} final_increment={:.3e} cauchy={}/{}",
            w.converged, w.convergence_rate, w.final_increment, w.cauchy_pairs, w.pairs
        );
    }
    let status = match &report.verdict {
        Verdict::Converged => "converged",
        Verdict::NotConverged => "not_converged",
        Verdict::Aborted(_) => "aborted",
    };
    println!("verdict: {status} (final gap {:.3e}, tolerance {:.1e}, nu {})", report.final_gap(), report.tolerance, report.nu);
    Ok(match report.verdict {
        Verdict::Converged => 0,
        Verdict::NotConverged => EXIT_NOT_CONVERGED,
        Verdict::Aborted(_) => EXIT_ERROR,
    })
}

fn kernel(run: &RunArgs) -> Result<u8> {
    let cfg = run.config()?;
    let path = match &cfg.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            dir.join("kernel.csv")
        }
        None => Path::new("kernel.csv").to_path_buf(),
    };
    let k = scenario_kernel(&cfg)?;
    k.write_csv(&path)?;
    println!("wrote {} samples to {} (max |K| = {:.3e})", k.samples.len(), path.display(), k.max_abs());
    Ok(0)
}

fn selftest() -> u8 {
    let summary = run_selftest();
    print!("{}", summary.render());
    if summary.all_passed() {
        0
    } else {
        EXIT_NOT_CONVERGED
    }
}

fn list() -> Result<u8> {
    for name in SCENARIO_NAMES {
        println!("{name:<14} {}", default_params(name)?);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match &cli.command {
        Command::Solve { run, k } => solve(run, *k),
        Command::Gconv(run) => gconv(run),
        Command::Selftest => Ok(selftest()),
        Command::Kernel(run) => kernel(run),
        Command::ListScenarios => list(),
    };
    match out {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
