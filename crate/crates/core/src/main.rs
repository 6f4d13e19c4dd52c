//! Command-line driver: single solves, the efficiency study, the two mesh
//! sweeps, and a quick self-check gate.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sqge::analysis::{records_to_csv, ConvergenceRecord};
use sqge::studies::{
    emit_outputs, run_coarse_sweep, run_efficiency_study, run_fine_sweep, ExperimentConfig,
    Method,
};
use sqge::Error;

const EXIT_SOLVER_FAILURE: u8 = 2;
const EXIT_CHECK_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "sqge",
    about = "One-level and two-level C1 finite element solvers for the \
             streamfunction form of the stationary quasi-geostrophic equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one problem instance and print its convergence row.
    Solve(RunArgs),
    /// Paired one-level / two-level timing comparison over a fine-size list.
    Efficiency(RunArgs),
    /// Fine-size sweep with coupled coarse size H = ratio * h.
    #[command(name = "sweep-h")]
    SweepH(RunArgs),
    /// Coarse-size sweep at fixed fine h (sizes list gives H values).
    #[command(name = "sweep-H")]
    SweepCapH(RunArgs),
    /// Run the built-in quick acceptance gate.
    Check(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem id: sine-squared | boundary-layer.
    #[arg(long)]
    problem: Option<String>,
    /// Reynolds number override.
    #[arg(long)]
    re: Option<f64>,
    /// Rossby number override.
    #[arg(long)]
    ro: Option<f64>,
    /// one-level | two-level.
    #[arg(long)]
    method: Option<Method>,
    /// Comma-separated mesh sizes, decreasing; fractions allowed (1/16).
    #[arg(long, value_name = "LIST")]
    h_list: Option<String>,
    /// Fixed fine size for sweep-H.
    #[arg(long, value_parser = parse_size)]
    fine_h: Option<f64>,
    /// Coarse-to-fine ratio (power of two).
    #[arg(long)]
    ratio: Option<usize>,
    /// Quadrature exactness degree.
    #[arg(long)]
    quad_degree: Option<usize>,
    /// Newton absolute residual tolerance.
    #[arg(long)]
    newton_tol: Option<f64>,
    /// Worker thread count (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output base path (emits <out>.csv and <out>.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also emit gnuplot-ready .dat files.
    #[arg(long)]
    plots: bool,
    /// Gate the run on the built-in acceptance thresholds.
    #[arg(long)]
    check: bool,
}

fn parse_size(s: &str) -> Result<f64, String> {
    let v = if let Some((num, den)) = s.split_once('/') {
        let num: f64 = num.trim().parse().map_err(|_| format!("bad size '{s}'"))?;
        let den: f64 = den.trim().parse().map_err(|_| format!("bad size '{s}'"))?;
        num / den
    } else {
        s.trim().parse().map_err(|_| format!("bad size '{s}'"))?
    };
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("size must be positive, got '{s}'"))
    }
}

fn parse_size_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(parse_size)
        .collect()
}

impl RunArgs {
    fn into_config(self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| Error::IoFailure {
                    path: path.clone(),
                    source,
                })?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(p) = self.problem {
            cfg.problem = p;
        }
        if self.re.is_some() {
            cfg.re = self.re;
        }
        if self.ro.is_some() {
            cfg.ro = self.ro;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(list) = &self.h_list {
            cfg.h_list = parse_size_list(list).map_err(Error::Config)?;
        }
        if self.fine_h.is_some() {
            cfg.fine_h = self.fine_h;
        }
        if let Some(r) = self.ratio {
            cfg.ratio = r;
        }
        if let Some(d) = self.quad_degree {
            cfg.quad_degree = d;
        }
        if let Some(t) = self.newton_tol {
            cfg.newton_abs_tol = t;
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.to_string_lossy().into_owned());
        }
        cfg.plots |= self.plots;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn finish(records: Vec<ConvergenceRecord>, cfg: &ExperimentConfig, check: bool) -> ExitCode {
    print!("{}", records_to_csv(&records));
    if let Some(out) = &cfg.out {
        if let Err(e) = emit_outputs(&records, cfg, std::path::Path::new(out)) {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_SOLVER_FAILURE);
        }
    }
    if records.iter().any(|r| !r.converged) {
        eprintln!("error: one or more rows failed to converge");
        return ExitCode::from(EXIT_SOLVER_FAILURE);
    }
    if check && !run_check_gate(&records) {
        return ExitCode::from(EXIT_CHECK_FAILURE);
    }
    ExitCode::SUCCESS
}

/// Quick acceptance thresholds applied to an emitted table: all rows
/// converged and every reported H2 order (if any) in the plausible band
/// for the fourth-order method.
fn run_check_gate(records: &[ConvergenceRecord]) -> bool {
    let mut ok = true;
    for (i, r) in records.iter().enumerate() {
        if let Some(order) = r.order_h2 {
            let pass = (3.0..=7.0).contains(&order);
            println!(
                "check row {i}: H2 order {order:.3} in [3.0, 7.0] .. {}",
                if pass { "pass" } else { "FAIL" }
            );
            ok &= pass;
        }
    }
    ok
}

/// The standalone `check` subcommand: a fast convergence gate on the
/// sine-squared problem (two-level, h in {1/8, 1/16, 1/32}).
fn run_standalone_check(mut cfg: ExperimentConfig) -> Result<ExitCode, Error> {
    if cfg.h_list.is_empty() {
        cfg.h_list = vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0];
    }
    cfg.validate()?;
    let records = run_fine_sweep(&cfg)?;
    print!("{}", records_to_csv(&records));
    if records.iter().any(|r| !r.converged) {
        eprintln!("error: one or more rows failed to converge");
        return Ok(ExitCode::from(EXIT_SOLVER_FAILURE));
    }
    let last_order = records.last().and_then(|r| r.order_h2);
    let pass = matches!(last_order, Some(o) if (3.0..=7.0).contains(&o));
    println!(
        "check: final H2 order {} in [3.0, 7.0] .. {}",
        last_order.map_or("n/a".into(), |o| format!("{o:.3}")),
        if pass { "pass" } else { "FAIL" }
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILURE)
    })
}

fn run() -> Result<ExitCode, Error> {
    let cli = Cli::parse();
    let (args, which) = match cli.command {
        Command::Solve(a) => (a, "solve"),
        Command::Efficiency(a) => (a, "efficiency"),
        Command::SweepH(a) => (a, "sweep-h"),
        Command::SweepCapH(a) => (a, "sweep-H"),
        Command::Check(a) => (a, "check"),
    };
    let check = args.check;
    let cfg = args.into_config()?;
    if let Some(workers) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }

    match which {
        "solve" => {
            let mut cfg = cfg;
            if cfg.h_list.len() > 1 {
                cfg.h_list.truncate(1);
            }
            if cfg.h_list.is_empty() {
                return Err(Error::Config("solve requires --h-list with one size".into()));
            }
            let records = run_fine_sweep(&cfg)?;
            Ok(finish(records, &cfg, check))
        }
        "efficiency" => {
            let records = run_efficiency_study(&cfg)?;
            Ok(finish(records, &cfg, check))
        }
        "sweep-h" => {
            let records = run_fine_sweep(&cfg)?;
            Ok(finish(records, &cfg, check))
        }
        "sweep-H" => {
            let records = run_coarse_sweep(&cfg)?;
            Ok(finish(records, &cfg, check))
        }
        "check" => run_standalone_check(cfg),
        _ => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_SOLVER_FAILURE)
        }
    }
}
