//! Command-line front end for the eigenvalue/Hamilton-Jacobi laboratory.
//!
//! Subcommands mirror the pipeline stages: `catalog` lists built-in
//! problems, `analyze` stops after rest-set analysis and scoring, `eigen`
//! and `distance` run single stages, `verify` runs the full pipeline and
//! judges it (exit code 0 iff every enabled check passes), and `report`
//! re-renders a stored JSON report.

use clap::{Args, Parser, Subcommand};
use speclab::distance::{solve_distance, ValueIterationConfig};
use speclab::eigen::{solve_principal, IterationOptions};
use speclab::flow::find_all_components;
use speclab::grid::PolarGrid;
use speclab::harness::{
    render_csv, render_markdown, run_experiment, CheckSet, ExperimentConfig, TheoremReport,
    DEFAULT_EIGEN_BUDGET,
};
use speclab::problem::{catalog, catalog_names, from_json, ProblemInstance};
use speclab::sigma::predict_limit;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "speclab",
    about = "Principal Neumann eigenvalues of convection-dominated operators and their Hamilton-Jacobi limits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ProblemArgs {
    /// Catalog name, or inline JSON starting with '{'
    #[arg(long)]
    problem: String,
    /// Grid edge (n_r = n_phi); power of two, at least 32
    #[arg(long, default_value_t = speclab::harness::DEFAULT_GRID)]
    grid: usize,
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in problem catalog
    Catalog,
    /// Rest-set analysis and limit scores only
    Analyze {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Emit the score report as JSON instead of text
        #[arg(long)]
        json: bool,
    },
    /// Eigensolves over an epsilon sweep
    Eigen {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Comma-separated strictly decreasing sweep, e.g. 0.08,0.04,0.02
        #[arg(long, default_value = "0.08,0.04,0.02,0.01")]
        eps: String,
        /// Iteration budget per solve
        #[arg(long, default_value_t = DEFAULT_EIGEN_BUDGET)]
        budget: usize,
    },
    /// Distance field from the maximizing component
    Distance {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Output CSV path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline with judged checks (exit 0 iff all pass)
    Verify {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, default_value = "0.08,0.04,0.02,0.01")]
        eps: String,
        /// Separation parameter for the local quadratic bounds
        #[arg(long, default_value_t = speclab::testfn::DEFAULT_DELTA)]
        delta: f64,
        /// Artifact directory (default: speclab_out/<problem>)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated checks: flow,sigma,eigen,distance,local-bounds,penalized or `all`
        #[arg(long, default_value = "all")]
        checks: String,
        #[arg(long, default_value_t = DEFAULT_EIGEN_BUDGET)]
        budget: usize,
    },
    /// Re-render a stored report.json as csv or markdown
    Report {
        /// Path to report.json
        #[arg(long = "in")]
        input: PathBuf,
        /// Output format: json, csv, or md
        #[arg(long, default_value = "md")]
        format: String,
        /// Output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_eps(raw: &str) -> Result<Vec<f64>, String> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad epsilon `{s}`: {e}"))
        })
        .collect()
}

fn load_problem(spec: &str) -> Result<ProblemInstance, String> {
    if spec.trim_start().starts_with('{') {
        from_json(spec).map_err(|e| e.to_string())
    } else {
        catalog(spec).map_err(|e| e.to_string())
    }
}

fn cmd_catalog() -> Result<(), String> {
    for name in catalog_names() {
        let p = catalog(name).map_err(|e| e.to_string())?;
        println!(
            "{name}: b = ({}, {}), c = {}",
            p.b[0], p.b[1], p.c
        );
    }
    Ok(())
}

fn cmd_analyze(args: &ProblemArgs, json: bool) -> Result<(), String> {
    let problem = load_problem(&args.problem)?;
    let set = find_all_components(&problem, &[]).map_err(|e| e.to_string())?;
    let report = predict_limit(&set.components, &problem).map_err(|e| e.to_string())?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report.to_json()).map_err(|e| e.to_string())?
        );
        return Ok(());
    }
    for note in &set.notes {
        println!("note: {note}");
    }
    for (i, entry) in report.entries.iter().enumerate() {
        let marker = if i == report.argmax { " <- max" } else { "" };
        println!(
            "{}: sigma = {:.12}{marker}",
            entry.description, entry.sigma
        );
    }
    println!(
        "predicted limit: {:.12} (unique: {}, runner-up gap {:.3e})",
        report.lambda_limit, report.unique, report.runner_up_gap
    );
    Ok(())
}

fn cmd_eigen(args: &ProblemArgs, eps: &str, budget: usize) -> Result<(), String> {
    let problem = load_problem(&args.problem)?;
    let grid = PolarGrid::new(&problem.domain, args.grid, args.grid).map_err(|e| e.to_string())?;
    let opts = IterationOptions {
        max_iterations: budget,
        ..IterationOptions::default()
    };
    println!("epsilon,lambda,iterations,residual,ratio_spread,grad_w_max");
    for eps in parse_eps(eps)? {
        let pair = solve_principal(&problem, eps, &grid, &opts).map_err(|e| e.to_string())?;
        println!(
            "{},{:.12},{},{:.3e},{:.3e},{:.4}",
            eps,
            pair.lambda,
            pair.iterations,
            pair.residual,
            pair.ratio_spread,
            pair.grad_w_max(&grid)
        );
    }
    Ok(())
}

fn cmd_distance(args: &ProblemArgs, out: Option<&PathBuf>) -> Result<(), String> {
    let problem = load_problem(&args.problem)?;
    let grid = PolarGrid::new(&problem.domain, args.grid, args.grid).map_err(|e| e.to_string())?;
    let set = find_all_components(&problem, &[]).map_err(|e| e.to_string())?;
    let report = predict_limit(&set.components, &problem).map_err(|e| e.to_string())?;
    let target = &set.components[report.argmax];
    let field = solve_distance(&problem, &grid, target, &ValueIterationConfig::default())
        .map_err(|e| e.to_string())?;
    println!(
        "target {}: range [{:.6}, {:.6}], {} sweeps, certified: {}",
        target.describe(),
        field.min(),
        field.max(),
        field.sweeps,
        field.certified()
    );
    if let Some(path) = out {
        let mut csv = String::from("j,k,r,phi,x,y,d\n");
        for j in 0..grid.n_r() {
            for k in 0..grid.n_phi() {
                let p = grid.point(j, k);
                csv.push_str(&format!(
                    "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.12e}\n",
                    j,
                    k,
                    grid.radius(j, k),
                    grid.phi(k),
                    p[0],
                    p[1],
                    field.value(&grid, j, k)
                ));
            }
        }
        std::fs::write(path, csv).map_err(|e| e.to_string())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_verify(
    args: &ProblemArgs,
    eps: &str,
    delta: f64,
    out: Option<PathBuf>,
    checks: &str,
    budget: usize,
) -> Result<bool, String> {
    let out_dir = out.unwrap_or_else(|| {
        let slug: String = args
            .problem
            .chars()
            .take(32)
            .map(|c| if c.is_alphanumeric() { c } else { '_' })
            .collect();
        PathBuf::from("speclab_out").join(slug)
    });
    let config = ExperimentConfig {
        problem: args.problem.clone(),
        grid: args.grid,
        epsilons: parse_eps(eps)?,
        delta,
        checks: CheckSet::parse(checks).map_err(|e| e.to_string())?,
        out_dir: Some(out_dir.clone()),
        eigen_budget: budget,
        penalty_kappa: speclab::harness::DEFAULT_KAPPA,
    };
    let report = run_experiment(&config).map_err(|e| e.to_string())?;
    print!("{}", render_markdown(&report));
    println!("artifacts: {}", out_dir.display());
    Ok(report.passed)
}

fn cmd_report(input: &PathBuf, format: &str, out: Option<&PathBuf>) -> Result<(), String> {
    let raw = std::fs::read_to_string(input).map_err(|e| e.to_string())?;
    let report: TheoremReport = serde_json::from_str(&raw).map_err(|e| e.to_string())?;
    let rendered = match format {
        "json" => serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?,
        "csv" => render_csv(&report),
        "md" | "markdown" => render_markdown(&report),
        other => return Err(format!("unknown format `{other}` (json, csv, md)")),
    };
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
                }
            }
            std::fs::write(path, rendered).map_err(|e| e.to_string())?;
            println!("wrote {}", path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Catalog => cmd_catalog().map(|()| true),
        Command::Analyze { problem, json } => cmd_analyze(problem, *json).map(|()| true),
        Command::Eigen {
            problem,
            eps,
            budget,
        } => cmd_eigen(problem, eps, *budget).map(|()| true),
        Command::Distance { problem, out } => {
            cmd_distance(problem, out.as_ref()).map(|()| true)
        }
        Command::Verify {
            problem,
            eps,
            delta,
            out,
            checks,
            budget,
        } => cmd_verify(problem, eps, *delta, out.clone(), checks, *budget),
        Command::Report { input, format, out } => {
            cmd_report(input, format, out.as_ref()).map(|()| true)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
