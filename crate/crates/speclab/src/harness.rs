//! End-to-end experiment orchestration.
//!
//! A run walks the pipeline catalog/parse → rest-set analysis → score
//! prediction → (per ε) eigensolve → distance composition → comparisons,
//! recording every stage with its wall time. Stage failures never abort
//! the run: the failing stage is marked, dependents are skipped, and a
//! partial report is still produced and written. The report embeds a
//! content hash of the semantic configuration so artifacts can be traced
//! back to exactly what produced them.
//!
//! Numbers in the report are deterministic functions of the configuration;
//! wall-clock fields (`created_unix`, `seconds`, `wall_seconds`) are the
//! only volatile outputs, and [`strip_volatile_json`] /
//! [`strip_volatile_csv`] remove them for byte-level comparisons.

use crate::distance::{compose_w, ValueIterationConfig};
use crate::eigen::{penalized_eigenpair, solve_principal, EigenPair, IterationOptions};
use crate::flow::{find_all_components, ComponentSet};
use crate::grid::PolarGrid;
use crate::problem::{catalog, from_json, ProblemInstance};
use crate::sigma::predict_limit;
use crate::testfn::verify_local_bounds;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Default ε sweep (strictly decreasing).
pub const DEFAULT_EPSILONS: [f64; 4] = [0.08, 0.04, 0.02, 0.01];
/// Default grid edge (n_r = n_phi).
pub const DEFAULT_GRID: usize = 128;
/// Default iteration budget handed to the eigensolver for sweep work.
pub const DEFAULT_EIGEN_BUDGET: usize = 2000;
/// Default confinement strength for the penalized solve.
pub const DEFAULT_KAPPA: f64 = 1.0;
/// Agreement tolerance between the extrapolated eigenvalue and the
/// predicted limit (the fit is first-order in ε and unproven, so this is
/// a soft rule, not a convergence-order claim).
pub const EXTRAP_TOL: f64 = 0.1;
/// Sup-norm tolerance for the logarithmic-transform comparison at the
/// smallest ε.
pub const W_SUP_TOL: f64 = 0.05;
/// Penalized runs may not exceed the reference eigenvalue beyond this.
pub const PENALIZED_TOL: f64 = 1e-8;
/// Zero-order sandwich slack re-checked at report level.
pub const SANDWICH_TOL: f64 = 1e-8;
/// Noise floor for the monotone-trend diagnostic.
pub const MONOTONE_NOISE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report (de)serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Which pipeline aspects to run and judge.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct CheckSet {
    pub flow: bool,
    pub sigma: bool,
    pub eigen: bool,
    pub distance: bool,
    pub local_bounds: bool,
    pub penalized: bool,
}

impl Default for CheckSet {
    fn default() -> Self {
        Self {
            flow: true,
            sigma: true,
            eigen: true,
            distance: true,
            local_bounds: true,
            penalized: true,
        }
    }
}

impl CheckSet {
    pub fn none() -> Self {
        Self {
            flow: false,
            sigma: false,
            eigen: false,
            distance: false,
            local_bounds: false,
            penalized: false,
        }
    }

    /// Parse a comma-separated list of check names; `all` enables
    /// everything.
    pub fn parse(list: &str) -> Result<Self, HarnessError> {
        let mut set = Self::none();
        for raw in list.split(',') {
            let name = raw.trim();
            match name {
                "" => {}
                "all" => set = Self::default(),
                "flow" => set.flow = true,
                "sigma" => set.sigma = true,
                "eigen" => set.eigen = true,
                "distance" => set.distance = true,
                "local-bounds" | "local_bounds" => set.local_bounds = true,
                "penalized" => set.penalized = true,
                other => {
                    return Err(HarnessError::InvalidConfig(format!(
                        "unknown check `{other}` (expected flow, sigma, eigen, distance, local-bounds, penalized, all)"
                    )))
                }
            }
        }
        Ok(set)
    }

    fn enabled_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.flow {
            names.push("flow");
        }
        if self.sigma {
            names.push("sigma");
        }
        if self.eigen {
            names.push("eigen");
        }
        if self.distance {
            names.push("distance");
        }
        if self.local_bounds {
            names.push("local-bounds");
        }
        if self.penalized {
            names.push("penalized");
        }
        names
    }
}

/// Everything a run depends on. The hash of the semantic fields (not the
/// output directory) names the run.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    /// Catalog name, or inline JSON when the string starts with `{`.
    pub problem: String,
    pub grid: usize,
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub checks: CheckSet,
    /// Where artifacts land; `None` keeps the run in memory.
    pub out_dir: Option<PathBuf>,
    pub eigen_budget: usize,
    pub penalty_kappa: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: "P0_constant".to_string(),
            grid: DEFAULT_GRID,
            epsilons: DEFAULT_EPSILONS.to_vec(),
            delta: crate::testfn::DEFAULT_DELTA,
            checks: CheckSet::default(),
            out_dir: None,
            eigen_budget: DEFAULT_EIGEN_BUDGET,
            penalty_kappa: DEFAULT_KAPPA,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.epsilons.is_empty() {
            return Err(HarnessError::InvalidConfig("empty epsilon list".into()));
        }
        for w in self.epsilons.windows(2) {
            if !(w[1] < w[0]) {
                return Err(HarnessError::InvalidConfig(format!(
                    "epsilons must be strictly decreasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if !(self.epsilons[self.epsilons.len() - 1] > 0.0) {
            return Err(HarnessError::InvalidConfig(
                "epsilons must be positive".into(),
            ));
        }
        if self.grid < 32 || !self.grid.is_power_of_two() {
            return Err(HarnessError::InvalidConfig(format!(
                "grid must be a power of two >= 32, got {}",
                self.grid
            )));
        }
        if !(self.delta > 0.0 && self.delta <= crate::testfn::DELTA_MAX) {
            return Err(HarnessError::InvalidConfig(format!(
                "delta must lie in (0, {}], got {}",
                crate::testfn::DELTA_MAX,
                self.delta
            )));
        }
        if self.eigen_budget == 0 {
            return Err(HarnessError::InvalidConfig(
                "eigen iteration budget must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Content hash over the semantic fields (the output directory does
    /// not change what is computed, so it stays out).
    pub fn hash(&self) -> String {
        let canon = serde_json::json!({
            "problem": self.problem,
            "grid": self.grid,
            "epsilons": self.epsilons.iter().map(|e| format!("{e:.12e}")).collect::<Vec<_>>(),
            "delta": format!("{:.12e}", self.delta),
            "checks": self.checks.enabled_names(),
            "eigen_budget": self.eigen_budget,
            "penalty_kappa": format!("{:.12e}", self.penalty_kappa),
        });
        let mut hasher = Sha256::new();
        hasher.update(canon.to_string().as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Resolve the problem field to an instance.
    pub fn problem_instance(&self) -> Result<ProblemInstance, String> {
        if self.problem.trim_start().starts_with('{') {
            from_json(&self.problem).map_err(|e| e.to_string())
        } else {
            catalog(&self.problem).map_err(|e| e.to_string())
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// `ok`, `failed`, or `skipped`.
    pub status: String,
    pub seconds: f64,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsilonRow {
    pub epsilon: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub residual: f64,
    pub ratio_spread: f64,
    /// Diagnostic bound on `max |grad W|` (finite-difference estimate).
    pub grad_w_max: f64,
    /// Sup-norm gap to the composed limit profile, when computed.
    pub sup_w_err: Option<f64>,
    pub wall_seconds: f64,
}

/// One judged rule: `observed <= tolerance` with both sides on record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub tolerance_name: String,
    pub tolerance: f64,
    pub observed: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalBoundsRow {
    pub component: String,
    pub delta: f64,
    pub samples: usize,
    pub violations: usize,
    pub slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoremReport {
    pub problem: String,
    pub grid: usize,
    pub config_hash: String,
    pub created_unix: u64,
    pub stages: Vec<StageRecord>,
    pub components: Vec<String>,
    pub sigma: Option<serde_json::Value>,
    pub sigma_max: Option<f64>,
    pub sigma_unique: Option<bool>,
    pub sigma_gap: Option<f64>,
    pub rows: Vec<EpsilonRow>,
    /// Eigenvalue at the smallest ε actually solved.
    pub lambda_raw: Option<f64>,
    /// Least-squares limit of the fit λ ≈ λ₀ + Cε over the three
    /// smallest ε.
    pub lambda_extrap: Option<f64>,
    /// |λ_extrap − max σ| when both sides exist.
    pub extrap_gap: Option<f64>,
    pub monotone_warning: Option<String>,
    pub distance_sup: Option<f64>,
    pub distance_certified: Option<bool>,
    pub order_edges: Vec<(usize, usize)>,
    pub penalized_lambda: Option<f64>,
    pub local_bounds: Vec<LocalBoundsRow>,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
    pub error: Option<String>,
}

/// Least-squares fit `λ ≈ λ₀ + C·ε` over the `k` smallest ε (`k = min(3,
/// len)`); returns `(λ₀, C)`.
pub fn extrapolate(rows: &[(f64, f64)]) -> Option<(f64, f64)> {
    if rows.is_empty() {
        return None;
    }
    let tail = &rows[rows.len().saturating_sub(3)..];
    if tail.len() == 1 {
        return Some((tail[0].1, 0.0));
    }
    let n = tail.len() as f64;
    let (se, sl) = tail
        .iter()
        .fold((0.0, 0.0), |(a, b), (e, l)| (a + e, b + l));
    let (me, ml) = (se / n, sl / n);
    let mut num = 0.0;
    let mut den = 0.0;
    for (e, l) in tail {
        num += (e - me) * (l - ml);
        den += (e - me) * (e - me);
    }
    if den == 0.0 {
        return Some((ml, 0.0));
    }
    let slope = num / den;
    Some((ml - slope * me, slope))
}

/// Monotone-trend diagnostic: eigenvalues along a decreasing ε sweep are
/// expected to drift one way; report a warning when the sequence turns
/// around by more than the noise floor.
pub fn monotone_diagnostic(rows: &[(f64, f64)]) -> Option<String> {
    if rows.len() < 3 {
        return None;
    }
    let mut rising = false;
    let mut falling = false;
    for w in rows.windows(2) {
        let d = w[1].1 - w[0].1;
        if d > MONOTONE_NOISE {
            rising = true;
        }
        if d < -MONOTONE_NOISE {
            falling = true;
        }
    }
    if rising && falling {
        let seq: Vec<String> = rows
            .iter()
            .map(|(e, l)| format!("lambda({e}) = {l:.6}"))
            .collect();
        Some(format!(
            "eigenvalue sweep is not monotone beyond noise {MONOTONE_NOISE}: {}",
            seq.join(", ")
        ))
    } else {
        None
    }
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn init_thread_cap() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        if let Ok(raw) = std::env::var("SPECLAB_THREADS") {
            if let Ok(n) = raw.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}

struct StageRunner {
    stages: Vec<StageRecord>,
    first_error: Option<String>,
}

impl StageRunner {
    fn new() -> Self {
        Self {
            stages: Vec::new(),
            first_error: None,
        }
    }

    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T, String>) -> Option<T> {
        let t0 = Instant::now();
        match f() {
            Ok(v) => {
                self.stages.push(StageRecord {
                    name: name.to_string(),
                    status: "ok".into(),
                    seconds: t0.elapsed().as_secs_f64(),
                    note: String::new(),
                });
                Some(v)
            }
            Err(e) => {
                self.stages.push(StageRecord {
                    name: name.to_string(),
                    status: "failed".into(),
                    seconds: t0.elapsed().as_secs_f64(),
                    note: e.clone(),
                });
                if self.first_error.is_none() {
                    self.first_error = Some(format!("{name}: {e}"));
                }
                None
            }
        }
    }

    fn skip(&mut self, name: &str, why: &str) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            status: "skipped".into(),
            seconds: 0.0,
            note: why.to_string(),
        });
    }
}

/// Run the full pipeline for one configuration. Stage failures are
/// captured in the report (`passed = false`, `error` set); only an
/// invalid configuration or an artifact-write failure returns `Err`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<TheoremReport, HarnessError> {
    config.validate()?;
    init_thread_cap();
    let hash = config.hash();
    let mut runner = StageRunner::new();
    let mut checks: Vec<CheckOutcome> = Vec::new();

    let problem = runner.run("problem", || config.problem_instance());

    let grid = problem.as_ref().and_then(|p| {
        runner.run("grid", || {
            PolarGrid::new(&p.domain, config.grid, config.grid).map_err(|e| e.to_string())
        })
    });

    let need_flow = config.checks.flow
        || config.checks.sigma
        || config.checks.distance
        || config.checks.local_bounds
        || config.checks.penalized;
    let components: Option<ComponentSet> = match (&problem, need_flow) {
        (Some(p), true) => runner.run("flow", || {
            find_all_components(p, &[]).map_err(|e| e.to_string())
        }),
        (Some(_), false) => {
            runner.skip("flow", "not requested");
            None
        }
        (None, _) => {
            runner.skip("flow", "no problem instance");
            None
        }
    };

    let need_sigma = config.checks.sigma || config.checks.distance || config.checks.penalized;
    let sigma_report = match (&problem, &components, need_sigma) {
        (Some(p), Some(set), true) => runner.run("sigma", || {
            predict_limit(&set.components, p).map_err(|e| e.to_string())
        }),
        (_, _, false) => {
            runner.skip("sigma", "not requested");
            None
        }
        _ => {
            runner.skip("sigma", "no component set");
            None
        }
    };

    // Per-ε eigensolves, dispatched in parallel; row order follows the
    // configured sweep regardless of scheduling.
    let need_eigen = config.checks.eigen || config.checks.distance || config.checks.penalized;
    let opts = IterationOptions {
        max_iterations: config.eigen_budget,
        ..IterationOptions::default()
    };
    let mut pairs: Vec<Option<EigenPair>> = vec![None; config.epsilons.len()];
    let mut rows: Vec<EpsilonRow> = Vec::new();
    if let (Some(p), Some(g), true) = (&problem, &grid, need_eigen) {
        let solved: Vec<(usize, Result<(EigenPair, f64), String>)> = config
            .epsilons
            .par_iter()
            .enumerate()
            .map(|(i, eps)| {
                let t0 = Instant::now();
                let r = solve_principal(p, *eps, g, &opts)
                    .map(|pair| (pair, t0.elapsed().as_secs_f64()))
                    .map_err(|e| format!("eps = {eps}: {e}"));
                (i, r)
            })
            .collect();
        let mut failures: Vec<String> = Vec::new();
        let t_stage = Instant::now();
        for (i, outcome) in solved {
            match outcome {
                Ok((pair, wall)) => {
                    rows.push(EpsilonRow {
                        epsilon: pair.epsilon,
                        lambda: pair.lambda,
                        iterations: pair.iterations,
                        residual: pair.residual,
                        ratio_spread: pair.ratio_spread,
                        grad_w_max: pair.grad_w_max(g),
                        sup_w_err: None,
                        wall_seconds: wall,
                    });
                    pairs[i] = Some(pair);
                }
                Err(e) => failures.push(e),
            }
        }
        rows.sort_by(|a, b| b.epsilon.partial_cmp(&a.epsilon).expect("finite eps"));
        if failures.is_empty() {
            runner.stages.push(StageRecord {
                name: "eigen".into(),
                status: "ok".into(),
                seconds: t_stage.elapsed().as_secs_f64(),
                note: String::new(),
            });
        } else {
            let note = failures.join("; ");
            runner.stages.push(StageRecord {
                name: "eigen".into(),
                status: "failed".into(),
                seconds: t_stage.elapsed().as_secs_f64(),
                note: note.clone(),
            });
            if runner.first_error.is_none() {
                runner.first_error = Some(format!("eigen: {note}"));
            }
        }
    } else if need_eigen {
        runner.skip("eigen", "missing problem or grid");
    } else {
        runner.skip("eigen", "not requested");
    }

    // Zero-order sandwich re-check at report level (the solver enforces
    // it too; this records the observed slack).
    if config.checks.eigen && !rows.is_empty() {
        if let (Some(p), Some(g)) = (&problem, &grid) {
            let mut min_c = f64::INFINITY;
            let mut max_c = f64::NEG_INFINITY;
            for pt in g.node_points() {
                let c = p.c_at(pt);
                min_c = min_c.min(c);
                max_c = max_c.max(c);
            }
            let worst = rows
                .iter()
                .map(|r| (min_c - r.lambda).max(r.lambda - max_c))
                .fold(f64::NEG_INFINITY, f64::max);
            checks.push(CheckOutcome {
                name: "eigen_sandwich".into(),
                tolerance_name: "SANDWICH_TOL".into(),
                tolerance: SANDWICH_TOL,
                observed: worst,
                pass: worst <= SANDWICH_TOL,
            });
        }
    }

    // Distance composition and the W comparison.
    let mut distance_sup = None;
    let mut distance_certified = None;
    let mut order_edges = Vec::new();
    let mut composed_field = None;
    if config.checks.distance {
        match (&problem, &grid, &components, &sigma_report) {
            (Some(p), Some(g), Some(set), Some(sr)) => {
                let out = runner.run("distance", || {
                    compose_w(p, g, &set.components, sr, &ValueIterationConfig::default())
                        .map_err(|e| e.to_string())
                });
                if let Some(composed) = out {
                    distance_sup = Some(composed.field.max());
                    distance_certified = Some(composed.field.certified());
                    order_edges = composed.order_edges.clone();
                    for (row, pair) in rows.iter_mut().zip(pairs.iter()) {
                        if let Some(pair) = pair {
                            let sup = pair
                                .w
                                .iter()
                                .zip(&composed.field.values)
                                .map(|(a, b)| (a - b).abs())
                                .fold(0.0f64, f64::max);
                            row.sup_w_err = Some(sup);
                        }
                    }
                    composed_field = Some(composed.field);
                }
            }
            _ => runner.skip("distance", "needs problem, grid, components, and scores"),
        }
        if let Some(cert) = distance_certified {
            checks.push(CheckOutcome {
                name: "distance_certified".into(),
                tolerance_name: "exact".into(),
                tolerance: 0.0,
                observed: if cert { 0.0 } else { 1.0 },
                pass: cert,
            });
        }
        if let Some(sup) = rows.last().and_then(|r| r.sup_w_err) {
            checks.push(CheckOutcome {
                name: "w_comparison".into(),
                tolerance_name: "W_SUP_TOL".into(),
                tolerance: W_SUP_TOL,
                observed: sup,
                pass: sup <= W_SUP_TOL,
            });
        }
    } else {
        runner.skip("distance", "not requested");
    }

    // Local sandwich bounds around the maximizing component.
    let mut local_rows = Vec::new();
    if config.checks.local_bounds {
        match (&problem, &grid, &components, &sigma_report, &composed_field) {
            (Some(p), Some(g), Some(set), Some(sr), Some(field)) => {
                let comp = &set.components[sr.argmax];
                let out = runner.run("local-bounds", || {
                    verify_local_bounds(p, g, field, comp, config.delta).map_err(|e| e.to_string())
                });
                if let Some(rep) = out {
                    local_rows.push(LocalBoundsRow {
                        component: comp.describe(),
                        delta: rep.delta,
                        samples: rep.samples,
                        violations: rep.violations,
                        slack: rep.slack,
                    });
                    checks.push(CheckOutcome {
                        name: "local_bounds_violations".into(),
                        tolerance_name: "exact".into(),
                        tolerance: 0.0,
                        observed: rep.violations as f64,
                        pass: rep.violations == 0,
                    });
                }
            }
            _ => runner.skip("local-bounds", "needs a composed distance field"),
        }
    } else {
        runner.skip("local-bounds", "not requested");
    }

    // Penalized confinement run at the smallest solved ε.
    let mut penalized_lambda = None;
    if config.checks.penalized {
        let reference = rows.last().map(|r| (r.epsilon, r.lambda));
        match (&problem, &grid, &components, &sigma_report, reference) {
            (Some(p), Some(g), Some(set), Some(sr), Some((eps, lambda_ref))) => {
                let keep = &set.components[sr.argmax];
                let out = runner.run("penalized", || {
                    penalized_eigenpair(p, eps, g, keep, config.penalty_kappa, &opts)
                        .map_err(|e| e.to_string())
                });
                if let Some(pair) = out {
                    penalized_lambda = Some(pair.lambda);
                    checks.push(CheckOutcome {
                        name: "penalized_lower_bound".into(),
                        tolerance_name: "PENALIZED_TOL".into(),
                        tolerance: PENALIZED_TOL,
                        observed: pair.lambda - lambda_ref,
                        pass: pair.lambda <= lambda_ref + PENALIZED_TOL,
                    });
                }
            }
            _ => runner.skip("penalized", "needs components, scores, and an eigen row"),
        }
    } else {
        runner.skip("penalized", "not requested");
    }

    // Comparisons.
    let eps_lambda: Vec<(f64, f64)> = rows.iter().map(|r| (r.epsilon, r.lambda)).collect();
    let fit = extrapolate(&eps_lambda);
    let lambda_extrap = fit.map(|(l0, _)| l0);
    let sigma_max = sigma_report.as_ref().map(|r| r.lambda_limit);
    let extrap_gap = match (lambda_extrap, sigma_max) {
        (Some(l), Some(s)) => Some((l - s).abs()),
        _ => None,
    };
    if let (Some(gap), true) = (extrap_gap, config.checks.eigen && config.checks.sigma) {
        checks.push(CheckOutcome {
            name: "extrap_agreement".into(),
            tolerance_name: "EXTRAP_TOL".into(),
            tolerance: EXTRAP_TOL,
            observed: gap,
            pass: gap <= EXTRAP_TOL,
        });
    }

    let passed = runner.first_error.is_none() && checks.iter().all(|c| c.pass);
    let report = TheoremReport {
        problem: config.problem.clone(),
        grid: config.grid,
        config_hash: hash,
        created_unix: now_unix(),
        stages: runner.stages,
        components: components
            .as_ref()
            .map(|set| set.components.iter().map(|c| c.describe()).collect())
            .unwrap_or_default(),
        sigma: sigma_report.as_ref().map(|r| r.to_json()),
        sigma_max,
        sigma_unique: sigma_report.as_ref().map(|r| r.unique),
        sigma_gap: sigma_report.as_ref().map(|r| r.runner_up_gap),
        rows,
        lambda_raw: eps_lambda.last().map(|(_, l)| *l),
        lambda_extrap,
        extrap_gap,
        monotone_warning: monotone_diagnostic(&eps_lambda),
        distance_sup,
        distance_certified,
        order_edges,
        penalized_lambda,
        local_bounds: local_rows,
        checks,
        passed,
        error: runner.first_error,
    };

    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
        emit_report(&report, dir)?;
        if let (Some(g), Some(field)) = (&grid, &composed_field) {
            atomic_write(&dir.join("distance.csv"), &render_field_csv(g, &field.values, "d"))?;
        }
        if let (Some(g), Some(pair)) = (&grid, pairs.iter().flatten().last()) {
            atomic_write(
                &dir.join(format!("fields_eps_{:e}.csv", pair.epsilon)),
                &render_eigen_csv(g, pair),
            )?;
        }
    }
    Ok(report)
}

/// Write `report.json`, `report.csv`, and `report.md` into `dir`
/// (atomic renames; stable field ordering).
pub fn emit_report(report: &TheoremReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)?;
    let paths = [
        (dir.join("report.json"), json),
        (dir.join("report.csv"), render_csv(report)),
        (dir.join("report.md"), render_markdown(report)),
    ];
    let mut out = Vec::new();
    for (path, contents) in paths {
        atomic_write(&path, &contents)?;
        out.push(path);
    }
    Ok(out)
}

fn atomic_write(path: &Path, contents: &str) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

/// Per-ε CSV with the summary columns repeated on every row.
pub fn render_csv(report: &TheoremReport) -> String {
    let mut s =
        String::from("problem,epsilon,grid,lambda,lambda_extrap,sigma_max,gap,supW_err,wall_seconds\n");
    for row in &report.rows {
        s.push_str(&format!(
            "{},{:.12e},{},{:.12e},{},{},{},{},{:.3}\n",
            report.problem,
            row.epsilon,
            report.grid,
            row.lambda,
            fmt_opt(report.lambda_extrap),
            fmt_opt(report.sigma_max),
            fmt_opt(report.extrap_gap),
            fmt_opt(row.sup_w_err),
            row.wall_seconds,
        ));
    }
    s
}

pub fn render_markdown(report: &TheoremReport) -> String {
    let mut s = format!(
        "# Run {} on `{}` ({}x{})\n\n",
        report.config_hash, report.problem, report.grid, report.grid
    );
    s.push_str("| epsilon | lambda | iterations | residual | supW_err | wall s |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for r in &report.rows {
        s.push_str(&format!(
            "| {:.4} | {:.10} | {} | {:.2e} | {} | {:.1} |\n",
            r.epsilon,
            r.lambda,
            r.iterations,
            r.residual,
            r.sup_w_err
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into()),
            r.wall_seconds,
        ));
    }
    s.push_str(&format!(
        "| extrapolated | {} | | | sigma_max {} | gap {} |\n\n",
        fmt_opt(report.lambda_extrap),
        fmt_opt(report.sigma_max),
        fmt_opt(report.extrap_gap),
    ));
    for c in &report.checks {
        s.push_str(&format!(
            "- `{}`: observed {:.3e} vs {} = {:.1e} -> {}\n",
            c.name,
            c.observed,
            c.tolerance_name,
            c.tolerance,
            if c.pass { "pass" } else { "FAIL" }
        ));
    }
    if let Some(w) = &report.monotone_warning {
        s.push_str(&format!("\n> warning: {w}\n"));
    }
    if let Some(e) = &report.error {
        s.push_str(&format!("\n> error: {e}\n"));
    }
    s.push_str(&format!(
        "\nOverall: {}\n",
        if report.passed { "pass" } else { "FAIL" }
    ));
    s
}

fn render_field_csv(grid: &PolarGrid, values: &[f64], label: &str) -> String {
    let mut s = format!("j,k,r,phi,x,y,{label}\n");
    for j in 0..grid.n_r() {
        for k in 0..grid.n_phi() {
            let p = grid.point(j, k);
            s.push_str(&format!(
                "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.12e}\n",
                j,
                k,
                grid.radius(j, k),
                grid.phi(k),
                p[0],
                p[1],
                values[grid.idx(j, k)]
            ));
        }
    }
    s
}

fn render_eigen_csv(grid: &PolarGrid, pair: &EigenPair) -> String {
    let mut s = String::from("j,k,r,phi,x,y,u,w\n");
    for j in 0..grid.n_r() {
        for k in 0..grid.n_phi() {
            let p = grid.point(j, k);
            let i = grid.idx(j, k);
            s.push_str(&format!(
                "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.12e},{:.12e}\n",
                j,
                k,
                grid.radius(j, k),
                grid.phi(k),
                p[0],
                p[1],
                pair.u[i],
                pair.w[i]
            ));
        }
    }
    s
}

/// Drop the volatile lines (`created_unix`, `seconds`, `wall_seconds`)
/// from a pretty-printed JSON report, for byte-level comparisons.
pub fn strip_volatile_json(s: &str) -> String {
    s.lines()
        .filter(|line| {
            let t = line.trim_start();
            !(t.starts_with("\"created_unix\"")
                || t.starts_with("\"seconds\"")
                || t.starts_with("\"wall_seconds\""))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Drop the trailing wall-seconds column from a report CSV.
pub fn strip_volatile_csv(s: &str) -> String {
    s.lines()
        .map(|line| match line.rfind(',') {
            Some(idx) => &line[..idx],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}
