//! Action distance to an invariant target set, by monotone value iteration.
//!
//! The object computed here is
//!
//! ```text
//!     W(x) = inf { ∫ L(γ̇(s), γ(s)) ds : γ reflected path, γ(0) ∈ M, γ(T) = x },
//! ```
//!
//! with the running cost `L(v, x) = ¼ (v + b)ᵀ a⁻¹ (v + b)`, so travelling
//! along the reversed drift (`γ̇ = −b`) is free. Paths are kept inside the
//! closure by the normal return map (a step leaving the domain is projected
//! back to the boundary), which is the reflection mechanism matching the
//! no-flux eigenvalue problem.
//!
//! Dynamic programming walks one short segment backward from `x`: if the
//! optimal path reaches `x` from `y = x + τv` (with forward velocity `−v`),
//! then
//!
//! ```text
//!     W(x) = min_v [ τ · L(−v, x) + W(Π(x + τv)) ],
//! ```
//!
//! where `L(−v, x) = ¼ (b − v)ᵀ a⁻¹ (b − v)` vanishes at the zero-cost
//! candidate `v = b(x)`. The candidate set is a uniform direction fan crossed
//! with a geometric speed ladder anchored at the local drift magnitude, plus
//! `v = b(x)` exactly. Each node takes the minimum of its old value and the
//! best candidate, so sweeps are monotone non-increasing and bounded below by
//! zero; the iteration stops when a full sweep moves no node by more than the
//! tolerance. Four lexicographic sweep orderings are cycled so that
//! information propagates quickly along characteristics of any orientation.
//!
//! Two mechanics deserve a note. First, the segment endpoint `x + τv` is
//! evaluated by bilinear interpolation in the chart; when the step is much
//! shorter than a cell the interpolation puts weight `w₀` on the node being
//! updated, and the update is solved implicitly,
//! `W = (τL + Σ_{i≠0} wᵢ Wᵢ) / (1 − w₀)`, which is exactly the value at the
//! cell-exit point of the ray. Candidates with `w₀ > 0.999` carry no
//! information and are skipped. Second, the top of the speed ladder is
//! certified after convergence: no node may select the fastest rung as its
//! minimizer, otherwise the ladder was too short for the problem's optimal
//! controls and the field is reported as uncertified.

use crate::flow::AubryComponent;
use crate::grid::PolarGrid;
use crate::operator::chart_gradients;
use crate::problem::ProblemInstance;
use nalgebra::Vector2;
use thiserror::Error;

/// A full sweep that moves no node by more than this much is converged.
pub const VALUE_TOL: f64 = 1e-7;

/// Hard cap on value-iteration sweeps.
pub const MAX_SWEEPS: usize = 2000;

/// Candidates whose chart step stays this close to the updated node carry
/// no information after the implicit self-weight division.
const SELF_WEIGHT_LIMIT: f64 = 0.999;

/// Initial value of unreached nodes; finite so that interpolation against
/// untouched neighbours stays well-defined.
const UNREACHED: f64 = 1e30;

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("no grid node lies on the target component ({0})")]
    EmptyTargetTube(String),
    #[error(
        "value iteration stalled after {sweeps} sweeps (last sweep moved {last_update:.3e}, {unreached} nodes never reached)"
    )]
    NonConvergence {
        sweeps: usize,
        last_update: f64,
        unreached: usize,
    },
    #[error(
        "distance composition needs a unique maximizer; runner-up trails by only {gap:.3e}"
    )]
    NonUniqueMaximizer { gap: f64 },
}

/// Knobs of the control discretization.
#[derive(Debug, Clone)]
pub struct ValueIterationConfig {
    /// Number of equally spaced unit directions in the candidate fan.
    pub directions: usize,
    /// Number of speed rungs; the ladder is geometric between
    /// `ladder_lo · v_ref` and `ladder_hi · v_ref`.
    pub magnitudes: usize,
    pub ladder_lo: f64,
    pub ladder_hi: f64,
    /// Reference speed floor, as a fraction of the largest drift magnitude
    /// on the grid; keeps the ladder meaningful where the drift vanishes.
    pub speed_floor_frac: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for ValueIterationConfig {
    fn default() -> Self {
        ValueIterationConfig {
            directions: 16,
            magnitudes: 12,
            ladder_lo: 0.05,
            ladder_hi: 4.0,
            speed_floor_frac: 0.05,
            tol: VALUE_TOL,
            max_sweeps: MAX_SWEEPS,
        }
    }
}

/// Converged distance values on the grid nodes, with convergence and
/// certification diagnostics.
#[derive(Debug, Clone)]
pub struct DistanceField {
    /// Human-readable description of the target component.
    pub target: String,
    /// Node values in grid index order.
    pub values: Vec<f64>,
    pub sweeps: usize,
    /// Largest node movement in the final sweep.
    pub last_update: f64,
    /// Nodes whose optimal candidate sits on the top speed rung; zero means
    /// the ladder provably contained the optimal controls.
    pub top_rung_hits: usize,
}

impl DistanceField {
    pub fn value(&self, grid: &PolarGrid, j: usize, k: usize) -> f64 {
        self.values[grid.idx(j, k)]
    }

    /// Interpolated value at an arbitrary point of the closure (the same
    /// chart interpolation the solver itself uses).
    pub fn sample(&self, grid: &PolarGrid, p: [f64; 2]) -> f64 {
        let st = locate_projected(grid, p);
        let mut acc = 0.0;
        for (idx, w) in st.idx.iter().zip(st.w.iter()) {
            acc += w * self.values[*idx];
        }
        acc
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// True when no node's minimizing candidate saturated the speed ladder.
    pub fn certified(&self) -> bool {
        self.top_rung_hits == 0
    }
}

/// Four-corner chart interpolation stencil (convex weights).
struct Stencil {
    idx: [usize; 4],
    w: [f64; 4],
}

/// Vertical (radial) part of the stencil on one angular column: two node
/// indices with weights. Handles the outer clamp, the inner clamp on
/// annuli, and interpolation across the pole on disk-like charts.
fn column_pair(grid: &PolarGrid, k: usize, r: f64) -> ((usize, f64), (usize, f64)) {
    let n_r = grid.n_r();
    let ray = grid.ray(k);
    let h_t = grid.h_t();
    let t = (r - ray.rho_lo) / ray.delta;
    let xj = t / h_t - 0.5;
    if xj >= (n_r - 1) as f64 {
        // Beyond the last node centre: clamp (zero-gradient extrapolation).
        return ((grid.idx(n_r - 1, k), 1.0), (grid.idx(n_r - 1, k), 0.0));
    }
    if xj <= 0.0 {
        if grid.has_pole() {
            // Below the first node centre: interpolate straight across the
            // pole between this ray's first node and the antipodal one.
            let ak = grid.antipode(k);
            let r0 = ray.delta * h_t * 0.5;
            let r0a = grid.ray(ak).delta * h_t * 0.5;
            let w_here = (r + r0a) / (r0 + r0a);
            return ((grid.idx(0, k), w_here), (grid.idx(0, ak), 1.0 - w_here));
        }
        // Annulus: clamp to the inner row (reflecting inner boundary).
        return ((grid.idx(0, k), 1.0), (grid.idx(0, k), 0.0));
    }
    let j0 = xj.floor() as usize;
    let fj = xj - j0 as f64;
    ((grid.idx(j0, k), 1.0 - fj), (grid.idx(j0 + 1, k), fj))
}

/// Project a point to the closure along the ray through it and build the
/// interpolation stencil. The radial return map coincides with the normal
/// projection on circular boundaries and differs from it by O(boundary
/// slope · distance) on star-shaped ones.
fn locate_projected(grid: &PolarGrid, p: [f64; 2]) -> Stencil {
    let r = p[0].hypot(p[1]);
    let mut phi = p[1].atan2(p[0]);
    if phi < 0.0 {
        phi += crate::geometry::TWO_PI;
    }
    let h_phi = grid.h_phi();
    let n_phi = grid.n_phi();
    let kf = phi / h_phi;
    let mut k0 = kf.floor() as usize;
    if k0 >= n_phi {
        k0 = 0;
    }
    let fk = (kf - k0 as f64).clamp(0.0, 1.0);
    let k1 = (k0 + 1) % n_phi;

    // Per-column radial clamp to the closure (the angular coordinate is
    // already periodic, so only the radius needs projecting).
    let clamp_r = |k: usize| -> f64 {
        let ray = grid.ray(k);
        let hi = ray.rho_lo + ray.delta;
        let lo = if grid.has_pole() { 0.0 } else { ray.rho_lo };
        r.clamp(lo, hi)
    };
    let (a0, a1) = column_pair(grid, k0, clamp_r(k0));
    let (b0, b1) = column_pair(grid, k1, clamp_r(k1));
    Stencil {
        idx: [a0.0, a1.0, b0.0, b1.0],
        w: [
            (1.0 - fk) * a0.1,
            (1.0 - fk) * a1.1,
            fk * b0.1,
            fk * b1.1,
        ],
    }
}

/// Per-node data the inner loop reads.
struct NodeData {
    p: [f64; 2],
    b: [f64; 2],
    /// Upper triangle of a⁻¹: (inv11, inv12, inv22).
    ainv: [f64; 3],
    /// Reference speed max(|b|, floor) and the induced step length.
    v_ref: f64,
    tau: f64,
    seed: bool,
}

/// Segment cost density ¼ (b − v)ᵀ a⁻¹ (b − v) at a node.
#[inline]
fn backward_cost(node: &NodeData, v: [f64; 2]) -> f64 {
    let u0 = node.b[0] - v[0];
    let u1 = node.b[1] - v[1];
    0.25 * (node.ainv[0] * u0 * u0 + 2.0 * node.ainv[1] * u0 * u1 + node.ainv[2] * u1 * u1)
}

fn node_table(
    problem: &ProblemInstance,
    grid: &PolarGrid,
    target: &AubryComponent,
    config: &ValueIterationConfig,
) -> Vec<NodeData> {
    let mut b_max: f64 = 0.0;
    let mut nodes = Vec::with_capacity(grid.len());
    for j in 0..grid.n_r() {
        for k in 0..grid.n_phi() {
            let p = grid.point(j, k);
            let b = problem.b_at(p);
            let ai = problem.a_inv_at(p);
            b_max = b_max.max(b.norm());
            nodes.push(NodeData {
                p,
                b: [b.x, b.y],
                ainv: [ai[(0, 0)], ai[(0, 1)], ai[(1, 1)]],
                v_ref: b.norm(),
                tau: 0.0,
                seed: false,
            });
        }
    }
    let floor = config.speed_floor_frac * b_max.max(1e-12);
    for j in 0..grid.n_r() {
        for k in 0..grid.n_phi() {
            let i = grid.idx(j, k);
            let r = grid.radius(j, k);
            let cell = grid.h_r(k).min(r * grid.h_phi()).max(1e-300);
            let node = &mut nodes[i];
            node.v_ref = node.v_ref.max(floor);
            // The fastest candidate crosses at most half a cell per step.
            node.tau = 0.5 * cell / (config.ladder_hi * node.v_ref);
            // One-cell target tube: distance no larger than the local cell
            // size in either chart direction.
            let tube = grid.h_r(k).max(r * grid.h_phi());
            node.seed = target.distance_to(node.p) <= tube;
        }
    }
    nodes
}

/// The candidate evaluation shared by the sweep loop and the certification
/// pass: best value and whether the minimizer sits on the top rung.
#[inline]
fn best_candidate(
    grid: &PolarGrid,
    nodes: &[NodeData],
    values: &[f64],
    i: usize,
    dirs: &[[f64; 2]],
    mags: &[f64],
) -> (f64, bool) {
    let node = &nodes[i];
    let mut best = f64::INFINITY;
    let mut best_top = false;
    let mut consider = |v: [f64; 2], top_rung: bool| {
        let q = [node.p[0] + node.tau * v[0], node.p[1] + node.tau * v[1]];
        let st = locate_projected(grid, q);
        let mut w_self = 0.0;
        let mut acc = 0.0;
        for (idx, w) in st.idx.iter().zip(st.w.iter()) {
            if *idx == i {
                w_self += w;
            } else {
                acc += w * values[*idx];
            }
        }
        if w_self > SELF_WEIGHT_LIMIT {
            return;
        }
        let cand = (node.tau * backward_cost(node, v) + acc) / (1.0 - w_self);
        if cand < best {
            best = cand;
            best_top = top_rung;
        }
    };
    for (mi, m) in mags.iter().enumerate() {
        let speed = m * node.v_ref;
        let top = mi + 1 == mags.len();
        for d in dirs {
            consider([speed * d[0], speed * d[1]], top);
        }
    }
    // Zero-cost exact candidate: ride the drift in the backward walk.
    consider(node.b, false);
    (best, best_top)
}

/// Solve for the action distance from `target` on the grid nodes.
pub fn solve_distance(
    problem: &ProblemInstance,
    grid: &PolarGrid,
    target: &AubryComponent,
    config: &ValueIterationConfig,
) -> Result<DistanceField, DistanceError> {
    let nodes = node_table(problem, grid, target, config);
    if !nodes.iter().any(|n| n.seed) {
        return Err(DistanceError::EmptyTargetTube(target.describe()));
    }
    let dirs: Vec<[f64; 2]> = (0..config.directions)
        .map(|i| {
            let ang = crate::geometry::TWO_PI * i as f64 / config.directions as f64;
            [ang.cos(), ang.sin()]
        })
        .collect();
    let ratio = config.ladder_hi / config.ladder_lo;
    let mags: Vec<f64> = (0..config.magnitudes)
        .map(|i| {
            config.ladder_lo * ratio.powf(i as f64 / (config.magnitudes - 1).max(1) as f64)
        })
        .collect();

    let n = grid.len();
    let (n_r, n_phi) = (grid.n_r(), grid.n_phi());
    let mut values = vec![UNREACHED; n];
    for (i, node) in nodes.iter().enumerate() {
        if node.seed {
            values[i] = 0.0;
        }
    }

    let mut sweeps = 0;
    let mut last_update = f64::INFINITY;
    while sweeps < config.max_sweeps {
        let (j_rev, k_rev) = match sweeps % 4 {
            0 => (false, false),
            1 => (true, true),
            2 => (false, true),
            _ => (true, false),
        };
        let mut max_change: f64 = 0.0;
        for jj in 0..n_r {
            let j = if j_rev { n_r - 1 - jj } else { jj };
            for kk in 0..n_phi {
                let k = if k_rev { n_phi - 1 - kk } else { kk };
                let i = grid.idx(j, k);
                if nodes[i].seed {
                    continue;
                }
                let (cand, _) = best_candidate(grid, &nodes, &values, i, &dirs, &mags);
                let new = cand.min(values[i]);
                // Monotonicity is structural; a violation means the scheme
                // itself is broken, so fail loudly.
                assert!(new <= values[i], "value iteration must be monotone");
                max_change = max_change.max(values[i] - new);
                values[i] = new;
            }
        }
        sweeps += 1;
        last_update = max_change;
        if max_change < config.tol {
            break;
        }
    }

    let unreached = values.iter().filter(|v| **v >= 0.5 * UNREACHED).count();
    if last_update >= config.tol || unreached > 0 {
        return Err(DistanceError::NonConvergence {
            sweeps,
            last_update,
            unreached,
        });
    }

    // Certification pass: the converged minimizers must not sit on the top
    // speed rung, otherwise the ladder truncated the optimal controls.
    let mut top_rung_hits = 0;
    for i in 0..n {
        if nodes[i].seed {
            continue;
        }
        let (cand, top) = best_candidate(grid, &nodes, &values, i, &dirs, &mags);
        if top && cand <= values[i] + config.tol {
            top_rung_hits += 1;
        }
    }

    Ok(DistanceField {
        target: target.describe(),
        values,
        sweeps,
        last_update,
        top_rung_hits,
    })
}

/// Residuals certifying that a converged field is (approximately) a
/// viscosity solution: `H(∇W, x) = 0` in the interior and the reflecting
/// complementarity condition on the outer boundary.
#[derive(Debug, Clone)]
pub struct ViscosityReport {
    /// max |H(∇W, x)| over interior nodes outside the exclusion bands.
    pub interior_max: f64,
    /// max over outer-row nodes of min(|H|, max(∂W/∂ν, 0)).
    pub boundary_max: f64,
    /// Interior nodes skipped (target tube and gradient-jump bands).
    pub excluded: usize,
}

/// One-sided chart derivatives of `field` at a node, oriented by the
/// optimal characteristic direction.
fn upwind_gradient(
    grid: &PolarGrid,
    values: &[f64],
    problem: &ProblemInstance,
    j: usize,
    k: usize,
) -> (Vector2<f64>, f64) {
    let n_r = grid.n_r();
    let n_phi = grid.n_phi();
    let i = grid.idx(j, k);
    let h_t = grid.h_t();
    let h_phi = grid.h_phi();
    let v = values[i];
    // One-sided chart differences; at the radial edges only one side exists.
    let dt_m = if j > 0 {
        Some((v - values[grid.idx(j - 1, k)]) / h_t)
    } else {
        None
    };
    let dt_p = if j + 1 < n_r {
        Some((values[grid.idx(j + 1, k)] - v) / h_t)
    } else {
        None
    };
    let df_m = (v - values[grid.idx(j, (k + n_phi - 1) % n_phi)]) / h_phi;
    let df_p = (values[grid.idx(j, (k + 1) % n_phi)] - v) / h_phi;
    let (gt, gf) = chart_gradients(grid, j, k);
    let grad = |wt: f64, wf: f64| Vector2::new(wt * gt[0] + wf * gf[0], wt * gt[1] + wf * gf[1]);
    // Start from the centred estimate, read off the characteristic
    // direction w = 2 a p − b, then re-evaluate with the differences taken
    // on the side the characteristic comes from.
    let wt0 = match (dt_m, dt_p) {
        (Some(m), Some(p)) => 0.5 * (m + p),
        (Some(m), None) => m,
        (None, Some(p)) => p,
        (None, None) => 0.0,
    };
    let wf0 = 0.5 * (df_m + df_p);
    let x = grid.point(j, k);
    let p0 = grad(wt0, wf0);
    let a = problem.a_at(x);
    let b = problem.b_at(x);
    let w = a * p0 * 2.0 - b;
    // Chart components of the characteristic direction.
    let w_t = w.x * gt[0] + w.y * gt[1];
    let w_f = w.x * gf[0] + w.y * gf[1];
    let wt = if w_t >= 0.0 {
        dt_m.or(dt_p).unwrap_or(0.0)
    } else {
        dt_p.or(dt_m).unwrap_or(0.0)
    };
    let wf = if w_f >= 0.0 { df_m } else { df_p };
    let p = grad(wt, wf);
    let jump = match (dt_m, dt_p) {
        (Some(m), Some(pp)) => (pp - m).abs(),
        _ => 0.0,
    }
    .max((df_p - df_m).abs());
    (p, jump)
}

/// Check the converged field against the stationary equation.
pub fn viscosity_residual(
    problem: &ProblemInstance,
    grid: &PolarGrid,
    target: &AubryComponent,
    field: &DistanceField,
) -> ViscosityReport {
    let n_r = grid.n_r();
    let n_phi = grid.n_phi();
    let mut interior_max: f64 = 0.0;
    let mut boundary_max: f64 = 0.0;
    let mut excluded = 0;
    // Scale of the one-sided gradient magnitudes, for the kink detector.
    let mut grad_scale: f64 = 0.0;
    let mut slopes = vec![(Vector2::zeros(), 0.0); grid.len()];
    for j in 0..n_r {
        for k in 0..n_phi {
            let s = upwind_gradient(grid, &field.values, problem, j, k);
            grad_scale = grad_scale.max(s.0.norm());
            slopes[grid.idx(j, k)] = s;
        }
    }
    let kink_threshold = 0.5 * (1.0 + grad_scale);
    for j in 0..n_r {
        for k in 0..n_phi {
            let i = grid.idx(j, k);
            let x = grid.point(j, k);
            let (p, jump) = slopes[i];
            let h = problem.hamiltonian(p, x);
            let local = grid.h_r(k).max(grid.radius(j, k) * grid.h_phi());
            let near_target = target.distance_to(x) <= 3.0 * local;
            if j + 1 == n_r {
                // Outer row: reflecting complementarity. Either the
                // equation holds up to the boundary or the normal slope is
                // non-positive (no mass pushed outward).
                let s = grid.geometry().outer().s_of_phi(grid.phi(k));
                let nu = grid.geometry().outer().nu(s);
                let dn = p.x * nu[0] + p.y * nu[1];
                if !near_target {
                    boundary_max = boundary_max.max(h.abs().min(dn.max(0.0)));
                }
                continue;
            }
            if near_target || jump > kink_threshold {
                excluded += 1;
                continue;
            }
            interior_max = interior_max.max(h.abs());
        }
    }
    ViscosityReport {
        interior_max,
        boundary_max,
        excluded,
    }
}

/// Distance-to-maximizer field together with the pairwise component
/// distances and the zero-cost reachability relation they induce.
#[derive(Debug)]
pub struct ComposedDistance {
    pub field: DistanceField,
    /// `pairwise[j][k]` = distance from component `j` (as target) evaluated
    /// on component `k` (minimum over its representative points).
    pub pairwise: Vec<Vec<f64>>,
    /// Edges `j → k` with `pairwise[j][k]` below the zero-cost threshold.
    pub order_edges: Vec<(usize, usize)>,
}

/// Build the limit profile `W = d(·, argmax component)` when the maximizer
/// is unique, plus the pairwise distance matrix between all components.
pub fn compose_w(
    problem: &ProblemInstance,
    grid: &PolarGrid,
    components: &[AubryComponent],
    report: &crate::sigma::SigmaReport,
    config: &ValueIterationConfig,
) -> Result<ComposedDistance, DistanceError> {
    if !report.unique {
        return Err(DistanceError::NonUniqueMaximizer {
            gap: report.runner_up_gap,
        });
    }
    let mut fields = Vec::with_capacity(components.len());
    for comp in components {
        fields.push(solve_distance(problem, grid, comp, config)?);
    }
    let eval_on = |field: &DistanceField, comp: &AubryComponent| -> f64 {
        comp.orbit
            .iter()
            .map(|p| field.sample(grid, *p))
            .fold(f64::INFINITY, f64::min)
    };
    let m = components.len();
    let mut pairwise = vec![vec![0.0; m]; m];
    let mut order_edges = Vec::new();
    let zero_threshold = 5.0 * grid.h_max();
    for (j, fj) in fields.iter().enumerate() {
        for (k, comp) in components.iter().enumerate() {
            pairwise[j][k] = if j == k { 0.0 } else { eval_on(fj, comp) };
            if j != k && pairwise[j][k] <= zero_threshold {
                order_edges.push((j, k));
            }
        }
    }
    let field = fields.swap_remove(report.argmax);
    Ok(ComposedDistance {
        field,
        pairwise,
        order_edges,
    })
}
