//! Invariant structure of the drift flow `x' = b(x)` with reflection.
//!
//! The long-time cast of characters on a planar domain with reflecting
//! boundary, under the standing hyperbolicity assumptions, consists of
//!
//! * interior rest points (`b = 0`, hyperbolic linearization),
//! * interior periodic orbits (hyperbolic nontrivial Floquet multiplier),
//! * boundary rest points: zeros of the tangential drift `b_tau` on a
//!   boundary loop at which the drift pushes strictly outward (`b . nu > 0`),
//!   so reflection pins the dynamics to the wall,
//! * boundary periodic orbits: loops on which `b_tau` never vanishes and the
//!   drift never points inward.
//!
//! Everything is located numerically with certificates: Newton residuals for
//! rest points, section-map residuals and two independent determinant routes
//! for the monodromy of interior cycles (direct variational integration
//! against the exponential of the integrated divergence), and sign conditions
//! on dense boundary lattices for the wall components.

use crate::geometry::{BoundaryLoop, LoopSide};
use crate::problem::ProblemInstance;
use crate::riccati::CycleCoeffs;
use nalgebra::{DMatrix, Matrix2, SVector, Vector2};

/// Newton residual target for rest-point location.
pub const FIXED_POINT_TOL: f64 = 1e-12;
/// Minimal |Re| of a linearization eigenvalue (or distance of a Floquet
/// multiplier modulus from 1) below which a component is rejected as
/// non-hyperbolic.
pub const HYPERBOLICITY_TOL: f64 = 1e-9;
/// Full RK4 steps per period for stored orbits; samples land on the
/// half-step lattice (2 * CYCLE_STEPS + 1 points including the closure).
pub const CYCLE_STEPS: usize = 1024;

const SEED_LATTICE: usize = 16;
const BOUNDARY_SCAN_SAMPLES: usize = 2048;
const TRANSIENT_TIME: f64 = 80.0;
const TRANSIENT_STEP: f64 = 0.01;
const RETURN_STEP: f64 = 0.005;
const MAX_RETURN_TIME: f64 = 100.0;
const EQUILIBRIUM_SPEED: f64 = 1e-9;

#[derive(Debug, Clone, thiserror::Error)]
pub enum FlowError {
    #[error("non-hyperbolic rest point at ({x:.6}, {y:.6}): eigenvalue real parts {re1:.3e}, {re2:.3e}")]
    NonHyperbolicPoint { x: f64, y: f64, re1: f64, re2: f64 },
    #[error("non-hyperbolic cycle: nontrivial multiplier {multiplier:.8} too close to the unit circle")]
    NonHyperbolicCycle { multiplier: f64 },
    #[error("degenerate boundary rest point at ({x:.6}, {y:.6}): b.nu = {b_nu:.3e}, tangential slope {theta:.3e}")]
    DegenerateBoundaryPoint { x: f64, y: f64, b_nu: f64, theta: f64 },
    #[error("boundary loop is degenerate for the tangential drift: {0}")]
    DegenerateBoundaryLoop(String),
    #[error("cycle location failed: {0}")]
    CycleSearch(String),
    #[error("cycle certificate failed: {0}")]
    CycleCertificate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    InteriorPoint,
    BoundaryPoint,
    InteriorCycle,
    BoundaryCycle,
}

impl ComponentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ComponentKind::InteriorPoint => "interior_point",
            ComponentKind::BoundaryPoint => "boundary_point",
            ComponentKind::InteriorCycle => "interior_cycle",
            ComponentKind::BoundaryCycle => "boundary_cycle",
        }
    }
}

/// One invariant component plus its local data and certificates.
#[derive(Debug, Clone)]
pub struct AubryComponent {
    pub kind: ComponentKind,
    /// Representative points: a single entry for rest points, the half-step
    /// time lattice (2m+1 samples, last = first up to closure error) for
    /// cycles.
    pub orbit: Vec<[f64; 2]>,
    pub period: Option<f64>,
    pub data: ComponentData,
}

#[derive(Debug, Clone)]
pub enum ComponentData {
    InteriorPoint {
        jacobian: Matrix2<f64>,
        eigen_re: [f64; 2],
        eigen_im: [f64; 2],
        /// Sum of the positive eigenvalue real parts (unstable exponents).
        positive_exponent_sum: f64,
        newton_residual: f64,
    },
    BoundaryPoint {
        loop_side: LoopSide,
        arclength: f64,
        /// Tangential derivative of the tangential drift at the zero.
        theta_tilde: f64,
        /// Outward normal drift component; strictly positive to qualify.
        b_nu: f64,
        tangent: [f64; 2],
        normal: [f64; 2],
    },
    InteriorCycle {
        /// Nontrivial Floquet multiplier (stable route via the
        /// Abel-Liouville determinant).
        multiplier: f64,
        trivial_multiplier: f64,
        monodromy: Matrix2<f64>,
        /// Relative gap between det(monodromy) and exp of the integrated
        /// divergence — two independent routes to the same number.
        det_gap_rel: f64,
        closure_error: f64,
        /// Located by integrating the reversed field (repelling cycle).
        found_reversed: bool,
    },
    BoundaryCycle {
        loop_side: LoopSide,
        /// Minimal outward normal drift along the loop (>= 0 to qualify).
        b_nu_min: f64,
        /// Minimal |b_tau| along the loop (bounded away from zero).
        b_tau_min_abs: f64,
        /// Traversal direction: +1 along increasing arclength.
        direction: f64,
    },
}

impl AubryComponent {
    /// A point on the component, for labels and distance seeds.
    pub fn anchor(&self) -> [f64; 2] {
        self.orbit[0]
    }

    /// Euclidean distance from `x` to the component (point or closed orbit).
    pub fn distance_to(&self, x: [f64; 2]) -> f64 {
        match self.kind {
            ComponentKind::InteriorPoint | ComponentKind::BoundaryPoint => {
                let [ax, ay] = self.anchor();
                ((x[0] - ax).powi(2) + (x[1] - ay).powi(2)).sqrt()
            }
            ComponentKind::InteriorCycle | ComponentKind::BoundaryCycle => {
                point_to_polyline(x, &self.orbit)
            }
        }
    }

    pub fn describe(&self) -> String {
        let [x, y] = self.anchor();
        match (&self.kind, &self.data) {
            (ComponentKind::InteriorPoint, ComponentData::InteriorPoint { eigen_re, .. }) => {
                format!(
                    "interior rest point ({x:.4}, {y:.4}), exponents Re = {:.4}, {:.4}",
                    eigen_re[0], eigen_re[1]
                )
            }
            (
                ComponentKind::BoundaryPoint,
                ComponentData::BoundaryPoint {
                    theta_tilde, b_nu, ..
                },
            ) => {
                format!(
                    "boundary rest point ({x:.4}, {y:.4}), tangential slope {theta_tilde:.4}, outward drift {b_nu:.4}"
                )
            }
            (ComponentKind::InteriorCycle, ComponentData::InteriorCycle { multiplier, .. }) => {
                format!(
                    "interior cycle through ({x:.4}, {y:.4}), period {:.6}, multiplier {multiplier:.6e}",
                    self.period.unwrap_or(f64::NAN)
                )
            }
            (ComponentKind::BoundaryCycle, ComponentData::BoundaryCycle { loop_side, .. }) => {
                format!(
                    "boundary cycle on the {} loop, period {:.6}",
                    match loop_side {
                        LoopSide::Outer => "outer",
                        LoopSide::Inner => "inner",
                    },
                    self.period.unwrap_or(f64::NAN)
                )
            }
            _ => format!("component at ({x:.4}, {y:.4})"),
        }
    }
}

/// Roots of the tangential drift excluded because the drift enters the
/// domain there (reflection does not pin them), kept for reporting.
#[derive(Debug, Clone)]
pub struct ExcludedBoundaryRoot {
    pub loop_side: LoopSide,
    pub arclength: f64,
    pub point: [f64; 2],
    pub b_nu: f64,
    pub theta_tilde: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BoundaryScan {
    pub components: Vec<AubryComponent>,
    pub excluded: Vec<ExcludedBoundaryRoot>,
    pub notes: Vec<String>,
}

/// Full component inventory of a problem.
#[derive(Debug, Clone, Default)]
pub struct ComponentSet {
    pub components: Vec<AubryComponent>,
    pub excluded_boundary: Vec<ExcludedBoundaryRoot>,
    pub notes: Vec<String>,
}

// Small adapters between the array-based field API and vector arithmetic.
fn arr(v: &Vector2<f64>) -> [f64; 2] {
    [v.x, v.y]
}
fn vec2(p: [f64; 2]) -> Vector2<f64> {
    Vector2::new(p[0], p[1])
}
fn qturn(v: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}
fn b_vec(problem: &ProblemInstance, x: &Vector2<f64>) -> Vector2<f64> {
    problem.b_at(arr(x))
}

fn eig2(m: &Matrix2<f64>) -> ([f64; 2], [f64; 2]) {
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = 0.25 * tr * tr - det;
    if disc >= 0.0 {
        let sq = disc.sqrt();
        ([0.5 * tr + sq, 0.5 * tr - sq], [0.0, 0.0])
    } else {
        let im = (-disc).sqrt();
        ([0.5 * tr, 0.5 * tr], [im, -im])
    }
}

/// Newton search for `b(x) = 0` from a 16x16 seed lattice over the bounding
/// box, keeping converged, deduplicated roots strictly inside the domain.
/// Every returned rest point is certified hyperbolic.
pub fn find_interior_fixed_points(
    problem: &ProblemInstance,
) -> Result<Vec<AubryComponent>, FlowError> {
    let rad = problem.domain.bounding_radius();
    let mut roots: Vec<Vector2<f64>> = Vec::new();
    for i in 0..SEED_LATTICE {
        for jj in 0..SEED_LATTICE {
            let seed = Vector2::new(
                -rad + (i as f64 + 0.5) * 2.0 * rad / SEED_LATTICE as f64,
                -rad + (jj as f64 + 0.5) * 2.0 * rad / SEED_LATTICE as f64,
            );
            if !problem.domain.inside(arr(&seed)) {
                continue;
            }
            let mut x = seed;
            let mut ok = false;
            for _ in 0..50 {
                let f = b_vec(problem, &x);
                if f.norm() <= FIXED_POINT_TOL {
                    ok = true;
                    break;
                }
                let j = problem.b_jacobian(arr(&x));
                let det = j[(0, 0)] * j[(1, 1)] - j[(0, 1)] * j[(1, 0)];
                if det.abs() < 1e-14 || !det.is_finite() {
                    break;
                }
                let dx = Vector2::new(
                    (j[(1, 1)] * f[0] - j[(0, 1)] * f[1]) / det,
                    (-j[(1, 0)] * f[0] + j[(0, 0)] * f[1]) / det,
                );
                x -= dx;
                if !x.x.is_finite() || !x.y.is_finite() || x.norm() > 10.0 * rad {
                    break;
                }
            }
            if !ok || !problem.domain.inside(arr(&x)) {
                continue;
            }
            // Strictly interior: polar clearance from the boundary.
            let r = x.norm();
            let phi = x.y.atan2(x.x);
            let (r0, r1) = problem.domain.radial_bounds(phi);
            if r > r1 - 1e-9 || (r0 > 0.0 && r < r0 + 1e-9) {
                continue;
            }
            if roots.iter().all(|p| (p - x).norm() > 1e-6) {
                roots.push(x);
            }
        }
    }
    roots.sort_by(|p, q| {
        (p.x, p.y)
            .partial_cmp(&(q.x, q.y))
            .expect("finite coordinates")
    });
    let mut out = Vec::new();
    for x in roots {
        let jac = problem.b_jacobian(arr(&x));
        let (re, im) = eig2(&jac);
        if re[0].abs() < HYPERBOLICITY_TOL || re[1].abs() < HYPERBOLICITY_TOL {
            return Err(FlowError::NonHyperbolicPoint {
                x: x.x,
                y: x.y,
                re1: re[0],
                re2: re[1],
            });
        }
        let positive_exponent_sum = re.iter().filter(|v| **v > 0.0).sum();
        out.push(AubryComponent {
            kind: ComponentKind::InteriorPoint,
            orbit: vec![[x.x, x.y]],
            period: None,
            data: ComponentData::InteriorPoint {
                jacobian: jac,
                eigen_re: re,
                eigen_im: im,
                positive_exponent_sum,
                newton_residual: b_vec(problem, &x).norm(),
            },
        });
    }
    Ok(out)
}

/// One RK4 step of `x' = dir * b(x)`.
fn rk4_point(problem: &ProblemInstance, x: &Vector2<f64>, h: f64, dir: f64) -> Vector2<f64> {
    let f = |p: &Vector2<f64>| b_vec(problem, p) * dir;
    let k1 = f(x);
    let k2 = f(&(x + k1 * (h / 2.0)));
    let k3 = f(&(x + k2 * (h / 2.0)));
    let k4 = f(&(x + k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

struct SectionFrame {
    anchor: Vector2<f64>,
    /// Unit drift direction at the anchor (section normal).
    flow_dir: Vector2<f64>,
    /// In-section coordinate direction.
    offset_dir: Vector2<f64>,
}

/// Integrates from `start` until the next positively-oriented crossing of
/// the section, returning the crossing point and the elapsed time.
fn next_crossing(
    problem: &ProblemInstance,
    frame: &SectionFrame,
    start: Vector2<f64>,
    dir: f64,
) -> Result<(Vector2<f64>, f64), FlowError> {
    let fval = |x: &Vector2<f64>| (x - frame.anchor).dot(&frame.flow_dir);
    let mut x = start;
    let mut t = 0.0;
    let mut armed = false; // must first leave the section half-space
    let mut prev = x;
    let mut prev_f = fval(&x);
    while t < MAX_RETURN_TIME {
        let next = rk4_point(problem, &x, RETURN_STEP, dir);
        t += RETURN_STEP;
        if !problem.domain.inside(arr(&next)) {
            return Err(FlowError::CycleSearch(
                "trajectory left the domain during the return map".into(),
            ));
        }
        if b_vec(problem, &next).norm() < EQUILIBRIUM_SPEED {
            return Err(FlowError::CycleSearch(
                "trajectory collapsed onto a rest point".into(),
            ));
        }
        let f = fval(&next);
        if !armed {
            if f < -1e-9 {
                armed = true;
            }
        } else if prev_f < 0.0 && f >= 0.0 {
            // Bisect the crossing time inside the last step.
            let mut lo = 0.0f64;
            let mut hi = RETURN_STEP;
            let mut xc = next;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let cand = rk4_point(problem, &prev, mid, dir);
                if fval(&cand) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                    xc = cand;
                }
                if hi - lo < 1e-16 {
                    break;
                }
            }
            return Ok((xc, t - RETURN_STEP + hi));
        }
        prev = next;
        prev_f = f;
        x = next;
    }
    Err(FlowError::CycleSearch(format!(
        "no section return within {MAX_RETURN_TIME} time units"
    )))
}

/// Return-map Newton iteration on the section offset. Returns the periodic
/// point and its period.
fn newton_on_return_map(
    problem: &ProblemInstance,
    frame: &SectionFrame,
    dir: f64,
    scale: f64,
) -> Result<(Vector2<f64>, f64), FlowError> {
    let ret = |s: f64| -> Result<(f64, f64), FlowError> {
        let start = frame.anchor + frame.offset_dir * s;
        let (xc, t) = next_crossing(problem, frame, start, dir)?;
        Ok(((xc - frame.anchor).dot(&frame.offset_dir), t))
    };
    let mut s = 0.0f64;
    let mut best = (f64::INFINITY, 0.0f64, 0.0f64); // |g|, s, period
    for _ in 0..30 {
        let (rs, t) = ret(s)?;
        let g = rs - s;
        if g.abs() < best.0 {
            best = (g.abs(), s, t);
        }
        if g.abs() <= 1e-12 {
            break;
        }
        // Finite-difference slope with a step kept inside the linear regime
        // of the return map (strong expansion would otherwise blow the probe
        // trajectory off the section neighborhood).
        let mut ds = 1e-6 * scale.max(1.0);
        let mut slope = None;
        for _ in 0..12 {
            match ret(s + ds) {
                Ok((rs2, _)) if (rs2 - rs).abs() <= 0.05 * scale.max(1.0) => {
                    slope = Some((rs2 - rs) / ds - 1.0);
                    break;
                }
                _ => ds /= 8.0,
            }
        }
        let slope =
            slope.ok_or_else(|| FlowError::CycleSearch("return-map slope probe failed".into()))?;
        if slope.abs() < 1e-12 {
            return Err(FlowError::CycleSearch("degenerate return-map slope".into()));
        }
        s -= g / slope;
        if s.abs() > 10.0 * scale.max(1.0) {
            return Err(FlowError::CycleSearch("return-map Newton diverged".into()));
        }
    }
    if best.0 > 1e-9 * scale.max(1.0) {
        return Err(FlowError::CycleSearch(format!(
            "return map residual {:.3e} after Newton",
            best.0
        )));
    }
    Ok((frame.anchor + frame.offset_dir * best.1, best.2))
}

/// Monodromy pass: integrates position, the variational matrix, and the
/// integrated divergence over one period with `2 * steps` RK4 steps,
/// storing the position samples on the half lattice.
fn monodromy_pass(
    problem: &ProblemInstance,
    start: &Vector2<f64>,
    period: f64,
    steps: usize,
    dir: f64,
) -> (Vec<[f64; 2]>, Matrix2<f64>, f64, Vector2<f64>) {
    // State: [x, y, phi11, phi21, phi12, phi22, int_div]
    type State = SVector<f64, 7>;
    let f = |state: &State| -> State {
        let x = Vector2::new(state[0], state[1]);
        let bv = b_vec(problem, &x) * dir;
        let j = problem.b_jacobian(arr(&x)) * dir;
        let phi = Matrix2::new(state[2], state[4], state[3], state[5]);
        let dphi = j * phi;
        State::from_column_slice(&[
            bv[0],
            bv[1],
            dphi[(0, 0)],
            dphi[(1, 0)],
            dphi[(0, 1)],
            dphi[(1, 1)],
            j[(0, 0)] + j[(1, 1)],
        ])
    };
    let n = 2 * steps;
    let h = period / n as f64;
    let mut state = State::from_column_slice(&[start.x, start.y, 1.0, 0.0, 0.0, 1.0, 0.0]);
    let mut orbit = Vec::with_capacity(n + 1);
    orbit.push([state[0], state[1]]);
    for _ in 0..n {
        let k1 = f(&state);
        let k2 = f(&(state + k1 * (h / 2.0)));
        let k3 = f(&(state + k2 * (h / 2.0)));
        let k4 = f(&(state + k3 * h));
        state += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        orbit.push([state[0], state[1]]);
    }
    let phi = Matrix2::new(state[2], state[4], state[3], state[5]);
    (orbit, phi, state[6], Vector2::new(state[0], state[1]))
}

/// Locates an interior periodic orbit of the drift from `seed`, trying the
/// forward flow first and the reversed flow for repelling cycles. Returns
/// `Ok(None)` when the trajectory settles on a rest point or leaves the
/// domain in both time directions (no cycle reachable from this seed).
pub fn find_interior_cycle(
    problem: &ProblemInstance,
    seed: [f64; 2],
) -> Result<Option<AubryComponent>, FlowError> {
    let seed = vec2(seed);
    if !problem.domain.inside(arr(&seed)) {
        return Ok(None);
    }
    for (dir, reversed) in [(1.0f64, false), (-1.0f64, true)] {
        if let Some((p, period)) = locate_cycle_in_direction(problem, &seed, dir)? {
            let comp = certify_cycle(problem, &p, period, reversed)?;
            return Ok(Some(comp));
        }
    }
    Ok(None)
}

/// Transient integration plus section Newton in one time direction.
fn locate_cycle_in_direction(
    problem: &ProblemInstance,
    seed: &Vector2<f64>,
    dir: f64,
) -> Result<Option<(Vector2<f64>, f64)>, FlowError> {
    let mut x = *seed;
    let mut t = 0.0;
    while t < TRANSIENT_TIME {
        x = rk4_point(problem, &x, TRANSIENT_STEP, dir);
        t += TRANSIENT_STEP;
        if !problem.domain.inside(arr(&x)) {
            return Ok(None);
        }
        if b_vec(problem, &x).norm() < EQUILIBRIUM_SPEED {
            return Ok(None);
        }
    }
    let b = b_vec(problem, &x) * dir;
    if b.norm() < 1e-6 {
        return Ok(None);
    }
    let unit = b / b.norm();
    let frame = SectionFrame {
        anchor: x,
        flow_dir: unit,
        offset_dir: qturn(&unit),
    };
    let scale = problem.domain.bounding_radius();
    match newton_on_return_map(problem, &frame, dir, scale) {
        Ok((p, period)) => Ok(Some((p, period))),
        Err(FlowError::CycleSearch(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Extracts `(trivial, nontrivial)` multipliers from a monodromy trace and a
/// determinant: the pair solves `z^2 - tr z + det = 0`, one root is ~1 (flow
/// direction), and quadratic-formula cancellation on the small root is
/// avoided by dividing the determinant by the large one.
fn multiplier_pair(tr: f64, det: f64) -> Result<(f64, f64), FlowError> {
    let disc = 0.25 * tr * tr - det;
    if disc < 0.0 {
        return Err(FlowError::CycleCertificate(format!(
            "complex multiplier pair (tr {tr:.6}, det {det:.6})"
        )));
    }
    let big = 0.5 * tr + tr.signum() * disc.sqrt();
    let small = det / big;
    Ok(if (big - 1.0).abs() < (small - 1.0).abs() {
        (big, small)
    } else {
        (small, big)
    })
}

/// Builds the certified cycle component: orbit storage, monodromy by two
/// routes, Floquet multipliers through the stable determinant formula, and
/// a step-halving agreement check.
///
/// All integrations run in the direction in which the cycle attracts
/// (reversed time for repellers) — one-period errors would otherwise be
/// amplified by the unstable multiplier and no step count could certify the
/// orbit. Forward-orientation data is reconstructed afterwards: the sample
/// order flips, the monodromy inverts, the divergence integral negates.
fn certify_cycle(
    problem: &ProblemInstance,
    pstar: &Vector2<f64>,
    period: f64,
    found_reversed: bool,
) -> Result<AubryComponent, FlowError> {
    let scale = problem.domain.bounding_radius();
    let dir = if found_reversed { -1.0 } else { 1.0 };
    let (mut orbit, phi_run, int_div_run, xend) =
        monodromy_pass(problem, pstar, period, CYCLE_STEPS, dir);
    let closure_error = (xend - pstar).norm();
    if closure_error > 1e-8 * scale.max(1.0) {
        return Err(FlowError::CycleCertificate(format!(
            "orbit closure error {closure_error:.3e} over one period"
        )));
    }
    // Certificate in the frame actually integrated.
    let det_direct = phi_run[(0, 0)] * phi_run[(1, 1)] - phi_run[(0, 1)] * phi_run[(1, 0)];
    let det_liouville = int_div_run.exp();
    let det_gap_rel = (det_direct - det_liouville).abs() / det_liouville.abs().max(1e-300);
    if det_gap_rel > 1e-6 {
        return Err(FlowError::CycleCertificate(format!(
            "determinant routes disagree: direct {det_direct:.9e}, divergence route {det_liouville:.9e}"
        )));
    }
    // Forward-orientation data.
    let (phi, det) = if found_reversed {
        orbit.reverse();
        let inv = Matrix2::new(
            phi_run[(1, 1)],
            -phi_run[(0, 1)],
            -phi_run[(1, 0)],
            phi_run[(0, 0)],
        ) / det_direct;
        ((inv), (-int_div_run).exp())
    } else {
        (phi_run, det_liouville)
    };
    let (trivial, nontrivial) = multiplier_pair(phi[(0, 0)] + phi[(1, 1)], det)?;
    if (trivial - 1.0).abs() > 1e-6 {
        return Err(FlowError::CycleCertificate(format!(
            "flow-direction multiplier {trivial:.9} is not 1"
        )));
    }
    if (nontrivial.abs() - 1.0).abs() < HYPERBOLICITY_TOL {
        return Err(FlowError::NonHyperbolicCycle {
            multiplier: nontrivial,
        });
    }
    // Step-halving agreement on the nontrivial multiplier.
    let (_, phi_h, int_div_h, _) = monodromy_pass(problem, pstar, period, CYCLE_STEPS / 2, dir);
    let (phi_hf, det_hf) = if found_reversed {
        let dh = phi_h[(0, 0)] * phi_h[(1, 1)] - phi_h[(0, 1)] * phi_h[(1, 0)];
        (
            Matrix2::new(phi_h[(1, 1)], -phi_h[(0, 1)], -phi_h[(1, 0)], phi_h[(0, 0)]) / dh,
            (-int_div_h).exp(),
        )
    } else {
        (phi_h, int_div_h.exp())
    };
    let (_, nontrivial_h) = multiplier_pair(phi_hf[(0, 0)] + phi_hf[(1, 1)], det_hf)?;
    let rel = (nontrivial - nontrivial_h).abs() / nontrivial.abs().max(1e-300);
    if rel > 1e-6 {
        return Err(FlowError::CycleCertificate(format!(
            "multiplier not grid-converged: rel step-halving gap {rel:.3e}"
        )));
    }
    Ok(AubryComponent {
        kind: ComponentKind::InteriorCycle,
        orbit,
        period: Some(period),
        data: ComponentData::InteriorCycle {
            multiplier: nontrivial,
            trivial_multiplier: trivial,
            monodromy: phi,
            det_gap_rel,
            closure_error,
            found_reversed,
        },
    })
}

/// Scans every boundary loop for tangential rest points and whole-loop
/// boundary cycles.
pub fn boundary_components(problem: &ProblemInstance) -> Result<BoundaryScan, FlowError> {
    let mut scan = BoundaryScan::default();
    let loops: Vec<&BoundaryLoop> = problem.domain.loops().collect();
    for bloop in loops {
        let lp = bloop.length();
        let side = bloop.side();
        let n = BOUNDARY_SCAN_SAMPLES;
        let b_tau = |s: f64| -> f64 {
            let g = bloop.gamma(s);
            let t = bloop.tangent(s);
            let b = problem.b_at(g);
            b.x * t[0] + b.y * t[1]
        };
        let b_nu = |s: f64| -> f64 {
            let g = bloop.gamma(s);
            let nv = bloop.nu(s);
            let b = problem.b_at(g);
            b.x * nv[0] + b.y * nv[1]
        };
        let svals: Vec<f64> = (0..n).map(|i| lp * i as f64 / n as f64).collect();
        let tau: Vec<f64> = svals.iter().map(|&s| b_tau(s)).collect();
        let nuv: Vec<f64> = svals.iter().map(|&s| b_nu(s)).collect();
        let max_tau = tau.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let max_nu = nuv.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
        let min_nu = nuv.iter().fold(f64::INFINITY, |a, v| a.min(*v));

        if max_tau <= 1e-12 {
            // Tangentially static loop: no wall components if the drift
            // leaves the wall everywhere, degenerate (a continuum of rest
            // points) if it pushes outward somewhere.
            if max_nu <= 1e-10 {
                scan.notes.push(format!(
                    "{side:?} loop: tangential drift vanishes identically and the drift points inward; no wall components"
                ));
                continue;
            }
            return Err(FlowError::DegenerateBoundaryLoop(format!(
                "tangential drift vanishes identically while the outward drift reaches {max_nu:.3e}"
            )));
        }

        // Roots of b_tau by sign change + bisection.
        let mut roots: Vec<f64> = Vec::new();
        for i in 0..n {
            let f0 = tau[i];
            let f1 = tau[(i + 1) % n];
            if f0 == 0.0 {
                roots.push(svals[i]);
                continue;
            }
            if f0 * f1 < 0.0 {
                let mut lo = svals[i];
                let mut hi = svals[i] + lp / n as f64;
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if b_tau(mid) * f0 > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                roots.push(0.5 * (lo + hi) % lp);
            }
        }

        if roots.is_empty() {
            // Whole loop is a candidate boundary cycle.
            if min_nu >= -1e-10 {
                let comp = build_boundary_cycle(problem, bloop, min_nu)?;
                scan.components.push(comp);
            } else {
                scan.notes.push(format!(
                    "{side:?} loop: tangential drift never vanishes but the drift enters the domain (min outward component {min_nu:.3e}); loop excluded"
                ));
            }
            continue;
        }

        let hs = 1e-5 * lp.max(1.0);
        for s in roots {
            let theta = (b_tau(s + hs) - b_tau(s - hs)) / (2.0 * hs);
            let bn = b_nu(s);
            let g = bloop.gamma(s);
            if bn > 1e-10 {
                if theta.abs() < HYPERBOLICITY_TOL {
                    return Err(FlowError::DegenerateBoundaryPoint {
                        x: g[0],
                        y: g[1],
                        b_nu: bn,
                        theta,
                    });
                }
                scan.components.push(AubryComponent {
                    kind: ComponentKind::BoundaryPoint,
                    orbit: vec![g],
                    period: None,
                    data: ComponentData::BoundaryPoint {
                        loop_side: side,
                        arclength: s,
                        theta_tilde: theta,
                        b_nu: bn,
                        tangent: bloop.tangent(s),
                        normal: bloop.nu(s),
                    },
                });
            } else if bn < -1e-10 {
                scan.excluded.push(ExcludedBoundaryRoot {
                    loop_side: side,
                    arclength: s,
                    point: g,
                    b_nu: bn,
                    theta_tilde: theta,
                });
            } else {
                return Err(FlowError::DegenerateBoundaryPoint {
                    x: g[0],
                    y: g[1],
                    b_nu: bn,
                    theta,
                });
            }
        }
    }
    Ok(scan)
}

/// Time parametrization of a boundary cycle: integrates `ds/dt = b_tau(s)`
/// once around, storing the orbit on the half lattice.
fn build_boundary_cycle(
    problem: &ProblemInstance,
    bloop: &BoundaryLoop,
    b_nu_min: f64,
) -> Result<AubryComponent, FlowError> {
    let lp = bloop.length();
    let b_tau = |s: f64| -> f64 {
        let g = bloop.gamma(s);
        let t = bloop.tangent(s);
        let b = problem.b_at(g);
        b.x * t[0] + b.y * t[1]
    };
    // Period by periodic-trapezoid quadrature (spectrally accurate for a
    // smooth positive integrand).
    let nq = 4096;
    let mut period = 0.0;
    let mut min_abs_tau = f64::INFINITY;
    for i in 0..nq {
        let s = lp * i as f64 / nq as f64;
        let v = b_tau(s).abs();
        min_abs_tau = min_abs_tau.min(v);
        period += 1.0 / v;
    }
    period *= lp / nq as f64;
    if !period.is_finite() || min_abs_tau < 1e-10 {
        return Err(FlowError::DegenerateBoundaryLoop(format!(
            "tangential speed degenerates (min {min_abs_tau:.3e})"
        )));
    }
    let direction = b_tau(0.0).signum();
    // RK4 on the scalar arclength ODE.
    let n = 2 * CYCLE_STEPS;
    let h = period / n as f64;
    let mut s = 0.0f64;
    let mut orbit = Vec::with_capacity(n + 1);
    orbit.push(bloop.gamma(0.0));
    for _ in 0..n {
        let k1 = b_tau(s);
        let k2 = b_tau(s + 0.5 * h * k1);
        let k3 = b_tau(s + 0.5 * h * k2);
        let k4 = b_tau(s + h * k3);
        s += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        orbit.push(bloop.gamma(s));
    }
    let wrap_error = (s.abs() - lp).abs();
    if wrap_error > 1e-6 * lp {
        return Err(FlowError::CycleCertificate(format!(
            "boundary cycle does not close: arclength defect {wrap_error:.3e} after one period"
        )));
    }
    Ok(AubryComponent {
        kind: ComponentKind::BoundaryCycle,
        orbit,
        period: Some(period),
        data: ComponentData::BoundaryCycle {
            loop_side: bloop.side(),
            b_nu_min,
            b_tau_min_abs: min_abs_tau,
            direction,
        },
    })
}

/// Time average of a scalar field over a component: the field value at a
/// rest point, the Simpson average along the stored time lattice for cycles.
pub fn cycle_average(comp: &AubryComponent, field: &crate::expr::FieldExpr) -> f64 {
    match comp.kind {
        ComponentKind::InteriorPoint | ComponentKind::BoundaryPoint => {
            let [x, y] = comp.orbit[0];
            field.eval2(x, y)
        }
        ComponentKind::InteriorCycle | ComponentKind::BoundaryCycle => {
            let period = comp.period.expect("cycles carry a period");
            let vals: Vec<f64> = comp
                .orbit
                .iter()
                .map(|[x, y]| field.eval2(*x, *y))
                .collect();
            crate::riccati::integrate_lattice(&vals, period) / period
        }
    }
}

/// Transverse-frame coefficient samples for the periodic Riccati flow along
/// an interior cycle (unit normal `n = J b/|b|`, so `Q = n.a n`,
/// `B = n.(Db) n`), or the zero-dimensional frame of a boundary cycle.
pub fn transverse_coeffs(
    problem: &ProblemInstance,
    comp: &AubryComponent,
) -> Result<CycleCoeffs, FlowError> {
    let period = comp
        .period
        .ok_or_else(|| FlowError::CycleSearch("component has no period".into()))?;
    match comp.kind {
        ComponentKind::InteriorCycle => {
            let mut q = Vec::with_capacity(comp.orbit.len());
            let mut b = Vec::with_capacity(comp.orbit.len());
            let mut c = Vec::with_capacity(comp.orbit.len());
            for &[x, y] in &comp.orbit {
                let bv = problem.b_at([x, y]);
                let nrm = bv.norm();
                if nrm < 1e-12 {
                    return Err(FlowError::CycleSearch(
                        "drift vanishes on the stored orbit".into(),
                    ));
                }
                let n = qturn(&(bv / nrm));
                let a = problem.a_at([x, y]);
                let j = problem.b_jacobian([x, y]);
                q.push(DMatrix::from_element(1, 1, (a * n).dot(&n)));
                b.push(DMatrix::from_element(1, 1, (j * n).dot(&n)));
                c.push(problem.c_at([x, y]));
            }
            Ok(CycleCoeffs {
                period,
                dim: 1,
                q,
                b,
                c,
            })
        }
        ComponentKind::BoundaryCycle => {
            let c: Vec<f64> = comp
                .orbit
                .iter()
                .map(|&[x, y]| problem.c_at([x, y]))
                .collect();
            let len = comp.orbit.len();
            Ok(CycleCoeffs {
                period,
                dim: 0,
                q: vec![DMatrix::zeros(0, 0); len],
                b: vec![DMatrix::zeros(0, 0); len],
                c,
            })
        }
        _ => Err(FlowError::CycleSearch(
            "transverse coefficients are defined along cycles only".into(),
        )),
    }
}

/// Default seed set for the cycle search: three radii by two angles inside
/// the domain (plus whatever the caller adds).
fn default_cycle_seeds(problem: &ProblemInstance) -> Vec<[f64; 2]> {
    let rad = problem.domain.bounding_radius();
    let mut seeds = Vec::new();
    for frac in [0.35, 0.6, 0.85] {
        for ang in [0.0f64, 2.1f64] {
            let r = frac * rad;
            seeds.push([r * ang.cos(), r * ang.sin()]);
        }
    }
    seeds
}

/// Distance from `p` to the closed polyline given by `poly`'s segments.
pub fn point_to_polyline(p: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    let pt = vec2(p);
    let mut best = f64::INFINITY;
    for w in poly.windows(2) {
        let a = vec2(w[0]);
        let b = vec2(w[1]);
        let ab = b - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            ((pt - a).dot(&ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        best = best.min((pt - (a + ab * t)).norm());
    }
    best
}

fn cycles_coincide(a: &AubryComponent, b: &AubryComponent, scale: f64) -> bool {
    let pa = a.period.unwrap_or(0.0);
    let pb = b.period.unwrap_or(0.0);
    if (pa - pb).abs() > 1e-3 * pa.abs().max(1.0) {
        return false;
    }
    point_to_polyline(a.orbit[0], &b.orbit) < 1e-3 * scale.max(1.0)
}

/// Full inventory: interior rest points, interior cycles from the default
/// (plus user) seeds, boundary components. Deterministic for a fixed problem
/// and seed list.
pub fn find_all_components(
    problem: &ProblemInstance,
    extra_seeds: &[[f64; 2]],
) -> Result<ComponentSet, FlowError> {
    let mut set = ComponentSet::default();
    set.components.extend(find_interior_fixed_points(problem)?);
    let mut seeds = default_cycle_seeds(problem);
    seeds.extend_from_slice(extra_seeds);
    let scale = problem.domain.bounding_radius();
    for seed in seeds {
        if let Some(cyc) = find_interior_cycle(problem, seed)? {
            if !set
                .components
                .iter()
                .filter(|c| c.kind == ComponentKind::InteriorCycle)
                .any(|c| cycles_coincide(c, &cyc, scale))
            {
                set.components.push(cyc);
            }
        }
    }
    let scan = boundary_components(problem)?;
    set.components.extend(scan.components);
    set.excluded_boundary = scan.excluded;
    set.notes = scan.notes;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::catalog;

    #[test]
    fn attractor_has_single_stable_rest_point() {
        let p = catalog("P1_attractor").unwrap();
        let pts = find_interior_fixed_points(&p).unwrap();
        assert_eq!(pts.len(), 1);
        let [x, y] = pts[0].orbit[0];
        assert!(x.abs() < 1e-10 && y.abs() < 1e-10);
        match &pts[0].data {
            ComponentData::InteriorPoint {
                positive_exponent_sum,
                eigen_re,
                ..
            } => {
                assert!(*positive_exponent_sum == 0.0);
                assert!((eigen_re[0] + 1.0).abs() < 1e-9);
            }
            _ => panic!("wrong component data"),
        }
        // Boundary of this field: tangential drift vanishes identically,
        // drift points inward, so no wall components.
        let scan = boundary_components(&p).unwrap();
        assert!(scan.components.is_empty());
        assert!(!scan.notes.is_empty());
    }

    #[test]
    fn constant_drift_pins_one_boundary_point() {
        let p = catalog("P0_constant").unwrap();
        assert!(find_interior_fixed_points(&p).unwrap().is_empty());
        let scan = boundary_components(&p).unwrap();
        assert_eq!(scan.components.len(), 1);
        assert_eq!(scan.excluded.len(), 1);
        match &scan.components[0].data {
            ComponentData::BoundaryPoint {
                theta_tilde, b_nu, ..
            } => {
                let [x, y] = scan.components[0].orbit[0];
                assert!((x - 1.0).abs() < 1e-9 && y.abs() < 1e-8);
                assert!((theta_tilde + 1.0).abs() < 1e-6, "theta {theta_tilde}");
                assert!((b_nu - 1.0).abs() < 1e-9);
            }
            _ => panic!("wrong component data"),
        }
        // The excluded root is the upstream pole (-1, 0).
        assert!((scan.excluded[0].point[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn spiral_source_gets_boundary_cycle() {
        let p = catalog("P2_spiral_source").unwrap();
        let pts = find_interior_fixed_points(&p).unwrap();
        assert_eq!(pts.len(), 1);
        match &pts[0].data {
            ComponentData::InteriorPoint {
                positive_exponent_sum,
                ..
            } => assert!((positive_exponent_sum - 2.0).abs() < 1e-9),
            _ => panic!("wrong component data"),
        }
        let scan = boundary_components(&p).unwrap();
        assert_eq!(scan.components.len(), 1);
        let cyc = &scan.components[0];
        assert_eq!(cyc.kind, ComponentKind::BoundaryCycle);
        let period = cyc.period.unwrap();
        assert!(
            (period - std::f64::consts::TAU).abs() < 1e-8,
            "period {period}"
        );
        // Time average of c over the wall cycle: c = 4 exp(-1) on the circle.
        let avg = cycle_average(cyc, &p.c);
        assert!((avg - 4.0 * (-1.0f64).exp()).abs() < 1e-9, "avg {avg}");
    }

    #[test]
    fn hopf_cycle_located_with_tight_multiplier() {
        let p = catalog("P4_hopf_cycle").unwrap();
        let cyc = find_interior_cycle(&p, [0.6, 0.0]).unwrap().expect("cycle");
        let period = cyc.period.unwrap();
        assert!(
            (period - std::f64::consts::TAU).abs() < 1e-6,
            "period {period}"
        );
        match &cyc.data {
            ComponentData::InteriorCycle {
                multiplier,
                trivial_multiplier,
                det_gap_rel,
                found_reversed,
                ..
            } => {
                let expected = (-4.0 * std::f64::consts::PI).exp();
                assert!(
                    (multiplier - expected).abs() / expected < 1e-6,
                    "multiplier {multiplier:e} vs {expected:e}"
                );
                assert!((trivial_multiplier - 1.0).abs() < 1e-7);
                assert!(*det_gap_rel < 1e-6);
                assert!(!found_reversed);
            }
            _ => panic!("wrong component data"),
        }
        // Orbit stays on the unit circle.
        for [x, y] in cyc.orbit.iter().step_by(128) {
            assert!(((x * x + y * y).sqrt() - 1.0).abs() < 1e-7);
        }
        // Transverse frame: Q = 1, B = -2 on the cycle.
        let coeffs = transverse_coeffs(&p, &cyc).unwrap();
        for (q, b) in coeffs.q.iter().zip(coeffs.b.iter()).step_by(256) {
            assert!((q[(0, 0)] - 1.0).abs() < 1e-8);
            assert!((b[(0, 0)] + 2.0).abs() < 1e-6, "B sample {}", b[(0, 0)]);
        }
    }

    #[test]
    fn reversed_hopf_cycle_found_backward_with_unstable_multiplier() {
        let p = catalog("P4r_reversed_hopf").unwrap();
        let cyc = find_interior_cycle(&p, [0.6, 0.0]).unwrap().expect("cycle");
        match &cyc.data {
            ComponentData::InteriorCycle {
                multiplier,
                found_reversed,
                closure_error,
                ..
            } => {
                let expected = (4.0 * std::f64::consts::PI).exp();
                assert!(
                    (multiplier - expected).abs() / expected < 1e-5,
                    "multiplier {multiplier:e} vs {expected:e}"
                );
                assert!(*found_reversed);
                assert!(*closure_error < 1e-8);
            }
            _ => panic!("wrong component data"),
        }
        // Its wall: drift pushes outward on the outer circle, never
        // tangentially static -> boundary cycle.
        let scan = boundary_components(&p).unwrap();
        assert_eq!(scan.components.len(), 1);
        assert_eq!(scan.components[0].kind, ComponentKind::BoundaryCycle);
    }

    #[test]
    fn full_inventory_of_the_hopf_problem() {
        let p = catalog("P4_hopf_cycle").unwrap();
        let set = find_all_components(&p, &[]).unwrap();
        let kinds: Vec<ComponentKind> = set.components.iter().map(|c| c.kind).collect();
        assert!(kinds.contains(&ComponentKind::InteriorPoint));
        assert!(kinds.contains(&ComponentKind::InteriorCycle));
        // Exactly one cycle despite several seeds finding it.
        assert_eq!(
            kinds
                .iter()
                .filter(|k| **k == ComponentKind::InteriorCycle)
                .count(),
            1
        );
        // The outer wall is excluded (drift enters the domain).
        assert!(kinds.iter().all(|k| *k != ComponentKind::BoundaryCycle));
    }
}
