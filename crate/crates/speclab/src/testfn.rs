//! Local comparison functions pinning the limit profile near a component.
//!
//! Near a component the limit profile is squeezed between two explicit
//! quadratics built from the component's Riccati data `Γ` and its companion
//! weight `D` (the solution of `D M + Mᵀ D = 2I` for the antistable
//! closed-loop matrix `M = 4QΓ − B`):
//!
//! ```text
//!   interior point   W±(z)   = (Γ ± δD) z·z
//!   boundary point   W±(z)   = (γ̃ ± δ d̃) z_τ² ± δ z_ν²  ∓ ε² z_ν
//!   interior cycle   W±(x)   = (Γ̄(t) ± δ D̄(t)) z′²      + ε Φ±(t)
//!   boundary cycle   W±(z)   = ± δ z_ν²                   ∓ ε² z_ν
//! ```
//!
//! where `z` is the chart offset from the component, `z_τ`/`z_ν` tangential
//! and inward-normal coordinates at a boundary point, and `(t, z′)`
//! phase/transverse coordinates along a cycle. The phase corrections `Φ±`
//! compensate the along-orbit discrepancy `−2 tr(Q̄(Γ̄ ± δD̄)) + c` around
//! its mean, so they are periodic by construction.
//!
//! What makes the pair useful is the strict sign of the Hamiltonian on a
//! chart ball: `H(∇W⁻, x) ≤ −(δ/2)ρ(x)²` and `H(∇W⁺, x) ≥ +(δ/2)ρ(x)²`,
//! with `ρ` the chart distance. Both inequalities are *sampled* here; when
//! the cubic remainder of the drift beats the chosen `δ` the builder halves
//! `δ` automatically and retries before giving up.

use crate::distance::DistanceField;
use crate::flow::{transverse_coeffs, AubryComponent, ComponentData, ComponentKind, FlowError};
use crate::grid::PolarGrid;
use crate::problem::ProblemInstance;
use crate::riccati::{care_maximal, periodic_riccati_maximal, RiccatiError};
use nalgebra::{DMatrix, Matrix2, Vector2};
use thiserror::Error;

/// Largest admissible separation parameter.
pub const DELTA_MAX: f64 = 0.2;

/// Default separation parameter (before automatic halving).
pub const DEFAULT_DELTA: f64 = 0.05;

/// Radius of the chart ball on which the sign inequalities are sampled.
pub const SIGN_SAMPLE_RADIUS: f64 = 0.1;

/// How many times the builder halves `δ` before declaring failure.
const MAX_HALVINGS: usize = 4;

/// Absolute slack absorbing finite-difference noise in the sampled signs.
const SIGN_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TestFnError {
    #[error("separation parameter must lie in (0, {DELTA_MAX}], got {0}")]
    DeltaOutOfRange(f64),
    #[error(
        "sign inequalities fail down to delta = {delta_final:.4e} (worst defect {defect:.3e})"
    )]
    SignInequalityFailure { delta_final: f64, defect: f64 },
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Which side of the sandwich a function certifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
enum Frame {
    Point {
        xi: [f64; 2],
        /// `Γ ± δD`.
        form: Matrix2<f64>,
    },
    BoundaryPoint {
        xi: [f64; 2],
        tangent: [f64; 2],
        normal: [f64; 2],
        /// `γ̃ ± δ d̃`.
        coef_tangent: f64,
        /// `± δ`.
        coef_normal: f64,
        /// `∓ ε²`.
        lin_normal: f64,
    },
    Cycle {
        orbit: Vec<[f64; 2]>,
        period: f64,
        /// `Γ̄ ± δD̄` on the full lattice `t_k = kP/m`.
        form: Vec<f64>,
        /// `Φ±` on the same lattice.
        phase: Vec<f64>,
        epsilon: f64,
    },
    WallCycle {
        orbit: Vec<[f64; 2]>,
        /// `± δ`.
        coef_normal: f64,
        /// `∓ ε²`.
        lin_normal: f64,
    },
}

/// One side of the local sandwich, evaluable on the chart neighbourhood of
/// its component.
#[derive(Debug, Clone)]
pub struct LocalTestFunction {
    pub side: Side,
    pub delta: f64,
    pub epsilon: f64,
    frame: Frame,
}

impl LocalTestFunction {
    /// Chart distance to the component (|z| for points, |z′| for cycles,
    /// wall depth for boundary cycles).
    pub fn chart_distance(&self, x: [f64; 2]) -> f64 {
        match &self.frame {
            Frame::Point { xi, .. } | Frame::BoundaryPoint { xi, .. } => {
                ((x[0] - xi[0]).powi(2) + (x[1] - xi[1]).powi(2)).sqrt()
            }
            Frame::Cycle { orbit, .. } | Frame::WallCycle { orbit, .. } => {
                project_to_polyline(x, orbit).1
            }
        }
    }

    /// The leading quadratic `W±_δ` (no ε corrections).
    pub fn eval_leading(&self, x: [f64; 2]) -> f64 {
        self.eval_parts(x, false)
    }

    /// The corrected evaluator `W±_{δ,ε}`.
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.eval_parts(x, true)
    }

    fn eval_parts(&self, x: [f64; 2], corrected: bool) -> f64 {
        match &self.frame {
            Frame::Point { xi, form } => {
                let z = Vector2::new(x[0] - xi[0], x[1] - xi[1]);
                (form * z).dot(&z)
            }
            Frame::BoundaryPoint {
                xi,
                tangent,
                normal,
                coef_tangent,
                coef_normal,
                lin_normal,
            } => {
                let z = [x[0] - xi[0], x[1] - xi[1]];
                let zt = z[0] * tangent[0] + z[1] * tangent[1];
                let zn = -(z[0] * normal[0] + z[1] * normal[1]);
                let mut v = coef_tangent * zt * zt + coef_normal * zn * zn;
                if corrected {
                    v += lin_normal * zn;
                }
                v
            }
            Frame::Cycle {
                orbit,
                period,
                form,
                phase,
                epsilon,
            } => {
                let (t_frac, dist) = project_to_polyline(x, orbit);
                let m = form.len() - 1;
                let pos = (t_frac * m as f64).clamp(0.0, m as f64);
                let k = (pos.floor() as usize).min(m - 1);
                let f = pos - k as f64;
                let g = form[k] * (1.0 - f) + form[k + 1] * f;
                let mut v = g * dist * dist;
                if corrected {
                    let ph = phase[k] * (1.0 - f) + phase[k + 1] * f;
                    v += epsilon * ph;
                }
                let _ = period;
                v
            }
            Frame::WallCycle {
                orbit,
                coef_normal,
                lin_normal,
            } => {
                let (_, dist) = project_to_polyline(x, orbit);
                let mut v = coef_normal * dist * dist;
                if corrected {
                    v += lin_normal * dist;
                }
                v
            }
        }
    }

    /// Gradient of the leading quadratic: analytic where the chart is
    /// affine, central differences along cycles.
    pub fn gradient_leading(&self, x: [f64; 2]) -> Vector2<f64> {
        match &self.frame {
            Frame::Point { xi, form } => {
                let z = Vector2::new(x[0] - xi[0], x[1] - xi[1]);
                form * z * 2.0
            }
            Frame::BoundaryPoint {
                xi,
                tangent,
                normal,
                coef_tangent,
                coef_normal,
                ..
            } => {
                let z = [x[0] - xi[0], x[1] - xi[1]];
                let zt = z[0] * tangent[0] + z[1] * tangent[1];
                let zn = -(z[0] * normal[0] + z[1] * normal[1]);
                let gt = 2.0 * coef_tangent * zt;
                let gn = 2.0 * coef_normal * zn;
                Vector2::new(
                    gt * tangent[0] - gn * normal[0],
                    gt * tangent[1] - gn * normal[1],
                )
            }
            Frame::Cycle { .. } | Frame::WallCycle { .. } => {
                let h = 1e-6;
                let dx = self.eval_parts([x[0] + h, x[1]], false)
                    - self.eval_parts([x[0] - h, x[1]], false);
                let dy = self.eval_parts([x[0], x[1] + h], false)
                    - self.eval_parts([x[0], x[1] - h], false);
                Vector2::new(dx, dy) / (2.0 * h)
            }
        }
    }
}

/// Phase fraction `t/P` of the nearest polyline point and the distance to
/// it. The orbit lattice is uniform in time, so the segment index maps
/// affinely to the phase.
fn project_to_polyline(p: [f64; 2], poly: &[[f64; 2]]) -> (f64, f64) {
    let mut best = (0.0f64, f64::INFINITY);
    let segs = poly.len() - 1;
    for i in 0..segs {
        let a = poly[i];
        let b = poly[i + 1];
        let e = [b[0] - a[0], b[1] - a[1]];
        let w = [p[0] - a[0], p[1] - a[1]];
        let ee = e[0] * e[0] + e[1] * e[1];
        let s = if ee > 0.0 {
            ((w[0] * e[0] + w[1] * e[1]) / ee).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d = ((w[0] - s * e[0]).powi(2) + (w[1] - s * e[1]).powi(2)).sqrt();
        if d < best.1 {
            best = ((i as f64 + s) / segs as f64, d);
        }
    }
    best
}

/// The lower/upper pair around one component.
#[derive(Debug, Clone)]
pub struct TestFunctionPair {
    pub lower: LocalTestFunction,
    pub upper: LocalTestFunction,
    /// Final separation parameter (possibly halved from the request).
    pub delta: f64,
    /// Worst sampled margin of the sign inequalities (non-negative when
    /// they hold strictly).
    pub sign_margin: f64,
}

fn build_pair_at_delta(
    problem: &ProblemInstance,
    component: &AubryComponent,
    delta: f64,
    epsilon: f64,
) -> Result<(LocalTestFunction, LocalTestFunction), TestFnError> {
    let make = |side: Side, frame: Frame| LocalTestFunction {
        side,
        delta,
        epsilon,
        frame,
    };
    match (&component.kind, &component.data) {
        (ComponentKind::InteriorPoint, ComponentData::InteriorPoint { jacobian, .. }) => {
            let xi = component.anchor();
            let a = problem.a_at(xi);
            let b = DMatrix::from_row_slice(
                2,
                2,
                &[
                    jacobian[(0, 0)],
                    jacobian[(0, 1)],
                    jacobian[(1, 0)],
                    jacobian[(1, 1)],
                ],
            );
            let q = DMatrix::from_row_slice(2, 2, &[a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]]);
            let sol = care_maximal(&b, &q)?;
            let fm = |s: f64| {
                Matrix2::new(
                    sol.gamma[(0, 0)] + s * sol.d[(0, 0)],
                    sol.gamma[(0, 1)] + s * sol.d[(0, 1)],
                    sol.gamma[(1, 0)] + s * sol.d[(1, 0)],
                    sol.gamma[(1, 1)] + s * sol.d[(1, 1)],
                )
            };
            Ok((
                make(
                    Side::Lower,
                    Frame::Point {
                        xi,
                        form: fm(-delta),
                    },
                ),
                make(
                    Side::Upper,
                    Frame::Point {
                        xi,
                        form: fm(delta),
                    },
                ),
            ))
        }
        (
            ComponentKind::BoundaryPoint,
            ComponentData::BoundaryPoint {
                theta_tilde,
                tangent,
                normal,
                ..
            },
        ) => {
            let xi = component.anchor();
            let a = problem.a_at(xi);
            let tau = Vector2::new(tangent[0], tangent[1]);
            let q_t = (a * tau).dot(&tau);
            // Scalar maximal solution: the antistable branch of
            // 4 q̃ γ̃² − 2 θ̃ γ̃ = 0.
            let gamma_t = if *theta_tilde > 0.0 {
                theta_tilde / (2.0 * q_t)
            } else {
                0.0
            };
            let closed_loop = 4.0 * q_t * gamma_t - theta_tilde;
            let d_t = 1.0 / closed_loop;
            let bp = |s: f64, side: Side| {
                make(
                    side,
                    Frame::BoundaryPoint {
                        xi,
                        tangent: *tangent,
                        normal: *normal,
                        coef_tangent: gamma_t + s * d_t,
                        coef_normal: s,
                        lin_normal: -s.signum() * epsilon * epsilon,
                    },
                )
            };
            Ok((bp(-delta, Side::Lower), bp(delta, Side::Upper)))
        }
        (ComponentKind::InteriorCycle, _) => {
            let coeffs = transverse_coeffs(problem, component)?;
            let sol = periodic_riccati_maximal(&coeffs)?;
            let (phi_plus, phi_minus, _defect) = sol.phase_corrections(delta);
            let period = sol.period;
            let lattice = |s: f64| -> Vec<f64> {
                sol.gamma
                    .iter()
                    .zip(sol.d.iter())
                    .map(|(g, d)| g[(0, 0)] + s * d[(0, 0)])
                    .collect()
            };
            Ok((
                make(
                    Side::Lower,
                    Frame::Cycle {
                        orbit: component.orbit.clone(),
                        period,
                        form: lattice(-delta),
                        phase: phi_minus,
                        epsilon,
                    },
                ),
                make(
                    Side::Upper,
                    Frame::Cycle {
                        orbit: component.orbit.clone(),
                        period,
                        form: lattice(delta),
                        phase: phi_plus,
                        epsilon,
                    },
                ),
            ))
        }
        (ComponentKind::BoundaryCycle, _) => {
            let wc = |s: f64, side: Side| {
                make(
                    side,
                    Frame::WallCycle {
                        orbit: component.orbit.clone(),
                        coef_normal: s,
                        lin_normal: -s.signum() * epsilon * epsilon,
                    },
                )
            };
            Ok((wc(-delta, Side::Lower), wc(delta, Side::Upper)))
        }
        _ => unreachable!("component kind and data are constructed in lockstep"),
    }
}

/// Worst margin of the sampled sign inequalities for a built pair;
/// non-negative means both inequalities hold at every admissible sample.
fn sampled_sign_margin(
    problem: &ProblemInstance,
    lower: &LocalTestFunction,
    upper: &LocalTestFunction,
    component: &AubryComponent,
    delta: f64,
) -> f64 {
    let mut margin = f64::INFINITY;
    let mut visit = |x: [f64; 2]| {
        if !problem.domain.inside(x) {
            return;
        }
        let rho = lower.chart_distance(x);
        if rho < 1e-3 || rho > SIGN_SAMPLE_RADIUS {
            return;
        }
        let need = 0.5 * delta * rho * rho;
        let h_minus = problem.hamiltonian(lower.gradient_leading(x), x);
        let h_plus = problem.hamiltonian(upper.gradient_leading(x), x);
        margin = margin.min(-need - h_minus + SIGN_SLACK);
        margin = margin.min(h_plus - need + SIGN_SLACK);
    };
    match (&component.kind, &component.data) {
        (ComponentKind::InteriorPoint, _) | (ComponentKind::BoundaryPoint, _) => {
            let xi = component.anchor();
            for fr in [0.3, 0.55, 0.8, 1.0] {
                for i in 0..24 {
                    let ang = crate::geometry::TWO_PI * i as f64 / 24.0;
                    let r = fr * SIGN_SAMPLE_RADIUS;
                    visit([xi[0] + r * ang.cos(), xi[1] + r * ang.sin()]);
                }
            }
        }
        (ComponentKind::InteriorCycle, _) | (ComponentKind::BoundaryCycle, _) => {
            // Tube samples: a spread of along-orbit anchors, offsets on
            // both sides where the domain allows.
            let stride = (component.orbit.len() / 48).max(1);
            for (i, p) in component.orbit.iter().enumerate().step_by(stride) {
                let next = component.orbit[(i + 1) % (component.orbit.len() - 1)];
                let tang = [next[0] - p[0], next[1] - p[1]];
                let norm = (tang[0] * tang[0] + tang[1] * tang[1]).sqrt();
                if norm < 1e-14 {
                    continue;
                }
                let n = [-tang[1] / norm, tang[0] / norm];
                for fr in [-1.0, -0.55, -0.3, 0.3, 0.55, 1.0] {
                    let off = fr * SIGN_SAMPLE_RADIUS;
                    visit([p[0] + off * n[0], p[1] + off * n[1]]);
                }
            }
        }
    }
    margin
}

/// Build the sandwich pair around a component, halving `δ` until the
/// sampled sign inequalities hold.
pub fn build_test_functions(
    problem: &ProblemInstance,
    component: &AubryComponent,
    delta: f64,
    epsilon: f64,
) -> Result<TestFunctionPair, TestFnError> {
    if !(delta > 0.0 && delta <= DELTA_MAX) {
        return Err(TestFnError::DeltaOutOfRange(delta));
    }
    let mut current = delta;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..=MAX_HALVINGS {
        let (lower, upper) = build_pair_at_delta(problem, component, current, epsilon)?;
        let margin = sampled_sign_margin(problem, &lower, &upper, component, current);
        if margin >= 0.0 {
            return Ok(TestFunctionPair {
                lower,
                upper,
                delta: current,
                sign_margin: margin,
            });
        }
        worst = worst.max(margin);
        current *= 0.5;
    }
    Err(TestFnError::SignInequalityFailure {
        delta_final: current * 2.0,
        defect: -worst,
    })
}

/// Outcome of checking a computed distance field against the sandwich on
/// the chart annulus `2h ≤ ρ ≤ 0.1`.
#[derive(Debug, Clone)]
pub struct LocalBoundsReport {
    pub samples: usize,
    pub violations: usize,
    /// min over samples of `W − W⁻ + slack` (≥ 0 when the lower bound holds).
    pub worst_lower_margin: f64,
    /// min over samples of `W⁺ − W + slack` (≥ 0 when the upper bound holds).
    pub worst_upper_margin: f64,
    /// Empirical Lipschitz constant of the field near the component.
    pub lip: f64,
    /// Discretization slack `2 h · lip` added on both sides.
    pub slack: f64,
    pub delta: f64,
}

/// Sample the sandwich `W⁻ − slack ≤ W ≤ W⁺ + slack` around a component,
/// with slack proportional to the grid resolution.
pub fn verify_local_bounds(
    problem: &ProblemInstance,
    grid: &PolarGrid,
    field: &DistanceField,
    component: &AubryComponent,
    delta: f64,
) -> Result<LocalBoundsReport, TestFnError> {
    let pair = build_test_functions(problem, component, delta, 0.0)?;
    let h = grid.h_max();
    let lo = 2.0 * h;
    let hi = SIGN_SAMPLE_RADIUS;
    let xi = component.anchor();
    let mut lip: f64 = 0.0;
    let mut points = Vec::new();
    let n_radii = 8;
    for ir in 0..n_radii {
        let rho = lo + (hi - lo) * ir as f64 / (n_radii - 1) as f64;
        if rho <= 0.0 {
            continue;
        }
        for i in 0..32 {
            let ang = crate::geometry::TWO_PI * i as f64 / 32.0;
            let x = [xi[0] + rho * ang.cos(), xi[1] + rho * ang.sin()];
            if problem.domain.inside(x) {
                points.push(x);
            }
        }
    }
    for x in &points {
        let w0 = field.sample(grid, *x);
        for e in [[h, 0.0], [0.0, h]] {
            let w1 = field.sample(grid, [x[0] + e[0], x[1] + e[1]]);
            lip = lip.max((w1 - w0).abs() / h);
        }
    }
    let slack = 2.0 * h * lip;
    let mut violations = 0;
    let mut worst_lower = f64::INFINITY;
    let mut worst_upper = f64::INFINITY;
    for x in &points {
        let w = field.sample(grid, *x);
        let lo_b = pair.lower.eval(*x);
        let hi_b = pair.upper.eval(*x);
        let ml = w - lo_b + slack;
        let mu = hi_b - w + slack;
        worst_lower = worst_lower.min(ml);
        worst_upper = worst_upper.min(mu);
        if ml < 0.0 || mu < 0.0 {
            violations += 1;
        }
    }
    Ok(LocalBoundsReport {
        samples: points.len(),
        violations,
        worst_lower_margin: worst_lower,
        worst_upper_margin: worst_upper,
        lip,
        slack,
        delta: pair.delta,
    })
}
