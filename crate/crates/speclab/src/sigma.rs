//! Per-component growth rates and the predicted eigenvalue limit.
//!
//! Each invariant component of the drift flow carries a scalar
//!
//! ```text
//!   sigma = (zero-order growth along the component)
//!         - (sum of unstable exponents transverse to / along it),
//! ```
//!
//! concretely: interior rest point `c(xi) - sum_{Re th > 0} Re th`; boundary
//! rest point in the plane `c(xi) - max(theta, 0)` with `theta` the
//! tangential slope of the tangential drift; interior cycle
//! `avg(c) - (1/P) sum_{|Th| > 1} log |Th|` over the Floquet multipliers;
//! boundary cycle `avg(c)` (no transverse directions survive in the plane).
//! The principal eigenvalue converges to the maximum of these numbers as the
//! diffusion vanishes, and when the maximizer is unique it also selects the
//! component that shapes the eigenfunction's logarithmic limit.
//!
//! Two independent cross-checks tie the exponent sums to the Riccati layer:
//! `2 tr(a(xi) G) = sum_{Re th > 0} Re th` at a rest point, and
//! `2 ∫_0^P tr(Qbar Gbar) dt = sum_{|Th| > 1} log |Th|` along a cycle.

use crate::flow::{cycle_average, transverse_coeffs, AubryComponent, ComponentData, ComponentKind};
use crate::problem::ProblemInstance;
use crate::riccati::{care_maximal, periodic_riccati_maximal, RiccatiError};
use nalgebra::DMatrix;

/// Exponents count as unstable when their real part (or `log` multiplier)
/// exceeds this; the hyperbolicity certificates guarantee a far wider
/// separation, so the threshold only guards against certified-zero noise.
pub const POSITIVE_PART_THRESHOLD: f64 = 1e-8;

/// Maximizer-uniqueness gap: ties closer than this are reported as
/// non-unique and the eigenfunction-limit comparison is skipped.
pub const UNIQUENESS_GAP: f64 = 1e-9;

#[derive(Debug, Clone, thiserror::Error)]
pub enum SigmaError {
    #[error("component carries no linearization data: {0}")]
    MissingData(String),
    #[error("empty component list")]
    EmptyComponentList,
    #[error("matrix equation cross-check failed: {0}")]
    Riccati(#[from] RiccatiError),
    #[error("flow data unavailable: {0}")]
    Flow(#[from] crate::flow::FlowError),
}

/// One scoreboard row: the growth rate with its formula breakdown.
#[derive(Debug, Clone)]
pub struct SigmaEntry {
    pub description: String,
    pub kind: ComponentKind,
    pub sigma: f64,
    /// `-` (sum of unstable exponents); zero when the component attracts.
    pub exponent_term: f64,
    /// Zero-order field at / averaged along the component.
    pub growth_term: f64,
}

/// Scoreboard over all components with the predicted limit.
#[derive(Debug, Clone)]
pub struct SigmaReport {
    pub entries: Vec<SigmaEntry>,
    /// `max_k sigma_k`, the predicted small-diffusion eigenvalue limit.
    pub lambda_limit: f64,
    pub argmax: usize,
    /// True iff the runner-up trails by more than [`UNIQUENESS_GAP`].
    pub unique: bool,
    /// Distance from the maximum to the runner-up (0 for a single entry).
    pub runner_up_gap: f64,
}

impl SigmaReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "entries": self.entries.iter().map(|e| serde_json::json!({
                "component": e.description,
                "kind": e.kind.as_str(),
                "sigma": e.sigma,
                "exponent_term": e.exponent_term,
                "growth_term": e.growth_term,
            })).collect::<Vec<_>>(),
            "lambda_limit": self.lambda_limit,
            "argmax": self.argmax,
            "unique": self.unique,
            "runner_up_gap": self.runner_up_gap,
        })
    }
}

/// Growth rate of a single component, with the formula breakdown.
pub fn sigma_entry(
    comp: &AubryComponent,
    problem: &ProblemInstance,
) -> Result<SigmaEntry, SigmaError> {
    let (exponent_term, growth_term) = match (&comp.kind, &comp.data) {
        (ComponentKind::InteriorPoint, ComponentData::InteriorPoint { eigen_re, .. }) => {
            let unstable: f64 = eigen_re
                .iter()
                .filter(|re| **re > POSITIVE_PART_THRESHOLD)
                .sum();
            let [x, y] = comp.orbit[0];
            (-unstable, problem.c_at([x, y]))
        }
        (ComponentKind::BoundaryPoint, ComponentData::BoundaryPoint { theta_tilde, .. }) => {
            let [x, y] = comp.orbit[0];
            (-theta_tilde.max(0.0), problem.c_at([x, y]))
        }
        (ComponentKind::InteriorCycle, ComponentData::InteriorCycle { multiplier, .. }) => {
            let period = comp
                .period
                .ok_or_else(|| SigmaError::MissingData("cycle without period".into()))?;
            let unstable_log = if multiplier.abs() > 1.0 + POSITIVE_PART_THRESHOLD {
                multiplier.abs().ln()
            } else {
                0.0
            };
            (-unstable_log / period, cycle_average(comp, &problem.c))
        }
        (ComponentKind::BoundaryCycle, ComponentData::BoundaryCycle { .. }) => {
            (0.0, cycle_average(comp, &problem.c))
        }
        _ => {
            return Err(SigmaError::MissingData(format!(
                "kind/data mismatch for {}",
                comp.describe()
            )))
        }
    };
    Ok(SigmaEntry {
        description: comp.describe(),
        kind: comp.kind,
        sigma: exponent_term + growth_term,
        exponent_term,
        growth_term,
    })
}

/// Growth rate of a single component.
pub fn sigma_of(comp: &AubryComponent, problem: &ProblemInstance) -> Result<f64, SigmaError> {
    Ok(sigma_entry(comp, problem)?.sigma)
}

/// Scoreboard and predicted limit over a component list.
pub fn predict_limit(
    components: &[AubryComponent],
    problem: &ProblemInstance,
) -> Result<SigmaReport, SigmaError> {
    if components.is_empty() {
        return Err(SigmaError::EmptyComponentList);
    }
    let entries: Vec<SigmaEntry> = components
        .iter()
        .map(|c| sigma_entry(c, problem))
        .collect::<Result<_, _>>()?;
    let argmax = entries
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.sigma.partial_cmp(&b.sigma).expect("finite sigma"))
        .map(|(i, _)| i)
        .expect("nonempty");
    let lambda_limit = entries[argmax].sigma;
    let runner_up_gap = entries
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != argmax)
        .map(|(_, e)| lambda_limit - e.sigma)
        .fold(f64::INFINITY, f64::min);
    let runner_up_gap = if runner_up_gap.is_finite() {
        runner_up_gap
    } else {
        0.0
    };
    let unique = entries.len() == 1 || runner_up_gap > UNIQUENESS_GAP;
    Ok(SigmaReport {
        entries,
        lambda_limit,
        argmax,
        unique,
        runner_up_gap,
    })
}

/// Rest-point cross-check: the exponent sum recomputed through the maximal
/// Riccati solution. Returns `(2 tr(a G), sum of unstable exponents)`; the
/// two agree to 1e-8 for certified data.
pub fn point_trace_identity(
    comp: &AubryComponent,
    problem: &ProblemInstance,
) -> Result<(f64, f64), SigmaError> {
    let ComponentData::InteriorPoint {
        jacobian, eigen_re, ..
    } = &comp.data
    else {
        return Err(SigmaError::MissingData(
            "trace identity needs an interior rest point".into(),
        ));
    };
    let [x, y] = comp.orbit[0];
    let a = problem.a_at([x, y]);
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
    let lhs = 2.0 * (&q * &sol.gamma).trace();
    let rhs: f64 = eigen_re
        .iter()
        .filter(|re| **re > POSITIVE_PART_THRESHOLD)
        .sum();
    Ok((lhs, rhs))
}

/// Cycle cross-check: `2 ∫_0^P tr(Qbar Gbar) dt` against the unstable
/// log-multiplier sum. The two agree to 1e-4 for certified data.
pub fn cycle_trace_identity(
    comp: &AubryComponent,
    problem: &ProblemInstance,
) -> Result<(f64, f64), SigmaError> {
    let ComponentData::InteriorCycle { multiplier, .. } = &comp.data else {
        return Err(SigmaError::MissingData(
            "trace identity needs an interior cycle".into(),
        ));
    };
    let coeffs = transverse_coeffs(problem, comp)?;
    let sol = periodic_riccati_maximal(&coeffs)?;
    let lhs = sol.trace_integral();
    let rhs = if multiplier.abs() > 1.0 + POSITIVE_PART_THRESHOLD {
        multiplier.abs().ln()
    } else {
        0.0
    };
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{boundary_components, find_all_components, find_interior_fixed_points};
    use crate::problem::catalog;

    #[test]
    fn attractor_keeps_its_growth_value() {
        let p = catalog("P1_attractor").unwrap();
        let pts = find_interior_fixed_points(&p).unwrap();
        let s = sigma_of(&pts[0], &p).unwrap();
        assert!((s - 2.0).abs() < 1e-10, "sigma {s}");
    }

    #[test]
    fn spiral_source_beats_its_wall_cycle() {
        let p = catalog("P2_spiral_source").unwrap();
        let set = find_all_components(&p, &[]).unwrap();
        let report = predict_limit(&set.components, &p).unwrap();
        assert!((report.lambda_limit - 2.0).abs() < 1e-9);
        assert!(report.unique);
        let expected_gap = 2.0 - 4.0 * (-1.0f64).exp();
        assert!(
            (report.runner_up_gap - expected_gap).abs() < 1e-9,
            "gap {}",
            report.runner_up_gap
        );
        assert_eq!(report.entries[report.argmax].kind, ComponentKind::InteriorPoint);
    }

    #[test]
    fn drift_problem_has_unit_limit() {
        let p = catalog("P3_drift").unwrap();
        let scan = boundary_components(&p).unwrap();
        let report = predict_limit(&scan.components, &p).unwrap();
        assert!((report.lambda_limit - 1.0).abs() < 1e-8);
        // theta < 0 at the pinned point: no exponent penalty.
        assert_eq!(report.entries[report.argmax].exponent_term, 0.0);
    }

    #[test]
    fn constant_drift_boundary_point_value() {
        let p = catalog("P0_constant").unwrap();
        let scan = boundary_components(&p).unwrap();
        let s = sigma_of(&scan.components[0], &p).unwrap();
        assert!((s - 3.0).abs() < 1e-9, "sigma {s}");
    }

    #[test]
    fn hopf_problem_prefers_the_source_over_the_cycle() {
        let p = catalog("P4_hopf_cycle").unwrap();
        let set = find_all_components(&p, &[]).unwrap();
        let report = predict_limit(&set.components, &p).unwrap();
        assert!((report.lambda_limit - 2.0).abs() < 1e-9);
        assert_eq!(
            report.entries[report.argmax].kind,
            ComponentKind::InteriorPoint
        );
        // Attracting cycle: no exponent penalty, sigma = mean growth 4/e.
        let cyc = report
            .entries
            .iter()
            .find(|e| e.kind == ComponentKind::InteriorCycle)
            .expect("cycle entry");
        assert!((cyc.sigma - 4.0 * (-1.0f64).exp()).abs() < 1e-7);
        assert!((report.runner_up_gap - (2.0 - 4.0 * (-1.0f64).exp())).abs() < 1e-7);
    }

    #[test]
    fn reversed_hopf_ties_and_reports_non_unique() {
        let p = catalog("P4r_reversed_hopf").unwrap();
        let set = find_all_components(&p, &[]).unwrap();
        let report = predict_limit(&set.components, &p).unwrap();
        // Stable origin (c = 0) and the wall cycle (avg c = 0) tie at zero;
        // the repelling interior cycle pays 4pi/2pi = 2.
        assert!((report.lambda_limit - 0.0).abs() < 1e-8);
        assert!(!report.unique, "tie must be flagged");
        let interior_cycle = report
            .entries
            .iter()
            .find(|e| e.kind == ComponentKind::InteriorCycle)
            .expect("cycle entry");
        assert!(
            (interior_cycle.sigma + 2.0).abs() < 1e-6,
            "sigma {}",
            interior_cycle.sigma
        );
    }

    #[test]
    fn scaling_shift_moves_every_sigma_by_kappa() {
        let p = catalog("P4_hopf_cycle").unwrap();
        let set = find_all_components(&p, &[]).unwrap();
        let base = predict_limit(&set.components, &p).unwrap();
        let kappa = 0.73;
        let shifted_problem = p.with_c(p.c.add_constant(kappa));
        let shifted = predict_limit(&set.components, &shifted_problem).unwrap();
        for (b, s) in base.entries.iter().zip(shifted.entries.iter()) {
            assert!(((s.sigma - b.sigma) - kappa).abs() < 1e-10);
        }
        assert!(((shifted.lambda_limit - base.lambda_limit) - kappa).abs() < 1e-10);
    }

    #[test]
    fn point_identity_between_spectrum_and_matrix_solution() {
        let p = catalog("P2_spiral_source").unwrap();
        let pts = find_interior_fixed_points(&p).unwrap();
        let (lhs, rhs) = point_trace_identity(&pts[0], &p).unwrap();
        assert!((lhs - rhs).abs() < 1e-8, "lhs {lhs} rhs {rhs}");
        assert!((rhs - 2.0).abs() < 1e-9);
    }
}
