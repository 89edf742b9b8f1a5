//! Cross-module structural checks: invariants that only show up when the
//! flow classifier, the Riccati layer, the eigensolver, and the control
//! solver are run against each other on the same instances.

mod common;

use common::{random_hyperbolic_pair, seeded_rng};
use nalgebra::{DMatrix, Vector2};
use rand::Rng;
use speclab::distance::{solve_distance, DistanceField, ValueIterationConfig};
use speclab::eigen::{solve_principal, IterationOptions};
use speclab::flow::{find_all_components, AubryComponent, ComponentKind};
use speclab::grid::PolarGrid;
use speclab::problem::{catalog, catalog_names, from_json, ProblemInstance};
use speclab::riccati::{alternative_graph_solutions, care_maximal};
use speclab::sigma::predict_limit;

fn component_of(problem: &ProblemInstance, kind: ComponentKind) -> AubryComponent {
    find_all_components(problem, &[])
        .unwrap()
        .components
        .into_iter()
        .find(|c| c.kind == kind)
        .unwrap_or_else(|| panic!("{}: no {:?} component", problem.name, kind))
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v))
}

/// Travelling exactly with the drift is free, and the zero momentum is
/// always critical: both identities must hold pointwise on every catalog
/// instance, since the control solver's free-ride candidate and the
/// eigensolver's spectral sandwich both lean on them.
#[test]
fn drift_rides_are_free_and_zero_momentum_is_critical() {
    for name in catalog_names() {
        let problem = catalog(name).unwrap();
        let grid = PolarGrid::new(&problem.domain, 32, 32).unwrap();
        for pt in grid.node_points() {
            let b = problem.b_at(pt);
            let free = problem.lagrangian(-b, pt);
            assert!(
                free.abs() <= 1e-15,
                "{name}: free ride at ({}, {}) costs {free:e}",
                pt[0],
                pt[1]
            );
            let critical = problem.hamiltonian(Vector2::zeros(), pt);
            assert!(
                critical.abs() <= 1e-15,
                "{name}: H(0) = {critical:e} at ({}, {})",
                pt[0],
                pt[1]
            );
        }
    }
}

/// The component inventory must be a pure function of the instance: two
/// scans of the same problem return identical descriptions, so reports and
/// config hashes stay reproducible.
#[test]
fn component_inventory_is_deterministic() {
    for name in ["P2_spiral_source", "P4_hopf_cycle"] {
        let problem = catalog(name).unwrap();
        let first: Vec<String> = find_all_components(&problem, &[])
            .unwrap()
            .components
            .iter()
            .map(|c| c.describe())
            .collect();
        let second: Vec<String> = find_all_components(&problem, &[])
            .unwrap()
            .components
            .iter()
            .map(|c| c.describe())
            .collect();
        assert!(!first.is_empty(), "{name}: empty inventory");
        assert_eq!(first, second, "{name}: inventory changed between scans");
    }
}

/// The selected quadratic-form solution dominates every other graph
/// selection of the same Hamiltonian matrix, across a seeded family of
/// random hyperbolic drift/diffusion pairs in dimensions two and three.
#[test]
fn maximal_solution_dominates_alternative_graph_selections() {
    let mut rng = seeded_rng(2201);
    let mut alternatives_seen = 0usize;
    for trial in 0..100 {
        let n = 2 + trial % 2;
        let (b, q) = random_hyperbolic_pair(&mut rng, n);
        let solution = care_maximal(&b, &q).unwrap();
        for alt in alternative_graph_solutions(&b, &q).unwrap() {
            let gap = min_symmetric_eigenvalue(&(&solution.gamma - &alt));
            assert!(
                gap >= -1e-9,
                "trial {trial} (n = {n}): alternative exceeds the maximal \
                 solution by {:e}",
                -gap
            );
            alternatives_seen += 1;
        }
    }
    assert!(
        alternatives_seen >= 50,
        "only {alternatives_seen} alternative selections generated; \
         the domination check was nearly vacuous"
    );
}

/// Adding a constant to the reaction coefficient shifts the eigenvalue and
/// the predicted limit by exactly that constant: the discrete operator
/// gains `kappa I` and every growth-rate formula is affine in `c`.
#[test]
fn constant_reaction_offset_shifts_eigenvalue_exactly() {
    let base = catalog("P1_attractor").unwrap();
    let shifted = from_json(
        r#"{
            "name": "P1_attractor_shifted",
            "domain": { "kind": "disk", "R": 1.0 },
            "a": ["1", "0", "1"],
            "b": ["-x", "-y"],
            "c": "2 - (x^2 + y^2) + 0.7"
        }"#,
    )
    .unwrap();

    let grid = PolarGrid::new(&base.domain, 32, 32).unwrap();
    let opts = IterationOptions {
        max_iterations: 500,
        ..IterationOptions::default()
    };
    let lam_base = solve_principal(&base, 0.05, &grid, &opts).unwrap().lambda;
    let lam_shift = solve_principal(&shifted, 0.05, &grid, &opts).unwrap().lambda;
    assert!(
        (lam_shift - lam_base - 0.7).abs() <= 1e-9,
        "discrete eigenvalue shift {} instead of 0.7",
        lam_shift - lam_base
    );

    let comps_base = find_all_components(&base, &[]).unwrap().components;
    let comps_shift = find_all_components(&shifted, &[]).unwrap().components;
    let limit_base = predict_limit(&comps_base, &base).unwrap().lambda_limit;
    let limit_shift = predict_limit(&comps_shift, &shifted).unwrap().lambda_limit;
    assert!(
        (limit_shift - limit_base - 0.7).abs() <= 1e-12,
        "predicted limit shift {} instead of 0.7",
        limit_shift - limit_base
    );
}

/// Refining the mesh at fixed diffusion must barely move the eigenvalue;
/// a large jump would mean the convection scheme is still resolving the
/// boundary layer rather than the continuum problem.
#[test]
fn eigenvalue_is_stable_under_grid_refinement() {
    let opts = IterationOptions {
        max_iterations: 3000,
        ..IterationOptions::default()
    };
    for name in [
        "P1_attractor",
        "P2_spiral_source",
        "P3_drift",
        "P4_hopf_cycle",
    ] {
        let problem = catalog(name).unwrap();
        let coarse = PolarGrid::new(&problem.domain, 128, 128).unwrap();
        let fine = PolarGrid::new(&problem.domain, 256, 256).unwrap();
        let lam_coarse = solve_principal(&problem, 0.01, &coarse, &opts)
            .unwrap()
            .lambda;
        let lam_fine = solve_principal(&problem, 0.01, &fine, &opts)
            .unwrap()
            .lambda;
        assert!(
            (lam_coarse - lam_fine).abs() <= 0.02,
            "{name}: lambda moved {} between 128^2 and 256^2",
            (lam_coarse - lam_fine).abs()
        );
    }
}

/// Every point of the disk reaches an attracting cycle by riding the drift,
/// so the distance to such a target vanishes up to discretization noise.
#[test]
fn attracting_cycles_are_reached_for_free() {
    let cases = [
        ("P4_hopf_cycle", ComponentKind::InteriorCycle),
        ("P2_spiral_source", ComponentKind::BoundaryCycle),
    ];
    for (name, kind) in cases {
        let problem = catalog(name).unwrap();
        let grid = PolarGrid::new(&problem.domain, 64, 64).unwrap();
        let target = component_of(&problem, kind);
        let field = solve_distance(
            &problem,
            &grid,
            &target,
            &ValueIterationConfig::default(),
        )
        .unwrap();
        let max = field.values.iter().fold(0.0f64, |acc, &v| acc.max(v));
        let bound = 5.0 * grid.h_max();
        assert!(
            max <= bound,
            "{name}: distance to the {kind:?} peaks at {max} (> {bound})"
        );
    }
}

/// Sampled triangle inequality: the cost to the target from `x` never
/// exceeds the cost of first steering straight to `y` and continuing from
/// there. Straight-segment actions are evaluated by midpoint quadrature
/// over a ladder of travel times.
#[test]
fn distance_satisfies_the_triangle_inequality() {
    let problem = catalog("P2_spiral_source").unwrap();
    let grid = PolarGrid::new(&problem.domain, 64, 64).unwrap();
    let target = component_of(&problem, ComponentKind::InteriorPoint);
    let config = ValueIterationConfig {
        directions: 32,
        magnitudes: 16,
        ..ValueIterationConfig::default()
    };
    let field = solve_distance(&problem, &grid, &target, &config).unwrap();
    let slack = 5.0 * grid.h_max();

    let mut rng = seeded_rng(7104);
    let sample_point = |rng: &mut rand_chacha::ChaCha8Rng| -> [f64; 2] {
        let r = 0.9 * rng.gen_range(0.0f64..1.0).sqrt();
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        [r * phi.cos(), r * phi.sin()]
    };

    for _ in 0..100 {
        let x = sample_point(&mut rng);
        let y = sample_point(&mut rng);
        let d_x = field.sample(&grid, x);
        let d_y = field.sample(&grid, y);

        let mut best_action = f64::INFINITY;
        for i in 0..16 {
            let t_total = 0.05 * (5.0f64 / 0.05).powf(i as f64 / 15.0);
            let v = Vector2::new(y[0] - x[0], y[1] - x[1]) / t_total;
            let steps = 32;
            let dt = t_total / steps as f64;
            let mut action = 0.0;
            for s in 0..steps {
                let frac = (s as f64 + 0.5) / steps as f64;
                let mid = [
                    x[0] + frac * (y[0] - x[0]),
                    x[1] + frac * (y[1] - x[1]),
                ];
                action += problem.lagrangian(-v, mid) * dt;
            }
            best_action = best_action.min(action);
        }

        assert!(
            d_x <= best_action + d_y + slack,
            "triangle inequality violated: d({x:?}) = {d_x} > {best_action} \
             + {d_y} + {slack}"
        );
    }
}

/// Near a rest-point target the distance opens as the Riccati quadratic
/// form; for the spiral source that form is `|z|^2 / 2`.
#[test]
fn distance_opens_quadratically_at_a_rest_point_target() {
    let problem = catalog("P2_spiral_source").unwrap();
    let grid = PolarGrid::new(&problem.domain, 96, 96).unwrap();
    let target = component_of(&problem, ComponentKind::InteriorPoint);
    let config = ValueIterationConfig {
        directions: 32,
        magnitudes: 16,
        ..ValueIterationConfig::default()
    };
    let field = solve_distance(&problem, &grid, &target, &config).unwrap();

    for (idx, pt) in grid.node_points().into_iter().enumerate() {
        let r2 = pt[0] * pt[0] + pt[1] * pt[1];
        if r2 > 0.25 * 0.25 {
            continue;
        }
        let expected = 0.5 * r2;
        let err = (field.values[idx] - expected).abs();
        let bound = 2.0 * (grid.h_max() + r2 * r2.sqrt());
        assert!(
            err <= bound,
            "at ({}, {}): distance {} vs quadratic {expected}, err {err} > {bound}",
            pt[0],
            pt[1],
            field.values[idx]
        );
    }
}

fn interior_hamiltonian_residual(
    problem: &ProblemInstance,
    grid: &PolarGrid,
    field: &DistanceField,
) -> f64 {
    let fd = 0.08;
    let mut worst = 0.0f64;
    for pt in grid.node_points() {
        let r = (pt[0] * pt[0] + pt[1] * pt[1]).sqrt();
        if !(0.15..=0.8).contains(&r) {
            continue;
        }
        let grad = Vector2::new(
            (field.sample(grid, [pt[0] + fd, pt[1]]) - field.sample(grid, [pt[0] - fd, pt[1]]))
                / (2.0 * fd),
            (field.sample(grid, [pt[0], pt[1] + fd]) - field.sample(grid, [pt[0], pt[1] - fd]))
                / (2.0 * fd),
        );
        worst = worst.max(problem.hamiltonian(grad, pt).abs());
    }
    worst
}

/// The numerical distance should satisfy the stationary equation better as
/// the mesh refines: the interior Hamiltonian residual (measured through a
/// fixed-width difference stencil) must not grow, and must stay small on
/// both meshes.
#[test]
fn hamiltonian_residual_shrinks_under_refinement() {
    let problem = catalog("P2_spiral_source").unwrap();
    let target = component_of(&problem, ComponentKind::InteriorPoint);
    let config = ValueIterationConfig {
        directions: 32,
        magnitudes: 16,
        ..ValueIterationConfig::default()
    };

    let mut residuals = Vec::new();
    for n in [64usize, 128] {
        let grid = PolarGrid::new(&problem.domain, n, n).unwrap();
        let field = solve_distance(&problem, &grid, &target, &config).unwrap();
        residuals.push(interior_hamiltonian_residual(&problem, &grid, &field));
    }
    assert!(
        residuals[0] <= 0.25 && residuals[1] <= 0.25,
        "interior residuals {residuals:?} out of range"
    );
    assert!(
        residuals[1] <= residuals[0] + 0.02,
        "residual grew under refinement: {residuals:?}"
    );
}
