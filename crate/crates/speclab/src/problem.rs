//! Problem instances: a domain plus the coefficient fields of the operator
//!
//! ```text
//!   L_eps u = eps * a_ij d^2u/dx_i dx_j + b_i du/dx_i + c u
//! ```
//!
//! with the no-flux condition on the boundary, together with the convex
//! duality pair used by the small-diffusion analysis:
//!
//! ```text
//!   H(p, x) = a_ij p_i p_j - b_i p_i,
//!   L(v, x) = 1/4 (v + b)^T a^{-1} (v + b).
//! ```

use nalgebra::{Matrix2, Vector2};
use serde::Deserialize;

use crate::expr::{parse_field, parse_with_vars, FieldExpr, ParseError};
use crate::geometry::{DomainGeometry, DomainKind, GeometryError};

#[derive(Debug, thiserror::Error)]
pub enum ProblemError {
    #[error("field `{field}`: {source}")]
    Parse {
        field: &'static str,
        source: ParseError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("diffusion matrix not uniformly elliptic at ({x:.4}, {y:.4}): eigenvalues {lo:.3e}, {hi:.3e}")]
    NotElliptic { x: f64, y: f64, lo: f64, hi: f64 },
    #[error("field `{field}` is not finite at ({x:.4}, {y:.4})")]
    NonFinite { field: &'static str, x: f64, y: f64 },
    #[error("unknown catalog problem `{0}`")]
    UnknownProblem(String),
    #[error("problem file: {0}")]
    Schema(String),
}

/// Bounds accepted for the eigenvalues of `a(x)` during validation.
const ELLIPTICITY_MIN: f64 = 1e-8;
const ELLIPTICITY_MAX: f64 = 1e8;

#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub domain: DomainGeometry,
    /// Upper-triangle entries `a11, a12, a22` of the symmetric diffusion.
    pub a: [FieldExpr; 3],
    pub b: [FieldExpr; 2],
    pub c: FieldExpr,
}

impl ProblemInstance {
    pub fn new(
        name: impl Into<String>,
        domain: DomainGeometry,
        a: [FieldExpr; 3],
        b: [FieldExpr; 2],
        c: FieldExpr,
    ) -> Result<ProblemInstance, ProblemError> {
        let p = ProblemInstance {
            name: name.into(),
            domain,
            a,
            b,
            c,
        };
        p.validate()?;
        Ok(p)
    }

    /// Same problem with the zero-order field replaced (used by the
    /// shift-invariance checks).
    pub fn with_c(&self, c: FieldExpr) -> ProblemInstance {
        ProblemInstance {
            name: self.name.clone(),
            domain: self.domain.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
            c,
        }
    }

    /// Samples every field on a polar lattice over the closed domain and
    /// rejects non-finite values and non-elliptic diffusion.
    pub fn validate(&self) -> Result<(), ProblemError> {
        let n_phi = 64;
        let n_r = 16;
        for k in 0..n_phi {
            let phi = k as f64 * crate::geometry::TWO_PI / n_phi as f64;
            let (r0, r1) = self.domain.radial_bounds(phi);
            for j in 0..=n_r {
                let r = r0 + (r1 - r0) * j as f64 / n_r as f64;
                let (x, y) = (r * phi.cos(), r * phi.sin());
                for (field, e) in [
                    ("a11", &self.a[0]),
                    ("a12", &self.a[1]),
                    ("a22", &self.a[2]),
                    ("b1", &self.b[0]),
                    ("b2", &self.b[1]),
                    ("c", &self.c),
                ] {
                    if !e.eval2(x, y).is_finite() {
                        return Err(ProblemError::NonFinite { field, x, y });
                    }
                }
                let a = self.a_at([x, y]);
                // Symmetric 2x2 spectrum in closed form.
                let tr = a[(0, 0)] + a[(1, 1)];
                let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                let (lo, hi) = (tr / 2.0 - disc, tr / 2.0 + disc);
                if !(lo >= ELLIPTICITY_MIN && hi <= ELLIPTICITY_MAX) {
                    return Err(ProblemError::NotElliptic { x, y, lo, hi });
                }
            }
        }
        Ok(())
    }

    pub fn a_at(&self, x: [f64; 2]) -> Matrix2<f64> {
        let a11 = self.a[0].eval2(x[0], x[1]);
        let a12 = self.a[1].eval2(x[0], x[1]);
        let a22 = self.a[2].eval2(x[0], x[1]);
        Matrix2::new(a11, a12, a12, a22)
    }

    pub fn a_inv_at(&self, x: [f64; 2]) -> Matrix2<f64> {
        let a = self.a_at(x);
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        Matrix2::new(a[(1, 1)], -a[(0, 1)], -a[(1, 0)], a[(0, 0)]) / det
    }

    pub fn b_at(&self, x: [f64; 2]) -> Vector2<f64> {
        Vector2::new(self.b[0].eval2(x[0], x[1]), self.b[1].eval2(x[0], x[1]))
    }

    pub fn c_at(&self, x: [f64; 2]) -> f64 {
        self.c.eval2(x[0], x[1])
    }

    /// Jacobian `(Db)_{ij} = db_i/dx_j` by central differences.
    pub fn b_jacobian(&self, x: [f64; 2]) -> Matrix2<f64> {
        let g0 = self.b[0].eval_grad(&x);
        let g1 = self.b[1].eval_grad(&x);
        Matrix2::new(g0[0], g0[1], g1[0], g1[1])
    }

    pub fn div_b(&self, x: [f64; 2]) -> f64 {
        let j = self.b_jacobian(x);
        j[(0, 0)] + j[(1, 1)]
    }

    /// `H(p, x) = a_ij p_i p_j - b_i p_i`.
    pub fn hamiltonian(&self, p: Vector2<f64>, x: [f64; 2]) -> f64 {
        let a = self.a_at(x);
        let b = self.b_at(x);
        (a * p).dot(&p) - b.dot(&p)
    }

    /// `L(v, x) = 1/4 (v + b)^T a^{-1} (v + b)`.
    pub fn lagrangian(&self, v: Vector2<f64>, x: [f64; 2]) -> f64 {
        let ainv = self.a_inv_at(x);
        let b = self.b_at(x);
        let w = v + b;
        0.25 * (ainv * w).dot(&w)
    }
}

/// Names of the built-in instances, in catalog order.
pub fn catalog_names() -> &'static [&'static str] {
    &[
        "P0_constant",
        "P1_attractor",
        "P2_spiral_source",
        "P3_drift",
        "P4_hopf_cycle",
        "P4r_reversed_hopf",
    ]
}

/// Builds a catalog instance by name.
pub fn catalog(name: &str) -> Result<ProblemInstance, ProblemError> {
    let parse = |field: &'static str, src: &str| -> Result<FieldExpr, ProblemError> {
        parse_field(src).map_err(|source| ProblemError::Parse { field, source })
    };
    let identity_a = |parse: &dyn Fn(&'static str, &str) -> Result<FieldExpr, ProblemError>| {
        Ok::<_, ProblemError>([parse("a11", "1")?, parse("a12", "0")?, parse("a22", "1")?])
    };
    let disk = |r: f64| DomainGeometry::new(DomainKind::Disk { radius: r });
    match name {
        "P0_constant" => ProblemInstance::new(
            name,
            disk(1.0)?,
            identity_a(&parse)?,
            [parse("b1", "1")?, parse("b2", "0")?],
            parse("c", "3")?,
        ),
        "P1_attractor" => ProblemInstance::new(
            name,
            disk(1.0)?,
            identity_a(&parse)?,
            [parse("b1", "-x")?, parse("b2", "-y")?],
            parse("c", "2 - (x^2 + y^2)")?,
        ),
        "P2_spiral_source" => ProblemInstance::new(
            name,
            disk(1.0)?,
            identity_a(&parse)?,
            [parse("b1", "x - y")?, parse("b2", "y + x")?],
            parse("c", "4*exp(-(x^2 + y^2))")?,
        ),
        "P3_drift" => ProblemInstance::new(
            name,
            disk(1.0)?,
            identity_a(&parse)?,
            [parse("b1", "1")?, parse("b2", "0")?],
            parse("c", "x")?,
        ),
        "P4_hopf_cycle" => ProblemInstance::new(
            name,
            disk(2.0)?,
            identity_a(&parse)?,
            [
                parse("b1", "(1 - (x^2 + y^2))*x - y")?,
                parse("b2", "(1 - (x^2 + y^2))*y + x")?,
            ],
            parse("c", "4*exp(-(x^2 + y^2))")?,
        ),
        "P4r_reversed_hopf" => ProblemInstance::new(
            name,
            disk(2.0)?,
            identity_a(&parse)?,
            [
                parse("b1", "-((1 - (x^2 + y^2))*x - y)")?,
                parse("b2", "-((1 - (x^2 + y^2))*y + x)")?,
            ],
            parse("c", "0")?,
        ),
        other => Err(ProblemError::UnknownProblem(other.to_string())),
    }
}

#[derive(Deserialize)]
struct DomainSchema {
    kind: String,
    #[serde(rename = "R")]
    r: serde_json::Value,
    #[serde(rename = "R_inner")]
    r_inner: Option<f64>,
}

#[derive(Deserialize)]
struct ProblemSchema {
    name: String,
    domain: DomainSchema,
    a: [String; 3],
    b: [String; 2],
    c: String,
}

/// Loads a problem from its JSON description:
///
/// ```json
/// {
///   "name": "...",
///   "domain": { "kind": "disk" | "annulus" | "star", "R": 1.0, "R_inner": 0.5 },
///   "a": ["1", "0", "1"],
///   "b": ["-x", "-y"],
///   "c": "2 - (x^2 + y^2)"
/// }
/// ```
///
/// For `"kind": "star"`, `"R"` is an expression in `phi`.
pub fn from_json(text: &str) -> Result<ProblemInstance, ProblemError> {
    let schema: ProblemSchema =
        serde_json::from_str(text).map_err(|e| ProblemError::Schema(e.to_string()))?;
    let kind = match schema.domain.kind.as_str() {
        "disk" => DomainKind::Disk {
            radius: schema
                .domain
                .r
                .as_f64()
                .ok_or_else(|| ProblemError::Schema("disk R must be a number".into()))?,
        },
        "annulus" => DomainKind::Annulus {
            r_inner: schema
                .domain
                .r_inner
                .ok_or_else(|| ProblemError::Schema("annulus requires R_inner".into()))?,
            r_outer: schema
                .domain
                .r
                .as_f64()
                .ok_or_else(|| ProblemError::Schema("annulus R must be a number".into()))?,
        },
        "star" => {
            let src = match &schema.domain.r {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                _ => return Err(ProblemError::Schema("star R must be an expression".into())),
            };
            DomainKind::Star {
                radius: parse_with_vars(&src, &["phi"])
                    .map_err(|source| ProblemError::Parse { field: "R", source })?,
            }
        }
        other => return Err(ProblemError::Schema(format!("unknown domain kind `{other}`"))),
    };
    let parse = |field: &'static str, src: &str| -> Result<FieldExpr, ProblemError> {
        parse_field(src).map_err(|source| ProblemError::Parse { field, source })
    };
    ProblemInstance::new(
        schema.name,
        DomainGeometry::new(kind)?,
        [
            parse("a11", &schema.a[0])?,
            parse("a12", &schema.a[1])?,
            parse("a22", &schema.a[2])?,
        ],
        [parse("b1", &schema.b[0])?, parse("b2", &schema.b[1])?],
        parse("c", &schema.c)?,
    )
}

/// Serializes an instance back to the JSON schema.
pub fn to_json(p: &ProblemInstance) -> serde_json::Value {
    let domain = match p.domain.kind() {
        DomainKind::Disk { radius } => serde_json::json!({ "kind": "disk", "R": radius }),
        DomainKind::Annulus { r_inner, r_outer } => {
            serde_json::json!({ "kind": "annulus", "R": r_outer, "R_inner": r_inner })
        }
        DomainKind::Star { radius } => {
            serde_json::json!({ "kind": "star", "R": radius.source() })
        }
    };
    serde_json::json!({
        "name": p.name,
        "domain": domain,
        "a": [p.a[0].source(), p.a[1].source(), p.a[2].source()],
        "b": [p.b[0].source(), p.b[1].source()],
        "c": p.c.source(),
    })
}
