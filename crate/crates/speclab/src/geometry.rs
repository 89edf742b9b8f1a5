//! Planar domains: disks, annuli, and star-shaped regions `r < R(phi)`.
//!
//! Every boundary loop carries a counterclockwise-with-domain-on-the-left
//! arclength parametrization `gamma(s)`, so the external unit normal is
//! always `nu = -J t` where `t = gamma'(s)` and `J` is the quarter turn
//! `J(v1, v2) = (-v2, v1)`. For an annulus the inner circle is traversed
//! clockwise, which makes its external normal point into the hole.

use crate::expr::FieldExpr;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Resolution of the cumulative-arclength table for star boundaries.
const ARCLENGTH_SAMPLES: usize = 8192;

#[derive(Debug, Clone, thiserror::Error)]
pub enum GeometryError {
    #[error("boundary radius must stay positive; R({phi:.6}) = {value:.6e}")]
    NonPositiveRadius { phi: f64, value: f64 },
    #[error("invalid annulus radii: inner {inner}, outer {outer}")]
    InvalidAnnulus { inner: f64, outer: f64 },
    #[error("invalid disk radius {0}")]
    InvalidDisk(f64),
}

#[derive(Debug, Clone)]
pub enum DomainKind {
    Disk { radius: f64 },
    Annulus { r_inner: f64, r_outer: f64 },
    Star { radius: FieldExpr },
}

/// Quarter turn: `J (v1, v2) = (-v2, v1)`.
pub fn quarter_turn(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopSide {
    Outer,
    Inner,
}

#[derive(Debug, Clone)]
enum Radius {
    Const(f64),
    Expr(FieldExpr),
}

impl Radius {
    fn at(&self, phi: f64) -> f64 {
        match self {
            Radius::Const(r) => *r,
            Radius::Expr(e) => e.eval(&[phi]),
        }
    }

    /// `(R, R', R'')` at `phi`; derivatives by central differences for
    /// expression radii, exactly zero for constants.
    fn derivs(&self, phi: f64) -> (f64, f64, f64) {
        match self {
            Radius::Const(r) => (*r, 0.0, 0.0),
            Radius::Expr(e) => {
                let h = 1e-4;
                let rm = e.eval(&[phi - h]);
                let r0 = e.eval(&[phi]);
                let rp = e.eval(&[phi + h]);
                ((r0), (rp - rm) / (2.0 * h), (rp - 2.0 * r0 + rm) / (h * h))
            }
        }
    }
}

/// One closed boundary curve with an arclength parametrization.
#[derive(Debug, Clone)]
pub struct BoundaryLoop {
    side: LoopSide,
    radius: Radius,
    /// Cumulative arclength at `phi_k = k * 2pi / ARCLENGTH_SAMPLES`
    /// (outer loops; inner loops are always circles and use closed forms).
    s_table: Vec<f64>,
    length: f64,
}

impl BoundaryLoop {
    fn circle(radius: f64, side: LoopSide) -> BoundaryLoop {
        BoundaryLoop {
            side,
            radius: Radius::Const(radius),
            s_table: Vec::new(),
            length: TWO_PI * radius,
        }
    }

    fn star(radius: FieldExpr) -> Result<BoundaryLoop, GeometryError> {
        let expr = Radius::Expr(radius);
        let n = ARCLENGTH_SAMPLES;
        let h = TWO_PI / n as f64;
        // Speed |d gamma / d phi| = sqrt(R^2 + R'^2).
        let speed = |phi: f64| {
            let (r, rp, _) = expr.derivs(phi);
            (r * r + rp * rp).sqrt()
        };
        // Cumulative arclength by per-interval 4-point Gauss-Legendre.
        const GL_X: [f64; 4] = [
            -0.861_136_311_594_052_6,
            -0.339_981_043_584_856_3,
            0.339_981_043_584_856_3,
            0.861_136_311_594_052_6,
        ];
        const GL_W: [f64; 4] = [
            0.347_854_845_137_453_85,
            0.652_145_154_862_546_2,
            0.652_145_154_862_546_2,
            0.347_854_845_137_453_85,
        ];
        let mut s_table = Vec::with_capacity(n + 1);
        s_table.push(0.0);
        let mut acc = 0.0;
        for k in 0..n {
            let a = k as f64 * h;
            let mid = a + 0.5 * h;
            let mut inc = 0.0;
            for (x, w) in GL_X.iter().zip(GL_W.iter()) {
                inc += w * speed(mid + 0.5 * h * x);
            }
            acc += inc * 0.5 * h;
            s_table.push(acc);
        }
        for k in 0..n {
            let phi = k as f64 * h;
            let r = expr.at(phi);
            if !(r.is_finite() && r > 1e-9) {
                return Err(GeometryError::NonPositiveRadius { phi, value: r });
            }
        }
        Ok(BoundaryLoop {
            side: LoopSide::Outer,
            radius: expr,
            length: acc,
            s_table,
        })
    }

    pub fn side(&self) -> LoopSide {
        self.side
    }

    /// Total arclength of the loop.
    pub fn length(&self) -> f64 {
        self.length
    }

    /// Polar angle of the point at arclength `s` (the parametrization runs
    /// clockwise on inner loops so the domain stays on the left).
    pub fn phi_of_s(&self, s: f64) -> f64 {
        let s = s.rem_euclid(self.length);
        match (&self.radius, self.side) {
            (Radius::Const(r), LoopSide::Outer) => s / r,
            (Radius::Const(r), LoopSide::Inner) => -s / r,
            (Radius::Expr(_), _) => {
                // Table bracket, then Newton on s(phi) - s with the exact
                // integrand as derivative.
                let n = self.s_table.len() - 1;
                let idx = match self
                    .s_table
                    .binary_search_by(|probe| probe.partial_cmp(&s).expect("finite"))
                {
                    Ok(i) => i,
                    Err(i) => i.saturating_sub(1),
                }
                .min(n - 1);
                let h = TWO_PI / n as f64;
                let s0 = self.s_table[idx];
                let s1 = self.s_table[idx + 1];
                let mut phi = (idx as f64 + (s - s0) / (s1 - s0).max(1e-300)) * h;
                for _ in 0..4 {
                    let err = self.s_of_phi(phi) - s;
                    let (r, rp, _) = self.radius.derivs(phi);
                    let g = (r * r + rp * rp).sqrt();
                    phi -= err / g;
                }
                phi
            }
        }
    }

    /// Cumulative arclength from `phi = 0` (outer star loops only need this;
    /// circles use closed forms).
    pub fn s_of_phi(&self, phi: f64) -> f64 {
        match (&self.radius, self.side) {
            (Radius::Const(r), LoopSide::Outer) => phi.rem_euclid(TWO_PI) * r,
            (Radius::Const(r), LoopSide::Inner) => (-phi).rem_euclid(TWO_PI) * r,
            (Radius::Expr(_), _) => {
                let phi = phi.rem_euclid(TWO_PI);
                let n = self.s_table.len() - 1;
                let h = TWO_PI / n as f64;
                let idx = ((phi / h) as usize).min(n - 1);
                // Linear correction with the local speed; the table step is
                // ~8e-4 so this is accurate to ~1e-10 for smooth radii.
                let (r, rp, _) = self.radius.derivs(phi);
                let g = (r * r + rp * rp).sqrt();
                self.s_table[idx] + (phi - idx as f64 * h) * g
            }
        }
    }

    /// Point at arclength `s`.
    pub fn gamma(&self, s: f64) -> [f64; 2] {
        let phi = self.phi_of_s(s);
        let r = self.radius.at(phi);
        [r * phi.cos(), r * phi.sin()]
    }

    /// Unit tangent `gamma'(s)`.
    pub fn tangent(&self, s: f64) -> [f64; 2] {
        let phi = self.phi_of_s(s);
        let (r, rp, _) = self.radius.derivs(phi);
        let e = [phi.cos(), phi.sin()];
        let ephi = [-phi.sin(), phi.cos()];
        let g = (r * r + rp * rp).sqrt();
        let sign = match self.side {
            LoopSide::Outer => 1.0,
            LoopSide::Inner => -1.0,
        };
        [
            sign * (rp * e[0] + r * ephi[0]) / g,
            sign * (rp * e[1] + r * ephi[1]) / g,
        ]
    }

    /// External unit normal (`-J t`, pointing out of the domain).
    pub fn nu(&self, s: f64) -> [f64; 2] {
        let t = self.tangent(s);
        let jt = quarter_turn(t);
        [-jt[0], -jt[1]]
    }

    /// Arclength of the boundary point nearest to `x` (Newton on the
    /// stationarity of |x - gamma|^2, seeded from the polar angle of `x`).
    pub fn nearest(&self, x: [f64; 2]) -> f64 {
        let phi0 = x[1].atan2(x[0]).rem_euclid(TWO_PI);
        let mut s = self.s_of_phi(phi0);
        if matches!(self.radius, Radius::Const(_)) {
            return s;
        }
        for _ in 0..6 {
            let g = self.gamma(s);
            let t = self.tangent(s);
            let d = [x[0] - g[0], x[1] - g[1]];
            // d/ds |x-gamma|^2 = -2 (x-gamma).t ; second derivative ~ 2.
            let f = d[0] * t[0] + d[1] * t[1];
            s += f;
        }
        s.rem_euclid(self.length)
    }
}

/// A domain together with parametrized boundary loops.
#[derive(Debug, Clone)]
pub struct DomainGeometry {
    kind: DomainKind,
    outer: BoundaryLoop,
    inner: Option<BoundaryLoop>,
}

impl DomainGeometry {
    pub fn new(kind: DomainKind) -> Result<DomainGeometry, GeometryError> {
        match &kind {
            DomainKind::Disk { radius } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(GeometryError::InvalidDisk(*radius));
                }
                Ok(DomainGeometry {
                    outer: BoundaryLoop::circle(*radius, LoopSide::Outer),
                    inner: None,
                    kind,
                })
            }
            DomainKind::Annulus { r_inner, r_outer } => {
                if !(r_inner.is_finite() && r_outer.is_finite() && 0.0 < *r_inner && r_inner < r_outer) {
                    return Err(GeometryError::InvalidAnnulus {
                        inner: *r_inner,
                        outer: *r_outer,
                    });
                }
                Ok(DomainGeometry {
                    outer: BoundaryLoop::circle(*r_outer, LoopSide::Outer),
                    inner: Some(BoundaryLoop::circle(*r_inner, LoopSide::Inner)),
                    kind,
                })
            }
            DomainKind::Star { radius } => Ok(DomainGeometry {
                outer: BoundaryLoop::star(radius.clone())?,
                inner: None,
                kind,
            }),
        }
    }

    pub fn kind(&self) -> &DomainKind {
        &self.kind
    }

    pub fn outer(&self) -> &BoundaryLoop {
        &self.outer
    }

    pub fn inner(&self) -> Option<&BoundaryLoop> {
        self.inner.as_ref()
    }

    pub fn loops(&self) -> impl Iterator<Item = &BoundaryLoop> {
        std::iter::once(&self.outer).chain(self.inner.as_ref())
    }

    /// Outer radius at polar angle `phi`.
    pub fn radius_outer(&self, phi: f64) -> f64 {
        match &self.kind {
            DomainKind::Disk { radius } => *radius,
            DomainKind::Annulus { r_outer, .. } => *r_outer,
            DomainKind::Star { .. } => self.outer.radius.at(phi),
        }
    }

    /// `(R, R', R'')` of the outer radius at `phi`.
    pub fn radius_outer_derivs(&self, phi: f64) -> (f64, f64, f64) {
        self.outer.radius.derivs(phi)
    }

    /// Radial chart bounds at angle `phi`: nodes live at
    /// `r = r0(phi) + rho * (r1(phi) - r0(phi))`, `rho` in (0, 1).
    pub fn radial_bounds(&self, phi: f64) -> (f64, f64) {
        match &self.kind {
            DomainKind::Disk { radius } => (0.0, *radius),
            DomainKind::Annulus { r_inner, r_outer } => (*r_inner, *r_outer),
            DomainKind::Star { .. } => (0.0, self.outer.radius.at(phi)),
        }
    }

    pub fn has_pole(&self) -> bool {
        self.inner.is_none()
    }

    /// Membership in the closed domain.
    pub fn inside(&self, x: [f64; 2]) -> bool {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        let phi = x[1].atan2(x[0]);
        let (r0, r1) = self.radial_bounds(phi);
        r >= r0 - 1e-12 && r <= r1 + 1e-12
    }

    /// Half-width of a box centered at the origin containing the domain.
    pub fn bounding_radius(&self) -> f64 {
        match &self.kind {
            DomainKind::Disk { radius } => *radius,
            DomainKind::Annulus { r_outer, .. } => *r_outer,
            DomainKind::Star { .. } => {
                let mut rmax: f64 = 0.0;
                for k in 0..512 {
                    rmax = rmax.max(self.outer.radius.at(k as f64 * TWO_PI / 512.0));
                }
                rmax
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_with_vars;

    fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
        a[0] * b[0] + a[1] * b[1]
    }

    fn norm(a: [f64; 2]) -> f64 {
        dot(a, a).sqrt()
    }

    #[test]
    fn unit_disk_boundary_frame() {
        let g = DomainGeometry::new(DomainKind::Disk { radius: 1.0 }).unwrap();
        let b = g.outer();
        assert!((b.length() - TWO_PI).abs() < 1e-12);
        for k in 0..64 {
            let s = b.length() * k as f64 / 64.0;
            let p = b.gamma(s);
            let t = b.tangent(s);
            let nu = b.nu(s);
            assert!((norm(t) - 1.0).abs() <= 1e-12);
            assert!((norm(nu) - 1.0).abs() <= 1e-12);
            assert!(dot(t, nu).abs() <= 1e-12);
            // External normal of a disk is radial.
            assert!((nu[0] - p[0]).abs() <= 1e-12 && (nu[1] - p[1]).abs() <= 1e-12);
        }
        let c0 = b.gamma(0.0);
        let c1 = b.gamma(b.length());
        assert!((c0[0] - c1[0]).abs() <= 1e-10 && (c0[1] - c1[1]).abs() <= 1e-10);
    }

    #[test]
    fn annulus_inner_normal_points_into_hole() {
        let g = DomainGeometry::new(DomainKind::Annulus {
            r_inner: 0.5,
            r_outer: 2.0,
        })
        .unwrap();
        let inner = g.inner().unwrap();
        assert!((inner.length() - TWO_PI * 0.5).abs() < 1e-12);
        for k in 0..16 {
            let s = inner.length() * k as f64 / 16.0;
            let p = inner.gamma(s);
            let nu = inner.nu(s);
            // Pointing toward the origin, i.e. out of the annulus.
            assert!(dot(nu, p) < 0.0, "nu {nu:?} at {p:?}");
            assert!((norm(nu) - 1.0).abs() <= 1e-12);
        }
        assert!(g.inside([1.0, 0.0]));
        assert!(!g.inside([0.2, 0.0]));
        assert!(!g.inside([2.2, 0.0]));
    }

    #[test]
    fn star_boundary_closure_and_frame() {
        let radius = parse_with_vars("1 + 0.2*cos(3*phi)", &["phi"]).unwrap();
        let g = DomainGeometry::new(DomainKind::Star { radius }).unwrap();
        let b = g.outer();
        let c0 = b.gamma(0.0);
        let c1 = b.gamma(b.length());
        assert!(
            (c0[0] - c1[0]).abs() <= 1e-10 && (c0[1] - c1[1]).abs() <= 1e-10,
            "closure gap {:?} vs {:?}",
            c0,
            c1
        );
        for k in 0..128 {
            let s = b.length() * k as f64 / 128.0;
            let t = b.tangent(s);
            let nu = b.nu(s);
            assert!((norm(t) - 1.0).abs() <= 1e-9);
            assert!((norm(nu) - 1.0).abs() <= 1e-9);
            assert!(dot(t, nu).abs() <= 1e-9);
        }
        // Arclength inverse round trip.
        for k in 1..32 {
            let s = b.length() * k as f64 / 32.0;
            let phi = b.phi_of_s(s);
            assert!((b.s_of_phi(phi) - s).abs() <= 1e-8, "s round trip at {s}");
        }
        // nearest() recovers boundary points.
        let s_q = 1.234;
        let q = b.gamma(s_q);
        let s_n = b.nearest([q[0] * 1.05, q[1] * 1.05]);
        let p = b.gamma(s_n);
        let qdir = [q[0] * 1.05 - p[0], q[1] * 1.05 - p[1]];
        // Offset from the nearest point is parallel to the normal there.
        let t = b.tangent(s_n);
        assert!(dot(qdir, t).abs() <= 1e-6, "tangential residual {}", dot(qdir, t));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(DomainGeometry::new(DomainKind::Disk { radius: 0.0 }).is_err());
        assert!(DomainGeometry::new(DomainKind::Annulus {
            r_inner: 1.0,
            r_outer: 0.5
        })
        .is_err());
        let radius = parse_with_vars("cos(phi)", &["phi"]).unwrap(); // vanishes
        assert!(DomainGeometry::new(DomainKind::Star { radius }).is_err());
    }
}
