//! Polar-chart grids with cell-centered radial nodes.
//!
//! Each angular ray `phi_k = k * h_phi` carries `N_r` nodes at radii
//! `r_j = rho_lo(phi) + (j + 1/2) * h_r(phi)`, where `h_r(phi)` splits the
//! ray's chord through the domain into equal cells. The half-cell offset
//! keeps every node strictly inside the domain and, for domains containing
//! the origin, avoids placing a node on the coordinate singularity at
//! `r = 0`: the stencil reference "below" the first ring is the first ring
//! of the antipodal ray. Indexing is r-major with the angular index fastest,
//! `idx = j * N_phi + k`, which keeps the discretized operator banded.

use crate::geometry::DomainGeometry;

#[derive(Debug, Clone, thiserror::Error)]
pub enum GridError {
    #[error("grid too coarse: need at least 8 nodes per direction, got {n_r} x {n_phi}")]
    TooCoarse { n_r: usize, n_phi: usize },
    #[error("angular count must be even for the antipodal center closure, got {0}")]
    OddAngularCount(usize),
}

/// Per-ray chart data: the ray enters the domain at `rho_lo` and spans
/// `delta`; the angular derivatives of `delta` feed the chart metric.
#[derive(Debug, Clone, Copy)]
pub struct RayData {
    pub rho_lo: f64,
    pub delta: f64,
    pub delta_p: f64,
    pub delta_pp: f64,
}

#[derive(Debug, Clone)]
pub struct PolarGrid {
    n_r: usize,
    n_phi: usize,
    geometry: DomainGeometry,
    rays: Vec<RayData>,
}

impl PolarGrid {
    pub fn new(geometry: &DomainGeometry, n_r: usize, n_phi: usize) -> Result<Self, GridError> {
        if n_r < 8 || n_phi < 8 {
            return Err(GridError::TooCoarse { n_r, n_phi });
        }
        if n_phi % 2 != 0 {
            return Err(GridError::OddAngularCount(n_phi));
        }
        let h_phi = std::f64::consts::TAU / n_phi as f64;
        let rays = (0..n_phi)
            .map(|k| {
                let phi = k as f64 * h_phi;
                let (lo, _hi) = geometry.radial_bounds(phi);
                let (r, rp, rpp) = geometry.radius_outer_derivs(phi);
                RayData {
                    rho_lo: lo,
                    delta: r - lo,
                    delta_p: rp,
                    delta_pp: rpp,
                }
            })
            .collect();
        Ok(Self {
            n_r,
            n_phi,
            geometry: geometry.clone(),
            rays,
        })
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn n_phi(&self) -> usize {
        self.n_phi
    }

    pub fn len(&self) -> usize {
        self.n_r * self.n_phi
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn geometry(&self) -> &DomainGeometry {
        &self.geometry
    }

    pub fn ray(&self, k: usize) -> RayData {
        self.rays[k]
    }

    /// Uniform step of the normalized radial coordinate `t in (0,1)`.
    pub fn h_t(&self) -> f64 {
        1.0 / self.n_r as f64
    }

    pub fn h_phi(&self) -> f64 {
        std::f64::consts::TAU / self.n_phi as f64
    }

    /// Physical radial spacing along ray `k`.
    pub fn h_r(&self, k: usize) -> f64 {
        self.rays[k].delta * self.h_t()
    }

    /// Coarsest physical cell size over the grid (used for tolerance scaling).
    pub fn h_max(&self) -> f64 {
        let hr = self
            .rays
            .iter()
            .map(|r| r.delta * self.h_t())
            .fold(0.0f64, f64::max);
        let r_max = self
            .rays
            .iter()
            .map(|r| r.rho_lo + r.delta)
            .fold(0.0f64, f64::max);
        hr.max(r_max * self.h_phi())
    }

    #[inline]
    pub fn idx(&self, j: usize, k: usize) -> usize {
        j * self.n_phi + k
    }

    #[inline]
    pub fn split_idx(&self, idx: usize) -> (usize, usize) {
        (idx / self.n_phi, idx % self.n_phi)
    }

    /// Normalized radial coordinate of ring `j`.
    pub fn t(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.h_t()
    }

    pub fn phi(&self, k: usize) -> f64 {
        k as f64 * self.h_phi()
    }

    pub fn radius(&self, j: usize, k: usize) -> f64 {
        let ray = self.rays[k];
        ray.rho_lo + self.t(j) * ray.delta
    }

    pub fn point(&self, j: usize, k: usize) -> [f64; 2] {
        let r = self.radius(j, k);
        let phi = self.phi(k);
        [r * phi.cos(), r * phi.sin()]
    }

    /// Whether the first ring closes through the center (antipodal wrap)
    /// rather than mirroring across an inner boundary.
    pub fn has_pole(&self) -> bool {
        self.geometry.has_pole()
    }

    pub fn antipode(&self, k: usize) -> usize {
        (k + self.n_phi / 2) % self.n_phi
    }

    /// True when the node touches the ghost-mirror closure at the outer
    /// boundary (or the inner one, for ring-shaped domains).
    pub fn boundary_adjacent(&self, j: usize, _k: usize) -> bool {
        j + 1 == self.n_r || (j == 0 && !self.has_pole())
    }

    pub fn node_points(&self) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(self.len());
        for j in 0..self.n_r {
            for k in 0..self.n_phi {
                pts.push(self.point(j, k));
            }
        }
        pts
    }
}
