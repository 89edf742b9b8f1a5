//! Shared helpers for the integration suites.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speclab::riccati::eigen_real_parts;

/// Spectral margin a drift matrix must clear before we call it hyperbolic.
/// Keeps the rejection sampler away from borderline pairs whose maximal
/// solution is ill-conditioned for reasons unrelated to the solver.
pub const HYPERBOLIC_MARGIN: f64 = 1e-2;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random drift/diffusion pair `(B, Q)` with `B` hyperbolic (every
/// eigenvalue real part at least [`HYPERBOLIC_MARGIN`] in magnitude) and
/// `Q` symmetric positive definite.
///
/// Entries of `B` are uniform on `(-2, 2)`; `Q = R Rᵀ + I/10` with `R`
/// uniform on `(-1, 1)`, so `Q ⪰ I/10` holds by construction.
pub fn random_hyperbolic_pair<R: Rng>(rng: &mut R, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = loop {
        let cand = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-2.0..2.0));
        if eigen_real_parts(&cand)
            .iter()
            .all(|re| re.abs() >= HYPERBOLIC_MARGIN)
        {
            break cand;
        }
    };
    let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let q = &r * r.transpose() + DMatrix::identity(n, n) * 0.1;
    (b, q)
}
