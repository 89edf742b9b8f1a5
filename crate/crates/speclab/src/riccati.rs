//! Quadratic matrix equations behind the local expansions.
//!
//! At a hyperbolic rest point with linearization `B` and diffusion `Q = a(xi)`
//! the quadratic coefficient of the limit profile is the maximal symmetric
//! solution of the homogeneous algebraic Riccati equation
//!
//! ```text
//!   4 G Q G - G B - B^T G = 0,
//! ```
//!
//! characterized by `4 Q G - B` having all eigenvalues in the open right half
//! plane (equivalently `B - 4QG` Hurwitz). It is computed from the stable
//! invariant subspace of the 2n x 2n Hamiltonian `[[B, -4Q], [0, -B^T]]` via
//! an ordered real Schur decomposition with Bai-Demmel block swaps, then
//! polished by Newton-Kleinman steps (each one a small Lyapunov solve). The
//! companion weight `D` solves `D M + M^T D = 2 I` with `M = 4QG - B` and is
//! cross-checked against the quadrature of `2 ∫_0^∞ e^{-M^T s} e^{-M s} ds`.
//!
//! Around a hyperbolic periodic orbit the same role is played by the maximal
//! periodic solution of the matrix differential Riccati equation
//!
//! ```text
//!   dG/dt = 4 G Q(t) G - G B(t) - B(t)^T G
//! ```
//!
//! in the transverse frame, obtained by backward iteration from a huge
//! initial matrix. Because the equation has no constant term, the inverse
//! `Y = G^{-1}` obeys the *linear* Lyapunov ODE `dY/dt = -4Q + BY + YB^T`,
//! which is what the integrator actually advances (exactly the same
//! iteration, without the 1e6-scale quadratic stiffness at the start).

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, thiserror::Error)]
pub enum RiccatiError {
    #[error("matrix dimensions do not match: {0}")]
    Dimensions(String),
    #[error("B is not hyperbolic: eigenvalue with |Re| = {margin:.3e} < 1e-9")]
    NonHyperbolic { margin: f64 },
    #[error("Q is not symmetric positive definite (min eigenvalue {0:.3e})")]
    NotSpd(f64),
    #[error("real Schur iteration failed to converge")]
    SchurFailure,
    #[error("stable invariant subspace has no graph representation (cond {0:.3e})")]
    IllConditionedSubspace(f64),
    #[error("Lyapunov system is singular (eigenvalue pairing mu_i + mu_j ~ 0)")]
    SingularLyapunov,
    #[error("Riccati residual {residual:.3e} above tolerance after refinement")]
    ResidualAboveTolerance { residual: f64 },
    #[error("solution fails a certificate: {0}")]
    CertificateFailure(String),
    #[error("periodic Riccati iteration did not converge; last period gaps: {gaps:?}")]
    PeriodicNonConvergence { gaps: Vec<f64> },
}

/// Tolerances for the solution certificates.
const RESIDUAL_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = -1e-10;
const PERIOD_GAP_TOL: f64 = 1e-10;
/// Final periodicity certificate, measured in whichever sweep direction is
/// contracting around the solution.
const PERIODICITY_CERT_TOL: f64 = 1e-9;

/// Maximal symmetric solution of `4 G Q G - G B - B^T G = 0` with
/// certificates.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub gamma: DMatrix<f64>,
    /// Companion weight solving `D M + M^T D = 2I`, `M = 4QG - B`.
    pub d: DMatrix<f64>,
    /// `max |4GQG - GB - B^T G|`.
    pub residual: f64,
    /// `min Re` eigenvalue of `4QG - B`; positive for the maximal solution.
    pub antistability_margin: f64,
    /// Smallest eigenvalue of (the symmetrized) `G`; `>= -1e-10`.
    pub min_eigenvalue: f64,
    /// `max |D M + M^T D - 2I|`.
    pub lyapunov_residual: f64,
    /// Max-norm gap between the Kronecker solve for `D` and the quadrature
    /// of `2 ∫ e^{-M^T s} e^{-M s} ds` (two independent routes).
    pub lyapunov_integral_gap: f64,
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Real parts of the eigenvalues of a small dense matrix.
pub fn eigen_real_parts(m: &DMatrix<f64>) -> Vec<f64> {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .collect()
}

/// Sum of the positive real parts of the spectrum (counted with
/// multiplicity), the exponent sum entering the rest-point formula.
pub fn sum_positive_real_parts(m: &DMatrix<f64>) -> f64 {
    eigen_real_parts(m)
        .into_iter()
        .filter(|re| *re > 0.0)
        .sum()
}

fn riccati_residual(gamma: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    gamma * q * gamma * 4.0 - gamma * b - b.transpose() * gamma
}

fn spd_min_eig(q: &DMatrix<f64>) -> f64 {
    symmetrize(q)
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, &v| a.min(v))
}

/// Solves `X M + M^T X = C` through the Kronecker-product linear system.
/// The certified use has `M` antistable and `C = 2I`, but any `M` without an
/// eigenvalue pairing `mu_i + mu_j = 0` is accepted (Newton steps pass
/// general right-hand sides).
pub fn lyapunov_solve(m: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
    let n = m.nrows();
    if m.ncols() != n || c.nrows() != n || c.ncols() != n {
        return Err(RiccatiError::Dimensions(format!(
            "M is {}x{}, C is {}x{}",
            m.nrows(),
            m.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    let mt = m.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let sys = mt.kronecker(&eye) + eye.kronecker(&mt);
    let rhs = DVector::from_column_slice(c.as_slice());
    let lu = sys.lu();
    let sol = lu.solve(&rhs).ok_or(RiccatiError::SingularLyapunov)?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(if c == &c.transpose() { symmetrize(&x) } else { x })
}

/// Quadrature route for the companion weight: `2 ∫_0^∞ e^{-M^T s} e^{-M s} ds`
/// evaluated with RK4 on `G' = -M G` and Simpson accumulation, truncated once
/// the integrand max-norm drops below 1e-14. Step size is Richardson-refined
/// until two successive grids agree to 5e-11.
pub fn lyapunov_integral(m: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
    let margin = eigen_real_parts(m)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if margin <= 0.0 {
        return Err(RiccatiError::CertificateFailure(format!(
            "quadrature needs an antistable matrix; min Re eigenvalue {margin:.3e}"
        )));
    }
    let n = m.nrows();
    let norm = m.iter().fold(0.0f64, |a, v| a.max(v.abs())) * n as f64;
    let mut h = 0.05 / norm.max(margin).max(1e-3);
    let mut previous: Option<DMatrix<f64>> = None;
    for _ in 0..8 {
        let d = integrate_gram(m, h, n);
        if let Some(prev) = &previous {
            if max_abs(&(&d - prev)) < 5e-11 {
                return Ok(d);
            }
        }
        previous = Some(d);
        h *= 0.5;
    }
    Ok(previous.expect("at least one quadrature pass"))
}

fn integrate_gram(m: &DMatrix<f64>, h: f64, n: usize) -> DMatrix<f64> {
    let rhs = |g: &DMatrix<f64>| -(m * g);
    let mut g = DMatrix::<f64>::identity(n, n);
    let mut acc = DMatrix::<f64>::zeros(n, n);
    // Each Simpson cell [s, s+2h] uses the RK4 values at s, s+h, s+2h.
    let max_cells = 2_000_000usize;
    for _ in 0..max_cells {
        let f0 = g.transpose() * &g * 2.0;
        let g1 = rk4_step_mat(&rhs, &g, h);
        let f1 = g1.transpose() * &g1 * 2.0;
        let g2 = rk4_step_mat(&rhs, &g1, h);
        let f2 = g2.transpose() * &g2 * 2.0;
        acc += (f0 + f1 * 4.0 + &f2) * (h / 3.0);
        g = g2;
        if max_abs(&f2) < 1e-14 {
            break;
        }
    }
    acc
}

fn rk4_step_mat(
    f: &impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
    y: &DMatrix<f64>,
    h: f64,
) -> DMatrix<f64> {
    let k1 = f(y);
    let k2 = f(&(y + &k1 * (h / 2.0)));
    let k3 = f(&(y + &k2 * (h / 2.0)));
    let k4 = f(&(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// One diagonal block of a real Schur form.
#[derive(Debug, Clone, Copy)]
struct SchurBlock {
    start: usize,
    size: usize, // 1 or 2
    re: f64,     // real part of the block's eigenvalue(s)
}

fn detect_blocks(t: &DMatrix<f64>) -> Vec<SchurBlock> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        let two = i + 1 < n && {
            let scale = t[(i, i)].abs() + t[(i + 1, i + 1)].abs() + 1.0;
            t[(i + 1, i)].abs() > 1e-12 * scale
        };
        if two {
            blocks.push(SchurBlock {
                start: i,
                size: 2,
                re: 0.5 * (t[(i, i)] + t[(i + 1, i + 1)]),
            });
            i += 2;
        } else {
            blocks.push(SchurBlock {
                start: i,
                size: 1,
                re: t[(i, i)],
            });
            i += 1;
        }
    }
    blocks
}

/// Solves the small Sylvester equation `A X - X B = C` by Kronecker product
/// (block sizes here are at most 2, so the system is at most 4x4).
fn sylvester_small(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    let (p, q) = (a.nrows(), b.nrows());
    let eye_p = DMatrix::<f64>::identity(p, p);
    let eye_q = DMatrix::<f64>::identity(q, q);
    let sys = eye_q.kronecker(a) - b.transpose().kronecker(&eye_p);
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or(RiccatiError::SingularLyapunov)?;
    Ok(DMatrix::from_column_slice(p, q, sol.as_slice()))
}

/// Orthonormal completion of the columns of `v` to a full basis.
fn complete_orthonormal(v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = v.nrows();
    let k = v.ncols();
    let mut q = DMatrix::<f64>::zeros(n, n);
    // Orthonormalize v's columns first (they are close to orthonormal after
    // the QR below, but be safe).
    let mut cols = 0usize;
    let push = |q: &mut DMatrix<f64>, cols: &mut usize, cand: DVector<f64>| {
        let mut w = cand;
        for j in 0..*cols {
            let qi = q.column(j).clone_owned();
            let proj = qi.dot(&w);
            w -= qi * proj;
        }
        let norm = w.norm();
        if norm > 1e-8 {
            q.set_column(*cols, &(w / norm));
            *cols += 1;
            true
        } else {
            false
        }
    };
    for j in 0..k {
        push(&mut q, &mut cols, v.column(j).clone_owned());
    }
    let mut e = 0usize;
    while cols < n && e < n {
        let mut cand = DVector::zeros(n);
        cand[e] = 1.0;
        push(&mut q, &mut cols, cand);
        e += 1;
    }
    q
}

/// Swaps two adjacent diagonal blocks of the quasi-triangular `t`, updating
/// the accumulated orthogonal factor `u` (Bai-Demmel direct swap).
fn swap_adjacent_blocks(
    t: &mut DMatrix<f64>,
    u: &mut DMatrix<f64>,
    b1: SchurBlock,
    b2: SchurBlock,
) -> Result<(), RiccatiError> {
    let (i, p, q) = (b1.start, b1.size, b2.size);
    let w = p + q;
    let a11 = t.view((i, i), (p, p)).clone_owned();
    let a12 = t.view((i, i + p), (p, q)).clone_owned();
    let a22 = t.view((i + p, i + p), (q, q)).clone_owned();
    // Invariant subspace of the trailing block: columns of [X; I] where
    // A11 X - X A22 = -A12.
    let x = sylvester_small(&a11, &a22, &(-a12))?;
    let mut v = DMatrix::<f64>::zeros(w, q);
    v.view_mut((0, 0), (p, q)).copy_from(&x);
    v.view_mut((p, 0), (q, q))
        .copy_from(&DMatrix::identity(q, q));
    let qr = v.qr();
    let thin = qr.q();
    let qfull = complete_orthonormal(&thin);
    // Similarity on the full matrix restricted to the block rows/columns.
    let n = t.nrows();
    let block = t.view((i, i), (w, w)).clone_owned();
    let new_block = qfull.transpose() * block * &qfull;
    t.view_mut((i, i), (w, w)).copy_from(&new_block);
    if i > 0 {
        let top = t.view((0, i), (i, w)).clone_owned();
        t.view_mut((0, i), (i, w)).copy_from(&(top * &qfull));
    }
    if i + w < n {
        let right = t.view((i, i + w), (w, n - i - w)).clone_owned();
        t.view_mut((i, i + w), (w, n - i - w))
            .copy_from(&(qfull.transpose() * right));
    }
    let ucols = u.view((0, i), (n, w)).clone_owned();
    u.view_mut((0, i), (n, w)).copy_from(&(ucols * &qfull));
    // The (2,1) block of the swapped form is zero in exact arithmetic.
    for r in q..w {
        for c in 0..q {
            t[(i + r, i + c)] = 0.0;
        }
    }
    Ok(())
}

/// Splits a 2x2 diagonal block with real eigenvalues into two 1x1 blocks via
/// a Givens-type similarity (needed before ordering when the Schur step
/// leaves a real pair inside one block).
fn split_real_block(t: &mut DMatrix<f64>, u: &mut DMatrix<f64>, i: usize) {
    let a = t[(i, i)];
    let b = t[(i, i + 1)];
    let c = t[(i + 1, i)];
    let d = t[(i + 1, i + 1)];
    let tr = a + d;
    let disc = 0.25 * (a - d) * (a - d) + b * c;
    if disc < 0.0 {
        return; // genuine complex pair, keep as a block
    }
    let sq = disc.sqrt();
    let lam = if tr >= 0.0 { 0.5 * tr + sq } else { 0.5 * tr - sq };
    // Eigenvector of the 2x2 for lam.
    let (v0, v1) = if (a - lam).abs() + b.abs() > (d - lam).abs() + c.abs() {
        (-b, a - lam)
    } else {
        (d - lam, -c)
    };
    let norm = (v0 * v0 + v1 * v1).sqrt();
    if norm < 1e-300 {
        return;
    }
    // Rotation whose first column is orthogonal to (v0, v1)^perp -> aligns
    // e1 with the eigenvector.
    let (cth, sth) = (v0 / norm, v1 / norm);
    let g = DMatrix::<f64>::from_row_slice(2, 2, &[cth, -sth, sth, cth]);
    let n = t.nrows();
    let block = t.view((i, i), (2, 2)).clone_owned();
    let nb = g.transpose() * block * &g;
    t.view_mut((i, i), (2, 2)).copy_from(&nb);
    t[(i + 1, i)] = 0.0;
    if i > 0 {
        let top = t.view((0, i), (i, 2)).clone_owned();
        t.view_mut((0, i), (i, 2)).copy_from(&(top * &g));
    }
    if i + 2 < n {
        let right = t.view((i, i + 2), (2, n - i - 2)).clone_owned();
        t.view_mut((i, i + 2), (2, n - i - 2))
            .copy_from(&(g.transpose() * right));
    }
    let ucols = u.view((0, i), (n, 2)).clone_owned();
    u.view_mut((0, i), (n, 2)).copy_from(&(ucols * &g));
}

/// Real Schur form of `h` with the blocks selected by `select` moved to the
/// leading position (stable-first ordering passes `re < 0.0`).
fn ordered_schur(
    h: &DMatrix<f64>,
    select: impl Fn(f64) -> bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>, usize), RiccatiError> {
    let schur = nalgebra::linalg::Schur::try_new(h.clone(), 1e-14, 0)
        .ok_or(RiccatiError::SchurFailure)?;
    let (mut u, mut t) = schur.unpack();
    // Split accidental real 2x2 blocks so ordering is by eigenvalue.
    loop {
        let blocks = detect_blocks(&t);
        let mut split_any = false;
        for blk in &blocks {
            if blk.size == 2 {
                let i = blk.start;
                let disc = 0.25 * (t[(i, i)] - t[(i + 1, i + 1)]) * (t[(i, i)] - t[(i + 1, i + 1)])
                    + t[(i, i + 1)] * t[(i + 1, i)];
                if disc >= 0.0 {
                    split_real_block(&mut t, &mut u, i);
                    split_any = true;
                }
            }
        }
        if !split_any {
            break;
        }
    }
    // Bubble the selected blocks to the front.
    loop {
        let blocks = detect_blocks(&t);
        let mut swapped = false;
        for w in blocks.windows(2) {
            let (b1, b2) = (w[0], w[1]);
            if !select(b1.re) && select(b2.re) {
                swap_adjacent_blocks(&mut t, &mut u, b1, b2)?;
                swapped = true;
                break;
            }
        }
        if !swapped {
            break;
        }
    }
    let selected: usize = detect_blocks(&t)
        .iter()
        .take_while(|b| select(b.re))
        .map(|b| b.size)
        .sum();
    Ok((u, t, selected))
}

/// Maximal symmetric solution of `4 G Q G - G B - B^T G = 0`.
///
/// `B` must be hyperbolic (no eigenvalue within 1e-9 of the imaginary axis)
/// and `Q` symmetric positive definite. The returned solution carries its
/// certificates; construction fails if any certificate does.
pub fn care_maximal(b: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<RiccatiSolution, RiccatiError> {
    let n = b.nrows();
    if b.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(RiccatiError::Dimensions(format!(
            "B is {}x{}, Q is {}x{}",
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let q_min = spd_min_eig(q);
    if q_min <= 0.0 {
        return Err(RiccatiError::NotSpd(q_min));
    }
    let hyp = eigen_real_parts(b)
        .into_iter()
        .fold(f64::INFINITY, |a, re| a.min(re.abs()));
    if hyp < 1e-9 {
        return Err(RiccatiError::NonHyperbolic { margin: hyp });
    }

    // Hamiltonian pencil of the quadratic equation.
    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(b);
    h.view_mut((0, n), (n, n)).copy_from(&(-(q * 4.0)));
    h.view_mut((n, n), (n, n)).copy_from(&(-b.transpose()));

    let (u, _t, selected) = ordered_schur(&h, |re| re < 0.0)?;
    if selected != n {
        return Err(RiccatiError::CertificateFailure(format!(
            "stable subspace has dimension {selected}, expected {n}"
        )));
    }
    let x1 = u.view((0, 0), (n, n)).clone_owned();
    let x2 = u.view((n, 0), (n, n)).clone_owned();
    let svd = x1.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &v| a.max(v));
    let smin = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, &v| a.min(v));
    let mut gamma = if smin > 1e-13 * smax.max(1.0) {
        // Gamma = X2 X1^{-1}, via X1^T Gamma^T = X2^T.
        let lu = x1.transpose().lu();
        let gt = lu
            .solve(&x2.transpose())
            .ok_or_else(|| RiccatiError::IllConditionedSubspace(smax / smin.max(1e-300)))?;
        symmetrize(&gt.transpose())
    } else {
        return Err(RiccatiError::IllConditionedSubspace(smax / smin.max(1e-300)));
    };

    // Newton-Kleinman polish: delta M + M^T delta = -R(gamma).
    let scale = max_abs(b).max(max_abs(q)).max(max_abs(&gamma)).max(1.0);
    for _ in 0..6 {
        let res = riccati_residual(&gamma, b, q);
        if max_abs(&res) <= 1e-14 * scale * scale {
            break;
        }
        let m = q * &gamma * 4.0 - b;
        match lyapunov_solve(&m, &(-res)) {
            Ok(delta) => gamma = symmetrize(&(&gamma + delta)),
            Err(_) => break,
        }
    }

    let residual = max_abs(&riccati_residual(&gamma, b, q));
    if residual > RESIDUAL_TOL * scale.max(1.0) {
        return Err(RiccatiError::ResidualAboveTolerance { residual });
    }
    let symmetry = max_abs(&(&gamma - gamma.transpose()));
    if symmetry > SYMMETRY_TOL {
        return Err(RiccatiError::CertificateFailure(format!(
            "asymmetry {symmetry:.3e}"
        )));
    }
    let min_eigenvalue = spd_min_eig(&gamma);
    if min_eigenvalue < PSD_TOL {
        return Err(RiccatiError::CertificateFailure(format!(
            "indefinite solution, min eigenvalue {min_eigenvalue:.3e}"
        )));
    }
    let m = q * &gamma * 4.0 - b;
    let antistability_margin = eigen_real_parts(&m)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if antistability_margin <= 0.0 {
        return Err(RiccatiError::CertificateFailure(format!(
            "closed loop not antistable (margin {antistability_margin:.3e})"
        )));
    }
    let two_i = DMatrix::<f64>::identity(n, n) * 2.0;
    let d = lyapunov_solve(&m, &two_i)?;
    let lyapunov_residual = max_abs(&(&d * &m + m.transpose() * &d - &two_i));
    if lyapunov_residual > RESIDUAL_TOL * scale {
        return Err(RiccatiError::CertificateFailure(format!(
            "companion weight residual {lyapunov_residual:.3e}"
        )));
    }
    let d_min = spd_min_eig(&d);
    if d_min <= 0.0 {
        return Err(RiccatiError::CertificateFailure(format!(
            "companion weight not positive definite (min eigenvalue {d_min:.3e})"
        )));
    }
    let d_quad = lyapunov_integral(&m)?;
    let lyapunov_integral_gap = max_abs(&(&d - &d_quad));

    Ok(RiccatiSolution {
        gamma,
        d,
        residual,
        antistability_margin,
        min_eigenvalue,
        lyapunov_residual,
        lyapunov_integral_gap,
    })
}

/// Every symmetric solution reachable as a graph over an n-dimensional
/// invariant subspace of the Hamiltonian, one per selection of an eigenvalue
/// from each `±mu` pair. Diagnostic for the maximality certificate: the
/// solution from `care_maximal` dominates all entries of this list.
pub fn alternative_graph_solutions(
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>, RiccatiError> {
    let n = b.nrows();
    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(b);
    h.view_mut((0, n), (n, n)).copy_from(&(-(q * 4.0)));
    h.view_mut((n, n), (n, n)).copy_from(&(-b.transpose()));

    // Pair blocks by mirrored eigenvalues, then enumerate the sign choices.
    let (u0, t0, _) = ordered_schur(&h, |_| false)?;
    let _ = u0;
    let blocks = detect_blocks(&t0);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut used = vec![false; blocks.len()];
    for i in 0..blocks.len() {
        if used[i] {
            continue;
        }
        let mut partner = None;
        for j in i + 1..blocks.len() {
            if !used[j]
                && blocks[j].size == blocks[i].size
                && (blocks[j].re + blocks[i].re).abs() < 1e-6 * (1.0 + blocks[i].re.abs())
            {
                partner = Some(j);
                break;
            }
        }
        let j = partner.ok_or_else(|| {
            RiccatiError::CertificateFailure("eigenvalue pairs of the Hamiltonian not matched".into())
        })?;
        used[i] = true;
        used[j] = true;
        pairs.push((i, j));
    }
    let mut sols = Vec::new();
    let re_keys: Vec<(f64, f64)> = pairs
        .iter()
        .map(|&(i, j)| (blocks[i].re, blocks[j].re))
        .collect();
    for mask in 0..(1usize << pairs.len()) {
        let mut chosen: Vec<f64> = Vec::new();
        for (p, key) in re_keys.iter().enumerate() {
            chosen.push(if mask & (1 << p) != 0 { key.1 } else { key.0 });
        }
        let select = |re: f64| {
            chosen
                .iter()
                .any(|c| (re - c).abs() < 1e-6 * (1.0 + c.abs()))
        };
        let Ok((u, _t, sel)) = ordered_schur(&h, select) else {
            continue;
        };
        if sel != n {
            continue;
        }
        let x1 = u.view((0, 0), (n, n)).clone_owned();
        let x2 = u.view((n, 0), (n, n)).clone_owned();
        let svd = x1.clone().svd(false, false);
        let smax = svd.singular_values.iter().fold(0.0f64, |a, &v| a.max(v));
        let smin = svd
            .singular_values
            .iter()
            .fold(f64::INFINITY, |a, &v| a.min(v));
        if smin <= 1e-8 * smax.max(1.0) {
            continue; // no graph representation for this selection
        }
        if let Some(gt) = x1.transpose().lu().solve(&x2.transpose()) {
            let g = symmetrize(&gt.transpose());
            // Keep genuine solutions only.
            if max_abs(&riccati_residual(&g, b, q)) <= 1e-7 * (1.0 + max_abs(&g).powi(2)) {
                sols.push(g);
            }
        }
    }
    Ok(sols)
}

// ---------------------------------------------------------------------------
// Periodic transverse Riccati equation
// ---------------------------------------------------------------------------

/// Transverse-frame coefficients sampled on a half-step lattice over one
/// period: entry `k` holds values at `t_k = k P / (2 m)`, `k = 0..=2m`, so an
/// RK4 sweep with `m` steps per period finds exact samples at every stage.
#[derive(Debug, Clone)]
pub struct CycleCoeffs {
    pub period: f64,
    /// Transverse dimension (0 for boundary cycles in the plane).
    pub dim: usize,
    pub q: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    /// Zero-order field along the orbit (same lattice), for the phase
    /// correction ODE.
    pub c: Vec<f64>,
}

impl CycleCoeffs {
    pub fn steps(&self) -> usize {
        (self.q.len() - 1) / 2
    }

    /// Builds analytic-coefficient data (used by tests and by the
    /// constant-coefficient reduction checks).
    pub fn from_functions(
        period: f64,
        dim: usize,
        steps: usize,
        q: impl Fn(f64) -> DMatrix<f64>,
        b: impl Fn(f64) -> DMatrix<f64>,
        c: impl Fn(f64) -> f64,
    ) -> CycleCoeffs {
        let m = 2 * steps;
        let mut qv = Vec::with_capacity(m + 1);
        let mut bv = Vec::with_capacity(m + 1);
        let mut cv = Vec::with_capacity(m + 1);
        for k in 0..=m {
            let t = period * k as f64 / m as f64;
            qv.push(q(t));
            bv.push(b(t));
            cv.push(c(t));
        }
        CycleCoeffs {
            period,
            dim,
            q: qv,
            b: bv,
            c: cv,
        }
    }
}

/// Maximal periodic solution of the transverse Riccati flow with its
/// companion weight and certificates.
#[derive(Debug, Clone)]
pub struct PeriodicRiccatiSolution {
    pub period: f64,
    pub dim: usize,
    /// `Gbar(t_k)` on the full lattice `t_k = k P / m`, `k = 0..=m`.
    pub gamma: Vec<DMatrix<f64>>,
    /// Companion weight `Dbar(t_k)` from the truncated tail quadrature.
    pub d: Vec<DMatrix<f64>>,
    /// Coefficients retained for phase corrections and trace identities.
    pub coeffs: CycleCoeffs,
    /// `|Gbar(P) - Gbar(0)|` after refinement, measured in whichever sweep
    /// direction is contracting around the solution.
    pub periodicity_gap: f64,
    /// Max-norm residual of the differential equation on the lattice
    /// (8th-order periodic finite differences).
    pub ode_residual: f64,
    /// Spectral radius of the closed-loop transverse monodromy; `< 1`.
    pub floquet_radius: f64,
    /// Period gaps of the backward iteration (diagnostic).
    pub iteration_gaps: Vec<f64>,
}

fn ivp_index(step: usize, stage: usize) -> usize {
    2 * step + stage
}

/// RK4 sweep of one period of the *linear* inverse flow
/// `dY/dtau = 4Q - B Y - Y B^T` (backward time), starting from `y0` at
/// `t = P` and recording the full lattice: `out[k] = Y(t_k)`, so
/// `out[m] = y0` and `out[0]` is the sweep's endpoint at `t = 0`.
fn backward_period_inverse_lattice(
    coeffs: &CycleCoeffs,
    y0: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let m = coeffs.steps();
    let h = coeffs.period / m as f64;
    let mut out = vec![y0.clone(); m + 1];
    let mut y = y0.clone();
    // tau = P - t: coefficients walk the lattice backward.
    for step in 0..m {
        let back = m - 1 - step;
        let idx = |stage: usize| ivp_index(back, 2 - stage); // stage 0 -> t_{k+1}
        let f = |stage: usize, yy: &DMatrix<f64>| -> DMatrix<f64> {
            let q = &coeffs.q[idx(stage)];
            let b = &coeffs.b[idx(stage)];
            q * 4.0 - b * yy - yy * b.transpose()
        };
        let k1 = f(0, &y);
        let k2 = f(1, &(&y + &k1 * (h / 2.0)));
        let k3 = f(1, &(&y + &k2 * (h / 2.0)));
        let k4 = f(2, &(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out[back] = y.clone();
    }
    out
}

/// Endpoint of [`backward_period_inverse_lattice`]: `Y(0)` after one
/// backward period from `Y(P) = y0`.
fn backward_period_inverse(coeffs: &CycleCoeffs, y0: &DMatrix<f64>) -> DMatrix<f64> {
    backward_period_inverse_lattice(coeffs, y0).swap_remove(0)
}

/// Forward RK4 sweep of the Riccati flow from `g0`, recording the solution on
/// the full lattice and the closed-loop fundamental matrix `Psi` alongside.
fn forward_period_riccati(
    coeffs: &CycleCoeffs,
    g0: &DMatrix<f64>,
) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
    let m = coeffs.steps();
    let nt = coeffs.dim;
    let h = coeffs.period / m as f64;
    let mut g = g0.clone();
    let mut psi = DMatrix::<f64>::identity(nt, nt);
    let mut samples = Vec::with_capacity(m + 1);
    samples.push(g.clone());
    for step in 0..m {
        let idx = |stage: usize| ivp_index(step, stage);
        let fg = |stage: usize, gg: &DMatrix<f64>| -> DMatrix<f64> {
            let q = &coeffs.q[idx(stage)];
            let b = &coeffs.b[idx(stage)];
            gg * q * gg * 4.0 - gg * b - b.transpose() * gg
        };
        // Joint step so Psi sees the in-stage Riccati values.
        let fp = |stage: usize, gg: &DMatrix<f64>, pp: &DMatrix<f64>| -> DMatrix<f64> {
            let q = &coeffs.q[idx(stage)];
            let b = &coeffs.b[idx(stage)];
            (b - q * gg * 4.0) * pp
        };
        let kg1 = fg(0, &g);
        let kp1 = fp(0, &g, &psi);
        let g2 = &g + &kg1 * (h / 2.0);
        let p2 = &psi + &kp1 * (h / 2.0);
        let kg2 = fg(1, &g2);
        let kp2 = fp(1, &g2, &p2);
        let g3 = &g + &kg2 * (h / 2.0);
        let p3 = &psi + &kp2 * (h / 2.0);
        let kg3 = fg(1, &g3);
        let kp3 = fp(1, &g3, &p3);
        let g4 = &g + &kg3 * h;
        let p4 = &psi + &kp3 * h;
        let kg4 = fg(2, &g4);
        let kp4 = fp(2, &g4, &p4);
        g += (kg1 + kg2 * 2.0 + kg3 * 2.0 + kg4) * (h / 6.0);
        psi += (kp1 + kp2 * 2.0 + kp3 * 2.0 + kp4) * (h / 6.0);
        g = symmetrize(&g);
        samples.push(g.clone());
    }
    (samples, psi)
}

/// Solves `X - S^T X S = C` (discrete Stein equation) by Kronecker product.
fn stein_solve(s: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
    let n = s.nrows();
    let eye = DMatrix::<f64>::identity(n * n, n * n);
    let st = s.transpose();
    let sys = eye - st.kronecker(&st);
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or(RiccatiError::SingularLyapunov)?;
    Ok(symmetrize(&DMatrix::from_column_slice(n, n, sol.as_slice())))
}

/// Maximal periodic solution by backward iteration from `1e6 * I` across
/// periods until the period-map gap is below 1e-10 (capped), followed by
/// Newton refinement of the periodicity condition through the linearized
/// period map (a small Stein solve per step).
///
/// The final periodicity certificate is taken in whichever sweep direction
/// contracts around the solution: the forward sweep when the closed loop is
/// comfortably stable, otherwise the backward sweep in the inverse variable,
/// whose lattice also replaces the forward one so downstream consumers see
/// uniformly accurate samples.
pub fn periodic_riccati_maximal(
    coeffs: &CycleCoeffs,
) -> Result<PeriodicRiccatiSolution, RiccatiError> {
    let nt = coeffs.dim;
    if nt == 0 {
        // Boundary cycles in the plane: empty transverse block; the solution
        // is trivial and every certificate is vacuous.
        return Ok(PeriodicRiccatiSolution {
            period: coeffs.period,
            dim: 0,
            gamma: vec![DMatrix::zeros(0, 0); coeffs.steps() + 1],
            d: vec![DMatrix::zeros(0, 0); coeffs.steps() + 1],
            coeffs: coeffs.clone(),
            periodicity_gap: 0.0,
            ode_residual: 0.0,
            floquet_radius: 0.0,
            iteration_gaps: Vec::new(),
        });
    }

    // Backward iteration in the inverse variable.
    let mut y = DMatrix::<f64>::identity(nt, nt) * 1e-6;
    let mut prev_gamma: Option<DMatrix<f64>> = None;
    let mut gaps = Vec::new();
    let mut converged = false;
    for _period in 0..200 {
        y = backward_period_inverse(coeffs, &y);
        if max_abs(&y) > 1e120 {
            // Directions with huge Y have vanishing Gamma; conversion below
            // still works, but further sweeps would overflow.
            break;
        }
        let gamma = y
            .clone()
            .lu()
            .try_inverse()
            .ok_or(RiccatiError::SingularLyapunov)?;
        if let Some(prev) = &prev_gamma {
            let gap = max_abs(&(&gamma - prev));
            gaps.push(gap);
            if gap < PERIOD_GAP_TOL {
                converged = true;
                prev_gamma = Some(gamma);
                break;
            }
        }
        prev_gamma = Some(gamma);
    }
    let mut g0 = symmetrize(&prev_gamma.ok_or(RiccatiError::PeriodicNonConvergence {
        gaps: gaps.clone(),
    })?);
    if !converged && gaps.last().copied().unwrap_or(f64::INFINITY) > 1e-6 {
        return Err(RiccatiError::PeriodicNonConvergence { gaps });
    }

    // Newton refinement of the periodicity condition.
    let mut best_gap = f64::INFINITY;
    for _ in 0..10 {
        let (samples, psi) = forward_period_riccati(coeffs, &g0);
        let f = samples.last().expect("samples") - &g0;
        let gap = max_abs(&f);
        if gap < best_gap {
            best_gap = gap;
        }
        if gap < 1e-13 {
            break;
        }
        // delta - Psi^T delta Psi = -Psi^T F Psi solves the linearized
        // periodicity equation.
        let rhs = -(psi.transpose() * &f * &psi);
        match stein_solve(&psi, &rhs) {
            Ok(delta) => {
                let next = symmetrize(&(&g0 + &delta));
                g0 = next;
            }
            Err(_) => break,
        }
    }

    let (mut gamma_samples, psi) = forward_period_riccati(coeffs, &g0);
    let forward_gap = max_abs(&(gamma_samples.last().expect("samples") - &g0));
    let mut periodicity_gap = forward_gap;
    if forward_gap > PERIODICITY_CERT_TOL {
        // Around the maximal solution the forward Riccati flow expands
        // perturbations by the inverse square of the closed-loop Floquet
        // radius, so for a strongly repelling transverse direction the
        // forward gap saturates at (amplification x roundoff) regardless of
        // how accurate `g0` is, and the forward lattice drifts toward the
        // period's end. The backward sweep is the contraction: rebuild the
        // lattice there and certify periodicity where it is conditioned.
        if let Some(y0) = g0.clone().lu().try_inverse() {
            let ys = backward_period_inverse_lattice(coeffs, &y0);
            let inverted: Option<Vec<DMatrix<f64>>> = ys
                .iter()
                .map(|y| y.clone().lu().try_inverse().map(|g| symmetrize(&g)))
                .collect();
            if let Some(back_samples) = inverted {
                let backward_gap = max_abs(&(&back_samples[0] - &g0));
                if backward_gap < periodicity_gap {
                    periodicity_gap = backward_gap;
                    gamma_samples = back_samples;
                }
            }
        }
    }
    if periodicity_gap > PERIODICITY_CERT_TOL {
        return Err(RiccatiError::PeriodicNonConvergence { gaps });
    }
    let floquet_radius = psi
        .clone()
        .complex_eigenvalues()
        .iter()
        .fold(0.0f64, |a, z| a.max(z.norm()));
    if floquet_radius >= 1.0 - 1e-6 {
        return Err(RiccatiError::CertificateFailure(format!(
            "closed-loop Floquet radius {floquet_radius} not inside the unit circle"
        )));
    }

    // ODE residual via 8th-order periodic finite differences in time.
    let m = coeffs.steps();
    let h = coeffs.period / m as f64;
    let weights = [
        1.0 / 280.0,
        -4.0 / 105.0,
        1.0 / 5.0,
        -4.0 / 5.0,
        0.0,
        4.0 / 5.0,
        -1.0 / 5.0,
        4.0 / 105.0,
        -1.0 / 280.0,
    ];
    let wrap = |i: isize| -> usize { i.rem_euclid(m as isize) as usize };
    let mut ode_residual = 0.0f64;
    let mut gnorm = 0.0f64;
    for k in 0..m {
        let mut deriv = DMatrix::<f64>::zeros(nt, nt);
        for (o, w) in (-4..=4).zip(weights.iter()) {
            if *w != 0.0 {
                deriv += &gamma_samples[wrap(k as isize + o)] * (*w / h);
            }
        }
        let g = &gamma_samples[k];
        let q = &coeffs.q[2 * k];
        let b = &coeffs.b[2 * k];
        let rhs = g * q * g * 4.0 - g * b - b.transpose() * g;
        ode_residual = ode_residual.max(max_abs(&(deriv - rhs)));
        gnorm = gnorm.max(max_abs(g));
    }
    if ode_residual > 1e-8 * gnorm.max(1.0) {
        return Err(RiccatiError::CertificateFailure(format!(
            "periodic solution leaves an ODE residual of {ode_residual:.3e}"
        )));
    }

    // Companion weight: truncated tail quadrature of the closed-loop Gram
    // integral from each lattice time.
    let d_samples = companion_weight_samples(coeffs, &gamma_samples)?;

    Ok(PeriodicRiccatiSolution {
        period: coeffs.period,
        dim: nt,
        gamma: gamma_samples,
        d: d_samples,
        coeffs: coeffs.clone(),
        periodicity_gap,
        ode_residual,
        floquet_radius,
        iteration_gaps: gaps,
    })
}

/// `Dbar(t_k) = 2 ∫_{t_k}^∞ Psi(tau, t_k)^T Psi(tau, t_k) dtau`, truncated
/// when the integrand max-norm falls below 1e-14 (geometric decay at the
/// closed-loop Floquet rate). Simpson accumulation on half-steps.
fn companion_weight_samples(
    coeffs: &CycleCoeffs,
    gamma: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>, RiccatiError> {
    let m = coeffs.steps();
    let nt = coeffs.dim;
    let h = coeffs.period / m as f64;
    // Closed-loop coefficient on the half lattice: K(t) = B - 4 Q Gbar.
    // Gamma is only known on full steps; interpolate to half steps with the
    // cubic that an RK4-accurate context justifies (4-point centered).
    let gamma_half = |k: usize| -> DMatrix<f64> {
        // value at t_{k + 1/2} from samples k-1..k+2 (clamped periodically)
        let gm1 = &gamma[(k + m - 1) % m];
        let g0 = &gamma[k % m];
        let g1 = &gamma[(k + 1) % m];
        let g2 = &gamma[(k + 2) % m];
        (-gm1 + g0 * 9.0 + g1 * 9.0 - g2) / 16.0
    };
    let k_at = |half_idx: usize| -> DMatrix<f64> {
        let q = &coeffs.q[half_idx % (2 * m)];
        let b = &coeffs.b[half_idx % (2 * m)];
        let g = if half_idx % 2 == 0 {
            gamma[(half_idx / 2) % m].clone()
        } else {
            gamma_half(half_idx / 2)
        };
        b - q * g * 4.0
    };
    let rk4_psi = |half: usize, psi: &DMatrix<f64>| -> DMatrix<f64> {
        let f = |idx: usize, p: &DMatrix<f64>| k_at(idx) * p;
        let k1 = f(half, psi);
        let k2 = f(half + 1, &(psi + &k1 * (h / 2.0)));
        let k3 = f(half + 1, &(psi + &k2 * (h / 2.0)));
        let k4 = f(half + 2, &(psi + &k3 * h));
        psi + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    };
    let mut out = Vec::with_capacity(m + 1);
    for start in 0..m {
        let mut psi = DMatrix::<f64>::identity(nt, nt);
        let mut acc = DMatrix::<f64>::zeros(nt, nt);
        let mut half = 2 * start;
        // Each Simpson cell spans two full RK4 steps, so every quadrature
        // node carries the integrator's own fourth-order accuracy.
        let max_cells = 2000 * m;
        for _ in 0..max_cells {
            let f0 = psi.transpose() * &psi * 2.0;
            let psi1 = rk4_psi(half, &psi);
            let f1 = psi1.transpose() * &psi1 * 2.0;
            let psi2 = rk4_psi(half + 2, &psi1);
            let f2 = psi2.transpose() * &psi2 * 2.0;
            acc += (f0 + f1 * 4.0 + &f2) * (h / 3.0);
            psi = psi2;
            half += 4;
            if max_abs(&f2) < 1e-14 {
                break;
            }
        }
        out.push(symmetrize(&acc));
    }
    let first = out[0].clone();
    out.push(first); // periodic closure sample at t = P
    Ok(out)
}

impl PeriodicRiccatiSolution {
    /// Phase corrections `Phi_{±delta}(t)` on the full lattice: antiderivative
    /// of the zero-mean combination of `-2 tr(Q (G ± delta D)) + c` along the
    /// orbit, vanishing at `t = 0`. Returns `(phi_plus, phi_minus)` and the
    /// periodicity defects of both.
    pub fn phase_corrections(&self, delta: f64) -> (Vec<f64>, Vec<f64>, f64) {
        let m = self.coeffs.steps();
        if self.dim == 0 {
            // Only the zero-order field contributes.
            let f: Vec<f64> = (0..=m).map(|k| self.coeffs.c[2 * k]).collect();
            let (phi, defect) = cumulative_zero_mean(&f, self.period);
            return (phi.clone(), phi, defect);
        }
        let mut fp = Vec::with_capacity(m + 1);
        let mut fm = Vec::with_capacity(m + 1);
        for k in 0..=m {
            let q = &self.coeffs.q[2 * k];
            let c = self.coeffs.c[2 * k];
            let tp = (q * (&self.gamma[k] + &self.d[k] * delta)).trace();
            let tm = (q * (&self.gamma[k] - &self.d[k] * delta)).trace();
            fp.push(-2.0 * tp + c);
            fm.push(-2.0 * tm + c);
        }
        let (phip, dp) = cumulative_zero_mean(&fp, self.period);
        let (phim, dm) = cumulative_zero_mean(&fm, self.period);
        (phip, phim, dp.max(dm))
    }

    /// `2 ∫_0^P tr(Qbar Gbar) dt`, one side of the cycle trace identity.
    pub fn trace_integral(&self) -> f64 {
        let m = self.coeffs.steps();
        if self.dim == 0 {
            return 0.0;
        }
        let f: Vec<f64> = (0..=m)
            .map(|k| 2.0 * (&self.coeffs.q[2 * k] * &self.gamma[k]).trace())
            .collect();
        integrate_lattice(&f, self.period)
    }
}

/// Composite-Simpson integral of lattice samples over `[0, period]`
/// (the lattice length is odd: full steps plus the closure point).
pub(crate) fn integrate_lattice(f: &[f64], period: f64) -> f64 {
    let m = f.len() - 1;
    assert!(m >= 2 && m % 2 == 0, "even step count required");
    let h = period / m as f64;
    let mut acc = f[0] + f[m];
    for (k, v) in f.iter().enumerate().take(m).skip(1) {
        acc += *v * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Antiderivative of `f - mean(f)` on the lattice (4th-order cumulative
/// quadrature), with the periodicity defect `|F(P) - F(0)|`.
fn cumulative_zero_mean(f: &[f64], period: f64) -> (Vec<f64>, f64) {
    let m = f.len() - 1;
    let h = period / m as f64;
    let mean = integrate_lattice(f, period) / period;
    let g: Vec<f64> = f.iter().map(|v| v - mean).collect();
    let mut out = vec![0.0; m + 1];
    // Pairwise Simpson for even indices, 4th-order half-cell rule for odd.
    for k in (2..=m).step_by(2) {
        out[k] = out[k - 2] + h / 3.0 * (g[k - 2] + 4.0 * g[k - 1] + g[k]);
    }
    for k in (1..=m).step_by(2) {
        let (a, b, c) = (g[k - 1], g[k], g[(k + 1).min(m)]);
        out[k] = out[k - 1] + h / 12.0 * (5.0 * a + 8.0 * b - c);
    }
    let defect = out[m].abs();
    (out, defect)
}
