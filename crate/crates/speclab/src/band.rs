//! Banded LU factorization without pivoting.
//!
//! The discretized operators are banded after r-major node ordering (angular
//! index fastest): radial neighbours sit `N_phi` columns away, angular
//! neighbours at most `N_phi - 1` (the periodic wrap stays inside the band).
//! The shifted matrices we factor are M-matrices — positive diagonal,
//! nonpositive off-diagonals, weakly diagonally dominant columns — for which
//! LU without pivoting is well defined, so we keep the factorization
//! pivot-free and the storage layout static.
//!
//! Storage is row-compact: row `i` occupies a contiguous slice of width
//! `kl + ku + 1` covering columns `i - kl ..= i + ku`. Elimination then
//! updates each affected row with a single contiguous axpy, and the back
//! substitution reads one contiguous row segment per unknown.

/// Smallest pivot magnitude accepted during elimination.
const PIVOT_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, thiserror::Error)]
pub enum BandError {
    #[error("entry ({i}, {j}) falls outside the band (kl = {kl}, ku = {ku})")]
    OutsideBand { i: usize, j: usize, kl: usize, ku: usize },
    #[error("zero pivot at elimination step {row}")]
    ZeroPivot { row: usize },
    #[error("dimension mismatch: matrix order {n}, vector length {len}")]
    Dimensions { n: usize, len: usize },
}

/// Banded matrix in row-compact storage.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn order(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = (i as isize, j as isize);
        let off = j - i + self.kl as isize;
        if off < 0 || off >= self.width as isize {
            return None;
        }
        Some(i as usize * self.width + off as usize)
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) -> Result<(), BandError> {
        match self.slot(i, j) {
            Some(s) => {
                self.data[s] += v;
                Ok(())
            }
            None => Err(BandError::OutsideBand {
                i,
                j,
                kl: self.kl,
                ku: self.ku,
            }),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// In-place LU without pivoting; multipliers land in the strictly lower
    /// band, the upper triangle stays in the row storage.
    pub fn factor(mut self) -> Result<BandedLu, BandError> {
        let (n, kl, ku, w) = (self.n, self.kl, self.ku, self.width);
        for p in 0..n {
            let pivot = self.data[p * w + kl];
            if pivot.abs() < PIVOT_FLOOR {
                return Err(BandError::ZeroPivot { row: p });
            }
            let last = (p + kl).min(n - 1);
            for r in (p + 1)..=last {
                // Column p of row r sits at offset p - r + kl (>= 0 since r - p <= kl).
                let off = p + kl - r;
                let f = self.data[r * w + off] / pivot;
                if f != 0.0 {
                    self.data[r * w + off] = f;
                    // Columns p+1 ..= p+ku of row p start right of its pivot slot.
                    let span = ku.min(n - 1 - p);
                    let (head, tail) = self.data.split_at_mut(r * w);
                    let prow = &head[p * w + kl + 1..p * w + kl + 1 + span];
                    let rrow = &mut tail[off + 1..off + 1 + span];
                    for (rv, pv) in rrow.iter_mut().zip(prow) {
                        *rv -= f * pv;
                    }
                }
            }
        }
        Ok(BandedLu {
            n,
            kl,
            ku,
            width: w,
            data: self.data,
        })
    }
}

/// Factored form; solves by forward elimination and banded back substitution.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandedLu {
    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<(), BandError> {
        if b.len() != self.n {
            return Err(BandError::Dimensions {
                n: self.n,
                len: b.len(),
            });
        }
        let (n, kl, ku, w) = (self.n, self.kl, self.ku, self.width);
        for p in 0..n {
            let bp = b[p];
            if bp != 0.0 {
                let last = (p + kl).min(n - 1);
                for r in (p + 1)..=last {
                    b[r] -= self.data[r * w + (p + kl - r)] * bp;
                }
            }
        }
        for i in (0..n).rev() {
            let span = ku.min(n - 1 - i);
            let row = &self.data[i * w + kl..i * w + kl + 1 + span];
            let mut s = b[i];
            for (d, rv) in row[1..].iter().enumerate() {
                s -= rv * b[i + 1 + d];
            }
            b[i] = s / row[0];
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut x = b.to_vec();
        for p in 0..n {
            let piv = (p..n).max_by(|&i, &j| m[i][p].abs().total_cmp(&m[j][p].abs())).unwrap();
            m.swap(p, piv);
            x.swap(p, piv);
            for r in p + 1..n {
                let f = m[r][p] / m[p][p];
                for c in p..n {
                    m[r][c] -= f * m[p][c];
                }
                x[r] -= f * x[p];
            }
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= m[i][j] * x[j];
            }
            x[i] = s / m[i][i];
        }
        x
    }

    #[test]
    fn tridiagonal_poisson_solve_is_exact() {
        let n = 64;
        let mut band = BandedMatrix::zeros(n, 1, 1);
        for i in 0..n {
            band.add(i, i, 2.0).unwrap();
            if i > 0 {
                band.add(i, i - 1, -1.0).unwrap();
            }
            if i + 1 < n {
                band.add(i, i + 1, -1.0).unwrap();
            }
        }
        let lu = band.factor().unwrap();
        // Exact solution of the discrete Poisson problem with unit load.
        let mut b = vec![1.0; n];
        lu.solve_in_place(&mut b).unwrap();
        let m = n as f64;
        for (i, v) in b.iter().enumerate() {
            let x = (i + 1) as f64;
            let exact = 0.5 * x * (m + 1.0 - x);
            assert!((v - exact).abs() < 1e-10 * exact.max(1.0));
        }
    }

    #[test]
    fn random_diagonally_dominant_band_matches_dense_solver() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 30 + trial;
            let (kl, ku) = (4, 6);
            let mut band = BandedMatrix::zeros(n, kl, ku);
            let mut dense = vec![vec![0.0; n]; n];
            for i in 0..n {
                let mut offsum = 0.0;
                for j in i.saturating_sub(kl)..(i + ku + 1).min(n) {
                    if j != i {
                        let v: f64 = rng.gen_range(-1.0..1.0);
                        band.add(i, j, v).unwrap();
                        dense[i][j] = v;
                        offsum += v.abs();
                    }
                }
                let d = offsum + rng.gen_range(0.5..1.5);
                band.add(i, i, d).unwrap();
                dense[i][i] = d;
            }
            let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x = rhs.clone();
            band.factor().unwrap().solve_in_place(&mut x).unwrap();
            let reference = dense_solve(&dense, &rhs);
            for (a, b) in x.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-9, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn out_of_band_writes_and_singular_pivots_error() {
        let mut band = BandedMatrix::zeros(4, 1, 1);
        assert!(matches!(
            band.add(0, 3, 1.0),
            Err(BandError::OutsideBand { .. })
        ));
        for i in 0..4 {
            band.add(i, i, 0.0).unwrap();
        }
        assert!(matches!(band.factor(), Err(BandError::ZeroPivot { row: 0 })));
    }
}
