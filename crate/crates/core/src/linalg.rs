//! Small dense and banded factorization helpers shared by the basis and
//! sampler modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter added to the diagonal before the first factorization attempt.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Cholesky of `a + jitter * scale * I`, escalating the jitter tenfold from
/// [`JITTER_START`] up to [`JITTER_MAX`]. Returns the factor and the relative
/// jitter that succeeded.
pub fn cholesky_with_jitter(a: &DMatrix<f64>, scale: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter * scale;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "matrix of order {} is not positive definite even with jitter {:e}",
        a.nrows(),
        JITTER_MAX
    )))
}

/// `2 * sum(log L_ii)` for a dense Cholesky factor.
pub fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Solves `L' x = z` for a dense lower Cholesky factor `L`.
pub fn chol_solve_upper(c: &Cholesky<f64, Dyn>, z: &DVector<f64>) -> DVector<f64> {
    let l = c.l();
    l.transpose()
        .solve_upper_triangular(z)
        .expect("Cholesky factor has a positive diagonal")
}

/// Symmetric positive-definite matrix in lower band storage.
#[derive(Clone, Debug)]
pub struct BandedSpd {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        Self { n, bw, band: vec![0.0; n * (bw + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    /// Adds `v` to entry (i, j) and, implicitly, (j, i).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) outside bandwidth {}", self.bw);
        let k = self.idx(i, j);
        self.band[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.band[self.idx(i, j)]
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let a = self.band[self.idx(i, j)];
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// In-place banded Cholesky. Fails if a pivot is not strictly positive.
    pub fn cholesky(mut self) -> Result<BandedCholesky> {
        let n = self.n;
        let bw = self.bw;
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = self.band[self.idx(i, j)];
                for k in lo..j {
                    s -= self.band[self.idx(i, k)] * self.band[self.idx(j, k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Numerical(format!(
                            "banded Cholesky pivot {i} is {s:e}"
                        )));
                    }
                    let k = self.idx(i, i);
                    self.band[k] = s.sqrt();
                } else {
                    let d = self.band[self.idx(j, j)];
                    let k = self.idx(i, j);
                    self.band[k] = s / d;
                }
            }
        }
        Ok(BandedCholesky { l: self })
    }
}

/// Lower Cholesky factor of a [`BandedSpd`] matrix.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    l: BandedSpd,
}

impl BandedCholesky {
    pub fn dim(&self) -> usize {
        self.l.n
    }

    pub fn log_det(&self) -> f64 {
        (0..self.l.n).map(|i| self.l.get(i, i).ln()).sum::<f64>() * 2.0
    }

    /// Dense copy of `L`.
    pub fn lower_dense(&self) -> DMatrix<f64> {
        let n = self.l.n;
        DMatrix::from_fn(n, n, |i, j| if i >= j { self.l.get(i, j) } else { 0.0 })
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let l = &self.l;
        let mut y = b.to_vec();
        for i in 0..l.n {
            let lo = i.saturating_sub(l.bw);
            let mut s = y[i];
            for k in lo..i {
                s -= l.band[l.idx(i, k)] * y[k];
            }
            y[i] = s / l.band[l.idx(i, i)];
        }
        y
    }

    /// Solves `L' x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        let l = &self.l;
        let n = l.n;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let hi = (i + l.bw).min(n - 1);
            let mut s = x[i];
            for k in (i + 1)..=hi {
                s -= l.band[l.idx(k, i)] * x[k];
            }
            x[i] = s / l.band[l.idx(i, i)];
        }
        x
    }

    /// Solves `(L L') x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_banded(n: usize, bw: usize, seed: u64) -> BandedSpd {
        // diagonally dominant with deterministic pseudo-random off-diagonals
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let mut a = BandedSpd::zeros(n, bw);
        for i in 0..n {
            for j in i.saturating_sub(bw)..i {
                a.add(i, j, next());
            }
            a.add(i, i, 2.0 * bw as f64 + 1.0);
        }
        a
    }

    #[test]
    fn banded_cholesky_matches_dense() {
        let a = random_banded(30, 4, 7);
        let dense = a.to_dense();
        let chol = a.clone().cholesky().unwrap();
        let dense_chol = Cholesky::new(dense.clone()).unwrap();
        assert!((chol.log_det() - chol_log_det(&dense_chol)).abs() < 1e-10);

        let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let x = chol.solve(&b);
        let x_dense = dense_chol.solve(&DVector::from_vec(b.clone()));
        for i in 0..30 {
            assert!((x[i] - x_dense[i]).abs() < 1e-12);
        }
        let back = a.mul_vec(&x);
        for i in 0..30 {
            assert!((back[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn banded_upper_solve_matches_dense_factor() {
        let a = random_banded(12, 3, 3);
        let chol = a.clone().cholesky().unwrap();
        let dense_chol = Cholesky::new(a.to_dense()).unwrap();
        let z: Vec<f64> = (0..12).map(|i| 0.3 * i as f64 - 1.0).collect();
        let x = chol.solve_upper(&z);
        let x_dense = chol_solve_upper(&dense_chol, &DVector::from_vec(z));
        for i in 0..12 {
            assert!((x[i] - x_dense[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_pd_band_is_rejected() {
        let mut a = BandedSpd::zeros(3, 1);
        a.add(0, 0, 1.0);
        a.add(1, 0, 2.0);
        a.add(1, 1, 1.0);
        a.add(2, 2, 1.0);
        assert!(matches!(a.cholesky(), Err(Error::Numerical(_))));
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        let ones = DMatrix::from_element(3, 3, 1.0);
        let (_, jitter) = cholesky_with_jitter(&ones, 1.0).unwrap();
        assert!((JITTER_START..=JITTER_MAX).contains(&jitter));
    }
}
