//! Moran's I basis functions, knot selection, the exponential knot
//! covariance, and the MCAR precision structure.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{chol_log_det, cholesky_with_jitter};
use crate::supports::ArealSupport;

const SYMMETRY_TOL: f64 = 1e-12;
const ORTHONORMAL_TOL: f64 = 1e-8;
const TIE_TOL: f64 = 1e-12;

/// Moran's I basis `G` (fine units x r) with the knots that parameterize
/// the covariance of its coefficients.
#[derive(Clone, Debug)]
pub struct BasisSet {
    pub g: DMatrix<f64>,
    pub knots: Vec<[f64; 2]>,
}

impl BasisSet {
    pub fn rank(&self) -> usize {
        self.g.ncols()
    }
}

fn check_symmetric(w: &DMatrix<f64>) -> Result<()> {
    if !w.is_square() {
        return Err(invalid(format!("adjacency is {}x{}, not square", w.nrows(), w.ncols())));
    }
    let n = w.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (w[(i, j)] - w[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(invalid(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// `(I - 11'/n) W (I - 11'/n)`.
pub fn morans_operator(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(w)?;
    let n = w.nrows();
    if n < 2 {
        return Err(invalid("Moran operator needs at least two units"));
    }
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| w.row(i).sum() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|j| w.column(j).sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut m = DMatrix::from_fn(n, n, |i, j| w[(i, j)] - row_means[i] - col_means[j] + grand);
    // exact symmetry regardless of summation order
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// First `r` eigenvectors of the Moran operator, ordered by descending
/// eigenvalue, with the first nonzero component of each made positive.
pub fn moran_basis(w: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    if r == 0 || r + 1 > n {
        return Err(invalid(format!("basis rank {r} must lie in 1..={}", n.saturating_sub(1))));
    }
    let m = morans_operator(w)?;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal eigenvalues keep solver order
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut g = DMatrix::zeros(n, r);
    for (c, &k) in order.iter().take(r).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        v /= v.norm();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-10) {
            if *first < 0.0 {
                v = -v;
            }
        }
        g.set_column(c, &v);
    }
    let gram = g.transpose() * &g;
    let err = (gram - DMatrix::identity(r, r)).abs().max();
    if err > ORTHONORMAL_TOL {
        return Err(Error::Numerical(format!("Moran basis lost orthonormality ({err:e})")));
    }
    Ok(g)
}

/// Greedy farthest-point design: start from the centroid nearest the
/// bounding-box center, then repeatedly add the centroid farthest from the
/// current selection. Exact distance ties are broken with `seed`. Returns
/// the selected indices in ascending order.
pub fn select_knot_indices(centroids: &[[f64; 2]], r: usize, seed: u64) -> Result<Vec<usize>> {
    let n = centroids.len();
    if r == 0 || r > n {
        return Err(invalid(format!("cannot select {r} knots from {n} centroids")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in centroids {
        for d in 0..2 {
            lo[d] = lo[d].min(c[d]);
            hi[d] = hi[d].max(c[d]);
        }
    }
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];

    let pick = |scores: &[f64], rng: &mut ChaCha8Rng, maximize: bool| -> usize {
        let best = scores
            .iter()
            .copied()
            .filter(|s| s.is_finite())
            .fold(if maximize { f64::NEG_INFINITY } else { f64::INFINITY }, |acc, s| {
                if maximize { acc.max(s) } else { acc.min(s) }
            });
        let ties: Vec<usize> = (0..scores.len()).filter(|&k| (scores[k] - best).abs() <= TIE_TOL).collect();
        ties[rng.random_range(0..ties.len())]
    };

    let to_center: Vec<f64> = centroids.iter().map(|c| dist(c, &center)).collect();
    let first = pick(&to_center, &mut rng, false);
    let mut chosen = vec![first];
    let mut min_dist: Vec<f64> = centroids.iter().map(|c| dist(c, &centroids[first])).collect();
    min_dist[first] = f64::NEG_INFINITY;
    while chosen.len() < r {
        let next = pick(&min_dist, &mut rng, true);
        chosen.push(next);
        for k in 0..n {
            if min_dist[k] != f64::NEG_INFINITY {
                min_dist[k] = min_dist[k].min(dist(&centroids[k], &centroids[next]));
            }
        }
        min_dist[next] = f64::NEG_INFINITY;
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Space-filling subset of `r` centroids; see [`select_knot_indices`].
pub fn select_knots(centroids: &[[f64; 2]], r: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    Ok(select_knot_indices(centroids, r, seed)?.into_iter().map(|k| centroids[k]).collect())
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Parameters of `K = sigma2_eta * exp(-phi * ||c_i - c_j||)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub sigma2_eta: f64,
    pub phi: f64,
}

/// Pairwise knot distances, from which `R(phi) = exp(-phi D)` is built.
#[derive(Clone, Debug)]
pub struct KnotGeometry {
    dist: DMatrix<f64>,
}

/// Cholesky factor of the jittered correlation `R(phi) + j I`.
#[derive(Clone, Debug)]
pub struct CorrelationFactor {
    pub phi: f64,
    pub jitter: f64,
    pub chol: Cholesky<f64, Dyn>,
    pub log_det: f64,
}

impl CorrelationFactor {
    /// `x' R^{-1} x`.
    pub fn quad(&self, x: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        let y = l
            .solve_lower_triangular(x)
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

impl KnotGeometry {
    pub fn new(knots: &[[f64; 2]]) -> Result<Self> {
        let r = knots.len();
        if r == 0 {
            return Err(invalid("at least one knot is required"));
        }
        let d = DMatrix::from_fn(r, r, |i, j| dist(&knots[i], &knots[j]));
        for i in 0..r {
            for j in (i + 1)..r {
                if d[(i, j)] == 0.0 {
                    return Err(invalid(format!("knots {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { dist: d })
    }

    pub fn len(&self) -> usize {
        self.dist.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.nrows() == 0
    }

    /// Un-jittered `exp(-phi D)`.
    pub fn correlation(&self, phi: f64) -> DMatrix<f64> {
        self.dist.map(|d| (-phi * d).exp())
    }

    pub fn factor(&self, phi: f64) -> Result<CorrelationFactor> {
        if !(phi >= 0.0) || !phi.is_finite() {
            return Err(invalid(format!("phi must be a non-negative number, got {phi}")));
        }
        let (chol, jitter) = cholesky_with_jitter(&self.correlation(phi), 1.0)?;
        let log_det = chol_log_det(&chol);
        Ok(CorrelationFactor { phi, jitter, chol, log_det })
    }
}

/// `sigma2_eta * exp(-phi ||c_i - c_j||)` plus the smallest relative jitter
/// that makes it Cholesky-factorizable.
pub fn exp_covariance(knots: &[[f64; 2]], params: CovarianceParams) -> Result<DMatrix<f64>> {
    if !(params.sigma2_eta > 0.0) {
        return Err(invalid(format!("sigma2_eta must be positive, got {}", params.sigma2_eta)));
    }
    let geo = KnotGeometry::new(knots)?;
    let f = geo.factor(params.phi)?;
    let mut k = geo.correlation(params.phi);
    for i in 0..k.nrows() {
        k[(i, i)] += f.jitter;
    }
    Ok(k * params.sigma2_eta)
}

/// Adjacency `W` and degrees `D` of a CAR prior, with the spectrum of
/// `D^{-1/2} W D^{-1/2}` cached for log-determinants.
#[derive(Clone, Debug)]
pub struct CarStructure {
    neighbors: Vec<Vec<usize>>,
    degrees: Vec<f64>,
    scaled_eigs: Vec<f64>,
    log_det_d: f64,
}

impl CarStructure {
    pub fn new(support: &ArealSupport) -> Result<Self> {
        let n = support.len();
        let degrees = support.degrees();
        if let Some(k) = degrees.iter().position(|&d| d == 0.0) {
            return Err(invalid(format!(
                "unit `{}` has no neighbours; D - rho W would be singular",
                support.ids()[k]
            )));
        }
        let neighbors: Vec<Vec<usize>> = (0..n).map(|i| support.neighbors(i).to_vec()).collect();
        let scaled = DMatrix::from_fn(n, n, |i, j| {
            if neighbors[i].binary_search(&j).is_ok() {
                1.0 / (degrees[i] * degrees[j]).sqrt()
            } else {
                0.0
            }
        });
        let scaled_eigs = SymmetricEigen::new(scaled).eigenvalues.iter().copied().collect();
        let log_det_d = degrees.iter().map(|d| d.ln()).sum();
        Ok(Self { neighbors, degrees, scaled_eigs, log_det_d })
    }

    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// `log det(D - rho W)`, or an error when the matrix is not positive definite.
    pub fn log_det(&self, rho: f64) -> Result<f64> {
        let mut acc = self.log_det_d;
        for &lam in &self.scaled_eigs {
            let f = 1.0 - rho * lam;
            if !(f > 0.0) {
                return Err(invalid(format!("D - rho W is not positive definite at rho = {rho}")));
            }
            acc += f.ln();
        }
        Ok(acc)
    }

    /// `x' D y` and `x' W y`, from which `x' (D - rho W) y` follows for any rho.
    pub fn bilinear_parts(&self, x: &[f64], y: &[f64]) -> (f64, f64) {
        let mut d = 0.0;
        let mut w = 0.0;
        for i in 0..self.len() {
            d += self.degrees[i] * x[i] * y[i];
            let s: f64 = self.neighbors[i].iter().map(|&j| y[j]).sum();
            w += x[i] * s;
        }
        (d, w)
    }

    pub fn dense(&self, rho: f64) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.degrees[i];
            for &j in &self.neighbors[i] {
                m[(i, j)] -= rho;
            }
        }
        m
    }

    /// Confirms `D - rho W` is positive definite just inside the upper bound.
    pub fn check_rho_support(&self, b_rho: f64) -> Result<()> {
        self.log_det(b_rho - 1e-6).map(|_| ())
    }
}

/// Precision `Sigma^{-1} (x) (D - rho W)` of the MCAR prior, kept in factored
/// form. `psi` is variable-major: all units of variable 1, then variable 2.
/// With one variable this is the ordinary CAR precision `(D - rho W) / nu2`.
#[derive(Clone, Debug)]
pub struct McarPrecision<'a> {
    pub car: &'a CarStructure,
    pub rho: f64,
    /// `Sigma^{-1}` (1x1 or 2x2, row-major).
    pub sigma_inv: Vec<f64>,
    pub vars: usize,
}

/// `Sigma^{-1} = (1/nu2) T(tau)^{-1}` for `vars` variables.
pub fn sigma_inverse(tau: f64, nu2: f64, vars: usize) -> Result<Vec<f64>> {
    if !(nu2 > 0.0) {
        return Err(invalid(format!("nu2 must be positive, got {nu2}")));
    }
    match vars {
        1 => Ok(vec![1.0 / nu2]),
        2 => {
            if !(tau.abs() < 1.0) {
                return Err(invalid(format!("|tau| must be below 1, got {tau}")));
            }
            let s = 1.0 / (nu2 * (1.0 - tau * tau));
            Ok(vec![s, -tau * s, -tau * s, s])
        }
        _ => Err(invalid("MCAR supports one or two variables")),
    }
}

pub fn mcar_precision(car: &CarStructure, rho: f64, tau: f64, nu2: f64) -> Result<McarPrecision<'_>> {
    mcar_precision_vars(car, rho, tau, nu2, 2)
}

pub fn mcar_precision_vars(
    car: &CarStructure,
    rho: f64,
    tau: f64,
    nu2: f64,
    vars: usize,
) -> Result<McarPrecision<'_>> {
    let sigma_inv = sigma_inverse(tau, nu2, vars)?;
    car.log_det(rho)?;
    Ok(McarPrecision { car, rho, sigma_inv, vars })
}

impl McarPrecision<'_> {
    /// `psi' (T^{-1}/nu2 (x) (D - rho W)) psi`.
    pub fn quadratic_form(&self, psi: &[f64]) -> f64 {
        let n = self.car.len();
        assert_eq!(psi.len(), n * self.vars);
        let mut q = 0.0;
        for a in 0..self.vars {
            for b in 0..self.vars {
                let s = self.sigma_inv[a * self.vars + b];
                if s == 0.0 {
                    continue;
                }
                let (d, w) = self.car.bilinear_parts(&psi[a * n..(a + 1) * n], &psi[b * n..(b + 1) * n]);
                q += s * (d - self.rho * w);
            }
        }
        q
    }

    /// `n log det(Sigma^{-1}) + vars * log det(D - rho W)`.
    pub fn log_det(&self) -> f64 {
        let n = self.car.len() as f64;
        let log_det_sigma_inv = match self.vars {
            1 => self.sigma_inv[0].ln(),
            _ => (self.sigma_inv[0] * self.sigma_inv[3] - self.sigma_inv[1] * self.sigma_inv[2]).ln(),
        };
        n * log_det_sigma_inv + self.vars as f64 * self.car.log_det(self.rho).expect("checked at construction")
    }

    /// Dense Kronecker product, for small problems and tests.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let s = DMatrix::from_row_slice(self.vars, self.vars, &self.sigma_inv);
        s.kronecker(&self.car.dense(self.rho))
    }
}
