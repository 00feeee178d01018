//! Dense symmetric linear algebra: sample statistics, a cyclic Jacobi
//! eigensolver, symmetric matrix roots, the symmetric-definite generalized
//! eigenproblem and ridge-regularized SPD solves.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-8;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Square symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Checks squareness, finiteness and symmetry to `1e-9` relative to the
    /// largest entry.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::dims(format!(
                "symmetric matrix must be square, got {:?}",
                m.shape()
            )));
        }
        if m.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("matrix has non-finite entries"));
        }
        let scale = m.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let n = m.rows();
        for i in 0..n {
            for j in i + 1..n {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::invalid(format!(
                        "matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(SymMatrix(m))
    }

    /// Symmetrizes `m` as `(m + mᵀ)/2`.
    pub(crate) fn symmetrize(m: Matrix) -> Self {
        let n = m.rows();
        debug_assert_eq!(n, m.cols());
        SymMatrix(Matrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)])))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(Matrix::identity(n))
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        SymMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)]).sum()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.frobenius_norm()
    }
}

/// Ridge added to a matrix diagonal before inversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    /// `factor · trace(A) / Q`.
    Relative(f64),
    Absolute(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-6)
    }
}

impl Ridge {
    pub fn resolve(self, a: &SymMatrix) -> f64 {
        match self {
            Ridge::Relative(f) => f * (a.trace() / a.dim().max(1) as f64).abs(),
            Ridge::Absolute(r) => r,
        }
    }
}

/// Mean and population covariance of a sample set.
#[derive(Clone, Debug)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
    pub count: usize,
}

/// Column means and `(1/M)·Σ (xᵢ−μ)(xᵢ−μ)ᵀ`.
pub fn mean_cov(m: &Matrix) -> Result<Stats> {
    if m.rows() < 2 {
        return Err(Error::invalid(format!(
            "covariance needs at least 2 samples, got {}",
            m.rows()
        )));
    }
    let mean = m.column_means();
    let cov = centered_cross_cov(m, &mean, m, &mean)?;
    Ok(Stats {
        mean,
        cov: SymMatrix::symmetrize(cov),
        count: m.rows(),
    })
}

/// `(1/M)·Σ (aᵢ−μa)(bᵢ−μb)ᵀ`, shape `cols(a) × cols(b)`.
pub fn cross_cov(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() < 2 {
        return Err(Error::invalid("cross-covariance needs at least 2 samples"));
    }
    centered_cross_cov(a, &a.column_means(), b, &b.column_means())
}

fn centered_cross_cov(a: &Matrix, ma: &[f64], b: &Matrix, mb: &[f64]) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::dims(format!("{} vs {} samples", a.rows(), b.rows())));
    }
    let (p, q) = (a.cols(), b.cols());
    let mut acc = Matrix::zeros(p, q);
    let mut da = vec![0.0; p];
    let mut db = vec![0.0; q];
    for (ra, rb) in a.row_iter().zip(b.row_iter()) {
        for ((d, v), m) in da.iter_mut().zip(ra).zip(ma) {
            *d = v - m;
        }
        for ((d, v), m) in db.iter_mut().zip(rb).zip(mb) {
            *d = v - m;
        }
        for (i, &di) in da.iter().enumerate() {
            if di == 0.0 {
                continue;
            }
            for (o, &dj) in acc.row_mut(i).iter_mut().zip(&db) {
                *o += di * dj;
            }
        }
    }
    Ok(acc.scale(1.0 / a.rows() as f64))
}

/// Eigen-decomposition with ascending eigenvalues; column `k` of `vectors`
/// pairs with `values[k]`.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl Eigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.vectors.rows())
            .map(|i| self.vectors[(i, k)])
            .collect()
    }
}

/// Cyclic Jacobi eigensolver. Sweeps until the off-diagonal Frobenius norm
/// drops to `1e-12·‖A‖_F`, for at most 100 sweeps.
pub fn eigh(a: &SymMatrix) -> Result<Eigen> {
    let n = a.dim();
    let mut m = a.as_matrix().clone();
    let mut v = Matrix::identity(n);
    let threshold = JACOBI_TOL * a.frobenius_norm();

    let off_norm = |m: &Matrix| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&m) <= threshold;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;

                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        converged = off_norm(&m) <= threshold;
    }
    if !converged {
        return Err(Error::numerical(format!(
            "Jacobi iteration did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, k| v[(r, order[k])]);
    Ok(Eigen { values, vectors })
}

/// `V · diag(f(λ)) · Vᵀ`.
fn spectral_map(e: &Eigen, f: impl Fn(f64) -> f64) -> SymMatrix {
    let n = e.values.len();
    let fl: Vec<f64> = e.values.iter().map(|&l| f(l)).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = fl
                .iter()
                .enumerate()
                .map(|(k, f)| e.vectors[(i, k)] * f * e.vectors[(j, k)])
                .sum();
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    SymMatrix(out)
}

fn psd_floor(a: &SymMatrix) -> f64 {
    -PSD_TOL * a.trace().abs()
}

/// Symmetric inverse square root `V·diag(1/√(λ+ridge))·Vᵀ`.
pub fn inv_sqrt(a: &SymMatrix, ridge: f64) -> Result<SymMatrix> {
    let e = eigh(a)?;
    let floor = psd_floor(a);
    if let Some(&l) = e.values.iter().find(|&&l| l < floor) {
        return Err(Error::numerical(format!(
            "matrix is not positive semidefinite (eigenvalue {l:e})"
        )));
    }
    let smallest = e.values.first().copied().unwrap_or(1.0).max(0.0) + ridge;
    let largest = e.values.last().copied().unwrap_or(1.0).max(0.0) + ridge;
    if smallest <= 0.0 || smallest <= f64::EPSILON * largest {
        return Err(Error::numerical(format!(
            "matrix is singular after ridge {ridge:e} (smallest eigenvalue {smallest:e})"
        )));
    }
    Ok(spectral_map(&e, |l| 1.0 / (l.max(0.0) + ridge).sqrt()))
}

/// Symmetric square root of a PSD matrix; tiny negative eigenvalues from
/// round-off are clamped to zero.
pub fn sqrt_psd(a: &SymMatrix) -> Result<SymMatrix> {
    let e = eigh(a)?;
    let floor = psd_floor(a);
    if let Some(&l) = e.values.iter().find(|&&l| l < floor) {
        return Err(Error::numerical(format!(
            "matrix is not positive semidefinite (eigenvalue {l:e})"
        )));
    }
    Ok(spectral_map(&e, |l| l.max(0.0).sqrt()))
}

/// Solves `A·w = λ·B·w` for symmetric `A` and PSD `B` by whitening with
/// `W = (B + ridge·I)^{-1/2}`, diagonalizing `W·A·W` and mapping the
/// eigenvectors back through `W`. Returned vectors satisfy
/// `wᵀ(B + ridge·I)w = 1`.
pub fn generalized_eigh(a: &SymMatrix, b: &SymMatrix, ridge: f64) -> Result<Eigen> {
    if a.dim() != b.dim() {
        return Err(Error::dims(format!(
            "generalized eigenproblem with {}x{} and {}x{}",
            a.dim(),
            a.dim(),
            b.dim(),
            b.dim()
        )));
    }
    let w = inv_sqrt(b, ridge)?;
    let wa = w.as_matrix().matmul(a.as_matrix())?;
    let c = SymMatrix::symmetrize(wa.matmul(w.as_matrix())?);
    let e = eigh(&c)?;
    let vectors = w.as_matrix().matmul(&e.vectors)?;
    Ok(Eigen {
        values: e.values,
        vectors,
    })
}

/// Solves `(A + ridge·I)·X = rhs` by Cholesky factorization.
pub fn solve_spd(a: &SymMatrix, rhs: &Matrix, ridge: f64) -> Result<Matrix> {
    let l = cholesky(a, ridge)?;
    if rhs.rows() != a.dim() {
        return Err(Error::dims(format!(
            "right-hand side has {} rows, system has {}",
            rhs.rows(),
            a.dim()
        )));
    }
    let n = a.dim();
    let mut x = rhs.clone();
    for col in 0..rhs.cols() {
        let mut y: Vec<f64> = (0..n).map(|i| rhs[(i, col)]).collect();
        forward_substitute(&l, &mut y);
        // back substitution with Lᵀ
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in 0..n {
            x[(i, col)] = y[i];
        }
    }
    Ok(x)
}

/// Lower-triangular `L` with `L·Lᵀ = A + ridge·I`.
pub fn cholesky(a: &SymMatrix, ridge: f64) -> Result<Matrix> {
    let n = a.dim();
    let mut l = Matrix::zeros(n, n);
    let scale = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max) + ridge.abs();
    for j in 0..n {
        let mut d = a.get(j, j) + ridge - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if d.is_nan() || d <= f64::EPSILON * scale || d <= 0.0 {
            return Err(Error::numerical(format!(
                "matrix is singular or indefinite after ridge {ridge:e} (pivot {j})"
            )));
        }
        d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let s = a.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// In-place solve of `L·y = b` for lower-triangular `L`.
pub fn forward_substitute(l: &Matrix, b: &mut [f64]) {
    for i in 0..b.len() {
        let s = b[i] - dot(&l.row(i)[..i], &b[..i]);
        b[i] = s / l[(i, i)];
    }
}
