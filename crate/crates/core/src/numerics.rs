//! Seeded random streams and the dense linear-algebra primitives used by the
//! rest of the crate.
//!
//! Factorizations are delegated to `nalgebra`; this module pins down the
//! contracts (symmetry checks, descending eigenvalue order, error kinds) and
//! the tolerances they are tested against.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Numerical tolerances, collected in one place.
pub mod tol {
    /// Maximum absolute asymmetry accepted by the symmetric routines.
    pub const SYMMETRY: f64 = 1e-12;
    /// Relative Frobenius error of `L L'` against the factored matrix.
    pub const CHOLESKY_ROUNDTRIP: f64 = 1e-9;
    /// Max absolute entry deviation of `P'P` from the identity.
    pub const ORTHONORMALITY: f64 = 1e-10;
    /// Relative Frobenius error of the spectral reconstruction.
    pub const EIGEN_RECONSTRUCTION: f64 = 1e-8;
    /// `||(L L') B - I||_F / sqrt(n)` for the auxiliary-Gaussian precomputation.
    pub const AG_INVERSE: f64 = 1e-7;
    /// Normalization slack of exact probability tables.
    pub const PMF_SUM: f64 = 1e-10;
    /// Normalization slack of per-site conditional probabilities.
    pub const CONDITIONAL_SUM: f64 = 1e-12;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {pivot} failed)")]
    NotPositiveDefinite { pivot: usize },
    #[error("symmetric eigensolver did not converge")]
    ConvergenceFailure,
    #[error("matrix is not symmetric: |M[{i},{j}] - M[{j},{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("empty matrix")]
    Empty,
    #[error("non-finite log-weight at index {index}: {value}")]
    InvalidWeight { index: usize, value: f64 },
}

/// Reserved stream identifiers.
///
/// Every consumer of randomness draws from its own `(master_seed, stream_id)`
/// stream so results do not depend on scheduling or thread count.
pub mod streams {
    const REPLICA_BASE: u64 = 1 << 40;
    const REPLICA_SET_STRIDE: u64 = 1 << 20;
    const EXCHANGE_SLOT: u64 = REPLICA_SET_STRIDE - 1;

    /// Stream used to generate a random coupling matrix.
    pub const COUPLING: u64 = 1 << 60;

    /// Stream of the `chain`-th independent chain.
    pub fn chain(chain: usize) -> u64 {
        chain as u64
    }

    /// Stream of replica `replica` inside tempered replica set `set`.
    pub fn replica(set: usize, replica: usize) -> u64 {
        assert!((replica as u64) < EXCHANGE_SLOT, "replica index too large");
        REPLICA_BASE + set as u64 * REPLICA_SET_STRIDE + replica as u64
    }

    /// Stream of the exchange coordinator of tempered replica set `set`.
    pub fn exchange(set: usize) -> u64 {
        REPLICA_BASE + set as u64 * REPLICA_SET_STRIDE + EXCHANGE_SLOT
    }
}

/// A reproducible random stream identified by `(master_seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id mapped onto the cipher's stream
/// counter, so distinct ids give non-overlapping sequences.
#[derive(Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform index in `0..n`.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.rng.sample(StandardNormal);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: DVector<f64>,
    /// Column `j` is the unit eigenvector of `eigenvalues[j]`.
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `sum_j mu_j p_j p_j'`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.eigenvectors * DMatrix::from_diagonal(&self.eigenvalues);
        scaled * self.eigenvectors.transpose()
    }
}

pub fn check_symmetric(m: &DMatrix<f64>, tolerance: f64) -> Result<(), NumericsError> {
    let (rows, cols) = m.shape();
    if rows != cols {
        return Err(NumericsError::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Err(NumericsError::Empty);
    }
    for j in 0..cols {
        for i in (j + 1)..rows {
            let gap = (m[(i, j)] - m[(j, i)]).abs();
            // `!(gap <= tol)` also rejects NaN.
            if !(gap <= tolerance) {
                return Err(NumericsError::NotSymmetric { i, j, gap });
            }
        }
    }
    Ok(())
}

/// Lower-triangular `L` with `L L' = m`.
pub fn cholesky_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    check_symmetric(m, tol::SYMMETRY)?;
    let chol = nalgebra::Cholesky::new(m.clone()).ok_or_else(|| NumericsError::NotPositiveDefinite {
        pivot: first_failing_pivot(m),
    })?;
    Ok(chol.unpack())
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky
/// factor; the result is symmetrized exactly.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    check_symmetric(m, tol::SYMMETRY)?;
    let chol = nalgebra::Cholesky::new(m.clone()).ok_or_else(|| NumericsError::NotPositiveDefinite {
        pivot: first_failing_pivot(m),
    })?;
    let inv = chol.inverse();
    Ok(symmetrize(&inv))
}

/// `(m + m') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

// Only used to enrich the error message.
fn first_failing_pivot(m: &DMatrix<f64>) -> usize {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return j;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    n
}

const EIGEN_MAX_ITERATIONS: usize = 10_000;

pub fn sym_eigen(m: &DMatrix<f64>) -> Result<SpectralDecomposition, NumericsError> {
    check_symmetric(m, tol::SYMMETRY)?;
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, EIGEN_MAX_ITERATIONS)
        .ok_or(NumericsError::ConvergenceFailure)?;
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&j| eig.eigenvalues[j]));
    let mut eigenvectors = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

pub fn standard_normal_vec(stream: &mut RngStream, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    stream.fill_standard_normal(&mut out);
    out
}

/// Draws index `a` with probability `exp(logw[a] - logsumexp(logw))`.
pub fn categorical_from_logweights(stream: &mut RngStream, logw: &[f64]) -> Result<usize, NumericsError> {
    assert!(!logw.is_empty(), "categorical needs at least one category");
    if let Some((index, &value)) = logw.iter().enumerate().find(|(_, w)| !w.is_finite()) {
        return Err(NumericsError::InvalidWeight { index, value });
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logw.iter().map(|w| (w - max).exp()).sum();
    let target = stream.uniform() * total;
    let mut acc = 0.0;
    for (a, w) in logw.iter().enumerate() {
        acc += (w - max).exp();
        if target < acc {
            return Ok(a);
        }
    }
    // Rounding can leave `target` a hair above the accumulated total.
    Ok(last_positive(logw, max))
}

fn last_positive(logw: &[f64], max: f64) -> usize {
    logw.iter()
        .rposition(|w| (w - max).exp() > 0.0)
        .unwrap_or(logw.len() - 1)
}

/// `log(sum(exp(v)))` with max-subtraction.
pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}
