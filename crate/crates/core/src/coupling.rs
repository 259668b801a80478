//! Coupling-matrix generators and the one-time preprocessing (diagonal shift,
//! Cholesky factor of the inverse, spectral truncation) consumed by the
//! auxiliary-Gaussian samplers.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, tol, NumericsError, RngStream, SpectralDecomposition};

/// Relative jitter added on top of `|lambda_min|` by default.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Default eigenvalue truncation threshold for the low-rank sampler.
pub const DEFAULT_EPSILON: f64 = 1e-10;
const JITTER_ESCALATIONS: usize = 2;
const JITTER_GROWTH: f64 = 10.0;

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("generated graph has no edges; average-degree scaling is undefined")]
    DegenerateGraph,
    #[error("coupling matrix is not exactly symmetric at ({i}, {j})")]
    Asymmetric { i: usize, j: usize },
    #[error("coupling matrix has a non-finite entry at ({i}, {j})")]
    NonFinite { i: usize, j: usize },
    #[error("could not make B positive definite after {attempts} jitter levels: {source}")]
    ShiftFailed {
        attempts: usize,
        #[source]
        source: NumericsError,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("malformed coupling file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Lattice2d,
    CurieWeiss,
    ErdosRenyi,
    Sk,
    Hopfield,
    Custom,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Lattice2d => "lattice2d",
            Family::CurieWeiss => "curie_weiss",
            Family::ErdosRenyi => "erdos_renyi",
            Family::Sk => "sk",
            Family::Hopfield => "hopfield",
            Family::Custom => "custom",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = CouplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "lattice2d" => Family::Lattice2d,
            "curie_weiss" => Family::CurieWeiss,
            "erdos_renyi" => Family::ErdosRenyi,
            "sk" => Family::Sk,
            "hopfield" => Family::Hopfield,
            "custom" => Family::Custom,
            other => return Err(CouplingError::Parse(format!("unknown family `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalConvention {
    Zeroed,
    Retained,
}

impl DiagonalConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            DiagonalConvention::Zeroed => "zeroed",
            DiagonalConvention::Retained => "retained",
        }
    }
}

impl FromStr for DiagonalConvention {
    type Err = CouplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zeroed" => Ok(DiagonalConvention::Zeroed),
            "retained" => Ok(DiagonalConvention::Retained),
            other => Err(CouplingError::Parse(format!("unknown diagonal convention `{other}`"))),
        }
    }
}

/// Edge weight of the lattice generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeScale {
    /// Unit weights (plain adjacency matrix).
    #[default]
    None,
    /// Weights `1 / average degree`.
    AverageDegree,
}

/// Symmetric coupling matrix `A` together with how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    entries: DMatrix<f64>,
    family: Family,
    diagonal: DiagonalConvention,
}

impl CouplingMatrix {
    /// Wraps a user-supplied matrix; it must be square, finite and exactly
    /// symmetric. The diagonal convention is inferred from the entries.
    pub fn custom(entries: DMatrix<f64>) -> Result<Self, CouplingError> {
        Self::with_family(entries, Family::Custom)
    }

    /// [`CouplingMatrix::custom`] from row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, CouplingError> {
        let n = rows.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(CouplingError::InvalidParameter(format!(
                "row {i} has {} entries, expected {n}",
                r.len()
            )));
        }
        Self::custom(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub(crate) fn with_family(entries: DMatrix<f64>, family: Family) -> Result<Self, CouplingError> {
        let (rows, cols) = entries.shape();
        if rows != cols || rows == 0 {
            return Err(CouplingError::InvalidParameter(format!(
                "coupling matrix must be square and non-empty, got {rows}x{cols}"
            )));
        }
        for j in 0..cols {
            for i in 0..rows {
                if !entries[(i, j)].is_finite() {
                    return Err(CouplingError::NonFinite { i, j });
                }
                if entries[(i, j)] != entries[(j, i)] {
                    return Err(CouplingError::Asymmetric { i, j });
                }
            }
        }
        let diagonal = if entries.diagonal().iter().all(|&d| d == 0.0) {
            DiagonalConvention::Zeroed
        } else {
            DiagonalConvention::Retained
        };
        Ok(Self {
            entries,
            family,
            diagonal,
        })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn diagonal_convention(&self) -> DiagonalConvention {
        self.diagonal
    }

    /// Sum of the diagonal; a configuration-independent offset of the
    /// Hamiltonian when the diagonal is retained.
    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    /// First strictly negative entry, if any.
    pub fn first_negative(&self) -> Option<(usize, usize, f64)> {
        let n = self.n();
        for j in 0..n {
            for i in 0..n {
                let v = self.entries[(i, j)];
                if v < 0.0 {
                    return Some((i, j, v));
                }
            }
        }
        None
    }

    /// The same matrix with `c` added to every diagonal entry.
    pub fn shifted(&self, c: f64) -> Self {
        let mut entries = self.entries.clone();
        for i in 0..self.n() {
            entries[(i, i)] += c;
        }
        Self::with_family(entries, self.family).expect("diagonal shift keeps symmetry")
    }

    pub fn spectrum(&self) -> Result<SpectralDecomposition, CouplingError> {
        Ok(numerics::sym_eigen(&self.entries)?)
    }
}

/// Adjacency of a `side x side` grid without wraparound; node `(r, c)` has
/// index `r * side + c`.
pub fn lattice_2d(side: usize, scale: LatticeScale) -> Result<CouplingMatrix, CouplingError> {
    if side < 2 {
        return Err(CouplingError::InvalidParameter(format!(
            "lattice side must be >= 2, got {side}"
        )));
    }
    let n = side * side;
    let edges = 2 * side * (side - 1);
    let weight = match scale {
        LatticeScale::None => 1.0,
        LatticeScale::AverageDegree => n as f64 / (2 * edges) as f64,
    };
    let mut a = DMatrix::<f64>::zeros(n, n);
    for r in 0..side {
        for c in 0..side {
            let i = r * side + c;
            if c + 1 < side {
                a[(i, i + 1)] = weight;
                a[(i + 1, i)] = weight;
            }
            if r + 1 < side {
                a[(i, i + side)] = weight;
                a[(i + side, i)] = weight;
            }
        }
    }
    CouplingMatrix::with_family(a, Family::Lattice2d)
}

/// Complete graph with off-diagonal entries `1/n`.
pub fn curie_weiss(n: usize) -> Result<CouplingMatrix, CouplingError> {
    if n < 2 {
        return Err(CouplingError::InvalidParameter(format!(
            "curie-weiss needs n >= 2, got {n}"
        )));
    }
    let w = 1.0 / n as f64;
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { w });
    CouplingMatrix::with_family(a, Family::CurieWeiss)
}

/// Erdős–Rényi graph `G(n, p)` scaled by its realized average degree.
pub fn erdos_renyi(n: usize, p: f64, stream: &mut RngStream) -> Result<CouplingMatrix, CouplingError> {
    if n < 2 {
        return Err(CouplingError::InvalidParameter(format!(
            "erdos-renyi needs n >= 2, got {n}"
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(CouplingError::InvalidParameter(format!(
            "edge probability must be in (0, 1], got {p}"
        )));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if stream.uniform() < p {
                edges.push((i, j));
            }
        }
    }
    if edges.is_empty() {
        return Err(CouplingError::DegenerateGraph);
    }
    let avg_degree = 2.0 * edges.len() as f64 / n as f64;
    let w = 1.0 / avg_degree;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (i, j) in edges {
        a[(i, j)] = w;
        a[(j, i)] = w;
    }
    CouplingMatrix::with_family(a, Family::ErdosRenyi)
}

/// Sherrington–Kirkpatrick couplings: upper triangle i.i.d. `N(0, 1/n)`.
pub fn sk(n: usize, stream: &mut RngStream) -> Result<CouplingMatrix, CouplingError> {
    if n < 2 {
        return Err(CouplingError::InvalidParameter(format!("sk needs n >= 2, got {n}")));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = stream.standard_normal() * scale;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    CouplingMatrix::with_family(a, Family::Sk)
}

/// Hopfield couplings `eta' eta / max(n, d)` with `eta` a `d x n` Rademacher
/// matrix. The diagonal is kept.
pub fn hopfield(n: usize, d: usize, stream: &mut RngStream) -> Result<CouplingMatrix, CouplingError> {
    if n < 2 || d < 1 {
        return Err(CouplingError::InvalidParameter(format!(
            "hopfield needs n >= 2 and d >= 1, got n={n}, d={d}"
        )));
    }
    // Row-major d x n patterns.
    let eta: Vec<i32> = (0..d * n)
        .map(|_| if stream.uniform() < 0.5 { 1 } else { -1 })
        .collect();
    let scale = 1.0 / n.max(d) as f64;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let dot: i32 = (0..d).map(|k| eta[k * n + i] * eta[k * n + j]).sum();
            let v = dot as f64 * scale;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    CouplingMatrix::with_family(a, Family::Hopfield)
}

/// Precomputation of the regular auxiliary-Gaussian sampler.
#[derive(Debug, Clone)]
pub struct AgPrecomp {
    /// `beta (A + lambda I)`.
    pub b: DMatrix<f64>,
    pub lambda: f64,
    /// Smallest eigenvalue of `A`.
    pub lambda_min: f64,
    /// Lower-triangular `L` with `L L' = B^{-1}`.
    pub chol_binv: DMatrix<f64>,
    pub beta: f64,
    /// Jitter actually used after any escalation.
    pub jitter: f64,
}

impl AgPrecomp {
    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    /// `||(L L') B - I||_F / sqrt(n)`.
    pub fn inverse_residual(&self) -> f64 {
        let n = self.n();
        let binv = &self.chol_binv * self.chol_binv.transpose();
        numerics::frobenius(&(binv * &self.b - DMatrix::<f64>::identity(n, n))) / (n as f64).sqrt()
    }
}

pub fn precompute_ag(a: &CouplingMatrix, beta: f64, jitter: f64) -> Result<AgPrecomp, CouplingError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(CouplingError::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if !(jitter > 0.0) || !jitter.is_finite() {
        return Err(CouplingError::InvalidParameter(format!(
            "jitter must be positive, got {jitter}"
        )));
    }
    let lambda_min = a.spectrum()?.min_eigenvalue();
    let n = a.n();
    let mut jitter = jitter;
    let mut last_err = None;
    for _ in 0..=JITTER_ESCALATIONS {
        let lambda = lambda_min.abs() + jitter * lambda_min.abs().max(1.0);
        let b = a.entries().map(|v| beta * v) + DMatrix::<f64>::identity(n, n) * (beta * lambda);
        let attempt = numerics::spd_inverse(&b).and_then(|binv| numerics::cholesky_spd(&binv));
        match attempt {
            Ok(chol_binv) => {
                let pre = AgPrecomp {
                    b,
                    lambda,
                    lambda_min,
                    chol_binv,
                    beta,
                    jitter,
                };
                if pre.inverse_residual() < tol::AG_INVERSE {
                    return Ok(pre);
                }
                last_err = Some(NumericsError::NotPositiveDefinite { pivot: n });
            }
            Err(e) => last_err = Some(e),
        }
        jitter *= JITTER_GROWTH;
    }
    Err(CouplingError::ShiftFailed {
        attempts: JITTER_ESCALATIONS + 1,
        source: last_err.expect("at least one attempt"),
    })
}

/// Truncated spectral expansion of `B = beta (A + |lambda_min| I)`.
#[derive(Debug, Clone)]
pub struct LowRankPrecomp {
    pub k: usize,
    pub n: usize,
    /// Retained eigenvalues of `B`, descending, all `> epsilon`.
    pub mu: DVector<f64>,
    /// `n x k` matrix of the matching eigenvectors.
    pub p: DMatrix<f64>,
    pub epsilon: f64,
    pub beta: f64,
    pub lambda_min: f64,
    /// Full spectrum of `B`, kept for diagnostics.
    pub spectrum: DVector<f64>,
}

impl LowRankPrecomp {
    /// `B~ = sum_{j <= k} mu_j p_j p_j'`.
    pub fn truncated_b(&self) -> DMatrix<f64> {
        if self.k == 0 {
            return DMatrix::zeros(self.n, self.n);
        }
        let scaled = &self.p * DMatrix::from_diagonal(&self.mu);
        scaled * self.p.transpose()
    }

    /// Largest discarded eigenvalue of `B` (0 if nothing was discarded).
    pub fn largest_discarded(&self) -> f64 {
        self.spectrum.iter().skip(self.k).copied().fold(0.0, f64::max)
    }
}

/// `B = beta (A + |lambda_min| I)` as a dense matrix.
pub fn shifted_b(a: &CouplingMatrix, beta: f64, lambda_min: f64) -> DMatrix<f64> {
    let n = a.n();
    a.entries().map(|v| beta * v) + DMatrix::<f64>::identity(n, n) * (beta * lambda_min.abs())
}

pub fn precompute_lowrank(a: &CouplingMatrix, beta: f64, epsilon: f64) -> Result<LowRankPrecomp, CouplingError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(CouplingError::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(CouplingError::InvalidParameter(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let lambda_min = a.spectrum()?.min_eigenvalue();
    let b = shifted_b(a, beta, lambda_min);
    let eig = numerics::sym_eigen(&b)?;
    let k = eig.eigenvalues.iter().take_while(|&&mu| mu > epsilon).count();
    Ok(LowRankPrecomp {
        k,
        n: a.n(),
        mu: eig.eigenvalues.rows(0, k).into_owned(),
        p: eig.eigenvectors.columns(0, k).into_owned(),
        epsilon,
        beta,
        lambda_min,
        spectrum: eig.eigenvalues,
    })
}

/// Writes the dense text format: a header line `n,family,diagonal` followed by
/// `n` comma-separated rows rendered with 17 significant digits.
pub fn write_coupling<W: std::io::Write>(a: &CouplingMatrix, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{},{},{}", a.n(), a.family(), a.diagonal_convention().as_str())?;
    let n = a.n();
    let mut line = String::new();
    for i in 0..n {
        line.clear();
        for j in 0..n {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{:.16e}", a.entries()[(i, j)]));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_coupling<R: std::io::BufRead>(input: R) -> Result<CouplingMatrix, CouplingError> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| CouplingError::Parse("missing header".into()))??;
    let fields: Vec<&str> = header.trim().split(',').collect();
    if fields.len() != 3 {
        return Err(CouplingError::Parse(format!(
            "header must be `n,family,diagonal`, got `{header}`"
        )));
    }
    let n: usize = fields[0]
        .parse()
        .map_err(|_| CouplingError::Parse(format!("bad size `{}`", fields[0])))?;
    let family: Family = fields[1].parse()?;
    let diagonal: DiagonalConvention = fields[2].parse()?;
    let mut values = Vec::with_capacity(n * n);
    for row in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| CouplingError::Parse(format!("expected {n} rows, found {row}")))??;
        let before = values.len();
        for tok in line.trim().split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| CouplingError::Parse(format!("bad number `{tok}` in row {}", row + 1)))?;
            values.push(v);
        }
        if values.len() - before != n {
            return Err(CouplingError::Parse(format!(
                "row {} has {} entries, expected {n}",
                row + 1,
                values.len() - before
            )));
        }
    }
    let a = CouplingMatrix::with_family(DMatrix::from_row_slice(n, n, &values), family)?;
    if diagonal == DiagonalConvention::Zeroed && a.diagonal_convention() != DiagonalConvention::Zeroed {
        return Err(CouplingError::Parse(
            "header says zeroed diagonal but entries are non-zero".into(),
        ));
    }
    Ok(CouplingMatrix { diagonal, ..a })
}
