//! The Potts target distribution and its exact-enumeration oracle.
//!
//! Two energy conventions coexist and are named explicitly:
//! * the Hamiltonian `H(x) = (beta/2) sum_{i,j} A(i,j) 1{x_i = x_j}`, the
//!   log of the unnormalized probability mass;
//! * the summary statistic `phi(x) = beta sum_{i,j} A(i,j) 1{x_i = x_j}`,
//!   which omits the one-half.
//!
//! Sums run over ordered pairs and include the diagonal, so a retained
//! diagonal (Hopfield) contributes the constant `beta * trace(A)` to `phi`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{self, CouplingError, CouplingMatrix};
use crate::numerics::tol;

/// Spin states are stored 0-based; files render them 1-based.
pub type State = u16;

/// Largest state space the oracle will enumerate.
pub const ENUMERATION_LIMIT: u64 = 1 << 24;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("state space q^n = {q}^{n} exceeds the enumeration limit of {limit}")]
    TooLarge { q: usize, n: usize, limit: u64 },
    #[error("models are not comparable: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
}

#[derive(Debug, Clone)]
pub struct PottsModel {
    coupling: Arc<CouplingMatrix>,
    beta: f64,
    q: usize,
}

impl PottsModel {
    pub fn new(coupling: Arc<CouplingMatrix>, beta: f64, q: usize) -> Result<Self, ModelError> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(ModelError::Invalid(format!(
                "beta must be positive and finite, got {beta}"
            )));
        }
        if q < 2 {
            return Err(ModelError::Invalid(format!("q must be at least 2, got {q}")));
        }
        if q > State::MAX as usize + 1 {
            return Err(ModelError::Invalid(format!("q = {q} exceeds the supported maximum")));
        }
        Ok(Self { coupling, beta, q })
    }

    pub fn coupling(&self) -> &CouplingMatrix {
        &self.coupling
    }

    pub fn coupling_arc(&self) -> &Arc<CouplingMatrix> {
        &self.coupling
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n(&self) -> usize {
        self.coupling.n()
    }

    /// Same coupling and `q` at another inverse temperature.
    pub fn at_beta(&self, beta: f64) -> Result<Self, ModelError> {
        Self::new(self.coupling.clone(), beta, self.q)
    }

    /// Pairwise weight matrix `W = beta A`, so that `H(x) = 1/2 sum W 1{..}`.
    pub fn weights(&self) -> DMatrix<f64> {
        self.coupling.entries().map(|v| self.beta * v)
    }

    pub fn summary_phi(&self, x: &[State]) -> f64 {
        summary_phi(self, x)
    }

    pub fn hamiltonian(&self, x: &[State]) -> f64 {
        0.5 * summary_phi(self, x)
    }

    pub fn check_configuration(&self, x: &[State]) -> Result<(), ModelError> {
        if x.len() != self.n() {
            return Err(ModelError::Invalid(format!(
                "configuration has {} sites, model has {}",
                x.len(),
                self.n()
            )));
        }
        if let Some((i, &s)) = x.iter().enumerate().find(|(_, &s)| s as usize >= self.q) {
            return Err(ModelError::Invalid(format!("site {i} has state {s}, q = {}", self.q)));
        }
        Ok(())
    }
}

/// A point of `[q]^n`, stored 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpinConfiguration {
    states: Vec<State>,
}

impl SpinConfiguration {
    pub fn new(states: Vec<State>, q: usize) -> Result<Self, ModelError> {
        if let Some((i, &s)) = states.iter().enumerate().find(|(_, &s)| s as usize >= q) {
            return Err(ModelError::Invalid(format!("site {i} has state {s}, q = {q}")));
        }
        Ok(Self { states })
    }

    pub fn constant(n: usize, state: State) -> Self {
        Self { states: vec![state; n] }
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn into_states(self) -> Vec<State> {
        self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Indicator vector `y_l(i) = 1{x_i = l}`.
pub fn one_hot(x: &[State], state: State) -> Vec<f64> {
    x.iter().map(|&s| if s == state { 1.0 } else { 0.0 }).collect()
}

/// `sum_l y_l' W y_l = sum_{i,j} W(i,j) 1{x_i = x_j}`, evaluated block by
/// block over the sites sharing each state.
pub fn pairwise_agreement(w: &DMatrix<f64>, x: &[State], q: usize) -> f64 {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); q];
    for (i, &s) in x.iter().enumerate() {
        groups[s as usize].push(i);
    }
    let mut total = 0.0;
    for group in &groups {
        for &j in group {
            let col = w.column(j);
            for &i in group {
                total += col[i];
            }
        }
    }
    total
}

/// `phi(x) = beta sum_l y_l' A y_l`.
pub fn summary_phi(model: &PottsModel, x: &[State]) -> f64 {
    debug_assert_eq!(x.len(), model.n());
    model.beta * pairwise_agreement(model.coupling.entries(), x, model.q)
}

/// Calls `visit` on every configuration of `[q]^n` in mixed-radix order with
/// site 0 as the fastest-moving digit. Table index = `sum_i x_i q^i`.
pub fn for_each_configuration(n: usize, q: usize, mut visit: impl FnMut(&[State])) {
    let mut x = vec![0 as State; n];
    loop {
        visit(&x);
        let mut i = 0;
        loop {
            if i == n {
                return;
            }
            if (x[i] as usize) + 1 < q {
                x[i] += 1;
                break;
            }
            x[i] = 0;
            i += 1;
        }
    }
}

pub fn check_enumerable(n: usize, q: usize) -> Result<u64, ModelError> {
    let too_large = || ModelError::TooLarge {
        q,
        n,
        limit: ENUMERATION_LIMIT,
    };
    let mut states: u64 = 1;
    for _ in 0..n {
        states = states.checked_mul(q as u64).ok_or_else(too_large)?;
        if states > ENUMERATION_LIMIT {
            return Err(too_large());
        }
    }
    Ok(states)
}

/// Exact log-partition function and mean of `phi`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactSummary {
    pub n: usize,
    pub q: usize,
    pub beta: f64,
    pub log_partition: f64,
    pub mean_phi: f64,
    /// Configuration-independent part of `phi` coming from the diagonal of `A`.
    pub phi_diagonal_offset: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pmf: Option<Vec<f64>>,
}

/// Normalized table of `exp(1/2 sum W 1{x_i = x_j})` with its log-partition.
#[derive(Debug, Clone)]
pub struct ExactTable {
    pub log_partition: f64,
    pub pmf: Vec<f64>,
}

/// Log of the unnormalized mass, `1/2 sum W(i,j) 1{x_i = x_j}`, for every configuration.
pub fn log_weights(w: &DMatrix<f64>, q: usize) -> Result<Vec<f64>, ModelError> {
    let states = check_enumerable(w.nrows(), q)?;
    let mut out = Vec::with_capacity(states as usize);
    for_each_configuration(w.nrows(), q, |x| out.push(0.5 * pairwise_agreement(w, x, q)));
    Ok(out)
}

pub fn exact_table(w: &DMatrix<f64>, q: usize) -> Result<ExactTable, ModelError> {
    let logw = log_weights(w, q)?;
    Ok(normalize_log_weights(&logw))
}

fn normalize_log_weights(logw: &[f64]) -> ExactTable {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logw.iter().map(|h| (h - max).exp()).collect();
    let total = pairwise_sum(&weights);
    ExactTable {
        log_partition: max + total.ln(),
        pmf: weights.iter().map(|w| w / total).collect(),
    }
}

/// Deterministic pairwise (tree) summation.
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 64 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Expectation of `phi` under the table's distribution; `phi` is always the
/// model's own statistic even when the table comes from a modified matrix.
pub fn expectation_phi(model: &PottsModel, pmf: &[f64]) -> f64 {
    let mut terms = Vec::with_capacity(pmf.len());
    let mut idx = 0;
    for_each_configuration(model.n(), model.q, |x| {
        terms.push(pmf[idx] * summary_phi(model, x));
        idx += 1;
    });
    pairwise_sum(&terms)
}

pub fn exact_summary(model: &PottsModel, want_pmf: bool) -> Result<ExactSummary, ModelError> {
    check_enumerable(model.n(), model.q)?;
    let table = exact_table(&model.weights(), model.q)?;
    let mean_phi = expectation_phi(model, &table.pmf);
    Ok(ExactSummary {
        n: model.n(),
        q: model.q,
        beta: model.beta,
        log_partition: table.log_partition,
        mean_phi,
        phi_diagonal_offset: model.beta * model.coupling.trace(),
        pmf: want_pmf.then_some(table.pmf),
    })
}

/// `KL(p | q) = sum p log(p / q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let terms: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .collect();
    pairwise_sum(&terms).max(0.0)
}

/// `(KL(P|Q), KL(Q|P))` between two models on the same `(n, q)`.
pub fn kl_between(p: &PottsModel, q: &PottsModel) -> Result<(f64, f64), ModelError> {
    if p.n() != q.n() || p.q != q.q {
        return Err(ModelError::Mismatch(format!(
            "(n, q) = ({}, {}) vs ({}, {})",
            p.n(),
            p.q,
            q.n(),
            q.q
        )));
    }
    let tp = exact_table(&p.weights(), p.q)?;
    let tq = exact_table(&q.weights(), q.q)?;
    Ok((kl_divergence(&tp.pmf, &tq.pmf), kl_divergence(&tq.pmf, &tp.pmf)))
}

/// Arithmetic slack allowed on top of the bounds.
pub const CERTIFICATE_SLACK: f64 = 1e-10;

/// Exact comparison of a model against its spectrally truncated counterpart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncationCertificate {
    pub n: usize,
    pub q: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub rank: usize,
    /// `log Z(B) - log Z(B~)`.
    pub delta_log_z: f64,
    pub kl_pq: f64,
    pub kl_qp: f64,
    /// `n epsilon / 2`, with `epsilon` thresholding the eigenvalues of `B`.
    pub bound_log_z: f64,
    /// `n epsilon`.
    pub bound_kl: f64,
    /// `n beta epsilon / 2`.
    pub beta_scaled_bound_log_z: f64,
    /// `n beta epsilon`.
    pub beta_scaled_bound_kl: f64,
    pub pass_log_z: bool,
    pub pass_kl: bool,
    pub pass_beta_scaled_log_z: bool,
    pub pass_beta_scaled_kl: bool,
}

impl TruncationCertificate {
    pub fn passes(&self) -> bool {
        self.pass_log_z && self.pass_kl
    }
}

/// Builds `Q` from the truncated `B~` and compares it exactly with `P` (built
/// from `B = beta (A + |lambda_min| I)`).
pub fn truncation_certificate(model: &PottsModel, epsilon: f64) -> Result<TruncationCertificate, ModelError> {
    check_enumerable(model.n(), model.q)?;
    let lr = coupling::precompute_lowrank(&model.coupling, model.beta, epsilon)?;
    let b = coupling::shifted_b(&model.coupling, model.beta, lr.lambda_min);
    let tp = exact_table(&b, model.q)?;
    let tq = exact_table(&lr.truncated_b(), model.q)?;
    let n = model.n() as f64;
    let delta_log_z = tp.log_partition - tq.log_partition;
    let kl_pq = kl_divergence(&tp.pmf, &tq.pmf);
    let kl_qp = kl_divergence(&tq.pmf, &tp.pmf);
    let bound_log_z = n * epsilon / 2.0;
    let bound_kl = n * epsilon;
    let beta_scaled_bound_log_z = n * model.beta * epsilon / 2.0;
    let beta_scaled_bound_kl = n * model.beta * epsilon;
    let kl_max = kl_pq.max(kl_qp);
    Ok(TruncationCertificate {
        n: model.n(),
        q: model.q,
        beta: model.beta,
        epsilon,
        rank: lr.k,
        delta_log_z,
        kl_pq,
        kl_qp,
        bound_log_z,
        bound_kl,
        beta_scaled_bound_log_z,
        beta_scaled_bound_kl,
        pass_log_z: delta_log_z.abs() <= bound_log_z + CERTIFICATE_SLACK,
        pass_kl: kl_max <= bound_kl + CERTIFICATE_SLACK,
        pass_beta_scaled_log_z: delta_log_z.abs() <= beta_scaled_bound_log_z + CERTIFICATE_SLACK,
        pass_beta_scaled_kl: kl_max <= beta_scaled_bound_kl + CERTIFICATE_SLACK,
    })
}

/// Checks a probability table sums to one.
pub fn pmf_is_normalized(pmf: &[f64]) -> bool {
    (pairwise_sum(pmf) - 1.0).abs() < tol::PMF_SUM
}
