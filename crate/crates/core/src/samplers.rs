//! Single-temperature MCMC kernels and the chain runner.
//!
//! Kernels update a configuration in place. Every kernel owns its scratch
//! buffers and borrows the (immutable, shareable) precomputation from a
//! [`PreparedSampler`], so many chains can run from one precomputation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{self, AgPrecomp, CouplingError, LowRankPrecomp, DEFAULT_EPSILON, DEFAULT_JITTER};
use crate::model::{ModelError, PottsModel, SpinConfiguration, State};
use crate::numerics::{streams, tol, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    HeatBath,
    AgGibbs,
    LowRankAgGibbs,
    IsingAg,
    IsingLowRankAg,
    SwendsenWang,
    Wolff,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 7] = [
        SamplerKind::HeatBath,
        SamplerKind::AgGibbs,
        SamplerKind::LowRankAgGibbs,
        SamplerKind::IsingAg,
        SamplerKind::IsingLowRankAg,
        SamplerKind::SwendsenWang,
        SamplerKind::Wolff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::HeatBath => "heat_bath",
            SamplerKind::AgGibbs => "ag_gibbs",
            SamplerKind::LowRankAgGibbs => "low_rank_ag_gibbs",
            SamplerKind::IsingAg => "ising_ag",
            SamplerKind::IsingLowRankAg => "ising_low_rank_ag",
            SamplerKind::SwendsenWang => "swendsen_wang",
            SamplerKind::Wolff => "wolff",
        }
    }

    pub fn requires_two_states(self) -> bool {
        matches!(self, SamplerKind::IsingAg | SamplerKind::IsingLowRankAg)
    }

    pub fn requires_nonnegative_coupling(self) -> bool {
        matches!(self, SamplerKind::SwendsenWang | SamplerKind::Wolff)
    }

    /// Whether the kernel targets the spectrally truncated model rather than
    /// the original one.
    pub fn is_low_rank(self) -> bool {
        matches!(self, SamplerKind::LowRankAgGibbs | SamplerKind::IsingLowRankAg)
    }

    /// Checks `(kind, model)` compatibility without doing any work.
    pub fn check_compatible(self, model: &PottsModel) -> Result<(), SamplerError> {
        if self.requires_two_states() && model.q() != 2 {
            return Err(SamplerError::WrongStateCount {
                kind: self,
                q: model.q(),
            });
        }
        if self.requires_nonnegative_coupling() {
            if let Some((i, j, value)) = model.coupling().first_negative() {
                return Err(SamplerError::NegativeCoupling {
                    kind: self,
                    i,
                    j,
                    value,
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown sampler `{s}`"))
    }
}

/// How the cluster algorithms turn a coupling into a bond probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BondConvention {
    /// `1 - exp(-beta A(i,j))`: the per-edge weight of the indicator
    /// Hamiltonian, which counts each unordered pair twice with a factor 1/2.
    #[default]
    Indicator,
    /// `1 - exp(-2 beta A(i,j))`: the usual +/-1 spin convention.
    Spin,
}

impl BondConvention {
    pub fn probability(self, beta: f64, coupling: f64) -> f64 {
        let scale = match self {
            BondConvention::Indicator => 1.0,
            BondConvention::Spin => 2.0,
        };
        -(-scale * beta * coupling).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub jitter: f64,
    pub epsilon: f64,
    pub bond: BondConvention,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            jitter: DEFAULT_JITTER,
            epsilon: DEFAULT_EPSILON,
            bond: BondConvention::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("{kind} requires q = 2, model has q = {q}")]
    WrongStateCount { kind: SamplerKind, q: usize },
    #[error("{kind} requires non-negative couplings, A[{i},{j}] = {value}")]
    NegativeCoupling {
        kind: SamplerKind,
        i: usize,
        j: usize,
        value: f64,
    },
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid run: {0}")]
    InvalidRun(String),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Positive off-diagonal couplings with their bond-opening probabilities.
#[derive(Debug, Clone)]
pub struct BondGraph {
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl BondGraph {
    pub fn new(model: &PottsModel, convention: BondConvention) -> Self {
        let a = model.coupling().entries();
        let n = model.n();
        let neighbors = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && a[(i, j)] > 0.0)
                    .map(|j| (j, convention.probability(model.beta(), a[(i, j)])))
                    .collect()
            })
            .collect();
        Self { neighbors }
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }
}

#[derive(Debug, Clone)]
pub enum Precomputation {
    None,
    Ag(AgPrecomp),
    LowRank(LowRankPrecomp),
    Bonds(BondGraph),
}

/// A sampler kind bound to a model, with its one-time setup done.
#[derive(Debug, Clone)]
pub struct PreparedSampler {
    kind: SamplerKind,
    model: PottsModel,
    options: SamplerOptions,
    precomp: Precomputation,
    precompute_seconds: f64,
}

impl PreparedSampler {
    pub fn new(kind: SamplerKind, model: PottsModel, options: SamplerOptions) -> Result<Self, SamplerError> {
        kind.check_compatible(&model)?;
        let start = Instant::now();
        let precomp = match kind {
            SamplerKind::HeatBath => Precomputation::None,
            SamplerKind::AgGibbs | SamplerKind::IsingAg => {
                Precomputation::Ag(coupling::precompute_ag(model.coupling(), model.beta(), options.jitter)?)
            }
            SamplerKind::LowRankAgGibbs | SamplerKind::IsingLowRankAg => Precomputation::LowRank(
                coupling::precompute_lowrank(model.coupling(), model.beta(), options.epsilon)?,
            ),
            SamplerKind::SwendsenWang | SamplerKind::Wolff => {
                Precomputation::Bonds(BondGraph::new(&model, options.bond))
            }
        };
        Ok(Self {
            kind,
            model,
            options,
            precomp,
            precompute_seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn model(&self) -> &PottsModel {
        &self.model
    }

    pub fn options(&self) -> &SamplerOptions {
        &self.options
    }

    pub fn precomputation(&self) -> &Precomputation {
        &self.precomp
    }

    pub fn precompute_seconds(&self) -> f64 {
        self.precompute_seconds
    }

    /// Fresh kernel with its own scratch space.
    pub fn kernel(&self) -> Kernel<'_> {
        let q = self.model.q();
        match (&self.precomp, self.kind) {
            (Precomputation::None, _) => Kernel::HeatBath(HeatBath::new(&self.model)),
            (Precomputation::Ag(pre), SamplerKind::IsingAg) => Kernel::IsingAg(IsingAg::new(pre)),
            (Precomputation::Ag(pre), _) => Kernel::AgGibbs(AgGibbs::new(pre, q)),
            (Precomputation::LowRank(lr), SamplerKind::IsingLowRankAg) => {
                Kernel::IsingLowRankAg(IsingLowRankAg::new(lr))
            }
            (Precomputation::LowRank(lr), _) => Kernel::LowRankAgGibbs(LowRankAgGibbs::new(lr, q)),
            (Precomputation::Bonds(g), SamplerKind::Wolff) => Kernel::Wolff(Wolff::new(g, q)),
            (Precomputation::Bonds(g), _) => Kernel::SwendsenWang(SwendsenWang::new(g, q)),
        }
    }
}

pub enum Kernel<'a> {
    HeatBath(HeatBath<'a>),
    AgGibbs(AgGibbs<'a>),
    LowRankAgGibbs(LowRankAgGibbs<'a>),
    IsingAg(IsingAg<'a>),
    IsingLowRankAg(IsingLowRankAg<'a>),
    SwendsenWang(SwendsenWang<'a>),
    Wolff(Wolff<'a>),
}

impl Kernel<'_> {
    /// One iteration: a full sweep for Heat Bath, one block update for the
    /// auxiliary-Gaussian kernels, one cluster update for the cluster kernels.
    pub fn step(&mut self, x: &mut [State], rng: &mut RngStream) {
        match self {
            Kernel::HeatBath(k) => k.sweep(x, rng),
            Kernel::AgGibbs(k) => {
                k.step(x, rng);
            }
            Kernel::LowRankAgGibbs(k) => {
                k.step(x, rng);
            }
            Kernel::IsingAg(k) => {
                k.step(x, rng);
            }
            Kernel::IsingLowRankAg(k) => {
                k.step(x, rng);
            }
            Kernel::SwendsenWang(k) => k.step(x, rng),
            Kernel::Wolff(k) => {
                k.step(x, rng);
            }
        }
    }
}

/// Samples from unnormalized log-probabilities in place: `logits` is
/// overwritten with the normalized probabilities.
#[inline]
fn sample_logits(logits: &mut [f64], rng: &mut RngStream) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "non-finite logits {logits:?}");
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
    debug_assert!(
        (logits.iter().sum::<f64>() - 1.0).abs() < tol::CONDITIONAL_SUM,
        "conditional does not normalize: {logits:?}"
    );
    let u = rng.uniform();
    let mut acc = 0.0;
    for (a, p) in logits.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    logits.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Probability of the first state under the q = 2 conditional with field
/// `h`: `exp(h/2) / (exp(h/2) + exp(-h/2))`.
#[inline]
pub fn ising_first_state_probability(h: f64) -> f64 {
    1.0 / (1.0 + (-h).exp())
}

/// Sequential single-site Gibbs sampler, ascending site order.
pub struct HeatBath<'a> {
    model: &'a PottsModel,
    field: Vec<f64>,
}

impl<'a> HeatBath<'a> {
    pub fn new(model: &'a PottsModel) -> Self {
        Self {
            model,
            field: vec![0.0; model.q()],
        }
    }

    /// `P(X_i = l | x_-i) ∝ exp(beta sum_{j != i} A(i,j) 1{x_j = l})`.
    pub fn conditional(&mut self, x: &[State], i: usize) -> &[f64] {
        let a = self.model.coupling().entries();
        self.field.fill(0.0);
        let col = a.column(i);
        for (j, &s) in x.iter().enumerate() {
            if j != i {
                self.field[s as usize] += col[j];
            }
        }
        let beta = self.model.beta();
        for f in self.field.iter_mut() {
            *f *= beta;
        }
        &self.field
    }

    pub fn sweep(&mut self, x: &mut [State], rng: &mut RngStream) {
        for i in 0..x.len() {
            self.conditional(x, i);
            x[i] = sample_logits(&mut self.field, rng) as State;
        }
    }
}

/// Regular auxiliary-Gaussian block Gibbs sampler.
pub struct AgGibbs<'a> {
    pre: &'a AgPrecomp,
    noise: DMatrix<f64>,
    z: DMatrix<f64>,
    fields: DMatrix<f64>,
    logits: Vec<f64>,
}

impl<'a> AgGibbs<'a> {
    pub fn new(pre: &'a AgPrecomp, q: usize) -> Self {
        let n = pre.n();
        Self {
            pre,
            noise: DMatrix::zeros(n, q),
            z: DMatrix::zeros(n, q),
            fields: DMatrix::zeros(n, q),
            logits: vec![0.0; q],
        }
    }

    /// Draws `z_l ~ N(y_l, B^{-1})` for every state `l` (column `l` of the result).
    pub fn sample_aux(&mut self, x: &[State], rng: &mut RngStream) -> &DMatrix<f64> {
        rng.fill_standard_normal(self.noise.as_mut_slice());
        self.z.gemm(1.0, &self.pre.chol_binv, &self.noise, 0.0);
        for (i, &s) in x.iter().enumerate() {
            self.z[(i, s as usize)] += 1.0;
        }
        &self.z
    }

    /// Resamples every site given the current auxiliary matrix.
    pub fn sample_sites(&mut self, x: &mut [State], rng: &mut RngStream) {
        self.fields.gemm(1.0, &self.pre.b, &self.z, 0.0);
        for (i, xi) in x.iter_mut().enumerate() {
            for (l, logit) in self.logits.iter_mut().enumerate() {
                *logit = self.fields[(i, l)];
            }
            *xi = sample_logits(&mut self.logits, rng) as State;
        }
    }

    pub fn step(&mut self, x: &mut [State], rng: &mut RngStream) -> &DMatrix<f64> {
        self.sample_aux(x, rng);
        self.sample_sites(x, rng);
        &self.z
    }

    pub fn aux(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn set_aux(&mut self, z: &DMatrix<f64>) {
        self.z.copy_from(z);
    }
}

/// Low-rank auxiliary-Gaussian sampler over the truncated model.
pub struct LowRankAgGibbs<'a> {
    lr: &'a LowRankPrecomp,
    q: usize,
    z: DMatrix<f64>,
    scaled: DMatrix<f64>,
    fields: DMatrix<f64>,
    logits: Vec<f64>,
}

impl<'a> LowRankAgGibbs<'a> {
    pub fn new(lr: &'a LowRankPrecomp, q: usize) -> Self {
        Self {
            lr,
            q,
            z: DMatrix::zeros(lr.k, q),
            scaled: DMatrix::zeros(lr.k, q),
            fields: DMatrix::zeros(lr.n, q),
            logits: vec![0.0; q],
        }
    }

    /// `z_l(j) ~ N(p_j' y_l, 1 / mu_j)`, stored as a `k x q` matrix.
    pub fn sample_aux(&mut self, x: &[State], rng: &mut RngStream) -> &DMatrix<f64> {
        let lr = self.lr;
        self.z.fill(0.0);
        for j in 0..lr.k {
            let col = lr.p.column(j);
            for (i, &s) in x.iter().enumerate() {
                self.z[(j, s as usize)] += col[i];
            }
        }
        for l in 0..self.q {
            for j in 0..lr.k {
                self.z[(j, l)] += rng.standard_normal() / lr.mu[j].sqrt();
            }
        }
        &self.z
    }

    /// Site logits `sum_j mu_j z_l(j) p_j(i)`, normalized over states.
    pub fn sample_sites(&mut self, x: &mut [State], rng: &mut RngStream) {
        let lr = self.lr;
        if lr.k == 0 {
            for xi in x.iter_mut() {
                *xi = rng.index(self.q) as State;
            }
            return;
        }
        for l in 0..self.q {
            for j in 0..lr.k {
                self.scaled[(j, l)] = lr.mu[j] * self.z[(j, l)];
            }
        }
        self.fields.gemm(1.0, &lr.p, &self.scaled, 0.0);
        for (i, xi) in x.iter_mut().enumerate() {
            for (l, logit) in self.logits.iter_mut().enumerate() {
                *logit = self.fields[(i, l)];
            }
            *xi = sample_logits(&mut self.logits, rng) as State;
        }
    }

    pub fn step(&mut self, x: &mut [State], rng: &mut RngStream) -> &DMatrix<f64> {
        self.sample_aux(x, rng);
        self.sample_sites(x, rng);
        &self.z
    }

    pub fn aux(&self) -> &DMatrix<f64> {
        &self.z
    }
}

/// q = 2 auxiliary-Gaussian sampler on the difference `w = z_1 - z_2`.
pub struct IsingAg<'a> {
    pre: &'a AgPrecomp,
    noise: DVector<f64>,
    w: DVector<f64>,
    fields: DVector<f64>,
}

impl<'a> IsingAg<'a> {
    pub fn new(pre: &'a AgPrecomp) -> Self {
        let n = pre.n();
        Self {
            pre,
            noise: DVector::zeros(n),
            w: DVector::zeros(n),
            fields: DVector::zeros(n),
        }
    }

    /// `w ~ N(y_1 - y_2, 2 B^{-1})`.
    pub fn sample_aux(&mut self, x: &[State], rng: &mut RngStream) -> &DVector<f64> {
        rng.fill_standard_normal(self.noise.as_mut_slice());
        self.w
            .gemv(std::f64::consts::SQRT_2, &self.pre.chol_binv, &self.noise, 0.0);
        for (i, &s) in x.iter().enumerate() {
            self.w[i] += if s == 0 { 1.0 } else { -1.0 };
        }
        &self.w
    }

    /// Per-site probability of the first state given `w`.
    pub fn first_state_probabilities(&mut self, w: &DVector<f64>) -> Vec<f64> {
        self.fields.gemv(1.0, &self.pre.b, w, 0.0);
        self.fields.iter().map(|&h| ising_first_state_probability(h)).collect()
    }

    pub fn sample_sites(&mut self, x: &mut [State], rng: &mut RngStream) {
        self.fields.gemv(1.0, &self.pre.b, &self.w, 0.0);
        for (xi, &h) in x.iter_mut().zip(self.fields.iter()) {
            *xi = if rng.uniform() < ising_first_state_probability(h) {
                0
            } else {
                1
            };
        }
    }

    pub fn step(&mut self, x: &mut [State], rng: &mut RngStream) -> &DVector<f64> {
        self.sample_aux(x, rng);
        self.sample_sites(x, rng);
        &self.w
    }
}

/// q = 2 low-rank sampler on `w_j = z_1(j) - z_2(j)`.
pub struct IsingLowRankAg<'a> {
    lr: &'a LowRankPrecomp,
    w: DVector<f64>,
    scaled: DVector<f64>,
    fields: DVector<f64>,
}

impl<'a> IsingLowRankAg<'a> {
    pub fn new(lr: &'a LowRankPrecomp) -> Self {
        Self {
            lr,
            w: DVector::zeros(lr.k),
            scaled: DVector::zeros(lr.k),
            fields: DVector::zeros(lr.n),
        }
    }

    /// `w_j ~ N(p_j'(y_1 - y_2), 2 / mu_j)`.
    pub fn sample_aux(&mut self, x: &[State], rng: &mut RngStream) -> &DVector<f64> {
        let lr = self.lr;
        for j in 0..lr.k {
            let col = lr.p.column(j);
            let mean: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &s)| if s == 0 { col[i] } else { -col[i] })
                .sum();
            self.w[j] = mean + rng.standard_normal() * (2.0 / lr.mu[j]).sqrt();
        }
        &self.w
    }

    pub fn sample_sites(&mut self, x: &mut [State], rng: &mut RngStream) {
        let lr = self.lr;
        if lr.k == 0 {
            for xi in x.iter_mut() {
                *xi = rng.index(2) as State;
            }
            return;
        }
        for j in 0..lr.k {
            self.scaled[j] = lr.mu[j] * self.w[j];
        }
        self.fields.gemv(1.0, &lr.p, &self.scaled, 0.0);
        for (xi, &h) in x.iter_mut().zip(self.fields.iter()) {
            *xi = if rng.uniform() < ising_first_state_probability(h) {
                0
            } else {
                1
            };
        }
    }

    pub fn step(&mut self, x: &mut [State], rng: &mut RngStream) -> &DVector<f64> {
        self.sample_aux(x, rng);
        self.sample_sites(x, rng);
        &self.w
    }
}

const UNASSIGNED: usize = usize::MAX;

/// Swendsen–Wang: percolate bonds between equal neighbors, then give every
/// cluster an independent uniform state.
pub struct SwendsenWang<'a> {
    graph: &'a BondGraph,
    q: usize,
    cluster: Vec<usize>,
    stack: Vec<usize>,
    members: Vec<usize>,
}

impl<'a> SwendsenWang<'a> {
    pub fn new(graph: &'a BondGraph, q: usize) -> Self {
        let n = graph.neighbors.len();
        Self {
            graph,
            q,
            cluster: vec![UNASSIGNED; n],
            stack: Vec::new(),
            members: Vec::new(),
        }
    }

    pub fn step(&mut self, x: &mut [State], rng: &mut RngStream) {
        self.cluster.fill(UNASSIGNED);
        let mut next_id = 0;
        for root in 0..x.len() {
            if self.cluster[root] != UNASSIGNED {
                continue;
            }
            let old = x[root];
            self.members.clear();
            self.stack.push(root);
            self.cluster[root] = next_id;
            while let Some(i) = self.stack.pop() {
                self.members.push(i);
                for &(j, p) in self.graph.neighbors(i) {
                    if self.cluster[j] == UNASSIGNED && x[j] == old && rng.uniform() < p {
                        self.cluster[j] = next_id;
                        self.stack.push(j);
                    }
                }
            }
            let new_state = rng.index(self.q) as State;
            for &i in &self.members {
                x[i] = new_state;
            }
            next_id += 1;
        }
    }
}

/// Wolff single-cluster update. For q > 2 the cluster moves to a state drawn
/// uniformly from the other q - 1 states.
pub struct Wolff<'a> {
    graph: &'a BondGraph,
    q: usize,
    in_cluster: Vec<bool>,
    stack: Vec<usize>,
    members: Vec<usize>,
}

impl<'a> Wolff<'a> {
    pub fn new(graph: &'a BondGraph, q: usize) -> Self {
        let n = graph.neighbors.len();
        Self {
            graph,
            q,
            in_cluster: vec![false; n],
            stack: Vec::new(),
            members: Vec::new(),
        }
    }

    /// Returns the size of the flipped cluster.
    pub fn step(&mut self, x: &mut [State], rng: &mut RngStream) -> usize {
        let seed = rng.index(x.len());
        let old = x[seed];
        self.members.clear();
        self.in_cluster[seed] = true;
        self.stack.push(seed);
        while let Some(i) = self.stack.pop() {
            self.members.push(i);
            for &(j, p) in self.graph.neighbors(i) {
                if !self.in_cluster[j] && x[j] == old && rng.uniform() < p {
                    self.in_cluster[j] = true;
                    self.stack.push(j);
                }
            }
        }
        let new_state = if self.q == 2 {
            1 - old
        } else {
            let r = rng.index(self.q - 1) as State;
            if r >= old {
                r + 1
            } else {
                r
            }
        };
        for &i in &self.members {
            x[i] = new_state;
            self.in_cluster[i] = false;
        }
        self.members.len()
    }
}

fn row_logsumexp_softmax(fields: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let (n, q) = fields.shape();
    let mut soft = DMatrix::zeros(n, q);
    let mut total = 0.0;
    for i in 0..n {
        let max = (0..q).map(|l| fields[(i, l)]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for l in 0..q {
            let e = (fields[(i, l)] - max).exp();
            soft[(i, l)] = e;
            s += e;
        }
        for l in 0..q {
            soft[(i, l)] /= s;
        }
        total += max + s.ln();
    }
    (total, soft)
}

/// Unnormalized log marginal density of the regular auxiliary variables and
/// its gradient. `z` is `n x q`, column `l` holding `z_l`:
/// `-1/2 sum_l z_l' B z_l + sum_i logsumexp_l (B z)(i, l)`.
pub fn ag_marginal_logdensity(pre: &AgPrecomp, z: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>), SamplerError> {
    let n = pre.n();
    if z.nrows() != n || z.ncols() == 0 {
        return Err(SamplerError::DimensionMismatch {
            expected: (n, z.ncols().max(1)),
            found: z.shape(),
        });
    }
    let bz = &pre.b * z;
    let quad: f64 = z.iter().zip(bz.iter()).map(|(a, b)| a * b).sum();
    let (lse, soft) = row_logsumexp_softmax(&bz);
    let grad = &pre.b * (soft - z);
    Ok((-0.5 * quad + lse, grad))
}

/// Low-rank counterpart with `z` of shape `k x q`:
/// `-1/2 sum_{l,j} mu_j z_l(j)^2 + sum_i logsumexp_l sum_j mu_j z_l(j) p_j(i)`.
pub fn lowrank_marginal_logdensity(lr: &LowRankPrecomp, z: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>), SamplerError> {
    if z.nrows() != lr.k || z.ncols() == 0 {
        return Err(SamplerError::DimensionMismatch {
            expected: (lr.k, z.ncols().max(1)),
            found: z.shape(),
        });
    }
    let q = z.ncols();
    let mut scaled = z.clone();
    for l in 0..q {
        for j in 0..lr.k {
            scaled[(j, l)] *= lr.mu[j];
        }
    }
    let quad: f64 = z.iter().zip(scaled.iter()).map(|(a, b)| a * b).sum();
    let fields = &lr.p * &scaled;
    let (lse, soft) = row_logsumexp_softmax(&fields);
    let mut grad = lr.p.transpose() * soft - z;
    for l in 0..q {
        for j in 0..lr.k {
            grad[(j, l)] *= lr.mu[j];
        }
    }
    Ok((-0.5 * quad + lse, grad))
}

/// Starting point of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    AllZero,
    /// Uniform over `[q]^n`, drawn from the chain's own stream.
    Random,
    Fixed(SpinConfiguration),
}

impl Initialization {
    pub fn draw(&self, model: &PottsModel, rng: &mut RngStream) -> Result<Vec<State>, SamplerError> {
        match self {
            Initialization::AllZero => Ok(vec![0; model.n()]),
            Initialization::Random => Ok((0..model.n()).map(|_| rng.index(model.q()) as State).collect()),
            Initialization::Fixed(c) => {
                model.check_configuration(c.states())?;
                Ok(c.states().to_vec())
            }
        }
    }
}

/// Post-burn-in output of one chain.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub kind: SamplerKind,
    pub n: usize,
    pub q: usize,
    pub beta: f64,
    /// Kept draws, row-major `(iterations - burn_in) x n`.
    pub draws: Vec<State>,
    /// `phi` of every kept draw.
    pub phi: Vec<f64>,
    /// `phi` during burn-in.
    pub phi_burn_in: Vec<f64>,
    pub iterations: usize,
    pub burn_in: usize,
    pub wall_seconds_sampling: f64,
    pub wall_seconds_precompute: f64,
    pub master_seed: u64,
    pub stream_id: u64,
}

impl ChainTrace {
    pub fn rows(&self) -> usize {
        self.phi.len()
    }

    pub fn draw(&self, row: usize) -> &[State] {
        &self.draws[row * self.n..(row + 1) * self.n]
    }

    /// 1-based iteration number of kept row `row`.
    pub fn iteration_of(&self, row: usize) -> usize {
        self.burn_in + row + 1
    }

    /// Builds a trace from a full run, splitting off the burn-in rows.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        kind: SamplerKind,
        model: &PottsModel,
        mut all_draws: Vec<State>,
        burn_in: usize,
        wall_seconds_sampling: f64,
        wall_seconds_precompute: f64,
        master_seed: u64,
        stream_id: u64,
    ) -> Self {
        let n = model.n();
        let iterations = all_draws.len() / n;
        let mut phi: Vec<f64> = all_draws.chunks(n).map(|x| model.summary_phi(x)).collect();
        let kept_phi = phi.split_off(burn_in);
        let kept = all_draws.split_off(burn_in * n);
        drop(all_draws);
        Self {
            kind,
            n,
            q: model.q(),
            beta: model.beta(),
            draws: kept,
            phi: kept_phi,
            phi_burn_in: phi,
            iterations,
            burn_in,
            wall_seconds_sampling,
            wall_seconds_precompute,
            master_seed,
            stream_id,
        }
    }
}

fn check_run(iterations: usize, burn_in: usize) -> Result<(), SamplerError> {
    if burn_in >= iterations {
        return Err(SamplerError::InvalidRun(format!(
            "burn-in ({burn_in}) must be smaller than the number of iterations ({iterations})"
        )));
    }
    Ok(())
}

/// Runs `iterations` kernel steps and keeps the rows after `burn_in`.
///
/// `wall_seconds_sampling` covers the kernel steps only; `phi` is evaluated
/// afterwards from the stored draws.
pub fn run_chain(
    sampler: &PreparedSampler,
    init: &Initialization,
    iterations: usize,
    burn_in: usize,
    mut stream: RngStream,
) -> Result<ChainTrace, SamplerError> {
    check_run(iterations, burn_in)?;
    let model = sampler.model();
    let n = model.n();
    let mut x = init.draw(model, &mut stream)?;
    let mut kernel = sampler.kernel();
    let mut all = Vec::with_capacity(iterations * n);
    let start = Instant::now();
    for _ in 0..iterations {
        kernel.step(&mut x, &mut stream);
        all.extend_from_slice(&x);
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(ChainTrace::assemble(
        sampler.kind(),
        model,
        all,
        burn_in,
        elapsed,
        sampler.precompute_seconds(),
        stream.master_seed(),
        stream.stream_id(),
    ))
}

/// Independent chains sharing one precomputation.
#[derive(Debug, Clone)]
pub struct MultiChainRun {
    pub traces: Vec<ChainTrace>,
    pub precompute_seconds: f64,
}

impl MultiChainRun {
    pub fn phi_series(&self) -> Vec<Vec<f64>> {
        self.traces.iter().map(|t| t.phi.clone()).collect()
    }

    pub fn sampling_seconds(&self) -> f64 {
        self.traces.iter().map(|t| t.wall_seconds_sampling).sum()
    }
}

/// Runs `chains` chains concurrently; chain `c` uses stream `streams::chain(c)`.
pub fn run_chains(
    sampler: &PreparedSampler,
    init: &Initialization,
    iterations: usize,
    burn_in: usize,
    chains: usize,
    master_seed: u64,
) -> Result<MultiChainRun, SamplerError> {
    check_run(iterations, burn_in)?;
    if chains == 0 {
        return Err(SamplerError::InvalidRun("need at least one chain".into()));
    }
    let traces = (0..chains)
        .into_par_iter()
        .map(|c| {
            run_chain(
                sampler,
                init,
                iterations,
                burn_in,
                RngStream::new(master_seed, streams::chain(c)),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MultiChainRun {
        traces,
        precompute_seconds: sampler.precompute_seconds(),
    })
}
