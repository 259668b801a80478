//! Replica-exchange (parallel tempering) around any single-temperature kernel.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::CouplingMatrix;
use crate::model::{PottsModel, State};
use crate::numerics::{streams, RngStream};
use crate::samplers::{ChainTrace, Initialization, Kernel, PreparedSampler, SamplerError, SamplerKind, SamplerOptions};

#[derive(Debug, Error)]
pub enum TemperingError {
    #[error("invalid ladder: {0}")]
    Ladder(String),
    #[error("invalid tempering schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Inverse temperatures `beta_1 < ... < beta_T`, `T >= 2`. The last one is
/// the cold (target) replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TemperingLadder {
    betas: Vec<f64>,
}

impl TemperingLadder {
    pub fn new(betas: Vec<f64>) -> Result<Self, TemperingError> {
        if betas.len() < 2 {
            return Err(TemperingError::Ladder(format!(
                "need at least 2 temperatures, got {}",
                betas.len()
            )));
        }
        if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(TemperingError::Ladder(format!(
                "temperatures must be positive and finite, got {b}"
            )));
        }
        if let Some(w) = betas.windows(2).find(|w| w[1] <= w[0]) {
            return Err(TemperingError::Ladder(format!(
                "temperatures must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
        Ok(Self { betas })
    }

    /// `count` equally spaced values from `low` to `high` inclusive.
    pub fn linear(low: f64, high: f64, count: usize) -> Result<Self, TemperingError> {
        if count < 2 {
            return Self::new(vec![low]);
        }
        let step = (high - low) / (count - 1) as f64;
        let mut betas: Vec<f64> = (0..count).map(|i| low + step * i as f64).collect();
        betas[count - 1] = high;
        Self::new(betas)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn cold(&self) -> f64 {
        self.betas[self.betas.len() - 1]
    }
}

impl TryFrom<Vec<f64>> for TemperingLadder {
    type Error = TemperingError;

    fn try_from(betas: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(betas)
    }
}

impl From<TemperingLadder> for Vec<f64> {
    fn from(l: TemperingLadder) -> Self {
        l.betas
    }
}

/// `-1/2 sum_{i,j} A(i,j) 1{x_i = x_j}`, diagonal included.
pub fn partial_hamiltonian(a: &CouplingMatrix, x: &[State]) -> f64 {
    let m = a.entries();
    let n = x.len();
    let mut off = 0.0;
    let mut diag = 0.0;
    for j in 0..n {
        let col = m.column(j);
        diag += col[j];
        for i in 0..j {
            if x[i] == x[j] {
                off += col[i];
            }
        }
    }
    -(off + 0.5 * diag)
}

/// Metropolis probability of swapping the configurations of neighbors
/// `t` and `t + 1`: `min(1, exp((beta_t1 - beta_t)(h_t1 - h_t)))`.
pub fn exchange_probability(beta_t: f64, beta_t1: f64, h_t: f64, h_t1: f64) -> f64 {
    debug_assert!(beta_t < beta_t1);
    ((beta_t1 - beta_t) * (h_t1 - h_t)).exp().min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub beta_low: f64,
    pub beta_high: f64,
    pub attempts: u64,
    pub accepts: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeStats {
    pub pairs: Vec<PairStats>,
}

impl ExchangeStats {
    fn new(ladder: &TemperingLadder) -> Self {
        Self {
            pairs: ladder
                .betas()
                .windows(2)
                .map(|w| PairStats {
                    beta_low: w[0],
                    beta_high: w[1],
                    attempts: 0,
                    accepts: 0,
                    rate: 0.0,
                })
                .collect(),
        }
    }

    fn record(&mut self, pair: usize, accepted: bool) {
        let p = &mut self.pairs[pair];
        p.attempts += 1;
        p.accepts += u64::from(accepted);
        p.rate = p.accepts as f64 / p.attempts as f64;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperingSchedule {
    /// Number of exchange events.
    pub n_ex: usize,
    /// Kernel steps per replica between exchanges.
    pub n_mc: usize,
    /// Leading iterations dropped from every replica's trace.
    pub burn_in: usize,
}

impl TemperingSchedule {
    pub const DEFAULT_BURN_IN_FRACTION: f64 = 0.1;

    pub fn with_burn_in_fraction(n_ex: usize, n_mc: usize, fraction: f64) -> Self {
        let total = n_ex * n_mc;
        Self {
            n_ex,
            n_mc,
            burn_in: (total as f64 * fraction).floor() as usize,
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.n_ex * self.n_mc
    }
}

#[derive(Debug, Clone)]
pub struct TemperedRun {
    /// One trace per ladder position; `traces[t]` was sampled at `beta_t`.
    pub traces: Vec<ChainTrace>,
    pub exchange: ExchangeStats,
    pub precompute_seconds: f64,
}

impl TemperedRun {
    pub fn cold(&self) -> &ChainTrace {
        self.traces.last().expect("ladder has at least two replicas")
    }
}

struct Replica<'a> {
    model: &'a PottsModel,
    kernel: Kernel<'a>,
    x: Vec<State>,
    stream: RngStream,
    draws: Vec<State>,
    seconds: f64,
    h: f64,
}

impl Replica<'_> {
    fn advance(&mut self, steps: usize) {
        let start = Instant::now();
        for _ in 0..steps {
            self.kernel.step(&mut self.x, &mut self.stream);
            self.draws.extend_from_slice(&self.x);
        }
        self.seconds += start.elapsed().as_secs_f64();
        self.h = partial_hamiltonian(self.model.coupling(), &self.x);
    }
}

/// Runs one replica set: `n_ex` rounds of `n_mc` steps per replica (replicas
/// advance concurrently) followed by an ascending sweep of neighbor swaps.
///
/// Replica `t` uses stream `streams::replica(set, t)` and the swaps use
/// `streams::exchange(set)`. Configurations move between replicas; streams and
/// temperatures stay put.
#[allow(clippy::too_many_arguments)]
pub fn tempered_run(
    kind: SamplerKind,
    template: &PottsModel,
    ladder: &TemperingLadder,
    options: SamplerOptions,
    schedule: TemperingSchedule,
    init: &Initialization,
    master_seed: u64,
    set: usize,
) -> Result<TemperedRun, TemperingError> {
    if schedule.n_ex == 0 || schedule.n_mc == 0 {
        return Err(TemperingError::Schedule("n_ex and n_mc must be at least 1".into()));
    }
    if schedule.burn_in >= schedule.total_iterations() {
        return Err(TemperingError::Schedule(format!(
            "burn-in ({}) must be smaller than n_ex * n_mc ({})",
            schedule.burn_in,
            schedule.total_iterations()
        )));
    }
    let models = ladder
        .betas()
        .iter()
        .map(|&b| template.at_beta(b).map_err(SamplerError::from))
        .collect::<Result<Vec<_>, _>>()?;
    let samplers = models
        .into_iter()
        .map(|m| PreparedSampler::new(kind, m, options))
        .collect::<Result<Vec<_>, _>>()?;
    let precompute_seconds: f64 = samplers.iter().map(PreparedSampler::precompute_seconds).sum();

    let mut replicas = samplers
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut stream = RngStream::new(master_seed, streams::replica(set, t));
            let x = init.draw(s.model(), &mut stream)?;
            let h = partial_hamiltonian(s.model().coupling(), &x);
            Ok(Replica {
                model: s.model(),
                kernel: s.kernel(),
                x,
                stream,
                draws: Vec::with_capacity(schedule.total_iterations() * template.n()),
                seconds: 0.0,
                h,
            })
        })
        .collect::<Result<Vec<_>, SamplerError>>()?;

    let mut exchange_rng = RngStream::new(master_seed, streams::exchange(set));
    let mut stats = ExchangeStats::new(ladder);
    let betas = ladder.betas();
    for _ in 0..schedule.n_ex {
        replicas.par_iter_mut().for_each(|r| r.advance(schedule.n_mc));
        for t in 0..replicas.len() - 1 {
            let p = exchange_probability(betas[t], betas[t + 1], replicas[t].h, replicas[t + 1].h);
            let accepted = exchange_rng.uniform() < p;
            if accepted {
                let (lo, hi) = replicas.split_at_mut(t + 1);
                std::mem::swap(&mut lo[t].x, &mut hi[0].x);
                std::mem::swap(&mut lo[t].h, &mut hi[0].h);
            }
            stats.record(t, accepted);
        }
    }

    let traces = replicas
        .into_iter()
        .zip(&samplers)
        .map(|(r, s)| {
            ChainTrace::assemble(
                kind,
                s.model(),
                r.draws,
                schedule.burn_in,
                r.seconds,
                s.precompute_seconds(),
                master_seed,
                r.stream.stream_id(),
            )
        })
        .collect();
    Ok(TemperedRun {
        traces,
        exchange: stats,
        precompute_seconds,
    })
}

/// Independent replica sets `0..sets`, run one after another; each set's
/// replicas still advance concurrently.
#[allow(clippy::too_many_arguments)]
pub fn tempered_runs(
    kind: SamplerKind,
    template: &PottsModel,
    ladder: &TemperingLadder,
    options: SamplerOptions,
    schedule: TemperingSchedule,
    init: &Initialization,
    master_seed: u64,
    sets: usize,
) -> Result<Vec<TemperedRun>, TemperingError> {
    (0..sets)
        .map(|set| tempered_run(kind, template, ladder, options, schedule, init, master_seed, set))
        .collect()
}
