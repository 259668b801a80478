//! Rank-normalized split-R̂, bulk effective sample size and ESS per second.
//!
//! The estimators follow the rank-normalization and Geyer truncation scheme
//! of Vehtari, Gelman, Simpson, Carpenter and Bürkner (2021).

use std::fmt::Write as _;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("all draws are identical")]
    ZeroVariance,
    #[error("need at least {min_chains} chains of {min_draws} draws, got {chains} x {draws}")]
    TooFewDraws {
        chains: usize,
        draws: usize,
        min_chains: usize,
        min_draws: usize,
    },
    #[error("chains have different lengths")]
    Ragged,
    #[error("non-finite draw in chain {chain} at position {index}")]
    NonFinite { chain: usize, index: usize },
}

fn validate(series: &[Vec<f64>], min_chains: usize, min_draws: usize) -> Result<usize, DiagnosticsError> {
    let draws = series.first().map_or(0, Vec::len);
    if series.iter().any(|c| c.len() != draws) {
        return Err(DiagnosticsError::Ragged);
    }
    if series.len() < min_chains || draws < min_draws {
        return Err(DiagnosticsError::TooFewDraws {
            chains: series.len(),
            draws,
            min_chains,
            min_draws,
        });
    }
    for (chain, c) in series.iter().enumerate() {
        if let Some(index) = c.iter().position(|v| !v.is_finite()) {
            return Err(DiagnosticsError::NonFinite { chain, index });
        }
    }
    let first = series[0][0];
    if series.iter().flatten().all(|&v| v == first) {
        return Err(DiagnosticsError::ZeroVariance);
    }
    Ok(draws)
}

/// Splits every chain into its first and second half, dropping the middle
/// draw when the length is odd.
pub fn split_chains(series: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * series.len());
    for c in series {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replaces every value by the normal quantile of its fractional average rank,
/// `Phi^{-1}((r - 3/8) / (S + 1/4))`, ranking jointly over all chains.
pub fn rank_normalize(series: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut flat: Vec<(f64, usize)> = series.iter().flatten().copied().zip(0..).collect();
    let total = flat.len();
    flat.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; total];
    let mut start = 0;
    while start < total {
        let mut end = start + 1;
        while end < total && flat[end].0 == flat[start].0 {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their average.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &(_, idx) in &flat[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    let normal = Normal::standard();
    let denom = total as f64 + 0.25;
    let mut out = Vec::with_capacity(series.len());
    let mut offset = 0;
    for c in series {
        out.push(
            (0..c.len())
                .map(|i| normal.inverse_cdf((ranks[offset + i] - 0.375) / denom))
                .collect(),
        );
        offset += c.len();
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Classic potential scale reduction on already prepared chains.
fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = mean(&chains.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    let between = n * sample_variance(&means);
    if within == 0.0 {
        return if between > 0.0 { f64::INFINITY } else { f64::NAN };
    }
    ((between / within + n - 1.0) / n).sqrt()
}

/// Rank-normalized split-R̂ (bulk variant).
///
/// Two chains stuck at different constants give `+inf`.
pub fn split_rank_normalized_rhat(series: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    validate(series, 2, 4)?;
    Ok(rhat_basic(&rank_normalize(&split_chains(series))))
}

/// Biased autocovariance at lags `0..n` via zero-padded FFT.
fn autocovariance(x: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf[..n].iter().map(|c| c.re / (size as f64 * n as f64)).collect()
}

/// Effective sample size of prepared (split, normalized) chains, with the
/// Geyer initial-positive and initial-monotone sequence truncation.
fn ess_basic(chains: &[Vec<f64>]) -> f64 {
    let c = chains.len();
    let n = chains[0].len();
    let total = (c * n) as f64;
    let mut planner = FftPlanner::new();
    let acov: Vec<Vec<f64>> = chains.iter().map(|x| autocovariance(x, &mut planner)).collect();
    let nf = n as f64;
    let chain_means: Vec<f64> = chains.iter().map(|x| mean(x)).collect();
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / c as f64;
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if c > 1 {
        var_plus += sample_variance(&chain_means);
    }
    let lag_mean = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / c as f64;
    let rho_at = |t: usize| 1.0 - (mean_var - lag_mean(t)) / var_plus;

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1);
    rho[1] = odd;
    let mut t = 0;
    while t + 5 < n && even + odd > 0.0 {
        t += 2;
        even = rho_at(t);
        odd = rho_at(t + 1);
        if even + odd >= 0.0 {
            rho[t] = even;
            rho[t + 1] = odd;
        }
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t] = even;
    }
    // Enforce monotone non-increasing pair sums.
    let mut t = 0;
    while t + 4 <= max_t {
        t += 2;
        if rho[t] + rho[t + 1] > rho[t - 2] + rho[t - 1] {
            rho[t] = (rho[t - 2] + rho[t - 1]) / 2.0;
            rho[t + 1] = rho[t];
        }
    }
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t]).max(1.0 / total.log10());
    (total / tau).clamp(total * 1e-4, 1.5 * total)
}

/// Bulk effective sample size: split chains, rank-normalize, combine chains
/// through the multi-chain variance decomposition.
///
/// The result lies in `[1e-4 CM, 1.5 CM]`.
pub fn ess(series: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    validate(series, 1, 8)?;
    Ok(ess_basic(&rank_normalize(&split_chains(series))))
}

/// `ess / seconds`, where `seconds` is the summed sampling time of all chains,
/// optionally plus the one-off precomputation time.
pub fn ess_per_second(ess: f64, sampling_seconds: f64, precompute_seconds: f64, include_precompute: bool) -> f64 {
    let seconds = if include_precompute {
        sampling_seconds + precompute_seconds
    } else {
        sampling_seconds
    };
    debug_assert!(seconds > 0.0);
    ess / seconds
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub sampler: String,
    pub model: String,
    pub beta: f64,
    pub q: usize,
    pub n: usize,
    pub chains: usize,
    pub draws_per_chain: usize,
    /// `None` when undefined (zero variance or too few draws).
    pub ess: Option<f64>,
    /// `None` when undefined; may be `+inf` for chains stuck at different values.
    pub rhat: Option<f64>,
    pub seconds_sampling: f64,
    pub seconds_precompute: f64,
    pub ess_per_sec: Option<f64>,
    pub ess_per_sec_incl_precompute: Option<f64>,
    pub pooled_mean_phi: f64,
    /// `sd(phi) / sqrt(ess)` with the sample sd over all pooled draws.
    pub pooled_se_phi: Option<f64>,
    /// `ok`, or the reasons a statistic is undefined.
    pub status: String,
}

/// Identifies a run in a report.
#[derive(Debug, Clone)]
pub struct RunLabel {
    pub sampler: String,
    pub model: String,
    pub beta: f64,
    pub q: usize,
    pub n: usize,
}

pub const CSV_HEADER: &str = "sampler,model,beta,q,n,ess,rhat,seconds_sampling,seconds_precompute,ess_per_sec,ess_per_sec_incl_precompute,mean_phi,se_phi,status";

impl DiagnosticsReport {
    pub fn from_series(label: RunLabel, series: &[Vec<f64>], seconds_sampling: f64, seconds_precompute: f64) -> Self {
        let mut notes = Vec::new();
        let ess_value = match ess(series) {
            Ok(v) => Some(v),
            Err(e) => {
                notes.push(format!("ess undefined: {e}"));
                None
            }
        };
        let rhat = match split_rank_normalized_rhat(series) {
            Ok(v) => Some(v),
            Err(e) => {
                notes.push(format!("rhat undefined: {e}"));
                None
            }
        };
        let pooled: Vec<f64> = series.iter().flatten().copied().collect();
        let pooled_mean_phi = if pooled.is_empty() { f64::NAN } else { mean(&pooled) };
        let pooled_se_phi = ess_value
            .filter(|_| pooled.len() > 1)
            .map(|e| sample_variance(&pooled).sqrt() / e.sqrt());
        let rate = |include| {
            ess_value
                .filter(|_| seconds_sampling > 0.0)
                .map(|e| ess_per_second(e, seconds_sampling, seconds_precompute, include))
        };
        Self {
            sampler: label.sampler,
            model: label.model,
            beta: label.beta,
            q: label.q,
            n: label.n,
            chains: series.len(),
            draws_per_chain: series.first().map_or(0, Vec::len),
            ess: ess_value,
            rhat,
            seconds_sampling,
            seconds_precompute,
            ess_per_sec: rate(false),
            ess_per_sec_incl_precompute: rate(true),
            pooled_mean_phi,
            pooled_se_phi,
            status: if notes.is_empty() {
                "ok".into()
            } else {
                notes.join("; ")
            },
        }
    }

    /// A row for a run that could not be carried out.
    pub fn failed(label: RunLabel, reason: &str) -> Self {
        Self {
            sampler: label.sampler,
            model: label.model,
            beta: label.beta,
            q: label.q,
            n: label.n,
            chains: 0,
            draws_per_chain: 0,
            ess: None,
            rhat: None,
            seconds_sampling: 0.0,
            seconds_precompute: 0.0,
            ess_per_sec: None,
            ess_per_sec_incl_precompute: None,
            pooled_mean_phi: f64::NAN,
            pooled_se_phi: None,
            status: format!("error: {reason}"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One CSV line matching [`CSV_HEADER`], numbers to 9 significant digits.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(sig9).unwrap_or_default();
        let mut row = String::new();
        write!(
            row,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&self.sampler),
            csv_field(&self.model),
            sig9(self.beta),
            self.q,
            self.n,
            opt(self.ess),
            opt(self.rhat),
            sig9(self.seconds_sampling),
            sig9(self.seconds_precompute),
            opt(self.ess_per_sec),
            opt(self.ess_per_sec_incl_precompute),
            sig9(self.pooled_mean_phi),
            opt(self.pooled_se_phi),
            csv_field(&self.status),
        )
        .unwrap();
        row
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Formats with 9 significant digits.
pub fn sig9(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn normals(chains: usize, draws: usize, seed: u64) -> Vec<Vec<f64>> {
        (0..chains)
            .map(|c| {
                let mut rng = RngStream::new(seed, c as u64);
                (0..draws).map(|_| rng.standard_normal()).collect()
            })
            .collect()
    }

    fn ar1(chains: usize, draws: usize, rho: f64, seed: u64) -> Vec<Vec<f64>> {
        let s = (1.0 - rho * rho).sqrt();
        (0..chains)
            .map(|c| {
                let mut rng = RngStream::new(seed, c as u64);
                let mut x = rng.standard_normal();
                (0..draws)
                    .map(|_| {
                        x = rho * x + s * rng.standard_normal();
                        x
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn split_drops_middle_of_odd_chains() {
        let s = split_chains(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
        assert_eq!(s, vec![vec![1.0, 2.0], vec![4.0, 5.0]]);
    }

    #[test]
    fn rank_normalization_uses_average_ranks() {
        let z = rank_normalize(&[vec![1.0, 2.0, 2.0, 3.0]]);
        assert_eq!(z[0][1], z[0][2]);
        assert!(z[0][0] < z[0][1] && z[0][1] < z[0][3]);
        // Rank 2.5 of 4 maps to (2.5 - 3/8) / 4.25 = 0.5 exactly.
        assert!(z[0][1].abs() < 1e-15);
    }

    #[test]
    fn rhat_iid_close_to_one() {
        let r = split_rank_normalized_rhat(&normals(4, 5000, 1)).unwrap();
        assert!((0.99..=1.02).contains(&r), "{r}");
    }

    #[test]
    fn rhat_detects_separated_chains() {
        assert_eq!(
            split_rank_normalized_rhat(&[vec![0.0; 10], vec![1.0; 10]]).unwrap(),
            f64::INFINITY
        );
        let mut s = normals(4, 1000, 2);
        for v in s[0].iter_mut() {
            *v += 3.0;
        }
        assert!(split_rank_normalized_rhat(&s).unwrap() > 1.2);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(
            split_rank_normalized_rhat(&[vec![2.0; 10], vec![2.0; 10]]),
            Err(DiagnosticsError::ZeroVariance)
        );
        assert_eq!(ess(&[vec![2.0; 10]]), Err(DiagnosticsError::ZeroVariance));
        assert!(matches!(
            split_rank_normalized_rhat(&[vec![1.0, 2.0, 3.0, 4.0]]),
            Err(DiagnosticsError::TooFewDraws { .. })
        ));
        assert!(matches!(
            ess(&[vec![1.0, 2.0, 3.0]]),
            Err(DiagnosticsError::TooFewDraws { .. })
        ));
        assert_eq!(ess(&[vec![1.0; 10], vec![1.0; 9]]), Err(DiagnosticsError::Ragged));
        assert!(matches!(
            ess(&[vec![f64::NAN; 10]]),
            Err(DiagnosticsError::NonFinite { .. })
        ));
    }

    #[test]
    fn ess_iid_near_total() {
        let e = ess(&normals(4, 10_000, 3)).unwrap();
        let ratio = e / 40_000.0;
        assert!((0.8..=1.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn ess_ar1_near_theory() {
        let e = ess(&ar1(4, 10_000, 0.5, 4)).unwrap();
        let target = 40_000.0 / 3.0;
        assert!((e - target).abs() < 0.25 * target, "{e} vs {target}");
    }

    #[test]
    fn ess_alternating_is_capped() {
        let s: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..1000).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect())
            .collect();
        let e = ess(&s).unwrap();
        assert!(e > 2000.0 && e <= 3000.0, "{e}");
    }

    #[test]
    fn permutation_and_monotone_invariance() {
        let s = ar1(4, 2000, 0.7, 5);
        let r = split_rank_normalized_rhat(&s).unwrap();
        let e = ess(&s).unwrap();
        let mut perm = s.clone();
        perm.reverse();
        assert_eq!(split_rank_normalized_rhat(&perm).unwrap(), r);
        assert_eq!(ess(&perm).unwrap(), e);
        let transformed: Vec<Vec<f64>> = s
            .iter()
            .map(|c| c.iter().map(|v| v.exp() * 3.0 + 1.0).collect())
            .collect();
        assert_eq!(split_rank_normalized_rhat(&transformed).unwrap(), r);
        assert_eq!(ess(&transformed).unwrap(), e);
    }

    #[test]
    fn rhat_decreases_toward_one() {
        // Dispersed starts, slow AR(1): median R̂ over seeds shrinks with M.
        let lengths = [50, 200, 800, 3200];
        let mut medians = Vec::new();
        for &m in &lengths {
            let mut rs: Vec<f64> = (0..20)
                .map(|seed| {
                    let mut s = ar1(4, m, 0.95, 100 + seed);
                    for (c, chain) in s.iter_mut().enumerate() {
                        let start = 4.0 * (c as f64 - 1.5);
                        for (t, v) in chain.iter_mut().enumerate() {
                            *v += start * 0.95f64.powi(t as i32 + 1);
                        }
                    }
                    split_rank_normalized_rhat(&s).unwrap()
                })
                .collect();
            rs.sort_by(f64::total_cmp);
            medians.push((rs[9] + rs[10]) / 2.0);
        }
        assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
        let last = *medians.last().unwrap();
        assert!((0.99..=1.05).contains(&last), "{last}");
    }

    #[test]
    fn ess_per_second_arithmetic() {
        assert_eq!(ess_per_second(1000.0, 10.0, 0.0, false), 100.0);
        assert_eq!(ess_per_second(1000.0, 10.0, 10.0, true), 50.0);
        assert_eq!(ess_per_second(1000.0, 10.0, 10.0, false), 100.0);
    }

    #[test]
    fn report_fields() {
        let s = normals(4, 1000, 6);
        let label = RunLabel {
            sampler: "ag_gibbs".into(),
            model: "lattice2d".into(),
            beta: 0.44,
            q: 2,
            n: 9,
        };
        let r = DiagnosticsReport::from_series(label.clone(), &s, 2.0, 1.0);
        let pooled: Vec<f64> = s.iter().flatten().copied().collect();
        let sd = sample_variance(&pooled).sqrt();
        assert!((r.pooled_se_phi.unwrap() - sd / r.ess.unwrap().sqrt()).abs() < 1e-15);
        assert!(r.ess.unwrap() <= 1.5 * 4000.0);
        assert_eq!(r.status, "ok");
        assert_eq!(r.ess_per_sec.unwrap(), r.ess.unwrap() / 2.0);
        assert_eq!(r.ess_per_sec_incl_precompute.unwrap(), r.ess.unwrap() / 3.0);
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
        assert!(row.starts_with("ag_gibbs,lattice2d,0.44,2,9,"));
        let back: DiagnosticsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);

        let bad = DiagnosticsReport::from_series(label, &[vec![1.0; 10], vec![1.0; 10]], 1.0, 0.0);
        assert!(bad.ess.is_none() && bad.rhat.is_none());
        assert!(bad.status.contains("identical"));
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(0.44), "0.44");
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(123456.7891234), "123456.789");
        assert_eq!(sig9(2.5e-7), "2.50000000e-7");
        assert_eq!(sig9(-7.0), "-7");
        assert_eq!(sig9(f64::INFINITY), "inf");
    }
}
