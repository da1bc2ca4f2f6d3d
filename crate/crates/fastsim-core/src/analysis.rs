//! Closed-form oracles and fairness metrics.
//!
//! The decay and share curves here are the analytic ground truth the engine
//! is validated against; `fairness_report` is the trace post-processor that
//! turns a run into the numbers those comparisons need.

use alloc::vec::Vec;
use thiserror::Error;

use crate::model::{Protocol, ScenarioSpec, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("DEGENERATE")]
    Degenerate,
    #[error("NONPOSITIVE_RATE")]
    NonpositiveRate,
    #[error("EMPTY_WINDOW")]
    EmptyWindow,
}

/// Parameter bundle for the analytic curves: `k = d / q_f`, `rho = q_b / r`,
/// utility scale `mu`, and the buffer/backlog pair of the share bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisParams {
    pub k: f64,
    pub rho: f64,
    pub mu: f64,
    pub buffer: f64,
    pub k_pkts: f64,
}

/// Per-flow mean throughputs over the measure window plus the fairness
/// numbers derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    pub per_flow_mean_rate: Vec<f64>,
    pub jain_index: f64,
    /// Rate of the latest-starting flow over the earliest-starting one.
    pub last_to_first_ratio: f64,
    /// Mean loss-based rate over mean delay-based rate, when both classes run.
    pub reno_to_fast_ratio: Option<f64>,
    pub mean_fwd_backlog: f64,
    pub mean_bwd_backlog: f64,
}

/// Equilibrium rate of a FAST flow whose reverse path contributes a fraction
/// `rho` of the total round-trip time, with `d = k * q_f`:
/// `x*(rho) = (alpha / q_f) * (1 - rho) / (1 + k * rho)`.
///
/// Also returns the reverse queuing delay that realizes this operating
/// point, `q_b = (k + 1) * rho * q_f / (1 - rho)`.
pub fn reverse_decay_point(alpha: f64, q_f: f64, k: f64, rho: f64) -> (f64, f64) {
    let x_star = alpha / q_f * (1.0 - rho) / (1.0 + k * rho);
    let q_b = (k + 1.0) * rho * q_f / (1.0 - rho);
    (x_star, q_b)
}

/// The decay curve over a grid of `rho` values; each element is
/// `(rho, x_star, q_b)`.
pub fn reverse_decay_curve(
    alpha: f64,
    q_f: f64,
    k: f64,
    rho_grid: &[f64],
) -> Vec<(f64, f64, f64)> {
    rho_grid
        .iter()
        .map(|&rho| {
            let (x, q_b) = reverse_decay_point(alpha, q_f, k, rho);
            (rho, x, q_b)
        })
        .collect()
}

/// Long-run bandwidth share of a loss-based flow against a delay-based flow
/// keeping `k_pkts` packets in a buffer of `buffer` packets:
/// `(B - k) / (2k)`.
pub fn reno_fast_share_bound(buffer: f64, k_pkts: f64) -> Result<f64, AnalysisError> {
    if !(k_pkts > 0.0 && k_pkts < buffer) {
        return Err(AnalysisError::Degenerate);
    }
    Ok((buffer - k_pkts) / (2.0 * k_pkts))
}

/// FAST utility `alpha * ln(x)`. Scaling the utility by `mu` is identical to
/// substituting `alpha' = mu * alpha`, which is the identity the engine's
/// byte-exact equivalence test leans on.
pub fn fast_utility(x: f64, alpha: f64) -> Result<f64, AnalysisError> {
    if !(x > 0.0) {
        return Err(AnalysisError::NonpositiveRate);
    }
    Ok(alpha * libm::log(x))
}

/// Queue length and excess backlog of a single flow that overestimates its
/// propagation delay: with equilibrium RTT `r_star`, true delay `d` and
/// estimate `d_hat >= d`, the queue holds `l = C (r* - d)` packets, which
/// exceeds the intended `alpha = C (r* - d_hat)` by `C (d_hat - d)`.
pub fn persistent_overestimate_backlog(
    capacity: f64,
    r_star: f64,
    d: f64,
    d_hat: f64,
) -> (f64, f64) {
    let queue_len = capacity * (r_star - d);
    let excess = capacity * (d_hat - d);
    (queue_len, excess)
}

/// Jain fairness index `(sum x)^2 / (n * sum x^2)`; 1 iff all rates equal.
pub fn jain_index(rates: &[f64]) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    let sum: f64 = rates.iter().sum();
    let sq: f64 = rates.iter().map(|x| x * x).sum();
    if sq == 0.0 {
        return 0.0;
    }
    sum * sum / (rates.len() as f64 * sq)
}

/// Post-processes a trace into a [`FairnessReport`] over the spec's measure
/// window.
pub fn fairness_report(
    trace: &[TraceRecord],
    spec: &ScenarioSpec,
) -> Result<FairnessReport, AnalysisError> {
    let (lo, hi) = spec.measure_window;
    let window: Vec<&TraceRecord> = trace
        .iter()
        .filter(|rec| rec.t.0 >= lo.0 && rec.t.0 <= hi.0)
        .collect();
    if window.is_empty() {
        return Err(AnalysisError::EmptyWindow);
    }

    let n_flows = spec.flows.len();
    let samples = window.len() as f64;
    let mut mean_rates = alloc::vec![0.0f64; n_flows];
    let mut fwd_backlog = 0.0;
    let mut bwd_backlog = 0.0;
    for rec in &window {
        for (i, fs) in rec.flows.iter().enumerate() {
            mean_rates[i] += fs.rate;
        }
        fwd_backlog += rec.fwd_backlog;
        bwd_backlog += rec.bwd_backlog;
    }
    for r in &mut mean_rates {
        *r /= samples;
    }
    fwd_backlog /= samples;
    bwd_backlog /= samples;

    // Earliest/latest starter; ties broken by flow id so the ratio is
    // deterministic.
    let first = spec
        .flows
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            a.start_time
                .0
                .partial_cmp(&b.start_time.0)
                .unwrap()
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
        .ok_or(AnalysisError::EmptyWindow)?;
    let last = spec
        .flows
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.start_time
                .0
                .partial_cmp(&b.start_time.0)
                .unwrap()
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
        .ok_or(AnalysisError::EmptyWindow)?;
    let last_to_first = if mean_rates[first] > 0.0 {
        mean_rates[last] / mean_rates[first]
    } else {
        f64::INFINITY
    };

    let loss_based: Vec<f64> = spec
        .flows
        .iter()
        .enumerate()
        .filter(|(_, f)| f.protocol == Protocol::Reno)
        .map(|(i, _)| mean_rates[i])
        .collect();
    let delay_based: Vec<f64> = spec
        .flows
        .iter()
        .enumerate()
        .filter(|(_, f)| matches!(f.protocol, Protocol::Fast | Protocol::Vegas))
        .map(|(i, _)| mean_rates[i])
        .collect();
    let reno_to_fast = if !loss_based.is_empty() && !delay_based.is_empty() {
        let reno_mean = loss_based.iter().sum::<f64>() / loss_based.len() as f64;
        let fast_mean = delay_based.iter().sum::<f64>() / delay_based.len() as f64;
        if fast_mean > 0.0 {
            Some(reno_mean / fast_mean)
        } else {
            None
        }
    } else {
        None
    };

    Ok(FairnessReport {
        jain_index: jain_index(&mean_rates),
        per_flow_mean_rate: mean_rates,
        last_to_first_ratio: last_to_first,
        reno_to_fast_ratio: reno_to_fast,
        mean_fwd_backlog: fwd_backlog,
        mean_bwd_backlog: bwd_backlog,
    })
}
