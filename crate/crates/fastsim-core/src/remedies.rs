//! Per-flow corrective strategies for the three delay-measurement
//! pathologies: reverse-path congestion inflating the RTT, persistent
//! congestion inflating the propagation-delay estimate, and the structural
//! disadvantage of delay-based flows against loss-based ones.
//!
//! The functions here are pure; the engine owns the surrounding state
//! machines (settling detection, probe scheduling, pause timing) and calls
//! in with the observations a real endpoint would have.

use thiserror::Error;

use crate::model::RedConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RemedyError {
    #[error("NEGATIVE_CORRECTED_RTT")]
    NegativeCorrectedRtt,
    /// Forward-path marking pollutes the reverse-delay signal.
    #[error("UNRELIABLE_SIGNAL")]
    UnreliableSignal,
    /// The probe burst overflowed the bottleneck buffer.
    #[error("PROBE_LOSS")]
    ProbeLoss,
    /// The bottleneck drained during the probe, voiding the measurement.
    #[error("QUEUE_DRAINED")]
    QueueDrained,
}

/// How a flow compensates for reverse-path queuing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReverseMode {
    /// Subtract the reverse queuing delay from the RTT fed to the window
    /// law. Removes most of the bias but leaves a residual factor
    /// `1 - q_b / r`.
    PartialSubtract,
    /// Treat the reverse queuing delay as part of the propagation delay.
    /// Restores the exact forward-only equilibrium `alpha / q_f`.
    ExactPropAdd,
    /// Like the subtraction scheme, but with `q_b` inferred from the
    /// reverse link's ECN mark probability instead of measured directly.
    EcnTrack,
}

/// Reverse-path compensation bookkeeping for one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseCompState {
    /// Current estimate of the backward queuing delay, seconds.
    pub q_b_hat: f64,
    pub mode: ReverseMode,
    /// Reference mark probability for the ECN tracker.
    pub ecn_baseline: f64,
}

impl ReverseCompState {
    pub fn new(mode: ReverseMode) -> Self {
        Self {
            q_b_hat: 0.0,
            mode,
            ecn_baseline: 0.0,
        }
    }
}

/// RTT corrected by subtracting the estimated reverse queuing delay:
/// `r' = r_hat - q_b_hat`.
pub fn reverse_partial_fix(r_hat: f64, q_b_hat: f64) -> Result<f64, RemedyError> {
    let corrected = r_hat - q_b_hat;
    if corrected < 0.0 {
        return Err(RemedyError::NegativeCorrectedRtt);
    }
    Ok(corrected)
}

/// Propagation-delay estimate with the reverse queuing delay folded in:
/// `d' = d_hat + q_b_hat`.
pub fn reverse_exact_fix(d_hat: f64, q_b_hat: f64) -> f64 {
    d_hat + q_b_hat
}

/// Inverts the RED marking law to recover the reverse queuing delay from an
/// observed mark probability: `q_b = min_th + p * (max_th - min_th)`,
/// clamped to the threshold band where the mapping saturates.
pub fn reverse_ecn_track(mark_prob: f64, red: &RedConfig) -> f64 {
    let p = mark_prob.clamp(0.0, 1.0);
    red.min_th + p * (red.max_th - red.min_th)
}

/// Minimum round-trip propagation delay for which a one-RTT pause can drain
/// the backlog of `n` equal flows: `n * alpha * sqrt(1 + 4n) / (2C)`.
/// Grows as `n^(3/2)`, so pausing only helps small flow counts on long paths.
pub fn pause_feasibility_bound(n: u32, alpha: f64, capacity: f64) -> f64 {
    let n = f64::from(n);
    n * alpha * libm::sqrt(1.0 + 4.0 * n) / (2.0 * capacity)
}

/// Bottleneck capacity recovered from a probe of `probe_burst` extra packets
/// that raised the observed queuing delay by `delta_q`.
pub fn ee_capacity_estimate(probe_burst: f64, delta_q: f64) -> Result<f64, RemedyError> {
    if !(delta_q > 0.0) {
        return Err(RemedyError::QueueDrained);
    }
    Ok(probe_burst / delta_q)
}

/// Number of older flows inferred from the flow's own settled apparent
/// queuing delay `q_app`.
///
/// With `m = C * q_app / alpha`: in the settled state the flow's backlog
/// share is `m * alpha` packets while each of the `n` older flows holds
/// `alpha`, and rate balance over the shared queue ties the two together as
/// `n = m * (m - 1)`. A lone flow measures `m = 1` and correctly infers
/// `n = 0`.
pub fn ee_older_flow_count(c_hat: f64, q_apparent: f64, alpha: f64) -> f64 {
    let m = c_hat * q_apparent / alpha;
    libm::round(m * (m - 1.0)).max(0.0)
}

/// Propagation-delay estimate corrected by the inferred persistent-congestion
/// error: `d' = d_hat - alpha * n_hat / c_hat`, clamped to `[floor, d_hat]`.
pub fn ee_corrected_delay(d_hat: f64, alpha: f64, n_hat: f64, c_hat: f64, floor: f64) -> f64 {
    (d_hat - alpha * n_hat / c_hat).clamp(floor.min(d_hat), d_hat)
}

/// Phase of the persistent-congestion machinery for one flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcPhase {
    /// Waiting for the settling detector.
    Settling,
    /// Transmission suspended; field is the resume time.
    Paused(u64),
    /// Probe burst in flight; field is the measurement step.
    Probing(u64),
    /// Correction applied (or pause completed).
    Corrected,
    /// Estimation abandoned (queue drained or repeated probe losses).
    Aborted,
}

/// Persistent-congestion remedy state for one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistentCongestionState {
    pub phase: PcPhase,
    /// Estimated number of older flows.
    pub n_hat: f64,
    /// Estimated bottleneck capacity, packets/second.
    pub c_hat: f64,
    /// Estimated propagation-delay error `alpha * n_hat / c_hat`, seconds.
    pub epsilon_hat: f64,
    /// Probe burst currently in use, packets.
    pub probe_burst: f64,
    /// Corrected propagation delay once available, seconds.
    pub d_prime: f64,
    /// Apparent queuing delay when the probe launched, seconds.
    pub probe_baseline_q: f64,
    /// Measured queue-delay displacement of the probe, seconds.
    pub probe_delta_q: f64,
    /// Launch instant of the most recent probe, seconds.
    pub probe_launched_at: f64,
}

impl PersistentCongestionState {
    pub fn new(probe_burst: f64) -> Self {
        Self {
            phase: PcPhase::Settling,
            n_hat: 0.0,
            c_hat: 0.0,
            epsilon_hat: 0.0,
            probe_burst,
            d_prime: 0.0,
            probe_baseline_q: 0.0,
            probe_delta_q: 0.0,
            probe_launched_at: 0.0,
        }
    }

    /// Final correction from the estimates at hand. Returns the corrected
    /// delay and records it together with the inputs.
    pub fn apply_correction(&mut self, d_hat: f64, alpha: f64, floor: f64) -> f64 {
        self.epsilon_hat = alpha * self.n_hat / self.c_hat;
        self.d_prime = ee_corrected_delay(d_hat, alpha, self.n_hat, self.c_hat, floor);
        self.phase = PcPhase::Corrected;
        self.d_prime
    }
}

/// Slow-timescale alpha adaptation bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaAdaptState {
    /// Long-term loss-rate EWMA, fraction of sent fluid lost.
    pub lambda_hat: f64,
    /// Long-term queuing-delay EWMA, seconds.
    pub q_hat_long: f64,
    /// Current adaptation target, packets.
    pub alpha_target: f64,
}

impl AlphaAdaptState {
    pub fn new(alpha: f64) -> Self {
        Self {
            lambda_hat: 0.0,
            q_hat_long: 0.0,
            alpha_target: alpha,
        }
    }
}

/// One adaptation step toward the loss-balanced operating point
/// `alpha = q / lambda`: `alpha += gain * (q/lambda - alpha)`, clamped.
///
/// With no observed losses alpha is left untouched; in a loss-free network
/// the target would otherwise diverge.
pub fn alpha_adapt(
    alpha_effective: f64,
    q_long: f64,
    lambda_long: f64,
    gain: f64,
    alpha_min: f64,
    alpha_max: f64,
) -> f64 {
    if !(lambda_long > 0.0) {
        return alpha_effective;
    }
    let target = q_long / lambda_long;
    (alpha_effective + gain * (target - alpha_effective)).clamp(alpha_min, alpha_max)
}
