//! Pure congestion-controller laws and their closed-form equilibria.
//!
//! Everything here is side-effect free: the engine owns the state and calls
//! these functions with the estimates each flow would actually act on
//! (remedies may substitute corrected values for `d_hat`/`r_hat`).

use thiserror::Error;

use crate::model::RenoConfig;

/// Windows never drop below one packet; a zero window would deadlock the
/// rate law `x = w / r_hat`.
pub const MIN_WINDOW: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("NONPOSITIVE_RTT")]
    NonpositiveRtt,
    /// The requested equilibrium has no measurable queuing delay; alpha is
    /// too small for the delay signal to exist at this operating point.
    #[error("ZERO_QUEUE_DELAY")]
    ZeroQueueDelay,
}

/// Controller-specific mode flag carried by [`FlowState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ControllerMode {
    #[default]
    Steady,
    /// Reno saw a loss within the last RTT.
    LossRecovery,
    /// Transmission suspended by the pause remedy.
    Paused,
    /// Error-estimation probe burst in flight.
    Probing,
}

/// Dynamic per-flow state as the engine tracks it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    /// Congestion window, packets.
    pub window: f64,
    /// Running propagation-delay estimate (min RTT, possibly remedy-corrected).
    pub d_hat: f64,
    /// Latest smoothed RTT estimate.
    pub r_hat: f64,
    /// Sending rate `window / r_hat`, packets/second.
    pub rate: f64,
    /// Alpha after utility scaling and/or adaptation.
    pub alpha_effective: f64,
    pub mode: ControllerMode,
}

impl FlowState {
    /// Apparent queuing delay, floored at zero.
    pub fn q_hat(&self) -> f64 {
        (self.r_hat - self.d_hat).max(0.0)
    }
}

/// One FAST window update:
/// `w' = gamma * (d_hat * w / r_hat + alpha) + (1 - gamma) * w`,
/// floored at one packet.
pub fn fast_update(
    window: f64,
    d_hat: f64,
    r_hat: f64,
    alpha_effective: f64,
    gamma: f64,
) -> Result<f64, ProtocolError> {
    if !(r_hat > 0.0) {
        return Err(ProtocolError::NonpositiveRtt);
    }
    let target = d_hat * window / r_hat + alpha_effective;
    Ok((gamma * target + (1.0 - gamma) * window).max(MIN_WINDOW))
}

/// Flow-level window derivative `gamma * alpha * (1 - q*x/alpha)`, in
/// packets/second. Tests use it to check that the discrete update drifts in
/// the same direction as the continuous law.
pub fn fast_flow_derivative(q: f64, x: f64, alpha: f64, gamma: f64) -> f64 {
    gamma * alpha * (1.0 - q * x / alpha)
}

/// Equilibrium throughput `alpha / q_star` of a FAST flow holding `alpha`
/// packets against queuing delay `q_star`.
pub fn fast_equilibrium_rate(alpha: f64, q_star: f64) -> Result<f64, ProtocolError> {
    if !(q_star > 0.0) {
        return Err(ProtocolError::ZeroQueueDelay);
    }
    Ok(alpha / q_star)
}

/// Total bottleneck backlog `n * alpha` of `n` homogeneous FAST flows with
/// correct propagation-delay estimates.
pub fn equilibrium_backlog(n: u32, alpha: f64) -> f64 {
    f64::from(n) * alpha
}

/// Per-RTT AIMD stand-in for the loss-based class: halve on loss, add
/// `additive_increase` per RTT otherwise. Floored at one packet.
pub fn reno_update(window: f64, cfg: &RenoConfig, loss_event: bool) -> f64 {
    if loss_event {
        (window * cfg.multiplicative_decrease).max(MIN_WINDOW)
    } else {
        (window + cfg.additive_increase).max(MIN_WINDOW)
    }
}

/// Standard Vegas band controller: estimate the packets this flow keeps
/// buffered as `w * (1 - d_hat/r_hat)` and steer it into `[alpha_v, beta_v]`
/// one packet per RTT.
pub fn vegas_update(
    window: f64,
    d_hat: f64,
    r_hat: f64,
    band: (f64, f64),
) -> Result<f64, ProtocolError> {
    if !(r_hat > 0.0) {
        return Err(ProtocolError::NonpositiveRtt);
    }
    let buffered = window * (1.0 - d_hat / r_hat);
    let (alpha_v, beta_v) = band;
    let next = if buffered < alpha_v {
        window + 1.0
    } else if buffered > beta_v {
        window - 1.0
    } else {
        window
    };
    Ok(next.max(MIN_WINDOW))
}
