//! Domain types, units, and scenario validation.
//!
//! Conventions used throughout the workspace: rates in packets/second,
//! delays in seconds, windows/backlogs in packets (fractional allowed).
//! Buffer sizes count packets; RED thresholds are expressed in seconds of
//! queuing delay because the marking law divides backlog by capacity.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

/// A point in simulated time, in seconds.
///
/// Engine timestamps are integer multiples of the configured step `dt`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct SimTime(pub f64);

impl SimTime {
    pub fn seconds(self) -> f64 {
        self.0
    }

    pub fn is_valid(self) -> bool {
        self.0.is_finite() && self.0 >= 0.0
    }
}

/// Congestion-controller family of a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Fast,
    Reno,
    Vegas,
}

/// How often a flow re-evaluates its window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateInterval {
    /// Once per measured round-trip time (re-read at every update).
    PerRtt,
    /// Fixed wall-clock period in seconds.
    Fixed(f64),
}

/// Per-flow corrective strategies. See the `remedies` module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Remedy {
    /// Subtract the measured reverse queuing delay from the RTT estimate.
    ReversePartial,
    /// Fold the reverse queuing delay into the propagation-delay estimate.
    ReverseExact,
    /// Infer the reverse queuing delay from the reverse link's ECN mark
    /// probability instead of a ground-truth measurement.
    ReverseEcnTrack,
    /// Pause transmission for one RTT after settling so the bottleneck can
    /// drain and the true propagation delay becomes observable.
    PcPause,
    /// Probe the bottleneck to estimate capacity and the number of older
    /// flows, then subtract the inferred estimation error from d_hat.
    PcErrorEstimation,
    /// Slow-timescale adaptation of alpha against the long-run loss rate.
    AlphaAdapt,
}

/// Tunables for the remedies; all optional with sensible defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RemedyParams {
    /// Probe burst in packets for error estimation. Default: alpha/4.
    pub probe_burst: Option<f64>,
    /// Upper bound on the pause length, seconds.
    pub pause_cap: f64,
    /// Injected older-flow count; skips the probe phase when set.
    pub oracle_n: Option<u32>,
    /// Injected bottleneck capacity; skips the probe phase when set.
    pub oracle_c: Option<f64>,
    /// Extra update intervals to wait after the settling detector fires.
    pub settle_confirm: u32,
    /// Gain of the alpha adaptation loop, in (0, 1].
    pub adapt_gain: f64,
    /// Alpha adaptation period, in RTTs.
    pub adapt_every_rtts: f64,
    /// Clamp range for adapted alpha.
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for RemedyParams {
    fn default() -> Self {
        Self {
            probe_burst: None,
            pause_cap: 1.0,
            oracle_n: None,
            oracle_c: None,
            settle_confirm: 3,
            adapt_gain: 0.1,
            adapt_every_rtts: 100.0,
            alpha_min: 2.0,
            alpha_max: 1.0e4,
        }
    }
}

/// Static configuration of one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub id: usize,
    pub protocol: Protocol,
    /// Packets the flow aims to keep queued at the bottleneck.
    pub alpha: f64,
    /// Smoothing gain of the window update, in (0, 1].
    pub gamma: f64,
    /// Initial window, packets (>= 1).
    pub initial_window: f64,
    pub update_interval: UpdateInterval,
    pub start_time: SimTime,
    /// One-way forward propagation delay, seconds.
    pub fwd_prop_delay: f64,
    /// One-way backward propagation delay, seconds.
    pub bwd_prop_delay: f64,
    /// Utility weight; the engine runs the flow with alpha_effective = mu * alpha.
    pub mu: f64,
    /// Vegas dead band (alpha_v, beta_v) in packets; ignored by FAST/Reno.
    pub vegas_band: (f64, f64),
    pub remedies: Vec<Remedy>,
    pub remedy_params: RemedyParams,
}

impl FlowConfig {
    /// Round-trip propagation delay, seconds.
    pub fn prop_delay(&self) -> f64 {
        self.fwd_prop_delay + self.bwd_prop_delay
    }

    pub fn has_remedy(&self, r: Remedy) -> bool {
        self.remedies.contains(&r)
    }
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            id: 0,
            protocol: Protocol::Fast,
            alpha: 200.0,
            gamma: 0.5,
            initial_window: 10.0,
            update_interval: UpdateInterval::PerRtt,
            start_time: SimTime(0.0),
            fwd_prop_delay: 0.05,
            bwd_prop_delay: 0.05,
            mu: 1.0,
            vegas_band: (1.0, 3.0),
            remedies: Vec::new(),
            remedy_params: RemedyParams::default(),
        }
    }
}

/// Parameters of the loss-based (Reno-like) controller class.
///
/// `kappa` and `beta_exponent` describe the class's marginal utility
/// (kappa / w^beta); the runtime law is plain per-RTT AIMD.
#[derive(Debug, Clone, PartialEq)]
pub struct RenoConfig {
    pub kappa: f64,
    /// 2 for classical Reno, 1 for scalable variants, 1.2 for HighSpeed.
    pub beta_exponent: f64,
    /// Packets added per RTT without loss.
    pub additive_increase: f64,
    /// Window multiplier on a loss event, in (0, 1).
    pub multiplicative_decrease: f64,
}

impl Default for RenoConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            beta_exponent: 2.0,
            additive_increase: 1.0,
            multiplicative_decrease: 0.5,
        }
    }
}

/// Queue discipline of a bottleneck link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discipline {
    DropTail,
    Red,
}

/// RED marking parameters. Thresholds are seconds of queuing delay.
#[derive(Debug, Clone, PartialEq)]
pub struct RedConfig {
    pub min_th: f64,
    pub max_th: f64,
    /// EWMA weight for the averaged backlog, per step, in (0, 1].
    pub avg_weight: f64,
}

impl Default for RedConfig {
    fn default() -> Self {
        Self {
            min_th: 0.01,
            max_th: 0.03,
            avg_weight: 0.002,
        }
    }
}

/// One bottleneck link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    /// Capacity, packets/second.
    pub capacity: f64,
    /// Buffer, packets.
    pub buffer: f64,
    pub discipline: Discipline,
    pub red: Option<RedConfig>,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            capacity: 10_000.0,
            buffer: 2_000.0,
            discipline: Discipline::DropTail,
            red: None,
        }
    }
}

/// Which bottleneck a cross-traffic source loads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkSide {
    Fwd,
    Bwd,
}

/// Unresponsive constant-rate background traffic on one link.
///
/// Active while `on_time <= t < off_time`. Cross traffic is link-local:
/// it occupies queue space and shares overflow losses but produces no
/// acknowledgement stream of its own.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossTraffic {
    pub target: LinkSide,
    pub rate: f64,
    pub on_time: SimTime,
    pub off_time: SimTime,
}

/// Full declarative description of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub flows: Vec<FlowConfig>,
    pub reno: RenoConfig,
    pub fwd_link: LinkConfig,
    pub bwd_link: LinkConfig,
    pub cross_traffic: Vec<CrossTraffic>,
    pub duration: SimTime,
    /// Integration step, seconds. Must not exceed the smallest round-trip
    /// propagation delay divided by ten.
    pub step: f64,
    /// Trace sampling period, seconds.
    pub sample_every: f64,
    /// Window over which fairness metrics are averaged.
    pub measure_window: (SimTime, SimTime),
    pub seed: u64,
    /// Reverse-link occupancy per delivered forward packet.
    pub ack_size_ratio: f64,
    /// Sample RED marks from the seeded generator instead of deterministic
    /// thinning of the ACK stream.
    pub randomized_marking: bool,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            flows: Vec::new(),
            reno: RenoConfig::default(),
            fwd_link: LinkConfig::default(),
            bwd_link: LinkConfig::default(),
            cross_traffic: Vec::new(),
            duration: SimTime(60.0),
            step: 1.0e-3,
            sample_every: 0.01,
            measure_window: (SimTime(30.0), SimTime(60.0)),
            seed: 0,
            ack_size_ratio: 0.05,
            randomized_marking: false,
        }
    }
}

/// One sampling instant of all flow and link observables; the CSV row type.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    /// Congestion window, packets.
    pub window: f64,
    /// Sending rate, packets/second.
    pub rate: f64,
    /// Propagation-delay estimate, seconds.
    pub d_hat: f64,
    /// Smoothed RTT estimate, seconds.
    pub r_hat: f64,
    /// Apparent queuing delay r_hat - d_hat, seconds.
    pub q_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: SimTime,
    pub flows: Vec<FlowSample>,
    pub fwd_backlog: f64,
    pub bwd_backlog: f64,
    /// Cumulative lost fraction of forward-link arrivals.
    pub fwd_loss_rate: f64,
    /// Current mark probability of the reverse link (0 unless RED).
    pub ecn_mark_prob: f64,
}

/// A named invariant violation found by [`validate_scenario`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("VALIDATION({field}, {rule})")]
pub struct ValidationError {
    pub field: String,
    pub rule: String,
}

impl ValidationError {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

fn positive(errors: &mut Vec<ValidationError>, field: &str, v: f64) {
    if !(v.is_finite() && v > 0.0) {
        errors.push(ValidationError::new(field, "finite and > 0"));
    }
}

fn non_negative(errors: &mut Vec<ValidationError>, field: &str, v: f64) {
    if !(v.is_finite() && v >= 0.0) {
        errors.push(ValidationError::new(field, "finite and >= 0"));
    }
}

/// Checks every type invariant and returns the spec unchanged iff all hold;
/// otherwise the full list of violations.
///
/// Validation is read-only, so it is idempotent by construction.
pub fn validate_scenario(spec: ScenarioSpec) -> Result<ScenarioSpec, Vec<ValidationError>> {
    let mut errors = Vec::new();

    if spec.flows.is_empty() {
        errors.push(ValidationError::new("flows", "at least one flow required"));
    }

    for flow in &spec.flows {
        let fid = |name: &str| format!("flows[{}].{}", flow.id, name);

        if !(flow.gamma.is_finite() && flow.gamma > 0.0 && flow.gamma <= 1.0) {
            errors.push(ValidationError::new(fid("gamma"), "in (0,1]"));
        }
        positive(&mut errors, &fid("alpha"), flow.alpha);
        if !(flow.initial_window.is_finite() && flow.initial_window >= 1.0) {
            errors.push(ValidationError::new(fid("w0"), ">= 1 packet"));
        }
        non_negative(&mut errors, &fid("fwd_prop"), flow.fwd_prop_delay);
        non_negative(&mut errors, &fid("bwd_prop"), flow.bwd_prop_delay);
        if !(flow.prop_delay() > 0.0) {
            errors.push(ValidationError::new(
                fid("prop_delay"),
                "fwd_prop + bwd_prop > 0",
            ));
        }
        if !flow.start_time.is_valid() {
            errors.push(ValidationError::new(fid("start"), "finite and >= 0"));
        }
        positive(&mut errors, &fid("mu"), flow.mu);
        if let UpdateInterval::Fixed(s) = flow.update_interval {
            positive(&mut errors, &fid("update_interval"), s);
        }
        if flow.has_remedy(Remedy::ReversePartial) && flow.has_remedy(Remedy::ReverseExact) {
            errors.push(ValidationError::new(
                fid("remedies"),
                "reverse_partial and reverse_exact are mutually exclusive",
            ));
        }
        if flow.has_remedy(Remedy::ReverseEcnTrack) {
            if spec.bwd_link.discipline != Discipline::Red {
                errors.push(ValidationError::new(
                    fid("remedies"),
                    "reverse_ecn_track requires RED on the reverse link",
                ));
            }
            if spec.fwd_link.discipline == Discipline::Red {
                // Forward marks would pollute the reverse-delay signal.
                errors.push(ValidationError::new(
                    fid("remedies"),
                    "reverse_ecn_track signal unreliable with RED on the forward path",
                ));
            }
        }
        if flow.protocol == Protocol::Vegas {
            let (a, b) = flow.vegas_band;
            if !(a.is_finite() && b.is_finite() && 0.0 <= a && a <= b) {
                errors.push(ValidationError::new(fid("vegas_band"), "0 <= alpha_v <= beta_v"));
            }
        }
        let p = &flow.remedy_params;
        if let Some(burst) = p.probe_burst {
            positive(&mut errors, &fid("probe_burst"), burst);
        }
        positive(&mut errors, &fid("pause_cap"), p.pause_cap);
        if let Some(c) = p.oracle_c {
            positive(&mut errors, &fid("oracle_c"), c);
        }
        if !(p.adapt_gain.is_finite() && p.adapt_gain > 0.0 && p.adapt_gain <= 1.0) {
            errors.push(ValidationError::new(fid("adapt_gain"), "in (0,1]"));
        }
        positive(&mut errors, &fid("adapt_every_rtts"), p.adapt_every_rtts);
        if !(p.alpha_min > 0.0 && p.alpha_min <= p.alpha_max) {
            errors.push(ValidationError::new(fid("alpha_clamp"), "0 < alpha_min <= alpha_max"));
        }
    }

    for (name, link) in [("fwd_link", &spec.fwd_link), ("bwd_link", &spec.bwd_link)] {
        positive(&mut errors, &format!("{name}.capacity"), link.capacity);
        positive(&mut errors, &format!("{name}.buffer"), link.buffer);
        match (link.discipline, &link.red) {
            (Discipline::Red, Some(red)) => {
                if !(red.min_th.is_finite() && red.max_th.is_finite() && 0.0 <= red.min_th && red.min_th < red.max_th) {
                    errors.push(ValidationError::new(
                        format!("{name}.red"),
                        "0 <= min_th < max_th",
                    ));
                }
                if !(red.avg_weight > 0.0 && red.avg_weight <= 1.0) {
                    errors.push(ValidationError::new(
                        format!("{name}.red.avg_weight"),
                        "in (0,1]",
                    ));
                }
            }
            (Discipline::Red, None) => {
                errors.push(ValidationError::new(
                    format!("{name}.red"),
                    "RED discipline requires red parameters",
                ));
            }
            (Discipline::DropTail, Some(_)) => {
                errors.push(ValidationError::new(
                    format!("{name}.red"),
                    "red parameters require RED discipline",
                ));
            }
            (Discipline::DropTail, None) => {}
        }
    }

    positive(&mut errors, "reno.kappa", spec.reno.kappa);
    positive(&mut errors, "reno.beta_exponent", spec.reno.beta_exponent);
    positive(&mut errors, "reno.additive_increase", spec.reno.additive_increase);
    let md = spec.reno.multiplicative_decrease;
    if !(md.is_finite() && md > 0.0 && md < 1.0) {
        errors.push(ValidationError::new("reno.multiplicative_decrease", "in (0,1)"));
    }

    for (i, cross) in spec.cross_traffic.iter().enumerate() {
        non_negative(&mut errors, &format!("cross[{i}].rate"), cross.rate);
        if !cross.on_time.is_valid() || !cross.off_time.is_valid() || cross.on_time.0 > cross.off_time.0 {
            errors.push(ValidationError::new(
                format!("cross[{i}].window"),
                "0 <= on_time <= off_time",
            ));
        }
    }

    if !spec.duration.is_valid() {
        errors.push(ValidationError::new("duration", "finite and >= 0"));
    }
    positive(&mut errors, "step", spec.step);
    positive(&mut errors, "sample_every", spec.sample_every);
    if spec.step > 0.0 {
        let min_prop = spec
            .flows
            .iter()
            .map(FlowConfig::prop_delay)
            .fold(f64::INFINITY, f64::min);
        if min_prop.is_finite() && spec.step > min_prop / 10.0 {
            errors.push(ValidationError::new(
                "step",
                "at most min round-trip propagation delay / 10",
            ));
        }
    }
    let (lo, hi) = spec.measure_window;
    if !(lo.is_valid() && hi.is_valid() && lo.0 <= hi.0 && hi.0 <= spec.duration.0) {
        errors.push(ValidationError::new(
            "measure_window",
            "0 <= start <= end <= duration",
        ));
    }
    if !(spec.ack_size_ratio.is_finite() && spec.ack_size_ratio >= 0.0) {
        errors.push(ValidationError::new("ack_size_ratio", "finite and >= 0"));
    }

    if errors.is_empty() {
        Ok(spec)
    } else {
        Err(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn two_flow_dumbbell() -> ScenarioSpec {
        ScenarioSpec {
            flows: vec![
                FlowConfig {
                    id: 0,
                    ..FlowConfig::default()
                },
                FlowConfig {
                    id: 1,
                    fwd_prop_delay: 0.03,
                    bwd_prop_delay: 0.03,
                    ..FlowConfig::default()
                },
            ],
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn valid_spec_returned_unchanged() {
        let spec = two_flow_dumbbell();
        let validated = validate_scenario(spec.clone()).expect("valid spec");
        assert_eq!(validated, spec);
        // Idempotent: validating a validated spec returns it unchanged.
        assert_eq!(validate_scenario(validated.clone()).unwrap(), spec);
    }

    #[test]
    fn gamma_zero_rejected() {
        let mut spec = two_flow_dumbbell();
        spec.flows[0].gamma = 0.0;
        let errors = validate_scenario(spec).unwrap_err();
        assert!(errors
            .iter()
            .any(|e| e.field == "flows[0].gamma" && e.rule.contains("(0,1]")));
    }

    #[test]
    fn red_equal_thresholds_rejected() {
        let mut spec = two_flow_dumbbell();
        spec.fwd_link.discipline = Discipline::Red;
        spec.fwd_link.red = Some(RedConfig {
            min_th: 0.02,
            max_th: 0.02,
            avg_weight: 0.002,
        });
        let errors = validate_scenario(spec).unwrap_err();
        assert!(errors.iter().any(|e| e.rule.contains("min_th < max_th")));
    }

    #[test]
    fn empty_flow_list_rejected() {
        let spec = ScenarioSpec::default();
        let errors = validate_scenario(spec).unwrap_err();
        assert!(errors.iter().any(|e| e.field == "flows"));
    }

    #[test]
    fn red_discipline_requires_parameters() {
        let mut spec = two_flow_dumbbell();
        spec.bwd_link.discipline = Discipline::Red;
        spec.bwd_link.red = None;
        assert!(validate_scenario(spec).is_err());
    }

    #[test]
    fn partial_and_exact_fix_conflict() {
        let mut spec = two_flow_dumbbell();
        spec.flows[0].remedies = vec![Remedy::ReversePartial, Remedy::ReverseExact];
        let errors = validate_scenario(spec).unwrap_err();
        assert!(errors.iter().any(|e| e.rule.contains("mutually exclusive")));
    }

    #[test]
    fn ecn_tracking_needs_reverse_red_and_plain_forward() {
        let mut spec = two_flow_dumbbell();
        spec.flows[0].remedies = vec![Remedy::ReverseEcnTrack];
        // No RED on the reverse link.
        assert!(validate_scenario(spec.clone()).is_err());

        spec.bwd_link.discipline = Discipline::Red;
        spec.bwd_link.red = Some(RedConfig::default());
        assert!(validate_scenario(spec.clone()).is_ok());

        // RED on the forward path breaks the signal.
        spec.fwd_link.discipline = Discipline::Red;
        spec.fwd_link.red = Some(RedConfig::default());
        let errors = validate_scenario(spec).unwrap_err();
        assert!(errors.iter().any(|e| e.rule.contains("unreliable")));
    }

    #[test]
    fn step_must_resolve_propagation_delay() {
        let mut spec = two_flow_dumbbell();
        spec.flows[1].fwd_prop_delay = 0.004;
        spec.flows[1].bwd_prop_delay = 0.004;
        spec.step = 1.0e-3; // > 0.008 / 10
        let errors = validate_scenario(spec).unwrap_err();
        assert!(errors.iter().any(|e| e.field == "step"));
    }

    #[test]
    fn all_violations_reported_together() {
        let mut spec = two_flow_dumbbell();
        spec.flows[0].gamma = 1.5;
        spec.flows[1].alpha = -1.0;
        spec.reno.multiplicative_decrease = 1.0;
        let errors = validate_scenario(spec).unwrap_err();
        assert!(errors.len() >= 3);
    }
}
