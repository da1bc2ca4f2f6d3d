//! Deterministic fixed-step fluid simulation of a dumbbell with one forward
//! and one reverse bottleneck.
//!
//! Data leaves a source, reaches the forward queue after half its forward
//! propagation delay, and the corresponding acknowledgement stream loads the
//! reverse queue and returns to the source along the remaining path. RTT
//! samples are composed causally from both queue delays plus propagation, so
//! a window change at time t cannot influence the flow's own measurements
//! before one forward propagation delay has elapsed.
//!
//! Everything is integrated with explicit Euler steps of the configured
//! `dt`; with a fixed spec and seed two runs are bit-identical.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::model::{
    validate_scenario, FlowConfig, FlowSample, LinkConfig, LinkSide, Protocol, Remedy,
    ScenarioSpec, SimTime, TraceRecord, ValidationError,
};
use crate::protocols::{
    fast_update, reno_update, vegas_update, ControllerMode, FlowState, MIN_WINDOW,
};
use crate::remedies::{
    alpha_adapt, ee_capacity_estimate, ee_older_flow_count, reverse_ecn_track, reverse_exact_fix,
    reverse_partial_fix, AlphaAdaptState, PcPhase, PersistentCongestionState, RemedyError,
    ReverseCompState, ReverseMode,
};

/// EWMA weight applied to each new RTT sample.
const RTT_SMOOTHING: f64 = 0.5;

/// Relative rate change below which the settling detector considers a flow
/// stationary, evaluated over five consecutive update intervals.
const SETTLE_THRESHOLD: f64 = 0.01;
const SETTLE_HISTORY: usize = 6;

/// The error-estimation probe reads its displacement peak this many
/// propagation-delay estimates after the burst: the whole burst sits in the
/// bottleneck one forward lag after injection and stays there until the
/// sender's own echo closes the loop, so the peak is fully visible within
/// two path delays. Competing flows can only react later, and their
/// shedding pulls the queue down, never up, which the running maximum
/// ignores.
const PROBE_WINDOW_PROP_DELAYS: f64 = 2.2;

/// EWMA weight for the observed-mark stream under randomized marking.
const ECN_OBS_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("scenario failed validation ({0:?})")]
    Validation(Vec<ValidationError>),
}

/// Per-link dynamic state: backlog plus the conserved-mass counters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinkState {
    /// Instantaneous backlog, packets.
    pub backlog: f64,
    /// EWMA backlog used by RED, packets.
    pub avg_backlog: f64,
    pub cum_arrivals: f64,
    pub cum_delivered: f64,
    pub cum_losses: f64,
    /// Current RED mark probability (0 on drop-tail links).
    pub mark_prob: f64,
}

/// RED marking probability for an averaged backlog:
/// `clip((avg/C - min_th)+ / (max_th - min_th), 0, 1)`.
/// Zero for links without RED parameters.
pub fn red_mark_probability(avg_backlog: f64, link: &LinkConfig) -> f64 {
    match &link.red {
        Some(red) => {
            let delay = avg_backlog / link.capacity;
            ((delay - red.min_th).max(0.0) / (red.max_th - red.min_th)).clamp(0.0, 1.0)
        }
        None => 0.0,
    }
}

struct Link {
    cfg: LinkConfig,
    state: LinkState,
}

impl Link {
    fn new(cfg: LinkConfig) -> Self {
        Self {
            cfg,
            state: LinkState::default(),
        }
    }

    /// Advances the queue one step under aggregate `input_rate`, serving at
    /// capacity and spilling anything beyond the buffer. Returns
    /// (delivered mass, lost mass) for the step. Saturating by construction:
    /// backlog stays in [0, buffer] and mass is conserved exactly.
    fn step(&mut self, input_rate: f64, dt: f64) -> (f64, f64) {
        let mass_in = input_rate * dt;
        let available = self.state.backlog + mass_in;
        let served = available.min(self.cfg.capacity * dt);
        let mut backlog = available - served;
        let mut lost = 0.0;
        if backlog > self.cfg.buffer {
            lost = backlog - self.cfg.buffer;
            backlog = self.cfg.buffer;
        }
        self.state.backlog = backlog;
        self.state.cum_arrivals += mass_in;
        self.state.cum_delivered += served;
        self.state.cum_losses += lost;
        if let Some(red) = &self.cfg.red {
            self.state.avg_backlog += red.avg_weight * (backlog - self.state.avg_backlog);
            self.state.mark_prob = red_mark_probability(self.state.avg_backlog, &self.cfg);
        }
        (served, lost)
    }

    fn queue_delay(&self) -> f64 {
        self.state.backlog / self.cfg.capacity
    }

    fn conservation_error(&self) -> f64 {
        let lhs = self.state.cum_arrivals;
        let rhs = self.state.cum_delivered + self.state.cum_losses + self.state.backlog;
        if lhs > 0.0 {
            let diff = lhs - rhs;
            diff.max(-diff) / lhs
        } else {
            0.0
        }
    }
}

/// Fixed-length history of a per-step quantity; `lag(0)` is the value pushed
/// this step.
struct Ring {
    buf: Vec<f64>,
    head: usize,
}

impl Ring {
    fn new(max_lag: usize) -> Self {
        Self {
            buf: vec![0.0; max_lag + 1],
            head: 0,
        }
    }

    fn push(&mut self, v: f64) {
        self.head = (self.head + 1) % self.buf.len();
        self.buf[self.head] = v;
    }

    fn lag(&self, k: usize) -> f64 {
        let n = self.buf.len();
        debug_assert!(k < n);
        self.buf[(self.head + n - k) % n]
    }
}

/// Persistent-congestion actions a flow may have queued, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PcAction {
    Pause,
    ErrorEstimation,
}

enum PcStage {
    AwaitSettle(PcAction),
    Confirm(PcAction, u32),
    Paused {
        resume_step: u64,
        saved_window: f64,
    },
    Probing {
        measure_step: u64,
        baseline_q: f64,
        burst: f64,
        peak_q: f64,
    },
    Finished,
}

struct PcRuntime {
    stage: PcStage,
    queue: VecDeque<PcAction>,
    state: PersistentCongestionState,
    errors: Vec<RemedyError>,
}

struct AdaptRuntime {
    state: AlphaAdaptState,
    period_end_step: u64,
    arrivals_acc: f64,
    losses_acc: f64,
    q_acc: f64,
    q_samples: u64,
    seeded: bool,
}

struct FlowRuntime {
    cfg: FlowConfig,
    state: FlowState,
    started: bool,
    paused: bool,
    has_sample: bool,
    start_step: u64,
    // Path lags in steps: source->fwd queue, fwd queue->bwd queue,
    // bwd queue->source.
    l_in: usize,
    l_mid: usize,
    l_back: usize,
    sent: Ring,
    delivered: Ring,
    lost: Ring,
    next_update: f64,
    last_loss_event: f64,
    recent_rates: VecDeque<f64>,
    settled: bool,
    rev: Option<ReverseCompState>,
    ecn_obs: f64,
    pc: Option<PcRuntime>,
    adapt: Option<AdaptRuntime>,
    // Probe-burst emission: extra send rate for the next `pulse_steps_left`
    // steps.
    pulse_rate: f64,
    pulse_steps_left: u32,
}

impl FlowRuntime {
    fn new(cfg: FlowConfig, dt: f64) -> Self {
        let steps_of = |secs: f64| libm::round(secs / dt) as usize;
        let l_in = steps_of(cfg.fwd_prop_delay / 2.0);
        let l_mid = steps_of(cfg.fwd_prop_delay / 2.0 + cfg.bwd_prop_delay / 2.0);
        let l_back = steps_of(cfg.bwd_prop_delay / 2.0);
        let total = l_in + l_mid + l_back;

        let rev_mode = if cfg.has_remedy(Remedy::ReverseExact) {
            Some(ReverseMode::ExactPropAdd)
        } else if cfg.has_remedy(Remedy::ReversePartial) {
            Some(ReverseMode::PartialSubtract)
        } else if cfg.has_remedy(Remedy::ReverseEcnTrack) {
            // Tracking alone applies the subtraction scheme it was built for.
            Some(ReverseMode::EcnTrack)
        } else {
            None
        };

        let mut queue = VecDeque::new();
        if cfg.has_remedy(Remedy::PcPause) {
            queue.push_back(PcAction::Pause);
        }
        if cfg.has_remedy(Remedy::PcErrorEstimation) {
            queue.push_back(PcAction::ErrorEstimation);
        }
        let alpha_effective = cfg.mu * cfg.alpha;
        let probe_burst = cfg.remedy_params.probe_burst.unwrap_or(alpha_effective / 4.0);
        let pc = (!queue.is_empty()).then(|| {
            let first = queue.pop_front().expect("non-empty");
            PcRuntime {
                stage: PcStage::AwaitSettle(first),
                queue,
                state: PersistentCongestionState::new(probe_burst),
                errors: Vec::new(),
            }
        });

        let adapt = cfg.has_remedy(Remedy::AlphaAdapt).then(|| AdaptRuntime {
            state: AlphaAdaptState::new(alpha_effective),
            period_end_step: 0,
            arrivals_acc: 0.0,
            losses_acc: 0.0,
            q_acc: 0.0,
            q_samples: 0,
            seeded: false,
        });

        let prop = cfg.prop_delay();
        Self {
            start_step: libm::ceil(cfg.start_time.0 / dt) as u64,
            state: FlowState {
                window: cfg.initial_window,
                // Bootstrap pacing from the propagation delay (a handshake
                // RTT); d_hat proper starts at the first data sample.
                d_hat: prop,
                r_hat: prop,
                rate: 0.0,
                alpha_effective,
                mode: ControllerMode::Steady,
            },
            started: false,
            paused: false,
            has_sample: false,
            l_in,
            l_mid,
            l_back,
            sent: Ring::new(total),
            delivered: Ring::new(l_mid),
            lost: Ring::new(l_mid + l_back),
            next_update: f64::INFINITY,
            last_loss_event: f64::NEG_INFINITY,
            recent_rates: VecDeque::with_capacity(SETTLE_HISTORY),
            settled: false,
            rev: rev_mode.map(ReverseCompState::new),
            ecn_obs: 0.0,
            pc,
            adapt,
            pulse_rate: 0.0,
            pulse_steps_left: 0,
            cfg,
        }
    }

    fn update_interval(&self, dt: f64) -> f64 {
        match self.cfg.update_interval {
            crate::model::UpdateInterval::PerRtt => self.state.r_hat.max(dt),
            crate::model::UpdateInterval::Fixed(s) => s.max(dt),
        }
    }

    /// Effective (d_hat, r_hat) pair the window law should act on, after any
    /// reverse-path compensation.
    fn effective_estimates(&self) -> (f64, f64) {
        let (d_hat, r_hat) = (self.state.d_hat, self.state.r_hat);
        match &self.rev {
            None => (d_hat, r_hat),
            Some(rev) => match rev.mode {
                ReverseMode::ExactPropAdd => (reverse_exact_fix(d_hat, rev.q_b_hat), r_hat),
                ReverseMode::PartialSubtract | ReverseMode::EcnTrack => {
                    let corrected = reverse_partial_fix(r_hat, rev.q_b_hat)
                        .unwrap_or(r_hat)
                        .max(d_hat);
                    (d_hat, corrected)
                }
            },
        }
    }

    fn observe_rtt_sample(&mut self, sample: f64) {
        if self.has_sample {
            self.state.r_hat += RTT_SMOOTHING * (sample - self.state.r_hat);
            self.state.d_hat = self.state.d_hat.min(sample);
        } else {
            self.state.r_hat = sample;
            self.state.d_hat = sample;
            self.has_sample = true;
        }
    }

    fn push_settle_sample(&mut self, rate: f64) {
        if self.recent_rates.len() == SETTLE_HISTORY {
            self.recent_rates.pop_front();
        }
        self.recent_rates.push_back(rate);
        self.settled = self.recent_rates.len() == SETTLE_HISTORY
            && self
                .recent_rates
                .iter()
                .zip(self.recent_rates.iter().skip(1))
                .all(|(a, b)| {
                    let base = a.max(-*a).max(1.0e-12);
                    let diff = b - a;
                    diff.max(-diff) / base < SETTLE_THRESHOLD
                });
    }

    fn reset_settling(&mut self) {
        self.recent_rates.clear();
        self.settled = false;
    }
}

/// Final per-flow view returned with the trace: the controller state plus
/// whatever the remedies concluded.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDiagnostics {
    pub id: usize,
    pub state: FlowState,
    pub persistent_congestion: Option<PersistentCongestionState>,
    pub alpha_adapt: Option<AlphaAdaptState>,
    pub reverse: Option<ReverseCompState>,
    pub remedy_errors: Vec<RemedyError>,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub flows: Vec<FlowDiagnostics>,
    pub fwd_link: LinkState,
    pub bwd_link: LinkState,
    /// Largest relative violation of arrivals = delivered + losses + backlog
    /// seen at any sample instant, either link.
    pub max_conservation_error: f64,
}

struct Engine {
    spec: ScenarioSpec,
    dt: f64,
    step_index: u64,
    flows: Vec<FlowRuntime>,
    fwd: Link,
    bwd: Link,
    qf_hist: Ring,
    qb_hist: Ring,
    mark_hist: Ring,
    rng: ChaCha8Rng,
    sample_stride: u64,
    trace: Vec<TraceRecord>,
    max_conservation_error: f64,
    arrivals_scratch: Vec<f64>,
}

impl Engine {
    fn new(spec: ScenarioSpec) -> Self {
        let dt = spec.step;
        let flows: Vec<FlowRuntime> = spec
            .flows
            .iter()
            .cloned()
            .map(|cfg| FlowRuntime::new(cfg, dt))
            .collect();
        let max_obs_lag = flows
            .iter()
            .map(|f| f.l_mid + f.l_back + 1)
            .max()
            .unwrap_or(1);
        let sample_stride = (libm::round(spec.sample_every / dt) as u64).max(1);
        let n = flows.len();
        Self {
            dt,
            step_index: 0,
            flows,
            fwd: Link::new(spec.fwd_link.clone()),
            bwd: Link::new(spec.bwd_link.clone()),
            qf_hist: Ring::new(max_obs_lag),
            qb_hist: Ring::new(max_obs_lag),
            mark_hist: Ring::new(max_obs_lag),
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            sample_stride,
            trace: Vec::new(),
            max_conservation_error: 0.0,
            arrivals_scratch: vec![0.0; n],
            spec,
        }
    }

    fn cross_rate(&self, side: LinkSide, t: f64) -> f64 {
        self.spec
            .cross_traffic
            .iter()
            .filter(|c| c.target == side && c.on_time.0 <= t && t < c.off_time.0)
            .map(|c| c.rate)
            .sum()
    }

    fn step(&mut self) {
        let dt = self.dt;
        let t = self.step_index as f64 * dt;

        // Activation and send rates. A window is paced over the smoothed
        // RTT; paused and not-yet-started flows emit nothing. An active
        // probe pulse rides on top of the paced rate.
        for flow in &mut self.flows {
            if !flow.started && self.step_index >= flow.start_step {
                flow.started = true;
            }
            let mut rate = if flow.started && !flow.paused {
                flow.state.window / flow.state.r_hat
            } else {
                0.0
            };
            if flow.pulse_steps_left > 0 {
                rate += flow.pulse_rate;
                flow.pulse_steps_left -= 1;
            }
            flow.state.rate = rate;
            flow.sent.push(rate);
        }

        // Forward bottleneck.
        let mut input = self.cross_rate(LinkSide::Fwd, t);
        for (i, flow) in self.flows.iter().enumerate() {
            let arriving = flow.sent.lag(flow.l_in);
            self.arrivals_scratch[i] = arriving;
            input += arriving;
        }
        let (served, lost) = self.fwd.step(input, dt);
        let served_rate = served / dt;
        for (i, flow) in self.flows.iter_mut().enumerate() {
            let share = if input > 0.0 {
                self.arrivals_scratch[i] / input
            } else {
                0.0
            };
            flow.delivered.push(served_rate * share);
            flow.lost.push(lost * share);
            if let Some(adapt) = flow.adapt.as_mut() {
                if flow.started {
                    adapt.arrivals_acc += self.arrivals_scratch[i] * dt;
                    adapt.losses_acc += lost * share;
                }
            }
        }
        self.qf_hist.push(self.fwd.queue_delay());

        // Reverse bottleneck, loaded by the delivered ACK stream plus
        // explicit cross traffic.
        let mut ack_input = self.cross_rate(LinkSide::Bwd, t);
        for flow in &self.flows {
            ack_input += flow.delivered.lag(flow.l_mid) * self.spec.ack_size_ratio;
        }
        let (_, _) = self.bwd.step(ack_input, dt);
        self.qb_hist.push(self.bwd.queue_delay());
        self.mark_hist.push(self.bwd.state.mark_prob);

        // Observations: RTT echoes, reverse-delay estimates, loss signals.
        let randomized = self.spec.randomized_marking;
        for flow in &mut self.flows {
            if !flow.started {
                continue;
            }
            let total_lag = flow.l_in + flow.l_mid + flow.l_back;
            if flow.sent.lag(total_lag) > 0.0 {
                // A probe joining a queue waits behind the backlog already
                // present, not behind its own step's arrivals, so the delays
                // are read one step before the probe's arrival.
                let q_f = self.qf_hist.lag(flow.l_mid + flow.l_back + 1);
                let q_b = self.qb_hist.lag(flow.l_back + 1);
                let first_sample = !flow.has_sample;
                flow.observe_rtt_sample(flow.cfg.prop_delay() + q_f + q_b);
                if first_sample {
                    flow.next_update = t + flow.update_interval(dt);
                }

                if let Some(rev) = flow.rev.as_mut() {
                    match rev.mode {
                        ReverseMode::EcnTrack => {
                            let p = self.mark_hist.lag(flow.l_back + 1);
                            let observed = if randomized {
                                let mark = if (self.rng.next_u64() >> 11) as f64
                                    * (1.0 / 9007199254740992.0)
                                    < p
                                {
                                    1.0
                                } else {
                                    0.0
                                };
                                flow.ecn_obs += ECN_OBS_WEIGHT * (mark - flow.ecn_obs);
                                flow.ecn_obs
                            } else {
                                // Deterministic thinning: the marked fraction
                                // of the ACK stream is the probability itself.
                                p
                            };
                            rev.ecn_baseline = p;
                            rev.q_b_hat = reverse_ecn_track(observed, self.spec.bwd_link.red.as_ref().expect("validated"));
                        }
                        _ => rev.q_b_hat = self.qb_hist.lag(flow.l_back + 1),
                    }
                }
            }

            // Loss echoes drive Reno and abort in-flight probes.
            let lost_seen = flow.lost.lag(flow.l_mid + flow.l_back);
            if lost_seen > 1.0e-12 {
                if flow.cfg.protocol == Protocol::Reno
                    && t - flow.last_loss_event >= flow.state.r_hat
                {
                    flow.state.window = reno_update(flow.state.window, &self.spec.reno, true);
                    flow.last_loss_event = t;
                    flow.state.mode = ControllerMode::LossRecovery;
                }
                if let Some(pc) = flow.pc.as_mut() {
                    if let PcStage::Probing { burst, .. } = pc.stage {
                        // Probe overflowed the buffer: measurement void,
                        // retry with half the burst once re-settled.
                        pc.errors.push(RemedyError::ProbeLoss);
                        flow.pulse_steps_left = 0;
                        flow.state.mode = ControllerMode::Steady;
                        pc.state.probe_burst = burst / 2.0;
                        pc.state.phase = PcPhase::Settling;
                        pc.stage = if pc.state.probe_burst >= 1.0 {
                            PcStage::AwaitSettle(PcAction::ErrorEstimation)
                        } else {
                            pc.state.phase = PcPhase::Aborted;
                            PcStage::Finished
                        };
                        flow.reset_settling();
                    }
                }
            }

            // Track the probe's displacement peak.
            if let Some(pc) = flow.pc.as_mut() {
                if let PcStage::Probing { peak_q, .. } = &mut pc.stage {
                    *peak_q = peak_q.max(flow.state.q_hat());
                }
            }

            if let Some(adapt) = flow.adapt.as_mut() {
                adapt.q_acc += flow.state.q_hat();
                adapt.q_samples += 1;
            }
        }

        // Time-based remedy transitions.
        for flow in &mut self.flows {
            let Some(pc) = flow.pc.as_mut() else { continue };
            match pc.stage {
                PcStage::Paused {
                    resume_step,
                    saved_window,
                } => {
                    if self.step_index >= resume_step {
                        flow.state.window = saved_window;
                        flow.paused = false;
                        flow.state.mode = ControllerMode::Steady;
                        pc.state.phase = PcPhase::Corrected;
                        pc.stage = match pc.queue.pop_front() {
                            Some(next) => PcStage::AwaitSettle(next),
                            None => PcStage::Finished,
                        };
                        flow.reset_settling();
                        // Give the resumed flow one clean interval before the
                        // next window update.
                        flow.next_update = t + flow.update_interval(dt);
                    }
                }
                PcStage::Probing {
                    measure_step,
                    baseline_q,
                    burst,
                    peak_q,
                } => {
                    if self.step_index >= measure_step {
                        let delta_q = peak_q - baseline_q;
                        pc.state.probe_delta_q = delta_q;
                        flow.state.mode = ControllerMode::Steady;
                        match ee_capacity_estimate(burst, delta_q) {
                            Ok(c_probe) => {
                                let alpha = flow.state.alpha_effective;
                                let n_hat = ee_older_flow_count(c_probe, baseline_q, alpha);
                                // The integer flow count pins the operating
                                // point; re-deriving capacity from it and the
                                // settled queuing delay discards the probe's
                                // residual measurement noise.
                                let m = (1.0 + libm::sqrt(1.0 + 4.0 * n_hat)) / 2.0;
                                pc.state.n_hat = n_hat;
                                pc.state.c_hat = m * alpha / baseline_q;
                                let corrected =
                                    pc.state.apply_correction(flow.state.d_hat, alpha, dt);
                                flow.state.d_hat = corrected;
                            }
                            Err(err) => {
                                // Queue drained mid-probe; measurement void.
                                pc.errors.push(err);
                                pc.state.phase = PcPhase::Aborted;
                            }
                        }
                        pc.stage = match pc.queue.pop_front() {
                            Some(next) => PcStage::AwaitSettle(next),
                            None => PcStage::Finished,
                        };
                        flow.reset_settling();
                    }
                }
                _ => {}
            }
        }

        // Scheduled window updates. A flow holds its window still while a
        // probe burst is in flight: the measurement needs every rate in the
        // network unchanged, its own included.
        for flow in &mut self.flows {
            if !(flow.started && flow.has_sample && !flow.paused && t >= flow.next_update) {
                continue;
            }
            if let Some(pc) = &flow.pc {
                if matches!(pc.stage, PcStage::Probing { .. }) {
                    flow.next_update = t + flow.update_interval(dt);
                    continue;
                }
            }
            let (d_eff, r_eff) = flow.effective_estimates();
            let next_window = match flow.cfg.protocol {
                Protocol::Fast => fast_update(
                    flow.state.window,
                    d_eff,
                    r_eff,
                    flow.state.alpha_effective,
                    flow.cfg.gamma,
                )
                .unwrap_or(flow.state.window),
                Protocol::Vegas => {
                    vegas_update(flow.state.window, d_eff, r_eff, flow.cfg.vegas_band)
                        .unwrap_or(flow.state.window)
                }
                Protocol::Reno => {
                    if flow.state.mode == ControllerMode::LossRecovery {
                        flow.state.mode = ControllerMode::Steady;
                        flow.state.window
                    } else {
                        reno_update(flow.state.window, &self.spec.reno, false)
                    }
                }
            };
            flow.state.window = next_window;
            flow.push_settle_sample(flow.state.rate);

            // Persistent-congestion staging advances on update boundaries so
            // the settling statistics line up with the controller cadence.
            if let Some(pc) = flow.pc.as_mut() {
                match pc.stage {
                    PcStage::AwaitSettle(action) if flow.settled => {
                        pc.stage =
                            PcStage::Confirm(action, flow.cfg.remedy_params.settle_confirm.max(1));
                    }
                    PcStage::Confirm(action, left) => {
                        if left > 1 {
                            pc.stage = PcStage::Confirm(action, left - 1);
                        } else {
                            match action {
                                PcAction::Pause => {
                                    let pause_len = flow
                                        .state
                                        .r_hat
                                        .min(flow.cfg.remedy_params.pause_cap);
                                    let steps = (libm::round(pause_len / dt) as u64).max(1);
                                    pc.stage = PcStage::Paused {
                                        resume_step: self.step_index + steps,
                                        saved_window: flow.state.window,
                                    };
                                    pc.state.phase = PcPhase::Paused(self.step_index + steps);
                                    flow.paused = true;
                                    flow.state.mode = ControllerMode::Paused;
                                }
                                PcAction::ErrorEstimation => {
                                    let params = &flow.cfg.remedy_params;
                                    if let (Some(n), Some(c)) = (params.oracle_n, params.oracle_c) {
                                        pc.state.n_hat = f64::from(n);
                                        pc.state.c_hat = c;
                                        let corrected = pc.state.apply_correction(
                                            flow.state.d_hat,
                                            flow.state.alpha_effective,
                                            dt,
                                        );
                                        flow.state.d_hat = corrected;
                                        pc.stage = match pc.queue.pop_front() {
                                            Some(next) => PcStage::AwaitSettle(next),
                                            None => PcStage::Finished,
                                        };
                                        flow.reset_settling();
                                    } else {
                                        // Inject the burst as a one-step
                                        // train and watch for the resulting
                                        // queuing-delay peak over the next
                                        // couple of path delays.
                                        let burst = pc.state.probe_burst;
                                        let window =
                                            PROBE_WINDOW_PROP_DELAYS * flow.state.d_hat / dt;
                                        let horizon = libm::ceil(window) as u64 + 8;
                                        pc.stage = PcStage::Probing {
                                            measure_step: self.step_index + horizon,
                                            baseline_q: flow.state.q_hat(),
                                            burst,
                                            peak_q: flow.state.q_hat(),
                                        };
                                        pc.state.phase = PcPhase::Probing(self.step_index);
                                        pc.state.probe_baseline_q = flow.state.q_hat();
                                        pc.state.probe_launched_at = t;
                                        flow.pulse_rate = burst / dt;
                                        flow.pulse_steps_left = 1;
                                        flow.state.mode = ControllerMode::Probing;
                                    }
                                }
                            }
                        }
                    }
                    _ => {}
                }
            }

            flow.next_update = t + flow.update_interval(dt);
        }

        // Slow-timescale alpha adaptation.
        for flow in &mut self.flows {
            if !flow.started {
                continue;
            }
            let r_hat = flow.state.r_hat;
            let alpha_effective = flow.state.alpha_effective;
            let params = flow.cfg.remedy_params.clone();
            let dt_local = dt;
            if let Some(adapt) = flow.adapt.as_mut() {
                if !adapt.seeded {
                    adapt.seeded = true;
                    let period = params.adapt_every_rtts * r_hat;
                    adapt.period_end_step =
                        self.step_index + (libm::round(period / dt_local) as u64).max(1);
                }
                if self.step_index >= adapt.period_end_step {
                    let lambda_period = if adapt.arrivals_acc > 0.0 {
                        adapt.losses_acc / adapt.arrivals_acc
                    } else {
                        0.0
                    };
                    let q_period = if adapt.q_samples > 0 {
                        adapt.q_acc / adapt.q_samples as f64
                    } else {
                        0.0
                    };
                    adapt.state.lambda_hat += 0.5 * (lambda_period - adapt.state.lambda_hat);
                    adapt.state.q_hat_long += 0.5 * (q_period - adapt.state.q_hat_long);
                    let next_alpha = alpha_adapt(
                        alpha_effective,
                        adapt.state.q_hat_long,
                        adapt.state.lambda_hat,
                        params.adapt_gain,
                        params.alpha_min,
                        params.alpha_max,
                    );
                    adapt.state.alpha_target = next_alpha;
                    flow.state.alpha_effective = next_alpha;
                    adapt.arrivals_acc = 0.0;
                    adapt.losses_acc = 0.0;
                    adapt.q_acc = 0.0;
                    adapt.q_samples = 0;
                    let period = params.adapt_every_rtts * r_hat;
                    adapt.period_end_step =
                        self.step_index + (libm::round(period / dt_local) as u64).max(1);
                }
            }
        }

        self.step_index += 1;
        if self.step_index % self.sample_stride == 0 {
            self.record_sample();
        }
    }

    fn record_sample(&mut self) {
        let t = self.step_index as f64 * self.dt;
        let flows = self
            .flows
            .iter()
            .map(|f| FlowSample {
                window: f.state.window,
                rate: f.state.rate,
                d_hat: f.state.d_hat,
                r_hat: f.state.r_hat,
                q_hat: f.state.q_hat(),
            })
            .collect();
        let fwd_loss_rate = if self.fwd.state.cum_arrivals > 0.0 {
            self.fwd.state.cum_losses / self.fwd.state.cum_arrivals
        } else {
            0.0
        };
        self.trace.push(TraceRecord {
            t: SimTime(t),
            flows,
            fwd_backlog: self.fwd.state.backlog,
            bwd_backlog: self.bwd.state.backlog,
            fwd_loss_rate,
            ecn_mark_prob: self.bwd.state.mark_prob,
        });
        self.max_conservation_error = self
            .max_conservation_error
            .max(self.fwd.conservation_error())
            .max(self.bwd.conservation_error());
    }

    fn finish(self) -> RunOutput {
        RunOutput {
            trace: self.trace,
            flows: self
                .flows
                .into_iter()
                .map(|f| FlowDiagnostics {
                    id: f.cfg.id,
                    state: f.state,
                    persistent_congestion: f.pc.as_ref().map(|pc| pc.state.clone()),
                    alpha_adapt: f.adapt.map(|a| a.state),
                    reverse: f.rev,
                    remedy_errors: f.pc.map(|pc| pc.errors).unwrap_or_default(),
                })
                .collect(),
            fwd_link: self.fwd.state,
            bwd_link: self.bwd.state,
            max_conservation_error: self.max_conservation_error,
        }
    }
}

/// Runs a validated scenario from t = 0 to its duration and returns the
/// sampled trace plus final flow and link state.
pub fn run(spec: &ScenarioSpec) -> Result<RunOutput, EngineError> {
    let spec = validate_scenario(spec.clone()).map_err(EngineError::Validation)?;
    let steps = libm::round(spec.duration.0 / spec.step) as u64;
    let mut engine = Engine::new(spec);
    for _ in 0..steps {
        engine.step();
    }
    Ok(engine.finish())
}
