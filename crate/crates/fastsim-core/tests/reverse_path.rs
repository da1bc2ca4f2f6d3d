//! Reverse-path congestion: the simulated equilibria must land on the
//! closed-form decay curve, and the two fixes must restore their predicted
//! operating points.

use fastsim_core::analysis::reverse_decay_point;
use fastsim_core::engine::run;
use fastsim_core::model::{
    CrossTraffic, Discipline, FlowConfig, LinkConfig, LinkSide, RedConfig, Remedy, ScenarioSpec,
    SimTime,
};

struct Measured {
    rate: f64,
    q_f: f64,
    q_b: f64,
    rho: f64,
}

/// Builds a single-flow dumbbell whose equilibrium sits at the requested
/// (q_f, rho) point: the forward link is sized to the predicted rate and the
/// reverse queue is pegged by cross traffic.
fn reverse_spec(
    alpha: f64,
    q_f: f64,
    k: f64,
    rho: f64,
    rate_factor: f64,
    remedies: Vec<Remedy>,
    red_reverse: bool,
) -> ScenarioSpec {
    let d = k * q_f;
    let (_, q_b) = reverse_decay_point(alpha, q_f, k, rho);
    let x_star = alpha / q_f * rate_factor;
    let c_b = 1_000.0;
    let bwd_link = if red_reverse {
        LinkConfig {
            capacity: c_b,
            buffer: q_b * c_b,
            discipline: Discipline::Red,
            red: Some(RedConfig {
                min_th: 0.5 * q_b,
                max_th: 1.5 * q_b,
                avg_weight: 0.01,
            }),
        }
    } else {
        LinkConfig {
            capacity: c_b,
            buffer: q_b * c_b,
            discipline: Discipline::DropTail,
            red: None,
        }
    };
    ScenarioSpec {
        flows: vec![FlowConfig {
            id: 0,
            alpha,
            fwd_prop_delay: d / 2.0,
            bwd_prop_delay: d / 2.0,
            remedies,
            ..FlowConfig::default()
        }],
        fwd_link: LinkConfig {
            capacity: x_star,
            buffer: 4.0 * x_star * q_f,
            discipline: Discipline::DropTail,
            red: None,
        },
        bwd_link,
        cross_traffic: vec![CrossTraffic {
            target: LinkSide::Bwd,
            rate: 1.5 * c_b,
            on_time: SimTime(2.0),
            off_time: SimTime(1.0e9),
        }],
        duration: SimTime(40.0),
        step: (d / 10.0).min(1.0e-3),
        sample_every: 0.05,
        measure_window: (SimTime(25.0), SimTime(40.0)),
        ..ScenarioSpec::default()
    }
}

fn measure(spec: &ScenarioSpec) -> Measured {
    let out = run(spec).expect("run");
    let recs: Vec<_> = out
        .trace
        .iter()
        .filter(|r| r.t.0 >= spec.measure_window.0 .0)
        .collect();
    let n = recs.len() as f64;
    let rate = recs.iter().map(|r| r.flows[0].rate).sum::<f64>() / n;
    let q_f = recs.iter().map(|r| r.fwd_backlog).sum::<f64>() / n / spec.fwd_link.capacity;
    let q_b = recs.iter().map(|r| r.bwd_backlog).sum::<f64>() / n / spec.bwd_link.capacity;
    let d = spec.flows[0].prop_delay();
    Measured {
        rate,
        q_f,
        q_b,
        rho: q_b / (d + q_f + q_b),
    }
}

fn assert_close(actual: f64, expected: f64, tol: f64, what: &str) {
    let err = (actual - expected).abs() / expected.abs();
    assert!(
        err <= tol,
        "{what}: {actual} vs expected {expected} (err {:.2}%)",
        100.0 * err
    );
}

#[test]
fn uncorrected_equilibria_follow_the_decay_curve() {
    let alpha = 200.0;
    // k = 0 exactly would need zero propagation delay, which the model
    // rejects; k = 0.01 approximates the flat curve to a fraction of the
    // tolerance.
    let mut previous_rate_factor = f64::INFINITY;
    for (k, q_f) in [(0.01, 0.2), (1.0, 0.01), (10.0, 0.01)] {
        let mut previous = f64::INFINITY;
        for rho in [0.1, 0.3, 0.5] {
            let factor = (1.0 - rho) / (1.0 + k * rho);
            let spec = reverse_spec(alpha, q_f, k, rho, factor, vec![], false);
            let m = measure(&spec);
            let (x_pred, _) = reverse_decay_point(alpha, q_f, k, rho);
            assert_close(m.rate, x_pred, 0.05, "decay rate");
            assert_close(m.q_f, q_f, 0.05, "forward queuing delay");
            assert_close(m.rho, rho, 0.05, "rho");
            assert!(m.rate < previous, "decay strictly decreasing in rho");
            previous = m.rate;
        }
        // Ordering across k at rho = 0.5: larger k decays further.
        let factor = 0.5 / (1.0 + k * 0.5);
        assert!(factor < previous_rate_factor);
        previous_rate_factor = factor;
    }
}

#[test]
fn partial_fix_keeps_residual_bias_and_exact_fix_removes_it() {
    let alpha = 200.0;
    let (k, q_f) = (1.0, 0.01);
    for rho in [0.1, 0.3, 0.5] {
        // Partial subtraction: equilibrium rate (alpha/q_f)(1 - rho).
        let spec = reverse_spec(
            alpha,
            q_f,
            k,
            rho,
            1.0 - rho,
            vec![Remedy::ReversePartial],
            false,
        );
        let m = measure(&spec);
        assert_close(m.rate, alpha / q_f * (1.0 - rho), 0.05, "partial-fix rate");
        // Assert the residual-factor identity on measured values too.
        let d = k * q_f;
        let r = d + m.q_f + m.q_b;
        assert_close(
            m.rate,
            alpha / m.q_f * (1.0 - m.q_b / r),
            0.05,
            "partial-fix residual factor",
        );

        // Exact fix: full forward-only rate alpha/q_f regardless of rho.
        let spec = reverse_spec(alpha, q_f, k, rho, 1.0, vec![Remedy::ReverseExact], false);
        let m = measure(&spec);
        assert_close(m.rate, alpha / q_f, 0.05, "exact-fix rate");
        assert_close(m.rate, alpha / m.q_f, 0.05, "exact-fix measured-q identity");
    }
}

#[test]
fn ecn_tracking_matches_ground_truth_subtraction() {
    // With the reverse queue marking between its thresholds, the tracker's
    // inferred q_b matches the measured one and the equilibrium lands on the
    // same partial-fix point.
    let alpha = 200.0;
    let (k, q_f, rho) = (1.0, 0.01, 0.3);
    let spec = reverse_spec(
        alpha,
        q_f,
        k,
        rho,
        1.0 - rho,
        vec![Remedy::ReverseEcnTrack],
        true,
    );
    let m = measure(&spec);
    assert_close(m.rate, alpha / q_f * (1.0 - rho), 0.06, "ecn-tracked rate");

    let out = run(&spec).expect("run");
    let rev = out.flows[0].reverse.as_ref().expect("reverse state");
    assert_close(rev.q_b_hat, m.q_b, 0.05, "inferred reverse delay");
    assert!(out.trace.last().unwrap().ecn_mark_prob > 0.0);
    assert!(out.trace.last().unwrap().ecn_mark_prob < 1.0);
}

#[test]
fn randomized_marking_keeps_tracker_near_ground_truth() {
    let alpha = 200.0;
    let (k, q_f, rho) = (1.0, 0.01, 0.3);
    let mut spec = reverse_spec(
        alpha,
        q_f,
        k,
        rho,
        1.0 - rho,
        vec![Remedy::ReverseEcnTrack],
        true,
    );
    spec.randomized_marking = true;
    spec.seed = 7;
    let m = measure(&spec);
    // Bernoulli sampling of the mark stream adds noise; the EWMA keeps the
    // inferred delay within a broad band of the true one.
    let out = run(&spec).expect("run");
    let rev = out.flows[0].reverse.as_ref().expect("reverse state");
    assert_close(rev.q_b_hat, m.q_b, 0.25, "randomized inferred reverse delay");
}
