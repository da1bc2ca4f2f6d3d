use fastsim_core::analysis::fairness_report;
use fastsim_core::engine::run;
use fastsim_core::model::*;

fn adapt_spec(buffer: f64, alpha0: f64, c: f64, d: f64, ai: f64, gain: f64, every: f64, adapt: bool) -> ScenarioSpec {
    ScenarioSpec {
        flows: vec![
            FlowConfig {
                id: 0,
                protocol: Protocol::Reno,
                fwd_prop_delay: d / 2.0,
                bwd_prop_delay: d / 2.0,
                ..FlowConfig::default()
            },
            FlowConfig {
                id: 1,
                protocol: Protocol::Fast,
                alpha: alpha0,
                fwd_prop_delay: d / 2.0,
                bwd_prop_delay: d / 2.0,
                remedies: if adapt { vec![Remedy::AlphaAdapt] } else { vec![] },
                remedy_params: RemedyParams { adapt_gain: gain, adapt_every_rtts: every, ..RemedyParams::default() },
                ..FlowConfig::default()
            },
        ],
        reno: RenoConfig { additive_increase: ai, ..RenoConfig::default() },
        fwd_link: LinkConfig { capacity: c, buffer, discipline: Discipline::DropTail, red: None },
        duration: SimTime(120.0),
        step: (d / 10.0f64).min(1.0e-3),
        sample_every: 0.05,
        measure_window: (SimTime(80.0), SimTime(120.0)),
        ..ScenarioSpec::default()
    }
}

fn window_mean_backlog(out: &fastsim_core::engine::RunOutput, lo: f64, hi: f64) -> f64 {
    let recs: Vec<f64> = out.trace.iter().filter(|r| (lo..=hi).contains(&r.t.0)).map(|r| r.fwd_backlog).collect();
    recs.iter().sum::<f64>() / recs.len() as f64
}

#[test]
fn scratch() {
    for (c, d, ai, buffer, alpha0) in [
        (4_000.0, 0.02, 6.0, 150.0, 40.0),
        (4_000.0, 0.02, 6.0, 175.0, 45.0),
        (4_000.0, 0.02, 6.5, 200.0, 50.0),
        (4_000.0, 0.02, 7.0, 200.0, 50.0),
        (4_000.0, 0.02, 6.0, 200.0, 50.0),
    ] {
        {
            let spec = adapt_spec(buffer, alpha0, c, d, ai, 0.3, 50.0, true);
            let out = run(&spec).expect("run");
            let rep = fairness_report(&out.trace, &spec).expect("report");
            let diag = out.flows[1].alpha_adapt.as_ref().unwrap();
            let alpha_eff = out.flows[1].state.alpha_effective;
            let fp = alpha_eff * diag.lambda_hat / diag.q_hat_long;
            let before = window_mean_backlog(&out, 10.0, 22.0);
            let after = window_mean_backlog(&out, 80.0, 120.0);
            println!(
                "C={c} d={d} ai={ai} B={buffer} a0={alpha0}: a*={alpha_eff:6.1} lam={:9.2e} q={:7.4} a*lam/q={fp:5.2} share={:.3} bk {before:6.0}->{after:6.0} ({:+.1}%)",
                diag.lambda_hat, diag.q_hat_long, 1.0 / rep.reno_to_fast_ratio.unwrap(),
                100.0 * (after - before) / before
            );
        }
    }
}
