//! Objective-term oracles: every loss is pinned against a hand
//! computation on small inputs, and the assembled total must equal the
//! sum of its reported parts.

mod common;

use std::f64::consts::PI;

use chaos_forecast_core::autodiff::Tape;
use chaos_forecast_core::losses::{
    self, LossBreakdown, LossWeights, RampSpec, SpectralCfg, SpectralVariant, WindowTerms,
};
use chaos_forecast_core::spectral::BandSpec;

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol * (1.0 + b.abs()), "{a} vs {b}");
}

#[test]
fn ramp_is_zero_before_start_and_saturates() {
    let spec = RampSpec { start: 30.0, duration: 45.0, v_max: 0.5 };
    assert_eq!(losses::ramp(0.0, &spec), 0.0);
    assert_eq!(losses::ramp(29.9, &spec), 0.0);
    close(losses::ramp(75.0, &spec), 0.5, 1e-15);
    close(losses::ramp(200.0, &spec), 0.5, 1e-15);
    // Midway value pinned by direct arithmetic.
    close(losses::ramp(52.0, &spec), 0.5 * 22.0 / 45.0, 1e-15);
}

#[test]
fn ramp_with_zero_duration_is_a_step() {
    let spec = RampSpec { start: 10.0, duration: 0.0, v_max: 0.3 };
    assert_eq!(losses::ramp(9.99, &spec), 0.0);
    close(losses::ramp(10.0, &spec), 0.3, 1e-15);
    close(losses::ramp(11.0, &spec), 0.3, 1e-15);
}

#[test]
fn constant_ramp_ignores_epoch() {
    let spec = RampSpec::constant(0.7);
    close(losses::ramp(0.0, &spec), 0.7, 1e-15);
    close(losses::ramp(1e6, &spec), 0.7, 1e-15);
}

#[test]
fn state_mse_matches_hand_sum() {
    let mut tape = Tape::new();
    let pred = tape.leaf(vec![1.0, 2.0, 3.0, 4.0]);
    let truth = [0.5, 2.0, 2.0, 6.0];
    let m = losses::state_mse(&mut tape, pred, &truth);
    let expect = (0.25 + 0.0 + 1.0 + 4.0) / 4.0;
    close(tape.value(m)[0], expect, 1e-14);
}

#[test]
fn relative_low_k_loss_matches_naive_spectrum() {
    // n = 16 grid, truth a two-mode field, prediction a perturbation.
    let n = 16;
    let truth: Vec<f64> = (0..n)
        .map(|j| {
            let x = 2.0 * PI * j as f64 / n as f64;
            1.3 * (x).cos() + 0.4 * (3.0 * x).sin()
        })
        .collect();
    let pred: Vec<f64> = truth.iter().enumerate().map(|(j, v)| v + 0.01 * (j as f64)).collect();

    let cfg = SpectralCfg { k: 5, include_dc: false, variant: SpectralVariant::Relative, eps_rel: 1e-8 };
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let loss = losses::low_k_loss(&mut tape, p, &truth, &cfg);

    // Oracle: quadratic-cost DFT, modes 1..=5, packed [Re; Im].
    let ps = common::naive_rfft(&pred);
    let ts = common::naive_rfft(&truth);
    let mut num = 0.0;
    let mut den = cfg.eps_rel;
    for k in 1..=5 {
        let (dre, dim) = (ps[k].0 - ts[k].0, ps[k].1 - ts[k].1);
        num += dre * dre + dim * dim;
        den += ts[k].0 * ts[k].0 + ts[k].1 * ts[k].1;
    }
    close(tape.value(loss)[0], num / den, 1e-10);
}

#[test]
fn absolute_low_k_loss_of_single_cosine() {
    // Truth zero, prediction a*cos(2*pi*j/n): the only nonzero packed
    // entry is Re[1] = a*n/2, so the DC-included mean over 2k entries
    // is (a*n/2)^2 / (2k).
    let n = 40;
    let a = 0.3;
    let pred: Vec<f64> = (0..n).map(|j| a * (2.0 * PI * j as f64 / n as f64).cos()).collect();
    let truth = vec![0.0; n];
    let k = 3;
    let cfg = SpectralCfg { k, include_dc: true, variant: SpectralVariant::Absolute, eps_rel: 1e-8 };
    let mut tape = Tape::new();
    let p = tape.leaf(pred);
    let loss = losses::low_k_loss(&mut tape, p, &truth, &cfg);
    let amp = a * n as f64 / 2.0;
    close(tape.value(loss)[0], amp * amp / (2.0 * k as f64), 1e-10);
}

#[test]
fn l2_prior_penalty_is_mean_square_per_level() {
    let mut tape = Tape::new();
    // Two levels; a single displaced entry of size delta in each.
    let p1 = tape.leaf(vec![1.0, 0.0, 0.0, 0.0]);
    let p2 = tape.leaf(vec![0.0, 2.0]);
    let t1 = vec![0.5, 0.0, 0.0, 0.0];
    let t2 = vec![0.0, 0.0];
    let loss = losses::prior_match_l2(&mut tape, &[p1, p2], &[t1, t2]);
    close(tape.value(loss)[0], 0.25 / 4.0 + 4.0 / 2.0, 1e-14);
}

#[test]
fn polar_prior_penalty_pins_phase_and_amplitude() {
    // One level, one mode. Same radius, opposite phase: amplitude term
    // zero, phase term w_phi * (1 - cos(pi)) = 2 w_phi.
    let mut tape = Tape::new();
    let r = 0.8;
    let p = tape.leaf(vec![-r, 0.0]);
    let t = vec![r, 0.0];
    let w_phi = 1.7;
    let loss = losses::prior_match_polar(&mut tape, &[p], &[t.clone()], 1.0, &[w_phi], 1e-6);
    close(tape.value(loss)[0], 2.0 * w_phi, 1e-9);

    // Same phase, doubled radius: phase term zero, amplitude term
    // (log((2r+eps)/(r+eps)))^2.
    let mut tape = Tape::new();
    let p = tape.leaf(vec![2.0 * r, 0.0]);
    let loss = losses::prior_match_polar(&mut tape, &[p], &[t], 1.0, &[w_phi], 1e-6);
    let expect = ((2.0 * r + 1e-6).ln() - (r + 1e-6).ln()).powi(2);
    close(tape.value(loss)[0], expect, 1e-9);
}

#[test]
fn band_energy_loss_of_doubled_field() {
    // Prediction = 2 * truth quadruples every band energy, so each of
    // the bands contributes (ln 4)^2 and the total is n_bands*(ln 4)^2.
    let n = 64;
    let truth: Vec<f64> = (0..n)
        .map(|j| {
            let x = 2.0 * PI * j as f64 / n as f64;
            (x).sin() + 0.5 * (5.0 * x).cos() + 0.2 * (11.0 * x).sin() + 0.1 * (20.0 * x).cos()
        })
        .collect();
    let pred: Vec<f64> = truth.iter().map(|v| 2.0 * v).collect();
    let bands = BandSpec::default_for(n);
    let mut tape = Tape::new();
    let p = tape.leaf(pred);
    let loss = losses::band_energy_loss(&mut tape, p, &truth, &bands, 1e-12);
    let ln4sq = (4.0f64.ln()).powi(2);
    close(tape.value(loss)[0], bands.ranges().len() as f64 * ln4sq, 1e-6);
}

#[test]
fn tail_weights_ramp_linearly_to_one() {
    assert_eq!(losses::tail_weight(1, 2), 0.5);
    assert_eq!(losses::tail_weight(2, 2), 1.0);
    let l = 7;
    for k in 1..=l {
        close(losses::tail_weight(k, l), k as f64 / l as f64, 1e-15);
    }
}

#[test]
fn assembled_total_equals_sum_of_parts() {
    let mut tape = Tape::new();
    let mk = |tape: &mut Tape, v: f64| Some(tape.leaf(vec![v]));
    let terms = WindowTerms {
        state: mk(&mut tape, 2.0),
        spec: mk(&mut tape, 3.0),
        prior: mk(&mut tape, 5.0),
        energy: mk(&mut tape, 7.0),
        drift: mk(&mut tape, 11.0),
        tail: mk(&mut tape, 13.0),
        kstep: mk(&mut tape, 17.0),
        latent: mk(&mut tape, 19.0),
    };
    let w = LossWeights {
        lambda_u: 1.0,
        lambda_spec: 0.1,
        lambda_prior: 0.2,
        lambda_e: 0.3,
        gamma_h: 0.4,
        lambda_tail: 0.5,
        lambda_kstep: 0.6,
        lambda_latent: 0.7,
    };
    let (total, b) = losses::assemble(&mut tape, &terms, &w);
    let parts = b.state + b.spec + b.prior + b.energy + b.drift + b.tail + b.kstep + b.latent;
    close(b.total, parts, 1e-12);
    close(tape.value(total)[0], b.total, 1e-12);
    close(b.state, 2.0, 1e-12);
    close(b.spec, 0.3, 1e-12);
    close(b.drift, 0.4 * 11.0, 1e-12);
}

#[test]
fn assemble_skips_missing_and_zero_weight_terms() {
    let mut tape = Tape::new();
    let state = tape.leaf(vec![2.0]);
    let spec = tape.leaf(vec![3.0]);
    let terms = WindowTerms { state: Some(state), spec: Some(spec), ..Default::default() };
    let mut w = LossWeights::zeros();
    w.lambda_u = 1.0;
    let (total, b) = losses::assemble(&mut tape, &terms, &w);
    close(tape.value(total)[0], 2.0, 1e-14);
    assert_eq!(b.spec, 0.0);

    // Nothing at all still yields a well-formed zero objective.
    let (zero, b) = losses::assemble(&mut tape, &WindowTerms::default(), &LossWeights::zeros());
    assert_eq!(tape.value(zero)[0], 0.0);
    assert_eq!(b.total, 0.0);
}

#[test]
fn breakdown_serializes_with_stable_fields() {
    let b = LossBreakdown { total: 1.0, state: 0.5, ..Default::default() };
    let v = serde_json::to_value(b).unwrap();
    assert_eq!(v["total"], 1.0);
    assert_eq!(v["state"], 0.5);
    let back: LossBreakdown = serde_json::from_value(v).unwrap();
    assert_eq!(back.total, 1.0);
}

#[test]
fn gradients_flow_through_every_term() {
    // A composite objective built from live predictions must produce a
    // finite gradient for the inputs feeding every term.
    let n = 16;
    let truth: Vec<f64> = (0..n).map(|j| (2.0 * PI * j as f64 / n as f64).cos()).collect();
    let mut tape = Tape::new();
    let pred = tape.leaf((0..n).map(|j| 0.9 * truth[j] + 0.01).collect::<Vec<_>>());
    let cfg = SpectralCfg { k: 4, include_dc: false, variant: SpectralVariant::Relative, eps_rel: 1e-8 };
    let bands = BandSpec::default_for(n);
    let state = losses::state_mse(&mut tape, pred, &truth);
    let spec = losses::low_k_loss(&mut tape, pred, &truth, &cfg);
    let energy = losses::band_energy_loss(&mut tape, pred, &truth, &bands, 1e-12);
    let terms = WindowTerms {
        state: Some(state),
        spec: Some(spec),
        energy: Some(energy),
        ..Default::default()
    };
    let mut w = LossWeights::zeros();
    w.lambda_u = 1.0;
    w.lambda_spec = 0.5;
    w.lambda_e = 0.25;
    let (total, _) = losses::assemble(&mut tape, &terms, &w);
    let store = tape.backward(total);
    let g = store.get(pred).expect("objective reaches the prediction");
    assert_eq!(g.len(), n);
    assert!(g.iter().all(|x| x.is_finite()));
    assert!(g.iter().any(|x| x.abs() > 0.0));
}
