//! Differentiable training losses and their epoch schedules.
//!
//! A window's objective combines, summed over the window's steps:
//! grid-mean squared state error, a low-wavenumber spectral penalty,
//! prior-matching terms per hierarchy level, a log band-energy
//! penalty, and an off-stride hidden-drift penalty; plus a weighted
//! free-tail term, a closed-loop continuation term, and the latent
//! supervision used by one baseline. Weights and curriculum knobs
//! follow piecewise-linear epoch ramps.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::latents;
use crate::predictor::StepAux;
use crate::spectral::{self, BandSpec};

/// Piecewise-linear schedule: zero before `start`, rising to `v_max`
/// over `duration` epochs, constant afterwards. Zero duration is a
/// step at `start`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSpec {
    pub start: f64,
    pub duration: f64,
    pub v_max: f64,
}

impl RampSpec {
    pub fn constant(v: f64) -> Self {
        RampSpec { start: 0.0, duration: 0.0, v_max: v }
    }
}

pub fn ramp(epoch: f64, spec: &RampSpec) -> f64 {
    if spec.duration <= 0.0 {
        return if epoch >= spec.start { spec.v_max } else { 0.0 };
    }
    let t = ((epoch - spec.start) / spec.duration).clamp(0.0, 1.0);
    spec.v_max * t
}

/// How the low-wavenumber penalty treats magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralVariant {
    /// Squared coefficient error divided by the truth slice's squared
    /// norm (guarded).
    Relative,
    /// Mean squared coefficient error over the packed slice.
    Absolute,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralCfg {
    pub k: usize,
    pub include_dc: bool,
    pub variant: SpectralVariant,
    pub eps_rel: f64,
}

/// Grid-mean squared error against a constant truth state.
pub fn state_mse(tape: &mut Tape, pred: Var, truth: &[f64]) -> Var {
    let neg: Vec<f64> = truth.iter().map(|x| -x).collect();
    let d = tape.add_const(pred, &neg);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// Selects the packed low-k entries `[Re; Im]` from a full packed
/// spectrum of a length-`n` field: modes `0..k` with DC, `1..=k`
/// without; `2k` entries either way.
fn select_lowk(tape: &mut Tape, packed_full: Var, n: usize, k: usize, include_dc: bool) -> Var {
    let kmax = n / 2 + 1;
    let first = if include_dc { 0 } else { 1 };
    let re = tape.slice(packed_full, first, k);
    let im = tape.slice(packed_full, kmax + first, k);
    tape.concat(&[re, im])
}

fn select_lowk_plain(u: &[f64], k: usize, include_dc: bool) -> Vec<f64> {
    let kmax = u.len() / 2 + 1;
    let z = latents::encode_level(u, kmax);
    let first = if include_dc { 0 } else { 1 };
    let mut out = Vec::with_capacity(2 * k);
    out.extend_from_slice(&z[first..first + k]);
    out.extend_from_slice(&z[kmax + first..kmax + first + k]);
    out
}

/// Low-wavenumber spectral penalty from an already-computed full
/// packed spectrum of the prediction.
pub fn low_k_loss_from_packed(
    tape: &mut Tape,
    packed_full: Var,
    n: usize,
    truth: &[f64],
    cfg: &SpectralCfg,
) -> Var {
    let pred_slice = select_lowk(tape, packed_full, n, cfg.k, cfg.include_dc);
    let truth_slice = select_lowk_plain(truth, cfg.k, cfg.include_dc);
    let neg: Vec<f64> = truth_slice.iter().map(|x| -x).collect();
    let d = tape.add_const(pred_slice, &neg);
    let sq = tape.square(d);
    match cfg.variant {
        SpectralVariant::Absolute => tape.mean(sq),
        SpectralVariant::Relative => {
            let num = tape.sum(sq);
            let denom: f64 = truth_slice.iter().map(|x| x * x).sum::<f64>() + cfg.eps_rel;
            tape.scale(num, 1.0 / denom)
        }
    }
}

/// Convenience wrapper computing the packed spectrum itself.
pub fn low_k_loss(tape: &mut Tape, pred: Var, truth: &[f64], cfg: &SpectralCfg) -> Var {
    let n = tape.len_of(pred);
    let packed = tape.rfft_packed(pred, n / 2 + 1);
    low_k_loss_from_packed(tape, packed, n, truth, cfg)
}

/// Squared-error prior matching: sum over levels of the mean squared
/// difference between each prior and the encoded truth latent.
pub fn prior_match_l2(tape: &mut Tape, priors: &[Var], targets: &[Vec<f64>]) -> Var {
    assert_eq!(priors.len(), targets.len());
    let mut total: Option<Var> = None;
    for (&p, t) in priors.iter().zip(targets) {
        let neg: Vec<f64> = t.iter().map(|x| -x).collect();
        let d = tape.add_const(p, &neg);
        let sq = tape.square(d);
        let m = tape.mean(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, m),
            None => m,
        });
    }
    total.expect("at least one level")
}

/// Polar prior matching: per mode, squared log-amplitude mismatch plus
/// `1 - cos` phase mismatch, averaged within a level and summed over
/// levels with per-level phase weights.
pub fn prior_match_polar(
    tape: &mut Tape,
    priors: &[Var],
    targets: &[Vec<f64>],
    w_amp: f64,
    w_phi: &[f64],
    eps_a: f64,
) -> Var {
    assert_eq!(priors.len(), targets.len());
    assert_eq!(priors.len(), w_phi.len());
    let mut total: Option<Var> = None;
    for ((&p, t), &wp) in priors.iter().zip(targets).zip(w_phi) {
        let k = t.len() / 2;
        let re = tape.slice(p, 0, k);
        let im = tape.slice(p, k, k);
        let sq_re = tape.square(re);
        let sq_im = tape.square(im);
        let s = tape.add(sq_re, sq_im);
        let r = tape.sqrt_eps(s, 1e-24);
        let log_r = tape.ln_eps(r, eps_a);
        let target_log: Vec<f64> = (0..k)
            .map(|i| -((t[i].hypot(t[k + i]) + eps_a).ln()))
            .collect();
        let d_log = tape.add_const(log_r, &target_log);
        let amp = tape.square(d_log);

        let phi = tape.atan2(im, re);
        let target_phi: Vec<f64> = (0..k).map(|i| -t[k + i].atan2(t[i])).collect();
        let d_phi = tape.add_const(phi, &target_phi);
        let c = tape.cos(d_phi);
        let neg_c = tape.scale(c, -1.0);
        let phase = tape.add_const(neg_c, &[1.0]);

        let amp_w = tape.scale(amp, w_amp);
        let phase_w = tape.scale(phase, wp);
        let combined = tape.add(amp_w, phase_w);
        let m = tape.mean(combined);
        total = Some(match total {
            Some(acc) => tape.add(acc, m),
            None => m,
        });
    }
    total.expect("at least one level")
}

/// Sum over bands of squared log energy ratios between prediction and
/// truth, both floored at `eps_e`; energies are raw half-spectrum
/// sums, so any common normalization cancels.
pub fn band_energy_loss_from_packed(
    tape: &mut Tape,
    packed_full: Var,
    n: usize,
    truth: &[f64],
    bands: &BandSpec,
    eps_e: f64,
) -> Var {
    let kmax = n / 2 + 1;
    let truth_spec = spectral::rfft(truth, 1.0).expect("non-empty truth state");
    let truth_e = spectral::band_energies(&truth_spec, bands).expect("bands fit the grid");
    let sq = tape.square(packed_full);
    let mut total: Option<Var> = None;
    for (&(lo, hi), &te) in bands.ranges().iter().zip(&truth_e) {
        let re = tape.slice(sq, lo, hi - lo);
        let im = tape.slice(sq, kmax + lo, hi - lo);
        let re_s = tape.sum(re);
        let im_s = tape.sum(im);
        let e = tape.add(re_s, im_s);
        let log_e = tape.ln_eps(e, eps_e);
        let d = tape.add_const(log_e, &[-(te + eps_e).ln()]);
        let term = tape.square(d);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    total.expect("at least one band")
}

pub fn band_energy_loss(
    tape: &mut Tape,
    pred: Var,
    truth: &[f64],
    bands: &BandSpec,
    eps_e: f64,
) -> Var {
    let n = tape.len_of(pred);
    let packed = tape.rfft_packed(pred, n / 2 + 1);
    band_energy_loss_from_packed(tape, packed, n, truth, bands, eps_e)
}

/// Sum of squared hidden-state displacements on off-stride steps,
/// across steps and levels; `None` when every level was aligned.
pub fn hidden_drift_term(tape: &mut Tape, steps: &[StepAux]) -> Option<Var> {
    let mut total: Option<Var> = None;
    for aux in steps {
        for lvl in 0..aux.aligned.len() {
            if aux.aligned[lvl] {
                continue;
            }
            let d = tape.sub(aux.h_advanced[lvl], aux.h_entry[lvl]);
            let sq = tape.square(d);
            let s = tape.sum(sq);
            total = Some(match total {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
        }
    }
    total
}

/// Weight of the `k`-th free-tail step (1-based) in a tail of length
/// `l_tail`: later errors count more, the last with weight one.
pub fn tail_weight(k: usize, l_tail: usize) -> f64 {
    k as f64 / l_tail as f64
}

/// Current (post-ramp) weights of every objective term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_spec: f64,
    pub lambda_prior: f64,
    pub lambda_e: f64,
    pub gamma_h: f64,
    pub lambda_tail: f64,
    pub lambda_kstep: f64,
    pub lambda_latent: f64,
}

impl LossWeights {
    pub fn zeros() -> Self {
        LossWeights {
            lambda_u: 0.0,
            lambda_spec: 0.0,
            lambda_prior: 0.0,
            lambda_e: 0.0,
            gamma_h: 0.0,
            lambda_tail: 0.0,
            lambda_kstep: 0.0,
            lambda_latent: 0.0,
        }
    }
}

/// Unweighted objective terms of one window, already summed over the
/// window's steps (continuation term averaged over its steps).
#[derive(Debug, Clone, Copy, Default)]
pub struct WindowTerms {
    pub state: Option<Var>,
    pub spec: Option<Var>,
    pub prior: Option<Var>,
    pub energy: Option<Var>,
    pub drift: Option<Var>,
    pub tail: Option<Var>,
    pub kstep: Option<Var>,
    pub latent: Option<Var>,
}

/// Weighted contributions of each term; they sum to `total`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub state: f64,
    pub spec: f64,
    pub prior: f64,
    pub energy: f64,
    pub drift: f64,
    pub tail: f64,
    pub kstep: f64,
    pub latent: f64,
}

/// Combines the window terms under the given weights into a scalar
/// objective plus its per-term breakdown.
pub fn assemble(tape: &mut Tape, terms: &WindowTerms, w: &LossWeights) -> (Var, LossBreakdown) {
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape, term: Option<Var>, weight: f64, slot: &mut f64| {
        let Some(t) = term else { return };
        if weight == 0.0 {
            return;
        }
        let scaled = tape.scale(t, weight);
        *slot = tape.value(scaled)[0];
        total = Some(match total.take() {
            Some(acc) => tape.add(acc, scaled),
            None => scaled,
        });
    };
    push(tape, terms.state, w.lambda_u, &mut breakdown.state);
    push(tape, terms.spec, w.lambda_spec, &mut breakdown.spec);
    push(tape, terms.prior, w.lambda_prior, &mut breakdown.prior);
    push(tape, terms.energy, w.lambda_e, &mut breakdown.energy);
    push(tape, terms.drift, w.gamma_h, &mut breakdown.drift);
    push(tape, terms.tail, w.lambda_tail, &mut breakdown.tail);
    push(tape, terms.kstep, w.lambda_kstep, &mut breakdown.kstep);
    push(tape, terms.latent, w.lambda_latent, &mut breakdown.latent);
    let total = total.unwrap_or_else(|| tape.leaf(vec![0.0]));
    breakdown.total = tape.value(total)[0];
    (total, breakdown)
}
