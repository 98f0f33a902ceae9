//! Per-level recurrent priors with multirate clocking.
//!
//! Each hierarchy level owns a gated recurrent cell plus a bounded
//! linear readout producing the level's latent prior. Levels tick on
//! their own stride: a level is aligned at step `t` when `t` is a
//! multiple of its stride (so all levels are aligned at `t = 0`).
//! Off-stride the hidden state is either held unchanged or blended
//! toward the candidate update with a fixed factor; the readout always
//! comes from the post-policy hidden state. After fusion with the
//! posterior, a small linear correction nudges the hidden state by the
//! fused-minus-prior innovation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::params::ParamBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffStridePolicy {
    Hold,
    Ema,
}

/// Clocking for one level. `alpha` is only used by the EMA policy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MultiRateSpec {
    pub stride: usize,
    pub policy: OffStridePolicy,
    pub alpha: f64,
}

impl MultiRateSpec {
    pub fn every_step() -> Self {
        MultiRateSpec { stride: 1, policy: OffStridePolicy::Hold, alpha: 1.0 }
    }

    pub fn with_stride(stride: usize) -> Self {
        MultiRateSpec { stride, policy: OffStridePolicy::Hold, alpha: 1.0 / stride as f64 }
    }

    pub fn aligned(&self, t: usize) -> bool {
        t % self.stride == 0
    }
}

/// Gated recurrent cell. Reset and update gates see `W x + U h + b`;
/// the candidate keeps separate input and hidden biases so the reset
/// gate scales the hidden bias together with the hidden contribution.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub d_in: usize,
    pub d_hid: usize,
    w_r: usize,
    u_r: usize,
    b_r: usize,
    w_z: usize,
    u_z: usize,
    b_z: usize,
    w_n: usize,
    b_n_in: usize,
    u_n: usize,
    b_n_hid: usize,
}

impl GruCell {
    pub fn declare(b: &mut ParamBuilder, prefix: &str, d_in: usize, d_hid: usize) -> Self {
        let name = |s: &str| format!("{prefix}.{s}");
        GruCell {
            d_in,
            d_hid,
            w_r: b.kaiming(&name("w_r"), &[d_hid, d_in], d_in),
            u_r: b.orthogonal(&name("u_r"), d_hid),
            b_r: b.zeros(&name("b_r"), &[d_hid]),
            w_z: b.kaiming(&name("w_z"), &[d_hid, d_in], d_in),
            u_z: b.orthogonal(&name("u_z"), d_hid),
            b_z: b.zeros(&name("b_z"), &[d_hid]),
            w_n: b.kaiming(&name("w_n"), &[d_hid, d_in], d_in),
            b_n_in: b.zeros(&name("b_n_in"), &[d_hid]),
            u_n: b.orthogonal(&name("u_n"), d_hid),
            b_n_hid: b.zeros(&name("b_n_hid"), &[d_hid]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, h: Var) -> Var {
        let gate = |tape: &mut Tape, w: usize, u: usize, b: usize| {
            let wx = tape.matvec(vars[w], x, self.d_hid, self.d_in);
            let uh = tape.matvec(vars[u], h, self.d_hid, self.d_hid);
            let s = tape.add(wx, uh);
            let s = tape.add(s, vars[b]);
            tape.sigmoid(s)
        };
        let r = gate(tape, self.w_r, self.u_r, self.b_r);
        let z = gate(tape, self.w_z, self.u_z, self.b_z);

        let wx = tape.matvec(vars[self.w_n], x, self.d_hid, self.d_in);
        let wx = tape.add(wx, vars[self.b_n_in]);
        let uh = tape.matvec(vars[self.u_n], h, self.d_hid, self.d_hid);
        let uh = tape.add(uh, vars[self.b_n_hid]);
        let gated = tape.mul(r, uh);
        let pre = tape.add(wx, gated);
        let n = tape.tanh(pre);

        // h' = (1 - z) * n + z * h
        let zn = tape.mul(z, n);
        let zh = tape.mul(z, h);
        let diff = tape.sub(n, zn);
        tape.add(diff, zh)
    }
}

/// A level's recurrent prior: cell plus readout
/// `z = exp(s) * tanh(A h + a)` with `s` initialized to zero, so the
/// readout starts bounded by one per coordinate and learns its scale.
#[derive(Debug, Clone)]
pub struct LevelRnn {
    pub cell: GruCell,
    pub latent_dim: usize,
    a_w: usize,
    a_b: usize,
    s: usize,
}

impl LevelRnn {
    pub fn declare(
        b: &mut ParamBuilder,
        prefix: &str,
        d_in: usize,
        d_hid: usize,
        latent_dim: usize,
    ) -> Self {
        let cell = GruCell::declare(b, &format!("{prefix}.gru"), d_in, d_hid);
        LevelRnn {
            cell,
            latent_dim,
            a_w: b.kaiming(&format!("{prefix}.read.w"), &[latent_dim, d_hid], d_hid),
            a_b: b.zeros(&format!("{prefix}.read.b"), &[latent_dim]),
            s: b.zeros(&format!("{prefix}.read.s"), &[latent_dim]),
        }
    }

    pub fn readout(&self, tape: &mut Tape, vars: &[Var], h: Var) -> Var {
        let pre = tape.matvec(vars[self.a_w], h, self.latent_dim, self.cell.d_hid);
        let pre = tape.add(pre, vars[self.a_b]);
        let t = tape.tanh(pre);
        let scale = tape.exp(vars[self.s]);
        tape.mul(scale, t)
    }
}

/// Result of one clocked advance.
#[derive(Debug, Clone, Copy)]
pub struct AdvanceOut {
    pub h_next: Var,
    pub z_prior: Var,
    pub aligned: bool,
}

/// Advances one level at step `t`: aligned steps take the full cell
/// update, off-stride steps apply the hold or EMA policy, and the
/// prior is always read from the post-policy hidden state.
pub fn multirate_advance(
    tape: &mut Tape,
    vars: &[Var],
    rnn: &LevelRnn,
    spec: &MultiRateSpec,
    t: usize,
    h: Var,
    c: Var,
) -> AdvanceOut {
    let aligned = spec.aligned(t);
    let h_next = if aligned {
        rnn.cell.forward(tape, vars, c, h)
    } else {
        match spec.policy {
            OffStridePolicy::Hold => h,
            OffStridePolicy::Ema => {
                let cand = rnn.cell.forward(tape, vars, c, h);
                let kept = tape.scale(h, 1.0 - spec.alpha);
                let blended = tape.scale(cand, spec.alpha);
                tape.add(kept, blended)
            }
        }
    };
    let z_prior = rnn.readout(tape, vars, h_next);
    AdvanceOut { h_next, z_prior, aligned }
}

/// Linear hidden-state correction from the fusion innovation:
/// `h' = h + alpha * Psi (z_fused - z_prior)`. No bias, so a zero
/// innovation leaves the hidden state exactly unchanged.
#[derive(Debug, Clone)]
pub struct HiddenCorrect {
    pub d_hid: usize,
    pub latent_dim: usize,
    pub alpha: f64,
    psi: usize,
}

impl HiddenCorrect {
    pub fn declare(
        b: &mut ParamBuilder,
        prefix: &str,
        d_hid: usize,
        latent_dim: usize,
        alpha: f64,
    ) -> Self {
        HiddenCorrect {
            d_hid,
            latent_dim,
            alpha,
            psi: b.kaiming(&format!("{prefix}.psi"), &[d_hid, latent_dim], latent_dim),
        }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], h: Var, z_fused: Var, z_prior: Var) -> Var {
        let innov = tape.sub(z_fused, z_prior);
        let push = tape.matvec(vars[self.psi], innov, self.d_hid, self.latent_dim);
        let push = tape.scale(push, self.alpha);
        tape.add(h, push)
    }
}

/// Fresh all-zero hidden state for one level.
pub fn init_hidden(tape: &mut Tape, d_hid: usize) -> Var {
    tape.leaf(vec![0.0; d_hid])
}
