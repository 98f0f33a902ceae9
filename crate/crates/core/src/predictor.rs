//! Conditioned circular U-Net predictor and the hierarchical
//! forecaster built around it.
//!
//! One forecast step: conditioners summarize the current field and the
//! carried coarse latent, each level's recurrent prior advances on its
//! own clock, the prior latents and normalized hidden states are
//! injected into the U-Net encoder, the U-Net emits a bounded residual
//! update, a posterior latent is encoded from either the next truth
//! state or the model's own output, a convex gate fuses prior and
//! posterior, and the fusion innovation nudges the hidden states.
//! The fused coarse latent is carried into the next step's
//! conditioners.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::latents::{
    self, Conditioner, FeatureCache, KsConditioner, L96Conditioner, System,
};
use crate::params::{logit, ParamBuilder, ParamSet};
use crate::recurrence::{
    init_hidden, multirate_advance, HiddenCorrect, LevelRnn, MultiRateSpec, OffStridePolicy,
};
use crate::seeding;
use crate::spectral::BandSpec;

/// Stream index reserved for parameter initialization draws, far from
/// the per-trajectory data streams.
pub const PARAM_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    Residual,
    Direct,
}

/// Full hyperparameter description of the hierarchical forecaster.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub system: System,
    /// Grid points / ring sites.
    pub n: usize,
    /// Physical domain length (spectral derivative features only).
    pub domain_len: f64,
    /// Retained modes per level, finest first.
    pub k: Vec<usize>,
    /// Conditioner projection width.
    pub d_c: usize,
    /// Hidden width per level.
    pub d_hid: Vec<usize>,
    /// Clock stride per level.
    pub strides: Vec<usize>,
    pub policy: OffStridePolicy,
    /// EMA blend factor; `None` means `1 / stride`.
    pub ema_alpha: Option<f64>,
    /// Pooling bins (spatial averages fed to the fine conditioner).
    pub bins: usize,
    /// U-Net channel width at the finest scale.
    pub base_width: usize,
    pub kernel: usize,
    /// Residual update bound.
    pub alpha_u: f64,
    /// Hidden-correction step size.
    pub alpha_corr: f64,
    /// Initial gate bias toward the posterior.
    pub gate_p0: f64,
    /// Halve the spatial resolution at each encoder stage.
    pub downsample: bool,
    pub mode: OutputMode,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::invalid_config(m));
        if self.k.len() != 2 || self.d_hid.len() != 2 || self.strides.len() != 2 {
            return bad("exactly two hierarchy levels are supported".into());
        }
        if self.k[1] > self.k[0] || self.k[1] == 0 || self.k[0] > self.n / 2 + 1 {
            return bad(format!("invalid cutoffs {:?} for n={}", self.k, self.n));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return bad("strides must be positive".into());
        }
        if self.bins == 0 || self.n % self.bins != 0 {
            return bad(format!("bins {} must divide n {}", self.bins, self.n));
        }
        if self.kernel % 2 == 0 {
            return bad("kernel width must be odd".into());
        }
        if self.downsample && self.n % 4 != 0 {
            return bad("downsampling needs n divisible by 4".into());
        }
        if !(self.gate_p0 > 0.0 && self.gate_p0 < 1.0) {
            return bad("gate_p0 must lie strictly inside (0, 1)".into());
        }
        if self.domain_len <= 0.0 {
            return bad("domain_len must be positive".into());
        }
        Ok(())
    }

    pub fn latent_dims(&self) -> Vec<usize> {
        self.k.iter().map(|k| 2 * k).collect()
    }

    pub fn rate_spec(&self, level: usize) -> MultiRateSpec {
        let stride = self.strides[level];
        MultiRateSpec {
            stride,
            policy: self.policy,
            alpha: self.ema_alpha.unwrap_or(1.0 / stride as f64),
        }
    }
}

/// Two-layer perceptron used to map injection vectors to channel
/// offsets.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Mlp {
    pub fn declare(b: &mut ParamBuilder, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp {
            d_in,
            hidden,
            d_out,
            w1: b.kaiming(&format!("{prefix}.w1"), &[hidden, d_in], d_in),
            b1: b.zeros(&format!("{prefix}.b1"), &[hidden]),
            w2: b.kaiming(&format!("{prefix}.w2"), &[d_out, hidden], hidden),
            b2: b.zeros(&format!("{prefix}.b2"), &[d_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let h = tape.matvec(vars[self.w1], x, self.hidden, self.d_in);
        let h = tape.add(h, vars[self.b1]);
        let h = tape.silu(h);
        let out = tape.matvec(vars[self.w2], h, self.d_out, self.hidden);
        tape.add(out, vars[self.b2])
    }
}

/// Channel-preserving residual block: `x + conv(gelu(conv(x)))`.
#[derive(Debug, Clone)]
struct ResBlock {
    c: usize,
    k: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl ResBlock {
    fn declare(b: &mut ParamBuilder, prefix: &str, c: usize, k: usize) -> Self {
        let fan = c * k;
        ResBlock {
            c,
            k,
            w1: b.kaiming(&format!("{prefix}.w1"), &[c, c, k], fan),
            b1: b.zeros(&format!("{prefix}.b1"), &[c]),
            w2: b.kaiming(&format!("{prefix}.w2"), &[c, c, k], fan),
            b2: b.zeros(&format!("{prefix}.b2"), &[c]),
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, n: usize) -> Var {
        let h = tape.conv1d_circ(vars[self.w1], Some(vars[self.b1]), x, self.c, self.c, n, self.k, 1);
        let h = tape.gelu(h);
        let h = tape.conv1d_circ(vars[self.w2], Some(vars[self.b2]), h, self.c, self.c, n, self.k, 1);
        tape.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct ConvStage {
    w: usize,
    b: usize,
    c_in: usize,
    c_out: usize,
}

impl ConvStage {
    fn declare(bld: &mut ParamBuilder, prefix: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        ConvStage {
            w: bld.kaiming(&format!("{prefix}.w"), &[c_out, c_in, k], c_in * k),
            b: bld.zeros(&format!("{prefix}.b"), &[c_out]),
            c_in,
            c_out,
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, n: usize, k: usize, stride: usize) -> Var {
        tape.conv1d_circ(vars[self.w], Some(vars[self.b]), x, self.c_in, self.c_out, n, k, stride)
    }
}

/// Circular 1-d U-Net with three encoder widths `b, 2b, 4b`, optional
/// conditioning injections after the two width-increasing stages, skip
/// connections on the decoder, and a bounded residual head.
#[derive(Debug, Clone)]
pub struct UNet {
    pub n: usize,
    pub b: usize,
    pub kernel: usize,
    pub alpha_u: f64,
    pub downsample: bool,
    pub mode: OutputMode,
    pub inj1: Option<Mlp>,
    pub inj2: Option<Mlp>,
    e1: ConvStage,
    e1_res: ResBlock,
    e2: ConvStage,
    e2_res: ResBlock,
    e3: ConvStage,
    e3_res: ResBlock,
    d2: ConvStage,
    d2_res: ResBlock,
    d1: ConvStage,
    d1_res: ResBlock,
    head: ConvStage,
}

impl UNet {
    #[allow(clippy::too_many_arguments)]
    pub fn declare(
        bld: &mut ParamBuilder,
        prefix: &str,
        n: usize,
        b: usize,
        kernel: usize,
        inj_dims: (Option<usize>, Option<usize>),
        alpha_u: f64,
        downsample: bool,
        mode: OutputMode,
    ) -> Self {
        let name = |s: &str| format!("{prefix}.{s}");
        UNet {
            n,
            b,
            kernel,
            alpha_u,
            downsample,
            mode,
            e1: ConvStage::declare(bld, &name("e1"), 1, b, kernel),
            e1_res: ResBlock::declare(bld, &name("e1.res"), b, kernel),
            e2: ConvStage::declare(bld, &name("e2"), b, 2 * b, kernel),
            inj1: inj_dims.0.map(|d| Mlp::declare(bld, &name("inj1"), d, 2 * b, 2 * b)),
            e2_res: ResBlock::declare(bld, &name("e2.res"), 2 * b, kernel),
            e3: ConvStage::declare(bld, &name("e3"), 2 * b, 4 * b, kernel),
            inj2: inj_dims.1.map(|d| Mlp::declare(bld, &name("inj2"), d, 4 * b, 4 * b)),
            e3_res: ResBlock::declare(bld, &name("e3.res"), 4 * b, kernel),
            d2: ConvStage::declare(bld, &name("d2"), 4 * b, 2 * b, kernel),
            d2_res: ResBlock::declare(bld, &name("d2.res"), 2 * b, kernel),
            d1: ConvStage::declare(bld, &name("d1"), 2 * b, b, kernel),
            d1_res: ResBlock::declare(bld, &name("d1.res"), b, kernel),
            head: ConvStage::declare(bld, &name("head"), b, 1, kernel),
        }
    }

    /// Runs the network; returns the next-state estimate and the
    /// coarsest feature map (`4b` channels) for auxiliary heads.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        u: Var,
        i1: Option<Var>,
        i2: Option<Var>,
    ) -> (Var, Var) {
        let k = self.kernel;
        let n1 = self.n;
        let stride = if self.downsample { 2 } else { 1 };
        let n2 = n1 / stride;
        let n3 = n2 / stride;
        let b = self.b;

        let h = self.e1.forward(tape, vars, u, n1, k, 1);
        let x1 = self.e1_res.forward(tape, vars, h, n1);

        let mut h = self.e2.forward(tape, vars, x1, n1, k, stride);
        if let (Some(mlp), Some(v)) = (&self.inj1, i1) {
            let off = mlp.forward(tape, vars, v);
            h = tape.bcast_add_chan(h, off, 2 * b, n2);
        }
        let x2 = self.e2_res.forward(tape, vars, h, n2);

        let mut h = self.e3.forward(tape, vars, x2, n2, k, stride);
        if let (Some(mlp), Some(v)) = (&self.inj2, i2) {
            let off = mlp.forward(tape, vars, v);
            h = tape.bcast_add_chan(h, off, 4 * b, n3);
        }
        let x3 = self.e3_res.forward(tape, vars, h, n3);

        let up = if self.downsample {
            tape.upsample_nearest(x3, 4 * b, n3, 2)
        } else {
            x3
        };
        let h = self.d2.forward(tape, vars, up, n2, k, 1);
        let h = self.d2_res.forward(tape, vars, h, n2);
        let y2 = tape.add(h, x2);

        let up = if self.downsample {
            tape.upsample_nearest(y2, 2 * b, n2, 2)
        } else {
            y2
        };
        let h = self.d1.forward(tape, vars, up, n1, k, 1);
        let h = self.d1_res.forward(tape, vars, h, n1);
        let y1 = tape.add(h, x1);

        let r = self.head.forward(tape, vars, y1, n1, k, 1);
        let out = match self.mode {
            OutputMode::Residual => {
                let t = tape.tanh(r);
                let t = tape.scale(t, self.alpha_u);
                tape.add(u, t)
            }
            OutputMode::Direct => r,
        };
        (out, x3)
    }
}

/// Convex prior/posterior mixer:
/// `g = sigmoid(W [z_prior; z_post] + b)`, `z = g*z_post + (1-g)*z_prior`.
#[derive(Debug, Clone)]
pub struct GateFuse {
    pub latent_dim: usize,
    w: usize,
    b: usize,
}

impl GateFuse {
    pub fn declare(bld: &mut ParamBuilder, prefix: &str, latent_dim: usize, p0: f64) -> Self {
        GateFuse {
            latent_dim,
            w: bld.kaiming(&format!("{prefix}.w"), &[latent_dim, 2 * latent_dim], 2 * latent_dim),
            b: bld.constant(&format!("{prefix}.b"), &[latent_dim], logit(p0)),
        }
    }

    pub fn fuse(&self, tape: &mut Tape, vars: &[Var], z_prior: Var, z_post: Var) -> (Var, Var) {
        let cat = tape.concat(&[z_prior, z_post]);
        let pre = tape.matvec(vars[self.w], cat, self.latent_dim, 2 * self.latent_dim);
        let pre = tape.add(pre, vars[self.b]);
        let g = tape.sigmoid(pre);
        let gp = tape.mul(g, z_post);
        let gq = tape.mul(g, z_prior);
        let rest = tape.sub(z_prior, gq);
        (tape.add(gp, rest), g)
    }
}

/// Where the posterior latent comes from at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorSource {
    Truth,
    Prediction,
}

/// Per-step byproducts exposed for losses and diagnostics. Vectors are
/// indexed by level and may be empty for models without that machinery.
#[derive(Debug, Clone, Default)]
pub struct StepAux {
    pub priors: Vec<Var>,
    pub posteriors: Vec<Var>,
    pub fused: Vec<Var>,
    pub gates: Vec<Var>,
    pub h_entry: Vec<Var>,
    pub h_advanced: Vec<Var>,
    pub h_corrected: Vec<Var>,
    pub aligned: Vec<bool>,
    /// Auxiliary future-latent estimate (latent-supervised baseline).
    pub latent_pred: Option<Var>,
}

/// Tape-free snapshot of a model state, for carrying rollouts across
/// tape truncations.
#[derive(Debug, Clone)]
pub struct DetachedState {
    pub t: usize,
    pub arrays: Vec<Option<Vec<f64>>>,
}

/// Model state that can leave and re-enter a tape.
pub trait StateOps: Clone {
    fn detach(&self, tape: &Tape) -> DetachedState;
    fn attach(d: &DetachedState, tape: &mut Tape) -> Self;
}

/// A forecaster advanced one saved step at a time.
pub trait StepModel {
    type State: StateOps;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn system(&self) -> System;
    fn n(&self) -> usize;
    fn kind(&self) -> &'static str;

    fn init_state(&self, tape: &mut Tape, vars: &[Var], u0: Var) -> Self::State;

    /// One step: consumes the current field, returns the next-state
    /// estimate, the advanced state, and auxiliary outputs.
    /// `truth_next` must be provided when `source` is `Truth`.
    fn step(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        u: Var,
        state: &Self::State,
        truth_next: Option<&[f64]>,
        source: PosteriorSource,
    ) -> (Var, Self::State, StepAux);
}

/// Rolling state of the hierarchical forecaster.
#[derive(Debug, Clone)]
pub struct HineState {
    pub t: usize,
    pub h: Vec<Var>,
    pub z_coarse: Var,
    pub cache: FeatureCache,
}

impl StateOps for HineState {
    fn detach(&self, tape: &Tape) -> DetachedState {
        let mut arrays: Vec<Option<Vec<f64>>> =
            self.h.iter().map(|&v| Some(tape.value(v).to_vec())).collect();
        arrays.push(Some(tape.value(self.z_coarse).to_vec()));
        for slot in self.cache.slots() {
            arrays.push(slot.map(|v| tape.value(v).to_vec()));
        }
        DetachedState { t: self.t, arrays }
    }

    fn attach(d: &DetachedState, tape: &mut Tape) -> Self {
        let n_h = d.arrays.len() - 6;
        let h: Vec<Var> = d.arrays[..n_h]
            .iter()
            .map(|a| tape.leaf(a.clone().expect("hidden state present")))
            .collect();
        let z_coarse = tape.leaf(d.arrays[n_h].clone().expect("carried latent present"));
        let mut slots = [None; 5];
        for (i, slot) in slots.iter_mut().enumerate() {
            *slot = d.arrays[n_h + 1 + i].as_ref().map(|a| tape.leaf(a.clone()));
        }
        HineState { t: d.t, h, z_coarse, cache: FeatureCache::from_slots(slots) }
    }
}

/// The hierarchical latent-conditioned forecaster.
#[derive(Debug, Clone)]
pub struct HineModel {
    pub dims: ModelDims,
    pub params: ParamSet,
    cond: Conditioner,
    rnns: Vec<LevelRnn>,
    rate: Vec<MultiRateSpec>,
    gates: Vec<GateFuse>,
    correct: Vec<HiddenCorrect>,
    unet: UNet,
}

impl HineModel {
    pub fn new(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = seeding::stream_rng(seed, PARAM_STREAM);
        let mut bld = ParamBuilder::new(&mut rng);

        let k1 = dims.k[0];
        let k2 = dims.k[1];
        let cond = match dims.system {
            System::Ks => Conditioner::Ks(KsConditioner::declare(
                &mut bld,
                dims.n,
                dims.domain_len,
                dims.bins,
                k2,
                dims.d_c,
            )?),
            System::L96 => Conditioner::L96(L96Conditioner::declare(
                &mut bld,
                dims.n,
                dims.bins,
                k2,
                dims.d_c,
                BandSpec::default_for(dims.n),
            )?),
        };

        let mut rnns = Vec::new();
        let mut rate = Vec::new();
        let mut gates = Vec::new();
        let mut correct = Vec::new();
        for (lvl, &k) in dims.k.iter().enumerate() {
            let prefix = format!("lvl{}", lvl + 1);
            let latent = 2 * k;
            rnns.push(LevelRnn::declare(&mut bld, &prefix, dims.d_c, dims.d_hid[lvl], latent));
            gates.push(GateFuse::declare(&mut bld, &format!("{prefix}.gate"), latent, dims.gate_p0));
            correct.push(HiddenCorrect::declare(
                &mut bld,
                &prefix,
                dims.d_hid[lvl],
                latent,
                dims.alpha_corr,
            ));
            rate.push(dims.rate_spec(lvl));
        }

        let inj1_dim = 2 * k1 + dims.d_hid[0];
        let inj2_dim = 2 * k2 + dims.d_hid[1];
        let unet = UNet::declare(
            &mut bld,
            "unet",
            dims.n,
            dims.base_width,
            dims.kernel,
            (Some(inj1_dim), Some(inj2_dim)),
            dims.alpha_u,
            dims.downsample,
            dims.mode,
        );

        Ok(HineModel {
            dims: dims.clone(),
            params: bld.finish(),
            cond,
            rnns,
            rate,
            gates,
            correct,
            unet,
        })
    }
}

impl StepModel for HineModel {
    type State = HineState;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn system(&self) -> System {
        self.dims.system
    }

    fn n(&self) -> usize {
        self.dims.n
    }

    fn kind(&self) -> &'static str {
        "msr-hine"
    }

    fn init_state(&self, tape: &mut Tape, vars: &[Var], u0: Var) -> HineState {
        let _ = vars;
        let h = self.dims.d_hid.iter().map(|&d| init_hidden(tape, d)).collect();
        let z_coarse = latents::encode_level_var(tape, u0, self.dims.k[1]);
        HineState { t: 0, h, z_coarse, cache: FeatureCache::empty() }
    }

    fn step(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        u: Var,
        state: &HineState,
        truth_next: Option<&[f64]>,
        source: PosteriorSource,
    ) -> (Var, HineState, StepAux) {
        let k1 = self.dims.k[0];
        let k2 = self.dims.k[1];

        let (c1, c2, cache) = self.cond.forward(tape, vars, u, state.z_coarse, &state.cache);
        let conds = [c1, c2];

        let mut aux = StepAux::default();
        let mut h_next = Vec::with_capacity(2);
        for lvl in 0..2 {
            let adv = multirate_advance(
                tape,
                vars,
                &self.rnns[lvl],
                &self.rate[lvl],
                state.t,
                state.h[lvl],
                conds[lvl],
            );
            aux.h_entry.push(state.h[lvl]);
            aux.h_advanced.push(adv.h_next);
            aux.priors.push(adv.z_prior);
            aux.aligned.push(adv.aligned);
            h_next.push(adv.h_next);
        }

        let mut injections = Vec::with_capacity(2);
        for lvl in 0..2 {
            let norm_h = tape.layernorm(h_next[lvl], 1e-5);
            injections.push(tape.concat(&[aux.priors[lvl], norm_h]));
        }
        let (u_hat, _) = self.unet.forward(tape, vars, u, Some(injections[0]), Some(injections[1]));

        let post_field = match source {
            PosteriorSource::Truth => {
                let t = truth_next.expect("truth field required for truth-sourced posterior");
                tape.leaf(t.to_vec())
            }
            PosteriorSource::Prediction => u_hat,
        };
        let z1_post = latents::encode_level_var(tape, post_field, k1);
        let z2_post = latents::coarse_from_fine_var(tape, z1_post, k1, k2);
        aux.posteriors = vec![z1_post, z2_post];

        let mut h_corr = Vec::with_capacity(2);
        for lvl in 0..2 {
            let (z_fused, g) =
                self.gates[lvl].fuse(tape, vars, aux.priors[lvl], aux.posteriors[lvl]);
            aux.fused.push(z_fused);
            aux.gates.push(g);
            let h = self.correct[lvl].apply(tape, vars, h_next[lvl], z_fused, aux.priors[lvl]);
            h_corr.push(h);
        }
        aux.h_corrected = h_corr.clone();

        let next = HineState {
            t: state.t + 1,
            h: h_corr,
            z_coarse: aux.fused[1],
            cache,
        };
        (u_hat, next, aux)
    }
}
