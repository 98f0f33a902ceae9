//! Reference forecasters the hierarchical model is compared against:
//! an unconditioned autoregressive U-Net, and a latent-supervised
//! variant with a single conditioning input plus a future-latent head.
//! Both are sized to parameter parity with the main model by searching
//! over the base channel width.

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::latents::{self, System};
use crate::params::{ParamBuilder, ParamSet};
use crate::predictor::{
    DetachedState, OutputMode, PosteriorSource, StateOps, StepAux, StepModel, UNet, PARAM_STREAM,
};
use crate::seeding;

/// Shared shape knobs for both baselines.
#[derive(Debug, Clone)]
pub struct BaselineDims {
    pub system: System,
    pub n: usize,
    pub base_width: usize,
    pub kernel: usize,
    pub alpha_u: f64,
    pub downsample: bool,
    pub mode: OutputMode,
}

/// Plain autoregressive U-Net: no conditioning, no internal state.
#[derive(Debug, Clone)]
pub struct UNetAr {
    pub dims: BaselineDims,
    pub params: ParamSet,
    unet: UNet,
}

#[derive(Debug, Clone)]
pub struct NoState;

impl StateOps for NoState {
    fn detach(&self, _tape: &Tape) -> DetachedState {
        DetachedState { t: 0, arrays: vec![] }
    }

    fn attach(_d: &DetachedState, _tape: &mut Tape) -> Self {
        NoState
    }
}

impl UNetAr {
    pub fn new(dims: &BaselineDims, seed: u64) -> Self {
        let mut rng = seeding::stream_rng(seed, PARAM_STREAM);
        let mut bld = ParamBuilder::new(&mut rng);
        let unet = UNet::declare(
            &mut bld,
            "unet",
            dims.n,
            dims.base_width,
            dims.kernel,
            (None, None),
            dims.alpha_u,
            dims.downsample,
            dims.mode,
        );
        UNetAr { dims: dims.clone(), params: bld.finish(), unet }
    }
}

impl StepModel for UNetAr {
    type State = NoState;

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
        "unet-ar"
    }

    fn init_state(&self, _tape: &mut Tape, _vars: &[Var], _u0: Var) -> NoState {
        NoState
    }

    fn step(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        u: Var,
        _state: &NoState,
        _truth_next: Option<&[f64]>,
        _source: PosteriorSource,
    ) -> (Var, NoState, StepAux) {
        let (out, _) = self.unet.forward(tape, vars, u, None, None);
        (out, NoState, StepAux::default())
    }
}

/// Latent-supervised baseline: the U-Net takes the fine latent of the
/// state being predicted as a single conditioning input, and a head on
/// the coarsest features estimates the latent one step further ahead.
/// With truth-sourced steps the conditioning latent is encoded from
/// the next truth state; in closed loop it is the head's previous
/// estimate.
#[derive(Debug, Clone)]
pub struct HineL2 {
    pub dims: BaselineDims,
    pub k1: usize,
    pub params: ParamSet,
    unet: UNet,
    head_w: usize,
    head_b: usize,
}

#[derive(Debug, Clone)]
pub struct L2State {
    pub prev_latent: Option<Var>,
}

impl StateOps for L2State {
    fn detach(&self, tape: &Tape) -> DetachedState {
        DetachedState {
            t: 0,
            arrays: vec![self.prev_latent.map(|v| tape.value(v).to_vec())],
        }
    }

    fn attach(d: &DetachedState, tape: &mut Tape) -> Self {
        L2State {
            prev_latent: d.arrays[0].as_ref().map(|a| tape.leaf(a.clone())),
        }
    }
}

impl HineL2 {
    pub fn new(dims: &BaselineDims, k1: usize, seed: u64) -> Self {
        let mut rng = seeding::stream_rng(seed, PARAM_STREAM);
        let mut bld = ParamBuilder::new(&mut rng);
        let unet = UNet::declare(
            &mut bld,
            "unet",
            dims.n,
            dims.base_width,
            dims.kernel,
            (Some(2 * k1), None),
            dims.alpha_u,
            dims.downsample,
            dims.mode,
        );
        let w4 = 4 * dims.base_width;
        let head_w = bld.kaiming("latent_head.w", &[2 * k1, w4], w4);
        let head_b = bld.zeros("latent_head.b", &[2 * k1]);
        HineL2 { dims: dims.clone(), k1, params: bld.finish(), unet, head_w, head_b }
    }
}

impl StepModel for HineL2 {
    type State = L2State;

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
        "hine-l2"
    }

    fn init_state(&self, _tape: &mut Tape, _vars: &[Var], _u0: Var) -> L2State {
        L2State { prev_latent: None }
    }

    fn step(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        u: Var,
        state: &L2State,
        truth_next: Option<&[f64]>,
        source: PosteriorSource,
    ) -> (Var, L2State, StepAux) {
        let z_in = match source {
            PosteriorSource::Truth => {
                let t = truth_next.expect("truth field required for truth-sourced conditioning");
                tape.leaf(latents::encode_level(t, self.k1))
            }
            PosteriorSource::Prediction => state
                .prev_latent
                .expect("closed-loop step requires a primed latent"),
        };
        let (out, bottom) = self.unet.forward(tape, vars, u, Some(z_in), None);

        let stride = if self.dims.downsample { 4 } else { 1 };
        let n3 = self.dims.n / stride;
        let w4 = 4 * self.dims.base_width;
        let pooled = tape.channel_mean(bottom, w4, n3);
        let z_next = tape.matvec(vars[self.head_w], pooled, 2 * self.k1, w4);
        let z_next = tape.add(z_next, vars[self.head_b]);

        let aux = StepAux { latent_pred: Some(z_next), ..StepAux::default() };
        (out, L2State { prev_latent: Some(z_next) }, aux)
    }
}

/// Picks the smallest-gap base width whose parameter count lands
/// within `tol` (relative) of `target`; errors if no width does.
pub fn fit_width(target: usize, tol: f64, count: impl Fn(usize) -> usize) -> Result<usize> {
    let mut best: Option<(usize, usize)> = None;
    for b in 2..=96 {
        let c = count(b);
        let gap = c.abs_diff(target);
        if best.map_or(true, |(_, g)| gap < g) {
            best = Some((b, gap));
        }
    }
    let (b, gap) = best.expect("non-empty search range");
    if gap as f64 > tol * target as f64 {
        return Err(CoreError::invalid_config(format!(
            "no base width within {:.0}% of {target} parameters (closest {b} misses by {gap})",
            tol * 100.0
        )));
    }
    Ok(b)
}

/// Parameter count of a [`UNetAr`] at the given base width.
pub fn unet_ar_param_count(dims: &BaselineDims, base_width: usize) -> usize {
    let d = BaselineDims { base_width, ..dims.clone() };
    UNetAr::new(&d, 0).params.n_params()
}

/// Parameter count of a [`HineL2`] at the given base width.
pub fn hine_l2_param_count(dims: &BaselineDims, k1: usize, base_width: usize) -> usize {
    let d = BaselineDims { base_width, ..dims.clone() };
    HineL2::new(&d, k1, 0).params.n_params()
}
