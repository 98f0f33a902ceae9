//! Truncated-backprop training over sliding trajectory windows.
//!
//! Each window holds `L + 1` consecutive normalized states. The model
//! steps through the window once; during the warm segment each step
//! feeds the next truth state or the model's own output by a per-step
//! coin flip (scheduled sampling), and the closing tail always feeds
//! the model's output. The feed choice also selects the posterior
//! source, so self-fed steps condition on their own prediction. An
//! optional continuation segment rolls further closed-loop steps for a
//! multi-step penalty. Gradients of the full window objective flow
//! through everything, batches average window gradients in a fixed
//! order, and optimization is decoupled-weight-decay Adam under a
//! global gradient-norm clip. Non-finite batches are skipped and
//! counted; a training run with more than 1% skipped batches, or three
//! consecutive non-finite validation epochs, fails.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tape, Var};
use crate::container;
use crate::datastore::{self, NormMode, Normalizer, SplitSpec, TrajectoryBundle};
use crate::error::{CoreError, Result};
use crate::latents::{self, System};
use crate::losses::{self, LossBreakdown, LossWeights, RampSpec, SpectralCfg, WindowTerms};
use crate::params::ParamSet;
use crate::predictor::{PosteriorSource, StepModel};
use crate::seeding::{self, Rng};
use crate::spectral::BandSpec;

/// Learning-rate policy across epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    /// Multiply the rate by `factor` after `patience` epochs without
    /// validation improvement, never below `min_lr`.
    Plateau { patience: usize, factor: f64, min_lr: f64 },
    /// Half-cosine decay from the initial rate to zero over the run.
    Cosine,
}

/// Epoch ramps for the curriculum knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSet {
    /// Probability of feeding the model its own output during warm steps.
    pub scheduled_sampling: RampSpec,
    /// Tail size: a fraction of the window by default, a step count
    /// when `tail_in_steps` is set.
    pub tail: RampSpec,
    pub tail_in_steps: bool,
    /// Band-energy term weight.
    pub energy: RampSpec,
    /// Fraction of `k_max` continuation steps (floored).
    pub kstep: RampSpec,
    /// Validation tail fraction.
    pub val_tail: RampSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Steps per window (`l + 1` states).
    pub l_tbptt: usize,
    pub window_stride: usize,
    pub val_stride: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Continuation-step ceiling reached when the kstep ramp saturates.
    pub k_max: usize,
    pub weights: LossWeights,
    pub ramps: RampSet,
    pub spectral: SpectralCfg,
    pub use_band_energy: bool,
    pub prior_w_amp: f64,
    pub prior_w_phi: Vec<f64>,
    /// Supervise auxiliary future-latent heads when a model emits one.
    pub latent_supervision: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::invalid_config(m));
        if self.l_tbptt == 0 || self.batch_size == 0 {
            return bad("l_tbptt and batch_size must be positive");
        }
        if self.window_stride == 0 || self.val_stride == 0 {
            return bad("window strides must be positive");
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return bad("lr and grad_clip must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Ramp values realized at one epoch.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochKnobs {
    pub p_ss: f64,
    pub l_tail: usize,
    pub lambda_e: f64,
    pub k_steps: usize,
    pub val_l_tail: usize,
}

pub fn epoch_knobs(cfg: &TrainConfig, epoch: usize) -> EpochKnobs {
    let e = epoch as f64;
    let l = cfg.l_tbptt;
    let tail_v = losses::ramp(e, &cfg.ramps.tail);
    let l_tail = if cfg.ramps.tail_in_steps {
        (tail_v.round() as usize).min(l)
    } else {
        ((tail_v * l as f64).floor() as usize).min(l)
    };
    let val_frac = losses::ramp(e, &cfg.ramps.val_tail);
    EpochKnobs {
        p_ss: losses::ramp(e, &cfg.ramps.scheduled_sampling),
        l_tail,
        lambda_e: losses::ramp(e, &cfg.ramps.energy),
        k_steps: (cfg.k_max as f64 * losses::ramp(e, &cfg.ramps.kstep)).floor() as usize,
        val_l_tail: ((val_frac * l as f64).floor() as usize).min(l),
    }
}

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let shapes: Vec<Vec<f64>> =
            params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (ti, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads[ti];
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let p = &mut tensor.data[i];
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
    }
}

/// Rescales all gradients so their joint norm is at most `max_norm`;
/// returns the unclipped norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Per-window pass configuration with ramps already applied.
#[derive(Debug, Clone)]
pub struct PassCfg<'a> {
    pub system: System,
    pub l: usize,
    pub p_ss: f64,
    pub l_tail: usize,
    pub k_steps: usize,
    pub weights: LossWeights,
    pub spectral: &'a SpectralCfg,
    pub bands: Option<&'a BandSpec>,
    pub prior_w_amp: f64,
    pub prior_w_phi: &'a [f64],
    pub latent_supervision: bool,
    pub compute_grads: bool,
}

#[derive(Debug, Clone)]
pub struct PassOut {
    pub grads: Option<Vec<Vec<f64>>>,
    pub breakdown: LossBreakdown,
    pub finite: bool,
    pub kstep_skipped: bool,
}

fn add_opt(tape: &mut Tape, acc: Option<Var>, v: Var) -> Option<Var> {
    Some(match acc {
        Some(a) => tape.add(a, v),
        None => v,
    })
}

/// Runs one window (plus optional continuation) and, if requested,
/// backpropagates the assembled objective.
pub fn window_pass<M: StepModel>(
    model: &M,
    states: &[&[f64]],
    continuation: &[&[f64]],
    cfg: &PassCfg,
    rng: &mut Rng,
) -> PassOut {
    let l = cfg.l;
    assert_eq!(states.len(), l + 1, "window must hold l+1 states");
    let n = model.n();

    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let mut u_cur = tape.leaf(states[0].to_vec());
    let mut st = model.init_state(&mut tape, &bound, u_cur);
    let mut terms = WindowTerms::default();
    let mut aux_steps = Vec::with_capacity(l);

    let want_spec = cfg.weights.lambda_spec > 0.0;
    let want_energy = cfg.weights.lambda_e > 0.0 && cfg.bands.is_some();

    for t in 0..l {
        let warm = t < l - cfg.l_tail;
        let feed_pred = if warm { cfg.p_ss > 0.0 && rng.gen_bool(cfg.p_ss) } else { true };
        let source = if feed_pred {
            PosteriorSource::Prediction
        } else {
            PosteriorSource::Truth
        };
        let truth_next = states[t + 1];
        let (pred, next_st, aux) =
            model.step(&mut tape, &bound, u_cur, &st, Some(truth_next), source);

        let mse = losses::state_mse(&mut tape, pred, truth_next);
        terms.state = add_opt(&mut tape, terms.state, mse);

        if want_spec || want_energy {
            let packed = tape.rfft_packed(pred, n / 2 + 1);
            if want_spec {
                let s = losses::low_k_loss_from_packed(&mut tape, packed, n, truth_next, cfg.spectral);
                terms.spec = add_opt(&mut tape, terms.spec, s);
            }
            if want_energy {
                let bands = cfg.bands.expect("bands present when energy term is active");
                let e = losses::band_energy_loss_from_packed(&mut tape, packed, n, truth_next, bands, 1e-12);
                terms.energy = add_opt(&mut tape, terms.energy, e);
            }
        }

        if cfg.weights.lambda_prior > 0.0 && !aux.priors.is_empty() {
            let targets: Vec<Vec<f64>> = aux
                .priors
                .iter()
                .map(|&p| latents::encode_level(truth_next, tape.len_of(p) / 2))
                .collect();
            let pm = match cfg.system {
                System::Ks => losses::prior_match_polar(
                    &mut tape,
                    &aux.priors,
                    &targets,
                    cfg.prior_w_amp,
                    cfg.prior_w_phi,
                    1e-6,
                ),
                System::L96 => losses::prior_match_l2(&mut tape, &aux.priors, &targets),
            };
            terms.prior = add_opt(&mut tape, terms.prior, pm);
        }

        if cfg.latent_supervision && cfg.weights.lambda_latent > 0.0 && t + 2 <= l {
            if let Some(zp) = aux.latent_pred {
                let k = tape.len_of(zp) / 2;
                let target = latents::encode_level(states[t + 2], k);
                let neg: Vec<f64> = target.iter().map(|x| -x).collect();
                let d = tape.add_const(zp, &neg);
                let sq = tape.square(d);
                let m = tape.mean(sq);
                terms.latent = add_opt(&mut tape, terms.latent, m);
            }
        }

        if !warm {
            let k_idx = t - (l - cfg.l_tail) + 1;
            let w = losses::tail_weight(k_idx, cfg.l_tail);
            let weighted = tape.scale(mse, w);
            terms.tail = add_opt(&mut tape, terms.tail, weighted);
        }

        aux_steps.push(aux);
        u_cur = if feed_pred { pred } else { tape.leaf(truth_next.to_vec()) };
        st = next_st;
    }

    if cfg.weights.gamma_h > 0.0 {
        terms.drift = losses::hidden_drift_term(&mut tape, &aux_steps);
    }

    let mut kstep_skipped = false;
    if cfg.weights.lambda_kstep > 0.0 && cfg.k_steps > 0 {
        if continuation.len() >= cfg.k_steps {
            let mut acc: Option<Var> = None;
            for truth in continuation.iter().take(cfg.k_steps) {
                let (pred, next_st, _) =
                    model.step(&mut tape, &bound, u_cur, &st, None, PosteriorSource::Prediction);
                let mse = losses::state_mse(&mut tape, pred, truth);
                acc = add_opt(&mut tape, acc, mse);
                u_cur = pred;
                st = next_st;
            }
            terms.kstep = acc.map(|a| tape.scale(a, 1.0 / cfg.k_steps as f64));
        } else {
            kstep_skipped = true;
        }
    }

    let (total, breakdown) = losses::assemble(&mut tape, &terms, &cfg.weights);
    let finite_total = breakdown.total.is_finite();
    if !cfg.compute_grads || !finite_total {
        return PassOut { grads: None, breakdown, finite: finite_total, kstep_skipped };
    }
    let store = tape.backward(total);
    let grads = model.params().collect_grads(&store, &bound);
    let finite = grads.iter().flat_map(|g| g.iter()).all(|g| g.is_finite());
    PassOut { grads: Some(grads), breakdown, finite, kstep_skipped }
}

/// Normalized per-split trajectories ready for windowing.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Vec<Vec<f64>>>,
    pub val: Vec<Vec<Vec<f64>>>,
    pub test: Vec<Vec<Vec<f64>>>,
    pub normalizer: Normalizer,
    pub n: usize,
}

pub fn prepare_data(
    bundle: &TrajectoryBundle,
    split: &SplitSpec,
    mode: NormMode,
) -> Result<PreparedData> {
    let (s, _, n) = bundle.shape();
    let split = datastore::split_by_trajectory(s, split)?;
    let norm = Normalizer::fit(mode, bundle, &split.train)?;
    let grab = |idxs: &[usize]| -> Result<Vec<Vec<Vec<f64>>>> {
        idxs.iter()
            .map(|&i| {
                let flat = norm.normalize_trajectory(bundle.trajectory(i), n)?;
                Ok(flat.chunks_exact(n).map(|c| c.to_vec()).collect())
            })
            .collect()
    };
    Ok(PreparedData {
        train: grab(&split.train)?,
        val: grab(&split.val)?,
        test: grab(&split.test)?,
        normalizer: norm,
        n,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub p_ss: f64,
    pub l_tail: usize,
    pub lambda_e: f64,
    pub k_steps: usize,
    pub skipped_batches: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
    pub skipped_batches: usize,
    pub total_batches: usize,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

fn mean_breakdown(outs: &[PassOut]) -> LossBreakdown {
    let n = outs.len() as f64;
    let mut b = LossBreakdown::default();
    for o in outs {
        b.total += o.breakdown.total / n;
        b.state += o.breakdown.state / n;
        b.spec += o.breakdown.spec / n;
        b.prior += o.breakdown.prior / n;
        b.energy += o.breakdown.energy / n;
        b.drift += o.breakdown.drift / n;
        b.tail += o.breakdown.tail / n;
        b.kstep += o.breakdown.kstep / n;
        b.latent += o.breakdown.latent / n;
    }
    b
}

struct WindowJob {
    traj: usize,
    start: usize,
}

fn enumerate_windows(trajs: &[Vec<Vec<f64>>], l: usize, stride: usize) -> Result<Vec<WindowJob>> {
    let mut jobs = Vec::new();
    for (ti, traj) in trajs.iter().enumerate() {
        for start in datastore::window_starts(traj.len(), l, stride)? {
            jobs.push(WindowJob { traj: ti, start });
        }
    }
    Ok(jobs)
}

fn window_slices<'a>(
    trajs: &'a [Vec<Vec<f64>>],
    job: &WindowJob,
    l: usize,
    k_max: usize,
) -> (Vec<&'a [f64]>, Vec<&'a [f64]>) {
    let traj = &trajs[job.traj];
    let states: Vec<&[f64]> =
        traj[job.start..=job.start + l].iter().map(|s| s.as_slice()).collect();
    let cont_end = (job.start + l + 1 + k_max).min(traj.len());
    let continuation: Vec<&[f64]> =
        traj[job.start + l + 1..cont_end].iter().map(|s| s.as_slice()).collect();
    (states, continuation)
}

fn run_pass<M: StepModel + Sync>(
    model: &M,
    trajs: &[Vec<Vec<f64>>],
    job: &WindowJob,
    cfg: &PassCfg,
    seed: u64,
    epoch: usize,
) -> PassOut {
    let (states, continuation) = window_slices(trajs, job, cfg.l, cfg.k_steps);
    let mut rng = seeding::coord_rng(
        seed,
        &[0x77, epoch as u64, job.traj as u64, job.start as u64],
    );
    window_pass(model, &states, &continuation, cfg, &mut rng)
}

fn pass_cfg<'a>(
    system: System,
    cfg: &'a TrainConfig,
    knobs: &EpochKnobs,
    bands: Option<&'a BandSpec>,
    val: bool,
) -> PassCfg<'a> {
    let mut weights = cfg.weights;
    weights.lambda_e = knobs.lambda_e;
    PassCfg {
        system,
        l: cfg.l_tbptt,
        p_ss: if val { 0.0 } else { knobs.p_ss },
        l_tail: if val { knobs.val_l_tail } else { knobs.l_tail },
        k_steps: knobs.k_steps,
        weights,
        spectral: &cfg.spectral,
        bands,
        prior_w_amp: cfg.prior_w_amp,
        prior_w_phi: &cfg.prior_w_phi,
        latent_supervision: cfg.latent_supervision,
        compute_grads: !val,
    }
}

/// Mean validation objective at one epoch's ramp state; NaN if any
/// validation window came back non-finite.
pub fn validation_loss<M: StepModel + Sync>(
    model: &M,
    data: &PreparedData,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let knobs = epoch_knobs(cfg, epoch);
    let bands_store;
    let bands = if cfg.use_band_energy {
        bands_store = BandSpec::default_for(data.n);
        Some(&bands_store)
    } else {
        None
    };
    let pcfg = pass_cfg(model.system(), cfg, &knobs, bands, true);
    let jobs = enumerate_windows(&data.val, cfg.l_tbptt, cfg.val_stride)?;
    if jobs.is_empty() {
        return Err(CoreError::invalid_config(
            "validation split yields no windows; lengthen trajectories or shrink l_tbptt",
        ));
    }
    let outs: Vec<PassOut> = jobs
        .par_iter()
        .map(|job| run_pass(model, &data.val, job, &pcfg, cfg.seed, epoch))
        .collect();
    if outs.iter().any(|o| !o.finite) {
        return Ok(f64::NAN);
    }
    Ok(outs.iter().map(|o| o.breakdown.total).sum::<f64>() / outs.len() as f64)
}

/// Serializable checkpoint contents.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: Vec<(String, Vec<f64>)>,
    pub adam_m: Vec<(String, Vec<f64>)>,
    pub adam_v: Vec<(String, Vec<f64>)>,
}

pub fn write_checkpoint(
    path: &Path,
    params: &ParamSet,
    opt: &AdamW,
    meta: &serde_json::Value,
) -> Result<()> {
    let mut named: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for (i, t) in params.tensors().iter().enumerate() {
        named.push((format!("param.{}", t.name), t.shape.clone(), &t.data));
        named.push((format!("adam_m.{}", t.name), t.shape.clone(), &opt.m[i]));
        named.push((format!("adam_v.{}", t.name), t.shape.clone(), &opt.v[i]));
    }
    let arrays: Vec<(&str, &[usize], &[f64])> =
        named.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), *d)).collect();
    container::write_file(path, meta, &arrays)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (meta, arrays) = container::read_file(path)?;
    let mut ck = Checkpoint { meta, params: vec![], adam_m: vec![], adam_v: vec![] };
    for arr in arrays {
        if let Some(rest) = arr.name.strip_prefix("param.") {
            ck.params.push((rest.to_string(), arr.data));
        } else if let Some(rest) = arr.name.strip_prefix("adam_m.") {
            ck.adam_m.push((rest.to_string(), arr.data));
        } else if let Some(rest) = arr.name.strip_prefix("adam_v.") {
            ck.adam_v.push((rest.to_string(), arr.data));
        } else {
            return Err(CoreError::format(format!(
                "unexpected array '{}' in checkpoint",
                arr.name
            )));
        }
    }
    Ok(ck)
}

/// Loads checkpointed parameter values into a freshly built model.
pub fn restore_model<M: StepModel>(model: &mut M, ck: &Checkpoint) -> Result<()> {
    model.params_mut().load_values(&ck.params)
}

/// Trains in place, writing the best-validation checkpoint and a
/// JSON-lines log under `out_dir`.
pub fn train<M: StepModel + Sync>(
    model: &mut M,
    data: &PreparedData,
    cfg: &TrainConfig,
    run_meta: &serde_json::Value,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let ck_path = out_dir.join("checkpoint.cfb1");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);

    let jobs = enumerate_windows(&data.train, cfg.l_tbptt, cfg.window_stride)?;
    if jobs.is_empty() {
        return Err(CoreError::invalid_config(
            "training split yields no windows; lengthen trajectories or shrink l_tbptt",
        ));
    }
    let bands_store;
    let bands = if cfg.use_band_energy {
        bands_store = BandSpec::default_for(data.n);
        Some(&bands_store)
    } else {
        None
    };
    let system = model.system();

    let mut opt = AdamW::new(model.params(), cfg.weight_decay);

    // With a zero-epoch budget the contract is still to produce a usable
    // checkpoint: the freshly initialized parameters, untouched optimizer
    // moments, and an empty history.
    if cfg.epochs == 0 {
        let meta = json!({
            "kind": "checkpoint",
            "run": run_meta,
            "epoch": 0,
            "adam_t": opt.t,
            "lr": cfg.lr,
            "best_val": serde_json::Value::Null,
            "seed": cfg.seed,
            "train_config": cfg,
            "normalizer": data.normalizer,
            "version": env!("CARGO_PKG_VERSION"),
        });
        write_checkpoint(&ck_path, model.params(), &opt, &meta)?;
        log.flush()?;
        return Ok(TrainOutcome {
            best_epoch: 0,
            best_val: f64::NAN,
            history: Vec::new(),
            skipped_batches: 0,
            total_batches: 0,
            checkpoint_path: ck_path,
            log_path,
        });
    }
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut wrote_checkpoint = false;
    let mut plateau_lr = cfg.lr;
    let mut plateau_best = f64::INFINITY;
    let mut plateau_wait = 0usize;
    let mut bad_val_epochs = 0usize;
    let mut skipped_batches = 0usize;
    let mut total_batches = 0usize;
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        let knobs = epoch_knobs(cfg, epoch);
        let lr = match cfg.schedule {
            LrSchedule::Cosine => {
                let phase = std::f64::consts::PI * epoch as f64 / cfg.epochs as f64;
                cfg.lr * (1.0 + phase.cos()) / 2.0
            }
            LrSchedule::Plateau { .. } => plateau_lr,
        };

        let mut shuffle_rng = seeding::coord_rng(cfg.seed, &[0x51, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let pcfg = pass_cfg(system, cfg, &knobs, bands, false);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        let mut epoch_skipped = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            total_batches += 1;
            global_step += 1;
            let outs: Vec<PassOut> = chunk
                .par_iter()
                .map(|&ji| run_pass(&*model, &data.train, &jobs[ji], &pcfg, cfg.seed, epoch))
                .collect();
            if outs.iter().any(|o| !o.finite) {
                skipped_batches += 1;
                epoch_skipped += 1;
                let line = json!({
                    "kind": "step", "epoch": epoch, "step": global_step, "skipped": true,
                });
                writeln!(log, "{line}")?;
                continue;
            }
            let n_tensors = model.params().tensors().len();
            let mut grads: Vec<Vec<f64>> = model
                .params()
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect();
            let scale = 1.0 / outs.len() as f64;
            for o in &outs {
                let g = o.grads.as_ref().expect("finite pass carries gradients");
                for ti in 0..n_tensors {
                    for (acc, x) in grads[ti].iter_mut().zip(&g[ti]) {
                        *acc += x * scale;
                    }
                }
            }
            let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(model.params_mut(), &grads, lr);
            let b = mean_breakdown(&outs);
            epoch_loss += b.total;
            epoch_steps += 1;
            let line = json!({
                "kind": "step", "epoch": epoch, "step": global_step, "lr": lr,
                "grad_norm": grad_norm, "loss": b,
                "kstep_skipped": outs.iter().filter(|o| o.kstep_skipped).count(),
            });
            writeln!(log, "{line}")?;
        }
        let train_loss =
            if epoch_steps > 0 { epoch_loss / epoch_steps as f64 } else { f64::NAN };

        let val_loss = validation_loss(&*model, data, cfg, epoch)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            p_ss: knobs.p_ss,
            l_tail: knobs.l_tail,
            lambda_e: knobs.lambda_e,
            k_steps: knobs.k_steps,
            skipped_batches: epoch_skipped,
        };
        let line = json!({ "kind": "epoch", "record": record });
        writeln!(log, "{line}")?;
        log.flush()?;
        history.push(record);

        if !val_loss.is_finite() {
            bad_val_epochs += 1;
            if bad_val_epochs >= 3 {
                return Err(CoreError::divergence(format!(
                    "validation loss non-finite for {bad_val_epochs} consecutive epochs \
                     (last finite checkpoint: epoch {best_epoch})"
                )));
            }
            continue;
        }
        bad_val_epochs = 0;

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            let meta = json!({
                "kind": "checkpoint",
                "run": run_meta,
                "epoch": epoch,
                "adam_t": opt.t,
                "lr": lr,
                "best_val": best_val,
                "seed": cfg.seed,
                "train_config": cfg,
                "normalizer": data.normalizer,
                "version": env!("CARGO_PKG_VERSION"),
            });
            write_checkpoint(&ck_path, model.params(), &opt, &meta)?;
            wrote_checkpoint = true;
        }

        if let LrSchedule::Plateau { patience, factor, min_lr } = cfg.schedule {
            if val_loss < plateau_best - 1e-12 {
                plateau_best = val_loss;
                plateau_wait = 0;
            } else {
                plateau_wait += 1;
                if plateau_wait > patience {
                    plateau_lr = (plateau_lr * factor).max(min_lr);
                    plateau_wait = 0;
                }
            }
        }
    }

    if !wrote_checkpoint {
        return Err(CoreError::divergence(
            "no finite validation epoch; nothing to checkpoint",
        ));
    }
    let skip_rate = skipped_batches as f64 / total_batches as f64;
    if skip_rate > 0.01 {
        return Err(CoreError::divergence(format!(
            "skipped {skipped_batches} of {total_batches} batches ({:.2}%) on non-finite losses",
            skip_rate * 100.0
        )));
    }

    Ok(TrainOutcome {
        best_epoch,
        best_val,
        history,
        skipped_batches,
        total_batches,
        checkpoint_path: ck_path,
        log_path,
    })
}
