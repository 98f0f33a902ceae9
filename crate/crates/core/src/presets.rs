//! Declarative run configuration and the four canonical presets.
//!
//! A `RunConfig` is the single document the command-line tools consume:
//! it pins the data generator, the trajectory split, normalization, the
//! model shape, the full training curriculum, and the evaluation
//! protocol. Presets come in two sizes per system: `paper-*` mirrors
//! the reference experiment scale, `desk-*` trims the ensemble, the
//! widths, and the epoch budget so a full train/evaluate cycle runs on
//! a laptop core in minutes.

use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineDims};
use crate::datastore::{NormMode, SplitSpec};
use crate::error::{CoreError, Result};
use crate::ks::KsConfig;
use crate::l96::L96Config;
use crate::latents::System;
use crate::losses::{LossWeights, RampSpec, SpectralCfg, SpectralVariant};
use crate::predictor::{HineModel, ModelDims, OutputMode};
use crate::recurrence::OffStridePolicy;
use crate::trainer::{LrSchedule, RampSet, TrainConfig};

/// Trajectory fractions handed to validation and test; training takes
/// the remainder including rounding leftovers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

/// Model shape without the fields implied by the data generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Retained spectral modes per level, finest first.
    pub k: Vec<usize>,
    pub d_c: usize,
    pub d_hid: Vec<usize>,
    pub strides: Vec<usize>,
    pub policy: OffStridePolicy,
    pub ema_alpha: Option<f64>,
    pub bins: usize,
    pub base_width: usize,
    pub kernel: usize,
    pub alpha_u: f64,
    pub alpha_corr: f64,
    pub gate_p0: f64,
    pub downsample: bool,
    pub mode: OutputMode,
    /// Channel width for the comparison models; `None` searches for the
    /// width whose parameter count best matches the main model.
    pub baseline_width: Option<usize>,
}

/// Rollout evaluation protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Teacher-forced warm steps; `None` uses the training window length.
    pub warm: Option<usize>,
    /// Closed-loop steps after the warm segment.
    pub horizon: usize,
    /// Rollout starts per test trajectory, evenly spaced.
    pub per_traj: usize,
    /// Horizons highlighted in the summary tables.
    pub horizons: Vec<usize>,
    /// Predictability threshold on the mean correlation curve.
    pub acc_threshold: f64,
}

/// The three trainable forecasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    MsrHine,
    UnetAr,
    HineL2,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::MsrHine => "msr-hine",
            ModelKind::UnetAr => "unet-ar",
            ModelKind::HineL2 => "hine-l2",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "msr-hine" => Ok(ModelKind::MsrHine),
            "unet-ar" => Ok(ModelKind::UnetAr),
            "hine-l2" => Ok(ModelKind::HineL2),
            other => Err(CoreError::invalid_input(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Everything one run needs: generator, split, model, training, eval.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: System,
    /// Master seed; generation, splitting, initialization, and the
    /// training curriculum all derive their streams from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<KsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l96: Option<L96Config>,
    pub split: SplitFractions,
    pub normalization: NormMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Keeps the split shuffle off the stream that draws the first
/// trajectory's initial condition.
const SPLIT_STREAM_SALT: u64 = 0x53504c49;

pub const PRESET_NAMES: [&str; 4] = ["paper-ks", "paper-l96", "desk-ks", "desk-l96"];

impl RunConfig {
    /// One of the four canonical configurations.
    pub fn preset(name: &str) -> Result<RunConfig> {
        match name {
            "paper-ks" => Ok(paper_ks()),
            "paper-l96" => Ok(paper_l96()),
            "desk-ks" => Ok(desk_ks()),
            "desk-l96" => Ok(desk_l96()),
            other => Err(CoreError::invalid_config(format!(
                "unknown preset '{other}'; expected one of {}",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    /// Strict parse: unknown keys anywhere are rejected.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CoreError::format(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.system {
            System::Ks => {
                let ks = self
                    .ks
                    .as_ref()
                    .ok_or_else(|| CoreError::invalid_config("system 'ks' needs a [ks] block"))?;
                ks.validate()?;
            }
            System::L96 => {
                let l = self
                    .l96
                    .as_ref()
                    .ok_or_else(|| CoreError::invalid_config("system 'l96' needs a [l96] block"))?;
                l.validate()?;
            }
        }
        let s = &self.split;
        if !(s.train > 0.0) || s.val < 0.0 || s.test < 0.0 {
            return Err(CoreError::invalid_config("split fractions must be positive"));
        }
        self.model_dims()?.validate()?;
        self.train.validate()?;
        if self.eval.horizon == 0 || self.eval.per_traj == 0 {
            return Err(CoreError::invalid_config("eval horizon and per_traj must be positive"));
        }
        if !(self.eval.acc_threshold.is_finite()) {
            return Err(CoreError::invalid_config("acc_threshold must be finite"));
        }
        Ok(())
    }

    /// Grid size and physical domain length implied by the generator.
    pub fn grid(&self) -> Result<(usize, f64)> {
        match self.system {
            System::Ks => {
                let ks = self
                    .ks
                    .as_ref()
                    .ok_or_else(|| CoreError::invalid_config("missing [ks] block"))?;
                Ok((ks.n_grid, ks.domain_len()))
            }
            System::L96 => {
                let l = self
                    .l96
                    .as_ref()
                    .ok_or_else(|| CoreError::invalid_config("missing [l96] block"))?;
                // The ring has no physical length scale; unit spacing.
                Ok((l.n_vars, l.n_vars as f64))
            }
        }
    }

    pub fn model_dims(&self) -> Result<ModelDims> {
        let (n, domain_len) = self.grid()?;
        let m = &self.model;
        Ok(ModelDims {
            system: self.system,
            n,
            domain_len,
            k: m.k.clone(),
            d_c: m.d_c,
            d_hid: m.d_hid.clone(),
            strides: m.strides.clone(),
            policy: m.policy,
            ema_alpha: m.ema_alpha,
            bins: m.bins,
            base_width: m.base_width,
            kernel: m.kernel,
            alpha_u: m.alpha_u,
            alpha_corr: m.alpha_corr,
            gate_p0: m.gate_p0,
            downsample: m.downsample,
            mode: m.mode,
        })
    }

    /// Trainable-parameter count of the main model at these dims.
    pub fn reference_param_count(&self) -> Result<usize> {
        let dims = self.model_dims()?;
        let model = HineModel::new(&dims, 0)?;
        Ok(model.params.n_params())
    }

    fn baseline_shell(&self, base_width: usize) -> Result<BaselineDims> {
        let (n, _) = self.grid()?;
        let m = &self.model;
        Ok(BaselineDims {
            system: self.system,
            n,
            base_width,
            kernel: m.kernel,
            alpha_u: m.alpha_u,
            downsample: m.downsample,
            mode: m.mode,
        })
    }

    /// Comparison-model dims at parameter parity (or the configured
    /// explicit width).
    pub fn baseline_dims(&self, kind: ModelKind) -> Result<BaselineDims> {
        let width = match (self.model.baseline_width, kind) {
            (Some(w), _) => w,
            (None, ModelKind::MsrHine) => self.model.base_width,
            (None, ModelKind::UnetAr) => {
                let target = self.reference_param_count()?;
                let shell = self.baseline_shell(2)?;
                baselines::fit_width(target, 0.15, |b| {
                    baselines::unet_ar_param_count(&shell, b)
                })?
            }
            (None, ModelKind::HineL2) => {
                let target = self.reference_param_count()?;
                let shell = self.baseline_shell(2)?;
                let k1 = self.model.k[0];
                baselines::fit_width(target, 0.15, |b| {
                    baselines::hine_l2_param_count(&shell, k1, b)
                })?
            }
        };
        self.baseline_shell(width)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec::new(
            self.split.train,
            self.split.val,
            self.split.test,
            self.seed ^ SPLIT_STREAM_SALT,
        )
    }

    /// Warm-start length for evaluation rollouts.
    pub fn warm_steps(&self) -> usize {
        self.eval.warm.unwrap_or(self.train.l_tbptt)
    }
}

fn weights_default() -> LossWeights {
    LossWeights {
        lambda_u: 1.0,
        lambda_spec: 0.1,
        lambda_prior: 0.1,
        lambda_e: 0.05,
        gamma_h: 1e-3,
        lambda_tail: 1.0,
        lambda_kstep: 0.1,
        lambda_latent: 0.1,
    }
}

fn ramp(start: f64, duration: f64, v_max: f64) -> RampSpec {
    RampSpec { start, duration, v_max }
}

fn paper_ks() -> RunConfig {
    RunConfig {
        system: System::Ks,
        seed: 17,
        ks: Some(KsConfig { n_traj: 100, ..KsConfig::default() }),
        l96: None,
        split: SplitFractions { train: 0.7, val: 0.15, test: 0.15 },
        normalization: NormMode::Global,
        model: ModelConfig {
            k: vec![16, 4],
            d_c: 32,
            d_hid: vec![64, 64],
            strides: vec![1, 4],
            policy: OffStridePolicy::Ema,
            ema_alpha: None,
            bins: 8,
            base_width: 32,
            kernel: 3,
            alpha_u: 0.5,
            alpha_corr: 0.1,
            gate_p0: 0.9,
            downsample: false,
            mode: OutputMode::Residual,
            baseline_width: None,
        },
        train: TrainConfig {
            epochs: 80,
            l_tbptt: 32,
            window_stride: 16,
            val_stride: 64,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 0.7,
            schedule: LrSchedule::Plateau { patience: 6, factor: 0.5, min_lr: 1e-5 },
            seed: 17,
            k_max: 8,
            weights: weights_default(),
            ramps: RampSet {
                scheduled_sampling: ramp(30.0, 45.0, 0.5),
                tail: ramp(35.0, 45.0, 0.6),
                tail_in_steps: false,
                energy: ramp(20.0, 30.0, 0.05),
                kstep: ramp(18.0, 20.0, 1.0),
                val_tail: ramp(5.0, 30.0, 0.8),
            },
            spectral: SpectralCfg {
                k: 16,
                include_dc: false,
                variant: SpectralVariant::Relative,
                eps_rel: 1e-8,
            },
            use_band_energy: true,
            prior_w_amp: 1.0,
            prior_w_phi: vec![1.0, 2.0],
            latent_supervision: true,
        },
        eval: EvalConfig {
            warm: None,
            horizon: 400,
            per_traj: 8,
            horizons: vec![10, 25, 50, 100, 200, 400],
            acc_threshold: 0.5,
        },
    }
}

fn paper_l96() -> RunConfig {
    RunConfig {
        system: System::L96,
        seed: 17,
        ks: None,
        l96: Some(L96Config::default()),
        split: SplitFractions { train: 0.7, val: 0.15, test: 0.15 },
        normalization: NormMode::Global,
        model: ModelConfig {
            k: vec![8, 3],
            d_c: 32,
            d_hid: vec![64, 64],
            strides: vec![1, 4],
            policy: OffStridePolicy::Ema,
            ema_alpha: None,
            bins: 8,
            base_width: 24,
            kernel: 3,
            alpha_u: 0.5,
            alpha_corr: 0.1,
            gate_p0: 0.9,
            downsample: false,
            mode: OutputMode::Residual,
            baseline_width: None,
        },
        train: TrainConfig {
            epochs: 80,
            l_tbptt: 16,
            window_stride: 8,
            val_stride: 32,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            schedule: LrSchedule::Cosine,
            seed: 17,
            k_max: 8,
            weights: weights_default(),
            ramps: RampSet {
                scheduled_sampling: ramp(0.0, 70.0, 0.5),
                tail: ramp(20.0, 20.0, 8.0),
                tail_in_steps: true,
                energy: ramp(20.0, 30.0, 0.05),
                kstep: ramp(18.0, 20.0, 1.0),
                val_tail: ramp(5.0, 30.0, 0.8),
            },
            spectral: SpectralCfg {
                k: 3,
                include_dc: true,
                variant: SpectralVariant::Absolute,
                eps_rel: 1e-8,
            },
            use_band_energy: true,
            prior_w_amp: 1.0,
            prior_w_phi: vec![1.0, 2.0],
            latent_supervision: true,
        },
        eval: EvalConfig {
            warm: None,
            horizon: 100,
            per_traj: 8,
            horizons: vec![10, 25, 50, 75, 100],
            acc_threshold: 0.5,
        },
    }
}

fn desk_ks() -> RunConfig {
    let mut cfg = paper_ks();
    cfg.ks = Some(KsConfig {
        n_grid: 64,
        t_final: 125.0,
        t_burn: 25.0,
        n_traj: 8,
        ..KsConfig::default()
    });
    cfg.split = SplitFractions { train: 0.5, val: 0.25, test: 0.25 };
    cfg.model.d_hid = vec![32, 32];
    cfg.model.base_width = 8;
    cfg.train.epochs = 40;
    cfg.train.lr = 2e-3;
    cfg.train.l_tbptt = 16;
    cfg.train.window_stride = 16;
    cfg.train.val_stride = 128;
    cfg.train.batch_size = 16;
    cfg.train.k_max = 4;
    // With only a handful of short trajectories the prior-matching term
    // otherwise dwarfs the state error and ends up picking checkpoints
    // by phase fit alone, so it is weighted well below the full-scale run.
    cfg.train.weights.lambda_prior = 0.02;
    cfg.train.prior_w_phi = vec![0.5, 1.0];
    cfg.train.ramps = RampSet {
        scheduled_sampling: ramp(8.0, 12.0, 0.5),
        tail: ramp(10.0, 12.0, 0.5),
        tail_in_steps: false,
        energy: ramp(6.0, 8.0, 0.05),
        kstep: ramp(5.0, 6.0, 1.0),
        val_tail: ramp(2.0, 8.0, 0.8),
    };
    cfg.eval.horizon = 100;
    cfg.eval.per_traj = 12;
    cfg.eval.horizons = vec![10, 25, 50, 100];
    cfg
}

fn desk_l96() -> RunConfig {
    let mut cfg = paper_l96();
    cfg.l96 = Some(L96Config { n_traj: 16, n_saved: 500, t_vis_end: 25.0, ..L96Config::default() });
    cfg.split = SplitFractions { train: 0.75, val: 0.125, test: 0.125 };
    cfg.model.d_hid = vec![32, 32];
    cfg.model.base_width = 8;
    cfg.train.epochs = 40;
    cfg.train.window_stride = 16;
    cfg.train.val_stride = 64;
    cfg.train.batch_size = 16;
    cfg.train.k_max = 4;
    // Same rebalance as desk-ks: raw-spectrum prior targets are large on
    // this grid and would swamp the state term at desk scale.
    cfg.train.weights.lambda_prior = 0.02;
    cfg.train.ramps = RampSet {
        scheduled_sampling: ramp(0.0, 30.0, 0.5),
        tail: ramp(10.0, 15.0, 6.0),
        tail_in_steps: true,
        energy: ramp(6.0, 8.0, 0.05),
        kstep: ramp(5.0, 6.0, 1.0),
        val_tail: ramp(2.0, 8.0, 0.8),
    };
    cfg.eval.horizon = 50;
    cfg.eval.per_traj = 12;
    cfg.eval.horizons = vec![10, 25, 50];
    cfg
}
