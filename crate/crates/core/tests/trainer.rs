//! Training-loop contracts on synthetic trajectories: zero-epoch
//! checkpoints, objective descent, bit-identical reruns, checkpoint
//! restoration, plateau scheduling, and window bookkeeping.

mod common;

use std::f64::consts::PI;
use std::fs;

use chaos_forecast_core::baselines::{BaselineDims, UNetAr};
use chaos_forecast_core::datastore::{
    self, BundleMeta, NormMode, SplitSpec, TrajectoryBundle,
};
use chaos_forecast_core::latents::System;
use chaos_forecast_core::losses::{LossWeights, RampSpec, SpectralCfg, SpectralVariant};
use chaos_forecast_core::predictor::{HineModel, ModelDims, OutputMode, StepModel};
use chaos_forecast_core::recurrence::OffStridePolicy;
use chaos_forecast_core::seeding;
use chaos_forecast_core::trainer::{
    epoch_knobs, prepare_data, read_checkpoint, restore_model, train, validation_loss,
    window_pass, LrSchedule, PassCfg, PreparedData, RampSet, TrainConfig,
};
use serde_json::json;

/// Mildly contracting wave fields: enough structure to learn from,
/// cheap to synthesize, no integrator in the loop.
fn synthetic_bundle(s: usize, t: usize, n: usize) -> TrajectoryBundle {
    let mut data = Vec::with_capacity(s * t * n);
    for traj in 0..s {
        let mut u: Vec<f64> = (0..n)
            .map(|j| {
                let x = 2.0 * PI * j as f64 / n as f64;
                (x + traj as f64).sin() + 0.3 * (2.0 * x + 0.5 * traj as f64).cos()
            })
            .collect();
        for _ in 0..t {
            data.extend_from_slice(&u);
            for x in u.iter_mut() {
                *x *= 0.97;
            }
        }
    }
    let times: Vec<f64> = (0..t).map(|i| i as f64 * 0.1).collect();
    let meta = BundleMeta::new("ks", 5, json!({"source": "synthetic"}));
    TrajectoryBundle::new(data, (s, t, n), times, None, meta).unwrap()
}

fn micro_dims() -> ModelDims {
    ModelDims {
        system: System::Ks,
        n: 16,
        domain_len: 6.0,
        k: vec![4, 2],
        d_c: 4,
        d_hid: vec![6, 5],
        strides: vec![1, 2],
        policy: OffStridePolicy::Ema,
        ema_alpha: None,
        bins: 4,
        base_width: 2,
        kernel: 3,
        alpha_u: 0.5,
        alpha_corr: 0.1,
        gate_p0: 0.9,
        downsample: false,
        mode: OutputMode::Residual,
    }
}

fn micro_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        l_tbptt: 4,
        window_stride: 2,
        val_stride: 4,
        batch_size: 8,
        lr: 3e-3,
        weight_decay: 1e-4,
        grad_clip: 1.0,
        schedule: LrSchedule::Plateau { patience: 3, factor: 0.5, min_lr: 1e-5 },
        seed: 7,
        k_max: 2,
        weights: LossWeights {
            lambda_u: 1.0,
            lambda_spec: 0.1,
            lambda_prior: 0.1,
            lambda_e: 0.05,
            gamma_h: 1e-3,
            lambda_tail: 1.0,
            lambda_kstep: 0.1,
            lambda_latent: 0.1,
        },
        // Constant knobs: the objective keeps the same shape at every
        // epoch, so descent below is attributable to optimization.
        ramps: RampSet {
            scheduled_sampling: RampSpec::constant(0.3),
            tail: RampSpec::constant(0.5),
            tail_in_steps: false,
            energy: RampSpec::constant(0.05),
            kstep: RampSpec::constant(1.0),
            val_tail: RampSpec::constant(0.5),
        },
        spectral: SpectralCfg {
            k: 4,
            include_dc: false,
            variant: SpectralVariant::Relative,
            eps_rel: 1e-8,
        },
        use_band_energy: true,
        prior_w_amp: 1.0,
        prior_w_phi: vec![1.0, 2.0],
        latent_supervision: true,
    }
}

fn prepared(s: usize, t: usize) -> PreparedData {
    let bundle = synthetic_bundle(s, t, 16);
    let split = SplitSpec::new(0.5, 0.25, 0.25, 99);
    prepare_data(&bundle, &split, NormMode::Global).unwrap()
}

#[test]
fn zero_epoch_budget_still_writes_a_checkpoint() {
    let data = prepared(4, 12);
    let cfg = micro_cfg(0);
    let mut model = HineModel::new(&micro_dims(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let out = train(&mut model, &data, &cfg, &json!({"model": "msr-hine"}), dir.path()).unwrap();
    assert_eq!(out.best_epoch, 0);
    assert!(out.best_val.is_nan());
    assert!(out.history.is_empty());
    assert_eq!(out.total_batches, 0);

    let ck = read_checkpoint(&out.checkpoint_path).unwrap();
    assert_eq!(ck.meta["epoch"], json!(0));
    assert!(ck.meta["best_val"].is_null());
    assert_eq!(ck.meta["run"]["model"], json!("msr-hine"));

    // The stored parameters are the untouched initialization.
    for ((name, stored), t) in ck.params.iter().zip(model.params().tensors()) {
        assert_eq!(name, &t.name);
        assert_eq!(stored, &t.data);
    }

    // They restore into a model built from a different seed.
    let mut other = HineModel::new(&micro_dims(), 12345).unwrap();
    restore_model(&mut other, &ck).unwrap();
    for (a, b) in other.params().tensors().iter().zip(model.params().tensors()) {
        assert_eq!(a.data, b.data);
    }
}

#[test]
fn training_descends_on_a_contracting_flow() {
    let data = prepared(4, 40);
    let cfg = micro_cfg(6);
    let mut model = HineModel::new(&micro_dims(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let out = train(&mut model, &data, &cfg, &json!({}), dir.path()).unwrap();
    assert_eq!(out.history.len(), 6);
    assert_eq!(out.skipped_batches, 0);
    for r in &out.history {
        assert!(r.train_loss.is_finite() && r.val_loss.is_finite(), "epoch {}", r.epoch);
    }
    let first = out.history.first().unwrap().train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(
        last < 0.9 * first,
        "objective barely moved: {first} -> {last}"
    );
    assert!(out.best_val.is_finite());
    assert!(out.checkpoint_path.exists());

    // The log carries one epoch line per epoch and one step line per
    // optimizer step.
    let log = fs::read_to_string(&out.log_path).unwrap();
    let mut epochs = 0;
    let mut steps = 0;
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        match v["kind"].as_str().unwrap() {
            "epoch" => epochs += 1,
            "step" => steps += 1,
            other => panic!("unexpected log line kind {other}"),
        }
    }
    assert_eq!(epochs, 6);
    assert_eq!(steps, out.total_batches);

    // Ramp bookkeeping made it into the records.
    let knobs = epoch_knobs(&cfg, 5);
    let r5 = &out.history[5];
    assert_eq!(r5.p_ss, knobs.p_ss);
    assert_eq!(r5.l_tail, knobs.l_tail);
    assert_eq!(r5.k_steps, knobs.k_steps);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let data = prepared(4, 24);
    let cfg = micro_cfg(3);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut params = Vec::new();
    let mut bytes = Vec::new();
    for dir in &dirs {
        let mut model = HineModel::new(&micro_dims(), 17).unwrap();
        let out = train(&mut model, &data, &cfg, &json!({}), dir.path()).unwrap();
        params.push(
            model
                .params()
                .tensors()
                .iter()
                .flat_map(|t| t.data.iter().copied())
                .collect::<Vec<f64>>(),
        );
        bytes.push((
            fs::read(&out.checkpoint_path).unwrap(),
            fs::read(&out.log_path).unwrap(),
        ));
    }
    assert_eq!(params[0], params[1]);
    assert_eq!(bytes[0].0, bytes[1].0, "checkpoint bytes differ between reruns");
    assert_eq!(bytes[0].1, bytes[1].1, "log bytes differ between reruns");
}

#[test]
fn checkpoint_restores_to_the_recorded_validation_loss() {
    let data = prepared(4, 32);
    let cfg = micro_cfg(5);
    let mut model = HineModel::new(&micro_dims(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&mut model, &data, &cfg, &json!({}), dir.path()).unwrap();

    let ck = read_checkpoint(&out.checkpoint_path).unwrap();
    assert_eq!(ck.meta["best_val"].as_f64().unwrap(), out.best_val);

    let mut restored = HineModel::new(&micro_dims(), 999).unwrap();
    restore_model(&mut restored, &ck).unwrap();
    let revalidated = validation_loss(&restored, &data, &cfg, out.best_epoch).unwrap();
    assert_eq!(revalidated, out.best_val, "restored model scores a different validation loss");
}

#[test]
fn plateau_schedule_cuts_the_rate_after_stalled_epochs() {
    let data = prepared(4, 24);
    let mut cfg = micro_cfg(5);
    // A rate this small cannot move any weight, so validation stalls
    // from the first epoch and only the scheduler acts.
    cfg.lr = 1e-30;
    cfg.weight_decay = 0.0;
    cfg.schedule = LrSchedule::Plateau { patience: 1, factor: 0.5, min_lr: 1e-32 };
    let mut model = UNetAr::new(
        &BaselineDims {
            system: System::Ks,
            n: 16,
            base_width: 2,
            kernel: 3,
            alpha_u: 0.5,
            downsample: false,
            mode: OutputMode::Residual,
        },
        21,
    );
    let dir = tempfile::tempdir().unwrap();
    let out = train(&mut model, &data, &cfg, &json!({}), dir.path()).unwrap();
    let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
    // Stall at epochs 1 and 2 exhausts the patience of one, so the cut
    // lands at epoch 3; the count restarts and cuts again after 5.
    assert_eq!(lrs, vec![1e-30, 1e-30, 1e-30, 5e-31, 5e-31]);
}

#[test]
fn window_pass_reports_non_finite_and_short_continuations() {
    let dims = BaselineDims {
        system: System::Ks,
        n: 16,
        base_width: 2,
        kernel: 3,
        alpha_u: 0.5,
        downsample: false,
        mode: OutputMode::Residual,
    };
    let bundle = synthetic_bundle(1, 10, 16);
    let traj: Vec<&[f64]> = (0..10)
        .map(|i| &bundle.trajectory(0)[i * 16..(i + 1) * 16])
        .collect();
    let weights = LossWeights { lambda_u: 1.0, lambda_kstep: 0.1, ..LossWeights::zeros() };
    let spectral =
        SpectralCfg { k: 4, include_dc: false, variant: SpectralVariant::Relative, eps_rel: 1e-8 };
    let mk_cfg = |k_steps: usize| PassCfg {
        system: System::Ks,
        l: 4,
        p_ss: 0.0,
        l_tail: 1,
        k_steps,
        weights,
        spectral: &spectral,
        bands: None,
        prior_w_amp: 1.0,
        prior_w_phi: &[1.0],
        latent_supervision: false,
        compute_grads: true,
    };

    // Continuation shorter than the requested steps: the term is
    // dropped and flagged rather than computed on a ragged slice.
    let model = UNetAr::new(&dims, 23);
    let mut rng = seeding::coord_rng(1, &[1]);
    let out = window_pass(&model, &traj[0..5], &traj[5..6], &mk_cfg(2), &mut rng);
    assert!(out.finite);
    assert!(out.kstep_skipped);
    assert_eq!(out.breakdown.kstep, 0.0);

    let mut rng = seeding::coord_rng(1, &[1]);
    let out = window_pass(&model, &traj[0..5], &traj[5..7], &mk_cfg(2), &mut rng);
    assert!(!out.kstep_skipped);
    assert!(out.breakdown.kstep > 0.0);

    // A poisoned parameter surfaces as a non-finite pass with no
    // gradients instead of a crash.
    let mut model = UNetAr::new(&dims, 23);
    model.params_mut().tensors_mut()[0].data[0] = f64::NAN;
    let mut rng = seeding::coord_rng(1, &[1]);
    let out = window_pass(&model, &traj[0..5], &traj[5..7], &mk_cfg(0), &mut rng);
    assert!(!out.finite);
    assert!(out.grads.is_none());
    assert!(!out.breakdown.total.is_finite());
}

#[test]
fn window_starts_enumerate_strided_offsets() {
    assert_eq!(datastore::window_starts(5, 2, 1).unwrap(), vec![0, 1, 2]);
    assert_eq!(datastore::window_starts(10, 3, 4).unwrap(), vec![0, 4]);
    assert_eq!(datastore::window_starts(5, 4, 1).unwrap(), vec![0]);
    assert!(datastore::window_starts(4, 4, 1).unwrap().is_empty());
    assert!(datastore::window_starts(5, 0, 1).is_err());
    assert!(datastore::window_starts(5, 2, 0).is_err());
}

#[test]
fn splits_too_short_for_windows_are_rejected() {
    let data = prepared(4, 6);
    let mut cfg = micro_cfg(2);
    cfg.l_tbptt = 8;
    let mut model = HineModel::new(&micro_dims(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = train(&mut model, &data, &cfg, &json!({}), dir.path()).unwrap_err();
    assert!(err.to_string().contains("no windows"), "unexpected error: {err}");
}
