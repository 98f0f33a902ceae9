//! End-to-end checks of the command-line surface: exit codes, file
//! outputs, and the generate/train/evaluate/compare/inspect pipeline on
//! a configuration small enough to finish in seconds.

use std::fs;
use std::path::Path;

use chaos_forecast_cli::run;

/// A complete run configuration sized for test speed: a gently forced
/// 32-point field on a quarter-scale domain, two training epochs.
const MICRO_CFG: &str = r#"{
  "system": "ks",
  "seed": 3,
  "ks": {
    "domain_scale": 4.0,
    "n_grid": 32,
    "dt": 0.1,
    "t_final": 40.0,
    "t_burn": 10.0,
    "ic_max_abs": 2.0,
    "n_traj": 4,
    "dealias": "pad32"
  },
  "split": { "train": 0.5, "val": 0.25, "test": 0.25 },
  "normalization": "global",
  "model": {
    "k": [8, 2],
    "d_c": 16,
    "d_hid": [16, 16],
    "strides": [1, 4],
    "policy": "ema",
    "ema_alpha": null,
    "bins": 8,
    "base_width": 4,
    "kernel": 3,
    "alpha_u": 0.5,
    "alpha_corr": 0.1,
    "gate_p0": 0.9,
    "downsample": false,
    "mode": "residual",
    "baseline_width": null
  },
  "train": {
    "epochs": 2,
    "l_tbptt": 8,
    "window_stride": 32,
    "val_stride": 64,
    "batch_size": 4,
    "lr": 0.001,
    "weight_decay": 0.0001,
    "grad_clip": 0.7,
    "schedule": { "kind": "plateau", "patience": 6, "factor": 0.5, "min_lr": 0.00001 },
    "seed": 3,
    "k_max": 2,
    "weights": {
      "lambda_u": 1.0, "lambda_spec": 0.1, "lambda_prior": 0.1, "lambda_e": 0.05,
      "gamma_h": 0.001, "lambda_tail": 1.0, "lambda_kstep": 0.1, "lambda_latent": 0.1
    },
    "ramps": {
      "scheduled_sampling": { "start": 0.0, "duration": 2.0, "v_max": 0.5 },
      "tail": { "start": 0.0, "duration": 2.0, "v_max": 0.5 },
      "tail_in_steps": false,
      "energy": { "start": 0.0, "duration": 2.0, "v_max": 0.05 },
      "kstep": { "start": 1.0, "duration": 1.0, "v_max": 1.0 },
      "val_tail": { "start": 0.0, "duration": 1.0, "v_max": 0.8 }
    },
    "spectral": { "k": 8, "include_dc": false, "variant": "relative", "eps_rel": 1e-8 },
    "use_band_energy": true,
    "prior_w_amp": 1.0,
    "prior_w_phi": [1.0, 2.0],
    "latent_supervision": true
  },
  "eval": {
    "warm": 8,
    "horizon": 20,
    "per_traj": 2,
    "horizons": [10, 20],
    "acc_threshold": 0.5
  }
}"#;

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["chaos-forecast"];
    argv.extend_from_slice(args);
    run(argv)
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn help_and_version_exit_cleanly() {
    assert_eq!(cli(&["--help"]), 0);
    assert_eq!(cli(&["--version"]), 0);
    assert_eq!(cli(&["train", "--help"]), 0);
}

#[test]
fn usage_errors_exit_one() {
    // No subcommand, missing required flags, and unknown flags are all
    // argument errors, not runtime failures.
    assert_eq!(cli(&[]), 1);
    assert_eq!(cli(&["train"]), 1);
    assert_eq!(cli(&["gen-ks", "--preset", "desk-ks"]), 1, "missing --out");
    assert_eq!(cli(&["inspect"]), 1);
    assert_eq!(cli(&["gen-ks", "--bogus-flag", "x", "--out", "y"]), 1);
}

#[test]
fn config_source_must_be_unambiguous() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, MICRO_CFG).unwrap();
    let out = path_str(&dir.path().join("b.cfb1"));
    // Neither source given.
    assert_eq!(cli(&["gen-ks", "--out", &out]), 1);
    // Both given: rejected at argument parsing.
    assert_eq!(
        cli(&["gen-ks", "--config", cfg.to_str().unwrap(), "--preset", "desk-ks", "--out", &out]),
        1
    );
    assert_eq!(cli(&["gen-ks", "--preset", "no-such-preset", "--out", &out]), 1);
}

#[test]
fn missing_inputs_are_validation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(&dir.path().join("o"));
    assert_eq!(
        cli(&["train", "--preset", "desk-ks", "--data", "/no/such/bundle.cfb1", "--out", &out]),
        1
    );
    assert_eq!(
        cli(&["evaluate", "--preset", "desk-ks", "--data", "/no/such/bundle.cfb1",
              "--checkpoint", "/no/such/ck.cfb1", "--out", &out]),
        1
    );
    assert_eq!(cli(&["inspect", "/no/such/file.cfb1"]), 1);
    assert_eq!(
        cli(&["train", "--config", "/no/such/cfg.json", "--data", "/x", "--out", &out]),
        1
    );
}

#[test]
fn generator_and_config_system_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(&dir.path().join("b.cfb1"));
    assert_eq!(cli(&["gen-l96", "--preset", "desk-ks", "--out", &out]), 1);
    assert!(!Path::new(&out).exists());
}

#[test]
fn inspect_rejects_arbitrary_files() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.cfb1");
    fs::write(&junk, b"this is not a container").unwrap();
    assert_eq!(cli(&["inspect", junk.to_str().unwrap()]), 1);
}

#[test]
fn generation_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, MICRO_CFG).unwrap();
    let cfg_s = path_str(&cfg);
    let a = path_str(&dir.path().join("a.cfb1"));
    let b = path_str(&dir.path().join("b.cfb1"));
    let c = path_str(&dir.path().join("c.cfb1"));
    assert_eq!(cli(&["gen-ks", "--config", &cfg_s, "--out", &a]), 0);
    assert_eq!(cli(&["gen-ks", "--config", &cfg_s, "--out", &b]), 0);
    assert_eq!(cli(&["gen-ks", "--config", &cfg_s, "--seed", "99", "--out", &c]), 0);
    let (ba, bb, bc) = (fs::read(&a).unwrap(), fs::read(&b).unwrap(), fs::read(&c).unwrap());
    assert_eq!(ba, bb, "same seed must give byte-identical bundles");
    assert_ne!(ba, bc, "seed override must change the bundle");
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, MICRO_CFG).unwrap();
    let cfg_s = path_str(&cfg);

    let bundle = path_str(&dir.path().join("bundle.cfb1"));
    assert_eq!(cli(&["gen-ks", "--config", &cfg_s, "--out", &bundle]), 0);
    assert!(Path::new(&bundle).is_file());
    assert_eq!(cli(&["inspect", &bundle]), 0);

    let msr_dir = dir.path().join("msr");
    let ar_dir = dir.path().join("ar");
    assert_eq!(
        cli(&["train", "--config", &cfg_s, "--data", &bundle, "--model", "msr-hine",
              "--out", msr_dir.to_str().unwrap()]),
        0
    );
    assert_eq!(
        cli(&["train", "--config", &cfg_s, "--data", &bundle, "--model", "unet-ar",
              "--out", ar_dir.to_str().unwrap()]),
        0
    );
    let msr_ck = msr_dir.join("checkpoint.cfb1");
    let ar_ck = ar_dir.join("checkpoint.cfb1");
    assert!(msr_ck.is_file());
    assert!(msr_dir.join("train_log.jsonl").is_file());
    assert!(ar_ck.is_file());
    assert_eq!(cli(&["inspect", msr_ck.to_str().unwrap()]), 0);

    let eval_dir = dir.path().join("eval");
    assert_eq!(
        cli(&["evaluate", "--config", &cfg_s, "--data", &bundle,
              "--checkpoint", msr_ck.to_str().unwrap(),
              "--out", eval_dir.to_str().unwrap()]),
        0
    );
    assert!(eval_dir.join("results.json").is_file());
    assert!(eval_dir.join("metrics.csv").is_file());
    assert!(eval_dir.join("msr-hine_curves.csv").is_file());
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("results.json")).unwrap()).unwrap();
    assert_eq!(doc["models"].as_array().unwrap().len(), 1);
    assert_eq!(doc["models"][0]["name"], "msr-hine");
    assert!(doc["models"][0]["frmse_mean"].as_f64().unwrap().is_finite());

    let cmp_dir = dir.path().join("cmp");
    assert_eq!(
        cli(&["compare", "--config", &cfg_s, "--data", &bundle,
              "--checkpoint", msr_ck.to_str().unwrap(),
              "--checkpoint", ar_ck.to_str().unwrap(),
              "--baseline", "unet-ar", "--paper-ref",
              "--out", cmp_dir.to_str().unwrap()]),
        0
    );
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cmp_dir.join("results.json")).unwrap()).unwrap();
    let models = doc["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    let msr = models.iter().find(|m| m["name"] == "msr-hine").unwrap();
    assert!(msr["vs_baseline"]["rmse_pct"].as_f64().unwrap().is_finite());
    assert!(doc["reference"].is_object(), "--paper-ref embeds reference numbers");

    // A checkpoint trained on one bundle must be rejected against data
    // with different normalization statistics.
    let other = path_str(&dir.path().join("other.cfb1"));
    assert_eq!(cli(&["gen-ks", "--config", &cfg_s, "--seed", "99", "--out", &other]), 0);
    assert_eq!(
        cli(&["evaluate", "--config", &cfg_s, "--data", &other,
              "--checkpoint", msr_ck.to_str().unwrap(),
              "--out", dir.path().join("e2").to_str().unwrap()]),
        1
    );
}

#[test]
fn evaluation_is_seed_invariant_given_a_checkpoint() {
    // Rollout evaluation is deterministic given checkpoint and data:
    // re-running produces byte-identical results files.
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, MICRO_CFG).unwrap();
    let cfg_s = path_str(&cfg);
    let bundle = path_str(&dir.path().join("bundle.cfb1"));
    assert_eq!(cli(&["gen-ks", "--config", &cfg_s, "--out", &bundle]), 0);
    let ck_dir = dir.path().join("ck");
    assert_eq!(
        cli(&["train", "--config", &cfg_s, "--data", &bundle, "--model", "unet-ar",
              "--out", ck_dir.to_str().unwrap()]),
        0
    );
    let ck = ck_dir.join("checkpoint.cfb1");
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    for e in [&e1, &e2] {
        assert_eq!(
            cli(&["evaluate", "--config", &cfg_s, "--data", &bundle,
                  "--checkpoint", ck.to_str().unwrap(), "--out", e.to_str().unwrap()]),
            0
        );
    }
    let r1 = fs::read(e1.join("results.json")).unwrap();
    let r2 = fs::read(e2.join("results.json")).unwrap();
    assert_eq!(r1, r2);
}
