//! Rollout evaluation: warm teacher-forced spin-in, free closed-loop
//! forecasting, per-step error curves, and cross-model summaries.
//!
//! All metrics are computed in normalized coordinates. Each rollout
//! produces curves of length `horizon + 1` whose index-0 entries are
//! the trivial values (zero error, unit correlation). Summaries report
//! free-rollout RMSE, end-of-horizon anomaly correlation, spectral
//! band error, a predictability horizon, and percentage gaps versus a
//! designated baseline model.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::autodiff::Tape;
use crate::container;
use crate::error::{CoreError, Result};
use crate::latents::System;
use crate::predictor::{PosteriorSource, StateOps, StepModel};
use crate::spectral::{self, BandSpec};

/// Root-mean-square difference over the grid.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

/// Cosine similarity of the two fields after removing each one's own
/// spatial mean; guarded against zero anomalies and clipped to [-1, 1].
pub fn anomaly_correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let xa = x - ma;
        let yb = y - mb;
        dot += xa * yb;
        na += xa * xa;
        nb += yb * yb;
    }
    (dot / (na.sqrt() * nb.sqrt() + 1e-12)).clamp(-1.0, 1.0)
}

/// Mean absolute log band-energy ratio between prediction and truth.
pub fn band_log_error(pred: &[f64], truth: &[f64], bands: &BandSpec) -> f64 {
    let sp = spectral::rfft(pred, 1.0).expect("non-empty prediction");
    let st = spectral::rfft(truth, 1.0).expect("non-empty truth");
    let ep = spectral::band_energies(&sp, bands).expect("bands fit the grid");
    let et = spectral::band_energies(&st, bands).expect("bands fit the grid");
    let eps = 1e-12;
    let s: f64 = ep
        .iter()
        .zip(&et)
        .map(|(p, t)| ((p + eps) / (t + eps)).ln().abs())
        .sum();
    s / ep.len() as f64
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RolloutSpec {
    /// Teacher-forced steps before forecasting starts.
    pub warm: usize,
    /// Free closed-loop steps.
    pub horizon: usize,
}

/// One evaluated rollout. Curves have `horizon + 1` entries including
/// the trivial index 0; `band_err` covers the free steps only.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub traj: usize,
    pub start: usize,
    pub rmse: Vec<f64>,
    pub acc: Vec<f64>,
    pub band_err: Vec<f64>,
    pub pred: Vec<Vec<f64>>,
    pub truth_free: Vec<Vec<f64>>,
}

impl RolloutRecord {
    /// Mean RMSE over the free steps.
    pub fn frmse(&self) -> f64 {
        self.rmse[1..].iter().sum::<f64>() / (self.rmse.len() - 1) as f64
    }

    /// Time-mean spectral band error over the free steps.
    pub fn spec_err(&self) -> f64 {
        self.band_err.iter().sum::<f64>() / self.band_err.len() as f64
    }

    pub fn end_acc(&self) -> f64 {
        *self.acc.last().expect("non-empty curve")
    }
}

/// Runs one rollout starting at `start`: `warm` steps conditioned on
/// truth, then `horizon` steps on the model's own outputs. The tape is
/// rebuilt every step, so memory stays flat across long horizons.
pub fn rollout<M: StepModel>(
    model: &M,
    traj_index: usize,
    traj: &[Vec<f64>],
    start: usize,
    spec: &RolloutSpec,
    bands: &BandSpec,
) -> Result<RolloutRecord> {
    let w = spec.warm;
    let h = spec.horizon;
    if h == 0 {
        return Err(CoreError::invalid_config("rollout horizon must be positive"));
    }
    if start + w + h >= traj.len() {
        return Err(CoreError::invalid_input(format!(
            "rollout needs states {}..={} but trajectory has {}",
            start,
            start + w + h,
            traj.len()
        )));
    }

    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let mut u = tape.leaf(traj[start].clone());
    let mut st = model.init_state(&mut tape, &bound, u);
    let base = tape.mark();

    let recycle = |tape: &mut Tape, st: &M::State, next_u: Vec<f64>| {
        let det = st.detach(tape);
        tape.truncate(base);
        let st = M::State::attach(&det, tape);
        let u = tape.leaf(next_u);
        (st, u)
    };

    for t in 0..w {
        let truth_next = &traj[start + t + 1];
        let (_, next, _) =
            model.step(&mut tape, &bound, u, &st, Some(truth_next), PosteriorSource::Truth);
        let (s2, u2) = recycle(&mut tape, &next, truth_next.clone());
        st = s2;
        u = u2;
    }

    let mut record = RolloutRecord {
        traj: traj_index,
        start,
        rmse: vec![0.0],
        acc: vec![1.0],
        band_err: Vec::with_capacity(h),
        pred: Vec::with_capacity(h),
        truth_free: Vec::with_capacity(h),
    };
    for step in 1..=h {
        let (pred, next, _) =
            model.step(&mut tape, &bound, u, &st, None, PosteriorSource::Prediction);
        let pv = tape.value(pred).to_vec();
        let truth = &traj[start + w + step];
        record.rmse.push(rmse(&pv, truth));
        record.acc.push(anomaly_correlation(&pv, truth));
        record.band_err.push(band_log_error(&pv, truth, bands));
        record.truth_free.push(truth.clone());
        let (s2, u2) = recycle(&mut tape, &next, pv.clone());
        st = s2;
        u = u2;
        record.pred.push(pv);
    }
    Ok(record)
}

/// Evenly spaced rollout start indices that keep `warm + horizon`
/// future states available.
pub fn rollout_starts(t_len: usize, warm: usize, horizon: usize, per_traj: usize) -> Vec<usize> {
    if t_len <= warm + horizon || per_traj == 0 {
        return vec![];
    }
    let max_start = t_len - 1 - warm - horizon;
    let count = per_traj.min(max_start + 1);
    if count == 1 {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..count)
        .map(|i| i * max_start / (count - 1))
        .collect();
    out.dedup();
    out
}

/// Evaluates one model over every trajectory in a split.
pub fn evaluate_model<M: StepModel + Sync>(
    model: &M,
    trajs: &[Vec<Vec<f64>>],
    spec: &RolloutSpec,
    per_traj: usize,
    bands: &BandSpec,
) -> Result<Vec<RolloutRecord>> {
    let mut jobs = Vec::new();
    for (ti, traj) in trajs.iter().enumerate() {
        for start in rollout_starts(traj.len(), spec.warm, spec.horizon, per_traj) {
            jobs.push((ti, start));
        }
    }
    if jobs.is_empty() {
        return Err(CoreError::invalid_input(
            "no rollout fits: trajectories shorter than warm + horizon",
        ));
    }
    jobs.par_iter()
        .map(|&(ti, start)| rollout(model, ti, &trajs[ti], start, spec, bands))
        .collect()
}

/// Mean and sample standard deviation per curve index.
pub fn curve_stats<'a>(
    records: &'a [RolloutRecord],
    field: impl Fn(&'a RolloutRecord) -> &'a [f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = records.len();
    assert!(n > 0);
    let len = field(&records[0]).len();
    let mut mean = vec![0.0; len];
    for r in records {
        for (m, v) in mean.iter_mut().zip(field(r)) {
            *m += v / n as f64;
        }
    }
    let mut std = vec![0.0; len];
    if n > 1 {
        for r in records {
            for i in 0..len {
                let d = field(r)[i] - mean[i];
                std[i] += d * d / (n - 1) as f64;
            }
        }
        for s in std.iter_mut() {
            *s = s.sqrt();
        }
    }
    (mean, std)
}

fn scalar_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Last index whose mean correlation still meets `threshold`: one
/// before the first sub-threshold index, or the full horizon if the
/// curve never drops below it.
pub fn predictability_horizon(mean_acc: &[f64], threshold: f64) -> usize {
    match mean_acc.iter().position(|a| *a < threshold) {
        Some(i) => i.saturating_sub(1),
        None => mean_acc.len() - 1,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonStat {
    pub h: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DeltaVsBaseline {
    pub rmse_pct: f64,
    pub acc_pct: f64,
    pub spec_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub name: String,
    pub n_rollouts: usize,
    pub frmse_mean: f64,
    pub frmse_std: f64,
    pub end_acc_mean: f64,
    pub end_acc_std: f64,
    pub spec_err_mean: f64,
    pub spec_err_std: f64,
    pub horizon_steps: usize,
    pub rmse_at: Vec<HorizonStat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vs_baseline: Option<DeltaVsBaseline>,
}

/// Percentage gaps of `model` against `base`: positive means better.
/// RMSE and spectral error compare relative reductions; correlation
/// compares the closed fraction of the gap to perfect correlation.
pub fn deltas(model: &ModelSummary, base: &ModelSummary) -> DeltaVsBaseline {
    DeltaVsBaseline {
        rmse_pct: 100.0 * (base.frmse_mean - model.frmse_mean) / base.frmse_mean,
        acc_pct: 100.0 * (model.end_acc_mean - base.end_acc_mean) / (1.0 - base.end_acc_mean),
        spec_pct: 100.0 * (base.spec_err_mean - model.spec_err_mean) / base.spec_err_mean,
    }
}

pub fn summarize_model(
    name: &str,
    records: &[RolloutRecord],
    horizons: &[usize],
    acc_threshold: f64,
) -> ModelSummary {
    let frmse: Vec<f64> = records.iter().map(|r| r.frmse()).collect();
    let end_acc: Vec<f64> = records.iter().map(|r| r.end_acc()).collect();
    let spec: Vec<f64> = records.iter().map(|r| r.spec_err()).collect();
    let (fm, fs) = scalar_stats(&frmse);
    let (am, as_) = scalar_stats(&end_acc);
    let (sm, ss) = scalar_stats(&spec);
    let (acc_mean, _) = curve_stats(records, |r| &r.acc);
    let horizon_steps = predictability_horizon(&acc_mean, acc_threshold);
    let mut rmse_at = Vec::new();
    for &h in horizons {
        if h >= records[0].rmse.len() {
            continue;
        }
        let vals: Vec<f64> = records.iter().map(|r| r.rmse[h]).collect();
        let (m, s) = scalar_stats(&vals);
        rmse_at.push(HorizonStat { h, mean: m, std: s });
    }
    ModelSummary {
        name: name.to_string(),
        n_rollouts: records.len(),
        frmse_mean: fm,
        frmse_std: fs,
        end_acc_mean: am,
        end_acc_std: as_,
        spec_err_mean: sm,
        spec_err_std: ss,
        horizon_steps,
        rmse_at,
        vs_baseline: None,
    }
}

#[derive(Debug, Serialize)]
pub struct ResultsDoc {
    pub schema: u32,
    pub version: String,
    pub system: String,
    pub warm: usize,
    pub horizon: usize,
    pub acc_threshold: f64,
    pub models: Vec<ModelSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<serde_json::Value>,
    /// Resolved run configuration, echoed for provenance.
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

/// Builds the cross-model document; the model named `baseline` anchors
/// the percentage gaps.
#[allow(clippy::too_many_arguments)]
pub fn summarize(
    system: System,
    spec: &RolloutSpec,
    acc_threshold: f64,
    horizons: &[usize],
    runs: &[(String, Vec<RolloutRecord>)],
    baseline: &str,
    include_reference: bool,
) -> Result<ResultsDoc> {
    let mut models: Vec<ModelSummary> = runs
        .iter()
        .map(|(name, recs)| summarize_model(name, recs, horizons, acc_threshold))
        .collect();
    let base = models
        .iter()
        .find(|m| m.name == baseline)
        .cloned()
        .ok_or_else(|| CoreError::invalid_input(format!("baseline '{baseline}' not evaluated")))?;
    for m in models.iter_mut() {
        if m.name != baseline {
            m.vs_baseline = Some(deltas(m, &base));
        }
    }
    Ok(ResultsDoc {
        schema: 1,
        version: env!("CARGO_PKG_VERSION").to_string(),
        system: system.tag().to_string(),
        warm: spec.warm,
        horizon: spec.horizon,
        acc_threshold,
        models,
        reference: if include_reference { Some(reference_block(system)) } else { None },
        config: serde_json::Value::Null,
    })
}

/// External reference results for side-by-side comparison under the
/// same horizons; means with sample standard deviations.
pub fn reference_block(system: System) -> serde_json::Value {
    let row = |name: &str,
               rmse: &[(f64, f64)],
               end_acc: (f64, f64),
               spec: (f64, f64),
               delta: Option<(f64, f64, f64)>| {
        let mut v = json!({
            "name": name,
            "rmse": rmse.iter().map(|(m, s)| json!({"mean": m, "std": s})).collect::<Vec<_>>(),
            "end_acc": {"mean": end_acc.0, "std": end_acc.1},
            "spec_err": {"mean": spec.0, "std": spec.1},
        });
        if let Some((r, a, s)) = delta {
            v["vs_baseline"] = json!({"rmse_pct": r, "acc_pct": a, "spec_pct": s});
        }
        v
    };
    match system {
        System::Ks => json!({
            "horizons": [10, 25, 50, 100, 200, 400],
            "models": [
                row("msr-hine",
                    &[(3.71e-3, 2.95e-4), (8.40e-3, 1.32e-3), (2.14e-2, 4.55e-3),
                      (6.35e-2, 1.41e-2), (2.29e-1, 7.58e-2), (1.094, 3.525e-1)],
                    (0.828, 0.109), (5.384e-2, 2.889e-2), Some((62.8, 85.1, 67.6))),
                row("hine-l2",
                    &[(1.21e-2, 1.62e-3), (3.10e-2, 5.00e-3), (7.71e-2, 1.78e-2),
                      (2.05e-1, 4.96e-2), (7.14e-1, 3.44e-1), (1.920, 4.109e-1)],
                    (0.500, 0.209), (1.435e-1, 3.469e-2), Some((34.7, 56.7, 13.8))),
                row("unet-ar",
                    &[(2.16e-2, 3.35e-3), (5.88e-2, 6.47e-3), (1.57e-1, 1.52e-2),
                      (4.62e-1, 4.98e-2), (1.48, 1.08e-1), (2.941, 1.770e-1)],
                    (-0.155, 0.124), (1.663e-1, 6.031e-2), None),
            ],
        }),
        System::L96 => json!({
            "horizons": [10, 25, 50, 75, 100],
            "models": [
                row("msr-hine",
                    &[(3.71e-3, 2.95e-4), (8.40e-3, 1.32e-3), (2.62e-1, 2.22e-1),
                      (1.62, 9.15e-1), (3.445, 7.997e-1)],
                    (0.545, 0.193), (1.065e-1, 3.685e-2), Some((27.0, 46.8, 65.1))),
                row("hine-l2",
                    &[(7.12e-2, 1.65e-2), (4.29e-1, 2.38e-1), (2.94, 1.14),
                      (4.49, 7.58e-1), (4.982, 5.849e-1)],
                    (0.091, 0.172), (3.379e-1, 7.517e-2), Some((-5.6, -6.2, -10.7))),
                row("unet-ar",
                    &[(8.78e-2, 2.98e-2), (6.07e-1, 4.01e-1), (2.86, 1.26),
                      (4.40, 7.54e-1), (4.718, 4.632e-1)],
                    (0.144, 0.161), (3.051e-1, 6.480e-2), None),
            ],
        }),
    }
}

pub fn write_results_json(dir: &Path, doc: &ResultsDoc) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join("results.json");
    let mut f = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, doc)?;
    f.flush()?;
    Ok(())
}

/// One-row-per-model metric table.
pub fn write_metrics_csv(dir: &Path, doc: &ResultsDoc) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
    writeln!(
        f,
        "model,n_rollouts,frmse_mean,frmse_std,end_acc_mean,end_acc_std,\
         spec_err_mean,spec_err_std,horizon_steps,d_rmse_pct,d_acc_pct,d_spec_pct"
    )?;
    for m in &doc.models {
        let (dr, da, ds) = m
            .vs_baseline
            .map(|d| {
                (format!("{:.3}", d.rmse_pct), format!("{:.3}", d.acc_pct), format!("{:.3}", d.spec_pct))
            })
            .unwrap_or_default();
        writeln!(
            f,
            "{},{},{:.6e},{:.6e},{:.6},{:.6},{:.6e},{:.6e},{},{},{},{}",
            m.name,
            m.n_rollouts,
            m.frmse_mean,
            m.frmse_std,
            m.end_acc_mean,
            m.end_acc_std,
            m.spec_err_mean,
            m.spec_err_std,
            m.horizon_steps,
            dr,
            da,
            ds
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Per-step mean/std curves of one model, ready for plotting.
pub fn write_curves_csv(dir: &Path, name: &str, records: &[RolloutRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (rm, rs) = curve_stats(records, |r| &r.rmse);
    let (am, asd) = curve_stats(records, |r| &r.acc);
    let (bm, bs) = curve_stats(records, |r| &r.band_err);
    let mut f = BufWriter::new(fs::File::create(dir.join(format!("{name}_curves.csv")))?);
    writeln!(f, "h,rmse_mean,rmse_std,acc_mean,acc_std,band_err_mean,band_err_std")?;
    for h in 0..rm.len() {
        let (b_mean, b_std) = if h == 0 {
            (String::new(), String::new())
        } else {
            (format!("{:.6e}", bm[h - 1]), format!("{:.6e}", bs[h - 1]))
        };
        writeln!(
            f,
            "{h},{:.6e},{:.6e},{:.6},{:.6},{b_mean},{b_std}",
            rm[h], rs[h], am[h], asd[h]
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Stores the best and worst rollouts (by free-segment mean RMSE) as
/// binary containers holding the normalized truth and prediction.
pub fn write_extreme_rollouts(dir: &Path, name: &str, records: &[RolloutRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let best = records
        .iter()
        .min_by(|a, b| a.frmse().total_cmp(&b.frmse()))
        .expect("non-empty records");
    let worst = records
        .iter()
        .max_by(|a, b| a.frmse().total_cmp(&b.frmse()))
        .expect("non-empty records");
    for (tag, rec) in [("best", best), ("worst", worst)] {
        let h = rec.pred.len();
        let n = rec.pred[0].len();
        let flat_pred: Vec<f64> = rec.pred.iter().flatten().copied().collect();
        let flat_truth: Vec<f64> = rec.truth_free.iter().flatten().copied().collect();
        let meta = json!({
            "kind": "rollout",
            "model": name,
            "which": tag,
            "traj": rec.traj,
            "start": rec.start,
            "frmse": rec.frmse(),
            "normalized": true,
        });
        let shape = [h, n];
        container::write_file(
            &dir.join(format!("{name}_{tag}_rollout.cfb1")),
            &meta,
            &[("pred", &shape, &flat_pred), ("truth", &shape, &flat_truth)],
        )?;
    }
    Ok(())
}
