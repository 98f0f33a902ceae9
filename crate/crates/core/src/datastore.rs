//! Trajectory ensembles on disk and the bookkeeping around them:
//! train/val/test splits, normalization, and TBPTT window enumeration.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::container;
use crate::error::{CoreError, Result};

/// Describes where a bundle came from. `created_unix` is the only field
/// that may carry wall-clock time; it defaults to absent so that rerun
/// outputs stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub system: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

impl BundleMeta {
    pub fn new(system: &str, seed: u64, config: serde_json::Value) -> Self {
        BundleMeta {
            system: system.to_string(),
            seed,
            config,
            version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: None,
        }
    }
}

/// An ensemble of `s` trajectories, each `t` saved states of `n`
/// variables, stored row-major as `data[(traj * t + step) * n + var]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    data: Vec<f64>,
    s: usize,
    t: usize,
    n: usize,
    times: Vec<f64>,
    start_states: Option<Vec<f64>>,
    pub meta: BundleMeta,
}

impl TrajectoryBundle {
    pub fn new(
        data: Vec<f64>,
        (s, t, n): (usize, usize, usize),
        times: Vec<f64>,
        start_states: Option<Vec<f64>>,
        meta: BundleMeta,
    ) -> Result<Self> {
        if s == 0 || t == 0 || n == 0 {
            return Err(CoreError::invalid_input("bundle dimensions must be positive"));
        }
        if data.len() != s * t * n {
            return Err(CoreError::invalid_input(format!(
                "data length {} does not match shape {s}x{t}x{n}",
                data.len()
            )));
        }
        if times.len() != t {
            return Err(CoreError::invalid_input(format!(
                "times length {} does not match t={t}",
                times.len()
            )));
        }
        if let Some(ss) = &start_states {
            if ss.len() != s * n {
                return Err(CoreError::invalid_input(format!(
                    "start_states length {} does not match {s}x{n}",
                    ss.len()
                )));
            }
        }
        Ok(TrajectoryBundle { data, s, t, n, times, start_states, meta })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.s, self.t, self.n)
    }

    pub fn n_traj(&self) -> usize {
        self.s
    }

    pub fn n_steps(&self) -> usize {
        self.t
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn start_states(&self) -> Option<&[f64]> {
        self.start_states.as_deref()
    }

    /// One saved state as a slice of `n` variables.
    pub fn state(&self, traj: usize, step: usize) -> &[f64] {
        let base = (traj * self.t + step) * self.n;
        &self.data[base..base + self.n]
    }

    /// All states of one trajectory, `t * n` values.
    pub fn trajectory(&self, traj: usize) -> &[f64] {
        let base = traj * self.t * self.n;
        &self.data[base..base + self.t * self.n]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(&self.meta)?;
        let data_shape = [self.s, self.t, self.n];
        let times_shape = [self.t];
        let mut arrays: Vec<(&str, &[usize], &[f64])> = vec![
            ("data", &data_shape, &self.data),
            ("times", &times_shape, &self.times),
        ];
        let ss_shape = [self.s, self.n];
        if let Some(ss) = &self.start_states {
            arrays.push(("start_state", &ss_shape, ss));
        }
        container::write_file(path, &meta, &arrays)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (meta_json, arrays) = container::read_file(path)?;
        let meta: BundleMeta = serde_json::from_value(meta_json)?;
        let mut data = None;
        let mut times = None;
        let mut start_states = None;
        let mut shape = (0, 0, 0);
        for arr in arrays {
            match arr.name.as_str() {
                "data" => {
                    if arr.shape.len() != 3 {
                        return Err(CoreError::format("'data' must be rank 3"));
                    }
                    shape = (arr.shape[0], arr.shape[1], arr.shape[2]);
                    data = Some(arr.data);
                }
                "times" => times = Some(arr.data),
                "start_state" => start_states = Some(arr.data),
                other => {
                    return Err(CoreError::format(format!(
                        "unexpected array '{other}' in trajectory bundle"
                    )))
                }
            }
        }
        let data = data.ok_or_else(|| CoreError::format("missing 'data' array"))?;
        let times = times.ok_or_else(|| CoreError::format("missing 'times' array"))?;
        TrajectoryBundle::new(data, shape, times, start_states, meta)
    }
}

/// Fractions of an ensemble that go to validation and test; the
/// remainder (including rounding leftovers) goes to training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub f_train: f64,
    pub f_val: f64,
    pub f_test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(f_train: f64, f_val: f64, f_test: f64, seed: u64) -> Self {
        SplitSpec { f_train, f_val, f_test, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministically shuffles trajectory indices and cuts them into
/// train/val/test. Validation and test sizes are `floor(f * s)`; the
/// remainder is training data. Any requested-but-empty part is an error,
/// as is an empty training set.
pub fn split_by_trajectory(s: usize, spec: &SplitSpec) -> Result<Split> {
    for f in [spec.f_train, spec.f_val, spec.f_test] {
        if !(0.0..=1.0).contains(&f) {
            return Err(CoreError::invalid_config(format!("split fraction {f} out of [0,1]")));
        }
    }
    if spec.f_train + spec.f_val + spec.f_test > 1.0 + 1e-9 {
        return Err(CoreError::invalid_config("split fractions sum to more than 1"));
    }
    let n_val = (spec.f_val * s as f64).floor() as usize;
    let n_test = (spec.f_test * s as f64).floor() as usize;
    if n_val + n_test > s {
        return Err(CoreError::invalid_config("split sizes exceed ensemble"));
    }
    let n_train = s - n_val - n_test;
    if spec.f_val > 0.0 && n_val == 0 {
        return Err(CoreError::invalid_config(format!(
            "validation split is empty: floor({} * {s}) = 0",
            spec.f_val
        )));
    }
    if spec.f_test > 0.0 && n_test == 0 {
        return Err(CoreError::invalid_config(format!(
            "test split is empty: floor({} * {s}) = 0",
            spec.f_test
        )));
    }
    if n_train == 0 {
        return Err(CoreError::invalid_config("training split is empty"));
    }

    let mut order: Vec<usize> = (0..s).collect();
    let mut rng = crate::seeding::stream_rng(spec.seed, 0);
    // Fisher-Yates with a fixed draw order keeps the shuffle stable.
    use rand::Rng as _;
    for i in (1..s).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok(Split { train, val, test })
}

/// How state vectors are standardized before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One scalar mean/std over every entry of the fitted data.
    Global,
    /// A mean/std per variable index, pooled over trajectories and time.
    PerVariable,
    /// Each state normalized by its own mean/std at application time;
    /// nothing is fitted and the transform is not invertible.
    PerSample,
}

/// Standardizing transform with stats fitted on training trajectories
/// only. Standard deviations are floored at 1e-8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mode: NormMode,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    /// Fits statistics over the listed trajectories of a bundle.
    pub fn fit(mode: NormMode, bundle: &TrajectoryBundle, trajs: &[usize]) -> Result<Self> {
        let (s, t, n) = bundle.shape();
        if trajs.is_empty() && mode != NormMode::PerSample {
            return Err(CoreError::invalid_input("cannot fit normalizer on zero trajectories"));
        }
        for &idx in trajs {
            if idx >= s {
                return Err(CoreError::invalid_input(format!("trajectory index {idx} out of range")));
            }
        }
        match mode {
            NormMode::PerSample => Ok(Normalizer { mode, mean: vec![], std: vec![] }),
            NormMode::Global => {
                let count = (trajs.len() * t * n) as f64;
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                for &traj in trajs {
                    for &x in bundle.trajectory(traj) {
                        sum += x;
                        sumsq += x * x;
                    }
                }
                let mean = sum / count;
                let var = (sumsq / count - mean * mean).max(0.0);
                Ok(Normalizer {
                    mode,
                    mean: vec![mean],
                    std: vec![var.sqrt().max(STD_FLOOR)],
                })
            }
            NormMode::PerVariable => {
                let count = (trajs.len() * t) as f64;
                let mut sum = vec![0.0; n];
                let mut sumsq = vec![0.0; n];
                for &traj in trajs {
                    for step in 0..t {
                        for (v, &x) in bundle.state(traj, step).iter().enumerate() {
                            sum[v] += x;
                            sumsq[v] += x * x;
                        }
                    }
                }
                let mean: Vec<f64> = sum.iter().map(|&x| x / count).collect();
                let std: Vec<f64> = sumsq
                    .iter()
                    .zip(&mean)
                    .map(|(&sq, &m)| ((sq / count - m * m).max(0.0)).sqrt().max(STD_FLOOR))
                    .collect();
                Ok(Normalizer { mode, mean, std })
            }
        }
    }

    /// Forward transform `(x - mean) / std` in place.
    pub fn normalize_state(&self, x: &mut [f64]) -> Result<()> {
        match self.mode {
            NormMode::Global => {
                let (m, s) = (self.mean[0], self.std[0]);
                for v in x.iter_mut() {
                    *v = (*v - m) / s;
                }
            }
            NormMode::PerVariable => {
                if x.len() != self.mean.len() {
                    return Err(CoreError::invalid_input(format!(
                        "state length {} does not match fitted {}",
                        x.len(),
                        self.mean.len()
                    )));
                }
                for (v, (m, s)) in x.iter_mut().zip(self.mean.iter().zip(&self.std)) {
                    *v = (*v - m) / s;
                }
            }
            NormMode::PerSample => {
                let n = x.len() as f64;
                let mean = x.iter().sum::<f64>() / n;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let std = var.sqrt().max(STD_FLOOR);
                for v in x.iter_mut() {
                    *v = (*v - mean) / std;
                }
            }
        }
        Ok(())
    }

    /// Inverse transform; exact up to rounding for the fitted modes,
    /// rejected for `PerSample` (its stats are not retained).
    pub fn denormalize_state(&self, x: &mut [f64]) -> Result<()> {
        match self.mode {
            NormMode::Global => {
                let (m, s) = (self.mean[0], self.std[0]);
                for v in x.iter_mut() {
                    *v = *v * s + m;
                }
                Ok(())
            }
            NormMode::PerVariable => {
                if x.len() != self.mean.len() {
                    return Err(CoreError::invalid_input("state length mismatch"));
                }
                for (v, (m, s)) in x.iter_mut().zip(self.mean.iter().zip(&self.std)) {
                    *v = *v * s + m;
                }
                Ok(())
            }
            NormMode::PerSample => Err(CoreError::invalid_config(
                "per-sample normalization is not invertible",
            )),
        }
    }

    /// Normalized copy of a full trajectory (length `t * n`).
    pub fn normalize_trajectory(&self, traj: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut out = traj.to_vec();
        for state in out.chunks_exact_mut(n) {
            self.normalize_state(state)?;
        }
        Ok(out)
    }
}

/// Start indices of training windows of `l` transitions: a window
/// starting at `t0` uses states `t0 ..= t0 + l`, so starts run
/// `0, stride, 2*stride, ...` while `t0 + l < t_len`.
pub fn window_starts(t_len: usize, l: usize, stride: usize) -> Result<Vec<usize>> {
    if l == 0 || stride == 0 {
        return Err(CoreError::invalid_config("window length and stride must be positive"));
    }
    if t_len <= l {
        return Ok(vec![]);
    }
    Ok((0..t_len - l).step_by(stride).collect())
}
