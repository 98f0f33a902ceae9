//! Lorenz-96 ring ODE
//!
//! ```text
//! dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F,  indices mod N
//! ```
//!
//! integrated with classical RK4 from slightly-perturbed equilibrium
//! initial conditions. Each run starts a short spin-up before the
//! visible window, saves every integration step, then resamples the
//! visible segment onto a uniform output grid with componentwise linear
//! interpolation.

use rand::Rng as _;

use crate::datastore::{BundleMeta, TrajectoryBundle};
use crate::error::{CoreError, Result};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L96Config {
    pub n_vars: usize,
    pub forcing: f64,
    pub n_traj: usize,
    /// Number of output states per trajectory after resampling.
    pub n_saved: usize,
    pub t_vis_start: f64,
    pub t_vis_end: f64,
    pub dt_int: f64,
    /// Spin-up length before the visible window, as a fraction of the
    /// visible span.
    pub spinup_frac: f64,
    /// Scale of the Gaussian perturbation around the equilibrium `x = F`.
    pub ic_sigma: f64,
}

impl Default for L96Config {
    fn default() -> Self {
        L96Config {
            n_vars: 40,
            forcing: 8.0,
            n_traj: 100,
            n_saved: 1000,
            t_vis_start: 0.0,
            t_vis_end: 50.0,
            dt_int: 0.01,
            spinup_frac: 0.05,
            ic_sigma: 0.01,
        }
    }
}

impl L96Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_vars < 4 {
            return Err(CoreError::invalid_config("n_vars must be at least 4"));
        }
        if !self.forcing.is_finite() {
            return Err(CoreError::invalid_config("forcing must be finite"));
        }
        if self.n_traj == 0 {
            return Err(CoreError::invalid_config("n_traj must be positive"));
        }
        if self.n_saved < 2 {
            return Err(CoreError::invalid_config("n_saved must be at least 2"));
        }
        if !(self.t_vis_end > self.t_vis_start) {
            return Err(CoreError::invalid_config("visible window must be non-empty"));
        }
        if !(self.dt_int.is_finite() && self.dt_int > 0.0) {
            return Err(CoreError::invalid_config("dt_int must be positive"));
        }
        if self.spinup_frac < 0.0 || self.ic_sigma < 0.0 {
            return Err(CoreError::invalid_config("spinup_frac and ic_sigma must be >= 0"));
        }
        Ok(())
    }

    pub fn integration_start(&self) -> f64 {
        self.t_vis_start - self.spinup_frac * (self.t_vis_end - self.t_vis_start)
    }

    /// Number of RK4 steps from the spin-up start to `t_vis_end`; the
    /// last step is shortened when the span is not an exact multiple of
    /// `dt_int`.
    pub fn integration_steps(&self) -> usize {
        let span = self.t_vis_end - self.integration_start();
        let r = span / self.dt_int;
        if (r - r.round()).abs() < 1e-9 {
            r.round() as usize
        } else {
            r.ceil() as usize
        }
    }
}

/// Ring right-hand side `(x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`.
pub fn l96_rhs(x: &[f64], forcing: f64) -> Result<Vec<f64>> {
    let n = x.len();
    if n < 4 {
        return Err(CoreError::invalid_input(format!(
            "ring coupling needs at least 4 variables, got {n}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let xp1 = x[(i + 1) % n];
            let xm1 = x[(i + n - 1) % n];
            let xm2 = x[(i + n - 2) % n];
            (xp1 - xm2) * xm1 - x[i] + forcing
        })
        .collect())
}

/// One classical RK4 step.
pub fn l96_rk4_step(x: &[f64], dt: f64, forcing: f64) -> Result<Vec<f64>> {
    let mix = |x: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(a, b)| a + b * s).collect()
    };
    let k1 = l96_rhs(x, forcing)?;
    let k2 = l96_rhs(&mix(x, &k1, dt / 2.0), forcing)?;
    let k3 = l96_rhs(&mix(x, &k2, dt / 2.0), forcing)?;
    let k4 = l96_rhs(&mix(x, &k3, dt), forcing)?;
    Ok(x.iter()
        .enumerate()
        .map(|(i, &xi)| xi + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Componentwise linear resampling of `(times, data)` onto `targets`.
/// `data` is row-major `times.len() x n`. Targets must lie inside the
/// source time range (inclusive, with a small rounding allowance).
pub fn resample_linear(
    times: &[f64],
    data: &[f64],
    n: usize,
    targets: &[f64],
) -> Result<Vec<f64>> {
    if times.len() < 2 {
        return Err(CoreError::invalid_input("resampling needs at least two source times"));
    }
    if data.len() != times.len() * n {
        return Err(CoreError::invalid_input("data length does not match times x n"));
    }
    let t0 = times[0];
    let t1 = *times.last().unwrap();
    let tol = 1e-9 * (t1 - t0).abs().max(1.0);
    let mut out = Vec::with_capacity(targets.len() * n);
    for &target in targets {
        if target < t0 - tol || target > t1 + tol {
            return Err(CoreError::invalid_input(format!(
                "resample target {target} outside [{t0}, {t1}]"
            )));
        }
        let t = target.clamp(t0, t1);
        // Index of the last source time <= t (binary search).
        let mut idx = times.partition_point(|&x| x <= t);
        idx = idx.saturating_sub(1).min(times.len() - 2);
        let (ta, tb) = (times[idx], times[idx + 1]);
        let w = if tb > ta { (t - ta) / (tb - ta) } else { 0.0 };
        let a = &data[idx * n..(idx + 1) * n];
        let b = &data[(idx + 1) * n..(idx + 2) * n];
        for i in 0..n {
            out.push(a[i] + (b[i] - a[i]) * w);
        }
    }
    Ok(out)
}

/// Equilibrium plus Gaussian noise: `x_i = F + ic_sigma * xi_i`.
pub fn l96_initial_condition(rng: &mut seeding::Rng, cfg: &L96Config) -> Vec<f64> {
    (0..cfg.n_vars)
        .map(|_| cfg.forcing + cfg.ic_sigma * standard_normal(rng))
        .collect()
}

/// Box-Muller draw from the standard normal.
fn standard_normal(rng: &mut seeding::Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn integrate_one(cfg: &L96Config, seed: u64, traj: usize, out: &mut [f64]) -> Result<()> {
    let n = cfg.n_vars;
    let mut rng = seeding::stream_rng(seed, traj as u64);
    let mut x = l96_initial_condition(&mut rng, cfg);

    let t_start = cfg.integration_start();
    let steps = cfg.integration_steps();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity((steps + 1) * n);
    times.push(t_start);
    states.extend_from_slice(&x);

    for step in 0..steps {
        let t_next = if step + 1 == steps {
            cfg.t_vis_end
        } else {
            t_start + (step + 1) as f64 * cfg.dt_int
        };
        let dt = t_next - (t_start + step as f64 * cfg.dt_int);
        x = l96_rk4_step(&x, dt, cfg.forcing)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(CoreError::divergence(format!(
                "L96 trajectory {traj} diverged at step {}",
                step + 1
            )));
        }
        times.push(t_next);
        states.extend_from_slice(&x);
    }

    // Keep the visible window, then resample onto the uniform output grid.
    let first_vis = times.partition_point(|&t| t < cfg.t_vis_start - 1e-12);
    let vis_times = &times[first_vis..];
    let vis_states = &states[first_vis * n..];
    let span = cfg.t_vis_end - cfg.t_vis_start;
    let targets: Vec<f64> = (0..cfg.n_saved)
        .map(|i| cfg.t_vis_start + span * i as f64 / (cfg.n_saved - 1) as f64)
        .collect();
    let resampled = resample_linear(vis_times, vis_states, n, &targets)?;
    out.copy_from_slice(&resampled);
    Ok(())
}

/// Generates an ensemble of Lorenz-96 trajectories with per-trajectory
/// RNG streams.
pub fn l96_generate(cfg: &L96Config, seed: u64) -> Result<TrajectoryBundle> {
    cfg.validate()?;
    let n = cfg.n_vars;
    let s = cfg.n_traj;
    let t = cfg.n_saved;

    let mut data = vec![0.0; s * t * n];
    {
        use rayon::prelude::*;
        let results: Vec<Result<()>> = data
            .par_chunks_mut(t * n)
            .enumerate()
            .map(|(traj, chunk)| integrate_one(cfg, seed, traj, chunk))
            .collect();
        for res in results {
            res?;
        }
    }

    let span = cfg.t_vis_end - cfg.t_vis_start;
    let times: Vec<f64> = (0..t)
        .map(|i| cfg.t_vis_start + span * i as f64 / (t - 1) as f64)
        .collect();
    let meta = BundleMeta::new("l96", seed, serde_json::to_value(cfg)?);
    TrajectoryBundle::new(data, (s, t, n), times, None, meta)
}
