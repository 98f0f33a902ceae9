//! Pseudo-spectral integrator for the Kuramoto-Sivashinsky equation
//!
//! ```text
//! u_t = -u u_x - u_xx - u_xxxx,   x in [0, 2*pi*L), periodic
//! ```
//!
//! advanced in spectral space as `du_hat/dt = -Lsym(k) u_hat + Nhat(u)`
//! with `Lsym(k) = -k^2 + k^4` treated implicitly and the quadratic term
//! `Nhat = -(1/2) i k (u^2)^` treated explicitly. Startup uses one
//! implicit-Euler predictor / Crank-Nicolson corrector step; the main
//! loop is the two-step IMEX-BDF2 recurrence. The DC mode is pinned to
//! zero after every update.

use num_complex::Complex64;
use rand::Rng as _;

use crate::datastore::{BundleMeta, TrajectoryBundle};
use crate::error::{CoreError, Result};
use crate::seeding;
use crate::spectral::{dealiased_square, irfft, rfft, DealiasMode, Spectrum};

/// Coefficient magnitude beyond which a trajectory counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KsConfig {
    /// Domain is `[0, 2*pi*domain_scale)`.
    pub domain_scale: f64,
    pub n_grid: usize,
    pub dt: f64,
    pub t_final: f64,
    pub t_burn: f64,
    /// Initial conditions are rescaled to this max-norm.
    pub ic_max_abs: f64,
    pub n_traj: usize,
    pub dealias: DealiasMode,
}

impl Default for KsConfig {
    fn default() -> Self {
        KsConfig {
            domain_scale: 16.0,
            n_grid: 128,
            dt: 0.10,
            t_final: 200.0,
            t_burn: 50.0,
            ic_max_abs: 2.0,
            n_traj: 1,
            dealias: DealiasMode::Pad32,
        }
    }
}

impl KsConfig {
    pub fn domain_len(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.domain_scale
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.domain_scale.is_finite() && self.domain_scale > 0.0) {
            return Err(CoreError::invalid_config("domain_scale must be positive"));
        }
        if self.n_grid < 8 || self.n_grid % 2 != 0 {
            return Err(CoreError::invalid_config("n_grid must be even and at least 8"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(CoreError::invalid_config("dt must be positive"));
        }
        if self.t_burn < 0.0 || self.t_final <= self.t_burn {
            return Err(CoreError::invalid_config("need 0 <= t_burn < t_final"));
        }
        if !(self.ic_max_abs.is_finite() && self.ic_max_abs > 0.0) {
            return Err(CoreError::invalid_config("ic_max_abs must be positive"));
        }
        if self.n_traj == 0 {
            return Err(CoreError::invalid_config("n_traj must be positive"));
        }
        Ok(())
    }

    /// Index of the last integration step: `floor(t_final / dt)`.
    pub fn total_steps(&self) -> usize {
        floor_guarded(self.t_final / self.dt)
    }

    /// Index of the first saved step: `floor(t_burn / dt)`.
    pub fn burn_steps(&self) -> usize {
        floor_guarded(self.t_burn / self.dt)
    }

    /// Number of saved states per trajectory.
    pub fn n_saved(&self) -> usize {
        self.total_steps() + 1 - self.burn_steps()
    }
}

/// Floor that forgives the usual `x/dt` rounding droop (e.g. 200/0.1
/// evaluating to 1999.999...).
fn floor_guarded(x: f64) -> usize {
    (x + 1e-9).floor() as usize
}

/// The implicit symbol `Lsym(k) = -k^2 + k^4` on the rFFT bins of an
/// `n`-point grid with domain `[0, 2*pi*domain_scale)`.
pub fn ks_linear_symbol(n: usize, domain_scale: f64) -> Vec<f64> {
    (0..=n / 2)
        .map(|j| {
            let k = j as f64 / domain_scale;
            let k2 = k * k;
            -k2 + k2 * k2
        })
        .collect()
}

/// Explicit quadratic term `Nhat(u) = -(1/2) i k (u^2)^` with the
/// square dealiased.
pub fn ks_nonlinear(u_hat: &Spectrum, mode: DealiasMode) -> Result<Spectrum> {
    let mut sq = dealiased_square(u_hat, mode)?;
    let ks = sq.wavenumbers();
    for (c, &k) in sq.coeffs_mut().iter_mut().zip(&ks) {
        *c *= Complex64::new(0.0, -0.5 * k);
    }
    Ok(sq)
}

fn zero_dc(spec: &mut Spectrum) {
    spec.coeffs_mut()[0] = Complex64::new(0.0, 0.0);
}

/// One startup step with a caller-supplied quadratic term: implicit-Euler
/// predictor, Crank-Nicolson corrector with the nonlinearity evaluated at
/// the midpoint state. Returns the new spectrum and the nonlinear term of
/// the initial state (needed by the first BDF2 step).
pub fn ks_bootstrap_step_with<F>(
    u_hat0: &Spectrum,
    dt: f64,
    lin: &[f64],
    mut nonlin: F,
) -> Result<(Spectrum, Spectrum)>
where
    F: FnMut(&Spectrum) -> Result<Spectrum>,
{
    let n0 = nonlin(u_hat0)?;
    let mut predictor = u_hat0.clone();
    for ((c, &nl), &l) in predictor
        .coeffs_mut()
        .iter_mut()
        .zip(n0.coeffs())
        .zip(lin)
    {
        *c = (*c + nl * dt) / (1.0 + dt * l);
    }
    let mut mid = u_hat0.clone();
    for (c, &p) in mid.coeffs_mut().iter_mut().zip(predictor.coeffs()) {
        *c = (*c + p) * 0.5;
    }
    let n_half = nonlin(&mid)?;
    let mut u1 = u_hat0.clone();
    for ((c, &nl), &l) in u1.coeffs_mut().iter_mut().zip(n_half.coeffs()).zip(lin) {
        *c = (*c * (1.0 - 0.5 * dt * l) + nl * dt) / (1.0 + 0.5 * dt * l);
    }
    zero_dc(&mut u1);
    Ok((u1, n0))
}

/// Startup step with the KS quadratic term.
pub fn ks_bootstrap_step(
    u_hat0: &Spectrum,
    dt: f64,
    lin: &[f64],
    mode: DealiasMode,
) -> Result<(Spectrum, Spectrum)> {
    ks_bootstrap_step_with(u_hat0, dt, lin, |s| ks_nonlinear(s, mode))
}

/// Rolling history for the two-step recurrence.
#[derive(Debug, Clone)]
pub struct KsStepperState {
    pub u_hat_prev: Spectrum,
    pub u_hat_curr: Spectrum,
    /// Quadratic term evaluated at `u_hat_prev`.
    pub nonlin_prev: Spectrum,
    pub step_index: usize,
}

/// One IMEX-BDF2 step with a caller-supplied quadratic term:
///
/// ```text
/// u^{n+1} = (4 u^n - u^{n-1} + 2 dt (2 N^n - N^{n-1})) / (3 + 2 dt Lsym)
/// ```
pub fn ks_bdf2_step_with<F>(
    state: &mut KsStepperState,
    dt: f64,
    lin: &[f64],
    mut nonlin: F,
) -> Result<()>
where
    F: FnMut(&Spectrum) -> Result<Spectrum>,
{
    let n_curr = nonlin(&state.u_hat_curr)?;
    let mut next = state.u_hat_curr.clone();
    for (j, c) in next.coeffs_mut().iter_mut().enumerate() {
        let un = state.u_hat_curr.coeffs()[j];
        let um = state.u_hat_prev.coeffs()[j];
        let nn = n_curr.coeffs()[j];
        let nm = state.nonlin_prev.coeffs()[j];
        *c = (un * 4.0 - um + (nn * 2.0 - nm) * 2.0 * dt) / (3.0 + 2.0 * dt * lin[j]);
    }
    zero_dc(&mut next);
    state.u_hat_prev = std::mem::replace(&mut state.u_hat_curr, next);
    state.nonlin_prev = n_curr;
    state.step_index += 1;
    Ok(())
}

/// One IMEX-BDF2 step with the KS quadratic term.
pub fn ks_bdf2_step(
    state: &mut KsStepperState,
    dt: f64,
    lin: &[f64],
    mode: DealiasMode,
) -> Result<()> {
    ks_bdf2_step_with(state, dt, lin, |s| ks_nonlinear(s, mode))
}

/// Random smooth initial condition
///
/// ```text
/// u0(x) = sum_{j=1..4} a_j cos(j x / L) (1 + sin(j x / L)),  a_j ~ U(0,1)
/// ```
///
/// rescaled so `max |u0| = ic_max_abs`. Only spatial frequencies up to
/// `8/L` are present.
pub fn ks_initial_condition(rng: &mut seeding::Rng, cfg: &KsConfig) -> Vec<f64> {
    let n = cfg.n_grid;
    loop {
        let amps: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        if amps.iter().all(|&a| a == 0.0) {
            continue;
        }
        let mut u = vec![0.0; n];
        for (m, x) in u.iter_mut().enumerate() {
            let theta = 2.0 * std::f64::consts::PI * m as f64 / n as f64;
            for (j, &a) in amps.iter().enumerate() {
                let phase = (j + 1) as f64 * theta;
                *x += a * phase.cos() * (1.0 + phase.sin());
            }
        }
        let max = u.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        if max == 0.0 {
            continue;
        }
        let scale = cfg.ic_max_abs / max;
        for x in &mut u {
            *x *= scale;
        }
        return u;
    }
}

fn check_bounded(spec: &Spectrum, traj: usize, step: usize) -> Result<()> {
    if !spec.is_finite() || spec.max_abs() > DIVERGENCE_LIMIT {
        return Err(CoreError::divergence(format!(
            "KS trajectory {traj} diverged at step {step} (max coefficient {:.3e})",
            spec.max_abs()
        )));
    }
    Ok(())
}

/// Integrates one trajectory and writes its saved physical states into
/// `out` (`n_saved * n_grid` values, row-major over time).
fn integrate_one(cfg: &KsConfig, seed: u64, traj: usize, out: &mut [f64]) -> Result<Vec<f64>> {
    let mut rng = seeding::stream_rng(seed, traj as u64);
    let u0 = ks_initial_condition(&mut rng, cfg);
    let lin = ks_linear_symbol(cfg.n_grid, cfg.domain_scale);
    let burn = cfg.burn_steps();
    let total = cfg.total_steps();
    let n = cfg.n_grid;

    let mut u_hat0 = rfft(&u0, cfg.domain_len())?;
    zero_dc(&mut u_hat0);

    let save = |step: usize, spec: &Spectrum, out: &mut [f64]| {
        if step >= burn {
            let row = step - burn;
            out[row * n..(row + 1) * n].copy_from_slice(&irfft(spec));
        }
    };

    save(0, &u_hat0, out);
    let (u_hat1, nonlin0) = ks_bootstrap_step(&u_hat0, cfg.dt, &lin, cfg.dealias)?;
    check_bounded(&u_hat1, traj, 1)?;
    save(1, &u_hat1, out);

    let mut state = KsStepperState {
        u_hat_prev: u_hat0,
        u_hat_curr: u_hat1,
        nonlin_prev: nonlin0,
        step_index: 1,
    };
    while state.step_index < total {
        ks_bdf2_step(&mut state, cfg.dt, &lin, cfg.dealias)?;
        check_bounded(&state.u_hat_curr, traj, state.step_index)?;
        save(state.step_index, &state.u_hat_curr, out);
    }
    // Canonical start state: the state at the burn-in time.
    Ok(out[..n].to_vec())
}

/// Generates an ensemble of KS trajectories. Each trajectory gets its own
/// RNG stream derived from `(seed, index)`, so results do not depend on
/// scheduling or on how many trajectories are generated together.
pub fn ks_generate(cfg: &KsConfig, seed: u64) -> Result<TrajectoryBundle> {
    cfg.validate()?;
    let n_saved = cfg.n_saved();
    let n = cfg.n_grid;
    let s = cfg.n_traj;

    let mut data = vec![0.0; s * n_saved * n];
    let mut starts = vec![0.0; s * n];
    {
        use rayon::prelude::*;
        let results: Vec<Result<Vec<f64>>> = data
            .par_chunks_mut(n_saved * n)
            .enumerate()
            .map(|(traj, chunk)| integrate_one(cfg, seed, traj, chunk))
            .collect();
        for (traj, res) in results.into_iter().enumerate() {
            starts[traj * n..(traj + 1) * n].copy_from_slice(&res?);
        }
    }

    let burn = cfg.burn_steps();
    let times: Vec<f64> = (burn..=cfg.total_steps()).map(|j| j as f64 * cfg.dt).collect();
    let meta = BundleMeta::new("ks", seed, serde_json::to_value(cfg)?);
    TrajectoryBundle::new(data, (s, n_saved, n), times, Some(starts), meta)
}
