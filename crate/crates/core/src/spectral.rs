//! Real-input Fourier transforms and spectral utilities on periodic 1-D
//! grids.
//!
//! Conventions, used consistently by every caller in this crate:
//!
//! * the forward transform is unnormalized, the inverse divides by the
//!   physical grid length `n`;
//! * a real field of length `n` is represented by its `n/2 + 1`
//!   non-negative-frequency coefficients (rFFT ordering);
//! * wavenumbers are `k_j = 2*pi*j / domain_len`;
//! * all arithmetic is `f64`.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{CoreError, Result};

/// rFFT coefficients of a real periodic field, together with the grid
/// size and physical domain length they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    n_phys: usize,
    domain_len: f64,
    coeffs: Vec<Complex64>,
}

impl Spectrum {
    /// Wraps raw coefficients. `coeffs.len()` must equal `n_phys/2 + 1`.
    pub fn from_coeffs(n_phys: usize, domain_len: f64, coeffs: Vec<Complex64>) -> Result<Self> {
        if n_phys == 0 {
            return Err(CoreError::invalid_input("spectrum for empty grid"));
        }
        if coeffs.len() != n_phys / 2 + 1 {
            return Err(CoreError::invalid_input(format!(
                "expected {} rfft coefficients for n={}, got {}",
                n_phys / 2 + 1,
                n_phys,
                coeffs.len()
            )));
        }
        if !(domain_len.is_finite() && domain_len > 0.0) {
            return Err(CoreError::invalid_input("domain length must be positive"));
        }
        Ok(Spectrum { n_phys, domain_len, coeffs })
    }

    pub fn n_phys(&self) -> usize {
        self.n_phys
    }

    pub fn domain_len(&self) -> f64 {
        self.domain_len
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Physical wavenumbers for each stored coefficient.
    pub fn wavenumbers(&self) -> Vec<f64> {
        wavenumbers(self.n_phys, self.domain_len)
    }

    /// Largest coefficient magnitude; used by integrators for divergence
    /// checks.
    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Half-open wavenumber-index ranges used for band energy summaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandSpec {
    ranges: Vec<(usize, usize)>,
}

impl BandSpec {
    pub fn new(ranges: Vec<(usize, usize)>) -> Result<Self> {
        for &(lo, hi) in &ranges {
            if lo > hi {
                return Err(CoreError::invalid_input(format!(
                    "band [{lo}, {hi}) is reversed"
                )));
            }
        }
        Ok(BandSpec { ranges })
    }

    /// The default low-frequency bands [1,4), [4,8), [8,16), [16,32),
    /// clipped to the coefficient count of an `n`-point grid. Bands that
    /// clip to nothing are dropped.
    pub fn default_for(n: usize) -> Self {
        let limit = n / 2 + 1;
        let ranges = [(1usize, 4usize), (4, 8), (8, 16), (16, 32)]
            .into_iter()
            .map(|(lo, hi)| (lo.min(limit), hi.min(limit)))
            .filter(|&(lo, hi)| lo < hi)
            .collect();
        BandSpec { ranges }
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// Dealiasing strategy for quadratic products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DealiasMode {
    /// Zero-pad to `m = 3n/2` points, square on the padded grid,
    /// truncate back (default).
    Pad32,
    /// Classic 2/3 rule: zero coefficients above `n/3` before and after
    /// squaring on the original grid.
    Mask23,
}

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

fn plan(n: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut cache = cache.lock().unwrap();
    cache
        .entry((n, forward))
        .or_insert_with(|| {
            let mut planner = planner().lock().unwrap();
            if forward {
                planner.plan_fft_forward(n)
            } else {
                planner.plan_fft_inverse(n)
            }
        })
        .clone()
}

/// Cached-plan complex FFT used by the differentiable transform op,
/// which needs raw unnormalized forward and inverse passes.
pub(crate) fn complex_fft_inplace(buf: &mut [Complex64], forward: bool) {
    plan(buf.len(), forward).process(buf);
}

/// Unnormalized forward rFFT of a real field sampled on `n` uniform
/// points of a periodic domain of physical length `domain_len`.
pub fn rfft(u: &[f64], domain_len: f64) -> Result<Spectrum> {
    if u.is_empty() {
        return Err(CoreError::invalid_input("rfft of empty field"));
    }
    let n = u.len();
    let mut buf: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    plan(n, true).process(&mut buf);
    buf.truncate(n / 2 + 1);
    Spectrum::from_coeffs(n, domain_len, buf)
}

/// Inverse rFFT; divides by the grid length so that `irfft(rfft(u)) == u`
/// up to rounding. The imaginary parts of the DC bin and (for even `n`)
/// the Nyquist bin are ignored, matching the symmetry of real fields.
pub fn irfft(spec: &Spectrum) -> Vec<f64> {
    let n = spec.n_phys;
    let c = &spec.coeffs;
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[0] = Complex64::new(c[0].re, 0.0);
    for k in 1..c.len() {
        if 2 * k == n {
            full[k] = Complex64::new(c[k].re, 0.0);
        } else {
            full[k] = c[k];
            full[n - k] = c[k].conj();
        }
    }
    plan(n, false).process(&mut full);
    full.iter().map(|z| z.re / n as f64).collect()
}

/// Wavenumbers `k_j = 2*pi*j / domain_len` for `j = 0..=n/2`.
pub fn wavenumbers(n: usize, domain_len: f64) -> Vec<f64> {
    let step = 2.0 * std::f64::consts::PI / domain_len;
    (0..=n / 2).map(|j| j as f64 * step).collect()
}

/// Spectral coefficients of the pointwise square of a field, with
/// aliasing removed.
///
/// `Pad32` transfers the coefficients onto an `m = 3n/2` point grid
/// (scaling the padded inverse transform by `m/n` so grid values match
/// the original field), squares there, transforms forward, and keeps the
/// first `n/2 + 1` coefficients rescaled back to `n`-grid normalization.
/// `Mask23` zeroes coefficients with index above `n/3` before and after
/// squaring on the original grid.
pub fn dealiased_square(spec: &Spectrum, mode: DealiasMode) -> Result<Spectrum> {
    let n = spec.n_phys;
    match mode {
        DealiasMode::Pad32 => {
            let m = 3 * n / 2;
            let mut padded = vec![Complex64::new(0.0, 0.0); m / 2 + 1];
            padded[..spec.coeffs.len()].copy_from_slice(&spec.coeffs);
            let wide = Spectrum::from_coeffs(m, spec.domain_len, padded)?;
            let scale_up = m as f64 / n as f64;
            let mut grid = irfft(&wide);
            for x in &mut grid {
                *x = (*x * scale_up) * (*x * scale_up);
            }
            let squared = rfft(&grid, spec.domain_len)?;
            let scale_down = n as f64 / m as f64;
            let coeffs = squared.coeffs[..n / 2 + 1]
                .iter()
                .map(|c| c * scale_down)
                .collect();
            Spectrum::from_coeffs(n, spec.domain_len, coeffs)
        }
        DealiasMode::Mask23 => {
            let cutoff = n / 3;
            let mut masked = spec.clone();
            for (j, c) in masked.coeffs.iter_mut().enumerate() {
                if j > cutoff {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
            let mut grid = irfft(&masked);
            for x in &mut grid {
                *x *= *x;
            }
            let mut squared = rfft(&grid, spec.domain_len)?;
            for (j, c) in squared.coeffs.iter_mut().enumerate() {
                if j > cutoff {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
            Ok(squared)
        }
    }
}

/// Grid L2 norm (root of the unnormalized sum of squares over grid
/// points) of the spectrally computed m-th derivative: multiply the
/// spectrum by `(i k)^m` and measure the resulting physical field.
pub fn derivative_norm(spec: &Spectrum, m: u32) -> f64 {
    let ks = spec.wavenumbers();
    let mut diff = spec.clone();
    for (c, &k) in diff.coeffs.iter_mut().zip(&ks) {
        *c *= Complex64::new(0.0, k).powu(m);
    }
    let grid = irfft(&diff);
    grid.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sum of squared coefficient magnitudes over each band, accumulated
/// left to right in `f64`.
pub fn band_energies(spec: &Spectrum, bands: &BandSpec) -> Result<Vec<f64>> {
    let limit = spec.coeffs.len();
    let mut out = Vec::with_capacity(bands.ranges.len());
    for &(lo, hi) in &bands.ranges {
        if hi > limit {
            return Err(CoreError::invalid_input(format!(
                "band [{lo}, {hi}) exceeds coefficient count {limit}"
            )));
        }
        let mut e = 0.0;
        for c in &spec.coeffs[lo..hi] {
            e += c.norm_sqr();
        }
        out.push(e);
    }
    Ok(out)
}
