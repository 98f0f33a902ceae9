//! Shared oracles for integration tests. Everything here is written
//! against the definitions directly (quadratic-cost sums, oversampled
//! grids) and deliberately avoids the library's FFT code paths.
//!
//! Each test binary pulls in the subset it needs.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Quadratic-cost DFT of a real field; returns (re, im) for k = 0..=n/2.
pub fn naive_rfft(u: &[f64]) -> Vec<(f64, f64)> {
    let n = u.len();
    (0..=n / 2)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (j, &x) in u.iter().enumerate() {
                let ang = -2.0 * PI * (k as f64) * (j as f64) / n as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            (re, im)
        })
        .collect()
}

/// Evaluates the trigonometric interpolant of rFFT coefficients (in the
/// unnormalized-forward convention for an `n`-point grid) at arbitrary
/// phase `theta = 2*pi*x/domain_len in [0, 2*pi)`.
pub fn eval_interpolant(coeffs: &[(f64, f64)], n: usize, theta: f64) -> f64 {
    let mut acc = coeffs[0].0;
    for (k, &(re, im)) in coeffs.iter().enumerate().skip(1) {
        let (s, c) = (k as f64 * theta).sin_cos();
        if 2 * k == n {
            acc += re * c;
        } else {
            acc += 2.0 * (re * c - im * s);
        }
    }
    acc / n as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
