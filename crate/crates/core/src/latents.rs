//! Spectral latent hierarchy and per-level conditioning features.
//!
//! A latent is the low-wavenumber slice of a field's rFFT, packed as
//! `[Re(0..K); Im(0..K)]`. Level 2 keeps fewer modes than level 1, so
//! coarse latents are exact sub-slices of fine ones. Conditioning
//! vectors mix cheap summary statistics of the current field (pooled
//! averages, derivative norms, band energies) with their one-step
//! increments and project them to a fixed width for the recurrent
//! priors; increments use a small cache of previous-step statistics
//! that is cleared at every rollout start.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::params::ParamBuilder;
use crate::spectral::{self, BandSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Ks,
    L96,
}

impl System {
    pub fn tag(self) -> &'static str {
        match self {
            System::Ks => "ks",
            System::L96 => "l96",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "ks" => Ok(System::Ks),
            "l96" => Ok(System::L96),
            other => Err(CoreError::invalid_config(format!("unknown system {other}"))),
        }
    }
}

/// One level of the latent hierarchy: `cutoff` retained rFFT modes,
/// latent dimension `2 * cutoff`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLevelSpec {
    pub cutoff: usize,
}

impl LatentLevelSpec {
    pub fn latent_dim(&self) -> usize {
        2 * self.cutoff
    }
}

/// Packs the first `k` rFFT coefficients of `u` as `[Re; Im]`.
pub fn encode_level(u: &[f64], k: usize) -> Vec<f64> {
    assert!(k >= 1 && k <= u.len() / 2 + 1, "cutoff out of range");
    let spec = spectral::rfft(u, 1.0).expect("non-empty field");
    let mut z = vec![0.0; 2 * k];
    for (i, c) in spec.coeffs()[..k].iter().enumerate() {
        z[i] = c.re;
        z[k + i] = c.im;
    }
    z
}

/// Tape counterpart of [`encode_level`]; value-identical to it.
pub fn encode_level_var(tape: &mut Tape, u: Var, k: usize) -> Var {
    tape.rfft_packed(u, k)
}

/// Latents for every level, finest first.
pub fn encode_hierarchy(u: &[f64], specs: &[LatentLevelSpec]) -> Vec<Vec<f64>> {
    specs.iter().map(|s| encode_level(u, s.cutoff)).collect()
}

/// Rebuilds the coarse latent from a fine one by index bookkeeping:
/// the first `k2` Re entries and first `k2` Im entries of the fine
/// packing, in the coarse layout.
pub fn coarse_from_fine(z_fine: &[f64], k1: usize, k2: usize) -> Vec<f64> {
    assert!(k2 <= k1 && z_fine.len() == 2 * k1);
    let mut z = Vec::with_capacity(2 * k2);
    z.extend_from_slice(&z_fine[..k2]);
    z.extend_from_slice(&z_fine[k1..k1 + k2]);
    z
}

/// Tape version of [`coarse_from_fine`].
pub fn coarse_from_fine_var(tape: &mut Tape, z_fine: Var, k1: usize, k2: usize) -> Var {
    let re = tape.slice(z_fine, 0, k2);
    let im = tape.slice(z_fine, k1, k2);
    tape.concat(&[re, im])
}

/// Previous-step statistics used to form increment features. Every
/// field is `None` right after a reset, which makes the first-step
/// increments exactly zero.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    pub pooled: Option<Var>,
    pub deriv_norms: Option<Var>,
    pub mean_std: Option<Var>,
    pub band_energies: Option<Var>,
    pub lowk: Option<Var>,
}

impl FeatureCache {
    pub fn empty() -> Self {
        FeatureCache::default()
    }

    /// Fields in a fixed order for state detach/attach.
    pub fn slots(&self) -> [Option<Var>; 5] {
        [self.pooled, self.deriv_norms, self.mean_std, self.band_energies, self.lowk]
    }

    pub fn from_slots(slots: [Option<Var>; 5]) -> Self {
        FeatureCache {
            pooled: slots[0],
            deriv_norms: slots[1],
            mean_std: slots[2],
            band_energies: slots[3],
            lowk: slots[4],
        }
    }
}

/// Increment against the cached value; exactly zero when the cache is
/// empty (gradient-free zero, built by scaling the current value by 0).
fn increment(tape: &mut Tape, current: Var, prev: Option<Var>) -> Var {
    match prev {
        Some(p) => tape.sub(current, p),
        None => tape.scale(current, 0.0),
    }
}

/// Scaled low-wavenumber slice `[Re(0..k); Im(0..k)] / n` taken from an
/// already-computed full packed spectrum.
fn lowk_slice(tape: &mut Tape, packed_full: Var, n: usize, k: usize) -> Var {
    let kmax = n / 2 + 1;
    let re = tape.slice(packed_full, 0, k);
    let im = tape.slice(packed_full, kmax, k);
    let both = tape.concat(&[re, im]);
    tape.scale(both, 1.0 / n as f64)
}

/// Packed-spectrum weights such that
/// `sum(weights * packed^2) / n == sum_j (d^m u / dx^m)_j^2`
/// for even `m`, matching the plain-field derivative norm exactly
/// (imaginary DC and Nyquist entries carry weight zero, as the inverse
/// transform ignores them).
fn deriv_weights(n: usize, domain_len: f64, m: u32) -> Vec<f64> {
    let kmax = n / 2 + 1;
    let ks = spectral::wavenumbers(n, domain_len);
    let mut w = vec![0.0; 2 * kmax];
    for (j, &k) in ks.iter().enumerate() {
        let pow = k.powi(2 * m as i32);
        let double = if j == 0 || 2 * j == n { 1.0 } else { 2.0 };
        w[j] = double * pow;
        w[kmax + j] = if j == 0 || 2 * j == n { 0.0 } else { double * pow };
    }
    w
}

fn deriv_norm_from_packed(
    tape: &mut Tape,
    packed_sq: Var,
    weights: &[f64],
    n: usize,
) -> Var {
    let weighted = tape.cmul(packed_sq, weights);
    let s = tape.sum(weighted);
    let s = tape.scale(s, 1.0 / n as f64);
    tape.sqrt_eps(s, 1e-24)
}

/// Trainable conditioner for the spatially extended system: the fine
/// level sees pooled bin averages and their increments plus a top-down
/// linear view of the coarse latent; the coarse level sees the scaled
/// low-k slice and second/fourth derivative norms with increments.
#[derive(Debug, Clone)]
pub struct KsConditioner {
    pub n: usize,
    pub domain_len: f64,
    pub bins: usize,
    pub k2: usize,
    pub d_c: usize,
    w2: Vec<f64>,
    w4: Vec<f64>,
    ix_proj1_w: usize,
    ix_proj1_b: usize,
    ix_topdown_w: usize,
    ix_proj2_w: usize,
    ix_proj2_b: usize,
}

impl KsConditioner {
    pub fn declare(
        b: &mut ParamBuilder,
        n: usize,
        domain_len: f64,
        bins: usize,
        k2: usize,
        d_c: usize,
    ) -> Result<Self> {
        if n % bins != 0 {
            return Err(CoreError::invalid_config(format!(
                "pooling bins {bins} must divide grid size {n}"
            )));
        }
        let d_in1 = 2 * bins;
        let d_in2 = 2 * k2 + 4;
        Ok(KsConditioner {
            n,
            domain_len,
            bins,
            k2,
            d_c,
            w2: deriv_weights(n, domain_len, 2),
            w4: deriv_weights(n, domain_len, 4),
            ix_proj1_w: b.kaiming("cond.proj1.w", &[d_c, d_in1], d_in1),
            ix_proj1_b: b.zeros("cond.proj1.b", &[d_c]),
            ix_topdown_w: b.kaiming("cond.topdown.w", &[d_c, 2 * k2], 2 * k2),
            ix_proj2_w: b.kaiming("cond.proj2.w", &[d_c, d_in2], d_in2),
            ix_proj2_b: b.zeros("cond.proj2.b", &[d_c]),
        })
    }

    /// Returns `(c1, c2, updated cache)` for the current field and the
    /// carried coarse latent.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        u: Var,
        z_coarse: Var,
        cache: &FeatureCache,
    ) -> (Var, Var, FeatureCache) {
        let p = tape.avgpool_bins(u, self.bins);
        let dp = increment(tape, p, cache.pooled);

        let kmax = self.n / 2 + 1;
        let packed = tape.rfft_packed(u, kmax);
        let packed_sq = tape.square(packed);
        let d2 = deriv_norm_from_packed(tape, packed_sq, &self.w2, self.n);
        let d4 = deriv_norm_from_packed(tape, packed_sq, &self.w4, self.n);
        let dnorms = tape.concat(&[d2, d4]);
        let ddn = increment(tape, dnorms, cache.deriv_norms);
        let lowk = lowk_slice(tape, packed, self.n, self.k2);

        let raw1 = tape.concat(&[p, dp]);
        let proj1 = tape.matvec(vars[self.ix_proj1_w], raw1, self.d_c, 2 * self.bins);
        let proj1 = tape.add(proj1, vars[self.ix_proj1_b]);
        let td = tape.matvec(vars[self.ix_topdown_w], z_coarse, self.d_c, 2 * self.k2);
        let c1 = tape.add(proj1, td);

        let raw2 = tape.concat(&[lowk, dnorms, ddn]);
        let c2 = tape.matvec(vars[self.ix_proj2_w], raw2, self.d_c, 2 * self.k2 + 4);
        let c2 = tape.add(c2, vars[self.ix_proj2_b]);

        let cache = FeatureCache {
            pooled: Some(p),
            deriv_norms: Some(dnorms),
            mean_std: None,
            band_energies: None,
            lowk: Some(lowk),
        };
        (c1, c2, cache)
    }
}

/// Trainable conditioner for the ring system: the fine level sees group
/// means, the carried coarse latent, and group-mean increments; the
/// coarse level sees the scaled low-k slice, global mean/std, per-band
/// and total spectral energies, and all their increments.
#[derive(Debug, Clone)]
pub struct L96Conditioner {
    pub n: usize,
    pub groups: usize,
    pub k2: usize,
    pub d_c: usize,
    pub bands: BandSpec,
    ix_proj1_w: usize,
    ix_proj1_b: usize,
    ix_proj2_w: usize,
    ix_proj2_b: usize,
}

impl L96Conditioner {
    pub fn declare(
        b: &mut ParamBuilder,
        n: usize,
        groups: usize,
        k2: usize,
        d_c: usize,
        bands: BandSpec,
    ) -> Result<Self> {
        if n % groups != 0 {
            return Err(CoreError::invalid_config(format!(
                "groups {groups} must divide state dimension {n}"
            )));
        }
        let n_bands = bands.ranges().len();
        let d_in1 = 2 * groups + 2 * k2;
        let d_in2 = 2 * k2 + 4 + 2 * n_bands + 2;
        Ok(L96Conditioner {
            n,
            groups,
            k2,
            d_c,
            bands,
            ix_proj1_w: b.kaiming("cond.proj1.w", &[d_c, d_in1], d_in1),
            ix_proj1_b: b.zeros("cond.proj1.b", &[d_c]),
            ix_proj2_w: b.kaiming("cond.proj2.w", &[d_c, d_in2], d_in2),
            ix_proj2_b: b.zeros("cond.proj2.b", &[d_c]),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        u: Var,
        z_coarse: Var,
        cache: &FeatureCache,
    ) -> (Var, Var, FeatureCache) {
        let p = tape.avgpool_bins(u, self.groups);
        let dp = increment(tape, p, cache.pooled);

        let mean = tape.mean(u);
        let centered = tape.bsub(u, mean);
        let var = tape.square(centered);
        let var = tape.mean(var);
        let std = tape.sqrt_eps(var, 1e-12);
        let mean_std = tape.concat(&[mean, std]);
        let dms = increment(tape, mean_std, cache.mean_std);

        let kmax = self.n / 2 + 1;
        let packed = tape.rfft_packed(u, kmax);
        let packed_sq = tape.square(packed);
        let scale = 1.0 / (self.n as f64 * self.n as f64);
        let mut energies = Vec::with_capacity(self.bands.ranges().len() + 1);
        for &(lo, hi) in self.bands.ranges() {
            let re = tape.slice(packed_sq, lo, hi - lo);
            let im = tape.slice(packed_sq, kmax + lo, hi - lo);
            let re_s = tape.sum(re);
            let im_s = tape.sum(im);
            let e = tape.add(re_s, im_s);
            energies.push(tape.scale(e, scale));
        }
        let total = tape.sum(packed_sq);
        energies.push(tape.scale(total, scale));
        let bands = tape.concat(&energies);
        let dbands = increment(tape, bands, cache.band_energies);
        let lowk = lowk_slice(tape, packed, self.n, self.k2);

        let raw1 = tape.concat(&[p, z_coarse, dp]);
        let c1 = tape.matvec(vars[self.ix_proj1_w], raw1, self.d_c, 2 * self.groups + 2 * self.k2);
        let c1 = tape.add(c1, vars[self.ix_proj1_b]);

        let raw2 = tape.concat(&[lowk, mean_std, dms, bands, dbands]);
        let d_in2 = 2 * self.k2 + 4 + 2 * (self.bands.ranges().len() + 1);
        let c2 = tape.matvec(vars[self.ix_proj2_w], raw2, self.d_c, d_in2);
        let c2 = tape.add(c2, vars[self.ix_proj2_b]);

        let cache = FeatureCache {
            pooled: Some(p),
            deriv_norms: None,
            mean_std: Some(mean_std),
            band_energies: Some(bands),
            lowk: Some(lowk),
        };
        (c1, c2, cache)
    }
}

/// Either system's conditioner behind one call surface.
#[derive(Debug, Clone)]
pub enum Conditioner {
    Ks(KsConditioner),
    L96(L96Conditioner),
}

impl Conditioner {
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        u: Var,
        z_coarse: Var,
        cache: &FeatureCache,
    ) -> (Var, Var, FeatureCache) {
        match self {
            Conditioner::Ks(c) => c.forward(tape, vars, u, z_coarse, cache),
            Conditioner::L96(c) => c.forward(tape, vars, u, z_coarse, cache),
        }
    }

    pub fn d_c(&self) -> usize {
        match self {
            Conditioner::Ks(c) => c.d_c,
            Conditioner::L96(c) => c.d_c,
        }
    }
}

/// Plain-field derivative norm identical to the tape path; used by
/// tests to pin the two implementations together.
pub fn grid_deriv_norm(u: &[f64], domain_len: f64, m: u32) -> f64 {
    let spec = spectral::rfft(u, domain_len).expect("non-empty field");
    spectral::derivative_norm(&spec, m)
}
