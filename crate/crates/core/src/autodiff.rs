//! Reverse-mode automatic differentiation over `f64` vectors.
//!
//! A [`Tape`] records every intermediate value of a forward computation
//! together with a backward closure; [`Tape::backward`] walks the nodes
//! in reverse creation order and accumulates vector-Jacobian products.
//! Nodes are plain flat `Vec<f64>`s; operations that need a shape
//! (convolutions, matrix products) take the dimensions as arguments.
//!
//! The op set is deliberately small and hand-verified: every operation
//! is covered by central-difference gradient checks in the test suite.

use num_complex::Complex64;

use crate::spectral;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&[Vec<f64>], &mut GradStore, &[f64])>;

/// Gradients indexed like tape nodes; entries materialize lazily.
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    fn acc(&mut self, idx: usize, len: usize) -> &mut [f64] {
        self.grads[idx]
            .get_or_insert_with(|| vec![0.0; len])
            .as_mut_slice()
    }

    /// Gradient of the loss with respect to a node, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as an owned vector, zeros if none flowed.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<Vec<f64>>,
    backs: Vec<Option<BackFn>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, val: Vec<f64>, back: Option<BackFn>) -> Var {
        self.vals.push(val);
        self.backs.push(back);
        Var(self.vals.len() - 1)
    }

    /// Input node (parameter, constant, or fed-in state).
    pub fn leaf(&mut self, val: Vec<f64>) -> Var {
        self.push(val, None)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.vals[v.0]
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.vals[v.0].len()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.vals[v.0].len(), 1);
        self.vals[v.0][0]
    }

    pub fn node_count(&self) -> usize {
        self.vals.len()
    }

    /// Marks the current node count so a later [`Tape::truncate`] can
    /// drop everything recorded afterwards (used by rollout loops that
    /// re-bind state each step but keep parameters resident).
    pub fn mark(&self) -> usize {
        self.vals.len()
    }

    pub fn truncate(&mut self, mark: usize) {
        self.vals.truncate(mark);
        self.backs.truncate(mark);
    }

    /// Accumulates vector-Jacobian products from a scalar loss node back
    /// to every node that influenced it.
    pub fn backward(&mut self, loss: Var) -> GradStore {
        assert_eq!(self.vals[loss.0].len(), 1, "backward needs a scalar loss");
        let mut store = GradStore { grads: vec![None; self.vals.len()] };
        store.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = store.grads[i].take() else { continue };
            if let Some(back) = &self.backs[i] {
                back(&self.vals, &mut store, &g);
            }
            store.grads[i] = Some(g);
        }
        store
    }

    // ----- elementwise arithmetic -------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let val = zip2(&self.vals[a.0], &self.vals[b.0], |x, y| x + y);
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                axpy(store.acc(a.0, n), g, 1.0);
                axpy(store.acc(b.0, n), g, 1.0);
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = zip2(&self.vals[a.0], &self.vals[b.0], |x, y| x - y);
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                axpy(store.acc(a.0, n), g, 1.0);
                axpy(store.acc(b.0, n), g, -1.0);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let val = zip2(&self.vals[a.0], &self.vals[b.0], |x, y| x * y);
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |vals, store, g| {
                {
                    let (gb, vb) = (store.acc(a.0, n), &vals[b.0]);
                    for i in 0..n {
                        gb[i] += g[i] * vb[i];
                    }
                }
                let (ga, va) = (store.acc(b.0, n), &vals[a.0]);
                for i in 0..n {
                    ga[i] += g[i] * va[i];
                }
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let val: Vec<f64> = self.vals[a.0].iter().map(|x| x * c).collect();
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                axpy(store.acc(a.0, n), g, c);
            })),
        )
    }

    /// Elementwise shift by a constant vector (or a single broadcast
    /// scalar when `c.len() == 1`).
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let va = &self.vals[a.0];
        let val: Vec<f64> = if c.len() == 1 {
            va.iter().map(|x| x + c[0]).collect()
        } else {
            assert_eq!(va.len(), c.len());
            zip2(va, c, |x, y| x + y)
        };
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                axpy(store.acc(a.0, n), g, 1.0);
            })),
        )
    }

    /// Elementwise multiply by a constant vector.
    pub fn cmul(&mut self, a: Var, c: &[f64]) -> Var {
        assert_eq!(self.vals[a.0].len(), c.len());
        let val = zip2(&self.vals[a.0], c, |x, y| x * y);
        let n = val.len();
        let c = c.to_vec();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                let ga = store.acc(a.0, n);
                for i in 0..n {
                    ga[i] += g[i] * c[i];
                }
            })),
        )
    }

    /// Subtracts a broadcast scalar node from every element.
    pub fn bsub(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.vals[s.0].len(), 1);
        let sv = self.vals[s.0][0];
        let val: Vec<f64> = self.vals[a.0].iter().map(|x| x - sv).collect();
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                axpy(store.acc(a.0, n), g, 1.0);
                store.acc(s.0, 1)[0] -= g.iter().sum::<f64>();
            })),
        )
    }

    // ----- reductions and reshaping ------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.vals[a.0].iter().sum();
        let n = self.vals[a.0].len();
        self.push(
            vec![s],
            Some(Box::new(move |_vals, store, g| {
                let ga = store.acc(a.0, n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.vals[a.0].len();
        let s: f64 = self.vals[a.0].iter().sum::<f64>() / n as f64;
        self.push(
            vec![s],
            Some(Box::new(move |_vals, store, g| {
                let ga = store.acc(a.0, n);
                let w = g[0] / n as f64;
                for x in ga.iter_mut() {
                    *x += w;
                }
            })),
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let s: f64 = self.vals[a.0].iter().zip(&self.vals[b.0]).map(|(x, y)| x * y).sum();
        let n = self.vals[a.0].len();
        self.push(
            vec![s],
            Some(Box::new(move |vals, store, g| {
                {
                    let ga = store.acc(a.0, n);
                    let vb = &vals[b.0];
                    for i in 0..n {
                        ga[i] += g[0] * vb[i];
                    }
                }
                let gb = store.acc(b.0, n);
                let va = &vals[a.0];
                for i in 0..n {
                    gb[i] += g[0] * va[i];
                }
            })),
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut val = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let start = val.len();
            val.extend_from_slice(&self.vals[p.0]);
            spans.push((p.0, start, val.len() - start));
        }
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                for &(idx, start, len) in &spans {
                    axpy(store.acc(idx, len), &g[start..start + len], 1.0);
                }
            })),
        )
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let full = self.vals[a.0].len();
        assert!(start + len <= full);
        let val = self.vals[a.0][start..start + len].to_vec();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                axpy(&mut store.acc(a.0, full)[start..start + len], g, 1.0);
            })),
        )
    }

    // ----- nonlinearities ----------------------------------------------

    pub fn square(&mut self, a: Var) -> Var {
        let val: Vec<f64> = self.vals[a.0].iter().map(|x| x * x).collect();
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |vals, store, g| {
                let ga = store.acc(a.0, n);
                let va = &vals[a.0];
                for i in 0..n {
                    ga[i] += 2.0 * va[i] * g[i];
                }
            })),
        )
    }

    /// `sqrt(x + eps)`, safe at zero.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let val: Vec<f64> = self.vals[a.0].iter().map(|x| (x + eps).sqrt()).collect();
        let n = val.len();
        let out_val = val.clone();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                let ga = store.acc(a.0, n);
                for i in 0..n {
                    ga[i] += g[i] / (2.0 * out_val[i]);
                }
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let val: Vec<f64> = self.vals[a.0].iter().map(|x| x.exp()).collect();
        let n = val.len();
        let out_val = val.clone();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                let ga = store.acc(a.0, n);
                for i in 0..n {
                    ga[i] += g[i] * out_val[i];
                }
            })),
        )
    }

    /// `ln(x + eps)`, safe at zero.
    pub fn ln_eps(&mut self, a: Var, eps: f64) -> Var {
        let val: Vec<f64> = self.vals[a.0].iter().map(|x| (x + eps).ln()).collect();
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |vals, store, g| {
                let ga = store.acc(a.0, n);
                let va = &vals[a.0];
                for i in 0..n {
                    ga[i] += g[i] / (va[i] + eps);
                }
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val: Vec<f64> = self.vals[a.0].iter().map(|x| x.tanh()).collect();
        let n = val.len();
        let y = val.clone();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                let ga = store.acc(a.0, n);
                for i in 0..n {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val: Vec<f64> = self.vals[a.0].iter().map(|&x| stable_sigmoid(x)).collect();
        let n = val.len();
        let y = val.clone();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                let ga = store.acc(a.0, n);
                for i in 0..n {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            })),
        )
    }

    /// SiLU / swish: `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let val: Vec<f64> = self.vals[a.0].iter().map(|&x| x * stable_sigmoid(x)).collect();
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |vals, store, g| {
                let ga = store.acc(a.0, n);
                let va = &vals[a.0];
                for i in 0..n {
                    let s = stable_sigmoid(va[i]);
                    ga[i] += g[i] * (s + va[i] * s * (1.0 - s));
                }
            })),
        )
    }

    /// GELU in its tanh form:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let val: Vec<f64> = self.vals[a.0].iter().map(|&x| gelu_fwd(x)).collect();
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |vals, store, g| {
                let ga = store.acc(a.0, n);
                let va = &vals[a.0];
                for i in 0..n {
                    ga[i] += g[i] * gelu_grad(va[i]);
                }
            })),
        )
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let val: Vec<f64> = self.vals[a.0].iter().map(|x| x.cos()).collect();
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |vals, store, g| {
                let ga = store.acc(a.0, n);
                let va = &vals[a.0];
                for i in 0..n {
                    ga[i] -= g[i] * va[i].sin();
                }
            })),
        )
    }

    /// Elementwise `atan2(y, x)`; the gradient is guarded near the
    /// origin where the phase is undefined.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        let val = zip2(&self.vals[y.0], &self.vals[x.0], |a, b| a.atan2(b));
        let n = val.len();
        self.push(
            val,
            Some(Box::new(move |vals, store, g| {
                let vy = &vals[y.0];
                let vx = &vals[x.0];
                {
                    let gy = store.acc(y.0, n);
                    for i in 0..n {
                        let d = (vx[i] * vx[i] + vy[i] * vy[i]).max(1e-30);
                        gy[i] += g[i] * vx[i] / d;
                    }
                }
                let gx = store.acc(x.0, n);
                for i in 0..n {
                    let d = (vx[i] * vx[i] + vy[i] * vy[i]).max(1e-30);
                    gx[i] -= g[i] * vy[i] / d;
                }
            })),
        )
    }

    // ----- linear algebra ----------------------------------------------

    /// `w` is `rows x cols` row-major, `x` has length `cols`.
    pub fn matvec(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.vals[w.0].len(), rows * cols);
        assert_eq!(self.vals[x.0].len(), cols);
        let mut val = vec![0.0; rows];
        {
            let wv = &self.vals[w.0];
            let xv = &self.vals[x.0];
            for r in 0..rows {
                let row = &wv[r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += row[c] * xv[c];
                }
                val[r] = acc;
            }
        }
        self.push(
            val,
            Some(Box::new(move |vals, store, g| {
                {
                    let gw = store.acc(w.0, rows * cols);
                    let xv = &vals[x.0];
                    for r in 0..rows {
                        let grow = &mut gw[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            grow[c] += g[r] * xv[c];
                        }
                    }
                }
                let gx = store.acc(x.0, cols);
                let wv = &vals[w.0];
                for r in 0..rows {
                    let row = &wv[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        gx[c] += row[c] * g[r];
                    }
                }
            })),
        )
    }

    /// LayerNorm without learned gain/bias: `(x - mean) / sqrt(var + eps)`.
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Var {
        let va = &self.vals[a.0];
        let n = va.len();
        let nf = n as f64;
        let mean = va.iter().sum::<f64>() / nf;
        let var = va.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
        let inv_std = 1.0 / (var + eps).sqrt();
        let val: Vec<f64> = va.iter().map(|x| (x - mean) * inv_std).collect();
        let y = val.clone();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                let ga = store.acc(a.0, n);
                let g_mean = g.iter().sum::<f64>() / nf;
                let gy_mean = g.iter().zip(&y).map(|(gi, yi)| gi * yi).sum::<f64>() / nf;
                for i in 0..n {
                    ga[i] += inv_std * (g[i] - g_mean - y[i] * gy_mean);
                }
            })),
        )
    }

    // ----- structured / spatial ops ------------------------------------

    /// Circular 1-D convolution. `w` is `c_out x c_in x k` row-major
    /// (odd `k`, centered taps), `x` is `c_in x n`, optional bias per
    /// output channel. `stride` must divide `n`; the output is
    /// `c_out x (n / stride)`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d_circ(
        &mut self,
        w: Var,
        bias: Option<Var>,
        x: Var,
        c_in: usize,
        c_out: usize,
        n: usize,
        k: usize,
        stride: usize,
    ) -> Var {
        assert!(k % 2 == 1, "kernel width must be odd");
        assert_eq!(self.vals[w.0].len(), c_out * c_in * k);
        assert_eq!(self.vals[x.0].len(), c_in * n);
        assert!(stride >= 1 && n % stride == 0, "stride must divide n");
        let n_out = n / stride;
        let pad = k / 2;

        let mut val = vec![0.0; c_out * n_out];
        {
            let wv = &self.vals[w.0];
            let xv = &self.vals[x.0];
            for co in 0..c_out {
                let out_row = &mut val[co * n_out..(co + 1) * n_out];
                for ci in 0..c_in {
                    let taps = &wv[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                    let x_row = &xv[ci * n..(ci + 1) * n];
                    for (j, o) in out_row.iter_mut().enumerate() {
                        let center = j * stride;
                        let mut acc = 0.0;
                        for (t, &wt) in taps.iter().enumerate() {
                            let m = (center + t + n - pad) % n;
                            acc += wt * x_row[m];
                        }
                        *o += acc;
                    }
                }
            }
            if let Some(b) = bias {
                let bv = &self.vals[b.0];
                assert_eq!(bv.len(), c_out);
                for co in 0..c_out {
                    for o in &mut val[co * n_out..(co + 1) * n_out] {
                        *o += bv[co];
                    }
                }
            }
        }

        self.push(
            val,
            Some(Box::new(move |vals, store, g| {
                {
                    let gw = store.acc(w.0, c_out * c_in * k);
                    let xv = &vals[x.0];
                    for co in 0..c_out {
                        let g_row = &g[co * n_out..(co + 1) * n_out];
                        for ci in 0..c_in {
                            let gtaps = &mut gw[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                            let x_row = &xv[ci * n..(ci + 1) * n];
                            for (t, gt) in gtaps.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for (j, &gj) in g_row.iter().enumerate() {
                                    let m = (j * stride + t + n - pad) % n;
                                    acc += gj * x_row[m];
                                }
                                *gt += acc;
                            }
                        }
                    }
                }
                {
                    let gx = store.acc(x.0, c_in * n);
                    let wv = &vals[w.0];
                    for co in 0..c_out {
                        let g_row = &g[co * n_out..(co + 1) * n_out];
                        for ci in 0..c_in {
                            let taps = &wv[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                            let gx_row = &mut gx[ci * n..(ci + 1) * n];
                            for (j, &gj) in g_row.iter().enumerate() {
                                let center = j * stride;
                                for (t, &wt) in taps.iter().enumerate() {
                                    let m = (center + t + n - pad) % n;
                                    gx_row[m] += wt * gj;
                                }
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let gb = store.acc(b.0, c_out);
                    for co in 0..c_out {
                        gb[co] += g[co * n_out..(co + 1) * n_out].iter().sum::<f64>();
                    }
                }
            })),
        )
    }

    /// Nearest-neighbour upsampling along space: `c x n -> c x (n*f)`.
    pub fn upsample_nearest(&mut self, x: Var, c: usize, n: usize, f: usize) -> Var {
        assert_eq!(self.vals[x.0].len(), c * n);
        let mut val = vec![0.0; c * n * f];
        for ch in 0..c {
            for j in 0..n * f {
                val[ch * n * f + j] = self.vals[x.0][ch * n + j / f];
            }
        }
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                let gx = store.acc(x.0, c * n);
                for ch in 0..c {
                    for j in 0..n * f {
                        gx[ch * n + j / f] += g[ch * n * f + j];
                    }
                }
            })),
        )
    }

    /// Adds a per-channel vector to a `c x n` feature map.
    pub fn bcast_add_chan(&mut self, x: Var, v: Var, c: usize, n: usize) -> Var {
        assert_eq!(self.vals[x.0].len(), c * n);
        assert_eq!(self.vals[v.0].len(), c);
        let mut val = self.vals[x.0].clone();
        for ch in 0..c {
            let add = self.vals[v.0][ch];
            for j in 0..n {
                val[ch * n + j] += add;
            }
        }
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                axpy(store.acc(x.0, c * n), g, 1.0);
                let gv = store.acc(v.0, c);
                for ch in 0..c {
                    gv[ch] += g[ch * n..(ch + 1) * n].iter().sum::<f64>();
                }
            })),
        )
    }

    /// Mean over equal contiguous bins: `n -> bins` (`bins` divides `n`).
    pub fn avgpool_bins(&mut self, x: Var, bins: usize) -> Var {
        let n = self.vals[x.0].len();
        assert!(bins >= 1 && n % bins == 0, "bins must divide the length");
        let group = n / bins;
        let val: Vec<f64> = (0..bins)
            .map(|b| self.vals[x.0][b * group..(b + 1) * group].iter().sum::<f64>() / group as f64)
            .collect();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                let gx = store.acc(x.0, n);
                for b in 0..bins {
                    let w = g[b] / group as f64;
                    for gxi in &mut gx[b * group..(b + 1) * group] {
                        *gxi += w;
                    }
                }
            })),
        )
    }

    /// Spatial mean per channel: `c x n -> c`.
    pub fn channel_mean(&mut self, x: Var, c: usize, n: usize) -> Var {
        assert_eq!(self.vals[x.0].len(), c * n);
        let val: Vec<f64> = (0..c)
            .map(|ch| self.vals[x.0][ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                let gx = store.acc(x.0, c * n);
                for ch in 0..c {
                    let w = g[ch] / n as f64;
                    for gxi in &mut gx[ch * n..(ch + 1) * n] {
                        *gxi += w;
                    }
                }
            })),
        )
    }

    /// First `kmax` unnormalized rFFT coefficients of a real field,
    /// packed as `[Re(0..kmax); Im(0..kmax)]`. Linear in the input; the
    /// adjoint is evaluated with an inverse transform.
    pub fn rfft_packed(&mut self, x: Var, kmax: usize) -> Var {
        let n = self.vals[x.0].len();
        assert!(kmax >= 1 && kmax <= n / 2 + 1, "kmax out of range");
        let mut buf: Vec<Complex64> = self.vals[x.0]
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        spectral::complex_fft_inplace(&mut buf, true);
        let mut val = vec![0.0; 2 * kmax];
        for k in 0..kmax {
            val[k] = buf[k].re;
            val[kmax + k] = buf[k].im;
        }
        self.push(
            val,
            Some(Box::new(move |_vals, store, g| {
                let mut gbuf = vec![Complex64::new(0.0, 0.0); n];
                for k in 0..kmax {
                    gbuf[k] = Complex64::new(g[k], g[kmax + k]);
                }
                spectral::complex_fft_inplace(&mut gbuf, false);
                let gx = store.acc(x.0, n);
                for (gi, z) in gx.iter_mut().zip(&gbuf) {
                    *gi += z.re;
                }
            })),
        )
    }
}

fn zip2(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "shape mismatch");
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Maximum relative error between analytic gradients and central finite
/// differences of `f`, probing every element of every input.
///
/// `f` must rebuild the same scalar computation from the given leaves on
/// each call. Relative error is `|a - d| / max(1, |a|, |d|)`.
pub fn finite_diff_check<F>(f: F, inputs: &[Vec<f64>], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut tape, &vars);
        let out = tape.scalar(loss);
        let store = tape.backward(loss);
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| store.get_or_zeros(v, x.len()))
            .collect();
        (out, grads)
    };

    let (_, grads) = eval(inputs);
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let h = eps * x[j].abs().max(1.0);
            probe[i][j] = x[j] + h;
            let (up, _) = eval(&probe);
            probe[i][j] = x[j] - h;
            let (down, _) = eval(&probe);
            probe[i][j] = x[j];
            let fd = (up - down) / (2.0 * h);
            let a = grads[i][j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}
