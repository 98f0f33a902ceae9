//! Central-difference gradient checks for every differentiable op.
//!
//! Each test builds a scalar loss from one op (plus a reduction) and
//! compares analytic gradients against finite differences at every
//! input element. Single ops must agree to 1e-5 relative error and
//! composed expressions to 1e-4; in f64 the checks typically land
//! several orders of magnitude below those bounds.

use chaos_forecast_core::autodiff::{finite_diff_check, Tape, Var};
use chaos_forecast_core::seeding::stream_rng;
use rand::Rng;

const EPS: f64 = 1e-6;
const TOL_SINGLE: f64 = 1e-5;
const TOL_COMPOSED: f64 = 1e-4;

fn rand_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
}

/// Reduces any vector node to a scalar with uneven weights so that
/// every output component contributes a distinct gradient signal.
fn weighted_scalar(tape: &mut Tape, v: Var) -> Var {
    let n = tape.len_of(v);
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
    let wv = tape.cmul(v, &w);
    tape.sum(wv)
}

fn check1(name: &str, n: usize, f: impl Fn(&mut Tape, Var) -> Var) {
    let mut rng = stream_rng(11, 0);
    let x = rand_vec(&mut rng, n, 1.5);
    let err = finite_diff_check(
        |tape, vars| {
            let y = f(tape, vars[0]);
            weighted_scalar(tape, y)
        },
        &[x],
        EPS,
    );
    assert!(err < TOL_SINGLE, "{name}: max rel grad error {err:.3e}");
}

fn check2(name: &str, na: usize, nb: usize, f: impl Fn(&mut Tape, Var, Var) -> Var) {
    let mut rng = stream_rng(12, 0);
    let a = rand_vec(&mut rng, na, 1.5);
    let b = rand_vec(&mut rng, nb, 1.5);
    let err = finite_diff_check(
        |tape, vars| {
            let y = f(tape, vars[0], vars[1]);
            weighted_scalar(tape, y)
        },
        &[a, b],
        EPS,
    );
    assert!(err < TOL_SINGLE, "{name}: max rel grad error {err:.3e}");
}

#[test]
fn elementwise_arithmetic_grads() {
    check2("add", 7, 7, |t, a, b| t.add(a, b));
    check2("sub", 7, 7, |t, a, b| t.sub(a, b));
    check2("mul", 7, 7, |t, a, b| t.mul(a, b));
    check1("neg", 6, |t, a| t.neg(a));
    check1("scale", 6, |t, a| t.scale(a, -2.7));
    check1("add_const", 6, |t, a| t.add_const(a, &[0.5]));
    check1("cmul", 5, |t, a| t.cmul(a, &[0.2, -1.0, 3.0, 0.0, 7.5]));
}

#[test]
fn broadcast_sub_grad() {
    check2("bsub", 8, 1, |t, a, s| t.bsub(a, s));
}

#[test]
fn reduction_grads() {
    check1("sum", 9, |t, a| t.sum(a));
    check1("mean", 9, |t, a| t.mean(a));
    check2("dot", 6, 6, |t, a, b| t.dot(a, b));
}

#[test]
fn concat_and_slice_grads() {
    check2("concat", 4, 5, |t, a, b| t.concat(&[a, b, a]));
    check1("slice", 10, |t, a| t.slice(a, 3, 4));
}

#[test]
fn nonlinearity_grads() {
    check1("square", 7, |t, a| t.square(a));
    check1("sqrt_eps", 7, |t, a| {
        let sq = t.square(a);
        t.sqrt_eps(sq, 1e-6)
    });
    check1("exp", 7, |t, a| t.exp(a));
    check1("ln_eps", 7, |t, a| {
        let sq = t.square(a);
        t.ln_eps(sq, 1e-6)
    });
    check1("tanh", 7, |t, a| t.tanh(a));
    check1("sigmoid", 7, |t, a| t.sigmoid(a));
    check1("silu", 7, |t, a| t.silu(a));
    check1("gelu", 7, |t, a| t.gelu(a));
    check1("cos", 7, |t, a| t.cos(a));
}

#[test]
fn atan2_grad_away_from_origin() {
    let mut rng = stream_rng(13, 0);
    // keep radii comfortably away from the guarded origin
    let y: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() + 0.5).collect();
    let x: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() + 0.5).collect();
    let err = finite_diff_check(
        |tape, vars| {
            let phi = tape.atan2(vars[0], vars[1]);
            weighted_scalar(tape, phi)
        },
        &[y, x],
        EPS,
    );
    assert!(err < TOL_SINGLE, "atan2: max rel grad error {err:.3e}");
}

#[test]
fn matvec_grad() {
    let (rows, cols) = (4, 6);
    check2("matvec", rows * cols, cols, move |t, w, x| t.matvec(w, x, rows, cols));
}

#[test]
fn layernorm_grad() {
    check1("layernorm", 9, |t, a| t.layernorm(a, 1e-5));
}

#[test]
fn conv1d_circ_grad_all_inputs() {
    let (c_in, c_out, n, k) = (2, 3, 8, 5);
    let mut rng = stream_rng(14, 0);
    let w = rand_vec(&mut rng, c_out * c_in * k, 1.0);
    let b = rand_vec(&mut rng, c_out, 1.0);
    let x = rand_vec(&mut rng, c_in * n, 1.0);
    let err = finite_diff_check(
        |tape, vars| {
            let y = tape.conv1d_circ(vars[0], Some(vars[1]), vars[2], c_in, c_out, n, k, 1);
            weighted_scalar(tape, y)
        },
        &[w, b, x],
        EPS,
    );
    assert!(err < TOL_SINGLE, "conv1d_circ: max rel grad error {err:.3e}");
}

#[test]
fn conv1d_circ_strided_grad() {
    let (c_in, c_out, n, k, stride) = (2, 2, 12, 3, 2);
    let mut rng = stream_rng(15, 0);
    let w = rand_vec(&mut rng, c_out * c_in * k, 1.0);
    let x = rand_vec(&mut rng, c_in * n, 1.0);
    let err = finite_diff_check(
        |tape, vars| {
            let y = tape.conv1d_circ(vars[0], None, vars[1], c_in, c_out, n, k, stride);
            weighted_scalar(tape, y)
        },
        &[w, x],
        EPS,
    );
    assert!(err < TOL_SINGLE, "strided conv: max rel grad error {err:.3e}");
}

#[test]
fn conv1d_circ_is_exactly_shift_equivariant() {
    let (c_in, c_out, n, k) = (2, 3, 16, 5);
    let mut rng = stream_rng(16, 0);
    let w = rand_vec(&mut rng, c_out * c_in * k, 1.0);
    let b = rand_vec(&mut rng, c_out, 1.0);
    let x = rand_vec(&mut rng, c_in * n, 1.0);
    let shift = 5;
    let mut x_shifted = vec![0.0; c_in * n];
    for ci in 0..c_in {
        for j in 0..n {
            x_shifted[ci * n + (j + shift) % n] = x[ci * n + j];
        }
    }

    let mut tape = Tape::new();
    let wv = tape.leaf(w);
    let bv = tape.leaf(b);
    let xv = tape.leaf(x);
    let xs = tape.leaf(x_shifted);
    let y = tape.conv1d_circ(wv, Some(bv), xv, c_in, c_out, n, k, 1);
    let ys = tape.conv1d_circ(wv, Some(bv), xs, c_in, c_out, n, k, 1);
    let y = tape.value(y).to_vec();
    let ys = tape.value(ys);
    for co in 0..c_out {
        for j in 0..n {
            let a = y[co * n + j];
            let bval = ys[co * n + (j + shift) % n];
            assert_eq!(a, bval, "channel {co} site {j}: shift changed the value");
        }
    }
}

#[test]
fn spatial_op_grads() {
    check1("upsample_nearest", 2 * 4, |t, a| t.upsample_nearest(a, 2, 4, 3));
    check2("bcast_add_chan", 3 * 5, 3, |t, x, v| t.bcast_add_chan(x, v, 3, 5));
    check1("avgpool_bins", 12, |t, a| t.avgpool_bins(a, 4));
    check1("channel_mean", 3 * 6, |t, a| t.channel_mean(a, 3, 6));
}

#[test]
fn rfft_packed_matches_naive_transform() {
    let n = 16;
    let kmax = 5;
    let mut rng = stream_rng(17, 0);
    let x = rand_vec(&mut rng, n, 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let packed = tape.rfft_packed(xv, kmax);
    let got = tape.value(packed);
    for k in 0..kmax {
        let mut re = 0.0;
        let mut im = 0.0;
        for (j, &u) in x.iter().enumerate() {
            let th = 2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
            re += u * th.cos();
            im -= u * th.sin();
        }
        assert!((got[k] - re).abs() < 1e-10, "Re[{k}]");
        assert!((got[kmax + k] - im).abs() < 1e-10, "Im[{k}]");
    }
}

#[test]
fn rfft_packed_grad() {
    check1("rfft_packed", 16, |t, a| t.rfft_packed(a, 5));
}

/// A small GRU-style cell wired from primitive ops: three gates, a
/// candidate state, and a convex blend. Exercises deep composition.
#[test]
fn composed_gated_cell_grad() {
    let d = 5;
    let mut rng = stream_rng(18, 0);
    let inputs: Vec<Vec<f64>> = vec![
        rand_vec(&mut rng, d * d, 0.6), // w_z
        rand_vec(&mut rng, d * d, 0.6), // u_z
        rand_vec(&mut rng, d, 0.3),     // b_z
        rand_vec(&mut rng, d * d, 0.6), // w_n
        rand_vec(&mut rng, d * d, 0.6), // u_n
        rand_vec(&mut rng, d, 0.3),     // b_n
        rand_vec(&mut rng, d, 1.0),     // x
        rand_vec(&mut rng, d, 1.0),     // h
    ];
    let err = finite_diff_check(
        |t, v| {
            let (w_z, u_z, b_z, w_n, u_n, b_n, x, h) =
                (v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]);
            let zx = t.matvec(w_z, x, d, d);
            let zh = t.matvec(u_z, h, d, d);
            let zs = t.add(zx, zh);
            let zs = t.add(zs, b_z);
            let z = t.sigmoid(zs);
            let nx = t.matvec(w_n, x, d, d);
            let nh = t.matvec(u_n, h, d, d);
            let ns = t.add(nx, nh);
            let ns = t.add(ns, b_n);
            let cand = t.tanh(ns);
            let keep = t.mul(z, h);
            let one_minus = t.scale(z, -1.0);
            let one_minus = t.add_const(one_minus, &[1.0]);
            let upd = t.mul(one_minus, cand);
            let new_h = t.add(keep, upd);
            let sq = t.square(new_h);
            t.mean(sq)
        },
        &inputs,
        EPS,
    );
    assert!(err < TOL_COMPOSED, "gated cell: max rel grad error {err:.3e}");
}

/// Convolution feeding a spectral loss through the packed transform,
/// the shape of the real training objective.
#[test]
fn composed_conv_spectral_loss_grad() {
    let (c_in, c_out, n, k, kmax) = (1, 1, 16, 5, 4);
    let mut rng = stream_rng(19, 0);
    let w = rand_vec(&mut rng, c_out * c_in * k, 0.8);
    let x = rand_vec(&mut rng, c_in * n, 1.0);
    let target: Vec<f64> = rand_vec(&mut rng, 2 * kmax, 1.0);
    let err = finite_diff_check(
        |t, v| {
            let field = t.conv1d_circ(v[0], None, v[1], c_in, c_out, n, k, 1);
            let act = t.tanh(field);
            let coeffs = t.rfft_packed(act, kmax);
            let neg_target: Vec<f64> = target.iter().map(|x| -x).collect();
            let diff = t.add_const(coeffs, &neg_target);
            let sq = t.square(diff);
            t.mean(sq)
        },
        &[w, x],
        EPS,
    );
    assert!(err < TOL_COMPOSED, "conv+fft loss: max rel grad error {err:.3e}");
}

/// Polar-coordinate mismatch penalty between predicted and target
/// complex coefficients, the least smooth loss in the system.
#[test]
fn composed_polar_mismatch_grad() {
    let k = 4;
    let mut rng = stream_rng(20, 0);
    // radii bounded away from zero so atan2 and log stay smooth
    let mk = |rng: &mut chaos_forecast_core::seeding::Rng| -> Vec<f64> {
        (0..2 * k)
            .map(|i| {
                let v = rng.gen::<f64>() * 1.5 + 0.6;
                if rng.gen::<bool>() && i % 2 == 0 {
                    -v
                } else {
                    v
                }
            })
            .collect()
    };
    let pred = mk(&mut rng);
    let truth = mk(&mut rng);
    let err = finite_diff_check(
        |t, v| {
            let (p, q) = (v[0], v[1]);
            let polar = |t: &mut Tape, z: Var| {
                let re = t.slice(z, 0, k);
                let im = t.slice(z, k, k);
                let re2 = t.square(re);
                let im2 = t.square(im);
                let r2 = t.add(re2, im2);
                let r = t.sqrt_eps(r2, 1e-12);
                let logr = t.ln_eps(r, 1e-6);
                let phi = t.atan2(im, re);
                (logr, phi)
            };
            let (lr_p, ph_p) = polar(t, p);
            let (lr_q, ph_q) = polar(t, q);
            let dlr = t.sub(lr_p, lr_q);
            let amp = t.square(dlr);
            let dph = t.sub(ph_p, ph_q);
            let cosd = t.cos(dph);
            let neg = t.scale(cosd, -1.0);
            let one_minus = t.add_const(neg, &[1.0]);
            let two = t.scale(one_minus, 2.0);
            let both = t.add(amp, two);
            t.mean(both)
        },
        &[pred, truth],
        EPS,
    );
    assert!(err < TOL_COMPOSED, "polar mismatch: max rel grad error {err:.3e}");
}

#[test]
fn backward_accumulates_through_shared_nodes() {
    // y = x used twice: d/dx (x*x + 3x) = 2x + 3
    let mut tape = Tape::new();
    let x = tape.leaf(vec![1.7]);
    let sq = tape.mul(x, x);
    let lin = tape.scale(x, 3.0);
    let y = tape.add(sq, lin);
    let store = tape.backward(y);
    let g = store.get(x).expect("gradient reached the leaf");
    assert!((g[0] - (2.0 * 1.7 + 3.0)).abs() < 1e-12);
}

#[test]
fn truncate_discards_rollout_nodes() {
    let mut tape = Tape::new();
    let p = tape.leaf(vec![2.0, -1.0]);
    let mark = tape.mark();
    for _ in 0..3 {
        let x = tape.leaf(vec![0.5, 0.5]);
        let y = tape.mul(p, x);
        let loss = tape.sum(y);
        let store = tape.backward(loss);
        assert!(store.get(p).is_some());
        tape.truncate(mark);
    }
    assert_eq!(tape.node_count(), mark);
    assert_eq!(tape.value(p), &[2.0, -1.0]);
}

#[test]
fn grad_is_none_for_disconnected_nodes() {
    let mut tape = Tape::new();
    let a = tape.leaf(vec![1.0, 2.0]);
    let b = tape.leaf(vec![3.0]);
    let s = tape.sum(a);
    let store = tape.backward(s);
    assert!(store.get(a).is_some());
    assert!(store.get(b).is_none());
    assert_eq!(store.get_or_zeros(b, 1), vec![0.0]);
}
