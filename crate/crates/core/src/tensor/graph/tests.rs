use super::*;
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

// ---- f64 reference implementations (independent of the graph code) ----

fn o_matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn o_silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn o_gelu(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn o_rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let d = gain.len();
    let rows = x.len() / d;
    let mut out = vec![0f64; x.len()];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = xr[j] * inv * gain[j];
        }
    }
    out
}

fn o_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn o_softmax_ce(logits: &[f64], vocab: usize, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (t, &tgt) in targets.iter().enumerate() {
        let row = &logits[t * vocab..(t + 1) * vocab];
        let p = o_softmax_row(row);
        total += -p[tgt].ln();
    }
    total / targets.len() as f64
}

fn o_rope(x: &[f64], rows: usize, dh: usize, base: f64) -> Vec<f64> {
    let half = dh / 2;
    let mut out = vec![0f64; x.len()];
    for t in 0..rows {
        for i in 0..half {
            let ang = t as f64 * base.powf(-2.0 * i as f64 / dh as f64);
            let (s, c) = ang.sin_cos();
            let (x0, x1) = (x[t * dh + i], x[t * dh + i + half]);
            out[t * dh + i] = x0 * c - x1 * s;
            out[t * dh + i + half] = x0 * s + x1 * c;
        }
    }
    out
}

// ---- finite-difference machinery ----

const FD_STEP: f64 = 1e-3;

fn central_fd(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += FD_STEP;
    let mut xm = x.to_vec();
    xm[i] -= FD_STEP;
    (f(&xp) - f(&xm)) / (2.0 * FD_STEP)
}

fn assert_grad_close(analytic: &[f32], x: &[f64], f: &mut dyn FnMut(&[f64]) -> f64, tol: f64) {
    assert_eq!(analytic.len(), x.len());
    for i in 0..x.len() {
        let fd = central_fd(f, x, i);
        let g = analytic[i] as f64;
        let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-6);
        assert!(
            rel <= tol,
            "grad[{i}] = {g}, fd = {fd}, rel err {rel} > {tol}"
        );
    }
}

fn randv(rng: &mut ChaCha20Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn as64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

// ---- forward examples ----

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.input(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.input(Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0]);
}

#[test]
fn matmul_row_times_col() {
    let mut g = Graph::new();
    let a = g.input(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.input(Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(vec![2, 3]));
    let b = g.input(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "message was: {msg}");
}

#[test]
fn add_and_silu_basics() {
    let mut g = Graph::new();
    let a = g.input(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
    let b = g.input(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);

    let z = g.input(Tensor::scalar(0.0));
    let sz = g.silu(z);
    assert_eq!(g.value(sz).data(), &[0.0]);

    let c = g.input(Tensor::zeros(vec![3]));
    assert!(matches!(
        g.add(a, c),
        Err(TensorError::DimMismatch { op: "add", .. })
    ));
}

#[test]
fn add_scalar_broadcast() {
    let mut g = Graph::new();
    let a = g.input(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.input(Tensor::scalar(10.0));
    let out = g.add(a, s).unwrap();
    assert_eq!(g.value(out).data(), &[11.0, 12.0, 13.0]);
}

#[test]
fn rmsnorm_constant_row() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![4], vec![2.0, 2.0, 2.0, 2.0]).unwrap());
    let gain = g.input(Tensor::full(vec![4], 1.0));
    let y = g.rmsnorm(x, gain, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn rmsnorm_zero_input_stays_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![2, 4]));
    let gain = g.input(Tensor::full(vec![4], 1.0));
    let y = g.rmsnorm(x, gain, 1e-6).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn rmsnorm_gain_mismatch_errors() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![2, 4]));
    let gain = g.input(Tensor::full(vec![3], 1.0));
    assert!(matches!(
        g.rmsnorm(x, gain, 1e-6),
        Err(TensorError::DimMismatch { op: "rmsnorm", .. })
    ));
}

#[test]
fn softmax_ce_uniform_logits() {
    let mut g = Graph::new();
    let logits = g.input(Tensor::zeros(vec![3, 4]));
    let loss = g.softmax_ce(logits, &[0, 1, 2]).unwrap();
    let expect = (4f64).ln() as f32;
    assert!((g.value(loss).data()[0] - expect).abs() < 1e-6);
}

#[test]
fn softmax_ce_confident_logit() {
    let mut g = Graph::new();
    let mut data = vec![0.0; 5];
    data[2] = 1e4;
    let logits = g.input(Tensor::from_vec(vec![1, 5], data).unwrap());
    let loss = g.softmax_ce(logits, &[2]).unwrap();
    assert!(g.value(loss).data()[0].abs() < 1e-6);
}

#[test]
fn softmax_ce_target_out_of_range() {
    let mut g = Graph::new();
    let logits = g.input(Tensor::zeros(vec![2, 4]));
    assert!(matches!(
        g.softmax_ce(logits, &[0, 4]),
        Err(TensorError::TargetOutOfRange { target: 4, .. })
    ));
}

#[test]
fn softmax_ce_matches_f64_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let data = randv(&mut rng, 35);
    let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
    let mut g = Graph::new();
    let logits = g.input(Tensor::from_vec(vec![5, 7], data.clone()).unwrap());
    let loss = g.softmax_ce(logits, &targets).unwrap();
    let oracle = o_softmax_ce(&as64(&data), 7, &targets);
    let got = g.value(loss).data()[0] as f64;
    assert!(
        (got - oracle).abs() <= 1e-6,
        "got {got}, oracle {oracle}"
    );
}

// ---- backward examples ----

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let w = g.input(Tensor::from_vec(vec![2, 3], vec![5.0; 6]).unwrap().with_grad());
    let loss = g.sum_all(w);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_mse_hand_chain_rule() {
    // loss = mse(w*x, 0) with w=2, x=3: d/dw (6)^2 = 2*6*3 = 36.
    let mut g = Graph::new();
    let w = g.input(Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap().with_grad());
    let x = g.input(Tensor::from_vec(vec![1, 1], vec![3.0]).unwrap());
    let y = g.input(Tensor::zeros(vec![1, 1]));
    let wx = g.matmul(w, x).unwrap();
    let loss = g.mse(wx, y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[36.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let w = g.input(Tensor::zeros(vec![2, 2]).with_grad());
    let y = g.scale(w, 2.0);
    assert!(matches!(
        g.backward(y),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let used = g.input(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
    let unused = g.input(Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap().with_grad());
    let loss = g.sum_all(used);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
}

// ---- finite-difference checks, one per registered op ----

#[test]
fn fd_matmul_sum_loss() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let a = randv(&mut rng, 12);
    let b = randv(&mut rng, 8);
    let run = |av: &[f32], bv: &[f32]| -> (f32, Option<Vec<f32>>, Option<Vec<f32>>) {
        let mut g = Graph::new();
        let va = g.input(Tensor::from_vec(vec![3, 4], av.to_vec()).unwrap().with_grad());
        let vb = g.input(Tensor::from_vec(vec![4, 2], bv.to_vec()).unwrap().with_grad());
        let c = g.matmul(va, vb).unwrap();
        let loss = g.sum_all(c);
        let grads = g.backward(loss).unwrap();
        (
            g.value(loss).data()[0],
            grads.get(va).map(|t| t.data().to_vec()),
            grads.get(vb).map(|t| t.data().to_vec()),
        )
    };
    let (_, ga, gb) = run(&a, &b);
    let b64 = as64(&b);
    let mut fa = |x: &[f64]| o_matmul(x, 3, 4, &b64, 2).iter().sum::<f64>();
    assert_grad_close(&ga.unwrap(), &as64(&a), &mut fa, 1e-4);
    let a64 = as64(&a);
    let mut fb = |x: &[f64]| o_matmul(&a64, 3, 4, x, 2).iter().sum::<f64>();
    assert_grad_close(&gb.unwrap(), &as64(&b), &mut fb, 1e-4);
}

/// Runs `build` over a leaf tensor and checks its gradient against a
/// weighted-sum loss recomputed through the f64 oracle `reference`.
fn fd_check_unary(
    shape: Vec<usize>,
    x: Vec<f32>,
    weights: Vec<f32>,
    build: impl Fn(&mut Graph, Value) -> Value,
    reference: impl Fn(&[f64]) -> Vec<f64>,
    tol: f64,
) {
    let mut g = Graph::new();
    let vx = g.input(Tensor::from_vec(shape, x.clone()).unwrap().with_grad());
    let out = build(&mut g, vx);
    let w = g.input(Tensor::from_vec(g.value(out).shape().to_vec(), weights.clone()).unwrap());
    let weighted = g.mul(out, w).unwrap();
    let loss = g.sum_all(weighted);
    let grads = g.backward(loss).unwrap();
    let w64 = as64(&weights);
    let mut f = |xv: &[f64]| {
        reference(xv)
            .iter()
            .zip(&w64)
            .map(|(y, wv)| y * wv)
            .sum::<f64>()
    };
    assert_grad_close(grads.get(vx).unwrap().data(), &as64(&x), &mut f, tol);
}

#[test]
fn fd_silu_at_one_and_random() {
    // Pointwise check at exactly x = 1.
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(1.0).with_grad());
    let y = g.silu(x);
    let loss = g.sum_all(y);
    let grads = g.backward(loss).unwrap();
    let mut f = |xv: &[f64]| o_silu(xv[0]);
    let fd = central_fd(&mut f, &[1.0], 0);
    let got = grads.get(x).unwrap().data()[0] as f64;
    assert!((got - fd).abs() <= 1e-5, "grad {got} vs fd {fd}");

    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let xs = randv(&mut rng, 6);
    let ws = randv(&mut rng, 6);
    fd_check_unary(
        vec![6],
        xs,
        ws,
        |g, v| g.silu(v),
        |x| x.iter().map(|&v| o_silu(v)).collect(),
        1e-4,
    );
}

#[test]
fn fd_gelu() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let xs = randv(&mut rng, 6);
    let ws = randv(&mut rng, 6);
    fd_check_unary(
        vec![6],
        xs,
        ws,
        |g, v| g.gelu(v),
        |x| x.iter().map(|&v| o_gelu(v)).collect(),
        1e-4,
    );
}

#[test]
fn fd_scale() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let xs = randv(&mut rng, 5);
    let ws = randv(&mut rng, 5);
    fd_check_unary(
        vec![5],
        xs,
        ws,
        |g, v| g.scale(v, -1.7),
        |x| x.iter().map(|&v| v * -1.7).collect(),
        1e-4,
    );
}

#[test]
fn fd_add_mul_with_broadcast() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let xs = randv(&mut rng, 4);
    let other = randv(&mut rng, 4);
    let ws = randv(&mut rng, 4);
    let o = other.clone();
    fd_check_unary(
        vec![4],
        xs.clone(),
        ws.clone(),
        |g, v| {
            let c = g.input(Tensor::from_vec(vec![4], o.clone()).unwrap());
            let s = g.add(v, c).unwrap();
            let m = g.mul(s, c).unwrap();
            m
        },
        |x| {
            x.iter()
                .zip(&other)
                .map(|(&v, &c)| (v + c as f64) * c as f64)
                .collect()
        },
        1e-4,
    );

    // Scalar leaf broadcast over a full tensor: grad reduces by summation.
    let mut g = Graph::new();
    let s = g.input(Tensor::scalar(0.5).with_grad());
    let full = g.input(Tensor::from_vec(vec![4], xs.clone()).unwrap());
    let prod = g.mul(full, s).unwrap();
    let loss = g.sum_all(prod);
    let grads = g.backward(loss).unwrap();
    let expect: f64 = xs.iter().map(|&v| v as f64).sum();
    let got = grads.get(s).unwrap().data()[0] as f64;
    assert!((got - expect).abs() < 1e-4);
}

#[test]
fn fd_rmsnorm() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let xs = randv(&mut rng, 8);
    let gain = randv(&mut rng, 4);
    let ws = randv(&mut rng, 8);
    let g64 = as64(&gain);
    let gc = gain.clone();
    fd_check_unary(
        vec![2, 4],
        xs.clone(),
        ws.clone(),
        |g, v| {
            let gv = g.input(Tensor::from_vec(vec![4], gc.clone()).unwrap());
            g.rmsnorm(v, gv, 1e-5).unwrap()
        },
        |x| o_rmsnorm(x, &g64, 1e-5),
        1e-4,
    );

    // Gradient w.r.t. the gain as well.
    let mut g = Graph::new();
    let vx = g.input(Tensor::from_vec(vec![2, 4], xs.clone()).unwrap());
    let vg = g.input(Tensor::from_vec(vec![4], gain.clone()).unwrap().with_grad());
    let y = g.rmsnorm(vx, vg, 1e-5).unwrap();
    let w = g.input(Tensor::from_vec(vec![2, 4], ws.clone()).unwrap());
    let wy = g.mul(y, w).unwrap();
    let loss = g.sum_all(wy);
    let grads = g.backward(loss).unwrap();
    let x64 = as64(&xs);
    let w64 = as64(&ws);
    let mut f = |gv: &[f64]| {
        o_rmsnorm(&x64, gv, 1e-5)
            .iter()
            .zip(&w64)
            .map(|(y, wv)| y * wv)
            .sum::<f64>()
    };
    assert_grad_close(grads.get(vg).unwrap().data(), &as64(&gain), &mut f, 1e-4);
}

#[test]
fn fd_transpose_reshape_slice_concat() {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let xs = randv(&mut rng, 12);
    let ws = randv(&mut rng, 12);
    fd_check_unary(
        vec![3, 4],
        xs,
        ws,
        |g, v| {
            let t = g.transpose(v).unwrap(); // [4,3]
            let r = g.reshape(t, vec![3, 4]).unwrap();
            let left = g.slice_cols(r, 0, 2).unwrap();
            let right = g.slice_cols(r, 2, 2).unwrap();
            g.concat_cols(&[right, left]).unwrap()
        },
        |x| {
            // transpose [3x4] -> [4x3], reshape row-major to [3x4], swap halves
            let mut t = vec![0f64; 12];
            for i in 0..3 {
                for j in 0..4 {
                    t[j * 3 + i] = x[i * 4 + j];
                }
            }
            let mut out = vec![0f64; 12];
            for r in 0..3 {
                for j in 0..2 {
                    out[r * 4 + j] = t[r * 4 + 2 + j];
                    out[r * 4 + 2 + j] = t[r * 4 + j];
                }
            }
            out
        },
        1e-4,
    );
}

#[test]
fn fd_rope() {
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let xs = randv(&mut rng, 12);
    let ws = randv(&mut rng, 12);
    fd_check_unary(
        vec![3, 4],
        xs,
        ws,
        |g, v| g.rope(v, 10000.0).unwrap(),
        |x| o_rope(x, 3, 4, 10000.0),
        1e-4,
    );
}

#[test]
fn fd_softmax_rows() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let xs = randv(&mut rng, 10);
    let ws = randv(&mut rng, 10);
    fd_check_unary(
        vec![2, 5],
        xs,
        ws,
        |g, v| g.softmax_rows(v).unwrap(),
        |x| {
            let mut out = Vec::new();
            for r in 0..2 {
                out.extend(o_softmax_row(&x[r * 5..(r + 1) * 5]));
            }
            out
        },
        1e-4,
    );
}

#[test]
fn fd_softmax_ce() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let xs = randv(&mut rng, 12);
    let targets = vec![1usize, 3, 0];
    let mut g = Graph::new();
    let vx = g.input(Tensor::from_vec(vec![3, 4], xs.clone()).unwrap().with_grad());
    let loss = g.softmax_ce(vx, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut f = |x: &[f64]| o_softmax_ce(x, 4, &targets);
    assert_grad_close(grads.get(vx).unwrap().data(), &as64(&xs), &mut f, 1e-4);
}

#[test]
fn fd_sse() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let xs = randv(&mut rng, 6);
    let ys = randv(&mut rng, 6);
    let mut g = Graph::new();
    let vx = g.input(Tensor::from_vec(vec![6], xs.clone()).unwrap().with_grad());
    let vy = g.input(Tensor::from_vec(vec![6], ys.clone()).unwrap());
    let loss = g.sse(vx, vy).unwrap();
    let grads = g.backward(loss).unwrap();
    let y64 = as64(&ys);
    let mut f = |x: &[f64]| {
        x.iter()
            .zip(&y64)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    assert_grad_close(grads.get(vx).unwrap().data(), &as64(&xs), &mut f, 1e-4);
}

// ---- properties ----

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha20Rng::seed_from_u64(20);
    let xs = randv(&mut rng, 24);
    let run = || {
        let mut g = Graph::new();
        let v = g.input(Tensor::from_vec(vec![4, 6], xs.clone()).unwrap());
        let gain = g.input(Tensor::full(vec![6], 1.0));
        let n = g.rmsnorm(v, gain, 1e-5).unwrap();
        let s = g.silu(n);
        let sm = g.softmax_rows(s).unwrap();
        g.value(sm).clone()
    };
    assert!(run().bit_eq(&run()));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_ce_shift_invariant(
            // Grid-valued logits and integer shifts keep `logit + shift`
            // exactly representable, so only the softmax math is tested.
            grid in proptest::collection::vec(-8192i32..8192, 12),
            shift_i in -50i32..50,
            t0 in 0usize..4, t1 in 0usize..4, t2 in 0usize..4,
        ) {
            let logits: Vec<f32> = grid.iter().map(|&v| v as f32 / 1024.0).collect();
            let shift = shift_i as f32;
            let targets = vec![t0, t1, t2];
            let mut g = Graph::new();
            let a = g.input(Tensor::from_vec(vec![3, 4], logits.clone()).unwrap());
            let la = g.softmax_ce(a, &targets).unwrap();
            let shifted: Vec<f32> = logits.iter().map(|&v| v + shift).collect();
            let b = g.input(Tensor::from_vec(vec![3, 4], shifted).unwrap());
            let lb = g.softmax_ce(b, &targets).unwrap();
            let (va, vb) = (g.value(la).data()[0], g.value(lb).data()[0]);
            prop_assert!((va - vb).abs() <= 1e-6, "{va} vs {vb}");
        }
    }
}
