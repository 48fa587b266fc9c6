//! Gradient contract for every tape operation: analytic gradients must agree
//! with central finite differences. Elementwise and linear-algebra ops are
//! held to 1e-6 relative error, normalization layers to 1e-5, and a composed
//! multi-layer network to 1e-4.

use corvit::gradcheck::{check_gradients, DEFAULT_STEP};
use corvit::rng::RngStream;
use corvit::tensor::tape::{Tape, Var};
use corvit::tensor::Tensor;
use corvit::{Result, Tensor as T};

const TOL_OP: f64 = 1e-6;
const TOL_NORM: f64 = 1e-5;
const TOL_COMPOSED: f64 = 1e-4;

fn rand_tensor(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(lo, hi)).collect();
    T::from_vec(shape.to_vec(), data).unwrap()
}

/// Random values kept away from zero so kinked ops (relu, max) stay on one
/// side of the kink across the finite-difference step.
fn rand_tensor_off_zero(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.uniform_in(0.05, 1.0);
            if rng.uniform() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    T::from_vec(shape.to_vec(), data).unwrap()
}

fn assert_grads(
    name: &str,
    leaves: &[Tensor],
    tol: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) {
    let report = check_gradients(leaves, &f, DEFAULT_STEP).unwrap();
    assert!(
        report.max_rel_err < tol,
        "{name}: max rel err {} at leaf {} index {} (analytic {}, numeric {})",
        report.max_rel_err,
        report.worst_leaf,
        report.worst_index,
        report.worst_analytic,
        report.worst_numeric
    );
}

#[test]
fn elementwise_binary_ops_with_broadcast() {
    let mut rng = RngStream::new(11, "gradcheck-binary", 0);
    let a = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[3], -2.0, 2.0);
    assert_grads("add broadcast", &[a.clone(), b.clone()], TOL_OP, |t, v| {
        let s = t.add(v[0], v[1])?;
        t.sum_all(s)
    });
    assert_grads("sub broadcast", &[a.clone(), b.clone()], TOL_OP, |t, v| {
        let s = t.sub(v[0], v[1])?;
        t.sum_all(s)
    });
    assert_grads("mul broadcast", &[a.clone(), b.clone()], TOL_OP, |t, v| {
        let s = t.mul(v[0], v[1])?;
        t.sum_all(s)
    });
    // divisor bounded away from zero
    let c = rand_tensor(&mut rng, &[2, 1], 0.5, 2.0);
    assert_grads("div broadcast", &[a, c], TOL_OP, |t, v| {
        let s = t.div(v[0], v[1])?;
        t.sum_all(s)
    });
}

#[test]
fn scalar_ops() {
    let mut rng = RngStream::new(12, "gradcheck-scalar", 0);
    let a = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    assert_grads("scale", std::slice::from_ref(&a), TOL_OP, |t, v| {
        let s = t.scale(v[0], -1.7)?;
        t.sum_all(s)
    });
    assert_grads("add_scalar then square", &[a], TOL_OP, |t, v| {
        let s = t.add_scalar(v[0], 0.3)?;
        let sq = t.mul(s, s)?;
        t.sum_all(sq)
    });
}

#[test]
fn matmul_2d_and_batched() {
    let mut rng = RngStream::new(13, "gradcheck-matmul", 0);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    // weight the output entries unequally so both factors get rich gradients
    let w = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    assert_grads("matmul 2d", &[a, b, w.clone()], TOL_OP, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        let weighted = t.mul(c, v[2])?;
        t.sum_all(weighted)
    });
    let a3 = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b3 = rand_tensor(&mut rng, &[2, 4, 2], -1.0, 1.0);
    let w3 = rand_tensor(&mut rng, &[2, 3, 2], -1.0, 1.0);
    assert_grads("matmul batched", &[a3, b3, w3], TOL_OP, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        let weighted = t.mul(c, v[2])?;
        t.sum_all(weighted)
    });
}

#[test]
fn conv2d_variants() {
    let mut rng = RngStream::new(14, "gradcheck-conv", 0);
    // 3x3 stride 1 pad 1 (the dense-layer shape)
    let x = rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    assert_grads("conv3x3 s1 p1", &[x, w], TOL_OP, |t, v| {
        let c = t.conv2d(v[0], v[1], 1, 1)?;
        let sq = t.mul(c, c)?;
        t.sum_all(sq)
    });
    // 1x1 (projection / transition shape)
    let x1 = rand_tensor(&mut rng, &[2, 6, 4, 4], -1.0, 1.0);
    let w1 = rand_tensor(&mut rng, &[3, 6, 1, 1], -0.5, 0.5);
    assert_grads("conv1x1", &[x1, w1], TOL_OP, |t, v| {
        let c = t.conv2d(v[0], v[1], 1, 0)?;
        let sq = t.mul(c, c)?;
        t.sum_all(sq)
    });
    // 7x7 stride 2 pad 3 (the stem shape)
    let xs = rand_tensor(&mut rng, &[1, 1, 9, 9], -1.0, 1.0);
    let ws = rand_tensor(&mut rng, &[2, 1, 7, 7], -0.3, 0.3);
    assert_grads("conv7x7 s2 p3", &[xs, ws], TOL_OP, |t, v| {
        let c = t.conv2d(v[0], v[1], 2, 3)?;
        let sq = t.mul(c, c)?;
        t.sum_all(sq)
    });
}

#[test]
fn pooling_ops() {
    let mut rng = RngStream::new(15, "gradcheck-pool", 0);
    let x = rand_tensor_off_zero(&mut rng, &[2, 2, 6, 6]);
    assert_grads("max_pool 3x3 s2 p1", std::slice::from_ref(&x), TOL_OP, |t, v| {
        let p = t.max_pool2d(v[0], 3, 2, 1)?;
        let sq = t.mul(p, p)?;
        t.sum_all(sq)
    });
    assert_grads("avg_pool 2x2 s2", &[x], TOL_OP, |t, v| {
        let p = t.avg_pool2d(v[0], 2, 2, 0)?;
        let sq = t.mul(p, p)?;
        t.sum_all(sq)
    });
}

#[test]
fn activations() {
    let mut rng = RngStream::new(16, "gradcheck-act", 0);
    let x = rand_tensor_off_zero(&mut rng, &[3, 4]);
    assert_grads("relu", std::slice::from_ref(&x), TOL_OP, |t, v| {
        let y = t.relu(v[0])?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    let xg = rand_tensor(&mut rng, &[3, 4], -3.0, 3.0);
    assert_grads("gelu", std::slice::from_ref(&xg), TOL_OP, |t, v| {
        let y = t.gelu(v[0])?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    assert_grads("sigmoid", &[xg], TOL_OP, |t, v| {
        let y = t.sigmoid(v[0])?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
}

#[test]
fn softmax_gradient() {
    let mut rng = RngStream::new(17, "gradcheck-softmax", 0);
    let x = rand_tensor(&mut rng, &[2, 5], -2.0, 2.0);
    let w = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
    assert_grads("softmax last axis", &[x, w], TOL_OP, |t, v| {
        let y = t.softmax(v[0], 1)?;
        let weighted = t.mul(y, v[1])?;
        t.sum_all(weighted)
    });
    let mut rng2 = RngStream::new(17, "gradcheck-softmax", 1);
    let x3 = rand_tensor(&mut rng2, &[2, 4, 3], -2.0, 2.0);
    let w3 = rand_tensor(&mut rng2, &[2, 4, 3], -1.0, 1.0);
    assert_grads("softmax middle axis", &[x3, w3], TOL_OP, |t, v| {
        let y = t.softmax(v[0], 1)?;
        let weighted = t.mul(y, v[1])?;
        t.sum_all(weighted)
    });
}

#[test]
fn normalization_layers() {
    let mut rng = RngStream::new(18, "gradcheck-norm", 0);
    let x = rand_tensor(&mut rng, &[3, 6], -2.0, 2.0);
    let gamma = rand_tensor(&mut rng, &[6], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[6], -0.5, 0.5);
    let w = rand_tensor(&mut rng, &[3, 6], -1.0, 1.0);
    assert_grads(
        "layer_norm",
        &[x, gamma, beta, w],
        TOL_NORM,
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let weighted = t.mul(y, v[3])?;
            t.sum_all(weighted)
        },
    );

    let x4 = rand_tensor(&mut rng, &[2, 4, 3, 3], -2.0, 2.0);
    let gamma4 = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    let beta4 = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    let w4 = rand_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
    assert_grads(
        "group_norm (2 groups)",
        &[x4.clone(), gamma4.clone(), beta4.clone(), w4.clone()],
        TOL_NORM,
        |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
            let weighted = t.mul(y, v[3])?;
            t.sum_all(weighted)
        },
    );
    assert_grads(
        "batch_norm (batch stats)",
        &[x4, gamma4, beta4, w4],
        TOL_NORM,
        |t, v| {
            let (y, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, None)?;
            let weighted = t.mul(y, v[3])?;
            t.sum_all(weighted)
        },
    );
}

#[test]
fn reductions_and_shape_ops() {
    let mut rng = RngStream::new(19, "gradcheck-shape", 0);
    let x = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    assert_grads("mean_all of square", std::slice::from_ref(&x), TOL_OP, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.mean_all(sq)
    });
    assert_grads("sum_axis then mean", std::slice::from_ref(&x), TOL_OP, |t, v| {
        let s = t.sum_axis(v[0], 1)?;
        let sq = t.mul(s, s)?;
        t.mean_all(sq)
    });
    assert_grads("mean_axis then sum", std::slice::from_ref(&x), TOL_OP, |t, v| {
        let s = t.mean_axis(v[0], 2)?;
        let sq = t.mul(s, s)?;
        t.sum_all(sq)
    });
    assert_grads("reshape+permute", std::slice::from_ref(&x), TOL_OP, |t, v| {
        let r = t.reshape(v[0], vec![6, 4])?;
        let p = t.permute(r, &[1, 0])?;
        let sq = t.mul(p, p)?;
        t.sum_all(sq)
    });
    let y = rand_tensor(&mut rng, &[2, 2, 4], -2.0, 2.0);
    assert_grads("concat+narrow", &[x.clone(), y], TOL_OP, |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let sliced = t.narrow(c, 1, 1, 3)?;
        let sq = t.mul(sliced, sliced)?;
        t.sum_all(sq)
    });
    let small = rand_tensor(&mut rng, &[1, 3, 1], -2.0, 2.0);
    assert_grads("broadcast_to", &[small], TOL_OP, |t, v| {
        let b = t.broadcast_to(v[0], &[2, 3, 4])?;
        let sq = t.mul(b, b)?;
        t.sum_all(sq)
    });
}

#[test]
fn loss_functions() {
    let mut rng = RngStream::new(20, "gradcheck-loss", 0);
    let logits = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
    let targets: Vec<f64> = (0..12).map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 }).collect();
    let tg = targets.clone();
    assert_grads("bce_with_logits", std::slice::from_ref(&logits), TOL_OP, move |t, v| {
        t.bce_with_logits(v[0], &tg)
    });
    assert_grads("cross_entropy", std::slice::from_ref(&logits), TOL_OP, |t, v| {
        t.cross_entropy(v[0], &[0, 2, 1, 2], None)
    });
    assert_grads("cross_entropy weighted", &[logits], TOL_OP, |t, v| {
        t.cross_entropy(v[0], &[0, 2, 1, 2], Some(&[0.5, 1.0, 2.0]))
    });
}

/// A miniature of the real network: conv -> group norm -> relu -> pool ->
/// flatten -> linear -> softmax attention mix -> cross-entropy.
#[test]
fn composed_network_gradient() {
    let mut rng = RngStream::new(21, "gradcheck-composed", 0);
    let x = rand_tensor(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);
    let w_conv = rand_tensor(&mut rng, &[4, 1, 3, 3], -0.4, 0.4);
    let gamma = rand_tensor(&mut rng, &[4], 0.8, 1.2);
    let beta = rand_tensor(&mut rng, &[4], -0.1, 0.1);
    let w_fc = rand_tensor(&mut rng, &[4 * 4 * 4, 3], -0.3, 0.3);
    let b_fc = rand_tensor(&mut rng, &[3], -0.1, 0.1);
    assert_grads(
        "composed conv network",
        &[x, w_conv, gamma, beta, w_fc, b_fc],
        TOL_COMPOSED,
        |t, v| {
            let c = t.conv2d(v[0], v[1], 1, 1)?;
            let n = t.group_norm(c, v[2], v[3], 2, 1e-5)?;
            let a = t.relu(n)?;
            let p = t.avg_pool2d(a, 2, 2, 0)?;
            let flat = t.reshape(p, vec![2, 4 * 4 * 4])?;
            let z = t.matmul(flat, v[4])?;
            let z = t.add(z, v[5])?;
            t.cross_entropy(z, &[1, 0], None)
        },
    );
}

/// Self-attention block shaped exactly like one encoder head group.
#[test]
fn attention_block_gradient() {
    let mut rng = RngStream::new(22, "gradcheck-attn", 0);
    let toks = 5usize;
    let d = 8usize;
    let heads = 2usize;
    let hd = d / heads;
    let x = rand_tensor(&mut rng, &[1, toks, d], -1.0, 1.0);
    let wq = rand_tensor(&mut rng, &[d, d], -0.4, 0.4);
    let wk = rand_tensor(&mut rng, &[d, d], -0.4, 0.4);
    let wv = rand_tensor(&mut rng, &[d, d], -0.4, 0.4);
    assert_grads(
        "single attention block",
        &[x, wq, wk, wv],
        TOL_COMPOSED,
        move |t, v| {
            let flat = t.reshape(v[0], vec![toks, d])?;
            let q = t.matmul(flat, v[1])?;
            let k = t.matmul(flat, v[2])?;
            let val = t.matmul(flat, v[3])?;
            // split into heads: (toks, heads, hd) -> (heads, toks, hd)
            let split = |t: &mut Tape, m: Var| -> Result<Var> {
                let r = t.reshape(m, vec![toks, heads, hd])?;
                t.permute(r, &[1, 0, 2])
            };
            let qh = split(t, q)?;
            let kh = split(t, k)?;
            let vh = split(t, val)?;
            let kt = t.transpose(kh, 1, 2)?;
            let scores = t.matmul(qh, kt)?;
            let scaled = t.scale(scores, 1.0 / (hd as f64).sqrt())?;
            let attn = t.softmax(scaled, 2)?;
            let mixed = t.matmul(attn, vh)?;
            let sq = t.mul(mixed, mixed)?;
            t.sum_all(sq)
        },
    );
}
