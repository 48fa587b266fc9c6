//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node; [`Var`] is a cheap copyable
//! handle into that record. Calling [`Tape::backward`] on a scalar loss walks
//! the record in reverse and accumulates gradients for every node that
//! requires them. A tape is single-use: after `backward` it refuses further
//! work.
//!
//! All reductions run in a fixed sequential order, so gradients (and
//! therefore whole training runs) are bit-reproducible.

use super::kernels as k;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    // the offset plays no role in backward; kept for tape debugging
    AddScalar { x: usize, _offset: f64 },
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        eps: f64,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        // true when mean/var are fixed statistics rather than batch moments
        frozen_stats: bool,
    },
    SumAll(usize),
    MeanAll(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    Reshape(usize),
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    BroadcastTo(usize),
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        classes: Vec<usize>,
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Operation record for reverse-mode differentiation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    /// A fresh tape. With `grad_enabled = false` the tape records shapes and
    /// values only, never tracks gradients, and may free intermediate
    /// activations via [`Tape::release_except`].
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled,
            consumed: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn ensure_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data: Some(data),
            requires_grad: requires_grad && self.grad_enabled,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn d(&self, id: usize) -> &[f64] {
        self.nodes[id]
            .data
            .as_deref()
            .expect("tensor data was released from the tape")
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Register a tensor as a leaf. Its `requires_grad` flag is honoured only
    /// when the tape itself has gradients enabled.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.shape().to_vec(), t.data().to_vec(), rg, Op::Leaf)
    }

    /// Register a leaf directly from parts.
    pub fn leaf_parts(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "leaf",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Register a non-trainable constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].shape.iter().product()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.d(v.0)
    }

    pub fn requires_grad_of(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    /// Copy a recorded value out as a standalone tensor.
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.d(v.0).to_vec())
            .expect("recorded node has consistent shape")
    }

    /// Free the stored values of intermediate nodes that are not listed in
    /// `keep`. Only available when gradients are disabled (otherwise backward
    /// would need those values); leaves are always preserved.
    pub fn release_except(&mut self, keep: &[Var]) {
        if self.grad_enabled {
            return;
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if keep.iter().any(|v| v.0 == id) {
                continue;
            }
            node.data = None;
        }
    }

    // ---- elementwise binary ops (with trailing-dimension broadcasting) ----

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        self.ensure_open()?;
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = k::broadcast_shapes(ash, bsh).ok_or_else(|| Error::ShapeMismatch {
            op: op_name,
            lhs: ash.clone(),
            rhs: bsh.clone(),
        })?;
        let data = k::zip_broadcast(self.d(a.0), ash, self.d(b.0), bsh, &out_shape, f);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out_shape, data, rg, make(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.ensure_open()?;
        let data = self.d(a.0).iter().map(|&x| x * c).collect();
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.rg(a.0));
        Ok(self.push(shape, data, rg, Op::Scale(a.0, c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.ensure_open()?;
        let data = self.d(a.0).iter().map(|&x| x + c).collect();
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.rg(a.0));
        Ok(self.push(shape, data, rg, Op::AddScalar { x: a.0, _offset: c }))
    }

    // ---- matmul ----

    /// Matrix product on the two trailing dimensions. Leading (batch)
    /// dimensions must match exactly on both operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_open()?;
        let ash = self.nodes[a.0].shape.clone();
        let bsh = self.nodes[b.0].shape.clone();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() < 2 || bsh.len() != ash.len() {
            return Err(mismatch());
        }
        let nb = ash.len() - 2;
        if ash[..nb] != bsh[..nb] || ash[nb + 1] != bsh[nb] {
            return Err(mismatch());
        }
        let (m, kk, n) = (ash[nb], ash[nb + 1], bsh[nb + 1]);
        let batch: usize = ash[..nb].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.d(a.0);
            let bd = self.d(b.0);
            for bi in 0..batch {
                k::matmul_acc(
                    &ad[bi * m * kk..(bi + 1) * m * kk],
                    &bd[bi * kk * n..(bi + 1) * kk * n],
                    m,
                    kk,
                    n,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut out_shape = ash[..nb].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out_shape, out, rg, Op::Matmul(a.0, b.0)))
    }

    // ---- convolution and pooling ----

    /// 2-D convolution: input (N, C, H, W), square weight (O, C, K, K).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.ensure_open()?;
        let xsh = self.nodes[x.0].shape.clone();
        let wsh = self.nodes[w.0].shape.clone();
        if xsh.len() != 4 || wsh.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xsh,
                rhs: wsh,
            });
        }
        if wsh[2] != wsh[3] {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be square, got {}x{}", wsh[2], wsh[3]),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if xsh[1] != wsh[1] {
            return Err(Error::ChannelMismatch {
                input: xsh[1],
                weight: wsh[1],
            });
        }
        let (n, c, h, w_in) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let (o, kernel) = (wsh[0], wsh[2]);
        let (oh, ow) = match (
            k::conv_out_size(h, kernel, stride, padding),
            k::conv_out_size(w_in, kernel, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::NonPositiveOutput {
                    input: xsh,
                    kernel,
                    stride,
                    padding,
                })
            }
        };
        let col = k::im2col(self.d(x.0), n, c, h, w_in, kernel, stride, padding, oh, ow);
        let ckk = c * kernel * kernel;
        let rows = n * oh * ow;
        let wt = k::transpose_2d(self.d(w.0), o, ckk);
        let out_mat = k::matmul(&col, &wt, rows, ckk, o);
        drop(col);
        // reorder (n, oh, ow, o) -> (n, o, oh, ow)
        let hw = oh * ow;
        let mut out = vec![0.0; n * o * hw];
        for ni in 0..n {
            for p in 0..hw {
                let src = (ni * hw + p) * o;
                for oi in 0..o {
                    out[(ni * o + oi) * hw + p] = out_mat[src + oi];
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(w.0);
        Ok(self.push(
            vec![n, o, oh, ow],
            out,
            rg,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                padding,
            },
        ))
    }

    fn pool_shape(&self, x: Var, op: &'static str, kernel: usize, stride: usize, padding: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let xsh = &self.nodes[x.0].shape;
        if xsh.len() != 4 {
            return Err(Error::invalid(op, format!("expected rank-4 input, got shape {xsh:?}")));
        }
        if stride == 0 || kernel == 0 {
            return Err(Error::invalid(op, "kernel and stride must be positive"));
        }
        let (oh, ow) = match (
            k::conv_out_size(xsh[2], kernel, stride, padding),
            k::conv_out_size(xsh[3], kernel, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::NonPositiveOutput {
                    input: xsh.clone(),
                    kernel,
                    stride,
                    padding,
                })
            }
        };
        Ok((xsh[0], xsh[1], xsh[2], xsh[3], oh, ow))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.ensure_open()?;
        let (n, c, h, w, oh, ow) = self.pool_shape(x, "max_pool2d", kernel, stride, padding)?;
        let xd = self.d(x.0);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![usize::MAX; n * c * oh * ow];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let out_idx = plane * oh * ow + oy * ow + ox;
                    if best_idx != usize::MAX {
                        out[out_idx] = best;
                        argmax[out_idx] = best_idx;
                    }
                }
            }
        }
        let rg = self.rg(x.0);
        if !(rg && self.grad_enabled) {
            argmax.clear();
        }
        Ok(self.push(vec![n, c, oh, ow], out, rg, Op::MaxPool2d { x: x.0, argmax }))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.ensure_open()?;
        let (n, c, h, w, oh, ow) = self.pool_shape(x, "avg_pool2d", kernel, stride, padding)?;
        let xd = self.d(x.0);
        let inv = 1.0 / (kernel * kernel) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xd[base + iy as usize * w + ix as usize];
                        }
                    }
                    out[plane * oh * ow + oy * ow + ox] = acc * inv;
                }
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(
            vec![n, c, oh, ow],
            out,
            rg,
            Op::AvgPool2d {
                x: x.0,
                kernel,
                stride,
                padding,
            },
        ))
    }

    // ---- activations ----

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        make: impl Fn(usize) -> Op,
    ) -> Result<Var> {
        self.ensure_open()?;
        let data = self.d(a.0).iter().map(|&x| f(x)).collect();
        let (shape, rg) = (self.nodes[a.0].shape.clone(), self.rg(a.0));
        Ok(self.push(shape, data, rg, make(a.0)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, k::gelu, Op::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, k::sigmoid, Op::Sigmoid)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.ensure_open()?;
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.d(a.0);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(xd[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xd[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(shape, out, rg, Op::Softmax { x: a.0, axis }))
    }

    // ---- normalization ----

    /// Layer normalization over the last dimension; `gamma`/`beta` have that
    /// dimension's length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.ensure_open()?;
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "input must have rank >= 1"))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].shape != [d] {
                return Err(Error::invalid(
                    "layer_norm",
                    format!("{name} must have shape [{d}], got {:?}", self.nodes[v.0].shape),
                ));
            }
        }
        let xd = self.d(x.0);
        let gd = self.d(gamma.0);
        let bd = self.d(beta.0);
        let rows = xd.len() / d;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_s = 1.0 / (var + eps).sqrt();
            let out_row = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                out_row[j] = (row[j] - mean) * inv_s * gd[j] + bd[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        ))
    }

    /// Group normalization over (N, C, H, W): statistics per sample per group
    /// of `C / groups` channels.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        self.ensure_open()?;
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 4 {
            return Err(Error::invalid(
                "group_norm",
                format!("expected rank-4 input, got shape {shape:?}"),
            ));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(
                "group_norm",
                format!("{groups} groups do not divide {c} channels"),
            ));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].shape != [c] {
                return Err(Error::invalid(
                    "group_norm",
                    format!("{name} must have shape [{c}], got {:?}", self.nodes[v.0].shape),
                ));
            }
        }
        let cpg = c / groups;
        let m = cpg * h * w;
        let hw = h * w;
        let xd = self.d(x.0);
        let gd = self.d(gamma.0);
        let bd = self.d(beta.0);
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for gi in 0..groups {
                let base = (ni * c + gi * cpg) * hw;
                let grp = &xd[base..base + m];
                let mean = grp.iter().sum::<f64>() / m as f64;
                let var = grp.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let inv_s = 1.0 / (var + eps).sqrt();
                for j in 0..m {
                    let ch = gi * cpg + j / hw;
                    out[base + j] = (grp[j] - mean) * inv_s * gd[ch] + bd[ch];
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                eps,
            },
        ))
    }

    /// Batch normalization over (N, C, H, W). With `stats = None` the batch
    /// moments are used (training mode) and returned; with `stats =
    /// Some((mean, var))` those fixed statistics are used instead.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.ensure_open()?;
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 4 {
            return Err(Error::invalid(
                "batch_norm",
                format!("expected rank-4 input, got shape {shape:?}"),
            ));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].shape != [c] {
                return Err(Error::invalid(
                    "batch_norm",
                    format!("{name} must have shape [{c}], got {:?}", self.nodes[v.0].shape),
                ));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let xd = self.d(x.0);
        let frozen_stats = stats.is_some();
        let (mean, var) = match stats {
            Some((mu, va)) => {
                if mu.len() != c || va.len() != c {
                    return Err(Error::invalid(
                        "batch_norm",
                        format!("running stats must have length {c}"),
                    ));
                }
                (mu.to_vec(), va.to_vec())
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for j in 0..hw {
                            acc += xd[base + j];
                        }
                    }
                    let mu = acc / m as f64;
                    let mut vacc = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for j in 0..hw {
                            let dv = xd[base + j] - mu;
                            vacc += dv * dv;
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = vacc / m as f64;
                }
                (mean, var)
            }
        };
        let gd = self.d(gamma.0);
        let bd = self.d(beta.0);
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let inv_s = 1.0 / (var[ci] + eps).sqrt();
                for j in 0..hw {
                    out[base + j] = (xd[base + j] - mean[ci]) * inv_s * gd[ci] + bd[ci];
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let v = self.push(
            shape,
            out,
            rg,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
                mean: mean.clone(),
                var: var.clone(),
                frozen_stats,
            },
        );
        Ok((v, mean, var))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.ensure_open()?;
        let s = self.d(a.0).iter().sum();
        let rg = self.rg(a.0);
        Ok(self.push(vec![1], vec![s], rg, Op::SumAll(a.0)))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.ensure_open()?;
        let n = self.numel(a);
        if n == 0 {
            return Err(Error::invalid("mean_all", "input is empty"));
        }
        let s = self.d(a.0).iter().sum::<f64>() / n as f64;
        let rg = self.rg(a.0);
        Ok(self.push(vec![1], vec![s], rg, Op::MeanAll(a.0)))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        self.ensure_open()?;
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: if mean { "mean_axis" } else { "sum_axis" },
                axis,
                shape,
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.d(a.0);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &x) in dst.iter_mut().zip(&xd[base..base + inner]) {
                    *d += x;
                }
            }
        }
        if mean {
            for v in out.iter_mut() {
                *v *= scale;
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(a.0);
        let op = if mean {
            Op::MeanAxis { x: a.0, axis }
        } else {
            Op::SumAxis { x: a.0, axis }
        };
        Ok(self.push(out_shape, out, rg, op))
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean along `axis`, keeping it as a size-1 dimension.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.ensure_open()?;
        let numel: usize = shape.iter().product();
        if numel != self.numel(a) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.d(a.0).to_vec();
        let rg = self.rg(a.0);
        Ok(self.push(shape, data, rg, Op::Reshape(a.0)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.ensure_open()?;
        let in_shape = self.nodes[a.0].shape.clone();
        let nd = in_shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&ax| ax >= nd || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::invalid(
                "permute",
                format!("axes {axes:?} are not a permutation of 0..{nd}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
        let in_strides = strides_of(&in_shape);
        let step: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let xd = self.d(a.0);
        let mut out = vec![0.0; xd.len()];
        let mut coords = vec![0usize; nd];
        let mut src = 0usize;
        for o in out.iter_mut() {
            *o = xd[src];
            for d in (0..nd).rev() {
                coords[d] += 1;
                src += step[d];
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
                src -= step[d] * out_shape[d];
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Permute {
                x: a.0,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swap two axes (a common special case of [`Tape::permute`]).
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let nd = self.nodes[a.0].shape.len();
        if d0 >= nd || d1 >= nd {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: d0.max(d1),
                shape: self.nodes[a.0].shape.clone(),
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(d0, d1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.ensure_open()?;
        let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base_shape = self.nodes[first.0].shape.clone();
        if axis >= base_shape.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                shape: base_shape,
            });
        }
        let mut total = 0usize;
        for v in xs {
            let sh = &self.nodes[v.0].shape;
            if sh.len() != base_shape.len()
                || sh.iter().zip(&base_shape).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape.clone(),
                    rhs: sh.clone(),
                });
            }
            total += sh[axis];
        }
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        for v in xs {
            let len = self.nodes[v.0].shape[axis];
            let xd = self.d(v.0);
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
            }
            offset += len;
        }
        let rg = xs.iter().any(|v| self.rg(v.0));
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.ensure_open()?;
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                op: "narrow",
                axis,
                shape,
            });
        }
        if start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} out of bounds for axis of size {}", start + len, shape[axis]),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let xd = self.d(a.0);
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * full + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&xd[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a.0);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Narrow {
                x: a.0,
                axis,
                start,
            },
        ))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.ensure_open()?;
        let ash = self.nodes[a.0].shape.clone();
        match k::broadcast_shapes(&ash, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: ash,
                    rhs: shape.to_vec(),
                })
            }
        }
        let data = k::expand_to(self.d(a.0), &ash, shape);
        let rg = self.rg(a.0);
        Ok(self.push(shape.to_vec(), data, rg, Op::BroadcastTo(a.0)))
    }

    // ---- losses ----

    /// Mean binary cross-entropy over all elements, evaluated from logits in
    /// the numerically stable form max(z, 0) - z*t + ln(1 + exp(-|z|)).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        self.ensure_open()?;
        let n = self.numel(logits);
        if targets.len() != n {
            return Err(Error::invalid(
                "bce_with_logits",
                format!("{n} logits but {} targets", targets.len()),
            ));
        }
        let xd = self.d(logits.0);
        let mut acc = 0.0;
        for (&z, &t) in xd.iter().zip(targets) {
            acc += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let loss = acc / n as f64;
        let rg = self.rg(logits.0);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Cross-entropy over logits (B, C) with integer class targets, averaged
    /// over the batch. Optional per-class weights rescale each sample's
    /// contribution and the normalizer becomes the sum of applied weights.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        classes: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        self.ensure_open()?;
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::invalid(
                "cross_entropy",
                format!("expected rank-2 logits, got shape {shape:?}"),
            ));
        }
        let (b, c) = (shape[0], shape[1]);
        if classes.len() != b {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{b} rows of logits but {} targets", classes.len()),
            ));
        }
        if let Some(w) = weights {
            if w.len() != c {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("expected {c} class weights, got {}", w.len()),
                ));
            }
        }
        for &y in classes {
            if y >= c {
                return Err(Error::ClassOutOfRange {
                    class: y,
                    num_classes: c,
                });
            }
        }
        let xd = self.d(logits.0);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (bi, &y) in classes.iter().enumerate() {
            let row = &xd[bi * c..(bi + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
            let w = weights.map_or(1.0, |w| w[y]);
            acc += w * (lse - row[y]);
            wsum += w;
        }
        if wsum <= 0.0 {
            return Err(Error::invalid("cross_entropy", "sum of class weights is not positive"));
        }
        let loss = acc / wsum;
        let rg = self.rg(logits.0);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                classes: classes.to_vec(),
                weights: weights.map(|w| w.to_vec()),
            },
        ))
    }

    // ---- backward ----

    /// Reverse-mode differentiation from a scalar loss. Consumes the tape:
    /// no further operations are accepted afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.ensure_open()?;
        if !self.grad_enabled {
            return Err(Error::invalid("backward", "gradients are disabled on this tape"));
        }
        if self.numel(loss) != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        if !self.rg(loss.0) {
            return Err(Error::invalid(
                "backward",
                "loss does not depend on any tensor that requires gradients",
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || grads[id].is_none() {
                continue;
            }
            let (before, rest) = grads.split_at_mut(id);
            let g = rest[0].as_deref().expect("checked above");
            self.propagate(id, g, before);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let add_grad = |grads: &mut [Option<Vec<f64>>], target: usize, v: Vec<f64>| {
            if !nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(v) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(v),
            }
        };
        let out_shape = &nodes[id].shape;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_grad(grads, *a, k::reduce_to_shape(g, out_shape, &nodes[*a].shape));
                }
                if self.rg(*b) {
                    add_grad(grads, *b, k::reduce_to_shape(g, out_shape, &nodes[*b].shape));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_grad(grads, *a, k::reduce_to_shape(g, out_shape, &nodes[*a].shape));
                }
                if self.rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                    add_grad(grads, *b, k::reduce_to_shape(&neg, out_shape, &nodes[*b].shape));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = k::zip_broadcast(g, out_shape, self.d(*b), &nodes[*b].shape, out_shape, |g, y| g * y);
                    add_grad(grads, *a, k::reduce_to_shape(&da, out_shape, &nodes[*a].shape));
                }
                if self.rg(*b) {
                    let db = k::zip_broadcast(g, out_shape, self.d(*a), &nodes[*a].shape, out_shape, |g, x| g * x);
                    add_grad(grads, *b, k::reduce_to_shape(&db, out_shape, &nodes[*b].shape));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    let da = k::zip_broadcast(g, out_shape, self.d(*b), &nodes[*b].shape, out_shape, |g, y| g / y);
                    add_grad(grads, *a, k::reduce_to_shape(&da, out_shape, &nodes[*a].shape));
                }
                if self.rg(*b) {
                    let ga = k::zip_broadcast(g, out_shape, self.d(*a), &nodes[*a].shape, out_shape, |g, x| g * x);
                    let db = k::zip_broadcast(&ga, out_shape, self.d(*b), &nodes[*b].shape, out_shape, |t, y| {
                        -t / (y * y)
                    });
                    add_grad(grads, *b, k::reduce_to_shape(&db, out_shape, &nodes[*b].shape));
                }
            }
            Op::Scale(a, c) => {
                add_grad(grads, *a, g.iter().map(|&x| x * c).collect());
            }
            Op::AddScalar { x, .. } => {
                add_grad(grads, *x, g.to_vec());
            }
            Op::Matmul(a, b) => {
                let ash = &nodes[*a].shape;
                let bsh = &nodes[*b].shape;
                let nb = ash.len() - 2;
                let (m, kk, n) = (ash[nb], ash[nb + 1], bsh[nb + 1]);
                let batch: usize = ash[..nb].iter().product();
                let ad = self.d(*a);
                let bd = self.d(*b);
                if self.rg(*a) {
                    let mut da = vec![0.0; ad.len()];
                    for bi in 0..batch {
                        let bt = k::transpose_2d(&bd[bi * kk * n..(bi + 1) * kk * n], kk, n);
                        k::matmul_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bt,
                            m,
                            n,
                            kk,
                            &mut da[bi * m * kk..(bi + 1) * m * kk],
                        );
                    }
                    add_grad(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bd.len()];
                    for bi in 0..batch {
                        let at = k::transpose_2d(&ad[bi * m * kk..(bi + 1) * m * kk], m, kk);
                        k::matmul_acc(
                            &at,
                            &g[bi * m * n..(bi + 1) * m * n],
                            kk,
                            m,
                            n,
                            &mut db[bi * kk * n..(bi + 1) * kk * n],
                        );
                    }
                    add_grad(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, stride, padding } => {
                let xsh = &nodes[*x].shape;
                let wsh = &nodes[*w].shape;
                let (n, c, h, w_in) = (xsh[0], xsh[1], xsh[2], xsh[3]);
                let (o, kernel) = (wsh[0], wsh[2]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let hw = oh * ow;
                let rows = n * hw;
                let ckk = c * kernel * kernel;
                // reorder grad (n, o, oh, ow) -> rows x o
                let mut g_mat = vec![0.0; rows * o];
                for ni in 0..n {
                    for oi in 0..o {
                        let src = (ni * o + oi) * hw;
                        for p in 0..hw {
                            g_mat[(ni * hw + p) * o + oi] = g[src + p];
                        }
                    }
                }
                let col = k::im2col(self.d(*x), n, c, h, w_in, kernel, *stride, *padding, oh, ow);
                if self.rg(*w) {
                    let gt = k::transpose_2d(&g_mat, rows, o);
                    let dw = k::matmul(&gt, &col, o, rows, ckk);
                    add_grad(grads, *w, dw);
                }
                if self.rg(*x) {
                    drop(col);
                    let dcol = k::matmul(&g_mat, self.d(*w), rows, o, ckk);
                    let mut dx = vec![0.0; n * c * h * w_in];
                    k::col2im_acc(&dcol, n, c, h, w_in, kernel, *stride, *padding, oh, ow, &mut dx);
                    add_grad(grads, *x, dx);
                }
            }
            Op::MaxPool2d { x, argmax, .. } => {
                if self.rg(*x) {
                    let mut dx = vec![0.0; nodes[*x].shape.iter().product()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        if src != usize::MAX {
                            dx[src] += gi;
                        }
                    }
                    add_grad(grads, *x, dx);
                }
            }
            Op::AvgPool2d { x, kernel, stride, padding } => {
                if self.rg(*x) {
                    let xsh = &nodes[*x].shape;
                    let (n, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
                    let (oh, ow) = (out_shape[2], out_shape[3]);
                    let inv = 1.0 / (kernel * kernel) as f64;
                    let mut dx = vec![0.0; n * c * h * w];
                    for plane in 0..n * c {
                        let base = plane * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[plane * oh * ow + oy * ow + ox] * inv;
                                for ky in 0..*kernel {
                                    let iy = (oy * stride + ky) as isize - *padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..*kernel {
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dx[base + iy as usize * w + ix as usize] += go;
                                    }
                                }
                            }
                        }
                    }
                    add_grad(grads, *x, dx);
                }
            }
            Op::Relu(a) => {
                let xd = self.d(*a);
                add_grad(
                    grads,
                    *a,
                    g.iter().zip(xd).map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 }).collect(),
                );
            }
            Op::Gelu(a) => {
                let xd = self.d(*a);
                add_grad(grads, *a, g.iter().zip(xd).map(|(&gi, &x)| gi * k::gelu_deriv(x)).collect());
            }
            Op::Sigmoid(a) => {
                let yd = self.d(id);
                add_grad(grads, *a, g.iter().zip(yd).map(|(&gi, &y)| gi * y * (1.0 - y)).collect());
            }
            Op::Softmax { x, axis } => {
                let yd = self.d(id);
                let (outer, len, inner) = axis_split(out_shape, *axis);
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += g[idx] * yd[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] = yd[idx] * (g[idx] - dot);
                        }
                    }
                }
                add_grad(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xd = self.d(*x);
                let gd = self.d(*gamma);
                let d = *out_shape.last().expect("rank checked in forward");
                let rows = xd.len() / d;
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_s = 1.0 / (var + eps).sqrt();
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_s;
                        let dxhat = grow[j] * gd[j];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    let inv_m = 1.0 / d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_s;
                        let dxhat = grow[j] * gd[j];
                        dx[r * d + j] = (dxhat - s1 * inv_m - xhat * s2 * inv_m) * inv_s;
                    }
                }
                add_grad(grads, *x, dx);
                if self.rg(*gamma) {
                    add_grad(grads, *gamma, dgamma);
                }
                if self.rg(*beta) {
                    add_grad(grads, *beta, dbeta);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, eps } => {
                let xsh = &nodes[*x].shape;
                let (n, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
                let cpg = c / groups;
                let hw = h * w;
                let m = cpg * hw;
                let xd = self.d(*x);
                let gd = self.d(*gamma);
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for gi in 0..*groups {
                        let base = (ni * c + gi * cpg) * hw;
                        let grp = &xd[base..base + m];
                        let gg = &g[base..base + m];
                        let mean = grp.iter().sum::<f64>() / m as f64;
                        let var = grp.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                        let inv_s = 1.0 / (var + eps).sqrt();
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..m {
                            let ch = gi * cpg + j / hw;
                            let xhat = (grp[j] - mean) * inv_s;
                            let dxhat = gg[j] * gd[ch];
                            s1 += dxhat;
                            s2 += dxhat * xhat;
                            dgamma[ch] += gg[j] * xhat;
                            dbeta[ch] += gg[j];
                        }
                        let inv_m = 1.0 / m as f64;
                        for j in 0..m {
                            let ch = gi * cpg + j / hw;
                            let xhat = (grp[j] - mean) * inv_s;
                            let dxhat = gg[j] * gd[ch];
                            dx[base + j] = (dxhat - s1 * inv_m - xhat * s2 * inv_m) * inv_s;
                        }
                    }
                }
                add_grad(grads, *x, dx);
                if self.rg(*gamma) {
                    add_grad(grads, *gamma, dgamma);
                }
                if self.rg(*beta) {
                    add_grad(grads, *beta, dbeta);
                }
            }
            Op::BatchNorm { x, gamma, beta, eps, mean, var, frozen_stats } => {
                let xsh = &nodes[*x].shape;
                let (n, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
                let hw = h * w;
                let m = n * hw;
                let xd = self.d(*x);
                let gd = self.d(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xd.len()];
                for ci in 0..c {
                    let inv_s = 1.0 / (var[ci] + eps).sqrt();
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for j in 0..hw {
                            let xhat = (xd[base + j] - mean[ci]) * inv_s;
                            let gi = g[base + j];
                            let dxhat = gi * gd[ci];
                            s1 += dxhat;
                            s2 += dxhat * xhat;
                            dgamma[ci] += gi * xhat;
                            dbeta[ci] += gi;
                        }
                    }
                    let inv_m = 1.0 / m as f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for j in 0..hw {
                            let gi = g[base + j];
                            let dxhat = gi * gd[ci];
                            dx[base + j] = if *frozen_stats {
                                // statistics are constants: straight-through affine
                                dxhat * inv_s
                            } else {
                                let xhat = (xd[base + j] - mean[ci]) * inv_s;
                                (dxhat - s1 * inv_m - xhat * s2 * inv_m) * inv_s
                            };
                        }
                    }
                }
                add_grad(grads, *x, dx);
                if self.rg(*gamma) {
                    add_grad(grads, *gamma, dgamma);
                }
                if self.rg(*beta) {
                    add_grad(grads, *beta, dbeta);
                }
            }
            Op::SumAll(a) => {
                add_grad(grads, *a, vec![g[0]; nodes[*a].shape.iter().product()]);
            }
            Op::MeanAll(a) => {
                let n: usize = nodes[*a].shape.iter().product();
                add_grad(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let in_shape = &nodes[*x].shape;
                let (outer, len, inner) = axis_split(in_shape, *axis);
                let scale = if matches!(nodes[id].op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; xd_len(in_shape)];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        let dst = &mut dx[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                add_grad(grads, *x, dx);
            }
            Op::Reshape(a) => {
                add_grad(grads, *a, g.to_vec());
            }
            Op::Permute { x, axes } => {
                let in_shape = &nodes[*x].shape;
                let in_strides = strides_of(in_shape);
                let step: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
                let nd = in_shape.len();
                let mut dx = vec![0.0; g.len()];
                let mut coords = vec![0usize; nd];
                let mut src = 0usize;
                for &gi in g {
                    dx[src] = gi;
                    for d in (0..nd).rev() {
                        coords[d] += 1;
                        src += step[d];
                        if coords[d] < out_shape[d] {
                            break;
                        }
                        coords[d] = 0;
                        src -= step[d] * out_shape[d];
                    }
                }
                add_grad(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0usize;
                for &xid in xs {
                    let len = nodes[xid].shape[*axis];
                    if self.rg(xid) {
                        let mut dx = vec![0.0; nodes[xid].shape.iter().product()];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            dx[o * len * inner..(o + 1) * len * inner]
                                .copy_from_slice(&g[src..src + len * inner]);
                        }
                        add_grad(grads, xid, dx);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = &nodes[*x].shape;
                let (outer, full, inner) = axis_split(in_shape, *axis);
                let len = out_shape[*axis];
                let mut dx = vec![0.0; xd_len(in_shape)];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                add_grad(grads, *x, dx);
            }
            Op::BroadcastTo(a) => {
                add_grad(grads, *a, k::reduce_to_shape(g, out_shape, &nodes[*a].shape));
            }
            Op::BceWithLogits { logits, targets } => {
                let xd = self.d(*logits);
                let inv_n = 1.0 / xd.len() as f64;
                let dl: Vec<f64> = xd
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| g[0] * (k::sigmoid(z) - t) * inv_n)
                    .collect();
                add_grad(grads, *logits, dl);
            }
            Op::CrossEntropy { logits, classes, weights } => {
                let xd = self.d(*logits);
                let c = nodes[*logits].shape[1];
                let wsum: f64 = classes
                    .iter()
                    .map(|&y| weights.as_ref().map_or(1.0, |w| w[y]))
                    .sum();
                let mut dl = vec![0.0; xd.len()];
                for (bi, &y) in classes.iter().enumerate() {
                    let row = &xd[bi * c..(bi + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&z| (z - mx).exp()).sum();
                    let w = weights.as_ref().map_or(1.0, |w| w[y]);
                    let coef = g[0] * w / wsum;
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / sum;
                        dl[bi * c + j] = coef * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                add_grad(grads, *logits, dl);
            }
        }
    }
}

fn xd_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_then_backward() {
        let mut tape = Tape::new(true);
        let a = tape
            .leaf_parts(vec![2], vec![1.0, 2.0], true)
            .unwrap();
        let b = tape
            .leaf_parts(vec![2], vec![3.0, 4.0], true)
            .unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_all(s).unwrap();
        assert_eq!(tape.data(loss), &[10.0]);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn tape_rejects_ops_after_backward() {
        let mut tape = Tape::new(true);
        let a = tape.leaf_parts(vec![1], vec![2.0], true).unwrap();
        let loss = tape.sum_all(a).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.relu(a), Err(crate::error::Error::TapeConsumed)));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new(true);
        let a = tape.leaf_parts(vec![2], vec![1.0, 2.0], true).unwrap();
        let out = tape.relu(a).unwrap();
        assert!(matches!(
            tape.backward(out),
            Err(crate::error::Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn matmul_matches_hand_result() {
        let mut tape = Tape::new(false);
        let a = tape
            .leaf_parts(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false)
            .unwrap();
        let b = tape
            .leaf_parts(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], false)
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.data(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new(false);
        let a = tape
            .leaf_parts(vec![2, 3], vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0], false)
            .unwrap();
        let s = tape.softmax(a, 1).unwrap();
        let d = tape.data(s);
        assert!((d[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d[3] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn release_frees_intermediates_but_not_leaves() {
        let mut tape = Tape::new(false);
        let a = tape.leaf_parts(vec![2], vec![1.0, -1.0], false).unwrap();
        let r = tape.relu(a).unwrap();
        let s = tape.scale(r, 2.0).unwrap();
        tape.release_except(&[s]);
        assert_eq!(tape.data(a), &[1.0, -1.0]);
        assert_eq!(tape.data(s), &[2.0, 0.0]);
    }
}
