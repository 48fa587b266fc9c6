//! Dense f64 kernels shared by the tape ops. All loops accumulate in a fixed
//! order, so results are bit-identical across runs.

/// C[m,n] += A[m,k] * B[k,n], row-major. `out` must hold m*n zeros (or a
/// partial sum to accumulate into).
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = bv.mul_add(a_ip, *o);
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// Row-major transpose: (rows, cols) -> (cols, rows).
pub fn transpose_2d(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output spatial size of a convolution / pooling window, or None when it
/// would be non-positive.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// im2col for NCHW input: rows indexed by (n, oh, ow), columns by (c, kh, kw).
#[allow(clippy::too_many_arguments)] // the seven geometry scalars are the signature
pub fn im2col(
    input: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ckk = c * kernel * kernel;
    let mut col = vec![0.0; n * oh * ow * ckk];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = plane + iy as usize * w;
                        let col_base = row + (ci * kernel + ky) * kernel;
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[col_base + kx] = input[in_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the column-space gradient back to input space.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    col_grad: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    input_grad: &mut [f64],
) {
    let ckk = c * kernel * kernel;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((ni * oh + oy) * ow + ox) * ckk;
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = plane + iy as usize * w;
                        let col_base = row + (ci * kernel + ky) * kernel;
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            input_grad[in_row + ix as usize] += col_grad[col_base + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Broadcast-compatible output shape under trailing-dimension alignment.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for (i, dim) in out.iter_mut().enumerate() {
        let da = dim_from_right(a, ndim, i);
        let db = dim_from_right(b, ndim, i);
        *dim = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], ndim: usize, i: usize) -> usize {
    if i < ndim - shape.len() {
        1
    } else {
        shape[i - (ndim - shape.len())]
    }
}

/// Row-major strides, with zero stride on broadcast (size-1) dimensions when
/// expanding `shape` to `out_shape`.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    let mut strides = vec![0usize; ndim];
    let mut acc = 1;
    for d in (0..ndim).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Apply `f` over two broadcast inputs producing the dense output.
pub fn zip_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; out_shape.len()];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in out.iter_mut() {
        *o = f(a[ia], b[ib]);
        // advance odometer
        for d in (0..out_shape.len()).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Materialize `data` (of `shape`) broadcast up to `out_shape`.
pub fn expand_to(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let numel: usize = out_shape.iter().product();
    let s = broadcast_strides(shape, out_shape);
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; out_shape.len()];
    let mut idx = 0usize;
    for o in out.iter_mut() {
        *o = data[idx];
        for d in (0..out_shape.len()).rev() {
            coords[d] += 1;
            idx += s[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            idx -= s[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (of `grad_shape`) down to `target_shape`, undoing broadcast.
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_numel];
    let st = broadcast_strides(target_shape, grad_shape);
    let mut coords = vec![0usize; grad_shape.len()];
    let mut it = 0usize;
    for &g in grad {
        out[it] += g;
        for d in (0..grad_shape.len()).rev() {
            coords[d] += 1;
            it += st[d];
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
            it -= st[d] * grad_shape[d];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shapes(&[2, 3], &[4]), None);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        // grad over [2,3] reduced to [3] sums the rows
        let g = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![11.0, 22.0, 33.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[2, 1]), vec![6.0, 60.0]);
    }

    #[test]
    fn conv_out_sizes() {
        assert_eq!(conv_out_size(128, 7, 2, 3), Some(64));
        assert_eq!(conv_out_size(4, 3, 1, 1), Some(4));
        assert_eq!(conv_out_size(2, 7, 1, 0), None);
    }
}
