//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes the forward value with a plain
//! kernel, and registers a backward closure when an input is tracked.
//! Kernels are single-threaded with fixed iteration order, so results are
//! bit-identical across runs.

use super::{record, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

// ── elementwise ──────────────────────────────────────────────────────

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let out = Tensor::from_vec(data, a.shape().to_vec());
    record(&[a, b], out, |g, need| {
        vec![
            need[0].then(|| g.to_vec()),
            need[1].then(|| g.to_vec()),
        ]
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let out = Tensor::from_vec(data, a.shape().to_vec());
    record(&[a, b], out, |g, need| {
        vec![
            need[0].then(|| g.to_vec()),
            need[1].then(|| g.iter().map(|v| -v).collect()),
        ]
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let out = Tensor::from_vec(data, a.shape().to_vec());
    let (da, db) = (a.data_arc(), b.data_arc());
    record(&[a, b], out, move |g, need| {
        vec![
            need[0].then(|| g.iter().zip(db.iter()).map(|(g, y)| g * y).collect()),
            need[1].then(|| g.iter().zip(da.iter()).map(|(g, x)| g * x).collect()),
        ]
    })
}

/// Multiply by a scalar.
pub fn scale(a: &Tensor, s: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * s).collect();
    let out = Tensor::from_vec(data, a.shape().to_vec());
    record(&[a], out, move |g, _| vec![Some(g.iter().map(|v| v * s).collect())])
        .expect("single input cannot mismatch tapes")
}

/// Add a scalar to every element.
pub fn add_scalar(a: &Tensor, s: f64) -> Tensor {
    let data = a.data().iter().map(|x| x + s).collect();
    let out = Tensor::from_vec(data, a.shape().to_vec());
    record(&[a], out, |g, _| vec![Some(g.to_vec())]).expect("single input")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation x * sigmoid(x).
pub fn silu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&x| x * sigmoid(x)).collect();
    let out = Tensor::from_vec(data, a.shape().to_vec());
    let saved = a.data_arc();
    record(&[a], out, move |g, _| {
        let dx = g
            .iter()
            .zip(saved.iter())
            .map(|(g, &x)| {
                let s = sigmoid(x);
                g * (s * (1.0 + x * (1.0 - s)))
            })
            .collect();
        vec![Some(dx)]
    })
    .expect("single input")
}

/// Clamp to [lo, hi] with pass-through gradient strictly inside the range.
pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Tensor {
    let data = a.data().iter().map(|&x| x.clamp(lo, hi)).collect();
    let out = Tensor::from_vec(data, a.shape().to_vec());
    let saved = a.data_arc();
    record(&[a], out, move |g, _| {
        let dx = g
            .iter()
            .zip(saved.iter())
            .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
            .collect();
        vec![Some(dx)]
    })
    .expect("single input")
}

// ── reductions ───────────────────────────────────────────────────────

pub fn sum_all(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    let n = a.numel();
    let shape = a.shape().to_vec();
    let out = Tensor::scalar(s);
    record(&[a], out, move |g, _| {
        debug_assert_eq!(n, shape.iter().product::<usize>());
        vec![Some(vec![g[0]; n])]
    })
    .expect("single input")
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.numel();
    let s: f64 = a.data().iter().sum();
    let out = Tensor::scalar(s / n as f64);
    record(&[a], out, move |g, _| vec![Some(vec![g[0] / n as f64; n])])
        .expect("single input")
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let d = sub(pred, target)?;
    Ok(mean_all(&mul(&d, &d)?))
}

// ── shape ────────────────────────────────────────────────────────────

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(Error::invalid(
            "reshape",
            format!("cannot view {:?} as {:?}", a.shape(), shape),
        ));
    }
    let out = Tensor::from_vec(a.data().to_vec(), shape.to_vec());
    record(&[a], out, |g, _| vec![Some(g.to_vec())]).map_err(|_| unreachable!())
}

/// Permute axes; `perm[i]` names the source axis for output axis `i`.
pub fn permute(a: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let nd = a.shape().len();
    if perm.len() != nd || {
        let mut seen = vec![false; nd];
        perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
    } {
        return Err(Error::invalid("permute", format!("bad permutation {perm:?}")));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| a.shape()[p]).collect();
    let out_data = permute_kernel(a.data(), a.shape(), perm);
    let out = Tensor::from_vec(out_data, out_shape.clone());
    let perm = perm.to_vec();
    let src_shape = a.shape().to_vec();
    record(&[a], out, move |g, _| {
        // dL/dx = inverse permutation of g
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let gshape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
        vec![Some(permute_kernel(g, &gshape, &inv))]
    })
    .map_err(|_| unreachable!())
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_kernel(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let src_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut src = 0;
        for d in 0..nd {
            src += idx[d] * src_strides[perm[d]];
        }
        *slot = data[src];
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

// ── concat / split ───────────────────────────────────────────────────

/// Concatenate along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("concat", "no inputs"));
    }
    let nd = parts[0].shape().len();
    if axis >= nd {
        return Err(Error::invalid("concat", format!("axis {axis} out of range")));
    }
    for p in &parts[1..] {
        if p.shape().len() != nd
            || p.shape()[..axis] != parts[0].shape()[..axis]
            || p.shape()[axis + 1..] != parts[0].shape()[axis + 1..]
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let outer: usize = parts[0].shape()[..axis].iter().product();
    let inner: usize = parts[0].shape()[axis + 1..].iter().product();
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();

    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = total;
    let mut data = vec![0.0; outer * total * inner];
    for o in 0..outer {
        let mut off = 0;
        for (p, &sz) in parts.iter().zip(&sizes) {
            let chunk = sz * inner;
            let src = &p.data()[o * chunk..(o + 1) * chunk];
            data[o * total * inner + off..o * total * inner + off + chunk]
                .copy_from_slice(src);
            off += chunk;
        }
    }
    let out = Tensor::from_vec(data, out_shape);
    let sizes_cl = sizes.clone();
    record(parts, out, move |g, need| {
        let mut grads: Vec<Option<Vec<f64>>> =
            sizes_cl.iter().map(|&sz| Some(vec![0.0; outer * sz * inner])).collect();
        for o in 0..outer {
            let mut off = 0;
            for (i, &sz) in sizes_cl.iter().enumerate() {
                let chunk = sz * inner;
                if need[i] {
                    let dst = grads[i].as_mut().unwrap();
                    dst[o * chunk..(o + 1) * chunk]
                        .copy_from_slice(&g[o * total * inner + off..o * total * inner + off + chunk]);
                }
                off += chunk;
            }
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if !need[i] {
                *slot = None;
            }
        }
        grads
    })
}

/// Split along `axis` into chunks of the given sizes (must sum to the extent).
pub fn split(a: &Tensor, sizes: &[usize], axis: usize) -> Result<Vec<Tensor>> {
    let nd = a.shape().len();
    if axis >= nd {
        return Err(Error::invalid("split", format!("axis {axis} out of range")));
    }
    if sizes.iter().sum::<usize>() != a.shape()[axis] {
        return Err(Error::invalid(
            "split",
            format!("sizes {:?} do not sum to extent {}", sizes, a.shape()[axis]),
        ));
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let total = a.shape()[axis];

    let mut outs = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &sz in sizes {
        let mut shape = a.shape().to_vec();
        shape[axis] = sz;
        let mut data = vec![0.0; outer * sz * inner];
        for o in 0..outer {
            let chunk = sz * inner;
            data[o * chunk..(o + 1) * chunk].copy_from_slice(
                &a.data()[o * total * inner + off..o * total * inner + off + chunk],
            );
        }
        let out = Tensor::from_vec(data, shape);
        let this_off = off;
        let full_len = a.numel();
        let part = record(&[a], out, move |g, _| {
            let mut dx = vec![0.0; full_len];
            let chunk = sz * inner;
            for o in 0..outer {
                dx[o * total * inner + this_off..o * total * inner + this_off + chunk]
                    .copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
            }
            vec![Some(dx)]
        })
        .expect("single input");
        outs.push(part);
        off += sz * inner;
    }
    Ok(outs)
}

// ── softmax ──────────────────────────────────────────────────────────

/// Numerically stable softmax along `axis`.
pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    let nd = a.shape().len();
    if axis >= nd {
        return Err(Error::invalid("softmax", format!("axis {axis} out of range")));
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let len = a.shape()[axis];
    let inner: usize = a.shape()[axis + 1..].iter().product();

    let mut data = vec![0.0; a.numel()];
    let x = a.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for l in 0..len {
                mx = mx.max(x[base + l * inner]);
            }
            let mut z = 0.0;
            for l in 0..len {
                let e = (x[base + l * inner] - mx).exp();
                data[base + l * inner] = e;
                z += e;
            }
            for l in 0..len {
                data[base + l * inner] /= z;
            }
        }
    }
    let out = Tensor::from_vec(data, a.shape().to_vec());
    let y = out.data_arc();
    record(&[a], out, move |g, _| {
        let mut dx = vec![0.0; g.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = 0.0;
                for l in 0..len {
                    dot += g[base + l * inner] * y[base + l * inner];
                }
                for l in 0..len {
                    let yi = y[base + l * inner];
                    dx[base + l * inner] = yi * (g[base + l * inner] - dot);
                }
            }
        }
        vec![Some(dx)]
    })
    .map_err(|_| unreachable!())
}

// ── matmul ───────────────────────────────────────────────────────────

fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

/// out[m,k] = g[m,n] @ b[k,n]^T
fn matmul_gbt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] += s;
        }
    }
}

/// out[k,n] += a[m,k]^T @ g[m,n]
fn matmul_atg(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[.., k, n]`
/// with identical leading extents or a plain `[k, n]` matrix shared across
/// the batch.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ashape, bshape) = (a.shape(), b.shape());
    if ashape.len() < 2 || bshape.len() < 2 {
        return Err(Error::invalid("matmul", "inputs must have rank >= 2"));
    }
    let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
    let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
    if k != kb {
        return Err(Error::ShapeMismatch { op: "matmul", lhs: ashape.to_vec(), rhs: bshape.to_vec() });
    }
    let batch: usize = ashape[..ashape.len() - 2].iter().product();
    let b_batched = bshape.len() > 2;
    if b_batched && bshape[..bshape.len() - 2] != ashape[..ashape.len() - 2] {
        return Err(Error::ShapeMismatch { op: "matmul", lhs: ashape.to_vec(), rhs: bshape.to_vec() });
    }

    let mut out_shape = ashape[..ashape.len() - 2].to_vec();
    out_shape.extend_from_slice(&[m, n]);
    let mut data = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bsl = if b_batched {
            &b.data()[bi * k * n..(bi + 1) * k * n]
        } else {
            b.data()
        };
        matmul_2d(asl, bsl, m, k, n, &mut data[bi * m * n..(bi + 1) * m * n]);
    }
    let out = Tensor::from_vec(data, out_shape);
    let (ad, bd) = (a.data_arc(), b.data_arc());
    record(&[a, b], out, move |g, need| {
        let da = need[0].then(|| {
            let mut da = vec![0.0; ad.len()];
            for bi in 0..batch {
                let gsl = &g[bi * m * n..(bi + 1) * m * n];
                let bsl = if b_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { &bd[..] };
                matmul_gbt(gsl, bsl, m, k, n, &mut da[bi * m * k..(bi + 1) * m * k]);
            }
            da
        });
        let db = need[1].then(|| {
            let mut db = vec![0.0; bd.len()];
            for bi in 0..batch {
                let gsl = &g[bi * m * n..(bi + 1) * m * n];
                let asl = &ad[bi * m * k..(bi + 1) * m * k];
                let dst = if b_batched {
                    &mut db[bi * k * n..(bi + 1) * k * n]
                } else {
                    &mut db[..]
                };
                matmul_atg(asl, gsl, m, k, n, dst);
            }
            db
        });
        vec![da, db]
    })
}

/// Affine map on the last axis: `x[.., k] @ w[k, n] (+ bias[n])`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(Error::invalid("linear", "weight must be [k, n]"));
    }
    let k = w.shape()[0];
    let n = w.shape()[1];
    let nd = x.shape().len();
    if nd == 0 || x.shape()[nd - 1] != k {
        return Err(Error::ShapeMismatch { op: "linear", lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
    }
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(Error::ShapeMismatch { op: "linear", lhs: vec![n], rhs: b.shape().to_vec() });
        }
    }
    let rows = x.numel() / k;
    let mut data = vec![0.0; rows * n];
    matmul_2d(x.data(), w.data(), rows, k, n, &mut data);
    if let Some(b) = bias {
        for r in 0..rows {
            for (d, bv) in data[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                *d += bv;
            }
        }
    }
    let mut out_shape = x.shape()[..nd - 1].to_vec();
    out_shape.push(n);
    let out = Tensor::from_vec(data, out_shape);

    let (xd, wd) = (x.data_arc(), w.data_arc());
    let inputs: Vec<&Tensor> = match bias {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    };
    let has_bias = bias.is_some();
    record(&inputs, out, move |g, need| {
        let dx = need[0].then(|| {
            let mut dx = vec![0.0; xd.len()];
            matmul_gbt(g, &wd, rows, k, n, &mut dx);
            dx
        });
        let dw = need[1].then(|| {
            let mut dw = vec![0.0; wd.len()];
            matmul_atg(&xd, g, rows, k, n, &mut dw);
            dw
        });
        let mut grads = vec![dx, dw];
        if has_bias {
            grads.push(need[2].then(|| {
                let mut db = vec![0.0; n];
                for r in 0..rows {
                    for (d, gv) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *d += gv;
                    }
                }
                db
            }));
        }
        grads
    })
}

// ── conv2d ───────────────────────────────────────────────────────────

/// 2-D convolution (cross-correlation) with symmetric stride and zero padding.
/// `x` is `[b, ci, h, w]`, `weight` `[co, ci, kh, kw]`, optional `bias[co]`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::invalid("conv2d", "expects 4-d input and weight"));
    }
    let (b, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if ci != wci {
        return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs.to_vec(), rhs: ws.to_vec() });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"),
        ));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    if ho == 0 || wo == 0 {
        return Err(Error::invalid("conv2d", "non-positive output extent"));
    }
    if let Some(bb) = bias {
        if bb.shape() != [co] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: vec![co], rhs: bb.shape().to_vec() });
        }
    }

    let mut y = vec![0.0; b * co * ho * wo];
    conv2d_forward(
        x.data(), weight.data(), &mut y, b, ci, h, w, co, kh, kw, stride, padding, ho, wo,
    );
    if let Some(bb) = bias {
        for n in 0..b {
            for o in 0..co {
                let bv = bb.data()[o];
                let base = (n * co + o) * ho * wo;
                for v in &mut y[base..base + ho * wo] {
                    *v += bv;
                }
            }
        }
    }
    let out = Tensor::from_vec(y, vec![b, co, ho, wo]);

    let (xd, wd) = (x.data_arc(), weight.data_arc());
    let inputs: Vec<&Tensor> = match bias {
        Some(bb) => vec![x, weight, bb],
        None => vec![x, weight],
    };
    let has_bias = bias.is_some();
    record(&inputs, out, move |g, need| {
        let dx = need[0].then(|| {
            let mut dx = vec![0.0; xd.len()];
            conv2d_backward_input(
                g, &wd, &mut dx, b, ci, h, w, co, kh, kw, stride, padding, ho, wo,
            );
            dx
        });
        let dw = need[1].then(|| {
            let mut dw = vec![0.0; wd.len()];
            conv2d_backward_weight(
                g, &xd, &mut dw, b, ci, h, w, co, kh, kw, stride, padding, ho, wo,
            );
            dw
        });
        let mut grads = vec![dx, dw];
        if has_bias {
            grads.push(need[2].then(|| {
                let mut db = vec![0.0; co];
                for n in 0..b {
                    for o in 0..co {
                        let base = (n * co + o) * ho * wo;
                        db[o] += g[base..base + ho * wo].iter().sum::<f64>();
                    }
                }
                db
            }));
        }
        grads
    })
}

/// Valid output-column range for a kernel column `kx`: all `ow` with
/// `0 <= ow*stride + kx - pad < w`.
fn ow_range(kx: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64], wgt: &[f64], y: &mut [f64],
    b: usize, ci: usize, h: usize, w: usize,
    co: usize, kh: usize, kw: usize,
    stride: usize, pad: usize, ho: usize, wo: usize,
) {
    for n in 0..b {
        for o in 0..co {
            let ybase = (n * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (n * ci + c) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wgt[((o * ci + c) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = ow_range(kx, pad, stride, w, wo);
                        for oh in 0..ho {
                            let iy = (oh * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let yrow = ybase + oh * wo;
                            for ow in ow_lo..ow_hi {
                                let ix = ow * stride + kx - pad;
                                y[yrow + ow] += wv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    g: &[f64], wgt: &[f64], dx: &mut [f64],
    b: usize, ci: usize, h: usize, w: usize,
    co: usize, kh: usize, kw: usize,
    stride: usize, pad: usize, ho: usize, wo: usize,
) {
    for n in 0..b {
        for o in 0..co {
            let gbase = (n * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (n * ci + c) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wgt[((o * ci + c) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = ow_range(kx, pad, stride, w, wo);
                        for oh in 0..ho {
                            let iy = (oh * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let grow = gbase + oh * wo;
                            for ow in ow_lo..ow_hi {
                                let ix = ow * stride + kx - pad;
                                dx[xrow + ix] += wv * g[grow + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    g: &[f64], x: &[f64], dw: &mut [f64],
    b: usize, ci: usize, h: usize, w: usize,
    co: usize, kh: usize, kw: usize,
    stride: usize, pad: usize, ho: usize, wo: usize,
) {
    for n in 0..b {
        for o in 0..co {
            let gbase = (n * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (n * ci + c) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (ow_lo, ow_hi) = ow_range(kx, pad, stride, w, wo);
                        let mut acc = 0.0;
                        for oh in 0..ho {
                            let iy = (oh * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let grow = gbase + oh * wo;
                            for ow in ow_lo..ow_hi {
                                let ix = ow * stride + kx - pad;
                                acc += g[grow + ow] * x[xrow + ix];
                            }
                        }
                        dw[((o * ci + c) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

// ── normalization ────────────────────────────────────────────────────

/// Group normalization over channel groups, computed independently at every
/// spatial position: for each `(sample, position, group)` the `c/groups`
/// channel values are shifted to mean 0 and scaled to variance 1 before the
/// per-channel affine. Keeping the statistics position-local means the op
/// transports no information across space.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::invalid("group_norm", "expects [b, c, h, w]"));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "group_norm",
            format!("channels {c} not divisible by groups {groups}"),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "group_norm",
            lhs: vec![c],
            rhs: gamma.shape().to_vec(),
        });
    }
    let m = c / groups;
    let pos = h * w;

    let xd = x.data();
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; b * groups * pos];
    let mut y = vec![0.0; x.numel()];
    for n in 0..b {
        for grp in 0..groups {
            for p in 0..pos {
                let mut mean = 0.0;
                for j in 0..m {
                    mean += xd[((n * c + grp * m + j) * pos) + p];
                }
                mean /= m as f64;
                let mut var = 0.0;
                for j in 0..m {
                    let d = xd[((n * c + grp * m + j) * pos) + p] - mean;
                    var += d * d;
                }
                var /= m as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[(n * groups + grp) * pos + p] = inv;
                for j in 0..m {
                    let ch = grp * m + j;
                    let idx = (n * c + ch) * pos + p;
                    let xh = (xd[idx] - mean) * inv;
                    xhat[idx] = xh;
                    y[idx] = gamma.data()[ch] * xh + beta.data()[ch];
                }
            }
        }
    }
    let out = Tensor::from_vec(y, xs.to_vec());
    let xhat = std::sync::Arc::new(xhat);
    let inv_std = std::sync::Arc::new(inv_std);
    let gd = gamma.data_arc();
    record(&[x, gamma, beta], out, move |g, need| {
        let dgamma_dbeta = need[1] || need[2];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        if dgamma_dbeta {
            for n in 0..b {
                for ch in 0..c {
                    let base = (n * c + ch) * pos;
                    for p in 0..pos {
                        dgamma[ch] += g[base + p] * xhat[base + p];
                        dbeta[ch] += g[base + p];
                    }
                }
            }
        }
        let dx = need[0].then(|| {
            let mut dx = vec![0.0; b * c * pos];
            for n in 0..b {
                for grp in 0..groups {
                    for p in 0..pos {
                        let inv = inv_std[(n * groups + grp) * pos + p];
                        let mut mean_gg = 0.0;
                        let mut mean_ggx = 0.0;
                        for j in 0..m {
                            let ch = grp * m + j;
                            let idx = (n * c + ch) * pos + p;
                            let gg = g[idx] * gd[ch];
                            mean_gg += gg;
                            mean_ggx += gg * xhat[idx];
                        }
                        mean_gg /= m as f64;
                        mean_ggx /= m as f64;
                        for j in 0..m {
                            let ch = grp * m + j;
                            let idx = (n * c + ch) * pos + p;
                            let gg = g[idx] * gd[ch];
                            dx[idx] = inv * (gg - mean_gg - xhat[idx] * mean_ggx);
                        }
                    }
                }
            }
            dx
        });
        vec![dx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
    })
}

// ── resampling ───────────────────────────────────────────────────────

/// Nearest-neighbor upsampling of the trailing two axes by `factor`.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() < 2 {
        return Err(Error::invalid("upsample_nearest", "needs at least 2 axes"));
    }
    if factor == 0 {
        return Err(Error::invalid("upsample_nearest", "factor must be positive"));
    }
    let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
    let lead: usize = xs[..xs.len() - 2].iter().product();
    let (ho, wo) = (h * factor, w * factor);
    let mut data = vec![0.0; lead * ho * wo];
    for l in 0..lead {
        for oy in 0..ho {
            let iy = oy / factor;
            let src = (l * h + iy) * w;
            let dst = (l * ho + oy) * wo;
            for ox in 0..wo {
                data[dst + ox] = x.data()[src + ox / factor];
            }
        }
    }
    let mut out_shape = xs[..xs.len() - 2].to_vec();
    out_shape.extend_from_slice(&[ho, wo]);
    let out = Tensor::from_vec(data, out_shape);
    record(&[x], out, move |g, _| {
        let mut dx = vec![0.0; lead * h * w];
        for l in 0..lead {
            for oy in 0..ho {
                let iy = oy / factor;
                let src = (l * ho + oy) * wo;
                let dst = (l * h + iy) * w;
                for ox in 0..wo {
                    dx[dst + ox / factor] += g[src + ox];
                }
            }
        }
        vec![Some(dx)]
    })
    .map_err(|_| unreachable!())
}

/// Average pooling of the trailing two axes by `factor` (extents must divide).
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() < 2 {
        return Err(Error::invalid("avg_pool", "needs at least 2 axes"));
    }
    let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "avg_pool",
            format!("extents {h}x{w} not divisible by factor {factor}"),
        ));
    }
    let lead: usize = xs[..xs.len() - 2].iter().product();
    let (ho, wo) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut data = vec![0.0; lead * ho * wo];
    for l in 0..lead {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..factor {
                    let src = (l * h + oy * factor + dy) * w + ox * factor;
                    s += x.data()[src..src + factor].iter().sum::<f64>();
                }
                data[(l * ho + oy) * wo + ox] = s * norm;
            }
        }
    }
    let mut out_shape = xs[..xs.len() - 2].to_vec();
    out_shape.extend_from_slice(&[ho, wo]);
    let out = Tensor::from_vec(data, out_shape);
    record(&[x], out, move |g, _| {
        let mut dx = vec![0.0; lead * h * w];
        for l in 0..lead {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g[(l * ho + oy) * wo + ox] * norm;
                    for dy in 0..factor {
                        let dst = (l * h + oy * factor + dy) * w + ox * factor;
                        for v in &mut dx[dst..dst + factor] {
                            *v += gv;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    })
    .map_err(|_| unreachable!())
}

// ── broadcasting helpers ─────────────────────────────────────────────

/// `x[b, c, h, w] + t[b, c]` broadcast over spatial positions.
pub fn add_channel_bias(x: &Tensor, t: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 || t.shape().len() != 2 || t.shape()[0] != xs[0] || t.shape()[1] != xs[1] {
        return Err(Error::ShapeMismatch {
            op: "add_channel_bias",
            lhs: xs.to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let (b, c, pos) = (xs[0], xs[1], xs[2] * xs[3]);
    let mut data = x.data().to_vec();
    for n in 0..b {
        for ch in 0..c {
            let tv = t.data()[n * c + ch];
            let base = (n * c + ch) * pos;
            for v in &mut data[base..base + pos] {
                *v += tv;
            }
        }
    }
    let out = Tensor::from_vec(data, xs.to_vec());
    record(&[x, t], out, move |g, need| {
        let dx = need[0].then(|| g.to_vec());
        let dt = need[1].then(|| {
            let mut dt = vec![0.0; b * c];
            for n in 0..b {
                for ch in 0..c {
                    let base = (n * c + ch) * pos;
                    dt[n * c + ch] = g[base..base + pos].iter().sum();
                }
            }
            dt
        });
        vec![dx, dt]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, Tape};

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape.to_vec())
    }

    #[test]
    fn mul_matches_hand_arithmetic() {
        let r = mul(&t(&[1.0, 2.0], &[2]), &t(&[3.0, 4.0], &[2])).unwrap();
        assert_eq!(r.data(), &[3.0, 8.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = t(&[0.3, -0.7, 2.5], &[3]);
        let r = add(&x, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(r.data(), x.data());
    }

    #[test]
    fn elementwise_shape_mismatch_is_an_error() {
        assert!(add(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
        assert!(mul(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn silu_at_zero() {
        let r = silu(&t(&[0.0], &[1]));
        assert_eq!(r.data()[0], 0.0);
        // analytic derivative of x*sigmoid(x) at 0 is 1/2
        let tape = Tape::new();
        let x = tape.watch(&t(&[0.0], &[1]));
        let loss = sum_all(&silu(&x));
        let g = backward(&loss).unwrap().wrt(&x).unwrap();
        assert!((g.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let a = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let r = matmul(&eye, &a).unwrap();
        assert_eq!(r.data(), a.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[2, 1]);
        let r = matmul(&a, &b).unwrap();
        assert_eq!(r.shape(), &[2, 1]);
        assert_eq!(r.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_inner_mismatch_is_an_error() {
        assert!(matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let r = softmax(&t(&[0.0, 0.0], &[2]), 0).unwrap();
        assert_eq!(r.data(), &[0.5, 0.5]);
        let big = softmax(&t(&[1000.0, 1000.0], &[2]), 0).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
        assert!(big.is_finite());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut stream = crate::rng::Stream::derive(1, crate::rng::Purpose::Init, 0);
        let x = Tensor::randn(&[3, 7, 2], &mut stream);
        let y = softmax(&x, 1).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                let s: f64 = (0..7).map(|l| y.data()[(o * 7 + l) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12, "slice sum {s}");
                for l in 0..7 {
                    assert!(y.data()[(o * 7 + l) * 2 + i] > 0.0);
                }
            }
        }
    }

    #[test]
    fn concat_split_roundtrip_bit_identical() {
        let mut stream = crate::rng::Stream::derive(2, crate::rng::Purpose::Init, 0);
        let a = Tensor::randn(&[2, 4, 3, 5], &mut stream);
        let b = Tensor::randn(&[2, 4, 2, 5], &mut stream);
        let cat = concat(&[&a, &b], 2).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 5, 5]);
        let parts = split(&cat, &[3, 2], 2).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn concat_height_axis_shape() {
        let a = Tensor::zeros(&[1, 4, 16, 12]);
        let b = Tensor::zeros(&[1, 4, 16, 12]);
        let cat = concat(&[&a, &b], 2).unwrap();
        assert_eq!(cat.shape(), &[1, 4, 32, 12]);
    }

    #[test]
    fn concat_extent_mismatch_is_an_error() {
        let a = Tensor::zeros(&[1, 4, 16, 12]);
        let b = Tensor::zeros(&[1, 3, 16, 12]);
        assert!(concat(&[&a, &b], 2).is_err());
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut stream = crate::rng::Stream::derive(3, crate::rng::Purpose::Init, 0);
        let x = Tensor::randn(&[1, 1, 4, 4], &mut stream);
        let w = t(&[1.0], &[1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_all_ones_sums() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv2d_oversized_kernel_is_an_error() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let x = Tensor::full(&[1, 8, 2, 2], 3.7);
        let gamma = Tensor::full(&[8], 1.0);
        let beta = Tensor::zeros(&[8]);
        let y = group_norm(&x, 2, &gamma, &beta, 1e-6).unwrap();
        for v in y.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut stream = crate::rng::Stream::derive(4, crate::rng::Purpose::Init, 0);
        // Inputs scaled well above eps so the variance deficit stays < 1e-6.
        let x = scale(&Tensor::randn(&[2, 16, 3, 3], &mut stream), 4.0);
        let gamma = Tensor::full(&[16], 1.0);
        let beta = Tensor::zeros(&[16]);
        let groups = 2;
        let m = 16 / groups;
        let y = group_norm(&x, groups, &gamma, &beta, 1e-6).unwrap();
        for n in 0..2 {
            for grp in 0..groups {
                let mut vals = Vec::new();
                for j in 0..m {
                    for p in 0..9 {
                        vals.push(y.data()[((n * 16 + grp * m + j) * 9) + p]);
                    }
                }
                let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
                let var: f64 =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-10, "group mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "group var {var}");
            }
        }
    }

    #[test]
    fn group_norm_indivisible_channels_is_an_error() {
        let x = Tensor::zeros(&[1, 6, 2, 2]);
        let gamma = Tensor::full(&[6], 1.0);
        let beta = Tensor::zeros(&[6]);
        assert!(group_norm(&x, 4, &gamma, &beta, 1e-6).is_err());
    }

    #[test]
    fn upsample_nearest_block_replicates() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn avg_pool_then_upsample_fixes_block_constant() {
        let y = upsample_nearest(&t(&[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]), 4).unwrap();
        let back = avg_pool(&y, 4).unwrap();
        assert_eq!(back.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn split_sizes_must_sum() {
        let x = Tensor::zeros(&[2, 5]);
        assert!(split(&x, &[2, 2], 1).is_err());
    }

    #[test]
    fn mse_basics() {
        let a = Tensor::full(&[4], 0.0);
        let b = Tensor::full(&[4], 1.0);
        assert_eq!(mse(&a, &b).unwrap().item(), 1.0);
        assert_eq!(mse(&b, &b).unwrap().item(), 0.0);
    }

    #[test]
    fn linear_bias_broadcasts() {
        let x = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let w = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[10.0, 20.0], &[2]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut stream = crate::rng::Stream::derive(5, crate::rng::Purpose::Init, 0);
        let x = Tensor::randn(&[2, 3, 4], &mut stream);
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = permute(&y, &[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }
}
