//! Differentiable operations.
//!
//! Layout conventions: sequences are `[batch, time, channels]`; weights of a
//! dense map are `[in, out]`; conv kernels are `[taps, in, out]`.

use std::rc::Rc;

use super::{Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Lower clamp applied to probabilities inside the cross-entropy log.
pub const PROB_FLOOR: f64 = 1e-12;
/// Added to vector norms before cosine normalisation.
pub const NORM_EPS: f64 = 1e-8;

/// `c = a·b (+ beta·c)` with `a: [m,k]` (or `[k,m]` if `a_t`) and
/// `b: [k,n]` (or `[n,k]` if `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    beta: S,
    c: &mut [S],
) {
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    S::gemm(m, k, n, S::one(), a, rsa, csa, b, rsb, csb, beta, c, n, 1);
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn dims3<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize, usize)> {
    t.expect_rank(3, what)?;
    let s = t.shape();
    Ok((s[0], s[1], s[2]))
}

pub fn add<'t, S: Scalar>(a: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>> {
    let (av, bv) = (a.value(), b.value());
    same_shape(&av, &bv, "add")?;
    let mut out = (*av).clone();
    out.add_assign(&bv);
    Ok(a.tape().record(
        out,
        &[a, b],
        Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
    ))
}

pub fn sub<'t, S: Scalar>(a: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>> {
    let (av, bv) = (a.value(), b.value());
    same_shape(&av, &bv, "sub")?;
    let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
    let out = Tensor::new(av.shape(), data)?;
    Ok(a.tape().record(
        out,
        &[a, b],
        Box::new(|g| vec![Some(g.clone()), Some(g.map(|x| -x))]),
    ))
}

/// Element-wise product.
pub fn mul<'t, S: Scalar>(a: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>> {
    let (av, bv) = (a.value(), b.value());
    same_shape(&av, &bv, "mul")?;
    let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
    let out = Tensor::new(av.shape(), data)?;
    Ok(a.tape().record(
        out,
        &[a, b],
        Box::new(move |g| {
            let ga = g.data().iter().zip(bv.data()).map(|(&d, &y)| d * y).collect();
            let gb = g.data().iter().zip(av.data()).map(|(&d, &x)| d * x).collect();
            vec![
                Some(Tensor::new(g.shape(), ga).expect("shape")),
                Some(Tensor::new(g.shape(), gb).expect("shape")),
            ]
        }),
    ))
}

pub fn scale<'t, S: Scalar>(a: Var<'t, S>, factor: f64) -> Var<'t, S> {
    let f: S = lit(factor);
    let out = a.value().map(|x| x * f);
    a.tape()
        .record(out, &[a], Box::new(move |g| vec![Some(g.map(|x| x * f))]))
}

/// Sum of all elements (accumulated in f64).
pub fn sum<'t, S: Scalar>(a: Var<'t, S>) -> Var<'t, S> {
    let av = a.value();
    let total = crate::scalar::sum_f64(av.data());
    let shape = av.shape().to_vec();
    a.tape().record(
        Tensor::scalar(S::from_f64_lossy(total)),
        &[a],
        Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))]),
    )
}

/// `Σ wᵢ·termᵢ` over scalar terms; the value is formed in f64 and rounded once.
pub fn weighted_sum<'t, S: Scalar>(terms: &[(Var<'t, S>, f64)]) -> Result<Var<'t, S>> {
    let Some((first, _)) = terms.first() else {
        return Err(Error::contract("weighted_sum of zero terms"));
    };
    let mut total = 0.0;
    for (v, w) in terms {
        let value = v.value();
        if value.numel() != 1 {
            return Err(Error::contract("weighted_sum terms must be scalars"));
        }
        total += w * value.item().to_f64_lossy();
    }
    let weights: Vec<f64> = terms.iter().map(|(_, w)| *w).collect();
    let vars: Vec<Var<'t, S>> = terms.iter().map(|(v, _)| *v).collect();
    let shapes: Vec<Vec<usize>> = vars.iter().map(|v| v.shape()).collect();
    Ok(first.tape().record(
        Tensor::scalar(S::from_f64_lossy(total)),
        &vars,
        Box::new(move |g| {
            let g = g.item();
            weights
                .iter()
                .zip(&shapes)
                .map(|(&w, shape)| Some(Tensor::full(shape, g * lit::<S>(w))))
                .collect()
        }),
    ))
}

/// `max(x, 0)`. On a tape replaying recorded gates the pass-through pattern
/// is taken from the recording.
pub fn relu<'t, S: Scalar>(a: Var<'t, S>) -> Result<Var<'t, S>> {
    let av = a.value();
    let gate = a.tape().relu_gate(&av)?;
    let out = Tensor::new(
        av.shape(),
        av.data().iter().zip(&gate).map(|(&x, &on)| if on { x } else { S::zero() }).collect(),
    )?;
    Ok(a.tape().record(
        out,
        &[a],
        Box::new(move |g| {
            let data = g.data().iter().zip(&gate).map(|(&d, &on)| if on { d } else { S::zero() }).collect();
            vec![Some(Tensor::new(g.shape(), data).expect("shape"))]
        }),
    ))
}

/// Adds `bias: [C]` along the last axis of `x: [..., C]`.
pub fn add_bias<'t, S: Scalar>(x: Var<'t, S>, bias: Var<'t, S>) -> Result<Var<'t, S>> {
    let (xv, bv) = (x.value(), bias.value());
    let c = *xv.shape().last().unwrap_or(&0);
    if bv.shape() != [c] {
        return Err(Error::contract(format!(
            "add_bias: bias {:?} does not match last axis of {:?}",
            bv.shape(),
            xv.shape()
        )));
    }
    let mut out = (*xv).clone();
    for row in out.data_mut().chunks_mut(c) {
        for (o, &b) in row.iter_mut().zip(bv.data()) {
            *o = *o + b;
        }
    }
    Ok(x.tape().record(
        out,
        &[x, bias],
        Box::new(move |g| {
            let mut gb = vec![S::zero(); c];
            for row in g.data().chunks(c) {
                for (acc, &d) in gb.iter_mut().zip(row) {
                    *acc = *acc + d;
                }
            }
            vec![Some(g.clone()), Some(Tensor::new(&[c], gb).expect("shape"))]
        }),
    ))
}

/// `x: [..., K] · w: [K, N] -> [..., N]`.
pub fn linear<'t, S: Scalar>(x: Var<'t, S>, w: Var<'t, S>) -> Result<Var<'t, S>> {
    let (xv, wv) = (x.value(), w.value());
    wv.expect_rank(2, "linear weight")?;
    let (k, n) = (wv.shape()[0], wv.shape()[1]);
    if xv.rank() == 0 || *xv.shape().last().unwrap() != k {
        return Err(Error::contract(format!(
            "linear: input {:?} incompatible with weight {:?}",
            xv.shape(),
            wv.shape()
        )));
    }
    let m = xv.numel() / k;
    let mut out_shape = xv.shape().to_vec();
    *out_shape.last_mut().unwrap() = n;
    let mut out = vec![S::zero(); m * n];
    matmul_into(m, k, n, xv.data(), false, wv.data(), false, S::zero(), &mut out);
    let x_shape = xv.shape().to_vec();
    Ok(x.tape().record(
        Tensor::new(&out_shape, out)?,
        &[x, w],
        Box::new(move |g| {
            let mut gx = vec![S::zero(); m * k];
            matmul_into(m, n, k, g.data(), false, wv.data(), true, S::zero(), &mut gx);
            let mut gw = vec![S::zero(); k * n];
            matmul_into(k, m, n, xv.data(), true, g.data(), false, S::zero(), &mut gw);
            vec![
                Some(Tensor::new(&x_shape, gx).expect("shape")),
                Some(Tensor::new(&[k, n], gw).expect("shape")),
            ]
        }),
    ))
}

/// Output length of a "same"-padded conv: `ceil(len / stride)`.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Temporal convolution with symmetric zero padding `(K-1)/2`.
///
/// `x: [B,T,Cin]`, `w: [K,Cin,Cout]`, `b: [Cout]` → `[B, ceil(T/stride), Cout]`.
pub fn conv1d<'t, S: Scalar>(
    x: Var<'t, S>,
    w: Var<'t, S>,
    b: Var<'t, S>,
    stride: usize,
) -> Result<Var<'t, S>> {
    let (xv, wv, bv) = (x.value(), w.value(), b.value());
    let (batch, len, cin) = dims3(&xv, "conv1d input")?;
    let (taps, wcin, cout) = dims3(&wv, "conv1d weight")?;
    if wcin != cin {
        return Err(Error::contract(format!(
            "conv1d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if taps % 2 == 0 {
        return Err(Error::contract("conv1d: kernel size must be odd"));
    }
    if stride == 0 {
        return Err(Error::contract("conv1d: stride must be positive"));
    }
    if bv.shape() != [cout] {
        return Err(Error::contract("conv1d: bias length must equal Cout"));
    }
    let pad = (taps - 1) / 2;
    let out_len = conv_out_len(len, stride);
    let rows = batch * out_len;
    let width = taps * cin;

    // im2col: row (b, t) holds the K·Cin receptive field of output frame t.
    let mut col = vec![S::zero(); rows * width];
    for bi in 0..batch {
        for t in 0..out_len {
            let row = &mut col[(bi * out_len + t) * width..][..width];
            for k in 0..taps {
                let src = (t * stride + k) as isize - pad as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let src = &xv.data()[(bi * len + src as usize) * cin..][..cin];
                row[k * cin..(k + 1) * cin].copy_from_slice(src);
            }
        }
    }
    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(bv.data());
    }
    matmul_into(rows, width, cout, &col, false, wv.data(), false, S::one(), &mut out);

    let col = Rc::new(col);
    Ok(x.tape().record(
        Tensor::new(&[batch, out_len, cout], out)?,
        &[x, w, b],
        Box::new(move |g| {
            let gd = g.data();
            let mut gw = vec![S::zero(); width * cout];
            matmul_into(width, rows, cout, &col, true, gd, false, S::zero(), &mut gw);
            let mut gb = vec![S::zero(); cout];
            for row in gd.chunks(cout) {
                for (acc, &d) in gb.iter_mut().zip(row) {
                    *acc = *acc + d;
                }
            }
            let mut gcol = vec![S::zero(); rows * width];
            matmul_into(rows, cout, width, gd, false, wv.data(), true, S::zero(), &mut gcol);
            let mut gx = vec![S::zero(); batch * len * cin];
            for bi in 0..batch {
                for t in 0..out_len {
                    let row = &gcol[(bi * out_len + t) * width..][..width];
                    for k in 0..taps {
                        let src = (t * stride + k) as isize - pad as isize;
                        if src < 0 || src as usize >= len {
                            continue;
                        }
                        let dst = &mut gx[(bi * len + src as usize) * cin..][..cin];
                        for (d, &v) in dst.iter_mut().zip(&row[k * cin..(k + 1) * cin]) {
                            *d = *d + v;
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(&[batch, len, cin], gx).expect("shape")),
                Some(Tensor::new(&[taps, cin, cout], gw).expect("shape")),
                Some(Tensor::new(&[cout], gb).expect("shape")),
            ]
        }),
    ))
}

/// Per-channel temporal filter, stride 1, "same" padding.
///
/// `x: [B,T,C]`, `w: [K,C]`, `b: [C]`.
pub fn depthwise_conv1d<'t, S: Scalar>(
    x: Var<'t, S>,
    w: Var<'t, S>,
    b: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let (xv, wv, bv) = (x.value(), w.value(), b.value());
    let (batch, len, ch) = dims3(&xv, "depthwise input")?;
    wv.expect_rank(2, "depthwise weight")?;
    let taps = wv.shape()[0];
    if wv.shape()[1] != ch || bv.shape() != [ch] {
        return Err(Error::contract(format!(
            "depthwise_conv1d: {ch}-channel input vs weight {:?} / bias {:?}",
            wv.shape(),
            bv.shape()
        )));
    }
    if taps % 2 == 0 {
        return Err(Error::contract("depthwise_conv1d: kernel size must be odd"));
    }
    let pad = taps / 2;
    let mut out = vec![S::zero(); batch * len * ch];
    for bi in 0..batch {
        for t in 0..len {
            let dst = &mut out[(bi * len + t) * ch..][..ch];
            dst.copy_from_slice(bv.data());
            for k in 0..taps {
                let src = (t + k) as isize - pad as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let src = &xv.data()[(bi * len + src as usize) * ch..][..ch];
                let wk = &wv.data()[k * ch..][..ch];
                for ((d, &s), &wc) in dst.iter_mut().zip(src).zip(wk) {
                    *d = *d + s * wc;
                }
            }
        }
    }
    Ok(x.tape().record(
        Tensor::new(&[batch, len, ch], out)?,
        &[x, w, b],
        Box::new(move |g| {
            let gd = g.data();
            let mut gx = vec![S::zero(); batch * len * ch];
            let mut gw = vec![S::zero(); taps * ch];
            let mut gb = vec![S::zero(); ch];
            for bi in 0..batch {
                for t in 0..len {
                    let gy = &gd[(bi * len + t) * ch..][..ch];
                    for (acc, &d) in gb.iter_mut().zip(gy) {
                        *acc = *acc + d;
                    }
                    for k in 0..taps {
                        let src = (t + k) as isize - pad as isize;
                        if src < 0 || src as usize >= len {
                            continue;
                        }
                        let off = (bi * len + src as usize) * ch;
                        let xs = &xv.data()[off..][..ch];
                        let wk = &wv.data()[k * ch..][..ch];
                        let gwk = &mut gw[k * ch..][..ch];
                        for c in 0..ch {
                            gwk[c] = gwk[c] + gy[c] * xs[c];
                        }
                        let gxs = &mut gx[off..][..ch];
                        for c in 0..ch {
                            gxs[c] = gxs[c] + gy[c] * wk[c];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(&[batch, len, ch], gx).expect("shape")),
                Some(Tensor::new(&[taps, ch], gw).expect("shape")),
                Some(Tensor::new(&[ch], gb).expect("shape")),
            ]
        }),
    ))
}

/// Depthwise K-tap filter followed by 1×1 channel mixing.
///
/// `depthwise: [K,C]`, `pointwise: [C,Cout]`, biases `[C]` and `[Cout]`.
pub fn separable_conv1d<'t, S: Scalar>(
    x: Var<'t, S>,
    depthwise: Var<'t, S>,
    depthwise_bias: Var<'t, S>,
    pointwise: Var<'t, S>,
    pointwise_bias: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let filtered = depthwise_conv1d(x, depthwise, depthwise_bias)?;
    add_bias(linear(filtered, pointwise)?, pointwise_bias)
}

/// Batch-norm mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only.
    Eval,
}

/// Per-channel normalisation over every (batch, time) position of `x: [B,T,C]`.
///
/// In train mode the batch mean and biased variance normalise the input and
/// the running statistics move towards them with momentum 0.1 (running
/// variance uses the unbiased estimate).
pub fn batch_norm<'t, S: Scalar>(
    x: Var<'t, S>,
    gamma: Var<'t, S>,
    beta: Var<'t, S>,
    running_mean: &mut Tensor<S>,
    running_var: &mut Tensor<S>,
    mode: Mode,
) -> Result<Var<'t, S>> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let (batch, len, ch) = dims3(&xv, "batch_norm input")?;
    if gv.shape() != [ch] || bv.shape() != [ch] {
        return Err(Error::contract("batch_norm: gamma/beta must have C elements"));
    }
    if running_mean.shape() != [ch] || running_var.shape() != [ch] {
        return Err(Error::contract("batch_norm: running stats must have C elements"));
    }
    let n = batch * len;
    if mode == Mode::Train && n < 2 {
        return Err(Error::contract(
            "batch_norm: train mode needs at least two positions per channel",
        ));
    }
    let xd = xv.data();

    let (mean, var) = match mode {
        Mode::Train => {
            let mut sum = vec![0.0f64; ch];
            for row in xd.chunks(ch) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v.to_f64_lossy();
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            let mut sq = vec![0.0f64; ch];
            for row in xd.chunks(ch) {
                for ((s, &v), &m) in sq.iter_mut().zip(row).zip(&mean) {
                    let d = v.to_f64_lossy() - m;
                    *s += d * d;
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
            let unbiased = n as f64 / (n - 1) as f64;
            for c in 0..ch {
                let rm = running_mean.data()[c].to_f64_lossy();
                let rv = running_var.data()[c].to_f64_lossy();
                running_mean.data_mut()[c] =
                    S::from_f64_lossy((1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean[c]);
                running_var.data_mut()[c] =
                    S::from_f64_lossy((1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * var[c] * unbiased);
            }
            (mean, var)
        }
        Mode::Eval => (
            running_mean.to_f64_vec(),
            running_var.to_f64_vec(),
        ),
    };
    let inv_std: Vec<S> = var
        .iter()
        .map(|v| S::from_f64_lossy(1.0 / (v + BN_EPS).sqrt()))
        .collect();
    let mean: Vec<S> = mean.iter().map(|&m| S::from_f64_lossy(m)).collect();

    let mut xhat = vec![S::zero(); n * ch];
    let mut out = vec![S::zero(); n * ch];
    for ((xr, hr), or) in xd.chunks(ch).zip(xhat.chunks_mut(ch)).zip(out.chunks_mut(ch)) {
        for c in 0..ch {
            let h = (xr[c] - mean[c]) * inv_std[c];
            hr[c] = h;
            or[c] = gv.data()[c] * h + bv.data()[c];
        }
    }
    Ok(x.tape().record(
        Tensor::new(&[batch, len, ch], out)?,
        &[x, gamma, beta],
        Box::new(move |g| {
            let gd = g.data();
            let gamma = gv.data();
            let mut sum_dy = vec![0.0f64; ch];
            let mut sum_dy_xhat = vec![0.0f64; ch];
            for (gr, hr) in gd.chunks(ch).zip(xhat.chunks(ch)) {
                for c in 0..ch {
                    let d = gr[c].to_f64_lossy();
                    sum_dy[c] += d;
                    sum_dy_xhat[c] += d * hr[c].to_f64_lossy();
                }
            }
            let mut gx = vec![S::zero(); n * ch];
            match mode {
                Mode::Train => {
                    let nf = n as f64;
                    let coef: Vec<(S, S, S)> = (0..ch)
                        .map(|c| {
                            let k = gamma[c].to_f64_lossy() * inv_std[c].to_f64_lossy();
                            (
                                S::from_f64_lossy(k),
                                S::from_f64_lossy(k * sum_dy[c] / nf),
                                S::from_f64_lossy(k * sum_dy_xhat[c] / nf),
                            )
                        })
                        .collect();
                    for ((gxr, gr), hr) in gx.chunks_mut(ch).zip(gd.chunks(ch)).zip(xhat.chunks(ch)) {
                        for c in 0..ch {
                            let (k, a, b) = coef[c];
                            gxr[c] = k * gr[c] - a - hr[c] * b;
                        }
                    }
                }
                Mode::Eval => {
                    for (gxr, gr) in gx.chunks_mut(ch).zip(gd.chunks(ch)) {
                        for c in 0..ch {
                            gxr[c] = gr[c] * gamma[c] * inv_std[c];
                        }
                    }
                }
            }
            let ggamma = sum_dy_xhat.iter().map(|&v| S::from_f64_lossy(v)).collect();
            let gbeta = sum_dy.iter().map(|&v| S::from_f64_lossy(v)).collect();
            vec![
                Some(Tensor::new(&[batch, len, ch], gx).expect("shape")),
                Some(Tensor::new(&[ch], ggamma).expect("shape")),
                Some(Tensor::new(&[ch], gbeta).expect("shape")),
            ]
        }),
    ))
}

/// Row-wise softmax in place over rows of width `width`.
fn softmax_rows_inplace<S: Scalar>(data: &mut [S], width: usize) {
    for row in data.chunks_mut(width) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
}

/// Attention probabilities `softmax(Q_h K_hᵀ / divisor)` for every batch item
/// and head, shaped `[B, H, T, T]`.
pub fn attention_weights<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    heads: usize,
    divisor: S,
) -> Result<Tensor<S>> {
    let (batch, len, dim) = dims3(q, "attention query")?;
    same_shape(q, k, "attention")?;
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide model width {dim}"
        )));
    }
    let dh = dim / heads;
    let inv = S::one() / divisor;
    let mut probs = vec![S::zero(); batch * heads * len * len];
    for bi in 0..batch {
        for h in 0..heads {
            let off = bi * len * dim + h * dh;
            let dst = &mut probs[(bi * heads + h) * len * len..][..len * len];
            S::gemm(
                len,
                dh,
                len,
                inv,
                &q.data()[off..],
                dim,
                1,
                &k.data()[off..],
                1,
                dim,
                S::zero(),
                dst,
                len,
                1,
            );
            softmax_rows_inplace(dst, len);
        }
    }
    Tensor::new(&[batch, heads, len, len], probs)
}

/// Multi-head scaled dot-product attention over `[B,T,D]` projections.
/// Head outputs are concatenated along the channel axis.
pub fn attention<'t, S: Scalar>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
    heads: usize,
    divisor: f64,
) -> Result<Var<'t, S>> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    same_shape(&qv, &vv, "attention")?;
    let div: S = lit(divisor);
    let probs = Rc::new(attention_weights(&qv, &kv, heads, div)?);
    let (batch, len, dim) = dims3(&qv, "attention query")?;
    let dh = dim / heads;
    let mut out = vec![S::zero(); batch * len * dim];
    for bi in 0..batch {
        for h in 0..heads {
            let off = bi * len * dim + h * dh;
            let a = &probs.data()[(bi * heads + h) * len * len..][..len * len];
            S::gemm(
                len,
                len,
                dh,
                S::one(),
                a,
                len,
                1,
                &vv.data()[off..],
                dim,
                1,
                S::zero(),
                &mut out[off..],
                dim,
                1,
            );
        }
    }
    let shape = [batch, len, dim];
    Ok(q.tape().record(
        Tensor::new(&shape, out)?,
        &[q, k, v],
        Box::new(move |g| {
            let gd = g.data();
            let inv = S::one() / div;
            let mut gq = vec![S::zero(); batch * len * dim];
            let mut gk = vec![S::zero(); batch * len * dim];
            let mut gv = vec![S::zero(); batch * len * dim];
            let mut ds = vec![S::zero(); len * len];
            for bi in 0..batch {
                for h in 0..heads {
                    let off = bi * len * dim + h * dh;
                    let a = &probs.data()[(bi * heads + h) * len * len..][..len * len];
                    // dA = dO · Vᵀ
                    S::gemm(len, dh, len, S::one(), &gd[off..], dim, 1, &vv.data()[off..], 1, dim, S::zero(), &mut ds, len, 1);
                    // dV = Aᵀ · dO
                    S::gemm(len, len, dh, S::one(), a, 1, len, &gd[off..], dim, 1, S::zero(), &mut gv[off..], dim, 1);
                    // dS = A ⊙ (dA − rowsum(dA ⊙ A))
                    for (dr, ar) in ds.chunks_mut(len).zip(a.chunks(len)) {
                        let dot: S = dr.iter().zip(ar).map(|(&x, &y)| x * y).sum();
                        for (x, &y) in dr.iter_mut().zip(ar) {
                            *x = y * (*x - dot);
                        }
                    }
                    S::gemm(len, len, dh, inv, &ds, len, 1, &kv.data()[off..], dim, 1, S::zero(), &mut gq[off..], dim, 1);
                    S::gemm(len, len, dh, inv, &ds, 1, len, &qv.data()[off..], dim, 1, S::zero(), &mut gk[off..], dim, 1);
                }
            }
            vec![
                Some(Tensor::new(&shape, gq).expect("shape")),
                Some(Tensor::new(&shape, gk).expect("shape")),
                Some(Tensor::new(&shape, gv).expect("shape")),
            ]
        }),
    ))
}

/// Rows `rows` of the leading axis, in the given order.
pub fn select_rows<'t, S: Scalar>(x: Var<'t, S>, rows: &[usize]) -> Result<Var<'t, S>> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    let Some(&batch) = shape.first() else {
        return Err(Error::contract("select_rows of a scalar"));
    };
    if let Some(&r) = rows.iter().find(|&&r| r >= batch) {
        return Err(Error::contract(format!("select_rows: row {r} of {batch}")));
    }
    let width = xv.numel() / batch.max(1);
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&xv.data()[r * width..][..width]);
    }
    let mut out_shape = shape.clone();
    out_shape[0] = rows.len();
    let rows = rows.to_vec();
    Ok(x.tape().record(
        Tensor::new(&out_shape, out)?,
        &[x],
        Box::new(move |g| {
            let mut gx = vec![S::zero(); batch * width];
            for (k, &r) in rows.iter().enumerate() {
                for (d, &v) in gx[r * width..][..width].iter_mut().zip(&g.data()[k * width..][..width]) {
                    *d = *d + v;
                }
            }
            vec![Some(Tensor::new(&shape, gx).expect("shape"))]
        }),
    ))
}

/// Mean over the time axis: `[B,T,C] -> [B,C]`.
pub fn mean_time<'t, S: Scalar>(x: Var<'t, S>) -> Result<Var<'t, S>> {
    let xv = x.value();
    let (batch, len, ch) = dims3(&xv, "mean_time")?;
    if len == 0 {
        return Err(Error::contract("mean_time over zero frames"));
    }
    let mut out = vec![S::zero(); batch * ch];
    for bi in 0..batch {
        let mut acc = vec![0.0f64; ch];
        for t in 0..len {
            for (a, &v) in acc.iter_mut().zip(&xv.data()[(bi * len + t) * ch..][..ch]) {
                *a += v.to_f64_lossy();
            }
        }
        for (o, a) in out[bi * ch..][..ch].iter_mut().zip(acc) {
            *o = S::from_f64_lossy(a / len as f64);
        }
    }
    let inv: S = lit(1.0 / len as f64);
    Ok(x.tape().record(
        Tensor::new(&[batch, ch], out)?,
        &[x],
        Box::new(move |g| {
            let mut gx = vec![S::zero(); batch * len * ch];
            for bi in 0..batch {
                let gr = &g.data()[bi * ch..][..ch];
                for t in 0..len {
                    for (d, &v) in gx[(bi * len + t) * ch..][..ch].iter_mut().zip(gr) {
                        *d = v * inv;
                    }
                }
            }
            vec![Some(Tensor::new(&[batch, len, ch], gx).expect("shape"))]
        }),
    ))
}

/// Keeps the first `frames` time steps of `[B,T,C]`.
pub fn narrow_time<'t, S: Scalar>(x: Var<'t, S>, frames: usize) -> Result<Var<'t, S>> {
    let xv = x.value();
    let (batch, len, ch) = dims3(&xv, "narrow_time")?;
    if frames > len {
        return Err(Error::contract(format!(
            "narrow_time: {frames} frames requested from {len}"
        )));
    }
    if frames == len {
        return Ok(x);
    }
    let mut out = Vec::with_capacity(batch * frames * ch);
    for bi in 0..batch {
        out.extend_from_slice(&xv.data()[bi * len * ch..][..frames * ch]);
    }
    Ok(x.tape().record(
        Tensor::new(&[batch, frames, ch], out)?,
        &[x],
        Box::new(move |g| {
            let mut gx = vec![S::zero(); batch * len * ch];
            for bi in 0..batch {
                gx[bi * len * ch..][..frames * ch]
                    .copy_from_slice(&g.data()[bi * frames * ch..][..frames * ch]);
            }
            vec![Some(Tensor::new(&[batch, len, ch], gx).expect("shape"))]
        }),
    ))
}

/// Softmax over the last axis.
pub fn softmax<'t, S: Scalar>(x: Var<'t, S>) -> Result<Var<'t, S>> {
    let xv = x.value();
    let width = *xv
        .shape()
        .last()
        .ok_or_else(|| Error::contract("softmax of a scalar"))?;
    let mut out = (*xv).clone();
    softmax_rows_inplace(out.data_mut(), width);
    let y = Rc::new(out.clone());
    Ok(x.tape().record(
        out,
        &[x],
        Box::new(move |g| {
            let mut gx = vec![S::zero(); y.numel()];
            for ((gxr, gr), yr) in gx
                .chunks_mut(width)
                .zip(g.data().chunks(width))
                .zip(y.data().chunks(width))
            {
                let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &d), &p) in gxr.iter_mut().zip(gr).zip(yr) {
                    *o = p * (d - dot);
                }
            }
            vec![Some(Tensor::new(y.shape(), gx).expect("shape"))]
        }),
    ))
}

/// `−(1/B) Σ_b Σ_c y·log(max(p, 1e-12))` for probabilities `p: [B,C]` and
/// one-hot targets `y: [B,C]`.
pub fn cross_entropy<'t, S: Scalar>(p: Var<'t, S>, targets: &Tensor<S>) -> Result<Var<'t, S>> {
    let pv = p.value();
    pv.expect_rank(2, "cross_entropy probabilities")?;
    same_shape(&pv, targets, "cross_entropy")?;
    let (batch, classes) = (pv.shape()[0], pv.shape()[1]);
    if batch == 0 {
        return Err(Error::contract("cross_entropy over an empty batch"));
    }
    let mut truth = Vec::with_capacity(batch);
    for row in targets.data().chunks(classes) {
        let ones: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == S::one())
            .map(|(i, _)| i)
            .collect();
        let zeros = row.iter().filter(|&&v| v == S::zero()).count();
        if ones.len() != 1 || zeros != classes - 1 {
            return Err(Error::contract("cross_entropy: targets must be one-hot rows"));
        }
        truth.push(ones[0]);
    }
    let floor: S = lit(PROB_FLOOR);
    let loss: f64 = truth
        .iter()
        .enumerate()
        .map(|(b, &c)| -pv.data()[b * classes + c].max(floor).to_f64_lossy().ln())
        .sum::<f64>()
        / batch as f64;
    Ok(p.tape().record(
        Tensor::scalar(S::from_f64_lossy(loss)),
        &[p],
        Box::new(move |g| {
            let scale = g.item() / lit::<S>(batch as f64);
            let mut gp = vec![S::zero(); batch * classes];
            for (b, &c) in truth.iter().enumerate() {
                let pb = pv.data()[b * classes + c];
                if pb >= floor {
                    gp[b * classes + c] = -scale / pb;
                }
            }
            vec![Some(Tensor::new(&[batch, classes], gp).expect("shape"))]
        }),
    ))
}

/// Mean squared element difference.
pub fn mse<'t, S: Scalar>(a: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>> {
    let (av, bv) = (a.value(), b.value());
    same_shape(&av, &bv, "mse")?;
    let n = av.numel();
    if n == 0 {
        return Err(Error::contract("mse of empty tensors"));
    }
    let diff: Vec<S> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
    let loss = diff
        .iter()
        .map(|d| {
            let d = d.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let shape = av.shape().to_vec();
    Ok(a.tape().record(
        Tensor::scalar(S::from_f64_lossy(loss)),
        &[a, b],
        Box::new(move |g| {
            let k = g.item() * lit::<S>(2.0 / n as f64);
            let ga: Vec<S> = diff.iter().map(|&d| d * k).collect();
            let gb: Vec<S> = ga.iter().map(|&d| -d).collect();
            vec![
                Some(Tensor::new(&shape, ga).expect("shape")),
                Some(Tensor::new(&shape, gb).expect("shape")),
            ]
        }),
    ))
}

/// `(1/B) Σ_b ‖x_b‖²` for `x: [B,D]`.
pub fn batch_mean_sq_norm<'t, S: Scalar>(x: Var<'t, S>) -> Result<Var<'t, S>> {
    let xv = x.value();
    xv.expect_rank(2, "batch_mean_sq_norm")?;
    let batch = xv.shape()[0];
    if batch == 0 {
        return Err(Error::contract("batch_mean_sq_norm over an empty batch"));
    }
    let loss = xv
        .data()
        .iter()
        .map(|v| {
            let v = v.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        / batch as f64;
    Ok(x.tape().record(
        Tensor::scalar(S::from_f64_lossy(loss)),
        &[x],
        Box::new(move |g| {
            let k = g.item() * lit::<S>(2.0 / batch as f64);
            vec![Some(xv.map(|v| v * k))]
        }),
    ))
}

fn normalize_rows<S: Scalar>(x: &[S], dim: usize) -> (Vec<S>, Vec<f64>) {
    let mut out = vec![S::zero(); x.len()];
    let mut norms = Vec::with_capacity(x.len() / dim);
    for (src, dst) in x.chunks(dim).zip(out.chunks_mut(dim)) {
        let r = src
            .iter()
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt();
        let inv = S::from_f64_lossy(1.0 / (r + NORM_EPS));
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s * inv;
        }
        norms.push(r);
    }
    (out, norms)
}

/// Gradient of `x / (‖x‖ + ε)` given the upstream gradient on the normalised rows.
fn normalize_rows_backward<S: Scalar>(x: &[S], norms: &[f64], g: &[S], dim: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (((xr, gr), dst), &r) in x.chunks(dim).zip(g.chunks(dim)).zip(out.chunks_mut(dim)).zip(norms) {
        let denom = r + NORM_EPS;
        let a = 1.0 / denom;
        let b = if r > 0.0 {
            let xg: f64 = xr.iter().zip(gr).map(|(&p, &q)| p.to_f64_lossy() * q.to_f64_lossy()).sum();
            xg / (r * denom * denom)
        } else {
            0.0
        };
        for ((d, &xv), &gv) in dst.iter_mut().zip(xr).zip(gr) {
            *d = S::from_f64_lossy(a * gv.to_f64_lossy() - b * xv.to_f64_lossy());
        }
    }
    out
}

const LOCAL_BLOCK: usize = 256;

/// Frame-level contrastive loss between two views `[B,F,D]`.
///
/// Every frame of `anchor` is an anchor; its positive is the frame at the same
/// (item, time) position of `other`, and the denominator runs over all B·F
/// frames of `other` (positive included). Similarities are cosine divided by
/// `tau`; the result is the mean over all anchors of `−log(pos / Σ)`.
pub fn local_contrastive<'t, S: Scalar>(
    anchor: Var<'t, S>,
    other: Var<'t, S>,
    tau: f64,
) -> Result<Var<'t, S>> {
    let (av, ov) = (anchor.value(), other.value());
    same_shape(&av, &ov, "local_contrastive")?;
    let (batch, frames, dim) = dims3(&av, "local_contrastive")?;
    if tau <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let n = batch * frames;
    if n == 0 {
        return Err(Error::contract("local_contrastive over zero frames"));
    }
    let (na, norm_a) = normalize_rows(av.data(), dim);
    let (no, norm_o) = normalize_rows(ov.data(), dim);
    let inv_tau: S = lit(1.0 / tau);

    let mut lse = vec![0.0f64; n];
    let mut total = 0.0f64;
    let mut block = vec![S::zero(); LOCAL_BLOCK * n];
    for start in (0..n).step_by(LOCAL_BLOCK) {
        let rows = LOCAL_BLOCK.min(n - start);
        let sims = &mut block[..rows * n];
        S::gemm(rows, dim, n, inv_tau, &na[start * dim..], dim, 1, &no, 1, dim, S::zero(), sims, n, 1);
        for (r, row) in sims.chunks(n).enumerate() {
            let i = start + r;
            let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum();
            lse[i] = max + s.ln();
            total += lse[i] - row[i].to_f64_lossy();
        }
    }
    let loss = total / n as f64;
    let shape = [batch, frames, dim];
    Ok(anchor.tape().record(
        Tensor::scalar(S::from_f64_lossy(loss)),
        &[anchor, other],
        Box::new(move |g| {
            let scale = g.item().to_f64_lossy() / n as f64;
            let mut g_na = vec![S::zero(); n * dim];
            let mut g_no = vec![S::zero(); n * dim];
            let mut block = vec![S::zero(); LOCAL_BLOCK.min(n) * n];
            for start in (0..n).step_by(LOCAL_BLOCK) {
                let rows = LOCAL_BLOCK.min(n - start);
                let ds = &mut block[..rows * n];
                S::gemm(rows, dim, n, inv_tau, &na[start * dim..], dim, 1, &no, 1, dim, S::zero(), ds, n, 1);
                // dL/dsim = scale · (softmax − onehot), then fold in 1/τ.
                for (r, row) in ds.chunks_mut(n).enumerate() {
                    let i = start + r;
                    for (j, v) in row.iter_mut().enumerate() {
                        let p = (v.to_f64_lossy() - lse[i]).exp();
                        let d = if i == j { p - 1.0 } else { p };
                        *v = S::from_f64_lossy(d * scale);
                    }
                }
                S::gemm(rows, n, dim, inv_tau, ds, n, 1, &no, dim, 1, S::zero(), &mut g_na[start * dim..], dim, 1);
                S::gemm(n, rows, dim, inv_tau, ds, 1, n, &na[start * dim..], dim, 1, S::one(), &mut g_no, dim, 1);
            }
            let ga = normalize_rows_backward(av.data(), &norm_a, &g_na, dim);
            let go = normalize_rows_backward(ov.data(), &norm_o, &g_no, dim);
            vec![
                Some(Tensor::new(&shape, ga).expect("shape")),
                Some(Tensor::new(&shape, go).expect("shape")),
            ]
        }),
    ))
}
