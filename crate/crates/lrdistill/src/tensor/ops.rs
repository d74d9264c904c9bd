//! Differentiable operations.
//!
//! Every op builds the forward result and registers a backward rule on the
//! output node. Shape errors that indicate caller bugs panic; contract-level
//! errors (conv channel mismatch) return `Result`.

use super::{BackCtx, Scalar, Tensor};
use rayon::prelude::*;

// ── GEMM kernels ─────────────────────────────────────────────────────

/// c[m,n] += a[m,k] @ b[k,n]
pub(crate) fn gemm<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
        }
    }
}

/// c[m,n] += a[m,k] @ b[n,k]^T
pub(crate) fn gemm_abt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            crow[j] += dot(arow, brow);
        }
    }
}

/// c[m,n] += a[k,m]^T @ b[k,n]
pub(crate) fn gemm_atb<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
        }
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let off = i * 4;
        for l in 0..4 {
            acc[l] = a[off + l].mul_add(b[off + l], acc[l]);
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = a[i].mul_add(b[i], s);
    }
    s
}

// ── Elementwise helpers ──────────────────────────────────────────────

fn unary<S: Scalar>(
    x: &Tensor<S>,
    fwd: impl Fn(S) -> S,
    // dy/dx as a function of (input element, output element)
    bwd: impl Fn(S, S) -> S + 'static,
) -> Tensor<S> {
    let data: Vec<S> = x.data().iter().map(|&v| fwd(v)).collect();
    let shape = x.shape().to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let xs = ctx.inputs[0].data();
            let g: Vec<S> = ctx
                .grad_out
                .iter()
                .zip(xs.iter().zip(ctx.out_data.iter()))
                .map(|(&go, (&xi, &yi))| go * bwd(xi, yi))
                .collect();
            vec![Some(g)]
        }),
    )
}

fn assert_same_shape<S: Scalar>(op: &str, a: &Tensor<S>, b: &Tensor<S>) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: operand shapes {:?} and {:?} differ",
        a.shape(),
        b.shape()
    );
}

// ── Elementwise ops ──────────────────────────────────────────────────

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_same_shape("add", a, b);
    let data: Vec<S> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let shape = a.shape().to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(|ctx: &BackCtx<'_, S>| {
            vec![
                ctx.needs[0].then(|| ctx.grad_out.to_vec()),
                ctx.needs[1].then(|| ctx.grad_out.to_vec()),
            ]
        }),
    )
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_same_shape("sub", a, b);
    let data: Vec<S> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x - y)
        .collect();
    let shape = a.shape().to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(|ctx: &BackCtx<'_, S>| {
            vec![
                ctx.needs[0].then(|| ctx.grad_out.to_vec()),
                ctx.needs[1]
                    .then(|| ctx.grad_out.iter().map(|&g| -g).collect()),
            ]
        }),
    )
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_same_shape("mul", a, b);
    let data: Vec<S> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    let shape = a.shape().to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(|ctx: &BackCtx<'_, S>| {
            let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            vec![
                ctx.needs[0].then(|| {
                    ctx.grad_out
                        .iter()
                        .zip(bv.iter())
                        .map(|(&g, &y)| g * y)
                        .collect()
                }),
                ctx.needs[1].then(|| {
                    ctx.grad_out
                        .iter()
                        .zip(av.iter())
                        .map(|(&g, &x)| g * x)
                        .collect()
                }),
            ]
        }),
    )
}

/// a*x + b with constant coefficients.
pub fn affine<S: Scalar>(x: &Tensor<S>, a: f64, b: f64) -> Tensor<S> {
    let (sa, sb) = (S::from_f64(a), S::from_f64(b));
    unary(x, |v| sa.mul_add(v, sb), move |_, _| sa)
}

pub fn scale<S: Scalar>(x: &Tensor<S>, a: f64) -> Tensor<S> {
    affine(x, a, 0.0)
}

pub fn neg<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    scale(x, -1.0)
}

/// Elementwise minimum; ties route the gradient to the first operand.
pub fn minimum<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_same_shape("minimum", a, b);
    let data: Vec<S> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| if x <= y { x } else { y })
        .collect();
    let shape = a.shape().to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(|ctx: &BackCtx<'_, S>| {
            let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut ga = vec![S::zero(); av.len()];
            let mut gb = vec![S::zero(); bv.len()];
            for i in 0..av.len() {
                if av[i] <= bv[i] {
                    ga[i] = ctx.grad_out[i];
                } else {
                    gb[i] = ctx.grad_out[i];
                }
            }
            vec![
                ctx.needs[0].then_some(ga),
                ctx.needs[1].then_some(gb),
            ]
        }),
    )
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    unary(
        x,
        |v| if v > S::zero() { v } else { S::zero() },
        |xi, _| if xi > S::zero() { S::one() } else { S::zero() },
    )
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    unary(
        x,
        |v| {
            if v >= S::zero() {
                S::one() / (S::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (S::one() + e)
            }
        },
        |_, yi| yi * (S::one() - yi),
    )
}

/// ln(sigmoid(x)), computed without overflow for large |x|.
pub fn log_sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    unary(
        x,
        |v| v.min(S::zero()) - (-v.abs()).exp().ln_1p(),
        // d/dx ln σ(x) = σ(-x)
        |xi, _| {
            if xi >= S::zero() {
                let e = (-xi).exp();
                e / (S::one() + e)
            } else {
                S::one() / (S::one() + xi.exp())
            }
        },
    )
}

pub fn abs<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    unary(
        x,
        |v| v.abs(),
        |xi, _| {
            if xi > S::zero() {
                S::one()
            } else if xi < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        },
    )
}

/// Natural logarithm; caller guarantees positive inputs.
pub fn ln<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    unary(x, |v| v.ln(), |xi, _| S::one() / xi)
}

pub fn exp<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    unary(x, |v| v.exp(), |_, yi| yi)
}

// ── Reductions ───────────────────────────────────────────────────────

pub fn sum_all<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut s = S::zero();
    for &v in x.data() {
        s += v;
    }
    Tensor::from_op(
        vec![s],
        vec![1],
        vec![x.clone()],
        Box::new(|ctx: &BackCtx<'_, S>| {
            let g = ctx.grad_out[0];
            vec![Some(vec![g; ctx.inputs[0].numel()])]
        }),
    )
}

pub fn mean_all<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let n = x.numel();
    let inv = S::from_f64(1.0 / n as f64);
    let mut s = S::zero();
    for &v in x.data() {
        s += v;
    }
    Tensor::from_op(
        vec![s * inv],
        vec![1],
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let g = ctx.grad_out[0] * inv;
            vec![Some(vec![g; ctx.inputs[0].numel()])]
        }),
    )
}

// ── Broadcast multiplies ─────────────────────────────────────────────

/// x * s where s is a single-element tensor.
pub fn scale_by<S: Scalar>(x: &Tensor<S>, s: &Tensor<S>) -> Tensor<S> {
    assert_eq!(s.numel(), 1, "scale_by: scale tensor must have one element");
    let sv = s.data()[0];
    let data: Vec<S> = x.data().iter().map(|&v| v * sv).collect();
    let shape = x.shape().to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![x.clone(), s.clone()],
        Box::new(|ctx: &BackCtx<'_, S>| {
            let xv = ctx.inputs[0].data();
            let sv = ctx.inputs[1].data()[0];
            let gx = ctx.needs[0].then(|| {
                ctx.grad_out.iter().map(|&g| g * sv).collect::<Vec<S>>()
            });
            let gs = ctx.needs[1].then(|| {
                let mut acc = S::zero();
                for (g, x) in ctx.grad_out.iter().zip(xv.iter()) {
                    acc += *g * *x;
                }
                vec![acc]
            });
            vec![gx, gs]
        }),
    )
}

/// x[n, ...] * w[n] with one weight per leading-axis slice.
pub fn mul_per_sample<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Tensor<S> {
    let n = x.shape()[0];
    assert_eq!(
        w.numel(),
        n,
        "mul_per_sample: weight count {} != leading extent {}",
        w.numel(),
        n
    );
    let per = x.numel() / n;
    let mut data = x.data().to_vec();
    for i in 0..n {
        let wv = w.data()[i];
        for v in &mut data[i * per..(i + 1) * per] {
            *v = *v * wv;
        }
    }
    let shape = x.shape().to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![x.clone(), w.clone()],
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let xv = ctx.inputs[0].data();
            let wv = ctx.inputs[1].data();
            let gx = ctx.needs[0].then(|| {
                let mut g = ctx.grad_out.to_vec();
                for i in 0..n {
                    for v in &mut g[i * per..(i + 1) * per] {
                        *v = *v * wv[i];
                    }
                }
                g
            });
            let gw = ctx.needs[1].then(|| {
                let mut g = vec![S::zero(); n];
                for i in 0..n {
                    let mut acc = S::zero();
                    for j in i * per..(i + 1) * per {
                        acc += ctx.grad_out[j] * xv[j];
                    }
                    g[i] = acc;
                }
                g
            });
            vec![gx, gw]
        }),
    )
}

/// x[n, c, ...] * w[n, c] with one weight per (sample, channel) pair.
pub fn mul_per_channel<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    assert!(s.len() >= 2, "mul_per_channel: rank must be >= 2");
    let (n, c) = (s[0], s[1]);
    assert_eq!(
        w.numel(),
        n * c,
        "mul_per_channel: weight count {} != N*C {}",
        w.numel(),
        n * c
    );
    let inner: usize = s[2..].iter().product();
    let mut data = x.data().to_vec();
    for p in 0..n * c {
        let wv = w.data()[p];
        for v in &mut data[p * inner..(p + 1) * inner] {
            *v = *v * wv;
        }
    }
    let shape = s.to_vec();
    Tensor::from_op(
        data,
        shape,
        vec![x.clone(), w.clone()],
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let xv = ctx.inputs[0].data();
            let wv = ctx.inputs[1].data();
            let gx = ctx.needs[0].then(|| {
                let mut g = ctx.grad_out.to_vec();
                for p in 0..n * c {
                    for v in &mut g[p * inner..(p + 1) * inner] {
                        *v = *v * wv[p];
                    }
                }
                g
            });
            let gw = ctx.needs[1].then(|| {
                let mut g = vec![S::zero(); n * c];
                for p in 0..n * c {
                    let mut acc = S::zero();
                    for j in p * inner..(p + 1) * inner {
                        acc += ctx.grad_out[j] * xv[j];
                    }
                    g[p] = acc;
                }
                g
            });
            vec![gx, gw]
        }),
    )
}

// ── Shape ops ────────────────────────────────────────────────────────

/// Concatenate along axis 1. All inputs share every other extent.
pub fn concat_channels<S: Scalar>(parts: &[Tensor<S>]) -> Tensor<S> {
    assert!(!parts.is_empty(), "concat_channels: no inputs");
    let first = parts[0].shape();
    assert!(first.len() >= 2, "concat_channels: rank must be >= 2");
    let n = first[0];
    let inner: usize = first[2..].iter().product();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        assert_eq!(s[0], n, "concat_channels: leading extents differ");
        assert_eq!(
            s[2..].iter().product::<usize>(),
            inner,
            "concat_channels: trailing extents differ"
        );
        c_total += s[1];
    }
    let mut shape = first.to_vec();
    shape[1] = c_total;
    let mut data = vec![S::zero(); n * c_total * inner];
    let mut off_c = 0;
    for p in parts {
        let ci = p.shape()[1];
        let pd = p.data();
        for b in 0..n {
            let dst = (b * c_total + off_c) * inner;
            let src = b * ci * inner;
            data[dst..dst + ci * inner].copy_from_slice(&pd[src..src + ci * inner]);
        }
        off_c += ci;
    }
    let channels: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    Tensor::from_op(
        data,
        shape,
        parts.to_vec(),
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let mut grads = Vec::with_capacity(ctx.inputs.len());
            let mut off_c = 0;
            for (idx, &ci) in channels.iter().enumerate() {
                if ctx.needs[idx] {
                    let mut g = vec![S::zero(); n * ci * inner];
                    for b in 0..n {
                        let src = (b * c_total + off_c) * inner;
                        let dst = b * ci * inner;
                        g[dst..dst + ci * inner]
                            .copy_from_slice(&ctx.grad_out[src..src + ci * inner]);
                    }
                    grads.push(Some(g));
                } else {
                    grads.push(None);
                }
                off_c += ci;
            }
            grads
        }),
    )
}

/// Channels `[start, end)` along axis 1.
pub fn slice_channels<S: Scalar>(x: &Tensor<S>, start: usize, end: usize) -> Tensor<S> {
    let s = x.shape();
    assert!(s.len() >= 2, "slice_channels: rank must be >= 2");
    assert!(
        start < end && end <= s[1],
        "slice_channels: range {start}..{end} out of {} channels",
        s[1]
    );
    let n = s[0];
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let co = end - start;
    let mut shape = s.to_vec();
    shape[1] = co;
    let mut data = vec![S::zero(); n * co * inner];
    let xd = x.data();
    for b in 0..n {
        let src = (b * c + start) * inner;
        let dst = b * co * inner;
        data[dst..dst + co * inner].copy_from_slice(&xd[src..src + co * inner]);
    }
    Tensor::from_op(
        data,
        shape,
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let mut g = vec![S::zero(); n * c * inner];
            for b in 0..n {
                let dst = (b * c + start) * inner;
                let src = b * co * inner;
                g[dst..dst + co * inner].copy_from_slice(&ctx.grad_out[src..src + co * inner]);
            }
            vec![Some(g)]
        }),
    )
}

// ── Dense layers ─────────────────────────────────────────────────────

/// x[N,Fin] @ w[Fout,Fin]^T + b[Fout]
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (xs, ws) = (x.shape(), w.shape());
    assert_eq!(xs.len(), 2, "linear: input must be rank 2");
    assert_eq!(ws.len(), 2, "linear: weight must be rank 2");
    assert_eq!(
        xs[1], ws[1],
        "linear: input features {} != weight fan-in {}",
        xs[1], ws[1]
    );
    let (n, fin, fout) = (xs[0], xs[1], ws[0]);
    assert_eq!(b.numel(), fout, "linear: bias length != fan-out");
    let mut data = vec![S::zero(); n * fout];
    gemm_abt(x.data(), w.data(), &mut data, n, fin, fout);
    for r in 0..n {
        for (o, bv) in b.data().iter().enumerate() {
            data[r * fout + o] += *bv;
        }
    }
    Tensor::from_op(
        data,
        vec![n, fout],
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let (xv, wv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = ctx.grad_out;
            let gx = ctx.needs[0].then(|| {
                let mut gx = vec![S::zero(); n * fin];
                gemm(g, wv, &mut gx, n, fout, fin);
                gx
            });
            let gw = ctx.needs[1].then(|| {
                let mut gw = vec![S::zero(); fout * fin];
                gemm_atb(g, xv, &mut gw, fout, n, fin);
                gw
            });
            let gb = ctx.needs[2].then(|| {
                let mut gb = vec![S::zero(); fout];
                for r in 0..n {
                    for o in 0..fout {
                        gb[o] += g[r * fout + o];
                    }
                }
                gb
            });
            vec![gx, gw, gb]
        }),
    )
}

// ── Convolution ──────────────────────────────────────────────────────

fn conv_out_size(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    input: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [S],
) {
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let plane = ho * wo;
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = row + oy * wo;
                    if iy < 0 || iy >= h as isize {
                        cols[dst..dst + wo].fill(S::zero());
                        continue;
                    }
                    let src_row = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        cols[dst + ox] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            input[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc<S: Scalar>(
    cols: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [S],
) {
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(w, kw, stride, pad);
    let plane = ho * wo;
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst_row + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation over NCHW input.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> crate::Result<Tensor<S>> {
    let is = input.shape();
    let ws = weight.shape();
    if is.len() != 4 || ws.len() != 4 {
        return Err(crate::Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("expected rank-4 input/weight, got {:?} and {:?}", is, ws),
        });
    }
    if is[1] != ws[1] {
        return Err(crate::Error::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "input channels {} != weight fan-in channels {}",
                is[1], ws[1]
            ),
        });
    }
    assert!(stride >= 1, "conv2d: stride must be >= 1");
    let (n, c_in, h, w) = (is[0], is[1], is[2], is[3]);
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(crate::Error::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            ),
        });
    }
    assert_eq!(bias.numel(), c_out, "conv2d: bias length != output channels");
    let ho = conv_out_size(h, kh, stride, padding);
    let wo = conv_out_size(w, kw, stride, padding);
    let ksize = c_in * kh * kw;
    let plane = ho * wo;

    let mut data = vec![S::zero(); n * c_out * plane];
    let in_plane = c_in * h * w;
    let xd = input.data();
    let wd = weight.data();
    let bd = bias.data();
    data.par_chunks_mut(c_out * plane)
        .enumerate()
        .for_each(|(b, out_n)| {
            let mut cols = vec![S::zero(); ksize * plane];
            im2col(
                &xd[b * in_plane..(b + 1) * in_plane],
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                &mut cols,
            );
            gemm(wd, &cols, out_n, c_out, ksize, plane);
            for co in 0..c_out {
                let bv = bd[co];
                for v in &mut out_n[co * plane..(co + 1) * plane] {
                    *v += bv;
                }
            }
        });

    Ok(Tensor::from_op(
        data,
        vec![n, c_out, ho, wo],
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let xd = ctx.inputs[0].data();
            let wd = ctx.inputs[1].data();
            let g = ctx.grad_out;
            let need_x = ctx.needs[0];
            let need_w = ctx.needs[1];

            // Per-sample partials computed in parallel, reduced in index order.
            let partials: Vec<(Option<Vec<S>>, Option<Vec<S>>)> = (0..n)
                .into_par_iter()
                .map(|b| {
                    let mut cols = vec![S::zero(); ksize * plane];
                    im2col(
                        &xd[b * in_plane..(b + 1) * in_plane],
                        c_in,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        padding,
                        &mut cols,
                    );
                    let gn = &g[b * c_out * plane..(b + 1) * c_out * plane];
                    let dw_n = need_w.then(|| {
                        let mut dw = vec![S::zero(); c_out * ksize];
                        gemm_abt(gn, &cols, &mut dw, c_out, plane, ksize);
                        dw
                    });
                    let dx_n = need_x.then(|| {
                        let mut dcols = vec![S::zero(); ksize * plane];
                        gemm_atb(wd, gn, &mut dcols, ksize, c_out, plane);
                        let mut dx = vec![S::zero(); in_plane];
                        col2im_acc(&dcols, c_in, h, w, kh, kw, stride, padding, &mut dx);
                        dx
                    });
                    (dx_n, dw_n)
                })
                .collect();

            let gx = need_x.then(|| {
                let mut dx = vec![S::zero(); n * in_plane];
                for (b, (dx_n, _)) in partials.iter().enumerate() {
                    dx[b * in_plane..(b + 1) * in_plane]
                        .copy_from_slice(dx_n.as_ref().unwrap());
                }
                dx
            });
            let gw = need_w.then(|| {
                let mut dw = vec![S::zero(); c_out * ksize];
                for (_, dw_n) in &partials {
                    for (a, &v) in dw.iter_mut().zip(dw_n.as_ref().unwrap().iter()) {
                        *a += v;
                    }
                }
                dw
            });
            let gb = ctx.needs[2].then(|| {
                let mut db = vec![S::zero(); c_out];
                for b in 0..n {
                    for co in 0..c_out {
                        let base = (b * c_out + co) * plane;
                        let mut acc = S::zero();
                        for &v in &g[base..base + plane] {
                            acc += v;
                        }
                        db[co] += acc;
                    }
                }
                db
            });
            vec![gx, gw, gb]
        }),
    ))
}

// ── Spatial ops ──────────────────────────────────────────────────────

/// Mean over the two trailing spatial axes: [N,C,H,W] -> [N,C].
pub fn global_average_pool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "global_average_pool: input must be rank 4");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(h >= 1 && w >= 1);
    let plane = h * w;
    let inv = S::from_f64(1.0 / plane as f64);
    let xd = x.data();
    let mut data = vec![S::zero(); n * c];
    for i in 0..n * c {
        let mut acc = S::zero();
        for &v in &xd[i * plane..(i + 1) * plane] {
            acc += v;
        }
        data[i] = acc * inv;
    }
    Tensor::from_op(
        data,
        vec![n, c],
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let mut g = vec![S::zero(); n * c * plane];
            for i in 0..n * c {
                let gv = ctx.grad_out[i] * inv;
                g[i * plane..(i + 1) * plane].fill(gv);
            }
            vec![Some(g)]
        }),
    )
}

/// Softmax over the trailing axis, stabilized by max subtraction.
pub fn softmax<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    let k = *s.last().expect("softmax: rank must be >= 1");
    assert!(k >= 1);
    let rows = x.numel() / k;
    let xd = x.data();
    let mut data = vec![S::zero(); x.numel()];
    for r in 0..rows {
        let row = &xd[r * k..(r + 1) * k];
        let out = &mut data[r * k..(r + 1) * k];
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut denom = S::zero();
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            let e = (v - m).exp();
            *o = e;
            denom += e;
        }
        for o in out.iter_mut() {
            *o = *o / denom;
        }
    }
    Tensor::from_op(
        data,
        s.to_vec(),
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let y = ctx.out_data;
            let mut g = vec![S::zero(); y.len()];
            for r in 0..rows {
                let yr = &y[r * k..(r + 1) * k];
                let gr = &ctx.grad_out[r * k..(r + 1) * k];
                let mut dotv = S::zero();
                for (gy, yy) in gr.iter().zip(yr.iter()) {
                    dotv += *gy * *yy;
                }
                for j in 0..k {
                    g[r * k + j] = yr[j] * (gr[j] - dotv);
                }
            }
            vec![Some(g)]
        }),
    )
}

/// Nearest-neighbor 2x upsample: each pixel becomes a 2x2 block.
pub fn upsample_nearest_2x<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "upsample_nearest_2x: input must be rank 4");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut data = vec![S::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut data[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for xcol in 0..w {
                let v = src[y * w + xcol];
                let base = (2 * y) * wo + 2 * xcol;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + wo] = v;
                dst[base + wo + 1] = v;
            }
        }
    }
    Tensor::from_op(
        data,
        vec![n, c, ho, wo],
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let mut g = vec![S::zero(); n * c * h * w];
            for p in 0..n * c {
                let src = &ctx.grad_out[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut g[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for xcol in 0..w {
                        let base = (2 * y) * wo + 2 * xcol;
                        dst[y * w + xcol] =
                            (src[base] + src[base + 1]) + (src[base + wo] + src[base + wo + 1]);
                    }
                }
            }
            vec![Some(g)]
        }),
    )
}

/// Max pooling with square kernel; ties keep the first element in scan order.
pub fn max_pool2d<S: Scalar>(x: &Tensor<S>, kernel: usize, stride: usize) -> Tensor<S> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "max_pool2d: input must be rank 4");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert!(kernel >= 1 && stride >= 1 && h >= kernel && w >= kernel);
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let xd = x.data();
    let mut data = vec![S::zero(); n * c * ho * wo];
    let mut argmax = vec![0usize; n * c * ho * wo];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = src[oy * stride * w + ox * stride];
                let mut best_i = oy * stride * w + ox * stride;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let idx = (oy * stride + ki) * w + ox * stride + kj;
                        if src[idx] > best {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                data[o] = best;
                argmax[o] = p * h * w + best_i;
            }
        }
    }
    Tensor::from_op(
        data,
        vec![n, c, ho, wo],
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx<'_, S>| {
            let mut g = vec![S::zero(); n * c * h * w];
            for (o, &src_idx) in argmax.iter().enumerate() {
                g[src_idx] += ctx.grad_out[o];
            }
            vec![Some(g)]
        }),
    )
}
