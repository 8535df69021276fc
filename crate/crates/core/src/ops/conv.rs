//! Convolution, transposed convolution and bilinear upsampling kernels.
//!
//! Convolution uses cross-correlation semantics (no kernel flip) with zero
//! padding, lowered to GEMM via im2col. Transposed convolution is the exact
//! adjoint of `conv2d` built from the same lowering, so the inner-product
//! identity `<conv(x, w), y> == <x, conv_t(y, w)>` holds to rounding.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Weight (c_out, c_in, k, k) plus geometry. For `transposed_conv2d` the
/// weight is read as (c_in, c_out, k, k), matching the adjoint relation.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Float> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Self {
        ConvParams { weight, bias, stride, padding }
    }
}

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {k} exceeds padded input extent {padded}"),
        ));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("non-integral output size: ({input} + 2*{pad} - {k}) not divisible by stride {stride}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Lower one image (ci, h, w) into a (ci*k*k) x (oh*ow) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), ci * k * k * oh * ow);
    col.fill(T::ZERO);
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    if stride == 1 {
                        // valid ox satisfy 0 <= ox + kx - pad < w
                        let lo = pad.saturating_sub(kx);
                        let hi = ow.min(w + pad - kx);
                        if lo < hi {
                            let src = iy * w + lo + kx - pad;
                            dst[lo..hi].copy_from_slice(&plane[src..src + hi - lo]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = plane[iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add a patch matrix back onto an image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Float>(
    col: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    debug_assert_eq!(x.len(), ci * h * w);
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// out[b] = W_mat (co x ci*k*k) @ im2col(x[b])
#[allow(clippy::too_many_arguments)]
fn forward_raw<T: Float>(
    x: &[T],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    wmat: &[T],
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ckk = ci * k * k;
    let ohw = oh * ow;
    let mut out = vec![T::ZERO; n * co * ohw];
    let mut col = vec![T::ZERO; ckk * ohw];
    for b in 0..n {
        im2col(&x[b * ci * h * w..(b + 1) * ci * h * w], ci, h, w, k, stride, pad, oh, ow, &mut col);
        T::gemm(
            co,
            ckk,
            ohw,
            T::ONE,
            wmat,
            false,
            &col,
            false,
            T::ZERO,
            &mut out[b * co * ohw..(b + 1) * co * ohw],
        );
    }
    out
}

/// dx[b] = col2im(W_mat^T @ gout[b])
#[allow(clippy::too_many_arguments)]
fn grad_input_raw<T: Float>(
    gout: &[T],
    n: usize,
    co: usize,
    oh: usize,
    ow: usize,
    wmat: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ckk = ci * k * k;
    let ohw = oh * ow;
    let mut dx = vec![T::ZERO; n * ci * h * w];
    let mut col = vec![T::ZERO; ckk * ohw];
    for b in 0..n {
        T::gemm(
            ckk,
            co,
            ohw,
            T::ONE,
            wmat,
            true,
            &gout[b * co * ohw..(b + 1) * co * ohw],
            false,
            T::ZERO,
            &mut col,
        );
        col2im_add(
            &col,
            ci,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
            &mut dx[b * ci * h * w..(b + 1) * ci * h * w],
        );
    }
    dx
}

/// dW (co x ci*k*k) = sum_b gout[b] @ im2col(x[b])^T, accumulated in batch order.
#[allow(clippy::too_many_arguments)]
fn grad_weight_raw<T: Float>(
    x: &[T],
    gout: &[T],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ckk = ci * k * k;
    let ohw = oh * ow;
    let mut dw = vec![T::ZERO; co * ckk];
    let mut col = vec![T::ZERO; ckk * ohw];
    for b in 0..n {
        im2col(&x[b * ci * h * w..(b + 1) * ci * h * w], ci, h, w, k, stride, pad, oh, ow, &mut col);
        T::gemm(
            co,
            ohw,
            ckk,
            T::ONE,
            &gout[b * co * ohw..(b + 1) * co * ohw],
            false,
            &col,
            true,
            T::ONE,
            &mut dw,
        );
    }
    dw
}

/// 2-D cross-correlation with zero padding. Output spatial size is
/// (h + 2*pad - k)/stride + 1; with k odd, pad = k/2 and stride 1 the input
/// size is preserved.
pub fn conv2d<T: Float>(tape: Option<&Tape<T>>, x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    let (co, ci, k) = (ws.n, ws.c, ws.h);
    if ws.h != ws.w {
        return Err(Error::invalid("conv2d", format!("kernel must be square, got {ws}")));
    }
    if xs.c != ci {
        return Err(Error::ChannelMismatch { op: "conv2d", expected: ci, got: xs.c });
    }
    if let Some(b) = &p.bias {
        if b.numel() != co {
            return Err(Error::invalid(
                "conv2d",
                format!("bias has {} elements, expected {}", b.numel(), co),
            ));
        }
    }
    let (stride, pad) = (p.stride, p.padding);
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let oh = out_extent(xs.h, k, stride, pad)?;
    let ow = out_extent(xs.w, k, stride, pad)?;

    let mut data = forward_raw(x.data(), xs.n, ci, xs.h, xs.w, p.weight.data(), co, k, stride, pad, oh, ow);
    if let Some(bias) = &p.bias {
        let bd = bias.data();
        let ohw = oh * ow;
        for b in 0..xs.n {
            for c in 0..co {
                let base = (b * co + c) * ohw;
                let bv = bd[c];
                for v in &mut data[base..base + ohw] {
                    *v += bv;
                }
            }
        }
    }
    let mut out = Tensor::from_vec(data, Shape::new(xs.n, co, oh, ow))?;

    if let Some(tape) = tape {
        let xn = x.node();
        let wn = p.weight.node();
        let bn = p.bias.as_ref().and_then(|b| b.node());
        if xn.is_some() || wn.is_some() || bn.is_some() {
            let x_saved = x.data_arc();
            let w_saved = p.weight.data_arc();
            let (n, h, w_) = (xs.n, xs.h, xs.w);
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    if let Some(xn) = xn {
                        let dx = grad_input_raw(g, n, co, oh, ow, &w_saved, ci, h, w_, k, stride, pad);
                        sink.accumulate(xn, &dx);
                    }
                    if let Some(wn) = wn {
                        let dw = grad_weight_raw(&x_saved, g, n, ci, h, w_, co, k, stride, pad, oh, ow);
                        sink.accumulate(wn, &dw);
                    }
                    if let Some(bn) = bn {
                        let ohw = oh * ow;
                        sink.accumulate_with(bn, |buf| {
                            for b in 0..n {
                                for c in 0..co {
                                    let base = (b * co + c) * ohw;
                                    let mut s = T::ZERO;
                                    for &gv in &g[base..base + ohw] {
                                        s += gv;
                                    }
                                    buf[c] += s;
                                }
                            }
                        });
                    }
                }),
            );
            out = out.with_node(id);
        }
    }
    Ok(out)
}

/// Transposed convolution (the adjoint of `conv2d` w.r.t. its input). The
/// weight is (c_in, c_out, k, k); output spatial size is
/// (h - 1)*stride - 2*pad + k. With k = 8, stride = 2, pad = 3 the output is
/// exactly 2h x 2w.
pub fn transposed_conv2d<T: Float>(
    tape: Option<&Tape<T>>,
    x: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    let (cin, cout, k) = (ws.n, ws.c, ws.h);
    if ws.h != ws.w {
        return Err(Error::invalid("transposed_conv2d", format!("kernel must be square, got {ws}")));
    }
    if xs.c != cin {
        return Err(Error::ChannelMismatch { op: "transposed_conv2d", expected: cin, got: xs.c });
    }
    let (stride, pad) = (p.stride, p.padding);
    if stride == 0 {
        return Err(Error::invalid("transposed_conv2d", "stride must be positive"));
    }
    let oh = ((xs.h - 1) * stride + k) as isize - 2 * pad as isize;
    let ow = ((xs.w - 1) * stride + k) as isize - 2 * pad as isize;
    if oh < 1 || ow < 1 {
        return Err(Error::invalid(
            "transposed_conv2d",
            format!("non-positive output size {oh}x{ow}"),
        ));
    }
    let (oh, ow) = (oh as usize, ow as usize);
    if p.bias.is_some() {
        return Err(Error::invalid("transposed_conv2d", "bias is not supported"));
    }

    // Forward of the transpose == input-gradient of the underlying conv.
    let data = grad_input_raw(x.data(), xs.n, cin, xs.h, xs.w, p.weight.data(), cout, oh, ow, k, stride, pad);
    let mut out = Tensor::from_vec(data, Shape::new(xs.n, cout, oh, ow))?;

    if let Some(tape) = tape {
        let xn = x.node();
        let wn = p.weight.node();
        if xn.is_some() || wn.is_some() {
            let x_saved = x.data_arc();
            let w_saved = p.weight.data_arc();
            let (n, h, w_) = (xs.n, xs.h, xs.w);
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    if let Some(xn) = xn {
                        let dx = forward_raw(g, n, cout, oh, ow, &w_saved, cin, k, stride, pad, h, w_);
                        sink.accumulate(xn, &dx);
                    }
                    if let Some(wn) = wn {
                        let dw = grad_weight_raw(g, &x_saved, n, cout, oh, ow, cin, k, stride, pad, h, w_);
                        sink.accumulate(wn, &dw);
                    }
                }),
            );
            out = out.with_node(id);
        }
    }
    Ok(out)
}

/// Depthwise convolution: weight (c, 1, k, k), each filter convolves only
/// its own channel (the single-channel decoder filters).
pub fn depthwise_conv2d<T: Float>(
    tape: Option<&Tape<T>>,
    x: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    let (c, k) = (ws.n, ws.h);
    if ws.c != 1 || ws.h != ws.w {
        return Err(Error::invalid(
            "depthwise_conv2d",
            format!("weight must be (c, 1, k, k), got {ws}"),
        ));
    }
    if xs.c != c {
        return Err(Error::ChannelMismatch { op: "depthwise_conv2d", expected: c, got: xs.c });
    }
    if p.bias.is_some() {
        return Err(Error::invalid("depthwise_conv2d", "bias is not supported"));
    }
    let (stride, pad) = (p.stride, p.padding);
    let oh = out_extent(xs.h, k, stride, pad)?;
    let ow = out_extent(xs.w, k, stride, pad)?;

    let (n, h, w) = (xs.n, xs.h, xs.w);
    let xd = x.data();
    let wd = p.weight.data();
    let mut data = vec![T::ZERO; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let plane = &xd[(b * c + ch) * h * w..];
            let ker = &wd[ch * k * k..(ch + 1) * k * k];
            let out_plane = &mut data[(b * c + ch) * oh * ow..(b * c + ch + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::ZERO;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += plane[iy as usize * w + ix as usize] * ker[ky * k + kx];
                            }
                        }
                    }
                    out_plane[oy * ow + ox] = acc;
                }
            }
        }
    }
    let mut out = Tensor::from_vec(data, Shape::new(n, c, oh, ow))?;

    if let Some(tape) = tape {
        let xn = x.node();
        let wn = p.weight.node();
        if xn.is_some() || wn.is_some() {
            let x_saved = x.data_arc();
            let w_saved = p.weight.data_arc();
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    if let Some(xn) = xn {
                        sink.accumulate_with(xn, |buf| {
                            for b in 0..n {
                                for ch in 0..c {
                                    let ker = &w_saved[ch * k * k..(ch + 1) * k * k];
                                    let gp = &g[(b * c + ch) * oh * ow..];
                                    let dst = &mut buf[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                                    for oy in 0..oh {
                                        for ox in 0..ow {
                                            let gv = gp[oy * ow + ox];
                                            for ky in 0..k {
                                                let iy = (oy * stride + ky) as isize - pad as isize;
                                                if iy < 0 || iy >= h as isize {
                                                    continue;
                                                }
                                                for kx in 0..k {
                                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                                    if ix >= 0 && ix < w as isize {
                                                        dst[iy as usize * w + ix as usize] +=
                                                            gv * ker[ky * k + kx];
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        });
                    }
                    if let Some(wn) = wn {
                        sink.accumulate_with(wn, |buf| {
                            for b in 0..n {
                                for ch in 0..c {
                                    let plane = &x_saved[(b * c + ch) * h * w..];
                                    let gp = &g[(b * c + ch) * oh * ow..];
                                    let dker = &mut buf[ch * k * k..(ch + 1) * k * k];
                                    for oy in 0..oh {
                                        for ox in 0..ow {
                                            let gv = gp[oy * ow + ox];
                                            for ky in 0..k {
                                                let iy = (oy * stride + ky) as isize - pad as isize;
                                                if iy < 0 || iy >= h as isize {
                                                    continue;
                                                }
                                                for kx in 0..k {
                                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                                    if ix >= 0 && ix < w as isize {
                                                        dker[ky * k + kx] += gv
                                                            * plane[iy as usize * w + ix as usize];
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        });
                    }
                }),
            );
            out = out.with_node(id);
        }
    }
    Ok(out)
}

/// Per-channel transposed convolution with one shared fixed (1, 1, k, k)
/// kernel: the non-learned upsampling path. No gradient ever flows into the
/// kernel.
pub fn upsample_fixed<T: Float>(
    tape: Option<&Tape<T>>,
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ks = kernel.shape();
    if ks.n != 1 || ks.c != 1 || ks.h != ks.w {
        return Err(Error::invalid(
            "upsample_fixed",
            format!("kernel must be (1, 1, k, k), got {ks}"),
        ));
    }
    let k = ks.h;
    let oh = ((xs.h - 1) * stride + k) as isize - 2 * pad as isize;
    let ow = ((xs.w - 1) * stride + k) as isize - 2 * pad as isize;
    if oh < 1 || ow < 1 {
        return Err(Error::invalid("upsample_fixed", format!("non-positive output size {oh}x{ow}")));
    }
    let (oh, ow) = (oh as usize, ow as usize);
    let (n, c, h, w) = (xs.n, xs.c, xs.h, xs.w);

    let xd = x.data();
    let kd = kernel.data();
    let mut data = vec![T::ZERO; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let plane = &xd[(b * c + ch) * h * w..];
            let dst = &mut data[(b * c + ch) * oh * ow..(b * c + ch + 1) * oh * ow];
            for iy in 0..h {
                for ix in 0..w {
                    let v = plane[iy * w + ix];
                    for ky in 0..k {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox >= 0 && ox < ow as isize {
                                dst[oy as usize * ow + ox as usize] += v * kd[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = Tensor::from_vec(data, Shape::new(n, c, oh, ow))?;

    if let Some(tape) = tape {
        if let Some(xn) = x.node() {
            let k_saved: Arc<Vec<T>> = kernel.data_arc();
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    sink.accumulate_with(xn, |buf| {
                        for b in 0..n {
                            for ch in 0..c {
                                let gp = &g[(b * c + ch) * oh * ow..];
                                let dst = &mut buf[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                                for iy in 0..h {
                                    for ix in 0..w {
                                        let mut acc = T::ZERO;
                                        for ky in 0..k {
                                            let oy = (iy * stride + ky) as isize - pad as isize;
                                            if oy < 0 || oy >= oh as isize {
                                                continue;
                                            }
                                            for kx in 0..k {
                                                let ox = (ix * stride + kx) as isize - pad as isize;
                                                if ox >= 0 && ox < ow as isize {
                                                    acc += gp[oy as usize * ow + ox as usize]
                                                        * k_saved[ky * k + kx];
                                                }
                                            }
                                        }
                                        dst[iy * w + ix] += acc;
                                    }
                                }
                            }
                        }
                    });
                }),
            );
            out = out.with_node(id);
        }
    }
    Ok(out)
}

/// One-dimensional bilinear interpolation taps: a triangle of radius
/// `factor` centered at (k-1)/2, so under stride-`factor` transposed
/// convolution the taps form a partition of unity (flat fields are
/// preserved away from borders).
fn bilinear_taps<T: Float>(k: usize, factor: usize) -> Vec<T> {
    let center = (k as f64 - 1.0) / 2.0;
    (0..k)
        .map(|i| {
            let t = 1.0 - (i as f64 - center).abs() / factor as f64;
            T::from_f64(t.max(0.0))
        })
        .collect()
}

/// Per-channel bilinear interpolation kernel of shape (channels, 1, k, k):
/// w[i][j] = t(i) * t(j) with the interpolation radius f = ceil(k/2), the
/// classic upsampling-initializer formula. Each channel maps only to itself.
pub fn bilinear_kernel<T: Float>(k: usize, channels: usize) -> Tensor<T> {
    bilinear_kernel_for_stride(k, k.div_ceil(2), channels)
}

/// Per-channel bilinear kernel whose taps interpolate exactly for the given
/// upsampling `factor` (= transposed-conv stride). `bilinear_kernel` is the
/// special case factor = ceil(k/2).
pub fn bilinear_kernel_for_stride<T: Float>(k: usize, factor: usize, channels: usize) -> Tensor<T> {
    assert!(k >= 1 && factor >= 1 && channels >= 1);
    let taps = bilinear_taps::<T>(k, factor);
    let mut plane = vec![T::ZERO; k * k];
    for i in 0..k {
        for j in 0..k {
            plane[i * k + j] = taps[i] * taps[j];
        }
    }
    let mut data = Vec::with_capacity(channels * k * k);
    for _ in 0..channels {
        data.extend_from_slice(&plane);
    }
    Tensor::from_vec(data, Shape::new(channels, 1, k, k)).unwrap()
}

/// Dense (c_in, c_out, k, k) transposed-conv weight initialized to bilinear
/// interpolation: channel i upsamples onto channel i, zeros elsewhere.
pub fn bilinear_deconv_init<T: Float>(k: usize, factor: usize, channels: usize) -> Tensor<T> {
    let taps = bilinear_taps::<T>(k, factor);
    let mut data = vec![T::ZERO; channels * channels * k * k];
    for ch in 0..channels {
        let base = (ch * channels + ch) * k * k;
        for i in 0..k {
            for j in 0..k {
                data[base + i * k + j] = taps[i] * taps[j];
            }
        }
    }
    Tensor::from_vec(data, Shape::new(channels, channels, k, k)).unwrap()
}
