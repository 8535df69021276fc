//! 2x2/stride-2 max pooling with argmax capture, and the index-driven
//! unpooling that consumes those records.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Per-window argmax records from 2x2 max pooling. Each code is 2 bits in
/// row-major window order (0 = top-left, 1 = top-right, 2 = bottom-left,
/// 3 = bottom-right), packed four to a byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    n: usize,
    c: usize,
    h_out: usize,
    w_out: usize,
    packed: Arc<Vec<u8>>,
}

impl PoolIndices {
    fn new_filled(n: usize, c: usize, h_out: usize, w_out: usize) -> PoolIndices {
        let count = n * c * h_out * w_out;
        PoolIndices { n, c, h_out, w_out, packed: Arc::new(vec![0u8; count.div_ceil(4)]) }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h_out, self.w_out)
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h_out * self.w_out
    }

    /// Exactly 2 bits per pooling window per channel, rounded up to bytes.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len()
    }

    #[inline]
    pub fn code(&self, flat: usize) -> u8 {
        (self.packed[flat / 4] >> ((flat % 4) * 2)) & 0b11
    }

    #[inline]
    fn set_code(packed: &mut [u8], flat: usize, code: u8) {
        debug_assert!(code < 4);
        packed[flat / 4] |= code << ((flat % 4) * 2);
    }

    #[inline]
    pub fn code_at(&self, n: usize, c: usize, y: usize, x: usize) -> u8 {
        self.code(((n * self.c + c) * self.h_out + y) * self.w_out + x)
    }
}

/// Max pooling with a 2x2 window and stride 2 (non-overlapping). Returns the
/// pooled values and the 2-bit argmax codes; ties break to the first
/// position in row-major window order. Odd spatial sizes are rejected.
pub fn maxpool2x2<T: Float>(
    tape: Option<&Tape<T>>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, PoolIndices)> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::invalid(
            "maxpool2x2",
            format!("spatial size {}x{} is smaller than the 2x2 window", s.h, s.w),
        ));
    }
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2x2",
            format!("spatial size {}x{} must be even (no implicit padding)", s.h, s.w),
        ));
    }
    let (n, c, h, w) = (s.n, s.c, s.h, s.w);
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![T::ZERO; n * c * ho * wo];
    let mut idx = PoolIndices::new_filled(n, c, ho, wo);
    {
        let packed = Arc::get_mut(&mut idx.packed).unwrap();
        for b in 0..n {
            for ch in 0..c {
                let plane = &xd[(b * c + ch) * h * w..];
                let out_base = (b * c + ch) * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let top = 2 * oy * w + 2 * ox;
                        let vals = [plane[top], plane[top + 1], plane[top + w], plane[top + w + 1]];
                        let mut best = 0usize;
                        for i in 1..4 {
                            if vals[i] > vals[best] {
                                best = i;
                            }
                        }
                        let flat = out_base + oy * wo + ox;
                        out[flat] = vals[best];
                        PoolIndices::set_code(packed, flat, best as u8);
                    }
                }
            }
        }
    }
    let mut out = Tensor::from_vec(out, Shape::new(n, c, ho, wo))?;

    if let Some(tape) = tape {
        if let Some(xn) = x.node() {
            let codes = idx.clone();
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    sink.accumulate_with(xn, |buf| {
                        for b in 0..n {
                            for ch in 0..c {
                                let dst = &mut buf[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                                let out_base = (b * c + ch) * ho * wo;
                                for oy in 0..ho {
                                    for ox in 0..wo {
                                        let flat = out_base + oy * wo + ox;
                                        let code = codes.code(flat) as usize;
                                        let dy = code / 2;
                                        let dx = code % 2;
                                        dst[(2 * oy + dy) * w + 2 * ox + dx] += g[flat];
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
    Ok((out, idx))
}

/// Scatter each value to its recorded window position; the other three
/// positions of every 2x2 window are zero. `out_h`/`out_w` must cover the
/// pooled windows (at least 2x the input extent).
pub fn max_unpool2x2<T: Float>(
    tape: Option<&Tape<T>>,
    x: &Tensor<T>,
    idx: &PoolIndices,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let (n, c, h, w) = (s.n, s.c, s.h, s.w);
    if idx.dims() != (n, c, h, w) {
        let (dn, dc, dh, dw) = idx.dims();
        return Err(Error::ShapeMismatch {
            op: "max_unpool2x2",
            left: s,
            right: Shape::new(dn, dc, dh, dw),
        });
    }
    if out_h < 2 * h || out_w < 2 * w {
        return Err(Error::invalid(
            "max_unpool2x2",
            format!("output {out_h}x{out_w} cannot hold {h}x{w} pooled windows"),
        ));
    }
    let xd = x.data();
    let mut data = vec![T::ZERO; n * c * out_h * out_w];
    for b in 0..n {
        for ch in 0..c {
            let src_base = (b * c + ch) * h * w;
            let dst = &mut data[(b * c + ch) * out_h * out_w..(b * c + ch + 1) * out_h * out_w];
            for y in 0..h {
                for x_ in 0..w {
                    let flat = src_base + y * w + x_;
                    let code = idx.code(flat) as usize;
                    let dy = code / 2;
                    let dx = code % 2;
                    dst[(2 * y + dy) * out_w + 2 * x_ + dx] = xd[flat];
                }
            }
        }
    }
    let mut out = Tensor::from_vec(data, Shape::new(n, c, out_h, out_w))?;

    if let Some(tape) = tape {
        if let Some(xn) = x.node() {
            let codes = idx.clone();
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    sink.accumulate_with(xn, |buf| {
                        for b in 0..n {
                            for ch in 0..c {
                                let src_base = (b * c + ch) * h * w;
                                let gp = &g[(b * c + ch) * out_h * out_w..];
                                for y in 0..h {
                                    for x_ in 0..w {
                                        let flat = src_base + y * w + x_;
                                        let code = codes.code(flat) as usize;
                                        let dy = code / 2;
                                        let dx = code % 2;
                                        buf[flat] += gp[(2 * y + dy) * out_w + 2 * x_ + dx];
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
