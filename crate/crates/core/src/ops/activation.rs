//! Pointwise non-linearities and the channel softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Elementwise max(0, x). The subgradient at exactly 0 is taken as 0.
pub fn relu<T: Float>(tape: Option<&Tape<T>>, x: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = x.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
    let mut out = Tensor::from_vec(data, x.shape()).unwrap();
    if let Some(tape) = tape {
        if let Some(xn) = x.node() {
            let saved = x.data_arc();
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    sink.accumulate_with(xn, |buf| {
                        for ((dst, &gi), &xi) in buf.iter_mut().zip(g).zip(saved.iter()) {
                            if xi > T::ZERO {
                                *dst += gi;
                            }
                        }
                    });
                }),
            );
            out = out.with_node(id);
        }
    }
    out
}

/// Per-pixel softmax over the channel axis, computed with max subtraction.
/// Channel sums are 1 at every pixel.
pub fn softmax_channels<T: Float>(tape: Option<&Tape<T>>, x: &Tensor<T>) -> Tensor<T> {
    let shape = x.shape();
    let (n, c, hw) = (shape.n, shape.c, shape.h * shape.w);
    let xd = x.data();
    let mut data = vec![T::ZERO; xd.len()];
    for b in 0..n {
        for p in 0..hw {
            let base = b * c * hw + p;
            let mut m = xd[base];
            for ch in 1..c {
                m = m.maximum(xd[base + ch * hw]);
            }
            let mut denom = 0.0f64;
            for ch in 0..c {
                let e = (xd[base + ch * hw] - m).exp();
                data[base + ch * hw] = e;
                denom += e.to_f64();
            }
            let inv = T::from_f64(1.0 / denom);
            for ch in 0..c {
                data[base + ch * hw] *= inv;
            }
        }
    }
    let mut out = Tensor::from_vec(data, shape).unwrap();
    if let Some(tape) = tape {
        if let Some(xn) = x.node() {
            let probs = out.data_arc();
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    sink.accumulate_with(xn, |buf| {
                        for b in 0..n {
                            for p in 0..hw {
                                let base = b * c * hw + p;
                                let mut dot = T::ZERO;
                                for ch in 0..c {
                                    let i = base + ch * hw;
                                    dot += g[i] * probs[i];
                                }
                                for ch in 0..c {
                                    let i = base + ch * hw;
                                    buf[i] += probs[i] * (g[i] - dot);
                                }
                            }
                        }
                    });
                }),
            );
            out = out.with_node(id);
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate); eval mode is the identity.
pub fn dropout<T: Float>(
    tape: Option<&Tape<T>>,
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    seed: u64,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", format!("rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<bool> = (0..x.numel()).map(|_| rng.random::<f64>() >= rate).collect();
    let data: Vec<T> = x
        .iter()
        .zip(&mask)
        .map(|(&v, &keep)| if keep { v * keep_scale } else { T::ZERO })
        .collect();
    let mut out = Tensor::from_vec(data, x.shape())?;
    if let Some(tape) = tape {
        if let Some(xn) = x.node() {
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    sink.accumulate_with(xn, |buf| {
                        for ((dst, &gi), &keep) in buf.iter_mut().zip(g).zip(&mask) {
                            if keep {
                                *dst += gi * keep_scale;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use crate::ops::sum_all;
    use crate::tape::backward;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0], Shape::new(1, 3, 1, 1)).unwrap();
        assert_eq!(relu::<f64>(None, &x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_is_positive_mask() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![-1.5, 0.0, 2.5], Shape::new(1, 3, 1, 1)).unwrap());
        let y = relu(Some(&tape), &x);
        let loss = sum_all(Some(&tape), &y);
        let grads = backward(&tape, &loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_uniform_logits_gives_uniform_probs() {
        let x = Tensor::<f64>::full(Shape::new(1, 4, 2, 2), 3.7);
        let p = softmax_channels(None, &x);
        for &v in p.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let vals = vec![0.3, -1.2, 2.0, 0.5, 1.1, -0.7, 0.0, 0.9];
        let shape = Shape::new(1, 2, 2, 2);
        let x = Tensor::<f64>::from_vec(vals.clone(), shape).unwrap();
        let shifted =
            Tensor::<f64>::from_vec(vals.iter().map(|v| v + 100.0).collect(), shape).unwrap();
        let p1 = softmax_channels(None, &x);
        let p2 = softmax_channels(None, &shifted);
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // channel sums are 1 at every pixel
        for pix in 0..4 {
            let s = p1.data()[pix] + p1.data()[4 + pix];
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], Shape::new(1, 1, 2, 2)).unwrap();
        assert_eq!(dropout(None, &x, 0.0, Mode::Train, 1).unwrap().data(), x.data());
        assert_eq!(dropout(None, &x, 0.9, Mode::Eval, 1).unwrap().data(), x.data());
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 2, 2));
        assert!(dropout(None, &x, 1.0, Mode::Train, 1).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_within_three_sigma() {
        let n = 40_000usize;
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 200, 200));
        let y = dropout(None, &x, 0.5, Mode::Train, 42).unwrap();
        let survivors = y.iter().filter(|&&v| v != 0.0).count() as f64;
        let mean = n as f64 * 0.5;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((survivors - mean).abs() < 3.0 * sigma, "survivors {survivors} vs mean {mean}");
        // inverted scaling: survivors carry 1/(1-rate)
        assert!(y.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
    }
}
