//! Elementwise arithmetic and reductions.

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// out[i] = a[i] + b[i]. Shapes must match exactly; gradients pass through
/// unchanged to both inputs.
pub fn add<T: Float>(tape: Option<&Tape<T>>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "add", left: a.shape(), right: b.shape() });
    }
    let data: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
    let mut out = Tensor::from_vec(data, a.shape())?;
    if let Some(tape) = tape {
        let (an, bn) = (a.node(), b.node());
        if an.is_some() || bn.is_some() {
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    if let Some(an) = an {
                        sink.accumulate(an, g);
                    }
                    if let Some(bn) = bn {
                        sink.accumulate(bn, g);
                    }
                }),
            );
            out = out.with_node(id);
        }
    }
    Ok(out)
}

/// Elementwise product.
pub fn mul<T: Float>(tape: Option<&Tape<T>>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "mul", left: a.shape(), right: b.shape() });
    }
    let data: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
    let mut out = Tensor::from_vec(data, a.shape())?;
    if let Some(tape) = tape {
        let (an, bn) = (a.node(), b.node());
        if an.is_some() || bn.is_some() {
            let a_data = a.data_arc();
            let b_data = b.data_arc();
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    if let Some(an) = an {
                        sink.accumulate_with(an, |buf| {
                            for ((dst, &gi), &bi) in buf.iter_mut().zip(g).zip(b_data.iter()) {
                                *dst += gi * bi;
                            }
                        });
                    }
                    if let Some(bn) = bn {
                        sink.accumulate_with(bn, |buf| {
                            for ((dst, &gi), &ai) in buf.iter_mut().zip(g).zip(a_data.iter()) {
                                *dst += gi * ai;
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

/// out[i] = k * x[i].
pub fn scale<T: Float>(tape: Option<&Tape<T>>, x: &Tensor<T>, k: T) -> Tensor<T> {
    let data: Vec<T> = x.iter().map(|&v| v * k).collect();
    let mut out = Tensor::from_vec(data, x.shape()).unwrap();
    if let Some(tape) = tape {
        if let Some(xn) = x.node() {
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    sink.accumulate_with(xn, |buf| {
                        for (dst, &gi) in buf.iter_mut().zip(g) {
                            *dst += gi * k;
                        }
                    });
                }),
            );
            out = out.with_node(id);
        }
    }
    out
}

/// Scalar sum of every element, accumulated in double precision.
pub fn sum_all<T: Float>(tape: Option<&Tape<T>>, x: &Tensor<T>) -> Tensor<T> {
    let total: f64 = x.iter().map(|v| v.to_f64()).sum();
    let mut out = Tensor::scalar(T::from_f64(total));
    if let Some(tape) = tape {
        if let Some(xn) = x.node() {
            let numel = x.numel();
            let id = tape.record(
                1,
                Box::new(move |g, sink| {
                    let g0 = g[0];
                    sink.accumulate_with(xn, |buf| {
                        for dst in buf.iter_mut().take(numel) {
                            *dst += g0;
                        }
                    });
                }),
            );
            out = out.with_node(id);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use crate::tape::backward;

    fn vec4(v: Vec<f64>) -> Tensor<f64> {
        let n = v.len();
        Tensor::from_vec(v, Shape::new(1, 1, 1, n)).unwrap()
    }

    #[test]
    fn add_identity_and_values() {
        let a = vec4(vec![1.0, 2.0]);
        let z = Tensor::zeros(a.shape());
        assert_eq!(add(None, &a, &z).unwrap().data(), a.data());
        let b = vec4(vec![3.0, 4.0]);
        assert_eq!(add(None, &a, &b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 4));
        let b = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 3));
        let msg = add(None, &a, &b).unwrap_err().to_string();
        assert!(msg.contains("1x2x3x4") && msg.contains("1x2x4x3"), "{msg}");
    }

    #[test]
    fn add_gradient_is_ones_for_both() {
        let tape = Tape::new();
        let a = tape.leaf(&vec4(vec![1.0, 2.0]));
        let b = tape.leaf(&vec4(vec![5.0, 6.0]));
        let s = add(Some(&tape), &a, &b).unwrap();
        let loss = sum_all(Some(&tape), &s);
        let grads = backward(&tape, &loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.wrt(&b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn sum_all_trivial_values() {
        assert_eq!(sum_all(None, &Tensor::<f64>::zeros(Shape::new(2, 3, 4, 4))).item(), 0.0);
        assert_eq!(sum_all(None, &Tensor::<f64>::ones(Shape::new(1, 1, 2, 2))).item(), 4.0);
    }

    #[test]
    fn sum_all_matches_sequential_double_accumulation() {
        // sequential accumulation oracle, independent of sum_all's path
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut vals = Vec::new();
        for _ in 0..4096 {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            vals.push(((rng >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0);
        }
        let mut oracle = 0.0f64;
        for &v in &vals {
            oracle += v;
        }
        let t = Tensor::from_vec(vals, Shape::new(1, 1, 64, 64)).unwrap();
        let got = sum_all(None, &t).item();
        let rel = (got - oracle).abs() / oracle.abs().max(1e-12);
        assert!(rel < 1e-9, "rel error {rel}");
    }
}
