//! Batch normalization and local contrast normalization.

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Per-channel batch statistics from a training-mode forward pass. The
/// variance is the biased (population) estimate used for normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

fn check_channels<T: Float>(op: &'static str, x: &Tensor<T>, per_channel: &Tensor<T>) -> Result<usize> {
    let c = x.shape().c;
    if per_channel.numel() != c {
        return Err(Error::ChannelMismatch { op, expected: c, got: per_channel.numel() });
    }
    Ok(c)
}

/// Training-mode batch norm: normalize each channel over (n, h, w) with the
/// batch mean/variance, then scale and shift. Pure: running statistics are
/// folded in separately via [`update_running_stats`].
pub fn batch_norm_train<T: Float>(
    tape: Option<&Tape<T>>,
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    epsilon: f64,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let c = check_channels("batch_norm", x, scale)?;
    check_channels("batch_norm", x, shift)?;
    let s = x.shape();
    let (n, h, w) = (s.n, s.h, s.w);
    let hw = h * w;
    let count = n * hw;
    let xd = x.data();

    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for &v in &xd[base..base + hw] {
                acc += v.to_f64();
            }
        }
        let mu = acc / count as f64;
        let mut sq = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for &v in &xd[base..base + hw] {
                let d = v.to_f64() - mu;
                sq += d * d;
            }
        }
        mean[ch] = T::from_f64(mu);
        var[ch] = T::from_f64(sq / count as f64);
    }

    let inv_std: Vec<T> =
        var.iter().map(|&v| T::from_f64(1.0 / (v.to_f64() + epsilon).sqrt())).collect();
    let sd = scale.data();
    let bd = shift.data();
    let mut xhat = vec![T::ZERO; xd.len()];
    let mut out = vec![T::ZERO; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (mu, istd, ga, be) = (mean[ch], inv_std[ch], sd[ch], bd[ch]);
            for i in base..base + hw {
                let xh = (xd[i] - mu) * istd;
                xhat[i] = xh;
                out[i] = ga * xh + be;
            }
        }
    }
    let mut out = Tensor::from_vec(out, s)?;
    let stats = BatchStats { mean, var, count };

    if let Some(tape) = tape {
        let xn = x.node();
        let gn = scale.node();
        let bn = shift.node();
        if xn.is_some() || gn.is_some() || bn.is_some() {
            let xhat = std::sync::Arc::new(xhat);
            let gamma = scale.data_arc();
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    // per-channel reductions shared by all three gradients
                    let mut sum_g = vec![T::ZERO; c];
                    let mut sum_gx = vec![T::ZERO; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let mut s0 = T::ZERO;
                            let mut s1 = T::ZERO;
                            for i in base..base + hw {
                                s0 += g[i];
                                s1 += g[i] * xhat[i];
                            }
                            sum_g[ch] += s0;
                            sum_gx[ch] += s1;
                        }
                    }
                    if let Some(bn) = bn {
                        sink.accumulate(bn, &sum_g);
                    }
                    if let Some(gn) = gn {
                        sink.accumulate(gn, &sum_gx);
                    }
                    if let Some(xn) = xn {
                        let m = T::from_f64(count as f64);
                        sink.accumulate_with(xn, |buf| {
                            for b in 0..n {
                                for ch in 0..c {
                                    let base = (b * c + ch) * hw;
                                    let coeff = gamma[ch] * inv_std[ch];
                                    let mg = sum_g[ch] / m;
                                    let mgx = sum_gx[ch] / m;
                                    for i in base..base + hw {
                                        buf[i] += coeff * (g[i] - mg - xhat[i] * mgx);
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
    Ok((out, stats))
}

/// Eval-mode batch norm: normalize with the running statistics only; the
/// output does not depend on the rest of the batch.
pub fn batch_norm_eval<T: Float>(
    tape: Option<&Tape<T>>,
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    epsilon: f64,
) -> Result<Tensor<T>> {
    let c = check_channels("batch_norm", x, scale)?;
    check_channels("batch_norm", x, shift)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::ChannelMismatch { op: "batch_norm", expected: c, got: running_mean.len() });
    }
    let s = x.shape();
    let (n, hw) = (s.n, s.h * s.w);
    let xd = x.data();
    let sd = scale.data();
    let bd = shift.data();
    let inv_std: Vec<T> =
        running_var.iter().map(|&v| T::from_f64(1.0 / (v.to_f64() + epsilon).sqrt())).collect();
    let mut out = vec![T::ZERO; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (mu, istd, ga, be) = (running_mean[ch], inv_std[ch], sd[ch], bd[ch]);
            for i in base..base + hw {
                out[i] = ga * (xd[i] - mu) * istd + be;
            }
        }
    }
    let mut out = Tensor::from_vec(out, s)?;

    if let Some(tape) = tape {
        let xn = x.node();
        let gn = scale.node();
        let bn = shift.node();
        if xn.is_some() || gn.is_some() || bn.is_some() {
            let x_saved = x.data_arc();
            let gamma = scale.data_arc();
            let rm: Vec<T> = running_mean.to_vec();
            let id = tape.record(
                out.numel(),
                Box::new(move |g, sink| {
                    if let Some(bn) = bn {
                        sink.accumulate_with(bn, |buf| {
                            for b in 0..n {
                                for ch in 0..c {
                                    let base = (b * c + ch) * hw;
                                    for i in base..base + hw {
                                        buf[ch] += g[i];
                                    }
                                }
                            }
                        });
                    }
                    if let Some(gn) = gn {
                        sink.accumulate_with(gn, |buf| {
                            for b in 0..n {
                                for ch in 0..c {
                                    let base = (b * c + ch) * hw;
                                    for i in base..base + hw {
                                        buf[ch] += g[i] * (x_saved[i] - rm[ch]) * inv_std[ch];
                                    }
                                }
                            }
                        });
                    }
                    if let Some(xn) = xn {
                        sink.accumulate_with(xn, |buf| {
                            for b in 0..n {
                                for ch in 0..c {
                                    let base = (b * c + ch) * hw;
                                    let coeff = gamma[ch] * inv_std[ch];
                                    for i in base..base + hw {
                                        buf[i] += g[i] * coeff;
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

/// Exponential-moving-average update of running statistics. The running
/// variance stores the unbiased estimate, the usual eval-time convention.
pub fn update_running_stats<T: Float>(
    running_mean: &mut [T],
    running_var: &mut [T],
    stats: &BatchStats<T>,
    momentum: f64,
) {
    let m = stats.count as f64;
    let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    for ch in 0..running_mean.len() {
        let rm = running_mean[ch].to_f64() * (1.0 - momentum) + stats.mean[ch].to_f64() * momentum;
        let rv = running_var[ch].to_f64() * (1.0 - momentum)
            + stats.var[ch].to_f64() * unbias * momentum;
        running_mean[ch] = T::from_f64(rm);
        running_var[ch] = T::from_f64(rv.max(0.0));
    }
}

/// Local contrast normalization: per-channel subtractive then divisive
/// normalization over a Gaussian-weighted window. Border weights are
/// renormalized to the in-image mass, and the divisor is floored at its
/// per-channel spatial mean so flat regions do not amplify noise. Pure
/// preprocessing; not recorded on any tape.
pub fn local_contrast_normalize<T: Float>(img: &Tensor<T>, window: usize, sigma: f64) -> Tensor<T> {
    assert!(window % 2 == 1 && window >= 1, "window must be odd");
    assert!(sigma > 0.0);
    let s = img.shape();
    let (n, c, h, w) = (s.n, s.c, s.h, s.w);
    let r = (window / 2) as isize;
    let mut weights = vec![0.0f64; window * window];
    for dy in -r..=r {
        for dx in -r..=r {
            let g = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            weights[((dy + r) as usize) * window + (dx + r) as usize] = g;
        }
    }

    let xd = img.data();
    let mut out = vec![T::ZERO; xd.len()];
    let mut centered = vec![0.0f64; h * w];
    let mut local_sd = vec![0.0f64; h * w];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            let plane = &xd[base..base + h * w];
            // subtractive: x - renormalized Gaussian mean
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    let mut mass = 0.0;
                    for dy in -r..=r {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in -r..=r {
                            let xx = x as isize + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let wgt = weights[((dy + r) as usize) * window + (dx + r) as usize];
                            acc += wgt * plane[yy as usize * w + xx as usize].to_f64();
                            mass += wgt;
                        }
                    }
                    centered[y * w + x] = plane[y * w + x].to_f64() - acc / mass;
                }
            }
            // divisive: weighted local standard deviation, floored at its mean
            let mut sd_sum = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    let mut mass = 0.0;
                    for dy in -r..=r {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in -r..=r {
                            let xx = x as isize + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let wgt = weights[((dy + r) as usize) * window + (dx + r) as usize];
                            let v = centered[yy as usize * w + xx as usize];
                            acc += wgt * v * v;
                            mass += wgt;
                        }
                    }
                    let sd = (acc / mass).sqrt();
                    local_sd[y * w + x] = sd;
                    sd_sum += sd;
                }
            }
            let sd_mean = sd_sum / (h * w) as f64;
            if sd_mean <= 1e-9 {
                // zero-contrast channel: the residual is pure roundoff
                for i in 0..h * w {
                    out[base + i] = T::ZERO;
                }
                continue;
            }
            for i in 0..h * w {
                let denom = local_sd[i].max(sd_mean);
                out[base + i] = T::from_f64(centered[i] / denom);
            }
        }
    }
    Tensor::from_vec(out, s).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
        let data: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    fn per_channel(vals: Vec<f64>) -> Tensor<f64> {
        let c = vals.len();
        Tensor::from_vec(vals, Shape::new(1, c, 1, 1)).unwrap()
    }

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, Shape::new(3, 2, 4, 4));
        let scale = per_channel(vec![1.0, 1.0]);
        let shift = per_channel(vec![0.0, 0.0]);
        let (y, _) = batch_norm_train(None, &x, &scale, &shift, 1e-12).unwrap();
        for ch in 0..2 {
            let mut vals = Vec::new();
            for b in 0..3 {
                for i in 0..16 {
                    vals.push(y.data()[(b * 2 + ch) * 16 + i]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {ch} var {var}");
        }
    }

    #[test]
    fn inverse_transform_recovers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, Shape::new(2, 2, 4, 4));
        // first pass to learn the batch stats
        let (_, stats) =
            batch_norm_train(None, &x, &per_channel(vec![1.0; 2]), &per_channel(vec![0.0; 2]), 0.0)
                .unwrap();
        let sigma: Vec<f64> = stats.var.iter().map(|v| v.sqrt()).collect();
        let (y, _) =
            batch_norm_train(None, &x, &per_channel(sigma), &per_channel(stats.mean.clone()), 0.0)
                .unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_mode_depends_only_on_running_stats() {
        let scale = per_channel(vec![2.0]);
        let shift = per_channel(vec![1.0]);
        let rm = [0.5];
        let rv = [4.0];
        let x1 = Tensor::from_vec(vec![0.5, 2.5, 0.5, 0.5], Shape::new(1, 1, 2, 2)).unwrap();
        let y = batch_norm_eval(None, &x1, &scale, &shift, &rm, &rv, 0.0).unwrap();
        // (x - 0.5)/2 * 2 + 1 = x - 0.5 + 1
        assert_eq!(y.data(), &[1.0, 3.0, 1.0, 1.0]);
        // a different batch context would not change per-element outputs
        let x2 = Tensor::from_vec(vec![0.5, 100.0, -50.0, 0.5], Shape::new(1, 1, 2, 2)).unwrap();
        let y2 = batch_norm_eval(None, &x2, &scale, &shift, &rm, &rv, 0.0).unwrap();
        assert_eq!(y2.data()[0], 1.0);
        assert_eq!(y2.data()[3], 1.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
        let bad = per_channel(vec![1.0, 1.0]);
        assert!(batch_norm_train(None, &x, &bad, &bad, 1e-5).is_err());
    }

    #[test]
    fn running_stats_update_is_ema() {
        let mut rm = vec![0.0f64];
        let mut rv = vec![1.0f64];
        let stats = BatchStats { mean: vec![2.0], var: vec![8.0], count: 5 };
        update_running_stats(&mut rm, &mut rv, &stats, 0.1);
        assert!((rm[0] - 0.2).abs() < 1e-12);
        // unbiased var = 8 * 5/4 = 10 -> 0.9*1 + 0.1*10 = 1.9
        assert!((rv[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn lcn_constant_image_is_all_zero() {
        let img = Tensor::<f64>::full(Shape::new(1, 3, 12, 12), 0.7);
        let out = local_contrast_normalize(&img, 9, 2.0);
        for &v in out.iter() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn lcn_interior_windows_have_near_zero_mean() {
        // smooth (locally linear) input: a gentle two-axis ramp, which the
        // subtractive step removes exactly away from the borders
        let (h, w) = (32, 32);
        let mut data = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = 0.3 + 0.01 * y as f64 + 0.02 * x as f64;
            }
        }
        let img = Tensor::from_vec(data, Shape::new(1, 1, h, w)).unwrap();
        let out = local_contrast_normalize(&img, 9, 2.0);
        // windowed-mean oracle over 9x9 windows whose pixels all had fully
        // in-image normalization windows (center at least 8 from the border)
        for cy in (8..h - 8).step_by(2) {
            for cx in (8..w - 8).step_by(2) {
                let mut acc = 0.0;
                for dy in 0..9 {
                    for dx in 0..9 {
                        acc += out.at(0, 0, cy + dy - 4, cx + dx - 4);
                    }
                }
                let mean = acc / 81.0;
                assert!(mean.abs() < 1e-3, "window ({cy},{cx}) mean {mean}");
            }
        }
    }

    #[test]
    fn lcn_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = rand_tensor(&mut rng, Shape::new(1, 3, 16, 16));
        let a = local_contrast_normalize(&img, 9, 2.0);
        let b = local_contrast_normalize(&img, 9, 2.0);
        assert_eq!(a.data(), b.data());
    }
}
