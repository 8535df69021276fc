//! Class-balanced summed cross-entropy and the frequency statistics that
//! drive it.

use std::sync::Arc;

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Balancing {
    MedianFrequency,
    NaturalFrequency,
}

impl Balancing {
    pub fn name(self) -> &'static str {
        match self {
            Balancing::MedianFrequency => "median_frequency",
            Balancing::NaturalFrequency => "natural_frequency",
        }
    }

    pub fn from_name(s: &str) -> Option<Balancing> {
        match s {
            "median_frequency" => Some(Balancing::MedianFrequency),
            "natural_frequency" => Some(Balancing::NaturalFrequency),
            _ => None,
        }
    }
}

/// Which pixel count divides a class's pixel total when computing its
/// frequency.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FreqDenominator {
    /// Non-ignored pixels of the images in which the class appears.
    PresenceWeighted,
    /// Non-ignored pixels of the whole training set.
    WholeSet,
}

/// Per-class loss weights.
#[derive(Clone, Debug)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub mode: Balancing,
}

impl ClassWeights {
    /// Natural-frequency balancing: every weight is exactly 1.
    pub fn natural(num_classes: usize) -> ClassWeights {
        ClassWeights { weights: vec![1.0; num_classes], mode: Balancing::NaturalFrequency }
    }
}

/// freq[c] = (pixels of class c across the set) / denominator, where the
/// denominator is per [`FreqDenominator`]. Classes absent from the set get
/// frequency 0. Ignored pixels count nowhere.
pub fn class_frequencies(
    labels: &[LabelMap],
    num_classes: usize,
    ignore_label: Option<u8>,
    denominator: FreqDenominator,
) -> Result<Vec<f64>> {
    let mut class_pixels = vec![0u64; num_classes];
    let mut image_totals = Vec::with_capacity(labels.len());
    let mut present = vec![vec![false; labels.len()]; num_classes];
    for (i, lm) in labels.iter().enumerate() {
        let mut total = 0u64;
        for &v in &lm.data {
            if Some(v) == ignore_label {
                continue;
            }
            if (v as usize) >= num_classes {
                return Err(Error::InvalidLabel {
                    value: v,
                    num_classes,
                    context: format!("label map {i}"),
                });
            }
            class_pixels[v as usize] += 1;
            present[v as usize][i] = true;
            total += 1;
        }
        image_totals.push(total);
    }
    let whole: u64 = image_totals.iter().sum();
    let mut freqs = vec![0.0; num_classes];
    for c in 0..num_classes {
        if class_pixels[c] == 0 {
            continue;
        }
        let denom = match denominator {
            FreqDenominator::WholeSet => whole,
            FreqDenominator::PresenceWeighted => (0..labels.len())
                .filter(|&i| present[c][i])
                .map(|i| image_totals[i])
                .sum(),
        };
        freqs[c] = class_pixels[c] as f64 / denom as f64;
    }
    Ok(freqs)
}

/// weight[c] = median(nonzero frequencies) / freq[c]; absent classes get
/// weight 0 and never contribute to the loss. The median is taken as an
/// element of the multiset (lower middle for even counts) so the median
/// class's weight is exactly 1.
pub fn median_frequency_weights(freqs: &[f64]) -> Result<ClassWeights> {
    let mut nonzero: Vec<f64> = freqs.iter().copied().filter(|&f| f > 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::invalid("median_frequency_weights", "all class frequencies are zero"));
    }
    nonzero.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = nonzero[(nonzero.len() - 1) / 2];
    let weights = freqs.iter().map(|&f| if f > 0.0 { median / f } else { 0.0 }).collect();
    Ok(ClassWeights { weights, mode: Balancing::MedianFrequency })
}

/// Summed, class-weighted cross-entropy over all non-ignored pixels in the
/// batch, computed with log-sum-exp stabilization. Gradient flows to the
/// logits only.
pub fn weighted_cross_entropy<T: Float>(
    tape: Option<&Tape<T>>,
    logits: &Tensor<T>,
    labels: &[LabelMap],
    class_weights: &ClassWeights,
    ignore_label: Option<u8>,
) -> Result<Tensor<T>> {
    let s = logits.shape();
    let (n, k, h, w) = (s.n, s.c, s.h, s.w);
    if labels.len() != n {
        return Err(Error::invalid(
            "weighted_cross_entropy",
            format!("{} label maps for a batch of {n}", labels.len()),
        ));
    }
    if class_weights.weights.len() != k {
        return Err(Error::ChannelMismatch {
            op: "weighted_cross_entropy",
            expected: k,
            got: class_weights.weights.len(),
        });
    }
    for (i, lm) in labels.iter().enumerate() {
        if lm.h != h || lm.w != w {
            return Err(Error::invalid(
                "weighted_cross_entropy",
                format!("label map {i} is {}x{}, logits are {h}x{w}", lm.h, lm.w),
            ));
        }
    }
    let xd = logits.data();
    if xd.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { op: "weighted_cross_entropy", detail: "NaN in logits".into() });
    }

    let hw = h * w;
    let mut probs = vec![T::ZERO; xd.len()];
    let mut loss = 0.0f64;
    for b in 0..n {
        let lm = &labels[b].data;
        for p in 0..hw {
            let base = b * k * hw + p;
            let mut m = xd[base];
            for ch in 1..k {
                m = m.maximum(xd[base + ch * hw]);
            }
            let mut denom = 0.0f64;
            for ch in 0..k {
                let e = (xd[base + ch * hw] - m).exp();
                probs[base + ch * hw] = e;
                denom += e.to_f64();
            }
            let inv = T::from_f64(1.0 / denom);
            for ch in 0..k {
                probs[base + ch * hw] *= inv;
            }
            let y = lm[p];
            if Some(y) == ignore_label {
                continue;
            }
            if (y as usize) >= k {
                return Err(Error::InvalidLabel {
                    value: y,
                    num_classes: k,
                    context: format!("batch item {b}, pixel {p}"),
                });
            }
            let lse = m.to_f64() + denom.ln();
            loss += class_weights.weights[y as usize] * (lse - xd[base + y as usize * hw].to_f64());
        }
    }
    let mut out = Tensor::scalar(T::from_f64(loss));

    if let Some(tape) = tape {
        if let Some(xn) = logits.node() {
            let probs = Arc::new(probs);
            let labels: Arc<Vec<LabelMap>> = Arc::new(labels.to_vec());
            let weights = class_weights.weights.clone();
            let id = tape.record(
                1,
                Box::new(move |g, sink| {
                    let g0 = g[0];
                    sink.accumulate_with(xn, |buf| {
                        for b in 0..n {
                            let lm = &labels[b].data;
                            for p in 0..hw {
                                let y = lm[p];
                                if Some(y) == ignore_label {
                                    continue;
                                }
                                let wt = T::from_f64(weights[y as usize]) * g0;
                                let base = b * k * hw + p;
                                for ch in 0..k {
                                    let i = base + ch * hw;
                                    let indicator =
                                        if ch == y as usize { T::ONE } else { T::ZERO };
                                    buf[i] += wt * (probs[i] - indicator);
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn label_map(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, data).unwrap()
    }

    #[test]
    fn frequencies_of_symmetric_split() {
        let lm = label_map(2, 2, vec![0, 0, 1, 1]);
        let f = class_frequencies(&[lm], 2, None, FreqDenominator::PresenceWeighted).unwrap();
        assert_eq!(f, vec![0.5, 0.5]);
    }

    #[test]
    fn frequencies_presence_weighted_denominator() {
        // img1 all class 0, img2 half 0 / half 1
        let img1 = label_map(2, 2, vec![0, 0, 0, 0]);
        let img2 = label_map(2, 2, vec![0, 0, 1, 1]);
        let f =
            class_frequencies(&[img1, img2], 2, None, FreqDenominator::PresenceWeighted).unwrap();
        assert!((f[0] - 0.75).abs() < 1e-12); // 6 pixels / 8 pixels of images containing class 0
        assert!((f[1] - 0.5).abs() < 1e-12); // 2 pixels / 4 pixels of img2
    }

    #[test]
    fn frequencies_whole_set_denominator() {
        let img1 = label_map(2, 2, vec![0, 0, 0, 0]);
        let img2 = label_map(2, 2, vec![0, 0, 1, 1]);
        let f = class_frequencies(&[img1, img2], 2, None, FreqDenominator::WholeSet).unwrap();
        assert!((f[0] - 0.75).abs() < 1e-12);
        assert!((f[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_are_excluded_everywhere() {
        let lm = label_map(2, 2, vec![0, 255, 1, 255]);
        let f = class_frequencies(&[lm], 2, Some(255), FreqDenominator::PresenceWeighted).unwrap();
        assert_eq!(f, vec![0.5, 0.5]);
    }

    #[test]
    fn out_of_range_label_is_reported() {
        let lm = label_map(1, 2, vec![0, 7]);
        let err =
            class_frequencies(&[lm], 2, None, FreqDenominator::PresenceWeighted).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains("label map 0"), "{msg}");
    }

    #[test]
    fn median_weights_evaluate_the_formula() {
        let w = median_frequency_weights(&[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(w.weights, vec![0.5, 1.0, 1.0]);
    }

    #[test]
    fn median_weights_uniform_frequencies_are_all_one() {
        let w = median_frequency_weights(&[0.2; 5]).unwrap();
        assert!(w.weights.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn median_weights_are_antitone_and_zero_for_absent() {
        let w = median_frequency_weights(&[0.6, 0.1, 0.0, 0.3]).unwrap();
        assert_eq!(w.weights[2], 0.0);
        assert!(w.weights[1] > w.weights[3]);
        assert!(w.weights[3] > w.weights[0]);
    }

    #[test]
    fn median_weights_reject_all_zero() {
        assert!(median_frequency_weights(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn uniform_logits_loss_is_pixels_times_ln_k() {
        let k = 4;
        let logits = Tensor::<f64>::full(Shape::new(1, k, 2, 2), 0.3);
        let labels = vec![label_map(2, 2, vec![0, 1, 2, 3])];
        let loss =
            weighted_cross_entropy(None, &logits, &labels, &ClassWeights::natural(k), None)
                .unwrap();
        assert!((loss.item() - 4.0 * (k as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        // class 0 for both pixels of a 1x2 map, logit margin 50
        let logits =
            Tensor::from_vec(vec![50.0, 50.0, 0.0, 0.0], Shape::new(1, 2, 1, 2)).unwrap();
        let labels = vec![label_map(1, 2, vec![0, 0])];
        let loss =
            weighted_cross_entropy(None, &logits, &labels, &ClassWeights::natural(2), None)
                .unwrap();
        assert!(loss.item() >= 0.0);
        assert!(loss.item() < 1e-9);
    }

    #[test]
    fn nan_logits_fail_fast() {
        let logits =
            Tensor::from_vec(vec![f64::NAN, 0.0, 0.0, 0.0], Shape::new(1, 2, 1, 2)).unwrap();
        let labels = vec![label_map(1, 2, vec![0, 0])];
        match weighted_cross_entropy(None, &logits, &labels, &ClassWeights::natural(2), None) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn ignored_pixels_contribute_no_loss_or_gradient() {
        use crate::tape::{backward, Tape};
        let tape = Tape::new();
        let base = Tensor::from_vec(vec![0.7, -0.2, 0.1, 0.4], Shape::new(1, 2, 1, 2)).unwrap();
        let logits = tape.leaf(&base);
        let labels = vec![label_map(1, 2, vec![0, 255])];
        let loss = weighted_cross_entropy(
            Some(&tape),
            &logits,
            &labels,
            &ClassWeights::natural(2),
            Some(255),
        )
        .unwrap();
        let grads = backward(&tape, &loss).unwrap();
        let g = grads.wrt(&logits).unwrap();
        // pixel 1 (ignored) has zero gradient in both channels
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
        assert!(g[0] != 0.0 && g[2] != 0.0);
    }

    #[test]
    fn natural_weighting_equals_unweighted_bitwise() {
        let logits = Tensor::from_vec(
            vec![0.5, -0.3, 1.2, 0.0, 0.9, -1.1, 0.4, 0.2],
            Shape::new(1, 2, 2, 2),
        )
        .unwrap();
        let labels = vec![label_map(2, 2, vec![0, 1, 1, 0])];
        let natural = ClassWeights::natural(2);
        let manual = ClassWeights { weights: vec![1.0, 1.0], mode: Balancing::MedianFrequency };
        let a = weighted_cross_entropy(None, &logits, &labels, &natural, None).unwrap();
        let b = weighted_cross_entropy(None, &logits, &labels, &manual, None).unwrap();
        assert_eq!(f64::to_bits(a.item()), f64::to_bits(b.item()));
    }
}
