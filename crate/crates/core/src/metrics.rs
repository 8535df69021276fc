//! Confusion-matrix metrics (global accuracy, class average, mIoU) and the
//! boundary-F1 contour score.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// K x K pixel counts, counts[gt][pred].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { k: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// counts[gt[i]][pred[i]] += 1 per non-ignored pixel. Additive across
    /// images, so accumulation order never matters.
    pub fn accumulate(
        &mut self,
        pred: &LabelMap,
        gt: &LabelMap,
        ignore_label: Option<u8>,
    ) -> Result<()> {
        if pred.h != gt.h || pred.w != gt.w {
            return Err(Error::invalid(
                "accumulate_confusion",
                format!("pred {}x{} vs gt {}x{}", pred.h, pred.w, gt.h, gt.w),
            ));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if Some(g) == ignore_label {
                continue;
            }
            if (g as usize) >= self.k {
                return Err(Error::InvalidLabel {
                    value: g,
                    num_classes: self.k,
                    context: "ground truth".to_string(),
                });
            }
            if (p as usize) >= self.k {
                return Err(Error::InvalidLabel {
                    value: p,
                    num_classes: self.k,
                    context: "prediction".to_string(),
                });
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.count(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|g| self.count(g, c)).sum()
    }

    /// Fraction of pixels classified correctly.
    pub fn global_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyMetric("global accuracy of an empty confusion matrix"));
        }
        let trace: u64 = (0..self.k).map(|c| self.count(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Per-class predictive accuracy; None for classes absent from the
    /// ground truth.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let row = self.row_sum(c);
                if row == 0 {
                    None
                } else {
                    Some(self.count(c, c) as f64 / row as f64)
                }
            })
            .collect()
    }

    /// Mean predictive accuracy over classes present in the ground truth.
    pub fn class_average(&self) -> Result<f64> {
        let accs: Vec<f64> = self.per_class_accuracy().into_iter().flatten().collect();
        if accs.is_empty() {
            return Err(Error::EmptyMetric("class average of an empty confusion matrix"));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Per-class intersection over union; None for classes absent from both
    /// ground truth and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let row = self.row_sum(c);
                let col = self.col_sum(c);
                if row == 0 && col == 0 {
                    None
                } else {
                    let inter = self.count(c, c);
                    Some(inter as f64 / (row + col - inter) as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn mean_iou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::EmptyMetric("mean IoU of an empty confusion matrix"));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// The four headline numbers plus their per-class breakdown.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub g: f64,
    pub c: f64,
    pub miou: f64,
    pub bf: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    /// Images without any ground-truth boundary are skipped in the BF mean.
    pub bf_images_scored: usize,
    pub bf_images_skipped: usize,
}

/// A pixel is boundary for class `c` iff it belongs to `c` and at least one
/// 4-neighbor has a different label. The image border by itself does not
/// make a pixel boundary.
pub fn extract_boundary(labels: &LabelMap, class: u8) -> Vec<bool> {
    let (h, w) = (labels.h, labels.w);
    let data = &labels.data;
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = data[y * w + x];
            if v != class {
                continue;
            }
            let differs = (y > 0 && data[(y - 1) * w + x] != v)
                || (y + 1 < h && data[(y + 1) * w + x] != v)
                || (x > 0 && data[y * w + x - 1] != v)
                || (x + 1 < w && data[y * w + x + 1] != v);
            mask[y * w + x] = differs;
        }
    }
    mask
}

const DT_INF: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -DT_INF;
    z[1] = DT_INF;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = DT_INF;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance to the nearest set pixel of `mask`
/// (two-pass separable transform). Pixels with no set pixel anywhere stay at
/// a huge sentinel value.
pub fn squared_distance_transform(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> =
        mask.iter().map(|&m| if m { 0.0 } else { DT_INF }).collect();
    let n_max = h.max(w);
    let mut f = vec![0.0; n_max];
    let mut d = vec![0.0; n_max];
    let mut v = vec![0usize; n_max];
    let mut z = vec![0.0; n_max + 1];
    // columns
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        dt_1d(&f[..h], &mut d[..h], &mut v[..h], &mut z[..h + 1]);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    // rows
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        dt_1d(&f[..w], &mut d[..w], &mut v[..w], &mut z[..w + 1]);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

/// The contour-matching tolerance: 0.75% of the image diagonal.
pub fn default_theta(h: usize, w: usize) -> f64 {
    0.0075 * ((h * h + w * w) as f64).sqrt()
}

/// Boundary-F1 of one image: for each class present in the ground truth
/// with a nonempty boundary, precision/recall of boundary pixels matched
/// within Euclidean distance `theta`, combined as 2PR/(P+R); the image score
/// averages the class F1 values. None when no ground-truth class has a
/// boundary (such images are skipped in the dataset mean).
pub fn bf_image_score(pred: &LabelMap, gt: &LabelMap, theta: f64) -> Result<Option<f64>> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::invalid(
            "bf_score",
            format!("pred {}x{} vs gt {}x{}", pred.h, pred.w, gt.h, gt.w),
        ));
    }
    let (h, w) = (gt.h, gt.w);
    let theta_sq = theta * theta;
    let mut classes: Vec<u8> = gt.data.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut f1_sum = 0.0f64;
    let mut f1_count = 0usize;
    for class in classes {
        let gt_boundary = extract_boundary(gt, class);
        let gt_n = gt_boundary.iter().filter(|&&b| b).count();
        if gt_n == 0 {
            continue;
        }
        f1_count += 1;
        let pred_boundary = extract_boundary(pred, class);
        let pred_n = pred_boundary.iter().filter(|&&b| b).count();
        if pred_n == 0 {
            continue; // F1 = 0
        }
        let dist_to_gt = squared_distance_transform(&gt_boundary, h, w);
        let dist_to_pred = squared_distance_transform(&pred_boundary, h, w);
        let matched_pred = pred_boundary
            .iter()
            .zip(&dist_to_gt)
            .filter(|(&b, &d)| b && d <= theta_sq)
            .count();
        let matched_gt = gt_boundary
            .iter()
            .zip(&dist_to_pred)
            .filter(|(&b, &d)| b && d <= theta_sq)
            .count();
        let precision = matched_pred as f64 / pred_n as f64;
        let recall = matched_gt as f64 / gt_n as f64;
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    if f1_count == 0 {
        Ok(None)
    } else {
        Ok(Some(f1_sum / f1_count as f64))
    }
}

/// Dataset boundary-F1: the mean of image scores over images that have a
/// ground-truth boundary. Returns (score, scored, skipped).
pub fn bf_score(
    preds: &[LabelMap],
    gts: &[LabelMap],
    theta: f64,
) -> Result<(f64, usize, usize)> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "bf_score",
            format!("{} predictions vs {} ground truths", preds.len(), gts.len()),
        ));
    }
    let mut sum = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        match bf_image_score(p, g, theta)? {
            Some(s) => {
                sum += s;
                scored += 1;
            }
            None => skipped += 1,
        }
    }
    if scored == 0 {
        return Err(Error::EmptyMetric("boundary F1 with no ground-truth boundaries"));
    }
    Ok((sum / scored as f64, scored, skipped))
}

/// Per-pixel argmax over channels (first channel wins ties), one label map
/// per batch item.
pub fn argmax_labels<T: Float>(logits: &Tensor<T>) -> Vec<LabelMap> {
    let s = logits.shape();
    let (n, k, hw) = (s.n, s.c, s.h * s.w);
    let data = logits.data();
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut labels = vec![0u8; hw];
        for p in 0..hw {
            let base = b * k * hw + p;
            let mut best = 0usize;
            let mut best_v = data[base];
            for ch in 1..k {
                let v = data[base + ch * hw];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            labels[p] = best as u8;
        }
        out.push(LabelMap::new(s.h, s.w, labels).unwrap());
    }
    out
}
