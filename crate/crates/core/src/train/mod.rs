//! Loss construction, optimization and the epoch/validation protocol.

mod loss;
mod optim;

pub use loss::{
    class_frequencies, median_frequency_weights, weighted_cross_entropy, Balancing, ClassWeights,
    FreqDenominator,
};
pub use optim::{he_init, he_init_from, sgd_momentum_step, OptimizerState};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{forward_eval, forward_train, ModelSpec};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, bf_score, default_theta, ConfusionMatrix, MetricsReport};
use crate::scalar::Float;
use crate::tape::{backward, Tape};
use crate::tensor::{Shape, Tensor};

/// One training or evaluation example: a preprocessed (1, C, H, W) input
/// and its label map.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub input: Tensor<T>,
    pub labels: LabelMap,
    pub id: String,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Evaluate on the validation set every this many iterations.
    pub eval_every: usize,
    pub max_epochs: usize,
    pub balancing: Balancing,
    pub seed: u64,
    pub ignore_label: Option<u8>,
    pub freq_denominator: FreqDenominator,
    /// First epoch number; lets a resumed run replay the same per-epoch
    /// shuffles an unbroken run would have used.
    pub start_epoch: usize,
    /// Stop once a validation pass reaches this global accuracy.
    pub target_val_g: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            batch_size: 12,
            eval_every: 1000,
            max_epochs: 10,
            balancing: Balancing::MedianFrequency,
            seed: 1,
            ignore_label: None,
            freq_denominator: FreqDenominator::PresenceWeighted,
            start_epoch: 1,
            target_val_g: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::invalid("train", format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "train",
                format!("momentum must be in [0, 1), got {}", self.momentum),
            ));
        }
        if self.batch_size < 1 || self.eval_every < 1 || self.max_epochs < 1 {
            return Err(Error::invalid(
                "train",
                "batch_size, eval_every and max_epochs must be >= 1",
            ));
        }
        Ok(())
    }
}

/// One validation evaluation in the history log.
#[derive(Clone, Debug)]
pub struct HistoryRow {
    pub iteration: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_g: f64,
    pub val_c: f64,
    pub val_miou: f64,
    pub val_bf: f64,
}

impl HistoryRow {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.iteration, self.epoch, self.train_loss, self.val_g, self.val_c, self.val_miou,
            self.val_bf
        )
    }
}

pub const HISTORY_HEADER: &str = "iteration\tepoch\ttrain_loss\tval_G\tval_C\tval_mIoU\tval_BF";

pub struct TrainOutcome<T> {
    pub best: ModelSpec<T>,
    pub best_iteration: usize,
    pub best_val_g: f64,
    pub history: Vec<HistoryRow>,
    pub iterations_run: usize,
    pub class_weights: ClassWeights,
}

/// The image visitation order of one epoch: a seeded permutation, one
/// independent stream per epoch, so each image is used exactly once.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn stack_batch<T: Float>(samples: &[Sample<T>], picks: &[usize]) -> Result<(Tensor<T>, Vec<LabelMap>)> {
    let first = samples[picks[0]].input.shape();
    let (c, h, w) = (first.c, first.h, first.w);
    let mut data = Vec::with_capacity(picks.len() * c * h * w);
    let mut labels = Vec::with_capacity(picks.len());
    for &i in picks {
        let s = &samples[i];
        if s.input.shape().c != c || s.input.shape().h != h || s.input.shape().w != w {
            return Err(Error::ShapeMismatch {
                op: "stack_batch",
                left: first,
                right: s.input.shape(),
            });
        }
        data.extend_from_slice(s.input.data());
        labels.push(s.labels.clone());
    }
    Ok((Tensor::from_vec(data, Shape::new(picks.len(), c, h, w))?, labels))
}

/// Run the model in eval mode over `samples` and compute the four metrics.
pub fn evaluate<T: Float>(
    spec: &ModelSpec<T>,
    samples: &[Sample<T>],
    ignore_label: Option<u8>,
    batch_size: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyMetric("evaluation over an empty sample set"));
    }
    let mut cm = ConfusionMatrix::new(spec.num_classes());
    let mut preds: Vec<LabelMap> = Vec::with_capacity(samples.len());
    let mut gts: Vec<LabelMap> = Vec::with_capacity(samples.len());
    let idxs: Vec<usize> = (0..samples.len()).collect();
    for chunk in idxs.chunks(batch_size.max(1)) {
        let (batch, labels) = stack_batch(samples, chunk)?;
        let art = forward_eval(spec, &batch)?;
        let batch_preds = argmax_labels(&art.logits);
        for (pred, gt) in batch_preds.into_iter().zip(labels) {
            cm.accumulate(&pred, &gt, ignore_label)?;
            preds.push(pred);
            gts.push(gt);
        }
    }
    let theta = default_theta(gts[0].h, gts[0].w);
    let (bf, scored, skipped) = bf_score(&preds, &gts, theta)?;
    Ok(MetricsReport {
        g: cm.global_accuracy()?,
        c: cm.class_average()?,
        miou: cm.mean_iou()?,
        bf,
        per_class_accuracy: cm.per_class_accuracy(),
        per_class_iou: cm.per_class_iou(),
        bf_images_scored: scored,
        bf_images_skipped: skipped,
    })
}

/// The training protocol: per-epoch seeded shuffle, mini-batches picked in
/// order so each image is used exactly once per epoch, periodic validation,
/// and selection of the checkpoint with the highest validation global
/// accuracy (ties keep the earlier iteration).
pub fn train_loop<T: Float>(
    spec: &mut ModelSpec<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    cfg: &TrainConfig,
    mut history_out: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train", "training set is empty"));
    }
    if val.is_empty() {
        return Err(Error::invalid("train", "validation set is empty"));
    }

    let k = spec.num_classes();
    let gt_maps: Vec<LabelMap> = train.iter().map(|s| s.labels.clone()).collect();
    let class_weights = match cfg.balancing {
        Balancing::NaturalFrequency => ClassWeights::natural(k),
        Balancing::MedianFrequency => {
            let freqs = class_frequencies(&gt_maps, k, cfg.ignore_label, cfg.freq_denominator)?;
            median_frequency_weights(&freqs)?
        }
    };

    if let Some(out) = history_out.as_deref_mut() {
        writeln!(out, "{HISTORY_HEADER}").map_err(|e| Error::io("history", e))?;
    }

    let iters_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_iters = iters_per_epoch * cfg.max_epochs;
    let mut optimizer = OptimizerState::<T>::new();
    let mut history: Vec<HistoryRow> = Vec::new();
    let mut best: Option<(ModelSpec<T>, usize, f64)> = None;
    let mut iteration = 0usize;

    'epochs: for epoch_ofs in 0..cfg.max_epochs {
        let epoch = cfg.start_epoch + epoch_ofs;
        let order = epoch_order(cfg.seed, epoch, train.len());
        for picks in order.chunks(cfg.batch_size) {
            iteration += 1;
            let (batch, labels) = stack_batch(train, picks)?;
            let tape = Tape::new();
            let (art, bindings) = forward_train(spec, &tape, &batch)?;
            let loss = weighted_cross_entropy(
                Some(&tape),
                &art.logits,
                &labels,
                &class_weights,
                cfg.ignore_label,
            )?;
            let loss_val = loss.item().to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Diverged { iteration, loss: loss_val });
            }
            let mut grads = backward(&tape, &loss)?;

            let mut params = spec.named_parameters_mut();
            let grad_list: Vec<Option<Vec<T>>> = params
                .iter()
                .map(|(name, _)| bindings.node(name).and_then(|id| grads.take(id)))
                .collect();
            optimizer.step(&mut params, &grad_list, cfg.lr, cfg.momentum)?;
            drop(params);

            let last_iteration = iteration == total_iters;
            if iteration % cfg.eval_every == 0 || last_iteration {
                let report = evaluate(spec, val, cfg.ignore_label, cfg.batch_size)?;
                let row = HistoryRow {
                    iteration,
                    epoch,
                    train_loss: loss_val,
                    val_g: report.g,
                    val_c: report.c,
                    val_miou: report.miou,
                    val_bf: report.bf,
                };
                if let Some(out) = history_out.as_deref_mut() {
                    writeln!(out, "{}", row.tsv_line()).map_err(|e| Error::io("history", e))?;
                    out.flush().map_err(|e| Error::io("history", e))?;
                }
                let better = match &best {
                    None => true,
                    Some((_, _, g)) => report.g > *g,
                };
                if better {
                    best = Some((spec.clone(), iteration, report.g));
                }
                history.push(row);
                if cfg.target_val_g.is_some_and(|t| report.g >= t) {
                    break 'epochs;
                }
            }
        }
    }
    let (best_model, best_iteration, best_val_g) = match best {
        Some(b) => b,
        // eval_every larger than the run and no final eval recorded cannot
        // happen (the last iteration always evaluates), but stay defensive
        None => (spec.clone(), iteration, f64::NAN),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_iteration,
        best_val_g,
        history,
        iterations_run: iteration,
        class_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_permutation_and_epoch_dependent() {
        for epoch in 1..6 {
            let order = epoch_order(42, epoch, 37);
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..37).collect::<Vec<_>>());
        }
        assert_ne!(epoch_order(42, 1, 37), epoch_order(42, 2, 37));
        assert_eq!(epoch_order(42, 3, 37), epoch_order(42, 3, 37));
    }

    #[test]
    fn epoch_accounting_and_checkpoint_selection() {
        use crate::arch::{build_variant, VariantKind};
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let k = 3usize;
        let rng = &mut ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Sample<f32>> = (0..8)
            .map(|i| {
                let data: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
                let labels: Vec<u8> = (0..256).map(|_| rng.random_range(0..k) as u8).collect();
                Sample {
                    input: Tensor::from_vec(data, Shape::new(1, 3, 16, 16)).unwrap(),
                    labels: LabelMap::new(16, 16, labels).unwrap(),
                    id: format!("s{i}"),
                }
            })
            .collect();
        let mut spec = build_variant::<f32>(VariantKind::SegNetBasic, k, 2, 4, 3, 5).unwrap();
        let cfg = TrainConfig {
            lr: 1e-6,
            batch_size: 3,
            eval_every: 2,
            max_epochs: 2,
            balancing: Balancing::NaturalFrequency,
            ..TrainConfig::default()
        };
        let outcome = train_loop(&mut spec, &samples, &samples[..2], &cfg, None).unwrap();
        // iterations per epoch = ceil(8/3) = 3
        assert_eq!(outcome.iterations_run, 6);
        // evaluations at iterations 2, 4, 6 (6 is also the final iteration)
        let iters: Vec<usize> = outcome.history.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, vec![2, 4, 6]);
        // the selected checkpoint's G is the maximum over the history
        assert!(outcome.history.iter().all(|r| r.val_g <= outcome.best_val_g));
        let best_rows: Vec<&HistoryRow> =
            outcome.history.iter().filter(|r| r.val_g == outcome.best_val_g).collect();
        // ties break to the earliest iteration
        assert_eq!(outcome.best_iteration, best_rows[0].iteration);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }
}
