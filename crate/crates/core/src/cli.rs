//! Command-line surface: data generation, training, evaluation, prediction
//! and the variant comparison sweep.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::arch::{
    build_variant, forward_eval, load_model, receptive_field, save_model, storage_cost, ModelSpec,
    Preproc, StorageReport, VariantKind,
};
use crate::data::config::{parse_config, FileConfig};
use crate::data::{
    generate_synthetic, image_to_input, load_ppm, save_pgm, DatasetManifest, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, MetricsReport};
use crate::train::{evaluate, train_loop, Balancing, Sample, TrainConfig};

#[derive(Parser)]
#[command(name = "segdec", version, about = "Encoder-decoder semantic segmentation engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape-segmentation dataset.
    GenData {
        /// Config file with the synthetic-data keys.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant on a dataset manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest path.
        #[arg(long)]
        data: PathBuf,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// Optional incremental history log (TSV).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a trained model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Segment a single image.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output label map (PGM).
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-class probability maps (PGM, scaled to 0..255).
        #[arg(long)]
        prob_out: Option<PathBuf>,
    },
    /// Print parameter, storage and receptive-field accounting for a variant.
    Analyze {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 360)]
        height: usize,
        #[arg(long, default_value_t = 480)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 7)]
        kernel: usize,
    },
    /// Train every variant under one protocol and emit a comparison table.
    CompareVariants {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

/// Entry point used by the binary and by tests. Exit codes: 0 success,
/// 1 runtime error (message on stderr), 2 usage error.
pub fn cli_run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, out } => cmd_gen_data(&spec, &out),
        Cmd::Train { config, data, out, history } => {
            cmd_train(&config, &data, &out, history.as_deref())
        }
        Cmd::Eval { model, data, split, report } => cmd_eval(&model, &data, &split, &report),
        Cmd::Predict { model, image, out, prob_out } => {
            cmd_predict(&model, &image, &out, prob_out.as_deref())
        }
        Cmd::Analyze { variant, classes, height, width, depth, channels, kernel } => {
            cmd_analyze(&variant, classes, height, width, depth, channels, kernel)
        }
        Cmd::CompareVariants { config, data, report } => {
            cmd_compare_variants(&config, &data, &report)
        }
    }
}

fn atomic_write(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_samples<T: crate::scalar::Float>(
    manifest: &DatasetManifest,
    split: Split,
    preproc: &Preproc,
) -> Result<Vec<Sample<T>>> {
    let records = manifest.load_split(split)?;
    Ok(records
        .into_iter()
        .map(|r| Sample { input: image_to_input(&r.image, preproc), labels: r.labels, id: r.id })
        .collect())
}

fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let cfg = parse_config(spec_path)?;
    let manifest = generate_synthetic(&cfg.synth, out)?;
    println!(
        "generated {} samples (K={}) under {}",
        manifest.entries.len(),
        manifest.num_classes,
        out.display()
    );
    Ok(())
}

fn build_from_config(cfg: &FileConfig, num_classes: usize, variant: VariantKind) -> Result<ModelSpec<f32>> {
    let mut spec = build_variant::<f32>(
        variant,
        num_classes,
        cfg.model.depth,
        cfg.model.channels,
        cfg.model.kernel,
        cfg.train.seed,
    )?;
    spec.bn_epsilon = cfg.bn_epsilon;
    spec.bn_momentum = cfg.bn_momentum;
    spec.preproc = cfg.preproc;
    Ok(spec)
}

fn cmd_train(config: &Path, data: &Path, out: &Path, history: Option<&Path>) -> Result<()> {
    let cfg = parse_config(config)?;
    let manifest = DatasetManifest::load(data)?;
    let mut spec = build_from_config(&cfg, manifest.num_classes, cfg.model.variant)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.ignore_label = Some(manifest.ignore_label);

    let train_set = load_samples::<f32>(&manifest, Split::Train, &spec.preproc)?;
    let val_set = load_samples::<f32>(&manifest, Split::Val, &spec.preproc)?;

    let mut history_file = match history {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?),
        None => None,
    };
    let sink: Option<&mut dyn Write> = history_file.as_mut().map(|f| f as &mut dyn Write);

    let outcome = train_loop(&mut spec, &train_set, &val_set, &train_cfg, sink)?;
    save_model(&outcome.best, out)?;
    println!(
        "trained {} for {} iterations; best val G {:.4} at iteration {}; model written to {}",
        cfg.model.variant.name(),
        outcome.iterations_run,
        outcome.best_val_g,
        outcome.best_iteration,
        out.display()
    );
    Ok(())
}

fn format_report(report: &MetricsReport) -> String {
    let mut text = String::from("metric\tvalue\n");
    text.push_str(&format!("G\t{:.6}\n", report.g));
    text.push_str(&format!("C\t{:.6}\n", report.c));
    text.push_str(&format!("mIoU\t{:.6}\n", report.miou));
    text.push_str(&format!("BF\t{:.6}\n", report.bf));
    text.push_str(&format!("bf_images_scored\t{}\n", report.bf_images_scored));
    text.push_str(&format!("bf_images_skipped\t{}\n", report.bf_images_skipped));
    for (i, acc) in report.per_class_accuracy.iter().enumerate() {
        match acc {
            Some(a) => text.push_str(&format!("class_acc_{i}\t{a:.6}\n")),
            None => text.push_str(&format!("class_acc_{i}\tn/a\n")),
        }
    }
    for (i, iou) in report.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => text.push_str(&format!("class_iou_{i}\t{v:.6}\n")),
            None => text.push_str(&format!("class_iou_{i}\tn/a\n")),
        }
    }
    text
}

fn cmd_eval(model: &Path, data: &Path, split: &str, report_path: &Path) -> Result<()> {
    let split = Split::from_name(split)
        .ok_or_else(|| Error::invalid("eval", format!("unknown split '{split}'")))?;
    let spec = load_model::<f32>(model)?;
    let manifest = DatasetManifest::load(data)?;
    if manifest.num_classes != spec.num_classes() {
        return Err(Error::invalid(
            "eval",
            format!("model has K={}, manifest K={}", spec.num_classes(), manifest.num_classes),
        ));
    }
    let samples = load_samples::<f32>(&manifest, split, &spec.preproc)?;
    let report = evaluate(&spec, &samples, Some(manifest.ignore_label), 8)?;
    let text = format_report(&report);
    atomic_write(report_path, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_predict(model: &Path, image: &Path, out: &Path, prob_out: Option<&Path>) -> Result<()> {
    let spec = load_model::<f32>(model)?;
    let img = load_ppm(image)?;
    let input = image_to_input::<f32>(&img, &spec.preproc);
    let art = forward_eval(&spec, &input)?;
    let labels = argmax_labels(&art.logits).remove(0);
    save_pgm(out, labels.h, labels.w, &labels.data)?;
    if let Some(dir) = prob_out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let probs = &art.probabilities;
        let s = probs.shape();
        let hw = s.h * s.w;
        for c in 0..s.c {
            let plane: Vec<u8> = (0..hw)
                .map(|p| (probs.data()[c * hw + p] * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            save_pgm(dir.join(format!("class_{c:02}.pgm")), s.h, s.w, &plane)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn format_storage(r: &StorageReport) -> (String, String) {
    let mult = if r.multiplier_not_applicable {
        "n/a".to_string()
    } else {
        r.multiplier.to_string()
    };
    (mult, format!("{}", r.bytes_indices + r.bytes_encoder_maps))
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    variant: &str,
    classes: usize,
    height: usize,
    width: usize,
    depth: usize,
    channels: usize,
    kernel: usize,
) -> Result<()> {
    let kind = VariantKind::from_name(variant)
        .ok_or_else(|| Error::invalid("analyze", format!("unknown variant '{variant}'")))?;
    let spec = build_variant::<f32>(kind, classes, depth, channels, kernel, 0)?;
    let storage = storage_cost(&spec, height, width, 4)?;
    let (mult, total) = format_storage(&storage);
    println!("variant\t{}", kind.name());
    println!("classes\t{classes}");
    println!("params\t{}", spec.count_params());
    println!("receptive_field\t{}", receptive_field(depth, kernel));
    println!("input\t{height}x{width}");
    println!("bytes_indices\t{}", storage.bytes_indices);
    println!("bytes_encoder_maps\t{}", storage.bytes_encoder_maps);
    println!("storage_bytes_total\t{total}");
    println!("storage_multiplier\t{mult}");
    Ok(())
}

fn cmd_compare_variants(config: &Path, data: &Path, report_path: &Path) -> Result<()> {
    let cfg = parse_config(config)?;
    let manifest = DatasetManifest::load(data)?;
    let train_set = load_samples::<f32>(&manifest, Split::Train, &cfg.preproc)?;
    let val_set = load_samples::<f32>(&manifest, Split::Val, &cfg.preproc)?;
    let test_set = load_samples::<f32>(&manifest, Split::Test, &cfg.preproc)?;

    let mut rows = String::from("variant\tparams\tstorage_multiplier\tG\tC\tmIoU\tBF\tbalancing\n");
    for balancing in [Balancing::MedianFrequency, Balancing::NaturalFrequency] {
        for kind in VariantKind::ALL {
            let mut spec = build_from_config(&cfg, manifest.num_classes, kind)?;
            let mut train_cfg: TrainConfig = cfg.train.clone();
            train_cfg.balancing = balancing;
            train_cfg.ignore_label = Some(manifest.ignore_label);
            let (h, w) = (train_set[0].labels.h, train_set[0].labels.w);
            let storage = storage_cost(&spec, h, w, 4)?;
            let (mult, _) = format_storage(&storage);
            let params = spec.count_params();
            let line = match train_loop(&mut spec, &train_set, &val_set, &train_cfg, None) {
                Ok(outcome) => {
                    let report = evaluate(
                        &outcome.best,
                        &test_set,
                        Some(manifest.ignore_label),
                        train_cfg.batch_size,
                    )?;
                    format!(
                        "{}\t{params}\t{mult}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
                        kind.name(),
                        report.g,
                        report.c,
                        report.miou,
                        report.bf,
                        balancing.name()
                    )
                }
                // a variant that cannot train at this protocol's rate gets a
                // marked row instead of sinking the whole sweep
                Err(Error::Diverged { iteration, .. }) => format!(
                    "{}\t{params}\t{mult}\tdiverged@{iteration}\t-\t-\t-\t{}\n",
                    kind.name(),
                    balancing.name()
                ),
                Err(Error::NonFinite { .. }) => format!(
                    "{}\t{params}\t{mult}\tdiverged\t-\t-\t-\t{}\n",
                    kind.name(),
                    balancing.name()
                ),
                Err(e) => return Err(e),
            };
            eprint!("{line}");
            rows.push_str(&line);
        }
    }
    atomic_write(report_path, &rows)?;
    println!("report written to {}", report_path.display());
    Ok(())
}
