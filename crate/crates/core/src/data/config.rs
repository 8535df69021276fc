//! Line-based `key = value` configuration with `#` comments.

use std::path::Path;

use crate::arch::{Preproc, VariantKind};
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::train::{Balancing, FreqDenominator, TrainConfig};

/// Model hyperparameters selectable from a config file.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub variant: VariantKind,
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { variant: VariantKind::SegNetBasic, depth: 4, channels: 64, kernel: 7 }
    }
}

/// Everything a config file can carry: training protocol, model shape,
/// normalization constants, input preprocessing and synthetic-data
/// overrides. Each command reads the sections it needs.
#[derive(Clone, Debug)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub preproc: Preproc,
    pub synth: SynthSpec,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            preproc: Preproc::default(),
            synth: SynthSpec::default(),
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

fn bad(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Config { path: path.to_string(), line, msg: msg.into() }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<FileConfig> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&*path_str, e))?;
    parse_config_str(&text, &path_str)
}

pub fn parse_config_str(text: &str, path_str: &str) -> Result<FileConfig> {
    let mut cfg = FileConfig::default();
    let mut seen = std::collections::HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(path_str, line_no, "expected `key = value`"))?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(bad(path_str, line_no, format!("missing value for '{key}'")));
        }
        if !seen.insert(key.to_string()) {
            return Err(bad(path_str, line_no, format!("duplicate key '{key}'")));
        }

        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| bad(path_str, line_no, format!("'{v}' is not a number")))
        };
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| bad(path_str, line_no, format!("'{v}' is not an integer")))
        };
        let parse_u64 = |v: &str| -> Result<u64> {
            v.parse().map_err(|_| bad(path_str, line_no, format!("'{v}' is not an integer")))
        };
        let parse_bool = |v: &str| -> Result<bool> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(bad(path_str, line_no, format!("'{v}' is not a boolean"))),
            }
        };

        match key {
            // training protocol
            "lr" => cfg.train.lr = parse_f64(value)?,
            "momentum" => cfg.train.momentum = parse_f64(value)?,
            "batch_size" => cfg.train.batch_size = parse_usize(value)?,
            "eval_every" => cfg.train.eval_every = parse_usize(value)?,
            "max_epochs" => cfg.train.max_epochs = parse_usize(value)?,
            "seed" => {
                let s = parse_u64(value)?;
                cfg.train.seed = s;
                cfg.synth.seed = s;
            }
            "start_epoch" => cfg.train.start_epoch = parse_usize(value)?,
            "target_val_g" => cfg.train.target_val_g = Some(parse_f64(value)?),
            "balancing" => {
                cfg.train.balancing = Balancing::from_name(value).ok_or_else(|| {
                    bad(
                        path_str,
                        line_no,
                        format!("'{value}' is not median_frequency or natural_frequency"),
                    )
                })?
            }
            "freq_denominator" => {
                cfg.train.freq_denominator = match value {
                    "presence" => FreqDenominator::PresenceWeighted,
                    "whole_set" => FreqDenominator::WholeSet,
                    _ => {
                        return Err(bad(
                            path_str,
                            line_no,
                            format!("'{value}' is not presence or whole_set"),
                        ))
                    }
                }
            }
            // model
            "variant" => {
                cfg.model.variant = VariantKind::from_name(value).ok_or_else(|| {
                    bad(path_str, line_no, format!("unknown variant '{value}'"))
                })?
            }
            "depth" => cfg.model.depth = parse_usize(value)?,
            "channels" => cfg.model.channels = parse_usize(value)?,
            "kernel" => cfg.model.kernel = parse_usize(value)?,
            // normalization / preprocessing
            "bn_epsilon" => cfg.bn_epsilon = parse_f64(value)?,
            "bn_momentum" => cfg.bn_momentum = parse_f64(value)?,
            "lcn" => cfg.preproc.lcn = parse_bool(value)?,
            "lcn_window" => {
                let wnd = parse_usize(value)?;
                if wnd % 2 == 0 {
                    return Err(bad(path_str, line_no, "lcn_window must be odd"));
                }
                cfg.preproc.lcn_window = wnd;
            }
            "lcn_sigma" => cfg.preproc.lcn_sigma = parse_f64(value)?,
            // synthetic data
            "classes" => cfg.synth.num_classes = parse_usize(value)?,
            "height" => cfg.synth.height = parse_usize(value)?,
            "width" => cfg.synth.width = parse_usize(value)?,
            "train_samples" => cfg.synth.train = parse_usize(value)?,
            "val_samples" => cfg.synth.val = parse_usize(value)?,
            "test_samples" => cfg.synth.test = parse_usize(value)?,
            "skew" => cfg.synth.skew = parse_f64(value)?,
            _ => return Err(bad(path_str, line_no, format!("unknown key '{key}'"))),
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_the_documented_defaults() {
        let cfg = parse_config_str("", "test.cfg").unwrap();
        assert_eq!(cfg.train.lr, 0.1);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.batch_size, 12);
        assert_eq!(cfg.train.eval_every, 1000);
        assert_eq!(cfg.train.balancing, Balancing::MedianFrequency);
        assert_eq!(cfg.model.variant, VariantKind::SegNetBasic);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# protocol\nmomentum = 0.95\nlr = 0.01 # trailing comment\nvariant = fcn-basic\n";
        let cfg = parse_config_str(text, "test.cfg").unwrap();
        assert_eq!(cfg.train.momentum, 0.95);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model.variant, VariantKind::FcnBasic);
    }

    #[test]
    fn type_mismatch_names_the_line() {
        let err = parse_config_str("lr = 0.1\nmomentum = abc\n", "test.cfg").unwrap_err();
        match err {
            Error::Config { line, .. } => assert_eq!(line, 2),
            other => panic!("expected Config, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_names_the_line() {
        let err = parse_config_str("lr = 0.1\nlr = 0.2\n", "test.cfg").unwrap_err();
        match err {
            Error::Config { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("duplicate"), "{msg}");
            }
            other => panic!("expected Config, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse_config_str("learning_rate = 0.1\n", "test.cfg").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }
}
