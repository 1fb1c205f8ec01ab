//! Plain-text run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment (full-line or
//! trailing) and blank lines are skipped. Keys are namespaced `synth.*`
//! for dataset generation and `train.*` for training; every key maps to
//! exactly one field, unknown or repeated keys are rejected, and the file
//! parses as a whole or not at all. Omitted keys keep their defaults.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::MarginType;
use crate::synth::SynthSpec;
use crate::train::{Schedule, TrainConfig};

/// Full run configuration: dataset recipe plus training settings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()
    }
}

fn parse_error(line_no: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: line_no,
        message: message.into(),
    }
}

fn parse_value<T: std::str::FromStr>(line_no: u64, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| parse_error(line_no, format!("bad value {value:?} for {key}")))
}

fn parse_list(line_no: u64, key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|part| parse_value(line_no, key, part.trim()))
        .collect()
}

/// Parse configuration text on top of the defaults.
pub fn parse(text: &str) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let mut seen = BTreeSet::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_error(line_no, format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(parse_error(line_no, format!("duplicate key {key}")));
        }
        let s = &mut config.synth;
        let t = &mut config.train;
        match key {
            "synth.speakers" => s.speakers = parse_value(line_no, key, value)?,
            "synth.utts_per_speaker" => s.utts_per_speaker = parse_value(line_no, key, value)?,
            "synth.first_utt" => s.first_utt = parse_value(line_no, key, value)?,
            "synth.frames" => s.frames = parse_value(line_no, key, value)?,
            "synth.feature_dim" => s.feature_dim = parse_value(line_no, key, value)?,
            "synth.hidden_layers" => {
                s.hidden_layers = parse_value(line_no, key, value)?;
                // A matching default gain profile so the two keys need not
                // always travel together; an explicit synth.snr still wins.
                if !seen.contains("synth.snr") {
                    s.snr = default_snr(s.hidden_layers);
                }
            }
            "synth.snr" => s.snr = parse_list(line_no, key, value)?,
            "synth.period" => s.period = parse_value(line_no, key, value)?,
            "synth.noise_sigma" => s.noise_sigma = parse_value(line_no, key, value)?,
            "synth.seed" => s.seed = parse_value(line_no, key, value)?,
            "train.groups" => t.groups = parse_value(line_no, key, value)?,
            "train.context" => t.context = parse_value(line_no, key, value)?,
            "train.head_dim" => t.head_dim = parse_value(line_no, key, value)?,
            "train.embed_dim" => t.embed_dim = parse_value(line_no, key, value)?,
            "train.margin" => t.margin = parse_value(line_no, key, value)?,
            "train.scale" => t.scale = parse_value(line_no, key, value)?,
            "train.margin_type" => {
                t.margin_type = MarginType::parse(value)
                    .map_err(|e| parse_error(line_no, e.to_string()))?
            }
            "train.lr_start" => t.lr_start = parse_value(line_no, key, value)?,
            "train.lr_end" => t.lr_end = parse_value(line_no, key, value)?,
            "train.schedule" => {
                t.schedule = Schedule::parse(value)
                    .map_err(|e| parse_error(line_no, e.to_string()))?
            }
            "train.epochs" => t.epochs = parse_value(line_no, key, value)?,
            "train.batch_size" => t.batch_size = parse_value(line_no, key, value)?,
            "train.weight_decay" => t.weight_decay = parse_value(line_no, key, value)?,
            "train.grad_scale_backbone" => {
                t.grad_scale_backbone = parse_value(line_no, key, value)?
            }
            "train.seed" => t.seed = parse_value(line_no, key, value)?,
            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
    }
    config.validate()?;
    Ok(config)
}

/// Linearly descending per-layer gains, 2.0 at the input layer.
fn default_snr(hidden_layers: usize) -> Vec<f64> {
    let layers = hidden_layers + 1;
    (0..layers)
        .map(|i| 2.0 - 1.6 * i as f64 / layers.max(2).saturating_sub(1) as f64)
        .collect()
}

pub fn load(path: &Path) -> Result<RunConfig> {
    parse(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_the_defaults() {
        let config = parse("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.synth.speakers, 20);
        assert_eq!(config.train.groups, 8);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let config = parse(
            "# a full-line comment\n\n  \ntrain.groups = 4  # trailing comment\n",
        )
        .unwrap();
        assert_eq!(config.train.groups, 4);
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let text = "\
synth.speakers = 5
synth.utts_per_speaker = 6
synth.first_utt = 30
synth.frames = 21
synth.feature_dim = 9
synth.hidden_layers = 2
synth.snr = 3.0, 2.0, 1.0
synth.period = 7
synth.noise_sigma = 0.5
synth.seed = 11
train.groups = 2
train.context = 5
train.head_dim = 3
train.embed_dim = 10
train.margin = 0.15
train.scale = 24
train.margin_type = am
train.lr_start = 1e-3
train.lr_end = 1e-5
train.schedule = linear
train.epochs = 7
train.batch_size = 12
train.weight_decay = 0.01
train.grad_scale_backbone = 1.0
train.seed = 99
";
        let config = parse(text).unwrap();
        assert_eq!(config.synth.speakers, 5);
        assert_eq!(config.synth.first_utt, 30);
        assert_eq!(config.synth.snr, vec![3.0, 2.0, 1.0]);
        assert_eq!(config.train.margin_type, MarginType::Additive);
        assert_eq!(config.train.schedule, Schedule::Linear);
        assert_eq!(config.train.context, 5);
        assert_eq!(config.train.seed, 99);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        match parse("train.groops = 8\n") {
            Err(Error::UnknownConfigKey(key)) => assert_eq!(key, "train.groops"),
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_keys_are_rejected_with_the_line_number() {
        match parse("train.groups = 8\ntrain.groups = 9\n") {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 2);
                assert!(message.contains("duplicate"));
            }
            other => panic!("expected duplicate-key error, got {other:?}"),
        }
    }

    #[test]
    fn bad_values_name_the_key_and_line() {
        match parse("\ntrain.epochs = soon\n") {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 2);
                assert!(message.contains("train.epochs"));
                assert!(message.contains("soon"));
            }
            other => panic!("expected value error, got {other:?}"),
        }
    }

    #[test]
    fn missing_equals_sign_is_a_parse_error() {
        assert!(matches!(
            parse("train.groups 8\n"),
            Err(Error::Parse { offset: 1, .. })
        ));
    }

    #[test]
    fn semantic_validation_runs_after_parsing() {
        assert!(matches!(
            parse("train.context = 2\n"),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            parse("synth.noise_sigma = -1\n"),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn hidden_layer_changes_resize_the_gain_profile() {
        let config = parse("synth.hidden_layers = 2\n").unwrap();
        assert_eq!(config.synth.snr.len(), 3);
        config.synth.validate().unwrap();
        // An explicit profile wins regardless of key order.
        let config = parse("synth.snr = 1,1,1\nsynth.hidden_layers = 2\n").unwrap();
        assert_eq!(config.synth.snr, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn mismatched_gain_profile_is_rejected() {
        assert!(matches!(
            parse("synth.hidden_layers = 3\nsynth.snr = 1.0, 0.5\n"),
            Err(Error::InvalidConfig(_))
        ));
    }
}
