//! Flat `key = value` settings shared by the config file, the command line
//! overrides and the checkpoint metadata block.

use std::path::Path;
use std::str::FromStr;

use crate::audio_io::{SplitRatios, SynthSpec};
use crate::autodiff::Padding;
use crate::dsp::{DspConfig, FeatureKind, Window};
use crate::error::{KwsError, Result};
use crate::models::{Arch, ModelConfig};
use crate::training::TrainConfig;

/// A settings struct addressable by flat keys.
pub trait KeyValue {
    /// Every key with its current value, in a fixed order.
    fn pairs(&self) -> Vec<(&'static str, String)>;

    /// Sets one key. `Ok(false)` for an unknown key, `Err` with a reason
    /// for a value that does not parse.
    fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<bool, String>;
}

pub(crate) fn parse<T: FromStr>(value: &str, what: &str) -> std::result::Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("cannot parse '{}' as {what}", value.trim()))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("cannot parse '{other}' as a boolean")),
    }
}

fn parse_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|v| parse::<usize>(v, "a comma-separated list of counts"))
        .collect()
}

fn join(list: &[usize]) -> String {
    list.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl KeyValue for DspConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("sample_rate", self.sample_rate.to_string()),
            ("frame_len", self.frame_len.to_string()),
            ("hop_len", self.hop_len.to_string()),
            ("n_fft", self.n_fft.to_string()),
            ("pre_emphasis_alpha", self.pre_emphasis_alpha.to_string()),
            ("n_mel_filters", self.n_mel_filters.to_string()),
            ("n_mfcc", self.n_mfcc.to_string()),
            ("fmin", self.fmin.to_string()),
            ("fmax", self.fmax.to_string()),
            ("log_floor", self.log_floor.to_string()),
            ("window", self.window.name().to_string()),
            ("features", self.kind.name().to_string()),
        ]
    }

    fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "sample_rate" => self.sample_rate = parse(value, "a sample rate")?,
            "frame_len" => self.frame_len = parse(value, "a count")?,
            "hop_len" => self.hop_len = parse(value, "a count")?,
            "n_fft" => self.n_fft = parse(value, "a count")?,
            "pre_emphasis_alpha" => self.pre_emphasis_alpha = parse(value, "a number")?,
            "n_mel_filters" => self.n_mel_filters = parse(value, "a count")?,
            "n_mfcc" => self.n_mfcc = parse(value, "a count")?,
            "fmin" => self.fmin = parse(value, "a frequency")?,
            "fmax" => self.fmax = parse(value, "a frequency")?,
            "log_floor" => self.log_floor = parse(value, "a number")?,
            "window" => {
                self.window = Window::parse(value.trim())
                    .ok_or_else(|| format!("unknown window '{}' (hamming, rectangular)", value.trim()))?
            }
            "features" => {
                self.kind = FeatureKind::parse(value.trim())
                    .ok_or_else(|| format!("unknown feature kind '{}' (mfcc, log_mel)", value.trim()))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KeyValue for ModelConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("arch", self.arch.name().to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("input_frames", self.input_shape.0.to_string()),
            ("input_dim", self.input_shape.1.to_string()),
            ("conv_channels", join(&self.conv_channels)),
            ("conv_padding", self.conv_padding.name().to_string()),
            ("lstm_hidden", self.lstm_hidden.to_string()),
            ("dense_hidden", self.dense_hidden.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "arch" => {
                self.arch = Arch::parse(value.trim()).ok_or_else(|| {
                    format!(
                        "unknown arch '{}' (cnn, cnn_bilstm, attention_rnn, multilayer_attention)",
                        value.trim()
                    )
                })?
            }
            "n_classes" => self.n_classes = parse(value, "a count")?,
            "input_frames" => self.input_shape.0 = parse(value, "a count")?,
            "input_dim" => self.input_shape.1 = parse(value, "a count")?,
            "conv_channels" => self.conv_channels = parse_list(value)?,
            "conv_padding" => {
                self.conv_padding = Padding::parse(value.trim())
                    .ok_or_else(|| format!("unknown padding '{}' (same, valid)", value.trim()))?
            }
            "lstm_hidden" => self.lstm_hidden = parse(value, "a count")?,
            "dense_hidden" => self.dense_hidden = parse(value, "a count")?,
            "dropout_rate" => self.dropout_rate = parse(value, "a number")?,
            "seed" => self.seed = parse(value, "an integer seed")?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KeyValue for TrainConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("max_epochs", self.max_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("log_wall_time", self.log_wall_time.to_string()),
        ]
    }

    fn set_key(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        match key {
            "max_epochs" => self.max_epochs = parse(value, "a count")?,
            "batch_size" => self.batch_size = parse(value, "a count")?,
            "base_lr" => self.base_lr = parse(value, "a number")?,
            "lr_decay" => self.lr_decay = parse(value, "a number")?,
            "patience" => self.patience = parse(value, "a count")?,
            "seed" => self.seed = parse(value, "an integer seed")?,
            "log_wall_time" => self.log_wall_time = parse_bool(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses a synthetic dataset spec file: `n_classes`, `clips_per_class`,
/// `sample_rate`, `class_frequencies` (comma list), `noise_amplitude` and
/// `seed`. Unset frequencies follow the default tone ladder. Returns the
/// spec and its seed (default 0).
pub fn parse_synth_spec(text: &str, source: &str) -> Result<(SynthSpec, u64)> {
    let mut spec = SynthSpec::tones(3, 20);
    let mut freqs = None;
    let mut seed = 0;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |m: String| KwsError::Config(format!("{source}:{}: {m} (line '{}')", no + 1, raw.trim()));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected 'key = value'".into()))?;
        let key = key.trim();
        let set = |r: std::result::Result<(), String>| r.map_err(|m| err(format!("key '{key}': {m}")));
        match key {
            "n_classes" => set(parse(value, "a count").map(|v| spec.n_classes = v))?,
            "clips_per_class" => set(parse(value, "a count").map(|v| spec.clips_per_class = v))?,
            "sample_rate" => set(parse(value, "a sample rate").map(|v| spec.sample_rate = v))?,
            "noise_amplitude" => set(parse(value, "a number").map(|v| spec.noise_amplitude = v))?,
            "seed" => set(parse(value, "an integer seed").map(|v| seed = v))?,
            "class_frequencies" => set(value
                .split(',')
                .map(|f| parse::<f64>(f, "a comma-separated list of frequencies"))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(|v| freqs = Some(v)))?,
            _ => return Err(err(format!("unknown key '{key}'"))),
        }
    }
    spec.class_frequencies = match freqs {
        Some(f) => f,
        None => SynthSpec::tones(spec.n_classes, 1).class_frequencies,
    };
    spec.validate()?;
    Ok((spec, seed))
}

/// Fully resolved settings of one command-line run.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub dsp: DspConfig,
    pub arch: Arch,
    /// `None` keeps the architecture's default channels.
    pub conv_channels: Option<Vec<usize>>,
    pub conv_padding: Padding,
    pub lstm_hidden: usize,
    pub dense_hidden: usize,
    pub dropout_rate: f64,
    pub train: TrainConfig,
    pub split: SplitRatios,
    /// Seeds initialization, shuffling, dropout and the split.
    pub seed: u64,
    /// Class set; empty means every label directory under the data root.
    pub labels: Vec<String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        let model = ModelConfig::new(Arch::MultilayerAttention, 2, (1, 1));
        Self {
            dsp: DspConfig {
                kind: FeatureKind::LogMel,
                ..DspConfig::default()
            },
            arch: model.arch,
            conv_channels: None,
            conv_padding: model.conv_padding,
            lstm_hidden: model.lstm_hidden,
            dense_hidden: model.dense_hidden,
            dropout_rate: model.dropout_rate,
            train: TrainConfig::default(),
            split: SplitRatios::default(),
            seed: 0,
            labels: Vec::new(),
        }
    }
}

impl CliConfig {
    pub fn model_config(&self, n_classes: usize) -> ModelConfig {
        let mut c = ModelConfig::new(self.arch, n_classes, self.dsp.feature_shape());
        if let Some(ch) = &self.conv_channels {
            c.conv_channels = ch.clone();
        }
        c.conv_padding = self.conv_padding;
        c.lstm_hidden = self.lstm_hidden;
        c.dense_hidden = self.dense_hidden;
        c.dropout_rate = self.dropout_rate;
        c.seed = self.seed;
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Applies `path` (if any) then `overrides`, on top of the defaults.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| KwsError::io(path, e))?;
            config.apply_text(&text, &path.display().to_string())?;
        }
        for (key, value) in overrides {
            config
                .apply(key, value)
                .map_err(|m| KwsError::Config(format!("override {key}={value}: {m}")))?;
        }
        Ok(config)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| KwsError::Config(format!("{source}:{}: {m} (line '{}')", no + 1, raw.trim()));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected 'key = value'".into()))?;
            let key = key.trim();
            self.apply(key, value.trim())
                .map_err(|m| err(format!("key '{key}': {m}")))?;
        }
        Ok(())
    }

    /// Sets one key, rejecting unknown keys.
    pub fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let known = match key {
            "arch" | "conv_padding" | "lstm_hidden" | "dense_hidden" | "dropout_rate" => {
                let mut m = self.model_config(2);
                m.set_key(key, value)?;
                self.arch = m.arch;
                self.conv_padding = m.conv_padding;
                self.lstm_hidden = m.lstm_hidden;
                self.dense_hidden = m.dense_hidden;
                self.dropout_rate = m.dropout_rate;
                true
            }
            "conv_channels" => {
                self.conv_channels = match value.trim() {
                    "default" => None,
                    v => Some(parse_list(v)?),
                };
                true
            }
            "seed" => {
                self.seed = parse(value, "an integer seed")?;
                true
            }
            "train_ratio" => {
                self.split.train = parse(value, "a ratio")?;
                true
            }
            "val_ratio" => {
                self.split.val = parse(value, "a ratio")?;
                true
            }
            "test_ratio" => {
                self.split.test = parse(value, "a ratio")?;
                true
            }
            "labels" => {
                self.labels = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
                true
            }
            _ => self.dsp.set_key(key, value)? || self.train.set_key(key, value)?,
        };
        if known {
            Ok(())
        } else {
            Err(format!("unknown key '{key}'"))
        }
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = self.dsp.pairs();
        out.push(("arch", self.arch.name().to_string()));
        out.push((
            "conv_channels",
            self.conv_channels.as_deref().map_or("default".to_string(), join),
        ));
        out.push(("conv_padding", self.conv_padding.name().to_string()));
        out.push(("lstm_hidden", self.lstm_hidden.to_string()));
        out.push(("dense_hidden", self.dense_hidden.to_string()));
        out.push(("dropout_rate", self.dropout_rate.to_string()));
        out.extend(self.train.pairs().into_iter().filter(|(k, _)| *k != "seed"));
        out.push(("train_ratio", self.split.train.to_string()));
        out.push(("val_ratio", self.split.val.to_string()));
        out.push(("test_ratio", self.split.test.to_string()));
        out.push(("seed", self.seed.to_string()));
        out.push(("labels", self.labels.join(",")));
        out
    }

    /// Front-end settings only.
    pub fn dsp_pairs(&self) -> Vec<(&'static str, String)> {
        self.dsp.pairs()
    }

    /// Checks every section.
    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.train_config().validate()?;
        self.split.validate()?;
        Ok(())
    }
}

/// `parse_config` entry point: file then overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<CliConfig> {
    CliConfig::load(path, overrides)
}
