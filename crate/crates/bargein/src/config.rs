//! Flat `key = value` run configuration files with CLI overrides.
//!
//! A config file is a sequence of lines; blank lines and `#` comments are
//! ignored. Values are bare tokens (no quoting). Unknown keys are errors so
//! typos fail loudly. `--set key=value` overrides win over the file.

use std::fmt::Write as _;
use std::path::Path;

use crate::baseline::BaselineConfig;
use crate::datagen::GenConfig;
use crate::encoders::speech::SpeechEncoderConfig;
use crate::encoders::WidthProfile;
use crate::fusion::{FusionConfig, TrainConfig};
use crate::infusion::{InfusionConfig, PretrainConfig};
use crate::nn::OptimizerKind;
use crate::{Error, Result};

/// Everything a run needs, resolved from file + overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub gen: GenConfig,
    pub widths: WidthProfile,
    pub speech: SpeechEncoderConfig,
    pub language_layers: usize,
    pub fusion_hidden: usize,
    pub use_prompt: bool,
    pub use_context: bool,
    pub dropout: f64,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub baseline_layers: usize,
    pub baseline_hidden: usize,
    pub latency_warmup: usize,
    pub latency_runs: usize,
}

impl RunConfig {
    pub fn toy() -> Self {
        let speech = SpeechEncoderConfig::toy();
        RunConfig {
            seed: 0,
            gen: GenConfig::toy(0),
            widths: WidthProfile::toy(),
            speech,
            language_layers: 2,
            fusion_hidden: 16,
            use_prompt: true,
            use_context: true,
            dropout: 0.2,
            train: TrainConfig::full(0),
            pretrain: PretrainConfig::toy(0),
            baseline_layers: 1,
            baseline_hidden: 24,
            latency_warmup: 3,
            latency_runs: 5,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            widths: self.widths.clone(),
            speech: self.speech.clone(),
            use_prompt: self.use_prompt,
            use_context: self.use_context,
            language_layers: self.language_layers,
            fusion_hidden: self.fusion_hidden,
            dropout: self.dropout,
            seed: self.seed,
        }
    }

    pub fn infusion_config(&self) -> InfusionConfig {
        InfusionConfig {
            speech: self.speech.clone(),
            language_layers: self.language_layers,
            freeze_encoder: false,
            seed: self.seed,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        let mut b = BaselineConfig::toy(self.seed);
        b.layers = self.baseline_layers;
        b.hidden = self.baseline_hidden;
        b
    }

    /// Applies file contents, then overrides, to the toy defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::toy();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected `key = value`",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                cfg.set(key.trim(), value.trim())?;
            }
        }
        for (key, value) in overrides {
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.train.validate()?;
        cfg.gen.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
        }
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.gen.seed = self.seed;
                self.train.seed = self.seed;
                self.pretrain.seed = self.seed;
            }
            "gen.n_train" => self.gen.n_train = parse(key, value)?,
            "gen.n_val" => self.gen.n_val = parse(key, value)?,
            "gen.n_test" => self.gen.n_test = parse(key, value)?,
            "gen.vocab_size" => self.gen.vocab_size = parse(key, value)?,
            "gen.ambiguity_fraction" => self.gen.ambiguity_fraction = parse(key, value)?,
            "gen.mean_duration" => self.gen.mean_duration = parse(key, value)?,
            "gen.noise_snr_db" => {
                self.gen.noise_snr_db = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "gen.echo_contamination" => self.gen.echo_contamination = parse(key, value)?,
            "widths.hidden" => {
                self.widths.hidden = parse(key, value)?;
                self.speech.hidden = self.widths.hidden;
            }
            "widths.context_embed" => self.widths.context_embed = parse(key, value)?,
            "widths.projection" => self.widths.projection = parse(key, value)?,
            "speech.layers" => self.speech.layers = parse(key, value)?,
            "speech.heads" => self.speech.heads = parse(key, value)?,
            "speech.ff_width" => self.speech.ff_width = parse(key, value)?,
            "language_layers" => self.language_layers = parse(key, value)?,
            "fusion_hidden" => self.fusion_hidden = parse(key, value)?,
            "use_prompt" => self.use_prompt = parse(key, value)?,
            "use_context" => self.use_context = parse(key, value)?,
            "dropout" => {
                self.dropout = parse(key, value)?;
                self.train.dropout = self.dropout;
            }
            "train.optimizer" => {
                self.train.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => {
                        return Err(Error::Config(format!(
                            "bad value `{value}` for key `train.optimizer` (sgd|adam)"
                        )))
                    }
                }
            }
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.fine_tune_speech" => self.train.fine_tune_speech = parse(key, value)?,
            "train.clip_norm" => {
                self.train.clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "pretrain.learning_rate" => self.pretrain.learning_rate = parse(key, value)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, value)?,
            "pretrain.clip_norm" => {
                self.pretrain.clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "baseline.layers" => self.baseline_layers = parse(key, value)?,
            "baseline.hidden" => self.baseline_hidden = parse(key, value)?,
            "latency.warmup" => self.latency_warmup = parse(key, value)?,
            "latency.runs" => self.latency_runs = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Echo of the fully resolved configuration, in config-file syntax.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let kv: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("gen.n_train", self.gen.n_train.to_string()),
            ("gen.n_val", self.gen.n_val.to_string()),
            ("gen.n_test", self.gen.n_test.to_string()),
            ("gen.vocab_size", self.gen.vocab_size.to_string()),
            (
                "gen.ambiguity_fraction",
                self.gen.ambiguity_fraction.to_string(),
            ),
            ("gen.mean_duration", self.gen.mean_duration.to_string()),
            (
                "gen.noise_snr_db",
                self.gen
                    .noise_snr_db
                    .map_or("none".into(), |v| v.to_string()),
            ),
            (
                "gen.echo_contamination",
                self.gen.echo_contamination.to_string(),
            ),
            ("widths.hidden", self.widths.hidden.to_string()),
            ("widths.context_embed", self.widths.context_embed.to_string()),
            ("widths.projection", self.widths.projection.to_string()),
            ("speech.layers", self.speech.layers.to_string()),
            ("speech.heads", self.speech.heads.to_string()),
            ("speech.ff_width", self.speech.ff_width.to_string()),
            ("language_layers", self.language_layers.to_string()),
            ("fusion_hidden", self.fusion_hidden.to_string()),
            ("use_prompt", self.use_prompt.to_string()),
            ("use_context", self.use_context.to_string()),
            ("dropout", self.dropout.to_string()),
            (
                "train.optimizer",
                match self.train.optimizer {
                    OptimizerKind::Sgd => "sgd".into(),
                    OptimizerKind::Adam => "adam".into(),
                },
            ),
            ("train.learning_rate", self.train.learning_rate.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            (
                "train.fine_tune_speech",
                self.train.fine_tune_speech.to_string(),
            ),
            (
                "train.clip_norm",
                self.train.clip_norm.map_or("none".into(), |v| v.to_string()),
            ),
            (
                "pretrain.learning_rate",
                self.pretrain.learning_rate.to_string(),
            ),
            ("pretrain.steps", self.pretrain.steps.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            (
                "pretrain.clip_norm",
                self.pretrain
                    .clip_norm
                    .map_or("none".into(), |v| v.to_string()),
            ),
            ("baseline.layers", self.baseline_layers.to_string()),
            ("baseline.hidden", self.baseline_hidden.to_string()),
            ("latency.warmup", self.latency_warmup.to_string()),
            ("latency.runs", self.latency_runs.to_string()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Parses `--set key=value` arguments.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override `{arg}` must be key=value")))
}
