//! Run configuration: a TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use s2rm::attention::{AttentionOptions, HeadShape};
use s2rm::geometry::KernelConfig;
use s2rm::recurrent::{ModelConfig, ModelKind};
use s2rm::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Option<Scale>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Option<String>,
    pub modules: Option<usize>,
    pub hidden: Option<usize>,
    pub embed_dim: Option<usize>,
    pub encoding: Option<usize>,
    pub epsilon: Option<f64>,
    pub tau: Option<f64>,
    pub input_heads: Option<usize>,
    pub input_key: Option<usize>,
    pub input_value: Option<usize>,
    pub inter_heads: Option<usize>,
    pub inter_key: Option<usize>,
    pub inter_value: Option<usize>,
    pub scale_scores: Option<bool>,
    pub pre_softmax_mask: Option<bool>,
    pub gate_hidden: Option<usize>,
    pub codec_hidden: Option<usize>,
    pub baseline_hidden: Option<usize>,
    pub tto_hidden: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub clip: Option<f64>,
    pub plateau_factor: Option<f64>,
    pub plateau_threshold: Option<f64>,
    pub plateau_patience: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `train.bin`, `val.bin` and `test_b{k}.bin`.
    pub dir: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub tests: Option<Vec<PathBuf>>,
    pub seqs: Option<usize>,
    pub val_seqs: Option<usize>,
    pub test_seqs: Option<usize>,
    pub frames: Option<usize>,
    pub views: Option<usize>,
    pub balls: Option<usize>,
    pub test_balls: Option<Vec<usize>>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    /// `model`, `constant`, `copy-previous` or `oracle`.
    pub predictor: Option<String>,
    pub drop: Option<f64>,
    pub fractions: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub rollout_balls: Option<usize>,
}

/// Errors in the configuration itself; reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Recursively overlays `top` onto `base`; keys present in `top` win.
fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("invalid config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    /// `self` with every value set in `flags` replacing the file's value.
    pub fn merged(&self, flags: &RunConfig) -> Result<Self, ConfigError> {
        let to_table = |c: &RunConfig| {
            toml::Table::try_from(c).map_err(|e| ConfigError(format!("cannot serialize config: {e}")))
        };
        let mut base = to_table(self)?;
        overlay(&mut base, to_table(flags)?);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(format!("invalid config: {}", e.message())))
    }

    pub fn scale(&self) -> Scale {
        self.scale.unwrap_or_default()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn model_kind(&self) -> Result<ModelKind, ConfigError> {
        let name = self.model.kind.as_deref().unwrap_or("s2gru");
        ModelKind::parse(name).or_else(|_| config_err(format!("unknown model kind `{name}`")))
    }

    /// Model configuration from the scale preset with file and flag overrides.
    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let kind = self.model_kind()?;
        let base = match self.scale() {
            Scale::Desk => ModelConfig::desk(kind),
            Scale::Paper => ModelConfig::paper(kind),
        };
        let m = &self.model;
        let cfg = ModelConfig {
            kind,
            modules: m.modules.unwrap_or(base.modules),
            hidden: m.hidden.unwrap_or(base.hidden),
            embed_dim: m.embed_dim.unwrap_or(base.embed_dim),
            encoding: m.encoding.unwrap_or(base.encoding),
            kernel: KernelConfig {
                epsilon: m.epsilon.unwrap_or(base.kernel.epsilon),
                tau: m.tau.unwrap_or(base.kernel.tau),
            },
            input_heads: HeadShape {
                heads: m.input_heads.unwrap_or(base.input_heads.heads),
                key: m.input_key.unwrap_or(base.input_heads.key),
                value: m.input_value.unwrap_or(base.input_heads.value),
            },
            inter_heads: HeadShape {
                heads: m.inter_heads.unwrap_or(base.inter_heads.heads),
                key: m.inter_key.unwrap_or(base.inter_heads.key),
                value: m.inter_value.unwrap_or(base.inter_heads.value),
            },
            attention: AttentionOptions {
                scale_scores: m.scale_scores.unwrap_or(base.attention.scale_scores),
                pre_softmax_mask: m.pre_softmax_mask.unwrap_or(base.attention.pre_softmax_mask),
            },
            gate_hidden: m.gate_hidden.unwrap_or(base.gate_hidden),
            codec_hidden: m.codec_hidden.unwrap_or(base.codec_hidden),
            baseline_hidden: m.baseline_hidden.unwrap_or(base.baseline_hidden),
            tto_hidden: m.tto_hidden.unwrap_or(base.tto_hidden),
            domain: base.domain,
            seed: m.seed.unwrap_or(base.seed),
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let base = match self.scale() {
            Scale::Desk => TrainConfig::desk(),
            Scale::Paper => TrainConfig::paper(),
        };
        let t = &self.train;
        let cfg = TrainConfig {
            lr: t.lr.unwrap_or(base.lr),
            batch: t.batch.unwrap_or(base.batch),
            epochs: t.epochs.unwrap_or(base.epochs),
            seed: t.seed.unwrap_or(base.seed),
            clip: t.clip.unwrap_or(base.clip),
            plateau_factor: t.plateau_factor.unwrap_or(base.plateau_factor),
            plateau_threshold: t.plateau_threshold.unwrap_or(base.plateau_threshold),
            plateau_patience: t.plateau_patience.unwrap_or(base.plateau_patience),
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    /// Every value resolved against the presets, with absolute paths; this is
    /// what gets echoed next to a command's outputs.
    pub fn resolved(&self) -> Result<Self, ConfigError> {
        let model = self.model_config()?;
        let train = self.train_config()?;
        let abs = |p: &Path| std::path::absolute(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())));
        let abs_opt = |p: &Option<PathBuf>| p.as_deref().map(abs).transpose();
        let paper = self.scale() == Scale::Paper;
        let d = &self.data;
        let e = &self.eval;
        Ok(Self {
            scale: Some(self.scale()),
            out: Some(abs(&self.out_dir())?),
            threads: self.threads,
            model: ModelSection {
                kind: Some(model.kind.name().to_string()),
                modules: Some(model.modules),
                hidden: Some(model.hidden),
                embed_dim: Some(model.embed_dim),
                encoding: Some(model.encoding),
                epsilon: Some(model.kernel.epsilon),
                tau: Some(model.kernel.tau),
                input_heads: Some(model.input_heads.heads),
                input_key: Some(model.input_heads.key),
                input_value: Some(model.input_heads.value),
                inter_heads: Some(model.inter_heads.heads),
                inter_key: Some(model.inter_heads.key),
                inter_value: Some(model.inter_heads.value),
                scale_scores: Some(model.attention.scale_scores),
                pre_softmax_mask: Some(model.attention.pre_softmax_mask),
                gate_hidden: Some(model.gate_hidden),
                codec_hidden: Some(model.codec_hidden),
                baseline_hidden: Some(model.baseline_hidden),
                tto_hidden: Some(model.tto_hidden),
                seed: Some(model.seed),
            },
            train: TrainSection {
                lr: Some(train.lr),
                batch: Some(train.batch),
                epochs: Some(train.epochs),
                seed: Some(train.seed),
                clip: Some(train.clip),
                plateau_factor: Some(train.plateau_factor),
                plateau_threshold: Some(train.plateau_threshold),
                plateau_patience: Some(train.plateau_patience),
            },
            data: DataSection {
                dir: Some(abs(d.dir.as_deref().unwrap_or(Path::new("data")))?),
                train: abs_opt(&d.train)?,
                val: abs_opt(&d.val)?,
                tests: d.tests.as_ref().map(|v| v.iter().map(|p| abs(p)).collect()).transpose()?,
                seqs: Some(d.seqs.unwrap_or(if paper { 20_000 } else { 500 })),
                val_seqs: Some(d.val_seqs.unwrap_or(if paper { 1_000 } else { 50 })),
                test_seqs: Some(d.test_seqs.unwrap_or(if paper { 1_000 } else { 50 })),
                frames: Some(d.frames.unwrap_or(if paper { 100 } else { 30 })),
                views: Some(d.views.unwrap_or(10)),
                balls: Some(d.balls.unwrap_or(3)),
                test_balls: d.test_balls.clone(),
                seed: Some(d.seed.unwrap_or(7)),
            },
            eval: EvalSection {
                checkpoint: abs_opt(&e.checkpoint)?,
                predictor: Some(e.predictor.clone().unwrap_or_else(|| "model".into())),
                drop: Some(e.drop.unwrap_or(0.0)),
                fractions: Some(e.fractions.clone().unwrap_or_else(s2rm::evalsuite::default_fractions)),
                seed: Some(e.seed.unwrap_or(0)),
                rollout_balls: Some(e.rollout_balls.unwrap_or(3)),
            },
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configs serialize")
    }
}
