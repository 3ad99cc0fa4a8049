//! Run configuration, loaded from JSON.
//!
//! Every section has defaults, unknown keys are rejected, and
//! `lambda2` does not exist as a key: it is always `1 − lambda1`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{MiChannels, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{CoralNorm, LossWeights};
use crate::matching::{DynmRule, RefreshSchedule};
use crate::nets::{BridgeConfig, ClassifierConfig, EncoderConfig, MatcherConfig};
use crate::transport::SinkhornConfig;

/// Encoder width presets standing in for the large and compact backbones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthPreset {
    Large,
    Small,
}

impl WidthPreset {
    pub fn widths(self) -> Vec<usize> {
        match self {
            WidthPreset::Large => vec![16, 32, 64],
            WidthPreset::Small => vec![8, 16, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Widths {
    Preset(WidthPreset),
    Custom(Vec<usize>),
}

impl Widths {
    pub fn resolve(&self) -> Vec<usize> {
        match self {
            Widths::Preset(p) => p.widths(),
            Widths::Custom(w) => w.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Student epochs.
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub matcher_epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            batch_size: 128,
            epochs: 200,
            teacher_epochs: 60,
            matcher_epochs: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherSettings {
    pub widths: Widths,
    pub embed_dim: usize,
    pub init_logit_scale: f64,
    /// Upper bound on the learned logit scale.
    pub max_logit_scale: f64,
}

impl Default for MatcherSettings {
    fn default() -> Self {
        MatcherSettings {
            widths: Widths::Preset(WidthPreset::Small),
            embed_dim: 32,
            init_logit_scale: 1.0 / 0.07,
            max_logit_scale: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSettings {
    pub d_model: usize,
    pub heads: usize,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        PlannerSettings { d_model: 64, heads: 8 }
    }
}

/// Switches for the ablation study. With `ssm` off the initial pairing is
/// random within class; with `dynm` off it is never refreshed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub ssm: bool,
    pub dynm: bool,
    pub kd: bool,
    pub ot1: bool,
    pub ot2: bool,
    pub dynm_rule: DynmRule,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            ssm: true,
            dynm: true,
            kd: true,
            ot1: true,
            ot2: true,
            dynm_rule: DynmRule::Argmin,
        }
    }
}

impl Ablation {
    /// Task loss only.
    pub fn no_kd() -> Self {
        Ablation {
            ssm: false,
            dynm: false,
            kd: false,
            ot1: false,
            ot2: false,
            ..Ablation::default()
        }
    }

    /// Logit distillation on a fixed random within-class pairing.
    pub fn vanilla_random() -> Self {
        Ablation {
            kd: true,
            ..Ablation::no_kd()
        }
    }

    pub fn label(&self) -> String {
        let on = |b: bool| if b { "1" } else { "0" };
        format!(
            "ssm={} dynm={} kd={} ot1={} ot2={} rule={:?}",
            on(self.ssm),
            on(self.dynm),
            on(self.kd),
            on(self.ot1),
            on(self.ot2),
            self.dynm_rule
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Log transport costs every epoch of student training.
    pub enabled: bool,
    /// Student samples per transport problem.
    pub batch: usize,
    pub sinkhorn: SinkhornConfig,
    pub mi_pairs: usize,
    pub mi_channels: MiChannels,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            enabled: true,
            batch: 64,
            sinkhorn: SinkhornConfig::default(),
            mi_pairs: crate::data::DEFAULT_MI_PAIRS,
            mi_channels: MiChannels::Average,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset directory, written by `gen-data` and read by every later stage.
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Generator settings for `gen-data`.
    pub data: SyntheticSpec,
    pub teacher: Widths,
    pub student: Widths,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub coral_norm: CoralNorm,
    pub schedule: RefreshSchedule,
    pub matcher: MatcherSettings,
    pub planner: PlannerSettings,
    pub ablation: Ablation,
    pub diagnostics: DiagnosticsConfig,
    /// Render PNG line charts next to the metrics CSVs.
    pub plots: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            data: SyntheticSpec::default(),
            teacher: Widths::Preset(WidthPreset::Large),
            student: Widths::Preset(WidthPreset::Small),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            coral_norm: CoralNorm::default(),
            schedule: RefreshSchedule::default(),
            matcher: MatcherSettings::default(),
            planner: PlannerSettings::default(),
            ablation: Ablation::default(),
            diagnostics: DiagnosticsConfig::default(),
            plots: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                what: "config file",
                path: path.to_path_buf(),
            },
            _ => Error::io(path, e),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let o = &self.optimizer;
        if o.epochs == 0 || o.teacher_epochs == 0 || o.matcher_epochs == 0 {
            return bad("epoch counts must be at least 1");
        }
        if o.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        self.loss.validate()?;
        self.data.validate()?;
        for w in [self.teacher.resolve(), self.student.resolve(), self.matcher.widths.resolve()] {
            if w.is_empty() || w.contains(&0) {
                return bad("encoder widths must be non-empty and positive");
            }
        }
        if self.planner.heads == 0 || !self.planner.d_model.is_multiple_of(self.planner.heads) {
            return bad("planner heads must divide d_model");
        }
        if self.matcher.embed_dim == 0 || !(self.matcher.init_logit_scale > 0.0) {
            return bad("matcher embed_dim and init_logit_scale must be positive");
        }
        if self.diagnostics.batch < 2 {
            return bad("diagnostics batch must be at least 2");
        }
        if self.schedule.delta_e == 0 && self.schedule.e_mu == 0 {
            return bad("refresh schedule must advance");
        }
        Ok(())
    }

    /// Fails with a config error when the dataset directory is absent.
    pub fn require_dataset(&self) -> Result<()> {
        if self.dataset.join(crate::data::MANIFEST_FILE).is_file() {
            Ok(())
        } else {
            Err(Error::Config(format!("dataset {} does not exist", self.dataset.display())))
        }
    }

    pub fn teacher_config(&self, spec: &SyntheticSpec) -> ClassifierConfig {
        ClassifierConfig {
            encoder: EncoderConfig {
                in_channels: spec.ms_bands,
                widths: self.teacher.resolve(),
                image_size: spec.image_size,
            },
            classes: spec.classes,
        }
    }

    pub fn student_config(&self, spec: &SyntheticSpec) -> ClassifierConfig {
        ClassifierConfig {
            encoder: EncoderConfig {
                in_channels: 3,
                widths: self.student.resolve(),
                image_size: spec.image_size,
            },
            classes: spec.classes,
        }
    }

    pub fn matcher_config(&self, spec: &SyntheticSpec) -> MatcherConfig {
        MatcherConfig {
            ms_channels: spec.ms_bands,
            image_size: spec.image_size,
            widths: self.matcher.widths.resolve(),
            embed_dim: self.matcher.embed_dim,
            init_logit_scale: self.matcher.init_logit_scale,
        }
    }

    pub fn bridge_config(&self) -> BridgeConfig {
        BridgeConfig {
            teacher_channels: *self.teacher.resolve().last().expect("validated"),
            student_channels: *self.student.resolve().last().expect("validated"),
            d_model: self.planner.d_model,
            heads: self.planner.heads,
        }
    }
}
