//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::data::{SplitFractions, SyntheticSpec};
use crate::distillation::{DistillLossConfig, RefinementConfig};
use crate::error::{KoalaError, Result};
use crate::federation::{FederationConfig, Mode};
/// Which experiment a config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentMode {
    Homo,
    Hete,
    Baseline,
    /// One locally trained small teacher, reverse distillation only.
    Motivation,
}

impl ExperimentMode {
    pub fn federation_mode(self) -> Mode {
        match self {
            Self::Homo | Self::Motivation => Mode::Homo,
            Self::Hete => Mode::Hete,
            Self::Baseline => Mode::Baseline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// CSV file; required when `source = "csv"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "defaults::per_class")]
    pub per_class: usize,
    #[serde(default = "defaults::cluster_spread")]
    pub cluster_spread: f64,
    #[serde(default = "defaults::dirichlet_alpha")]
    pub dirichlet_alpha: f64,
    #[serde(default = "defaults::proxy_fraction")]
    pub proxy_fraction: f64,
    #[serde(default = "defaults::pretrain_fraction")]
    pub pretrain_fraction: f64,
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    #[serde(default = "defaults::large_hidden")]
    pub large_hidden: Vec<usize>,
    #[serde(default = "defaults::homo_hidden")]
    pub homo_hidden: Vec<usize>,
    /// Hidden widths of the heterogeneous family; client `i` gets entry `i % len`.
    #[serde(default = "defaults::hete_widths")]
    pub hete_widths: Vec<usize>,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            large_hidden: defaults::large_hidden(),
            homo_hidden: defaults::homo_hidden(),
            hete_widths: defaults::hete_widths(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::batch_size")]
    pub distill_batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub local_lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub local_weight_decay: f64,
    #[serde(default = "defaults::lr")]
    pub reverse_lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub reverse_weight_decay: f64,
    #[serde(default = "defaults::forward_lr")]
    pub forward_lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub forward_weight_decay: f64,
    /// Epochs of supervised warm-up for the large model before its backbone is frozen.
    #[serde(default = "defaults::pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "defaults::lr")]
    pub pretrain_lr: f64,
    #[serde(default = "defaults::enabled")]
    pub forward_distillation: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            local_epochs: defaults::local_epochs(),
            batch_size: defaults::batch_size(),
            distill_batch_size: defaults::batch_size(),
            local_lr: defaults::lr(),
            local_weight_decay: defaults::weight_decay(),
            reverse_lr: defaults::lr(),
            reverse_weight_decay: defaults::weight_decay(),
            forward_lr: defaults::forward_lr(),
            forward_weight_decay: defaults::weight_decay(),
            pretrain_epochs: defaults::pretrain_epochs(),
            pretrain_lr: defaults::lr(),
            forward_distillation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillationConfig {
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default = "defaults::target_mean")]
    pub target_mean: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            temperature: defaults::temperature(),
            target_mean: defaults::target_mean(),
            lambda: defaults::lambda(),
        }
    }
}

/// Full experiment description. Only `mode` and `[data]` are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default = "defaults::participation")]
    pub participation: f64,
    #[serde(default = "defaults::trials")]
    pub trials: usize,
    #[serde(default = "defaults::parallel_clients")]
    pub parallel_clients: usize,
    /// Clients removed from every active set.
    #[serde(default)]
    pub dropped_clients: Vec<usize>,
    /// Write wall-clock round times into the metrics (makes reruns differ).
    #[serde(default)]
    pub record_elapsed: bool,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub distillation: DistillationConfig,
}

mod defaults {
    use std::path::PathBuf;

    use crate::models::zoo;

    pub fn classes() -> usize {
        4
    }
    pub fn feature_dim() -> usize {
        64
    }
    pub fn per_class() -> usize {
        500
    }
    pub fn cluster_spread() -> f64 {
        4.0
    }
    pub fn dirichlet_alpha() -> f64 {
        1.0
    }
    pub fn proxy_fraction() -> f64 {
        0.1
    }
    pub fn pretrain_fraction() -> f64 {
        0.1
    }
    pub fn test_fraction() -> f64 {
        0.2
    }
    pub fn large_hidden() -> Vec<usize> {
        zoo::LARGE_HIDDEN.to_vec()
    }
    pub fn homo_hidden() -> Vec<usize> {
        zoo::HOMO_HIDDEN.to_vec()
    }
    pub fn hete_widths() -> Vec<usize> {
        zoo::HETE_HIDDEN.to_vec()
    }
    pub fn local_epochs() -> usize {
        1
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn forward_lr() -> f64 {
        1e-4
    }
    pub fn weight_decay() -> f64 {
        1e-6
    }
    pub fn pretrain_epochs() -> usize {
        5
    }
    pub fn enabled() -> bool {
        true
    }
    pub fn temperature() -> f64 {
        7.0
    }
    pub fn target_mean() -> f64 {
        2.0
    }
    pub fn lambda() -> f64 {
        0.1
    }
    pub fn rounds() -> usize {
        50
    }
    pub fn clients() -> usize {
        5
    }
    pub fn participation() -> f64 {
        1.0
    }
    pub fn trials() -> usize {
        3
    }
    pub fn parallel_clients() -> usize {
        1
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs")
    }
}

fn invalid(key: &str, message: impl Into<String>) -> KoalaError {
    KoalaError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(key: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be a positive finite number, got {value}")))
    }
}

fn non_negative(key: &str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be a non-negative finite number, got {value}")))
    }
}

fn nonzero(key: &str, value: usize) -> Result<()> {
    if value == 0 {
        Err(invalid(key, "must be at least 1"))
    } else {
        Ok(())
    }
}

/// Extracts the offending key from a TOML deserialization error.
fn toml_error(source: &str, err: toml::de::Error) -> KoalaError {
    let message = err.message().to_string();
    let key = message
        .split('`')
        .nth(1)
        .filter(|_| message.contains("field"))
        .map(str::to_string)
        .or_else(|| {
            err.span()
                .and_then(|span| source.get(span))
                .map(|s| s.split('=').next().unwrap_or(s).trim().to_string())
        })
        .unwrap_or_default();
    KoalaError::Config { key, message }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| toml_error(text, e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid("", e.to_string()))
    }

    /// Re-checks every constraint the downstream modules impose.
    pub fn validate(&self) -> Result<()> {
        let t = self.distillation.temperature;
        if !(t.is_finite() && t > 0.0) {
            return Err(KoalaError::InvalidTemperature {
                op: "distillation.temperature",
                value: t,
            });
        }
        positive("distillation.target_mean", self.distillation.target_mean)?;
        non_negative("distillation.lambda", self.distillation.lambda)?;
        nonzero("clients", self.clients)?;
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(invalid("participation", format!("must be in (0, 1], got {}", self.participation)));
        }
        nonzero("trials", self.trials)?;
        nonzero("parallel_clients", self.parallel_clients)?;
        if let Some(&c) = self.dropped_clients.iter().find(|&&c| c >= self.clients) {
            return Err(invalid("dropped_clients", format!("client {c} does not exist")));
        }
        if self.mode == ExperimentMode::Motivation && self.clients != 1 {
            return Err(invalid("clients", "motivation mode uses exactly one client"));
        }

        let d = &self.data;
        match d.source {
            DataSource::Csv if d.path.is_none() => {
                return Err(invalid("data.path", "required when data.source = \"csv\""))
            }
            DataSource::Synthetic => {
                nonzero("data.classes", d.classes)?;
                if d.classes < 2 {
                    return Err(invalid("data.classes", "need at least 2 classes"));
                }
                nonzero("data.feature_dim", d.feature_dim)?;
                nonzero("data.per_class", d.per_class)?;
                non_negative("data.cluster_spread", d.cluster_spread)?;
            }
            DataSource::Csv => {}
        }
        positive("data.dirichlet_alpha", d.dirichlet_alpha)?;
        self.split_fractions()
            .validate()
            .map_err(|e| invalid("data", e.to_string()))?;

        let m = &self.models;
        for (key, widths) in [
            ("models.large_hidden", &m.large_hidden),
            ("models.homo_hidden", &m.homo_hidden),
        ] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(invalid(key, "needs at least one non-zero hidden width"));
            }
        }
        if m.hete_widths.is_empty() || m.hete_widths.contains(&0) {
            return Err(invalid("models.hete_widths", "needs at least one non-zero width"));
        }

        let tr = &self.training;
        nonzero("training.batch_size", tr.batch_size)?;
        nonzero("training.distill_batch_size", tr.distill_batch_size)?;
        for (key, v) in [
            ("training.local_lr", tr.local_lr),
            ("training.reverse_lr", tr.reverse_lr),
            ("training.forward_lr", tr.forward_lr),
            ("training.pretrain_lr", tr.pretrain_lr),
        ] {
            positive(key, v)?;
        }
        for (key, v) in [
            ("training.local_weight_decay", tr.local_weight_decay),
            ("training.reverse_weight_decay", tr.reverse_weight_decay),
            ("training.forward_weight_decay", tr.forward_weight_decay),
        ] {
            non_negative(key, v)?;
        }
        Ok(())
    }

    pub fn split_fractions(&self) -> SplitFractions {
        SplitFractions {
            proxy: self.data.proxy_fraction,
            pretrain: self.data.pretrain_fraction,
            test: self.data.test_fraction,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.data.classes,
            feature_dim: self.data.feature_dim,
            per_class: self.data.per_class,
            cluster_spread: self.data.cluster_spread,
            seed: self.seed,
        }
    }

    /// Protocol parameters for one trial seeded with `seed`.
    pub fn federation(&self, seed: u64) -> FederationConfig {
        let tr = &self.training;
        FederationConfig {
            mode: self.mode.federation_mode(),
            participation: self.participation,
            local_epochs: tr.local_epochs,
            batch_size: tr.batch_size,
            local: AdamConfig::new(tr.local_lr, tr.local_weight_decay),
            reverse: AdamConfig::new(tr.reverse_lr, tr.reverse_weight_decay),
            forward: AdamConfig::new(tr.forward_lr, tr.forward_weight_decay),
            refinement: RefinementConfig {
                target_mean: self.distillation.target_mean,
                temperature: self.distillation.temperature,
            },
            loss: DistillLossConfig {
                lambda: self.distillation.lambda,
            },
            distill_batch_size: tr.distill_batch_size,
            forward_distillation: tr.forward_distillation && self.mode != ExperimentMode::Motivation,
            dropped_clients: self.dropped_clients.clone(),
            parallel_clients: self.parallel_clients,
            seed,
        }
    }

    /// A config for `mode` with every optional field at its default.
    pub fn with_defaults(mode: ExperimentMode) -> Self {
        let mut config = Self::from_toml_str("mode = \"homo\"\n[data]\nsource = \"synthetic\"\n")
            .expect("built-in defaults are valid");
        config.mode = mode;
        if mode == ExperimentMode::Motivation {
            config.clients = 1;
        }
        config
    }
}
