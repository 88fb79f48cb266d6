use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::imaging::AugmentationPolicy;
use crate::objectives::{LossWeights, RotationMode};

pub const CONFIG_VERSION: u32 = 1;

/// Deserializes a config value, naming the offending key on failure.
pub fn from_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Error::Config(e.inner().to_string())
        } else {
            Error::Config(format!("{path}: {}", e.inner()))
        }
    })
}

/// Applies `key.path=value` overrides to a serializable config. Values
/// parse as JSON, falling back to a plain string.
pub fn with_overrides<T, S>(cfg: &T, overrides: &[S]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    S: AsRef<str>,
{
    let mut value = serde_json::to_value(cfg).expect("config serializes");
    for o in overrides {
        let o = o.as_ref();
        let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut value;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        }
        *slot = parsed;
    }
    from_value(value)
}

/// Parameters of `gen-data`: one source and one target dataset, each with
/// a train and a test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub version: u32,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: None,
            output_dir: PathBuf::from("data"),
            source_train: 500,
            source_test: 200,
            target_train: 500,
            target_test: 200,
        }
    }
}

/// Where PropRot takes its proposal boxes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationProposals {
    /// proposed on the rotated image itself
    #[default]
    Rotated,
    /// proposed on the unrotated image, boxes rotated along with it
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9 }
    }
}

/// Everything a training run depends on. Serialized verbatim as the
/// resolved-config snapshot next to the run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub version: u32,
    pub source_train: PathBuf,
    pub target_train: PathBuf,
    pub target_test: PathBuf,
    pub weights: LossWeights,
    pub enable_uda: bool,
    pub enable_rp: bool,
    pub enable_cl: bool,
    pub rotation_mode: RotationMode,
    pub rotation_proposals: RotationProposals,
    pub top_k: usize,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    /// 0 disables periodic evaluation
    pub eval_interval: usize,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub augmentation: AugmentationPolicy,
    /// gradient-reversal strength
    pub grl_beta: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            source_train: PathBuf::from("data/source/train.json"),
            target_train: PathBuf::from("data/target/train.json"),
            target_test: PathBuf::from("data/target/test.json"),
            weights: LossWeights::default(),
            enable_uda: true,
            enable_rp: true,
            enable_cl: true,
            rotation_mode: RotationMode::PropRot,
            rotation_proposals: RotationProposals::Rotated,
            top_k: 32,
            optimizer: OptimizerConfig::default(),
            steps: 3000,
            eval_interval: 200,
            seed: None,
            output_dir: PathBuf::from("runs/default"),
            augmentation: AugmentationPolicy::default(),
            grl_beta: 1.0,
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

impl TrainConfig {
    /// Parses JSON, naming the offending key on schema violations.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides, then validates.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let cfg = with_overrides(self, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: expected {CONFIG_VERSION}, found {}",
                self.version
            )));
        }
        self.weights.validate()?;
        if self.top_k == 0 {
            return Err(Error::Config("top_k: must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config("optimizer.lr: must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config("optimizer.momentum: must lie in [0, 1)".into()));
        }
        if !(self.grl_beta >= 0.0 && self.grl_beta.is_finite()) {
            return Err(Error::Config("grl_beta: must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config("score_threshold: must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("nms_iou: must lie in [0, 1]".into()));
        }
        if self.augmentation.op_count > 0 && self.augmentation.pool.is_empty() {
            return Err(Error::Config("augmentation.pool: empty pool with nonzero op_count".into()));
        }
        Ok(())
    }

    pub fn uda_active(&self) -> bool {
        self.enable_uda && self.weights.alpha > 0.0
    }

    pub fn rp_active(&self) -> bool {
        self.enable_rp && self.weights.lambda1 > 0.0
    }

    pub fn cl_active(&self) -> bool {
        self.enable_cl && self.weights.lambda2 > 0.0
    }

    /// Whether any term reads target images. Zero-weighted terms are
    /// skipped outright; they could only ever add exact zeros.
    pub fn needs_target(&self) -> bool {
        self.uda_active() || self.rp_active() || self.cl_active()
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("seed: required (pass --seed)".into()))
    }
}
