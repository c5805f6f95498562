//! The single JSON run document shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::{DrawMode, Unscheduled, DEFAULT_THETA};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::{LogBase, LossWeights, RegressionKind};
use crate::synth::{default_registry, eval_registry, CropConfig, DatasetSpec};
use crate::train::optim::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub lr: f64,
    pub adamw: AdamWConfig,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch: 32, epochs: 30, pairs_per_epoch: 2000, lr: 4e-5, adamw: AdamWConfig::default(), checkpoint_every: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [("batch", self.batch), ("epochs", self.epochs), ("pairs_per_epoch", self.pairs_per_epoch)] {
            if v == 0 {
                return Err(Error::config(format!("{path}.{name}"), "must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{path}.lr"), format!("must be positive, got {}", self.lr)));
        }
        self.adamw.validate(&format!("{path}.adamw"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub kind: RegressionKind,
    pub log_base: LogBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub theta: f64,
    pub cap_at_one: bool,
    pub mode: DrawMode,
    /// Ratios used when the scheduler is disabled.
    pub unscheduled: Unscheduled,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { theta: DEFAULT_THETA, cap_at_one: false, mode: DrawMode::Replacement, unscheduled: Unscheduled::Pooled }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// JSON array of dataset specs; the built-in registry when absent.
    pub registry: Option<PathBuf>,
    pub seed: u64,
    /// Sequences cap per dataset for `gen-data` (all when absent).
    pub export_sequences: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { registry: None, seed: 2024, export_sequences: Some(4) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    /// Held-out sequences per domain.
    pub sequences: usize,
    pub length: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 77, sequences: 12, length: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Curriculum sampling; `sampler.unscheduled` ratios when off.
    pub use_ss: bool,
    /// Loss scheduler; `γ = 0` when off.
    pub use_ls: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { use_ss: true, use_ls: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub crop: CropConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablation: AblationFlags,
    pub out: Option<PathBuf>,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            crop: CropConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationFlags::default(),
            out: None,
            threads: 1,
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON document. Errors carry the JSON path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "$".to_string() } else { format!("$.{path}") }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate("$.model")?;
        self.train.validate("$.train")?;
        self.loss.weights.validate("$.loss.weights")?;
        if !(self.sampler.theta > 0.0 && self.sampler.theta.is_finite()) {
            return Err(Error::config("$.sampler.theta", format!("must be positive, got {}", self.sampler.theta)));
        }
        self.crop.validate("$.crop")?;
        let pc = self.model.patch;
        if self.crop.template_size != pc.template_h || self.crop.template_size != pc.template_w {
            return Err(Error::config(
                "$.crop.template_size",
                format!("{} does not match the model template extent {}x{}", self.crop.template_size, pc.template_h, pc.template_w),
            ));
        }
        if self.crop.search_size != pc.search_h || self.crop.search_size != pc.search_w {
            return Err(Error::config(
                "$.crop.search_size",
                format!("{} does not match the model search extent {}x{}", self.crop.search_size, pc.search_h, pc.search_w),
            ));
        }
        if self.eval.sequences == 0 || self.eval.length < 2 {
            return Err(Error::config("$.eval", "need at least one sequence of two frames per domain"));
        }
        if self.threads == 0 {
            return Err(Error::config("$.threads", "must be at least 1"));
        }
        Ok(())
    }

    /// Pretty, fully defaulted form; what the run manifest stores.
    pub fn normalized_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over a git-style blob header plus the normalized document.
    /// The output directory and thread count do not change results, so they
    /// are left out.
    pub fn content_hash(&self) -> String {
        let body = RunConfig { out: None, threads: 1, ..self.clone() }.normalized_json();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Training datasets: the registry file if given, else the built-in one.
    pub fn training_datasets(&self) -> Result<Vec<DatasetSpec>> {
        let specs = match &self.data.registry {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize::<_, Vec<DatasetSpec>>(de)
                    .map_err(|e| Error::config(format!("{}: $.{}", path.display(), e.path()), e.into_inner().to_string()))?
            }
            None => default_registry(self.data.seed),
        };
        for (i, s) in specs.iter().enumerate() {
            s.validate(&format!("$.data.registry[{i}]"))?;
        }
        Ok(specs)
    }

    pub fn eval_datasets(&self) -> Vec<DatasetSpec> {
        eval_registry(self.eval.seed, self.eval.sequences, self.eval.length)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omitted_fields_take_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.sampler.theta, 150.0);
        let w = cfg.loss.weights;
        assert_eq!((w.lambda_iou, w.lambda_l1, w.gamma), (2.0, 5.0, 1e-5));
    }

    #[test]
    fn errors_carry_paths() {
        let err = RunConfig::from_json(r#"{"model": {"patch": {"patch": -8}}}"#).unwrap_err();
        assert!(err.to_string().contains("$.model.patch.patch"), "{err}");
        let err = RunConfig::from_json(r#"{"train": {"bogus": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("$.train"), "{err}");
        let err = RunConfig::from_json(r#"{"sampler": {"theta": 0}}"#).unwrap_err();
        assert!(err.to_string().contains("$.sampler.theta"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.content_hash(), RunConfig::from_json(&a.normalized_json()).unwrap().content_hash());
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
