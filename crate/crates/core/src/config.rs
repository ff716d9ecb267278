//! Run configuration: one JSON document covering data, model, schedule and
//! both training stages. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataio::{PromptTemplate, SynthParams};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::eval::AblationAxis;
use crate::models::ModelConfig;
use crate::training::LrSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Labeled shots per class.
    pub shots: usize,
    /// Unlabeled pretraining pool size.
    pub pool: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { shots: 2, pool: 700 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { ratio: 0.7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Drop a trailing partial batch.
    pub drop_last: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-4,
            weight_decay: 1e-5,
            schedule: LrSchedule::Cosine,
            drop_last: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Upper bound on classes per step.
    pub batch_cap: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Optimizer steps per epoch; `0` means one per shot.
    pub steps_per_epoch: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_cap: 64,
            lr: 1e-4,
            weight_decay: 1e-5,
            schedule: LrSchedule::Step,
            steps_per_epoch: 0,
        }
    }
}

/// Ablation switches. All on is the full method.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    /// Text branch; off trains a linear classifier on image embeddings.
    pub text: bool,
    /// Gaussian noising of visible tokens during pretraining.
    pub diffusion: bool,
    /// Token masking during pretraining.
    pub mask: bool,
    /// Stage-1 pretraining; off starts fine-tuning from random weights.
    pub unsupervised: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            text: true,
            diffusion: true,
            mask: true,
            unsupervised: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Average the two modality embeddings before normalising instead of
    /// aligning each modality separately.
    pub fusion: bool,
    /// Restrict the reconstruction loss to masked positions.
    pub masked_only: bool,
}

/// Process settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeConfig {
    /// Worker threads; `0` uses every logical core.
    pub threads: usize,
    /// Force a single worker thread.
    pub deterministic: bool,
    /// One of error, warn, info, debug, trace.
    pub log_level: String,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            threads: 0,
            deterministic: false,
            log_level: "info".into(),
        }
    }
}

impl RuntimeConfig {
    pub fn effective_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads
        }
    }
}

/// File locations used by the command-line front end.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Dataset directory; a scene is synthesized from `synth` when unset.
    pub data: Option<PathBuf>,
    /// Input checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Primary output file or directory.
    pub out: Option<PathBuf>,
    /// Training log (JSON lines); standard output when unset.
    pub records: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// pool_size, components, prompts, mask_ratio or patch_size.
    pub axis: String,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            axis: "components".into(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthParams,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub mask: MaskConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub prompt: PromptTemplate,
    pub components: Components,
    pub loss: LossConfig,
    /// Inference batch size for evaluation.
    pub eval_batch: usize,
    pub ablation: AblationConfig,
    pub runtime: RuntimeConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthParams::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            mask: MaskConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            prompt: PromptTemplate::P1,
            components: Components::default(),
            loss: LossConfig::default(),
            eval_batch: 128,
            ablation: AblationConfig::default(),
            runtime: RuntimeConfig::default(),
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.diffusion.schedule().map_err(|e| Error::Config(format!("diffusion: {e}")))?;
        if !(0.0..1.0).contains(&self.mask.ratio) {
            return Err(Error::Config(format!("mask.ratio must lie in [0, 1), got {}", self.mask.ratio)));
        }
        self.ablation.axis.parse::<AblationAxis>().map_err(|e| Error::Config(format!("ablation.axis: {e}")))?;
        if self.ablation.seeds.is_empty() {
            return Err(Error::Config("ablation.seeds must not be empty".into()));
        }
        if !["error", "warn", "info", "debug", "trace"].contains(&self.runtime.log_level.as_str()) {
            return Err(Error::Config(format!("unknown runtime.log_level `{}`", self.runtime.log_level)));
        }
        if self.split.shots == 0 || self.split.pool == 0 {
            return Err(Error::Config("split.shots and split.pool must be positive".into()));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_cap == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for (k, v) in [
            ("pretrain.lr", self.pretrain.lr),
            ("finetune.lr", self.finetune.lr),
            ("pretrain.weight_decay", self.pretrain.weight_decay),
            ("finetune.weight_decay", self.finetune.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be a finite nonnegative number")));
            }
        }
        Ok(())
    }

    /// Applies `key=value`, where `key` is a dotted path such as
    /// `diffusion.T` and `value` is JSON (bare words are taken as strings).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        if node.is_object() {
            return Err(Error::Config(format!("`{key}` is a section, not a value")));
        }
        *node = value;
        let next: Self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Every settable dotted key with its default value.
    pub fn keys() -> Vec<(String, String)> {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
            match v {
                Value::Object(o) => {
                    for (k, child) in o {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                other => out.push((prefix.to_string(), other.to_string())),
            }
        }
        let mut out = Vec::new();
        walk("", &serde_json::to_value(Self::default()).expect("config serializes"), &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mask": {"ratio": 0.5, "x": 1}}"#).is_err());
        let mut c = RunConfig::default();
        assert!(c.set("mask.rate=0.5").is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut c = RunConfig::default();
        c.set("diffusion.T=10").unwrap();
        c.set("mask.ratio=0.5").unwrap();
        c.set("prompt=p4").unwrap();
        c.set("diffusion.beta_direction=decreasing").unwrap();
        assert_eq!(c.diffusion.steps, 10);
        assert_eq!(c.mask.ratio, 0.5);
        assert_eq!(c.prompt, PromptTemplate::P4);
        assert!(c.set("mask.ratio=1.5").is_err());
        assert_eq!(c.mask.ratio, 0.5);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_json(r#"{"diffusion": {"T": 7}}"#).unwrap();
        assert_eq!(c.diffusion.steps, 7);
        assert_eq!(c.diffusion.beta_end, 0.02);
    }

    #[test]
    fn key_listing_covers_sections() {
        let keys: Vec<String> = RunConfig::keys().into_iter().map(|(k, _)| k).collect();
        for k in ["diffusion.T", "diffusion.beta_start", "diffusion.beta_end", "diffusion.beta_direction", "mask.ratio", "components.text"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }
}
