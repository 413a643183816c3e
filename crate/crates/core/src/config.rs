//! The single JSON document that drives a run.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PhaError, Result};
use crate::model::Ablations;
use crate::optim::AdamWConfig;
use crate::pha::PhaConfig;
use crate::tasks::{held_out_cipher, reference_suite, Family, TaskSpec, MAX_LEN, VOCAB_SIZE};
use crate::train::{FewShotConfig, PretrainConfig, TrainConfig, TrainableSet};
use crate::transformer::ModelConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_examples: usize,
    pub eval_examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub pha: PhaConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub few_shot: FewShotConfig,
    pub data: DataConfig,
    /// Registered tasks, one prototype each.
    pub tasks: Vec<TaskSpec>,
    /// Tasks only seen through few-shot adaptation.
    #[serde(default)]
    pub held_out: Vec<TaskSpec>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PhaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PhaError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(PhaError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.pha.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.model.vocab_size != VOCAB_SIZE {
            return Err(PhaError::Config(format!(
                "model.vocab_size must be {VOCAB_SIZE} for the character vocabulary"
            )));
        }
        if self.model.max_len > MAX_LEN || self.model.max_len < 2 * self.pretrain.max_chars + 2 {
            return Err(PhaError::Config(format!(
                "model.max_len must lie in [{}, {MAX_LEN}]",
                2 * self.pretrain.max_chars + 2
            )));
        }
        if self.tasks.len() < 2 {
            return Err(PhaError::Config("tasks: at least two registered tasks are required".into()));
        }
        let mut names = HashSet::new();
        for t in self.tasks.iter().chain(&self.held_out) {
            t.validate()?;
            if !names.insert(t.name.as_str()) {
                return Err(PhaError::Config(format!("tasks: duplicate name {:?}", t.name)));
            }
            let longest = match t.family {
                Family::PairCompare => 2 * t.max_len + 3,
                _ => t.max_len + 2,
            };
            if longest > self.model.max_len {
                return Err(PhaError::Config(format!(
                    "tasks: {:?} produces sequences longer than model.max_len",
                    t.name
                )));
            }
        }
        if self.data.train_examples == 0 || self.data.eval_examples == 0 {
            return Err(PhaError::Config("data: example counts must be >= 1".into()));
        }
        if self.few_shot.steps == 0 || !(self.few_shot.peak_lr > 0.0) || self.few_shot.test_examples == 0 {
            return Err(PhaError::Config("few_shot: steps, peak_lr and test_examples must be positive".into()));
        }
        Ok(())
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }

    pub fn find_task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().chain(&self.held_out).find(|t| t.name == name)
    }

    /// Desk-scale configuration: six registered tasks plus a held-out
    /// shift cipher.
    pub fn reference() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig {
                d_model: 64,
                enc_layers: 2,
                dec_layers: 2,
                heads: 2,
                d_ff: 128,
                bottleneck: 8,
                vocab_size: VOCAB_SIZE,
                max_len: 20,
                ln_eps: 1e-5,
            },
            pha: PhaConfig {
                retrieval_dim: 16,
                hyper_dim: 8,
                temperature: 1.0,
                prototype_std: 0.02,
            },
            pretrain: PretrainConfig {
                max_steps: 4000,
                warmup_steps: 200,
                peak_lr: 3e-3,
                batch_size: 32,
                eval_every: 250,
                eval_examples: 200,
                max_chars: 8,
                target_accuracy: 0.95,
                seed: 7,
            },
            train: TrainConfig {
                total_steps: 3000,
                warmup_steps: 100,
                peak_lr: 3e-3,
                lambda: 0.1,
                batch_size: 32,
                seed: 0,
                eval_every: 500,
                eval_examples: 100,
                ablations: Ablations::default(),
                adamw: AdamWConfig::default(),
                max_grad_norm: Some(1.0),
            },
            few_shot: FewShotConfig {
                steps: 100,
                peak_lr: 1e-2,
                trainable: TrainableSet::Key,
                test_examples: 200,
            },
            data: DataConfig {
                train_examples: 1000,
                eval_examples: 200,
            },
            tasks: reference_suite(),
            held_out: vec![held_out_cipher()],
        }
    }

    /// Small enough for gradient checks and smoke runs.
    pub fn tiny() -> Self {
        let mut c = Self::reference();
        c.model = ModelConfig {
            d_model: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            d_ff: 32,
            bottleneck: 4,
            vocab_size: VOCAB_SIZE,
            max_len: 20,
            ln_eps: 1e-5,
        };
        c.pha.retrieval_dim = 8;
        c.pha.hyper_dim = 4;
        c.pretrain.max_steps = 1000;
        c.pretrain.warmup_steps = 50;
        c.pretrain.peak_lr = 1e-2;
        c.train.total_steps = 20;
        c.train.warmup_steps = 2;
        c.train.eval_every = 10;
        c.train.eval_examples = 16;
        c.train.batch_size = 16;
        c.few_shot.steps = 5;
        c.few_shot.test_examples = 16;
        c.data = DataConfig {
            train_examples: 64,
            eval_examples: 16,
        };
        c
    }
}
