//! Run configuration: a TOML document with scheme / model / train / infer /
//! eval sections. Every key has a default, unknown keys are rejected, and
//! any key can be overridden on the command line with `--set path.key=value`.
//! The fully resolved document is echoed into each output directory and its
//! digest names the run.

use serde::{Deserialize, Serialize};
use superbloom_core::corpus::{MASK_NAME, PAD_NAME};
use superbloom_core::training::{LossMode, TrainConfig};
use superbloom_core::transformer::ModelConfig;
use superbloom_core::util::fingerprint_bytes;
use superbloom_core::{Error, HashScheme, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scheme: SchemeSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub infer: InferSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scheme: SchemeSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            infer: InferSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeSection {
    pub vocab_size: u32,
    pub m: usize,
    pub alpha: u32,
    pub specials: Vec<String>,
}

impl Default for SchemeSection {
    fn default() -> Self {
        SchemeSection {
            vocab_size: 10_000,
            m: 2,
            alpha: 20,
            specials: vec![MASK_NAME.into(), PAD_NAME.into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub n_heads: usize,
    /// 0 means d / n_heads.
    pub d_head: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub seq_len: usize,
    pub tie_embeddings: bool,
    pub use_positions: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 32,
            n_heads: 2,
            d_head: 0,
            d_ff: 64,
            layers: 2,
            seq_len: 16,
            tie_embeddings: true,
            use_positions: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub init_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub grad_clip: f64,
    pub mask_rate: f64,
    /// "full_softmax" or "sampled_softmax".
    pub loss_mode: String,
    pub num_negatives: usize,
    pub test_frac: f64,
    /// Held-out examples used for the recall metrics logged during training.
    pub eval_examples: usize,
    pub n_max: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 16,
            init_lr: 2e-4,
            warmup_steps: 1000,
            total_steps: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            eval_every: 1000,
            checkpoint_every: 0,
            grad_clip: 1.0,
            mask_rate: 0.15,
            loss_mode: "full_softmax".into(),
            num_negatives: 8192,
            test_frac: 0.1,
            eval_examples: 200,
            n_max: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub beam: usize,
    pub iters: usize,
    pub k: usize,
    pub score_fn: String,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            beam: 20,
            iters: 1,
            k: 20,
            score_fn: "log_sum".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub beam: usize,
    pub iters: usize,
    pub ks: Vec<usize>,
    pub examples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            beam: 20,
            iters: 1,
            ks: vec![1, 10, 20],
            examples: 500,
        }
    }
}

impl RunConfig {
    /// Loads a config file (or the defaults when `path` is `None`) and
    /// applies `--set section.key=value` overrides before validation.
    pub fn load(path: Option<&std::path::Path>, sets: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::InvalidArgument(format!("config parse error: {e}")))?;
        for set in sets {
            apply_set(&mut table, set)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::InvalidArgument(format!("config error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        superbloom_core::inference::ScoreFunction::parse(&self.infer.score_fn)?;
        match self.train.loss_mode.as_str() {
            "full_softmax" | "sampled_softmax" => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown loss_mode {other:?}"
                )))
            }
        }
        if !(0.0..1.0).contains(&self.train.test_frac) {
            return Err(Error::InvalidArgument("test_frac must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Canonical serialized form; what gets echoed and fingerprinted.
    pub fn render(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_bytes(self.render().as_bytes())
    }

    pub fn model_config(&self, scheme: &HashScheme) -> Result<ModelConfig> {
        let d_head = if self.model.d_head == 0 {
            self.model.d / self.model.n_heads.max(1)
        } else {
            self.model.d_head
        };
        let config = ModelConfig {
            d_model: self.model.d,
            n_heads: self.model.n_heads,
            d_head,
            d_ff: self.model.d_ff,
            layers: self.model.layers,
            num_hashes: scheme.num_hashes(),
            hash_size: scheme.hash_size() as usize,
            n_specials: scheme.specials().len(),
            seq_len: self.model.seq_len,
            tie_embeddings: self.model.tie_embeddings,
            use_positions: self.model.use_positions,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let loss_mode = match self.train.loss_mode.as_str() {
            "sampled_softmax" => LossMode::SampledSoftmax {
                num_negatives: self.train.num_negatives,
            },
            _ => LossMode::FullSoftmax,
        };
        let cfg = TrainConfig {
            batch_size: self.train.batch_size,
            init_lr: self.train.init_lr,
            warmup_steps: self.train.warmup_steps,
            total_steps: self.train.total_steps,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            epsilon: self.train.epsilon,
            seed: self.seed,
            eval_every: self.train.eval_every,
            checkpoint_every: self.train.checkpoint_every,
            grad_clip: self.train.grad_clip,
            mask_rate: self.train.mask_rate,
            loss_mode,
            eval_beam: self.eval.beam,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Applies one `section.key=value` override to the raw TOML table.
fn apply_set(table: &mut toml::Table, set: &str) -> Result<()> {
    let (path, raw_value) = set.split_once('=').ok_or_else(|| {
        Error::InvalidArgument(format!("--set expects section.key=value, got {set:?}"))
    })?;
    let value: toml::Value = raw_value
        .parse()
        .or_else(|_| format!("\"{raw_value}\"").parse())
        .map_err(|e| Error::InvalidArgument(format!("bad value in --set {set:?}: {e}")))?;
    let mut segments: Vec<&str> = path.split('.').collect();
    let last = segments.pop().unwrap();
    let mut current = table;
    for seg in segments {
        current = current
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::InvalidArgument(format!("--set path {path:?} crosses a non-table key"))
            })?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}
