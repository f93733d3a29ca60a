//! Whole-experiment configuration from a single JSON file.
//!
//! Every field at every level has a default, so `{}` is a complete config
//! and a partial file only overrides what it names. The hash that artifacts
//! embed is computed over the canonical re-serialization of the parsed
//! struct, so whitespace and key order in the source file never change it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flops::FlopsDims;
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::training::{RunSettings, Stage, StageConfig, Strategy};

/// Optimizer and schedule settings for one training stage.
///
/// One struct serves both stages; the fields whose sensible value depends on
/// the stage are optional and resolve in `to_stage_config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSettings {
    /// None: 1 epoch for the first stage, 3 for the second
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// None: stage default (the first stage freezes the decoder)
    pub frozen_prefixes: Option<Vec<String>>,
    /// None: keep the per-task weights from the model section
    pub alphas: Option<Vec<f64>>,
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings {
            epochs: None,
            batch_size: 16,
            base_lr: 0.01,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            frozen_prefixes: None,
            alphas: None,
        }
    }
}

impl StageSettings {
    /// The runner derives the real stage seed from the run seed, so the seed
    /// written here is a placeholder.
    pub fn to_stage_config(&self, stage: Stage, strategy: Strategy) -> StageConfig {
        StageConfig {
            stage,
            epochs: self.epochs.unwrap_or(match stage {
                Stage::Pt => 1,
                Stage::Sft => 3,
            }),
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            warmup_ratio: self.warmup_ratio,
            weight_decay: self.weight_decay,
            frozen_prefixes: self.frozen_prefixes.clone(),
            alphas: self.alphas.clone(),
            strategy,
            seed: 0,
        }
    }
}

/// Inputs for the forward-cost estimate: decoder dimensions plus the token
/// layout whose lengths drive the quadratic attention term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSettings {
    pub dims: FlopsDims,
    pub vision_tokens: u64,
    pub text_len: u64,
    /// groups contributing query tokens at each sweep point
    pub task_count: u64,
    /// per-task query counts to tabulate; 0 is the query-free baseline
    pub queries: Vec<u64>,
}

impl Default for FlopsSettings {
    fn default() -> Self {
        FlopsSettings {
            dims: FlopsDims::default(),
            vision_tokens: 576,
            text_len: 8,
            task_count: 4,
            queries: vec![0, 1, 4, 8, 16],
        }
    }
}

impl FlopsSettings {
    pub fn seq_len(&self, queries_per_task: u64) -> u64 {
        self.vision_tokens + self.task_count * queries_per_task + self.text_len
    }
}

/// Hand-written layout for the mask dump, replacing the model-derived one.
/// Lets the dump show degenerate layouts (single-patch vision, one-token
/// text) that the image pipeline itself would never produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskProbe {
    pub vision_len: usize,
    pub groups: Vec<usize>,
    pub text_len: usize,
}

/// One experiment, in full: model, strategy, both stages, data sizes, seeds,
/// sweep axes, and the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub strategy: Strategy,
    pub pt: StageSettings,
    pub sft: StageSettings,
    pub train_count: usize,
    pub eval_count: usize,
    /// teacher whose labels supervise the dataset
    pub task_link: String,
    /// seed for the single-run subcommands
    pub seed: u64,
    /// seeds for sweep cells
    pub seeds: Vec<u64>,
    /// per-task query counts visited by the query sweep
    pub queries_sweep: Vec<usize>,
    pub out_dir: String,
    pub flops: FlopsSettings,
    pub mask_probe: Option<MaskProbe>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            strategy: Strategy::QueryDis,
            pt: StageSettings::default(),
            sft: StageSettings::default(),
            train_count: 2000,
            eval_count: 500,
            task_link: "quad".into(),
            seed: 1,
            seeds: vec![1, 2, 3, 4, 5],
            queries_sweep: vec![1, 4, 8, 16],
            out_dir: "out".into(),
            flops: FlopsSettings::default(),
            mask_probe: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train_count == 0 || self.eval_count == 0 {
            return Err(Error::Config("train_count and eval_count must be positive".into()));
        }
        if !self
            .model
            .teacher_specs()
            .iter()
            .any(|s| s.name == self.task_link)
        {
            return Err(Error::UnknownTask(self.task_link.clone()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.queries_sweep.is_empty() {
            return Err(Error::Config("queries_sweep must not be empty".into()));
        }
        self.pt.to_stage_config(Stage::Pt, self.strategy).validate()?;
        self.sft.to_stage_config(Stage::Sft, self.strategy).validate()?;
        crate::training::plan_for(&self.model, self.strategy)?;
        Ok(())
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            model: self.model.clone(),
            pt: self.pt.to_stage_config(Stage::Pt, self.strategy),
            sft: self.sft.to_stage_config(Stage::Sft, self.strategy),
            train_count: self.train_count,
            eval_count: self.eval_count,
            task_link: self.task_link.clone(),
        }
    }
}

/// Hex digest of the canonical serialization, embedded in every artifact so
/// outputs trace back to the exact configuration that produced them.
pub fn config_hash(cfg: &RunConfig) -> String {
    let canon = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(canon.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse and validate config text. Syntax errors keep the JSON parser's
/// line/column and field diagnostics.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// End-of-stage snapshot: the full parameter set plus the hash of the config
/// that produced it, so evaluation can refuse weights from a different
/// layout instead of silently misreading them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = serde_json::to_string(self)?;
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}
