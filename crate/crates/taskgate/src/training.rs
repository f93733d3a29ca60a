//! Two-stage training on top of the batched forward pass: the optimizer and
//! schedule, stage-level freezing, the activation-strategy variants, and the
//! sweep plumbing that turns runs into result tables.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{TAU_MAX, TAU_MIN};
use crate::error::{Error, Result};
use crate::model::{self, forward_batch, ModelConfig, Plan};
use crate::params::{name_rng, Loaded, ParamSet};
use crate::teachers::{generate_dataset, Sample};
use crate::tensor::Graph;

/// Parameter prefixes that never train in any stage.
pub const FROZEN_ALWAYS: [&str; 2] = ["enc.", "teacher."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    TokenInput,
    TokenGen,
    TokenDis,
    QueryGen,
    QueryDis,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Baseline,
        Strategy::TokenInput,
        Strategy::TokenGen,
        Strategy::TokenDis,
        Strategy::QueryGen,
        Strategy::QueryDis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::TokenInput => "token_input",
            Strategy::TokenGen => "token_gen",
            Strategy::TokenDis => "token_dis",
            Strategy::QueryGen => "query_gen",
            Strategy::QueryDis => "query_dis",
        }
    }

    fn uses_queries(self) -> bool {
        matches!(self, Strategy::QueryGen | Strategy::QueryDis)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// Resolve a strategy into its assembly plan, rejecting query variants on a
/// model with no tasks.
pub fn plan_for(cfg: &ModelConfig, strategy: Strategy) -> Result<Plan> {
    if strategy.uses_queries() && cfg.tasks.is_empty() {
        return Err(Error::StrategyNeedsQueries(strategy.name().into()));
    }
    Ok(match strategy {
        Strategy::Baseline => Plan {
            include_queries: false,
            use_val: false,
            token_head: false,
            contrastive: false,
            teacher_input: false,
        },
        Strategy::TokenInput => Plan {
            include_queries: false,
            use_val: false,
            token_head: false,
            contrastive: false,
            teacher_input: true,
        },
        Strategy::TokenGen => Plan {
            include_queries: false,
            use_val: false,
            token_head: true,
            contrastive: false,
            teacher_input: false,
        },
        Strategy::TokenDis => Plan {
            include_queries: false,
            use_val: false,
            token_head: true,
            contrastive: true,
            teacher_input: false,
        },
        Strategy::QueryGen => Plan {
            include_queries: true,
            use_val: true,
            token_head: false,
            contrastive: false,
            teacher_input: false,
        },
        Strategy::QueryDis => Plan {
            include_queries: true,
            use_val: true,
            token_head: false,
            contrastive: true,
            teacher_input: false,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pt,
    Sft,
}

impl Stage {
    /// Stage-default frozen prefixes: the first stage trains only the pieces
    /// around the decoder, the second unfreezes it.
    pub fn default_frozen(self) -> Vec<String> {
        match self {
            Stage::Pt => vec!["dec.".to_string()],
            Stage::Sft => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// prefixes of parameters held fixed this stage; None takes the stage
    /// default
    pub frozen_prefixes: Option<Vec<String>>,
    /// per-task loss weights overriding the model config's; None keeps them
    pub alphas: Option<Vec<f64>>,
    pub strategy: Strategy,
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0,1)",
                self.warmup_ratio
            )));
        }
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(Error::Config(format!("base_lr {} invalid", self.base_lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay {} invalid",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn frozen(&self) -> Vec<String> {
        self.frozen_prefixes
            .clone()
            .unwrap_or_else(|| self.stage.default_frozen())
    }
}

/// Linear ramp to the base rate over ceil(ratio·total) steps, cosine decay
/// to zero over the rest.
pub fn lr_at(step: usize, total_steps: usize, warmup_ratio: f64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule over zero steps".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "step {step} beyond schedule end {total_steps}"
        )));
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    if step >= total_steps {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Decoupled-weight-decay Adam with conventional moment defaults. Moment
/// state is keyed by parameter name and created on first touch.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        ps: &mut ParamSet,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = ps.get_mut(name)?;
            if !param.trainable {
                continue;
            }
            if grad.len() != param.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    detail: format!("{name}: grad {} vs param {}", grad.len(), param.data.len()),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                let gi = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.data[i] -=
                    lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * param.data[i]);
            }
        }
        Ok(())
    }
}

/// Keep every learned temperature inside its working range; runs after each
/// optimizer step.
pub fn clamp_temperatures(ps: &mut ParamSet) {
    let (lo, hi) = (TAU_MIN.ln(), TAU_MAX.ln());
    for (name, param) in ps.iter_mut() {
        if name.ends_with(".log_tau") {
            for v in param.data.iter_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }
}

/// One recorded step: loss values at the parameters the step started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub lr: f64,
    pub text: f64,
    /// (mse, contrastive) per task, in task order
    pub tasks: Vec<(f64, f64)>,
    pub total: f64,
}

#[derive(Debug)]
pub struct StageOutcome {
    pub rows: Vec<StepRow>,
    pub total_steps: usize,
}

/// Run one stage over the dataset: freeze per config, iterate shuffled
/// batches, update with the scheduled rate, clamp temperatures, record the
/// loss curve. A non-finite loss aborts with the step and offending term.
pub fn run_stage(
    ps: &mut ParamSet,
    cfg: &ModelConfig,
    stage: &StageConfig,
    data: &[Sample],
) -> Result<StageOutcome> {
    stage.validate()?;
    let mut cfg = cfg.clone();
    if let Some(alphas) = &stage.alphas {
        if alphas.len() != cfg.tasks.len() {
            return Err(Error::ShapeMismatch {
                op: "run_stage",
                detail: format!("{} alphas for {} tasks", alphas.len(), cfg.tasks.len()),
            });
        }
        for (t, &a) in cfg.tasks.iter_mut().zip(alphas) {
            t.alpha = a;
        }
    }
    cfg.validate()?;
    let plan = plan_for(&cfg, stage.strategy)?;
    if data.is_empty() {
        return Err(Error::EmptySupervision);
    }

    let frozen = stage.frozen();
    ps.set_trainable_where(
        |name| !FROZEN_ALWAYS.iter().any(|p| name.starts_with(p)),
        true,
    );
    ps.set_trainable_where(|name| frozen.iter().any(|p| name.starts_with(p)), false);

    let steps_per_epoch = data.len().div_ceil(stage.batch_size);
    let total_steps = stage.epochs * steps_per_epoch;
    let mut opt = AdamW::new(stage.weight_decay);
    let mut rows = Vec::with_capacity(total_steps);
    let mut step = 0usize;

    for epoch in 0..stage.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut name_rng(stage.seed, &format!("shuffle.{epoch}")));
        for chunk in order.chunks(stage.batch_size) {
            let lr = lr_at(step, total_steps, stage.warmup_ratio, stage.base_lr)?;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();

            let mut g = Graph::new();
            let mut reg = Loaded::new();
            let out = forward_batch(&mut g, ps, &mut reg, &cfg, &plan, &batch)
                .map_err(|e| at_step(e, step))?;
            let row = record_row(&g, &out.breakdown, step, lr)?;

            let grads = g
                .backward(out.breakdown.total)
                .map_err(|e| at_step(e, step))?;
            let by_name = reg.collect_grads(&g, &grads);
            opt.step(ps, &by_name, lr)?;
            clamp_temperatures(ps);

            rows.push(row);
            step += 1;
        }
    }
    Ok(StageOutcome { rows, total_steps })
}

/// Rewrap a mid-step numeric failure so the diagnostic names the step.
fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFiniteLoss {
            step,
            term: context.to_string(),
        },
        other => other,
    }
}

fn record_row(g: &Graph, b: &model::LossBreakdown, step: usize, lr: f64) -> Result<StepRow> {
    let text = g.value(b.text)[0];
    let total = g.value(b.total)[0];
    let mut tasks = Vec::with_capacity(b.per_task.len());
    for (i, parts) in b.per_task.iter().enumerate() {
        let mse = g.value(parts.mse)[0];
        let nce = g.value(parts.contrastive)[0];
        if !mse.is_finite() || !nce.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                term: format!("task_{i}"),
            });
        }
        tasks.push((mse, nce));
    }
    if !text.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            term: "text".into(),
        });
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            term: "total".into(),
        });
    }
    Ok(StepRow {
        step,
        lr,
        text,
        tasks,
        total,
    })
}

/// Loss-curve CSV: a config-hash comment, a column header, one row per step.
pub fn curve_csv(rows: &[StepRow], task_count: usize, config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str("step,lr,text_loss");
    for i in 0..task_count {
        out.push_str(&format!(",task_{i}_mse,task_{i}_nce"));
    }
    out.push_str(",total\n");
    for r in rows {
        out.push_str(&format!("{},{},{}", r.step, r.lr, r.text));
        for i in 0..task_count {
            match r.tasks.get(i) {
                Some((mse, nce)) => out.push_str(&format!(",{mse},{nce}")),
                None => out.push_str(",na,na"),
            }
        }
        out.push_str(&format!(",{}\n", r.total));
    }
    out
}

/// Everything one full experiment needs beyond the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub pt: StageConfig,
    pub sft: StageConfig,
    pub train_count: usize,
    pub eval_count: usize,
    /// task whose teacher labels the dataset
    pub task_link: String,
}

pub struct RunOutcome {
    pub ps: ParamSet,
    /// parameters as they stood at the end of the first stage
    pub pt_params: ParamSet,
    pub pt_rows: Vec<StepRow>,
    pub sft_rows: Vec<StepRow>,
    pub accuracy: f64,
    pub eval_samples: Vec<Sample>,
}

/// Initialize, generate disjoint train/eval datasets, run both stages, score
/// held-out answers. All randomness descends from the one seed through named
/// streams, so a repeat run is bit-identical.
pub fn run_experiment(settings: &RunSettings, seed: u64) -> Result<RunOutcome> {
    let cfg = &settings.model;
    let init_seed: u64 = name_rng(seed, "init").gen();
    let train_seed: u64 = name_rng(seed, "data.train").gen();
    let eval_seed: u64 = name_rng(seed, "data.eval").gen();

    let mut ps = model::init_params(cfg, init_seed)?;
    let specs = cfg.teacher_specs();
    let train = generate_dataset(
        &ps,
        &cfg.image,
        &specs,
        &settings.task_link,
        train_seed,
        settings.train_count,
    )?;
    let eval = generate_dataset(
        &ps,
        &cfg.image,
        &specs,
        &settings.task_link,
        eval_seed,
        settings.eval_count,
    )?;

    let mut pt = settings.pt.clone();
    pt.seed = name_rng(seed, "stage.pt").gen();
    let mut sft = settings.sft.clone();
    sft.seed = name_rng(seed, "stage.sft").gen();

    let pt_out = run_stage(&mut ps, cfg, &pt, &train)?;
    let pt_params = ps.clone();
    let sft_out = run_stage(&mut ps, cfg, &sft, &train)?;

    let plan = plan_for(cfg, sft.strategy)?;
    let accuracy = model::answer_accuracy(&ps, cfg, &plan, &eval)?;
    Ok(RunOutcome {
        ps,
        pt_params,
        pt_rows: pt_out.rows,
        sft_rows: sft_out.rows,
        accuracy,
        eval_samples: eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub setting: String,
    pub seed: u64,
    pub final_text: f64,
    /// final (mse, contrastive) per task; empty when the setting aligns
    /// nothing
    pub final_tasks: Vec<(f64, f64)>,
    pub accuracy: f64,
}

fn cell_from(setting: &str, seed: u64, outcome: &RunOutcome) -> SweepCell {
    let last = outcome.sft_rows.last().expect("stage produced no rows");
    SweepCell {
        setting: setting.to_string(),
        seed,
        final_text: last.text,
        final_tasks: last.tasks.clone(),
        accuracy: outcome.accuracy,
    }
}

/// One run per (strategy, seed), both stages under that strategy.
pub fn sweep_strategies(
    settings: &RunSettings,
    strategies: &[Strategy],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &strategy in strategies {
        let mut s = settings.clone();
        s.pt.strategy = strategy;
        s.sft.strategy = strategy;
        for &seed in seeds {
            let outcome = run_experiment(&s, seed)?;
            cells.push(cell_from(strategy.name(), seed, &outcome));
        }
    }
    Ok(cells)
}

/// One run per (query count, seed), every task bank resized to that count.
pub fn sweep_queries(
    settings: &RunSettings,
    q_values: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &q in q_values {
        let mut s = settings.clone();
        for task in &mut s.model.tasks {
            task.queries = q;
        }
        for &seed in seeds {
            let outcome = run_experiment(&s, seed)?;
            cells.push(cell_from(&format!("q{q}"), seed, &outcome));
        }
    }
    Ok(cells)
}

/// Sweep CSV with the same hash comment plus a note that the generative
/// variants here are regression-only stand-ins.
pub fn sweep_csv(cells: &[SweepCell], task_count: usize, config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str("# note: gen variants use pure regression in place of a denoising objective\n");
    out.push_str("setting,seed,final_text_loss");
    for i in 0..task_count {
        out.push_str(&format!(",task_{i}_mse,task_{i}_nce"));
    }
    out.push_str(",accuracy\n");
    for c in cells {
        out.push_str(&format!("{},{},{}", c.setting, c.seed, c.final_text));
        for i in 0..task_count {
            match c.final_tasks.get(i) {
                Some((mse, nce)) => out.push_str(&format!(",{mse},{nce}")),
                None => out.push_str(",na,na"),
            }
        }
        out.push_str(&format!(",{}\n", c.accuracy));
    }
    out
}
