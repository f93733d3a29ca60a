//! Whole-model wiring: one parameter set covering decoder, projector, query
//! banks, alignment stacks and the auxiliary heads, plus the batched forward
//! pass that turns raw samples into a differentiable loss breakdown.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{self, AlignmentLossParts, SimMode, ValConfig, TAU_INIT};
use crate::decoder::{self, DecoderConfig};
use crate::error::{Error, Result};
use crate::mask::{build_tgm, GatewayMask, IntraGroup};
use crate::params::{name_rng, Loaded, ParamSet};
use crate::sequence::{assemble_inputs, build_layout, SequenceLayout};
use crate::teachers::{self, ImageConfig, Sample, TeacherSpec, VOCAB_FLOOR};
use crate::tensor::{Graph, TensorId};

/// One vision task: a query bank feeding an alignment stack that chases one
/// frozen teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSetting {
    pub name: String,
    /// rows in the task's query bank
    pub queries: usize,
    pub teacher: TeacherSpec,
    /// weight of this task's loss in the combined objective
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub image: ImageConfig,
    /// width of the frozen patch encoder's output
    pub encoder_dim: usize,
    pub tasks: Vec<TaskSetting>,
    pub val_layers: usize,
    pub val_heads: usize,
    pub val_ffn: usize,
    pub intra: IntraGroup,
    /// decoder block whose output feeds the alignment stacks; None means the
    /// last block
    pub tap: Option<usize>,
    /// contrastive weight λ
    pub lambda: f64,
}

/// Desk-scale model: the default decoder over a 16-patch canvas, two aligned
/// tasks with four queries each, and single-block alignment stacks. Heads
/// must divide both teacher widths.
impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            decoder: DecoderConfig::default(),
            image: ImageConfig::default(),
            encoder_dim: 32,
            tasks: vec![
                TaskSetting {
                    name: "quad".into(),
                    queries: 4,
                    teacher: TeacherSpec {
                        name: "quad".into(),
                        tokens: 16,
                        feat_dim: 24,
                    },
                    alpha: 1.0,
                },
                TaskSetting {
                    name: "fine".into(),
                    queries: 4,
                    teacher: TeacherSpec {
                        name: "fine".into(),
                        tokens: 36,
                        feat_dim: 16,
                    },
                    alpha: 1.0,
                },
            ],
            val_layers: 1,
            val_heads: 2,
            val_ffn: 48,
            intra: IntraGroup::Causal,
            tap: None,
            lambda: crate::align::LAMBDA_DEFAULT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.image.validate()?;
        if self.encoder_dim == 0 {
            return Err(Error::Config("encoder_dim must be positive".into()));
        }
        if self.decoder.vocab_size < VOCAB_FLOOR {
            return Err(Error::Config(format!(
                "vocab {} too small for the {} reserved tokens",
                self.decoder.vocab_size, VOCAB_FLOOR
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} invalid", self.lambda)));
        }
        for t in &self.tasks {
            if t.queries == 0 {
                return Err(Error::Config(format!("task {} has zero queries", t.name)));
            }
            if !t.alpha.is_finite() {
                return Err(Error::Config(format!("task {} alpha not finite", t.name)));
            }
            t.teacher.validate()?;
            self.val_config(t).validate()?;
        }
        if let Some(tap) = self.tap {
            if tap >= self.decoder.layers {
                return Err(Error::Config(format!(
                    "tap {} out of range ({} blocks)",
                    tap, self.decoder.layers
                )));
            }
        }
        Ok(())
    }

    pub fn val_config(&self, task: &TaskSetting) -> ValConfig {
        ValConfig {
            queries: task.teacher.tokens,
            feat_dim: task.teacher.feat_dim,
            layers: self.val_layers,
            heads: self.val_heads,
            ffn_dim: self.val_ffn,
        }
    }

    pub fn teacher_specs(&self) -> Vec<TeacherSpec> {
        self.tasks.iter().map(|t| t.teacher.clone()).collect()
    }
}

pub fn mtq_name(task: &str) -> String {
    format!("mtq.{task}")
}

pub fn val_prefix(task: &str) -> String {
    format!("val.{task}")
}

/// How a training variant assembles the sequence and the loss. Derived from
/// the strategy name; kept explicit so the forward pass never branches on
/// strategy strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    /// query banks appear in the sequence (and the gateway mask isolates them)
    pub include_queries: bool,
    /// alignment stacks run on query hidden states
    pub use_val: bool,
    /// regression head runs on vision-token hidden states instead
    pub token_head: bool,
    /// alignment losses include the contrastive term
    pub contrastive: bool,
    /// projected teacher features are appended to the vision block as input
    pub teacher_input: bool,
}

impl Plan {
    /// any per-task alignment loss at all
    pub fn aligns(&self) -> bool {
        self.use_val || self.token_head
    }
}

/// Initialize every trainable tensor plus the frozen encoder/teacher weights.
/// All strategy variants share one superset of parameters; entries a plan
/// never touches receive no gradients and are left untouched by training.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    teachers::init_frozen_params(&mut ps, &cfg.image, cfg.encoder_dim, &cfg.teacher_specs(), seed)?;

    let d = cfg.decoder.model_dim;
    fill(&mut ps, seed, "proj.w", &[cfg.encoder_dim, d]);
    fill(&mut ps, seed, "proj.b", &[d]);

    for (name, shape) in cfg.decoder.param_shapes() {
        fill(&mut ps, seed, &name, &shape);
    }

    for task in &cfg.tasks {
        fill(&mut ps, seed, &mtq_name(&task.name), &[task.queries, d]);
        for (name, shape) in cfg.val_config(task).param_shapes(&val_prefix(&task.name), d) {
            fill(&mut ps, seed, &name, &shape);
        }
        let k = cfg.image.num_patches();
        let (m, feat) = (task.teacher.tokens, task.teacher.feat_dim);
        fill(&mut ps, seed, &format!("tokhead.{}.w", task.name), &[d, feat]);
        fill(&mut ps, seed, &format!("tokhead.{}.mix", task.name), &[m, k]);
        fill(&mut ps, seed, &format!("tokhead.{}.log_tau", task.name), &[1]);
        fill(&mut ps, seed, &format!("tokin.{}.w", task.name), &[feat, d]);
        fill(&mut ps, seed, &format!("tokin.{}.b", task.name), &[d]);
    }
    Ok(ps)
}

/// Init rule keyed on the last name component: norm gains start at one,
/// biases at zero, temperatures at the standard soft value, everything else
/// uniform in ±0.08 from the name-derived stream.
fn fill(ps: &mut ParamSet, seed: u64, name: &str, shape: &[usize]) {
    let n: usize = shape.iter().product();
    let last = name.rsplit('.').next().unwrap_or(name);
    let data = match last {
        "g" => vec![1.0; n],
        "b" | "b1" | "b2" => vec![0.0; n],
        "log_tau" => vec![TAU_INIT.ln(); n],
        _ => {
            let mut rng = name_rng(seed, name);
            (0..n).map(|_| rng.gen_range(-0.08..0.08)).collect()
        }
    };
    ps.insert(name, shape, data, true);
}

/// Sequence layout for one plan: vision (possibly extended with teacher
/// tokens), then the query groups, then text.
pub fn layout_for(cfg: &ModelConfig, plan: &Plan, text_len: usize) -> Result<SequenceLayout> {
    let mut vision_len = cfg.image.num_patches();
    if plan.teacher_input {
        vision_len += cfg.tasks.iter().map(|t| t.teacher.tokens).sum::<usize>();
    }
    let groups: Vec<usize> = if plan.include_queries {
        cfg.tasks.iter().map(|t| t.queries).collect()
    } else {
        Vec::new()
    };
    build_layout(vision_len, &groups, text_len)
}

pub fn mask_for(cfg: &ModelConfig, layout: &SequenceLayout) -> Result<GatewayMask> {
    build_tgm(layout, cfg.intra)
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub text: TensorId,
    pub per_task: Vec<AlignmentLossParts>,
    pub alphas: Vec<f64>,
    pub total: TensorId,
}

/// Combined objective: text loss plus the α-weighted task losses. With no
/// tasks (or all-zero α) the total IS the text loss node, bit for bit.
pub fn combined_loss(
    g: &mut Graph,
    text: TensorId,
    per_task: Vec<AlignmentLossParts>,
    alphas: &[f64],
) -> Result<LossBreakdown> {
    if alphas.len() != per_task.len() {
        return Err(Error::ShapeMismatch {
            op: "combined_loss",
            detail: format!("{} alphas for {} tasks", alphas.len(), per_task.len()),
        });
    }
    let mut total = text;
    for (parts, &a) in per_task.iter().zip(alphas) {
        if a == 0.0 {
            continue;
        }
        let term = if a == 1.0 {
            parts.total
        } else {
            g.scale(parts.total, a)?
        };
        total = g.add(total, term)?;
    }
    Ok(LossBreakdown {
        text,
        per_task,
        alphas: alphas.to_vec(),
        total,
    })
}

/// Everything the training step needs from one batched forward pass.
pub struct BatchForward {
    pub breakdown: LossBreakdown,
    pub layout: SequenceLayout,
}

/// One sample's input rows: projected vision, any teacher-derived extra
/// tokens, then banks and text via the shared assembly. The registry caches
/// parameter leaves, so repeated calls in one graph share them.
fn assemble_sample(
    g: &mut Graph,
    ps: &ParamSet,
    reg: &mut Loaded,
    cfg: &ModelConfig,
    plan: &Plan,
    layout: &SequenceLayout,
    s: &Sample,
) -> Result<TensorId> {
    let embed = reg.get(g, ps, "dec.embed")?;
    let pos = reg.get(g, ps, "dec.pos")?;
    let banks: Vec<TensorId> = if plan.include_queries {
        cfg.tasks
            .iter()
            .map(|t| reg.get(g, ps, &mtq_name(&t.name)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let enc = teachers::encode_image(ps, &cfg.image, &s.image)?;
    let enc = g.constant(enc, &[cfg.image.num_patches(), cfg.encoder_dim])?;
    let mut vision = teachers::project(g, ps, reg, enc)?;
    if plan.teacher_input {
        for task in &cfg.tasks {
            let feats = teachers::teacher_features(ps, &cfg.image, &task.teacher, &s.image)?;
            let feats = g.constant(feats, &[task.teacher.tokens, task.teacher.feat_dim])?;
            let w = reg.get(g, ps, &format!("tokin.{}.w", task.name))?;
            let b = reg.get(g, ps, &format!("tokin.{}.b", task.name))?;
            let projected = g.matmul(feats, w)?;
            let projected = g.add_row(projected, b)?;
            vision = g.concat_rows(&[vision, projected])?;
        }
    }
    assemble_inputs(g, layout, vision, &banks, &s.text_ids(), embed, pos)
}

/// One sample end to end in a caller-owned graph, for evaluation and
/// inspection paths.
pub fn single_forward(
    g: &mut Graph,
    reg: &mut Loaded,
    ps: &ParamSet,
    cfg: &ModelConfig,
    plan: &Plan,
    s: &Sample,
    retain_attention: bool,
) -> Result<(SequenceLayout, decoder::ForwardRecord)> {
    let layout = layout_for(cfg, plan, s.text_ids().len())?;
    let mask = mask_for(cfg, &layout)?;
    let inputs = assemble_sample(g, ps, reg, cfg, plan, &layout, s)?;
    let record = decoder::forward(g, ps, reg, &cfg.decoder, inputs, &mask, retain_attention)?;
    Ok((layout, record))
}

/// Run a batch through the full pipeline in one graph: encode, project,
/// assemble, decode, align, and combine losses. Samples must share prompt
/// and answer lengths (the layout is one shape per batch).
pub fn forward_batch(
    g: &mut Graph,
    ps: &ParamSet,
    reg: &mut Loaded,
    cfg: &ModelConfig,
    plan: &Plan,
    samples: &[&Sample],
) -> Result<BatchForward> {
    let first = samples.first().ok_or(Error::EmptySupervision)?;
    let text_len = first.text_ids().len();
    let answer_start = first.answer_start();
    for s in samples {
        if s.text_ids().len() != text_len || s.answer_start() != answer_start {
            return Err(Error::ShapeMismatch {
                op: "forward_batch",
                detail: "mixed prompt/answer lengths in one batch".into(),
            });
        }
    }

    let layout = layout_for(cfg, plan, text_len)?;
    let mask = mask_for(cfg, &layout)?;

    let mut ce_terms = Vec::with_capacity(samples.len());
    let mut aligned: Vec<Vec<TensorId>> = vec![Vec::new(); cfg.tasks.len()];
    let mut targets: Vec<Vec<TensorId>> = vec![Vec::new(); cfg.tasks.len()];

    for s in samples {
        let inputs = assemble_sample(g, ps, reg, cfg, plan, &layout, s)?;
        let record = decoder::forward(g, ps, reg, &cfg.decoder, inputs, &mask, false)?;

        let text_ids = s.text_ids();
        let pairs = decoder::answer_supervision(&layout, &text_ids, answer_start)?;
        ce_terms.push(decoder::loss_mllm(g, &record, &pairs)?);

        if plan.use_val {
            for (i, task) in cfg.tasks.iter().enumerate() {
                let hidden = decoder::mtq_hidden_states(g, &record, &layout, i, cfg.tap)?;
                let out = align::val_forward(
                    g,
                    ps,
                    reg,
                    &cfg.val_config(task),
                    &val_prefix(&task.name),
                    hidden,
                )?;
                aligned[i].push(out);
                let feats = teachers::teacher_features(ps, &cfg.image, &task.teacher, &s.image)?;
                targets[i].push(g.constant(
                    feats,
                    &[task.teacher.tokens, task.teacher.feat_dim],
                )?);
            }
        } else if plan.token_head {
            let k = cfg.image.num_patches();
            let vision_hidden = g.slice_rows(record.hidden, 0, k)?;
            for (i, task) in cfg.tasks.iter().enumerate() {
                let w = reg.get(g, ps, &format!("tokhead.{}.w", task.name))?;
                let mix = reg.get(g, ps, &format!("tokhead.{}.mix", task.name))?;
                let lifted = g.matmul(vision_hidden, w)?;
                aligned[i].push(g.matmul(mix, lifted)?);
                let feats = teachers::teacher_features(ps, &cfg.image, &task.teacher, &s.image)?;
                targets[i].push(g.constant(
                    feats,
                    &[task.teacher.tokens, task.teacher.feat_dim],
                )?);
            }
        }
    }

    let stacked = g.stack_scalars(&ce_terms)?;
    let text = g.mean_all(stacked)?;

    let mut per_task = Vec::new();
    let mut alphas = Vec::new();
    if plan.aligns() {
        let lambda = if plan.contrastive { cfg.lambda } else { 0.0 };
        for (i, task) in cfg.tasks.iter().enumerate() {
            let tau_name = if plan.use_val {
                format!("{}.log_tau", val_prefix(&task.name))
            } else {
                format!("tokhead.{}.log_tau", task.name)
            };
            let log_tau = reg.get(g, ps, &tau_name)?;
            let tau = g.exp(log_tau)?;
            per_task.push(align::loss_task(
                g,
                &aligned[i],
                &targets[i],
                tau,
                lambda,
                SimMode::Pooled,
            )?);
            alphas.push(task.alpha);
        }
    }

    let breakdown = combined_loss(g, text, per_task, &alphas)?;
    Ok(BatchForward { breakdown, layout })
}

/// Teacher-forced greedy accuracy: a sample counts as correct only if every
/// answer position's argmax logit equals its answer token.
pub fn answer_accuracy(
    ps: &ParamSet,
    cfg: &ModelConfig,
    plan: &Plan,
    samples: &[Sample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySupervision);
    }
    let mut correct = 0usize;
    for s in samples {
        let mut g = Graph::new();
        let mut reg = Loaded::new();
        let text_ids = s.text_ids();
        let (layout, record) = single_forward(&mut g, &mut reg, ps, cfg, plan, s, false)?;

        let base = layout.text_range().start;
        let v = cfg.decoder.vocab_size;
        let logits = g.value(record.logits);
        let ok = (s.answer_start()..text_ids.len()).all(|a| {
            let row = base + a - 1;
            let slice = &logits[row * v..(row + 1) * v];
            let argmax = slice
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            argmax == text_ids[a]
        });
        if ok {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean pooled cosine between the alignment stack's output and the teacher's
/// features over a sample set, for one task. Evaluation only.
pub fn alignment_cosine(
    ps: &ParamSet,
    cfg: &ModelConfig,
    plan: &Plan,
    samples: &[Sample],
    task_index: usize,
) -> Result<f64> {
    if task_index >= cfg.tasks.len() {
        return Err(Error::InvalidTaskIndex(task_index, cfg.tasks.len()));
    }
    if samples.is_empty() {
        return Err(Error::EmptySupervision);
    }
    let task = &cfg.tasks[task_index];
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let mut reg = Loaded::new();
        let (layout, record) = single_forward(&mut g, &mut reg, ps, cfg, plan, s, false)?;
        let hidden = decoder::mtq_hidden_states(&mut g, &record, &layout, task_index, cfg.tap)?;
        let out = align::val_forward(
            &mut g,
            ps,
            &mut reg,
            &cfg.val_config(task),
            &val_prefix(&task.name),
            hidden,
        )?;
        let feats = teachers::teacher_features(ps, &cfg.image, &task.teacher, &s.image)?;
        let feats = g.constant(feats, &[task.teacher.tokens, task.teacher.feat_dim])?;
        let cos = align::pooled_cosine(&mut g, out, feats, SimMode::Pooled)?;
        total += g.value(cos)[0];
    }
    Ok(total / samples.len() as f64)
}

/// Final-position attention over the vision block for one sample, reduced
/// across heads (and layers when none is selected).
pub fn last_token_vision_attention(
    ps: &ParamSet,
    cfg: &ModelConfig,
    plan: &Plan,
    s: &Sample,
    layer: Option<usize>,
    reduce: decoder::HeadReduce,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut reg = Loaded::new();
    let (layout, record) = single_forward(&mut g, &mut reg, ps, cfg, plan, s, true)?;
    decoder::extract_last_token_attention(&g, &record, &layout, layer, reduce)
}

/// Central-difference audit of the full combined-loss gradient. Probes every
/// trainable parameter, `coords` indices each; parameters a plan leaves off
/// the loss path must come back with zero analytic AND numeric gradient, so
/// they are probed too.
///
/// Uses the self-selecting five-point stencil: the combined loss mixes O(1)
/// cross-entropy with task terms, and a handful of coordinates end up with
/// true gradients below the relative-error floor, where a single fixed step
/// is squeezed between f64 rounding below and truncation above. `epsilon`
/// seeds the step ladder; 1e-3 suits every config in the suite.
pub fn gradcheck_combined(
    ps: &ParamSet,
    cfg: &ModelConfig,
    plan: &Plan,
    samples: &[&Sample],
    coords: Option<usize>,
    epsilon: f64,
) -> Result<crate::fdcheck::FdReport> {
    let names: Vec<String> = ps
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();

    let mut g = Graph::new();
    let mut reg = Loaded::new();
    let out = forward_batch(&mut g, ps, &mut reg, cfg, plan, samples)?;
    let grads = g.backward(out.breakdown.total)?;
    let by_name = reg.collect_grads(&g, &grads);

    crate::fdcheck::check_gradients_with(
        ps,
        &name_refs,
        coords,
        epsilon,
        crate::fdcheck::Stencil::Central4Auto,
        |p| {
            let mut g = Graph::new();
            let mut reg = Loaded::new();
            let out = forward_batch(&mut g, p, &mut reg, cfg, plan, samples)?;
            Ok(g.value(out.breakdown.total)[0])
        },
        |name| match by_name.get(name) {
            Some(gr) => Ok(gr.clone()),
            None => Ok(vec![0.0; ps.get(name)?.data.len()]),
        },
    )
}
