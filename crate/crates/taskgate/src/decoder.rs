//! Causal decoder-only transformer run under a [`GatewayMask`].
//!
//! Pre-norm blocks (masked multi-head attention, then a GELU FFN, residual
//! around each), a final layer norm, and an untied output projection. All
//! activations stay on one [`Graph`] so the text loss differentiates through
//! the whole stack, MTQ banks included.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::GatewayMask;
use crate::params::{Loaded, ParamSet};
use crate::sequence::SequenceLayout;
use crate::tensor::{Graph, TensorId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
}

/// Desk-scale decoder: two blocks of width 32, small enough that every test
/// in the suite runs in seconds on one core.
impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            model_dim: 32,
            heads: 2,
            ffn_dim: 64,
            vocab_size: 64,
            max_positions: 128,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.layers >= 1
            && self.model_dim >= 1
            && self.heads >= 1
            && self.ffn_dim >= 1
            && self.vocab_size >= 1
            && self.max_positions >= 1;
        if !all_positive {
            return Err(Error::Config("decoder dims must all be >= 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Names and shapes of every decoder parameter, in declaration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.model_dim;
        let f = self.ffn_dim;
        let mut out = vec![
            ("dec.embed".into(), vec![self.vocab_size, d]),
            ("dec.pos".into(), vec![self.max_positions, d]),
        ];
        for l in 0..self.layers {
            let p = |suffix: &str| format!("dec.l{l}.{suffix}");
            out.push((p("ln1.g"), vec![d]));
            out.push((p("ln1.b"), vec![d]));
            out.push((p("attn.wq"), vec![d, d]));
            out.push((p("attn.wk"), vec![d, d]));
            out.push((p("attn.wv"), vec![d, d]));
            out.push((p("attn.wo"), vec![d, d]));
            out.push((p("ln2.g"), vec![d]));
            out.push((p("ln2.b"), vec![d]));
            out.push((p("ffn.w1"), vec![d, f]));
            out.push((p("ffn.b1"), vec![f]));
            out.push((p("ffn.w2"), vec![f, d]));
            out.push((p("ffn.b2"), vec![d]));
        }
        out.push(("dec.final.g".into(), vec![d]));
        out.push(("dec.final.b".into(), vec![d]));
        out.push(("dec.unembed".into(), vec![d, self.vocab_size]));
        out
    }
}

pub struct ForwardRecord {
    /// states entering the stack, then after each block; `[layers]` is final
    pub layer_outputs: Vec<TensorId>,
    /// final block output, before the closing layer norm
    pub hidden: TensorId,
    pub logits: TensorId,
    /// post-softmax weights per layer, per head, each S×S
    pub attention: Option<Vec<Vec<TensorId>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduce {
    Mean,
    Max,
}

pub fn forward(
    g: &mut Graph,
    ps: &ParamSet,
    reg: &mut Loaded,
    cfg: &DecoderConfig,
    inputs: TensorId,
    mask: &GatewayMask,
    retain_attention: bool,
) -> Result<ForwardRecord> {
    cfg.validate()?;
    let shape = g.shape(inputs).to_vec();
    if shape.len() != 2 || shape[1] != cfg.model_dim {
        return Err(Error::ShapeMismatch {
            op: "decoder_forward",
            detail: format!("inputs {shape:?}, model_dim {}", cfg.model_dim),
        });
    }
    if shape[0] != mask.size() {
        return Err(Error::ShapeMismatch {
            op: "decoder_forward",
            detail: format!("inputs rows {} vs mask size {}", shape[0], mask.size()),
        });
    }

    let additive = Arc::new(mask.to_additive());
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = inputs;
    let mut layer_outputs = vec![x];
    let mut attention = retain_attention.then(Vec::new);

    for l in 0..cfg.layers {
        let p = |suffix: &str| format!("dec.l{l}.{suffix}");
        let ln1g = reg.get(g, ps, &p("ln1.g"))?;
        let ln1b = reg.get(g, ps, &p("ln1.b"))?;
        let normed = g.layer_norm(x, ln1g, ln1b)?;

        let wq = reg.get(g, ps, &p("attn.wq"))?;
        let wk = reg.get(g, ps, &p("attn.wk"))?;
        let wv = reg.get(g, ps, &p("attn.wv"))?;
        let q = g.matmul(normed, wq)?;
        let k = g.matmul(normed, wk)?;
        let v = g.matmul(normed, wv)?;

        let mut head_outs = Vec::with_capacity(cfg.heads);
        let mut head_attn = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let c0 = h * dh;
            let c1 = c0 + dh;
            let qh = g.slice_cols(q, c0, c1)?;
            let kh = g.slice_cols(k, c0, c1)?;
            let vh = g.slice_cols(v, c0, c1)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale)?;
            let weights = g.softmax_masked(scaled, Some(additive.clone()))?;
            if attention.is_some() {
                head_attn.push(weights);
            }
            head_outs.push(g.matmul(weights, vh)?);
        }
        if let Some(att) = attention.as_mut() {
            att.push(head_attn);
        }
        let merged = g.concat_cols(&head_outs)?;
        let wo = reg.get(g, ps, &p("attn.wo"))?;
        let projected = g.matmul(merged, wo)?;
        x = g.add(x, projected)?;

        let ln2g = reg.get(g, ps, &p("ln2.g"))?;
        let ln2b = reg.get(g, ps, &p("ln2.b"))?;
        let normed2 = g.layer_norm(x, ln2g, ln2b)?;
        let w1 = reg.get(g, ps, &p("ffn.w1"))?;
        let b1 = reg.get(g, ps, &p("ffn.b1"))?;
        let w2 = reg.get(g, ps, &p("ffn.w2"))?;
        let b2 = reg.get(g, ps, &p("ffn.b2"))?;
        let h1 = g.matmul(normed2, w1)?;
        let h1 = g.add_row(h1, b1)?;
        let act = g.gelu(h1)?;
        let h2 = g.matmul(act, w2)?;
        let h2 = g.add_row(h2, b2)?;
        x = g.add(x, h2)?;
        layer_outputs.push(x);
    }

    let fg = reg.get(g, ps, "dec.final.g")?;
    let fb = reg.get(g, ps, "dec.final.b")?;
    let normed = g.layer_norm(x, fg, fb)?;
    let unembed = reg.get(g, ps, "dec.unembed")?;
    let logits = g.matmul(normed, unembed)?;

    Ok(ForwardRecord {
        layer_outputs,
        hidden: x,
        logits,
        attention,
    })
}

/// Mean cross-entropy over explicit (logit row, target id) pairs.
pub fn cross_entropy_mean(
    g: &mut Graph,
    logits: TensorId,
    supervised: &[(usize, usize)],
) -> Result<TensorId> {
    if supervised.is_empty() {
        return Err(Error::EmptySupervision);
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.gather_entries(logp, supervised)?;
    let mean = g.mean_all(picked)?;
    g.scale(mean, -1.0)
}

/// Next-token cross-entropy averaged over supervised answer positions only.
/// Vision and query positions never appear among the pairs.
pub fn loss_mllm(
    g: &mut Graph,
    record: &ForwardRecord,
    supervised: &[(usize, usize)],
) -> Result<TensorId> {
    cross_entropy_mean(g, record.logits, supervised)
}

/// Supervision pairs for an answer span starting at `answer_start` within the
/// text block: each answer token becomes the target of the position before
/// it. A sequence-initial token has no predictor and is skipped.
pub fn answer_supervision(
    layout: &SequenceLayout,
    text_ids: &[usize],
    answer_start: usize,
) -> Result<Vec<(usize, usize)>> {
    if text_ids.len() != layout.text_len || answer_start >= layout.text_len {
        return Err(Error::InvalidLayout(format!(
            "answer span {answer_start}.. in text block of {}",
            layout.text_len
        )));
    }
    let base = layout.text_range().start;
    let mut pairs = Vec::new();
    for a in answer_start..layout.text_len {
        let target_pos = base + a;
        if target_pos == 0 {
            continue;
        }
        pairs.push((target_pos - 1, text_ids[a]));
    }
    if pairs.is_empty() {
        return Err(Error::EmptySupervision);
    }
    Ok(pairs)
}

/// Final-position attention over the vision block, reduced across heads (and
/// across layers when none is selected). Values, not graph nodes.
pub fn extract_last_token_attention(
    g: &Graph,
    record: &ForwardRecord,
    layout: &SequenceLayout,
    layer_select: Option<usize>,
    reduce: HeadReduce,
) -> Result<Vec<f64>> {
    let attention = record
        .attention
        .as_ref()
        .ok_or(Error::AttentionNotRetained)?;
    let k = layout.vision_len;
    if k == 0 {
        return Err(Error::InvalidLayout("no vision tokens to score".into()));
    }
    let s = layout.total();
    let layers: Vec<usize> = match layer_select {
        Some(l) if l >= attention.len() => {
            return Err(Error::Config(format!(
                "layer {l} out of range ({} layers)",
                attention.len()
            )))
        }
        Some(l) => vec![l],
        None => (0..attention.len()).collect(),
    };
    let mut rows: Vec<&[f64]> = Vec::new();
    for &l in &layers {
        for &head in &attention[l] {
            let v = g.value(head);
            rows.push(&v[(s - 1) * s..(s - 1) * s + k]);
        }
    }
    let mut out = vec![0.0; k];
    match reduce {
        HeadReduce::Mean => {
            for row in &rows {
                for (o, &x) in out.iter_mut().zip(*row) {
                    *o += x;
                }
            }
            for o in out.iter_mut() {
                *o /= rows.len() as f64;
            }
        }
        HeadReduce::Max => {
            out.fill(f64::NEG_INFINITY);
            for row in &rows {
                for (o, &x) in out.iter_mut().zip(*row) {
                    *o = o.max(x);
                }
            }
        }
    }
    Ok(out)
}

/// Hidden rows of one task's query group, from the block output selected by
/// `tap` (0-based block index; `None` means the final block).
pub fn mtq_hidden_states(
    g: &mut Graph,
    record: &ForwardRecord,
    layout: &SequenceLayout,
    task: usize,
    tap: Option<usize>,
) -> Result<TensorId> {
    let range = layout.group_range(task)?;
    let blocks = record.layer_outputs.len() - 1;
    let source = match tap {
        Some(l) if l >= blocks => {
            return Err(Error::Config(format!(
                "val_tap_layer {l} out of range ({blocks} blocks)"
            )))
        }
        Some(l) => record.layer_outputs[l + 1],
        None => record.hidden,
    };
    g.slice_rows(source, range.start, range.end)
}
