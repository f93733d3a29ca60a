//! Analytic forward-pass cost model for a gated-FFN decoder, used to compare
//! sequence-length variants of much larger targets than the desk-scale model.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsDims {
    pub layers: u64,
    pub model_dim: u64,
    pub ffn_dim: u64,
    pub vocab_size: u64,
}

/// 7B-class decoder dimensions.
impl Default for FlopsDims {
    fn default() -> Self {
        FlopsDims {
            layers: 32,
            model_dim: 4096,
            ffn_dim: 11008,
            vocab_size: 32000,
        }
    }
}

/// Weight scalars outside the embedding table: per layer four attention
/// projections plus the three gated-FFN matrices, then the output projection
/// onto the vocabulary. Norm gains are omitted (they vanish at this scale).
pub fn nonembed_params(dims: &FlopsDims) -> u64 {
    let d = dims.model_dim;
    let per_layer = 4 * d * d + 3 * d * dims.ffn_dim;
    dims.layers * per_layer + d * dims.vocab_size
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub seq_len: u64,
    pub dense: u64,
    pub attention: u64,
    pub total: u64,
    pub nonembed_params: u64,
}

/// Multiply-accumulate counted as two floating-point operations; dense cost
/// is every token through every non-embedding weight, attention cost is the
/// score and mixing matmuls. Norm and softmax scalar work is excluded, the
/// vocabulary projection is included.
pub fn flops_estimate(dims: &FlopsDims, seq_len: u64) -> FlopsEstimate {
    let p = nonembed_params(dims);
    let dense = 2 * p * seq_len;
    let attention = 4 * dims.layers * seq_len * seq_len * dims.model_dim;
    FlopsEstimate {
        seq_len,
        dense,
        attention,
        total: dense + attention,
        nonembed_params: p,
    }
}

pub fn report(dims: &FlopsDims, estimates: &[FlopsEstimate]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "dims: layers={} d={} ffn={} vocab={}\n",
        dims.layers, dims.model_dim, dims.ffn_dim, dims.vocab_size
    ));
    out.push_str(&format!("nonembed_params: {}\n", nonembed_params(dims)));
    out.push_str(
        "assumptions: mac=2 flops; vocab projection counted; norm/softmax excluded\n",
    );
    out.push_str("seq_len,dense,attention,total\n");
    for e in estimates {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.seq_len, e.dense, e.attention, e.total
        ));
    }
    out
}
