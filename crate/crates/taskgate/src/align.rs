//! Visual alignment head for one task: learnable alignment queries cross-
//! attend over projected MTQ states to produce features in the task teacher's
//! space, trained with mean-squared error plus a temperature-scaled InfoNCE
//! term over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Loaded, ParamSet};
use crate::tensor::{Graph, TensorId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValConfig {
    /// alignment query count M
    pub queries: usize,
    /// teacher feature width D
    pub feat_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

/// Batch similarity used by the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// cosine of the mean-over-queries pooled vectors
    Pooled,
    /// cosine of the flattened M·D feature maps
    Flat,
}

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 10.0;
pub const LAMBDA_DEFAULT: f64 = 0.1;

impl ValConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.feat_dim == 0 {
            return Err(Error::Config("alignment head needs queries and width".into()));
        }
        if self.heads == 0 || self.feat_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "feat_dim {} not divisible by heads {}",
                self.feat_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes under `prefix` (e.g. "val.depth").
    /// `model_dim` is the decoder width the input projection maps from.
    pub fn param_shapes(&self, prefix: &str, model_dim: usize) -> Vec<(String, Vec<usize>)> {
        let dd = self.feat_dim;
        let f = self.ffn_dim;
        let mut out = vec![
            (format!("{prefix}.vaq"), vec![self.queries, dd]),
            (format!("{prefix}.in_proj.w"), vec![model_dim, dd]),
            (format!("{prefix}.in_proj.b"), vec![dd]),
            (format!("{prefix}.log_tau"), vec![1]),
        ];
        for l in 0..self.layers {
            let p = |suffix: &str| format!("{prefix}.l{l}.{suffix}");
            out.push((p("ln_q.g"), vec![dd]));
            out.push((p("ln_q.b"), vec![dd]));
            out.push((p("attn.wq"), vec![dd, dd]));
            out.push((p("attn.wk"), vec![dd, dd]));
            out.push((p("attn.wv"), vec![dd, dd]));
            out.push((p("attn.wo"), vec![dd, dd]));
            out.push((p("ln2.g"), vec![dd]));
            out.push((p("ln2.b"), vec![dd]));
            out.push((p("ffn.w1"), vec![dd, f]));
            out.push((p("ffn.b1"), vec![f]));
            out.push((p("ffn.w2"), vec![f, dd]));
            out.push((p("ffn.b2"), vec![dd]));
        }
        out
    }
}

/// Run the alignment stack: start from the learnable query bank, cross-attend
/// over the projected MTQ states for each block, FFN after, pre-norm
/// residuals throughout. No closing norm, so zero blocks returns the bank
/// itself.
pub fn val_forward(
    g: &mut Graph,
    ps: &ParamSet,
    reg: &mut Loaded,
    cfg: &ValConfig,
    prefix: &str,
    mtq_hidden: TensorId,
) -> Result<TensorId> {
    cfg.validate()?;
    let dd = cfg.feat_dim;
    let dh = dd / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let w = reg.get(g, ps, &format!("{prefix}.in_proj.w"))?;
    if g.shape(mtq_hidden)[1] != g.shape(w)[0] {
        return Err(Error::ShapeMismatch {
            op: "val_forward",
            detail: format!(
                "mtq width {} vs projection input {}",
                g.shape(mtq_hidden)[1],
                g.shape(w)[0]
            ),
        });
    }
    let b = reg.get(g, ps, &format!("{prefix}.in_proj.b"))?;
    let kv = g.matmul(mtq_hidden, w)?;
    let kv = g.add_row(kv, b)?;

    let mut x = reg.get(g, ps, &format!("{prefix}.vaq"))?;
    for l in 0..cfg.layers {
        let p = |suffix: &str| format!("{prefix}.l{l}.{suffix}");
        let lng = reg.get(g, ps, &p("ln_q.g"))?;
        let lnb = reg.get(g, ps, &p("ln_q.b"))?;
        let qin = g.layer_norm(x, lng, lnb)?;
        let wq = reg.get(g, ps, &p("attn.wq"))?;
        let wk = reg.get(g, ps, &p("attn.wk"))?;
        let wv = reg.get(g, ps, &p("attn.wv"))?;
        let q = g.matmul(qin, wq)?;
        let k = g.matmul(kv, wk)?;
        let v = g.matmul(kv, wv)?;
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let c0 = h * dh;
            let c1 = c0 + dh;
            let qh = g.slice_cols(q, c0, c1)?;
            let kh = g.slice_cols(k, c0, c1)?;
            let vh = g.slice_cols(v, c0, c1)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale)?;
            let weights = g.softmax(scaled)?;
            head_outs.push(g.matmul(weights, vh)?);
        }
        let merged = g.concat_cols(&head_outs)?;
        let wo = reg.get(g, ps, &p("attn.wo"))?;
        let projected = g.matmul(merged, wo)?;
        x = g.add(x, projected)?;

        let ln2g = reg.get(g, ps, &p("ln2.g"))?;
        let ln2b = reg.get(g, ps, &p("ln2.b"))?;
        let n2 = g.layer_norm(x, ln2g, ln2b)?;
        let w1 = reg.get(g, ps, &p("ffn.w1"))?;
        let b1 = reg.get(g, ps, &p("ffn.b1"))?;
        let w2 = reg.get(g, ps, &p("ffn.w2"))?;
        let b2 = reg.get(g, ps, &p("ffn.b2"))?;
        let h1 = g.matmul(n2, w1)?;
        let h1 = g.add_row(h1, b1)?;
        let act = g.gelu(h1)?;
        let h2 = g.matmul(act, w2)?;
        let h2 = g.add_row(h2, b2)?;
        x = g.add(x, h2)?;
    }
    Ok(x)
}

/// τ as an in-graph tensor: exp of the stored log-temperature. Positive by
/// construction; the optimizer clamps the log after each step.
pub fn temperature(
    g: &mut Graph,
    ps: &ParamSet,
    reg: &mut Loaded,
    prefix: &str,
) -> Result<TensorId> {
    let log_tau = reg.get(g, ps, &format!("{prefix}.log_tau"))?;
    g.exp(log_tau)
}

fn pooled(g: &mut Graph, a: TensorId, mode: SimMode) -> Result<TensorId> {
    match mode {
        SimMode::Pooled => g.mean_rows(a),
        SimMode::Flat => {
            let n = g.value(a).len();
            g.reshape(a, &[n])
        }
    }
}

/// Cosine similarity of two feature maps after pooling per `mode`.
pub fn pooled_cosine(g: &mut Graph, a: TensorId, b: TensorId, mode: SimMode) -> Result<TensorId> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "pooled_cosine",
            detail: format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        });
    }
    let pa = pooled(g, a, mode)?;
    let pb = pooled(g, b, mode)?;
    let aa = g.mul(pa, pa)?;
    let bb = g.mul(pb, pb)?;
    let ab = g.mul(pa, pb)?;
    let na2 = g.sum_all(aa)?;
    let nb2 = g.sum_all(bb)?;
    if g.value(na2)[0] == 0.0 || g.value(nb2)[0] == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot = g.sum_all(ab)?;
    let na = g.sqrt(na2)?;
    let nb = g.sqrt(nb2)?;
    let denom = g.mul(na, nb)?;
    g.div(dot, denom)
}

/// −mean over the diagonal of log softmax(sims/τ) rows: each sample against
/// its own teacher versus the rest of the batch.
pub fn infonce_over_sims(g: &mut Graph, sims: TensorId, tau: TensorId) -> Result<TensorId> {
    let shape = g.shape(sims).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch {
            op: "infonce",
            detail: format!("similarity matrix {shape:?} not square"),
        });
    }
    let t = g.value(tau)[0];
    if t <= 0.0 {
        return Err(Error::NonPositiveTemperature(t));
    }
    let scaled = g.div(sims, tau)?;
    let logp = g.log_softmax(scaled)?;
    let diag: Vec<(usize, usize)> = (0..shape[0]).map(|i| (i, i)).collect();
    let picked = g.gather_entries(logp, &diag)?;
    let mean = g.mean_all(picked)?;
    g.scale(mean, -1.0)
}

#[derive(Debug, Clone)]
pub struct AlignmentLossParts {
    pub mse: TensorId,
    pub contrastive: TensorId,
    pub total: TensorId,
    pub lambda: f64,
}

/// Task objective: element-mean squared error plus λ times the
/// batch contrastive term.
pub fn loss_task(
    g: &mut Graph,
    aligned: &[TensorId],
    teacher: &[TensorId],
    tau: TensorId,
    lambda: f64,
    sim_mode: SimMode,
) -> Result<AlignmentLossParts> {
    if aligned.is_empty() || aligned.len() != teacher.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_task",
            detail: format!("batch sizes {} vs {}", aligned.len(), teacher.len()),
        });
    }
    let b = aligned.len();
    let per_map = g.value(aligned[0]).len();
    let mut sq_sums = Vec::with_capacity(b);
    for (&a, &t) in aligned.iter().zip(teacher) {
        if g.shape(a) != g.shape(t) {
            return Err(Error::ShapeMismatch {
                op: "loss_task",
                detail: format!("{:?} vs {:?}", g.shape(a), g.shape(t)),
            });
        }
        let d = g.sub(a, t)?;
        let sq = g.mul(d, d)?;
        sq_sums.push(g.sum_all(sq)?);
    }
    let stacked = g.stack_scalars(&sq_sums)?;
    let total_sq = g.sum_all(stacked)?;
    let mse = g.scale(total_sq, 1.0 / (b * per_map) as f64)?;

    // regression-only mode: no contrastive term is built at all, so the
    // reported contrastive part is exactly zero and total == mse
    if lambda == 0.0 {
        let contrastive = g.scalar(0.0)?;
        return Ok(AlignmentLossParts {
            mse,
            contrastive,
            total: mse,
            lambda,
        });
    }

    let mut sims = Vec::with_capacity(b * b);
    for &a in aligned {
        for &t in teacher {
            sims.push(pooled_cosine(g, a, t, sim_mode)?);
        }
    }
    let sims = g.stack_scalars(&sims)?;
    let sims = g.reshape(sims, &[b, b])?;
    let contrastive = infonce_over_sims(g, sims, tau)?;

    let weighted = g.scale(contrastive, lambda)?;
    let total = g.add(mse, weighted)?;
    Ok(AlignmentLossParts {
        mse,
        contrastive,
        total,
        lambda,
    })
}

/// Binary export of one aligned feature map: ASCII "M D" header line, then
/// row-major little-endian f32 values.
pub fn dump_aligned_bytes(values: &[f64], m: usize, d: usize) -> Vec<u8> {
    debug_assert_eq!(values.len(), m * d);
    let mut out = format!("{m} {d}\n").into_bytes();
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::name_rng;
    use rand::Rng;

    pub fn random_val_params(cfg: &ValConfig, prefix: &str, model_dim: usize, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, shape) in cfg.param_shapes(prefix, model_dim) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("log_tau") {
                vec![TAU_INIT.ln()]
            } else if name.ends_with(".g") {
                vec![1.0; n]
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                vec![0.0; n]
            } else {
                let mut rng = name_rng(seed, &name);
                (0..n).map(|_| rng.gen_range(-0.25..0.25)).collect()
            };
            ps.insert(&name, &shape, data, true);
        }
        ps
    }

    fn tiny_cfg(layers: usize) -> ValConfig {
        ValConfig {
            queries: 4,
            feat_dim: 6,
            layers,
            heads: 1,
            ffn_dim: 12,
        }
    }

    fn random_mtq(g: &mut Graph, q: usize, d: usize, seed: u64) -> TensorId {
        let mut rng = name_rng(seed, "mtq");
        let data: Vec<f64> = (0..q * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        g.constant(data, &[q, d]).unwrap()
    }

    #[test]
    fn zero_blocks_return_the_query_bank_exactly() {
        let cfg = tiny_cfg(0);
        let ps = random_val_params(&cfg, "val.t", 8, 1);
        let mut g = Graph::new();
        let mtq = random_mtq(&mut g, 3, 8, 2);
        let mut reg = Loaded::new();
        let out = val_forward(&mut g, &ps, &mut reg, &cfg, "val.t", mtq).unwrap();
        let vaq = &ps.get("val.t.vaq").unwrap().data;
        for (a, b) in g.value(out).iter().zip(vaq) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn single_key_attention_shifts_all_queries_identically() {
        let cfg = tiny_cfg(1);
        let mut ps = random_val_params(&cfg, "val.t", 8, 3);
        // silence the FFN so the block output is bank + attention only
        for name in ["val.t.l0.ffn.w1", "val.t.l0.ffn.w2"] {
            ps.get_mut(name).unwrap().data.fill(0.0);
        }
        let mut g = Graph::new();
        let mtq = random_mtq(&mut g, 1, 8, 4);
        let mut reg = Loaded::new();
        let out = val_forward(&mut g, &ps, &mut reg, &cfg, "val.t", mtq).unwrap();
        let vaq = &ps.get("val.t.vaq").unwrap().data;
        let dd = cfg.feat_dim;
        let delta: Vec<f64> = (0..dd).map(|j| g.value(out)[j] - vaq[j]).collect();
        for row in 1..cfg.queries {
            for j in 0..dd {
                let got = g.value(out)[row * dd + j] - vaq[row * dd + j];
                assert!((got - delta[j]).abs() < 1e-12);
            }
        }
        assert!(delta.iter().any(|&v| v.abs() > 1e-9));
    }

    #[test]
    fn output_shape_ignores_key_count() {
        let cfg = ValConfig {
            queries: 16,
            feat_dim: 24,
            layers: 2,
            heads: 2,
            ffn_dim: 32,
        };
        let ps = random_val_params(&cfg, "val.t", 10, 5);
        for q in [3usize, 5] {
            let mut g = Graph::new();
            let mtq = random_mtq(&mut g, q, 10, 6);
            let mut reg = Loaded::new();
            let out = val_forward(&mut g, &ps, &mut reg, &cfg, "val.t", mtq).unwrap();
            assert_eq!(g.shape(out), &[16, 24]);
        }
    }

    #[test]
    fn cosine_of_self_negation_and_orthogonal() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.5, 1.0, -0.25, 0.75], &[2, 2]).unwrap();
        let na = g.scale(a, -1.0).unwrap();
        let same = pooled_cosine(&mut g, a, a, SimMode::Pooled).unwrap();
        assert!((g.value(same)[0] - 1.0).abs() < 1e-12);
        let opposite = pooled_cosine(&mut g, a, na, SimMode::Pooled).unwrap();
        assert!((g.value(opposite)[0] + 1.0).abs() < 1e-12);
        // pooled vectors [1, 0] and [0, 1]
        let e1 = g.constant(vec![1.0, 0.0], &[1, 2]).unwrap();
        let e2 = g.constant(vec![0.0, 1.0], &[1, 2]).unwrap();
        let ortho = pooled_cosine(&mut g, e1, e2, SimMode::Pooled).unwrap();
        assert_eq!(g.value(ortho)[0], 0.0);
    }

    #[test]
    fn zero_pooled_norm_is_an_error() {
        let mut g = Graph::new();
        // rows cancel under mean pooling
        let a = g.constant(vec![1.0, -1.0, -1.0, 1.0], &[2, 2]).unwrap();
        let b = g.constant(vec![1.0, 1.0, 1.0, 1.0], &[2, 2]).unwrap();
        assert!(matches!(
            pooled_cosine(&mut g, a, b, SimMode::Pooled),
            Err(Error::ZeroNorm)
        ));
        // flat mode sees the nonzero entries
        assert!(pooled_cosine(&mut g, a, b, SimMode::Flat).is_ok());
    }

    #[test]
    fn perfect_alignment_gives_exactly_zero_loss() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.3, -0.8, 0.1, 0.6], &[2, 2]).unwrap();
        let tau = g.constant(vec![TAU_INIT], &[1]).unwrap();
        let parts = loss_task(&mut g, &[a], &[a], tau, LAMBDA_DEFAULT, SimMode::Pooled).unwrap();
        assert_eq!(g.value(parts.mse)[0], 0.0);
        assert_eq!(g.value(parts.contrastive)[0], 0.0);
        assert_eq!(g.value(parts.total)[0], 0.0);
    }

    #[test]
    fn indistinguishable_pair_gives_ln2_contrastive() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.4, 0.2, -0.5, 0.9], &[2, 2]).unwrap();
        let t = g.constant(vec![0.1, -0.3, 0.8, 0.2], &[2, 2]).unwrap();
        let tau = g.constant(vec![0.5], &[1]).unwrap();
        let parts =
            loss_task(&mut g, &[a, a], &[t, t], tau, LAMBDA_DEFAULT, SimMode::Pooled).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(parts.contrastive)[0] - ln2).abs() < 1e-9);
        let recomputed = g.value(parts.mse)[0] + LAMBDA_DEFAULT * g.value(parts.contrastive)[0];
        assert!((g.value(parts.total)[0] - recomputed).abs() < 1e-12);
    }

    // plain scalar loops, no tensor ops: the reference the graph must match
    fn oracle_parts(
        aligned: &[Vec<f64>],
        teacher: &[Vec<f64>],
        rows: usize,
        cols: usize,
        tau: f64,
        lambda: f64,
    ) -> (f64, f64, f64) {
        let b = aligned.len();
        let mut mse = 0.0;
        for i in 0..b {
            for e in 0..rows * cols {
                let d = aligned[i][e] - teacher[i][e];
                mse += d * d;
            }
        }
        mse /= (b * rows * cols) as f64;

        let pool = |m: &Vec<f64>| -> Vec<f64> {
            let mut p = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    p[c] += m[r * cols + c];
                }
            }
            for v in p.iter_mut() {
                *v /= rows as f64;
            }
            p
        };
        let cos = |x: &[f64], y: &[f64]| -> f64 {
            let mut dot = 0.0;
            let mut nx = 0.0;
            let mut ny = 0.0;
            for i in 0..x.len() {
                dot += x[i] * y[i];
                nx += x[i] * x[i];
                ny += y[i] * y[i];
            }
            dot / (nx.sqrt() * ny.sqrt())
        };
        let mut nce = 0.0;
        for i in 0..b {
            let pi = pool(&aligned[i]);
            let num = (cos(&pi, &pool(&teacher[i])) / tau).exp();
            let mut den = 0.0;
            for j in 0..b {
                den += (cos(&pi, &pool(&teacher[j])) / tau).exp();
            }
            nce += -(num / den).ln();
        }
        nce /= b as f64;
        (mse, nce, mse + lambda * nce)
    }

    #[test]
    fn graph_loss_matches_scalar_oracle() {
        let rows = 3;
        let cols = 4;
        let mut rng = name_rng(71, "oracle");
        for case in 0..6 {
            let b = 3;
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let aligned: Vec<Vec<f64>> = (0..b).map(|_| mk(&mut rng)).collect();
            let teacher: Vec<Vec<f64>> = (0..b).map(|_| mk(&mut rng)).collect();
            let (mse_o, nce_o, total_o) =
                oracle_parts(&aligned, &teacher, rows, cols, 0.5, LAMBDA_DEFAULT);

            let mut g = Graph::new();
            let a_ids: Vec<TensorId> = aligned
                .iter()
                .map(|v| g.constant(v.clone(), &[rows, cols]).unwrap())
                .collect();
            let t_ids: Vec<TensorId> = teacher
                .iter()
                .map(|v| g.constant(v.clone(), &[rows, cols]).unwrap())
                .collect();
            let tau = g.constant(vec![0.5], &[1]).unwrap();
            let parts =
                loss_task(&mut g, &a_ids, &t_ids, tau, LAMBDA_DEFAULT, SimMode::Pooled).unwrap();
            assert!((g.value(parts.mse)[0] - mse_o).abs() < 1e-10, "case {case}");
            assert!(
                (g.value(parts.contrastive)[0] - nce_o).abs() < 1e-10,
                "case {case}"
            );
            assert!(
                (g.value(parts.total)[0] - total_o).abs() < 1e-10,
                "case {case}"
            );
        }
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let mut g = Graph::new();
        let sims = g.constant(vec![0.1, 0.2, 0.3, 0.4], &[2, 2]).unwrap();
        let tau = g.constant(vec![0.0], &[1]).unwrap();
        assert!(matches!(
            infonce_over_sims(&mut g, sims, tau),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn high_temperature_flattens_to_log_batch() {
        let b = 4;
        let lnb = (b as f64).ln();
        for seed in [101u64, 102, 103] {
            let mut rng = name_rng(seed, "sims");
            let mut g = Graph::new();
            let data: Vec<f64> = (0..b * b).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sims = g.constant(data, &[b, b]).unwrap();
            let tau = g.constant(vec![TAU_MAX], &[1]).unwrap();
            let nce = infonce_over_sims(&mut g, sims, tau).unwrap();
            let rel = (g.value(nce)[0] - lnb).abs() / lnb;
            assert!(rel < 0.02, "seed {seed}: rel {rel}");
        }
    }

    #[test]
    fn batch_permutation_leaves_loss_parts_unchanged() {
        let rows = 2;
        let cols = 3;
        let b = 4;
        let mut rng = name_rng(77, "perm");
        let mats: Vec<Vec<f64>> = (0..2 * b)
            .map(|_| (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let eval = |order: &[usize]| -> (f64, f64) {
            let mut g = Graph::new();
            let a: Vec<TensorId> = order
                .iter()
                .map(|&i| g.constant(mats[i].clone(), &[rows, cols]).unwrap())
                .collect();
            let t: Vec<TensorId> = order
                .iter()
                .map(|&i| g.constant(mats[b + i].clone(), &[rows, cols]).unwrap())
                .collect();
            let tau = g.constant(vec![0.3], &[1]).unwrap();
            let parts = loss_task(&mut g, &a, &t, tau, LAMBDA_DEFAULT, SimMode::Pooled).unwrap();
            (g.value(parts.mse)[0], g.value(parts.contrastive)[0])
        };
        let (m1, c1) = eval(&[0, 1, 2, 3]);
        let (m2, c2) = eval(&[2, 0, 3, 1]);
        assert!((m1 - m2).abs() < 1e-12);
        assert!((c1 - c2).abs() < 1e-12);
    }

    #[test]
    fn descent_on_alignment_params_drives_mse_down() {
        // small feature maps keep the element-mean MSE gradient comparable to
        // the contrastive gradient, so the squared error itself descends
        let cfg = ValConfig {
            queries: 2,
            feat_dim: 4,
            layers: 1,
            heads: 1,
            ffn_dim: 8,
        };
        let d = 8;
        for seed in 1u64..=5 {
            let mut ps = random_val_params(&cfg, "val.t", d, seed * 10);
            // a soft starting temperature keeps the contrastive surface
            // smooth enough for fixed-step descent; the production init is
            // sharper and relies on an adaptive optimizer
            ps.get_mut("val.t.log_tau").unwrap().data[0] = 0.0;
            let mut mtq_rng = name_rng(seed, "mtq-batch");
            let batch = 3;
            let mtqs: Vec<Vec<f64>> = (0..batch)
                .map(|_| (0..3 * d).map(|_| mtq_rng.gen_range(-1.0..1.0)).collect())
                .collect();
            // teachers with separated pooled directions: both loss terms then
            // pull each sample the same way, which is what the invariant needs
            let teachers: Vec<Vec<f64>> = (0..batch)
                .map(|i| {
                    (0..cfg.queries * cfg.feat_dim)
                        .map(|e| {
                            let axis = if e % cfg.feat_dim == i { 1.2 } else { 0.0 };
                            axis + mtq_rng.gen_range(-0.3..0.3)
                        })
                        .collect()
                })
                .collect();
            let mut mse_trace = Vec::new();
            for _step in 0..100 {
                let mut g = Graph::new();
                let mut reg = Loaded::new();
                let mut aligned = Vec::new();
                let mut teach = Vec::new();
                for i in 0..batch {
                    let mtq = g.constant(mtqs[i].clone(), &[3, d]).unwrap();
                    aligned.push(val_forward(&mut g, &ps, &mut reg, &cfg, "val.t", mtq).unwrap());
                    teach.push(
                        g.constant(teachers[i].clone(), &[cfg.queries, cfg.feat_dim])
                            .unwrap(),
                    );
                }
                let tau = temperature(&mut g, &ps, &mut reg, "val.t").unwrap();
                let parts =
                    loss_task(&mut g, &aligned, &teach, tau, LAMBDA_DEFAULT, SimMode::Pooled)
                        .unwrap();
                mse_trace.push(g.value(parts.mse)[0]);
                let grads = g.backward(parts.total).unwrap();
                let by_name = reg.collect_grads(&g, &grads);
                for (name, gr) in by_name {
                    let p = ps.get_mut(&name).unwrap();
                    for (pv, gv) in p.data.iter_mut().zip(gr) {
                        *pv -= 0.02 * gv;
                    }
                }
            }
            assert!(
                mse_trace[99] < mse_trace[0],
                "seed {seed}: {} -> {}",
                mse_trace[0],
                mse_trace[99]
            );
            for t in 5..99 {
                assert!(
                    mse_trace[t + 1] <= mse_trace[t] + 1e-6,
                    "seed {seed} step {t}: {} -> {}",
                    mse_trace[t],
                    mse_trace[t + 1]
                );
            }
        }
    }

    #[test]
    fn binary_dump_roundtrips() {
        let values = vec![1.5, -2.25, 0.125, 3.0, -0.5, 7.75];
        let bytes = dump_aligned_bytes(&values, 2, 3);
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[..newline], b"2 3");
        let body = &bytes[newline + 1..];
        assert_eq!(body.len(), 6 * 4);
        for (i, &v) in values.iter().enumerate() {
            let mut raw = [0u8; 4];
            raw.copy_from_slice(&body[i * 4..i * 4 + 4]);
            assert_eq!(f32::from_le_bytes(raw), v as f32);
        }
    }
}
