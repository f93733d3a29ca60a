//! Frozen synthetic stand-ins for the vision encoder and the per-task
//! feature teachers, plus the toy dataset whose answers are exact functions
//! of teacher features.
//!
//! Everything here is deterministic given the run seed: encoder and teacher
//! weights are drawn once per parameter name, stored untrainable, and a full
//! training run must leave them bit-identical.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{name_rng, Loaded, ParamSet};
use crate::tensor::{Graph, TensorId};

/// Answer tokens are the first ids; a few template tokens follow. The rest
/// of the vocabulary is headroom.
pub const ANSWER_CLASSES: usize = 4;
pub const TEMPLATE_BASE: usize = ANSWER_CLASSES;
pub const TEMPLATE_COUNT: usize = 3;
pub const FILLER_A: usize = TEMPLATE_BASE + TEMPLATE_COUNT;
pub const FILLER_B: usize = FILLER_A + 1;
pub const VOCAB_FLOOR: usize = FILLER_B + 1;
/// every sample carries a three-token prompt and a one-token answer
pub const PROMPT_LEN: usize = 3;
pub const ANSWER_LEN: usize = 1;
pub const TEXT_LEN: usize = PROMPT_LEN + ANSWER_LEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

/// 24x24 single-channel canvas cut into a 4x4 grid of 6-pixel patches, the
/// smallest layout with an even split per quadrant.
impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            height: 24,
            width: 24,
            channels: 1,
            patch: 6,
        }
    }
}

impl ImageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.patch == 0 {
            return Err(Error::Config("image dims must be positive".into()));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} does not tile {}x{}",
                self.patch, self.height, self.width
            )));
        }
        // quadrant labels need an even patch grid
        if (self.height / self.patch) % 2 != 0 || (self.width / self.patch) % 2 != 0 {
            return Err(Error::Config(format!(
                "patch grid {}x{} not divisible into quadrants",
                self.height / self.patch,
                self.width / self.patch
            )));
        }
        Ok(())
    }

    pub fn patch_rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn patch_cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.patch_rows() * self.patch_cols()
    }

    /// flattened pixel count of one patch
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// quadrant (0..4) of patch index `k`, row-major patch grid
    pub fn patch_quadrant(&self, k: usize) -> usize {
        let pr = k / self.patch_cols();
        let pc = k % self.patch_cols();
        let top = pr < self.patch_rows() / 2;
        let left = pc < self.patch_cols() / 2;
        match (top, left) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub name: String,
    /// token count M of the teacher feature map
    pub tokens: usize,
    /// feature width D of the teacher feature map
    pub feat_dim: usize,
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.feat_dim == 0 {
            return Err(Error::Config(format!("teacher {} has empty shape", self.name)));
        }
        if self.tokens % ANSWER_CLASSES != 0 {
            return Err(Error::Config(format!(
                "teacher {} tokens {} not divisible into {} banks",
                self.name, self.tokens, ANSWER_CLASSES
            )));
        }
        Ok(())
    }
}

/// Default heterogeneous teacher bank: shapes intentionally differ per task.
pub fn default_teacher_specs() -> Vec<TeacherSpec> {
    [("quad", 16, 24), ("fine", 36, 16), ("wide", 16, 32), ("deep", 64, 20)]
        .into_iter()
        .map(|(name, tokens, feat_dim)| TeacherSpec {
            name: name.into(),
            tokens,
            feat_dim,
        })
        .collect()
}

fn flat_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

/// Row-major K×patch_dim matrix of flattened patches.
pub fn extract_patches(cfg: &ImageConfig, image: &[f64]) -> Result<Vec<f64>> {
    if image.len() != cfg.pixel_count() {
        return Err(Error::ShapeMismatch {
            op: "extract_patches",
            detail: format!("{} pixels, config wants {}", image.len(), cfg.pixel_count()),
        });
    }
    let p = cfg.patch;
    let c = cfg.channels;
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for pr in 0..cfg.patch_rows() {
        for pc in 0..cfg.patch_cols() {
            for dy in 0..p {
                for dx in 0..p {
                    let y = pr * p + dy;
                    let x = pc * p + dx;
                    for ch in 0..c {
                        out.push(image[(y * cfg.width + x) * c + ch]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Register the frozen encoder and teacher weights. Encoder weights live
/// under "enc.", each teacher under "teacher.<name>.". All untrainable.
pub fn init_frozen_params(
    ps: &mut ParamSet,
    cfg: &ImageConfig,
    encoder_dim: usize,
    specs: &[TeacherSpec],
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let pd = cfg.patch_dim();
    let k = cfg.num_patches();

    let mut rng = name_rng(seed, "enc.w");
    let data: Vec<f64> = (0..pd * encoder_dim)
        .map(|_| rng.gen_range(-0.3..0.3))
        .collect();
    ps.insert("enc.w", &[pd, encoder_dim], data, false);
    ps.insert("enc.b", &[encoder_dim], vec![0.0; encoder_dim], false);

    for spec in specs {
        spec.validate()?;
        let w1_name = format!("teacher.{}.w1", spec.name);
        let mut rng = name_rng(seed, &w1_name);
        let w1: Vec<f64> = (0..pd * spec.feat_dim)
            .map(|_| rng.gen_range(-0.35..0.35))
            .collect();
        ps.insert(&w1_name, &[pd, spec.feat_dim], w1, false);

        // mixing rows pool mostly from one quadrant's patches, so bank
        // energy in the output tracks quadrant brightness. All four banks
        // share the same sampled weight templates, each rotated onto its own
        // quadrant: bank energies are then exchangeable across quadrants and
        // the label argmax cannot favor a bank by sampled weight scale.
        let mix_name = format!("teacher.{}.mix", spec.name);
        let mut rng = name_rng(seed, &mix_name);
        let bank = spec.tokens / ANSWER_CLASSES;
        let per_quadrant = k / ANSWER_CLASSES;
        let mut by_quadrant = vec![Vec::new(); ANSWER_CLASSES];
        for col in 0..k {
            by_quadrant[cfg.patch_quadrant(col)].push(col);
        }
        let mut mix = vec![0.0; spec.tokens * k];
        for j in 0..bank {
            let own: Vec<f64> = (0..per_quadrant).map(|_| rng.gen_range(0.5..1.0)).collect();
            let other: Vec<f64> = (0..k - per_quadrant)
                .map(|_| rng.gen_range(-0.15..0.15))
                .collect();
            for b in 0..ANSWER_CLASSES {
                let row = (b * bank + j) * k;
                for (w, &col) in own.iter().zip(&by_quadrant[b]) {
                    mix[row + col] = *w;
                }
                let mut rest = other.iter();
                for q in 1..ANSWER_CLASSES {
                    for &col in &by_quadrant[(b + q) % ANSWER_CLASSES] {
                        mix[row + col] = *rest.next().expect("template covers all columns");
                    }
                }
            }
        }
        ps.insert(&mix_name, &[spec.tokens, k], mix, false);
    }
    Ok(())
}

/// Frozen patch projection of one image: K×encoder_dim features, outside any
/// graph (nothing upstream of the projector ever needs gradients).
pub fn encode_image(ps: &ParamSet, cfg: &ImageConfig, image: &[f64]) -> Result<Vec<f64>> {
    let w = ps.get("enc.w")?;
    let b = ps.get("enc.b")?;
    let patches = extract_patches(cfg, image)?;
    let k = cfg.num_patches();
    let (pd, dv) = (w.shape[0], w.shape[1]);
    if pd != cfg.patch_dim() {
        return Err(Error::ShapeMismatch {
            op: "encode_image",
            detail: format!("encoder input {} vs patch dim {}", pd, cfg.patch_dim()),
        });
    }
    let mut out = flat_matmul(&patches, &w.data, k, pd, dv);
    for row in 0..k {
        for j in 0..dv {
            out[row * dv + j] += b.data[j];
        }
    }
    Ok(out)
}

/// Trainable projection of encoder features into the decoder width.
pub fn project(
    g: &mut Graph,
    ps: &ParamSet,
    reg: &mut Loaded,
    features: TensorId,
) -> Result<TensorId> {
    let w = reg.get(g, ps, "proj.w")?;
    let b = reg.get(g, ps, "proj.b")?;
    let projected = g.matmul(features, w)?;
    g.add_row(projected, b)
}

/// Frozen teacher features of one image: patch projection, tanh, then the
/// quadrant-structured mixing. M×D row-major.
pub fn teacher_features(
    ps: &ParamSet,
    cfg: &ImageConfig,
    spec: &TeacherSpec,
    image: &[f64],
) -> Result<Vec<f64>> {
    let w1 = ps.get(&format!("teacher.{}.w1", spec.name))?;
    let mix = ps.get(&format!("teacher.{}.mix", spec.name))?;
    let patches = extract_patches(cfg, image)?;
    let k = cfg.num_patches();
    let mut hidden = flat_matmul(&patches, &w1.data, k, cfg.patch_dim(), spec.feat_dim);
    for v in hidden.iter_mut() {
        *v = v.tanh();
    }
    Ok(flat_matmul(&mix.data, &hidden, spec.tokens, k, spec.feat_dim))
}

/// Label statistic: the token bank (¼ of the rows each) with the largest
/// total squared activation. Recomputable from the final features alone.
pub fn quadrant_label(features: &[f64], tokens: usize, feat_dim: usize) -> usize {
    let bank = tokens / ANSWER_CLASSES;
    let mut best = 0;
    let mut best_energy = f64::NEG_INFINITY;
    for b in 0..ANSWER_CLASSES {
        let mut energy = 0.0;
        for m in b * bank..(b + 1) * bank {
            for d in 0..feat_dim {
                let v = features[m * feat_dim + d];
                energy += v * v;
            }
        }
        if energy > best_energy {
            best_energy = energy;
            best = b;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Sample {
    pub fn text_ids(&self) -> Vec<usize> {
        let mut ids = self.prompt.clone();
        ids.extend_from_slice(&self.answer);
        ids
    }

    /// text offset where the answer begins
    pub fn answer_start(&self) -> usize {
        self.prompt.len()
    }
}

/// Quadrant-brightness images with per-pixel noise; the answer token is the
/// linked teacher's label statistic, so answers are exact functions of what
/// that teacher sees.
pub fn generate_dataset(
    ps: &ParamSet,
    cfg: &ImageConfig,
    specs: &[TeacherSpec],
    task_link: &str,
    seed: u64,
    count: usize,
) -> Result<Vec<Sample>> {
    let spec = specs
        .iter()
        .find(|s| s.name == task_link)
        .ok_or_else(|| Error::UnknownTask(task_link.to_string()))?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = name_rng(seed, &format!("sample.{i}"));
        let bases: Vec<f64> = (0..4).map(|_| rng.gen_range(0.2..0.8)).collect();
        let mut image = Vec::with_capacity(cfg.pixel_count());
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let top = y < cfg.height / 2;
                let left = x < cfg.width / 2;
                let q = match (top, left) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
                for _ in 0..cfg.channels {
                    image.push(bases[q] + rng.gen_range(-0.1..0.1));
                }
            }
        }
        let features = teacher_features(ps, cfg, spec, &image)?;
        let label = quadrant_label(&features, spec.tokens, spec.feat_dim);
        let template = rng.gen_range(0..TEMPLATE_COUNT);
        samples.push(Sample {
            image,
            prompt: vec![TEMPLATE_BASE + template, FILLER_A, FILLER_B],
            answer: vec![label],
        });
    }
    Ok(samples)
}

pub fn image_hash(image: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in image {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..12].iter().map(|b| format!("{b:02x}")).collect()
}

/// One header line, then one record per line: image hash, prompt ids,
/// answer ids. Fixed field counts come from the header.
pub fn serialize_dataset(
    samples: &[Sample],
    cfg: &ImageConfig,
    task_link: &str,
    seed: u64,
) -> String {
    let prompt_len = samples.first().map_or(0, |s| s.prompt.len());
    let answer_len = samples.first().map_or(0, |s| s.answer.len());
    let mut out = format!(
        "# seed={} count={} task_link={} prompt_len={} answer_len={} image={}x{}x{} patch={}\n",
        seed,
        samples.len(),
        task_link,
        prompt_len,
        answer_len,
        cfg.height,
        cfg.width,
        cfg.channels,
        cfg.patch
    );
    for s in samples {
        out.push_str(&image_hash(&s.image));
        for &t in s.prompt.iter().chain(&s.answer) {
            out.push(' ');
            out.push_str(&t.to_string());
        }
        out.push('\n');
    }
    out
}
