use std::collections::HashMap;

use super::config::{ModelConfig, PromptMode};
use super::params::{Branch, PromptSet, Weights};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::PointMap;

/// Upper clamp on confidence logits; keeps `1 + exp(c)` finite.
pub const CONF_LOGIT_MAX: f64 = 30.0;

/// Weights recorded as leaves on one tape.
pub struct BoundWeights<'t> {
    tape: &'t Tape,
    vars: HashMap<String, Var<'t>>,
}

impl<'t> BoundWeights<'t> {
    pub fn bind(tape: &'t Tape, weights: &Weights, requires_grad: bool) -> Self {
        let vars = weights
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Self { tape, vars }
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("weight {name} not bound"))
    }

    /// Substitutes the leaf for one weight, e.g. to differentiate through a single tensor.
    pub fn replace(&mut self, name: &str, var: Var<'t>) {
        *self
            .vars
            .get_mut(name)
            .unwrap_or_else(|| panic!("weight {name} not bound")) = var;
    }

    pub fn vars(&self) -> &HashMap<String, Var<'t>> {
        &self.vars
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}

/// Prompt groups recorded as leaves on one tape.
pub struct BoundPrompts<'t> {
    pub tokens: Vec<Var<'t>>,
}

impl<'t> BoundPrompts<'t> {
    pub fn bind(tape: &'t Tape, prompts: &PromptSet, requires_grad: bool) -> Self {
        Self {
            tokens: prompts
                .tokens
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Differentiable head output; rows are pixels in row-major image order.
#[derive(Clone, Copy)]
pub struct HeadOutput<'t> {
    /// `HW × 3`
    pub points: Var<'t>,
    /// `HW`, each entry ≥ 1.
    pub confidence: Var<'t>,
}

impl HeadOutput<'_> {
    pub fn to_pointmap(&self, cfg: &ModelConfig) -> PointMap {
        let pts = self.points.value();
        let points = pts.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        PointMap::new(cfg.width, cfg.height, points, self.confidence.value().data().to_vec())
            .expect("head output matches config")
    }
}

#[derive(Clone, Copy)]
pub struct PairOutput<'t> {
    pub reference: HeadOutput<'t>,
    pub source: HeadOutput<'t>,
}

/// Splits an `H × W × 3` image into `N × (p·p·3)` patch rows.
pub fn patchify(cfg: &ModelConfig, image: &[f64]) -> Result<Tensor> {
    let (w, p) = (cfg.width, cfg.patch_size);
    if image.len() != cfg.num_pixels() * 3 {
        return Err(Error::Input(format!(
            "image has {} values, config expects {}×{}×3",
            image.len(),
            cfg.width,
            cfg.height
        )));
    }
    let mut data = Vec::with_capacity(image.len());
    for py in 0..cfg.patches_y() {
        for px in 0..cfg.patches_x() {
            for dy in 0..p {
                let row = (py * p + dy) * w + px * p;
                data.extend_from_slice(&image[row * 3..(row + p) * 3]);
            }
        }
    }
    Ok(Tensor::new([cfg.num_patches(), p * p * 3], data)?)
}

/// Fixed 2-D sinusoidal positions: the first half of the channels encodes the
/// patch column, the second half the row.
pub fn positional_embedding(cfg: &ModelConfig) -> Tensor {
    let d = cfg.embed_dim;
    let quarter = d / 4;
    let mut data = Vec::with_capacity(cfg.num_patches() * d);
    for py in 0..cfg.patches_y() {
        for px in 0..cfg.patches_x() {
            for pos in [px as f64, py as f64] {
                for i in 0..quarter {
                    let freq = 1.0 / 100f64.powf(i as f64 / quarter as f64);
                    data.push((pos * freq).sin());
                }
                for i in 0..quarter {
                    let freq = 1.0 / 100f64.powf(i as f64 / quarter as f64);
                    data.push((pos * freq).cos());
                }
            }
        }
    }
    Tensor::new([cfg.num_patches(), d], data).expect("positional layout")
}

/// Maps row-major pixel index to the row of the reshaped head output.
pub fn pixel_gather_index(cfg: &ModelConfig) -> Vec<usize> {
    let p = cfg.patch_size;
    let mut idx = Vec::with_capacity(cfg.num_pixels());
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let patch = (y / p) * cfg.patches_x() + x / p;
            idx.push(patch * p * p + (y % p) * p + x % p);
        }
    }
    idx
}

fn linear<'t>(w: &BoundWeights<'t>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
    Ok(x.matmul(w.get(&format!("{name}.w")))?
        .add(w.get(&format!("{name}.b")))?)
}

fn norm<'t>(w: &BoundWeights<'t>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
    Ok(x.layer_norm(w.get(&format!("{name}.g")), w.get(&format!("{name}.b")))?)
}

fn mlp<'t>(w: &BoundWeights<'t>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
    let h = linear(w, x, &format!("{name}.fc1"))?.gelu();
    linear(w, h, &format!("{name}.fc2"))
}

/// Scaled dot-product attention over `heads` column groups, then output projection.
fn attend<'t>(
    cfg: &ModelConfig,
    w: &BoundWeights<'t>,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    proj: &str,
) -> Result<Var<'t>> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(1, cols.clone())?;
        let kh = k.slice(1, cols.clone())?;
        let vh = v.slice(1, cols)?;
        let att = qh.matmul(kh.transpose()?)?.scale(scale).softmax();
        heads.push(att.matmul(vh)?);
    }
    linear(w, Var::concat(&heads, 1)?, proj)
}

fn self_attention<'t>(cfg: &ModelConfig, w: &BoundWeights<'t>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
    let d = cfg.embed_dim;
    let qkv = linear(w, x, &format!("{name}.qkv"))?;
    let q = qkv.slice(1, 0..d)?;
    let k = qkv.slice(1, d..2 * d)?;
    let v = qkv.slice(1, 2 * d..3 * d)?;
    attend(cfg, w, q, k, v, &format!("{name}.proj"))
}

fn cross_attention<'t>(
    cfg: &ModelConfig,
    w: &BoundWeights<'t>,
    x: Var<'t>,
    ctx: Var<'t>,
    name: &str,
) -> Result<Var<'t>> {
    let d = cfg.embed_dim;
    let q = linear(w, x, &format!("{name}.q"))?;
    let kv = linear(w, ctx, &format!("{name}.kv"))?;
    let k = kv.slice(1, 0..d)?;
    let v = kv.slice(1, d..2 * d)?;
    attend(cfg, w, q, k, v, &format!("{name}.proj"))
}

fn encoder_layer<'t>(cfg: &ModelConfig, w: &BoundWeights<'t>, x: Var<'t>, i: usize) -> Result<Var<'t>> {
    let p = format!("enc.{i}");
    let h = x.add(self_attention(cfg, w, norm(w, x, &format!("{p}.ln1"))?, &format!("{p}.attn"))?)?;
    Ok(h.add(mlp(w, norm(w, h, &format!("{p}.ln2"))?, &format!("{p}.mlp"))?)?)
}

/// Encodes one image into `N × D` patch tokens.
///
/// With prompts, per-layer mode prepends group `i` at layer `i` and drops the
/// prompt rows from that layer's output; first-layer-only mode prepends once
/// and drops the prompt rows after the last layer. `None` runs the plain
/// encoder.
pub fn encode<'t>(
    cfg: &ModelConfig,
    w: &BoundWeights<'t>,
    prompts: Option<&BoundPrompts<'t>>,
    image: &[f64],
) -> Result<Var<'t>> {
    let tape = w.tape();
    let n = cfg.num_patches();
    let patches = tape.constant(patchify(cfg, image)?);
    let mut x = linear(w, patches, "patch_embed")?.add(tape.constant(positional_embedding(cfg)))?;
    match (prompts, cfg.prompt_mode) {
        (None, _) => {
            for i in 0..cfg.encoder_layers {
                x = encoder_layer(cfg, w, x, i)?;
            }
        }
        (Some(p), PromptMode::PerLayer) => {
            check_prompts(cfg, p)?;
            for i in 0..cfg.encoder_layers {
                let np = p.tokens[i].shape()[0];
                let y = encoder_layer(cfg, w, Var::concat(&[p.tokens[i], x], 0)?, i)?;
                x = y.slice(0, np..np + n)?;
            }
        }
        (Some(p), PromptMode::FirstLayerOnly) => {
            check_prompts(cfg, p)?;
            let np = p.tokens[0].shape()[0];
            x = Var::concat(&[p.tokens[0], x], 0)?;
            for i in 0..cfg.encoder_layers {
                x = encoder_layer(cfg, w, x, i)?;
            }
            x = x.slice(0, np..np + n)?;
        }
    }
    norm(w, x, "enc.norm")
}

fn check_prompts(cfg: &ModelConfig, p: &BoundPrompts<'_>) -> Result<()> {
    if p.tokens.len() != cfg.prompt_groups()
        || p.tokens.iter().any(|t| t.shape() != [cfg.prompt_len, cfg.embed_dim])
    {
        return Err(Error::Input(format!(
            "prompts do not match config ({} groups of {}×{})",
            cfg.prompt_groups(),
            cfg.prompt_len,
            cfg.embed_dim
        )));
    }
    Ok(())
}

fn decoder_block<'t>(
    cfg: &ModelConfig,
    w: &BoundWeights<'t>,
    branch: Branch,
    i: usize,
    x: Var<'t>,
    other: Var<'t>,
) -> Result<Var<'t>> {
    let p = format!("dec.{}.{i}", branch.name());
    let x = x.add(self_attention(cfg, w, norm(w, x, &format!("{p}.ln1"))?, &format!("{p}.self"))?)?;
    let q = norm(w, x, &format!("{p}.ln2"))?;
    let ctx = norm(w, other, &format!("{p}.ln_ctx"))?;
    let x = x.add(cross_attention(cfg, w, q, ctx, &format!("{p}.cross"))?)?;
    Ok(x.add(mlp(w, norm(w, x, &format!("{p}.ln3"))?, &format!("{p}.mlp"))?)?)
}

/// Runs both decoder branches; each block attends to the other branch's
/// previous tokens. Returns `G_0..G_{N_d}` for the reference and source branch.
pub fn decode_pair<'t>(
    cfg: &ModelConfig,
    w: &BoundWeights<'t>,
    f_ref: Var<'t>,
    f_src: Var<'t>,
) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
    if f_ref.shape() != f_src.shape() {
        return Err(Error::Input(format!(
            "decoder inputs differ in shape: {:?} vs {:?}",
            f_ref.shape(),
            f_src.shape()
        )));
    }
    let mut g_ref = vec![f_ref];
    let mut g_src = vec![f_src];
    for i in 0..cfg.decoder_layers {
        let (r, s) = (g_ref[i], g_src[i]);
        g_ref.push(decoder_block(cfg, w, Branch::Ref, i, r, s)?);
        g_src.push(decoder_block(cfg, w, Branch::Src, i, s, r)?);
    }
    Ok((g_ref, g_src))
}

/// Linear head over the concatenated decoder tokens: per patch, `p²` pixels of
/// three coordinates and a confidence logit, with confidence `1 + exp(c)`.
pub fn head<'t>(cfg: &ModelConfig, w: &BoundWeights<'t>, branch: Branch, tokens: &[Var<'t>]) -> Result<HeadOutput<'t>> {
    if tokens.len() != cfg.decoder_layers + 1 {
        return Err(Error::Input(format!(
            "head needs {} token sets, got {}",
            cfg.decoder_layers + 1,
            tokens.len()
        )));
    }
    let hw = cfg.num_pixels();
    let feats = Var::concat(tokens, 1)?;
    let raw = linear(w, feats, &format!("head.{}", branch.name()))?
        .reshape([hw, 4])?
        .gather_rows(&pixel_gather_index(cfg))?;
    let points = raw.slice(1, 0..3)?;
    let confidence = raw
        .slice(1, 3..4)?
        .reshape([hw])?
        .clamp(f64::NEG_INFINITY, CONF_LOGIT_MAX)
        .exp()
        .add_scalar(1.0);
    Ok(HeadOutput { points, confidence })
}

/// Full pair forward on a tape: encode both images, decode, run both heads.
pub fn forward_pair<'t>(
    cfg: &ModelConfig,
    w: &BoundWeights<'t>,
    prompts: Option<&BoundPrompts<'t>>,
    image_ref: &[f64],
    image_src: &[f64],
) -> Result<PairOutput<'t>> {
    if image_ref.len() != image_src.len() {
        return Err(Error::Input("pair images differ in size".into()));
    }
    let f_ref = encode(cfg, w, prompts, image_ref)?;
    let f_src = encode(cfg, w, prompts, image_src)?;
    let (g_ref, g_src) = decode_pair(cfg, w, f_ref, f_src)?;
    Ok(PairOutput {
        reference: head(cfg, w, Branch::Ref, &g_ref)?,
        source: head(cfg, w, Branch::Src, &g_src)?,
    })
}

/// Gradient-free pair inference; both pointmaps are in the reference camera frame.
pub fn infer_pair(
    cfg: &ModelConfig,
    weights: &Weights,
    prompts: Option<&PromptSet>,
    image_ref: &[f64],
    image_src: &[f64],
) -> Result<(PointMap, PointMap)> {
    let tape = Tape::new();
    let w = BoundWeights::bind(&tape, weights, false);
    let p = prompts.map(|p| BoundPrompts::bind(&tape, p, false));
    let out = forward_pair(cfg, &w, p.as_ref(), image_ref, image_src)?;
    Ok((out.reference.to_pointmap(cfg), out.source.to_pointmap(cfg)))
}
