//! Test-time adaptation: prompt-only optimisation of cross-pair consistency
//! over view triplets that share a reference image.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::net::{forward_pair, BoundPrompts, BoundWeights, ModelConfig, PromptSet, Weights};
use crate::pretrain::{adam_step, AdamConfig, AdamState};

/// Upper bound on triplets per scene; larger schedules are subsampled.
pub const DEFAULT_TRIPLET_CAP: usize = 165;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub reference: usize,
    pub src1: usize,
    pub src2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Mean over pixels of the Euclidean distance.
    MeanL2,
    /// Sum over pixels of the Euclidean distance.
    SumL2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TttConfig {
    pub triplet_cap: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub norm_mode: NormMode,
}

impl Default for TttConfig {
    fn default() -> Self {
        let adam = AdamConfig::with_lr(1e-5);
        Self {
            triplet_cap: DEFAULT_TRIPLET_CAP,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            epochs: 1,
            seed: 0,
            norm_mode: NormMode::MeanL2,
        }
    }
}

impl TttConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.triplet_cap == 0 || self.epochs == 0 {
            return Err(Error::Input("triplet_cap and epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// All `n³` ordered triplets when that fits under `cap`, otherwise `cap`
/// of them drawn uniformly without replacement.
pub fn enumerate_triplets(n_views: usize, cap: usize, seed: u64) -> Vec<Triplet> {
    let decode = |i: usize| Triplet {
        reference: i / (n_views * n_views),
        src1: (i / n_views) % n_views,
        src2: i % n_views,
    };
    let total = n_views.pow(3);
    if total <= cap {
        return (0..total).map(decode).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, total, cap)
        .into_iter()
        .map(decode)
        .collect()
}

/// Distance between two reference-frame pointmaps (`HW × 3` each).
pub fn consistency_loss<'t>(x1: Var<'t>, x2: Var<'t>, mode: NormMode) -> Result<Var<'t>> {
    if x1.shape() != x2.shape() || x1.shape().len() != 2 || x1.shape()[1] != 3 {
        return Err(Error::Input(format!(
            "consistency loss needs two equal N×3 pointmaps, got {:?} and {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    let d = x1.sub(x2)?.norm_last();
    Ok(match mode {
        NormMode::MeanL2 => d.mean(),
        NormMode::SumL2 => d.sum(),
    })
}

/// Builds the triplet loss on `tape`: reference-branch outputs of
/// `(ref, src1)` and `(ref, src2)` compared in the reference frame.
pub fn triplet_loss<'t>(
    model: &ModelConfig,
    w: &BoundWeights<'t>,
    prompts: &BoundPrompts<'t>,
    images: &[Vec<f64>],
    t: Triplet,
    mode: NormMode,
) -> Result<Var<'t>> {
    let a = forward_pair(model, w, Some(prompts), &images[t.reference], &images[t.src1])?;
    let b = forward_pair(model, w, Some(prompts), &images[t.reference], &images[t.src2])?;
    consistency_loss(a.reference.points, b.reference.points, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "ref")]
    pub reference: usize,
    pub src1: usize,
    pub src2: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptReport {
    pub prompts: PromptSet,
    pub triplets: Vec<Triplet>,
    pub trace: Vec<TraceRow>,
}

/// Tunes `prompts` against the frozen `weights` on one scene's images. One
/// Adam step per triplet, one pass over the schedule per epoch. Triplets with
/// `src1 == src2` compare a forward pass with itself and are recorded as zero
/// loss without an update.
pub fn adapt(
    model: &ModelConfig,
    weights: &Weights,
    prompts: PromptSet,
    images: &[Vec<f64>],
    cfg: &TttConfig,
    mut on_step: impl FnMut(&TraceRow),
) -> Result<AdaptReport> {
    cfg.validate()?;
    model.validate()?;
    prompts.validate(model)?;
    if images.is_empty() {
        return Err(Error::Input("adaptation needs at least one view".into()));
    }
    let expected = model.num_pixels() * 3;
    if let Some(i) = images.iter().position(|im| im.len() != expected) {
        return Err(Error::Input(format!(
            "view {i} has {} values, model expects {expected}",
            images[i].len()
        )));
    }
    let snapshot = weights.clone();
    let adam = cfg.adam();
    let triplets = enumerate_triplets(images.len(), cfg.triplet_cap, cfg.seed);
    let mut prompts = prompts;
    let mut state = AdamState::default();
    let mut trace = Vec::with_capacity(triplets.len() * cfg.epochs);
    for epoch in 0..cfg.epochs {
        for (step, &t) in triplets.iter().enumerate() {
            let loss = if t.src1 == t.src2 {
                0.0
            } else {
                let tape = Tape::new();
                let w = BoundWeights::bind(&tape, weights, false);
                let p = BoundPrompts::bind(&tape, &prompts, true);
                let loss = triplet_loss(model, &w, &p, images, t, cfg.norm_mode)?;
                let value = loss.value().item();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite consistency loss at epoch {epoch}, triplet ({}, {}, {})",
                        t.reference, t.src1, t.src2
                    )));
                }
                tape.backward(loss)?;
                let grads: Vec<_> = p.tokens.iter().map(|v| v.grad().expect("prompts require grad")).collect();
                adam_step(prompts.tokens.iter_mut(), &grads, &mut state, &adam)?;
                value
            };
            let row = TraceRow {
                epoch,
                step,
                reference: t.reference,
                src1: t.src1,
                src2: t.src2,
                loss,
            };
            on_step(&row);
            trace.push(row);
        }
    }
    let changed = snapshot.changed_tensors(weights);
    if !changed.is_empty() {
        return Err(Error::Contract(format!(
            "backbone tensors changed during adaptation: {}",
            changed.join(", ")
        )));
    }
    Ok(AdaptReport {
        prompts,
        triplets,
        trace,
    })
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    crate::table::write_csv(path, trace)
}

#[cfg(test)]
mod tests;
