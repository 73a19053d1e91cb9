//! Supervised pretraining of the pair network on synthetic scenes.

mod adam;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::PointMap;
use crate::net::{forward_pair, load_checkpoint, save_checkpoint, BoundWeights, HeadOutput, ModelConfig, Weights};
use crate::scene::SceneBundle;

pub const DEFAULT_ALPHA: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the `-log C` confidence regulariser.
    pub alpha: f64,
    pub seed: u64,
    /// A warning is raised when the mean loss of the final steps stays above this.
    pub loss_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::with_lr(1e-4);
        Self {
            steps: 20_000,
            batch_pairs: 8,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            loss_threshold: 0.5,
        }
    }
}

impl TrainConfig {
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
        if self.batch_pairs == 0 {
            return Err(Error::Input("batch_pairs must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Input(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Confidence-weighted regression: mean over pixels of `C·‖x − x̄‖/z̄ − α·log C`.
pub fn regression_loss<'t>(
    points: Var<'t>,
    confidence: Var<'t>,
    gt: &PointMap,
    z_mean: f64,
    alpha: f64,
) -> Result<Var<'t>> {
    let n = gt.len();
    if points.shape() != [n, 3] || confidence.shape() != [n] {
        return Err(Error::Input(format!(
            "prediction shapes {:?}/{:?} do not match {n} ground-truth pixels",
            points.shape(),
            confidence.shape()
        )));
    }
    if !(z_mean > 0.0) {
        return Err(Error::Domain(format!("scale normaliser must be positive, got {z_mean}")));
    }
    let tape = points.tape();
    let target = tape.constant(Tensor::new([n, 3], gt.points.iter().flatten().copied().collect())?);
    let dist = points.sub(target)?.norm_last();
    let weighted = confidence.mul(dist)?.scale(1.0 / z_mean);
    let reg = confidence.log()?.scale(alpha);
    Ok(weighted.sub(reg)?.mean())
}

/// Mean ground-truth depth of a view: the per-pair scale normaliser.
pub fn mean_depth(scene: &SceneBundle, view: usize) -> f64 {
    let d = &scene.views[view].depth.data;
    d.iter().sum::<f64>() / d.len() as f64
}

/// Summed reference- and source-branch regression loss for one ordered pair,
/// with both targets expressed in the reference camera frame.
pub fn pair_loss<'t>(
    cfg: &ModelConfig,
    w: &BoundWeights<'t>,
    scene: &SceneBundle,
    reference: usize,
    source: usize,
    alpha: f64,
) -> Result<Var<'t>> {
    let out = forward_pair(cfg, w, None, &scene.views[reference].image, &scene.views[source].image)?;
    let z = mean_depth(scene, reference);
    let branch = |h: &HeadOutput<'t>, gt: &PointMap| regression_loss(h.points, h.confidence, gt, z, alpha);
    let l_ref = branch(&out.reference, &scene.gt_pointmap(reference))?;
    let l_src = branch(&out.source, &scene.gt_pointmap_in(source, reference))?;
    Ok(l_ref.add(l_src)?)
}

/// Weights, optimiser moments and the index of the next step.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: Weights,
    pub adam: AdamState,
    pub step: usize,
}

impl TrainState {
    pub fn new(weights: Weights) -> Self {
        Self {
            weights,
            adam: AdamState::default(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `(step, mean pair loss)` for every step run in this call.
    pub losses: Vec<(usize, f64)>,
    /// Mean over the last (up to) 100 steps.
    pub final_loss: Option<f64>,
    pub warning: Option<String>,
}

/// Draws a uniform ordered pair of distinct views.
fn sample_pair(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize) {
    let a = rng.random_range(0..n);
    let b = (a + 1 + rng.random_range(0..n - 1)) % n;
    (a, b)
}

/// Runs steps `state.step..cfg.steps`. Each step draws its pairs from an RNG
/// stream keyed by the step index, so a resumed run replays the same batches.
pub fn pretrain(
    model: &ModelConfig,
    state: &mut TrainState,
    scenes: &[SceneBundle],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    model.validate()?;
    if scenes.is_empty() {
        return Err(Error::Input("no training scenes".into()));
    }
    for (i, s) in scenes.iter().enumerate() {
        if s.num_views() < 2 {
            return Err(Error::Input(format!("training scene {i} has fewer than 2 views")));
        }
        if (s.width(), s.height()) != (model.width, model.height) {
            return Err(Error::Input(format!(
                "training scene {i} is {}×{}, model expects {}×{}",
                s.width(),
                s.height(),
                model.width,
                model.height
            )));
        }
    }
    let adam = cfg.adam();
    let names: Vec<String> = state.weights.iter().map(|(n, _)| n.clone()).collect();
    let mut losses = Vec::new();
    for step in state.step..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64);
        let mut grads: Vec<Tensor> = state.weights.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut total = 0.0;
        for _ in 0..cfg.batch_pairs {
            let scene = &scenes[rng.random_range(0..scenes.len())];
            let (r, s) = sample_pair(&mut rng, scene.num_views());
            let tape = Tape::new();
            let w = BoundWeights::bind(&tape, &state.weights, true);
            let loss = pair_loss(model, &w, scene, r, s, cfg.alpha)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at step {step} (pair {r}->{s})"
                )));
            }
            total += value;
            tape.backward(loss)?;
            for (g, name) in grads.iter_mut().zip(&names) {
                g.add_assign(&w.get(name).grad().expect("weights require grad"));
            }
        }
        let inv = 1.0 / cfg.batch_pairs as f64;
        for g in &mut grads {
            *g = g.map(|v| v * inv);
        }
        adam_step(state.weights.iter_mut().map(|(_, t)| t), &grads, &mut state.adam, &adam)?;
        let mean = total * inv;
        losses.push((step, mean));
        on_step(step, mean);
        state.step = step + 1;
    }
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = (!tail.is_empty()).then(|| tail.iter().map(|l| l.1).sum::<f64>() / tail.len() as f64);
    let warning = final_loss.filter(|&l| l > cfg.loss_threshold).map(|l| {
        let msg = format!("final training loss {l:.4} is above the threshold {}", cfg.loss_threshold);
        log::warn!("{msg}");
        msg
    });
    Ok(TrainReport {
        losses,
        final_loss,
        warning,
    })
}

/// Writes `step,loss` rows; with `append` the header is skipped.
pub fn write_loss_csv(path: &Path, losses: &[(usize, f64)], append: bool) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    if !append {
        w.write_record(["step", "loss"]).map_err(csv_err)?;
    }
    for (step, loss) in losses {
        w.serialize((step, loss)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Saves the optimiser moments and step next to a weight checkpoint.
pub fn save_optimizer(path: &Path, model: &ModelConfig, state: &TrainState) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (i, (name, _)) in state.weights.iter().enumerate() {
        if let (Some(m), Some(v)) = (state.adam.m.get(i), state.adam.v.get(i)) {
            tensors.insert(format!("adam.m.{name}"), m.clone());
            tensors.insert(format!("adam.v.{name}"), v.clone());
        }
    }
    tensors.insert("adam.step".into(), Tensor::scalar(state.adam.step as f64));
    tensors.insert("train.step".into(), Tensor::scalar(state.step as f64));
    save_checkpoint(path, model, &tensors)
}

/// Restores optimiser state saved by [`save_optimizer`] for the given weights.
pub fn load_optimizer(path: &Path, weights: Weights) -> Result<TrainState> {
    let mut ck = load_checkpoint(path)?;
    let mut take = |name: &str| {
        ck.tensors
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing optimizer tensor {name}")))
    };
    let adam_step = take("adam.step")?.item() as u64;
    let step = take("train.step")?.item() as usize;
    let mut adam = AdamState {
        m: Vec::new(),
        v: Vec::new(),
        step: adam_step,
    };
    if adam_step > 0 {
        for (name, t) in weights.iter() {
            let m = take(&format!("adam.m.{name}"))?;
            let v = take(&format!("adam.v.{name}"))?;
            if m.shape() != t.shape() || v.shape() != t.shape() {
                return Err(Error::format(path, format!("optimizer moments for {name} have the wrong shape")));
            }
            adam.m.push(m);
            adam.v.push(v);
        }
    }
    Ok(TrainState { weights, adam, step })
}
