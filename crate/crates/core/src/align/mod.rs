//! Global alignment: per-view depths, world-from-camera poses and per-edge
//! scales fitted jointly so that every pairwise pointmap agrees.
//!
//! Each edge `e = (r, s)` carries both predictions in the camera frame of `r`.
//! For a view `v ∈ e` the residual at pixel `p` is
//! `C · ‖D_v(p)·K_v⁻¹p̃ − R_vᵀ(R_r·σ_e·X_v^e(p) + t_r − t_v)‖²`.
//! Pose 0 is held at the identity and `Σ log σ_e = 0`.

mod export;

use std::collections::VecDeque;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

pub use export::{
    fused_cloud, read_reconstruction, write_ply, write_reconstruction, Frame, Reconstruction, POSES_FILE,
};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{procrustes, DepthMap, Intrinsics, PointMap, PoseSE3};
use crate::net::{infer_pair, ModelConfig, PromptSet, Weights};
use crate::pretrain::{adam_step, AdamConfig, AdamState};

/// One image pair with both predicted pointmaps in the frame of `reference`.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub reference: usize,
    pub source: usize,
    pub x_ref: PointMap,
    pub x_src: PointMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGraph {
    pub num_views: usize,
    pub edges: Vec<Edge>,
}

impl PairGraph {
    /// All ordered pairs `(i, j)`, `i ≠ j`.
    pub fn complete_pairs(n: usize) -> Vec<(usize, usize)> {
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect()
    }

    pub fn validate(&self, intrinsics: &[Intrinsics]) -> Result<()> {
        if self.num_views == 0 {
            return Err(Error::Input("pair graph has no views".into()));
        }
        if intrinsics.len() != self.num_views {
            return Err(Error::Input(format!(
                "{} intrinsics for {} views",
                intrinsics.len(),
                self.num_views
            )));
        }
        for (i, e) in self.edges.iter().enumerate() {
            if e.reference >= self.num_views || e.source >= self.num_views || e.reference == e.source {
                return Err(Error::Input(format!(
                    "edge {i} ({}, {}) is not a pair of distinct views",
                    e.reference, e.source
                )));
            }
            for (v, x) in [(e.reference, &e.x_ref), (e.source, &e.x_src)] {
                let k = &intrinsics[v];
                if (x.width, x.height) != (k.width, k.height) {
                    return Err(Error::Input(format!(
                        "edge {i}: pointmap {}×{} does not match view {v} ({}×{})",
                        x.width, x.height, k.width, k.height
                    )));
                }
                if x.points.iter().flatten().chain(&x.confidence).any(|v| !v.is_finite()) {
                    return Err(Error::Input(format!("edge {i}: non-finite pointmap entries")));
                }
            }
        }
        if self.num_views > 1 && !self.is_connected() {
            return Err(Error::Input("pair graph is disconnected".into()));
        }
        Ok(())
    }

    fn neighbours(&self, v: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().enumerate().filter_map(move |(i, e)| {
            if e.reference == v {
                Some((i, e.source))
            } else if e.source == v {
                Some((i, e.reference))
            } else {
                None
            }
        })
    }

    /// Breadth-first order from view 0 as `(view, parent edge)`.
    fn spanning_tree(&self) -> Vec<(usize, Option<usize>)> {
        let mut seen = vec![false; self.num_views];
        let mut order = vec![(0, None)];
        seen[0] = true;
        let mut queue = VecDeque::from([0]);
        while let Some(v) = queue.pop_front() {
            for (e, w) in self.neighbours(v) {
                if !seen[w] {
                    seen[w] = true;
                    order.push((w, Some(e)));
                    queue.push_back(w);
                }
            }
        }
        order
    }

    pub fn is_connected(&self) -> bool {
        self.spanning_tree().len() == self.num_views
    }
}

/// Runs the network on every listed `(reference, source)` pair.
pub fn predict_graph(
    model: &ModelConfig,
    weights: &Weights,
    prompts: Option<&PromptSet>,
    images: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<PairGraph> {
    let edges = pairs
        .iter()
        .map(|&(r, s)| {
            if r >= images.len() || s >= images.len() || r == s {
                return Err(Error::Input(format!(
                    "pair ({r}, {s}) is not two distinct views of {}",
                    images.len()
                )));
            }
            let (x_ref, x_src) = infer_pair(model, weights, prompts, &images[r], &images[s])?;
            Ok(Edge {
                reference: r,
                source: s,
                x_ref,
                x_src,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairGraph {
        num_views: images.len(),
        edges,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    pub depths: Vec<DepthMap>,
    /// World-from-camera.
    pub poses: Vec<PoseSE3>,
    pub scales: Vec<f64>,
    pub intrinsics: Vec<Intrinsics>,
}

impl AlignmentState {
    /// Camera-frame points of view `v` from its depth map.
    pub fn camera_points(&self, v: usize) -> Vec<Vector3<f64>> {
        let rays = rays(&self.intrinsics[v]);
        rays.iter().zip(&self.depths[v].data).map(|(r, d)| r * *d).collect()
    }
}

/// Unit-depth viewing rays `K⁻¹[u, v, 1]` in row-major pixel order.
pub fn rays(k: &Intrinsics) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(k.num_pixels());
    for v in 0..k.height {
        for u in 0..k.width {
            out.push(Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0));
        }
    }
    out
}

/// Depth of a world-frame pointmap as seen from `pose`, on the pointmap's own
/// pixel grid. Pixels that land at non-positive depth are returned in the
/// second list and carry their raw (non-positive) value.
pub fn project_to_depth(pose: &PoseSE3, x: &PointMap, k: &Intrinsics) -> Result<(DepthMap, Vec<usize>)> {
    if (x.width, x.height) != (k.width, k.height) {
        return Err(Error::Input(format!(
            "pointmap {}×{} does not match intrinsics {}×{}",
            x.width, x.height, k.width, k.height
        )));
    }
    let inv = pose.inverse();
    let mut flagged = Vec::new();
    let data = x
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let z = inv.apply(&Vector3::from(*p)).z;
            if !(z > 0.0) {
                flagged.push(i);
            }
            z
        })
        .collect();
    Ok((DepthMap::new(x.width, x.height, data)?, flagged))
}

fn mat_tensor(m: &Matrix3<f64>) -> Tensor {
    let mut data = Vec::with_capacity(9);
    for r in 0..3 {
        for c in 0..3 {
            data.push(m[(r, c)]);
        }
    }
    Tensor::new([3, 3], data).expect("3×3")
}

fn points_tensor<'a>(pts: impl ExactSizeIterator<Item = &'a [f64; 3]>) -> Tensor {
    let n = pts.len();
    Tensor::new([n, 3], pts.flatten().copied().collect()).expect("n×3")
}

/// The alignment unknowns recorded on a tape.
pub struct BoundState<'t> {
    pub log_depths: Vec<Var<'t>>,
    /// Unconstrained per-edge values; the scale is `exp(u − mean(u))`.
    pub log_scale_free: Option<Var<'t>>,
    /// Mean log-scale of the bound state, added back after centring.
    pub log_scale_offset: f64,
    /// Per view: `(rotation, translation)` with the rotation possibly a
    /// first-order perturbation `R₀(I + [ω]×)` of the stored one.
    pub rotations: Vec<Var<'t>>,
    pub translations: Vec<Var<'t>>,
    /// Leaves of the rotation increments (none for fixed views).
    pub omegas: Vec<Option<Var<'t>>>,
}

/// Skew-symmetric generators `[e_k]×`.
fn generators() -> [Tensor; 3] {
    let e = |i: usize, j: usize| {
        let mut t = Tensor::zeros([3, 3]);
        t.data_mut()[i * 3 + j] = -1.0;
        t.data_mut()[j * 3 + i] = 1.0;
        t
    };
    // [ω]× = ω₀(e₂₁ − e₁₂) + ω₁(e₀₂ − e₂₀) + ω₂(e₁₀ − e₀₁)
    [e(1, 2), e(2, 0), e(0, 1)]
}

/// Records the state on `tape`. With `trainable`, log-depths, scale
/// parameters, rotation increments (at zero) and translations of views other
/// than 0 become gradient leaves; `fixed_poses` keeps every pose constant.
pub fn bind_state<'t>(tape: &'t Tape, state: &AlignmentState, trainable: bool, fixed_poses: bool) -> Result<BoundState<'t>> {
    let mut log_depths = Vec::new();
    for d in &state.depths {
        if d.data.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Domain("alignment depths must be positive".into()));
        }
        log_depths.push(tape.leaf(Tensor::from_vec(d.data.iter().map(|v| v.ln()).collect()), trainable));
    }
    if state.scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Domain("edge scales must be positive".into()));
    }
    let log_scale_offset = if state.scales.is_empty() {
        0.0
    } else {
        state.scales.iter().map(|s| s.ln()).sum::<f64>() / state.scales.len() as f64
    };
    let log_scale_free = (!state.scales.is_empty())
        .then(|| tape.leaf(Tensor::from_vec(state.scales.iter().map(|s| s.ln()).collect()), trainable));
    let gens = generators();
    let mut rotations = Vec::new();
    let mut translations = Vec::new();
    let mut omegas = Vec::new();
    for (v, pose) in state.poses.iter().enumerate() {
        let r0 = tape.constant(mat_tensor(&pose.rotation));
        let free = trainable && !fixed_poses && v > 0;
        let t = Tensor::from_vec(pose.translation.iter().copied().collect());
        if free {
            let omega = tape.leaf(Tensor::zeros([3]), true);
            let mut skew = tape.constant(Tensor::zeros([3, 3]));
            for (k, g) in gens.iter().enumerate() {
                skew = skew.add(omega.slice(0, k..k + 1)?.mul(tape.constant(g.clone()))?)?;
            }
            rotations.push(r0.add(r0.matmul(skew)?)?);
            omegas.push(Some(omega));
            translations.push(tape.leaf(t, true));
        } else {
            rotations.push(r0);
            omegas.push(None);
            translations.push(tape.constant(t));
        }
    }
    Ok(BoundState {
        log_depths,
        log_scale_free,
        log_scale_offset,
        rotations,
        translations,
        omegas,
    })
}

/// Confidence-weighted sum of squared residuals over both views of every
/// edge. Pixels whose transformed prediction lies at non-positive depth in
/// view `v` are skipped.
pub fn alignment_objective<'t>(
    tape: &'t Tape,
    bound: &BoundState<'t>,
    state: &AlignmentState,
    graph: &PairGraph,
) -> Result<Var<'t>> {
    let n_edges = graph.edges.len();
    let scales = match bound.log_scale_free {
        Some(u) => {
            let centred = u.sub(u.mean())?.add_scalar(bound.log_scale_offset);
            Some(centred.exp())
        }
        None => None,
    };
    let mut cam_points = Vec::with_capacity(state.depths.len());
    for (v, ld) in bound.log_depths.iter().enumerate() {
        let k = &state.intrinsics[v];
        let r: Vec<f64> = rays(k).iter().flat_map(|x| [x.x, x.y, x.z]).collect();
        let rays = tape.constant(Tensor::new([k.num_pixels(), 3], r)?);
        let d = ld.exp().reshape([k.num_pixels(), 1])?;
        cam_points.push(d.mul(rays)?);
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (i, e) in graph.edges.iter().enumerate() {
        let sigma = match scales {
            Some(s) if n_edges > 0 => s.slice(0, i..i + 1)?,
            _ => tape.constant(Tensor::from_vec(vec![1.0])),
        };
        let r = e.reference;
        for (v, x) in [(e.reference, &e.x_ref), (e.source, &e.x_src)] {
            let n = x.len();
            let xs = tape.constant(points_tensor(x.points.iter())).mul(sigma)?;
            let predicted = if v == r {
                xs
            } else {
                let world = xs.matmul(bound.rotations[r].transpose()?)?.add(bound.translations[r])?;
                world.sub(bound.translations[v])?.matmul(bound.rotations[v])?
            };
            let z = predicted.value();
            let weights: Vec<f64> = (0..n)
                .map(|p| if z.data()[p * 3 + 2] > 0.0 { x.confidence[p] } else { 0.0 })
                .collect();
            let diff = cam_points[v].sub(predicted)?;
            let w = tape.constant(Tensor::new([n, 1], weights)?);
            total = total.add(diff.mul(diff)?.mul(w)?.sum())?;
        }
    }
    Ok(total)
}

/// Objective value at `state` without gradients.
pub fn objective_value(state: &AlignmentState, graph: &PairGraph) -> Result<f64> {
    let tape = Tape::new();
    let bound = bind_state(&tape, state, false, true)?;
    Ok(alignment_objective(&tape, &bound, state, graph)?.value().item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Cosine-decay the learning rate to zero over the run.
    pub cosine_decay: bool,
    /// Abort after this many consecutive objective increases.
    pub divergence_window: usize,
    /// Keep every pose at its initial value.
    pub freeze_poses: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 1e-2,
            cosine_decay: true,
            divergence_window: 100,
            freeze_poses: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct AlignResult {
    pub state: AlignmentState,
    pub objective: f64,
    pub trace: Vec<TraceRow>,
}

/// Weighted least-squares scale `a` minimising `Σ w‖a·x − y‖²`.
fn fit_scale(x: &[Vector3<f64>], y: &[Vector3<f64>], w: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x.len() {
        num += w[i] * x[i].dot(&y[i]);
        den += w[i] * x[i].norm_squared();
    }
    if den > 0.0 && num > 0.0 {
        num / den
    } else {
        1.0
    }
}

/// Similarity fit `dst ≈ c·R·src + t`, returned as `(c, rigid part)`.
fn fit_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>], w: &[f64]) -> Result<(f64, PoseSE3)> {
    let total: f64 = w.iter().sum();
    let centroid = |p: &[Vector3<f64>]| p.iter().zip(w).fold(Vector3::zeros(), |a, (p, w)| a + p * *w) / total;
    let (cs, cd) = (centroid(src), centroid(dst));
    let spread = |p: &[Vector3<f64>], c: Vector3<f64>| p.iter().zip(w).map(|(p, w)| w * (p - c).norm_squared()).sum::<f64>();
    let c = (spread(dst, cd) / spread(src, cs)).sqrt();
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Rank("degenerate pointmap in pose initialisation".into()));
    }
    let scaled: Vec<Vector3<f64>> = src.iter().map(|p| p * c).collect();
    Ok((c, procrustes(&scaled, dst, Some(w))?))
}

fn to_vecs(x: &PointMap) -> Vec<Vector3<f64>> {
    x.points.iter().map(|p| Vector3::from(*p)).collect()
}

fn depth_from_points(x: &[Vector3<f64>], k: &Intrinsics) -> DepthMap {
    let positive: Vec<f64> = x.iter().map(|p| p.z).filter(|z| *z > 0.0).collect();
    let floor = if positive.is_empty() {
        1.0
    } else {
        1e-3 * positive.iter().sum::<f64>() / positive.len() as f64
    };
    DepthMap {
        width: k.width,
        height: k.height,
        data: x.iter().map(|p| p.z.max(floor)).collect(),
    }
}

/// Initial state: depths from the most confident edge where a view is the
/// reference, poses chained along a breadth-first spanning tree by
/// similarity fits, edge scales by least squares, then gauge-normalised.
pub fn initialize(graph: &PairGraph, intrinsics: &[Intrinsics]) -> Result<AlignmentState> {
    graph.validate(intrinsics)?;
    if graph.edges.is_empty() {
        return Err(Error::Input("pair graph has no edges".into()));
    }
    let n = graph.num_views;
    let best_ref_edge: Vec<Option<usize>> = (0..n)
        .map(|v| {
            graph
                .edges
                .iter()
                .enumerate()
                .filter(|(_, e)| e.reference == v)
                .max_by(|a, b| a.1.x_ref.mean_confidence().total_cmp(&b.1.x_ref.mean_confidence()))
                .map(|(i, _)| i)
        })
        .collect();
    // own-frame points of each view at its best edge's scale
    let own: Vec<Option<Vec<Vector3<f64>>>> = best_ref_edge
        .iter()
        .map(|e| e.map(|e| to_vecs(&graph.edges[e].x_ref)))
        .collect();

    let mut poses = vec![PoseSE3::identity(); n];
    // global-scale camera-frame points per initialised view
    let mut global: Vec<Option<Vec<Vector3<f64>>>> = vec![None; n];
    for (v, parent) in graph.spanning_tree() {
        let Some(e) = parent else {
            global[v] = Some(match &own[v] {
                Some(p) => p.clone(),
                None => {
                    let e = graph.neighbours(v).next().map(|(e, _)| e);
                    // a lone source view: its pixels seen from the other camera
                    e.map(|e| to_vecs(&graph.edges[e].x_src)).unwrap_or_default()
                }
            });
            continue;
        };
        let edge = &graph.edges[e];
        let conf_ref = &edge.x_ref.confidence;
        let conf_src = &edge.x_src.confidence;
        if edge.source == v {
            // parent r is known: rescale this edge to the global frame of r
            let r = edge.reference;
            let gr = global[r].as_ref().expect("parent initialised");
            let alpha = fit_scale(&to_vecs(&edge.x_ref), gr, conf_ref);
            let in_r: Vec<Vector3<f64>> = to_vecs(&edge.x_src).iter().map(|p| p * alpha).collect();
            let (pts_v, rel) = match &own[v] {
                Some(a) => {
                    let (c, rel) = fit_similarity(a, &in_r, conf_src)?;
                    (a.iter().map(|p| p * c).collect(), rel)
                }
                None => {
                    // no own-frame prediction: keep the camera axis-aligned with r
                    let rel = PoseSE3::identity();
                    (in_r.clone(), rel)
                }
            };
            poses[v] = poses[r].compose(&rel);
            global[v] = Some(pts_v);
        } else {
            // edge (v, r): both maps live in v's frame
            let r = edge.source;
            let gr = global[r].as_ref().expect("parent initialised");
            let (c, rel_rv) = fit_similarity(&to_vecs(&edge.x_src), gr, conf_src)?;
            poses[v] = poses[r].compose(&rel_rv);
            let in_v: Vec<Vector3<f64>> = to_vecs(&edge.x_ref).iter().map(|p| p * c).collect();
            global[v] = Some(match &own[v] {
                Some(a) => {
                    let k = fit_scale(a, &in_v, conf_ref);
                    a.iter().map(|p| p * k).collect()
                }
                None => in_v,
            });
        }
    }
    let depths: Vec<DepthMap> = global
        .iter()
        .zip(intrinsics)
        .map(|(g, k)| depth_from_points(g.as_ref().expect("connected"), k))
        .collect();
    let mut state = AlignmentState {
        depths,
        poses,
        scales: vec![1.0; graph.edges.len()],
        intrinsics: intrinsics.to_vec(),
    };
    for (i, e) in graph.edges.iter().enumerate() {
        let target = state.camera_points(e.reference);
        state.scales[i] = fit_scale(&to_vecs(&e.x_ref), &target, &e.x_ref.confidence);
    }
    normalize_gauge(&mut state);
    Ok(state)
}

/// Rescales the scene so that `Σ log σ_e = 0` and moves view 0 to the
/// identity. The objective is divided by the squared scale change.
pub fn normalize_gauge(state: &mut AlignmentState) {
    if !state.scales.is_empty() {
        let g = (state.scales.iter().map(|s| s.ln()).sum::<f64>() / state.scales.len() as f64).exp();
        for s in &mut state.scales {
            *s /= g;
        }
        for d in &mut state.depths {
            for v in &mut d.data {
                *v /= g;
            }
        }
        for p in &mut state.poses {
            p.translation /= g;
        }
    }
    if let Some(first) = state.poses.first().cloned() {
        let inv = first.inverse();
        for p in &mut state.poses {
            *p = inv.compose(p);
        }
        state.poses[0] = PoseSE3::identity();
    }
}

/// Gradient-based minimisation from `init` (or [`initialize`] when `None`).
pub fn solve_alignment(
    graph: &PairGraph,
    intrinsics: &[Intrinsics],
    init: Option<AlignmentState>,
    cfg: &AlignConfig,
) -> Result<AlignResult> {
    graph.validate(intrinsics)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    adam.validate()?;
    let mut state = match init {
        Some(s) => s,
        None => initialize(graph, intrinsics)?,
    };
    if state.depths.len() != graph.num_views
        || state.poses.len() != graph.num_views
        || state.scales.len() != graph.edges.len()
    {
        return Err(Error::Input("initial state does not match the pair graph".into()));
    }
    let mut opt = AdamState::default();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut increases = 0usize;
    let mut last = f64::INFINITY;
    for it in 0..=cfg.iterations {
        let tape = Tape::new();
        let bound = bind_state(&tape, &state, true, cfg.freeze_poses)?;
        let obj = alignment_objective(&tape, &bound, &state, graph)?;
        let value = obj.value().item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("alignment objective is non-finite at iteration {it}")));
        }
        trace.push(TraceRow {
            iteration: it,
            objective: value,
        });
        increases = if value > last { increases + 1 } else { 0 };
        if increases >= cfg.divergence_window {
            return Err(Error::Numerical(format!(
                "alignment diverged: objective rose for {increases} consecutive iterations (now {value:e} at iteration {it})"
            )));
        }
        last = value;
        if it == cfg.iterations {
            break;
        }
        tape.backward(obj)?;

        let mut leaves: Vec<Var> = bound.log_depths.clone();
        leaves.extend(bound.log_scale_free);
        for v in 1..graph.num_views {
            if let Some(w) = bound.omegas[v] {
                leaves.push(w);
                leaves.push(bound.translations[v]);
            }
        }
        let grads: Vec<Tensor> = leaves.iter().map(|l| l.grad().expect("leaf")).collect();
        let mut params: Vec<Tensor> = leaves.iter().map(|l| (*l.value()).clone()).collect();
        let lr = if cfg.cosine_decay {
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iterations as f64).cos())
        } else {
            cfg.lr
        };
        adam_step(params.iter_mut(), &grads, &mut opt, &AdamConfig { lr, ..adam })?;

        let mut it_params = params.into_iter();
        for d in &mut state.depths {
            d.data = it_params.next().expect("depth").data().iter().map(|l| l.exp()).collect();
        }
        if let Some(u) = bound.log_scale_free.and(it_params.next()) {
            let mean = u.data().iter().sum::<f64>() / u.numel() as f64;
            for (s, l) in state.scales.iter_mut().zip(u.data()) {
                *s = (l - mean).exp();
            }
        }
        for v in 1..graph.num_views {
            if bound.omegas[v].is_some() {
                let omega = it_params.next().expect("omega");
                let t = it_params.next().expect("translation");
                let w = Vector3::new(omega.data()[0], omega.data()[1], omega.data()[2]);
                let pose = &mut state.poses[v];
                pose.rotation *= Rotation3::new(w).into_inner();
                pose.translation = Vector3::new(t.data()[0], t.data()[1], t.data()[2]);
            }
        }
    }
    let objective = trace.last().map_or(f64::NAN, |r| r.objective);
    Ok(AlignResult {
        state,
        objective,
        trace,
    })
}

#[cfg(test)]
mod tests;
