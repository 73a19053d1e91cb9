//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttr_core::align::{Edge, PairGraph};
use ttr_core::geometry::Intrinsics;
use ttr_core::net::{ModelConfig, Weights};
use ttr_core::scene::{generate_scene, GenerationConfig, SceneBundle};

pub fn scene(views: usize) -> SceneBundle {
    let cfg = GenerationConfig {
        views,
        ..GenerationConfig::default()
    };
    generate_scene(7, &cfg).expect("benchmark scene")
}

pub fn images(scene: &SceneBundle) -> Vec<Vec<f64>> {
    scene.views.iter().map(|v| v.image.clone()).collect()
}

/// Randomly initialised weights of the default model.
pub fn model() -> (ModelConfig, Weights) {
    let cfg = ModelConfig::default();
    let w = Weights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).expect("weights");
    (cfg, w)
}

/// Complete pair graph built from exact pointmaps.
pub fn exact_graph(scene: &SceneBundle) -> (PairGraph, Vec<Intrinsics>) {
    let edges = PairGraph::complete_pairs(scene.num_views())
        .into_iter()
        .map(|(r, s)| Edge {
            reference: r,
            source: s,
            x_ref: scene.gt_pointmap(r),
            x_src: scene.gt_pointmap_in(s, r),
        })
        .collect();
    let graph = PairGraph {
        num_views: scene.num_views(),
        edges,
    };
    (graph, scene.views.iter().map(|v| v.intrinsics).collect())
}
