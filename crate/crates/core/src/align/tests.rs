use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{depth_to_pointmap, transform_pointmap};
use crate::scene::{generate_scene, GenerationConfig, SceneBundle};

fn scene(seed: u64, views: usize, size: usize) -> SceneBundle {
    let cfg = GenerationConfig {
        views,
        width: size,
        height: size,
        ..GenerationConfig::default()
    };
    generate_scene(seed, &cfg).unwrap()
}

fn gt_graph(s: &SceneBundle, pairs: &[(usize, usize)]) -> PairGraph {
    PairGraph {
        num_views: s.num_views(),
        edges: pairs
            .iter()
            .map(|&(r, src)| Edge {
                reference: r,
                source: src,
                x_ref: s.gt_pointmap(r),
                x_src: s.gt_pointmap_in(src, r),
            })
            .collect(),
    }
}

fn intrinsics(s: &SceneBundle) -> Vec<Intrinsics> {
    s.views.iter().map(|v| v.intrinsics).collect()
}

fn gt_state(s: &SceneBundle, edges: usize) -> AlignmentState {
    let first = s.views[0].pose.inverse();
    AlignmentState {
        depths: s.views.iter().map(|v| v.depth.clone()).collect(),
        poses: s.views.iter().map(|v| first.compose(&v.pose)).collect(),
        scales: vec![1.0; edges],
        intrinsics: intrinsics(s),
    }
}

fn random_pose(rng: &mut ChaCha8Rng, angle: f64, shift: f64) -> PoseSE3 {
    let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    PoseSE3::from_axis_angle(v() * angle, v() * shift)
}

fn scalar_objective(state: &AlignmentState, graph: &PairGraph) -> f64 {
    let mut total = 0.0;
    for (i, e) in graph.edges.iter().enumerate() {
        let sigma = state.scales[i];
        let (pr, tr) = (&state.poses[e.reference].rotation, &state.poses[e.reference].translation);
        for (v, x) in [(e.reference, &e.x_ref), (e.source, &e.x_src)] {
            let k = &state.intrinsics[v];
            let (rv, tv) = (&state.poses[v].rotation, &state.poses[v].translation);
            for p in 0..x.len() {
                let (u, w) = ((p % k.width) as f64, (p / k.width) as f64);
                let d = state.depths[v].data[p];
                let own = [(u - k.cx) / k.fx * d, (w - k.cy) / k.fy * d, d];
                let xs = [sigma * x.points[p][0], sigma * x.points[p][1], sigma * x.points[p][2]];
                let y = if v == e.reference {
                    xs
                } else {
                    let mut world = [0.0; 3];
                    for a in 0..3 {
                        world[a] = (0..3).map(|b| pr[(a, b)] * xs[b]).sum::<f64>() + tr[a] - tv[a];
                    }
                    let mut y = [0.0; 3];
                    for a in 0..3 {
                        y[a] = (0..3).map(|b| rv[(b, a)] * world[b]).sum();
                    }
                    y
                };
                if y[2] <= 0.0 {
                    continue;
                }
                let sq: f64 = (0..3).map(|a| (own[a] - y[a]).powi(2)).sum();
                total += x.confidence[p] * sq;
            }
        }
    }
    total
}

/// Two 4×4 views with random pointmaps, poses, scales and confidences.
fn random_instance(seed: u64) -> (AlignmentState, PairGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Intrinsics::from_fov(4, 4, 60.0);
    let map = |rng: &mut ChaCha8Rng| {
        let points = (0..16)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..3.0)])
            .collect();
        let conf = (0..16).map(|_| rng.random_range(1.0..3.0)).collect();
        PointMap::new(4, 4, points, conf).unwrap()
    };
    let graph = PairGraph {
        num_views: 2,
        edges: vec![
            Edge { reference: 0, source: 1, x_ref: map(&mut rng), x_src: map(&mut rng) },
            Edge { reference: 1, source: 0, x_ref: map(&mut rng), x_src: map(&mut rng) },
        ],
    };
    let depths = (0..2)
        .map(|_| DepthMap::new(4, 4, (0..16).map(|_| rng.random_range(0.5..3.0)).collect()).unwrap())
        .collect();
    let state = AlignmentState {
        depths,
        poses: vec![random_pose(&mut rng, 0.3, 0.5), random_pose(&mut rng, 0.3, 0.5)],
        scales: vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
        intrinsics: vec![k, k],
    };
    (state, graph)
}

#[test]
fn project_identity_round_trip() {
    let s = scene(3, 1, 16);
    let k = s.views[0].intrinsics;
    let x = depth_to_pointmap(&s.views[0].depth, &k).unwrap();
    let (d, flagged) = project_to_depth(&PoseSE3::identity(), &x, &k).unwrap();
    assert!(flagged.is_empty());
    for (a, b) in d.data.iter().zip(&s.views[0].depth.data) {
        assert_eq!(a, b);
    }
}

#[test]
fn project_z_translation() {
    let k = Intrinsics::from_fov(4, 4, 60.0);
    let depth = DepthMap::new(4, 4, (0..16).map(|i| 1.0 + 0.1 * i as f64).collect()).unwrap();
    let x = depth_to_pointmap(&depth, &k).unwrap();
    // camera moved 0.4 forward: everything is 0.4 closer
    let pose = PoseSE3::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.4));
    let (d, flagged) = project_to_depth(&pose, &x, &k).unwrap();
    assert!(flagged.is_empty());
    for (a, b) in d.data.iter().zip(&depth.data) {
        assert!((a - (b - 0.4)).abs() < 1e-15);
    }
    let far = PoseSE3::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.55));
    let (_, flagged) = project_to_depth(&far, &x, &k).unwrap();
    assert_eq!(flagged, (0..6).collect::<Vec<_>>());
}

#[test]
fn project_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (state, graph) = random_instance(4);
    let k = state.intrinsics[0];
    let x = &graph.edges[0].x_src;
    let pose = random_pose(&mut rng, 1.0, 2.0);
    let (d, _) = project_to_depth(&pose, x, &k).unwrap();
    let (r, t) = (&pose.rotation, &pose.translation);
    for (p, z) in x.points.iter().zip(&d.data) {
        let expect: f64 = (0..3).map(|a| r[(a, 2)] * (p[a] - t[a])).sum();
        assert!((z - expect).abs() < 1e-12);
    }
}

#[test]
fn gt_objective_vanishes() {
    let s = scene(5, 4, 32);
    let graph = gt_graph(&s, &PairGraph::complete_pairs(4));
    let state = gt_state(&s, graph.edges.len());
    assert!(objective_value(&state, &graph).unwrap() < 1e-18);
}

#[test]
fn scaled_pointmaps_with_inverse_sigma() {
    let s = scene(5, 3, 16);
    let mut graph = gt_graph(&s, &PairGraph::complete_pairs(3));
    let mut state = gt_state(&s, graph.edges.len());
    let factors = [2.0, 0.5, 4.0, 0.25, 1.7, 1.0 / 1.7];
    for (e, f) in graph.edges.iter_mut().zip(factors) {
        e.x_ref = e.x_ref.scaled(f);
        e.x_src = e.x_src.scaled(f);
    }
    assert!(objective_value(&state, &graph).unwrap() > 1.0);
    state.scales = factors.iter().map(|f| 1.0 / f).collect();
    assert!(state.scales.iter().map(|s| s.ln()).sum::<f64>().abs() < 1e-12);
    assert!(objective_value(&state, &graph).unwrap() < 1e-18);
}

#[test]
fn objective_matches_scalar_loop() {
    for seed in 0..5 {
        let (state, graph) = random_instance(seed);
        let got = objective_value(&state, &graph).unwrap();
        let want = scalar_objective(&state, &graph);
        assert!((got - want).abs() < 1e-12 * want.max(1.0), "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn objective_gauge_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..4 {
        let (state, graph) = random_instance(seed);
        let base = objective_value(&state, &graph).unwrap();
        let g = random_pose(&mut rng, 2.0, 3.0);
        let mut moved = state.clone();
        for p in &mut moved.poses {
            *p = g.compose(p);
        }
        let after = objective_value(&moved, &graph).unwrap();
        assert!((base - after).abs() < 1e-10 * base.max(1.0));
    }
}

#[test]
fn gauge_normalisation() {
    let (mut state, graph) = random_instance(2);
    state.scales = vec![3.0, 5.0];
    let before = objective_value(&state, &graph).unwrap();
    let g2 = 15.0;
    normalize_gauge(&mut state);
    assert!(state.scales.iter().map(|s| s.ln()).sum::<f64>().abs() < 1e-12);
    assert!((state.poses[0].rotation - Matrix3::identity()).norm() < 1e-14);
    assert!(state.poses[0].translation.norm() < 1e-14);
    let after = objective_value(&state, &graph).unwrap();
    assert!((after * g2 - before).abs() < 1e-10 * before);
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let (state, graph) = random_instance(7);
    let tape = Tape::new();
    let bound = bind_state(&tape, &state, true, false).unwrap();
    let obj = alignment_objective(&tape, &bound, &state, &graph).unwrap();
    tape.backward(obj).unwrap();
    let omega = bound.omegas[1].unwrap().grad().unwrap();
    let trans = bound.translations[1].grad().unwrap();
    let logd = bound.log_depths[1].grad().unwrap();
    let h = 1e-6;
    let fd = |f: &dyn Fn(&mut AlignmentState, f64)| {
        let mut a = state.clone();
        let mut b = state.clone();
        f(&mut a, h);
        f(&mut b, -h);
        (objective_value(&a, &graph).unwrap() - objective_value(&b, &graph).unwrap()) / (2.0 * h)
    };
    for k in 0..3 {
        let num = fd(&|s, e| {
            let mut w = Vector3::zeros();
            w[k] = e;
            s.poses[1].rotation *= Rotation3::new(w).into_inner();
        });
        assert!((num - omega.data()[k]).abs() < 1e-5 * num.abs().max(1.0), "omega {k}");
        let num = fd(&|s, e| s.poses[1].translation[k] += e);
        assert!((num - trans.data()[k]).abs() < 1e-5 * num.abs().max(1.0), "t {k}");
    }
    for p in [0, 5, 15] {
        let num = fd(&|s, e| s.depths[1].data[p] *= e.exp());
        assert!((num - logd.data()[p]).abs() < 1e-5 * num.abs().max(1.0), "depth {p}");
    }
}

fn check_recovery(s: &SceneBundle, state: &AlignmentState) {
    let gt = gt_state(s, 0);
    let ratios: Vec<f64> = (0..s.num_views())
        .flat_map(|v| state.depths[v].data.iter().zip(&gt.depths[v].data).map(|(a, b)| a / b))
        .collect();
    let scale = crate::metrics::median(&ratios);
    let rel: Vec<f64> = ratios.iter().map(|r| (r / scale - 1.0).abs()).collect();
    assert!(crate::metrics::median(&rel) < 1e-3, "depth rel {}", crate::metrics::median(&rel));
    for v in 1..s.num_views() {
        let (p, q) = (&state.poses[v], &gt.poses[v]);
        assert!(p.rotation_angle_to(q) < 1e-3, "view {v} rotation");
        let err = (p.translation / scale - q.translation).norm() / q.translation.norm();
        assert!(err < 1e-3, "view {v} translation {err}");
    }
}

#[test]
fn exact_pointmaps_recover_ground_truth() {
    let s = scene(21, 4, 32);
    let graph = gt_graph(&s, &PairGraph::complete_pairs(4));
    let res = solve_alignment(&graph, &intrinsics(&s), None, &AlignConfig::default()).unwrap();
    check_recovery(&s, &res.state);
    assert_eq!(res.trace.len(), 501);
}

fn perturbed_start(s: &SceneBundle, edges: usize, seed: u64) -> AlignmentState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = gt_state(s, edges);
    for d in &mut init.depths {
        for v in &mut d.data {
            *v *= 1.0 + rng.random_range(-0.05..0.05);
        }
    }
    for p in init.poses.iter_mut().skip(1) {
        *p = p.compose(&random_pose(&mut rng, 0.03, 0.03));
    }
    init
}

#[test]
fn perturbed_start_converges() {
    let s = scene(22, 3, 16);
    let graph = gt_graph(&s, &PairGraph::complete_pairs(3));
    let init = perturbed_start(&s, graph.edges.len(), 1);
    let cfg = AlignConfig {
        iterations: 1500,
        ..AlignConfig::default()
    };
    let res = solve_alignment(&graph, &intrinsics(&s), Some(init), &cfg).unwrap();
    check_recovery(&s, &res.state);
}

#[test]
fn moving_average_does_not_rise() {
    let s = scene(22, 3, 16);
    let graph = gt_graph(&s, &PairGraph::complete_pairs(3));
    let init = perturbed_start(&s, graph.edges.len(), 1);
    let res = solve_alignment(&graph, &intrinsics(&s), Some(init), &AlignConfig::default()).unwrap();
    let obj: Vec<f64> = res.trace.iter().map(|r| r.objective).collect();
    let avg: Vec<f64> = obj.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, w) in avg.windows(2).enumerate() {
        assert!(w[1] <= w[0] + 1e-12 * obj[0], "moving average rose at {i}: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn single_edge_converges() {
    let s = scene(23, 2, 16);
    let graph = gt_graph(&s, &[(0, 1)]);
    let mut init = gt_state(&s, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for v in &mut init.depths[1].data {
        *v *= 1.0 + rng.random_range(-0.1..0.1);
    }
    init.poses[1] = init.poses[1].compose(&random_pose(&mut rng, 0.05, 0.05));
    let cfg = AlignConfig {
        iterations: 2000,
        ..AlignConfig::default()
    };
    let res = solve_alignment(&graph, &intrinsics(&s), Some(init), &cfg).unwrap();
    assert_eq!(res.state.scales, vec![1.0]);
    assert!(res.objective < 1e-10 * res.trace[0].objective, "{} vs {}", res.objective, res.trace[0].objective);
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let s = scene(24, 3, 16);
    let graph = gt_graph(&s, &PairGraph::complete_pairs(3));
    let init = gt_state(&s, graph.edges.len());
    let res = solve_alignment(&graph, &intrinsics(&s), Some(init.clone()), &AlignConfig::default()).unwrap();
    for (a, b) in res.state.depths.iter().zip(&init.depths) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x / y - 1.0).abs() < 1e-6);
        }
    }
    for (a, b) in res.state.poses.iter().zip(&init.poses) {
        assert!(a.rotation_angle_to(b) < 1e-6);
        assert!((a.translation - b.translation).norm() < 1e-6);
    }
    for s in &res.state.scales {
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn scale_gauge_holds_every_step() {
    let (mut state, graph) = random_instance(3);
    for d in &mut state.depths {
        for v in &mut d.data {
            *v = v.abs() + 0.5;
        }
    }
    normalize_gauge(&mut state);
    let mut s = state;
    for _ in 0..5 {
        let cfg = AlignConfig {
            iterations: 1,
            ..AlignConfig::default()
        };
        s = solve_alignment(&graph, &s.intrinsics.clone(), Some(s), &cfg).unwrap().state;
        assert!(s.scales.iter().map(|v| v.ln()).sum::<f64>().abs() < 1e-12);
        assert_eq!(s.poses[0], PoseSE3::identity());
    }
}

/// Minimum over per-pixel depths for a fixed scale pair `(e^a, e^-a)`.
fn profile(graph: &PairGraph, poses: &[PoseSE3], k: &Intrinsics, a: f64) -> (f64, Vec<Vec<f64>>) {
    let sig = [a.exp(), (-a).exp()];
    let ray = rays(k);
    let n = k.num_pixels();
    let mut num = vec![vec![0.0; n]; 2];
    let mut den = vec![vec![0.0; n]; 2];
    let mut targets = Vec::new();
    for (i, e) in graph.edges.iter().enumerate() {
        for (v, x) in [(e.reference, &e.x_ref), (e.source, &e.x_src)] {
            for p in 0..n {
                let xs = Vector3::from(x.points[p]) * sig[i];
                let world = poses[e.reference].apply(&xs);
                let y = poses[v].inverse().apply(&world);
                let c = x.confidence[p];
                num[v][p] += c * ray[p].dot(&y);
                den[v][p] += c * ray[p].norm_squared();
                targets.push((v, p, c, y));
            }
        }
    }
    let depth: Vec<Vec<f64>> = (0..2).map(|v| (0..n).map(|p| num[v][p] / den[v][p]).collect()).collect();
    let obj = targets
        .iter()
        .map(|(v, p, c, y)| c * (ray[*p] * depth[*v][*p] - y).norm_squared())
        .sum();
    (obj, depth)
}

#[test]
fn frozen_pose_scales_match_brute_force() {
    let s = scene(25, 2, 4);
    let mut graph = gt_graph(&s, &[(0, 1), (1, 0)]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (e, f) in graph.edges.iter_mut().zip([1.3, 0.8]) {
        for x in [&mut e.x_ref, &mut e.x_src] {
            for p in &mut x.points {
                for c in p.iter_mut() {
                    *c = *c * f * (1.0 + rng.random_range(-0.05..0.05));
                }
            }
            for c in &mut x.confidence {
                *c = rng.random_range(1.0..2.0);
            }
        }
    }
    let gt = gt_state(&s, 2);
    let k = gt.intrinsics[0];
    // coarse grid then golden-section refinement
    let mut best = (f64::INFINITY, 0.0);
    for i in -400..=400 {
        let a = i as f64 * 0.005;
        let o = profile(&graph, &gt.poses, &k, a).0;
        if o < best.0 {
            best = (o, a);
        }
    }
    let (mut lo, mut hi) = (best.1 - 0.005, best.1 + 0.005);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if profile(&graph, &gt.poses, &k, m1).0 < profile(&graph, &gt.poses, &k, m2).0 {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let a = 0.5 * (lo + hi);
    let (_, depth) = profile(&graph, &gt.poses, &k, a);

    let cfg = AlignConfig {
        iterations: 3000,
        freeze_poses: true,
        ..AlignConfig::default()
    };
    let res = solve_alignment(&graph, &intrinsics(&s), Some(gt.clone()), &cfg).unwrap();
    assert!((res.state.scales[0] - a.exp()).abs() < 1e-3, "{} vs {}", res.state.scales[0], a.exp());
    assert!((res.state.scales[1] - (-a).exp()).abs() < 1e-3);
    let got: f64 = res.state.depths.iter().flat_map(|d| d.data.iter()).sum();
    let want: f64 = depth.iter().flatten().sum();
    assert!((got / want - 1.0).abs() < 1e-3, "{got} vs {want}");
    assert_eq!(res.state.poses, gt.poses);
}

#[test]
fn disconnected_graph_is_rejected() {
    let s = scene(26, 3, 8);
    let graph = gt_graph(&s, &[(0, 1), (1, 0)]);
    let err = solve_alignment(&graph, &intrinsics(&s), None, &AlignConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Input(ref m) if m.contains("disconnected")), "{err}");
}

#[test]
fn mismatched_shapes_are_rejected() {
    let s = scene(26, 2, 8);
    let mut graph = gt_graph(&s, &[(0, 1)]);
    graph.edges[0].x_src = scene(26, 2, 4).gt_pointmap(0);
    assert!(matches!(graph.validate(&intrinsics(&s)), Err(Error::Input(_))));
}

#[test]
fn runaway_objective_aborts() {
    let (state, graph) = random_instance(1);
    let mut init = state;
    for d in &mut init.depths {
        for v in &mut d.data {
            *v = v.abs() + 0.5;
        }
    }
    normalize_gauge(&mut init);
    let cfg = AlignConfig {
        iterations: 500,
        lr: 3.0,
        cosine_decay: false,
        divergence_window: 3,
        ..AlignConfig::default()
    };
    let err = solve_alignment(&graph, &init.intrinsics.clone(), Some(init), &cfg).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
}

#[test]
fn initialisation_from_exact_input_is_near_optimal() {
    let s = scene(27, 4, 16);
    let graph = gt_graph(&s, &PairGraph::complete_pairs(4));
    let init = initialize(&graph, &intrinsics(&s)).unwrap();
    assert!(objective_value(&init, &graph).unwrap() < 1e-12);
    assert!(init.scales.iter().map(|s| s.ln()).sum::<f64>().abs() < 1e-12);
}

#[test]
fn fused_cloud_and_ply() {
    let s = scene(28, 2, 4);
    let state = gt_state(&s, 0);
    let images: Vec<Vec<f64>> = s.views.iter().map(|v| v.image.clone()).collect();
    let (pts, cols) = fused_cloud(&state, &images).unwrap();
    assert_eq!(pts.len(), 32);
    let world = transform_pointmap(&s.gt_pointmap(1), &state.poses[1]);
    for (a, b) in pts[16..].iter().zip(&world.points) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.ply");
    write_ply(&path, &pts, &cols).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 32\n"));
    assert_eq!(text.lines().count(), 10 + 32);
    assert!(fused_cloud(&state, &[vec![0.0; 5]]).is_err());
}
