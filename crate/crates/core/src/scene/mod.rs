//! Procedural scenes rendered by analytic ray casting.
//!
//! Every scene is a small room (floor, ceiling, walls) with a handful of
//! spheres and boxes. Surfaces carry a seeded solid texture, so the rendered
//! images give a network real correspondence signal while depth, poses and
//! pointmaps stay exact.

mod archive;
mod primitive;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use archive::{read_archive, read_grid, write_archive, write_grid, Grid, ARCHIVE_VERSION, MANIFEST_FILE, SCENE_MAGIC};
pub use primitive::{Hit, Primitive, Shape};

use crate::error::{Error, Result};
use crate::geometry::{depth_to_pointmap, transform_pointmap, DepthMap, Intrinsics, PointMap, PoseSE3};

/// Depth assigned to rays that hit nothing.
pub const FAR_PLANE: f64 = 100.0;
pub const CHANNELS: usize = 3;
const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Range of camera offsets from the rig centre, world units.
    pub baseline: [f64; 2],
    /// Inclusive range of object counts.
    pub objects: [usize; 2],
    pub min_overlap: f64,
    pub max_retries: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            views: 6,
            width: 64,
            height: 64,
            fov_deg: 60.0,
            baseline: [0.15, 0.8],
            objects: [3, 6],
            min_overlap: 0.3,
            max_retries: 64,
        }
    }
}

impl GenerationConfig {
    /// Cameras a few centimetres apart: the poorly triangulated regime.
    pub fn short_baseline() -> Self {
        Self {
            baseline: [0.02, 0.1],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views < 1 {
            return Err(Error::Input("a scene needs at least one view".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Input("image size must be positive".into()));
        }
        if !(self.baseline[0] >= 0.0 && self.baseline[0] <= self.baseline[1]) {
            return Err(Error::Input(format!("bad baseline range {:?}", self.baseline)));
        }
        if self.objects[0] > self.objects[1] {
            return Err(Error::Input(format!("bad object range {:?}", self.objects)));
        }
        Ok(())
    }
}

/// What a pixel's ray hit: primitive index (−1 for a miss) and the hit point
/// in that primitive's local frame. Kept for oracle checks only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub primitive: i32,
    pub local: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    /// `H × W × C`, row-major, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub depth: DepthMap,
    /// World-from-camera.
    pub pose: PoseSE3,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub seed: u64,
    pub config: GenerationConfig,
    pub primitives: Vec<Primitive>,
    pub views: Vec<View>,
    /// Per view, per pixel. Empty for bundles loaded from an archive.
    pub correspondence: Vec<Vec<SurfaceHit>>,
}

impl SceneBundle {
    /// Renders the given cameras over an explicit primitive list.
    pub fn from_primitives(
        seed: u64,
        config: GenerationConfig,
        primitives: Vec<Primitive>,
        cameras: &[(Intrinsics, PoseSE3)],
    ) -> Result<Self> {
        let mut views = Vec::with_capacity(cameras.len());
        let mut correspondence = Vec::with_capacity(cameras.len());
        for (k, pose) in cameras {
            k.validate()?;
            pose.validate(1e-9)?;
            let (view, hits) = render_view(&primitives, k, pose);
            views.push(view);
            correspondence.push(hits);
        }
        Ok(Self {
            seed,
            config,
            primitives,
            views,
            correspondence,
        })
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn width(&self) -> usize {
        self.views.first().map_or(0, |v| v.depth.width)
    }

    pub fn height(&self) -> usize {
        self.views.first().map_or(0, |v| v.depth.height)
    }

    /// Ground-truth pointmap of `view` in its own camera frame.
    pub fn gt_pointmap(&self, view: usize) -> PointMap {
        let v = &self.views[view];
        depth_to_pointmap(&v.depth, &v.intrinsics).expect("rendered depth is positive")
    }

    /// Pose taking camera-`src` coordinates into camera-`reference` coordinates.
    pub fn relative_pose(&self, reference: usize, src: usize) -> PoseSE3 {
        self.views[reference].pose.inverse().compose(&self.views[src].pose)
    }

    /// Ground-truth pointmap of `view` expressed in the camera frame of `reference`.
    pub fn gt_pointmap_in(&self, view: usize, reference: usize) -> PointMap {
        transform_pointmap(&self.gt_pointmap(view), &self.relative_pose(reference, view))
    }

    pub fn gt_world_pointmap(&self, view: usize) -> PointMap {
        transform_pointmap(&self.gt_pointmap(view), &self.views[view].pose)
    }
}

/// Casts a ray against every primitive and returns the nearest hit.
pub fn cast_ray(primitives: &[Primitive], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(usize, Hit)> {
    let mut best: Option<(usize, Hit)> = None;
    for (i, p) in primitives.iter().enumerate() {
        if let Some(hit) = p.shape.intersect(origin, dir) {
            if best.is_none_or(|(_, b)| hit.t < b.t) {
                best = Some((i, hit));
            }
        }
    }
    best
}

/// Renders one view. Depth is the camera-frame z of the hit point.
pub fn render_view(primitives: &[Primitive], k: &Intrinsics, pose: &PoseSE3) -> (View, Vec<SurfaceHit>) {
    let n = k.num_pixels();
    let mut image = Vec::with_capacity(n * CHANNELS);
    let mut depth = Vec::with_capacity(n);
    let mut hits = Vec::with_capacity(n);
    let origin = pose.translation;
    for v in 0..k.height {
        for u in 0..k.width {
            let dir = pose.rotation * k.unproject_unit(u as f64, v as f64);
            match cast_ray(primitives, &origin, &dir) {
                Some((i, hit)) if hit.t <= FAR_PLANE => {
                    let world = origin + dir * hit.t;
                    image.extend_from_slice(&primitives[i].color_at(&world));
                    depth.push(hit.t);
                    hits.push(SurfaceHit {
                        primitive: i as i32,
                        local: hit.local,
                    });
                }
                _ => {
                    image.extend_from_slice(&BACKGROUND);
                    depth.push(FAR_PLANE);
                    hits.push(SurfaceHit {
                        primitive: -1,
                        local: [0.0; 3],
                    });
                }
            }
        }
    }
    let view = View {
        image,
        depth: DepthMap::new(k.width, k.height, depth).expect("one depth per pixel"),
        pose: *pose,
        intrinsics: *k,
    };
    (view, hits)
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.2..1.0),
        rng.random_range(0.2..1.0),
        rng.random_range(0.2..1.0),
    ]
}

fn textured(shape: Shape, rng: &mut ChaCha8Rng) -> Primitive {
    Primitive {
        shape,
        albedo: random_albedo(rng),
        texture_frequency: rng.random_range(1.5..4.0),
        texture_seed: rng.random(),
    }
}

/// Samples the room and its objects.
pub fn sample_primitives(config: &GenerationConfig, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let floor = rng.random_range(1.2..1.8);
    let ceiling = -rng.random_range(2.0..3.0);
    let back = rng.random_range(8.0..12.0);
    let side = rng.random_range(3.0..5.0);
    let mut prims = vec![
        textured(Shape::Plane { point: [0.0, floor, 0.0], normal: [0.0, -1.0, 0.0] }, rng),
        textured(Shape::Plane { point: [0.0, ceiling, 0.0], normal: [0.0, 1.0, 0.0] }, rng),
        textured(Shape::Plane { point: [0.0, 0.0, back], normal: [0.0, 0.0, -1.0] }, rng),
        textured(Shape::Plane { point: [-side, 0.0, 0.0], normal: [1.0, 0.0, 0.0] }, rng),
        textured(Shape::Plane { point: [side, 0.0, 0.0], normal: [-1.0, 0.0, 0.0] }, rng),
        textured(Shape::Plane { point: [0.0, 0.0, -4.0], normal: [0.0, 0.0, 1.0] }, rng),
    ];
    let count = rng.random_range(config.objects[0]..=config.objects[1]);
    for _ in 0..count {
        let x = rng.random_range(-2.2..2.2);
        let z = rng.random_range(3.0..back - 1.5);
        let shape = if rng.random_bool(0.5) {
            let radius = rng.random_range(0.3..0.9);
            let y = if rng.random_bool(0.7) {
                floor - radius
            } else {
                rng.random_range(-1.0..floor - radius)
            };
            Shape::Sphere { center: [x, y, z], radius }
        } else {
            let he = [
                rng.random_range(0.25..0.7),
                rng.random_range(0.25..0.9),
                rng.random_range(0.25..0.7),
            ];
            Shape::Cuboid {
                center: [x, floor - he[1], z],
                half_extents: he,
                yaw: rng.random_range(0.0..std::f64::consts::FRAC_PI_2),
            }
        };
        prims.push(textured(shape, rng));
    }
    prims
}

fn sample_cameras(config: &GenerationConfig, rng: &mut ChaCha8Rng) -> Vec<PoseSE3> {
    let rig = Vector3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.3..0.2),
        rng.random_range(-0.5..0.5),
    );
    let target = Vector3::new(
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.1..0.6),
        rng.random_range(4.5..6.5),
    );
    (0..config.views)
        .map(|_| {
            // mostly lateral offsets, as for a hand-held sweep
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.3..0.3),
            )
            .normalize();
            let mag = rng.random_range(config.baseline[0]..=config.baseline[1]);
            let eye = rig + dir * mag;
            let jitter = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.3..0.3),
            );
            PoseSE3::look_at(eye, target + jitter)
        })
        .collect()
}

/// Fraction of (sub-sampled) pixels of view `a` that are visible in view `b`.
pub fn overlap_fraction(a: &View, b: &View) -> f64 {
    let step = 4;
    let (mut seen, mut total) = (0usize, 0usize);
    let to_b = b.pose.inverse().compose(&a.pose);
    let k = &b.intrinsics;
    for v in (0..a.depth.height).step_by(step) {
        for u in (0..a.depth.width).step_by(step) {
            total += 1;
            let d = a.depth.at(u, v);
            if d >= FAR_PLANE {
                continue;
            }
            let p = to_b.apply(&(a.intrinsics.unproject_unit(u as f64, v as f64) * d));
            if p.z <= 0.0 {
                continue;
            }
            let (pu, pv) = k.project(&p);
            let (ru, rv) = (pu.round(), pv.round());
            if ru < 0.0 || rv < 0.0 || ru >= k.width as f64 || rv >= k.height as f64 {
                continue;
            }
            let db = b.depth.at(ru as usize, rv as usize);
            if (db - p.z).abs() <= 0.05 * p.z {
                seen += 1;
            }
        }
    }
    seen as f64 / total.max(1) as f64
}

/// Deterministic scene for `seed`. Camera placements are re-drawn until every
/// ordered pair of views overlaps by at least `config.min_overlap`.
pub fn generate_scene(seed: u64, config: &GenerationConfig) -> Result<SceneBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Intrinsics::from_fov(config.width, config.height, config.fov_deg);
    let primitives = sample_primitives(config, &mut rng);
    for _ in 0..config.max_retries.max(1) {
        let poses = sample_cameras(config, &mut rng);
        let cameras: Vec<_> = poses.into_iter().map(|p| (k, p)).collect();
        let bundle = SceneBundle::from_primitives(seed, config.clone(), primitives.clone(), &cameras)?;
        let n = bundle.num_views();
        let ok = (0..n).all(|a| {
            (0..n).all(|b| a == b || overlap_fraction(&bundle.views[a], &bundle.views[b]) >= config.min_overlap)
        });
        if ok {
            return Ok(bundle);
        }
    }
    Err(Error::Generation(format!(
        "no camera placement with {:.0}% mutual overlap after {} tries (seed {seed})",
        config.min_overlap * 100.0,
        config.max_retries
    )))
}
