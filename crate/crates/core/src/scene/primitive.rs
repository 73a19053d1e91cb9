use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

/// Analytic surface used by the ray caster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Plane { point: [f64; 3], normal: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Box rotated by `yaw` radians about the world y axis.
    Cuboid {
        center: [f64; 3],
        half_extents: [f64; 3],
        yaw: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
    /// Lattice cells per world unit of the value-noise texture.
    pub texture_frequency: f64,
    pub texture_seed: u64,
}

/// Nearest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals camera depth for rays with unit z in the camera frame.
    pub t: f64,
    /// Hit point in the primitive's local frame.
    pub local: [f64; 3],
}

const MIN_T: f64 = 1e-9;

impl Shape {
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        match self {
            Shape::Plane { point, normal } => {
                let n = Vector3::from(*normal);
                let denom = n.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = n.dot(&(Vector3::from(*point) - origin)) / denom;
                (t > MIN_T).then(|| Hit {
                    t,
                    local: (origin + dir * t).into(),
                })
            }
            Shape::Sphere { center, radius } => {
                let c = Vector3::from(*center);
                let oc = origin - c;
                let a = dir.dot(dir);
                let half_b = oc.dot(dir);
                let cc = oc.dot(&oc) - radius * radius;
                let disc = half_b * half_b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // numerically stable pair of roots
                let q = -half_b - half_b.signum() * sq;
                let (mut t0, mut t1) = if q == 0.0 { (0.0, 0.0) } else { (q / a, cc / q) };
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                let t = if t0 > MIN_T {
                    t0
                } else if t1 > MIN_T {
                    t1
                } else {
                    return None;
                };
                Some(Hit {
                    t,
                    local: (origin + dir * t - c).into(),
                })
            }
            Shape::Cuboid {
                center,
                half_extents,
                yaw,
            } => {
                let rot = yaw_rotation(*yaw);
                let c = Vector3::from(*center);
                let o = rot.transpose() * (origin - c);
                let d = rot.transpose() * dir;
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for ax in 0..3 {
                    let h = half_extents[ax];
                    if d[ax].abs() < 1e-15 {
                        if o[ax].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((-h - o[ax]) / d[ax], (h - o[ax]) / d[ax]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    t_near = t_near.max(a);
                    t_far = t_far.min(b);
                }
                if t_near > t_far {
                    return None;
                }
                let t = if t_near > MIN_T {
                    t_near
                } else if t_far > MIN_T {
                    t_far
                } else {
                    return None;
                };
                Some(Hit {
                    t,
                    local: (o + d * t).into(),
                })
            }
        }
    }

    /// Maps a local-frame surface point back to world coordinates.
    pub fn local_to_world(&self, local: &[f64; 3]) -> Vector3<f64> {
        let p = Vector3::from(*local);
        match self {
            Shape::Plane { .. } => p,
            Shape::Sphere { center, .. } => p + Vector3::from(*center),
            Shape::Cuboid { center, yaw, .. } => yaw_rotation(*yaw) * p + Vector3::from(*center),
        }
    }
}

fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).into_inner()
}

impl Primitive {
    /// Solid (3D) texture, so the same surface point has the same colour in every view.
    pub fn color_at(&self, world: &Vector3<f64>) -> [f64; 3] {
        let p = world * self.texture_frequency;
        let base = fbm(&p, self.texture_seed);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let detail = value_noise(&(p * 2.7), self.texture_seed.wrapping_add(1 + c as u64));
            *o = (self.albedo[c] * (0.3 + 0.7 * base) + 0.25 * (detail - 0.5)).clamp(0.0, 1.0);
        }
        out
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ ix as u64);
    h = splitmix64(h ^ iy as u64);
    h = splitmix64(h ^ iz as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinearly interpolated lattice noise in `[0, 1]`.
pub(crate) fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let (tx, ty, tz) = (smooth(p.x - fx), smooth(p.y - fy), smooth(p.z - fz));
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = if dx == 1 { tx } else { 1.0 - tx }
                    * if dy == 1 { ty } else { 1.0 - ty }
                    * if dz == 1 { tz } else { 1.0 - tz };
                acc += w * lattice(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

fn fbm(p: &Vector3<f64>, seed: u64) -> f64 {
    let mut amp = 0.5;
    let mut freq = 1.0;
    let mut acc = 0.0;
    let mut norm = 0.0;
    for octave in 0..3 {
        acc += amp * value_noise(&(p * freq), seed.wrapping_add(101 * octave));
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    acc / norm
}
