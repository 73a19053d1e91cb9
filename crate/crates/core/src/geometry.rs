//! Camera models, rigid poses, pixel-aligned point and depth grids.

use nalgebra::{Matrix3, Rotation3, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels. Pixel `(u, v)` has its centre at integer
/// coordinates, `u` along the image width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels, principal point at the image centre.
    pub fn from_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Self {
        let fx = width as f64 / (2.0 * (horizontal_fov_deg.to_radians() / 2.0).tan());
        Self {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹ [u, v, 1]`: the camera-frame point at unit depth.
    pub fn unproject_unit(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Rigid transform `x ↦ R·x + t`. Poses of views are world-from-camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    /// Camera at `eye` looking at `target`; world +y points down in the image.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let down = Vector3::new(0.0, 1.0, 0.0);
        let right = down.cross(&forward).normalize();
        let down = forward.cross(&right);
        Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho <= tol && (det - 1.0).abs() <= tol && self.translation.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "pose is not a proper rigid motion (|RᵀR − I| = {ortho:e}, det = {det})"
            )))
        }
    }

    /// `[R | t]` as 12 row-major values.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major_3x4(m: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
        }
    }

    pub fn rotation_angle_to(&self, other: &PoseSE3) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Per-pixel depth, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "depth map of {}×{} needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }
}

/// Per-pixel 3D points with an aligned confidence map.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 3]>,
    pub confidence: Vec<f64>,
}

impl PointMap {
    pub fn new(width: usize, height: usize, points: Vec<[f64; 3]>, confidence: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if points.len() != n || confidence.len() != n {
            return Err(Error::Input(format!(
                "pointmap of {width}×{height} needs {n} points and confidences, got {} and {}",
                points.len(),
                confidence.len()
            )));
        }
        Ok(Self {
            width,
            height,
            points,
            confidence,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.points[i])
    }

    pub fn z(&self) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            data: self.points.iter().map(|p| p[2]).collect(),
        }
    }

    pub fn mean_confidence(&self) -> f64 {
        self.confidence.iter().sum::<f64>() / self.confidence.len().max(1) as f64
    }

    pub fn scaled(&self, s: f64) -> PointMap {
        PointMap {
            points: self.points.iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect(),
            ..self.clone()
        }
    }

    /// Mean Euclidean distance between corresponding pixels.
    pub fn mean_distance(&self, other: &PointMap) -> f64 {
        let sum: f64 = self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
            .sum();
        sum / self.points.len().max(1) as f64
    }
}

/// Back-projects a depth map: `X = depth · K⁻¹ [u, v, 1]`.
pub fn depth_to_pointmap(depth: &DepthMap, k: &Intrinsics) -> Result<PointMap> {
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::Input(format!(
            "depth {}×{} does not match intrinsics {}×{}",
            depth.width, depth.height, k.width, k.height
        )));
    }
    let mut points = Vec::with_capacity(depth.data.len());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.at(u, v);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Domain(format!("depth {d} at pixel ({u}, {v}) is not positive")));
            }
            let x = (u as f64 * d - k.cx * d) / k.fx;
            let y = (v as f64 * d - k.cy * d) / k.fy;
            points.push([x, y, d]);
        }
    }
    let n = points.len();
    PointMap::new(depth.width, depth.height, points, vec![1.0; n])
}

/// Applies `R·x + t` to every point; confidence is carried over unchanged.
pub fn transform_pointmap(x: &PointMap, pose: &PoseSE3) -> PointMap {
    let points = x
        .points
        .iter()
        .map(|p| pose.apply(&Vector3::from(*p)).into())
        .collect();
    PointMap {
        points,
        ..x.clone()
    }
}

/// Least-squares rigid fit: the pose minimising `Σ w‖R·src + t − dst‖²`.
///
/// Fails when the weighted source points are (numerically) collinear.
pub fn procrustes(src: &[Vector3<f64>], dst: &[Vector3<f64>], weights: Option<&[f64]>) -> Result<PoseSE3> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::Rank(format!(
            "rigid fit needs at least 3 matched points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..src.len()).map(w).sum();
    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for i in 0..src.len() {
        cs += src[i] * w(i);
        cd += dst[i] * w(i);
    }
    cs /= total;
    cd /= total;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for i in 0..src.len() {
        let a = src[i] - cs;
        cov += (dst[i] - cd) * a.transpose() * w(i);
        spread += a * a.transpose() * w(i);
    }
    let eig = spread.symmetric_eigenvalues();
    let mut sorted = [eig[0], eig[1], eig[2]];
    sorted.sort_by(|a, b| a.total_cmp(b));
    if sorted[1] <= 1e-12 * sorted[2].max(f64::MIN_POSITIVE) {
        return Err(Error::Rank("source points are collinear or coincident".into()));
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rotation = u * fix * vt;
    Ok(PoseSE3 {
        rotation,
        translation: cd - rotation * cs,
    })
}
