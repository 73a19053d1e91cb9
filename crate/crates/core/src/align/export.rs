use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AlignResult, AlignmentState};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, PoseSE3};
use crate::scene::{read_grid, write_grid, Grid, SceneBundle};
use crate::table::write_csv;

/// World-frame points of every view with optional per-point RGB in `[0, 1]`.
/// `images` are `H × W × 3` row-major; pass an empty slice for grey.
pub fn fused_cloud(state: &AlignmentState, images: &[Vec<f64>]) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let mut points = Vec::new();
    let mut colours = Vec::new();
    for (v, pose) in state.poses.iter().enumerate() {
        let n = state.intrinsics[v].num_pixels();
        let image = images.get(v);
        if let Some(img) = image {
            if img.len() != n * 3 {
                return Err(Error::Input(format!(
                    "image {v} has {} values, expected {}",
                    img.len(),
                    n * 3
                )));
            }
        }
        for (i, p) in state.camera_points(v).iter().enumerate() {
            points.push(pose.apply(p).into());
            colours.push(match image {
                Some(img) => [img[3 * i], img[3 * i + 1], img[3 * i + 2]],
                None => [0.5; 3],
            });
        }
    }
    Ok((points, colours))
}

/// ASCII PLY with `x y z red green blue` vertices.
pub fn write_ply(path: &Path, points: &[[f64; 3]], colours: &[[f64; 3]]) -> Result<()> {
    if points.len() != colours.len() {
        return Err(Error::Input(format!(
            "{} points but {} colours",
            points.len(),
            colours.len()
        )));
    }
    let mut s = String::with_capacity(points.len() * 48);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    let byte = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (p, c) in points.iter().zip(colours) {
        let _ = writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], byte(c[0]), byte(c[1]), byte(c[2]));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Coordinate frame a reconstruction is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    /// The scene's own world frame, metric.
    World,
    /// Camera 0 at the identity, scale fixed only by the alignment gauge.
    FirstCamera,
}

/// Per-view depths and world-from-camera poses with their frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub frame: Frame,
    pub depths: Vec<DepthMap>,
    pub poses: Vec<PoseSE3>,
    pub intrinsics: Vec<Intrinsics>,
}

impl Reconstruction {
    pub fn from_state(state: &AlignmentState) -> Self {
        Self {
            frame: Frame::FirstCamera,
            depths: state.depths.clone(),
            poses: state.poses.clone(),
            intrinsics: state.intrinsics.clone(),
        }
    }

    /// Ground truth of a scene as a reconstruction.
    pub fn from_scene(scene: &SceneBundle) -> Self {
        Self {
            frame: Frame::World,
            depths: scene.views.iter().map(|v| v.depth.clone()).collect(),
            poses: scene.views.iter().map(|v| v.pose).collect(),
            intrinsics: scene.views.iter().map(|v| v.intrinsics).collect(),
        }
    }

    /// World points of every view, view-major.
    pub fn world_points(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for (v, pose) in self.poses.iter().enumerate() {
            for (r, d) in super::rays(&self.intrinsics[v]).iter().zip(&self.depths[v].data) {
                out.push(pose.apply(&(r * *d)).into());
            }
        }
        out
    }
}

pub const POSES_FILE: &str = "poses.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    frame: Frame,
    objective: f64,
    scales: Vec<f64>,
    views: Vec<PoseEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseEntry {
    depth: String,
    intrinsics: Intrinsics,
    /// World-from-camera `[R | t]`, row-major.
    pose: [f64; 12],
}

/// Writes `cloud.ply`, one depth grid per view, `poses.json` and `trace.csv`.
pub fn write_reconstruction(dir: &Path, result: &AlignResult, images: &[Vec<f64>]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let state = &result.state;
    let (points, colours) = fused_cloud(state, images)?;
    write_ply(&dir.join("cloud.ply"), &points, &colours)?;
    let mut views = Vec::new();
    for (v, d) in state.depths.iter().enumerate() {
        let file = format!("depth_{v:03}.bin");
        write_grid(
            &dir.join(&file),
            &Grid {
                width: d.width,
                height: d.height,
                channels: 0,
                image: Vec::new(),
                depth: d.data.clone(),
            },
        )?;
        views.push(PoseEntry {
            depth: file,
            intrinsics: state.intrinsics[v],
            pose: state.poses[v].to_row_major_3x4(),
        });
    }
    let poses = PoseFile {
        frame: Frame::FirstCamera,
        objective: result.objective,
        scales: state.scales.clone(),
        views,
    };
    let path = dir.join(POSES_FILE);
    let text = serde_json::to_string_pretty(&poses).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    write_csv(&dir.join("trace.csv"), &result.trace)
}

pub fn read_reconstruction(dir: &Path) -> Result<Reconstruction> {
    let path = dir.join(POSES_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: PoseFile = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let mut rec = Reconstruction {
        frame: file.frame,
        depths: Vec::new(),
        poses: Vec::new(),
        intrinsics: Vec::new(),
    };
    for v in &file.views {
        let grid_path = dir.join(&v.depth);
        let grid = read_grid(&grid_path)?;
        if (grid.width, grid.height) != (v.intrinsics.width, v.intrinsics.height) {
            return Err(Error::format(&grid_path, "depth grid does not match its intrinsics"));
        }
        rec.depths.push(DepthMap::new(grid.width, grid.height, grid.depth)?);
        rec.poses.push(PoseSE3::from_row_major_3x4(&v.pose));
        rec.intrinsics.push(v.intrinsics);
    }
    Ok(rec)
}
