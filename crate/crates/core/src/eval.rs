//! Scores a reconstruction against a scene's ground truth.

use serde::{Deserialize, Serialize};

use crate::align::{Frame, Reconstruction};
use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::metrics::{
    acc_comp_nc, depth_rel_tau, icp, median, CloudMetrics, CloudPair, DepthAlign, DepthMetrics, IcpConfig,
};
use crate::scene::SceneBundle;

/// How a predicted cloud is brought into the ground-truth world frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudAlign {
    /// Use the prediction as is; its frame must already be the world frame.
    None,
    /// Scale by the pooled median depth ratio, then place camera 0 at its
    /// ground-truth pose.
    Pose,
    /// `Pose`, then rigid ICP onto the ground-truth cloud.
    Icp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cloud: CloudMetrics,
    pub depth: Vec<DepthMetrics>,
    /// Similarity applied to the predicted cloud: `p ↦ transform(scale · p)`.
    pub scale: f64,
    pub transform: PoseSE3,
}

/// Pooled `median(gt / pred)` depth ratio over pixels valid in both.
fn depth_ratio(rec: &Reconstruction, scene: &SceneBundle) -> Result<f64> {
    let ratios: Vec<f64> = rec
        .depths
        .iter()
        .zip(&scene.views)
        .flat_map(|(p, v)| p.data.iter().zip(&v.depth.data).map(|(p, g)| g / p))
        .filter(|r| r.is_finite() && *r > 0.0)
        .collect();
    if ratios.is_empty() {
        return Err(Error::Contract("no pixels with positive predicted and true depth".into()));
    }
    Ok(median(&ratios))
}

pub fn evaluate(
    rec: &Reconstruction,
    scene: &SceneBundle,
    depth_align: DepthAlign,
    cloud_align: CloudAlign,
    icp_cfg: &IcpConfig,
) -> Result<EvalReport> {
    if rec.depths.len() != scene.num_views() {
        return Err(Error::Input(format!(
            "reconstruction has {} views, scene has {}",
            rec.depths.len(),
            scene.num_views()
        )));
    }
    for (v, (d, view)) in rec.depths.iter().zip(&scene.views).enumerate() {
        if (d.width, d.height) != (view.depth.width, view.depth.height) {
            return Err(Error::Input(format!("view {v}: depth size differs from the scene")));
        }
    }
    let depth = rec
        .depths
        .iter()
        .zip(&scene.views)
        .map(|(d, v)| depth_rel_tau(&d.data, &v.depth.data, depth_align))
        .collect::<Result<Vec<_>>>()?;

    let (scale, mut transform) = match (cloud_align, rec.frame) {
        (CloudAlign::None, Frame::World) => (1.0, PoseSE3::identity()),
        (CloudAlign::None, Frame::FirstCamera) => {
            return Err(Error::Input(
                "the reconstruction is in the frame of its first camera, not the scene's world frame; \
                 evaluate with cloud alignment `pose` or `icp`"
                    .into(),
            ))
        }
        (_, Frame::World) => (1.0, PoseSE3::identity()),
        (_, Frame::FirstCamera) => (depth_ratio(rec, scene)?, scene.views[0].pose),
    };
    let predicted: Vec<[f64; 3]> = rec
        .world_points()
        .iter()
        .map(|p| transform.apply(&(nalgebra::Vector3::from(*p) * scale)).into())
        .collect();
    let reference = Reconstruction::from_scene(scene).world_points();
    let predicted = if cloud_align == CloudAlign::Icp {
        let fit = icp(&predicted, &reference, icp_cfg)?;
        transform = fit.transform.compose(&transform);
        predicted
            .iter()
            .map(|p| fit.transform.apply(&nalgebra::Vector3::from(*p)).into())
            .collect()
    } else {
        predicted
    };
    let eye = scene.views[0].pose.translation.into();
    let pair = CloudPair::new(predicted, reference)?.with_estimated_normals(eye);
    Ok(EvalReport {
        cloud: acc_comp_nc(&pair)?,
        depth,
        scale,
        transform,
    })
}
