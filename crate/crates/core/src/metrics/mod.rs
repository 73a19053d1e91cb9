//! Evaluation: point-cloud accuracy/completion/normal consistency, depth
//! rel/τ, ICP registration and the cross-pair consistency diagnostic.

mod consistency;
mod icp;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub use consistency::{
    depth_difference, diagnose_consistency, mean_discrepancy, render_heatmap_svg, ConsistencyReport, ConsistencyRow,
    PairDifference,
};
pub use icp::{icp, IcpConfig, IcpResult};

use crate::error::{Error, Result};

/// Inlier ratio threshold on `max(pred/gt, gt/pred)`.
pub const TAU_THRESHOLD: f64 = 1.03;
/// Neighbourhood size for plane-fit normals.
pub const NORMAL_NEIGHBOURS: usize = 8;

/// Nearest-neighbour index over a fixed point set.
pub struct NearestNeighbours {
    tree: ImmutableKdTree<f64, 3>,
}

impl NearestNeighbours {
    pub fn new(points: &[[f64; 3]]) -> Self {
        Self {
            tree: ImmutableKdTree::new_from_slice(points),
        }
    }

    /// `(index, Euclidean distance)` of the closest indexed point.
    pub fn nearest(&self, q: &[f64; 3]) -> (usize, f64) {
        let nn = self.tree.nearest_one::<SquaredEuclidean>(q);
        (nn.item as usize, nn.distance.sqrt())
    }

    /// Indices of the `k` closest indexed points (the query itself included if indexed).
    pub fn nearest_k(&self, q: &[f64; 3], k: usize) -> Vec<usize> {
        let k = std::num::NonZero::new(k.max(1)).expect("positive");
        self.tree
            .nearest_n::<SquaredEuclidean>(q, k)
            .into_iter()
            .map(|n| n.item as usize)
            .collect()
    }
}

/// Unit normals from a plane fit to each point's `k` nearest neighbours,
/// oriented to face `viewpoint`.
pub fn estimate_normals(points: &[[f64; 3]], k: usize, viewpoint: [f64; 3]) -> Vec<[f64; 3]> {
    let index = NearestNeighbours::new(points);
    let eye = Vector3::from(viewpoint);
    points
        .iter()
        .map(|p| {
            let nbrs = index.nearest_k(p, k);
            let centroid = nbrs.iter().fold(Vector3::zeros(), |acc, &j| acc + Vector3::from(points[j]))
                / nbrs.len() as f64;
            let cov = nbrs.iter().fold(Matrix3::zeros(), |acc, &j| {
                let d = Vector3::from(points[j]) - centroid;
                acc + d * d.transpose()
            });
            let eig = cov.symmetric_eigen();
            let i = eig.eigenvalues.imin();
            let mut n: Vector3<f64> = eig.eigenvectors.column(i).into();
            if n.dot(&(eye - Vector3::from(*p))) < 0.0 {
                n = -n;
            }
            n.into()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudPair {
    pub predicted: Vec<[f64; 3]>,
    pub reference: Vec<[f64; 3]>,
    pub predicted_normals: Option<Vec<[f64; 3]>>,
    pub reference_normals: Option<Vec<[f64; 3]>>,
}

impl CloudPair {
    pub fn new(predicted: Vec<[f64; 3]>, reference: Vec<[f64; 3]>) -> Result<Self> {
        if predicted.is_empty() || reference.is_empty() {
            return Err(Error::Input("point clouds must be non-empty".into()));
        }
        if predicted.iter().chain(&reference).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("point clouds contain non-finite coordinates".into()));
        }
        Ok(Self {
            predicted,
            reference,
            predicted_normals: None,
            reference_normals: None,
        })
    }

    /// Attaches plane-fit normals to both clouds.
    pub fn with_estimated_normals(mut self, viewpoint: [f64; 3]) -> Self {
        self.predicted_normals = Some(estimate_normals(&self.predicted, NORMAL_NEIGHBOURS, viewpoint));
        self.reference_normals = Some(estimate_normals(&self.reference, NORMAL_NEIGHBOURS, viewpoint));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub nc_mean: f64,
    pub nc_median: f64,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn check_normals(normals: &Option<Vec<[f64; 3]>>, n: usize, which: &str) -> Result<Vec<Vector3<f64>>> {
    let normals = normals
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("normal consistency needs {which} normals")))?;
    if normals.len() != n {
        return Err(Error::Contract(format!(
            "{which} cloud has {n} points but {} normals",
            normals.len()
        )));
    }
    normals
        .iter()
        .map(|&v| {
            let v = Vector3::from(v);
            if (v.norm() - 1.0).abs() > 1e-6 {
                Err(Error::Contract(format!("{which} normal {v:?} is not unit length")))
            } else {
                Ok(v)
            }
        })
        .collect()
}

/// Accuracy (predicted → reference nearest distances), completion (the
/// reverse) and normal consistency `|cos|` over both matching directions.
pub fn acc_comp_nc(pair: &CloudPair) -> Result<CloudMetrics> {
    let pn = check_normals(&pair.predicted_normals, pair.predicted.len(), "predicted")?;
    let rn = check_normals(&pair.reference_normals, pair.reference.len(), "reference")?;
    let to_ref = NearestNeighbours::new(&pair.reference);
    let to_pred = NearestNeighbours::new(&pair.predicted);
    let mut acc = Vec::with_capacity(pair.predicted.len());
    let mut nc_acc = Vec::with_capacity(pair.predicted.len());
    for (i, p) in pair.predicted.iter().enumerate() {
        let (j, d) = to_ref.nearest(p);
        acc.push(d);
        nc_acc.push(pn[i].dot(&rn[j]).abs().min(1.0));
    }
    let mut comp = Vec::with_capacity(pair.reference.len());
    let mut nc_comp = Vec::with_capacity(pair.reference.len());
    for (j, r) in pair.reference.iter().enumerate() {
        let (i, d) = to_pred.nearest(r);
        comp.push(d);
        nc_comp.push(rn[j].dot(&pn[i]).abs().min(1.0));
    }
    Ok(CloudMetrics {
        acc_mean: mean(&acc),
        acc_median: median(&acc),
        comp_mean: mean(&comp),
        comp_median: median(&comp),
        nc_mean: 0.5 * (mean(&nc_acc) + mean(&nc_comp)),
        nc_median: 0.5 * (median(&nc_acc) + median(&nc_comp)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthAlign {
    /// Scale the prediction by `median(gt) / median(pred)` first.
    #[default]
    #[serde(alias = "med")]
    Median,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    /// Mean absolute relative error.
    pub rel: f64,
    /// Percentage of pixels within the ratio threshold.
    pub tau: f64,
}

/// Absolute relative error and inlier ratio over pixels with positive,
/// finite ground truth and finite prediction.
pub fn depth_rel_tau(pred: &[f64], gt: &[f64], align: DepthAlign) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "depth maps differ in size: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let (p, g): (Vec<f64>, Vec<f64>) = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| p.is_finite() && g.is_finite() && **g > 0.0)
        .map(|(p, g)| (*p, *g))
        .unzip();
    if g.is_empty() {
        return Err(Error::Contract("no valid pixels to evaluate".into()));
    }
    let scale = match align {
        DepthAlign::None => 1.0,
        DepthAlign::Median => {
            let mp = median(&p);
            if !(mp > 0.0) {
                return Err(Error::Domain(format!("median predicted depth {mp} is not positive")));
            }
            median(&g) / mp
        }
    };
    let mut rel = 0.0;
    let mut inliers = 0usize;
    for (&p, &g) in p.iter().zip(&g) {
        let p = p * scale;
        rel += (p - g).abs() / g;
        if p > 0.0 && (p / g).max(g / p) < TAU_THRESHOLD {
            inliers += 1;
        }
    }
    Ok(DepthMetrics {
        rel: rel / g.len() as f64,
        tau: 100.0 * inliers as f64 / g.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CloudRow {
    pub scene: String,
    pub acc_mean: f64,
    pub acc_med: f64,
    pub comp_mean: f64,
    pub comp_med: f64,
    pub nc_mean: f64,
    pub nc_med: f64,
}

impl CloudRow {
    pub fn new(scene: impl Into<String>, m: &CloudMetrics) -> Self {
        Self {
            scene: scene.into(),
            acc_mean: m.acc_mean,
            acc_med: m.acc_median,
            comp_mean: m.comp_mean,
            comp_med: m.comp_median,
            nc_mean: m.nc_mean,
            nc_med: m.nc_median,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthRow {
    pub scene: String,
    pub view: usize,
    pub rel: f64,
    pub tau: f64,
}
