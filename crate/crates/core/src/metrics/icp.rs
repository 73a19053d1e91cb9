use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::NearestNeighbours;
use crate::error::{Error, Result};
use crate::geometry::{procrustes, PoseSE3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the RMS changes by less than this between iterations.
    pub tolerance: f64,
    /// Matches farther apart than this are ignored; `None` keeps all.
    pub max_distance: Option<f64>,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-9,
            max_distance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source coordinates onto the target.
    pub transform: PoseSE3,
    /// RMS nearest-neighbour distance under `transform`.
    pub rms: f64,
    pub iterations: usize,
}

struct Matches {
    src: Vec<Vector3<f64>>,
    dst: Vec<Vector3<f64>>,
    rms: f64,
}

fn match_points(source: &[[f64; 3]], index: &NearestNeighbours, target: &[[f64; 3]], t: &PoseSE3, gate: Option<f64>) -> Matches {
    let mut m = Matches {
        src: Vec::with_capacity(source.len()),
        dst: Vec::with_capacity(source.len()),
        rms: 0.0,
    };
    let mut sq = 0.0;
    for s in source {
        let s = Vector3::from(*s);
        let (j, d) = index.nearest(&t.apply(&s).into());
        if gate.is_some_and(|g| d > g) {
            continue;
        }
        sq += d * d;
        m.src.push(s);
        m.dst.push(Vector3::from(target[j]));
    }
    m.rms = if m.src.is_empty() {
        f64::INFINITY
    } else {
        (sq / m.src.len() as f64).sqrt()
    };
    m
}

/// Point-to-point ICP: alternate nearest-neighbour matching with a
/// closed-form rigid fit, starting from the identity.
pub fn icp(source: &[[f64; 3]], target: &[[f64; 3]], cfg: &IcpConfig) -> Result<IcpResult> {
    if source.len() < 3 || target.len() < 3 {
        return Err(Error::Rank(format!(
            "ICP needs at least 3 points per cloud, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let index = NearestNeighbours::new(target);
    let mut transform = PoseSE3::identity();
    let mut m = match_points(source, &index, target, &transform, cfg.max_distance);
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if m.src.len() < 3 {
            return Err(Error::Rank("fewer than 3 matches survive the distance gate".into()));
        }
        let next = procrustes(&m.src, &m.dst, None)?;
        let nm = match_points(source, &index, target, &next, cfg.max_distance);
        iterations += 1;
        let change = (m.rms - nm.rms).abs();
        transform = next;
        m = nm;
        if change < cfg.tolerance {
            break;
        }
    }
    Ok(IcpResult {
        transform,
        rms: m.rms,
        iterations,
    })
}
