use std::fmt::Write as _;

use serde::Serialize;

use super::icp::{icp, IcpConfig};
use super::{mean, NearestNeighbours};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, PointMap};
use crate::net::{infer_pair, ModelConfig, PromptSet, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyRow {
    #[serde(rename = "ref")]
    pub reference: usize,
    pub src_a: usize,
    pub src_b: usize,
    /// Mean pixelwise distance between the two reference-frame pointmaps.
    pub raw_disc: f64,
    /// Mean nearest-neighbour distance after rigidly registering `b` onto `a`.
    pub icp_disc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDifference {
    pub reference: usize,
    pub src_a: usize,
    pub src_b: usize,
    /// Per-pixel `z_a − z_b` in the reference frame.
    pub diff: DepthMap,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
    pub differences: Vec<PairDifference>,
}

impl ConsistencyReport {
    pub fn extend(&mut self, other: ConsistencyReport) {
        self.rows.extend(other.rows);
        self.differences.extend(other.differences);
    }
}

/// Mean of the raw discrepancy column; zero for an empty table.
pub fn mean_discrepancy(rows: &[ConsistencyRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    mean(&rows.iter().map(|r| r.raw_disc).collect::<Vec<_>>())
}

pub fn depth_difference(a: &PointMap, b: &PointMap) -> DepthMap {
    let data = a.points.iter().zip(&b.points).map(|(p, q)| p[2] - q[2]).collect();
    DepthMap {
        width: a.width,
        height: a.height,
        data,
    }
}

fn icp_discrepancy(a: &PointMap, b: &PointMap, cfg: &IcpConfig) -> Result<f64> {
    let fit = icp(&b.points, &a.points, cfg)?;
    let index = NearestNeighbours::new(&a.points);
    let d: Vec<f64> = b
        .points
        .iter()
        .map(|p| index.nearest(&fit.transform.apply(&(*p).into()).into()).1)
        .collect();
    Ok(mean(&d))
}

/// Compares the reference-branch pointmaps of `(reference, a)` and
/// `(reference, b)` for every pair of distinct source views `a < b`.
pub fn diagnose_consistency(
    model: &ModelConfig,
    weights: &Weights,
    prompts: Option<&PromptSet>,
    images: &[Vec<f64>],
    reference: usize,
    icp_cfg: &IcpConfig,
) -> Result<ConsistencyReport> {
    if images.len() < 2 {
        return Err(Error::Input("consistency diagnosis needs at least 2 views".into()));
    }
    if reference >= images.len() {
        return Err(Error::Input(format!(
            "reference view {reference} out of range for {} views",
            images.len()
        )));
    }
    let sources: Vec<usize> = (0..images.len()).filter(|&s| s != reference).collect();
    let maps = sources
        .iter()
        .map(|&s| Ok(infer_pair(model, weights, prompts, &images[reference], &images[s])?.0))
        .collect::<Result<Vec<PointMap>>>()?;
    let mut report = ConsistencyReport::default();
    for i in 0..sources.len() {
        for j in i + 1..sources.len() {
            let (a, b) = (&maps[i], &maps[j]);
            report.rows.push(ConsistencyRow {
                reference,
                src_a: sources[i],
                src_b: sources[j],
                raw_disc: a.mean_distance(b),
                icp_disc: icp_discrepancy(a, b, icp_cfg)?,
            });
            report.differences.push(PairDifference {
                reference,
                src_a: sources[i],
                src_b: sources[j],
                diff: depth_difference(a, b),
            });
        }
    }
    Ok(report)
}

/// Blue (negative) through white to red (positive), clamped to `±bound`.
fn diverging(v: f64, bound: f64) -> (u8, u8, u8) {
    let t = if bound > 0.0 { (v / bound).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        (255, fade(t), fade(t))
    } else {
        (fade(t), fade(t), 255)
    }
}

/// Heatmap of a signed grid on a symmetric scale. The scale bound is written
/// both as a caption and as `data-vmin`/`data-vmax` on the root element.
pub fn render_heatmap_svg(grid: &DepthMap, title: &str) -> String {
    const CELL: usize = 4;
    let bound = grid.data.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { m });
    let (w, h) = (grid.width * CELL, grid.height * CELL);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" data-vmin="{}" data-vmax="{bound}">"#,
        h + 20,
        -bound
    );
    let _ = writeln!(s, "<title>{title}</title>");
    for y in 0..grid.height {
        for x in 0..grid.width {
            let (r, g, b) = diverging(grid.at(x, y), bound);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="rgb({r},{g},{b})"/>"#,
                x * CELL,
                y * CELL
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="2" y="{}" font-size="11" font-family="monospace">{title}  scale [{:.4e}, {:.4e}]</text>"#,
        h + 14,
        -bound,
        bound
    );
    s.push_str("</svg>\n");
    s
}
