//! On-disk scene archive: one little-endian grid file per view plus a JSON
//! manifest holding seed, generation config, primitives, intrinsics and poses.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GenerationConfig, Primitive, SceneBundle, View, CHANNELS};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Intrinsics, PoseSE3};

pub const SCENE_MAGIC: &[u8; 8] = b"T3RSCENE";
pub const ARCHIVE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Contents of one grid file: `C` image channels (possibly zero) followed by depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub image: Vec<f64>,
    pub depth: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    config: GenerationConfig,
    primitives: Vec<Primitive>,
    views: Vec<ManifestView>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestView {
    file: String,
    intrinsics: Intrinsics,
    /// World-from-camera `[R | t]`, row-major.
    pose: [f64; 12],
}

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    let n = grid.width * grid.height;
    if grid.image.len() != n * grid.channels || grid.depth.len() != n {
        return Err(Error::Input(format!(
            "grid payload does not match {}×{}×{}",
            grid.width, grid.height, grid.channels
        )));
    }
    let mut buf = Vec::with_capacity(24 + 8 * (grid.image.len() + n));
    buf.extend_from_slice(SCENE_MAGIC);
    for v in [ARCHIVE_VERSION, grid.width as u32, grid.height as u32, grid.channels as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in grid.image.iter().chain(&grid.depth) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..8] != SCENE_MAGIC {
        return Err(Error::format(path, "not a scene grid file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != ARCHIVE_VERSION {
        return Err(Error::format(path, format!("unsupported grid version {version}")));
    }
    let (width, height, channels) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = width * height;
    let expected = 24 + 8 * n * (channels + 1);
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {width}×{height}×{channels}, found {}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (image, depth) = values.split_at(n * channels);
    Ok(Grid {
        width,
        height,
        channels,
        image: image.to_vec(),
        depth: depth.to_vec(),
    })
}

pub fn write_archive(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut views = Vec::with_capacity(bundle.views.len());
    for (i, view) in bundle.views.iter().enumerate() {
        let file = format!("view_{i:03}.bin");
        write_grid(
            &dir.join(&file),
            &Grid {
                width: view.depth.width,
                height: view.depth.height,
                channels: CHANNELS,
                image: view.image.clone(),
                depth: view.depth.data.clone(),
            },
        )?;
        views.push(ManifestView {
            file,
            intrinsics: view.intrinsics,
            pose: view.pose.to_row_major_3x4(),
        });
    }
    let manifest = Manifest {
        format: String::from_utf8_lossy(SCENE_MAGIC).into_owned(),
        version: ARCHIVE_VERSION,
        seed: bundle.seed,
        config: bundle.config.clone(),
        primitives: bundle.primitives.clone(),
        views,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_archive(dir: &Path) -> Result<SceneBundle> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if manifest.format.as_bytes() != SCENE_MAGIC || manifest.version != ARCHIVE_VERSION {
        return Err(Error::format(&path, "unsupported scene manifest"));
    }
    let mut views = Vec::with_capacity(manifest.views.len());
    for mv in &manifest.views {
        let file = dir.join(&mv.file);
        let grid = read_grid(&file)?;
        if grid.channels != CHANNELS
            || grid.width != mv.intrinsics.width
            || grid.height != mv.intrinsics.height
        {
            return Err(Error::format(&file, "grid does not match manifest intrinsics"));
        }
        views.push(View {
            image: grid.image,
            depth: DepthMap::new(grid.width, grid.height, grid.depth)?,
            pose: PoseSE3::from_row_major_3x4(&mv.pose),
            intrinsics: mv.intrinsics,
        });
    }
    if let Some(first) = views.first() {
        let (w, h) = (first.depth.width, first.depth.height);
        if views.iter().any(|v| v.depth.width != w || v.depth.height != h) {
            return Err(Error::format(&path, "views differ in image size"));
        }
    }
    Ok(SceneBundle {
        seed: manifest.seed,
        config: manifest.config,
        primitives: manifest.primitives,
        views,
        correspondence: Vec::new(),
    })
}
