//! Run configurations: one JSON file per command, overridden by flags, and
//! written back fully resolved next to the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ttr_core::align::AlignConfig;
use ttr_core::eval::CloudAlign;
use ttr_core::metrics::{DepthAlign, IcpConfig};
use ttr_core::net::{ModelConfig, PromptMode};
use ttr_core::pretrain::TrainConfig;
use ttr_core::scene::GenerationConfig;
use ttr_core::ttt::TttConfig;
use ttr_core::{Error, Result};

pub const RESOLVED_CONFIG: &str = "config.json";

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn write_resolved<T: Serialize>(dir: &Path, config: &T) -> Result<()> {
    let path = dir.join(RESOLVED_CONFIG);
    let text = serde_json::to_string_pretty(config).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    fs::write(&path, text + "\n").map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Input(format!("`{key}` is required (flag or config key)")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub scene: GenerationConfig,
    pub out: Option<PathBuf>,
}

/// Where pretraining scenes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: GenerationConfig,
    /// Seed of the first generated scene; later pools continue the sequence.
    pub first_seed: u64,
    /// Scenes held in memory at once.
    pub pool: usize,
    /// Steps trained on one pool before the next is generated.
    pub refresh_steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: GenerationConfig::default(),
            first_seed: 1000,
            pool: 64,
            refresh_steps: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Seed of the weight initialisation.
    pub init_seed: u64,
    /// Train on this one scene archive instead of generated scenes.
    pub overfit: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub out: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            init_seed: 0,
            overfit: None,
            checkpoint_every: 500,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub weights: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub prompt_len: usize,
    pub prompt_mode: PromptMode,
    /// Seed of the prompt initialisation.
    pub prompt_seed: u64,
    pub ttt: TttConfig,
    pub out: Option<PathBuf>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            weights: None,
            scene: None,
            prompt_len: model.prompt_len,
            prompt_mode: model.prompt_mode,
            prompt_seed: 0,
            ttt: TttConfig::default(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub weights: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    /// Ordered `(reference, source)` pairs; all ordered pairs when absent.
    pub pairs: Option<Vec<[usize; 2]>>,
    pub align: AlignConfig,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// A reconstruction directory or a scene archive.
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    /// Row label in the output tables; the ground-truth directory name by default.
    pub name: Option<String>,
    pub depth_align: DepthAlign,
    pub cloud_align: CloudAlign,
    pub icp: IcpConfig,
    pub out: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pred: None,
            gt: None,
            name: None,
            depth_align: DepthAlign::default(),
            cloud_align: CloudAlign::None,
            icp: IcpConfig::default(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub weights: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub references: Vec<usize>,
    pub icp: IcpConfig,
    pub out: Option<PathBuf>,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            weights: None,
            prompts: None,
            scene: None,
            references: vec![0],
            icp: IcpConfig::default(),
            out: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults() {
        let a = AdaptConfig::default();
        assert_eq!(a.prompt_len, 32);
        assert_eq!(a.prompt_mode, PromptMode::PerLayer);
        assert_eq!(a.ttt.epochs, 1);
        assert_eq!(a.ttt.triplet_cap, 165);
        assert_eq!(EvalConfig::default().depth_align, DepthAlign::Median);
        assert_eq!(ReconstructConfig::default().align.iterations, 500);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<AdaptConfig>(r#"{"ttt": {"lr": 1e-4, "momentum": 0.9}}"#).unwrap_err();
        assert!(err.to_string().contains("momentum"));
        assert!(serde_json::from_str::<SynthConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn partial_files_keep_defaults() {
        let c: EvalConfig = serde_json::from_str(r#"{"depth_align": "med", "cloud_align": "icp"}"#).unwrap();
        assert_eq!(c.depth_align, DepthAlign::Median);
        assert_eq!(c.cloud_align, CloudAlign::Icp);
        assert_eq!(c.icp, IcpConfig::default());
    }
}
