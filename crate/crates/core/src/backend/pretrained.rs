//! Adapter description for a pretrained latent-diffusion checkpoint.
//!
//! This build carries no neural-network runtime, so [`open`] resolves the
//! configuration and checkpoint location and then reports the backend as
//! unavailable. The layer manifest below is what a Stable Diffusion v1 U-Net
//! exposes, and is what an adapter has to declare.

use std::path::{Path, PathBuf};

use super::{Backend, BackendSelection, LayerInfo};
use crate::error::{DdError, Result};

pub const DEFAULT_MODEL_ID: &str = "CompVis/stable-diffusion-v1-4";
pub const CACHE_ENV: &str = "DD_MODEL_CACHE";

pub fn default_model_id() -> String {
    DEFAULT_MODEL_ID.to_owned()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedConfig {
    pub model_id: String,
    pub device: String,
    pub cache_dir: PathBuf,
}

impl PretrainedConfig {
    /// Cache directory from `DD_MODEL_CACHE`, else `$HOME/.cache/dd/models`.
    pub fn from_selection(selection: &BackendSelection) -> Self {
        Self::with_cache(selection, std::env::var_os(CACHE_ENV).map(PathBuf::from))
    }

    pub fn with_cache(selection: &BackendSelection, cache: Option<PathBuf>) -> Self {
        let cache_dir = cache.unwrap_or_else(|| {
            let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
            home.join(".cache").join("dd").join("models")
        });
        Self {
            model_id: selection.model_id.clone(),
            device: selection.device.clone(),
            cache_dir,
        }
    }

    /// Where the checkpoint for `model_id` is expected, `org/name` mapped to `org--name`.
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.cache_dir.join(self.model_id.replace('/', "--"))
    }
}

/// Cross-attention layers of a Stable Diffusion v1 U-Net at 512x512 output:
/// two per down block at 64, 32, 16, one in the middle block at 8, three per
/// up block at 16, 32, 64. Every layer has 8 heads.
pub fn sd_v1_layer_manifest() -> Vec<LayerInfo> {
    let mut out = Vec::new();
    let mut push = |name: String, resolution: usize| {
        out.push(LayerInfo {
            id: out.len(),
            name,
            resolution,
            heads: 8,
        })
    };
    for (block, res) in [64, 32, 16].into_iter().enumerate() {
        for a in 0..2 {
            push(format!("down_blocks.{block}.attentions.{a}.transformer_blocks.0.attn2"), res);
        }
    }
    push("mid_block.attentions.0.transformer_blocks.0.attn2".into(), 8);
    for (block, res) in [16, 32, 64].into_iter().enumerate() {
        for a in 0..3 {
            push(
                format!("up_blocks.{}.attentions.{a}.transformer_blocks.0.attn2", block + 1),
                res,
            );
        }
    }
    out
}

fn describe(dir: &Path) -> String {
    if dir.is_dir() {
        format!("checkpoint found at {}", dir.display())
    } else {
        format!("no checkpoint at {}", dir.display())
    }
}

/// Opens the pretrained backend.
pub fn open(config: &PretrainedConfig) -> Result<Box<dyn Backend>> {
    Err(DdError::Unavailable(format!(
        "pretrained backend {:?} on {:?}: this build has no inference runtime ({})",
        config.model_id,
        config.device,
        describe(&config.checkpoint_dir())
    )))
}
