//! Shared fixtures for the benchmarks.

use dd_core::backend::toy::ToyBackend;
use dd_core::{BoundingBox, CrossAttentionMaps, DenoiseConfig, LayerAttention, RegionDirective, TOKEN_SLOTS};

pub const PROMPT: &str = "a bear watching a flying bird";

pub fn bear_top_left() -> RegionDirective {
    RegionDirective::new(BoundingBox::new(0.0, 0.5, 0.0, 0.5).unwrap(), vec![3], "bear").unwrap()
}

/// Maps with the layer sides of a 64x64 latent UNet, two heads each.
/// Values are a cheap deterministic pattern, not normalized attention.
pub fn unet_like_maps(prompt_len: usize) -> CrossAttentionMaps {
    let sides = [64, 64, 32, 32, 16, 16, 8, 16, 16, 16, 32, 32, 32, 64, 64, 64];
    let layers = sides
        .iter()
        .enumerate()
        .map(|(id, &side)| {
            let data = (0..2 * side * side * TOKEN_SLOTS)
                .map(|i| ((i * 2654435761) % 1000) as f32 / 1000.0)
                .collect();
            LayerAttention::new(id, side, 2, data).unwrap()
        })
        .collect();
    CrossAttentionMaps::new(prompt_len, layers).unwrap()
}

pub fn toy() -> ToyBackend {
    ToyBackend::new()
}

/// A short run so one benchmark iteration stays in the millisecond range.
pub fn short_config(edit_steps: usize) -> DenoiseConfig {
    DenoiseConfig {
        total_steps: 20,
        edit_steps,
        ..DenoiseConfig::default()
    }
}
