//! Diagnostics: step-norm traces, attention heatmaps and contact sheets.

use std::fmt::Write;

use crate::attention::{CrossAttentionMaps, TOKEN_SLOTS};
use crate::backend::Backend;
use crate::error::{DdError, Result};
use crate::harness::metrics::{directed_map, gradient_norm_trace};
use crate::pipeline::RunRecord;
use crate::tensor::{encode_png, Image};

pub const HEATMAP_UPSCALE: usize = 8;

/// `step,norm` CSV of the run's per-step latent change.
pub fn gradient_norm_csv(record: &RunRecord) -> Result<String> {
    let norms = gradient_norm_trace(record)?;
    let mut out = String::from("step,norm\n");
    for (k, n) in norms.iter().enumerate() {
        writeln!(out, "{k},{n}").expect("writing to a String");
    }
    Ok(out)
}

/// Unedited conditional maps at `latents[step]` of a recorded run.
pub fn capture_maps_at(backend: &dyn Backend, record: &RunRecord, step: usize) -> Result<CrossAttentionMaps> {
    let total = record.config.total_steps;
    if step >= total || step >= record.latents.len() {
        return Err(DdError::validation(
            "step",
            format!(
                "must be below {} for this run, got {step}",
                total.min(record.latents.len())
            ),
        ));
    }
    let cond = backend.encode_text(&record.prompt)?;
    let scheduler = backend.scheduler(total)?;
    let info = scheduler.step_info(step);
    let (_, maps) = backend.denoise_cond(&record.latents[step], &cond, &info, None)?;
    Ok(maps)
}

/// Grayscale raster, one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heatmap {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl Heatmap {
    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, &self.pixels, image::ExtendedColorType::L8)
    }
}

/// Min-max normalized map of one token (1-based, start marker is 1), averaged
/// over heads of the highest-resolution layers, upsampled by `upscale`.
pub fn attention_heatmap(maps: &CrossAttentionMaps, token_index: usize, upscale: usize) -> Result<Heatmap> {
    if !(1..=TOKEN_SLOTS).contains(&token_index) {
        return Err(DdError::validation(
            "token_index",
            format!("must lie in 1..={TOKEN_SLOTS}, got {token_index}"),
        ));
    }
    if upscale == 0 {
        return Err(DdError::validation("upscale", "must be at least 1"));
    }
    let (side, map) = directed_map(maps, &[token_index - 1])?;
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let levels: Vec<u8> = map
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    let out_side = side * upscale;
    let mut pixels = Vec::with_capacity(out_side * out_side);
    for y in 0..out_side {
        for x in 0..out_side {
            pixels.push(levels[(y / upscale) * side + x / upscale]);
        }
    }
    Ok(Heatmap {
        width: out_side as u32,
        height: out_side as u32,
        pixels,
    })
}

/// Tiles equally sized images row-major into `columns` columns; unused tiles
/// stay black.
pub fn contact_sheet(images: &[Image], columns: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| DdError::validation("images", "at least one image is required"))?;
    if columns == 0 {
        return Err(DdError::validation("columns", "must be at least 1"));
    }
    let (w, h) = (first.width as usize, first.height as usize);
    if let Some((i, bad)) = images
        .iter()
        .enumerate()
        .find(|(_, im)| im.width != first.width || im.height != first.height)
    {
        return Err(DdError::validation(
            format!("images[{i}]"),
            format!("{}x{} differs from {w}x{h}", bad.width, bad.height),
        ));
    }
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(cols);
    let sheet_w = cols * w;
    let mut pixels = vec![0u8; sheet_w * rows * h * 3];
    for (i, im) in images.iter().enumerate() {
        let (ox, oy) = ((i % cols) * w, (i / cols) * h);
        for y in 0..h {
            let src = &im.pixels[y * w * 3..(y + 1) * w * 3];
            let at = ((oy + y) * sheet_w + ox) * 3;
            pixels[at..at + w * 3].copy_from_slice(src);
        }
    }
    Image::new(sheet_w as u32, (rows * h) as u32, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::LayerAttention;

    #[test]
    fn heatmap_normalizes_and_upsamples() {
        let mut layer = LayerAttention::new(0, 2, 1, vec![0.0; 4 * TOKEN_SLOTS]).unwrap();
        layer.set(0, 0, 4, 0.2);
        layer.set(0, 1, 4, 0.6);
        layer.set(0, 3, 4, 1.0);
        let maps = CrossAttentionMaps::new(6, vec![layer]).unwrap();
        let hm = attention_heatmap(&maps, 5, 3).unwrap();
        assert_eq!((hm.width, hm.height), (6, 6));
        assert_eq!(hm.pixels[0], 51);
        assert_eq!(hm.pixels[3], 153);
        assert_eq!(hm.pixels[3 * 6], 0);
        assert_eq!(hm.pixels[35], 255);
        let flat = attention_heatmap(&maps, 1, 1).unwrap();
        assert!(flat.pixels.iter().all(|&p| p == 0));
        assert!(attention_heatmap(&maps, 0, 8).is_err());
        assert!(attention_heatmap(&maps, 78, 8).is_err());
        let png = hm.to_png().unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }

    #[test]
    fn contact_sheet_layout() {
        let tile = |v: u8| Image::new(2, 1, vec![v; 6]).unwrap();
        let sheet = contact_sheet(&[tile(1), tile(2), tile(3)], 2).unwrap();
        assert_eq!((sheet.width, sheet.height), (4, 2));
        assert_eq!(&sheet.pixels[..12], &[1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2]);
        assert_eq!(&sheet.pixels[12..], &[3, 3, 3, 3, 3, 3, 0, 0, 0, 0, 0, 0]);
        assert!(contact_sheet(&[tile(1), Image::new(1, 1, vec![0; 3]).unwrap()], 2).is_err());
        assert!(contact_sheet(&[], 2).is_err());
    }
}
