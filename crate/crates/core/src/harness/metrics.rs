use crate::attention::CrossAttentionMaps;
use crate::error::{DdError, Result};
use crate::pipeline::RunRecord;
use crate::regions::{rasterize_box, BoundingBox, RegionDirective};
use crate::tensor::Latent;

/// Head-, layer- and token-averaged map of the directive's tokens over the
/// layers at the highest resolution present (the latent-resolution tier).
pub fn directed_map(maps: &CrossAttentionMaps, slots: &[usize]) -> Result<(usize, Vec<f64>)> {
    let side = maps
        .layers()
        .iter()
        .map(|l| l.side())
        .max()
        .ok_or_else(|| DdError::UndefinedMetric("no attention layers".into()))?;
    let mut avg = vec![0.0f64; side * side];
    let mut count = 0usize;
    for layer in maps.layers().iter().filter(|l| l.side() == side) {
        for &slot in slots {
            for h in 0..layer.heads() {
                for (p, a) in avg.iter_mut().enumerate() {
                    *a += f64::from(layer.get(h, p, slot));
                }
                count += 1;
            }
        }
    }
    if count > 0 {
        avg.iter_mut().for_each(|a| *a /= count as f64);
    }
    Ok((side, avg))
}

/// Share of the directed tokens' attention that falls inside the box.
pub fn attention_mass_metric(maps: &CrossAttentionMaps, directive: &RegionDirective) -> Result<f64> {
    directive.validate_for_prompt(maps.prompt_len())?;
    let slots: Vec<usize> = directive.slots().collect();
    let (side, avg) = directed_map(maps, &slots)?;
    let inside = rasterize_box(&directive.bbox, side)?;
    let total: f64 = avg.iter().sum();
    if !(total > 0.0) {
        return Err(DdError::UndefinedMetric(format!(
            "directed tokens {:?} carry no attention",
            directive.token_indices
        )));
    }
    let in_box: f64 = avg
        .iter()
        .zip(inside.values())
        .filter(|(_, &m)| m > 0.0)
        .map(|(&a, _)| a)
        .sum();
    Ok(in_box / total)
}

/// Intersection over union in fractional coordinates.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let w = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let h = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// `||z_{k+1} - z_k||` for each step of a trajectory.
pub fn latent_step_norms(latents: &[Latent]) -> Result<Vec<f64>> {
    latents
        .windows(2)
        .map(|w| {
            w[0].ensure_same_shape(&w[1], "trajectory")?;
            let sq: f64 = w[0]
                .data()
                .iter()
                .zip(w[1].data())
                .map(|(a, b)| {
                    let d = f64::from(*b) - f64::from(*a);
                    d * d
                })
                .sum();
            Ok(sq.sqrt())
        })
        .collect()
}

/// Step norms of a complete run, one entry per denoising step.
pub fn gradient_norm_trace(record: &RunRecord) -> Result<Vec<f64>> {
    let expected = record.config.total_steps + 1;
    if record.latents.len() != expected {
        return Err(DdError::validation(
            "latents",
            format!(
                "trajectory holds {} latents, {expected} expected",
                record.latents.len()
            ),
        ));
    }
    latent_step_norms(&record.latents)
}
