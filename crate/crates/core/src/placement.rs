//! Placement finetuning: move an object of a recorded run by cyclically
//! translating its masked latents and re-running the late denoising steps
//! with per-step background compositing.

use serde::{Deserialize, Serialize};

use crate::attention::CrossAttentionMaps;
use crate::backend::{Backend, Scheduler, SchedulerState, TextEmbedding};
use crate::error::{DdError, Result};
use crate::pipeline::{cfg_combine, finish, new_run_id, Conditioning, DenoiseConfig, RunKind, RunRecord, Trajectory};
use crate::regions::{rasterize_box, MaskGrid, RegionDirective};
use crate::tensor::{Latent, LatentShape};

pub const DEFAULT_THRESHOLD_FRACTION: f32 = 0.5;
pub const DEFAULT_PF_STEPS: usize = 10;

/// Binary object mask at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    pub grid: MaskGrid,
    pub token_indices: Vec<usize>,
    pub threshold_fraction: f32,
}

impl ObjectMask {
    /// Mask from explicit values; anything non-zero counts as set.
    pub fn from_bits(width: usize, height: usize, bits: &[bool]) -> Result<Self> {
        let values = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            grid: MaskGrid::from_vec(width, height, values)?,
            token_indices: Vec::new(),
            threshold_fraction: 0.0,
        })
    }

    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.grid.get(x, y) != 0.0
    }

    pub fn bits(&self) -> Vec<bool> {
        self.grid.values().iter().map(|&v| v != 0.0).collect()
    }
}

/// Integer offset in latent pixels, bounded by the latent size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    dx: i64,
    dy: i64,
}

impl Translation {
    pub fn new(dx: i64, dy: i64, shape: LatentShape) -> Result<Self> {
        if dx.unsigned_abs() >= shape.width as u64 {
            return Err(DdError::validation(
                "dx",
                format!("|dx| must be below the latent width {}, got {dx}", shape.width),
            ));
        }
        if dy.unsigned_abs() >= shape.height as u64 {
            return Err(DdError::validation(
                "dy",
                format!("|dy| must be below the latent height {}, got {dy}", shape.height),
            ));
        }
        Ok(Self { dx, dy })
    }

    pub fn dx(&self) -> i64 {
        self.dx
    }
    pub fn dy(&self) -> i64 {
        self.dy
    }
    pub fn is_identity(&self) -> bool {
        self.dx == 0 && self.dy == 0
    }
}

/// Moves every element of a row-major `width x height` plane by `(dx, dy)`
/// with wrap-around: `out[(y + dy) mod h][(x + dx) mod w] = plane[y][x]`.
pub fn cyclic_translate<T: Copy>(plane: &[T], width: usize, height: usize, dx: i64, dy: i64) -> Vec<T> {
    assert_eq!(plane.len(), width * height, "plane size");
    if plane.is_empty() {
        return Vec::new();
    }
    let sx = dx.rem_euclid(width as i64) as usize;
    let sy = dy.rem_euclid(height as i64) as usize;
    let mut out = plane.to_vec();
    for y in 0..height {
        let ty = (y + sy) % height;
        for x in 0..width {
            out[ty * width + (x + sx) % width] = plane[y * width + x];
        }
    }
    out
}

/// [`cyclic_translate`] applied to every channel of a latent.
pub fn translate_latent(z: &Latent, dx: i64, dy: i64) -> Latent {
    let shape = z.shape();
    let plane = shape.pixels();
    let data = z
        .data()
        .chunks(plane)
        .flat_map(|ch| cyclic_translate(ch, shape.width, shape.height, dx, dy))
        .collect();
    Latent::from_vec(shape, data).expect("translation preserves length")
}

pub fn translate_mask(mask: &ObjectMask, dx: i64, dy: i64) -> ObjectMask {
    let g = &mask.grid;
    let values = cyclic_translate(g.values(), g.width(), g.height(), dx, dy);
    ObjectMask {
        grid: MaskGrid::from_vec(g.width(), g.height(), values).expect("translation preserves values"),
        ..mask.clone()
    }
}

/// Thresholds the directive's tokens' final attention, averaged over heads
/// and the layers at latent resolution `side`, at `threshold_fraction` of the
/// in-box maximum, and clips the result to the box.
pub fn extract_object_mask(
    final_attention: &CrossAttentionMaps,
    directive: &RegionDirective,
    threshold_fraction: f32,
    side: usize,
) -> Result<ObjectMask> {
    if !(0.0..=1.0).contains(&threshold_fraction) {
        return Err(DdError::validation("threshold_fraction", "must lie in [0, 1]"));
    }
    directive.validate_for_prompt(final_attention.prompt_len())?;
    let layers: Vec<_> = final_attention
        .layers()
        .iter()
        .filter(|l| l.side() == side)
        .collect();
    if layers.is_empty() {
        return Err(DdError::validation(
            "final_attention",
            format!("no cross-attention layer at latent resolution {side}"),
        ));
    }
    let positions = side * side;
    let mut avg = vec![0.0f64; positions];
    let mut count = 0usize;
    for layer in &layers {
        for slot in directive.slots() {
            for h in 0..layer.heads() {
                for (p, a) in avg.iter_mut().enumerate() {
                    *a += f64::from(layer.get(h, p, slot));
                }
                count += 1;
            }
        }
    }
    avg.iter_mut().for_each(|a| *a /= count as f64);
    let inside = rasterize_box(&directive.bbox, side)?;
    let peak = avg
        .iter()
        .zip(inside.values())
        .filter(|(_, &m)| m > 0.0)
        .map(|(&a, _)| a)
        .fold(f64::NEG_INFINITY, f64::max);
    let cut = f64::from(threshold_fraction) * peak;
    let values: Vec<f32> = avg
        .iter()
        .zip(inside.values())
        .map(|(&a, &m)| if m > 0.0 && a >= cut { 1.0 } else { 0.0 })
        .collect();
    let grid = MaskGrid::from_vec(side, side, values)?;
    if grid.support() == 0 {
        return Err(DdError::DegenerateMask(format!(
            "no pixel of {:?} reaches {threshold_fraction} of the in-box peak",
            directive.label
        )));
    }
    Ok(ObjectMask {
        grid,
        token_indices: directive.token_indices.clone(),
        threshold_fraction,
    })
}

fn check_plane(z: &Latent, mask: &ObjectMask, ctx: &'static str) -> Result<()> {
    let s = z.shape();
    if mask.grid.width() != s.width || mask.grid.height() != s.height {
        return Err(DdError::Shape {
            context: ctx,
            expected: format!("{}x{} mask", s.width, s.height),
            actual: format!("{}x{}", mask.grid.width(), mask.grid.height()),
        });
    }
    Ok(())
}

/// Three-region initial latent: the translated object where `X(M)` is set,
/// the translated start latent in holes the object left (`M` but not `X(M)`),
/// and `z_n` everywhere else.
pub fn pf_compose_initial(
    z_n: &Latent,
    z_start: &Latent,
    mask: &ObjectMask,
    translation: Translation,
) -> Result<Latent> {
    z_n.ensure_same_shape(z_start, "placement initial latents")?;
    check_plane(z_n, mask, "placement mask")?;
    let (dx, dy) = (translation.dx, translation.dy);
    let moved = translate_mask(mask, dx, dy);
    let xz = translate_latent(z_n, dx, dy);
    let xs = translate_latent(z_start, dx, dy);
    let shape = z_n.shape();
    let mut out = z_n.clone();
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let i = z_n.index(c, y, x);
                if moved.is_set(x, y) {
                    out.data_mut()[i] = xz.data()[i];
                } else if mask.is_set(x, y) {
                    out.data_mut()[i] = xs.data()[i];
                }
            }
        }
    }
    Ok(out)
}

/// `z' * !X(M) + X(z) * X(M)`.
pub fn pf_step_composite(
    z_new: &Latent,
    z_source: &Latent,
    mask: &ObjectMask,
    translation: Translation,
) -> Result<Latent> {
    z_new.ensure_same_shape(z_source, "placement composite")?;
    check_plane(z_new, mask, "placement mask")?;
    let moved = translate_mask(mask, translation.dx, translation.dy);
    let xz = translate_latent(z_source, translation.dx, translation.dy);
    let shape = z_new.shape();
    let mut out = z_new.clone();
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                if moved.is_set(x, y) {
                    let i = z_new.index(c, y, x);
                    out.data_mut()[i] = xz.data()[i];
                }
            }
        }
    }
    Ok(out)
}

/// Pixels whose content the initial composition replaces: `M ∪ X(M)` for a
/// real move, nothing for the identity.
fn changed_pixels(mask: &ObjectMask, translation: Translation) -> Vec<bool> {
    if translation.is_identity() {
        return vec![false; mask.grid.values().len()];
    }
    let moved = translate_mask(mask, translation.dx, translation.dy);
    mask.bits().iter().zip(moved.bits()).map(|(a, b)| *a || b).collect()
}

pub(crate) struct RoundTrip<'a> {
    pub backend: &'a dyn Backend,
    pub scheduler: &'a dyn Scheduler,
    pub cond: &'a TextEmbedding,
    pub uncond: &'a TextEmbedding,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl RoundTrip<'_> {
    /// Raises `z` from the noise level of step `n` to that of step `n - 1`,
    /// then takes one guided Euler step back to step `n`.
    fn apply(&self, z: &Latent, n: usize) -> Result<Latent> {
        let here = self.scheduler.step_info(n).sigma;
        let above = self.scheduler.step_info(n - 1);
        let extra = (above.sigma * above.sigma - here * here).max(0.0).sqrt();
        let noise = self.backend.sample_initial_latent(self.seed);
        let raised = z.zip_map(&noise, |a, e| (f64::from(a) + extra * f64::from(e)) as f32);
        let step = self
            .backend
            .denoise_step(&raised, self.cond, self.uncond, &above, None)?;
        let eps = cfg_combine(&step.noise_uncond, &step.noise_cond, self.guidance_scale)?;
        let dt = here - above.sigma;
        Ok(raised.zip_map(&eps, |a, e| (f64::from(a) + dt * f64::from(e)) as f32))
    }
}

/// Initial latent for placement finetuning at step `n`: the three-region
/// composition of [`pf_compose_initial`], followed on the changed pixels by
/// one add-noise/denoise round trip at the step's noise level.
pub fn pf_initialize(
    backend: &dyn Backend,
    source: &RunRecord,
    mask: &ObjectMask,
    translation: Translation,
    n: usize,
) -> Result<Latent> {
    let cond = backend.encode_text(&source.prompt)?;
    let uncond = backend.encode_text("")?;
    let scheduler = backend.scheduler(source.config.total_steps)?;
    let trip = RoundTrip {
        backend,
        scheduler: scheduler.as_ref(),
        cond: &cond,
        uncond: &uncond,
        guidance_scale: source.config.guidance_scale,
        seed: source.config.seed,
    };
    initialize_with(&trip, source, mask, translation, n)
}

fn initialize_with(
    trip: &RoundTrip<'_>,
    source: &RunRecord,
    mask: &ObjectMask,
    translation: Translation,
    n: usize,
) -> Result<Latent> {
    let (Some(z_start), Some(z_n)) = (source.latents.first(), source.latents.get(n)) else {
        return Err(DdError::validation(
            "edit_steps",
            format!(
                "source trajectory holds {} latents, step {n} requested",
                source.latents.len()
            ),
        ));
    };
    let composed = pf_compose_initial(z_n, z_start, mask, translation)?;
    let changed = changed_pixels(mask, translation);
    if n == 0 || !changed.iter().any(|&c| c) {
        return Ok(composed);
    }
    let refreshed = trip.apply(&composed, n)?;
    let shape = composed.shape();
    let mut out = composed;
    for c in 0..shape.channels {
        for (p, &hit) in changed.iter().enumerate() {
            if hit {
                let i = c * shape.pixels() + p;
                out.data_mut()[i] = refreshed.data()[i];
            }
        }
    }
    Ok(out)
}

/// Placement request as submitted by clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRequest {
    pub source_run_id: String,
    pub directive_label: String,
    pub dx: i64,
    pub dy: i64,
    #[serde(default = "default_pf_steps")]
    pub edit_steps: usize,
    #[serde(default = "default_threshold")]
    pub threshold_fraction: f32,
}

fn default_pf_steps() -> usize {
    DEFAULT_PF_STEPS
}

fn default_threshold() -> f32 {
    DEFAULT_THRESHOLD_FRACTION
}

fn checked_request(backend: &dyn Backend, source: &RunRecord, request: &PlacementRequest) -> Result<(ObjectMask, Translation)> {
    if !source.is_complete() {
        return Err(DdError::validation("source_run_id", "source run did not complete"));
    }
    let total = source.config.total_steps;
    let n = request.edit_steps;
    if n > total || source.latents.len() != total + 1 {
        return Err(DdError::validation(
            "edit_steps",
            format!("must be at most {total} with a complete source trajectory, got {n}"),
        ));
    }
    let directive = source
        .directives
        .iter()
        .find(|d| d.label == request.directive_label)
        .ok_or_else(|| {
            DdError::validation(
                "directive_label",
                format!("source run has no directive labelled {:?}", request.directive_label),
            )
        })?;
    let shape = backend.latent_shape();
    let translation = Translation::new(request.dx, request.dy, shape)?;
    let final_attention = source
        .final_attention
        .as_ref()
        .ok_or_else(|| DdError::validation("source_run_id", "source run has no final attention"))?;
    let mask = extract_object_mask(final_attention, directive, request.threshold_fraction, shape.width)?;
    Ok((mask, translation))
}

/// Runs every check `run_placement_finetune` performs before denoising.
pub fn validate_placement(backend: &dyn Backend, source: &RunRecord, request: &PlacementRequest) -> Result<()> {
    checked_request(backend, source, request).map(|_| ())
}

/// Re-renders `source` with the object of `directive_label` moved by
/// `(dx, dy)` latent pixels. The first `edit_steps` steps are taken from the
/// source; the rest are denoised anew with the moved object composited in
/// after every step.
pub fn run_placement_finetune(backend: &dyn Backend, source: &RunRecord, request: &PlacementRequest) -> Result<RunRecord> {
    let (mask, translation) = checked_request(backend, source, request)?;
    let total = source.config.total_steps;
    let n = request.edit_steps;

    let cond = backend.encode_text(&source.prompt)?;
    let uncond = backend.encode_text("")?;
    let scheduler = backend.scheduler(total)?;
    let trip = RoundTrip {
        backend,
        scheduler: scheduler.as_ref(),
        cond: &cond,
        uncond: &uncond,
        guidance_scale: source.config.guidance_scale,
        seed: source.config.seed,
    };
    let z = initialize_with(&trip, source, &mask, translation, n)?;

    let history = source.noise[n.saturating_sub(4)..n].to_vec();
    let mut traj = Trajectory::new(z, SchedulerState::from_history(history), source.config.seed);
    traj.latents = source.latents[..n].to_vec();
    traj.latents.push(traj.z.clone());
    traj.noise = source.noise[..n].to_vec();

    let config = DenoiseConfig {
        edit_steps: 0,
        ..source.config.clone()
    };
    let cx = Conditioning {
        backend,
        scheduler: scheduler.as_ref(),
        cond: &cond,
        uncond: &uncond,
        directives: &[],
        config: &config,
    };
    let outcome = cx.run(&mut traj, n..total, |k, z| {
        pf_step_composite(&z, &source.latents[k + 1], &mask, translation)
    });
    if n == total && traj.final_attention.is_none() {
        traj.final_attention = source.final_attention.clone();
    }
    let done = finish(backend, traj, outcome);
    Ok(RunRecord {
        run_id: new_run_id(),
        backend: backend.name().to_owned(),
        kind: RunKind::Placement {
            source_run_id: source.run_id.clone(),
            directive_label: request.directive_label.clone(),
            dx: request.dx,
            dy: request.dy,
        },
        prompt: source.prompt.clone(),
        directives: source.directives.clone(),
        config: DenoiseConfig {
            edit_steps: n,
            ..source.config.clone()
        },
        latents: done.latents,
        noise: done.noise,
        final_attention: done.final_attention,
        loss_trace: Vec::new(),
        image: done.image,
        status: done.status,
    })
}
