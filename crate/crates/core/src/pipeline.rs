//! The two-stage denoising loop: attention editing for the first `edit_steps`
//! reverse steps, then plain classifier-free-guided denoising.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    build_target_maps, init_trailing_weights, optimize_trailing_weights, CrossAttentionMaps, DirectInjection,
    EditContext, IterateRecord, OptConfig, TrailingSubstitution,
};
use crate::backend::{Backend, Scheduler, SchedulerState, TextEmbedding};
use crate::error::{DdError, Result};
use crate::regions::{RegionDirective, DEFAULT_GAUSSIAN_AMPLITUDE, DEFAULT_WEAKEN};
use crate::tensor::{Image, Latent};

pub const DEFAULT_TOTAL_STEPS: usize = 50;
pub const DEFAULT_EDIT_STEPS: usize = 10;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.5;

/// How the edited steps alter the conditional pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EditMode {
    /// Fit trailing weights and substitute the trailing maps.
    Optimize,
    /// Write the edited maps straight into the directed slots and the first
    /// `num_trailing` trailing slots, without any fit.
    DirectInjection { num_trailing: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    pub total_steps: usize,
    pub edit_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub weaken: f32,
    pub gaussian_amplitude: f32,
    pub opt: OptConfig,
    pub edit_mode: EditMode,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            total_steps: DEFAULT_TOTAL_STEPS,
            edit_steps: DEFAULT_EDIT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            seed: 0,
            weaken: DEFAULT_WEAKEN,
            gaussian_amplitude: DEFAULT_GAUSSIAN_AMPLITUDE,
            opt: OptConfig::default(),
            edit_mode: EditMode::Optimize,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(DdError::validation("total_steps", "must be at least 1"));
        }
        if self.edit_steps > self.total_steps {
            return Err(DdError::validation(
                "edit_steps",
                format!("{} exceeds total_steps {}", self.edit_steps, self.total_steps),
            ));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(DdError::validation("guidance_scale", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.weaken) {
            return Err(DdError::validation("weaken", "must lie in [0, 1]"));
        }
        if !(self.gaussian_amplitude.is_finite() && self.gaussian_amplitude >= 0.0) {
            return Err(DdError::validation("gaussian_amplitude", "must be finite and non-negative"));
        }
        if !(self.opt.learning_rate.is_finite() && self.opt.learning_rate > 0.0) {
            return Err(DdError::validation("opt.learning_rate", "must be positive"));
        }
        if !(self.opt.init_range.is_finite() && self.opt.init_range >= 0.0) {
            return Err(DdError::validation("opt.init_range", "must be non-negative"));
        }
        Ok(())
    }
}

/// `noise_uncond + w * (noise_cond - noise_uncond)`, evaluated as
/// `(1 - w) * uncond + w * cond` in f64 so both endpoints are exact.
pub fn cfg_combine(noise_uncond: &Latent, noise_cond: &Latent, guidance_scale: f64) -> Result<Latent> {
    if noise_uncond.shape() != noise_cond.shape() {
        return Err(DdError::validation(
            "noise_cond",
            format!("shape {} does not match {}", noise_cond.shape(), noise_uncond.shape()),
        ));
    }
    let w = guidance_scale;
    Ok(noise_uncond.zip_map(noise_cond, |u, c| {
        ((1.0 - w) * f64::from(u) + w * f64::from(c)) as f32
    }))
}

/// What produced a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunKind {
    Directed,
    Composite { sources: Vec<SourceRef> },
    Placement {
        source_run_id: String,
        directive_label: String,
        dx: i64,
        dy: i64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub run_id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed { step: usize, message: String },
}

/// Trailing-weight fit of one edited step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFit {
    pub step: usize,
    #[serde(with = "crate::tensor::json_float::vec_f32")]
    pub weights: Vec<f32>,
    pub history: Vec<IterateRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub backend: String,
    pub kind: RunKind,
    pub prompt: String,
    pub directives: Vec<RegionDirective>,
    pub config: DenoiseConfig,
    /// `z_T` through `z_0`, `total_steps + 1` entries for a complete run.
    pub latents: Vec<Latent>,
    /// Guided noise estimate consumed by each scheduler step.
    pub noise: Vec<Latent>,
    /// Captured conditional maps of the last denoising step.
    pub final_attention: Option<CrossAttentionMaps>,
    pub loss_trace: Vec<StepFit>,
    pub image: Option<Image>,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    /// Same run content, ignoring the id.
    pub fn same_content(&self, other: &RunRecord) -> bool {
        let traj = |a: &[Latent], b: &[Latent]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y));
        self.backend == other.backend
            && self.kind == other.kind
            && self.prompt == other.prompt
            && self.directives == other.directives
            && self.config == other.config
            && traj(&self.latents, &other.latents)
            && traj(&self.noise, &other.noise)
            && self.final_attention == other.final_attention
            && self.loss_trace == other.loss_trace
            && self.image == other.image
            && self.status == other.status
    }
}

pub fn new_run_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

/// Mutable state threaded through the step loop.
pub(crate) struct Trajectory {
    pub z: Latent,
    pub state: SchedulerState,
    pub latents: Vec<Latent>,
    pub noise: Vec<Latent>,
    pub final_attention: Option<CrossAttentionMaps>,
    pub fits: Vec<StepFit>,
    prev_weights: Option<Vec<f32>>,
    rng: ChaCha8Rng,
}

impl Trajectory {
    pub(crate) fn new(z: Latent, state: SchedulerState, seed: u64) -> Self {
        Self {
            latents: vec![z.clone()],
            z,
            state,
            noise: Vec::new(),
            final_attention: None,
            fits: Vec::new(),
            prev_weights: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

pub(crate) struct Conditioning<'a> {
    pub backend: &'a dyn Backend,
    pub scheduler: &'a dyn Scheduler,
    pub cond: &'a TextEmbedding,
    pub uncond: &'a TextEmbedding,
    pub directives: &'a [RegionDirective],
    pub config: &'a DenoiseConfig,
}

/// Error raised inside the loop together with the step it happened at.
pub(crate) struct StepError {
    pub step: usize,
    pub error: DdError,
}

impl Conditioning<'_> {
    /// Runs steps `range`, editing those below `config.edit_steps`. `post_step`
    /// may replace the advanced latent (compositing hooks).
    pub(crate) fn run(
        &self,
        traj: &mut Trajectory,
        range: Range<usize>,
        mut post_step: impl FnMut(usize, Latent) -> Result<Latent>,
    ) -> std::result::Result<(), StepError> {
        for k in range {
            self.step(traj, k, &mut post_step)
                .map_err(|error| StepError { step: k, error })?;
        }
        Ok(())
    }

    fn step(
        &self,
        traj: &mut Trajectory,
        k: usize,
        post_step: &mut impl FnMut(usize, Latent) -> Result<Latent>,
    ) -> Result<()> {
        let info = self.scheduler.step_info(k);
        let edit = k < self.config.edit_steps && !self.directives.is_empty();
        let noise_uncond = self.backend.denoise_uncond(&traj.z, self.uncond, &info)?;
        let (noise_cond, maps) = match (edit, self.config.edit_mode) {
            (false, _) => self.backend.denoise_cond(&traj.z, self.cond, &info, None)?,
            (true, EditMode::DirectInjection { num_trailing }) => {
                let trailing = crate::attention::TOKEN_SLOTS - self.cond.prompt_len;
                if num_trailing > trailing {
                    return Err(DdError::validation(
                        "num_trailing",
                        format!("must be at most {trailing}, got {num_trailing}"),
                    ));
                }
                let mut inj = DirectInjection {
                    directives: self.directives.to_vec(),
                    num_trailing,
                    weaken: self.config.weaken,
                    amplitude: self.config.gaussian_amplitude,
                    prompt_len: self.cond.prompt_len,
                };
                self.backend.denoise_cond(&traj.z, self.cond, &info, Some(&mut inj))?
            }
            (true, EditMode::Optimize) => {
                let (_, maps) = self.backend.denoise_cond(&traj.z, self.cond, &info, None)?;
                let targets = build_target_maps(
                    &maps,
                    self.directives,
                    self.config.weaken,
                    self.config.gaussian_amplitude,
                )?;
                let init = match (&traj.prev_weights, self.config.opt.warm_start) {
                    (Some(prev), true) => prev.clone(),
                    _ => init_trailing_weights(&mut traj.rng, targets.trailing_len(), self.config.opt.init_range),
                };
                let ctx = EditContext {
                    backend: self.backend,
                    scheduler: self.scheduler,
                    state: &traj.state,
                    z: &traj.z,
                    cond: self.cond,
                    noise_uncond: &noise_uncond,
                    step: k,
                    guidance_scale: self.config.guidance_scale,
                };
                let fit = match optimize_trailing_weights(&ctx, &targets, &self.config.opt, init) {
                    Ok(fit) => fit,
                    Err(DdError::NonFinite {
                        what,
                        step,
                        iteration,
                        history,
                    }) => {
                        traj.fits.push(StepFit {
                            step: k,
                            weights: Vec::new(),
                            history: history.clone(),
                        });
                        return Err(DdError::NonFinite {
                            what,
                            step,
                            iteration,
                            history,
                        });
                    }
                    Err(e) => return Err(e),
                };
                let mut subst = TrailingSubstitution::new(&targets, &fit.values)?;
                let (noise_cond, _) = self.backend.denoise_cond(&traj.z, self.cond, &info, Some(&mut subst))?;
                traj.prev_weights = Some(fit.values.clone());
                traj.fits.push(StepFit {
                    step: k,
                    weights: fit.values,
                    history: fit.history,
                });
                (noise_cond, maps)
            }
        };
        let combined = cfg_combine(&noise_uncond, &noise_cond, self.config.guidance_scale)?;
        let next = self.scheduler.advance(&mut traj.state, &traj.z, &combined, k)?;
        if !next.is_finite() {
            return Err(DdError::NonFinite {
                what: "latent",
                step: k,
                iteration: 0,
                history: Vec::new(),
            });
        }
        let next = post_step(k, next)?;
        traj.noise.push(combined);
        traj.latents.push(next.clone());
        traj.z = next;
        traj.final_attention = Some(maps);
        Ok(())
    }
}

/// Checks a prompt and its directives before any denoising.
pub(crate) fn prepare(
    backend: &dyn Backend,
    prompt: &str,
    directives: &[RegionDirective],
    config: &DenoiseConfig,
) -> Result<(TextEmbedding, TextEmbedding, Box<dyn Scheduler>)> {
    config.validate()?;
    if prompt.trim().is_empty() {
        return Err(DdError::validation("prompt", "must not be empty"));
    }
    let cond = backend.encode_text(prompt)?;
    for (k, d) in directives.iter().enumerate() {
        d.validate_for_prompt(cond.prompt_len)
            .map_err(|e| e.within(&format!("directives[{k}]")))?;
    }
    if let EditMode::DirectInjection { num_trailing } = config.edit_mode {
        let trailing = crate::attention::TOKEN_SLOTS - cond.prompt_len;
        if num_trailing > trailing {
            return Err(DdError::validation(
                "edit_mode.num_trailing",
                format!("must be at most {trailing}, got {num_trailing}"),
            ));
        }
    }
    let uncond = backend.encode_text("")?;
    let scheduler = backend.scheduler(config.total_steps)?;
    Ok((cond, uncond, scheduler))
}

/// Runs every check `run_directed_diffusion` performs before denoising.
pub fn validate_inputs(
    backend: &dyn Backend,
    prompt: &str,
    directives: &[RegionDirective],
    config: &DenoiseConfig,
) -> Result<()> {
    prepare(backend, prompt, directives, config).map(|_| ())
}

/// Initial latent `z_T` for a seed.
pub fn initial_latent(backend: &dyn Backend, scheduler: &dyn Scheduler, seed: u64) -> Latent {
    backend
        .sample_initial_latent(seed)
        .scale(scheduler.init_noise_sigma() as f32)
}

pub(crate) struct Finished {
    pub latents: Vec<Latent>,
    pub noise: Vec<Latent>,
    pub final_attention: Option<CrossAttentionMaps>,
    pub fits: Vec<StepFit>,
    pub image: Option<Image>,
    pub status: RunStatus,
}

/// Decodes the final latent of a finished loop, or records the failure.
pub(crate) fn finish(
    backend: &dyn Backend,
    traj: Trajectory,
    outcome: std::result::Result<(), StepError>,
) -> Finished {
    let (image, status) = match outcome {
        Ok(()) => match backend.decode(&traj.z) {
            Ok(img) => (Some(img), RunStatus::Complete),
            Err(e) => (
                None,
                RunStatus::Failed {
                    step: traj.noise.len(),
                    message: e.to_string(),
                },
            ),
        },
        Err(StepError { step, error }) => (
            None,
            RunStatus::Failed {
                step,
                message: error.to_string(),
            },
        ),
    };
    Finished {
        latents: traj.latents,
        noise: traj.noise,
        final_attention: traj.final_attention,
        fits: traj.fits,
        image,
        status,
    }
}

/// Generates an image with the given directives steering the first
/// `config.edit_steps` steps.
///
/// Invalid inputs fail before any denoising. A failure during denoising
/// yields a record with [`RunStatus::Failed`] and the partial trajectory.
pub fn run_directed_diffusion(
    backend: &dyn Backend,
    prompt: &str,
    directives: &[RegionDirective],
    config: &DenoiseConfig,
) -> Result<RunRecord> {
    let (cond, uncond, scheduler) = prepare(backend, prompt, directives, config)?;
    let z = initial_latent(backend, scheduler.as_ref(), config.seed);
    let mut traj = Trajectory::new(z, SchedulerState::default(), config.seed);
    let cx = Conditioning {
        backend,
        scheduler: scheduler.as_ref(),
        cond: &cond,
        uncond: &uncond,
        directives,
        config,
    };
    let outcome = cx.run(&mut traj, 0..config.total_steps, |_, z| Ok(z));
    let done = finish(backend, traj, outcome);
    Ok(RunRecord {
        run_id: new_run_id(),
        backend: backend.name().to_owned(),
        kind: RunKind::Directed,
        prompt: prompt.to_owned(),
        directives: directives.to_vec(),
        config: config.clone(),
        latents: done.latents,
        noise: done.noise,
        final_attention: done.final_attention,
        loss_trace: done.fits,
        image: done.image,
        status: done.status,
    })
}

/// Reference sampler with no editing machinery: returns the latent trajectory.
pub fn sample_plain(backend: &dyn Backend, prompt: &str, total_steps: usize, guidance_scale: f64, seed: u64) -> Result<Vec<Latent>> {
    let cond = backend.encode_text(prompt)?;
    let uncond = backend.encode_text("")?;
    let scheduler = backend.scheduler(total_steps)?;
    let mut state = SchedulerState::default();
    let mut z = initial_latent(backend, scheduler.as_ref(), seed);
    let mut out = vec![z.clone()];
    for k in 0..total_steps {
        let info = scheduler.step_info(k);
        let step = backend.denoise_step(&z, &cond, &uncond, &info, None)?;
        let noise = cfg_combine(&step.noise_uncond, &step.noise_cond, guidance_scale)?;
        z = scheduler.advance(&mut state, &z, &noise, k)?;
        out.push(z.clone());
    }
    Ok(out)
}
