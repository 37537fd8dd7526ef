//! Scene compositing: blend the current latent with recorded single-object
//! latents during the first steps of a new run.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, SchedulerState};
use crate::error::{DdError, Result};
use crate::pipeline::{
    finish, initial_latent, new_run_id, prepare, Conditioning, DenoiseConfig, RunKind, RunRecord, SourceRef,
    Trajectory,
};
use crate::tensor::Latent;

pub const DEFAULT_SOURCE_WEIGHT: f64 = 0.1;
pub const DEFAULT_COMPOSITE_STEPS: usize = 10;

fn default_weight() -> f64 {
    DEFAULT_SOURCE_WEIGHT
}

fn default_steps() -> usize {
    DEFAULT_COMPOSITE_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub run_id: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSpec {
    pub full_prompt: String,
    pub sources: Vec<SourceSpec>,
    #[serde(default = "default_steps")]
    pub edit_steps: usize,
}

impl CompositeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.full_prompt.trim().is_empty() {
            return Err(DdError::validation("full_prompt", "must not be empty"));
        }
        if self.sources.is_empty() {
            return Err(DdError::validation("sources", "at least one source run is required"));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.weight) {
                return Err(DdError::validation(
                    format!("sources[{i}].weight"),
                    format!("must lie in [0, 1], got {}", s.weight),
                ));
            }
        }
        Ok(())
    }
}

/// `(1/R) * sum_r [w_r * z + (1 - w_r) * z_r]` over the `R` sources.
///
/// Evaluated per element in f64 as `z * (sum w_r / R) + sum_r (1 - w_r) z_r / R`
/// with the source terms summed in sorted order, so the result does not
/// depend on the order of `sources`.
pub fn composite_latents(z: &Latent, sources: &[(&Latent, f64)]) -> Result<Latent> {
    if sources.is_empty() {
        return Err(DdError::validation("sources", "at least one source latent is required"));
    }
    for (i, (src, w)) in sources.iter().enumerate() {
        if src.shape() != z.shape() {
            return Err(DdError::validation(
                format!("sources[{i}]"),
                format!("shape {} does not match {}", src.shape(), z.shape()),
            ));
        }
        if !(0.0..=1.0).contains(w) {
            return Err(DdError::validation(format!("sources[{i}].weight"), "must lie in [0, 1]"));
        }
    }
    let r = sources.len() as f64;
    let mut weights: Vec<f64> = sources.iter().map(|(_, w)| *w).collect();
    weights.sort_by(f64::total_cmp);
    let self_weight = weights.iter().sum::<f64>() / r;

    let mut out = z.clone();
    let mut terms = Vec::with_capacity(sources.len() + 1);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        terms.clear();
        for (src, w) in sources {
            let t = (1.0 - w) * f64::from(src.data()[i]) / r;
            if t != 0.0 {
                terms.push(t);
            }
        }
        terms.sort_by(f64::total_cmp);
        let mut acc: Option<f64> = (self_weight != 0.0).then(|| f64::from(*v) * self_weight);
        for &t in &terms {
            acc = Some(acc.map_or(t, |a| a + t));
        }
        *v = acc.unwrap_or(0.0) as f32;
    }
    Ok(out)
}

/// Runs `spec.full_prompt` from `config.seed`, replacing the latent after each
/// of the first `spec.edit_steps` scheduler steps by the composite with the
/// sources' latents at the same step. `sources` are the records named by
/// `spec.sources`, in the same order.
pub fn run_scene_compositing(
    backend: &dyn Backend,
    spec: &CompositeSpec,
    sources: &[&RunRecord],
    config: &DenoiseConfig,
) -> Result<RunRecord> {
    spec.validate()?;
    if sources.len() != spec.sources.len() {
        return Err(DdError::validation(
            "sources",
            format!("{} records supplied for {} sources", sources.len(), spec.sources.len()),
        ));
    }
    let config = DenoiseConfig {
        edit_steps: 0,
        ..config.clone()
    };
    if spec.edit_steps > config.total_steps {
        return Err(DdError::validation(
            "edit_steps",
            format!("{} exceeds total_steps {}", spec.edit_steps, config.total_steps),
        ));
    }
    let shape = backend.latent_shape();
    for (i, (rec, s)) in sources.iter().zip(&spec.sources).enumerate() {
        if rec.run_id != s.run_id {
            return Err(DdError::validation(
                format!("sources[{i}].run_id"),
                format!("record {} supplied for {}", rec.run_id, s.run_id),
            ));
        }
        if rec.config.total_steps != config.total_steps {
            return Err(DdError::validation(
                format!("sources[{i}]"),
                format!(
                    "source has {} steps, the new run {}",
                    rec.config.total_steps, config.total_steps
                ),
            ));
        }
        if rec.latents.len() <= spec.edit_steps {
            return Err(DdError::validation(
                format!("sources[{i}]"),
                format!(
                    "trajectory holds {} latents, {} needed",
                    rec.latents.len(),
                    spec.edit_steps + 1
                ),
            ));
        }
        if let Some(bad) = rec.latents.iter().find(|z| z.shape() != shape) {
            return Err(DdError::validation(
                format!("sources[{i}]"),
                format!("latent shape {} does not match {shape}", bad.shape()),
            ));
        }
    }

    let (cond, uncond, scheduler) = prepare(backend, &spec.full_prompt, &[], &config)?;
    let z = initial_latent(backend, scheduler.as_ref(), config.seed);
    let mut traj = Trajectory::new(z, SchedulerState::default(), config.seed);
    let cx = Conditioning {
        backend,
        scheduler: scheduler.as_ref(),
        cond: &cond,
        uncond: &uncond,
        directives: &[],
        config: &config,
    };
    let steps = spec.edit_steps;
    let outcome = cx.run(&mut traj, 0..config.total_steps, |k, z| {
        if k >= steps {
            return Ok(z);
        }
        let blend: Vec<(&Latent, f64)> = sources
            .iter()
            .zip(&spec.sources)
            .map(|(rec, s)| (&rec.latents[k + 1], s.weight))
            .collect();
        composite_latents(&z, &blend)
    });
    let done = finish(backend, traj, outcome);
    Ok(RunRecord {
        run_id: new_run_id(),
        backend: backend.name().to_owned(),
        kind: RunKind::Composite {
            sources: spec
                .sources
                .iter()
                .map(|s| SourceRef {
                    run_id: s.run_id.clone(),
                    weight: s.weight,
                })
                .collect(),
        },
        prompt: spec.full_prompt.clone(),
        directives: Vec::new(),
        config,
        latents: done.latents,
        noise: done.noise,
        final_attention: done.final_attention,
        loss_trace: done.fits,
        image: done.image,
        status: done.status,
    })
}
