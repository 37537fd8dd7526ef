//! The diffusion backend contract.
//!
//! A backend owns text encoding, the denoiser (with a hook into every
//! cross-attention layer of the conditional pass), the noise schedule and the
//! latent decoder. [`toy::ToyBackend`] is a small deterministic implementation
//! used for verification; [`pretrained`] describes how a real checkpoint is
//! selected.

pub mod conformance;
pub mod pretrained;
pub mod scheduler;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::attention::{CrossAttentionMaps, LayerAttention};
use crate::error::{DdError, Result};
use crate::tensor::{Image, Latent, LatentShape};

pub use scheduler::{LmsScheduler, Scheduler, SchedulerState, StepInfo};

/// One cross-attention layer as declared by a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: usize,
    pub name: String,
    /// Spatial side length `n_l`; the layer attends over `n_l * n_l` positions.
    pub resolution: usize,
    pub heads: usize,
}

/// Output of the text encoder: 77 token slots of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// Token strings for the prompt slots, markers included (`prompt_len` entries).
    pub tokens: Vec<String>,
    pub prompt_len: usize,
    pub dim: usize,
    data: Vec<f32>,
}

impl TextEmbedding {
    pub fn new(tokens: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        let prompt_len = tokens.len();
        if prompt_len == 0 || prompt_len > crate::attention::TOKEN_SLOTS {
            return Err(DdError::Contract(format!(
                "prompt length {prompt_len} outside 1..={}",
                crate::attention::TOKEN_SLOTS
            )));
        }
        if data.len() != crate::attention::TOKEN_SLOTS * dim {
            return Err(DdError::Shape {
                context: "text embedding",
                expected: format!("{}", crate::attention::TOKEN_SLOTS * dim),
                actual: data.len().to_string(),
            });
        }
        Ok(Self {
            tokens,
            prompt_len,
            dim,
            data,
        })
    }

    pub fn slot(&self, slot: usize) -> &[f32] {
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Hook invoked once per cross-attention layer during the conditional pass.
///
/// It sees the post-softmax maps and may return replacements, which the layer
/// then uses to aggregate its values.
pub trait AttentionInterceptor {
    fn intercept(&mut self, layer: &LayerInfo, maps: &LayerAttention) -> Result<Option<LayerAttention>>;
}

/// Intercepts nothing; records nothing.
pub struct Passthrough;

impl AttentionInterceptor for Passthrough {
    fn intercept(&mut self, _: &LayerInfo, _: &LayerAttention) -> Result<Option<LayerAttention>> {
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub noise_cond: Latent,
    pub noise_uncond: Latent,
    /// Conditional-pass maps as captured, before any substitution.
    pub maps: CrossAttentionMaps,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn latent_shape(&self) -> LatentShape;

    fn layer_manifest(&self) -> &[LayerInfo];

    /// Spatial upsampling between latent and decoded image.
    fn vae_scale_factor(&self) -> usize;

    /// Tokenized prompt without embedding, for clients that bind token positions.
    fn tokenize(&self, prompt: &str) -> Result<Vec<String>> {
        Ok(self.encode_text(prompt)?.tokens)
    }

    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding>;

    /// Standard-normal latent, deterministic per seed. Callers scale it by the
    /// scheduler's initial sigma.
    fn sample_initial_latent(&self, seed: u64) -> Latent;

    fn scheduler(&self, total_steps: usize) -> Result<Box<dyn Scheduler>>;

    /// Conditional denoiser pass. The interceptor, when given, runs once per
    /// cross-attention layer; the returned maps are the captured ones.
    fn denoise_cond(
        &self,
        z: &Latent,
        cond: &TextEmbedding,
        step: &StepInfo,
        interceptor: Option<&mut dyn AttentionInterceptor>,
    ) -> Result<(Latent, CrossAttentionMaps)>;

    /// Unconditional denoiser pass; never intercepted.
    fn denoise_uncond(&self, z: &Latent, uncond: &TextEmbedding, step: &StepInfo) -> Result<Latent>;

    fn denoise_step(
        &self,
        z: &Latent,
        cond: &TextEmbedding,
        uncond: &TextEmbedding,
        step: &StepInfo,
        interceptor: Option<&mut dyn AttentionInterceptor>,
    ) -> Result<StepOutput> {
        let (noise_cond, maps) = self.denoise_cond(z, cond, step, interceptor)?;
        let noise_uncond = self.denoise_uncond(z, uncond, step)?;
        Ok(StepOutput {
            noise_cond,
            noise_uncond,
            maps,
        })
    }

    /// Noises `z` to the level of `step_index` with noise drawn from `seed`.
    fn add_noise(&self, scheduler: &dyn Scheduler, z: &Latent, step_index: usize, seed: u64) -> Latent {
        let noise = self.sample_initial_latent(seed);
        scheduler.add_noise(z, &noise, step_index)
    }

    fn decode(&self, z: &Latent) -> Result<Image>;

    /// Analytic derivatives, when the backend can provide them.
    fn gradients(&self) -> Option<&dyn DifferentiableBackend> {
        None
    }
}

/// Vector-Jacobian products needed to fit the trailing weights.
pub trait DifferentiableBackend {
    /// Gradient of `<cotangent, noise_cond>` with respect to the trailing
    /// weights of `substitution`, evaluated with the substitution installed.
    fn trailing_weight_vjp(
        &self,
        z: &Latent,
        cond: &TextEmbedding,
        step: &StepInfo,
        substitution: &crate::attention::TrailingSubstitution,
        cotangent: &Latent,
    ) -> Result<Vec<f64>>;

    /// Gradient with respect to `z` of `sum_l <cotangents[l], mean_heads(A_l)>`,
    /// where `A_l` are the unedited conditional maps. Each cotangent is laid out
    /// `[position][slot]`.
    fn attention_latent_vjp(
        &self,
        z: &Latent,
        cond: &TextEmbedding,
        step: &StepInfo,
        cotangents: &[Vec<f64>],
    ) -> Result<Latent>;
}

/// Backend selection as read from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSelection {
    #[serde(default = "default_backend_kind")]
    pub backend: BackendKind,
    #[serde(default = "pretrained::default_model_id")]
    pub model_id: String,
    #[serde(default = "default_device")]
    pub device: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Toy,
    Pretrained,
}

fn default_backend_kind() -> BackendKind {
    BackendKind::Toy
}

fn default_device() -> String {
    "cpu".to_owned()
}

impl Default for BackendSelection {
    fn default() -> Self {
        Self {
            backend: BackendKind::Toy,
            model_id: pretrained::default_model_id(),
            device: default_device(),
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = DdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackendKind::Toy),
            "pretrained" => Ok(BackendKind::Pretrained),
            other => Err(DdError::validation(
                "backend",
                format!("expected \"toy\" or \"pretrained\", got {other:?}"),
            )),
        }
    }
}

/// Instantiates the selected backend.
pub fn open_backend(selection: &BackendSelection) -> Result<Box<dyn Backend>> {
    match selection.backend {
        BackendKind::Toy => Ok(Box::new(toy::ToyBackend::new())),
        BackendKind::Pretrained => {
            let cfg = pretrained::PretrainedConfig::from_selection(selection);
            pretrained::open(&cfg)
        }
    }
}
