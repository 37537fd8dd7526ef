//! Positional control of objects in latent diffusion by editing
//! cross-attention maps during the early denoising steps.
//!
//! A [`regions::RegionDirective`] binds prompt tokens to a box. During the
//! first `edit_steps` steps the pipeline fits weights for the trailing token
//! maps so that the directed tokens' attention moves into the box, then
//! denoising continues unedited. Recorded runs feed scene compositing
//! ([`compose`]) and placement finetuning ([`placement`]).

pub mod attention;
pub mod backend;
pub mod compose;
pub mod error;
pub mod harness;
pub mod pipeline;
pub mod placement;
pub mod regions;
pub mod tensor;

pub use attention::{CrossAttentionMaps, LayerAttention, OptConfig, TargetMaps, TrailingWeights, TOKEN_SLOTS};
pub use backend::{open_backend, Backend, BackendKind, BackendSelection};
pub use error::{DdError, Result};
pub use pipeline::{run_directed_diffusion, DenoiseConfig, EditMode, RunKind, RunRecord, RunStatus};
pub use regions::{BoundingBox, MaskGrid, RegionDirective};
pub use tensor::{Image, Latent, LatentShape};
