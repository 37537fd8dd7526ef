//! Experiment harness: metrics, run persistence, batches and diagnostics.

pub mod batch;
pub mod diag;
pub mod metrics;
pub mod store;

pub use batch::{ablation_grid, run_ssk, AblationKey, AblationSpec, BackendFactory, BatchMode, Cell};
pub use diag::{attention_heatmap, capture_maps_at, contact_sheet, gradient_norm_csv, Heatmap};
pub use metrics::{attention_mass_metric, box_iou, gradient_norm_trace, latent_step_norms};
pub use store::{Manifest, RunStore};
