//! Request bodies, their validation, and the error responses.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dd_core::compose::{CompositeSpec, SourceSpec, DEFAULT_COMPOSITE_STEPS, DEFAULT_SOURCE_WEIGHT};
use dd_core::harness::{AblationSpec, RunStore};
use dd_core::pipeline::validate_inputs;
use dd_core::placement::{validate_placement, PlacementRequest};
use dd_core::{Backend, DdError, DenoiseConfig, RegionDirective};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::jobs::JobKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// Error response; `fields` is non-empty for 422 responses.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub fields: Vec<FieldError>,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        let field = FieldError {
            field: field.into(),
            message: message.into(),
        };
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: format!("invalid {}: {}", field.field, field.message),
            fields: vec![field],
        }
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }
}

impl From<DdError> for ApiError {
    fn from(e: DdError) -> Self {
        match e {
            DdError::Validation { field, message } => ApiError::field(field, message),
            DdError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, e.to_string()),
            DdError::DegenerateMask(_) | DdError::UndefinedMetric(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
            }
            DdError::Unavailable(_) | DdError::Capability(_) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string())
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.message, "fields": self.fields });
        (self.status, Json(body)).into_response()
    }
}

fn join(path: &str, field: &str) -> String {
    if path.is_empty() || path == "." {
        field.to_owned()
    } else {
        format!("{path}.{field}")
    }
}

/// Maps a deserialization failure onto the offending field. Domain checks
/// raised while deserializing (e.g. a box fraction outside [0, 1]) surface as
/// `invalid <field>: ...` and are resolved to the full path.
fn field_error(err: serde_path_to_error::Error<serde_json::Error>) -> ApiError {
    let path = err.path().to_string();
    let inner = err.into_inner();
    if !inner.is_data() {
        return ApiError::new(StatusCode::BAD_REQUEST, format!("malformed JSON: {inner}"));
    }
    let text = inner.to_string();
    let text = match text.rfind(" at line ") {
        Some(i) => text[..i].to_owned(),
        None => text,
    };
    if let Some(rest) = text.strip_prefix("missing field `") {
        let name = rest.split('`').next().unwrap_or_default();
        return ApiError::field(join(&path, name), "is required");
    }
    if let Some(rest) = text.strip_prefix("invalid ") {
        if let Some((name, message)) = rest.split_once(": ") {
            // serde's own "invalid type: ..." / "invalid value: ..." messages
            if !name.contains(' ') && !matches!(name, "type" | "value" | "length") {
                return ApiError::field(join(&path, name), message);
            }
        }
    }
    ApiError::field(if path == "." { String::new() } else { path }, text)
}

pub fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(body);
    let value = serde_path_to_error::deserialize(&mut de).map_err(field_error)?;
    de.end()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}")))?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default)]
    pub directives: Vec<RegionDirective>,
    #[serde(default)]
    pub config: DenoiseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SskRequest {
    pub prompt: String,
    #[serde(default)]
    pub directives: Vec<RegionDirective>,
    #[serde(default)]
    pub config: DenoiseConfig,
    pub k: usize,
    #[serde(default)]
    pub seed0: u64,
}

fn default_weight() -> f64 {
    DEFAULT_SOURCE_WEIGHT
}

fn default_composite_steps() -> usize {
    DEFAULT_COMPOSITE_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeSource {
    pub run_id: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeRequest {
    pub full_prompt: String,
    pub sources: Vec<ComposeSource>,
    #[serde(default = "default_composite_steps")]
    pub edit_steps: usize,
    #[serde(default)]
    pub config: DenoiseConfig,
}

impl ComposeRequest {
    pub fn spec(&self) -> CompositeSpec {
        CompositeSpec {
            full_prompt: self.full_prompt.clone(),
            sources: self
                .sources
                .iter()
                .map(|s| SourceSpec {
                    run_id: s.run_id.clone(),
                    weight: s.weight,
                })
                .collect(),
            edit_steps: self.edit_steps,
        }
    }
}

fn default_trailing() -> Vec<usize> {
    AblationSpec::default().trailing
}

fn default_steps() -> Vec<usize> {
    AblationSpec::default().steps
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRequest {
    pub prompt: String,
    #[serde(default)]
    pub directives: Vec<RegionDirective>,
    #[serde(default)]
    pub config: DenoiseConfig,
    #[serde(default = "default_trailing")]
    pub trailing: Vec<usize>,
    #[serde(default = "default_steps")]
    pub steps: Vec<usize>,
    #[serde(default = "default_true")]
    pub include_baseline: bool,
}

impl AblateRequest {
    pub fn grid(&self) -> AblationSpec {
        AblationSpec {
            trailing: self.trailing.clone(),
            steps: self.steps.clone(),
            include_baseline: self.include_baseline,
        }
    }
}

/// A validated job body.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Generate(GenerateRequest),
    Ssk(SskRequest),
    Compose(ComposeRequest),
    Pf(PlacementRequest),
    Ablate(AblateRequest),
}

impl Payload {
    pub fn kind(&self) -> JobKind {
        match self {
            Payload::Generate(_) => JobKind::Generate,
            Payload::Ssk(_) => JobKind::Ssk,
            Payload::Compose(_) => JobKind::Compose,
            Payload::Pf(_) => JobKind::Pf,
            Payload::Ablate(_) => JobKind::Ablate,
        }
    }

    /// Parses `body` for `kind` and runs the checks that need no denoising.
    pub fn parse(kind: JobKind, body: &[u8], backend: &dyn Backend, store: &RunStore) -> Result<Self, ApiError> {
        let payload = match kind {
            JobKind::Generate => Payload::Generate(parse(body)?),
            JobKind::Ssk => Payload::Ssk(parse(body)?),
            JobKind::Compose => Payload::Compose(parse(body)?),
            JobKind::Pf => Payload::Pf(parse(body)?),
            JobKind::Ablate => Payload::Ablate(parse(body)?),
        };
        payload.validate(backend, store)?;
        Ok(payload)
    }

    fn validate(&self, backend: &dyn Backend, store: &RunStore) -> Result<(), ApiError> {
        match self {
            Payload::Generate(r) => validate_inputs(backend, &r.prompt, &r.directives, &r.config)?,
            Payload::Ssk(r) => {
                if r.k == 0 {
                    return Err(ApiError::field("k", "must be at least 1"));
                }
                validate_inputs(backend, &r.prompt, &r.directives, &r.config)?;
            }
            Payload::Compose(r) => {
                let spec = r.spec();
                spec.validate()?;
                validate_inputs(backend, &r.full_prompt, &[], &r.config)?;
                if r.edit_steps > r.config.total_steps {
                    return Err(ApiError::field(
                        "edit_steps",
                        format!("{} exceeds total_steps {}", r.edit_steps, r.config.total_steps),
                    ));
                }
                for (i, s) in r.sources.iter().enumerate() {
                    let field = format!("sources[{i}].run_id");
                    let m = store.manifest(&s.run_id).map_err(|e| match e {
                        DdError::NotFound(_) => ApiError::field(&field, format!("no run {:?} in the store", s.run_id)),
                        other => other.into(),
                    })?;
                    if m.config.total_steps != r.config.total_steps {
                        return Err(ApiError::field(
                            field,
                            format!(
                                "source has {} steps, the request {}",
                                m.config.total_steps, r.config.total_steps
                            ),
                        ));
                    }
                }
            }
            Payload::Pf(r) => {
                let source = store.load(&r.source_run_id).map_err(|e| match e {
                    DdError::NotFound(_) => {
                        ApiError::field("source_run_id", format!("no run {:?} in the store", r.source_run_id))
                    }
                    other => other.into(),
                })?;
                validate_placement(backend, &source, r)?;
            }
            Payload::Ablate(r) => {
                validate_inputs(backend, &r.prompt, &r.directives, &r.config)?;
                let prompt_len = backend.encode_text(&r.prompt)?.prompt_len;
                r.grid().cells(prompt_len, r.config.total_steps)?;
            }
        }
        Ok(())
    }
}
