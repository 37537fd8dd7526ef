//! On-disk run persistence.
//!
//! Layout under the store root:
//!
//! ```text
//! index.jsonl                 one {"run_id", "manifest"} line per saved run
//! runs/<id>/manifest.json
//! runs/<id>/latents.ddlt      trajectory z_T .. z_0
//! runs/<id>/noise.ddlt        guided noise per step
//! runs/<id>/attention.ddam    final cross-attention maps (if any)
//! runs/<id>/image.png         decoded image (if any)
//! runs/<id>/losses.jsonl      {"step", "iter", "loss"} per evaluated iterate
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::attention::{CrossAttentionMaps, LayerAttention, TOKEN_SLOTS};
use crate::error::{DdError, Result};
use crate::pipeline::{DenoiseConfig, RunKind, RunRecord, RunStatus, StepFit};
use crate::regions::RegionDirective;
use crate::tensor::{Image, Latent, LatentShape};

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"DDLT";
pub const ATTENTION_MAGIC: &[u8; 4] = b"DDAM";
pub const FORMAT_VERSION: u16 = 1;
const TRAJECTORY_HEADER: usize = 4 + 2 + 4 + 4 * 4;
const ATTENTION_HEADER: usize = 4 + 2 + 4 + 4;

const MANIFEST: &str = "manifest.json";
const LATENTS: &str = "latents.ddlt";
const NOISE: &str = "noise.ddlt";
const ATTENTION: &str = "attention.ddam";
const IMAGE: &str = "image.png";
const LOSSES: &str = "losses.jsonl";
const INDEX: &str = "index.jsonl";

/// Serialized run metadata; float payloads live in the binary blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub backend: String,
    #[serde(flatten)]
    pub kind: RunKind,
    pub prompt: String,
    pub directives: Vec<RegionDirective>,
    pub config: DenoiseConfig,
    pub status: RunStatus,
    pub latent_shape: LatentShape,
    pub latent_count: usize,
    pub loss_trace: Vec<StepFit>,
    pub has_attention: bool,
    pub has_image: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub run_id: String,
    pub manifest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLine {
    pub step: usize,
    pub iter: usize,
    #[serde(with = "crate::tensor::json_float")]
    pub loss: f64,
}

fn format_err(path: &Path, message: impl Into<String>) -> DdError {
    DdError::Format {
        path: path.to_owned(),
        message: message.into(),
    }
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Encodes latents as `DDLT | version u16 | count u32 | 1, C, H, W (u32 each) | f32 LE`.
pub fn encode_trajectory(latents: &[Latent], shape: LatentShape) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(TRAJECTORY_HEADER + latents.len() * shape.len() * 4);
    out.extend_from_slice(TRAJECTORY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_u32(&mut out, latents.len());
    for d in [1, shape.channels, shape.height, shape.width] {
        push_u32(&mut out, d);
    }
    for z in latents {
        if z.shape() != shape {
            return Err(DdError::Shape {
                context: "trajectory blob",
                expected: shape.to_string(),
                actual: z.shape().to_string(),
            });
        }
        for v in z.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_trajectory(bytes: &[u8], path: &Path) -> Result<(LatentShape, Vec<Latent>)> {
    if bytes.len() < TRAJECTORY_HEADER {
        return Err(format_err(
            path,
            format!("header needs {TRAJECTORY_HEADER} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != TRAJECTORY_MAGIC {
        return Err(format_err(path, "bad magic, expected DDLT"));
    }
    let version = read_u16(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let count = read_u32(bytes, 6) as usize;
    let dims: Vec<usize> = (0..4).map(|i| read_u32(bytes, 10 + 4 * i) as usize).collect();
    if dims[0] != 1 {
        return Err(format_err(path, format!("batch dimension {} (1 expected)", dims[0])));
    }
    let shape = LatentShape::new(dims[1], dims[2], dims[3]);
    let expected = TRAJECTORY_HEADER + count * shape.len() * 4;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut floats = bytes[TRAJECTORY_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let latents = (0..count)
        .map(|_| Latent::from_vec(shape, floats.by_ref().take(shape.len()).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((shape, latents))
}

/// Encodes maps as `DDAM | version u16 | prompt_len u32 | layers u32`, then per
/// layer `id, side, heads` (u32 each) followed by `heads * side^2 * 77` f32 LE.
pub fn encode_attention(maps: &CrossAttentionMaps) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ATTENTION_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_u32(&mut out, maps.prompt_len());
    push_u32(&mut out, maps.layers().len());
    for layer in maps.layers() {
        push_u32(&mut out, layer.layer_id());
        push_u32(&mut out, layer.side());
        push_u32(&mut out, layer.heads());
        for v in layer.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_attention(bytes: &[u8], path: &Path) -> Result<CrossAttentionMaps> {
    if bytes.len() < ATTENTION_HEADER {
        return Err(format_err(
            path,
            format!("header needs {ATTENTION_HEADER} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != ATTENTION_MAGIC {
        return Err(format_err(path, "bad magic, expected DDAM"));
    }
    let version = read_u16(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let prompt_len = read_u32(bytes, 6) as usize;
    let count = read_u32(bytes, 10) as usize;
    let mut at = ATTENTION_HEADER;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        if bytes.len() < at + 12 {
            return Err(format_err(
                path,
                format!("expected at least {} bytes, found {}", at + 12, bytes.len()),
            ));
        }
        let id = read_u32(bytes, at) as usize;
        let side = read_u32(bytes, at + 4) as usize;
        let heads = read_u32(bytes, at + 8) as usize;
        at += 12;
        let n = heads * side * side * TOKEN_SLOTS;
        let end = at + n * 4;
        if bytes.len() < end {
            return Err(format_err(
                path,
                format!("expected at least {end} bytes, found {}", bytes.len()),
            ));
        }
        let data = bytes[at..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        layers.push(LayerAttention::new(id, side, heads, data)?);
        at = end;
    }
    if at != bytes.len() {
        return Err(format_err(
            path,
            format!("expected {at} bytes, found {}", bytes.len()),
        ));
    }
    CrossAttentionMaps::new(prompt_len, layers)
}

/// Append-only run store. Writes are serialized through an internal lock, so
/// one instance can be shared between threads.
#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    writer: Mutex<()>,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let runs = root.join("runs");
        fs::create_dir_all(&runs).map_err(|e| DdError::io(&runs, e))?;
        Ok(Self {
            root,
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        if run_id.is_empty() || !run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(DdError::NotFound(run_id.to_owned()));
        }
        Ok(self.root.join("runs").join(run_id))
    }

    pub fn contains(&self, run_id: &str) -> bool {
        self.run_dir(run_id)
            .map(|d| d.join(MANIFEST).is_file())
            .unwrap_or(false)
    }

    fn write(path: &Path, bytes: &[u8]) -> Result<()> {
        fs::write(path, bytes).map_err(|e| DdError::io(path, e))
    }

    /// Persists `record` under its `run_id`.
    pub fn save(&self, record: &RunRecord) -> Result<String> {
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let dir = self.run_dir(&record.run_id).map_err(|_| {
            DdError::validation("run_id", format!("{:?} is not a valid run id", record.run_id))
        })?;
        if dir.exists() {
            return Err(DdError::Duplicate(record.run_id.clone()));
        }
        let shape = record
            .latents
            .first()
            .map(Latent::shape)
            .unwrap_or(LatentShape::new(0, 0, 0));
        let staging = self.root.join("runs").join(format!(".{}.partial", record.run_id));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| DdError::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| DdError::io(&staging, e))?;

        Self::write(&staging.join(LATENTS), &encode_trajectory(&record.latents, shape)?)?;
        Self::write(&staging.join(NOISE), &encode_trajectory(&record.noise, shape)?)?;
        if let Some(maps) = &record.final_attention {
            Self::write(&staging.join(ATTENTION), &encode_attention(maps))?;
        }
        if let Some(img) = &record.image {
            Self::write(&staging.join(IMAGE), &img.to_png()?)?;
        }
        let mut losses = String::new();
        for fit in &record.loss_trace {
            for it in &fit.history {
                let line = LossLine {
                    step: fit.step,
                    iter: it.iter,
                    loss: it.loss,
                };
                losses.push_str(&serde_json::to_string(&line).expect("loss line serializes"));
                losses.push('\n');
            }
        }
        Self::write(&staging.join(LOSSES), losses.as_bytes())?;
        let manifest = Manifest {
            run_id: record.run_id.clone(),
            backend: record.backend.clone(),
            kind: record.kind.clone(),
            prompt: record.prompt.clone(),
            directives: record.directives.clone(),
            config: record.config.clone(),
            status: record.status.clone(),
            latent_shape: shape,
            latent_count: record.latents.len(),
            loss_trace: record.loss_trace.clone(),
            has_attention: record.final_attention.is_some(),
            has_image: record.image.is_some(),
        };
        let path = staging.join(MANIFEST);
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| DdError::Json { path: path.clone(), source: e })?;
        Self::write(&path, &json)?;
        fs::rename(&staging, &dir).map_err(|e| DdError::io(&dir, e))?;

        let entry = IndexEntry {
            run_id: record.run_id.clone(),
            manifest: format!("runs/{}/{MANIFEST}", record.run_id),
        };
        let index = self.root.join(INDEX);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index)
            .map_err(|e| DdError::io(&index, e))?;
        let mut line = serde_json::to_string(&entry).expect("index entry serializes");
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| DdError::io(&index, e))?;
        Ok(record.run_id.clone())
    }

    pub fn manifest(&self, run_id: &str) -> Result<Manifest> {
        let path = self.run_dir(run_id)?.join(MANIFEST);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(DdError::NotFound(run_id.to_owned())),
            Err(e) => return Err(DdError::io(&path, e)),
        };
        serde_json::from_slice(&bytes).map_err(|e| DdError::Json { path, source: e })
    }

    fn read(&self, run_id: &str, file: &str) -> Result<Vec<u8>> {
        let path = self.run_dir(run_id)?.join(file);
        fs::read(&path).map_err(|e| DdError::io(&path, e))
    }

    pub fn load(&self, run_id: &str) -> Result<RunRecord> {
        let m = self.manifest(run_id)?;
        let dir = self.run_dir(run_id)?;
        let (_, latents) = decode_trajectory(&self.read(run_id, LATENTS)?, &dir.join(LATENTS))?;
        let (_, noise) = decode_trajectory(&self.read(run_id, NOISE)?, &dir.join(NOISE))?;
        if latents.len() != m.latent_count {
            return Err(format_err(
                &dir.join(LATENTS),
                format!("{} latents stored, manifest says {}", latents.len(), m.latent_count),
            ));
        }
        let final_attention = if m.has_attention {
            Some(decode_attention(&self.read(run_id, ATTENTION)?, &dir.join(ATTENTION))?)
        } else {
            None
        };
        let image = if m.has_image {
            Some(Image::from_png(&self.read(run_id, IMAGE)?)?)
        } else {
            None
        };
        Ok(RunRecord {
            run_id: m.run_id,
            backend: m.backend,
            kind: m.kind,
            prompt: m.prompt,
            directives: m.directives,
            config: m.config,
            latents,
            noise,
            final_attention,
            loss_trace: m.loss_trace,
            image,
            status: m.status,
        })
    }

    pub fn image_png(&self, run_id: &str) -> Result<Vec<u8>> {
        if !self.manifest(run_id)?.has_image {
            return Err(DdError::NotFound(format!("{run_id}/image")));
        }
        self.read(run_id, IMAGE)
    }

    pub fn losses_jsonl(&self, run_id: &str) -> Result<String> {
        self.manifest(run_id)?;
        let bytes = self.read(run_id, LOSSES)?;
        String::from_utf8(bytes).map_err(|e| format_err(Path::new(LOSSES), e.to_string()))
    }

    pub fn final_attention(&self, run_id: &str) -> Result<Option<CrossAttentionMaps>> {
        if !self.manifest(run_id)?.has_attention {
            return Ok(None);
        }
        let path = self.run_dir(run_id)?.join(ATTENTION);
        Ok(Some(decode_attention(&self.read(run_id, ATTENTION)?, &path)?))
    }

    /// Run ids in save order.
    pub fn list(&self) -> Result<Vec<String>> {
        let index = self.root.join(INDEX);
        let text = match fs::read_to_string(&index) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(DdError::io(&index, e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str::<IndexEntry>(l)
                    .map(|e| e.run_id)
                    .map_err(|e| DdError::Json {
                        path: index.clone(),
                        source: e,
                    })
            })
            .collect()
    }
}
