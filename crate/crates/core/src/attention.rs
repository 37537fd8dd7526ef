//! Cross-attention maps, target maps, and the trailing-weight fit.
//!
//! Token slots are zero-based inside this module. A directive's 1-based token
//! index `i` addresses slot `i - 1`; the trailing slots are
//! `prompt_len..TOKEN_SLOTS`.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{AttentionInterceptor, Backend, LayerInfo, Scheduler, SchedulerState, TextEmbedding};
use crate::error::{DdError, Result};
use crate::regions::{strengthen_mask, weaken_mask, MaskGrid, RegionDirective};
use crate::tensor::Latent;

/// Token slots of the text encoder.
pub const TOKEN_SLOTS: usize = 77;

/// Post-softmax maps of one cross-attention layer, laid out `[head][position][slot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    layer_id: usize,
    side: usize,
    heads: usize,
    data: Vec<f32>,
}

impl LayerAttention {
    pub fn new(layer_id: usize, side: usize, heads: usize, data: Vec<f32>) -> Result<Self> {
        let expected = heads * side * side * TOKEN_SLOTS;
        if data.len() != expected {
            return Err(DdError::Shape {
                context: "layer attention",
                expected: format!("{heads}x{}x{TOKEN_SLOTS} = {expected}", side * side),
                actual: data.len().to_string(),
            });
        }
        Ok(Self {
            layer_id,
            side,
            heads,
            data,
        })
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }
    pub fn side(&self) -> usize {
        self.side
    }
    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn positions(&self) -> usize {
        self.side * self.side
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, head: usize, pos: usize, slot: usize) -> usize {
        (head * self.positions() + pos) * TOKEN_SLOTS + slot
    }

    pub fn get(&self, head: usize, pos: usize, slot: usize) -> f32 {
        self.data[self.offset(head, pos, slot)]
    }

    pub fn set(&mut self, head: usize, pos: usize, slot: usize, value: f32) {
        let i = self.offset(head, pos, slot);
        self.data[i] = value;
    }

    /// Same layer, resolution and head count.
    pub fn same_layout(&self, other: &LayerAttention) -> bool {
        self.layer_id == other.layer_id && self.side == other.side && self.heads == other.heads
    }

    /// Head-averaged map of one slot over positions.
    pub fn head_mean(&self, slot: usize) -> Vec<f32> {
        (0..self.positions())
            .map(|p| {
                let sum: f64 = (0..self.heads).map(|h| f64::from(self.get(h, p, slot))).sum();
                (sum / self.heads as f64) as f32
            })
            .collect()
    }

    /// Largest deviation of a `(head, position)` row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.data
            .chunks(TOKEN_SLOTS)
            .map(|row| (row.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f32) -> LayerAttention {
        LayerAttention {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Maps from every cross-attention layer of one conditional pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionMaps {
    prompt_len: usize,
    layers: Vec<LayerAttention>,
}

impl CrossAttentionMaps {
    pub fn new(prompt_len: usize, layers: Vec<LayerAttention>) -> Result<Self> {
        if prompt_len == 0 || prompt_len > TOKEN_SLOTS {
            return Err(DdError::validation(
                "prompt_len",
                format!("must lie in 1..={TOKEN_SLOTS}, got {prompt_len}"),
            ));
        }
        Ok(Self { prompt_len, layers })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }
    pub fn layers(&self) -> &[LayerAttention] {
        &self.layers
    }
    pub fn layers_mut(&mut self) -> &mut [LayerAttention] {
        &mut self.layers
    }
    pub fn trailing_slots(&self) -> Range<usize> {
        self.prompt_len..TOKEN_SLOTS
    }
    pub fn trailing_len(&self) -> usize {
        TOKEN_SLOTS - self.prompt_len
    }

    pub fn scaled(&self, factor: f32) -> CrossAttentionMaps {
        CrossAttentionMaps {
            prompt_len: self.prompt_len,
            layers: self.layers.iter().map(|l| l.scaled(factor)).collect(),
        }
    }

    fn check_directives(&self, directives: &[RegionDirective]) -> Result<()> {
        if directives.is_empty() {
            return Err(DdError::validation("directives", "at least one directive is required"));
        }
        for (k, d) in directives.iter().enumerate() {
            d.validate_for_prompt(self.prompt_len)
                .map_err(|e| e.within(&format!("directives[{k}]")))?;
        }
        Ok(())
    }
}

/// Edited maps `D` for the directed and trailing slots of each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    prompt_len: usize,
    layers: Vec<LayerTargets>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTargets {
    pub side: usize,
    /// Slot to map over positions. Keys are exactly the directed and trailing slots.
    pub maps: BTreeMap<usize, Vec<f32>>,
    /// Directed slots, ascending.
    pub directed: Vec<usize>,
}

impl TargetMaps {
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }
    pub fn layers(&self) -> &[LayerTargets] {
        &self.layers
    }
    pub fn get(&self, layer: usize, slot: usize) -> Option<&[f32]> {
        self.layers.get(layer)?.maps.get(&slot).map(Vec::as_slice)
    }
    pub fn trailing_len(&self) -> usize {
        TOKEN_SLOTS - self.prompt_len
    }
}

/// Weaken/strengthen masks of the directives covering one slot, composed by
/// elementwise min (weaken) and sum (strengthen).
struct ComposedMasks {
    weaken: MaskGrid,
    strengthen: MaskGrid,
}

fn compose_masks<'a>(
    directives: impl Iterator<Item = &'a RegionDirective>,
    n: usize,
    c: f32,
    c_g: f32,
) -> Result<Option<ComposedMasks>> {
    let mut acc: Option<ComposedMasks> = None;
    for d in directives {
        let w = weaken_mask(&d.bbox, n, c)?;
        let s = strengthen_mask(&d.bbox, n, c_g)?;
        acc = Some(match acc {
            None => ComposedMasks {
                weaken: w,
                strengthen: s,
            },
            Some(prev) => ComposedMasks {
                weaken: prev.weaken.elementwise_min(&w),
                strengthen: prev.strengthen.elementwise_sum(&s),
            },
        });
    }
    Ok(acc)
}

fn edit_map(map: &[f32], masks: &ComposedMasks) -> Vec<f32> {
    map.iter()
        .zip(masks.weaken.values())
        .zip(masks.strengthen.values())
        .map(|((&a, &w), &s)| a * w + s)
        .collect()
}

fn directed_slots(directives: &[RegionDirective]) -> Vec<usize> {
    let mut slots: Vec<usize> = directives.iter().flat_map(|d| d.slots()).collect();
    slots.sort_unstable();
    slots.dedup();
    slots
}

/// Builds `D = A ⊙ W + S` from head-averaged maps for every directed and trailing slot.
pub fn build_target_maps(
    maps: &CrossAttentionMaps,
    directives: &[RegionDirective],
    c: f32,
    c_g: f32,
) -> Result<TargetMaps> {
    maps.check_directives(directives)?;
    let directed = directed_slots(directives);
    let mut layers = Vec::with_capacity(maps.layers.len());
    for layer in &maps.layers {
        let n = layer.side();
        let mut out = BTreeMap::new();
        for &slot in &directed {
            let masks = compose_masks(
                directives.iter().filter(|d| d.slots().any(|s| s == slot)),
                n,
                c,
                c_g,
            )?
            .expect("slot comes from some directive");
            out.insert(slot, edit_map(&layer.head_mean(slot), &masks));
        }
        let trailing_masks = compose_masks(directives.iter(), n, c, c_g)?.expect("directives nonempty");
        for slot in maps.trailing_slots() {
            out.insert(slot, edit_map(&layer.head_mean(slot), &trailing_masks));
        }
        layers.push(LayerTargets {
            side: n,
            maps: out,
            directed: directed.clone(),
        });
    }
    Ok(TargetMaps {
        prompt_len: maps.prompt_len,
        layers,
    })
}

/// One evaluated iterate of the trailing-weight fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub iter: usize,
    #[serde(with = "crate::tensor::json_float")]
    pub loss: f64,
    #[serde(with = "crate::tensor::json_float::vec_f32")]
    pub weights: Vec<f32>,
}

/// Result of the fit: the best iterate and the full history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrailingWeights {
    pub values: Vec<f32>,
    pub init_range: f32,
    pub history: Vec<IterateRecord>,
}

impl TrailingWeights {
    /// Unfitted weights with no history (e.g. for direct substitution).
    pub fn fixed(values: Vec<f32>) -> Self {
        Self {
            values,
            init_range: 0.0,
            history: Vec::new(),
        }
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.history.iter().map(|r| r.loss).min_by(f64::total_cmp)
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.history.first().map(|r| r.loss)
    }
}

/// Draws initial weights uniformly from `[0, range]`.
pub fn init_trailing_weights(rng: &mut impl Rng, len: usize, range: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random::<f32>() * range).collect()
}

/// Replaces every trailing slot by `weight * D` in all heads of every layer.
#[derive(Debug, Clone)]
pub struct TrailingSubstitution {
    prompt_len: usize,
    weights: Vec<f32>,
    /// `[layer][trailing offset][position]`
    sources: Vec<Vec<Vec<f32>>>,
}

impl TrailingSubstitution {
    pub fn new(targets: &TargetMaps, weights: &[f32]) -> Result<Self> {
        if weights.len() != targets.trailing_len() {
            return Err(DdError::validation(
                "weights",
                format!(
                    "expected {} trailing weights, got {}",
                    targets.trailing_len(),
                    weights.len()
                ),
            ));
        }
        let sources = targets
            .layers
            .iter()
            .map(|l| {
                (targets.prompt_len..TOKEN_SLOTS)
                    .map(|s| l.maps[&s].clone())
                    .collect()
            })
            .collect();
        Ok(Self {
            prompt_len: targets.prompt_len,
            weights: weights.to_vec(),
            sources,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    /// Source map of trailing offset `j` in the `layer_index`-th layer.
    pub fn source(&self, layer_index: usize, j: usize) -> &[f32] {
        &self.sources[layer_index][j]
    }

    fn apply_layer(&self, layer_index: usize, layer: &LayerAttention) -> Result<LayerAttention> {
        let src = self.sources.get(layer_index).ok_or_else(|| {
            DdError::Contract(format!("no substitution source for layer index {layer_index}"))
        })?;
        if src.first().is_some_and(|m| m.len() != layer.positions()) {
            return Err(DdError::Contract(format!(
                "substitution source resolution does not match layer {}",
                layer.layer_id()
            )));
        }
        let mut out = layer.clone();
        for h in 0..layer.heads() {
            for p in 0..layer.positions() {
                for (j, (&w, map)) in self.weights.iter().zip(src).enumerate() {
                    out.set(h, p, self.prompt_len + j, w * map[p]);
                }
            }
        }
        Ok(out)
    }
}

impl AttentionInterceptor for TrailingSubstitution {
    fn intercept(&mut self, layer: &LayerInfo, maps: &LayerAttention) -> Result<Option<LayerAttention>> {
        Ok(Some(self.apply_layer(layer.id, maps)?))
    }
}

/// `A'[T] = Diag(a) D[T]`; prompt slots are left untouched.
pub fn apply_trailing_substitution(
    maps: &CrossAttentionMaps,
    weights: &TrailingWeights,
    targets: &TargetMaps,
) -> Result<CrossAttentionMaps> {
    if targets.prompt_len != maps.prompt_len || targets.layers.len() != maps.layers.len() {
        return Err(DdError::validation(
            "targets",
            "target maps were built for a different prompt or layer set",
        ));
    }
    let subst = TrailingSubstitution::new(targets, &weights.values)?;
    let layers = maps
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| subst.apply_layer(i, l))
        .collect::<Result<Vec<_>>>()?;
    CrossAttentionMaps::new(maps.prompt_len, layers)
}

/// Ablation that skips the fit: each head's directed maps and the first
/// `num_trailing` trailing maps become `A ⊙ W + S` directly.
#[derive(Debug, Clone)]
pub struct DirectInjection {
    pub directives: Vec<RegionDirective>,
    pub num_trailing: usize,
    pub weaken: f32,
    pub amplitude: f32,
    pub prompt_len: usize,
}

impl DirectInjection {
    fn apply_layer(&self, layer: &LayerAttention) -> Result<LayerAttention> {
        let n = layer.side();
        let mut out = layer.clone();
        let mut edits: Vec<(usize, ComposedMasks)> = Vec::new();
        for slot in directed_slots(&self.directives) {
            let m = compose_masks(
                self.directives.iter().filter(|d| d.slots().any(|s| s == slot)),
                n,
                self.weaken,
                self.amplitude,
            )?
            .expect("slot comes from some directive");
            edits.push((slot, m));
        }
        for slot in self.prompt_len..self.prompt_len + self.num_trailing {
            let m = compose_masks(self.directives.iter(), n, self.weaken, self.amplitude)?
                .expect("directives nonempty");
            edits.push((slot, m));
        }
        for (slot, masks) in &edits {
            for h in 0..layer.heads() {
                for p in 0..layer.positions() {
                    let v = layer.get(h, p, *slot) * masks.weaken.values()[p] + masks.strengthen.values()[p];
                    out.set(h, p, *slot, v);
                }
            }
        }
        Ok(out)
    }
}

impl AttentionInterceptor for DirectInjection {
    fn intercept(&mut self, _: &LayerInfo, maps: &LayerAttention) -> Result<Option<LayerAttention>> {
        Ok(Some(self.apply_layer(maps)?))
    }
}

pub fn direct_injection_ablation(
    maps: &CrossAttentionMaps,
    directives: &[RegionDirective],
    num_trailing: usize,
    c: f32,
    c_g: f32,
) -> Result<CrossAttentionMaps> {
    maps.check_directives(directives)?;
    if num_trailing > maps.trailing_len() {
        return Err(DdError::validation(
            "num_trailing",
            format!("must be at most {}, got {num_trailing}", maps.trailing_len()),
        ));
    }
    let inj = DirectInjection {
        directives: directives.to_vec(),
        num_trailing,
        weaken: c,
        amplitude: c_g,
        prompt_len: maps.prompt_len,
    };
    let layers = maps
        .layers
        .iter()
        .map(|l| inj.apply_layer(l))
        .collect::<Result<Vec<_>>>()?;
    CrossAttentionMaps::new(maps.prompt_len, layers)
}

/// Settings of the trailing-weight fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    /// Adam updates per edited denoising step.
    pub iterations: usize,
    pub learning_rate: f64,
    /// Initial weights are drawn from `[0, init_range]`.
    pub init_range: f32,
    /// Start each edited step from the previous step's solution.
    pub warm_start: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            learning_rate: 5e-4,
            init_range: 0.15,
            warm_start: true,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: &OptConfig, len: usize) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p = (f64::from(*p) - self.lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
        }
    }
}

/// Everything the fit needs about the denoising step being edited.
pub struct EditContext<'a> {
    pub backend: &'a dyn Backend,
    pub scheduler: &'a dyn Scheduler,
    pub state: &'a SchedulerState,
    pub z: &'a Latent,
    pub cond: &'a TextEmbedding,
    pub noise_uncond: &'a Latent,
    pub step: usize,
    pub guidance_scale: f64,
}

/// Evaluates the directed-map loss for trailing weights `weights` (and its
/// gradient when asked): the substituted step `t` is taken through guidance
/// and the scheduler, and the unedited maps at `t - 1` are compared with `D`
/// on the directed slots.
pub fn directed_loss(
    ctx: &EditContext<'_>,
    targets: &TargetMaps,
    weights: &[f32],
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let info = ctx.scheduler.step_info(ctx.step);
    let next_info = ctx.scheduler.step_info(ctx.step + 1);
    let mut subst = TrailingSubstitution::new(targets, weights)?;
    let (noise_cond, _) = ctx.backend.denoise_cond(ctx.z, ctx.cond, &info, Some(&mut subst))?;
    let combined = crate::pipeline::cfg_combine(ctx.noise_uncond, &noise_cond, ctx.guidance_scale)?;
    let z_next = ctx.scheduler.preview(ctx.state, ctx.z, &combined, ctx.step)?;
    let (_, next_maps) = ctx.backend.denoise_cond(&z_next, ctx.cond, &next_info, None)?;

    let mut loss = 0.0f64;
    let mut cotangents = Vec::with_capacity(targets.layers.len());
    for (layer, tl) in next_maps.layers().iter().zip(&targets.layers) {
        let mut cot = vec![0.0f64; layer.positions() * TOKEN_SLOTS];
        for &slot in &tl.directed {
            let current = layer.head_mean(slot);
            for (p, (&a, &d)) in current.iter().zip(&tl.maps[&slot]).enumerate() {
                let diff = f64::from(a) - f64::from(d);
                loss += diff * diff;
                cot[p * TOKEN_SLOTS + slot] = 2.0 * diff;
            }
        }
        cotangents.push(cot);
    }
    if !with_grad {
        return Ok((loss, None));
    }
    let grads = ctx
        .backend
        .gradients()
        .ok_or_else(|| DdError::Capability("trailing-weight gradients".into()))?;
    let g_next = grads.attention_latent_vjp(&z_next, ctx.cond, &next_info, &cotangents)?;
    let chain = ctx.guidance_scale * ctx.scheduler.noise_gain(ctx.state, ctx.step);
    let g_noise = g_next.map(|v| (f64::from(v) * chain) as f32);
    let grad = grads.trailing_weight_vjp(ctx.z, ctx.cond, &info, &subst, &g_noise)?;
    Ok((loss, Some(grad)))
}

/// Fits the trailing weights with Adam starting from `init` and returns the
/// iterate with the lowest loss. `iterations` updates evaluate
/// `iterations + 1` iterates.
pub fn optimize_trailing_weights(
    ctx: &EditContext<'_>,
    targets: &TargetMaps,
    config: &OptConfig,
    init: Vec<f32>,
) -> Result<TrailingWeights> {
    if init.len() != targets.trailing_len() {
        return Err(DdError::validation(
            "weights",
            format!("expected {} initial weights, got {}", targets.trailing_len(), init.len()),
        ));
    }
    if ctx.backend.gradients().is_none() && config.iterations > 0 {
        return Err(DdError::Capability("trailing-weight gradients".into()));
    }
    let mut adam = Adam::new(config, init.len());
    let mut weights = init;
    let mut history: Vec<IterateRecord> = Vec::with_capacity(config.iterations + 1);
    for iter in 0..=config.iterations {
        let want_grad = iter < config.iterations;
        let (loss, grad) = directed_loss(ctx, targets, &weights, want_grad)?;
        history.push(IterateRecord {
            iter,
            loss,
            weights: weights.clone(),
        });
        if !loss.is_finite() {
            return Err(DdError::NonFinite {
                what: "loss",
                step: ctx.step,
                iteration: iter,
                history,
            });
        }
        if let Some(grad) = grad {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(DdError::NonFinite {
                    what: "gradient",
                    step: ctx.step,
                    iteration: iter,
                    history,
                });
            }
            adam.step(&mut weights, &grad);
        }
    }
    let best = history
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.loss.total_cmp(&b.1.loss))
        .map(|(i, _)| i)
        .expect("history holds at least one iterate");
    Ok(TrailingWeights {
        values: history[best].weights.clone(),
        init_range: config.init_range,
        history,
    })
}
