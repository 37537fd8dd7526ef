//! Deterministic miniature latent-diffusion backend.
//!
//! Latents are `4 x 8 x 8`. The denoiser is two residual MLP blocks around a
//! single two-head cross-attention layer at 8x8, with weights drawn from a
//! fixed seed. The weights are random but structured so that the semantic
//! part of attended token values is written back into the latent and the
//! query reads it again, the feedback loop that attention editing relies on.
//! Token embeddings split into a semantic half and a structural half;
//! trailing (padding) slots carry a damped copy of the prompt's mean
//! semantics, like the padding outputs of a CLIP text encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    AttentionInterceptor, Backend, DifferentiableBackend, LayerInfo, LmsScheduler, Scheduler, StepInfo,
    TextEmbedding,
};
use crate::attention::{CrossAttentionMaps, LayerAttention, TrailingSubstitution, TOKEN_SLOTS};
use crate::error::{DdError, Result};
use crate::tensor::{Image, Latent, LatentShape};

pub const CHANNELS: usize = 4;
pub const SIDE: usize = 8;
pub const HEADS: usize = 2;
pub const EMBED_DIM: usize = 16;
/// Content tokens a prompt may hold; two more slots go to the markers.
pub const MAX_CONTENT_TOKENS: usize = TOKEN_SLOTS - 2;
pub const WEIGHT_SEED: u64 = 42;
pub const SCALE_FACTOR: usize = 8;

const POS: usize = SIDE * SIDE;
const HIDDEN: usize = 16;
const HEAD_DIM: usize = 8;
const SEM: usize = 8;
const MLP: usize = 32;
const TIME_FEATS: usize = 16;

const QUERY_GAIN: f32 = 1.5;
const WRITE_GAIN: f32 = 0.1;
const PAD_SEMANTIC: f32 = 0.5;

const START_TOKEN: &str = "<|startoftext|>";
const END_TOKEN: &str = "<|endoftext|>";

#[derive(Debug, Clone)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f32, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    fn at_mut(&mut self, r: usize, c: usize) -> &mut f32 {
        &mut self.data[r * self.cols + c]
    }

    fn mul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(r, k);
                for c in 0..other.cols {
                    *out.at_mut(r, c) += a * other.at(k, c);
                }
            }
        }
        out
    }

    fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    fn scale(mut self, s: f32) -> Mat {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }

    fn add(mut self, other: &Mat) -> Mat {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        self
    }

    /// `self * x`
    fn apply(&self, x: &[f32], out: &mut [f32]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `self^T * g`
    fn apply_t(&self, g: &[f32], out: &mut [f32]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, &gr) in g.iter().enumerate().take(self.rows) {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * gr;
            }
        }
    }

    /// Orthonormalizes columns in place (modified Gram-Schmidt).
    fn orthonormal_columns(mut self) -> Mat {
        for c in 0..self.cols {
            for prev in 0..c {
                let dot: f32 = (0..self.rows).map(|r| self.at(r, c) * self.at(r, prev)).sum();
                for r in 0..self.rows {
                    let v = self.at(r, prev);
                    *self.at_mut(r, c) -= dot * v;
                }
            }
            let norm = (0..self.rows).map(|r| self.at(r, c).powi(2)).sum::<f32>().sqrt();
            for r in 0..self.rows {
                *self.at_mut(r, c) /= norm;
            }
        }
        self
    }

    fn rows_block(&self, start: usize, len: usize) -> Mat {
        Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }
}

fn vec_random(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len).map(|_| scale * rng.sample::<f32, _>(StandardNormal)).collect()
}

#[derive(Debug, Clone)]
struct Weights {
    w_in: Mat,
    b_in: Vec<f32>,
    pos: Mat,
    w_time: Mat,
    w1a: Mat,
    b1a: Vec<f32>,
    w1b: Mat,
    wq: Vec<Mat>,
    wk: Vec<Mat>,
    wv: Vec<Mat>,
    /// Output projection split per head, `HIDDEN x HEAD_DIM` each.
    wo: Vec<Mat>,
    w2a: Mat,
    b2a: Vec<f32>,
    w2b: Mat,
    w_out: Mat,
    decoder: Mat,
    decoder_bias: [f32; 3],
}

impl Weights {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_in = Mat::random(&mut rng, HIDDEN, CHANNELS, 1.0).orthonormal_columns();
        let project_out = |m: Mat| -> Mat {
            // remove the component along the latent read-in subspace, column-wise
            let coeffs = w_in.transpose().mul(&m);
            m.add(&w_in.mul(&coeffs).scale(-1.0))
        };
        let b_in = vec_random(&mut rng, HIDDEN, 0.05);
        let pos = project_out(Mat::random(&mut rng, HIDDEN, POS, 0.5)).transpose();
        let w_time = project_out(Mat::random(&mut rng, HIDDEN, TIME_FEATS, 0.2 / (TIME_FEATS as f32).sqrt()));
        let w1a = Mat::random(&mut rng, MLP, HIDDEN, 0.3 / (HIDDEN as f32).sqrt());
        let b1a = vec_random(&mut rng, MLP, 0.1);
        let w1b = Mat::random(&mut rng, HIDDEN, MLP, 0.3 / (MLP as f32).sqrt());

        let semantic = Mat::random(&mut rng, CHANNELS, SEM, 1.0 / (SEM as f32).sqrt());
        let writers = Mat::random(&mut rng, HEADS * HEAD_DIM, CHANNELS, 1.0).orthonormal_columns();
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        let mut wo = Vec::new();
        for h in 0..HEADS {
            let reader = Mat::random(&mut rng, HEAD_DIM, CHANNELS, 1.0 / (CHANNELS as f32).sqrt());
            let noise = Mat::random(&mut rng, HEAD_DIM, HIDDEN, 0.3 / (HIDDEN as f32).sqrt());
            wq.push(reader.mul(&w_in.transpose()).scale(QUERY_GAIN).add(&noise));

            let key_sem = reader.mul(&semantic);
            let key_struct = Mat::random(&mut rng, HEAD_DIM, EMBED_DIM - SEM, 0.5 / ((EMBED_DIM - SEM) as f32).sqrt());
            let writer = writers.rows_block(h * HEAD_DIM, HEAD_DIM);
            let val_sem = writer.mul(&semantic);
            let mut k = Mat::zeros(HEAD_DIM, EMBED_DIM);
            let mut v = Mat::zeros(HEAD_DIM, EMBED_DIM);
            for r in 0..HEAD_DIM {
                for c in 0..SEM {
                    *k.at_mut(r, c) = key_sem.at(r, c);
                    *v.at_mut(r, c) = val_sem.at(r, c);
                }
                for c in SEM..EMBED_DIM {
                    *k.at_mut(r, c) = key_struct.at(r, c - SEM);
                }
            }
            wk.push(k);
            wv.push(v);
            // value content lands back in the latent read-in subspace with negative sign,
            // so the scheduler update (which subtracts noise) adds it to the latent
            wo.push(w_in.mul(&writer.transpose()).scale(-WRITE_GAIN));
        }
        let w2a = Mat::random(&mut rng, MLP, HIDDEN, 0.3 / (HIDDEN as f32).sqrt());
        let b2a = vec_random(&mut rng, MLP, 0.1);
        let w2b = Mat::random(&mut rng, HIDDEN, MLP, 0.3 / (MLP as f32).sqrt());
        let w_out = w_in.transpose();
        let decoder = Mat::random(&mut rng, 3, CHANNELS, 0.35);
        let decoder_bias = [0.05, -0.02, 0.03];
        Self {
            w_in,
            b_in,
            pos,
            w_time,
            w1a,
            b1a,
            w1b,
            wq,
            wk,
            wv,
            wo,
            w2a,
            b2a,
            w2b,
            w_out,
            decoder,
            decoder_bias,
        }
    }
}

/// Intermediate activations of one conditional pass.
struct Trace {
    input_scale: f32,
    u1: Vec<f32>,
    /// `[head][slot][HEAD_DIM]`
    keys: Vec<f32>,
    values: Vec<f32>,
    captured: LayerAttention,
    h2: Vec<f32>,
    u2: Vec<f32>,
    eps: Latent,
}

pub struct ToyBackend {
    weights: Weights,
    manifest: Vec<LayerInfo>,
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn token_vector(key: &str) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(key.as_bytes()));
    vec_random(&mut rng, EMBED_DIM, 1.0)
}

fn time_features(timestep: f64) -> Vec<f32> {
    let half = TIME_FEATS / 2;
    let mut out = Vec::with_capacity(TIME_FEATS);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push((timestep * freq).sin() as f32);
    }
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push((timestep * freq).cos() as f32);
    }
    out
}

impl ToyBackend {
    pub fn new() -> Self {
        Self::with_seed(WEIGHT_SEED)
    }

    pub fn with_seed(seed: u64) -> Self {
        Self {
            weights: Weights::new(seed),
            manifest: vec![LayerInfo {
                id: 0,
                name: "mid.cross_attn".into(),
                resolution: SIDE,
                heads: HEADS,
            }],
        }
    }

    fn tokens_of(prompt: &str) -> Result<Vec<String>> {
        let content: Vec<String> = prompt.split_whitespace().map(str::to_lowercase).collect();
        if content.len() > MAX_CONTENT_TOKENS {
            return Err(DdError::validation(
                "prompt",
                format!(
                    "{} tokens exceed the limit of {MAX_CONTENT_TOKENS}",
                    content.len()
                ),
            ));
        }
        let mut tokens = Vec::with_capacity(content.len() + 2);
        tokens.push(START_TOKEN.to_owned());
        tokens.extend(content);
        tokens.push(END_TOKEN.to_owned());
        Ok(tokens)
    }

    fn check_latent(&self, z: &Latent) -> Result<()> {
        if z.shape() != self.latent_shape() {
            return Err(DdError::Shape {
                context: "toy backend latent",
                expected: self.latent_shape().to_string(),
                actual: z.shape().to_string(),
            });
        }
        Ok(())
    }

    fn check_embedding(&self, emb: &TextEmbedding) -> Result<()> {
        if emb.dim != EMBED_DIM {
            return Err(DdError::Shape {
                context: "toy backend embedding",
                expected: EMBED_DIM.to_string(),
                actual: emb.dim.to_string(),
            });
        }
        Ok(())
    }

    /// `h0` for every position: read-in, positional and time embeddings.
    fn stem(&self, z: &Latent, step: &StepInfo) -> (f32, Vec<f32>) {
        let w = &self.weights;
        let scale = step.input_scale as f32;
        let mut temb = vec![0.0; HIDDEN];
        w.w_time.apply(&time_features(step.timestep), &mut temb);
        let mut h0 = vec![0.0f32; POS * HIDDEN];
        let mut x = [0.0f32; CHANNELS];
        for p in 0..POS {
            for (c, xc) in x.iter_mut().enumerate() {
                *xc = scale * z.data()[c * POS + p];
            }
            let row = &mut h0[p * HIDDEN..(p + 1) * HIDDEN];
            w.w_in.apply(&x, row);
            for (i, v) in row.iter_mut().enumerate() {
                *v += w.b_in[i] + w.pos.at(p, i) + temb[i];
            }
        }
        (scale, h0)
    }

    fn residual_mlp(a: &Mat, b_a: &[f32], b: &Mat, input: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let mut u = vec![0.0f32; POS * MLP];
        let mut out = input.to_vec();
        let mut tmp = vec![0.0f32; HIDDEN];
        for p in 0..POS {
            let hu = &mut u[p * MLP..(p + 1) * MLP];
            a.apply(&input[p * HIDDEN..(p + 1) * HIDDEN], hu);
            for (v, bias) in hu.iter_mut().zip(b_a) {
                *v = (*v + bias).tanh();
            }
            b.apply(hu, &mut tmp);
            for (o, t) in out[p * HIDDEN..(p + 1) * HIDDEN].iter_mut().zip(&tmp) {
                *o += t;
            }
        }
        (u, out)
    }

    /// Back-propagates through `out = in + b * tanh(a * in + b_a)` given the
    /// saved activations `u`.
    fn residual_mlp_back(a: &Mat, b: &Mat, u: &[f32], g_out: &[f32]) -> Vec<f32> {
        let mut g_in = g_out.to_vec();
        let mut g_u = vec![0.0f32; MLP];
        let mut g_h = vec![0.0f32; HIDDEN];
        for p in 0..POS {
            b.apply_t(&g_out[p * HIDDEN..(p + 1) * HIDDEN], &mut g_u);
            for (g, &uu) in g_u.iter_mut().zip(&u[p * MLP..(p + 1) * MLP]) {
                *g *= 1.0 - uu * uu;
            }
            a.apply_t(&g_u, &mut g_h);
            for (gi, gh) in g_in[p * HIDDEN..(p + 1) * HIDDEN].iter_mut().zip(&g_h) {
                *gi += gh;
            }
        }
        g_in
    }

    fn project_tokens(&self, emb: &TextEmbedding, mats: &[Mat]) -> Vec<f32> {
        let mut out = vec![0.0f32; HEADS * TOKEN_SLOTS * HEAD_DIM];
        for (h, m) in mats.iter().enumerate() {
            for s in 0..TOKEN_SLOTS {
                let o = (h * TOKEN_SLOTS + s) * HEAD_DIM;
                m.apply(emb.slot(s), &mut out[o..o + HEAD_DIM]);
            }
        }
        out
    }

    fn forward(
        &self,
        z: &Latent,
        emb: &TextEmbedding,
        step: &StepInfo,
        interceptor: Option<&mut dyn AttentionInterceptor>,
    ) -> Result<Trace> {
        self.check_latent(z)?;
        self.check_embedding(emb)?;
        let w = &self.weights;
        let (input_scale, h0) = self.stem(z, step);
        let (u1, h1) = Self::residual_mlp(&w.w1a, &w.b1a, &w.w1b, &h0);

        let keys = self.project_tokens(emb, &w.wk);
        let values = self.project_tokens(emb, &w.wv);
        let inv_sqrt = 1.0 / (HEAD_DIM as f32).sqrt();
        let mut attn = vec![0.0f32; HEADS * POS * TOKEN_SLOTS];
        let mut q = vec![0.0f32; HEAD_DIM];
        for h in 0..HEADS {
            for p in 0..POS {
                w.wq[h].apply(&h1[p * HIDDEN..(p + 1) * HIDDEN], &mut q);
                let row = &mut attn[(h * POS + p) * TOKEN_SLOTS..(h * POS + p + 1) * TOKEN_SLOTS];
                for (s, logit) in row.iter_mut().enumerate() {
                    let k = &keys[(h * TOKEN_SLOTS + s) * HEAD_DIM..(h * TOKEN_SLOTS + s + 1) * HEAD_DIM];
                    *logit = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * inv_sqrt;
                }
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        let captured = LayerAttention::new(0, SIDE, HEADS, attn)?;
        let used = match interceptor {
            Some(hook) => match hook.intercept(&self.manifest[0], &captured)? {
                Some(replacement) => {
                    if !replacement.same_layout(&captured) || replacement.data().len() != captured.data().len() {
                        return Err(DdError::Contract(format!(
                            "interceptor returned maps of layout {}x{}x{} for layer {} ({}x{}x{} expected)",
                            replacement.heads(),
                            replacement.positions(),
                            TOKEN_SLOTS,
                            captured.layer_id(),
                            captured.heads(),
                            captured.positions(),
                            TOKEN_SLOTS
                        )));
                    }
                    Some(replacement)
                }
                None => None,
            },
            None => None,
        };
        let maps = used.as_ref().unwrap_or(&captured);

        let mut h2 = h1;
        let mut o = vec![0.0f32; HEAD_DIM];
        let mut delta = vec![0.0f32; HIDDEN];
        for p in 0..POS {
            for h in 0..HEADS {
                o.iter_mut().for_each(|v| *v = 0.0);
                for s in 0..TOKEN_SLOTS {
                    let a = maps.get(h, p, s);
                    if a == 0.0 {
                        continue;
                    }
                    let v = &values[(h * TOKEN_SLOTS + s) * HEAD_DIM..(h * TOKEN_SLOTS + s + 1) * HEAD_DIM];
                    for (oi, vi) in o.iter_mut().zip(v) {
                        *oi += a * vi;
                    }
                }
                w.wo[h].apply(&o, &mut delta);
                for (hv, d) in h2[p * HIDDEN..(p + 1) * HIDDEN].iter_mut().zip(&delta) {
                    *hv += d;
                }
            }
        }
        let (u2, h3) = Self::residual_mlp(&w.w2a, &w.b2a, &w.w2b, &h2);
        let mut eps = Latent::zeros(self.latent_shape());
        let mut out = [0.0f32; CHANNELS];
        for p in 0..POS {
            w.w_out.apply(&h3[p * HIDDEN..(p + 1) * HIDDEN], &mut out);
            for (c, v) in out.iter().enumerate() {
                eps.data_mut()[c * POS + p] = *v;
            }
        }
        Ok(Trace {
            input_scale,
            u1,
            keys,
            values,
            captured,
            h2,
            u2,
            eps,
        })
    }

    /// Gradient of `<g_eps, eps>` with respect to the per-head attention outputs,
    /// laid out `[position][head][HEAD_DIM]`.
    fn grad_attention_output(&self, trace: &Trace, g_eps: &Latent) -> Vec<f32> {
        let w = &self.weights;
        let mut g_h3 = vec![0.0f32; POS * HIDDEN];
        let mut gp = [0.0f32; CHANNELS];
        for p in 0..POS {
            for (c, g) in gp.iter_mut().enumerate() {
                *g = g_eps.data()[c * POS + p];
            }
            w.w_out.apply_t(&gp, &mut g_h3[p * HIDDEN..(p + 1) * HIDDEN]);
        }
        let g_h2 = Self::residual_mlp_back(&w.w2a, &w.w2b, &trace.u2, &g_h3);
        let mut g_o = vec![0.0f32; POS * HEADS * HEAD_DIM];
        for p in 0..POS {
            for h in 0..HEADS {
                let o = (p * HEADS + h) * HEAD_DIM;
                w.wo[h].apply_t(&g_h2[p * HIDDEN..(p + 1) * HIDDEN], &mut g_o[o..o + HEAD_DIM]);
            }
        }
        // keep h2 alive in the trace for callers that need it
        debug_assert_eq!(trace.h2.len(), POS * HIDDEN);
        g_o
    }
}

impl Backend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_shape(&self) -> LatentShape {
        LatentShape::new(CHANNELS, SIDE, SIDE)
    }

    fn layer_manifest(&self) -> &[LayerInfo] {
        &self.manifest
    }

    fn vae_scale_factor(&self) -> usize {
        SCALE_FACTOR
    }

    fn tokenize(&self, prompt: &str) -> Result<Vec<String>> {
        Self::tokens_of(prompt)
    }

    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        let tokens = Self::tokens_of(prompt)?;
        let prompt_len = tokens.len();
        let content = &tokens[1..prompt_len - 1];
        let mut data = vec![0.0f32; TOKEN_SLOTS * EMBED_DIM];
        let mut mean_sem = [0.0f32; SEM];
        for (i, tok) in tokens.iter().enumerate() {
            let raw = token_vector(tok);
            let row = &mut data[i * EMBED_DIM..(i + 1) * EMBED_DIM];
            let marker = i == 0 || i == prompt_len - 1;
            for d in 0..EMBED_DIM {
                let is_sem = d < SEM;
                row[d] = match (marker, is_sem) {
                    (false, true) | (true, false) => raw[d],
                    _ => 0.2 * raw[d],
                };
            }
            if !marker {
                for (m, v) in mean_sem.iter_mut().zip(&row[..SEM]) {
                    *m += v / content.len() as f32;
                }
            }
        }
        let end = token_vector(END_TOKEN);
        for slot in prompt_len..TOKEN_SLOTS {
            let jitter = token_vector(&format!("<|pad:{slot}|>"));
            let row = &mut data[slot * EMBED_DIM..(slot + 1) * EMBED_DIM];
            for d in 0..SEM {
                row[d] = PAD_SEMANTIC * mean_sem[d];
            }
            for d in SEM..EMBED_DIM {
                row[d] = end[d] + 0.3 * jitter[d];
            }
        }
        TextEmbedding::new(tokens, EMBED_DIM, data)
    }

    fn sample_initial_latent(&self, seed: u64) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = self.latent_shape();
        let data = (0..shape.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Latent::from_vec(shape, data).expect("length matches shape")
    }

    fn scheduler(&self, total_steps: usize) -> Result<Box<dyn Scheduler>> {
        Ok(Box::new(LmsScheduler::new(total_steps)?))
    }

    fn denoise_cond(
        &self,
        z: &Latent,
        cond: &TextEmbedding,
        step: &StepInfo,
        interceptor: Option<&mut dyn AttentionInterceptor>,
    ) -> Result<(Latent, CrossAttentionMaps)> {
        let trace = self.forward(z, cond, step, interceptor)?;
        let maps = CrossAttentionMaps::new(cond.prompt_len, vec![trace.captured])?;
        Ok((trace.eps, maps))
    }

    fn denoise_uncond(&self, z: &Latent, uncond: &TextEmbedding, step: &StepInfo) -> Result<Latent> {
        Ok(self.forward(z, uncond, step, None)?.eps)
    }

    fn decode(&self, z: &Latent) -> Result<Image> {
        self.check_latent(z)?;
        let w = &self.weights;
        let out_side = SIDE * SCALE_FACTOR;
        let mut rgb = vec![0u8; out_side * out_side * 3];
        let mut lat = [0.0f32; CHANNELS];
        let mut col = [0.0f32; 3];
        for y in 0..SIDE {
            for x in 0..SIDE {
                for (c, v) in lat.iter_mut().enumerate() {
                    *v = z.get(c, y, x);
                }
                w.decoder.apply(&lat, &mut col);
                let px: Vec<u8> = col
                    .iter()
                    .zip(&w.decoder_bias)
                    .map(|(v, b)| (((v + b) * 0.5 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8)
                    .collect();
                for dy in 0..SCALE_FACTOR {
                    for dx in 0..SCALE_FACTOR {
                        let o = ((y * SCALE_FACTOR + dy) * out_side + x * SCALE_FACTOR + dx) * 3;
                        rgb[o..o + 3].copy_from_slice(&px);
                    }
                }
            }
        }
        Image::new(out_side as u32, out_side as u32, rgb)
    }

    fn gradients(&self) -> Option<&dyn DifferentiableBackend> {
        Some(self)
    }
}

impl DifferentiableBackend for ToyBackend {
    fn trailing_weight_vjp(
        &self,
        z: &Latent,
        cond: &TextEmbedding,
        step: &StepInfo,
        substitution: &TrailingSubstitution,
        cotangent: &Latent,
    ) -> Result<Vec<f64>> {
        self.check_latent(cotangent)?;
        let mut hook = substitution.clone();
        let trace = self.forward(z, cond, step, Some(&mut hook))?;
        let g_o = self.grad_attention_output(&trace, cotangent);
        let start = substitution.prompt_len();
        let mut grad = vec![0.0f64; substitution.weights().len()];
        for (j, g) in grad.iter_mut().enumerate() {
            let slot = start + j;
            let src = substitution.source(0, j);
            let mut acc = 0.0f64;
            for (p, &d) in src.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let mut dot = 0.0f32;
                for h in 0..HEADS {
                    let go = &g_o[(p * HEADS + h) * HEAD_DIM..(p * HEADS + h + 1) * HEAD_DIM];
                    let v = &trace.values[(h * TOKEN_SLOTS + slot) * HEAD_DIM..(h * TOKEN_SLOTS + slot + 1) * HEAD_DIM];
                    dot += go.iter().zip(v).map(|(a, b)| a * b).sum::<f32>();
                }
                acc += f64::from(d) * f64::from(dot);
            }
            *g = acc;
        }
        Ok(grad)
    }

    fn attention_latent_vjp(
        &self,
        z: &Latent,
        cond: &TextEmbedding,
        step: &StepInfo,
        cotangents: &[Vec<f64>],
    ) -> Result<Latent> {
        if cotangents.len() != 1 || cotangents[0].len() != POS * TOKEN_SLOTS {
            return Err(DdError::Shape {
                context: "attention cotangent",
                expected: format!("1 layer of {}", POS * TOKEN_SLOTS),
                actual: format!("{} layers", cotangents.len()),
            });
        }
        let w = &self.weights;
        let trace = self.forward(z, cond, step, None)?;
        let cot = &cotangents[0];
        let inv_sqrt = 1.0 / (HEAD_DIM as f32).sqrt();
        let mut g_h1 = vec![0.0f32; POS * HIDDEN];
        let mut g_q = vec![0.0f32; HEAD_DIM];
        let mut g_h = vec![0.0f32; HIDDEN];
        for h in 0..HEADS {
            for p in 0..POS {
                let row = &cot[p * TOKEN_SLOTS..(p + 1) * TOKEN_SLOTS];
                // softmax backward on the head's share of the averaged map
                let mut dot = 0.0f64;
                for (s, &g) in row.iter().enumerate() {
                    dot += f64::from(trace.captured.get(h, p, s)) * g / HEADS as f64;
                }
                g_q.iter_mut().for_each(|v| *v = 0.0);
                for (s, &g) in row.iter().enumerate() {
                    let a = f64::from(trace.captured.get(h, p, s));
                    let g_logit = (a * (g / HEADS as f64 - dot)) as f32 * inv_sqrt;
                    if g_logit == 0.0 {
                        continue;
                    }
                    let k = &trace.keys[(h * TOKEN_SLOTS + s) * HEAD_DIM..(h * TOKEN_SLOTS + s + 1) * HEAD_DIM];
                    for (gq, kv) in g_q.iter_mut().zip(k) {
                        *gq += g_logit * kv;
                    }
                }
                w.wq[h].apply_t(&g_q, &mut g_h);
                for (acc, v) in g_h1[p * HIDDEN..(p + 1) * HIDDEN].iter_mut().zip(&g_h) {
                    *acc += v;
                }
            }
        }
        let g_h0 = Self::residual_mlp_back(&w.w1a, &w.w1b, &trace.u1, &g_h1);
        let mut g_z = Latent::zeros(self.latent_shape());
        let mut gx = [0.0f32; CHANNELS];
        for p in 0..POS {
            w.w_in.apply_t(&g_h0[p * HIDDEN..(p + 1) * HIDDEN], &mut gx);
            for (c, g) in gx.iter().enumerate() {
                g_z.data_mut()[c * POS + p] = g * trace.input_scale;
            }
        }
        Ok(g_z)
    }
}
