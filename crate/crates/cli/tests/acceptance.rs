//! Acceptance suite. Run with `cargo test -p dd-cli --test acceptance -- --nocapture`
//! to see one PASS/FAIL line per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use dd_core::attention::{build_target_maps, OptConfig};
use dd_core::backend::toy::ToyBackend;
use dd_core::backend::{AttentionInterceptor, DifferentiableBackend, LayerInfo, StepInfo, TextEmbedding};
use dd_core::backend::scheduler::Scheduler;
use dd_core::compose::{composite_latents, run_scene_compositing, CompositeSpec, SourceSpec};
use dd_core::harness::{
    ablation_grid, attention_mass_metric, capture_maps_at, gradient_norm_trace, latent_step_norms, run_ssk,
    AblationKey, AblationSpec, BatchMode, RunStore,
};
use dd_core::pipeline::sample_plain;
use dd_core::placement::{
    cyclic_translate, pf_compose_initial, pf_initialize, pf_step_composite, run_placement_finetune, ObjectMask,
    PlacementRequest, Translation,
};
use dd_core::regions::{gaussian_weight, gaussian_window, strengthen_mask, weaken_mask};
use dd_core::{
    run_directed_diffusion, Backend, BoundingBox, CrossAttentionMaps, DenoiseConfig, Image, LayerAttention, Latent,
    LatentShape, RegionDirective, TOKEN_SLOTS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROMPT: &str = "a bear watching a flying bird";
const BEAR: usize = 3;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toy() -> dd_core::Result<Box<dyn Backend>> {
    Ok(Box::new(ToyBackend::new()))
}

fn quadrant() -> RegionDirective {
    RegionDirective::new(BoundingBox::new(0.0, 0.5, 0.0, 0.5).unwrap(), vec![BEAR], "bear").unwrap()
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    loop {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (c, d): (f64, f64) = (rng.random(), rng.random());
        if let Ok(bx) = BoundingBox::new(a.min(b), a.max(b), c.min(d), c.max(d)) {
            return bx;
        }
    }
}

/// Pixel span `[floor(lo * n), ceil(hi * n))`.
fn span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let a = (lo * n as f64).floor() as usize;
    let b = ((hi * n as f64).ceil() as usize).min(n);
    (a.min(n - 1), b.max(a + 1))
}

fn oracle_weaken(bx: &BoundingBox, n: usize, c: f64) -> Vec<f64> {
    let (x0, x1) = span(bx.left(), bx.right(), n);
    let (y0, y1) = span(bx.top(), bx.bottom(), n);
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            out.push(if x >= x0 && x < x1 && y >= y0 && y < y1 { 1.0 } else { c });
        }
    }
    out
}

fn oracle_strengthen(bx: &BoundingBox, n: usize, amp: f64) -> Vec<f64> {
    let (x0, x1) = span(bx.left(), bx.right(), n);
    let (y0, y1) = span(bx.top(), bx.bottom(), n);
    let (bw, bh) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            if x >= x0 && x < x1 && y >= y0 && y < y1 {
                let dx = (x - x0) as f64 - (bw - 1.0) / 2.0;
                let dy = (y - y0) as f64 - (bh - 1.0) / 2.0;
                let sx = bw / 2.0;
                let sy = bh / 2.0;
                out.push(amp * (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp());
            } else {
                out.push(0.0);
            }
        }
    }
    out
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - y).abs()).fold(0.0, f64::max)
}

fn random_maps(rng: &mut ChaCha8Rng, prompt_len: usize, sides: &[usize]) -> CrossAttentionMaps {
    let layers = sides
        .iter()
        .enumerate()
        .map(|(id, &side)| {
            let data = (0..2 * side * side * TOKEN_SLOTS).map(|_| rng.random::<f32>()).collect();
            LayerAttention::new(id, side, 2, data).unwrap()
        })
        .collect();
    CrossAttentionMaps::new(prompt_len, layers).unwrap()
}

fn mask_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let sides = [8usize, 16, 64];
    // A few map sets shared across boxes, with head means per [layer][slot][position].
    let fixtures: Vec<(CrossAttentionMaps, Vec<Vec<Vec<f64>>>)> = (3..7)
        .map(|prompt_len| {
            let maps = random_maps(&mut rng, prompt_len, &sides);
            let means = maps
                .layers()
                .iter()
                .map(|l| {
                    (0..TOKEN_SLOTS)
                        .map(|slot| {
                            (0..l.positions())
                                .map(|p| (0..l.heads()).map(|h| f64::from(l.get(h, p, slot))).sum::<f64>() / l.heads() as f64)
                                .collect()
                        })
                        .collect()
                })
                .collect();
            (maps, means)
        })
        .collect();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let bx = random_box(&mut rng);
        let c: f32 = rng.random();
        let amp: f32 = rng.random::<f32>() * 2.0;
        for &n in &sides {
            let w = weaken_mask(&bx, n, c).map_err(|e| e.to_string())?;
            let s = strengthen_mask(&bx, n, amp).map_err(|e| e.to_string())?;
            worst = worst.max(max_diff(w.values(), &oracle_weaken(&bx, n, f64::from(c))));
            worst = worst.max(max_diff(s.values(), &oracle_strengthen(&bx, n, f64::from(amp))));
        }
        let (maps, means) = &fixtures[rng.random_range(0..fixtures.len())];
        let prompt_len = maps.prompt_len();
        let directive = RegionDirective::new(bx, vec![rng.random_range(1..=prompt_len)], "x").unwrap();
        let targets = build_target_maps(maps, std::slice::from_ref(&directive), c, amp).map_err(|e| e.to_string())?;
        for (li, layer) in maps.layers().iter().enumerate() {
            let n = layer.side();
            let wk = oracle_weaken(&bx, n, f64::from(c));
            let st = oracle_strengthen(&bx, n, f64::from(amp));
            let slots: Vec<usize> = directive.slots().chain(prompt_len..TOKEN_SLOTS).collect();
            ensure(targets.layers()[li].maps.len() == slots.len(), || {
                format!("layer {li}: {} target slots, {} expected", targets.layers()[li].maps.len(), slots.len())
            })?;
            for slot in slots {
                let mean = &means[li][slot];
                let expect: Vec<f64> = (0..n * n).map(|p| mean[p] * wk[p] + st[p]).collect();
                let got = targets.get(li, slot).ok_or_else(|| format!("slot {slot} missing"))?;
                worst = worst.max(max_diff(got, &expect));
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e} exceeds 1e-6"))?;
    Ok(format!("200 boxes x n in {{8,16,64}}, max deviation {worst:.2e}"))
}

fn gaussian_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (bw, bh) = (rng.random_range(1..=64usize), rng.random_range(1..=64usize));
        let (sx, sy) = (bw as f64 / 2.0, bh as f64 / 2.0);
        worst = worst.max((gaussian_weight(sx, sy, sx, sy) - (-1.0f64).exp()).abs());
        let g = gaussian_window(bw, bh).map_err(|e| e.to_string())?;
        for y in 0..bh {
            for x in 0..bw {
                let v = g.get(x, y).to_bits();
                ensure(
                    v == g.get(bw - 1 - x, y).to_bits() && v == g.get(x, bh - 1 - y).to_bits(),
                    || format!("{bw}x{bh} window not flip-symmetric at ({x},{y})"),
                )?;
            }
        }
    }
    ensure(worst <= 1e-6, || format!("corner deviation {worst:e} exceeds 1e-6"))?;
    Ok(format!("20 sizes, corner deviation {worst:.2e}, flips exact"))
}

fn optimization_sanity() -> Check {
    let backend = ToyBackend::new();
    let directive = quadrant();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let config = DenoiseConfig {
            seed,
            opt: OptConfig {
                iterations: 5,
                ..OptConfig::default()
            },
            ..DenoiseConfig::default()
        };
        let n = config.edit_steps;
        let edited = run_directed_diffusion(&backend, PROMPT, std::slice::from_ref(&directive), &config)
            .map_err(|e| e.to_string())?;
        ensure(edited.is_complete(), || format!("seed {seed}: run failed: {:?}", edited.status))?;
        ensure(edited.loss_trace.len() == n, || format!("seed {seed}: {} fitted steps", edited.loss_trace.len()))?;
        for fit in &edited.loss_trace {
            let first = fit.history.first().ok_or("empty iterate history")?.loss;
            let best = fit
                .history
                .iter()
                .min_by(|a, b| a.loss.total_cmp(&b.loss))
                .expect("non-empty");
            ensure(best.loss <= first && best.weights == fit.weights, || {
                format!("seed {seed} step {}: returned iterate is not the best", fit.step)
            })?;
        }
        let baseline = run_directed_diffusion(
            &backend,
            PROMPT,
            std::slice::from_ref(&directive),
            &DenoiseConfig {
                edit_steps: 0,
                ..config.clone()
            },
        )
        .map_err(|e| e.to_string())?;
        let mass = |rec| -> Result<f64, String> {
            let maps = capture_maps_at(&backend, rec, n).map_err(|e| e.to_string())?;
            attention_mass_metric(&maps, &directive).map_err(|e| e.to_string())
        };
        let (me, mb) = (mass(&edited)?, mass(&baseline)?);
        if me > mb {
            wins += 1;
        }
        detail.push(format!("{me:.3}/{mb:.3}"));
    }
    ensure(wins >= 4, || format!("edited beat baseline for {wins}/5 seeds ({})", detail.join(", ")))?;
    Ok(format!("best iterate <= initial at every step; in-box mass edited/baseline {} ({wins}/5)", detail.join(", ")))
}

/// Delegating backend that logs every unconditional pass.
struct UncondLog {
    inner: ToyBackend,
    calls: Mutex<Vec<(usize, Latent, Latent)>>,
}

impl Backend for UncondLog {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn latent_shape(&self) -> LatentShape {
        self.inner.latent_shape()
    }
    fn layer_manifest(&self) -> &[LayerInfo] {
        self.inner.layer_manifest()
    }
    fn vae_scale_factor(&self) -> usize {
        self.inner.vae_scale_factor()
    }
    fn encode_text(&self, prompt: &str) -> dd_core::Result<TextEmbedding> {
        self.inner.encode_text(prompt)
    }
    fn sample_initial_latent(&self, seed: u64) -> Latent {
        self.inner.sample_initial_latent(seed)
    }
    fn scheduler(&self, total_steps: usize) -> dd_core::Result<Box<dyn Scheduler>> {
        self.inner.scheduler(total_steps)
    }
    fn denoise_cond(
        &self,
        z: &Latent,
        cond: &TextEmbedding,
        step: &StepInfo,
        interceptor: Option<&mut dyn AttentionInterceptor>,
    ) -> dd_core::Result<(Latent, CrossAttentionMaps)> {
        self.inner.denoise_cond(z, cond, step, interceptor)
    }
    fn denoise_uncond(&self, z: &Latent, uncond: &TextEmbedding, step: &StepInfo) -> dd_core::Result<Latent> {
        let out = self.inner.denoise_uncond(z, uncond, step)?;
        self.calls.lock().unwrap().push((step.index, z.clone(), out.clone()));
        Ok(out)
    }
    fn decode(&self, z: &Latent) -> dd_core::Result<Image> {
        self.inner.decode(z)
    }
    fn gradients(&self) -> Option<&dyn DifferentiableBackend> {
        self.inner.gradients()
    }
}

fn determinism_and_stage_boundary() -> Check {
    let backend = ToyBackend::new();
    let directive = quadrant();
    let config = DenoiseConfig {
        seed: 3,
        ..DenoiseConfig::default()
    };
    let a = run_directed_diffusion(&backend, PROMPT, std::slice::from_ref(&directive), &config).map_err(|e| e.to_string())?;
    let b = run_directed_diffusion(&backend, PROMPT, std::slice::from_ref(&directive), &config).map_err(|e| e.to_string())?;
    ensure(a.same_content(&b) && a.run_id != b.run_id, || "repeated run differs".into())?;

    let plain_cfg = DenoiseConfig {
        edit_steps: 0,
        ..config.clone()
    };
    let unedited = run_directed_diffusion(&backend, PROMPT, std::slice::from_ref(&directive), &plain_cfg)
        .map_err(|e| e.to_string())?;
    let plain = sample_plain(&backend, PROMPT, config.total_steps, config.guidance_scale, config.seed)
        .map_err(|e| e.to_string())?;
    ensure(
        plain.len() == unedited.latents.len() && plain.iter().zip(&unedited.latents).all(|(x, y)| x.bit_eq(y)),
        || "N=0 trajectory differs from plain sampling".into(),
    )?;

    let logged = UncondLog {
        inner: ToyBackend::new(),
        calls: Mutex::new(Vec::new()),
    };
    let edited = run_directed_diffusion(&logged, PROMPT, std::slice::from_ref(&directive), &config).map_err(|e| e.to_string())?;
    ensure(edited.same_content(&a), || "logged run differs".into())?;
    let calls = logged.calls.into_inner().unwrap();
    ensure(calls.len() >= config.total_steps, || format!("{} unconditional passes logged", calls.len()))?;
    let uncond = backend.encode_text("").map_err(|e| e.to_string())?;
    let cond = backend.encode_text(PROMPT).map_err(|e| e.to_string())?;
    let sched = backend.scheduler(config.total_steps).map_err(|e| e.to_string())?;
    for (k, z, out) in &calls {
        let replay = backend.denoise_uncond(z, &uncond, &sched.step_info(*k)).map_err(|e| e.to_string())?;
        ensure(replay.bit_eq(out), || format!("unconditional pass at step {k} differs on replay"))?;
    }
    for k in 0..config.total_steps {
        ensure(calls.iter().any(|(i, z, _)| *i == k && z.bit_eq(&edited.latents[k])), || {
            format!("no unconditional pass on latents[{k}]")
        })?;
    }

    // Past the editing window every step is an unedited step on its incoming latent.
    let mut edited_differs = false;
    for k in 0..config.total_steps {
        let info = sched.step_info(k);
        let step = backend
            .denoise_step(&edited.latents[k], &cond, &uncond, &info, None)
            .map_err(|e| e.to_string())?;
        let noise = dd_core::pipeline::cfg_combine(&step.noise_uncond, &step.noise_cond, config.guidance_scale)
            .map_err(|e| e.to_string())?;
        let same = noise.bit_eq(&edited.noise[k]);
        if k < config.edit_steps {
            edited_differs |= !same;
        } else {
            ensure(same, || format!("step {k} past the editing window differs from an unedited replay"))?;
        }
        if k == config.total_steps - 1 {
            ensure(Some(&step.maps) == edited.final_attention.as_ref(), || "final maps differ from replay".into())?;
        }
    }
    ensure(edited_differs, || "editing window left the conditional pass unchanged".into())?;
    Ok(format!(
        "repeat bit-identical, N=0 equals plain sampling, {} unconditional passes replay exactly, steps {}..{} unedited",
        calls.len(),
        config.edit_steps,
        config.total_steps
    ))
}

fn lat(v: Vec<f32>) -> Latent {
    let n = v.len();
    Latent::from_vec(LatentShape::new(1, 1, n), v).unwrap()
}

fn compositing() -> Check {
    let z = lat(vec![1.0]);
    let (s0, s2) = (lat(vec![0.0]), lat(vec![2.0]));
    let three = composite_latents(&z, &[(&s0, 0.1), (&s2, 0.1)]).map_err(|e| e.to_string())?;
    ensure(three.data() == [1.0], || format!("1.0 example gave {:?}", three.data()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let z = lat((0..n).map(|_| rng.random_range(-5.0f32..5.0)).collect());
        let s = lat((0..n).map(|_| rng.random_range(-5.0f32..5.0)).collect());
        ensure(composite_latents(&z, &[(&s, 1.0)]).unwrap().bit_eq(&z), || "w=1 is not the identity".into())?;
        ensure(composite_latents(&z, &[(&s, 0.0)]).unwrap().bit_eq(&s), || "w=0 does not return the source".into())?;
        let r = rng.random_range(2..6);
        let srcs: Vec<(Latent, f64)> = (0..r)
            .map(|_| (lat((0..n).map(|_| rng.random_range(-5.0f32..5.0)).collect()), rng.random::<f64>()))
            .collect();
        let fwd: Vec<(&Latent, f64)> = srcs.iter().map(|(l, w)| (l, *w)).collect();
        let mut perm = fwd.clone();
        perm.reverse();
        perm.rotate_left(rng.random_range(0..r));
        ensure(
            composite_latents(&z, &fwd).unwrap().bit_eq(&composite_latents(&z, &perm).unwrap()),
            || "source order changed the composite".into(),
        )?;
    }

    let backend = ToyBackend::new();
    let config = DenoiseConfig {
        seed: 9,
        ..DenoiseConfig::default()
    };
    let left = run_directed_diffusion(&backend, "a bear", &[quadrant()], &config).map_err(|e| e.to_string())?;
    let right = run_directed_diffusion(&backend, "a bird", &[], &config).map_err(|e| e.to_string())?;
    let full = "a bear and a bird";
    let spec = CompositeSpec {
        full_prompt: full.into(),
        sources: vec![
            SourceSpec { run_id: left.run_id.clone(), weight: 1.0 },
            SourceSpec { run_id: right.run_id.clone(), weight: 1.0 },
        ],
        edit_steps: 10,
    };
    let comp = run_scene_compositing(&backend, &spec, &[&left, &right], &config).map_err(|e| e.to_string())?;
    let plain = sample_plain(&backend, full, config.total_steps, config.guidance_scale, config.seed).map_err(|e| e.to_string())?;
    ensure(
        comp.latents.len() == plain.len() && comp.latents.iter().zip(&plain).all(|(a, b)| a.bit_eq(b)),
        || "all-w=1 composite differs from the plain full-prompt run".into(),
    )?;
    Ok("1.0 example, w=1/w=0 identities and 200 permutations exact; all-w=1 run equals plain run".into())
}

fn sorted_bits(v: &[f32]) -> Vec<u32> {
    let mut b: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
    b.sort_unstable();
    b
}

fn sorted_norm(v: &[f32]) -> f64 {
    let mut sq: Vec<f64> = v.iter().map(|&x| f64::from(x) * f64::from(x)).collect();
    sq.sort_by(f64::total_cmp);
    sq.iter().sum::<f64>().sqrt()
}

fn placement() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..12usize), rng.random_range(1..12usize));
        let plane: Vec<f32> = (0..w * h).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let (dx, dy) = (rng.random_range(-(w as i64) + 1..w as i64), rng.random_range(-(h as i64) + 1..h as i64));
        let moved = cyclic_translate(&plane, w, h, dx, dy);
        ensure(sorted_bits(&moved) == sorted_bits(&plane), || "translation is not a permutation".into())?;
        ensure(sorted_norm(&moved).to_bits() == sorted_norm(&plane).to_bits(), || "norm changed".into())?;
    }

    // 4x4 single-channel oracles; mask covers the 2x2 block at x 0..2, y 1..3, moved by dx=2.
    let shape = LatentShape::new(1, 4, 4);
    let zn = Latent::from_vec(shape, (0..16).map(|i| i as f32).collect()).unwrap();
    let zs = Latent::from_vec(shape, (0..16).map(|i| 100.0 + i as f32).collect()).unwrap();
    let mut bits = vec![false; 16];
    for (x, y) in [(0, 1), (1, 1), (0, 2), (1, 2)] {
        bits[y * 4 + x] = true;
    }
    let mask = ObjectMask::from_bits(4, 4, &bits).unwrap();
    let t = Translation::new(2, 0, shape).unwrap();
    #[rustfmt::skip]
    let init_expect: [f32; 16] = [
        0.0, 1.0, 2.0, 3.0,
        106.0, 107.0, 4.0, 5.0,
        110.0, 111.0, 8.0, 9.0,
        12.0, 13.0, 14.0, 15.0,
    ];
    let init = pf_compose_initial(&zn, &zs, &mask, t).map_err(|e| e.to_string())?;
    ensure(init.data() == init_expect, || format!("initial composition {:?}", init.data()))?;
    #[rustfmt::skip]
    let step_expect: [f32; 16] = [
        0.0, 1.0, 2.0, 3.0,
        4.0, 5.0, 104.0, 105.0,
        8.0, 9.0, 108.0, 109.0,
        12.0, 13.0, 14.0, 15.0,
    ];
    let step = pf_step_composite(&zn, &zs, &mask, t).map_err(|e| e.to_string())?;
    ensure(step.data() == step_expect, || format!("step composite {:?}", step.data()))?;

    let backend = ToyBackend::new();
    let lshape = backend.latent_shape();
    for _ in 0..50 {
        let a = Latent::from_vec(lshape, (0..lshape.len()).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap();
        let b = Latent::from_vec(lshape, (0..lshape.len()).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap();
        let bits: Vec<bool> = (0..lshape.pixels()).map(|_| rng.random_bool(0.3)).collect();
        let m = ObjectMask::from_bits(lshape.width, lshape.height, &bits).unwrap();
        let (dx, dy) = (rng.random_range(-7..8), rng.random_range(-7..8));
        let tr = Translation::new(dx, dy, lshape).unwrap();
        let out = pf_step_composite(&a, &b, &m, tr).map_err(|e| e.to_string())?;
        for c in 0..lshape.channels {
            for y in 0..lshape.height {
                for x in 0..lshape.width {
                    let sx = (x as i64 - dx).rem_euclid(lshape.width as i64) as usize;
                    let sy = (y as i64 - dy).rem_euclid(lshape.height as i64) as usize;
                    if !m.is_set(sx, sy) {
                        let i = a.index(c, y, x);
                        ensure(out.data()[i].to_bits() == a.data()[i].to_bits(), || {
                            format!("value changed outside the moved mask at ({x},{y})")
                        })?;
                    }
                }
            }
        }
    }

    let config = DenoiseConfig {
        seed: 4,
        ..DenoiseConfig::default()
    };
    let source = run_directed_diffusion(&backend, PROMPT, &[quadrant()], &config).map_err(|e| e.to_string())?;
    let ident = pf_initialize(&backend, &source, &mask_for(&backend), Translation::new(0, 0, lshape).unwrap(), 10)
        .map_err(|e| e.to_string())?;
    ensure(ident.bit_eq(&source.latents[10]), || "identity initialization differs from z_N".into())?;
    let pf = run_placement_finetune(
        &backend,
        &source,
        &PlacementRequest {
            source_run_id: source.run_id.clone(),
            directive_label: "bear".into(),
            dx: 0,
            dy: 0,
            edit_steps: config.total_steps,
            threshold_fraction: 0.5,
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(pf.image.is_some() && pf.image == source.image, || "zero-translation PF changed the image".into())?;
    Ok("translation norm exact, 4x4 oracles exact, locality exact over 50 cases, zero move reproduces the image".into())
}

fn mask_for(backend: &ToyBackend) -> ObjectMask {
    let s = backend.latent_shape();
    let bits: Vec<bool> = (0..s.pixels()).map(|p| p % 3 == 0).collect();
    ObjectMask::from_bits(s.width, s.height, &bits).unwrap()
}

fn harness() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = RunStore::open(dir.path()).map_err(|e| e.to_string())?;
    let small = DenoiseConfig {
        total_steps: 4,
        edit_steps: 1,
        opt: OptConfig {
            iterations: 1,
            ..OptConfig::default()
        },
        ..DenoiseConfig::default()
    };
    let cells = run_ssk(&toy, BatchMode::Sequential, PROMPT, &[quadrant()], &small, 0, 12, Some(&store))
        .map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = cells.iter().filter_map(|c| c.record()).map(|r| r.config.seed).collect();
    ensure(seeds == (0..12).collect::<Vec<_>>(), || format!("seeds {seeds:?}"))?;
    let stored = store.list().map_err(|e| e.to_string())?;
    ensure(stored.len() == 12, || format!("{} manifests stored", stored.len()))?;
    for (id, want) in stored.iter().zip(0u64..) {
        let m = store.manifest(id).map_err(|e| e.to_string())?;
        ensure(m.config.seed == want, || format!("manifest {id} has seed {}", m.config.seed))?;
    }

    let grid_cfg = DenoiseConfig {
        total_steps: 15,
        ..DenoiseConfig::default()
    };
    let spec = AblationSpec {
        include_baseline: false,
        ..AblationSpec::default()
    };
    let grid = ablation_grid(&toy, BatchMode::Sequential, PROMPT, &[quadrant()], &grid_cfg, &spec, None)
        .map_err(|e| e.to_string())?;
    let keys: Vec<AblationKey> = grid.iter().map(|c| c.key).collect();
    let mut expect = Vec::new();
    for m in [5, 10, 15, 20] {
        for n in [1, 3, 5, 10, 15] {
            expect.push(AblationKey { num_trailing: m, edit_steps: n });
        }
    }
    ensure(keys == expect, || format!("grid layout {keys:?}"))?;
    ensure(grid.iter().all(|c| c.record().is_some_and(|r| r.is_complete())), || "a grid cell failed".into())?;

    let v = [0.5f32, -1.0, 2.0];
    let linear: Vec<Latent> = (0..6).map(|k| lat(v.iter().map(|x| x * k as f32).collect())).collect();
    let norm = (0.25f64 + 1.0 + 4.0).sqrt();
    ensure(latent_step_norms(&linear).map_err(|e| e.to_string())? == vec![norm; 5], || "linear oracle mismatch".into())?;
    let backend = ToyBackend::new();
    let unedited = run_directed_diffusion(
        &backend,
        PROMPT,
        &[],
        &DenoiseConfig {
            edit_steps: 0,
            ..DenoiseConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let trace = gradient_norm_trace(&unedited).map_err(|e| e.to_string())?;
    ensure(trace.len() == 50 && trace.iter().all(|&x| x > 0.0), || "step norms not all positive".into())?;

    let rec = run_directed_diffusion(&backend, PROMPT, &[quadrant()], &DenoiseConfig::default()).map_err(|e| e.to_string())?;
    store.save(&rec).map_err(|e| e.to_string())?;
    let back = store.load(&rec.run_id).map_err(|e| e.to_string())?;
    ensure(back.run_id == rec.run_id && back.same_content(&rec), || "store round trip differs".into())?;
    Ok("SS@12 seeds 0..11 persisted, 4x5 ablation layout, norm oracle exact and positive, store round trip bit-exact".into())
}

fn service_contract() -> Check {
    use axum::body::Body;
    use axum::http::{Request, StatusCode};
    use dd_service::{Job, JobStatus, Service, ServiceConfig};
    use http_body_util::BodyExt;
    use serde_json::{json, Value};
    use tower::ServiceExt;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let service = Service::start(ServiceConfig {
        store_root: dir.path().to_owned(),
        backend: Default::default(),
        cors_origin: None,
    })
    .map_err(|e| e.to_string())?;
    let app = service.router();
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
            let resp = app.clone().oneshot(req).await.unwrap();
            let status = resp.status();
            let bytes = resp.into_body().collect().await.unwrap().to_bytes();
            (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
        }
        let post = |body: Value| {
            Request::post("/jobs/generate")
                .header("content-type", "application/json")
                .body(Body::from(body.to_string()))
                .unwrap()
        };
        let body = |seed: u64, left: f64| {
            json!({
                "prompt": PROMPT,
                "directives": [{ "box": { "left": left, "right": 1.0, "top": 0.0, "bottom": 0.5 }, "token_indices": [BEAR] }],
                "config": { "total_steps": 8, "edit_steps": 2, "seed": seed, "opt": { "iterations": 2 } },
            })
        };

        let (status, v) = call(&app, post(body(0, 1.2))).await;
        ensure(status == StatusCode::UNPROCESSABLE_ENTITY, || format!("left=1.2 gave {status}"))?;
        let fields: Vec<String> = v["fields"]
            .as_array()
            .map(|a| a.iter().filter_map(|f| f["field"].as_str().map(str::to_owned)).collect())
            .unwrap_or_default();
        ensure(fields.iter().any(|f| f.ends_with("box.left")), || format!("fields {fields:?}"))?;
        let (status, v) = call(&app, post(json!({ "directives": [] }))).await;
        ensure(status == StatusCode::UNPROCESSABLE_ENTITY && v["fields"][0]["field"] == "prompt", || {
            format!("missing prompt gave {status} {v}")
        })?;

        let mut handles = Vec::new();
        for seed in 0..20u64 {
            let app = app.clone();
            let req = post(body(seed, 0.5));
            handles.push(tokio::spawn(async move { call(&app, req).await }));
        }
        let mut accepted = Vec::new();
        for h in handles {
            let (status, v) = h.await.map_err(|e| e.to_string())?;
            ensure(status == StatusCode::ACCEPTED, || format!("submission gave {status}"))?;
            accepted.push((v["position"].as_u64().unwrap_or(0), v["job_id"].as_str().unwrap_or("").to_owned()));
        }
        accepted.sort();
        let mut jobs: Vec<Job> = Vec::new();
        for (_, id) in &accepted {
            loop {
                let (_, v) = call(&app, Request::get(format!("/jobs/{id}?wait=5000")).body(Body::empty()).unwrap()).await;
                let job: Job = serde_json::from_value(v).map_err(|e| e.to_string())?;
                if job.status.is_terminal() {
                    jobs.push(job);
                    break;
                }
            }
        }
        for pair in jobs.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            ensure(a.position < b.position && a.finished_seq < b.started_seq, || {
                format!("job {} started before job {} finished", b.position, a.position)
            })?;
        }
        for job in &jobs {
            ensure(job.status == JobStatus::Done, || format!("job {} ended {:?}", job.position, job.status))?;
            let (status, _) = call(&app, Request::get(format!("/runs/{}", job.run_ids[0])).body(Body::empty()).unwrap()).await;
            ensure(status == StatusCode::OK, || "done job's run does not resolve".into())?;
        }
        let (_, stats) = call(&app, Request::get("/queue").body(Body::empty()).unwrap()).await;
        ensure(stats["max_running_observed"] == 1, || format!("queue stats {stats}"))?;
        Ok("422 names box.left and prompt; 20 concurrent jobs ran FIFO, one at a time".to_owned())
    })
}

fn run(name: &str, limit: Option<Duration>, f: fn() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let took = start.elapsed();
    let outcome = match (outcome, limit) {
        (Ok(_), Some(max)) if took > max => Err(format!("took {took:.1?}, limit {max:?}")),
        (o, _) => o,
    };
    match &outcome {
        Ok(d) => println!("PASS  {name} [{took:.1?}]: {d}"),
        Err(e) => println!("FAIL  {name} [{took:.1?}]: {e}"),
    }
    outcome.is_ok()
}

#[test]
fn primary_criteria() {
    let secs = |s| Some(Duration::from_secs(s));
    let results = [
        run("mask oracle equivalence", secs(5), mask_oracles),
        run("gaussian analytic check", None, gaussian_check),
        run("trailing-weight optimization sanity", secs(60), optimization_sanity),
        run("pipeline determinism and stage boundary", secs(30), determinism_and_stage_boundary),
        run("scene compositing", None, compositing),
        run("placement finetuning", None, placement),
        run("harness", None, harness),
        run("service contract", secs(60), service_contract),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}

/// Needs a pretrained checkpoint and GPU runtime.
#[test]
#[ignore]
fn pretrained_smoke() {
    let ok = run("pretrained smoke", None, || {
        let selection = dd_core::BackendSelection {
            backend: dd_core::BackendKind::Pretrained,
            ..Default::default()
        };
        let backend = dd_core::open_backend(&selection).map_err(|e| e.to_string())?;
        let directive = quadrant();
        let config = DenoiseConfig::default();
        let edited = run_directed_diffusion(backend.as_ref(), PROMPT, std::slice::from_ref(&directive), &config)
            .map_err(|e| e.to_string())?;
        let baseline = run_directed_diffusion(backend.as_ref(), PROMPT, &[], &config).map_err(|e| e.to_string())?;
        let mass = |r: &dd_core::RunRecord| -> Result<f64, String> {
            let maps = r.final_attention.as_ref().ok_or("no maps")?;
            attention_mass_metric(maps, &directive).map_err(|e| e.to_string())
        };
        let (me, mb) = (mass(&edited)?, mass(&baseline)?);
        ensure(edited.is_complete() && me > mb, || format!("in-box mass {me:.3} vs baseline {mb:.3}"))?;
        Ok(format!("in-box mass {me:.3} vs baseline {mb:.3}"))
    });
    assert!(ok);
}
