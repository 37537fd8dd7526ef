//! Black-box checks every backend must pass.

use super::{AttentionInterceptor, Backend, LayerInfo, Passthrough};
use crate::attention::LayerAttention;
use crate::error::{DdError, Result};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const PROMPT: &str = "a bear watching a flying bird";
const ROW_TOLERANCE: f64 = 1e-4;

struct ZeroTrailing {
    prompt_len: usize,
    calls: Vec<usize>,
}

impl AttentionInterceptor for ZeroTrailing {
    fn intercept(&mut self, layer: &LayerInfo, maps: &LayerAttention) -> Result<Option<LayerAttention>> {
        self.calls.push(layer.id);
        let mut out = maps.clone();
        for h in 0..maps.heads() {
            for p in 0..maps.positions() {
                for s in self.prompt_len..crate::attention::TOKEN_SLOTS {
                    out.set(h, p, s, 0.0);
                }
            }
        }
        Ok(Some(out))
    }
}

struct WrongShape;

impl AttentionInterceptor for WrongShape {
    fn intercept(&mut self, _: &LayerInfo, maps: &LayerAttention) -> Result<Option<LayerAttention>> {
        let side = maps.side() + 1;
        let data = vec![0.0; maps.heads() * side * side * crate::attention::TOKEN_SLOTS];
        Ok(Some(LayerAttention::new(maps.layer_id(), side, maps.heads(), data)?))
    }
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> CheckOutcome {
    CheckOutcome {
        name,
        passed,
        detail: detail.into(),
    }
}

/// Runs the battery. Errors from the backend itself are reported as failures
/// of the check that triggered them.
pub fn run_battery(backend: &dyn Backend) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    match battery(backend, &mut out) {
        Ok(()) => {}
        Err(e) => out.push(check("backend error", false, e.to_string())),
    }
    out
}

fn battery(backend: &dyn Backend, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let cond = backend.encode_text(PROMPT)?;
    let again = backend.encode_text(PROMPT)?;
    out.push(check("encode_text deterministic", cond == again, ""));
    out.push(check(
        "prompt length within slots",
        cond.prompt_len <= crate::attention::TOKEN_SLOTS,
        format!("|P| = {}", cond.prompt_len),
    ));
    let uncond = backend.encode_text("")?;

    let z0 = backend.sample_initial_latent(0);
    out.push(check(
        "initial latent deterministic",
        z0.bit_eq(&backend.sample_initial_latent(0)),
        "",
    ));
    out.push(check(
        "initial latent varies with seed",
        !z0.bit_eq(&backend.sample_initial_latent(1)),
        "",
    ));
    out.push(check(
        "initial latent shape",
        z0.shape() == backend.latent_shape(),
        z0.shape().to_string(),
    ));

    let sched = backend.scheduler(4)?;
    let info = sched.step_info(1);
    let z = z0.scale(sched.step_info(1).sigma as f32);

    let plain = backend.denoise_step(&z, &cond, &uncond, &info, None)?;
    let repeat = backend.denoise_step(&z, &cond, &uncond, &info, None)?;
    out.push(check(
        "denoise_step deterministic",
        plain.noise_cond.bit_eq(&repeat.noise_cond) && plain.noise_uncond.bit_eq(&repeat.noise_uncond),
        "",
    ));

    let manifest = backend.layer_manifest();
    let layouts_ok = plain.maps.layers().len() == manifest.len()
        && plain
            .maps
            .layers()
            .iter()
            .zip(manifest)
            .all(|(l, m)| l.layer_id() == m.id && l.side() == m.resolution && l.heads() == m.heads);
    out.push(check("captured maps follow the layer manifest", layouts_ok, ""));

    let worst = plain
        .maps
        .layers()
        .iter()
        .map(LayerAttention::max_row_sum_error)
        .fold(0.0, f64::max);
    out.push(check(
        "captured maps row-stochastic",
        worst <= ROW_TOLERANCE,
        format!("max row-sum error {worst:.3e}"),
    ));

    let mut pass = Passthrough;
    let ident = backend.denoise_step(&z, &cond, &uncond, &info, Some(&mut pass))?;
    out.push(check(
        "identity interceptor is transparent",
        ident.noise_cond.bit_eq(&plain.noise_cond) && ident.noise_uncond.bit_eq(&plain.noise_uncond),
        "",
    ));

    let mut zero = ZeroTrailing {
        prompt_len: cond.prompt_len,
        calls: Vec::new(),
    };
    let zeroed = backend.denoise_step(&z, &cond, &uncond, &info, Some(&mut zero))?;
    let ids: Vec<usize> = manifest.iter().map(|l| l.id).collect();
    out.push(check(
        "interceptor runs once per cross-attention layer",
        zero.calls == ids,
        format!("{:?}", zero.calls),
    ));
    out.push(check(
        "substituted maps change the conditional noise",
        !zeroed.noise_cond.bit_eq(&plain.noise_cond),
        "",
    ));
    out.push(check(
        "unconditional pass is never intercepted",
        zeroed.noise_uncond.bit_eq(&plain.noise_uncond),
        "",
    ));

    let mut wrong = WrongShape;
    let rejected = matches!(
        backend.denoise_cond(&z, &cond, &info, Some(&mut wrong)),
        Err(DdError::Contract(_))
    );
    out.push(check("wrong-shape substitution is a contract error", rejected, ""));

    let img = backend.decode(&z0)?;
    let img2 = backend.decode(&z0)?;
    let factor = backend.vae_scale_factor();
    let shape = backend.latent_shape();
    out.push(check("decode deterministic", img == img2, ""));
    out.push(check(
        "decoded size follows the scale factor",
        img.width as usize == shape.width * factor && img.height as usize == shape.height * factor,
        format!("{}x{}", img.width, img.height),
    ));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::ToyBackend;

    #[test]
    fn toy_passes_battery() {
        let results = run_battery(&ToyBackend::new());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert!(results.len() >= 15);
    }
}
