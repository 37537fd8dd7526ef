//! Noise schedules. The default is a fourth-order linear multistep (LMS)
//! sampler over a discrete scaled-linear beta schedule.

use crate::error::{DdError, Result};
use crate::tensor::Latent;

/// Per-step quantities the denoiser needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Position in the reverse process, 0 for the first (noisiest) step.
    pub index: usize,
    /// Training timestep fed to the time embedding.
    pub timestep: f64,
    pub sigma: f64,
    /// Factor applied to the latent before the denoiser, `1 / sqrt(sigma^2 + 1)`.
    pub input_scale: f64,
}

/// Multistep history carried between [`Scheduler::advance`] calls.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchedulerState {
    derivatives: Vec<Latent>,
}

impl SchedulerState {
    /// History seeded from previously recorded noise predictions, oldest first.
    pub fn from_history(derivatives: Vec<Latent>) -> Self {
        Self { derivatives }
    }

    pub fn history_len(&self) -> usize {
        self.derivatives.len()
    }
}

pub trait Scheduler: Send + Sync {
    fn num_steps(&self) -> usize;

    /// Valid for `index <= num_steps()`; the final index describes the clean end point.
    fn step_info(&self, index: usize) -> StepInfo;

    fn init_noise_sigma(&self) -> f64;

    /// Advances `z` by one step given the combined noise estimate.
    fn advance(&self, state: &mut SchedulerState, z: &Latent, noise: &Latent, index: usize) -> Result<Latent>;

    /// What [`Scheduler::advance`] would return, without touching the history.
    fn preview(&self, state: &SchedulerState, z: &Latent, noise: &Latent, index: usize) -> Result<Latent>;

    /// Derivative of the advanced latent with respect to the current noise
    /// estimate (the update is linear in it).
    fn noise_gain(&self, state: &SchedulerState, index: usize) -> f64;

    /// `z + sigma_index * noise`.
    fn add_noise(&self, z: &Latent, noise: &Latent, index: usize) -> Latent;
}

const TRAIN_TIMESTEPS: usize = 1000;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;
const LMS_ORDER: usize = 4;

#[derive(Debug, Clone)]
pub struct LmsScheduler {
    timesteps: Vec<f64>,
    /// `num_steps + 1` entries, the last one zero.
    sigmas: Vec<f64>,
}

impl LmsScheduler {
    pub fn new(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(DdError::validation("total_steps", "must be at least 1"));
        }
        let train_sigmas = train_sigmas();
        let last = (TRAIN_TIMESTEPS - 1) as f64;
        let timesteps: Vec<f64> = (0..num_steps)
            .map(|k| {
                if num_steps == 1 {
                    0.0
                } else {
                    last * (num_steps - 1 - k) as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        let mut sigmas: Vec<f64> = timesteps
            .iter()
            .map(|&t| {
                let lo = t.floor() as usize;
                let hi = (lo + 1).min(TRAIN_TIMESTEPS - 1);
                let frac = t - lo as f64;
                train_sigmas[lo] * (1.0 - frac) + train_sigmas[hi] * frac
            })
            .collect();
        sigmas.push(0.0);
        Ok(Self { timesteps, sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn order_at(&self, index: usize, history: usize) -> usize {
        (index + 1).min(LMS_ORDER).min(history + 1)
    }

    /// Integral over `[sigma_t, sigma_{t+1}]` of the Lagrange basis polynomial
    /// for the derivative `current` steps back.
    fn lms_coefficient(&self, order: usize, t: usize, current: usize) -> f64 {
        // polynomial coefficients, lowest degree first
        let mut poly = vec![1.0f64];
        for k in 0..order {
            if k == current {
                continue;
            }
            let node = self.sigmas[t - k];
            let denom = self.sigmas[t - current] - node;
            let mut next = vec![0.0; poly.len() + 1];
            for (d, &c) in poly.iter().enumerate() {
                next[d + 1] += c / denom;
                next[d] -= c * node / denom;
            }
            poly = next;
        }
        let antiderivative = |x: f64| {
            poly.iter()
                .enumerate()
                .map(|(d, &c)| c * x.powi(d as i32 + 1) / (d as f64 + 1.0))
                .sum::<f64>()
        };
        antiderivative(self.sigmas[t + 1]) - antiderivative(self.sigmas[t])
    }

    fn combine(&self, history: &[Latent], z: &Latent, noise: &Latent, index: usize) -> Result<Latent> {
        z.ensure_same_shape(noise, "scheduler step")?;
        if index >= self.num_steps() {
            return Err(DdError::validation(
                "step_index",
                format!("{index} out of range for {} steps", self.num_steps()),
            ));
        }
        let order = self.order_at(index, history.len());
        let coeffs: Vec<f64> = (0..order).map(|k| self.lms_coefficient(order, index, k)).collect();
        // derivative k steps back: k = 0 is the current noise estimate
        let derivs: Vec<&Latent> = std::iter::once(noise)
            .chain(history.iter().rev())
            .take(order)
            .collect();
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let mut acc = f64::from(*v);
            for (c, d) in coeffs.iter().zip(&derivs) {
                acc += c * f64::from(d.data()[i]);
            }
            *v = acc as f32;
        }
        Ok(out)
    }
}

fn train_sigmas() -> Vec<f64> {
    let (s0, s1) = (BETA_START.sqrt(), BETA_END.sqrt());
    let mut alpha_bar = 1.0;
    (0..TRAIN_TIMESTEPS)
        .map(|i| {
            let b = s0 + (s1 - s0) * i as f64 / (TRAIN_TIMESTEPS - 1) as f64;
            alpha_bar *= 1.0 - b * b;
            ((1.0 - alpha_bar) / alpha_bar).sqrt()
        })
        .collect()
}

impl Scheduler for LmsScheduler {
    fn num_steps(&self) -> usize {
        self.timesteps.len()
    }

    fn step_info(&self, index: usize) -> StepInfo {
        assert!(index <= self.num_steps(), "step index {index} out of range");
        let sigma = self.sigmas[index];
        StepInfo {
            index,
            timestep: self.timesteps.get(index).copied().unwrap_or(0.0),
            sigma,
            input_scale: 1.0 / (sigma * sigma + 1.0).sqrt(),
        }
    }

    fn init_noise_sigma(&self) -> f64 {
        self.sigmas.iter().copied().fold(0.0, f64::max)
    }

    fn advance(&self, state: &mut SchedulerState, z: &Latent, noise: &Latent, index: usize) -> Result<Latent> {
        let out = self.combine(&state.derivatives, z, noise, index)?;
        state.derivatives.push(noise.clone());
        if state.derivatives.len() > LMS_ORDER {
            state.derivatives.remove(0);
        }
        Ok(out)
    }

    fn preview(&self, state: &SchedulerState, z: &Latent, noise: &Latent, index: usize) -> Result<Latent> {
        self.combine(&state.derivatives, z, noise, index)
    }

    fn noise_gain(&self, state: &SchedulerState, index: usize) -> f64 {
        let order = self.order_at(index, state.derivatives.len());
        self.lms_coefficient(order, index, 0)
    }

    fn add_noise(&self, z: &Latent, noise: &Latent, index: usize) -> Latent {
        let sigma = self.sigmas[index];
        z.zip_map(noise, |a, b| (f64::from(a) + sigma * f64::from(b)) as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LatentShape;

    #[test]
    fn sigmas_decrease_to_zero() {
        let s = LmsScheduler::new(50).unwrap();
        assert_eq!(s.sigmas().len(), 51);
        assert_eq!(*s.sigmas().last().unwrap(), 0.0);
        assert!(s.sigmas().windows(2).all(|w| w[0] > w[1]));
        // scaled-linear schedule endpoints
        assert!((s.sigmas()[0] - 14.6146).abs() < 1e-3, "{}", s.sigmas()[0]);
        assert!((s.init_noise_sigma() - s.sigmas()[0]).abs() < 1e-12);
    }

    #[test]
    fn first_order_step_is_euler() {
        let s = LmsScheduler::new(10).unwrap();
        let c = s.lms_coefficient(1, 0, 0);
        assert!((c - (s.sigmas()[1] - s.sigmas()[0])).abs() < 1e-12);
    }

    #[test]
    fn coefficients_integrate_constants_exactly() {
        // Lagrange bases sum to one, so coefficients sum to the interval length.
        let s = LmsScheduler::new(20).unwrap();
        for t in 3..20 {
            let sum: f64 = (0..4).map(|k| s.lms_coefficient(4, t, k)).sum();
            let len = s.sigmas()[t + 1] - s.sigmas()[t];
            assert!((sum - len).abs() < 1e-9 * len.abs().max(1.0));
        }
    }

    #[test]
    fn preview_matches_advance_and_gain_is_linear() {
        let shape = LatentShape::new(1, 2, 2);
        let s = LmsScheduler::new(6).unwrap();
        let mut state = SchedulerState::default();
        let mut z = Latent::from_vec(shape, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        for k in 0..6 {
            let n = Latent::from_vec(shape, vec![0.1 * k as f32, 0.2, -0.3, 0.05]).unwrap();
            let pre = s.preview(&state, &z, &n, k).unwrap();
            let bumped = n.map(|v| v + 1.0);
            let pre2 = s.preview(&state, &z, &bumped, k).unwrap();
            let gain = s.noise_gain(&state, k);
            for (a, b) in pre.data().iter().zip(pre2.data()) {
                assert!(((b - a) as f64 - gain).abs() < 1e-4);
            }
            let adv = s.advance(&mut state, &z, &n, k).unwrap();
            assert!(adv.bit_eq(&pre));
            z = adv;
        }
    }
}
