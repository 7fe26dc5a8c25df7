//! Diffusion noise schedule.
//!
//! Cosine cumulative-alpha schedule with the usual per-step beta clip. The
//! `sigmas` vector holds the per-step guidance noise scale
//! `σ_t = sqrt(1 − ᾱ_{t−1})` (with `ᾱ_0 = 1`), which is zero at the final
//! denoising step.

use crate::error::{Error, Result};
use crate::num::{c, Real};

#[derive(Debug, Clone)]
pub struct NoiseSchedule<T: Real> {
    steps: usize,
    alphas_bar: Vec<T>,
    sigmas: Vec<T>,
}

impl<T: Real> NoiseSchedule<T> {
    /// Cosine schedule over `steps` training timesteps.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("schedule needs at least 2 steps"));
        }
        let s = 0.008;
        let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2);
        let f0 = f(0.0);
        let mut alphas_bar = Vec::with_capacity(steps);
        let mut prev = 1.0f64;
        for t in 1..=steps {
            let beta = (1.0 - (f(t as f64) / f0) / (f(t as f64 - 1.0) / f0)).min(0.999);
            let ab = prev * (1.0 - beta);
            alphas_bar.push(ab);
            prev = ab;
        }
        Self::from_alphas_bar(alphas_bar.into_iter().map(c::<T>).collect())
    }

    /// Build from an explicit `ᾱ` vector, checking the schedule invariants.
    pub fn from_alphas_bar(alphas_bar: Vec<T>) -> Result<Self> {
        if alphas_bar.is_empty() {
            return Err(Error::config("empty schedule"));
        }
        let mut prev = T::one();
        for (i, &ab) in alphas_bar.iter().enumerate() {
            if !(ab > T::zero() && ab <= T::one()) {
                return Err(Error::config(format!(
                    "alpha_bar[{i}] = {ab} outside (0, 1]"
                )));
            }
            if ab >= prev && i > 0 {
                return Err(Error::config(format!(
                    "alpha_bar must be strictly decreasing at index {i}"
                )));
            }
            prev = ab;
        }
        let steps = alphas_bar.len();
        let sigmas = (1..=steps)
            .map(|t| {
                let ab_prev = if t == 1 { T::one() } else { alphas_bar[t - 2] };
                (T::one() - ab_prev).max(T::zero()).sqrt()
            })
            .collect();
        Ok(NoiseSchedule { steps, alphas_bar, sigmas })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `ᾱ_t` for `t ∈ [0, steps]`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alphas_bar[t - 1]
        }
    }

    /// Guidance noise scale `σ_t = sqrt(1 − ᾱ_{t−1})` for `t ∈ [1, steps]`.
    pub fn sigma(&self, t: usize) -> T {
        self.sigmas[t - 1]
    }

    pub fn alphas_bar(&self) -> &[T] {
        &self.alphas_bar
    }

    pub fn sigmas(&self) -> &[T] {
        &self.sigmas
    }

    /// Descending sampling timesteps: `steps_sample` values evenly spread over
    /// `[1, steps]`, ending at the schedule's top step.
    pub fn sample_timesteps(&self, steps_sample: usize) -> Result<Vec<usize>> {
        if steps_sample == 0 || steps_sample > self.steps {
            return Err(Error::config(format!(
                "sample steps {steps_sample} outside [1, {}]",
                self.steps
            )));
        }
        let mut ts: Vec<usize> = (1..=steps_sample)
            .map(|i| i * self.steps / steps_sample)
            .collect();
        ts.dedup();
        if ts.len() != steps_sample {
            return Err(Error::config("sampling timesteps collide"));
        }
        ts.reverse();
        Ok(ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_satisfies_invariants() {
        let sched = NoiseSchedule::<f64>::cosine(1000).unwrap();
        assert_eq!(sched.alphas_bar().len(), 1000);
        assert_eq!(sched.sigmas().len(), 1000);
        let mut prev = 1.0;
        for &ab in sched.alphas_bar() {
            assert!(ab > 0.0 && ab <= 1.0);
            assert!(ab < prev);
            prev = ab;
        }
        assert_eq!(sched.alpha_bar(0), 1.0);
        assert_eq!(sched.sigma(1), 0.0);
        let expected = (1.0 - sched.alpha_bar(999)).sqrt();
        assert_eq!(sched.sigma(1000), expected);
    }

    #[test]
    fn non_monotone_alphas_are_rejected() {
        assert!(NoiseSchedule::<f64>::from_alphas_bar(vec![0.9, 0.95, 0.5]).is_err());
        assert!(NoiseSchedule::<f64>::from_alphas_bar(vec![0.9, 0.5, 0.0]).is_err());
        assert!(NoiseSchedule::<f64>::from_alphas_bar(vec![0.9, 0.5, 0.1]).is_ok());
    }

    #[test]
    fn sample_timesteps_are_even_and_descending() {
        let sched = NoiseSchedule::<f32>::cosine(1000).unwrap();
        let ts = sched.sample_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }
}
