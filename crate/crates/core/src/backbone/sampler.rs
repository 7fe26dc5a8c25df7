//! Deterministic DDIM sampling with classifier-free guidance.

use crate::backbone::condition::ConditionBundle;
use crate::backbone::schedule::NoiseSchedule;
use crate::backbone::unet::Denoiser;
use crate::error::{Error, Result};
use crate::nn::StreamKv;
use crate::num::Real;
use ndarray::Array3;

/// Diffusion state: the latent plus its timestep.
#[derive(Debug, Clone)]
pub struct LatentState<T: Real> {
    pub z: Array3<T>,
    pub t: usize,
}

/// Closed-form clean-latent estimate from a noisy latent and predicted noise:
///
/// `x0 = (z − sqrt(1 − ᾱ_t) · eps) / sqrt(ᾱ_t)`
///
/// using the coefficient index carried by the state.
pub fn predict_x0<T: Real>(
    state: &LatentState<T>,
    eps: &Array3<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<Array3<T>> {
    if state.t < 1 || state.t > schedule.steps() {
        return Err(Error::config(format!(
            "predict_x0 timestep {} outside [1, {}]",
            state.t,
            schedule.steps()
        )));
    }
    if state.z.dim() != eps.dim() {
        return Err(Error::shape("latent and noise shape differ".to_string()));
    }
    let ab = schedule.alpha_bar(state.t);
    let coeff_eps = (T::one() - ab).sqrt();
    let inv_sqrt_ab = T::one() / ab.sqrt();
    Ok((&state.z - &eps.mapv(|e| e * coeff_eps)).mapv(|v| v * inv_sqrt_ab))
}

/// Deterministic DDIM update from timestep `t` to `next_t` given a noise
/// prediction (`η = 0`):
///
/// `z' = sqrt(ᾱ_next) · x0 + sqrt(1 − ᾱ_next) · eps`
pub fn ddim_update<T: Real>(
    z: &Array3<T>,
    eps: &Array3<T>,
    t: usize,
    next_t: usize,
    schedule: &NoiseSchedule<T>,
) -> Result<Array3<T>> {
    if next_t >= t {
        return Err(Error::config(format!("DDIM requires next_t {next_t} < t {t}")));
    }
    let state = LatentState { z: z.clone(), t };
    let x0 = predict_x0(&state, eps, schedule)?;
    let ab_next = schedule.alpha_bar(next_t);
    let c0 = ab_next.sqrt();
    let c1 = (T::one() - ab_next).sqrt();
    Ok(x0.mapv(|v| v * c0) + eps.mapv(|e| e * c1))
}

/// Classifier-free guidance combination:
/// `eps = eps_uncond + scale · (eps_cond − eps_uncond)`.
pub fn cfg_combine<T: Real>(eps_cond: &Array3<T>, eps_uncond: &Array3<T>, scale: T) -> Array3<T> {
    if scale == T::one() {
        return eps_cond.clone();
    }
    let mut out = eps_uncond.clone();
    ndarray::Zip::from(&mut out)
        .and(eps_cond)
        .and(eps_uncond)
        .for_each(|o, &ec, &eu| *o = eu + scale * (ec - eu));
    out
}

/// Guided noise prediction at the state's timestep: the unconditional branch
/// replaces the text stream by a zero matrix.
pub fn predict_eps_guided<T: Real>(
    model: &Denoiser<T>,
    z: &Array3<T>,
    t: usize,
    bundle: &ConditionBundle<T>,
    id_kv: Option<&StreamKv<T>>,
    cfg_scale: T,
) -> Result<Array3<T>> {
    let eps_cond = model.predict_noise(z, t, bundle, id_kv)?;
    if cfg_scale == T::one() {
        return Ok(eps_cond);
    }
    let uncond = bundle.with_zero_text();
    let eps_uncond = model.predict_noise(z, t, &uncond, id_kv)?;
    Ok(cfg_combine(&eps_cond, &eps_uncond, cfg_scale))
}

/// One guided DDIM step: evaluates the model (conditional and, unless
/// `cfg_scale == 1`, unconditional with zeroed text) and applies
/// [`ddim_update`]. The output state carries `next_t`.
pub fn ddim_step<T: Real>(
    state: &LatentState<T>,
    model: &Denoiser<T>,
    bundle: &ConditionBundle<T>,
    id_kv: Option<&StreamKv<T>>,
    cfg_scale: T,
    next_t: usize,
    schedule: &NoiseSchedule<T>,
) -> Result<LatentState<T>> {
    let eps = predict_eps_guided(model, &state.z, state.t, bundle, id_kv, cfg_scale)?;
    let z = ddim_update(&state.z, &eps, state.t, next_t, schedule)?;
    Ok(LatentState { z, t: next_t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    fn schedule() -> NoiseSchedule<f64> {
        NoiseSchedule::from_alphas_bar(vec![0.9, 0.5, 0.2]).unwrap()
    }

    #[test]
    fn predict_x0_alpha_one_returns_latent() {
        // ᾱ_t = 1 exactly: x0 = z regardless of eps
        let sched = NoiseSchedule::from_alphas_bar(vec![1.0 - 1e-300, 0.5]).unwrap();
        let z = arr3(&[[[0.7, -0.3]]]);
        let eps = arr3(&[[[5.0, -2.0]]]);
        let x0 = predict_x0(&LatentState { z: z.clone(), t: 1 }, &eps, &sched).unwrap();
        let diff = (&x0 - &z).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn predict_x0_zero_eps_scales_latent() {
        let sched = schedule();
        let z = arr3(&[[[0.8, -0.4], [0.1, 0.9]]]);
        let eps = Array3::zeros((1, 2, 2));
        let x0 = predict_x0(&LatentState { z: z.clone(), t: 2 }, &eps, &sched).unwrap();
        let expected = z.mapv(|v| v / 0.5f64.sqrt());
        assert_eq!(x0, expected);
    }

    #[test]
    fn predict_x0_matches_elementwise_recomputation() {
        let sched = schedule();
        let z = arr3(&[[[0.37, -0.81], [0.22, 0.64]]]);
        let eps = arr3(&[[[0.5, -0.1], [-0.7, 0.3]]]);
        let x0 = predict_x0(&LatentState { z: z.clone(), t: 2 }, &eps, &sched).unwrap();
        let ab = 0.5f64;
        for (idx, &v) in z.indexed_iter() {
            let expect = (v - (1.0 - ab).sqrt() * eps[idx]) / ab.sqrt();
            assert!((x0[idx] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn predict_x0_rejects_out_of_range_timesteps() {
        let sched = schedule();
        let z = Array3::zeros((1, 1, 1));
        let eps = Array3::zeros((1, 1, 1));
        assert!(predict_x0(&LatentState { z: z.clone(), t: 0 }, &eps, &sched).is_err());
        assert!(predict_x0(&LatentState { z, t: 4 }, &eps, &sched).is_err());
    }

    #[test]
    fn ddim_update_matches_scalar_closed_form() {
        let sched = schedule();
        let z = arr3(&[[[0.42]]]);
        let eps = arr3(&[[[-0.27]]]);
        let out = ddim_update(&z, &eps, 3, 1, &sched).unwrap();
        let (ab_t, ab_n) = (0.2f64, 0.9f64);
        let x0 = (0.42 - (1.0 - ab_t).sqrt() * (-0.27)) / ab_t.sqrt();
        let expected = ab_n.sqrt() * x0 + (1.0 - ab_n).sqrt() * (-0.27);
        assert!((out[[0, 0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn final_step_returns_x0_exactly() {
        // next_t = 0 has ᾱ = 1, so the update reduces to the x0 estimate
        let sched = schedule();
        let z = arr3(&[[[0.42, -0.9]]]);
        let eps = arr3(&[[[-0.27, 0.4]]]);
        let out = ddim_update(&z, &eps, 2, 0, &sched).unwrap();
        let x0 = predict_x0(&LatentState { z, t: 2 }, &eps, &sched).unwrap();
        let diff = (&out - &x0).mapv(f64::abs).sum();
        assert!(diff < 1e-15);
    }

    #[test]
    fn cfg_collapses_at_the_convention_points() {
        let ec = arr3(&[[[2.0, -1.0]]]);
        let eu = arr3(&[[[0.5, 0.5]]]);
        // scale 0: unconditional only
        assert_eq!(cfg_combine(&ec, &eu, 0.0), eu);
        // scale 1: conditional only
        assert_eq!(cfg_combine(&ec, &eu, 1.0), ec);
        // scale 2: linear extrapolation
        let two = cfg_combine(&ec, &eu, 2.0);
        assert_eq!(two[[0, 0, 0]], 0.5 + 2.0 * 1.5);
    }
}
