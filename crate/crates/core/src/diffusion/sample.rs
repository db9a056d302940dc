use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::adapter::Conditions;
use super::model::ToyDenoiser;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Timesteps visited by an `steps`-step DDIM run, from noisiest to
/// cleanest ("trailing" spacing, so the first step is always `T − 1`).
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Param(format!("DDIM steps {steps} outside [1, {total}]")));
    }
    let stride = total as f64 / steps as f64;
    Ok((0..steps).map(|i| ((total as f64 - i as f64 * stride).round() as usize).saturating_sub(1)).collect())
}

/// Deterministic (η = 0) DDIM from seeded Gaussian noise. `eps_model` maps
/// `(z_t, t)` to predicted noise. With `clip_x0` the noise estimate is
/// recomputed from the clipped x0 prediction.
pub fn ddim_sample_with<T: Scalar>(
    eps_model: &mut dyn FnMut(&Tensor<T>, usize) -> Tensor<T>,
    shape: &[usize],
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    clip_x0: bool,
) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let z = Tensor::from_vec(shape, (0..n).map(|_| T::c(rng.sample::<f64, _>(StandardNormal))).collect())?;
    ddim_from(eps_model, z, schedule, steps, clip_x0)
}

/// DDIM starting from a given `z_T`.
pub fn ddim_from<T: Scalar>(
    eps_model: &mut dyn FnMut(&Tensor<T>, usize) -> Tensor<T>,
    mut z: Tensor<T>,
    schedule: &NoiseSchedule,
    steps: usize,
    clip_x0: bool,
) -> Result<Tensor<T>> {
    let ts = ddim_timesteps(schedule.len(), steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bars[t];
        let ab_prev = if i + 1 < ts.len() { schedule.alpha_bars[ts[i + 1]] } else { 1.0 };
        let eps = eps_model(&z, t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (zv, &e) in z.data_mut().iter_mut().zip(eps.data()) {
            let (zf, ef) = (zv.f64(), e.f64());
            let mut x0 = (zf - sb * ef) / sa;
            let mut ef = ef;
            if clip_x0 {
                x0 = x0.clamp(-1.0, 1.0);
                ef = (zf - sa * x0) / sb;
            }
            *zv = T::c(pa * x0 + pb * ef);
        }
    }
    Ok(z)
}

/// Samples an image for `cond` with the toy denoiser.
pub fn ddim_sample<T: Scalar>(
    model: &ToyDenoiser<T>,
    cond: &Conditions,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let shape = [3, model.config.height, model.config.width];
    ddim_sample_with(&mut |z, t| model.forward(z, t, cond).0, &shape, schedule, steps, seed, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::q_sample;

    #[test]
    fn trailing_timesteps() {
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![999]);
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[1], ts[49]), (999, 979, 19));
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn oracle_noise_recovers_x0() {
        let s = NoiseSchedule::from_betas(vec![0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        let z = q_sample(&x0, 0, &eps, &s).unwrap();
        let out = ddim_from(&mut |_, _| eps.clone(), z, &s, 1, false).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-5);
    }

    #[test]
    fn one_step_is_x0_prediction() {
        let s = NoiseSchedule::ddpm_default();
        let pred = |z: &Tensor<f64>, _t: usize| z.map(|v| 0.3 * v + 0.1);
        let img = ddim_sample_with(&mut |z, t| pred(z, t), &[2, 3], &s, 1, 7, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ab = s.alpha_bars[999];
        for &v in img.data() {
            let z: f64 = rng.sample(StandardNormal);
            let want = (z - (1.0 - ab).sqrt() * (0.3 * z + 0.1)) / ab.sqrt();
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_image() {
        let s = NoiseSchedule::ddpm_default();
        let mut m = |z: &Tensor<f32>, t: usize| z.map(|v| (v * 0.5).tanh() * (t as f32 / 1000.0));
        let a = ddim_sample_with(&mut m, &[3, 8, 8], &s, 50, 3, true).unwrap();
        let b = ddim_sample_with(&mut m, &[3, 8, 8], &s, 50, 3, true).unwrap();
        assert_eq!(a, b);
    }
}
