use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Linear-β DDPM schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Param(format!("bad schedule T={steps}, β=[{beta_start}, {beta_end}]")));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_end]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    /// T = 1000, β from 1e-4 to 0.02.
    pub fn ddpm_default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Param(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t])
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·ε`.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    let ab = schedule.alpha_bar(t)?;
    if x0.shape() != eps.shape() {
        return Err(crate::error::dim_err("q_sample", x0.shape(), eps.shape()));
    }
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::from_vec(x0.shape(), data)
}

/// ROI side for a feature map of side `r_feat`: `round(6·log2 R − 11)`, or
/// 7 at every scale in single-scale mode.
pub fn roi_size(r_feat: usize, single_scale: bool) -> Result<usize> {
    if r_feat < 4 {
        return Err(Error::Param(format!("feature side {r_feat} below 4")));
    }
    if single_scale {
        return Ok(7);
    }
    let r = (6.0 * (r_feat as f64).log2() - 11.0).round();
    Ok(r.max(1.0) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roi_sizes_follow_the_log_rule() {
        let got: Vec<usize> = [64, 32, 16, 8].iter().map(|&r| roi_size(r, false).unwrap()).collect();
        assert_eq!(got, vec![25, 19, 13, 7]);
        assert_eq!(roi_size(4, false).unwrap(), 1);
        assert_eq!(roi_size(64, true).unwrap(), 7);
        assert!(roi_size(3, false).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::ddpm_default();
        assert_eq!(s.len(), 1000);
        for t in 1..1000 {
            assert!(s.betas[t] > s.betas[t - 1]);
            assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
        }
        assert!(s.betas.iter().all(|&b| 0.0 < b && b < 1.0));
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::ddpm_default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        let z0 = q_sample(&x0, 0, &eps, &s).unwrap();
        assert!(z0.max_abs_diff(&x0) < 0.05);
        let zero = Tensor::zeros(&[3, 4, 4]);
        let z = q_sample(&x0, 500, &zero, &s).unwrap();
        let want = x0.map(|v| v * s.alpha_bars[500].sqrt());
        assert_eq!(z, want);
        let z = q_sample(&x0, 321, &eps, &s).unwrap();
        let ab: f64 = (0..=321).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        for i in 0..x0.numel() {
            let want = ab.sqrt() * x0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
            assert_eq!(z.data()[i], want);
        }
        assert!(q_sample(&x0, 1000, &eps, &s).is_err());
    }
}
