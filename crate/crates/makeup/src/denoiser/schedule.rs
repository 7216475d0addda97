//! Linear-beta noise schedule and the forward noising process.

use gradtape::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub betas: Vec<f32>,
    pub alphas: Vec<f32>,
    pub alpha_bars: Vec<f32>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f32, beta_end: f32) -> Result<NoiseSchedule> {
        if timesteps == 0 {
            return Err(Error::InvalidInput("timesteps must be positive".into()));
        }
        let betas: Vec<f32> = (0..timesteps)
            .map(|t| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f32 / (timesteps - 1) as f32
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f32>) -> Result<NoiseSchedule> {
        if betas.iter().any(|&b| b <= 0.0 || b >= 1.0) {
            return Err(Error::InvalidInput("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f32> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0f64;
        for &a in &alphas {
            prod *= a as f64;
            alpha_bars.push(prod as f32);
        }
        debug_assert!(alpha_bars.windows(2).all(|w| w[1] < w[0]));
        Ok(NoiseSchedule {
            timesteps: betas.len(),
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bars[t]
    }
}

/// Forward noising: `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t >= schedule.timesteps {
        return Err(Error::InvalidInput(format!(
            "timestep {t} out of range [0, {})",
            schedule.timesteps
        )));
    }
    if x0.shape() != noise.shape() {
        return Err(Error::ShapeMismatch("x0 vs noise".into()));
    }
    Ok(q_sample_with_abar(x0, schedule.alpha_bar(t), noise))
}

pub fn q_sample_with_abar(x0: &Tensor, alpha_bar: f32, noise: &Tensor) -> Tensor {
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    x0.zip_map(noise, |x, n| sa * x + sn * n)
}

/// Ideal single-step inversion given the true noise; recovers `x0` exactly.
pub fn predict_x0(x_t: &Tensor, noise: &Tensor, alpha_bar: f32) -> Tensor {
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    x_t.zip_map(noise, |x, n| (x - sn * n) / sa)
}
