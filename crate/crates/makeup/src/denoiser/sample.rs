//! Diffusion loss and DDIM sampling.

use gradtape::nn::SplitMix64;
use gradtape::{Tape, Tensor, Var};

use crate::error::{Error, Result};

use super::schedule::{q_sample, NoiseSchedule};

/// One (timestep, noise, noised sample) draw.
pub struct DiffusionDraw {
    pub t: usize,
    pub noise: Tensor,
    pub x_t: Tensor,
}

/// Deterministic draws for a batch of clean samples: uniform timesteps and
/// standard-normal noise from the seed. Exposed so stub models in tests can
/// replay the exact same stream.
pub fn diffusion_draws(x0s: &[Tensor], schedule: &NoiseSchedule, seed: u64) -> Result<Vec<DiffusionDraw>> {
    let mut rng = SplitMix64::new(seed ^ 0xd1ff_0);
    x0s.iter()
        .map(|x0| {
            let t = rng.below(schedule.timesteps);
            let noise = Tensor::from_fn(&x0.shape().to_vec(), |_| rng.normal());
            let x_t = q_sample(x0, t, &noise, schedule)?;
            Ok(DiffusionDraw { t, noise, x_t })
        })
        .collect()
}

/// Noise-prediction loss: mean over the batch of `||eps - model(x_t, t)||^2 / numel`.
/// `model` is any closure producing the prediction on the tape, which lets
/// the caller wire in arbitrary conditioning (or a stub).
pub fn loss_diffusion(
    tape: &Tape,
    model: &mut dyn FnMut(&Tape, &Tensor, usize) -> Result<Var>,
    x0s: &[Tensor],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Var> {
    if x0s.is_empty() {
        return Err(Error::InvalidInput("empty diffusion batch".into()));
    }
    let draws = diffusion_draws(x0s, schedule, seed)?;
    let mut total: Option<Var> = None;
    for d in &draws {
        let pred = model(tape, &d.x_t, d.t)?;
        if pred.shape() != d.noise.shape() {
            return Err(Error::ShapeMismatch(format!(
                "model output {:?} vs noise {:?}",
                pred.shape(),
                d.noise.shape()
            )));
        }
        let l = pred.mse_to(&d.noise);
        total = Some(match total {
            Some(t) => t.add(&l),
            None => l,
        });
    }
    Ok(total.unwrap().scale(1.0 / x0s.len() as f32))
}

#[derive(Clone, Debug)]
pub struct DdimConfig {
    pub steps: usize,
    pub eta: f32,
    pub seed: u64,
}

impl Default for DdimConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            eta: 0.0,
            seed: 0,
        }
    }
}

/// DDIM sampler. `model(x_t, t) -> eps_hat`. Deterministic for `eta == 0`
/// at a fixed seed; the output is clamped to `[0,1]` at the end only.
pub fn ddim_sample(
    model: &mut dyn FnMut(&Tensor, usize) -> Result<Tensor>,
    shape: &[usize],
    schedule: &NoiseSchedule,
    cfg: &DdimConfig,
) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(Error::InvalidInput("ddim needs at least 1 step".into()));
    }
    if cfg.steps > schedule.timesteps {
        return Err(Error::InvalidInput(format!(
            "ddim steps {} exceed schedule length {}",
            cfg.steps, schedule.timesteps
        )));
    }
    let mut rng = SplitMix64::new(cfg.seed ^ 0xdd1_3);
    let mut x = Tensor::from_fn(shape, |_| rng.normal());

    // Evenly spaced timestep subsequence, high to low.
    let ts: Vec<usize> = (0..cfg.steps)
        .map(|i| (i * schedule.timesteps) / cfg.steps)
        .collect();

    for (i, &t) in ts.iter().enumerate().rev() {
        let eps = model(&x, t)?;
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = if i == 0 {
            1.0
        } else {
            schedule.alpha_bar(ts[i - 1])
        };
        let x0_hat = x.zip_map(&eps, |xt, e| {
            (xt - (1.0 - ab_t).sqrt() * e) / ab_t.sqrt()
        });
        let sigma = cfg.eta
            * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
            * (1.0 - ab_t / ab_prev).sqrt();
        let dir_coef = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = Tensor::from_fn(shape, |j| {
            ab_prev.sqrt() * x0_hat.data()[j] + dir_coef * eps.data()[j]
        });
        if sigma > 0.0 {
            let z = Tensor::from_fn(shape, |_| rng.normal());
            next = next.zip_map(&z, |n, z| n + sigma * z);
        }
        x = next;
    }
    Ok(x.map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::schedule::NoiseSchedule;

    #[test]
    fn perfect_noise_oracle_has_zero_loss() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut rng = SplitMix64::new(2);
        let x0s = vec![Tensor::from_fn(&[3, 8, 8], |_| rng.uniform())];
        // Replays the same draw stream, so it predicts exactly the noise.
        let draws = diffusion_draws(&x0s, &s, 7).unwrap();
        let tape = Tape::new();
        let mut i = 0usize;
        let loss = loss_diffusion(
            &tape,
            &mut |tape, _x_t, _t| {
                let v = tape.constant(draws[i].noise.clone());
                i += 1;
                Ok(v)
            },
            &x0s,
            &s,
            7,
        )
        .unwrap();
        assert_eq!(loss.scalar_value(), 0.0);
    }

    #[test]
    fn zero_predictor_loss_is_about_one() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut rng = SplitMix64::new(3);
        let x0s: Vec<Tensor> = (0..8)
            .map(|_| Tensor::from_fn(&[3, 16, 16], |_| rng.uniform()))
            .collect();
        let tape = Tape::new();
        let loss = loss_diffusion(
            &tape,
            &mut |tape, x_t, _t| Ok(tape.constant(Tensor::zeros(&x_t.shape().to_vec()))),
            &x0s,
            &s,
            11,
        )
        .unwrap();
        // E||eps||^2 per element = 1 for standard normal noise.
        assert!((loss.scalar_value() - 1.0).abs() < 0.1, "{}", loss.scalar_value());
    }

    #[test]
    fn ddim_is_deterministic_at_eta_zero() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut f = |x: &Tensor, _t: usize| Ok(x.map(|v| v * 0.1));
        let cfg = DdimConfig {
            steps: 10,
            eta: 0.0,
            seed: 5,
        };
        let a = ddim_sample(&mut f, &[3, 8, 8], &s, &cfg).unwrap();
        let b = ddim_sample(&mut f, &[3, 8, 8], &s, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ddim_rejects_bad_step_counts() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut f = |x: &Tensor, _t: usize| Ok(x.clone());
        assert!(ddim_sample(&mut f, &[1, 2, 2], &s, &DdimConfig { steps: 0, eta: 0.0, seed: 0 }).is_err());
        assert!(ddim_sample(&mut f, &[1, 2, 2], &s, &DdimConfig { steps: 11, eta: 0.0, seed: 0 }).is_err());
    }
}
