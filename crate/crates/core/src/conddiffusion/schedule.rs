use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Linear-beta variance schedule. Timesteps are 1-based; `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    timesteps: usize,
    beta_min: f64,
    beta_max: f64,
    #[serde(skip)]
    beta: Vec<f64>,
    #[serde(skip)]
    alpha_bar: Vec<f64>,
}

/// Linear ramp from `beta_min` to `beta_max` over `timesteps` steps.
pub fn make_schedule(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(Error::InvalidConfig("schedule needs at least 2 timesteps".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidConfig(format!("beta range [{beta_min}, {beta_max}] must satisfy 0 < min <= max < 1")));
    }
    let beta: Vec<f64> = (0..timesteps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (timesteps - 1) as f64)
        .collect();
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { timesteps, beta_min, beta_max, beta, alpha_bar })
}

impl NoiseSchedule {
    /// Linear schedule whose betas are the 1000-step reference range
    /// rescaled by `1000 / timesteps`, so short schedules still end near
    /// pure noise.
    pub fn scaled_linear(timesteps: usize, ref_beta_min: f64, ref_beta_max: f64) -> Result<Self> {
        let k = 1000.0 / timesteps as f64;
        make_schedule(timesteps, ref_beta_min * k, ref_beta_max * k)
    }

    /// Rebuilds the derived tables after deserialization.
    pub fn rebuilt(&self) -> Result<Self> {
        make_schedule(self.timesteps, self.beta_min, self.beta_max)
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::InvalidTimestep { t, max: self.timesteps });
        }
        Ok(())
    }

    /// Decreasing solver timesteps `1 + floor(i T / steps)` for
    /// `i = steps-1 .. 0`, followed by the terminal `0`. `steps` model
    /// evaluations; `steps == T` visits every timestep.
    pub fn uniform_subsequence(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(Error::InvalidConfig("sampling needs at least one step".into()));
        }
        let steps = steps.min(self.timesteps);
        let mut ts: Vec<usize> = (0..steps).rev().map(|i| 1 + i * self.timesteps / steps).collect();
        ts.push(0);
        Ok(ts)
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise<S: Scalar>(x0: &[S], t: usize, eps: &[S], s: &NoiseSchedule) -> Result<Vec<S>> {
    s.check_timestep(t)?;
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch(format!("x0 has {} values, noise {}", x0.len(), eps.len())));
    }
    let ab = s.alpha_bar(t);
    let (a, b) = (S::from_f64_lossy(ab.sqrt()), S::from_f64_lossy((1.0 - ab).sqrt()));
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Clean-image estimate implied by a noise prediction at timestep `t`.
pub fn predict_x0<S: Scalar>(x_t: &[S], t: usize, eps_hat: &[S], s: &NoiseSchedule) -> Vec<S> {
    let ab = s.alpha_bar(t);
    let (a, b) = (S::from_f64_lossy(ab.sqrt()), S::from_f64_lossy((1.0 - ab).sqrt()));
    x_t.iter().zip(eps_hat).map(|(&x, &e)| (x - b * e) / a).collect()
}

/// Deterministic DDIM update from `t` to `t_next < t`.
pub fn ddim_step<S: Scalar>(x_t: &[S], t: usize, t_next: usize, eps_hat: &[S], s: &NoiseSchedule) -> Result<Vec<S>> {
    if t_next >= t {
        return Err(Error::InvalidStep { from: t, to: t_next });
    }
    s.check_timestep(t)?;
    if x_t.len() != eps_hat.len() {
        return Err(Error::ShapeMismatch(format!("x_t has {} values, eps {}", x_t.len(), eps_hat.len())));
    }
    let x0 = predict_x0(x_t, t, eps_hat, s);
    if t_next == 0 {
        return Ok(x0);
    }
    let ab = s.alpha_bar(t_next);
    let (a, b) = (S::from_f64_lossy(ab.sqrt()), S::from_f64_lossy((1.0 - ab).sqrt()));
    Ok(x0.iter().zip(eps_hat).map(|(&x, &e)| a * x + b * e).collect())
}

/// Classifier-free guidance combination `uncond + scale (cond - uncond)`.
pub fn cfg_eps<S: Scalar>(eps_cond: &[S], eps_uncond: &[S], scale: S) -> Vec<S> {
    eps_cond.iter().zip(eps_uncond).map(|(&c, &u)| u + scale * (c - u)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_matches_direct_product() {
        let s = make_schedule(256, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for t in 1..=256 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 255.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(256) - prod).abs() < 1e-15);
        assert!(s.alpha_bar(256) > 0.0);
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
        for t in 2..=256 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) >= s.beta(t - 1));
        }
    }

    #[test]
    fn constant_beta_closed_form() {
        let s = make_schedule(10, 0.05, 0.05).unwrap();
        for t in 1..=10 {
            assert!((s.alpha_bar(t) - 0.95f64.powi(t as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn variance_preserving_identity() {
        let s = NoiseSchedule::scaled_linear(256, 1e-4, 0.02).unwrap();
        for t in 1..=256 {
            let ab = s.alpha_bar(t);
            assert!((ab.sqrt().powi(2) + (1.0 - ab) - 1.0).abs() < 1e-15);
        }
        assert!(s.alpha_bar(256) < 1e-3);
    }

    #[test]
    fn forward_noise_examples() {
        let s = make_schedule(100, 1e-6, 0.02).unwrap();
        let x0 = [0.5, -0.25];
        let x = forward_noise(&x0, 40, &[0.0, 0.0], &s).unwrap();
        let a = s.alpha_bar(40).sqrt();
        assert_eq!(x, vec![a * 0.5, a * -0.25]);
        let x1 = forward_noise(&x0, 1, &[1.0, -1.0], &s).unwrap();
        assert!((x1[0] - 0.5).abs() < 2e-3 && (x1[1] + 0.25).abs() < 2e-3);
        assert!(matches!(forward_noise(&x0, 0, &x0, &s), Err(Error::InvalidTimestep { .. })));
        assert!(matches!(forward_noise(&x0, 101, &x0, &s), Err(Error::InvalidTimestep { .. })));
    }

    #[test]
    fn ddim_to_zero_returns_clean_estimate() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let x = [0.3, -0.7];
        let e = [0.1, 0.2];
        let out = ddim_step(&x, 20, 0, &e, &s).unwrap();
        assert_eq!(out, predict_x0(&x, 20, &e, &s));
        assert!(matches!(ddim_step(&x, 20, 20, &e, &s), Err(Error::InvalidStep { .. })));
    }

    #[test]
    fn cfg_examples() {
        let c = [1.0, 2.0];
        let u = [0.5, -1.0];
        assert_eq!(cfg_eps(&c, &u, 1.0), c.to_vec());
        assert_eq!(cfg_eps(&c, &u, 0.0), u.to_vec());
        assert_eq!(cfg_eps(&c, &u, 2.0), vec![1.5, 5.0]);
    }

    #[test]
    fn subsequence_spans_full_range() {
        let s = make_schedule(256, 1e-4, 0.02).unwrap();
        let ts = s.uniform_subsequence(4).unwrap();
        assert_eq!(ts, vec![193, 129, 65, 1, 0]);
        let all = s.uniform_subsequence(256).unwrap();
        assert_eq!(all.len(), 257);
        assert_eq!(all[0], 256);
        assert!(all.windows(2).all(|w| w[0] == w[1] + 1));
        assert!(s.uniform_subsequence(0).is_err());
    }
}
