//! Rectified-flow machinery.
//!
//! Along the straight path `x_t = (1 - t) x0 + t ε` the velocity is
//! `ε - x0`. Sampling integrates a learned velocity from `t = 1` (noise) to
//! `t = 0` (data) with a uniform Euler grid.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Logit-normal timestep location.
pub const TIMESTEP_MU: f64 = 1.0;
/// Logit-normal timestep scale.
pub const TIMESTEP_SIGMA: f64 = 1.0;
/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("shape mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("timestep {0} outside [0, 1]")]
    Timestep(f64),
    #[error("ground-truth value {0} is not 0 or 1")]
    NotBinary(f64),
    #[error("non-finite velocity at t={0}")]
    NonFinite(f64),
    #[error("invalid flow config: {0}")]
    Config(String),
}

/// How the configured noise scale enters the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `ε ~ N(0, noise_scale²)`; clean targets unchanged.
    #[default]
    EpsilonStd,
    /// `ε ~ N(0, 1)`; clean targets multiplied by `noise_scale`.
    TargetScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub steps: usize,
    pub guidance_strength: f64,
    pub noise_scale: f64,
    pub noise_mode: NoiseMode,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            guidance_strength: 3.0,
            noise_scale: 1.0,
            noise_mode: NoiseMode::EpsilonStd,
            seed: 0,
        }
    }
}

impl FlowConfig {
    /// Structure flow: unit noise.
    pub fn structure() -> Self {
        Self::default()
    }

    /// Affordance flow during training: noise scale 5.
    pub fn affordance_train() -> Self {
        Self {
            noise_scale: 5.0,
            ..Self::default()
        }
    }

    /// Affordance flow at evaluation: noise scale 0.5.
    pub fn affordance_eval() -> Self {
        Self {
            noise_scale: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.steps == 0 {
            return Err(FlowError::Config("steps must be >= 1".into()));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(FlowError::Config(format!(
                "noise scale {} must be positive",
                self.noise_scale
            )));
        }
        if !self.guidance_strength.is_finite() {
            return Err(FlowError::Config("guidance strength must be finite".into()));
        }
        Ok(())
    }

    /// Standard deviation of ε.
    pub fn epsilon_std(&self) -> f64 {
        match self.noise_mode {
            NoiseMode::EpsilonStd => self.noise_scale,
            NoiseMode::TargetScale => 1.0,
        }
    }

    /// Multiplier applied to clean targets.
    pub fn target_scale(&self) -> f64 {
        match self.noise_mode {
            NoiseMode::EpsilonStd => 1.0,
            NoiseMode::TargetScale => self.noise_scale,
        }
    }

    /// Draw `n` noise values with the configured ε distribution.
    pub fn sample_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let std = self.epsilon_std();
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect()
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<(), FlowError> {
    if a.len() != b.len() {
        return Err(FlowError::Shape(a.len(), b.len()));
    }
    Ok(())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `(1 - t) x0 + t ε`.
pub fn interpolate(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>, FlowError> {
    check_len(x0, eps)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::Timestep(t));
    }
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(a, e)| (1.0 - t) * a + t * e)
        .collect())
}

/// `ε - x0`.
pub fn velocity_target(x0: &[f64], eps: &[f64]) -> Result<Vec<f64>, FlowError> {
    check_len(x0, eps)?;
    Ok(eps.iter().zip(x0).map(|(e, a)| e - a).collect())
}

/// Mean squared error to the velocity target, and its gradient w.r.t. `v_pred`.
pub fn cfm_loss_mse_grad(
    v_pred: &[f64],
    x0: &[f64],
    eps: &[f64],
) -> Result<(f64, Vec<f64>), FlowError> {
    check_len(v_pred, x0)?;
    check_len(x0, eps)?;
    let n = v_pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = v_pred
        .iter()
        .zip(x0.iter().zip(eps))
        .map(|(v, (a, e))| {
            let r = v - (e - a);
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    Ok((loss / n, grad))
}

pub fn cfm_loss_mse(v_pred: &[f64], x0: &[f64], eps: &[f64]) -> Result<f64, FlowError> {
    cfm_loss_mse_grad(v_pred, x0, eps).map(|(l, _)| l)
}

/// Clean-sample estimate implied by a velocity prediction: `ε - v`.
pub fn predicted_clean(v_pred: &[f64], eps: &[f64]) -> Result<Vec<f64>, FlowError> {
    check_len(v_pred, eps)?;
    Ok(eps.iter().zip(v_pred).map(|(e, v)| e - v).collect())
}

/// Binary cross-entropy and Dice terms of the mask loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskLoss {
    pub bce: f64,
    pub dice: f64,
}

impl MaskLoss {
    pub fn total(&self) -> f64 {
        self.bce + self.dice
    }
}

/// Mean BCE plus soft Dice on `σ(logits)`, with the gradient of the total
/// w.r.t. `logits`.
pub fn mask_loss_grad(logits: &[f64], gt: &[f64]) -> Result<(MaskLoss, Vec<f64>), FlowError> {
    check_len(logits, gt)?;
    if let Some(&g) = gt.iter().find(|&&g| g != 0.0 && g != 1.0) {
        return Err(FlowError::NotBinary(g));
    }
    let n = logits.len().max(1) as f64;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let bce = logits
        .iter()
        .zip(gt)
        .map(|(&z, &g)| softplus(z) - g * z)
        .sum::<f64>()
        / n;
    let inter: f64 = probs.iter().zip(gt).map(|(p, g)| p * g).sum();
    let psum: f64 = probs.iter().sum();
    let gsum: f64 = gt.iter().sum();
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = psum + gsum + DICE_SMOOTH;
    let dice = 1.0 - num / den;
    let grad = probs
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let d_bce = (p - g) / n;
            let d_dice_dp = -(2.0 * g * den - num) / (den * den);
            d_bce + d_dice_dp * p * (1.0 - p)
        })
        .collect();
    Ok((MaskLoss { bce, dice }, grad))
}

pub fn mask_loss(logits: &[f64], gt: &[f64]) -> Result<MaskLoss, FlowError> {
    mask_loss_grad(logits, gt).map(|(l, _)| l)
}

/// `σ(z)` with `z ~ N(mu, sigma²)`.
pub fn sample_timestep_with<R: Rng + ?Sized>(rng: &mut R, mu: f64, sigma: f64) -> f64 {
    let z: f64 = Normal::new(mu, sigma).expect("finite sigma").sample(rng);
    // keep strictly inside (0, 1) even for extreme draws
    sigmoid(z).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    sample_timestep_with(rng, TIMESTEP_MU, TIMESTEP_SIGMA)
}

/// `v_uncond + s (v_cond - v_uncond)`.
pub fn cfg_combine(v_cond: &[f64], v_uncond: &[f64], s: f64) -> Result<Vec<f64>, FlowError> {
    check_len(v_cond, v_uncond)?;
    Ok(v_cond
        .iter()
        .zip(v_uncond)
        .map(|(c, u)| u + s * (c - u))
        .collect())
}

/// Euler integration from `t = 1` to `t = 0` starting at `x`.
pub fn euler_integrate<F>(
    mut x: Vec<f64>,
    steps: usize,
    mut velocity_fn: F,
) -> Result<Vec<f64>, FlowError>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    if steps == 0 {
        return Err(FlowError::Config("steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = velocity_fn(&x, t);
        check_len(&v, &x)?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(FlowError::NonFinite(t));
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= dt * vi;
        }
    }
    Ok(x)
}

/// Draw initial noise and integrate `velocity_fn` back to `t = 0`.
pub fn euler_sample<F, R>(
    velocity_fn: F,
    len: usize,
    config: &FlowConfig,
    rng: &mut R,
) -> Result<Vec<f64>, FlowError>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
    R: Rng + ?Sized,
{
    config.validate()?;
    let x = config.sample_noise(len, rng);
    euler_integrate(x, config.steps, velocity_fn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    #[test]
    fn interpolation_endpoints_and_hand_case() {
        let x0 = [1.5, -2.0, 0.25];
        let eps = [0.1, 0.2, -0.7];
        assert_eq!(interpolate(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &eps, 1.0).unwrap(), eps);
        assert_eq!(interpolate(&[2.0], &[-2.0], 0.25).unwrap(), vec![1.0]);
        assert!(matches!(
            interpolate(&x0, &eps[..2], 0.5),
            Err(FlowError::Shape(3, 2))
        ));
        assert!(matches!(
            interpolate(&x0, &eps, 1.5),
            Err(FlowError::Timestep(_))
        ));
    }

    #[test]
    fn velocity_target_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_vec(&mut rng, 9);
        let e = random_vec(&mut rng, 9);
        assert!(velocity_target(&a, &a).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(velocity_target(&[0.0; 9], &e).unwrap(), e);
        let v = velocity_target(&a, &e).unwrap();
        for i in 0..9 {
            assert_eq!(v[i], e[i] - a[i]);
        }
        // the path derivative is the velocity target (finite difference exact up to rounding)
        let (t0, t1) = (0.3, 0.55);
        let x0 = interpolate(&a, &e, t0).unwrap();
        let x1 = interpolate(&a, &e, t1).unwrap();
        for i in 0..9 {
            assert!(((x1[i] - x0[i]) / (t1 - t0) - v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_vec(&mut rng, 7);
        let e = random_vec(&mut rng, 7);
        let target = velocity_target(&a, &e).unwrap();
        assert_eq!(cfm_loss_mse(&target, &a, &e).unwrap(), 0.0);
        assert_eq!(cfm_loss_mse(&[1.0; 4], &[0.0; 4], &[0.0; 4]).unwrap(), 1.0);
        let v = random_vec(&mut rng, 7);
        let mut brute = 0.0;
        for i in 0..7 {
            brute += (v[i] - (e[i] - a[i])).powi(2);
        }
        assert!((cfm_loss_mse(&v, &a, &e).unwrap() - brute / 7.0).abs() < 1e-14);
    }

    #[test]
    fn predicted_clean_inverts_velocity_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let e: Vec<f64> = (0..16).map(|i| (i as f64) * 0.25).collect();
        assert_eq!(
            predicted_clean(&velocity_target(&a, &e).unwrap(), &e).unwrap(),
            a
        );
        assert_eq!(predicted_clean(&[0.0; 16], &e).unwrap(), e);
        let v = random_vec(&mut rng, 5);
        let e = random_vec(&mut rng, 5);
        let p = predicted_clean(&v, &e).unwrap();
        for i in 0..5 {
            assert_eq!(p[i], e[i] - v[i]);
        }
    }

    #[test]
    fn mask_loss_hand_cases() {
        let l = mask_loss(&[0.0; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((l.bce - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l.dice - 0.4).abs() < 1e-12);
        assert!((l.total() - (std::f64::consts::LN_2 + 0.4)).abs() < 1e-12);

        let gt = [1.0, 0.0, 0.0, 1.0, 1.0];
        let logits: Vec<f64> = gt
            .iter()
            .map(|&g| if g == 1.0 { 20.0 } else { -20.0 })
            .collect();
        assert!(mask_loss(&logits, &gt).unwrap().total() < 1e-6);
        let zero = mask_loss(&[0.0; 5], &gt).unwrap();
        assert!((zero.bce - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            mask_loss(&[0.0], &[0.5]),
            Err(FlowError::NotBinary(_))
        ));
    }

    #[test]
    fn loss_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_vec(&mut rng, 6);
        let gt = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let (_, g) = mask_loss_grad(&z, &gt).unwrap();
        let a = random_vec(&mut rng, 6);
        let e = random_vec(&mut rng, 6);
        let (_, gm) = cfm_loss_mse_grad(&z, &a, &e).unwrap();
        let h = 1e-5;
        for i in 0..6 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let fd = (mask_loss(&zp, &gt).unwrap().total() - mask_loss(&zm, &gt).unwrap().total())
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-6),
                "mask {i}: {fd} vs {}",
                g[i]
            );
            let fd = (cfm_loss_mse(&zp, &a, &e).unwrap() - cfm_loss_mse(&zm, &a, &e).unwrap())
                / (2.0 * h);
            assert!((fd - gm[i]).abs() <= 1e-4 * fd.abs().max(gm[i].abs()).max(1e-6));
        }
    }

    #[test]
    fn timestep_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut draws: Vec<f64> = (0..100_000).map(|_| sample_timestep(&mut rng)).collect();
        assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
        draws.sort_by(f64::total_cmp);
        let median = 0.5 * (draws[49_999] + draws[50_000]);
        assert!((median - sigmoid(1.0)).abs() < 0.01, "median {median}");
        assert!((sigmoid(1.0) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn cfg_rule() {
        assert_eq!(
            cfg_combine(&[1.0, 2.0], &[0.5, -1.0], 1.0).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            cfg_combine(&[1.0, 2.0], &[0.5, -1.0], 0.0).unwrap(),
            vec![0.5, -1.0]
        );
        assert_eq!(cfg_combine(&[1.0], &[0.0], 3.0).unwrap(), vec![3.0]);
    }

    #[test]
    fn euler_one_step_recovers_target_with_oracle_velocity() {
        let cfg = FlowConfig {
            steps: 1,
            ..FlowConfig::default()
        };
        let x0 = vec![1.0, -1.0, 0.5, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise = cfg.sample_noise(4, &mut rng.clone());
        let v = velocity_target(&x0, &noise).unwrap();
        let out = euler_sample(|_, _| v.clone(), 4, &cfg, &mut rng).unwrap();
        for i in 0..4 {
            assert!((out[i] - x0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_zero_velocity_returns_noise() {
        let cfg = FlowConfig {
            steps: 7,
            noise_scale: 2.0,
            ..FlowConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = cfg.sample_noise(5, &mut rng.clone());
        assert_eq!(
            euler_sample(|x, _| vec![0.0; x.len()], 5, &cfg, &mut rng).unwrap(),
            noise
        );
    }

    #[test]
    fn euler_linear_field_tracks_fine_integrator() {
        // dx/dt = x integrated backward from t = 1: exact x(0) = x(1) e^{-1}
        let x1 = vec![1.0, -2.0];
        let fine = |n: usize| euler_integrate(x1.clone(), n, |x, _| x.to_vec()).unwrap();
        let reference = fine(100_000);
        for i in 0..2 {
            assert!((reference[i] - x1[i] * (-1f64).exp()).abs() < 1e-5);
        }
        for steps in [5, 10, 20] {
            let coarse = fine(steps);
            let dt = 1.0 / steps as f64;
            for i in 0..2 {
                assert!((coarse[i] - reference[i]).abs() <= dt * x1[i].abs());
                assert!((coarse[i] - x1[i] * (1.0 - dt).powi(steps as i32)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn euler_rejects_non_finite() {
        let cfg = FlowConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let err = euler_sample(|x, _| vec![f64::NAN; x.len()], 3, &cfg, &mut rng);
        assert!(matches!(err, Err(FlowError::NonFinite(_))));
    }

    #[test]
    fn euler_is_deterministic() {
        let cfg = FlowConfig::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            euler_sample(
                |x, t| x.iter().map(|v| v * t - 0.3).collect(),
                11,
                &cfg,
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }
}
