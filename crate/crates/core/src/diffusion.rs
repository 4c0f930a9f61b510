//! Closed-form forward diffusion and DDIM reverse-step arithmetic.
//!
//! Timestamps are integers in `0..=T`. Index 0 is the clean sample, where
//! `alpha_bar[0] = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Negative residual variance inside the DDIM square root is clamped to zero
/// up to this magnitude; beyond it the schedule is rejected.
pub const SQRT_CLAMP_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of diffusion timestamps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.steps() {
            return Err(Error::Range(format!("timestamp {t} outside {lo}..={}", self.steps())));
        }
        Ok(())
    }

    /// Builds a schedule from explicit betas (each in `(0, 1)`).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one timestamp".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }
}

/// Builds a `T`-step schedule.
///
/// `Linear` spaces beta evenly over `[beta_min, beta_max]`. `Cosine` uses the
/// squared-cosine `alpha_bar` curve (offset 0.008) and clamps each beta into
/// `[beta_min, beta_max]`.
pub fn build_schedule(steps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )));
    }
    let beta = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            const S: f64 = 0.008;
            let f = |t: f64| (((t / steps as f64) + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (0..steps)
                .map(|i| {
                    let b = 1.0 - f((i + 1) as f64) / f(i as f64);
                    b.clamp(beta_min, beta_max)
                })
                .collect()
        }
    };
    NoiseSchedule::from_betas(beta)
}

/// Gaussian noise tagged with the seed that regenerates it.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSample {
    pub epsilon: Tensor,
    pub seed: u64,
}

impl NoiseSample {
    pub fn generate(shape: &[usize], seed: u64) -> Self {
        Self { epsilon: rng::gaussian_tensor(shape, seed), seed }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { epsilon: Tensor::zeros(shape), seed: 0 }
    }
}

/// `sqrt(alpha_bar_t)·y0 + eps·sqrt(1 − alpha_bar_t)`.
pub fn forward_diffuse(y0: &Tensor, t: usize, sched: &NoiseSchedule, noise: &NoiseSample) -> Result<Tensor> {
    sched.check_t(t, false)?;
    if noise.epsilon.shape() != y0.shape() {
        return shape_err(format!("noise {:?} vs pose {:?}", noise.epsilon.shape(), y0.shape()));
    }
    let ab = sched.alpha_bar(t);
    let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
    y0.zip_map(&noise.epsilon, |y, e| s * y + e * r)
}

/// Noise implied by a noisy sample and a clean estimate.
pub fn ddim_epsilon(yt: &Tensor, y0_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t, true)?;
    let ab = sched.alpha_bar(t);
    if ab >= 1.0 {
        return Err(Error::DegenerateTimestamp { t });
    }
    let (s, r) = (ab.sqrt(), (1.0 - ab).sqrt());
    yt.zip_map(y0_hat, |y, y0| (y - s * y0) / r)
}

/// DDIM stochasticity for the jump `t → t_prev`.
pub fn ddim_sigma(t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_t(t, false)?;
    if t_prev >= t {
        return Err(Error::Range(format!("t_prev {t_prev} must be below t {t}")));
    }
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    if ab >= 1.0 {
        return Err(Error::DegenerateTimestamp { t });
    }
    let first = ((1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt();
    let second = (1.0 - ab / ab_prev).max(0.0).sqrt();
    Ok(first * second)
}

/// One DDIM move from `yt` at `t` to `t_prev`, given the clean estimate.
/// With `deterministic`, sigma is zero and `noise` is ignored.
pub fn ddim_step(
    yt: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    noise: &NoiseSample,
    deterministic: bool,
) -> Result<Tensor> {
    if yt.shape() != y0_hat.shape() {
        return shape_err(format!("noisy {:?} vs estimate {:?}", yt.shape(), y0_hat.shape()));
    }
    let sigma = if deterministic { 0.0 } else { ddim_sigma(t, t_prev, sched)? };
    let eps_t = ddim_epsilon(yt, y0_hat, t, sched)?;
    let ab_prev = sched.alpha_bar(t_prev);
    let mut resid = 1.0 - ab_prev - sigma * sigma;
    if resid < 0.0 {
        if resid < -SQRT_CLAMP_TOL {
            return Err(Error::ScheduleInconsistency { t, t_prev, value: resid });
        }
        resid = 0.0;
    }
    let (s, r) = (ab_prev.sqrt(), resid.sqrt());
    let mut out = y0_hat.zip_map(&eps_t, |y0, e| s * y0 + e * r)?;
    if sigma > 0.0 {
        if noise.epsilon.shape() != yt.shape() {
            return shape_err("step noise shape differs from pose shape");
        }
        for (o, e) in out.data_mut().iter_mut().zip(noise.epsilon.data()) {
            *o += sigma * e;
        }
    }
    Ok(out)
}

/// `round(T·(1 − m/M))`. Index 0 maps to `T`, the starting point of the
/// reverse loop, and `m = M` maps to 0.
pub fn timestamp_for_iteration(m: usize, total: usize, steps: usize) -> usize {
    debug_assert!(total >= 1 && m <= total);
    (steps as f64 * (1.0 - m as f64 / total as f64)).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(t: usize, b: f64) -> NoiseSchedule {
        build_schedule(t, ScheduleKind::Linear, b, b).unwrap()
    }

    /// Schedule with prescribed alpha_bar values (index 0 is implicit).
    fn with_alpha_bars(abs: &[f64]) -> NoiseSchedule {
        let mut prev = 1.0;
        let betas = abs
            .iter()
            .map(|a| {
                let b = 1.0 - a / prev;
                prev = *a;
                b
            })
            .collect();
        NoiseSchedule::from_betas(betas).unwrap()
    }

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn single_and_two_step_products() {
        let s = lin(1, 0.1);
        assert_eq!(s.alpha_bars(), &[1.0, 0.9]);
        let s = lin(2, 0.1);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(build_schedule(0, ScheduleKind::Linear, 0.1, 0.2).is_err());
        assert!(build_schedule(10, ScheduleKind::Linear, 0.0, 0.2).is_err());
        assert!(build_schedule(10, ScheduleKind::Linear, 0.3, 0.2).is_err());
        assert!(build_schedule(10, ScheduleKind::Cosine, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedules_are_strictly_decreasing() {
        for (kind, beta_max) in [(ScheduleKind::Linear, 0.02), (ScheduleKind::Cosine, 0.999)] {
            let s = build_schedule(1000, kind, 1e-4, beta_max).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            for t in 1..=1000 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.alpha_bar(t) > 0.0);
                assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_scalar_example() {
        let s = with_alpha_bars(&[0.25]);
        let out = forward_diffuse(&scalar(2.0), 1, &s, &NoiseSample { epsilon: scalar(1.0), seed: 0 }).unwrap();
        assert!((out.item() - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((out.item() - 1.8660).abs() < 1e-4);
        let zero = forward_diffuse(&scalar(2.0), 1, &s, &NoiseSample::zeros(&[1])).unwrap();
        assert!((zero.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forward_near_identity_schedule() {
        let s = lin(3, 1e-300);
        let y0 = rng::gaussian_tensor(&[2, 3, 3], 4);
        let out = forward_diffuse(&y0, 3, &s, &NoiseSample::generate(&[2, 3, 3], 5)).unwrap();
        assert!(out.max_abs_diff(&y0) < 1e-100);
    }

    #[test]
    fn forward_errors() {
        let s = lin(3, 0.1);
        let y0 = Tensor::zeros(&[2, 2, 3]);
        assert!(matches!(forward_diffuse(&y0, 0, &s, &NoiseSample::zeros(&[2, 2, 3])), Err(Error::Range(_))));
        assert!(matches!(forward_diffuse(&y0, 4, &s, &NoiseSample::zeros(&[2, 2, 3])), Err(Error::Range(_))));
        assert!(matches!(forward_diffuse(&y0, 1, &s, &NoiseSample::zeros(&[2, 2, 2])), Err(Error::Shape(_))));
    }

    #[test]
    fn epsilon_examples() {
        let s = with_alpha_bars(&[0.25]);
        let e = ddim_epsilon(&scalar(0.5 * 2.0), &scalar(2.0), 1, &s).unwrap();
        assert_eq!(e.item(), 0.0);
        let e = ddim_epsilon(&scalar(1.0 + 0.75f64.sqrt()), &scalar(2.0), 1, &s).unwrap();
        assert!((e.item() - 1.0).abs() < 1e-12);
        assert!(matches!(ddim_epsilon(&scalar(1.0), &scalar(1.0), 0, &s), Err(Error::DegenerateTimestamp { t: 0 })));
    }

    #[test]
    fn sigma_examples() {
        let s = with_alpha_bars(&[0.5, 0.25]);
        assert_eq!(ddim_sigma(2, 0, &s).unwrap(), 0.0);
        let expected = (0.5f64 / 0.75).sqrt() * 0.5f64.sqrt();
        assert!((ddim_sigma(2, 1, &s).unwrap() - expected).abs() < 1e-15);
        assert!((ddim_sigma(2, 1, &s).unwrap() - 0.5774).abs() < 1e-4);
        assert!(ddim_sigma(1, 1, &s).is_err());
    }

    #[test]
    fn sigma_zero_for_equal_alpha_bars() {
        // a valid schedule cannot repeat alpha_bar; approach the limit instead
        let s = with_alpha_bars(&[0.5, 0.5 - 1e-14]);
        assert!(ddim_sigma(2, 1, &s).unwrap() < 1e-6);
    }

    #[test]
    fn step_examples() {
        let s = with_alpha_bars(&[0.5, 0.25]);
        // eps_t = 0: yt = sqrt(ab_t)·y0
        let y0 = scalar(1.3);
        let yt = scalar(0.5 * 1.3);
        let out = ddim_step(&yt, &y0, 2, 1, &s, &NoiseSample::zeros(&[1]), true).unwrap();
        assert!((out.item() - 0.5f64.sqrt() * 1.3).abs() < 1e-12);

        // stochastic step with zero noise draw: hand evaluation
        let yt = scalar(0.7);
        let y0 = scalar(-0.4);
        let eps_t = (0.7 - 0.5 * -0.4) / 0.75f64.sqrt();
        let sigma = (0.5f64 / 0.75).sqrt() * 0.5f64.sqrt();
        let expected = 0.5f64.sqrt() * -0.4 + eps_t * (1.0 - 0.5 - sigma * sigma).sqrt();
        let out = ddim_step(&yt, &y0, 2, 1, &s, &NoiseSample::zeros(&[1]), false).unwrap();
        assert!((out.item() - expected).abs() < 1e-10);

        // step to t_prev = 0 lands on the estimate
        let out = ddim_step(&yt, &y0, 2, 0, &s, &NoiseSample::generate(&[1], 3), false).unwrap();
        assert!((out.item() - -0.4).abs() < 1e-15);
    }

    #[test]
    fn iteration_timestamps() {
        assert_eq!(timestamp_for_iteration(10, 10, 1000), 0);
        assert_eq!(timestamp_for_iteration(1, 10, 1000), 900);
        assert_eq!(timestamp_for_iteration(1, 1, 1000), 0);
        assert_eq!(timestamp_for_iteration(0, 10, 1000), 1000);
        assert_eq!(timestamp_for_iteration(1, 3, 10), 7);
    }
}
