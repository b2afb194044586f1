//! Noise schedules, the closed-form forward process and reverse samplers.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `ᾱ_0 ≡ 1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::{ImageTensor, TensorError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidRange(String),
    #[error("timestep {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("sampling step count {steps} outside 1..={max}")]
    StepCountInvalid { steps: usize, max: usize },
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("noise predictor failed: {0}")]
    Predictor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!("unknown schedule kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Markovian updates with fresh noise `σ_t·z`.
    Ancestral,
    /// Deterministic non-Markovian updates over a strided step subset.
    #[default]
    Implicit,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Ancestral => "ancestral",
            SamplingMode::Implicit => "implicit",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ancestral" => Ok(Self::Ancestral),
            "implicit" => Ok(Self::Implicit),
            other => Err(format!("unknown sampling mode {other:?}")),
        }
    }
}

/// Parameters that fully determine a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn build<T: Scalar>(&self) -> Result<NoiseSchedule<T>, DiffusionError> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// `β_t`, `α_t = 1 − β_t`, `ᾱ_t = Π α_i` and `σ_t = √β_t` for `t = 1..=T`.
///
/// The arrays are computed in `f64` and then converted, so the same spec
/// always rebuilds bit-identical values.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    spec: ScheduleSpec,
    beta: Vec<T>,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
    sigma: Vec<T>,
    alpha_bar_f64: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

pub fn make_schedule<T: Scalar>(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule<T>, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidRange("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let u = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(COSINE_MAX_BETA))
                .collect()
        }
    };
    let mut alpha_bar_f64 = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &b in &betas {
        acc *= 1.0 - b;
        alpha_bar_f64.push(acc);
    }
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            kind,
            steps,
            beta_start,
            beta_end,
        },
        beta: betas.iter().map(|&b| T::lit(b)).collect(),
        alpha: betas.iter().map(|&b| T::lit(1.0 - b)).collect(),
        alpha_bar: alpha_bar_f64.iter().map(|&a| T::lit(a)).collect(),
        sigma: betas.iter().map(|&b| T::lit(b.sqrt())).collect(),
        alpha_bar_f64,
    })
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// `T`, the number of diffusion steps.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.len() {
            Err(DiffusionError::StepOutOfRange { t, max: self.len() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> T {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> T {
        self.sigma[t - 1]
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`, evaluated in `f64`.
    pub fn forward_coefficients(&self, t: usize) -> (T, T) {
        let ab = if t == 0 { 1.0 } else { self.alpha_bar_f64[t - 1] };
        (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()))
    }

    /// `(α, β)` of the reverse transition `t → t_prev`. Consecutive steps use
    /// the stored arrays; strided steps use `α = ᾱ_t / ᾱ_{t_prev}`.
    fn transition(&self, t: usize, t_prev: usize) -> (T, T) {
        if t_prev + 1 == t {
            (self.alpha(t), self.beta(t))
        } else {
            let prev = if t_prev == 0 { 1.0 } else { self.alpha_bar_f64[t_prev - 1] };
            let a = self.alpha_bar_f64[t - 1] / prev;
            (T::lit(a), T::lit(1.0 - a))
        }
    }
}

/// A latent `x_t` paired with its timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState<T> {
    pub x: ImageTensor<T>,
    pub t: usize,
}

impl<T: Scalar> DiffusionState<T> {
    pub fn new(x: ImageTensor<T>, t: usize, s: &NoiseSchedule<T>) -> Result<Self, DiffusionError> {
        if t > s.len() {
            return Err(DiffusionError::StepOutOfRange { t, max: s.len() });
        }
        Ok(Self { x, t })
    }
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample<T: Scalar>(
    x0: &ImageTensor<T>,
    t: usize,
    eps: &ImageTensor<T>,
    s: &NoiseSchedule<T>,
) -> Result<ImageTensor<T>, DiffusionError> {
    s.check_step(t)?;
    let (a, b) = s.forward_coefficients(t);
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// `(x_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`.
pub fn predict_x0<T: Scalar>(
    x_t: &ImageTensor<T>,
    eps_hat: &ImageTensor<T>,
    t: usize,
    s: &NoiseSchedule<T>,
) -> Result<ImageTensor<T>, DiffusionError> {
    s.check_step(t)?;
    let (a, b) = s.forward_coefficients(t);
    Ok(x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)?)
}

fn reverse_mean<T: Scalar>(
    x_t: &ImageTensor<T>,
    eps_hat: &ImageTensor<T>,
    alpha: T,
    beta: T,
    alpha_bar: T,
) -> Result<ImageTensor<T>, DiffusionError> {
    let inv_sqrt_alpha = T::one() / alpha.sqrt();
    let coef = beta / (T::one() - alpha_bar).sqrt();
    Ok(x_t.zip_map(eps_hat, |x, e| inv_sqrt_alpha * (x - coef * e))?)
}

/// `μ = (x_t − β_t / √(1 − ᾱ_t) · ε̂) / √α_t`.
pub fn posterior_mean<T: Scalar>(
    x_t: &ImageTensor<T>,
    eps_hat: &ImageTensor<T>,
    t: usize,
    s: &NoiseSchedule<T>,
) -> Result<ImageTensor<T>, DiffusionError> {
    s.check_step(t)?;
    reverse_mean(x_t, eps_hat, s.alpha(t), s.beta(t), s.alpha_bar(t))
}

/// A conditional noise predictor `ε̂(x_t, condition, t)`.
pub trait NoisePredictor<T: Scalar> {
    fn predict_noise(
        &self,
        x_t: &ImageTensor<T>,
        condition: &ImageTensor<T>,
        t: usize,
    ) -> Result<ImageTensor<T>, DiffusionError>;
}

impl<T: Scalar, F> NoisePredictor<T> for F
where
    F: Fn(&ImageTensor<T>, &ImageTensor<T>, usize) -> ImageTensor<T>,
{
    fn predict_noise(
        &self,
        x_t: &ImageTensor<T>,
        condition: &ImageTensor<T>,
        t: usize,
    ) -> Result<ImageTensor<T>, DiffusionError> {
        Ok(self(x_t, condition, t))
    }
}

/// What a network's raw output estimates. Either way the predictor reports
/// noise; `Velocity` output `v = √ᾱ_t·ε − √(1−ᾱ_t)·x0` is converted with
/// `ε̂ = √ᾱ_t·v + √(1−ᾱ_t)·x_t`.
///
/// Under `Velocity` the one-step estimate `x̂0 = √ᾱ_t·x_t − √(1−ᾱ_t)·v`
/// weights `x_t` by `√ᾱ_t < 1`, so a sampler started from `N(0, I)` stays
/// usable even when `ᾱ_T` is far from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Prediction {
    Noise,
    #[default]
    Velocity,
}

impl Prediction {
    /// Noise implied by raw output `out` at `x_t`, given `(√ᾱ_t, √(1−ᾱ_t))`.
    #[inline]
    pub fn to_noise<T: Scalar>(self, out: T, x_t: T, (a, b): (T, T)) -> T {
        match self {
            Prediction::Noise => out,
            Prediction::Velocity => a * out + b * x_t,
        }
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Prediction::Noise => "noise",
            Prediction::Velocity => "velocity",
        })
    }
}

impl FromStr for Prediction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise" => Ok(Self::Noise),
            "velocity" => Ok(Self::Velocity),
            other => Err(format!("unknown prediction target {other:?}")),
        }
    }
}

/// Wraps a network so its raw output, read per [`Prediction`], becomes a
/// noise estimate.
pub struct Parameterized<'a, P: ?Sized, T> {
    pub net: &'a P,
    pub schedule: &'a NoiseSchedule<T>,
    pub prediction: Prediction,
}

impl<T: Scalar, P: NoisePredictor<T> + ?Sized> NoisePredictor<T> for Parameterized<'_, P, T> {
    fn predict_noise(
        &self,
        x_t: &ImageTensor<T>,
        condition: &ImageTensor<T>,
        t: usize,
    ) -> Result<ImageTensor<T>, DiffusionError> {
        self.schedule.check_step(t)?;
        let out = self.net.predict_noise(x_t, condition, t)?;
        if self.prediction == Prediction::Noise {
            return Ok(out);
        }
        let coefficients = self.schedule.forward_coefficients(t);
        Ok(out.zip_map(x_t, |o, x| self.prediction.to_noise(o, x, coefficients))?)
    }
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_like<T: Scalar, R: Rng + ?Sized>(height: usize, width: usize, channels: usize, rng: &mut R) -> ImageTensor<T> {
    let data = (0..height * width * channels).map(|_| standard_normal(rng)).collect();
    ImageTensor::new(height, width, channels, data).expect("gaussian draw is finite")
}

/// `steps` timesteps evenly strided over `1..=T`, ascending; the last is `T`.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 || steps > total {
        return Err(DiffusionError::StepCountInvalid { steps, max: total });
    }
    Ok((1..=steps).map(|i| i * total / steps).collect())
}

/// Draws `x̂_T ~ N(0, I)` shaped like `condition` and runs the reverse chain,
/// passing `condition` to the predictor at every step.
pub fn sample<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    denoiser: &P,
    condition: &ImageTensor<T>,
    s: &NoiseSchedule<T>,
    steps: usize,
    mode: SamplingMode,
    rng: &mut R,
) -> Result<ImageTensor<T>, DiffusionError> {
    let timesteps = strided_timesteps(s.len(), steps)?;
    let (h, w, c) = condition.dims();
    let mut x = gaussian_like(h, w, c, rng);
    for idx in (0..timesteps.len()).rev() {
        let t = timesteps[idx];
        let t_prev = if idx == 0 { 0 } else { timesteps[idx - 1] };
        let eps = denoiser.predict_noise(&x, condition, t)?;
        condition.check_same_dims(&eps)?;
        match mode {
            SamplingMode::Implicit => {
                let x0 = predict_x0(&x, &eps, t, s)?;
                if t_prev == 0 {
                    return Ok(x0);
                }
                let (a, b) = s.forward_coefficients(t_prev);
                x = x0.zip_map(&eps, |p, e| a * p + b * e)?;
            }
            SamplingMode::Ancestral => {
                let (alpha, beta) = s.transition(t, t_prev);
                let mean = reverse_mean(&x, &eps, alpha, beta, s.alpha_bar(t))?;
                if t_prev == 0 {
                    return Ok(mean);
                }
                let sigma = beta.sqrt();
                let noise: ImageTensor<T> = gaussian_like(h, w, c, rng);
                x = mean.zip_map(&noise, |m, z| m + sigma * z)?;
            }
        }
    }
    unreachable!("timesteps is non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle(target: ImageTensor<f64>, s: NoiseSchedule<f64>) -> impl Fn(&ImageTensor<f64>, &ImageTensor<f64>, usize) -> ImageTensor<f64> {
        move |x_t, _cond, t| {
            let (a, b) = s.forward_coefficients(t);
            x_t.zip_map(&target, |x, x0| (x - a * x0) / b).unwrap()
        }
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule::<f64>(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        let s = make_schedule::<f64>(3, 0.1, 0.3, ScheduleKind::Linear).unwrap();
        for (t, expected) in [(1, 0.9), (2, 0.72), (3, 0.504)] {
            assert!((s.alpha_bar(t) - expected).abs() < 1e-12);
        }
        assert!((s.beta(2) - 0.2).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn schedule_errors() {
        assert!(make_schedule::<f32>(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule::<f32>(10, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule::<f32>(10, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule::<f32>(10, 0.1, 1.0, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn rebuild_is_bit_exact() {
        let a = make_schedule::<f32>(200, 1e-4, 2e-2, ScheduleKind::Cosine).unwrap();
        let b = a.spec().build::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scalar_arithmetic() {
        // ᾱ = 0.64 at t = 1 via β = 0.36.
        let s = make_schedule::<f64>(1, 0.36, 0.36, ScheduleKind::Linear).unwrap();
        let x0 = ImageTensor::filled(1, 1, 1, 1.0);
        let eps = ImageTensor::filled(1, 1, 1, 1.0);
        let xt = q_sample(&x0, 1, &eps, &s).unwrap();
        assert!((xt.get(0, 0, 0) - 1.4).abs() < 1e-12);
        let zero = ImageTensor::zeros(1, 1, 1);
        assert!((q_sample(&x0, 1, &zero, &s).unwrap().get(0, 0, 0) - 0.8).abs() < 1e-12);
        assert!((predict_x0(&xt, &zero, 1, &s).unwrap().get(0, 0, 0) - 1.75).abs() < 1e-12);
        assert!(matches!(q_sample(&x0, 2, &eps, &s), Err(DiffusionError::StepOutOfRange { t: 2, max: 1 })));
        assert!(matches!(predict_x0(&x0, &eps, 0, &s), Err(DiffusionError::StepOutOfRange { .. })));
    }

    #[test]
    fn posterior_mean_closed_form() {
        // A 2-step schedule with α_2 = 0.96, β_2 = 0.04 and ᾱ_2 = 0.5 needs α_1 = 0.5/0.96.
        let s = make_schedule::<f64>(1, 0.04, 0.04, ScheduleKind::Linear).unwrap();
        let x = ImageTensor::filled(1, 1, 1, 1.0);
        let e = ImageTensor::filled(1, 1, 1, 1.0);
        let m = reverse_mean(&x, &e, 0.96, 0.04, 0.5).unwrap();
        let expected = (1.0 - 0.04 / 0.5f64.sqrt()) / 0.96f64.sqrt();
        assert!((m.get(0, 0, 0) - expected).abs() < 1e-12);
        assert!((m.get(0, 0, 0) - 0.96287).abs() < 5e-5);

        let zero = ImageTensor::zeros(1, 1, 1);
        let m = posterior_mean(&x, &zero, 1, &s).unwrap();
        assert!((m.get(0, 0, 0) - 1.0 / 0.96f64.sqrt()).abs() < 1e-12);
        let m2 = posterior_mean(&x.map(|v| 3.0 * v), &e.map(|v| 3.0 * v), 1, &s).unwrap();
        let m1 = posterior_mean(&x, &e, 1, &s).unwrap();
        assert!((m2.get(0, 0, 0) - 3.0 * m1.get(0, 0, 0)).abs() < 1e-12);
    }

    #[test]
    fn forward_moments() {
        let s = make_schedule::<f64>(200, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let x0 = ImageTensor::filled(1, 1, 1, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        for t in [1, 100, 200] {
            let samples: Vec<f64> = (0..n)
                .map(|_| {
                    let eps = gaussian_like(1, 1, 1, &mut rng);
                    q_sample(&x0, t, &eps, &s).unwrap().get(0, 0, 0)
                })
                .collect();
            let mean = samples.iter().sum::<f64>() / n as f64;
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let ab = s.alpha_bar(t);
            let true_var = 1.0 - ab;
            assert!((mean - ab.sqrt() * 0.7).abs() < 3.0 * (true_var / n as f64).sqrt());
            assert!((var - true_var).abs() < 3.0 * true_var * (2.0 / (n - 1) as f64).sqrt());
        }
    }

    #[test]
    fn oracle_sampling_recovers_target() {
        let s = make_schedule::<f64>(200, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = gaussian_like(4, 4, 3, &mut rng);
        let cond = ImageTensor::zeros(4, 4, 3);
        let den = oracle(target.clone(), s.clone());
        for steps in [1, 10, 200] {
            for mode in [SamplingMode::Implicit, SamplingMode::Ancestral] {
                let out = sample(&den, &cond, &s, steps, mode, &mut rng).unwrap();
                assert!(out.max_abs_diff(&target) < 1e-3, "{steps} {mode}");
            }
        }
    }

    #[test]
    fn single_implicit_step_is_predict_x0_of_the_initial_noise() {
        let s = make_schedule::<f64>(50, 1e-3, 2e-2, ScheduleKind::Linear).unwrap();
        let den = |x: &ImageTensor<f64>, _: &ImageTensor<f64>, _t: usize| x.map(|v| 0.5 * v);
        let cond = ImageTensor::zeros(2, 2, 1);
        let out = sample(&den, &cond, &s, 1, SamplingMode::Implicit, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x_t: ImageTensor<f64> = gaussian_like(2, 2, 1, &mut ChaCha8Rng::seed_from_u64(4));
        let expected = predict_x0(&x_t, &x_t.map(|v| 0.5 * v), 50, &s).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn ancestral_is_deterministic_given_seed() {
        let s = make_schedule::<f32>(20, 1e-3, 2e-2, ScheduleKind::Linear).unwrap();
        let den = |x: &ImageTensor<f32>, c: &ImageTensor<f32>, _t: usize| x.zip_map(c, |a, b| 0.1 * a - b).unwrap();
        let cond = ImageTensor::filled(3, 3, 2, 0.2);
        let a = sample(&den, &cond, &s, 20, SamplingMode::Ancestral, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample(&den, &cond, &s, 20, SamplingMode::Ancestral, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            sample(&den, &cond, &s, 21, SamplingMode::Implicit, &mut ChaCha8Rng::seed_from_u64(7)),
            Err(DiffusionError::StepCountInvalid { .. })
        ));
    }

    #[test]
    fn velocity_oracle_samples_the_target() {
        let s = make_schedule::<f64>(200, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let target: ImageTensor<f64> = gaussian_like(4, 4, 3, &mut ChaCha8Rng::seed_from_u64(11)).map(|v| 2.0 + v);
        // v = √ᾱ·ε − √(1−ᾱ)·x0 with ε recovered from x_t.
        let sc = s.clone();
        let tg = target.clone();
        let velocity = move |x: &ImageTensor<f64>, _: &ImageTensor<f64>, t: usize| {
            let (a, b) = sc.forward_coefficients(t);
            x.zip_map(&tg, |x, x0| a * (x - a * x0) / b - b * x0).unwrap()
        };
        let net = Parameterized {
            net: &velocity,
            schedule: &s,
            prediction: Prediction::Velocity,
        };
        let cond = ImageTensor::zeros(4, 4, 3);
        let out = sample(&net, &cond, &s, 10, SamplingMode::Implicit, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(out.max_abs_diff(&target) < 1e-6);
        assert_eq!(Prediction::Velocity.to_noise(0.5, 2.0, (0.6, 0.8)), 0.6 * 0.5 + 0.8 * 2.0);
        assert_eq!(Prediction::Noise.to_noise(0.5, 2.0, (0.6, 0.8)), 0.5);
        assert_eq!("velocity".parse::<Prediction>().unwrap(), Prediction::Velocity);
        assert!("x0".parse::<Prediction>().is_err());
    }

    #[test]
    fn strided_steps() {
        assert_eq!(strided_timesteps(200, 10).unwrap(), (1..=10).map(|i| 20 * i).collect::<Vec<_>>());
        assert_eq!(strided_timesteps(7, 7).unwrap(), (1..=7).collect::<Vec<_>>());
        assert_eq!(strided_timesteps(7, 1).unwrap(), vec![7]);
    }

    proptest! {
        #[test]
        fn schedules_are_monotone(steps in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.1, cosine in any::<bool>()) {
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
            let s = make_schedule::<f64>(steps, lo, lo + span, kind).unwrap();
            for t in 1..=steps {
                prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                prop_assert!(s.sigma(t) >= 0.0);
            }
        }

        #[test]
        fn predict_inverts_q_sample(seed in any::<u64>(), t in 1usize..=200) {
            let s = make_schedule::<f64>(200, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = gaussian_like(3, 3, 2, &mut rng);
            let eps = gaussian_like(3, 3, 2, &mut rng);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            prop_assert!(predict_x0(&xt, &eps, t, &s).unwrap().max_abs_diff(&x0) < 1e-4);
        }

        #[test]
        fn samples_stay_finite(seed in any::<u64>()) {
            let s = make_schedule::<f32>(200, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
            let den = |x: &ImageTensor<f32>, c: &ImageTensor<f32>, _t: usize| x.zip_map(c, |a, b| 0.9 * a + b).unwrap();
            let cond = ImageTensor::filled(4, 4, 3, 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = sample(&den, &cond, &s, 10, SamplingMode::Implicit, &mut rng).unwrap();
            prop_assert_eq!(out.dims(), cond.dims());
        }
    }
}
