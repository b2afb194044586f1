//! 2D DFT amplitude/phase decomposition and the L1 spectral losses.
//!
//! The forward transform is unnormalized:
//! `X[u, v] = Σ_y Σ_x x[y, x] · exp(-2πi (u·y/H + v·x/W))`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::tensor::{ImageTensor, TensorError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("spectrum lists must be non-empty")]
    EmptyList,
    #[error("spectrum lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Shape(#[from] TensorError),
}

/// Distance used to compare phase values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhaseDistance {
    /// `|φ₁ − φ₂|` on principal values.
    #[default]
    Raw,
    /// Shortest angular distance, in `[0, π]`.
    Wrapped,
}

/// Per-channel amplitude and phase of the 2D DFT.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    pub amplitude: ImageTensor<T>,
    pub phase: ImageTensor<T>,
}

/// In-place unnormalized 2D FFT of a row-major `height×width` buffer.
pub(crate) fn fft2_in_place<T: Scalar>(buf: &mut [Complex<T>], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    row_fft.process(buf);
    let mut column = vec![Complex::new(T::zero(), T::zero()); height * width];
    for y in 0..height {
        for x in 0..width {
            column[x * height + y] = buf[y * width + x];
        }
    }
    col_fft.process(&mut column);
    for y in 0..height {
        for x in 0..width {
            buf[y * width + x] = column[x * height + y];
        }
    }
}

/// Forward 2D DFT of a real plane.
pub fn dft2<T: Scalar>(plane: &[T], height: usize, width: usize) -> Vec<Complex<T>> {
    let mut buf: Vec<Complex<T>> = plane.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2_in_place(&mut buf, height, width, false);
    buf
}

/// Argument in `(−π, π]`, with 0 for a zero-modulus bin.
#[inline]
pub(crate) fn principal_phase<T: Scalar>(z: Complex<T>) -> T {
    if z.re == T::zero() && z.im == T::zero() {
        return T::zero();
    }
    let phase = z.im.atan2(z.re);
    if phase <= -T::PI() {
        T::PI()
    } else {
        phase
    }
}

pub fn dft_amp_phase<T: Scalar>(x: &ImageTensor<T>) -> Spectrum<T> {
    let (height, width, channels) = x.dims();
    let mut amplitude = ImageTensor::zeros(height, width, channels);
    let mut phase = ImageTensor::zeros(height, width, channels);
    for c in 0..channels {
        let spec = dft2(x.channel(c), height, width);
        for (i, z) in spec.iter().enumerate() {
            amplitude.channel_mut(c)[i] = z.norm();
            phase.channel_mut(c)[i] = principal_phase(*z);
        }
    }
    Spectrum { amplitude, phase }
}

/// Inverse of [`dft_amp_phase`]: real part of the normalized inverse DFT of
/// `amplitude · exp(i · phase)`.
pub fn inverse_amp_phase<T: Scalar>(s: &Spectrum<T>) -> Result<ImageTensor<T>, TensorError> {
    s.amplitude.check_same_dims(&s.phase)?;
    let (height, width, channels) = s.amplitude.dims();
    let scale = T::one() / T::from_usize(height * width).unwrap();
    let mut out = ImageTensor::zeros(height, width, channels);
    for c in 0..channels {
        let mut buf: Vec<Complex<T>> = s
            .amplitude
            .channel(c)
            .iter()
            .zip(s.phase.channel(c))
            .map(|(&a, &p)| Complex::from_polar(a, p))
            .collect();
        fft2_in_place(&mut buf, height, width, true);
        for (dst, z) in out.channel_mut(c).iter_mut().zip(&buf) {
            *dst = z.re * scale;
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn phase_gap<T: Scalar>(a: T, b: T, distance: PhaseDistance) -> T {
    let d = (a - b).abs();
    match distance {
        PhaseDistance::Raw => d,
        PhaseDistance::Wrapped => d.min(T::lit(2.0) * T::PI() - d),
    }
}

fn mean_abs<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>, gap: impl Fn(T, T) -> T) -> Result<T, TensorError> {
    a.check_same_dims(b)?;
    let sum: T = a.data().iter().zip(b.data()).map(|(&x, &y)| gap(x, y)).sum();
    Ok(sum / T::from_usize(a.data().len()).unwrap())
}

/// `(L_amp, L_pha)`: per-scale mean absolute differences averaged over scales.
pub fn spectral_terms<T: Scalar>(
    pred: &[Spectrum<T>],
    reference: &[Spectrum<T>],
    distance: PhaseDistance,
) -> Result<(T, T), SpectralError> {
    if pred.is_empty() || reference.is_empty() {
        return Err(SpectralError::EmptyList);
    }
    if pred.len() != reference.len() {
        return Err(SpectralError::LengthMismatch(pred.len(), reference.len()));
    }
    let mut amp = T::zero();
    let mut pha = T::zero();
    for (p, r) in pred.iter().zip(reference) {
        amp += mean_abs(&p.amplitude, &r.amplitude, |x, y| (x - y).abs())?;
        pha += mean_abs(&p.phase, &r.phase, |x, y| phase_gap(x, y, distance))?;
    }
    let k = T::from_usize(pred.len()).unwrap();
    Ok((amp / k, pha / k))
}

/// `w_amp · L_amp + w_pha · L_pha`.
pub fn spectral_l1_loss<T: Scalar>(
    pred: &[Spectrum<T>],
    reference: &[Spectrum<T>],
    w_amp: T,
    w_pha: T,
    distance: PhaseDistance,
) -> Result<T, SpectralError> {
    let (amp, pha) = spectral_terms(pred, reference, distance)?;
    Ok(w_amp * amp + w_pha * pha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.random::<f64>() - 0.5).collect();
        ImageTensor::new(h, w, c, data).unwrap()
    }

    /// Direct O(N⁴) transform.
    fn naive_dft(plane: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let theta = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        re += plane[y * w + x] * theta.cos();
                        im += plane[y * w + x] * theta.sin();
                    }
                }
                out[u * w + v] = (re, im);
            }
        }
        out
    }

    #[test]
    fn matches_direct_transform() {
        let x = random_image(8, 6, 2, 4);
        let s = dft_amp_phase(&x);
        for c in 0..2 {
            let oracle = naive_dft(x.channel(c), 8, 6);
            for (i, (re, im)) in oracle.iter().enumerate() {
                let amp = (re * re + im * im).sqrt();
                assert!((s.amplitude.channel(c)[i] - amp).abs() < 1e-10);
                if amp > 1e-9 {
                    let phase = im.atan2(*re);
                    let got = s.phase.channel(c)[i];
                    let gap = (got - phase).abs();
                    assert!(gap < 1e-9 || (gap - 2.0 * PI).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn constant_image_spectrum() {
        let x = ImageTensor::<f64>::filled(8, 8, 1, 0.75);
        let s = dft_amp_phase(&x);
        assert!((s.amplitude.get(0, 0, 0) - 64.0 * 0.75).abs() < 1e-12);
        assert_eq!(s.phase.get(0, 0, 0), 0.0);
        for (i, &a) in s.amplitude.data().iter().enumerate().skip(1) {
            assert!(a < 1e-12, "bin {i} = {a}");
        }
    }

    #[test]
    fn round_trip_recovers_input() {
        let x = random_image(8, 8, 3, 12);
        let back = inverse_amp_phase(&dft_amp_phase(&x)).unwrap();
        assert!(x.max_abs_diff(&back) < 1e-6);
    }

    #[test]
    fn phase_range_and_zero_bin() {
        assert_eq!(principal_phase(Complex::new(0.0f64, 0.0)), 0.0);
        assert_eq!(principal_phase(Complex::new(-1.0f64, -0.0)), PI);
        assert_eq!(principal_phase(Complex::new(-1.0f64, 0.0)), PI);
    }

    #[test]
    fn loss_values() {
        let x = random_image(4, 4, 3, 1);
        let s = vec![dft_amp_phase(&x)];
        assert_eq!(spectral_l1_loss(&s, &s, 1.0, 1.0, PhaseDistance::Raw).unwrap(), 0.0);

        let one = |amp: f64| Spectrum {
            amplitude: ImageTensor::filled(1, 1, 1, amp),
            phase: ImageTensor::filled(1, 1, 1, 0.3),
        };
        let l = spectral_l1_loss(&[one(3.0)], &[one(1.0)], 1.0, 1.0, PhaseDistance::Raw).unwrap();
        assert_eq!(l, 2.0);
    }

    #[test]
    fn weights_scale_terms_independently() {
        let a = vec![dft_amp_phase(&random_image(6, 6, 3, 2)), dft_amp_phase(&random_image(3, 3, 3, 3))];
        let b = vec![dft_amp_phase(&random_image(6, 6, 3, 4)), dft_amp_phase(&random_image(3, 3, 3, 5))];
        let (amp, pha) = spectral_terms(&a, &b, PhaseDistance::Raw).unwrap();
        let l1 = spectral_l1_loss(&a, &b, 1.0, 1.0, PhaseDistance::Raw).unwrap();
        let l2 = spectral_l1_loss(&a, &b, 2.0, 1.0, PhaseDistance::Raw).unwrap();
        assert!((l1 - (amp + pha)).abs() < 1e-12);
        assert!((l2 - l1 - amp).abs() < 1e-12);
    }

    #[test]
    fn wrapped_distance_is_shorter() {
        assert!((phase_gap(3.0f64, -3.0, PhaseDistance::Raw) - 6.0).abs() < 1e-12);
        assert!((phase_gap(3.0f64, -3.0, PhaseDistance::Wrapped) - (2.0 * PI - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn loss_errors() {
        let s = vec![dft_amp_phase(&random_image(4, 4, 1, 1))];
        let t = vec![dft_amp_phase(&random_image(2, 4, 1, 1))];
        let empty: Vec<Spectrum<f64>> = vec![];
        assert!(matches!(
            spectral_l1_loss(&empty, &empty, 1.0, 1.0, PhaseDistance::Raw),
            Err(SpectralError::EmptyList)
        ));
        assert!(matches!(
            spectral_l1_loss(&s, &t, 1.0, 1.0, PhaseDistance::Raw),
            Err(SpectralError::Shape(_))
        ));
        assert!(matches!(
            spectral_l1_loss(&s, &[s[0].clone(), s[0].clone()], 1.0, 1.0, PhaseDistance::Raw),
            Err(SpectralError::LengthMismatch(1, 2))
        ));
    }

    proptest! {
        #[test]
        fn amplitude_is_shift_invariant(seed in any::<u64>(), dy in 0usize..8, dx in 0usize..8) {
            let x = random_image(8, 8, 2, seed);
            let shifted = ImageTensor::from_fn(8, 8, 2, |y, xx, c| x.get((y + dy) % 8, (xx + dx) % 8, c));
            let a = dft_amp_phase(&x);
            let b = dft_amp_phase(&shifted);
            prop_assert!(a.amplitude.max_abs_diff(&b.amplitude) < 1e-6);
        }

        #[test]
        fn loss_nonnegative_and_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = vec![dft_amp_phase(&random_image(4, 4, 3, s1))];
            let b = vec![dft_amp_phase(&random_image(4, 4, 3, s2))];
            let ab = spectral_l1_loss(&a, &b, 1.0, 1.0, PhaseDistance::Raw).unwrap();
            let ba = spectral_l1_loss(&b, &a, 1.0, 1.0, PhaseDistance::Raw).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
        }
    }
}
