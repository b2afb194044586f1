use super::ImagingError;
use crate::tensor::ImageTensor;
use crate::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<T, ImagingError> {
    a.check_same_dims(b)?;
    let sum: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(sum / T::from_usize(a.data().len()).unwrap())
}

/// Peak signal-to-noise ratio in dB with peak 1.0; `+∞` for identical inputs.
pub fn psnr<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<T, ImagingError> {
    let err = mse(a, b)?;
    if err == T::zero() {
        return Ok(T::infinity());
    }
    Ok(T::lit(10.0) * (T::one() / err).log10())
}

/// Normalized 1D Gaussian taps of length [`SSIM_WINDOW`].
pub fn gaussian_window<T: Scalar>() -> Vec<T> {
    let center = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|&v| T::lit(v / total)).collect()
}

/// Separable valid-mode filtering of one plane.
fn blur_valid<T: Scalar>(src: &[T], height: usize, width: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (height - k + 1, width - k + 1);
    let mut rows = vec![T::zero(); height * ow];
    for y in 0..height {
        let line = &src[y * width..(y + 1) * width];
        for x in 0..ow {
            let mut acc = T::zero();
            for (t, &tap) in taps.iter().enumerate() {
                acc += tap * line[x + t];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..oh {
        for (t, &tap) in taps.iter().enumerate() {
            let line = &rows[(y + t) * ow..(y + t + 1) * ow];
            for x in 0..ow {
                out[y * ow + x] += tap * line[x];
            }
        }
    }
    out
}

/// Mean structural similarity over valid 11×11 Gaussian windows (σ = 1.5),
/// averaged over channels.
pub fn ssim<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<T, ImagingError> {
    a.check_same_dims(b)?;
    let (height, width, channels) = a.dims();
    let side = height.min(width);
    if side < SSIM_WINDOW {
        return Err(ImagingError::ImageTooSmall(side));
    }
    let taps = gaussian_window::<T>();
    let c1 = T::lit(SSIM_C1);
    let c2 = T::lit(SSIM_C2);
    let two = T::lit(2.0);
    let mut total = T::zero();
    for c in 0..channels {
        let x = a.channel(c);
        let y = b.channel(c);
        let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
        let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = x.iter().zip(y).map(|(&p, &q)| p * q).collect();
        let mu_x = blur_valid(x, height, width, &taps);
        let mu_y = blur_valid(y, height, width, &taps);
        let e_xx = blur_valid(&xx, height, width, &taps);
        let e_yy = blur_valid(&yy, height, width, &taps);
        let e_xy = blur_valid(&xy, height, width, &taps);
        let mut acc = T::zero();
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cxy = e_xy[i] - mx * my;
            let num = (two * mx * my + c1) * (two * cxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            acc += num / den;
        }
        total += acc / T::from_usize(mu_x.len()).unwrap();
    }
    Ok(total / T::from_usize(channels).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(h, w, c, data).unwrap()
    }

    /// Direct per-window evaluation with the 2D Gaussian kernel.
    fn ssim_reference(a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> f64 {
        let (h, w, ch) = a.dims();
        let s = 1.5f64;
        let mut kernel = [[0.0f64; 11]; 11];
        let mut total = 0.0;
        for (i, row) in kernel.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * s * s)).exp();
                total += *v;
            }
        }
        let mut score = 0.0;
        for c in 0..ch {
            let mut acc = 0.0;
            let mut count = 0.0;
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let k = kernel[i][j] / total;
                            let (p, q) = (a.get(y0 + i, x0 + j, c), b.get(y0 + i, x0 + j, c));
                            mx += k * p;
                            my += k * q;
                            sxx += k * p * p;
                            syy += k * q * q;
                            sxy += k * p * q;
                        }
                    }
                    let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    acc += ((2.0 * mx * my + 1e-4) * (2.0 * cxy + 9e-4))
                        / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
                    count += 1.0;
                }
            }
            score += acc / count;
        }
        score / ch as f64
    }

    #[test]
    fn psnr_closed_forms() {
        let zero = ImageTensor::<f64>::zeros(4, 4, 3);
        let one = ImageTensor::<f64>::filled(4, 4, 3, 1.0);
        let half = ImageTensor::<f64>::filled(4, 4, 3, 0.5);
        assert_eq!(psnr(&zero, &zero).unwrap(), f64::INFINITY);
        assert!(psnr(&zero, &one).unwrap().abs() < 1e-12);
        assert!((psnr(&zero, &half).unwrap() - 6.020599913279624).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = random_image(24, 20, 3, 1);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let c = ImageTensor::<f64>::filled(16, 16, 1, 0.5);
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn ssim_matches_windowed_reference() {
        let x = random_image(64, 64, 1, 7);
        let shifted = x.map(|v| v + 0.1);
        let fast = ssim(&x, &shifted).unwrap();
        let slow = ssim_reference(&x, &shifted);
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
        assert!(fast > 0.0 && fast < 1.0);

        let a = random_image(20, 17, 3, 8);
        let b = random_image(20, 17, 3, 9);
        assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-10);
    }

    #[test]
    fn metric_errors() {
        let a = ImageTensor::<f64>::zeros(16, 16, 3);
        let b = ImageTensor::<f64>::zeros(16, 12, 3);
        assert!(matches!(psnr(&a, &b), Err(ImagingError::Shape(_))));
        assert!(matches!(ssim(&a, &b), Err(ImagingError::Shape(_))));
        let small = ImageTensor::<f64>::zeros(10, 16, 1);
        assert!(matches!(ssim(&small, &small), Err(ImagingError::ImageTooSmall(10))));
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed_a in any::<u64>(), seed_b in any::<u64>()) {
            let a = random_image(16, 16, 3, seed_a);
            let b = random_image(16, 16, 3, seed_b);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }
}
