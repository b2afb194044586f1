//! Orthonormal 2D Haar transform and its multi-level pyramid.
//!
//! Each non-overlapping 2×2 block `(a b / c d)` maps to
//!
//! ```text
//! A = (a + b + c + d) / 2    H = (a + b - c - d) / 2
//! V = (a - b + c - d) / 2    D = (a - b - c + d) / 2
//! ```
//!
//! The 4×4 block matrix is symmetric and orthogonal, so synthesis applies the
//! same matrix again. A constant image `c` has `A ≡ 2c` at every level, i.e.
//! `2^K · c` after `K` levels.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::imaging::{save_image, ImagingError};
use crate::tensor::{ImageTensor, TensorError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum WaveletError {
    #[error("dimensions {height}x{width} are not even")]
    OddDimensions { height: usize, width: usize },
    #[error("dimensions {height}x{width} are not divisible by 2^{levels}")]
    IndivisibleDimensions {
        height: usize,
        width: usize,
        levels: usize,
    },
    #[error("level count must be at least 1")]
    NoLevels,
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Detail bands of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandTriple<T> {
    pub v: ImageTensor<T>,
    pub h: ImageTensor<T>,
    pub d: ImageTensor<T>,
}

impl<T: Scalar> SubbandTriple<T> {
    pub fn new(v: ImageTensor<T>, h: ImageTensor<T>, d: ImageTensor<T>) -> Result<Self, TensorError> {
        v.check_same_dims(&h)?;
        v.check_same_dims(&d)?;
        Ok(Self { v, h, d })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.v.dims()
    }

    pub fn bands(&self) -> [&ImageTensor<T>; 3] {
        [&self.v, &self.h, &self.d]
    }

    pub fn zeroed(&self) -> Self {
        let (h, w, c) = self.dims();
        Self {
            v: ImageTensor::zeros(h, w, c),
            h: ImageTensor::zeros(h, w, c),
            d: ImageTensor::zeros(h, w, c),
        }
    }
}

/// `K`-level decomposition: the coarsest approximation plus one detail
/// triple per level, `details[0]` being the finest (level 1).
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid<T> {
    pub approx: ImageTensor<T>,
    pub details: Vec<SubbandTriple<T>>,
}

impl<T: Scalar> WaveletPyramid<T> {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Detail triple at level `k` (1-based, 1 = finest).
    pub fn level(&self, k: usize) -> &SubbandTriple<T> {
        &self.details[k - 1]
    }
}

/// Single-level analysis of one `h×w` plane into four `h/2 × w/2` planes.
pub(crate) fn analysis_plane<T: Scalar>(
    src: &[T],
    height: usize,
    width: usize,
    a: &mut [T],
    v: &mut [T],
    h: &mut [T],
    d: &mut [T],
) {
    let half = T::lit(0.5);
    let (oh, ow) = (height / 2, width / 2);
    for y in 0..oh {
        let top = &src[2 * y * width..(2 * y + 1) * width];
        let bot = &src[(2 * y + 1) * width..(2 * y + 2) * width];
        for x in 0..ow {
            let (p, q) = (top[2 * x], top[2 * x + 1]);
            let (r, s) = (bot[2 * x], bot[2 * x + 1]);
            let i = y * ow + x;
            a[i] = (p + q + r + s) * half;
            h[i] = (p + q - r - s) * half;
            v[i] = (p - q + r - s) * half;
            d[i] = (p - q - r + s) * half;
        }
    }
}

/// Inverse of [`analysis_plane`]: four `h×w` planes into one `2h × 2w` plane.
pub(crate) fn synthesis_plane<T: Scalar>(
    a: &[T],
    v: &[T],
    h: &[T],
    d: &[T],
    height: usize,
    width: usize,
    dst: &mut [T],
) {
    let half = T::lit(0.5);
    let ow = 2 * width;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let (aa, vv, hh, dd) = (a[i], v[i], h[i], d[i]);
            dst[2 * y * ow + 2 * x] = (aa + hh + vv + dd) * half;
            dst[2 * y * ow + 2 * x + 1] = (aa + hh - vv - dd) * half;
            dst[(2 * y + 1) * ow + 2 * x] = (aa - hh + vv - dd) * half;
            dst[(2 * y + 1) * ow + 2 * x + 1] = (aa - hh - vv + dd) * half;
        }
    }
}

/// One analysis level. Returns `(A, V, H, D)`.
pub fn dwt2<T: Scalar>(
    x: &ImageTensor<T>,
) -> Result<(ImageTensor<T>, ImageTensor<T>, ImageTensor<T>, ImageTensor<T>), WaveletError> {
    let (height, width, channels) = x.dims();
    if height % 2 != 0 || width % 2 != 0 {
        return Err(WaveletError::OddDimensions { height, width });
    }
    let (oh, ow) = (height / 2, width / 2);
    let mut bands = [
        ImageTensor::zeros(oh, ow, channels),
        ImageTensor::zeros(oh, ow, channels),
        ImageTensor::zeros(oh, ow, channels),
        ImageTensor::zeros(oh, ow, channels),
    ];
    for c in 0..channels {
        let [a, v, h, d] = &mut bands;
        analysis_plane(
            x.channel(c),
            height,
            width,
            a.channel_mut(c),
            v.channel_mut(c),
            h.channel_mut(c),
            d.channel_mut(c),
        );
    }
    let [a, v, h, d] = bands;
    Ok((a, v, h, d))
}

/// One synthesis level, the exact inverse of [`dwt2`].
pub fn idwt2<T: Scalar>(
    a: &ImageTensor<T>,
    v: &ImageTensor<T>,
    h: &ImageTensor<T>,
    d: &ImageTensor<T>,
) -> Result<ImageTensor<T>, WaveletError> {
    a.check_same_dims(v)?;
    a.check_same_dims(h)?;
    a.check_same_dims(d)?;
    let (height, width, channels) = a.dims();
    let mut out = ImageTensor::zeros(2 * height, 2 * width, channels);
    for c in 0..channels {
        synthesis_plane(
            a.channel(c),
            v.channel(c),
            h.channel(c),
            d.channel(c),
            height,
            width,
            out.channel_mut(c),
        );
    }
    Ok(out)
}

pub fn check_divisible(height: usize, width: usize, levels: usize) -> Result<(), WaveletError> {
    if levels == 0 {
        return Err(WaveletError::NoLevels);
    }
    let step = 1usize << levels;
    if !height.is_multiple_of(step) || !width.is_multiple_of(step) {
        return Err(WaveletError::IndivisibleDimensions {
            height,
            width,
            levels,
        });
    }
    Ok(())
}

/// Applies [`dwt2`] to the approximation band `levels` times.
pub fn decompose<T: Scalar>(x: &ImageTensor<T>, levels: usize) -> Result<WaveletPyramid<T>, WaveletError> {
    check_divisible(x.height(), x.width(), levels)?;
    let mut approx = x.clone();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (a, v, h, d) = dwt2(&approx)?;
        details.push(SubbandTriple { v, h, d });
        approx = a;
    }
    Ok(WaveletPyramid { approx, details })
}

/// Synthesis from the coarsest level to the finest.
pub fn reconstruct<T: Scalar>(p: &WaveletPyramid<T>) -> Result<ImageTensor<T>, WaveletError> {
    if p.details.is_empty() {
        return Err(WaveletError::NoLevels);
    }
    let mut current = p.approx.clone();
    for triple in p.details.iter().rev() {
        current = idwt2(&current, &triple.v, &triple.h, &triple.d)?;
    }
    Ok(current)
}

/// Writes every band of `p` as a PNG under `dir` for inspection.
///
/// Each band is mapped affinely onto `[0, 1]` with `(v - lo) / (hi - lo)`;
/// the `lo`/`hi` pair per band is recorded in `dir/mapping.txt`.
pub fn export_bands<T: Scalar>(p: &WaveletPyramid<T>, dir: &Path) -> Result<(), WaveletError> {
    std::fs::create_dir_all(dir)?;
    let mut sidecar = String::from("# band lo hi (pixel = (value - lo) / (hi - lo))\n");
    let mut write_band = |name: String, band: &ImageTensor<T>| -> Result<(), WaveletError> {
        let lo = band.data().iter().copied().fold(T::infinity(), T::min);
        let hi = band.data().iter().copied().fold(T::neg_infinity(), T::max);
        let span = if hi > lo { hi - lo } else { T::one() };
        let mapped = band.map(|v| ((v - lo) / span).max(T::zero()).min(T::one()));
        save_image(&mapped, &dir.join(format!("{name}.png")))?;
        let _ = writeln!(sidecar, "{name} {lo:e} {hi:e}");
        Ok(())
    };
    write_band(format!("A{}", p.levels()), &p.approx)?;
    for (i, triple) in p.details.iter().enumerate() {
        let k = i + 1;
        write_band(format!("V{k}"), &triple.v)?;
        write_band(format!("H{k}"), &triple.h)?;
        write_band(format!("D{k}"), &triple.d)?;
    }
    std::fs::write(dir.join("mapping.txt"), sidecar)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(h, w, c, data).unwrap()
    }

    #[test]
    fn constant_image_has_no_detail() {
        let x = ImageTensor::<f64>::filled(4, 6, 3, 0.3);
        let (a, v, h, d) = dwt2(&x).unwrap();
        assert!(a.data().iter().all(|&s| (s - 0.6).abs() < 1e-15));
        for band in [v, h, d] {
            assert!(band.data().iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn single_block_example() {
        let x = ImageTensor::<f64>::new(2, 2, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let (a, v, h, d) = dwt2(&x).unwrap();
        for band in [&a, &v, &h, &d] {
            assert_eq!(band.data(), &[0.5]);
        }
        assert_eq!(idwt2(&a, &v, &h, &d).unwrap(), x);
        let p = decompose(&x, 1).unwrap();
        assert_eq!(reconstruct(&p).unwrap(), x);
    }

    #[test]
    fn energy_is_preserved() {
        let x = random_image(16, 12, 3, 3);
        let (a, v, h, d) = dwt2(&x).unwrap();
        let total = a.energy() + v.energy() + h.energy() + d.energy();
        assert!((total - x.energy()).abs() / x.energy() < 1e-6);
    }

    #[test]
    fn inverse_of_constant_and_zero_bands() {
        let c = 0.25;
        let a = ImageTensor::<f64>::filled(3, 3, 2, 2.0 * c);
        let z = ImageTensor::<f64>::zeros(3, 3, 2);
        let x = idwt2(&a, &z, &z, &z).unwrap();
        assert!(x.data().iter().all(|&s| (s - c).abs() < 1e-15));
        let x = idwt2(&z, &z, &z, &z).unwrap();
        assert!(x.data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn odd_and_indivisible_sizes_rejected() {
        let x = ImageTensor::<f64>::zeros(3, 4, 1);
        assert!(matches!(dwt2(&x), Err(WaveletError::OddDimensions { .. })));
        let x = ImageTensor::<f64>::zeros(12, 12, 1);
        assert!(matches!(
            decompose(&x, 3),
            Err(WaveletError::IndivisibleDimensions { .. })
        ));
        assert!(matches!(decompose(&x, 0), Err(WaveletError::NoLevels)));
    }

    #[test]
    fn mismatched_bands_rejected() {
        let a = ImageTensor::<f64>::zeros(2, 2, 1);
        let b = ImageTensor::<f64>::zeros(2, 3, 1);
        assert!(matches!(idwt2(&a, &a, &b, &a), Err(WaveletError::Shape(_))));
    }

    #[test]
    fn k2_shapes_on_256() {
        let x = random_image(256, 256, 3, 9).cast::<f32>();
        let p = decompose(&x, 2).unwrap();
        assert_eq!(p.approx.dims(), (64, 64, 3));
        assert_eq!(p.level(1).dims(), (128, 128, 3));
        assert_eq!(p.level(2).dims(), (64, 64, 3));
    }

    #[test]
    fn constant_pyramid() {
        let x = ImageTensor::<f64>::filled(16, 16, 3, 0.4);
        let p = decompose(&x, 3).unwrap();
        assert!(p.approx.data().iter().all(|&s| (s - 8.0 * 0.4).abs() < 1e-12));
        for t in &p.details {
            for band in t.bands() {
                assert!(band.data().iter().all(|&s| s.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn zeroed_details_give_block_means() {
        let x = random_image(16, 16, 2, 5);
        let mut p = decompose(&x, 2).unwrap();
        for t in p.details.iter_mut() {
            *t = t.zeroed();
        }
        let blurred = reconstruct(&p).unwrap();
        // Each 4x4 block of the synthesis is constant at A / 4.
        for c in 0..2 {
            for by in 0..4 {
                for bx in 0..4 {
                    let expected = p.approx.get(by, bx, c) / 4.0;
                    for y in 0..4 {
                        for x in 0..4 {
                            let got = blurred.get(4 * by + y, 4 * bx + x, c);
                            assert!((got - expected).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn export_writes_all_bands() {
        let dir = tempfile::tempdir().unwrap();
        let x = random_image(8, 8, 3, 1);
        let p = decompose(&x, 2).unwrap();
        export_bands(&p, dir.path()).unwrap();
        for name in ["A2", "V1", "H1", "D1", "V2", "H2", "D2"] {
            assert!(dir.path().join(format!("{name}.png")).exists());
        }
        let sidecar = std::fs::read_to_string(dir.path().join("mapping.txt")).unwrap();
        assert_eq!(sidecar.lines().count(), 8);
    }
}
