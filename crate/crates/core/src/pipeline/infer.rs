//! Enhancement of whole images and paired-dataset evaluation.

use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, PipelineError};
use crate::diffusion::{sample, Parameterized};
use crate::hfpm::enhance_details;
use crate::imaging::{psnr, ssim, Dataset};
use crate::tensor::ImageTensor;
use crate::wavelet::{decompose, reconstruct};
use crate::Scalar;

/// Mirror index for `i` in an axis of length `n` (edge pixel not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Pads bottom and right by reflection up to multiples of `divisor`.
pub fn reflect_pad<T: Scalar>(image: &ImageTensor<T>, divisor: usize) -> ImageTensor<T> {
    let (h, w, c) = image.dims();
    let ph = h.div_ceil(divisor) * divisor;
    let pw = w.div_ceil(divisor) * divisor;
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    ImageTensor::from_fn(ph, pw, c, |y, x, ch| image.get(reflect(y as isize, h), reflect(x as isize, w), ch))
}

/// Samples the coarsest approximation from noise conditioned on the input's,
/// enhances the detail bands and inverts the transform. Output matches the
/// input shape, with every value in `[0, 1]`.
pub fn enhance<T: Scalar, R: Rng + ?Sized>(
    image: &ImageTensor<T>,
    ckpt: &Checkpoint<T>,
    rng: &mut R,
) -> Result<ImageTensor<T>, PipelineError> {
    let cfg = &ckpt.config;
    let (h, w, c) = image.dims();
    if c != cfg.denoiser_config().channels {
        return Err(PipelineError::ShapeMismatch(format!(
            "{c}-channel image, model expects {}",
            cfg.denoiser_config().channels
        )));
    }
    let padded = reflect_pad(image, cfg.size_divisor());
    let mut pyramid = decompose(&padded, cfg.levels)?;
    let schedule = ckpt.schedule.build::<T>()?;
    let net = Parameterized {
        net: &ckpt.denoiser,
        schedule: &schedule,
        prediction: cfg.prediction,
    };
    pyramid.approx = sample(&net, &pyramid.approx, &schedule, cfg.sampling_steps, cfg.sampling_mode, rng)?;
    if cfg.use_hfpm {
        for level in cfg.hfpm_version.enhanced_levels(cfg.levels) {
            pyramid.details[level - 1] = enhance_details(&pyramid.details[level - 1], &ckpt.hfpm)?;
        }
    }
    let out = reconstruct(&pyramid)?.crop(0, 0, h, w);
    Ok(out.map(|v| if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub fingerprint: String,
    /// Seconds since the Unix epoch when the report was made.
    pub timestamp: u64,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<MetricsRow>, fingerprint: impl Into<String>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self {
            rows,
            mean_psnr,
            mean_ssim,
            fingerprint: fingerprint.into(),
            timestamp,
        }
    }

    /// Per-image rows then a `mean` row. Carries no timestamp, so equal
    /// results give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr,ssim\n");
        for r in &self.rows {
            writeln!(s, "{},{:.6},{:.6}", csv_field(&r.name), r.psnr, r.ssim).unwrap();
        }
        writeln!(s, "mean,{:.6},{:.6}", self.mean_psnr, self.mean_ssim).unwrap();
        s
    }

    /// Aligned table with the model fingerprint and timestamp in a header.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).chain([5]).max().unwrap();
        let mut s = String::new();
        writeln!(s, "model: {}", self.fingerprint).unwrap();
        writeln!(s, "timestamp: {}", self.timestamp).unwrap();
        writeln!(s, "{:<width$}  {:>10}  {:>8}", "image", "PSNR (dB)", "SSIM").unwrap();
        for r in &self.rows {
            writeln!(s, "{:<width$}  {:>10.4}  {:>8.4}", r.name, r.psnr, r.ssim).unwrap();
        }
        writeln!(s, "{:<width$}  {:>10.4}  {:>8.4}", "mean", self.mean_psnr, self.mean_ssim).unwrap();
        s
    }
}

/// Enhances every low-light image and scores it against its reference.
/// Image `i` samples from ChaCha8 stream `i` under `seed`, so results do not
/// depend on evaluation order.
pub fn evaluate<T: Scalar>(data: &Dataset<T>, ckpt: &Checkpoint<T>, seed: u64) -> Result<MetricsReport, PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(data.len());
    for (i, pair) in data.samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let out = enhance(&pair.low, ckpt, &mut rng)?;
        rows.push(MetricsRow {
            name: pair.identifier.clone(),
            psnr: psnr(&out, &pair.high)?.to_f64().unwrap_or(f64::NAN),
            ssim: ssim(&out, &pair.high)?.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(MetricsReport::from_rows(rows, ckpt.fingerprint()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::TrainConfig;

    fn tiny() -> TrainConfig {
        TrainConfig {
            patch_size: 16,
            base_channels: 4,
            denoiser_levels: 1,
            hfpm_features: 4,
            attention_window: 8,
            sampling_steps: 3,
            ..TrainConfig::smoke()
        }
    }

    fn image(h: usize, w: usize) -> ImageTensor<f32> {
        ImageTensor::from_fn(h, w, 3, |y, x, c| ((y * 5 + x * 3 + c * 7) % 17) as f32 / 16.0)
    }

    #[test]
    fn reflect_padding() {
        let img = ImageTensor::<f32>::from_fn(3, 2, 1, |y, x, _| (10 * y + x) as f32);
        let p = reflect_pad(&img, 4);
        assert_eq!(p.dims(), (4, 4, 1));
        assert_eq!(p.get(3, 0, 0), img.get(1, 0, 0));
        assert_eq!(p.get(0, 2, 0), img.get(0, 0, 0));
        assert_eq!(p.get(0, 3, 0), img.get(0, 1, 0));
        assert_eq!(p.crop(0, 0, 3, 2), img);
        assert_eq!(reflect_pad(&img, 1), img);
    }

    #[test]
    fn enhance_contract_and_determinism() {
        let ck = Checkpoint::<f32>::initial(&tiny()).unwrap();
        let img = image(13, 21);
        let a = enhance(&img, &ck, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = enhance(&img, &ck, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.dims(), img.dims());
        assert!(a.is_image_valued());
        assert_eq!(a, b);
        let gray = ImageTensor::<f32>::zeros(8, 8, 1);
        assert!(matches!(enhance(&gray, &ck, &mut ChaCha8Rng::seed_from_u64(1)), Err(PipelineError::ShapeMismatch(_))));
    }

    #[test]
    fn report_means_and_csv() {
        let rows = vec![
            MetricsRow { name: "a".into(), psnr: 20.0, ssim: 0.5 },
            MetricsRow { name: "b,c".into(), psnr: 30.0, ssim: 0.7 },
        ];
        let r = MetricsReport::from_rows(rows, "fp");
        assert_eq!(r.mean_psnr, 25.0);
        assert!((r.mean_ssim - 0.6).abs() < 1e-15);
        assert_eq!(r.to_csv(), "image,psnr,ssim\na,20.000000,0.500000\n\"b,c\",30.000000,0.700000\nmean,25.000000,0.600000\n");
        assert!(r.to_table().contains("fp"));
    }
}
