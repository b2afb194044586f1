use std::path::{Path, PathBuf};

use rand::Rng;

use super::{load_image, ImagingError};
use crate::tensor::ImageTensor;
use crate::Scalar;

/// A degraded image and its reference, identical in shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample<T> {
    pub low: ImageTensor<T>,
    pub high: ImageTensor<T>,
    pub identifier: String,
}

impl<T: Scalar> PairedSample<T> {
    pub fn new(low: ImageTensor<T>, high: ImageTensor<T>, identifier: impl Into<String>) -> Result<Self, ImagingError> {
        let identifier = identifier.into();
        if !low.same_dims(&high) {
            return Err(ImagingError::PairShape {
                name: identifier,
                low: low.dims(),
                high: high.dims(),
            });
        }
        Ok(Self { low, high, identifier })
    }
}

/// Pairs matched by file name under `<root>/low` and `<root>/high`.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub samples: Vec<PairedSample<T>>,
    pub root: PathBuf,
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

impl<T: Scalar> Dataset<T> {
    /// Loads every pair, sorted by file name. A file in `low/` without a
    /// same-named file in `high/` is an error.
    pub fn open(root: &Path) -> Result<Self, ImagingError> {
        let low_dir = root.join("low");
        let high_dir = root.join("high");
        if !low_dir.is_dir() {
            return Err(ImagingError::MissingFile(low_dir));
        }
        let mut names: Vec<String> = std::fs::read_dir(&low_dir)?
            .filter_map(|entry| entry.ok())
            .map(|entry| entry.path())
            .filter(|p| p.is_file() && is_image_file(p))
            .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(ImagingError::EmptyDataset(root.to_path_buf()));
        }
        let mut samples = Vec::with_capacity(names.len());
        for name in names {
            let high_path = high_dir.join(&name);
            if !high_path.is_file() {
                return Err(ImagingError::MissingPair {
                    name,
                    dir: high_dir.clone(),
                });
            }
            let low = load_image(&low_dir.join(&name))?;
            let high = load_image(&high_path)?;
            let identifier = Path::new(&name)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(&name)
                .to_string();
            samples.push(PairedSample::new(low, high, identifier)?);
        }
        Ok(Self {
            samples,
            root: root.to_path_buf(),
        })
    }

    pub fn from_samples(samples: Vec<PairedSample<T>>) -> Self {
        Self {
            samples,
            root: PathBuf::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draws a crop origin uniformly over all valid offsets.
pub fn patch_window<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    size: usize,
    rng: &mut R,
) -> Result<(usize, usize), ImagingError> {
    if size == 0 || size > height || size > width {
        return Err(ImagingError::PatchTooLarge { size, height, width });
    }
    let y0 = rng.random_range(0..=height - size);
    let x0 = rng.random_range(0..=width - size);
    Ok((y0, x0))
}

/// Crops the same `size×size` window from both images of a pair.
///
/// `divisor` is the spatial factor the patch must honor (`2^K` for a
/// `K`-level pyramid). With `flip` set, a fair coin decides a horizontal
/// mirror applied to both crops.
pub fn sample_patch_pair<T: Scalar, R: Rng + ?Sized>(
    sample: &PairedSample<T>,
    size: usize,
    divisor: usize,
    flip: bool,
    rng: &mut R,
) -> Result<PairedSample<T>, ImagingError> {
    if divisor == 0 || !size.is_multiple_of(divisor) {
        return Err(ImagingError::PatchIndivisible { size, divisor });
    }
    let (height, width, _) = sample.low.dims();
    let (y0, x0) = patch_window(height, width, size, rng)?;
    let mut low = sample.low.crop(y0, x0, size, size);
    let mut high = sample.high.crop(y0, x0, size, size);
    if flip && rng.random_bool(0.5) {
        low = low.flip_horizontal();
        high = high.flip_horizontal();
    }
    Ok(PairedSample {
        low,
        high,
        identifier: sample.identifier.clone(),
    })
}
