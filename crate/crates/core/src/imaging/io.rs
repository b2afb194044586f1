use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use super::ImagingError;
use crate::tensor::ImageTensor;
use crate::Scalar;

/// Reads an 8-bit PNG or JPEG. Grayscale files give one channel, everything
/// else is converted to RGB (alpha dropped). Samples are `code / 255`.
pub fn load_image<T: Scalar>(path: &Path) -> Result<ImageTensor<T>, ImagingError> {
    if !path.is_file() {
        return Err(ImagingError::MissingFile(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        Some(other) => return Err(ImagingError::UnsupportedFormat(format!("{other:?}"))),
        None => return Err(ImagingError::UnsupportedFormat("unrecognized".into())),
    }
    let decoded = reader.decode().map_err(|e| ImagingError::CorruptData {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let max_code = T::lit(255.0);
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(buf) => {
            let data = buf.as_raw().iter().map(|&v| T::from_u8(v).unwrap() / max_code).collect();
            Ok(ImageTensor::new(height, width, 1, data)?)
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) | DynamicImage::ImageLumaA8(_) => {
            let rgb = decoded.to_rgb8();
            let raw = rgb.as_raw();
            let plane = height * width;
            let mut data = vec![T::zero(); 3 * plane];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = T::from_u8(px[c]).unwrap() / max_code;
                }
            }
            Ok(ImageTensor::new(height, width, 3, data)?)
        }
        other => Err(ImagingError::UnsupportedFormat(format!(
            "{:?} samples (only 8-bit images are supported)",
            other.color()
        ))),
    }
}

#[inline]
fn quantize<T: Scalar>(v: T) -> u8 {
    // Round half up, then clamp.
    let q = (v * T::lit(255.0) + T::lit(0.5)).floor();
    q.max(T::zero()).min(T::lit(255.0)).to_u8().unwrap_or(0)
}

/// Writes an 8-bit PNG with `floor(v·255 + 0.5)` quantization.
///
/// Fails without touching the filesystem when any value lies outside `[0, 1]`.
pub fn save_image<T: Scalar>(img: &ImageTensor<T>, path: &Path) -> Result<(), ImagingError> {
    if !img.is_image_valued() {
        return Err(ImagingError::NotImageValued);
    }
    let (height, width, channels) = img.dims();
    let plane = height * width;
    let failure = |e: image::ImageError| ImagingError::WriteFailure {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    match channels {
        1 => {
            let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
            let buf = image::GrayImage::from_raw(width as u32, height as u32, raw).expect("buffer size");
            buf.save_with_format(path, ImageFormat::Png).map_err(failure)
        }
        3 => {
            let data = img.data();
            let mut raw = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                for c in 0..3 {
                    raw.push(quantize(data[c * plane + i]));
                }
            }
            let buf = image::RgbImage::from_raw(width as u32, height as u32, raw).expect("buffer size");
            buf.save_with_format(path, ImageFormat::Png).map_err(failure)
        }
        n => Err(ImagingError::UnsupportedChannels(n)),
    }
}
