//! Pixel preprocessing shared by both towers.

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::Array3;

use crate::{ClipError, Real, Result};

/// Per-channel mean of the CLIP training distribution.
pub const CHANNEL_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
/// Per-channel standard deviation of the CLIP training distribution.
#[allow(clippy::excessive_precision)]
pub const CHANNEL_STD: [f32; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Resizes the whole image to `resolution x resolution` (bicubic, no crop)
/// and normalizes it into a `(3, r, r)` tensor.
///
/// Square inputs give the same result as the checkpoints' resize plus
/// centre-crop pipeline. Wider inputs are squeezed rather than cropped, which
/// keeps both halves of a side-by-side composite in view.
pub fn preprocess<F: Real>(image: &RgbImage, resolution: usize) -> Result<Array3<F>> {
    if image.width() == 0 || image.height() == 0 {
        return Err(ClipError::EmptyImage);
    }
    let side = resolution as u32;
    let resized;
    let source = if image.width() == side && image.height() == side {
        image
    } else {
        resized = imageops::resize(image, side, side, FilterType::CatmullRom);
        &resized
    };
    let mut out = Array3::zeros((3, resolution, resolution));
    for (x, y, px) in source.enumerate_pixels() {
        for c in 0..3 {
            let v = (px.0[c] as f32 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
            out[[c, y as usize, x as usize]] = F::of_f32(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn white_pixels_normalize_per_channel() {
        let img = RgbImage::from_pixel(4, 4, Rgb([255, 255, 255]));
        let t: Array3<f32> = preprocess(&img, 4).unwrap();
        for c in 0..3 {
            let expected = (1.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
            assert!((t[[c, 2, 1]] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn wide_images_are_squeezed_not_cropped() {
        // left half black, right half white; both must survive resizing
        let img = RgbImage::from_fn(64, 32, |x, _| if x < 32 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) });
        let t: Array3<f32> = preprocess(&img, 16).unwrap();
        assert!(t[[0, 8, 1]] < 0.0);
        assert!(t[[0, 8, 14]] > 0.0);
    }

    #[test]
    fn empty_image_is_rejected() {
        let img = RgbImage::new(0, 3);
        assert!(matches!(preprocess::<f32>(&img, 8), Err(ClipError::EmptyImage)));
    }
}
