//! 8-bit RGB images, decoding, bilinear resizing and cropping.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar (CHW) 3-channel 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

pub const CHANNELS: usize = 3;

impl RawImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::Dataset(format!(
                "{height}x{width} image needs {} bytes, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(RawImage { height, width, data })
    }

    /// Decodes any supported raster format; grayscale and alpha are
    /// converted to RGB.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0u8; CHANNELS * h * w];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..CHANNELS {
                data[c * h * w + i] = px.0[c];
            }
        }
        RawImage::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            for c in 0..CHANNELS {
                px.0[c] = self.data[c * h * w + i];
            }
        }
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// `[3,H,W]` tensor with values in `[0,1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| f64::from(v) / 255.0).collect();
        Tensor::from_parts(vec![CHANNELS, self.height, self.width], data)
    }

    /// Quantizes a `[3,H,W]` tensor in `[0,1]` (values are clamped).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != CHANNELS {
            return Err(Error::Dataset(format!("expected [3,H,W], got {s:?}")));
        }
        let data = t
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RawImage::new(s[1], s[2], data)
    }
}

/// Target size so that the short side becomes `short`, keeping aspect ratio.
pub fn short_side_size(height: usize, width: usize, short: usize) -> (usize, usize) {
    let scale = |long: usize, s: usize| ((long as f64) * short as f64 / s as f64).round().max(1.0) as usize;
    if height <= width {
        (short, scale(width, height))
    } else {
        (scale(height, width), short)
    }
}

/// Bilinear sample with half-pixel centres, clamped at the border.
#[inline]
pub(crate) fn sample_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (dy, dx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - dx) + plane[y0 * w + x1] * dx;
    let bottom = plane[y1 * w + x0] * (1.0 - dx) + plane[y1 * w + x1] * dx;
    top * (1.0 - dy) + bottom * dy
}

/// Bilinear resize of a `[C,H,W]` tensor. Resizing to the same size is the
/// identity.
pub fn resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Dataset(format!("cannot resize {s:?} to {out_h}x{out_w}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in img.data().chunks(h * w) {
        for i in 0..out_h {
            let y = (i as f64 + 0.5) * sy - 0.5;
            for j in 0..out_w {
                let x = (j as f64 + 0.5) * sx - 0.5;
                out.push(sample_bilinear(plane, h, w, y, x));
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

/// Copies the `size×size` window at `(top, left)`.
pub fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || top + size > s[1] || left + size > s[2] || size == 0 {
        return Err(Error::Dataset(format!(
            "crop {size}x{size} at ({top},{left}) outside {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * size * size);
    for plane in img.data().chunks(h * w) {
        for i in top..top + size {
            out.extend_from_slice(&plane[i * w + left..i * w + left + size]);
        }
    }
    Ok(Tensor::from_parts(vec![c, size, size], out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Offset drawn uniformly from the caller's rng.
    Random,
    Center,
}

/// Resizes so the short side is `resize_to`, then takes a `crop×crop` window.
pub fn resize_and_crop<R: Rng + ?Sized>(
    img: &Tensor,
    resize_to: usize,
    crop_size: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<Tensor> {
    if crop_size == 0 || crop_size > resize_to {
        return Err(Error::Dataset(format!(
            "crop {crop_size} must be in 1..={resize_to}"
        )));
    }
    let s = img.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::Dataset(format!("expected non-empty [C,H,W], got {s:?}")));
    }
    let (h, w) = short_side_size(s[1], s[2], resize_to);
    let resized = resize(img, h, w)?;
    let (top, left) = match mode {
        CropMode::Center => ((h - crop_size) / 2, (w - crop_size) / 2),
        CropMode::Random => (
            rng.random_range(0..=h - crop_size),
            rng.random_range(0..=w - crop_size),
        ),
    };
    crop(&resized, top, left, crop_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor {
        let data = (0..3 * h * w).map(|i| i as f64).collect();
        Tensor::new(&[3, h, w], data).unwrap()
    }

    #[test]
    fn center_crop_of_256() {
        let img = ramp(256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = resize_and_crop(&img, 256, 224, CropMode::Center, &mut rng).unwrap();
        assert_eq!(out.shape(), &[3, 224, 224]);
        assert_eq!(out.at(&[0, 0, 0]).unwrap(), img.at(&[0, 16, 16]).unwrap());
        assert_eq!(out.at(&[2, 223, 223]).unwrap(), img.at(&[2, 239, 239]).unwrap());
    }

    #[test]
    fn halving_resize_averages_pairs() {
        let img = ramp(512, 512);
        let out = resize(&img, 256, 256).unwrap();
        // Sample point for output (i,j) lands at source (2i+0.5, 2j+0.5).
        let expect = |c: usize, i: usize, j: usize| {
            let y = 2.0 * i as f64 + 0.5;
            let x = 2.0 * j as f64 + 0.5;
            (c * 512 * 512) as f64 + y * 512.0 + x
        };
        for (c, i, j) in [(0, 0, 0), (1, 100, 37), (2, 255, 255)] {
            assert!((out.at(&[c, i, j]).unwrap() - expect(c, i, j)).abs() < 1e-9);
        }
    }

    #[test]
    fn short_side_scaling() {
        assert_eq!(short_side_size(512, 512, 256), (256, 256));
        assert_eq!(short_side_size(300, 600, 256), (256, 512));
        assert_eq!(short_side_size(600, 300, 256), (512, 256));
    }

    #[test]
    fn random_crop_is_seeded() {
        let img = ramp(40, 50);
        let a = resize_and_crop(&img, 32, 24, CropMode::Random, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = resize_and_crop(&img, 32, 24, CropMode::Random, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(resize_and_crop(&img, 24, 32, CropMode::Center, &mut ChaCha8Rng::seed_from_u64(7)).is_err());
    }

    #[test]
    fn raw_round_trip() {
        let raw = RawImage::new(2, 2, (0..12).map(|v| v * 20).collect()).unwrap();
        assert_eq!(RawImage::from_tensor(&raw.to_tensor()).unwrap(), raw);
        assert!(RawImage::new(2, 2, vec![0; 11]).is_err());
    }
}
