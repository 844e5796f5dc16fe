//! Grayscale image container and 8-bit file IO.

use crate::error::{check_len, CsError, Result};
use std::path::Path;

/// Real-valued H×W grid stored row-major. Nominal range is [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CsError::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        check_len(height * width, data.len(), "image data")?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CsError::NonFinite(format!("image pixel {i}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut img = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                img.data[r * width + c] = f(r, c);
            }
        }
        img
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Center crop to `height`×`width`.
    pub fn center_crop(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || height > self.height || width > self.width {
            return Err(CsError::InvalidArgument(format!(
                "cannot crop {}x{} image to {height}x{width}",
                self.height, self.width
            )));
        }
        let r0 = (self.height - height) / 2;
        let c0 = (self.width - width) / 2;
        Ok(Image::from_fn(height, width, |r, c| self.get(r0 + r, c0 + c)))
    }

    /// Loads an 8- or 16-bit image as grayscale in [0, 1]. Color inputs are
    /// reduced to luma with the BT.601 weights (the Y of YCbCr).
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let dynimg = image::open(path.as_ref())?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let data: Vec<f64> = match dynimg {
            image::DynamicImage::ImageLuma8(buf) => {
                buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
            }
            image::DynamicImage::ImageLuma16(buf) => {
                buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
            }
            other => {
                let rgb = other.to_rgb8();
                rgb.pixels()
                    .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
                    .collect()
            }
        };
        Image::new(h, w, data)
    }

    /// 8-bit quantization: clamp to [0,1], scale by 255, round half to even.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8)
            .collect()
    }

    /// Saves as 8-bit grayscale; the format follows the file extension
    /// (`.png`, or `.pgm` for binary PGM).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_gray8(path.as_ref(), self.width, self.height, &self.to_u8())
    }
}

pub(crate) fn save_gray8(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("pgm") => {
            // written by hand so the file is byte-stable across image crate versions
            let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
            out.extend_from_slice(pixels);
            std::fs::write(path, out)?;
        }
        _ => {
            image::save_buffer(
                path,
                pixels,
                width as u32,
                height as u32,
                image::ExtendedColorType::L8,
            )?;
        }
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
