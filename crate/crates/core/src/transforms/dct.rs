use crate::error::{CsError, Result};
use crate::image::Image;
use rustdct::{DctPlanner, TransformType2And3};
use std::fmt;
use std::sync::Arc;

/// Separable orthonormal 2-D DCT-II plan for a fixed H×W grid.
///
/// Orthonormal scaling makes the inverse (a DCT-III) also the adjoint.
#[derive(Clone)]
pub struct Dct2d {
    height: usize,
    width: usize,
    rows: Arc<dyn TransformType2And3<f64>>,
    cols: Arc<dyn TransformType2And3<f64>>,
}

impl fmt::Debug for Dct2d {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dct2d")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl Dct2d {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CsError::InvalidArgument(format!(
                "DCT dimensions must be positive, got {height}x{width}"
            )));
        }
        let mut planner = DctPlanner::new();
        Ok(Self {
            height,
            width,
            rows: planner.plan_dct2(width),
            cols: planner.plan_dct2(height),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// In-place forward transform of a row-major buffer of length H·W.
    pub fn forward_in_place(&self, data: &mut [f64]) {
        assert_eq!(data.len(), self.height * self.width);
        let mut scratch = vec![0.0; data.len()];
        self.pass(data, &mut scratch, true);
    }

    /// In-place inverse transform of a row-major buffer of length H·W.
    pub fn inverse_in_place(&self, data: &mut [f64]) {
        assert_eq!(data.len(), self.height * self.width);
        let mut scratch = vec![0.0; data.len()];
        self.pass(data, &mut scratch, false);
    }

    pub fn forward(&self, img: &Image) -> Result<Image> {
        self.check(img)?;
        let mut data = img.as_slice().to_vec();
        self.forward_in_place(&mut data);
        Image::new(self.height, self.width, data)
    }

    pub fn inverse(&self, coeffs: &Image) -> Result<Image> {
        self.check(coeffs)?;
        let mut data = coeffs.as_slice().to_vec();
        self.inverse_in_place(&mut data);
        Image::new(self.height, self.width, data)
    }

    fn check(&self, img: &Image) -> Result<()> {
        if img.height() != self.height || img.width() != self.width {
            return Err(CsError::InvalidArgument(format!(
                "DCT plan is {}x{}, image is {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    fn pass(&self, data: &mut [f64], scratch: &mut [f64], forward: bool) {
        let (h, w) = (self.height, self.width);
        for row in data.chunks_exact_mut(w) {
            transform_1d(self.rows.as_ref(), row, forward);
        }
        transpose(data, scratch, h, w);
        for col in scratch.chunks_exact_mut(h) {
            transform_1d(self.cols.as_ref(), col, forward);
        }
        transpose(scratch, data, w, h);
    }
}

fn transform_1d(plan: &dyn TransformType2And3<f64>, buf: &mut [f64], forward: bool) {
    let n = buf.len();
    let dc = (1.0 / n as f64).sqrt();
    let ac = (2.0 / n as f64).sqrt();
    if forward {
        plan.process_dct2(buf);
        buf[0] *= dc;
        for v in &mut buf[1..] {
            *v *= ac;
        }
    } else {
        // DCT-III computes x_j = X_0/2 + sum_k X_k cos(..)
        buf[0] *= 2.0 * dc;
        for v in &mut buf[1..] {
            *v *= ac;
        }
        plan.process_dct3(buf);
    }
}

fn transpose(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Orthonormal 2-D DCT-II coefficients of `img`.
pub fn dct2_forward(img: &Image) -> Result<Image> {
    Dct2d::new(img.height(), img.width())?.forward(img)
}

/// Inverse (and adjoint) of [`dct2_forward`].
pub fn dct2_inverse(coeffs: &Image) -> Result<Image> {
    Dct2d::new(coeffs.height(), coeffs.width())?.inverse(coeffs)
}
