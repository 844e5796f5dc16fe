//! Operator diagnostics and image quality metrics.

use crate::error::{CsError, Result};
use crate::extraction::ExtractedSystem;
use crate::image::{norm2, Image};
use crate::operator::LinearOperator;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Floor applied to `|A_i x_j|` before taking the log.
pub const POWER_FLOOR: f64 = 1e-300;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `δ = max_i |‖Ax_i‖²/‖x_i‖² − 1|` over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RipReport {
    pub delta: f64,
    pub ratios: Vec<f64>,
    pub corpus_size: usize,
    pub skipped: usize,
}

pub fn rip_constant(op: &dyn LinearOperator, corpus: &[Image]) -> Result<RipReport> {
    if corpus.is_empty() {
        return Err(CsError::InvalidArgument("empty corpus".into()));
    }
    let ratios: Vec<Option<f64>> = corpus
        .par_iter()
        .map(|x| {
            let nx = x.norm();
            if nx == 0.0 {
                return Ok(None);
            }
            let ax = op.apply(x.as_slice())?;
            Ok(Some((norm2(&ax) / nx).powi(2)))
        })
        .collect::<Result<_>>()?;
    let skipped = ratios.iter().filter(|r| r.is_none()).count();
    if skipped > 0 {
        log::warn!("skipped {skipped} zero-norm images");
    }
    let ratios: Vec<f64> = ratios.into_iter().flatten().collect();
    if ratios.is_empty() {
        return Err(CsError::InvalidArgument(
            "every corpus image has zero norm".into(),
        ));
    }
    let delta = ratios.iter().fold(0.0f64, |m, r| m.max((r - 1.0).abs()));
    Ok(RipReport {
        delta,
        corpus_size: corpus.len(),
        skipped,
        ratios,
    })
}

/// Per-row mean of `ln|A_i x_j|` over the corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerCurve {
    pub values: Vec<f64>,
    /// Rows where at least one measurement hit [`POWER_FLOOR`].
    pub floored: Vec<bool>,
}

impl PowerCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sample standard deviation of the row values over `rows`.
    pub fn std_dev(&self, rows: std::ops::Range<usize>) -> f64 {
        let v = &self.values[rows];
        if v.len() < 2 {
            return 0.0;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    }

    /// `max − min` of the row values over `rows`.
    pub fn range(&self, rows: std::ops::Range<usize>) -> f64 {
        let v = &self.values[rows];
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        if v.is_empty() {
            0.0
        } else {
            hi - lo
        }
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "row,mean_log_abs,floored")?;
        for (i, (v, f)) in self.values.iter().zip(&self.floored).enumerate() {
            writeln!(w, "{i},{v:e},{}", *f as u8)?;
        }
        Ok(())
    }
}

pub fn measurement_power(op: &dyn LinearOperator, corpus: &[Image]) -> Result<PowerCurve> {
    if corpus.is_empty() {
        return Err(CsError::InvalidArgument("empty corpus".into()));
    }
    let m = op.output_dim();
    let per_image: Vec<Vec<f64>> = corpus
        .par_iter()
        .map(|x| op.apply(x.as_slice()))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; m];
    let mut floored = vec![false; m];
    for y in &per_image {
        for i in 0..m {
            let a = y[i].abs();
            if a < POWER_FLOOR {
                floored[i] = true;
            }
            values[i] += a.max(POWER_FLOOR).ln();
        }
    }
    let j = corpus.len() as f64;
    values.iter_mut().for_each(|v| *v /= j);
    Ok(PowerCurve { values, floored })
}

/// `∂y_i/∂x` of a linear system: row `i` of `Φ` as an H×W image.
pub fn erf_row(sys: &ExtractedSystem, i: usize, height: usize, width: usize) -> Result<Image> {
    if i >= sys.rows() {
        return Err(CsError::InvalidArgument(format!(
            "row {i} out of range for {} measurements",
            sys.rows()
        )));
    }
    if height * width != sys.cols() {
        return Err(CsError::DimensionMismatch {
            expected: sys.cols(),
            got: height * width,
            context: "receptive field shape",
        });
    }
    Image::new(height, width, sys.phi().row(i).to_vec())
}

/// Writes `img` as 8-bit grayscale with `v ↦ (v/s + 1)/2`, `s = max|v|`, so
/// zero maps to mid-gray. Returns `s` (1 for an all-zero image).
pub fn save_symmetric(img: &Image, path: impl AsRef<Path>) -> Result<f64> {
    let peak = img.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { peak } else { 1.0 };
    img.map(|v| 0.5 * (v / scale + 1.0)).save(path)?;
    Ok(scale)
}

/// Bounding box `(row_span, col_span)` of the nonzero entries, as counts of
/// distinct rows and columns touched.
pub fn support_extent(img: &Image, tol: f64) -> (usize, usize) {
    let mut rows = vec![false; img.height()];
    let mut cols = vec![false; img.width()];
    for r in 0..img.height() {
        for c in 0..img.width() {
            if img.get(r, c).abs() > tol {
                rows[r] = true;
                cols[c] = true;
            }
        }
    }
    (
        rows.iter().filter(|&&b| b).count(),
        cols.iter().filter(|&&b| b).count(),
    )
}

fn check_pair(x: &Image, y: &Image) -> Result<()> {
    if !x.same_shape(y) {
        return Err(CsError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
            context: "image pair",
        });
    }
    Ok(())
}

/// `10·log10(1/MSE)` for unit dynamic range; identical images give `+∞`.
pub fn psnr(x: &Image, xhat: &Image) -> Result<f64> {
    check_pair(x, xhat)?;
    let mse = x
        .as_slice()
        .iter()
        .zip(xhat.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Mean SSIM over every 8×8 window (stride 1), uniform weights, population
/// statistics, `C1 = 0.01²`, `C2 = 0.03²`.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    check_pair(x, y)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CsError::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = SSIM_WINDOW;
    let area = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - k {
        for c0 in 0..=w - k {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + k {
                for c in c0..c0 + k {
                    let (a, b) = (x.get(r, c), y.get(r, c));
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / area, sy / area);
            let vx = sxx / area - mx * mx;
            let vy = syy / area - my * my;
            let cxy = sxy / area - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["pgm", "png", "ppm", "pnm"];

/// Loads every image in `dir` (sorted by file name) and center-crops it to
/// H×W. Files that are too small are skipped with a warning.
pub fn load_corpus(dir: impl AsRef<Path>, height: usize, width: usize) -> Result<Vec<(PathBuf, Image)>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let img = Image::load(&p)?;
        if img.height() < height || img.width() < width {
            log::warn!("skipping {}: smaller than {height}x{width}", p.display());
            continue;
        }
        out.push((p, img.center_crop(height, width)?));
    }
    if out.is_empty() {
        return Err(CsError::InvalidArgument(format!(
            "no usable {height}x{width} images in {}",
            dir.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coso::{build_coso, CosoConfig, Variant};
    use crate::extraction::{extract, ExtractOptions};
    use crate::operator::{DenseMatrix, Identity, Scaled};
    use crate::rng::SeededRng;
    use std::sync::Arc;

    fn corpus64() -> Vec<Image> {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/natural64");
        load_corpus(dir, 64, 64)
            .unwrap()
            .into_iter()
            .map(|(_, i)| i)
            .collect()
    }

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = SeededRng::new(seed);
        Image::from_fn(h, w, |_, _| rng.uniform())
    }

    #[test]
    fn rip_examples() {
        let corpus: Vec<Image> = (0..5).map(|s| noise(8, 8, s)).collect();
        assert_eq!(rip_constant(&Identity::new(64), &corpus).unwrap().delta, 0.0);
        let half = Scaled::new(Arc::new(Identity::new(64)), 0.5f64.sqrt());
        assert!((rip_constant(&half, &corpus).unwrap().delta - 0.5).abs() < 1e-15);
        assert!(rip_constant(&half, &[]).is_err());

        let mut with_zero = corpus.clone();
        with_zero.push(Image::zeros(8, 8));
        let r = rip_constant(&half, &with_zero).unwrap();
        assert_eq!((r.skipped, r.ratios.len(), r.corpus_size), (1, 5, 6));
        assert!(rip_constant(&half, &[Image::zeros(8, 8)]).is_err());
    }

    #[test]
    fn complete_dct_is_isometric() {
        let op = build_coso(&CosoConfig::new(64, 64, 1.0, Variant::DctOnly), None).unwrap();
        assert!(rip_constant(&op, &corpus64()).unwrap().delta <= 1e-10);
    }

    #[test]
    fn power_examples() {
        let ones = Image::filled(4, 4, 1.0);
        let avg = DenseMatrix::new(2, 16, [vec![1.0 / 16.0; 16], vec![0.0; 16]].concat()).unwrap();
        let p = measurement_power(&avg, &[ones]).unwrap();
        assert!(p.values[0].abs() < 1e-15);
        assert!(!p.floored[0]);
        assert!(p.floored[1]);
        assert_eq!(p.values[1], POWER_FLOOR.ln());
        assert!(measurement_power(&avg, &[]).is_err());
    }

    #[test]
    fn dct_power_falls_off() {
        let op = build_coso(&CosoConfig::new(64, 64, 1.0, Variant::DctOnly), None).unwrap();
        let p = measurement_power(&op, &corpus64()).unwrap();
        let p90 = (0.9 * (p.len() - 1) as f64).round() as usize;
        assert!(p.values[0] > p.values[p90]);
    }

    #[test]
    fn erf_examples() {
        let id = ExtractedSystem::new(DenseMatrix::identity(16), vec![0.0; 16], 4, 4).unwrap();
        let e = erf_row(&id, 5, 4, 4).unwrap();
        assert_eq!(e.get(1, 1), 1.0);
        assert_eq!(e.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(erf_row(&id, 16, 4, 4).is_err());
        assert!(erf_row(&id, 0, 2, 4).is_err());

        let dct = build_coso(&CosoConfig::new(32, 32, 0.1, Variant::DctOnly), None).unwrap();
        let sys = extract(&dct, 32, 32, ExtractOptions::default()).unwrap();
        let dc = erf_row(&sys, 0, 32, 32).unwrap();
        assert!(dc.as_slice().iter().all(|v| (v - 1.0 / 32.0).abs() < 1e-12));
    }

    #[test]
    fn erf_support_structure() {
        let block = build_coso(&CosoConfig::new(64, 64, 0.1, Variant::BlockGaussian), None).unwrap();
        let sys = extract(&block, 64, 64, ExtractOptions::default()).unwrap();
        for i in [0, 100, sys.rows() - 1] {
            let (rs, cs) = support_extent(&erf_row(&sys, i, 64, 64).unwrap(), 0.0);
            assert!(rs <= 32 && cs <= 32);
        }
        let scr = build_coso(&CosoConfig::new(64, 64, 0.1, Variant::GBranchScrambled), None).unwrap();
        let sys = extract(&scr, 64, 64, ExtractOptions::default()).unwrap();
        let (rs, cs) = support_extent(&erf_row(&sys, 0, 64, 64).unwrap(), 0.0);
        assert!(rs >= 58 && cs >= 58, "{rs} {cs}");
    }

    #[test]
    fn erf_equals_adjoint_row() {
        let op = build_coso(&CosoConfig::new(32, 32, 0.2, Variant::DualNoFilter), None).unwrap();
        let sys = extract(&op, 32, 32, ExtractOptions::default()).unwrap();
        let mut e = vec![0.0; op.output_dim()];
        for i in [0, 7, op.output_dim() - 1] {
            e[i] = 1.0;
            let adj = op.apply_adjoint(&e).unwrap();
            e[i] = 0.0;
            for (a, b) in erf_row(&sys, i, 32, 32).unwrap().as_slice().iter().zip(&adj) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn psnr_examples() {
        let x = noise(8, 8, 1);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        let a = Image::filled(4, 4, 0.0);
        assert!((psnr(&a, &Image::filled(4, 4, 0.1)).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&a, &Image::filled(4, 4, 0.01)).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::zeros(2, 8)).is_err());
    }

    #[test]
    fn psnr_drops_with_noise() {
        let x = noise(32, 32, 2);
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.05, 0.2] {
            let mut rng = SeededRng::new(3);
            let noisy = Image::from_fn(32, 32, |r, c| x.get(r, c) + sigma * rng.normal());
            let p = psnr(&x, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_examples() {
        let x = noise(16, 16, 4);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = noise(16, 16, 5);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-15);

        let c = Image::filled(8, 8, 0.25);
        let inv = c.map(|v| 1.0 - v);
        let want = (2.0 * 0.25 * 0.75 + SSIM_C1) / (0.25f64.powi(2) + 0.75f64.powi(2) + SSIM_C1);
        assert!((ssim(&c, &inv).unwrap() - want).abs() < 1e-12);
        assert!(ssim(&Image::zeros(4, 4), &Image::zeros(4, 4)).is_err());
    }

    #[test]
    fn ssim_matches_direct_formula() {
        let x = noise(9, 10, 6);
        let y = x.map(|v| 0.7 * v + 0.1);
        // direct evaluation with explicit mean/var/cov per window
        let mut acc = Vec::new();
        for r0 in 0..=1 {
            for c0 in 0..=2 {
                let mut a = Vec::new();
                let mut b = Vec::new();
                for r in r0..r0 + 8 {
                    for c in c0..c0 + 8 {
                        a.push(x.get(r, c));
                        b.push(y.get(r, c));
                    }
                }
                let mean = |v: &[f64]| v.iter().sum::<f64>() / 64.0;
                let (ma, mb) = (mean(&a), mean(&b));
                let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 64.0;
                let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 64.0;
                let cab = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / 64.0;
                acc.push(
                    (2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2)
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2)),
                );
            }
        }
        let want = acc.iter().sum::<f64>() / acc.len() as f64;
        assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn corpus_loader() {
        let corpus = corpus64();
        assert!(corpus.len() >= 20);
        assert!(corpus.iter().all(|i| i.height() == 64 && i.width() == 64));
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/natural64");
        let small = load_corpus(&dir, 32, 32).unwrap();
        assert_eq!(small.len(), corpus.len());
        assert!(load_corpus(&dir, 65, 64).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(load_corpus(empty.path(), 8, 8).is_err());
    }

    #[test]
    fn symmetric_export() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(1, 3, vec![-2.0, 0.0, 2.0]).unwrap();
        let p = dir.path().join("erf.pgm");
        assert_eq!(save_symmetric(&img, &p).unwrap(), 2.0);
        let back = Image::load(&p).unwrap();
        assert_eq!(back.to_u8(), vec![0, 128, 255]);
        assert_eq!(save_symmetric(&Image::zeros(2, 2), &p).unwrap(), 1.0);
    }
}
