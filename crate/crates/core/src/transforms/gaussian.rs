use crate::error::{CsError, Result};
use crate::rng::SeededRng;

/// Dense row-major Gaussian matrix, optionally with orthonormal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMatrix {
    rows: usize,
    cols: usize,
    seed: u64,
    orthonormalized: bool,
    data: Vec<f64>,
}

impl GaussianMatrix {
    /// Wraps explicit row-major data (seed 0, not flagged orthonormal).
    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 || data.len() != rows * cols {
            return Err(CsError::InvalidArgument(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            seed: 0,
            orthonormalized: false,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_orthonormalized(&self) -> bool {
        self.orthonormalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// First `m` rows as a new matrix.
    pub fn crop(&self, m: usize) -> GaussianMatrix {
        assert!(m <= self.rows);
        GaussianMatrix {
            rows: m,
            cols: self.cols,
            seed: self.seed,
            orthonormalized: self.orthonormalized,
            data: self.data[..m * self.cols].to_vec(),
        }
    }
}

/// `m`×`n` matrix of i.i.d. standard normals drawn row-major from the seeded
/// stream. With `orthonormalize`, rows go through modified Gram–Schmidt with
/// one re-orthogonalization pass.
///
/// Gram–Schmidt touches row `i` using only rows `0..i`, so the result equals
/// the first `m` rows of the orthonormalized `n`×`n` matrix for the same seed.
pub fn gaussian_matrix(m: usize, n: usize, seed: u64, orthonormalize: bool) -> Result<GaussianMatrix> {
    if n == 0 {
        return Err(CsError::InvalidArgument("gaussian matrix needs n >= 1".into()));
    }
    if orthonormalize && m > n {
        return Err(CsError::InvalidArgument(format!(
            "cannot orthonormalize {m} rows in dimension {n}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut data: Vec<f64> = (0..m * n).map(|_| rng.normal()).collect();
    if orthonormalize {
        for i in 0..m {
            let (done, rest) = data.split_at_mut(i * n);
            let row = &mut rest[..n];
            for _ in 0..2 {
                for j in 0..i {
                    let prev = &done[j * n..(j + 1) * n];
                    let proj: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (a, b) in row.iter_mut().zip(prev) {
                        *a -= proj * b;
                    }
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(CsError::NonFinite(format!(
                    "gaussian row {i} collapsed during orthonormalization"
                )));
            }
            for a in row.iter_mut() {
                *a /= norm;
            }
        }
    }
    Ok(GaussianMatrix {
        rows: m,
        cols: n,
        seed,
        orthonormalized: orthonormalize,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_rows() {
        let g = gaussian_matrix(4, 16, 7, true).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = g.row(i).iter().zip(g.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn square_orthonormal_gram_is_identity() {
        let n = 128;
        let g = gaussian_matrix(n, n, 3, true).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..=i {
                let d: f64 = g.row(i).iter().zip(g.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - want).abs());
            }
        }
        assert!(worst < 1e-10, "worst gram deviation {worst}");
    }

    #[test]
    fn deterministic_and_nested() {
        let a = gaussian_matrix(5, 32, 9, true).unwrap();
        let b = gaussian_matrix(5, 32, 9, true).unwrap();
        assert_eq!(a, b);
        let full = gaussian_matrix(32, 32, 9, true).unwrap();
        assert_eq!(full.crop(5).as_slice(), a.as_slice());
        let raw = gaussian_matrix(3, 32, 9, false).unwrap();
        let raw_full = gaussian_matrix(32, 32, 9, false).unwrap();
        assert_eq!(raw_full.crop(3).as_slice(), raw.as_slice());
    }

    #[test]
    fn rejects_tall_orthonormal() {
        assert!(gaussian_matrix(5, 4, 1, true).is_err());
        assert!(gaussian_matrix(5, 4, 1, false).is_ok());
    }

    #[test]
    fn entry_statistics() {
        let (m, n) = (1024usize, 1024usize);
        let g = gaussian_matrix(m, n, 1, false).unwrap();
        let count = (m * n) as f64;
        let mean = g.as_slice().iter().sum::<f64>() / count;
        let var = g.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0);
        assert!(mean.abs() <= 4.0 / count.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "var {var}");
    }
}
