/// Ordering of 2-D frequency positions by anti-diagonal traversal.
///
/// `indices()[k]` is the row-major flat index of the k-th position. Even
/// anti-diagonals (row+col even) are walked bottom-left to top-right, odd
/// ones top-right to bottom-left, which is the JPEG scan on square grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZigZagOrder {
    height: usize,
    width: usize,
    indices: Vec<usize>,
}

impl ZigZagOrder {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn zigzag_order(height: usize, width: usize) -> ZigZagOrder {
    let mut indices = Vec::with_capacity(height * width);
    if height > 0 && width > 0 {
        for s in 0..(height + width - 1) {
            let r_lo = s.saturating_sub(width - 1);
            let r_hi = s.min(height - 1);
            if s % 2 == 0 {
                for r in (r_lo..=r_hi).rev() {
                    indices.push(r * width + (s - r));
                }
            } else {
                for r in r_lo..=r_hi {
                    indices.push(r * width + (s - r));
                }
            }
        }
    }
    ZigZagOrder {
        height,
        width,
        indices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const JPEG_ZIGZAG: [usize; 64] = [
        0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13,
        6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58, 59, 52, 45, 38,
        31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
    ];

    #[test]
    fn two_by_two() {
        assert_eq!(zigzag_order(2, 2).indices(), &[0, 1, 2, 3]);
    }

    #[test]
    fn matches_jpeg_scan() {
        let z = zigzag_order(8, 8);
        assert_eq!(&z.indices()[..6], &[0, 1, 8, 16, 9, 2]);
        assert_eq!(z.indices(), &JPEG_ZIGZAG);
    }

    #[test]
    fn rectangular_is_permutation_ordered_by_frequency() {
        for &(h, w) in &[(3, 5), (5, 3), (1, 7), (7, 1), (4, 9)] {
            let z = zigzag_order(h, w);
            let mut seen = vec![false; h * w];
            for &i in z.indices() {
                assert!(!seen[i]);
                seen[i] = true;
            }
            assert!(seen.iter().all(|&s| s));
            assert_eq!(z.indices()[0], 0);
            let diag: Vec<usize> = z.indices().iter().map(|&i| i / w + i % w).collect();
            assert!(diag.windows(2).all(|p| p[0] <= p[1]));
        }
    }
}
