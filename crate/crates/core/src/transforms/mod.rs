//! Foundational transforms and seeded random constructions.

mod dct;
mod gaussian;
mod permutation;
mod zigzag;

pub use dct::{dct2_forward, dct2_inverse, Dct2d};
pub use gaussian::{gaussian_matrix, GaussianMatrix};
pub use permutation::{random_permutation, SeededPermutation};
pub use zigzag::{zigzag_order, ZigZagOrder};
