use crate::error::{CsError, Result};
use crate::rng::SeededRng;

/// Seeded bijection on `0..N`.
///
/// Applying it gathers: `out[i] = x[perm[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededPermutation {
    seed: u64,
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl SeededPermutation {
    pub fn identity(n: usize) -> Self {
        let perm: Vec<usize> = (0..n).collect();
        Self {
            seed: 0,
            inverse: perm.clone(),
            perm,
        }
    }

    pub fn from_indices(perm: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            if p >= perm.len() || inverse[p] != usize::MAX {
                return Err(CsError::InvalidArgument("not a permutation".into()));
            }
            inverse[p] = i;
        }
        Ok(Self {
            seed: 0,
            perm,
            inverse,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_indices(&self) -> &[usize] {
        &self.inverse
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(&self.perm) {
            *o = x[p];
        }
    }

    pub fn apply_inverse_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(&self.inverse) {
            *o = x[p];
        }
    }
}

/// Fisher–Yates shuffle (from the top index down) driven by [`SeededRng::below`].
pub fn random_permutation(n: usize, seed: u64) -> SeededPermutation {
    let mut rng = SeededRng::new(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    let mut inverse = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    SeededPermutation { seed, perm, inverse }
}
