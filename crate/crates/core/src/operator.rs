//! Linear operators with exact adjoints.
//!
//! Every sampling scheme in the crate is expressed as a [`LinearOperator`]:
//! a forward map ℝᴺ→ℝᴹ plus its transpose. Affine behaviour (a bias) is kept
//! out of this trait and lives only in [`AffineOperator`].

use crate::error::{check_len, CsError, Result};
use crate::image::{dot, norm2};
use crate::rng::SeededRng;
use crate::transforms::SeededPermutation;
use std::sync::Arc;

pub type OperatorRef = Arc<dyn LinearOperator>;

pub trait LinearOperator: Send + Sync {
    /// N, the length of the input vector.
    fn input_dim(&self) -> usize;

    /// M, the length of the output vector.
    fn output_dim(&self) -> usize;

    fn kind(&self) -> String;

    /// Writes `A x` into `y`. Lengths are the caller's responsibility.
    fn forward_into(&self, x: &[f64], y: &mut [f64]);

    /// Writes `Aᵀ y` into `x`. Lengths are the caller's responsibility.
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]);

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), x.len(), "operator input")?;
        let mut y = vec![0.0; self.output_dim()];
        self.forward_into(x, &mut y);
        Ok(y)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(self.output_dim(), y.len(), "operator adjoint input")?;
        let mut x = vec![0.0; self.input_dim()];
        self.adjoint_into(y, &mut x);
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct Identity {
    n: usize,
}

impl Identity {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl LinearOperator for Identity {
    fn input_dim(&self) -> usize {
        self.n
    }
    fn output_dim(&self) -> usize {
        self.n
    }
    fn kind(&self) -> String {
        "identity".into()
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        x.copy_from_slice(y);
    }
}

#[derive(Debug, Clone)]
pub struct Diagonal {
    diag: Vec<f64>,
}

impl Diagonal {
    pub fn new(diag: Vec<f64>) -> Self {
        Self { diag }
    }
}

impl LinearOperator for Diagonal {
    fn input_dim(&self) -> usize {
        self.diag.len()
    }
    fn output_dim(&self) -> usize {
        self.diag.len()
    }
    fn kind(&self) -> String {
        "diagonal".into()
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        for ((o, a), d) in y.iter_mut().zip(x).zip(&self.diag) {
            *o = a * d;
        }
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.forward_into(y, x);
    }
}

/// `factor · A`.
pub struct Scaled {
    op: OperatorRef,
    factor: f64,
}

impl Scaled {
    pub fn new(op: OperatorRef, factor: f64) -> Self {
        Self { op, factor }
    }
}

impl LinearOperator for Scaled {
    fn input_dim(&self) -> usize {
        self.op.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.op.output_dim()
    }
    fn kind(&self) -> String {
        format!("{}*{}", self.factor, self.op.kind())
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        self.op.forward_into(x, y);
        y.iter_mut().for_each(|v| *v *= self.factor);
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.op.adjoint_into(y, x);
        x.iter_mut().for_each(|v| *v *= self.factor);
    }
}

/// Dense row-major M×N matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, data.len(), "dense matrix data")?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Builds a matrix from columns of equal length.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let mut data = vec![0.0; rows * cols];
        for (c, col) in columns.iter().enumerate() {
            check_len(rows, col.len(), "matrix column")?;
            for (r, &v) in col.iter().enumerate() {
                data[r * cols + c] = v;
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        DenseMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

impl LinearOperator for DenseMatrix {
    fn input_dim(&self) -> usize {
        self.cols
    }
    fn output_dim(&self) -> usize {
        self.rows
    }
    fn kind(&self) -> String {
        format!("dense{}x{}", self.rows, self.cols)
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        if self.cols == 0 {
            y.fill(0.0);
            return;
        }
        for (o, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        if self.cols == 0 {
            return;
        }
        for (&w, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if w != 0.0 {
                for (a, r) in x.iter_mut().zip(row) {
                    *a += w * r;
                }
            }
        }
    }
}

/// Gather by a permutation: `y[i] = x[perm[i]]`.
#[derive(Debug, Clone)]
pub struct PermutationOp {
    perm: SeededPermutation,
}

impl PermutationOp {
    pub fn new(perm: SeededPermutation) -> Self {
        Self { perm }
    }

    pub fn inverse(&self) -> PermutationOp {
        let inv = SeededPermutation::from_indices(self.perm.inverse_indices().to_vec())
            .expect("inverse of a permutation is a permutation");
        PermutationOp { perm: inv }
    }

    pub fn permutation(&self) -> &SeededPermutation {
        &self.perm
    }
}

impl LinearOperator for PermutationOp {
    fn input_dim(&self) -> usize {
        self.perm.len()
    }
    fn output_dim(&self) -> usize {
        self.perm.len()
    }
    fn kind(&self) -> String {
        "permutation".into()
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        self.perm.apply_into(x, y);
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.perm.apply_inverse_into(y, x);
    }
}

/// `outer ∘ inner`.
pub struct Composed {
    outer: OperatorRef,
    inner: OperatorRef,
}

impl LinearOperator for Composed {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.outer.output_dim()
    }
    fn kind(&self) -> String {
        format!("{}∘{}", self.outer.kind(), self.inner.kind())
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        let mut mid = vec![0.0; self.inner.output_dim()];
        self.inner.forward_into(x, &mut mid);
        self.outer.forward_into(&mid, y);
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let mut mid = vec![0.0; self.inner.output_dim()];
        self.outer.adjoint_into(y, &mut mid);
        self.inner.adjoint_into(&mid, x);
    }
}

/// Composition `a ∘ b`: forward applies `b` first, adjoint is `bᵀ ∘ aᵀ`.
pub fn compose(a: OperatorRef, b: OperatorRef) -> Result<Composed> {
    check_len(a.input_dim(), b.output_dim(), "composition inner dimension")?;
    Ok(Composed { outer: a, inner: b })
}

/// Vertical stack `[A₁; A₂; …]`: every part sees the same input and the
/// outputs are concatenated.
pub struct Stacked {
    parts: Vec<OperatorRef>,
    offsets: Vec<usize>,
}

impl Stacked {
    pub fn new(parts: Vec<OperatorRef>) -> Result<Self> {
        let n = parts
            .first()
            .map(|p| p.input_dim())
            .ok_or_else(|| CsError::InvalidArgument("empty operator stack".into()))?;
        for p in &parts {
            check_len(n, p.input_dim(), "stacked operator input")?;
        }
        let offsets = offsets(parts.iter().map(|p| p.output_dim()));
        Ok(Self { parts, offsets })
    }
}

impl LinearOperator for Stacked {
    fn input_dim(&self) -> usize {
        self.parts[0].input_dim()
    }
    fn output_dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }
    fn kind(&self) -> String {
        let kinds: Vec<String> = self.parts.iter().map(|p| p.kind()).collect();
        format!("[{}]", kinds.join("; "))
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        for (p, w) in self.parts.iter().zip(self.offsets.windows(2)) {
            p.forward_into(x, &mut y[w[0]..w[1]]);
        }
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        let mut tmp = vec![0.0; x.len()];
        for (p, w) in self.parts.iter().zip(self.offsets.windows(2)) {
            p.adjoint_into(&y[w[0]..w[1]], &mut tmp);
            for (a, b) in x.iter_mut().zip(&tmp) {
                *a += b;
            }
        }
    }
}

/// Block-diagonal `diag(A₁, A₂, …)`: the input is split into consecutive
/// segments, one per part, and the outputs are concatenated.
pub struct BlockDiagonal {
    parts: Vec<OperatorRef>,
    in_offsets: Vec<usize>,
    out_offsets: Vec<usize>,
}

impl BlockDiagonal {
    pub fn new(parts: Vec<OperatorRef>) -> Result<Self> {
        if parts.is_empty() {
            return Err(CsError::InvalidArgument("empty block-diagonal operator".into()));
        }
        let in_offsets = offsets(parts.iter().map(|p| p.input_dim()));
        let out_offsets = offsets(parts.iter().map(|p| p.output_dim()));
        Ok(Self {
            parts,
            in_offsets,
            out_offsets,
        })
    }
}

impl LinearOperator for BlockDiagonal {
    fn input_dim(&self) -> usize {
        *self.in_offsets.last().unwrap()
    }
    fn output_dim(&self) -> usize {
        *self.out_offsets.last().unwrap()
    }
    fn kind(&self) -> String {
        let kinds: Vec<String> = self.parts.iter().map(|p| p.kind()).collect();
        format!("diag({})", kinds.join(", "))
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, p) in self.parts.iter().enumerate() {
            p.forward_into(
                &x[self.in_offsets[i]..self.in_offsets[i + 1]],
                &mut y[self.out_offsets[i]..self.out_offsets[i + 1]],
            );
        }
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        for (i, p) in self.parts.iter().enumerate() {
            p.adjoint_into(
                &y[self.out_offsets[i]..self.out_offsets[i + 1]],
                &mut x[self.in_offsets[i]..self.in_offsets[i + 1]],
            );
        }
    }
}

fn offsets(dims: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut out = vec![0];
    for d in dims {
        out.push(out.last().unwrap() + d);
    }
    out
}

/// `G(x) = A x + b`.
pub struct AffineOperator {
    linear: OperatorRef,
    bias: Vec<f64>,
}

impl AffineOperator {
    pub fn new(linear: OperatorRef, bias: Vec<f64>) -> Result<Self> {
        check_len(linear.output_dim(), bias.len(), "affine bias")?;
        Ok(Self { linear, bias })
    }

    pub fn linear(&self) -> &OperatorRef {
        &self.linear
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.linear.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.linear.apply(x)?;
        for (a, b) in y.iter_mut().zip(&self.bias) {
            *a += b;
        }
        Ok(y)
    }

    /// `y − b`, the measurement seen by the purely linear part.
    pub fn remove_bias(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(self.bias.len(), y.len(), "affine measurement")?;
        Ok(y.iter().zip(&self.bias).map(|(a, b)| a - b).collect())
    }
}

/// Running estimates of ‖A‖₂ from power iteration on AᵀA. Entry k is the
/// largest Rayleigh-quotient estimate seen after k+1 iterations, so the
/// sequence is nondecreasing.
pub fn power_iteration_trace(op: &dyn LinearOperator, iters: usize, seed: u64) -> Vec<f64> {
    let n = op.input_dim();
    let mut rng = SeededRng::new(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut trace = Vec::with_capacity(iters);
    let nv = norm2(&v);
    if n == 0 || nv == 0.0 || op.output_dim() == 0 {
        return vec![0.0; iters];
    }
    v.iter_mut().for_each(|a| *a /= nv);
    let mut w = vec![0.0; op.output_dim()];
    let mut best: f64 = 0.0;
    for _ in 0..iters {
        op.forward_into(&v, &mut w);
        best = best.max(norm2(&w));
        trace.push(best);
        op.adjoint_into(&w, &mut v);
        let nv = norm2(&v);
        if nv == 0.0 {
            trace.resize(iters, best);
            break;
        }
        v.iter_mut().for_each(|a| *a /= nv);
    }
    trace
}

/// Spectral norm estimate ‖A‖₂; a zero operator gives 0.
pub fn power_iteration(op: &dyn LinearOperator, iters: usize, seed: u64) -> Result<f64> {
    if iters == 0 {
        return Err(CsError::InvalidArgument(
            "power iteration needs iters >= 1".into(),
        ));
    }
    Ok(*power_iteration_trace(op, iters, seed).last().unwrap())
}

/// Outcome of a randomized probe test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub trials: usize,
    pub max_residual: f64,
    pub tolerance: f64,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.max_residual <= self.tolerance
    }
}

fn random_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Checks `|⟨Ax, y⟩ − ⟨x, Aᵀy⟩| ≤ tol·‖x‖‖y‖` on random Gaussian pairs.
/// The reported residual is already divided by ‖x‖‖y‖.
pub fn adjoint_probe(op: &dyn LinearOperator, pairs: usize, seed: u64, tol: f64) -> ProbeReport {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    let mut ax = vec![0.0; op.output_dim()];
    let mut aty = vec![0.0; op.input_dim()];
    for _ in 0..pairs {
        let x = random_vec(&mut rng, op.input_dim());
        let y = random_vec(&mut rng, op.output_dim());
        op.forward_into(&x, &mut ax);
        op.adjoint_into(&y, &mut aty);
        let scale = norm2(&x) * norm2(&y);
        if scale > 0.0 {
            worst = worst.max((dot(&ax, &y) - dot(&x, &aty)).abs() / scale);
        }
    }
    ProbeReport {
        trials: pairs,
        max_residual: worst,
        tolerance: tol,
    }
}

/// Checks `A(αx + βy) = αAx + βAy` on random triples. The residual is the
/// ∞-norm mismatch divided by `|α|‖Ax‖∞ + |β|‖Ay‖∞`.
pub fn linearity_probe(op: &dyn LinearOperator, triples: usize, seed: u64, tol: f64) -> ProbeReport {
    let mut rng = SeededRng::new(seed);
    let (n, m) = (op.input_dim(), op.output_dim());
    let mut worst: f64 = 0.0;
    let (mut fx, mut fy, mut fz) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for _ in 0..triples {
        let x = random_vec(&mut rng, n);
        let y = random_vec(&mut rng, n);
        let alpha = rng.normal();
        let beta = rng.normal();
        let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
        op.forward_into(&x, &mut fx);
        op.forward_into(&y, &mut fy);
        op.forward_into(&z, &mut fz);
        let mut res: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..m {
            res = res.max((fz[i] - alpha * fx[i] - beta * fy[i]).abs());
            scale = scale.max(alpha.abs() * fx[i].abs() + beta.abs() * fy[i].abs());
        }
        worst = worst.max(if scale > 0.0 { res / scale } else { res });
    }
    ProbeReport {
        trials: triples,
        max_residual: worst,
        tolerance: tol,
    }
}
