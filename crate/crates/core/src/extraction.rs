//! Explicit matrix extraction from black-box affine systems.
//!
//! `b = G(0)` and column `i` of `Φ` is `G(e_i) − b`. Columns are independent,
//! so probing may run in parallel; the result does not depend on scheduling.

use crate::binio::{
    expect_end, expect_magic, expect_version, read_f64s, read_u32, read_u64, to_usize, write_f64s,
};
use crate::error::{check_len, CsError, Result};
use crate::image::Image;
use crate::operator::{AffineOperator, DenseMatrix, LinearOperator, ProbeReport};
use crate::rng::SeededRng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

const MATRIX_MAGIC: &[u8; 4] = b"CSMX";
const PATTERN_MAGIC: &[u8; 4] = b"CSDP";
const VERSION: u16 = 1;

/// Anything that maps a length-N input to a vector, possibly with a bias.
pub trait AffineSystem: Sync {
    fn input_len(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl<T: LinearOperator + ?Sized> AffineSystem for T {
    fn input_len(&self) -> usize {
        self.input_dim()
    }
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply(x)
    }
}

impl AffineSystem for AffineOperator {
    fn input_len(&self) -> usize {
        self.input_dim()
    }
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply(x)
    }
}

/// Wraps a closure as a black-box system.
pub struct FnSystem<F> {
    n: usize,
    f: F,
}

impl<F> FnSystem<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F> AffineSystem for FnSystem<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn input_len(&self) -> usize {
        self.n
    }
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, x.len(), "system input")?;
        Ok((self.f)(x))
    }
}

/// Explicit `(Φ, b)` for an H×W input.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedSystem {
    phi: DenseMatrix,
    bias: Vec<f64>,
    height: usize,
    width: usize,
}

impl ExtractedSystem {
    pub fn new(phi: DenseMatrix, bias: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        check_len(phi.rows(), bias.len(), "bias")?;
        check_len(height * width, phi.cols(), "matrix columns")?;
        Ok(Self {
            phi,
            bias,
            height,
            width,
        })
    }

    pub fn rows(&self) -> usize {
        self.phi.rows()
    }

    pub fn cols(&self) -> usize {
        self.phi.cols()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn phi(&self) -> &DenseMatrix {
        &self.phi
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn into_parts(self) -> (DenseMatrix, Vec<f64>) {
        (self.phi, self.bias)
    }

    /// `Φx + b`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.phi.apply(x)?;
        for (a, b) in y.iter_mut().zip(&self.bias) {
            *a += b;
        }
        Ok(y)
    }

    /// Largest relative deviation `‖Φx + b − G(x)‖∞ / max(1, ‖G(x)‖∞)` over
    /// `probes` random inputs with entries uniform in [0, 1).
    pub fn max_relative_error(&self, system: &dyn AffineSystem, probes: usize, seed: u64) -> Result<f64> {
        let mut rng = SeededRng::new(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..probes {
            let x: Vec<f64> = (0..self.cols()).map(|_| rng.uniform()).collect();
            let want = system.evaluate(&x)?;
            let got = self.apply(&x)?;
            check_len(got.len(), want.len(), "system output")?;
            let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let err = got
                .iter()
                .zip(&want)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(err / scale);
        }
        Ok(worst)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Loads a matrix file. The file does not carry H×W; the input is taken
    /// as a single row of length N unless reshaped with [`Self::with_shape`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn with_shape(self, height: usize, width: usize) -> Result<Self> {
        check_len(self.cols(), height * width, "reshape")?;
        Ok(Self {
            height,
            width,
            ..self
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, MATRIX_MAGIC, self.rows(), self.cols())?;
        write_f64s(w, self.phi.as_slice())?;
        write_f64s(w, &self.bias)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (m, n) = read_header(r, MATRIX_MAGIC, "matrix")?;
        let phi = read_f64s(
            r,
            m.checked_mul(n)
                .ok_or_else(|| CsError::Format("matrix too large".into()))?,
        )?;
        let bias = read_f64s(r, m)?;
        expect_end(r)?;
        let phi = DenseMatrix::new(m, n, phi)?;
        Ok(Self {
            phi,
            bias,
            height: 1,
            width: n,
        })
    }

    /// One line per row: the row entries followed by the bias.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.cols())
            .map(|c| format!("phi_{c}"))
            .chain(["bias".to_string()])
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for r in 0..self.rows() {
            let line: Vec<String> = self
                .phi
                .row(r)
                .iter()
                .chain(std::iter::once(&self.bias[r]))
                .map(|v| format!("{v:e}"))
                .collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

impl AffineSystem for ExtractedSystem {
    fn input_len(&self) -> usize {
        self.cols()
    }
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply(x)
    }
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], m: usize, n: usize) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m as u64).to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<(usize, usize)> {
    expect_magic(r, magic, what)?;
    expect_version(r, VERSION, what)?;
    let m = to_usize(read_u64(r)?, "M")?;
    let n = to_usize(read_u64(r)?, "N")?;
    Ok((m, n))
}

/// Probing options.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractOptions {
    /// Probe columns on the rayon pool; set false for non-reentrant systems.
    pub parallel: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { parallel: true }
    }
}

/// Recovers `(Φ, b)` from `system` on H×W inputs.
pub fn extract(
    system: &dyn AffineSystem,
    height: usize,
    width: usize,
    opts: ExtractOptions,
) -> Result<ExtractedSystem> {
    let n = height * width;
    check_len(n, system.input_len(), "system input")?;
    let bias = system.evaluate(&vec![0.0; n])?;
    let m = bias.len();

    let probe = |i: usize, col: &mut [f64]| -> Result<()> {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        let y = system.evaluate(&e)?;
        if y.len() != m {
            return Err(CsError::NotLinear(format!(
                "probe {i} returned {} values, the zero input returned {m}",
                y.len()
            )));
        }
        for ((c, a), b) in col.iter_mut().zip(&y).zip(&bias) {
            *c = a - b;
        }
        Ok(())
    };

    // column-major scratch, transposed at the end
    let mut cols = vec![0.0; m * n];
    let first_error = if m == 0 {
        let check = |i: usize| probe(i, &mut []).err().map(|e| (i, e));
        if opts.parallel {
            (0..n).into_par_iter().filter_map(check).min_by_key(|(i, _)| *i)
        } else {
            (0..n).filter_map(check).next()
        }
    } else if opts.parallel {
        cols.par_chunks_mut(m)
            .enumerate()
            .filter_map(|(i, c)| probe(i, c).err().map(|e| (i, e)))
            .min_by_key(|(i, _)| *i)
    } else {
        cols.chunks_mut(m)
            .enumerate()
            .find_map(|(i, c)| probe(i, c).err().map(|e| (i, e)))
    };
    if let Some((_, e)) = first_error {
        return Err(e);
    }

    let mut phi = vec![0.0; m * n];
    if m > 0 {
        for (c, col) in cols.chunks(m).enumerate() {
            for (r, &v) in col.iter().enumerate() {
                phi[r * n + c] = v;
            }
        }
    }
    ExtractedSystem::new(DenseMatrix::new(m, n, phi)?, bias, height, width)
}

/// Checks `G(αx+βy) − G(0) = α(G(x)−G(0)) + β(G(y)−G(0))` on random triples.
///
/// The residual of each triple is the ∞-norm mismatch divided by
/// `|α|‖G(x)−G(0)‖∞ + |β|‖G(y)−G(0)‖∞`. A varying output length counts as an
/// infinite residual.
pub fn verify_linearity(
    system: &dyn AffineSystem,
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<ProbeReport> {
    if trials == 0 {
        return Err(CsError::InvalidArgument(
            "linearity check needs trials >= 1".into(),
        ));
    }
    let n = system.input_len();
    let mut rng = SeededRng::new(seed);
    let g0 = system.evaluate(&vec![0.0; n])?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let (a, b) = (rng.normal(), rng.normal());
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (gx, gy, gm) = (system.evaluate(&x)?, system.evaluate(&y)?, system.evaluate(&mix)?);
        if [gx.len(), gy.len(), gm.len()].iter().any(|&l| l != g0.len()) {
            worst = f64::INFINITY;
            break;
        }
        let mut err: f64 = 0.0;
        let (mut sx, mut sy): (f64, f64) = (0.0, 0.0);
        for i in 0..g0.len() {
            let dx = gx[i] - g0[i];
            let dy = gy[i] - g0[i];
            err = err.max(((gm[i] - g0[i]) - (a * dx + b * dy)).abs());
            sx = sx.max(dx.abs());
            sy = sy.max(dy.abs());
        }
        let scale = a.abs() * sx + b.abs() * sy;
        let r = if err == 0.0 {
            0.0
        } else {
            err / scale.max(f64::MIN_POSITIVE)
        };
        worst = worst.max(r);
    }
    Ok(ProbeReport {
        trials,
        max_residual: worst,
        tolerance: tol,
    })
}

/// Keeps the rows whose mask entry is set: `(MΦ, Mb)`.
pub fn merge_masked(sys: &ExtractedSystem, mask: &[bool]) -> Result<ExtractedSystem> {
    check_len(sys.rows(), mask.len(), "row mask")?;
    let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if keep.is_empty() {
        log::warn!("row mask selects nothing; merged system is empty");
    }
    let phi = sys.phi.select_rows(&keep);
    let bias = keep.iter().map(|&i| sys.bias[i]).collect();
    ExtractedSystem::new(phi, bias, sys.height, sys.width)
}

/// One H×W modulation pattern per measurement, with the bias alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct DmdPatternStack {
    patterns: Vec<Image>,
    bias: Vec<f64>,
    height: usize,
    width: usize,
}

impl DmdPatternStack {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pattern(&self, i: usize) -> &Image {
        &self.patterns[i]
    }

    pub fn patterns(&self) -> &[Image] {
        &self.patterns
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Measurement `i` as a modulator would produce it: `⟨pattern_i, x⟩ + b_i`.
    pub fn measure(&self, x: &Image) -> Result<Vec<f64>> {
        if x.height() != self.height || x.width() != self.width {
            return Err(CsError::InvalidArgument("pattern and scene sizes differ".into()));
        }
        Ok(self
            .patterns
            .iter()
            .zip(&self.bias)
            .map(|(p, b)| crate::image::dot(p.as_slice(), x.as_slice()) + b)
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut f, PATTERN_MAGIC, self.len(), self.height * self.width)?;
        f.write_all(&(self.height as u32).to_le_bytes())?;
        f.write_all(&(self.width as u32).to_le_bytes())?;
        for p in &self.patterns {
            write_f64s(&mut f, p.as_slice())?;
        }
        write_f64s(&mut f, &self.bias)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let r = &mut bytes.as_slice();
        let (m, n) = read_header(r, PATTERN_MAGIC, "pattern stack")?;
        let h = read_u32(r)? as usize;
        let w = read_u32(r)? as usize;
        if h * w != n {
            return Err(CsError::Format(format!(
                "pattern size {h}x{w} does not match N = {n}"
            )));
        }
        let mut patterns = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            patterns.push(Image::new(h, w, read_f64s(r, n)?)?);
        }
        let bias = read_f64s(r, m)?;
        expect_end(r)?;
        Ok(Self {
            patterns,
            bias,
            height: h,
            width: w,
        })
    }
}

/// Reshapes every row of `Φ` row-major to H×W.
pub fn export_dmd(sys: &ExtractedSystem, height: usize, width: usize) -> Result<DmdPatternStack> {
    check_len(sys.cols(), height * width, "pattern size")?;
    let patterns = (0..sys.rows())
        .map(|r| Image::new(height, width, sys.phi.row(r).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(DmdPatternStack {
        patterns,
        bias: sys.bias.clone(),
        height,
        width,
    })
}
