//! Collaborative sampling operator and its ablation variants.
//!
//! The full operator filters the image with a [`FilterNet`] into `X_D` and
//! `X_G`, then measures `X_D` with the first `m_D` zig-zag-ordered DCT
//! coefficients (D-branch) and `X_G` with a scrambled block-diagonal Gaussian
//! matrix (G-branch). The measurement is the concatenation `[y_D, y_G]`, with
//! `y_G` laid out block-major (blocks in raster order, `m_G` values each).

use crate::error::{check_len, CsError, Result};
use crate::filter::{FilterNet, FilterOperator, RatioPair};
use crate::image::Image;
use crate::operator::{compose, BlockDiagonal, LinearOperator, OperatorRef, Stacked};
use crate::transforms::{
    gaussian_matrix, random_permutation, zigzag_order, Dct2d, GaussianMatrix, SeededPermutation,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

pub const DEFAULT_BLOCK: usize = 32;
pub const DEFAULT_D_SHARE: f64 = 0.4;
pub const DEFAULT_PERM_SEED: u64 = 1;
pub const DEFAULT_GAUSS_SEED: u64 = 2;

/// Operator variants of the sampling ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Filtering network + D-branch + scrambled G-branch (row 1).
    FullCoso,
    /// D-branch + scrambled G-branch, no filtering (row 7).
    DualNoFilter,
    /// Scrambled block-diagonal Gaussian only (row 8).
    GBranchScrambled,
    /// D-branch + unscrambled G-branch (row 9).
    DualNoPermute,
    /// Global DCT with zig-zag truncation only (row 10).
    DctOnly,
    /// Plain block-diagonal Gaussian (row 11).
    BlockGaussian,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::FullCoso,
        Variant::DualNoFilter,
        Variant::GBranchScrambled,
        Variant::DualNoPermute,
        Variant::DctOnly,
        Variant::BlockGaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullCoso => "full_coso",
            Variant::DualNoFilter => "dual_no_filter",
            Variant::GBranchScrambled => "g_branch_scrambled",
            Variant::DualNoPermute => "dual_no_permute",
            Variant::DctOnly => "dct_only",
            Variant::BlockGaussian => "block_gaussian",
        }
    }

    /// Row number in the sampling ablation table.
    pub fn table_row(self) -> u8 {
        match self {
            Variant::FullCoso => 1,
            Variant::DualNoFilter => 7,
            Variant::GBranchScrambled => 8,
            Variant::DualNoPermute => 9,
            Variant::DctOnly => 10,
            Variant::BlockGaussian => 11,
        }
    }

    pub fn code(self) -> u8 {
        self.table_row()
    }

    pub fn from_code(code: u8) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn uses_filter(self) -> bool {
        self == Variant::FullCoso
    }

    pub fn uses_d_branch(self) -> bool {
        !matches!(self, Variant::GBranchScrambled | Variant::BlockGaussian)
    }

    pub fn uses_g_branch(self) -> bool {
        self != Variant::DctOnly
    }

    pub fn permutes(self) -> bool {
        matches!(
            self,
            Variant::FullCoso | Variant::DualNoFilter | Variant::GBranchScrambled
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CsError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| CsError::InvalidConfig(format!("unknown variant '{s}'")))
    }
}

fn default_block() -> usize {
    DEFAULT_BLOCK
}
fn default_perm_seed() -> u64 {
    DEFAULT_PERM_SEED
}
fn default_gauss_seed() -> u64 {
    DEFAULT_GAUSS_SEED
}
fn default_variant() -> Variant {
    Variant::DualNoFilter
}
fn default_true() -> bool {
    true
}

/// Sampling configuration, serialized as a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosoConfig {
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_block")]
    pub block: usize,
    /// Total ratio γ. May be omitted when the branch ratios are given.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub gamma_d: Option<f64>,
    #[serde(default)]
    pub gamma_g: Option<f64>,
    #[serde(default = "default_perm_seed")]
    pub perm_seed: u64,
    #[serde(default = "default_gauss_seed")]
    pub gauss_seed: u64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    /// Orthonormalize the G-branch Gaussian rows.
    #[serde(default = "default_true")]
    pub orthonormalize: bool,
    /// Feed the first filter output to both branches.
    #[serde(default)]
    pub shared_filter: bool,
}

/// Branch ratios and measurement counts derived from a [`CosoConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub gamma: f64,
    pub gamma_d: f64,
    pub gamma_g: f64,
    /// Number of kept DCT coefficients.
    pub m_d: usize,
    /// Measurements per block in the G-branch.
    pub m_g: usize,
    pub num_blocks: usize,
}

impl Layout {
    pub fn n(&self) -> usize {
        self.height * self.width
    }

    pub fn block_len(&self) -> usize {
        self.block * self.block
    }

    pub fn g_len(&self) -> usize {
        self.num_blocks * self.m_g
    }

    /// Total measurement length `M = m_D + (N/n)·m_G`.
    pub fn total(&self) -> usize {
        self.m_d + self.g_len()
    }

    pub fn ratio_pair(&self) -> RatioPair {
        RatioPair::new(self.gamma_d, self.gamma_g)
    }
}

fn round_count(ratio: f64, n: usize) -> usize {
    // f64::round rounds half away from zero
    (ratio * n as f64).round() as usize
}

impl CosoConfig {
    pub fn new(height: usize, width: usize, gamma: f64, variant: Variant) -> Self {
        Self {
            height,
            width,
            block: DEFAULT_BLOCK,
            gamma: Some(gamma),
            gamma_d: None,
            gamma_g: None,
            perm_seed: DEFAULT_PERM_SEED,
            gauss_seed: DEFAULT_GAUSS_SEED,
            variant,
            weights_path: None,
            orthonormalize: true,
            shared_filter: false,
        }
    }

    pub fn with_block(mut self, block: usize) -> Self {
        self.block = block;
        self
    }

    pub fn with_split(mut self, gamma_d: f64, gamma_g: f64) -> Self {
        self.gamma_d = Some(gamma_d);
        self.gamma_g = Some(gamma_g);
        self
    }

    pub fn with_seeds(mut self, perm_seed: u64, gauss_seed: u64) -> Self {
        self.perm_seed = perm_seed;
        self.gauss_seed = gauss_seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validates the configuration and resolves branch ratios.
    ///
    /// Dual-branch variants default to `γ_D = 0.4γ`, `γ_G = 0.6γ`; single-branch
    /// variants spend all of `γ` on their one branch.
    pub fn layout(&self) -> Result<Layout> {
        let bad = |msg: String| Err(CsError::InvalidConfig(msg));
        if self.height == 0 || self.width == 0 || self.block == 0 {
            return bad("height, width and block must be positive".into());
        }
        if !self.height.is_multiple_of(self.block) || !self.width.is_multiple_of(self.block) {
            return bad(format!(
                "block {} must divide both {}x{} image dimensions",
                self.block, self.height, self.width
            ));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("gamma_d", self.gamma_d),
            ("gamma_g", self.gamma_g),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("{name} = {v} must lie in [0, 1]"));
                }
            }
        }
        let v = self.variant;
        let total = match (self.gamma, self.gamma_d, self.gamma_g) {
            (Some(g), _, _) => g,
            (None, Some(d), Some(g)) => d + g,
            (None, Some(d), None) if !v.uses_g_branch() => d,
            (None, None, Some(g)) if !v.uses_d_branch() => g,
            _ => return bad("gamma must be given (or both gamma_d and gamma_g)".into()),
        };
        let (gamma_d, gamma_g) = if v.uses_d_branch() && v.uses_g_branch() {
            match (self.gamma_d, self.gamma_g) {
                (Some(d), Some(g)) => (d, g),
                (Some(d), None) => (d, total - d),
                (None, Some(g)) => (total - g, g),
                (None, None) => (DEFAULT_D_SHARE * total, (1.0 - DEFAULT_D_SHARE) * total),
            }
        } else if v.uses_d_branch() {
            if self.gamma_g.is_some_and(|g| g != 0.0) {
                return bad(format!("variant {v} has no G-branch but gamma_g is nonzero"));
            }
            (self.gamma_d.unwrap_or(total), 0.0)
        } else {
            if self.gamma_d.is_some_and(|d| d != 0.0) {
                return bad(format!("variant {v} has no D-branch but gamma_d is nonzero"));
            }
            (0.0, self.gamma_g.unwrap_or(total))
        };
        if gamma_d < 0.0 || gamma_g < 0.0 || gamma_d > 1.0 || gamma_g > 1.0 {
            return bad(format!("branch ratios ({gamma_d}, {gamma_g}) must lie in [0, 1]"));
        }
        if (gamma_d + gamma_g - total).abs() > 1e-9 {
            return bad(format!(
                "gamma_d + gamma_g = {} does not match gamma = {total}",
                gamma_d + gamma_g
            ));
        }
        if v.uses_filter() && self.weights_path.is_none() {
            log::debug!("full_coso config without weights_path; a network must be supplied directly");
        }
        let n = self.height * self.width;
        let nb = self.block * self.block;
        Ok(Layout {
            height: self.height,
            width: self.width,
            block: self.block,
            gamma: total,
            gamma_d,
            gamma_g,
            m_d: round_count(gamma_d, n),
            m_g: round_count(gamma_g, nb),
            num_blocks: n / nb,
        })
    }
}

type GaussKey = (usize, u64, bool);

/// Process-wide store of Gaussian matrices. Rows nest across `m`, so one
/// entry per `(n, seed, orthonormalize)` holding the most rows built so far
/// serves every smaller request by cropping.
fn shared_gaussian(m: usize, n: usize, seed: u64, ortho: bool) -> Result<Arc<GaussianMatrix>> {
    static CACHE: OnceLock<Mutex<HashMap<GaussKey, Arc<GaussianMatrix>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (n, seed, ortho);
    if let Some(g) = cache.lock().unwrap().get(&key) {
        if g.rows() == m {
            return Ok(g.clone());
        }
        if g.rows() > m {
            return Ok(Arc::new(g.crop(m)));
        }
    }
    let g = Arc::new(gaussian_matrix(m, n, seed, ortho)?);
    let mut guard = cache.lock().unwrap();
    let keep = guard.get(&key).is_none_or(|old| old.rows() < m);
    if keep {
        guard.insert(key, g.clone());
    }
    Ok(g)
}

/// D-branch: orthonormal 2-D DCT followed by keeping the first `m_D`
/// coefficients in zig-zag order.
pub struct DBranch {
    dct: Dct2d,
    kept: Vec<usize>,
}

impl DBranch {
    pub fn new(height: usize, width: usize, m_d: usize) -> Result<Self> {
        let n = height * width;
        if m_d > n {
            return Err(CsError::InvalidConfig(format!("m_D = {m_d} exceeds N = {n}")));
        }
        let order = zigzag_order(height, width);
        Ok(Self {
            dct: Dct2d::new(height, width)?,
            kept: order.indices()[..m_d].to_vec(),
        })
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }
}

impl LinearOperator for DBranch {
    fn input_dim(&self) -> usize {
        self.dct.height() * self.dct.width()
    }
    fn output_dim(&self) -> usize {
        self.kept.len()
    }
    fn kind(&self) -> String {
        "dct_zigzag".into()
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        if self.kept.is_empty() {
            return;
        }
        let mut coeffs = x.to_vec();
        self.dct.forward_in_place(&mut coeffs);
        for (o, &k) in y.iter_mut().zip(&self.kept) {
            *o = coeffs[k];
        }
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        if self.kept.is_empty() {
            return;
        }
        for (&v, &k) in y.iter().zip(&self.kept) {
            x[k] = v;
        }
        self.dct.inverse_in_place(x);
    }
}

/// G-branch: optional global pixel permutation, then every B×B block
/// (raster order, row-major inside) is multiplied by the same `m_G×B²`
/// Gaussian matrix.
pub struct GBranch {
    height: usize,
    width: usize,
    block: usize,
    perm: Option<SeededPermutation>,
    phi: Arc<GaussianMatrix>,
}

impl GBranch {
    pub fn new(
        height: usize,
        width: usize,
        block: usize,
        perm: Option<SeededPermutation>,
        phi: Arc<GaussianMatrix>,
    ) -> Result<Self> {
        if block == 0 || !height.is_multiple_of(block) || !width.is_multiple_of(block) {
            return Err(CsError::InvalidConfig(format!(
                "block {block} must divide {height}x{width}"
            )));
        }
        check_len(block * block, phi.cols(), "G-branch matrix columns")?;
        if let Some(p) = &perm {
            check_len(height * width, p.len(), "G-branch permutation")?;
        }
        Ok(Self {
            height,
            width,
            block,
            perm,
            phi,
        })
    }

    pub fn m_g(&self) -> usize {
        self.phi.rows()
    }

    pub fn num_blocks(&self) -> usize {
        (self.height / self.block) * (self.width / self.block)
    }

    pub fn matrix(&self) -> &GaussianMatrix {
        &self.phi
    }

    pub fn permutation(&self) -> Option<&SeededPermutation> {
        self.perm.as_ref()
    }

    fn block_origin(&self, b: usize) -> (usize, usize) {
        let per_row = self.width / self.block;
        ((b / per_row) * self.block, (b % per_row) * self.block)
    }
}

impl LinearOperator for GBranch {
    fn input_dim(&self) -> usize {
        self.height * self.width
    }
    fn output_dim(&self) -> usize {
        self.num_blocks() * self.m_g()
    }
    fn kind(&self) -> String {
        if self.perm.is_some() {
            "scrambled_block_gaussian".into()
        } else {
            "block_gaussian".into()
        }
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        let m = self.m_g();
        if m == 0 {
            return;
        }
        let scrambled;
        let src = match &self.perm {
            Some(p) => {
                let mut buf = vec![0.0; x.len()];
                p.apply_into(x, &mut buf);
                scrambled = buf;
                &scrambled[..]
            }
            None => x,
        };
        let b = self.block;
        let mut patch = vec![0.0; b * b];
        for (blk, out) in y.chunks_exact_mut(m).enumerate() {
            let (r0, c0) = self.block_origin(blk);
            for r in 0..b {
                let start = (r0 + r) * self.width + c0;
                patch[r * b..(r + 1) * b].copy_from_slice(&src[start..start + b]);
            }
            if patch.iter().all(|&v| v == 0.0) {
                out.fill(0.0);
                continue;
            }
            for (k, o) in out.iter_mut().enumerate() {
                *o = self.phi.row(k).iter().zip(&patch).map(|(a, v)| a * v).sum();
            }
        }
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let m = self.m_g();
        x.fill(0.0);
        if m == 0 {
            return;
        }
        let mut scrambled = vec![0.0; x.len()];
        let b = self.block;
        let mut patch = vec![0.0; b * b];
        for (blk, vals) in y.chunks_exact(m).enumerate() {
            patch.fill(0.0);
            for (k, &v) in vals.iter().enumerate() {
                if v != 0.0 {
                    for (p, a) in patch.iter_mut().zip(self.phi.row(k)) {
                        *p += v * a;
                    }
                }
            }
            let (r0, c0) = self.block_origin(blk);
            for r in 0..b {
                let start = (r0 + r) * self.width + c0;
                scrambled[start..start + b].copy_from_slice(&patch[r * b..(r + 1) * b]);
            }
        }
        match &self.perm {
            Some(p) => p.apply_inverse_into(&scrambled, x),
            None => x.copy_from_slice(&scrambled),
        }
    }
}

/// A sampling operator assembled from a [`CosoConfig`].
pub struct CosoOperator {
    config: CosoConfig,
    layout: Layout,
    d_branch: Option<Arc<DBranch>>,
    g_branch: Option<Arc<GBranch>>,
    pipeline: OperatorRef,
}

impl std::fmt::Debug for CosoOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CosoOperator")
            .field("variant", &self.config.variant)
            .field("layout", &self.layout)
            .finish()
    }
}

/// Measurement `[y_D, y_G]` with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y_d: Vec<f64>,
    pub y_g: Vec<f64>,
    pub config: CosoConfig,
}

impl Measurement {
    pub fn len(&self) -> usize {
        self.y_d.len() + self.y_g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut y = self.y_d.clone();
        y.extend_from_slice(&self.y_g);
        y
    }
}

impl CosoOperator {
    pub fn config(&self) -> &CosoConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn d_branch(&self) -> Option<&DBranch> {
        self.d_branch.as_deref()
    }

    pub fn g_branch(&self) -> Option<&GBranch> {
        self.g_branch.as_deref()
    }

    pub fn pipeline(&self) -> &OperatorRef {
        &self.pipeline
    }

    pub fn sample(&self, img: &Image) -> Result<Measurement> {
        if img.height() != self.layout.height || img.width() != self.layout.width {
            return Err(CsError::InvalidArgument(format!(
                "operator expects {}x{} images, got {}x{}",
                self.layout.height,
                self.layout.width,
                img.height(),
                img.width()
            )));
        }
        let y = self.apply(img.as_slice())?;
        let (yd, yg) = self.split(&y)?;
        Ok(Measurement {
            y_d: yd.to_vec(),
            y_g: yg.to_vec(),
            config: self.config.clone(),
        })
    }

    /// Splits a concatenated measurement into `(y_D, y_G)`.
    pub fn split<'a>(&self, y: &'a [f64]) -> Result<(&'a [f64], &'a [f64])> {
        check_len(self.output_dim(), y.len(), "measurement")?;
        Ok(y.split_at(self.layout.m_d))
    }

    /// Initialization pair `(Φ_Dᵀ y_D, P_G⁻¹ Φ_Gᵀ y_G)`. The filtering step is
    /// deliberately left out; a missing branch contributes a zero image.
    pub fn branch_init(&self, y: &[f64]) -> Result<(Image, Image)> {
        let (yd, yg) = self.split(y)?;
        let (h, w) = (self.layout.height, self.layout.width);
        let mut d = vec![0.0; h * w];
        let mut g = vec![0.0; h * w];
        if let Some(op) = &self.d_branch {
            op.adjoint_into(yd, &mut d);
        }
        if let Some(op) = &self.g_branch {
            op.adjoint_into(yg, &mut g);
        }
        Ok((Image::new(h, w, d)?, Image::new(h, w, g)?))
    }

    pub fn branch_init_measurement(&self, m: &Measurement) -> Result<(Image, Image)> {
        if m.config != self.config {
            return Err(CsError::InvalidConfig(
                "measurement was taken with a different configuration".into(),
            ));
        }
        self.branch_init(&m.concat())
    }
}

impl LinearOperator for CosoOperator {
    fn input_dim(&self) -> usize {
        self.pipeline.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.pipeline.output_dim()
    }
    fn kind(&self) -> String {
        self.config.variant.name().into()
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        self.pipeline.forward_into(x, y)
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        self.pipeline.adjoint_into(y, x)
    }
}

/// Builds the sampling operator for `config`. `net` is required for
/// [`Variant::FullCoso`] and ignored otherwise.
pub fn build_coso(config: &CosoConfig, net: Option<&FilterNet>) -> Result<CosoOperator> {
    let layout = config.layout()?;
    assemble(config, layout, net)
}

/// The same pipeline with nothing discarded: all N DCT coefficients and all
/// B² Gaussian rows per block, together with the binary mask that selects the
/// rows kept by [`build_coso`].
pub fn build_unmasked(config: &CosoConfig, net: Option<&FilterNet>) -> Result<(CosoOperator, Vec<bool>)> {
    let layout = config.layout()?;
    let v = config.variant;
    let full = Layout {
        m_d: if v.uses_d_branch() { layout.n() } else { 0 },
        m_g: if v.uses_g_branch() { layout.block_len() } else { 0 },
        ..layout
    };
    let mut mask = Vec::with_capacity(full.total());
    mask.extend((0..full.m_d).map(|i| i < layout.m_d));
    for _ in 0..full.num_blocks {
        mask.extend((0..full.m_g).map(|k| k < layout.m_g));
    }
    Ok((assemble(config, full, net)?, mask))
}

fn assemble(config: &CosoConfig, layout: Layout, net: Option<&FilterNet>) -> Result<CosoOperator> {
    let v = config.variant;
    let (h, w) = (layout.height, layout.width);
    let d_branch = if v.uses_d_branch() {
        Some(Arc::new(DBranch::new(h, w, layout.m_d)?))
    } else {
        None
    };
    let g_branch = if v.uses_g_branch() {
        if config.orthonormalize && layout.m_g > layout.block_len() {
            return Err(CsError::InvalidConfig("m_G exceeds block size".into()));
        }
        let phi = shared_gaussian(
            layout.m_g,
            layout.block_len(),
            config.gauss_seed,
            config.orthonormalize,
        )?;
        let perm = v.permutes().then(|| random_permutation(h * w, config.perm_seed));
        Some(Arc::new(GBranch::new(h, w, layout.block, perm, phi)?))
    } else {
        None
    };

    let pipeline: OperatorRef = if v.uses_filter() {
        let net =
            net.ok_or_else(|| CsError::InvalidConfig("variant full_coso needs a filtering network".into()))?;
        let filter = FilterOperator::new(net, layout.ratio_pair(), h, w, config.shared_filter)?;
        let branches = BlockDiagonal::new(vec![
            d_branch.clone().unwrap() as OperatorRef,
            g_branch.clone().unwrap() as OperatorRef,
        ])?;
        Arc::new(compose(Arc::new(branches), Arc::new(filter))?)
    } else {
        let parts: Vec<OperatorRef> = d_branch
            .iter()
            .map(|d| d.clone() as OperatorRef)
            .chain(g_branch.iter().map(|g| g.clone() as OperatorRef))
            .collect();
        if parts.len() == 1 {
            parts.into_iter().next().unwrap()
        } else {
            Arc::new(Stacked::new(parts)?)
        }
    };

    Ok(CosoOperator {
        config: config.clone(),
        layout,
        d_branch,
        g_branch,
        pipeline,
    })
}

/// Pixel-wise average of the two initialization channels.
pub fn combine_init(pair: &(Image, Image)) -> Result<Image> {
    let (a, b) = pair;
    if !a.same_shape(b) {
        return Err(CsError::InvalidArgument(
            "initialization channels differ in shape".into(),
        ));
    }
    Image::new(
        a.height(),
        a.width(),
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| 0.5 * (x + y))
            .collect(),
    )
}

/// Samples a D-branch directly: `m_D = round(γ_D·N)` zig-zag DCT coefficients.
pub fn d_branch_sample(x_d: &Image, gamma_d: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma_d) {
        return Err(CsError::InvalidArgument(format!(
            "gamma_d = {gamma_d} outside [0, 1]"
        )));
    }
    let op = DBranch::new(x_d.height(), x_d.width(), round_count(gamma_d, x_d.len()))?;
    op.apply(x_d.as_slice())
}

/// Samples a G-branch directly with the given permutation and complete
/// `B²×B²` matrix, keeping `m_G = round(γ_G·B²)` rows per block.
pub fn g_branch_sample(
    x_g: &Image,
    gamma_g: f64,
    block: usize,
    perm: Option<&SeededPermutation>,
    phi: &GaussianMatrix,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma_g) {
        return Err(CsError::InvalidArgument(format!(
            "gamma_g = {gamma_g} outside [0, 1]"
        )));
    }
    let m_g = round_count(gamma_g, block * block);
    if m_g > phi.rows() {
        return Err(CsError::InvalidArgument(format!(
            "matrix has {} rows, {m_g} requested",
            phi.rows()
        )));
    }
    let op = GBranch::new(
        x_g.height(),
        x_g.width(),
        block,
        perm.cloned(),
        Arc::new(phi.crop(m_g)),
    )?;
    op.apply(x_g.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::init_weights;
    use crate::operator::{adjoint_probe, linearity_probe};
    use crate::rng::SeededRng;
    use crate::transforms::dct2_inverse;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = SeededRng::new(seed);
        Image::from_fn(h, w, |_, _| rng.uniform())
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_code(v.code()), Some(v));
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn d_branch_examples() {
        let img = Image::filled(4, 4, 0.5);
        let y = d_branch_sample(&img, 1.0 / 16.0).unwrap();
        assert_eq!(y.len(), 1);
        assert!((y[0] - 2.0).abs() < 1e-12);
        assert!(d_branch_sample(&img, 0.0).unwrap().is_empty());
        assert!(d_branch_sample(&img, 1.5).is_err());

        let x = noise(8, 8, 1);
        let all = d_branch_sample(&x, 1.0).unwrap();
        let zz = zigzag_order(8, 8);
        let mut grid = Image::zeros(8, 8);
        for (k, &idx) in zz.indices().iter().enumerate() {
            grid.as_mut_slice()[idx] = all[k];
        }
        let back = dct2_inverse(&grid).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn g_branch_examples() {
        let x = noise(8, 8, 2);
        let phi = gaussian_matrix(16, 16, 3, true).unwrap();
        assert!(g_branch_sample(&x, 0.0, 4, None, &phi).unwrap().is_empty());
        // complete orthonormal matrix preserves energy
        let y = g_branch_sample(&x, 1.0, 4, None, &phi).unwrap();
        assert!((crate::image::norm2(&y) - x.norm()).abs() < 1e-12);
        assert!(g_branch_sample(&x, 0.5, 3, None, &phi).is_err());
    }

    #[test]
    fn g_branch_identity_matrix_reorders_blocks() {
        let x = Image::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let eye =
            GaussianMatrix::from_data(4, 4, crate::operator::DenseMatrix::identity(4).into_vec()).unwrap();
        let op = GBranch::new(4, 4, 2, None, Arc::new(eye.clone())).unwrap();
        let y = op.apply(x.as_slice()).unwrap();
        assert_eq!(
            y,
            vec![0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0, 8.0, 9.0, 12.0, 13.0, 10.0, 11.0, 14.0, 15.0]
        );
        // with a permutation the blocks are cut from the scrambled image
        let perm = random_permutation(16, 3);
        let ys = g_branch_sample(&x, 1.0, 2, Some(&perm), &eye).unwrap();
        let mut xp = vec![0.0; 16];
        perm.apply_into(x.as_slice(), &mut xp);
        assert_eq!(ys, op.apply(&xp).unwrap());
    }

    #[test]
    fn layout_arithmetic() {
        let cfg = CosoConfig::new(64, 64, 0.1, Variant::DualNoFilter);
        let l = cfg.layout().unwrap();
        assert_eq!((l.m_d, l.m_g, l.num_blocks), (164, 61, 4));
        assert_eq!(l.total(), 408);

        let g = CosoConfig::new(64, 64, 0.06, Variant::GBranchScrambled)
            .layout()
            .unwrap();
        assert_eq!(g.m_g, 61);
        assert_eq!(g.g_len(), 244);

        assert!(CosoConfig::new(60, 64, 0.1, Variant::DctOnly).layout().is_err());
        assert!(CosoConfig::new(64, 64, 1.2, Variant::DctOnly).layout().is_err());
        assert!(CosoConfig::new(64, 64, 0.1, Variant::DualNoFilter)
            .with_split(0.05, 0.01)
            .layout()
            .is_err());
        let mut bad = CosoConfig::new(64, 64, 0.1, Variant::DctOnly);
        bad.gamma_g = Some(0.05);
        assert!(bad.layout().is_err());
    }

    #[test]
    fn measurement_length_tracks_gamma() {
        for &gamma in &[0.0, 0.01, 0.1, 0.25, 0.333, 0.5, 0.77, 1.0] {
            for v in Variant::ALL {
                let l = CosoConfig::new(64, 32, gamma, v).layout().unwrap();
                let n = 64.0 * 32.0;
                let slack = 1.0 + n / 1024.0;
                assert!((l.total() as f64 - gamma * n).abs() <= slack, "{v} {gamma}");
            }
        }
    }

    #[test]
    fn config_json_round_trip() {
        let mut cfg = CosoConfig::new(32, 64, 0.2, Variant::FullCoso).with_split(0.1, 0.1);
        cfg.weights_path = Some("w.cswt".into());
        let back = CosoConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let minimal = CosoConfig::from_json(r#"{"height": 64, "width": 64, "gamma": 0.1}"#).unwrap();
        assert_eq!(minimal.block, 32);
        assert_eq!(minimal.variant, Variant::DualNoFilter);
        assert!(CosoConfig::from_json(r#"{"height": 64, "width": 64, "gama": 0.1}"#).is_err());
    }

    #[test]
    fn all_variants_pass_probes() {
        let net = init_weights(4, 5).unwrap();
        for v in Variant::ALL {
            let cfg = CosoConfig::new(32, 32, 0.3, v).with_block(16);
            let op = build_coso(&cfg, Some(&net)).unwrap();
            assert_eq!(op.output_dim(), cfg.layout().unwrap().total());
            let adj = adjoint_probe(&op, 50, 1, 1e-10);
            let lin = linearity_probe(&op, 20, 2, 1e-10);
            assert!(adj.passed(), "{v}: {adj:?}");
            assert!(lin.passed(), "{v}: {lin:?}");
        }
    }

    #[test]
    fn full_coso_requires_network() {
        let cfg = CosoConfig::new(32, 32, 0.3, Variant::FullCoso).with_block(16);
        assert!(build_coso(&cfg, None).is_err());
    }

    #[test]
    fn block_gaussian_has_orthonormal_rows() {
        let cfg = CosoConfig::new(32, 32, 0.25, Variant::BlockGaussian).with_block(16);
        let op = build_coso(&cfg, None).unwrap();
        let m = op.output_dim();
        let mut e = vec![0.0; m];
        for i in 0..m {
            e[i] = 1.0;
            let back = op.apply(&op.apply_adjoint(&e).unwrap()).unwrap();
            for (j, v) in back.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-10);
            }
            e[i] = 0.0;
        }
    }

    #[test]
    fn permutation_explains_scrambled_vs_plain() {
        let scr = build_coso(
            &CosoConfig::new(32, 32, 0.2, Variant::DualNoFilter).with_block(16),
            None,
        )
        .unwrap();
        let plain = build_coso(
            &CosoConfig::new(32, 32, 0.2, Variant::DualNoPermute).with_block(16),
            None,
        )
        .unwrap();
        let x = noise(32, 32, 9);
        let perm = scr.g_branch().unwrap().permutation().unwrap().clone();
        let mut xp = vec![0.0; x.len()];
        perm.apply_into(x.as_slice(), &mut xp);
        let ys = scr.apply(x.as_slice()).unwrap();
        let yp = plain.apply(&xp).unwrap();
        let m_d = scr.layout().m_d;
        assert_eq!(&ys[m_d..], &yp[m_d..]);
        assert_eq!(&ys[..m_d], &plain.apply(x.as_slice()).unwrap()[..m_d]);
    }

    #[test]
    fn complete_dct_recovers_by_adjoint() {
        let op = build_coso(&CosoConfig::new(32, 32, 1.0, Variant::DctOnly), None).unwrap();
        let x = noise(32, 32, 4);
        let back = op.apply_adjoint(&op.apply(x.as_slice()).unwrap()).unwrap();
        for (a, b) in back.iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn branch_init_examples() {
        let x = noise(32, 32, 5);
        let cfg = CosoConfig::new(32, 32, 1.0, Variant::DualNoFilter).with_split(1.0, 0.0);
        let op = build_coso(&cfg, None).unwrap();
        let m = op.sample(&x).unwrap();
        let (d, g) = op.branch_init_measurement(&m).unwrap();
        for (a, b) in d.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(g.as_slice().iter().all(|&v| v == 0.0));

        let cfg = CosoConfig::new(32, 32, 1.0, Variant::FullCoso).with_split(0.0, 1.0);
        let op = build_coso(&cfg, Some(&FilterNet::identity())).unwrap();
        let (d, g) = op.branch_init(&op.apply(x.as_slice()).unwrap()).unwrap();
        assert!(d.as_slice().iter().all(|&v| v == 0.0));
        for (a, b) in g.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }

        let (z1, z2) = op.branch_init(&vec![0.0; op.output_dim()]).unwrap();
        assert!(z1.as_slice().iter().chain(z2.as_slice()).all(|&v| v == 0.0));
        assert!(op.branch_init(&[0.0; 3]).is_err());
    }

    #[test]
    fn combine_init_examples() {
        let x = noise(8, 8, 6);
        let z = Image::zeros(8, 8);
        assert_eq!(combine_init(&(x.clone(), x.clone())).unwrap(), x);
        let half = combine_init(&(x.clone(), z.clone())).unwrap();
        for (a, b) in half.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
        let scaled = combine_init(&(x.map(|v| 3.0 * v), z.clone())).unwrap();
        for (a, b) in scaled.as_slice().iter().zip(half.as_slice()) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
        assert!(combine_init(&(x, Image::zeros(4, 4))).is_err());
    }

    #[test]
    fn unmasked_plus_mask_matches_masked() {
        let net = init_weights(3, 1).unwrap();
        for v in Variant::ALL {
            let cfg = CosoConfig::new(32, 32, 0.1, v).with_block(16);
            let op = build_coso(&cfg, Some(&net)).unwrap();
            let (full, mask) = build_unmasked(&cfg, Some(&net)).unwrap();
            assert_eq!(mask.iter().filter(|&&b| b).count(), op.output_dim());
            let x = noise(32, 32, 7);
            let yf = full.apply(x.as_slice()).unwrap();
            let kept: Vec<f64> = yf
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .collect();
            let y = op.apply(x.as_slice()).unwrap();
            for (a, b) in kept.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12, "{v}");
            }
        }
    }
}
