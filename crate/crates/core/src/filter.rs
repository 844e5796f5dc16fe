//! Ratio-conditioned linear filtering network.
//!
//! Seven 3×3 convolutions (stride 1, zero padding 1, no biases): layer 1 maps
//! the image to `C` channels, layers 2–6 are `C→C` and each has its output
//! channels scaled by a modulation head evaluated at the ratio pair
//! `z = [γ_D, γ_G]`, and layer 7 maps to the two filtered images `X_D`, `X_G`.
//! For fixed `z` the scalings fold into the weights ([`FilterNet::specialize`]),
//! leaving a purely linear map whose adjoint is the chain of transposed
//! convolutions.

use crate::binio::{expect_end, expect_magic, expect_version, read_f64s, read_u16};
use crate::error::{check_len, CsError, Result};
use crate::image::Image;
use crate::operator::LinearOperator;
use crate::rng::SeededRng;
use std::io::{Read, Write};
use std::path::Path;

pub const NUM_LAYERS: usize = 7;
pub const NUM_HEADS: usize = 5;
pub const MERGED_SIZE: usize = 2 * NUM_LAYERS + 1;
pub const DEFAULT_CHANNELS: usize = 16;

const MAGIC: &[u8; 4] = b"CSWT";
const VERSION: u16 = 1;

/// Sampling ratio pair fed to the modulation heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioPair {
    pub gamma_d: f64,
    pub gamma_g: f64,
}

impl RatioPair {
    pub fn new(gamma_d: f64, gamma_g: f64) -> Self {
        Self { gamma_d, gamma_g }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma_d", self.gamma_d), ("gamma_g", self.gamma_g)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CsError::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// 3×3 convolution weights laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    out_channels: usize,
    in_channels: usize,
    weights: Vec<f64>,
}

impl ConvLayer {
    pub fn new(out_channels: usize, in_channels: usize, weights: Vec<f64>) -> Result<Self> {
        check_len(out_channels * in_channels * 9, weights.len(), "conv weights")?;
        Ok(Self {
            out_channels,
            in_channels,
            weights,
        })
    }

    /// Each output channel copies input channel `o % in` through a center tap.
    pub fn delta(out_channels: usize, in_channels: usize) -> Self {
        let mut weights = vec![0.0; out_channels * in_channels * 9];
        for o in 0..out_channels {
            let i = o % in_channels;
            weights[(o * in_channels + i) * 9 + 4] = 1.0;
        }
        Self {
            out_channels,
            in_channels,
            weights,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    fn kernel(&self, o: usize, i: usize) -> &[f64] {
        let base = (o * self.in_channels + i) * 9;
        &self.weights[base..base + 9]
    }

    fn scaled(&self, scales: &[f64]) -> ConvLayer {
        let mut out = self.clone();
        for (o, chunk) in out.weights.chunks_exact_mut(self.in_channels * 9).enumerate() {
            chunk.iter_mut().for_each(|w| *w *= scales[o]);
        }
        out
    }
}

/// Fully connected map from `z` to per-channel scalings: `p = W z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationHead {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ModulationHead {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_len(bias.len() * 2, weight.len(), "modulation head weight")?;
        Ok(Self { weight, bias })
    }

    pub fn neutral(channels: usize) -> Self {
        Self {
            weight: vec![0.0; channels * 2],
            bias: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn scales(&self, z: RatioPair) -> Vec<f64> {
        self.bias
            .iter()
            .enumerate()
            .map(|(c, b)| self.weight[2 * c] * z.gamma_d + self.weight[2 * c + 1] * z.gamma_g + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterNet {
    channels: usize,
    layers: Vec<ConvLayer>,
    heads: Vec<ModulationHead>,
}

impl FilterNet {
    pub fn new(layers: Vec<ConvLayer>, heads: Vec<ModulationHead>) -> Result<Self> {
        if layers.len() != NUM_LAYERS || heads.len() != NUM_HEADS {
            return Err(CsError::InvalidArgument(format!(
                "filter net needs {NUM_LAYERS} layers and {NUM_HEADS} heads"
            )));
        }
        let c = layers[0].out_channels;
        let shape_ok = c >= 1
            && layers[0].in_channels == 1
            && layers[1..6]
                .iter()
                .all(|l| l.in_channels == c && l.out_channels == c)
            && layers[6].in_channels == c
            && layers[6].out_channels == 2
            && heads.iter().all(|h| h.channels() == c);
        if !shape_ok {
            return Err(CsError::InvalidArgument(
                "filter net layer shapes must be 1→C, (C→C)×5, C→2 with C-channel heads".into(),
            ));
        }
        Ok(Self {
            channels: c,
            layers,
            heads,
        })
    }

    /// The network that passes its input through unchanged to both outputs.
    pub fn identity() -> Self {
        let mut layers = vec![ConvLayer::delta(1, 1); 6];
        layers.push(ConvLayer::delta(2, 1));
        Self {
            channels: 1,
            layers,
            heads: vec![ModulationHead::neutral(1); NUM_HEADS],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn heads(&self) -> &[ModulationHead] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [ModulationHead] {
        &mut self.heads
    }

    /// Folds the modulation scalings for `z` into the convolution weights.
    pub fn specialize(&self, z: RatioPair) -> Result<LinearFilter> {
        z.validate()?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, layer)| match k {
                1..=5 => layer.scaled(&self.heads[k - 1].scales(z)),
                _ => layer.clone(),
            })
            .collect();
        Ok(LinearFilter { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.channels as u16).to_le_bytes())?;
        for layer in &self.layers {
            for dim in [layer.out_channels, layer.in_channels, 3, 3] {
                w.write_all(&(dim as u16).to_le_bytes())?;
            }
            for v in &layer.weights {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for head in &self.heads {
            for v in head.weight.iter().chain(&head.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        expect_magic(r, MAGIC, "weights")?;
        expect_version(r, VERSION, "weights")?;
        let channels = read_u16(r)? as usize;
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        for _ in 0..NUM_LAYERS {
            let out = read_u16(r)? as usize;
            let inp = read_u16(r)? as usize;
            let (kh, kw) = (read_u16(r)?, read_u16(r)?);
            if (kh, kw) != (3, 3) {
                return Err(CsError::Format(format!("kernel must be 3x3, got {kh}x{kw}")));
            }
            let weights = read_f64s(r, out * inp * 9)?;
            layers.push(ConvLayer::new(out, inp, weights)?);
        }
        let mut heads = Vec::with_capacity(NUM_HEADS);
        for _ in 0..NUM_HEADS {
            let weight = read_f64s(r, channels * 2)?;
            let bias = read_f64s(r, channels)?;
            heads.push(ModulationHead::new(weight, bias)?);
        }
        expect_end(r)?;
        let net = FilterNet::new(layers, heads).map_err(|e| CsError::Format(e.to_string()))?;
        if net.channels != channels {
            return Err(CsError::Format(format!(
                "header says C = {channels}, layers say {}",
                net.channels
            )));
        }
        Ok(net)
    }
}

/// Random network: Gaussian weights with variance `1/fan_in` (the linear-gain
/// Kaiming scale) and modulation heads fixed at `p = 1`.
pub fn init_weights(channels: usize, seed: u64) -> Result<FilterNet> {
    if channels == 0 {
        return Err(CsError::InvalidArgument("channel width must be >= 1".into()));
    }
    let mut rng = SeededRng::new(seed);
    let shapes = [
        (channels, 1),
        (channels, channels),
        (channels, channels),
        (channels, channels),
        (channels, channels),
        (channels, channels),
        (2, channels),
    ];
    let layers = shapes
        .iter()
        .map(|&(out, inp)| {
            let std = (1.0 / (inp * 9) as f64).sqrt();
            let w = (0..out * inp * 9).map(|_| std * rng.normal()).collect();
            ConvLayer::new(out, inp, w)
        })
        .collect::<Result<Vec<_>>>()?;
    FilterNet::new(layers, vec![ModulationHead::neutral(channels); NUM_HEADS])
}

/// Runs the network on `img` for ratios `z`, returning `(X_D, X_G)`.
pub fn filter_forward(net: &FilterNet, img: &Image, z: RatioPair) -> Result<(Image, Image)> {
    if img.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(CsError::NonFinite("filter input".into()));
    }
    let lin = net.specialize(z)?;
    let (h, w) = (img.height(), img.width());
    let out = lin.forward_features(img.as_slice(), h, w);
    let n = h * w;
    Ok((
        Image::new(h, w, out[..n].to_vec())?,
        Image::new(h, w, out[n..].to_vec())?,
    ))
}

/// Row/column bounding box `[r0, r1) × [c0, c1)` of the nonzero support.
#[derive(Debug, Clone, Copy)]
struct Support {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

impl Support {
    fn of(data: &[f64], channels: usize, h: usize, w: usize) -> Option<Support> {
        let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
        for ch in 0..channels {
            for r in 0..h {
                let row = &data[(ch * h + r) * w..(ch * h + r + 1) * w];
                if let Some(first) = row.iter().position(|&v| v != 0.0) {
                    let last = row.iter().rposition(|&v| v != 0.0).unwrap();
                    r0 = r0.min(r);
                    r1 = r1.max(r + 1);
                    c0 = c0.min(first);
                    c1 = c1.max(last + 1);
                }
            }
        }
        (r0 < r1).then_some(Support { r0, r1, c0, c1 })
    }
}

/// Zero-padded 3×3 cross-correlation, `out[o] = Σ_i k[o][i] ⋆ x[i]`, or its
/// transpose. Work is confined to the dilated support of the input, which
/// keeps basis-vector probes cheap.
fn conv3x3(layer: &ConvLayer, x: &[f64], h: usize, w: usize, transpose: bool) -> Vec<f64> {
    let (src_ch, dst_ch) = if transpose {
        (layer.out_channels, layer.in_channels)
    } else {
        (layer.in_channels, layer.out_channels)
    };
    let mut out = vec![0.0; dst_ch * h * w];
    let Some(sup) = Support::of(x, src_ch, h, w) else {
        return out;
    };
    for o in 0..layer.out_channels {
        for i in 0..layer.in_channels {
            let k = layer.kernel(o, i);
            let (s, d) = if transpose { (o, i) } else { (i, o) };
            let src = &x[s * h * w..(s + 1) * h * w];
            let dst = &mut out[d * h * w..(d + 1) * h * w];
            for (t, &kv) in k.iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                let dy = t as isize / 3 - 1;
                let dx = t as isize % 3 - 1;
                // forward: dst[p] += kv * src[p + d]; transpose: dst[p + d] += kv * src[p]
                let (dy, dx) = if transpose { (-dy, -dx) } else { (dy, dx) };
                let r_lo = (sup.r0 as isize - dy).max(0) as usize;
                let r_hi = (sup.r1 as isize - dy).min(h as isize).max(0) as usize;
                let c_lo = (sup.c0 as isize - dx).max(0) as usize;
                let c_hi = (sup.c1 as isize - dx).min(w as isize).max(0) as usize;
                if c_lo >= c_hi {
                    continue;
                }
                for r in r_lo..r_hi {
                    let rs = (r as isize + dy) as usize;
                    let cs = (c_lo as isize + dx) as usize;
                    let src_row = &src[rs * w + cs..rs * w + cs + (c_hi - c_lo)];
                    let dst_row = &mut dst[r * w + c_lo..r * w + c_hi];
                    for (a, b) in dst_row.iter_mut().zip(src_row) {
                        *a += kv * b;
                    }
                }
            }
        }
    }
    out
}

/// The network with modulation folded in: seven plain convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFilter {
    layers: Vec<ConvLayer>,
}

impl LinearFilter {
    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    /// Single-channel image in, two stacked output channels out.
    pub fn forward_features(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut feat = x.to_vec();
        for layer in &self.layers {
            feat = conv3x3(layer, &feat, h, w, false);
        }
        feat
    }

    /// Transpose of [`LinearFilter::forward_features`].
    pub fn adjoint_features(&self, y: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut feat = y.to_vec();
        for layer in self.layers.iter().rev() {
            feat = conv3x3(layer, &feat, h, w, true);
        }
        feat
    }

    /// Collapses the seven layers into one 15×15 kernel per output channel.
    pub fn merge(&self) -> (MergedKernel, MergedKernel) {
        // effective kernels from the input to every channel of the current layer
        let first = &self.layers[0];
        let mut radius = 1usize;
        let mut eff: Vec<Vec<f64>> = (0..first.out_channels)
            .map(|o| first.kernel(o, 0).to_vec())
            .collect();
        for layer in &self.layers[1..] {
            let size = 2 * radius + 1;
            let new_radius = radius + 1;
            let new_size = 2 * new_radius + 1;
            let mut next = vec![vec![0.0; new_size * new_size]; layer.out_channels];
            for (o, acc) in next.iter_mut().enumerate() {
                for (i, prev) in eff.iter().enumerate() {
                    let k = layer.kernel(o, i);
                    for (t, &kv) in k.iter().enumerate() {
                        if kv == 0.0 {
                            continue;
                        }
                        let (jy, jx) = (t / 3, t % 3);
                        for py in 0..size {
                            let row = &prev[py * size..(py + 1) * size];
                            let dst = &mut acc[(py + jy) * new_size + jx..(py + jy) * new_size + jx + size];
                            for (a, b) in dst.iter_mut().zip(row) {
                                *a += kv * b;
                            }
                        }
                    }
                }
            }
            eff = next;
            radius = new_radius;
        }
        debug_assert_eq!(2 * radius + 1, MERGED_SIZE);
        let mut it = eff.into_iter().map(|weights| MergedKernel { weights });
        (it.next().unwrap(), it.next().unwrap())
    }
}

/// Equivalent single 15×15 correlation kernel of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedKernel {
    weights: Vec<f64>,
}

impl MergedKernel {
    pub fn size(&self) -> usize {
        MERGED_SIZE
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * MERGED_SIZE + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    /// Zero-padded cross-correlation of `img` with this kernel (same size).
    pub fn apply(&self, img: &Image) -> Image {
        let (h, w) = (img.height() as isize, img.width() as isize);
        let r = (MERGED_SIZE / 2) as isize;
        Image::from_fn(img.height(), img.width(), |y, x| {
            let mut acc = 0.0;
            for ky in 0..MERGED_SIZE as isize {
                let yy = y as isize + ky - r;
                if yy < 0 || yy >= h {
                    continue;
                }
                for kx in 0..MERGED_SIZE as isize {
                    let xx = x as isize + kx - r;
                    if xx < 0 || xx >= w {
                        continue;
                    }
                    acc += self.weights[(ky * MERGED_SIZE as isize + kx) as usize]
                        * img.get(yy as usize, xx as usize);
                }
            }
            acc
        })
    }
}

/// Merged kernels `(K_D, K_G)` of `net` at ratios `z`. Convolving with them
/// matches [`filter_forward`] away from the image border (7+ pixels in).
pub fn merge_kernels(net: &FilterNet, z: RatioPair) -> Result<(MergedKernel, MergedKernel)> {
    Ok(net.specialize(z)?.merge())
}

/// The network at fixed ratios as an operator ℝᴺ → ℝ²ᴺ with output
/// `[X_D; X_G]`. With `shared`, both halves come from the first output
/// channel.
pub struct FilterOperator {
    filter: LinearFilter,
    height: usize,
    width: usize,
    shared: bool,
}

impl FilterOperator {
    pub fn new(net: &FilterNet, z: RatioPair, height: usize, width: usize, shared: bool) -> Result<Self> {
        Ok(Self {
            filter: net.specialize(z)?,
            height,
            width,
            shared,
        })
    }
}

impl LinearOperator for FilterOperator {
    fn input_dim(&self) -> usize {
        self.height * self.width
    }
    fn output_dim(&self) -> usize {
        2 * self.height * self.width
    }
    fn kind(&self) -> String {
        if self.shared {
            "filter(shared)".into()
        } else {
            "filter".into()
        }
    }
    fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        let out = self.filter.forward_features(x, self.height, self.width);
        let n = x.len();
        if self.shared {
            y[..n].copy_from_slice(&out[..n]);
            y[n..].copy_from_slice(&out[..n]);
        } else {
            y.copy_from_slice(&out);
        }
    }
    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let n = x.len();
        let back = if self.shared {
            let mut g = vec![0.0; 2 * n];
            for i in 0..n {
                g[i] = y[i] + y[n + i];
            }
            self.filter.adjoint_features(&g, self.height, self.width)
        } else {
            self.filter.adjoint_features(y, self.height, self.width)
        };
        x.copy_from_slice(&back);
    }
}
