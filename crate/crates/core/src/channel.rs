//! Measurement-domain degradations and the measurement file.

use crate::binio::{
    expect_end, expect_magic, expect_version, read_f64, read_f64s, read_u32, read_u64, read_u8, to_usize,
    write_f64s,
};
use crate::coso::{CosoConfig, CosoOperator, Variant};
use crate::error::{check_len, CsError, Result};
use crate::operator::LinearOperator;
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const FULL_PRECISION_BITS: u8 = 32;
const MAGIC: &[u8; 4] = b"CSMV";
const VERSION: u16 = 1;

/// Noise level `σ` on the 0–255 scale, quantizer bits `q`, noise seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub sigma: f64,
    pub qbits: u8,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            qbits: FULL_PRECISION_BITS,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(CsError::InvalidConfig(format!(
                "sigma {} must be non-negative",
                self.sigma
            )));
        }
        check_bits(self.qbits)
    }
}

fn check_bits(q: u8) -> Result<()> {
    if !(1..=FULL_PRECISION_BITS).contains(&q) {
        return Err(CsError::InvalidConfig(format!(
            "quantizer bits {q} outside 1..=32"
        )));
    }
    Ok(())
}

/// `y + n` with `n ~ N(0, (σ/255)²)` drawn from `seed`.
pub fn add_awgn(y: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(CsError::InvalidArgument(format!(
            "sigma {sigma} must be non-negative"
        )));
    }
    if sigma == 0.0 {
        return Ok(y.to_vec());
    }
    let std = sigma / 255.0;
    let mut rng = SeededRng::new(seed);
    Ok(y.iter().map(|v| v + std * rng.normal()).collect())
}

/// Quantized vector with the range used as side information.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub values: Vec<f64>,
    pub qbits: u8,
    /// `[min, max]` for 2–31 bits, `[−α, α]` for 1 bit, the data range for 32.
    pub range: (f64, f64),
}

/// Quantizes `y` with `q` bits, taking the range from `y` itself.
pub fn quantize(y: &[f64], q: u8) -> Result<Quantized> {
    check_bits(q)?;
    if y.is_empty() {
        return Err(CsError::InvalidArgument("cannot quantize an empty vector".into()));
    }
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    match q {
        FULL_PRECISION_BITS => Ok(Quantized {
            values: y.to_vec(),
            qbits: q,
            range: (lo, hi),
        }),
        1 => {
            let alpha = y.iter().map(|v| v.abs()).sum::<f64>() / y.len() as f64;
            Ok(Quantized {
                values: y.iter().map(|&v| if v >= 0.0 { alpha } else { -alpha }).collect(),
                qbits: q,
                range: (-alpha, alpha),
            })
        }
        _ => quantize_with_range(y, q, lo, hi),
    }
}

/// Mid-rise quantizer with `2^q` cells on `[lo, hi]`, dequantized to cell
/// centers. Values outside the range land in the end cells.
pub fn quantize_with_range(y: &[f64], q: u8, lo: f64, hi: f64) -> Result<Quantized> {
    check_bits(q)?;
    if !(2..FULL_PRECISION_BITS).contains(&q) {
        return quantize(y, q);
    }
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(CsError::InvalidArgument(format!(
            "bad quantizer range [{lo}, {hi}]"
        )));
    }
    let levels = (1u64 << q) as f64;
    let step = (hi - lo) / levels;
    let values = if step == 0.0 {
        vec![lo; y.len()]
    } else {
        y.iter()
            .map(|&v| {
                let k = ((v - lo) / step).floor().clamp(0.0, levels - 1.0);
                lo + (k + 0.5) * step
            })
            .collect()
    };
    Ok(Quantized {
        values,
        qbits: q,
        range: (lo, hi),
    })
}

/// AWGN followed by quantization.
pub fn apply_channel(y: &[f64], cfg: &ChannelConfig) -> Result<Quantized> {
    cfg.validate()?;
    let noisy = add_awgn(y, cfg.sigma, cfg.seed)?;
    if noisy.is_empty() {
        return Ok(Quantized {
            values: noisy,
            qbits: cfg.qbits,
            range: (0.0, 0.0),
        });
    }
    quantize(&noisy, cfg.qbits)
}

/// Header of a measurement file: the sampling configuration and the channel
/// that was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementHeader {
    pub m_d: usize,
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub variant: Variant,
    pub orthonormalize: bool,
    pub shared_filter: bool,
    pub gamma_d: f64,
    pub gamma_g: f64,
    pub perm_seed: u64,
    pub gauss_seed: u64,
    pub channel: ChannelConfig,
    pub q_range: (f64, f64),
}

impl MeasurementHeader {
    pub fn for_operator(op: &CosoOperator) -> Self {
        let cfg = op.config();
        let l = op.layout();
        Self {
            m_d: l.m_d,
            height: l.height,
            width: l.width,
            block: l.block,
            variant: cfg.variant,
            orthonormalize: cfg.orthonormalize,
            shared_filter: cfg.shared_filter,
            gamma_d: l.gamma_d,
            gamma_g: l.gamma_g,
            perm_seed: cfg.perm_seed,
            gauss_seed: cfg.gauss_seed,
            channel: ChannelConfig::default(),
            q_range: (0.0, 0.0),
        }
    }

    /// Sampling configuration that reproduces the operator (without weights).
    pub fn coso_config(&self) -> CosoConfig {
        let mut cfg = CosoConfig::new(self.height, self.width, self.gamma_d + self.gamma_g, self.variant)
            .with_block(self.block)
            .with_seeds(self.perm_seed, self.gauss_seed);
        if self.variant.uses_d_branch() {
            cfg.gamma_d = Some(self.gamma_d);
        }
        if self.variant.uses_g_branch() {
            cfg.gamma_g = Some(self.gamma_g);
        }
        cfg.orthonormalize = self.orthonormalize;
        cfg.shared_filter = self.shared_filter;
        cfg
    }

    pub fn is_degraded(&self) -> bool {
        self.channel.sigma > 0.0 || self.channel.qbits != FULL_PRECISION_BITS
    }
}

/// Measurement vector `[y_D, y_G]` with its header.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFile {
    pub header: MeasurementHeader,
    pub payload: Vec<f64>,
}

impl MeasurementFile {
    pub fn new(op: &CosoOperator, payload: Vec<f64>) -> Result<Self> {
        check_len(op.output_dim(), payload.len(), "measurement")?;
        Ok(Self {
            header: MeasurementHeader::for_operator(op),
            payload,
        })
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    /// Checks that `op` produces measurements of this shape and configuration.
    pub fn check_operator(&self, op: &CosoOperator) -> Result<()> {
        let mine = &self.header;
        let theirs = MeasurementHeader::for_operator(op);
        let same = mine.m_d == theirs.m_d
            && (mine.height, mine.width, mine.block) == (theirs.height, theirs.width, theirs.block)
            && mine.variant == theirs.variant
            && mine.orthonormalize == theirs.orthonormalize
            && mine.shared_filter == theirs.shared_filter
            && mine.gamma_d == theirs.gamma_d
            && mine.gamma_g == theirs.gamma_g
            && (mine.perm_seed, mine.gauss_seed) == (theirs.perm_seed, theirs.gauss_seed)
            && self.payload.len() == op.output_dim();
        if !same {
            return Err(CsError::InvalidConfig(
                "measurement header does not match the sampling configuration".into(),
            ));
        }
        Ok(())
    }

    /// Passes the payload through the channel and records it in the header.
    pub fn degrade(&self, cfg: &ChannelConfig) -> Result<Self> {
        if self.header.is_degraded() {
            return Err(CsError::InvalidArgument(
                "measurement has already been through a channel".into(),
            ));
        }
        let q = apply_channel(&self.payload, cfg)?;
        let mut header = self.header.clone();
        header.channel = *cfg;
        header.q_range = q.range;
        Ok(Self {
            header,
            payload: q.values,
        })
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
        let h = &self.header;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.payload.len() as u64).to_le_bytes())?;
        w.write_all(&(h.m_d as u64).to_le_bytes())?;
        for d in [h.height, h.width, h.block] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[h.variant.code(), h.orthonormalize as u8, h.shared_filter as u8])?;
        write_f64s(w, &[h.gamma_d, h.gamma_g])?;
        for s in [h.perm_seed, h.gauss_seed, h.channel.seed] {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&[h.channel.qbits])?;
        write_f64s(w, &[h.channel.sigma, h.q_range.0, h.q_range.1])?;
        write_f64s(w, &self.payload)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        expect_magic(r, MAGIC, "measurement")?;
        expect_version(r, VERSION, "measurement")?;
        let m = to_usize(read_u64(r)?, "M")?;
        let m_d = to_usize(read_u64(r)?, "m_D")?;
        let height = read_u32(r)? as usize;
        let width = read_u32(r)? as usize;
        let block = read_u32(r)? as usize;
        let code = read_u8(r)?;
        let variant = Variant::from_code(code)
            .ok_or_else(|| CsError::Format(format!("unknown variant code {code}")))?;
        let flag = |b: u8| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(CsError::Format(format!("bad flag byte {b}"))),
        };
        let orthonormalize = flag(read_u8(r)?)?;
        let shared_filter = flag(read_u8(r)?)?;
        let gamma_d = read_f64(r)?;
        let gamma_g = read_f64(r)?;
        let perm_seed = read_u64(r)?;
        let gauss_seed = read_u64(r)?;
        let noise_seed = read_u64(r)?;
        let qbits = read_u8(r)?;
        let sigma = read_f64(r)?;
        let q_range = (read_f64(r)?, read_f64(r)?);
        let payload = read_f64s(r, m)?;
        expect_end(r)?;
        if m_d > m {
            return Err(CsError::Format(format!("m_D = {m_d} exceeds M = {m}")));
        }
        let channel = ChannelConfig {
            sigma,
            qbits,
            seed: noise_seed,
        };
        channel.validate().map_err(|e| CsError::Format(e.to_string()))?;
        Ok(Self {
            header: MeasurementHeader {
                m_d,
                height,
                width,
                block,
                variant,
                orthonormalize,
                shared_filter,
                gamma_d,
                gamma_g,
                perm_seed,
                gauss_seed,
                channel,
                q_range,
            },
            payload,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coso::build_coso;

    #[test]
    fn awgn_examples() {
        let y = vec![0.1, 0.2, 0.3];
        assert_eq!(add_awgn(&y, 0.0, 1).unwrap(), y);
        assert_eq!(add_awgn(&y, 10.0, 7).unwrap(), add_awgn(&y, 10.0, 7).unwrap());
        assert_ne!(add_awgn(&y, 10.0, 7).unwrap(), add_awgn(&y, 10.0, 8).unwrap());
        assert!(add_awgn(&y, -1.0, 1).is_err());
    }

    #[test]
    fn awgn_variance() {
        let n = 100_000;
        let noisy = add_awgn(&vec![0.0; n], 10.0, 3).unwrap();
        let mean = noisy.iter().sum::<f64>() / n as f64;
        let var = noisy.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = (10.0f64 / 255.0).powi(2);
        assert!((var / want - 1.0).abs() <= 0.02, "{var} vs {want}");
    }

    #[test]
    fn quantize_examples() {
        let y = vec![0.3, -1.7, 2.5e-9, 42.0];
        assert_eq!(quantize(&y, 32).unwrap().values, y);
        let one = quantize(&[0.5, -0.3], 1).unwrap();
        assert!((one.values[0] - 0.4).abs() < 1e-15 && (one.values[1] + 0.4).abs() < 1e-15);
        assert_eq!(quantize(&[0.0, -2.0], 1).unwrap().values, vec![1.0, -1.0]);
        assert!(quantize(&[], 8).is_err());
        assert!(quantize(&y, 0).is_err());
        assert!(quantize(&y, 33).is_err());
        assert_eq!(quantize(&[3.0; 4], 8).unwrap().values, vec![3.0; 4]);
    }

    #[test]
    fn quantizer_error_bound() {
        let mut rng = SeededRng::new(5);
        let y: Vec<f64> = (0..10_000).map(|_| rng.uniform()).collect();
        let q = quantize(&y, 8).unwrap();
        let (lo, hi) = q.range;
        let bound = (hi - lo) / 256.0 / 2.0 + 1e-12;
        let worst = y
            .iter()
            .zip(&q.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst <= bound, "{worst} > {bound}");
        let distinct: std::collections::BTreeSet<u64> = q.values.iter().map(|v| v.to_bits()).collect();
        assert!(distinct.len() <= 256);
    }

    #[test]
    fn quantizer_is_idempotent_with_recorded_range() {
        let mut rng = SeededRng::new(6);
        let y: Vec<f64> = (0..500).map(|_| 3.0 * rng.normal()).collect();
        for q in [1u8, 2, 5, 8, 16, 31] {
            let first = quantize(&y, q).unwrap();
            let second = quantize_with_range(&first.values, q, first.range.0, first.range.1).unwrap();
            for (a, b) in first.values.iter().zip(&second.values) {
                assert!((a - b).abs() <= 1e-12, "q = {q}");
            }
        }
    }

    #[test]
    fn measurement_file_round_trip() {
        let op = build_coso(&CosoConfig::new(64, 64, 0.1, Variant::DualNoFilter), None).unwrap();
        let mut rng = SeededRng::new(1);
        let y: Vec<f64> = (0..op.output_dim()).map(|_| rng.normal()).collect();
        let file = MeasurementFile::new(&op, y).unwrap();
        assert_eq!(file.len(), 408);
        file.check_operator(&op).unwrap();
        let rebuilt = build_coso(&file.header.coso_config(), None).unwrap();
        file.check_operator(&rebuilt).unwrap();

        let mut bytes = Vec::new();
        file.write_to(&mut bytes).unwrap();
        assert_eq!(MeasurementFile::read_from(&mut bytes.as_slice()).unwrap(), file);
        assert!(MeasurementFile::read_from(&mut &bytes[..bytes.len() - 3]).is_err());

        let pass = file.degrade(&ChannelConfig::default()).unwrap();
        assert_eq!(pass.payload, file.payload);

        let cfg = ChannelConfig {
            sigma: 10.0,
            qbits: 1,
            seed: 4,
        };
        let deg = file.degrade(&cfg).unwrap();
        let alpha = deg.header.q_range.1;
        assert!(deg.payload.iter().all(|&v| v == alpha || v == -alpha));
        assert_eq!(deg, file.degrade(&cfg).unwrap());
        assert!(deg.degrade(&cfg).is_err());
        let mut bytes = Vec::new();
        deg.write_to(&mut bytes).unwrap();
        assert_eq!(MeasurementFile::read_from(&mut bytes.as_slice()).unwrap(), deg);

        let other = build_coso(&CosoConfig::new(64, 64, 0.1, Variant::DualNoPermute), None).unwrap();
        assert!(file.check_operator(&other).is_err());
    }

    #[test]
    fn single_branch_headers_rebuild() {
        for v in [
            Variant::DctOnly,
            Variant::BlockGaussian,
            Variant::GBranchScrambled,
        ] {
            let op = build_coso(&CosoConfig::new(32, 32, 0.3, v), None).unwrap();
            let file = MeasurementFile::new(&op, vec![0.0; op.output_dim()]).unwrap();
            let rebuilt = build_coso(&file.header.coso_config(), None).unwrap();
            file.check_operator(&rebuilt).unwrap();
        }
    }
}
