//! Little-endian helpers shared by the binary file formats.

use crate::error::{CsError, Result};
use std::io::{Read, Write};

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CsError::Format("truncated file".into()),
        _ => CsError::Io(e),
    })
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut got = [0u8; 4];
    read_exact(r, &mut got)?;
    if &got != magic {
        return Err(CsError::Format(format!("bad {what} magic {got:?}")));
    }
    Ok(())
}

pub(crate) fn expect_version(r: &mut impl Read, version: u16, what: &str) -> Result<()> {
    let got = read_u16(r)?;
    if got != version {
        return Err(CsError::Format(format!(
            "unsupported {what} version {got} (expected {version})"
        )));
    }
    Ok(())
}

pub(crate) fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

pub(crate) fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Reads `n` doubles. The buffer grows with the data actually present, so a
/// corrupt length field yields a truncation error instead of a huge allocation.
pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let want = n
        .checked_mul(8)
        .ok_or_else(|| CsError::Format("length field overflows".into()))?;
    let mut buf = Vec::new();
    r.take(want as u64).read_to_end(&mut buf)?;
    if buf.len() != want {
        return Err(CsError::Format("truncated file".into()));
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn expect_end(r: &mut impl Read) -> Result<()> {
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CsError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(())
}

pub(crate) fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn to_usize(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| CsError::Format(format!("{what} = {v} does not fit in memory")))
}
