//! Binary feature-grid (`TPFG`) and mask (`TPMK`) files.
//!
//! Both are little-endian regardless of host:
//!
//! ```text
//! TPFG: magic[4] version:u16 h:u32 w:u32 dims:u32 payload:f32[h*w*dims]
//! TPMK: magic[4] version:u16 h:u32 w:u32 k:u32    payload:u8[h*w]
//! ```
//!
//! Feature payloads are row-major with each vector contiguous.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{norm, FeatureGrid, GridMask, UNIT_TOL};

pub const FEATURE_MAGIC: [u8; 4] = *b"TPFG";
pub const MASK_MAGIC: [u8; 4] = *b"TPMK";
pub const VERSION: u16 = 1;
/// Norm tolerance applied when reading features stored at f32 precision.
pub const FILE_UNIT_TOL: f64 = 1e-5;

const HEADER_LEN: usize = 4 + 2 + 4 * 3;

struct Header {
    h: usize,
    w: usize,
    third: u32,
}

fn parse_header(bytes: &[u8], magic: [u8; 4]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().expect("four bytes");
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"));
    Ok(Header {
        h: word(6) as usize,
        w: word(10) as usize,
        third: word(14),
    })
}

fn write_header(out: &mut Vec<u8>, magic: [u8; 4], h: usize, w: usize, third: usize) -> Result<()> {
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Invalid(format!("{v} does not fit in a u32 header field")))
    };
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(h)?.to_le_bytes());
    out.extend_from_slice(&to_u32(w)?.to_le_bytes());
    out.extend_from_slice(&to_u32(third)?.to_le_bytes());
    Ok(())
}

fn expect_payload(bytes: &[u8], expected: usize) -> Result<&[u8]> {
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Invalid(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    Ok(payload)
}

pub fn encode_feature_grid(grid: &FeatureGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data().len() * 4);
    write_header(&mut out, FEATURE_MAGIC, grid.height(), grid.width(), grid.dims())?;
    for &x in grid.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parse a feature grid, widening to f64.
pub fn decode_feature_grid(bytes: &[u8]) -> Result<FeatureGrid> {
    let hdr = parse_header(bytes, FEATURE_MAGIC)?;
    let dims = hdr.third as usize;
    let count = hdr
        .h
        .checked_mul(hdr.w)
        .and_then(|n| n.checked_mul(dims))
        .ok_or_else(|| Error::Invalid("header dimensions overflow".into()))?;
    let payload = expect_payload(bytes, count * 4)?;
    let mut data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
        .collect();
    if dims == 0 || hdr.h == 0 || hdr.w == 0 {
        return Err(Error::Invalid("zero-sized feature grid".into()));
    }
    for (index, v) in data.chunks_exact_mut(dims).enumerate() {
        let n = norm(v);
        if !((n - 1.0).abs() <= FILE_UNIT_TOL) {
            return Err(Error::NormViolation { index, norm: n });
        }
        // Accepted but looser than the in-memory tolerance: pull back onto the sphere.
        if (n - 1.0).abs() > UNIT_TOL {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
    FeatureGrid::new(hdr.h, hdr.w, dims, data)
}

pub fn encode_mask(mask: &GridMask) -> Result<Vec<u8>> {
    if mask.classes() > u8::MAX as u32 {
        return Err(Error::Invalid(format!(
            "{} classes do not fit in u8 labels",
            mask.classes()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + mask.len());
    write_header(&mut out, MASK_MAGIC, mask.height(), mask.width(), mask.classes() as usize)?;
    out.extend(mask.labels().iter().map(|&l| l as u8));
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<GridMask> {
    let hdr = parse_header(bytes, MASK_MAGIC)?;
    let count = hdr
        .h
        .checked_mul(hdr.w)
        .ok_or_else(|| Error::Invalid("header dimensions overflow".into()))?;
    let payload = expect_payload(bytes, count)?;
    GridMask::new(
        hdr.h,
        hdr.w,
        hdr.third,
        payload.iter().map(|&b| b as u32).collect(),
    )
}

pub fn write_feature_grid(grid: &FeatureGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_grid(grid)?).map_err(|e| Error::io(path, e))
}

pub fn read_feature_grid(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let path = path.as_ref();
    decode_feature_grid(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_mask(mask: &GridMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(mask)?).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<GridMask> {
    let path = path.as_ref();
    decode_mask(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
