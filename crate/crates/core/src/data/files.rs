//! TEN1 tensor files and binary PGM masks.
//!
//! TEN1 layout (little-endian):
//!
//! ```text
//! "TEN1" | u8 dtype (0 = f32, 1 = f64) | u8 ndim | 2 zero bytes | u32 dims… | values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element};

pub const TEN1_MAGIC: &[u8; 4] = b"TEN1";

#[derive(Clone, Debug, PartialEq)]
pub enum Ten1 {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
}

impl Ten1 {
    pub fn shape(&self) -> &[usize] {
        match self {
            Ten1::F32 { shape, .. } | Ten1::F64 { shape, .. } => shape,
        }
    }

    pub fn values_f32(&self) -> Vec<f32> {
        match self {
            Ten1::F32 { data, .. } => data.clone(),
            Ten1::F64 { data, .. } => data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// H×W of a single image plane; leading dims must all be 1.
    pub fn plane_dims(&self) -> Result<(usize, usize)> {
        let s = self.shape();
        match s {
            [.., h, w] if s[..s.len() - 2].iter().all(|&d| d == 1) => Ok((*h, *w)),
            _ => Err(Error::parse(format!("expected a single image plane, got tensor shape {s:?}"))),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let (dtype, shape) = match self {
            Ten1::F32 { shape, .. } => (DType::F32, shape),
            Ten1::F64 { shape, .. } => (DType::F64, shape),
        };
        let ndim = u8::try_from(shape.len()).map_err(|_| Error::InvalidArgument("TEN1 supports at most 255 dims".into()))?;
        let numel: usize = shape.iter().product();
        let mut out = Vec::with_capacity(8 + 4 * shape.len() + numel * dtype.size());
        out.extend_from_slice(TEN1_MAGIC);
        out.extend_from_slice(&[dtype.code(), ndim, 0, 0]);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} does not fit in u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self {
            Ten1::F32 { data, .. } => data.iter().for_each(|v| v.write_le(&mut out)),
            Ten1::F64 { data, .. } => data.iter().for_each(|v| v.write_le(&mut out)),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != TEN1_MAGIC {
            return Err(Error::parse("not a TEN1 file (bad magic at byte 0)"));
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| Error::parse(format!("TEN1: unknown dtype code {} at byte 4", bytes[4])))?;
        let ndim = bytes[5] as usize;
        let header = 8 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::parse(format!("TEN1: header needs {header} bytes, file has {}", bytes.len())));
        }
        let shape: Vec<usize> = bytes[8..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let numel: usize = shape.iter().product();
        let expected = header + numel * dtype.size();
        if bytes.len() != expected {
            return Err(Error::parse(format!(
                "TEN1: shape {shape:?} needs {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let body = &bytes[header..];
        Ok(match dtype {
            DType::F32 => Ten1::F32 { shape, data: body.chunks_exact(4).map(f32::read_le).collect() },
            DType::F64 => Ten1::F64 { shape, data: body.chunks_exact(8).map(f64::read_le).collect() },
        })
    }
}

pub fn write_ten1(path: &Path, t: &Ten1) -> Result<()> {
    std::fs::write(path, t.encode()?).map_err(|e| Error::io(path, e))
}

pub fn read_ten1(path: &Path) -> Result<Ten1> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ten1::decode(&bytes).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(format!("PGM header truncated at byte {pos}")));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::parse(format!("not a binary PGM (magic {:?}, expected \"P5\")", fields[0])));
    }
    let num = |i: usize| {
        fields[i]
            .parse::<usize>()
            .map_err(|_| Error::parse(format!("PGM header field {:?} is not a number", fields[i])))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(format!("PGM maxval {maxval} unsupported (8-bit only)")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() < need {
        return Err(Error::parse(format!("PGM raster truncated: expected {need} bytes, found {}", raster.len())));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels: raster[..need].to_vec(),
    })
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidArgument(format!(
            "PGM {width}×{height} needs {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    std::fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

/// Writes values in [0, 1] as an 8-bit grey image.
pub fn write_pgm_gray<T: Element>(path: &Path, width: usize, height: usize, values: &[T]) -> Result<()> {
    let px: Vec<u8> = values
        .iter()
        .map(|v| (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pgm(path, width, height, &px)
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
}
