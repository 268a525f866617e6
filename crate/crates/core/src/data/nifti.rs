//! Minimal single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Only uncompressed files with the `"n+1\0"` magic are accepted. Both byte
//! orders are read; the order is detected from `sizeof_hdr`.

use crate::data::{Modality, SliceSample};
use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

mod off {
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const MAGIC: usize = 344;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiType {
    U8,
    I16,
    F32,
    F64,
}

impl NiftiType {
    pub fn code(self) -> i16 {
        match self {
            NiftiType::U8 => 2,
            NiftiType::I16 => 4,
            NiftiType::F32 => 16,
            NiftiType::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(NiftiType::U8),
            4 => Some(NiftiType::I16),
            16 => Some(NiftiType::F32),
            64 => Some(NiftiType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            NiftiType::U8 => 1,
            NiftiType::I16 => 2,
            NiftiType::F32 => 4,
            NiftiType::F64 => 8,
        }
    }
}

/// Voxel values in file order, decoded to native numbers.
#[derive(Clone, Debug, PartialEq)]
pub enum NiftiData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NiftiData {
    pub fn dtype(&self) -> NiftiType {
        match self {
            NiftiData::U8(_) => NiftiType::U8,
            NiftiData::I16(_) => NiftiType::I16,
            NiftiData::F32(_) => NiftiType::F32,
            NiftiData::F64(_) => NiftiType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NiftiData::U8(v) => v.len(),
            NiftiData::I16(v) => v.len(),
            NiftiData::F32(v) => v.len(),
            NiftiData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bitwise equality (NaN payloads and signed zeros included).
    pub fn bits_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (NiftiData::U8(a), NiftiData::U8(b)) => a == b,
            (NiftiData::I16(a), NiftiData::I16(b)) => a == b,
            (NiftiData::F32(a), NiftiData::F32(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (NiftiData::F64(a), NiftiData::F64(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }

    fn encode(&self, big_endian: bool, out: &mut Vec<u8>) {
        macro_rules! put {
            ($v:expr) => {
                for x in $v {
                    out.extend_from_slice(&if big_endian { x.to_be_bytes() } else { x.to_le_bytes() });
                }
            };
        }
        match self {
            NiftiData::U8(v) => out.extend_from_slice(v),
            NiftiData::I16(v) => put!(v),
            NiftiData::F32(v) => put!(v),
            NiftiData::F64(v) => put!(v),
        }
    }

    fn decode(dtype: NiftiType, bytes: &[u8], big_endian: bool) -> Self {
        macro_rules! get {
            ($t:ty, $n:expr) => {
                bytes
                    .chunks_exact($n)
                    .map(|c| {
                        let a: [u8; $n] = c.try_into().expect("chunk size");
                        if big_endian {
                            <$t>::from_be_bytes(a)
                        } else {
                            <$t>::from_le_bytes(a)
                        }
                    })
                    .collect()
            };
        }
        match dtype {
            NiftiType::U8 => NiftiData::U8(bytes.to_vec()),
            NiftiType::I16 => NiftiData::I16(get!(i16, 2)),
            NiftiType::F32 => NiftiData::F32(get!(f32, 4)),
            NiftiType::F64 => NiftiData::F64(get!(f64, 8)),
        }
    }

    fn to_f64(&self) -> Vec<f64> {
        match self {
            NiftiData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            NiftiData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            NiftiData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            NiftiData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    /// `dim[1..=dim[0]]`.
    pub dims: Vec<usize>,
    pub datatype: NiftiType,
    pub pixdim: [f32; 8],
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: usize,
    pub big_endian: bool,
    pub header: Vec<u8>,
    pub data: NiftiData,
}

impl NiftiVolume {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// `(nx, ny, nz)`; fewer than three dims are padded with 1.
    pub fn shape3(&self) -> Result<(usize, usize, usize)> {
        if self.dims.iter().skip(3).any(|&d| d > 1) {
            return Err(Error::InvalidArgument(format!(
                "expected a 3-D volume, got dims {:?}",
                self.dims
            )));
        }
        let d = |i: usize| self.dims.get(i).copied().unwrap_or(1);
        Ok((d(0), d(1), d(2)))
    }

    /// Voxel values with `scl_slope`/`scl_inter` applied when the slope is non-zero.
    pub fn values(&self) -> Vec<f64> {
        let mut v = self.data.to_f64();
        if self.scl_slope != 0.0 && self.scl_slope.is_finite() && self.scl_inter.is_finite() {
            let (m, b) = (self.scl_slope as f64, self.scl_inter as f64);
            if (m, b) != (1.0, 0.0) {
                v.iter_mut().for_each(|x| *x = *x * m + b);
            }
        }
        v
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        self.bytes[at..at + N].try_into().expect("header is 348 bytes")
    }

    fn i16(&self, at: usize) -> i16 {
        let a = self.arr::<2>(at);
        if self.big_endian {
            i16::from_be_bytes(a)
        } else {
            i16::from_le_bytes(a)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let a = self.arr::<4>(at);
        if self.big_endian {
            f32::from_be_bytes(a)
        } else {
            f32::from_le_bytes(a)
        }
    }
}

pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiVolume> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(Error::parse("gzip-compressed stream; decompress the .nii.gz first"));
    }
    if bytes.len() < DEFAULT_VOX_OFFSET {
        return Err(Error::parse(format!(
            "NIfTI file too short: {} bytes, need at least {DEFAULT_VOX_OFFSET}",
            bytes.len()
        )));
    }
    let raw = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let big_endian = if i32::from_le_bytes(raw) == HEADER_LEN as i32 {
        false
    } else if i32::from_be_bytes(raw) == HEADER_LEN as i32 {
        true
    } else {
        return Err(Error::parse(format!(
            "bad sizeof_hdr at offset 0: {} (expected 348 in either byte order)",
            i32::from_le_bytes(raw)
        )));
    };
    let magic = &bytes[off::MAGIC..off::MAGIC + 4];
    if magic != MAGIC {
        let hint = if magic == b"ni1\0" { " (header/image pairs are not supported)" } else { "" };
        return Err(Error::parse(format!(
            "bad magic at offset {}: {:?}, expected \"n+1\\0\"{hint}",
            off::MAGIC,
            String::from_utf8_lossy(magic)
        )));
    }
    let r = Reader { bytes, big_endian };

    let ndim = r.i16(off::DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::parse(format!("dim[0] = {ndim} at offset {} is outside 1..=7", off::DIM)));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 1..=ndim as usize {
        let d = r.i16(off::DIM + 2 * i);
        if d < 1 {
            return Err(Error::parse(format!("dim[{i}] = {d} at offset {} is not positive", off::DIM + 2 * i)));
        }
        dims.push(d as usize);
    }

    let code = r.i16(off::DATATYPE);
    let datatype = NiftiType::from_code(code).ok_or_else(|| {
        Error::parse(format!(
            "unsupported datatype code {code} at offset {} (supported: 2 u8, 4 i16, 16 f32, 64 f64)",
            off::DATATYPE
        ))
    })?;
    let bitpix = r.i16(off::BITPIX);
    if bitpix as usize != 8 * datatype.size() {
        return Err(Error::parse(format!(
            "bitpix {bitpix} at offset {} does not match datatype {code}",
            off::BITPIX
        )));
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = r.f32(off::PIXDIM + 4 * i);
    }
    let vox = r.f32(off::VOX_OFFSET);
    if !(vox >= HEADER_LEN as f32) || vox.fract() != 0.0 {
        return Err(Error::parse(format!("vox_offset {vox} at offset {} is invalid", off::VOX_OFFSET)));
    }
    let vox_offset = vox as usize;
    let count: usize = dims.iter().product();
    let need = count * datatype.size();
    let available = bytes.len().saturating_sub(vox_offset);
    if available < need {
        return Err(Error::parse(format!(
            "truncated voxel data: expected {need} bytes from offset {vox_offset}, found {available}"
        )));
    }
    let data = NiftiData::decode(datatype, &bytes[vox_offset..vox_offset + need], big_endian);
    Ok(NiftiVolume {
        dims,
        datatype,
        pixdim,
        scl_slope: r.f32(off::SCL_SLOPE),
        scl_inter: r.f32(off::SCL_INTER),
        vox_offset,
        big_endian,
        header: bytes[..HEADER_LEN].to_vec(),
        data,
    })
}

pub fn read_nifti(path: &std::path::Path) -> Result<NiftiVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes).map_err(|e| Error::parse(format!("{}: {e}", path.display())))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NiftiWriteOptions {
    pub big_endian: bool,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

impl Default for NiftiWriteOptions {
    fn default() -> Self {
        NiftiWriteOptions {
            big_endian: false,
            scl_slope: 1.0,
            scl_inter: 0.0,
        }
    }
}

pub fn write_nifti(dims: &[usize], data: &NiftiData, opts: &NiftiWriteOptions) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 7 || dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(Error::InvalidArgument(format!("NIfTI dims {dims:?} out of range")));
    }
    let count: usize = dims.iter().product();
    if count != data.len() {
        return Err(Error::InvalidArgument(format!(
            "NIfTI dims {dims:?} describe {count} voxels, data has {}",
            data.len()
        )));
    }
    let be = opts.big_endian;
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    let mut put = |at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    let i16b = |v: i16| if be { v.to_be_bytes() } else { v.to_le_bytes() };
    let f32b = |v: f32| if be { v.to_be_bytes() } else { v.to_le_bytes() };
    put(0, &if be { 348i32.to_be_bytes() } else { 348i32.to_le_bytes() });
    put(off::DIM, &i16b(dims.len() as i16));
    for (i, &d) in dims.iter().enumerate() {
        put(off::DIM + 2 * (i + 1), &i16b(d as i16));
    }
    for i in dims.len() + 1..8 {
        put(off::DIM + 2 * i, &i16b(1));
    }
    let dtype = data.dtype();
    put(off::DATATYPE, &i16b(dtype.code()));
    put(off::BITPIX, &i16b(8 * dtype.size() as i16));
    for i in 0..8 {
        put(off::PIXDIM + 4 * i, &f32b(1.0));
    }
    put(off::VOX_OFFSET, &f32b(DEFAULT_VOX_OFFSET as f32));
    put(off::SCL_SLOPE, &f32b(opts.scl_slope));
    put(off::SCL_INTER, &f32b(opts.scl_inter));
    put(off::MAGIC, MAGIC);
    h.reserve(count * dtype.size());
    data.encode(be, &mut h);
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlicePolicy {
    AllSlices,
    /// The single slice with the most label voxels (earliest on ties).
    MaxTumorArea,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `(v − min)/(max − min)` per slice; constant slices become zeros.
    #[default]
    MinMax,
    /// `(v − mean)/std` per slice; constant slices become zeros.
    ZScore,
}

pub fn normalize_plane(values: &[f64], norm: Normalization) -> Vec<f32> {
    match norm {
        Normalization::MinMax => {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                values.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
            } else {
                vec![0.0; values.len()]
            }
        }
        Normalization::ZScore => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var > 0.0 {
                let sd = var.sqrt();
                values.iter().map(|&v| ((v - mean) / sd) as f32).collect()
            } else {
                vec![0.0; values.len()]
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SliceOptions {
    pub policy: SlicePolicy,
    pub normalization: Normalization,
    /// Sample ids are `{prefix}_z{z:03}`.
    pub prefix: String,
    pub modality: Modality,
}

/// Axial (x, y) planes indexed by z. The image is H = ny rows by W = nx columns.
pub fn extract_axial(image: &NiftiVolume, label: Option<&NiftiVolume>, opts: &SliceOptions) -> Result<Vec<SliceSample>> {
    let (nx, ny, nz) = image.shape3()?;
    let plane = nx * ny;
    let labels = match label {
        Some(l) => {
            let ld = l.shape3()?;
            if ld != (nx, ny, nz) {
                return Err(Error::ShapeMismatch {
                    op: "extract_axial",
                    left: vec![nx, ny, nz],
                    right: vec![ld.0, ld.1, ld.2],
                });
            }
            Some(l.values().iter().map(|&v| u8::from(v > 0.0)).collect::<Vec<u8>>())
        }
        None => None,
    };
    let zs: Vec<usize> = match opts.policy {
        SlicePolicy::AllSlices => (0..nz).collect(),
        SlicePolicy::MaxTumorArea => {
            let labels = labels.as_ref().ok_or_else(|| {
                Error::InvalidArgument("max-tumor-area slice selection needs a label volume".into())
            })?;
            let areas = labels.chunks(plane).map(|p| p.iter().filter(|&&m| m == 1).count());
            // first z with the largest area
            let (best, _) = areas
                .enumerate()
                .fold((0, 0), |(bz, ba), (z, a)| if a > ba { (z, a) } else { (bz, ba) });
            vec![best]
        }
    };
    let values = image.values();
    zs.into_iter()
        .map(|z| {
            let img = normalize_plane(&values[z * plane..(z + 1) * plane], opts.normalization);
            let mask = match &labels {
                Some(l) => l[z * plane..(z + 1) * plane].to_vec(),
                None => vec![0; plane],
            };
            SliceSample::new(format!("{}_z{z:03}", opts.prefix), opts.modality, ny, nx, img, mask)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(policy: SlicePolicy) -> SliceOptions {
        SliceOptions {
            policy,
            normalization: Normalization::MinMax,
            prefix: "case".into(),
            modality: Modality::T2f,
        }
    }

    #[test]
    fn f32_round_trip_bit_exact() {
        let data = NiftiData::F32((0..16 * 16 * 8).map(|i| (i as f32).sin() * 100.0).collect());
        let bytes = write_nifti(&[16, 16, 8], &data, &NiftiWriteOptions::default()).unwrap();
        let vol = parse_nifti(&bytes).unwrap();
        assert_eq!(vol.dims, vec![16, 16, 8]);
        assert_eq!(vol.datatype, NiftiType::F32);
        assert!(vol.data.bits_eq(&data));
        assert!(!vol.big_endian);
    }

    #[test]
    fn byte_swapped_header_is_detected() {
        let data = NiftiData::I16((0..60).map(|i| i * 37 - 900).collect());
        let bytes = write_nifti(&[5, 4, 3], &data, &NiftiWriteOptions { big_endian: true, ..Default::default() }).unwrap();
        assert_eq!(i32::from_le_bytes(bytes[..4].try_into().unwrap()), 1543569408);
        let vol = parse_nifti(&bytes).unwrap();
        assert!(vol.big_endian);
        assert!(vol.data.bits_eq(&data));
    }

    #[test]
    fn scaling_is_applied() {
        let data = NiftiData::U8(vec![0, 1, 2, 3]);
        let o = NiftiWriteOptions { scl_slope: 2.0, scl_inter: -1.0, ..Default::default() };
        let vol = parse_nifti(&write_nifti(&[2, 2, 1], &data, &o).unwrap()).unwrap();
        assert_eq!(vol.values(), vec![-1.0, 1.0, 3.0, 5.0]);
        let o = NiftiWriteOptions { scl_slope: 0.0, scl_inter: 7.0, ..Default::default() };
        let vol = parse_nifti(&write_nifti(&[2, 2, 1], &data, &o).unwrap()).unwrap();
        assert_eq!(vol.values(), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn parse_errors_name_offsets_and_counts() {
        let bytes = write_nifti(&[4, 4, 2], &NiftiData::F32(vec![1.0; 32]), &NiftiWriteOptions::default()).unwrap();
        let mut bad = bytes.clone();
        bad[344] = b'x';
        assert!(parse_nifti(&bad).unwrap_err().to_string().contains("offset 344"));
        let mut bad = bytes.clone();
        bad[70] = 8;
        assert!(parse_nifti(&bad).unwrap_err().to_string().contains("datatype code 8"));
        let err = parse_nifti(&bytes[..bytes.len() - 4]).unwrap_err().to_string();
        assert!(err.contains("expected 128") && err.contains("found 124"), "{err}");
        assert!(parse_nifti(&[0x1f, 0x8b, 8, 0]).is_err());
        assert!(parse_nifti(&bytes[..100]).is_err());
    }

    #[test]
    fn vox_offset_is_respected() {
        let data = NiftiData::U8(vec![9, 8, 7, 6]);
        let mut bytes = write_nifti(&[2, 2], &data, &NiftiWriteOptions::default()).unwrap();
        bytes.splice(352..352, [0xAA; 16]);
        bytes[108..112].copy_from_slice(&368f32.to_le_bytes());
        let vol = parse_nifti(&bytes).unwrap();
        assert!(vol.data.bits_eq(&data));
    }

    #[test]
    fn all_slices_and_constant_plane() {
        let (nx, ny, nz) = (3, 2, 4);
        let mut v: Vec<f32> = (0..nx * ny * nz).map(|i| i as f32).collect();
        v[nx * ny..2 * nx * ny].fill(5.0);
        let vol = parse_nifti(&write_nifti(&[nx, ny, nz], &NiftiData::F32(v), &NiftiWriteOptions::default()).unwrap()).unwrap();
        let s = extract_axial(&vol, None, &opts(SlicePolicy::AllSlices)).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!((s[0].height, s[0].width), (2, 3));
        assert_eq!(s[0].image, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert!(s[1].image.iter().all(|&x| x == 0.0));
        assert_eq!(s[3].id, "case_z003");
    }

    #[test]
    fn max_area_policy_picks_the_tumor_slice() {
        let (nx, ny, nz) = (8, 8, 100);
        let img = NiftiData::I16((0..nx * ny * nz).map(|i| (i % 251) as i16).collect());
        let mut lab = vec![0u8; nx * ny * nz];
        for i in 0..10 {
            lab[70 * nx * ny + i] = 1;
        }
        lab[30 * nx * ny] = 2;
        let w = NiftiWriteOptions::default();
        let iv = parse_nifti(&write_nifti(&[nx, ny, nz], &img, &w).unwrap()).unwrap();
        let lv = parse_nifti(&write_nifti(&[nx, ny, nz], &NiftiData::U8(lab), &w).unwrap()).unwrap();
        let s = extract_axial(&iv, Some(&lv), &opts(SlicePolicy::MaxTumorArea)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].id, "case_z070");
        assert_eq!(s[0].foreground(), 10);
        assert!(extract_axial(&iv, None, &opts(SlicePolicy::MaxTumorArea)).is_err());
        let small = parse_nifti(&write_nifti(&[nx, ny, 2], &NiftiData::U8(vec![0; 128]), &w).unwrap()).unwrap();
        assert!(extract_axial(&iv, Some(&small), &opts(SlicePolicy::AllSlices)).is_err());
    }

    #[test]
    fn zscore_plane() {
        let z = normalize_plane(&[1.0, 3.0], Normalization::ZScore);
        assert_eq!(z, vec![-1.0, 1.0]);
        assert_eq!(normalize_plane(&[2.0, 2.0], Normalization::ZScore), vec![0.0, 0.0]);
    }
}
