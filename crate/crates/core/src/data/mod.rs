//! Samples, datasets and on-disk formats.

pub mod files;
pub mod nifti;
pub mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use files::{read_pgm, read_ten1, write_pgm, write_pgm_gray, write_ten1, Ten1};
pub use nifti::{extract_axial, parse_nifti, write_nifti, NiftiData, NiftiVolume, Normalization, SlicePolicy};
pub use synth::{gen_synthetic, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1c,
    T2f,
    T2w,
    Synth,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::T1c => "t1c",
            Modality::T2f => "t2f",
            Modality::T2w => "t2w",
            Modality::Synth => "synth",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Modality::T1c, Modality::T2f, Modality::T2w, Modality::Synth]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::parse(format!("unknown modality {s:?} (expected t1c, t2f, t2w or synth)")))
    }
}

/// One image plane and its binary mask, both row-major H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub id: String,
    pub modality: Modality,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    /// 0 or 1 per pixel.
    pub mask: Vec<u8>,
}

impl SliceSample {
    pub fn new(id: impl Into<String>, modality: Modality, height: usize, width: usize, image: Vec<f32>, mask: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if height == 0 || width == 0 || image.len() != height * width || mask.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "sample {id}: image has {} values and mask {} for a {height}×{width} plane",
                image.len(),
                mask.len()
            )));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::InvalidArgument(format!("sample {id}: mask is not binary")));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("image of sample {id}"),
            });
        }
        Ok(SliceSample {
            id,
            modality,
            height,
            width,
            image,
            mask,
        })
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Stacks samples into N×1×H×W image and mask tensors.
pub fn make_batch<T: Element>(samples: &[&SliceSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot build an empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "make_batch",
                left: vec![h, w],
                right: vec![s.height, s.width],
            });
        }
        images.extend(s.image.iter().map(|&v| T::from_f64(v as f64)));
        masks.extend(s.mask.iter().map(|&m| if m == 1 { T::one() } else { T::zero() }));
    }
    let shape = vec![samples.len(), 1, h, w];
    Ok((Tensor::new(shape.clone(), images)?, Tensor::new(shape, masks)?))
}

/// Sample order for one epoch: a seeded shuffle, different per epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut rng = Pcg32::new(seed, 0x9e37_79b9 ^ u64::from(epoch));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Seeded shuffle and partition into train/val/test of exactly the requested sizes.
pub fn dataset_split(
    samples: Vec<SliceSample>,
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<(Vec<SliceSample>, Vec<SliceSample>, Vec<SliceSample>)> {
    let (a, b, c) = counts;
    let need = a + b + c;
    if samples.len() < need {
        return Err(Error::InvalidArgument(format!(
            "split needs {need} samples ({a}+{b}+{c}) but only {} are available",
            samples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut Pcg32::seed_from_u64(seed));
    let mut slots: Vec<Option<SliceSample>> = samples.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<SliceSample> {
        idx[range].iter().map(|&i| slots[i].take().expect("indices are unique")).collect()
    };
    let train = take(0..a);
    let val = take(a..a + b);
    let test = take(a + b..need);
    Ok((train, val, test))
}

/// One manifest line: `id<TAB>image<TAB>mask<TAB>modality`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub modality: Modality,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, e.image.display(), e.mask.display(), e.modality));
    }
    out
}

/// Parses manifest text. Relative paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, image, mask, modality] = fields[..] else {
            return Err(Error::parse(format!(
                "manifest line {}: expected 4 tab-separated fields, found {}",
                lineno + 1,
                fields.len()
            )));
        };
        entries.push(ManifestEntry {
            id: id.to_string(),
            image: base.join(image),
            mask: base.join(mask),
            modality: modality.parse()?,
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Loads every sample named in a manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<SliceSample>> {
    read_manifest(path)?.iter().map(load_entry).collect()
}

pub fn load_entry(e: &ManifestEntry) -> Result<SliceSample> {
    let img = read_ten1(&e.image)?;
    let (h, w) = img.plane_dims()?;
    let mask = read_pgm(&e.mask)?;
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::parse(format!(
            "{}: mask is {}×{} but image {} is {h}×{w}",
            e.mask.display(),
            mask.height,
            mask.width,
            e.image.display()
        )));
    }
    let bin = mask.pixels.iter().map(|&p| u8::from(p > 0)).collect();
    SliceSample::new(e.id.clone(), e.modality, h, w, img.values_f32(), bin)
}

/// Writes `images/<id>.ten`, `masks/<id>.pgm` and `manifest.tsv` under `dir`.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[SliceSample]) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = PathBuf::from("images").join(format!("{}.ten", s.id));
        let mask = PathBuf::from("masks").join(format!("{}.pgm", s.id));
        write_ten1(&dir.join(&image), &Ten1::F32 { shape: vec![s.height, s.width], data: s.image.clone() })?;
        write_pgm(&dir.join(&mask), s.width, s.height, &s.mask.iter().map(|&m| m * 255).collect::<Vec<_>>())?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image,
            mask,
            modality: s.modality,
        });
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, format_manifest(&entries)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(n: usize) -> Vec<SliceSample> {
        (0..n)
            .map(|i| SliceSample::new(format!("s{i}"), Modality::Synth, 2, 2, vec![0.0; 4], vec![0, 1, 0, (i % 2) as u8]).unwrap())
            .collect()
    }

    #[test]
    fn split_sizes_and_partition() {
        let (a, b, c) = dataset_split(dummy(250), (200, 25, 25), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (200, 25, 25));
        let mut ids: Vec<String> = a.iter().chain(&b).chain(&c).map(|s| s.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 250);
        let (a2, ..) = dataset_split(dummy(250), (200, 25, 25), 3).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn full_size_split_sizes() {
        let (a, b, c) = dataset_split(dummy(1251), (1000, 125, 126), 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (1000, 125, 126));
        assert!(dataset_split(dummy(10), (8, 2, 1), 0).is_err());
    }

    #[test]
    fn batch_layout() {
        let s = dummy(3);
        let refs: Vec<&SliceSample> = s.iter().collect();
        let (x, y) = make_batch::<f32>(&refs).unwrap();
        assert_eq!(x.shape(), &[3, 1, 2, 2]);
        assert_eq!(&y.data()[4..8], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn manifest_round_trip() {
        let entries = vec![ManifestEntry {
            id: "a_z070".into(),
            image: "images/a_z070.ten".into(),
            mask: "masks/a_z070.pgm".into(),
            modality: Modality::T2f,
        }];
        let text = format_manifest(&entries);
        assert_eq!(text, "a_z070\timages/a_z070.ten\tmasks/a_z070.pgm\tt2f\n");
        assert_eq!(parse_manifest(&text, Path::new("")).unwrap(), entries);
        assert!(parse_manifest("a\tb\tc\n", Path::new("")).is_err());
    }

    #[test]
    fn rejects_non_binary_masks() {
        assert!(SliceSample::new("x", Modality::Synth, 1, 2, vec![0.0, 1.0], vec![0, 2]).is_err());
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let a = epoch_order(50, 1, 0);
        let b = epoch_order(50, 1, 1);
        assert_ne!(a, b);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 1, 0));
    }
}
