//! Binary checkpoint format.
//!
//! ```text
//! "AASP1"
//! u32 entry count
//! per entry: u16 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//!            u8 ndim, u32 dims…, raw values
//! ```
//!
//! All integers and values are little-endian. A checkpoint holds the model
//! spec (`meta.spec`), every registry tensor under its path, and optionally
//! the training state under `optim.*` / `train.*`.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ModelSpec, Network, Variant};
use crate::error::{Error, Result};
use crate::nn::UpsampleMode;
use crate::optim::{Adam, CosineSchedule, Moments};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 5] = b"AASP1";
const SPEC_VERSION: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl EntryData {
    fn of<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => EntryData::F32(t.cast()),
            DType::F64 => EntryData::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            EntryData::F32(_) => DType::F32,
            EntryData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            EntryData::F32(t) => t.shape(),
            EntryData::F64(t) => t.shape(),
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        match self {
            EntryData::F32(t) => t.cast(),
            EntryData::F64(t) => t.cast(),
        }
    }

    fn values_f64(&self) -> Vec<f64> {
        match self {
            EntryData::F32(t) => t.data().iter().map(|&v| v as f64).collect(),
            EntryData::F64(t) => t.data().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub data: EntryData,
}

pub fn encode_entries(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(entries.len() as u32).expect("vec write");
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("entry name too long: {}", e.name)))?;
        out.write_u16::<LittleEndian>(len).expect("vec write");
        out.extend_from_slice(name);
        out.push(e.data.dtype().code());
        let shape = e.data.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::InvalidArgument("too many dims".into()))?);
        for &d in shape {
            out.write_u32::<LittleEndian>(d as u32).expect("vec write");
        }
        match &e.data {
            EntryData::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            EntryData::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
        }
    }
    Ok(out)
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    let truncated = |what: &str, at: u64| Error::parse(format!("checkpoint truncated while reading {what} at byte {at}"));
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::parse("not a checkpoint (bad magic, expected \"AASP1\")"));
    }
    let mut cur = Cursor::new(&bytes[MAGIC.len()..]);
    let count = cur.read_u32::<LittleEndian>().map_err(|_| truncated("entry count", 5))?;
    let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let pos = cur.position() + MAGIC.len() as u64;
        let len = cur.read_u16::<LittleEndian>().map_err(|_| truncated("name length", pos))?;
        let mut name = vec![0u8; len as usize];
        cur.read_exact(&mut name).map_err(|_| truncated("name", pos))?;
        let name = String::from_utf8(name).map_err(|_| Error::parse(format!("entry name at byte {pos} is not UTF-8")))?;
        let code = cur.read_u8().map_err(|_| truncated("dtype", pos))?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::parse(format!("entry {name}: unknown dtype code {code}")))?;
        let ndim = cur.read_u8().map_err(|_| truncated("ndim", pos))?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(cur.read_u32::<LittleEndian>().map_err(|_| truncated("dims", pos))? as usize);
        }
        let numel: usize = shape.iter().product();
        let nbytes = numel * dtype.size();
        let start = cur.position() as usize;
        let raw = cur
            .get_ref()
            .get(start..start + nbytes)
            .ok_or_else(|| truncated(&format!("values of {name}"), pos))?;
        cur.set_position((start + nbytes) as u64);
        let data = match dtype {
            DType::F32 => EntryData::F32(Tensor::new(shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
            DType::F64 => EntryData::F64(Tensor::new(shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
        };
        entries.push(Entry { name, data });
    }
    if (cur.position() as usize) != cur.get_ref().len() {
        return Err(Error::parse("trailing bytes after the last checkpoint entry"));
    }
    Ok(entries)
}

fn f64_entry(name: &str, values: Vec<f64>) -> Entry {
    let n = values.len();
    Entry {
        name: name.to_string(),
        data: EntryData::F64(Tensor::from_parts(vec![n], values)),
    }
}

fn encode_spec(spec: &ModelSpec) -> Vec<f64> {
    let mut v = vec![
        SPEC_VERSION,
        spec.variant.code() as f64,
        spec.depth as f64,
        spec.base_channels as f64,
        spec.in_channels as f64,
        spec.out_channels as f64,
        spec.image_size as f64,
        spec.aspp_repeats as f64,
        match spec.upsample {
            UpsampleMode::Nearest => 0.0,
            UpsampleMode::Bilinear => 1.0,
        },
        spec.aspp_rates.len() as f64,
    ];
    v.extend(spec.aspp_rates.iter().map(|&r| r as f64));
    v.push(spec.spp_scales.len() as f64);
    v.extend(spec.spp_scales.iter().map(|&s| s as f64));
    v
}

fn decode_spec(v: &[f64]) -> Result<ModelSpec> {
    let bad = || Error::parse("malformed meta.spec entry");
    let get = |i: usize| v.get(i).copied().ok_or_else(bad);
    if get(0)? != SPEC_VERSION {
        return Err(Error::parse(format!("unsupported spec version {}", v[0])));
    }
    let variant = Variant::from_code(get(1)? as u8).ok_or_else(bad)?;
    let n_rates = get(9)? as usize;
    let rates = (0..n_rates).map(|i| get(10 + i).map(|r| r as usize)).collect::<Result<Vec<_>>>()?;
    let n_scales = get(10 + n_rates)? as usize;
    let scales = (0..n_scales)
        .map(|i| get(11 + n_rates + i).map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelSpec {
        variant,
        depth: get(2)? as usize,
        base_channels: get(3)? as usize,
        in_channels: get(4)? as usize,
        out_channels: get(5)? as usize,
        image_size: get(6)? as usize,
        aspp_repeats: get(7)? as usize,
        upsample: if get(8)? == 0.0 { UpsampleMode::Nearest } else { UpsampleMode::Bilinear },
        aspp_rates: rates,
        spp_scales: scales,
    })
}

/// Optimizer, schedule and loop counters saved alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Element> {
    pub adam: Adam<T>,
    pub schedule: CosineSchedule,
    /// Epochs completed.
    pub epoch: u32,
    pub seed: u64,
    pub best_val_dsc: f64,
}

pub fn network_entries<T: Element>(net: &Network<T>, state: Option<&TrainState<T>>) -> Vec<Entry> {
    let mut entries = vec![f64_entry("meta.spec", encode_spec(net.spec()))];
    for (_, name, _, t) in net.store().iter() {
        entries.push(Entry {
            name: name.to_string(),
            data: EntryData::of(t),
        });
    }
    if let Some(st) = state {
        entries.push(f64_entry("optim.step", vec![st.adam.step as f64]));
        for (name, m) in &st.adam.moments {
            entries.push(Entry {
                name: format!("optim.m.{name}"),
                data: EntryData::of(&m.m),
            });
            entries.push(Entry {
                name: format!("optim.v.{name}"),
                data: EntryData::of(&m.v),
            });
        }
        let s = &st.schedule;
        entries.push(f64_entry(
            "optim.schedule",
            vec![s.eta_min, s.eta_max, s.t_i as f64, s.t_cur as f64, f64::from(u8::from(s.restart)), s.t_mult as f64],
        ));
        entries.push(f64_entry(
            "train.state",
            vec![
                st.epoch as f64,
                (st.seed >> 32) as f64,
                (st.seed & 0xffff_ffff) as f64,
                st.best_val_dsc,
            ],
        ));
    }
    entries
}

pub fn encode<T: Element>(net: &Network<T>, state: Option<&TrainState<T>>) -> Result<Vec<u8>> {
    encode_entries(&network_entries(net, state))
}

/// Rebuilds a network (and training state, when present) from checkpoint bytes.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(Network<T>, Option<TrainState<T>>)> {
    let entries = decode_entries(bytes)?;
    let find = |name: &str| entries.iter().find(|e| e.name == name);
    let spec_entry = find("meta.spec").ok_or_else(|| Error::parse("checkpoint has no meta.spec entry"))?;
    let spec = decode_spec(&spec_entry.data.values_f64())?;
    let mut net = Network::<T>::build(&spec, 0)?;

    let names: Vec<String> = net.store().iter().map(|(_, n, ..)| n.to_string()).collect();
    for (id, name) in names.iter().enumerate() {
        let e = find(name).ok_or_else(|| Error::parse(format!("checkpoint is missing parameter {name}")))?;
        let expected = net.store().get(id).shape().to_vec();
        if e.data.shape() != expected.as_slice() {
            return Err(Error::parse(format!(
                "parameter {name}: checkpoint shape {:?} does not match model shape {expected:?}",
                e.data.shape()
            )));
        }
        *net.store_mut().get_mut(id) = e.data.to_tensor();
    }

    let state = match find("optim.step") {
        None => None,
        Some(step) => {
            let mut adam = Adam::<T>::new();
            adam.step = step.data.values_f64().first().copied().unwrap_or(0.0) as u64;
            for e in &entries {
                let Some(name) = e.name.strip_prefix("optim.m.") else {
                    continue;
                };
                let v = find(&format!("optim.v.{name}"))
                    .ok_or_else(|| Error::parse(format!("checkpoint has optim.m.{name} without optim.v.{name}")))?;
                adam.moments.insert(
                    name.to_string(),
                    Moments {
                        m: e.data.to_tensor(),
                        v: v.data.to_tensor(),
                    },
                );
            }
            let s = find("optim.schedule").ok_or_else(|| Error::parse("checkpoint has no optim.schedule"))?.data.values_f64();
            let t = find("train.state").ok_or_else(|| Error::parse("checkpoint has no train.state"))?.data.values_f64();
            if s.len() != 6 || t.len() != 4 {
                return Err(Error::parse("malformed optimizer state entries"));
            }
            let schedule = CosineSchedule {
                eta_min: s[0],
                eta_max: s[1],
                t_i: s[2] as u32,
                t_cur: s[3] as u32,
                restart: s[4] != 0.0,
                t_mult: s[5] as u32,
            };
            Some(TrainState {
                adam,
                schedule,
                epoch: t[0] as u32,
                seed: ((t[1] as u64) << 32) | t[2] as u64,
                best_val_dsc: t[3],
            })
        }
    };
    Ok((net, state))
}

pub fn save<T: Element>(path: &Path, net: &Network<T>, state: Option<&TrainState<T>>) -> Result<()> {
    let bytes = encode(net, state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: &Path) -> Result<(Network<T>, Option<TrainState<T>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
