//! Run configuration with flat dotted keys.
//!
//! Values are resolved in this order, later sources winning: preset
//! defaults, the JSON config file, the output-dir environment variable,
//! then command-line overrides.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Variant};
use crate::nn::UpsampleMode;
use crate::optim::CosineSchedule;

/// Overrides `output.dir` when set.
pub const OUTPUT_DIR_ENV: &str = "ASPPNET_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelSpec,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Cycle length in epochs; 0 means "same as `epochs`".
    pub t_i: u32,
    pub restart: bool,
    pub t_mult: u32,
    pub seed: u64,
    pub precision: Precision,
    pub save_checkpoints: bool,
    pub threshold: f64,
    pub eval_batch: usize,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub synth_count: usize,
    pub split: (usize, usize, usize),
    /// Synthetic data settings; image size follows `model.image_size`.
    pub synth: SynthConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk)
    }
}

pub const KEYS: &[&str] = &[
    "preset",
    "model.variant",
    "model.depth",
    "model.base_channels",
    "model.image_size",
    "model.aspp_rates",
    "model.spp_scales",
    "model.aspp_repeats",
    "model.upsample",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.lr_min",
    "train.t_i",
    "train.restart",
    "train.t_mult",
    "train.seed",
    "train.precision",
    "train.save_checkpoints",
    "eval.threshold",
    "eval.batch_size",
    "data.train",
    "data.val",
    "data.test",
    "data.synth_count",
    "data.split",
    "synth.blobs_min",
    "synth.blobs_max",
    "synth.radius_min",
    "synth.radius_max",
    "synth.contrast",
    "synth.noise_sigma",
    "synth.warp",
    "synth.p_empty",
    "synth.seed",
    "output.dir",
];

fn want<T: serde::de::DeserializeOwned>(key: &str, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("{key}: {e} (got {v})")))
}

fn path_opt(key: &str, v: &Value) -> Result<Option<PathBuf>> {
    match v {
        Value::Null => Ok(None),
        Value::String(s) if s.is_empty() => Ok(None),
        Value::String(s) => Ok(Some(PathBuf::from(s))),
        _ => Err(Error::Config(format!("{key}: expected a path string, got {v}"))),
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (size, base, batch, split, count) = match preset {
            Preset::Desk => (64, 16, 8, (200, 25, 25), 250),
            Preset::Paper => (240, 64, 32, (1000, 125, 126), 1251),
        };
        RunConfig {
            preset,
            model: ModelSpec {
                base_channels: base,
                image_size: size,
                ..ModelSpec::new(Variant::AttUnetAspp)
            },
            epochs: 100,
            batch_size: batch,
            lr: 1e-3,
            lr_min: 0.0,
            t_i: 0,
            restart: false,
            t_mult: 1,
            seed: 0,
            precision: Precision::F32,
            save_checkpoints: true,
            threshold: 0.5,
            eval_batch: 16,
            train_manifest: None,
            val_manifest: None,
            test_manifest: None,
            synth_count: count,
            split,
            synth: SynthConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }

    /// Sets one dotted key from a JSON value.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "preset" => {
                let p: Preset = want::<String>(key, v)?.parse()?;
                if p != self.preset {
                    return Err(Error::Config("preset must be chosen before other keys".into()));
                }
            }
            "model.variant" => self.model.variant = want::<String>(key, v)?.parse()?,
            "model.depth" => self.model.depth = want(key, v)?,
            "model.base_channels" => self.model.base_channels = want(key, v)?,
            "model.image_size" => self.model.image_size = want(key, v)?,
            "model.aspp_rates" => self.model.aspp_rates = want(key, v)?,
            "model.spp_scales" => self.model.spp_scales = want(key, v)?,
            "model.aspp_repeats" => self.model.aspp_repeats = want(key, v)?,
            "model.upsample" => self.model.upsample = want::<UpsampleMode>(key, v)?,
            "train.epochs" => self.epochs = want(key, v)?,
            "train.batch_size" => self.batch_size = want(key, v)?,
            "train.lr" => self.lr = want(key, v)?,
            "train.lr_min" => self.lr_min = want(key, v)?,
            "train.t_i" => self.t_i = want(key, v)?,
            "train.restart" => self.restart = want(key, v)?,
            "train.t_mult" => self.t_mult = want(key, v)?,
            "train.seed" => self.seed = want(key, v)?,
            "train.precision" => self.precision = want(key, v)?,
            "train.save_checkpoints" => self.save_checkpoints = want(key, v)?,
            "eval.threshold" => self.threshold = want(key, v)?,
            "eval.batch_size" => self.eval_batch = want(key, v)?,
            "data.train" => self.train_manifest = path_opt(key, v)?,
            "data.val" => self.val_manifest = path_opt(key, v)?,
            "data.test" => self.test_manifest = path_opt(key, v)?,
            "data.synth_count" => self.synth_count = want(key, v)?,
            "data.split" => {
                let [a, b, c]: [usize; 3] = want(key, v)?;
                self.split = (a, b, c);
            }
            "synth.blobs_min" => self.synth.blobs_min = want(key, v)?,
            "synth.blobs_max" => self.synth.blobs_max = want(key, v)?,
            "synth.radius_min" => self.synth.radius_min = want(key, v)?,
            "synth.radius_max" => self.synth.radius_max = want(key, v)?,
            "synth.contrast" => self.synth.contrast = want(key, v)?,
            "synth.noise_sigma" => self.synth.noise_sigma = want(key, v)?,
            "synth.warp" => self.synth.warp = want(key, v)?,
            "synth.p_empty" => self.synth.p_empty = want(key, v)?,
            "synth.seed" => self.synth.seed = want(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(want::<String>(key, v)?),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override; the value is read as JSON when it
    /// parses, otherwise as a bare string.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key.trim(), &value)
    }

    /// Applies every key of a (possibly nested) JSON object.
    pub fn apply_json(&mut self, doc: &Value) -> Result<()> {
        let mut flat = IndexMap::new();
        flatten("", doc, &mut flat)?;
        for (k, v) in &flat {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Builds a config from an optional preset, an optional JSON file, the
    /// environment and `key=value` overrides.
    pub fn resolve(preset: Option<Preset>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let doc = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                if !v.is_object() {
                    return Err(Error::Config(format!("{}: expected a JSON object", p.display())));
                }
                Some(v)
            }
            None => None,
        };
        let file_preset = match doc.as_ref().and_then(|d| d.get("preset")) {
            Some(v) => Some(want::<String>("preset", v)?.parse::<Preset>()?),
            None => None,
        };
        let mut cfg = RunConfig::preset(preset.or(file_preset).unwrap_or(Preset::Desk));
        if let Some(mut d) = doc {
            d.as_object_mut().expect("checked above").remove("preset");
            cfg.apply_json(&d)?;
        }
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        for o in overrides {
            cfg.set_override(o)?;
        }
        Ok(cfg)
    }

    pub fn cycle_length(&self) -> u32 {
        if self.t_i == 0 {
            self.epochs
        } else {
            self.t_i
        }
    }

    pub fn schedule(&self) -> Result<CosineSchedule> {
        let s = CosineSchedule::new(self.lr_min, self.lr, self.cycle_length())
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(if self.restart { s.with_restarts(self.t_mult) } else { s })
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.model.image_size,
            width: self.model.image_size,
            ..self.synth.clone()
        }
    }

    pub fn uses_manifests(&self) -> bool {
        self.train_manifest.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        self.schedule()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("eval.threshold must be in (0, 1), got {}", self.threshold));
        }
        for (key, p) in [("data.train", &self.train_manifest), ("data.val", &self.val_manifest), ("data.test", &self.test_manifest)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(format!("{key}: manifest {} does not exist", p.display()));
                }
            }
        }
        if !self.uses_manifests() {
            if self.val_manifest.is_some() || self.test_manifest.is_some() {
                return bad("data.val/data.test need data.train".into());
            }
            let (a, b, c) = self.split;
            if a == 0 || a + b + c > self.synth_count {
                return bad(format!(
                    "data.split {a}/{b}/{c} needs a non-empty training set and at most data.synth_count = {} samples",
                    self.synth_count
                ));
            }
            self.synth_config().validate()?;
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_flat(&self) -> IndexMap<String, Value> {
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| json!(p.display().to_string())).unwrap_or(Value::Null);
        let m = &self.model;
        let s = &self.synth;
        let entries = [
            ("preset", json!(self.preset)),
            ("model.variant", json!(m.variant)),
            ("model.depth", json!(m.depth)),
            ("model.base_channels", json!(m.base_channels)),
            ("model.image_size", json!(m.image_size)),
            ("model.aspp_rates", json!(m.aspp_rates)),
            ("model.spp_scales", json!(m.spp_scales)),
            ("model.aspp_repeats", json!(m.aspp_repeats)),
            ("model.upsample", json!(m.upsample)),
            ("train.epochs", json!(self.epochs)),
            ("train.batch_size", json!(self.batch_size)),
            ("train.lr", json!(self.lr)),
            ("train.lr_min", json!(self.lr_min)),
            ("train.t_i", json!(self.t_i)),
            ("train.restart", json!(self.restart)),
            ("train.t_mult", json!(self.t_mult)),
            ("train.seed", json!(self.seed)),
            ("train.precision", json!(self.precision)),
            ("train.save_checkpoints", json!(self.save_checkpoints)),
            ("eval.threshold", json!(self.threshold)),
            ("eval.batch_size", json!(self.eval_batch)),
            ("data.train", p(&self.train_manifest)),
            ("data.val", p(&self.val_manifest)),
            ("data.test", p(&self.test_manifest)),
            ("data.synth_count", json!(self.synth_count)),
            ("data.split", json!([self.split.0, self.split.1, self.split.2])),
            ("synth.blobs_min", json!(s.blobs_min)),
            ("synth.blobs_max", json!(s.blobs_max)),
            ("synth.radius_min", json!(s.radius_min)),
            ("synth.radius_max", json!(s.radius_max)),
            ("synth.contrast", json!(s.contrast)),
            ("synth.noise_sigma", json!(s.noise_sigma)),
            ("synth.warp", json!(s.warp)),
            ("synth.p_empty", json!(s.p_empty)),
            ("synth.seed", json!(s.seed)),
            ("output.dir", json!(self.output_dir.display().to_string())),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Rebuilds a config from a [`to_flat`](Self::to_flat) echo.
    pub fn from_flat(flat: &IndexMap<String, Value>) -> Result<Self> {
        let preset = match flat.get("preset") {
            Some(v) => want::<String>("preset", v)?.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = RunConfig::preset(preset);
        for (k, v) in flat {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut IndexMap<String, Value>) -> Result<()> {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                if child.is_object() {
                    flatten(&key, child, out)?;
                } else {
                    out.insert(key, child.clone());
                }
            }
            Ok(())
        }
        _ => Err(Error::Config("config document must be a JSON object".into())),
    }
}
