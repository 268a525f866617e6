//! Training loop, run reports and checkpoint emission.

use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tape;
use crate::data::{dataset_split, epoch_order, gen_synthetic, load_manifest, make_batch, SliceSample};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::loss::dice_bce_loss;
use crate::metrics::{evaluate_set, EvalReport, MetricMeans};
use crate::model::checkpoint::{self, TrainState};
use crate::model::{Network, Variant};
use crate::nn::Mode;
use crate::optim::Adam;
use crate::tensor::{Element, Tensor};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const TIMING_NOTE: &str = "hardware-dependent, not comparable to published timings";

pub type Progress<'a> = &'a mut dyn FnMut(&str);

#[derive(Clone, Debug)]
pub struct Datasets {
    pub source: String,
    pub train: Vec<SliceSample>,
    pub val: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
}

/// Loads the manifests named in `cfg`, or generates and splits synthetic data.
pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    match &cfg.train_manifest {
        Some(train) => {
            let load = |p: &Option<PathBuf>| p.as_deref().map(load_manifest).transpose().map(Option::unwrap_or_default);
            Ok(Datasets {
                source: format!("manifest {}", train.display()),
                train: load_manifest(train)?,
                val: load(&cfg.val_manifest)?,
                test: load(&cfg.test_manifest)?,
            })
        }
        None => {
            let synth = cfg.synth_config();
            let samples = gen_synthetic(&synth, cfg.synth_count)?;
            let (train, val, test) = dataset_split(samples, cfg.split, cfg.seed)?;
            Ok(Datasets {
                source: format!("synthetic {}×{}, seed {}", synth.height, synth.width, synth.seed),
                train,
                val,
                test,
            })
        }
    }
}

/// One optimisation step on a batch; returns the loss.
pub fn train_step<T: Element>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    images: &Tensor<T>,
    masks: &Tensor<T>,
    lr: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let x = tape.constant(images.clone());
    let t = tape.constant(masks.clone());
    let fwd = net.forward(&tape, x, Mode::Train)?;
    let loss_var = dice_bce_loss(&tape, fwd.output, t)?;
    let loss = tape.value(loss_var).data()[0].to_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: "training loss".into() });
    }
    tape.backward(loss_var)?;
    let grads = net.gradients(&tape, &fwd);
    net.apply_adam(adam, lr, &grads)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<MetricMeans>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub source: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Hash of the training sample order across all epochs.
    pub order_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub total_seconds: f64,
    pub seconds_per_epoch: f64,
    pub inference_ms_per_image: Option<f64>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub variant: Variant,
    pub config: IndexMap<String, Value>,
    pub notes: Vec<String>,
    pub data: DataSummary,
    pub param_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub lr_trace: Vec<f64>,
    /// Loss of every optimisation step, in order.
    pub loss_trace: Vec<f64>,
    pub best_epoch: Option<u32>,
    pub best_val_dsc: Option<f64>,
    pub test: Option<EvalReport>,
    pub timings: Timings,
    pub checkpoints: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("run report: {e}")))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} | {} | {} parameters\n", self.version, self.variant.label(), self.param_count);
        s.push_str(&format!(
            "data: {} ({} train / {} val / {} test)\n",
            self.data.source, self.data.train, self.data.val, self.data.test
        ));
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s.push_str(&format!("\n{:>5}  {:>10}  {:>10}  {:>8}  {:>8}  {:>8}  {:>8}\n", "epoch", "lr", "loss", "val_DSC", "val_mIoU", "val_Acc", "seconds"));
        for e in &self.epochs {
            let (d, m, a) = e.val.map_or((f64::NAN, f64::NAN, f64::NAN), |v| (v.dsc, v.miou, v.acc));
            s.push_str(&format!(
                "{:>5}  {:>10.3e}  {:>10.5}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.1}\n",
                e.epoch, e.lr, e.train_loss, d, m, a, e.seconds
            ));
        }
        if let (Some(e), Some(d)) = (self.best_epoch, self.best_val_dsc) {
            s.push_str(&format!("\nbest validation DSC {d:.4} at epoch {e}\n"));
        }
        if let Some(t) = &self.test {
            s.push_str(&format!(
                "test ({} samples): DSC {:.4}  mIoU {:.4}  IoU_fg {:.4}  Acc {:.4}\n",
                t.rows.len(),
                t.mean.dsc,
                t.mean.miou,
                t.mean.iou_fg,
                t.mean.acc
            ));
        }
        let t = &self.timings;
        s.push_str(&format!(
            "time: train {:.1}s, eval {:.1}s, total {:.1}s ({})\n",
            t.train_seconds, t.eval_seconds, t.total_seconds, t.note
        ));
        s
    }
}

pub struct TrainOutcome<T: Element> {
    /// Network after the final epoch.
    pub last: Network<T>,
    /// Network with the best validation DSC (the last one without validation data).
    pub best: Network<T>,
    pub state: TrainState<T>,
    pub report: RunReport,
}

fn fnv(hash: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *hash ^= b as u64;
        *hash = hash.wrapping_mul(0x100_0000_01b3);
    }
}

pub fn order_fingerprint(train: &[SliceSample], seed: u64, epochs: u32) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for e in 0..epochs {
        for i in epoch_order(train.len(), seed, e) {
            fnv(&mut h, train[i].id.as_bytes());
            fnv(&mut h, b"\n");
        }
    }
    format!("{h:016x}")
}

/// Notes on decisions taken while fitting the model to its input size.
pub fn spec_notes<T: Element>(net: &Network<T>) -> Vec<String> {
    let spec = net.spec();
    let mut notes = Vec::new();
    match spec.variant {
        Variant::AttUnetAspp => {
            let eff = net.aspp_rates();
            if eff != spec.aspp_rates {
                notes.push(format!(
                    "ASPP rates {:?} fitted to the {b}×{b} bottleneck as {eff:?}",
                    spec.aspp_rates,
                    b = spec.bottleneck_size()
                ));
            }
        }
        Variant::AttUnetSpp => {
            notes.push(format!(
                "SPP block follows the pyramid-pooling convention with grid scales {:?}",
                net.spp_scales()
            ));
        }
        _ => {}
    }
    notes
}

fn save_outcome<T: Element>(dir: &Path, name: &str, net: &Network<T>, state: Option<&TrainState<T>>) -> Result<String> {
    let path = dir.join(name);
    checkpoint::save(&path, net, state)?;
    Ok(path.display().to_string())
}

/// Trains `cfg.model` on `data`. When `out_dir` is given, checkpoints and
/// reports are written there.
pub fn run_training<T: Element>(cfg: &RunConfig, data: &Datasets, out_dir: Option<&Path>, progress: Progress<'_>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let started = Instant::now();
    let mut net = Network::<T>::build(&cfg.model, cfg.seed)?;
    let mut adam = Adam::<T>::new();
    let mut schedule = cfg.schedule()?;
    let mut notes = spec_notes(&net);
    notes.push(format!("timings are {TIMING_NOTE}"));

    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    let mut lr_trace = Vec::with_capacity(cfg.epochs as usize);
    let mut loss_trace = Vec::new();
    let mut best: Option<(u32, f64, Network<T>)> = None;
    let mut eval_seconds = 0.0;
    let mut train_seconds = 0.0;
    let mut checkpoints = Vec::new();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = schedule.lr_at()?;
        lr_trace.push(lr);
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&SliceSample> = idx.iter().map(|&i| &data.train[i]).collect();
            let (x, y) = make_batch::<T>(&refs)?;
            let loss = train_step(&mut net, &mut adam, &x, &y, lr).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} at epoch {}, step {} (batch {})", epoch + 1, loss_trace.len() + 1, step + 1),
                },
                other => other,
            })?;
            loss_trace.push(loss);
            sum += loss;
            steps += 1;
        }
        train_seconds += t0.elapsed().as_secs_f64();
        let train_loss = sum / steps as f64;

        let val = if data.val.is_empty() {
            None
        } else {
            let te = Instant::now();
            let r = evaluate_set(&net, &data.val, cfg.threshold, cfg.eval_batch)?;
            eval_seconds += te.elapsed().as_secs_f64();
            Some(r.mean)
        };
        if let Some(v) = val {
            if best.as_ref().is_none_or(|(_, d, _)| v.dsc > *d) {
                best = Some((epoch + 1, v.dsc, net.clone()));
            }
        }
        schedule.epoch_tick();
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss,
            val,
            seconds: t0.elapsed().as_secs_f64(),
        };
        progress(&match val {
            Some(v) => format!(
                "epoch {:>3}/{}  lr {:.3e}  loss {:.5}  val DSC {:.4}  ({:.1}s)",
                record.epoch, cfg.epochs, lr, train_loss, v.dsc, record.seconds
            ),
            None => format!("epoch {:>3}/{}  lr {:.3e}  loss {:.5}  ({:.1}s)", record.epoch, cfg.epochs, lr, train_loss, record.seconds),
        });
        epochs.push(record);
    }

    let state = TrainState {
        adam,
        schedule,
        epoch: cfg.epochs,
        seed: cfg.seed,
        best_val_dsc: best.as_ref().map_or(f64::NAN, |b| b.1),
    };
    let (best_epoch, best_val_dsc, best_net) = match best {
        Some((e, d, n)) => (Some(e), Some(d), n),
        None => (None, None, net.clone()),
    };
    if let (Some(dir), true) = (out_dir, cfg.save_checkpoints) {
        checkpoints.push(save_outcome(dir, "best.ckpt", &best_net, None)?);
        checkpoints.push(save_outcome(dir, "last.ckpt", &net, Some(&state))?);
    }

    let mut inference_ms = None;
    let test = if data.test.is_empty() {
        None
    } else {
        let te = Instant::now();
        let r = evaluate_set(&best_net, &data.test, cfg.threshold, cfg.eval_batch)?;
        let dt = te.elapsed().as_secs_f64();
        eval_seconds += dt;
        inference_ms = Some(1e3 * dt / data.test.len() as f64);
        Some(r)
    };

    let report = RunReport {
        version: VERSION.to_string(),
        variant: cfg.model.variant,
        config: cfg.to_flat(),
        notes,
        data: DataSummary {
            source: data.source.clone(),
            train: data.train.len(),
            val: data.val.len(),
            test: data.test.len(),
            order_fingerprint: order_fingerprint(&data.train, cfg.seed, cfg.epochs),
        },
        param_count: net.param_count(),
        epochs,
        lr_trace,
        loss_trace,
        best_epoch,
        best_val_dsc,
        test,
        timings: Timings {
            train_seconds,
            eval_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
            seconds_per_epoch: train_seconds / cfg.epochs as f64,
            inference_ms_per_image: inference_ms,
            note: TIMING_NOTE.to_string(),
        },
        checkpoints,
    };
    if let Some(dir) = out_dir {
        write_report(dir, &report)?;
    }
    Ok(TrainOutcome {
        last: net,
        best: best_net,
        state,
        report,
    })
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("report.json", report.to_json())?;
    write("report.txt", report.to_text())?;
    if let Some(t) = &report.test {
        write("test_metrics.csv", t.to_csv())?;
        write("test_metrics.txt", t.to_table())?;
    }
    Ok(())
}
