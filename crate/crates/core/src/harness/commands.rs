//! Library entry points behind each CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::files::{read_ten1, write_pgm, write_pgm_gray};
use crate::data::nifti::{read_nifti, SliceOptions};
use crate::data::{extract_axial, gen_synthetic, load_manifest, write_dataset, SliceSample, SynthConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{format_table, run_suite, GradCheckResult};
use crate::harness::config::{Precision, RunConfig};
use crate::harness::train::{load_datasets, run_training, Datasets, Progress, RunReport, TIMING_NOTE, VERSION};
use crate::metrics::{binarize, evaluate_set, EvalReport};
use crate::model::checkpoint;
use crate::model::Variant;
use crate::tensor::Tensor;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(cfg: &RunConfig, progress: Progress<'_>) -> Result<RunReport> {
    let data = load_datasets(cfg)?;
    train_on(cfg, &data, Some(&cfg.output_dir), progress)
}

fn train_on(cfg: &RunConfig, data: &Datasets, out: Option<&Path>, progress: Progress<'_>) -> Result<RunReport> {
    Ok(match cfg.precision {
        Precision::F32 => run_training::<f32>(cfg, data, out, progress)?.report,
        Precision::F64 => run_training::<f64>(cfg, data, out, progress)?.report,
    })
}

/// Evaluates a checkpoint on a manifest, or on the configured test split.
pub fn cmd_eval(ckpt: &Path, manifest: Option<&Path>, cfg: &RunConfig, out: Option<&Path>) -> Result<EvalReport> {
    let (net, _) = checkpoint::load::<f32>(ckpt)?;
    let samples = match manifest {
        Some(m) => load_manifest(m)?,
        None => load_datasets(cfg)?.test,
    };
    let report = evaluate_set(&net, &samples, cfg.threshold, cfg.eval_batch)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_text(&dir.join("eval_metrics.csv"), &report.to_csv())?;
        write_text(&dir.join("eval_metrics.txt"), &report.to_table())?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictOutput {
    pub input: PathBuf,
    pub mask: PathBuf,
    pub probabilities: Option<PathBuf>,
    pub attention: Vec<PathBuf>,
    pub foreground: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PredictOptions {
    pub threshold: f64,
    /// Also write the probability map as a grey PGM.
    pub probabilities: bool,
    /// Also write one grey PGM per attention gate, coarsest first.
    pub attention: bool,
}

/// Segments TEN1 image planes. For an input `x.ten` this writes
/// `<out>/x_mask.pgm` (0/255) and, on request, `x_prob.pgm` and
/// `x_alpha<k>.pgm`.
pub fn cmd_predict(ckpt: &Path, inputs: &[PathBuf], out: &Path, opts: PredictOptions) -> Result<Vec<PredictOutput>> {
    let (net, _) = checkpoint::load::<f32>(ckpt)?;
    if opts.attention && !net.spec().variant.has_gates() {
        return Err(Error::InvalidArgument(format!(
            "--attention needs a gated model, checkpoint holds {}",
            net.spec().variant
        )));
    }
    ensure_dir(out)?;
    let mut results = Vec::with_capacity(inputs.len());
    for input in inputs {
        let stem = input.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let ten = read_ten1(input)?;
        let (h, w) = ten.plane_dims()?;
        let x = Tensor::new(vec![1, 1, h, w], ten.values_f32())?;
        let (probs, maps) = net.predict_with_attention(&x)?;
        let mask = binarize(probs.data(), opts.threshold);
        let px: Vec<u8> = mask.iter().map(|&m| m * 255).collect();
        let mask_path = out.join(format!("{stem}_mask.pgm"));
        write_pgm(&mask_path, w, h, &px)?;
        let probabilities = if opts.probabilities {
            let p = out.join(format!("{stem}_prob.pgm"));
            write_pgm_gray(&p, w, h, probs.data())?;
            Some(p)
        } else {
            None
        };
        let mut attention = Vec::new();
        if opts.attention {
            for (i, m) in maps.iter().enumerate() {
                let s = m.shape();
                let p = out.join(format!("{stem}_alpha{}.pgm", i + 1));
                write_pgm_gray(&p, s[3], s[2], m.data())?;
                attention.push(p);
            }
        }
        results.push(PredictOutput {
            input: input.clone(),
            mask: mask_path,
            probabilities,
            attention,
            foreground: mask.iter().filter(|&&m| m == 1).count(),
        });
    }
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: Variant,
    pub params: usize,
    pub dsc: f64,
    pub miou: f64,
    pub acc: f64,
    pub best_epoch: Option<u32>,
    pub train_seconds: f64,
    pub order_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub version: String,
    pub epochs: u32,
    pub seed: u64,
    pub rows: Vec<CompareRow>,
    pub same_data_order: bool,
    pub summary: String,
}

impl CompareReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<22} {:>9} {:>7} {:>7} {:>7} {:>6} {:>9}\n",
            "model", "params", "DSC", "mIoU", "Acc", "best", "train_s"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<22} {:>9} {:>7.4} {:>7.4} {:>7.4} {:>6} {:>9.1}\n",
                r.variant.label(),
                r.params,
                r.dsc,
                r.miou,
                r.acc,
                r.best_epoch.map_or("-".to_string(), |e| e.to_string()),
                r.train_seconds
            ));
        }
        s.push_str(&format!(
            "\n{} epochs, seed {}, identical data order: {}\n{}\ntimings are {TIMING_NOTE}\n",
            self.epochs,
            self.seed,
            if self.same_data_order { "yes" } else { "no" },
            self.summary
        ));
        s
    }
}

fn ranking_prose(rows: &[CompareRow]) -> String {
    let mut ranked: Vec<&CompareRow> = rows.iter().collect();
    ranked.sort_by(|a, b| b.dsc.total_cmp(&a.dsc));
    let order: Vec<String> = ranked.iter().map(|r| format!("{} ({:.4})", r.variant.label(), r.dsc)).collect();
    let mut s = format!("Test DSC ranking in this run: {}.", order.join(" > "));
    let aspp = rows.iter().find(|r| r.variant == Variant::AttUnetAspp);
    let unet = rows.iter().find(|r| r.variant == Variant::Unet);
    if let (Some(a), Some(u)) = (aspp, unet) {
        let verb = if a.dsc > u.dsc { "above" } else { "not above" };
        s.push_str(&format!(
            " The ASPP model scores {verb} the plain UNet by {:+.4} DSC; with a short budget this gap is not a reliable estimate.",
            a.dsc - u.dsc
        ));
    }
    s
}

/// Trains every variant with identical seed, data and order, then scores
/// each on the same test split. Per-variant runs go to `<out>/<variant>/`.
pub fn cmd_compare(cfg: &RunConfig, progress: Progress<'_>) -> Result<CompareReport> {
    let data = load_datasets(cfg)?;
    let out = &cfg.output_dir;
    ensure_dir(out)?;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mut c = cfg.clone();
        c.model.variant = v;
        progress(&format!("== {}", v.label()));
        let report = train_on(&c, &data, Some(&out.join(v.name())), progress)?;
        let test = report
            .test
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("compare needs a non-empty test set".into()))?;
        rows.push(CompareRow {
            variant: v,
            params: report.param_count,
            dsc: test.mean.dsc,
            miou: test.mean.miou,
            acc: test.mean.acc,
            best_epoch: report.best_epoch,
            train_seconds: report.timings.train_seconds,
            order_fingerprint: report.data.order_fingerprint.clone(),
        });
    }
    let same_data_order = rows.windows(2).all(|w| w[0].order_fingerprint == w[1].order_fingerprint);
    let report = CompareReport {
        version: VERSION.to_string(),
        epochs: cfg.epochs,
        seed: cfg.seed,
        summary: ranking_prose(&rows),
        rows,
        same_data_order,
    };
    write_text(&out.join("compare.json"), &serde_json::to_string_pretty(&report).expect("serialisable"))?;
    write_text(&out.join("compare.txt"), &report.to_table())?;
    Ok(report)
}

pub fn cmd_gradcheck(seeds: &[u64]) -> Result<(Vec<GradCheckResult>, String)> {
    let results = run_suite(seeds)?;
    let table = format_table(&results);
    Ok((results, table))
}

/// Writes `n` synthetic samples as a dataset directory; returns the manifest path.
pub fn cmd_synth(synth: &SynthConfig, n: usize, out: &Path) -> Result<PathBuf> {
    let samples = gen_synthetic(synth, n)?;
    write_dataset(out, &samples)
}

/// Extracts axial slices from a NIfTI volume (plus optional label volume)
/// into a dataset directory; returns the manifest path.
pub fn cmd_slices(image: &Path, label: Option<&Path>, opts: &SliceOptions, out: &Path) -> Result<PathBuf> {
    let vol = read_nifti(image)?;
    let lab = label.map(read_nifti).transpose()?;
    let samples: Vec<SliceSample> = extract_axial(&vol, lab.as_ref(), opts)?;
    write_dataset(out, &samples)
}
