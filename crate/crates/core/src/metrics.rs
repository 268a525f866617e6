//! Overlap metrics for binary masks and set-level evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, SliceSample};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Element;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    /// Counts over two 0/1 masks of equal length.
    pub fn from_masks(pred: &[u8], target: &[u8]) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion_counts",
                left: vec![pred.len()],
                right: vec![target.len()],
            });
        }
        let mut c = ConfusionCounts::default();
        for (&p, &t) in pred.iter().zip(target) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2tp / (2tp + fp + fn)`; 1 when both masks are empty.
    pub fn dsc(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou_fg(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn iou_bg(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp + self.fn_)
    }

    /// Mean of the background and foreground IoU.
    pub fn miou(&self) -> f64 {
        0.5 * (self.iou_fg() + self.iou_bg())
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

pub fn dsc(pred: &[u8], target: &[u8]) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, target)?.dsc())
}

pub fn miou(pred: &[u8], target: &[u8]) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, target)?.miou())
}

pub fn accuracy(pred: &[u8], target: &[u8]) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, target)?.accuracy())
}

/// `1` where `p >= threshold`.
pub fn binarize<T: Element>(probs: &[T], threshold: f64) -> Vec<u8> {
    probs.iter().map(|p| u8::from(p.to_f64() >= threshold)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dsc: f64,
    pub miou: f64,
    pub iou_fg: f64,
    pub acc: f64,
}

impl SampleMetrics {
    pub fn from_counts(id: impl Into<String>, c: &ConfusionCounts) -> Self {
        SampleMetrics {
            id: id.into(),
            dsc: c.dsc(),
            miou: c.miou(),
            iou_fg: c.iou_fg(),
            acc: c.accuracy(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub dsc: f64,
    pub miou: f64,
    pub iou_fg: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub rows: Vec<SampleMetrics>,
    pub mean: MetricMeans,
}

const FOOTER: &str = "Per-image metrics averaged over samples. An empty prediction on an empty mask scores DSC 1; \
an empty class contributes IoU 1 to mIoU. mIoU is the mean of background and foreground IoU; IoU_fg is foreground only.";

impl EvalReport {
    pub fn from_rows(rows: Vec<SampleMetrics>, threshold: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("evaluation set is empty".into()));
        }
        let n = rows.len() as f64;
        let mut m = MetricMeans::default();
        for r in &rows {
            m.dsc += r.dsc;
            m.miou += r.miou;
            m.iou_fg += r.iou_fg;
            m.acc += r.acc;
        }
        m.dsc /= n;
        m.miou /= n;
        m.iou_fg /= n;
        m.acc /= n;
        Ok(EvalReport { threshold, rows, mean: m })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,dsc,miou,acc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.id, r.dsc, r.miou, r.acc));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(9);
        let mut out = format!("{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}\n", "sample_id", "DSC", "mIoU", "IoU_fg", "Acc");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}\n",
                r.id, r.dsc, r.miou, r.iou_fg, r.acc
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}\n",
            "mean", self.mean.dsc, self.mean.miou, self.mean.iou_fg, self.mean.acc
        ));
        out.push_str(&format!("\n{} samples, threshold {}. {FOOTER}\n", self.rows.len(), self.threshold));
        out
    }
}

/// Runs the network in evaluation mode over `samples` (in `batch`-sized
/// chunks) and scores the thresholded predictions.
pub fn evaluate_set<T: Element>(net: &Network<T>, samples: &[SliceSample], threshold: f64, batch: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let batch = batch.max(1);
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let (x, _) = make_batch::<T>(&refs)?;
        let probs = net.predict(&x)?;
        let plane = chunk[0].height * chunk[0].width;
        for (s, p) in chunk.iter().zip(probs.data().chunks(plane)) {
            let c = ConfusionCounts::from_masks(&binarize(p, threshold), &s.mask)?;
            rows.push(SampleMetrics::from_counts(s.id.clone(), &c));
        }
    }
    EvalReport::from_rows(rows, threshold)
}
