//! Confusion counts, per-class IoU and mIoU.
//!
//! This is the only module that reads target ground truth; see [`evaluate`].

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::numerics::{argmax_map, LabelMap};

/// `counts[i * C + j]` = pixels of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::Shape {
                expected: gt.shape().to_vec(),
                found: pred.shape().to_vec(),
            });
        }
        pred.check_range(self.num_classes)?;
        gt.check_range(self.num_classes)?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape {
                expected: vec![self.num_classes; 2],
                found: vec![other.num_classes; 2],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion_matrix(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub phase: String,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` marks a class absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub metadata: ReportMetadata,
}

/// IoU_i = p_ii / (row_i + col_i - p_ii); absent classes are left out of the mean.
pub fn iou_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let c = cm.num_classes;
    let mut per_class = Vec::with_capacity(c);
    let mut diag_total = 0u64;
    for i in 0..c {
        let tp = cm.get(i, i);
        let row: u64 = (0..c).map(|j| cm.get(i, j)).sum();
        let col: u64 = (0..c).map(|j| cm.get(j, i)).sum();
        let union = row + col - tp;
        diag_total += tp;
        per_class.push((union > 0).then(|| tp as f64 / union as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::EmptyEvaluation("no class occurs in prediction or ground truth".into()));
    }
    Ok(MetricsReport {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        pixel_accuracy: diag_total as f64 / cm.total() as f64,
        per_class_iou: per_class,
        metadata: ReportMetadata::default(),
    })
}

/// Scores `model` on a labeled split. The model is only queried.
pub fn evaluate<M: Segmenter + ?Sized>(model: &M, split: &Dataset) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::EmptyEvaluation("evaluation split has no images".into()));
    }
    let labels = split.labels()?;
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for (img, gt) in split.images().iter().zip(labels) {
        let pred = argmax_map(&model.predict(img)?)?;
        cm.accumulate(&pred, gt)?;
    }
    iou_report(&cm)
}

impl MetricsReport {
    pub fn with_metadata(mut self, metadata: ReportMetadata) -> Self {
        self.metadata = metadata;
        self
    }

    /// One row per class, then `mIoU` and `pixel_accuracy` rows.
    pub fn to_csv(&self) -> String {
        let m = &self.metadata;
        let mut out = String::from("phase,seed,config_hash,checkpoint_hash,metric,value\n");
        let mut row = |metric: &str, value: String| {
            out.push_str(&format!(
                "{},{},{},{},{metric},{value}\n",
                m.phase, m.seed, m.config_hash, m.checkpoint_hash
            ));
        };
        for (i, iou) in self.per_class_iou.iter().enumerate() {
            row(
                &format!("iou_class_{i}"),
                iou.map_or_else(|| "absent".to_string(), |v| format!("{v:.6}")),
            );
        }
        row("miou", format!("{:.6}", self.miou));
        row("pixel_accuracy", format!("{:.6}", self.pixel_accuracy));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
