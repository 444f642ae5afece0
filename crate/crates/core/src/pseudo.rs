//! Pseudo labels, confidence maps, invalid masks and complementary labels.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::numerics::{argmax, LabelMap, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.6;
pub const PSEUDO_MAGIC: &str = "PRSFDAPL1";

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: LabelMap,
    /// Max class probability per pixel.
    pub confidence: Tensor,
    /// 1 where `confidence < threshold`, else 0.
    pub invalid_mask: Tensor,
    pub threshold: f64,
}

impl PseudoLabelSet {
    pub fn invalid_fraction(&self) -> f64 {
        self.invalid_mask.data().iter().sum::<f64>() / self.invalid_mask.len() as f64
    }

    /// Hash over labels and mask, used to show the set stays fixed.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        codec::write_tensor(&mut buf, &self.labels.to_tensor()).expect("in-memory write");
        codec::write_tensor(&mut buf, &self.invalid_mask).expect("in-memory write");
        codec::sha256_hex(&buf)
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "confidence threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(())
}

/// Argmax labels, max-probability confidence and the `confidence < threshold` mask.
pub fn make_pseudo_set(probs: &Tensor, threshold: f64) -> Result<PseudoLabelSet> {
    check_threshold(threshold)?;
    make_pseudo_set_unchecked(probs, threshold)
}

/// As [`make_pseudo_set`] but accepts any threshold in `[0, 1]`; a zero
/// threshold marks every pixel valid.
pub(crate) fn make_pseudo_set_unchecked(probs: &Tensor, threshold: f64) -> Result<PseudoLabelSet> {
    let (h, w, c) = match probs.shape() {
        [h, w, c] if *c >= 2 => (*h, *w, *c),
        other => {
            return Err(Error::InvalidInput(format!(
                "expected an [H, W, C] probability map, got {other:?}"
            )))
        }
    };
    let mut labels = Vec::with_capacity(h * w);
    let mut confidence = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for row in probs.data().chunks_exact(c) {
        let best = argmax(row);
        let conf = row[best];
        labels.push(best as u32);
        confidence.push(conf);
        mask.push(if conf < threshold { 1.0 } else { 0.0 });
    }
    Ok(PseudoLabelSet {
        labels: LabelMap::new(h, w, labels)?,
        confidence: Tensor::new(vec![h, w], confidence)?,
        invalid_mask: Tensor::new(vec![h, w], mask)?,
        threshold,
    })
}

/// Class-consistent complementary labels: every class gets one uniformly
/// drawn replacement different from itself, and all of its pixels map to it.
pub fn complementary_labels<R: Rng + ?Sized>(
    labels: &LabelMap,
    num_classes: usize,
    rng: &mut R,
) -> Result<LabelMap> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "complementary labels need at least 2 classes, got {num_classes}"
        )));
    }
    labels.check_range(num_classes)?;
    let c = num_classes as u32;
    let replacement: Vec<u32> = (0..c)
        .map(|lab| loop {
            let tmp = rng.random_range(0..c);
            if tmp != lab {
                break tmp;
            }
        })
        .collect();
    let data = labels
        .data()
        .iter()
        .map(|&l| replacement[l as usize])
        .collect();
    LabelMap::new(labels.height(), labels.width(), data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PseudoHeader {
    threshold: f64,
    source_checkpoint: String,
}

/// Writes the set as framed tensors: labels, confidence, mask.
pub fn write_pseudo_set<W: Write>(w: &mut W, set: &PseudoLabelSet, source_checkpoint: &str) -> Result<()> {
    let header = serde_json::to_string(&PseudoHeader {
        threshold: set.threshold,
        source_checkpoint: source_checkpoint.to_string(),
    })?;
    codec::write_header(w, PSEUDO_MAGIC, &header)?;
    codec::write_tensor(w, &set.labels.to_tensor())?;
    codec::write_tensor(w, &set.confidence)?;
    codec::write_tensor(w, &set.invalid_mask)?;
    Ok(())
}

/// Returns the set and the hash of the checkpoint that produced it.
pub fn read_pseudo_set<R: BufRead>(r: &mut R) -> Result<(PseudoLabelSet, String)> {
    let header: PseudoHeader = serde_json::from_str(&codec::read_header(r, PSEUDO_MAGIC)?)?;
    let labels = LabelMap::from_tensor(&codec::read_tensor(r)?)?;
    let confidence = codec::read_tensor(r)?;
    let invalid_mask = codec::read_tensor(r)?;
    let shape = labels.shape();
    if confidence.shape() != shape || invalid_mask.shape() != shape {
        return Err(Error::Corrupt("pseudo-label fields have mismatched shapes".into()));
    }
    Ok((
        PseudoLabelSet {
            labels,
            confidence,
            invalid_mask,
            threshold: header.threshold,
        },
        header.source_checkpoint,
    ))
}

pub fn save_pseudo_sets(path: &Path, sets: &[PseudoLabelSet], source_checkpoint: &str) -> Result<()> {
    let mut buf = Vec::new();
    for set in sets {
        write_pseudo_set(&mut buf, set, source_checkpoint)?;
    }
    std::fs::write(path, buf).map_err(|e| Error::from(e).at_path(path))
}
