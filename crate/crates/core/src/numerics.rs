//! Dense tensors, stable elementwise primitives and the finite-difference
//! gradient oracle used to check every hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Probability clamp used by every logarithm in the loss functions.
pub const PROB_EPS: f64 = 1e-7;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Dense row-major array of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(invalid(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Shape {
                expected: expected.to_vec(),
                found: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Per-pixel class ids for an `H x W` image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                expected: vec![height, width],
                found: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_range(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&l| l as usize >= num_classes)
        {
            Some(pixel) => Err(Error::Label {
                label: self.data[pixel],
                pixel,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width],
            data: self.data.iter().map(|&l| f64::from(l)).collect(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w] = t.shape() else {
            return Err(invalid(format!("label tensor must be 2-D, got {:?}", t.shape())));
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
                    Ok(v as u32)
                } else {
                    Err(invalid(format!("label value {v} is not a class id")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(*h, *w, data)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// In-place softmax over consecutive rows of length `classes`.
pub(crate) fn softmax_rows_in_place(values: &mut [f64], classes: usize) {
    let mut tmp = vec![0.0; classes];
    for row in values.chunks_exact_mut(classes) {
        softmax_row(row, &mut tmp);
        row.copy_from_slice(&tmp);
    }
}

/// Softmax along the last axis.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let classes = logits.last_dim();
    if logits.shape().is_empty() || classes < 2 {
        return Err(invalid("softmax needs a last axis of at least 2 classes"));
    }
    if !logits.is_finite() {
        return Err(invalid("softmax input contains non-finite values"));
    }
    let mut out = logits.clone();
    softmax_rows_in_place(out.data_mut(), classes);
    Ok(out)
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_probability_range(p: &Tensor) -> Result<()> {
    const SLACK: f64 = 1e-9;
    match p
        .data()
        .iter()
        .position(|&v| !(-SLACK..=1.0 + SLACK).contains(&v))
    {
        Some(i) => Err(invalid(format!(
            "probability {} at flat index {i} is outside [0, 1]",
            p.data()[i]
        ))),
        None => Ok(()),
    }
}

/// `ln(clamp(p))` elementwise.
pub fn stable_log(p: &Tensor) -> Result<Tensor> {
    check_probability_range(p)?;
    Ok(p.map(|v| clamp_prob(v).ln()))
}

/// `ln(1 - clamp(p))` elementwise.
pub fn stable_log1m(p: &Tensor) -> Result<Tensor> {
    check_probability_range(p)?;
    Ok(p.map(|v| (1.0 - clamp_prob(v)).ln()))
}

/// Index of the largest value; ties resolve to the lowest index.
#[inline]
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel argmax of an `[H, W, C]` probability map.
pub fn argmax_map(probs: &Tensor) -> Result<LabelMap> {
    let [h, w, c] = probs.shape() else {
        return Err(invalid(format!(
            "expected an [H, W, C] map, got {:?}",
            probs.shape()
        )));
    };
    let data = probs
        .data()
        .chunks_exact(*c)
        .map(|row| argmax(row) as u32)
        .collect();
    LabelMap::new(*h, *w, data)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        let g = (plus - minus) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::OracleFailure { coordinate: i });
        }
        grad.push(g);
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
