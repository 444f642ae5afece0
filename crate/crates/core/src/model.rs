//! Per-pixel patch classifier with a hand-derived backward pass, the two
//! optimizers used by the training phases, and the polynomial LR schedule.
//!
//! Every pixel is classified from the zero-padded `k x k` patch centred on
//! it. The patch is flattened (row, column, channel order) and fed through
//! a ReLU MLP whose last layer produces class logits; a softmax turns those
//! into the probability map consumed by the losses.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{invalid, Error, Result};
use crate::numerics::{softmax_rows_in_place, Tensor};

pub const CHECKPOINT_MAGIC: &str = "PRSFDA1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub hidden_sizes: Vec<usize>,
    /// LR multiplier applied to the final (head) layer.
    pub head_lr_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            patch_size: 3,
            in_channels: 3,
            hidden_sizes: vec![64, 64],
            head_lr_multiplier: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch_size must be odd and positive, got {}",
                self.patch_size
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::Config(
                "hidden_sizes must be a nonempty list of positive widths".into(),
            ));
        }
        if !(self.head_lr_multiplier.is_finite() && self.head_lr_multiplier > 0.0) {
            return Err(Error::Config("head_lr_multiplier must be positive".into()));
        }
        Ok(())
    }

    pub fn input_features(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    /// `(fan_in, fan_out)` for each linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut fan_in = self.input_features();
        for &h in &self.hidden_sizes {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }
}

/// Dense layer computing `x W + b`; `weight` is `fan_in x fan_out`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Linear>,
    rng_seed: u64,
}

/// Gradient buffers mirroring a model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub layers: Vec<Linear>,
}

/// Intermediate activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    height: usize,
    width: usize,
    /// Input to each linear layer; `activations[0]` is the patch matrix.
    activations: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

/// `c = a (m x k) * b (k x n)`, optionally transposing either operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the checked slice extents above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Model {
    /// He-uniform weights drawn from a seeded stream, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / fan_in as f64).sqrt();
                Linear {
                    fan_in,
                    fan_out,
                    weight: (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            config,
            layers,
            rng_seed: seed,
        })
    }

    /// All-zero parameters; predicts the uniform distribution everywhere.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| Linear {
                fan_in,
                fan_out,
                weight: vec![0.0; fan_in * fan_out],
                bias: vec![0.0; fan_out],
            })
            .collect();
        Ok(Self {
            config,
            layers,
            rng_seed: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer (weights, then bias).
    pub fn parameters_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn parameters_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::Shape {
                expected: vec![self.num_parameters()],
                found: vec![params.len()],
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    fn patch_matrix(&self, image: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
        let cin = self.config.in_channels;
        let k = self.config.patch_size;
        let (h, w) = match image.shape() {
            [h, w, c] if *c == cin => (*h, *w),
            found => {
                return Err(Error::Shape {
                    expected: vec![found.first().copied().unwrap_or(0), found.get(1).copied().unwrap_or(0), cin],
                    found: found.to_vec(),
                })
            }
        };
        if h < k || w < k {
            return Err(invalid(format!(
                "image {h}x{w} is smaller than the {k}x{k} patch"
            )));
        }
        let r = (k / 2) as isize;
        let feats = self.config.input_features();
        let src = image.data();
        let mut x = vec![0.0; h * w * feats];
        for y in 0..h {
            for xpos in 0..w {
                let row = &mut x[(y * w + xpos) * feats..(y * w + xpos + 1) * feats];
                let mut f = 0;
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    for dx in -r..=r {
                        let xx = xpos as isize + dx;
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            let base = (yy as usize * w + xx as usize) * cin;
                            row[f..f + cin].copy_from_slice(&src[base..base + cin]);
                        }
                        f += cin;
                    }
                }
            }
        }
        Ok((h, w, x))
    }

    /// Probabilities plus the activations needed by [`Model::backward_tape`].
    pub fn forward_tape(&self, image: &Tensor) -> Result<(Tensor, ForwardTape)> {
        let (h, w, x) = self.patch_matrix(image)?;
        let n = h * w;
        let last = self.layers.len() - 1;
        let mut activations = vec![x];
        let mut logits = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = activations.last().expect("patch matrix");
            let mut z = vec![0.0; n * layer.fan_out];
            gemm(n, layer.fan_in, layer.fan_out, input, false, &layer.weight, false, &mut z);
            for row in z.chunks_exact_mut(layer.fan_out) {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            if i == last {
                logits = z;
            } else {
                for v in &mut z {
                    *v = v.max(0.0);
                }
                activations.push(z);
            }
        }
        let c = self.config.num_classes;
        softmax_rows_in_place(&mut logits, c);
        let probs = Tensor::new(vec![h, w, c], logits.clone())
            .map_err(|_| Error::NonFinite("forward pass output".into()))?;
        Ok((
            probs,
            ForwardTape {
                height: h,
                width: w,
                activations,
                probs: logits,
            },
        ))
    }

    /// Per-pixel class probabilities, shape `[H, W, C]`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.forward_tape(image).map(|(p, _)| p)
    }

    /// Gradient of `sum(probs * grad_wrt_probs)` with respect to every parameter.
    pub fn backward(&self, image: &Tensor, grad_wrt_probs: &Tensor) -> Result<ParameterGradients> {
        let (_, tape) = self.forward_tape(image)?;
        self.backward_tape(&tape, grad_wrt_probs)
    }

    pub fn backward_tape(
        &self,
        tape: &ForwardTape,
        grad_wrt_probs: &Tensor,
    ) -> Result<ParameterGradients> {
        let c = self.config.num_classes;
        grad_wrt_probs.expect_shape(&[tape.height, tape.width, c])?;
        let n = tape.height * tape.width;

        // softmax Jacobian-vector product: dz = p * (g - <p, g>)
        let mut delta = vec![0.0; n * c];
        for ((d, p), g) in delta
            .chunks_exact_mut(c)
            .zip(tape.probs.chunks_exact(c))
            .zip(grad_wrt_probs.data().chunks_exact(c))
        {
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            for j in 0..c {
                d[j] = p[j] * (g[j] - dot);
            }
        }

        let mut grads: Vec<Linear> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.activations[i];
            let mut gw = vec![0.0; layer.fan_in * layer.fan_out];
            gemm(layer.fan_in, n, layer.fan_out, input, true, &delta, false, &mut gw);
            let mut gb = vec![0.0; layer.fan_out];
            for row in delta.chunks_exact(layer.fan_out) {
                for (b, v) in gb.iter_mut().zip(row) {
                    *b += v;
                }
            }
            if i > 0 {
                let mut d_in = vec![0.0; n * layer.fan_in];
                gemm(n, layer.fan_out, layer.fan_in, &delta, false, &layer.weight, true, &mut d_in);
                // ReLU subgradient with g(0) = 0
                for (d, &a) in d_in.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                delta = d_in;
            }
            grads.push(Linear {
                fan_in: layer.fan_in,
                fan_out: layer.fan_out,
                weight: gw,
                bias: gb,
            });
        }
        grads.reverse();
        Ok(ParameterGradients { layers: grads })
    }

    fn header_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CheckpointHeader {
            config: self.config.clone(),
            rng_seed: self.rng_seed,
        })?)
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_header(w, CHECKPOINT_MAGIC, &self.header_json()?)?;
        for l in &self.layers {
            codec::write_tensor(w, &Tensor::new(vec![l.fan_in, l.fan_out], l.weight.clone())?)?;
            codec::write_tensor(w, &Tensor::new(vec![l.fan_out], l.bias.clone())?)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<Self> {
        let json = codec::read_header(r, CHECKPOINT_MAGIC)?;
        let header: CheckpointHeader = serde_json::from_str(&json)?;
        header.config.validate()?;
        let mut layers = Vec::new();
        for (fan_in, fan_out) in header.config.layer_dims() {
            let weight = codec::read_tensor(r)?;
            let bias = codec::read_tensor(r)?;
            if weight.shape() != [fan_in, fan_out] || bias.shape() != [fan_out] {
                return Err(Error::Corrupt(format!(
                    "layer shapes {:?}/{:?} do not match config ({fan_in}x{fan_out})",
                    weight.shape(),
                    bias.shape()
                )));
            }
            layers.push(Linear {
                fan_in,
                fan_out,
                weight: weight.into_data(),
                bias: bias.into_data(),
            });
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config: header.config,
            layers,
            rng_seed: header.rng_seed,
        })
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .expect("in-memory checkpoint write cannot fail for a valid model");
        buf
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> String {
        codec::sha256_hex(&self.checkpoint_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()).map_err(|e| Error::from(e).at_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::from(e).at_path(path))?;
        Self::read_checkpoint(&mut std::io::BufReader::new(file)).map_err(|e| e.at_path(path))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ModelConfig,
    rng_seed: u64,
}

impl ParameterGradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Linear {
                    fan_in: l.fan_in,
                    fan_out: l.fan_out,
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Gradient containers that can be summed over a batch.
pub trait GradientBuffer: Clone {
    fn add_assign(&mut self, other: &Self) -> Result<()>;
    fn scale(&mut self, factor: f64);
}

impl GradientBuffer for ParameterGradients {
    fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|(a, b)| a.weight.len() != b.weight.len() || a.bias.len() != b.bias.len())
        {
            return Err(invalid("gradient buffers have different layouts"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }

    fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }
}

/// Anything that maps an image to a per-pixel probability map.
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    fn predict(&self, image: &Tensor) -> Result<Tensor>;
}

/// The opaque handle the adaptation phases train through: prediction,
/// gradients of a probability-space objective, and a parameter update.
/// Nothing about the architecture leaks through this interface.
pub trait AdaptableModel: Segmenter {
    type Gradients: GradientBuffer;
    type Tape;

    fn predict_with_tape(&self, image: &Tensor) -> Result<(Tensor, Self::Tape)>;
    fn gradient(&self, tape: &Self::Tape, grad_wrt_probs: &Tensor) -> Result<Self::Gradients>;
    fn update(&mut self, grads: &Self::Gradients, lr: f64) -> Result<()>;
    /// Stable identifier of the current parameters.
    fn fingerprint(&self) -> String;
}

impl Segmenter for Model {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict(&self, image: &Tensor) -> Result<Tensor> {
        self.forward(image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd {
        momentum: f64,
        weight_decay: f64,
    },
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd_default() -> Self {
        OptimizerKind::Sgd {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }

    pub fn adamw_default() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    head_lr_multiplier: f64,
    /// SGD velocity or Adam first moment.
    first: ParameterGradients,
    /// Adam second moment; unused for SGD.
    second: ParameterGradients,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, model: &Model) -> Self {
        Self {
            kind,
            head_lr_multiplier: model.config.head_lr_multiplier,
            first: ParameterGradients::zeros_like(model),
            second: ParameterGradients::zeros_like(model),
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. The final layer trains at `lr * head_lr_multiplier`.
    pub fn step(&mut self, model: &mut Model, grads: &ParameterGradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate must be non-negative, got {lr}")));
        }
        if grads.layers.len() != model.layers.len()
            || grads
                .layers
                .iter()
                .zip(&model.layers)
                .any(|(g, p)| g.weight.len() != p.weight.len() || g.bias.len() != p.bias.len())
        {
            return Err(invalid("gradient layout does not match the model"));
        }
        if !grads.is_finite() {
            return Err(Error::TrainingDivergence {
                phase: "optimizer".into(),
                epoch: 0,
                detail: format!("non-finite gradient at step {}", self.step),
            });
        }
        self.step += 1;
        let last = model.layers.len() - 1;
        let t = self.step as i32;
        for (i, ((layer, g), (m, v))) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.first.layers.iter_mut().zip(self.second.layers.iter_mut()))
            .enumerate()
        {
            let layer_lr = if i == last { lr * self.head_lr_multiplier } else { lr };
            let params = layer.weight.iter_mut().chain(layer.bias.iter_mut());
            let gs = g.weight.iter().chain(&g.bias);
            let ms = m.weight.iter_mut().chain(m.bias.iter_mut());
            let vs = v.weight.iter_mut().chain(v.bias.iter_mut());
            match self.kind {
                OptimizerKind::Sgd {
                    momentum,
                    weight_decay,
                } => {
                    for ((p, &g), buf) in params.zip(gs).zip(ms) {
                        *buf = momentum * *buf + g + weight_decay * *p;
                        *p -= layer_lr * *buf;
                    }
                }
                OptimizerKind::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for (((p, &g), m1), m2) in params.zip(gs).zip(ms).zip(vs) {
                        *p -= layer_lr * weight_decay * *p;
                        *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                        *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                        let mhat = *m1 / bc1;
                        let vhat = *m2 / bc2;
                        *p -= layer_lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        if !model.parameters_finite() {
            return Err(Error::TrainingDivergence {
                phase: "optimizer".into(),
                epoch: 0,
                detail: format!("non-finite parameters after step {}", self.step),
            });
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter / total)^power`.
pub fn poly_lr(iter: usize, total: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(invalid("schedule total must be positive"));
    }
    if iter > total {
        return Err(Error::Schedule { iter, total });
    }
    Ok(base_lr * (1.0 - iter as f64 / total as f64).powf(power))
}

/// A model bundled with its optimizer; the concrete [`AdaptableModel`].
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: Model,
    pub optimizer: OptimizerState,
}

impl Learner {
    pub fn new(model: Model, kind: OptimizerKind) -> Self {
        let optimizer = OptimizerState::new(kind, &model);
        Self { model, optimizer }
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

impl Segmenter for Learner {
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn predict(&self, image: &Tensor) -> Result<Tensor> {
        self.model.forward(image)
    }
}

impl AdaptableModel for Learner {
    type Gradients = ParameterGradients;
    type Tape = ForwardTape;

    fn predict_with_tape(&self, image: &Tensor) -> Result<(Tensor, ForwardTape)> {
        self.model.forward_tape(image)
    }

    fn gradient(&self, tape: &ForwardTape, grad_wrt_probs: &Tensor) -> Result<ParameterGradients> {
        self.model.backward_tape(tape, grad_wrt_probs)
    }

    fn update(&mut self, grads: &ParameterGradients, lr: f64) -> Result<()> {
        self.optimizer.step(&mut self.model, grads, lr)
    }

    fn fingerprint(&self) -> String {
        self.model.fingerprint()
    }
}
