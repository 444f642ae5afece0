//! Training phases and the ablation runner.
//!
//! Phase 0 trains on labeled (augmented) source images with class-balanced
//! cross-entropy. Phase 1 adapts to unlabeled target images with a
//! certainty regularizer. Phase 2 self-trains on fixed pseudo labels,
//! applying positive learning where the model was confident and negative
//! learning on complementary labels elsewhere. Phases 1 and 2 see only
//! [`UnlabeledImages`] and an [`AdaptableModel`] handle.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::sha256_hex;
use crate::data::{
    class_frequencies, color_perturb, derived_rng, generate_pair, Dataset, DomainPair, DomainSpec,
    UnlabeledImages,
};
use crate::error::{Error, Result};
use crate::losses::{
    cbce_loss, class_weights, entropy_loss, masked_pl_loss, msl_loss, plnl_loss, ClassWeights,
};
use crate::metrics::{self, MetricsReport, ReportMetadata};
use crate::model::{
    poly_lr, AdaptableModel, GradientBuffer, Learner, Model, ModelConfig, OptimizerKind, Segmenter,
};
use crate::numerics::{argmax, Tensor};
use crate::pseudo::{complementary_labels, make_pseudo_set_unchecked, PseudoLabelSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    Ent,
    Msl,
}

impl Regularizer {
    pub fn name(self) -> &'static str {
        match self {
            Regularizer::Ent => "ent",
            Regularizer::Msl => "msl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub model: ModelConfig,
    pub source_epochs: usize,
    pub adapt_epochs: usize,
    pub self_train_epochs: usize,
    pub batch_size: usize,
    pub source_optimizer: OptimizerKind,
    pub target_optimizer: OptimizerKind,
    pub source_lr: f64,
    pub target_lr: f64,
    pub poly_power: f64,
    pub lambda_nl: f64,
    pub threshold: f64,
    pub aug_strength: f64,
    pub regularizer: Regularizer,
    pub seed: u64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            source_epochs: 15,
            adapt_epochs: 5,
            self_train_epochs: 3,
            batch_size: 2,
            source_optimizer: OptimizerKind::sgd_default(),
            target_optimizer: OptimizerKind::adamw_default(),
            source_lr: 1e-2,
            target_lr: 1e-5,
            poly_power: 0.9,
            lambda_nl: 1.0,
            threshold: 0.6,
            aug_strength: 0.2,
            regularizer: Regularizer::Msl,
            seed: 0,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        self.validate_inner(false)
    }

    fn validate_inner(&self, allow_zero_threshold: bool) -> Result<()> {
        self.model.validate()?;
        if self.source_epochs == 0 || self.adapt_epochs == 0 || self.self_train_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let lo_ok = self.threshold > 0.0 || (allow_zero_threshold && self.threshold == 0.0);
        if !(lo_ok && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "confidence threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.lambda_nl >= 0.0 && self.lambda_nl.is_finite()) {
            return Err(Error::Config("lambda_nl must be non-negative".into()));
        }
        for (name, v) in [
            ("source_lr", self.source_lr),
            ("target_lr", self.target_lr),
            ("aug_strength", self.aug_strength),
            ("poly_power", self.poly_power),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub final_lr: f64,
    /// Fraction of pixels at or above the confidence threshold (self-training only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub phase: String,
    pub input_checkpoint: Option<String>,
    pub output_checkpoint: String,
    pub epochs: Vec<EpochLog>,
    pub reports: Vec<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label_hash: Option<String>,
    /// Hash of the complementary labels drawn at each step (phase 2).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub complementary_label_hashes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Per-image objective driven by [`train_loop`].
trait Objective<M: AdaptableModel> {
    /// Called before each epoch; may return the valid-pixel fraction.
    fn begin_epoch(&mut self, _model: &M, _epoch: usize) -> Result<Option<f64>> {
        Ok(None)
    }

    fn begin_step(&mut self, _step: usize) {}

    fn image_loss(&mut self, model: &M, image: usize, rng: &mut ChaCha8Rng) -> Result<(f64, M::Gradients)>;
}

struct LoopParams<'a> {
    phase: &'a str,
    num_images: usize,
    epochs: usize,
    batch_size: usize,
    base_lr: f64,
    power: f64,
    rng: ChaCha8Rng,
}

fn divergence(phase: &str, epoch: usize, detail: impl Into<String>) -> Error {
    Error::TrainingDivergence {
        phase: phase.to_string(),
        epoch,
        detail: detail.into(),
    }
}

fn train_loop<M: AdaptableModel, O: Objective<M>>(
    model: &mut M,
    objective: &mut O,
    mut p: LoopParams<'_>,
) -> Result<Vec<EpochLog>> {
    if p.num_images == 0 {
        return Err(Error::InvalidInput(format!("{}: no training images", p.phase)));
    }
    let steps_per_epoch = p.num_images.div_ceil(p.batch_size);
    let total = steps_per_epoch * p.epochs;
    let mut order: Vec<usize> = (0..p.num_images).collect();
    let mut logs = Vec::with_capacity(p.epochs);
    let mut step = 0;
    for epoch in 0..p.epochs {
        let valid_fraction = objective.begin_epoch(model, epoch)?;
        order.shuffle(&mut p.rng);
        let mut loss_sum = 0.0;
        let mut lr = p.base_lr;
        for batch in order.chunks(p.batch_size) {
            objective.begin_step(step);
            let mut acc: Option<M::Gradients> = None;
            for &i in batch {
                let (loss, g) = objective.image_loss(model, i, &mut p.rng).map_err(|e| match e {
                    Error::NonFinite(what) => divergence(p.phase, epoch, format!("non-finite {what} on image {i}")),
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(divergence(p.phase, epoch, format!("non-finite loss on image {i}")));
                }
                loss_sum += loss;
                match acc.as_mut() {
                    Some(a) => a.add_assign(&g)?,
                    None => acc = Some(g),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            lr = poly_lr(step, total, p.base_lr, p.power)?;
            model.update(&grads, lr).map_err(|e| match e {
                Error::TrainingDivergence { detail, .. } => divergence(p.phase, epoch, detail),
                other => other,
            })?;
            step += 1;
        }
        logs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / p.num_images as f64,
            final_lr: lr,
            valid_fraction,
        });
    }
    Ok(logs)
}

// RNG stream ids; each phase draws from its own stream.
const STREAM_SOURCE: u64 = 100;
const STREAM_ADAPT: u64 = 200;
const STREAM_SELF_TRAIN: u64 = 300;
const STREAM_COMPLEMENT: u64 = 301;
const STREAM_NAIVE_ST: u64 = 400;

struct SourceObjective<'a> {
    images: &'a [Tensor],
    labels: &'a [crate::numerics::LabelMap],
    weights: ClassWeights,
    strength: f64,
}

impl Objective<Learner> for SourceObjective<'_> {
    fn image_loss(
        &mut self,
        model: &Learner,
        i: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, crate::model::ParameterGradients)> {
        let augmented;
        let img = if self.strength > 0.0 {
            augmented = color_perturb(&self.images[i], self.strength, rng)?;
            &augmented
        } else {
            &self.images[i]
        };
        let (probs, tape) = model.predict_with_tape(img)?;
        let out = cbce_loss(&probs, &self.labels[i], &self.weights)?;
        Ok((out.value, model.gradient(&tape, &out.grad_probs)?))
    }
}

/// Phase 0: class-balanced CE on colour-perturbed source images with SGD.
/// Class weights come from the source label frequencies.
pub fn train_source(source: &Dataset, cfg: &PhaseConfig) -> Result<(Model, RunRecord)> {
    cfg.validate()?;
    let start = Instant::now();
    let labels = source.labels()?;
    if source.num_classes() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            source.num_classes(),
            cfg.model.num_classes
        )));
    }
    let weights = class_weights(&class_frequencies(source)?)?;
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut learner = Learner::new(model, cfg.source_optimizer);
    let mut objective = SourceObjective {
        images: source.images(),
        labels,
        weights,
        strength: cfg.aug_strength,
    };
    let epochs = train_loop(
        &mut learner,
        &mut objective,
        LoopParams {
            phase: "source",
            num_images: source.len(),
            epochs: cfg.source_epochs,
            batch_size: cfg.batch_size,
            base_lr: cfg.source_lr,
            power: cfg.poly_power,
            rng: derived_rng(cfg.seed, STREAM_SOURCE, 0),
        },
    )?;
    let model = learner.into_model();
    let record = RunRecord {
        phase: "source".into(),
        input_checkpoint: None,
        output_checkpoint: model.fingerprint(),
        epochs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        ..RunRecord::default()
    };
    Ok((model, record))
}

struct RegularizerObjective<'a> {
    images: UnlabeledImages<'a>,
    kind: Regularizer,
}

impl<M: AdaptableModel> Objective<M> for RegularizerObjective<'_> {
    fn image_loss(&mut self, model: &M, i: usize, _rng: &mut ChaCha8Rng) -> Result<(f64, M::Gradients)> {
        let (probs, tape) = model.predict_with_tape(self.images.get(i))?;
        let out = match self.kind {
            Regularizer::Msl => msl_loss(&probs)?,
            Regularizer::Ent => entropy_loss(&probs)?,
        };
        Ok((out.value, model.gradient(&tape, &out.grad_probs)?))
    }
}

/// Phase 1: minimise the configured certainty regularizer on target images.
pub fn adapt_unsupervised<M: AdaptableModel>(
    mut model: M,
    target: UnlabeledImages<'_>,
    cfg: &PhaseConfig,
) -> Result<(M, RunRecord)> {
    cfg.validate()?;
    let start = Instant::now();
    let input = model.fingerprint();
    let mut objective = RegularizerObjective {
        images: target,
        kind: cfg.regularizer,
    };
    let phase = format!("adapt_{}", cfg.regularizer.name());
    let epochs = train_loop(
        &mut model,
        &mut objective,
        LoopParams {
            phase: &phase,
            num_images: target.len(),
            epochs: cfg.adapt_epochs,
            batch_size: cfg.batch_size,
            base_lr: cfg.target_lr,
            power: cfg.poly_power,
            rng: derived_rng(cfg.seed, STREAM_ADAPT, 0),
        },
    )?;
    let record = RunRecord {
        phase,
        input_checkpoint: Some(input),
        output_checkpoint: model.fingerprint(),
        epochs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        ..RunRecord::default()
    };
    Ok((model, record))
}

/// Pseudo-label sets for every target image from the current model.
pub fn generate_pseudo_sets<M: Segmenter + ?Sized>(
    model: &M,
    target: UnlabeledImages<'_>,
    threshold: f64,
) -> Result<Vec<PseudoLabelSet>> {
    target
        .iter()
        .map(|img| make_pseudo_set_unchecked(&model.predict(img)?, threshold))
        .collect()
}

fn valid_fraction(sets: &[PseudoLabelSet]) -> f64 {
    let total: usize = sets.iter().map(|s| s.invalid_mask.len()).sum();
    let invalid: f64 = sets.iter().map(|s| s.invalid_mask.data().iter().sum::<f64>()).sum();
    1.0 - invalid / total as f64
}

fn pseudo_sets_hash(sets: &[PseudoLabelSet]) -> String {
    let joined: String = sets.iter().map(|s| s.fingerprint()).collect();
    sha256_hex(joined.as_bytes())
}

struct PlnlObjective<'a> {
    images: UnlabeledImages<'a>,
    sets: Vec<PseudoLabelSet>,
    num_classes: usize,
    lambda: f64,
    seed: u64,
    comp_rng: ChaCha8Rng,
    step_hasher: Vec<u8>,
    step_hashes: Vec<String>,
}

impl PlnlObjective<'_> {
    fn flush_step_hash(&mut self) {
        if !self.step_hasher.is_empty() {
            self.step_hashes.push(sha256_hex(&self.step_hasher));
            self.step_hasher.clear();
        }
    }
}

impl<M: AdaptableModel> Objective<M> for PlnlObjective<'_> {
    fn begin_step(&mut self, step: usize) {
        self.flush_step_hash();
        self.comp_rng = derived_rng(self.seed, STREAM_COMPLEMENT, step as u64);
    }

    fn image_loss(&mut self, model: &M, i: usize, _rng: &mut ChaCha8Rng) -> Result<(f64, M::Gradients)> {
        let set = &self.sets[i];
        let comp = complementary_labels(&set.labels, self.num_classes, &mut self.comp_rng)?;
        self.step_hasher
            .extend(comp.data().iter().flat_map(|l| l.to_le_bytes()));
        let (probs, tape) = model.predict_with_tape(self.images.get(i))?;
        let out = plnl_loss(&probs, &set.labels, &comp, &set.invalid_mask, self.lambda)?;
        Ok((out.value, model.gradient(&tape, &out.grad_probs)?))
    }
}

/// Phase 2: pseudo labels and invalid masks are generated once from the
/// input model; each step redraws complementary labels and optimises the
/// masked PL/NL objective.
pub fn self_train_plnl<M: AdaptableModel>(
    mut model: M,
    target: UnlabeledImages<'_>,
    cfg: &PhaseConfig,
) -> Result<(M, RunRecord)> {
    cfg.validate()?;
    let start = Instant::now();
    let input = model.fingerprint();
    let sets = generate_pseudo_sets(&model, target, cfg.threshold)?;
    if cfg.lambda_nl == 0.0 && valid_fraction(&sets) == 0.0 {
        return Err(Error::NoSignal(
            "every pixel is below the confidence threshold and lambda_nl is 0".into(),
        ));
    }
    let pseudo_hash = pseudo_sets_hash(&sets);
    let valid = valid_fraction(&sets);
    let mut objective = PlnlObjective {
        images: target,
        sets,
        num_classes: model.num_classes(),
        lambda: cfg.lambda_nl,
        seed: cfg.seed,
        comp_rng: derived_rng(cfg.seed, STREAM_COMPLEMENT, 0),
        step_hasher: Vec::new(),
        step_hashes: Vec::new(),
    };
    let mut epochs = train_loop(
        &mut model,
        &mut objective,
        LoopParams {
            phase: "self_train_plnl",
            num_images: target.len(),
            epochs: cfg.self_train_epochs,
            batch_size: cfg.batch_size,
            base_lr: cfg.target_lr,
            power: cfg.poly_power,
            rng: derived_rng(cfg.seed, STREAM_SELF_TRAIN, 0),
        },
    )?;
    objective.flush_step_hash();
    for e in &mut epochs {
        e.valid_fraction = Some(valid);
    }
    debug_assert_eq!(pseudo_sets_hash(&objective.sets), pseudo_hash);
    let record = RunRecord {
        phase: "self_train_plnl".into(),
        input_checkpoint: Some(input),
        output_checkpoint: model.fingerprint(),
        epochs,
        pseudo_label_hash: Some(pseudo_hash),
        complementary_label_hashes: objective.step_hashes,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        ..RunRecord::default()
    };
    Ok((model, record))
}

struct MaskedPlObjective<'a> {
    images: UnlabeledImages<'a>,
    sets: Vec<PseudoLabelSet>,
    threshold: f64,
    regenerate: bool,
}

impl<M: AdaptableModel> Objective<M> for MaskedPlObjective<'_> {
    fn begin_epoch(&mut self, model: &M, epoch: usize) -> Result<Option<f64>> {
        if epoch == 0 || self.regenerate {
            if epoch > 0 || self.sets.is_empty() {
                self.sets = generate_pseudo_sets(model, self.images, self.threshold)?;
            }
            if valid_fraction(&self.sets) == 0.0 {
                return Err(Error::NoSignal(format!(
                    "every pixel is below the confidence threshold at round {epoch}"
                )));
            }
        }
        Ok(Some(valid_fraction(&self.sets)))
    }

    fn image_loss(&mut self, model: &M, i: usize, _rng: &mut ChaCha8Rng) -> Result<(f64, M::Gradients)> {
        let set = &self.sets[i];
        let (probs, tape) = model.predict_with_tape(self.images.get(i))?;
        let out = masked_pl_loss(&probs, &set.labels, &set.invalid_mask)?;
        Ok((out.value, model.gradient(&tape, &out.grad_probs)?))
    }
}

fn masked_pl_self_train<M: AdaptableModel>(
    mut model: M,
    target: UnlabeledImages<'_>,
    cfg: &PhaseConfig,
    regenerate: bool,
    stream: u64,
    phase: &str,
) -> Result<(M, RunRecord)> {
    cfg.validate_inner(true)?;
    let start = Instant::now();
    let input = model.fingerprint();
    let sets = generate_pseudo_sets(&model, target, cfg.threshold)?;
    let pseudo_hash = pseudo_sets_hash(&sets);
    let mut objective = MaskedPlObjective {
        images: target,
        sets,
        threshold: cfg.threshold,
        regenerate,
    };
    let epochs = train_loop(
        &mut model,
        &mut objective,
        LoopParams {
            phase,
            num_images: target.len(),
            epochs: cfg.self_train_epochs,
            batch_size: cfg.batch_size,
            base_lr: cfg.target_lr,
            power: cfg.poly_power,
            rng: derived_rng(cfg.seed, stream, 0),
        },
    )?;
    let record = RunRecord {
        phase: phase.into(),
        input_checkpoint: Some(input),
        output_checkpoint: model.fingerprint(),
        epochs,
        pseudo_label_hash: (!regenerate).then_some(pseudo_hash),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        ..RunRecord::default()
    };
    Ok((model, record))
}

/// Baseline self-training: confident pixels only, pseudo labels
/// regenerated at the start of every epoch (one round per epoch).
/// A zero threshold is accepted and keeps every pixel.
pub fn naive_self_train<M: AdaptableModel>(
    model: M,
    target: UnlabeledImages<'_>,
    cfg: &PhaseConfig,
) -> Result<(M, RunRecord)> {
    masked_pl_self_train(model, target, cfg, true, STREAM_NAIVE_ST, "naive_self_train")
}

/// Masked positive learning on pseudo labels fixed at the start; the
/// `lambda_nl = 0` limit of [`self_train_plnl`].
pub fn fixed_label_self_train<M: AdaptableModel>(
    model: M,
    target: UnlabeledImages<'_>,
    cfg: &PhaseConfig,
) -> Result<(M, RunRecord)> {
    masked_pl_self_train(model, target, cfg, false, STREAM_SELF_TRAIN, "self_train_plnl")
}

/// Scores a model on a labeled split via the metrics module.
pub fn evaluate<S: Segmenter + ?Sized>(model: &S, split: &Dataset) -> Result<MetricsReport> {
    metrics::evaluate(model, split)
}

/// Mean over pixels of the max class probability.
pub fn mean_confidence<S: Segmenter + ?Sized>(model: &S, images: UnlabeledImages<'_>) -> Result<f64> {
    let c = model.num_classes();
    let mut total = 0.0;
    let mut count = 0usize;
    for img in images.iter() {
        let probs = model.predict(img)?;
        for row in probs.data().chunks_exact(c) {
            total += row[argmax(row)];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyEvaluation("no pixels to score".into()));
    }
    Ok(total / count as f64)
}

/// Stable hash of the full experiment configuration.
pub fn config_hash(spec: &DomainSpec, cfg: &PhaseConfig) -> String {
    let json = serde_json::to_string(&(spec, cfg)).expect("config serializes");
    sha256_hex(json.as_bytes())[..16].to_string()
}

/// Ablation arms, mirroring the phase-ablation table columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    So,
    SoAug,
    SoAugEnt,
    SoAugMsl,
    SoAugMslSt,
    SoAugMslNlpl,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::So,
        Arm::SoAug,
        Arm::SoAugEnt,
        Arm::SoAugMsl,
        Arm::SoAugMslSt,
        Arm::SoAugMslNlpl,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Arm::So => "SO",
            Arm::SoAug => "SO+AUG",
            Arm::SoAugEnt => "SO+AUG+ENT",
            Arm::SoAugMsl => "SO+AUG+MSL",
            Arm::SoAugMslSt => "SO+AUG+MSL+ST",
            Arm::SoAugMslNlpl => "SO+AUG+MSL+NLPL",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Arm::So => "so",
            Arm::SoAug => "so_aug",
            Arm::SoAugEnt => "so_aug_ent",
            Arm::SoAugMsl => "so_aug_msl",
            Arm::SoAugMslSt => "so_aug_msl_st",
            Arm::SoAugMslNlpl => "so_aug_msl_nlpl",
        }
    }

    /// Component flags in column order SO, AUG, ENT, MSL, ST, ST-NLPL.
    pub fn components(self) -> [bool; 6] {
        match self {
            Arm::So => [true, false, false, false, false, false],
            Arm::SoAug => [true, true, false, false, false, false],
            Arm::SoAugEnt => [true, true, true, false, false, false],
            Arm::SoAugMsl => [true, true, false, true, false, false],
            Arm::SoAugMslSt => [true, true, false, true, true, false],
            Arm::SoAugMslNlpl => [true, true, false, true, false, true],
        }
    }
}

pub const LAMBDA_SWEEP: [f64; 3] = [0.1, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub arm: Arm,
    pub lambda_nl: Option<f64>,
    pub upstream_checkpoint: Option<String>,
    pub checkpoint: String,
    pub target: MetricsReport,
    pub mean_confidence: f64,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub config_hash: String,
    /// Source-val mIoU of the two source models (SO, SO+AUG).
    pub source_val_miou: [f64; 2],
    pub phases: Vec<AblationRow>,
    pub lambda_sweep: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, arm: Arm) -> &AblationRow {
        self.phases
            .iter()
            .find(|r| r.arm == arm)
            .expect("every arm is present")
    }

    /// Phase-ablation CSV: one row per arm with component checkmarks.
    pub fn phases_csv(&self) -> String {
        let mut out = String::from(
            "arm,SO,AUG,ENT,MSL,ST,ST-NLPL,miou,pixel_accuracy,mean_confidence,upstream_checkpoint,checkpoint,seed,config_hash\n",
        );
        for r in &self.phases {
            let marks: Vec<&str> = r
                .arm
                .components()
                .iter()
                .map(|&b| if b { "x" } else { "" })
                .collect();
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{},{},{},{}\n",
                r.name,
                marks.join(","),
                r.target.miou,
                r.target.pixel_accuracy,
                r.mean_confidence,
                r.upstream_checkpoint.as_deref().unwrap_or(""),
                r.checkpoint,
                self.seed,
                self.config_hash
            ));
        }
        out
    }

    /// Lambda-sweep CSV.
    pub fn lambda_csv(&self) -> String {
        let mut out =
            String::from("lambda_nl,miou,pixel_accuracy,upstream_checkpoint,checkpoint,seed,config_hash\n");
        for r in &self.lambda_sweep {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{},{},{}\n",
                r.lambda_nl.unwrap_or(f64::NAN),
                r.target.miou,
                r.target.pixel_accuracy,
                r.upstream_checkpoint.as_deref().unwrap_or(""),
                r.checkpoint,
                self.seed,
                self.config_hash
            ));
        }
        out
    }

    /// Per-epoch loss for every arm.
    pub fn loss_curves_csv(&self) -> String {
        let mut out = String::from("arm,phase,epoch,mean_loss,final_lr,valid_fraction\n");
        for r in self.phases.iter().chain(&self.lambda_sweep) {
            for e in &r.record.epochs {
                out.push_str(&format!(
                    "{},{},{},{:.9},{:.9},{}\n",
                    r.name,
                    r.record.phase,
                    e.epoch,
                    e.mean_loss,
                    e.final_lr,
                    e.valid_fraction.map_or(String::new(), |v| format!("{v:.6}"))
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct AblationOptions {
    /// Write checkpoints and reports here when set.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for independent arms.
    pub jobs: usize,
}

/// Runs `tasks` on up to `jobs` threads, preserving order.
fn run_parallel<T: Send>(jobs: usize, tasks: Vec<Box<dyn FnOnce() -> T + Send + '_>>) -> Vec<T> {
    if jobs <= 1 || tasks.len() <= 1 {
        return tasks.into_iter().map(|t| t()).collect();
    }
    let mut results = Vec::with_capacity(tasks.len());
    let mut tasks = tasks.into_iter().peekable();
    while tasks.peek().is_some() {
        let chunk: Vec<_> = tasks.by_ref().take(jobs).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.into_iter().map(|t| s.spawn(t)).collect();
            for h in handles {
                results.push(h.join().expect("ablation worker panicked"));
            }
        });
    }
    results
}

struct ArmResult {
    name: String,
    arm: Arm,
    lambda: Option<f64>,
    model: Model,
    record: RunRecord,
}

struct AblationRun<'a> {
    pair: &'a DomainPair,
    seed: u64,
    config_hash: String,
    out_dir: Option<&'a Path>,
    completed: Vec<String>,
}

impl AblationRun<'_> {
    fn metadata(&self, phase: &str, checkpoint: &str) -> ReportMetadata {
        ReportMetadata {
            phase: phase.to_string(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            checkpoint_hash: checkpoint.to_string(),
        }
    }

    fn check(&mut self, name: &str, r: Result<ArmResult>) -> Result<ArmResult> {
        match r {
            Ok(v) => {
                self.completed.push(name.to_string());
                Ok(v)
            }
            Err(e) => Err(Error::PartialResults {
                failed: name.to_string(),
                completed: self.completed.clone(),
                source: Box::new(e),
            }),
        }
    }

    fn finish(&self, res: ArmResult, upstream: Option<String>) -> Result<AblationRow> {
        let checkpoint = res.model.fingerprint();
        let mut record = res.record;
        let report = evaluate(&res.model, &self.pair.target_eval)?
            .with_metadata(self.metadata(&res.name, &checkpoint));
        record.reports.push(report.clone());
        let confidence = mean_confidence(&res.model, self.pair.target_eval.unlabeled_view())?;
        if let Some(dir) = self.out_dir {
            let path = dir.join("checkpoints").join(format!("{}.ckpt", res.name));
            write_file(&path, &res.model.checkpoint_bytes())?;
            record.checkpoint_path = Some(PathBuf::from("checkpoints").join(format!("{}.ckpt", res.name)));
            let rep_dir = dir.join("reports");
            write_file(&rep_dir.join(format!("{}.csv", res.name)), report.to_csv().as_bytes())?;
            write_file(&rep_dir.join(format!("{}.json", res.name)), report.to_json()?.as_bytes())?;
        }
        Ok(AblationRow {
            name: res.name,
            arm: res.arm,
            lambda_nl: res.lambda,
            upstream_checkpoint: upstream,
            checkpoint,
            target: report,
            mean_confidence: confidence,
            record,
        })
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::from(e).at_path(parent))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::from(e).at_path(path))
}

fn source_arm(pair: &DomainPair, cfg: &PhaseConfig, arm: Arm) -> Result<ArmResult> {
    let mut c = cfg.clone();
    if arm == Arm::So {
        c.aug_strength = 0.0;
    }
    let (model, record) = train_source(&pair.source_train, &c)?;
    Ok(ArmResult {
        name: arm.slug().into(),
        arm,
        lambda: None,
        model,
        record,
    })
}

fn adapt_arm(pair: &DomainPair, cfg: &PhaseConfig, upstream: &Model, reg: Regularizer) -> Result<ArmResult> {
    let mut c = cfg.clone();
    c.regularizer = reg;
    let learner = Learner::new(upstream.clone(), c.target_optimizer);
    let (learner, record) = adapt_unsupervised(learner, pair.target_train.unlabeled_view(), &c)?;
    let arm = match reg {
        Regularizer::Ent => Arm::SoAugEnt,
        Regularizer::Msl => Arm::SoAugMsl,
    };
    Ok(ArmResult {
        name: arm.slug().into(),
        arm,
        lambda: None,
        model: learner.into_model(),
        record,
    })
}

fn plnl_arm(pair: &DomainPair, cfg: &PhaseConfig, upstream: &Model, lambda: f64, name: String) -> Result<ArmResult> {
    let mut c = cfg.clone();
    c.lambda_nl = lambda;
    let learner = Learner::new(upstream.clone(), c.target_optimizer);
    let (learner, record) = self_train_plnl(learner, pair.target_train.unlabeled_view(), &c)?;
    Ok(ArmResult {
        name,
        arm: Arm::SoAugMslNlpl,
        lambda: Some(lambda),
        model: learner.into_model(),
        record,
    })
}

fn st_arm(pair: &DomainPair, cfg: &PhaseConfig, upstream: &Model) -> Result<ArmResult> {
    let learner = Learner::new(upstream.clone(), cfg.target_optimizer);
    let (learner, record) = naive_self_train(learner, pair.target_train.unlabeled_view(), cfg)?;
    Ok(ArmResult {
        name: Arm::SoAugMslSt.slug().into(),
        arm: Arm::SoAugMslSt,
        lambda: None,
        model: learner.into_model(),
        record,
    })
}

fn lambda_name(lambda: f64) -> String {
    format!("nlpl_lambda_{lambda}")
}

/// Runs every phase-ablation arm plus the lambda sweep for one seed.
/// `spec.seed` and `cfg.seed` are both set to `seed`. Downstream arms
/// start from the checkpoint of their shared upstream arm.
pub fn run_ablation(spec: &DomainSpec, cfg: &PhaseConfig, seed: u64, opts: &AblationOptions) -> Result<AblationTable> {
    let mut spec = spec.clone();
    spec.seed = seed;
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.validate()?;
    let pair = generate_pair(&spec)?;
    let jobs = opts.jobs.max(1);
    let mut run = AblationRun {
        pair: &pair,
        seed,
        config_hash: config_hash(&spec, &cfg),
        out_dir: opts.out_dir.as_deref(),
        completed: Vec::new(),
    };

    let mut stage0 = run_parallel(
        jobs,
        vec![
            Box::new(|| source_arm(&pair, &cfg, Arm::So)),
            Box::new(|| source_arm(&pair, &cfg, Arm::SoAug)),
        ],
    )
    .into_iter();
    let so = run.check("so", stage0.next().expect("two results"))?;
    let so_aug = run.check("so_aug", stage0.next().expect("two results"))?;
    let source_val_miou = [
        evaluate(&so.model, &pair.source_val)?.miou,
        evaluate(&so_aug.model, &pair.source_val)?.miou,
    ];
    let so_aug_model = so_aug.model.clone();
    let so_aug_hash = so_aug_model.fingerprint();

    let mut stage1 = run_parallel(
        jobs,
        vec![
            Box::new(|| adapt_arm(&pair, &cfg, &so_aug_model, Regularizer::Ent)),
            Box::new(|| adapt_arm(&pair, &cfg, &so_aug_model, Regularizer::Msl)),
        ],
    )
    .into_iter();
    let ent = run.check("so_aug_ent", stage1.next().expect("two results"))?;
    let msl = run.check("so_aug_msl", stage1.next().expect("two results"))?;
    let msl_model = msl.model.clone();
    let msl_hash = msl_model.fingerprint();

    let sweep: Vec<f64> = LAMBDA_SWEEP
        .iter()
        .copied()
        .filter(|&l| l != cfg.lambda_nl)
        .collect();
    let mut tasks: Vec<Box<dyn FnOnce() -> Result<ArmResult> + Send + '_>> = vec![
        Box::new(|| st_arm(&pair, &cfg, &msl_model)),
        Box::new(|| plnl_arm(&pair, &cfg, &msl_model, cfg.lambda_nl, Arm::SoAugMslNlpl.slug().into())),
    ];
    for &l in &sweep {
        let (pair, cfg, msl_model) = (&pair, &cfg, &msl_model);
        tasks.push(Box::new(move || plnl_arm(pair, cfg, msl_model, l, lambda_name(l))));
    }
    let mut stage2 = run_parallel(jobs, tasks).into_iter();
    let st = run.check("so_aug_msl_st", stage2.next().expect("result"))?;
    let nlpl = run.check("so_aug_msl_nlpl", stage2.next().expect("result"))?;
    let mut sweep_results = Vec::new();
    for &l in &sweep {
        sweep_results.push(run.check(&lambda_name(l), stage2.next().expect("result"))?);
    }

    let phases = vec![
        run.finish(so, None)?,
        run.finish(so_aug, None)?,
        run.finish(ent, Some(so_aug_hash.clone()))?,
        run.finish(msl, Some(so_aug_hash))?,
        run.finish(st, Some(msl_hash.clone()))?,
        run.finish(nlpl, Some(msl_hash.clone()))?,
    ];
    let mut lambda_sweep = Vec::new();
    let mut swept = sweep_results.into_iter();
    for &l in &LAMBDA_SWEEP {
        if l == cfg.lambda_nl {
            let mut row = phases[5].clone();
            row.name = lambda_name(l);
            lambda_sweep.push(row);
        } else {
            lambda_sweep.push(run.finish(swept.next().expect("swept arm"), Some(msl_hash.clone()))?);
        }
    }

    let table = AblationTable {
        seed,
        config_hash: run.config_hash.clone(),
        source_val_miou,
        phases,
        lambda_sweep,
    };
    if let Some(dir) = opts.out_dir.as_deref() {
        write_file(&dir.join("ablation_phases.csv"), table.phases_csv().as_bytes())?;
        write_file(&dir.join("ablation_lambda.csv"), table.lambda_csv().as_bytes())?;
        write_file(&dir.join("loss_curves.csv"), table.loss_curves_csv().as_bytes())?;
    }
    Ok(table)
}
