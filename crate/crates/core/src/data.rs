//! Synthetic two-domain segmentation benchmark.
//!
//! Scenes are Voronoi partitions whose cells carry classes drawn from a
//! long-tailed frequency table. Each class has a mean colour; the target
//! domain offsets every colour by a fixed per-channel shift. Pixel values
//! add Gaussian noise and are clamped to `[0, 1]`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{invalid, Error, Result};
use crate::numerics::{LabelMap, Tensor};

pub const DATASET_MAGIC: &str = "PRSFDADS1";

/// Long-tail classes must stay below this pixel frequency.
pub const LONG_TAIL_MAX_FREQ: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Source => "source",
            Role::Target => "target",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_eval: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            source_train: 200,
            source_val: 50,
            target_train: 200,
            target_eval: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Expected pixel share of each class; sums to 1.
    pub class_frequencies: Vec<f64>,
    pub long_tail_classes: Vec<usize>,
    /// Mean colour per class, `num_classes x in_channels`, values in `[0, 1]`.
    pub palette: Vec<Vec<f64>>,
    /// Per-channel offset added to every class colour in the target domain.
    pub palette_shift: Vec<f64>,
    pub noise_sigma: f64,
    /// Voronoi sites per image.
    pub regions_per_image: usize,
    pub splits: SplitSizes,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 8,
            in_channels: 3,
            class_frequencies: vec![0.25, 0.20, 0.16, 0.13, 0.11, 0.10, 0.028, 0.022],
            long_tail_classes: vec![6, 7],
            palette: vec![
                vec![0.10, 0.20, 0.40],
                vec![0.75, 0.25, 0.35],
                vec![0.25, 0.85, 0.45],
                vec![0.75, 0.90, 0.55],
                vec![0.50, 0.50, 0.50],
                vec![0.50, 0.10, 0.40],
                vec![0.05, 0.50, 0.60],
                vec![0.90, 0.55, 0.50],
            ],
            palette_shift: vec![0.08, -0.06, 0.22],
            noise_sigma: 0.05,
            regions_per_image: 24,
            splits: SplitSizes::default(),
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 {
            return Err(Error::Spec(format!("need at least 2 classes, got {c}")));
        }
        if self.height == 0 || self.width == 0 || self.in_channels == 0 {
            return Err(Error::Spec("image extents and channels must be positive".into()));
        }
        if self.class_frequencies.len() != c {
            return Err(Error::Spec(format!(
                "{} class frequencies for {c} classes",
                self.class_frequencies.len()
            )));
        }
        if let Some(i) = self
            .class_frequencies
            .iter()
            .position(|f| !f.is_finite() || *f < 0.0)
        {
            return Err(Error::Spec(format!(
                "class {i} has infeasible frequency {}",
                self.class_frequencies[i]
            )));
        }
        let total: f64 = self.class_frequencies.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Spec(format!("class frequencies sum to {total}, expected 1")));
        }
        for &lt in &self.long_tail_classes {
            match self.class_frequencies.get(lt) {
                None => return Err(Error::Spec(format!("long-tail class {lt} does not exist"))),
                Some(&f) if f >= LONG_TAIL_MAX_FREQ => {
                    return Err(Error::Spec(format!(
                        "long-tail class {lt} has frequency {f}, must be below {LONG_TAIL_MAX_FREQ}"
                    )))
                }
                _ => {}
            }
        }
        if self.palette.len() != c || self.palette.iter().any(|row| row.len() != self.in_channels) {
            return Err(Error::Spec(format!(
                "palette must be {c} x {} colours",
                self.in_channels
            )));
        }
        if self
            .palette
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Spec("palette values must lie in [0, 1]".into()));
        }
        if self.palette_shift.len() != self.in_channels
            || self.palette_shift.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Spec(format!(
                "palette_shift must hold {} finite offsets",
                self.in_channels
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Spec("noise_sigma must be non-negative".into()));
        }
        if self.regions_per_image == 0 {
            return Err(Error::Spec("regions_per_image must be positive".into()));
        }
        Ok(())
    }

    /// Target-domain colour of a class, clamped to `[0, 1]`.
    pub fn target_color(&self, class: usize) -> Vec<f64> {
        self.palette[class]
            .iter()
            .zip(&self.palette_shift)
            .map(|(p, s)| (p + s).clamp(0.0, 1.0))
            .collect()
    }
}

#[derive(Debug, Clone)]
enum LabelStore {
    Present(Vec<LabelMap>),
    Absent,
    /// Any access aborts; used to prove a code path never reads labels.
    Trap,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    role: Role,
    num_classes: usize,
    images: Vec<Tensor>,
    labels: LabelStore,
}

/// Label-free view of a set of images. The adaptation phases accept only
/// this type, so target ground truth cannot reach them.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledImages<'a> {
    images: &'a [Tensor],
}

impl<'a> UnlabeledImages<'a> {
    pub fn new(images: &'a [Tensor]) -> Self {
        Self { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, i: usize) -> &'a Tensor {
        &self.images[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'a, Tensor> {
        self.images.iter()
    }
}

impl Dataset {
    pub fn labeled(role: Role, num_classes: usize, images: Vec<Tensor>, labels: Vec<LabelMap>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(invalid(format!(
                "{} images but {} label maps",
                images.len(),
                labels.len()
            )));
        }
        for (i, (img, lab)) in images.iter().zip(&labels).enumerate() {
            if img.shape().len() != 3 || img.shape()[..2] != lab.shape() {
                return Err(invalid(format!(
                    "image {i} has shape {:?} but its labels are {:?}",
                    img.shape(),
                    lab.shape()
                )));
            }
            lab.check_range(num_classes)?;
        }
        Ok(Self {
            role,
            num_classes,
            images,
            labels: LabelStore::Present(labels),
        })
    }

    pub fn unlabeled(role: Role, num_classes: usize, images: Vec<Tensor>) -> Self {
        Self {
            role,
            num_classes,
            images,
            labels: LabelStore::Absent,
        }
    }

    /// A dataset whose label accessor panics.
    pub fn label_trap(role: Role, num_classes: usize, images: Vec<Tensor>) -> Self {
        Self {
            role,
            num_classes,
            images,
            labels: LabelStore::Trap,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn has_labels(&self) -> bool {
        matches!(self.labels, LabelStore::Present(_))
    }

    pub fn unlabeled_view(&self) -> UnlabeledImages<'_> {
        UnlabeledImages::new(&self.images)
    }

    pub fn labels(&self) -> Result<&[LabelMap]> {
        match &self.labels {
            LabelStore::Present(l) => Ok(l),
            LabelStore::Absent => Err(Error::MissingLabels),
            LabelStore::Trap => panic!("label access on a label-trapped {} dataset", self.role),
        }
    }

    /// Drops labels, e.g. to hand a target split to an adaptation phase.
    pub fn without_labels(&self) -> Dataset {
        Dataset::unlabeled(self.role, self.num_classes, self.images.clone())
    }
}

/// The four splits of a generated benchmark. `target_train` carries no labels.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub target_train: Dataset,
    pub target_eval: Dataset,
}

fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for `(seed, stream, index)`.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream, index))
}

fn sample_class<R: Rng>(rng: &mut R, cumulative: &[f64]) -> usize {
    let u: f64 = rng.random();
    cumulative
        .iter()
        .position(|&c| u < c)
        .unwrap_or(cumulative.len() - 1)
}

fn generate_scene(spec: &DomainSpec, role: Role, rng: &mut ChaCha8Rng) -> (Tensor, LabelMap) {
    let (h, w, ch) = (spec.height, spec.width, spec.in_channels);
    let mut cumulative = Vec::with_capacity(spec.num_classes);
    let mut acc = 0.0;
    for f in &spec.class_frequencies {
        acc += f;
        cumulative.push(acc);
    }
    let sites: Vec<(f64, f64, usize)> = (0..spec.regions_per_image)
        .map(|_| {
            let y = rng.random::<f64>() * h as f64;
            let x = rng.random::<f64>() * w as f64;
            (y, x, sample_class(rng, &cumulative))
        })
        .collect();
    let colors: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|c| match role {
            Role::Source => spec.palette[c].clone(),
            Role::Target => spec.target_color(c),
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut labels = Vec::with_capacity(h * w);
    let mut pixels = Vec::with_capacity(h * w * ch);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for &(sy, sx, class) in &sites {
                let d = (sy - py).powi(2) + (sx - px).powi(2);
                if d < best.0 {
                    best = (d, class);
                }
            }
            labels.push(best.1 as u32);
            for &mu in &colors[best.1] {
                pixels.push((mu + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    (
        Tensor::new(vec![h, w, ch], pixels).expect("finite pixels"),
        LabelMap::new(h, w, labels).expect("matching extents"),
    )
}

fn generate_split(spec: &DomainSpec, role: Role, stream: u64, count: usize) -> (Vec<Tensor>, Vec<LabelMap>) {
    (0..count)
        .map(|i| generate_scene(spec, role, &mut derived_rng(spec.seed, stream, i as u64)))
        .unzip()
}

/// Deterministic function of `spec` (including its seed).
pub fn generate_pair(spec: &DomainSpec) -> Result<DomainPair> {
    spec.validate()?;
    let c = spec.num_classes;
    let s = &spec.splits;
    let (img, lab) = generate_split(spec, Role::Source, 1, s.source_train);
    let source_train = Dataset::labeled(Role::Source, c, img, lab)?;
    let (img, lab) = generate_split(spec, Role::Source, 2, s.source_val);
    let source_val = Dataset::labeled(Role::Source, c, img, lab)?;
    let (img, _) = generate_split(spec, Role::Target, 3, s.target_train);
    let target_train = Dataset::unlabeled(Role::Target, c, img);
    let (img, lab) = generate_split(spec, Role::Target, 4, s.target_eval);
    let target_eval = Dataset::labeled(Role::Target, c, img, lab)?;
    Ok(DomainPair {
        source_train,
        source_val,
        target_train,
        target_eval,
    })
}

/// Per-channel gain in `[1-s, 1+s]` and offset in `[-s, s]`, plus pixel
/// noise with standard deviation `s / 10`, clamped to `[0, 1]`.
pub fn color_perturb<R: Rng + ?Sized>(image: &Tensor, strength: f64, rng: &mut R) -> Result<Tensor> {
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(invalid(format!("perturbation strength must be non-negative, got {strength}")));
    }
    let ch = match image.shape() {
        [_, _, ch] => *ch,
        other => return Err(invalid(format!("expected an [H, W, C] image, got {other:?}"))),
    };
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("image value {v} is outside [0, 1]")));
    }
    if strength == 0.0 {
        return Ok(image.clone());
    }
    let gains: Vec<f64> = (0..ch).map(|_| rng.random_range(1.0 - strength..=1.0 + strength)).collect();
    let offsets: Vec<f64> = (0..ch).map(|_| rng.random_range(-strength..=strength)).collect();
    let noise = Normal::new(0.0, strength / 10.0).expect("positive sigma");
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(ch) {
        for ((v, g), o) in px.iter_mut().zip(&gains).zip(&offsets) {
            *v = (*v * g + o + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Pixel share of each class over a labeled dataset.
pub fn class_frequencies(dataset: &Dataset) -> Result<Vec<f64>> {
    let labels = dataset.labels()?;
    let mut counts = vec![0u64; dataset.num_classes()];
    let mut total = 0u64;
    for map in labels {
        for &l in map.data() {
            counts[l as usize] += 1;
        }
        total += map.len() as u64;
    }
    if total == 0 {
        return Err(invalid("dataset holds no labeled pixels"));
    }
    Ok(counts.into_iter().map(|n| n as f64 / total as f64).collect())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    role: Role,
    num_classes: usize,
    num_images: usize,
    has_labels: bool,
}

pub fn write_dataset<W: Write>(w: &mut W, dataset: &Dataset) -> Result<()> {
    let has_labels = dataset.has_labels();
    let header = serde_json::to_string(&DatasetHeader {
        role: dataset.role,
        num_classes: dataset.num_classes,
        num_images: dataset.len(),
        has_labels,
    })?;
    codec::write_header(w, DATASET_MAGIC, &header)?;
    for img in &dataset.images {
        codec::write_tensor(w, img)?;
    }
    if has_labels {
        for lab in dataset.labels()? {
            codec::write_tensor(w, &lab.to_tensor())?;
        }
    }
    Ok(())
}

/// Reads a dataset; `expected_role`, when given, must match the file.
pub fn read_dataset<R: BufRead>(r: &mut R, expected_role: Option<Role>) -> Result<Dataset> {
    let header: DatasetHeader = serde_json::from_str(&codec::read_header(r, DATASET_MAGIC)?)?;
    if let Some(expected) = expected_role {
        if expected != header.role {
            return Err(Error::Role {
                expected: expected.to_string(),
                found: header.role.to_string(),
            });
        }
    }
    let images = (0..header.num_images)
        .map(|_| codec::read_tensor(r))
        .collect::<Result<Vec<_>>>()?;
    let dataset = if header.has_labels {
        let labels = (0..header.num_images)
            .map(|_| LabelMap::from_tensor(&codec::read_tensor(r)?))
            .collect::<Result<Vec<_>>>()?;
        Dataset::labeled(header.role, header.num_classes, images, labels)
            .map_err(|e| Error::Corrupt(e.to_string()))?
    } else {
        Dataset::unlabeled(header.role, header.num_classes, images)
    };
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Corrupt("trailing bytes after dataset".into()));
    }
    Ok(dataset)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, dataset)?;
    std::fs::write(path, buf).map_err(|e| Error::from(e).at_path(path))
}

pub fn load_dataset(path: &Path, expected_role: Option<Role>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::from(e).at_path(path))?;
    read_dataset(&mut std::io::BufReader::new(file), expected_role).map_err(|e| e.at_path(path))
}
