//! Synthetic labeled images with planted, ground-truth-known concepts.

mod audit;
mod render;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ctraj_nn::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use audit::{color_bias_audit, AuditRow};
pub use render::{center_distance, corner_band_mask, render_sample, CORNER_BAND, CORNER_INNER};

use crate::error::{invalid, Error, Result};
use crate::image_io;
use crate::seed;

pub const MAX_CLASSES: usize = 8;
const CLASS_NAMES: [&str; MAX_CLASSES] = ["MEL", "NV", "BCC", "DF", "BKL", "AK", "SCC", "VASC"];

pub fn class_name(class: usize) -> &'static str {
    CLASS_NAMES[class]
}

pub(crate) struct ClassProfile {
    pub color: [f64; 3],
    /// Range of the semi-major axis as a fraction of the image width.
    pub major: (f64, f64),
}

pub(crate) fn class_profile(class: usize) -> ClassProfile {
    let (color, major) = match class {
        0 => ([0.44, 0.29, 0.22], (0.20, 0.30)),
        1 => ([0.50, 0.33, 0.24], (0.16, 0.26)),
        2 => ([0.60, 0.42, 0.38], (0.18, 0.28)),
        3 => ([0.55, 0.38, 0.30], (0.14, 0.24)),
        4 => ([0.48, 0.38, 0.30], (0.18, 0.28)),
        5 => ([0.64, 0.45, 0.38], (0.15, 0.25)),
        6 => ([0.58, 0.38, 0.33], (0.17, 0.27)),
        _ => ([0.60, 0.26, 0.30], (0.14, 0.22)),
    };
    ClassProfile { color, major }
}

/// Visual concepts (biases and class traits) the renderer can plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    DarkCornerArtifact,
    RedHueShift,
    GlobalBrightening,
    GlobalDarkening,
    CentralWhitePatch,
    DarkSpots,
}

impl ConceptKind {
    pub const ALL: [ConceptKind; 6] = [
        ConceptKind::DarkCornerArtifact,
        ConceptKind::RedHueShift,
        ConceptKind::GlobalBrightening,
        ConceptKind::GlobalDarkening,
        ConceptKind::CentralWhitePatch,
        ConceptKind::DarkSpots,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConceptKind::DarkCornerArtifact => "dark_corner_artifact",
            ConceptKind::RedHueShift => "red_hue_shift",
            ConceptKind::GlobalBrightening => "global_brightening",
            ConceptKind::GlobalDarkening => "global_darkening",
            ConceptKind::CentralWhitePatch => "central_white_patch",
            ConceptKind::DarkSpots => "dark_spots",
        }
    }

    fn stream(self) -> u64 {
        0xc0de_0000 + self as u64
    }
}

impl fmt::Display for ConceptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConceptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConceptKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::UnknownConcept(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// `class -> kind` with the probability that a sample of that class gets it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRule {
    pub class: usize,
    pub kind: ConceptKind,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Spurious, class-correlated artifacts.
    pub bias_rules: Vec<ConceptRule>,
    /// Class-typical visual traits.
    pub concept_rules: Vec<ConceptRule>,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub rng_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let rule = |class, kind, probability| ConceptRule { class, kind, probability };
        DatasetSpec {
            num_classes: 4,
            samples_per_class: 500,
            image_size: 64,
            bias_rules: vec![
                rule(0, ConceptKind::DarkCornerArtifact, 1.0),
                rule(1, ConceptKind::RedHueShift, 0.9),
            ],
            concept_rules: vec![
                rule(0, ConceptKind::DarkSpots, 0.4),
                rule(2, ConceptKind::GlobalBrightening, 0.6),
                rule(3, ConceptKind::CentralWhitePatch, 0.7),
            ],
            val_fraction: 0.15,
            test_fraction: 0.15,
            rng_seed: 2024,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(invalid(format!("num_classes must be in 2..={MAX_CLASSES}, got {}", self.num_classes)));
        }
        if self.image_size < 32 || self.image_size % 8 != 0 {
            return Err(invalid(format!("image_size must be a multiple of 8 and >= 32, got {}", self.image_size)));
        }
        for r in self.bias_rules.iter().chain(&self.concept_rules) {
            if r.class >= self.num_classes {
                return Err(invalid(format!("rule for class {} but only {} classes", r.class, self.num_classes)));
            }
            if !(0.0..=1.0).contains(&r.probability) {
                return Err(invalid(format!("rule probability {} outside [0, 1]", r.probability)));
            }
        }
        for f in [self.val_fraction, self.test_fraction] {
            if !(0.0..1.0).contains(&f) {
                return Err(invalid(format!("split fraction {f} outside [0, 1)")));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(invalid("val_fraction + test_fraction must leave room for training"));
        }
        Ok(())
    }
}

/// Binary lesion mask, row-major `size * size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub size: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn coverage(&self) -> f64 {
        self.data.iter().filter(|&&m| m).count() as f64 / self.data.len() as f64
    }

    pub fn complement(&self) -> Mask {
        Mask { size: self.size, data: self.data.iter().map(|m| !m).collect() }
    }

    /// Indices of the `fraction` of mask pixels closest to the mask centroid.
    pub fn central_fraction(&self, fraction: f64) -> Vec<usize> {
        let idx: Vec<usize> = (0..self.data.len()).filter(|&p| self.data[p]).collect();
        if idx.is_empty() {
            return idx;
        }
        let n = idx.len() as f64;
        let cy = idx.iter().map(|&p| (p / self.size) as f64).sum::<f64>() / n;
        let cx = idx.iter().map(|&p| (p % self.size) as f64).sum::<f64>() / n;
        let mut by_dist: Vec<(f64, usize)> = idx
            .iter()
            .map(|&p| (((p / self.size) as f64 - cy).powi(2) + ((p % self.size) as f64 - cx).powi(2), p))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keep = ((n * fraction).ceil() as usize).max(1);
        by_dist.into_iter().take(keep).map(|(_, p)| p).collect()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        Tensor::new(&[1, self.size, self.size], data).expect("mask shape")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Mask> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 1 || s[1] != s[2] {
            return Err(Error::ShapeMismatch(format!("mask must be [1, S, S], got {s:?}")));
        }
        Ok(Mask { size: s[1], data: t.data().iter().map(|&v| v > T::lit(0.5)).collect() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage<T = f32> {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<T>,
    pub class_label: usize,
    pub concepts: BTreeSet<ConceptKind>,
    pub lesion_mask: Mask,
    pub split: Split,
}

impl<T: Scalar> LabeledImage<T> {
    /// Condition tokens: the class token followed by present concepts.
    pub fn caption_tokens(&self) -> Vec<String> {
        caption_tokens(self.class_label, &self.concepts)
    }
}

pub fn class_token(class: usize) -> String {
    format!("class:{}", class_name(class))
}

pub fn concept_token(kind: ConceptKind) -> String {
    format!("concept:{}", kind.name())
}

pub fn caption_tokens(class: usize, concepts: &BTreeSet<ConceptKind>) -> Vec<String> {
    std::iter::once(class_token(class)).chain(concepts.iter().map(|&k| concept_token(k))).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub class: usize,
    pub concepts: Vec<String>,
    pub split: String,
    pub image_path: String,
    pub mask_path: String,
}

#[derive(Debug, Clone)]
pub struct Dataset<T = f32> {
    pub spec: DatasetSpec,
    pub images: Vec<LabeledImage<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn split(&self, split: Split) -> Vec<&LabeledImage<T>> {
        self.images.iter().filter(|im| im.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn generate_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    if spec.samples_per_class == 0 {
        return Err(invalid("samples_per_class must be positive"));
    }
    let n = spec.samples_per_class;
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    let mut images = Vec::with_capacity(spec.num_classes * n);
    for class in 0..spec.num_classes {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(spec.rng_seed, &[0x5917, class as u64]));
        let mut split_of = vec![Split::Train; n];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < n_test {
                Split::Test
            } else if rank < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
        for (i, &split) in split_of.iter().enumerate() {
            let mut flag_rng = seed::rng(spec.rng_seed, &[0xf1a6, class as u64, i as u64]);
            let mut concepts = BTreeSet::new();
            for rule in spec.bias_rules.iter().chain(&spec.concept_rules) {
                // one draw per rule keeps each rule's stream independent of the others' outcomes
                let u: f64 = flag_rng.random();
                if rule.class == class && u < rule.probability {
                    concepts.insert(rule.kind);
                }
            }
            let sample_seed = seed::derive(spec.rng_seed, &[0x5a3e, class as u64, i as u64]);
            let mut img = render_sample(class, &concepts, spec, sample_seed)?;
            img.id = format!("c{class}_{i:05}");
            img.split = split;
            images.push(img);
        }
    }
    Ok(Dataset { spec: spec.clone(), images })
}

/// Writes PNGs under `dir/images`, `dir/masks` and a JSON-lines manifest.
pub fn write_dataset<T: Scalar>(dataset: &Dataset<T>, dir: &Path) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut rows = Vec::with_capacity(dataset.len());
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    for img in &dataset.images {
        let image_path = format!("images/{}.png", img.id);
        let mask_path = format!("masks/{}.png", img.id);
        image_io::save_png(&img.image, &dir.join(&image_path))?;
        image_io::save_png(&img.lesion_mask.to_tensor::<T>(), &dir.join(&mask_path))?;
        let row = ManifestRow {
            id: img.id.clone(),
            class: img.class_label,
            concepts: img.concepts.iter().map(|k| k.name().to_string()).collect(),
            split: img.split.name().to_string(),
            image_path,
            mask_path,
        };
        writeln!(manifest, "{}", serde_json::to_string(&row)?)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let f = fs::File::open(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)
            .map_err(|e| invalid(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Loads a dataset written by [`write_dataset`]; pixel values carry the
/// 8-bit quantization of the PNG files.
pub fn load_dataset<T: Scalar>(dir: &Path, spec: &DatasetSpec) -> Result<Dataset<T>> {
    let rows = read_manifest(&dir.join("manifest.jsonl"))?;
    let mut images = Vec::with_capacity(rows.len());
    for row in rows {
        let concepts = row.concepts.iter().map(|c| c.parse()).collect::<Result<BTreeSet<_>>>()?;
        let image: Tensor<T> = image_io::load_png(&dir.join(&row.image_path))?;
        let mask = Mask::from_tensor(&image_io::load_png::<T>(&dir.join(&row.mask_path))?)?;
        images.push(LabeledImage {
            id: row.id,
            image,
            class_label: row.class,
            concepts,
            lesion_mask: mask,
            split: row.split.parse()?,
        });
    }
    Ok(Dataset { spec: spec.clone(), images })
}

pub fn dataset_dir(root: &Path) -> PathBuf {
    root.join("data")
}

/// Stacks `[3, H, W]` images into a `[N, 3, H, W]` batch.
pub fn batch<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| invalid("empty batch"))?;
    let s = first.shape();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.shape() != s {
            return Err(Error::ShapeMismatch(format!("{:?} vs {s:?}", im.shape())));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(s);
    Ok(Tensor::new(&shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(samples: usize) -> DatasetSpec {
        DatasetSpec { samples_per_class: samples, image_size: 32, ..DatasetSpec::default() }
    }

    #[test]
    fn class_balanced_counts_and_disjoint_splits() {
        let ds = generate_dataset::<f32>(&small(100)).unwrap();
        assert_eq!(ds.len(), 400);
        for c in 0..4 {
            assert_eq!(ds.images.iter().filter(|im| im.class_label == c).count(), 100);
        }
        let ids: BTreeSet<&str> = ds.images.iter().map(|im| im.id.as_str()).collect();
        assert_eq!(ids.len(), 400);
        let sizes: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| ds.split(s).len()).sum();
        assert_eq!(sizes, 400);
    }

    #[test]
    fn certain_bias_is_always_applied() {
        let ds = generate_dataset::<f32>(&small(100)).unwrap();
        let class0_train: Vec<_> = ds.split(Split::Train).into_iter().filter(|im| im.class_label == 0).collect();
        assert!(!class0_train.is_empty());
        assert!(class0_train.iter().all(|im| im.concepts.contains(&ConceptKind::DarkCornerArtifact)));
        assert!(ds.images.iter().filter(|im| im.class_label != 0).all(|im| !im.concepts.contains(&ConceptKind::DarkCornerArtifact)));
    }

    #[test]
    fn empirical_rate_within_three_sigma() {
        // p = 0.8, n = 1000: sigma = sqrt(0.8 * 0.2 / 1000) = 0.0126, 3 sigma = 0.038
        let spec = DatasetSpec {
            num_classes: 2,
            samples_per_class: 1000,
            bias_rules: vec![ConceptRule { class: 0, kind: ConceptKind::DarkCornerArtifact, probability: 0.8 }],
            concept_rules: vec![],
            ..small(1000)
        };
        let ds = generate_dataset::<f32>(&spec).unwrap();
        let hits = ds.images.iter().filter(|im| im.class_label == 0 && im.concepts.contains(&ConceptKind::DarkCornerArtifact)).count();
        let rate = hits as f64 / 1000.0;
        assert!((0.76..=0.84).contains(&rate), "rate {rate}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_dataset::<f32>(&small(0)).is_err());
        assert!(DatasetSpec { num_classes: 1, ..small(10) }.validate().is_err());
        assert!(DatasetSpec { image_size: 16, ..small(10) }.validate().is_err());
        let bad_p = DatasetSpec {
            bias_rules: vec![ConceptRule { class: 0, kind: ConceptKind::DarkSpots, probability: 1.5 }],
            ..small(10)
        };
        assert!(bad_p.validate().is_err());
        assert!("sparkles".parse::<ConceptKind>().is_err());
    }

    #[test]
    fn caption_tokens_are_class_then_concepts() {
        let concepts: BTreeSet<_> = [ConceptKind::DarkSpots, ConceptKind::DarkCornerArtifact].into_iter().collect();
        assert_eq!(
            caption_tokens(0, &concepts),
            vec!["class:MEL", "concept:dark_corner_artifact", "concept:dark_spots"]
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(4);
        let ds = generate_dataset::<f32>(&spec).unwrap();
        let rows = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_manifest(&dir.path().join("manifest.jsonl")).unwrap(), rows);
        let back = load_dataset::<f32>(dir.path(), &spec).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.images.iter().zip(&back.images) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.lesion_mask, b.lesion_mask);
            assert_eq!(image_io::quantize(&a.image), b.image);
        }
    }
}
