//! Layer-representation datasets: the in-memory augmented set and its on-disk
//! directory format.
//!
//! A dataset directory holds `manifest.json` plus one raw blob per layer
//! (little-endian `f32`, row-major, `num_samples x dim`) and two label blobs
//! (little-endian `u16`, one entry per sample). Classes are 0-based.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// One layer's representations for every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock {
    pub name: String,
    pub matrix: Matrix,
}

impl LayerBlock {
    pub fn new(name: impl Into<String>, matrix: Matrix) -> Self {
        Self {
            name: name.into(),
            matrix,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Samples passed through a classifier: per-layer representations (layer 0 is
/// the input) together with true and predicted class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDataset {
    num_classes: usize,
    layers: Vec<LayerBlock>,
    true_labels: Vec<usize>,
    pred_labels: Vec<usize>,
}

impl LayerDataset {
    pub fn new(
        num_classes: usize,
        layers: Vec<LayerBlock>,
        true_labels: Vec<usize>,
        pred_labels: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            num_classes,
            layers,
            true_labels,
            pred_labels,
        };
        ds.check_invariants()?;
        Ok(ds)
    }

    fn check_invariants(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Empty("layer list"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be at least 1"));
        }
        let n = self.true_labels.len();
        if self.pred_labels.len() != n {
            return Err(Error::RowCountMismatch {
                what: "predicted labels".into(),
                expected: n,
                found: self.pred_labels.len(),
            });
        }
        for layer in &self.layers {
            if layer.matrix.rows() != n {
                return Err(Error::RowCountMismatch {
                    what: format!("layer '{}'", layer.name),
                    expected: n,
                    found: layer.matrix.rows(),
                });
            }
            if layer.dim() == 0 {
                return Err(Error::DimensionMismatch {
                    what: format!("layer '{}'", layer.name),
                    expected: 1,
                    found: 0,
                });
            }
            for (r, row) in layer.matrix.iter_rows().enumerate() {
                if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        layer: layer.name.clone(),
                        row: r,
                        col: c,
                    });
                }
            }
        }
        for labels in [&self.true_labels, &self.pred_labels] {
            if let Some((i, &l)) = labels
                .iter()
                .enumerate()
                .find(|(_, &l)| l >= self.num_classes)
            {
                return Err(Error::LabelOutOfRange {
                    sample: i,
                    label: l,
                    num_classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.true_labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerBlock] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerBlock {
        &self.layers[l]
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn pred_labels(&self) -> &[usize] {
        &self.pred_labels
    }

    /// Representation of sample `i` at every layer.
    pub fn sample(&self, i: usize) -> Vec<&[f64]> {
        self.layers.iter().map(|b| b.matrix.row(i)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LayerDataset {
        LayerDataset {
            num_classes: self.num_classes,
            layers: self
                .layers
                .iter()
                .map(|b| LayerBlock::new(b.name.clone(), b.matrix.select_rows(indices)))
                .collect(),
            true_labels: indices.iter().map(|&i| self.true_labels[i]).collect(),
            pred_labels: indices.iter().map(|&i| self.pred_labels[i]).collect(),
        }
    }

    /// An empty dataset with the same layer layout.
    pub fn empty_like(&self) -> LayerDataset {
        self.subset(&[])
    }
}

/// Fold index per sample from a class-stratified split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub assignments: Vec<usize>,
    pub num_folds: usize,
}

impl FoldSplit {
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    /// Indices outside `fold`, i.e. the training part for that fold.
    pub fn complement_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }
}

/// Class-stratified fold assignment over true labels.
pub fn split_folds(ds: &LayerDataset, num_folds: usize, seed: u64) -> Result<FoldSplit> {
    let counts = class_counts(ds.true_labels(), ds.num_classes());
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c < num_folds) {
        return Err(Error::InsufficientClassSamples {
            class,
            count,
            required: num_folds,
        });
    }
    stratified_folds(ds.true_labels(), num_folds, seed)
}

/// Stratified assignment over the classes present in `labels`. Members of each
/// class are shuffled and dealt round-robin; the starting fold rotates from
/// class to class so total fold sizes also stay balanced.
pub fn stratified_folds(labels: &[usize], num_folds: usize, seed: u64) -> Result<FoldSplit> {
    if num_folds == 0 {
        return Err(Error::invalid("num_folds must be at least 1"));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0usize; labels.len()];
    let mut offset = 0usize;
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            assignments[i] = (offset + j) % num_folds;
        }
        offset += members.len();
    }
    Ok(FoldSplit {
        assignments,
        num_folds,
    })
}

pub(crate) fn class_counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &l in labels {
        if l < num_classes {
            counts[l] += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub num_samples: usize,
    pub num_classes: usize,
    pub layer_dims: Vec<(String, usize)>,
    pub true_counts: Vec<usize>,
    pub pred_counts: Vec<usize>,
    /// Fraction of samples with `true == pred`; `None` for an empty dataset.
    pub accuracy: Option<f64>,
    pub issues: Vec<String>,
}

pub fn validate_dataset(ds: &LayerDataset) -> ValidationReport {
    let m = ds.num_classes();
    let true_counts = class_counts(ds.true_labels(), m);
    let pred_counts = class_counts(ds.pred_labels(), m);
    let n = ds.num_samples();
    let correct = ds
        .true_labels()
        .iter()
        .zip(ds.pred_labels())
        .filter(|(a, b)| a == b)
        .count();
    let mut issues = Vec::new();
    for c in 0..m {
        if true_counts[c] == 0 {
            issues.push(format!("class {c} has no samples by true label"));
        }
        if pred_counts[c] == 0 {
            issues.push(format!("class {c} has no samples by predicted label"));
        }
    }
    ValidationReport {
        num_samples: n,
        num_classes: m,
        layer_dims: ds.layers().iter().map(|b| (b.name.clone(), b.dim())).collect(),
        true_counts,
        pred_counts,
        accuracy: (n > 0).then(|| correct as f64 / n as f64),
        issues,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLayer {
    name: String,
    dim: usize,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    num_samples: usize,
    num_classes: usize,
    layers: Vec<ManifestLayer>,
    true_labels_file: String,
    pred_labels_file: String,
    dtype: String,
    label_dtype: String,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LayerDataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    let bad = |message: String| Error::Manifest {
        path: manifest_path.clone(),
        message,
    };
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: manifest.version,
        });
    }
    if manifest.dtype != "f32le" {
        return Err(bad(format!("unsupported dtype '{}'", manifest.dtype)));
    }
    if manifest.label_dtype != "u16le" {
        return Err(bad(format!(
            "unsupported label_dtype '{}'",
            manifest.label_dtype
        )));
    }
    let n = manifest.num_samples;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for ml in &manifest.layers {
        let path = dir.join(&ml.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % 4 != 0 || bytes.len() / 4 != n * ml.dim {
            let values = bytes.len() / 4;
            let found_dim = values.checked_div(n).unwrap_or(values);
            return Err(Error::DimensionMismatch {
                what: format!("layer '{}' blob", ml.name),
                expected: ml.dim,
                found: found_dim,
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        layers.push(LayerBlock::new(ml.name.clone(), Matrix::new(n, ml.dim, data)?));
    }
    let true_labels = read_labels(&dir.join(&manifest.true_labels_file), n)?;
    let pred_labels = read_labels(&dir.join(&manifest.pred_labels_file), n)?;
    LayerDataset::new(manifest.num_classes, layers, true_labels, pred_labels)
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 2 * n {
        return Err(Error::RowCountMismatch {
            what: format!("label blob {}", path.display()),
            expected: n,
            found: bytes.len() / 2,
        });
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect())
}

/// Writes `ds` in the directory format. Layer values are quantized to `f32`.
pub fn write_dataset(ds: &LayerDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if ds.num_classes() > u16::MAX as usize + 1 {
        return Err(Error::invalid("too many classes for u16 labels"));
    }
    let mut layers = Vec::with_capacity(ds.num_layers());
    for (l, block) in ds.layers().iter().enumerate() {
        let file = format!("layer_{l}.f32");
        let mut bytes = Vec::with_capacity(block.matrix.as_slice().len() * 4);
        for &v in block.matrix.as_slice() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        layers.push(ManifestLayer {
            name: block.name.clone(),
            dim: block.dim(),
            file,
        });
    }
    write_labels(&dir.join("true_labels.u16"), ds.true_labels())?;
    write_labels(&dir.join("pred_labels.u16"), ds.pred_labels())?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        num_samples: ds.num_samples(),
        num_classes: ds.num_classes(),
        layers,
        true_labels_file: "true_labels.u16".into(),
        pred_labels_file: "pred_labels.u16".into(),
        dtype: "f32le".into(),
        label_dtype: "u16le".into(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.len() * 2);
    for &l in labels {
        bytes.extend_from_slice(&(l as u16).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
