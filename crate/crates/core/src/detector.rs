//! Detector fitting, scoring, thresholding and corrected prediction.
//!
//! A fitted [`DetectorModel`] holds per-layer projections, the projected
//! calibration set with its neighbor indices, the statistic models, the
//! empirical nulls and the calibrated thresholds. Calibration samples are
//! scored leave-one-out against everything else in the calibration set.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blob::{read_f64, read_json, write_f64, write_json};
use crate::dataset::LayerDataset;
use crate::dimreduce::{fit_projection, DimSearchConfig, DimSearchReport, ProjectionMethod, ProjectionModel, MAX_UNREDUCED_DIM};
use crate::error::{Error, Result};
use crate::knn::{default_k, ClassCounts, Metric, SearchMode};
use crate::matrix::Matrix;
use crate::pvalues::{
    stream_seed, AklpeReference, Combiner, EmpiricalNulls, NullCell, NullConfig, PValueBundle, DEFAULT_BOOTSTRAP,
    DEFAULT_MIN_NULL, MAX_LAYERS_FOR_PAIRS,
};
use crate::teststats::{fit_multinomial, LayerSpace, MultinomialModel, StatContext, StatKind, StatVectorBundle, DEFAULT_PRIOR_COUNT};

pub const MODEL_VERSION: u32 = 1;
const SCORE_STREAM: u64 = 0x5c0e_5c0e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Adversarial,
    Ood,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adversarial" => Ok(Task::Adversarial),
            "ood" => Ok(Task::Ood),
            other => Err(Error::invalid(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub kinds: Vec<StatKind>,
    pub combiner: Combiner,
    pub alpha: f64,
    /// Layer-pair p-values; `None` enables them for at most eight layers.
    pub pairs: Option<bool>,
    /// Neighbor count; `None` uses `ceil(n^0.4)` of the calibration size.
    pub k: Option<usize>,
    pub metric: Metric,
    pub search: SearchMode,
    pub projection: ProjectionMethod,
    pub reduce_dims: bool,
    pub prior_count: f64,
    pub bootstrap: usize,
    pub min_null: usize,
    pub threshold_margin: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kinds: vec![StatKind::Multinomial],
            combiner: Combiner::Fisher,
            alpha: 0.05,
            pairs: None,
            k: None,
            metric: Metric::Cosine,
            search: SearchMode::Auto,
            projection: ProjectionMethod::Pca,
            reduce_dims: true,
            prior_count: DEFAULT_PRIOR_COUNT,
            bootstrap: DEFAULT_BOOTSTRAP,
            min_null: DEFAULT_MIN_NULL,
            threshold_margin: 1.0,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.kinds.is_empty() {
            return Err(Error::invalid("at least one statistic kind is required"));
        }
        let mut sorted = self.kinds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.kinds {
            return Err(Error::invalid("statistic kinds must be distinct and in canonical order"));
        }
        if self.k == Some(0) {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(self.prior_count > 0.0) || !self.prior_count.is_finite() {
            return Err(Error::invalid("prior count must be positive"));
        }
        if !(self.threshold_margin > 0.0) {
            return Err(Error::invalid("threshold margin must be positive"));
        }
        Ok(())
    }
}

/// A calibrated decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    pub alpha: f64,
    /// No observed score achieved the target rate; `tau` is the maximum
    /// score plus the configured margin.
    pub degenerate: bool,
}

/// Smallest observed score `τ` with `#{s >= τ} / N <= α`.
pub fn calibrate_threshold(scores: &[f64], alpha: f64, margin: f64) -> Result<Threshold> {
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite calibration score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let allowed = (alpha * scores.len() as f64 + 1e-9).floor() as usize;
    let mut tau = None;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == v {
            j += 1;
        }
        // `j` scores are >= v.
        if j > allowed {
            break;
        }
        tau = Some(v);
        i = j;
    }
    Ok(match tau {
        Some(tau) => Threshold {
            tau,
            alpha,
            degenerate: false,
        },
        None => Threshold {
            tau: sorted[0] + margin,
            alpha,
            degenerate: true,
        },
    })
}

/// `max_{c != ĉ} log q_true[c] - log q_pred`.
pub fn adversarial_score(q: &PValueBundle) -> Result<f64> {
    let best = q
        .log_q_true
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != q.pred_class)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return Err(Error::invalid("adversarial score needs at least two classes"));
    }
    Ok(best - q.log_q_pred)
}

/// `-log q_pred`.
pub fn ood_score(q: &PValueBundle) -> f64 {
    -q.log_q_pred
}

/// Keeps the predicted class below the threshold, otherwise the class with
/// the largest combined p-value (ties to the smallest index).
pub fn corrected_predict(q: &PValueBundle, adv_score: f64, tau: f64) -> usize {
    if adv_score < tau {
        return q.pred_class;
    }
    let mut best = 0;
    for (c, &v) in q.log_q_true.iter().enumerate() {
        if v > q.log_q_true[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: usize,
    pub pred_class: usize,
    pub adv_score: f64,
    pub ood_score: f64,
    pub detected: bool,
    pub corrected_class: usize,
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub num_classes: usize,
    pub layer_names: Vec<String>,
    pub projections: Vec<ProjectionModel>,
    pub dim_reports: Vec<Option<DimSearchReport>>,
    pub context: StatContext,
    pub nulls: EmpiricalNulls,
    pub adversarial: Threshold,
    pub ood: Threshold,
    pub calibration_adv_scores: Vec<f64>,
    pub calibration_ood_scores: Vec<f64>,
}

fn build_context(
    projected: Vec<Matrix>,
    true_labels: &[usize],
    pred_labels: &[usize],
    num_classes: usize,
    kinds: Vec<StatKind>,
    k: usize,
    metric: Metric,
    search: SearchMode,
) -> Result<StatContext> {
    let layers = projected
        .into_iter()
        .map(|p| LayerSpace::build(p, true_labels, pred_labels, num_classes, metric, search))
        .collect::<Result<Vec<_>>>()?;
    Ok(StatContext {
        kinds,
        k,
        num_classes,
        true_labels: true_labels.to_vec(),
        pred_labels: pred_labels.to_vec(),
        layers,
        multinomial: None,
    })
}

/// Fits projections, statistic models, nulls and thresholds on `ds`.
pub fn fit_detector(ds: &LayerDataset, config: &DetectorConfig) -> Result<DetectorModel> {
    config.validate()?;
    let n = ds.num_samples();
    let m = ds.num_classes();
    if n == 0 {
        return Err(Error::Empty("calibration dataset"));
    }
    if m < 2 {
        return Err(Error::invalid("detection needs at least two classes"));
    }
    let mut projections = Vec::with_capacity(ds.num_layers());
    let mut dim_reports = Vec::with_capacity(ds.num_layers());
    for block in ds.layers() {
        let d = block.dim();
        if config.reduce_dims && d > MAX_UNREDUCED_DIM && config.projection != ProjectionMethod::Identity {
            let search = DimSearchConfig {
                method: config.projection,
                metric: config.metric,
                folds: 5,
                seed: config.seed,
            };
            match fit_projection(&block.matrix, ds.true_labels(), &search) {
                Ok((model, report)) => {
                    projections.push(model);
                    dim_reports.push(Some(report));
                }
                // Intrinsic dimension at or above the width: keep the layer.
                Err(Error::InvalidArgument(_)) => {
                    projections.push(ProjectionModel::identity(d));
                    dim_reports.push(None);
                }
                Err(e) => return Err(e),
            }
        } else {
            projections.push(ProjectionModel::identity(d));
            dim_reports.push(None);
        }
    }
    let projected = ds
        .layers()
        .iter()
        .zip(&projections)
        .map(|(b, p)| p.apply(&b.matrix))
        .collect::<Result<Vec<_>>>()?;
    let k = match config.k {
        Some(k) => k,
        None => default_k(n)?,
    };
    if k >= n {
        return Err(Error::KTooLarge { k, available: n - 1 });
    }
    let mut context = build_context(
        projected,
        ds.true_labels(),
        ds.pred_labels(),
        m,
        config.kinds.clone(),
        k,
        config.metric,
        config.search,
    )?;

    let rows = |i: usize| -> Vec<&[f64]> { context.layers.iter().map(|s| s.points().row(i)).collect() };
    let counts: Vec<Vec<ClassCounts>> = if context.uses_counts() {
        (0..n)
            .into_par_iter()
            .map(|i| context.layer_counts(&rows(i), Some(i)))
            .collect::<Result<_>>()?
    } else {
        vec![Vec::new(); n]
    };
    if config.kinds.contains(&StatKind::Multinomial) {
        let model = fit_multinomial(&counts, ds.true_labels(), ds.pred_labels(), m, config.prior_count)?;
        context.multinomial = Some(model);
    }
    let context = context;
    let rows = |i: usize| -> Vec<&[f64]> { context.layers.iter().map(|s| s.points().row(i)).collect() };
    let bundles: Vec<StatVectorBundle> = (0..n)
        .into_par_iter()
        .map(|i| context.bundle(&rows(i), ds.pred_labels()[i], Some(i), Some(&counts[i])))
        .collect::<Result<_>>()?;
    let null_config = NullConfig {
        combiner: config.combiner,
        use_pairs: config.pairs.unwrap_or(ds.num_layers() <= MAX_LAYERS_FOR_PAIRS),
        bootstrap: config.bootstrap,
        min_null: config.min_null,
    };
    let nulls = EmpiricalNulls::fit(&bundles, ds.true_labels(), m, null_config)?;
    let qs: Vec<PValueBundle> = bundles
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, i as u64));
            nulls.combine(b, Some(i), &mut rng)
        })
        .collect::<Result<_>>()?;
    let calibration_adv_scores = qs.iter().map(adversarial_score).collect::<Result<Vec<_>>>()?;
    let calibration_ood_scores: Vec<f64> = qs.iter().map(ood_score).collect();
    let adversarial = calibrate_threshold(&calibration_adv_scores, config.alpha, config.threshold_margin)?;
    let ood = calibrate_threshold(&calibration_ood_scores, config.alpha, config.threshold_margin)?;
    Ok(DetectorModel {
        config: config.clone(),
        num_classes: m,
        layer_names: ds.layers().iter().map(|b| b.name.clone()).collect(),
        projections,
        dim_reports,
        context,
        nulls,
        adversarial,
        ood,
        calibration_adv_scores,
        calibration_ood_scores,
    })
}

impl DetectorModel {
    pub fn num_layers(&self) -> usize {
        self.projections.len()
    }

    pub fn threshold(&self, task: Task) -> Threshold {
        match task {
            Task::Adversarial => self.adversarial,
            Task::Ood => self.ood,
        }
    }

    /// Recalibrates both thresholds from the stored calibration scores.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        let margin = self.config.threshold_margin;
        self.adversarial = calibrate_threshold(&self.calibration_adv_scores, alpha, margin)?;
        self.ood = calibrate_threshold(&self.calibration_ood_scores, alpha, margin)?;
        self.config.alpha = alpha;
        Ok(())
    }

    /// Projects raw layer vectors into the detector's spaces.
    pub fn project(&self, layers: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if layers.len() != self.num_layers() {
            return Err(Error::DimensionMismatch {
                what: "number of layers".into(),
                expected: self.num_layers(),
                found: layers.len(),
            });
        }
        layers.iter().zip(&self.projections).map(|(x, p)| p.apply_row(x)).collect()
    }

    /// Combined p-values of one (raw, unprojected) sample.
    pub fn pvalues(&self, layers: &[&[f64]], pred_class: usize, sample_id: u64) -> Result<PValueBundle> {
        let projected = self.project(layers)?;
        let refs: Vec<&[f64]> = projected.iter().map(Vec::as_slice).collect();
        let bundle = self.context.bundle(&refs, pred_class, None, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed ^ SCORE_STREAM, sample_id));
        self.nulls.combine(&bundle, None, &mut rng)
    }

    pub fn score_sample(&self, layers: &[&[f64]], pred_class: usize, sample_id: usize, task: Task) -> Result<ScoredSample> {
        let q = self.pvalues(layers, pred_class, sample_id as u64)?;
        self.decide(&q, sample_id, task)
    }

    /// Scores calibration sample `i` with itself left out of the neighbor
    /// sets and nulls, matching how the thresholds were calibrated.
    pub fn score_calibration_member(&self, i: usize, task: Task) -> Result<ScoredSample> {
        if i >= self.context.num_reference() {
            return Err(Error::invalid(format!("calibration index {i} out of range")));
        }
        let rows: Vec<&[f64]> = self.context.layers.iter().map(|s| s.points().row(i)).collect();
        let pred_class = self.context.pred_labels[i];
        let bundle = self.context.bundle(&rows, pred_class, Some(i), None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, i as u64));
        let q = self.nulls.combine(&bundle, Some(i), &mut rng)?;
        self.decide(&q, i, task)
    }

    /// Whether `ds` is exactly the calibration set (same rows, labels and
    /// order after projection).
    pub fn is_calibration_set(&self, ds: &LayerDataset) -> Result<bool> {
        let ctx = &self.context;
        if ds.num_samples() != ctx.num_reference()
            || ds.true_labels() != ctx.true_labels.as_slice()
            || ds.pred_labels() != ctx.pred_labels.as_slice()
        {
            return Ok(false);
        }
        for i in 0..ds.num_samples() {
            let z = self.project(&ds.sample(i))?;
            if z.iter().zip(&ctx.layers).any(|(v, s)| v.as_slice() != s.points().row(i)) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn decide(&self, q: &PValueBundle, sample_id: usize, task: Task) -> Result<ScoredSample> {
        let pred_class = q.pred_class;
        let adv = adversarial_score(q)?;
        let ood = ood_score(q);
        let corrected = corrected_predict(q, adv, self.adversarial.tau);
        let detected = match task {
            Task::Adversarial => adv >= self.adversarial.tau,
            Task::Ood => ood >= self.ood.tau,
        };
        Ok(ScoredSample {
            sample_id,
            pred_class,
            adv_score: adv,
            ood_score: ood,
            detected,
            corrected_class: corrected,
        })
    }

    /// Scores every sample of `ds` (in parallel; results in dataset order).
    /// The calibration set itself is scored leave-one-out.
    pub fn score_dataset(&self, ds: &LayerDataset, task: Task) -> Result<Vec<ScoredSample>> {
        self.check_compatible(ds)?;
        if self.is_calibration_set(ds)? {
            return (0..ds.num_samples())
                .into_par_iter()
                .map(|i| self.score_calibration_member(i, task))
                .collect();
        }
        (0..ds.num_samples())
            .into_par_iter()
            .map(|i| self.score_sample(&ds.sample(i), ds.pred_labels()[i], i, task))
            .collect()
    }

    pub fn check_compatible(&self, ds: &LayerDataset) -> Result<()> {
        if ds.num_layers() != self.num_layers() {
            return Err(Error::DimensionMismatch {
                what: "number of layers".into(),
                expected: self.num_layers(),
                found: ds.num_layers(),
            });
        }
        for (l, (b, p)) in ds.layers().iter().zip(&self.projections).enumerate() {
            if b.dim() != p.input_dim() {
                return Err(Error::DimensionMismatch {
                    what: format!("layer {l} ('{}')", b.name),
                    expected: p.input_dim(),
                    found: b.dim(),
                });
            }
        }
        if ds.num_classes() != self.num_classes {
            return Err(Error::DimensionMismatch {
                what: "number of classes".into(),
                expected: self.num_classes,
                found: ds.num_classes(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    version: u32,
    config: DetectorConfig,
    num_classes: usize,
    num_calibration: usize,
    k: usize,
    layers: Vec<LayerEntry>,
    adversarial: Threshold,
    ood: Threshold,
    pairs: Vec<(usize, usize)>,
    num_slots: usize,
    null_config: NullConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    input_dim: usize,
    output_dim: usize,
    method: ProjectionMethod,
    report: Option<DimSearchReport>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Labels {
    true_labels: Vec<usize>,
    pred_labels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NullEntry {
    conditioning: String,
    class: usize,
    members: Vec<usize>,
    aklpe_k: Option<usize>,
}

const MANIFEST: &str = "manifest.json";

impl DetectorModel {
    /// Writes the model to a directory: `manifest.json`, label and null
    /// metadata as JSON, and matrices as little-endian `f64` blobs.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut layers = Vec::new();
        for (l, p) in self.projections.iter().enumerate() {
            let mut blob = p.mean.clone();
            blob.extend_from_slice(p.basis.as_slice());
            write_f64(&dir.join(format!("projection_{l}.f64")), &blob)?;
            write_f64(&dir.join(format!("calibration_{l}.f64")), self.context.layers[l].points().as_slice())?;
            layers.push(LayerEntry {
                name: self.layer_names[l].clone(),
                input_dim: p.input_dim(),
                output_dim: p.output_dim(),
                method: p.method,
                report: self.dim_reports[l].clone(),
            });
        }
        write_json(
            &dir.join("labels.json"),
            &Labels {
                true_labels: self.context.true_labels.clone(),
                pred_labels: self.context.pred_labels.clone(),
            },
        )?;
        if let Some(mm) = &self.context.multinomial {
            write_json(&dir.join("multinomial.json"), mm)?;
        }
        let mut entries = Vec::new();
        for (cond, cells) in [("pred", &self.nulls.pred), ("true", &self.nulls.true_)] {
            for (c, cell) in cells.iter().enumerate() {
                write_f64(&dir.join(format!("null_{cond}_{c}.f64")), cell.values.as_slice())?;
                if let Some(a) = &cell.aklpe {
                    write_f64(&dir.join(format!("aklpe_{cond}_{c}.f64")), &a.sorted_scores)?;
                }
                entries.push(NullEntry {
                    conditioning: cond.into(),
                    class: c,
                    members: cell.members.clone(),
                    aklpe_k: cell.aklpe.as_ref().map(|a| a.k),
                });
            }
        }
        write_json(&dir.join("nulls.json"), &entries)?;
        let mut scores = self.calibration_adv_scores.clone();
        scores.extend_from_slice(&self.calibration_ood_scores);
        write_f64(&dir.join("calibration_scores.f64"), &scores)?;
        let manifest = ModelManifest {
            version: MODEL_VERSION,
            config: self.config.clone(),
            num_classes: self.num_classes,
            num_calibration: self.context.num_reference(),
            k: self.context.k,
            layers,
            adversarial: self.adversarial,
            ood: self.ood,
            pairs: self.nulls.pairs.clone(),
            num_slots: self.nulls.num_slots,
            null_config: self.nulls.config,
        };
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn read_from(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: ModelManifest = read_json(&dir.join(MANIFEST))?;
        if manifest.version != MODEL_VERSION {
            return Err(Error::Version {
                expected: MODEL_VERSION,
                found: manifest.version,
            });
        }
        manifest.config.validate()?;
        let n = manifest.num_calibration;
        let m = manifest.num_classes;
        let labels: Labels = read_json(&dir.join("labels.json"))?;
        if labels.true_labels.len() != n || labels.pred_labels.len() != n {
            return Err(Error::RowCountMismatch {
                what: "calibration labels".into(),
                expected: n,
                found: labels.true_labels.len(),
            });
        }
        if labels.true_labels.iter().chain(&labels.pred_labels).any(|&l| l >= m) {
            return Err(Error::invalid("calibration label out of range"));
        }
        let mut projections = Vec::new();
        let mut projected = Vec::new();
        let mut dim_reports = Vec::new();
        let mut layer_names = Vec::new();
        for (l, entry) in manifest.layers.into_iter().enumerate() {
            let (d, dp) = (entry.input_dim, entry.output_dim);
            let blob = read_f64(&dir.join(format!("projection_{l}.f64")), d + d * dp)?;
            projections.push(ProjectionModel {
                mean: blob[..d].to_vec(),
                basis: Matrix::new(d, dp, blob[d..].to_vec())?,
                method: entry.method,
            });
            let pts = read_f64(&dir.join(format!("calibration_{l}.f64")), n * dp)?;
            projected.push(Matrix::new(n, dp, pts)?);
            dim_reports.push(entry.report);
            layer_names.push(entry.name);
        }
        let mut context = build_context(
            projected,
            &labels.true_labels,
            &labels.pred_labels,
            m,
            manifest.config.kinds.clone(),
            manifest.k,
            manifest.config.metric,
            manifest.config.search,
        )?;
        if manifest.config.kinds.contains(&StatKind::Multinomial) {
            let mm: MultinomialModel = read_json(&dir.join("multinomial.json"))?;
            let shape_ok = |pi: &Vec<Vec<Vec<f64>>>| {
                pi.len() == layer_names.len() && pi.iter().all(|l| l.len() == m && l.iter().all(|v| v.len() == m))
            };
            if !shape_ok(&mm.pi_pred) || !shape_ok(&mm.pi_true) {
                return Err(Error::invalid("multinomial model shape does not match the detector"));
            }
            context.multinomial = Some(mm);
        }
        let entries: Vec<NullEntry> = read_json(&dir.join("nulls.json"))?;
        let mut pred = Vec::new();
        let mut true_ = Vec::new();
        for e in entries {
            let rows = e.members.len();
            let values = Matrix::new(
                rows,
                manifest.num_slots,
                read_f64(&dir.join(format!("null_{}_{}.f64", e.conditioning, e.class)), rows * manifest.num_slots)?,
            )?;
            let aklpe = match e.aklpe_k {
                Some(k) => {
                    let scores = read_f64(&dir.join(format!("aklpe_{}_{}.f64", e.conditioning, e.class)), rows)?;
                    Some(AklpeReference::from_parts(values.clone(), k, scores)?)
                }
                None => None,
            };
            let cell = NullCell::new(e.members, values, aklpe)?;
            match e.conditioning.as_str() {
                "pred" => pred.push(cell),
                "true" => true_.push(cell),
                other => return Err(Error::invalid(format!("unknown conditioning '{other}'"))),
            }
        }
        if pred.len() != m || true_.len() != m {
            return Err(Error::invalid("null cells do not cover every class"));
        }
        let nulls = EmpiricalNulls {
            config: manifest.null_config,
            num_slots: manifest.num_slots,
            pairs: manifest.pairs,
            pred,
            true_,
        };
        let scores = read_f64(&dir.join("calibration_scores.f64"), 2 * n)?;
        Ok(DetectorModel {
            config: manifest.config,
            num_classes: m,
            layer_names,
            projections,
            dim_reports,
            context,
            nulls,
            adversarial: manifest.adversarial,
            ood: manifest.ood,
            calibration_adv_scores: scores[..n].to_vec(),
            calibration_ood_scores: scores[n..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LayerBlock;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn q(log_pred: f64, log_true: Vec<f64>, pred: usize) -> PValueBundle {
        PValueBundle {
            log_q_pred: log_pred,
            log_q_true: log_true,
            pred_class: pred,
            combiner: Combiner::Hmp,
        }
    }

    #[test]
    fn score_examples() {
        let b = q(0.5f64.ln(), vec![0.5f64.ln(), 0.5f64.ln()], 0);
        assert_eq!(adversarial_score(&b).unwrap(), 0.0);
        let b = q(0.1f64.ln(), vec![0.1f64.ln(), 0.8f64.ln(), 0.3f64.ln()], 0);
        assert!((adversarial_score(&b).unwrap() - 8f64.ln()).abs() < 1e-12);
        let b = q(0.0, vec![0.0, 0.7f64.ln()], 0);
        assert!(adversarial_score(&b).unwrap() <= 0.0);
        assert!(adversarial_score(&q(0.0, vec![0.0], 0)).is_err());

        assert_eq!(ood_score(&q(0.0, vec![0.0, 0.0], 0)), 0.0);
        assert!((ood_score(&q(0.01f64.ln(), vec![0.0, 0.0], 0)) - 100f64.ln()).abs() < 1e-12);
        let n = 200.0f64;
        assert!((ood_score(&q((1.0 / (n + 1.0)).ln(), vec![0.0, 0.0], 0)) - (n + 1.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = calibrate_threshold(&scores, 0.05, 1.0).unwrap();
        assert_eq!(t.tau, 96.0);
        assert!(!t.degenerate);
        let t = calibrate_threshold(&[3.0; 10], 0.5, 1.0).unwrap();
        assert_eq!(t.tau, 4.0);
        assert!(t.degenerate);
        let t = calibrate_threshold(&scores, 0.99, 1.0).unwrap();
        assert_eq!(t.tau, 2.0);
        let t = calibrate_threshold(&scores, 0.001, 0.5).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.tau, 100.5);
        assert!(calibrate_threshold(&[], 0.1, 1.0).is_err());
        assert!(calibrate_threshold(&scores, 1.0, 1.0).is_err());
    }

    #[test]
    fn corrected_prediction_examples() {
        let b = q(0.1f64.ln(), vec![0.1f64.ln(), 0.9f64.ln(), 0.2f64.ln()], 2);
        assert_eq!(corrected_predict(&b, 1.0, 2.0), 2);
        assert_eq!(corrected_predict(&b, 2.0, 2.0), 1);
        let tie = q(0.1f64.ln(), vec![0.5f64.ln(), 0.5f64.ln()], 1);
        assert_eq!(corrected_predict(&tie, 5.0, 0.0), 0);
    }

    proptest! {
        #[test]
        fn threshold_rate_bound(scores in proptest::collection::vec(-50.0f64..50.0, 1..300), alpha in 0.001f64..0.999) {
            let t = calibrate_threshold(&scores, alpha, 1.0).unwrap();
            let flagged = scores.iter().filter(|&&s| s >= t.tau).count();
            prop_assert!(flagged as f64 <= alpha * scores.len() as f64 + 1e-9);
            if !t.degenerate {
                prop_assert!(scores.contains(&t.tau));
                // Any smaller observed score would exceed the rate.
                let below = scores.iter().cloned().filter(|&s| s < t.tau).fold(f64::NEG_INFINITY, f64::max);
                if below.is_finite() {
                    let more = scores.iter().filter(|&&s| s >= below).count();
                    prop_assert!(more as f64 > alpha * scores.len() as f64);
                }
            }
        }

        #[test]
        fn monotone_transform_keeps_detection_set(scores in proptest::collection::vec(-5.0f64..5.0, 1..200), alpha in 0.01f64..0.5) {
            let g = |s: f64| 3.0 * s.exp() + 1.0;
            let mapped: Vec<f64> = scores.iter().map(|&s| g(s)).collect();
            let t1 = calibrate_threshold(&scores, alpha, 1.0).unwrap();
            let t2 = calibrate_threshold(&mapped, alpha, 1.0).unwrap();
            let a: Vec<bool> = scores.iter().map(|&s| s >= t1.tau).collect();
            let b: Vec<bool> = mapped.iter().map(|&s| s >= t2.tau).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn adversarial_score_monotone(lp in -10.0f64..0.0, dp in 0.01f64..5.0, lt in proptest::collection::vec(-10.0f64..0.0, 3), dt in 0.01f64..5.0) {
            let base = q(lp, lt.clone(), 0);
            let s0 = adversarial_score(&base).unwrap();
            let more_typical = q((lp + dp).min(0.0), lt.clone(), 0);
            prop_assert!(adversarial_score(&more_typical).unwrap() <= s0);
            if lp + dp <= 0.0 {
                prop_assert!(adversarial_score(&more_typical).unwrap() < s0);
            }
            let mut raised = lt.clone();
            raised[1] = (raised[1] + dt).min(0.0);
            prop_assert!(adversarial_score(&q(lp, raised, 0)).unwrap() >= s0);
        }
    }

    pub(crate) fn blob_dataset(n_per: usize, seed: u64) -> LayerDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let centres: [[f64; 2]; 3] = [[0.0, 3.0], [2.6, -1.5], [-2.6, -1.5]];
        let mut l0 = Vec::new();
        let mut l1 = Vec::new();
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..n_per {
                let x = [centre[0] + noise.sample(&mut rng), centre[1] + noise.sample(&mut rng)];
                let scores: Vec<f64> = centres.iter().map(|m| -((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2))).collect();
                let pred = (0..3).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
                l0.push(x.to_vec());
                l1.push(scores);
                labels.push(c);
                preds.push(pred);
            }
        }
        LayerDataset::new(
            3,
            vec![
                LayerBlock::new("input", Matrix::from_rows(&l0).unwrap()),
                LayerBlock::new("logits", Matrix::from_rows(&l1).unwrap()),
            ],
            labels,
            preds,
        )
        .unwrap()
    }

    #[test]
    fn fit_score_round_trip_and_determinism() {
        let ds = blob_dataset(120, 1);
        let config = DetectorConfig {
            metric: Metric::Euclidean,
            alpha: 0.1,
            ..Default::default()
        };
        let model = fit_detector(&ds, &config).unwrap();
        let rate = model.calibration_adv_scores.iter().filter(|&&s| s >= model.adversarial.tau).count() as f64
            / ds.num_samples() as f64;
        assert!(rate <= 0.1 + 1e-12);
        assert!(rate >= 0.1 - 2.0 / (ds.num_samples() as f64).sqrt());

        let test = blob_dataset(30, 2);
        let scored = model.score_dataset(&test, Task::Adversarial).unwrap();
        assert_eq!(scored.len(), 90);
        let again = fit_detector(&ds, &config).unwrap().score_dataset(&test, Task::Adversarial).unwrap();
        assert_eq!(scored, again);

        let dir = tempfile::tempdir().unwrap();
        model.write_to(dir.path()).unwrap();
        let back = DetectorModel::read_from(dir.path()).unwrap();
        assert_eq!(back.score_dataset(&test, Task::Adversarial).unwrap(), scored);
        let dir2 = tempfile::tempdir().unwrap();
        back.write_to(dir2.path()).unwrap();
        for entry in fs::read_dir(dir.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(dir.path().join(&name)).unwrap(),
                fs::read(dir2.path().join(&name)).unwrap(),
                "{name:?}"
            );
        }

        let empty = test.empty_like();
        assert!(model.score_dataset(&empty, Task::Ood).unwrap().is_empty());
    }

    #[test]
    fn calibration_set_is_scored_leave_one_out() {
        let ds = blob_dataset(100, 4);
        let config = DetectorConfig {
            metric: Metric::Euclidean,
            alpha: 0.1,
            ..Default::default()
        };
        let model = fit_detector(&ds, &config).unwrap();
        assert!(model.is_calibration_set(&ds).unwrap());
        assert!(!model.is_calibration_set(&blob_dataset(100, 5)).unwrap());
        let scored = model.score_dataset(&ds, Task::Adversarial).unwrap();
        for (s, &c) in scored.iter().zip(&model.calibration_adv_scores) {
            assert_eq!(s.adv_score, c);
        }
        let rate = scored.iter().filter(|s| s.detected).count() as f64 / ds.num_samples() as f64;
        let expected = model.calibration_adv_scores.iter().filter(|&&c| c >= model.adversarial.tau).count() as f64
            / ds.num_samples() as f64;
        assert_eq!(rate, expected);
        assert!(rate <= 0.1 + 1e-12);
    }

    #[test]
    fn every_combiner_and_kind_fits() {
        let ds = blob_dataset(60, 3);
        for combiner in [Combiner::Fisher, Combiner::Hmp, Combiner::Aklpe] {
            let config = DetectorConfig {
                kinds: vec![StatKind::Multinomial, StatKind::Binomial, StatKind::Trust, StatKind::Lid],
                combiner,
                metric: Metric::Euclidean,
                bootstrap: 10,
                ..Default::default()
            };
            let model = fit_detector(&ds, &config).unwrap();
            assert_eq!(model.nulls.num_slots, 8);
            let s = model.score_sample(&ds.sample(0), ds.pred_labels()[0], 0, Task::Ood).unwrap();
            assert!(s.adv_score.is_finite() && s.ood_score >= 0.0);
        }
    }

    #[test]
    fn config_validation() {
        let bad = DetectorConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))));
        let bad = DetectorConfig {
            kinds: vec![StatKind::Trust, StatKind::Multinomial],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"alpha": 0.1, "bogus": 1}"#;
        assert!(serde_json::from_str::<DetectorConfig>(json).is_err());
    }
}
