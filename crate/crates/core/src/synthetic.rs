//! Synthetic data and the end-to-end demo pipeline: Gaussian blobs, a
//! trained toy network, detectors fitted on a calibration split, the custom
//! attack on test points and uniform-noise out-of-distribution inputs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackResult};
use crate::dataset::LayerDataset;
use crate::detector::{fit_detector, DetectorConfig, DetectorModel, ScoredSample, Task};
use crate::error::{Error, Result};
use crate::knn::Metric;
use crate::matrix::Matrix;
use crate::metrics::{average_precision, pauc, proportion_sweep, LabeledScores, DEFAULT_REPEATS};
use crate::pvalues::{stream_seed, Combiner};
use crate::teststats::StatKind;
use crate::toynet::{export_representations, train_toy, Activation, ToyNetwork, TrainConfig, TrainReport};

/// Class centres on a circle of the given radius.
pub fn circle_centres(num_classes: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let a = std::f64::consts::TAU * c as f64 / num_classes as f64 + std::f64::consts::FRAC_PI_2;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// `per_class` isotropic Gaussian points around each centre, interleaved by
/// class.
pub fn gaussian_blobs(centres: &[Vec<f64>], per_class: usize, std_dev: f64, seed: u64) -> Result<(Matrix, Vec<usize>)> {
    let dim = centres.first().ok_or(Error::Empty("blob centres"))?.len();
    let noise = Normal::new(0.0, std_dev).map_err(|e| Error::invalid(format!("blob spread: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(per_class * centres.len() * dim);
    let mut labels = Vec::with_capacity(per_class * centres.len());
    for _ in 0..per_class {
        for (c, centre) in centres.iter().enumerate() {
            data.extend(centre.iter().map(|&m| m + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Ok((Matrix::new(labels.len(), dim, data)?, labels))
}

/// Points drawn uniformly from a box.
pub fn uniform_noise(n: usize, range: &[(f64, f64)], seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n)
        .flat_map(|_| range.iter().map(|&(a, b)| a + (b - a) * rng.random::<f64>()).collect::<Vec<_>>())
        .collect();
    Matrix::new(n, range.len(), data).expect("shape matches")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub num_classes: usize,
    pub radius: f64,
    pub std_dev: f64,
    pub train_per_class: usize,
    pub calibration_per_class: usize,
    pub test_per_class: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub input_range: (f64, f64),
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    /// Detector used for the out-of-distribution task.
    pub ood_detector: DetectorConfig,
    pub attack: AttackConfig,
    pub num_attacks: usize,
    pub num_noise: usize,
    /// Anomalous proportion at which metrics are reported.
    pub proportion: f64,
    pub pauc_alpha: f64,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        let detector = DetectorConfig {
            metric: Metric::Euclidean,
            alpha: 0.1,
            ..Default::default()
        };
        Self {
            num_classes: 3,
            radius: 2.5,
            std_dev: 1.0,
            train_per_class: 300,
            calibration_per_class: 300,
            test_per_class: 200,
            hidden: vec![16, 16],
            activation: Activation::Tanh,
            input_range: (-20.0, 20.0),
            train: TrainConfig {
                epochs: 100,
                ..Default::default()
            },
            ood_detector: DetectorConfig {
                kinds: vec![StatKind::Lid],
                combiner: Combiner::Aklpe,
                ..detector.clone()
            },
            detector,
            attack: AttackConfig::default(),
            num_attacks: 200,
            num_noise: 200,
            proportion: 0.1,
            pauc_alpha: 0.2,
            seed: 0,
        }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("the demo needs at least two classes"));
        }
        if self.train_per_class == 0 || self.calibration_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("every split needs samples"));
        }
        if !(self.std_dev > 0.0) || !(self.input_range.0 < self.input_range.1) {
            return Err(Error::invalid("invalid blob spread or input range"));
        }
        if !(self.proportion > 0.0 && self.proportion < 1.0) {
            return Err(Error::invalid("proportion outside (0, 1)"));
        }
        self.detector.validate()?;
        self.ood_detector.validate()?;
        self.attack.validate()
    }
}

/// Group means of the adversarial score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOrdering {
    pub attack: f64,
    pub misclassified: f64,
    pub correct: f64,
}

impl ScoreOrdering {
    pub fn holds(&self) -> bool {
        self.attack > self.misclassified && self.misclassified > self.correct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub attacks_run: usize,
    pub attack_successes: usize,
    /// Attack outputs the network misclassifies; these form the adversarial set.
    pub adversarial_count: usize,
    pub mean_success_norm: Option<f64>,
    pub ordering: ScoreOrdering,
    pub adversarial_ap: f64,
    pub adversarial_pauc: f64,
    pub detected_attacks: usize,
    pub corrected_accuracy: Option<f64>,
    pub ood_ap: f64,
    pub ood_pauc: f64,
    pub natural_detection_rate: f64,
    pub seconds: f64,
}

pub struct DemoRun {
    pub config: DemoConfig,
    pub network: ToyNetwork,
    pub train_report: TrainReport,
    pub calibration: LayerDataset,
    pub test: LayerDataset,
    pub test_inputs: Matrix,
    pub detector: DetectorModel,
    pub ood_detector: DetectorModel,
    pub natural_scores: Vec<ScoredSample>,
    /// `(test index, result)` for every attacked test point.
    pub attacks: Vec<(usize, AttackResult)>,
    pub noise_inputs: Matrix,
    pub noise_scores: Vec<ScoredSample>,
    pub natural_ood_scores: Vec<ScoredSample>,
    pub summary: DemoSummary,
}

impl DemoRun {
    /// Attack outputs the network misclassifies.
    pub fn adversarial(&self) -> impl Iterator<Item = &(usize, AttackResult)> {
        self.attacks.iter().filter(|(_, r)| r.fools_network())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Median AP and pAUC over random anomalous subsets at `proportion`.
fn metrics_at(natural: &[f64], anomalous: &[f64], proportion: f64, alpha: f64, seed: u64) -> Result<(f64, f64)> {
    let mut scores = natural.to_vec();
    scores.extend_from_slice(anomalous);
    let mut flags = vec![false; natural.len()];
    flags.extend(std::iter::repeat_n(true, anomalous.len()));
    let ls = LabeledScores::new(scores, flags)?;
    let p_a = anomalous.len() as f64 / ls.len() as f64;
    if p_a <= proportion {
        return Ok((average_precision(&ls)?, pauc(&ls, alpha)?));
    }
    let pt = proportion_sweep(&ls, &[proportion], DEFAULT_REPEATS, &[alpha], seed)?;
    Ok((pt[0].average_precision, pt[0].pauc[0].1))
}

/// Runs the full synthetic pipeline.
pub fn run_demo(config: &DemoConfig) -> Result<DemoRun> {
    config.validate()?;
    let start = Instant::now();
    let seed = |stage: u64| stream_seed(config.seed, stage);
    let centres = circle_centres(config.num_classes, config.radius);
    let (train_x, train_y) = gaussian_blobs(&centres, config.train_per_class, config.std_dev, seed(1))?;
    let (calib_x, calib_y) = gaussian_blobs(&centres, config.calibration_per_class, config.std_dev, seed(2))?;
    let (test_x, test_y) = gaussian_blobs(&centres, config.test_per_class, config.std_dev, seed(3))?;
    let mut sizes = vec![2];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(config.num_classes);
    let mut network = ToyNetwork::random(&sizes, config.activation, vec![config.input_range; 2], seed(4))?;
    let train_report = train_toy(
        &mut network,
        &train_x,
        &train_y,
        &TrainConfig {
            seed: seed(5),
            ..config.train
        },
    )?;
    let calibration = export_representations(&network, &calib_x, &calib_y)?;
    let test = export_representations(&network, &test_x, &test_y)?;
    let detector = fit_detector(&calibration, &config.detector)?;
    let ood_detector = fit_detector(&calibration, &config.ood_detector)?;
    let natural_scores = detector.score_dataset(&test, Task::Adversarial)?;

    let candidates: Vec<usize> = (0..test.num_samples())
        .filter(|&i| natural_scores[i].pred_class == test_y[i] && natural_scores[i].corrected_class == test_y[i])
        .take(config.num_attacks)
        .collect();
    let attacks: Vec<(usize, AttackResult)> = candidates
        .par_iter()
        .map(|&i| {
            let r = run_attack(&network, &detector, test_x.row(i), test_y[i], test.num_samples() + i, &config.attack)?;
            Ok((i, r))
        })
        .collect::<Result<_>>()?;

    let noise_inputs = uniform_noise(config.num_noise, &[config.input_range; 2], seed(6));
    let noise_y: Vec<usize> = (0..config.num_noise).map(|i| i % config.num_classes).collect();
    let noise = export_representations(&network, &noise_inputs, &noise_y)?;
    let noise_scores = ood_detector.score_dataset(&noise, Task::Ood)?;
    let natural_ood_scores = ood_detector.score_dataset(&test, Task::Ood)?;

    let correct = (0..test.num_samples()).filter(|&i| test.pred_labels()[i] == test_y[i]);
    let wrong = (0..test.num_samples()).filter(|&i| test.pred_labels()[i] != test_y[i]);
    let adversarial: Vec<&AttackResult> = attacks.iter().map(|(_, r)| r).filter(|r| r.fools_network()).collect();
    let ordering = ScoreOrdering {
        attack: mean(adversarial.iter().map(|r| r.defense.adv_score)),
        misclassified: mean(wrong.map(|i| natural_scores[i].adv_score)),
        correct: mean(correct.map(|i| natural_scores[i].adv_score)),
    };
    let natural_adv: Vec<f64> = natural_scores.iter().map(|s| s.adv_score).collect();
    let attack_adv: Vec<f64> = adversarial.iter().map(|r| r.defense.adv_score).collect();
    let (adversarial_ap, adversarial_pauc) = if attack_adv.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        metrics_at(&natural_adv, &attack_adv, config.proportion, config.pauc_alpha, seed(7))?
    };
    let detected: Vec<&&AttackResult> = adversarial.iter().filter(|r| r.defense.detected).collect();
    let corrected_accuracy = (!detected.is_empty()).then(|| {
        detected.iter().filter(|r| r.defense.corrected_class == r.source_class).count() as f64 / detected.len() as f64
    });
    let successes: Vec<f64> = attacks.iter().filter(|(_, r)| r.success).map(|(_, r)| r.l2_norm).collect();
    let natural_ood: Vec<f64> = natural_ood_scores.iter().map(|s| s.ood_score).collect();
    let noise_ood: Vec<f64> = noise_scores.iter().map(|s| s.ood_score).collect();
    let (ood_ap, ood_pauc) = metrics_at(&natural_ood, &noise_ood, config.proportion, config.pauc_alpha, seed(8))?;
    let summary = DemoSummary {
        train_accuracy: train_report.train_accuracy,
        test_accuracy: (0..test.num_samples()).filter(|&i| test.pred_labels()[i] == test_y[i]).count() as f64
            / test.num_samples() as f64,
        attacks_run: attacks.len(),
        attack_successes: successes.len(),
        adversarial_count: adversarial.len(),
        mean_success_norm: (!successes.is_empty()).then(|| mean(successes.iter().copied())),
        ordering,
        adversarial_ap,
        adversarial_pauc,
        detected_attacks: detected.len(),
        corrected_accuracy,
        ood_ap,
        ood_pauc,
        natural_detection_rate: natural_scores.iter().filter(|s| s.detected).count() as f64 / natural_scores.len() as f64,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(DemoRun {
        config: config.clone(),
        network,
        train_report,
        calibration,
        test,
        test_inputs: test_x,
        detector,
        ood_detector,
        natural_scores,
        attacks,
        noise_inputs,
        noise_scores,
        natural_ood_scores,
        summary,
    })
}
