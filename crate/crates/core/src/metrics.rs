//! Detection metrics and the norm / proportion sweep protocols.

use std::io::Write;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dimreduce::median;
use crate::error::{Error, Result};

pub const SWEEP_POINTS: usize = 12;
pub const SWEEP_MIN_PROPORTION: f64 = 0.005;
pub const SWEEP_MAX_PROPORTION: f64 = 0.3;
pub const DEFAULT_REPEATS: usize = 100;

/// Scores with anomaly flags and optional perturbation norms (used only
/// for anomalous samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub anomalous: Vec<bool>,
    pub norms: Option<Vec<f64>>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, anomalous: Vec<bool>) -> Result<Self> {
        Self::with_norms(scores, anomalous, None)
    }

    pub fn with_norms(scores: Vec<f64>, anomalous: Vec<bool>, norms: Option<Vec<f64>>) -> Result<Self> {
        if scores.len() != anomalous.len() {
            return Err(Error::RowCountMismatch {
                what: "anomaly labels".into(),
                expected: scores.len(),
                found: anomalous.len(),
            });
        }
        if let Some(n) = &norms {
            if n.len() != scores.len() {
                return Err(Error::RowCountMismatch {
                    what: "perturbation norms".into(),
                    expected: scores.len(),
                    found: n.len(),
                });
            }
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Numerical("NaN score".into()));
        }
        Ok(Self { scores, anomalous, norms })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_anomalous(&self) -> usize {
        self.anomalous.iter().filter(|&&a| a).count()
    }

    fn subset(&self, keep: &[usize]) -> LabeledScores {
        LabeledScores {
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
            anomalous: keep.iter().map(|&i| self.anomalous[i]).collect(),
            norms: self.norms.as_ref().map(|n| keep.iter().map(|&i| n[i]).collect()),
        }
    }
}

/// (false positive, true positive) counts.
type RocStep = (usize, usize);

/// Cumulative counts after each group of equal scores, visiting scores from
/// high to low, with the positive and negative totals.
fn roc_steps(ls: &LabeledScores) -> Result<(Vec<RocStep>, usize, usize)> {
    let pos = ls.num_anomalous();
    let neg = ls.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("metrics need both natural and anomalous samples"));
    }
    let mut order: Vec<usize> = (0..ls.len()).collect();
    order.sort_by(|&a, &b| ls.scores[b].total_cmp(&ls.scores[a]));
    let mut steps = Vec::new();
    let (mut fp, mut tp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let v = ls.scores[order[i]];
        while i < order.len() && ls.scores[order[i]] == v {
            if ls.anomalous[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((fp, tp));
    }
    Ok((steps, pos, neg))
}

/// Step-interpolated area under the precision-recall curve, with equal
/// scores treated as a single threshold.
pub fn average_precision(ls: &LabeledScores) -> Result<f64> {
    let (steps, pos, _) = roc_steps(ls)?;
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for &(fp, tp) in &steps {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    Ok(ap / pos as f64)
}

/// Area under the trapezoidal ROC curve for false positive rates up to
/// `alpha`, divided by `alpha`.
pub fn pauc(ls: &LabeledScores, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("pAUC alpha {alpha} outside (0, 1]")));
    }
    Ok(partial_roc_area(ls, alpha)? / alpha)
}

/// Unnormalized ROC area over false positive rates in `[0, alpha]`.
pub fn partial_roc_area(ls: &LabeledScores, alpha: f64) -> Result<f64> {
    let (steps, pos, neg) = roc_steps(ls)?;
    let mut area = 0.0;
    let (mut x0, mut y0) = (0.0f64, 0.0f64);
    for &(fp, tp) in &steps {
        let x1 = fp as f64 / neg as f64;
        let y1 = tp as f64 / pos as f64;
        if x1 >= alpha {
            if x1 > x0 {
                let y_cut = y0 + (y1 - y0) * (alpha - x0) / (x1 - x0);
                area += 0.5 * (y0 + y_cut) * (alpha - x0);
            }
            return Ok(area);
        }
        area += 0.5 * (y0 + y1) * (x1 - x0);
        x0 = x1;
        y0 = y1;
    }
    Ok(area)
}

pub fn auc(ls: &LabeledScores) -> Result<f64> {
    pauc(ls, 1.0)
}

/// One point of a sweep curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Maximum selected norm (norm sweep) or proportion (proportion sweep).
    pub x_value: f64,
    pub proportion: f64,
    pub num_anomalous: usize,
    pub average_precision: f64,
    /// `(alpha, pAUC-alpha)` pairs.
    pub pauc: Vec<(f64, f64)>,
}

/// Twelve proportions linearly spaced from 0.005 to `min(0.3, p_a)`.
pub fn sweep_proportions(num_anomalous: usize, total: usize) -> Vec<f64> {
    let p_a = num_anomalous as f64 / total as f64;
    let hi = SWEEP_MAX_PROPORTION.min(p_a);
    let lo = SWEEP_MIN_PROPORTION.min(hi);
    (0..SWEEP_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (SWEEP_POINTS - 1) as f64)
        .collect()
}

fn selection_size(p: f64, total: usize, num_anomalous: usize) -> usize {
    // Guard against `p * N` landing a hair above an integer.
    let raw = (p * total as f64 - 1e-9).ceil().max(1.0) as usize;
    raw.min(num_anomalous)
}

fn point(ls: &LabeledScores, x_value: f64, proportion: f64, alphas: &[f64]) -> Result<SweepPoint> {
    Ok(SweepPoint {
        x_value,
        proportion,
        num_anomalous: ls.num_anomalous(),
        average_precision: average_precision(ls)?,
        pauc: alphas.iter().map(|&a| Ok((a, pauc(ls, a)?))).collect::<Result<_>>()?,
    })
}

fn split(ls: &LabeledScores) -> Result<(Vec<usize>, Vec<usize>)> {
    let anomalous: Vec<usize> = (0..ls.len()).filter(|&i| ls.anomalous[i]).collect();
    let natural: Vec<usize> = (0..ls.len()).filter(|&i| !ls.anomalous[i]).collect();
    if anomalous.is_empty() {
        return Err(Error::Empty("anomalous samples"));
    }
    if natural.is_empty() {
        return Err(Error::Empty("natural samples"));
    }
    Ok((anomalous, natural))
}

/// Metrics as a function of the largest perturbation norm: for each
/// proportion the lowest-norm anomalous samples are kept with all natural
/// samples.
pub fn norm_sweep(ls: &LabeledScores, alphas: &[f64]) -> Result<Vec<SweepPoint>> {
    let norms = ls
        .norms
        .as_ref()
        .ok_or_else(|| Error::invalid("norm sweep needs perturbation norms"))?;
    let (mut anomalous, natural) = split(ls)?;
    if anomalous.iter().any(|&i| !norms[i].is_finite()) {
        return Err(Error::invalid("missing or non-finite perturbation norm for an anomalous sample"));
    }
    anomalous.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    sweep_proportions(anomalous.len(), ls.len())
        .into_iter()
        .map(|p| {
            let take = selection_size(p, ls.len(), anomalous.len());
            let mut keep = natural.clone();
            keep.extend_from_slice(&anomalous[..take]);
            let max_norm = norms[anomalous[take - 1]];
            point(&ls.subset(&keep), max_norm, p, alphas)
        })
        .collect()
}

/// Median metrics over `repeats` uniformly drawn anomalous subsets for each
/// proportion.
pub fn proportion_sweep(
    ls: &LabeledScores,
    proportions: &[f64],
    repeats: usize,
    alphas: &[f64],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let (anomalous, natural) = split(ls)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    proportions
        .iter()
        .map(|&p| {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!("proportion {p} outside (0, 1]")));
            }
            let take = selection_size(p, ls.len(), anomalous.len());
            let mut aps = Vec::with_capacity(repeats);
            let mut paucs = vec![Vec::with_capacity(repeats); alphas.len()];
            for _ in 0..repeats {
                let mut keep = natural.clone();
                keep.extend(anomalous.choose_multiple(&mut rng, take).copied());
                let pt = point(&ls.subset(&keep), p, p, alphas)?;
                aps.push(pt.average_precision);
                for (slot, (_, v)) in paucs.iter_mut().zip(pt.pauc) {
                    slot.push(v);
                }
            }
            Ok(SweepPoint {
                x_value: p,
                proportion: p,
                num_anomalous: take,
                average_precision: median(&mut aps),
                pauc: alphas.iter().zip(paucs.iter_mut()).map(|(&a, v)| (a, median(v))).collect(),
            })
        })
        .collect()
}

/// Metric column name for pAUC at `alpha`.
pub fn pauc_name(alpha: f64) -> String {
    format!("pauc_{alpha}")
}

/// Writes sweep curves as `x_value,metric_name,value` rows.
pub fn write_sweep_csv<W: Write>(mut out: W, points: &[SweepPoint]) -> std::io::Result<()> {
    writeln!(out, "x_value,metric_name,value")?;
    for p in points {
        writeln!(out, "{},average_precision,{}", p.x_value, p.average_precision)?;
        for &(a, v) in &p.pauc {
            writeln!(out, "{},{},{}", p.x_value, pauc_name(a), v)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ls(scores: &[f64], anomalous: &[bool]) -> LabeledScores {
        LabeledScores::new(scores.to_vec(), anomalous.to_vec()).unwrap()
    }

    /// Enumerates every threshold independently of the grouped sweep.
    fn oracle(l: &LabeledScores, alpha: f64) -> (f64, f64) {
        let mut th: Vec<f64> = l.scores.clone();
        th.sort_by(|a, b| b.total_cmp(a));
        th.dedup();
        let pos = l.num_anomalous() as f64;
        let neg = l.len() as f64 - pos;
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        let mut pts = vec![(0.0, 0.0)];
        for &t in &th {
            let tp = (0..l.len()).filter(|&i| l.anomalous[i] && l.scores[i] >= t).count() as f64;
            let fp = (0..l.len()).filter(|&i| !l.anomalous[i] && l.scores[i] >= t).count() as f64;
            let r = tp / pos;
            ap += (r - prev_r) * tp / (tp + fp);
            prev_r = r;
            pts.push((fp / neg, r));
        }
        // Integrate the piecewise-linear ROC on [0, alpha] by clipping each
        // segment.
        let mut area = 0.0;
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x0 >= alpha || x1 == x0 {
                continue;
            }
            let xe = x1.min(alpha);
            let ye = y0 + (y1 - y0) * (xe - x0) / (x1 - x0);
            area += 0.5 * (y0 + ye) * (xe - x0);
        }
        (ap, area / alpha)
    }

    fn mann_whitney(l: &LabeledScores) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..l.len() {
            for j in 0..l.len() {
                if l.anomalous[i] && !l.anomalous[j] {
                    n += 1.0;
                    s += if l.scores[i] > l.scores[j] {
                        1.0
                    } else if l.scores[i] == l.scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        s / n
    }

    #[test]
    fn ap_examples() {
        let l = ls(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]);
        assert!((average_precision(&l).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        let l = ls(&[3.0, 2.0, 1.0, 0.0], &[true, true, false, false]);
        assert_eq!(average_precision(&l).unwrap(), 1.0);
        assert_eq!(pauc(&l, 0.1).unwrap(), 1.0);
        let l = ls(&[1.0; 8], &[true, false, false, true, false, false, false, false]);
        assert!((average_precision(&l).unwrap() - 0.25).abs() < 1e-12);
        assert!(average_precision(&ls(&[1.0, 2.0], &[true, true])).is_err());
        assert!(pauc(&ls(&[1.0, 2.0], &[true, false]), 0.0).is_err());
    }

    #[test]
    fn random_scores_pauc_is_half_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let alpha = 0.2;
        let mut total = 0.0;
        let reps = 200;
        for _ in 0..reps {
            let scores: Vec<f64> = (0..400).map(|_| rng.random()).collect();
            let labels: Vec<bool> = (0..400).map(|i| i % 4 == 0).collect();
            total += pauc(&LabeledScores::new(scores, labels).unwrap(), alpha).unwrap();
        }
        let mean = total / reps as f64;
        assert!((mean - alpha / 2.0).abs() < 0.01, "{mean}");
    }

    proptest! {
        #[test]
        fn matches_oracle(
            pairs in proptest::collection::vec((0u8..12, any::<bool>()), 2..200),
            alpha in 0.01f64..1.0,
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let mut labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            labels[0] = true;
            labels[1] = false;
            let l = LabeledScores::new(scores, labels).unwrap();
            let (ap, pa) = oracle(&l, alpha);
            prop_assert!((average_precision(&l).unwrap() - ap).abs() < 1e-9);
            prop_assert!((pauc(&l, alpha).unwrap() - pa).abs() < 1e-9);
            prop_assert!((auc(&l).unwrap() - mann_whitney(&l)).abs() < 1e-9);
        }

        #[test]
        fn invariant_under_increasing_maps(
            pairs in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..100),
            alpha in 0.01f64..1.0,
        ) {
            let mut labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            labels[0] = true;
            labels[1] = false;
            let a = LabeledScores::new(pairs.iter().map(|p| p.0).collect(), labels.clone()).unwrap();
            let b = LabeledScores::new(pairs.iter().map(|p| p.0.exp() * 2.0 - 7.0).collect(), labels).unwrap();
            prop_assert!((average_precision(&a).unwrap() - average_precision(&b).unwrap()).abs() < 1e-12);
            prop_assert!((pauc(&a, alpha).unwrap() - pauc(&b, alpha).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn partial_area_non_decreasing(
            pairs in proptest::collection::vec((0u8..20, any::<bool>()), 2..100),
            a1 in 0.01f64..1.0,
            a2 in 0.01f64..1.0,
        ) {
            let mut labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            labels[0] = true;
            labels[1] = false;
            let l = LabeledScores::new(pairs.iter().map(|p| p.0 as f64).collect(), labels).unwrap();
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(partial_roc_area(&l, lo).unwrap() <= partial_roc_area(&l, hi).unwrap() + 1e-12);
            let p = pauc(&l, lo).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
        }
    }

    #[test]
    fn proportions_and_norm_sweep() {
        let p = sweep_proportions(50, 100);
        assert_eq!(p.len(), 12);
        assert!((p[0] - 0.005).abs() < 1e-15 && (p[11] - 0.3).abs() < 1e-15);
        let p = sweep_proportions(10, 100);
        assert!((p[11] - 0.1).abs() < 1e-15);

        // Scores increase with the norm, so smaller-norm subsets are harder.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut norms = Vec::new();
        for _ in 0..300 {
            scores.push(rng.random::<f64>());
            labels.push(false);
            norms.push(f64::NAN);
        }
        for i in 0..100 {
            let norm = i as f64 / 100.0;
            scores.push(norm * 1.5 + 0.2 * rng.random::<f64>());
            labels.push(true);
            norms.push(norm);
        }
        let l = LabeledScores::with_norms(scores, labels, Some(norms)).unwrap();
        let curve = norm_sweep(&l, &[0.2]).unwrap();
        assert_eq!(curve.len(), 12);
        for w in curve.windows(2) {
            assert!(w[1].x_value >= w[0].x_value);
            assert!(w[1].average_precision >= w[0].average_precision - 1e-12);
        }
        // p_a = 0.25 < 0.3: the last point keeps every anomalous sample.
        let last = curve.last().unwrap();
        assert_eq!(last.num_anomalous, 100);
        assert!((last.average_precision - average_precision(&l).unwrap()).abs() < 1e-12);

        let no_norms = LabeledScores::new(l.scores.clone(), l.anomalous.clone()).unwrap();
        assert!(norm_sweep(&no_norms, &[0.2]).is_err());
    }

    #[test]
    fn proportion_sweep_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..1000).map(|i| i % 5 == 0).collect();
        let l = LabeledScores::new(scores, labels).unwrap();
        let full = proportion_sweep(&l, &[0.2], 7, &[0.1], 1).unwrap();
        assert!((full[0].average_precision - average_precision(&l).unwrap()).abs() < 1e-12);
        let curve = proportion_sweep(&l, &[0.05, 0.1], DEFAULT_REPEATS, &[0.1], 1).unwrap();
        // Random scores: AP close to the anomalous fraction of the mixture.
        for pt in &curve {
            let frac = pt.num_anomalous as f64 / (pt.num_anomalous + 800) as f64;
            assert!((pt.average_precision - frac).abs() < 0.03, "{pt:?}");
        }
        let once = proportion_sweep(&l, &[0.05], 1, &[0.1], 3).unwrap();
        assert_eq!(once[0].num_anomalous, 50);

        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &curve).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x_value,metric_name,value\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 2);
    }
}
