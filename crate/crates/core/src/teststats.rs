//! Class-conditional test statistics computed from a sample's neighborhoods
//! in each (projected) layer.
//!
//! For every sample two families of statistic vectors are produced: one
//! conditioned on the predicted class and one per candidate true class. Each
//! vector holds one entry per (layer, statistic kind) slot, laid out as
//! `layer * kinds.len() + kind_position`.

use serde::{Deserialize, Serialize};

use crate::dimreduce::lid_of_query;
use crate::error::{Error, Result};
use crate::knn::{class_counts, ClassCounts, KnnIndex, Metric, SearchMode, SubsetIndex};
use crate::matrix::Matrix;

pub const DEFAULT_PRIOR_COUNT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatKind {
    Multinomial,
    Binomial,
    Trust,
    Lid,
}

impl StatKind {
    pub fn name(self) -> &'static str {
        match self {
            StatKind::Multinomial => "multinomial",
            StatKind::Binomial => "binomial",
            StatKind::Trust => "trust",
            StatKind::Lid => "lid",
        }
    }
}

impl std::str::FromStr for StatKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multinomial" => Ok(StatKind::Multinomial),
            "binomial" => Ok(StatKind::Binomial),
            "trust" => Ok(StatKind::Trust),
            "lid" => Ok(StatKind::Lid),
            other => Err(Error::invalid(format!("unknown statistic kind '{other}'"))),
        }
    }
}

/// Parses a comma-separated kind list, deduplicated in canonical order.
pub fn parse_kinds(s: &str) -> Result<Vec<StatKind>> {
    let mut kinds = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<StatKind>>>()?;
    kinds.sort_unstable();
    kinds.dedup();
    if kinds.is_empty() {
        return Err(Error::invalid("at least one statistic kind is required"));
    }
    Ok(kinds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    Pred,
    True,
}

impl Conditioning {
    pub fn name(self) -> &'static str {
        match self {
            Conditioning::Pred => "pred",
            Conditioning::True => "true",
        }
    }
}

/// MAP class-count proportions per layer and class. `pi_pred[l][c]` is fitted
/// over samples predicted `c`, `pi_true[l][c]` over samples labelled `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultinomialModel {
    pub pi_pred: Vec<Vec<Vec<f64>>>,
    pub pi_true: Vec<Vec<Vec<f64>>>,
    pub prior_count: f64,
}

/// Fits the multinomial proportions from per-sample neighbor counts
/// (`counts[sample][layer]`).
pub fn fit_multinomial(
    counts: &[Vec<ClassCounts>],
    true_labels: &[usize],
    pred_labels: &[usize],
    num_classes: usize,
    prior_count: f64,
) -> Result<MultinomialModel> {
    if !(prior_count >= 0.0) {
        return Err(Error::invalid("prior count must be non-negative"));
    }
    let num_layers = counts.first().map_or(0, Vec::len);
    if num_layers == 0 {
        return Err(Error::Empty("neighbor counts"));
    }
    let fit = |labels: &[usize], conditioning: &'static str| -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let mut per_class = Vec::with_capacity(num_classes);
            for c in 0..num_classes {
                let mut acc = vec![prior_count; num_classes];
                let mut members = 0usize;
                for (s, &lab) in labels.iter().enumerate() {
                    if lab == c {
                        members += 1;
                        for (a, &v) in acc.iter_mut().zip(&counts[s][l].0) {
                            *a += v as f64;
                        }
                    }
                }
                if members == 0 {
                    return Err(Error::EmptyCell {
                        layer: l,
                        class: c,
                        conditioning,
                    });
                }
                let total: f64 = acc.iter().sum();
                if total <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "no neighbor mass for layer {l}, class {c}"
                    )));
                }
                per_class.push(acc.into_iter().map(|a| a / total).collect());
            }
            out.push(per_class);
        }
        Ok(out)
    };
    Ok(MultinomialModel {
        pi_pred: fit(pred_labels, "pred")?,
        pi_true: fit(true_labels, "true")?,
        prior_count,
    })
}

/// Likelihood-ratio statistic `Σ k_i ln(k_i / (k π_i))`, with empty classes
/// contributing nothing.
pub fn multinomial_lrt(counts: &ClassCounts, pi: &[f64]) -> Result<f64> {
    let k = counts.total() as f64;
    let mut t = 0.0;
    for (&ki, &p) in counts.0.iter().zip(pi) {
        if ki == 0 {
            continue;
        }
        if p <= 0.0 {
            return Err(Error::Numerical(
                "zero class proportion with non-zero neighbor count".into(),
            ));
        }
        let ki = ki as f64;
        t += ki * (ki / (k * p)).ln();
    }
    Ok(t.max(0.0))
}

/// Fraction of neighbors outside `class`.
pub fn binomial_stat(counts: &ClassCounts, class: usize) -> f64 {
    let k = counts.total();
    if k == 0 {
        return 0.0;
    }
    (k - counts.0[class]) as f64 / k as f64
}

/// Ratio of the distance to the nearest member of `class` over the distance
/// to the nearest member of any other class, from per-class nearest
/// distances.
pub fn trust_ratio(nearest: &[f64], class: usize) -> f64 {
    let own = nearest[class];
    let other = nearest
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != class)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    if other == 0.0 {
        return if own == 0.0 { 1.0 } else { f64::MAX.sqrt() };
    }
    if other.is_infinite() {
        return 0.0;
    }
    own / other
}

/// One sample's statistic vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatVectorBundle {
    pub t_pred: Vec<f64>,
    pub t_true: Vec<Vec<f64>>,
    pub pred_class: usize,
}

/// Neighbor structures for one projected layer.
#[derive(Debug, Clone)]
pub struct LayerSpace {
    pub full: KnnIndex,
    pub by_true: Vec<SubsetIndex>,
    pub by_pred: Vec<SubsetIndex>,
}

impl LayerSpace {
    pub fn build(
        points: Matrix,
        true_labels: &[usize],
        pred_labels: &[usize],
        num_classes: usize,
        metric: Metric,
        mode: SearchMode,
    ) -> Result<Self> {
        let members = |labels: &[usize], c: usize| -> Vec<usize> {
            (0..labels.len()).filter(|&i| labels[i] == c).collect()
        };
        let mut by_true = Vec::with_capacity(num_classes);
        let mut by_pred = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            by_true.push(SubsetIndex::build(&points, members(true_labels, c), metric, mode)?);
            by_pred.push(SubsetIndex::build(&points, members(pred_labels, c), metric, mode)?);
        }
        let full = KnnIndex::build(points, metric, mode)?;
        Ok(Self {
            full,
            by_true,
            by_pred,
        })
    }

    pub fn points(&self) -> &Matrix {
        self.full.points()
    }

    fn nearest_per_class(&self, sets: &[SubsetIndex], x: &[f64], exclude: Option<usize>) -> Result<Vec<f64>> {
        sets.iter()
            .map(|s| {
                let own = exclude.is_some_and(|e| s.members().binary_search(&e).is_ok());
                if s.len() <= usize::from(own) {
                    Ok(f64::INFINITY)
                } else {
                    Ok(s.query(x, 1, exclude)?.distances[0])
                }
            })
            .collect()
    }
}

/// Everything needed to compute statistic vectors against a fixed reference
/// (calibration) set.
#[derive(Debug, Clone)]
pub struct StatContext {
    pub kinds: Vec<StatKind>,
    pub k: usize,
    pub num_classes: usize,
    pub true_labels: Vec<usize>,
    pub pred_labels: Vec<usize>,
    pub layers: Vec<LayerSpace>,
    pub multinomial: Option<MultinomialModel>,
}

impl StatContext {
    pub fn num_slots(&self) -> usize {
        self.layers.len() * self.kinds.len()
    }

    pub fn num_reference(&self) -> usize {
        self.true_labels.len()
    }

    /// Whether any configured statistic reads neighbor class counts.
    pub fn uses_counts(&self) -> bool {
        self.kinds
            .iter()
            .any(|k| matches!(k, StatKind::Multinomial | StatKind::Binomial))
    }

    /// Neighbor class counts (by true label) of `x` in every layer.
    pub fn layer_counts(&self, x: &[&[f64]], exclude: Option<usize>) -> Result<Vec<ClassCounts>> {
        self.layers
            .iter()
            .zip(x)
            .map(|(space, xl)| {
                let nb = space.full.query_excluding(xl, self.k, exclude)?;
                class_counts(&nb, &self.true_labels, self.num_classes)
            })
            .collect()
    }

    /// Statistic vectors for one sample given its projected layer vectors.
    /// `exclude` names the sample's own reference index for leave-one-out
    /// queries; `counts` may pass precomputed neighbor counts.
    pub fn bundle(
        &self,
        x: &[&[f64]],
        pred_class: usize,
        exclude: Option<usize>,
        counts: Option<&[ClassCounts]>,
    ) -> Result<StatVectorBundle> {
        if x.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                what: "layer count of sample".into(),
                expected: self.layers.len(),
                found: x.len(),
            });
        }
        if pred_class >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                sample: exclude.unwrap_or(0),
                label: pred_class,
                num_classes: self.num_classes,
            });
        }
        let m = self.num_classes;
        let nk = self.kinds.len();
        let slots = self.num_slots();
        let mut t_pred = vec![0.0; slots];
        let mut t_true = vec![vec![0.0; slots]; m];
        let owned;
        let counts = match counts {
            Some(c) => c,
            None if self.uses_counts() => {
                owned = self.layer_counts(x, exclude)?;
                &owned
            }
            None => &[],
        };
        for (l, space) in self.layers.iter().enumerate() {
            let xl = x[l];
            for (p, &kind) in self.kinds.iter().enumerate() {
                let slot = l * nk + p;
                match kind {
                    StatKind::Multinomial => {
                        let model = self
                            .multinomial
                            .as_ref()
                            .ok_or_else(|| Error::invalid("multinomial model not fitted"))?;
                        t_pred[slot] = multinomial_lrt(&counts[l], &model.pi_pred[l][pred_class])?;
                        for c in 0..m {
                            t_true[c][slot] = multinomial_lrt(&counts[l], &model.pi_true[l][c])?;
                        }
                    }
                    StatKind::Binomial => {
                        t_pred[slot] = binomial_stat(&counts[l], pred_class);
                        for c in 0..m {
                            t_true[c][slot] = binomial_stat(&counts[l], c);
                        }
                    }
                    StatKind::Trust => {
                        let near_pred = space.nearest_per_class(&space.by_pred, xl, exclude)?;
                        t_pred[slot] = trust_ratio(&near_pred, pred_class);
                        let near_true = space.nearest_per_class(&space.by_true, xl, exclude)?;
                        for c in 0..m {
                            t_true[c][slot] = trust_ratio(&near_true, c);
                        }
                    }
                    StatKind::Lid => {
                        for c in 0..m {
                            t_true[c][slot] = self.class_lid(space, c, xl, exclude)?;
                        }
                        t_pred[slot] = t_true[pred_class][slot];
                    }
                }
            }
        }
        Ok(StatVectorBundle {
            t_pred,
            t_true,
            pred_class,
        })
    }

    fn class_lid(&self, space: &LayerSpace, class: usize, x: &[f64], exclude: Option<usize>) -> Result<f64> {
        let set = &space.by_true[class];
        if set.is_empty() {
            return Err(Error::EmptyCell {
                layer: 0,
                class,
                conditioning: "true",
            });
        }
        let local_exclude = exclude.and_then(|g| set.members().binary_search(&g).ok());
        let index = set_index(set);
        // Degenerate neighborhoods (duplicates only) carry no dimension
        // information and score as 0.
        Ok(lid_of_query(index, x, self.k, local_exclude)?.unwrap_or(0.0))
    }
}

fn set_index(set: &SubsetIndex) -> &KnnIndex {
    set.index().expect("non-empty subset has an index")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::NeighborList;
    use proptest::prelude::*;

    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .filter(|(&a, _)| a > 0.0)
            .map(|(&a, &b)| a * (a / b).ln())
            .sum()
    }

    #[test]
    fn lrt_examples() {
        let t = multinomial_lrt(&ClassCounts(vec![5, 5]), &[0.5, 0.5]).unwrap();
        assert_eq!(t, 0.0);
        let t = multinomial_lrt(&ClassCounts(vec![10, 0]), &[0.5, 0.5]).unwrap();
        assert!((t - 10.0 * 2f64.ln()).abs() < 1e-12);
        assert!((t - 6.9315).abs() < 1e-4);
        let t = multinomial_lrt(&ClassCounts(vec![0, 10]), &[0.9, 0.1]).unwrap();
        assert!((t - 23.0259).abs() < 1e-4);
        assert!(multinomial_lrt(&ClassCounts(vec![1, 1]), &[1.0, 0.0]).is_err());
    }

    #[test]
    fn binomial_examples() {
        assert_eq!(binomial_stat(&ClassCounts(vec![0, 10]), 1), 0.0);
        assert_eq!(binomial_stat(&ClassCounts(vec![0, 10]), 0), 1.0);
        assert!((binomial_stat(&ClassCounts(vec![7, 3]), 0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn multinomial_fit_examples() {
        let counts = vec![vec![ClassCounts(vec![10, 0])]];
        let pure = fit_multinomial(&counts, &[0], &[0], 1, 0.0).unwrap();
        assert_eq!(pure.pi_true[0][0], vec![1.0]);

        // Second class needs its own sample to avoid an empty cell.
        let counts = vec![vec![ClassCounts(vec![10, 0])], vec![ClassCounts(vec![5, 5])]];
        let m = fit_multinomial(&counts, &[0, 1], &[0, 1], 2, 0.0).unwrap();
        assert_eq!(m.pi_pred[0][0], vec![1.0, 0.0]);
        let m = fit_multinomial(&counts, &[0, 1], &[0, 1], 2, 0.5).unwrap();
        assert!((m.pi_true[0][0][0] - 10.5 / 11.0).abs() < 1e-12);
        assert!((m.pi_true[0][0][1] - 0.5 / 11.0).abs() < 1e-12);
        assert_eq!(m.pi_true[0][1], vec![0.5, 0.5]);

        let err = fit_multinomial(&counts, &[0, 0], &[0, 1], 2, 0.5).unwrap_err();
        assert!(matches!(err, Error::EmptyCell { class: 1, conditioning: "true", .. }));
    }

    #[test]
    fn trust_examples() {
        let pts = Matrix::from_rows(&[vec![0.0], vec![10.0]]).unwrap();
        let space = LayerSpace::build(pts, &[0, 1], &[0, 1], 2, Metric::Euclidean, SearchMode::Exact).unwrap();
        let near = space.nearest_per_class(&space.by_true, &[1.0], None).unwrap();
        assert!((trust_ratio(&near, 0) - 1.0 / 9.0).abs() < 1e-12);
        let near = space.nearest_per_class(&space.by_true, &[0.0], None).unwrap();
        assert_eq!(trust_ratio(&near, 0), 0.0);
        let near = space.nearest_per_class(&space.by_true, &[5.0], None).unwrap();
        assert_eq!(trust_ratio(&near, 0), 1.0);
    }

    fn blob_context(kinds: Vec<StatKind>, n_per: usize, seed: u64) -> (StatContext, Matrix) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let centres = [[0.0, 0.0], [6.0, 0.0]];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..n_per {
                rows.push(vec![centre[0] + noise.sample(&mut rng), centre[1] + noise.sample(&mut rng)]);
                labels.push(c);
            }
        }
        let pts = Matrix::from_rows(&rows).unwrap();
        let space = LayerSpace::build(pts.clone(), &labels, &labels, 2, Metric::Euclidean, SearchMode::Exact).unwrap();
        let mut ctx = StatContext {
            kinds,
            k: 10,
            num_classes: 2,
            true_labels: labels.clone(),
            pred_labels: labels.clone(),
            layers: vec![space],
            multinomial: None,
        };
        let counts: Vec<Vec<ClassCounts>> = (0..pts.rows())
            .map(|i| ctx.layer_counts(&[pts.row(i)], Some(i)).unwrap())
            .collect();
        ctx.multinomial = Some(fit_multinomial(&counts, &labels, &labels, 2, DEFAULT_PRIOR_COUNT).unwrap());
        (ctx, pts)
    }

    #[test]
    fn bundle_layout() {
        let (ctx, pts) = blob_context(vec![StatKind::Multinomial, StatKind::Binomial], 50, 1);
        let b = ctx.bundle(&[pts.row(3)], 0, Some(3), None).unwrap();
        assert_eq!(b.t_pred.len(), 2);
        assert_eq!(b.t_true.len(), 2);
        // Own-class neighborhood is pure: conforms to class 0, not class 1.
        assert!(b.t_true[0][0] < 1.0);
        assert!(b.t_true[1][0] > b.t_true[0][0]);
        assert_eq!(b.t_true[0][1], 0.0);
        assert!(b.t_pred.iter().chain(b.t_true.iter().flatten()).all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn planted_outliers_score_higher() {
        let kinds = vec![StatKind::Multinomial, StatKind::Binomial, StatKind::Trust, StatKind::Lid];
        let (ctx, pts) = blob_context(kinds.clone(), 150, 2);
        let n = pts.rows();
        // Inliers: leave-one-out bundles of class-0 members, conditioned on 0.
        let inliers: Vec<StatVectorBundle> = (0..n / 2)
            .step_by(3)
            .map(|i| ctx.bundle(&[pts.row(i)], 0, Some(i), None).unwrap())
            .collect();
        // Outliers: points planted between the blobs, claimed as class 0.
        let outliers: Vec<StatVectorBundle> = (0..50)
            .map(|j| {
                let x = [3.0 + 0.02 * j as f64, 1.5 - 0.06 * j as f64];
                ctx.bundle(&[&x], 0, None, None).unwrap()
            })
            .collect();
        for (p, kind) in kinds.iter().enumerate() {
            let mean = |v: &[StatVectorBundle]| v.iter().map(|b| b.t_pred[p]).sum::<f64>() / v.len() as f64;
            let var = |v: &[StatVectorBundle], mu: f64| {
                v.iter().map(|b| (b.t_pred[p] - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            };
            let (mi, mo) = (mean(&inliers), mean(&outliers));
            let se = (var(&inliers, mi) / inliers.len() as f64 + var(&outliers, mo) / outliers.len() as f64).sqrt();
            // One-sided Welch z at p < 0.01.
            assert!((mo - mi) / se.max(1e-12) > 2.33, "{kind:?}: inlier {mi}, outlier {mo}");
        }
    }

    #[test]
    fn parse_kind_lists() {
        assert_eq!(
            parse_kinds("trust, multinomial,trust").unwrap(),
            vec![StatKind::Multinomial, StatKind::Trust]
        );
        assert!(parse_kinds("gram").is_err());
        assert!(parse_kinds("").is_err());
    }

    proptest! {
        #[test]
        fn lrt_equals_scaled_kl(raw in proptest::collection::vec(0usize..20, 2..6), w in proptest::collection::vec(0.05f64..1.0, 6)) {
            let m = raw.len();
            let k: usize = raw.iter().sum();
            prop_assume!(k > 0);
            let wsum: f64 = w[..m].iter().sum();
            let pi: Vec<f64> = w[..m].iter().map(|v| v / wsum).collect();
            let counts = ClassCounts(raw.clone());
            let t = multinomial_lrt(&counts, &pi).unwrap();
            let p: Vec<f64> = raw.iter().map(|&c| c as f64 / k as f64).collect();
            prop_assert!((t - k as f64 * kl_oracle(&p, &pi)).abs() < 1e-10 * (1.0 + t));
            prop_assert!(t >= 0.0);
        }

        #[test]
        fn lrt_zero_iff_proportions_match(raw in proptest::collection::vec(1usize..10, 2..5)) {
            let k: usize = raw.iter().sum();
            let pi: Vec<f64> = raw.iter().map(|&c| c as f64 / k as f64).collect();
            prop_assert!(multinomial_lrt(&ClassCounts(raw.clone()), &pi).unwrap().abs() < 1e-12);
            let uniform = vec![1.0 / raw.len() as f64; raw.len()];
            let t = multinomial_lrt(&ClassCounts(raw.clone()), &uniform).unwrap();
            let all_equal = raw.iter().all(|&c| c == raw[0]);
            prop_assert_eq!(t.abs() < 1e-12, all_equal);
        }

        #[test]
        fn binomial_monotone(k in 1usize..50, a in 0usize..50, b in 0usize..50) {
            let (a, b) = (a.min(k), b.min(k));
            let sa = binomial_stat(&ClassCounts(vec![a, k - a]), 0);
            let sb = binomial_stat(&ClassCounts(vec![b, k - b]), 0);
            prop_assert_eq!(sa <= sb, (k - a) <= (k - b));
            prop_assert!((0.0..=1.0).contains(&sa));
        }

        #[test]
        fn trust_scale_invariant(xs in proptest::collection::vec(-10.0f64..10.0, 6), q in -10.0f64..10.0, s in 0.1f64..10.0) {
            let labels = [0, 0, 0, 1, 1, 1];
            let build = |scale: f64| {
                let pts = Matrix::from_rows(&xs.iter().map(|v| vec![v * scale]).collect::<Vec<_>>()).unwrap();
                LayerSpace::build(pts, &labels, &labels, 2, Metric::Euclidean, SearchMode::Exact).unwrap()
            };
            let (a, b) = (build(1.0), build(s));
            let ta = trust_ratio(&a.nearest_per_class(&a.by_true, &[q], None).unwrap(), 0);
            let tb = trust_ratio(&b.nearest_per_class(&b.by_true, &[q * s], None).unwrap(), 0);
            prop_assert!((ta - tb).abs() <= 1e-9 * ta.abs().max(1.0));
        }
    }

    #[test]
    fn neighbor_list_counts_feed_stats() {
        let nb = NeighborList {
            indices: vec![0, 1, 2],
            distances: vec![0.1, 0.2, 0.3],
        };
        let c = class_counts(&nb, &[1, 1, 0], 2).unwrap();
        assert!((binomial_stat(&c, 1) - 1.0 / 3.0).abs() < 1e-12);
    }
}
