//! Empirical p-values of statistic vectors against calibration nulls and
//! their combination into one p-value per conditioning.
//!
//! Every empirical p-value uses add-one smoothing, `(1 + count) / (n + 1)`,
//! optionally averaged over bootstrap resamples of the null. For one resample
//! the exceedance count is `Binomial(n, count / n)`, so the average over `B`
//! resamples is drawn exactly as `(B + Binomial(nB, count / n)) / (B (n + 1))`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::{default_k, KnnIndex, Metric, SearchMode};
use crate::matrix::Matrix;
use crate::teststats::{Conditioning, StatVectorBundle};

pub const DEFAULT_BOOTSTRAP: usize = 100;
pub const DEFAULT_MIN_NULL: usize = 20;
/// Layer pairs are used by default up to this many layers.
pub const MAX_LAYERS_FOR_PAIRS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    #[default]
    Fisher,
    Hmp,
    Aklpe,
}

impl std::str::FromStr for Combiner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fisher" => Ok(Combiner::Fisher),
            "hmp" => Ok(Combiner::Hmp),
            "aklpe" => Ok(Combiner::Aklpe),
            other => Err(Error::invalid(format!("unknown combiner '{other}'"))),
        }
    }
}

/// Number of null values `>= t` in an ascending array.
pub fn exceedances(t: f64, sorted: &[f64]) -> usize {
    sorted.len() - sorted.partition_point(|&v| v < t)
}

/// Add-one p-value from an exceedance count over `n` null values, averaged
/// over `bootstrap` resamples (0 disables resampling).
pub fn pvalue_from_count(count: usize, n: usize, bootstrap: usize, rng: &mut impl Rng) -> Result<f64> {
    if n == 0 {
        return Err(Error::Empty("null distribution"));
    }
    debug_assert!(count <= n);
    if bootstrap == 0 || count == 0 || count == n {
        return Ok((1 + count) as f64 / (n + 1) as f64);
    }
    let draws = Binomial::new((n * bootstrap) as u64, count as f64 / n as f64)
        .map_err(|e| Error::Numerical(format!("bootstrap binomial: {e}")))?
        .sample(rng);
    Ok((bootstrap as f64 + draws as f64) / (bootstrap as f64 * (n + 1) as f64))
}

/// Right-tailed empirical p-value of `t` against an ascending null.
pub fn empirical_pvalue(t: f64, sorted_null: &[f64], bootstrap: usize, rng: &mut impl Rng) -> Result<f64> {
    pvalue_from_count(exceedances(t, sorted_null), sorted_null.len(), bootstrap, rng)
}

/// Joint right-tail p-value: null pairs with both coordinates at or above
/// `(t1, t2)`.
pub fn bivariate_pvalue(t1: f64, t2: f64, null: &[(f64, f64)], bootstrap: usize, rng: &mut impl Rng) -> Result<f64> {
    let count = null.iter().filter(|&&(a, b)| a >= t1 && b >= t2).count();
    pvalue_from_count(count, null.len(), bootstrap, rng)
}

/// Sum of log p-values.
pub fn fisher_combine(pvals: &[f64]) -> Result<f64> {
    let mut s = 0.0;
    for &p in pvals {
        if p <= 0.0 {
            return Err(Error::ZeroPValue);
        }
        s += p.ln();
    }
    Ok(s)
}

/// Weighted harmonic mean `(Σ w_i / p_i)^-1`; equal weights when `weights`
/// is `None`.
pub fn hmp_combine(pvals: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if pvals.is_empty() {
        return Err(Error::Empty("p-value list"));
    }
    let equal = 1.0 / pvals.len() as f64;
    if let Some(w) = weights {
        if w.len() != pvals.len() {
            return Err(Error::DimensionMismatch {
                what: "harmonic mean weights".into(),
                expected: pvals.len(),
                found: w.len(),
            });
        }
        if w.iter().any(|&v| v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("weights must be non-negative and sum to 1"));
        }
    }
    let mut s = 0.0;
    for (i, &p) in pvals.iter().enumerate() {
        if p <= 0.0 {
            return Err(Error::ZeroPValue);
        }
        s += weights.map_or(equal, |w| w[i]) / p;
    }
    Ok(1.0 / s)
}

fn check_aklpe_size(rows: usize, k: usize) -> Result<()> {
    let needed = (3 * k).div_ceil(2) + 1;
    if rows < needed {
        return Err(Error::invalid(format!(
            "localized p-value reference needs {needed} rows for k={k}, got {rows}"
        )));
    }
    Ok(())
}

/// `½ (d_(⌈k/2⌉) + d_(⌈3k/2⌉))`, euclidean distances from `t` to the
/// reference rows, leaving out row `exclude`.
pub fn aklpe_score(t: &[f64], reference: &KnnIndex, k: usize, exclude: Option<usize>) -> Result<f64> {
    let rows = reference.len() - usize::from(exclude.is_some());
    check_aklpe_size(rows + 1, k)?;
    let lo = k.div_ceil(2).max(1);
    let hi = (3 * k).div_ceil(2);
    let nb = reference.query_excluding(t, hi, exclude)?;
    Ok(0.5 * (nb.distances[lo - 1] + nb.distances[hi - 1]))
}

/// Reference vectors and leave-one-out null scores for one (conditioning,
/// class) cell.
#[derive(Debug, Clone)]
pub struct AklpeReference {
    pub k: usize,
    pub index: KnnIndex,
    pub sorted_scores: Vec<f64>,
}

impl AklpeReference {
    pub fn fit(rows: Matrix) -> Result<Self> {
        let k = default_k(rows.rows())?;
        Self::fit_with_k(rows, k)
    }

    pub fn fit_with_k(rows: Matrix, k: usize) -> Result<Self> {
        check_aklpe_size(rows.rows(), k)?;
        let index = KnnIndex::build(rows, Metric::Euclidean, SearchMode::Exact)?;
        let mut scores = (0..index.len())
            .map(|i| aklpe_score(index.points().row(i), &index, k, Some(i)))
            .collect::<Result<Vec<f64>>>()?;
        scores.sort_by(f64::total_cmp);
        Ok(Self {
            k,
            index,
            sorted_scores: scores,
        })
    }

    /// Rebuilds from stored parts without recomputing the null scores.
    pub fn from_parts(rows: Matrix, k: usize, sorted_scores: Vec<f64>) -> Result<Self> {
        check_aklpe_size(rows.rows(), k)?;
        if sorted_scores.len() != rows.rows() || sorted_scores.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("localized null scores must be sorted, one per row"));
        }
        Ok(Self {
            k,
            index: KnnIndex::build(rows, Metric::Euclidean, SearchMode::Exact)?,
            sorted_scores,
        })
    }

    pub fn score(&self, t: &[f64], exclude: Option<usize>) -> Result<f64> {
        aklpe_score(t, &self.index, self.k, exclude)
    }
}

/// P-value of a localized score against the null scores.
pub fn aklpe_pvalue(g: f64, sorted_null_scores: &[f64], bootstrap: usize, rng: &mut impl Rng) -> Result<f64> {
    empirical_pvalue(g, sorted_null_scores, bootstrap, rng)
}

/// Null statistic vectors for one (conditioning, class) cell: row `j` is the
/// vector of calibration sample `members[j]`.
#[derive(Debug, Clone)]
pub struct NullCell {
    pub members: Vec<usize>,
    pub values: Matrix,
    sorted: Vec<Vec<f64>>,
    pub aklpe: Option<AklpeReference>,
}

impl NullCell {
    pub fn new(members: Vec<usize>, values: Matrix, aklpe: Option<AklpeReference>) -> Result<Self> {
        if members.len() != values.rows() {
            return Err(Error::RowCountMismatch {
                what: "null cell".into(),
                expected: members.len(),
                found: values.rows(),
            });
        }
        if members.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("null cell members must be strictly increasing"));
        }
        let sorted = (0..values.cols())
            .map(|s| {
                let mut col: Vec<f64> = values.iter_rows().map(|r| r[s]).collect();
                col.sort_by(f64::total_cmp);
                col
            })
            .collect();
        Ok(Self {
            members,
            values,
            sorted,
            aklpe,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn sorted_slot(&self, slot: usize) -> &[f64] {
        &self.sorted[slot]
    }

    fn position(&self, sample: Option<usize>) -> Option<usize> {
        sample.and_then(|s| self.members.binary_search(&s).ok())
    }

    /// P-values of `t` for each slot, then each slot pair. A member sample
    /// (by calibration id) is left out of its own null.
    fn slot_pvalues(
        &self,
        t: &[f64],
        pairs: &[(usize, usize)],
        sample: Option<usize>,
        bootstrap: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let own = self.position(sample);
        let (drop, n) = match own {
            Some(_) => (1, self.len() - 1),
            None => (0, self.len()),
        };
        let mut out = Vec::with_capacity(t.len() + pairs.len());
        for (s, &ts) in t.iter().enumerate() {
            let mut c = exceedances(ts, &self.sorted[s]);
            if let Some(j) = own {
                if self.values.row(j)[s] >= ts {
                    c -= drop;
                }
            }
            out.push(pvalue_from_count(c, n, bootstrap, rng)?);
        }
        for &(a, b) in pairs {
            let mut c = self
                .values
                .iter_rows()
                .filter(|r| r[a] >= t[a] && r[b] >= t[b])
                .count();
            if let Some(j) = own {
                let r = self.values.row(j);
                if r[a] >= t[a] && r[b] >= t[b] {
                    c -= drop;
                }
            }
            out.push(pvalue_from_count(c, n, bootstrap, rng)?);
        }
        Ok(out)
    }

    fn aklpe_pvalue(&self, t: &[f64], sample: Option<usize>, bootstrap: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let reference = self
            .aklpe
            .as_ref()
            .ok_or_else(|| Error::invalid("localized reference not fitted"))?;
        let own = self.position(sample);
        let g = reference.score(t, own)?;
        let mut c = exceedances(g, &reference.sorted_scores);
        let mut n = reference.sorted_scores.len();
        if own.is_some() {
            // The sample's own leave-one-out score is exactly `g`.
            c -= 1;
            n -= 1;
        }
        pvalue_from_count(c, n, bootstrap, rng)
    }
}

/// Combined p-values for one sample, all in natural-log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueBundle {
    pub log_q_pred: f64,
    pub log_q_true: Vec<f64>,
    pub pred_class: usize,
    pub combiner: Combiner,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullConfig {
    pub combiner: Combiner,
    pub use_pairs: bool,
    pub bootstrap: usize,
    pub min_null: usize,
}

impl Default for NullConfig {
    fn default() -> Self {
        Self {
            combiner: Combiner::Fisher,
            use_pairs: true,
            bootstrap: DEFAULT_BOOTSTRAP,
            min_null: DEFAULT_MIN_NULL,
        }
    }
}

/// All slot pairs `(a, b)` with `a < b`.
pub fn slot_pairs(num_slots: usize) -> Vec<(usize, usize)> {
    (0..num_slots)
        .flat_map(|a| (a + 1..num_slots).map(move |b| (a, b)))
        .collect()
}

/// Per-class nulls for both conditionings.
#[derive(Debug, Clone)]
pub struct EmpiricalNulls {
    pub config: NullConfig,
    pub num_slots: usize,
    pub pairs: Vec<(usize, usize)>,
    pub pred: Vec<NullCell>,
    pub true_: Vec<NullCell>,
}

impl EmpiricalNulls {
    /// Builds nulls from calibration bundles: the predicted-class cell `c`
    /// holds `t_pred` of samples predicted `c`; the true-class cell `c` holds
    /// `t_true[c]` of samples labelled `c`.
    pub fn fit(
        bundles: &[StatVectorBundle],
        true_labels: &[usize],
        num_classes: usize,
        config: NullConfig,
    ) -> Result<Self> {
        let num_slots = bundles.first().map(|b| b.t_pred.len()).ok_or(Error::Empty("calibration bundles"))?;
        if true_labels.len() != bundles.len() {
            return Err(Error::RowCountMismatch {
                what: "calibration labels".into(),
                expected: bundles.len(),
                found: true_labels.len(),
            });
        }
        let pairs = if config.use_pairs && config.combiner != Combiner::Aklpe {
            slot_pairs(num_slots)
        } else {
            Vec::new()
        };
        let mut pred = Vec::with_capacity(num_classes);
        let mut true_ = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            for (cond, cells) in [(Conditioning::Pred, &mut pred), (Conditioning::True, &mut true_)] {
                let members: Vec<usize> = (0..bundles.len())
                    .filter(|&i| match cond {
                        Conditioning::Pred => bundles[i].pred_class == c,
                        Conditioning::True => true_labels[i] == c,
                    })
                    .collect();
                if members.len() < config.min_null.max(2) {
                    return Err(Error::InsufficientNull {
                        conditioning: cond.name(),
                        class: c,
                        slot: 0,
                        count: members.len(),
                        required: config.min_null.max(2),
                    });
                }
                let rows: Vec<&[f64]> = members
                    .iter()
                    .map(|&i| match cond {
                        Conditioning::Pred => bundles[i].t_pred.as_slice(),
                        Conditioning::True => bundles[i].t_true[c].as_slice(),
                    })
                    .collect();
                let values = Matrix::from_rows(&rows)?;
                let aklpe = match config.combiner {
                    Combiner::Aklpe => Some(AklpeReference::fit(values.clone())?),
                    _ => None,
                };
                cells.push(NullCell::new(members, values, aklpe)?);
            }
        }
        Ok(Self {
            config,
            num_slots,
            pairs,
            pred,
            true_,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.pred.len()
    }

    fn combine_one(
        &self,
        cell: &NullCell,
        t: &[f64],
        sample: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if t.len() != self.num_slots {
            return Err(Error::DimensionMismatch {
                what: "statistic vector".into(),
                expected: self.num_slots,
                found: t.len(),
            });
        }
        let bootstrap = self.config.bootstrap;
        match self.config.combiner {
            Combiner::Fisher => fisher_combine(&cell.slot_pvalues(t, &self.pairs, sample, bootstrap, rng)?),
            Combiner::Hmp => {
                Ok(hmp_combine(&cell.slot_pvalues(t, &self.pairs, sample, bootstrap, rng)?, None)?.ln())
            }
            Combiner::Aklpe => Ok(cell.aklpe_pvalue(t, sample, bootstrap, rng)?.ln()),
        }
    }

    /// Combined p-values for one statistic bundle. `sample` is the
    /// calibration id of the sample when it is part of the nulls, so it is
    /// left out of its own cells.
    pub fn combine(&self, bundle: &StatVectorBundle, sample: Option<usize>, rng: &mut ChaCha8Rng) -> Result<PValueBundle> {
        let m = self.num_classes();
        if bundle.t_true.len() != m || bundle.pred_class >= m {
            return Err(Error::DimensionMismatch {
                what: "class count of statistic bundle".into(),
                expected: m,
                found: bundle.t_true.len(),
            });
        }
        let log_q_pred = self.combine_one(&self.pred[bundle.pred_class], &bundle.t_pred, sample, rng)?;
        let log_q_true = (0..m)
            .map(|c| self.combine_one(&self.true_[c], &bundle.t_true[c], sample, rng))
            .collect::<Result<Vec<f64>>>()?;
        Ok(PValueBundle {
            log_q_pred,
            log_q_true,
            pred_class: bundle.pred_class,
            combiner: self.config.combiner,
        })
    }
}

/// Deterministic per-stream seed derived from a base seed and an id.
pub fn stream_seed(seed: u64, id: u64) -> u64 {
    // splitmix64 finalizer over the combined input.
    let mut z = seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn ks_uniform(mut p: Vec<f64>) -> f64 {
        p.sort_by(f64::total_cmp);
        let n = p.len() as f64;
        p.iter()
            .enumerate()
            .map(|(i, &v)| ((i + 1) as f64 / n - v).abs().max((v - i as f64 / n).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn empirical_examples() {
        let null: Vec<f64> = (1..=100).map(f64::from).collect();
        let mut r = rng(1);
        assert_eq!(empirical_pvalue(0.0, &null, 100, &mut r).unwrap(), 1.0);
        assert_eq!(empirical_pvalue(1000.0, &null, 100, &mut r).unwrap(), 1.0 / 101.0);
        assert!((empirical_pvalue(90.5, &null, 0, &mut r).unwrap() - 11.0 / 101.0).abs() < 1e-15);
        assert!(empirical_pvalue(1.0, &[], 0, &mut r).is_err());
    }

    #[test]
    fn bootstrap_average_is_unbiased() {
        // Oracle: explicit resampling with replacement.
        let null: Vec<f64> = (0..40).map(f64::from).collect();
        let t = 30.0;
        let mut r = rng(2);
        let b = 100;
        let explicit: f64 = (0..b)
            .map(|_| {
                let c = (0..null.len()).filter(|_| null[r.random_range(0..null.len())] >= t).count();
                (1 + c) as f64 / 41.0
            })
            .sum::<f64>()
            / b as f64;
        let reps = 2000;
        let fast: f64 = (0..reps)
            .map(|_| empirical_pvalue(t, &null, b, &mut r).unwrap())
            .sum::<f64>()
            / reps as f64;
        let exact = 11.0 / 41.0;
        assert!((fast - exact).abs() < 2e-3, "{fast} vs {exact}");
        assert!((explicit - exact).abs() < 0.03);
    }

    #[test]
    fn bivariate_examples() {
        let mut r = rng(3);
        let null: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, (i * 7 % 50) as f64)).collect();
        assert_eq!(bivariate_pvalue(-1.0, -1.0, &null, 0, &mut r).unwrap(), 1.0);
        assert_eq!(bivariate_pvalue(100.0, 100.0, &null, 0, &mut r).unwrap(), 1.0 / 51.0);
        let pts: Vec<(f64, f64)> = (0..20000).map(|_| (r.random(), r.random())).collect();
        let p = bivariate_pvalue(0.5, 0.5, &pts, 0, &mut r).unwrap();
        assert!((p - 0.25).abs() < 0.02, "{p}");
    }

    #[test]
    fn combiner_examples() {
        assert_eq!(fisher_combine(&[1.0, 1.0]).unwrap(), 0.0);
        assert!((fisher_combine(&[0.1, 0.01]).unwrap() + 6.9078).abs() < 1e-4);
        assert!((fisher_combine(&[0.37]).unwrap() - 0.37f64.ln()).abs() < 1e-15);
        assert!(matches!(fisher_combine(&[0.5, 0.0]), Err(Error::ZeroPValue)));
        assert_eq!(hmp_combine(&[1.0, 1.0], None).unwrap(), 1.0);
        assert!((hmp_combine(&[0.1, 0.1], None).unwrap() - 0.1).abs() < 1e-15);
        assert!((hmp_combine(&[0.1, 0.3], None).unwrap() - 0.15).abs() < 1e-12);
        assert!(hmp_combine(&[0.1, 0.3], Some(&[0.5, 0.6])).is_err());
    }

    #[test]
    fn fisher_mean_under_null() {
        let mut r = rng(4);
        let n = 5;
        let draws = 10_000;
        let mean: f64 = (0..draws)
            .map(|_| {
                let p: Vec<f64> = (0..n).map(|_| 1.0 - r.random::<f64>()).collect();
                -2.0 * fisher_combine(&p).unwrap()
            })
            .sum::<f64>()
            / draws as f64;
        assert!((mean / (2 * n) as f64 - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn aklpe_examples() {
        let line = Matrix::from_rows(&(0..10).map(|i| vec![i as f64]).collect::<Vec<_>>()).unwrap();
        let idx = KnnIndex::build(line.clone(), Metric::Euclidean, SearchMode::Exact).unwrap();
        assert_eq!(aklpe_score(&[0.0], &idx, 4, Some(0)).unwrap(), 4.0);

        let dup = Matrix::from_rows(&vec![vec![1.0, 2.0]; 12]).unwrap();
        let idx = KnnIndex::build(dup, Metric::Euclidean, SearchMode::Exact).unwrap();
        assert_eq!(aklpe_score(&[1.0, 2.0], &idx, 4, None).unwrap(), 0.0);

        let doubled = Matrix::from_rows(&(0..10).map(|i| vec![2.0 * i as f64]).collect::<Vec<_>>()).unwrap();
        let a = KnnIndex::build(line, Metric::Euclidean, SearchMode::Exact).unwrap();
        let b = KnnIndex::build(doubled, Metric::Euclidean, SearchMode::Exact).unwrap();
        let ga = aklpe_score(&[3.3], &a, 4, None).unwrap();
        let gb = aklpe_score(&[6.6], &b, 4, None).unwrap();
        assert!((gb - 2.0 * ga).abs() < 1e-12);

        let small = Matrix::from_rows(&(0..5).map(|i| vec![i as f64]).collect::<Vec<_>>()).unwrap();
        let idx = KnnIndex::build(small, Metric::Euclidean, SearchMode::Exact).unwrap();
        assert!(aklpe_score(&[0.0], &idx, 4, None).is_err());
    }

    #[test]
    fn aklpe_pvalue_bounds_and_uniformity() {
        let mut r = rng(5);
        let null = vec![1.0, 2.0, 3.0];
        assert_eq!(aklpe_pvalue(0.5, &null, 0, &mut r).unwrap(), 1.0);
        assert_eq!(aklpe_pvalue(5.0, &null, 0, &mut r).unwrap(), 0.25);

        let draw = |r: &mut ChaCha8Rng, n: usize| {
            Matrix::from_rows(&(0..n).map(|_| vec![r.random::<f64>(), r.random::<f64>()]).collect::<Vec<_>>()).unwrap()
        };
        let reference = AklpeReference::fit(draw(&mut r, 1500)).unwrap();
        let fresh = draw(&mut r, 500);
        let p: Vec<f64> = fresh
            .iter_rows()
            .map(|t| {
                let g = reference.score(t, None).unwrap();
                aklpe_pvalue(g, &reference.sorted_scores, 0, &mut r).unwrap()
            })
            .collect();
        assert!(ks_uniform(p) < 0.1);
    }

    fn toy_bundles(n: usize, slots: usize, seed: u64) -> (Vec<StatVectorBundle>, Vec<usize>) {
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let bundles = labels
            .iter()
            .map(|&c| StatVectorBundle {
                t_pred: (0..slots).map(|_| r.random()).collect(),
                t_true: (0..2).map(|_| (0..slots).map(|_| r.random()).collect()).collect(),
                pred_class: c,
            })
            .collect();
        (bundles, labels)
    }

    #[test]
    fn leave_one_out_calibration_pvalues_are_uniform() {
        let (bundles, labels) = toy_bundles(2000, 1, 6);
        let config = NullConfig {
            bootstrap: 0,
            use_pairs: false,
            ..Default::default()
        };
        let nulls = EmpiricalNulls::fit(&bundles, &labels, 2, config).unwrap();
        let mut r = rng(7);
        let p: Vec<f64> = bundles
            .iter()
            .enumerate()
            .map(|(i, b)| nulls.combine(b, Some(i), &mut r).unwrap().log_q_pred.exp())
            .collect();
        assert!(ks_uniform(p) < 0.05);
    }

    #[test]
    fn pair_count_and_aklpe_single_value() {
        assert_eq!(slot_pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        let (bundles, labels) = toy_bundles(200, 3, 8);
        let mut r = rng(9);
        let fisher = EmpiricalNulls::fit(&bundles, &labels, 2, NullConfig::default()).unwrap();
        assert_eq!(fisher.pairs.len(), 3);
        let probe = StatVectorBundle {
            t_pred: vec![-1.0; 3],
            t_true: vec![vec![-1.0; 3]; 2],
            pred_class: 0,
        };
        // Every one of the 3 + 3 p-values is 1 below the null minimum.
        assert_eq!(fisher.combine(&probe, None, &mut r).unwrap().log_q_pred, 0.0);
        let high = StatVectorBundle {
            t_pred: vec![2.0; 3],
            t_true: vec![vec![2.0; 3]; 2],
            pred_class: 0,
        };
        let q = fisher.combine(&high, None, &mut r).unwrap();
        assert!((q.log_q_pred - 6.0 * (1.0f64 / 101.0).ln()).abs() < 1e-12);

        let config = NullConfig {
            combiner: Combiner::Aklpe,
            ..Default::default()
        };
        let aklpe = EmpiricalNulls::fit(&bundles, &labels, 2, config).unwrap();
        assert!(aklpe.pairs.is_empty());
        let q = aklpe.combine(&high, None, &mut r).unwrap();
        assert!(q.log_q_pred <= 0.0 && q.log_q_true.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn small_cell_rejected() {
        let (bundles, labels) = toy_bundles(30, 2, 10);
        let err = EmpiricalNulls::fit(&bundles, &labels, 2, NullConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientNull { count: 15, required: 20, .. }));
    }

    #[test]
    fn seeded_combination_is_deterministic() {
        let (bundles, labels) = toy_bundles(200, 2, 11);
        let nulls = EmpiricalNulls::fit(&bundles, &labels, 2, NullConfig::default()).unwrap();
        let a = nulls.combine(&bundles[5], None, &mut rng(stream_seed(1, 5))).unwrap();
        let b = nulls.combine(&bundles[5], None, &mut rng(stream_seed(1, 5))).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn pvalue_monotone(mut null in proptest::collection::vec(-10.0f64..10.0, 1..60), a in -12.0f64..12.0, b in -12.0f64..12.0) {
            null.sort_by(f64::total_cmp);
            let mut r = rng(0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let plo = empirical_pvalue(lo, &null, 0, &mut r).unwrap();
            let phi = empirical_pvalue(hi, &null, 0, &mut r).unwrap();
            prop_assert!(phi <= plo);
            prop_assert!(phi > 0.0 && plo <= 1.0);
        }

        #[test]
        fn hmp_bounds(p in proptest::collection::vec(0.001f64..1.0, 1..10)) {
            let h = hmp_combine(&p, None).unwrap();
            let max = p.iter().cloned().fold(0.0, f64::max);
            let min = p.iter().cloned().fold(1.0, f64::min);
            let w = 1.0 / p.len() as f64;
            prop_assert!(h <= max + 1e-12);
            prop_assert!(h >= min * w - 1e-12);
        }

        #[test]
        fn combiners_permutation_invariant(p in proptest::collection::vec(0.001f64..1.0, 2..10), rot in 0usize..10) {
            let mut q = p.clone();
            let r = rot % q.len();
            q.rotate_left(r);
            prop_assert!((fisher_combine(&p).unwrap() - fisher_combine(&q).unwrap()).abs() < 1e-10);
            prop_assert!((hmp_combine(&p, None).unwrap() - hmp_combine(&q, None).unwrap()).abs() < 1e-12);
            let n = p.len();
            let w: Vec<f64> = (1..=n).map(|i| i as f64 / (n * (n + 1) / 2) as f64).collect();
            let mut wq = w.clone();
            wq.rotate_left(r);
            prop_assert!((hmp_combine(&p, Some(&w)).unwrap() - hmp_combine(&q, Some(&wq)).unwrap()).abs() < 1e-12);
        }
    }
}
