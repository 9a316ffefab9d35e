//! Intrinsic-dimension estimation and linear projections of layer
//! representations, with the target dimension picked by cross-validated kNN
//! classification error.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::stratified_folds;
use crate::error::{Error, Result};
use crate::knn::{default_k, KnnIndex, Metric, SearchMode};
use crate::matrix::{squared_euclidean, Matrix};

/// Layers at or below this width are left unprojected.
pub const MAX_UNREDUCED_DIM: usize = 10;
pub const NUM_CANDIDATES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    #[default]
    Pca,
    Npp,
    /// No reduction; identity basis and zero mean.
    Identity,
}

impl std::str::FromStr for ProjectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Self::Pca),
            "npp" => Ok(Self::Npp),
            "none" | "identity" => Ok(Self::Identity),
            other => Err(Error::invalid(format!("unknown projection method '{other}'"))),
        }
    }
}

/// `y = (x - mean) · basis`, with orthonormal basis columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionModel {
    pub mean: Vec<f64>,
    /// `d × d'`, row-major.
    pub basis: Matrix,
    pub method: ProjectionMethod,
}

impl ProjectionModel {
    pub fn identity(d: usize) -> Self {
        let mut basis = Matrix::zeros(d, d);
        for i in 0..d {
            basis.row_mut(i)[i] = 1.0;
        }
        Self {
            mean: vec![0.0; d],
            basis,
            method: ProjectionMethod::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn is_identity(&self) -> bool {
        self.method == ProjectionMethod::Identity
    }

    pub fn apply_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "projection input".into(),
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        if self.is_identity() {
            return Ok(x.to_vec());
        }
        let mut out = vec![0.0; self.output_dim()];
        for (i, (&xi, &mi)) in x.iter().zip(&self.mean).enumerate() {
            let c = xi - mi;
            if c != 0.0 {
                for (o, b) in out.iter_mut().zip(self.basis.row(i)) {
                    *o += c * b;
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, points: &Matrix) -> Result<Matrix> {
        if points.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "projection input".into(),
                expected: self.input_dim(),
                found: points.cols(),
            });
        }
        let mut data = Vec::with_capacity(points.rows() * self.output_dim());
        for r in points.iter_rows() {
            data.extend(self.apply_row(r)?);
        }
        Matrix::new(points.rows(), self.output_dim(), data)
    }

    /// Maps a gradient with respect to the projected vector back to the
    /// input space (`basis · g`).
    pub fn pullback(&self, g: &[f64]) -> Vec<f64> {
        (0..self.input_dim())
            .map(|i| self.basis.row(i).iter().zip(g).map(|(b, v)| b * v).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimSearchReport {
    pub intrinsic_dim: usize,
    pub candidates: Vec<usize>,
    pub cv_errors: Vec<f64>,
    pub chosen_dim: usize,
    /// Some candidates exceeded the input width and were clipped to it.
    pub clipped: bool,
    pub metric: Metric,
}

/// Maximum-likelihood local intrinsic dimension from ascending neighbor
/// distances: `-(mean_i ln(r_i / r_k))^-1`.
pub fn lid_mle(distances: &[f64]) -> Result<f64> {
    let k = distances.len();
    if k < 2 {
        return Err(Error::invalid(format!("LID needs at least 2 distances, got {k}")));
    }
    let rk = distances[k - 1];
    if distances.iter().any(|&r| r <= 0.0 || !r.is_finite()) {
        return Err(Error::Numerical("LID distances must be positive and finite".into()));
    }
    let mean_log: f64 = distances.iter().map(|&r| (r / rk).ln()).sum::<f64>() / k as f64;
    if mean_log == 0.0 {
        return Err(Error::Numerical("LID undefined: all neighbor distances equal".into()));
    }
    Ok(-1.0 / mean_log)
}

/// LID of point `i` against its own index, skipping neighbors at distance 0
/// (duplicates). `None` when fewer than two positive distances exist.
pub(crate) fn lid_of_member(index: &KnnIndex, i: usize, k: usize) -> Result<Option<f64>> {
    lid_of_query(index, index.points().row(i), k, Some(i))
}

pub(crate) fn lid_of_query(
    index: &KnnIndex,
    x: &[f64],
    k: usize,
    exclude: Option<usize>,
) -> Result<Option<f64>> {
    let available = index.len() - usize::from(exclude.is_some());
    let k = k.min(available);
    if k < 2 {
        return Ok(None);
    }
    let mut nb = index.query_excluding(x, k, exclude)?;
    let zeros = nb.distances.iter().filter(|&&d| d == 0.0).count();
    if zeros > 0 {
        nb = index.query_excluding(x, (k + zeros).min(available), exclude)?;
    }
    let positive: Vec<f64> = nb.distances.into_iter().filter(|&d| d > 0.0).take(k).collect();
    if positive.len() < 2 {
        return Ok(None);
    }
    match lid_mle(&positive) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Numerical(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// `ceil(median LID)` over all points, at least 1.
pub fn intrinsic_dimension(points: &Matrix, k: usize, metric: Metric) -> Result<usize> {
    if points.rows() < k + 1 {
        return Err(Error::invalid(format!(
            "intrinsic dimension with k={k} needs at least {} points, got {}",
            k + 1,
            points.rows()
        )));
    }
    let index = KnnIndex::build(points.clone(), metric, SearchMode::Auto)?;
    let mut lids = Vec::with_capacity(points.rows());
    for i in 0..points.rows() {
        if let Some(v) = lid_of_member(&index, i, k)? {
            lids.push(v);
        }
    }
    if lids.is_empty() {
        return Err(Error::Numerical(
            "no point has two distinct positive neighbor distances".into(),
        ));
    }
    Ok((median(&mut lids).ceil() as usize).max(1))
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimSearchConfig {
    pub method: ProjectionMethod,
    pub metric: Metric,
    pub folds: usize,
    pub seed: u64,
}

impl Default for DimSearchConfig {
    fn default() -> Self {
        Self {
            method: ProjectionMethod::Pca,
            metric: Metric::Cosine,
            folds: 5,
            seed: 0,
        }
    }
}

/// `NUM_CANDIDATES` linearly spaced integers over `[lo, hi]`.
pub fn candidate_dims(lo: usize, hi: usize) -> Vec<usize> {
    let (a, b) = (lo as f64, hi as f64);
    (0..NUM_CANDIDATES)
        .map(|i| (a + (b - a) * i as f64 / (NUM_CANDIDATES - 1) as f64).round() as usize)
        .collect()
}

/// Searches the projection dimension and fits the final projection on all
/// points.
pub fn fit_projection(
    points: &Matrix,
    labels: &[usize],
    config: &DimSearchConfig,
) -> Result<(ProjectionModel, DimSearchReport)> {
    let (n, d) = (points.rows(), points.cols());
    if labels.len() != n {
        return Err(Error::RowCountMismatch {
            what: "projection labels".into(),
            expected: n,
            found: labels.len(),
        });
    }
    if d < 2 {
        return Err(Error::invalid("projection search needs at least 2 input dimensions"));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::invalid("projection search needs at least 2 classes"));
    }
    if config.method == ProjectionMethod::Identity {
        let report = DimSearchReport {
            intrinsic_dim: d,
            candidates: vec![d],
            cv_errors: vec![],
            chosen_dim: d,
            clipped: false,
            metric: config.metric,
        };
        return Ok((ProjectionModel::identity(d), report));
    }

    let k = default_k(n)?;
    let d_int = intrinsic_dimension(points, k, config.metric)?;
    if d_int >= d {
        return Err(Error::invalid(format!(
            "intrinsic dimension {d_int} is not below the input width {d}; nothing to search"
        )));
    }
    let raw = candidate_dims(d_int, 10 * d_int);
    let clipped = raw.iter().any(|&c| c > d);
    let candidates: Vec<usize> = raw.iter().map(|&c| c.min(d)).collect();
    let max_dim = *candidates.iter().max().expect("non-empty");

    let split = stratified_folds(labels, config.folds, config.seed)?;
    let mut fold_errors = vec![vec![0.0; max_dim + 1]; config.folds];
    for (fold, errors) in fold_errors.iter_mut().enumerate() {
        let test = split.fold_indices(fold);
        let train = split.complement_indices(fold);
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let train_pts = points.select_rows(&train);
        let train_lbl: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let full = fit_basis(&train_pts, max_dim, config.method)?;
        let k_cls = default_k(train.len())?;
        let mut evaluated = vec![false; max_dim + 1];
        for &dim in &candidates {
            if evaluated[dim] {
                continue;
            }
            evaluated[dim] = true;
            let model = full.truncated(dim);
            let tr = model.apply(&train_pts)?;
            let te = model.apply(&points.select_rows(&test))?;
            let wrong = test
                .iter()
                .enumerate()
                .filter(|&(j, &i)| {
                    knn_classify(&tr, &train_lbl, te.row(j), k_cls, config.metric) != labels[i]
                })
                .count();
            errors[dim] = wrong as f64 / test.len() as f64;
        }
    }
    let cv_errors: Vec<f64> = candidates
        .iter()
        .map(|&dim| fold_errors.iter().map(|e| e[dim]).sum::<f64>() / config.folds as f64)
        .collect();
    let mut chosen_dim = candidates[0];
    let mut best = f64::INFINITY;
    for (&dim, &err) in candidates.iter().zip(&cv_errors) {
        if err < best || (err == best && dim < chosen_dim) {
            best = err;
            chosen_dim = dim;
        }
    }
    let model = fit_basis(points, chosen_dim, config.method)?;
    Ok((
        model,
        DimSearchReport {
            intrinsic_dim: d_int,
            candidates,
            cv_errors,
            chosen_dim,
            clipped,
            metric: config.metric,
        },
    ))
}

impl ProjectionModel {
    /// Keeps the leading `dim` basis columns.
    pub fn truncated(&self, dim: usize) -> ProjectionModel {
        let d = self.input_dim();
        let dim = dim.min(self.output_dim());
        let mut basis = Matrix::zeros(d, dim);
        for i in 0..d {
            basis.row_mut(i).copy_from_slice(&self.basis.row(i)[..dim]);
        }
        ProjectionModel {
            mean: self.mean.clone(),
            basis,
            method: self.method,
        }
    }
}

/// Majority vote among the `k` nearest training points; ties go to the
/// smallest class.
fn knn_classify(train: &Matrix, labels: &[usize], x: &[f64], k: usize, metric: Metric) -> usize {
    let mut dists: Vec<(f64, usize)> = train
        .iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let d = match metric {
                Metric::Euclidean => squared_euclidean(r, x),
                Metric::Cosine => metric.distance(r, x),
            };
            (d, i)
        })
        .collect();
    let k = k.min(dists.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, cmp);
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut votes = vec![0usize; num_classes];
    for &(_, i) in &dists[..k] {
        votes[labels[i]] += 1;
    }
    let best = *votes.iter().max().unwrap_or(&0);
    votes.iter().position(|&v| v == best).unwrap_or(0)
}

/// Fits a projection with `dim` output columns.
pub fn fit_basis(points: &Matrix, dim: usize, method: ProjectionMethod) -> Result<ProjectionModel> {
    match method {
        ProjectionMethod::Pca => fit_pca(points, dim),
        ProjectionMethod::Npp => fit_npp(points, dim),
        ProjectionMethod::Identity => Ok(ProjectionModel::identity(points.cols())),
    }
}

fn centered(points: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let mean = points.column_means();
    let (n, d) = (points.rows(), points.cols());
    let x = DMatrix::from_fn(n, d, |i, j| points.row(i)[j] - mean[j]);
    (mean, x)
}

fn check_dim(points: &Matrix, dim: usize) -> Result<()> {
    if points.rows() == 0 {
        return Err(Error::Empty("projection points"));
    }
    if dim == 0 || dim > points.cols() {
        return Err(Error::invalid(format!(
            "projection dimension {dim} outside [1, {}]",
            points.cols()
        )));
    }
    Ok(())
}

/// Flips each column so its largest-magnitude entry is positive.
fn normalize_signs(basis: &mut DMatrix<f64>) {
    for mut col in basis.column_iter_mut() {
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

fn to_model(mean: Vec<f64>, basis: &DMatrix<f64>, method: ProjectionMethod) -> ProjectionModel {
    let (d, k) = basis.shape();
    let data = (0..d).flat_map(|i| (0..k).map(move |j| basis[(i, j)])).collect();
    ProjectionModel {
        mean,
        basis: Matrix::new(d, k, data).expect("shape"),
        method,
    }
}

/// Principal components, ordered by decreasing variance.
pub fn fit_pca(points: &Matrix, dim: usize) -> Result<ProjectionModel> {
    check_dim(points, dim)?;
    let (mean, x) = centered(points);
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = DMatrix::from_fn(points.cols(), dim, |i, j| eig.eigenvectors[(i, order[j])]);
    normalize_signs(&mut basis);
    Ok(to_model(mean, &basis, ProjectionMethod::Pca))
}

/// Neighborhood-preserving projection: locally linear reconstruction
/// weights, then the generalized eigenproblem `X M Xᵀ v = λ (X Xᵀ + εI) v`
/// with `M = (I - W)ᵀ (I - W)`, keeping the smallest eigenvalues. The basis is
/// orthonormalized afterwards.
pub fn fit_npp(points: &Matrix, dim: usize) -> Result<ProjectionModel> {
    check_dim(points, dim)?;
    let (n, d) = (points.rows(), points.cols());
    if n < 3 {
        return Err(Error::invalid("neighborhood-preserving projection needs at least 3 points"));
    }
    let (mean, x) = centered(points);
    let k = default_k(n)?.clamp(2, n - 1);
    let index = KnnIndex::build(points.clone(), Metric::Euclidean, SearchMode::Auto)?;

    // Rows of E are x_i - Σ_j W_ij x_j.
    let mut e = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        let nb = index.query_excluding(points.row(i), k, Some(i))?;
        let z = DMatrix::from_fn(k, d, |a, b| x[(nb.indices[a], b)] - x[(i, b)]);
        let mut gram = &z * z.transpose();
        let reg = 1e-3 * gram.trace().max(1e-12);
        for a in 0..k {
            gram[(a, a)] += reg;
        }
        let w = gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("singular local Gram matrix".into()))?
            .solve(&DVector::from_element(k, 1.0));
        let w = &w / w.sum();
        for b in 0..d {
            let recon: f64 = (0..k).map(|a| w[a] * x[(nb.indices[a], b)]).sum();
            e[(i, b)] = x[(i, b)] - recon;
        }
    }
    let a = e.transpose() * &e;
    let mut bmat = x.transpose() * &x;
    let eps = 1e-6 * (bmat.trace() / d as f64).max(1e-12);
    for j in 0..d {
        bmat[(j, j)] += eps;
    }
    let chol = bmat
        .cholesky()
        .ok_or_else(|| Error::Numerical("scatter matrix is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let c = &l_inv * a * l_inv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]).then(p.cmp(&q)));
    let u = DMatrix::from_fn(d, dim, |i, j| eig.eigenvectors[(i, order[j])]);
    let v = l_inv.transpose() * u;
    let mut q = v.qr().q();
    normalize_signs(&mut q);
    Ok(to_model(mean, &q, ProjectionMethod::Npp))
}
