//! Defense-aware attack on the kNN class counts of the layer
//! representations, smoothed with a Gaussian kernel.
//!
//! Soft counts are taken in the detector's projected layer spaces against
//! its calibration set, with squared euclidean distances.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorModel, ScoredSample, Task};
use crate::error::{Error, Result};
use crate::matrix::{squared_euclidean, Matrix};
use crate::toynet::{ForwardTrace, ToyNetwork};

pub const KERNEL_GRID: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// `log mass(c) - log mass(c')` over counts summed across layers.
    #[default]
    Targeted,
    /// Target mass replaced by the mass of every class other than `c`.
    Untargeted,
    /// Per-layer log-ratios summed over layers.
    Alternate,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "targeted" => Ok(LossVariant::Targeted),
            "untargeted" => Ok(LossVariant::Untargeted),
            "alternate" => Ok(LossVariant::Alternate),
            other => Err(Error::invalid(format!("unknown loss variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsProp {
    pub step_size: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub lambda_range: (f64, f64),
    pub bisection_steps: usize,
    pub max_iters: usize,
    /// Stop an inner run after this many iterations without improving the
    /// objective; 0 always runs `max_iters`.
    pub patience: usize,
    pub optimizer: RmsProp,
    pub kernel_alpha: f64,
    pub variant: LossVariant,
    pub timeout_secs: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            lambda_range: (1e-3, 1e3),
            bisection_steps: 10,
            max_iters: 1000,
            patience: 100,
            optimizer: RmsProp::default(),
            kernel_alpha: 0.5,
            variant: LossVariant::Targeted,
            timeout_secs: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lambda_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::invalid("lambda range needs 0 < low < high"));
        }
        if self.bisection_steps == 0 || self.max_iters == 0 {
            return Err(Error::invalid("bisection steps and iterations must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.kernel_alpha) {
            return Err(Error::invalid("kernel alpha outside [0, 1]"));
        }
        let o = &self.optimizer;
        if !(o.step_size > 0.0) || !(0.0..1.0).contains(&o.decay) || !(o.epsilon > 0.0) {
            return Err(Error::invalid("invalid RMSProp parameters"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelScale {
    pub sigma: f64,
    /// The k nearest distances were all equal, so the grid search was
    /// skipped and `sigma` is that common distance (or a fallback when zero).
    pub degenerate: bool,
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|&a| (a - max).exp()).sum::<f64>().ln()
}

/// `(1 - alpha) h1 + alpha h2` for squared distances `sq` to every
/// reference point, of which `near` are the k nearest.
fn kernel_criterion(sigma: f64, sq: &[f64], near: &[f64], alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let log_near = log_sum_exp(near.iter().map(|d| -d / s2));
    let log_all = log_sum_exp(sq.iter().map(|d| -d / s2));
    let h1 = (log_near - log_all).exp();
    let k = near.len();
    let h2 = if k < 2 {
        1.0
    } else {
        let entropy: f64 = near
            .iter()
            .map(|d| {
                let log_q = -d / s2 - log_near;
                -log_q.exp() * log_q
            })
            .sum();
        entropy / (k as f64).ln()
    };
    (1.0 - alpha) * h1 + alpha * h2
}

/// Kernel scale around `x` maximizing the mix of nearest-neighbor kernel
/// mass and neighbor-weight entropy over a log grid on `[0.1η, 10η]`, with
/// `η` the euclidean distance to the k-th nearest reference point.
pub fn kernel_scale(x: &[f64], points: &Matrix, k: usize, alpha: f64) -> Result<KernelScale> {
    if k == 0 || k > points.rows() {
        return Err(Error::KTooLarge {
            k,
            available: points.rows(),
        });
    }
    let sq: Vec<f64> = points.iter_rows().map(|p| squared_euclidean(x, p)).collect();
    let mut sorted = sq.clone();
    sorted.sort_by(f64::total_cmp);
    let near = &sorted[..k];
    let eta = near[k - 1].sqrt();
    if near[0] == near[k - 1] {
        let sigma = if eta > 0.0 {
            eta
        } else {
            sorted.iter().find(|&&d| d > 0.0).map_or(1.0, |d| d.sqrt())
        };
        return Ok(KernelScale { sigma, degenerate: true });
    }
    let (lo, hi) = ((0.1 * eta).ln(), (10.0 * eta).ln());
    let mut best = (f64::NEG_INFINITY, eta);
    for i in 0..KERNEL_GRID {
        let sigma = (lo + (hi - lo) * i as f64 / (KERNEL_GRID - 1) as f64).exp();
        let v = kernel_criterion(sigma, &sorted, near, alpha);
        if v > best.0 {
            best = (v, sigma);
        }
    }
    Ok(KernelScale {
        sigma: best.1,
        degenerate: false,
    })
}

/// The detector's projected calibration set, used as the attack's
/// reference points.
pub struct AttackReference<'a> {
    pub model: &'a DetectorModel,
}

impl<'a> AttackReference<'a> {
    pub fn new(model: &'a DetectorModel) -> Self {
        Self { model }
    }

    pub fn num_layers(&self) -> usize {
        self.model.num_layers()
    }

    fn points(&self, l: usize) -> &Matrix {
        self.model.context.layers[l].points()
    }

    fn labels(&self) -> &[usize] {
        &self.model.context.true_labels
    }

    /// Per-layer kernel scales around the clean input's representations.
    pub fn kernel_scales(&self, trace: &ForwardTrace, alpha: f64) -> Result<Vec<KernelScale>> {
        let z = self.model.project(&trace_layers(trace))?;
        (0..self.num_layers())
            .map(|l| kernel_scale(&z[l], self.points(l), self.model.context.k, alpha))
            .collect()
    }

    /// Per-layer log kernel terms `-|z_l - z_n|² / σ_l²`.
    fn log_kernels(&self, z: &[Vec<f64>], scales: &[f64]) -> Vec<Vec<f64>> {
        z.iter()
            .enumerate()
            .map(|(l, zl)| {
                let s2 = scales[l] * scales[l];
                self.points(l).iter_rows().map(|p| -squared_euclidean(zl, p) / s2).collect()
            })
            .collect()
    }

    /// Soft class mass `Σ_l Σ_{n: c_n = class} exp(-|f_l(x) - f_l(x_n)|² / σ_l²)`
    /// for a trace of raw layer vectors.
    pub fn soft_class_mass(&self, trace: &ForwardTrace, class: usize, scales: &[f64]) -> Result<f64> {
        let z = self.model.project(&trace_layers(trace))?;
        let logs = self.log_kernels(&z, scales);
        Ok(logs
            .iter()
            .flat_map(|row| row.iter().zip(self.labels()).filter(|(_, &c)| c == class).map(|(v, _)| v.exp()))
            .sum())
    }
}

fn trace_layers(trace: &ForwardTrace) -> Vec<&[f64]> {
    trace.activations.iter().map(Vec::as_slice).collect()
}

/// Log of a class-restricted kernel mass (over `layers`) and its gradient
/// with respect to each projected representation.
fn log_mass_with_grad(
    reference: &AttackReference,
    z: &[Vec<f64>],
    logs: &[Vec<f64>],
    scales: &[f64],
    layers: &[usize],
    keep: &dyn Fn(usize) -> bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let labels = reference.labels();
    let terms = layers
        .iter()
        .flat_map(|&l| logs[l].iter().zip(labels).filter(|(_, &c)| keep(c)).map(|(&v, _)| v));
    let total = log_sum_exp(terms);
    if total == f64::NEG_INFINITY {
        return Err(Error::Numerical("no reference points of the requested classes".into()));
    }
    let mut grads: Vec<Vec<f64>> = z.iter().map(|zl| vec![0.0; zl.len()]).collect();
    for &l in layers {
        let s2 = scales[l] * scales[l];
        let points = reference.points(l);
        for (n, (&v, &c)) in logs[l].iter().zip(labels).enumerate() {
            if !keep(c) {
                continue;
            }
            let w = (v - total).exp();
            if w == 0.0 {
                continue;
            }
            for ((g, &zi), &pi) in grads[l].iter_mut().zip(&z[l]).zip(points.row(n)) {
                *g += w * -2.0 * (zi - pi) / s2;
            }
        }
    }
    Ok((total, grads))
}

/// The kernel-smoothed log-ratio term (without λ or the norm penalty).
pub struct Objective<'a> {
    pub reference: &'a AttackReference<'a>,
    pub scales: Vec<f64>,
    pub source: usize,
    pub target: usize,
    pub variant: LossVariant,
}

impl<'a> Objective<'a> {
    /// Value and its partial derivatives with respect to every raw layer
    /// representation in `trace`.
    pub fn log_ratio(&self, trace: &ForwardTrace) -> Result<(f64, Vec<Vec<f64>>)> {
        let model = self.reference.model;
        let z = model.project(&trace_layers(trace))?;
        let logs = self.reference.log_kernels(&z, &self.scales);
        let all: Vec<usize> = (0..z.len()).collect();
        let source = self.source;
        let target = self.target;
        let is_source = move |c: usize| c == source;
        let is_other: Box<dyn Fn(usize) -> bool> = match self.variant {
            LossVariant::Untargeted => Box::new(move |c: usize| c != source),
            _ => Box::new(move |c: usize| c == target),
        };
        let groups: Vec<Vec<usize>> = match self.variant {
            LossVariant::Alternate => all.iter().map(|&l| vec![l]).collect(),
            _ => vec![all],
        };
        let mut value = 0.0;
        let mut dz: Vec<Vec<f64>> = z.iter().map(|zl| vec![0.0; zl.len()]).collect();
        for layers in &groups {
            let (a, ga) = log_mass_with_grad(self.reference, &z, &logs, &self.scales, layers, &is_source)?;
            let (b, gb) = log_mass_with_grad(self.reference, &z, &logs, &self.scales, layers, &*is_other)?;
            value += a - b;
            for ((d, x), y) in dz.iter_mut().zip(&ga).zip(&gb) {
                for ((di, xi), yi) in d.iter_mut().zip(x).zip(y) {
                    *di += xi - yi;
                }
            }
        }
        let upstream = dz
            .iter()
            .zip(&model.projections)
            .map(|(g, p)| p.pullback(g))
            .collect();
        Ok((value, upstream))
    }
}

/// `J(ζ) = |ζ|² + λ · log_ratio(x + ζ)` and its gradient with respect to ζ.
pub fn attack_objective(
    net: &ToyNetwork,
    x: &[f64],
    zeta: &[f64],
    lambda: f64,
    objective: &Objective,
) -> Result<(f64, Vec<f64>)> {
    let xp: Vec<f64> = x.iter().zip(zeta).map(|(a, b)| a + b).collect();
    let (ratio, grad) = net.input_gradient(&xp, |t| objective.log_ratio(t))?;
    let penalty: f64 = zeta.iter().map(|v| v * v).sum();
    let g = grad.iter().zip(zeta).map(|(g, z)| lambda * g + 2.0 * z).collect();
    Ok((penalty + lambda * ratio, g))
}

/// Maps an input inside `[a, b]` to the unconstrained tanh space.
pub fn to_tanh_space(x: &[f64], range: &[(f64, f64)]) -> Vec<f64> {
    let limit = 1.0 - 1e-12;
    x.iter()
        .zip(range)
        .map(|(&v, &(a, b))| (2.0 * (v - a) / (b - a) - 1.0).clamp(-limit, limit).atanh())
        .collect()
}

/// Maps an unconstrained vector into the open box `(a, b)`.
pub fn from_tanh_space(z: &[f64], range: &[(f64, f64)]) -> Vec<f64> {
    z.iter()
        .zip(range)
        .map(|(&v, &(a, b))| {
            let x = a + (b - a) * 0.5 * (1.0 + v.tanh());
            x.clamp(a.next_up(), b.next_down())
        })
        .collect()
}

/// Derivative of [`from_tanh_space`] per component.
fn tanh_space_jacobian(z: &[f64], range: &[(f64, f64)]) -> Vec<f64> {
    z.iter()
        .zip(range)
        .map(|(&v, &(a, b))| {
            let t = v.tanh();
            (b - a) * 0.5 * (1.0 - t * t)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    pub success: bool,
    pub lambda_used: f64,
    pub l2_norm: f64,
    pub iterations: usize,
    pub source_class: usize,
    pub target_class: usize,
    /// Network prediction on `x_adv`.
    pub network_pred: usize,
    /// Detector output on `x_adv`.
    pub defense: ScoredSample,
    pub timed_out: bool,
}

impl AttackResult {
    pub fn fools_network(&self) -> bool {
        self.network_pred != self.source_class
    }
}

/// Network prediction and detector output for an input.
pub fn defend(net: &ToyNetwork, model: &DetectorModel, x: &[f64], sample_id: usize) -> Result<(ForwardTrace, ScoredSample)> {
    let trace = net.forward(x)?;
    let scored = model.score_sample(&trace_layers(&trace), trace.pred_class, sample_id, Task::Adversarial)?;
    Ok((trace, scored))
}

struct InnerRun {
    x_best: Vec<f64>,
    iterations: usize,
    timed_out: bool,
}

fn minimize(
    net: &ToyNetwork,
    x: &[f64],
    lambda: f64,
    objective: &Objective,
    config: &AttackConfig,
    deadline: Option<Instant>,
) -> Result<InnerRun> {
    let range = net.input_range();
    let z0 = to_tanh_space(x, range);
    let mut w = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let o = config.optimizer;
    let mut best = (f64::INFINITY, from_tanh_space(&z0, range));
    let mut since_best = 0;
    let mut iterations = 0;
    let mut timed_out = false;
    for _ in 0..config.max_iters {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            timed_out = true;
            break;
        }
        let zw: Vec<f64> = z0.iter().zip(&w).map(|(a, b)| a + b).collect();
        let xp = from_tanh_space(&zw, range);
        let zeta: Vec<f64> = xp.iter().zip(x).map(|(a, b)| a - b).collect();
        let (j, g) = attack_objective(net, x, &zeta, lambda, objective)?;
        iterations += 1;
        if !j.is_finite() {
            break;
        }
        if !best.0.is_finite() || j < best.0 - 1e-9 * best.0.abs().max(1.0) {
            best = (j, xp);
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                break;
            }
        }
        let jac = tanh_space_jacobian(&zw, range);
        for i in 0..w.len() {
            let gi = g[i] * jac[i];
            v[i] = o.decay * v[i] + (1.0 - o.decay) * gi * gi;
            w[i] -= o.step_size * gi / (v[i].sqrt() + o.epsilon);
        }
    }
    Ok(InnerRun {
        x_best: best.1,
        iterations,
        timed_out,
    })
}

/// Class with the second highest network probability (ties to the smallest
/// index).
pub fn second_class(trace: &ForwardTrace) -> usize {
    let p = &trace.probabilities;
    let top = trace.pred_class;
    let mut best = if top == 0 { 1 } else { 0 };
    for c in 0..p.len() {
        if c != top && p[c] > p[best] {
            best = c;
        }
    }
    best
}

/// Searches the smallest λ on a log-scale bisection whose optimized input
/// changes the defense's corrected prediction away from `true_class`.
pub fn run_attack(
    net: &ToyNetwork,
    model: &DetectorModel,
    x: &[f64],
    true_class: usize,
    sample_id: usize,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    let (trace, clean) = defend(net, model, x, sample_id)?;
    if trace.pred_class != true_class {
        return Err(Error::InitiallyMisclassified(format!(
            "sample {sample_id}: network predicts {} for class {true_class}",
            trace.pred_class
        )));
    }
    if clean.corrected_class != true_class {
        return Err(Error::InitiallyMisclassified(format!(
            "sample {sample_id}: defense predicts {} for class {true_class}",
            clean.corrected_class
        )));
    }
    let reference = AttackReference::new(model);
    let scales = reference
        .kernel_scales(&trace, config.kernel_alpha)?
        .into_iter()
        .map(|s| s.sigma)
        .collect();
    let target = second_class(&trace);
    let objective = Objective {
        reference: &reference,
        scales,
        source: true_class,
        target,
        variant: config.variant,
    };
    let deadline = config
        .timeout_secs
        .map(|s| Instant::now() + std::time::Duration::from_secs_f64(s.max(0.0)));
    let (mut lo, mut hi) = (config.lambda_range.0.ln(), config.lambda_range.1.ln());
    let mut found: Option<AttackResult> = None;
    let mut fallback: Option<AttackResult> = None;
    for _ in 0..config.bisection_steps {
        let mid = 0.5 * (lo + hi);
        let lambda = mid.exp();
        let run = minimize(net, x, lambda, &objective, config, deadline)?;
        let (t, scored) = defend(net, model, &run.x_best, sample_id)?;
        let result = AttackResult {
            l2_norm: run.x_best.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
            x_adv: run.x_best,
            success: scored.corrected_class != true_class,
            lambda_used: lambda,
            iterations: run.iterations,
            source_class: true_class,
            target_class: target,
            network_pred: t.pred_class,
            defense: scored,
            timed_out: run.timed_out,
        };
        let timed_out = result.timed_out;
        if result.success {
            hi = mid;
            found = Some(result);
        } else {
            lo = mid;
            fallback = Some(result);
        }
        if timed_out {
            break;
        }
    }
    let mut result = found.or(fallback).expect("at least one bisection step");
    result.timed_out = deadline.is_some_and(|d| Instant::now() >= d);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LayerDataset;
    use crate::detector::{fit_detector, DetectorConfig};
    use crate::knn::Metric;
    use crate::toynet::{export_representations, train_toy, Activation, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn kernel_scale_examples() {
        // k = N: the k nearest hold all the mass.
        let pts = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 0.0]]).unwrap();
        let x = [0.0, 0.0];
        let sq: Vec<f64> = pts.iter_rows().map(|p| squared_euclidean(&x, p)).collect();
        for sigma in [0.1, 1.0, 10.0] {
            let v = kernel_criterion(sigma, &sq, &sq, 0.0);
            assert!((v - 1.0).abs() < 1e-12);
        }
        // Equidistant neighbors: entropy term is 1 at every scale.
        let eq = [4.0, 4.0, 4.0, 9.0];
        for sigma in [0.5, 2.0, 20.0] {
            let v = kernel_criterion(sigma, &eq, &eq[..3], 1.0);
            assert!((v - 1.0).abs() < 1e-12);
        }
        let ring = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0], vec![-2.0, 0.0]]).unwrap();
        let s = kernel_scale(&x, &ring, 3, 0.5).unwrap();
        assert!(s.degenerate && s.sigma == 2.0);

        // Near cluster at distance ~1, far cluster at ~100.
        let mut rows = Vec::new();
        for i in 0..5 {
            let a = i as f64 * 1.2566;
            rows.push(vec![a.cos() * (1.0 + 0.01 * i as f64), a.sin()]);
        }
        for i in 0..50 {
            rows.push(vec![100.0 + i as f64 * 0.1, 0.0]);
        }
        let pts = Matrix::from_rows(&rows).unwrap();
        let s = kernel_scale(&x, &pts, 5, 0.5).unwrap();
        let sq: Vec<f64> = pts.iter_rows().map(|p| squared_euclidean(&x, p)).collect();
        let s2 = s.sigma * s.sigma;
        let near: f64 = sq[..5].iter().map(|d| (-d / s2).exp()).sum();
        let all: f64 = sq.iter().map(|d| (-d / s2).exp()).sum();
        assert!(near / all >= 0.99);
    }

    #[test]
    fn tanh_space_stays_inside_box() {
        let range = vec![(-1.0, 2.0), (0.0, 1.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let z = [rng.random_range(-50.0..50.0), rng.random_range(-1e6..1e6)];
            let x = from_tanh_space(&z, &range);
            for (v, (a, b)) in x.iter().zip(&range) {
                assert!(a < v && v < b);
            }
        }
        let x = [0.5, 0.25];
        let back = from_tanh_space(&to_tanh_space(&x, &range), &range);
        assert!((back[0] - 0.5).abs() < 1e-12 && (back[1] - 0.25).abs() < 1e-12);
    }

    pub(crate) struct Fixture {
        pub net: ToyNetwork,
        pub data: LayerDataset,
        pub inputs: Matrix,
        pub model: DetectorModel,
    }

    pub(crate) fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.8).unwrap();
        let centres = [[0.0, 2.5], [2.2, -1.2], [-2.2, -1.2]];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..300 {
            let c = i % 3;
            rows.push(vec![centres[c][0] + noise.sample(&mut rng), centres[c][1] + noise.sample(&mut rng)]);
            labels.push(c);
        }
        let inputs = Matrix::from_rows(&rows).unwrap();
        let mut net = ToyNetwork::random(&[2, 8, 8, 3], Activation::Tanh, vec![(-6.0, 6.0); 2], seed).unwrap();
        train_toy(&mut net, &inputs, &labels, &TrainConfig { epochs: 60, ..Default::default() }).unwrap();
        let data = export_representations(&net, &inputs, &labels).unwrap();
        let config = DetectorConfig {
            metric: Metric::Euclidean,
            bootstrap: 0,
            ..Default::default()
        };
        let model = fit_detector(&data, &config).unwrap();
        Fixture { net, data, inputs, model }
    }

    fn soft_mass_examples_inner() {
        let f = fixture(2);
        let reference = AttackReference::new(&f.model);
        let trace = f.net.forward(f.inputs.row(0)).unwrap();
        let huge = vec![1e12; f.model.num_layers()];
        let count = f.model.context.true_labels.iter().filter(|&&c| c == 1).count();
        let mass = reference.soft_class_mass(&trace, 1, &huge).unwrap();
        assert!((mass - (count * f.model.num_layers()) as f64).abs() < 1e-6);
        let tiny = vec![1e-6; f.model.num_layers()];
        assert!(reference.soft_class_mass(&trace, 1, &tiny).unwrap() < 1e-12);
    }

    #[test]
    fn soft_mass_examples() {
        soft_mass_examples_inner();
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let f = fixture(3);
        let reference = AttackReference::new(&f.model);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        for variant in [LossVariant::Targeted, LossVariant::Untargeted, LossVariant::Alternate] {
            for trial in 0..10 {
                let i = (trial * 29) % f.inputs.rows();
                let x = f.inputs.row(i).to_vec();
                let trace = f.net.forward(&x).unwrap();
                let scales: Vec<f64> = reference
                    .kernel_scales(&trace, 0.5)
                    .unwrap()
                    .iter()
                    .map(|s| s.sigma * 3.0)
                    .collect();
                let obj = Objective {
                    reference: &reference,
                    scales,
                    source: f.data.true_labels()[i],
                    target: second_class(&trace),
                    variant,
                };
                let zeta: Vec<f64> = (0..2).map(|_| rng.random_range(-0.3..0.3)).collect();
                let lambda = 0.7;
                let (_, g) = attack_objective(&f.net, &x, &zeta, lambda, &obj).unwrap();
                let eps = 1e-5;
                for d in 0..2 {
                    let mut zp = zeta.clone();
                    let mut zm = zeta.clone();
                    zp[d] += eps;
                    zm[d] -= eps;
                    let jp = attack_objective(&f.net, &x, &zp, lambda, &obj).unwrap().0;
                    let jm = attack_objective(&f.net, &x, &zm, lambda, &obj).unwrap().0;
                    let fd = (jp - jm) / (2.0 * eps);
                    worst = worst.max((fd - g[d]).abs() / fd.abs().max(g[d].abs()).max(1.0));
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");

        // ζ = 0 leaves only the λ-weighted ratio; λ = 0 leaves the penalty.
        let x = f.inputs.row(0).to_vec();
        let trace = f.net.forward(&x).unwrap();
        let obj = Objective {
            reference: &reference,
            scales: reference.kernel_scales(&trace, 0.5).unwrap().iter().map(|s| s.sigma).collect(),
            source: f.data.true_labels()[0],
            target: second_class(&trace),
            variant: LossVariant::Targeted,
        };
        let (ratio, _) = obj.log_ratio(&trace).unwrap();
        let (j, _) = attack_objective(&f.net, &x, &[0.0, 0.0], 2.0, &obj).unwrap();
        assert!((j - 2.0 * ratio).abs() < 1e-12);
        let (j, g) = attack_objective(&f.net, &x, &[0.3, -0.4], 0.0, &obj).unwrap();
        assert!((j - 0.25).abs() < 1e-12);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn attack_runs_and_verifies() {
        let f = fixture(5);
        let config = AttackConfig {
            max_iters: 300,
            bisection_steps: 6,
            ..Default::default()
        };
        let mut successes = 0;
        let mut tried = 0;
        for i in 0..f.inputs.rows() {
            if tried == 6 {
                break;
            }
            let x = f.inputs.row(i);
            let y = f.data.true_labels()[i];
            let r = match run_attack(&f.net, &f.model, x, y, 10_000 + i, &config) {
                Ok(r) => r,
                Err(Error::InitiallyMisclassified(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            tried += 1;
            for (v, (a, b)) in r.x_adv.iter().zip(f.net.input_range()) {
                assert!(a < v && v < b);
            }
            let norm: f64 = r.x_adv.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!((norm - r.l2_norm).abs() < 1e-12);
            let (_, again) = defend(&f.net, &f.model, &r.x_adv, 10_000 + i).unwrap();
            assert_eq!(again, r.defense);
            assert_eq!(r.success, again.corrected_class != y);
            if r.success {
                successes += 1;
                assert!(r.l2_norm.is_finite());
            }
            let twice = run_attack(&f.net, &f.model, x, y, 10_000 + i, &config).unwrap();
            assert_eq!(r, twice);
        }
        assert!(tried > 0);
        assert!(successes > 0);
    }

    #[test]
    fn misclassified_input_is_rejected() {
        let f = fixture(6);
        let x = f.inputs.row(0);
        let pred = f.net.predict(x).unwrap();
        let wrong = (pred + 1) % 3;
        let r = run_attack(&f.net, &f.model, x, wrong, 0, &AttackConfig::default());
        assert!(matches!(r, Err(Error::InitiallyMisclassified(_))));
    }
}
