//! Composite empirical-risk problems: local losses, their gradients,
//! synthetic logistic data, and the convexity moduli the tuner consumes.
//!
//! Every agent owns a smooth local cost `f_i = data term + weight * r(x)`;
//! the shared nonsmooth term `h` lives at the coordinator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, FedError, Result};
use crate::rng::{self, Purpose};
use crate::vector::ModelVector;

/// Single labelled sample with a row of features and a label in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub features: Vec<f64>,
    pub label: f64,
}

impl DataPoint {
    pub fn new(features: Vec<f64>, label: f64) -> Result<Self> {
        if label != 1.0 && label != -1.0 {
            return Err(invalid(format!("label must be +1 or -1, got {label}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid("features must be finite"));
        }
        Ok(Self { features, label })
    }

    /// Margin `b * a x`.
    fn margin(&self, x: &ModelVector) -> f64 {
        self.label
            * self
                .features
                .iter()
                .zip(x.iter())
                .map(|(a, w)| a * w)
                .sum::<f64>()
    }

    /// Logistic loss `log(1 + exp(-b a x))`.
    pub fn loss(&self, x: &ModelVector) -> f64 {
        softplus(-self.margin(x))
    }

    /// Gradient of the logistic loss, `-b a^T sigmoid(-b a x)`.
    pub fn gradient(&self, x: &ModelVector) -> ModelVector {
        let mut g = ModelVector::zeros(x.dim());
        self.accumulate_gradient(x, 1.0, &mut g);
        g
    }

    fn accumulate_gradient(&self, x: &ModelVector, weight: f64, out: &mut ModelVector) {
        let coef = -self.label * sigmoid(-self.margin(x)) * weight;
        for (o, a) in out.as_mut_slice().iter_mut().zip(&self.features) {
            *o += coef * a;
        }
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    pub agent_id: usize,
    pub points: Vec<DataPoint>,
}

impl LocalDataset {
    pub fn new(agent_id: usize, points: Vec<DataPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("a local dataset needs at least one point"));
        }
        let n = points[0].features.len();
        for p in &points {
            check_dim(n, p.features.len())?;
        }
        Ok(Self { agent_id, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.features.len())
    }

    pub fn positives(&self) -> usize {
        self.points.iter().filter(|p| p.label > 0.0).count()
    }

    /// Largest eigenvalue of `(1 / (4 q)) sum_h a_h^T a_h`.
    pub fn logistic_curvature_bound(&self) -> f64 {
        let n = self.dim();
        let q = self.len() as f64;
        let mut gram = vec![0.0; n * n];
        for p in &self.points {
            for r in 0..n {
                for c in 0..n {
                    gram[r * n + c] += p.features[r] * p.features[c];
                }
            }
        }
        for g in &mut gram {
            *g /= 4.0 * q;
        }
        top_eigenvalue_psd(&gram, n)
    }
}

/// Power iteration on a symmetric PSD matrix stored row-major.
fn top_eigenvalue_psd(m: &[f64], n: usize) -> f64 {
    const TOL: f64 = 1e-10;
    const MAX_ITER: usize = 100_000;
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    // fixed, non-axis-aligned start so degenerate spectra are still found
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sqrt()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut estimate = 0.0;
    for _ in 0..MAX_ITER {
        let mut w = vec![0.0; n];
        for r in 0..n {
            w[r] = (0..n).map(|c| m[r * n + c] * v[c]).sum();
        }
        let rayleigh: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return estimate;
        }
        v = w.into_iter().map(|x| x / wn).collect();
        if (rayleigh - estimate).abs() <= TOL * rayleigh.abs().max(1.0) {
            return rayleigh.max(estimate);
        }
        estimate = rayleigh;
    }
    estimate
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegularizerSpec {
    None,
    /// `weight * ||x||^2 / 2`
    L2 { weight: f64 },
    /// `weight * sum_j x_j^2 / (1 + x_j^2)`
    NonconvexRational { weight: f64 },
}

impl RegularizerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RegularizerSpec::None => Ok(()),
            RegularizerSpec::L2 { weight } | RegularizerSpec::NonconvexRational { weight } => {
                if weight > 0.0 && weight.is_finite() {
                    Ok(())
                } else {
                    Err(invalid(format!("regularizer weight must be positive, got {weight}")))
                }
            }
        }
    }

    pub fn value(&self, x: &ModelVector) -> f64 {
        match *self {
            RegularizerSpec::None => 0.0,
            RegularizerSpec::L2 { weight } => 0.5 * weight * x.norm_sq(),
            RegularizerSpec::NonconvexRational { weight } => {
                weight * x.iter().map(|v| v * v / (1.0 + v * v)).sum::<f64>()
            }
        }
    }

    pub fn accumulate_gradient(&self, x: &ModelVector, out: &mut ModelVector) {
        match *self {
            RegularizerSpec::None => {}
            RegularizerSpec::L2 { weight } => out.axpy(weight, x),
            RegularizerSpec::NonconvexRational { weight } => {
                for (o, v) in out.as_mut_slice().iter_mut().zip(x.iter()) {
                    let d = 1.0 + v * v;
                    *o += weight * 2.0 * v / (d * d);
                }
            }
        }
    }

    /// Strong-convexity contribution, `None` when the regularizer is nonconvex.
    fn convex_modulus(&self) -> Option<f64> {
        match *self {
            RegularizerSpec::None => Some(0.0),
            RegularizerSpec::L2 { weight } => Some(weight),
            RegularizerSpec::NonconvexRational { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonsmoothSpec {
    Zero,
    /// `weight * ||x||_1`
    L1 { weight: f64 },
}

impl NonsmoothSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NonsmoothSpec::Zero => Ok(()),
            NonsmoothSpec::L1 { weight } if weight >= 0.0 && weight.is_finite() => Ok(()),
            NonsmoothSpec::L1 { weight } => {
                Err(invalid(format!("l1 weight must be nonnegative, got {weight}")))
            }
        }
    }

    pub fn value(&self, x: &ModelVector) -> f64 {
        match *self {
            NonsmoothSpec::Zero => 0.0,
            NonsmoothSpec::L1 { weight } => weight * x.iter().map(|v| v.abs()).sum::<f64>(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, NonsmoothSpec::Zero) || matches!(self, NonsmoothSpec::L1 { weight } if *weight == 0.0)
    }
}

/// Strong convexity `lambda_lo` and smoothness `lambda_hi` shared by every local cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityBounds {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
}

impl ConvexityBounds {
    pub fn new(lambda_lo: f64, lambda_hi: f64) -> Result<Self> {
        if !(lambda_lo > 0.0 && lambda_lo <= lambda_hi && lambda_hi.is_finite()) {
            return Err(invalid(format!(
                "need 0 < lambda_lo <= lambda_hi < inf, got ({lambda_lo}, {lambda_hi})"
            )));
        }
        Ok(Self { lambda_lo, lambda_hi })
    }

    /// Moduli of the proximal subproblem `f + ||. - v||^2 / (2 rho)`.
    pub fn shifted(&self, rho: f64) -> (f64, f64) {
        (self.lambda_lo + 1.0 / rho, self.lambda_hi + 1.0 / rho)
    }
}

/// `curvature / 2 * ||x - center||^2`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub center: ModelVector,
    pub curvature: f64,
}

/// Data term of an agent's smooth cost.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalCost {
    Logistic(LocalDataset),
    Quadratic(QuadraticCost),
}

impl LocalCost {
    pub fn dim(&self) -> usize {
        match self {
            LocalCost::Logistic(d) => d.dim(),
            LocalCost::Quadratic(q) => q.center.dim(),
        }
    }

    /// Number of samples `q_i` in the empirical average (1 for quadratics).
    pub fn sample_count(&self) -> usize {
        match self {
            LocalCost::Logistic(d) => d.len(),
            LocalCost::Quadratic(_) => 1,
        }
    }

    pub fn loss(&self, x: &ModelVector, r: &RegularizerSpec) -> f64 {
        let data = match self {
            LocalCost::Logistic(d) => {
                d.points.iter().map(|p| p.loss(x)).sum::<f64>() / d.len() as f64
            }
            LocalCost::Quadratic(q) => 0.5 * q.curvature * x.distance(&q.center).powi(2),
        };
        data + r.value(x)
    }

    pub fn gradient(&self, x: &ModelVector, r: &RegularizerSpec) -> ModelVector {
        let mut g = self.data_gradient(x);
        r.accumulate_gradient(x, &mut g);
        g
    }

    /// Gradient of the data term only.
    pub fn data_gradient(&self, x: &ModelVector) -> ModelVector {
        let mut g = ModelVector::zeros(x.dim());
        match self {
            LocalCost::Logistic(d) => {
                let w = 1.0 / d.len() as f64;
                for p in &d.points {
                    p.accumulate_gradient(x, w, &mut g);
                }
            }
            LocalCost::Quadratic(q) => {
                g = x - &q.center;
                g.scale(q.curvature);
            }
        }
        g
    }

    /// Gradient of the `j`-th sample loss (the data term of a quadratic counts as one sample).
    pub fn sample_gradient(&self, j: usize, x: &ModelVector) -> ModelVector {
        match self {
            LocalCost::Logistic(d) => d.points[j].gradient(x),
            LocalCost::Quadratic(_) => self.data_gradient(x),
        }
    }

    /// Smoothness and strong-convexity moduli of the data term alone.
    fn data_moduli(&self) -> (f64, f64) {
        match self {
            LocalCost::Logistic(d) => (0.0, d.logistic_curvature_bound()),
            LocalCost::Quadratic(q) => (q.curvature, q.curvature),
        }
    }
}

/// Smooth-plus-nonsmooth problem `min_x sum_i f_i(x) + h(x)` over `N` agents.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub agents: Vec<LocalCost>,
    pub regularizer: RegularizerSpec,
    pub nonsmooth: NonsmoothSpec,
    /// `None` for nonconvex instances, whose runs are judged empirically.
    pub bounds: Option<ConvexityBounds>,
    pub n: usize,
    /// Seed the data were generated from, when synthetic.
    pub seed: Option<u64>,
}

impl ProblemInstance {
    pub fn new(
        agents: Vec<LocalCost>,
        regularizer: RegularizerSpec,
        nonsmooth: NonsmoothSpec,
    ) -> Result<Self> {
        regularizer.validate()?;
        nonsmooth.validate()?;
        let n = agents
            .first()
            .ok_or_else(|| invalid("a problem needs at least one agent"))?
            .dim();
        if n == 0 {
            return Err(invalid("model dimension must be at least 1"));
        }
        for a in &agents {
            check_dim(n, a.dim())?;
            if let LocalCost::Quadratic(q) = a {
                if !(q.curvature > 0.0) {
                    return Err(invalid("quadratic curvature must be positive"));
                }
            }
        }
        let bounds = derive_bounds(&agents, &regularizer);
        Ok(Self {
            agents,
            regularizer,
            nonsmooth,
            bounds,
            n,
            seed: None,
        })
    }

    pub fn from_datasets(
        datasets: Vec<LocalDataset>,
        regularizer: RegularizerSpec,
        nonsmooth: NonsmoothSpec,
    ) -> Result<Self> {
        Self::new(
            datasets.into_iter().map(LocalCost::Logistic).collect(),
            regularizer,
            nonsmooth,
        )
    }

    /// Scalar or vector quadratic agents `c_i / 2 * ||x - m_i||^2`.
    pub fn quadratic(
        centers: Vec<ModelVector>,
        curvatures: Vec<f64>,
        nonsmooth: NonsmoothSpec,
    ) -> Result<Self> {
        if centers.len() != curvatures.len() {
            return Err(invalid("one curvature per center is required"));
        }
        let agents = centers
            .into_iter()
            .zip(curvatures)
            .map(|(center, curvature)| LocalCost::Quadratic(QuadraticCost { center, curvature }))
            .collect();
        Self::new(agents, RegularizerSpec::None, nonsmooth)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_nonsmooth(mut self, nonsmooth: NonsmoothSpec) -> Result<Self> {
        nonsmooth.validate()?;
        self.nonsmooth = nonsmooth;
        Ok(self)
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn require_bounds(&self) -> Result<ConvexityBounds> {
        self.bounds.ok_or(FedError::NonconvexBounds)
    }

    pub fn local_loss(&self, i: usize, x: &ModelVector) -> f64 {
        self.agents[i].loss(x, &self.regularizer)
    }

    pub fn local_gradient(&self, i: usize, x: &ModelVector) -> ModelVector {
        self.agents[i].gradient(x, &self.regularizer)
    }

    /// `sum_i f_i(x) + h(x)`
    pub fn objective(&self, x: &ModelVector) -> f64 {
        (0..self.num_agents())
            .map(|i| self.local_loss(i, x))
            .sum::<f64>()
            + self.nonsmooth.value(x)
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.agents.iter().map(LocalCost::sample_count).collect()
    }

    /// Stable content hash used to key cached reference solutions.
    pub fn content_hash(&self) -> u64 {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let mut h = DefaultHasher::new();
        self.n.hash(&mut h);
        for a in &self.agents {
            match a {
                LocalCost::Logistic(d) => {
                    0u8.hash(&mut h);
                    for p in &d.points {
                        p.label.to_bits().hash(&mut h);
                        for f in &p.features {
                            f.to_bits().hash(&mut h);
                        }
                    }
                }
                LocalCost::Quadratic(q) => {
                    1u8.hash(&mut h);
                    q.curvature.to_bits().hash(&mut h);
                    for c in q.center.iter() {
                        c.to_bits().hash(&mut h);
                    }
                }
            }
        }
        format!("{:?}|{:?}", self.regularizer, self.nonsmooth).hash(&mut h);
        h.finish()
    }
}

fn derive_bounds(agents: &[LocalCost], r: &RegularizerSpec) -> Option<ConvexityBounds> {
    let reg = r.convex_modulus()?;
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for a in agents {
        let (l, h) = a.data_moduli();
        lo = lo.min(l + reg);
        hi = hi.max(h + reg);
    }
    ConvexityBounds::new(lo, hi).ok()
}

/// Averaged logistic loss of `d` at `x` plus the regularizer.
pub fn local_loss(x: &ModelVector, d: &LocalDataset, r: &RegularizerSpec) -> Result<f64> {
    check_dim(d.dim(), x.dim())?;
    Ok(LocalCost::Logistic(d.clone()).loss(x, r))
}

pub fn local_gradient(x: &ModelVector, d: &LocalDataset, r: &RegularizerSpec) -> Result<ModelVector> {
    check_dim(d.dim(), x.dim())?;
    let w = 1.0 / d.len() as f64;
    let mut g = ModelVector::zeros(x.dim());
    for p in &d.points {
        p.accumulate_gradient(x, w, &mut g);
    }
    r.accumulate_gradient(x, &mut g);
    Ok(g)
}

/// Strong convexity and smoothness moduli valid for every agent's logistic cost.
///
/// The logistic second derivative is at most 1/4, so each data term is
/// `lambda_max(A_i^T A_i) / (4 q_i)`-smooth.
pub fn smoothness_bounds(datasets: &[LocalDataset], r: &RegularizerSpec) -> Result<ConvexityBounds> {
    let weight = match *r {
        RegularizerSpec::L2 { weight } => weight,
        RegularizerSpec::NonconvexRational { .. } => return Err(FedError::NonconvexBounds),
        RegularizerSpec::None => {
            return Err(invalid("strong convexity requires the l2 regularizer"))
        }
    };
    r.validate()?;
    let top = datasets
        .iter()
        .map(LocalDataset::logistic_curvature_bound)
        .fold(0.0, f64::max);
    ConvexityBounds::new(weight, weight + top)
}

/// `|| sum_i grad f_i(x_bar) ||^2` over the smooth parts only.
pub fn global_gradient_norm_sq(x_bar: &ModelVector, p: &ProblemInstance) -> Result<f64> {
    check_dim(p.n, x_bar.dim())?;
    let mut total = ModelVector::zeros(p.n);
    for i in 0..p.num_agents() {
        total.axpy(1.0, &p.local_gradient(i, x_bar));
    }
    Ok(total.norm_sq())
}

/// Label-flip probability used by the synthetic generator.
pub const LABEL_FLIP_PROB: f64 = 0.05;
/// Standard deviation of the additive margin noise before thresholding.
pub const MARGIN_NOISE_STD: f64 = 0.1;
const MAX_BALANCE_ATTEMPTS: usize = 10_000;

/// Inclusive range of admissible positive counts for a dataset of size `q`.
pub fn balance_band(q: usize) -> (usize, usize) {
    let lo = (0.4 * q as f64).floor() as usize;
    let hi = (0.6 * q as f64).ceil() as usize;
    (lo, hi.min(q))
}

fn std_normal(rng: &mut rng::StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Synthetic logistic-regression data for `agents` agents.
///
/// Rows are standard normal scaled by `1/sqrt(n)`; labels are
/// `sign(a x_true + noise)` with a shared ground truth and a small flip
/// probability. A dataset whose positive count leaves the 40-60% band is
/// redrawn from the continuation of the same stream.
pub fn generate_logistic_data(
    seed: u64,
    agents: usize,
    n: usize,
    q: usize,
) -> Result<Vec<LocalDataset>> {
    if agents == 0 || n == 0 || q == 0 {
        return Err(invalid("agents, dimension and per-agent size must all be positive"));
    }
    let mut truth_rng = rng::stream(seed, Purpose::Data, u64::MAX, 0);
    let x_true: Vec<f64> = (0..n).map(|_| std_normal(&mut truth_rng)).collect();
    let scale = 1.0 / (n as f64).sqrt();
    let (lo, hi) = balance_band(q);

    (0..agents)
        .map(|agent| {
            let mut rng = rng::stream(seed, Purpose::Data, agent as u64, 0);
            for _ in 0..MAX_BALANCE_ATTEMPTS {
                let points: Vec<DataPoint> = (0..q)
                    .map(|_| {
                        let features: Vec<f64> = (0..n)
                            .map(|_| scale * std_normal(&mut rng))
                            .collect::<Vec<f64>>();
                        let noise: f64 = MARGIN_NOISE_STD * std_normal(&mut rng);
                        let score: f64 =
                            features.iter().zip(&x_true).map(|(a, w)| a * w).sum::<f64>() + noise;
                        let mut label = if score >= 0.0 { 1.0 } else { -1.0 };
                        if rng.random::<f64>() < LABEL_FLIP_PROB {
                            label = -label;
                        }
                        DataPoint { features, label }
                    })
                    .collect();
                let positives = points.iter().filter(|p| p.label > 0.0).count();
                if (lo..=hi).contains(&positives) {
                    return LocalDataset::new(agent, points);
                }
            }
            Err(invalid(format!("could not draw a balanced dataset for agent {agent}")))
        })
        .collect()
}

/// Convex desk-scale logistic instance.
pub fn logistic_instance(
    seed: u64,
    agents: usize,
    n: usize,
    q: usize,
    regularizer: RegularizerSpec,
    nonsmooth: NonsmoothSpec,
) -> Result<ProblemInstance> {
    let data = generate_logistic_data(seed, agents, n, q)?;
    Ok(ProblemInstance::from_datasets(data, regularizer, nonsmooth)?.with_seed(seed))
}
