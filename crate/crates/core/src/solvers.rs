//! Local training procedures that approximate `prox_{rho f_i}(v)`.
//!
//! Each solver minimizes `d(w) = f_i(w) + ||w - v||^2 / (2 rho)` for a fixed
//! number of epochs, starting from the agent's current local model. `d` is
//! `(lambda_lo + 1/rho)`-strongly convex and `(lambda_hi + 1/rho)`-smooth.

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FedError, Result};
use crate::privacy::clip_gradient;
use crate::problem::{ConvexityBounds, LocalCost, RegularizerSpec};
use crate::rng::StreamRng;
use crate::vector::ModelVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum StepRule {
    /// `2 / (lambda_lo + lambda_hi + 2 / rho)`, the minimizer of the GD contraction factor.
    Optimal,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverKind {
    Gd { step: StepRule },
    Agd,
    Sgd { step: StepRule, batch: usize },
    /// Gradient descent plus `sqrt(2 step) * N(0, tau^2 I)` per epoch; per-sample
    /// gradients are clipped to norm `clip / 2` when `clip` is set.
    NoisyGd { step: StepRule, tau: f64, clip: Option<f64> },
    /// Solve the proximal subproblem to a gradient-norm tolerance.
    Exact { tolerance: f64 },
}

impl SolverKind {
    pub fn gd() -> Self {
        SolverKind::Gd { step: StepRule::Optimal }
    }

    pub fn exact() -> Self {
        SolverKind::Exact {
            tolerance: EXACT_TOLERANCE,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, SolverKind::Sgd { .. } | SolverKind::NoisyGd { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Gd { .. } => "gd",
            SolverKind::Agd => "agd",
            SolverKind::Sgd { .. } => "sgd",
            SolverKind::NoisyGd { .. } => "noisy",
            SolverKind::Exact { .. } => "exact",
        }
    }

    /// Replaces the step rule for solvers that have one.
    pub fn with_step(self, rule: StepRule) -> Self {
        match self {
            SolverKind::Gd { .. } => SolverKind::Gd { step: rule },
            SolverKind::Sgd { batch, .. } => SolverKind::Sgd { step: rule, batch },
            SolverKind::NoisyGd { tau, clip, .. } => SolverKind::NoisyGd { step: rule, tau, clip },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalSolveConfig {
    pub kind: SolverKind,
    pub epochs: usize,
    pub rho: f64,
}

impl LocalSolveConfig {
    pub fn new(kind: SolverKind, epochs: usize, rho: f64) -> Result<Self> {
        let cfg = Self { kind, epochs, rho };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("local epochs must be at least 1"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(invalid(format!("rho must be positive, got {}", self.rho)));
        }
        match self.kind {
            SolverKind::Sgd { batch: 0, .. } => Err(invalid("SGD batch must be at least 1")),
            SolverKind::NoisyGd { tau, .. } if !(tau >= 0.0 && tau.is_finite()) => {
                Err(invalid(format!("noise level tau must be nonnegative, got {tau}")))
            }
            SolverKind::NoisyGd { clip: Some(l), .. } if !(l > 0.0) => {
                Err(invalid(format!("clipping bound must be positive, got {l}")))
            }
            SolverKind::Exact { tolerance } if !(tolerance > 0.0) => {
                Err(invalid("exact solver tolerance must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Resolved local step size for the gradient-based solvers.
    pub fn step_size(&self, bounds: Option<&ConvexityBounds>) -> Result<f64> {
        let rule = match self.kind {
            SolverKind::Gd { step } | SolverKind::Sgd { step, .. } | SolverKind::NoisyGd { step, .. } => step,
            SolverKind::Agd => {
                let b = bounds.ok_or(FedError::NonconvexBounds)?;
                return Ok(1.0 / (b.lambda_hi + 1.0 / self.rho));
            }
            SolverKind::Exact { .. } => {
                let b = bounds.ok_or(FedError::NonconvexBounds)?;
                return Ok(optimal_step(b, self.rho));
            }
        };
        resolve_step(rule, bounds, self.rho)
    }
}

pub fn optimal_step(b: &ConvexityBounds, rho: f64) -> f64 {
    2.0 / (b.lambda_lo + b.lambda_hi + 2.0 / rho)
}

/// Checks `0 < step < 2 / (lambda_hi + 1/rho)`; without bounds only positivity is enforced.
pub fn resolve_step(rule: StepRule, bounds: Option<&ConvexityBounds>, rho: f64) -> Result<f64> {
    match rule {
        StepRule::Optimal => Ok(optimal_step(bounds.ok_or(FedError::NonconvexBounds)?, rho)),
        StepRule::Fixed(step) => {
            if !(step > 0.0 && step.is_finite()) {
                return Err(invalid(format!("step size must be positive, got {step}")));
            }
            if let Some(b) = bounds {
                let limit = 2.0 / (b.lambda_hi + 1.0 / rho);
                if step >= limit {
                    return Err(invalid(format!(
                        "step size {step} outside (0, {limit}) for the proximal subproblem"
                    )));
                }
            }
            Ok(step)
        }
    }
}

/// One agent's smooth cost together with the moduli shared by all agents.
#[derive(Debug, Clone, Copy)]
pub struct LocalProblem<'a> {
    pub cost: &'a LocalCost,
    pub regularizer: &'a RegularizerSpec,
    pub bounds: Option<&'a ConvexityBounds>,
}

/// `grad f_i(w) + (w - v) / rho`
pub fn local_objective_gradient(
    w: &ModelVector,
    v: &ModelVector,
    cost: &LocalCost,
    r: &RegularizerSpec,
    rho: f64,
) -> Result<ModelVector> {
    crate::error::check_dim(cost.dim(), w.dim())?;
    crate::error::check_dim(cost.dim(), v.dim())?;
    let mut g = cost.gradient(w, r);
    add_proximal_term(&mut g, w, v, rho);
    Ok(g)
}

fn add_proximal_term(g: &mut ModelVector, w: &ModelVector, v: &ModelVector, rho: f64) {
    for ((gi, wi), vi) in g.as_mut_slice().iter_mut().zip(w.iter()).zip(v.iter()) {
        *gi += (wi - vi) / rho;
    }
}

fn check_inputs(lp: &LocalProblem<'_>, x_start: &ModelVector, v: &ModelVector, cfg: &LocalSolveConfig) -> Result<()> {
    cfg.validate()?;
    crate::error::check_dim(lp.cost.dim(), x_start.dim())?;
    crate::error::check_dim(lp.cost.dim(), v.dim())
}

/// `Ne` steps of `w <- w - step * grad d(w)`.
pub fn run_gd(lp: &LocalProblem<'_>, x_start: &ModelVector, v: &ModelVector, cfg: &LocalSolveConfig) -> Result<ModelVector> {
    check_inputs(lp, x_start, v, cfg)?;
    let step = cfg.step_size(lp.bounds)?;
    let mut w = x_start.clone();
    for _ in 0..cfg.epochs {
        let mut g = lp.cost.gradient(&w, lp.regularizer);
        add_proximal_term(&mut g, &w, v, cfg.rho);
        w.axpy(-step, &g);
    }
    Ok(w)
}

/// Nesterov's constant-momentum method for strongly convex `d`.
pub fn run_agd(lp: &LocalProblem<'_>, x_start: &ModelVector, v: &ModelVector, cfg: &LocalSolveConfig) -> Result<ModelVector> {
    check_inputs(lp, x_start, v, cfg)?;
    let b = lp.bounds.ok_or(FedError::NonconvexBounds)?;
    let (lo, hi) = b.shifted(cfg.rho);
    let step = 1.0 / hi;
    let momentum = (hi.sqrt() - lo.sqrt()) / (hi.sqrt() + lo.sqrt());
    let mut w = x_start.clone();
    let mut u_prev = x_start.clone();
    for _ in 0..cfg.epochs {
        let mut g = lp.cost.gradient(&w, lp.regularizer);
        add_proximal_term(&mut g, &w, v, cfg.rho);
        let mut u = w.clone();
        u.axpy(-step, &g);
        w = u.clone();
        w.axpy(momentum, &u);
        w.axpy(-momentum, &u_prev);
        u_prev = u;
    }
    Ok(w)
}

/// Mini-batch stochastic gradient on the data term; the batch is drawn
/// uniformly without replacement, independently at every epoch.
pub fn run_sgd(
    lp: &LocalProblem<'_>,
    x_start: &ModelVector,
    v: &ModelVector,
    cfg: &LocalSolveConfig,
    rng: &mut StreamRng,
) -> Result<ModelVector> {
    check_inputs(lp, x_start, v, cfg)?;
    let SolverKind::Sgd { batch, .. } = cfg.kind else {
        return Err(invalid("run_sgd requires an SGD configuration"));
    };
    let q = lp.cost.sample_count();
    if batch > q {
        return Err(invalid(format!("batch size {batch} exceeds the {q} local samples")));
    }
    let step = cfg.step_size(lp.bounds)?;
    let mut w = x_start.clone();
    for _ in 0..cfg.epochs {
        let mut g = stochastic_gradient(lp.cost, &w, batch, rng);
        lp.regularizer.accumulate_gradient(&w, &mut g);
        add_proximal_term(&mut g, &w, v, cfg.rho);
        w.axpy(-step, &g);
    }
    Ok(w)
}

/// `(1/B) sum_{j in batch} grad l(w; xi_j)` for a uniformly drawn batch.
/// A full batch reproduces the exact data gradient.
pub fn stochastic_gradient(cost: &LocalCost, w: &ModelVector, batch: usize, rng: &mut StreamRng) -> ModelVector {
    let q = cost.sample_count();
    if batch >= q {
        return cost.data_gradient(w);
    }
    let mut g = ModelVector::zeros(w.dim());
    for j in index::sample(rng, q, batch) {
        g.axpy(1.0 / batch as f64, &cost.sample_gradient(j, w));
    }
    g
}

/// Gradient descent perturbed by `sqrt(2 step) N(0, tau^2 I)` at each epoch.
pub fn run_noisy_gd(
    lp: &LocalProblem<'_>,
    x_start: &ModelVector,
    v: &ModelVector,
    cfg: &LocalSolveConfig,
    rng: &mut StreamRng,
) -> Result<ModelVector> {
    check_inputs(lp, x_start, v, cfg)?;
    let SolverKind::NoisyGd { tau, clip, .. } = cfg.kind else {
        return Err(invalid("run_noisy_gd requires a noisy-GD configuration"));
    };
    let step = cfg.step_size(lp.bounds)?;
    let noise_scale = (2.0 * step).sqrt() * tau;
    let mut w = x_start.clone();
    for _ in 0..cfg.epochs {
        let mut g = match clip {
            None => lp.cost.data_gradient(&w),
            Some(bound) => clipped_data_gradient(lp.cost, &w, bound),
        };
        lp.regularizer.accumulate_gradient(&w, &mut g);
        add_proximal_term(&mut g, &w, v, cfg.rho);
        w.axpy(-step, &g);
        if noise_scale > 0.0 {
            for wi in w.as_mut_slice() {
                let t: f64 = StandardNormal.sample(rng);
                *wi += noise_scale * t;
            }
        }
    }
    Ok(w)
}

/// Data-term gradient averaged over per-sample gradients clipped to norm `bound / 2`.
pub fn clipped_data_gradient(cost: &LocalCost, w: &ModelVector, bound: f64) -> ModelVector {
    let q = cost.sample_count();
    let mut g = ModelVector::zeros(w.dim());
    for j in 0..q {
        let sample = cost.sample_gradient(j, w);
        g.axpy(1.0 / q as f64, &clip_gradient(&sample, bound).expect("bound validated"));
    }
    g
}

pub const EXACT_TOLERANCE: f64 = 1e-12;
const EXACT_MAX_ITER: usize = 2_000_000;

/// High-accuracy `prox_{rho f_i}(v)`: gradient descent from `v` until
/// `||grad d|| <= tolerance`.
pub fn exact_prox_oracle(lp: &LocalProblem<'_>, v: &ModelVector, rho: f64, tolerance: f64) -> Result<ModelVector> {
    crate::error::check_dim(lp.cost.dim(), v.dim())?;
    let b = lp.bounds.ok_or(FedError::NonconvexBounds)?;
    let step = optimal_step(b, rho);
    let mut w = v.clone();
    for _ in 0..EXACT_MAX_ITER {
        let mut g = lp.cost.gradient(&w, lp.regularizer);
        add_proximal_term(&mut g, &w, v, rho);
        if g.norm() <= tolerance {
            return Ok(w);
        }
        w.axpy(-step, &g);
    }
    Err(FedError::NoConvergence {
        tolerance,
        iterations: EXACT_MAX_ITER,
    })
}

/// Runs the configured solver from `x_start` towards `prox_{rho f_i}(v)`.
pub fn solve(
    lp: &LocalProblem<'_>,
    x_start: &ModelVector,
    v: &ModelVector,
    cfg: &LocalSolveConfig,
    rng: &mut StreamRng,
) -> Result<ModelVector> {
    match cfg.kind {
        SolverKind::Gd { .. } => run_gd(lp, x_start, v, cfg),
        SolverKind::Agd => run_agd(lp, x_start, v, cfg),
        SolverKind::Sgd { .. } => run_sgd(lp, x_start, v, cfg, rng),
        SolverKind::NoisyGd { .. } => run_noisy_gd(lp, x_start, v, cfg, rng),
        SolverKind::Exact { tolerance } => {
            cfg.validate()?;
            crate::error::check_dim(lp.cost.dim(), x_start.dim())?;
            exact_prox_oracle(lp, v, cfg.rho, tolerance)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::QuadraticCost;
    use crate::rng::{stream, Purpose};
    use approx::assert_abs_diff_eq;

    fn quad(c: f64) -> LocalCost {
        LocalCost::Quadratic(QuadraticCost {
            center: ModelVector::new(vec![c]),
            curvature: 1.0,
        })
    }

    const NONE: RegularizerSpec = RegularizerSpec::None;

    fn unit_bounds() -> ConvexityBounds {
        ConvexityBounds::new(1.0, 1.0).unwrap()
    }

    #[test]
    fn objective_gradient_examples() {
        let cost = quad(1.0);
        let w = ModelVector::new(vec![0.0]);
        let g = local_objective_gradient(&w, &w, &cost, &NONE, 1.0).unwrap();
        assert_eq!(g.as_slice(), &[-1.0]);
        let at_center = ModelVector::new(vec![1.0]);
        let g0 = local_objective_gradient(&at_center, &at_center, &cost, &NONE, 1.0).unwrap();
        assert_eq!(g0.as_slice(), &[0.0]);
        assert!(local_objective_gradient(&ModelVector::zeros(2), &w, &cost, &NONE, 1.0).is_err());
    }

    #[test]
    fn gd_single_step_and_convergence() {
        let cost = quad(1.0);
        let b = unit_bounds();
        let lp = LocalProblem { cost: &cost, regularizer: &NONE, bounds: Some(&b) };
        let zero = ModelVector::zeros(1);
        let one = LocalSolveConfig::new(SolverKind::Gd { step: StepRule::Fixed(0.5) }, 1, 1.0).unwrap();
        assert_eq!(run_gd(&lp, &zero, &zero, &one).unwrap().as_slice(), &[0.5]);
        let many = LocalSolveConfig::new(SolverKind::Gd { step: StepRule::Fixed(0.3) }, 40, 1.0).unwrap();
        assert_abs_diff_eq!(run_gd(&lp, &zero, &zero, &many).unwrap()[0], 0.5, epsilon = 1e-9);
        let at_prox = ModelVector::new(vec![0.5]);
        assert_eq!(run_gd(&lp, &at_prox, &zero, &many).unwrap(), at_prox);
    }

    #[test]
    fn gd_step_out_of_range_is_rejected() {
        let cost = quad(1.0);
        let b = unit_bounds();
        let lp = LocalProblem { cost: &cost, regularizer: &NONE, bounds: Some(&b) };
        let zero = ModelVector::zeros(1);
        // 2 / (lambda_hi + 1 / rho) = 1
        let cfg = LocalSolveConfig::new(SolverKind::Gd { step: StepRule::Fixed(1.0) }, 3, 1.0).unwrap();
        assert!(run_gd(&lp, &zero, &zero, &cfg).is_err());
        assert!(LocalSolveConfig::new(SolverKind::gd(), 0, 1.0).is_err());
    }

    #[test]
    fn agd_examples() {
        let cost = quad(1.0);
        let b = unit_bounds();
        let lp = LocalProblem { cost: &cost, regularizer: &NONE, bounds: Some(&b) };
        let zero = ModelVector::zeros(1);
        let cfg = LocalSolveConfig::new(SolverKind::Agd, 40, 1.0).unwrap();
        assert_abs_diff_eq!(run_agd(&lp, &zero, &zero, &cfg).unwrap()[0], 0.5, epsilon = 1e-9);
        let at_prox = ModelVector::new(vec![0.5]);
        assert_eq!(run_agd(&lp, &at_prox, &zero, &cfg).unwrap(), at_prox);
        // flat spectrum: zero momentum, same path as GD with step 1/(lambda_hi + 1/rho)
        let gd = LocalSolveConfig::new(SolverKind::Gd { step: StepRule::Fixed(0.5) }, 3, 1.0).unwrap();
        let agd = LocalSolveConfig::new(SolverKind::Agd, 3, 1.0).unwrap();
        let start = ModelVector::new(vec![-2.0]);
        assert_eq!(run_agd(&lp, &start, &zero, &agd).unwrap(), run_gd(&lp, &start, &zero, &gd).unwrap());
        let no_bounds = LocalProblem { cost: &cost, regularizer: &NONE, bounds: None };
        assert!(matches!(run_agd(&no_bounds, &zero, &zero, &agd), Err(FedError::NonconvexBounds)));
    }

    #[test]
    fn noisy_gd_with_zero_noise_is_gd() {
        let data = crate::problem::generate_logistic_data(5, 1, 3, 20).unwrap();
        let cost = LocalCost::Logistic(data[0].clone());
        let reg = RegularizerSpec::L2 { weight: 0.5 };
        let b = crate::problem::smoothness_bounds(&data, &reg).unwrap();
        let lp = LocalProblem { cost: &cost, regularizer: &reg, bounds: Some(&b) };
        let start = ModelVector::new(vec![0.3, -0.2, 0.1]);
        let v = ModelVector::new(vec![1.0, 0.0, -1.0]);
        let gd = LocalSolveConfig::new(SolverKind::gd(), 7, 1.0).unwrap();
        let noisy = LocalSolveConfig::new(
            SolverKind::NoisyGd { step: StepRule::Optimal, tau: 0.0, clip: None },
            7,
            1.0,
        )
        .unwrap();
        let mut rng = stream(1, Purpose::LocalSolver, 0, 0);
        assert_eq!(run_noisy_gd(&lp, &start, &v, &noisy, &mut rng).unwrap(), run_gd(&lp, &start, &v, &gd).unwrap());
    }

    #[test]
    fn sgd_rejects_oversized_batch() {
        let data = crate::problem::generate_logistic_data(5, 1, 2, 10).unwrap();
        let cost = LocalCost::Logistic(data[0].clone());
        let reg = RegularizerSpec::L2 { weight: 0.5 };
        let b = crate::problem::smoothness_bounds(&data, &reg).unwrap();
        let lp = LocalProblem { cost: &cost, regularizer: &reg, bounds: Some(&b) };
        let zero = ModelVector::zeros(2);
        let cfg = LocalSolveConfig::new(SolverKind::Sgd { step: StepRule::Optimal, batch: 11 }, 2, 1.0).unwrap();
        let mut rng = stream(1, Purpose::LocalSolver, 0, 0);
        assert!(run_sgd(&lp, &zero, &zero, &cfg, &mut rng).is_err());
    }

    #[test]
    fn exact_oracle_on_quadratic() {
        let cost = quad(3.0);
        let b = unit_bounds();
        let lp = LocalProblem { cost: &cost, regularizer: &NONE, bounds: Some(&b) };
        let v = ModelVector::new(vec![-1.0]);
        assert_abs_diff_eq!(exact_prox_oracle(&lp, &v, 1.0, 1e-12).unwrap()[0], 1.0, epsilon = 1e-12);
        let at_min = ModelVector::new(vec![3.0]);
        assert_eq!(exact_prox_oracle(&lp, &at_min, 1.0, 1e-12).unwrap(), at_min);
    }
}
