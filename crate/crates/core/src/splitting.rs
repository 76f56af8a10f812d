//! Proximal and reflected operators, the consensus proximal computed by the
//! coordinator, and a centralized Peaceman-Rachford solver that provides the
//! reference fixed point `(x_bar, z_bar)` for everything else.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{invalid, FedError, Result};
use crate::problem::{ConvexityBounds, LocalCost, NonsmoothSpec, ProblemInstance, RegularizerSpec};
use crate::vector::ModelVector;

/// Proximal penalty `rho > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxPenalty(f64);

impl ProxPenalty {
    pub fn new(rho: f64) -> Result<Self> {
        if rho > 0.0 && rho.is_finite() {
            Ok(Self(rho))
        } else {
            Err(invalid(format!("proximal penalty must be positive, got {rho}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

pub fn soft_threshold(v: f64, threshold: f64) -> f64 {
    if v > threshold {
        v - threshold
    } else if v < -threshold {
        v + threshold
    } else {
        0.0
    }
}

/// `argmin_x h(x) + ||x - v||^2 / (2 penalty)`
pub fn prox_h(h: &NonsmoothSpec, v: &ModelVector, penalty: f64) -> ModelVector {
    debug_assert!(penalty > 0.0);
    match *h {
        NonsmoothSpec::Zero => v.clone(),
        NonsmoothSpec::L1 { weight } => v.map(|x| soft_threshold(x, penalty * weight)),
    }
}

/// `2 prox_h(v) - v`
pub fn reflect_h(h: &NonsmoothSpec, v: &ModelVector, penalty: f64) -> ModelVector {
    let mut out = prox_h(h, v, penalty);
    out.scale(2.0);
    out.axpy(-1.0, v);
    out
}

/// Consensus block of `prox_{rho g}` for `g = indicator(consensus) + h(x_1)`:
/// the prox of `h` with penalty `rho / N` at the mean of the `z_i`.
pub fn consensus_prox(z_all: &[ModelVector], h: &NonsmoothSpec, rho: f64) -> Result<ModelVector> {
    let n_agents = z_all.len();
    let mean = ModelVector::mean(z_all).ok_or_else(|| invalid("consensus prox needs N >= 1"))?;
    Ok(prox_h(h, &mean, rho / n_agents as f64))
}

/// Contraction factor of the Peaceman-Rachford operator.
pub fn prs_rate(rho: f64, b: &ConvexityBounds) -> f64 {
    let term = |l: f64| ((1.0 - rho * l) / (1.0 + rho * l)).abs();
    term(b.lambda_hi).max(term(b.lambda_lo))
}

pub const DEFAULT_INNER_TOLERANCE: f64 = 1e-12;
const INNER_MAX_ITER: usize = 2_000_000;

/// Gradient descent on `f_i(x) + ||x - v||^2 / (2 rho)` from `start` until
/// the gradient norm drops below `tolerance`, using the step
/// `2 / (lambda_lo + lambda_hi + 2 / rho)`.
fn inner_prox(
    cost: &LocalCost,
    r: &RegularizerSpec,
    bounds: &ConvexityBounds,
    v: &ModelVector,
    rho: f64,
    start: ModelVector,
    tolerance: f64,
) -> Result<ModelVector> {
    let step = 2.0 / (bounds.lambda_lo + bounds.lambda_hi + 2.0 / rho);
    let mut w = start;
    for _ in 0..INNER_MAX_ITER {
        let mut g = cost.gradient(&w, r);
        g.axpy(1.0 / rho, &w);
        g.axpy(-1.0 / rho, v);
        if g.norm() <= tolerance {
            return Ok(w);
        }
        w.axpy(-step, &g);
        if !w.is_finite() {
            return Err(invalid("inner proximal solve produced a non-finite iterate"));
        }
    }
    Err(FedError::NoConvergence {
        tolerance,
        iterations: INNER_MAX_ITER,
    })
}

/// Stacked PRS state `(x, y, z)`; `y` is the consensus block.
#[derive(Debug, Clone, PartialEq)]
pub struct PrsState {
    pub x: Vec<ModelVector>,
    pub y: ModelVector,
    pub z: Vec<ModelVector>,
}

/// Centralized Peaceman-Rachford iteration
///
/// ```text
/// y+ = prox_{rho g}(z)
/// x+ = prox_{rho f}(2 y+ - z)
/// z+ = z + 2 (x+ - y+)
/// ```
pub struct PrsIteration<'a> {
    problem: &'a ProblemInstance,
    bounds: ConvexityBounds,
    rho: f64,
    inner_tolerance: f64,
    state: PrsState,
    iteration: usize,
}

impl<'a> PrsIteration<'a> {
    pub fn new(problem: &'a ProblemInstance, rho: f64, inner_tolerance: f64) -> Result<Self> {
        let n = problem.n;
        let agents = problem.num_agents();
        Self::with_state(
            problem,
            rho,
            inner_tolerance,
            PrsState {
                x: vec![ModelVector::zeros(n); agents],
                y: ModelVector::zeros(n),
                z: vec![ModelVector::zeros(n); agents],
            },
        )
    }

    pub fn with_state(
        problem: &'a ProblemInstance,
        rho: f64,
        inner_tolerance: f64,
        state: PrsState,
    ) -> Result<Self> {
        ProxPenalty::new(rho)?;
        let bounds = problem.require_bounds()?;
        if !(inner_tolerance > 0.0) {
            return Err(invalid("inner tolerance must be positive"));
        }
        if state.z.len() != problem.num_agents() || state.x.len() != problem.num_agents() {
            return Err(invalid("PRS state must hold one block per agent"));
        }
        Ok(Self {
            problem,
            bounds,
            rho,
            inner_tolerance,
            state,
            iteration: 0,
        })
    }

    pub fn state(&self) -> &PrsState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self) -> Result<()> {
        let p = self.problem;
        let y = consensus_prox(&self.state.z, &p.nonsmooth, self.rho)?;
        for i in 0..p.num_agents() {
            let mut v = y.scaled(2.0);
            v.axpy(-1.0, &self.state.z[i]);
            let start = self.state.x[i].clone();
            let x = inner_prox(
                &p.agents[i],
                &p.regularizer,
                &self.bounds,
                &v,
                self.rho,
                start,
                self.inner_tolerance,
            )?;
            let z = &mut self.state.z[i];
            z.axpy(2.0, &x);
            z.axpy(-2.0, &y);
            if !z.is_finite() {
                return Err(FedError::NonFinite {
                    round: self.iteration + 1,
                    agent: i,
                });
            }
            self.state.x[i] = x;
        }
        self.state.y = y;
        self.iteration += 1;
        Ok(())
    }
}

/// Fixed point of the centralized PRS.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    /// Consensus solution `x_bar`.
    pub x_star: ModelVector,
    /// Per-agent auxiliary fixed point `z_bar_i`.
    pub z_star: Vec<ModelVector>,
    pub rho: f64,
    pub iterations: usize,
}

impl ReferenceSolution {
    /// `x_bar` repeated once per agent.
    pub fn x_blocks(&self) -> Vec<ModelVector> {
        vec![self.x_star.clone(); self.z_star.len()]
    }
}

/// Runs up to `iterations` PRS steps from zero; stops early once `z` no
/// longer changes in floating point.
pub fn prs_reference_solve(
    p: &ProblemInstance,
    rho: f64,
    iterations: usize,
    inner_tolerance: f64,
) -> Result<ReferenceSolution> {
    let mut prs = PrsIteration::new(p, rho, inner_tolerance)?;
    for _ in 0..iterations {
        let before = prs.state().z.clone();
        prs.step()?;
        if prs.state().z == before {
            break;
        }
    }
    let iterations = prs.iteration();
    // the consensus block of y at the fixed point is prox_{rho g}(z_bar)
    let x_star = consensus_prox(&prs.state().z, &p.nonsmooth, rho)?;
    Ok(ReferenceSolution {
        x_star,
        z_star: prs.state.z,
        rho,
        iterations,
    })
}

pub const REFERENCE_ITERATIONS: usize = 2_000;

type CacheKey = (u64, u64);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<ReferenceSolution>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<ReferenceSolution>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Reference solution memoized on `(instance hash, rho)` with the default
/// iteration budget and inner tolerance.
pub fn reference_solution(p: &ProblemInstance, rho: f64) -> Result<Arc<ReferenceSolution>> {
    let key = (p.content_hash(), rho.to_bits());
    if let Some(hit) = cache().lock().expect("reference cache poisoned").get(&key) {
        return Ok(Arc::clone(hit));
    }
    let sol = Arc::new(prs_reference_solve(
        p,
        rho,
        REFERENCE_ITERATIONS,
        DEFAULT_INNER_TOLERANCE,
    )?);
    cache()
        .lock()
        .expect("reference cache poisoned")
        .insert(key, Arc::clone(&sol));
    Ok(sol)
}

/// Distance from zero to `sum_i grad f_i(x) + dh(x)`, measured with the
/// subgradient of `h` closest to cancelling the smooth part.
pub fn composite_optimality_residual(p: &ProblemInstance, x: &ModelVector) -> f64 {
    let mut g = ModelVector::zeros(p.n);
    for i in 0..p.num_agents() {
        g.axpy(1.0, &p.local_gradient(i, x));
    }
    match p.nonsmooth {
        NonsmoothSpec::Zero => g.norm(),
        NonsmoothSpec::L1 { weight } => g
            .iter()
            .zip(x.iter())
            .map(|(&gj, &xj)| {
                let r = if xj > 0.0 {
                    gj + weight
                } else if xj < 0.0 {
                    gj - weight
                } else {
                    (gj.abs() - weight).max(0.0)
                };
                r * r
            })
            .sum::<f64>()
            .sqrt(),
    }
}
