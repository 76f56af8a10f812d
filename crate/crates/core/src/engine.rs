//! Round engine.
//!
//! Each round the coordinator forms `y = prox_{rho h / N}(mean z)` from the
//! last `z` received from every agent, samples the active set, and every
//! active agent runs its local solver towards `prox_{rho f_i}(2y - z_i)`
//! starting from its previous `x_i`, then updates `z_i += 2(x_i - y)`.
//! Inactive agents keep `(x_i, z_i)` unchanged.

use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, FedError, Result};
use crate::harness::CostModel;
use crate::privacy::private_init;
use crate::problem::{global_gradient_norm_sq, ConvexityBounds, NonsmoothSpec, ProblemInstance};
use crate::rng::{stream, Purpose, StreamRng};
use crate::solvers::{solve, LocalProblem, LocalSolveConfig, SolverKind};
use crate::splitting::{consensus_prox, prox_h, reference_solution, ReferenceSolution};
use crate::vector::{stacked_distance, ModelVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: ModelVector,
    pub z: ModelVector,
}

impl AgentState {
    pub fn zeros(n: usize) -> Self {
        Self {
            x: ModelVector::zeros(n),
            z: ModelVector::zeros(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorState {
    /// Last broadcast consensus iterate.
    pub y: ModelVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ParticipationModel {
    Full,
    /// Independent activations with per-agent probabilities.
    Bernoulli(Vec<f64>),
    /// `m` agents drawn uniformly without replacement each round.
    UniformSubset(usize),
}

impl ParticipationModel {
    pub fn bernoulli_uniform(p: f64, agents: usize) -> Self {
        ParticipationModel::Bernoulli(vec![p; agents])
    }

    pub fn validate(&self, agents: usize) -> Result<()> {
        match self {
            ParticipationModel::Full => Ok(()),
            ParticipationModel::Bernoulli(p) => {
                if p.len() != agents {
                    return Err(invalid(format!(
                        "participation needs {agents} probabilities, got {}",
                        p.len()
                    )));
                }
                match p.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
                    Some(bad) => Err(invalid(format!("participation probability {bad} outside (0, 1]"))),
                    None => Ok(()),
                }
            }
            ParticipationModel::UniformSubset(m) => {
                if *m == 0 || *m > agents {
                    Err(invalid(format!("subset size must lie in 1..={agents}, got {m}")))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Smallest and largest activation probability.
    pub fn probability_range(&self, agents: usize) -> (f64, f64) {
        match self {
            ParticipationModel::Full => (1.0, 1.0),
            ParticipationModel::Bernoulli(p) => (
                p.iter().copied().fold(f64::INFINITY, f64::min),
                p.iter().copied().fold(0.0, f64::max),
            ),
            ParticipationModel::UniformSubset(m) => {
                let f = *m as f64 / agents as f64;
                (f, f)
            }
        }
    }

    /// Uniform subsets couple the activations of different agents, which the
    /// convergence analysis does not cover.
    pub fn within_analysis_assumptions(&self) -> bool {
        !matches!(self, ParticipationModel::UniformSubset(_))
    }

    /// Active agents for `round`, in increasing order.
    pub fn sample(&self, seed: u64, round: u64, agents: usize) -> Vec<usize> {
        match self {
            ParticipationModel::Full => (0..agents).collect(),
            ParticipationModel::Bernoulli(p) => (0..agents)
                .filter(|&i| {
                    if p[i] >= 1.0 {
                        return true;
                    }
                    let mut rng = stream(seed, Purpose::Participation, i as u64, round);
                    rng.random::<f64>() < p[i]
                })
                .collect(),
            ParticipationModel::UniformSubset(m) => {
                if *m >= agents {
                    return (0..agents).collect();
                }
                let mut rng = stream(seed, Purpose::Participation, u64::MAX, round);
                let mut picked = index::sample(&mut rng, agents, *m).into_vec();
                picked.sort_unstable();
                picked
            }
        }
    }
}

impl FromStr for ParticipationModel {
    type Err = FedError;

    /// `full`, `bernoulli:<p>` (same probability for every agent) or `subset:<m>`.
    /// The Bernoulli vector is sized later by [`ParticipationModel::resized`].
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "full" {
            return Ok(ParticipationModel::Full);
        }
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| invalid(format!("participation must be full, bernoulli:p or subset:m, got {s:?}")))?;
        match kind {
            "bernoulli" => {
                let p: f64 = arg.parse().map_err(|_| invalid(format!("bad probability {arg:?}")))?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(invalid(format!("participation probability {p} outside (0, 1]")));
                }
                Ok(ParticipationModel::Bernoulli(vec![p]))
            }
            "subset" => {
                let m: usize = arg.parse().map_err(|_| invalid(format!("bad subset size {arg:?}")))?;
                if m == 0 {
                    return Err(invalid("subset size must be at least 1"));
                }
                Ok(ParticipationModel::UniformSubset(m))
            }
            other => Err(invalid(format!("unknown participation kind {other:?}"))),
        }
    }
}

impl ParticipationModel {
    /// Broadcasts a single parsed Bernoulli probability to `agents` entries.
    pub fn resized(self, agents: usize) -> Self {
        match self {
            ParticipationModel::Bernoulli(p) if p.len() == 1 && agents != 1 => {
                ParticipationModel::Bernoulli(vec![p[0]; agents])
            }
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// `||sum_i grad f_i(y)||^2`
    GradNormSq,
    /// `||y - x_bar||` against the reference solution.
    ConsensusDistance,
    /// `||(x - x_bar, z - z_bar)||` over the stacked agent states.
    StateDistance,
}

impl MetricKind {
    /// Gradient norm for smooth problems, distance to the reference otherwise.
    pub fn default_for(p: &ProblemInstance) -> Self {
        if p.nonsmooth.is_zero() {
            MetricKind::GradNormSq
        } else {
            MetricKind::ConsensusDistance
        }
    }

    fn needs_reference(self) -> bool {
        !matches!(self, MetricKind::GradNormSq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitMode {
    Zero,
    /// `x_i ~ N(0, 2 tau^2 / lambda_lo I)`, `z_i = 0`.
    Private { tau: f64 },
    Given { agents: Vec<AgentState> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub rho: f64,
    pub solver: SolverKind,
    pub epochs: usize,
    pub participation: ParticipationModel,
    pub rounds: usize,
    pub seed: u64,
    pub init: InitMode,
    /// `None` picks [`MetricKind::default_for`].
    pub metric: Option<MetricKind>,
    pub cost: CostModel,
}

impl RunConfig {
    pub fn new(rho: f64, solver: SolverKind, epochs: usize, rounds: usize, seed: u64) -> Self {
        Self {
            rho,
            solver,
            epochs,
            participation: ParticipationModel::Full,
            rounds,
            seed,
            init: InitMode::Zero,
            metric: None,
            cost: CostModel::default(),
        }
    }

    pub fn with_participation(mut self, pm: ParticipationModel) -> Self {
        self.participation = pm;
        self
    }

    pub fn with_metric(mut self, metric: MetricKind) -> Self {
        self.metric = Some(metric);
        self
    }

    pub fn with_init(mut self, init: InitMode) -> Self {
        self.init = init;
        self
    }

    pub fn with_cost(mut self, cost: CostModel) -> Self {
        self.cost = cost;
        self
    }

    pub fn local_config(&self) -> Result<LocalSolveConfig> {
        LocalSolveConfig::new(self.solver, self.epochs, self.rho)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub k: usize,
    pub active: Vec<usize>,
    /// Consensus estimate `prox_{rho h / N}(mean z)` after the round.
    pub y: ModelVector,
    pub metric: f64,
    /// Cumulative simulated cost.
    pub elapsed_cost: f64,
}

/// `y = prox_{rho h / N}(mean z)`
pub fn coordinator_step(z_all: &[ModelVector], h: &NonsmoothSpec, rho: f64) -> Result<ModelVector> {
    consensus_prox(z_all, h, rho)
}

/// One active agent: `v = 2y - z`, local solve from `x`, `z += 2(x' - y)`.
pub fn agent_round(
    state: &AgentState,
    y: &ModelVector,
    lp: &LocalProblem<'_>,
    cfg: &LocalSolveConfig,
    rng: &mut StreamRng,
) -> Result<AgentState> {
    cfg.validate()?;
    check_dim(state.z.dim(), y.dim())?;
    let mut v = y.scaled(2.0);
    v.axpy(-1.0, &state.z);
    let x = solve(lp, &state.x, &v, cfg, rng)?;
    let mut z = state.z.clone();
    z.axpy(2.0, &x);
    z.axpy(-2.0, y);
    Ok(AgentState { x, z })
}

/// Executes round `round` in place and returns the active set.
///
/// Active agents are solved concurrently; each draws from its own random
/// stream keyed by `(seed, agent, round)`, so the result does not depend on
/// scheduling.
#[allow(clippy::too_many_arguments)]
pub fn fedplt_round(
    p: &ProblemInstance,
    bounds: Option<&ConvexityBounds>,
    agents: &mut [AgentState],
    coord: &mut CoordinatorState,
    pm: &ParticipationModel,
    cfg: &LocalSolveConfig,
    seed: u64,
    round: usize,
) -> Result<Vec<usize>> {
    let z_all: Vec<ModelVector> = agents.iter().map(|a| a.z.clone()).collect();
    let y = coordinator_step(&z_all, &p.nonsmooth, cfg.rho)?;
    let active = pm.sample(seed, round as u64, agents.len());

    let updates: Vec<Result<AgentState>> = active
        .par_iter()
        .map(|&i| {
            let lp = LocalProblem {
                cost: &p.agents[i],
                regularizer: &p.regularizer,
                bounds,
            };
            let mut rng = stream(seed, Purpose::LocalSolver, i as u64, round as u64);
            let next = agent_round(&agents[i], &y, &lp, cfg, &mut rng)?;
            if !(next.x.is_finite() && next.z.is_finite()) {
                return Err(FedError::NonFinite { round: round + 1, agent: i });
            }
            Ok(next)
        })
        .collect();
    let mut fresh = Vec::with_capacity(active.len());
    for u in updates {
        fresh.push(u?);
    }
    for (&i, next) in active.iter().zip(fresh) {
        agents[i] = next;
    }
    coord.y = y;
    Ok(active)
}

/// Stateful driver around [`fedplt_round`] that also tracks metrics and cost.
pub struct Engine<'a> {
    problem: &'a ProblemInstance,
    cfg: RunConfig,
    local: LocalSolveConfig,
    bounds: Option<ConvexityBounds>,
    metric: MetricKind,
    reference: Option<Arc<ReferenceSolution>>,
    agents: Vec<AgentState>,
    coord: CoordinatorState,
    round: usize,
    elapsed: f64,
}

impl<'a> Engine<'a> {
    pub fn new(problem: &'a ProblemInstance, cfg: RunConfig) -> Result<Self> {
        let local = cfg.local_config()?;
        let agents_n = problem.num_agents();
        cfg.participation.validate(agents_n)?;
        cfg.cost.validate()?;
        let bounds = problem.bounds;
        // resolve the step now so invalid configurations fail before round 0
        local.step_size(bounds.as_ref())?;
        let metric = cfg.metric.unwrap_or_else(|| MetricKind::default_for(problem));
        let reference = if metric.needs_reference() {
            Some(reference_solution(problem, cfg.rho)?)
        } else {
            None
        };
        let n = problem.n;
        let agents = match &cfg.init {
            InitMode::Zero => vec![AgentState::zeros(n); agents_n],
            InitMode::Private { tau } => {
                let b = bounds.ok_or(FedError::NonconvexBounds)?;
                (0..agents_n)
                    .map(|i| {
                        let mut rng = stream(cfg.seed, Purpose::Initialization, i as u64, 0);
                        Ok(AgentState {
                            x: private_init(n, tau * tau, b.lambda_lo, &mut rng)?,
                            z: ModelVector::zeros(n),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            InitMode::Given { agents } => {
                if agents.len() != agents_n {
                    return Err(invalid(format!("initial state needs {agents_n} agents, got {}", agents.len())));
                }
                for a in agents {
                    check_dim(n, a.x.dim())?;
                    check_dim(n, a.z.dim())?;
                }
                agents.clone()
            }
        };
        Ok(Self {
            problem,
            cfg,
            local,
            bounds,
            metric,
            reference,
            agents,
            coord: CoordinatorState {
                y: ModelVector::zeros(n),
            },
            round: 0,
            elapsed: 0.0,
        })
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn coordinator(&self) -> &CoordinatorState {
        &self.coord
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn metric_kind(&self) -> MetricKind {
        self.metric
    }

    pub fn reference(&self) -> Option<&ReferenceSolution> {
        self.reference.as_deref()
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Record describing the current state without advancing.
    pub fn snapshot(&self, active: Vec<usize>) -> Result<RoundRecord> {
        let z_all: Vec<ModelVector> = self.agents.iter().map(|a| a.z.clone()).collect();
        let y = coordinator_step(&z_all, &self.problem.nonsmooth, self.cfg.rho)?;
        let metric = self.evaluate(&y)?;
        Ok(RoundRecord {
            k: self.round,
            active,
            y,
            metric,
            elapsed_cost: self.elapsed,
        })
    }

    fn evaluate(&self, y: &ModelVector) -> Result<f64> {
        match self.metric {
            MetricKind::GradNormSq => global_gradient_norm_sq(y, self.problem),
            MetricKind::ConsensusDistance => Ok(y.distance(&self.reference.as_ref().expect("reference").x_star)),
            MetricKind::StateDistance => {
                let r = self.reference.as_ref().expect("reference");
                let x: Vec<ModelVector> = self.agents.iter().map(|a| a.x.clone()).collect();
                let z: Vec<ModelVector> = self.agents.iter().map(|a| a.z.clone()).collect();
                let dx = stacked_distance(&x, &r.x_blocks());
                let dz = stacked_distance(&z, &r.z_star);
                Ok(dx.hypot(dz))
            }
        }
    }

    pub fn step(&mut self) -> Result<RoundRecord> {
        let active = fedplt_round(
            self.problem,
            self.bounds.as_ref(),
            &mut self.agents,
            &mut self.coord,
            &self.cfg.participation,
            &self.local,
            self.cfg.seed,
            self.round,
        )?;
        self.round += 1;
        self.elapsed += self.cfg.cost.cost_per_round(self.cfg.epochs, active.len());
        self.snapshot(active)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub metric: MetricKind,
    pub solver: String,
    pub local_step: f64,
    pub p_lo: f64,
    pub p_hi: f64,
    /// Set when the participation model is not covered by the convergence analysis.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// The initial state (`k = 0`) followed by one record per round.
    pub records: Vec<RoundRecord>,
    pub agents: Vec<AgentState>,
    pub metadata: RunMetadata,
}

impl RunOutput {
    pub fn final_y(&self) -> &ModelVector {
        &self.records.last().expect("at least the initial record").y
    }
}

pub const SUBSET_NOTE: &str = "uniform subset sampling: outside the independent-activation assumptions";

pub fn run(p: &ProblemInstance, cfg: &RunConfig) -> Result<RunOutput> {
    run_until(p, cfg, None)
}

/// Like [`run`], but stops after the first record whose metric is at most `stop_below`.
pub fn run_until(p: &ProblemInstance, cfg: &RunConfig, stop_below: Option<f64>) -> Result<RunOutput> {
    if cfg.rounds == 0 {
        return Err(invalid("rounds must be at least 1"));
    }
    let mut engine = Engine::new(p, cfg.clone())?;
    let mut records = Vec::with_capacity(cfg.rounds + 1);
    records.push(engine.snapshot(Vec::new())?);
    let done = |r: &RoundRecord| stop_below.is_some_and(|t| r.metric <= t);
    while records.len() <= cfg.rounds && !done(records.last().expect("initial record")) {
        records.push(engine.step()?);
    }
    let (p_lo, p_hi) = cfg.participation.probability_range(p.num_agents());
    let metadata = RunMetadata {
        metric: engine.metric,
        solver: cfg.solver.name().to_string(),
        local_step: engine.local.step_size(engine.bounds.as_ref())?,
        p_lo,
        p_hi,
        note: (!cfg.participation.within_analysis_assumptions()).then(|| SUBSET_NOTE.to_string()),
    };
    Ok(RunOutput {
        records,
        agents: engine.agents,
        metadata,
    })
}

/// One JSON object per line.
pub fn write_trajectory<W: Write>(records: &[RoundRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| FedError::Format(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_trajectory<R: BufRead>(r: R) -> Result<Vec<RoundRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FedError::Format(e.to_string()))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedAvgConfig {
    /// Local gradient step on `f_i` alone.
    pub step: f64,
    pub epochs: usize,
    pub rounds: usize,
    pub metric: MetricKind,
    /// Penalty used for the reference solution when the metric needs one.
    pub rho: f64,
    pub cost: CostModel,
}

impl FedAvgConfig {
    /// Step `1 / lambda_hi`.
    pub fn new(p: &ProblemInstance, epochs: usize, rounds: usize) -> Result<Self> {
        let b = p.require_bounds()?;
        Ok(Self {
            step: 1.0 / b.lambda_hi,
            epochs,
            rounds,
            metric: MetricKind::default_for(p),
            rho: 1.0,
            cost: CostModel::default(),
        })
    }
}

/// Plain local-GD averaging: every agent starts from the broadcast average,
/// runs `epochs` gradient steps on its own cost, and the coordinator averages
/// (then applies `prox_{step h}`). Exhibits client drift on heterogeneous costs.
pub fn fedavg_baseline(p: &ProblemInstance, cfg: &FedAvgConfig) -> Result<Vec<RoundRecord>> {
    if cfg.epochs == 0 || cfg.rounds == 0 {
        return Err(invalid("epochs and rounds must be at least 1"));
    }
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(invalid(format!("step size must be positive, got {}", cfg.step)));
    }
    cfg.cost.validate()?;
    let reference = match cfg.metric {
        MetricKind::GradNormSq => None,
        _ => Some(reference_solution(p, cfg.rho)?),
    };
    let agents = p.num_agents();
    let evaluate = |x_bar: &ModelVector, locals: &[ModelVector]| -> Result<f64> {
        match cfg.metric {
            MetricKind::GradNormSq => global_gradient_norm_sq(x_bar, p),
            MetricKind::ConsensusDistance => Ok(x_bar.distance(&reference.as_ref().expect("reference").x_star)),
            MetricKind::StateDistance => {
                Ok(stacked_distance(locals, &reference.as_ref().expect("reference").x_blocks()))
            }
        }
    };
    let mut x_bar = ModelVector::zeros(p.n);
    let mut locals = vec![x_bar.clone(); agents];
    let mut elapsed = 0.0;
    let mut records = vec![RoundRecord {
        k: 0,
        active: Vec::new(),
        y: x_bar.clone(),
        metric: evaluate(&x_bar, &locals)?,
        elapsed_cost: 0.0,
    }];
    for k in 1..=cfg.rounds {
        locals = (0..agents)
            .into_par_iter()
            .map(|i| {
                let mut w = x_bar.clone();
                for _ in 0..cfg.epochs {
                    let g = p.local_gradient(i, &w);
                    w.axpy(-cfg.step, &g);
                }
                if w.is_finite() {
                    Ok(w)
                } else {
                    Err(FedError::NonFinite { round: k, agent: i })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = ModelVector::mean(&locals).expect("at least one agent");
        x_bar = prox_h(&p.nonsmooth, &mean, cfg.step);
        elapsed += cfg.cost.cost_per_round(cfg.epochs, agents);
        records.push(RoundRecord {
            k,
            active: (0..agents).collect(),
            y: x_bar.clone(),
            metric: evaluate(&x_bar, &locals)?,
            elapsed_cost: elapsed,
        });
    }
    Ok(records)
}
