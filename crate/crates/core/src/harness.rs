//! Simulated cost accounting, Monte-Carlo aggregation, sweeps and tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FedError, Result};
use crate::engine::{run_until, ParticipationModel, RoundRecord, RunConfig};
use crate::problem::{logistic_instance, NonsmoothSpec, ProblemInstance, RegularizerSpec};
use crate::solvers::{SolverKind, StepRule};

pub const DESK_AGENTS: usize = 10;
pub const DESK_DIM: usize = 5;
pub const DESK_PER_AGENT: usize = 50;
pub const DESK_REG_WEIGHT: f64 = 0.5;
pub const DESK_THRESHOLD: f64 = 1e-5;
pub const DESK_SEEDS: usize = 20;

pub const FULL_AGENTS: usize = 100;
pub const FULL_PER_AGENT: usize = 250;
pub const FULL_SEEDS: usize = 100;

/// Fraction of the trailing rounds averaged into the asymptotic error.
pub const ASYMPTOTIC_TAIL: f64 = 0.1;

/// The desk-scale convex logistic-regression instance.
pub fn desk_instance(seed: u64, nonsmooth: NonsmoothSpec) -> Result<ProblemInstance> {
    logistic_instance(
        seed,
        DESK_AGENTS,
        DESK_DIM,
        DESK_PER_AGENT,
        RegularizerSpec::L2 { weight: DESK_REG_WEIGHT },
        nonsmooth,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Time per local gradient evaluation.
    pub t_g: f64,
    /// Time per agent-coordinator exchange.
    pub t_c: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { t_g: 1.0, t_c: 10.0 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_g >= 0.0 && self.t_c >= 0.0 && self.t_g.is_finite() && self.t_c.is_finite()) {
            return Err(invalid("cost model times must be finite and nonnegative"));
        }
        Ok(())
    }

    /// `(Ne t_G + t_C) * active`
    pub fn cost_per_round(&self, epochs: usize, active: usize) -> f64 {
        (epochs as f64 * self.t_g + self.t_c) * active as f64
    }
}

/// Cumulative cost at the first record whose metric is at most `threshold`.
pub fn time_to_threshold(traj: &[RoundRecord], threshold: f64) -> Option<f64> {
    traj.iter().find(|r| r.metric <= threshold).map(|r| r.elapsed_cost)
}

pub fn rounds_to_threshold(traj: &[RoundRecord], threshold: f64) -> Option<usize> {
    traj.iter().find(|r| r.metric <= threshold).map(|r| r.k)
}

/// Mean metric over the last 10% of the rounds (at least one), excluding the initial record.
pub fn asymptotic_error(traj: &[RoundRecord]) -> Option<f64> {
    let rounds: Vec<&RoundRecord> = traj.iter().filter(|r| r.k > 0).collect();
    if rounds.is_empty() {
        return None;
    }
    let tail = ((rounds.len() as f64 * ASYMPTOTIC_TAIL).ceil() as usize).max(1);
    let slice = &rounds[rounds.len() - tail..];
    Some(slice.iter().map(|r| r.metric).sum::<f64>() / slice.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    TimeToThreshold,
    AsymptoticError,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Measure::TimeToThreshold => "time_to_threshold",
            Measure::AsymptoticError => "asymptotic_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub axis: String,
    pub value: f64,
    pub measure: Measure,
    /// `None` when some seed never reached the threshold.
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Mean rounds to threshold over the seeds that reached it.
    pub mean_rounds: Option<f64>,
    pub reached: usize,
    pub n_seeds: usize,
}

/// Per-seed measurements behind a [`TableRow`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub value: Option<f64>,
    pub rounds: Option<usize>,
}

pub fn measure_run(traj: &[RoundRecord], measure: Measure, threshold: f64) -> (Option<f64>, Option<usize>) {
    match measure {
        Measure::TimeToThreshold => (time_to_threshold(traj, threshold), rounds_to_threshold(traj, threshold)),
        Measure::AsymptoticError => (asymptotic_error(traj), rounds_to_threshold(traj, threshold)),
    }
}

/// Runs `cfg` with seeds `cfg.seed + i` for `i < seeds`.
pub fn monte_carlo_outcomes(
    p: &ProblemInstance,
    cfg: &RunConfig,
    seeds: usize,
    measure: Measure,
    threshold: f64,
) -> Result<Vec<SeedOutcome>> {
    if seeds == 0 {
        return Err(invalid("need at least one seed"));
    }
    (0..seeds as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i);
            let stop = (measure == Measure::TimeToThreshold).then_some(threshold);
            let out = run_until(p, &c, stop)?;
            let (value, rounds) = measure_run(&out.records, measure, threshold);
            Ok(SeedOutcome {
                seed: c.seed,
                value,
                rounds,
            })
        })
        .collect()
}

/// Aggregates per-seed outcomes in seed order.
pub fn aggregate(axis: &str, value: f64, measure: Measure, outcomes: &[SeedOutcome]) -> TableRow {
    let values: Vec<f64> = outcomes.iter().filter_map(|o| o.value).collect();
    let rounds: Vec<usize> = outcomes.iter().filter_map(|o| o.rounds).collect();
    let all = values.len() == outcomes.len() && !values.is_empty();
    TableRow {
        axis: axis.to_string(),
        value,
        measure,
        mean: all.then(|| values.iter().sum::<f64>() / values.len() as f64),
        min: all.then(|| values.iter().copied().fold(f64::INFINITY, f64::min)),
        max: all.then(|| values.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        mean_rounds: (!rounds.is_empty()).then(|| rounds.iter().sum::<usize>() as f64 / rounds.len() as f64),
        reached: match measure {
            Measure::TimeToThreshold => values.len(),
            Measure::AsymptoticError => rounds.len(),
        },
        n_seeds: outcomes.len(),
    }
}

pub fn monte_carlo(p: &ProblemInstance, cfg: &RunConfig, seeds: usize, measure: Measure, threshold: f64) -> Result<TableRow> {
    let outcomes = monte_carlo_outcomes(p, cfg, seeds, measure, threshold)?;
    Ok(aggregate("base", 0.0, measure, &outcomes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Ne,
    Rho,
    Tau,
    ParticipationFraction,
    TC,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Ne => "ne",
            SweepAxis::Rho => "rho",
            SweepAxis::Tau => "tau",
            SweepAxis::ParticipationFraction => "participation",
            SweepAxis::TC => "tc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ne" => Ok(SweepAxis::Ne),
            "rho" => Ok(SweepAxis::Rho),
            "tau" => Ok(SweepAxis::Tau),
            "participation" => Ok(SweepAxis::ParticipationFraction),
            "tc" => Ok(SweepAxis::TC),
            other => Err(invalid(format!("unknown sweep axis {other:?}"))),
        }
    }

    /// `base` with this axis set to `value`. Changing rho re-resolves the
    /// local step to the rate-optimal one for the new penalty.
    pub fn apply(self, base: &RunConfig, value: f64, agents: usize) -> Result<RunConfig> {
        let mut c = base.clone();
        match self {
            SweepAxis::Ne => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(invalid(format!("epoch count must be a positive integer, got {value}")));
                }
                c.epochs = value as usize;
            }
            SweepAxis::Rho => {
                if !(value > 0.0) {
                    return Err(invalid(format!("rho must be positive, got {value}")));
                }
                c.rho = value;
                c.solver = c.solver.with_step(StepRule::Optimal);
            }
            SweepAxis::Tau => match c.solver {
                SolverKind::NoisyGd { step, clip, .. } => c.solver = SolverKind::NoisyGd { step, tau: value, clip },
                _ => return Err(invalid("the tau axis needs the noisy gradient solver")),
            },
            SweepAxis::ParticipationFraction => {
                if !(value > 0.0 && value <= 1.0) {
                    return Err(invalid(format!("participation fraction {value} outside (0, 1]")));
                }
                c.participation = if value == 1.0 {
                    ParticipationModel::Full
                } else {
                    ParticipationModel::bernoulli_uniform(value, agents)
                };
            }
            SweepAxis::TC => c.cost.t_c = value,
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub base: RunConfig,
}

pub fn sweep(p: &ProblemInstance, spec: &SweepSpec, seeds: usize, measure: Measure, threshold: f64) -> Result<Vec<TableRow>> {
    if spec.values.is_empty() {
        return Err(invalid("sweep needs at least one value"));
    }
    spec.values
        .iter()
        .map(|&v| {
            let cfg = spec.axis.apply(&spec.base, v, p.num_agents())?;
            let outcomes = monte_carlo_outcomes(p, &cfg, seeds, measure, threshold)?;
            Ok(aggregate(spec.axis.name(), v, measure, &outcomes))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Json,
}

/// Rounds to 6 significant digits.
pub fn round_sig(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

const COLUMNS: [&str; 9] = ["axis", "value", "measure", "mean", "min", "max", "mean_rounds", "reached", "n_seeds"];
const NOT_REACHED: &str = "not_reached";

fn rounded(row: &TableRow) -> TableRow {
    TableRow {
        value: round_sig(row.value),
        mean: row.mean.map(round_sig),
        min: row.min.map(round_sig),
        max: row.max.map(round_sig),
        mean_rounds: row.mean_rounds.map(round_sig),
        ..row.clone()
    }
}

pub fn emit_table(rows: &[TableRow], format: TableFormat) -> Result<String> {
    let rows: Vec<TableRow> = rows.iter().map(rounded).collect();
    match format {
        TableFormat::Json => serde_json::to_string_pretty(&rows).map_err(|e| FedError::Format(e.to_string())),
        TableFormat::Csv => {
            let opt = |v: Option<f64>| v.map_or_else(|| NOT_REACHED.to_string(), |x| x.to_string());
            let mut w = csv::Writer::from_writer(Vec::new());
            let err = |e: csv::Error| FedError::Format(e.to_string());
            w.write_record(COLUMNS).map_err(err)?;
            for r in &rows {
                w.write_record([
                    r.axis.clone(),
                    r.value.to_string(),
                    r.measure.name().to_string(),
                    opt(r.mean),
                    opt(r.min),
                    opt(r.max),
                    opt(r.mean_rounds),
                    r.reached.to_string(),
                    r.n_seeds.to_string(),
                ])
                .map_err(err)?;
            }
            let bytes = w.into_inner().map_err(|e| FedError::Format(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| FedError::Format(e.to_string()))
        }
    }
}

pub fn parse_table(text: &str, format: TableFormat) -> Result<Vec<TableRow>> {
    let bad = |msg: String| FedError::Format(msg);
    match format {
        TableFormat::Json => serde_json::from_str(text).map_err(|e| bad(e.to_string())),
        TableFormat::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
            if header.iter().ne(COLUMNS) {
                return Err(bad("unexpected table header".into()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            let opt = |s: &str| if s == NOT_REACHED { Ok(None) } else { num(s).map(Some) };
            let mut rows = Vec::new();
            for rec in r.records() {
                let rec = rec.map_err(|e| bad(e.to_string()))?;
                let measure = match &rec[2] {
                    "time_to_threshold" => Measure::TimeToThreshold,
                    "asymptotic_error" => Measure::AsymptoticError,
                    other => return Err(bad(format!("unknown measure {other:?}"))),
                };
                rows.push(TableRow {
                    axis: rec[0].to_string(),
                    value: num(&rec[1])?,
                    measure,
                    mean: opt(&rec[3])?,
                    min: opt(&rec[4])?,
                    max: opt(&rec[5])?,
                    mean_rounds: opt(&rec[6])?,
                    reached: rec[7].parse().map_err(|_| bad("bad reached count".into()))?,
                    n_seeds: rec[8].parse().map_err(|_| bad("bad seed count".into()))?,
                });
            }
            Ok(rows)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::ModelVector;

    fn record(k: usize, metric: f64, cost: f64) -> RoundRecord {
        RoundRecord {
            k,
            active: Vec::new(),
            y: ModelVector::zeros(1),
            metric,
            elapsed_cost: cost,
        }
    }

    #[test]
    fn cost_examples() {
        assert_eq!(CostModel { t_g: 1.0, t_c: 10.0 }.cost_per_round(5, 100), 1500.0);
        assert_eq!(CostModel { t_g: 0.0, t_c: 0.0 }.cost_per_round(5, 100), 0.0);
        assert_eq!(CostModel { t_g: 1.0, t_c: 0.1 }.cost_per_round(1, 10), 11.0);
        assert!(CostModel { t_g: -1.0, t_c: 0.0 }.validate().is_err());
    }

    #[test]
    fn threshold_examples() {
        let at_start = vec![record(0, 1e-9, 0.0), record(1, 1e-10, 15.0)];
        assert_eq!(time_to_threshold(&at_start, 1e-5), Some(0.0));
        let traj: Vec<RoundRecord> = (0..6).map(|k| record(k, 10f64.powi(-(2 * k as i32)), 15.0 * k as f64)).collect();
        assert_eq!(time_to_threshold(&traj, 1e-5), Some(45.0));
        assert_eq!(rounds_to_threshold(&traj, 1e-5), Some(3));
        let flat: Vec<RoundRecord> = (0..4).map(|k| record(k, 1.0, k as f64)).collect();
        assert_eq!(time_to_threshold(&flat, 1e-5), None);
    }

    #[test]
    fn asymptotic_error_uses_the_tail() {
        let traj: Vec<RoundRecord> = (0..=20).map(|k| record(k, if k > 18 { 2.0 } else { 100.0 }, 0.0)).collect();
        assert_eq!(asymptotic_error(&traj), Some(2.0));
        assert_eq!(asymptotic_error(&traj[..1]), None);
    }

    #[test]
    fn aggregation_envelope() {
        let outcomes: Vec<SeedOutcome> = [3.0, 1.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, v)| SeedOutcome {
                seed: i as u64,
                value: Some(*v),
                rounds: Some(i),
            })
            .collect();
        let row = aggregate("ne", 5.0, Measure::TimeToThreshold, &outcomes);
        assert_eq!((row.mean, row.min, row.max), (Some(2.0), Some(1.0), Some(3.0)));
        assert_eq!(row.reached, 3);
        let single = aggregate("ne", 5.0, Measure::TimeToThreshold, &outcomes[..1]);
        assert_eq!(single.mean, Some(3.0));
        assert_eq!(single.min, single.max);
        let missing = [SeedOutcome {
            seed: 0,
            value: None,
            rounds: None,
        }];
        let row = aggregate("ne", 5.0, Measure::TimeToThreshold, &missing);
        assert_eq!((row.mean, row.reached), (None, 0));
    }

    fn sample_rows() -> Vec<TableRow> {
        vec![
            TableRow {
                axis: "rho".into(),
                value: 0.1,
                measure: Measure::TimeToThreshold,
                mean: Some(1234.56789),
                min: Some(1000.0),
                max: Some(1500.123456),
                mean_rounds: Some(12.25),
                reached: 20,
                n_seeds: 20,
            },
            TableRow {
                axis: "rho".into(),
                value: 10.0,
                measure: Measure::TimeToThreshold,
                mean: None,
                min: None,
                max: None,
                mean_rounds: None,
                reached: 0,
                n_seeds: 20,
            },
        ]
    }

    #[test]
    fn tables_roundtrip() {
        let rows = sample_rows();
        for fmt in [TableFormat::Csv, TableFormat::Json] {
            let text = emit_table(&rows, fmt).unwrap();
            let back = parse_table(&text, fmt).unwrap();
            assert_eq!(back, rows.iter().map(rounded).collect::<Vec<_>>());
            assert_eq!(back[0].mean, Some(1234.57));
        }
        assert_eq!(emit_table(&[], TableFormat::Csv).unwrap().lines().count(), 1);
        assert_eq!(emit_table(&rows[..1], TableFormat::Csv).unwrap().lines().count(), 2);
    }

    #[test]
    fn axis_parsing() {
        assert_eq!(SweepAxis::parse("tc").unwrap(), SweepAxis::TC);
        assert!(SweepAxis::parse("gamma").is_err());
    }
}
