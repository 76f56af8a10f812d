use std::fs;
use std::path::Path;

use anyhow::Context;
use fedplt::engine::{run_until, write_trajectory};
use fedplt::harness::{emit_table, rounds_to_threshold, sweep as harness_sweep, time_to_threshold, Measure, SweepAxis, SweepSpec, TableFormat};
use fedplt::io::{load_instance, save_instance};
use fedplt::privacy::{privacy_report, PrivacyParams};
use fedplt::problem::logistic_instance;
use fedplt::rates::{evaluate_grid, tune_grid, tuning_table_csv, TuneGrid, TuneSolver};
use fedplt::{
    CostModel, InitMode, MetricKind, NonsmoothSpec, ParticipationModel, ProblemInstance, RegularizerSpec, RunConfig,
    SolverKind, StepRule,
};
use serde_json::json;

use crate::manifest::{emit, RunManifest};
use crate::{
    usage, AlgoArgs, FormatChoice, GenerateArgs, MeasureChoice, MetricChoice, PrivacyArgs, RegChoice, RunArgs,
    SolverChoice, SweepArgs, TuneArgs, TuneSolverChoice,
};

pub const INSTANCE_FILE: &str = "instance.fedplt";
pub const TUNING_FILE: &str = "tuning.csv";
pub const BEST_FILE: &str = "best.json";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const FINAL_FILE: &str = "final.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PRIVACY_FILE: &str = "privacy.json";

fn prepare_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load(path: &Path) -> anyhow::Result<ProblemInstance> {
    load_instance(path).with_context(|| format!("reading {}", path.display()))
}

pub fn generate(a: &GenerateArgs) -> anyhow::Result<()> {
    if a.agents == 0 || a.dim == 0 || a.per_agent == 0 {
        return Err(usage("--agents, --dim and --per-agent must be positive"));
    }
    if !(a.reg_weight >= 0.0) || !(a.l1 >= 0.0) {
        return Err(usage("--reg-weight and --l1 must be nonnegative"));
    }
    let reg = match a.reg {
        RegChoice::L2 => RegularizerSpec::L2 { weight: a.reg_weight },
        RegChoice::Nonconvex => RegularizerSpec::NonconvexRational { weight: a.reg_weight },
    };
    let ns = if a.l1 > 0.0 {
        NonsmoothSpec::L1 { weight: a.l1 }
    } else {
        NonsmoothSpec::Zero
    };
    let p = logistic_instance(a.seed, a.agents, a.dim, a.per_agent, reg, ns)?;
    prepare_dir(&a.out)?;
    let mut m = RunManifest::new("generate", a)?;
    m.seed = Some(a.seed);
    let path = a.out.join(INSTANCE_FILE);
    save_instance(&p, &path)?;
    m.outputs.push(path.clone());
    m.resolved = json!({
        "content_hash": format!("{:016x}", p.content_hash()),
        "bounds": p.bounds,
    });
    m.write(&a.out)?;
    println!("{}", path.display());
    Ok(())
}

pub fn tune(a: &TuneArgs) -> anyhow::Result<()> {
    let p = load(&a.dataset)?;
    let b = p.require_bounds()?;
    let grid = TuneGrid {
        rho_values: a.rho_grid.clone(),
        gamma_values: a.gamma_grid.clone(),
        gamma_relative: !a.gamma_absolute,
        epoch_values: a.ne_grid.clone(),
        p_lo: a.p_lo,
        p_hi: a.p_hi.unwrap_or(a.p_lo),
        nu: a.nu,
    };
    let solver = match a.solver {
        TuneSolverChoice::Gd => TuneSolver::Gd,
        TuneSolverChoice::Agd => TuneSolver::Agd,
        TuneSolverChoice::Exact => TuneSolver::Exact,
    };
    let rows = evaluate_grid(&grid, &b, solver)?;
    prepare_dir(&a.out)?;
    let mut m = RunManifest::new("tune", a)?;
    m.inputs.push(a.dataset.clone());
    let table = tuning_table_csv(&rows)?;
    emit(&mut m, &a.out, TUNING_FILE, table.as_bytes())?;
    print!("{table}");
    let outcome = tune_grid(&grid, &b, solver);
    m.resolved = json!({ "bounds": b, "grid": grid, "stable_rows": rows.iter().filter(|r| r.stable).count() });
    match outcome {
        Ok(o) => {
            emit(&mut m, &a.out, BEST_FILE, serde_json::to_string_pretty(&o.best)?.as_bytes())?;
            m.write(&a.out)?;
            let gamma = o.best.gamma.map_or_else(|| "-".to_string(), |g| format!("{g:.6}"));
            println!(
                "best: rho {} gamma {gamma} ne {} spectral norm {:.6} spectral radius {:.6}",
                o.best.rho, o.best.epochs, o.best.spectral_norm, o.best.spectral_radius
            );
            Ok(())
        }
        Err(e) => {
            m.write(&a.out)?;
            Err(e.into())
        }
    }
}

fn metric_kind(c: MetricChoice) -> MetricKind {
    match c {
        MetricChoice::Grad => MetricKind::GradNormSq,
        MetricChoice::Consensus => MetricKind::ConsensusDistance,
        MetricChoice::State => MetricKind::StateDistance,
    }
}

/// Turns the shared algorithm flags into a run configuration for `p`.
pub fn build_config(a: &AlgoArgs, p: &ProblemInstance) -> anyhow::Result<RunConfig> {
    let step = a.gamma.map_or(StepRule::Optimal, StepRule::Fixed);
    if a.tau.is_some() && !matches!(a.solver, SolverChoice::Noisy) && !a.private_init {
        return Err(usage("--tau applies only to --solver noisy or --private-init"));
    }
    if a.clip.is_some() && !matches!(a.solver, SolverChoice::Noisy) {
        return Err(usage("--clip applies only to --solver noisy"));
    }
    let solver = match a.solver {
        SolverChoice::Gd => SolverKind::Gd { step },
        SolverChoice::Agd => SolverKind::Agd,
        SolverChoice::Sgd => SolverKind::Sgd { step, batch: a.batch },
        SolverChoice::Noisy => {
            let tau = a.tau.ok_or_else(|| usage("--solver noisy requires --tau"))?;
            SolverKind::NoisyGd { step, tau, clip: a.clip }
        }
        SolverChoice::Exact => SolverKind::Exact { tolerance: a.tolerance },
    };
    if a.gamma.is_some() && matches!(a.solver, SolverChoice::Agd | SolverChoice::Exact) {
        return Err(usage("--gamma does not apply to the agd and exact solvers"));
    }
    let participation: ParticipationModel = a.participation.parse()?;
    let participation = participation.resized(p.agents.len());
    participation.validate(p.agents.len())?;
    let cost = CostModel { t_g: a.tg, t_c: a.tc };
    cost.validate()?;
    let mut cfg = RunConfig::new(a.rho, solver, a.ne, a.rounds, a.seed)
        .with_participation(participation)
        .with_cost(cost);
    if a.private_init {
        let tau = a.tau.ok_or_else(|| usage("--private-init requires --tau"))?;
        cfg = cfg.with_init(InitMode::Private { tau });
    }
    if let Some(mc) = a.metric {
        cfg = cfg.with_metric(metric_kind(mc));
    }
    if !(a.threshold > 0.0) {
        return Err(usage("--threshold must be positive"));
    }
    Ok(cfg)
}

pub fn run(a: &RunArgs) -> anyhow::Result<()> {
    let p = load(&a.dataset)?;
    let cfg = build_config(&a.algo, &p)?;
    let out = run_until(&p, &cfg, None)?;
    prepare_dir(&a.out)?;
    let mut m = RunManifest::new("run", a)?;
    m.seed = Some(cfg.seed);
    m.inputs.push(a.dataset.clone());

    let mut traj = Vec::new();
    write_trajectory(&out.records, &mut traj)?;
    emit(&mut m, &a.out, TRAJECTORY_FILE, &traj)?;
    let finals = json!({
        "y": out.final_y(),
        "x": out.agents.iter().map(|s| &s.x).collect::<Vec<_>>(),
    });
    emit(&mut m, &a.out, FINAL_FILE, serde_json::to_string_pretty(&finals)?.as_bytes())?;

    let last = out.records.last().expect("initial record");
    let threshold = a.algo.threshold;
    let summary = json!({
        "rounds": last.k,
        "metric": out.metadata.metric,
        "final_metric": last.metric,
        "threshold": threshold,
        "reached": time_to_threshold(&out.records, threshold).is_some(),
        "rounds_to_threshold": rounds_to_threshold(&out.records, threshold),
        "time_to_threshold": time_to_threshold(&out.records, threshold),
        "elapsed_cost": last.elapsed_cost,
        "local_step": out.metadata.local_step,
        "p_lo": out.metadata.p_lo,
        "p_hi": out.metadata.p_hi,
        "note": out.metadata.note,
    });
    let text = serde_json::to_string_pretty(&summary)?;
    emit(&mut m, &a.out, SUMMARY_FILE, text.as_bytes())?;
    m.resolved = json!({ "config": cfg, "metadata": out.metadata });
    m.write(&a.out)?;
    println!("{text}");
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> anyhow::Result<()> {
    let axis = SweepAxis::parse(&a.axis).map_err(|e| usage(e.to_string()))?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if a.values.is_empty() {
        return Err(usage("--values needs at least one value"));
    }
    let p = load(&a.dataset)?;
    let base = build_config(&a.algo, &p)?;
    // reject bad axis values before any work starts
    for &v in &a.values {
        axis.apply(&base, v, p.agents.len())?;
    }
    let measure = match a.measure {
        MeasureChoice::Time => Measure::TimeToThreshold,
        MeasureChoice::Asymptotic => Measure::AsymptoticError,
    };
    let spec = SweepSpec {
        axis,
        values: a.values.clone(),
        base,
    };
    let rows = harness_sweep(&p, &spec, a.seeds, measure, a.algo.threshold)?;
    let (format, name) = match a.format {
        FormatChoice::Csv => (TableFormat::Csv, "table.csv"),
        FormatChoice::Json => (TableFormat::Json, "table.json"),
    };
    let table = emit_table(&rows, format)?;
    prepare_dir(&a.out)?;
    let mut m = RunManifest::new("sweep", a)?;
    m.seed = Some(spec.base.seed);
    m.inputs.push(a.dataset.clone());
    emit(&mut m, &a.out, name, table.as_bytes())?;
    m.resolved = json!({ "spec": spec, "measure": measure, "seeds": a.seeds });
    m.write(&a.out)?;
    print!("{table}");
    if !table.ends_with('\n') {
        println!();
    }
    Ok(())
}

pub fn privacy(a: &PrivacyArgs) -> anyhow::Result<()> {
    let instance = a.dataset.as_deref().map(load).transpose()?;
    let (q, lambda_lo, bounds) = match (&instance, &a.q, a.lambda_lo) {
        (Some(p), None, None) => {
            let b = p.require_bounds()?;
            (p.sample_counts(), b.lambda_lo, Some(b))
        }
        (Some(_), _, _) => return Err(usage("--q and --lambda-lo conflict with an instance file")),
        (None, Some(q), Some(lo)) => (q.clone(), lo, None),
        (None, _, _) => return Err(usage("without an instance file both --q and --lambda-lo are required")),
    };
    if !(a.tau > 0.0) {
        return Err(usage("--tau must be positive"));
    }
    let pp = PrivacyParams {
        sensitivity: a.sensitivity,
        tau_sq: a.tau * a.tau,
        gamma: a.gamma,
        renyi_order: a.lambda_order,
        q,
        lambda_lo,
    };
    let report = privacy_report(&pp, a.rounds, a.ne, &a.delta)?;
    let mut warnings = Vec::new();
    if let Some(b) = bounds {
        let limit = 2.0 / (b.lambda_hi + 1.0 / a.rho);
        if a.gamma >= limit {
            warnings.push(format!(
                "step {} violates the bound gamma < {limit:.6} for rho {}; the privacy guarantee does not apply",
                a.gamma, a.rho
            ));
        }
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    prepare_dir(&a.out)?;
    let mut m = RunManifest::new("privacy", a)?;
    if let Some(d) = &a.dataset {
        m.inputs.push(d.clone());
    }
    let body = json!({ "params": pp, "report": report, "warnings": warnings });
    emit(&mut m, &a.out, PRIVACY_FILE, serde_json::to_string_pretty(&body)?.as_bytes())?;
    m.resolved = json!({ "tau_sq": pp.tau_sq, "lambda_lo": lambda_lo, "bounds": bounds });
    m.write(&a.out)?;

    println!("agent,q,eps_rdp,asymptote");
    for r in &report.rows {
        println!("{},{},{:e},{:e}", r.agent, r.q, r.eps_rdp, r.asymptote);
    }
    println!("worst,{},{:e},", pp.q.iter().min().expect("nonempty"), report.eps_worst);
    for (delta, eps) in &report.adp_worst {
        println!("adp delta {delta:e}: epsilon {eps:e}");
    }
    Ok(())
}
