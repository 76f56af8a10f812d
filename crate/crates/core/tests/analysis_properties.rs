use fedplt::harness::{
    desk_instance, emit_table, monte_carlo, parse_table, sweep, Measure, SweepAxis, SweepSpec, TableFormat,
};
use fedplt::privacy::{
    privacy_accuracy_bound, privacy_report, rdp_epsilon_agent, rdp_to_adp, sensitivity_check, AccuracyBoundInputs,
    PrivacyParams,
};
use fedplt::problem::logistic_instance;
use fedplt::rates::{build_s, chi_agd, sigma_rate, spectral_norm, spectral_radius, stability_check, tune_grid, TuneGrid, TuneSolver};
use fedplt::rng::{stream, Purpose};
use fedplt::{
    ConvexityBounds, FedError, InitMode, MetricKind, NonsmoothSpec, ParticipationModel, RegularizerSpec, RunConfig,
    SolverKind,
};
use proptest::prelude::*;

fn bounds() -> impl Strategy<Value = ConvexityBounds> {
    (0.05..2.0f64, 1.0..30.0f64).prop_map(|(lo, k)| ConvexityBounds::new(lo, lo * k).unwrap())
}

proptest! {
    #[test]
    fn stability_condition_matches_the_spectrum(
        b in bounds(),
        rho in 0.05..20.0f64,
        chi_pow in 0.0..1.0f64,
    ) {
        let zeta = fedplt::splitting::prs_rate(rho, &b);
        let s = build_s(chi_pow, zeta, &b, rho).unwrap();
        let check = stability_check(&s, chi_pow, zeta, &b, rho);
        // skip razor-thin margins where rounding decides either side
        prop_assume!((check.stability_lhs - check.stability_rhs).abs() > 1e-9);
        prop_assume!((check.spectral_radius - 1.0).abs() > 1e-9);
        prop_assert_eq!(check.stability_holds, check.stable);
        prop_assert!(spectral_radius(&s) <= spectral_norm(&s) * (1.0 + 1e-12));
    }

    #[test]
    fn sigma_dominates_the_norm(p_lo in 0.01..1.0f64, norm in 0.0..1.0f64) {
        let sigma = sigma_rate(p_lo, norm).unwrap();
        prop_assert!(sigma >= norm - 1e-15 && sigma <= 1.0 + 1e-15);
    }

    #[test]
    fn agd_factor_decreases_with_epochs(b in bounds(), rho in 0.05..20.0f64, e in 1u32..60) {
        prop_assert!(chi_agd(e + 1, &b, rho) < chi_agd(e, &b, rho));
    }

    #[test]
    fn privacy_loss_is_monotone(
        k in 1u64..500,
        ne in 1u64..20,
        gamma in 0.01..1.0f64,
        tau_sq in 0.01..4.0f64,
    ) {
        let pp = PrivacyParams {
            sensitivity: 1.0,
            tau_sq,
            gamma,
            renyi_order: 2.0,
            q: vec![50, 100],
            lambda_lo: 0.5,
        };
        let e = rdp_epsilon_agent(&pp, 0, k, ne).unwrap();
        prop_assert!(rdp_epsilon_agent(&pp, 0, k + 1, ne).unwrap() >= e);
        prop_assert!(rdp_epsilon_agent(&pp, 1, k, ne).unwrap() < e);
        let noisier = PrivacyParams { tau_sq: 2.0 * tau_sq, ..pp.clone() };
        prop_assert!(rdp_epsilon_agent(&noisier, 0, k, ne).unwrap() < e);
        prop_assert!(rdp_to_adp(2.0, e, 1e-7).unwrap() > rdp_to_adp(2.0, e, 1e-3).unwrap());
    }
}

#[test]
fn privacy_report_worst_case_is_the_smallest_dataset() {
    let pp = PrivacyParams {
        sensitivity: 2.0,
        tau_sq: 0.25,
        gamma: 0.5,
        renyi_order: 4.0,
        q: vec![80, 40, 120],
        lambda_lo: 0.5,
    };
    let r = privacy_report(&pp, 100, 5, &[1e-5]).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.eps_worst, r.rows[1].eps_rdp);
    assert!(r.rows.iter().all(|row| row.eps_rdp <= row.asymptote));
    let bad = PrivacyParams { renyi_order: 1.0, ..pp };
    assert!(privacy_report(&bad, 100, 5, &[1e-5]).is_err());
}

#[test]
fn clipping_enforces_the_sensitivity_bound() {
    let p = logistic_instance(3, 1, 4, 20, RegularizerSpec::L2 { weight: 0.5 }, NonsmoothSpec::Zero).unwrap();
    let cost = &p.agents[0];
    let mut rng = stream(1, Purpose::Sensitivity, 0, 0);
    // per-sample logistic gradients are bounded by the feature norm, so a tiny L fails unclipped
    assert!(!sensitivity_check(cost, &p.regularizer, 1e-3, 200, false, &mut rng));
    assert!(sensitivity_check(cost, &p.regularizer, 1e-3, 200, true, &mut rng));
}

#[test]
fn accuracy_bound_is_monotone_in_noise() {
    let base = AccuracyBoundInputs {
        spectral_norm: 0.7,
        chi: 0.5,
        epochs: 5,
        tau: 0.1,
        n: 5,
        agents: 10,
        gamma: 0.6,
    };
    let louder = AccuracyBoundInputs { tau: 0.2, ..base };
    let a = privacy_accuracy_bound(&base, 50, 1.0);
    let b = privacy_accuracy_bound(&louder, 50, 1.0);
    assert!(a.asymptotic && b.value > a.value);
    let unstable = AccuracyBoundInputs { spectral_norm: 1.2, ..base };
    assert!(!privacy_accuracy_bound(&unstable, 50, 1.0).asymptotic);
}

#[test]
fn tuning_reports_no_stable_point() {
    let b = ConvexityBounds::new(0.5, 0.6).unwrap();
    let grid = TuneGrid {
        rho_values: vec![1.0],
        gamma_values: vec![0.001],
        gamma_relative: false,
        epoch_values: vec![1],
        p_lo: 1.0,
        p_hi: 1.0,
        nu: 0.0,
    };
    assert!(matches!(tune_grid(&grid, &b, TuneSolver::Gd), Err(FedError::NoStablePoint)));
}

#[test]
fn bernoulli_envelope_stays_above_zero_with_noise() {
    let p = desk_instance(1, NonsmoothSpec::Zero).unwrap();
    let solver = SolverKind::NoisyGd {
        step: fedplt::StepRule::Optimal,
        tau: 0.01,
        clip: None,
    };
    let cfg = RunConfig::new(1.0, solver, 5, 60, 0)
        .with_participation(ParticipationModel::bernoulli_uniform(0.5, p.agents.len()))
        .with_metric(MetricKind::StateDistance);
    let row = monte_carlo(&p, &cfg, 4, Measure::AsymptoticError, 0.0).unwrap();
    assert!(row.min.unwrap() > 0.0);
    assert!(row.min.unwrap() <= row.mean.unwrap() && row.mean.unwrap() <= row.max.unwrap());
}

#[test]
fn tau_sweep_raises_the_floor() {
    let p = desk_instance(1, NonsmoothSpec::Zero).unwrap();
    let base = RunConfig::new(
        1.0,
        SolverKind::NoisyGd {
            step: fedplt::StepRule::Optimal,
            tau: 0.01,
            clip: None,
        },
        5,
        60,
        0,
    )
    .with_init(InitMode::Zero)
    .with_metric(MetricKind::StateDistance);
    let spec = SweepSpec {
        axis: SweepAxis::Tau,
        values: vec![0.001, 0.01, 0.1],
        base,
    };
    let rows = sweep(&p, &spec, 3, Measure::AsymptoticError, 0.0).unwrap();
    let means: Vec<f64> = rows.iter().map(|r| r.mean.unwrap()).collect();
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
}

#[test]
fn short_runs_report_the_not_reached_sentinel() {
    let p = desk_instance(1, NonsmoothSpec::Zero).unwrap();
    let cfg = RunConfig::new(1.0, SolverKind::gd(), 1, 2, 0);
    let row = monte_carlo(&p, &cfg, 3, Measure::TimeToThreshold, 1e-12).unwrap();
    assert_eq!(row.reached, 0);
    assert!(row.mean.is_none());
    let csv = emit_table(std::slice::from_ref(&row), TableFormat::Csv).unwrap();
    assert!(csv.contains("not_reached"));
    assert_eq!(parse_table(&csv, TableFormat::Csv).unwrap(), vec![row]);
}
