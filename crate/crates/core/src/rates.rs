//! Contraction certificates for the federated iteration.
//!
//! The local solver contributes a factor `chi^Ne` (or `chi(Ne)` for the
//! accelerated method), the exact splitting contributes `zeta`, and the 2x2
//! nonnegative matrix
//!
//! ```text
//! S = [ c      (1 + c) / a  ]      c = chi^Ne,  a = lambda_lo + 1/rho
//!     [ 2 c    zeta + 2c / a ]
//! ```
//!
//! certifies linear convergence when it is stable. Its spectral norm bounds
//! the per-round contraction and feeds the stochastic rate
//! `sigma = sqrt(1 - p_lo + p_lo ||S||^2)`.
//!
//! All 2x2 spectral quantities are computed in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, FedError, Result};
use crate::problem::ConvexityBounds;
use crate::solvers::optimal_step;
use crate::splitting::prs_rate;

pub type Matrix2 = [[f64; 2]; 2];

/// `max{|1 - gamma (lambda_lo + 1/rho)|, |1 - gamma (lambda_hi + 1/rho)|}`
pub fn chi_gd(gamma: f64, b: &ConvexityBounds, rho: f64) -> Result<f64> {
    let (lo, hi) = b.shifted(rho);
    if !(gamma > 0.0 && gamma < 2.0 / hi) {
        return Err(invalid(format!("step {gamma} outside (0, {})", 2.0 / hi)));
    }
    Ok((1.0 - gamma * lo).abs().max((1.0 - gamma * hi).abs()))
}

/// `(1 + kappa) (1 - 1/sqrt(kappa))^Ne` with `kappa = (lambda_hi + 1/rho) / (lambda_lo + 1/rho)`.
pub fn chi_agd(epochs: u32, b: &ConvexityBounds, rho: f64) -> f64 {
    let (lo, hi) = b.shifted(rho);
    let kappa = hi / lo;
    (1.0 + kappa) * (1.0 - (lo / hi).sqrt()).powi(epochs as i32)
}

/// Smallest `Ne` for which the accelerated contraction factor drops below one,
/// i.e. the first integer exceeding `log(1 + kappa) / |log(1 - 1/sqrt(kappa))|`.
pub fn min_contractive_agd_epochs(b: &ConvexityBounds, rho: f64) -> u32 {
    let (lo, hi) = b.shifted(rho);
    let kappa = hi / lo;
    if kappa == 1.0 {
        return 1;
    }
    let threshold = (1.0 + kappa).ln() / (1.0 - 1.0 / kappa.sqrt()).ln().abs();
    threshold.floor() as u32 + 1
}

pub fn build_s(chi_pow: f64, zeta: f64, b: &ConvexityBounds, rho: f64) -> Result<Matrix2> {
    if !(chi_pow >= 0.0 && zeta >= 0.0) {
        return Err(invalid("contraction factors must be nonnegative"));
    }
    let a = b.lambda_lo + 1.0 / rho;
    Ok([
        [chi_pow, (1.0 + chi_pow) / a],
        [2.0 * chi_pow, zeta + 2.0 * chi_pow / a],
    ])
}

/// Eigenvalues of a 2x2 matrix as `(re, im)` pairs, larger real part first.
pub fn eigenvalues(m: &Matrix2) -> [(f64, f64); 2] {
    let trace = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = trace * trace - 4.0 * det;
    if disc >= 0.0 {
        let root = disc.sqrt();
        [((trace + root) / 2.0, 0.0), ((trace - root) / 2.0, 0.0)]
    } else {
        let im = (-disc).sqrt() / 2.0;
        [(trace / 2.0, im), (trace / 2.0, -im)]
    }
}

pub fn discriminant(m: &Matrix2) -> f64 {
    let trace = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    trace * trace - 4.0 * det
}

pub fn spectral_radius(m: &Matrix2) -> f64 {
    eigenvalues(m)
        .iter()
        .map(|(re, im)| re.hypot(*im))
        .fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix2) -> f64 {
    let fro_sq = m.iter().flatten().map(|v| v * v).sum::<f64>();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inner = (fro_sq * fro_sq - 4.0 * det * det).max(0.0);
    ((fro_sq + inner.sqrt()) / 2.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityCheck {
    pub stable: bool,
    pub stability_holds: bool,
    pub stability_lhs: f64,
    pub stability_rhs: f64,
    pub spectral_radius: f64,
    pub spectral_norm: f64,
}

/// Stability of `S` together with the scalar unit-root condition
/// `(1 - zeta)(1 - c) > 4 c / (lambda_lo + 1/rho)`.
///
/// The left side minus the right side equals `det(I - S)`; since `S` has
/// real eigenvalues and `det(I + S) > 0`, the condition holds exactly when
/// `S` is stable.
pub fn stability_check(s: &Matrix2, chi_pow: f64, zeta: f64, b: &ConvexityBounds, rho: f64) -> StabilityCheck {
    let a = b.lambda_lo + 1.0 / rho;
    let lhs = (1.0 - zeta) * (1.0 - chi_pow);
    let rhs = 4.0 * chi_pow / a;
    let radius = spectral_radius(s);
    StabilityCheck {
        stable: radius < 1.0,
        stability_holds: lhs > rhs,
        stability_lhs: lhs,
        stability_rhs: rhs,
        spectral_radius: radius,
        spectral_norm: spectral_norm(s),
    }
}

/// `sqrt(1 - p_lo + p_lo ||S||^2)`
pub fn sigma_rate(p_lo: f64, spectral_norm: f64) -> Result<f64> {
    if !(p_lo > 0.0 && p_lo <= 1.0) {
        return Err(invalid(format!("minimum participation probability must lie in (0, 1], got {p_lo}")));
    }
    if !(spectral_norm >= 0.0) {
        return Err(invalid("spectral norm must be nonnegative"));
    }
    if p_lo == 1.0 {
        return Ok(spectral_norm);
    }
    Ok((1.0 - p_lo + p_lo * spectral_norm * spectral_norm).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub rho: f64,
    pub gamma: Option<f64>,
    pub epochs: u32,
    /// `chi^Ne`, or `chi(Ne)` for the accelerated solver.
    pub chi_pow: f64,
    pub zeta: f64,
    pub s: Matrix2,
    pub spectral_radius: f64,
    pub spectral_norm: f64,
    pub p_lo: f64,
    pub sigma: f64,
    /// Mean additive-error magnitude; zero for exact solvers.
    pub nu: f64,
    pub stability_lhs: f64,
    pub stability_rhs: f64,
    pub stability_holds: bool,
    pub stable: bool,
    /// `rho(S) < 1 <= ||S||`: stable, but the norm bound does not certify a per-round contraction.
    pub certificate_gap: bool,
}

impl ContractionReport {
    pub fn from_parts(
        rho: f64,
        gamma: Option<f64>,
        epochs: u32,
        chi_pow: f64,
        b: &ConvexityBounds,
        p_lo: f64,
        nu: f64,
    ) -> Result<Self> {
        let zeta = prs_rate(rho, b);
        let s = build_s(chi_pow, zeta, b, rho)?;
        let check = stability_check(&s, chi_pow, zeta, b, rho);
        Ok(Self {
            rho,
            gamma,
            epochs,
            chi_pow,
            zeta,
            s,
            spectral_radius: check.spectral_radius,
            spectral_norm: check.spectral_norm,
            p_lo,
            sigma: sigma_rate(p_lo, check.spectral_norm)?,
            nu,
            stability_lhs: check.stability_lhs,
            stability_rhs: check.stability_rhs,
            stability_holds: check.stability_holds,
            stable: check.stable,
            certificate_gap: check.stable && check.spectral_norm >= 1.0,
        })
    }

    /// Certificate for gradient-descent local training.
    pub fn for_gd(rho: f64, gamma: f64, epochs: u32, b: &ConvexityBounds, p_lo: f64, nu: f64) -> Result<Self> {
        let chi = chi_gd(gamma, b, rho)?;
        Self::from_parts(rho, Some(gamma), epochs, chi.powi(epochs as i32), b, p_lo, nu)
    }

    pub fn for_agd(rho: f64, epochs: u32, b: &ConvexityBounds, p_lo: f64, nu: f64) -> Result<Self> {
        Self::from_parts(rho, None, epochs, chi_agd(epochs, b, rho), b, p_lo, nu)
    }

    /// Exact local solves: `chi^Ne = 0`.
    pub fn for_exact(rho: f64, b: &ConvexityBounds, p_lo: f64) -> Result<Self> {
        Self::from_parts(rho, None, 0, 0.0, b, p_lo, 0.0)
    }
}

/// Right-hand side of the mean-error bound
/// `sqrt(p_hi / p_lo) (sigma^k d0 + (1 - sigma^k) / (1 - sigma) nu)` for `k = 1..=K`.
pub fn error_bound_curve(
    report: &ContractionReport,
    initial_dist: f64,
    p_lo: f64,
    p_hi: f64,
    rounds: usize,
) -> Result<Vec<f64>> {
    if !(p_lo > 0.0 && p_lo <= p_hi && p_hi <= 1.0) {
        return Err(invalid("need 0 < p_lo <= p_hi <= 1"));
    }
    let sigma = sigma_rate(p_lo, report.spectral_norm)?;
    let lead = (p_hi / p_lo).sqrt();
    Ok((1..=rounds)
        .map(|k| {
            let s_k = sigma.powi(k as i32);
            let geometric = if sigma == 1.0 { k as f64 } else { (1.0 - s_k) / (1.0 - sigma) };
            lead * (s_k * initial_dist + geometric * report.nu)
        })
        .collect())
}

/// `sqrt(p_hi / p_lo) nu / (1 - sigma)`, the limit of [`error_bound_curve`].
pub fn error_bound_asymptote(report: &ContractionReport, p_lo: f64, p_hi: f64) -> Result<Option<f64>> {
    let sigma = sigma_rate(p_lo, report.spectral_norm)?;
    Ok((sigma < 1.0).then(|| (p_hi / p_lo).sqrt() * report.nu / (1.0 - sigma)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneSolver {
    Gd,
    Agd,
    /// Exact local solves, `chi^Ne = 0`.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub rho_values: Vec<f64>,
    /// Step sizes; multiples of the rate-optimal step when `gamma_relative` is set.
    pub gamma_values: Vec<f64>,
    pub gamma_relative: bool,
    pub epoch_values: Vec<u32>,
    pub p_lo: f64,
    pub p_hi: f64,
    pub nu: f64,
}

impl TuneGrid {
    pub fn validate(&self, solver: TuneSolver) -> Result<()> {
        if self.rho_values.is_empty() || self.epoch_values.is_empty() {
            return Err(invalid("tuning grid lists must be nonempty"));
        }
        if solver == TuneSolver::Gd && self.gamma_values.is_empty() {
            return Err(invalid("gradient-descent tuning needs step-size values"));
        }
        if !(self.p_lo > 0.0 && self.p_lo <= self.p_hi && self.p_hi <= 1.0) {
            return Err(invalid("need 0 < p_lo <= p_hi <= 1"));
        }
        if self.rho_values.iter().any(|r| !(*r > 0.0)) {
            return Err(invalid("rho values must be positive"));
        }
        if self.epoch_values.contains(&0) {
            return Err(invalid("epoch values must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: ContractionReport,
    /// Every admissible grid point, in grid order.
    pub rows: Vec<ContractionReport>,
}

/// Exhaustive grid search: keeps stable points and returns the one with the
/// smallest spectral norm (ties broken by fewer epochs, then smaller rho).
pub fn tune_grid(g: &TuneGrid, b: &ConvexityBounds, solver: TuneSolver) -> Result<TuneOutcome> {
    let rows = evaluate_grid(g, b, solver)?;
    let best = select_best(&rows).ok_or(FedError::NoStablePoint)?;
    Ok(TuneOutcome { best, rows })
}

/// Certificates for every admissible grid point; steps outside the
/// contraction range are skipped.
pub fn evaluate_grid(g: &TuneGrid, b: &ConvexityBounds, solver: TuneSolver) -> Result<Vec<ContractionReport>> {
    g.validate(solver)?;
    let mut rows = Vec::new();
    for &rho in &g.rho_values {
        match solver {
            TuneSolver::Exact => rows.push(ContractionReport::for_exact(rho, b, g.p_lo)?),
            TuneSolver::Agd => {
                for &ne in &g.epoch_values {
                    rows.push(ContractionReport::for_agd(rho, ne, b, g.p_lo, g.nu)?);
                }
            }
            TuneSolver::Gd => {
                for &gv in &g.gamma_values {
                    let gamma = if g.gamma_relative { gv * optimal_step(b, rho) } else { gv };
                    if chi_gd(gamma, b, rho).is_err() {
                        continue;
                    }
                    for &ne in &g.epoch_values {
                        rows.push(ContractionReport::for_gd(rho, gamma, ne, b, g.p_lo, g.nu)?);
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn select_best(rows: &[ContractionReport]) -> Option<ContractionReport> {
    const TIE: f64 = 1e-12;
    rows.iter()
        .filter(|r| r.stable)
        .fold(None::<&ContractionReport>, |best, r| match best {
            None => Some(r),
            Some(cur) => {
                let better = if (r.spectral_norm - cur.spectral_norm).abs() > TIE * cur.spectral_norm.max(1.0) {
                    r.spectral_norm < cur.spectral_norm
                } else if r.epochs != cur.epochs {
                    r.epochs < cur.epochs
                } else {
                    r.rho < cur.rho
                };
                Some(if better { r } else { cur })
            }
        })
        .copied()
}

/// Flat CSV rendering of a tuning sweep.
pub fn tuning_table_csv(rows: &[ContractionReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rho", "gamma", "ne", "chi_pow", "zeta", "spectral_radius", "spectral_norm", "sigma", "stability_lhs",
        "stability_rhs", "stability_holds", "stable", "certificate_gap",
    ])
    .map_err(|e| FedError::Format(e.to_string()))?;
    for r in rows {
        w.write_record([
            format!("{}", r.rho),
            r.gamma.map_or_else(String::new, |g| format!("{g}")),
            r.epochs.to_string(),
            format!("{}", r.chi_pow),
            format!("{}", r.zeta),
            format!("{}", r.spectral_radius),
            format!("{}", r.spectral_norm),
            format!("{}", r.sigma),
            format!("{}", r.stability_lhs),
            format!("{}", r.stability_rhs),
            r.stability_holds.to_string(),
            r.stable.to_string(),
            r.certificate_gap.to_string(),
        ])
        .map_err(|e| FedError::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| FedError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| FedError::Format(e.to_string()))
}
