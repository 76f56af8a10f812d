//! Closed-form Rényi-DP accounting for noisy-gradient local training,
//! conversion to (epsilon, delta)-DP, gradient clipping and the matching
//! accuracy bound.
//!
//! Bounds assume full participation; partial participation can only
//! tighten them.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::problem::{LocalCost, RegularizerSpec};
use crate::rng::StreamRng;
use crate::vector::ModelVector;

/// Rescales `g` onto the ball of radius `bound / 2` when it lies outside it.
pub fn clip_gradient(g: &ModelVector, bound: f64) -> Result<ModelVector> {
    if !(bound > 0.0) {
        return Err(invalid(format!("clipping bound must be positive, got {bound}")));
    }
    let norm = g.norm();
    let radius = bound / 2.0;
    if norm <= radius {
        Ok(g.clone())
    } else {
        Ok(g.scaled(radius / norm))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// Gradient sensitivity `L`.
    pub sensitivity: f64,
    /// Noise variance `tau^2`.
    pub tau_sq: f64,
    /// Local step size.
    pub gamma: f64,
    /// Rényi order `lambda > 1`.
    pub renyi_order: f64,
    /// Per-agent dataset sizes.
    pub q: Vec<usize>,
    /// Strong-convexity modulus of the local costs.
    pub lambda_lo: f64,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.renyi_order > 1.0) {
            return Err(invalid(format!("Rényi order must exceed 1, got {}", self.renyi_order)));
        }
        if !(self.tau_sq > 0.0) {
            return Err(invalid(format!("noise variance must be positive, got {}", self.tau_sq)));
        }
        if !(self.sensitivity > 0.0) {
            return Err(invalid("sensitivity L must be positive"));
        }
        if !(self.gamma > 0.0) {
            return Err(invalid("step size must be positive"));
        }
        if !(self.lambda_lo > 0.0) {
            return Err(invalid("strong-convexity modulus must be positive"));
        }
        if self.q.is_empty() || self.q.contains(&0) {
            return Err(invalid("dataset sizes must be positive"));
        }
        Ok(())
    }

    fn scale_for(&self, q: usize) -> f64 {
        let q = q as f64;
        self.renyi_order * self.sensitivity * self.sensitivity / (self.lambda_lo * self.tau_sq * q * q)
    }

    fn growth(&self, rounds: u64, epochs: u64) -> f64 {
        let t = self.lambda_lo * self.gamma * rounds as f64 * epochs as f64 / 2.0;
        -(-t).exp_m1()
    }
}

/// `lambda L^2 / (lambda_lo tau^2 q_i^2) * (1 - exp(-lambda_lo gamma K Ne / 2))`
pub fn rdp_epsilon_agent(pp: &PrivacyParams, agent: usize, rounds: u64, epochs: u64) -> Result<f64> {
    pp.validate()?;
    let q = *pp
        .q
        .get(agent)
        .ok_or_else(|| invalid(format!("no agent {agent}")))?;
    Ok(pp.scale_for(q) * pp.growth(rounds, epochs))
}

/// Limit of the per-agent bound as `K * Ne` grows without bound.
pub fn rdp_asymptote(pp: &PrivacyParams, agent: usize) -> Result<f64> {
    pp.validate()?;
    let q = *pp
        .q
        .get(agent)
        .ok_or_else(|| invalid(format!("no agent {agent}")))?;
    Ok(pp.scale_for(q))
}

/// Bound for the agent with the smallest dataset.
pub fn rdp_epsilon_worst(pp: &PrivacyParams, rounds: u64, epochs: u64) -> Result<f64> {
    pp.validate()?;
    let q_min = *pp.q.iter().min().expect("validated nonempty");
    Ok(pp.scale_for(q_min) * pp.growth(rounds, epochs))
}

/// `(lambda, eps)`-RDP implies `(eps + log(1/delta)/(lambda - 1), delta)`-DP.
pub fn rdp_to_adp(renyi_order: f64, eps: f64, delta: f64) -> Result<f64> {
    if !(renyi_order > 1.0) {
        return Err(invalid(format!("Rényi order must exceed 1, got {renyi_order}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(eps + (1.0 / delta).ln() / (renyi_order - 1.0))
}

/// Initial model with i.i.d. `N(0, 2 tau^2 / lambda_lo)` coordinates.
pub fn private_init(n: usize, tau_sq: f64, lambda_lo: f64, rng: &mut StreamRng) -> Result<ModelVector> {
    if !(tau_sq >= 0.0) || !(lambda_lo > 0.0) {
        return Err(invalid("private initialization needs tau^2 >= 0 and lambda_lo > 0"));
    }
    let std = (2.0 * tau_sq / lambda_lo).sqrt();
    Ok(ModelVector::new(
        (0..n)
            .map(|_| {
                let s: f64 = StandardNormal.sample(rng);
                std * s
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBoundInputs {
    /// Spectral norm of the contraction matrix.
    pub spectral_norm: f64,
    /// Inner gradient-descent contraction factor.
    pub chi: f64,
    pub epochs: u32,
    /// Noise standard deviation `tau`.
    pub tau: f64,
    pub n: usize,
    pub agents: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyBound {
    pub value: f64,
    /// False when `||S|| >= 1`: the value is a partial sum with no finite limit.
    pub asymptotic: bool,
}

fn noise_term(inp: &AccuracyBoundInputs) -> f64 {
    let geometric = if inp.chi == 1.0 {
        inp.epochs as f64
    } else {
        (1.0 - inp.chi.powi(inp.epochs as i32)) / (1.0 - inp.chi)
    };
    inp.tau * (10.0 * inp.n as f64 * inp.agents as f64 * inp.gamma).sqrt() * geometric
}

/// Expected distance to the fixed point after `rounds` rounds of noisy-GD training:
/// `||S||^K d0 + (1 - ||S||^K)/(1 - ||S||) * tau sqrt(10 n N gamma) (1 - chi^Ne)/(1 - chi)`.
pub fn privacy_accuracy_bound(inp: &AccuracyBoundInputs, rounds: u32, initial_dist: f64) -> AccuracyBound {
    let s = inp.spectral_norm;
    let s_k = s.powi(rounds as i32);
    let partial = if s == 1.0 {
        rounds as f64
    } else {
        (1.0 - s_k) / (1.0 - s)
    };
    AccuracyBound {
        value: s_k * initial_dist + partial * noise_term(inp),
        asymptotic: s < 1.0,
    }
}

/// `K -> infinity` limit of [`privacy_accuracy_bound`]; `None` when `||S|| >= 1`.
pub fn privacy_accuracy_asymptote(inp: &AccuracyBoundInputs) -> Option<f64> {
    (inp.spectral_norm < 1.0).then(|| noise_term(inp) / (1.0 - inp.spectral_norm))
}

/// Statistical falsifier for the sensitivity assumption: on `samples`
/// random points `x` and random one-sample replacements, checks
/// `||grad f^D(x) - grad f^D'(x)|| <= L / q`. When `clip` is set the data
/// gradients are computed from clipped per-sample gradients.
pub fn sensitivity_check(
    cost: &LocalCost,
    _regularizer: &RegularizerSpec,
    bound: f64,
    samples: usize,
    clip: bool,
    rng: &mut StreamRng,
) -> bool {
    let LocalCost::Logistic(d) = cost else {
        // a quadratic data term has no samples to swap
        return true;
    };
    let q = d.len();
    let n = d.dim();
    let sample_grad = |pt: &crate::problem::DataPoint, x: &ModelVector| {
        let g = pt.gradient(x);
        if clip && bound > 0.0 {
            clip_gradient(&g, bound).expect("positive bound")
        } else {
            g
        }
    };
    for _ in 0..samples {
        let x = ModelVector::new(
            (0..n)
                .map(|_| {
                    let s: f64 = StandardNormal.sample(rng);
                    3.0 * s
                })
                .collect(),
        );
        let j = rng.random_range(0..q);
        let donor = &d.points[rng.random_range(0..q)];
        let label = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let replacement = crate::problem::DataPoint {
            features: donor.features.clone(),
            label,
        };
        // the regularizer and the untouched samples cancel in the difference
        let mut diff = sample_grad(&d.points[j], &x);
        diff.axpy(-1.0, &sample_grad(&replacement, &x));
        if diff.norm() / q as f64 > bound / q as f64 * (1.0 + 1e-12) {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRow {
    pub agent: usize,
    pub q: usize,
    pub rounds: u64,
    pub epochs: u64,
    pub renyi_order: f64,
    pub eps_rdp: f64,
    pub asymptote: f64,
    /// `(delta, epsilon)` pairs.
    pub eps_adp: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub rows: Vec<PrivacyRow>,
    pub eps_worst: f64,
    pub adp_worst: Vec<(f64, f64)>,
    pub rounds: u64,
    pub epochs: u64,
}

pub const DEFAULT_DELTAS: [f64; 3] = [1e-3, 1e-5, 1e-7];

pub fn privacy_report(pp: &PrivacyParams, rounds: u64, epochs: u64, deltas: &[f64]) -> Result<PrivacyReport> {
    pp.validate()?;
    let adp = |eps: f64| -> Result<Vec<(f64, f64)>> {
        deltas
            .iter()
            .map(|&d| Ok((d, rdp_to_adp(pp.renyi_order, eps, d)?)))
            .collect()
    };
    let rows = (0..pp.q.len())
        .map(|i| {
            let eps = rdp_epsilon_agent(pp, i, rounds, epochs)?;
            Ok(PrivacyRow {
                agent: i,
                q: pp.q[i],
                rounds,
                epochs,
                renyi_order: pp.renyi_order,
                eps_rdp: eps,
                asymptote: rdp_asymptote(pp, i)?,
                eps_adp: adp(eps)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let eps_worst = rdp_epsilon_worst(pp, rounds, epochs)?;
    Ok(PrivacyReport {
        rows,
        eps_worst,
        adp_worst: adp(eps_worst)?,
        rounds,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use approx::assert_abs_diff_eq;

    fn params(q: Vec<usize>) -> PrivacyParams {
        PrivacyParams {
            sensitivity: 1.0,
            tau_sq: 1.0,
            gamma: 0.1,
            renyi_order: 2.0,
            q,
            lambda_lo: 1.0,
        }
    }

    #[test]
    fn clipping_examples() {
        let small = ModelVector::new(vec![0.06, 0.08]);
        assert_eq!(clip_gradient(&small, 1.0).unwrap(), small);
        let big = ModelVector::new(vec![3.0, 4.0]);
        let c = clip_gradient(&big, 2.0).unwrap();
        assert_abs_diff_eq!(c[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(c[1], 0.8, epsilon = 1e-15);
        assert!(clip_gradient(&big, 0.0).is_err());
    }

    #[test]
    fn rdp_examples() {
        let pp = params(vec![10]);
        assert_eq!(rdp_epsilon_agent(&pp, 0, 0, 5).unwrap(), 0.0);
        assert_abs_diff_eq!(rdp_asymptote(&pp, 0).unwrap(), 0.02, epsilon = 1e-15);
        let eps = rdp_epsilon_agent(&pp, 0, 10, 5).unwrap();
        assert_abs_diff_eq!(eps, 0.02 * (1.0 - (-2.5f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(eps, 0.018358, epsilon = 1e-6);
    }

    #[test]
    fn worst_case_uses_smallest_dataset() {
        let pp = params(vec![10, 100]);
        let worst = rdp_epsilon_worst(&pp, 10, 5).unwrap();
        let big = rdp_epsilon_agent(&pp, 1, 10, 5).unwrap();
        assert_abs_diff_eq!(worst, 100.0 * big, epsilon = 1e-15);
        assert_eq!(worst, rdp_epsilon_agent(&pp, 0, 10, 5).unwrap());
    }

    #[test]
    fn rdp_rejects_bad_orders() {
        let mut pp = params(vec![10]);
        pp.renyi_order = 1.0;
        assert!(rdp_epsilon_agent(&pp, 0, 1, 1).is_err());
        let mut pp = params(vec![10]);
        pp.tau_sq = 0.0;
        assert!(rdp_epsilon_agent(&pp, 0, 1, 1).is_err());
    }

    #[test]
    fn adp_conversion() {
        assert_abs_diff_eq!(rdp_to_adp(2.0, 0.02, (-1f64).exp()).unwrap(), 1.02, epsilon = 1e-15);
        assert_abs_diff_eq!(rdp_to_adp(2.0, 0.02, 1.0 - 1e-15).unwrap(), 0.02, epsilon = 1e-12);
        assert!(rdp_to_adp(2.0, 0.02, 0.0).is_err());
        assert!(rdp_to_adp(2.0, 0.02, 1.0).is_err());
        assert!(rdp_to_adp(1.0, 0.02, 0.5).is_err());
    }

    #[test]
    fn private_init_degenerate_and_deterministic() {
        let mut a = stream(3, Purpose::Initialization, 0, 0);
        let mut b = stream(3, Purpose::Initialization, 0, 0);
        assert_eq!(private_init(4, 0.5, 1.0, &mut a).unwrap(), private_init(4, 0.5, 1.0, &mut b).unwrap());
        let mut c = stream(3, Purpose::Initialization, 0, 0);
        assert_eq!(private_init(3, 0.0, 1.0, &mut c).unwrap(), ModelVector::zeros(3));
    }

    #[test]
    fn accuracy_bound_examples() {
        let inp = AccuracyBoundInputs {
            spectral_norm: 0.5,
            chi: 0.5,
            epochs: 2,
            tau: 0.1,
            n: 1,
            agents: 2,
            gamma: 0.1,
        };
        let expected = 2.0 * 0.1 * 2f64.sqrt() * 1.5;
        assert_abs_diff_eq!(privacy_accuracy_asymptote(&inp).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.424264, epsilon = 1e-6);
        let noiseless = AccuracyBoundInputs { tau: 0.0, ..inp };
        let b = privacy_accuracy_bound(&noiseless, 3, 2.0);
        assert_abs_diff_eq!(b.value, 0.125 * 2.0, epsilon = 1e-15);
        let one_epoch = AccuracyBoundInputs { chi: 0.0, epochs: 1, ..inp };
        assert_abs_diff_eq!(noise_term(&one_epoch), 0.1 * 2f64.sqrt(), epsilon = 1e-15);
        let unstable = AccuracyBoundInputs { spectral_norm: 1.2, ..inp };
        assert!(!privacy_accuracy_bound(&unstable, 5, 1.0).asymptotic);
        assert!(privacy_accuracy_asymptote(&unstable).is_none());
    }
}
