//! Closed-form convergence quantities for a cluster of participants
//! training under synchronous FedAvg: the precision bound and the round
//! count it implies, the bound on the error caused by unequal local
//! update counts, and the response-time budgets of master-slave training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Problem constants shared by every cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConstants {
    /// Smoothness constant `L`.
    pub smoothness: f64,
    /// Strong-convexity constant `mu`.
    pub strong_convexity: f64,
    /// Bound on the stochastic gradient variance, `sigma_f`.
    pub grad_variance: f64,
    /// Bound on the expected gradient norm, `G_f`.
    pub grad_bound: f64,
    /// Gradient dissimilarity constants (`h1 >= 1`, `h2 >= 0`).
    pub h1: f64,
    pub h2: f64,
    /// Expected squared distance between the initial and optimal weights.
    pub w_gap_sq: f64,
    pub learning_rate: f64,
    /// Loss of the initial model; `None` means a uniform classifier, ln(c).
    pub initial_loss: Option<f64>,
    /// Assumed minimum of the cluster objective.
    pub optimal_loss: f64,
}

impl Default for ConvergenceConstants {
    fn default() -> Self {
        Self {
            smoothness: 1.5,
            strong_convexity: 0.7,
            grad_variance: 1.0,
            grad_bound: 0.1,
            h1: 1.0,
            h2: 0.0,
            w_gap_sq: 0.0064,
            learning_rate: 0.002,
            initial_loss: None,
            optimal_loss: 0.03,
        }
    }
}

impl ConvergenceConstants {
    /// Gap between the initial and the optimal objective.
    pub fn initial_loss_gap(&self, class_count: usize) -> f64 {
        let initial = self
            .initial_loss
            .unwrap_or_else(|| (class_count.max(2) as f64).ln());
        (initial - self.optimal_loss).max(0.0)
    }

    /// Parameters for a cluster whose members contribute `epsilons`.
    pub fn for_weights(&self, epsilons: Vec<f64>, class_count: usize) -> Result<ConvergenceParams> {
        ConvergenceParams::new(self.clone(), epsilons, self.initial_loss_gap(class_count))
    }

    /// Parameters with contributions proportional to instance counts.
    pub fn for_counts(&self, counts: &[usize], class_count: usize) -> Result<ConvergenceParams> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidParams("instance counts sum to zero".into()));
        }
        let eps = counts.iter().map(|&n| n as f64 / total as f64).collect();
        self.for_weights(eps, class_count)
    }
}

/// Constants plus the per-participant contributions of one cluster.
///
/// The non-i.i.d. degree is fixed at zero: participants' data are assumed
/// identically distributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceParams {
    pub constants: ConvergenceConstants,
    pub epsilons: Vec<f64>,
    pub initial_loss_gap: f64,
}

impl ConvergenceParams {
    pub fn new(
        constants: ConvergenceConstants,
        epsilons: Vec<f64>,
        initial_loss_gap: f64,
    ) -> Result<Self> {
        let c = &constants;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!(
                    "{name} must be nonnegative, got {v}"
                )))
            }
        };
        positive("smoothness", c.smoothness)?;
        positive("strong_convexity", c.strong_convexity)?;
        positive("learning_rate", c.learning_rate)?;
        nonneg("grad_variance", c.grad_variance)?;
        nonneg("grad_bound", c.grad_bound)?;
        nonneg("h2", c.h2)?;
        nonneg("w_gap_sq", c.w_gap_sq)?;
        nonneg("initial_loss_gap", initial_loss_gap)?;
        if c.strong_convexity > c.smoothness {
            return Err(Error::InvalidParams(format!(
                "strong convexity {} exceeds smoothness {}",
                c.strong_convexity, c.smoothness
            )));
        }
        if !(c.h1.is_finite() && c.h1 >= 1.0) {
            return Err(Error::InvalidParams(format!(
                "h1 must be at least 1, got {}",
                c.h1
            )));
        }
        if epsilons.is_empty() || epsilons.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::InvalidParams(
                "contributions must be nonnegative and nonempty".into(),
            ));
        }
        let sum: f64 = epsilons.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "contributions sum to {sum}, not 1"
            )));
        }
        Ok(Self {
            constants,
            epsilons,
            initial_loss_gap,
        })
    }
}

/// max(8L/mu, E_f).
pub fn beta(params: &ConvergenceParams, local_epochs: u32) -> f64 {
    let c = &params.constants;
    (8.0 * c.smoothness / c.strong_convexity).max(f64::from(local_epochs))
}

/// Variance and drift term: sum_j eps_j^2 sigma^2 + 8 (E-1)^2 G^2.
pub fn b_term(params: &ConvergenceParams, local_epochs: u32) -> f64 {
    let c = &params.constants;
    let sigma2 = c.grad_variance * c.grad_variance;
    let variance: f64 = params.epsilons.iter().map(|e| e * e * sigma2).sum();
    let drift = f64::from(local_epochs.saturating_sub(1));
    variance + 8.0 * drift * drift * c.grad_bound * c.grad_bound
}

/// Numerator shared by the precision bound and the round count:
/// (L / 2mu^2) (4B + mu^2 beta E||w1 - w*||^2).
fn precision_numerator(params: &ConvergenceParams, local_epochs: u32) -> f64 {
    let c = &params.constants;
    let mu2 = c.strong_convexity * c.strong_convexity;
    let b = b_term(params, local_epochs);
    c.smoothness / (2.0 * mu2) * (4.0 * b + mu2 * beta(params, local_epochs) * c.w_gap_sq)
}

/// Upper bound on the expected optimality gap after `total_steps` SGD
/// operations with `local_epochs` epochs per round.
pub fn precision_bound(params: &ConvergenceParams, local_epochs: u32, total_steps: u64) -> f64 {
    let steps = total_steps.max(1) as f64;
    precision_numerator(params, local_epochs) / (beta(params, local_epochs) + steps - 1.0)
}

/// Communication rounds needed to reach precision `q_o`, rounded up and
/// at least one.
pub fn rounds_for_cluster(params: &ConvergenceParams, local_epochs: u32, q_o: f64) -> Result<u32> {
    if !(q_o.is_finite() && q_o > 0.0) {
        return Err(Error::InvalidPrecision(q_o));
    }
    let e = f64::from(local_epochs.max(1));
    let raw =
        (precision_numerator(params, local_epochs) / q_o + 1.0 - beta(params, local_epochs)) / e;
    Ok(ceil_tolerant(raw).max(1.0).min(f64::from(u32::MAX)) as u32)
}

/// Ceiling that treats values within 1e-9 (relative) of an integer as
/// that integer, so a round-trip through the precision bound does not
/// pick up a spurious extra round from floating-point noise.
fn ceil_tolerant(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// Pattern of how a participant accumulates stochastic gradients over
/// its local steps; all ones for FedAvg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulationVector {
    entries: Vec<f64>,
}

impl AccumulationVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidAccumulation("vector is empty".into()));
        }
        if entries.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidAccumulation(
                "entries must be nonnegative".into(),
            ));
        }
        if entries.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidAccumulation("l1 norm is zero".into()));
        }
        Ok(Self { entries })
    }

    /// FedAvg accumulation over `steps` local SGD operations.
    pub fn fedavg(steps: usize) -> Result<Self> {
        Self::new(vec![1.0; steps])
    }

    pub fn steps(&self) -> usize {
        self.entries.len()
    }

    pub fn l1(&self) -> f64 {
        self.entries.iter().sum()
    }

    pub fn l2_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    pub fn last(&self) -> f64 {
        *self.entries.last().expect("nonempty by construction")
    }
}

/// The four coefficients of the objective-inconsistency bound together
/// with the mean local step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundTerms {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub tau_e: f64,
}

pub fn error_bound_terms(
    params: &ConvergenceParams,
    o_vectors: &[AccumulationVector],
) -> Result<ErrorBoundTerms> {
    let f = o_vectors.len();
    if f == 0 || f != params.epsilons.len() {
        return Err(Error::InvalidAccumulation(format!(
            "{} accumulation vectors for {} participants",
            f,
            params.epsilons.len()
        )));
    }
    let tau_e = o_vectors.iter().map(|o| o.steps() as f64).sum::<f64>() / f as f64;
    let b2 = f as f64
        * tau_e
        * params
            .epsilons
            .iter()
            .zip(o_vectors)
            .map(|(e, o)| e * e * o.l2_sq() / (o.l1() * o.l1()))
            .sum::<f64>();
    let b3 = params
        .epsilons
        .iter()
        .zip(o_vectors)
        .map(|(e, o)| e * (o.l2_sq() - o.last() * o.last()))
        .sum();
    let b4 = o_vectors
        .iter()
        .map(|o| o.l1() * (o.l1() - o.last()))
        .fold(0.0, f64::max);
    Ok(ErrorBoundTerms {
        b1: params.initial_loss_gap,
        b2,
        b3,
        b4,
        tau_e,
    })
}

/// Bound on the smallest expected squared gradient norm of the surrogate
/// objective over `rounds` rounds with `participants` members whose local
/// update counts differ.
pub fn error_bound(
    params: &ConvergenceParams,
    o_vectors: &[AccumulationVector],
    rounds: u32,
    participants: usize,
) -> Result<f64> {
    if participants != o_vectors.len() {
        return Err(Error::InvalidAccumulation(format!(
            "participant count {participants} does not match {} accumulation vectors",
            o_vectors.len()
        )));
    }
    let t = error_bound_terms(params, o_vectors)?;
    let c = &params.constants;
    let eta = c.learning_rate;
    let l = c.smoothness;
    let s2 = c.grad_variance * c.grad_variance;
    let rounds = f64::from(rounds.max(1));
    Ok(4.0 * t.b1 / (eta * t.tau_e * rounds)
        + 4.0 * eta * l * s2 * t.b2 / participants as f64
        + 6.0 * eta * eta * l * l * s2 * t.b3
        + 12.0 * eta * eta * l * l * c.h2 * c.h2 * t.b4)
}

/// The error bound for `participants` members with equal contributions
/// that all run `tau` local steps. `tau` may be fractional, which lets a
/// heterogeneous cluster be compared with an equal-work homogeneous one.
pub fn homogeneous_error_bound(
    params: &ConvergenceParams,
    tau: f64,
    rounds: u32,
    participants: usize,
) -> Result<f64> {
    if !(tau.is_finite() && tau >= 1.0) || participants == 0 {
        return Err(Error::InvalidAccumulation(format!(
            "homogeneous reference needs tau >= 1 and at least one participant, got tau={tau}, F={participants}"
        )));
    }
    let c = &params.constants;
    let eta = c.learning_rate;
    let l = c.smoothness;
    let s2 = c.grad_variance * c.grad_variance;
    let rounds = f64::from(rounds.max(1));
    // With o_j all ones of length tau and eps_j = 1/F: b2 = 1, b3 = tau - 1,
    // b4 = tau (tau - 1).
    Ok(4.0 * params.initial_loss_gap / (eta * tau * rounds)
        + 4.0 * eta * l * s2 / participants as f64
        + 6.0 * eta * eta * l * l * s2 * (tau - 1.0)
        + 12.0 * eta * eta * l * l * c.h2 * c.h2 * tau * (tau - 1.0))
}

/// Response-time budget when slave clusters train in parallel after the
/// master: (kappa^(m-1) + 1) T_m.
pub fn mar_parallel(kappa: f64, m: u32, slowest_budget: f64) -> f64 {
    (kappa.powi(m as i32 - 1) + 1.0) * slowest_budget
}

/// Response-time budget when every cluster waits for the previous one:
/// T_m (1 - kappa^m) / (1 - kappa).
pub fn mar_sequential(kappa: f64, m: u32, slowest_budget: f64) -> f64 {
    slowest_budget * (1.0 - kappa.powi(m as i32)) / (1.0 - kappa)
}
