//! Entropy-regularized teacher weighting over the probability simplex:
//! the surrogate objective, its softmax minimizer and an independent
//! iterative minimizer used to check it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{Result, SecaError};

/// Non-negative weights summing to one within [`SimplexPoint::SUM_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub const SUM_TOL: f64 = 1e-10;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(SecaError::InvalidInput("empty simplex point".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(SecaError::InvalidInput("negative simplex weight".into()));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOL {
            return Err(SecaError::InvalidInput(format!("simplex weights sum to {s}")));
        }
        Ok(SimplexPoint(weights))
    }

    pub fn uniform(n: usize) -> Self {
        SimplexPoint(vec![1.0 / n as f64; n])
    }

    pub fn vertex(n: usize, j: usize) -> Self {
        let mut w = vec![0.0; n];
        w[j] = 1.0;
        SimplexPoint(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check(losses: &[f64], tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(SecaError::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    if losses.is_empty() {
        return Err(SecaError::InvalidInput("no teacher losses".into()));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(SecaError::NonFinite("teacher loss".into()));
    }
    Ok(())
}

/// `Σ α L + τ Σ α ln α`, with `0 ln 0 = 0`.
pub fn surrogate_objective(alpha: &SimplexPoint, losses: &[f64], tau: f64) -> Result<f64> {
    check(losses, tau)?;
    if alpha.len() != losses.len() {
        return Err(SecaError::ShapeMismatch(format!(
            "{} weights for {} losses",
            alpha.len(),
            losses.len()
        )));
    }
    let mut total = 0.0;
    for (&a, &l) in alpha.weights().iter().zip(losses) {
        total += a * l;
        if a > 0.0 {
            total += tau * a * a.ln();
        }
    }
    Ok(total)
}

/// `α ∝ exp(−L / τ)`.
pub fn closed_form_weights(losses: &[f64], tau: f64) -> Result<SimplexPoint> {
    check(losses, tau)?;
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = losses.iter().map(|l| (-(l - min) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    Ok(SimplexPoint(w))
}

/// Exponentiated-gradient descent on the surrogate, carried out on
/// log-weights so tiny weights never underflow. Stops once the spread of
/// `ln α + L / τ` (zero exactly at a stationary point) is at most `tol`.
pub fn numeric_minimize(losses: &[f64], tau: f64, iters: usize, tol: f64) -> Result<SimplexPoint> {
    check(losses, tau)?;
    let n = losses.len();
    let step = 0.5 / tau;
    let mut log_w = vec![-(n as f64).ln(); n];
    let spread = |log_w: &[f64]| {
        let r: Vec<f64> = log_w.iter().zip(losses).map(|(u, l)| u + l / tau).collect();
        let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    };
    let mut residual = spread(&log_w);
    for _ in 0..iters {
        if residual <= tol {
            let w: Vec<f64> = log_w.iter().map(|u| u.exp()).collect();
            let z: f64 = w.iter().sum();
            return Ok(SimplexPoint(w.into_iter().map(|v| v / z).collect()));
        }
        for (u, l) in log_w.iter_mut().zip(losses) {
            // gradient of the objective: L + τ (ln α + 1)
            *u -= step * (l + tau * (*u + 1.0));
        }
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + log_w.iter().map(|u| (u - max).exp()).sum::<f64>().ln();
        log_w.iter_mut().for_each(|u| *u -= lse);
        residual = spread(&log_w);
    }
    if residual <= tol {
        let w: Vec<f64> = log_w.iter().map(|u| u.exp()).collect();
        let z: f64 = w.iter().sum();
        return Ok(SimplexPoint(w.into_iter().map(|v| v / z).collect()));
    }
    Err(SecaError::NonConvergence { iters, residual })
}

/// Uniform (Dirichlet(1)) draws plus every vertex and the barycenter.
pub fn probe_points(n: usize, random: usize, rng: &mut ChaCha8Rng) -> Vec<SimplexPoint> {
    let mut out = Vec::with_capacity(random + n + 1);
    for _ in 0..random {
        let e: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let z: f64 = e.iter().sum();
        out.push(SimplexPoint(e.into_iter().map(|v| v / z).collect()));
    }
    out.extend((0..n).map(|j| SimplexPoint::vertex(n, j)));
    out.push(SimplexPoint::uniform(n));
    out
}

pub const NUMERIC_ITERS: usize = 10_000;
pub const NUMERIC_TOL: f64 = 1e-12;
pub const MATCH_TOL: f64 = 1e-5;
pub const OBJECTIVE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct InstanceReport {
    pub index: usize,
    pub teachers: usize,
    pub tau: f64,
    /// ∞-norm distance between closed-form and numeric weights.
    pub max_abs_diff: f64,
    /// Smallest `objective(probe) − objective(closed form)` over all probes.
    pub min_probe_gap: f64,
    pub probes: usize,
    pub passed: bool,
}

/// Seeded grid of instances with 2..=8 teachers, losses in `[0, 5)` and
/// `τ` cycling through {0.1, 1, 10}.
pub fn check_grid(seed: u64, instances: usize, probes_per_instance: usize) -> Result<Vec<InstanceReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taus = [0.1, 1.0, 10.0];
    let mut out = Vec::with_capacity(instances);
    for index in 0..instances {
        let n = rng.random_range(2..=8);
        let tau = taus[index % 3];
        let losses: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 5.0).collect();
        let closed = closed_form_weights(&losses, tau)?;
        let numeric = numeric_minimize(&losses, tau, NUMERIC_ITERS, NUMERIC_TOL)?;
        let max_abs_diff = closed
            .weights()
            .iter()
            .zip(numeric.weights())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let best = surrogate_objective(&closed, &losses, tau)?;
        let probes = probe_points(n, probes_per_instance, &mut rng);
        let mut min_probe_gap = f64::INFINITY;
        for p in &probes {
            min_probe_gap = min_probe_gap.min(surrogate_objective(p, &losses, tau)? - best);
        }
        out.push(InstanceReport {
            index,
            teachers: n,
            tau,
            max_abs_diff,
            min_probe_gap,
            probes: probes.len(),
            passed: max_abs_diff <= MATCH_TOL && min_probe_gap >= -OBJECTIVE_SLACK,
        });
    }
    Ok(out)
}
