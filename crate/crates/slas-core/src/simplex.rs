//! Exact and brute-force checks of the optimal functional ascent on explicit
//! discrete probability simplices: the linear closed form, the
//! advantage-weighted variant, a projected-gradient QP oracle, the quadratic
//! KL expansion, and baseline invariance of the score-function gradient.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Explicit discrete distribution over n outcomes, all strictly positive.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimplexPolicy {
    probs: Vec<f64>,
}

impl SimplexPolicy {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Config("policy needs at least one outcome".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("probabilities must sum to 1, got {total}")));
        }
        if probs.iter().any(|p| *p <= 0.0) {
            return Err(Error::Config("all probabilities must be strictly positive".into()));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self { probs: exps.iter().map(|e| e / total).collect() }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n(&self) -> usize {
        self.probs.len()
    }

    pub fn expectation(&self, values: &[f64]) -> f64 {
        self.probs.iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

/// A zero-sum perturbation of the simplex plus the multiplier and step that
/// produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AscentDirection {
    pub delta: Vec<f64>,
    pub multiplier: f64,
    pub step: f64,
}

/// Optimal ascent under the plain Fisher-Rao metric:
/// delta_y = eta * pi_y * (r_y - E_pi[r]).
pub fn optimal_ascent_linear(
    policy: &SimplexPolicy,
    rewards: &[f64],
    eta: f64,
) -> Result<AscentDirection> {
    if rewards.len() != policy.n() {
        return Err(Error::DimensionMismatch { expected: policy.n(), got: rewards.len() });
    }
    if eta <= 0.0 {
        return Err(Error::Config(format!("eta must be > 0, got {eta}")));
    }
    // the zero-sum constraint forces lambda = -E_pi[r]
    let lambda = -policy.expectation(rewards);
    let delta = policy
        .probs()
        .iter()
        .zip(rewards)
        .map(|(p, r)| eta * p * (r + lambda))
        .collect();
    Ok(AscentDirection { delta, multiplier: lambda, step: eta })
}

/// Optimal ascent under the advantage-weighted metric with weights
/// w_y = |A_y|^gamma: delta_y = eta * w_y * pi_y * (r_y + lambda').
pub fn optimal_ascent_weighted(
    policy: &SimplexPolicy,
    rewards: &[f64],
    metric_advantage: &[f64],
    gamma: f64,
    eta: f64,
) -> Result<AscentDirection> {
    let n = policy.n();
    if rewards.len() != n || metric_advantage.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: rewards.len().min(metric_advantage.len()) });
    }
    if eta <= 0.0 {
        return Err(Error::Config(format!("eta must be > 0, got {eta}")));
    }
    let weights: Vec<f64> = metric_advantage
        .iter()
        .map(|a| if gamma == 0.0 { 1.0 } else { a.abs().powf(gamma) })
        .collect();
    let wp: f64 = weights.iter().zip(policy.probs()).map(|(w, p)| w * p).sum();
    if wp == 0.0 {
        return Err(Error::DegenerateMetric);
    }
    let wpr: f64 = weights
        .iter()
        .zip(policy.probs())
        .zip(rewards)
        .map(|((w, p), r)| w * p * r)
        .sum();
    let lambda = -wpr / wp;
    let delta = weights
        .iter()
        .zip(policy.probs())
        .zip(rewards)
        .map(|((w, p), r)| eta * w * p * (r + lambda))
        .collect();
    Ok(AscentDirection { delta, multiplier: lambda, step: eta })
}

/// Numerically maximizes sum_y r_y d_y - (1/2 eta) sum_y d_y^2 / (w_y pi_y)
/// subject to sum d = 0 by projected gradient ascent. Zero-weight coordinates
/// are held at zero; the projection subtracts the mean over free coordinates.
pub fn brute_force_ascent(
    policy: &SimplexPolicy,
    rewards: &[f64],
    weights: &[f64],
    eta: f64,
    iterations: usize,
    tol: f64,
) -> Result<AscentDirection> {
    let n = policy.n();
    if rewards.len() != n || weights.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: rewards.len().min(weights.len()) });
    }
    if n > 64 {
        return Err(Error::Precondition(format!("oracle scale is n <= 64, got {n}")));
    }
    let free: Vec<usize> = (0..n).filter(|&i| weights[i] > 0.0).collect();
    if free.is_empty() {
        return Err(Error::DegenerateMetric);
    }
    let curvature: Vec<f64> = free.iter().map(|&i| weights[i] * policy.probs()[i]).collect();
    let step = 0.5 * eta * curvature.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut delta = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..iterations {
        let grad: Vec<f64> = free
            .iter()
            .enumerate()
            .map(|(k, &i)| rewards[i] - delta[i] / (eta * curvature[k]))
            .collect();
        let grad_mean: f64 = grad.iter().sum::<f64>() / free.len() as f64;
        residual = grad.iter().map(|g| (g - grad_mean).abs()).fold(0.0, f64::max);
        if residual <= tol {
            break;
        }
        for (k, &i) in free.iter().enumerate() {
            delta[i] += step * (grad[k] - grad_mean);
        }
    }
    if residual > tol {
        return Err(Error::NonConvergence { iterations, residual });
    }
    // multiplier recovered from the stationarity condition on free coordinates
    let lambda = free
        .iter()
        .enumerate()
        .map(|(k, &i)| delta[i] / (eta * curvature[k]) - rewards[i])
        .sum::<f64>()
        / free.len() as f64;
    Ok(AscentDirection { delta, multiplier: lambda, step: eta })
}

/// Exact discrete KL next to its quadratic expansion (1/2) sum d^2 / pi.
pub fn kl_quadratic_check(
    policy: &SimplexPolicy,
    direction: &AscentDirection,
) -> Result<(f64, f64)> {
    if direction.delta.len() != policy.n() {
        return Err(Error::DimensionMismatch { expected: policy.n(), got: direction.delta.len() });
    }
    let mut exact = 0.0;
    let mut quadratic = 0.0;
    for (p, d) in policy.probs().iter().zip(&direction.delta) {
        let q = p + d;
        if q <= 0.0 {
            return Err(Error::Domain(format!("perturbed probability {q} is not positive")));
        }
        exact += q * (q / p).ln();
        quadratic += 0.5 * d * d / p;
    }
    Ok((exact, quadratic))
}

/// Score-function gradients with and without an added per-prompt baseline,
/// by exact enumeration: g = sum_y pi_y f_y * scorerow_y.
pub fn baseline_invariance_check(
    policy: &SimplexPolicy,
    f: &[f64],
    baseline: f64,
    score_jacobian: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = policy.n();
    if f.len() != n || score_jacobian.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, got: f.len().min(score_jacobian.nrows()) });
    }
    let dim = score_jacobian.ncols();
    let mut g1 = DVector::zeros(dim);
    let mut g2 = DVector::zeros(dim);
    for y in 0..n {
        let row = score_jacobian.row(y).transpose();
        let p = policy.probs()[y];
        g1 += p * f[y] * &row;
        g2 += p * (f[y] + baseline) * &row;
    }
    Ok((g1, g2))
}

/// Score Jacobian of the softmax (logit) parameterization of a simplex policy:
/// row y is e_y - pi.
pub fn softmax_score_jacobian(policy: &SimplexPolicy) -> DMatrix<f64> {
    let n = policy.n();
    DMatrix::from_fn(n, n, |y, k| (if y == k { 1.0 } else { 0.0 }) - policy.probs()[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_ascent_hand_case() {
        let pi = SimplexPolicy::new(vec![0.5, 0.5]).unwrap();
        let dir = optimal_ascent_linear(&pi, &[1.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(dir.delta[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(dir.delta[1], -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(dir.multiplier, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn linear_ascent_vanishes_for_constant_rewards() {
        let pi = SimplexPolicy::new(vec![0.2, 0.3, 0.5]).unwrap();
        let dir = optimal_ascent_linear(&pi, &[2.5, 2.5, 2.5], 1.0).unwrap();
        assert!(dir.delta.iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn linear_ascent_uniform_policy_is_centered_rewards_over_n() {
        let pi = SimplexPolicy::uniform(4);
        let r = [1.0, 3.0, -2.0, 0.5];
        let mean = r.iter().sum::<f64>() / 4.0;
        let dir = optimal_ascent_linear(&pi, &r, 2.0).unwrap();
        for (d, ri) in dir.delta.iter().zip(r) {
            assert_abs_diff_eq!(*d, 2.0 * (ri - mean) / 4.0, epsilon = 1e-15);
        }
        assert!(optimal_ascent_linear(&pi, &[1.0], 1.0).is_err());
    }

    #[test]
    fn weighted_ascent_hand_case_equals_power_form() {
        let pi = SimplexPolicy::new(vec![0.5, 0.5]).unwrap();
        let dir = optimal_ascent_weighted(&pi, &[1.0, 0.0], &[0.5, -0.5], 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(dir.delta[0], 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(dir.delta[1], -0.125, epsilon = 1e-15);
        // pi * sign(A) |A|^{1+gamma} with A = +-0.5, gamma = 1
        assert_abs_diff_eq!(dir.delta[0], 0.5 * 0.5f64.powi(2), epsilon = 1e-15);
    }

    #[test]
    fn weighted_ascent_gamma_zero_matches_linear() {
        let pi = SimplexPolicy::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = [0.3, -1.0, 0.7, 0.2];
        let a = [0.5, 0.1, -0.2, 0.9];
        let lin = optimal_ascent_linear(&pi, &r, 1.5).unwrap();
        let w = optimal_ascent_weighted(&pi, &r, &a, 0.0, 1.5).unwrap();
        for (x, y) in lin.delta.iter().zip(&w.delta) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn weighted_ascent_zero_metric_weight_pins_coordinate() {
        let pi = SimplexPolicy::new(vec![0.3, 0.3, 0.4]).unwrap();
        let dir = optimal_ascent_weighted(&pi, &[1.0, 0.5, 0.0], &[0.4, 0.0, -0.4], 1.0, 1.0).unwrap();
        assert_eq!(dir.delta[1], 0.0);
        assert!(
            matches!(
                optimal_ascent_weighted(&pi, &[1.0, 0.5, 0.0], &[0.0, 0.0, 0.0], 1.0, 1.0),
                Err(Error::DegenerateMetric)
            )
        );
    }

    #[test]
    fn brute_force_matches_closed_forms() {
        let pi = SimplexPolicy::new(vec![0.15, 0.25, 0.35, 0.25]).unwrap();
        let r = [0.9, -0.4, 0.3, 0.1];
        let lin = optimal_ascent_linear(&pi, &r, 1.0).unwrap();
        let brute = brute_force_ascent(&pi, &r, &[1.0; 4], 1.0, 200_000, 1e-11).unwrap();
        for (a, b) in lin.delta.iter().zip(&brute.delta) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }

        let a: Vec<f64> = {
            let mean = pi.expectation(&r);
            r.iter().map(|x| x - mean).collect()
        };
        let gamma = 1.0;
        let weights: Vec<f64> = a.iter().map(|x| x.abs().powf(gamma)).collect();
        let weighted = optimal_ascent_weighted(&pi, &r, &a, gamma, 1.0).unwrap();
        let brute = brute_force_ascent(&pi, &r, &weights, 1.0, 200_000, 1e-11).unwrap();
        for (x, y) in weighted.delta.iter().zip(&brute.delta) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn brute_force_constant_rewards_converges_to_zero() {
        let pi = SimplexPolicy::new(vec![0.5, 0.5]).unwrap();
        let dir = brute_force_ascent(&pi, &[1.0, 1.0], &[1.0, 1.0], 1.0, 1000, 1e-12).unwrap();
        assert!(dir.delta.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn kl_quadratic_hand_case() {
        let pi = SimplexPolicy::new(vec![0.5, 0.5]).unwrap();
        let dir = AscentDirection { delta: vec![0.01, -0.01], multiplier: 0.0, step: 1.0 };
        let (exact, quad) = kl_quadratic_check(&pi, &dir).unwrap();
        assert_abs_diff_eq!(quad, 2.0e-4, epsilon = 1e-12);
        assert_abs_diff_eq!(exact, 2.0003e-4, epsilon = 5e-8);

        let zero = AscentDirection { delta: vec![0.0, 0.0], multiplier: 0.0, step: 1.0 };
        assert_eq!(kl_quadratic_check(&pi, &zero).unwrap(), (0.0, 0.0));

        let half = AscentDirection { delta: vec![0.005, -0.005], multiplier: 0.0, step: 1.0 };
        let (_, q_half) = kl_quadratic_check(&pi, &half).unwrap();
        assert_abs_diff_eq!(q_half, quad / 4.0, epsilon = 1e-18);

        let bad = AscentDirection { delta: vec![-0.6, 0.6], multiplier: 0.0, step: 1.0 };
        assert!(kl_quadratic_check(&pi, &bad).is_err());
    }

    #[test]
    fn baseline_invariance_softmax_hand_case() {
        let pi = SimplexPolicy::from_logits(&[0.3, -0.2, 0.9]);
        let jac = softmax_score_jacobian(&pi);
        let (g1, g2) = baseline_invariance_check(&pi, &[1.0, 2.0, 3.0], 100.0, &jac).unwrap();
        assert!((g1 - &g2).amax() <= 1e-10);
        let (g1, g2) = baseline_invariance_check(&pi, &[1.0, 2.0, 3.0], 0.0, &jac).unwrap();
        assert_eq!(g1, g2);
        // constant f is itself a baseline
        let (g, _) = baseline_invariance_check(&pi, &[5.0, 5.0, 5.0], 0.0, &jac).unwrap();
        assert!(g.amax() <= 1e-14);
    }
}
