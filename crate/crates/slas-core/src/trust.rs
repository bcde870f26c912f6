//! Trust-region safety machinery: the moment budget of the KL-constrained
//! update, admissible shaping exponents under bounded and sub-Gaussian
//! rewards, matrix-free top-eigenvalue estimation, score-norm estimation,
//! and an exact-enumeration check of the KL bound on softmax families.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::SimplexPolicy;

/// KL budget, step size, score-norm bound, top Fisher eigenvalue, and the
/// reward-tail constants from which an admissible shaping exponent follows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrustRegionBudget {
    pub zeta: f64,
    pub tau: f64,
    pub g_max: f64,
    pub lambda_max: f64,
    pub r_max: Option<f64>,
    pub k_r: Option<f64>,
    pub c_const: f64,
}

impl TrustRegionBudget {
    pub fn new(zeta: f64, tau: f64, g_max: f64, lambda_max: f64) -> Self {
        Self { zeta, tau, g_max, lambda_max, r_max: None, k_r: None, c_const: 1.0 }
    }

    pub fn with_r_max(mut self, r_max: f64) -> Self {
        self.r_max = Some(r_max);
        self
    }

    pub fn with_k_r(mut self, k_r: f64) -> Self {
        self.k_r = Some(k_r);
        self
    }

    pub fn with_c_const(mut self, c: f64) -> Self {
        self.c_const = c;
        self
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("zeta", self.zeta),
            ("tau", self.tau),
            ("g_max", self.g_max),
            ("lambda_max", self.lambda_max),
            ("c_const", self.c_const),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GammaRegime {
    Bounded,
    SubGaussian,
    MomentOracle,
}

/// Budget right-hand side and the admissible exponent (None = infeasible).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GammaBoundReport {
    pub budget_rhs: f64,
    pub gamma_max: Option<f64>,
    pub regime: GammaRegime,
}

/// Upper bound on the 2(1+gamma)-th centered-reward moment: 2 zeta / (tau^2 lambda_max g_max).
pub fn moment_bound_rhs(budget: &TrustRegionBudget) -> Result<f64> {
    budget.validate()?;
    Ok(2.0 * budget.zeta / (budget.tau.powi(2) * budget.lambda_max * budget.g_max))
}

/// Admissible exponent for |dr| <= R_max: gamma <= log(rhs) / (2 log R_max) - 1.
pub fn gamma_bound_bounded(budget: &TrustRegionBudget) -> Result<GammaBoundReport> {
    let rhs = moment_bound_rhs(budget)?;
    let r_max = budget
        .r_max
        .ok_or_else(|| Error::Config("r_max must be set for the bounded regime".into()))?;
    if r_max <= 0.0 {
        return Err(Error::Config(format!("r_max must be > 0, got {r_max}")));
    }
    if r_max == 1.0 {
        return Err(Error::RegimeInvalid("r_max = 1 makes the bound degenerate (log 0)".into()));
    }
    if r_max < 1.0 {
        return Err(Error::RegimeInvalid(
            "r_max < 1 flips the inequality direction; the bounded corollary does not apply".into(),
        ));
    }
    let gamma = rhs.ln() / (2.0 * r_max.ln()) - 1.0;
    // tolerate rounding at the gamma = 0 boundary
    Ok(GammaBoundReport {
        budget_rhs: rhs,
        gamma_max: if gamma >= -1e-12 { Some(gamma.max(0.0)) } else { None },
        regime: GammaRegime::Bounded,
    })
}

/// Largest gamma >= 0 with (1+gamma)[log(1+gamma) + log(2 C^2 K_r^2)] <= log(rhs),
/// by bisection on the increasing branch.
pub fn gamma_bound_subgaussian(budget: &TrustRegionBudget) -> Result<GammaBoundReport> {
    let rhs = moment_bound_rhs(budget)?;
    let k_r = budget
        .k_r
        .ok_or_else(|| Error::Config("k_r must be set for the sub-Gaussian regime".into()))?;
    if k_r <= 0.0 {
        return Err(Error::Config(format!("k_r must be > 0, got {k_r}")));
    }
    let c = (2.0 * budget.c_const.powi(2) * k_r.powi(2)).ln();
    let target = rhs.ln();
    let f = |gamma: f64| (1.0 + gamma) * ((1.0 + gamma).ln() + c);
    if f(0.0) > target + 1e-12 {
        return Ok(GammaBoundReport { budget_rhs: rhs, gamma_max: None, regime: GammaRegime::SubGaussian });
    }
    // f has its minimum at 1+gamma = exp(-1-c); bisect on the branch beyond it
    let mut lo = ((-1.0 - c).exp() - 1.0).max(0.0);
    let mut hi = lo.max(1.0);
    while f(hi) <= target {
        hi = 2.0 * hi + 1.0;
        if hi > 1e12 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(GammaBoundReport { budget_rhs: rhs, gamma_max: Some(lo), regime: GammaRegime::SubGaussian })
}

/// Dominant eigenvalue of a symmetric PSD operator by power iteration with a
/// deterministic seeded start. Returns the final Rayleigh quotient.
pub fn estimate_lambda_max<F>(
    fisher_vector_product: F,
    dim: usize,
    iterations: usize,
    tol: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if dim == 0 {
        return Err(Error::Config("operator dimension must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut rayleigh = f64::INFINITY;
    for _ in 0..iterations {
        let w = fisher_vector_product(&v);
        if w.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: w.len() });
        }
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        let next = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let change = if rayleigh.is_finite() {
            (next - rayleigh).abs() / next.abs().max(f64::MIN_POSITIVE)
        } else {
            f64::INFINITY
        };
        rayleigh = next;
        v = w.into_iter().map(|x| x / nw).collect();
        if change < tol {
            return Ok(rayleigh);
        }
    }
    Err(Error::NonConvergence { iterations, residual: rayleigh })
}

/// Conservative score-norm bound: Monte-Carlo mean of squared score norms
/// plus three standard errors.
pub fn estimate_g_max<F>(mut score_sampler: F, trials: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&mut ChaCha8Rng) -> Vec<f64>,
{
    if trials < 1000 {
        return Err(Error::Precondition(format!("trials must be >= 1000, got {trials}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sq_norms = Vec::with_capacity(trials);
    for _ in 0..trials {
        let score = score_sampler(&mut rng);
        sq_norms.push(score.iter().map(|s| s * s).sum::<f64>());
    }
    let mean = sq_norms.iter().sum::<f64>() / trials as f64;
    let var = sq_norms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    Ok(mean + 3.0 * (var / trials as f64).sqrt())
}

/// Outcome of one exact-enumeration KL bound check on a softmax family.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KlBoundCheck {
    pub measured_kl: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Fisher information of a softmax family at the given logits: diag(p) - p p^T.
pub fn softmax_fisher(policy: &SimplexPolicy) -> DMatrix<f64> {
    let p = DVector::from_column_slice(policy.probs());
    DMatrix::from_diagonal(&p) - &p * p.transpose()
}

/// Takes the shaped-gradient step theta' = theta + tau * g~ on a softmax
/// family by exact enumeration and compares the exact KL(new || old) against
/// (tau^2/2) * lambda_max * M_{2(1+gamma)} * G_max.
pub fn empirical_kl_bound_check(
    logits: &[f64],
    rewards: &[f64],
    gamma: f64,
    tau: f64,
) -> Result<KlBoundCheck> {
    if rewards.len() != logits.len() {
        return Err(Error::DimensionMismatch { expected: logits.len(), got: rewards.len() });
    }
    if gamma < 0.0 {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    let old = SimplexPolicy::from_logits(logits);
    let p = old.probs().to_vec();
    let n = p.len();
    let mean_r = old.expectation(rewards);
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean_r).collect();

    // shaped gradient g~ = E[|dr|^gamma dr (e_y - p)]
    let mut shaped_grad = vec![0.0; n];
    for y in 0..n {
        let weight = p[y] * centered[y].abs().powf(gamma) * centered[y];
        for k in 0..n {
            shaped_grad[k] += weight * ((if y == k { 1.0 } else { 0.0 }) - p[k]);
        }
    }
    let new_logits: Vec<f64> = logits.iter().zip(&shaped_grad).map(|(l, g)| l + tau * g).collect();
    let new = SimplexPolicy::from_logits(&new_logits);
    let measured_kl: f64 = new
        .probs()
        .iter()
        .zip(&p)
        .map(|(q, pi)| q * (q / pi).ln())
        .sum();

    let fisher = softmax_fisher(&old);
    let lambda_max = fisher
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let moment: f64 = (0..n).map(|y| p[y] * centered[y].abs().powf(2.0 * (1.0 + gamma))).sum();
    // G_max is the sup of the squared score norm over outcomes
    let g_max: f64 = (0..n)
        .map(|y| {
            (0..n)
                .map(|k| {
                    let s = (if y == k { 1.0 } else { 0.0 }) - p[k];
                    s * s
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let bound = 0.5 * tau * tau * lambda_max * moment * g_max;
    Ok(KlBoundCheck { measured_kl, bound, holds: measured_kl <= bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn budget() -> TrustRegionBudget {
        TrustRegionBudget::new(0.5, 0.1, 1.0, 1.0)
    }

    #[test]
    fn moment_bound_rhs_examples() {
        assert_abs_diff_eq!(moment_bound_rhs(&budget()).unwrap(), 100.0, epsilon = 1e-12);
        let double_zeta = TrustRegionBudget::new(1.0, 0.1, 1.0, 1.0);
        assert_abs_diff_eq!(moment_bound_rhs(&double_zeta).unwrap(), 200.0, epsilon = 1e-12);
        let double_tau = TrustRegionBudget::new(0.5, 0.2, 1.0, 1.0);
        assert_abs_diff_eq!(moment_bound_rhs(&double_tau).unwrap(), 25.0, epsilon = 1e-12);
        let bad = TrustRegionBudget::new(-1.0, 0.1, 1.0, 1.0);
        assert!(moment_bound_rhs(&bad).is_err());
    }

    #[test]
    fn bounded_gamma_hand_case() {
        let report = gamma_bound_bounded(&budget().with_r_max(2.0)).unwrap();
        let want = 100f64.ln() / (2.0 * 2f64.ln()) - 1.0;
        assert_abs_diff_eq!(report.gamma_max.unwrap(), want, epsilon = 1e-12);
        assert_abs_diff_eq!(report.gamma_max.unwrap(), 2.322, epsilon = 1e-3);
    }

    #[test]
    fn bounded_gamma_boundary_and_infeasible() {
        // rhs = R_max^2 = 100 -> gamma_max = 0
        let report = gamma_bound_bounded(&budget().with_r_max(10.0)).unwrap();
        assert_abs_diff_eq!(report.gamma_max.unwrap(), 0.0, epsilon = 1e-12);
        // rhs < R_max^2 -> infeasible
        let report = gamma_bound_bounded(&budget().with_r_max(11.0)).unwrap();
        assert!(report.gamma_max.is_none());
        assert!(gamma_bound_bounded(&budget().with_r_max(1.0)).is_err());
        assert!(gamma_bound_bounded(&budget().with_r_max(0.5)).is_err());
        assert!(gamma_bound_bounded(&budget()).is_err());
    }

    #[test]
    fn bounded_gamma_monotone_in_r_max_and_rhs() {
        let mut prev = f64::INFINITY;
        for r_max in [1.5, 2.0, 3.0, 5.0, 8.0] {
            let g = gamma_bound_bounded(&budget().with_r_max(r_max)).unwrap().gamma_max.unwrap();
            assert!(g < prev);
            prev = g;
        }
        let mut prev = 0.0;
        for zeta in [0.5, 1.0, 2.0, 4.0] {
            let b = TrustRegionBudget::new(zeta, 0.1, 1.0, 1.0).with_r_max(2.0);
            let g = gamma_bound_bounded(&b).unwrap().gamma_max.unwrap();
            assert!(g > prev);
            prev = g;
        }
    }

    #[test]
    fn subgaussian_gamma_hand_case() {
        // 2 C^2 K_r^2 = 1, rhs = e: (1+gamma) ln(1+gamma) = 1
        let b = TrustRegionBudget {
            zeta: std::f64::consts::E / 2.0,
            tau: 1.0,
            g_max: 1.0,
            lambda_max: 1.0,
            r_max: None,
            k_r: Some(0.5f64.sqrt()),
            c_const: 1.0,
        };
        let report = gamma_bound_subgaussian(&b).unwrap();
        let gamma = report.gamma_max.unwrap();
        assert_abs_diff_eq!((1.0 + gamma) * (1.0 + gamma).ln(), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(gamma, 0.763, epsilon = 1e-3);
    }

    #[test]
    fn subgaussian_gamma_boundary_and_monotonicity() {
        // log(2 C^2 K_r^2) = log(rhs): gamma_max = 0
        let k = (50.0f64).sqrt(); // 2 K^2 = 100 = rhs
        let report = gamma_bound_subgaussian(&budget().with_k_r(k)).unwrap();
        assert_abs_diff_eq!(report.gamma_max.unwrap(), 0.0, epsilon = 1e-8);
        // doubling K_r lowers gamma_max
        let g1 = gamma_bound_subgaussian(&budget().with_k_r(1.0)).unwrap().gamma_max.unwrap();
        let g2 = gamma_bound_subgaussian(&budget().with_k_r(2.0)).unwrap().gamma_max.unwrap();
        assert!(g2 < g1);
        // slightly larger K_r than the boundary: infeasible
        let report = gamma_bound_subgaussian(&budget().with_k_r(k * 1.01)).unwrap();
        assert!(report.gamma_max.is_none());
    }

    #[test]
    fn subgaussian_defining_inequality_tight_at_gamma_max() {
        for (zeta, k_r, c) in [(0.5, 1.0, 1.0), (2.0, 0.3, 1.0), (1.0, 0.7, 2.0)] {
            let b = TrustRegionBudget::new(zeta, 0.1, 1.0, 1.0).with_k_r(k_r).with_c_const(c);
            let rhs = moment_bound_rhs(&b).unwrap();
            if let Some(g) = gamma_bound_subgaussian(&b).unwrap().gamma_max {
                let lhs = (1.0 + g) * ((1.0 + g).ln() + (2.0 * c * c * k_r * k_r).ln());
                assert_abs_diff_eq!(lhs, rhs.ln(), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn power_iteration_examples() {
        // logit-Bernoulli Fisher at p = 0.5 is the 1x1 matrix [0.25]
        let lam = estimate_lambda_max(|v| vec![0.25 * v[0]], 1, 50, 1e-10, 1).unwrap();
        assert_abs_diff_eq!(lam, 0.25, epsilon = 1e-10);

        let lam = estimate_lambda_max(
            |v| vec![3.0 * v[0], 1.0 * v[1]],
            2,
            50,
            1e-10,
            2,
        )
        .unwrap();
        assert_abs_diff_eq!(lam, 3.0, epsilon = 1e-8);

        let lam = estimate_lambda_max(|v| v.to_vec(), 7, 50, 1e-10, 3).unwrap();
        assert_abs_diff_eq!(lam, 1.0, epsilon = 1e-12);

        let lam = estimate_lambda_max(|v| vec![0.0; v.len()], 4, 50, 1e-10, 4).unwrap();
        assert_eq!(lam, 0.0);
    }

    #[test]
    fn power_iteration_sandwich_against_dense_eigen() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for dim in [4usize, 8, 16, 32] {
            let a = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() - 0.5);
            let spd = &a * a.transpose();
            let dense_max = spd
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let op = |v: &[f64]| {
                let x = DVector::from_column_slice(v);
                (&spd * x).as_slice().to_vec()
            };
            let lam = estimate_lambda_max(op, dim, 5000, 1e-13, 5).unwrap();
            assert_abs_diff_eq!(lam, dense_max, epsilon = 1e-6 * dense_max.max(1.0));
            assert!(lam <= spd.trace() + 1e-9);
        }
    }

    #[test]
    fn g_max_estimate_examples() {
        // logit-Bernoulli at p = 0.5: score is +-0.5, squared norm 0.25
        let est = estimate_g_max(
            |rng| {
                let s: f64 = if rng.random::<bool>() { 0.5 } else { -0.5 };
                vec![s]
            },
            100_000,
            1,
        )
        .unwrap();
        assert!(est >= 0.24 && est <= 0.27, "estimate {est}");

        let zero = estimate_g_max(|_| vec![0.0, 0.0], 1000, 2).unwrap();
        assert_eq!(zero, 0.0);

        let base = estimate_g_max(|rng| vec![rng.random::<f64>()], 10_000, 3).unwrap();
        let scaled = estimate_g_max(|rng| vec![2.0 * rng.random::<f64>()], 10_000, 3).unwrap();
        assert_abs_diff_eq!(scaled / base, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn kl_bound_check_basic_cases() {
        // constant rewards: shaped gradient is zero
        let r = empirical_kl_bound_check(&[0.1, -0.4], &[1.0, 1.0], 0.0, 0.01).unwrap();
        assert_eq!(r.measured_kl, 0.0);
        assert!(r.holds);

        // logit-Bernoulli with +-1 advantage, gamma = 0
        let r = empirical_kl_bound_check(&[0.0, 0.0], &[1.0, -1.0], 0.0, 0.01).unwrap();
        assert!(r.holds && r.bound / r.measured_kl >= 1.0);

        // halving tau quarters the measured KL (small-step regime)
        let a = empirical_kl_bound_check(&[0.2, -0.3, 0.5], &[1.0, 0.0, -1.0], 0.5, 0.01).unwrap();
        let b = empirical_kl_bound_check(&[0.2, -0.3, 0.5], &[1.0, 0.0, -1.0], 0.5, 0.005).unwrap();
        let ratio = a.measured_kl / b.measured_kl;
        assert!((ratio - 4.0).abs() / 4.0 < 0.1, "ratio {ratio}");
    }
}
