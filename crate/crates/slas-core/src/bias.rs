//! Standard-deviation estimator bias: exact chi-distribution closed forms,
//! Monte-Carlo counterparts, and the histogram-model analysis of the
//! normalized advantage's miscalibration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::advantage::{mean, population_std};
use crate::error::{Error, Result};

/// Discrete reward model: bin masses, per-bin expected rollout rewards,
/// per-bin reward spreads, and the reference sample's per-bin point rewards.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistogramRewardModel {
    pub masses: Vec<f64>,
    pub bin_means: Vec<f64>,
    pub bin_spreads: Vec<f64>,
    pub point_rewards: Vec<f64>,
}

impl HistogramRewardModel {
    pub fn new(
        masses: Vec<f64>,
        bin_means: Vec<f64>,
        bin_spreads: Vec<f64>,
        point_rewards: Vec<f64>,
    ) -> Result<Self> {
        let n = masses.len();
        if n == 0 {
            return Err(Error::Config("histogram model needs at least 1 bin".into()));
        }
        if bin_means.len() != n || bin_spreads.len() != n || point_rewards.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: bin_means.len().max(bin_spreads.len()).max(point_rewards.len()) });
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("bin masses must sum to 1, got {total}")));
        }
        if bin_spreads.iter().any(|s| *s < 0.0) {
            return Err(Error::Config("bin spreads must be >= 0".into()));
        }
        Ok(Self { masses, bin_means, bin_spreads, point_rewards })
    }

    pub fn bins(&self) -> usize {
        self.masses.len()
    }
}

/// Monte-Carlo estimate next to its closed form, with a 95% normal CI.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiasReport {
    pub group_size: usize,
    pub estimate: f64,
    pub exact: f64,
    pub rel_bias: f64,
    pub ci_halfwidth: f64,
}

/// Expected sample std of a Gaussian group: sigma * sqrt(2/(G-1)) * Gamma(G/2)/Gamma((G-1)/2).
pub fn exact_std_bias_gaussian(group_size: usize, sigma: f64) -> Result<f64> {
    if group_size < 2 {
        return Err(Error::GroupTooSmall(group_size));
    }
    if sigma <= 0.0 {
        return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
    }
    let g = group_size as f64;
    // log-gamma keeps the ratio finite at large G
    let log_ratio = ln_gamma(g / 2.0) - ln_gamma((g - 1.0) / 2.0);
    Ok(sigma * (0.5 * (2.0 / (g - 1.0)).ln() + log_ratio).exp())
}

/// Sample std with the G-1 divisor.
pub fn sample_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn mean_and_ci(samples: &[f64]) -> (f64, f64) {
    let m = mean(samples);
    let var = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
    (m, 1.96 * (var / samples.len() as f64).sqrt())
}

/// Monte-Carlo mean of the sample std of Gaussian groups.
pub fn monte_carlo_std_bias(
    group_size: usize,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<BiasReport> {
    if trials < 1000 {
        return Err(Error::Precondition(format!("trials must be >= 1000, got {trials}")));
    }
    let exact = exact_std_bias_gaussian(group_size, sigma)?;
    let base = ChaCha8Rng::seed_from_u64(seed);
    let mut stds = Vec::with_capacity(trials);
    for trial in 0..trials {
        // independent stream per trial, so results do not depend on execution order
        let mut rng = base.clone();
        rng.set_stream(trial as u64);
        let group: Vec<f64> = (0..group_size)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma * z
            })
            .collect();
        stds.push(sample_std(&group));
    }
    let (estimate, ci_halfwidth) = mean_and_ci(&stds);
    Ok(BiasReport {
        group_size,
        estimate,
        exact,
        rel_bias: (estimate - sigma) / sigma,
        ci_halfwidth,
    })
}

/// Closed-form expected standardized advantage of the reference sample:
/// (G-1)/G * sum_j p_j (r_j - eta_j) / (sigma_j + epsilon).
pub fn expected_standardized_advantage(
    model: &HistogramRewardModel,
    group_size: usize,
    epsilon: f64,
) -> Result<f64> {
    if group_size < 2 {
        return Err(Error::GroupTooSmall(group_size));
    }
    let g = group_size as f64;
    let mut sum = 0.0;
    for j in 0..model.bins() {
        let denom = model.bin_spreads[j] + epsilon;
        if denom == 0.0 {
            return Err(Error::SingularDenominator(j));
        }
        sum += model.masses[j] * (model.point_rewards[j] - model.bin_means[j]) / denom;
    }
    Ok((g - 1.0) / g * sum)
}

/// True advantage: sum_j p_j (r_j - eta_j).
pub fn true_advantage(model: &HistogramRewardModel) -> f64 {
    (0..model.bins())
        .map(|j| model.masses[j] * (model.point_rewards[j] - model.bin_means[j]))
        .sum()
}

/// Simulates the literal normalized-advantage pipeline on the histogram model.
///
/// Per trial the reward bin is drawn from the masses; the reference sample
/// takes the bin's point reward, the other G-1 rollouts draw Gaussian rewards
/// around the bin mean with the bin's spread. The normalized advantage of the
/// reference sample is averaged over trials and compared against the closed
/// form; any residual G-dependent discrepancy stays visible in the report.
pub fn miscalibration_simulation(
    model: &HistogramRewardModel,
    group_size: usize,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<BiasReport> {
    if trials < 10_000 {
        return Err(Error::Precondition(format!("trials must be >= 10000, got {trials}")));
    }
    if group_size < 8 {
        return Err(Error::Precondition(format!("group size must be >= 8, got {group_size}")));
    }
    let exact = expected_standardized_advantage(model, group_size, epsilon)?;
    let base = ChaCha8Rng::seed_from_u64(seed);
    let mut advantages = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = base.clone();
        rng.set_stream(trial as u64);
        let bin = sample_bin(&model.masses, rng.random::<f64>());
        let mut rewards = Vec::with_capacity(group_size);
        rewards.push(model.point_rewards[bin]);
        for _ in 1..group_size {
            let z: f64 = StandardNormal.sample(&mut rng);
            rewards.push(model.bin_means[bin] + model.bin_spreads[bin] * z);
        }
        let m = mean(&rewards);
        let denom = population_std(&rewards) + epsilon;
        advantages.push(if denom == 0.0 { 0.0 } else { (rewards[0] - m) / denom });
    }
    let (estimate, ci_halfwidth) = mean_and_ci(&advantages);
    Ok(BiasReport {
        group_size,
        estimate,
        exact,
        rel_bias: if exact != 0.0 { (estimate - exact) / exact } else { estimate },
        ci_halfwidth,
    })
}

fn sample_bin(masses: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in masses.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    masses.len() - 1
}
