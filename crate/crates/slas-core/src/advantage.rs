//! Group-relative advantage estimators and the super-linear shaping transform.
//!
//! Everything here is a pure function over one prompt's scalar rollout
//! rewards: the standard normalized estimator, the mean-centered variant,
//! the sign-preserving power shaping applied on top of it, and batch-level
//! rescaling across groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One prompt's G scalar rollout rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardGroup {
    pub prompt_id: String,
    pub rewards: Vec<f64>,
}

impl RewardGroup {
    pub fn new(prompt_id: impl Into<String>, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(Error::GroupTooSmall(rewards.len()));
        }
        if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(Error::NonFiniteReward(i));
        }
        Ok(Self { prompt_id: prompt_id.into(), rewards })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapingMode {
    StdGrpo,
    MeanCentered,
    Slas,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormScope {
    Prompt,
    Batch,
    None,
}

/// Estimator mode, shaping exponent, std stabilizer, and normalization scope.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapingConfig {
    pub mode: ShapingMode,
    pub gamma: f64,
    pub epsilon: f64,
    pub norm_scope: NormScope,
}

impl ShapingConfig {
    pub fn std_grpo() -> Self {
        Self { mode: ShapingMode::StdGrpo, gamma: 0.0, epsilon: 1e-8, norm_scope: NormScope::Prompt }
    }

    pub fn mean_centered() -> Self {
        Self { mode: ShapingMode::MeanCentered, gamma: 0.0, epsilon: 1e-8, norm_scope: NormScope::None }
    }

    pub fn slas(gamma: f64, norm_scope: NormScope) -> Self {
        Self { mode: ShapingMode::Slas, gamma, epsilon: 1e-8, norm_scope }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-sample advantages aligned with the originating reward group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub mode_used: ShapingConfig,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard deviation dividing by G, not G-1.
pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

fn is_constant(values: &[f64]) -> bool {
    values.iter().all(|v| *v == values[0])
}

/// Standard normalized group-relative advantage: (r_i - mean) / (popstd + epsilon).
pub fn std_grpo_advantage(group: &RewardGroup, epsilon: f64) -> Result<AdvantageVector> {
    // exactly constant groups get exactly zero advantages; the summed mean
    // would otherwise differ from the shared value in the last bit
    if is_constant(&group.rewards) {
        let mut cfg = ShapingConfig::std_grpo();
        cfg.epsilon = epsilon;
        return Ok(AdvantageVector { values: vec![0.0; group.len()], mode_used: cfg });
    }
    let m = mean(&group.rewards);
    let denom = population_std(&group.rewards) + epsilon;
    let values = group
        .rewards
        .iter()
        .map(|r| {
            let num = r - m;
            // zero-variance group with epsilon = 0: the numerator vanishes first
            if num == 0.0 { 0.0 } else { num / denom }
        })
        .collect();
    let mut cfg = ShapingConfig::std_grpo();
    cfg.epsilon = epsilon;
    Ok(AdvantageVector { values, mode_used: cfg })
}

/// Mean-centered advantage without std normalization: r_i - mean(r).
pub fn mean_centered_advantage(group: &RewardGroup) -> Result<AdvantageVector> {
    if is_constant(&group.rewards) {
        return Ok(AdvantageVector {
            values: vec![0.0; group.len()],
            mode_used: ShapingConfig::mean_centered(),
        });
    }
    let m = mean(&group.rewards);
    let values = group.rewards.iter().map(|r| r - m).collect();
    Ok(AdvantageVector { values, mode_used: ShapingConfig::mean_centered() })
}

/// Super-linear shaping of a mean-centered advantage: sign(x) * |x|^(1+gamma).
pub fn slas_shape(centered: &AdvantageVector, gamma: f64) -> Result<AdvantageVector> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    let values = centered
        .values
        .iter()
        .map(|&x| if x == 0.0 { 0.0 } else { x.signum() * x.abs().powf(1.0 + gamma) })
        .collect();
    let mut cfg = centered.mode_used;
    cfg.mode = ShapingMode::Slas;
    cfg.gamma = gamma;
    Ok(AdvantageVector { values, mode_used: cfg })
}

/// Divide every scalar by the population std pooled over all groups in the batch.
pub fn batch_normalize(advantages: &[AdvantageVector], epsilon: f64) -> Result<Vec<AdvantageVector>> {
    if advantages.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pooled: Vec<f64> = advantages.iter().flat_map(|a| a.values.iter().copied()).collect();
    if pooled.len() < 2 {
        return Err(Error::Precondition(format!(
            "batch normalization needs at least 2 scalars, got {}",
            pooled.len()
        )));
    }
    let denom = population_std(&pooled) + epsilon;
    if denom == 0.0 {
        return Err(Error::DivisionHazard);
    }
    Ok(advantages
        .iter()
        .map(|a| {
            let mut cfg = a.mode_used;
            cfg.norm_scope = NormScope::Batch;
            AdvantageVector { values: a.values.iter().map(|v| v / denom).collect(), mode_used: cfg }
        })
        .collect())
}

/// Compose the transforms according to the config's mode and scope.
pub fn compute_advantages(batch: &[RewardGroup], cfg: &ShapingConfig) -> Result<Vec<AdvantageVector>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    match cfg.mode {
        ShapingMode::StdGrpo => batch.iter().map(|g| std_grpo_advantage(g, cfg.epsilon)).collect(),
        ShapingMode::MeanCentered => batch.iter().map(mean_centered_advantage).collect(),
        ShapingMode::Slas => {
            let shaped: Vec<AdvantageVector> = batch
                .iter()
                .map(|g| slas_shape(&mean_centered_advantage(g)?, cfg.gamma))
                .collect::<Result<_>>()?;
            match cfg.norm_scope {
                NormScope::Batch => batch_normalize(&shaped, cfg.epsilon),
                _ => Ok(shaped),
            }
        }
    }
}
