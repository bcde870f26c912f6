//! Numerical laboratory for super-linear advantage shaping in GRPO-style
//! post-training: group-relative advantage estimators, bias diagnostics for
//! std-normalization, closed-form ascent-direction oracles on the simplex,
//! trust-region exponent bounds, a toy flow-matching SDE sampler, and a
//! clipped-surrogate training loop on synthetic hackable rewards.

pub mod advantage;
pub mod bias;
pub mod error;
pub mod flow;
pub mod simplex;
pub mod train;
pub mod trust;

pub use advantage::{
    batch_normalize, compute_advantages, mean_centered_advantage, population_std, slas_shape,
    std_grpo_advantage, AdvantageVector, NormScope, RewardGroup, ShapingConfig, ShapingMode,
};
pub use bias::{
    exact_std_bias_gaussian, expected_standardized_advantage, miscalibration_simulation,
    monte_carlo_std_bias, sample_std, true_advantage, BiasReport, HistogramRewardModel,
};
pub use error::{Error, Result};
pub use flow::{
    euler_maruyama_step, rollout_group, sde_drift, step_logprob_and_grad,
    trajectory_logprob_and_grad, transition_logprob_under, FlowPolicy, SigmaSchedule, Trajectory,
};
pub use simplex::{
    baseline_invariance_check, brute_force_ascent, kl_quadratic_check, optimal_ascent_linear,
    optimal_ascent_weighted, softmax_score_jacobian, AscentDirection, SimplexPolicy,
};
pub use train::{
    clipped_surrogate, hacking_experiment, kl_penalty, median, surrogate_update_from_rewards,
    train, HackComparison, HackRunOutcome, SyntheticReward, TrainConfig, TrainLog, TrainRecord,
};
pub use trust::{
    empirical_kl_bound_check, estimate_g_max, estimate_lambda_max, gamma_bound_bounded,
    gamma_bound_subgaussian, moment_bound_rhs, softmax_fisher, GammaBoundReport, GammaRegime,
    KlBoundCheck, TrustRegionBudget,
};
