//! Clipped-surrogate training loop over flow rollouts with pluggable
//! advantage shaping, plus a synthetic hackable reward that keeps
//! within-group reward variance tiny by saturating its fidelity term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::advantage::{compute_advantages, RewardGroup, ShapingConfig};
use crate::error::{Error, Result};
use crate::flow::{rollout_group, sde_drift, step_logprob_and_grad, FlowPolicy, Trajectory};

/// Proxy reward −clip(‖y−μ*‖²) + β·y₀ + noise against true reward −‖y−μ*‖².
/// The optional clip saturates the fidelity term, so proxy differences within
/// a group come almost entirely from the hack axis and the noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticReward {
    pub true_center: Vec<f64>,
    pub hack_coeff: f64,
    pub noise_std: f64,
    pub clip_range: Option<(f64, f64)>,
}

impl SyntheticReward {
    pub fn new(true_center: Vec<f64>) -> Result<Self> {
        Self::build(true_center, 0.0, 0.0, None)
    }

    pub fn build(
        true_center: Vec<f64>,
        hack_coeff: f64,
        noise_std: f64,
        clip_range: Option<(f64, f64)>,
    ) -> Result<Self> {
        if noise_std < 0.0 || !noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be >= 0, got {noise_std}")));
        }
        if true_center.is_empty() || true_center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("true_center must be non-empty and finite".into()));
        }
        if let Some((lo, hi)) = clip_range {
            if !(lo < hi) {
                return Err(Error::Config(format!("clip_range must satisfy lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(Self { true_center, hack_coeff, noise_std, clip_range })
    }

    /// A 2-d reward whose saturated fidelity term leaves only the hack axis
    /// and a small noise floor to distinguish samples of a group.
    pub fn default_hackable() -> Self {
        Self {
            true_center: vec![0.0, 0.0],
            hack_coeff: 0.01,
            noise_std: 0.05,
            clip_range: Some((-0.2, 0.0)),
        }
    }

    pub fn true_reward(&self, y: &[f64]) -> f64 {
        -y.iter().zip(&self.true_center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    pub fn proxy_reward(&self, y: &[f64], noise: f64) -> f64 {
        let fidelity = match self.clip_range {
            Some((lo, hi)) => self.true_reward(y).clamp(lo, hi),
            None => self.true_reward(y),
        };
        fidelity + self.hack_coeff * y[0] + self.noise_std * noise
    }

    /// Proxy-noise level of one prompt: a deterministic draw from
    /// [0.05, 1]·noise_std, so prompts differ in how much of their reward
    /// spread is meaningless — the cross-prompt miscalibration that
    /// std-normalization is blind to.
    pub fn prompt_noise_level(&self, prompt_seed: u64) -> f64 {
        let u = splitmix(prompt_seed ^ 0x6e6f_6973_u64) as f64 / u64::MAX as f64;
        self.noise_std * (0.05 + 0.95 * u)
    }

    /// Scores a whole group; the noise stream is keyed on the prompt seed so
    /// within-group proxy variance stays at that prompt's noise floor.
    pub fn score_group(&self, trajectories: &[Trajectory], prompt_seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(prompt_seed ^ 0x5157_4c41_u64));
        let level = self.prompt_noise_level(prompt_seed);
        let proxy = trajectories
            .iter()
            .map(|t| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                self.proxy_reward(t.endpoint(), 0.0) + level * noise
            })
            .collect();
        let truth = trajectories.iter().map(|t| self.true_reward(t.endpoint())).collect();
        (proxy, truth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub shaping: ShapingConfig,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub group_size: usize,
    pub prompts_per_batch: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Surrogate ascent passes per rollout batch; 1 keeps ratios at 1 on the
    /// first pass.
    pub inner_epochs: usize,
}

impl TrainConfig {
    pub fn defaults(shaping: ShapingConfig) -> Self {
        Self {
            shaping,
            clip_eps: 0.2,
            kl_beta: 0.0,
            lr: 0.2,
            group_size: 32,
            prompts_per_batch: 8,
            iterations: 60,
            seed: 0,
            inner_epochs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shaping.validate()?;
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!("clip_eps must be in (0,1), got {}", self.clip_eps)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.kl_beta < 0.0 || !self.kl_beta.is_finite() {
            return Err(Error::Config(format!("kl_beta must be >= 0, got {}", self.kl_beta)));
        }
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if self.prompts_per_batch == 0 {
            return Err(Error::Config("prompts_per_batch must be >= 1".into()));
        }
        if self.inner_epochs == 0 {
            return Err(Error::Config("inner_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub proxy_mean: f64,
    pub true_mean: f64,
    pub kl_to_ref: f64,
    pub grad_norm: f64,
    pub adv_min: f64,
    pub adv_max: f64,
    pub adv_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "iteration,proxy_mean,true_mean,kl,grad_norm,adv_min,adv_max,adv_std";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.proxy_mean,
                r.true_mean,
                r.kl_to_ref,
                r.grad_norm,
                r.adv_min,
                r.adv_max,
                r.adv_std
            ));
        }
        out
    }
}

/// PPO-style per-step terms min(ratio·A, clip(ratio, 1−ε, 1+ε)·A), averaged
/// over steps. The ratio is clipped, not the product.
pub fn clipped_surrogate(ratios: &[f64], advantage: f64, clip_eps: f64) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for &r in ratios {
        if !(r > 0.0) {
            return Err(Error::NonPositiveRatio(r));
        }
        let unclipped = r * advantage;
        let clipped = r.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
        total += unclipped.min(clipped);
    }
    Ok(total / ratios.len() as f64)
}

/// Exact per-step Gaussian KL between the transition kernels of `policy` and
/// `ref_policy` along stored trajectories, summed over steps and averaged
/// over trajectories.
pub fn kl_penalty(
    policy: &FlowPolicy,
    ref_policy: &FlowPolicy,
    trajectories: &[Trajectory],
) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for traj in trajectories {
        for step in 0..traj.noises.len() {
            let (kl, _) = step_kl_and_grad(policy, ref_policy, traj, step, false)?;
            total += kl;
        }
    }
    Ok(total / trajectories.len() as f64)
}

/// KL between N(m1, s1²I) and N(m2, s2²I) at one stored transition, with the
/// gradient of the KL in the first policy's parameters when requested.
fn step_kl_and_grad(
    policy: &FlowPolicy,
    ref_policy: &FlowPolicy,
    traj: &Trajectory,
    step: usize,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let x = &traj.states[step];
    let t = policy.step_time(step);
    if t <= 0.0 {
        return Err(Error::SingularTime(t));
    }
    let s1 = policy.sigma_schedule.sigma(t) * policy.dt().sqrt();
    let s2 = ref_policy.sigma_schedule.sigma(ref_policy.step_time(step)) * ref_policy.dt().sqrt();
    if s1 <= 0.0 || s2 <= 0.0 {
        return Err(Error::DegenerateDensity(step));
    }
    let d = policy.dim;
    let dt = policy.dt();
    let drift1 = sde_drift(policy, x, t, step)?;
    let drift2 = sde_drift(ref_policy, x, ref_policy.step_time(step), step)?;
    let m1: Vec<f64> = (0..d).map(|i| x[i] + drift1[i] * dt).collect();
    let m2: Vec<f64> = (0..d).map(|i| x[i] + drift2[i] * dt).collect();
    let shift2: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b) * (a - b)).sum();
    let kl = d as f64 * ((s2 / s1).ln() + (s1 * s1) / (2.0 * s2 * s2) - 0.5)
        + shift2 / (2.0 * s2 * s2);
    let mut grad = Vec::new();
    if want_grad {
        grad = vec![0.0; policy.n_params()];
        let sigma = policy.sigma_schedule.sigma(t);
        let c_v = (1.0 + sigma * sigma * (1.0 - t) / (2.0 * t)) * dt;
        for i in 0..d {
            let scale = (m1[i] - m2[i]) / (s2 * s2) * c_v;
            for j in 0..d {
                grad[i * d + j] += scale * x[j];
            }
            grad[d * d + step * d + i] += scale;
        }
    }
    Ok((kl, grad))
}

/// Gradient of the mean clipped-surrogate objective over the given sample
/// set, evaluated at the current `policy` against frozen old log-probs.
fn surrogate_gradient(
    policy: &FlowPolicy,
    samples: &[(Trajectory, f64)],
    old_logprobs: &[Vec<f64>],
    clip_eps: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; policy.n_params()];
    let n = samples.len() as f64;
    for (s, (traj, adv)) in samples.iter().enumerate() {
        let steps = traj.noises.len() as f64;
        for step in 0..traj.noises.len() {
            let (lp_new, g) = step_logprob_and_grad(policy, traj, step)?;
            let ratio = (lp_new - old_logprobs[s][step]).exp();
            if !(ratio > 0.0) {
                return Err(Error::NonPositiveRatio(ratio));
            }
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
            // min picks a branch; only the unclipped branch depends on theta
            if unclipped <= clipped {
                let scale = adv * ratio / (steps * n);
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += scale * b;
                }
            }
        }
    }
    Ok(grad)
}

fn splitmix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-prompt rollout seed. Deliberately iteration-independent: reusing the
/// same noise streams every iteration turns the loop into common-random-number
/// optimization, which keeps the reward curves smooth at toy batch sizes.
fn prompt_seed(seed: u64, prompt: usize) -> u64 {
    splitmix(seed ^ (prompt as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

fn advantage_stats(values: &[f64]) -> (f64, f64, f64) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max, crate::advantage::population_std(values))
}

/// GRPO loop: roll out groups with the frozen policy, score with the proxy,
/// shape advantages, broadcast each sample's scalar to all its steps, and
/// ascend the clipped surrogate minus the KL penalty by plain gradient steps.
pub fn train(
    policy: &mut FlowPolicy,
    reward: &SyntheticReward,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if reward.true_center.len() != policy.dim {
        return Err(Error::DimensionMismatch {
            expected: policy.dim,
            got: reward.true_center.len(),
        });
    }
    let ref_policy = policy.clone();
    let mut log = TrainLog::default();

    for iteration in 0..cfg.iterations {
        // rollout batch under the frozen policy
        let mut samples: Vec<(Trajectory, f64)> = Vec::new();
        let mut old_logprobs: Vec<Vec<f64>> = Vec::new();
        let mut groups = Vec::with_capacity(cfg.prompts_per_batch);
        let mut proxy_sum = 0.0;
        let mut true_sum = 0.0;
        let mut batch_trajs: Vec<Vec<Trajectory>> = Vec::new();
        for p in 0..cfg.prompts_per_batch {
            let ps = prompt_seed(cfg.seed, p);
            let trajs = rollout_group(policy, ps, cfg.group_size)?;
            let (proxy, truth) = reward.score_group(&trajs, ps);
            proxy_sum += proxy.iter().sum::<f64>();
            true_sum += truth.iter().sum::<f64>();
            groups.push(RewardGroup::new(format!("prompt-{p}"), proxy)?);
            batch_trajs.push(trajs);
        }
        let advantages = compute_advantages(&groups, &cfg.shaping)?;
        let mut adv_flat = Vec::new();
        for (trajs, adv) in batch_trajs.into_iter().zip(&advantages) {
            for (traj, a) in trajs.into_iter().zip(&adv.values) {
                let lps: Vec<f64> = traj
                    .logprob_terms
                    .iter()
                    .enumerate()
                    .map(|(step, lp)| lp.ok_or(Error::DegenerateDensity(step)))
                    .collect::<Result<_>>()?;
                old_logprobs.push(lps);
                samples.push((traj, *a));
                adv_flat.push(*a);
            }
        }

        let n_samples = samples.len() as f64;
        let mut first_grad_norm = 0.0;
        let mut kl_value = 0.0;
        for epoch in 0..cfg.inner_epochs {
            let mut grad = surrogate_gradient(policy, &samples, &old_logprobs, cfg.clip_eps)?;
            if cfg.kl_beta > 0.0 {
                let mut kl_total = 0.0;
                for (traj, _) in &samples {
                    for step in 0..traj.noises.len() {
                        let (kl, g) = step_kl_and_grad(policy, &ref_policy, traj, step, true)?;
                        kl_total += kl;
                        for (a, b) in grad.iter_mut().zip(&g) {
                            *a -= cfg.kl_beta * b / n_samples;
                        }
                    }
                }
                kl_value = kl_total / n_samples;
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFiniteGradient {
                    iteration,
                    detail: format!("gradient norm {norm} at inner epoch {epoch}"),
                });
            }
            if epoch == 0 {
                first_grad_norm = norm;
            }
            let mut theta = policy.theta();
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t += cfg.lr * g;
            }
            policy.set_theta(&theta)?;
        }
        if cfg.kl_beta == 0.0 {
            let trajs: Vec<Trajectory> = samples.iter().map(|(t, _)| t.clone()).collect();
            kl_value = kl_penalty(policy, &ref_policy, &trajs)?;
        }

        let (adv_min, adv_max, adv_std) = advantage_stats(&adv_flat);
        log.records.push(TrainRecord {
            iteration,
            proxy_mean: proxy_sum / n_samples,
            true_mean: true_sum / n_samples,
            kl_to_ref: kl_value,
            grad_norm: first_grad_norm,
            adv_min,
            adv_max,
            adv_std,
        });
    }
    Ok(log)
}

/// One on-policy surrogate step computed from externally supplied rewards:
/// shapes the rewards, evaluates the score-form gradient at ratio = 1, and
/// returns the parameter increment lr·g without touching the policy.
pub fn surrogate_update_from_rewards(
    policy: &FlowPolicy,
    batch: &[(Vec<Trajectory>, RewardGroup)],
    shaping: &ShapingConfig,
    lr: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let groups: Vec<RewardGroup> = batch.iter().map(|(_, g)| g.clone()).collect();
    let advantages = compute_advantages(&groups, shaping)?;
    let mut grad = vec![0.0; policy.n_params()];
    let n: usize = batch.iter().map(|(t, _)| t.len()).sum();
    for ((trajs, group), adv) in batch.iter().zip(&advantages) {
        if trajs.len() != group.len() {
            return Err(Error::DimensionMismatch { expected: group.len(), got: trajs.len() });
        }
        for (traj, a) in trajs.iter().zip(&adv.values) {
            let steps = traj.noises.len() as f64;
            for step in 0..traj.noises.len() {
                let (_, g) = step_logprob_and_grad(policy, traj, step)?;
                let scale = a / (steps * n as f64);
                for (acc, b) in grad.iter_mut().zip(&g) {
                    *acc += scale * b;
                }
            }
        }
    }
    Ok(grad.into_iter().map(|g| lr * g).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HackRunOutcome {
    pub seed: u64,
    pub final_true: f64,
    pub final_proxy: f64,
    /// |E[y₀]| over the evaluation batch: drift along the hack axis.
    pub hack_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HackComparison {
    pub a: Vec<HackRunOutcome>,
    pub b: Vec<HackRunOutcome>,
    pub median_true_a: f64,
    pub median_true_b: f64,
    pub median_drift_a: f64,
    pub median_drift_b: f64,
    pub per_seed_true_delta: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn evaluate_policy(
    policy: &FlowPolicy,
    reward: &SyntheticReward,
    seed: u64,
    samples: usize,
) -> Result<HackRunOutcome> {
    let eval_seed = splitmix(seed ^ 0xEAA1_EAA1_EAA1_EAA1);
    let trajs = rollout_group(policy, eval_seed, samples)?;
    let (proxy, truth) = reward.score_group(&trajs, eval_seed);
    let drift = trajs.iter().map(|t| t.endpoint()[0]).sum::<f64>() / trajs.len() as f64;
    Ok(HackRunOutcome {
        seed,
        final_true: truth.iter().sum::<f64>() / truth.len() as f64,
        final_proxy: proxy.iter().sum::<f64>() / proxy.len() as f64,
        hack_drift: drift.abs(),
    })
}

fn configs_match_beyond_shaping(a: &TrainConfig, b: &TrainConfig) -> Result<()> {
    let same = a.clip_eps == b.clip_eps
        && a.kl_beta == b.kl_beta
        && a.lr == b.lr
        && a.group_size == b.group_size
        && a.prompts_per_batch == b.prompts_per_batch
        && a.iterations == b.iterations
        && a.seed == b.seed
        && a.inner_epochs == b.inner_epochs;
    if same {
        Ok(())
    } else {
        Err(Error::ConfigMismatch(
            "only the shaping field may differ between compared configs".into(),
        ))
    }
}

/// Trains both configs from the same initial policy on identical seeds and
/// reports final reward distributions plus hack-axis drift.
pub fn hacking_experiment(
    initial: &FlowPolicy,
    cfg_a: &TrainConfig,
    cfg_b: &TrainConfig,
    reward: &SyntheticReward,
    seeds: &[u64],
) -> Result<(HackComparison, Vec<TrainLog>, Vec<TrainLog>)> {
    if seeds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    configs_match_beyond_shaping(cfg_a, cfg_b)?;
    let eval_samples = 256;
    let mut out_a = Vec::new();
    let mut out_b = Vec::new();
    let mut logs_a = Vec::new();
    let mut logs_b = Vec::new();
    for &seed in seeds {
        for (cfg, outs, logs) in
            [(cfg_a, &mut out_a, &mut logs_a), (cfg_b, &mut out_b, &mut logs_b)]
        {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            let mut policy = initial.clone();
            logs.push(train(&mut policy, reward, &run_cfg)?);
            outs.push(evaluate_policy(&policy, reward, seed, eval_samples)?);
        }
    }
    let true_a: Vec<f64> = out_a.iter().map(|o| o.final_true).collect();
    let true_b: Vec<f64> = out_b.iter().map(|o| o.final_true).collect();
    let drift_a: Vec<f64> = out_a.iter().map(|o| o.hack_drift).collect();
    let drift_b: Vec<f64> = out_b.iter().map(|o| o.hack_drift).collect();
    let delta: Vec<f64> = true_a.iter().zip(&true_b).map(|(a, b)| a - b).collect();
    Ok((
        HackComparison {
            median_true_a: median(&true_a),
            median_true_b: median(&true_b),
            median_drift_a: median(&drift_a),
            median_drift_b: median(&drift_b),
            per_seed_true_delta: delta,
            a: out_a,
            b: out_b,
        },
        logs_a,
        logs_b,
    ))
}
