//! The six subcommands. Each one deserializes its parameter table, writes a
//! manifest + metrics CSV + summary into the output directory, and returns a
//! verification error when a checked tolerance is missed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use slas_core::{
    brute_force_ascent, empirical_kl_bound_check, exact_std_bias_gaussian, gamma_bound_bounded,
    gamma_bound_subgaussian, hacking_experiment, median, monte_carlo_std_bias,
    optimal_ascent_linear, optimal_ascent_weighted, train as run_train, FlowPolicy,
    GammaBoundReport, NormScope, ShapingConfig, SigmaSchedule, SimplexPolicy, SyntheticReward,
    TrainConfig, TrainLog, TrustRegionBudget,
};

use crate::config::{CliError, ResolvedConfig};

fn fmt(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------------------
// verify-bias

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BiasParams {
    group_sizes: Vec<usize>,
    sigma: f64,
    trials: usize,
}

impl Default for BiasParams {
    fn default() -> Self {
        Self { group_sizes: vec![8, 16], sigma: 1.0, trials: 200_000 }
    }
}

/// Monte-Carlo mean sample std per group size against the chi-distribution
/// closed form; fails when an estimate leaves its 3x confidence band.
pub fn verify_bias(resolved: &ResolvedConfig) -> Result<(), CliError> {
    let params: BiasParams = resolved.typed_params()?;
    resolved.write_manifest(&params)?;

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut worst: Option<String> = None;
    for &g in &params.group_sizes {
        let report = monte_carlo_std_bias(g, params.sigma, params.trials, resolved.seed)?;
        let exact = exact_std_bias_gaussian(g, params.sigma)?;
        let exact_rel_bias = (exact - params.sigma) / params.sigma;
        rows.push(format!(
            "{g},{},{},{},{},{}",
            fmt(report.estimate),
            fmt(report.exact),
            fmt(report.rel_bias),
            fmt(exact_rel_bias),
            fmt(report.ci_halfwidth)
        ));
        summary.push((format!("rel_bias_g{g}"), fmt(exact_rel_bias)));
        summary.push((format!("estimate_rel_bias_g{g}"), fmt(report.rel_bias)));
        let deviation = (report.estimate - report.exact).abs();
        if deviation > 3.0 * report.ci_halfwidth {
            worst = Some(format!(
                "group size {g}: estimate {} deviates from exact {} by {deviation:.3e} (> 3 CI)",
                report.estimate, report.exact
            ));
        }
    }
    summary.push(("status".into(), if worst.is_none() { "pass" } else { "fail" }.into()));
    resolved.write_csv(
        "metrics.csv",
        "group_size,estimate,exact,mc_rel_bias,exact_rel_bias,ci_halfwidth",
        &rows,
    )?;
    resolved.write_summary(&summary)?;
    match worst {
        None => Ok(()),
        Some(msg) => Err(CliError::Verification(msg)),
    }
}

// ---------------------------------------------------------------------------
// verify-oracle

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OracleParams {
    instances: usize,
    max_outcomes: usize,
    eta: f64,
    gammas: Vec<f64>,
    tolerance: f64,
    qp_iterations: usize,
    qp_tol: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            instances: 100,
            max_outcomes: 12,
            eta: 0.05,
            gammas: vec![0.5, 1.0, 2.0],
            tolerance: 1e-6,
            qp_iterations: 150_000,
            qp_tol: 1e-9,
        }
    }
}

/// Closed-form simplex ascent directions against the projected-gradient QP
/// solver on random instances, for the plain and advantage-weighted metrics.
pub fn verify_oracle(resolved: &ResolvedConfig) -> Result<(), CliError> {
    let params: OracleParams = resolved.typed_params()?;
    if params.max_outcomes < 2 {
        return Err(CliError::Config("max_outcomes must be >= 2".into()));
    }
    resolved.write_manifest(&params)?;

    let base = ChaCha8Rng::seed_from_u64(resolved.seed);
    let mut rows = Vec::new();
    let mut max_err = 0.0f64;
    for instance in 0..params.instances {
        let mut rng = base.clone();
        rng.set_stream(instance as u64);
        let n = rng.random_range(2..=params.max_outcomes);
        let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let policy = SimplexPolicy::new(raw.iter().map(|p| p / total).collect())?;
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

        let closed = optimal_ascent_linear(&policy, &rewards, params.eta)?;
        let brute = brute_force_ascent(
            &policy,
            &rewards,
            &vec![1.0; n],
            params.eta,
            params.qp_iterations,
            params.qp_tol,
        )?;
        let err = sup_diff(&closed.delta, &brute.delta);
        max_err = max_err.max(err);
        rows.push(format!("{instance},linear,0,{}", fmt(err)));

        for &gamma in &params.gammas {
            let advantage: Vec<f64> = (0..n)
                .map(|_| {
                    let sign = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
                    sign * rng.random_range(0.3..1.5)
                })
                .collect();
            let weights: Vec<f64> = advantage.iter().map(|a| a.abs().powf(gamma)).collect();
            let closed =
                optimal_ascent_weighted(&policy, &rewards, &advantage, gamma, params.eta)?;
            let brute = brute_force_ascent(
                &policy,
                &rewards,
                &weights,
                params.eta,
                params.qp_iterations,
                params.qp_tol,
            )?;
            let err = sup_diff(&closed.delta, &brute.delta);
            max_err = max_err.max(err);
            rows.push(format!("{instance},weighted,{gamma},{}", fmt(err)));
        }
    }
    resolved.write_csv("metrics.csv", "instance,check,gamma,max_abs_err", &rows)?;
    let pass = max_err <= params.tolerance;
    resolved.write_summary(&[
        ("instances".into(), params.instances.to_string()),
        ("max_abs_err".into(), fmt(max_err)),
        ("tolerance".into(), fmt(params.tolerance)),
        ("status".into(), if pass { "pass" } else { "fail" }.into()),
    ])?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "closed form vs QP solver disagree: max error {max_err:.3e} > {:.3e}",
            params.tolerance
        )))
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// verify-trust-region

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrustRegionParams {
    instances: usize,
    max_outcomes: usize,
    tau: f64,
    gammas: Vec<f64>,
}

impl Default for TrustRegionParams {
    fn default() -> Self {
        Self { instances: 100, max_outcomes: 8, tau: 0.01, gammas: vec![0.0, 0.5, 1.0, 2.0] }
    }
}

/// Exact KL of shaped-gradient steps on random softmax families against the
/// quadratic trust-region bound; any violation fails the run.
pub fn verify_trust_region(resolved: &ResolvedConfig) -> Result<(), CliError> {
    let params: TrustRegionParams = resolved.typed_params()?;
    if params.max_outcomes < 2 {
        return Err(CliError::Config("max_outcomes must be >= 2".into()));
    }
    resolved.write_manifest(&params)?;

    let base = ChaCha8Rng::seed_from_u64(resolved.seed);
    let mut rows = Vec::new();
    let mut violations = 0usize;
    let mut min_slack = f64::INFINITY;
    for instance in 0..params.instances {
        let mut rng = base.clone();
        rng.set_stream(instance as u64);
        let n = rng.random_range(2..=params.max_outcomes);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for &gamma in &params.gammas {
            let check = empirical_kl_bound_check(&logits, &rewards, gamma, params.tau)?;
            if !check.holds {
                violations += 1;
            }
            if check.bound > 0.0 {
                min_slack = min_slack.min(check.bound - check.measured_kl);
            }
            rows.push(format!(
                "{instance},{gamma},{},{},{}",
                fmt(check.measured_kl),
                fmt(check.bound),
                check.holds
            ));
        }
    }
    resolved.write_csv("metrics.csv", "instance,gamma,measured_kl,bound,holds", &rows)?;
    resolved.write_summary(&[
        ("checks".into(), rows.len().to_string()),
        ("violations".into(), violations.to_string()),
        ("min_slack".into(), fmt(min_slack)),
        ("status".into(), if violations == 0 { "pass" } else { "fail" }.into()),
    ])?;
    if violations == 0 {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "{violations} of {} KL checks exceeded the trust-region bound",
            rows.len()
        )))
    }
}

// ---------------------------------------------------------------------------
// train

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainParams {
    dim: usize,
    steps: usize,
    sigma: f64,
    mode: String,
    gamma: f64,
    norm_scope: String,
    epsilon: f64,
    clip_eps: f64,
    kl_beta: f64,
    lr: f64,
    group_size: usize,
    prompts_per_batch: usize,
    iterations: usize,
    inner_epochs: usize,
    true_center: Vec<f64>,
    hack_coeff: f64,
    noise_std: f64,
    clip_lo: Option<f64>,
    clip_hi: Option<f64>,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            dim: 2,
            steps: 8,
            sigma: 0.3,
            mode: "slas".into(),
            gamma: 1.0,
            norm_scope: "batch".into(),
            epsilon: 1e-8,
            clip_eps: 0.2,
            kl_beta: 0.0,
            lr: 0.2,
            group_size: 32,
            prompts_per_batch: 8,
            iterations: 60,
            inner_epochs: 1,
            true_center: vec![0.0, 0.0],
            hack_coeff: 0.0,
            noise_std: 0.05,
            clip_lo: None,
            clip_hi: None,
        }
    }
}

fn shaping_from(mode: &str, gamma: f64, norm_scope: &str, epsilon: f64) -> Result<ShapingConfig, CliError> {
    let scope = match norm_scope {
        "prompt" => NormScope::Prompt,
        "batch" => NormScope::Batch,
        "none" => NormScope::None,
        other => {
            return Err(CliError::Config(format!(
                "norm_scope must be prompt|batch|none, got `{other}`"
            )))
        }
    };
    let mut cfg = match mode {
        "std-grpo" => ShapingConfig::std_grpo(),
        "mean-centered" => ShapingConfig::mean_centered(),
        "slas" => ShapingConfig::slas(gamma, scope),
        other => {
            return Err(CliError::Config(format!(
                "mode must be std-grpo|mean-centered|slas, got `{other}`"
            )))
        }
    };
    cfg.epsilon = epsilon;
    if mode == "slas" {
        cfg.norm_scope = scope;
    }
    Ok(cfg)
}

fn clip_range(lo: Option<f64>, hi: Option<f64>) -> Result<Option<(f64, f64)>, CliError> {
    match (lo, hi) {
        (None, None) => Ok(None),
        (Some(lo), Some(hi)) => Ok(Some((lo, hi))),
        _ => Err(CliError::Config("clip_lo and clip_hi must be set together".into())),
    }
}

/// One GRPO run of the affine flow policy on the synthetic reward; the
/// per-iteration log goes to metrics.csv.
pub fn train(resolved: &ResolvedConfig) -> Result<(), CliError> {
    let params: TrainParams = resolved.typed_params()?;
    resolved.write_manifest(&params)?;

    let shaping = shaping_from(&params.mode, params.gamma, &params.norm_scope, params.epsilon)?;
    let reward = SyntheticReward::build(
        params.true_center.clone(),
        params.hack_coeff,
        params.noise_std,
        clip_range(params.clip_lo, params.clip_hi)?,
    )?;
    let cfg = TrainConfig {
        shaping,
        clip_eps: params.clip_eps,
        kl_beta: params.kl_beta,
        lr: params.lr,
        group_size: params.group_size,
        prompts_per_batch: params.prompts_per_batch,
        iterations: params.iterations,
        seed: resolved.seed,
        inner_epochs: params.inner_epochs,
    };
    let mut policy =
        FlowPolicy::zeroed(params.dim, params.steps, SigmaSchedule::Constant(params.sigma))?;
    let log = run_train(&mut policy, &reward, &cfg)?;
    write_train_log(resolved, "metrics.csv", &log)?;
    let last = log
        .records
        .last()
        .ok_or_else(|| CliError::Runtime("training produced no iterations".into()))?;
    resolved.write_summary(&[
        ("iterations".into(), log.records.len().to_string()),
        ("final_proxy_mean".into(), fmt(last.proxy_mean)),
        ("final_true_mean".into(), fmt(last.true_mean)),
        ("final_kl".into(), fmt(last.kl_to_ref)),
    ])?;
    Ok(())
}

fn write_train_log(resolved: &ResolvedConfig, name: &str, log: &TrainLog) -> Result<(), CliError> {
    let csv = log.to_csv();
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or(TrainLog::CSV_HEADER).to_string();
    let rows: Vec<String> = lines.map(str::to_string).collect();
    resolved.write_csv(name, &header, &rows)
}

// ---------------------------------------------------------------------------
// hack-compare

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct HackCompareParams {
    dim: usize,
    steps: usize,
    sigma: f64,
    gamma: f64,
    clip_eps: f64,
    lr: f64,
    group_size: usize,
    prompts_per_batch: usize,
    iterations: usize,
    num_seeds: usize,
    hack_coeff: f64,
    noise_std: f64,
    clip_lo: Option<f64>,
    clip_hi: Option<f64>,
}

impl Default for HackCompareParams {
    fn default() -> Self {
        let reward = SyntheticReward::default_hackable();
        let (lo, hi) = reward.clip_range.expect("default reward clips fidelity");
        Self {
            dim: 2,
            steps: 8,
            sigma: 0.3,
            gamma: 1.0,
            clip_eps: 0.2,
            lr: 0.1,
            group_size: 24,
            prompts_per_batch: 16,
            iterations: 200,
            num_seeds: 20,
            hack_coeff: reward.hack_coeff,
            noise_std: reward.noise_std,
            clip_lo: Some(lo),
            clip_hi: Some(hi),
        }
    }
}

/// Batch-normalized SLAS vs standard GRPO on the hackable reward across a
/// seed sweep; reports median true reward and hack-axis drift for both.
pub fn hack_compare(resolved: &ResolvedConfig) -> Result<(), CliError> {
    let params: HackCompareParams = resolved.typed_params()?;
    resolved.write_manifest(&params)?;

    let reward = SyntheticReward::build(
        vec![0.0; params.dim],
        params.hack_coeff,
        params.noise_std,
        clip_range(params.clip_lo, params.clip_hi)?,
    )?;
    let mut cfg_slas =
        TrainConfig::defaults(ShapingConfig::slas(params.gamma, NormScope::Batch));
    cfg_slas.clip_eps = params.clip_eps;
    cfg_slas.lr = params.lr;
    cfg_slas.group_size = params.group_size;
    cfg_slas.prompts_per_batch = params.prompts_per_batch;
    cfg_slas.iterations = params.iterations;
    let mut cfg_std = cfg_slas.clone();
    cfg_std.shaping = ShapingConfig::std_grpo();

    let initial =
        FlowPolicy::zeroed(params.dim, params.steps, SigmaSchedule::Constant(params.sigma))?;
    let seeds: Vec<u64> = (0..params.num_seeds as u64).map(|i| resolved.seed + i).collect();
    let (comparison, _, _) = hacking_experiment(&initial, &cfg_slas, &cfg_std, &reward, &seeds)?;

    let rows: Vec<String> = comparison
        .a
        .iter()
        .zip(&comparison.b)
        .map(|(s, g)| {
            format!(
                "{},{},{},{},{},{},{}",
                s.seed,
                fmt(s.final_true),
                fmt(s.final_proxy),
                fmt(s.hack_drift),
                fmt(g.final_true),
                fmt(g.final_proxy),
                fmt(g.hack_drift)
            )
        })
        .collect();
    resolved.write_csv(
        "metrics.csv",
        "seed,slas_true,slas_proxy,slas_drift,std_true,std_proxy,std_drift",
        &rows,
    )?;
    resolved.write_summary(&[
        ("seeds".into(), seeds.len().to_string()),
        ("median_true_slas".into(), fmt(comparison.median_true_a)),
        ("median_true_std".into(), fmt(comparison.median_true_b)),
        ("median_drift_slas".into(), fmt(comparison.median_drift_a)),
        ("median_drift_std".into(), fmt(comparison.median_drift_b)),
        (
            "median_true_delta".into(),
            fmt(median(&comparison.per_seed_true_delta)),
        ),
    ])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gamma-bound

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GammaBoundParams {
    zeta: f64,
    tau: f64,
    lambda_max: f64,
    g_max: f64,
    r_max: Option<f64>,
    k_r: Option<f64>,
    c_const: f64,
}

impl Default for GammaBoundParams {
    fn default() -> Self {
        Self {
            zeta: 0.5,
            tau: 0.1,
            lambda_max: 1.0,
            g_max: 1.0,
            r_max: Some(2.0),
            k_r: None,
            c_const: 1.0,
        }
    }
}

/// Admissible shaping exponent from a KL budget, in the bounded and/or
/// sub-Gaussian reward regimes.
pub fn gamma_bound(resolved: &ResolvedConfig) -> Result<(), CliError> {
    let params: GammaBoundParams = resolved.typed_params()?;
    resolved.write_manifest(&params)?;

    let mut budget =
        TrustRegionBudget::new(params.zeta, params.tau, params.g_max, params.lambda_max)
            .with_c_const(params.c_const);
    if let Some(r_max) = params.r_max {
        budget = budget.with_r_max(r_max);
    }
    if let Some(k_r) = params.k_r {
        budget = budget.with_k_r(k_r);
    }
    if params.r_max.is_none() && params.k_r.is_none() {
        return Err(CliError::Config(
            "set r_max (bounded rewards) and/or k_r (sub-Gaussian rewards)".into(),
        ));
    }

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let push = |name: &str, report: GammaBoundReport, rows: &mut Vec<String>, summary: &mut Vec<(String, String)>| {
        let gamma = report.gamma_max.map_or("infeasible".to_string(), fmt);
        rows.push(format!("{name},{},{gamma}", fmt(report.budget_rhs)));
        summary.push((format!("gamma_max_{name}"), gamma));
        summary.push((format!("budget_rhs_{name}"), fmt(report.budget_rhs)));
    };
    if params.r_max.is_some() {
        push("bounded", gamma_bound_bounded(&budget)?, &mut rows, &mut summary);
    }
    if params.k_r.is_some() {
        push("subgaussian", gamma_bound_subgaussian(&budget)?, &mut rows, &mut summary);
    }
    resolved.write_csv("metrics.csv", "regime,budget_rhs,gamma_max", &rows)?;
    resolved.write_summary(&summary)?;
    Ok(())
}
