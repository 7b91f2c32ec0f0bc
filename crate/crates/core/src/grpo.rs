//! Group-relative policy optimization over the toy policy.
//!
//! Per prompt, `G` rollouts are rewarded and standardized into advantages
//! `A_k = (r_k - mean) / max(std, floor)` with the population standard
//! deviation. The per-step objective is the clipped surrogate
//!
//! ```text
//! J = (1/G) sum_k [ min(rho_k A_k, clip(rho_k, 1-eps, 1+eps) A_k)
//!                   - beta * k3(pi_ref(y_k) / pi_theta(y_k)) ]
//! ```
//!
//! with sequence-level ratios `rho_k = exp(log pi_theta - log pi_old)` and
//! the k3 estimator `k3(r) = r - ln r - 1`. Gradients are closed form via
//! the softmax identity `d log pi / d logit = onehot - softmax`; the
//! clipped branch contributes zero gradient when the min selects the
//! constant-in-rho term. Optimization is plain gradient ascent with linear
//! warmup, one inner step per rollout batch.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    greedy_decode, sample_rollouts, sequence_log_prob, EnvError, RolloutGroup, SynthEnv, ToyPolicy,
};
use crate::eval::{source_overlap, DEFAULT_COPY_OVERLAP};
use crate::lid::LanguageDetector;
use crate::reward::{RewardError, RewardSuite};
use crate::text::LanguageTag;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid GRPO config: {0}")]
    BadConfig(String),
    #[error("cannot compute advantages of an empty group")]
    EmptyGroup,
    #[error("KL ratio must be positive and finite, got {0}")]
    BadRatio(f64),
    #[error("advantages not populated for the group")]
    MissingAdvantages,
    #[error("non-finite intermediate in rollout {rollout}")]
    NonFinite { rollout: usize },
    #[error("environment failure: {0}")]
    Env(#[from] EnvError),
    #[error("reward failure at step {step}: {source}")]
    Component {
        step: u64,
        #[source]
        source: RewardError,
    },
}

/// Hyperparameters of the trainer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Rollouts per prompt `G`.
    pub group_size: usize,
    /// PPO clipping range.
    pub clip_epsilon: f64,
    /// KL penalty coefficient toward the frozen reference policy.
    pub kl_beta: f64,
    /// Desk-scale gradient-ascent step size.
    pub learning_rate: f64,
    /// Steps over which the learning rate ramps linearly to its peak.
    pub warmup_steps: usize,
    /// Prompts per outer step.
    pub prompts_per_step: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Floor on the advantage denominator; degenerate groups zero out.
    pub advantage_std_floor: f64,
    /// Sampling temperature for rollouts.
    pub temperature: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.01,
            learning_rate: 0.05,
            warmup_steps: 10,
            prompts_per_step: 8,
            total_steps: 300,
            seed: 0,
            advantage_std_floor: 1e-8,
            temperature: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size == 0 {
            return Err(GrpoError::BadConfig("group_size must be >= 1".into()));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(GrpoError::BadConfig(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(GrpoError::BadConfig(format!(
                "kl_beta must be nonnegative, got {}",
                self.kl_beta
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(GrpoError::BadConfig("learning_rate must be positive".into()));
        }
        if self.prompts_per_step == 0 {
            return Err(GrpoError::BadConfig("prompts_per_step must be >= 1".into()));
        }
        if !(self.advantage_std_floor > 0.0) {
            return Err(GrpoError::BadConfig(
                "advantage_std_floor must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(GrpoError::BadConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Group-standardized advantages with the population standard deviation.
/// A degenerate group (all rewards equal) yields all-zero advantages.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let variance = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g;
    let denom = variance.sqrt().max(std_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// The k3 divergence estimator `r - ln r - 1`, nonnegative and zero only at
/// `r = 1`.
pub fn kl_k3(ratio_ref: f64) -> Result<f64, GrpoError> {
    if !(ratio_ref > 0.0) || !ratio_ref.is_finite() {
        return Err(GrpoError::BadRatio(ratio_ref));
    }
    Ok(ratio_ref - ratio_ref.ln() - 1.0)
}

/// k3 from the log-ratio `ln(pi_ref / pi_theta)`, avoiding a redundant
/// round trip through `exp` then `ln`.
pub fn kl_k3_from_log_ratio(log_ratio: f64) -> f64 {
    log_ratio.exp() - log_ratio - 1.0
}

/// The clipped-surrogate term of one rollout.
pub fn clip_objective_term(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    (rho * advantage).min(clipped * advantage)
}

/// Coefficient multiplying the log-probability gradient of one rollout in
/// the surrogate. Zero when the min selects the clipped, constant-in-rho
/// branch.
pub fn clip_gradient_coef(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    if rho * advantage <= clipped * advantage {
        advantage * rho
    } else {
        0.0
    }
}

/// Value and analytic gradient of the surrogate objective for one group.
#[derive(Debug, Clone)]
pub struct SurrogateOutput {
    pub objective: f64,
    /// Gradient with respect to every policy logit (maximization sense).
    pub gradient: Vec<f64>,
    pub mean_ratio: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

/// Evaluates the clipped surrogate and its exact gradient for one group.
///
/// Old-policy log-probabilities come from the rollouts themselves (they
/// were recorded at sampling time); current and reference log-probabilities
/// are recomputed under the given parameters. `group.advantages` must be
/// populated.
pub fn surrogate_objective(
    policy: &ToyPolicy,
    ref_policy: &ToyPolicy,
    env: &SynthEnv,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
) -> Result<SurrogateOutput, GrpoError> {
    cfg.validate()?;
    if group.advantages.len() != group.rollouts.len() {
        return Err(GrpoError::MissingAdvantages);
    }
    let g = group.rollouts.len() as f64;
    let mut gradient = vec![0.0; policy.num_params()];
    let mut objective = 0.0;
    let mut mean_ratio = 0.0;
    let mut mean_kl = 0.0;
    let mut clipped_count = 0usize;
    let temperature = policy.temperature();

    for (k, rollout) in group.rollouts.iter().enumerate() {
        let advantage = group.advantages[k];
        let actions = rollout.actions();
        let log_cur = sequence_log_prob(policy, env, &group.source, &group.tgt, &actions)?;
        let log_ref = sequence_log_prob(ref_policy, env, &group.source, &group.tgt, &actions)?;
        let log_old = rollout.log_prob_total;

        let rho = (log_cur - log_old).exp();
        let kl = kl_k3_from_log_ratio(log_ref - log_cur);
        let ratio_ref = (log_ref - log_cur).exp();
        if !rho.is_finite() || !kl.is_finite() {
            return Err(GrpoError::NonFinite { rollout: k });
        }

        objective += (clip_objective_term(rho, advantage, cfg.clip_epsilon) - cfg.kl_beta * kl) / g;
        mean_ratio += rho / g;
        mean_kl += kl / g;
        if rho < 1.0 - cfg.clip_epsilon || rho > 1.0 + cfg.clip_epsilon {
            clipped_count += 1;
        }

        // Total scale on grad(log pi_theta) for this rollout: the selected
        // surrogate branch plus the KL term's beta * (r - 1).
        let coef = (clip_gradient_coef(rho, advantage, cfg.clip_epsilon)
            + cfg.kl_beta * (ratio_ref - 1.0))
            / g;
        if coef == 0.0 {
            continue;
        }
        for step in &rollout.steps {
            let log_probs = policy.log_softmax_row(step.context);
            let base = step.context * policy.num_actions();
            for (a, lp) in log_probs.iter().enumerate() {
                let indicator = f64::from(a == step.action);
                gradient[base + a] += coef * (indicator - lp.exp()) / temperature;
            }
        }
    }

    if !objective.is_finite() || gradient.iter().any(|v| !v.is_finite()) {
        return Err(GrpoError::NonFinite {
            rollout: usize::MAX,
        });
    }
    Ok(SurrogateOutput {
        objective,
        gradient,
        mean_ratio,
        mean_kl,
        clip_fraction: clipped_count as f64 / g,
    })
}

/// One record of the newline-delimited metrics log; the key set is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_r_qe: f64,
    pub mean_r_wa: f64,
    pub lcr: f64,
    pub copy_rate: f64,
    pub len_ratio: f64,
    pub dict_acc: f64,
}

/// Trainer state across steps: the live policy, the per-step frozen old
/// policy, and the never-mutated reference snapshot.
pub struct TrainerState {
    pub policy: ToyPolicy,
    pub old_policy: ToyPolicy,
    pub ref_policy: ToyPolicy,
    pub step: u64,
    pub metrics: Vec<StepMetrics>,
}

/// Greedy per-position lexical accuracy against the gold mapping: the
/// fraction of prompt positions whose argmax action emits the gold target
/// token.
pub fn dictionary_accuracy(
    policy: &ToyPolicy,
    env: &SynthEnv,
    prompts: &[(crate::text::TokenSentence, LanguageTag)],
) -> Result<f64, EnvError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (x, tgt) in prompts {
        let gold = env.gold_translate(x, tgt)?;
        let decoded = greedy_decode(policy, env, x, tgt)?;
        for (pos, gold_tok) in gold.tokens.iter().enumerate() {
            total += 1;
            // A skipped position emits nothing, shifting later emissions; we
            // score strictly by the action taken at the position.
            if let Some(step) = decoded.steps.get(pos) {
                if let Some((lang, id)) = policy.action_token(step.action) {
                    if &crate::env::token_name(lang, id) == gold_tok {
                        correct += 1;
                    }
                }
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

/// Which directions to train on.
pub type Direction = (usize, usize);

fn batch_metrics(
    step: u64,
    groups: &[RolloutGroup],
    env: &SynthEnv,
    policy: &ToyPolicy,
    diagnostics_lid: &dyn LanguageDetector,
) -> Result<StepMetrics, GrpoError> {
    let mut mean_reward = 0.0;
    let mut mean_r_qe = 0.0;
    let mut mean_r_wa = 0.0;
    let mut lcr_hits = 0.0;
    let mut copy_hits = 0.0;
    let mut len_ratio = 0.0;
    let mut count = 0.0;
    for group in groups {
        for rollout in &group.rollouts {
            let reward = rollout.reward.as_ref().expect("rewards populated");
            mean_reward += reward.total;
            mean_r_qe += reward.r_qe;
            mean_r_wa += reward.r_wa.unwrap_or(0.0);
            if diagnostics_lid.detect(&rollout.hypothesis).0 == group.tgt {
                lcr_hits += 1.0;
            }
            if source_overlap(&rollout.hypothesis, &group.source) >= DEFAULT_COPY_OVERLAP {
                copy_hits += 1.0;
            }
            len_ratio += rollout.hypothesis.len() as f64 / group.source.len() as f64;
            count += 1.0;
        }
    }
    let prompts: Vec<_> = groups
        .iter()
        .map(|g| (g.source.clone(), g.tgt.clone()))
        .collect();
    let dict_acc = dictionary_accuracy(policy, env, &prompts)?;
    Ok(StepMetrics {
        step,
        mean_reward: mean_reward / count,
        mean_r_qe: mean_r_qe / count,
        mean_r_wa: mean_r_wa / count,
        lcr: lcr_hits / count,
        copy_rate: copy_hits / count,
        len_ratio: len_ratio / count,
        dict_acc,
    })
}

/// Runs the full training loop.
///
/// Each outer step draws `prompts_per_step` prompts round-robin across the
/// directions, snapshots the old policy, samples `G` rollouts per prompt,
/// rewards them, standardizes advantages per group, and takes one gradient
/// ascent step on the batch-mean surrogate with linear warmup. Rollout
/// randomness comes from per-prompt streams split deterministically from
/// the seed, so runs are bit-reproducible and prompts could be processed
/// concurrently without changing results.
pub fn train(
    env: &SynthEnv,
    suite: &RewardSuite,
    cfg: &GrpoConfig,
    directions: &[Direction],
    diagnostics_lid: &dyn LanguageDetector,
) -> Result<TrainerState, GrpoError> {
    cfg.validate()?;
    if directions.is_empty() {
        return Err(GrpoError::BadConfig("no training directions".into()));
    }
    let mut policy = ToyPolicy::for_env(env);
    let ref_policy = policy.clone();
    let mut old_policy = policy.clone();
    let mut metrics = Vec::with_capacity(cfg.total_steps);

    for step in 0..cfg.total_steps as u64 {
        old_policy = policy.clone();

        // Sample and reward the batch.
        let mut groups = Vec::with_capacity(cfg.prompts_per_step);
        for prompt_idx in 0..cfg.prompts_per_step {
            let global = step * cfg.prompts_per_step as u64 + prompt_idx as u64;
            let (src, tgt_idx) = directions[(global % directions.len() as u64) as usize];
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            rng.set_stream(global + 1);
            let (x, tgt) = env.gen_prompt_in(src, tgt_idx, &mut rng)?;
            let mut group = sample_rollouts(
                &old_policy,
                env,
                &x,
                &tgt,
                cfg.group_size,
                cfg.temperature,
                &mut rng,
            )?;
            let mut rewards = Vec::with_capacity(cfg.group_size);
            for rollout in &mut group.rollouts {
                let breakdown = suite
                    .evaluate(&group.source, &rollout.hypothesis, &group.tgt)
                    .map_err(|source| GrpoError::Component { step, source })?;
                rewards.push(breakdown.total);
                rollout.reward = Some(breakdown);
            }
            group.advantages = compute_advantages(&rewards, cfg.advantage_std_floor)?;
            groups.push(group);
        }

        // Batch-mean gradient, in deterministic group order.
        let mut batch_grad = vec![0.0; policy.num_params()];
        let num_groups = groups.len() as f64;
        for group in &groups {
            let out = surrogate_objective(&policy, &ref_policy, env, group, cfg)?;
            for (acc, g) in batch_grad.iter_mut().zip(&out.gradient) {
                *acc += g / num_groups;
            }
        }

        let warmup = if cfg.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        };
        policy.apply_ascent_step(cfg.learning_rate * warmup, &batch_grad)?;

        metrics.push(batch_metrics(step, &groups, env, &policy, diagnostics_lid)?);
    }

    Ok(TrainerState {
        step: cfg.total_steps as u64,
        policy,
        old_policy,
        ref_policy,
        metrics,
    })
}

/// Serializes metrics as newline-delimited JSON with the fixed key set.
pub fn metrics_to_ndjson(metrics: &[StepMetrics]) -> String {
    let mut out = String::new();
    for record in metrics {
        out.push_str(&serde_json::to_string(record).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, PolicyCheckpoint};
    use crate::lid::PrefixLid;
    use crate::qe::{HoleFlags, HoleyQe};
    use crate::reward::{RewardConfig, RewardMode};
    use crate::text::TokenSentence;
    use rand::Rng;

    fn tiny_env() -> SynthEnv {
        SynthEnv::new(EnvConfig {
            num_langs: 2,
            vocab_size: 2,
            min_len: 1,
            max_len: 2,
            seed: 0,
        })
        .unwrap()
    }

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn advantages_standardize_with_population_std() {
        let a = compute_advantages(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        assert!((a[0] + 1.224744871392).abs() < 1e-9);
        assert!(a[1].abs() < 1e-12);
        assert!((a[2] - 1.224744871392).abs() < 1e-9);
    }

    #[test]
    fn degenerate_groups_zero_out() {
        assert_eq!(compute_advantages(&[5.0, 5.0, 5.0], 1e-8).unwrap(), vec![0.0; 3]);
        assert_eq!(compute_advantages(&[7.0], 1e-8).unwrap(), vec![0.0]);
        assert!(matches!(
            compute_advantages(&[], 1e-8),
            Err(GrpoError::EmptyGroup)
        ));
    }

    #[test]
    fn kl_k3_reference_values() {
        assert_eq!(kl_k3(1.0).unwrap(), 0.0);
        assert!((kl_k3(2.0).unwrap() - (2.0 - 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((kl_k3(2.0).unwrap() - 0.3068528194401).abs() < 1e-9);
        assert!((kl_k3(0.5).unwrap() - 0.1931471805599).abs() < 1e-9);
        assert!(kl_k3(0.0).is_err());
        assert!(kl_k3(-1.0).is_err());
        assert!(kl_k3(f64::INFINITY).is_err());
    }

    #[test]
    fn kl_k3_is_nonnegative_everywhere() {
        let mut r = rng(3);
        for _ in 0..100_000 {
            // Log-uniform over (1e-3, 1e3).
            let ratio = 10f64.powf(r.gen_range(-3.0..3.0));
            let kl = kl_k3(ratio).unwrap();
            assert!(kl >= 0.0, "kl_k3({ratio}) = {kl}");
            if ratio != 1.0 {
                assert!(kl > 0.0);
            }
        }
        assert_eq!(kl_k3(1.0).unwrap(), 0.0);
    }

    #[test]
    fn clip_arithmetic() {
        // rho = 1.5 with eps = 0.2 clips to 1.2.
        assert!((clip_objective_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-12);
        // Inside the band the term is untouched.
        assert_eq!(clip_objective_term(1.1, 2.0, 0.2), 2.2);
        // Negative advantage: min picks the unclipped branch for large rho.
        assert_eq!(clip_objective_term(1.5, -1.0, 0.2), -1.5);
        assert_eq!(clip_gradient_coef(1.5, -1.0, 0.2), -1.5);
        // Positive advantage above the band: constant branch, zero grad.
        assert_eq!(clip_gradient_coef(1.5, 1.0, 0.2), 0.0);
        assert_eq!(clip_gradient_coef(1.1, 1.0, 0.2), 1.1);
    }

    /// Build a rewarded group from the old policy, with synthetic rewards.
    fn make_group(
        env: &SynthEnv,
        old_policy: &ToyPolicy,
        g: usize,
        seed: u64,
        std_floor: f64,
    ) -> RolloutGroup {
        let mut r = rng(seed);
        let (x, tgt) = env.gen_prompt(&mut r).unwrap();
        let mut group = sample_rollouts(old_policy, env, &x, &tgt, g, 1.0, &mut r).unwrap();
        let rewards: Vec<f64> = (0..g).map(|_| r.gen_range(-5.0..5.0)).collect();
        group.advantages = compute_advantages(&rewards, std_floor).unwrap();
        group
    }

    fn perturbed(policy: &ToyPolicy, scale: f64, seed: u64) -> ToyPolicy {
        let mut r = rng(seed);
        let mut out = policy.clone();
        for ctx in 0..policy.num_contexts() {
            for a in 0..policy.num_actions() {
                out.set_logit(ctx, a, policy.logit(ctx, a) + r.gen_range(-scale..scale));
            }
        }
        out
    }

    fn random_policy(env: &SynthEnv, seed: u64) -> ToyPolicy {
        let mut r = rng(seed);
        let mut policy = ToyPolicy::for_env(env);
        for ctx in 0..policy.num_contexts() {
            for a in 0..policy.num_actions() {
                policy.set_logit(ctx, a, r.gen_range(-1.0..1.0));
            }
        }
        policy
    }

    #[test]
    fn ratio_one_reduces_to_reinforce_with_baseline() {
        let env = tiny_env();
        let policy = random_policy(&env, 5);
        let group = make_group(&env, &policy, 6, 6, 1e-8);
        let cfg = GrpoConfig {
            kl_beta: 0.0,
            ..GrpoConfig::default()
        };
        // theta == theta_old == ref: every ratio is exactly 1.
        let out = surrogate_objective(&policy, &policy, &env, &group, &cfg).unwrap();
        assert!(out.objective.abs() < 1e-12); // mean of standardized advantages
        assert_eq!(out.clip_fraction, 0.0);
        assert!((out.mean_ratio - 1.0).abs() < 1e-12);

        // Hand-computed score-function direction: (1/G) sum_k A_k grad log pi.
        let mut expected = vec![0.0; policy.num_params()];
        let g = group.rollouts.len() as f64;
        for (k, rollout) in group.rollouts.iter().enumerate() {
            for step in &rollout.steps {
                let probs = policy.probs_row(step.context);
                let base = step.context * policy.num_actions();
                for (a, p) in probs.iter().enumerate() {
                    expected[base + a] +=
                        group.advantages[k] * (f64::from(a == step.action) - p) / g;
                }
            }
        }
        for (got, want) in out.gradient.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_inactive_inside_the_band() {
        let env = tiny_env();
        let old_policy = random_policy(&env, 7);
        let policy = perturbed(&old_policy, 0.004, 8);
        let group = make_group(&env, &old_policy, 6, 9, 1e-8);
        let cfg = GrpoConfig {
            kl_beta: 0.0,
            ..GrpoConfig::default()
        };
        let out = surrogate_objective(&policy, &old_policy, &env, &group, &cfg).unwrap();
        assert_eq!(out.clip_fraction, 0.0);
        // The unclipped objective computed independently.
        let mut unclipped = 0.0;
        for (k, rollout) in group.rollouts.iter().enumerate() {
            let lc =
                sequence_log_prob(&policy, &env, &group.source, &group.tgt, &rollout.actions())
                    .unwrap();
            unclipped +=
                (lc - rollout.log_prob_total).exp() * group.advantages[k] / group.rollouts.len() as f64;
        }
        assert!((out.objective - unclipped).abs() < 1e-12);
    }

    /// Central finite differences over every logit.
    fn finite_difference_gradient(
        policy: &ToyPolicy,
        ref_policy: &ToyPolicy,
        env: &SynthEnv,
        group: &RolloutGroup,
        cfg: &GrpoConfig,
        h: f64,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; policy.num_params()];
        let num_actions = policy.num_actions();
        for i in 0..policy.num_params() {
            let (ctx, a) = (i / num_actions, i % num_actions);
            let mut plus = policy.clone();
            plus.set_logit(ctx, a, policy.logit(ctx, a) + h);
            let mut minus = policy.clone();
            minus.set_logit(ctx, a, policy.logit(ctx, a) - h);
            let jp = surrogate_objective(&plus, ref_policy, env, group, cfg)
                .unwrap()
                .objective;
            let jm = surrogate_objective(&minus, ref_policy, env, group, cfg)
                .unwrap()
                .objective;
            grad[i] = (jp - jm) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let env = tiny_env();
        let h = 1e-5;
        let mut checked = 0;
        let mut case = 0u64;
        while checked < 30 {
            case += 1;
            let old_policy = random_policy(&env, 100 + case);
            // Small perturbations keep every ratio well inside the clip band.
            let policy = perturbed(&old_policy, 0.005, 200 + case);
            let ref_policy = perturbed(&old_policy, 0.3, 300 + case);
            let beta = [0.0, 0.01, 0.1][(case % 3) as usize];
            let cfg = GrpoConfig {
                kl_beta: beta,
                ..GrpoConfig::default()
            };
            let group = make_group(&env, &old_policy, 4, 400 + case, 1e-8);
            // Keep ratios at least 0.01 away from the clip boundaries.
            let safe = group.rollouts.iter().all(|rollout| {
                let lc = sequence_log_prob(&policy, &env, &group.source, &group.tgt, &rollout.actions()).unwrap();
                let rho = (lc - rollout.log_prob_total).exp();
                rho > 1.0 - cfg.clip_epsilon + 0.01 && rho < 1.0 + cfg.clip_epsilon - 0.01
            });
            if !safe {
                continue;
            }
            checked += 1;

            let analytic = surrogate_objective(&policy, &ref_policy, &env, &group, &cfg)
                .unwrap()
                .gradient;
            let numeric =
                finite_difference_gradient(&policy, &ref_policy, &env, &group, &cfg, h);
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                assert!(
                    err < 1e-5,
                    "case {case} param {i}: analytic {a}, numeric {n}, err {err}"
                );
            }
        }
    }

    /// Enumerate well-formed action sequences for an m-position prompt.
    fn enumerate_sequences(policy: &ToyPolicy, m: usize, cap: usize) -> Vec<Vec<usize>> {
        let num_actions = policy.num_actions();
        let extra = policy.extra_action();
        let mut complete = Vec::new();
        let mut stack = vec![(Vec::new(), 0usize, 0usize)];
        while let Some((actions, pos, emitted)) = stack.pop() {
            if pos < m {
                for a in 0..num_actions {
                    let mut next = actions.clone();
                    next.push(a);
                    let e = emitted + usize::from(a != extra);
                    if pos + 1 == m && e >= cap {
                        complete.push(next);
                    } else {
                        stack.push((next, pos + 1, e));
                    }
                }
            } else {
                for a in 0..num_actions {
                    let mut next = actions.clone();
                    next.push(a);
                    if a == extra || emitted + 1 >= cap {
                        complete.push(next);
                    } else {
                        stack.push((next, pos, emitted + 1));
                    }
                }
            }
        }
        complete
    }

    /// With beta = 0 and ratios at 1, the expected GRPO gradient matches the
    /// exact gradient of the expected reward computed by enumeration, up to
    /// the known (1 - 1/G) self-baseline factor and the fixed advantage
    /// denominator.
    #[test]
    fn expected_gradient_matches_enumerated_score_function() {
        let env = tiny_env();
        let policy = random_policy(&env, 77);
        let x = TokenSentence::new(vec!["L0_w0".to_string()], env.lang_tag(0).clone()).unwrap();
        let tgt = env.lang_tag(1).clone();
        // Deterministic reward on hypothesis token multisets.
        let reward_of = |tokens: &[String]| -> f64 {
            let mut v = 0.37 * tokens.len() as f64;
            for tok in tokens {
                let (lang, id) = env.parse_token(tok).unwrap();
                v += 0.13 * lang as f64 + 0.29 * id as f64;
            }
            (v * 0.61).sin() * 0.5 + 0.5
        };

        // Exact gradient of sum_y pi(y) r(y) by enumeration.
        let sequences = enumerate_sequences(&policy, 1, 2);
        let mut exact = vec![0.0; policy.num_params()];
        let tgt_idx = 1usize;
        for actions in &sequences {
            let lp = sequence_log_prob(&policy, &env, &x, &tgt, actions).unwrap();
            let p = lp.exp();
            // Reconstruct contexts: one position context, then tail.
            let mut tokens = Vec::new();
            let mut contexts = Vec::new();
            let id0 = env.parse_token(&x.tokens[0]).unwrap().1;
            contexts.push(policy.position_context(id0, tgt_idx));
            for _ in 1..actions.len() {
                contexts.push(policy.tail_context(tgt_idx));
            }
            for &a in actions {
                if let Some((lang, id)) = policy.action_token(a) {
                    tokens.push(crate::env::token_name(lang, id));
                }
            }
            let r = reward_of(&tokens);
            for (ctx, &a) in contexts.iter().zip(actions) {
                let probs = policy.probs_row(*ctx);
                let base = ctx * policy.num_actions();
                for (action, prob) in probs.iter().enumerate() {
                    exact[base + action] += p * r * (f64::from(action == a) - prob);
                }
            }
        }

        // Monte-Carlo average of the analytic GRPO gradient with a fixed
        // large advantage denominator (std floor 10 always dominates).
        let g = 8usize;
        let floor = 10.0;
        let cfg = GrpoConfig {
            kl_beta: 0.0,
            clip_epsilon: 0.9,
            advantage_std_floor: floor,
            ..GrpoConfig::default()
        };
        let mut r = rng(123);
        let mut mean_grad = vec![0.0; policy.num_params()];
        let num_groups = 60_000usize;
        for _ in 0..num_groups {
            let mut group = sample_rollouts(&policy, &env, &x, &tgt, g, 1.0, &mut r).unwrap();
            let rewards: Vec<f64> = group
                .rollouts
                .iter()
                .map(|ro| reward_of(&ro.hypothesis.tokens))
                .collect();
            group.advantages = compute_advantages(&rewards, floor).unwrap();
            let out = surrogate_objective(&policy, &policy, &env, &group, &cfg).unwrap();
            for (acc, v) in mean_grad.iter_mut().zip(&out.gradient) {
                *acc += v / num_groups as f64;
            }
        }
        // Undo the denominator and the self-baseline shrinkage.
        let correction = floor / (1.0 - 1.0 / g as f64);
        let mut max_abs_err = 0.0f64;
        for (mc, ex) in mean_grad.iter().zip(&exact) {
            max_abs_err = max_abs_err.max((mc * correction - ex).abs());
        }
        // Sampling tolerance for 60k groups of 8.
        assert!(max_abs_err < 2e-3, "max abs err {max_abs_err}");
    }

    fn walar_suite(env: &SynthEnv) -> RewardSuite {
        RewardSuite::new(
            RewardMode::Walar,
            RewardConfig::default(),
            Box::new(HoleyQe::new(env.clone(), HoleFlags::all())),
            Box::new(PrefixLid),
            Box::new(crate::env::SemanticEmbedder::new(
                env,
                crate::env::SemanticEmbedder::DEFAULT_SCALE,
            )),
        )
        .unwrap()
    }

    #[test]
    fn zero_steps_leave_the_policy_untouched() {
        let env = tiny_env();
        let suite = walar_suite(&env);
        let cfg = GrpoConfig {
            total_steps: 0,
            ..GrpoConfig::default()
        };
        let state = train(&env, &suite, &cfg, &[(0, 1)], &PrefixLid).unwrap();
        assert_eq!(state.policy.logits(), ToyPolicy::for_env(&env).logits());
        assert!(state.metrics.is_empty());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let env = tiny_env();
        let cfg = GrpoConfig {
            total_steps: 5,
            prompts_per_step: 2,
            group_size: 4,
            seed: 42,
            ..GrpoConfig::default()
        };
        let run = || {
            let suite = walar_suite(&env);
            train(&env, &suite, &cfg, &[(0, 1), (1, 0)], &PrefixLid).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(metrics_to_ndjson(&a.metrics), metrics_to_ndjson(&b.metrics));
        assert_eq!(a.policy.logits(), b.policy.logits());
        // The reference policy is the untouched initial snapshot.
        assert_eq!(a.ref_policy.logits(), ToyPolicy::for_env(&env).logits());
    }

    #[test]
    fn metrics_log_has_the_fixed_key_set() {
        let metrics = [StepMetrics {
            step: 0,
            mean_reward: 1.0,
            mean_r_qe: -2.0,
            mean_r_wa: 0.5,
            lcr: 0.75,
            copy_rate: 0.0,
            len_ratio: 1.25,
            dict_acc: 0.5,
        }];
        let line = metrics_to_ndjson(&metrics);
        assert_eq!(
            line,
            "{\"step\":0,\"mean_reward\":1.0,\"mean_r_qe\":-2.0,\"mean_r_wa\":0.5,\
             \"lcr\":0.75,\"copy_rate\":0.0,\"len_ratio\":1.25,\"dict_acc\":0.5}\n"
        );
    }

    #[test]
    fn checkpoint_integrates_with_training_state() {
        let env = tiny_env();
        let suite = walar_suite(&env);
        let cfg = GrpoConfig {
            total_steps: 3,
            prompts_per_step: 2,
            group_size: 4,
            seed: 7,
            ..GrpoConfig::default()
        };
        let state = train(&env, &suite, &cfg, &[(0, 1)], &PrefixLid).unwrap();
        let checkpoint = PolicyCheckpoint::new(
            &state.policy,
            &env,
            cfg.seed,
            0,
            state.step,
            vec![("L0".into(), "L1".into())],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        checkpoint.save(&path).unwrap();
        let (_, restored) = PolicyCheckpoint::load(&path).unwrap().restore().unwrap();
        assert_eq!(restored.logits(), state.policy.logits());
    }
}
