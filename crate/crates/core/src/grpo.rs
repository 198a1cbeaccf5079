//! Group-relative policy optimization for the grid policy.
//!
//! One step samples `G` rollouts for each of several queries, scores them
//! with the composite reward, normalizes rewards within each group, reweights
//! negative advantages on visual tokens by their certainty, and takes one
//! gradient-ascent step on the clipped surrogate minus a KL penalty toward a
//! frozen reference policy.

use serde::{Deserialize, Serialize};

use crate::certainty::{batch_normalize, certainty_score, internal_certainty, token_certainty, visual_grounding};
use crate::confidence::{composite_reward, ConfidenceMode, RewardConfig, RewardInputs};
use crate::distributions::log_softmax;
use crate::env::{generate_task, rollout, verify, Decoding, Environment, Policy, RolloutConfig, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::{ece, CalibrationRecord};
use crate::parallel::Execution;
use crate::seeding::{derive_seed, TAG_ROLLOUT, TAG_STEP, TAG_TASK};

pub const ADVANTAGE_EPS: f64 = 1e-8;

/// Population over which sequence-level certainty scores are z-scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertaintyNormalization {
    /// Every trajectory of the step.
    #[default]
    Batch,
    /// Only the rollouts of the same query.
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub queries_per_step: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub lambda_tar: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Set from the run's top-level seed.
    #[serde(skip)]
    pub seed: u64,
    pub temperature: f64,
    /// Optimization passes over each step's rollouts.
    pub epochs: usize,
    pub normalization: CertaintyNormalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            queries_per_step: 16,
            clip_epsilon: 0.2,
            kl_beta: 1e-3,
            lambda_tar: 0.1,
            learning_rate: 30.0,
            steps: 3000,
            seed: 0,
            temperature: 1.0,
            epochs: 1,
            normalization: CertaintyNormalization::Batch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.queries_per_step == 0 {
            return bad("queries_per_step must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!("clip_epsilon must lie in (0, 1), got {}", self.clip_epsilon));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for (name, v) in [
            ("kl_beta", self.kl_beta),
            ("lambda_tar", self.lambda_tar),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// `(R_i - mean) / (std_pop + eps)`; a constant group maps to zeros.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect()
}

/// Scales a negative advantage on a visual token by `1 + lambda (1 - 2 s)`:
/// uncertain tokens are penalized harder, confident ones more gently.
pub fn reweight_advantage(advantage: f64, s_tilde: f64, in_zvis: bool, lambda_tar: f64) -> f64 {
    if in_zvis && advantage < 0.0 {
        advantage * (1.0 + lambda_tar * (1.0 - 2.0 * s_tilde))
    } else {
        advantage
    }
}

fn clip(ratio: f64, eps: f64) -> f64 {
    ratio.clamp(1.0 - eps, 1.0 + eps)
}

pub fn surrogate_term(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    (ratio * advantage).min(clip(ratio, clip_epsilon) * advantage)
}

/// The `G` rollouts for one query with their rewards and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: u64,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// One entry per sampled token of each trajectory.
    pub token_advantages: Vec<Vec<f64>>,
}

impl RolloutGroup {
    /// Normalizes `rewards` and broadcasts each advantage over its tokens.
    pub fn new(query_id: u64, trajectories: Vec<Trajectory>, rewards: Vec<f64>) -> Result<Self> {
        if trajectories.len() != rewards.len() {
            return Err(Error::Shape {
                expected: trajectories.len(),
                actual: rewards.len(),
            });
        }
        if trajectories.is_empty() {
            return Err(Error::EmptyInput("rollout group"));
        }
        let advantages = group_advantages(&rewards);
        let token_advantages = trajectories
            .iter()
            .zip(&advantages)
            .map(|(t, &a)| vec![a; t.tokens.len()])
            .collect();
        Ok(Self {
            query_id,
            trajectories,
            rewards,
            advantages,
            token_advantages,
        })
    }

    /// Applies token-level reweighting from per-token certainties of each
    /// trajectory's visual rationale. Returns how many tokens changed.
    pub fn apply_tar(&mut self, token_s_tilde: &[Vec<f64>], lambda_tar: f64) -> Result<usize> {
        if token_s_tilde.len() != self.trajectories.len() {
            return Err(Error::Shape {
                expected: self.trajectories.len(),
                actual: token_s_tilde.len(),
            });
        }
        let mut changed = 0;
        for ((traj, advs), s) in self.trajectories.iter().zip(&mut self.token_advantages).zip(token_s_tilde) {
            let mut visual = 0;
            for (tok, a) in traj.tokens.iter().zip(advs.iter_mut()) {
                if !tok.site.is_visual() {
                    continue;
                }
                let s_t = *s.get(visual).ok_or(Error::Shape {
                    expected: visual + 1,
                    actual: s.len(),
                })?;
                visual += 1;
                let new = reweight_advantage(*a, s_t, true, lambda_tar);
                if new != *a {
                    changed += 1;
                }
                *a = new;
            }
        }
        Ok(changed)
    }
}

/// Objective value (to maximize) and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Mean per-token KL to the reference policy.
    pub ref_kl: f64,
    /// Fraction of tokens whose ratio lies outside the clip range.
    pub clip_fraction: f64,
    pub tokens: usize,
}

struct TrajectoryTerm {
    value: f64,
    gradient: Vec<f64>,
    kl_sum: f64,
    clipped: usize,
    tokens: usize,
}

fn trajectory_term(
    traj: &Trajectory,
    advantages: &[f64],
    weight: f64,
    policy: &Policy,
    reference: &Policy,
    cfg: &TrainConfig,
) -> Result<TrajectoryTerm> {
    let n = traj.tokens.len();
    if traj.logprobs_old.len() != n {
        return Err(Error::Contract(format!(
            "trajectory has {n} tokens but {} old log-probabilities",
            traj.logprobs_old.len()
        )));
    }
    if advantages.len() != n {
        return Err(Error::Contract(format!(
            "trajectory has {n} tokens but {} advantages",
            advantages.len()
        )));
    }
    if n == 0 {
        return Err(Error::Contract("trajectory has no sampled tokens".into()));
    }
    let t_inv = 1.0 / cfg.temperature;
    let w = weight / n as f64;
    let mut term = TrajectoryTerm {
        value: 0.0,
        gradient: vec![0.0; policy.num_params()],
        kl_sum: 0.0,
        clipped: 0,
        tokens: n,
    };
    let mut dlogits = Vec::new();
    for ((tok, &logp_old), &adv) in traj.tokens.iter().zip(&traj.logprobs_old).zip(advantages) {
        if !logp_old.is_finite() {
            return Err(Error::Contract(format!("non-finite old log-probability {logp_old}")));
        }
        let logp = log_softmax(&policy.logits(&tok.site), cfg.temperature);
        let logr = log_softmax(&reference.logits(&tok.site), cfg.temperature);
        if tok.token >= logp.len() {
            return Err(Error::Contract(format!(
                "token {} outside vocabulary of {}",
                tok.token,
                logp.len()
            )));
        }
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let kl: f64 = p
            .iter()
            .zip(logp.iter().zip(&logr))
            .filter(|(&pu, _)| pu > 0.0)
            .map(|(pu, (lp, lr))| pu * (lp - lr))
            .sum();

        let ratio = (logp[tok.token] - logp_old).exp();
        let unclipped = ratio * adv;
        let clipped = clip(ratio, cfg.clip_epsilon) * adv;
        if ratio < 1.0 - cfg.clip_epsilon || ratio > 1.0 + cfg.clip_epsilon {
            term.clipped += 1;
        }
        term.value += w * (unclipped.min(clipped) - cfg.kl_beta * kl);
        term.kl_sum += kl;

        // d/dz of ratio*A is A*ratio*(e_a - p)/T; the clipped branch is constant.
        let surrogate_scale = if unclipped <= clipped { w * adv * ratio * t_inv } else { 0.0 };
        let kl_scale = w * cfg.kl_beta * t_inv;
        dlogits.clear();
        dlogits.extend(p.iter().zip(logp.iter().zip(&logr)).enumerate().map(|(u, (&pu, (lp, lr)))| {
            let onehot = if u == tok.token { 1.0 } else { 0.0 };
            let dkl = if pu > 0.0 { pu * (lp - lr - kl) } else { 0.0 };
            surrogate_scale * (onehot - pu) - kl_scale * dkl
        }));
        policy.backward(&tok.site, &dlogits, &mut term.gradient);
    }
    Ok(term)
}

/// Token-mean per trajectory, mean over each group, mean over groups, with a
/// per-token `beta * KL(pi || pi_ref)` penalty. Rewards and certainty targets
/// enter only through the advantages, so they carry no gradient.
pub fn objective(
    groups: &[RolloutGroup],
    policy: &Policy,
    reference: &Policy,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<ObjectiveValue> {
    if groups.is_empty() {
        return Err(Error::EmptyInput("objective batch"));
    }
    if reference.num_params() != policy.num_params() || reference.colors() != policy.colors() {
        return Err(Error::Shape {
            expected: policy.num_params(),
            actual: reference.num_params(),
        });
    }
    let mut jobs = Vec::new();
    for g in groups {
        if g.trajectories.is_empty() {
            return Err(Error::EmptyInput("rollout group"));
        }
        if g.token_advantages.len() != g.trajectories.len() {
            return Err(Error::Contract(format!(
                "group {} has {} trajectories but {} advantage rows",
                g.query_id,
                g.trajectories.len(),
                g.token_advantages.len()
            )));
        }
        let weight = 1.0 / (groups.len() * g.trajectories.len()) as f64;
        for (t, a) in g.trajectories.iter().zip(&g.token_advantages) {
            jobs.push((t, a.as_slice(), weight));
        }
    }
    let terms = exec.map(&jobs, |&(t, a, w)| trajectory_term(t, a, w, policy, reference, cfg));

    let mut out = ObjectiveValue {
        value: 0.0,
        gradient: vec![0.0; policy.num_params()],
        ref_kl: 0.0,
        clip_fraction: 0.0,
        tokens: 0,
    };
    let mut kl_sum = 0.0;
    let mut clipped = 0;
    for term in terms {
        let term = term?;
        out.value += term.value;
        for (g, d) in out.gradient.iter_mut().zip(&term.gradient) {
            *g += d;
        }
        kl_sum += term.kl_sum;
        clipped += term.clipped;
        out.tokens += term.tokens;
    }
    out.ref_kl = kl_sum / out.tokens as f64;
    out.clip_fraction = clipped as f64 / out.tokens as f64;
    Ok(out)
}

/// Per-step training diagnostics, one log record per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_r_acc: f64,
    pub mean_r_cal: f64,
    pub mean_r_vis: f64,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub ece: f64,
    /// Mean entropy of the perception distributions along `z_vis`.
    pub zvis_entropy: f64,
    pub mean_d_kl: f64,
    pub mean_s_tilde: f64,
    pub advantage_std: f64,
    pub advantage_abs_max: f64,
    pub constant_groups: usize,
    pub tar_modified: usize,
    pub objective: f64,
    pub ref_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub malformed_confidences: usize,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Rollout settings used during training.
pub fn training_rollout_config(env: &Environment, cfg: &TrainConfig, reward: &RewardConfig) -> RolloutConfig {
    RolloutConfig {
        temperature: cfg.temperature,
        perturbation: env.perturbation,
        mode: reward.mode,
        decoding: Decoding::Sample,
    }
}

/// Runs one optimization step in place: rollouts, scoring, advantages,
/// reweighting and `epochs` ascent updates.
pub fn train_step(
    policy: &mut Policy,
    reference: &Policy,
    env: &Environment,
    cfg: &TrainConfig,
    reward: &RewardConfig,
    step: u64,
    exec: Execution,
) -> Result<StepStats> {
    cfg.validate()?;
    reward.validate()?;
    env.validate()?;
    if env.task.colors as usize != policy.colors() {
        return Err(Error::Config(format!(
            "policy has {} colors but the task uses {}",
            policy.colors(),
            env.task.colors
        )));
    }
    let step_seed = derive_seed(cfg.seed, &[TAG_STEP, step]);
    let (q_count, g) = (cfg.queries_per_step, cfg.group_size);
    let tasks = exec
        .map_range(q_count, |q| generate_task(derive_seed(step_seed, &[TAG_TASK, q as u64]), &env.task))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let rcfg = training_rollout_config(env, cfg, reward);
    let frozen: &Policy = policy;
    let trajectories = exec
        .map_range(q_count * g, |k| {
            let (q, i) = (k / g, k % g);
            let (img, query) = &tasks[q];
            let seed = derive_seed(step_seed, &[TAG_ROLLOUT, q as u64, i as u64]);
            rollout(frozen, img, query, &rcfg, seed)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    // Sequence-level certainty: raw log-ratio scores, then z-score + sigmoid.
    let mut d_kl = Vec::with_capacity(trajectories.len());
    let mut h = Vec::with_capacity(trajectories.len());
    let mut raw = Vec::with_capacity(trajectories.len());
    for t in &trajectories {
        let (d, e) = (visual_grounding(&t.vis_trace)?, internal_certainty(&t.vis_trace)?);
        raw.push(certainty_score(d, e)?);
        d_kl.push(d);
        h.push(e);
    }
    let s_tilde = match cfg.normalization {
        CertaintyNormalization::Batch => batch_normalize(&raw)?,
        CertaintyNormalization::Group => {
            let mut out = Vec::with_capacity(raw.len());
            for chunk in raw.chunks(g) {
                out.extend(batch_normalize(chunk)?);
            }
            out
        }
    };

    let mut breakdowns = Vec::with_capacity(trajectories.len());
    let mut records = Vec::with_capacity(trajectories.len());
    for (k, t) in trajectories.iter().enumerate() {
        let correct = verify(t.y, &tasks[k / g].1);
        let phi = t.holistic_confidence(reward.aggregation);
        let visual = match reward.mode {
            ConfidenceMode::Decoupled => t.c_vis().map(|c| (c, s_tilde[k])),
            ConfidenceMode::Holistic => None,
        };
        breakdowns.push(composite_reward(&RewardInputs { correct, phi, visual }, reward)?);
        records.push(CalibrationRecord::new(phi, correct)?);
    }

    let use_tar = reward.mode == ConfidenceMode::Decoupled && cfg.lambda_tar > 0.0;
    let mut groups = Vec::with_capacity(q_count);
    let mut tar_modified = 0;
    let mut trajectories = trajectories.into_iter();
    for q in 0..q_count {
        let members: Vec<Trajectory> = trajectories.by_ref().take(g).collect();
        let rewards = breakdowns[q * g..(q + 1) * g].iter().map(|b| b.total).collect();
        let mut group = RolloutGroup::new(q as u64, members, rewards)?;
        if use_tar {
            let token_s = group
                .trajectories
                .iter()
                .map(|t| token_certainty(&t.vis_trace))
                .collect::<Result<Vec<_>>>()?;
            tar_modified += group.apply_tar(&token_s, cfg.lambda_tar)?;
        }
        groups.push(group);
    }

    let mut first = None;
    for _ in 0..cfg.epochs {
        let obj = objective(&groups, policy, reference, cfg, exec)?;
        if obj.gradient.iter().any(|d| !d.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
        }
        for (p, d) in policy.params_mut().iter_mut().zip(&obj.gradient) {
            *p += cfg.learning_rate * d;
        }
        first.get_or_insert(obj);
    }
    let obj = first.expect("epochs >= 1");

    let advantages: Vec<f64> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();
    let adv_mean = mean(advantages.iter().copied());
    Ok(StepStats {
        step,
        mean_reward: mean(breakdowns.iter().map(|b| b.total)),
        mean_r_acc: mean(breakdowns.iter().map(|b| b.r_acc)),
        mean_r_cal: mean(breakdowns.iter().map(|b| b.r_cal)),
        mean_r_vis: mean(breakdowns.iter().map(|b| b.r_vis)),
        accuracy: mean(records.iter().map(|r| if r.correct { 1.0 } else { 0.0 })),
        mean_confidence: mean(records.iter().map(|r| r.confidence)),
        ece: ece(&records, 10)?,
        zvis_entropy: mean(h),
        mean_d_kl: mean(d_kl),
        mean_s_tilde: mean(s_tilde),
        advantage_std: mean(advantages.iter().map(|a| (a - adv_mean).powi(2))).sqrt(),
        advantage_abs_max: advantages.iter().fold(0.0, |m, a| f64::max(m, a.abs())),
        constant_groups: groups.iter().filter(|g| g.advantages.iter().all(|&a| a == 0.0)).count(),
        tar_modified,
        objective: obj.value,
        ref_kl: obj.ref_kl,
        clip_fraction: obj.clip_fraction,
        grad_norm: obj.gradient.iter().map(|d| d * d).sum::<f64>().sqrt(),
        malformed_confidences: 0,
    })
}

/// Owns the policy, its frozen reference and the step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    policy: Policy,
    reference: Policy,
    env: Environment,
    cfg: TrainConfig,
    reward: RewardConfig,
    exec: Execution,
    step: u64,
}

impl Trainer {
    /// The reference policy is a snapshot of `policy`.
    pub fn new(policy: Policy, env: Environment, cfg: TrainConfig, reward: RewardConfig) -> Result<Self> {
        cfg.validate()?;
        reward.validate()?;
        env.validate()?;
        Ok(Self {
            reference: policy.clone(),
            policy,
            env,
            cfg,
            reward,
            exec: Execution::default(),
            step: 0,
        })
    }

    pub fn with_reference(mut self, reference: Policy) -> Result<Self> {
        if reference.colors() != self.policy.colors() || reference.num_params() != self.policy.num_params() {
            return Err(Error::Shape {
                expected: self.policy.num_params(),
                actual: reference.num_params(),
            });
        }
        self.reference = reference;
        Ok(self)
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn reference(&self) -> &Policy {
        &self.reference
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let stats = train_step(
            &mut self.policy,
            &self.reference,
            &self.env,
            &self.cfg,
            &self.reward,
            self.step,
            self.exec,
        )?;
        self.step += 1;
        Ok(stats)
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certainty::VisualTrace;
    use crate::env::{AnswerContext, SampledToken, Site, TaskConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[0.5; 4]), vec![0.0; 4]);
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0]);
        for (got, want) in a.iter().zip([1.732051, -0.577350, -0.577350, -0.577350]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-6);
        }
        let a = group_advantages(&[1.0, 0.0]);
        assert_abs_diff_eq!(a[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(a[1], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn reweight_examples() {
        assert_eq!(reweight_advantage(-1.0, 0.0, true, 0.1), -1.1);
        assert_eq!(reweight_advantage(-1.0, 0.5, true, 0.1), -1.0);
        assert_eq!(reweight_advantage(0.5, 0.0, true, 0.1), 0.5);
        assert_eq!(reweight_advantage(-1.0, 0.0, false, 0.1), -1.0);
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(surrogate_term(1.0, 0.37, 0.2), 0.37);
        assert_abs_diff_eq!(surrogate_term(2.0, 1.0, 0.2), 1.2, epsilon = 1e-15);
        assert_abs_diff_eq!(surrogate_term(0.5, -1.0, 0.2), -0.8, epsilon = 1e-15);
    }

    fn one_token(policy: &Policy, site: Site, token: usize, temperature: f64) -> Trajectory {
        let logp = log_softmax(&policy.logits(&site), temperature)[token];
        Trajectory {
            z_vis: vec![],
            c_vis_raw: None,
            z_reas: vec![],
            c_reas_raw: 0,
            y: token,
            vis_trace: VisualTrace::new(vec![], vec![]).unwrap(),
            tokens: vec![SampledToken { site, token }],
            logprobs_old: vec![logp],
        }
    }

    #[test]
    fn single_token_objective_is_the_advantage() {
        let policy = Policy::base(4);
        let cfg = TrainConfig {
            kl_beta: 0.0,
            ..TrainConfig::default()
        };
        let t = one_token(&policy, Site::Answer(AnswerContext::Compare { diff: 2 }), 0, 1.0);
        let group = RolloutGroup {
            query_id: 0,
            trajectories: vec![t],
            rewards: vec![0.0],
            advantages: vec![0.7],
            token_advantages: vec![vec![0.7]],
        };
        let obj = objective(&[group], &policy, &policy, &cfg, Execution::Sequential).unwrap();
        assert_abs_diff_eq!(obj.value, 0.7, epsilon = 1e-12);
        assert_eq!(obj.ref_kl, 0.0);
    }

    #[test]
    fn balanced_pair_has_zero_objective() {
        let policy = Policy::base(4);
        let site = Site::Answer(AnswerContext::Compare { diff: 0 });
        let trajs = vec![one_token(&policy, site.clone(), 0, 1.0), one_token(&policy, site, 2, 1.0)];
        let group = RolloutGroup::new(0, trajs, vec![1.0, 0.0]).unwrap();
        let obj = objective(&[group], &policy, &policy, &TrainConfig::default(), Execution::Sequential).unwrap();
        assert_abs_diff_eq!(obj.value, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn kl_penalty_against_uniform_reference() {
        // Two colors and a cold temperature make the majority head one-hot.
        let mut sharp = Policy::base(2);
        let mut flat = Policy::base(2);
        let n = sharp.num_params();
        sharp.params_mut()[n - 5] = 1.0;
        flat.params_mut()[n - 5] = 0.0;
        let cfg = TrainConfig {
            kl_beta: 0.25,
            temperature: 1e-3,
            ..TrainConfig::default()
        };
        let site = Site::Answer(AnswerContext::Majority { tallies: vec![1, 0] });
        let t = one_token(&sharp, site, 0, cfg.temperature);
        let group = RolloutGroup {
            query_id: 0,
            trajectories: vec![t],
            rewards: vec![0.0],
            advantages: vec![0.0],
            token_advantages: vec![vec![0.0]],
        };
        let obj = objective(&[group], &sharp, &flat, &cfg, Execution::Sequential).unwrap();
        assert_abs_diff_eq!(obj.value, -0.25 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn missing_logprob_is_a_contract_error() {
        let policy = Policy::base(4);
        let mut t = one_token(&policy, Site::Answer(AnswerContext::Compare { diff: 1 }), 1, 1.0);
        t.logprobs_old.clear();
        let group = RolloutGroup {
            query_id: 0,
            trajectories: vec![t],
            rewards: vec![0.0],
            advantages: vec![0.0],
            token_advantages: vec![vec![0.0]],
        };
        let err = objective(&[group], &policy, &policy, &TrainConfig::default(), Execution::Sequential);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    fn sampled_groups(policy: &Policy, seed: u64) -> Vec<RolloutGroup> {
        let env = Environment::default();
        let rcfg = RolloutConfig::default();
        (0..2)
            .map(|q| {
                let (img, query) = generate_task(derive_seed(seed, &[q]), &env.task).unwrap();
                let trajs: Vec<_> = (0..3)
                    .map(|i| rollout(policy, &img, &query, &rcfg, derive_seed(seed, &[q, i])).unwrap())
                    .collect();
                let rewards = (0..3).map(|i| ((seed + q + i) % 3) as f64).collect();
                RolloutGroup::new(q, trajs, rewards).unwrap()
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let old = Policy::random(4, 3, 0.5);
        let groups = sampled_groups(&old, 11);
        let mut theta = Policy::random(4, 5, 0.5);
        for (p, o) in theta.params_mut().iter_mut().zip(old.params()) {
            *p = o + 0.1 * *p;
        }
        let reference = Policy::random(4, 7, 0.5);
        let cfg = TrainConfig {
            kl_beta: 0.3,
            ..TrainConfig::default()
        };
        let obj = objective(&groups, &theta, &reference, &cfg, Execution::Sequential).unwrap();
        let h = 1e-5;
        let mut err2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..theta.num_params() {
            let mut plus = theta.clone();
            plus.params_mut()[i] += h;
            let mut minus = theta.clone();
            minus.params_mut()[i] -= h;
            let fp = objective(&groups, &plus, &reference, &cfg, Execution::Sequential).unwrap().value;
            let fm = objective(&groups, &minus, &reference, &cfg, Execution::Sequential).unwrap().value;
            let fd = (fp - fm) / (2.0 * h);
            err2 += (fd - obj.gradient[i]).powi(2);
            norm2 += fd * fd;
        }
        assert!(norm2 > 0.0);
        assert!((err2 / norm2).sqrt() < 1e-4);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut policy = Policy::base(4);
        let before = policy.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            queries_per_step: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let stats = train_step(
            &mut policy,
            &before,
            &Environment::default(),
            &cfg,
            &RewardConfig::default(),
            0,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(policy, before);
        assert!(stats.mean_reward.is_finite());
        assert_eq!(stats.malformed_confidences, 0);
    }

    #[test]
    fn parallel_and_sequential_steps_agree() {
        let cfg = TrainConfig {
            queries_per_step: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = |exec| {
            let mut t = Trainer::new(Policy::base(4), Environment::default(), cfg, RewardConfig::default())
                .unwrap()
                .with_execution(exec);
            let stats: Vec<_> = (0..3).map(|_| t.step().unwrap()).collect();
            (stats, t.into_policy())
        };
        assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
    }

    #[test]
    fn constant_rewards_leave_only_the_kl_gradient() {
        let old = Policy::random(4, 1, 0.5);
        let mut groups = sampled_groups(&old, 4);
        for g in &mut groups {
            *g = RolloutGroup::new(g.query_id, g.trajectories.clone(), vec![0.3; 3]).unwrap();
        }
        let cfg0 = TrainConfig {
            kl_beta: 0.0,
            ..TrainConfig::default()
        };
        let reference = Policy::base(4);
        let obj = objective(&groups, &old, &reference, &cfg0, Execution::Sequential).unwrap();
        assert!(obj.gradient.iter().all(|&d| d == 0.0));
        let cfg1 = TrainConfig { kl_beta: 1.0, ..cfg0 };
        let obj = objective(&groups, &old, &reference, &cfg1, Execution::Sequential).unwrap();
        assert!(obj.gradient.iter().any(|&d| d != 0.0));
    }

    #[test]
    fn strong_kl_penalty_pulls_toward_reference() {
        let reference = Policy::base(4);
        let mut start = Policy::random(4, 21, 1.0);
        for (p, r) in start.params_mut().iter_mut().zip(reference.params()) {
            *p = r + 0.5 * *p;
        }
        let cfg = TrainConfig {
            kl_beta: 10.0,
            learning_rate: 0.05,
            queries_per_step: 4,
            seed: 17,
            ..TrainConfig::default()
        };
        let probe = sampled_groups(&reference, 99);
        let probe_kl = |p: &Policy| objective(&probe, p, &reference, &cfg, Execution::Sequential).unwrap().ref_kl;
        let mut trainer = Trainer::new(start, Environment::default(), cfg, RewardConfig::default())
            .unwrap()
            .with_reference(reference.clone())
            .unwrap();
        let mut last = probe_kl(trainer.policy());
        assert!(last > 0.0);
        for _ in 0..10 {
            trainer.step().unwrap();
            let kl = probe_kl(trainer.policy());
            assert!(kl <= last, "{kl} > {last}");
            last = kl;
        }
    }

    #[test]
    fn tar_touches_only_negative_visual_tokens() {
        let policy = Policy::base(4);
        let (img, query) = generate_task(5, &TaskConfig::default()).unwrap();
        let trajs: Vec<_> = (0..4)
            .map(|i| rollout(&policy, &img, &query, &RolloutConfig::default(), i).unwrap())
            .collect();
        let mut group = RolloutGroup::new(0, trajs, vec![1.0, 0.0, 0.0, 0.5]).unwrap();
        let before = group.token_advantages.clone();
        let s: Vec<Vec<f64>> = group.trajectories.iter().map(|t| vec![0.0; t.z_vis.len()]).collect();
        let changed = group.apply_tar(&s, 0.1).unwrap();
        let mut expected = 0;
        for ((t, old), new) in group.trajectories.iter().zip(&before).zip(&group.token_advantages) {
            for ((tok, a), b) in t.tokens.iter().zip(old).zip(new) {
                if tok.site.is_visual() && *a < 0.0 {
                    assert_eq!(*b, *a * 1.1);
                    expected += 1;
                } else {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        assert_eq!(changed, expected);
        assert!(expected > 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { group_size: 1, ..TrainConfig::default() },
            TrainConfig { clip_epsilon: 1.0, ..TrainConfig::default() },
            TrainConfig { kl_beta: -1.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(rewards in prop::collection::vec(-5.0f64..5.0, 2..16)) {
            let a = group_advantages(&rewards);
            let n = a.len() as f64;
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9 * n);
            if rewards.iter().any(|&r| r != rewards[0]) {
                let mu = rewards.iter().sum::<f64>() / n;
                let sigma = (rewards.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / n).sqrt();
                let std = (a.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
                prop_assert!((std - sigma / (sigma + ADVANTAGE_EPS)).abs() < 1e-12);
                if sigma >= 1e-2 {
                    prop_assert!((std - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn surrogate_is_a_lower_envelope(ratio in 0.01f64..4.0, adv in -3.0f64..3.0, eps in 0.01f64..0.99) {
            let s = surrogate_term(ratio, adv, eps);
            prop_assert!(s <= ratio * adv);
            if (1.0 - eps..=1.0 + eps).contains(&ratio) {
                prop_assert_eq!(s, ratio * adv);
            }
        }

        #[test]
        fn tar_is_bounded_and_sign_preserving(a in -5.0f64..5.0, s in 0.0f64..=1.0, lambda in 0.0f64..1.0) {
            let r = reweight_advantage(a, s, true, lambda);
            prop_assert!((r - a).abs() <= lambda * a.abs() + 1e-15);
            if a < 0.0 && lambda < 1.0 {
                prop_assert!(r < 0.0);
            }
        }
    }
}
