//! Group-relative policy optimization.
//!
//! Per task, `G` completions are sampled from a parameter snapshot and scored.
//! Rewards are normalized within the group, the normalized advantage is
//! broadcast to every token, and the loss is
//!
//! ```text
//! L = -(1/G) sum_i mean_t [ min(r A_i, clip(r, 1-eps, 1+eps) A_i) - beta * kl_t ]
//! r    = exp(logp_theta - logp_old)
//! kl_t = u - ln u - 1,   u = exp(logp_ref - logp_theta)
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{
    accumulate_logprob_grad, logprob_steps, ContextFeatures, Policy, PolicyParams, Rollout,
};
use crate::primitives::mean_std;
use crate::rewards::RewardEngine;
use crate::seed;
use crate::taskgen::{TaskKind, TaskRecord};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub epsilon: f64,
    pub beta_kl: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_tasks_per_step: usize,
    pub temperature: f64,
    pub adv_eps: f64,
    /// Steps between refreshes of the sampling/reference snapshot.
    pub snapshot_interval: usize,
    /// Keep the initial parameters as the KL reference instead of the snapshot.
    pub freeze_kl_reference: bool,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            epsilon: 0.2,
            beta_kl: 0.04,
            learning_rate: 1e-2,
            steps: 1000,
            batch_tasks_per_step: 4,
            temperature: 1.0,
            adv_eps: 1e-8,
            snapshot_interval: 1,
            freeze_kl_reference: false,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.beta_kl >= 0.0) {
            return bad("beta_kl must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_tasks_per_step == 0 {
            return bad("batch_tasks_per_step must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.adv_eps >= 0.0) {
            return bad("adv_eps must be non-negative");
        }
        if self.snapshot_interval == 0 {
            return bad("snapshot_interval must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub task_id: u64,
    pub rollouts: Vec<Rollout>,
    /// Per-token log-probabilities under the KL reference, one list per rollout.
    pub ref_logprobs: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn total_rewards(&self) -> Vec<f64> {
        self.rollouts
            .iter()
            .map(|r| r.reward.as_ref().map_or(0.0, |b| b.total))
            .collect()
    }
}

/// Samples `G` scored completions from `snapshot`. Advantages are left empty.
pub fn rollout_group(
    policy: &Policy,
    snapshot: &PolicyParams,
    kl_reference: Option<&PolicyParams>,
    task: &TaskRecord,
    cfg: &GrpoConfig,
    engine: &RewardEngine<'_>,
    seed: u64,
) -> Result<Group> {
    let max_len = policy.max_len();
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    let mut ref_logprobs = Vec::with_capacity(cfg.group_size);
    for i in 0..cfg.group_size {
        let mut r =
            policy.sample_sequence(snapshot, task, max_len, seed::derive(seed, &[i as u64]));
        r.reward = Some(engine.score(task, &r.sequence)?);
        ref_logprobs.push(match kl_reference {
            Some(p) => policy.logprob_sequence(p, task, &r.sequence)?,
            None => r.logprobs_old.clone(),
        });
        rollouts.push(r);
    }
    Ok(Group {
        task_id: task.record_id,
        rollouts,
        ref_logprobs,
        advantages: Vec::new(),
    })
}

/// `(R_i - mean) / (std + adv_eps)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64], adv_eps: f64) -> Vec<f64> {
    let (mean, std) = mean_std(rewards);
    if std == 0.0 {
        return vec![0.0; rewards.len()];
    }
    let dev: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    // Rounding in the mean leaves a residual offset that the division can
    // blow up when std is tiny; remove it so the advantages sum to zero.
    let residual = dev.iter().sum::<f64>() / dev.len() as f64;
    dev.iter()
        .map(|d| (d - residual) / (std + adv_eps))
        .collect()
}

/// Per-token `u - ln u - 1` with `u = exp(logp_ref - logp_current)`.
pub fn kl_estimate(logp_current: &[f64], logp_ref: &[f64]) -> Result<Vec<f64>> {
    if logp_current.len() != logp_ref.len() {
        return Err(Error::LengthMismatch {
            left: logp_current.len(),
            right: logp_ref.len(),
        });
    }
    Ok(logp_current
        .iter()
        .zip(logp_ref)
        .map(|(&c, &r)| {
            let d = r - c;
            // exp_m1 keeps the estimator exactly zero at d = 0 and accurate near it.
            (d.exp_m1() - d).max(0.0)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupStats {
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub mean_len: f64,
}

/// One sampled completion prepared for the loss: per-step features, tokens,
/// snapshot and reference log-probabilities.
#[derive(Debug, Clone, Copy)]
pub struct ScoredSample<'a> {
    pub steps: &'a [ContextFeatures],
    pub tokens: &'a [TokenId],
    pub logprobs_old: &'a [f64],
    pub logprobs_ref: &'a [f64],
    pub advantage: f64,
}

/// Loss and analytic gradient for one group, independent of how the
/// features were produced.
pub fn group_loss_and_grad(
    params: &PolicyParams,
    samples: &[ScoredSample<'_>],
    epsilon: f64,
    beta_kl: f64,
    temperature: f64,
) -> Result<(f64, Vec<f64>, GroupStats)> {
    let g = samples.len() as f64;
    let mut grad = vec![0.0; params.theta.len()];
    let mut loss = 0.0;
    let mut stats = GroupStats::default();
    for s in samples {
        let len = s.tokens.len();
        for other in [s.steps.len(), s.logprobs_old.len(), s.logprobs_ref.len()] {
            if other != len {
                return Err(Error::LengthMismatch {
                    left: len,
                    right: other,
                });
            }
        }
        if len == 0 {
            return Err(Error::Empty("completion"));
        }
        let cur = logprob_steps(params, s.steps, s.tokens, temperature);
        let kl = kl_estimate(&cur, s.logprobs_ref)?;
        let n = len as f64;
        let adv = s.advantage;
        let mut objective = 0.0;
        let mut clipped = 0usize;
        for t in 0..len {
            let ratio = (cur[t] - s.logprobs_old[t]).exp();
            let clamped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
            let unclipped_obj = ratio * adv;
            let clipped_obj = clamped * adv;
            if clamped != ratio {
                clipped += 1;
            }
            // d surrogate / d logp: r*A on the unclipped branch, 0 when the
            // clipped constant is the minimum.
            let surrogate_slope = if unclipped_obj <= clipped_obj {
                unclipped_obj
            } else {
                0.0
            };
            objective += unclipped_obj.min(clipped_obj) - beta_kl * kl[t];
            let u = (s.logprobs_ref[t] - cur[t]).exp();
            let coef = -(surrogate_slope - beta_kl * (1.0 - u)) / (g * n);
            accumulate_logprob_grad(
                params,
                &s.steps[t],
                s.tokens[t],
                temperature,
                coef,
                &mut grad,
            );
        }
        loss -= objective / (g * n);
        stats.mean_kl += kl.iter().sum::<f64>() / n / g;
        stats.clip_fraction += clipped as f64 / n / g;
        stats.mean_len += n / g;
    }
    if !loss.is_finite() || grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "GRPO loss/gradient (loss = {loss})"
        )));
    }
    Ok((loss, grad, stats))
}

/// Loss and analytic gradient of one group at `params`.
pub fn grpo_loss_and_grad(
    policy: &Policy,
    params: &PolicyParams,
    task: &TaskRecord,
    group: &Group,
    cfg: &GrpoConfig,
) -> Result<(f64, Vec<f64>, GroupStats)> {
    if group.advantages.len() != group.rollouts.len() {
        return Err(Error::LengthMismatch {
            left: group.advantages.len(),
            right: group.rollouts.len(),
        });
    }
    let steps: Vec<Vec<ContextFeatures>> = group
        .rollouts
        .iter()
        .map(|r| policy.encoder.step_features(task, r.sequence.tokens()))
        .collect();
    let samples: Vec<ScoredSample<'_>> = group
        .rollouts
        .iter()
        .zip(&steps)
        .zip(&group.ref_logprobs)
        .zip(&group.advantages)
        .map(|(((r, st), lr), &a)| ScoredSample {
            steps: st,
            tokens: r.sequence.tokens(),
            logprobs_old: &r.logprobs_old,
            logprobs_ref: lr,
            advantage: a,
        })
        .collect();
    let (loss, grad, mut stats) = group_loss_and_grad(
        params,
        &samples,
        cfg.epsilon,
        cfg.beta_kl,
        policy.temperature,
    )?;
    // Report caption length without the end token.
    stats.mean_len = group
        .rollouts
        .iter()
        .map(|r| r.sequence.content_len() as f64)
        .sum::<f64>()
        / group.rollouts.len() as f64;
    Ok((loss, grad, stats))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    /// Mean task reward per kind in this step's batch; `None` if the kind was absent.
    pub reward_by_kind: [Option<f64>; 4],
    /// Mean name-credit reward over all captioning rollouts of the step.
    pub ict_reward: Option<f64>,
    pub mean_total_reward: f64,
    pub loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub mean_len: f64,
    /// Fraction of the dataset consumed so far, counting repeats.
    pub seen_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,reward_oct,reward_vlt,reward_ict1,reward_ictm,reward_ict,mean_total_reward,loss,mean_kl,clip_fraction,mean_len,seen_fraction";

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.step,
                opt(r.reward_by_kind[0]),
                opt(r.reward_by_kind[1]),
                opt(r.reward_by_kind[2]),
                opt(r.reward_by_kind[3]),
                opt(r.ict_reward),
                r.mean_total_reward,
                r.loss,
                r.mean_kl,
                r.clip_fraction,
                r.mean_len,
                r.seen_fraction
            ));
        }
        s
    }

    /// Captioning reward per step, carrying the last value over steps
    /// without captioning tasks.
    pub fn ict_series(&self) -> Vec<f64> {
        let mut last = 0.0;
        self.rows
            .iter()
            .map(|r| {
                if let Some(v) = r.ict_reward {
                    last = v;
                }
                last
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: TrainLog,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_good: Box<PolicyParams>,
        log: TrainLog,
    },
    #[error(transparent)]
    Other(#[from] Error),
}

/// Callbacks into the training loop.
pub trait TrainObserver {
    /// Sees every logged row with the parameters after that step.
    fn after_step(&mut self, _row: &TrainRow, _params: &PolicyParams) {}

    /// May rewrite the batch gradient before it is applied. Used for fault
    /// injection in tests.
    fn inspect_gradient(&mut self, _step: usize, _grad: &mut [f64]) {}
}

impl<F: FnMut(&TrainRow, &PolicyParams)> TrainObserver for F {
    fn after_step(&mut self, row: &TrainRow, params: &PolicyParams) {
        self(row, params)
    }
}

/// Runs the optimization loop.
pub fn train_with<O: TrainObserver>(
    policy: &Policy,
    dataset: &[TaskRecord],
    initial: PolicyParams,
    cfg: &GrpoConfig,
    engine: &RewardEngine<'_>,
    observer: &mut O,
) -> std::result::Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset").into());
    }
    let frozen_ref = cfg.freeze_kl_reference.then(|| initial.clone());
    let mut params = initial;
    let mut snapshot = params.clone();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut consumed = 0usize;

    for step in 0..cfg.steps {
        if step % cfg.snapshot_interval == 0 {
            snapshot = params.clone();
        }
        let mut batch = Vec::with_capacity(cfg.batch_tasks_per_step);
        while batch.len() < cfg.batch_tasks_per_step {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                rand::seq::SliceRandom::shuffle(
                    order.as_mut_slice(),
                    &mut seed::rng_at(cfg.seed, &[0x4550_4f43_48, epoch]),
                );
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        consumed += batch.len();

        let groups: Vec<Group> = batch
            .par_iter()
            .enumerate()
            .map(|(j, &idx)| {
                let mut g = rollout_group(
                    policy,
                    &snapshot,
                    frozen_ref.as_ref(),
                    &dataset[idx],
                    cfg,
                    engine,
                    seed::derive(cfg.seed, &[0x524f_4c4c, step as u64, j as u64]),
                )?;
                g.advantages = compute_advantages(&g.total_rewards(), cfg.adv_eps);
                Ok(g)
            })
            .collect::<Result<_>>()?;

        let per_group: Vec<Result<(f64, Vec<f64>, GroupStats)>> = batch
            .par_iter()
            .zip(&groups)
            .map(|(&idx, g)| grpo_loss_and_grad(policy, &params, &dataset[idx], g, cfg))
            .collect();

        let b = groups.len() as f64;
        let mut grad = vec![0.0; params.theta.len()];
        let mut loss = 0.0;
        let mut stats = GroupStats::default();
        for r in per_group {
            let (l, g, s) = match r {
                Ok(v) => v,
                Err(e) => {
                    return Err(TrainError::Diverged {
                        step,
                        reason: e.to_string(),
                        last_good: Box::new(params),
                        log,
                    })
                }
            };
            loss += l / b;
            for (acc, x) in grad.iter_mut().zip(&g) {
                *acc += x / b;
            }
            stats.mean_kl += s.mean_kl / b;
            stats.clip_fraction += s.clip_fraction / b;
            stats.mean_len += s.mean_len / b;
        }

        observer.inspect_gradient(step, &mut grad);
        if !loss.is_finite() || grad.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::Diverged {
                step,
                reason: format!("non-finite loss or gradient (loss = {loss})"),
                last_good: Box::new(params),
                log,
            });
        }
        let mut next = params.clone();
        next.add_scaled(&grad, -cfg.learning_rate);
        if !next.is_finite() {
            return Err(TrainError::Diverged {
                step,
                reason: "parameters became non-finite after the update".into(),
                last_good: Box::new(params),
                log,
            });
        }
        params = next;

        let row = summarize(step, &batch, dataset, &groups, loss, stats, consumed);
        observer.after_step(&row, &params);
        log.rows.push(row);
    }
    Ok(TrainOutcome { params, log })
}

pub fn train(
    policy: &Policy,
    dataset: &[TaskRecord],
    initial: PolicyParams,
    cfg: &GrpoConfig,
    engine: &RewardEngine<'_>,
) -> std::result::Result<TrainOutcome, TrainError> {
    train_with(
        policy,
        dataset,
        initial,
        cfg,
        engine,
        &mut |_: &TrainRow, _: &PolicyParams| {},
    )
}

fn summarize(
    step: usize,
    batch: &[usize],
    dataset: &[TaskRecord],
    groups: &[Group],
    loss: f64,
    stats: GroupStats,
    consumed: usize,
) -> TrainRow {
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    let mut total = 0.0;
    let mut n = 0usize;
    for (&idx, g) in batch.iter().zip(groups) {
        let k = dataset[idx].task_kind.index();
        for r in &g.rollouts {
            let b = r.reward.as_ref().expect("scored rollout");
            sums[k] += b.task_reward;
            counts[k] += 1;
            total += b.total;
            n += 1;
        }
    }
    let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
    let ict_n = counts[TaskKind::Ict1.index()] + counts[TaskKind::IctM.index()];
    let ict_reward = (ict_n > 0)
        .then(|| (sums[TaskKind::Ict1.index()] + sums[TaskKind::IctM.index()]) / ict_n as f64);
    TrainRow {
        step,
        reward_by_kind: [mean(0), mean(1), mean(2), mean(3)],
        ict_reward,
        mean_total_reward: total / n.max(1) as f64,
        loss,
        mean_kl: stats.mean_kl,
        clip_fraction: stats.clip_fraction,
        mean_len: stats.mean_len,
        seen_fraction: consumed as f64 / dataset.len() as f64,
    }
}
