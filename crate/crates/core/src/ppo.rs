//! Proximal policy optimization with generalized advantage estimation.
//!
//! The learner is deliberately plain: fixed hyperparameters, one Adam
//! optimizer over all actor, log-std and critic parameters, advantage
//! normalization per batch, no observation or reward normalization.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arena::{Arena, Observation, StepInfo, StepResult, VecEnv};
use crate::error::{Error, Result};
use crate::policy::{self, ActorCritic, InputBlocks, Inputs, ObsMoments, ObsNormalizer, PolicySpec, SparseBatch};
use crate::rng::{self, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Rollout length per environment per iteration.
    pub horizon: usize,
    /// Number of parallel environments.
    pub num_envs: usize,
    pub iterations: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Rescale inputs by their running RMS between iterations.
    pub normalize_obs: bool,
    /// Divide rewards by the running std of the discounted return when learning.
    pub normalize_reward: bool,
    /// Initial action standard deviation.
    pub init_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            lr: 3e-4,
            epochs: 5,
            minibatches: 4,
            entropy_coef: 0.005,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            horizon: 24,
            num_envs: 256,
            iterations: 300,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            normalize_obs: true,
            normalize_reward: true,
            init_std: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::config(format!("ppo.{name} must lie in (0, 1], got {v}")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("lambda", self.lambda)?;
        if !(self.clip > 0.0) {
            return Err(Error::config("ppo.clip must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("ppo.lr must be a non-negative number"));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.horizon == 0 || self.num_envs == 0 {
            return Err(Error::config("ppo.epochs, minibatches, horizon and num_envs must be positive"));
        }
        if self.minibatches > self.horizon * self.num_envs {
            return Err(Error::config("ppo.minibatches exceeds the number of samples per iteration"));
        }
        if !(self.init_std >= policy::STD_MIN && self.init_std <= policy::STD_MAX) {
            return Err(Error::config(format!(
                "ppo.init_std must lie in [{}, {}], got {}",
                policy::STD_MIN,
                policy::STD_MAX,
                self.init_std
            )));
        }
        if !(self.max_grad_norm > 0.0) || self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(Error::config("ppo coefficients must be non-negative and max_grad_norm positive"));
        }
        Ok(())
    }
}

/// A batch of environments the learner can drive.
pub trait BatchEnv {
    fn num_envs(&self) -> usize;
    fn policy_spec(&self) -> PolicySpec;
    /// Critic-input vector that sparse storage is relative to.
    fn critic_reference(&self) -> Vec<f64>;
    /// Step all environments; finished ones auto-reset and report the new
    /// first observation in `reset_observation`.
    fn step(&mut self, actions: &[f64]) -> Result<Vec<StepResult>>;
}

impl BatchEnv for VecEnv {
    fn num_envs(&self) -> usize {
        self.len()
    }

    fn policy_spec(&self) -> PolicySpec {
        PolicySpec {
            actor_blocks: InputBlocks(vec![self.arena.proprio_dim(), self.arena.sensors.observation_dim()]),
            critic_extra: self.arena.critic_dim() - self.arena.actor_dim(),
            action_dim: self.arena.num_joints(),
        }
    }

    fn critic_reference(&self) -> Vec<f64> {
        self.arena.critic_reference()
    }

    fn step(&mut self, actions: &[f64]) -> Result<Vec<StepResult>> {
        VecEnv::step(self, actions)
    }
}

// ------------------------------------------------------------------ GAE

/// One transition as seen by the advantage estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaeStep {
    pub reward: f64,
    pub value: f64,
    /// Episode ended at this step (terminated or truncated).
    pub done: bool,
    /// Value of the state after a finished episode: 0 on termination, the
    /// critic's estimate on truncation. Ignored when `done` is false.
    pub bootstrap: f64,
}

/// Generalized advantage estimates and value targets for one environment's
/// consecutive steps; `last_value` bootstraps the step after the slice.
pub fn compute_gae(steps: &[GaeStep], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = vec![0.0; steps.len()];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for (t, s) in steps.iter().enumerate().rev() {
        let (v_next, carry) = if s.done { (s.bootstrap, 0.0) } else { (next_value, next_adv) };
        let delta = s.reward + gamma * v_next - s.value;
        adv[t] = delta + gamma * lambda * carry;
        next_adv = adv[t];
        next_value = s.value;
    }
    let ret = adv.iter().zip(steps).map(|(a, s)| a + s.value).collect();
    (adv, ret)
}

// -------------------------------------------------------------- rollouts

/// Samples from one iteration, stored step-major (`t * B + b`).
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub critic_reference: Vec<f64>,
    pub actor_dim: usize,
    pub action_dim: usize,
    /// Critic inputs; actor inputs are their first `actor_dim` entries.
    pub obs: SparseBatch,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub bootstraps: Vec<f64>,
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub horizon: usize,
    pub num_envs: usize,
    /// Raw input statistics of the collected observations.
    pub moments: ObsMoments,
    /// Factor applied to `rewards` when computing advantages and returns.
    pub reward_scale: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn actor_reference(&self) -> &[f64] {
        &self.critic_reference[..self.actor_dim]
    }

    /// Fill `advantages` and `returns` column by column.
    pub fn finish(&mut self, gamma: f64, lambda: f64) {
        let (t_len, b_len) = (self.horizon, self.num_envs);
        self.advantages = vec![0.0; t_len * b_len];
        self.returns = vec![0.0; t_len * b_len];
        let mut col = Vec::with_capacity(t_len);
        for b in 0..b_len {
            col.clear();
            col.extend((0..t_len).map(|t| {
                let i = t * b_len + b;
                GaeStep {
                    reward: self.rewards[i] * self.reward_scale,
                    value: self.values[i],
                    done: self.dones[i],
                    bootstrap: self.bootstraps[i],
                }
            }));
            let (adv, ret) = compute_gae(&col, self.last_values[b], gamma, lambda);
            for t in 0..t_len {
                self.advantages[t * b_len + b] = adv[t];
                self.returns[t * b_len + b] = ret[t];
            }
        }
    }
}

/// Episode bookkeeping gathered during collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub lengths: Vec<usize>,
    pub successes: usize,
    pub contacts: usize,
    pub falls: usize,
    pub returns: Vec<f64>,
}

/// Running variance (Welford).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningVar {
    pub count: f64,
    pub mean: f64,
    m2: f64,
}

impl RunningVar {
    pub fn push(&mut self, x: f64) {
        self.count += 1.0;
        let d = x - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (x - self.mean);
    }

    pub fn var(&self) -> f64 {
        if self.count < 2.0 {
            0.0
        } else {
            self.m2 / self.count
        }
    }
}

/// Learner state that persists across iterations.
pub struct Collector {
    obs: Vec<Observation>,
    noise: Vec<StreamRng>,
    running_return: Vec<f64>,
    /// Discount used to track per-env discounted returns for reward scaling.
    scale_gamma: Option<f64>,
    discounted: Vec<f64>,
    return_var: RunningVar,
}

impl Collector {
    pub fn new(initial: Vec<Observation>, seed: u64) -> Self {
        let n = initial.len();
        Collector {
            obs: initial,
            noise: (0..n).map(|b| rng::indexed_stream(seed, "action-noise", b as u64)).collect(),
            running_return: vec![0.0; n],
            scale_gamma: None,
            discounted: vec![0.0; n],
            return_var: RunningVar::default(),
        }
    }

    /// Divide rewards by the running std of the `gamma`-discounted return.
    pub fn with_reward_scaling(mut self, gamma: f64) -> Self {
        self.scale_gamma = Some(gamma);
        self
    }

    /// Current reward scale (1 until statistics exist).
    pub fn reward_scale(&self) -> f64 {
        let var = self.return_var.var();
        if self.scale_gamma.is_none() || var <= 0.0 {
            1.0
        } else {
            1.0 / (var.sqrt() + 1e-8)
        }
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }
}

fn critic_values(policy: &ActorCritic, obs: &[&[f64]], reference: &[f64]) -> Vec<f64> {
    let mut b = SparseBatch::with_capacity(reference.len(), obs.len(), 0);
    for o in obs {
        policy.norm.push(&mut b, o);
    }
    let rows: Vec<usize> = (0..obs.len()).collect();
    policy.critic_forward(Inputs { batch: &b, rows: &rows, reference }).out
}

/// Run `horizon` steps in every environment with the current policy.
pub fn collect_rollouts<E: BatchEnv>(
    env: &mut E,
    collector: &mut Collector,
    policy: &ActorCritic,
    horizon: usize,
) -> Result<(RolloutBatch, EpisodeStats)> {
    let b_len = env.num_envs();
    if collector.obs.len() != b_len {
        return Err(Error::config("collector observation count does not match the environment batch"));
    }
    let raw_reference = env.critic_reference();
    if raw_reference != policy.norm.reference {
        return Err(Error::config("policy input normalizer was built for a different environment"));
    }
    // network inputs are normalized deviations, so the network sees a zero reference
    let reference = vec![0.0; raw_reference.len()];
    let actor_dim = policy.spec.actor_dim();
    let n_act = policy.spec.action_dim;
    let rows = horizon * b_len;
    let mut batch = RolloutBatch {
        critic_reference: reference.clone(),
        actor_dim,
        action_dim: n_act,
        obs: SparseBatch::with_capacity(reference.len(), rows, rows * 64),
        actions: Vec::with_capacity(rows * n_act),
        log_probs: Vec::with_capacity(rows),
        rewards: Vec::with_capacity(rows),
        values: Vec::with_capacity(rows),
        dones: Vec::with_capacity(rows),
        bootstraps: Vec::with_capacity(rows),
        last_values: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
        horizon,
        num_envs: b_len,
        moments: ObsMoments::new(reference.len()),
        reward_scale: collector.reward_scale(),
    };
    let mut stats = EpisodeStats::default();
    let std = policy.std();

    for t in 0..horizon {
        for o in &collector.obs {
            policy.norm.push(&mut batch.obs, &o.critic);
            batch.moments.add(&o.critic, &raw_reference);
        }
        let ids: Vec<usize> = (t * b_len..(t + 1) * b_len).collect();
        let means =
            policy.actor_forward(Inputs { batch: &batch.obs, rows: &ids, reference: &reference[..actor_dim] }).out;
        let values = policy.critic_forward(Inputs { batch: &batch.obs, rows: &ids, reference: &reference }).out;
        let mut actions = Vec::with_capacity(b_len * n_act);
        for b in 0..b_len {
            let s = policy::sample_and_logprob(&means[b * n_act..(b + 1) * n_act], &std, &mut collector.noise[b]);
            actions.extend_from_slice(&s.action);
            batch.log_probs.push(s.log_prob);
        }
        let results = env.step(&actions)?;
        batch.actions.extend_from_slice(&actions);
        batch.values.extend_from_slice(&values);

        let truncated: Vec<usize> = (0..b_len).filter(|&b| results[b].truncated).collect();
        let trunc_obs: Vec<&[f64]> = truncated.iter().map(|&b| results[b].observation.critic.as_slice()).collect();
        let trunc_values = critic_values(policy, &trunc_obs, &reference);
        let mut boot = vec![0.0; b_len];
        for (&b, v) in truncated.iter().zip(trunc_values) {
            boot[b] = v;
        }

        for (b, res) in results.into_iter().enumerate() {
            batch.rewards.push(res.reward);
            batch.dones.push(res.done());
            batch.bootstraps.push(boot[b]);
            collector.running_return[b] += res.reward;
            if let Some(g) = collector.scale_gamma {
                let acc = res.reward + g * collector.discounted[b];
                collector.return_var.push(acc);
                collector.discounted[b] = if res.done() { 0.0 } else { acc };
            }
            if res.done() {
                stats.lengths.push(res.episode_steps);
                stats.returns.push(collector.running_return[b]);
                collector.running_return[b] = 0.0;
                stats.successes += res.info.success as usize;
                stats.contacts += res.info.contact as usize;
                stats.falls += (res.info.fall && !res.info.contact) as usize;
            }
            collector.obs[b] = match res.reset_observation {
                Some(o) => o,
                None => res.observation,
            };
        }
    }
    let last: Vec<&[f64]> = collector.obs.iter().map(|o| o.critic.as_slice()).collect();
    batch.last_values = critic_values(policy, &last, &reference);
    Ok((batch, stats))
}

// ---------------------------------------------------------------- update

/// Adam moments for the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &PpoConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
}

/// Loss terms and flat gradient of the PPO objective on selected samples.
///
/// `L = -mean(min(ρA, clip(ρ)A)) + c_v·mean((V − R)²) − c_e·H`.
pub fn ppo_loss_and_grad(
    policy: &ActorCritic,
    batch: &RolloutBatch,
    advantages: &[f64],
    ids: &[usize],
    cfg: &PpoConfig,
    grad: &mut [f64],
) -> UpdateStats {
    let n_act = batch.action_dim;
    let m = ids.len() as f64;
    let std = policy.std();
    let active = policy.std_active();
    let actor_in = Inputs { batch: &batch.obs, rows: ids, reference: batch.actor_reference() };
    let critic_in = Inputs { batch: &batch.obs, rows: ids, reference: &batch.critic_reference };
    let actor = policy.actor_forward(actor_in);
    let critic = policy.critic_forward(critic_in);

    let mut d_mean = vec![0.0; ids.len() * n_act];
    let mut d_log_std = vec![0.0; n_act];
    let mut d_value = vec![0.0; ids.len()];
    let mut stats = UpdateStats::default();
    let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);

    for (k, &i) in ids.iter().enumerate() {
        let mean = &actor.out[k * n_act..(k + 1) * n_act];
        let a = &batch.actions[i * n_act..(i + 1) * n_act];
        let lp = policy::log_prob(mean, &std, a);
        let log_ratio = lp - batch.log_probs[i];
        let ratio = log_ratio.exp();
        let adv = advantages[i];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(lo, hi) * adv;
        stats.policy_loss -= unclipped.min(clipped) / m;
        if (ratio - 1.0).abs() > cfg.clip {
            stats.clip_frac += 1.0 / m;
        }
        stats.approx_kl += ((ratio - 1.0) - log_ratio) / m;
        // gradient flows through the unclipped branch whenever it is selected
        let g = if unclipped <= clipped || (lo..=hi).contains(&ratio) { -unclipped / m } else { 0.0 };
        if g != 0.0 {
            for j in 0..n_act {
                let z = (a[j] - mean[j]) / std[j];
                d_mean[k * n_act + j] = g * z / std[j];
                d_log_std[j] += g * (z * z - 1.0);
            }
        }
        let err = critic.out[k] - batch.returns[i];
        stats.value_loss += err * err / m;
        d_value[k] = cfg.value_coef * 2.0 * err / m;
    }
    stats.entropy = policy::entropy(&std);

    grad.fill(0.0);
    policy.actor.backward(&policy.params, actor_in, &actor, &d_mean, grad);
    policy.critic.backward(&policy.params, critic_in, &critic, &d_value, grad);
    let ls = policy.log_std_offset;
    for j in 0..n_act {
        if active[j] {
            grad[ls + j] += d_log_std[j] - cfg.entropy_coef;
        }
    }
    stats
}

pub fn total_loss(s: &UpdateStats, cfg: &PpoConfig) -> f64 {
    s.policy_loss + cfg.value_coef * s.value_loss - cfg.entropy_coef * s.entropy
}

/// Several epochs of clipped minibatch updates on one batch.
pub fn ppo_update(
    policy: &mut ActorCritic,
    adam: &mut Adam,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    shuffle: &mut StreamRng,
) -> Result<UpdateStats> {
    let n = batch.len();
    if batch.advantages.len() != n {
        return Err(Error::Usage("rollout batch has no advantages; call finish() first".into()));
    }
    let mean = batch.advantages.iter().sum::<f64>() / n as f64;
    let var = batch.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt() + 1e-8;
    let adv: Vec<f64> = batch.advantages.iter().map(|a| (a - mean) / sd).collect();

    let mut grad = vec![0.0; policy.num_params()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut total = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(shuffle);
        for chunk in 0..cfg.minibatches {
            let ids = &order[chunk * n / cfg.minibatches..(chunk + 1) * n / cfg.minibatches];
            if ids.is_empty() {
                continue;
            }
            let mut s = ppo_loss_and_grad(policy, batch, &adv, ids, cfg, &mut grad);
            let loss = total_loss(&s, cfg);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss ({loss}) or gradient norm ({norm})")));
            }
            if norm > cfg.max_grad_norm {
                let scale = cfg.max_grad_norm / norm;
                grad.iter_mut().for_each(|g| *g *= scale);
            }
            adam.step(&mut policy.params, &grad, cfg);
            s.grad_norm = norm;
            total.policy_loss += s.policy_loss;
            total.value_loss += s.value_loss;
            total.entropy += s.entropy;
            total.clip_frac += s.clip_frac;
            total.approx_kl += s.approx_kl;
            total.grad_norm += s.grad_norm;
            count += 1.0;
        }
    }
    if count > 0.0 {
        for v in [
            &mut total.policy_loss,
            &mut total.value_loss,
            &mut total.entropy,
            &mut total.clip_frac,
            &mut total.approx_kl,
            &mut total.grad_norm,
        ] {
            *v /= count;
        }
    }
    Ok(total)
}

// --------------------------------------------------------------- training

/// One row of the learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    /// Mean length (control steps) of episodes finished this iteration;
    /// carried over from the previous iteration when none finished.
    pub mean_ep_len: f64,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub contact_rate: f64,
    pub fall_rate: f64,
    pub episodes: usize,
    pub stats: UpdateStats,
}

pub const CURVE_HEADER: &str =
    "iteration,mean_ep_len,mean_reward,success_rate,contact_rate,fall_rate,episodes,policy_loss,value_loss,entropy,clip_frac,kl";

impl CurveRow {
    pub fn csv(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.mean_ep_len,
            self.mean_reward,
            self.success_rate,
            self.contact_rate,
            self.fall_rate,
            self.episodes,
            s.policy_loss,
            s.value_loss,
            s.entropy,
            s.clip_frac,
            s.approx_kl
        )
    }
}

pub fn write_curve_csv(out: &mut impl Write, rows: &[CurveRow]) -> std::io::Result<()> {
    writeln!(out, "{CURVE_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub policy: ActorCritic,
    pub curve: Vec<CurveRow>,
}

/// Train from scratch. Everything random derives from `seed`; the result is
/// identical regardless of thread count.
pub fn train<E: BatchEnv>(
    env: &mut E,
    initial: Vec<Observation>,
    cfg: &PpoConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&CurveRow, &ActorCritic),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if env.num_envs() != cfg.num_envs {
        return Err(Error::config(format!(
            "environment batch has {} envs but ppo.num_envs is {}",
            env.num_envs(),
            cfg.num_envs
        )));
    }
    let mut policy = ActorCritic::init(env.policy_spec(), rng::derive_seed(seed, rng::label("policy-init")));
    policy.norm = ObsNormalizer::new(env.critic_reference());
    policy.set_log_std(cfg.init_std.ln());
    let mut adam = Adam::new(policy.num_params());
    let mut collector = Collector::new(initial, rng::derive_seed(seed, rng::label("rollout")));
    if cfg.normalize_reward {
        collector = collector.with_reward_scaling(cfg.gamma);
    }
    let mut shuffle = rng::stream(seed, "minibatch");
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut last_len = 0.0;
    for iteration in 0..cfg.iterations {
        let (mut batch, eps) = collect_rollouts(env, &mut collector, &policy, cfg.horizon)?;
        batch.finish(cfg.gamma, cfg.lambda);
        let stats = ppo_update(&mut policy, &mut adam, &batch, cfg, &mut shuffle)?;
        if cfg.normalize_obs {
            policy.norm.update(&batch.moments);
        }
        if !eps.lengths.is_empty() {
            last_len = eps.lengths.iter().sum::<usize>() as f64 / eps.lengths.len() as f64;
        }
        let rate = |k: usize| if eps.lengths.is_empty() { 0.0 } else { k as f64 / eps.lengths.len() as f64 };
        let row = CurveRow {
            iteration,
            mean_ep_len: last_len,
            mean_reward: batch.rewards.iter().sum::<f64>() / batch.len() as f64,
            success_rate: rate(eps.successes),
            contact_rate: rate(eps.contacts),
            fall_rate: rate(eps.falls),
            episodes: eps.lengths.len(),
            stats,
        };
        on_iteration(&row, &policy);
        curve.push(row);
    }
    Ok(TrainOutcome { policy, curve })
}

// ------------------------------------------------------------- evaluation

/// Outcome rates of deterministic (mean-action) episodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_ep_len: f64,
    pub success_rate: f64,
    pub contact_rate: f64,
    pub fall_rate: f64,
    pub mean_return: f64,
}

/// Run `episodes` episodes with the policy's mean action. Episode `i` is
/// seeded from `(seed, i)`, so the result does not depend on thread count.
pub fn evaluate(arena: &Arena, policy: &ActorCritic, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if policy.spec.actor_dim() != arena.actor_dim() || policy.spec.action_dim != arena.num_joints() {
        return Err(Error::config(format!(
            "policy expects {} inputs / {} actions but the arena provides {} / {}",
            policy.spec.actor_dim(),
            policy.spec.action_dim,
            arena.actor_dim(),
            arena.num_joints()
        )));
    }
    let outcomes: Vec<(usize, f64, StepInfo)> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let (mut ep, mut obs) = arena.reset(rng::derive_seed(seed, i as u64));
            loop {
                let (mean, _) = policy.actor_forward_dense(&obs.actor)?;
                let res = arena.step(&mut ep, &mean)?;
                if res.done() {
                    return Ok((res.episode_steps, ep.episode_return, res.info));
                }
                obs = res.observation;
            }
        })
        .collect::<Result<_>>()?;
    let n = episodes.max(1) as f64;
    let count = |f: &dyn Fn(&StepInfo) -> bool| outcomes.iter().filter(|o| f(&o.2)).count() as f64 / n;
    Ok(EvalSummary {
        episodes,
        mean_ep_len: outcomes.iter().map(|o| o.0 as f64).sum::<f64>() / n,
        success_rate: count(&|i| i.success),
        contact_rate: count(&|i| i.contact),
        fall_rate: count(&|i| i.fall && !i.contact),
        mean_return: outcomes.iter().map(|o| o.1).sum::<f64>() / n,
    })
}

// ------------------------------------------------------------ reach task

/// A one-joint positioning task used to sanity-check the learner.
///
/// Each step moves the joint by `step_size · clamp(a, −1, 1)` and pays
/// `−(q − target)²`; episodes last `horizon` steps and start uniformly in
/// `[−1, 1]`.
pub struct ReachTask {
    pub target: f64,
    pub step_size: f64,
    pub horizon: usize,
    q: Vec<f64>,
    steps: Vec<usize>,
    seeders: Vec<StreamRng>,
}

impl ReachTask {
    pub fn new(num_envs: usize, seed: u64) -> (Self, Vec<Observation>) {
        let mut task = ReachTask {
            target: 0.6,
            step_size: 0.1,
            horizon: 20,
            q: vec![0.0; num_envs],
            steps: vec![0; num_envs],
            seeders: (0..num_envs).map(|b| rng::indexed_stream(seed, "reach", b as u64)).collect(),
        };
        let obs = (0..num_envs)
            .map(|b| {
                task.q[b] = task.seeders[b].random_range(-1.0..=1.0);
                task.observation(b)
            })
            .collect();
        (task, obs)
    }

    fn observation(&self, b: usize) -> Observation {
        let x = vec![self.q[b] - self.target];
        Observation { actor: x.clone(), critic: x }
    }

    /// Return of the best possible controller from `q0`: move at full speed
    /// toward the target and stop on it.
    pub fn optimal_return(&self, q0: f64) -> f64 {
        let mut q = q0;
        let mut total = 0.0;
        for _ in 0..self.horizon {
            let e = self.target - q;
            q += e.clamp(-self.step_size, self.step_size);
            total -= (q - self.target).powi(2);
        }
        total
    }

    /// Return of a deterministic controller `a = f(q − target)` from `q0`.
    pub fn rollout_return(&self, q0: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let mut q = q0;
        let mut total = 0.0;
        for _ in 0..self.horizon {
            q += self.step_size * f(q - self.target).clamp(-1.0, 1.0);
            total -= (q - self.target).powi(2);
        }
        total
    }
}

impl BatchEnv for ReachTask {
    fn num_envs(&self) -> usize {
        self.q.len()
    }

    fn policy_spec(&self) -> PolicySpec {
        PolicySpec { actor_blocks: InputBlocks(vec![1]), critic_extra: 0, action_dim: 1 }
    }

    fn critic_reference(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&mut self, actions: &[f64]) -> Result<Vec<StepResult>> {
        if actions.len() != self.q.len() {
            return Err(Error::config("reach task expects one action per environment"));
        }
        let mut out = Vec::with_capacity(self.q.len());
        for (b, &a) in actions.iter().enumerate() {
            self.q[b] += self.step_size * a.clamp(-1.0, 1.0);
            self.steps[b] += 1;
            let reward = -(self.q[b] - self.target).powi(2);
            let truncated = self.steps[b] >= self.horizon;
            let observation = self.observation(b);
            let mut res = StepResult {
                observation,
                reward,
                terminated: false,
                truncated,
                info: Default::default(),
                episode_steps: self.steps[b],
                reset_observation: None,
            };
            if truncated {
                self.q[b] = self.seeders[b].random_range(-1.0..=1.0);
                self.steps[b] = 0;
                res.reset_observation = Some(self.observation(b));
            }
            out.push(res);
        }
        Ok(out)
    }
}

/// Fraction of the gap between a reference policy's return and the optimal
/// return that `policy` closes on the reach task, averaged over `starts`.
pub fn reach_score(task: &ReachTask, policy: &ActorCritic, baseline: &ActorCritic, starts: &[f64]) -> Result<f64> {
    let eval = |p: &ActorCritic| -> Result<f64> {
        let mut total = 0.0;
        for &q0 in starts {
            let mut err = None;
            total += task.rollout_return(q0, |x| match p.actor_forward_dense(&[x]) {
                Ok((m, _)) => m[0],
                Err(e) => {
                    err = Some(e);
                    0.0
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        Ok(total)
    };
    let best: f64 = starts.iter().map(|&q| task.optimal_return(q)).sum();
    let base = eval(baseline)?;
    let got = eval(policy)?;
    Ok((got - base) / (best - base))
}

/// Seeded starting states for evaluation.
pub fn uniform_starts(n: usize, seed: u64) -> Vec<f64> {
    let mut r = StreamRng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..=1.0)).collect()
}
