//! Clipped-surrogate policy optimization over parallel environments, with a
//! standing pre-training phase and library-guided walking training.

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaitlib::{nearest_frame, GaitLibrary};
use crate::gaitopt::Gait;
use crate::guided::env::{Actuation, Env, EnvConfig};
use crate::guided::observation::{guidance_channels, project_frame, project_observation};
use crate::guided::policy::{clip_grad, ActorCritic, Adam, PolicySpec};
use crate::guided::reward::{
    reward, RewardInputs, RewardTargets, RewardTerms, RewardWeights, Termination,
};
use crate::model::NU;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandSchedule {
    /// Every environment draws a new command at the start of each iteration.
    PerIteration,
    /// Commands change only when an episode restarts.
    PerEpisode,
}

/// Training hyperparameters. The discount, GAE, clip and learning-rate defaults
/// are conventional choices rather than tuned values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub policy: PolicySpec,
    pub weights: RewardWeights,
    pub n_env: usize,
    /// Steps per environment per iteration.
    pub horizon: usize,
    pub iterations: usize,
    pub standing_iterations: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub init_std: f64,
    /// Policy outputs are clamped to `±action_clip` before the PD mapping.
    pub action_clip: f64,
    /// Added to the optimized return for every step that does not end in a fall.
    /// The logged rewards exclude it.
    pub alive_bonus: f64,
    pub seed: u64,
    pub schedule: CommandSchedule,
    pub vx_range: [f64; 2],
    pub vy_range: [f64; 2],
    pub stand_eval_episodes: usize,
    pub stand_success_rate: f64,
    /// Where the last finite policy is written if training diverges.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            policy: PolicySpec::desk(NU),
            weights: RewardWeights::default(),
            n_env: 16,
            horizon: 64,
            iterations: 200,
            standing_iterations: 900,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            learning_rate: 3e-4,
            epochs: 5,
            minibatches: 4,
            entropy_coef: 0.0,
            max_grad_norm: 1.0,
            init_std: 0.3,
            action_clip: 2.0,
            alive_bonus: 2.0,
            seed: 0,
            schedule: CommandSchedule::PerIteration,
            vx_range: [0.0, 1.2],
            vy_range: [0.0, 0.0],
            stand_eval_episodes: 20,
            stand_success_rate: 0.9,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy.validate()?;
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_env == 0 || self.horizon == 0 {
            return bad("n_env and horizon must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("gamma and lambda must lie in (0, 1]");
        }
        if !(self.clip > 0.0) || !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("clip, learning_rate and max_grad_norm must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 || self.minibatches > self.n_env * self.horizon {
            return bad("epochs and minibatches must be at least 1 and fit the batch");
        }
        if !self.alive_bonus.is_finite() {
            return bad("alive_bonus must be finite");
        }
        if !(self.init_std > 0.0) || !(self.action_clip > 0.0) {
            return bad("init_std and action_clip must be positive");
        }
        if !(self.vx_range[0] <= self.vx_range[1]) || !(self.vy_range[0] <= self.vy_range[1]) {
            return bad("command ranges must be ordered");
        }
        if !(0.0..=1.0).contains(&self.stand_success_rate) {
            return bad("stand_success_rate must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.env.profile.width()
    }

    /// Randomly initialized policy for this configuration.
    pub fn initial_policy(&self) -> Result<ActorCritic> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        ActorCritic::new(&self.policy, self.obs_dim(), self.init_std, &mut rng)
    }

    /// Critic targets are divided by this so they stay of order one.
    fn value_scale(&self) -> f64 {
        let steps = self.env.termination.max_steps() as f64;
        if self.gamma < 1.0 {
            (1.0 / (1.0 - self.gamma)).min(steps)
        } else {
            steps
        }
    }
}

/// Generalized advantage estimates and returns for one environment's rollout.
///
/// `next_values[t]` is the value of the state reached by transition `t`
/// (ignored when `terminal[t]`); `cut[t]` stops the recursion after `t`, for
/// episode ends. The final transition is always treated as cut.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminal: &[bool],
    cut: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    for (what, len) in [
        ("values", values.len()),
        ("next values", next_values.len()),
        ("terminal flags", terminal.len()),
        ("cut flags", cut.len()),
    ] {
        if len != n {
            return Err(Error::shape(what, n, len));
        }
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if t == n - 1 || cut[t] || terminal[t] {
            running = 0.0;
        }
        let boot = if terminal[t] { 0.0 } else { gamma * next_values[t] };
        let delta = rewards[t] + boot - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// Mean per-step reward over the iteration's batch.
    pub mean_reward: f64,
    /// Mean length (steps) of episodes that ended this iteration, or of the
    /// running episodes when none ended.
    pub mean_episode_len: f64,
    /// Falls divided by the episodes active during the iteration.
    pub fall_rate: f64,
    pub terms: [f64; 7],
    pub policy_loss: f64,
    pub value_loss: f64,
    pub action_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<IterationLog>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["iter", "mean_reward", "mean_episode_len", "fall_rate"];
        header.extend(RewardTerms::NAMES);
        header.extend(["policy_loss", "value_loss", "action_std"]);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&header).map_err(fmt)?;
        for r in &self.rows {
            let mut rec = vec![
                r.iteration.to_string(),
                r.mean_reward.to_string(),
                r.mean_episode_len.to_string(),
                r.fall_rate.to_string(),
            ];
            rec.extend(r.terms.iter().map(|v| v.to_string()));
            rec.extend([r.policy_loss, r.value_loss, r.action_std].map(|v| v.to_string()));
            w.write_record(&rec).map_err(fmt)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn best_mean_reward(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.mean_reward).reduce(f64::max)
    }

    /// Mean fall rate over the first `n` iterations.
    pub fn early_fall_rate(&self, n: usize) -> f64 {
        let k = n.min(self.rows.len());
        if k == 0 {
            return 0.0;
        }
        self.rows[..k].iter().map(|r| r.fall_rate).sum::<f64>() / k as f64
    }
}

/// Training context shared read-only by the rollout workers.
struct Task<'a> {
    cfg: &'a TrainConfig,
    weights: RewardWeights,
    /// Library and its frames projected to the observed channels; absent while standing.
    guide: Option<(&'a GaitLibrary, Vec<Gait>)>,
}

impl Task<'_> {
    fn draw_command(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        if self.guide.is_none() {
            return [0.0; 2];
        }
        let draw = |r: [f64; 2], rng: &mut ChaCha8Rng| {
            if r[1] > r[0] {
                rng.gen_range(r[0]..=r[1])
            } else {
                r[0]
            }
        };
        let vx = draw(self.cfg.vx_range, rng);
        let vy = draw(self.cfg.vy_range, rng);
        [vx, vy]
    }

    fn targets(&self, command: [f64; 2]) -> RewardTargets {
        RewardTargets {
            linear: [command[0], command[1], 0.0],
            angular: [0.0; 3],
        }
    }
}

struct Slot {
    env: Env,
    rng: ChaCha8Rng,
    obs: Vec<f64>,
    ep_len: usize,
    gait: usize,
}

impl Slot {
    fn restart(&mut self, task: &Task, new_command: bool) -> Result<()> {
        let command = if new_command {
            task.draw_command(&mut self.rng)
        } else {
            self.env.command
        };
        self.env.reset_standing(command, &mut self.rng);
        self.set_command(task, command);
        self.obs = self.env.observation()?.values;
        self.ep_len = 0;
        Ok(())
    }

    fn set_command(&mut self, task: &Task, command: [f64; 2]) {
        self.env.command = command;
        if let Some((lib, _)) = &task.guide {
            self.gait = lib.nearest_index(command);
        }
    }
}

struct Transition {
    action: Vec<f64>,
    log_prob: f64,
    reward: f64,
    terms: RewardTerms,
    terminal: bool,
    cut: bool,
    /// Observation at a time-limit cut, for bootstrapping.
    final_obs: Option<Vec<f64>>,
    ended: Option<usize>,
}

fn step_slot(slot: &mut Slot, mean: &[f64], policy: &ActorCritic, task: &Task) -> Result<Transition> {
    let cfg = task.cfg;
    let (action, log_prob) = policy.sample(mean, &mut slot.rng);
    let applied: Vec<f64> = action
        .iter()
        .map(|a| a.clamp(-cfg.action_clip, cfg.action_clip))
        .collect();
    let prev = slot.env.prev_action;
    let joint_targets = cfg.env.targets(&applied);
    let info = slot.env.step(Actuation::Targets(&joint_targets), &applied)?;
    slot.ep_len += 1;
    let obs = slot.env.observation()?;
    let guidance = match &task.guide {
        Some((_, projected)) => {
            let p = project_observation(&obs)?;
            Some(nearest_frame(&projected[slot.gait], &p)?.1)
        }
        None => None,
    };
    let terms = reward(
        &RewardInputs {
            obs: &obs,
            tau: &info.tau,
            action: &applied,
            prev_action: &prev,
            base_height: slot.env.base_height(),
            guidance,
        },
        &task.targets(slot.env.command),
        &task.weights,
    )?;
    let mut tr = Transition {
        action,
        log_prob,
        reward: terms.total(),
        terms,
        terminal: false,
        cut: false,
        final_obs: None,
        ended: None,
    };
    match info.termination {
        Termination::Running => slot.obs = obs.values,
        end => {
            tr.ended = Some(slot.ep_len);
            if end == Termination::Fell {
                tr.terminal = true;
            } else {
                tr.cut = true;
                tr.final_obs = Some(obs.values);
            }
            let fresh = cfg.schedule == CommandSchedule::PerEpisode;
            slot.restart(task, fresh)?;
        }
    }
    Ok(tr)
}

fn columns(obs: &[&[f64]], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dim, obs.len(), |i, j| obs[j][i])
}

struct Batch {
    obs: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

/// Parallel rollout workers plus the optimizer state of one training run.
struct Trainer<'a> {
    task: Task<'a>,
    policy: ActorCritic,
    actor_opt: Adam,
    critic_opt: Adam,
    slots: Vec<Slot>,
    shuffle: ChaCha8Rng,
    pool: rayon::ThreadPool,
}

impl<'a> Trainer<'a> {
    fn new(task: Task<'a>, policy: ActorCritic) -> Result<Self> {
        let cfg = task.cfg;
        cfg.validate()?;
        if policy.obs_dim != cfg.obs_dim() || policy.action_dim() != NU {
            return Err(Error::Config(format!(
                "policy expects {} observations and {} actions; the environment has {} and {NU}",
                policy.obs_dim,
                policy.action_dim(),
                cfg.obs_dim()
            )));
        }
        let mut slots = Vec::with_capacity(cfg.n_env);
        for e in 0..cfg.n_env {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(e as u64 + 1);
            let mut slot = Slot {
                env: Env::new(cfg.env.clone())?,
                rng,
                obs: Vec::new(),
                ep_len: 0,
                gait: 0,
            };
            slot.restart(&task, true)?;
            slots.push(slot);
        }
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(0x5eed);
        let n_actor = policy.actor.n_params() + policy.log_std.len();
        let n_critic = policy.critic.n_params();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(std::thread::available_parallelism().map_or(1, |n| n.get()).min(cfg.n_env))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            actor_opt: Adam::new(n_actor, cfg.learning_rate),
            critic_opt: Adam::new(n_critic, cfg.learning_rate),
            task,
            policy,
            slots,
            shuffle,
            pool,
        })
    }

    fn resample_commands(&mut self) {
        if self.task.cfg.schedule != CommandSchedule::PerIteration || self.task.guide.is_none() {
            return;
        }
        let task = &self.task;
        for slot in &mut self.slots {
            let c = task.draw_command(&mut slot.rng);
            slot.set_command(task, c);
        }
    }

    fn iterate(&mut self, iteration: usize) -> Result<IterationLog> {
        self.resample_commands();
        let cfg = self.task.cfg;
        let (n_env, horizon, dim) = (cfg.n_env, cfg.horizon, cfg.obs_dim());
        // Stored time-major: index t * n_env + e.
        let mut obs_buf: Vec<Vec<f64>> = Vec::with_capacity(n_env * horizon);
        let mut trans: Vec<Transition> = Vec::with_capacity(n_env * horizon);
        let active_at_start = n_env;
        for _ in 0..horizon {
            let x = columns(&self.slots.iter().map(|s| s.obs.as_slice()).collect::<Vec<_>>(), dim);
            let means = self.policy.mean(&x);
            obs_buf.extend(self.slots.iter().map(|s| s.obs.clone()));
            let policy = &self.policy;
            let task = &self.task;
            let step: Vec<Result<Transition>> = self.pool.install(|| {
                self.slots
                    .par_iter_mut()
                    .enumerate()
                    .map(|(e, slot)| step_slot(slot, means.column(e).as_slice(), policy, task))
                    .collect()
            });
            for t in step {
                trans.push(t?);
            }
        }

        // Values of every stored observation, then of the bootstrap states.
        let all: Vec<&[f64]> = obs_buf.iter().map(|o| o.as_slice()).collect();
        let scale = cfg.value_scale();
        let values: Vec<f64> = self.policy.value(&columns(&all, dim)).iter().map(|v| v * scale).collect();
        let mut extra: Vec<&[f64]> = self.slots.iter().map(|s| s.obs.as_slice()).collect();
        let mut extra_of = vec![usize::MAX; trans.len()];
        for (k, tr) in trans.iter().enumerate() {
            if let Some(o) = &tr.final_obs {
                extra_of[k] = extra.len();
                extra.push(o);
            }
        }
        let extra_values: Vec<f64> = self.policy.value(&columns(&extra, dim)).iter().map(|v| v * scale).collect();

        let mut batch = Batch {
            obs: Vec::with_capacity(trans.len()),
            actions: Vec::with_capacity(trans.len()),
            log_probs: Vec::with_capacity(trans.len()),
            advantages: Vec::with_capacity(trans.len()),
            returns: Vec::with_capacity(trans.len()),
        };
        for e in 0..n_env {
            let idx: Vec<usize> = (0..horizon).map(|t| t * n_env + e).collect();
            let rewards: Vec<f64> = idx
                .iter()
                .map(|&k| trans[k].reward + if trans[k].terminal { 0.0 } else { cfg.alive_bonus })
                .collect();
            let vals: Vec<f64> = idx.iter().map(|&k| values[k]).collect();
            let next: Vec<f64> = idx
                .iter()
                .enumerate()
                .map(|(t, &k)| {
                    if trans[k].final_obs.is_some() {
                        extra_values[extra_of[k]]
                    } else if t + 1 < horizon {
                        values[k + n_env]
                    } else {
                        extra_values[e]
                    }
                })
                .collect();
            let terminal: Vec<bool> = idx.iter().map(|&k| trans[k].terminal).collect();
            let cut: Vec<bool> = idx.iter().map(|&k| trans[k].cut).collect();
            let (adv, ret) = gae(&rewards, &vals, &next, &terminal, &cut, cfg.gamma, cfg.lambda)?;
            for (t, &k) in idx.iter().enumerate() {
                batch.obs.push(std::mem::take(&mut obs_buf[k]));
                batch.actions.push(trans[k].action.clone());
                batch.log_probs.push(trans[k].log_prob);
                batch.advantages.push(adv[t]);
                batch.returns.push(ret[t] / scale);
            }
        }
        normalize(&mut batch.advantages);

        let n = trans.len() as f64;
        let mut terms = [0.0; 7];
        for tr in &trans {
            for (acc, v) in terms.iter_mut().zip(tr.terms.as_array()) {
                *acc += v;
            }
        }
        terms.iter_mut().for_each(|v| *v /= n);
        let ended: Vec<usize> = trans.iter().filter_map(|t| t.ended).collect();
        let falls = trans.iter().filter(|t| t.terminal).count();
        let mean_episode_len = if ended.is_empty() {
            self.slots.iter().map(|s| s.ep_len as f64).sum::<f64>() / n_env as f64
        } else {
            ended.iter().sum::<usize>() as f64 / ended.len() as f64
        };

        let (policy_loss, value_loss) = self.update(&batch, iteration)?;
        Ok(IterationLog {
            iteration,
            mean_reward: trans.iter().map(|t| t.reward).sum::<f64>() / n,
            mean_episode_len,
            fall_rate: falls as f64 / (active_at_start + ended.len()) as f64,
            terms,
            policy_loss,
            value_loss,
            action_std: self.policy.log_std.iter().map(|l| l.exp()).sum::<f64>() / NU as f64,
        })
    }

    fn update(&mut self, batch: &Batch, iteration: usize) -> Result<(f64, f64)> {
        let cfg = self.task.cfg;
        let dim = cfg.obs_dim();
        let total = batch.obs.len();
        let mut order: Vec<usize> = (0..total).collect();
        let mut last = (0.0, 0.0);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut self.shuffle);
            for chunk in order.chunks(total.div_ceil(cfg.minibatches)) {
                let before = self.policy.clone();
                let (pl, vl) = self.minibatch_step(batch, chunk, dim);
                if !pl.is_finite() || !vl.is_finite() || !self.policy.is_finite() {
                    return Err(self.diverged(before, iteration, pl, vl));
                }
                last = (pl, vl);
            }
        }
        Ok(last)
    }

    fn diverged(&self, last_finite: ActorCritic, iteration: usize, pl: f64, vl: f64) -> Error {
        let mut message = format!("non-finite loss (policy {pl}, value {vl})");
        if let Some(path) = &self.task.cfg.checkpoint {
            match last_finite.save(path) {
                Ok(()) => message.push_str(&format!("; last finite policy saved to {}", path.display())),
                Err(e) => message.push_str(&format!("; checkpoint failed: {e}")),
            }
        }
        Error::Training { iteration, message }
    }

    fn minibatch_step(&mut self, batch: &Batch, idx: &[usize], dim: usize) -> (f64, f64) {
        let cfg = self.task.cfg;
        let m = idx.len() as f64;
        let x = columns(&idx.iter().map(|&k| batch.obs[k].as_slice()).collect::<Vec<_>>(), dim);
        let p = &mut self.policy;

        let (mu, tape) = p.actor.forward_tape(&x);
        let std: Vec<f64> = p.log_std.iter().map(|l| l.exp()).collect();
        let mut dmu = DMatrix::zeros(NU, idx.len());
        let mut dlog_std = vec![-cfg.entropy_coef; NU];
        let mut policy_loss = 0.0;
        for (b, &k) in idx.iter().enumerate() {
            let a = &batch.actions[k];
            let mean: Vec<f64> = mu.column(b).iter().copied().collect();
            let ratio = (p.log_prob(&mean, a) - batch.log_probs[k]).exp();
            let adv = batch.advantages[k];
            let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
            policy_loss -= (ratio * adv).min(clipped * adv) / m;
            let active = if adv >= 0.0 { ratio < 1.0 + cfg.clip } else { ratio > 1.0 - cfg.clip };
            if !active {
                continue;
            }
            let g = -adv * ratio / m;
            for i in 0..NU {
                let z = (a[i] - mean[i]) / std[i];
                dmu[(i, b)] = g * z / std[i];
                dlog_std[i] += g * (z * z - 1.0);
            }
        }
        policy_loss -= cfg.entropy_coef * p.entropy();
        let mut grad = p.actor.backward(&tape, &dmu);
        grad.extend(&dlog_std);
        clip_grad(&mut grad, cfg.max_grad_norm);
        let mut params = p.actor.params();
        params.extend(&p.log_std);
        self.actor_opt.step(&mut params, &grad);
        let n_actor = p.actor.n_params();
        p.actor.set_params(&params[..n_actor]);
        for (ls, v) in p.log_std.iter_mut().zip(&params[n_actor..]) {
            *ls = v.clamp(-5.0, 1.0);
        }

        let (v, tape) = p.critic.forward_tape(&x);
        let mut dv = DMatrix::zeros(1, idx.len());
        let mut value_loss = 0.0;
        for (b, &k) in idx.iter().enumerate() {
            let err = v[(0, b)] - batch.returns[k];
            value_loss += err * err / m;
            dv[(0, b)] = 2.0 * err / m;
        }
        let mut grad = p.critic.backward(&tape, &dv);
        clip_grad(&mut grad, cfg.max_grad_norm);
        let mut params = p.critic.params();
        self.critic_opt.step(&mut params, &grad);
        p.critic.set_params(&params);
        (policy_loss, value_loss)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    if n < 2.0 {
        return;
    }
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    v.iter_mut().for_each(|x| *x = (*x - mean) / (std + 1e-8));
}

fn run(task: Task, init: ActorCritic, iterations: usize) -> Result<(ActorCritic, TrainingLog)> {
    let mut log = TrainingLog::default();
    if iterations == 0 {
        return Ok((init, log));
    }
    let mut trainer = Trainer::new(task, init)?;
    for it in 0..iterations {
        log.rows.push(trainer.iterate(it)?);
    }
    Ok((trainer.policy, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandReport {
    pub episodes: usize,
    pub stood: usize,
    pub stand_rate: f64,
    pub required: f64,
}

impl StandReport {
    pub fn meets_target(&self) -> bool {
        self.stand_rate >= self.required
    }
}

pub struct Pretrained {
    pub policy: ActorCritic,
    pub log: TrainingLog,
    pub report: StandReport,
}

/// Trains standing from `init` (or a fresh random policy) without the gait term
/// and with the height reward enlarged, then measures the stand rate.
pub fn pretrain_standing(cfg: &TrainConfig, init: Option<ActorCritic>) -> Result<Pretrained> {
    cfg.validate()?;
    let init = match init {
        Some(p) => p,
        None => cfg.initial_policy()?,
    };
    let task = Task {
        cfg,
        weights: cfg.weights.standing(),
        guide: None,
    };
    let (policy, log) = run(task, init, cfg.standing_iterations)?;
    let report = stand_rate(cfg, &policy)?;
    Ok(Pretrained { policy, log, report })
}

/// Fraction of deterministic episodes that stay up for the full episode.
pub fn stand_rate(cfg: &TrainConfig, policy: &ActorCritic) -> Result<StandReport> {
    let outcomes: Vec<Result<bool>> = (0..cfg.stand_eval_episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57a4d);
            rng.set_stream(i as u64);
            let mut env = Env::new(cfg.env.clone())?;
            env.reset_standing([0.0; 2], &mut rng);
            loop {
                let obs = env.observation()?;
                let a: Vec<f64> = policy
                    .act_mean(&obs.values)?
                    .into_iter()
                    .map(|v| v.clamp(-cfg.action_clip, cfg.action_clip))
                    .collect();
                let t = cfg.env.targets(&a);
                match env.step(Actuation::Targets(&t), &a)?.termination {
                    Termination::Running => {}
                    end => return Ok(end == Termination::Timeout),
                }
            }
        })
        .collect();
    let mut stood = 0;
    for o in outcomes {
        stood += usize::from(o?);
    }
    let episodes = cfg.stand_eval_episodes;
    Ok(StandReport {
        episodes,
        stood,
        stand_rate: if episodes == 0 { 0.0 } else { stood as f64 / episodes as f64 },
        required: cfg.stand_success_rate,
    })
}

/// Walking training guided by the library frames nearest to the current state.
pub fn train_guided(
    cfg: &TrainConfig,
    library: &GaitLibrary,
    init: ActorCritic,
) -> Result<(ActorCritic, TrainingLog)> {
    cfg.validate()?;
    if library.is_empty() {
        return Err(Error::Config("gait library is empty".into()));
    }
    let channels = guidance_channels();
    let projected = library
        .gaits
        .iter()
        .map(|g| Gait {
            frames: g.frames.iter().map(|f| project_frame(f, &channels)).collect(),
            channel_manifest: channels.iter().map(|&i| g.channel_manifest[i].clone()).collect(),
            ..g.clone()
        })
        .collect();
    let task = Task {
        cfg,
        weights: cfg.weights.clone(),
        guide: Some((library, projected)),
    };
    run(task, init, cfg.iterations)
}
