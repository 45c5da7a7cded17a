//! Value-decomposition learner: shared per-agent utility network, monotone
//! state-conditioned mixer, TD training against hard-synced target networks.

pub mod net;
pub mod replay;

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionMask, RewardSignal, RoutingEnv, NUM_ACTIONS};
use crate::error::{Error, Result};
pub use net::{MixerActivation, MixerCache, MixerNet, UtilityCache, UtilityNet};
pub use replay::{Episode, ReplayBuffer, Transition};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Discount η.
    pub discount: f64,
    /// Train steps between hard target syncs.
    pub target_update_period: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of all epochs over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    /// Episodes sampled per train step.
    pub batch_episodes: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub train_steps_per_epoch: usize,
    pub hidden: usize,
    pub mixer_embed: usize,
    pub mixer_activation: MixerActivation,
    pub replay_capacity: usize,
    /// Global gradient-norm cap; zero disables clipping.
    pub grad_clip: f64,
    /// Multiplies environment rewards before they enter the TD target.
    pub reward_scale: f64,
    /// A loss above this for `divergence_window` consecutive steps aborts.
    pub divergence_loss: f64,
    pub divergence_window: usize,
    /// Fixed instances rolled out greedily after every epoch.
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            discount: 0.95,
            target_update_period: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            batch_episodes: 2,
            epochs: 100,
            episodes_per_epoch: 40,
            train_steps_per_epoch: 320,
            hidden: 32,
            mixer_embed: 16,
            mixer_activation: MixerActivation::Elu,
            replay_capacity: 2000,
            grad_clip: 10.0,
            reward_scale: 1.0,
            divergence_loss: 1e8,
            divergence_window: 20,
            eval_episodes: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("training.{m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        if self.epsilon_end > self.epsilon_start {
            return bad("epsilon must be non-increasing");
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad("epsilon_decay_fraction must lie in [0, 1]");
        }
        if self.target_update_period == 0 || self.batch_episodes == 0 || self.hidden == 0 || self.mixer_embed == 0 {
            return bad("periods, batch size and widths must be positive");
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity must be positive");
        }
        if !(self.reward_scale > 0.0) || self.grad_clip < 0.0 {
            return bad("reward_scale must be positive and grad_clip non-negative");
        }
        Ok(())
    }

    /// ε after `epoch` completed epochs.
    pub fn epsilon(&self, epoch: usize) -> f64 {
        let span = self.epsilon_decay_fraction * self.epochs as f64;
        if span <= 0.0 {
            return self.epsilon_end;
        }
        let frac = (epoch as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Utility-network input: observation followed by a one-hot last action.
pub fn utility_input(obs: &[f64], last: Action, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(obs);
    out.extend((0..NUM_ACTIONS).map(|a| if a == last.index() { 1.0 } else { 0.0 }));
}

/// Masked argmax, lowest index on ties; `None` if nothing is legal.
pub fn greedy_action(values: &[f64; NUM_ACTIONS], mask: &ActionMask) -> Option<Action> {
    let mut best: Option<usize> = None;
    for a in 0..NUM_ACTIONS {
        if mask[a] && best.is_none_or(|b| values[a] > values[b]) {
            best = Some(a);
        }
    }
    best.and_then(Action::from_index)
}

/// ε-greedy choice among legal actions. ε = 0 never touches `rng`.
pub fn act<R: Rng>(values: &[f64; NUM_ACTIONS], mask: &ActionMask, epsilon: f64, rng: &mut R) -> Option<Action> {
    let legal: Vec<usize> = (0..NUM_ACTIONS).filter(|&a| mask[a]).collect();
    if legal.is_empty() {
        return None;
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Action::from_index(legal[rng.gen_range(0..legal.len())]);
    }
    greedy_action(values, mask)
}

fn init_params(len: usize, fan_ins: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    // (count, fan_in) blocks; biases are given fan_in 0 and start at zero
    let mut p = Vec::with_capacity(len);
    for &(count, fan_in) in fan_ins {
        if fan_in == 0 {
            p.extend(std::iter::repeat_n(0.0, count));
        } else {
            let bound = (1.0 / fan_in as f64).sqrt();
            p.extend((0..count).map(|_| rng.gen_range(-bound..bound)));
        }
    }
    debug_assert_eq!(p.len(), len);
    p
}

/// Trained routing policy: the shared utility network plus the mixer it
/// was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub version: u32,
    pub utility: UtilityNet,
    pub mixer: MixerNet,
    pub obs_dim: usize,
    pub max_tasks: usize,
    /// Hash of the configuration the policy was trained under.
    pub config_hash: String,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl Policy {
    pub fn new(obs_dim: usize, state_dim: usize, max_tasks: usize, config: &TrainConfig, seed: u64) -> Self {
        let utility = UtilityNet { input: obs_dim + NUM_ACTIONS, hidden: config.hidden };
        let mixer = MixerNet { agents: max_tasks, state: state_dim, embed: config.mixer_embed, activation: config.mixer_activation };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, h, o) = (utility.input, utility.hidden, NUM_ACTIONS);
        let phi = init_params(utility.num_params(), &[(h * i, i), (h, 0), (h * h, h), (h, 0), (o * h, h), (o, 0)], &mut rng);
        let (n, s, e) = (mixer.agents, mixer.state, mixer.embed);
        let mut psi = init_params(
            mixer.num_params(),
            &[(n * e * s, s), (n * e, 0), (e * s, s), (e, 0), (e * s, s), (e, 0), (e * s, s), (e, 0), (e, e), (1, 0)],
            &mut rng,
        );
        // Start the mixer near a plain sum of utilities: without this the
        // state-value branch absorbs the returns and utilities barely move.
        let a1 = n * e * s;
        psi[a1..a1 + n * e].fill(1.0);
        let a2 = a1 + n * e + e * s + e + e * s;
        psi[a2..a2 + e].fill(1.0 / e as f64);
        Policy { version: CHECKPOINT_VERSION, utility, mixer, obs_dim, max_tasks, config_hash: String::new(), phi, psi }
    }

    pub fn check_env(&self, env: &RoutingEnv) -> Result<()> {
        let c = env.config();
        if c.obs_dim() != self.obs_dim || c.max_tasks != self.max_tasks || c.state_dim() != self.mixer.state {
            return Err(Error::config(format!(
                "policy expects {} slots / {} observation features, environment has {} / {}",
                self.max_tasks,
                self.obs_dim,
                c.max_tasks,
                c.obs_dim()
            )));
        }
        Ok(())
    }

    pub fn q_values(&self, obs: &[f64], last: Action) -> [f64; NUM_ACTIONS] {
        let mut x = Vec::with_capacity(self.utility.input);
        utility_input(obs, last, &mut x);
        self.utility.forward(&self.phi, &x)
    }

    /// Greedy rollout of one episode.
    pub fn run_greedy(&self, env: &mut RoutingEnv, transcript: Option<&mut Vec<crate::env::TranscriptStep>>) -> Result<RewardSignal> {
        self.check_env(env)?;
        let mut obs = vec![0.0; self.obs_dim];
        crate::env::run_episode(
            env,
            |e, slot, last| {
                e.observe_into(slot, &mut obs);
                greedy_action(&self.q_values(&obs, last), &e.action_mask(slot)).unwrap_or(Action::NoOp)
            },
            transcript,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Policy = serde_json::from_slice(&std::fs::read(path)?)?;
        if p.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!("checkpoint version {} is not supported", p.version)));
        }
        if p.phi.len() != p.utility.num_params() || p.psi.len() != p.mixer.num_params() {
            return Err(Error::config("checkpoint parameter vectors do not match their shapes"));
        }
        Ok(p)
    }
}

/// Online and target parameters with the training schedule.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: Policy,
    pub phi_target: Vec<f64>,
    pub psi_target: Vec<f64>,
    pub config: TrainConfig,
    pub train_steps: u64,
    high_loss_run: usize,
}

impl Learner {
    pub fn new(policy: Policy, config: TrainConfig) -> Self {
        Learner {
            phi_target: policy.phi.clone(),
            psi_target: policy.psi.clone(),
            policy,
            config,
            train_steps: 0,
            high_loss_run: 0,
        }
    }

    pub fn update_targets(&mut self) {
        self.phi_target.clone_from(&self.policy.phi);
        self.psi_target.clone_from(&self.policy.psi);
    }

    /// Bootstrapped targets `y_t` for every transition of `episode`: the next
    /// joint action is the masked per-agent argmax under the online utility,
    /// valued by the target networks. Terminal steps use `y = r`.
    pub fn td_targets(&self, episode: &Episode) -> Vec<f64> {
        let p = &self.policy;
        let (slots, d) = (p.max_tasks, p.obs_dim);
        let mut x = Vec::with_capacity(p.utility.input);
        let mut q = vec![0.0; slots];
        episode
            .steps
            .iter()
            .enumerate()
            .map(|(t, tr)| {
                let r = tr.reward * self.config.reward_scale;
                if tr.done || t + 1 >= episode.steps.len() {
                    return r;
                }
                let next = &episode.steps[t + 1];
                for s in 0..slots {
                    q[s] = 0.0;
                    if !next.is_active(s) {
                        continue;
                    }
                    utility_input(&next.obs[s * d..(s + 1) * d], next.last_actions[s], &mut x);
                    let online = p.utility.forward(&p.phi, &x);
                    let a = greedy_action(&online, &next.masks[s]).expect("active slots have a legal move");
                    q[s] = p.utility.forward(&self.phi_target, &x)[a.index()];
                }
                r + self.config.discount * p.mixer.forward(&self.psi_target, &q, &next.state)
            })
            .collect()
    }

    /// Mean squared TD error over all transitions of `batch` and its
    /// gradients with respect to (φ, ψ).
    pub fn loss_and_gradient(&self, batch: &[&Episode]) -> (f64, Vec<f64>, Vec<f64>) {
        let p = &self.policy;
        let (slots, d) = (p.max_tasks, p.obs_dim);
        let total: usize = batch.iter().map(|e| e.steps.len()).sum();
        let mut g_phi = vec![0.0; p.phi.len()];
        let mut g_psi = vec![0.0; p.psi.len()];
        if total == 0 {
            return (0.0, g_phi, g_psi);
        }
        let mut loss = 0.0;
        let mut x = Vec::with_capacity(p.utility.input);
        let mut caches = vec![UtilityCache::default(); slots];
        let mut mcache = MixerCache::default();
        let mut q = vec![0.0; slots];
        let mut dq = vec![0.0; slots];
        for ep in batch {
            let targets = self.td_targets(ep);
            for (tr, y) in ep.steps.iter().zip(targets) {
                for s in 0..slots {
                    q[s] = 0.0;
                    if tr.is_active(s) {
                        utility_input(&tr.obs[s * d..(s + 1) * d], tr.last_actions[s], &mut x);
                        q[s] = p.utility.forward_cached(&p.phi, &x, &mut caches[s])[tr.actions[s].index()];
                    }
                }
                let q_tot = p.mixer.forward_cached(&p.psi, &q, &tr.state, &mut mcache);
                let err = q_tot - y;
                loss += err * err;
                let g = 2.0 * err / total as f64;
                if g == 0.0 {
                    continue;
                }
                p.mixer.backward(&p.psi, &mcache, g, &mut g_psi, &mut dq);
                for s in 0..slots {
                    if tr.is_active(s) {
                        let mut dout = [0.0; NUM_ACTIONS];
                        dout[tr.actions[s].index()] = dq[s];
                        p.utility.backward(&p.phi, &caches[s], &dout, &mut g_phi);
                    }
                }
            }
        }
        (loss / total as f64, g_phi, g_psi)
    }

    /// One plain gradient-descent step on the TD loss. Returns the loss
    /// before the update.
    pub fn train_step(&mut self, batch: &[&Episode]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::contract("train_step needs a non-empty batch"));
        }
        let (loss, mut g_phi, mut g_psi) = self.loss_and_gradient(batch);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite TD loss at train step {}", self.train_steps)));
        }
        if loss > self.config.divergence_loss {
            self.high_loss_run += 1;
            if self.high_loss_run >= self.config.divergence_window {
                return Err(Error::Divergence(format!(
                    "TD loss {loss:.3e} above {:.1e} for {} consecutive steps (step {})",
                    self.config.divergence_loss, self.high_loss_run, self.train_steps
                )));
            }
        } else {
            self.high_loss_run = 0;
        }
        if self.config.grad_clip > 0.0 {
            let norm = g_phi.iter().chain(&g_psi).map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.config.grad_clip {
                let k = self.config.grad_clip / norm;
                g_phi.iter_mut().chain(g_psi.iter_mut()).for_each(|g| *g *= k);
            }
        }
        let lr = self.config.learning_rate;
        self.policy.phi.iter_mut().zip(&g_phi).for_each(|(w, g)| *w -= lr * g);
        self.policy.psi.iter_mut().zip(&g_psi).for_each(|(w, g)| *w -= lr * g);
        self.train_steps += 1;
        if self.train_steps.is_multiple_of(self.config.target_update_period) {
            self.update_targets();
        }
        Ok(loss)
    }

    /// Runs one ε-greedy episode and records it for replay.
    pub fn collect(&self, env: &mut RoutingEnv, epsilon: f64, rng: &mut ChaCha8Rng) -> Result<(Episode, RewardSignal)> {
        let p = &self.policy;
        p.check_env(env)?;
        env.reset();
        let slots = env.num_slots();
        let mut last = vec![Action::NoOp; slots];
        let mut steps = Vec::new();
        let mut obs = vec![0.0; p.obs_dim];
        let mut x = Vec::with_capacity(p.utility.input);
        while !env.is_done() {
            let mut tr = Transition {
                obs: Vec::with_capacity(slots * p.obs_dim),
                last_actions: last.clone(),
                masks: Vec::with_capacity(slots),
                actions: Vec::with_capacity(slots),
                state: env.global_state(),
                reward: 0.0,
                done: false,
            };
            for s in 0..slots {
                env.observe_into(s, &mut obs);
                let mask = env.action_mask(s);
                let a = if env.is_active(s) {
                    utility_input(&obs, last[s], &mut x);
                    let v = p.utility.forward(&p.phi, &x);
                    act(&v, &mask, epsilon, rng).expect("live packets always have a legal move")
                } else {
                    Action::NoOp
                };
                tr.obs.extend_from_slice(&obs);
                tr.masks.push(mask);
                tr.actions.push(a);
            }
            let out = env.step(&tr.actions)?;
            tr.reward = out.reward;
            tr.done = out.done;
            last.clone_from(&tr.actions);
            steps.push(tr);
        }
        Ok((Episode { steps }, env.reward()?))
    }
}

/// Per-epoch learning-curve row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    /// Mean model-plus-data transfer time of completed tasks; NaN if none.
    pub mean_transmission_delay: f64,
    pub loss: f64,
    pub epsilon: f64,
    pub completion_rate: f64,
    /// Mean greedy reward over the fixed evaluation instances; NaN without any.
    pub greedy_reward: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub curves: Vec<EpochStats>,
}

/// Trains a policy on environments drawn from `make_env`. Everything random
/// (initialisation, instance sampling, exploration, replay sampling) flows
/// from `seed`.
pub fn train<F>(mut make_env: F, config: &TrainConfig, seed: u64) -> Result<TrainOutcome>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<RoutingEnv>,
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = make_env(&mut rng)?;
    let env_cfg = probe.config().clone();
    let policy = Policy::new(env_cfg.obs_dim(), env_cfg.state_dim(), env_cfg.max_tasks, config, rng.gen());
    let mut learner = Learner::new(policy, config.clone());
    let mut replay = ReplayBuffer::new(config.replay_capacity);
    let mut curves = Vec::with_capacity(config.epochs);
    // separate stream so the evaluation set leaves training draws untouched
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_rng.set_stream(1);
    let mut eval_envs = (0..config.eval_episodes).map(|_| make_env(&mut eval_rng)).collect::<Result<Vec<_>>>()?;
    for epoch in 0..config.epochs {
        let epsilon = config.epsilon(epoch);
        let (mut reward_sum, mut delay_sum, mut delay_n, mut completed, mut tasks) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for _ in 0..config.episodes_per_epoch {
            let mut env = make_env(&mut rng)?;
            let (episode, signal) = learner.collect(&mut env, epsilon, &mut rng)?;
            reward_sum += signal.total;
            if let Some(d) = signal.mean_transfer_delay() {
                delay_sum += d;
                delay_n += 1;
            }
            completed += signal.completed;
            tasks += env.num_tasks();
            replay.push(episode);
        }
        let mut loss_sum = 0.0;
        let mut loss_n = 0;
        if !replay.is_empty() {
            for _ in 0..config.train_steps_per_epoch {
                let batch = replay.sample(config.batch_episodes, &mut rng);
                loss_sum += learner.train_step(&batch)?;
                loss_n += 1;
            }
        }
        let n = config.episodes_per_epoch.max(1) as f64;
        let mut greedy_sum = 0.0;
        for env in &mut eval_envs {
            greedy_sum += learner.policy.run_greedy(env, None)?.total;
        }
        curves.push(EpochStats {
            epoch: epoch + 1,
            mean_reward: reward_sum / n,
            mean_transmission_delay: if delay_n > 0 { delay_sum / delay_n as f64 } else { f64::NAN },
            loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
            epsilon,
            completion_rate: if tasks > 0 { completed as f64 / tasks as f64 } else { 1.0 },
            greedy_reward: if eval_envs.is_empty() { f64::NAN } else { greedy_sum / eval_envs.len() as f64 },
        });
    }
    Ok(TrainOutcome { policy: learner.policy, curves })
}
