//! PPO with GAE, base-policy attenuation and the synchronization trick.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use arpo_core::controllers::{FtgConfig, StanleyConfig};
use arpo_core::env::{EnvConfig, FtgPolicy, Policy, RacingEnv, StackedState, StanleyPolicy, VecEnv};
use arpo_core::track::Track;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::{FusionConfig, FusionMode, TruncatedGaussian, SIGMA_MAX, SIGMA_MIN};
use crate::network::{Batch, Checkpoint, Network, NetworkConfig, Output, OutputGrad, Scalar, LIDAR_LEN, N_FRAMES, STATE_DIM};
use crate::{LearnError, Result};

const OBS_LEN: usize = N_FRAMES * LIDAR_LEN + STATE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BaseController {
    #[default]
    Stanley,
    Ftg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub n_envs: usize,
    pub traj_len: usize,
    pub lr: f64,
    pub cosine_lr: bool,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_start: f64,
    pub entropy_end: f64,
    pub k_end_fraction: f64,
    pub alpha_init: f64,
    pub omega: f64,
    pub mode: FusionMode,
    pub sync_trick: bool,
    /// Pins α for every iteration (fine-tuning, reduction checks).
    pub fixed_alpha: Option<f64>,
    pub normalize_advantages: bool,
    pub adam_eps: f64,
    pub base: BaseController,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub network: NetworkConfig,
    pub env: EnvConfig,
    pub stanley: StanleyConfig,
    pub ftg: FtgConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2_500_000,
            n_envs: 15,
            traj_len: 1024,
            lr: 1.5e-4,
            cosine_lr: true,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            epochs: 5,
            minibatch: 512,
            entropy_start: 0.01,
            entropy_end: 0.0,
            k_end_fraction: 0.25,
            alpha_init: 1.0,
            omega: 1.0,
            mode: FusionMode::Arpo,
            sync_trick: true,
            fixed_alpha: None,
            normalize_advantages: true,
            adam_eps: 1e-5,
            base: BaseController::Stanley,
            checkpoint_every: 10,
            seed: 0,
            network: NetworkConfig::default(),
            env: EnvConfig::default(),
            stanley: StanleyConfig::default(),
            ftg: FtgConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Overrides for continuing training on a single track.
    pub fn finetune(mut self) -> Self {
        self.lr = 5e-5;
        self.n_envs = 4;
        self.total_steps = 500_000;
        self.mode = FusionMode::Arpo;
        self.fixed_alpha = Some(1.0);
        self
    }

    pub fn batch_size(&self) -> usize {
        self.n_envs * self.traj_len
    }

    pub fn iterations(&self) -> u64 {
        self.total_steps.div_ceil(self.batch_size() as u64)
    }

    /// Iteration after which the base policy is gone.
    pub fn k_end(&self) -> u64 {
        ((self.k_end_fraction * self.total_steps as f64) / self.batch_size() as f64).ceil().max(1.0) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LearnError::Config(m.into()));
        if self.n_envs == 0 || self.traj_len == 0 || self.minibatch == 0 || self.epochs == 0 {
            return bad("n_envs, traj_len, minibatch and epochs must be positive");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || !(self.clip_eps > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("lr, clip_eps and max_grad_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha_init) || self.fixed_alpha.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return bad("alpha values must lie in [0, 1]");
        }
        if !(self.k_end_fraction > 0.0) {
            return bad("k_end_fraction must be positive");
        }
        self.network.validate()
    }

    pub fn lr_at(&self, k: u64) -> f64 {
        if !self.cosine_lr {
            return self.lr;
        }
        let p = (k as f64 / self.iterations() as f64).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * p).cos())
    }

    pub fn entropy_coef_at(&self, k: u64) -> f64 {
        let p = (k as f64 / self.iterations() as f64).min(1.0);
        self.entropy_start + (self.entropy_end - self.entropy_start) * p
    }

    /// `(behaviour α, update α)` of iteration `k`.
    pub fn alphas(&self, k: u64) -> (f64, f64) {
        if let Some(a) = self.fixed_alpha {
            return (a, a);
        }
        match self.mode {
            FusionMode::Drl => (1.0, 1.0),
            FusionMode::Rpl => (0.0, 0.0),
            FusionMode::Arpo => {
                let k_end = self.k_end();
                let next = update_alpha(k, k_end).expect("k_end is positive");
                if self.sync_trick {
                    (update_alpha(k.saturating_sub(1), k_end).expect("k_end is positive"), next)
                } else {
                    (next, next)
                }
            }
        }
    }

    pub fn fusion(&self, alpha: f64) -> FusionConfig {
        match self.mode {
            FusionMode::Arpo => FusionConfig::arpo(alpha, self.alpha_init),
            FusionMode::Rpl => FusionConfig::rpl(self.omega),
            FusionMode::Drl => FusionConfig::drl(),
        }
    }
}

/// `min(1, k / K_end)`.
pub fn update_alpha(k: u64, k_end: u64) -> Result<f64> {
    if k_end == 0 {
        return Err(LearnError::Config("K_end must be positive".into()));
    }
    Ok((k as f64 / k_end as f64).min(1.0))
}

/// Generalized advantage estimation over one or more concatenated
/// episodes. `next_values[t]` is the bootstrap value of the state after
/// step `t` (zero after a termination) and `episode_end[t]` stops the
/// recursion after step `t`. Returns `(advantages, returns)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && next_values.len() == n && episode_end.len() == n);
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        if episode_end[t] {
            next = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        next = delta + gamma * lambda * next;
        adv[t] = next;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// GAE in the usual done-mask form: `dones[t]` marks a terminal step and
/// `last_value` bootstraps the tail.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let next: Vec<f64> = (0..n)
        .map(|t| if dones[t] { 0.0 } else if t + 1 < n { values[t + 1] } else { last_value })
        .collect();
    gae(rewards, values, &next, dones, gamma, lambda)
}

pub fn normalize(x: &mut [f64]) {
    if x.len() < 2 {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) / (std + 1e-8));
}

/// Transitions of one iteration, indexed `t * n_envs + env`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub traj_len: usize,
    /// Stacked observations, `OBS_LEN` values per transition with the LiDAR
    /// block first.
    pub obs: Vec<f32>,
    pub actions: Vec<[f64; 2]>,
    pub base_actions: Vec<[f64; 2]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Value of the following state; zero after a crash.
    pub next_values: Vec<f64>,
    pub episode_end: Vec<bool>,
    pub terminated: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// α of the behaviour policy.
    pub alpha: f64,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Advantages and returns per environment stream, then optional
    /// normalization of the advantages over the whole batch.
    pub fn finish(&mut self, gamma: f64, lambda: f64, normalize_adv: bool) {
        let n = self.len();
        self.advantages = vec![0.0; n];
        self.returns = vec![0.0; n];
        for e in 0..self.n_envs {
            let idx: Vec<usize> = (0..self.traj_len).map(|t| t * self.n_envs + e).collect();
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let ends: Vec<bool> = idx.iter().map(|&i| self.episode_end[i]).collect();
            let (a, r) = gae(&pick(&self.rewards), &pick(&self.values), &pick(&self.next_values), &ends, gamma, lambda);
            for (j, &i) in idx.iter().enumerate() {
                self.advantages[i] = a[j];
                self.returns[i] = r[j];
            }
        }
        if normalize_adv {
            normalize(&mut self.advantages);
        }
    }

    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Batch<T> {
        let lidar_len = N_FRAMES * LIDAR_LEN;
        let mut lidar = Vec::with_capacity(idx.len() * lidar_len);
        let mut state = Vec::with_capacity(idx.len() * STATE_DIM);
        for &i in idx {
            let o = &self.obs[i * OBS_LEN..(i + 1) * OBS_LEN];
            lidar.extend(o[..lidar_len].iter().map(|&v| T::of(v as f64)));
            state.extend(o[lidar_len..].iter().map(|&v| T::of(v as f64)));
        }
        Batch::new(lidar, state).expect("buffer rows have the network input size")
    }
}

pub fn batch_from_states<T: Scalar>(states: &[&StackedState]) -> Batch<T> {
    let mut lidar = Vec::with_capacity(states.len() * N_FRAMES * LIDAR_LEN);
    let mut state = Vec::with_capacity(states.len() * STATE_DIM);
    for s in states {
        lidar.extend(s.lidar_block().map(T::of));
        state.extend(s.state_block().map(T::of));
    }
    Batch::new(lidar, state).expect("stacked states have the network input size")
}

/// Fused action distribution of sample `i` of a forward pass.
pub fn fused_dist<T: Scalar>(out: &Output<T>, batch: usize, i: usize, base: [f64; 2], fusion: &FusionConfig) -> TruncatedGaussian {
    let mu = crate::distribution::fuse_mean(base, out.mu(i, batch), fusion);
    TruncatedGaussian::new(mu, out.log_sigma(i, batch).map(f64::exp))
}

/// Deterministic action of the standalone residual policy (α = 1).
pub fn greedy_action<T: Scalar>(out: &Output<T>, batch: usize, i: usize, base: [f64; 2], fusion: &FusionConfig) -> [f64; 2] {
    fused_dist(out, batch, i, base, fusion).mode()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub iteration: u64,
    pub global_step: u64,
    pub env: usize,
    pub length: u32,
    pub total_return: f64,
    pub progress_return: f64,
    pub crashed: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Running {
    length: u32,
    total: f64,
    progress: f64,
}

/// Environments, base controllers and the sampling stream.
pub struct Collector {
    pub envs: VecEnv,
    bases: Vec<Box<dyn Policy + Send>>,
    current: Vec<StackedState>,
    running: Vec<Running>,
    rng: ChaCha8Rng,
    pub base_calls: u64,
    pub cum_crashes: u64,
    pub global_step: u64,
}

impl Collector {
    pub fn new(tracks: &[Arc<Track>], cfg: &TrainConfig, seed: u64) -> Result<Self> {
        if tracks.is_empty() {
            return Err(LearnError::Config("no training tracks".into()));
        }
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let envs: Vec<RacingEnv> = (0..cfg.n_envs)
            .map(|i| RacingEnv::new(tracks[i % tracks.len()].clone(), cfg.env, rand::Rng::random(&mut seeder)))
            .collect();
        let bases = envs
            .iter()
            .map(|e| -> Box<dyn Policy + Send> {
                match cfg.base {
                    BaseController::Stanley => Box::new(StanleyPolicy::new(e.track(), cfg.stanley, cfg.env.vehicle)),
                    BaseController::Ftg => Box::new(FtgPolicy { lidar: cfg.env.lidar, cfg: cfg.ftg, params: cfg.env.vehicle }),
                }
            })
            .collect();
        let mut envs = VecEnv::new(envs);
        let current = envs.reset_random();
        Ok(Self {
            running: vec![Running::default(); current.len()],
            envs,
            bases,
            current,
            rng: ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut seeder)),
            base_calls: 0,
            cum_crashes: 0,
            global_step: 0,
        })
    }

    fn base_actions(&mut self, fusion: &FusionConfig) -> Vec<[f64; 2]> {
        if !fusion.needs_base() {
            return vec![[0.0; 2]; self.envs.len()];
        }
        self.base_calls += self.envs.len() as u64;
        self.envs
            .envs
            .iter()
            .zip(self.bases.iter_mut())
            .map(|(e, b)| b.act(&e.policy_input().expect("environments are reset")))
            .collect()
    }

    /// Runs `traj_len` steps in every environment under the fused policy
    /// with attenuation `fusion`.
    pub fn collect<T: Scalar>(
        &mut self,
        net: &Network<T>,
        fusion: &FusionConfig,
        cfg: &TrainConfig,
        iteration: u64,
        episodes: &mut Vec<EpisodeRecord>,
    ) -> Result<RolloutBuffer> {
        let n = self.envs.len();
        let total = n * cfg.traj_len;
        let mut buf = RolloutBuffer {
            n_envs: n,
            traj_len: cfg.traj_len,
            obs: Vec::with_capacity(total * OBS_LEN),
            actions: Vec::with_capacity(total),
            base_actions: Vec::with_capacity(total),
            log_probs: Vec::with_capacity(total),
            rewards: Vec::with_capacity(total),
            values: Vec::with_capacity(total),
            next_values: Vec::with_capacity(total),
            episode_end: Vec::with_capacity(total),
            terminated: Vec::with_capacity(total),
            alpha: fusion.alpha,
            ..Default::default()
        };
        for _ in 0..cfg.traj_len {
            let row0 = buf.len();
            for s in &self.current {
                buf.obs.extend(s.lidar_block().chain(s.state_block()).map(|v| v as f32));
            }
            // The network sees exactly the stored (single-precision) rows.
            let rows: Vec<usize> = (row0..row0 + n).collect();
            let out = net.forward(&buf.batch::<T>(&rows)).out;
            let bases = self.base_actions(fusion);
            let mut actions = Vec::with_capacity(n);
            for (i, &b) in bases.iter().enumerate() {
                let d = fused_dist(&out, n, i, b, fusion);
                let a = d.sample(&mut self.rng);
                buf.log_probs.push(d.log_prob(a));
                buf.values.push(out.value[i].f64());
                buf.actions.push(a);
                buf.base_actions.push(b);
                actions.push(a);
            }
            let results = self.envs.step(&actions);
            self.global_step += n as u64;
            let mut truncated_states = Vec::new();
            for (i, r) in results.into_iter().enumerate() {
                let run = &mut self.running[i];
                run.length += 1;
                run.total += r.reward;
                run.progress += 0.1 * r.info.progress_m;
                buf.rewards.push(r.reward);
                let end = r.terminated || r.truncated;
                buf.episode_end.push(end);
                buf.terminated.push(r.terminated);
                buf.next_values.push(0.0);
                if r.terminated {
                    self.cum_crashes += 1;
                }
                if end {
                    if r.truncated && !r.info.failed {
                        truncated_states.push((i, r.state.clone()));
                    }
                    episodes.push(EpisodeRecord {
                        iteration,
                        global_step: self.global_step,
                        env: i,
                        length: run.length,
                        total_return: run.total,
                        progress_return: run.progress,
                        crashed: r.terminated,
                    });
                    *run = Running::default();
                    self.bases[i].reset();
                    self.current[i] = if r.info.failed { r.state } else { self.envs.envs[i].reset_random() };
                } else {
                    self.current[i] = r.state;
                }
            }
            if !truncated_states.is_empty() {
                let refs: Vec<&StackedState> = truncated_states.iter().map(|(_, s)| s).collect();
                let v = net.forward(&batch_from_states::<T>(&refs)).out.value;
                let base = buf.next_values.len() - n;
                for ((i, _), v) in truncated_states.iter().zip(v) {
                    buf.next_values[base + i] = v.f64();
                }
            }
        }
        // Bootstrap with the value of the state after each step.
        let refs: Vec<&StackedState> = self.current.iter().collect();
        let last = net.forward(&batch_from_states::<T>(&refs)).out.value;
        for t in 0..cfg.traj_len {
            for e in 0..n {
                let i = t * n + e;
                if buf.episode_end[i] {
                    continue;
                }
                buf.next_values[i] = if t + 1 < cfg.traj_len { buf.values[i + n] } else { last[e].f64() };
            }
        }
        buf.finish(cfg.gamma, cfg.gae_lambda, cfg.normalize_advantages);
        Ok(buf)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, eps: f64) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0, beta1: 0.9, beta2: 0.999, eps }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::of(lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p = *p - step * *m / (v.sqrt() + eps);
        }
    }
}

/// Scales `grads` to `max_norm` when its norm is larger; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-12));
        grads.iter_mut().for_each(|g| *g = *g * s);
    }
    norm
}

/// The clipped per-sample surrogate `min(ρA, clip(ρ, 1-ε, 1+ε)A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTerms {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub ratios: Vec<f64>,
    pub new_log_probs: Vec<f64>,
}

/// Loss `-surrogate + c_v MSE - c_H entropy` of a minibatch under `fusion`
/// and its gradient with respect to the network outputs.
pub fn minibatch_loss<T: Scalar>(
    out: &Output<T>,
    buf: &RolloutBuffer,
    idx: &[usize],
    fusion: &FusionConfig,
    cfg: &TrainConfig,
    entropy_coef: f64,
) -> Result<(LossTerms, OutputGrad<T>)> {
    let m = idx.len();
    let inv = 1.0 / m as f64;
    let wr = fusion.residual_weight();
    let mut terms = LossTerms { ratios: Vec::with_capacity(m), new_log_probs: Vec::with_capacity(m), ..Default::default() };
    let mut grad = OutputGrad::zeros(m);
    for (j, &i) in idx.iter().enumerate() {
        let log_sigma = out.log_sigma(j, m);
        let dist = fused_dist(out, m, j, buf.base_actions[i], fusion);
        let (lp, dlp_mu, dlp_sigma) = dist.log_prob_grad(buf.actions[i]);
        let (h, dh_mu, dh_sigma) = dist.entropy_grad();
        let ratio = (lp - buf.log_probs[i]).exp();
        let adv = buf.advantages[i];
        let surr = clipped_surrogate(ratio, adv, cfg.clip_eps);
        let active = ratio * adv <= ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
        let v = out.value[j].f64();
        let err = v - buf.returns[i];

        terms.policy_loss -= surr * inv;
        terms.value_loss += err * err * inv;
        terms.entropy += h * inv;
        terms.approx_kl += ((ratio - 1.0) - (lp - buf.log_probs[i])) * inv;
        if (ratio - 1.0).abs() > cfg.clip_eps {
            terms.clip_frac += inv;
        }
        terms.ratios.push(ratio);
        terms.new_log_probs.push(lp);

        let dlp = if active { -ratio * adv * inv } else { 0.0 };
        for k in 0..2 {
            let dmu = dlp * dlp_mu[k] - entropy_coef * inv * dh_mu[k];
            let dsigma = dlp * dlp_sigma[k] - entropy_coef * inv * dh_sigma[k];
            let sigma_raw = log_sigma[k].exp();
            let dsigma_dlog = if (SIGMA_MIN..=SIGMA_MAX).contains(&sigma_raw) { sigma_raw } else { 0.0 };
            grad.residual_mu[k * m + j] = T::of(wr * dmu);
            grad.log_sigma[k * m + j] = T::of(dsigma * dsigma_dlog);
        }
        grad.value[j] = T::of(2.0 * cfg.value_coef * err * inv);
    }
    let total = terms.policy_loss + cfg.value_coef * terms.value_loss - entropy_coef * terms.entropy;
    if !total.is_finite() {
        return Err(LearnError::NonFinite(format!(
            "policy loss {}, value loss {}, entropy {}",
            terms.policy_loss, terms.value_loss, terms.entropy
        )));
    }
    Ok((terms, grad))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
    /// Ratios of the first minibatch of the first epoch, before any step.
    pub first_ratios: Vec<f64>,
    pub first_indices: Vec<usize>,
    pub minibatches: usize,
}

/// PPO epochs over `buf` with the target policy at `fusion`.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<T: Scalar>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    buf: &RolloutBuffer,
    fusion: &FusionConfig,
    cfg: &TrainConfig,
    lr: f64,
    entropy_coef: f64,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let mut grads = vec![T::zero(); net.param_count()];
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (mb, idx) in order.chunks(cfg.minibatch).enumerate() {
            let fwd = net.forward(&buf.batch::<T>(idx));
            let (terms, dout) = minibatch_loss(&fwd.out, buf, idx, fusion, cfg, entropy_coef)?;
            grads.iter_mut().for_each(|g| *g = T::zero());
            net.backward(&fwd, &dout, &mut grads)?;
            let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(LearnError::NonFinite(format!("gradient norm {norm} in epoch {epoch}, minibatch {mb}")));
            }
            adam.step(&mut net.params, &grads, lr);
            if epoch == 0 && mb == 0 {
                stats.first_ratios = terms.ratios.clone();
                stats.first_indices = idx.to_vec();
            }
            stats.policy_loss += terms.policy_loss;
            stats.value_loss += terms.value_loss;
            stats.entropy += terms.entropy;
            stats.approx_kl += terms.approx_kl;
            stats.clip_frac += terms.clip_frac;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_frac /= k;
    stats.grad_norm /= k;
    Ok(stats)
}

/// One row of the metrics log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub step: u64,
    pub alpha_behavior: f64,
    pub alpha: f64,
    pub lr: f64,
    pub entropy_coef: f64,
    /// Mean progress part of the return over episodes ended this iteration.
    pub progress_return: Option<f64>,
    pub total_return: Option<f64>,
    pub episodes: u64,
    pub cum_crashes: u64,
    pub base_calls: u64,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
}

pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub net: Network<T>,
    pub adam: Adam<T>,
    pub collector: Collector,
    pub iteration: u64,
    pub metrics: Vec<IterationMetrics>,
    pub episodes: Vec<EpisodeRecord>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, tracks: &[Arc<Track>]) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Network::new(cfg.network, &mut rng)?;
        Self::with_network(cfg, tracks, net, 0)
    }

    pub fn with_network(cfg: TrainConfig, tracks: &[Arc<Track>], net: Network<T>, iteration: u64) -> Result<Self> {
        cfg.validate()?;
        if net.cfg != cfg.network {
            return Err(LearnError::Config("checkpoint network options differ from the configuration".into()));
        }
        let stream = cfg.seed ^ iteration.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let collector = Collector::new(tracks, &cfg, stream.wrapping_add(1))?;
        Ok(Self {
            adam: Adam::new(net.param_count(), cfg.adam_eps),
            net,
            collector,
            iteration,
            metrics: Vec::new(),
            episodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(stream.wrapping_add(2)),
            cfg,
        })
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.cfg.iterations()
    }

    /// One collect + update cycle.
    pub fn iterate(&mut self) -> Result<(IterationMetrics, UpdateStats)> {
        let k = self.iteration;
        let (alpha_behavior, alpha) = self.cfg.alphas(k);
        let n_before = self.episodes.len();
        let buf = self.collector.collect(&self.net, &self.cfg.fusion(alpha_behavior), &self.cfg, k, &mut self.episodes)?;
        let lr = self.cfg.lr_at(k);
        let ent = self.cfg.entropy_coef_at(k);
        let stats = ppo_update(&mut self.net, &mut self.adam, &buf, &self.cfg.fusion(alpha), &self.cfg, lr, ent, &mut self.rng)?;
        let eps = &self.episodes[n_before..];
        let mean = |f: fn(&EpisodeRecord) -> f64| (!eps.is_empty()).then(|| eps.iter().map(f).sum::<f64>() / eps.len() as f64);
        let m = IterationMetrics {
            iteration: k,
            step: self.collector.global_step,
            alpha_behavior,
            alpha,
            lr,
            entropy_coef: ent,
            progress_return: mean(|e| e.progress_return),
            total_return: mean(|e| e.total_return),
            episodes: eps.len() as u64,
            cum_crashes: self.collector.cum_crashes,
            base_calls: self.collector.base_calls,
            mean_reward: buf.rewards.iter().sum::<f64>() / buf.len() as f64,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_frac: stats.clip_frac,
            grad_norm: stats.grad_norm,
        };
        self.metrics.push(m.clone());
        self.iteration += 1;
        Ok((m, stats))
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            network: self.net.clone(),
            extra: vec![("adam.m".into(), self.adam.m.clone()), ("adam.v".into(), self.adam.v.clone())],
            meta: serde_json::json!({
                "iteration": self.iteration,
                "global_step": self.collector.global_step,
                "cum_crashes": self.collector.cum_crashes,
                "base_calls": self.collector.base_calls,
                "adam_t": self.adam.t,
                "config": self.cfg,
            }),
        }
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    /// Environments restart from fresh episodes.
    pub fn resume(cfg: TrainConfig, tracks: &[Arc<Track>], ck: Checkpoint<T>) -> Result<Self> {
        let meta = |k: &str| ck.meta.get(k).and_then(|v| v.as_u64()).ok_or_else(|| LearnError::Checkpoint(format!("missing {k}")));
        let iteration = meta("iteration")?;
        let mut t = Self::with_network(cfg, tracks, ck.network.clone(), iteration)?;
        t.collector.global_step = meta("global_step")?;
        t.collector.cum_crashes = meta("cum_crashes")?;
        t.collector.base_calls = meta("base_calls")?;
        t.adam.t = meta("adam_t")?;
        for (name, v) in ck.extra {
            match name.as_str() {
                "adam.m" if v.len() == t.adam.m.len() => t.adam.m = v,
                "adam.v" if v.len() == t.adam.v.len() => t.adam.v = v,
                _ => return Err(LearnError::Checkpoint(format!("unexpected array {name}"))),
            }
        }
        Ok(t)
    }
}

/// Output files of a training run.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn episodes(&self) -> PathBuf {
        self.dir.join("episodes.csv")
    }
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| LearnError::Io { path: path.display().to_string(), source: e })
}

pub fn read_csv<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(LearnError::from)).collect()
}

/// Trains into `out`, resuming from `out/checkpoint.bin` when present.
/// `progress` is called after each iteration.
pub fn train(
    cfg: TrainConfig,
    tracks: &[Arc<Track>],
    out: &Path,
    init: Option<Network<f32>>,
    mut progress: impl FnMut(&IterationMetrics),
) -> Result<Trainer<f32>> {
    let files = RunFiles { dir: out.to_path_buf() };
    fs::create_dir_all(out).map_err(|e| LearnError::Io { path: out.display().to_string(), source: e })?;
    let mut trainer = if files.checkpoint().exists() {
        let ck = Checkpoint::<f32>::load(&files.checkpoint())?;
        let mut t = Trainer::resume(cfg, tracks, ck)?;
        let k = t.iteration;
        t.metrics = read_csv::<IterationMetrics>(&files.metrics())?.into_iter().filter(|m| m.iteration < k).collect();
        t.episodes = read_csv::<EpisodeRecord>(&files.episodes())?.into_iter().filter(|e| e.iteration < k).collect();
        t
    } else if let Some(net) = init {
        Trainer::with_network(cfg, tracks, net, 0)?
    } else {
        Trainer::new(cfg, tracks)?
    };
    while !trainer.done() {
        let (m, _) = trainer.iterate()?;
        progress(&m);
        if trainer.iteration % trainer.cfg.checkpoint_every.max(1) == 0 || trainer.done() {
            write_csv(&files.metrics(), &trainer.metrics)?;
            write_csv(&files.episodes(), &trainer.episodes)?;
            trainer.checkpoint().save(&files.checkpoint())?;
        }
    }
    Ok(trainer)
}

/// Continues training a checkpoint on a single track with α pinned to 1.
/// Learning rate and scale come from `cfg`; `TrainConfig::finetune` gives
/// the usual values.
pub fn finetune(
    cfg: TrainConfig,
    checkpoint: &Path,
    track: Arc<Track>,
    out: &Path,
    progress: impl FnMut(&IterationMetrics),
) -> Result<Trainer<f32>> {
    let net = Checkpoint::<f32>::load(checkpoint)?.network;
    let mut cfg = cfg;
    cfg.mode = FusionMode::Arpo;
    cfg.fixed_alpha = Some(1.0);
    cfg.network = net.cfg;
    train(cfg, &[track], out, Some(net), progress)
}

/// Appends one line to a log file.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let io = |e| LearnError::Io { path: path.display().to_string(), source: e };
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    writeln!(f, "{line}").map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_schedule_examples() {
        assert_eq!(update_alpha(0, 10).unwrap(), 0.0);
        assert_eq!(update_alpha(5, 10).unwrap(), 0.5);
        assert_eq!(update_alpha(20, 10).unwrap(), 1.0);
        assert!(update_alpha(1, 0).is_err());
    }

    #[test]
    fn k_end_in_iterations() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.batch_size(), 15_360);
        assert_eq!(cfg.k_end(), 41);
        assert_eq!(cfg.iterations(), 163);
        let (b0, u0) = cfg.alphas(0);
        assert_eq!((b0, u0), (0.0, 0.0));
        assert_eq!(cfg.alphas(1), (0.0, 1.0 / 41.0));
        assert_eq!(cfg.alphas(41).1, 1.0);
        let unsynced = TrainConfig { sync_trick: false, ..TrainConfig::default() };
        assert_eq!(unsynced.alphas(7), (7.0 / 41.0, 7.0 / 41.0));
    }

    #[test]
    fn schedules() {
        let cfg = TrainConfig { total_steps: 100 * 15_360, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 1.5e-4);
        assert!((cfg.lr_at(50) - 0.75e-4).abs() < 1e-18);
        assert!(cfg.lr_at(100).abs() < 1e-18);
        assert_eq!(cfg.entropy_coef_at(0), 0.01);
        assert!((cfg.entropy_coef_at(25) - 0.0075).abs() < 1e-15);
        assert_eq!(cfg.entropy_coef_at(100), 0.0);
    }

    #[test]
    fn finetune_overrides_only_its_keys() {
        let base = TrainConfig::default();
        let ft = base.clone().finetune();
        assert_eq!((ft.lr, ft.n_envs, ft.total_steps, ft.fixed_alpha), (5e-5, 4, 500_000, Some(1.0)));
        let restored = TrainConfig { lr: base.lr, n_envs: base.n_envs, total_steps: base.total_steps, fixed_alpha: None, ..ft };
        assert_eq!(restored, base);
        for k in 0..200 {
            assert_eq!(TrainConfig::default().finetune().alphas(k), (1.0, 1.0));
        }
    }

    #[test]
    fn clipped_objective_examples() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert_eq!(clipped_surrogate(1.5, -1.0, 0.2), -1.5);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(clipped_surrogate(1.0, 0.3, 0.2), 0.3);
    }

    #[test]
    fn gae_examples() {
        let (a, r) = compute_gae(&[1.0], &[0.0], &[true], 0.0, 0.99, 0.95);
        assert_eq!((a[0], r[0]), (1.0, 1.0));
        // λ = 1 telescopes to discounted return minus value.
        let rew = [0.5, -0.2, 1.0, 0.3];
        let val = [0.1, 0.4, -0.3, 0.2];
        let last = 0.7;
        let (a, _) = compute_gae(&rew, &val, &[false; 4], last, 0.9, 1.0);
        for t in 0..4 {
            let mut g = 0.9f64.powi((4 - t) as i32) * last;
            for (l, r) in rew[t..].iter().enumerate() {
                g += 0.9f64.powi(l as i32) * r;
            }
            assert!((a[t] - (g - val[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_clip_contract() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 0.5), 5.0);
        assert!((g[0].hypot(g[1]) - 0.5).abs() < 1e-9);
        let mut g = vec![0.1f64, 0.2];
        clip_grad_norm(&mut g, 0.5);
        assert_eq!(g, vec![0.1, 0.2]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut a = Adam::<f64>::new(2, 1e-8);
        let mut p = vec![1.0, -1.0];
        a.step(&mut p, &[0.3, -2.0], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9 && (p[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = TrainConfig { mode: FusionMode::Rpl, seed: 9, ..Default::default() };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), cfg);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }

    proptest::proptest! {
        #[test]
        fn alpha_is_monotone_and_bounded(k in 0u64..10_000, k_end in 1u64..1000) {
            let a = update_alpha(k, k_end).unwrap();
            let b = update_alpha(k + 1, k_end).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&a) && b >= a);
            proptest::prop_assert_eq!(a == 1.0, k >= k_end);
        }

        #[test]
        fn clipped_gradient_respects_bound(g in proptest::collection::vec(-10.0f64..10.0, 1..50), max in 0.01f64..5.0) {
            let mut g = g;
            let before = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let reported = clip_grad_norm(&mut g, max);
            let after = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            proptest::prop_assert!((reported - before).abs() < 1e-12);
            proptest::prop_assert!(after <= max * (1.0 + 1e-9) || after == before);
        }

        #[test]
        fn gae_with_zero_lambda_is_td_error(r in proptest::collection::vec(-1.0f64..1.0, 1..30), seed in 0u64..100) {
            let n = r.len();
            let v: Vec<f64> = (0..n).map(|i| ((i as u64 + seed) as f64).sin()).collect();
            let next: Vec<f64> = (0..n).map(|i| ((i as u64 * 3 + seed) as f64).cos()).collect();
            let end = vec![false; n];
            let (adv, _) = gae(&r, &v, &next, &end, 0.9, 0.0);
            for t in 0..n {
                proptest::prop_assert!((adv[t] - (r[t] + 0.9 * next[t] - v[t])).abs() < 1e-12);
            }
        }
    }
}
