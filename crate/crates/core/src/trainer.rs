//! Rollout collection, generalized advantage estimation and clipped PPO
//! updates for the dual-stream agent.
//!
//! Under the dual layout the energy actor learns from the `r_alpha` stream and
//! the slicing actor from `r_beta`, each with advantages computed from the
//! fused critic values. The single layout uses `r_total` for everything.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, CriticPair, Forward};
use crate::error::{Error, Result};
use crate::nn::dist::{categorical_entropy, categorical_log_prob, gaussian_log_prob};
use crate::nn::{Graph, GroupRates, Optimizer, OptimizerKind, Tensor, Var};
use crate::sim::{Simulator, StepOutcome};
use crate::types::{
    compute_reward, FrameConfig, QosTarget, RewardBreakdown, SleepAction, SliceAllocation,
    StateObservation,
};

const STREAM_POLICY: u64 = 5;
const STREAM_MINIBATCH: u64 = 6;
const ADV_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub huber_zeta: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Rollout length between updates.
    pub horizon: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub total_timesteps: u64,
    pub normalize_advantages: bool,
    pub entropy_coef: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    pub lambda_q: f64,
    pub lambda_d: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            huber_zeta: 1.0,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            horizon: 128,
            epochs: 4,
            minibatch: 32,
            total_timesteps: 20_000,
            normalize_advantages: true,
            entropy_coef: 0.0,
            optimizer: OptimizerKind::Adam,
            max_grad_norm: 0.5,
            lambda_q: 0.5,
            lambda_d: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("gae_lambda", self.gae_lambda)?;
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps)));
        }
        for (name, v) in [
            ("huber_zeta", self.huber_zeta),
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.horizon == 0 || self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::config("horizon, epochs and minibatch must be positive"));
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("max_grad_norm", self.max_grad_norm),
            ("lambda_q", self.lambda_q),
            ("lambda_d", self.lambda_d),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    fn rates(&self) -> GroupRates {
        GroupRates {
            actor: self.lr_actor,
            critic: self.lr_critic,
        }
    }
}

/// One stored step of experience.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Normalized encoder input, kept so the encoder can be trained.
    pub rows: Tensor,
    pub sleep_class: usize,
    pub beta_raw: Vec<f64>,
    pub sleep_log_prob: f64,
    pub beta_log_prob: f64,
    pub r_alpha: f64,
    pub r_beta: f64,
    pub critics: CriticPair,
    pub done: bool,
}

/// Which reward/value pair an advantage is computed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Alpha,
    Beta,
    /// `r_alpha + r_beta` against the single critic.
    Total,
}

impl Stream {
    fn reward(self, t: &Transition) -> f64 {
        match self {
            Stream::Alpha => t.r_alpha,
            Stream::Beta => t.r_beta,
            Stream::Total => t.r_alpha + t.r_beta,
        }
    }

    fn value(self, c: &CriticPair) -> f64 {
        match self {
            Stream::Alpha | Stream::Total => c.v_alpha_agg,
            Stream::Beta => c.v_beta_agg,
        }
    }
}

/// Reverse-recursion GAE. `bootstrap` is the value after the last step; a
/// `done` step does not bootstrap from its successor.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::argument("advantage estimation over an empty trajectory"));
    }
    if values.len() != n || dones.len() != n {
        return Err(Error::argument("rewards, values and done flags differ in length"));
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Advantages and value targets of one reward stream over a trajectory.
pub fn compute_gae(traj: &[Transition], which: Stream, bootstrap: f64, cfg: &TrainConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let rewards: Vec<f64> = traj.iter().map(|t| which.reward(t)).collect();
    let values: Vec<f64> = traj.iter().map(|t| which.value(&t.critics)).collect();
    let dones: Vec<bool> = traj.iter().map(|t| t.done).collect();
    gae(&rewards, &values, &dones, bootstrap, cfg.gamma, cfg.gae_lambda)
}

pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    for x in xs.iter_mut() {
        *x = (*x - mean) / (std + ADV_EPS);
    }
}

/// Per-sample PPO statistics gathered while building the surrogate.
#[derive(Clone, Copy, Debug, Default)]
struct SurrogateStats {
    clipped: usize,
    kl_sum: f64,
    count: usize,
}

/// `-mean(min(ρA, clip(ρ, 1-ε, 1+ε)A))` with `ρ = exp(new - old)`.
pub fn clipped_surrogate(g: &mut Graph, new_log_prob: Var, old_log_prob: &[f64], adv: &[f64], eps: f64) -> Var {
    clipped_surrogate_with_stats(g, new_log_prob, old_log_prob, adv, eps).0
}

fn clipped_surrogate_with_stats(
    g: &mut Graph,
    new_log_prob: Var,
    old_log_prob: &[f64],
    adv: &[f64],
    eps: f64,
) -> (Var, SurrogateStats) {
    let old = g.input(Tensor::column(old_log_prob));
    let a = g.input(Tensor::column(adv));
    let log_ratio = g.sub(new_log_prob, old);
    let ratio = g.exp(log_ratio);
    let unclipped = g.mul(ratio, a);
    let clipped_ratio = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = g.mul(clipped_ratio, a);
    let surr = g.minimum(unclipped, clipped);
    let m = g.mean(surr);
    let loss = g.neg(m);
    let mut stats = SurrogateStats::default();
    for (i, &r) in g.value(ratio).data().iter().enumerate() {
        if (r - 1.0).abs() > eps {
            stats.clipped += 1;
        }
        stats.kl_sum += old_log_prob[i] - g.value(new_log_prob).data()[i];
        stats.count += 1;
    }
    (loss, stats)
}

fn huber_mean(g: &mut Graph, values: Var, targets: &[f64], zeta: f64) -> Var {
    let t = g.input(Tensor::column(targets));
    let d = g.sub(values, t);
    let h = g.huber(d, zeta);
    g.mean(h)
}

/// Mean losses and diagnostics of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub actor_loss_alpha: f64,
    pub actor_loss_beta: f64,
    pub critic_loss_alpha: f64,
    pub critic_loss_beta: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Advantages and targets per stream for a batch of transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub adv_alpha: Vec<f64>,
    pub ret_alpha: Vec<f64>,
    /// Empty under the single layout.
    pub adv_beta: Vec<f64>,
    pub ret_beta: Vec<f64>,
}

impl Targets {
    /// GAE for every stream the agent uses, with `bootstrap` the critic values
    /// of the state after the last transition.
    pub fn compute(agent: &Agent, traj: &[Transition], bootstrap: &CriticPair, cfg: &TrainConfig) -> Result<Self> {
        if agent.is_single() {
            let (adv_alpha, ret_alpha) = compute_gae(traj, Stream::Total, bootstrap.v_alpha_agg, cfg)?;
            Ok(Targets {
                adv_alpha,
                ret_alpha,
                adv_beta: Vec::new(),
                ret_beta: Vec::new(),
            })
        } else {
            let (adv_alpha, ret_alpha) = compute_gae(traj, Stream::Alpha, bootstrap.v_alpha_agg, cfg)?;
            let (adv_beta, ret_beta) = compute_gae(traj, Stream::Beta, bootstrap.v_beta_agg, cfg)?;
            Ok(Targets {
                adv_alpha,
                ret_alpha,
                adv_beta,
                ret_beta,
            })
        }
    }
}

struct MinibatchLoss {
    total: Var,
    actor_alpha: Var,
    actor_beta: Option<Var>,
    critic_alpha: Var,
    critic_beta: Option<Var>,
    stats: SurrogateStats,
}

fn pick<T: Copy>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i]).collect()
}

/// Loss graph for the transitions `idx` of `batch`.
fn minibatch_loss(
    g: &mut Graph,
    agent: &Agent,
    batch: &[Transition],
    targets: &Targets,
    adv_alpha: &[f64],
    adv_beta: &[f64],
    idx: &[usize],
    cfg: &TrainConfig,
) -> MinibatchLoss {
    let rows: Vec<&Tensor> = idx.iter().map(|&i| &batch[i].rows).collect();
    let f: Forward = agent.forward(g, &rows);
    let classes: Vec<usize> = idx.iter().map(|&i| batch[i].sleep_class).collect();
    let raw: Vec<Vec<f64>> = idx.iter().map(|&i| batch[i].beta_raw.clone()).collect();
    let raw = g.input(Tensor::from_rows(&raw, agent.num_slices()));
    let lp_sleep = categorical_log_prob(g, f.logits, &classes);
    let lp_beta = gaussian_log_prob(g, f.rs_mean, f.log_std, raw);
    let old_sleep: Vec<f64> = idx.iter().map(|&i| batch[i].sleep_log_prob).collect();
    let old_beta: Vec<f64> = idx.iter().map(|&i| batch[i].beta_log_prob).collect();
    let zeta = cfg.huber_zeta;

    let (actor_alpha, actor_beta, mut stats) = if agent.is_single() {
        let lp = g.add(lp_sleep, lp_beta);
        let old: Vec<f64> = old_sleep.iter().zip(&old_beta).map(|(a, b)| a + b).collect();
        let (loss, s) = clipped_surrogate_with_stats(g, lp, &old, &pick(adv_alpha, idx), cfg.clip_eps);
        (loss, None, s)
    } else {
        let (la, sa) = clipped_surrogate_with_stats(g, lp_sleep, &old_sleep, &pick(adv_alpha, idx), cfg.clip_eps);
        let (lb, sb) = clipped_surrogate_with_stats(g, lp_beta, &old_beta, &pick(adv_beta, idx), cfg.clip_eps);
        let s = SurrogateStats {
            clipped: sa.clipped + sb.clipped,
            kl_sum: sa.kl_sum + sb.kl_sum,
            count: sa.count + sb.count,
        };
        (la, Some(lb), s)
    };
    if stats.count == 0 {
        stats.count = 1;
    }

    let ret_alpha = pick(&targets.ret_alpha, idx);
    let mut critic_alpha = huber_mean(g, f.v_alpha, &ret_alpha, zeta);
    let mut critic_beta = None;
    if let (Some(vb), Some(vbh)) = (f.v_beta, f.v_beta_agg) {
        let ret_beta = pick(&targets.ret_beta, idx);
        let mut cb = huber_mean(g, vb, &ret_beta, zeta);
        if f.attention.is_some() {
            // The fusion layer learns by regressing the fused values onto the same targets.
            let fa = huber_mean(g, f.v_alpha_agg, &ret_alpha, zeta);
            let fb = huber_mean(g, vbh, &ret_beta, zeta);
            critic_alpha = g.add(critic_alpha, fa);
            cb = g.add(cb, fb);
        }
        critic_beta = Some(cb);
    }

    let mut total = g.add(actor_alpha, critic_alpha);
    if let Some(lb) = actor_beta {
        total = g.add(total, lb);
    }
    if let Some(cb) = critic_beta {
        total = g.add(total, cb);
    }
    if cfg.entropy_coef > 0.0 {
        let h_cat = categorical_entropy(g, f.logits);
        let h_cat = g.mean(h_cat);
        let h_gauss = g.sum(f.log_std);
        let h = g.add(h_cat, h_gauss);
        let bonus = g.scale(h, -cfg.entropy_coef);
        total = g.add(total, bonus);
    }
    MinibatchLoss {
        total,
        actor_alpha,
        actor_beta,
        critic_alpha,
        critic_beta,
        stats,
    }
}

/// `epochs` passes of shuffled minibatch updates. On any non-finite loss or
/// gradient the agent and optimizer are restored to their state on entry.
pub fn ppo_update(
    agent: &mut Agent,
    opt: &mut Optimizer,
    batch: &[Transition],
    targets: &Targets,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateReport> {
    if batch.is_empty() {
        return Err(Error::argument("update over an empty batch"));
    }
    let snapshot = (agent.store().clone(), opt.clone());
    match ppo_epochs(agent, opt, batch, targets, cfg, rng) {
        Ok(r) => Ok(r),
        Err(e) => {
            *agent.store_mut() = snapshot.0;
            *opt = snapshot.1;
            Err(e)
        }
    }
}

fn ppo_epochs(
    agent: &mut Agent,
    opt: &mut Optimizer,
    batch: &[Transition],
    targets: &Targets,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateReport> {
    let mut adv_alpha = targets.adv_alpha.clone();
    let mut adv_beta = targets.adv_beta.clone();
    if cfg.normalize_advantages {
        normalize(&mut adv_alpha);
        normalize(&mut adv_beta);
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut sums = UpdateReport::default();
    let (mut clipped, mut counted, mut kl, mut passes) = (0usize, 0usize, 0.0, 0usize);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch) {
            let mut g = Graph::new();
            let l = minibatch_loss(&mut g, agent, batch, targets, &adv_alpha, &adv_beta, idx, cfg);
            g.check_finite()?;
            let grads = g.backward(l.total)?;
            let store = agent.store_mut();
            grads.accumulate_into(store);
            if cfg.max_grad_norm > 0.0 {
                store.clip_grad_norm(cfg.max_grad_norm);
            }
            opt.step(store, cfg.rates());
            if !store.all_finite() {
                return Err(Error::Numerical {
                    op: "optimizer step",
                    detail: "parameters became non-finite".into(),
                });
            }
            sums.actor_loss_alpha += g.value(l.actor_alpha).item();
            sums.actor_loss_beta += l.actor_beta.map_or(0.0, |v| g.value(v).item());
            sums.critic_loss_alpha += g.value(l.critic_alpha).item();
            sums.critic_loss_beta += l.critic_beta.map_or(0.0, |v| g.value(v).item());
            clipped += l.stats.clipped;
            counted += l.stats.count;
            kl += l.stats.kl_sum;
            passes += 1;
        }
    }
    let p = passes as f64;
    Ok(UpdateReport {
        actor_loss_alpha: sums.actor_loss_alpha / p,
        actor_loss_beta: sums.actor_loss_beta / p,
        critic_loss_alpha: sums.critic_loss_alpha / p,
        critic_loss_beta: sums.critic_loss_beta / p,
        clip_fraction: clipped as f64 / counted as f64,
        approx_kl: kl / counted as f64,
    })
}

/// Anything that yields KPI reports and applies joint actions.
pub trait Environment {
    fn frame(&self) -> FrameConfig;
    fn slices(&self) -> Vec<QosTarget>;
    fn observe(&mut self) -> Result<StateObservation>;
    fn step(&mut self, act: &SleepAction, alloc: &SliceAllocation) -> Result<StepOutcome>;
}

impl Environment for Simulator {
    fn frame(&self) -> FrameConfig {
        *Simulator::frame(self)
    }

    fn slices(&self) -> Vec<QosTarget> {
        Simulator::slices(self).to_vec()
    }

    fn observe(&mut self) -> Result<StateObservation> {
        Ok(Simulator::observe(self))
    }

    fn step(&mut self, act: &SleepAction, alloc: &SliceAllocation) -> Result<StepOutcome> {
        Simulator::step(self, act, alloc)
    }
}

/// One row of the learning curve.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: u64,
    pub reward: RewardBreakdown,
    pub sleep_ratio: f64,
    pub violations: usize,
    pub num_ues: usize,
    pub update: Option<UpdateReport>,
}

impl StepRecord {
    pub fn violation_ratio(&self) -> f64 {
        if self.num_ues == 0 {
            0.0
        } else {
            self.violations as f64 / self.num_ues as f64
        }
    }
}

pub const METRICS_COLUMNS: &str = "t,r_total,r_alpha,r_beta,sleep_ratio,violation_ratio,\
actor_loss_alpha,actor_loss_beta,critic_loss_alpha,critic_loss_beta,clip_fraction,approx_kl";

/// Per-timestep metrics CSV. `preamble` lines are written as `#` comments.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, preamble: &str) -> Result<Self> {
        for line in preamble.lines() {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "{METRICS_COLUMNS}")?;
        Ok(MetricsWriter { out })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        write!(
            self.out,
            "{},{},{},{},{},{}",
            r.t,
            r.reward.r_total,
            r.reward.r_alpha,
            r.reward.r_beta,
            r.sleep_ratio,
            r.violation_ratio()
        )?;
        match &r.update {
            Some(u) => writeln!(
                self.out,
                ",{},{},{},{},{},{}",
                u.actor_loss_alpha, u.actor_loss_beta, u.critic_loss_alpha, u.critic_loss_beta, u.clip_fraction, u.approx_kl
            )?,
            None => writeln!(self.out, ",,,,,,")?,
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn policy_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Runs `cfg.total_timesteps` environment steps, updating the agent after
/// every `cfg.horizon` steps. `on_step` sees each record and the agent after
/// any update that step triggered.
pub fn train<E, F>(env: &mut E, agent: &mut Agent, cfg: &TrainConfig, seed: u64, mut on_step: F) -> Result<Vec<StepRecord>>
where
    E: Environment + ?Sized,
    F: FnMut(&StepRecord, &Agent) -> Result<()>,
{
    cfg.validate()?;
    let frame = env.frame();
    let slices = env.slices();
    if frame != *agent.frame() || slices != agent.slices() {
        return Err(Error::config("agent and environment disagree on frame or slice table"));
    }
    let mut act_rng = policy_rng(seed, STREAM_POLICY);
    let mut batch_rng = policy_rng(seed, STREAM_MINIBATCH);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut records = Vec::with_capacity(cfg.total_timesteps as usize);
    let mut buffer: Vec<Transition> = Vec::with_capacity(cfg.horizon);
    let mut obs = env.observe()?;
    for t in 0..cfg.total_timesteps {
        agent.update_normalizer(&obs);
        let rows = agent.featurize(&obs)?;
        let (policy, critics) = agent.step(&rows, false, &mut act_rng)?;
        let outcome = env.step(&policy.sleep_action, &policy.beta)?;
        let reward = compute_reward(
            &outcome.observation,
            &policy.sleep_action,
            &slices,
            cfg.lambda_q,
            cfg.lambda_d,
            &frame,
        )?;
        buffer.push(Transition {
            rows,
            sleep_class: policy.sleep_class,
            beta_raw: policy.beta_raw,
            sleep_log_prob: policy.sleep_log_prob,
            beta_log_prob: policy.beta_log_prob,
            r_alpha: reward.r_alpha,
            r_beta: reward.r_beta,
            critics,
            done: false,
        });
        obs = outcome.observation;
        let update = if buffer.len() == cfg.horizon {
            let next = agent.featurize(&obs)?;
            let bootstrap = agent.evaluate(&next)?;
            let targets = Targets::compute(agent, &buffer, &bootstrap, cfg)?;
            let report = ppo_update(agent, &mut opt, &buffer, &targets, cfg, &mut batch_rng)?;
            buffer.clear();
            Some(report)
        } else {
            None
        };
        let record = StepRecord {
            t,
            violations: reward.violations(),
            num_ues: reward.num_ues(),
            sleep_ratio: outcome.sleep_ratio,
            reward,
            update,
        };
        on_step(&record, agent)?;
        records.push(record);
    }
    Ok(records)
}

/// Something that maps a KPI report to a joint action.
pub trait Controller {
    fn decide(&mut self, obs: &StateObservation) -> Result<(SleepAction, SliceAllocation)>;
}

/// Greedy (mode / mean) policy of a trained agent.
pub struct Greedy<'a>(pub &'a Agent);

impl Controller for Greedy<'_> {
    fn decide(&mut self, obs: &StateObservation) -> Result<(SleepAction, SliceAllocation)> {
        let rows = self.0.featurize(obs)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let p = self.0.act(&rows, true, &mut unused)?;
        Ok((p.sleep_action, p.beta))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceViolations {
    pub violations: u64,
    pub pairs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub steps: u64,
    pub mean_reward: f64,
    pub mean_sleep_ratio: f64,
    /// Violating (UE, step) pairs over all (UE, step) pairs.
    pub violation_ratio: f64,
    pub per_slice: BTreeMap<u32, SliceViolations>,
}

/// Accumulates rewards and violation counts over a run.
#[derive(Clone, Debug, Default)]
pub struct EvalAccumulator {
    steps: u64,
    reward_sum: f64,
    sleep_sum: f64,
    violations: u64,
    pairs: u64,
    per_slice: BTreeMap<u32, SliceViolations>,
}

impl EvalAccumulator {
    pub fn push(&mut self, obs: &StateObservation, reward: &RewardBreakdown, sleep_ratio: f64) {
        self.steps += 1;
        self.reward_sum += reward.r_total;
        self.sleep_sum += sleep_ratio;
        for ue in &obs.ues {
            let q = reward.per_ue_throughput_penalty.get(&ue.ue_id).copied().unwrap_or(0.0);
            let d = reward.per_ue_delay_penalty.get(&ue.ue_id).copied().unwrap_or(0.0);
            let slot = self.per_slice.entry(ue.slice_id).or_default();
            slot.pairs += 1;
            self.pairs += 1;
            if q > 0.0 || d > 0.0 {
                slot.violations += 1;
                self.violations += 1;
            }
        }
    }

    pub fn finish(self) -> EvalSummary {
        let steps = self.steps.max(1) as f64;
        EvalSummary {
            steps: self.steps,
            mean_reward: self.reward_sum / steps,
            mean_sleep_ratio: self.sleep_sum / steps,
            violation_ratio: if self.pairs == 0 {
                0.0
            } else {
                self.violations as f64 / self.pairs as f64
            },
            per_slice: self.per_slice,
        }
    }
}

/// Runs a controller for `steps` steps and scores every outcome.
pub fn rollout<E, C>(env: &mut E, controller: &mut C, steps: u64, lambda_q: f64, lambda_d: f64) -> Result<EvalSummary>
where
    E: Environment + ?Sized,
    C: Controller + ?Sized,
{
    let frame = env.frame();
    let slices = env.slices();
    let mut acc = EvalAccumulator::default();
    let mut obs = env.observe()?;
    for _ in 0..steps {
        let (act, alloc) = controller.decide(&obs)?;
        let outcome = env.step(&act, &alloc)?;
        let reward = compute_reward(&outcome.observation, &act, &slices, lambda_q, lambda_d, &frame)?;
        acc.push(&outcome.observation, &reward, outcome.sleep_ratio);
        obs = outcome.observation;
    }
    Ok(acc.finish())
}

/// Runs a fixed controller for `steps` steps, producing the same per-step
/// records as [`train`] (without update reports).
pub fn run_controller<E, C, F>(
    env: &mut E,
    controller: &mut C,
    steps: u64,
    lambda_q: f64,
    lambda_d: f64,
    mut on_step: F,
) -> Result<Vec<StepRecord>>
where
    E: Environment + ?Sized,
    C: Controller + ?Sized,
    F: FnMut(&StepRecord) -> Result<()>,
{
    let frame = env.frame();
    let slices = env.slices();
    let mut records = Vec::with_capacity(steps as usize);
    let mut obs = env.observe()?;
    for t in 0..steps {
        let (act, alloc) = controller.decide(&obs)?;
        let outcome = env.step(&act, &alloc)?;
        let reward = compute_reward(&outcome.observation, &act, &slices, lambda_q, lambda_d, &frame)?;
        let record = StepRecord {
            t,
            violations: reward.violations(),
            num_ues: reward.num_ues(),
            sleep_ratio: outcome.sleep_ratio,
            reward,
            update: None,
        };
        on_step(&record)?;
        records.push(record);
        obs = outcome.observation;
    }
    Ok(records)
}

/// Mean reward, sleep ratio and violation ratio over the last `window` records.
pub fn tail_summary(records: &[StepRecord], window: usize) -> TailSummary {
    let tail = &records[records.len().saturating_sub(window)..];
    let n = tail.len().max(1) as f64;
    let mean = |f: fn(&StepRecord) -> f64| tail.iter().map(f).fold(0.0, |a, x| a + x) / n;
    let pairs: usize = tail.iter().map(|r| r.num_ues).sum();
    let violations: usize = tail.iter().map(|r| r.violations).sum();
    TailSummary {
        steps: tail.len(),
        mean_reward: mean(|r| r.reward.r_total),
        mean_sleep_ratio: mean(|r| r.sleep_ratio),
        violation_ratio: if pairs == 0 { 0.0 } else { violations as f64 / pairs as f64 },
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailSummary {
    pub steps: usize,
    pub mean_reward: f64,
    pub mean_sleep_ratio: f64,
    pub violation_ratio: f64,
}

/// Greedy evaluation over `episodes` fresh environments built by `make_env(episode)`.
pub fn evaluate<E, M>(agent: &Agent, mut make_env: M, episodes: u64, steps: u64, cfg: &TrainConfig) -> Result<EvalSummary>
where
    E: Environment,
    M: FnMut(u64) -> Result<E>,
{
    if episodes == 0 {
        return Err(Error::argument("evaluation needs at least one episode"));
    }
    let mut total = EvalSummary::default();
    for ep in 0..episodes {
        let mut env = make_env(ep)?;
        if env.frame() != *agent.frame() || env.slices() != agent.slices() {
            return Err(Error::config("agent and environment disagree on frame or slice table"));
        }
        let s = rollout(&mut env, &mut Greedy(agent), steps, cfg.lambda_q, cfg.lambda_d)?;
        total = merge(total, s);
    }
    Ok(total)
}

/// Step-weighted combination of two summaries.
pub fn merge(a: EvalSummary, b: EvalSummary) -> EvalSummary {
    let steps = a.steps + b.steps;
    if steps == 0 {
        return a;
    }
    let w = |x: f64, y: f64| (x * a.steps as f64 + y * b.steps as f64) / steps as f64;
    let mut per_slice = a.per_slice.clone();
    for (k, v) in &b.per_slice {
        let e = per_slice.entry(*k).or_default();
        e.violations += v.violations;
        e.pairs += v.pairs;
    }
    let (viol, pairs) = per_slice
        .values()
        .fold((0u64, 0u64), |(v, p), s| (v + s.violations, p + s.pairs));
    EvalSummary {
        steps,
        mean_reward: w(a.mean_reward, b.mean_reward),
        mean_sleep_ratio: w(a.mean_sleep_ratio, b.mean_sleep_ratio),
        violation_ratio: if pairs == 0 { 0.0 } else { viol as f64 / pairs as f64 },
        per_slice,
    }
}
