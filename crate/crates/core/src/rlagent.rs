//! Soft actor-critic over features of a frozen pre-trained encoder.
//!
//! Pixel transitions are stored in a FIFO replay. Every update re-encodes a
//! randomly shifted minibatch with the frozen encoder, adds the kNN
//! exploration bonus computed from prototype-selected projections, and
//! performs one critic step. Actor, temperature and critic-target updates
//! run on their own periods.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::envsuite::{uniform_action, DomainSpec, Environment, FrameStack};
use crate::error::{Error, Result};
use crate::intrinsic::{augment_reward, knn_reward, update_q, ProjectionSet};
use crate::ndmath::layers::{self, bind, Bound};
use crate::ndmath::{ema_update, l2_normalize_rows, Adam, Checkpoint, Graph, ParamSet, Scalar, Tensor, Var};
use crate::protolearn::{augment_shift, EncoderStack, PrototypeBank};
use crate::seeds;

#[derive(Clone, Debug, PartialEq)]
pub struct RlConfig {
    pub discount: f64,
    pub replay_capacity: usize,
    pub batch: usize,
    pub init_temperature: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub temperature_lr: f64,
    pub actor_update_every: usize,
    pub critic_target_every: usize,
    pub critic_target_ema: f64,
    /// Environment frames of interaction (action repeats included).
    pub env_steps: usize,
    /// Leading frames acted with uniform random actions.
    pub seed_steps: usize,
    pub beta: f64,
    pub knn_k: usize,
    pub q_capacity: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub shift_pad: usize,
    /// Evaluate every this many frames (0 = only at the end).
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl RlConfig {
    pub fn desk() -> Self {
        Self {
            discount: 0.99,
            replay_capacity: 40_000,
            batch: 64,
            init_temperature: 0.1,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            temperature_lr: 1e-3,
            actor_update_every: 2,
            critic_target_every: 2,
            critic_target_ema: 0.01,
            env_steps: 30_000,
            seed_steps: 1_000,
            beta: 0.2,
            knn_k: 3,
            q_capacity: 2048,
            feature_dim: 50,
            hidden: 256,
            log_std_min: -10.0,
            log_std_max: 2.0,
            shift_pad: 2,
            eval_every: 5_000,
            eval_episodes: 10,
        }
    }

    pub fn paper() -> Self {
        Self {
            batch: 512,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            temperature_lr: 1e-4,
            env_steps: 500_000,
            seed_steps: 4_000,
            hidden: 1024,
            shift_pad: 4,
            eval_every: 10_000,
            ..Self::desk()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.discount > 0.0 && self.discount < 1.0) {
            bad.push(format!("discount must lie in (0, 1), got {}", self.discount));
        }
        if self.replay_capacity == 0 || self.batch == 0 || self.q_capacity == 0 {
            bad.push("replay capacity, batch size and Q capacity must be positive".into());
        }
        if !(self.init_temperature > 0.0) {
            bad.push(format!("initial temperature must be positive, got {}", self.init_temperature));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.temperature_lr > 0.0) {
            bad.push("learning rates must be positive".into());
        }
        if self.actor_update_every == 0 || self.critic_target_every == 0 {
            bad.push("update periods must be positive".into());
        }
        if !(self.critic_target_ema > 0.0 && self.critic_target_ema <= 1.0) {
            bad.push(format!("critic target EMA must lie in (0, 1], got {}", self.critic_target_ema));
        }
        if !(self.beta >= 0.0) {
            bad.push(format!("exploration coefficient must be non-negative, got {}", self.beta));
        }
        if self.knn_k == 0 {
            bad.push("kNN k must be positive".into());
        }
        if self.feature_dim == 0 || self.hidden == 0 {
            bad.push("feature and hidden widths must be positive".into());
        }
        if !(self.log_std_min < self.log_std_max) {
            bad.push("log-std bounds must satisfy min < max".into());
        }
        if self.eval_episodes == 0 {
            bad.push("evaluation needs at least one episode".into());
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(bad))
        }
    }
}

/// Encoded minibatch `(y, a, r + beta * r_hat, y', done)`.
#[derive(Clone, Debug)]
pub struct EncodedBatch<T> {
    pub features: Tensor<T>,
    pub actions: Tensor<T>,
    pub rewards: Vec<f64>,
    pub next_features: Tensor<T>,
    pub terminal: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateLog {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub temperature: f64,
    pub mean_bonus: f64,
}

/// Actor, twin critics, critic targets and the entropy temperature.
///
/// Actor names: `trunk`, `pi0`, `pi1`, `mu`, `log_std`. Critic names:
/// `trunk`, `q{1,2}_{0,1,out}`.
#[derive(Clone, Debug)]
pub struct Agent<T: Scalar> {
    pub cfg: RlConfig,
    pub input_dim: usize,
    pub action_dim: usize,
    pub actor: ParamSet<T>,
    pub critic: ParamSet<T>,
    pub critic_target: ParamSet<T>,
    pub log_temperature: ParamSet<T>,
    opt_actor: Adam<T>,
    opt_critic: Adam<T>,
    opt_temperature: Adam<T>,
    updates: u64,
}

const LOG_TEMP: &str = "log_temperature";
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

fn trunk_on<T: Scalar>(g: &mut Graph<T>, bound: &Bound, y: Var) -> Result<Var> {
    let h = layers::linear(g, bound, "trunk", y)?;
    let h = g.layer_norm_rows(h);
    Ok(g.tanh(h))
}

fn mlp_on<T: Scalar>(g: &mut Graph<T>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = layers::linear(g, bound, &format!("{prefix}0"), x)?;
    let h = g.relu(h);
    let h = layers::linear(g, bound, &format!("{prefix}1"), h)?;
    Ok(g.relu(h))
}

struct PolicyOut {
    action: Var,
    log_prob: Var,
}

impl<T: Scalar> Agent<T> {
    pub fn new(input_dim: usize, action_dim: usize, cfg: &RlConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (f, h) = (cfg.feature_dim, cfg.hidden);
        let mut actor = ParamSet::new();
        layers::init_linear("trunk", input_dim, f, &mut actor, rng)?;
        layers::init_linear("pi0", f, h, &mut actor, rng)?;
        layers::init_linear("pi1", h, h, &mut actor, rng)?;
        layers::init_linear("mu", h, action_dim, &mut actor, rng)?;
        layers::init_linear("log_std", h, action_dim, &mut actor, rng)?;
        let mut critic = ParamSet::new();
        layers::init_linear("trunk", input_dim, f, &mut critic, rng)?;
        for q in ["q1_", "q2_"] {
            layers::init_linear(&format!("{q}0"), f + action_dim, h, &mut critic, rng)?;
            layers::init_linear(&format!("{q}1"), h, h, &mut critic, rng)?;
            layers::init_linear(&format!("{q}out"), h, 1, &mut critic, rng)?;
        }
        let mut log_temperature = ParamSet::new();
        log_temperature.insert(LOG_TEMP, Tensor::scalar(T::lit(cfg.init_temperature.ln())))?;
        Ok(Self {
            opt_actor: Adam::new(&actor, cfg.actor_lr),
            opt_critic: Adam::new(&critic, cfg.critic_lr),
            opt_temperature: Adam::with_betas(&log_temperature, cfg.temperature_lr, 0.5, 0.999),
            critic_target: critic.clone(),
            cfg: cfg.clone(),
            input_dim,
            action_dim,
            actor,
            critic,
            log_temperature,
            updates: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.value(LOG_TEMP).expect("present").data()[0].as_f64().exp()
    }

    pub fn target_entropy(&self) -> f64 {
        -(self.action_dim as f64)
    }

    fn policy_on(&self, g: &mut Graph<T>, bound: &Bound, y: Var, noise: &Tensor<T>) -> Result<PolicyOut> {
        let h = trunk_on(g, bound, y)?;
        let h = mlp_on(g, bound, "pi", h)?;
        let mu = layers::linear(g, bound, "mu", h)?;
        let raw = layers::linear(g, bound, "log_std", h)?;
        let (lo, hi) = (self.cfg.log_std_min, self.cfg.log_std_max);
        let t = g.tanh(raw);
        let t = g.offset(t, 1.0);
        let t = g.scale(t, 0.5 * (hi - lo));
        let log_std = g.offset(t, lo);
        let std = g.exp(log_std);
        let eps = g.input(noise.clone());
        let spread = g.mul(std, eps)?;
        let u = g.add(mu, spread)?;
        let action = g.tanh(u);
        // log N(u; mu, std) - sum log(1 - tanh(u)^2)
        let sq = g.mul(action, action)?;
        let sq = g.scale(sq, -1.0);
        let jac = g.offset(sq, 1.0 + 1e-6);
        let log_jac = g.log(jac, 1e-30);
        let per = g.add(log_std, log_jac)?;
        let per = g.sum_rows(per);
        let consts: Vec<T> = (0..noise.rows())
            .map(|i| {
                let e2: f64 = noise.row(i).iter().map(|e| e.as_f64() * e.as_f64()).sum();
                T::lit(-0.5 * e2 - HALF_LOG_2PI * self.action_dim as f64)
            })
            .collect();
        let c = g.input(Tensor::new(&[noise.rows(), 1], consts)?);
        let log_prob = g.sub(c, per)?;
        Ok(PolicyOut { action, log_prob })
    }

    fn q_pair_on(&self, g: &mut Graph<T>, bound: &Bound, y: Var, a: Var) -> Result<(Var, Var)> {
        let h = trunk_on(g, bound, y)?;
        let ha = g.concat_cols(h, a)?;
        let mut out = Vec::with_capacity(2);
        for q in ["q1_", "q2_"] {
            let x = mlp_on(g, bound, q, ha)?;
            out.push(layers::linear(g, bound, &format!("{q}out"), x)?);
        }
        Ok((out[0], out[1]))
    }

    fn check_features(&self, y: &Tensor<T>) -> Result<()> {
        if y.shape().len() != 2 || y.row_len() != self.input_dim || y.rows() == 0 {
            return Err(Error::shape(format!(
                "features {:?} do not match [B, {}]",
                y.shape(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn noise(&self, rows: usize, rng: &mut impl Rng) -> Tensor<T> {
        Tensor::from_fn(&[rows, self.action_dim], |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
    }

    /// Squashed-Gaussian sample, or the squashed mean when deterministic.
    pub fn act_batch(&self, y: &Tensor<T>, stochastic: bool, rng: &mut impl Rng) -> Result<Tensor<T>> {
        self.check_features(y)?;
        let noise = if stochastic {
            self.noise(y.rows(), rng)
        } else {
            Tensor::zeros(&[y.rows(), self.action_dim])
        };
        let mut g = Graph::new();
        let bound = bind(&mut g, &self.actor, false);
        let yv = g.input(y.clone());
        let out = self.policy_on(&mut g, &bound, yv, &noise)?;
        Ok(g.value(out.action).clone())
    }

    pub fn act(&self, y: &[T], stochastic: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let t = Tensor::new(&[1, y.len()], y.to_vec())?;
        let a = self.act_batch(&t, stochastic, rng)?;
        Ok(a.data().iter().map(|v| v.as_f64().clamp(-1.0, 1.0)).collect())
    }

    /// Soft Bellman targets `r + gamma * (1 - done) * (min Q' - temp * log pi')`.
    pub fn critic_targets(&self, batch: &EncodedBatch<T>, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let n = batch.next_features.rows();
        let noise = self.noise(n, rng);
        let mut g = Graph::new();
        let actor = bind(&mut g, &self.actor, false);
        let target = bind(&mut g, &self.critic_target, false);
        let yn = g.input(batch.next_features.clone());
        let next = self.policy_on(&mut g, &actor, yn, &noise)?;
        let (q1, q2) = self.q_pair_on(&mut g, &target, yn, next.action)?;
        let q = g.min(q1, q2)?;
        let temp = self.temperature();
        let gamma = self.cfg.discount;
        let (qv, lp) = (g.value(q), g.value(next.log_prob));
        Ok((0..n)
            .map(|i| {
                let cont = if batch.terminal[i] { 0.0 } else { 1.0 };
                batch.rewards[i] + gamma * cont * (qv.data()[i].as_f64() - temp * lp.data()[i].as_f64())
            })
            .collect())
    }

    /// One critic step, plus actor/temperature and target steps on their periods.
    pub fn update(&mut self, batch: &EncodedBatch<T>, rng: &mut impl Rng) -> Result<UpdateLog> {
        let n = batch.features.rows();
        if n == 0 {
            return Err(Error::InsufficientData("empty update batch".into()));
        }
        self.check_features(&batch.features)?;
        self.check_features(&batch.next_features)?;
        if batch.actions.rows() != n
            || batch.actions.row_len() != self.action_dim
            || batch.rewards.len() != n
            || batch.terminal.len() != n
            || batch.next_features.rows() != n
        {
            return Err(Error::shape("encoded batch fields disagree in length"));
        }
        let targets = self.critic_targets(batch, rng)?;
        let critic_loss = self.critic_step(batch, &targets)?;
        let mut log = UpdateLog {
            critic_loss,
            ..Default::default()
        };
        if self.updates % self.cfg.actor_update_every as u64 == 0 {
            log.actor_loss = Some(self.actor_step(&batch.features, rng)?);
        }
        if self.updates % self.cfg.critic_target_every as u64 == 0 {
            ema_update(&mut self.critic_target, &self.critic, self.cfg.critic_target_ema)?;
        }
        self.updates += 1;
        log.temperature = self.temperature();
        Ok(log)
    }

    fn critic_step(&mut self, batch: &EncodedBatch<T>, targets: &[f64]) -> Result<f64> {
        let n = targets.len();
        let mut g = Graph::new();
        let bound = bind(&mut g, &self.critic, true);
        let y = g.input(batch.features.clone());
        let a = g.input(batch.actions.clone());
        let (q1, q2) = self.q_pair_on(&mut g, &bound, y, a)?;
        let t = g.input(Tensor::new(&[n, 1], targets.iter().map(|&v| T::lit(v)).collect())?);
        let mut parts = Vec::with_capacity(2);
        for q in [q1, q2] {
            let d = g.sub(q, t)?;
            let d2 = g.mul(d, d)?;
            parts.push(g.mean_all(d2));
        }
        let loss = g.add(parts[0], parts[1])?;
        let value = g.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("critic loss at update {}", self.updates)));
        }
        let grads = g.backward(loss)?;
        self.critic.zero_grad();
        bound.accumulate(&grads, &mut self.critic)?;
        self.opt_critic.step(&mut self.critic)?;
        Ok(value)
    }

    fn actor_step(&mut self, y: &Tensor<T>, rng: &mut impl Rng) -> Result<f64> {
        let n = y.rows();
        let noise = self.noise(n, rng);
        let temp = self.temperature();
        let mut g = Graph::new();
        let actor = bind(&mut g, &self.actor, true);
        let critic = bind(&mut g, &self.critic, false);
        let yv = g.input(y.clone());
        let pi = self.policy_on(&mut g, &actor, yv, &noise)?;
        let (q1, q2) = self.q_pair_on(&mut g, &critic, yv, pi.action)?;
        let q = g.min(q1, q2)?;
        let tv = g.input(Tensor::scalar(T::lit(temp)));
        let ent = g.mul_scalar(pi.log_prob, tv)?;
        let obj = g.sub(ent, q)?;
        let loss = g.mean_all(obj);
        let value = g.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("actor loss at update {}", self.updates)));
        }
        let grads = g.backward(loss)?;
        self.actor.zero_grad();
        actor.accumulate(&grads, &mut self.actor)?;
        self.opt_actor.step(&mut self.actor)?;

        // d/d(log temp) of mean(temp * (-log pi - target entropy)).
        let lp = g.value(pi.log_prob);
        let gap = lp.data().iter().map(|v| -v.as_f64() - self.target_entropy()).sum::<f64>() / n as f64;
        self.log_temperature.zero_grad();
        self.log_temperature.accumulate(LOG_TEMP, &Tensor::scalar(T::lit(temp * gap)))?;
        self.opt_temperature.step(&mut self.log_temperature)?;
        Ok(value)
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        let meta = vec![self.input_dim as f64, self.action_dim as f64, self.updates as f64];
        ckpt.push_tensor("meta/agent", &Tensor::new(&[3], meta).expect("non-empty"));
        ckpt.push_params("actor/", &self.actor);
        ckpt.push_params("critic/", &self.critic);
        ckpt.push_params("critic_target/", &self.critic_target);
        ckpt.push_params("temperature/", &self.log_temperature);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        self.to_checkpoint(&mut ckpt);
        ckpt.save(path)
    }
}

/// Pixel transition with frames quantized to bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelTransition {
    pub obs: Vec<u8>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<u8>,
    pub terminal: bool,
}

/// FIFO replay; every stored transition carries a unique id.
#[derive(Clone, Debug)]
pub struct Replay {
    capacity: usize,
    items: VecDeque<(u64, PixelTransition)>,
    next_id: u64,
}

impl Replay {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::new(),
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: PixelTransition) -> u64 {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        let id = self.next_id;
        self.next_id += 1;
        self.items.push_back((id, t));
        id
    }

    pub fn get(&self, i: usize) -> (u64, &PixelTransition) {
        let (id, t) = &self.items[i];
        (*id, t)
    }

    /// Uniform indices with replacement.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.items.len() < count || count == 0 {
            return Err(Error::InsufficientData(format!(
                "replay holds {} transitions, batch needs {count}",
                self.items.len()
            )));
        }
        Ok((0..count).map(|_| rng.gen_range(0..self.items.len())).collect())
    }
}

pub fn quantize(stack: &FrameStack) -> Vec<u8> {
    stack
        .frames
        .iter()
        .flatten()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn pixels_to_tensor<T: Scalar>(rows: &[&[u8]], c: usize, size: usize) -> Result<Tensor<T>> {
    let data = rows.iter().flat_map(|r| r.iter()).map(|&b| T::lit(b as f64 / 255.0)).collect();
    Tensor::new(&[rows.len(), c, size, size], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub env_step: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub beta: f64,
    pub seed: u64,
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("env_step,mean_return,std_return,beta,seed\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.env_step, r.mean_return, r.std_return, r.beta, r.seed);
    }
    s
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Returns of `episodes` full episodes, episode `e` reset from stream `eval/{e}`.
pub fn run_episodes(
    spec: &DomainSpec,
    episodes: usize,
    seed: u64,
    mut policy: impl FnMut(&FrameStack) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut env = Environment::new(spec.clone())?;
    (0..episodes)
        .map(|e| {
            let mut obs = env.reset(seeds::derive(seed, &format!("eval/{e}")));
            let mut total = 0.0;
            while !env.episode_done() {
                let a = policy(&obs)?;
                let tr = env.step(&a)?;
                total += tr.reward;
                obs = tr.next_state;
            }
            Ok(total)
        })
        .collect()
}

/// Episode returns of the uniform-random policy.
pub fn random_policy_returns(spec: &DomainSpec, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = seeds::stream(seed, "random-policy");
    run_episodes(spec, episodes, seed, |_| Ok(uniform_action(spec.action_dim, &mut rng)))
}

/// Downstream learner: frozen encoder and prototypes, agent, replay and `Q`.
pub struct Learner<'a, T: Scalar> {
    pub stack: &'a EncoderStack<T>,
    protos: Tensor<T>,
    pub agent: Agent<T>,
    pub replay: Replay,
    pub q: ProjectionSet,
    spec: DomainSpec,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Learner<'a, T> {
    pub fn new(
        spec: &DomainSpec,
        stack: &'a EncoderStack<T>,
        bank: &PrototypeBank<T>,
        cfg: &RlConfig,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let t = &stack.tower;
        if t.in_channels != spec.stacked_channels() || t.input_size != spec.render_size {
            return Err(Error::shape(format!(
                "encoder expects [{}, {}, {}], domain renders [{}, {}, {}]",
                t.in_channels,
                t.input_size,
                t.input_size,
                spec.stacked_channels(),
                spec.render_size,
                spec.render_size
            )));
        }
        if bank.dim() != stack.latent {
            return Err(Error::shape("prototype width differs from the encoder latent width"));
        }
        let mut init = seeds::stream(seed, "rl/init");
        let agent = Agent::new(stack.feature_dim(), spec.action_dim, cfg, &mut init)?;
        Ok(Self {
            stack,
            protos: bank.normalized()?,
            agent,
            replay: Replay::new(cfg.replay_capacity),
            q: ProjectionSet::new(cfg.q_capacity),
            spec: spec.clone(),
            rng: seeds::stream(seed, "rl/updates"),
        })
    }

    fn tensor(&self, rows: &[&[u8]]) -> Result<Tensor<T>> {
        pixels_to_tensor(rows, self.spec.stacked_channels(), self.spec.render_size)
    }

    /// Frozen features of one observation, quantized like replay contents.
    pub fn encode_observation(&self, obs: &FrameStack) -> Result<Tensor<T>> {
        let px = quantize(obs);
        self.stack.features(&self.tensor(&[&px])?)
    }

    /// Sample, shift, re-encode, add the exploration bonus and update.
    pub fn update(&mut self) -> Result<UpdateLog> {
        let cfg = &self.agent.cfg;
        let (batch, pad, beta, k) = (cfg.batch, cfg.shift_pad, cfg.beta, cfg.knn_k);
        let idx = self.replay.sample(batch, &mut self.rng)?;
        let items: Vec<(u64, &PixelTransition)> = idx.iter().map(|&i| self.replay.get(i)).collect();
        let obs: Vec<&[u8]> = items.iter().map(|(_, t)| t.obs.as_slice()).collect();
        let next: Vec<&[u8]> = items.iter().map(|(_, t)| t.next_obs.as_slice()).collect();
        let x = augment_shift(&self.tensor(&obs)?, pad, &mut self.rng)?;
        let xn = augment_shift(&self.tensor(&next)?, pad, &mut self.rng)?;
        let features = self.stack.features(&x)?;
        let next_features = self.stack.features(&xn)?;

        let mut bonus = vec![0.0; batch];
        if beta > 0.0 {
            let z = l2_normalize_rows(&self.stack.project_features(&next_features)?)?;
            let ids: Vec<u64> = items.iter().map(|(id, _)| *id).collect();
            update_q(&mut self.q, &z, &ids, &self.protos)?;
            for (i, b) in bonus.iter_mut().enumerate() {
                let zi: Vec<f64> = z.row(i).iter().map(|v| v.as_f64()).collect();
                *b = knn_reward(&zi, &self.q, k, Some(ids[i]))?;
            }
        }
        let rewards = items
            .iter()
            .zip(&bonus)
            .map(|((_, t), &b)| augment_reward(t.reward, b, beta))
            .collect();
        let actions = Tensor::new(
            &[batch, self.spec.action_dim],
            items.iter().flat_map(|(_, t)| t.action.iter().map(|&a| T::lit(a))).collect(),
        )?;
        let terminal = items.iter().map(|(_, t)| t.terminal).collect();
        let enc = EncodedBatch {
            features,
            actions,
            rewards,
            next_features,
            terminal,
        };
        let mut log = self.agent.update(&enc, &mut self.rng)?;
        log.mean_bonus = bonus.iter().sum::<f64>() / batch as f64;
        Ok(log)
    }

    /// Deterministic-policy returns; never touches the replay.
    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<Vec<f64>> {
        let mut unused = seeds::rng(0);
        run_episodes(&self.spec, episodes, seed, |obs| {
            let y = self.encode_observation(obs)?;
            self.agent.act(y.row(0), false, &mut unused)
        })
    }
}

pub struct Downstream<T: Scalar> {
    pub agent: Agent<T>,
    pub log: Vec<EvalRow>,
}

/// Interact for `cfg.env_steps` frames on `spec` with the frozen encoder.
pub fn train_downstream<T: Scalar>(
    spec: &DomainSpec,
    stack: &EncoderStack<T>,
    bank: &PrototypeBank<T>,
    cfg: &RlConfig,
    seed: u64,
) -> Result<Downstream<T>> {
    let mut learner = Learner::new(spec, stack, bank, cfg, seed)?;
    let mut env = Environment::new(spec.clone())?;
    let mut act_rng = seeds::stream(seed, "rl/actions");
    let eval_seed = seeds::derive(seed, "eval");
    let repeat = spec.action_repeat;
    let agent_steps = cfg.env_steps / repeat;
    let mut episode = 0u64;
    let mut obs = env.reset(seeds::derive(seed, "rl/episode/0"));
    let mut log = Vec::new();
    for t in 0..agent_steps {
        let frames = t * repeat;
        let action = if frames < cfg.seed_steps {
            uniform_action(spec.action_dim, &mut act_rng)
        } else {
            let y = learner.encode_observation(&obs)?;
            learner.agent.act(y.row(0), true, &mut act_rng)?
        };
        let tr = env.step(&action)?;
        learner.replay.push(PixelTransition {
            obs: quantize(&tr.state),
            action: tr.action,
            reward: tr.reward,
            next_obs: quantize(&tr.next_state),
            terminal: tr.terminal,
        });
        obs = tr.next_state;
        if env.episode_done() {
            episode += 1;
            obs = env.reset(seeds::derive(seed, &format!("rl/episode/{episode}")));
        }
        if frames >= cfg.seed_steps && learner.replay.len() >= cfg.batch {
            learner.update()?;
        }
        let done = (t + 1) * repeat;
        if (cfg.eval_every > 0 && done % cfg.eval_every == 0) || t + 1 == agent_steps {
            let returns = learner.evaluate(cfg.eval_episodes, eval_seed)?;
            let (mean_return, std_return) = mean_std(&returns);
            log.push(EvalRow {
                env_step: done,
                mean_return,
                std_return,
                beta: cfg.beta,
                seed,
            });
        }
    }
    Ok(Downstream {
        agent: learner.agent,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::grad_check;
    use crate::protolearn::{init_model, SslConfig};

    fn small_cfg() -> RlConfig {
        RlConfig {
            batch: 8,
            hidden: 16,
            feature_dim: 6,
            ..RlConfig::desk()
        }
    }

    fn agent(action_dim: usize) -> Agent<f64> {
        Agent::new(10, action_dim, &small_cfg(), &mut seeds::rng(3)).unwrap()
    }

    fn batch(n: usize, a: usize, rng: &mut impl Rng) -> EncodedBatch<f64> {
        EncodedBatch {
            features: Tensor::from_fn(&[n, 10], |_| rng.gen_range(-1.0..1.0)),
            actions: Tensor::from_fn(&[n, a], |_| rng.gen_range(-1.0..1.0)),
            rewards: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            next_features: Tensor::from_fn(&[n, 10], |_| rng.gen_range(-1.0..1.0)),
            terminal: vec![false; n],
        }
    }

    #[test]
    fn actions_are_bounded_and_deterministic_mode_repeats() {
        let ag = agent(2);
        let mut rng = seeds::rng(1);
        let y = Tensor::from_fn(&[1, 10], |i| (i as f64 * 0.37).sin() * 5.0);
        let a = ag.act(y.row(0), false, &mut rng).unwrap();
        assert_eq!(a, ag.act(y.row(0), false, &mut rng).unwrap());
        let ys = Tensor::from_fn(&[10_000, 10], |_| rng.gen_range(-20.0..20.0));
        let acts = ag.act_batch(&ys, true, &mut rng).unwrap();
        assert!(acts.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zero_mean_head_gives_zero_action() {
        let mut ag = agent(2);
        for name in ["mu.w", "mu.b"] {
            ag.actor.get_mut(name).unwrap().value.fill(0.0);
        }
        let a = ag.act(&[0.3; 10], false, &mut seeds::rng(0)).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
        assert_eq!(ag.target_entropy(), -2.0);
    }

    #[test]
    fn zero_discount_targets_equal_rewards() {
        let mut rng = seeds::rng(5);
        let mut ag = agent(1);
        ag.cfg.discount = 1e-300;
        let mut b = batch(6, 1, &mut rng);
        b.terminal = vec![true; 6];
        assert_eq!(ag.critic_targets(&b, &mut rng).unwrap(), b.rewards);
        b.rewards = vec![0.0; 6];
        assert!(ag.critic_targets(&b, &mut rng).unwrap().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn log_prob_matches_closed_form() {
        let ag = agent(2);
        let mut rng = seeds::rng(9);
        let y = Tensor::from_fn(&[4, 10], |_| rng.gen_range(-1.0..1.0));
        let noise = ag.noise(4, &mut rng);
        let mut g = Graph::new();
        let b = bind(&mut g, &ag.actor, false);
        let yv = g.input(y.clone());
        let out = ag.policy_on(&mut g, &b, yv, &noise).unwrap();
        // Recompute mean and log-std directly.
        let mut g2 = Graph::new();
        let b2 = bind(&mut g2, &ag.actor, false);
        let yv2 = g2.input(y);
        let h = trunk_on(&mut g2, &b2, yv2).unwrap();
        let h = mlp_on(&mut g2, &b2, "pi", h).unwrap();
        let mu = layers::linear(&mut g2, &b2, "mu", h).unwrap();
        let raw = layers::linear(&mut g2, &b2, "log_std", h).unwrap();
        for i in 0..4 {
            let mut lp = 0.0;
            for j in 0..2 {
                let m = g2.value(mu).at(i, j);
                let ls = -10.0 + 6.0 * (g2.value(raw).at(i, j).tanh() + 1.0);
                let e = noise.at(i, j);
                let u = m + ls.exp() * e;
                lp += -0.5 * e * e - ls - HALF_LOG_2PI - (1.0 - u.tanh().powi(2) + 1e-6).ln();
                assert!((g.value(out.action).at(i, j) - u.tanh()).abs() < 1e-12);
            }
            assert!((g.value(out.log_prob).at(i, 0) - lp).abs() < 1e-9);
        }
    }

    #[test]
    fn critic_loss_gradients_match_finite_differences() {
        let mut rng = seeds::rng(11);
        let ag = agent(2);
        let b = batch(5, 2, &mut rng);
        let targets: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = ag.critic.clone();
        let err = grad_check(&params, 1e-6, |p, want| {
            let mut g = Graph::new();
            let bound = bind(&mut g, p, want);
            let y = g.input(b.features.clone());
            let a = g.input(b.actions.clone());
            let (q1, q2) = ag.q_pair_on(&mut g, &bound, y, a)?;
            let t = g.input(Tensor::new(&[5, 1], targets.clone())?);
            let d1 = g.sub(q1, t)?;
            let d2 = g.sub(q2, t)?;
            let s1 = g.mul(d1, d1)?;
            let s2 = g.mul(d2, d2)?;
            let (m1, m2) = (g.mean_all(s1), g.mean_all(s2));
            let loss = g.add(m1, m2)?;
            if want {
                let grads = g.backward(loss)?;
                p.zero_grad();
                bound.accumulate(&grads, p)?;
            }
            Ok(g.scalar(loss))
        })
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn updates_move_parameters_on_schedule() {
        let mut rng = seeds::rng(2);
        let mut ag = agent(1);
        let b = batch(8, 1, &mut rng);
        let (actor0, target0) = (ag.actor.clone(), ag.critic_target.clone());
        let log = ag.update(&b, &mut rng).unwrap();
        assert!(log.actor_loss.is_some());
        assert!(ag.actor != actor0 && ag.critic_target != target0);
        let (actor1, target1) = (ag.actor.clone(), ag.critic_target.clone());
        let log = ag.update(&b, &mut rng).unwrap();
        assert!(log.actor_loss.is_none());
        assert!(ag.actor == actor1 && ag.critic_target == target1);
        assert!(log.critic_loss.is_finite());
    }

    #[test]
    fn replay_is_fifo_and_checks_size() {
        let mut r = Replay::new(3);
        let t = PixelTransition {
            obs: vec![0],
            action: vec![0.0],
            reward: 0.0,
            next_obs: vec![0],
            terminal: false,
        };
        for _ in 0..5 {
            r.push(t.clone());
        }
        assert_eq!(r.len(), 3);
        assert_eq!(r.get(0).0, 2);
        assert!(matches!(r.sample(4, &mut seeds::rng(0)), Err(Error::InsufficientData(_))));
    }

    fn tiny_model() -> (EncoderStack<f32>, PrototypeBank<f32>) {
        let cfg = SslConfig {
            prototypes: 8,
            latent: 8,
            predictor_hidden: 8,
            conv_channels: vec![4],
            conv_strides: vec![2],
            ..SslConfig::desk()
        };
        init_model(&cfg, 3, 32, 4).unwrap()
    }

    #[test]
    fn no_steps_means_no_log_and_encoder_stays_frozen() {
        let (stack, bank) = tiny_model();
        let before = stack.clone();
        let spec = DomainSpec::desk("pendulum").unwrap();
        let cfg = RlConfig {
            env_steps: 0,
            ..small_cfg()
        };
        let out = train_downstream(&spec, &stack, &bank, &cfg, 1).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.agent.updates(), 0);

        let cfg = RlConfig {
            env_steps: 120,
            seed_steps: 40,
            eval_every: 0,
            eval_episodes: 1,
            ..small_cfg()
        };
        let out = train_downstream(&spec, &stack, &bank, &cfg, 1).unwrap();
        assert!(out.agent.updates() > 0);
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].env_step, 120);
        assert_eq!(stack, before);
        assert_eq!(bank.raw().data(), tiny_model().1.raw().data());
    }

    #[test]
    fn evaluation_leaves_replay_alone() {
        let (stack, bank) = tiny_model();
        let spec = DomainSpec::desk("pendulum").unwrap();
        let learner = Learner::new(&spec, &stack, &bank, &small_cfg(), 0).unwrap();
        let a = learner.evaluate(2, 3).unwrap();
        assert_eq!(a, learner.evaluate(2, 3).unwrap());
        assert!(learner.replay.is_empty());
    }
}
