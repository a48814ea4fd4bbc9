//! Advantage actor-critic training with knowledge-graph intrinsic reward.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::autodiff::{Grads, ParamStore, ShapeMismatch, Tape, Tensor, Var};
use crate::engine::{EnvState, GameSpec, Observation};
use crate::kgstate::{KgTracker, KnowledgeGraph};
use crate::policy::{ActionChoice, Carry, Decode, Noise, Policy, PolicyConfig, StepInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImMode {
    GameOnly,
    GameAndIm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub template_coef: f64,
    pub object_coef: f64,
    /// Transitions collected before a flush.
    pub buffer_size: usize,
    /// Transitions per gradient step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub total_steps: u64,
    pub envs: usize,
    pub im_mode: ImMode,
    pub im_coef: f64,
    /// Episodes are cut after this many steps and bootstrapped from the
    /// critic.
    pub max_episode_steps: u32,
    pub seed: u64,
    /// Stop once an episode scores at least this much.
    pub stop_at_score: Option<i64>,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            entropy_coef: 0.03,
            value_coef: 9.0,
            template_coef: 3.0,
            object_coef: 9.0,
            buffer_size: 40,
            batch_size: 16,
            learning_rate: 0.003,
            grad_clip: 40.0,
            total_steps: 100_000,
            envs: 4,
            im_mode: ImMode::GameAndIm,
            im_coef: 0.1,
            max_episode_steps: 100,
            seed: 0,
            stop_at_score: None,
            checkpoint_every: 0,
            policy: PolicyConfig::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown setting `{0}`")]
    Unknown(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl TrainConfig {
    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.trim().parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            })
        }
        let v = value.trim();
        match key.trim() {
            "gamma" => self.gamma = parse(key, v)?,
            "entropy_coef" => self.entropy_coef = parse(key, v)?,
            "value_coef" => self.value_coef = parse(key, v)?,
            "template_coef" => self.template_coef = parse(key, v)?,
            "object_coef" => self.object_coef = parse(key, v)?,
            "buffer_size" => self.buffer_size = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "total_steps" | "steps" => self.total_steps = parse(key, v)?,
            "envs" => self.envs = parse(key, v)?,
            "im_mode" => {
                self.im_mode = match v {
                    "game_only" => ImMode::GameOnly,
                    "game_and_im" => ImMode::GameAndIm,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                        })
                    }
                }
            }
            "im_coef" => self.im_coef = parse(key, v)?,
            "max_episode_steps" => self.max_episode_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "stop_at_score" => self.stop_at_score = if v == "none" { None } else { Some(parse(key, v)?) },
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "d_text" => self.policy.d_text = parse(key, v)?,
            "d_emb" => self.policy.d_emb = parse(key, v)?,
            "d_sub" => self.policy.d_sub = parse(key, v)?,
            "heads" => self.policy.heads = parse(key, v)?,
            "graph_dropout" => self.policy.graph_dropout = parse(key, v)?,
            "mask_dropout" => self.policy.mask_dropout = parse(key, v)?,
            other => return Err(ConfigError::Unknown(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        let coefs = [self.entropy_coef, self.value_coef, self.template_coef, self.object_coef, self.im_coef];
        if coefs.iter().any(|c| c.is_nan() || *c < 0.0) {
            return bad("coefficients must be non-negative");
        }
        if self.learning_rate < 0.0 || self.grad_clip <= 0.0 {
            return bad("learning_rate must be >= 0 and grad_clip > 0");
        }
        if self.buffer_size == 0 || self.batch_size == 0 || self.envs == 0 || self.max_episode_steps == 0 {
            return bad("buffer_size, batch_size, envs and max_episode_steps must be positive");
        }
        let p = &self.policy;
        if p.d_text == 0 || p.d_emb == 0 || p.d_sub == 0 || p.heads == 0 {
            return bad("network sizes must be positive");
        }
        if !(0.0..1.0).contains(&p.graph_dropout) || !(0.0..1.0).contains(&p.mask_dropout) {
            return bad("dropout rates must be in [0, 1)");
        }
        Ok(())
    }
}

/// `r_IM = |kg_t \ kg_global|` and the grown global graph.
pub fn im_reward(kg_global: &KnowledgeGraph, kg_t: &KnowledgeGraph) -> (u32, KnowledgeGraph) {
    let count = kg_t.iter().filter(|t| !kg_global.contains(t)).count() as u32;
    let mut global = kg_global.clone();
    global.union_with(kg_t);
    (count, global)
}

/// `r_game + λ·r_IM` in game_and_im mode, `r_game` otherwise.
pub fn shaped_reward(mode: ImMode, im_coef: f64, game: i64, im: u32) -> f64 {
    match mode {
        ImMode::GameOnly => game as f64,
        ImMode::GameAndIm => game as f64 + im_coef * f64::from(im),
    }
}

/// Discounted returns `R_t = r_t + γ R_{t+1}` seeded with `bootstrap`, and
/// advantages `R_t − V_t`.
pub fn compute_returns(rewards: &[f64], values: &[f64], gamma: f64, bootstrap: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "one value per reward");
    let mut returns = vec![0.0; rewards.len()];
    let mut next = bootstrap;
    for t in (0..rewards.len()).rev() {
        next = rewards[t] + gamma * next;
        returns[t] = next;
    }
    let adv = returns.iter().zip(values).map(|(r, v)| r - v).collect();
    (returns, adv)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..g.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Everything needed to replay one decision.
#[derive(Debug, Clone)]
pub struct Transition {
    pub env: usize,
    pub obs: Observation,
    pub carry: Carry,
    pub graph: KnowledgeGraph,
    pub noise: Noise,
    pub choice: ActionChoice,
    pub valid: Vec<ActionChoice>,
    pub reward: f64,
    pub game_reward: i64,
    pub im_reward: u32,
    pub done: bool,
}

/// Transitions awaiting a flush, with their returns once computed.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub capacity: usize,
    pub transitions: Vec<Transition>,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            transitions: Vec::with_capacity(capacity),
        }
    }

    pub fn is_full(&self) -> bool {
        self.transitions.len() >= self.capacity
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Averaged loss terms of one minibatch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossReport {
    /// Advantage-weighted negative log-likelihood of the taken action.
    pub actor: f64,
    /// Cross-entropy of the template decoder against the valid templates.
    pub template: f64,
    /// Summed cross-entropy of the object decoding steps against the valid
    /// fillers.
    pub object: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Builds the loss of a minibatch on `tape`:
/// `actor + c_T·L_T + c_O·L_O + c_V·L_V − c_H·H`, each term averaged over
/// the transitions. Advantages use the replayed critic value as a
/// constant.
pub fn batch_loss(
    policy: &Policy,
    tape: &mut Tape,
    batch: &[Transition],
    returns: &[f64],
    config: &TrainConfig,
) -> Result<(Var, LossReport), ShapeMismatch> {
    let n = batch.len().max(1) as f64;
    let mut terms: Vec<Var> = Vec::with_capacity(5 * batch.len());
    let mut report = LossReport::default();
    for (tr, &ret) in batch.iter().zip(returns) {
        let input = StepInput {
            obs: &tr.obs,
            carry: &tr.carry,
            graph: &tr.graph,
        };
        let out = policy.forward(tape, input, tr.noise, Decode::Given(&tr.choice))?;
        let adv = ret - tape.value(out.value).item();

        let logp = match out.object_log_prob {
            Some(lo) => tape.add(out.template_log_prob, lo)?,
            None => out.template_log_prob,
        };
        report.actor += -adv * tape.value(logp).item() / n;
        terms.push(tape.scale(logp, -adv / n));

        let (lt, lo) = policy.supervised_losses(tape, &out, &tr.valid)?;
        if let Some(lt) = lt {
            report.template += tape.value(lt).item() / n;
            terms.push(tape.scale(lt, config.template_coef / n));
        }
        if let Some(lo) = lo {
            report.object += tape.value(lo).item() / n;
            terms.push(tape.scale(lo, config.object_coef / n));
        }

        let target = tape.constant(Tensor::scalar(ret));
        let diff = tape.sub(out.value, target)?;
        let sq = tape.mul(diff, diff)?;
        report.value += tape.value(sq).item() / n;
        terms.push(tape.scale(sq, config.value_coef / n));

        if let Some(h) = policy.valid_action_entropy(tape, &out, &tr.valid)? {
            report.entropy += tape.value(h).item() / n;
            terms.push(tape.scale(h, -config.entropy_coef / n));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    report.total = report.actor
        + config.template_coef * report.template
        + config.object_coef * report.object
        + config.value_coef * report.value
        - config.entropy_coef * report.entropy;
    Ok((total, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub episode_score_mean100: f64,
    pub max_score_seen: i64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,episode_score_mean100,max_score_seen\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.episode_score_mean100, p.max_score_seen));
    }
    out
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at update {update}: {report}")]
    Divergence { update: u64, report: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub curve: Vec<CurvePoint>,
    pub steps: u64,
    pub updates: u64,
    pub episodes: u64,
    /// Environment step at which `stop_at_score` was reached.
    pub reached_at: Option<u64>,
    pub max_score_seen: i64,
    pub flushes: Vec<FlushRecord>,
}

/// One buffer flush: the step it happened at, its size, and whether an
/// episode ended on that tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlushRecord {
    pub step: u64,
    pub size: usize,
    pub episode_end: bool,
}

struct Env {
    state: EnvState,
    obs: Observation,
    tracker: KgTracker,
    carry: Carry,
    kg_global: KnowledgeGraph,
    t: u32,
}

impl Env {
    fn start(spec: &GameSpec, seed: u64, d_text: usize) -> Self {
        let (state, obs) = spec.reset(seed);
        let mut tracker = KgTracker::new(spec);
        tracker.observe(&obs, 0);
        let kg_global = tracker.graph().clone();
        Self {
            state,
            obs,
            tracker,
            carry: Carry::zeros(d_text),
            kg_global,
            t: 0,
        }
    }
}

fn value_of(policy: &Policy, env: &Env) -> Result<f64, ShapeMismatch> {
    let mut tape = Tape::new(&policy.store);
    let input = StepInput {
        obs: &env.obs,
        carry: &env.carry,
        graph: env.tracker.graph(),
    };
    let out = policy.forward(&mut tape, input, Noise::none(), Decode::Greedy)?;
    Ok(out.trace.value)
}

pub fn train(spec: &GameSpec, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(spec, config, None, &mut |_, _| {})
}

/// Trains from `init` (or a fresh policy seeded by `config.seed`), calling
/// `on_checkpoint(step, policy)` every `checkpoint_every` steps.
pub fn train_with(
    spec: &GameSpec,
    config: &TrainConfig,
    init: Option<Policy>,
    on_checkpoint: &mut dyn FnMut(u64, &Policy),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut policy = init.unwrap_or_else(|| Policy::new(spec, config.policy.clone(), config.seed));
    let mut adam = Adam::new(&policy.store, config.learning_rate);
    let mut act_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let d_text = policy.config.d_text;
    let mut envs: Vec<Env> = (0..config.envs).map(|_| Env::start(spec, config.seed, d_text)).collect();
    let mut buffer = RolloutBuffer::new(config.buffer_size);
    let mut recent: VecDeque<i64> = VecDeque::with_capacity(100);
    let mut curve = Vec::new();
    let (mut steps, mut updates, mut episodes) = (0u64, 0u64, 0u64);
    let mut max_score_seen = 0i64;
    let mut reached_at = None;
    let mut flushes = Vec::new();

    'outer: while steps < config.total_steps {
        // One synchronous tick over the environments.
        let mut ended: Vec<(usize, bool)> = Vec::new();
        for (e, env) in envs.iter_mut().enumerate() {
            if steps >= config.total_steps {
                break;
            }
            let noise = Noise::training(noise_rng.gen());
            let valid: Vec<ActionChoice> = spec
                .valid_actions(&env.state)
                .iter()
                .filter_map(|a| policy.choice_for(a))
                .collect();
            let (choice, action, carry) = {
                let mut tape = Tape::new(&policy.store);
                let input = StepInput {
                    obs: &env.obs,
                    carry: &env.carry,
                    graph: env.tracker.graph(),
                };
                let out = policy.forward(&mut tape, input, noise, Decode::Sample(&mut act_rng))?;
                (out.choice, out.action, out.carry)
            };
            let graph = env.tracker.graph().clone();
            let (state, obs, done) = spec.step(&env.state, &action);
            env.t += 1;
            env.tracker.observe(&obs, env.t);
            let (r_im, global) = im_reward(&env.kg_global, env.tracker.graph());
            env.kg_global = global;
            let game_reward = obs.reward;
            let reward = shaped_reward(config.im_mode, config.im_coef, game_reward, r_im);
            let truncated = !done && env.t >= config.max_episode_steps;
            buffer.transitions.push(Transition {
                env: e,
                obs: std::mem::replace(&mut env.obs, obs),
                carry: std::mem::replace(&mut env.carry, carry),
                graph,
                noise,
                choice,
                valid,
                reward,
                game_reward,
                im_reward: r_im,
                done,
            });
            env.state = state;
            steps += 1;
            if done || truncated {
                ended.push((e, done));
                let score = env.state.score;
                max_score_seen = max_score_seen.max(score);
                episodes += 1;
                if recent.len() == 100 {
                    recent.pop_front();
                }
                recent.push_back(score);
                curve.push(CurvePoint {
                    step: steps,
                    episode_score_mean100: recent.iter().sum::<i64>() as f64 / recent.len() as f64,
                    max_score_seen,
                });
                if config.stop_at_score.is_some_and(|s| score >= s) && reached_at.is_none() {
                    reached_at = Some(steps);
                }
            }
            if config.checkpoint_every > 0 && steps % config.checkpoint_every == 0 {
                on_checkpoint(steps, &policy);
            }
        }
        if buffer.is_full() || !ended.is_empty() || steps >= config.total_steps || reached_at.is_some() {
            let size = flush(&mut policy, &mut adam, &mut buffer, &envs, &ended, config, &mut updates)?;
            flushes.push(FlushRecord {
                step: steps,
                size,
                episode_end: !ended.is_empty(),
            });
            for &(e, _) in &ended {
                envs[e] = Env::start(spec, config.seed, d_text);
            }
        }
        if reached_at.is_some() {
            break 'outer;
        }
    }
    Ok(TrainOutcome {
        policy,
        curve,
        steps,
        updates,
        episodes,
        reached_at,
        max_score_seen,
        flushes,
    })
}

fn flush(
    policy: &mut Policy,
    adam: &mut Adam,
    buffer: &mut RolloutBuffer,
    envs: &[Env],
    ended: &[(usize, bool)],
    config: &TrainConfig,
    updates: &mut u64,
) -> Result<usize, TrainError> {
    if buffer.is_empty() {
        return Ok(0);
    }
    let transitions = std::mem::take(&mut buffer.transitions);
    let mut returns = vec![0.0; transitions.len()];
    for (e, env) in envs.iter().enumerate() {
        let idx: Vec<usize> = (0..transitions.len()).filter(|&i| transitions[i].env == e).collect();
        if idx.is_empty() {
            continue;
        }
        let terminal = ended.iter().any(|&(x, done)| x == e && done);
        let bootstrap = if terminal { 0.0 } else { value_of(policy, env)? };
        let rewards: Vec<f64> = idx.iter().map(|&i| transitions[i].reward).collect();
        let (r, _) = compute_returns(&rewards, &vec![0.0; rewards.len()], config.gamma, bootstrap);
        for (k, &i) in idx.iter().enumerate() {
            returns[i] = r[k];
        }
    }
    for start in (0..transitions.len()).step_by(config.batch_size) {
        let end = (start + config.batch_size).min(transitions.len());
        update(policy, adam, &transitions[start..end], &returns[start..end], config, *updates)?;
        *updates += 1;
    }
    Ok(transitions.len())
}

/// One clipped Adam step on the loss of `batch`.
pub fn update(
    policy: &mut Policy,
    adam: &mut Adam,
    batch: &[Transition],
    returns: &[f64],
    config: &TrainConfig,
    index: u64,
) -> Result<LossReport, TrainError> {
    let mut grads = Grads::new(&policy.store);
    let report = {
        let mut tape = Tape::new(&policy.store);
        let (loss, report) = batch_loss(policy, &mut tape, batch, returns, config)?;
        if !tape.value(loss).item().is_finite() {
            return Err(divergence(policy, index, &report, batch, returns));
        }
        tape.backward(loss, &mut grads);
        report
    };
    if !grads.is_finite() {
        return Err(divergence(policy, index, &report, batch, returns));
    }
    grads.clip_norm(config.grad_clip);
    adam.step(&mut policy.store, &grads);
    Ok(report)
}

fn divergence(policy: &Policy, update: u64, report: &LossReport, batch: &[Transition], returns: &[f64]) -> TrainError {
    let dump = json!({
        "loss": report,
        "batch": batch.iter().zip(returns).map(|(t, r)| json!({
            "env": t.env,
            "obs": t.obs,
            "action": policy.action_text(&t.choice),
            "choice": t.choice,
            "reward": t.reward,
            "return": r,
            "graph": t.graph.iter().map(|x| x.to_tsv()).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    });
    log::error!("non-finite loss at update {update}");
    TrainError::Divergence {
        update,
        report: dump.to_string(),
    }
}
