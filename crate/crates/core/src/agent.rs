//! DQN controller over seed keywords, with the ξ-scaled reward.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlpoError};
use crate::image::Image;
use crate::nn::matrix::norm;
use crate::nn::{optimizer_step, Activation, Algorithm, GradTarget, Matrix, MlpParams, OptimizerConfig, OptimizerState};
use crate::probe::ProbeModel;
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Target sync period in agent steps.
    pub update_every: usize,
    pub tau: f64,
    pub grad_clip: Option<f64>,
    pub algorithm: Algorithm,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![64],
            learning_rate: 1e-3,
            gamma: 0.99,
            epsilon: 0.95,
            batch_size: 32,
            buffer_capacity: 100,
            update_every: 4,
            tau: 1.0,
            grad_clip: Some(10.0),
            algorithm: Algorithm::Adam,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(RlpoError::invalid("gamma", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(RlpoError::invalid("epsilon", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(RlpoError::invalid("tau", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(RlpoError::invalid("batch_size", "batch and buffer must be positive"));
        }
        if self.update_every == 0 {
            return Err(RlpoError::invalid("update_every", "must be >= 1"));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerConfig {
        let mut o = match self.algorithm {
            Algorithm::Sgd => OptimizerConfig::sgd(self.learning_rate),
            Algorithm::Adam => OptimizerConfig::adam(self.learning_rate),
        };
        o.clip_norm = self.grad_clip;
        o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNets {
    pub online: MlpParams,
    pub target: MlpParams,
    pub optimizer: OptimizerState,
    pub config: AgentConfig,
}

impl QNets {
    pub fn init(state_dim: usize, actions: usize, config: &AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if actions == 0 {
            return Err(RlpoError::invalid("actions", "action space is empty"));
        }
        let mut dims = vec![state_dim];
        dims.extend(&config.hidden);
        dims.push(actions);
        let online = MlpParams::init(&dims, Activation::Relu, &mut rng_for(seed, &[0x0a9e]))?;
        Ok(QNets {
            target: online.clone(),
            online,
            optimizer: OptimizerState::default(),
            config: config.clone(),
        })
    }

    pub fn from_params(online: MlpParams, config: &AgentConfig) -> Result<Self> {
        config.validate()?;
        online.validate()?;
        Ok(QNets {
            target: online.clone(),
            online,
            optimizer: OptimizerState::default(),
            config: config.clone(),
        })
    }

    pub fn actions(&self) -> usize {
        self.online.output_dim()
    }

    pub fn q_values(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.online.input_dim() {
            return Err(RlpoError::shape("agent state", self.online.input_dim(), s.len()));
        }
        Ok(self.online.forward_vec(s, None)?.output().data.clone())
    }
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// ε-greedy: uniform random action with probability `epsilon`, otherwise the
/// greedy action.
pub fn select_action(qnets: &QNets, s: &[f64], epsilon: f64, seed: u64) -> Result<usize> {
    let n = qnets.actions();
    if n == 0 {
        return Err(RlpoError::invalid("actions", "action space is empty"));
    }
    let q = qnets.q_values(s)?;
    let mut rng = rng_for(seed, &[0xe95e]);
    if rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..n));
    }
    Ok(argmax(&q).expect("non-empty"))
}

pub fn compute_reward(ts1: f64, ts2: f64, xi: f64) -> f64 {
    xi * ts1.max(ts2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiRule {
    /// `ξ ← min(1, ξ + δ)`.
    Additive,
    /// `ξ ← max(ξ, min(1, (ξ + 1) / T))`.
    Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiTracker {
    pub xi: BTreeMap<String, f64>,
    pub xi_init: f64,
    pub delta: f64,
    pub rule: XiRule,
    pub horizon: usize,
}

impl XiTracker {
    /// Every keyword starts at `xi_init`; the additive increment is `1/horizon`.
    pub fn new(keywords: &[String], xi_init: f64, horizon: usize, rule: XiRule) -> Result<Self> {
        if horizon == 0 {
            return Err(RlpoError::invalid("horizon", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&xi_init) {
            return Err(RlpoError::invalid("xi_init", "must lie in [0, 1]"));
        }
        Ok(XiTracker {
            xi: keywords.iter().map(|k| (k.clone(), xi_init)).collect(),
            xi_init,
            delta: 1.0 / horizon as f64,
            rule,
            horizon,
        })
    }

    pub fn get(&self, keyword: &str) -> Result<f64> {
        self.xi
            .get(keyword)
            .copied()
            .ok_or_else(|| RlpoError::UnknownKeyword(keyword.into()))
    }

    /// Returns the new ξ for `keyword`.
    pub fn update(&mut self, keyword: &str, reached_explainable: bool) -> Result<f64> {
        let (rule, delta, horizon) = (self.rule, self.delta, self.horizon as f64);
        let xi = self
            .xi
            .get_mut(keyword)
            .ok_or_else(|| RlpoError::UnknownKeyword(keyword.into()))?;
        *xi = if reached_explainable {
            1.0
        } else {
            match rule {
                XiRule::Additive => (*xi + delta).min(1.0),
                XiRule::Ratio => xi.max(((*xi + 1.0) / horizon).min(1.0)),
            }
        };
        Ok(*xi)
    }
}

pub fn update_xi(tracker: &mut XiTracker, keyword: &str, reached_explainable: bool) -> Result<f64> {
    tracker.update(keyword, reached_explainable)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
}

/// Bounded FIFO of transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One gradient step on the online net over a uniformly sampled minibatch
/// (without replacement). `None` while the buffer is smaller than a batch.
pub fn q_learn_step(qnets: &mut QNets, buffer: &ReplayBuffer, seed: u64) -> Result<Option<f64>> {
    let n = qnets.config.batch_size;
    if buffer.len() < n {
        return Ok(None);
    }
    let idx = sample(&mut rng_for(seed, &[0x9d1e]), buffer.len(), n).into_vec();
    let batch: Vec<&Transition> = idx.iter().map(|&i| &buffer.items[i]).collect();
    let actions = qnets.actions();
    if let Some(t) = batch.iter().find(|t| t.a >= actions) {
        return Err(RlpoError::invalid("action", format!("{} >= {actions}", t.a)));
    }
    let s = Matrix::from_rows(&batch.iter().map(|t| t.s.clone()).collect::<Vec<_>>())?;
    let s_next = Matrix::from_rows(&batch.iter().map(|t| t.s_next.clone()).collect::<Vec<_>>())?;
    let q_next = qnets.target.predict(&s_next, None)?;
    let trace = qnets.online.forward(&s, None)?;
    let q = trace.output();
    let mut up = Matrix::zeros(n, actions);
    let mut loss = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let max_next = q_next.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let y = t.r + qnets.config.gamma * max_next;
        let diff = q.get(i, t.a) - y;
        loss += diff * diff / n as f64;
        up.row_mut(i)[t.a] = 2.0 * diff / n as f64;
    }
    if !loss.is_finite() {
        return Err(RlpoError::NonFinite("Q-learning loss".into()));
    }
    let g = qnets.online.backward(None, &trace, &up, GradTarget::AllParams)?;
    let mut flat = qnets.online.to_flat();
    optimizer_step(&mut flat, &g.layers_flat(), &mut qnets.optimizer, &qnets.config.optimizer())?;
    qnets.online.set_flat(&flat)?;
    Ok(Some(loss))
}

/// `θ' ← τθ + (1 − τ)θ'`; `τ = 1` copies exactly.
pub fn sync_target(qnets: &mut QNets) {
    let tau = qnets.config.tau;
    if tau == 1.0 {
        qnets.target = qnets.online.clone();
        return;
    }
    let online = qnets.online.to_flat();
    let mut target = qnets.target.to_flat();
    for (t, o) in target.iter_mut().zip(&online) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    qnets.target.set_flat(&target).expect("online and target share a shape");
}

/// L2-normalized mean layer-`l` activation of a group; all-zero means stay zero.
pub fn encode_state(probe: &ProbeModel, group: &[Image]) -> Result<Vec<f64>> {
    if group.is_empty() {
        return Err(RlpoError::invalid("group", "preferred group is empty"));
    }
    let acts = probe.activations(group)?;
    let mut mean = vec![0.0; acts.cols];
    for r in 0..acts.rows {
        for (m, v) in mean.iter_mut().zip(acts.row(r)) {
            *m += v / acts.rows as f64;
        }
    }
    let n = norm(&mean);
    if n > 0.0 {
        mean.iter_mut().for_each(|v| *v /= n);
    }
    Ok(mean)
}
