//! Exit decisions: the variance threshold rule and a learned two-layer gate
//! trained with policy gradients.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{adam_step, softmax_temperature, AdamConfig, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Dense, Group, ParamStore};
use crate::scalar::Scalar;

pub const GATE_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Exit,
    Continue,
}

impl Action {
    /// Column of the action in the gate's logits.
    pub fn index(self) -> usize {
        match self {
            Action::Exit => 0,
            Action::Continue => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecideMode {
    Sample,
    Argmax,
}

/// Reading of the `l * GFLOPs` reward term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// `l` times the per-loop cost.
    #[default]
    Cumulative,
    /// Only the cost of the current loop (zero at loop 0).
    Marginal,
}

/// `CONTINUE` iff `mean_var > tau_var` and `l < l_max`.
pub fn threshold_gate(mean_var: f64, tau_var: f64, l: usize, l_max: usize) -> Action {
    if l < l_max && mean_var > tau_var {
        Action::Continue
    } else {
        Action::Exit
    }
}

/// `-lambda * (l2d + l3d) - cost`.
pub fn reward(l2d: f64, l3d: f64, l: usize, per_loop_gflops: f64, lambda: f64, cost: CostMode) -> f64 {
    let c = match cost {
        CostMode::Cumulative => l as f64 * per_loop_gflops,
        CostMode::Marginal if l > 0 => per_loop_gflops,
        CostMode::Marginal => 0.0,
    };
    -lambda * (l2d + l3d) - c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub action: Action,
    pub log_prob: f64,
    pub loop_index: usize,
    /// `[p(EXIT), p(CONTINUE)]`.
    pub probs: [f64; 2],
}

/// Two-layer gate over the variance head's intermediate feature.
#[derive(Clone, Debug, PartialEq)]
pub struct GatePolicy {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl GatePolicy {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, feature_width: usize) -> Self {
        let fc1 = Dense::new(store, rng, "gate.fc1", Group::Gate, feature_width, GATE_HIDDEN);
        let fc2 = Dense::new(store, rng, "gate.fc2", Group::Gate, GATE_HIDDEN, 2);
        GatePolicy { fc1, fc2 }
    }

    /// Gate logits for one feature vector, evaluated without a tape.
    pub fn logits<T: Scalar>(&self, store: &ParamStore<T>, f: &[T]) -> [T; 2] {
        let hidden = dense(store, &self.fc1, f);
        let hidden: Vec<T> = hidden.into_iter().map(|v| v.max(T::zero())).collect();
        let out = dense(store, &self.fc2, &hidden);
        [out[0], out[1]]
    }

    pub fn probabilities<T: Scalar>(&self, store: &ParamStore<T>, f: &[T], tau: f64) -> [f64; 2] {
        let z = self.logits(store, f);
        let p = softmax_temperature(&[z[0].as_f64(), z[1].as_f64()], tau);
        [p[0], p[1]]
    }
}

fn dense<T: Scalar>(store: &ParamStore<T>, layer: &Dense, x: &[T]) -> Vec<T> {
    let w = store.get(layer.weight).data();
    let b = store.get(layer.bias).data();
    (0..layer.fan_out)
        .map(|o| b[o] + w[o * layer.fan_in..(o + 1) * layer.fan_in].iter().zip(x).map(|(&a, &c)| a * c).sum::<T>())
        .collect()
}

/// Draws (or takes the most likely) action from `softmax(logits / tau)`.
pub fn gate_decide<T: Scalar, R: Rng>(
    f: &[T],
    policy: &GatePolicy,
    store: &ParamStore<T>,
    tau: f64,
    loop_index: usize,
    mode: DecideMode,
    rng: &mut R,
) -> Result<GateDecision> {
    if !(tau > 0.0) {
        return Err(Error::arg("gate_decide", format!("temperature must be > 0, got {tau}")));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: format!("gate feature at loop {loop_index}") });
    }
    let probs = policy.probabilities(store, f, tau);
    let action = match mode {
        DecideMode::Argmax => {
            if probs[0] >= probs[1] {
                Action::Exit
            } else {
                Action::Continue
            }
        }
        DecideMode::Sample => {
            if rng.gen::<f64>() < probs[0] {
                Action::Exit
            } else {
                Action::Continue
            }
        }
    };
    Ok(GateDecision { action, log_prob: probs[action.index()].ln(), loop_index, probs })
}

/// One loop of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub loop_index: usize,
    pub f: Vec<f64>,
    /// `None` when the exit was forced at `l_max` without consulting the gate.
    pub decision: Option<GateDecision>,
    /// Reward of stopping at this loop.
    pub reward: f64,
}

/// Per-loop records of one sample's episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub terminal: bool,
}

impl Trajectory {
    pub fn push(&mut self, step: Step) -> Result<()> {
        if self.terminal {
            return Err(Error::arg("trajectory", "episode already ended"));
        }
        let exits = step.decision.as_ref().is_none_or(|d| d.action == Action::Exit);
        self.steps.push(step);
        self.terminal = exits;
        Ok(())
    }

    pub fn exit_loop(&self) -> Option<usize> {
        if self.terminal {
            self.steps.last().map(|s| s.loop_index)
        } else {
            None
        }
    }

    /// Return credited to every decision: the reward at the exit loop.
    pub fn episode_return(&self) -> Option<f64> {
        if self.terminal {
            self.steps.last().map(|s| s.reward)
        } else {
            None
        }
    }

    /// Structural checks: at most one exit, placed last, consecutive loops.
    pub fn is_valid(&self, l_max: usize) -> bool {
        let n = self.steps.len();
        n <= l_max + 1
            && self.steps.iter().enumerate().all(|(i, s)| {
                let exit = s.decision.as_ref().is_none_or(|d| d.action == Action::Exit);
                s.loop_index == i && (exit == (i + 1 == n && self.terminal) || (!exit && i + 1 < n))
            })
    }
}

/// Writes `sample,loop,action,p_exit,p_continue,log_prob,reward,forced` rows.
pub fn write_trajectories_csv<W: Write>(out: &mut W, trajectories: &[Trajectory]) -> std::io::Result<()> {
    writeln!(out, "sample,loop,action,p_exit,p_continue,log_prob,reward,forced")?;
    for (i, t) in trajectories.iter().enumerate() {
        for s in &t.steps {
            match &s.decision {
                Some(d) => {
                    let a = if d.action == Action::Exit { "exit" } else { "continue" };
                    writeln!(out, "{i},{},{a},{},{},{},{},false", s.loop_index, d.probs[0], d.probs[1], d.log_prob, s.reward)?
                }
                None => writeln!(out, "{i},{},exit,1,0,0,{},true", s.loop_index, s.reward)?,
            }
        }
    }
    Ok(())
}

/// Running-mean reward baseline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: Option<f64>,
    pub momentum: f64,
}

impl Baseline {
    pub fn new(momentum: f64) -> Self {
        Baseline { value: None, momentum }
    }

    pub fn update(&mut self, batch_mean: f64) {
        self.value = Some(match self.value {
            None => batch_mean,
            Some(v) => self.momentum * v + (1.0 - self.momentum) * batch_mean,
        });
    }
}

/// Optimizer state of the gate parameters.
#[derive(Clone, Debug, Default)]
pub struct GateOptimizer<T> {
    pub adam: Vec<AdamState<T>>,
    pub config: AdamConfig,
}

/// Gradient of `-(1/B) sum_traj sum_step (G - b) log pi(a | f)` for the gate
/// parameters (`fc1.w, fc1.b, fc2.w, fc2.b`).
pub fn policy_gradient<T: Scalar>(
    trajectories: &[Trajectory],
    policy: &GatePolicy,
    store: &ParamStore<T>,
    baseline: f64,
    tau: f64,
) -> Result<Vec<Tensor<f64>>> {
    if trajectories.is_empty() {
        return Err(Error::arg("policy_gradient_update", "empty trajectory batch"));
    }
    let mut fs = Vec::new();
    let mut actions = Vec::new();
    let mut weights = Vec::new();
    for t in trajectories {
        let g = t
            .episode_return()
            .ok_or_else(|| Error::arg("policy_gradient_update", "trajectory did not terminate"))?;
        for s in &t.steps {
            if let Some(d) = &s.decision {
                fs.extend_from_slice(&s.f);
                actions.push(d.action.index());
                weights.push(g - baseline);
            }
        }
    }
    let ids = [policy.fc1.weight, policy.fc1.bias, policy.fc2.weight, policy.fc2.bias];
    if actions.is_empty() {
        return Ok(ids.iter().map(|&id| Tensor::zeros(store.get(id).shape().to_vec())).collect());
    }
    let width = policy.fc1.fan_in;
    let mut tape = Tape::<f64>::new();
    let vars: Vec<_> = ids.iter().map(|&id| tape.leaf(store.get(id).cast(), true)).collect();
    let x = tape.constant(Tensor::new([actions.len(), width], fs)?);
    let h = tape.linear(x, vars[0], vars[1])?;
    let h = tape.relu(h);
    let z = tape.linear(h, vars[2], vars[3])?;
    let logp = tape.log_softmax_temperature(z, tau)?;
    let picked = tape.pick(logp, &actions)?;
    let scale = -1.0 / trajectories.len() as f64;
    let w = tape.constant(Tensor::new([weights.len()], weights.iter().map(|v| v * scale).collect())?);
    let weighted = tape.hadamard(picked, w)?;
    let loss = tape.sum_all(weighted);
    let mut grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.take(v).expect("tracked")).collect())
}

/// One optimizer step of vanilla policy gradient with a running baseline.
/// Only gate parameters are touched.
pub fn policy_gradient_update<T: Scalar>(
    trajectories: &[Trajectory],
    policy: &GatePolicy,
    store: &mut ParamStore<T>,
    baseline: &mut Baseline,
    opt: &mut GateOptimizer<T>,
    lr: f64,
    tau: f64,
) -> Result<()> {
    if trajectories.is_empty() {
        return Err(Error::arg("policy_gradient_update", "empty trajectory batch"));
    }
    let returns: Vec<f64> = trajectories.iter().filter_map(|t| t.episode_return()).collect();
    let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
    if baseline.value.is_none() {
        baseline.update(mean);
    }
    let b = baseline.value.unwrap_or(0.0);
    let grads = policy_gradient(trajectories, policy, store, b, tau)?;
    let ids = [policy.fc1.weight, policy.fc1.bias, policy.fc2.weight, policy.fc2.bias];
    if opt.adam.len() != ids.len() {
        opt.adam = ids.iter().map(|&id| AdamState::new(store.get(id).len())).collect();
    }
    for ((&id, g), st) in ids.iter().zip(&grads).zip(&mut opt.adam) {
        let g: Tensor<T> = g.cast();
        adam_step(store.get_mut(id), &g, st, lr, &opt.config)?;
    }
    baseline.update(mean);
    Ok(())
}
