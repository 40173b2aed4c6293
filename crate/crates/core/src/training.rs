//! Loss assembly, the end-to-end and progressive protocols, gate training
//! and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BnStates, Ir9Config};
use crate::diff::{adam_step, AdamConfig, AdamState, Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gating::{
    gate_decide, policy_gradient_update, reward, Action, Baseline, CostMode, DecideMode, GateOptimizer, Step,
    Trajectory,
};
use crate::model::{DirNet, LoopPrediction};
use crate::nn::Group;
use crate::posehead::{loss_2d, loss_3d, RegWeights};
use crate::scalar::Scalar;
use crate::synthdata::{Batch, Dataset};
use crate::uncertainty::Var2dForm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    E2e,
    Progressive,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2e" | "end-to-end" | "end_to_end" => Ok(Protocol::E2e),
            "progressive" => Ok(Protocol::Progressive),
            _ => Err(Error::config("protocol", format!("unknown protocol `{s}` (e2e, progressive)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub protocol: Protocol,
    pub model: Ir9Config,
    pub lr: f64,
    pub epochs_initial: usize,
    pub epochs_per_loop: usize,
    pub batch_size: usize,
    pub gamma_2d: f64,
    pub gamma_3d: f64,
    pub gamma_var: f64,
    pub reg: RegWeights,
    pub var_2d_form: Var2dForm,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    /// Stop a phase once validation error has not improved for `patience` epochs.
    pub early_stop: bool,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            protocol: Protocol::Progressive,
            model: Ir9Config::default(),
            lr: 1e-3,
            epochs_initial: 50,
            epochs_per_loop: 20,
            batch_size: 32,
            gamma_2d: 1.0,
            gamma_3d: 1.0,
            gamma_var: 1.0,
            reg: RegWeights::default(),
            var_2d_form: Var2dForm::Laplace,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            early_stop: false,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("{} must be positive", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2 for batch statistics"));
        }
        if self.epochs_initial == 0 {
            return Err(Error::config("epochs_initial", "must be positive"));
        }
        if self.epochs_per_loop == 0 && self.model.l_max > 0 {
            return Err(Error::config("epochs_per_loop", "must be positive"));
        }
        for (name, g) in [("gamma_2d", self.gamma_2d), ("gamma_3d", self.gamma_3d), ("gamma_var", self.gamma_var)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::config(name, format!("{g} must be non-negative")));
            }
        }
        if self.early_stop && self.patience == 0 {
            return Err(Error::config("patience", "must be positive"));
        }
        Ok(())
    }

    /// Epochs of one protocol run; equal for both protocols.
    pub fn total_epochs(&self) -> usize {
        self.epochs_initial + self.epochs_per_loop * self.model.effective_l_max()
    }

    /// Learning rate of `group` in progressive phase `l_prog`.
    pub fn phase_lr(&self, group: Group, l_prog: usize) -> f64 {
        if group == Group::Attention {
            self.lr
        } else {
            self.lr * 0.1f64.powi(l_prog as i32)
        }
    }
}

/// Loss terms of one loop, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopLosses {
    pub l2d: f64,
    pub l3d: f64,
    pub var: f64,
    pub reg: f64,
}

impl LoopLosses {
    pub fn weighted(&self, cfg: &TrainConfig) -> f64 {
        cfg.gamma_2d * self.l2d + cfg.gamma_3d * self.l3d + cfg.gamma_var * self.var + self.reg
    }
}

/// Sum over loops of the weighted loop losses, each with its prior term.
pub fn total_loss(per_loop: &[LoopLosses], cfg: &TrainConfig) -> f64 {
    per_loop.iter().map(|l| l.weighted(cfg)).sum()
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l2d: Var,
    pub l3d: Var,
    pub var: Var,
    pub reg: Var,
}

/// Loss terms of one loop's predictions against `(N, 21, 2)` and `(N, 21, 3)` targets.
pub fn loop_loss_vars<T: Scalar>(
    tape: &mut Tape<T>,
    pred: &LoopPrediction,
    gt_2d: Var,
    gt_3d: Var,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let n = tape.shape(gt_2d)[0];
    let l2d = tape.loss_2d(pred.pose.joints_2d, gt_2d)?;
    let l3d = tape.loss_3d(pred.pose.joints_3d, gt_3d)?;
    let d2 = tape.sub(pred.pose.joints_2d, gt_2d)?;
    let d2 = tape.reshape(d2, [n, crate::uncertainty::ALPHA_2D])?;
    let s2 = tape.smooth_l1(d2);
    let d3 = tape.sub(pred.pose.joints_3d, gt_3d)?;
    let d3 = tape.reshape(d3, [n, crate::uncertainty::ALPHA_3D])?;
    let e3 = tape.square(d3);
    let v2 = tape.var_loss_2d(s2, pred.var.alpha_2d, cfg.var_2d_form)?;
    let v3 = tape.var_loss_3d(e3, pred.var.alpha_3d)?;
    let var = tape.add(v2, v3)?;
    let reg = tape.pose_regularizer(pred.pose.theta, pred.pose.beta, cfg.reg)?;
    Ok(LossVars { l2d, l3d, var, reg })
}

pub fn total_loss_var<T: Scalar>(tape: &mut Tape<T>, losses: &[LossVars], cfg: &TrainConfig) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for l in losses {
        let a = tape.scale(l.l2d, T::lit(cfg.gamma_2d));
        let b = tape.scale(l.l3d, T::lit(cfg.gamma_3d));
        let c = tape.scale(l.var, T::lit(cfg.gamma_var));
        let ab = tape.add(a, b)?;
        let abc = tape.add(ab, c)?;
        let term = tape.add(abc, l.reg)?;
        acc = Some(match acc {
            None => term,
            Some(s) => tape.add(s, term)?,
        });
    }
    acc.ok_or_else(|| Error::arg("total_loss", "no loops"))
}

/// Loss and per-parameter gradients of one batch.
pub struct BatchResult<T> {
    pub losses: Vec<LoopLosses>,
    pub total: f64,
    pub grads: Vec<Option<Tensor<T>>>,
}

/// Forward and backward pass over loops `0..=l_stop`. Statistics in `bn` are
/// updated in training mode.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients<T: Scalar>(
    net: &DirNet<T>,
    bn: &mut BnStates<T>,
    batch: &Batch<T>,
    l_stop: usize,
    cfg: &TrainConfig,
    trainable: impl Fn(Group) -> bool,
    mode: Mode,
    fe_mode: Mode,
) -> Result<BatchResult<T>> {
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape, trainable);
    let x = tape.constant(batch.images.clone());
    let g2 = tape.constant(batch.joints_2d.clone());
    let g3 = tape.constant(batch.joints_3d.clone());
    let preds = net.arch.forward(&mut tape, &p, bn, x, l_stop, mode, fe_mode)?;
    let vars = preds.iter().map(|pr| loop_loss_vars(&mut tape, pr, g2, g3, cfg)).collect::<Result<Vec<_>>>()?;
    let losses: Vec<LoopLosses> = vars
        .iter()
        .map(|v| LoopLosses {
            l2d: tape.value(v.l2d).item().as_f64(),
            l3d: tape.value(v.l3d).item().as_f64(),
            var: tape.value(v.var).item().as_f64(),
            reg: tape.value(v.reg).item().as_f64(),
        })
        .collect();
    let total_var = total_loss_var(&mut tape, &vars, cfg)?;
    let total = tape.value(total_var).item().as_f64();
    if !total.is_finite() {
        return Err(Error::NonFinite { context: format!("loss {total}, per-loop terms {losses:?}") });
    }
    let mut g = tape.backward(total_var)?;
    let grads = p.gradients(&mut g);
    if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.all_finite())) {
        return Err(Error::NonFinite {
            context: format!("gradient of {}, per-loop terms {losses:?}", net.params.entries()[i].name),
        });
    }
    Ok(BatchResult { losses, total, grads })
}

/// Eval-mode loop losses averaged over `indices`.
pub fn evaluate_losses<T: Scalar>(
    net: &DirNet<T>,
    data: &Dataset,
    indices: &[usize],
    l_stop: usize,
    cfg: &TrainConfig,
) -> Result<Vec<LoopLosses>> {
    let mut sums = vec![LoopLosses::default(); l_stop + 1];
    for chunk in indices.chunks(64) {
        let batch = data.batch::<T>(chunk)?;
        let mut bn = net.bn.clone();
        let r = batch_gradients(net, &mut bn, &batch, l_stop, cfg, |_| false, Mode::Eval, Mode::Eval)?;
        let w = chunk.len() as f64;
        for (s, l) in sums.iter_mut().zip(&r.losses) {
            s.l2d += w * l.l2d;
            s.l3d += w * l.l3d;
            s.var += w * l.var;
            s.reg += w * l.reg;
        }
    }
    let n = indices.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| LoopLosses { l2d: s.l2d / n, l3d: s.l3d / n, var: s.var / n, reg: s.reg / n }).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation losses per loop, eval mode.
    pub val: Vec<LoopLosses>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateEpochLog {
    pub epoch: usize,
    pub mean_return: f64,
    pub avg_loops: f64,
    pub exit_rate_first: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Validation losses per loop before any update.
    pub initial_val: Vec<LoopLosses>,
    pub epochs: Vec<EpochLog>,
    pub gate: Vec<GateEpochLog>,
}

/// Trained network with everything needed to resume or reproduce it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: DirNet<f32>,
    pub train_config: Option<TrainConfig>,
    pub gate_config: Option<GateTrainConfig>,
    pub gate_trained: bool,
    pub optimizer: Vec<Option<AdamState<f32>>>,
    pub log: TrainLog,
    pub rng: Option<ChaCha8Rng>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(net: DirNet<f32>) -> Self {
        let n = net.params.len();
        Checkpoint {
            net,
            train_config: None,
            gate_config: None,
            gate_trained: false,
            optimizer: vec![None; n],
            log: TrainLog::default(),
            rng: None,
            meta: serde_json::Value::Null,
        }
    }
}

struct Phase<'a> {
    index: usize,
    l_stop: usize,
    epochs: usize,
    lr: &'a dyn Fn(Group) -> f64,
    trainable: &'a dyn Fn(Group) -> bool,
    fe_mode: Mode,
}

fn final_val_error(val: &[LoopLosses]) -> f64 {
    val.last().map_or(f64::INFINITY, |l| l.l3d)
}

fn run_phase(
    net: &mut DirNet<f32>,
    opt: &mut [Option<AdamState<f32>>],
    data: &Dataset,
    cfg: &TrainConfig,
    phase: &Phase<'_>,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<()> {
    let mut order = data.train_indices();
    let val = data.val_indices();
    let mut best: Option<(f64, DirNet<f32>, Vec<Option<AdamState<f32>>>)> = None;
    let mut stale = 0;
    for epoch in 0..phase.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = data.batch::<f32>(chunk)?;
            let mut states = std::mem::replace(&mut net.bn, BnStates { sites: Vec::new() });
            let res = batch_gradients(net, &mut states, &batch, phase.l_stop, cfg, phase.trainable, Mode::Train, phase.fe_mode);
            net.bn = states;
            let res = res.map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("phase {} epoch {epoch} batch {b}: {context}", phase.index),
                },
                other => other,
            })?;
            loss_sum += res.total * chunk.len() as f64;
            count += chunk.len();
            for (i, g) in res.grads.into_iter().enumerate() {
                let Some(g) = g else { continue };
                let id = net.params.ids().nth(i).expect("parameter index");
                let lr = (phase.lr)(net.params.entry(id).group);
                match cfg.optimizer {
                    OptimizerKind::Adam => {
                        let st = opt[i].get_or_insert_with(|| AdamState::new(g.len()));
                        adam_step(net.params.get_mut(id), &g, st, lr, &cfg.adam)?;
                    }
                    OptimizerKind::Sgd => {
                        let lr = lr as f32;
                        for (p, &d) in net.params.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                            *p -= lr * d;
                        }
                    }
                }
            }
        }
        let v = evaluate_losses(net, data, &val, phase.l_stop, cfg)?;
        let score = final_val_error(&v);
        log.epochs.push(EpochLog { phase: phase.index, epoch, train_loss: loss_sum / count.max(1) as f64, val: v });
        if cfg.early_stop && !val.is_empty() {
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, net.clone(), opt.to_vec()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, b, o)) = best {
        *net = b;
        opt.clone_from_slice(&o);
    }
    Ok(())
}

fn not_gate(g: Group) -> bool {
    g != Group::Gate
}

/// Trains all loops to `l_max` from the start for the full epoch budget.
pub fn train_end_to_end(cfg: &TrainConfig, data: &Dataset) -> Result<Checkpoint> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let mut net = DirNet::<f32>::new(&cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut opt = vec![None; net.params.len()];
    let l_max = net.l_max();
    let mut log = TrainLog { initial_val: evaluate_losses(&net, data, &data.val_indices(), l_max, cfg)?, ..Default::default() };
    let lr = |_: Group| cfg.lr;
    let phase = Phase { index: 0, l_stop: l_max, epochs: cfg.total_epochs(), lr: &lr, trainable: &not_gate, fe_mode: Mode::Train };
    run_phase(&mut net, &mut opt, data, cfg, &phase, &mut rng, &mut log)?;
    Ok(Checkpoint { train_config: Some(cfg.clone()), optimizer: opt, log, rng: Some(rng), ..Checkpoint::new(net) })
}

/// Trains loop 0 first, then adds one loop per phase with a frozen feature
/// extractor and reduced learning rates.
pub fn train_progressive(cfg: &TrainConfig, data: &Dataset) -> Result<Checkpoint> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let l_max = cfg.model.effective_l_max();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut log = TrainLog::default();
    let mut net: Option<DirNet<f32>> = None;
    let mut opt = Vec::new();
    for l_prog in 0..=l_max {
        let model = Ir9Config { l_max: l_prog, ..cfg.model.clone() };
        let mut fresh = DirNet::<f32>::new(&model, cfg.seed)?;
        if let Some(prev) = &net {
            inherit(&mut fresh, prev)?;
        }
        let mut cur = fresh;
        if l_prog == 0 {
            log.initial_val = evaluate_losses(&cur, data, &data.val_indices(), 0, cfg)?;
        }
        opt = vec![None; cur.params.len()];
        let lr = |g: Group| cfg.phase_lr(g, l_prog);
        let frozen = |g: Group| g != Group::Gate && (l_prog == 0 || g != Group::FeatureExtractor);
        let phase = Phase {
            index: l_prog,
            l_stop: l_prog,
            epochs: if l_prog == 0 { cfg.epochs_initial } else { cfg.epochs_per_loop },
            lr: &lr,
            trainable: &frozen,
            fe_mode: if l_prog == 0 { Mode::Train } else { Mode::Eval },
        };
        run_phase(&mut cur, &mut opt, data, cfg, &phase, &mut rng, &mut log)?;
        net = Some(cur);
    }
    let net = net.expect("at least one phase");
    Ok(Checkpoint { train_config: Some(cfg.clone()), optimizer: opt, log, rng: Some(rng), ..Checkpoint::new(net) })
}

pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<Checkpoint> {
    match cfg.protocol {
        Protocol::E2e => train_end_to_end(cfg, data),
        Protocol::Progressive => train_progressive(cfg, data),
    }
}

fn check_data(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.header.image_size != cfg.model.input_size {
        return Err(Error::config(
            "input_size",
            format!("model expects {} px images, dataset has {}", cfg.model.input_size, data.header.image_size),
        ));
    }
    if data.train_indices().len() < 2 {
        return Err(Error::config("samples", "training split needs at least 2 samples"));
    }
    Ok(())
}

/// Copies every parameter and batch-norm entry of `prev` into `net`; entries
/// only `net` has keep their fresh values.
fn inherit<T: Scalar>(net: &mut DirNet<T>, prev: &DirNet<T>) -> Result<()> {
    for e in prev.params.entries() {
        let id = net.params.find(&e.name).ok_or_else(|| Error::arg("inherit", format!("missing {}", e.name)))?;
        net.params.set(id, e.value.clone())?;
    }
    if net.bn.sites.len() != prev.bn.sites.len() {
        return Err(Error::arg("inherit", "batch-norm layouts differ"));
    }
    for (dst, src) in net.bn.sites.iter_mut().zip(&prev.bn.sites) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s.clone();
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateTrainConfig {
    pub lambda: f64,
    pub cost: CostMode,
    pub tau_gate: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub baseline_momentum: f64,
    /// Cost of one loop; taken from the FLOPs accountant when unset.
    pub per_loop_gflops: Option<f64>,
    pub seed: u64,
}

impl Default for GateTrainConfig {
    fn default() -> Self {
        GateTrainConfig {
            lambda: 10.0,
            cost: CostMode::Cumulative,
            tau_gate: 1.0,
            lr: 1e-2,
            epochs: 30,
            batch_size: 32,
            baseline_momentum: 0.99,
            per_loop_gflops: None,
            seed: 0,
        }
    }
}

impl GateTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("{} must be non-negative", self.lambda)));
        }
        if !(self.tau_gate > 0.0 && self.tau_gate.is_finite()) {
            return Err(Error::config("tau_gate", format!("{} must be positive", self.tau_gate)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("epochs", "epochs and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            return Err(Error::config("baseline_momentum", "must lie in [0, 1)"));
        }
        if let Some(g) = self.per_loop_gflops {
            if !(g >= 0.0) {
                return Err(Error::config("per_loop_gflops", "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Frozen-network outputs of one sample at every loop.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopTrace {
    pub f: Vec<Vec<f64>>,
    pub l2d: Vec<f64>,
    pub l3d: Vec<f64>,
}

/// Eval-mode features and losses of every loop for each sample.
pub fn trace_loops<T: Scalar>(net: &DirNet<T>, data: &Dataset, indices: &[usize]) -> Result<Vec<LoopTrace>> {
    let l_max = net.l_max();
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(64) {
        let batch = data.batch::<T>(chunk)?;
        let res = net.infer(&batch.images, l_max)?;
        for (&i, loops) in chunk.iter().zip(res) {
            let s = &data.samples[i];
            let g2: Vec<f64> = s.joints_2d.iter().map(|&v| v as f64).collect();
            let g3: Vec<f64> = s.joints_3d.iter().map(|&v| v as f64).collect();
            out.push(LoopTrace {
                l2d: loops.iter().map(|r| loss_2d(&r.joints_2d, &g2)).collect(),
                l3d: loops.iter().map(|r| loss_3d(&r.joints_3d, &g3)).collect(),
                f: loops.into_iter().map(|r| r.f).collect(),
            });
        }
    }
    Ok(out)
}

/// Runs the gate over a traced sample until it exits or `l_max` is reached.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: rand::Rng>(
    trace: &LoopTrace,
    net: &DirNet<f32>,
    tau: f64,
    mode: DecideMode,
    per_loop_gflops: f64,
    lambda: f64,
    cost: CostMode,
    rng: &mut R,
) -> Result<Trajectory> {
    let l_max = trace.f.len() - 1;
    let mut t = Trajectory::default();
    for l in 0..=l_max {
        let decision = if l == l_max {
            None
        } else {
            let f: Vec<f32> = trace.f[l].iter().map(|&v| v as f32).collect();
            Some(gate_decide(&f, &net.arch.gate, &net.params, tau, l, mode, rng)?)
        };
        let r = reward(trace.l2d[l], trace.l3d[l], l, per_loop_gflops, lambda, cost);
        let exit = decision.as_ref().is_none_or(|d| d.action == Action::Exit);
        t.push(Step { loop_index: l, f: trace.f[l].clone(), decision, reward: r })?;
        if exit {
            break;
        }
    }
    Ok(t)
}

/// Trains only the gate with policy gradients; every other parameter is left
/// untouched.
pub fn train_gate(ckpt: &Checkpoint, gcfg: &GateTrainConfig, data: &Dataset) -> Result<Checkpoint> {
    gcfg.validate()?;
    let mut net = ckpt.net.clone();
    let gflops = match gcfg.per_loop_gflops {
        Some(g) => g,
        None => crate::evalkit::count_flops(net.config())?.per_loop_gflops(),
    };
    let traces = trace_loops(&net, data, &data.train_indices())?;
    let mut rng = ChaCha8Rng::seed_from_u64(gcfg.seed ^ 0x6a7e);
    let mut baseline = Baseline::new(gcfg.baseline_momentum);
    let mut opt = GateOptimizer { adam: Vec::new(), config: AdamConfig::default() };
    let mut log = ckpt.log.clone();
    let mut order: Vec<usize> = (0..traces.len()).collect();
    for epoch in 0..gcfg.epochs {
        order.shuffle(&mut rng);
        let (mut ret, mut loops, mut first, mut n) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(gcfg.batch_size) {
            let trajs = chunk
                .iter()
                .map(|&i| rollout(&traces[i], &net, gcfg.tau_gate, DecideMode::Sample, gflops, gcfg.lambda, gcfg.cost, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            for t in &trajs {
                let e = t.exit_loop().unwrap_or(0);
                ret += t.episode_return().unwrap_or(0.0);
                loops += e as f64;
                first += (e == 0) as u8 as f64;
                n += 1.0;
            }
            let policy = net.arch.gate.clone();
            policy_gradient_update(&trajs, &policy, &mut net.params, &mut baseline, &mut opt, gcfg.lr, gcfg.tau_gate)?;
        }
        log.gate.push(GateEpochLog { epoch, mean_return: ret / n, avg_loops: loops / n, exit_rate_first: first / n });
    }
    Ok(Checkpoint {
        net,
        gate_config: Some(gcfg.clone()),
        gate_trained: true,
        log,
        ..ckpt.clone()
    })
}

pub const CKPT_MAGIC: &[u8; 4] = b"DIRN";
pub const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptHeader {
    version: u32,
    model: Ir9Config,
    train_config: Option<TrainConfig>,
    gate_config: Option<GateTrainConfig>,
    gate_trained: bool,
    params: Vec<ParamMeta>,
    /// Channels of every batch-norm entry, by site.
    bn: Vec<Vec<usize>>,
    /// Adam step count per parameter, when state is stored.
    optimizer: Vec<Option<u64>>,
    log: TrainLog,
    rng: Option<ChaCha8Rng>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
}

fn push_floats(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    /// Magic, version, header length, JSON header, then f32 blobs: parameters,
    /// batch-norm running mean and variance, Adam moments.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CkptHeader {
            version: CKPT_VERSION,
            model: self.net.config().clone(),
            train_config: self.train_config.clone(),
            gate_config: self.gate_config.clone(),
            gate_trained: self.gate_trained,
            params: self
                .net
                .params
                .entries()
                .iter()
                .map(|e| ParamMeta { name: e.name.clone(), group: e.group, shape: e.value.shape().to_vec() })
                .collect(),
            bn: self.net.bn.sites.iter().map(|s| s.iter().map(|e| e.channels()).collect()).collect(),
            optimizer: self.optimizer.iter().map(|o| o.as_ref().map(|s| s.step)).collect(),
            log: self.log.clone(),
            rng: self.rng.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.net.params.entries() {
            push_floats(&mut out, e.value.data());
        }
        for st in self.net.bn.sites.iter().flatten() {
            push_floats(&mut out, &st.running_mean);
            push_floats(&mut out, &st.running_var);
        }
        for st in self.optimizer.iter().flatten() {
            push_floats(&mut out, &st.m);
            push_floats(&mut out, &st.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 12 || &bytes[..4] != CKPT_MAGIC {
            return Err(bad("missing DIRN magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header".into()))?;
        let header: CkptHeader = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        let mut net = DirNet::<f32>::new(&header.model, 0)?;
        if net.params.len() != header.params.len() {
            return Err(bad(format!("{} parameters declared, model has {}", header.params.len(), net.params.len())));
        }
        let mut body = bytes[12 + len..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut take = |n: usize, what: &str| -> Result<Vec<f32>> {
            let v: Vec<f32> = body.by_ref().take(n).collect();
            if v.len() != n {
                return Err(bad(format!("truncated data in {what}")));
            }
            Ok(v)
        };
        for (id, meta) in net.params.ids().collect::<Vec<_>>().into_iter().zip(&header.params) {
            let e = net.params.entry(id);
            if e.name != meta.name || e.value.shape() != meta.shape.as_slice() || e.group != meta.group {
                return Err(bad(format!("parameter {} does not match model layout", meta.name)));
            }
            let data = take(e.value.len(), &meta.name)?;
            net.params.set(id, Tensor::new(meta.shape.clone(), data)?)?;
        }
        let layout: Vec<Vec<usize>> = net.bn.sites.iter().map(|s| s.iter().map(|e| e.channels()).collect()).collect();
        if layout != header.bn {
            return Err(bad("batch-norm layout does not match model".into()));
        }
        for st in net.bn.sites.iter_mut().flatten() {
            let c = st.channels();
            st.running_mean = take(c, "batch-norm statistics")?;
            st.running_var = take(c, "batch-norm statistics")?;
        }
        if header.optimizer.len() != net.params.len() {
            return Err(bad("optimizer state length does not match parameters".into()));
        }
        let mut optimizer = Vec::with_capacity(header.optimizer.len());
        for (e, step) in net.params.entries().iter().zip(&header.optimizer) {
            optimizer.push(match step {
                None => None,
                Some(step) => {
                    let n = e.value.len();
                    Some(AdamState { m: take(n, "optimizer state")?, v: take(n, "optimizer state")?, step: *step })
                }
            });
        }
        if body.next().is_some() {
            return Err(bad("trailing data after declared blobs".into()));
        }
        Ok(Checkpoint {
            net,
            train_config: header.train_config,
            gate_config: header.gate_config,
            gate_trained: header.gate_trained,
            optimizer,
            log: header.log,
            rng: header.rng,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
