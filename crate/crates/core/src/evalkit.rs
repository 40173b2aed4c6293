//! Keypoint metrics, FLOPs accounting, gated evaluation, trade-off sweeps and
//! per-loop loss reports.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{AmgMode, Ir9Config};
use crate::diff::conv_out_extent;
use crate::error::{Error, Result};
use crate::gating::{threshold_gate, Action, DecideMode, GATE_HIDDEN};
use crate::model::{DirNet, LoopResult};
use crate::posehead::{loss_2d, loss_3d};
use crate::posehead::POSE_DIM;
use crate::synthdata::{sample_seed, Dataset};
use crate::uncertainty::{mean_variance, ALPHA_2D, ALPHA_3D};

/// Fraction of errors strictly below `tau`.
pub fn pck(errors: &[f64], tau: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::arg("pck", "no errors given"));
    }
    Ok(errors.iter().filter(|&&e| e < tau).count() as f64 / errors.len() as f64)
}

/// `k` evenly spaced thresholds over `[a, b]`.
pub fn thresholds(range: [f64; 2], k: usize) -> Vec<f64> {
    (0..k).map(|i| range[0] + (range[1] - range[0]) * i as f64 / (k - 1) as f64).collect()
}

/// `(threshold, PCK)` points.
pub fn pck_curve(errors: &[f64], range: [f64; 2], k: usize) -> Result<Vec<[f64; 2]>> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return Err(Error::arg("pck", "no errors given"));
    }
    let n = sorted.len() as f64;
    Ok(thresholds(range, k).into_iter().map(|t| [t, sorted.partition_point(|&e| e < t) as f64 / n]).collect())
}

/// Trapezoidal area under a `(threshold, value)` curve, normalized by its span.
pub fn trapezoid(curve: &[[f64; 2]]) -> f64 {
    let span = curve.last().map_or(0.0, |p| p[0]) - curve.first().map_or(0.0, |p| p[0]);
    if span <= 0.0 {
        return curve.first().map_or(0.0, |p| p[1]);
    }
    curve.windows(2).map(|w| (w[1][0] - w[0][0]) * (w[0][1] + w[1][1]) / 2.0).sum::<f64>() / span
}

/// Normalized area under the PCK curve over `range` with `k` thresholds.
pub fn auc(errors: &[f64], range: [f64; 2], k: usize) -> Result<f64> {
    if !(range[1] > range[0] && range[0] >= 0.0) || k < 2 {
        return Err(Error::arg("auc", format!("need b > a >= 0 and k >= 2, got {range:?}, k = {k}")));
    }
    Ok(trapezoid(&pck_curve(errors, range, k)?))
}

/// Per-joint Euclidean distances between flattened `(K, dim)` arrays.
pub fn joint_errors(pred: &[f64], gt: &[f64], dim: usize) -> Vec<f64> {
    pred.chunks(dim)
        .zip(gt.chunks(dim))
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect()
}

/// Spearman rank correlation; ties receive their average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Two-sided permutation test on the difference of means; returns the p-value.
pub fn permutation_test(a: &[f64], b: &[f64], iterations: usize, seed: u64) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let observed = (mean(a) - mean(b)).abs();
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..iterations {
        pooled.shuffle(&mut rng);
        let (x, y) = pooled.split_at(a.len());
        if (mean(x) - mean(y)).abs() >= observed - 1e-12 {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (iterations + 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    FeatureExtractor,
    Refiner,
    Attention,
    PoseHead,
    VarianceHead,
    Gate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub component: Component,
    pub flops: u64,
}

/// Per-sample FLOPs of every layer and the cost of each exit loop.
///
/// Every loop is charged the refiner, the attention stage and both heads, so
/// exiting after loop `l` costs `FE + (l + 1) * per_loop`. Loop 0 does not run
/// the attention stage; its actual cost is `first_loop`. The gate is listed
/// separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsTable {
    pub layers: Vec<LayerFlops>,
    pub feature_extractor: u64,
    pub refiner: u64,
    pub attention: u64,
    pub pose_head: u64,
    pub variance_head: u64,
    pub gate: u64,
    /// Refiner and heads.
    pub first_loop: u64,
    /// Attention, refiner and heads.
    pub per_loop: u64,
    /// Total cost when exiting after loop `l`.
    pub cumulative: Vec<u64>,
}

impl FlopsTable {
    pub fn per_loop_gflops(&self) -> f64 {
        self.per_loop as f64 * 1e-9
    }

    pub fn fe_gflops(&self) -> f64 {
        self.feature_extractor as f64 * 1e-9
    }

    /// GFLOPs of a run that exits after `loops` (possibly fractional) loops.
    pub fn gflops_at(&self, loops: f64) -> f64 {
        (self.feature_extractor as f64 + (loops + 1.0) * self.per_loop as f64) * 1e-9
    }

    fn component(&self, c: Component) -> u64 {
        self.layers.iter().filter(|l| l.component == c).map(|l| l.flops).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            s.push_str(&format!("{:<28} {:<18} {:>12}\n", l.name, format!("{:?}", l.component), l.flops));
        }
        s.push_str(&format!("feature_extractor {}\n", self.feature_extractor));
        s.push_str(&format!("refiner {}\n", self.refiner));
        s.push_str(&format!("attention {}\n", self.attention));
        s.push_str(&format!("pose_head {}\n", self.pose_head));
        s.push_str(&format!("variance_head {}\n", self.variance_head));
        s.push_str(&format!("gate {}\n", self.gate));
        s.push_str(&format!("first_loop {}\n", self.first_loop));
        s.push_str(&format!("per_loop {}\n", self.per_loop));
        for (l, c) in self.cumulative.iter().enumerate() {
            s.push_str(&format!("exit_loop_{l} {c}\n"));
        }
        s
    }
}

struct Walker {
    layers: Vec<LayerFlops>,
}

impl Walker {
    fn push(&mut self, name: String, component: Component, flops: u64) {
        self.layers.push(LayerFlops { name, component, flops });
    }

    /// Convolution with padding `k / 2`; returns the output extent.
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, c: Component, size: usize, cin: usize, cout: usize, k: usize, stride: usize) -> usize {
        let out = conv_out_extent(size, k, stride, k / 2).expect("valid extent");
        self.push(format!("{name}.conv"), c, 2 * (k * k * cin * cout * out * out) as u64);
        out
    }

    fn elementwise(&mut self, name: &str, c: Component, count: usize) {
        self.push(name.to_string(), c, count as u64);
    }

    fn conv_bn(&mut self, name: &str, c: Component, size: usize, cin: usize, cout: usize, k: usize, stride: usize) -> usize {
        let out = self.conv(name, c, size, cin, cout, k, stride);
        self.elementwise(&format!("{name}.bn"), c, cout * out * out);
        out
    }

    fn block(&mut self, name: &str, c: Component, size: usize, cin: usize, cout: usize) -> usize {
        let out = self.conv_bn(&format!("{name}.conv1"), c, size, cin, cout, 3, 2);
        self.elementwise(&format!("{name}.relu1"), c, cout * out * out);
        self.conv_bn(&format!("{name}.conv2"), c, out, cout, cout, 3, 1);
        self.conv_bn(&format!("{name}.shortcut"), c, size, cin, cout, 1, 2);
        self.elementwise(&format!("{name}.add"), c, cout * out * out);
        self.elementwise(&format!("{name}.relu2"), c, cout * out * out);
        out
    }

    fn dense(&mut self, name: &str, c: Component, fan_in: usize, fan_out: usize) {
        self.push(format!("{name}.linear"), c, 2 * (fan_in * fan_out) as u64);
    }
}

fn stage_channels(c: usize, k: usize) -> usize {
    match k {
        1 | 2 => c,
        3 => 2 * c,
        4 => 4 * c,
        _ => 8 * c,
    }
}

/// Layer-by-layer FLOPs of the network described by `cfg`. Convolutions cost
/// `2 K^2 Cin Cout Hout Wout` and dense layers `2 in out`; bias additions are
/// not counted. Normalization, activations, residual sums, the attention
/// product and pooling cost one FLOP per output element. Pixel shuffles,
/// upsampling and pose decoding are free.
pub fn count_flops(cfg: &Ir9Config) -> Result<FlopsTable> {
    cfg.validate()?;
    let c = cfg.base_channels;
    let mut w = Walker { layers: Vec::new() };
    let fe = Component::FeatureExtractor;
    let mut size = w.conv_bn("fe.stem", fe, cfg.input_size, 3, c, 3, 2);
    w.elementwise("fe.stem.relu", fe, c * size * size);
    for phase in 1..=4 {
        let (cin, cout) = (stage_channels(c, phase), stage_channels(c, phase + 1));
        if phase < cfg.loop_point {
            size = w.block(&format!("fe.phase{phase}"), fe, size, cin, cout);
        } else {
            size = w.block(&format!("rf.phase{phase}"), Component::Refiner, size, cin, cout);
        }
    }
    w.elementwise("rf.pool", Component::Refiner, 8 * c);

    let at = Component::Attention;
    let (fe_c, fe_s) = (cfg.fe_channels(), cfg.fe_extent());
    match cfg.amg_mode {
        AmgMode::Attention => {
            let mut ch = 8 * c;
            let mut s = size;
            for i in 0..5 - cfg.loop_point {
                s *= 2;
                let shuffled = ch / 4;
                w.conv(&format!("amg.stage{i}"), at, s, shuffled, 2 * shuffled, 3, 1);
                ch = 2 * shuffled;
                w.elementwise(&format!("amg.stage{i}.relu"), at, ch * s * s);
            }
            w.conv("amg.head", at, s, ch, fe_c, 1, 1);
            w.elementwise("amg.sigmoid", at, fe_c * fe_s * fe_s);
            w.elementwise("amg.product", at, fe_c * fe_s * fe_s);
        }
        AmgMode::DirectUpsample => {
            w.elementwise("amg.channel_resize", at, fe_c * fe_s * fe_s);
            w.elementwise("amg.sigmoid", at, fe_c * fe_s * fe_s);
            w.elementwise("amg.product", at, fe_c * fe_s * fe_s);
        }
        AmgMode::None => {}
    }

    let latent = cfg.latent_dim();
    let ph = Component::PoseHead;
    w.dense("pose.fc1", ph, latent, cfg.fc_width);
    w.elementwise("pose.relu", ph, cfg.fc_width);
    w.dense("pose.fc2", ph, cfg.fc_width, POSE_DIM);

    let vh = Component::VarianceHead;
    let hidden = (cfg.fc_width / 2).max(1);
    w.dense("var.fc1", vh, latent, hidden);
    w.elementwise("var.relu", vh, hidden);
    w.dense("var.fc2", vh, hidden, ALPHA_2D + ALPHA_3D);
    w.elementwise("var.clamp", vh, ALPHA_2D + ALPHA_3D);

    let g = Component::Gate;
    w.dense("gate.fc1", g, hidden, GATE_HIDDEN);
    w.elementwise("gate.relu", g, GATE_HIDDEN);
    w.dense("gate.fc2", g, GATE_HIDDEN, 2);
    w.elementwise("gate.softmax", g, 2);

    let mut t = FlopsTable {
        layers: w.layers,
        feature_extractor: 0,
        refiner: 0,
        attention: 0,
        pose_head: 0,
        variance_head: 0,
        gate: 0,
        first_loop: 0,
        per_loop: 0,
        cumulative: Vec::new(),
    };
    t.feature_extractor = t.component(fe);
    t.refiner = t.component(Component::Refiner);
    t.attention = t.component(at);
    t.pose_head = t.component(ph);
    t.variance_head = t.component(vh);
    t.gate = t.component(g);
    t.first_loop = t.refiner + t.pose_head + t.variance_head;
    t.per_loop = t.attention + t.first_loop;
    t.cumulative = (0..=cfg.effective_l_max()).map(|l| t.feature_extractor + (l as u64 + 1) * t.per_loop).collect();
    Ok(t)
}

/// Exit rule applied at evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GateSpec {
    /// Always run every loop.
    Full,
    /// Stop after a fixed loop.
    Fixed { loop_index: usize },
    Threshold { tau_var: f64 },
    Policy { tau_gate: f64, mode: DecideMode },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub gate: GateSpec,
    pub auc_range_2d: Option<[f64; 2]>,
    pub auc_range_3d: [f64; 2],
    pub auc_points: usize,
    pub seed: u64,
    /// Worker threads for inference (0 = all cores).
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            gate: GateSpec::Full,
            auc_range_2d: None,
            auc_range_3d: [0.0, 0.5],
            auc_points: 100,
            seed: 0,
            jobs: 0,
        }
    }
}

impl EvalConfig {
    /// 2D range, defaulting to `[0, H / 16]` pixels.
    pub fn range_2d(&self, image_size: usize) -> [f64; 2] {
        self.auc_range_2d.unwrap_or([0.0, 0.5 * image_size as f64 / 8.0])
    }
}

/// Outputs of every loop for one sample, reduced to what gating and metrics need.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLoops {
    pub index: usize,
    pub errors_2d: Vec<Vec<f64>>,
    pub errors_3d: Vec<Vec<f64>>,
    pub loss_2d: Vec<f64>,
    pub loss_3d: Vec<f64>,
    pub mean_var_2d: Vec<f64>,
    pub mean_var_3d: Vec<f64>,
    pub f: Vec<Vec<f64>>,
}

fn reduce(index: usize, loops: &[LoopResult], data: &Dataset) -> SampleLoops {
    let s = &data.samples[index];
    let g2: Vec<f64> = s.joints_2d.iter().map(|&v| v as f64).collect();
    let g3: Vec<f64> = s.joints_3d.iter().map(|&v| v as f64).collect();
    SampleLoops {
        index,
        errors_2d: loops.iter().map(|r| joint_errors(&r.joints_2d, &g2, 2)).collect(),
        errors_3d: loops.iter().map(|r| joint_errors(&r.joints_3d, &g3, 3)).collect(),
        loss_2d: loops.iter().map(|r| loss_2d(&r.joints_2d, &g2)).collect(),
        loss_3d: loops.iter().map(|r| loss_3d(&r.joints_3d, &g3)).collect(),
        mean_var_2d: loops.iter().map(|r| mean_variance(&r.alpha_2d)).collect(),
        mean_var_3d: loops.iter().map(|r| mean_variance(&r.alpha_3d)).collect(),
        f: loops.iter().map(|r| r.f.clone()).collect(),
    }
}

const CHUNK: usize = 32;

/// Runs every loop on `indices`. Work is split into fixed chunks, so results
/// do not depend on the thread count.
pub fn run_loops(net: &DirNet<f32>, data: &Dataset, indices: &[usize], jobs: usize) -> Result<Vec<SampleLoops>> {
    if data.header.image_size != net.config().input_size {
        return Err(Error::config("input_size", "dataset and model image sizes differ"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::arg("run_loops", e.to_string()))?;
    let chunks: Vec<&[usize]> = indices.chunks(CHUNK).collect();
    let l_max = net.l_max();
    let out = pool.install(|| {
        chunks
            .par_iter()
            .map(|chunk| -> Result<Vec<SampleLoops>> {
                let batch = data.batch::<f32>(chunk)?;
                let res = net.infer(&batch.images, l_max)?;
                Ok(chunk.iter().zip(&res).map(|(&i, loops)| reduce(i, loops, data)).collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(out.into_iter().flatten().collect())
}

/// Exit loop of every sample under `gate`.
pub fn exit_loops(net: &DirNet<f32>, samples: &[SampleLoops], gate: GateSpec, seed: u64) -> Result<Vec<usize>> {
    let l_max = net.l_max();
    samples
        .iter()
        .map(|s| match gate {
            GateSpec::Full => Ok(l_max),
            GateSpec::Fixed { loop_index } => Ok(loop_index.min(l_max)),
            GateSpec::Threshold { tau_var } => {
                Ok((0..=l_max).find(|&l| threshold_gate(s.mean_var_2d[l], tau_var, l, l_max) == Action::Exit).unwrap_or(l_max))
            }
            GateSpec::Policy { tau_gate, mode } => {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, s.index as u64));
                for l in 0..l_max {
                    let f: Vec<f32> = s.f[l].iter().map(|&v| v as f32).collect();
                    let d = crate::gating::gate_decide(&f, &net.arch.gate, &net.params, tau_gate, l, mode, &mut rng)?;
                    if d.action == Action::Exit {
                        return Ok(l);
                    }
                }
                Ok(l_max)
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean_2d: f64,
    pub mean_3d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub samples: usize,
    pub l_max: usize,
    pub per_loop: Vec<ErrorStats>,
    pub exit: ErrorStats,
    pub pck_2d: Vec<[f64; 2]>,
    pub pck_3d: Vec<[f64; 2]>,
    pub auc_2d: f64,
    pub auc_3d: f64,
    pub avg_loops: f64,
    pub avg_gflops: f64,
    pub per_loop_gflops: f64,
    pub fe_gflops: f64,
    /// Number of samples exiting after each loop.
    pub exit_histogram: Vec<usize>,
    /// Spearman correlation of mean predicted 2D variance and mean 2D error at the exit loop.
    pub variance_error_spearman: f64,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Metrics of precomputed loop outputs under `cfg.gate`.
pub fn report_from_loops(net: &DirNet<f32>, samples: &[SampleLoops], cfg: &EvalConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::arg("evaluate", "no samples"));
    }
    let l_max = net.l_max();
    let flops = count_flops(net.config())?;
    let exits = exit_loops(net, samples, cfg.gate, cfg.seed)?;
    let per_loop = (0..=l_max)
        .map(|l| ErrorStats {
            mean_2d: mean(samples.iter().flat_map(|s| s.errors_2d[l].iter().copied())),
            mean_3d: mean(samples.iter().flat_map(|s| s.errors_3d[l].iter().copied())),
        })
        .collect();
    let e2: Vec<f64> = samples.iter().zip(&exits).flat_map(|(s, &l)| s.errors_2d[l].iter().copied()).collect();
    let e3: Vec<f64> = samples.iter().zip(&exits).flat_map(|(s, &l)| s.errors_3d[l].iter().copied()).collect();
    let r2 = cfg.range_2d(net.config().input_size);
    let r3 = cfg.auc_range_3d;
    let pck_2d = pck_curve(&e2, r2, cfg.auc_points)?;
    let pck_3d = pck_curve(&e3, r3, cfg.auc_points)?;
    let avg_loops = mean(exits.iter().map(|&l| l as f64));
    let mut exit_histogram = vec![0; l_max + 1];
    for &l in &exits {
        exit_histogram[l] += 1;
    }
    let var: Vec<f64> = samples.iter().zip(&exits).map(|(s, &l)| s.mean_var_2d[l]).collect();
    let err: Vec<f64> = samples.iter().zip(&exits).map(|(s, &l)| mean(s.errors_2d[l].iter().copied())).collect();
    Ok(EvalReport {
        config: cfg.clone(),
        samples: samples.len(),
        l_max,
        per_loop,
        exit: ErrorStats { mean_2d: mean(e2.iter().copied()), mean_3d: mean(e3.iter().copied()) },
        auc_2d: trapezoid(&pck_2d),
        auc_3d: trapezoid(&pck_3d),
        pck_2d,
        pck_3d,
        avg_loops,
        avg_gflops: flops.gflops_at(avg_loops),
        per_loop_gflops: flops.per_loop_gflops(),
        fe_gflops: flops.fe_gflops(),
        exit_histogram,
        variance_error_spearman: spearman(&var, &err),
        meta: serde_json::Value::Null,
    })
}

pub fn evaluate(net: &DirNet<f32>, data: &Dataset, indices: &[usize], cfg: &EvalConfig) -> Result<EvalReport> {
    let samples = run_loops(net, data, indices, cfg.jobs)?;
    report_from_loops(net, &samples, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    TauVar,
    TauGate,
}

impl std::str::FromStr for Knob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau_var" | "tau-var" => Ok(Knob::TauVar),
            "tau_gate" | "tau-gate" => Ok(Knob::TauGate),
            _ => Err(Error::config("knob", format!("unknown knob `{s}` (tau_var, tau_gate)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub knob: f64,
    pub auc_3d: f64,
    pub auc_2d: f64,
    pub avg_loops: f64,
    pub avg_gflops: f64,
}

/// One evaluation per knob value over shared loop outputs.
pub fn tradeoff_sweep(
    net: &DirNet<f32>,
    samples: &[SampleLoops],
    base: &EvalConfig,
    knob: Knob,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::arg("tradeoff_sweep", "knob values must be sorted"));
    }
    values
        .iter()
        .map(|&v| {
            let gate = match knob {
                Knob::TauVar => GateSpec::Threshold { tau_var: v },
                Knob::TauGate => GateSpec::Policy { tau_gate: v, mode: DecideMode::Sample },
            };
            let r = report_from_loops(net, samples, &EvalConfig { gate, ..base.clone() })?;
            Ok(SweepRow { knob: v, auc_3d: r.auc_3d, auc_2d: r.auc_2d, avg_loops: r.avg_loops, avg_gflops: r.avg_gflops })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(out: &mut W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(out, "knob,auc_3d,auc_2d,avg_loops,avg_gflops")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.knob, r.auc_3d, r.auc_2d, r.avg_loops, r.avg_gflops)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() {
        return Err(Error::arg("quartiles", "no values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Quartiles {
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerLoopReport {
    /// Distribution of the per-sample pose loss `L_2D + L_3D` at each loop.
    pub loops: Vec<Quartiles>,
    /// Permutation-test p-value of loop 0 against the last loop.
    pub first_vs_last_p: f64,
}

pub fn per_loop_losses(samples: &[SampleLoops]) -> Vec<Vec<f64>> {
    let loops = samples.first().map_or(0, |s| s.loss_2d.len());
    (0..loops).map(|l| samples.iter().map(|s| s.loss_2d[l] + s.loss_3d[l]).collect()).collect()
}

pub fn per_loop_report(samples: &[SampleLoops], seed: u64) -> Result<PerLoopReport> {
    let losses = per_loop_losses(samples);
    let loops = losses.iter().map(|v| quartiles(v)).collect::<Result<Vec<_>>>()?;
    let p = match (losses.first(), losses.last()) {
        (Some(a), Some(b)) if losses.len() > 1 => permutation_test(a, b, 2000, seed),
        _ => 1.0,
    };
    Ok(PerLoopReport { loops, first_vs_last_p: p })
}

/// Per-joint 2D variances at the exit loop, for heatmaps.
pub fn joint_variance_map(loops: &LoopResult) -> Vec<f64> {
    crate::uncertainty::joint_variances(&loops.alpha_2d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let q = quartiles(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(q, Quartiles { min: 1.0, q1: 2.0, median: 3.0, q3: 4.0, max: 5.0 });
    }

    #[test]
    fn spearman_of_monotone_data() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 25.0, 100.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cumulative_cost_grows_by_one_loop() {
        let t = count_flops(&Ir9Config::default()).unwrap();
        for w in t.cumulative.windows(2) {
            assert_eq!(w[1] - w[0], t.per_loop);
        }
        assert_eq!(t.cumulative[0], t.feature_extractor + t.per_loop);
    }
}
