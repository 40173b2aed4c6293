//! Command-line driver: config resolution, artifact provenance and the
//! subcommands of the `dirnet` binary.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dirnet::backbone::AmgMode;
use dirnet::evalkit::{self, EvalConfig, GateSpec, Knob};
use dirnet::gating::{write_trajectories_csv, DecideMode};
use dirnet::synthdata::{generate_dataset, Dataset, GenConfig};
use dirnet::training::{self, Checkpoint, GateTrainConfig, Protocol, TrainConfig};
use dirnet::uncertainty::{confidence_heatmap, joint_variances, pgm_bytes};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub knob: Knob,
    /// Knob values, ascending.
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { knob: Knob::TauVar, values: vec![0.25, 0.5, 1.0, 2.0, 4.0] }
    }
}

/// Every setting of a run. Sections missing from a config file keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: GenConfig,
    pub train: TrainConfig,
    pub gate: GateTrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    /// Worker threads for data generation and evaluation; 0 means all cores.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: GenConfig::default(),
            train: TrainConfig::default(),
            gate: GateTrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            jobs: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GateKind {
    Full,
    Fixed,
    Threshold,
    Policy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GateMode {
    Sample,
    Argmax,
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// JSON config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed of every stage (data, init, gate, evaluation).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Image size of the data and the model input.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub loop_point: Option<usize>,
    #[arg(long)]
    pub l_max: Option<usize>,
    #[arg(long)]
    pub amg_mode: Option<AmgMode>,
    #[arg(long)]
    pub protocol: Option<Protocol>,
    #[arg(long)]
    pub epochs_initial: Option<usize>,
    #[arg(long)]
    pub epochs_per_loop: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Exit gate used by evaluation.
    #[arg(long, value_enum)]
    pub gate: Option<GateKind>,
    #[arg(long)]
    pub tau_var: Option<f64>,
    /// Policy temperature for gate training and evaluation.
    #[arg(long)]
    pub tau_gate: Option<f64>,
    #[arg(long, value_enum)]
    pub gate_mode: Option<GateMode>,
    /// Exit loop of the fixed gate.
    #[arg(long)]
    pub exit_loop: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train the network.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to `<out>.log.json`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train the exit gate of a checkpoint.
    TrainGate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation trajectories of the trained gate as CSV.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitName,
        /// Directory for uncertainty heatmaps.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        heatmap_samples: usize,
        #[command(flatten)]
        o: Overrides,
    },
    /// Accuracy / cost trade-off curve over one gating knob.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitName,
        #[arg(long)]
        knob: Option<Knob>,
        /// Comma-separated ascending knob values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Print the FLOPs table of the model config.
    Flops {
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        o: Overrides,
    },
    /// Human-readable dump of a checkpoint or dataset header.
    Inspect {
        path: PathBuf,
        /// Also print the training log of a checkpoint.
        #[arg(long)]
        log: bool,
    },
}

#[derive(Parser, Debug)]
#[command(name = "dirnet", version, about = "Dynamic iterative refinement network for hand keypoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Validation, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Runtime, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => 1,
            ErrorKind::Runtime => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<dirnet::Error> for CliError {
    fn from(e: dirnet::Error) -> Self {
        let kind = if e.is_validation() || matches!(e, dirnet::Error::Format { .. }) {
            ErrorKind::Validation
        } else {
            ErrorKind::Runtime
        };
        CliError { kind, message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Git-style content hash: SHA-256 of `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub name: String,
    pub hash: String,
}

/// Provenance embedded in every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<InputRef>,
}

impl Provenance {
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("provenance serializes")
    }

    /// Compact JSON split into `# `-ready single lines.
    pub fn comment_lines(&self) -> Vec<String> {
        vec![format!("dirnet {}", serde_json::to_string(self).expect("provenance serializes"))]
    }
}

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn input_ref(path: &Path, bytes: &[u8]) -> InputRef {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    InputRef { name, hash: content_hash(bytes) }
}

fn write_output(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn to_json(v: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializes");
    s.push(b'\n');
    s
}

/// Defaults, then the config file, then flags.
pub fn resolve(o: &Overrides) -> CliResult<(RunConfig, Vec<InputRef>)> {
    let mut inputs = Vec::new();
    let mut cfg = match &o.config {
        Some(path) => {
            let bytes = read_input(path)?;
            inputs.push(input_ref(path, &bytes));
            serde_json::from_slice(&bytes).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    apply(&mut cfg, o)?;
    Ok((cfg, inputs))
}

pub fn apply(cfg: &mut RunConfig, o: &Overrides) -> CliResult<()> {
    if let Some(s) = o.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
        cfg.gate.seed = s;
        cfg.eval.seed = s;
    }
    if let Some(n) = o.samples {
        cfg.data.samples = n;
    }
    if let Some(n) = o.image_size {
        cfg.data.image_size = n;
        cfg.train.model.input_size = n;
    }
    let m = &mut cfg.train.model;
    if let Some(v) = o.base_channels {
        m.base_channels = v;
    }
    if let Some(v) = o.loop_point {
        m.loop_point = v;
    }
    if let Some(v) = o.l_max {
        m.l_max = v;
    }
    if let Some(v) = o.amg_mode {
        m.amg_mode = v;
    }
    if let Some(v) = o.protocol {
        cfg.train.protocol = v;
    }
    if let Some(v) = o.epochs_initial {
        cfg.train.epochs_initial = v;
    }
    if let Some(v) = o.epochs_per_loop {
        cfg.train.epochs_per_loop = v;
    }
    if let Some(v) = o.lambda {
        cfg.gate.lambda = v;
    }
    if let Some(v) = o.tau_gate {
        cfg.gate.tau_gate = v;
    }
    if let Some(v) = o.jobs {
        cfg.jobs = v;
    }
    cfg.eval.gate = resolve_gate(cfg.eval.gate, cfg.gate.tau_gate, o)?;
    cfg.eval.jobs = cfg.jobs;
    Ok(())
}

/// `--gate` picks the kind; without it the parameter flags imply one
/// (`--tau-var` threshold, `--tau-gate`/`--gate-mode` policy, `--exit-loop`
/// fixed). Parameters not given keep the file value.
fn resolve_gate(current: GateSpec, train_tau: f64, o: &Overrides) -> CliResult<GateSpec> {
    let mut implied = Vec::new();
    if o.tau_var.is_some() {
        implied.push(GateKind::Threshold);
    }
    if o.tau_gate.is_some() || o.gate_mode.is_some() {
        implied.push(GateKind::Policy);
    }
    if o.exit_loop.is_some() {
        implied.push(GateKind::Fixed);
    }
    let kind = match (o.gate, implied.as_slice()) {
        (Some(k), _) => k,
        (None, []) => return Ok(current),
        (None, [k]) => *k,
        (None, _) => return Err(CliError::validation("gate: flags of different gates given; pick one with --gate")),
    };
    Ok(match kind {
        GateKind::Full => GateSpec::Full,
        GateKind::Fixed => {
            let file = if let GateSpec::Fixed { loop_index } = current { Some(loop_index) } else { None };
            let loop_index = o.exit_loop.or(file).ok_or_else(|| CliError::validation("exit_loop: fixed gate needs --exit-loop"))?;
            GateSpec::Fixed { loop_index }
        }
        GateKind::Threshold => {
            let file = if let GateSpec::Threshold { tau_var } = current { Some(tau_var) } else { None };
            let tau_var = o.tau_var.or(file).ok_or_else(|| CliError::validation("tau_var: threshold gate needs --tau-var"))?;
            if !(tau_var >= 0.0 && tau_var.is_finite()) {
                return Err(CliError::validation(format!("tau_var: {tau_var} must be non-negative")));
            }
            GateSpec::Threshold { tau_var }
        }
        GateKind::Policy => {
            let (file_tau, file_mode) = match current {
                GateSpec::Policy { tau_gate, mode } => (Some(tau_gate), Some(mode)),
                _ => (None, None),
            };
            let tau_gate = o.tau_gate.or(file_tau).unwrap_or(train_tau);
            if !(tau_gate > 0.0 && tau_gate.is_finite()) {
                return Err(CliError::validation(format!("tau_gate: {tau_gate} must be positive")));
            }
            let mode = match o.gate_mode {
                Some(GateMode::Sample) => DecideMode::Sample,
                Some(GateMode::Argmax) => DecideMode::Argmax,
                None => file_mode.unwrap_or(DecideMode::Sample),
            };
            GateSpec::Policy { tau_gate, mode }
        }
    })
}

fn load_dataset(path: &Path) -> CliResult<(Dataset, InputRef)> {
    let bytes = read_input(path)?;
    let r = input_ref(path, &bytes);
    Ok((Dataset::from_bytes(&bytes, path)?, r))
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, InputRef)> {
    let bytes = read_input(path)?;
    let r = input_ref(path, &bytes);
    Ok((Checkpoint::from_bytes(&bytes, path)?, r))
}

fn split_indices(data: &Dataset, split: SplitName) -> CliResult<Vec<usize>> {
    let idx = match split {
        SplitName::Train => data.train_indices(),
        SplitName::Val => data.val_indices(),
        SplitName::Test => data.test_indices(),
    };
    if idx.is_empty() {
        return Err(CliError::validation(format!("split: {split:?} split of the dataset is empty")));
    }
    Ok(idx)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData { .. } => "gen-data",
        Command::Train { .. } => "train",
        Command::TrainGate { .. } => "train-gate",
        Command::Eval { .. } => "eval",
        Command::Sweep { .. } => "sweep",
        Command::Flops { .. } => "flops",
        Command::Inspect { .. } => "inspect",
    }
}

fn provenance(command: &Command, config: &RunConfig, inputs: Vec<InputRef>) -> Provenance {
    Provenance { tool: format!("dirnet {}", env!("CARGO_PKG_VERSION")), command: command_name(command).into(), config: config.clone(), inputs }
}

fn with_comments(comments: &[String], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for c in comments {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(body);
    out
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn run<W: Write>(cli: &Cli, out: &mut W) -> CliResult<()> {
    let say = |out: &mut W, s: String| -> CliResult<()> {
        writeln!(out, "{s}").map_err(|e| CliError::runtime(format!("stdout: {e}")))
    };
    match &cli.command {
        Command::GenData { out: path, o } => {
            let (cfg, inputs) = resolve(o)?;
            let mut data = generate_dataset(&cfg.data, cfg.jobs)?;
            data.header.meta = provenance(&cli.command, &cfg, inputs).to_value();
            write_output(path, &data.to_bytes())?;
            say(out, format!("wrote {} samples to {}", data.samples.len(), path.display()))
        }
        Command::Train { data, out: path, log, o } => {
            let (cfg, mut inputs) = resolve(o)?;
            let (dataset, r) = load_dataset(data)?;
            inputs.push(r);
            let mut ckpt = training::train(&cfg.train, &dataset)?;
            let prov = provenance(&cli.command, &cfg, inputs);
            ckpt.meta = prov.to_value();
            write_output(path, &ckpt.to_bytes())?;
            let log_path = log.clone().unwrap_or_else(|| suffixed(path, ".log.json"));
            let log_doc = serde_json::json!({ "log": ckpt.log, "meta": prov });
            write_output(&log_path, &to_json(&log_doc))?;
            let last = ckpt.log.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN);
            say(out, format!("trained {} epochs, final train loss {last:.5}; wrote {}", ckpt.log.epochs.len(), path.display()))
        }
        Command::TrainGate { ckpt, data, out: path, trajectories, o } => {
            let (cfg, mut inputs) = resolve(o)?;
            let (base, r) = load_checkpoint(ckpt)?;
            inputs.push(r);
            let (dataset, r) = load_dataset(data)?;
            inputs.push(r);
            let mut gated = training::train_gate(&base, &cfg.gate, &dataset)?;
            let prov = provenance(&cli.command, &cfg, inputs);
            gated.meta = prov.to_value();
            write_output(path, &gated.to_bytes())?;
            if let Some(tp) = trajectories {
                let val = split_indices(&dataset, SplitName::Val)?;
                let traces = training::trace_loops(&gated.net, &dataset, &val)?;
                let gflops = match cfg.gate.per_loop_gflops {
                    Some(g) => g,
                    None => evalkit::count_flops(gated.net.config())?.per_loop_gflops(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.gate.seed);
                let trajs = traces
                    .iter()
                    .map(|t| {
                        training::rollout(t, &gated.net, cfg.gate.tau_gate, DecideMode::Sample, gflops, cfg.gate.lambda, cfg.gate.cost, &mut rng)
                    })
                    .collect::<dirnet::Result<Vec<_>>>()?;
                let mut csv = Vec::new();
                write_trajectories_csv(&mut csv, &trajs).map_err(|e| CliError::runtime(e.to_string()))?;
                write_output(tp, &with_comments(&prov.comment_lines(), &csv))?;
            }
            let last = gated.log.gate.last().map(|g| format!("{g:?}")).unwrap_or_default();
            say(out, format!("trained gate; last epoch {last}; wrote {}", path.display()))
        }
        Command::Eval { ckpt, data, out: path, split, heatmaps, heatmap_samples, o } => {
            let (cfg, mut inputs) = resolve(o)?;
            let (ck, r) = load_checkpoint(ckpt)?;
            inputs.push(r);
            let (dataset, r) = load_dataset(data)?;
            inputs.push(r);
            if matches!(cfg.eval.gate, GateSpec::Policy { .. }) && !ck.gate_trained {
                return Err(CliError::validation(format!("gate: {} has no trained gate; run train-gate first", ckpt.display())));
            }
            let idx = split_indices(&dataset, *split)?;
            let mut report = evalkit::evaluate(&ck.net, &dataset, &idx, &cfg.eval)?;
            let prov = provenance(&cli.command, &cfg, inputs);
            report.meta = prov.to_value();
            write_output(path, &to_json(&report))?;
            if let Some(dir) = heatmaps {
                write_heatmaps(dir, &ck, &dataset, &idx[..(*heatmap_samples).min(idx.len())], &prov)?;
            }
            say(
                out,
                format!(
                    "{} samples: auc_2d {:.4} auc_3d {:.4} avg loops {:.3} avg GFLOPs {:.6}",
                    report.samples, report.auc_2d, report.auc_3d, report.avg_loops, report.avg_gflops
                ),
            )
        }
        Command::Sweep { ckpt, data, out: path, split, knob, values, o } => {
            let (mut cfg, mut inputs) = resolve(o)?;
            if let Some(k) = knob {
                cfg.sweep.knob = *k;
            }
            if let Some(v) = values {
                cfg.sweep.values = v.clone();
            }
            if cfg.sweep.values.is_empty() {
                return Err(CliError::validation("values: sweep needs at least one value"));
            }
            let (ck, r) = load_checkpoint(ckpt)?;
            inputs.push(r);
            let (dataset, r) = load_dataset(data)?;
            inputs.push(r);
            if cfg.sweep.knob == Knob::TauGate && !ck.gate_trained {
                return Err(CliError::validation(format!("knob: {} has no trained gate", ckpt.display())));
            }
            let idx = split_indices(&dataset, *split)?;
            let samples = evalkit::run_loops(&ck.net, &dataset, &idx, cfg.jobs)?;
            let rows = evalkit::tradeoff_sweep(&ck.net, &samples, &cfg.eval, cfg.sweep.knob, &cfg.sweep.values)?;
            let mut csv = Vec::new();
            evalkit::write_sweep_csv(&mut csv, &rows).map_err(|e| CliError::runtime(e.to_string()))?;
            let prov = provenance(&cli.command, &cfg, inputs);
            write_output(path, &with_comments(&prov.comment_lines(), &csv))?;
            say(out, format!("wrote {} rows to {}", rows.len(), path.display()))
        }
        Command::Flops { json, o } => {
            let (cfg, _) = resolve(o)?;
            let table = evalkit::count_flops(&cfg.train.model)?;
            if *json {
                say(out, serde_json::to_string_pretty(&table).expect("serializes"))
            } else {
                write!(out, "{}", table.to_text()).map_err(|e| CliError::runtime(format!("stdout: {e}")))
            }
        }
        Command::Inspect { path, log } => {
            let text = inspect(path, *log)?;
            write!(out, "{text}").map_err(|e| CliError::runtime(format!("stdout: {e}")))
        }
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// One PGM per sample and loop: the per-joint confidence maps merged by maximum.
fn write_heatmaps(dir: &Path, ck: &Checkpoint, data: &Dataset, idx: &[usize], prov: &Provenance) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    let size = data.header.image_size;
    let batch = data.batch::<f32>(idx)?;
    let res = ck.net.infer(&batch.images, ck.net.l_max())?;
    for (&i, loops) in idx.iter().zip(&res) {
        for (l, r) in loops.iter().enumerate() {
            let centers: Vec<[f64; 2]> = r.joints_2d.chunks(2).map(|c| [c[0], c[1]]).collect();
            let maps = confidence_heatmap(&centers, &joint_variances(&r.alpha_2d), size)?;
            let merged: Vec<f64> = (0..size * size).map(|p| maps.iter().map(|m| m[p]).fold(0.0, f64::max)).collect();
            let mut comments = prov.comment_lines();
            comments.push(format!("sample {i} loop {l}"));
            let bytes = pgm_bytes(&merged, size, size, &comments)?;
            write_output(&dir.join(format!("sample{i:05}_loop{l}.pgm")), &bytes)?;
        }
    }
    Ok(())
}

pub fn inspect(path: &Path, show_log: bool) -> CliResult<String> {
    let bytes = read_input(path)?;
    let mut s = String::new();
    let hash = content_hash(&bytes);
    match bytes.get(..4) {
        Some(b"IPD1") => {
            let data = Dataset::from_bytes(&bytes, path)?;
            let h = &data.header;
            s += &format!("dataset {}\nhash {hash}\n", path.display());
            s += &format!("samples {} image {}x{} pose_dim {}\n", h.count, h.image_size, h.image_size, h.pose_dim);
            s += &format!("split train {:?} val {:?} test {:?}\n", h.split.train, h.split.val, h.split.test);
            s += &format!("config {}\n", serde_json::to_string_pretty(&h.config).expect("serializes"));
            if !h.meta.is_null() {
                s += &format!("meta {}\n", serde_json::to_string_pretty(&h.meta).expect("serializes"));
            }
        }
        Some(b"DIRN") => {
            let ck = Checkpoint::from_bytes(&bytes, path)?;
            let n: usize = ck.net.params.entries().iter().map(|e| e.value.len()).sum();
            s += &format!("checkpoint {}\nhash {hash}\n", path.display());
            s += &format!("parameters {} in {} tensors\n", n, ck.net.params.len());
            s += &format!("gate trained {}\n", ck.gate_trained);
            s += &format!("model {}\n", serde_json::to_string_pretty(ck.net.config()).expect("serializes"));
            if let Some(t) = &ck.train_config {
                s += &format!("protocol {:?} epochs {}\n", t.protocol, t.total_epochs());
            }
            for e in ck.net.params.entries() {
                s += &format!("  {:<40} {:?} {:?}\n", e.name, e.group, e.value.shape());
            }
            if show_log {
                s += &format!("log {}\n", serde_json::to_string_pretty(&ck.log).expect("serializes"));
            }
            if !ck.meta.is_null() {
                s += &format!("meta {}\n", serde_json::to_string_pretty(&ck.meta).expect("serializes"));
            }
        }
        _ => return Err(CliError::validation(format!("{}: not a dataset or checkpoint", path.display()))),
    }
    Ok(s)
}
