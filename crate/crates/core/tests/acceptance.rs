//! Acceptance suite. Prints one line per criterion and fails if any hard
//! criterion fails. The protocol comparison is soft and only reported.

use std::sync::Arc;
use std::time::{Duration, Instant};

use dirnet::backbone::{AmgMode, Ir9Config};
use dirnet::diff::gradcheck::{check_gradients, relative_error};
use dirnet::diff::{BatchNormState, Mode, Tape, Tensor, Var};
use dirnet::evalkit::{count_flops, per_loop_report, report_from_loops, run_loops, tradeoff_sweep, EvalConfig, GateSpec, Knob};
use dirnet::gating::DecideMode;
use dirnet::model::DirNet;
use dirnet::nn::Group;
use dirnet::posehead::{forward_kinematics, project_points, RegWeights, Skeleton, NUM_BONES, NUM_DOF, NUM_JOINTS};
use dirnet::synthdata::{generate_dataset, Dataset, GenConfig};
use dirnet::training::{batch_gradients, train, train_gate, Checkpoint, GateTrainConfig, Protocol, TrainConfig};
use dirnet::uncertainty::{var_loss_2d, var_loss_3d, Var2dForm, ALPHA_MAX, ALPHA_MIN};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::flops_oracle::oracle;

const FD_STEP: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-4;
const COMPOSED_TOL: f64 = 1e-3;
const COMPOSED_WEIGHTS: usize = 20;
const PRIMITIVE_TRIALS: u64 = 10;
const MAX_KINK_REDRAWS: usize = 20;
/// Denominator floor of the relative error for gradients near zero.
const REL_FLOOR: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const STATIONARY_TOL: f64 = 1e-3;
const BONE_TOL: f64 = 1e-6;
const PROJECTION_TOL: f64 = 1e-9;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const REFINEMENT_RATIO: f64 = 0.95;
const PROTOCOL_SEEDS: [u64; 3] = [0, 1, 2];
const PROTOCOL_WINS: usize = 2;
const SWEEP_VALUES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
const GATE_SWEEP_SLACK: f64 = 0.1;
const AUC_RETAINED: f64 = 0.97;
const SPEARMAN_MIN: f64 = 0.3;
const MIN_VAL_SAMPLES: usize = 250;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    soft: bool,
    detail: String,
}

impl Outcome {
    fn line(&self) -> String {
        let tag = match (self.pass, self.soft) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "SOFT-FAIL",
        };
        format!("criterion {:>2} {:<9} {}: {}", self.id, tag, self.name, self.detail)
    }
}

fn record(out: &mut Vec<Outcome>, o: Outcome) {
    println!("{}", o.line());
    out.push(o);
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> dirnet::Result<Var>>;
type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;

fn inputs(shapes: &'static [(&'static [usize], f64, f64)]) -> Inputs {
    Box::new(move |rng| shapes.iter().map(|(s, lo, hi)| random(rng, s, *lo, *hi)).collect())
}

/// Every differentiable primitive with input generators.
fn primitive_cases() -> Vec<(&'static str, Inputs, Build)> {
    let skel = Arc::new(Skeleton::hand());
    let g2 = Tensor::from_fn([2, NUM_JOINTS, 2], |i| ((i * 7) % 11) as f64 * 0.4 - 2.0);
    let g3 = Tensor::from_fn([2, NUM_JOINTS, 3], |i| ((i * 5) % 13) as f64 * 0.1 - 0.6);
    let mut cases: Vec<(&'static str, Inputs, Build)> = vec![
        ("conv2d", inputs(&[(&[2, 3, 5, 5], -1.0, 1.0), (&[4, 3, 3, 3], -0.5, 0.5), (&[4], -0.5, 0.5)]), Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 1))),
        ("conv2d stride 2", inputs(&[(&[2, 2, 6, 6], -1.0, 1.0), (&[3, 2, 3, 3], -0.5, 0.5), (&[3], -0.5, 0.5)]), Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 1))),
        ("batchnorm train", inputs(&[(&[3, 2, 3, 3], -2.0, 2.0), (&[2], -1.5, 1.5), (&[2], -1.0, 1.0)]), Box::new(|t, v| t.batchnorm2d(v[0], v[1], v[2], &mut BatchNormState::new(2), Mode::Train))),
        ("batchnorm eval", inputs(&[(&[2, 3, 2, 2], -2.0, 2.0), (&[3], -1.5, 1.5), (&[3], -1.0, 1.0)]), Box::new(|t, v| {
            let mut st = BatchNormState::new(3);
            st.running_mean = vec![0.3, -0.2, 1.0];
            st.running_var = vec![0.5, 2.0, 1.2];
            t.batchnorm2d(v[0], v[1], v[2], &mut st, Mode::Eval)
        })),
        ("linear", inputs(&[(&[4, 6], -1.0, 1.0), (&[5, 6], -1.0, 1.0), (&[5], -1.0, 1.0)]), Box::new(|t, v| t.linear(v[0], v[1], v[2]))),
        ("sigmoid", inputs(&[(&[3, 4], -3.0, 3.0)]), Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("exp", inputs(&[(&[3, 4], -2.0, 2.0)]), Box::new(|t, v| Ok(t.exp(v[0])))),
        ("relu", inputs(&[(&[3, 4], -2.0, 2.0)]), Box::new(|t, v| Ok(t.relu(v[0])))),
        ("square", inputs(&[(&[7], -2.0, 2.0)]), Box::new(|t, v| Ok(t.square(v[0])))),
        ("smooth_l1", inputs(&[(&[12], -3.0, 3.0)]), Box::new(|t, v| Ok(t.smooth_l1(v[0])))),
        ("scale", inputs(&[(&[5], -2.0, 2.0)]), Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("clamp", inputs(&[(&[9], -3.0, 3.0)]), Box::new(|t, v| Ok(t.clamp(v[0], -1.0, 1.5)))),
        ("add", inputs(&[(&[2, 3, 2], -2.0, 2.0), (&[2, 3, 2], -2.0, 2.0)]), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", inputs(&[(&[2, 3, 2], -2.0, 2.0), (&[2, 3, 2], -2.0, 2.0)]), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("hadamard", inputs(&[(&[2, 3, 2], -2.0, 2.0), (&[2, 3, 2], -2.0, 2.0)]), Box::new(|t, v| t.hadamard(v[0], v[1]))),
        ("mean_rows", inputs(&[(&[3, 5], -2.0, 2.0)]), Box::new(|t, v| Ok(t.mean_rows(v[0])))),
        ("sum_rows", inputs(&[(&[3, 5], -2.0, 2.0)]), Box::new(|t, v| Ok(t.sum_rows(v[0])))),
        ("mean_all", inputs(&[(&[3, 5], -2.0, 2.0)]), Box::new(|t, v| Ok(t.mean_all(v[0])))),
        ("narrow", inputs(&[(&[3, 5], -2.0, 2.0)]), Box::new(|t, v| t.narrow(v[0], 1, 3))),
        ("pick", inputs(&[(&[3, 5], -2.0, 2.0)]), Box::new(|t, v| t.pick(v[0], &[4, 0, 2]))),
        ("reshape", inputs(&[(&[3, 5], -2.0, 2.0)]), Box::new(|t, v| t.reshape(v[0], [5, 3]))),
        ("global_avg_pool", inputs(&[(&[2, 3, 3, 4], -1.0, 1.0)]), Box::new(|t, v| t.global_avg_pool(v[0]))),
        ("max_pool2d", inputs(&[(&[2, 2, 4, 4], -1.0, 1.0)]), Box::new(|t, v| t.max_pool2d(v[0], 2, 2))),
        ("softmax_temperature", inputs(&[(&[3, 4], -2.0, 2.0)]), Box::new(|t, v| t.softmax_temperature(v[0], 0.7))),
        ("log_softmax_temperature", inputs(&[(&[3, 2], -2.0, 2.0)]), Box::new(|t, v| t.log_softmax_temperature(v[0], 1.9))),
        ("pixel_shuffle", inputs(&[(&[2, 8, 2, 3], -1.0, 1.0)]), Box::new(|t, v| t.pixel_shuffle(v[0], 2))),
        ("space_to_depth", inputs(&[(&[1, 2, 4, 4], -1.0, 1.0)]), Box::new(|t, v| t.space_to_depth(v[0], 2))),
        ("upsample_nearest", inputs(&[(&[1, 2, 2, 3], -1.0, 1.0)]), Box::new(|t, v| t.upsample_nearest(v[0], 2))),
        ("channel_resize down", inputs(&[(&[2, 6, 2, 2], -1.0, 1.0)]), Box::new(|t, v| t.channel_resize(v[0], 3))),
        ("channel_resize up", inputs(&[(&[2, 2, 2, 2], -1.0, 1.0)]), Box::new(|t, v| t.channel_resize(v[0], 6))),
        ("rodrigues + projection", inputs(&[(&[2, 5, 3], -1.0, 1.0), (&[2, 3], -2.0, 2.0), (&[2, 2], -3.0, 3.0), (&[2, 1], 0.5, 2.0)]), Box::new(|t, v| {
            let r = t.rodrigues(v[1])?;
            t.project_weak_perspective(v[0], r, v[2], v[3])
        })),
        ("3d variance loss", inputs(&[(&[2, 6], 0.0, 3.0), (&[2, 6], -2.0, 2.0)]), Box::new(|t, v| t.var_loss_3d(v[0], v[1]))),
        ("2d variance loss, laplace", inputs(&[(&[2, 6], 0.0, 3.0), (&[2, 6], -2.0, 2.0)]), Box::new(|t, v| t.var_loss_2d(v[0], v[1], Var2dForm::Laplace))),
        ("2d variance loss, shifted", inputs(&[(&[2, 6], 0.6, 3.0), (&[2, 6], -2.0, 2.0)]), Box::new(|t, v| t.var_loss_2d(v[0], v[1], Var2dForm::Shifted))),
        ("pose prior", inputs(&[(&[2, NUM_DOF], -1.5, 1.5), (&[2, NUM_BONES], 0.6, 1.8)]), Box::new(|t, v| t.pose_regularizer(v[0], v[1], RegWeights::default()))),
    ];
    cases.push((
        "forward kinematics",
        inputs(&[(&[2, NUM_DOF], -1.2, 1.2), (&[2, NUM_BONES], 0.6, 1.8)]),
        Box::new(move |t, v| t.forward_kinematics(&skel, v[0], v[1])),
    ));
    cases.push((
        "pose losses",
        inputs(&[(&[2, NUM_JOINTS, 2], -3.0, 3.0), (&[2, NUM_JOINTS, 3], -1.0, 1.0)]),
        Box::new(move |t, v| {
            let a = t.constant(g2.clone());
            let b = t.constant(g3.clone());
            let l2 = t.loss_2d(v[0], a)?;
            let l3 = t.loss_3d(v[1], b)?;
            t.add(l2, l3)
        }),
    ));
    cases
}

/// Weighted sum of every output element with fixed random weights.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> dirnet::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.hadamard(out, w)?;
    Ok(tape.sum_all(p))
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst_primitive = (0.0f64, "");
    for (name, make, build) in primitive_cases() {
        for trial in 0..PRIMITIVE_TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
            let xs = make(&mut rng);
            let report = check_gradients(&xs, |t, v| {
                let out = build(t, v)?;
                project(t, out, trial)
            }, FD_STEP, None, &mut rng)
            .expect("gradient check runs");
            if report.max_rel_error > worst_primitive.0 {
                worst_primitive = (report.max_rel_error, name);
            }
        }
    }

    let model = Ir9Config::default();
    let cfg = TrainConfig { model: model.clone(), ..Default::default() };
    let data = generate_dataset(&GenConfig { samples: 2, seed: 21, ..Default::default() }, 1).expect("data");
    let batch = data.batch::<f64>(&[0, 1]).expect("batch");
    let net = DirNet::<f32>::new(&model, 13).expect("net").cast::<f64>();
    let trainable = |g: Group| g != Group::Gate;
    let total = |n: &DirNet<f64>| {
        let mut bn = n.bn.clone();
        batch_gradients(n, &mut bn, &batch, model.l_max, &cfg, |_| false, Mode::Train, Mode::Train).expect("loss").total
    };
    let mut bn = net.bn.clone();
    let analytic = batch_gradients(&net, &mut bn, &batch, model.l_max, &cfg, trainable, Mode::Train, Mode::Train)
        .expect("gradients")
        .grads;
    let ids: Vec<_> = net.params.ids().filter(|&id| trainable(net.params.entry(id).group)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let numeric = |id, k, h: f64| {
        let mut plus = net.clone();
        plus.params.get_mut(id).data_mut()[k] += h;
        let mut minus = net.clone();
        minus.params.get_mut(id).data_mut()[k] -= h;
        (total(&plus) - total(&minus)) / (2.0 * h)
    };
    // a weight whose probe at h straddles a relu or max-pool kink has no
    // central difference; such draws are replaced and counted
    let mut worst_composed: f64 = 0.0;
    let mut checked = 0;
    let mut kinks = 0;
    while checked < COMPOSED_WEIGHTS && kinks <= MAX_KINK_REDRAWS {
        let id = *ids.choose(&mut rng).unwrap();
        let k = rng.gen_range(0..net.params.get(id).len());
        let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
        let coarse = numeric(id, k, FD_STEP);
        let fine = numeric(id, k, FD_STEP / 10.0);
        if relative_error(coarse, fine, REL_FLOOR) >= COMPOSED_TOL {
            kinks += 1;
            continue;
        }
        worst_composed = worst_composed.max(relative_error(a, coarse, REL_FLOOR));
        checked += 1;
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 1,
        name: "gradient suite",
        pass: worst_primitive.0 < PRIMITIVE_TOL && checked == COMPOSED_WEIGHTS && worst_composed < COMPOSED_TOL && elapsed < GRAD_BUDGET,
        soft: false,
        detail: format!(
            "primitives max rel err {:.2e} ({}) < {PRIMITIVE_TOL:e}; composed max rel err {:.2e} over {}/{COMPOSED_WEIGHTS} weights < {COMPOSED_TOL:e} ({} kink draws replaced); {:.1} s < {} s",
            worst_primitive.0,
            worst_primitive.1,
            worst_composed,
            checked,
            kinks,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    }
}

/// Golden-section minimization on `[lo, hi]`.
fn argmin(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > 1e-10 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    (lo + hi) / 2.0
}

fn criterion_stationary_points() -> Outcome {
    let mut worst: f64 = 0.0;
    for e in [0.01, 0.3, 1.0, 4.0, 250.0] {
        let a = argmin(|a| var_loss_3d(&[e], &[a]), ALPHA_MIN, ALPHA_MAX);
        worst = worst.max((a - e.ln()).abs());
    }
    for l in [0.6, 0.75, 1.5, 3.0, 20.0] {
        let a = argmin(|a| var_loss_2d(&[l], &[a], Var2dForm::Shifted), ALPHA_MIN, ALPHA_MAX);
        worst = worst.max((a - (2.0 * l - 1.0).ln()).abs());
    }
    Outcome {
        id: 2,
        name: "variance loss minimizers",
        pass: worst < STATIONARY_TOL,
        soft: false,
        detail: format!("max |alpha* - closed form| {worst:.2e} < {STATIONARY_TOL:e}"),
    }
}

fn criterion_kinematics() -> Outcome {
    let skel = Skeleton::hand();
    let rest = forward_kinematics(&skel, &[0.0; NUM_DOF], &[1.0; NUM_BONES]);
    let mut chain = vec![[0.0f64; 3]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let base = skel.joints[j].parent.map_or([0.0; 3], |p| chain[p]);
        let r = skel.joints[j].rest;
        chain[j] = [base[0] + r[0], base[1] + r[1], base[2] + r[2]];
    }
    let rest_exact = rest == chain;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bone_err: f64 = 0.0;
    for _ in 0..500 {
        let theta: Vec<f64> = (0..NUM_DOF).map(|_| rng.gen_range(-1.6..1.6)).collect();
        let beta: Vec<f64> = (0..NUM_BONES).map(|_| rng.gen_range(0.5..2.0)).collect();
        let pos = forward_kinematics(&skel, &theta, &beta);
        for j in 1..NUM_JOINTS {
            let p = skel.joints[j].parent.unwrap();
            let d = (0..3).map(|k| (pos[j][k] - pos[p][k]).powi(2)).sum::<f64>().sqrt();
            bone_err = bone_err.max((d - beta[j - 1] * skel.rest_length(j)).abs());
        }
    }

    // (point, axis-angle, t, s) -> expected pixels, by hand
    let half_pi = std::f64::consts::FRAC_PI_2;
    let cases: [([f64; 3], [f64; 3], [f64; 2], f64, [f64; 2]); 5] = [
        ([1.0, 2.0, 3.0], [0.0; 3], [0.0, 0.0], 1.0, [1.0, 2.0]),
        ([1.0, 2.0, 3.0], [0.0; 3], [3.0, 4.0], 2.0, [5.0, 8.0]),
        ([1.0, 2.0, 3.0], [0.0, 0.0, half_pi], [0.0, 0.0], 1.0, [-2.0, 1.0]),
        ([1.0, 2.0, 3.0], [half_pi, 0.0, 0.0], [10.0, -1.0], 0.5, [10.5, -2.5]),
        ([0.5, -1.0, 2.0], [0.0, half_pi, 0.0], [1.0, 1.0], 4.0, [9.0, -3.0]),
    ];
    let mut proj_err: f64 = 0.0;
    for (j, aa, t, s, want) in cases {
        let plain = project_points(&[j], &dirnet::posehead::geometry::rodrigues(&aa), t, s)[0];
        let mut tape = Tape::<f64>::new();
        let jv = tape.constant(Tensor::new([1, 1, 3], j.to_vec()).unwrap());
        let av = tape.constant(Tensor::new([1, 3], aa.to_vec()).unwrap());
        let r = tape.rodrigues(av).unwrap();
        let tv = tape.constant(Tensor::new([1, 2], t.to_vec()).unwrap());
        let sv = tape.constant(Tensor::new([1, 1], vec![s]).unwrap());
        let out = tape.project_weak_perspective(jv, r, tv, sv).unwrap();
        let d = tape.value(out).data().to_vec();
        for k in 0..2 {
            proj_err = proj_err.max((plain[k] - want[k]).abs()).max((d[k] - want[k]).abs());
        }
    }
    Outcome {
        id: 3,
        name: "kinematics and projection",
        pass: rest_exact && bone_err < BONE_TOL && proj_err < PROJECTION_TOL,
        soft: false,
        detail: format!(
            "rest pose exact: {rest_exact}; bone length err {bone_err:.2e} < {BONE_TOL:e}; projection err {proj_err:.2e} < {PROJECTION_TOL:e}"
        ),
    }
}

fn criterion_flops() -> Outcome {
    let cfg = Ir9Config::default();
    let t = count_flops(&cfg).expect("flops");
    let (fe, per_loop, gate) = oracle(&cfg);
    let exact = (t.feature_extractor, t.per_loop, t.gate) == (fe, per_loop, gate)
        && t.layers.iter().map(|l| l.flops).sum::<u64>() == fe + per_loop + gate;
    let steps: Vec<u64> = t.cumulative.windows(2).map(|w| w[1] - w[0]).collect();
    let constant = steps.iter().all(|&s| s == per_loop) && t.cumulative[0] == fe + per_loop;
    let mut variants = true;
    for loop_point in 1..=4 {
        for amg_mode in [AmgMode::Attention, AmgMode::DirectUpsample, AmgMode::None] {
            let c = Ir9Config { loop_point, amg_mode, ..cfg.clone() };
            let t = count_flops(&c).expect("flops");
            variants &= (t.feature_extractor, t.per_loop, t.gate) == oracle(&c);
        }
    }
    Outcome {
        id: 9,
        name: "FLOPs accountant",
        pass: exact && constant && variants,
        soft: false,
        detail: format!(
            "fe {} / oracle {fe}, per loop {} / oracle {per_loop}, gate {} / oracle {gate}; loop increments {steps:?}; all loop points and AMG modes match: {variants}",
            t.feature_extractor, t.per_loop, t.gate
        ),
    }
}

fn reference_train(protocol: Protocol, seed: u64) -> TrainConfig {
    TrainConfig { protocol, seed, ..Default::default() }
}

fn full_samples(ckpt: &Checkpoint, data: &Dataset) -> Vec<dirnet::evalkit::SampleLoops> {
    run_loops(&ckpt.net, data, &data.val_indices(), 0).expect("loops")
}

fn criterion_refinement(data: &Dataset) -> (Outcome, Checkpoint) {
    let cfg = reference_train(Protocol::Progressive, PROTOCOL_SEEDS[0]);
    let start = Instant::now();
    let ckpt = train(&cfg, data).expect("training");
    let elapsed = start.elapsed();
    let samples = full_samples(&ckpt, data);
    let r = report_from_loops(&ckpt.net, &samples, &EvalConfig::default()).expect("report");
    let first = r.per_loop[0].mean_2d;
    let last = r.per_loop[cfg.model.l_max].mean_2d;
    let ratio = last / first;
    let h = &data.header.split;
    let sizes_ok = h.train[1] - h.train[0] == 2000 && h.val[1] - h.val[0] == 250;
    let o = Outcome {
        id: 4,
        name: "refinement gain",
        pass: sizes_ok && elapsed < TRAIN_BUDGET && ratio <= REFINEMENT_RATIO,
        soft: false,
        detail: format!(
            "val mean 2D error per loop {:?} px; final/loop-0 {ratio:.4} <= {REFINEMENT_RATIO} required; training {:.0} s < {} s",
            r.per_loop.iter().map(|e| (e.mean_2d * 1e4).round() / 1e4).collect::<Vec<_>>(),
            elapsed.as_secs_f64(),
            TRAIN_BUDGET.as_secs()
        ),
    };
    (o, ckpt)
}

fn criterion_protocols(data: &Dataset, progressive_seed0: &Checkpoint) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for &seed in &PROTOCOL_SEEDS {
        let median = |c: &Checkpoint| {
            let rep = per_loop_report(&full_samples(c, data), seed).expect("per-loop report");
            rep.loops.last().unwrap().median
        };
        let prog = if seed == PROTOCOL_SEEDS[0] {
            median(progressive_seed0)
        } else {
            median(&train(&reference_train(Protocol::Progressive, seed), data).expect("training"))
        };
        let e2e = median(&train(&reference_train(Protocol::E2e, seed), data).expect("training"));
        if prog <= e2e {
            wins += 1;
        }
        rows.push(format!("seed {seed}: progressive {prog:.4} vs e2e {e2e:.4}"));
    }
    Outcome {
        id: 5,
        name: "protocol comparison",
        pass: wins >= PROTOCOL_WINS,
        soft: true,
        detail: format!("median final-loop loss, {}; progressive <= e2e in {wins}/3 (need {PROTOCOL_WINS})", rows.join("; ")),
    }
}

fn criterion_monotone(gated: &Checkpoint, samples: &[dirnet::evalkit::SampleLoops]) -> Outcome {
    let base = EvalConfig::default();
    let var = tradeoff_sweep(&gated.net, samples, &base, Knob::TauVar, &SWEEP_VALUES).expect("sweep");
    let gate = tradeoff_sweep(&gated.net, samples, &base, Knob::TauGate, &SWEEP_VALUES).expect("sweep");
    let v: Vec<f64> = var.iter().map(|r| r.avg_loops).collect();
    let g: Vec<f64> = gate.iter().map(|r| r.avg_loops).collect();
    let var_ok = v.windows(2).all(|w| w[1] <= w[0]);
    let gate_ok = g.windows(2).all(|w| w[1] <= w[0] + GATE_SWEEP_SLACK);
    Outcome {
        id: 6,
        name: "gating monotonicity",
        pass: var_ok && gate_ok,
        soft: false,
        detail: format!("tau {SWEEP_VALUES:?}: variance-threshold loops {v:?}; policy loops {g:?} (slack {GATE_SWEEP_SLACK})"),
    }
}

fn criterion_adaptive(gated: &Checkpoint, samples: &[dirnet::evalkit::SampleLoops]) -> Outcome {
    let full = report_from_loops(&gated.net, samples, &EvalConfig::default()).expect("report");
    let gate = GateSpec::Policy { tau_gate: 1.0, mode: DecideMode::Sample };
    let policy = report_from_loops(&gated.net, samples, &EvalConfig { gate, ..Default::default() }).expect("report");
    let l_max = gated.net.l_max() as f64;
    let kept = policy.auc_3d / full.auc_3d;
    Outcome {
        id: 7,
        name: "adaptive efficiency",
        pass: policy.avg_loops < l_max && kept >= AUC_RETAINED,
        soft: false,
        detail: format!(
            "avg loops {:.3} < {l_max}; 3D AUC {:.4} vs full {:.4} ({:.2}% >= {:.0}%); exits {:?}",
            policy.avg_loops,
            policy.auc_3d,
            full.auc_3d,
            100.0 * kept,
            100.0 * AUC_RETAINED,
            policy.exit_histogram
        ),
    }
}

fn criterion_uncertainty(ckpt: &Checkpoint, samples: &[dirnet::evalkit::SampleLoops]) -> Outcome {
    let r = report_from_loops(&ckpt.net, samples, &EvalConfig::default()).expect("report");
    Outcome {
        id: 8,
        name: "uncertainty validity",
        pass: r.samples >= MIN_VAL_SAMPLES && r.variance_error_spearman > SPEARMAN_MIN,
        soft: false,
        detail: format!("Spearman {:.4} > {SPEARMAN_MIN} on {} validation samples", r.variance_error_spearman, r.samples),
    }
}

fn criterion_determinism() -> Outcome {
    let run = || {
        let gen = GenConfig { samples: 200, seed: 31, ..Default::default() };
        let data = generate_dataset(&gen, 0).expect("data");
        let cfg = TrainConfig { epochs_initial: 2, epochs_per_loop: 1, seed: 31, ..Default::default() };
        let ckpt = train(&cfg, &data).expect("training");
        let report = dirnet::evalkit::evaluate(&ckpt.net, &data, &data.val_indices(), &EvalConfig::default()).expect("eval");
        (data.to_bytes(), ckpt.to_bytes(), serde_json::to_vec(&report).unwrap())
    };
    let a = run();
    let b = run();
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2];
    Outcome {
        id: 10,
        name: "determinism",
        pass: same.iter().all(|&s| s),
        soft: false,
        detail: format!("identical dataset / checkpoint / report bytes: {same:?}"),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    // Numeric arguments select criteria; none runs all of them.
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| selected.is_empty() || selected.contains(&id);
    let start = Instant::now();
    let mut out = Vec::new();
    let cheap: [(usize, fn() -> Outcome); 5] = [
        (1, criterion_gradients),
        (2, criterion_stationary_points),
        (3, criterion_kinematics),
        (9, criterion_flops),
        (10, criterion_determinism),
    ];
    for (id, f) in cheap {
        if wanted(id) {
            record(&mut out, f());
        }
    }

    if [4, 5, 6, 7, 8].into_iter().any(wanted) {
        let data = generate_dataset(&GenConfig::default(), 0).expect("reference data");
        let (refinement, ckpt) = criterion_refinement(&data);
        if wanted(4) {
            record(&mut out, refinement);
        }
        let samples = full_samples(&ckpt, &data);
        if wanted(8) {
            record(&mut out, criterion_uncertainty(&ckpt, &samples));
        }
        if wanted(6) || wanted(7) {
            let gated = train_gate(&ckpt, &GateTrainConfig::default(), &data).expect("gate training");
            if wanted(6) {
                record(&mut out, criterion_monotone(&gated, &samples));
            }
            if wanted(7) {
                record(&mut out, criterion_adaptive(&gated, &samples));
            }
        }
        if wanted(5) {
            record(&mut out, criterion_protocols(&data, &ckpt));
        }
    }

    out.sort_by_key(|o| o.id);
    println!("\nsummary ({:.0} s)", start.elapsed().as_secs_f64());
    for o in &out {
        println!("{}", o.line());
    }
    let hard_failures: Vec<usize> = out.iter().filter(|o| !o.pass && !o.soft).map(|o| o.id).collect();
    if !hard_failures.is_empty() {
        eprintln!("failed criteria: {hard_failures:?}");
        std::process::exit(1);
    }
}
