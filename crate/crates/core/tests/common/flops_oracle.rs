//! Layer-walk FLOPs count written independently of the accountant.

use dirnet::backbone::{AmgMode, Ir9Config};

/// Operations of a straight-line program over a `(channels, extent)` state.
#[derive(Clone, Copy)]
enum Op {
    Conv { k: u64, stride: u64, cout: u64 },
    Elementwise,
    Shuffle,
    Dense { fan_in: u64, fan_out: u64 },
}

fn run(state: &mut (u64, u64), ops: &[Op]) -> u64 {
    let mut total = 0;
    for op in ops {
        let (c, s) = *state;
        match *op {
            Op::Conv { k, stride, cout } => {
                let out = (s + 2 * (k / 2) - k) / stride + 1;
                total += 2 * k * k * c * cout * out * out;
                *state = (cout, out);
            }
            Op::Elementwise => total += c * s * s,
            Op::Shuffle => *state = (c / 4, 2 * s),
            Op::Dense { fan_in, fan_out } => total += 2 * fan_in * fan_out,
        }
    }
    total
}

fn block(cout: u64) -> Vec<Op> {
    use Op::*;
    vec![Conv { k: 3, stride: 2, cout }, Elementwise, Elementwise, Conv { k: 3, stride: 1, cout }, Elementwise]
}

/// Costs of the residual block on `(cin, s)`: main path, shortcut, sum and ReLU.
fn residual(state: &mut (u64, u64), cout: u64) -> u64 {
    let start = *state;
    let main = run(state, &block(cout));
    let mut side = start;
    let shortcut = run(&mut side, &[Op::Conv { k: 1, stride: 2, cout }, Op::Elementwise]);
    main + shortcut + run(state, &[Op::Elementwise, Op::Elementwise])
}

/// `(fe, per_loop, gate)` computed from scratch.
pub fn oracle(cfg: &Ir9Config) -> (u64, u64, u64) {
    let c = cfg.base_channels as u64;
    let widths = [c, c, 2 * c, 4 * c, 8 * c];
    let mut state = (3, cfg.input_size as u64);
    let mut fe = run(&mut state, &[Op::Conv { k: 3, stride: 2, cout: c }, Op::Elementwise, Op::Elementwise]);
    let mut rf = 0;
    for (i, &w) in widths.iter().enumerate().skip(1) {
        if i < cfg.loop_point {
            fe += residual(&mut state, w);
        } else {
            rf += residual(&mut state, w);
        }
    }
    rf += 8 * c;
    let (fe_c, fe_s) = (widths[cfg.loop_point - 1], cfg.input_size as u64 >> cfg.loop_point);
    let amg = match cfg.amg_mode {
        AmgMode::Attention => {
            let mut ops = Vec::new();
            let mut ch = 8 * c;
            for _ in cfg.loop_point..5 {
                ch /= 2;
                ops.extend([Op::Shuffle, Op::Conv { k: 3, stride: 1, cout: ch }, Op::Elementwise]);
            }
            ops.extend([Op::Conv { k: 1, stride: 1, cout: fe_c }, Op::Elementwise]);
            run(&mut state, &ops) + fe_c * fe_s * fe_s
        }
        AmgMode::DirectUpsample => 3 * fe_c * fe_s * fe_s,
        AmgMode::None => 0,
    };
    let latent = 8 * c;
    let fc = cfg.fc_width as u64;
    let hidden = (fc / 2).max(1);
    let heads = run(
        &mut (fc, 1),
        &[
            Op::Dense { fan_in: latent, fan_out: fc },
            Op::Elementwise,
            Op::Dense { fan_in: fc, fan_out: 46 },
            Op::Dense { fan_in: latent, fan_out: hidden },
        ],
    ) + hidden
        + 2 * hidden * 105
        + 105;
    let gate = 2 * hidden * 32 + 32 + 2 * 32 * 2 + 2;
    (fe, rf + amg + heads, gate)
}
