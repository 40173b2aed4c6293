//! The assembled network: backbone, pose head, variance head and gate over
//! one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BnStates, Ir9, Ir9Config, LoopOutput, Pass};
use crate::diff::{Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gating::GatePolicy;
use crate::nn::{Bound, ParamStore};
use crate::posehead::{PosePredictor, PoseVars};
use crate::scalar::Scalar;
use crate::uncertainty::{VarianceHead, VarianceVars};

/// Layer layout of the whole network.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub backbone: Ir9,
    pub pose: PosePredictor,
    pub var: VarianceHead,
    pub gate: GatePolicy,
}

#[derive(Clone, Copy, Debug)]
pub struct LoopPrediction {
    pub backbone: LoopOutput,
    pub pose: PoseVars,
    pub var: VarianceVars,
}

#[derive(Clone, Debug)]
pub struct DirNet<T: Scalar> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
    pub bn: BnStates<T>,
}

/// Plain per-sample outputs of one loop.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopResult {
    pub joints_2d: Vec<f64>,
    pub joints_3d: Vec<f64>,
    pub alpha_2d: Vec<f64>,
    pub alpha_3d: Vec<f64>,
    pub f: Vec<f64>,
}

impl Architecture {
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        bn: &mut BnStates<T>,
        images: Var,
        l_stop: usize,
        mode: Mode,
        fe_mode: Mode,
    ) -> Result<Vec<LoopPrediction>> {
        let mut pass = Pass { tape, params, bn, mode, fe_mode };
        let loops = self.backbone.forward_loop(&mut pass, images, l_stop)?;
        let tape = pass.tape;
        loops
            .into_iter()
            .map(|b| {
                let pose = self.pose.forward(tape, params, b.latent)?;
                let var = self.var.forward(tape, params, b.latent)?;
                Ok(LoopPrediction { backbone: b, pose, var })
            })
            .collect()
    }
}

impl<T: Scalar> DirNet<T> {
    /// Fresh network; weights drawn from a generator seeded with `seed`.
    pub fn new(config: &Ir9Config, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bn = BnStates { sites: Vec::new() };
        let backbone = Ir9::new(config, &mut params, &mut bn, &mut rng)?;
        let latent = config.latent_dim();
        let pose = PosePredictor::new(&mut params, &mut rng, latent, config.fc_width, config.input_size);
        let var = VarianceHead::new(&mut params, &mut rng, latent, config.fc_width);
        let gate = GatePolicy::new(&mut params, &mut rng, var.feature_width());
        Ok(DirNet { arch: Architecture { backbone, pose, var, gate }, params, bn })
    }

    pub fn config(&self) -> &Ir9Config {
        &self.arch.backbone.config
    }

    pub fn l_max(&self) -> usize {
        self.config().effective_l_max()
    }

    pub fn cast<U: Scalar>(&self) -> DirNet<U> {
        DirNet { arch: self.arch.clone(), params: self.params.cast(), bn: self.bn.cast() }
    }

    /// Eval-mode outputs of loops `0..=l_stop` for a batch `(N, 3, H, H)`;
    /// result is indexed `[sample][loop]`.
    pub fn infer(&self, images: &Tensor<T>, l_stop: usize) -> Result<Vec<Vec<LoopResult>>> {
        let n = images.dim(0);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(images.clone());
        let mut bn = self.bn.clone();
        let loops = self.arch.forward(&mut tape, &p, &mut bn, x, l_stop, Mode::Eval, Mode::Eval)?;
        let row = |v: Var, i: usize| -> Vec<f64> {
            let t = tape.value(v);
            let w = t.len() / n;
            t.data()[i * w..(i + 1) * w].iter().map(|x| x.as_f64()).collect()
        };
        let out: Vec<Vec<LoopResult>> = (0..n)
            .map(|i| {
                loops
                    .iter()
                    .map(|lp| LoopResult {
                        joints_2d: row(lp.pose.joints_2d, i),
                        joints_3d: row(lp.pose.joints_3d, i),
                        alpha_2d: row(lp.var.alpha_2d, i),
                        alpha_3d: row(lp.var.alpha_3d, i),
                        f: row(lp.var.f, i),
                    })
                    .collect()
            })
            .collect();
        if out.iter().flatten().any(|r| r.joints_2d.iter().chain(&r.alpha_2d).any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { context: "inference".into() });
        }
        Ok(out)
    }
}
