//! Iterative ResNet9: feature extractor, refiner with per-loop batch-norm
//! banks, and the attention map generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{BatchNormState, Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Group, ParamId, ParamStore};
use crate::posehead::NUM_JOINTS;
use crate::scalar::Scalar;

/// How the attention map for loops after the first is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmgMode {
    Attention,
    DirectUpsample,
    None,
}

impl std::str::FromStr for AmgMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(AmgMode::Attention),
            "direct_upsample" | "direct-upsample" => Ok(AmgMode::DirectUpsample),
            "none" => Ok(AmgMode::None),
            _ => Err(Error::config("amg_mode", format!("unknown mode `{s}` (attention, direct_upsample, none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ir9Config {
    pub input_size: usize,
    pub base_channels: usize,
    /// Split point after downsampling stage 1..=4.
    pub loop_point: usize,
    pub l_max: usize,
    pub fc_width: usize,
    pub num_joints: usize,
    pub amg_mode: AmgMode,
}

impl Default for Ir9Config {
    fn default() -> Self {
        Ir9Config {
            input_size: 64,
            base_channels: 8,
            loop_point: 3,
            l_max: 2,
            fc_width: 128,
            num_joints: NUM_JOINTS,
            amg_mode: AmgMode::Attention,
        }
    }
}

impl Ir9Config {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::config("input_size", format!("{} is not a positive multiple of 32", self.input_size)));
        }
        if !(1..=4).contains(&self.loop_point) {
            return Err(Error::config("loop_point", format!("{} not in 1..=4", self.loop_point)));
        }
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return Err(Error::config(
                "base_channels",
                format!("{} must be a positive multiple of 4", self.base_channels),
            ));
        }
        if self.fc_width < 2 {
            return Err(Error::config("fc_width", format!("{} must be at least 2", self.fc_width)));
        }
        if self.num_joints != NUM_JOINTS {
            return Err(Error::config(
                "num_joints",
                format!("the hand skeleton has {NUM_JOINTS} joints, got {}", self.num_joints),
            ));
        }
        Ok(())
    }

    /// Channels of the feature extractor output.
    pub fn fe_channels(&self) -> usize {
        stage_channels(self.base_channels, self.loop_point)
    }

    /// Spatial extent of the feature extractor output.
    pub fn fe_extent(&self) -> usize {
        self.input_size >> self.loop_point
    }

    /// Spatial extent of the deepest refiner map.
    pub fn deep_extent(&self) -> usize {
        self.input_size / 32
    }

    pub fn latent_dim(&self) -> usize {
        8 * self.base_channels
    }

    /// Number of refinement iterations actually available.
    pub fn effective_l_max(&self) -> usize {
        if self.amg_mode == AmgMode::None {
            0
        } else {
            self.l_max
        }
    }
}

/// Output channels after downsampling stage `k` (stage 1 is the stem).
fn stage_channels(c: usize, k: usize) -> usize {
    match k {
        1 | 2 => c,
        3 => 2 * c,
        4 => 4 * c,
        _ => 8 * c,
    }
}

/// One normalization site; entry `l` is used in loop `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct BnSite {
    pub index: usize,
    pub channels: usize,
    pub group: Group,
    pub gamma: Vec<ParamId>,
    pub beta: Vec<ParamId>,
}

/// Running statistics of every site, `[site][entry]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStates<T> {
    pub sites: Vec<Vec<BatchNormState<T>>>,
}

impl<T: Scalar> BnStates<T> {
    pub fn cast<U: Scalar>(&self) -> BnStates<U> {
        BnStates {
            sites: self
                .sites
                .iter()
                .map(|bank| {
                    bank.iter()
                        .map(|s| BatchNormState {
                            running_mean: s.running_mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                            running_var: s.running_var.iter().map(|v| U::lit(v.as_f64())).collect(),
                            momentum: U::lit(s.momentum.as_f64()),
                            eps: U::lit(s.eps.as_f64()),
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BnSite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub a: ConvBn,
    pub b: ConvBn,
    pub shortcut: ConvBn,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Amg {
    /// `[pixel_shuffle 2 -> conv 3x3 -> relu]` per doubling, then `conv 1x1 -> sigmoid`.
    Decoder { stages: Vec<Conv>, head: Conv },
    /// Pixel shuffle, nearest upsampling and channel folding; no parameters.
    Direct { upsample: usize },
    None,
}

/// Parameter-free description of the network; weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Ir9 {
    pub config: Ir9Config,
    pub stem: ConvBn,
    pub fe_blocks: Vec<ResBlock>,
    pub rf_blocks: Vec<ResBlock>,
    pub amg: Amg,
    pub bank_len: usize,
    site_count: usize,
}

/// Mutable context of one forward pass.
pub struct Pass<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a Bound,
    pub bn: &'a mut BnStates<T>,
    /// Mode of refiner normalization.
    pub mode: Mode,
    /// Mode of feature-extractor normalization.
    pub fe_mode: Mode,
}

/// Values produced by one loop iteration.
#[derive(Clone, Copy, Debug)]
pub struct LoopOutput {
    /// Refiner input (feature map or its attention-augmented version).
    pub input: Var,
    pub attention: Option<Var>,
    /// Deepest map before pooling, `(N, 8C, S/32, S/32)`.
    pub deep: Var,
    pub latent: Var,
}

struct Builder<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    bn: &'a mut BnStates<T>,
    rng: &'a mut R,
    bank_len: usize,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn site(&mut self, name: &str, group: Group, channels: usize, entries: usize) -> BnSite {
        let index = self.bn.sites.len();
        let mut gamma = Vec::new();
        let mut beta = Vec::new();
        for l in 0..entries {
            gamma.push(self.store.add(format!("{name}.bn{l}.gamma"), group, Tensor::ones([channels])));
            beta.push(self.store.add(format!("{name}.bn{l}.beta"), group, Tensor::zeros([channels])));
        }
        self.bn.sites.push((0..entries).map(|_| BatchNormState::new(channels)).collect());
        BnSite { index, channels, group, gamma, beta }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(&mut self, name: &str, group: Group, cin: usize, cout: usize, k: usize, stride: usize, banked: bool) -> ConvBn {
        let conv = Conv::new(self.store, self.rng, name, group, cin, cout, k, stride);
        let entries = if banked { self.bank_len } else { 1 };
        let bn = self.site(name, group, cout, entries);
        ConvBn { conv, bn }
    }

    fn block(&mut self, name: &str, group: Group, cin: usize, cout: usize, banked: bool) -> ResBlock {
        ResBlock {
            a: self.conv_bn(&format!("{name}.conv1"), group, cin, cout, 3, 2, banked),
            b: self.conv_bn(&format!("{name}.conv2"), group, cout, cout, 3, 1, banked),
            shortcut: self.conv_bn(&format!("{name}.shortcut"), group, cin, cout, 1, 2, banked),
        }
    }
}

impl Ir9 {
    /// Registers all weights in `store` and fresh statistics in `bn`.
    pub fn new<T: Scalar, R: Rng>(
        config: &Ir9Config,
        store: &mut ParamStore<T>,
        bn: &mut BnStates<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let bank_len = config.l_max + 1;
        let mut b = Builder { store, bn, rng, bank_len };
        let stem = b.conv_bn("fe.stem", Group::FeatureExtractor, 3, c, 3, 2, false);
        let mut fe_blocks = Vec::new();
        let mut rf_blocks = Vec::new();
        for phase in 1..=4 {
            let (cin, cout) = (stage_channels(c, phase), stage_channels(c, phase + 1));
            // Phase p ends downsampling stage p + 1.
            if phase < config.loop_point {
                fe_blocks.push(b.block(&format!("fe.phase{phase}"), Group::FeatureExtractor, cin, cout, false));
            } else {
                rf_blocks.push(b.block(&format!("rf.phase{phase}"), Group::Refiner, cin, cout, true));
            }
        }
        let doublings = 5 - config.loop_point;
        let amg = match config.amg_mode {
            AmgMode::Attention => {
                let mut ch = 8 * c;
                let mut stages = Vec::new();
                for i in 0..doublings {
                    let shuffled = ch / 4;
                    let out = shuffled * 2;
                    stages.push(Conv::new(b.store, b.rng, &format!("amg.stage{i}"), Group::Attention, shuffled, out, 3, 1));
                    ch = out;
                }
                let head = Conv::new(b.store, b.rng, "amg.head", Group::Attention, ch, config.fe_channels(), 1, 1);
                Amg::Decoder { stages, head }
            }
            AmgMode::DirectUpsample => Amg::Direct { upsample: 1 << (doublings - 1) },
            AmgMode::None => Amg::None,
        };
        let site_count = b.bn.sites.len();
        Ok(Ir9 { config: config.clone(), stem, fe_blocks, rf_blocks, amg, bank_len, site_count })
    }

    pub fn site_count(&self) -> usize {
        self.site_count
    }

    /// All refiner normalization sites.
    pub fn rf_sites(&self) -> Vec<&BnSite> {
        self.rf_blocks.iter().flat_map(|b| [&b.a.bn, &b.b.bn, &b.shortcut.bn]).collect()
    }

    /// Appends a fresh entry (unit scale, zero shift and statistics) to every
    /// refiner bank and raises `l_max` by one.
    pub fn push_bank_entry<T: Scalar>(&mut self, store: &mut ParamStore<T>, bn: &mut BnStates<T>) {
        let l = self.bank_len;
        for block in &mut self.rf_blocks {
            for (name, cb) in [("conv1", &mut block.a), ("conv2", &mut block.b), ("shortcut", &mut block.shortcut)] {
                let site = &mut cb.bn;
                let prefix = store.entry(cb.conv.weight).name.trim_end_matches(".weight").to_string();
                debug_assert!(prefix.ends_with(name));
                site.gamma.push(store.add(format!("{prefix}.bn{l}.gamma"), site.group, Tensor::ones([site.channels])));
                site.beta.push(store.add(format!("{prefix}.bn{l}.beta"), site.group, Tensor::zeros([site.channels])));
                bn.sites[site.index].push(BatchNormState::new(site.channels));
            }
        }
        self.bank_len += 1;
        self.config.l_max = self.bank_len - 1;
    }

    fn conv_bn<T: Scalar>(pass: &mut Pass<'_, T>, cb: &ConvBn, x: Var, entry: usize, mode: Mode) -> Result<Var> {
        let y = cb.conv.forward(pass.tape, pass.params, x)?;
        let g = pass.params.var(cb.bn.gamma[entry]);
        let b = pass.params.var(cb.bn.beta[entry]);
        pass.tape.batchnorm2d(y, g, b, &mut pass.bn.sites[cb.bn.index][entry], mode)
    }

    fn block<T: Scalar>(pass: &mut Pass<'_, T>, blk: &ResBlock, x: Var, entry: usize, mode: Mode) -> Result<Var> {
        let h = Self::conv_bn(pass, &blk.a, x, entry, mode)?;
        let h = pass.tape.relu(h);
        let h = Self::conv_bn(pass, &blk.b, h, entry, mode)?;
        let s = Self::conv_bn(pass, &blk.shortcut, x, entry, mode)?;
        let y = pass.tape.add(h, s)?;
        Ok(pass.tape.relu(y))
    }

    /// Stem and the phases before the loop point.
    pub fn extract_features<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let s = self.config.input_size;
        let shape = pass.tape.shape(x);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape("extract_features", format!("expected (N, 3, {s}, {s}) image, got {shape:?}")));
        }
        let mode = pass.fe_mode;
        let h = Self::conv_bn(pass, &self.stem, x, 0, mode)?;
        let mut h = pass.tape.relu(h);
        for blk in &self.fe_blocks {
            h = Self::block(pass, blk, h, 0, mode)?;
        }
        Ok(h)
    }

    /// `F ⊙ M`.
    pub fn apply_attention<T: Scalar>(&self, tape: &mut Tape<T>, features: Var, attention: Var) -> Result<Var> {
        if tape.shape(features) != tape.shape(attention) {
            return Err(Error::shape(
                "apply_attention",
                format!("features {:?} vs attention {:?}", tape.shape(features), tape.shape(attention)),
            ));
        }
        tape.hadamard(features, attention)
    }

    /// Refiner phases with bank entry `l`; returns `(deep map, pooled latent)`.
    pub fn refine<T: Scalar>(&self, pass: &mut Pass<'_, T>, input: Var, l: usize) -> Result<(Var, Var)> {
        if l >= self.bank_len {
            return Err(Error::arg("refine", format!("loop {l} exceeds l_max = {}", self.bank_len - 1)));
        }
        let mode = pass.mode;
        let mut h = input;
        for blk in &self.rf_blocks {
            h = Self::block(pass, blk, h, l, mode)?;
        }
        let latent = pass.tape.global_avg_pool(h)?;
        Ok((h, latent))
    }

    /// Attention map with the feature extractor's output shape, values in `[0, 1]`.
    pub fn generate_attention<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, deep: Var) -> Result<Var> {
        let r = self.config.deep_extent();
        let shape = tape.shape(deep);
        if shape.len() != 4 || shape[1] != self.config.latent_dim() || shape[2] != r || shape[3] != r {
            return Err(Error::shape(
                "generate_attention",
                format!("expected (N, {}, {r}, {r}) deep map, got {shape:?}", self.config.latent_dim()),
            ));
        }
        match &self.amg {
            Amg::Decoder { stages, head } => {
                let mut h = deep;
                for conv in stages {
                    let s = tape.pixel_shuffle(h, 2)?;
                    let c = conv.forward(tape, p, s)?;
                    h = tape.relu(c);
                }
                let logits = head.forward(tape, p, h)?;
                Ok(tape.sigmoid(logits))
            }
            Amg::Direct { upsample } => {
                let s = tape.pixel_shuffle(deep, 2)?;
                let u = tape.upsample_nearest(s, *upsample)?;
                let c = tape.channel_resize(u, self.config.fe_channels())?;
                Ok(tape.sigmoid(c))
            }
            Amg::None => Err(Error::arg("generate_attention", "network built without an attention stage")),
        }
    }

    /// Runs loops `0..=l_stop` (capped at 0 without an attention stage).
    pub fn forward_loop<T: Scalar>(&self, pass: &mut Pass<'_, T>, x: Var, l_stop: usize) -> Result<Vec<LoopOutput>> {
        let features = self.extract_features(pass, x)?;
        self.forward_from_features(pass, features, l_stop)
    }

    pub fn forward_from_features<T: Scalar>(
        &self,
        pass: &mut Pass<'_, T>,
        features: Var,
        l_stop: usize,
    ) -> Result<Vec<LoopOutput>> {
        let l_stop = if matches!(self.amg, Amg::None) { 0 } else { l_stop };
        if l_stop >= self.bank_len {
            return Err(Error::arg("forward_loop", format!("l_stop {l_stop} exceeds l_max = {}", self.bank_len - 1)));
        }
        let mut outs: Vec<LoopOutput> = Vec::with_capacity(l_stop + 1);
        for l in 0..=l_stop {
            let (input, attention) = match outs.last() {
                None => (features, None),
                Some(prev) => {
                    let m = self.generate_attention(pass.tape, pass.params, prev.deep)?;
                    (self.apply_attention(pass.tape, features, m)?, Some(m))
                }
            };
            let (deep, latent) = self.refine(pass, input, l)?;
            outs.push(LoopOutput { input, attention, deep, latent });
        }
        Ok(outs)
    }
}
