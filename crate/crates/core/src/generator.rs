//! Style-modulated U-Net generator with output compositing and progressive growth.
//!
//! Level 0 is the coarsest resolution. Stage `s` runs levels `0..=s`; growing
//! appends level `s + 1` at both ends of the U-Net: a new encoder entry in
//! front of the old one and a new decoder exit after the old one. Every level
//! keeps its own input projection (input skip) and its own to-image projection
//! (output skip), so nothing built earlier goes unused after growth.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{Bind, Conv2d, Linear, ParamStore, WeightInit};
use crate::pose::{PoseMaps, NUM_KEYPOINTS, NUM_LIMB_CLASSES};
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 64;
/// Corrupted image, mask, keypoint map, skeleton map.
pub const INPUT_CHANNELS: usize = 3 + 1 + NUM_KEYPOINTS + NUM_LIMB_CLASSES;
pub const LAYER_SCALE_INIT: f64 = 1e-5;
const MAPPING_LAYERS: usize = 2;
const IN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    Nearest,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// `(height, width)` per level, coarsest first, each double the previous.
    pub resolutions: Vec<(usize, usize)>,
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub style_dim: usize,
    pub latent_dim: usize,
    pub leaky_slope: f64,
    pub upsampling: Upsampling,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// CPU-trainable default.
    pub fn desk() -> Self {
        Self {
            resolutions: vec![(18, 10), (36, 20), (72, 40)],
            channels: vec![128, 128, 64],
            blocks_per_stage: 1,
            style_dim: 128,
            latent_dim: LATENT_DIM,
            leaky_slope: 0.2,
            upsampling: Upsampling::Nearest,
            seed: 0,
        }
    }

    /// Full-size layout: 18x10 up to 288x160.
    pub fn full() -> Self {
        Self {
            resolutions: vec![(18, 10), (36, 20), (72, 40), (144, 80), (288, 160)],
            channels: vec![512, 512, 512, 256, 128],
            blocks_per_stage: 1,
            style_dim: 512,
            latent_dim: LATENT_DIM,
            leaky_slope: 0.2,
            upsampling: Upsampling::Nearest,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::config("generator.resolutions", "must not be empty"));
        }
        if self.channels.len() != self.resolutions.len() {
            return Err(Error::config(
                "generator.channels",
                format!(
                    "expected {} entries (one per resolution), got {}",
                    self.resolutions.len(),
                    self.channels.len()
                ),
            ));
        }
        for pair in self.resolutions.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h1 != 2 * h0 || w1 != 2 * w0 {
                return Err(Error::config(
                    "generator.resolutions",
                    format!("{h0}x{w0} -> {h1}x{w1} is not a doubling"),
                ));
            }
        }
        if self.resolutions.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::config("generator.resolutions", "zero-sized resolution"));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("generator.channels", "channels must be positive"));
        }
        if self.latent_dim != LATENT_DIM {
            return Err(Error::config(
                "generator.latent_dim",
                format!("latent dimension is fixed at {LATENT_DIM}"),
            ));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::config("generator.blocks_per_stage", "must be at least 1"));
        }
        if self.style_dim == 0 {
            return Err(Error::config("generator.style_dim", "must be positive"));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.resolutions.len()
    }

    /// Scalar parameter count of the mapping network.
    pub fn mapping_param_count(&self) -> usize {
        Linear::param_count(self.latent_dim, self.style_dim)
            + Linear::param_count(self.style_dim, self.style_dim)
    }

    fn block_param_count(&self, c: usize, layer_scale: bool) -> usize {
        let modconv = 2 * Linear::param_count(self.style_dim, c) + Conv2d::param_count(c, c, 3, true);
        2 * modconv + if layer_scale { c } else { 0 }
    }

    /// Scalar parameter count contributed by level `i`.
    pub fn level_param_count(&self, i: usize, layer_scale: bool) -> usize {
        let c = self.channels[i];
        let mut n = Conv2d::param_count(INPUT_CHANNELS, c, 1, true)
            + Conv2d::param_count(c, 3, 1, true)
            + 2 * self.blocks_per_stage * self.block_param_count(c, layer_scale);
        if i > 0 && self.channels[i - 1] != c {
            n += Conv2d::param_count(c, self.channels[i - 1], 1, true);
            n += Conv2d::param_count(self.channels[i - 1], c, 1, true);
        }
        n
    }
}

fn level_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleMapper {
    layers: Vec<Linear>,
    slope: f64,
}

impl StyleMapper {
    fn init(store: &mut ParamStore, cfg: &GeneratorConfig) -> Self {
        let mut rng = level_rng(cfg.seed, 0xA11CE);
        let mut layers = Vec::with_capacity(MAPPING_LAYERS);
        let mut fin = cfg.latent_dim;
        for l in 0..MAPPING_LAYERS {
            layers.push(Linear::init(store, &mut rng, &format!("map.fc{l}"), fin, cfg.style_dim, 0.0));
            fin = cfg.style_dim;
        }
        Self {
            layers,
            slope: cfg.leaky_slope,
        }
    }

    fn named(cfg: &GeneratorConfig) -> Self {
        let mut fin = cfg.latent_dim;
        let layers = (0..MAPPING_LAYERS)
            .map(|l| {
                let lin = Linear {
                    weight: format!("map.fc{l}.weight"),
                    bias: format!("map.fc{l}.bias"),
                    weight_gain: 1.0 / (fin as f64).sqrt(),
                };
                fin = cfg.style_dim;
                lin
            })
            .collect();
        Self {
            layers,
            slope: cfg.leaky_slope,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, t: &mut Tape, p: Bind<'_>, z: Var) -> Var {
        let mut h = z;
        for l in &self.layers {
            h = l.forward(t, p, h);
            h = t.leaky_relu(h, self.slope);
        }
        h
    }
}

/// Instance norm, then per-channel scale and shift from the style vector, then
/// a 3x3 convolution and leaky ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModConv {
    style_scale: Linear,
    style_shift: Linear,
    conv: Conv2d,
    slope: f64,
}

impl ModConv {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, cfg: &GeneratorConfig) -> Self {
        Self {
            style_scale: Linear::init(store, rng, &format!("{name}.style_scale"), cfg.style_dim, c, 1.0),
            style_shift: Linear::init(store, rng, &format!("{name}.style_shift"), cfg.style_dim, c, 0.0),
            conv: Conv2d::init(store, rng, &format!("{name}.conv"), c, c, 3, 1, true, WeightInit::Equalized),
            slope: cfg.leaky_slope,
        }
    }

    fn forward(&self, t: &mut Tape, p: Bind<'_>, x: Var, style: Var) -> Var {
        let h = t.instance_norm(x, IN_EPS);
        let s = self.style_scale.forward(t, p, style);
        let b = self.style_shift.forward(t, p, style);
        let h = t.modulate(h, s, b);
        let h = self.conv.forward(t, p, h);
        t.leaky_relu(h, self.slope)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResBlock {
    convs: [ModConv; 2],
    /// Present on blocks added by growth.
    layer_scale: Option<String>,
    unet_input: bool,
}

impl ResBlock {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        cfg: &GeneratorConfig,
        layer_scale: bool,
        unet_input: bool,
    ) -> Self {
        let convs = [
            ModConv::init(store, rng, &format!("{name}.mod0"), c, cfg),
            ModConv::init(store, rng, &format!("{name}.mod1"), c, cfg),
        ];
        let layer_scale = layer_scale.then(|| {
            let n = format!("{name}.layer_scale");
            store.insert(n.clone(), Tensor::full(&[c], LAYER_SCALE_INIT));
            n
        });
        Self {
            convs,
            layer_scale,
            unet_input,
        }
    }

    pub fn layer_scale_param(&self) -> Option<&str> {
        self.layer_scale.as_deref()
    }

    pub fn has_unet_input(&self) -> bool {
        self.unet_input
    }

    /// Combines the trunk inputs with the transformed branch.
    ///
    /// Plain blocks: `(x + f) / √2`, or `(x + u + f) / √3` with a U-Net input.
    /// LayerScale blocks: `x + γ ⊙ f`, so `γ = 0` passes the trunk through exactly.
    pub fn merge(&self, t: &mut Tape, p: Bind<'_>, x: Var, unet: Option<Var>, branch: Var) -> Var {
        match &self.layer_scale {
            Some(g) => {
                let gamma = p.var(t, g);
                let f = t.channel_scale(branch, gamma);
                t.add(x, f)
            }
            None => {
                let mut sum = t.add(x, branch);
                let mut terms = 2.0;
                if let Some(u) = unet {
                    sum = t.add(sum, u);
                    terms = 3.0;
                }
                t.scale(sum, 1.0 / f64::sqrt(terms))
            }
        }
    }

    pub fn forward(&self, t: &mut Tape, p: Bind<'_>, x: Var, unet: Option<Var>, style: Var) -> Var {
        assert_eq!(unet.is_some(), self.unet_input, "U-Net input wiring mismatch");
        let branch_in = match (&self.layer_scale, unet) {
            // LayerScale blocks route the U-Net features through the branch.
            (Some(_), Some(u)) => {
                let s = t.add(x, u);
                t.scale(s, FRAC_1_SQRT_2)
            }
            _ => x,
        };
        let h = self.convs[0].forward(t, p, branch_in, style);
        let f = self.convs[1].forward(t, p, h, style);
        self.merge(t, p, x, unet, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub resolution: (usize, usize),
    pub channels: usize,
    from_input: Conv2d,
    encoder: Vec<ResBlock>,
    /// 1x1 channel adapter from this level down to the next coarser one.
    down: Option<Conv2d>,
    /// 1x1 channel adapter from the next coarser level up to this one.
    up: Option<Conv2d>,
    decoder: Vec<ResBlock>,
    to_image: Conv2d,
}

impl Level {
    fn init(store: &mut ParamStore, cfg: &GeneratorConfig, i: usize, layer_scale: bool) -> Self {
        let mut rng = level_rng(cfg.seed, 1 + i as u64);
        let c = cfg.channels[i];
        let name = |s: &str| format!("l{i}.{s}");
        let from_input = Conv2d::init(store, &mut rng, &name("from_input"), INPUT_CHANNELS, c, 1, 1, true, WeightInit::Equalized);
        let encoder = (0..cfg.blocks_per_stage)
            .map(|b| ResBlock::init(store, &mut rng, &name(&format!("enc{b}")), c, cfg, layer_scale, false))
            .collect();
        let adapters = (i > 0 && cfg.channels[i - 1] != c).then(|| {
            let prev = cfg.channels[i - 1];
            (
                Conv2d::init(store, &mut rng, &name("down"), c, prev, 1, 1, true, WeightInit::Equalized),
                Conv2d::init(store, &mut rng, &name("up"), prev, c, 1, 1, true, WeightInit::Equalized),
            )
        });
        let (down, up) = match adapters {
            Some((d, u)) => (Some(d), Some(u)),
            None => (None, None),
        };
        let decoder = (0..cfg.blocks_per_stage)
            .map(|b| ResBlock::init(store, &mut rng, &name(&format!("dec{b}")), c, cfg, layer_scale, i > 0 && b == 0))
            .collect();
        let to_image = Conv2d::init(store, &mut rng, &name("to_image"), c, 3, 1, 1, true, WeightInit::Equalized);
        Self {
            resolution: cfg.resolutions[i],
            channels: c,
            from_input,
            encoder,
            down,
            up,
            decoder,
            to_image,
        }
    }

    pub fn encoder_blocks(&self) -> &[ResBlock] {
        &self.encoder
    }

    pub fn decoder_blocks(&self) -> &[ResBlock] {
        &self.decoder
    }
}

/// Network description (parameter names and wiring) for the active stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNet {
    mapper: StyleMapper,
    levels: Vec<Level>,
    slope: f64,
    upsampling: Upsampling,
}

impl UNet {
    pub fn mapper(&self) -> &StyleMapper {
        &self.mapper
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn output_resolution(&self) -> (usize, usize) {
        self.levels.last().expect("at least one level").resolution
    }

    fn upsample(&self, t: &mut Tape, x: Var) -> Var {
        match self.upsampling {
            Upsampling::Nearest => t.upsample2(x),
            Upsampling::Bilinear => {
                let (_, _, h, w) = t.value(x).dims4();
                t.resize_bilinear(x, 2 * h, 2 * w)
            }
        }
    }

    /// Raw decoder output `Ĩ` before compositing.
    pub fn forward_raw(&self, t: &mut Tape, p: Bind<'_>, z: Var, input: Var) -> Var {
        let style = self.mapper.forward(t, p, z);
        let top = self.levels.len() - 1;

        let mut inputs = vec![input; self.levels.len()];
        for i in (0..top).rev() {
            inputs[i] = t.avg_pool2(inputs[i + 1]);
        }

        let mut skips: Vec<Option<Var>> = vec![None; self.levels.len()];
        let mut h: Option<Var> = None;
        for i in (0..=top).rev() {
            let lv = &self.levels[i];
            let e = lv.from_input.forward(t, p, inputs[i]);
            let e = t.leaky_relu(e, self.slope);
            let mut x = match h {
                None => e,
                Some(prev) => {
                    let finer = &self.levels[i + 1];
                    let mut d = t.avg_pool2(prev);
                    if let Some(down) = &finer.down {
                        d = down.forward(t, p, d);
                    }
                    t.add(d, e)
                }
            };
            for b in &lv.encoder {
                x = b.forward(t, p, x, None, style);
            }
            skips[i] = Some(x);
            h = Some(x);
        }

        let mut d = h.expect("encoder ran");
        let mut image: Option<Var> = None;
        for (i, lv) in self.levels.iter().enumerate() {
            if i > 0 {
                d = self.upsample(t, d);
                if let Some(up) = &lv.up {
                    d = up.forward(t, p, d);
                }
                image = image.map(|img| self.upsample(t, img));
            }
            for (b, block) in lv.decoder.iter().enumerate() {
                let unet = (i > 0 && b == 0).then(|| skips[i].expect("skip recorded"));
                d = block.forward(t, p, d, unet, style);
            }
            let rgb = lv.to_image.forward(t, p, d);
            image = Some(match image {
                None => rgb,
                Some(img) => t.add(img, rgb),
            });
        }
        image.expect("decoder ran")
    }

    /// Composited output `G(z, Ī) = Ĩ ⊙ (1 − M) + Ī ⊙ M` plus the raw output.
    pub fn forward(&self, t: &mut Tape, p: Bind<'_>, z: Var, cond: &Conditioning) -> (Var, Var) {
        let input = cond.input_var(t);
        let raw = self.forward_raw(t, p, z, input);
        let corrupted = t.constant(cond.corrupted.clone());
        let out = t.select(raw, corrupted, cond.mask.clone());
        (out, raw)
    }
}

/// Batched generator conditioning at a single resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// `[N, 3, H, W]`, already multiplied by the mask.
    pub corrupted: Tensor,
    /// `[N, 1, H, W]`
    pub mask: Tensor,
    /// `[N, 23, H, W]`: keypoint channels followed by skeleton channels.
    pub pose: Tensor,
}

impl Conditioning {
    pub fn new(items: &[(&Tensor, &Mask, &PoseMaps)]) -> Result<Self> {
        let mut corrupted = Vec::with_capacity(items.len());
        let mut masks = Vec::with_capacity(items.len());
        let mut poses = Vec::with_capacity(items.len());
        for (img, mask, pose) in items {
            corrupted.push(crate::mask::corrupt(img, mask)?);
            let (h, w) = mask.dims();
            masks.push(mask.to_tensor().reshape(&[1, h, w]));
            let mut p = pose.keypoints.data().to_vec();
            p.extend_from_slice(pose.skeleton.data());
            poses.push(Tensor::from_vec(&[NUM_KEYPOINTS + NUM_LIMB_CLASSES, h, w], p));
        }
        Ok(Self {
            corrupted: Tensor::stack(&corrupted),
            mask: Tensor::stack(&masks),
            pose: Tensor::stack(&poses),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, _, h, w) = self.mask.dims4();
        (h, w)
    }

    fn input_var(&self, t: &mut Tape) -> Var {
        let c = t.constant(self.corrupted.clone());
        let m = t.constant(self.mask.clone());
        let p = t.constant(self.pose.clone());
        t.concat(&[c, m, p])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaRamp {
    /// Images per ramp step; the trainer uses its batch size.
    pub images_per_step: u64,
}

/// Warm-up schedule `min(target, (1 + step) / (10 + step))`.
pub fn ema_beta(target: f64, ramp: Option<&EmaRamp>, images: u64) -> f64 {
    match ramp {
        None => target,
        Some(r) => {
            let step = (images / r.images_per_step.max(1)) as f64;
            target.min((1.0 + step) / (10.0 + step))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorState {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    pub ema: ParamStore,
    pub active_stage: usize,
    /// Per active level: whether its blocks carry LayerScale (added by growth).
    pub layer_scaled: Vec<bool>,
    /// Images seen by the generator.
    pub step_count: u64,
}

impl GeneratorState {
    /// Builds levels `0..=stage` without LayerScale, as if trained there from the start.
    pub fn new(config: GeneratorConfig, stage: usize) -> Result<Self> {
        config.validate()?;
        if stage >= config.num_levels() {
            return Err(Error::config(
                "generator.stage",
                format!("stage {stage} is beyond {} levels", config.num_levels()),
            ));
        }
        let mut params = ParamStore::new();
        StyleMapper::init(&mut params, &config);
        for i in 0..=stage {
            Level::init(&mut params, &config, i, false);
        }
        Ok(Self {
            ema: params.clone(),
            params,
            active_stage: stage,
            layer_scaled: vec![false; stage + 1],
            step_count: 0,
            config,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.config.resolutions[self.active_stage]
    }

    pub fn is_final_stage(&self) -> bool {
        self.active_stage + 1 == self.config.num_levels()
    }

    /// Rebuilds the wiring for the active stage from parameter names.
    pub fn network(&self) -> UNet {
        let mut scratch = ParamStore::new();
        let levels = (0..=self.active_stage)
            .map(|i| Level::init(&mut scratch, &self.config, i, self.layer_scaled[i]))
            .collect();
        UNet {
            mapper: StyleMapper::named(&self.config),
            levels,
            slope: self.config.leaky_slope,
            upsampling: self.config.upsampling,
        }
    }

    pub fn map_latent(&self, z: &Tensor) -> Result<Tensor> {
        let (_, d) = check_latent(z, self.config.latent_dim)?;
        let _ = d;
        let net = self.network();
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let w = net.mapper.forward(&mut t, Bind::frozen(&self.params), zv);
        Ok(t.value(w).clone())
    }

    fn check_inputs(&self, z: &Tensor, cond: &Conditioning) -> Result<()> {
        let (n, _) = check_latent(z, self.config.latent_dim)?;
        let res = self.resolution();
        if cond.resolution() != res {
            return Err(Error::ResolutionMismatch {
                expected: res,
                got: cond.resolution(),
            });
        }
        if n != cond.batch_size() {
            return Err(Error::DimensionMismatch {
                expected: cond.batch_size(),
                got: n,
            });
        }
        Ok(())
    }

    /// Composited output using the given parameter set (live or EMA).
    pub fn synthesize_with(&self, params: &ParamStore, z: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        self.check_inputs(z, cond)?;
        let net = self.network();
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let (out, _) = net.forward(&mut t, Bind::frozen(params), zv, cond);
        Ok(t.value(out).clone())
    }

    pub fn synthesize(&self, z: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        self.synthesize_with(&self.params, z, cond)
    }

    pub fn synthesize_ema(&self, z: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        self.synthesize_with(&self.ema, z, cond)
    }

    /// Appends the next resolution level. New residual blocks start with
    /// LayerScale `1e-5`; existing parameters are untouched.
    pub fn grow(&mut self) -> Result<()> {
        if self.is_final_stage() {
            return Err(Error::AlreadyAtMaxResolution);
        }
        let next = self.active_stage + 1;
        let mut fresh = ParamStore::new();
        Level::init(&mut fresh, &self.config, next, true);
        for (name, value) in fresh.iter() {
            self.params.insert(name.clone(), value.clone());
            self.ema.insert(name.clone(), value.clone());
        }
        self.active_stage = next;
        self.layer_scaled.push(true);
        Ok(())
    }

    /// `shadow ← β·shadow + (1 − β)·params`. Does not advance `step_count`.
    pub fn ema_update(&mut self, beta_target: f64, ramp: Option<&EmaRamp>) {
        let beta = ema_beta(beta_target, ramp, self.step_count);
        for (name, shadow) in self.ema.iter_mut() {
            let live = self.params.get(name);
            for (s, p) in shadow.data_mut().iter_mut().zip(live.data()) {
                *s = beta * *s + (1.0 - beta) * p;
            }
        }
    }
}

fn check_latent(z: &Tensor, dim: usize) -> Result<(usize, usize)> {
    match z.shape() {
        [n, d] if *d == dim => Ok((*n, *d)),
        [_, d] => Err(Error::DimensionMismatch { expected: dim, got: *d }),
        other => Err(Error::DimensionMismatch {
            expected: dim,
            got: other.iter().product(),
        }),
    }
}

/// Gain applied to residual sums, exposed for tests and docs.
pub fn residual_gain(with_unet: bool) -> f64 {
    if with_unet {
        1.0 / 3f64.sqrt()
    } else {
        1.0 / SQRT_2
    }
}
