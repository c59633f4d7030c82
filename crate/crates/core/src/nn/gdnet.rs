//! Full network: encoder, four LCFI modules, high-level fusion, attention
//! guidance of the low-level features, two BFE modules and the final fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::AttentionFuse;
use super::bfe::{Bfe, BfeConfig};
use super::layers::{Conv2d, ConvBnRelu};
use super::lcfi::{LcfiBlockConfig, LcfiModule, LcfiModuleConfig, DEFAULT_DILATIONS, DEFAULT_KERNELS};
use super::params::{ParamStore, Session};
use crate::error::{Error, Result};
use crate::kv::{join, KvMap};
use crate::tensor::{ConvSpec, Shape, Tensor, Var};

pub const ENCODER_STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct GdnetConfig {
    pub encoder_channels: [usize; ENCODER_STAGES],
    pub lcfi_channels: usize,
    pub input_size: (usize, usize),
    pub attention_reduction: usize,
    pub lcfi_kernels: [usize; 4],
    pub lcfi_dilations: [usize; 4],
    pub information_flow: bool,
    /// `false` gives the ablation without boundary feature enhancement.
    pub use_bfe: bool,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for GdnetConfig {
    fn default() -> Self {
        GdnetConfig {
            encoder_channels: [16; ENCODER_STAGES],
            lcfi_channels: 16,
            input_size: (64, 64),
            attention_reduction: 16,
            lcfi_kernels: DEFAULT_KERNELS,
            lcfi_dilations: DEFAULT_DILATIONS,
            information_flow: true,
            use_bfe: true,
            norm_mean: [0.5; 3],
            norm_std: [0.5; 3],
        }
    }
}

impl GdnetConfig {
    /// Uniform-width configuration.
    pub fn with_width(width: usize, input: usize) -> Self {
        GdnetConfig {
            encoder_channels: [width; ENCODER_STAGES],
            lcfi_channels: width,
            input_size: (input, input),
            attention_reduction: width.min(16),
            ..GdnetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::config(format!(
                "input size {h}x{w} must be positive and divisible by 16"
            )));
        }
        if self.encoder_channels.contains(&0) || self.lcfi_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        let r = self.attention_reduction;
        for fused in [4, 3, 2] {
            if r == 0 || !(fused * self.lcfi_channels).is_multiple_of(r) {
                return Err(Error::config(format!(
                    "attention reduction {r} must divide every fused width (4, 3 and 2 x {})",
                    self.lcfi_channels
                )));
            }
        }
        if self.norm_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::config("normalisation std must be positive"));
        }
        self.lcfi_module_config().validate()
    }

    pub fn lcfi_module_config(&self) -> LcfiModuleConfig {
        LcfiModuleConfig {
            blocks: self
                .lcfi_kernels
                .iter()
                .zip(self.lcfi_dilations)
                .map(|(&k, dr)| LcfiBlockConfig {
                    k,
                    dr,
                    channels: self.lcfi_channels,
                })
                .collect(),
            out_channels: self.lcfi_channels,
            information_flow: self.information_flow,
            attention_reduction: self.attention_reduction,
        }
    }

    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("encoder_channels = {}\n", join(&self.encoder_channels)));
        s.push_str(&format!("lcfi_channels = {}\n", self.lcfi_channels));
        s.push_str(&format!("input_size = {},{}\n", self.input_size.0, self.input_size.1));
        s.push_str(&format!("attention_reduction = {}\n", self.attention_reduction));
        s.push_str(&format!("lcfi_kernels = {}\n", join(&self.lcfi_kernels)));
        s.push_str(&format!("lcfi_dilations = {}\n", join(&self.lcfi_dilations)));
        s.push_str(&format!("information_flow = {}\n", self.information_flow));
        s.push_str(&format!("use_bfe = {}\n", self.use_bfe));
        s.push_str(&format!("norm_mean = {}\n", join(&self.norm_mean)));
        s.push_str(&format!("norm_std = {}\n", join(&self.norm_std)));
        s
    }

    /// Reads recognised keys from `kv`, leaving others in place.
    pub fn apply(&mut self, kv: &mut KvMap) -> Result<()> {
        fn arr<T: Copy, const N: usize>(key: &str, v: Option<Vec<T>>, dst: &mut [T; N]) -> Result<()> {
            if let Some(v) = v {
                *dst = v
                    .try_into()
                    .map_err(|_| Error::usage(format!("{key} needs {N} comma-separated values")))?;
            }
            Ok(())
        }
        arr("encoder_channels", kv.take_list("encoder_channels")?, &mut self.encoder_channels)?;
        if let Some(v) = kv.take("lcfi_channels")? {
            self.lcfi_channels = v;
        }
        let mut size = [self.input_size.0, self.input_size.1];
        arr("input_size", kv.take_list("input_size")?, &mut size)?;
        self.input_size = (size[0], size[1]);
        if let Some(v) = kv.take("attention_reduction")? {
            self.attention_reduction = v;
        }
        arr("lcfi_kernels", kv.take_list("lcfi_kernels")?, &mut self.lcfi_kernels)?;
        arr("lcfi_dilations", kv.take_list("lcfi_dilations")?, &mut self.lcfi_dilations)?;
        if let Some(v) = kv.take("information_flow")? {
            self.information_flow = v;
        }
        if let Some(v) = kv.take("use_bfe")? {
            self.use_bfe = v;
        }
        arr("norm_mean", kv.take_list("norm_mean")?, &mut self.norm_mean)?;
        arr("norm_std", kv.take_list("norm_std")?, &mut self.norm_std)?;
        Ok(())
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mut cfg = GdnetConfig::default();
        cfg.apply(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learnable scalar count of the network this configuration builds.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(Gdnet::new(self, 0)?.1.num_scalars())
    }
}

/// The five predicted maps, each `(N, 1, H, W)` at input resolution.
#[derive(Clone, Copy, Debug)]
pub struct GdnetOutputs {
    pub final_map: Var,
    pub high_map: Var,
    pub low_map: Var,
    /// Absent in the ablation without BFE.
    pub boundary_high: Option<Var>,
    pub boundary_low: Option<Var>,
    /// Attention map guiding the low-level features, at LCFI-1 resolution.
    pub attention_map: Var,
}

impl GdnetOutputs {
    /// All maps that exist, with stable names.
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        let mut v = vec![
            ("final", self.final_map),
            ("high", self.high_map),
            ("low", self.low_map),
        ];
        v.extend(self.boundary_high.map(|b| ("boundary_high", b)));
        v.extend(self.boundary_low.map(|b| ("boundary_low", b)));
        v
    }
}

#[derive(Clone, Debug)]
pub struct Gdnet {
    pub cfg: GdnetConfig,
    encoder: Vec<[ConvBnRelu; 2]>,
    pub lcfi: Vec<LcfiModule>,
    high_fuse: AttentionFuse,
    high_reduce: ConvBnRelu,
    attention_head: Conv2d,
    pub bfe_high: Option<Bfe>,
    pub bfe_low: Option<Bfe>,
    final_fuse: AttentionFuse,
    final_head: Conv2d,
    high_head: Conv2d,
    low_head: Conv2d,
}

impl Gdnet {
    /// Builds the network and its parameters, initialised from `seed`.
    pub fn new(cfg: &GdnetConfig, seed: u64) -> Result<(Gdnet, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let st = &mut store;
        let c = cfg.lcfi_channels;
        let r = cfg.attention_reduction;

        let mut encoder = Vec::with_capacity(ENCODER_STAGES);
        let mut prev = 3;
        for (i, &width) in cfg.encoder_channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            encoder.push([
                ConvBnRelu::new(st, rng, &format!("encoder.stage{}.conv1", i + 1), ConvSpec::square(prev, width, 3, stride)?),
                ConvBnRelu::new(st, rng, &format!("encoder.stage{}.conv2", i + 1), ConvSpec::square(width, width, 3, 1)?),
            ]);
            prev = width;
        }
        let module_cfg = cfg.lcfi_module_config();
        let lcfi = (1..ENCODER_STAGES)
            .map(|stage| {
                LcfiModule::new(
                    st,
                    rng,
                    &format!("lcfi{stage}"),
                    cfg.encoder_channels[stage],
                    module_cfg.clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let high_fuse = AttentionFuse::new(st, rng, "high.attention", 3 * c, r)?;
        let high_reduce = ConvBnRelu::new(st, rng, "high.reduce", ConvSpec::square(3 * c, c, 3, 1)?);
        let attention_head = Conv2d::new(st, rng, "guide.head", ConvSpec::square(c, 1, 1, 1)?, true);
        let (bfe_high, bfe_low) = if cfg.use_bfe {
            (
                Some(Bfe::new(st, rng, "bfe_high", BfeConfig::new(c))?),
                Some(Bfe::new(st, rng, "bfe_low", BfeConfig::new(c))?),
            )
        } else {
            (None, None)
        };
        let final_fuse = AttentionFuse::new(st, rng, "final.attention", 2 * c, r)?;
        let final_head = Conv2d::new(st, rng, "final.head", ConvSpec::square(2 * c, 1, 3, 1)?, true);
        let high_head = Conv2d::new(st, rng, "high.head", ConvSpec::square(c, 1, 3, 1)?, true);
        let low_head = Conv2d::new(st, rng, "low.head", ConvSpec::square(c, 1, 3, 1)?, true);
        Ok((
            Gdnet {
                cfg: cfg.clone(),
                encoder,
                lcfi,
                high_fuse,
                high_reduce,
                attention_head,
                bfe_high,
                bfe_low,
                final_fuse,
                final_head,
                high_head,
                low_head,
            },
            store,
        ))
    }

    /// Standardises an `(N, 3, H, W)` image in `[0, 1]` with the configured
    /// per-channel mean and std.
    pub fn normalize(&self, image: &Tensor) -> Tensor {
        let (m, sd) = (self.cfg.norm_mean, self.cfg.norm_std);
        let s = image.shape();
        Tensor::from_fn(s, |n, c, h, w| (image.at(n, c, h, w) - m[c]) / sd[c])
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != 3 {
            return Err(Error::config(format!("expected a 3-channel image, got {s}")));
        }
        if !s.h.is_multiple_of(16) || !s.w.is_multiple_of(16) || s.h == 0 || s.w == 0 {
            return Err(Error::config(format!(
                "image size {}x{} is not divisible by 16",
                s.h, s.w
            )));
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session, image: &Tensor) -> Result<GdnetOutputs> {
        self.check_input(image.shape())?;
        let x = s.graph.constant(self.normalize(image));
        self.forward_normalized(s, x)
    }

    /// Forward pass from an already standardised image on the tape.
    pub fn forward_normalized(&self, s: &mut Session, x: Var) -> Result<GdnetOutputs> {
        let shape = s.graph.shape(x);
        self.check_input(shape)?;
        let (h, w) = (shape.h, shape.w);
        let mut x = x;

        let mut stages = Vec::with_capacity(ENCODER_STAGES);
        for [a, b] in &self.encoder {
            x = a.forward(s, x)?;
            x = b.forward(s, x)?;
            stages.push(x);
        }
        let levels = self
            .lcfi
            .iter()
            .zip(&stages[1..])
            .map(|(m, &f)| m.forward(s, f))
            .collect::<Result<Vec<_>>>()?;

        // high-level fusion on the LCFI-2 grid
        let grid = s.graph.shape(levels[1]);
        let mut high_in = vec![levels[1]];
        for &l in &levels[2..] {
            high_in.push(s.graph.resize_bilinear(l, grid.h, grid.w)?);
        }
        let cat = s.graph.concat_channels(&high_in)?;
        let fused = self.high_fuse.forward(s, cat)?.output;
        let f_high = self.high_reduce.forward(s, fused)?;

        // attention guidance of the low-level features
        let low_grid = s.graph.shape(levels[0]);
        let a_logit = self.attention_head.forward(s, f_high)?;
        let a = s.graph.sigmoid(a_logit);
        let attention_map = s.graph.resize_bilinear(a, low_grid.h, low_grid.w)?;
        let f_low = s.graph.mul(levels[0], attention_map)?;

        let (e_high, b_high) = match &self.bfe_high {
            Some(bfe) => {
                let o = bfe.forward(s, f_high)?;
                (o.enhanced, Some(o.boundary_logit))
            }
            None => (f_high, None),
        };
        let (e_low, b_low) = match &self.bfe_low {
            Some(bfe) => {
                let o = bfe.forward(s, f_low)?;
                (o.enhanced, Some(o.boundary_logit))
            }
            None => (f_low, None),
        };

        let up_high = s.graph.resize_bilinear(e_high, low_grid.h, low_grid.w)?;
        let cat = s.graph.concat_channels(&[up_high, e_low])?;
        let fused = self.final_fuse.forward(s, cat)?.output;
        let final_logit = self.final_head.forward(s, fused)?;
        let high_logit = self.high_head.forward(s, e_high)?;
        let low_logit = self.low_head.forward(s, e_low)?;

        let to_map = |s: &mut Session, logit: Var| -> Result<Var> {
            let p = s.graph.sigmoid(logit);
            s.graph.resize_bilinear(p, h, w)
        };
        Ok(GdnetOutputs {
            final_map: to_map(s, final_logit)?,
            high_map: to_map(s, high_logit)?,
            low_map: to_map(s, low_logit)?,
            boundary_high: b_high.map(|b| to_map(s, b)).transpose()?,
            boundary_low: b_low.map(|b| to_map(s, b)).transpose()?,
            attention_map,
        })
    }
}
