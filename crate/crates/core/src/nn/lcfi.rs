//! Large-field contextual feature integration.
//!
//! A block runs a local 3x3 convolution, then two dilated spatially separable
//! paths in opposite orders (horizontal-then-vertical and
//! vertical-then-horizontal), concatenates them and fuses with another 3x3
//! convolution. A module chains four blocks of growing kernel size and
//! dilation, feeding each block's output into the next, and fuses all four
//! outputs with attention.

use rand::Rng;

use super::attention::AttentionFuse;
use super::layers::{bn_relu, BatchNorm2d, Conv2d, ConvBnRelu};
use super::params::{ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Var};

pub const DEFAULT_KERNELS: [usize; 4] = [3, 5, 7, 9];
pub const DEFAULT_DILATIONS: [usize; 4] = [1, 2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LcfiBlockConfig {
    /// Separable kernel length (odd).
    pub k: usize,
    pub dr: usize,
    pub channels: usize,
}

impl LcfiBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k.is_multiple_of(2) {
            return Err(Error::config(format!("LCFI kernel size must be odd, got {}", self.k)));
        }
        if self.dr == 0 || self.channels == 0 {
            return Err(Error::config("LCFI dilation and channels must be positive"));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.dr * (self.k - 1) + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LcfiModuleConfig {
    pub blocks: Vec<LcfiBlockConfig>,
    pub out_channels: usize,
    pub information_flow: bool,
    pub attention_reduction: usize,
}

impl LcfiModuleConfig {
    /// Four blocks with kernels 3, 5, 7, 9 and dilations 1, 2, 3, 4.
    pub fn standard(channels: usize, out_channels: usize, attention_reduction: usize) -> Self {
        LcfiModuleConfig {
            blocks: DEFAULT_KERNELS
                .iter()
                .zip(DEFAULT_DILATIONS)
                .map(|(&k, dr)| LcfiBlockConfig { k, dr, channels })
                .collect(),
            out_channels,
            information_flow: true,
            attention_reduction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != 4 {
            return Err(Error::config(format!(
                "an LCFI module has exactly 4 blocks, got {}",
                self.blocks.len()
            )));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        let width = self.blocks[0].channels;
        if self.blocks.iter().any(|b| b.channels != width) {
            return Err(Error::config("all LCFI blocks in a module must share one channel width"));
        }
        if self.out_channels == 0 {
            return Err(Error::config("LCFI out_channels must be positive"));
        }
        Ok(())
    }
}

/// One separable path: the first 1-D convolution, then the orthogonal one.
#[derive(Clone, Debug)]
struct SeparablePath {
    first: Conv2d,
    second: Conv2d,
    bn: BatchNorm2d,
}

impl SeparablePath {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.first.forward(s, x)?;
        let y = self.second.forward(s, y)?;
        bn_relu(s, &self.bn, y)
    }
}

#[derive(Clone, Debug)]
pub struct LcfiBlock {
    pub cfg: LcfiBlockConfig,
    pub in_channels: usize,
    local: ConvBnRelu,
    /// horizontal 1 x k, then vertical k x 1
    hv: SeparablePath,
    /// vertical k x 1, then horizontal 1 x k
    vh: SeparablePath,
    fuse: ConvBnRelu,
}

impl LcfiBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        cfg: LcfiBlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let horizontal = ConvSpec::same(c, c, 1, cfg.k, cfg.dr)?;
        let vertical = ConvSpec::same(c, c, cfg.k, 1, cfg.dr)?;
        let local = ConvBnRelu::new(store, rng, &format!("{name}.conv1"), ConvSpec::square(in_channels, c, 3, 1)?);
        let hv = SeparablePath {
            first: Conv2d::new(store, rng, &format!("{name}.hv.h"), horizontal, true),
            second: Conv2d::new(store, rng, &format!("{name}.hv.v"), vertical, false),
            bn: BatchNorm2d::new(store, &format!("{name}.hv.bn"), c),
        };
        let vh = SeparablePath {
            first: Conv2d::new(store, rng, &format!("{name}.vh.v"), vertical, true),
            second: Conv2d::new(store, rng, &format!("{name}.vh.h"), horizontal, false),
            bn: BatchNorm2d::new(store, &format!("{name}.vh.bn"), c),
        };
        let fuse = ConvBnRelu::new(store, rng, &format!("{name}.conv2"), ConvSpec::square(2 * c, c, 3, 1)?);
        Ok(LcfiBlock {
            cfg,
            in_channels,
            local,
            hv,
            vh,
            fuse,
        })
    }

    /// `prev` is the previous block's output, added onto the local features.
    pub fn forward(&self, s: &mut Session, x: Var, prev: Option<Var>) -> Result<Var> {
        let shape = s.graph.shape(x);
        if shape.c != self.in_channels {
            return Err(Error::config(format!(
                "LCFI block expects {} input channels, got {}",
                self.in_channels, shape.c
            )));
        }
        let span = self.cfg.span();
        if span > shape.h || span > shape.w {
            s.warn(format!(
                "LCFI block k={} dr={} spans {span} pixels on a {}x{} map; zero padding covers the overhang",
                self.cfg.k, self.cfg.dr, shape.h, shape.w
            ));
        }
        let mut local = self.local.forward(s, x)?;
        if let Some(p) = prev {
            let ps = s.graph.shape(p);
            if (ps.c, ps.h, ps.w) != (self.cfg.channels, shape.h, shape.w) {
                return Err(Error::config(format!(
                    "information flow input {ps} does not match block width {} at {}x{}",
                    self.cfg.channels, shape.h, shape.w
                )));
            }
            local = s.graph.add(local, p)?;
        }
        let a = self.hv.forward(s, local)?;
        let b = self.vh.forward(s, local)?;
        let cat = s.graph.concat_channels(&[a, b])?;
        self.fuse.forward(s, cat)
    }
}

#[derive(Clone, Debug)]
pub struct LcfiModule {
    pub cfg: LcfiModuleConfig,
    pub blocks: Vec<LcfiBlock>,
    pub attention: AttentionFuse,
    reduce: ConvBnRelu,
}

impl LcfiModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        cfg: LcfiModuleConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let blocks = cfg
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| LcfiBlock::new(store, rng, &format!("{name}.block{}", i + 1), in_channels, *b))
            .collect::<Result<Vec<_>>>()?;
        let width = cfg.blocks[0].channels;
        let attention = AttentionFuse::new(store, rng, &format!("{name}.attention"), 4 * width, cfg.attention_reduction)?;
        let reduce = ConvBnRelu::new(
            store,
            rng,
            &format!("{name}.reduce"),
            ConvSpec::square(4 * width, cfg.out_channels, 3, 1)?,
        );
        Ok(LcfiModule {
            cfg,
            blocks,
            attention,
            reduce,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut prev = None;
        for block in &self.blocks {
            let y = block.forward(s, x, if self.cfg.information_flow { prev } else { None })?;
            prev = Some(y);
            outs.push(y);
        }
        let cat = s.graph.concat_channels(&outs)?;
        let fused = self.attention.forward(s, cat)?.output;
        self.reduce.forward(s, fused)
    }
}
