//! Boundary feature enhancement: multi-kernel boundary features `F_b`, a
//! boundary map predicted from them, and the enhancement
//! `F_e = F_b * F_in + F_in`.

use rand::Rng;

use super::layers::{Conv2d, ConvBnRelu};
use super::params::{ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Var};

pub const DEFAULT_BRANCH_KERNELS: [usize; 4] = [1, 3, 5, 9];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BfeConfig {
    pub branch_kernels: Vec<usize>,
    pub channels: usize,
}

impl BfeConfig {
    pub fn new(channels: usize) -> Self {
        BfeConfig {
            branch_kernels: DEFAULT_BRANCH_KERNELS.to_vec(),
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_kernels.len() != 4 {
            return Err(Error::config(format!(
                "BFE has 4 branches, got {}",
                self.branch_kernels.len()
            )));
        }
        if let Some(k) = self.branch_kernels.iter().find(|k| *k % 2 == 0) {
            return Err(Error::config(format!("BFE branch kernels must be odd, got {k}")));
        }
        if self.channels == 0 {
            return Err(Error::config("BFE channels must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BfeOut {
    /// `F_e`
    pub enhanced: Var,
    /// `F_b`
    pub boundary_features: Var,
    pub boundary_logit: Var,
    /// Sigmoid of the logit, `(N, 1, h, w)`.
    pub boundary_map: Var,
}

#[derive(Clone, Debug)]
pub struct Bfe {
    pub cfg: BfeConfig,
    pub branches: Vec<ConvBnRelu>,
    pub fuse: ConvBnRelu,
    pub head: Conv2d,
}

impl Bfe {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: BfeConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let branches = cfg
            .branch_kernels
            .iter()
            .map(|&k| Ok(ConvBnRelu::new(store, rng, &format!("{name}.branch{k}"), ConvSpec::square(c, c, k, 1)?)))
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvBnRelu::new(store, rng, &format!("{name}.fuse"), ConvSpec::square(4 * c, c, 1, 1)?);
        let head = Conv2d::new(store, rng, &format!("{name}.head"), ConvSpec::square(c, 1, 3, 1)?, true);
        Ok(Bfe {
            cfg,
            branches,
            fuse,
            head,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<BfeOut> {
        let c = s.graph.shape(x).c;
        if c != self.cfg.channels {
            return Err(Error::config(format!(
                "BFE expects {} channels, got {c}",
                self.cfg.channels
            )));
        }
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(s, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = s.graph.concat_channels(&outs)?;
        let fb = self.fuse.forward(s, cat)?;
        let gated = s.graph.mul(fb, x)?;
        let enhanced = s.graph.add(gated, x)?;
        let boundary_logit = self.head.forward(s, fb)?;
        let boundary_map = s.graph.sigmoid(boundary_logit);
        Ok(BfeOut {
            enhanced,
            boundary_features: fb,
            boundary_logit,
            boundary_map,
        })
    }
}
