//! Channel-then-spatial attention gating used to fuse concatenated features.

use rand::Rng;

use super::layers::Conv2d;
use super::params::{ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Var};

pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug)]
pub struct AttentionFuse {
    pub channels: usize,
    pub reduction: usize,
    pub squeeze: Conv2d,
    pub expand: Conv2d,
    pub spatial: Conv2d,
}

/// Gated output with both gates kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOut {
    pub output: Var,
    /// `(N, C, 1, 1)`.
    pub channel_gate: Var,
    /// `(N, 1, H, W)`.
    pub spatial_gate: Var,
}

impl AttentionFuse {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::config(format!(
                "attention over {channels} channels needs a reduction that divides it, got {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(AttentionFuse {
            channels,
            reduction,
            squeeze: Conv2d::new(store, rng, &format!("{name}.mlp1"), ConvSpec::same(channels, hidden, 1, 1, 1)?, true),
            expand: Conv2d::new(store, rng, &format!("{name}.mlp2"), ConvSpec::same(hidden, channels, 1, 1, 1)?, true),
            spatial: Conv2d::new(
                store,
                rng,
                &format!("{name}.spatial"),
                ConvSpec::same(2, 1, SPATIAL_KERNEL, SPATIAL_KERNEL, 1)?,
                true,
            ),
        })
    }

    fn mlp(&self, s: &mut Session, pooled: Var) -> Result<Var> {
        let h = self.squeeze.forward(s, pooled)?;
        let h = s.graph.relu(h);
        self.expand.forward(s, h)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<AttentionOut> {
        let c = s.graph.shape(x).c;
        if c != self.channels {
            return Err(Error::config(format!(
                "attention built for {} channels got {c}",
                self.channels
            )));
        }
        let avg = s.graph.global_avg_pool(x);
        let max = s.graph.global_max_pool(x);
        let a = self.mlp(s, avg)?;
        let m = self.mlp(s, max)?;
        let logits = s.graph.add(a, m)?;
        let channel_gate = s.graph.sigmoid(logits);
        let refined = s.graph.mul(x, channel_gate)?;

        let cm = s.graph.channel_mean(refined);
        let cx = s.graph.channel_max(refined);
        let both = s.graph.concat_channels(&[cm, cx])?;
        let sl = self.spatial.forward(s, both)?;
        let spatial_gate = s.graph.sigmoid(sl);
        let output = s.graph.mul(refined, spatial_gate)?;
        Ok(AttentionOut {
            output,
            channel_gate,
            spatial_gate,
        })
    }
}
