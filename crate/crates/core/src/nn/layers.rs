use rand::Rng;

use super::params::{fan_in_uniform, ParamId, ParamKind, ParamStore, Session, StatsId};
use crate::error::Result;
use crate::tensor::{ConvSpec, Shape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, spec: ConvSpec, bias: bool) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::ConvWeight,
            fan_in_uniform(spec.weight_shape(), rng),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::ConvBias,
                Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1)),
            )
        });
        Conv2d { spec, weight, bias }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, &self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), ParamKind::BnGamma, Tensor::full(shape, 1.0)),
            beta: store.add(format!("{name}.beta"), ParamKind::BnBeta, Tensor::zeros(shape)),
            stats: store.add_stats(name, channels),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        s.batch_norm(x, self.gamma, self.beta, self.stats)
    }
}

/// Convolution, batch norm, ReLU. The convolution carries no bias since the
/// following normalisation cancels it.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, spec: ConvSpec) -> Self {
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), spec, false);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), spec.out_channels);
        ConvBnRelu { conv, bn }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        bn_relu(s, &self.bn, y)
    }
}

/// The normalise-then-rectify pair.
pub fn bn_relu(s: &mut Session, bn: &BatchNorm2d, x: Var) -> Result<Var> {
    let y = bn.forward(s, x)?;
    Ok(s.graph.relu(y))
}
