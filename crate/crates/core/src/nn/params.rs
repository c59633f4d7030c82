use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, RunningStats, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    /// Whether weight decay applies. Batch-norm affine parameters are exempt.
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::BnGamma | ParamKind::BnBeta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

/// Flat, ordered store of every learnable tensor plus batch-norm buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push((name.into(), RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Parameter by name, or a usage error naming it.
    pub fn named_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::usage(format!("no parameter named {name}")))?;
        Ok(&mut self.params[id.0].value)
    }

    pub fn stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.stats
    }

    pub fn running(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0].1
    }

    /// Number of scalars held by parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }
}

/// He-style uniform initialisation scaled by fan-in.
pub(crate) fn fan_in_uniform(shape: Shape, rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape.c * shape.h * shape.w).max(1) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..shape.numel()).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s mut ParamStore,
    bound: Vec<Option<Var>>,
    training: bool,
    warnings: Vec<String>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s mut ParamStore, training: bool) -> Self {
        let n = store.len();
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; n],
            training,
            warnings: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph leaf for a parameter; bound once per session.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.params[id.0].value.clone(), true);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let running = &mut self.store.stats[stats.0].1;
        self.graph.batch_norm(x, g, b, running, self.training)
    }

    pub fn warn(&mut self, msg: String) {
        if !self.warnings.contains(&msg) {
            self.warnings.push(msg);
        }
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Gradient for every parameter after `graph.backward`, zeros for
    /// parameters the pass never touched.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.store
            .params
            .iter()
            .zip(&self.bound)
            .map(|(p, v)| {
                v.and_then(|v| self.graph.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}
