//! SGD with momentum, weight decay and the poly learning-rate schedule,
//! driving composite-loss training over an in-memory dataset.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{hflip, resize_sample, Sample};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::losses::{composite, LossReport, LossWeights};
use crate::mask::Mask;
use crate::nn::{Checkpoint, Gdnet, GdnetConfig, ParamStore, Session};
use crate::tensor::Tensor;

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> f64 {
    let frac = (iter.min(max_iter) as f64) / (max_iter.max(1) as f64);
    base_lr * (1.0 - frac).powf(power)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
            base_lr: 1e-3,
            power: 0.9,
        }
    }
}

/// Velocity buffers, one per parameter of the store they were made for.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub max_iter: usize,
    pub velocity: Vec<Tensor>,
}

impl OptimState {
    pub fn new(store: &ParamStore, cfg: OptimConfig, max_iter: usize) -> Result<Self> {
        if max_iter == 0 {
            return Err(Error::config("max_iter must be positive"));
        }
        Ok(OptimState {
            cfg,
            max_iter,
            velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    pub fn lr(&self, iter: usize) -> f64 {
        poly_lr(iter, self.max_iter, self.cfg.base_lr, self.cfg.power)
    }
}

/// `v <- m v + (g + wd p)`, `p <- p - lr v`; batch-norm scale and shift get
/// no weight decay.
pub fn sgd_step(store: &mut ParamStore, grads: &[Tensor], state: &mut OptimState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::input(format!(
            "sgd step over {} parameters with {} gradients and {} velocity buffers",
            store.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let OptimConfig {
        momentum,
        weight_decay,
        ..
    } = state.cfg;
    for ((p, g), v) in store.params_mut().iter_mut().zip(grads).zip(&mut state.velocity) {
        if g.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::input(format!("gradient shape {} for parameter {}", g.shape(), p.name)));
        }
        let wd = if p.kind.decays() { weight_decay } else { 0.0 };
        for ((pv, &gv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: GdnetConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub weights: LossWeights,
    /// Random horizontal flip with probability 0.5 per sample.
    pub hflip: bool,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: GdnetConfig::default(),
            batch_size: 2,
            epochs: 100,
            seed: 0,
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            hflip: true,
            checkpoint_path: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    /// Reads training and network keys from `kv`, leaving unknown keys.
    pub fn apply(&mut self, kv: &mut KvMap) -> Result<()> {
        self.net.apply(kv)?;
        macro_rules! set {
            ($($key:literal => $dst:expr),* $(,)?) => {
                $(if let Some(v) = kv.take($key)? { $dst = v; })*
            };
        }
        set! {
            "batch_size" => self.batch_size,
            "epochs" => self.epochs,
            "seed" => self.seed,
            "base_lr" => self.optim.base_lr,
            "momentum" => self.optim.momentum,
            "weight_decay" => self.optim.weight_decay,
            "power" => self.optim.power,
            "w_h" => self.weights.w_h,
            "w_l" => self.weights.w_l,
            "w_f" => self.weights.w_f,
            "w_h_b" => self.weights.w_h_b,
            "w_l_b" => self.weights.w_l_b,
            "hflip" => self.hflip,
        }
        if let Some(p) = kv.take::<String>("checkpoint_path")? {
            self.checkpoint_path = Some(p.into());
        }
        if let Some(p) = kv.take::<String>("log_path")? {
            self.log_path = Some(p.into());
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mut cfg = TrainConfig::default();
        cfg.apply(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        let o = &self.optim;
        if !(o.base_lr >= 0.0 && o.power > 0.0 && (0.0..1.0).contains(&o.momentum) && o.weight_decay >= 0.0) {
            return Err(Error::config(format!("invalid optimiser settings {o:?}")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.net.to_manifest();
        let o = &self.optim;
        let w = &self.weights;
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "base_lr = {}", o.base_lr);
        let _ = writeln!(s, "momentum = {}", o.momentum);
        let _ = writeln!(s, "weight_decay = {}", o.weight_decay);
        let _ = writeln!(s, "power = {}", o.power);
        let _ = writeln!(s, "w_h = {}\nw_l = {}\nw_f = {}\nw_h_b = {}\nw_l_b = {}", w.w_h, w.w_l, w.w_f, w.w_h_b, w.w_l_b);
        let _ = writeln!(s, "hflip = {}", self.hflip);
        if let Some(p) = &self.checkpoint_path {
            let _ = writeln!(s, "checkpoint_path = {}", p.display());
        }
        if let Some(p) = &self.log_path {
            let _ = writeln!(s, "log_path = {}", p.display());
        }
        s
    }

    pub fn iterations_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,epoch,lr,l_h,l_l,l_f,l_h_b,l_l_b,total\n");
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            s,
            "{},{},{:.8e},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            r.iter, r.epoch, r.lr, l.l_h, l.l_l, l.l_f, l.l_h_b, l.l_l_b, l.total
        );
    }
    s
}

/// Mean total loss of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
    pub checkpoint: Checkpoint,
    pub warnings: Vec<String>,
}

/// Trains `store` in place. `on_epoch` runs after every epoch and may stop
/// training early; the schedule still spans `cfg.epochs`.
pub fn train(
    net: &Gdnet,
    store: &mut ParamStore,
    data: &[(String, Sample)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary, &ParamStore) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let (h, w) = cfg.net.input_size;
    let samples: Vec<Sample> = data.iter().map(|(_, s)| resize_sample(s, h, w)).collect::<Result<_>>()?;
    let per_epoch = cfg.iterations_per_epoch(samples.len());
    let mut state = OptimState::new(store, cfg.optim, per_epoch * cfg.epochs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut iter = 0;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<Sample> = batch
                .iter()
                .map(|&i| {
                    let flip = cfg.hflip && rng.gen_bool(0.5);
                    if flip {
                        hflip(&samples[i])
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            let image = Tensor::stack(&items.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
            let g = Tensor::stack(&items.iter().map(|s| s.mask.to_tensor()).collect::<Vec<_>>())?;
            let b = Tensor::stack(&items.iter().map(|s| s.boundary.to_tensor()).collect::<Vec<_>>())?;

            let lr = state.lr(iter);
            let mut s = Session::new(store, true);
            let out = net.forward(&mut s, &image)?;
            let (total, report) = composite(&mut s.graph, &out, &g, &b, &cfg.weights)?;
            if !report.components().iter().chain([&report.total]).all(|v| v.is_finite()) {
                let ids: Vec<&str> = batch.iter().map(|&i| data[i].0.as_str()).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss at iter {iter} epoch {epoch} batch [{}]: {report:?}",
                    ids.join(",")
                )));
            }
            s.graph.backward(total)?;
            let grads = s.param_grads();
            for msg in s.warnings() {
                if !warnings.contains(msg) {
                    warnings.push(msg.clone());
                }
            }
            drop(s);
            sgd_step(store, &grads, &mut state, lr)?;
            epoch_total += report.total;
            log.push(LogRow {
                iter,
                epoch,
                lr,
                loss: report,
            });
            iter += 1;
        }
        let summary = EpochSummary {
            epoch,
            mean_total: epoch_total / per_epoch as f64,
        };
        epochs.push(summary);
        if on_epoch(&summary, store).is_break() {
            break;
        }
    }
    Ok(TrainOutcome {
        log,
        epochs,
        checkpoint: Checkpoint::capture(&cfg.net, store),
        warnings,
    })
}

/// Eval-mode final-map IoU at threshold 0.5, averaged over `samples`.
pub fn training_set_iou(net: &Gdnet, store: &mut ParamStore, samples: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        let maps = crate::infer::predict(net, store, &s.image)?;
        let pred = Mask::from_tensor(&maps.final_map);
        let inter = pred.data().iter().zip(s.mask.data()).filter(|(&a, &b)| a == 1 && b == 1).count();
        let union = pred.data().iter().zip(s.mask.data()).filter(|(&a, &b)| a == 1 || b == 1).count();
        sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(sum / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use crate::tensor::Shape;

    fn probe_store() -> ParamStore {
        let mut st = ParamStore::new();
        let t = |v: &[f64]| Tensor::from_vec(Shape::new(1, v.len(), 1, 1), v.to_vec()).unwrap();
        st.add("w", ParamKind::ConvWeight, t(&[1.0, -2.0]));
        st.add("gamma", ParamKind::BnGamma, t(&[1.5]));
        st
    }

    #[test]
    fn poly_endpoints() {
        assert_eq!(poly_lr(0, 100, 1e-3, 0.9), 1e-3);
        assert_eq!(poly_lr(100, 100, 1e-3, 0.9), 0.0);
        assert!((poly_lr(50, 100, 1e-3, 1.0) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut st = probe_store();
        let before = st.params()[0].value.clone();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = OptimState::new(&st, cfg, 10).unwrap();
        let grads: Vec<Tensor> = st.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        sgd_step(&mut st, &grads, &mut state, 0.1).unwrap();
        assert_eq!(st.params()[0].value, before);
    }

    #[test]
    fn batch_norm_params_skip_decay() {
        let mut st = probe_store();
        let mut state = OptimState::new(&st, OptimConfig::default(), 10).unwrap();
        let grads = vec![Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.5, 0.25]).unwrap(), Tensor::full(Shape::new(1, 1, 1, 1), 0.5)];
        sgd_step(&mut st, &grads, &mut state, 0.1).unwrap();
        assert_eq!(st.params()[0].value.data(), &[1.0 - 0.1 * (0.5 + 5e-4), -2.0 - 0.1 * (0.25 - 2.0 * 5e-4)]);
        assert_eq!(st.params()[1].value.data(), &[1.5 - 0.1 * 0.5]);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = TrainConfig { epochs: 7, ..TrainConfig::default() };
        cfg.optim.base_lr = 0.02;
        cfg.net.use_bfe = false;
        cfg.log_path = Some("log.csv".into());
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::from_text("bogus = 1").is_err());
        assert!(TrainConfig::from_text("input_size = 60,60").is_err());
    }
}
