//! STBP training: loss, momentum SGD with a step schedule, the epoch loop
//! and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::config::KeyValues;
use crate::data::{augment_image, ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::network::{ForwardPass, Mode, Network};
use crate::tensor::{ParamRole, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. `logits`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    logits.expect_ndim(2, "logits")?;
    let (n, c) = (logits.dim(0), logits.dim(1));
    if labels.len() != n || n == 0 {
        return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {l} outside {c} classes")));
    }
    let mut grad = Tensor::zeros(&[n, c]);
    let mut loss = 0.0;
    for (i, (row, g)) in logits.data().chunks(c).zip(grad.data_mut().chunks_mut(c)).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + denom.ln();
        loss += log_z - row[labels[i]];
        for (j, (gj, v)) in g.iter_mut().zip(row).enumerate() {
            *gj = ((v - log_z).exp() - f64::from(j == labels[i])) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_every: usize,
    pub seed: u64,
    /// Global L2 gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
    /// Crop/flip augmentation for static `[C, H, W]` samples.
    pub augment: bool,
    pub record_dormant: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_factor: 0.1,
            lr_drop_every: 40,
            seed: 0,
            clip_norm: None,
            augment: false,
            record_dormant: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("key `train.{key}`: {msg}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be ≥ 0, got {}", self.weight_decay));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad("lr_drop_factor", format!("must be in (0, 1], got {}", self.lr_drop_factor));
        }
        if self.lr_drop_every == 0 {
            return bad("lr_drop_every", "must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be ≥ 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm", format!("must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    /// Step schedule with 0-based epochs: `lr · factor^⌊epoch / every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_drop_factor.powi((epoch / self.lr_drop_every) as i32)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("train.epochs", self.epochs);
        kv.insert("train.batch_size", self.batch_size);
        kv.insert("train.lr", self.lr);
        kv.insert("train.momentum", self.momentum);
        kv.insert("train.weight_decay", self.weight_decay);
        kv.insert("train.lr_drop_factor", self.lr_drop_factor);
        kv.insert("train.lr_drop_every", self.lr_drop_every);
        kv.insert("train.seed", self.seed);
        if let Some(c) = self.clip_norm {
            kv.insert("train.clip_norm", c);
        }
        kv.insert("train.augment", self.augment);
        kv.insert("train.record_dormant", self.record_dormant);
        kv.insert("train.checkpoint_every", self.checkpoint_every);
        kv
    }

    /// Reads the `train.*` keys, consuming them from `kv`.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            epochs: kv.take_or("train.epochs", d.epochs)?,
            batch_size: kv.take_or("train.batch_size", d.batch_size)?,
            lr: kv.take_or("train.lr", d.lr)?,
            momentum: kv.take_or("train.momentum", d.momentum)?,
            weight_decay: kv.take_or("train.weight_decay", d.weight_decay)?,
            lr_drop_factor: kv.take_or("train.lr_drop_factor", d.lr_drop_factor)?,
            lr_drop_every: kv.take_or("train.lr_drop_every", d.lr_drop_every)?,
            seed: kv.take_or("train.seed", d.seed)?,
            clip_norm: kv.take("train.clip_norm")?,
            augment: kv.take_or("train.augment", d.augment)?,
            record_dormant: kv.take_or("train.record_dormant", d.record_dormant)?,
            checkpoint_every: kv.take_or("train.checkpoint_every", d.checkpoint_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Classical momentum: `v ← μv + g + λw` (λ on weights only), `w ← w − ηv`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &Network) -> Self {
        Self {
            velocity: net.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        }
    }

    /// Applies one update at learning rate `lr` and zeroes every gradient.
    pub fn step(&mut self, net: &mut Network, cfg: &TrainConfig, lr: f64) -> Result<()> {
        let mut params = net.params_mut();
        if params.len() != self.velocity.len() {
            return Err(Error::Sequencing("optimizer state does not match the network".into()));
        }
        let scale = match cfg.clip_norm {
            Some(max) => {
                let norm = params
                    .iter()
                    .flat_map(|p| p.grad.data())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if v.len() != p.len() {
                return Err(Error::Sequencing("optimizer buffer size mismatch".into()));
            }
            let decay = match p.role {
                ParamRole::Weight => cfg.weight_decay,
                ParamRole::Bias => 0.0,
            };
            let grad = p.grad.data().to_vec();
            for ((w, g), vi) in p.value.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                *vi = cfg.momentum * *vi + g * scale + decay * *w;
                *w -= lr * *vi;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

pub fn run_forward(net: &mut Network, batch: &Tensor, mode: Mode) -> Result<ForwardPass> {
    net.forward(batch, mode)
}

pub fn run_backward(net: &mut Network, pass: &ForwardPass, grad_logits: &Tensor) -> Result<()> {
    net.backward(pass, grad_logits)
}

/// One JSON-lines metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dormant_by_layer: Option<BTreeMap<String, f64>>,
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}

/// Mutable training state carried across epochs and through checkpoints.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub sgd: Sgd,
}

impl TrainState {
    pub fn new(net: &Network, cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e),
            sgd: Sgd::new(net),
        }
    }
}

/// Epoch outcome beyond the metric record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub record: MetricRecord,
    /// Batches during which some population never fired, with the layer names.
    pub silent: Vec<(usize, Vec<String>)>,
}

fn numeric_fault(pass: &ForwardPass, epoch: usize, batch: usize, loss: f64) -> Error {
    let rates = analysis::spike_rates(pass)
        .into_iter()
        .map(|(n, r)| format!("{n}={r:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    Error::Numeric {
        layer: "loss".into(),
        timestep: pass.timesteps(),
        detail: format!("loss {loss} at epoch {epoch}, batch {batch}; spike rates: {rates}"),
    }
}

fn batch_inputs(
    net: &Network,
    ds: &Dataset,
    idx: &[usize],
    augment: Option<(&ChannelStats, &mut ChaCha8Rng)>,
) -> Result<Tensor> {
    match augment {
        Some((stats, rng)) => {
            let imgs = idx
                .iter()
                .map(|&i| augment_image(&ds.samples[i], rng, true, stats))
                .collect::<Result<Vec<_>>>()?;
            net.stack_inputs(&imgs.iter().collect::<Vec<_>>())
        }
        None => net.stack_inputs(&idx.iter().map(|&i| &ds.samples[i]).collect::<Vec<_>>()),
    }
}

/// One pass over `ds` in a freshly shuffled order.
pub fn train_epoch(
    net: &mut Network,
    state: &mut TrainState,
    ds: &Dataset,
    cfg: &TrainConfig,
    stats: Option<&ChannelStats>,
) -> Result<EpochSummary> {
    if ds.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if state.sgd.velocity.is_empty() {
        state.sgd = Sgd::new(net);
    }
    let epoch = state.epoch;
    let lr = cfg.lr_at(epoch);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut state.rng);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let mut silent = Vec::new();
    let mut dormant: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let neuron = net.neuron().clone();
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let augment = match (cfg.augment, stats) {
            (true, Some(s)) if ds.samples[0].ndim() == 3 => Some((s, &mut state.rng)),
            _ => None,
        };
        let x = batch_inputs(net, ds, idx, augment)?;
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let pass = run_forward(net, &x, Mode::Train)?;
        let (loss, grad) = softmax_cross_entropy(&pass.logits, &labels)?;
        if !loss.is_finite() {
            return Err(numeric_fault(&pass, epoch, b, loss));
        }
        loss_sum += loss * idx.len() as f64;
        correct += pass
            .logits
            .data()
            .chunks(pass.logits.dim(1))
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        let quiet = analysis::silent_layers(&pass);
        if !quiet.is_empty() {
            silent.push((b, quiet));
        }
        if cfg.record_dormant {
            for layer in analysis::pass_dormancy(&pass, &neuron).layers {
                let e = dormant.entry(layer.name).or_insert((0.0, 0));
                e.0 += layer.right * layer.samples as f64;
                e.1 += layer.samples;
            }
        }
        run_backward(net, &pass, &grad)?;
        state.sgd.step(net, cfg, lr)?;
    }
    state.epoch += 1;
    Ok(EpochSummary {
        record: MetricRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / ds.len() as f64,
            acc: correct as f64 / ds.len() as f64,
            lr,
            dormant_by_layer: cfg.record_dormant.then(|| {
                dormant
                    .into_iter()
                    .map(|(k, (s, n))| (k, s / n.max(1) as f64))
                    .collect()
            }),
        },
        silent,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub acc: f64,
    pub samples: usize,
}

/// Eval-mode loss and accuracy; static images are standardized with `stats`.
pub fn evaluate(net: &mut Network, ds: &Dataset, batch_size: usize, stats: Option<&ChannelStats>) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = match stats {
            Some(s) if ds.samples[0].ndim() == 3 => {
                let imgs = chunk
                    .iter()
                    .map(|&i| crate::data::standardize(&ds.samples[i], s))
                    .collect::<Vec<_>>();
                net.stack_inputs(&imgs.iter().collect::<Vec<_>>())?
            }
            _ => batch_inputs(net, ds, chunk, None)?,
        };
        let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
        let pass = run_forward(net, &x, Mode::Eval)?;
        let (loss, _) = softmax_cross_entropy(&pass.logits, &labels)?;
        if !loss.is_finite() {
            return Err(numeric_fault(&pass, 0, 0, loss));
        }
        loss_sum += loss * chunk.len() as f64;
        correct += pass
            .logits
            .data()
            .chunks(pass.logits.dim(1))
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
    }
    Ok(Evaluation {
        loss: loss_sum / ds.len() as f64,
        acc: correct as f64 / ds.len() as f64,
        samples: ds.len(),
    })
}

/// Runs epochs `state.epoch..cfg.epochs`, calling `on_epoch` after each
/// with the train record and, if a test set is given, the test record.
pub fn train(
    net: &mut Network,
    state: &mut TrainState,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    stats: Option<&ChannelStats>,
    mut on_epoch: impl FnMut(&Network, &TrainState, &[MetricRecord]) -> Result<()>,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let summary = train_epoch(net, state, train_set, cfg, stats)?;
        let mut records = vec![summary.record];
        if let Some(test) = test_set {
            let ev = evaluate(net, test, cfg.batch_size, stats)?;
            records.push(MetricRecord {
                epoch: records[0].epoch,
                split: "test".into(),
                loss: ev.loss,
                acc: ev.acc,
                lr: records[0].lr,
                dormant_by_layer: None,
            });
        }
        on_epoch(net, state, &records)?;
        log.extend(records);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{BlockVariant, NetworkSpec, Width};

    #[test]
    fn cross_entropy_reference() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (l, g) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.data(), &[0.5, -0.5]);
        let big = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let (l, _) = softmax_cross_entropy(&big, &[0]).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(softmax_cross_entropy(&big, &[2]).is_err());
    }

    #[test]
    fn schedule_drops_by_ten() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(39), 0.1);
        assert!((cfg.lr_at(40) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(80) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn config_validation_names_keys() {
        let mut kv = KeyValues::parse("train.momentum = 1.5").unwrap();
        let err = TrainConfig::from_key_values(&mut kv).unwrap_err().to_string();
        assert!(err.contains("train.momentum"), "{err}");
        let mut kv = TrainConfig::default().to_key_values();
        assert_eq!(TrainConfig::from_key_values(&mut kv).unwrap(), TrainConfig::default());
        kv.finish().unwrap();
    }

    fn tiny_net() -> Network {
        let spec = NetworkSpec::resnet(8, Width::Custom(2), BlockVariant::DsResnet, 2)
            .unwrap()
            .with_input([1, 4, 4], 2, 2);
        Network::build(&spec, 1).unwrap()
    }

    #[test]
    fn sgd_plain_step() {
        let mut net = tiny_net();
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut sgd = Sgd::new(&net);
        let before: Vec<Vec<f64>> = net.params().iter().map(|(_, p)| p.value.data().to_vec()).collect();
        sgd.step(&mut net, &cfg, 0.1).unwrap();
        let same: Vec<Vec<f64>> = net.params().iter().map(|(_, p)| p.value.data().to_vec()).collect();
        assert_eq!(before, same);
        for p in net.params_mut() {
            p.grad.fill(2.0);
        }
        sgd.step(&mut net, &cfg, 0.1).unwrap();
        for ((_, p), b) in net.params().iter().zip(&before) {
            for (w, w0) in p.value.data().iter().zip(b) {
                assert!((w - (w0 - 0.2)).abs() < 1e-15);
            }
            assert_eq!(p.grad.abs_sum(), 0.0);
        }
    }

    #[test]
    fn decay_skips_bias_role() {
        let mut net = tiny_net();
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.5,
            ..Default::default()
        };
        let before: Vec<(ParamRole, Vec<f64>)> =
            net.params().iter().map(|(_, p)| (p.role, p.value.data().to_vec())).collect();
        Sgd::new(&net).step(&mut net, &cfg, 0.1).unwrap();
        for ((_, p), (role, b)) in net.params().iter().zip(&before) {
            for (w, w0) in p.value.data().iter().zip(b) {
                let expect = match role {
                    ParamRole::Weight => w0 * (1.0 - 0.05),
                    ParamRole::Bias => *w0,
                };
                assert!((w - expect).abs() < 1e-15);
            }
        }
    }
}
