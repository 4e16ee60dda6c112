//! Multi-mode training: per batch, one full-precision pass with
//! cross-entropy, then one pass per low-bit mode against the detached
//! full-precision logits, all accumulating into the same gradients before a
//! single SGD-momentum update of the parent model.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::mode::BitMode;
use crate::network::QuantizableNet;
use crate::objective::{configured_consistency, cross_entropy, weight_decay, ObjectiveConfig};

/// Loss used for low-bit modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// KL against the detached full-precision logits.
    Consistency,
    /// Cross-entropy against the labels in every mode (ablation baseline).
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs (0-based) at which the rate is multiplied by `lr_decay`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub modes: Vec<BitMode>,
    /// When false, mode 1 is dropped from `modes`.
    pub include_1bit: bool,
    pub loss: LossKind,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.05,
            lr_decay_epochs: Vec::new(),
            lr_decay: 0.1,
            momentum: 0.9,
            seed: 0,
            modes: crate::mode::mode_list(&[1, 2, 4, 32]).expect("valid modes"),
            include_1bit: true,
            loss: LossKind::Consistency,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::contract("batch_size must be at least 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract("momentum must be in [0, 1)"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::contract("lr_decay must be positive"));
        }
        if !self.modes.contains(&BitMode::FULL) {
            return Err(Error::contract("modes must include 32"));
        }
        self.objective.validate()
    }

    /// Training modes, ascending, after applying `include_1bit`.
    pub fn train_modes(&self) -> Vec<BitMode> {
        let mut modes: Vec<BitMode> = self.modes.iter().copied().filter(|m| self.include_1bit || m.bits() != 1).collect();
        modes.sort();
        modes.dedup();
        modes
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← μ v + g`, `p ← p − η v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
    steps: u64,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd { momentum, velocity: Vec::new(), steps: 0 }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, net: &mut QuantizableNet, learning_rate: f64) -> Result<()> {
        let mut params = net.parameters_mut();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        } else if self.velocity.len() != params.len() {
            return Err(Error::contract("optimizer state does not match the network"));
        }
        for ((_, p), v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
            let updated = p
                .data()
                .iter()
                .zip(v.iter_mut())
                .zip(&grad)
                .map(|((w, v), g)| {
                    *v = self.momentum * *v + g;
                    w - learning_rate * *v
                })
                .collect();
            **p = Tensor::param(updated, p.shape())?;
        }
        self.steps += 1;
        Ok(())
    }
}

/// Result of one [`train_step`].
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Unweighted loss per mode.
    pub losses: BTreeMap<BitMode, f64>,
    /// The detached full-precision logits every low-bit loss compared against.
    pub target: Tensor,
    /// True if no low-bit loss graph reached the full-precision logits.
    pub target_detached: bool,
}

fn ensure_finite(mode: BitMode, loss: &Tensor) -> Result<()> {
    let value = loss.item();
    if value.is_finite() {
        Ok(())
    } else {
        log::error!("non-finite loss {value} in {mode} mode; aborting step");
        Err(Error::NonFinite { mode, value })
    }
}

/// Clears gradients, runs every training mode with gradient accumulation and
/// leaves the summed gradient in the parameters without updating them.
pub fn accumulate_gradients(
    net: &mut QuantizableNet,
    x: &Tensor,
    labels: &[usize],
    modes: &[BitMode],
    loss_kind: LossKind,
    objective: &ObjectiveConfig,
) -> Result<StepOutcome> {
    if let Some(m) = modes.iter().find(|m| !net.modes().contains(m)) {
        return Err(Error::UnknownMode(*m));
    }
    if !modes.contains(&BitMode::FULL) {
        return Err(Error::contract("training modes must include 32"));
    }
    net.zero_grads();
    let mut losses = BTreeMap::new();

    let tape = Tape::new();
    let full_logits = net.forward_train(&tape, x, BitMode::FULL)?;
    let ce = cross_entropy(&tape, &full_logits, labels)?;
    ensure_finite(BitMode::FULL, &ce)?;
    losses.insert(BitMode::FULL, ce.item());
    let mut loss = tape.scale(&ce, objective.alpha(BitMode::FULL))?;
    if objective.weight_decay > 0.0 {
        let decay = weight_decay(&tape, net.parent_weights(), objective.weight_decay)?;
        loss = tape.add(&loss, &decay)?;
    }
    tape.backward(&loss)?;
    let target = full_logits.detach();

    let mut target_detached = true;
    for &mode in modes.iter().filter(|m| !m.is_full()) {
        let tape = Tape::new();
        let logits = net.forward_train(&tape, x, mode)?;
        let mode_loss = match loss_kind {
            LossKind::Consistency => configured_consistency(&tape, &target, &logits, objective)?,
            LossKind::CrossEntropy => cross_entropy(&tape, &logits, labels)?,
        };
        ensure_finite(mode, &mode_loss)?;
        target_detached &= !tape.depends_on(&mode_loss, &full_logits) && !tape.consumes(&full_logits);
        losses.insert(mode, mode_loss.item());
        tape.backward(&tape.scale(&mode_loss, objective.alpha(mode))?)?;
    }
    Ok(StepOutcome { losses, target, target_detached })
}

/// One training step on a batch: accumulate gradients over all modes, then
/// apply exactly one optimizer update.
pub fn train_step(
    net: &mut QuantizableNet,
    x: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    optimizer: &mut Sgd,
    learning_rate: f64,
) -> Result<StepOutcome> {
    let outcome = accumulate_gradients(net, x, labels, &config.train_modes(), config.loss, &config.objective)?;
    optimizer.step(net, learning_rate)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

const EVAL_BATCH: usize = 500;

/// Top-1 accuracy and mean cross-entropy of `net` in `mode` with stored
/// running statistics. Read-only.
pub fn evaluate(net: &QuantizableNet, data: &Dataset, mode: BitMode) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk)?;
        let logits = net.logits(&x, mode)?;
        let ce = cross_entropy(&Tape::no_grad(), &logits, &labels)?;
        loss_sum += ce.item() * chunk.len() as f64;
        correct += predictions(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(Evaluation { accuracy: correct as f64 / data.len() as f64, loss: loss_sum / data.len() as f64 })
}

/// Row-wise argmax (first maximum wins).
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: u8,
    /// Mean training loss of the mode over the epoch's batches.
    pub loss: f64,
    /// Validation accuracy at the end of the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Validation accuracy per mode after the last epoch.
    pub final_accuracy: BTreeMap<u8, f64>,
    pub epoch_seconds: Vec<f64>,
    pub optimizer_steps: u64,
}

impl TrainReport {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        for r in &self.records {
            writer.serialize(r)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn write_json(&self, out: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(out, self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Trains `net` on `train`, evaluating every training mode on `valid` after
/// each epoch. `on_epoch` sees each finished epoch's records.
pub fn fit_with(
    net: &mut QuantizableNet,
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &[EpochRecord]),
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::contract("training and validation sets must be non-empty"));
    }
    let modes = config.train_modes();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Sgd::new(config.momentum);
    let mut report = TrainReport { records: Vec::new(), final_accuracy: BTreeMap::new(), epoch_seconds: Vec::new(), optimizer_steps: 0 };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<BitMode, f64> = BTreeMap::new();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let (x, labels) = train.batch(chunk)?;
            let outcome = train_step(net, &x, &labels, config, &mut optimizer, lr)?;
            for (m, l) in outcome.losses {
                *sums.entry(m).or_default() += l;
            }
            batches += 1;
        }
        let first = report.records.len();
        for &mode in &modes {
            let eval = evaluate(net, valid, mode)?;
            let loss = sums.get(&mode).map_or(f64::NAN, |s| s / batches as f64);
            report.records.push(EpochRecord { epoch, mode: mode.bits(), loss, accuracy: eval.accuracy });
            report.final_accuracy.insert(mode.bits(), eval.accuracy);
        }
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        let summary: Vec<String> = report.records[first..].iter().map(|r| format!("{}b {:.4}/{:.3}", r.mode, r.loss, r.accuracy)).collect();
        log::info!("epoch {epoch} lr {lr}: {}", summary.join(", "));
        on_epoch(epoch, &report.records[first..]);
    }
    report.optimizer_steps = optimizer.steps();
    Ok(report)
}

pub fn fit(net: &mut QuantizableNet, train: &Dataset, valid: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    fit_with(net, train, valid, config, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::mode::mode_list;
    use crate::network::{build_mlp, NetOptions};

    fn blobs_net(modes: &[BitMode]) -> QuantizableNet {
        build_mlp(&[2, 8, 3], modes, &NetOptions { seed: 1, ..Default::default() }).unwrap()
    }

    fn snapshot(net: &QuantizableNet) -> Vec<Vec<f64>> {
        net.parameters().iter().map(|(_, p)| p.data().to_vec()).collect()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let modes = mode_list(&[1, 2, 32]).unwrap();
        let mut net = blobs_net(&modes);
        let ds = synthetic_blobs(4, 3, 2, 3.0, 0).unwrap();
        let before = snapshot(&net);
        let config = TrainConfig { modes: modes.clone(), ..Default::default() };
        let mut sgd = Sgd::new(0.9);
        train_step(&mut net, ds.inputs(), ds.labels(), &config, &mut sgd, 0.0).unwrap();
        assert_eq!(snapshot(&net), before);
        assert_eq!(sgd.steps(), 1);
    }

    #[test]
    fn full_only_step_is_plain_sgd() {
        let modes = vec![BitMode::FULL];
        let mut net = blobs_net(&modes);
        let reference = net.clone();
        let ds = synthetic_blobs(4, 3, 2, 3.0, 0).unwrap();
        let config = TrainConfig { modes, ..Default::default() };
        let outcome = train_step(&mut net, ds.inputs(), ds.labels(), &config, &mut Sgd::new(0.9), 0.5).unwrap();
        assert_eq!(outcome.losses.len(), 1);

        let mut manual = reference;
        let tape = Tape::new();
        let logits = manual.forward_train(&tape, ds.inputs(), BitMode::FULL).unwrap();
        tape.backward(&cross_entropy(&tape, &logits, ds.labels()).unwrap()).unwrap();
        for ((_, p), (_, q)) in net.parameters().iter().zip(manual.parameters()) {
            let g = q.grad().unwrap();
            for ((a, b), g) in p.data().iter().zip(q.data()).zip(&g) {
                assert_eq!(*a, b - 0.5 * g);
            }
        }
    }

    #[test]
    fn target_is_detached_and_losses_cover_modes() {
        let modes = mode_list(&[1, 4, 32]).unwrap();
        let mut net = blobs_net(&modes);
        let ds = synthetic_blobs(4, 3, 2, 3.0, 0).unwrap();
        let outcome = accumulate_gradients(&mut net, ds.inputs(), ds.labels(), &modes, LossKind::Consistency, &ObjectiveConfig::default()).unwrap();
        assert!(outcome.target_detached);
        assert!(!outcome.target.requires_grad());
        assert_eq!(outcome.losses.keys().copied().collect::<Vec<_>>(), modes);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let modes = vec![BitMode::FULL];
        let mut net = blobs_net(&modes);
        let w = net.layers()[1].bias.as_ref().unwrap().shape().to_vec();
        net.layers_mut()[1].bias = Some(Tensor::param(vec![f64::NAN; 3], &w).unwrap());
        let ds = synthetic_blobs(4, 3, 2, 3.0, 0).unwrap();
        let config = TrainConfig { modes, ..Default::default() };
        let before = snapshot(&net);
        let mut sgd = Sgd::new(0.9);
        let err = train_step(&mut net, ds.inputs(), ds.labels(), &config, &mut sgd, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(sgd.steps(), 0);
        assert_eq!(format!("{:?}", snapshot(&net)), format!("{before:?}"));
    }

    #[test]
    fn schedule_and_mode_filter() {
        let config = TrainConfig { learning_rate: 1.0, lr_decay_epochs: vec![2, 4], lr_decay: 0.5, include_1bit: false, ..Default::default() };
        assert_eq!(config.learning_rate_at(0), 1.0);
        assert_eq!(config.learning_rate_at(2), 0.5);
        assert_eq!(config.learning_rate_at(5), 0.25);
        assert_eq!(config.train_modes(), mode_list(&[2, 4, 32]).unwrap());
    }

    #[test]
    fn fit_is_deterministic_and_reports_every_mode() {
        let modes = mode_list(&[2, 32]).unwrap();
        let ds = synthetic_blobs(20, 3, 2, 5.0, 4).unwrap();
        let config = TrainConfig { epochs: 3, batch_size: 16, modes: modes.clone(), ..Default::default() };
        let run = || {
            let mut net = blobs_net(&modes);
            let report = fit(&mut net, &ds, &ds, &config).unwrap();
            (snapshot(&net), report)
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        assert_eq!(p1, p2);
        assert_eq!(r1.records, r2.records);
        assert_eq!(r1.records.len(), 3 * 2);
        assert_eq!(r1.final_accuracy.keys().copied().collect::<Vec<_>>(), vec![2, 32]);
        assert_eq!(r1.optimizer_steps, 3 * 4);
        let mut csv = Vec::new();
        r1.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,mode,loss,accuracy\n"));
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn evaluate_is_read_only_and_needs_stats() {
        let modes = mode_list(&[2, 32]).unwrap();
        let mut net = blobs_net(&modes);
        let ds = synthetic_blobs(10, 3, 2, 5.0, 2).unwrap();
        assert!(matches!(evaluate(&net, &ds, BitMode::FULL), Err(Error::MissingStats(_))));
        net.forward_train(&Tape::no_grad(), ds.inputs(), BitMode::FULL).unwrap();
        let stats = net.layers()[0].norm.as_ref().unwrap().stat_slots().to_vec();
        let a = evaluate(&net, &ds, BitMode::FULL).unwrap();
        let b = evaluate(&net, &ds, BitMode::FULL).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.layers()[0].norm.as_ref().unwrap().stat_slots(), stats.as_slice());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let logits = Tensor::new(vec![0.0, 2.0, 2.0, -1.0, -3.0, -2.0], &[2, 3]).unwrap();
        assert_eq!(predictions(&logits), vec![1, 0]);
    }
}
