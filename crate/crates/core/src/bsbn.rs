//! Bit-specific batch normalization.
//!
//! Each bit mode gets its own running statistics `(μ_k, σ²_k)`. Variant A
//! shares a single affine pair `(γ, β)` across modes; variant B gives every
//! mode a private `(γ_k, β_k)`. [`NormVariant::Shared`] is the ordinary
//! batch-norm baseline: one statistics slot and one affine pair bound to
//! every mode.

use serde::{Deserialize, Serialize};

use crate::engine::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::mode::BitMode;
use crate::network::QuantizableNet;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    /// One set of statistics and affine parameters for all modes.
    Shared,
    /// Private statistics per mode, shared affine parameters.
    #[serde(rename = "bsbn_a")]
    A,
    /// Private statistics and affine parameters per mode.
    #[serde(rename = "bsbn_b")]
    B,
}

/// Which statistics normalize the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormState {
    /// Batch statistics; the mode's running statistics are updated afterwards.
    Train,
    /// Stored running statistics.
    Eval,
    /// Batch statistics, reported but never folded into running statistics.
    Calibrate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// False until the slot has seen a training batch or a recalibration.
    pub populated: bool,
}

impl RunningStats {
    fn fresh(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels], populated: false }
    }
}

/// Per-channel mean and population variance of `count` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn of(y: &Tensor) -> Result<Self> {
        let (rows, channels) = matrix_dims(y)?;
        let data = y.data();
        let mut mean = vec![0.0; channels];
        for row in data.chunks_exact(channels) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; channels];
        for row in data.chunks_exact(channels) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        Ok(BatchStats { count: rows, mean, var })
    }

    /// Statistics of the union of both row sets (pairwise update).
    pub fn merge(&self, other: &BatchStats) -> BatchStats {
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut mean = Vec::with_capacity(self.mean.len());
        let mut var = Vec::with_capacity(self.mean.len());
        for c in 0..self.mean.len() {
            let delta = other.mean[c] - self.mean[c];
            mean.push(self.mean[c] + delta * nb / n);
            let m2 = self.var[c] * na + other.var[c] * nb + delta * delta * na * nb / n;
            var.push(m2 / n);
        }
        BatchStats { count: self.count + other.count, mean, var }
    }
}

fn matrix_dims(y: &Tensor) -> Result<(usize, usize)> {
    match *y.shape() {
        [rows, channels] => Ok((rows, channels)),
        _ => Err(Error::Shape { op: "batch norm", lhs: y.shape().to_vec(), rhs: vec![] }),
    }
}

pub struct BsbnLayer {
    channels: usize,
    modes: Vec<BitMode>,
    variant: NormVariant,
    eps: f64,
    momentum: f64,
    stats: Vec<RunningStats>,
    scale: Vec<Tensor>,
    shift: Vec<Tensor>,
}

impl Clone for BsbnLayer {
    /// Deep copy: the clone's parameters are new tensors.
    fn clone(&self) -> Self {
        let copy = |ts: &Vec<Tensor>| ts.iter().map(Tensor::duplicate).collect();
        BsbnLayer {
            channels: self.channels,
            modes: self.modes.clone(),
            variant: self.variant,
            eps: self.eps,
            momentum: self.momentum,
            stats: self.stats.clone(),
            scale: copy(&self.scale),
            shift: copy(&self.shift),
        }
    }
}

impl std::fmt::Debug for BsbnLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BsbnLayer").field("channels", &self.channels).field("modes", &self.modes).field("variant", &self.variant).finish_non_exhaustive()
    }
}

impl BsbnLayer {
    pub fn new(channels: usize, modes: &[BitMode], variant: NormVariant) -> Result<Self> {
        Self::with_hyper(channels, modes, variant, DEFAULT_EPS, DEFAULT_MOMENTUM)
    }

    pub fn with_hyper(channels: usize, modes: &[BitMode], variant: NormVariant, eps: f64, momentum: f64) -> Result<Self> {
        if channels == 0 || modes.is_empty() {
            return Err(Error::contract("normalization needs channels and at least one mode"));
        }
        if !(eps > 0.0 && eps.is_finite() && momentum > 0.0 && momentum < 1.0) {
            return Err(Error::contract(format!("invalid normalization hyper-parameters eps={eps}, momentum={momentum}")));
        }
        let mut modes = modes.to_vec();
        modes.sort();
        modes.dedup();
        let stat_slots = match variant {
            NormVariant::Shared => 1,
            NormVariant::A | NormVariant::B => modes.len(),
        };
        let affine_slots = match variant {
            NormVariant::B => modes.len(),
            NormVariant::Shared | NormVariant::A => 1,
        };
        let ones = || Tensor::param(vec![1.0; channels], &[channels]).expect("channels > 0");
        let zeros = || Tensor::param(vec![0.0; channels], &[channels]).expect("channels > 0");
        Ok(BsbnLayer {
            channels,
            variant,
            eps,
            momentum,
            stats: (0..stat_slots).map(|_| RunningStats::fresh(channels)).collect(),
            scale: (0..affine_slots).map(|_| ones()).collect(),
            shift: (0..affine_slots).map(|_| zeros()).collect(),
            modes,
        })
    }

    /// Rebuilds a layer from stored parts (used when loading packed models).
    pub(crate) fn from_parts(
        channels: usize,
        modes: Vec<BitMode>,
        variant: NormVariant,
        eps: f64,
        momentum: f64,
        stats: Vec<RunningStats>,
        affine: Vec<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut layer = Self::with_hyper(channels, &modes, variant, eps, momentum)?;
        if stats.len() != layer.stats.len() || affine.len() != layer.scale.len() {
            return Err(Error::Format(format!("normalization slot count mismatch for variant {variant:?}")));
        }
        if stats.iter().any(|s| s.mean.len() != channels || s.var.len() != channels) || affine.iter().any(|(g, b)| g.len() != channels || b.len() != channels) {
            return Err(Error::Format("normalization channel count mismatch".into()));
        }
        layer.stats = stats;
        layer.scale = affine.iter().map(|(g, _)| Tensor::param(g.clone(), &[channels])).collect::<Result<_>>()?;
        layer.shift = affine.iter().map(|(_, b)| Tensor::param(b.clone(), &[channels])).collect::<Result<_>>()?;
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn modes(&self) -> &[BitMode] {
        &self.modes
    }

    pub fn variant(&self) -> NormVariant {
        self.variant
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn stat_slots(&self) -> &[RunningStats] {
        &self.stats
    }

    /// `(γ, β)` per affine slot.
    pub fn affine_slots(&self) -> impl Iterator<Item = (&Tensor, &Tensor)> {
        self.scale.iter().zip(&self.shift)
    }

    pub fn affine_slots_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, &mut Tensor)> {
        self.scale.iter_mut().zip(self.shift.iter_mut())
    }

    fn stat_slot(&self, mode: BitMode) -> Result<usize> {
        let idx = self.modes.iter().position(|&m| m == mode).ok_or(Error::UnknownMode(mode))?;
        Ok(match self.variant {
            NormVariant::Shared => 0,
            NormVariant::A | NormVariant::B => idx,
        })
    }

    fn affine_slot(&self, mode: BitMode) -> Result<usize> {
        let slot = self.stat_slot(mode)?;
        Ok(match self.variant {
            NormVariant::B => slot,
            NormVariant::Shared | NormVariant::A => 0,
        })
    }

    pub fn running(&self, mode: BitMode) -> Result<&RunningStats> {
        Ok(&self.stats[self.stat_slot(mode)?])
    }

    pub fn affine(&self, mode: BitMode) -> Result<(&Tensor, &Tensor)> {
        let slot = self.affine_slot(mode)?;
        Ok((&self.scale[slot], &self.shift[slot]))
    }

    /// Overwrites the affine parameters of `mode`'s slot.
    pub fn set_affine(&mut self, mode: BitMode, scale: &[f64], shift: &[f64]) -> Result<()> {
        let slot = self.affine_slot(mode)?;
        self.scale[slot] = Tensor::param(scale.to_vec(), &[self.channels])?;
        self.shift[slot] = Tensor::param(shift.to_vec(), &[self.channels])?;
        Ok(())
    }

    /// Learnable scalars (γ and β entries).
    pub fn learnable_count(&self) -> usize {
        2 * self.channels * self.scale.len()
    }

    /// Non-learnable scalars (μ and σ² entries).
    pub fn statistic_count(&self) -> usize {
        2 * self.channels * self.stats.len()
    }

    /// Normalizes `y: [rows, channels]` for `mode`. In `Train` and
    /// `Calibrate` states the batch statistics are returned; apply them with
    /// [`BsbnLayer::update_running`] to advance the running averages.
    pub fn forward(&self, tape: &Tape, y: &Tensor, mode: BitMode, state: NormState) -> Result<(Tensor, Option<BatchStats>)> {
        let (rows, channels) = matrix_dims(y)?;
        if channels != self.channels {
            return Err(Error::Shape { op: "batch norm", lhs: y.shape().to_vec(), rhs: vec![rows, self.channels] });
        }
        let slot = self.stat_slot(mode)?;
        let (normalized, batch) = match state {
            NormState::Train | NormState::Calibrate => {
                if rows < 2 {
                    return Err(Error::contract("batch statistics need at least 2 rows per channel"));
                }
                let stats = BatchStats::of(y)?;
                let xhat = self.normalize_batch(tape, y, &stats)?;
                (xhat, Some(stats))
            }
            NormState::Eval => {
                let running = &self.stats[slot];
                if !running.populated {
                    return Err(Error::MissingStats(mode));
                }
                (self.normalize_fixed(tape, y, running)?, None)
            }
        };
        let (scale, shift) = self.affine(mode)?;
        Ok((affine(tape, &normalized, scale, shift)?, batch))
    }

    fn normalize_batch(&self, tape: &Tape, y: &Tensor, stats: &BatchStats) -> Result<Tensor> {
        let c = self.channels;
        let n = stats.count as f64;
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let xhat: Vec<f64> = y.data().iter().enumerate().map(|(i, v)| (v - stats.mean[i % c]) * inv_std[i % c]).collect();
        let saved = xhat.clone();
        tape.record("bn_batch", &[y], xhat, y.shape().to_vec(), move |g, _| {
            // dx = (1/σ)(g − mean(g) − x̂ · mean(g ⊙ x̂)), per channel.
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (i, (gv, xv)) in g.iter().zip(&saved).enumerate() {
                sum_g[i % c] += gv;
                sum_gx[i % c] += gv * xv;
            }
            let dx = g
                .iter()
                .zip(&saved)
                .enumerate()
                .map(|(i, (gv, xv))| {
                    let ch = i % c;
                    inv_std[ch] * (gv - sum_g[ch] / n - xv * sum_gx[ch] / n)
                })
                .collect();
            vec![Some(dx)]
        })
    }

    fn normalize_fixed(&self, tape: &Tape, y: &Tensor, running: &RunningStats) -> Result<Tensor> {
        let c = self.channels;
        let inv_std: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let xhat = y.data().iter().enumerate().map(|(i, v)| (v - running.mean[i % c]) * inv_std[i % c]).collect();
        tape.record("bn_running", &[y], xhat, y.shape().to_vec(), move |g, _| vec![Some(g.iter().enumerate().map(|(i, gv)| gv * inv_std[i % c]).collect())])
    }

    /// Folds batch statistics into `mode`'s running averages.
    pub fn update_running(&mut self, mode: BitMode, batch: &BatchStats) -> Result<()> {
        let slot = self.stat_slot(mode)?;
        let m = self.momentum;
        let running = &mut self.stats[slot];
        for c in 0..self.channels {
            running.mean[c] = (1.0 - m) * running.mean[c] + m * batch.mean[c];
            running.var[c] = (1.0 - m) * running.var[c] + m * batch.var[c];
        }
        running.populated = true;
        Ok(())
    }

    /// Replaces `mode`'s running statistics outright.
    pub fn set_running(&mut self, mode: BitMode, stats: &BatchStats) -> Result<()> {
        let slot = self.stat_slot(mode)?;
        if stats.mean.len() != self.channels {
            return Err(Error::contract("statistics channel count mismatch"));
        }
        self.stats[slot] = RunningStats { mean: stats.mean.clone(), var: stats.var.clone(), populated: true };
        Ok(())
    }
}

/// `out[r, c] = γ[c] · x̂[r, c] + β[c]`.
fn affine(tape: &Tape, xhat: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let c = scale.len();
    let out = xhat.data().iter().enumerate().map(|(i, x)| scale.data()[i % c] * x + shift.data()[i % c]).collect();
    let (xc, sc) = (xhat.clone(), scale.clone());
    tape.record("bn_affine", &[xhat, scale, shift], out, xhat.shape().to_vec(), move |g, needs| {
        let dx = needs[0].then(|| g.iter().enumerate().map(|(i, gv)| gv * sc.data()[i % c]).collect());
        let dscale = needs[1].then(|| {
            let mut acc = vec![0.0; c];
            for (i, (gv, xv)) in g.iter().zip(xc.data()).enumerate() {
                acc[i % c] += gv * xv;
            }
            acc
        });
        let dshift = needs[2].then(|| {
            let mut acc = vec![0.0; c];
            for (i, gv) in g.iter().enumerate() {
                acc[i % c] += gv;
            }
            acc
        });
        vec![dx, dscale, dshift]
    })
}

/// Re-estimates `mode`'s running statistics in every normalization layer
/// from forward passes over `batches`, with no gradient updates.
///
/// Each layer normalizes with the current batch's statistics while the
/// pooled statistics over all calibration rows are collected; other modes'
/// statistics are untouched.
pub fn recalibrate(net: &mut QuantizableNet, mode: BitMode, batches: &[Tensor]) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::contract("recalibration needs at least one batch"));
    }
    let mut pooled: Vec<Option<BatchStats>> = Vec::new();
    for x in batches {
        let tape = Tape::no_grad();
        let out = net.forward_with_state(&tape, x, mode, NormState::Calibrate)?;
        if pooled.is_empty() {
            pooled = vec![None; out.batch_stats.len()];
        }
        for (acc, stats) in pooled.iter_mut().zip(out.batch_stats) {
            if let Some(stats) = stats {
                *acc = Some(match acc.take() {
                    Some(prev) => prev.merge(&stats),
                    None => stats,
                });
            }
        }
    }
    for (layer, stats) in net.layers_mut().iter_mut().zip(pooled) {
        if let (Some(norm), Some(stats)) = (layer.norm.as_mut(), stats) {
            norm.set_running(mode, &stats)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{finite_difference, max_relative_error};

    fn modes(bits: &[u8]) -> Vec<BitMode> {
        crate::mode::mode_list(bits).unwrap()
    }

    #[test]
    fn eval_with_unit_stats_is_near_identity() {
        let mut layer = BsbnLayer::new(2, &modes(&[2, 32]), NormVariant::B).unwrap();
        let m = BitMode::FULL;
        layer.set_running(m, &BatchStats { count: 1, mean: vec![0.0, 0.0], var: vec![1.0, 1.0] }).unwrap();
        let y = Tensor::new(vec![0.5, -2.0, 3.0, 1.0], &[2, 2]).unwrap();
        let (out, _) = layer.forward(&Tape::no_grad(), &y, m, NormState::Eval).unwrap();
        for (o, v) in out.data().iter().zip(y.data()) {
            assert!((o - v / (1.0 + DEFAULT_EPS).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn training_batch_of_two() {
        let layer = BsbnLayer::new(1, &modes(&[32]), NormVariant::B).unwrap();
        let y = Tensor::new(vec![1.0, 3.0], &[2, 1]).unwrap();
        let (out, stats) = layer.forward(&Tape::no_grad(), &y, BitMode::FULL, NormState::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
        let d = (1.0 + DEFAULT_EPS).sqrt();
        assert!((out.data()[0] + 1.0 / d).abs() < 1e-15);
        assert!((out.data()[1] - 1.0 / d).abs() < 1e-15);
    }

    #[test]
    fn zero_scale_gives_constant_shift() {
        let mut layer = BsbnLayer::new(2, &modes(&[1, 32]), NormVariant::B).unwrap();
        let m = BitMode::low(1).unwrap();
        layer.set_affine(m, &[0.0, 0.0], &[0.25, -1.0]).unwrap();
        let y = Tensor::new(vec![5.0, 1.0, -3.0, 2.0, 0.1, 7.0], &[3, 2]).unwrap();
        let (out, _) = layer.forward(&Tape::no_grad(), &y, m, NormState::Train).unwrap();
        assert_eq!(out.data(), &[0.25, -1.0, 0.25, -1.0, 0.25, -1.0]);
        // The full-precision slot still has unit scale.
        let (g, _) = layer.affine(BitMode::FULL).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0]);
    }

    #[test]
    fn errors() {
        let layer = BsbnLayer::new(1, &modes(&[2, 32]), NormVariant::A).unwrap();
        let y = Tensor::new(vec![1.0, 3.0], &[2, 1]).unwrap();
        let four = BitMode::low(4).unwrap();
        assert!(matches!(layer.forward(&Tape::no_grad(), &y, four, NormState::Train), Err(Error::UnknownMode(_))));
        let single = Tensor::new(vec![1.0], &[1, 1]).unwrap();
        assert!(matches!(layer.forward(&Tape::no_grad(), &single, BitMode::FULL, NormState::Train), Err(Error::Contract(_))));
        assert!(matches!(layer.forward(&Tape::no_grad(), &y, BitMode::FULL, NormState::Eval), Err(Error::MissingStats(_))));
    }

    #[test]
    fn running_update_touches_only_its_mode() {
        let mut layer = BsbnLayer::new(1, &modes(&[2, 4, 32]), NormVariant::A).unwrap();
        let two = BitMode::low(2).unwrap();
        let four = BitMode::low(4).unwrap();
        let before = layer.running(four).unwrap().clone();
        let stats = BatchStats { count: 4, mean: vec![3.0], var: vec![2.0] };
        layer.update_running(two, &stats).unwrap();
        let after = layer.running(two).unwrap();
        assert!((after.mean[0] - 0.3).abs() < 1e-15);
        assert!((after.var[0] - (0.9 + 0.2)).abs() < 1e-15);
        assert_eq!(layer.running(four).unwrap(), &before);
    }

    #[test]
    fn shared_variant_binds_all_modes_to_one_slot() {
        let mut layer = BsbnLayer::new(1, &modes(&[1, 2, 32]), NormVariant::Shared).unwrap();
        let stats = BatchStats { count: 2, mean: vec![1.0], var: vec![4.0] };
        layer.set_running(BitMode::low(1).unwrap(), &stats).unwrap();
        assert_eq!(layer.running(BitMode::FULL).unwrap().mean, vec![1.0]);
        assert_eq!(layer.stat_slots().len(), 1);
        assert_eq!(layer.affine_slots().count(), 1);
    }

    #[test]
    fn parameter_counts_per_variant() {
        let c = 16;
        for n in 1..=5u8 {
            let ms: Vec<u8> = (1..=n).chain([32]).collect();
            let a = BsbnLayer::new(c, &modes(&ms), NormVariant::A).unwrap();
            let b = BsbnLayer::new(c, &modes(&ms), NormVariant::B).unwrap();
            assert_eq!(a.learnable_count(), 2 * c);
            assert_eq!(a.statistic_count(), 2 * c * (n as usize + 1));
            assert_eq!(b.learnable_count(), 2 * c * (n as usize + 1));
            assert_eq!(b.statistic_count(), 2 * c * (n as usize + 1));
        }
    }

    #[test]
    fn training_output_has_beta_mean_and_gamma_std() {
        let mut layer = BsbnLayer::with_hyper(3, &modes(&[4, 32]), NormVariant::B, 1e-14, 0.1).unwrap();
        let m = BitMode::low(4).unwrap();
        layer.set_affine(m, &[2.0, -0.5, 1.0], &[0.3, 1.0, -2.0]).unwrap();
        let data: Vec<f64> = (0..60).map(|i| ((i * 7919) % 97) as f64 / 13.0 - 2.0).collect();
        let y = Tensor::new(data, &[20, 3]).unwrap();
        let (out, _) = layer.forward(&Tape::no_grad(), &y, m, NormState::Train).unwrap();
        let stats = BatchStats::of(&out).unwrap();
        for (c, (g, b)) in [(2.0f64, 0.3), (-0.5, 1.0), (1.0, -2.0)].iter().enumerate() {
            assert!((stats.mean[c] - b).abs() < 1e-6);
            assert!((stats.var[c].sqrt() - g.abs()).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_gradient_matches_finite_difference() {
        let layer = BsbnLayer::new(2, &modes(&[32]), NormVariant::B).unwrap();
        let values: Vec<f64> = vec![0.3, -1.2, 1.7, 0.4, -0.8, 2.2, 0.05, -0.6];
        let weights: Vec<f64> = (0..8).map(|i| 0.2 + 0.31 * i as f64).collect();
        let loss_of = |tape: &Tape, x: &Tensor| {
            let (out, _) = layer.forward(tape, x, BitMode::FULL, NormState::Train).unwrap();
            let w = Tensor::new(weights.clone(), &[4, 2]).unwrap();
            tape.sum(&tape.mul(&tape.tanh(&out).unwrap(), &w).unwrap()).unwrap()
        };
        let x = Tensor::param(values.clone(), &[4, 2]).unwrap();
        let tape = Tape::new();
        let loss = loss_of(&tape, &x);
        tape.backward(&loss).unwrap();
        let numeric = finite_difference(&values, 1e-5, |v| loss_of(&Tape::no_grad(), &Tensor::new(v.to_vec(), &[4, 2]).unwrap()).item());
        assert!(max_relative_error(&x.grad().unwrap(), &numeric) < 1e-4);
        let (g, b) = layer.affine(BitMode::FULL).unwrap();
        assert!(g.grad().is_some() && b.grad().is_some());
    }

    #[test]
    fn merge_equals_pooled_statistics() {
        let a = Tensor::new(vec![1.0, 2.0, 4.0, 8.0, 0.5, -1.0], &[3, 2]).unwrap();
        let b = Tensor::new(vec![3.0, 3.0, -2.0, 5.0], &[2, 2]).unwrap();
        let all = Tensor::new([a.data(), b.data()].concat(), &[5, 2]).unwrap();
        let merged = BatchStats::of(&a).unwrap().merge(&BatchStats::of(&b).unwrap());
        let direct = BatchStats::of(&all).unwrap();
        assert_eq!(merged.count, 5);
        for c in 0..2 {
            assert!((merged.mean[c] - direct.mean[c]).abs() < 1e-12);
            assert!((merged.var[c] - direct.var[c]).abs() < 1e-12);
        }
    }
}
