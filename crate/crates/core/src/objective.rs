//! Training objective: cross-entropy for the full-precision mode, a
//! temperature-softened KL consistency term for every low-bit mode, and the
//! weighted total with weight decay on the parent weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::mode::BitMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub temperature: f64,
    /// Per-mode loss weights; modes not listed weigh 1.
    #[serde(with = "alpha_keys")]
    pub alpha: BTreeMap<BitMode, f64>,
    pub weight_decay: f64,
    /// Multiply the consistency loss by `T²` (classical distillation scaling).
    pub scale_by_t2: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { temperature: 2.0, alpha: BTreeMap::new(), weight_decay: 0.0, scale_by_t2: false }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::contract(format!("temperature must be positive, got {}", self.temperature)));
        }
        if let Some((m, a)) = self.alpha.iter().find(|(_, a)| !(**a >= 0.0 && a.is_finite())) {
            return Err(Error::contract(format!("alpha for {m} must be nonnegative, got {a}")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::contract(format!("weight decay must be nonnegative, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn alpha(&self, mode: BitMode) -> f64 {
        self.alpha.get(&mode).copied().unwrap_or(1.0)
    }
}

/// Mode keys are written as strings ("4", "32") so the map works in TOML.
mod alpha_keys {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<BitMode, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(m, a)| (m.bits().to_string(), a)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<BitMode, f64>, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, a)| {
                let bits: u8 = k.parse().map_err(|_| D::Error::custom(format!("bad mode key {k:?}")))?;
                let mode = BitMode::new(bits).map_err(D::Error::custom)?;
                Ok((mode, a))
            })
            .collect()
    }
}

fn check_logits(logits: &Tensor) -> Result<(usize, usize)> {
    match *logits.shape() {
        [n, c] => Ok((n, c)),
        _ => Err(Error::Shape { op: "loss", lhs: logits.shape().to_vec(), rhs: vec![] }),
    }
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy(tape: &Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, classes) = check_logits(logits)?;
    if labels.len() != n {
        return Err(Error::Shape { op: "cross_entropy", lhs: logits.shape().to_vec(), rhs: vec![labels.len()] });
    }
    let mut onehot = vec![0.0; n * classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::contract(format!("label {label} out of range for {classes} classes")));
        }
        onehot[row * classes + label] = 1.0;
    }
    let onehot = Tensor::new(onehot, &[n, classes])?;
    let log_probs = tape.log_softmax(logits, 1)?;
    let picked = tape.sum(&tape.mul(&log_probs, &onehot)?)?;
    tape.scale(&picked, -1.0 / n as f64)
}

/// `KL(softmax(detach(logits_full)/T) ‖ softmax(logits_low/T))`, averaged
/// over the batch. No gradient reaches `logits_full`.
pub fn consistency_loss(tape: &Tape, logits_full: &Tensor, logits_low: &Tensor, temperature: f64) -> Result<Tensor> {
    if logits_full.shape() != logits_low.shape() {
        return Err(Error::Shape { op: "consistency_loss", lhs: logits_full.shape().to_vec(), rhs: logits_low.shape().to_vec() });
    }
    let (n, _) = check_logits(logits_low)?;
    let target = Tape::no_grad();
    let soft_target = target.div_scalar(&logits_full.detach(), temperature)?;
    let log_p = target.log_softmax(&soft_target, 1)?;
    let p = target.softmax(&soft_target, 1)?;
    let log_q = tape.log_softmax(&tape.div_scalar(logits_low, temperature)?, 1)?;
    let gap = tape.sub(&log_p, &log_q)?;
    let kl = tape.sum(&tape.mul(&p, &gap)?)?;
    tape.scale(&kl, 1.0 / n as f64)
}

/// The consistency loss with the configured temperature and optional `T²`
/// factor.
pub fn configured_consistency(tape: &Tape, logits_full: &Tensor, logits_low: &Tensor, config: &ObjectiveConfig) -> Result<Tensor> {
    let loss = consistency_loss(tape, logits_full, logits_low, config.temperature)?;
    if config.scale_by_t2 {
        tape.scale(&loss, config.temperature * config.temperature)
    } else {
        Ok(loss)
    }
}

/// `coefficient · Σ ‖W‖²` over `weights`.
pub fn weight_decay<'a>(tape: &Tape, weights: impl IntoIterator<Item = &'a Tensor>, coefficient: f64) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for w in weights {
        let sq = tape.sum(&tape.mul(w, w)?)?;
        total = tape.add(&total, &sq)?;
    }
    tape.scale(&total, coefficient)
}

/// `Σ α_k L_k + γ_wd Σ ‖W‖²`. `per_mode` must cover `modes` exactly.
pub fn total_loss<'a>(
    tape: &Tape,
    per_mode: &BTreeMap<BitMode, Tensor>,
    modes: &[BitMode],
    config: &ObjectiveConfig,
    weights: impl IntoIterator<Item = &'a Tensor>,
) -> Result<Tensor> {
    if let Some(m) = modes.iter().find(|m| !per_mode.contains_key(m)) {
        return Err(Error::contract(format!("no loss for training mode {m}")));
    }
    if let Some(m) = per_mode.keys().find(|m| !modes.contains(m)) {
        return Err(Error::contract(format!("loss given for undeclared mode {m}")));
    }
    let mut total = Tensor::scalar(0.0);
    for (mode, loss) in per_mode {
        total = tape.add(&total, &tape.scale(loss, config.alpha(*mode))?)?;
    }
    if config.weight_decay > 0.0 {
        total = tape.add(&total, &weight_decay(tape, weights, config.weight_decay)?)?;
    }
    Ok(total)
}
