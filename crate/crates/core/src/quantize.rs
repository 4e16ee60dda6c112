//! Uniform k-bit quantizers, their threshold sets, and the bit-switch map.
//!
//! Two quantizer families share the same output grid
//! `{ i / (2^k − 1) : 0 ≤ i ≤ 2^k − 1 }`:
//!
//! * [`Family::Legacy`]: `round((2^k − 1) · r)`, thresholds at
//!   `(2i + 1) / (2^{k+1} − 2)`. Thresholds of different bit-widths do not
//!   nest, so a k-bit model cannot be converted to b bits without the
//!   full-precision weights.
//! * [`Family::Aligned`]: `clamp(round(2^k · r − 0.5), 0, 2^k − 1)`,
//!   thresholds at `i / 2^k`. Every b-bit threshold is also a k-bit
//!   threshold for b < k, which is what makes [`switch_codes`] exact.
//!
//! Rounding is half-away-from-zero throughout ([`f64::round`]). Codes are the
//! canonical representation; grid values are derived from them and never
//! compared as floats.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::engine::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Legacy,
    Aligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantizerSpec {
    bits: u8,
    family: Family,
}

impl QuantizerSpec {
    pub const MAX_BITS: u8 = 8;

    pub fn new(bits: u8, family: Family) -> Result<Self> {
        if !(1..=Self::MAX_BITS).contains(&bits) {
            return Err(Error::BitWidth(bits as u32));
        }
        Ok(QuantizerSpec { bits, family })
    }

    pub fn aligned(bits: u8) -> Result<Self> {
        Self::new(bits, Family::Aligned)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn family(&self) -> Family {
        self.family
    }

    /// Number of grid levels, `2^k`.
    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    pub fn max_code(&self) -> u8 {
        (self.levels() - 1) as u8
    }

    /// Integer level for `r`.
    pub fn code(&self, r: f64) -> Result<u8> {
        if !r.is_finite() {
            return Err(Error::Domain(r));
        }
        let max = self.max_code() as f64;
        let code = match self.family {
            Family::Legacy => {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::Domain(r));
                }
                (max * r).round()
            }
            Family::Aligned => (self.levels() as f64 * r - 0.5).round().clamp(0.0, max),
        };
        Ok(code as u8)
    }

    /// Grid value of a code, `code / (2^k − 1)`.
    pub fn value(&self, code: u8) -> f64 {
        code as f64 / self.max_code() as f64
    }

    pub fn quantize_unit(&self, r: f64) -> Result<(u8, f64)> {
        let code = self.code(r)?;
        Ok((code, self.value(code)))
    }

    pub fn thresholds(&self) -> ThresholdSet {
        thresholds(self.bits, self.family).expect("bits validated at construction")
    }
}

/// Weight value `2q − 1 ∈ [−1, 1]` of a k-bit code.
pub fn weight_from_code(code: u8, bits: u8) -> f64 {
    let max = ((1u32 << bits) - 1) as f64;
    2.0 * (code as f64 / max) - 1.0
}

/// Decision boundaries of a quantizer as exact rationals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdSet {
    pub bits: u8,
    pub family: Family,
    pub values: Vec<Ratio<u64>>,
}

impl ThresholdSet {
    pub fn contains(&self, t: &Ratio<u64>) -> bool {
        self.values.binary_search(t).is_ok()
    }

    pub fn is_subset_of(&self, other: &ThresholdSet) -> bool {
        self.values.iter().all(|t| other.contains(t))
    }
}

pub fn thresholds(bits: u8, family: Family) -> Result<ThresholdSet> {
    if !(1..=QuantizerSpec::MAX_BITS).contains(&bits) {
        return Err(Error::BitWidth(bits as u32));
    }
    let levels = 1u64 << bits;
    let values = match family {
        Family::Legacy => {
            let den = 2 * levels - 2;
            (0..levels - 1).map(|i| Ratio::new(2 * i + 1, den)).collect()
        }
        Family::Aligned => (1..levels).map(|i| Ratio::new(i, levels)).collect(),
    };
    Ok(ThresholdSet { bits, family, values })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Alignment {
    Aligned,
    /// `witness` is a b-bit threshold with no k-bit counterpart.
    Misaligned {
        witness: Ratio<u64>,
    },
}

impl Alignment {
    pub fn is_aligned(&self) -> bool {
        matches!(self, Alignment::Aligned)
    }
}

/// Whether every b-bit threshold is also a k-bit threshold (b < k), the
/// necessary condition for a k→b switch function to exist.
pub fn check_alignment(b: u8, k: u8, family: Family) -> Result<Alignment> {
    if b >= k {
        return Err(Error::contract(format!("alignment check needs b < k, got b={b}, k={k}")));
    }
    let low = thresholds(b, family)?;
    let high = thresholds(k, family)?;
    Ok(match low.values.iter().find(|t| !high.contains(t)) {
        Some(&witness) => Alignment::Misaligned { witness },
        None => Alignment::Aligned,
    })
}

/// Integer codes of a quantized tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeTensor {
    shape: Vec<usize>,
    codes: Vec<u8>,
    bits: u8,
    family: Family,
}

impl CodeTensor {
    pub fn new(shape: &[usize], codes: Vec<u8>, bits: u8, family: Family) -> Result<Self> {
        let spec = QuantizerSpec::new(bits, family)?;
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::Shape { op: "code tensor", lhs: shape.to_vec(), rhs: vec![codes.len()] });
        }
        if let Some(&bad) = codes.iter().find(|&&c| c > spec.max_code()) {
            return Err(Error::contract(format!("code {bad} exceeds {bits}-bit range")));
        }
        Ok(CodeTensor { shape: shape.to_vec(), codes, bits, family })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Grid values `code / (2^k − 1)`.
    pub fn values(&self) -> Vec<f64> {
        let spec = QuantizerSpec::new(self.bits, self.family).expect("validated");
        self.codes.iter().map(|&c| spec.value(c)).collect()
    }

    /// Weight values `2 · code / (2^k − 1) − 1`.
    pub fn weight_values(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| weight_from_code(c, self.bits)).collect()
    }

    /// Count of each code, indexed by code.
    pub fn histogram(&self) -> Vec<u64> {
        let mut bins = vec![0u64; 1 << self.bits];
        for &c in &self.codes {
            bins[c as usize] += 1;
        }
        bins
    }
}

/// Re-quantizes k-bit aligned codes to b bits without the original values:
/// `round(code / 2^{k−b} − 0.5)`, clamped to the b-bit range.
///
/// `b == k` returns the codes unchanged.
pub fn switch_codes(codes: &CodeTensor, b: u8) -> Result<CodeTensor> {
    if codes.family == Family::Legacy {
        return Err(Error::UnsupportedFamily(Family::Legacy));
    }
    let target = QuantizerSpec::new(b, Family::Aligned)?;
    let k = codes.bits;
    if b > k {
        return Err(Error::contract(format!("cannot switch {k}-bit codes up to {b} bits")));
    }
    if b == k {
        return Ok(codes.clone());
    }
    let step = (1u32 << (k - b)) as f64;
    let max = target.max_code() as f64;
    let switched = codes.codes.iter().map(|&c| (c as f64 / step - 0.5).round().clamp(0.0, max) as u8).collect();
    CodeTensor::new(&codes.shape, switched, b, Family::Aligned)
}

#[derive(Debug, Clone)]
pub struct QuantizedWeights {
    /// `w_q ∈ [−1, 1]`, differentiable w.r.t. the full-precision weights.
    pub values: Tensor,
    pub codes: CodeTensor,
    /// `max |tanh(w_f)|` over the layer, treated as a constant.
    pub scale: f64,
}

/// Weight quantizer: `w_q = 2 Q_k(tanh(w) / (2 max|tanh(w)|) + 1/2) − 1`.
///
/// The backward pass is the straight-through estimate
/// `dw_q/dw = (1 − tanh²(w)) / M`, with `M = max|tanh(w)|` held constant.
pub fn quantize_weights(tape: &Tape, weights: &Tensor, bits: u8, family: Family) -> Result<QuantizedWeights> {
    let spec = QuantizerSpec::new(bits, family)?;
    let scale = weights.data().iter().map(|v| v.tanh().abs()).fold(0.0, f64::max);
    let t = tape.tanh(weights)?;
    if scale == 0.0 {
        log::warn!("all-zero weight tensor {:?}; quantized weights set to zero", weights.shape());
        let code = spec.code(0.5)?;
        let codes = CodeTensor::new(weights.shape(), vec![code; weights.len()], bits, family)?;
        let values = tape.custom_grad(&t, |v| vec![0.0; v.len()], |g| g.to_vec())?;
        return Ok(QuantizedWeights { values, codes, scale });
    }
    let r = tape.add_scalar(&tape.div_scalar(&t, 2.0 * scale)?, 0.5)?;
    let codes = r.data().iter().map(|&x| spec.code(x)).collect::<Result<Vec<u8>>>()?;
    let codes = CodeTensor::new(weights.shape(), codes, bits, family)?;
    let grid = codes.weight_values();
    // d(2q − 1)/dr = 2 under the straight-through estimate dq/dr = 1.
    let values = tape.custom_grad(&r, move |_| grid.clone(), |g| g.iter().map(|v| 2.0 * v).collect())?;
    Ok(QuantizedWeights { values, codes, scale })
}

/// Activation quantizer `a_q = Q_k(clamp(a, 0, 1))`; gradient 1 on `[0, 1]`,
/// 0 outside.
pub fn quantize_activations(tape: &Tape, activations: &Tensor, bits: u8, family: Family) -> Result<Tensor> {
    let spec = QuantizerSpec::new(bits, family)?;
    let clamped = tape.clamp(activations, 0.0, 1.0)?;
    let grid = clamped.data().iter().map(|&x| spec.quantize_unit(x).map(|(_, v)| v)).collect::<Result<Vec<f64>>>()?;
    tape.custom_grad(&clamped, move |_| grid.clone(), |g| g.to_vec())
}
