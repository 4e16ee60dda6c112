//! Bit-packed model files.
//!
//! A file holds one network at a stored bit-width `k`: quantized layers as
//! `k`-bit integer codes, exempt layers as raw `f64`, plus biases and the
//! normalization parameters and statistics of every declared mode. Loading at
//! `b < k` maps the codes with [`switch_codes`]; no full-precision weights
//! are needed. `k = 32` stores every weight raw (the full-precision
//! reference). The byte layout is documented in `FORMAT.md`.

use std::fs;
use std::path::Path;

use crate::bsbn::{BsbnLayer, NormVariant, RunningStats};
use crate::data::Dataset;
use crate::engine::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::mode::BitMode;
use crate::network::{Layer, LayerKind, QuantizableNet, Weights};
use crate::quantize::{quantize_weights, switch_codes, CodeTensor, Family};
use crate::trainer::{evaluate, Evaluation};

pub const MAGIC: &[u8; 4] = b"QDNN";
pub const VERSION: u16 = 1;

const FAMILY_LEGACY: u8 = 0;
const FAMILY_ALIGNED: u8 = 1;
const KIND_DENSE: u8 = 0;
const KIND_CONV: u8 = 1;
const FLAG_QUANTIZED: u8 = 1;
const FLAG_ACTIVATION: u8 = 2;
const FLAG_BIAS: u8 = 4;
const FLAG_NORM: u8 = 8;
const RAW_WEIGHTS: u8 = 0;

/// Packs `bits`-wide codes LSB-first into bytes; element `i` occupies
/// stream bits `[i·bits, (i+1)·bits)`, stream bit `j` being bit `j mod 8` of
/// byte `j / 8`. The last byte is zero-padded.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    for (i, &code) in codes.iter().enumerate() {
        for b in 0..bits {
            if code >> b & 1 == 1 {
                let j = i * bits + b;
                out[j / 8] |= 1 << (j % 8);
            }
        }
    }
    out
}

/// Inverse of [`pack_codes`]. Nonzero padding bits are rejected so that
/// every file has one canonical encoding.
pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    let width = bits as usize;
    if bytes.len() != (count * width).div_ceil(8) {
        return Err(Error::Format(format!("{} code bytes cannot hold {count} {bits}-bit codes", bytes.len())));
    }
    let bit = |j: usize| bytes[j / 8] >> (j % 8) & 1;
    let codes = (0..count).map(|i| (0..width).fold(0u8, |acc, b| acc | bit(i * width + b) << b)).collect();
    if (count * width..bytes.len() * 8).any(|j| bit(j) == 1) {
        return Err(Error::Format("nonzero padding bits after packed codes".into()));
    }
    Ok(codes)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredWeights {
    Raw(Vec<f64>),
    Codes(CodeTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredNorm {
    pub variant: NormVariant,
    pub eps: f64,
    pub momentum: f64,
    pub stats: Vec<RunningStats>,
    /// `(γ, β)` per affine slot.
    pub affine: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer {
    pub kind: LayerKind,
    pub quantized: bool,
    pub activation: bool,
    pub weights: StoredWeights,
    pub bias: Option<Vec<f64>>,
    pub norm: Option<StoredNorm>,
}

/// In-memory image of a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub stored_bits: BitMode,
    pub exempt_first_last: bool,
    pub modes: Vec<BitMode>,
    pub layers: Vec<PackedLayer>,
}

/// Serialized size by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct ByteAccounting {
    /// Header and layer descriptors.
    pub header: u64,
    pub packed_weights: u64,
    pub raw_weights: u64,
    pub biases: u64,
    /// Normalization parameters and statistics for every mode.
    pub norm: u64,
    pub total: u64,
}

impl PackedModel {
    /// Captures `net` at `bits`: quantized layers become `bits`-bit codes,
    /// or raw weights when `bits` is 32.
    pub fn from_net(net: &QuantizableNet, bits: BitMode) -> Result<Self> {
        if net.family() != Family::Aligned {
            return Err(Error::UnsupportedFamily(net.family()));
        }
        if !net.modes().contains(&bits) {
            return Err(Error::UnknownMode(bits));
        }
        let tape = Tape::no_grad();
        let layers = net
            .layers()
            .iter()
            .map(|layer| {
                let weights = match (&layer.weights, layer.quantized && !bits.is_full()) {
                    (Weights::Parent(w), false) => StoredWeights::Raw(w.data().to_vec()),
                    (Weights::Parent(w), true) => StoredWeights::Codes(quantize_weights(&tape, w, bits.bits(), Family::Aligned)?.codes),
                    (Weights::Codes(c), true) if c.bits() == bits.bits() => StoredWeights::Codes(c.clone()),
                    (Weights::Codes(c), true) if c.bits() > bits.bits() => StoredWeights::Codes(switch_codes(c, bits.bits())?),
                    (Weights::Codes(c), _) => {
                        return Err(Error::contract(format!("cannot store {}-bit codes at {bits}", c.bits())));
                    }
                };
                Ok(PackedLayer {
                    kind: layer.kind,
                    quantized: layer.quantized,
                    activation: layer.activation,
                    weights,
                    bias: layer.bias.as_ref().map(|b| b.data().to_vec()),
                    norm: layer.norm.as_ref().map(|n| StoredNorm {
                        variant: n.variant(),
                        eps: n.eps(),
                        momentum: n.momentum(),
                        stats: n.stat_slots().to_vec(),
                        affine: n.affine_slots().map(|(g, b)| (g.data().to_vec(), b.data().to_vec())).collect(),
                    }),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PackedModel { stored_bits: bits, exempt_first_last: net.exempt_first_last(), modes: net.modes().to_vec(), layers })
    }

    /// The same model stored at `b < k` bits, codes mapped by
    /// [`switch_codes`].
    pub fn switch(&self, b: BitMode) -> Result<PackedModel> {
        if self.stored_bits.is_full() {
            return Err(Error::contract("a full-precision file has no codes to switch; quantize it with from_net"));
        }
        if b.is_full() || b.bits() >= self.stored_bits.bits() {
            return Err(Error::contract(format!("switch target {b} must be below the stored {}", self.stored_bits)));
        }
        if !self.modes.contains(&b) {
            return Err(Error::contract(format!("no normalization entries stored for {b}")));
        }
        let mut out = self.clone();
        out.stored_bits = b;
        for layer in &mut out.layers {
            if let StoredWeights::Codes(c) = &layer.weights {
                layer.weights = StoredWeights::Codes(switch_codes(c, b.bits())?);
            }
        }
        Ok(out)
    }

    /// An executable network in mode `b ≤ k`.
    pub fn instantiate(&self, b: BitMode) -> Result<LoadedNet> {
        let allowed = if self.stored_bits.is_full() { true } else { !b.is_full() && b.bits() <= self.stored_bits.bits() };
        if !allowed {
            return Err(Error::contract(format!("cannot run {b} from a file stored at {}", self.stored_bits)));
        }
        if !self.modes.contains(&b) {
            return Err(Error::contract(format!("no normalization entries stored for {b}")));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let [rows, cols] = l.kind.weight_shape();
                Ok(Layer {
                    kind: l.kind,
                    weights: match &l.weights {
                        StoredWeights::Raw(w) => Weights::Parent(Tensor::param(w.clone(), &[rows, cols])?),
                        StoredWeights::Codes(c) => Weights::Codes(c.clone()),
                    },
                    bias: l.bias.as_ref().map(|b| Tensor::param(b.clone(), &[1, b.len()])).transpose()?,
                    norm: l
                        .norm
                        .as_ref()
                        .map(|n| BsbnLayer::from_parts(l.kind.channels(), self.modes.clone(), n.variant, n.eps, n.momentum, n.stats.clone(), n.affine.clone()))
                        .transpose()?,
                    activation: l.activation,
                    quantized: l.quantized,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = QuantizableNet::from_layers(layers, &self.modes, Family::Aligned, self.exempt_first_last)?;
        Ok(LoadedNet { net, mode: b, stored: self.stored_bits })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode().0
    }

    pub fn accounting(&self) -> ByteAccounting {
        self.encode().1
    }

    fn encode(&self) -> (Vec<u8>, ByteAccounting) {
        let mut w = Writer::default();
        let mut acc = ByteAccounting::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u8(FAMILY_ALIGNED);
        w.u8(self.stored_bits.bits());
        w.u8(self.exempt_first_last as u8);
        w.u8(self.modes.len() as u8);
        for m in &self.modes {
            w.u8(m.bits());
        }
        w.u32(self.layers.len() as u32);
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Dense { inputs, outputs } => {
                    w.u8(KIND_DENSE);
                    w.u32(inputs as u32);
                    w.u32(outputs as u32);
                }
                LayerKind::Conv { height, width, in_channels, out_channels, kernel, stride, padding } => {
                    w.u8(KIND_CONV);
                    for v in [height, width, in_channels, out_channels, kernel, stride, padding] {
                        w.u32(v as u32);
                    }
                }
            }
            let flags = (layer.quantized as u8 * FLAG_QUANTIZED)
                | (layer.activation as u8 * FLAG_ACTIVATION)
                | (layer.bias.is_some() as u8 * FLAG_BIAS)
                | (layer.norm.is_some() as u8 * FLAG_NORM);
            w.u8(flags);
            match &layer.weights {
                StoredWeights::Raw(values) => {
                    w.u8(RAW_WEIGHTS);
                    let start = w.len();
                    values.iter().for_each(|&v| w.f64(v));
                    acc.raw_weights += (w.len() - start) as u64;
                }
                StoredWeights::Codes(codes) => {
                    w.u8(codes.bits());
                    let packed = pack_codes(codes.codes(), codes.bits());
                    acc.packed_weights += packed.len() as u64;
                    w.bytes(&packed);
                }
            }
            if let Some(bias) = &layer.bias {
                let start = w.len();
                bias.iter().for_each(|&v| w.f64(v));
                acc.biases += (w.len() - start) as u64;
            }
            if let Some(norm) = &layer.norm {
                let start = w.len();
                w.u8(match norm.variant {
                    NormVariant::Shared => 0,
                    NormVariant::A => 1,
                    NormVariant::B => 2,
                });
                w.f64(norm.eps);
                w.f64(norm.momentum);
                w.u8(norm.stats.len() as u8);
                for s in &norm.stats {
                    w.u8(s.populated as u8);
                    s.mean.iter().chain(&s.var).for_each(|&v| w.f64(v));
                }
                w.u8(norm.affine.len() as u8);
                for (g, b) in &norm.affine {
                    g.iter().chain(b).for_each(|&v| w.f64(v));
                }
                acc.norm += (w.len() - start) as u64;
            }
        }
        acc.total = w.len() as u64;
        acc.header = acc.total - acc.packed_weights - acc.raw_weights - acc.biases - acc.norm;
        (w.buf, acc)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a QDNN model file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        match r.u8()? {
            FAMILY_ALIGNED => {}
            FAMILY_LEGACY => return Err(Error::UnsupportedFamily(Family::Legacy)),
            other => return Err(Error::Format(format!("unknown quantizer family tag {other}"))),
        }
        let stored_bits = BitMode::new(r.u8()?).map_err(|e| Error::Format(e.to_string()))?;
        let exempt_first_last = r.flag()?;
        let mode_count = r.u8()? as usize;
        let modes = (0..mode_count).map(|_| BitMode::new(r.u8()?).map_err(|e| Error::Format(e.to_string()))).collect::<Result<Vec<_>>>()?;
        if modes.windows(2).any(|w| w[0] >= w[1]) || !modes.contains(&stored_bits) {
            return Err(Error::Format("mode list must be strictly ascending and contain the stored bit-width".into()));
        }
        let layer_count = r.u32()? as usize;
        let mut layers = Vec::new();
        for _ in 0..layer_count {
            let kind = match r.u8()? {
                KIND_DENSE => LayerKind::Dense { inputs: r.u32()? as usize, outputs: r.u32()? as usize },
                KIND_CONV => {
                    let mut v = [0usize; 7];
                    for slot in &mut v {
                        *slot = r.u32()? as usize;
                    }
                    LayerKind::Conv { height: v[0], width: v[1], in_channels: v[2], out_channels: v[3], kernel: v[4], stride: v[5], padding: v[6] }
                }
                other => return Err(Error::Format(format!("unknown layer kind {other}"))),
            };
            let flags = r.u8()?;
            if flags & !(FLAG_QUANTIZED | FLAG_ACTIVATION | FLAG_BIAS | FLAG_NORM) != 0 {
                return Err(Error::Format(format!("unknown layer flags {flags:#04x}")));
            }
            let [rows, cols] = kind.weight_shape();
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("layer too large".into()))?;
            let channels = kind.channels();
            let weights = match r.u8()? {
                RAW_WEIGHTS => StoredWeights::Raw(r.f64s(n)?),
                bits => {
                    if bits != stored_bits.bits() || flags & FLAG_QUANTIZED == 0 {
                        return Err(Error::Format(format!("layer codes at {bits} bits in a {stored_bits} file")));
                    }
                    let packed = r.take((n * bits as usize).div_ceil(8))?;
                    let codes = unpack_codes(packed, bits, n)?;
                    StoredWeights::Codes(CodeTensor::new(&[rows, cols], codes, bits, Family::Aligned)?)
                }
            };
            let bias = if flags & FLAG_BIAS != 0 { Some(r.f64s(channels)?) } else { None };
            let norm = if flags & FLAG_NORM != 0 {
                let variant = match r.u8()? {
                    0 => NormVariant::Shared,
                    1 => NormVariant::A,
                    2 => NormVariant::B,
                    other => return Err(Error::Format(format!("unknown normalization variant {other}"))),
                };
                let eps = r.f64()?;
                let momentum = r.f64()?;
                let slots = r.u8()? as usize;
                let stats = (0..slots)
                    .map(|_| {
                        let populated = r.flag()?;
                        Ok(RunningStats { populated, mean: r.f64s(channels)?, var: r.f64s(channels)? })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let slots = r.u8()? as usize;
                let affine = (0..slots).map(|_| Ok((r.f64s(channels)?, r.f64s(channels)?))).collect::<Result<Vec<_>>>()?;
                Some(StoredNorm { variant, eps, momentum, stats, affine })
            } else {
                None
            };
            layers.push(PackedLayer { kind, quantized: flags & FLAG_QUANTIZED != 0, activation: flags & FLAG_ACTIVATION != 0, weights, bias, norm });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last layer", bytes.len() - r.pos)));
        }
        let model = PackedModel { stored_bits, exempt_first_last, modes, layers };
        // Structural validation (shapes, slot counts) by building the network once.
        model.instantiate(if stored_bits.is_full() { BitMode::FULL } else { stored_bits })?;
        Ok(model)
    }

    /// Writes the file atomically; returns the byte count.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<u64> {
        let bytes = self.to_bytes();
        atomic_write(path.as_ref(), &bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Saves `net` at `bits`; returns the byte count.
pub fn save(net: &QuantizableNet, bits: BitMode, path: impl AsRef<Path>) -> Result<u64> {
    PackedModel::from_net(net, bits)?.write(path)
}

/// Loads a model file as an executable network in mode `b`.
pub fn load(path: impl AsRef<Path>, b: BitMode) -> Result<LoadedNet> {
    PackedModel::read(path)?.instantiate(b)
}

/// A network rebuilt from a model file, bound to one active mode.
#[derive(Debug, Clone)]
pub struct LoadedNet {
    net: QuantizableNet,
    mode: BitMode,
    stored: BitMode,
}

impl LoadedNet {
    pub fn mode(&self) -> BitMode {
        self.mode
    }

    pub fn net(&self) -> &QuantizableNet {
        &self.net
    }

    pub fn into_net(self) -> QuantizableNet {
        self.net
    }

    /// Bit-width of the file the weights came from.
    pub fn stored_bits(&self) -> BitMode {
        self.stored
    }

    /// Re-binds to another stored mode at or below the stored bit-width.
    pub fn switch_to(&mut self, b: BitMode) -> Result<()> {
        let stored = self.stored_bits();
        let ok = self.net.modes().contains(&b) && (stored.is_full() || (!b.is_full() && b <= stored));
        if !ok {
            return Err(Error::contract(format!("cannot run {b} from weights stored at {stored}")));
        }
        self.mode = b;
        Ok(())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.logits(x, self.mode)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation> {
        evaluate(&self.net, data, self.mode)
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn len(&self) -> usize {
        self.buf.len()
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}: needed {n} more bytes", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("bad boolean byte {other} at {}", self.pos - 1))),
        }
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
