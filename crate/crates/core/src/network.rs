//! Quantizable networks: one set of full-precision parent weights executed
//! in any declared bit mode.
//!
//! In a low-bit mode `b` every non-exempt layer multiplies by
//! `quantize_weights(W, b)`, pre-activations go through that mode's
//! normalization slot, and hidden activations are `Q_b(clamp(·, 0, 1))`.
//! Full-precision mode keeps the `clamp(·, 0, 1)` activation but skips both
//! quantizers. The input is never quantized and the last layer emits raw
//! logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bsbn::{BatchStats, BsbnLayer, NormState, NormVariant};
use crate::engine::{ConvGeometry, Tape, Tensor};
use crate::error::{Error, Result};
use crate::mode::BitMode;
use crate::quantize::{quantize_activations, quantize_weights, switch_codes, CodeTensor, Family};

/// MNIST-shaped input of the small convolutional net.
pub const IMAGE_SIDE: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Square-kernel convolution over `height × width × in_channels` inputs.
    Conv {
        height: usize,
        width: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

impl LayerKind {
    fn geometry(&self, batch: usize) -> Option<ConvGeometry> {
        match *self {
            LayerKind::Dense { .. } => None,
            LayerKind::Conv { height, width, in_channels, kernel, stride, padding, .. } => {
                Some(ConvGeometry { batch, height, width, channels: in_channels, kernel, stride, padding })
            }
        }
    }

    /// Input values per sample.
    pub fn input_len(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv { height, width, in_channels, .. } => height * width * in_channels,
        }
    }

    /// Output values per sample.
    pub fn output_len(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { out_channels, .. } => {
                let g = self.geometry(1).expect("conv");
                g.out_height() * g.out_width() * out_channels
            }
        }
    }

    /// Normalized channels (columns of the pre-activation matrix).
    pub fn channels(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { out_channels, .. } => out_channels,
        }
    }

    /// `[fan_in, channels]`.
    pub fn weight_shape(&self) -> [usize; 2] {
        match *self {
            LayerKind::Dense { inputs, outputs } => [inputs, outputs],
            LayerKind::Conv { in_channels, out_channels, kernel, .. } => [kernel * kernel * in_channels, out_channels],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerKind::Dense { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerKind::Conv { height, width, in_channels, out_channels, kernel, stride, padding } => {
                height > 0
                    && width > 0
                    && in_channels > 0
                    && out_channels > 0
                    && kernel > 0
                    && stride > 0
                    && kernel <= height + 2 * padding
                    && kernel <= width + 2 * padding
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid layer {self:?}")))
        }
    }
}

/// Weights of one layer: trainable parent weights, or integer codes from a
/// packed model.
#[derive(Debug)]
pub enum Weights {
    Parent(Tensor),
    Codes(CodeTensor),
}

#[derive(Debug)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: Weights,
    /// `[1, channels]`; present on layers without normalization.
    pub bias: Option<Tensor>,
    pub norm: Option<BsbnLayer>,
    /// Followed by the bounded (and, in low-bit modes, quantized) activation.
    pub activation: bool,
    /// Weights quantized in low-bit modes.
    pub quantized: bool,
}

impl Clone for Layer {
    /// Deep copy with independent parameter tensors.
    fn clone(&self) -> Self {
        Layer {
            kind: self.kind,
            weights: match &self.weights {
                Weights::Parent(w) => Weights::Parent(w.duplicate()),
                Weights::Codes(c) => Weights::Codes(c.clone()),
            },
            bias: self.bias.as_ref().map(Tensor::duplicate),
            norm: self.norm.clone(),
            activation: self.activation,
            quantized: self.quantized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetOptions {
    pub variant: NormVariant,
    pub family: Family,
    /// Keep the first and last layer at full precision in every mode.
    pub exempt_first_last: bool,
    pub seed: u64,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions { variant: NormVariant::B, family: Family::Aligned, exempt_first_last: true, seed: 0 }
    }
}

/// What one layer multiplied in a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Left matmul operand (im2col patches for convolutions).
    pub input: Tensor,
    /// Right matmul operand.
    pub weights: Tensor,
    /// Weight codes when the layer ran quantized.
    pub codes: Option<CodeTensor>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Batch statistics per layer (`Train`/`Calibrate` states only).
    pub batch_stats: Vec<Option<BatchStats>>,
    pub trace: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct QuantizableNet {
    layers: Vec<Layer>,
    modes: Vec<BitMode>,
    family: Family,
    exempt_first_last: bool,
}

/// Hidden widths scaled by `multiplier`, rounded down, at least 1. The
/// first and last entries are kept.
pub fn scale_widths(sizes: &[usize], multiplier: f64) -> Result<Vec<usize>> {
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(Error::contract(format!("channel multiplier must be positive, got {multiplier}")));
    }
    let last = sizes.len().saturating_sub(1);
    Ok(sizes.iter().enumerate().map(|(i, &s)| if i == 0 || i == last { s } else { ((s as f64 * multiplier).floor() as usize).max(1) }).collect())
}

fn uniform_weights(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Result<Tensor> {
    let bound = 1.0 / (shape[0] as f64).sqrt();
    let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::param(data, &shape)
}

/// Builds a plain stack: hidden layers get normalization and the bounded
/// activation, the last layer a bias and raw output.
fn build_stack(kinds: &[LayerKind], modes: &[BitMode], options: &NetOptions) -> Result<QuantizableNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let last = kinds.len() - 1;
    let layers = kinds
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let hidden = i < last;
            Ok(Layer {
                kind: *kind,
                weights: Weights::Parent(uniform_weights(&mut rng, kind.weight_shape())?),
                bias: if hidden { None } else { Some(Tensor::param(vec![0.0; kind.channels()], &[1, kind.channels()])?) },
                norm: if hidden { Some(BsbnLayer::new(kind.channels(), modes, options.variant)?) } else { None },
                activation: hidden,
                quantized: !(options.exempt_first_last && (i == 0 || i == last)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizableNet::from_layers(layers, modes, options.family, options.exempt_first_last)
}

/// Fully connected net with layer widths `sizes` (input first).
pub fn build_mlp(sizes: &[usize], modes: &[BitMode], options: &NetOptions) -> Result<QuantizableNet> {
    if sizes.len() < 2 {
        return Err(Error::contract("an MLP needs at least an input and an output size"));
    }
    let kinds: Vec<LayerKind> = sizes.windows(2).map(|w| LayerKind::Dense { inputs: w[0], outputs: w[1] }).collect();
    build_stack(&kinds, modes, options)
}

/// Two stride-2 3×3 convolutions (16 and 32 channels, times `multiplier`)
/// over 28×28 grayscale input, then a dense classifier over 10 classes.
pub fn build_smallconv(multiplier: f64, modes: &[BitMode], options: &NetOptions) -> Result<QuantizableNet> {
    let widths = scale_widths(&[1, 16, 32, 10], multiplier)?;
    let (c1, c2) = (widths[1], widths[2]);
    let conv = |side: usize, cin: usize, cout: usize| LayerKind::Conv {
        height: side,
        width: side,
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let first = conv(IMAGE_SIDE, 1, c1);
    let second = conv(IMAGE_SIDE / 2, c1, c2);
    let kinds = [first, second, LayerKind::Dense { inputs: second.output_len(), outputs: 10 }];
    build_stack(&kinds, modes, options)
}

impl QuantizableNet {
    /// Assembles and validates a network from explicit layers.
    pub fn from_layers(layers: Vec<Layer>, modes: &[BitMode], family: Family, exempt_first_last: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("a network needs at least one layer"));
        }
        let mut modes = modes.to_vec();
        modes.sort();
        modes.dedup();
        if !modes.contains(&BitMode::FULL) {
            return Err(Error::contract("the training mode list must include 32"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].kind.output_len() != pair[1].kind.input_len() {
                return Err(Error::contract(format!(
                    "layer {i} emits {} values per sample but layer {} expects {}",
                    pair[0].kind.output_len(),
                    i + 1,
                    pair[1].kind.input_len()
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.kind.validate()?;
            let shape = layer.kind.weight_shape();
            let actual = match &layer.weights {
                Weights::Parent(w) => w.shape().to_vec(),
                Weights::Codes(c) => {
                    if !layer.quantized {
                        return Err(Error::contract(format!("layer {i} is exempt but carries codes")));
                    }
                    c.shape().to_vec()
                }
            };
            if actual != shape {
                return Err(Error::Shape { op: "layer weights", lhs: actual, rhs: shape.to_vec() });
            }
            if let Some(bias) = &layer.bias {
                if bias.shape() != [1, layer.kind.channels()] {
                    return Err(Error::Shape { op: "layer bias", lhs: bias.shape().to_vec(), rhs: vec![1, layer.kind.channels()] });
                }
            }
            if let Some(norm) = &layer.norm {
                if norm.channels() != layer.kind.channels() || norm.modes() != modes.as_slice() {
                    return Err(Error::contract(format!("layer {i} normalization does not match its channels or the mode list")));
                }
            } else if layer.quantized && layer.activation {
                return Err(Error::contract(format!("quantized hidden layer {i} has no normalization")));
            }
        }
        Ok(QuantizableNet { layers, modes, family, exempt_first_last })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn modes(&self) -> &[BitMode] {
        &self.modes
    }

    /// Declared low-bit modes, ascending.
    pub fn low_modes(&self) -> Vec<BitMode> {
        self.modes.iter().copied().filter(|m| !m.is_full()).collect()
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn exempt_first_last(&self) -> bool {
        self.exempt_first_last
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].kind.input_len()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").kind.output_len()
    }

    /// True if every layer still holds full-precision weights.
    pub fn is_trainable(&self) -> bool {
        self.layers.iter().all(|l| matches!(l.weights, Weights::Parent(_)))
    }

    pub fn parameters(&self) -> Vec<(ParamKind, &Tensor)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Weights::Parent(w) = &layer.weights {
                out.push((ParamKind::Weight, w));
            }
            if let Some(b) = &layer.bias {
                out.push((ParamKind::Bias, b));
            }
            if let Some(norm) = &layer.norm {
                for (g, b) in norm.affine_slots() {
                    out.push((ParamKind::NormScale, g));
                    out.push((ParamKind::NormShift, b));
                }
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(ParamKind, &mut Tensor)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Weights::Parent(w) = &mut layer.weights {
                out.push((ParamKind::Weight, w));
            }
            if let Some(b) = &mut layer.bias {
                out.push((ParamKind::Bias, b));
            }
            if let Some(norm) = &mut layer.norm {
                for (g, b) in norm.affine_slots_mut() {
                    out.push((ParamKind::NormScale, g));
                    out.push((ParamKind::NormShift, b));
                }
            }
        }
        out
    }

    /// Full-precision parent weight matrices (the weight-decay set).
    pub fn parent_weights(&self) -> Vec<&Tensor> {
        self.parameters().into_iter().filter(|(k, _)| *k == ParamKind::Weight).map(|(_, t)| t).collect()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    fn check_mode(&self, mode: BitMode) -> Result<()> {
        if self.modes.contains(&mode) {
            Ok(())
        } else {
            Err(Error::UnknownMode(mode))
        }
    }

    /// The right matmul operand of `layer` in `mode`, plus its codes when
    /// quantized.
    fn layer_weights(&self, tape: &Tape, layer: &Layer, mode: BitMode) -> Result<(Tensor, Option<CodeTensor>)> {
        match &layer.weights {
            Weights::Parent(w) if !layer.quantized || mode.is_full() => Ok((w.clone(), None)),
            Weights::Parent(w) => {
                let q = quantize_weights(tape, w, mode.bits(), self.family)?;
                Ok((q.values, Some(q.codes)))
            }
            Weights::Codes(stored) => {
                let codes = if mode.is_full() || mode.bits() > stored.bits() {
                    return Err(Error::contract(format!("weights are stored at {} bits and cannot run in {mode} mode", stored.bits())));
                } else if mode.bits() == stored.bits() {
                    stored.clone()
                } else {
                    switch_codes(stored, mode.bits())?
                };
                let values = Tensor::new(codes.weight_values(), codes.shape())?;
                Ok((values, Some(codes)))
            }
        }
    }

    /// Runs the network on `x` (`[batch, input_len]`, any shape with that
    /// element count) in `mode`, normalizing per `state`. Running statistics
    /// are not modified.
    pub fn forward_with_state(&self, tape: &Tape, x: &Tensor, mode: BitMode, state: NormState) -> Result<ForwardOutput> {
        self.check_mode(mode)?;
        let per_sample = self.input_len();
        if !x.len().is_multiple_of(per_sample) {
            return Err(Error::Shape { op: "network input", lhs: x.shape().to_vec(), rhs: vec![per_sample] });
        }
        let batch = x.len() / per_sample;
        let mut h = x.clone();
        let mut batch_stats = Vec::with_capacity(self.layers.len());
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let operand = match layer.kind.geometry(batch) {
                None => reshape_if_needed(tape, &h, &[batch, layer.kind.input_len()])?,
                Some(geom) => {
                    let rows = reshape_if_needed(tape, &h, &[batch * geom.height * geom.width, geom.channels])?;
                    tape.im2col(&rows, geom)?
                }
            };
            let (weights, codes) = self.layer_weights(tape, layer, mode)?;
            let mut y = tape.matmul(&operand, &weights)?;
            if let Some(bias) = &layer.bias {
                let ones = Tensor::new(vec![1.0; y.shape()[0]], &[y.shape()[0], 1])?;
                y = tape.add(&y, &tape.matmul(&ones, bias)?)?;
            }
            let mut stats = None;
            if let Some(norm) = &layer.norm {
                let (out, s) = norm.forward(tape, &y, mode, state)?;
                y = out;
                stats = s;
            }
            if layer.activation {
                y = if mode.is_full() { tape.clamp(&y, 0.0, 1.0)? } else { quantize_activations(tape, &y, mode.bits(), self.family)? };
            }
            batch_stats.push(stats);
            trace.push(LayerTrace { input: operand, weights, codes });
            h = y;
        }
        let logits = reshape_if_needed(tape, &h, &[batch, self.classes()])?;
        Ok(ForwardOutput { logits, batch_stats, trace })
    }

    /// Training-state forward: normalizes with batch statistics, then folds
    /// them into `mode`'s running statistics.
    pub fn forward_train(&mut self, tape: &Tape, x: &Tensor, mode: BitMode) -> Result<Tensor> {
        let out = self.forward_with_state(tape, x, mode, NormState::Train)?;
        self.update_running(mode, &out.batch_stats)?;
        Ok(out.logits)
    }

    /// Eval-state forward with stored running statistics.
    pub fn forward(&self, tape: &Tape, x: &Tensor, mode: BitMode) -> Result<Tensor> {
        Ok(self.forward_with_state(tape, x, mode, NormState::Eval)?.logits)
    }

    /// Eval-state logits without recording a graph.
    pub fn logits(&self, x: &Tensor, mode: BitMode) -> Result<Tensor> {
        self.forward(&Tape::no_grad(), x, mode)
    }

    pub fn update_running(&mut self, mode: BitMode, stats: &[Option<BatchStats>]) -> Result<()> {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            if let (Some(norm), Some(s)) = (layer.norm.as_mut(), s) {
                norm.update_running(mode, s)?;
            }
        }
        Ok(())
    }
}

fn reshape_if_needed(tape: &Tape, t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        Ok(t.clone())
    } else {
        tape.reshape(t, shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mode::mode_list;
    use crate::objective::consistency_loss;
    use crate::quantize::QuantizerSpec;

    fn modes(bits: &[u8]) -> Vec<BitMode> {
        mode_list(bits).unwrap()
    }

    fn inputs(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new((0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect(), &[rows, cols]).unwrap()
    }

    fn trained_once(mut net: QuantizableNet, x: &Tensor) -> QuantizableNet {
        for m in net.modes().to_vec() {
            net.forward_train(&Tape::no_grad(), x, m).unwrap();
        }
        net
    }

    #[test]
    fn mlp_structure() {
        let net = build_mlp(&[784, 64, 10], &modes(&[1, 2, 4, 32]), &NetOptions::default()).unwrap();
        assert_eq!(net.layers().len(), 2);
        assert_eq!(net.layers().iter().filter(|l| l.norm.is_some()).count(), 1);
        assert_eq!(net.layers()[0].norm.as_ref().unwrap().modes().len(), 4);
        assert_eq!(net.modes().len(), 4);
        assert!(matches!(build_mlp(&[784], &modes(&[32]), &NetOptions::default()), Err(Error::Contract(_))));
        assert!(matches!(build_mlp(&[4, 2], &modes(&[2]), &NetOptions::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn width_multiplier() {
        assert_eq!(scale_widths(&[784, 64, 33, 10], 0.5).unwrap(), vec![784, 32, 16, 10]);
        assert_eq!(scale_widths(&[784, 1, 10], 0.25).unwrap(), vec![784, 1, 10]);
        assert!(scale_widths(&[4, 4], 0.0).is_err());
        let half = build_smallconv(0.5, &modes(&[2, 32]), &NetOptions::default()).unwrap();
        assert_eq!(half.layers()[0].kind.channels(), 8);
        assert_eq!(half.layers()[1].kind.channels(), 16);
        assert_eq!(half.layers()[2].kind.weight_shape(), [7 * 7 * 16, 10]);
    }

    #[test]
    fn single_layer_full_mode_is_affine() {
        let net = build_mlp(&[3, 2], &modes(&[32]), &NetOptions { seed: 7, ..Default::default() }).unwrap();
        let x = inputs(4, 3, 1);
        let out = net.logits(&x, BitMode::FULL).unwrap();
        let Weights::Parent(w) = &net.layers()[0].weights else { panic!() };
        let b = net.layers()[0].bias.as_ref().unwrap().data();
        for r in 0..4 {
            for (c, bias) in b.iter().enumerate() {
                let expected: f64 = (0..3).map(|i| x.data()[r * 3 + i] * w.data()[i * 2 + c]).sum::<f64>() + bias;
                assert!((out.data()[r * 2 + c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exempt_layers_never_quantized() {
        let ms = modes(&[1, 2, 4, 32]);
        let x = inputs(8, 6, 2);
        let net = trained_once(build_mlp(&[6, 5, 5, 3], &ms, &NetOptions::default()).unwrap(), &x);
        for &m in &ms {
            let out = net.forward_with_state(&Tape::no_grad(), &x, m, NormState::Eval).unwrap();
            assert!(out.trace[0].codes.is_none());
            assert!(out.trace[2].codes.is_none());
            assert_eq!(out.trace[1].codes.is_some(), !m.is_full());
        }
        let all = NetOptions { exempt_first_last: false, ..Default::default() };
        let net = trained_once(build_mlp(&[6, 5, 3], &ms, &all).unwrap(), &x);
        let out = net.forward_with_state(&Tape::no_grad(), &x, ms[0], NormState::Eval).unwrap();
        assert!(out.trace.iter().all(|t| t.codes.is_some()));
    }

    #[test]
    fn lower_mode_codes_are_switched_higher_mode_codes() {
        let ms = modes(&[2, 4, 32]);
        let x = inputs(16, 784, 3);
        let net = build_smallconv(0.25, &ms, &NetOptions { exempt_first_last: false, ..Default::default() }).unwrap();
        let t4 = net.forward_with_state(&Tape::no_grad(), &x, ms[1], NormState::Train).unwrap();
        let t2 = net.forward_with_state(&Tape::no_grad(), &x, ms[0], NormState::Train).unwrap();
        for (a, b) in t4.trace.iter().zip(&t2.trace) {
            let switched = switch_codes(a.codes.as_ref().unwrap(), 2).unwrap();
            assert_eq!(&switched, b.codes.as_ref().unwrap());
        }
    }

    #[test]
    fn quantized_layer_inputs_lie_on_grid() {
        let ms = modes(&[1, 2, 3, 4, 32]);
        let x = inputs(10, 6, 4);
        let net = build_mlp(&[6, 7, 7, 7, 3], &ms, &NetOptions::default()).unwrap();
        for &m in ms.iter().filter(|m| !m.is_full()) {
            let spec = QuantizerSpec::aligned(m.bits()).unwrap();
            let out = net.forward_with_state(&Tape::no_grad(), &x, m, NormState::Train).unwrap();
            for (layer, t) in net.layers().iter().zip(&out.trace) {
                if !layer.quantized {
                    continue;
                }
                for &v in t.input.data() {
                    let code = (v * spec.max_code() as f64).round() as u8;
                    assert_eq!(spec.value(code), v);
                }
            }
        }
    }

    #[test]
    fn equal_logits_give_zero_consistency() {
        let ms = modes(&[1, 4, 32]);
        let mut net = build_mlp(&[4, 6, 3], &ms, &NetOptions::default()).unwrap();
        let last = net.layers_mut().last_mut().unwrap();
        last.weights = Weights::Parent(Tensor::param(vec![0.0; 18], &[6, 3]).unwrap());
        let x = inputs(5, 4, 5);
        let net = trained_once(net, &x);
        let full = net.logits(&x, BitMode::FULL).unwrap();
        for &m in &ms[..2] {
            let low = net.logits(&x, m).unwrap();
            assert_eq!(consistency_loss(&Tape::no_grad(), &full, &low, 2.0).unwrap().item(), 0.0);
        }
    }

    #[test]
    fn eval_is_pure_and_deterministic() {
        let ms = modes(&[2, 32]);
        let x = inputs(6, 5, 6);
        let net = trained_once(build_mlp(&[5, 4, 4, 2], &ms, &NetOptions::default()).unwrap(), &x);
        let before: Vec<_> = net.layers().iter().filter_map(|l| l.norm.clone()).map(|n| n.stat_slots().to_vec()).collect();
        let a = net.logits(&x, ms[0]).unwrap();
        let _ = net.logits(&x, ms[1]).unwrap();
        let b = net.logits(&x, ms[0]).unwrap();
        assert_eq!(a.data(), b.data());
        let after: Vec<_> = net.layers().iter().filter_map(|l| l.norm.clone()).map(|n| n.stat_slots().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn weight_tensor_count_independent_of_modes() {
        let count = |bits: &[u8], variant| {
            let net = build_mlp(&[6, 5, 5, 3], &modes(bits), &NetOptions { variant, ..Default::default() }).unwrap();
            let weights = net.parameters().iter().filter(|(k, _)| *k == ParamKind::Weight).count();
            let norm = net.parameters().iter().filter(|(k, _)| *k == ParamKind::NormScale).count();
            (weights, norm)
        };
        assert_eq!(count(&[32], NormVariant::A), count(&[1, 2, 3, 4, 32], NormVariant::A));
        assert_eq!(count(&[32], NormVariant::B).0, count(&[1, 2, 3, 4, 32], NormVariant::B).0);
        assert_eq!(count(&[1, 2, 3, 4, 32], NormVariant::B).1, 2 * 5);
    }

    #[test]
    fn unknown_mode_and_missing_stats() {
        let net = build_mlp(&[3, 4, 2], &modes(&[2, 32]), &NetOptions::default()).unwrap();
        let x = inputs(2, 3, 7);
        assert!(matches!(net.logits(&x, BitMode::low(4).unwrap()), Err(Error::UnknownMode(_))));
        assert!(matches!(net.logits(&x, BitMode::FULL), Err(Error::MissingStats(_))));
    }

    #[test]
    fn clone_is_deep() {
        let net = build_mlp(&[3, 4, 2], &modes(&[32]), &NetOptions::default()).unwrap();
        let copy = net.clone();
        let (a, b) = (net.parameters(), copy.parameters());
        assert_eq!(a.len(), b.len());
        for ((_, p), (_, q)) in a.iter().zip(&b) {
            assert_ne!(p.id(), q.id());
            assert_eq!(p.data(), q.data());
        }
    }

    #[test]
    fn conv_forward_shapes() {
        let ms = modes(&[4, 32]);
        let net = build_smallconv(0.25, &ms, &NetOptions::default()).unwrap();
        let x = inputs(3, 784, 8);
        let out = net.forward_with_state(&Tape::no_grad(), &x, ms[0], NormState::Train).unwrap();
        assert_eq!(out.logits.shape(), &[3, 10]);
        assert_eq!(out.trace[0].input.shape(), &[3 * 14 * 14, 9]);
        assert_eq!(out.trace[1].input.shape(), &[3 * 7 * 7, 9 * 4]);
    }
}
