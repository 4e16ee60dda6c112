use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// `c = a · b` for row-major `a: [m, k]`, `b: [k, n]`; transposes are
/// expressed through strides so no copies are made.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize)) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // SAFETY: the strides describe in-bounds views of `a` ([m, k]) and `b`
    // ([k, n]); `c` is a freshly allocated, contiguous [m, n] buffer.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), a_strides.0, a_strides.1, b.as_ptr(), b_strides.0, b_strides.1, 0.0, c.as_mut_ptr(), n as isize, 1);
    }
    c
}

enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Broadcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Broadcast::Same, a.shape().to_vec()))
    } else if a.is_scalar() {
        Ok((Broadcast::LeftScalar, b.shape().to_vec()))
    } else if b.is_scalar() {
        Ok((Broadcast::RightScalar, a.shape().to_vec()))
    } else {
        Err(Error::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() })
    }
}

fn reduce_for(mode: &Broadcast, left: bool, g: Vec<f64>) -> Vec<f64> {
    match (mode, left) {
        (Broadcast::LeftScalar, true) | (Broadcast::RightScalar, false) => vec![g.iter().sum()],
        _ => g,
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape { op: "softmax", lhs: shape.to_vec(), rhs: vec![axis] });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn softmax_values(x: &[f64], shape: &[usize], axis: usize) -> Result<Vec<f64>> {
    let (outer, len, inner) = axis_split(shape, axis)?;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                out[at(j)] = (x[at(j)] - max).exp();
                total += out[at(j)];
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Ok(out)
}

fn log_softmax_values(x: &[f64], shape: &[usize], axis: usize) -> Result<Vec<f64>> {
    let (outer, len, inner) = axis_split(shape, axis)?;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let log_z = (0..len).map(|j| (x[at(j)] - max).exp()).sum::<f64>().ln() + max;
            for j in 0..len {
                out[at(j)] = x[at(j)] - log_z;
            }
        }
    }
    Ok(out)
}

/// Geometry of a square-kernel convolution over NHWC activations stored as
/// a `[batch * height * width, channels]` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// For every output row and patch column, the input element it reads
    /// (or `None` for zero padding).
    fn source(&self, row: usize, col: usize) -> Option<usize> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let n = row / (oh * ow);
        let oy = (row / ow) % oh;
        let ox = row % ow;
        let c = col % self.channels;
        let kx = (col / self.channels) % self.kernel;
        let ky = col / (self.channels * self.kernel);
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            return None;
        }
        Some(((n * self.height + y as usize) * self.width + x as usize) * self.channels + c)
    }
}

impl Tape {
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Shape { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1));
        let (ac, bc) = (a.clone(), b.clone());
        self.record("matmul", &[a, b], out, vec![m, n], move |g, needs| {
            // dA = G · Bᵀ, dB = Aᵀ · G
            let da = needs[0].then(|| gemm(m, n, k, g, (n as isize, 1), bc.data(), (1, n as isize)));
            let db = needs[1].then(|| gemm(k, m, n, ac.data(), (1, k as isize), g, (n as isize, 1)));
            vec![da, db]
        })
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (mode, shape) = broadcast("add", a, b)?;
        let out = zip_broadcast(&mode, a, b, |x, y| x + y);
        self.record("add", &[a, b], out, shape, move |g, _| vec![Some(reduce_for(&mode, true, g.to_vec())), Some(reduce_for(&mode, false, g.to_vec()))])
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (mode, shape) = broadcast("sub", a, b)?;
        let out = zip_broadcast(&mode, a, b, |x, y| x - y);
        self.record("sub", &[a, b], out, shape, move |g, _| {
            vec![Some(reduce_for(&mode, true, g.to_vec())), Some(reduce_for(&mode, false, g.iter().map(|v| -v).collect()))]
        })
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (mode, shape) = broadcast("mul", a, b)?;
        let out = zip_broadcast(&mode, a, b, |x, y| x * y);
        let (ac, bc) = (a.clone(), b.clone());
        self.record("mul", &[a, b], out, shape, move |g, needs| {
            let da = needs[0].then(|| {
                let raw = scale_by(&mode, g, &bc, false);
                reduce_for(&mode, true, raw)
            });
            let db = needs[1].then(|| {
                let raw = scale_by(&mode, g, &ac, true);
                reduce_for(&mode, false, raw)
            });
            vec![da, db]
        })
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let out = a.data().iter().map(|v| v * factor).collect();
        self.record("scale", &[a], out, a.shape().to_vec(), move |g, _| vec![Some(g.iter().map(|v| v * factor).collect())])
    }

    pub fn div_scalar(&self, a: &Tensor, divisor: f64) -> Result<Tensor> {
        let out = a.data().iter().map(|v| v / divisor).collect();
        self.record("div_scalar", &[a], out, a.shape().to_vec(), move |g, _| vec![Some(g.iter().map(|v| v / divisor).collect())])
    }

    pub fn add_scalar(&self, a: &Tensor, offset: f64) -> Result<Tensor> {
        let out = a.data().iter().map(|v| v + offset).collect();
        self.record("add_scalar", &[a], out, a.shape().to_vec(), |g, _| vec![Some(g.to_vec())])
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|v| v.tanh()).collect();
        let saved = out.clone();
        self.record("tanh", &[a], out, a.shape().to_vec(), move |g, _| vec![Some(g.iter().zip(&saved).map(|(g, t)| g * (1.0 - t * t)).collect())])
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|v| v.exp()).collect();
        let saved = out.clone();
        self.record("exp", &[a], out, a.shape().to_vec(), move |g, _| vec![Some(g.iter().zip(&saved).map(|(g, e)| g * e).collect())])
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.data().iter().map(|v| v.ln()).collect();
        let ac = a.clone();
        self.record("log", &[a], out, a.shape().to_vec(), move |g, _| vec![Some(g.iter().zip(ac.data()).map(|(g, x)| g / x).collect())])
    }

    /// Elementwise clamp; the gradient is 1 on `[lo, hi]` and 0 outside.
    pub fn clamp(&self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        let out = a.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let ac = a.clone();
        self.record("clamp", &[a], out, a.shape().to_vec(), move |g, _| {
            let masked = g.iter().zip(ac.data()).map(|(g, &x)| if (lo..=hi).contains(&x) { *g } else { 0.0 }).collect();
            vec![Some(masked)]
        })
    }

    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let out = softmax_values(a.data(), a.shape(), axis)?;
        let saved = out.clone();
        let shape = a.shape().to_vec();
        self.record("softmax", &[a], out, shape.clone(), move |g, _| {
            let (outer, len, inner) = axis_split(&shape, axis).expect("checked in forward");
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * saved[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = saved[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn log_softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let out = log_softmax_values(a.data(), a.shape(), axis)?;
        let probs: Vec<f64> = out.iter().map(|v| v.exp()).collect();
        let shape = a.shape().to_vec();
        self.record("log_softmax", &[a], out, shape.clone(), move |g, _| {
            let (outer, len, inner) = axis_split(&shape, axis).expect("checked in forward");
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = g[at(j)] - probs[at(j)] * total;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let total = a.data().iter().sum();
        let n = a.len();
        self.record("sum", &[a], vec![total], vec![1], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.len();
        let total: f64 = a.data().iter().sum();
        self.record("mean", &[a], vec![total / n as f64], vec![1], move |g, _| vec![Some(vec![g[0] / n as f64; n])])
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::Shape { op: "reshape", lhs: a.shape().to_vec(), rhs: shape.to_vec() });
        }
        self.record("reshape", &[a], a.data().to_vec(), shape.to_vec(), |g, _| vec![Some(g.to_vec())])
    }

    /// Applies `forward` to the values and `backward` to the upstream
    /// gradient, in place of the true derivative of `forward`.
    pub fn custom_grad(&self, input: &Tensor, forward: impl Fn(&[f64]) -> Vec<f64>, backward: impl Fn(&[f64]) -> Vec<f64> + 'static) -> Result<Tensor> {
        let out = forward(input.data());
        if out.len() != input.len() {
            return Err(Error::Shape { op: "custom_grad", lhs: input.shape().to_vec(), rhs: vec![out.len()] });
        }
        self.record("custom_grad", &[input], out, input.shape().to_vec(), move |g, _| vec![Some(backward(g))])
    }

    /// Unfolds convolution patches: `[B*H*W, C]` → `[B*OH*OW, K*K*C]`, with
    /// patch columns ordered (ky, kx, c).
    pub fn im2col(&self, x: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
        let rows_in = geom.batch * geom.height * geom.width;
        if x.shape() != [rows_in, geom.channels] {
            return Err(Error::Shape { op: "im2col", lhs: x.shape().to_vec(), rhs: vec![rows_in, geom.channels] });
        }
        if geom.kernel == 0 || geom.stride == 0 || geom.height + 2 * geom.padding < geom.kernel || geom.width + 2 * geom.padding < geom.kernel {
            return Err(Error::contract(format!("invalid convolution geometry {geom:?}")));
        }
        let rows = geom.batch * geom.out_height() * geom.out_width();
        let cols = geom.patch_len();
        let mut out = vec![0.0; rows * cols];
        let src = x.data();
        for r in 0..rows {
            for c in 0..cols {
                if let Some(s) = geom.source(r, c) {
                    out[r * cols + c] = src[s];
                }
            }
        }
        let in_len = x.len();
        self.record("im2col", &[x], out, vec![rows, cols], move |g, _| {
            let mut dx = vec![0.0; in_len];
            for r in 0..rows {
                for c in 0..cols {
                    if let Some(s) = geom.source(r, c) {
                        dx[s] += g[r * cols + c];
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}

fn zip_broadcast(mode: &Broadcast, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match mode {
        Broadcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::LeftScalar => {
            let x = a.item();
            b.data().iter().map(|&y| f(x, y)).collect()
        }
        Broadcast::RightScalar => {
            let y = b.item();
            a.data().iter().map(|&x| f(x, y)).collect()
        }
    }
}

/// Upstream gradient times the *other* operand, expanded to the output shape.
fn scale_by(mode: &Broadcast, g: &[f64], other: &Tensor, other_is_left: bool) -> Vec<f64> {
    let other_scalar = matches!((mode, other_is_left), (Broadcast::LeftScalar, true) | (Broadcast::RightScalar, false));
    if other_scalar {
        let s = other.item();
        g.iter().map(|v| v * s).collect()
    } else {
        g.iter().zip(other.data()).map(|(g, o)| g * o).collect()
    }
}
