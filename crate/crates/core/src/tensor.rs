//! Dense `f64` tensors and the differentiable operations the tagger is built
//! from. There is no autodiff graph: every operation comes with a paired
//! backward function, and the layers chain them by hand.
//!
//! Sequence activations are stored feature-major, `[features × positions]`,
//! so the per-position affine maps become one matrix product and the inner
//! loops run over contiguous memory.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn from `U(-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` for a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Column `t` of a `[rows × cols]` tensor.
    pub fn column(&self, t: usize) -> Vec<f64> {
        let (rows, cols) = self.dims2().expect("column() on a 2-D tensor");
        (0..rows).map(|r| self.data[r * cols + t]).collect()
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self
            .dims2()
            .ok_or_else(|| Error::shape("transpose", &self.shape, &[0, 0]))?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Row-wise concatenation of `[r_i × cols]` tensors.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts
            .first()
            .and_then(|p| p.dims2())
            .map(|(_, c)| c)
            .ok_or_else(|| Error::Degenerate("concat of nothing".into()))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p
                .dims2()
                .filter(|&(_, c)| c == cols)
                .ok_or_else(|| Error::shape("concat_rows", &parts[0].shape, &p.shape))?;
            debug_assert_eq!(c, cols);
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, cols], data)
    }

    /// Splits a `[rows × cols]` tensor into consecutive row blocks.
    pub fn split_rows(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let (rows, cols) = self
            .dims2()
            .ok_or_else(|| Error::shape("split_rows", &self.shape, &[0, 0]))?;
        if sizes.iter().sum::<usize>() != rows {
            return Err(Error::shape("split_rows", &self.shape, sizes));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&r| {
                let t = Tensor::new(
                    vec![r, cols],
                    self.data[start * cols..(start + r) * cols].to_vec(),
                );
                start += r;
                t
            })
            .collect()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Train/eval switch for stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn as_columns(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape[..] {
        [d] => Ok((d, 1)),
        [d, l] => Ok((d, l)),
        _ => Err(Error::shape("matvec_batched", &x.shape, &[0, 0])),
    }
}

fn check_affine(w: &Tensor, x: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (out_dim, in_dim) = w
        .dims2()
        .ok_or_else(|| Error::shape("matvec_batched", &w.shape, &x.shape))?;
    let (xd, len) = as_columns(x)?;
    if xd != in_dim {
        return Err(Error::shape("matvec_batched", &w.shape, &x.shape));
    }
    if b.shape != [out_dim] {
        return Err(Error::shape("matvec_batched", &w.shape, &b.shape));
    }
    Ok((out_dim, in_dim, len))
}

/// `out[:, t] = w · x[:, t] + b` at every position `t`.
///
/// `x` is `[in × L]`, or a plain `[in]` vector for a single position, in which
/// case the result is a plain `[out]` vector.
pub fn matvec_batched(w: &Tensor, x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (out_dim, in_dim, len) = check_affine(w, x, b)?;
    let mut out = vec![0.0; out_dim * len];
    for i in 0..out_dim {
        let row = &mut out[i * len..(i + 1) * len];
        row.fill(b.data[i]);
        let wrow = &w.data[i * in_dim..(i + 1) * in_dim];
        for (j, &wij) in wrow.iter().enumerate() {
            let xr = &x.data[j * len..(j + 1) * len];
            for (o, &xv) in row.iter_mut().zip(xr) {
                *o += wij * xv;
            }
        }
    }
    let shape = if x.shape.len() == 1 {
        vec![out_dim]
    } else {
        vec![out_dim, len]
    };
    Tensor::new(shape, out)
}

/// Gradients of an affine map. Entries are `None` when not requested.
#[derive(Debug, Clone, Default)]
pub struct AffineGrads {
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
    pub x: Option<Tensor>,
}

/// Backward rule of [`matvec_batched`].
pub fn matvec_batched_backward(
    w: &Tensor,
    x: &Tensor,
    grad_out: &Tensor,
    want_params: bool,
    want_input: bool,
) -> Result<AffineGrads> {
    let (out_dim, in_dim) = w
        .dims2()
        .ok_or_else(|| Error::shape("matvec_batched_backward", &w.shape, &x.shape))?;
    let (xd, len) = as_columns(x)?;
    let (gd, gl) = as_columns(grad_out)?;
    if xd != in_dim || gd != out_dim || gl != len {
        return Err(Error::shape("matvec_batched_backward", &x.shape, &grad_out.shape));
    }
    let mut grads = AffineGrads::default();
    if want_params {
        let mut dw = vec![0.0; out_dim * in_dim];
        let mut db = vec![0.0; out_dim];
        for i in 0..out_dim {
            let g = &grad_out.data[i * len..(i + 1) * len];
            db[i] = g.iter().sum();
            for j in 0..in_dim {
                let xr = &x.data[j * len..(j + 1) * len];
                dw[i * in_dim + j] = g.iter().zip(xr).map(|(a, b)| a * b).sum();
            }
        }
        grads.w = Some(Tensor::new(w.shape.clone(), dw)?);
        grads.b = Some(Tensor::vector(db));
    }
    if want_input {
        let mut dx = vec![0.0; in_dim * len];
        for i in 0..out_dim {
            let g = &grad_out.data[i * len..(i + 1) * len];
            for j in 0..in_dim {
                let wij = w.data[i * in_dim + j];
                let dr = &mut dx[j * len..(j + 1) * len];
                for (d, &gv) in dr.iter_mut().zip(g) {
                    *d += wij * gv;
                }
            }
        }
        grads.x = Some(Tensor::new(x.shape.clone(), dx)?);
    }
    Ok(grads)
}

fn check_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (c_in, len) = x
        .dims2()
        .ok_or_else(|| Error::shape("conv1d_same", &x.shape, &w.shape))?;
    let (c_out, wc_in, k) = match w.shape[..] {
        [a, b, c] => (a, b, c),
        _ => return Err(Error::shape("conv1d_same", &x.shape, &w.shape)),
    };
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "conv1d_same needs an odd kernel size, got {k}"
        )));
    }
    if wc_in != c_in {
        return Err(Error::shape("conv1d_same", &x.shape, &w.shape));
    }
    if b.shape != [c_out] {
        return Err(Error::shape("conv1d_same", &w.shape, &b.shape));
    }
    Ok((c_in, len, c_out, k))
}

/// Range of output positions `t` for which input index `t + k - pad` is in
/// bounds, as `(t_lo, t_hi)` half-open.
#[inline]
fn conv_valid_range(k: usize, pad: usize, len: usize) -> (usize, usize) {
    let t_lo = pad.saturating_sub(k);
    let t_hi = (len + pad).saturating_sub(k).min(len);
    (t_lo, t_hi.max(t_lo))
}

/// One-dimensional convolution with symmetric zero padding of `(K-1)/2`, so
/// the output length equals the input length.
///
/// `x` is `[C_in × L]`, `w` is `[C_out × C_in × K]`, `b` is `[C_out]`.
pub fn conv1d_same(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c_in, len, c_out, k) = check_conv(x, w, b)?;
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; c_out * len];
    for c in 0..c_out {
        let row = &mut out[c * len..(c + 1) * len];
        row.fill(b.data[c]);
        for i in 0..c_in {
            let xr = &x.data[i * len..(i + 1) * len];
            for kk in 0..k {
                let wv = w.data[(c * c_in + i) * k + kk];
                let (lo, hi) = conv_valid_range(kk, pad, len);
                for t in lo..hi {
                    row[t] += wv * xr[t + kk - pad];
                }
            }
        }
    }
    Tensor::new(vec![c_out, len], out)
}

#[derive(Debug, Clone, Default)]
pub struct ConvGrads {
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
    pub x: Option<Tensor>,
}

/// Backward rule of [`conv1d_same`].
pub fn conv1d_same_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    want_params: bool,
    want_input: bool,
) -> Result<ConvGrads> {
    let b = Tensor::zeros(&[w.shape.first().copied().unwrap_or(1)]);
    let (c_in, len, c_out, k) = check_conv(x, w, &b)?;
    if grad_out.shape != [c_out, len] {
        return Err(Error::shape("conv1d_same_backward", &[c_out, len], &grad_out.shape));
    }
    let pad = (k - 1) / 2;
    let mut grads = ConvGrads::default();
    if want_params {
        let mut dw = vec![0.0; c_out * c_in * k];
        let mut db = vec![0.0; c_out];
        for c in 0..c_out {
            let g = &grad_out.data[c * len..(c + 1) * len];
            db[c] = g.iter().sum();
            for i in 0..c_in {
                let xr = &x.data[i * len..(i + 1) * len];
                for kk in 0..k {
                    let (lo, hi) = conv_valid_range(kk, pad, len);
                    let mut acc = 0.0;
                    for t in lo..hi {
                        acc += g[t] * xr[t + kk - pad];
                    }
                    dw[(c * c_in + i) * k + kk] = acc;
                }
            }
        }
        grads.w = Some(Tensor::new(w.shape.clone(), dw)?);
        grads.b = Some(Tensor::vector(db));
    }
    if want_input {
        let mut dx = vec![0.0; c_in * len];
        for c in 0..c_out {
            let g = &grad_out.data[c * len..(c + 1) * len];
            for i in 0..c_in {
                let dr = &mut dx[i * len..(i + 1) * len];
                for kk in 0..k {
                    let wv = w.data[(c * c_in + i) * k + kk];
                    let (lo, hi) = conv_valid_range(kk, pad, len);
                    for t in lo..hi {
                        dr[t + kk - pad] += wv * g[t];
                    }
                }
            }
        }
        grads.x = Some(Tensor::new(x.shape.clone(), dx)?);
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

pub fn activation(kind: Activation, x: &Tensor) -> Tensor {
    let data = match kind {
        Activation::Relu => x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        Activation::Tanh => x.data.iter().map(|v| v.tanh()).collect(),
    };
    Tensor {
        shape: x.shape.clone(),
        data,
        grad: None,
    }
}

/// Backward rule of [`activation`]. `x` is the input and `y` the output of the
/// forward call. The ReLU derivative at exactly zero is zero.
pub fn activation_backward(
    kind: Activation,
    x: &Tensor,
    y: &Tensor,
    grad_out: &Tensor,
) -> Result<Tensor> {
    if x.shape != grad_out.shape || y.shape != grad_out.shape {
        return Err(Error::shape("activation_backward", &x.shape, &grad_out.shape));
    }
    let data = match kind {
        Activation::Relu => x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        Activation::Tanh => y
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&t, &g)| g * (1.0 - t * t))
            .collect(),
    };
    Tensor::new(x.shape.clone(), data)
}

/// Per-element scale factors of one dropout draw: `0` for dropped elements
/// and `1/(1-rate)` for survivors. `None` means the call was an identity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DropoutMask(pub Option<Vec<f64>>);

impl DropoutMask {
    pub fn identity() -> Self {
        DropoutMask(None)
    }

    /// Mask from keep flags, scaled for the given rate.
    pub fn from_keep(keep: &[bool], rate: f64) -> Self {
        let scale = 1.0 / (1.0 - rate);
        DropoutMask(Some(
            keep.iter().map(|&k| if k { scale } else { 0.0 }).collect(),
        ))
    }
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Inverted dropout. Identity in eval mode or at rate 0; otherwise each
/// element is zeroed with probability `rate` and survivors are scaled by
/// `1/(1-rate)`. The returned mask replays the draw in backward.
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut Rng) -> Result<(Tensor, DropoutMask)> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), DropoutMask::identity()));
    }
    let keep: Vec<bool> = (0..x.len()).map(|_| rng.gen::<f64>() >= rate).collect();
    let mask = DropoutMask::from_keep(&keep, rate);
    let y = dropout_with_mask(x, &mask)?;
    Ok((y, mask))
}

pub fn dropout_with_mask(x: &Tensor, mask: &DropoutMask) -> Result<Tensor> {
    match &mask.0 {
        None => Ok(x.clone()),
        Some(m) => {
            if m.len() != x.len() {
                return Err(Error::shape("dropout", &x.shape, &[m.len()]));
            }
            let data = x.data.iter().zip(m).map(|(a, s)| a * s).collect();
            Tensor::new(x.shape.clone(), data)
        }
    }
}

/// Backward of dropout: the same mask applied to the upstream gradient.
pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Result<Tensor> {
    dropout_with_mask(grad_out, mask)
}

/// Row-wise softmax of a `[L × C]` tensor, with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (rows, cols) = logits
        .dims2()
        .ok_or_else(|| Error::shape("softmax_rows", &logits.shape, &[0, 0]))?;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits.data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            z += *ov;
        }
        for ov in o.iter_mut() {
            *ov /= z;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Masked mean cross-entropy over positions of a `[L × C]` logit tensor.
///
/// Returns the loss and its gradient with respect to the logits. Positions
/// with `mask == 0` contribute nothing, and their labels are not inspected.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    mask: &[u8],
) -> Result<(f64, Tensor)> {
    let (rows, cols) = logits
        .dims2()
        .ok_or_else(|| Error::shape("softmax_cross_entropy", &logits.shape, &[0, 0]))?;
    if labels.len() != rows || mask.len() != rows {
        return Err(Error::shape(
            "softmax_cross_entropy",
            &logits.shape,
            &[labels.len(), mask.len()],
        ));
    }
    let n: usize = mask.iter().filter(|&&m| m != 0).count();
    if n == 0 {
        return Err(Error::Degenerate(
            "cross-entropy mask selects no positions".into(),
        ));
    }
    let probs = softmax_rows(logits)?;
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![0.0; rows * cols];
    let mut loss = 0.0;
    for r in 0..rows {
        if mask[r] == 0 {
            continue;
        }
        let y = labels[r];
        if y >= cols {
            return Err(Error::Config(format!(
                "label {y} at position {r} is outside 0..{cols}"
            )));
        }
        // log-softmax from the max-shifted logits keeps the loss exact for
        // confident predictions
        let row = &logits.data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += lse - row[y];
        let p = &probs.data[r * cols..(r + 1) * cols];
        let g = &mut grad[r * cols..(r + 1) * cols];
        for c in 0..cols {
            g[c] = (p[c] - if c == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![rows, cols], grad)?))
}
