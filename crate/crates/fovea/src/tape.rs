//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Forward builders record one entry per primitive; `backward` replays the
//! records in reverse, visiting each exactly once. Inputs of every record
//! were produced earlier or are leaves, so a single reverse sweep suffices.
//! Gradient buffers always share the shape of their value tensor.
//!
//! Broadcasting is deliberately limited to trailing-dimension bias addition
//! (`add_bias`); everything else requires exact shape agreement.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(u32);

impl TensorId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

// Records keep every forward attribute so a tape dump is self-describing,
// even where backward does not need the value (AddConst's constant).
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Matmul { a: TensorId, b: TensorId, out: TensorId },
    Transpose { a: TensorId, out: TensorId },
    Reshape { a: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    AddBias { a: TensorId, bias: TensorId, out: TensorId },
    Scale { a: TensorId, c: f64, out: TensorId },
    AddConst { a: TensorId, c: f64, out: TensorId },
    MulScalarT { a: TensorId, s: TensorId, out: TensorId },
    AddScalarT { a: TensorId, s: TensorId, out: TensorId },
    DivScalars { num: TensorId, den: TensorId, out: TensorId },
    Exp { a: TensorId, out: TensorId },
    Sigmoid { a: TensorId, out: TensorId },
    LogSigmoid { a: TensorId, out: TensorId },
    Gelu { a: TensorId, out: TensorId },
    Softmax { a: TensorId, axis: usize, out: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, out: TensorId },
    Conv2d { x: TensorId, kernel: TensorId, out: TensorId, stride: usize, pad: usize, groups: usize },
    AvgPool2 { x: TensorId, out: TensorId },
    GatherRows { x: TensorId, out: TensorId, indices: Vec<usize> },
    ConcatRows { parts: Vec<TensorId>, out: TensorId },
    SliceCols { x: TensorId, out: TensorId, start: usize, end: usize },
    ConcatCols { parts: Vec<TensorId>, out: TensorId },
    InterpBilinear { x: TensorId, out: TensorId },
    Sum { a: TensorId, out: TensorId },
    NormalizeRows { x: TensorId, out: TensorId },
    BceMean { p: TensorId, targets: TensorId, out: TensorId },
    DiceEps { p: TensorId, targets: TensorId, eps: f64, out: TensorId },
}

/// Epsilon inside layer_norm's variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Probabilities entering the cross-entropy are clamped to
/// [BCE_CLAMP, 1 - BCE_CLAMP].
pub const BCE_CLAMP: f64 = 1e-7;

/// Operation tape: values, per-tensor grad slots, and the topologically
/// ordered record of primitives connecting them.
pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    ops: Vec<Op>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Differentiable leaf (parameter).
    pub fn leaf(&mut self, t: Tensor<T>) -> TensorId {
        self.push(t, true)
    }

    /// Non-differentiable leaf (input data, labels, masks).
    pub fn constant(&mut self, t: Tensor<T>) -> TensorId {
        self.push(t, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.values[id.index()]
    }

    /// Gradient of the last `backward` target w.r.t. `id`, if any flowed.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.index()].as_deref()
    }

    pub fn num_tensors(&self) -> usize {
        self.values.len()
    }

    fn push(&mut self, t: Tensor<T>, needs: bool) -> TensorId {
        let id = TensorId(self.values.len() as u32);
        self.values.push(t);
        self.needs_grad.push(needs);
        self.grads.push(None);
        id
    }

    fn push_result(&mut self, t: Tensor<T>, inputs: &[TensorId]) -> TensorId {
        let needs = inputs.iter().any(|i| self.needs_grad[i.index()]);
        self.push(t, needs)
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.values[id.index()].shape()
    }

    fn data(&self, id: TensorId) -> &[T] {
        self.values[id.index()].data()
    }

    // ── forward builders ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.values[a.index()].dims2()?;
        let (kb, n) = self.values[b.index()].dims2()?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dims disagree: {m}x{ka} vs {kb}x{n}"
            )));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, ka, n);
        let t = Tensor::new(vec![m, n], out)?;
        let id = self.push_result(t, &[a, b]);
        self.ops.push(Op::Matmul { a, b, out: id });
        Ok(id)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.values[a.index()].dims2()?;
        let src = self.data(a);
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let id = self.push_result(t, &[a]);
        self.ops.push(Op::Transpose { a, out: id });
        Ok(id)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.values[a.index()].numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?}",
                self.shape(a),
                shape
            )));
        }
        let t = Tensor::new(shape, self.data(a).to_vec())?;
        let id = self.push_result(t, &[a]);
        self.ops.push(Op::Reshape { a, out: id });
        Ok(id)
    }

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a, b]);
        self.ops.push(Op::Add { a, b, out: id });
        Ok(id)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a, b]);
        self.ops.push(Op::Sub { a, b, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a, b]);
        self.ops.push(Op::Mul { a, b, out: id });
        Ok(id)
    }

    /// Add a vector over the trailing dimension: `[.., d] + [d]`.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let d = match self.shape(bias) {
            [d] => *d,
            s => {
                return Err(Error::Dimension(format!("bias must be rank-1, got {s:?}")));
            }
        };
        let last = *self.shape(a).last().ok_or_else(|| {
            Error::Dimension("add_bias on rank-0 tensor".into())
        })?;
        if last != d {
            return Err(Error::Dimension(format!(
                "add_bias: trailing dim {last} vs bias len {d}"
            )));
        }
        let bdata = self.data(bias).to_vec();
        let data: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bdata[i % d])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a, bias]);
        self.ops.push(Op::AddBias { a, bias, out: id });
        Ok(id)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let cv = T::from_f64(c);
        let data: Vec<T> = self.data(a).iter().map(|&x| x * cv).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a]);
        self.ops.push(Op::Scale { a, c, out: id });
        Ok(id)
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let cv = T::from_f64(c);
        let data: Vec<T> = self.data(a).iter().map(|&x| x + cv).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a]);
        self.ops.push(Op::AddConst { a, c, out: id });
        Ok(id)
    }

    /// Multiply every element by a learnable scalar held in a `[1]` tensor.
    pub fn mul_scalar_t(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let sv = self.values[s.index()].item()?;
        let data: Vec<T> = self.data(a).iter().map(|&x| x * sv).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a, s]);
        self.ops.push(Op::MulScalarT { a, s, out: id });
        Ok(id)
    }

    pub fn add_scalar_t(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let sv = self.values[s.index()].item()?;
        let data: Vec<T> = self.data(a).iter().map(|&x| x + sv).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a, s]);
        self.ops.push(Op::AddScalarT { a, s, out: id });
        Ok(id)
    }

    /// `[1] / [1]`.
    pub fn div_scalars(&mut self, num: TensorId, den: TensorId) -> Result<TensorId> {
        let n = self.values[num.index()].item()?;
        let d = self.values[den.index()].item()?;
        let t = Tensor::scalar(n / d);
        let id = self.push_result(t, &[num, den]);
        self.ops.push(Op::DivScalars { num, den, out: id });
        Ok(id)
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<T> = self.data(a).iter().map(|&x| x.exp()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a]);
        self.ops.push(Op::Exp { a, out: id });
        Ok(id)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<T> = self.data(a).iter().map(|&x| sigmoid_stable(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a]);
        self.ops.push(Op::Sigmoid { a, out: id });
        Ok(id)
    }

    /// log(sigmoid(x)) computed as -softplus(-x); stays finite for large |x|.
    pub fn log_sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<T> = self.data(a).iter().map(|&x| log_sigmoid_stable(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a]);
        self.ops.push(Op::LogSigmoid { a, out: id });
        Ok(id)
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<T> = self.data(a).iter().map(|&x| gelu_tanh(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let id = self.push_result(t, &[a]);
        self.ops.push(Op::Gelu { a, out: id });
        Ok(id)
    }

    /// Softmax along `axis`. Rank-1 tensors use axis 0; rank-2 support both
    /// axes. Max-subtracted for stability.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let (rows, cols, row_major) = softmax_layout(&shape, axis)?;
        let src = self.data(a);
        let mut out = vec![T::ZERO; src.len()];
        for r in 0..rows {
            let idx = |c: usize| {
                if row_major {
                    r * cols + c
                } else {
                    c * rows + r
                }
            };
            let mut m = T::neg_infinity();
            for c in 0..cols {
                m = m.maxs(src[idx(c)]);
            }
            let mut denom = T::ZERO;
            for c in 0..cols {
                let e = (src[idx(c)] - m).exp();
                out[idx(c)] = e;
                denom += e;
            }
            for c in 0..cols {
                out[idx(c)] = out[idx(c)] / denom;
            }
        }
        let t = Tensor::new(shape, out)?;
        let id = self.push_result(t, &[a]);
        self.ops.push(Op::Softmax { a, axis, out: id });
        Ok(id)
    }

    /// Per-row layer normalization of a `[n, d]` tensor with gain/bias `[d]`.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.values[x.index()].dims2()?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must be [{d}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.data(x);
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let mut out = vec![T::ZERO; n * d];
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(LAYER_NORM_EPS);
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let dlt = v - mean;
                var += dlt * dlt;
            }
            var *= inv_d;
            let rstd = T::ONE / (var + eps).sqrt();
            for c in 0..d {
                let xhat = (row[c] - mean) * rstd;
                out[r * d + c] = xhat * g[c] + b[c];
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let id = self.push_result(t, &[x, gain, bias]);
        self.ops.push(Op::LayerNorm { x, gain, bias, out: id });
        Ok(id)
    }

    /// 2-D convolution over x [h, w, c_in] with kernel
    /// [kh, kw, c_in/groups, c_out]; zero padding, square stride.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<TensorId> {
        let (h, w, cin) = self.values[x.index()].dims3()?;
        let kshape = self.shape(kernel).to_vec();
        let (kh, kw, cin_pg, cout) = match kshape[..] {
            [kh, kw, cpg, co] => (kh, kw, cpg, co),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv kernel must be rank-4, got {kshape:?}"
                )));
            }
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_pg {
            return Err(Error::Dimension(format!(
                "conv groups {groups} incompatible with c_in {cin}, kernel {kshape:?}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv geometry invalid: input {h}x{w}, kernel {kh}x{kw}, pad {pad}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let out = conv2d_raw(
            self.data(x),
            self.data(kernel),
            ConvGeom { h, w, cin, kh, kw, cout, stride, pad, groups },
        );
        let t = Tensor::new(vec![oh, ow, cout], out)?;
        let id = self.push_result(t, &[x, kernel]);
        self.ops.push(Op::Conv2d { x, kernel, out: id, stride, pad, groups });
        Ok(id)
    }

    /// 2x2 stride-2 average pooling of [h, w, c]; h and w must be even.
    pub fn avg_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let (h, w, c) = self.values[x.index()].dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "avg_pool2 needs even sides, got {h}x{w}"
            )));
        }
        let src = self.data(x);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::ZERO; oh * ow * c];
        let quarter = T::from_f64(0.25);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = T::ZERO;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += src[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                        }
                    }
                    out[(oy * ow + ox) * c + ch] = acc * quarter;
                }
            }
        }
        let t = Tensor::new(vec![oh, ow, c], out)?;
        let id = self.push_result(t, &[x]);
        self.ops.push(Op::AvgPool2 { x, out: id });
        Ok(id)
    }

    /// Select rows of a [n, d] tensor; also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (n, d) = self.values[x.index()].dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![indices.len(), d], out)?;
        let id = self.push_result(t, &[x]);
        self.ops.push(Op::GatherRows { x, out: id, indices: indices.to_vec() });
        Ok(id)
    }

    /// Stack [n_i, d] parts vertically. Parts may be empty (0 rows).
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_rows of zero parts".into()));
        }
        let d = self.values[parts[0].index()].dims2()?.1;
        let mut total = 0;
        for &p in parts {
            let (np, dp) = self.values[p.index()].dims2()?;
            if dp != d {
                return Err(Error::Dimension(format!(
                    "concat_rows column mismatch: {dp} vs {d}"
                )));
            }
            total += np;
        }
        let mut out = Vec::with_capacity(total * d);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(vec![total, d], out)?;
        let id = self.push_result(t, parts);
        self.ops.push(Op::ConcatRows { parts: parts.to_vec(), out: id });
        Ok(id)
    }

    /// Columns [start, end) of a [n, d] tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (n, d) = self.values[x.index()].dims2()?;
        if start > end || end > d {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{end} of {d} columns"
            )));
        }
        let src = self.data(x);
        let width = end - start;
        let mut out = Vec::with_capacity(n * width);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + end]);
        }
        let t = Tensor::new(vec![n, width], out)?;
        let id = self.push_result(t, &[x]);
        self.ops.push(Op::SliceCols { x, out: id, start, end });
        Ok(id)
    }

    /// Stack [n, d_i] parts horizontally.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols of zero parts".into()));
        }
        let n = self.values[parts[0].index()].dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (np, dp) = self.values[p.index()].dims2()?;
            if np != n {
                return Err(Error::Dimension(format!(
                    "concat_cols row mismatch: {np} vs {n}"
                )));
            }
            widths.push(dp);
            total += dp;
        }
        let mut out = vec![T::ZERO; n * total];
        for r in 0..n {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let d = widths[pi];
                let src = self.data(p);
                out[r * total + off..r * total + off + d]
                    .copy_from_slice(&src[r * d..(r + 1) * d]);
                off += d;
            }
        }
        let t = Tensor::new(vec![n, total], out)?;
        let id = self.push_result(t, parts);
        self.ops.push(Op::ConcatCols { parts: parts.to_vec(), out: id });
        Ok(id)
    }

    /// Bilinear resample of [h, w, c] to [out_h, out_w, c] with half-pixel
    /// centers and edge clamping: output cell i samples input coordinate
    /// (i + 0.5) * h / out_h - 0.5 clamped to [0, h-1].
    pub fn interpolate_bilinear(
        &mut self,
        x: TensorId,
        out_h: usize,
        out_w: usize,
    ) -> Result<TensorId> {
        let (h, w, c) = self.values[x.index()].dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Dimension("interpolate to empty output".into()));
        }
        let src = self.data(x);
        let mut out = vec![T::ZERO; out_h * out_w * c];
        for oy in 0..out_h {
            let (y0, y1, wy) = interp_coords(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1, wx) = interp_coords(ox, w, out_w);
                for ch in 0..c {
                    let v00 = src[(y0 * w + x0) * c + ch].to_f64();
                    let v01 = src[(y0 * w + x1) * c + ch].to_f64();
                    let v10 = src[(y1 * w + x0) * c + ch].to_f64();
                    let v11 = src[(y1 * w + x1) * c + ch].to_f64();
                    let v = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                    out[(oy * out_w + ox) * c + ch] = T::from_f64(v);
                }
            }
        }
        let t = Tensor::new(vec![out_h, out_w, c], out)?;
        let id = self.push_result(t, &[x]);
        self.ops.push(Op::InterpBilinear { x, out: id });
        Ok(id)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let mut acc = T::ZERO;
        for &v in self.data(a) {
            acc += v;
        }
        let t = Tensor::scalar(acc);
        let id = self.push_result(t, &[a]);
        self.ops.push(Op::Sum { a, out: id });
        Ok(id)
    }

    /// L2-normalize each row of [n, d]; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.values[x.index()].dims2()?;
        let src = self.data(x);
        let mut out = vec![T::ZERO; n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mut sq = T::ZERO;
            for &v in row {
                sq += v * v;
            }
            if sq > T::ZERO {
                let inv = T::ONE / sq.sqrt();
                for c in 0..d {
                    out[r * d + c] = row[c] * inv;
                }
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let id = self.push_result(t, &[x]);
        self.ops.push(Op::NormalizeRows { x, out: id });
        Ok(id)
    }

    /// Mean binary cross entropy between probabilities `p` and binary
    /// `targets` (same shape), with p clamped to [1e-7, 1 - 1e-7].
    pub fn bce_mean(&mut self, p: TensorId, targets: TensorId) -> Result<TensorId> {
        self.binary_same_shape(p, targets, "bce_mean")?;
        let n = self.values[p.index()].numel();
        if n == 0 {
            return Err(Error::Argument("bce_mean on empty tensor".into()));
        }
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::from_f64(1.0 - BCE_CLAMP);
        let mut acc = T::ZERO;
        for (&pv, &tv) in self.data(p).iter().zip(self.data(targets)) {
            let pc = pv.maxs(lo).mins(hi);
            acc += -(tv * pc.ln() + (T::ONE - tv) * (T::ONE - pc).ln());
        }
        let t = Tensor::scalar(acc * T::from_f64(1.0 / n as f64));
        let id = self.push_result(t, &[p, targets]);
        self.ops.push(Op::BceMean { p, targets, out: id });
        Ok(id)
    }

    /// Soft overlap loss 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps).
    pub fn dice(&mut self, p: TensorId, targets: TensorId, eps: f64) -> Result<TensorId> {
        self.binary_same_shape(p, targets, "dice")?;
        let mut inter = T::ZERO;
        let mut psum = T::ZERO;
        let mut tsum = T::ZERO;
        for (&pv, &tv) in self.data(p).iter().zip(self.data(targets)) {
            inter += pv * tv;
            psum += pv;
            tsum += tv;
        }
        let e = T::from_f64(eps);
        let two = T::from_f64(2.0);
        let val = T::ONE - (two * inter + e) / (psum + tsum + e);
        let t = Tensor::scalar(val);
        let id = self.push_result(t, &[p, targets]);
        self.ops.push(Op::DiceEps { p, targets, eps, out: id });
        Ok(id)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar (`[1]`) output. Each record is visited
    /// exactly once, in reverse order of creation. Interior gradient slots
    /// are consumed as the sweep passes their producing record; after
    /// `backward` only leaf gradients remain queryable.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.values[loss.index()].numel() != 1 {
            return Err(Error::Argument(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.index()] = Some(vec![T::ONE]);
        let ops = std::mem::take(&mut self.ops);
        let mut result = Ok(());
        for op in ops.iter().rev() {
            result = self.backward_op(op);
            if result.is_err() {
                break;
            }
        }
        self.ops = ops;
        result
    }

    /// Every tensor is produced by exactly one record, so its accumulated
    /// gradient is needed exactly once: move it out instead of cloning.
    fn take_out_grad(&mut self, out: TensorId) -> Option<Vec<T>> {
        self.grads[out.index()].take()
    }

    fn accum(&mut self, id: TensorId, delta: &[T]) {
        if !self.needs_grad[id.index()] {
            return;
        }
        let slot = &mut self.grads[id.index()];
        match slot {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            None => {
                *slot = Some(delta.to_vec());
            }
        }
    }

    fn wants(&self, id: TensorId) -> bool {
        self.needs_grad[id.index()]
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&mut self, op: &Op) -> Result<()> {
        match *op {
            Op::Matmul { a, b, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let (m, k) = self.values[a.index()].dims2()?;
                let n = self.values[b.index()].dims2()?.1;
                if self.wants(a) {
                    // dA = G . B^T
                    let bval = self.data(b);
                    let mut da = vec![T::ZERO; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bval[kk * n..(kk + 1) * n];
                            let mut acc = T::ZERO;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[i * k + kk] = acc;
                        }
                    }
                    self.accum(a, &da);
                }
                if self.wants(b) {
                    // dB = A^T . G
                    let aval = self.data(a);
                    let mut db = vec![T::ZERO; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = aval[i * k + kk];
                            if aik == T::ZERO {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                drow[j] += aik * grow[j];
                            }
                        }
                    }
                    self.accum(b, &db);
                }
            }
            Op::Transpose { a, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let (m, n) = self.values[a.index()].dims2()?;
                let mut da = vec![T::ZERO; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                self.accum(a, &da);
            }
            Op::Reshape { a, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                self.accum(a, &g);
            }
            Op::Add { a, b, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                self.accum(a, &g);
                self.accum(b, &g);
            }
            Op::Sub { a, b, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                self.accum(a, &g);
                if self.wants(b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.accum(b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                if self.wants(a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(self.data(b))
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accum(a, &da);
                }
                if self.wants(b) {
                    let db: Vec<T> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accum(b, &db);
                }
            }
            Op::AddBias { a, bias, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                self.accum(a, &g);
                if self.wants(bias) {
                    let d = self.values[bias.index()].numel();
                    let mut db = vec![T::ZERO; d];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] += gv;
                    }
                    self.accum(bias, &db);
                }
            }
            Op::Scale { a, c, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let cv = T::from_f64(c);
                let da: Vec<T> = g.iter().map(|&v| v * cv).collect();
                self.accum(a, &da);
            }
            Op::AddConst { a, out, .. } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                self.accum(a, &g);
            }
            Op::MulScalarT { a, s, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let sv = self.values[s.index()].item()?;
                if self.wants(a) {
                    let da: Vec<T> = g.iter().map(|&v| v * sv).collect();
                    self.accum(a, &da);
                }
                if self.wants(s) {
                    let mut ds = T::ZERO;
                    for (&gv, &av) in g.iter().zip(self.data(a)) {
                        ds += gv * av;
                    }
                    self.accum(s, &[ds]);
                }
            }
            Op::AddScalarT { a, s, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                self.accum(a, &g);
                if self.wants(s) {
                    let mut ds = T::ZERO;
                    for &gv in &g {
                        ds += gv;
                    }
                    self.accum(s, &[ds]);
                }
            }
            Op::DivScalars { num, den, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let n = self.values[num.index()].item()?;
                let d = self.values[den.index()].item()?;
                if self.wants(num) {
                    self.accum(num, &[g[0] / d]);
                }
                if self.wants(den) {
                    self.accum(den, &[-g[0] * n / (d * d)]);
                }
            }
            Op::Exp { a, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let da: Vec<T> = g
                    .iter()
                    .zip(self.data(out))
                    .map(|(&gv, &yv)| gv * yv)
                    .collect();
                self.accum(a, &da);
            }
            Op::Sigmoid { a, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let da: Vec<T> = g
                    .iter()
                    .zip(self.data(out))
                    .map(|(&gv, &yv)| gv * yv * (T::ONE - yv))
                    .collect();
                self.accum(a, &da);
            }
            Op::LogSigmoid { a, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let da: Vec<T> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(&gv, &xv)| gv * sigmoid_stable(-xv))
                    .collect();
                self.accum(a, &da);
            }
            Op::Gelu { a, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let da: Vec<T> = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(&gv, &xv)| gv * gelu_tanh_deriv(xv))
                    .collect();
                self.accum(a, &da);
            }
            Op::Softmax { a, axis, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let shape = self.shape(out).to_vec();
                let (rows, cols, row_major) = softmax_layout(&shape, axis)?;
                let y = self.data(out);
                let mut da = vec![T::ZERO; y.len()];
                for r in 0..rows {
                    let idx = |c: usize| {
                        if row_major {
                            r * cols + c
                        } else {
                            c * rows + r
                        }
                    };
                    let mut dot = T::ZERO;
                    for c in 0..cols {
                        dot += g[idx(c)] * y[idx(c)];
                    }
                    for c in 0..cols {
                        da[idx(c)] = y[idx(c)] * (g[idx(c)] - dot);
                    }
                }
                self.accum(a, &da);
            }
            Op::LayerNorm { x, gain, bias, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let (n, d) = self.values[x.index()].dims2()?;
                let src = self.data(x).to_vec();
                let gval = self.data(gain).to_vec();
                let inv_d = T::from_f64(1.0 / d as f64);
                let eps = T::from_f64(LAYER_NORM_EPS);
                let mut dx = vec![T::ZERO; n * d];
                let mut dgain = vec![T::ZERO; d];
                let mut dbias = vec![T::ZERO; d];
                for r in 0..n {
                    let row = &src[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mut mean = T::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_d;
                    let mut var = T::ZERO;
                    for &v in row {
                        let dlt = v - mean;
                        var += dlt * dlt;
                    }
                    var *= inv_d;
                    let rstd = T::ONE / (var + eps).sqrt();
                    // gh = g * gain; dx = rstd * (gh - mean(gh) - xhat * mean(gh*xhat))
                    let mut gh_mean = T::ZERO;
                    let mut ghx_mean = T::ZERO;
                    for c in 0..d {
                        let xhat = (row[c] - mean) * rstd;
                        let gh = grow[c] * gval[c];
                        gh_mean += gh;
                        ghx_mean += gh * xhat;
                        dgain[c] += grow[c] * xhat;
                        dbias[c] += grow[c];
                    }
                    gh_mean *= inv_d;
                    ghx_mean *= inv_d;
                    for c in 0..d {
                        let xhat = (row[c] - mean) * rstd;
                        let gh = grow[c] * gval[c];
                        dx[r * d + c] = rstd * (gh - gh_mean - xhat * ghx_mean);
                    }
                }
                self.accum(x, &dx);
                self.accum(gain, &dgain);
                self.accum(bias, &dbias);
            }
            Op::Conv2d { x, kernel, out, stride, pad, groups } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let (h, w, cin) = self.values[x.index()].dims3()?;
                let kshape = self.shape(kernel).to_vec();
                let (kh, kw, cin_pg, cout) = (kshape[0], kshape[1], kshape[2], kshape[3]);
                let (oh, ow, _) = self.values[out.index()].dims3()?;
                let cout_pg = cout / groups;
                let want_x = self.wants(x);
                let want_k = self.wants(kernel);
                // Pointwise path: dX = G . K^T, dK = X^T . G over pixels.
                if kh == 1 && kw == 1 && groups == 1 && pad == 0 && stride == 1 {
                    let n = h * w;
                    if want_x {
                        let kval = self.data(kernel);
                        let mut dx = vec![T::ZERO; n * cin];
                        for i in 0..n {
                            let grow = &g[i * cout..(i + 1) * cout];
                            for ci in 0..cin {
                                let krow = &kval[ci * cout..(ci + 1) * cout];
                                let mut acc = T::ZERO;
                                for co in 0..cout {
                                    acc += grow[co] * krow[co];
                                }
                                dx[i * cin + ci] = acc;
                            }
                        }
                        self.accum(x, &dx);
                    }
                    if want_k {
                        let xval = self.data(x).to_vec();
                        let mut dk = vec![T::ZERO; cin * cout];
                        for i in 0..n {
                            let grow = &g[i * cout..(i + 1) * cout];
                            for ci in 0..cin {
                                let xv = xval[i * cin + ci];
                                if xv == T::ZERO {
                                    continue;
                                }
                                let drow = &mut dk[ci * cout..(ci + 1) * cout];
                                for co in 0..cout {
                                    drow[co] += xv * grow[co];
                                }
                            }
                        }
                        self.accum(kernel, &dk);
                    }
                    return Ok(());
                }
                let xval = self.data(x).to_vec();
                let kval = self.data(kernel).to_vec();
                let mut dx = vec![T::ZERO; h * w * cin];
                let mut dk = vec![T::ZERO; kh * kw * cin_pg * cout];
                if groups == cin && cout == cin && stride == 1 {
                    // Depthwise path, stride 1: tap-major with row slices.
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kbase = (ky * kw + kx) * cout;
                            let krow = &kval[kbase..kbase + cout];
                            let dkrow = &mut dk[kbase..kbase + cout];
                            for oy in 0..oh {
                                let iy = (oy + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let ox_start = pad.saturating_sub(kx);
                                let ox_end = (w + pad - kx).min(ow);
                                let grow = &g[(oy * ow) * cout..(oy * ow + ow) * cout];
                                let xrow =
                                    &xval[(iy as usize * w) * cin..(iy as usize * w + w) * cin];
                                let dxrow =
                                    &mut dx[(iy as usize * w) * cin..(iy as usize * w + w) * cin];
                                for ox in ox_start..ox_end {
                                    let ix = ox + kx - pad;
                                    let gp = &grow[ox * cout..ox * cout + cout];
                                    if want_x {
                                        let dp = &mut dxrow[ix * cin..ix * cin + cin];
                                        for c in 0..cout {
                                            dp[c] += gp[c] * krow[c];
                                        }
                                    }
                                    if want_k {
                                        let xp = &xrow[ix * cin..ix * cin + cin];
                                        for c in 0..cout {
                                            dkrow[c] += gp[c] * xp[c];
                                        }
                                    }
                                }
                            }
                        }
                    }
                } else if groups == cin && cout == cin {
                    // Depthwise path, strided.
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gpix = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let pix = (iy as usize * w + ix as usize) * cin;
                                    let krow = (ky * kw + kx) * cout;
                                    for c in 0..cin {
                                        if want_x {
                                            dx[pix + c] += gpix[c] * kval[krow + c];
                                        }
                                        if want_k {
                                            dk[krow + c] += gpix[c] * xval[pix + c];
                                        }
                                    }
                                }
                            }
                        }
                    }
                } else {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gpix = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let pix = (iy as usize * w + ix as usize) * cin;
                                    let kbase = (ky * kw + kx) * cin_pg * cout;
                                    for grp in 0..groups {
                                        for ci in 0..cin_pg {
                                            let xi = pix + grp * cin_pg + ci;
                                            let krow = kbase + ci * cout + grp * cout_pg;
                                            let xv = xval[xi];
                                            let mut acc = T::ZERO;
                                            for co in 0..cout_pg {
                                                let gv = gpix[grp * cout_pg + co];
                                                acc += gv * kval[krow + co];
                                                if want_k {
                                                    dk[krow + co] += gv * xv;
                                                }
                                            }
                                            if want_x {
                                                dx[xi] += acc;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    self.accum(x, &dx);
                }
                if want_k {
                    self.accum(kernel, &dk);
                }
            }
            Op::AvgPool2 { x, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let (h, w, c) = self.values[x.index()].dims3()?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut dx = vec![T::ZERO; h * w * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let gv = g[(oy * ow + ox) * c + ch] * quarter;
                            for dy in 0..2 {
                                for dxo in 0..2 {
                                    dx[((2 * oy + dy) * w + 2 * ox + dxo) * c + ch] += gv;
                                }
                            }
                        }
                    }
                }
                self.accum(x, &dx);
            }
            Op::GatherRows { x, out, ref indices } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                if !self.wants(x) {
                    return Ok(());
                }
                let (n, d) = self.values[x.index()].dims2()?;
                let mut dx = vec![T::ZERO; n * d];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] += g[r * d + c];
                    }
                }
                self.accum(x, &dx);
            }
            Op::ConcatRows { ref parts, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let d = self.values[out.index()].dims2()?.1;
                let mut row = 0;
                for &p in parts {
                    let np = self.values[p.index()].dims2()?.0;
                    if self.wants(p) {
                        self.accum(p, &g[row * d..(row + np) * d]);
                    }
                    row += np;
                }
            }
            Op::SliceCols { x, out, start, end } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                if !self.wants(x) {
                    return Ok(());
                }
                let (n, d) = self.values[x.index()].dims2()?;
                let width = end - start;
                let mut dx = vec![T::ZERO; n * d];
                for r in 0..n {
                    for c in 0..width {
                        dx[r * d + start + c] = g[r * width + c];
                    }
                }
                self.accum(x, &dx);
            }
            Op::ConcatCols { ref parts, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let (n, total) = self.values[out.index()].dims2()?;
                let mut off = 0;
                for &p in parts {
                    let d = self.values[p.index()].dims2()?.1;
                    if self.wants(p) {
                        let mut dp = vec![T::ZERO; n * d];
                        for r in 0..n {
                            dp[r * d..(r + 1) * d]
                                .copy_from_slice(&g[r * total + off..r * total + off + d]);
                        }
                        self.accum(p, &dp);
                    }
                    off += d;
                }
            }
            Op::InterpBilinear { x, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                if !self.wants(x) {
                    return Ok(());
                }
                let (h, w, c) = self.values[x.index()].dims3()?;
                let (out_h, out_w, _) = self.values[out.index()].dims3()?;
                let mut dx = vec![T::ZERO; h * w * c];
                for oy in 0..out_h {
                    let (y0, y1, wy) = interp_coords(oy, h, out_h);
                    for ox in 0..out_w {
                        let (x0, x1, wx) = interp_coords(ox, w, out_w);
                        for ch in 0..c {
                            let gv = g[(oy * out_w + ox) * c + ch].to_f64();
                            dx[(y0 * w + x0) * c + ch] +=
                                T::from_f64(gv * (1.0 - wy) * (1.0 - wx));
                            dx[(y0 * w + x1) * c + ch] += T::from_f64(gv * (1.0 - wy) * wx);
                            dx[(y1 * w + x0) * c + ch] += T::from_f64(gv * wy * (1.0 - wx));
                            dx[(y1 * w + x1) * c + ch] += T::from_f64(gv * wy * wx);
                        }
                    }
                }
                self.accum(x, &dx);
            }
            Op::Sum { a, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let n = self.values[a.index()].numel();
                let da = vec![g[0]; n];
                self.accum(a, &da);
            }
            Op::NormalizeRows { x, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                let (n, d) = self.values[x.index()].dims2()?;
                let src = self.data(x).to_vec();
                let y = self.data(out).to_vec();
                let mut dx = vec![T::ZERO; n * d];
                for r in 0..n {
                    let row = &src[r * d..(r + 1) * d];
                    let yrow = &y[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mut sq = T::ZERO;
                    for &v in row {
                        sq += v * v;
                    }
                    if sq == T::ZERO {
                        continue; // zero rows map to zero; sub-gradient 0
                    }
                    let norm = sq.sqrt();
                    let mut dot = T::ZERO;
                    for c in 0..d {
                        dot += grow[c] * yrow[c];
                    }
                    for c in 0..d {
                        dx[r * d + c] = (grow[c] - dot * yrow[c]) / norm;
                    }
                }
                self.accum(x, &dx);
            }
            Op::BceMean { p, targets, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                if !self.wants(p) {
                    return Ok(());
                }
                let n = self.values[p.index()].numel();
                let lo = T::from_f64(BCE_CLAMP);
                let hi = T::from_f64(1.0 - BCE_CLAMP);
                let inv_n = T::from_f64(1.0 / n as f64);
                let tval = self.data(targets).to_vec();
                let dp: Vec<T> = self
                    .data(p)
                    .iter()
                    .zip(&tval)
                    .map(|(&pv, &tv)| {
                        if pv <= lo || pv >= hi {
                            T::ZERO // clamped region is flat
                        } else {
                            g[0] * inv_n * (-(tv / pv) + (T::ONE - tv) / (T::ONE - pv))
                        }
                    })
                    .collect();
                self.accum(p, &dp);
            }
            Op::DiceEps { p, targets, eps, out } => {
                let Some(g) = self.take_out_grad(out) else { return Ok(()) };
                if !self.wants(p) {
                    return Ok(());
                }
                let mut inter = T::ZERO;
                let mut psum = T::ZERO;
                let mut tsum = T::ZERO;
                for (&pv, &tv) in self.data(p).iter().zip(self.data(targets)) {
                    inter += pv * tv;
                    psum += pv;
                    tsum += tv;
                }
                let e = T::from_f64(eps);
                let two = T::from_f64(2.0);
                let a = two * inter + e;
                let b = psum + tsum + e;
                let tval = self.data(targets).to_vec();
                let dp: Vec<T> = tval
                    .iter()
                    .map(|&tv| g[0] * (-(two * tv * b - a) / (b * b)))
                    .collect();
                self.accum(p, &dp);
            }
        }
        Ok(())
    }
}

// ── shared kernels ──────────────────────────────────────────────────────

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

fn conv2d_raw<T: Scalar>(x: &[T], kernel: &[T], geom: ConvGeom) -> Vec<T> {
    let ConvGeom { h, w, cin, kh, kw, cout, stride, pad, groups } = geom;
    // Pointwise convolution is a plain matmul over pixels.
    if kh == 1 && kw == 1 && groups == 1 && pad == 0 && stride == 1 {
        return matmul_raw(x, kernel, h * w, cin, cout);
    }
    let cin_pg = cin / groups;
    let cout_pg = cout / groups;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![T::ZERO; oh * ow * cout];
    // Depthwise, stride 1: tap-major loops over contiguous rows.
    if groups == cin && cout == cin && stride == 1 {
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = &kernel[(ky * kw + kx) * cout..(ky * kw + kx + 1) * cout];
                for oy in 0..oh {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    // ix = ox + kx - pad must stay in [0, w).
                    let ox_start = pad.saturating_sub(kx);
                    let ox_end = (w + pad - kx).min(ow);
                    let xrow = &x[(iy as usize * w) * cin..(iy as usize * w + w) * cin];
                    let orow = &mut out[(oy * ow) * cout..(oy * ow + ow) * cout];
                    for ox in ox_start..ox_end {
                        let ix = ox + kx - pad;
                        let xp = &xrow[ix * cin..ix * cin + cin];
                        let op = &mut orow[ox * cout..ox * cout + cout];
                        for c in 0..cout {
                            op[c] += xp[c] * krow[c];
                        }
                    }
                }
            }
        }
        return out;
    }
    // Depthwise, strided.
    if groups == cin && cout == cin {
        for oy in 0..oh {
            for ox in 0..ow {
                let opix = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let pix = (iy as usize * w + ix as usize) * cin;
                        let krow = (ky * kw + kx) * cout;
                        for c in 0..cin {
                            opix[c] += x[pix + c] * kernel[krow + c];
                        }
                    }
                }
            }
        }
        return out;
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let opix = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let pix = (iy as usize * w + ix as usize) * cin;
                    let kbase = (ky * kw + kx) * cin_pg * cout;
                    for grp in 0..groups {
                        for ci in 0..cin_pg {
                            let xv = x[pix + grp * cin_pg + ci];
                            if xv == T::ZERO {
                                continue;
                            }
                            let krow = kbase + ci * cout + grp * cout_pg;
                            for co in 0..cout_pg {
                                opix[grp * cout_pg + co] += xv * kernel[krow + co];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn softmax_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, bool)> {
    match (shape, axis) {
        ([n], 0) => Ok((1, *n, true)),
        ([r, c], 1) => Ok((*r, *c, true)),
        ([r, c], 0) => Ok((*c, *r, false)),
        _ => Err(Error::Dimension(format!(
            "softmax axis {axis} invalid for shape {shape:?}"
        ))),
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn log_sigmoid_stable<T: Scalar>(x: T) -> T {
    // -softplus(-x) = min(x, 0) - ln(1 + exp(-|x|))
    x.mins(T::ZERO) - (-x.abs()).exp().ln_1p()
}

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

fn gelu_tanh_deriv<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * k * x * x)
}

/// Coordinate mapping for bilinear resampling with half-pixel centers and
/// edge clamping. Returns (low index, high index, fractional weight).
fn interp_coords(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = ((out_idx as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5)
        .clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape: Tape<f64> = Tape::new();
        let i = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.constant(t2(&[vec![2.0, 3.0], vec![4.0, 5.0]]));
        let out = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 3.0, 4.0, 5.0]);

        // Hand multiplication oracle: [[1,2]] x [[3],[4]] = [[11]].
        let a = tape.constant(t2(&[vec![1.0, 2.0]]));
        let c = tape.constant(t2(&[vec![3.0], vec![4.0]]));
        let out = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);

        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let out = tape.matmul(z, b).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(crate::error::Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let out = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 0.5]);

        let b = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let out = tape.softmax(b, 0).unwrap();
        let v = tape.value(out).data();
        assert!(v[0] > 0.999_999 && v[0].is_finite());
        assert!(v[1] < 1e-6);

        // Closed-form oracle: softmax([ln 1, ln 3]) = [1/4, 3/4].
        let c = tape.constant(Tensor::new(vec![2], vec![0.0, 3.0f64.ln()]).unwrap());
        let out = tape.softmax(c, 0).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::seed_from(31);
        let mut tape: Tape<f64> = Tape::new();
        let data: Vec<f64> = (0..20).map(|_| rng.range_f64(-2.0, 2.0)).collect();
        let a = tape.constant(Tensor::new(vec![4, 5], data).unwrap());
        let out = tape.softmax(a, 1).unwrap();
        let v = tape.value(out).data();
        for r in 0..4 {
            let s: f64 = v[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = Rng::seed_from(37);
        let mut tape: Tape<f64> = Tape::new();
        let d = 16;
        let data: Vec<f64> = (0..4 * d).map(|_| rng.range_f64(-2.0, 2.0)).collect();
        let x = tape.constant(Tensor::new(vec![4, d], data).unwrap());
        let gain = tape.constant(Tensor::full(vec![d], 1.0));
        let bias = tape.constant(Tensor::zeros(vec![d]));
        let out = tape.layer_norm(x, gain, bias).unwrap();
        let v = tape.value(out).data();
        for r in 0..4 {
            let row = &v[r * d..(r + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() <= 1e-6, "row mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "row var {var}");
        }
    }

    #[test]
    fn pointwise_trivia() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);

        let b = tape.constant(Tensor::scalar(-50.0));
        let ls = tape.log_sigmoid(b).unwrap();
        let v = tape.value(ls).data()[0];
        assert!(v.is_finite());
        assert!((v + 50.0).abs() < 1e-9);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut rng = Rng::seed_from(41);
        let mut tape: Tape<f64> = Tape::new();
        let c = 3;
        let data: Vec<f64> = (0..5 * 4 * c).map(|_| rng.uniform()).collect();
        let x = tape.constant(Tensor::new(vec![5, 4, c], data.clone()).unwrap());
        // 1x1 identity kernel: out[ch] = sum_ci x[ci] * I[ci][ch].
        let mut kdata = vec![0.0; c * c];
        for i in 0..c {
            kdata[i * c + i] = 1.0;
        }
        let k = tape.constant(Tensor::new(vec![1, 1, c, c], kdata).unwrap());
        let out = tape.conv2d(x, k, 1, 0, 1).unwrap();
        assert_eq!(tape.value(out).data(), &data[..]);
    }

    #[test]
    fn interpolate_trivia_and_hand_case() {
        let mut tape: Tape<f64> = Tape::new();
        // Constant map stays constant at any size.
        let c = tape.constant(Tensor::full(vec![2, 2, 1], 0.7));
        let out = tape.interpolate_bilinear(c, 5, 3).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

        // Hand evaluation of the half-pixel convention:
        // rows of [[0,1],[0,1]] upsampled to 2x4 -> [0, 0.25, 0.75, 1].
        let m = tape.constant(Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let out = tape.interpolate_bilinear(m, 2, 4).unwrap();
        let v = tape.value(out).data();
        for row in 0..2 {
            let r = &v[row * 4..(row + 1) * 4];
            assert!((r[0] - 0.0).abs() < 1e-12);
            assert!((r[1] - 0.25).abs() < 1e-12);
            assert!((r[2] - 0.75).abs() < 1e-12);
            assert!((r[3] - 1.0).abs() < 1e-12);
        }

        // Same-size resample is the identity.
        let mut rng = Rng::seed_from(43);
        let data: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        let x = tape.constant(Tensor::new(vec![3, 4, 1], data.clone()).unwrap());
        let out = tape.interpolate_bilinear(x, 3, 4).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut rng = Rng::seed_from(47);
            let mut tape: Tape<f32> = Tape::new();
            let data: Vec<f32> = (0..24).map(|_| rng.range_f64(-1.0, 1.0) as f32).collect();
            let x = tape.leaf(Tensor::new(vec![4, 6], data).unwrap());
            let g = tape.leaf(Tensor::full(vec![6], 1.0f32));
            let b = tape.leaf(Tensor::zeros(vec![6]));
            let ln = tape.layer_norm(x, g, b).unwrap();
            let sm = tape.softmax(ln, 1).unwrap();
            let s = tape.sum(sm).unwrap();
            tape.backward(s).unwrap();
            (
                tape.value(sm).data().to_vec(),
                tape.grad(x).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    // ── finite-difference checks for every primitive ────────────────────

    /// Builds a scalar loss from a single input tensor via `build`, then
    /// verifies tape gradients against central differences.
    fn check_unary<F>(shape: Vec<usize>, lo: f64, hi: f64, seed: u64, build: F)
    where
        F: Fn(&mut Tape<f64>, TensorId) -> TensorId,
    {
        let mut rng = Rng::seed_from(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.range_f64(lo, hi)).collect();
        let param = Tensor::new(shape, data).unwrap();

        let eval = |params: &[Tensor<f64>]| -> crate::error::Result<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(params[0].clone());
            let loss = build(&mut tape, x);
            tape.value(loss).item()
        };

        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(param.clone());
        let loss = build(&mut tape, x);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();

        let report = grad_check(eval, &[param], &[analytic], 1e-5, usize::MAX).unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    /// Mixes the input through a non-symmetric weighting so reductions do not
    /// hide sign errors.
    fn spread(tape: &mut Tape<f64>, x: TensorId) -> TensorId {
        let n = tape.value(x).numel();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
        let shape = tape.value(x).shape().to_vec();
        let wt = tape.constant(Tensor::new(shape, w).unwrap());
        let m = tape.mul(x, wt).unwrap();
        tape.sum(m).unwrap()
    }

    #[test]
    fn grad_matmul() {
        check_unary(vec![3, 4], -2.0, 2.0, 101, |tape, x| {
            let mut rng = Rng::seed_from(1000);
            let bdata: Vec<f64> = (0..4 * 2).map(|_| rng.range_f64(-1.0, 1.0)).collect();
            let b = tape.leaf(Tensor::new(vec![4, 2], bdata).unwrap());
            let mm = tape.matmul(x, b).unwrap();
            spread(tape, mm)
        });
        // and w.r.t. the right operand
        check_unary(vec![4, 2], -2.0, 2.0, 102, |tape, x| {
            let mut rng = Rng::seed_from(1001);
            let adata: Vec<f64> = (0..3 * 4).map(|_| rng.range_f64(-1.0, 1.0)).collect();
            let a = tape.leaf(Tensor::new(vec![3, 4], adata).unwrap());
            let mm = tape.matmul(a, x).unwrap();
            spread(tape, mm)
        });
    }

    #[test]
    fn grad_elementwise_ops() {
        check_unary(vec![3, 3], -2.0, 2.0, 103, |tape, x| {
            let y = tape.gelu(x).unwrap();
            spread(tape, y)
        });
        check_unary(vec![7], -2.0, 2.0, 104, |tape, x| {
            let y = tape.sigmoid(x).unwrap();
            spread(tape, y)
        });
        check_unary(vec![7], -2.0, 2.0, 105, |tape, x| {
            let y = tape.log_sigmoid(x).unwrap();
            spread(tape, y)
        });
        check_unary(vec![5], -1.5, 1.5, 106, |tape, x| {
            let y = tape.exp(x).unwrap();
            spread(tape, y)
        });
        check_unary(vec![6], -2.0, 2.0, 107, |tape, x| {
            let y = tape.scale(x, -1.7).unwrap();
            let y = tape.add_const(y, 0.3).unwrap();
            spread(tape, y)
        });
    }

    #[test]
    fn grad_softmax_and_layernorm() {
        check_unary(vec![3, 5], -2.0, 2.0, 108, |tape, x| {
            let y = tape.softmax(x, 1).unwrap();
            spread(tape, y)
        });
        check_unary(vec![3, 5], -2.0, 2.0, 109, |tape, x| {
            let y = tape.softmax(x, 0).unwrap();
            spread(tape, y)
        });
        check_unary(vec![4, 6], -2.0, 2.0, 110, |tape, x| {
            let mut rng = Rng::seed_from(1002);
            let g: Vec<f64> = (0..6).map(|_| rng.range_f64(0.5, 1.5)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.range_f64(-0.5, 0.5)).collect();
            let gain = tape.leaf(Tensor::new(vec![6], g).unwrap());
            let bias = tape.leaf(Tensor::new(vec![6], b).unwrap());
            let y = tape.layer_norm(x, gain, bias).unwrap();
            spread(tape, y)
        });
        // gain and bias gradients
        check_unary(vec![6], 0.5, 1.5, 111, |tape, gain| {
            let mut rng = Rng::seed_from(1003);
            let xd: Vec<f64> = (0..24).map(|_| rng.range_f64(-2.0, 2.0)).collect();
            let x = tape.leaf(Tensor::new(vec![4, 6], xd).unwrap());
            let bias = tape.leaf(Tensor::zeros(vec![6]));
            let y = tape.layer_norm(x, gain, bias).unwrap();
            spread(tape, y)
        });
    }

    #[test]
    fn grad_conv_and_pool() {
        check_unary(vec![5, 5, 2], -1.0, 1.0, 112, |tape, x| {
            let mut rng = Rng::seed_from(1004);
            let kd: Vec<f64> = (0..3 * 3 * 2 * 3).map(|_| rng.range_f64(-0.5, 0.5)).collect();
            let k = tape.leaf(Tensor::new(vec![3, 3, 2, 3], kd).unwrap());
            let y = tape.conv2d(x, k, 2, 1, 1).unwrap();
            spread(tape, y)
        });
        // kernel gradient, grouped (depthwise) path
        check_unary(vec![3, 3, 1, 4], -0.5, 0.5, 113, |tape, k| {
            let mut rng = Rng::seed_from(1005);
            let xd: Vec<f64> = (0..6 * 6 * 4).map(|_| rng.range_f64(-1.0, 1.0)).collect();
            let x = tape.leaf(Tensor::new(vec![6, 6, 4], xd).unwrap());
            let y = tape.conv2d(x, k, 1, 1, 4).unwrap();
            spread(tape, y)
        });
        check_unary(vec![4, 6, 3], -1.0, 1.0, 114, |tape, x| {
            let y = tape.avg_pool2(x).unwrap();
            spread(tape, y)
        });
        // Pointwise (1x1) path, input and kernel sides.
        check_unary(vec![4, 4, 3], -1.0, 1.0, 130, |tape, x| {
            let mut rng = Rng::seed_from(1008);
            let kd: Vec<f64> = (0..3 * 5).map(|_| rng.range_f64(-0.5, 0.5)).collect();
            let k = tape.leaf(Tensor::new(vec![1, 1, 3, 5], kd).unwrap());
            let y = tape.conv2d(x, k, 1, 0, 1).unwrap();
            spread(tape, y)
        });
        check_unary(vec![1, 1, 3, 5], -0.5, 0.5, 131, |tape, k| {
            let mut rng = Rng::seed_from(1009);
            let xd: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.range_f64(-1.0, 1.0)).collect();
            let x = tape.leaf(Tensor::new(vec![4, 4, 3], xd).unwrap());
            let y = tape.conv2d(x, k, 1, 0, 1).unwrap();
            spread(tape, y)
        });
    }

    #[test]
    fn grad_structural_ops() {
        check_unary(vec![5, 3], -2.0, 2.0, 115, |tape, x| {
            let t = tape.transpose(x).unwrap();
            let g = tape.gather_rows(t, &[2, 0, 2]).unwrap();
            let s = tape.slice_cols(g, 1, 4).unwrap();
            spread(tape, s)
        });
        check_unary(vec![4, 3], -2.0, 2.0, 116, |tape, x| {
            let a = tape.slice_cols(x, 0, 2).unwrap();
            let b = tape.slice_cols(x, 1, 3).unwrap();
            let cat = tape.concat_cols(&[a, b]).unwrap();
            let rows = tape.concat_rows(&[cat, cat]).unwrap();
            spread(tape, rows)
        });
        check_unary(vec![3, 4, 2], -2.0, 2.0, 117, |tape, x| {
            let y = tape.interpolate_bilinear(x, 5, 7).unwrap();
            spread(tape, y)
        });
        check_unary(vec![2, 6], -2.0, 2.0, 118, |tape, x| {
            let y = tape.reshape(x, vec![3, 4]).unwrap();
            spread(tape, y)
        });
    }

    #[test]
    fn grad_normalize_and_scalar_ops() {
        check_unary(vec![3, 4], 0.3, 2.0, 119, |tape, x| {
            let y = tape.normalize_rows(x).unwrap();
            spread(tape, y)
        });
        check_unary(vec![1], 0.5, 2.0, 120, |tape, s| {
            let mut rng = Rng::seed_from(1006);
            let ad: Vec<f64> = (0..8).map(|_| rng.range_f64(-1.0, 1.0)).collect();
            let a = tape.leaf(Tensor::new(vec![2, 4], ad).unwrap());
            let m = tape.mul_scalar_t(a, s).unwrap();
            let m = tape.add_scalar_t(m, s).unwrap();
            spread(tape, m)
        });
        check_unary(vec![1], 0.5, 2.0, 121, |tape, den| {
            let num = tape.leaf(Tensor::scalar(1.3));
            tape.div_scalars(num, den).unwrap()
        });
        check_unary(vec![2, 3], -1.0, 1.0, 122, |tape, x| {
            let mut rng = Rng::seed_from(1007);
            let bd: Vec<f64> = (0..6).map(|_| rng.range_f64(-1.0, 1.0)).collect();
            let b = tape.leaf(Tensor::new(vec![2, 3], bd).unwrap());
            let s = tape.sub(x, b).unwrap();
            let a = tape.add(s, x).unwrap();
            let m = tape.mul(a, b).unwrap();
            let bias = tape.leaf(Tensor::new(vec![3], vec![0.1, -0.2, 0.4]).unwrap());
            let ab = tape.add_bias(m, bias).unwrap();
            spread(tape, ab)
        });
    }

    #[test]
    fn grad_losses() {
        check_unary(vec![3, 3], 0.15, 0.85, 123, |tape, p| {
            let tdata = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0];
            let t = tape.constant(Tensor::new(vec![3, 3], tdata).unwrap());
            tape.bce_mean(p, t).unwrap()
        });
        check_unary(vec![3, 3], 0.1, 0.9, 124, |tape, p| {
            let tdata = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0];
            let t = tape.constant(Tensor::new(vec![3, 3], tdata).unwrap());
            tape.dice(p, t, 1.0).unwrap()
        });
    }

    #[test]
    fn masked_softmax_ignores_masked_entries_exactly() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 4], vec![0.3, 1.2, -0.5, 0.9]).unwrap());
        let mask = tape.constant(
            Tensor::new(vec![1, 4], vec![0.0, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]).unwrap(),
        );
        let masked = tape.add(logits, mask).unwrap();
        let sm = tape.softmax(masked, 1).unwrap();
        let v = tape.value(sm).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    }
}
