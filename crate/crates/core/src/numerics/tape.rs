//! Reverse-mode differentiation over a recorded computation graph.
//!
//! Every operation appends a record during the forward pass; `backward`
//! replays the records in reverse, accumulating vector-Jacobian products.
//! All arithmetic runs in f64 with fixed row-major loop order, so repeated
//! runs over identical inputs are bit-reproducible.

use super::param::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value held by the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// Tape leaves bound to a [`ParamSet`], one [`ValueId`] per parameter.
pub struct Binding {
    ids: Vec<ValueId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> ValueId {
        self.ids[p.0]
    }
}

#[derive(Debug)]
enum Op {
    /// out = a @ b
    MatMul { a: ValueId, b: ValueId },
    /// out = a @ b^T
    MatMulNT { a: ValueId, b: ValueId },
    /// out = a + b (same shape)
    Add { a: ValueId, b: ValueId },
    /// out[i, :] = a[i, :] + bias
    AddBias { a: ValueId, bias: ValueId },
    /// out = a ⊙ b
    Mul { a: ValueId, b: ValueId },
    /// out = c · a
    Scale { a: ValueId, c: f64 },
    /// per-row softmax with max subtraction
    SoftmaxRows { a: ValueId },
    /// per-row standardization, then gain/bias
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    },
    Gelu { a: ValueId },
    Relu { a: ValueId },
    Tanh { a: ValueId },
    /// rows of the parts stacked top to bottom
    ConcatRows { parts: Vec<ValueId> },
    /// columns of the parts laid side by side
    ConcatCols { parts: Vec<ValueId> },
    /// out = a[:, start..start+width]
    SliceCols {
        a: ValueId,
        start: usize,
        width: usize,
    },
    /// out[i, :] = table[indices[i], :]
    GatherRows {
        table: ValueId,
        indices: Vec<usize>,
    },
    /// mean over rows where mask is true → [1 × d]
    MaskedMeanRows { x: ValueId, mask: Vec<bool> },
    /// mean over batch of −log softmax(z)[label]
    CrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
    },
    /// mean over samples of the radius miss, weighted by side:
    /// outside_weight·(d − Δ) when d > Δ, inside_weight·(Δ − d) otherwise,
    /// with Δ = softplus(raw[label]); distances are constants, gradient
    /// flows to the raw radii only
    BoundaryPenalty {
        raw_radii: ValueId,
        distances: Vec<f64>,
        labels: Vec<usize>,
        outside_weight: f64,
        inside_weight: f64,
    },
    /// sum of all entries → scalar
    SumAll { a: ValueId },
}

struct OpRecord {
    op: Op,
    out: ValueId,
}

/// Recorded computation graph.
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    ops: Vec<OpRecord>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Register a constant leaf.
    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        let id = ValueId(self.values.len());
        self.values.push(t);
        self.grads.push(None);
        id
    }

    /// Register every parameter of `params` as a leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Binding {
        let ids = params
            .iter()
            .map(|(_, p)| self.leaf(p.value.clone()))
            .collect();
        Binding { ids }
    }

    /// Add the tape gradients of every trainable bound parameter into
    /// `ParamSet` gradient accumulators.
    pub fn absorb_grads(&self, binding: &Binding, params: &mut ParamSet) {
        for (pid, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = &self.grads[binding.id(pid).0] {
                for (acc, gi) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += gi;
                }
            }
        }
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Scalar value of a single-element tensor.
    pub fn scalar_value(&self, id: ValueId) -> f64 {
        debug_assert_eq!(self.values[id.0].numel(), 1);
        self.values[id.0].data()[0]
    }

    fn push(&mut self, op: Op, out: Tensor) -> ValueId {
        debug_assert!(out.is_finite(), "non-finite op output");
        let id = ValueId(self.values.len());
        self.values.push(out);
        self.grads.push(None);
        self.ops.push(OpRecord { op, out: id });
        id
    }

    fn shape2(&self, id: ValueId) -> (usize, usize) {
        let t = &self.values[id.0];
        (t.rows(), t.cols())
    }

    // ── op builders ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents disagree: {m}x{k} vs {k2}x{n}"
            )));
        }
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += av[i * k + l] * bv[l * n + j];
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        Ok(self.push(Op::MatMul { a, b }, out))
    }

    /// a[m×k] @ b[n×k]ᵀ → [m×n]
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.shape2(a);
        let (n, k2) = self.shape2(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner extents disagree: {m}x{k} vs {n}x{k2}"
            )));
        }
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += av[i * k + l] * bv[j * k + l];
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        Ok(self.push(Op::MatMulNT { a, b }, out))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let out_data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.values[a.0].shape().to_vec(), out_data)?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    /// Broadcast a 1-D bias over the rows of `a`.
    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (m, n) = self.shape2(a);
        let bt = &self.values[bias.0];
        if bt.shape().len() != 1 || bt.numel() != n {
            return Err(Error::Dimension(format!(
                "bias shape {:?} incompatible with {m}x{n}",
                bt.shape()
            )));
        }
        let av = self.values[a.0].data();
        let bv = self.values[bias.0].data();
        let mut out = Tensor::zeros(self.values[a.0].shape().to_vec());
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] = av[i * n + j] + bv[j];
            }
        }
        Ok(self.push(Op::AddBias { a, bias }, out))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Dimension("mul shape mismatch".into()));
        }
        let out_data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.values[a.0].shape().to_vec(), out_data)?;
        Ok(self.push(Op::Mul { a, b }, out))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let out_data: Vec<f64> = self.values[a.0].data().iter().map(|x| c * x).collect();
        let out = Tensor::from_vec(self.values[a.0].shape().to_vec(), out_data)
            .expect("scale preserves shape");
        self.push(Op::Scale { a, c }, out)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let t = &self.values[a.0];
        if t.shape().len() > 2 {
            return Err(Error::Dimension(
                "softmax_rows expects a 1-D or 2-D tensor".into(),
            ));
        }
        let (m, n) = (t.rows(), t.cols());
        let av = t.data();
        let mut out = Tensor::zeros(t.shape().to_vec());
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out.data_mut()[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out.data_mut()[i * n + j] /= denom;
            }
        }
        Ok(self.push(Op::SoftmaxRows { a }, out))
    }

    /// Row-wise standardization (population variance, eps inside the sqrt),
    /// then elementwise gain and bias.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = self.shape2(x);
        if self.values[gain.0].numel() != n || self.values[bias.0].numel() != n {
            return Err(Error::Dimension(
                "layer_norm gain/bias extent must match row width".into(),
            ));
        }
        let xv = self.values[x.0].data();
        let gv = self.values[gain.0].data();
        let bv = self.values[bias.0].data();
        let mut out = Tensor::zeros(self.values[x.0].shape().to_vec());
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out.data_mut()[i * n + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, out))
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let out_data: Vec<f64> = self.values[a.0].data().iter().map(|&x| gelu(x)).collect();
        let out =
            Tensor::from_vec(self.values[a.0].shape().to_vec(), out_data).expect("gelu shape");
        self.push(Op::Gelu { a }, out)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let out_data: Vec<f64> = self.values[a.0].data().iter().map(|x| x.max(0.0)).collect();
        let out =
            Tensor::from_vec(self.values[a.0].shape().to_vec(), out_data).expect("relu shape");
        self.push(Op::Relu { a }, out)
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let out_data: Vec<f64> = self.values[a.0].data().iter().map(|x| x.tanh()).collect();
        let out =
            Tensor::from_vec(self.values[a.0].shape().to_vec(), out_data).expect("tanh shape");
        self.push(Op::Tanh { a }, out)
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows needs at least one part".into()));
        }
        let cols = self.shape2(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape2(p);
            if c != cols {
                return Err(Error::Dimension("concat_rows column mismatch".into()));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.values[p.0].data());
        }
        let out = Tensor::from_vec(vec![rows, cols], data)?;
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols needs at least one part".into()));
        }
        let rows = self.shape2(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape2(p);
            if r != rows {
                return Err(Error::Dimension("concat_cols row mismatch".into()));
            }
            cols += c;
        }
        let mut out = Tensor::zeros(vec![rows, cols]);
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.shape2(p);
            let pv = self.values[p.0].data();
            for i in 0..rows {
                for j in 0..c {
                    out.data_mut()[i * cols + offset + j] = pv[i * c + j];
                }
            }
            offset += c;
        }
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, width: usize) -> Result<ValueId> {
        let (m, n) = self.shape2(a);
        if width == 0 || start + width > n {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {start}+{width}) out of range for width {n}"
            )));
        }
        let av = self.values[a.0].data();
        let mut out = Tensor::zeros(vec![m, width]);
        for i in 0..m {
            for j in 0..width {
                out.data_mut()[i * width + j] = av[i * n + start + j];
            }
        }
        Ok(self.push(Op::SliceCols { a, start, width }, out))
    }

    pub fn gather_rows(&mut self, table: ValueId, indices: &[usize]) -> Result<ValueId> {
        let (v, d) = self.shape2(table);
        if indices.is_empty() {
            return Err(Error::Dimension("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Vocab {
                id: bad,
                vocab_size: v,
            });
        }
        let tv = self.values[table.0].data();
        let mut out = Tensor::zeros(vec![indices.len(), d]);
        for (i, &idx) in indices.iter().enumerate() {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&tv[idx * d..(idx + 1) * d]);
        }
        Ok(self.push(
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            out,
        ))
    }

    /// Arithmetic mean over the rows where `mask` is true; output is 1×d.
    pub fn masked_mean_rows(&mut self, x: ValueId, mask: &[bool]) -> Result<ValueId> {
        let (m, d) = self.shape2(x);
        if mask.len() != m {
            return Err(Error::Dimension(format!(
                "mask length {} does not match {m} rows",
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::Pooling);
        }
        let xv = self.values[x.0].data();
        let mut out = Tensor::zeros(vec![1, d]);
        for i in 0..m {
            if mask[i] {
                for j in 0..d {
                    out.data_mut()[j] += xv[i * d + j];
                }
            }
        }
        for j in 0..d {
            out.data_mut()[j] /= count as f64;
        }
        Ok(self.push(
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
            },
            out,
        ))
    }

    /// Mean over the batch of −log softmax(logits)[label].
    pub fn cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (m, k) = self.shape2(logits);
        if labels.len() != m {
            return Err(Error::Dimension(format!(
                "{} labels for {m} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label {
                label: bad,
                num_classes: k,
            });
        }
        let lv = self.values[logits.0].data();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let out = Tensor::scalar(total / m as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            out,
        ))
    }

    /// Mean over samples of the weighted radius miss: outside_weight·(d − Δ)
    /// for samples beyond their class radius, inside_weight·(Δ − d) inside,
    /// with Δ = softplus(raw_radii[label]). Equal weights give the plain
    /// mean absolute miss.
    ///
    /// Distances are fixed inputs; the gradient reaches the raw radii only.
    pub fn boundary_penalty(
        &mut self,
        raw_radii: ValueId,
        distances: &[f64],
        labels: &[usize],
        outside_weight: f64,
        inside_weight: f64,
    ) -> Result<ValueId> {
        let k = self.values[raw_radii.0].numel();
        if distances.len() != labels.len() || distances.is_empty() {
            return Err(Error::Dimension(
                "boundary_penalty needs matching non-empty distances and labels".into(),
            ));
        }
        if outside_weight <= 0.0 || inside_weight <= 0.0 {
            return Err(Error::Config(
                "boundary_penalty weights must be positive".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label {
                label: bad,
                num_classes: k,
            });
        }
        let rv = self.values[raw_radii.0].data();
        let mut total = 0.0;
        for (&d, &y) in distances.iter().zip(labels) {
            let miss = d - softplus(rv[y]);
            total += if miss > 0.0 {
                outside_weight * miss
            } else {
                inside_weight * (-miss)
            };
        }
        let out = Tensor::scalar(total / distances.len() as f64);
        Ok(self.push(
            Op::BoundaryPenalty {
                raw_radii,
                distances: distances.to_vec(),
                labels: labels.to_vec(),
                outside_weight,
                inside_weight,
            },
            out,
        ))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.values[a.0].data().iter().sum();
        self.push(Op::SumAll { a }, Tensor::scalar(s))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: ValueId, contribution: &Tensor) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (acc, c) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *acc += c;
                }
            }
            None => self.grads[id.0] = Some(contribution.clone()),
        }
    }

    /// Replay all recorded ops in reverse, seeding the scalar `loss` with 1.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Dimension(
                "backward seeds a scalar; loss has more than one element".into(),
            ));
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..self.ops.len()).rev() {
            let out = self.ops[idx].out;
            let Some(go) = self.grads[out.0].clone() else {
                continue;
            };
            // split borrows: values are read-only during backward
            let op = &self.ops[idx].op;
            match op {
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.shape2(a);
                    let n = self.shape2(b).1;
                    let av = self.values[a.0].data();
                    let bv = self.values[b.0].data();
                    let gov = go.data();
                    let mut da = Tensor::zeros(vec![m, k]);
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gov[i * n + j] * bv[l * n + j];
                            }
                            da.data_mut()[i * k + l] = acc;
                        }
                    }
                    let mut db = Tensor::zeros(vec![k, n]);
                    for l in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + l] * gov[i * n + j];
                            }
                            db.data_mut()[l * n + j] = acc;
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MatMulNT { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.shape2(a);
                    let n = self.shape2(b).0;
                    let av = self.values[a.0].data();
                    let bv = self.values[b.0].data();
                    let gov = go.data();
                    let mut da = Tensor::zeros(vec![m, k]);
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gov[i * n + j] * bv[j * k + l];
                            }
                            da.data_mut()[i * k + l] = acc;
                        }
                    }
                    let mut db = Tensor::zeros(vec![n, k]);
                    for j in 0..n {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += gov[i * n + j] * av[i * k + l];
                            }
                            db.data_mut()[j * k + l] = acc;
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &go);
                    self.accumulate(b, &go);
                }
                Op::AddBias { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    let (m, n) = self.shape2(a);
                    let gov = go.data();
                    let mut db = Tensor::zeros(vec![n]);
                    for i in 0..m {
                        for j in 0..n {
                            db.data_mut()[j] += gov[i * n + j];
                        }
                    }
                    self.accumulate(a, &go);
                    self.accumulate(bias, &db);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da_data: Vec<f64> = go
                        .data()
                        .iter()
                        .zip(self.values[b.0].data())
                        .map(|(g, y)| g * y)
                        .collect();
                    let db_data: Vec<f64> = go
                        .data()
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(g, x)| g * x)
                        .collect();
                    let shape = self.values[a.0].shape().to_vec();
                    let da = Tensor::from_vec(shape.clone(), da_data).expect("mul grad shape");
                    let db = Tensor::from_vec(shape, db_data).expect("mul grad shape");
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    let da_data: Vec<f64> = go.data().iter().map(|g| c * g).collect();
                    let da = Tensor::from_vec(self.values[a.0].shape().to_vec(), da_data)
                        .expect("scale grad shape");
                    self.accumulate(a, &da);
                }
                Op::SoftmaxRows { a } => {
                    let a = *a;
                    let (m, n) = self.shape2(out);
                    let yv = self.values[out.0].data();
                    let gov = go.data();
                    let mut da = Tensor::zeros(self.values[a.0].shape().to_vec());
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += gov[i * n + j] * yv[i * n + j];
                        }
                        for j in 0..n {
                            da.data_mut()[i * n + j] = yv[i * n + j] * (gov[i * n + j] - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                    let (m, n) = self.shape2(x);
                    let xv = self.values[x.0].data();
                    let gv = self.values[gain.0].data();
                    let gov = go.data();
                    let mut dx = Tensor::zeros(vec![m, n]);
                    let mut dgain = Tensor::zeros(vec![n]);
                    let mut dbias = Tensor::zeros(vec![n]);
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv_std;
                            let g = gov[i * n + j];
                            let dxhat = g * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgain.data_mut()[j] += g * xhat;
                            dbias.data_mut()[j] += g;
                        }
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = gov[i * n + j] * gv[j];
                            dx.data_mut()[i * n + j] = inv_std
                                * (dxhat
                                    - sum_dxhat / n as f64
                                    - xhat * sum_dxhat_xhat / n as f64);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gain, &dgain);
                    self.accumulate(bias, &dbias);
                }
                Op::Gelu { a } => {
                    let a = *a;
                    let da_data: Vec<f64> = go
                        .data()
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(g, &x)| g * gelu_deriv(x))
                        .collect();
                    let da = Tensor::from_vec(self.values[a.0].shape().to_vec(), da_data)
                        .expect("gelu grad shape");
                    self.accumulate(a, &da);
                }
                Op::Relu { a } => {
                    let a = *a;
                    let da_data: Vec<f64> = go
                        .data()
                        .iter()
                        .zip(self.values[a.0].data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    let da = Tensor::from_vec(self.values[a.0].shape().to_vec(), da_data)
                        .expect("relu grad shape");
                    self.accumulate(a, &da);
                }
                Op::Tanh { a } => {
                    let a = *a;
                    let da_data: Vec<f64> = go
                        .data()
                        .iter()
                        .zip(self.values[out.0].data())
                        .map(|(g, &y)| g * (1.0 - y * y))
                        .collect();
                    let da = Tensor::from_vec(self.values[a.0].shape().to_vec(), da_data)
                        .expect("tanh grad shape");
                    self.accumulate(a, &da);
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let cols = self.shape2(out).1;
                    let gov = go.data();
                    let mut offset = 0;
                    for p in parts {
                        let (r, _) = self.shape2(p);
                        let dp_data = gov[offset * cols..(offset + r) * cols].to_vec();
                        let dp = Tensor::from_vec(vec![r, cols], dp_data)
                            .expect("concat_rows grad shape");
                        self.accumulate(p, &dp);
                        offset += r;
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let (rows, cols) = self.shape2(out);
                    let gov = go.data();
                    let mut offset = 0;
                    for p in parts {
                        let (_, c) = self.shape2(p);
                        let mut dp = Tensor::zeros(vec![rows, c]);
                        for i in 0..rows {
                            for j in 0..c {
                                dp.data_mut()[i * c + j] = gov[i * cols + offset + j];
                            }
                        }
                        self.accumulate(p, &dp);
                        offset += c;
                    }
                }
                Op::SliceCols { a, start, width } => {
                    let (a, start, width) = (*a, *start, *width);
                    let (m, n) = self.shape2(a);
                    let gov = go.data();
                    let mut da = Tensor::zeros(vec![m, n]);
                    for i in 0..m {
                        for j in 0..width {
                            da.data_mut()[i * n + start + j] = gov[i * width + j];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::GatherRows { table, indices } => {
                    let table = *table;
                    let indices = indices.clone();
                    let (v, d) = self.shape2(table);
                    let gov = go.data();
                    let mut dt = Tensor::zeros(vec![v, d]);
                    for (i, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt.data_mut()[idx * d + j] += gov[i * d + j];
                        }
                    }
                    self.accumulate(table, &dt);
                }
                Op::MaskedMeanRows { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    let (m, d) = self.shape2(x);
                    let count = mask.iter().filter(|&&b| b).count() as f64;
                    let gov = go.data();
                    let mut dx = Tensor::zeros(vec![m, d]);
                    for i in 0..m {
                        if mask[i] {
                            for j in 0..d {
                                dx.data_mut()[i * d + j] = gov[j] / count;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::CrossEntropy { logits, labels } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let (m, k) = self.shape2(logits);
                    let lv = self.values[logits.0].data();
                    let g = go.data()[0];
                    let mut dl = Tensor::zeros(vec![m, k]);
                    for (i, &label) in labels.iter().enumerate() {
                        let row = &lv[i * k..(i + 1) * k];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - max).exp() / denom;
                            let indicator = if j == label { 1.0 } else { 0.0 };
                            dl.data_mut()[i * k + j] = g * (p - indicator) / m as f64;
                        }
                    }
                    self.accumulate(logits, &dl);
                }
                Op::BoundaryPenalty {
                    raw_radii,
                    distances,
                    labels,
                    outside_weight,
                    inside_weight,
                } => {
                    let raw_radii = *raw_radii;
                    let (ow, iw) = (*outside_weight, *inside_weight);
                    let distances = distances.clone();
                    let labels = labels.clone();
                    let rv = self.values[raw_radii.0].data();
                    let g = go.data()[0];
                    let n = distances.len() as f64;
                    let mut dr = Tensor::zeros(vec![rv.len()]);
                    for (&d, &y) in distances.iter().zip(&labels) {
                        let miss = d - softplus(rv[y]);
                        // d/dΔ of the weighted miss; zero exactly on the boundary
                        let slope = if miss > 0.0 {
                            -ow
                        } else if miss < 0.0 {
                            iw
                        } else {
                            0.0
                        };
                        dr.data_mut()[y] += g * slope * sigmoid(rv[y]) / n;
                    }
                    self.accumulate(raw_radii, &dr);
                }
                Op::SumAll { a } => {
                    let a = *a;
                    let g = go.data()[0];
                    let da = Tensor::filled(self.values[a.0].shape().to_vec(), g);
                    self.accumulate(a, &da);
                }
            }
        }
        Ok(())
    }
}

/// Build a tape over `params`, evaluate the scalar produced by `build`, and
/// (when `with_grad`) run backward and fold gradients into the set.
pub fn scalar_loss<F>(params: &mut ParamSet, with_grad: bool, build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &Binding) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let binding = tape.bind(params);
    let loss = build(&mut tape, &binding)?;
    let value = tape.scalar_value(loss);
    if with_grad {
        tape.backward(loss)?;
        tape.absorb_grads(&binding, params);
    }
    Ok(value)
}
