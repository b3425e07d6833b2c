//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! Ops compute eagerly and append a node per result; `backward` walks the
//! tape in reverse, so each node is visited exactly once and every parent
//! index refers to an earlier node. One graph is single-threaded; distinct
//! graphs are independent.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const GELU_COEF: f64 = 0.044715;
/// Additive mask value for causally-hidden scores. Large enough that the
/// softmax contribution underflows to exactly 0.0, finite so tensors stay
/// NaN/Inf-free.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a[m,k] * b[n,k]^T -> [m,n]
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        padding: usize,
    },
    Rope {
        x: NodeId,
        positions: Vec<usize>,
        rot_dims: usize,
        base: f64,
    },
    CausalMaskAdd(NodeId),
    GatherRows(NodeId, Vec<usize>),
    CrossEntropyMasked {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    SumAll(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_scalar(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let inner = s * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn rope_theta(i: usize, rot_dims: usize, base: f64) -> f64 {
    base.powf(-(2.0 * i as f64) / rot_dims as f64)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf; its `requires_grad` flag (true on fresh
    /// tensors) marks it trainable.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad;
        self.push(Op::Leaf, t, rg)
    }

    /// Insert a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner {k}"),
                format!("inner {k2}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    /// a[m,k] * b[n,k]^T -> [m,n]; keeps weights in row-major [out,in] layout.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("inner {k}"),
                format!("inner {k2}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                out[i * n + j] = s;
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::MatMulNT(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op_name,
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(op, Tensor::new(shape, data)?, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// x[..., d] + b[d], broadcast over leading rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().unwrap();
        let bs = self.value(b).shape();
        if bs != [d] {
            return Err(Error::shape("add_bias", format!("[{d}]"), format!("{bs:?}")));
        }
        let bv = self.value(b).data().to_vec();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % d])
            .collect();
        let rg = self.requires_grad(x) || self.requires_grad(b);
        Ok(self.push(Op::AddBias(x, b), Tensor::new(xs, data)?, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires_grad(a);
        self.push(Op::Scale(a, c), Tensor::new(shape, data).unwrap(), rg)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires_grad(a);
        self.push(Op::Gelu(a), Tensor::new(shape, data).unwrap(), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        let av = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Transpose(a), Tensor::new(vec![c, r], out)?, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    /// Columns [lo, hi) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        if lo >= hi || hi > c {
            return Err(Error::shape(
                "slice_cols",
                format!("0 <= lo < hi <= {c}"),
                format!("lo={lo}, hi={hi}"),
            ));
        }
        let av = self.value(a).data();
        let w = hi - lo;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + lo..i * c + hi]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Op::SliceCols(a, lo, hi),
            Tensor::new(vec![r, w], out)?,
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", ">= 1 part", "0 parts"));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{r} rows"), format!("{pr} rows")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p).data();
                out.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(vec![r, total], out)?,
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", ">= 1 part", "0 parts"));
        }
        let (_, c) = self.value(parts[0]).dims2()?;
        let mut rows = 0usize;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{c} cols"), format!("{pc} cols")));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::new(vec![rows, c], out)?,
            rg,
        ))
    }

    /// Softmax along `axis` of a rank-1 or rank-2 tensor, with max
    /// subtraction for stability.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        match (self.value(a).rank(), axis) {
            (1, 0) => {
                let n = self.value(a).len();
                let wide = self.reshape(a, vec![1, n])?;
                let sm = self.softmax_rows(wide)?;
                self.reshape(sm, vec![n])
            }
            (2, 1) => self.softmax_rows(a),
            (2, 0) => {
                let t = self.transpose(a)?;
                let sm = self.softmax_rows(t)?;
                self.transpose(sm)
            }
            (r, ax) => Err(Error::shape(
                "softmax",
                "axis valid for rank 1 or 2",
                format!("rank {r}, axis {ax}"),
            )),
        }
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        let av = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Op::SoftmaxRows(a), Tensor::new(vec![r, c], out)?, rg))
    }

    /// Layer norm over the last axis: per row, normalize to mean 0 and
    /// variance 1, then apply gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().unwrap();
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias [{d}]"),
                format!(
                    "{:?}/{:?}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let rows = self.value(x).len() / d;
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; rows * d];
        for i in 0..rows {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            Op::LayerNorm { x, gain, bias, eps },
            Tensor::new(shape, out)?,
            rg,
        ))
    }

    /// 1-D convolution over time: x[T, c_in], w[c_out, c_in, k], b[c_out].
    /// Output length T' = floor((T + 2*padding - k)/stride) + 1.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if stride < 1 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        let (t, c_in) = self.value(x).dims2()?;
        let ws = self.value(w).shape().to_vec();
        let (c_out, wc_in, k) = match ws.as_slice() {
            [o, i, k] => (*o, *i, *k),
            s => return Err(Error::shape("conv1d", "kernel rank 3", format!("{s:?}"))),
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("kernel c_in {c_in}"),
                format!("{wc_in}"),
            ));
        }
        if self.value(b).shape() != [c_out] {
            return Err(Error::shape(
                "conv1d",
                format!("bias [{c_out}]"),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let padded = t + 2 * padding;
        if padded < k {
            return Err(Error::InputTooShort(format!(
                "conv1d: T={t} with padding {padding} is shorter than kernel {k}"
            )));
        }
        let t_out = (padded - k) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; t_out * c_out];
        for ti in 0..t_out {
            for o in 0..c_out {
                let mut s = bv[o];
                for ki in 0..k {
                    let src = ti * stride + ki;
                    if src < padding || src - padding >= t {
                        continue;
                    }
                    let xi = src - padding;
                    for c in 0..c_in {
                        s += xv[xi * c_in + c] * wv[(o * c_in + c) * k + ki];
                    }
                }
                out[ti * c_out + o] = s;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            Tensor::new(vec![t_out, c_out], out)?,
            rg,
        ))
    }

    /// Depthwise 1-D convolution, stride 1. With an odd kernel and
    /// padding = (k-1)/2 the sequence length is preserved.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, padding: usize) -> Result<NodeId> {
        let (t, c) = self.value(x).dims2()?;
        let (wc, k) = self.value(w).dims2()?;
        if wc != c {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("kernel channels {c}"),
                format!("{wc}"),
            ));
        }
        if self.value(b).shape() != [c] {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("bias [{c}]"),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let padded = t + 2 * padding;
        if padded < k {
            return Err(Error::InputTooShort(format!(
                "depthwise_conv1d: T={t} with padding {padding} shorter than kernel {k}"
            )));
        }
        let t_out = padded - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; t_out * c];
        for ti in 0..t_out {
            for ch in 0..c {
                let mut s = bv[ch];
                for ki in 0..k {
                    let src = ti + ki;
                    if src < padding || src - padding >= t {
                        continue;
                    }
                    s += xv[(src - padding) * c + ch] * wv[ch * k + ki];
                }
                out[ti * c + ch] = s;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(
            Op::DepthwiseConv1d { x, w, b, padding },
            Tensor::new(vec![t_out, c], out)?,
            rg,
        ))
    }

    /// Rotary position embedding on x[T, head_dim]: the first `rot_dims`
    /// dimensions are rotated in adjacent pairs (2i, 2i+1) with
    /// theta_i = base^(-2i/rot_dims); the trailing dims pass through.
    pub fn rope(&mut self, x: NodeId, positions: &[usize], rot_dims: usize, base: f64) -> Result<NodeId> {
        let (t, d) = self.value(x).dims2()?;
        if rot_dims % 2 != 0 || rot_dims > d {
            return Err(Error::Config(format!(
                "rope: rot_dims {rot_dims} must be even and <= head_dim {d}"
            )));
        }
        if positions.len() != t {
            return Err(Error::shape(
                "rope",
                format!("{t} positions"),
                format!("{}", positions.len()),
            ));
        }
        let xv = self.value(x).data();
        let mut out = xv.to_vec();
        for (ti, &pos) in positions.iter().enumerate() {
            for i in 0..rot_dims / 2 {
                let theta = rope_theta(i, rot_dims, base);
                let ang = pos as f64 * theta;
                let (sin, cos) = ang.sin_cos();
                let u = xv[ti * d + 2 * i];
                let v = xv[ti * d + 2 * i + 1];
                out[ti * d + 2 * i] = u * cos - v * sin;
                out[ti * d + 2 * i + 1] = u * sin + v * cos;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Op::Rope {
                x,
                positions: positions.to_vec(),
                rot_dims,
                base,
            },
            Tensor::new(vec![t, d], out)?,
            rg,
        ))
    }

    /// Additive causal mask on scores[T_q, T_k]: query row i may attend
    /// key columns 0..=i+offset. `offset` is the number of cached keys
    /// preceding the first query.
    pub fn causal_mask_add(&mut self, scores: NodeId, offset: usize) -> Result<NodeId> {
        let (tq, tk) = self.value(scores).dims2()?;
        let sv = self.value(scores).data();
        let mut out = sv.to_vec();
        for i in 0..tq {
            for j in 0..tk {
                if j > i + offset {
                    out[i * tk + j] += MASK_NEG;
                }
            }
        }
        let rg = self.requires_grad(scores);
        Ok(self.push(
            Op::CausalMaskAdd(scores),
            Tensor::new(vec![tq, tk], out)?,
            rg,
        ))
    }

    /// Row-gather: out[i, :] = table[ids[i], :].
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!(
                "gather_rows: id {bad} out of range 0..{rows}"
            )));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Op::GatherRows(table, ids.to_vec()),
            Tensor::new(vec![ids.len(), cols], out)?,
            rg,
        ))
    }

    /// Mean negative log-likelihood over positions with mask = true.
    /// An all-false mask yields exactly 0 with a warning flag returned by
    /// [`Graph::cross_entropy_masked_flagged`].
    pub fn cross_entropy_masked(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        Ok(self.cross_entropy_masked_flagged(logits, targets, mask)?.0)
    }

    pub fn cross_entropy_masked_flagged(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<(NodeId, bool)> {
        let (t, v) = self.value(logits).dims2()?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(
                "cross_entropy_masked",
                format!("targets/mask of length {t}"),
                format!("{}/{}", targets.len(), mask.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Data(format!(
                "cross_entropy_masked: target {bad} out of vocab {v}"
            )));
        }
        let lv = self.value(logits).data();
        let m_count = mask.iter().filter(|&&b| b).count();
        let mut loss = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
        }
        let all_masked = m_count == 0;
        if !all_masked {
            loss /= m_count as f64;
        }
        let rg = self.requires_grad(logits);
        let id = self.push(
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(loss),
            rg,
        );
        Ok((id, all_masked))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), rg)
    }

    // ---- backward ----

    fn accumulate(&mut self, id: NodeId, delta: &Tensor) {
        let node = &mut self.nodes[id.0];
        // Subgraphs that cannot reach a trainable leaf stay grad-free, so
        // frozen parameters and constants never accumulate anything.
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Backpropagate from a scalar root. Visits the tape in reverse once.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar root",
                format!("{:?}", self.value(root).shape()),
            ));
        }
        let root_shape = self.value(root).shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::new(root_shape, vec![1.0])?);
        for idx in (0..=root.0).rev() {
            let Some(grad) = self.nodes[idx].grad.clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    // dA = dC * B^T ; dB = A^T * dC
                    let (m, n) = grad.dims2()?;
                    let k = self.value(a).shape()[1];
                    let bv = self.value(b).data().to_vec();
                    let av = self.value(a).data().to_vec();
                    let g = grad.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * bv[p * n + j];
                            }
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &Tensor::new(vec![m, k], da)?);
                    self.accumulate(b, &Tensor::new(vec![k, n], db)?);
                }
                Op::MatMulNT(a, b) => {
                    // C = A * B^T ; dA = dC * B ; dB = dC^T * A
                    let (m, n) = grad.dims2()?;
                    let k = self.value(a).shape()[1];
                    let bv = self.value(b).data().to_vec();
                    let av = self.value(a).data().to_vec();
                    let g = grad.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &bv[j * k..(j + 1) * k];
                            let darow = &mut da[i * k..(i + 1) * k];
                            for p in 0..k {
                                darow[p] += gij * brow[p];
                            }
                        }
                    }
                    let mut db = vec![0.0; n * k];
                    for j in 0..n {
                        for i in 0..m {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let arow = &av[i * k..(i + 1) * k];
                            let dbrow = &mut db[j * k..(j + 1) * k];
                            for p in 0..k {
                                dbrow[p] += gij * arow[p];
                            }
                        }
                    }
                    self.accumulate(a, &Tensor::new(vec![m, k], da)?);
                    self.accumulate(b, &Tensor::new(vec![n, k], db)?);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &grad);
                    let neg: Vec<f64> = grad.data().iter().map(|&x| -x).collect();
                    self.accumulate(b, &Tensor::new(grad.shape().to_vec(), neg)?);
                }
                Op::Mul(a, b) => {
                    let bv = self.value(b).data().to_vec();
                    let av = self.value(a).data().to_vec();
                    let da: Vec<f64> = grad.data().iter().zip(&bv).map(|(&g, &y)| g * y).collect();
                    let db: Vec<f64> = grad.data().iter().zip(&av).map(|(&g, &x)| g * x).collect();
                    self.accumulate(a, &Tensor::new(grad.shape().to_vec(), da)?);
                    self.accumulate(b, &Tensor::new(grad.shape().to_vec(), db)?);
                }
                Op::AddBias(x, b) => {
                    self.accumulate(x, &grad);
                    let d = self.value(b).len();
                    let mut db = vec![0.0; d];
                    for (i, &g) in grad.data().iter().enumerate() {
                        db[i % d] += g;
                    }
                    self.accumulate(b, &Tensor::new(vec![d], db)?);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = grad.data().iter().map(|&g| g * c).collect();
                    self.accumulate(a, &Tensor::new(grad.shape().to_vec(), da)?);
                }
                Op::Gelu(a) => {
                    let xs = self.value(a).data().to_vec();
                    let da: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(&xs)
                        .map(|(&g, &x)| g * gelu_grad_scalar(x))
                        .collect();
                    self.accumulate(a, &Tensor::new(grad.shape().to_vec(), da)?);
                }
                Op::Transpose(a) => {
                    let (r, c) = grad.dims2()?;
                    let g = grad.data();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] = g[i * c + j];
                        }
                    }
                    self.accumulate(a, &Tensor::new(vec![c, r], da)?);
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let da = Tensor::new(shape, grad.data().to_vec())?;
                    self.accumulate(a, &da);
                }
                Op::SliceCols(a, lo, hi) => {
                    let (r, c) = self.value(a).dims2()?;
                    let g = grad.data();
                    let w = hi - lo;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..w {
                            da[i * c + lo + j] = g[i * w + j];
                        }
                    }
                    self.accumulate(a, &Tensor::new(vec![r, c], da)?);
                }
                Op::ConcatCols(parts) => {
                    let (r, _) = grad.dims2()?;
                    let g = grad.data();
                    let total: usize = grad.shape()[1];
                    let mut off = 0usize;
                    for &p in &parts {
                        let w = self.value(p).shape()[1];
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(p, &Tensor::new(vec![r, w], dp)?);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let g = grad.data();
                    let c = grad.shape()[1];
                    let mut off = 0usize;
                    for &p in &parts {
                        let pr = self.value(p).shape()[0];
                        let dp = g[off * c..(off + pr) * c].to_vec();
                        self.accumulate(p, &Tensor::new(vec![pr, c], dp)?);
                        off += pr;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (r, c) = grad.dims2()?;
                    let y = self.nodes[idx].value.data().to_vec();
                    let g = grad.data();
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let yrow = &y[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..c {
                            da[i * c + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    self.accumulate(a, &Tensor::new(vec![r, c], da)?);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let shape = self.value(x).shape().to_vec();
                    let d = *shape.last().unwrap();
                    let rows = self.value(x).len() / d;
                    let xv = self.value(x).data().to_vec();
                    let gv = self.value(gain).data().to_vec();
                    let g = grad.data();
                    let mut dx = vec![0.0; rows * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for i in 0..rows {
                        let row = &xv[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(&gv).map(|(&gr, &ga)| gr * ga).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                            dx[i * d + j] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &Tensor::new(shape, dx)?);
                    self.accumulate(gain, &Tensor::new(vec![d], dgain)?);
                    self.accumulate(bias, &Tensor::new(vec![d], dbias)?);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (t, c_in) = self.value(x).dims2()?;
                    let ws = self.value(w).shape().to_vec();
                    let (c_out, k) = (ws[0], ws[2]);
                    let (t_out, _) = grad.dims2()?;
                    let xv = self.value(x).data().to_vec();
                    let wv = self.value(w).data().to_vec();
                    let g = grad.data();
                    let mut dx = vec![0.0; t * c_in];
                    let mut dw = vec![0.0; c_out * c_in * k];
                    let mut db = vec![0.0; c_out];
                    for ti in 0..t_out {
                        for o in 0..c_out {
                            let go = g[ti * c_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            db[o] += go;
                            for ki in 0..k {
                                let src = ti * stride + ki;
                                if src < padding || src - padding >= t {
                                    continue;
                                }
                                let xi = src - padding;
                                for c in 0..c_in {
                                    dx[xi * c_in + c] += go * wv[(o * c_in + c) * k + ki];
                                    dw[(o * c_in + c) * k + ki] += go * xv[xi * c_in + c];
                                }
                            }
                        }
                    }
                    self.accumulate(x, &Tensor::new(vec![t, c_in], dx)?);
                    self.accumulate(w, &Tensor::new(vec![c_out, c_in, k], dw)?);
                    self.accumulate(b, &Tensor::new(vec![c_out], db)?);
                }
                Op::DepthwiseConv1d { x, w, b, padding } => {
                    let (t, c) = self.value(x).dims2()?;
                    let (_, k) = self.value(w).dims2()?;
                    let (t_out, _) = grad.dims2()?;
                    let xv = self.value(x).data().to_vec();
                    let wv = self.value(w).data().to_vec();
                    let g = grad.data();
                    let mut dx = vec![0.0; t * c];
                    let mut dw = vec![0.0; c * k];
                    let mut db = vec![0.0; c];
                    for ti in 0..t_out {
                        for ch in 0..c {
                            let go = g[ti * c + ch];
                            if go == 0.0 {
                                continue;
                            }
                            db[ch] += go;
                            for ki in 0..k {
                                let src = ti + ki;
                                if src < padding || src - padding >= t {
                                    continue;
                                }
                                let xi = src - padding;
                                dx[xi * c + ch] += go * wv[ch * k + ki];
                                dw[ch * k + ki] += go * xv[xi * c + ch];
                            }
                        }
                    }
                    self.accumulate(x, &Tensor::new(vec![t, c], dx)?);
                    self.accumulate(w, &Tensor::new(vec![c, k], dw)?);
                    self.accumulate(b, &Tensor::new(vec![c], db)?);
                }
                Op::Rope {
                    x,
                    positions,
                    rot_dims,
                    base,
                } => {
                    // inverse rotation applied to the output gradient
                    let (t, d) = grad.dims2()?;
                    let g = grad.data();
                    let mut dx = g.to_vec();
                    for (ti, &pos) in positions.iter().enumerate() {
                        for i in 0..rot_dims / 2 {
                            let theta = rope_theta(i, rot_dims, base);
                            let ang = pos as f64 * theta;
                            let (sin, cos) = ang.sin_cos();
                            let gu = g[ti * d + 2 * i];
                            let gv = g[ti * d + 2 * i + 1];
                            dx[ti * d + 2 * i] = gu * cos + gv * sin;
                            dx[ti * d + 2 * i + 1] = -gu * sin + gv * cos;
                        }
                    }
                    self.accumulate(x, &Tensor::new(vec![t, d], dx)?);
                }
                Op::CausalMaskAdd(a) => {
                    self.accumulate(a, &grad);
                }
                Op::GatherRows(table, ids) => {
                    let (rows, cols) = self.value(table).dims2()?;
                    let g = grad.data();
                    let mut dt = vec![0.0; rows * cols];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[id * cols + j] += g[i * cols + j];
                        }
                    }
                    self.accumulate(table, &Tensor::new(vec![rows, cols], dt)?);
                }
                Op::CrossEntropyMasked {
                    logits,
                    targets,
                    mask,
                } => {
                    let (t, v) = self.value(logits).dims2()?;
                    let lv = self.value(logits).data().to_vec();
                    let upstream = grad.scalar_value();
                    let m_count = mask.iter().filter(|&&b| b).count();
                    let mut dl = vec![0.0; t * v];
                    if m_count > 0 {
                        let inv = upstream / m_count as f64;
                        for i in 0..t {
                            if !mask[i] {
                                continue;
                            }
                            let row = &lv[i * v..(i + 1) * v];
                            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                            for j in 0..v {
                                let p = (row[j] - mx).exp() / z;
                                dl[i * v + j] =
                                    inv * (p - if j == targets[i] { 1.0 } else { 0.0 });
                            }
                        }
                    }
                    self.accumulate(logits, &Tensor::new(vec![t, v], dl)?);
                }
                Op::SumAll(a) => {
                    let n = self.value(a).len();
                    let shape = self.value(a).shape().to_vec();
                    let g = grad.scalar_value();
                    self.accumulate(a, &Tensor::new(shape, vec![g; n])?);
                }
            }
        }
        Ok(())
    }
}
