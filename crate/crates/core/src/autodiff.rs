//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so the
//! tape is always in topological order and `backward` is a single reverse
//! sweep.

use std::collections::HashMap;

use crate::error::{PhaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape and masking information for fused multi-head attention.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `[batch * k_len]`, `true` where the key may be attended to.
    pub key_mask: Option<Vec<bool>>,
}

/// One `-log softmax` term of a contrastive objective over a score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastTerm {
    pub row: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        inner: usize,
        cols: usize,
        b_transposed: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
    },
    ScatterAddRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    Slice {
        src: Var,
        offset: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanPool {
        hidden: Var,
        mask: Vec<bool>,
        len: usize,
        counts: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        /// Divisor per row and whether it was clamped to the floor.
        norms: Vec<(f64, bool)>,
    },
    Contrastive {
        scores: Var,
        terms: Vec<ContrastTerm>,
        include_positive: bool,
        softmax: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    bound_order: Vec<(ParamId, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Put a registry parameter on the tape. Binding the same id twice
    /// returns the same node so gradients from every use accumulate there.
    pub fn bind(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.bound.insert(id, v);
        self.bound_order.push((id, v));
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound_order.iter().copied()
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// `a · b` with `a: [.., k]` and `b: [k, n]`; leading axes of `a` are
    /// treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `a: [.., k]` and `b: [n, k]` (the usual `x · Wᵀ` of a
    /// linear layer whose weight is stored output-major).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 {
            return Err(PhaError::dim("matmul", &sa, &sb));
        }
        let inner = *sa.last().unwrap();
        let (b_inner, cols) = if b_transposed {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if inner != b_inner {
            return Err(PhaError::dim("matmul", &sa, &sb));
        }
        let rows = self.value(a).numel() / inner;
        let mut out = vec![0.0; rows * cols];
        gemm(
            rows,
            inner,
            cols,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_transposed,
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = cols;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                rows,
                inner,
                cols,
                b_transposed,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(PhaError::dim("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), rg))
    }

    /// Add a `[n]` bias to every row of `x: [.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(PhaError::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, bb)| *v += bb);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(PhaError::dim("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Relu(x), rg)
    }

    /// Row-wise layer normalisation over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(PhaError::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(PhaError::Contract("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean negative log-softmax of the target class over non-ignored rows.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        if targets.len() != rows {
            return Err(PhaError::dim(
                "softmax_cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let mut resolved = Vec::with_capacity(rows);
        for &t in targets {
            if t == ignore_index {
                resolved.push(None);
            } else if t < v {
                resolved.push(Some(t));
            } else {
                return Err(PhaError::Index(format!(
                    "target {t} outside vocabulary of size {v}"
                )));
            }
        }
        let count = resolved.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(PhaError::Degenerate(
                "every position is ignored; cross-entropy undefined".into(),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[r * v + j] = e;
                z += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            if let Some(t) = resolved[r] {
                total += -(row[t] - max - z.ln());
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::SoftmaxCe {
                logits,
                targets: resolved,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention. `q: [batch * q_len, d]`,
    /// `k, v: [batch * k_len, d]`; heads split the feature axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let d = self.value(q).last_dim();
        let AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            causal,
            ..
        } = spec;
        if heads == 0 || d % heads != 0 {
            return Err(PhaError::Contract(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        let q_shape = [batch * q_len, d];
        let kv_shape = [batch * k_len, d];
        let flat = |s: &[usize]| vec![s[..s.len() - 1].iter().product::<usize>(), s[s.len() - 1]];
        if flat(self.shape(q)) != q_shape {
            return Err(PhaError::dim("attention(q)", self.shape(q), &q_shape));
        }
        if flat(self.shape(k)) != kv_shape || flat(self.shape(v)) != kv_shape {
            return Err(PhaError::dim("attention(k/v)", self.shape(k), &kv_shape));
        }
        if let Some(mask) = &spec.key_mask {
            if mask.len() != batch * k_len {
                return Err(PhaError::dim("attention(mask)", &[mask.len()], &[batch, k_len]));
            }
        }
        if causal && q_len > k_len {
            return Err(PhaError::dim("attention(causal)", &[q_len], &[k_len]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        let mut out = vec![0.0; batch * q_len * d];
        let mut scores = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..q_len {
                    let qrow = &qv[(b * q_len + i) * d + col..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    let mut any = false;
                    for j in 0..k_len {
                        let allowed = (!causal || j <= i)
                            && spec.key_mask.as_ref().map_or(true, |m| m[b * k_len + j]);
                        if allowed {
                            let krow = &kv[(b * k_len + j) * d + col..][..dh];
                            let s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                            any = true;
                        } else {
                            scores[j] = f64::NEG_INFINITY;
                        }
                    }
                    if !any {
                        return Err(PhaError::Degenerate(format!(
                            "attention row {i} of batch {b} has no admissible key"
                        )));
                    }
                    let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let mut z = 0.0;
                    for j in 0..k_len {
                        let e = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        p[j] = e;
                        z += e;
                    }
                    let orow = &mut out[(b * q_len + i) * d + col..][..dh];
                    for j in 0..k_len {
                        p[j] /= z;
                        if p[j] != 0.0 {
                            let vrow = &vv[(b * k_len + j) * d + col..][..dh];
                            orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += p[j] * x);
                        }
                    }
                }
            }
        }
        let shape = self.shape(q).to_vec();
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        ))
    }

    /// Select rows along the first axis; `src: [R, ..]` gives `[index.len(), ..]`.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if shape.is_empty() {
            return Err(PhaError::dim("gather_rows", &shape, &[index.len()]));
        }
        let r = shape[0];
        let c = self.value(src).numel() / r;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(PhaError::Index(format!("row {bad} out of range for {r} rows")));
        }
        if index.is_empty() {
            return Err(PhaError::Contract("gather_rows with empty index".into()));
        }
        let sv = self.value(src).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&sv[i * c..(i + 1) * c]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate `[R, w_i]` matrices (1-D inputs count as one row) along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| PhaError::Contract("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(PhaError::dim("concat_cols", self.shape(first), t.shape()));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let shape = if self.shape(first).len() <= 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ConcatCols {
                parts: parts.iter().copied().zip(widths).collect(),
            },
            rg,
        ))
    }

    /// Inverse of [`Tape::gather_rows`]: `out[index[i]] += part[i]` into a
    /// zero tensor of shape `shape` (first axis indexed).
    pub fn scatter_add_rows(&mut self, parts: &[(Var, Vec<usize>)], shape: &[usize]) -> Result<Var> {
        let rows = *shape
            .first()
            .ok_or_else(|| PhaError::Contract("scatter into a scalar".into()))?;
        let numel: usize = shape.iter().product();
        let c = numel / rows;
        let mut data = vec![0.0; numel];
        for (p, index) in parts {
            let pv = self.value(*p);
            if pv.numel() != index.len() * c || pv.shape().first() != Some(&index.len()) {
                return Err(PhaError::dim("scatter_add_rows", pv.shape(), shape));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
                return Err(PhaError::Index(format!("row {bad} out of range for {rows} rows")));
            }
            let pd = pv.data();
            for (o, &i) in index.iter().enumerate() {
                data[i * c..(i + 1) * c]
                    .iter_mut()
                    .zip(&pd[o * c..(o + 1) * c])
                    .for_each(|(a, b)| *a += b);
            }
        }
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::ScatterAddRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous window of the flattened source, reshaped to `shape`.
    pub fn slice(&mut self, src: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let n = self.value(src).numel();
        if offset + len > n {
            return Err(PhaError::Index(format!(
                "slice [{offset}, {}) outside {n} elements",
                offset + len
            )));
        }
        let data = self.value(src).data()[offset..offset + len].to_vec();
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Slice { src, offset },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Average `hidden: [B, T, d]` over the positions where `mask[b * T + t]`.
    pub fn mean_pool(&mut self, hidden: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(hidden).to_vec();
        if shape.len() != 3 || mask.len() != shape[0] * shape[1] {
            return Err(PhaError::dim("mean_pool", &shape, &[mask.len()]));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let hv = self.value(hidden).data();
        let mut out = vec![0.0; b * d];
        let mut counts = vec![0; b];
        for bi in 0..b {
            let orow = &mut out[bi * d..(bi + 1) * d];
            for ti in 0..t {
                if mask[bi * t + ti] {
                    counts[bi] += 1;
                    let hrow = &hv[(bi * t + ti) * d..][..d];
                    orow.iter_mut().zip(hrow).for_each(|(o, h)| *o += h);
                }
            }
            if counts[bi] == 0 {
                return Err(PhaError::Degenerate(format!(
                    "mean_pool row {bi} has no unmasked position"
                )));
            }
            let c = counts[bi] as f64;
            orow.iter_mut().for_each(|o| *o /= c);
        }
        let rg = self.rg(&[hidden]);
        Ok(self.push(
            Tensor::from_parts(vec![b, d], out),
            Op::MeanPool {
                hidden,
                mask: mask.to_vec(),
                len: t,
                counts,
            },
            rg,
        ))
    }

    /// Divide every row of `x` by `max(‖row‖, min_norm)`. With
    /// `min_norm == 0` a zero row is a degenerate-input error.
    pub fn normalize_rows(&mut self, x: Var, min_norm: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        let xv = self.value(x).data();
        let rows = xv.len() / c;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !n.is_finite() || (n == 0.0 && min_norm <= 0.0) {
                return Err(PhaError::Degenerate(format!(
                    "row {r} has norm {n}; cosine similarity undefined"
                )));
            }
            let clamped = n < min_norm;
            let n = n.max(min_norm);
            norms.push((n, clamped));
            for j in 0..c {
                out[r * c + j] = row[j] / n;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::NormalizeRows { x, norms }, rg))
    }

    /// `Σ weight · (logsumexp(den) − s[row, positive])` over `terms`, where
    /// `den` is the negatives plus (when `include_positive`) the positive.
    pub fn contrastive_nll(
        &mut self,
        scores: Var,
        terms: Vec<ContrastTerm>,
        include_positive: bool,
    ) -> Result<Var> {
        let t = self.value(scores);
        if t.shape().len() != 2 {
            return Err(PhaError::dim("contrastive_nll", t.shape(), &[2]));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let sv = t.data();
        let mut softmax = Vec::new();
        let mut total = 0.0;
        for term in &terms {
            if term.row >= rows
                || term.positive >= cols
                || term.negatives.iter().any(|&c| c >= cols)
            {
                return Err(PhaError::Index(format!(
                    "contrastive term {term:?} outside {rows}x{cols} scores"
                )));
            }
            let row = &sv[term.row * cols..(term.row + 1) * cols];
            let den: Vec<f64> = include_positive
                .then_some(term.positive)
                .into_iter()
                .chain(term.negatives.iter().copied())
                .map(|c| row[c])
                .collect();
            if den.is_empty() {
                return Err(PhaError::Contract(
                    "contrastive term has an empty denominator".into(),
                ));
            }
            let max = den.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = den.iter().map(|s| (s - max).exp()).sum();
            let lse = max + z.ln();
            softmax.extend(den.iter().map(|s| (s - lse).exp()));
            total += term.weight * (lse - row[term.positive]);
        }
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Contrastive {
                scores,
                terms,
                include_positive,
                softmax,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(PhaError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Grads { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                rows,
                inner,
                cols,
                b_transposed,
            } => {
                let (rows, inner, cols) = (*rows, *inner, *cols);
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = G · Bᵀ (or G · B when B is stored transposed)
                    gemm(rows, cols, inner, g, false, bv, !*b_transposed, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *b_transposed {
                        gemm(cols, rows, inner, g, true, av, false, gb, true);
                    } else {
                        gemm(inner, rows, cols, av, true, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = self.slot(grads, *v) {
                        s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(s) = self.slot(grads, *bias) {
                    let n = s.len();
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((x, gg), y) in s.iter_mut().zip(g).zip(bv) {
                        *x += gg * y;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((x, gg), y) in s.iter_mut().zip(g).zip(av) {
                        *x += gg * y;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(s) = self.slot(grads, *x) {
                    for ((a, b), v) in s.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let rows = g.len() / d;
                if let Some(s) = self.slot(grads, *x) {
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = gr[j] * gv[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut s[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for row in g.chunks(d) {
                        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
                count,
            } => {
                if let Some(s) = self.slot(grads, *logits) {
                    let v = probs.len() / targets.len();
                    let c = g[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            s[r * v + j] += c * probs[r * v + j];
                        }
                        s[r * v + t] -= c;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, g, grads),
            Op::GatherRows { src, index } => {
                if let Some(s) = self.slot(grads, *src) {
                    let c = g.len() / index.len();
                    for (o, &i) in index.iter().enumerate() {
                        s[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[o * c..(o + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total;
                let mut off = 0;
                for &(p, w) in parts {
                    if let Some(s) = self.slot(grads, p) {
                        for r in 0..rows {
                            s[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + off..r * total + off + w])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    off += w;
                }
            }
            Op::ScatterAddRows { parts } => {
                let rows = node.value.shape()[0];
                let c = g.len() / rows;
                for (p, index) in parts {
                    if let Some(s) = self.slot(grads, *p) {
                        for (o, &i) in index.iter().enumerate() {
                            s[o * c..(o + 1) * c]
                                .iter_mut()
                                .zip(&g[i * c..(i + 1) * c])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::Slice { src, offset } => {
                if let Some(s) = self.slot(grads, *src) {
                    s[*offset..offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Sum(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    s.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    let c = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|a| *a += c);
                }
            }
            Op::MeanPool {
                hidden,
                mask,
                len,
                counts,
            } => {
                if let Some(s) = self.slot(grads, *hidden) {
                    let d = g.len() / counts.len();
                    for (b, &cnt) in counts.iter().enumerate() {
                        let inv = 1.0 / cnt as f64;
                        for t in 0..*len {
                            if mask[b * len + t] {
                                let row = &mut s[(b * len + t) * d..][..d];
                                row.iter_mut()
                                    .zip(&g[b * d..(b + 1) * d])
                                    .for_each(|(a, gg)| *a += gg * inv);
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                if let Some(s) = self.slot(grads, *x) {
                    let c = y.len() / norms.len();
                    for (r, &(n, clamped)) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        // A clamped divisor is a constant.
                        let dot: f64 = if clamped {
                            0.0
                        } else {
                            yr.iter().zip(gr).map(|(a, b)| a * b).sum()
                        };
                        for j in 0..c {
                            s[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Contrastive {
                scores,
                terms,
                include_positive,
                softmax,
            } => {
                let cols = self.value(*scores).last_dim();
                if let Some(s) = self.slot(grads, *scores) {
                    let mut k = 0;
                    for term in terms {
                        let w = g[0] * term.weight;
                        let base = term.row * cols;
                        let den = include_positive
                            .then_some(term.positive)
                            .into_iter()
                            .chain(term.negatives.iter().copied());
                        for c in den {
                            s[base + c] += w * softmax[k];
                            k += 1;
                        }
                        s[base + term.positive] -= w;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).last_dim();
        let (batch, q_len, k_len, heads) = (spec.batch, spec.q_len, spec.k_len, spec.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = self.nodes[q.0].requires_grad.then(|| vec![0.0; qv.len()]);
        let mut dk = self.nodes[k.0].requires_grad.then(|| vec![0.0; kv.len()]);
        let mut dv = self.nodes[v.0].requires_grad.then(|| vec![0.0; vv.len()]);
        let mut dp = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..q_len {
                    let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                    let go = &g[(b * q_len + i) * d + col..][..dh];
                    let mut dot = 0.0;
                    for j in 0..k_len {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vrow = &vv[(b * k_len + j) * d + col..][..dh];
                        dp[j] = go.iter().zip(vrow).map(|(a, c)| a * c).sum();
                        dot += p[j] * dp[j];
                        if let Some(dv) = dv.as_mut() {
                            let out = &mut dv[(b * k_len + j) * d + col..][..dh];
                            out.iter_mut().zip(go).for_each(|(o, x)| *o += p[j] * x);
                        }
                    }
                    let qrow = &qv[(b * q_len + i) * d + col..][..dh];
                    for j in 0..k_len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if let Some(dq) = dq.as_mut() {
                            let krow = &kv[(b * k_len + j) * d + col..][..dh];
                            let out = &mut dq[(b * q_len + i) * d + col..][..dh];
                            out.iter_mut().zip(krow).for_each(|(o, x)| *o += ds * x);
                        }
                        if let Some(dk) = dk.as_mut() {
                            let out = &mut dk[(b * k_len + j) * d + col..][..dh];
                            out.iter_mut().zip(qrow).for_each(|(o, x)| *o += ds * x);
                        }
                    }
                }
            }
        }
        for (var, part) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(part), Some(s)) = (part, self.slot(grads, var)) {
                s.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
            }
        }
    }
}
