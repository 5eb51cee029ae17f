//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward computation as a linear tape of nodes.
//! `backward` replays the tape in reverse, accumulating gradients into every
//! node that (transitively) requires them. Gradients accumulate additively
//! across repeated `backward` calls until `clear_grads`.
//!
//! All values are finite by contract. The single exception is additive
//! attention masks, which may contain `-inf` to exclude positions; such nodes
//! are flagged and may only flow into `softmax_rows` (any other use surfaces
//! as a non-finite error at the consuming op).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_COEF: f64 = 0.044715;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Exp(NodeId),
    Gelu(NodeId),
    MinConst(NodeId, f64),
    MinElem(NodeId, NodeId),
    Clamp(NodeId, f64, f64),
    GatherRows(NodeId, Vec<usize>),
    SliceRows(NodeId, usize, usize),
    Matmul(NodeId, NodeId),
    TransposeLast2(NodeId),
    SplitHeads(NodeId, usize),
    MergeHeads(NodeId),
    SoftmaxRows {
        x: NodeId,
        mask: Option<NodeId>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogProbs {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    allow_neg_inf: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// c[m,n] += a[m,k] @ b[k,n]
fn mm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * b_row[j];
            }
        }
    }
}

// c[m,n] += a[m,k] @ b^T where b is [n,k]
fn mm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            c_row[j] += acc;
        }
    }
}

// c[k,n] += a^T @ g where a is [m,k] and g is [m,n]
fn mm_tn(c: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * g_row[j];
            }
        }
    }
}

fn gelu_val(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn item(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Extracts a node's value as a plain tensor.
    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::from_raw_unchecked(self.nodes[id].shape.clone(), self.nodes[id].data.clone())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool, allow_neg_inf: bool) -> Result<NodeId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if allow_neg_inf {
            for v in &data {
                if v.is_nan() || *v == f64::INFINITY {
                    return Err(Error::NonFinite {
                        context: op_name(&op).to_string(),
                    });
                }
            }
        } else if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: op_name(&op).to_string(),
            });
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            allow_neg_inf,
        });
        Ok(self.nodes.len() - 1)
    }

    /// Leaf node copied from a tensor; tracks gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
            false,
        )
        .expect("tensor values are finite by invariant")
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        self.push(shape, data, Op::Leaf, requires_grad, false)
    }

    /// Leaf for additive masks: `-inf` entries are legal, NaN/+inf are not.
    pub fn mask_leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        self.push(shape, data, Op::Leaf, requires_grad, true)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Result<NodeId> {
        self.push(vec![1], vec![v], Op::Leaf, false, false)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        let allow = self.nodes[a].allow_neg_inf || self.nodes[b].allow_neg_inf;
        self.push(self.nodes[a].shape.clone(), data, Op::Add(a, b), rg, allow)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        self.push(self.nodes[a].shape.clone(), data, Op::Sub(a, b), rg, false)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        self.push(self.nodes[a].shape.clone(), data, Op::Mul(a, b), rg, false)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x * k).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(self.nodes[a].shape.clone(), data, Op::Scale(a, k), rg, false)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x + c).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(self.nodes[a].shape.clone(), data, Op::AddConst(a, c), rg, false)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x.exp()).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(self.nodes[a].shape.clone(), data, Op::Exp(a), rg, false)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| gelu_val(x)).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(self.nodes[a].shape.clone(), data, Op::Gelu(a), rg, false)
    }

    /// Elementwise `min(x, c)`. The clamped side (x >= c) gets subgradient 0.
    pub fn min_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x.min(c)).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(self.nodes[a].shape.clone(), data, Op::MinConst(a, c), rg, false)
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("min_elem", a, b)?;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x.min(*y))
            .collect();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        self.push(self.nodes[a].shape.clone(), data, Op::MinElem(a, b), rg, false)
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the interval's
    /// closure (standard straight-through-at-bounds convention).
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x.clamp(lo, hi)).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(self.nodes[a].shape.clone(), data, Op::Clamp(a, lo, hi), rg, false)
    }

    /// Row lookup: `a` is [R, C], output is [ids.len(), C].
    pub fn gather_rows(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        let shape = &self.nodes[a].shape;
        if shape.len() != 2 {
            return Err(Error::Contract(format!("gather_rows expects 2-d input, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &r in ids {
            if r >= rows {
                return Err(Error::TokenOutOfRange { id: r, vocab: rows });
            }
            data.extend_from_slice(&self.nodes[a].data[r * cols..(r + 1) * cols]);
        }
        let rg = self.nodes[a].requires_grad;
        self.push(vec![ids.len(), cols], data, Op::GatherRows(a, ids.to_vec()), rg, false)
    }

    /// Contiguous row slice of a 2-d node.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = &self.nodes[a].shape;
        if shape.len() != 2 {
            return Err(Error::Contract(format!("slice_rows expects 2-d input, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if start + len > rows || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of range for {rows} rows",
                start + len
            )));
        }
        let data = self.nodes[a].data[start * cols..(start + len) * cols].to_vec();
        let rg = self.nodes[a].requires_grad;
        self.push(vec![len, cols], data, Op::SliceRows(a, start, len), rg, false)
    }

    /// Matrix product. Supports [m,k]x[k,n], [B,m,k]x[B,k,n] and the
    /// broadcast [B,m,k]x[k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                (1, sa[0], sa[1], sb[1], vec![sa[0], sb[1]])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sa[2], sb[2], vec![sa[0], sa[1], sb[2]])
            }
            (3, 2) => {
                if sa[2] != sb[0] {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sa[2], sb[1], vec![sa[0], sa[1], sb[1]])
            }
            _ => return Err(mismatch()),
        };
        let b_batched = sb.len() == 3;
        let mut data = vec![0.0; batch * m * n];
        for t in 0..batch {
            let a_sl = &self.nodes[a].data[t * m * k..(t + 1) * m * k];
            let b_sl = if b_batched {
                &self.nodes[b].data[t * k * n..(t + 1) * k * n]
            } else {
                &self.nodes[b].data[..]
            };
            mm_nn(&mut data[t * m * n..(t + 1) * m * n], a_sl, b_sl, m, k, n);
        }
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        self.push(out_shape, data, Op::Matmul(a, b), rg, false)
    }

    /// Swaps the last two axes of a 2-d or 3-d node.
    pub fn transpose_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a].shape.clone();
        let (batch, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::Contract(format!("transpose_last2 on shape {s:?}"))),
        };
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; src.len()];
        for t in 0..batch {
            let off = t * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[off + j * r + i] = src[off + i * c + j];
                }
            }
        }
        let mut out_shape = s.clone();
        let l = out_shape.len();
        out_shape.swap(l - 2, l - 1);
        let rg = self.nodes[a].requires_grad;
        self.push(out_shape, data, Op::TransposeLast2(a), rg, false)
    }

    /// [s, d] -> [h, s, d/h]
    pub fn split_heads(&mut self, a: NodeId, n_heads: usize) -> Result<NodeId> {
        let s = self.nodes[a].shape.clone();
        if s.len() != 2 || s[1] % n_heads != 0 {
            return Err(Error::Contract(format!(
                "split_heads: shape {s:?} not divisible into {n_heads} heads"
            )));
        }
        let (seq, d) = (s[0], s[1]);
        let hd = d / n_heads;
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; src.len()];
        for h in 0..n_heads {
            for i in 0..seq {
                for k in 0..hd {
                    data[h * seq * hd + i * hd + k] = src[i * d + h * hd + k];
                }
            }
        }
        let rg = self.nodes[a].requires_grad;
        self.push(vec![n_heads, seq, hd], data, Op::SplitHeads(a, n_heads), rg, false)
    }

    /// [h, s, hd] -> [s, h*hd]
    pub fn merge_heads(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a].shape.clone();
        if s.len() != 3 {
            return Err(Error::Contract(format!("merge_heads on shape {s:?}")));
        }
        let (h, seq, hd) = (s[0], s[1], s[2]);
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; src.len()];
        for hh in 0..h {
            for i in 0..seq {
                for k in 0..hd {
                    data[i * h * hd + hh * hd + k] = src[hh * seq * hd + i * hd + k];
                }
            }
        }
        let rg = self.nodes[a].requires_grad;
        self.push(vec![seq, h * hd], data, Op::MergeHeads(a), rg, false)
    }

    /// Softmax over the last axis with an optional additive mask.
    ///
    /// The mask must either match the input shape or the input's trailing two
    /// dimensions (it is then broadcast over the leading axis). Mask entries
    /// may be -inf; a row that ends up entirely -inf is a degenerate-row
    /// error carrying the flat row index.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
        let xs = self.nodes[x].shape.clone();
        if xs.is_empty() {
            return Err(Error::Contract("softmax_rows on scalar".into()));
        }
        let cols = *xs.last().unwrap();
        let rows = self.nodes[x].data.len() / cols;
        let mask_period = if let Some(m) = mask {
            let ms = &self.nodes[m].shape;
            let m_numel = self.nodes[m].data.len();
            let trailing2: usize = if xs.len() >= 2 {
                xs[xs.len() - 2] * cols
            } else {
                cols
            };
            if m_numel != self.nodes[x].data.len() && m_numel != trailing2 {
                return Err(Error::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: xs.clone(),
                    rhs: ms.clone(),
                });
            }
            m_numel
        } else {
            0
        };
        let mut data = vec![0.0; self.nodes[x].data.len()];
        for r in 0..rows {
            let x_row = &self.nodes[x].data[r * cols..(r + 1) * cols];
            let mut z = [0.0; 0].to_vec();
            z.reserve(cols);
            for j in 0..cols {
                let mv = match mask {
                    Some(m) => self.nodes[m].data[(r * cols + j) % mask_period],
                    None => 0.0,
                };
                z.push(x_row[j] + mv);
            }
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (z[j] - max).exp();
                data[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                data[r * cols + j] /= sum;
            }
        }
        let rg = self.nodes[x].requires_grad
            || mask.map(|m| self.nodes[m].requires_grad).unwrap_or(false);
        self.push(xs, data, Op::SoftmaxRows { x, mask }, rg, false)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x].shape.clone();
        let cols = *xs.last().ok_or_else(|| Error::Contract("layer_norm on scalar".into()))?;
        if self.nodes[gamma].data.len() != cols || self.nodes[beta].data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xs.clone(),
                rhs: self.nodes[gamma].shape.clone(),
            });
        }
        let rows = self.nodes[x].data.len() / cols;
        let mut data = vec![0.0; self.nodes[x].data.len()];
        let mut xhat = vec![0.0; self.nodes[x].data.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.nodes[x].data[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let xh = (row[j] - mu) * is;
                xhat[r * cols + j] = xh;
                data[r * cols + j] = self.nodes[gamma].data[j] * xh + self.nodes[beta].data[j];
            }
        }
        let rg = self.nodes[x].requires_grad
            || self.nodes[gamma].requires_grad
            || self.nodes[beta].requires_grad;
        self.push(
            xs,
            data,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
            false,
        )
    }

    /// Per-row log-probability of a target id under log-softmax of `logits`.
    /// `logits` is [N, V]; the output is [N].
    pub fn log_probs(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.nodes[logits].shape.clone();
        if s.len() != 2 {
            return Err(Error::Contract(format!("log_probs expects 2-d logits, got {s:?}")));
        }
        let (rows, vocab) = (s[0], s[1]);
        if targets.len() != rows {
            return Err(Error::Contract(format!(
                "log_probs: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let t = targets[r];
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let row = &self.nodes[logits].data[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..vocab {
                let e = (row[j] - max).exp();
                probs[r * vocab + j] = e;
                sum += e;
            }
            for j in 0..vocab {
                probs[r * vocab + j] /= sum;
            }
            let lse = max + sum.ln();
            data[r] = row[t] - lse;
        }
        let rg = self.nodes[logits].requires_grad;
        self.push(
            vec![rows],
            data,
            Op::LogProbs {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            false,
        )
    }

    /// Mean negative log-probability of `targets` under `logits` rows.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lp = self.log_probs(logits, targets)?;
        let mean = self.mean(lp)?;
        self.scale(mean, -1.0)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.nodes[a].data.iter().sum();
        let rg = self.nodes[a].requires_grad;
        self.push(vec![1], vec![total], Op::Sum(a), rg, false)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a].data.len() as f64;
        let total: f64 = self.nodes[a].data.iter().sum();
        let rg = self.nodes[a].requires_grad;
        self.push(vec![1], vec![total / n], Op::Mean(a), rg, false)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively into
    /// every `requires_grad` ancestor; repeated calls keep accumulating until
    /// `clear_grads`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        self.grads.resize(self.nodes.len(), None);
        {
            let g = self.grads[loss].get_or_insert_with(|| vec![0.0; 1]);
            g[0] += 1.0;
        }
        for i in (0..=loss).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let n = self.nodes[id].data.len();
        let g = self.grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn propagate(&mut self, i: NodeId, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.acc(b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.acc(b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let bd = self.nodes[b].data.clone();
                self.acc(a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(&bd) {
                        *x += y * z;
                    }
                });
                let ad = self.nodes[a].data.clone();
                self.acc(b, |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(&ad) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(a, k) => {
                self.acc(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += k * y;
                    }
                });
            }
            Op::AddConst(a, _) => {
                self.acc(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Exp(a) => {
                let out = self.nodes[i].data.clone();
                self.acc(a, |ga| {
                    for ((x, y), e) in ga.iter_mut().zip(g).zip(&out) {
                        *x += y * e;
                    }
                });
            }
            Op::Gelu(a) => {
                let inp = self.nodes[a].data.clone();
                self.acc(a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(&inp) {
                        *x += y * gelu_deriv(*v);
                    }
                });
            }
            Op::MinConst(a, c) => {
                let inp = self.nodes[a].data.clone();
                self.acc(a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(&inp) {
                        if *v < c {
                            *x += y;
                        }
                    }
                });
            }
            Op::MinElem(a, b) => {
                let ad = self.nodes[a].data.clone();
                let bd = self.nodes[b].data.clone();
                self.acc(a, |ga| {
                    for (j, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                        if ad[j] <= bd[j] {
                            *x += y;
                        }
                    }
                });
                self.acc(b, |gb| {
                    for (j, (x, y)) in gb.iter_mut().zip(g).enumerate() {
                        if ad[j] > bd[j] {
                            *x += y;
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let inp = self.nodes[a].data.clone();
                self.acc(a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(&inp) {
                        if *v >= lo && *v <= hi {
                            *x += y;
                        }
                    }
                });
            }
            Op::GatherRows(a, ids) => {
                let cols = self.nodes[i].shape[1];
                self.acc(a, |ga| {
                    for (r, &src) in ids.iter().enumerate() {
                        for j in 0..cols {
                            ga[src * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }
            Op::SliceRows(a, start, len) => {
                let cols = self.nodes[i].shape[1];
                self.acc(a, |ga| {
                    ga[start * cols..(start + len) * cols]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
                let (batch, m, k, n) = match (sa.len(), sb.len()) {
                    (2, 2) => (1, sa[0], sa[1], sb[1]),
                    (3, 3) => (sa[0], sa[1], sa[2], sb[2]),
                    (3, 2) => (sa[0], sa[1], sa[2], sb[1]),
                    _ => unreachable!(),
                };
                let b_batched = sb.len() == 3;
                let ad = self.nodes[a].data.clone();
                let bd = self.nodes[b].data.clone();
                self.acc(a, |ga| {
                    for t in 0..batch {
                        let g_sl = &g[t * m * n..(t + 1) * m * n];
                        let b_sl = if b_batched {
                            &bd[t * k * n..(t + 1) * k * n]
                        } else {
                            &bd[..]
                        };
                        mm_nt(&mut ga[t * m * k..(t + 1) * m * k], g_sl, b_sl, m, n, k);
                    }
                });
                self.acc(b, |gb| {
                    for t in 0..batch {
                        let g_sl = &g[t * m * n..(t + 1) * m * n];
                        let a_sl = &ad[t * m * k..(t + 1) * m * k];
                        let gb_sl = if b_batched {
                            &mut gb[t * k * n..(t + 1) * k * n]
                        } else {
                            &mut gb[..]
                        };
                        mm_tn(gb_sl, a_sl, g_sl, m, k, n);
                    }
                });
            }
            Op::TransposeLast2(a) => {
                let s = self.nodes[i].shape.clone();
                let (batch, r, c) = match s.len() {
                    2 => (1, s[0], s[1]),
                    _ => (s[0], s[1], s[2]),
                };
                // output is [.., r, c]; input was [.., c, r]
                self.acc(a, |ga| {
                    for t in 0..batch {
                        let off = t * r * c;
                        for x in 0..r {
                            for y in 0..c {
                                ga[off + y * r + x] += g[off + x * c + y];
                            }
                        }
                    }
                });
            }
            Op::SplitHeads(a, n_heads) => {
                let s = self.nodes[i].shape.clone();
                let (h, seq, hd) = (s[0], s[1], s[2]);
                debug_assert_eq!(h, n_heads);
                let d = h * hd;
                self.acc(a, |ga| {
                    for hh in 0..h {
                        for x in 0..seq {
                            for kk in 0..hd {
                                ga[x * d + hh * hd + kk] += g[hh * seq * hd + x * hd + kk];
                            }
                        }
                    }
                });
            }
            Op::MergeHeads(a) => {
                let s = self.nodes[a].shape.clone();
                let (h, seq, hd) = (s[0], s[1], s[2]);
                self.acc(a, |ga| {
                    for hh in 0..h {
                        for x in 0..seq {
                            for kk in 0..hd {
                                ga[hh * seq * hd + x * hd + kk] += g[x * h * hd + hh * hd + kk];
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows { x, mask } => {
                let out = self.nodes[i].data.clone();
                let cols = *self.nodes[i].shape.last().unwrap();
                let rows = out.len() / cols;
                // dL/dz for z = input + mask, shared by both receivers
                let mut dz = vec![0.0; out.len()];
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dz[r * cols + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.acc(x, |gx| {
                    for (a, b) in gx.iter_mut().zip(&dz) {
                        *a += b;
                    }
                });
                if let Some(m) = mask {
                    let period = self.nodes[m].data.len();
                    self.acc(m, |gm| {
                        for (idx, v) in dz.iter().enumerate() {
                            gm[idx % period] += v;
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = *self.nodes[i].shape.last().unwrap();
                let rows = xhat.len() / cols;
                let gamma_d = self.nodes[gamma].data.clone();
                self.acc(x, |gx| {
                    for r in 0..rows {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let is = inv_std[r];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..cols {
                            let dxh = gr[j] * gamma_d[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[j];
                        }
                        mean_dxhat /= cols as f64;
                        mean_dxhat_xhat /= cols as f64;
                        for j in 0..cols {
                            let dxh = gr[j] * gamma_d[j];
                            gx[r * cols + j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                });
                self.acc(gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..cols {
                            gg[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                });
                self.acc(beta, |gb| {
                    for r in 0..rows {
                        for j in 0..cols {
                            gb[j] += g[r * cols + j];
                        }
                    }
                });
            }
            Op::LogProbs {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.nodes[logits].shape[1];
                self.acc(logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for j in 0..vocab {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[r * vocab + j] += gr * (ind - probs[r * vocab + j]);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.acc(a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a].data.len() as f64;
                let gv = g[0] / n;
                self.acc(a, |ga| {
                    for x in ga.iter_mut() {
                        *x += gv;
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::Exp(..) => "exp",
        Op::Gelu(..) => "gelu",
        Op::MinConst(..) => "min_const",
        Op::MinElem(..) => "min_elem",
        Op::Clamp(..) => "clamp",
        Op::GatherRows(..) => "gather_rows",
        Op::SliceRows(..) => "slice_rows",
        Op::Matmul(..) => "matmul",
        Op::TransposeLast2(..) => "transpose_last2",
        Op::SplitHeads(..) => "split_heads",
        Op::MergeHeads(..) => "merge_heads",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::LogProbs { .. } => "log_probs",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.leaf(&t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = g.leaf(&t2(&[&[3.0, -1.5], &[2.0, 7.0]]));
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.data(c), &[3.0, -1.5, 2.0, 7.0]);
    }

    #[test]
    fn matmul_hand_expansion() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let mut g = Graph::new();
        let a = g.leaf(&t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.leaf(&t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::new();
        let a = g.leaf_from(vec![2, 3], vec![0.0; 6], false).unwrap();
        let b = g.leaf_from(vec![2, 2], vec![0.0; 4], false).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn grad_of_sum_matmul_is_ones_times_b_transpose() {
        let mut g = Graph::new();
        let at = t2(&[&[0.3, -1.0], &[2.0, 0.5]]).with_requires_grad();
        let a = g.leaf(&at);
        let b = g.leaf(&t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        // d(sum)/dA = ones @ B^T: each row = [b00+b01, b10+b11]
        assert_eq!(g.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let mut g = Graph::new();
        let x = g.leaf_from(vec![1, 3], vec![0.0; 3], false).unwrap();
        let y = g.softmax_rows(x, None).unwrap();
        for v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_zero_mask_is_identity() {
        let mut g = Graph::new();
        let x = g
            .leaf_from(vec![1, 3], vec![0.4, -2.0, 1.5], false)
            .unwrap();
        let zero = g.mask_leaf(vec![1, 3], vec![0.0; 3], false).unwrap();
        let y0 = g.softmax_rows(x, None).unwrap();
        let y1 = g.softmax_rows(x, Some(zero)).unwrap();
        assert_eq!(g.data(y0), g.data(y1));
    }

    #[test]
    fn softmax_neg_inf_mask_matches_two_way_closed_form() {
        let mut g = Graph::new();
        let x = g
            .leaf_from(vec![1, 3], vec![1.0, 2.0, 3.0], false)
            .unwrap();
        let m = g
            .mask_leaf(vec![1, 3], vec![0.0, 0.0, f64::NEG_INFINITY], false)
            .unwrap();
        let y = g.softmax_rows(x, Some(m)).unwrap();
        let e1 = 1.0f64.exp();
        let e2 = 2.0f64.exp();
        let want = [e1 / (e1 + e2), e2 / (e1 + e2), 0.0];
        for (a, b) in g.data(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_fully_masked_row_errors_with_index() {
        let mut g = Graph::new();
        let x = g.leaf_from(vec![2, 2], vec![0.0; 4], false).unwrap();
        let m = g
            .mask_leaf(
                vec![2, 2],
                vec![0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
                false,
            )
            .unwrap();
        match g.softmax_rows(x, Some(m)) {
            Err(Error::DegenerateRow { row }) => assert_eq!(row, 1),
            other => panic!("expected degenerate row, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_under_random_masks() {
        use crate::rng::DetRng;
        let mut rng = DetRng::new(42);
        for trial in 0..1000 {
            let mut g = Graph::new();
            let rows = 1 + rng.below(4);
            let cols = 1 + rng.below(6);
            let xv: Vec<f64> = (0..rows * cols).map(|_| rng.gauss() * 3.0).collect();
            let mv: Vec<f64> = (0..rows * cols).map(|_| rng.gauss() * 5.0).collect();
            let x = g.leaf_from(vec![rows, cols], xv, false).unwrap();
            let m = g.mask_leaf(vec![rows, cols], mv, false).unwrap();
            let y = g.softmax_rows(x, Some(m)).unwrap();
            for r in 0..rows {
                let s: f64 = g.data(y)[r * cols..(r + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "trial {trial} row {r}: sum {s}");
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_vocab() {
        let mut g = Graph::new();
        let logits = g.leaf_from(vec![4, 7], vec![0.0; 28], false).unwrap();
        let ce = g.cross_entropy(logits, &[0, 3, 6, 2]).unwrap();
        assert!((g.item(ce) - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_near_one_hot_approaches_zero() {
        let mut g = Graph::new();
        let mut lv = vec![0.0; 5];
        lv[2] = 60.0;
        let logits = g.leaf_from(vec![1, 5], lv, false).unwrap();
        let ce = g.cross_entropy(logits, &[2]).unwrap();
        assert!(g.item(ce) < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_brute_force_on_random_logits() {
        use crate::rng::DetRng;
        let mut rng = DetRng::new(5);
        let (rows, vocab) = (3, 5);
        let lv: Vec<f64> = (0..rows * vocab).map(|_| rng.gauss()).collect();
        let targets = [4usize, 0, 2];
        // brute force: -mean(log softmax[target])
        let mut want = 0.0;
        for r in 0..rows {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[targets[r]].exp() / denom).ln();
        }
        want /= rows as f64;
        let mut g = Graph::new();
        let logits = g.leaf_from(vec![rows, vocab], lv, false).unwrap();
        let ce = g.cross_entropy(logits, &targets).unwrap();
        assert!((g.item(ce) - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_out_of_vocab_errors() {
        let mut g = Graph::new();
        let logits = g.leaf_from(vec![1, 3], vec![0.0; 3], false).unwrap();
        assert!(matches!(
            g.cross_entropy(logits, &[3]),
            Err(Error::TokenOutOfRange { id: 3, vocab: 3 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let xt = Tensor::new(vec![3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .with_requires_grad();
        let x = g.leaf(&xt);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut g = Graph::new();
        let xt = Tensor::new(vec![3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .with_requires_grad();
        let x = g.leaf(&xt);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut g = Graph::new();
        let x = g.leaf_from(vec![2], vec![1.0, 2.0], true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf_from(vec![2], vec![1.0, 2.0], true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.clear_grads();
        assert!(g.grad(x).is_none());
    }

    /// Central finite differences over a scalar-valued closure.
    fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x0.len());
        let mut x = x0.to_vec();
        for i in 0..x0.len() {
            x[i] = x0[i] + h;
            let fp = f(&x);
            x[i] = x0[i] - h;
            let fm = f(&x);
            x[i] = x0[i];
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| {
                let denom = a.abs().max(n.abs()).max(1e-6);
                (a - n).abs() / denom
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn composed_ops_match_finite_differences() {
        use crate::rng::DetRng;
        let mut rng = DetRng::new(17);
        let (m, k, n) = (3, 4, 5);
        let a0: Vec<f64> = (0..m * k).map(|_| rng.gauss()).collect();
        let w0: Vec<f64> = (0..k * n).map(|_| rng.gauss()).collect();
        let gamma0 = vec![1.0; n];
        let beta0 = vec![0.0; n];
        let targets = [1usize, 4, 0];

        // loss(a) through matmul -> gelu -> layer_norm -> softmax path -> CE
        let mut eval = |av: &[f64], wv: &[f64]| -> f64 {
            let mut g = Graph::new();
            let a = g.leaf_from(vec![m, k], av.to_vec(), true).unwrap();
            let w = g.leaf_from(vec![k, n], wv.to_vec(), true).unwrap();
            let h = g.matmul(a, w).unwrap();
            let act = g.gelu(h).unwrap();
            let gamma = g.leaf_from(vec![n], gamma0.clone(), false).unwrap();
            let beta = g.leaf_from(vec![n], beta0.clone(), false).unwrap();
            let ln = g.layer_norm(act, gamma, beta).unwrap();
            let ce = g.cross_entropy(ln, &targets).unwrap();
            g.item(ce)
        };

        // analytic grads
        let mut g = Graph::new();
        let a = g.leaf_from(vec![m, k], a0.clone(), true).unwrap();
        let w = g.leaf_from(vec![k, n], w0.clone(), true).unwrap();
        let h = g.matmul(a, w).unwrap();
        let act = g.gelu(h).unwrap();
        let gamma = g.leaf_from(vec![n], gamma0.clone(), false).unwrap();
        let beta = g.leaf_from(vec![n], beta0.clone(), false).unwrap();
        let ln = g.layer_norm(act, gamma, beta).unwrap();
        let ce = g.cross_entropy(ln, &targets).unwrap();
        g.backward(ce).unwrap();

        let ga = g.grad(a).unwrap().to_vec();
        let gw = g.grad(w).unwrap().to_vec();
        let na = finite_diff(&mut |av| eval(av, &w0), &a0, 1e-5);
        let nw = finite_diff(&mut |wv| eval(&a0, wv), &w0, 1e-5);
        assert!(max_rel_err(&ga, &na) < 1e-6, "a err {}", max_rel_err(&ga, &na));
        assert!(max_rel_err(&gw, &nw) < 1e-6, "w err {}", max_rel_err(&gw, &nw));
    }

    #[test]
    fn softmax_mask_gradient_matches_finite_differences() {
        use crate::rng::DetRng;
        let mut rng = DetRng::new(23);
        let (h, s) = (2, 4);
        let xv: Vec<f64> = (0..h * s * s).map(|_| rng.gauss()).collect();
        let mv: Vec<f64> = (0..s * s).map(|_| -rng.uniform()).collect();

        let mut eval = |mm: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf_from(vec![h, s, s], xv.clone(), false).unwrap();
            let m = g.mask_leaf(vec![s, s], mm.to_vec(), true).unwrap();
            let y = g.softmax_rows(x, Some(m)).unwrap();
            let sq = g.mul(y, y).unwrap();
            let out = g.sum(sq).unwrap();
            g.item(out)
        };

        let mut g = Graph::new();
        let x = g.leaf_from(vec![h, s, s], xv.clone(), false).unwrap();
        let m = g.mask_leaf(vec![s, s], mv.clone(), true).unwrap();
        let y = g.softmax_rows(x, Some(m)).unwrap();
        let sq = g.mul(y, y).unwrap();
        let out = g.sum(sq).unwrap();
        g.backward(out).unwrap();
        let gm = g.grad(m).unwrap().to_vec();
        let nm = finite_diff(&mut eval, &mv, 1e-6);
        assert!(max_rel_err(&gm, &nm) < 1e-5, "err {}", max_rel_err(&gm, &nm));
    }

    #[test]
    fn gather_slice_split_merge_roundtrip_grads() {
        let mut g = Graph::new();
        let table = g
            .leaf_from(vec![4, 6], (0..24).map(|v| v as f64 * 0.1).collect(), true)
            .unwrap();
        let picked = g.gather_rows(table, &[1, 1, 3]).unwrap();
        let sliced = g.slice_rows(picked, 1, 2).unwrap();
        let heads = g.split_heads(sliced, 2).unwrap();
        let merged = g.merge_heads(heads).unwrap();
        assert_eq!(g.data(merged), g.data(sliced));
        let s = g.sum(merged).unwrap();
        g.backward(s).unwrap();
        let gt = g.grad(table).unwrap();
        // row 1 picked twice but only the second copy survives the slice; row 3 kept
        let mut want = vec![0.0; 24];
        for j in 0..6 {
            want[6 + j] = 1.0;
            want[18 + j] = 1.0;
        }
        assert_eq!(gt, &want[..]);
    }

    #[test]
    fn determinism_bitwise_across_runs() {
        let run = || {
            let mut g = Graph::new();
            let x = g
                .leaf_from(vec![3, 3], (0..9).map(|v| (v as f64).sin()).collect(), false)
                .unwrap();
            let y = g.softmax_rows(x, None).unwrap();
            let w = g
                .leaf_from(vec![3, 3], (0..9).map(|v| (v as f64).cos()).collect(), false)
                .unwrap();
            let z = g.matmul(y, w).unwrap();
            let ce = g.cross_entropy(z, &[0, 1, 2]).unwrap();
            g.item(ce).to_bits()
        };
        assert_eq!(run(), run());
    }
}
