use super::dense::{gemm, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const DEGENERATE_NORM: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_trans: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Affine { x: Var, scale: f64 },
    Ln { x: Var, floor: f64 },
    Powf { x: Var, exponent: f64 },
    Gelu(Var),
    Softmax { x: Var, temperature: f64 },
    LogSoftmax { x: Var, temperature: f64 },
    Log1mSoftmax { x: Var, temperature: f64, floor: f64 },
    L2Normalize { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Attention(Box<AttentionRecord>),
}

#[derive(Debug)]
struct AttentionRecord {
    qkv: Var,
    segments: Vec<(usize, usize)>,
    heads: usize,
    probs: Vec<f64>,
    offsets: Vec<usize>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations supporting one reverse pass.
///
/// Nodes are appended in evaluation order, so every input of a node has a smaller index
/// than the node itself and a reverse sweep visits consumers before producers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
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

    /// Drops every recorded node; handles from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Copies a value into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Accumulated gradient, or `None` when nothing flowed into `x`.
    pub fn grad(&self, x: Var) -> Option<&[f64]> {
        self.nodes[x.0].grad.as_deref()
    }

    /// Gradient of `x` as a tensor of its shape, zero when nothing flowed into it.
    pub fn grad_tensor(&self, x: Var) -> Tensor {
        let node = &self.nodes[x.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient length equals value length"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = require_matrix("matmul", ta)?;
        let (r, c) = require_matrix("matmul", tb)?;
        let (kb, n) = if b_trans { (c, r) } else { (r, c) };
        if k != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), b_trans, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul { a, b, b_trans }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Transpose(x)))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (_, n) = require_matrix("add_row", tx)?;
        if tb.numel() != n {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut value = tx.clone();
        let b = tb.data();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, rg, Op::AddRow { x, bias }))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same length");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the floor is active.
    ///
    /// With `floor == 0.0` this is the plain logarithm.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v.max(floor).ln()).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same length");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Ln { x, floor })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.ln_floor(x, 0.0)
    }

    /// `x^exponent` for nonnegative `x`.
    pub fn powf(&mut self, x: Var, exponent: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v.powf(exponent)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same length");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Powf { x, exponent })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same length");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Gelu(x))
    }

    /// Row-wise `softmax(x / temperature)` with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let tx = &self.nodes[x.0].value;
        let cols = tx.cols();
        let mut value = tx.clone();
        for row in value.data_mut().chunks_mut(cols.max(1)) {
            softmax_in_place(row, temperature);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Softmax { x, temperature }))
    }

    /// Row-wise `log_softmax(x / temperature)`.
    pub fn log_softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let tx = &self.nodes[x.0].value;
        let cols = tx.cols();
        let mut value = tx.clone();
        for row in value.data_mut().chunks_mut(cols.max(1)) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|&v| ((v - max) / temperature).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v = (*v - max) / temperature - lse);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::LogSoftmax { x, temperature }))
    }

    /// Row-wise `ln(max(1 − softmax(x / temperature), floor))`, evaluated in log space so
    /// that probabilities close to one keep full relative precision.
    pub fn log1m_softmax_rows(&mut self, x: Var, temperature: f64, floor: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let tx = &self.nodes[x.0].value;
        let cols = tx.cols();
        let lo = floor.ln();
        let mut value = tx.clone();
        for row in value.data_mut().chunks_mut(cols.max(1)) {
            let z = scaled_row(row, temperature);
            let lse = log_sum_exp(&z, None);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (log_sum_exp(&z, Some(j)) - lse).max(lo);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Log1mSoftmax { x, temperature, floor }))
    }

    /// Scales each row to unit L2 norm; rows with norm below 1e-12 are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let cols = tx.cols();
        let mut value = tx.clone();
        let mut norms = Vec::with_capacity(tx.rows());
        for (r, row) in value.data_mut().chunks_mut(cols.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= DEGENERATE_NORM) {
                return Err(Error::DegenerateFeature { row: r, norm });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::L2Normalize { x, norms }))
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let (_, n) = require_matrix("layer_norm", tx)?;
        if tg.numel() != n || tb.numel() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut value = tx.clone();
        let mut stats = Vec::with_capacity(tx.rows());
        for row in value.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * tg.data()[j] + tb.data()[j];
            }
            stats.push((mean, rstd));
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(value, rg, Op::LayerNorm { x, gain, bias, stats }))
    }

    /// Selects rows of a matrix (or vector entries for 1-D input), repeating allowed.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = require_matrix("gather_rows", tx)?;
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::Range(format!("gather row {i} of {rows}")));
            }
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(vec![index.len(), cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::GatherRows { x, index: index.to_vec() }))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat_rows of nothing".into()))?;
        let cols = require_matrix("concat_rows", &self.nodes[first.0].value)?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let (r, c) = require_matrix("concat_rows", t)?;
            if c != cols {
                return Err(shape_err("concat_rows", &self.nodes[first.0].value, t));
            }
            data.extend_from_slice(t.data());
            rows += r;
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Multi-head scaled dot-product self-attention over independent row segments.
    ///
    /// `qkv` is `R×3d` holding query, key and value blocks side by side; each
    /// `(start, len)` segment attends only within itself. Returns the `R×d` output.
    pub fn attention(&mut self, qkv: Var, segments: &[(usize, usize)], heads: usize) -> Result<Var> {
        let t = &self.nodes[qkv.0].value;
        let (rows, width) = require_matrix("attention", t)?;
        if heads == 0 || width % (3 * heads) != 0 {
            return Err(Error::Parameter(format!(
                "attention width {width} is not divisible into q/k/v for {heads} heads"
            )));
        }
        let mut cursor = 0;
        for &(start, len) in segments {
            if start != cursor || len == 0 {
                return Err(Error::Parameter("attention segments must tile the rows".into()));
            }
            cursor += len;
        }
        if cursor != rows {
            return Err(Error::Parameter("attention segments must tile the rows".into()));
        }
        let d = width / 3;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let src = t.data();
        let mut out = vec![0.0; rows * d];
        let mut offsets = Vec::with_capacity(segments.len());
        let total: usize = segments.iter().map(|&(_, l)| heads * l * l).sum();
        let mut probs = vec![0.0; total];
        let mut off = 0;
        for &(start, len) in segments {
            offsets.push(off);
            for h in 0..heads {
                let p = &mut probs[off + h * len * len..off + (h + 1) * len * len];
                for i in 0..len {
                    let q = &src[(start + i) * width + h * dk..][..dk];
                    let row = &mut p[i * len..(i + 1) * len];
                    for (j, slot) in row.iter_mut().enumerate() {
                        let k = &src[(start + j) * width + d + h * dk..][..dk];
                        *slot = dot(q, k) * scale;
                    }
                    softmax_in_place(row, 1.0);
                    let o = &mut out[(start + i) * d + h * dk..][..dk];
                    for (j, &pij) in row.iter().enumerate() {
                        let v = &src[(start + j) * width + 2 * d + h * dk..][..dk];
                        o.iter_mut().zip(v).for_each(|(oo, vv)| *oo += pij * vv);
                    }
                }
            }
            off += heads * len * len;
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[qkv]);
        let record = AttentionRecord {
            qkv,
            segments: segments.to_vec(),
            heads,
            probs,
            offsets,
        };
        Ok(self.push(value, rg, Op::Attention(Box::new(record))))
    }

    /// Attention rows of the first token of every segment: `[segment][head][key]`.
    pub fn first_token_attention(&self, x: Var) -> Option<Vec<Vec<Vec<f64>>>> {
        match &self.nodes[x.0].op {
            Op::Attention(rec) => Some(
                rec.segments
                    .iter()
                    .zip(&rec.offsets)
                    .map(|(&(_, len), &off)| {
                        (0..rec.heads)
                            .map(|h| rec.probs[off + h * len * len..][..len].to_vec())
                            .collect()
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar loss, accumulating gradients into every node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &mut self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Rank(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        root.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            propagate(before, node, &g);
            node.grad = Some(g);
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn grad_slot(nodes: &mut [Node], v: Var) -> Option<&mut Vec<f64>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(node.grad.get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &mut [Node], node: &Node, g: &[f64]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, b_trans } => {
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let av = nodes[a.0].value.clone_data_if(nodes[b.0].requires_grad);
            let bv = nodes[b.0].value.clone_data_if(nodes[a.0].requires_grad);
            let k = nodes[a.0].value.shape()[1];
            if let (Some(ga), Some(bv)) = (grad_slot(nodes, *a), bv.as_ref()) {
                // dA = dC · op(B)ᵀ
                gemm(m, n, k, g, false, bv, !*b_trans, ga, true);
            }
            if let (Some(gb), Some(av)) = (grad_slot(nodes, *b), av.as_ref()) {
                if *b_trans {
                    // C = A·Bᵀ  ⇒  dB = dCᵀ · A
                    gemm(n, m, k, g, true, av, false, gb, true);
                } else {
                    gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            if let Some(gx) = grad_slot(nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(gv) = grad_slot(nodes, v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(gv) = grad_slot(nodes, v) {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
        }
        Op::Mul(a, b) => {
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].value.data().to_vec();
                let ga = grad_slot(nodes, *a).expect("requires grad");
                for ((x, y), z) in ga.iter_mut().zip(g).zip(&bv) {
                    *x += y * z;
                }
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].value.data().to_vec();
                let gb = grad_slot(nodes, *b).expect("requires grad");
                for ((x, y), z) in gb.iter_mut().zip(g).zip(&av) {
                    *x += y * z;
                }
            }
        }
        Op::AddRow { x, bias } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(gb) = grad_slot(nodes, *bias) {
                let n = gb.len();
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Affine { x, scale } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
        }
        Op::Ln { x, floor } => {
            if nodes[x.0].requires_grad {
                let xv = nodes[x.0].value.data().to_vec();
                let gx = grad_slot(nodes, *x).expect("requires grad");
                for ((a, b), &v) in gx.iter_mut().zip(g).zip(&xv) {
                    if v > *floor {
                        *a += b / v;
                    }
                }
            }
        }
        Op::Powf { x, exponent } => {
            if nodes[x.0].requires_grad {
                let xv = nodes[x.0].value.data().to_vec();
                let gx = grad_slot(nodes, *x).expect("requires grad");
                for ((a, b), &v) in gx.iter_mut().zip(g).zip(&xv) {
                    let d = if *exponent == 0.0 || (v == 0.0 && *exponent < 1.0) {
                        0.0
                    } else {
                        exponent * v.powf(exponent - 1.0)
                    };
                    *a += b * d;
                }
            }
        }
        Op::Gelu(x) => {
            if nodes[x.0].requires_grad {
                let xv = nodes[x.0].value.data().to_vec();
                let gx = grad_slot(nodes, *x).expect("requires grad");
                for ((a, b), &v) in gx.iter_mut().zip(g).zip(&xv) {
                    *a += b * gelu_grad(v);
                }
            }
        }
        Op::Softmax { x, temperature } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                let cols = out.cols().max(1);
                for ((gr, yr), dr) in gx.chunks_mut(cols).zip(out.data().chunks(cols)).zip(g.chunks(cols)) {
                    let inner = dot(yr, dr);
                    for ((a, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                        *a += y * (d - inner) / temperature;
                    }
                }
            }
        }
        Op::LogSoftmax { x, temperature } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                let cols = out.cols().max(1);
                for ((gr, yr), dr) in gx.chunks_mut(cols).zip(out.data().chunks(cols)).zip(g.chunks(cols)) {
                    let total: f64 = dr.iter().sum();
                    for ((a, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                        *a += (d - y.exp() * total) / temperature;
                    }
                }
            }
        }
        Op::Log1mSoftmax { x, temperature, floor } => {
            if nodes[x.0].requires_grad {
                let xv = nodes[x.0].value.data().to_vec();
                let cols = out.cols().max(1);
                let lo = floor.ln();
                let gx = grad_slot(nodes, *x).expect("requires grad");
                for (((gr, xr), yr), dr) in gx
                    .chunks_mut(cols)
                    .zip(xv.chunks(cols))
                    .zip(out.data().chunks(cols))
                    .zip(g.chunks(cols))
                {
                    let z = scaled_row(xr, *temperature);
                    let lse = log_sum_exp(&z, None);
                    for (j, (&y, &d)) in yr.iter().zip(dr).enumerate() {
                        if y <= lo || d == 0.0 {
                            continue;
                        }
                        let rest = log_sum_exp(&z, Some(j));
                        for (k, a) in gr.iter_mut().enumerate() {
                            let own = if k == j { 0.0 } else { (z[k] - rest).exp() };
                            *a += d * (own - (z[k] - lse).exp()) / temperature;
                        }
                    }
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                let cols = out.cols().max(1);
                for (((gr, yr), dr), norm) in gx
                    .chunks_mut(cols)
                    .zip(out.data().chunks(cols))
                    .zip(g.chunks(cols))
                    .zip(norms)
                {
                    let inner = dot(yr, dr);
                    for ((a, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                        *a += (d - y * inner) / norm;
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, stats } => {
            let n = out.cols();
            let xv = nodes[x.0].value.data().to_vec();
            let gv = nodes[gain.0].value.data().to_vec();
            if let Some(gg) = grad_slot(nodes, *gain) {
                for ((xr, dr), &(mean, rstd)) in xv.chunks(n).zip(g.chunks(n)).zip(stats) {
                    for j in 0..n {
                        gg[j] += dr[j] * (xr[j] - mean) * rstd;
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, *bias) {
                for dr in g.chunks(n) {
                    gb.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gx) = grad_slot(nodes, *x) {
                let mut dxhat = vec![0.0; n];
                for ((gr, (xr, dr)), &(mean, rstd)) in
                    gx.chunks_mut(n).zip(xv.chunks(n).zip(g.chunks(n))).zip(stats)
                {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        dxhat[j] = dr[j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * (xr[j] - mean) * rstd;
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * rstd;
                        gr[j] += rstd * (dxhat[j] - m1 - xhat * m2);
                    }
                }
            }
        }
        Op::GatherRows { x, index } => {
            if let Some(gx) = grad_slot(nodes, *x) {
                let cols = out.cols();
                for (r, &i) in index.iter().enumerate() {
                    let dst = &mut gx[i * cols..(i + 1) * cols];
                    dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let len = nodes[p.0].value.numel();
                if let Some(gp) = grad_slot(nodes, *p) {
                    gp.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                }
                off += len;
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = grad_slot(nodes, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = grad_slot(nodes, *x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|a| *a += s);
            }
        }
        Op::Attention(rec) => attention_backward(nodes, rec, g),
    }
}

fn attention_backward(nodes: &mut [Node], rec: &AttentionRecord, g: &[f64]) {
    if !nodes[rec.qkv.0].requires_grad {
        return;
    }
    let src = nodes[rec.qkv.0].value.data().to_vec();
    let width = nodes[rec.qkv.0].value.shape()[1];
    let d = width / 3;
    let heads = rec.heads;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let gq = grad_slot(nodes, rec.qkv).expect("requires grad");
    let mut dp = Vec::new();
    for (&(start, len), &off) in rec.segments.iter().zip(&rec.offsets) {
        dp.resize(len, 0.0);
        for h in 0..heads {
            let p = &rec.probs[off + h * len * len..off + (h + 1) * len * len];
            for i in 0..len {
                let go = &g[(start + i) * d + h * dk..][..dk];
                let prow = &p[i * len..(i + 1) * len];
                for j in 0..len {
                    let v = &src[(start + j) * width + 2 * d + h * dk..][..dk];
                    dp[j] = dot(go, v);
                    let gv = &mut gq[(start + j) * width + 2 * d + h * dk..][..dk];
                    gv.iter_mut().zip(go).for_each(|(a, b)| *a += prow[j] * b);
                }
                let inner = dot(prow, &dp[..len]);
                for j in 0..len {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..dk {
                        let kj = src[(start + j) * width + d + h * dk + t];
                        let qi = src[(start + i) * width + h * dk + t];
                        gq[(start + i) * width + h * dk + t] += ds * kj;
                        gq[(start + j) * width + d + h * dk + t] += ds * qi;
                    }
                }
            }
        }
    }
}

trait CloneDataIf {
    fn clone_data_if(&self, cond: bool) -> Option<Vec<f64>>;
}

impl CloneDataIf for Tensor {
    fn clone_data_if(&self, cond: bool) -> Option<Vec<f64>> {
        cond.then(|| self.data().to_vec())
    }
}

fn scaled_row(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    row.iter().map(|&v| (v - max) / temperature).collect()
}

/// `ln Σ_k exp(z_k)`, optionally leaving out index `skip`; an empty sum gives `-inf`.
fn log_sum_exp(z: &[f64], skip: Option<usize>) -> f64 {
    let keep = |k: &usize| Some(*k) != skip;
    let max = (0..z.len()).filter(keep).fold(f64::NEG_INFINITY, |m, k| m.max(z[k]));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + (0..z.len()).filter(keep).map(|k| (z[k] - max).exp()).sum::<f64>().ln()
}
