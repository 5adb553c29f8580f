use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Ordered, named collection of parameter tensors.
///
/// Models address their parameters by position, which keeps binding to a tape, EMA
/// blending, optimiser state and checkpoints all a flat walk over the same list.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Records every tensor as a constant leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Replaces the values with those of `other`, which must share the layout.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Shape {
                op: "assign",
                lhs: vec![self.len()],
                rhs: vec![other.len()],
            });
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("length matches shape")
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn init<R: Rng>(set: &mut ParamSet, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = set.push(format!("{name}.weight"), normal_tensor(rng, &[fan_in, fan_out], std));
        let b = set.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.w])?;
        tape.add_row(y, vars[self.b])
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: usize,
    pub bias: usize,
}

impl Norm {
    pub fn init(set: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = set.push(format!("{name}.gain"), Tensor::filled(&[dim], 1.0));
        let bias = set.push(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, vars[self.gain], vars[self.bias])
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: Norm,
    qkv: Linear,
    out: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    pub fn init<R: Rng>(set: &mut ParamSet, rng: &mut R, name: &str, d_model: usize, ff: usize) -> Self {
        Self {
            ln1: Norm::init(set, &format!("{name}.ln1"), d_model),
            qkv: Linear::init(set, rng, &format!("{name}.qkv"), d_model, 3 * d_model),
            out: Linear::init(set, rng, &format!("{name}.out"), d_model, d_model),
            ln2: Norm::init(set, &format!("{name}.ln2"), d_model),
            ff1: Linear::init(set, rng, &format!("{name}.ff1"), d_model, ff),
            ff2: Linear::init(set, rng, &format!("{name}.ff2"), ff, d_model),
        }
    }

    /// Returns the block output and the attention node (for trace export).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> Result<(Var, Var)> {
        let h = self.ln1.forward(tape, vars, x)?;
        let qkv = self.qkv.forward(tape, vars, h)?;
        let attn = tape.attention(qkv, segments, heads)?;
        let o = self.out.forward(tape, vars, attn)?;
        let x = tape.add(x, o)?;
        let h = self.ln2.forward(tape, vars, x)?;
        let h = self.ff1.forward(tape, vars, h)?;
        let h = tape.gelu(h);
        let h = self.ff2.forward(tape, vars, h)?;
        Ok((tape.add(x, h)?, attn))
    }
}

/// Two-layer perceptron head with a GELU in between (BYOL projector / predictor).
#[derive(Clone, Debug)]
pub struct MlpHead {
    params: ParamSet,
    fc1: Linear,
    fc2: Linear,
}

impl MlpHead {
    pub fn new<R: Rng>(rng: &mut R, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        let mut params = ParamSet::new();
        let fc1 = Linear::init(&mut params, rng, &format!("{name}.fc1"), d_in, hidden);
        let fc2 = Linear::init(&mut params, rng, &format!("{name}.fc2"), hidden, d_out);
        Self { params, fc1, fc2 }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, vars, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, vars, h)
    }
}
