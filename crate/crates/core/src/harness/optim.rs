use crate::encoders::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adaptive-moment optimiser without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<Tensor>>,
    second: Vec<Vec<Tensor>>,
}

impl Adam {
    /// One moment buffer per tensor of each group, zero-initialised.
    pub fn new(lr: f64, groups: &[&ParamSet]) -> Self {
        let zeros = |g: &&ParamSet| g.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: groups.iter().map(zeros).collect(),
            second: groups.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads[g][k]` is the gradient of tensor `k` in group `g`.
    pub fn step(&mut self, groups: &mut [&mut ParamSet], grads: &[Vec<Vec<f64>>]) -> Result<()> {
        if groups.len() != self.first.len() || grads.len() != groups.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![self.first.len()],
                rhs: vec![groups.len(), grads.len()],
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (g, group) in groups.iter_mut().enumerate() {
            for (k, param) in group.tensors_mut().iter_mut().enumerate() {
                let grad = &grads[g][k];
                if grad.len() != param.numel() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        lhs: param.shape().to_vec(),
                        rhs: vec![grad.len()],
                    });
                }
                let m = self.first[g][k].data_mut();
                let v = self.second[g][k].data_mut();
                for (i, p) in param.data_mut().iter_mut().enumerate() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    *p -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut set = ParamSet::new();
        set.push("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::new(0.1, &[&set]);
        adam.step(&mut [&mut set], &[vec![vec![3.0, -0.5, 0.0]]]).unwrap();
        let w = set.get(0).data();
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] + 1.9).abs() < 1e-8);
        assert_eq!(w[2], 0.5);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut set = ParamSet::new();
        set.push("w", Tensor::vector(vec![5.0, -3.0]));
        let mut adam = Adam::new(0.05, &[&set]);
        for _ in 0..2000 {
            let g: Vec<f64> = set.get(0).data().iter().map(|w| 2.0 * (w - 1.0)).collect();
            adam.step(&mut [&mut set], &[vec![g]]).unwrap();
        }
        for &w in set.get(0).data() {
            assert!((w - 1.0).abs() < 1e-3);
        }
        assert!(adam.step(&mut [&mut set], &[vec![vec![1.0]]]).is_err());
    }
}
