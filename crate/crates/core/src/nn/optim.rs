//! Adam with decoupled L2 weight decay.

use serde::{Deserialize, Serialize};

use super::tape::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    pub step: u64,
    #[serde(skip)]
    m: Vec<Tensor>,
    #[serde(skip)]
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, l2: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, l2, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update. `grads` must match `params` shape for shape.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        if self.m.len() != params.len() {
            self.m = params.zeros_like();
            self.v = params.zeros_like();
        }
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let g = grads[i].data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * g;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * g * g;
                let mh = m.data[j] / b1c;
                let vh = v.data[j] / b2c;
                p.data[j] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.l2 * p.data[j]);
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::default();
        p.add("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..500 {
            let g = vec![Tensor::from_vec(1, 2, p.tensors[0].data.iter().map(|x| 2.0 * x).collect())];
            opt.update(&mut p, &g);
        }
        assert!(p.tensors[0].data.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut p = ParamStore::default();
        p.add("x", Tensor::from_vec(1, 1, vec![2.0]));
        let mut opt = Adam::new(0.1, 0.5);
        opt.update(&mut p, &[Tensor::zeros(1, 1)]);
        assert!((p.tensors[0].data[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].sq_norm() - 1.0).abs() < 1e-12);
    }
}
