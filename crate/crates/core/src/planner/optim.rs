use serde::{Deserialize, Serialize};

use super::network::Tensor;
use super::tensor::Float;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: Float>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data.iter_mut().enumerate() {
                let g = grads[k][i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                let xv = x.to_f64();
                let next = xv
                    - self.lr * self.weight_decay * xv
                    - self.lr * mhat / (vhat.sqrt() + self.eps);
                *x = T::from_f64(next);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g) (up to eps)
        let mut p = vec![Tensor {
            name: "x".into(),
            shape: vec![2],
            data: vec![1.0f64, -1.0],
        }];
        let mut opt = Adam::new(0.1, 0.0);
        opt.step(&mut p, &[vec![3.0, -0.5]]);
        assert!((p[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = vec![Tensor {
            name: "x".into(),
            shape: vec![1],
            data: vec![2.0f64],
        }];
        let mut opt = Adam::new(0.5, 0.1);
        opt.step(&mut p, &[vec![0.0]]);
        assert!((p[0].data[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Tensor {
            name: "x".into(),
            shape: vec![1],
            data: vec![5.0f64],
        }];
        let mut opt = Adam::new(0.05, 0.0);
        for _ in 0..2000 {
            let g = vec![vec![2.0 * (p[0].data[0] - 1.5)]];
            opt.step(&mut p, &g);
        }
        assert!((p[0].data[0] - 1.5).abs() < 1e-3);
    }
}
