//! Adam optimizer over flat parameter lists.
//!
//! Networks keep their parameters as plain tensors outside any graph, rebuild
//! a tape per sample, and feed the pulled gradients here.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. `params` and `grads` must line up with the sizes given at
    /// construction, in the same order every call.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            assert_eq!(g.len(), self.m[i].len(), "param {i} size changed");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Elementwise gradient accumulator for mini-batches.
pub fn accumulate_into(acc: &mut [Tensor], grads: &[Tensor]) {
    assert_eq!(acc.len(), grads.len());
    for (a, g) in acc.iter_mut().zip(grads) {
        for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
            *av += gv;
        }
    }
}

/// Scale every gradient in place, e.g. by `1/batch_size`.
pub fn scale_grads(grads: &mut [Tensor], c: f64) {
    for g in grads {
        for v in g.data_mut() {
            *v *= c;
        }
    }
}
