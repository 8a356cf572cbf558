use ndarray::ArrayD;

use super::params::{ParamId, ParamStore};

/// Adam with bias correction; beta defaults (0.9, 0.999), eps 1e-8.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Option<ArrayD<f32>>>,
    v: Vec<Option<ArrayD<f32>>>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: (0..num_params).map(|_| None).collect(),
            v: (0..num_params).map(|_| None).collect(),
        }
    }

    /// Apply one update from (param, gradient) pairs. Parameters without a
    /// gradient this step keep their moment state untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32, grads: &[(ParamId, ArrayD<f32>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let m = self.m[id.0].get_or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [(ParamId, ArrayD<f32>)], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}
