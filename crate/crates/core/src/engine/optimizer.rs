//! Adaptive-moment (Adam) optimizer over the parameter store.

use ndarray::ArrayD;

use crate::network::ParamStore;

/// First/second moment estimates aligned with [`ParamStore`] ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<ArrayD<f64>> = (0..store.len())
            .map(|i| ArrayD::zeros(store.value_at(i).raw_dim()))
            .collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update with bias-corrected moments.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[ArrayD<f64>],
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, &gv| *mv = beta1 * *mv + (1.0 - beta1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = beta2 * *vv + (1.0 - beta2) * gv * gv);
            let param = store.value_at_mut(i);
            let ps = param.as_slice_mut().unwrap();
            let ms = m.as_slice().unwrap();
            let vs = v.as_slice().unwrap();
            for ((p, &mv), &vv) in ps.iter_mut().zip(ms).zip(vs) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *p -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
    }
}
