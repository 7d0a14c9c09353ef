//! AdamW with decoupled weight decay.

use crate::autodiff::Matrix;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 9e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, m)| Matrix::zeros(m.dim())).collect::<Vec<_>>();
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.value_mut(id);
            p.mapv_inplace(|x| x * (1.0 - c.lr * c.weight_decay));
        }
        for (id, g) in grads {
            let k = id.index();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let p = store.value_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_matches_hand_computation() {
        let mut s = ParamStore::new();
        let id = s.insert("w", array![[1.0, -2.0]]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s, &[(id, array![[0.5, -4.0]])]);
        // Bias-corrected first step moves each weight by lr·sign(g) (up to eps).
        let w = s.value(id);
        let decay = 1.0 - 0.1 * 0.01;
        assert!((w[[0, 0]] - (decay - 0.1)).abs() < 1e-6);
        assert!((w[[0, 1]] - (-2.0 * decay + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut s = ParamStore::new();
        let id = s.insert("w", array![[3.0]]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        for _ in 0..500 {
            let g = s.value(id).mapv(|x| 2.0 * (x - 1.0));
            opt.step(&mut s, &[(id, g)]);
        }
        assert!((s.value(id)[[0, 0]] - 1.0).abs() < 1e-2);
    }
}
