use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::mlp::{Dense, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    /// Keras defaults.
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Adam state for one network.
pub struct Adam {
    params: AdamParams,
    t: i32,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

fn zeros_like(net: &Mlp) -> Vec<Dense> {
    net.layers
        .iter()
        .map(|l| Dense {
            w: ndarray::Array2::zeros(l.w.raw_dim()),
            b: ndarray::Array1::zeros(l.b.raw_dim()),
        })
        .collect()
}

impl Adam {
    pub fn new(net: &Mlp, params: AdamParams) -> Self {
        Self {
            params,
            t: 0,
            m: zeros_like(net),
            v: zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[Dense]) {
        self.t += 1;
        let AdamParams {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.params;
        let lr_t = lr * (1.0 - b2.powi(self.t)).sqrt() / (1.0 - b1.powi(self.t));
        for (((layer, g), m), v) in net.layers.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let upd = |p: &mut f64, &g: &f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr_t * *m / (v.sqrt() + eps);
            };
            Zip::from(&mut layer.w).and(&g.w).and(&mut m.w).and(&mut v.w).for_each(upd);
            Zip::from(&mut layer.b).and(&g.b).and(&mut m.b).and(&mut v.b).for_each(upd);
        }
    }
}
