use serde::{Deserialize, Serialize};

use super::{Grads, Group, Mat, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments and step counts, one slot per parameter.
///
/// A parameter that is skipped (frozen, or absent from the gradient set)
/// keeps its moments and step count untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        let zeros = |p: &super::Param| Mat::zeros(p.value.rows(), p.value.cols());
        Adam {
            config,
            m: params.iter().map(|(_, p)| zeros(p)).collect(),
            v: params.iter().map(|(_, p)| zeros(p)).collect(),
            steps: vec![0; params.len()],
        }
    }

    pub fn first_moment(&self, idx: usize) -> &Mat {
        &self.m[idx]
    }

    pub fn second_moment(&self, idx: usize) -> &Mat {
        &self.v[idx]
    }

    pub fn steps(&self, idx: usize) -> u64 {
        self.steps[idx]
    }

    /// Applies one update to every parameter whose group passes `trainable`.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Grads, trainable: impl Fn(Group) -> bool) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            if !trainable(p.group) {
                continue;
            }
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm over trainable groups is
/// at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(
    params: &ParameterSet,
    grads: &mut Grads,
    max_norm: f64,
    trainable: impl Fn(Group) -> bool,
) -> f64 {
    let norm = grads
        .iter()
        .filter(|(id, _)| trainable(params.get(*id).group))
        .map(|(_, g)| g.sq_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}
