use serde::{Deserialize, Serialize};

use super::tensor::{GradBuf, Gradients, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers per parameter, same shapes as the params.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update over every parameter (untouched
    /// gradients count as zero), then clears `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut Gradients) {
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let t = params.get_mut(id);
            let cols = t.cols;
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let mut update = |k: usize, g: f64, data: &mut [f32]| {
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                data[k] = (data[k] as f64 - lr * mh / (vh.sqrt() + eps)) as f32;
            };
            match grads.get(id) {
                Some(GradBuf::Dense(g)) => {
                    for (k, &gk) in g.iter().enumerate() {
                        update(k, gk, &mut t.data);
                    }
                }
                Some(GradBuf::Rows(rows)) => {
                    let mut it = rows.iter().peekable();
                    for r in 0..t.rows {
                        let row_grad = match it.peek() {
                            Some((&rr, g)) if rr == r => {
                                let g = *g;
                                it.next();
                                Some(g)
                            }
                            _ => None,
                        };
                        for c in 0..cols {
                            let g = row_grad.map_or(0.0, |g| g[c]);
                            update(r * cols + c, g, &mut t.data);
                        }
                    }
                }
                None => {
                    for k in 0..t.data.len() {
                        update(k, 0.0, &mut t.data);
                    }
                }
            }
        }
        grads.clear();
    }
}
