//! AdamW with per-group learning rates, linear decay and global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::{Mat, Real};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
        }
    }
}

/// Multiplier `1 - step / total`, floored at zero.
pub fn linear_decay(step: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (1.0 - step as f64 / total as f64).max(0.0)
}

/// Sums per-parameter gradients over micro-batches.
#[derive(Clone, Debug)]
pub struct GradBuffer<T> {
    sums: BTreeMap<ParamId, Mat<T>>,
    examples: usize,
}

impl<T: Real> Default for GradBuffer<T> {
    fn default() -> Self {
        Self {
            sums: BTreeMap::new(),
            examples: 0,
        }
    }
}

impl<T: Real> GradBuffer<T> {
    pub fn add(&mut self, grads: Vec<(ParamId, Mat<T>)>, examples: usize) -> Result<()> {
        for (id, g) in grads {
            match self.sums.get_mut(&id) {
                Some(s) if s.shape() != g.shape() => {
                    return Err(Error::Accumulation(format!(
                        "gradient for param {} changed shape {:?} -> {:?}",
                        id.0,
                        s.shape(),
                        g.shape()
                    )))
                }
                Some(s) => s.add_assign(&g),
                None => {
                    self.sums.insert(id, g);
                }
            }
        }
        self.examples += examples;
        Ok(())
    }

    pub fn examples(&self) -> usize {
        self.examples
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    /// Mean gradient per example; resets the buffer.
    pub fn take_mean(&mut self) -> Vec<(ParamId, Mat<T>)> {
        let n = T::from_usize(self.examples.max(1)).unwrap();
        self.examples = 0;
        std::mem::take(&mut self.sums)
            .into_iter()
            .map(|(id, mut g)| {
                g.scale(T::one() / n);
                (id, g)
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Moments<T> {
    m: Mat<T>,
    v: Mat<T>,
    t: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update and returns the pre-clipping global gradient norm.
    /// `lr` gives the already-scheduled learning rate of each group.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Mat<T>)],
        lr: impl Fn(ParamGroup) -> f64,
    ) -> f64 {
        let norm = grads
            .iter()
            .map(|(_, g)| g.sq_norm().to_f64().unwrap())
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.max_grad_norm > 0.0 && norm > self.cfg.max_grad_norm {
            self.cfg.max_grad_norm / (norm + 1e-6)
        } else {
            1.0
        };
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        for (id, g) in grads {
            let group = store.get(*id).group;
            let rate = lr(group);
            if rate == 0.0 {
                continue;
            }
            let p = store.value_mut(*id);
            let st = self.state.entry(*id).or_insert_with(|| Moments {
                m: Mat::zeros(p.rows, p.cols),
                v: Mat::zeros(p.rows, p.cols),
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - b1.powi(st.t as i32);
            let bc2 = 1.0 - b2.powi(st.t as i32);
            // Biases and LayerNorm parameters are single rows and skip decay.
            let decay = if p.rows > 1 { self.cfg.weight_decay } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i].to_f64().unwrap() * clip;
                let m = b1 * st.m.data[i].to_f64().unwrap() + (1.0 - b1) * gi;
                let v = b2 * st.v.data[i].to_f64().unwrap() + (1.0 - b2) * gi * gi;
                st.m.data[i] = T::from_f64_lossy(m);
                st.v.data[i] = T::from_f64_lossy(v);
                let mut w = p.data[i].to_f64().unwrap();
                w -= rate * decay * w;
                w -= rate * (m / bc1) / ((v / bc2).sqrt() + eps);
                p.data[i] = T::from_f64_lossy(w);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_round_trips_through_json() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", ParamGroup::Generator, Mat::from_vec(2, 1, vec![1.0, -1.0]));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, &[(id, Mat::from_vec(2, 1, vec![0.3, 0.1]))], |_| 0.01);
        let json = serde_json::to_string(&opt).unwrap();
        let back: AdamW<f32> = serde_json::from_str(&json).unwrap();
        let mut a = store.clone();
        let mut b = store.clone();
        let g = Mat::from_vec(2, 1, vec![-0.2, 0.4]);
        opt.step(&mut a, &[(id, g.clone())], |_| 0.01);
        let mut back = back;
        back.step(&mut b, &[(id, g)], |_| 0.01);
        assert_eq!(a.value(id).data, b.value(id).data);
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(linear_decay(0, 10), 1.0);
        assert!((linear_decay(5, 10) - 0.5).abs() < 1e-12);
        assert_eq!(linear_decay(12, 10), 0.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamGroup::Generator, Mat::from_vec(1, 2, vec![1.0, -1.0]));
        let mut opt = AdamW::new(AdamWConfig {
            max_grad_norm: 0.0,
            ..Default::default()
        });
        let g = Mat::from_vec(1, 2, vec![0.5, -3.0]);
        opt.step(&mut store, &[(id, g)], |_| 0.1);
        let w = store.value(id);
        assert!((w.data[0] - 0.9).abs() < 1e-6);
        assert!((w.data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_reports_raw_norm_and_zero_lr_freezes() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", ParamGroup::Generator, Mat::from_vec(1, 1, vec![0.0]));
        let b = store.add("b", ParamGroup::EntitySelector, Mat::from_vec(1, 1, vec![0.0]));
        let mut opt = AdamW::new(AdamWConfig::default());
        let norm = opt.step(
            &mut store,
            &[(a, Mat::scalar(3.0)), (b, Mat::scalar(4.0))],
            |g| if g == ParamGroup::EntitySelector { 0.0 } else { 0.01 },
        );
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(store.value(b).data[0], 0.0);
        assert!(store.value(a).data[0] < 0.0);
    }

    #[test]
    fn buffer_averages_and_rejects_shape_changes() {
        let mut buf = GradBuffer::<f64>::default();
        buf.add(vec![(ParamId(0), Mat::scalar(2.0))], 1).unwrap();
        buf.add(vec![(ParamId(0), Mat::scalar(4.0))], 1).unwrap();
        assert!(buf.add(vec![(ParamId(0), Mat::zeros(2, 1))], 1).is_err());
        let mean = buf.take_mean();
        assert_eq!(mean[0].1.data[0], 3.0);
        assert!(buf.is_empty());
    }
}
