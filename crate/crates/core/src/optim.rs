//! Adam with bias correction, plus the warm-up + cosine learning-rate schedule.

use crate::params::{Grads, ParamStore};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("gradient for parameter {name} has shape {got:?}, parameter has {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("optimizer state tracks {state} parameters, store has {store}")]
    StateSize { state: usize, store: usize },
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    /// Zeroed moments for every parameter in `params`, default hyperparameters.
    pub fn new(params: &ParamStore) -> Self {
        let m: Vec<Tensor> = params
            .ids()
            .map(|id| Tensor::zeros(params.get(id).shape().to_vec()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are left
    /// alone and their moments untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f32) -> Result<(), OptimError> {
        if self.m.len() != params.len() {
            return Err(OptimError::StateSize {
                state: self.m.len(),
                store: params.len(),
            });
        }
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.shape() != params.get(id).shape() {
                    return Err(OptimError::ShapeMismatch {
                        name: params.name(id).to_string(),
                        got: g.shape().to_vec(),
                        want: params.get(id).shape().to_vec(),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps as f64);
        for id in params.ids() {
            let Some(g) = grads.get(id) else {
                continue;
            };
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                p[j] = (p[j] as f64 - lr as f64 * mhat / (vhat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Linear warm-up from `lr_min` to `lr_max`, then cosine annealing back to
/// `lr_min` at the last epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(lr_max: f64, lr_min: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self, OptimError> {
        let s = Self {
            lr_max,
            lr_min,
            warmup_epochs,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if self.total_epochs == 0 {
            return Err(OptimError::BadSchedule("zero epochs".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(OptimError::BadSchedule(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(OptimError::BadSchedule(format!(
                "warm-up {} must be shorter than {} epochs",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64, OptimError> {
        if epoch >= self.total_epochs {
            return Err(OptimError::EpochOutOfRange {
                epoch,
                total: self.total_epochs,
            });
        }
        let last = self.total_epochs - 1;
        if epoch == last {
            return Ok(self.lr_min);
        }
        let span = self.lr_max - self.lr_min;
        if epoch < self.warmup_epochs {
            return Ok(self.lr_min + span * epoch as f64 / self.warmup_epochs as f64);
        }
        let progress = (epoch - self.warmup_epochs) as f64 / (last - self.warmup_epochs) as f64;
        Ok(self.lr_min + 0.5 * span * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    fn store_with(values: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new([values.len()], values.to_vec()).unwrap());
        s
    }

    fn grads_for(store: &ParamStore, g: &[f32]) -> Grads {
        let mut gr = Grads::new(store.len());
        gr.accumulate(ParamId(0), &Tensor::new([g.len()], g.to_vec()).unwrap());
        gr
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with(&[0.5, -1.0, 2.0]);
        let before = s.clone();
        let mut st = AdamState::new(&s);
        let g = grads_for(&s, &[0.0, 0.0, 0.0]);
        st.step(&mut s, &g, 1e-3).unwrap();
        assert_eq!(s, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = store_with(&[1.0, 1.0]);
        let mut st = AdamState::new(&s);
        let g = grads_for(&s, &[0.3, -7.0]);
        st.step(&mut s, &g, 0.01).unwrap();
        // mhat = g, vhat = g², so the step is lr·g/(|g|+eps)
        assert!((s.get(ParamId(0)).data()[0] - 0.99).abs() < 1e-6);
        assert!((s.get(ParamId(0)).data()[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn two_steps_match_hand_rolled_recurrence() {
        let mut s = store_with(&[0.0]);
        let mut st = AdamState::new(&s);
        let g = grads_for(&s, &[1.0]);
        let lr = 0.1f64;
        st.step(&mut s, &g, lr as f32).unwrap();
        st.step(&mut s, &g, lr as f32).unwrap();
        // Oracle: explicit recurrence in f64.
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((s.get(ParamId(0)).data()[0] as f64 - p).abs() < 1e-6, "{p}");
        assert_eq!(st.step, 2);
    }

    #[test]
    fn gradient_shape_mismatch_is_rejected() {
        let mut s = store_with(&[0.0, 1.0]);
        let mut st = AdamState::new(&s);
        let mut g = Grads::new(1);
        g.accumulate(ParamId(0), &Tensor::zeros([3]));
        assert!(matches!(st.step(&mut s, &g, 0.1), Err(OptimError::ShapeMismatch { .. })));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_hits_its_anchor_points() {
        let s = LrSchedule::new(4e-4, 1e-6, 50, 700).unwrap();
        assert_eq!(s.lr_at_epoch(50).unwrap(), 4e-4);
        assert_eq!(s.lr_at_epoch(699).unwrap(), 1e-6);
        assert_eq!(s.lr_at_epoch(0).unwrap(), 1e-6);
        // cosine midpoint: (699 - 50) is odd, so use a schedule with an even span
        let s = LrSchedule::new(4e-4, 1e-6, 50, 651).unwrap();
        let mid = s.lr_at_epoch(50 + 300).unwrap();
        assert!((mid - (4e-4 + 1e-6) / 2.0).abs() < 1e-9);
        assert!(s.lr_at_epoch(651).is_err());
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(LrSchedule::new(1e-6, 1e-5, 0, 10).is_err());
        assert!(LrSchedule::new(1e-4, 1e-6, 10, 10).is_err());
        assert!(LrSchedule::new(1e-4, 1e-6, 0, 0).is_err());
    }
}
