use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `lr(t) = base * (1 + cos(pi * t / T)) / 2`, held at zero past `T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        (self.base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0).max(0.0)
    }
}

pub struct OptimizerState<T> {
    pub schedule: CosineSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Momentum 0.9, weight decay 5e-5, label smoothing 0.1.
    pub fn new(schedule: CosineSchedule) -> Self {
        Self {
            schedule,
            momentum: 0.9,
            weight_decay: 5e-5,
            label_smoothing: 0.1,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.velocity.get(id.0).and_then(Option::as_ref)
    }
}

/// One SGD step at schedule position `step`:
/// `v = m*v + g + wd*w; w -= lr(step) * v`.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut OptimizerState<T>,
    step: usize,
) -> Result<()> {
    if state.velocity.len() < params.len() {
        state.velocity.resize_with(params.len(), || None);
    }
    let lr = T::lit(state.schedule.lr(step));
    let m = T::lit(state.momentum);
    for (id, g) in grads {
        if id.0 >= params.len() {
            return Err(Error::invalid(format!("gradient for unknown parameter {}", id.0)));
        }
        let p = params.get_mut(*id);
        if p.value.shape() != g.shape() {
            return Err(Error::Tensor {
                name: p.name.clone(),
                message: format!("gradient shape {:?} vs value {:?}", g.shape(), p.value.shape()),
            });
        }
        let wd = T::lit(if p.decay { state.weight_decay } else { 0.0 });
        let v = state.velocity[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
        for ((v, &g), w) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
            *v = m * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}
