//! Bias-corrected Adam over the trainable entries of a [`ParamStore`].

use super::TrainError;
use crate::io::OptimizerState;
use crate::models::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moments for every trainable parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    /// `(store index, m, v)`.
    pub moments: Vec<(usize, Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let moments = params
            .trainable()
            .into_iter()
            .map(|i| {
                let d = params.value(i).dims().to_vec();
                (i, Tensor::zeros(d.clone()), Tensor::zeros(d))
            })
            .collect();
        Self { t: 0, moments }
    }

    /// One update. `grads` is indexed like the store; every trainable entry
    /// needs a gradient of matching shape.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<(), TrainError> {
        for (i, _, _) in &self.moments {
            match grads.get(*i).and_then(Option::as_ref) {
                Some(g) if g.dims() == params.value(*i).dims() => {}
                _ => return Err(TrainError::MissingGrad(params.entry(*i).name.clone())),
            }
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, m, v) in &mut self.moments {
            let g = grads[*i].as_ref().expect("checked above").data();
            let p = params.value_mut(*i).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + EPS);
            }
        }
        Ok(())
    }

    pub fn snap_f32(&mut self) {
        for (_, m, v) in &mut self.moments {
            crate::models::params::snap_f32(m.data_mut());
            crate::models::params::snap_f32(v.data_mut());
        }
    }

    pub fn to_optimizer_state(&self, params: &ParamStore) -> OptimizerState {
        OptimizerState {
            step: self.t,
            moments: self
                .moments
                .iter()
                .map(|(i, m, v)| (params.entry(*i).name.clone(), m.clone(), v.clone()))
                .collect(),
            schedule: Default::default(),
        }
    }

    pub fn from_optimizer_state(
        s: &OptimizerState,
        params: &ParamStore,
    ) -> Result<Self, TrainError> {
        let mut out = Self::new(params);
        if s.moments.len() != out.moments.len() {
            return Err(TrainError::Resume(format!(
                "optimizer has {} moment pairs, model has {} trainable tensors",
                s.moments.len(),
                out.moments.len()
            )));
        }
        for (name, m, v) in &s.moments {
            let i = params
                .position(name)
                .ok_or_else(|| TrainError::Resume(format!("unknown parameter {name}")))?;
            let slot = out
                .moments
                .iter_mut()
                .find(|e| e.0 == i)
                .ok_or_else(|| TrainError::Resume(format!("{name} is not trainable")))?;
            if m.dims() != slot.1.dims() || v.dims() != slot.2.dims() {
                return Err(TrainError::Resume(format!(
                    "moment shape mismatch for {name}"
                )));
            }
            slot.1 = m.clone();
            slot.2 = v.clone();
        }
        out.t = s.step;
        Ok(out)
    }
}
