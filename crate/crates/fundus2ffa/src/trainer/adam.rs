//! Adam with bias correction. Moment slots are created lazily in parameter
//! visit order, which is the networks' deterministic construction order.

use crate::error::{Error, Result};
use crate::nn::{Param, Tensor};

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    slots: Vec<Slot>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState {
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over every parameter the visitor yields. Gradients
    /// are consumed as-is; callers zero them between steps.
    pub fn step(
        &mut self,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        mut visit: impl FnMut(&mut dyn FnMut(String, &mut Param)),
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let slots = &mut self.slots;
        let mut idx = 0usize;
        visit(&mut |name, p| {
            if idx == slots.len() {
                slots.push(Slot {
                    name: name.clone(),
                    m: Tensor::zeros(p.value.shape()),
                    v: Tensor::zeros(p.value.shape()),
                });
            }
            let slot = &mut slots[idx];
            debug_assert_eq!(slot.name, name, "parameter visit order changed");
            let grads = p.grad.data();
            let ms = slot.m.data_mut();
            for ((m, &g), v) in ms.iter_mut().zip(grads).zip(slot.v.data_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            }
            for ((x, &m), &v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(slot.m.data())
                .zip(slot.v.data())
            {
                *x -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            }
            idx += 1;
        });
    }

    /// Moment tensors for checkpointing, prefixed `m.<param>` / `v.<param>`.
    pub fn export_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for slot in &self.slots {
            out.push((format!("{prefix}.m.{}", slot.name), slot.m.clone()));
        }
        for slot in &self.slots {
            out.push((format!("{prefix}.v.{}", slot.name), slot.v.clone()));
        }
        out
    }

    /// Rebuilds the moment slots from checkpoint tensors; the visitor
    /// provides the expected order and shapes.
    pub fn import_tensors(
        &mut self,
        prefix: &str,
        step: u64,
        tensors: &[(String, Tensor)],
        mut visit: impl FnMut(&mut dyn FnMut(String, &mut Param)),
    ) -> Result<()> {
        use std::collections::BTreeMap;
        let map: BTreeMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut slots = Vec::new();
        let mut err: Option<Error> = None;
        visit(&mut |name, p| {
            if err.is_some() {
                return;
            }
            let mkey = format!("{prefix}.m.{name}");
            let vkey = format!("{prefix}.v.{name}");
            match (map.get(mkey.as_str()), map.get(vkey.as_str())) {
                (Some(m), Some(v))
                    if m.shape() == p.value.shape() && v.shape() == p.value.shape() =>
                {
                    slots.push(Slot {
                        name,
                        m: (*m).clone(),
                        v: (*v).clone(),
                    });
                }
                _ => {
                    err = Some(Error::Data(format!(
                        "checkpoint optimizer state missing or misshapen for {name}"
                    )));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.slots = slots;
        self.step = step;
        Ok(())
    }
}
