//! Adam with bias correction and the reduce-on-plateau learning-rate rule.

use thiserror::Error;

use crate::params::Params;
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("optimizer state holds {state} slots, parameter store has {params} trainable entries")]
    StateMismatch { state: usize, params: usize },
    #[error("state slot {index} has {state} elements, parameter has {params}")]
    SlotShapeMismatch {
        index: usize,
        state: usize,
        params: usize,
    },
}

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments<E> {
    m: Vec<E>,
    v: Vec<E>,
}

/// First/second moment buffers per trainable parameter plus the shared step
/// counter, aligned with the store's trainable entries in order.
#[derive(Debug, Clone)]
pub struct AdamState<E> {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    slots: Vec<Moments<E>>,
    t: u64,
}

impl<E: Scalar> AdamState<E> {
    pub fn new(params: &Params<E>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let slots = params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| Moments {
                m: vec![E::zero(); e.tensor.numel()],
                v: vec![E::zero(); e.tensor.numel()],
            })
            .collect();
        Self {
            beta1,
            beta2,
            epsilon,
            slots,
            t: 0,
        }
    }

    pub fn with_defaults(params: &Params<E>) -> Self {
        Self::new(params, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Flat views for checkpointing: (name suffix id, m, v) per slot.
    pub fn moments(&self) -> impl Iterator<Item = (&[E], &[E])> {
        self.slots.iter().map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    pub fn restore_moments(&mut self, index: usize, m: &[E], v: &[E]) -> Result<(), OptimError> {
        let slot = self.slots.get_mut(index).ok_or(OptimError::StateMismatch {
            state: index,
            params: 0,
        })?;
        if m.len() != slot.m.len() || v.len() != slot.v.len() {
            return Err(OptimError::SlotShapeMismatch {
                index,
                state: slot.m.len(),
                params: m.len(),
            });
        }
        slot.m.copy_from_slice(m);
        slot.v.copy_from_slice(v);
        Ok(())
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }
}

/// One bias-corrected Adam update over every trainable parameter that has a
/// gradient. Increments the step counter once. Optionally clips the global
/// gradient norm first.
pub fn adam_step<E: Scalar>(
    params: &mut Params<E>,
    state: &mut AdamState<E>,
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<(), OptimError> {
    let trainable: Vec<crate::params::ParamId> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    if trainable.len() != state.slots.len() {
        return Err(OptimError::StateMismatch {
            state: state.slots.len(),
            params: trainable.len(),
        });
    }

    let clip_scale = match grad_clip {
        Some(max_norm) => {
            let mut sq = 0.0f64;
            for &id in &trainable {
                if let Some(g) = params.get(id).grad.as_deref() {
                    for &v in g {
                        let v = v.to_f64();
                        sq += v * v;
                    }
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.t += 1;
    let t = state.t as i32;
    let beta1 = E::from_f64(state.beta1);
    let beta2 = E::from_f64(state.beta2);
    let one_minus_b1 = E::from_f64(1.0 - state.beta1);
    let one_minus_b2 = E::from_f64(1.0 - state.beta2);
    let corr1 = E::from_f64(1.0 - state.beta1.powi(t));
    let corr2 = E::from_f64(1.0 - state.beta2.powi(t));
    let eps = E::from_f64(state.epsilon);
    let lr_e = E::from_f64(lr);
    let clip = E::from_f64(clip_scale);

    for (slot, &id) in state.slots.iter_mut().zip(&trainable) {
        let tensor = params.get_mut(id);
        if slot.m.len() != tensor.numel() {
            return Err(OptimError::SlotShapeMismatch {
                index: id.0,
                state: slot.m.len(),
                params: tensor.numel(),
            });
        }
        let Some(grad) = tensor.grad.clone() else {
            continue;
        };
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i] * clip;
            slot.m[i] = beta1 * slot.m[i] + one_minus_b1 * g;
            slot.v[i] = beta2 * slot.v[i] + one_minus_b2 * g * g;
            let m_hat = slot.m[i] / corr1;
            let v_hat = slot.v[i] / corr2;
            data[i] = data[i] - lr_e * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 10,
            min_lr: 1e-6,
        }
    }
}

/// Reduce-on-plateau over a validation-loss history (mode: min).
///
/// Replays the counter over the full history: the running best resets the
/// counter on every strict improvement; once `patience` consecutive epochs
/// fail to improve, a reduction fires and the counter resets. If the latest
/// epoch fired a reduction, returns `max(current_lr * factor, min_lr)`;
/// otherwise returns `current_lr` unchanged. Never increases the rate.
pub fn plateau_schedule(
    history: &[f64],
    current_lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
) -> f64 {
    assert!(patience >= 1, "patience must be at least 1");
    assert!((0.0..1.0).contains(&factor), "factor must lie in (0, 1)");
    let mut best = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut reduced_now = false;
    for &loss in history {
        reduced_now = false;
        if loss < best {
            best = loss;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= patience {
                bad_epochs = 0;
                reduced_now = true;
            }
        }
    }
    if reduced_now {
        (current_lr * factor).max(min_lr)
    } else {
        current_lr
    }
}
