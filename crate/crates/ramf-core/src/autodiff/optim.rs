use super::tensor::Tensor;
use crate::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter within a process; used to route tape gradients
/// back to their owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

/// Trainable tensor with its gradient accumulator and momentum buffer.
/// Gradients are zeroed by the optimizer step, never by the tape.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    value: Tensor,
    grad: Tensor,
    momentum: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            value,
            grad: Tensor::zeros(shape.clone()),
            momentum: Tensor::zeros(shape),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Direct value access for structural edits (head growth, clamping).
    /// Grad and momentum must be kept shape-consistent by the caller;
    /// prefer [`Parameter::replace_value`] which does that.
    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    pub fn momentum(&self) -> &Tensor {
        &self.momentum
    }

    /// Swap in a new value tensor (possibly of a new shape), resizing grad
    /// to zeros and rebuilding the momentum buffer via `carry`, which maps
    /// the old momentum to the new shape (e.g. keeping surviving rows).
    pub fn replace_value(&mut self, value: Tensor, carry: impl FnOnce(&Tensor) -> Tensor) {
        let momentum = carry(&self.momentum);
        debug_assert_eq!(momentum.shape(), value.shape());
        self.grad = Tensor::zeros(value.shape().to_vec());
        self.momentum = momentum;
        self.value = value;
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

impl Clone for Parameter {
    /// A clone is a distinct parameter: it gets a fresh id so tape bindings
    /// never alias between an original and its copy.
    fn clone(&self) -> Self {
        Parameter {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            value: self.value.clone(),
            grad: self.grad.clone(),
            momentum: self.momentum.clone(),
        }
    }
}

/// Cosine-annealed momentum-SGD hyperparameters for one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lr_max must be positive, got {}",
                self.lr_max
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::InvalidArgument(format!(
                "lr_min must lie in [0, lr_max], got {}",
                self.lr_min
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument("total_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// lr(step) = lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// One SGD update on a single parameter:
///   v <- momentum * v + (g + weight_decay * w)
///   w <- w - lr(step) * v
/// and the gradient is zeroed afterwards.
pub fn sgd_step_with_schedule(p: &mut Parameter, schedule: &Schedule, step: usize) {
    let lr = schedule.lr_at(step);
    let (m, wd) = (schedule.momentum, schedule.weight_decay);
    let w = p.value.data_mut();
    let g = p.grad.data_mut();
    let v = p.momentum.data_mut();
    for i in 0..w.len() {
        v[i] = m * v[i] + (g[i] + wd * w[i]);
        w[i] -= lr * v[i];
        g[i] = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_schedule(lr: f64, momentum: f64) -> Schedule {
        // lr_min == lr_max gives a constant learning rate
        Schedule {
            lr_max: lr,
            lr_min: lr,
            total_steps: 100,
            momentum,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn sgd_plain_step() {
        // momentum 0, weight_decay 0, w=1, g=1, lr=0.1 -> w=0.9
        let mut p = Parameter::new(Tensor::scalar(1.0));
        p.grad_mut().data_mut()[0] = 1.0;
        sgd_step_with_schedule(&mut p, &plain_schedule(0.1, 0.0), 0);
        assert_eq!(p.value().data()[0], 0.9);
        assert_eq!(p.grad().data()[0], 0.0, "grad zeroed after step");
    }

    #[test]
    fn sgd_momentum_recurrence() {
        // momentum 0.9, two steps with g=1, lr fixed 0.1, from w=0:
        // v1=1, w1=-0.1, v2=1.9, w2=-0.29
        let mut p = Parameter::new(Tensor::scalar(0.0));
        let s = plain_schedule(0.1, 0.9);
        p.grad_mut().data_mut()[0] = 1.0;
        sgd_step_with_schedule(&mut p, &s, 0);
        assert!((p.value().data()[0] - (-0.1)).abs() < 1e-15);
        p.grad_mut().data_mut()[0] = 1.0;
        sgd_step_with_schedule(&mut p, &s, 1);
        assert!((p.value().data()[0] - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let s = Schedule {
            lr_max: 0.1,
            lr_min: 0.001,
            total_steps: 200,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert!((s.lr_at(0) - 0.1).abs() < 1e-15);
        assert!((s.lr_at(200) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(100) - 0.0505).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        let mut s = Schedule {
            lr_max: 0.1,
            lr_min: 0.2,
            total_steps: 10,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert!(s.validate().is_err(), "lr_min > lr_max");
        s.lr_min = 0.0;
        assert!(s.validate().is_ok());
        s.momentum = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn clone_gets_fresh_id() {
        let p = Parameter::new(Tensor::scalar(1.0));
        let q = p.clone();
        assert_ne!(p.id(), q.id());
        assert_eq!(p.value(), q.value());
    }
}
