use std::collections::BTreeMap;

use crate::error::{Result, SecaError};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

/// Adam with bias correction. Moments are keyed by parameter name and
/// created on first use, so a new parameter always starts from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) slots: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }

    pub fn slot(&self, name: &str) -> Option<&Moments> {
        self.slots.get(name)
    }

    pub fn step(&mut self, name: &str, value: &mut Tensor, grad: &Tensor) -> Result<()> {
        if value.shape() != grad.shape() {
            return Err(SecaError::ShapeMismatch(format!(
                "{name}: gradient {:?} for value {:?}",
                grad.shape(),
                value.shape()
            )));
        }
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
            t: 0,
        });
        if slot.m.shape() != value.shape() {
            return Err(SecaError::ShapeMismatch(format!("{name}: parameter changed shape")));
        }
        slot.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(slot.t as i32);
        let c2 = 1.0 - b2.powi(slot.t as i32);
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        for (i, (p, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *p -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        if !value.is_finite() {
            return Err(SecaError::NonFinite(format!("parameter {name} after update")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut adam = Adam::new(0.1);
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        adam.step("p", &mut p, &Tensor::vector(vec![3.0, -0.01, 0.0])).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn matches_reference_recurrence() {
        let mut adam = Adam::new(0.01);
        let mut p = Tensor::vector(vec![0.3]);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.3f64);
        for t in 1..=20 {
            let g = 2.0 * x - 1.0;
            let grad = Tensor::vector(vec![2.0 * p.data()[0] - 1.0]);
            adam.step("x", &mut p, &grad).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p.data()[0] - x).abs() < 1e-15);
        }
        assert_eq!(adam.slot("x").unwrap().t, 20);
    }

    #[test]
    fn shape_change_is_an_error() {
        let mut adam = Adam::new(0.1);
        let mut p = Tensor::vector(vec![1.0]);
        adam.step("p", &mut p, &Tensor::vector(vec![1.0])).unwrap();
        let mut q = Tensor::vector(vec![1.0, 2.0]);
        assert!(adam.step("p", &mut q, &Tensor::vector(vec![1.0, 1.0])).is_err());
    }
}
