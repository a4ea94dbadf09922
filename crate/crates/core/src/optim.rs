//! Stochastic gradient descent with heavy-ball momentum.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Real;

/// Velocity buffers for a registered subset of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    lr: f64,
    momentum: f64,
    slots: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamSet<T>, ids: Vec<ParamId>, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        let slots = ids.into_iter().map(|id| (id, vec![T::zero(); params.get(id).len()])).collect();
        Ok(Sgd { lr, momentum, slots })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn registered(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.iter().map(|(id, _)| *id)
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[T]> {
        self.slots.iter().find(|(p, _)| *p == id).map(|(_, v)| v.as_slice())
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Vec<T>) -> Result<()> {
        let slot = self
            .slots
            .iter_mut()
            .find(|(p, _)| *p == id)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {} is not registered", id.index())))?;
        if slot.1.len() != v.len() {
            return Err(Error::Checkpoint("velocity length mismatch".into()));
        }
        slot.1 = v;
        Ok(())
    }

    /// `v <- momentum * v + grad; p <- p - lr * v`, then clears the gradient
    /// slots. Nothing is modified if any registered parameter lacks a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if let Some((id, _)) = self.slots.iter().find(|(id, _)| params.get(*id).grad().is_none()) {
            return Err(Error::MissingGradient(params.name(*id).to_string()));
        }
        let lr = T::from_f64_lossy(self.lr);
        let mu = T::from_f64_lossy(self.momentum);
        for (id, vel) in &mut self.slots {
            let t = params.get_mut(*id);
            let grad = t.take_grad().expect("checked above");
            for ((p, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> (ParamSet<f64>, ParamId) {
        let mut p = ParamSet::new();
        let id = p.add("p", Tensor::full(vec![1], v), ParamKind::Trainable).unwrap();
        (p, id)
    }

    #[test]
    fn plain_step() {
        let (mut p, id) = one_param(0.0);
        let mut opt = Sgd::new(&p, vec![id], 0.1, 0.0).unwrap();
        p.get_mut(id).set_grad(vec![1.0]).unwrap();
        opt.step(&mut p).unwrap();
        assert!((p.get(id).data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_unrolled() {
        let (mut p, id) = one_param(0.0);
        let mut opt = Sgd::new(&p, vec![id], 1.0, 0.9).unwrap();
        for _ in 0..2 {
            p.get_mut(id).set_grad(vec![1.0]).unwrap();
            opt.step(&mut p).unwrap();
        }
        // 1 + (0.9 + 1)
        assert!((p.get(id).data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_decays_velocity_only() {
        let (mut p, id) = one_param(3.0);
        let mut opt = Sgd::new(&p, vec![id], 0.5, 0.9).unwrap();
        opt.set_velocity(id, vec![0.0]).unwrap();
        p.get_mut(id).set_grad(vec![0.0]).unwrap();
        opt.step(&mut p).unwrap();
        assert_eq!(p.get(id).data()[0], 3.0);
        opt.set_velocity(id, vec![2.0]).unwrap();
        p.get_mut(id).set_grad(vec![0.0]).unwrap();
        let before = p.get(id).data()[0];
        opt.step(&mut p).unwrap();
        assert!((opt.velocity(id).unwrap()[0] - 1.8).abs() < 1e-15);
        assert!((p.get(id).data()[0] - (before - 0.9)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_rejected() {
        let (mut p, id) = one_param(1.0);
        let mut opt = Sgd::new(&p, vec![id], 0.1, 0.9).unwrap();
        assert!(matches!(opt.step(&mut p), Err(Error::MissingGradient(_))));
        assert_eq!(p.get(id).data()[0], 1.0);
    }
}
