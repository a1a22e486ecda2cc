use crate::error::{MitosError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Classical momentum SGD with L2 weight decay folded into the velocity:
///
/// `v ← momentum·v + grad + weight_decay·param`, `param ← param − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn velocity(&self, index: usize) -> &[f64] {
        &self.velocity[index]
    }

    pub fn velocity_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.velocity[index]
    }

    /// Applies one update using the gradients stored on each parameter.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let name = store.name(id).to_string();
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(|g| g.to_vec()) else {
                return Err(MitosError::invalid(format!("sgd_step: missing gradient for {}", name)));
            };
            let v = &mut self.velocity[i];
            let p = t.data_mut();
            for k in 0..p.len() {
                v[k] = self.momentum * v[k] + grad[k] + self.weight_decay * p[k];
            }
            if lr != 0.0 {
                for k in 0..p.len() {
                    p[k] -= lr * v[k];
                }
            }
        }
        Ok(())
    }

    /// Velocity buffers as checkpoint entries named `optim/velocity/<param>`.
    pub fn to_entries(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        store
            .iter()
            .zip(&self.velocity)
            .map(|((name, t), v)| {
                (
                    format!("optim/velocity/{}", name),
                    Tensor::new(t.shape().to_vec(), v.clone()).expect("velocity matches parameter"),
                )
            })
            .collect()
    }

    pub fn load_entries(&mut self, store: &ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
        for (i, (name, _)) in store.iter().enumerate() {
            let key = format!("optim/velocity/{}", name);
            let t = entries
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, t)| t)
                .ok_or_else(|| MitosError::invalid(format!("checkpoint lacks {}", key)))?;
            if t.numel() != self.velocity[i].len() {
                return Err(MitosError::shape("load velocity", self.velocity[i].len(), t.numel()));
            }
            self.velocity[i].copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn one_param(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.register("p", &[1], ParamKind::Weight { fan_in: 1 }).unwrap();
        s.get_mut(id).data_mut()[0] = value;
        s.get_mut(id).set_grad(vec![grad]).unwrap();
        s
    }

    #[test]
    fn hand_computed_update() {
        let mut s = one_param(1.0, 0.1);
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.by_name("p").unwrap().data()[0] - 0.99).abs() < 1e-15);
        assert!((opt.velocity(0)[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_decays_velocity() {
        let mut s = one_param(1.0, 0.0);
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        opt.velocity_mut(0)[0] = 0.5;
        opt.step(&mut s, 0.0).unwrap();
        assert_eq!(s.by_name("p").unwrap().data()[0], 1.0);
        assert!((opt.velocity(0)[0] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only_step() {
        let mut s = one_param(1.0, 0.0);
        let mut opt = Sgd::new(&s, 0.9, 0.0005);
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.by_name("p").unwrap().data()[0] - (1.0 - 5e-5)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut s = one_param(-0.0, 0.3);
        let before = s.by_name("p").unwrap().data()[0].to_bits();
        let mut opt = Sgd::new(&s, 0.9, 0.0005);
        opt.step(&mut s, 0.0).unwrap();
        assert_eq!(s.by_name("p").unwrap().data()[0].to_bits(), before);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut s = ParamStore::new();
        s.register("p", &[1], ParamKind::Bias).unwrap();
        let mut opt = Sgd::new(&s, 0.9, 0.0);
        assert!(opt.step(&mut s, 0.1).unwrap_err().to_string().contains('p'));
    }
}
