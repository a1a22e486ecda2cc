//! Named, ordered parameter storage shared by every network component.

use indexmap::IndexMap;

use crate::error::{MitosError, Result};
use crate::tensor::{Checkpoint, Gradients, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamKind {
    /// Filter or matrix; `fan_in` is the number of inputs feeding one output.
    Weight { fan_in: usize },
    Bias,
    /// Learnable per-channel scale held at a constant until trained.
    Scale(f64),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, (Tensor, ParamKind)>,
}

/// Tape handles for every parameter of a store, valid for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(MitosError::invalid(format!("duplicate parameter name {}", name)));
        }
        let fill = match kind {
            ParamKind::Scale(c) => c,
            _ => 0.0,
        };
        let t = Tensor::full(shape, fill).with_requires_grad(true);
        let (idx, _) = self.params.insert_full(name, (t, kind));
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|(t, _)| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].0
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].0
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|(t, _)| t)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids whose names start with `prefix`, in registration order.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.params
            .keys()
            .enumerate()
            .filter(move |(_, k)| k.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, (t, _))| (k.as_str(), t))
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.values().map(|(t, _)| tape.leaf(t.clone())).collect())
    }

    /// Adds `scale · grad` into each parameter's stored gradient.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients, scale: f64) -> Result<()> {
        for (i, (_, (t, _))) in self.params.iter_mut().enumerate() {
            if let Some(g) = grads.get(bound.0[i]) {
                if scale == 1.0 {
                    t.accumulate_grad(g)?;
                } else {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    t.accumulate_grad(&scaled)?;
                }
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(|(t, _)| t.clear_grad());
    }

    pub fn to_checkpoint(&self, meta: Vec<(String, String)>) -> Checkpoint {
        let params = self
            .params
            .iter()
            .map(|(k, (t, _))| (k.clone(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid")))
            .collect();
        Checkpoint { meta, params }
    }

    /// Overwrites values from a checkpoint whose names and shapes must match
    /// this store exactly. Extra checkpoint entries under `ignore_prefix` are skipped.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint, ignore_prefix: &str) -> Result<()> {
        let mut seen = 0;
        for (name, t) in &ckpt.params {
            if !ignore_prefix.is_empty() && name.starts_with(ignore_prefix) {
                continue;
            }
            let Some((dst, _)) = self.params.get_mut(name) else {
                return Err(MitosError::invalid(format!("checkpoint parameter {} not in network", name)));
            };
            if dst.shape() != t.shape() {
                return Err(MitosError::shape(
                    "load_checkpoint",
                    format!("{} {:?}", name, dst.shape()),
                    format!("{:?}", t.shape()),
                ));
            }
            dst.data_mut().copy_from_slice(t.data());
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(MitosError::invalid(format!(
                "checkpoint holds {} of {} network parameters",
                seen,
                self.params.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.register("a/weight", &[2, 2], ParamKind::Weight { fan_in: 2 }).unwrap();
        assert!(s.register("a/weight", &[1], ParamKind::Bias).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        let w = s.register("w", &[3], ParamKind::Weight { fan_in: 3 }).unwrap();
        s.register("scale", &[2], ParamKind::Scale(10.0)).unwrap();
        s.get_mut(w).data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let ck = s.to_checkpoint(vec![]);
        let mut other = ParamStore::new();
        other.register("w", &[3], ParamKind::Weight { fan_in: 3 }).unwrap();
        other.register("scale", &[2], ParamKind::Scale(1.0)).unwrap();
        other.load_checkpoint(&ck, "").unwrap();
        assert_eq!(other.by_name("w").unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(other.by_name("scale").unwrap().data(), &[10.0, 10.0]);
    }
}
