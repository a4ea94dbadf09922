//! Named parameter storage shared by every layer.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; updated by train-mode forward passes only.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, tensor, kind });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable).collect()
    }

    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Trainable && self.name(id).starts_with(prefix))
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), tensor: e.tensor.cast(), kind: e.kind })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Adds uniform noise in `[-scale, scale]` to every trainable value.
    /// Used to move away from structured initializations (zero scales, zero
    /// biases) before gradient checks while keeping activation magnitudes.
    pub fn jitter(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &mut self.entries {
            if e.kind != ParamKind::Trainable {
                continue;
            }
            for v in e.tensor.data_mut() {
                *v += T::from_f64_lossy(rng.random_range(-scale..=scale));
            }
        }
    }

    /// Replaces values from another set with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        let diff = self.layout_diff(other);
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!("parameter layout mismatch: {}", diff.join("; "))));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            dst.tensor = src.tensor.clone();
            dst.tensor.zero_grad();
        }
        Ok(())
    }

    /// Human-readable differences in names/shapes between two sets.
    pub fn layout_diff(&self, other: &ParamSet<T>) -> Vec<String> {
        let mut diff = Vec::new();
        for e in &self.entries {
            match other.id(&e.name) {
                None => diff.push(format!("missing `{}`", e.name)),
                Some(id) if other.get(id).shape() != e.tensor.shape() => diff.push(format!(
                    "`{}` shape {:?} vs {:?}",
                    e.name,
                    e.tensor.shape(),
                    other.get(id).shape()
                )),
                _ => {}
            }
        }
        for e in &other.entries {
            if self.id(&e.name).is_none() {
                diff.push(format!("unexpected `{}`", e.name));
            }
        }
        if diff.is_empty() && self.entries.iter().zip(&other.entries).any(|(a, b)| a.name != b.name) {
            diff.push("parameter order differs".into());
        }
        diff
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.add("a", Tensor::zeros(vec![2]), ParamKind::Trainable).unwrap();
        assert!(p.add("a", Tensor::zeros(vec![2]), ParamKind::Trainable).is_err());
    }

    #[test]
    fn layout_diff_names_mismatches() {
        let mut a = ParamSet::<f32>::new();
        a.add("w", Tensor::zeros(vec![2]), ParamKind::Trainable).unwrap();
        let mut b = ParamSet::<f32>::new();
        b.add("w", Tensor::zeros(vec![3]), ParamKind::Trainable).unwrap();
        b.add("extra", Tensor::zeros(vec![1]), ParamKind::Buffer).unwrap();
        let d = a.layout_diff(&b);
        assert_eq!(d.len(), 2, "{d:?}");
    }
}
