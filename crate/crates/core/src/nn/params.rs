use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Mat;
use crate::error::{Error, Result};

/// Freezing group of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Main question-generation network, shared embeddings included.
    QgCore,
    /// Everything that exists only to consume a knowledge triple.
    Knowledge,
}

impl Group {
    pub fn as_u8(self) -> u8 {
        match self {
            Group::QgCore => 0,
            Group::Knowledge => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Group::QgCore),
            1 => Some(Group::Knowledge),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Mat,
}

/// Named trainable tensors in insertion order. Group membership is fixed at
/// insertion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Mat) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        Ok(ParamId(id))
    }

    /// Uniform(-bound, bound) initialised parameter.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: Group,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        self.add(name, group, Mat::uniform(rows, cols, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Order-sensitive digest over the exact bit patterns of one group.
    pub fn group_digest(&self, group: Group) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// True when both sets carry the same names, groups and shapes in the same order.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.value.shape() == b.value.shape())
    }
}

/// Per-parameter gradients aligned with a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn new(len: usize) -> Self {
        Grads { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn set(&mut self, id: ParamId, g: Mat) {
        self.grads[id.0] = Some(g);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Mat)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParameterSet::new();
        p.add("w", Group::QgCore, Mat::zeros(1, 1)).unwrap();
        assert!(p.add("w", Group::Knowledge, Mat::zeros(1, 1)).is_err());
    }

    #[test]
    fn digest_tracks_only_its_group() {
        let mut p = ParameterSet::new();
        let a = p.add("a", Group::QgCore, Mat::zeros(1, 2)).unwrap();
        let b = p.add("b", Group::Knowledge, Mat::zeros(1, 2)).unwrap();
        let k0 = p.group_digest(Group::Knowledge);
        let q0 = p.group_digest(Group::QgCore);
        p.get_mut(a).value.set(0, 0, 1.0);
        assert_eq!(p.group_digest(Group::Knowledge), k0);
        assert_ne!(p.group_digest(Group::QgCore), q0);
        p.get_mut(b).value.set(0, 1, -0.0);
        assert_ne!(p.group_digest(Group::Knowledge), k0);
    }
}
