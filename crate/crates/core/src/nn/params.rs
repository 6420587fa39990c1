use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named module groups of the network. Every parameter name starts with the
/// partition prefix followed by a dot, e.g. `backbone.conv0.weight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Backbone,
    Alignment,
    Attention,
    Global,
    Gcn,
    Fcn,
}

impl Partition {
    pub const ALL: [Partition; 6] = [
        Partition::Backbone,
        Partition::Alignment,
        Partition::Attention,
        Partition::Global,
        Partition::Gcn,
        Partition::Fcn,
    ];

    /// Partitions produced by stage 1 and frozen during stage 2.
    pub const FEATURE_EXTRACTOR: [Partition; 4] = [
        Partition::Backbone,
        Partition::Alignment,
        Partition::Attention,
        Partition::Global,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Partition::Backbone => "backbone",
            Partition::Alignment => "alignment",
            Partition::Attention => "attention",
            Partition::Global => "global",
            Partition::Gcn => "gcn",
            Partition::Fcn => "fcn",
        }
    }

    pub fn of_name(name: &str) -> Option<Partition> {
        let head = name.split('.').next()?;
        Partition::ALL.into_iter().find(|p| p.prefix() == head)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
    FanIn(usize),
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new tensor. Initialization draws from a stream seeded by
    /// `seed` and the parameter name, so values do not depend on the order of
    /// registration.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> ParamId {
        assert!(
            Partition::of_name(name).is_some(),
            "parameter {name} has no partition prefix"
        );
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let mut t = Tensor::zeros(shape);
        fill(&mut t.data, init, seed, name);
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Re-draws every tensor of a partition from `seed`.
    pub fn reinit_partition(&mut self, part: Partition, seed: u64, inits: &[(ParamId, Init)]) {
        for &(id, init) in inits {
            if Partition::of_name(&self.names[id.0]) == Some(part) {
                let name = self.names[id.0].clone();
                fill(&mut self.tensors[id.0].data, init, seed, &name);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn partition(&self, id: ParamId) -> Partition {
        Partition::of_name(&self.names[id.0]).expect("checked at registration")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalars, optionally restricted to one partition.
    pub fn count(&self, part: Option<Partition>) -> usize {
        self.ids()
            .filter(|&id| part.is_none_or(|p| self.partition(id) == p))
            .map(|id| self.tensors[id.0].len())
            .sum()
    }

    /// Overwrites tensors whose names appear in `other`. Shapes must agree.
    /// Returns the number of tensors copied.
    pub fn load_from<'a>(&mut self, other: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other {
            if let Some(&i) = self.index.get(name) {
                if self.tensors[i].shape != t.shape {
                    return Err(Error::shape(format!(
                        "parameter {name}: stored shape {:?}, model shape {:?}",
                        t.shape, self.tensors[i].shape
                    )));
                }
                self.tensors[i].data.copy_from_slice(&t.data);
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            bufs: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

fn fill(data: &mut [f64], init: Init, seed: u64, name: &str) {
    match init {
        Init::Zeros => data.iter_mut().for_each(|v| *v = 0.0),
        Init::Ones => data.iter_mut().for_each(|v| *v = 1.0),
        Init::FanIn(fan_in) => {
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
            for v in data {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Gradient buffers, one per parameter tensor, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub(crate) bufs: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub(crate) fn get_mut_vec(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.bufs[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.bufs.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.bufs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_seeded() {
        let mut a = ParamStore::new();
        a.register("fcn.x", &[4], Init::FanIn(4), 1);
        let ya = a.register("fcn.y", &[4], Init::FanIn(4), 1);
        let mut b = ParamStore::new();
        let yb = b.register("fcn.y", &[4], Init::FanIn(4), 1);
        assert_eq!(a.get(ya), b.get(yb));
    }

    #[test]
    fn partition_from_prefix() {
        assert_eq!(Partition::of_name("gcn.layer0.weight"), Some(Partition::Gcn));
        assert_eq!(Partition::of_name("nope.w"), None);
    }

    #[test]
    fn fan_in_bound() {
        let mut s = ParamStore::new();
        let id = s.register("fcn.w", &[1000], Init::FanIn(6), 3);
        assert!(s.get(id).iter().all(|v| v.abs() <= 1.0));
    }
}
