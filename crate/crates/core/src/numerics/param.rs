use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::matrix::{Matrix, Real};
use crate::error::{Error, Result};

/// Parameter partition used for freezing and digests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Expert,
    Fusion,
    Pe,
    Lm,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Expert, Group::Fusion, Group::Pe, Group::Lm];

    pub fn label(self) -> &'static str {
        match self {
            Group::Expert => "expert",
            Group::Fusion => "fusion",
            Group::Pe => "pe",
            Group::Lm => "lm",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Group::Expert => 0,
            Group::Fusion => 1,
            Group::Pe => 2,
            Group::Lm => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamTensor<T> {
    pub name: String,
    pub group: Group,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    pub frozen: bool,
}

/// How a parameter is initialised. Every tensor draws from its own RNG stream
/// keyed by (seed, name), so construction order never changes values.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Partitioned parameter store; all model weights live here.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    tensors: Vec<ParamTensor<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: Group, value: Matrix<T>, frozen: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::shape("param", format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        let (r, c) = value.shape();
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            group,
            grad: Matrix::zeros(r, c),
            value,
            frozen,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn init(
        &mut self,
        seed: u64,
        name: &str,
        group: Group,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, T::one()),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, name));
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..rows * cols).map(|_| T::c(normal.sample(&mut rng))).collect();
                Matrix::from_vec(rows, cols, data)?
            }
        };
        self.insert(name, group, value, group == Group::Expert)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.tensors[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.tensors[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<T>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(T::zero());
        }
    }

    /// Sets the freeze flag for every tensor in `group`.
    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        for t in self.tensors.iter_mut().filter(|t| t.group == group) {
            t.frozen = frozen;
        }
    }

    pub fn scalar_count(&self, group: Option<Group>) -> usize {
        self.tensors
            .iter()
            .filter(|t| group.is_none_or(|g| t.group == g))
            .map(|t| t.value.len())
            .sum()
    }

    pub fn trainable_scalar_count(&self) -> usize {
        self.tensors.iter().filter(|t| !t.frozen).map(|t| t.value.len()).sum()
    }

    /// SHA-256 over (name, shape, little-endian values) of every tensor in the group.
    pub fn group_digest(&self, group: Group) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in self.tensors.iter().filter(|t| t.group == group) {
            h.update(t.name.as_bytes());
            h.update((t.value.rows() as u64).to_le_bytes());
            h.update((t.value.cols() as u64).to_le_bytes());
            h.update(t.value.le_bytes());
        }
        h.finalize().into()
    }

    pub fn digests(&self) -> BTreeMap<Group, String> {
        Group::ALL
            .iter()
            .map(|&g| (g, hex::encode(self.group_digest(g))))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    group: t.group,
                    value: t.value.cast(),
                    grad: t.grad.cast(),
                    frozen: t.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

pub(crate) fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
