//! Named parameter storage, graph binding and seeded initialization.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Accumulated gradient; empty for frozen parameters.
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph handles for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = if trainable { vec![0.0; value.numel()] } else { Vec::new() };
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
            grad,
        });
        ParamId(self.params.len() - 1)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Names of the parameters an optimizer would update.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.as_str())
            .collect()
    }

    /// Total element count over trainable tensors.
    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn count_all(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Count over parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Marks every parameter frozen and drops gradient buffers.
    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
            p.grad = Vec::new();
        }
    }

    /// Inserts every parameter into `g`; trainable ones as gradient leaves.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.value.clone(), p.trainable))
                .collect(),
        }
    }

    /// Like [`bind`](Self::bind) but substitutes `var` for parameter `id`.
    pub fn bind_with(&self, g: &mut Graph, id: ParamId, var: Var) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == id.0 {
                    var
                } else {
                    g.leaf(p.value.clone(), p.trainable)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds `scale · grad` of every bound trainable parameter into its buffer.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients, scale: f64) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.wrt(v) {
                for (acc, gi) in p.grad.iter_mut().zip(g) {
                    *acc += scale * gi;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// SHA-256 over names, shapes and little-endian values, in insertion order.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Copies values (not trainability) from `other`, matched by name.
    pub fn load_values(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in other {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Input(alloc::format!("unknown parameter {name}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.to_string(), p.value.clone()))
            .collect()
    }
}

/// Hex rendering of a digest.
pub fn hex_digest(d: &[u8; 32]) -> String {
    use core::fmt::Write;
    let mut s = String::with_capacity(64);
    for b in d {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std²) truncated to ±2 std by rejection.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
    }

    /// Uniform(-bound, bound).
    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
    }
}
