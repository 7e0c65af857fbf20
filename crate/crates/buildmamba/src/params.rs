//! Named parameter store. Model modules allocate slots at construction and
//! hold indices; each forward pass binds the current values as graph leaves.
//! Initialization is keyed by (global seed, parameter name), so adding or
//! removing a module never shifts any other parameter's draws — ablation arms
//! with the same seed share bit-identical weights for their common subset.

use crate::error::{Error, Result};
use crate::gradcheck::fnv1a;
use crate::tensor::{numel_of, read_bmt, write_bmt, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

pub type Rng64 = ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in ±sqrt(1/fan_in).
    FanIn(usize),
    Uniform(f64, f64),
    /// Row-repeated -(1..=n); the usual diagonal-A starting point.
    NegRange(usize),
}

pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new() }
    }

    pub fn add(&mut self, name: String, shape: &[usize], init: Init, seed: u64) -> ParamId {
        assert!(
            !self.slots.iter().any(|s| s.name == name),
            "duplicate parameter name {}",
            name
        );
        let n = numel_of(shape);
        let mut rng = Rng64::seed_from_u64(seed ^ fnv1a(&name));
        let value: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::FanIn(fan) => {
                let s = (1.0 / fan.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-s..s)).collect()
            }
            Init::Uniform(lo, hi) => (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
            Init::NegRange(cols) => {
                assert!(cols > 0 && n % cols == 0, "NegRange shape mismatch");
                (0..n).map(|i| -((i % cols) as f64 + 1.0)).collect()
            }
        };
        self.slots.push(Slot { name, shape: shape.to_vec(), value });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, id: ParamId) -> &Slot {
        &self.slots[id.0]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        &mut self.slots[idx].value
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    /// Materialize every slot as a tracked leaf for one forward/backward pass.
    pub fn bind(&self) -> Bound {
        let tensors = self
            .slots
            .iter()
            .map(|s| Tensor::param(s.value.clone(), &s.shape).expect("slot shape"))
            .collect();
        Bound { tensors }
    }

    /// Gradient per slot after a backward pass through `bound`'s leaves.
    pub fn grads(&self, bound: &Bound) -> Vec<Option<Vec<f64>>> {
        bound.tensors.iter().map(|t| t.grad()).collect()
    }

    // ── checkpoints: manifest.json mapping name -> tensor file ──

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut manifest: BTreeMap<String, String> = BTreeMap::new();
        for (i, s) in self.slots.iter().enumerate() {
            let file = format!("p{:04}.bmt", i);
            write_bmt(&dir.join(&file), &Tensor::new(s.value.clone(), &s.shape)?)?;
            manifest.insert(s.name.clone(), file);
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format { path: dir.display().to_string(), msg: e.to_string() })?;
        std::fs::write(dir.join("manifest.json"), json).map_err(|e| io_err(dir, e))?;
        Ok(())
    }

    /// Load values into an existing store; the checkpoint must cover exactly
    /// the same parameter names and shapes.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        let raw = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| io_err(dir, e))?;
        let manifest: BTreeMap<String, String> = serde_json::from_str(&raw)
            .map_err(|e| Error::Format { path: dir.display().to_string(), msg: e.to_string() })?;
        if manifest.len() != self.slots.len() {
            return Err(Error::invalid(
                "checkpoint",
                format!("checkpoint has {} params, model has {}", manifest.len(), self.slots.len()),
            ));
        }
        for i in 0..self.slots.len() {
            let (name, shape) = (self.slots[i].name.clone(), self.slots[i].shape.clone());
            let file = manifest.get(&name).ok_or_else(|| {
                Error::invalid("checkpoint", format!("missing parameter '{}'", name))
            })?;
            let t = read_bmt(&dir.join(file))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    left: shape,
                    right: t.shape().to_vec(),
                });
            }
            self.slots[i].value = t.data().to_vec();
        }
        Ok(())
    }
}

pub struct Bound {
    pub tensors: Vec<Tensor>,
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Tensor;
    fn index(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}

/// Name-prefixed view for allocating a module's parameters.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    seed: u64,
}

impl<'a> Scope<'a> {
    pub fn root(store: &'a mut ParamStore, seed: u64) -> Scope<'a> {
        Scope { store, prefix: String::new(), seed }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            format!("{}.", name)
        } else {
            format!("{}{}.", self.prefix, name)
        };
        Scope { store: self.store, prefix, seed: self.seed }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.store.add(format!("{}{}", self.prefix, name), shape, init, self.seed)
    }
}

fn io_err(p: &Path, e: std::io::Error) -> Error {
    Error::Io { path: p.display().to_string(), source: e }
}
