use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    /// Uniform in [-a, a].
    Uniform(f64),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether AdamW weight decay applies.
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Deterministic initial values: a pure function of `(seed, name)`, so the
    /// declaration order of parameters never perturbs initialization.
    pub fn init_values(&self, seed: u64) -> Vec<f64> {
        let n = self.numel();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(self.name.as_bytes()));
        match self.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..=a)).collect(),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Collects parameter declarations under a dotted prefix.
#[derive(Debug, Default)]
pub struct SpecBuilder {
    specs: Vec<ParamSpec>,
    prefix: Vec<String>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix.join("."), name)
        }
    }

    /// Runs `f` with `name` pushed onto the prefix.
    pub fn scoped<T>(&mut self, name: impl ToString, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) {
        let name = self.full(name);
        debug_assert!(
            !self.specs.iter().any(|s| s.name == name),
            "duplicate parameter {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            decay,
        });
    }

    /// Linear layer stored as `weight: (out, in)` and optional `bias: (out)`.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) {
        self.linear_init(name, d_in, d_out, bias, Init::Normal(0.02));
    }

    pub fn linear_init(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool, init: Init) {
        self.scoped(name, |b| {
            b.add("weight", &[d_out, d_in], init, true);
            if bias {
                b.add("bias", &[d_out], Init::Zeros, false);
            }
        });
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.scoped(name, |b| {
            b.add("weight", &[dim], Init::Ones, false);
            b.add("bias", &[dim], Init::Zeros, false);
        });
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Read-only name → tensor view used by every forward pass. Student weights
/// are the `Var`-backed tensors (so gradients flow), teacher weights are
/// plain tensors.
#[derive(Debug, Clone, Default)]
pub struct Weights {
    map: BTreeMap<String, Tensor>,
    log: Option<Arc<Mutex<BTreeSet<String>>>>,
}

impl Weights {
    pub fn new(map: BTreeMap<String, Tensor>) -> Self {
        Self { map, log: None }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        let t = self
            .map
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if let Some(log) = &self.log {
            log.lock().expect("access log poisoned").insert(name.to_string());
        }
        Ok(t)
    }

    /// Copy that records the name of every tensor read through it.
    pub fn tracked(&self) -> (Self, Arc<Mutex<BTreeSet<String>>>) {
        let log = Arc::new(Mutex::new(BTreeSet::new()));
        (Self { map: self.map.clone(), log: Some(log.clone()) }, log)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            weights: self,
            prefix: String::new(),
        }
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_> {
        Scope {
            weights: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.map
    }

    /// Materializes a weight set from declarations.
    pub fn from_specs(specs: &[ParamSpec], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut map = BTreeMap::new();
        for spec in specs {
            let values = spec.init_values(seed);
            let t = Tensor::from_vec(values, spec.shape.as_slice(), device)?.to_dtype(dtype)?;
            map.insert(spec.name.clone(), t);
        }
        Ok(Self::new(map))
    }
}

#[derive(Clone)]
pub struct Scope<'a> {
    weights: &'a Weights,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            weights: self.weights,
            prefix,
        }
    }

    pub fn get(&self, name: &str) -> Result<&'a Tensor> {
        if self.prefix.is_empty() {
            self.weights.get(name)
        } else {
            self.weights.get(&format!("{}.{}", self.prefix, name))
        }
    }

    pub fn get_opt(&self, name: &str) -> Option<&'a Tensor> {
        self.get(name).ok()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

/// Trainable parameters. Iteration order is the lexicographic name order,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    decay: BTreeMap<String, bool>,
}

impl ParamStore {
    pub fn from_specs(specs: &[ParamSpec], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let w = Weights::from_specs(specs, seed, dtype, device)?;
        let decay = specs.iter().map(|s| (s.name.clone(), s.decay)).collect();
        let vars = w
            .into_inner()
            .into_iter()
            .map(|(k, t)| Ok((k, Var::from_tensor(&t)?)))
            .collect::<Result<_>>()?;
        Ok(Self { vars, decay })
    }

    pub fn from_weights(w: &Weights, specs: &[ParamSpec]) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for spec in specs {
            let t = w.get(&spec.name)?;
            if t.dims() != spec.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.dims().to_vec(),
                });
            }
            vars.insert(spec.name.clone(), Var::from_tensor(t)?);
        }
        let decay = specs.iter().map(|s| (s.name.clone(), s.decay)).collect();
        Ok(Self { vars, decay })
    }

    /// Tracked view: tensors produced from these take part in backprop.
    pub fn weights(&self) -> Weights {
        Weights::new(
            self.vars
                .iter()
                .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
                .collect(),
        )
    }

    /// Detached snapshot of the current values.
    pub fn snapshot(&self) -> Result<Weights> {
        Ok(Weights::new(
            self.vars
                .iter()
                .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn decays(&self, name: &str) -> bool {
        self.decay.get(name).copied().unwrap_or(true)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}
