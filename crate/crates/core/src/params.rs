//! Named parameter storage and binding of parameters into a [`Graph`].
//!
//! Parameters are stored as `f32`, the precision of the checkpoint format;
//! they are widened to `f64` when bound into a graph.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given standard deviation, resampled beyond 2σ.
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("param shape is consistent")
    }
}

/// Stable 64-bit tag for a parameter name.
pub(crate) fn name_tag(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// All learned parameters, keyed by name in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    /// Initializes every spec; each parameter draws from its own seed stream
    /// so adding a parameter never changes the others.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut map = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![c as f32; n],
                Init::TruncNormal(std) => {
                    let mut rng = rng_for(seed, &[tag::INIT, name_tag(&spec.name)]);
                    let normal = Normal::new(0.0, std)
                        .map_err(|e| Error::Usage(format!("init std {std}: {e}")))?;
                    (0..n)
                        .map(|_| loop {
                            let v: f64 = normal.sample(&mut rng);
                            if v.abs() <= 2.0 * std {
                                break v as f32;
                            }
                        })
                        .collect()
                }
            };
            if map
                .insert(spec.name.clone(), Param { shape: spec.shape.clone(), data })
                .is_some()
            {
                return Err(Error::Usage(format!("duplicate parameter {}", spec.name)));
            }
        }
        Ok(Self { map })
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Param) {
        self.map.insert(name.into(), p);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }
}

/// Lazily binds store entries into a graph as leaves.
///
/// Trainable binders create gradient-tracking leaves. A name can be
/// overridden with an existing variable, which is how single parameters are
/// exposed to finite-difference checks.
pub struct Binder<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'g>>>,
}

impl<'g, 's> Binder<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            graph,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn override_with(&self, name: &str, v: Var<'g>) {
        self.bound.borrow_mut().insert(name.to_string(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))?;
        let t = p.to_tensor();
        let v = if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter, by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}
