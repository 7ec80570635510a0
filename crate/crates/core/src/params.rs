//! Named parameter storage, the checkpoint container, and optimizers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "lksde-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named tensors. Names are `group.layer.kind`, e.g. `e_s.l0.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with `group.`.
    pub fn group(&self, group: &str) -> Vec<ParamId> {
        let prefix = format!("{group}.");
        self.ids()
            .filter(|id| self.names[id.0].starts_with(&prefix))
            .collect()
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| graph.param(t.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant leaf; nothing will be trained.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|t| graph.constant(t.clone()))
                .collect(),
        }
    }

    pub fn to_named(&self) -> Vec<NamedParam> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, t)| NamedParam {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from `named`. Every stored name must be present with a matching shape.
    pub fn load_named(&mut self, named: &[NamedParam]) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let p = named
                .iter()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if p.shape != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} does not match model {:?}",
                    p.shape,
                    value.shape()
                )));
            }
            *value = Tensor::new(p.shape.clone(), p.data.clone())?;
        }
        Ok(())
    }
}

/// The graph leaves created for a [`ParamStore`] by [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Reads gradients for every parameter back out of `graph`.
    pub fn grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.vars.iter().map(|&v| graph.grad(v)).collect()
    }
}

/// On-disk container: `{format, version, meta, params: [{name, shape, data}]}`.
///
/// Floats are written by `serde_json` with shortest round-trip formatting, so
/// save → load → save is byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<NamedParam>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value, params: &ParamStore) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            meta,
            params: params.to_named(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unexpected format {:?}",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        for p in &ck.params {
            if p.shape.iter().product::<usize>() != p.data.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {}: shape {:?} does not match {} values",
                    p.name,
                    p.shape,
                    p.data.len()
                )));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Decrements each parameter by `learning_rate * grad` and zeroes the gradients.
pub fn sgd_step(params: &mut ParamStore, grads: &mut [Tensor], learning_rate: f64) {
    for (id, g) in params.ids().zip(grads.iter_mut()) {
        for (p, gv) in params.get_mut(id).data_mut().iter_mut().zip(g.data()) {
            *p -= learning_rate * gv;
        }
        g.fill(0.0);
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`. Returns the original norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Plain SGD or Adam over a [`ParamStore`].
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        learning_rate: f64,
    },
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { learning_rate },
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = params
                    .ids()
                    .map(|id| vec![0.0; params.get(id).numel()])
                    .collect();
                Optimizer::Adam {
                    learning_rate,
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [Tensor]) {
        match self {
            Optimizer::Sgd { learning_rate } => sgd_step(params, grads, *learning_rate),
            Optimizer::Adam {
                learning_rate,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step as i32);
                let bc2 = 1.0 - beta2.powi(*step as i32);
                for (k, id) in params.ids().enumerate() {
                    let g = &mut grads[k];
                    let p = params.get_mut(id).data_mut();
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        m[k][j] = *beta1 * m[k][j] + (1.0 - *beta1) * gj;
                        v[k][j] = *beta2 * v[k][j] + (1.0 - *beta2) * gj * gj;
                        let mh = m[k][j] / bc1;
                        let vh = v[k][j] / bc2;
                        p[j] -= *learning_rate * mh / (vh.sqrt() + *eps);
                    }
                    g.fill(0.0);
                }
            }
        }
    }
}
