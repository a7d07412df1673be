//! Named parameters, non-trainable buffers, and the checkpoint file format.
//!
//! Checkpoints are line-oriented text. The first line is
//! [`CHECKPOINT_HEADER`]; every following line is one entry:
//!
//! ```text
//! <kind> <name> <rank> <d0> .. <dn> : <v0> <v1> ..
//! ```
//!
//! `kind` is `param`, `buffer`, `velocity` or `meta`. Values are written
//! with Rust's shortest round-trip formatting, so save→load is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Graph, RunningStats, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "CTCLOUD-CKPT-1";

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Every parameter and buffer of one model, keyed by dotted path.
/// Iteration is in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {}", name)));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.clone(), Parameter { name, value, grad });
        Ok(())
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name {}", name)));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub(crate) fn value(&self, name: &str) -> &Tensor {
        &self.params.get(name).unwrap_or_else(|| panic!("unregistered parameter {}", name)).value
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(b) if b.shape() == value.shape() => {
                *b = value;
                Ok(())
            }
            Some(b) => Err(dim_err!("buffer {}: {:?} vs {:?}", name, b.shape(), value.shape())),
            None => Err(Error::Config(format!("unknown buffer {}", name))),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Overwrites a parameter's value (shape must match).
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| Error::Config(format!("unknown parameter {}", name)))?;
        if p.value.shape() != value.shape() {
            return Err(dim_err!("parameter {}: {:?} vs {:?}", name, p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn running_stats(&self, prefix: &str) -> RunningStats {
        let mean = self.buffers[&format!("{}.running_mean", prefix)].data().to_vec();
        let var = self.buffers[&format!("{}.running_var", prefix)].data().to_vec();
        RunningStats { mean, var }
    }

    /// Structural equality: same parameter and buffer names with the same
    /// shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.buffers.len() == other.buffers.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((a, pa), (b, pb))| a == b && pa.value.shape() == pb.value.shape())
            && self
                .buffers
                .iter()
                .zip(&other.buffers)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}

/// Parameters bound to one graph, so repeated uses of the same name in a
/// forward pass share one leaf.
#[derive(Default)]
pub(crate) struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let v = g.input(store.value(name).clone());
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Everything a training run needs to resume.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub velocity: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self { store: store.clone(), ..Default::default() }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        for p in self.store.params() {
            write_entry(&mut out, "param", &p.name, &p.value);
        }
        for (name, t) in self.store.buffers() {
            write_entry(&mut out, "buffer", name, t);
        }
        for (name, t) in &self.velocity {
            write_entry(&mut out, "velocity", name, t);
        }
        for (name, v) in &self.meta {
            write_entry(&mut out, "meta", name, &Tensor::scalar(*v));
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
            _ => return Err(perr(1, format!("missing header {}", CHECKPOINT_HEADER))),
        }
        let mut ck = Checkpoint::default();
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (head, values) = line.split_once(':').ok_or_else(|| perr(lineno, "missing ':'".into()))?;
            let mut h = head.split_whitespace();
            let kind = h.next().ok_or_else(|| perr(lineno, "missing kind".into()))?;
            let name = h.next().ok_or_else(|| perr(lineno, "missing name".into()))?.to_string();
            let rank: usize = h
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| perr(lineno, "bad rank".into()))?;
            let shape: Vec<usize> = h.map(|d| d.parse().map_err(|_| perr(lineno, format!("bad extent {}", d)))).collect::<Result<_>>()?;
            if shape.len() != rank {
                return Err(perr(lineno, format!("rank {} but {} extents", rank, shape.len())));
            }
            let data: Vec<f64> = values
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| perr(lineno, format!("bad value {}", v))))
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape, data).map_err(|e| perr(lineno, e.to_string()))?;
            match kind {
                "param" => ck.store.register(name, t)?,
                "buffer" => ck.store.register_buffer(name, t)?,
                "velocity" => {
                    ck.velocity.insert(name, t);
                }
                "meta" => {
                    ck.meta.insert(name, t.data()[0]);
                }
                other => return Err(perr(lineno, format!("unknown entry kind {}", other))),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Copies values into `store`, which must have the same layout.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if !self.store.same_layout(store) {
            return Err(Error::Config("checkpoint layout does not match the model".into()));
        }
        *store = self.store.clone();
        Ok(())
    }
}

fn write_entry(out: &mut String, kind: &str, name: &str, t: &Tensor) {
    let _ = write!(out, "{} {} {}", kind, name, t.rank());
    for d in t.shape() {
        let _ = write!(out, " {}", d);
    }
    out.push_str(" :");
    for v in t.data() {
        let _ = write!(out, " {:?}", v);
    }
    out.push('\n');
}
