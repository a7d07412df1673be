//! Layers built from tape operations, and the forward-pass context that
//! binds a [`ParamStore`] to a fresh [`Graph`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{dim_err, Result};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

/// One forward pass: a new tape plus read-only access to the parameters.
///
/// BatchNorm running-statistic updates and parameter gradients are
/// collected here and only written back by [`Updates::apply`], so the
/// store is never mutated while a pass is in flight.
pub struct Forward<'a> {
    pub g: Graph,
    pub mode: Mode,
    store: &'a ParamStore,
    bindings: Bindings,
    buffer_updates: BTreeMap<String, Tensor>,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            g: Graph::new(),
            mode,
            store,
            bindings: Bindings::default(),
            buffer_updates: BTreeMap::new(),
            dropout_seed: 0,
            dropout_calls: 0,
        }
    }

    /// Dropout masks are a pure function of this seed and call order.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_seed = seed;
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Var {
        self.bindings.bind(&mut self.g, self.store, name)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.g.backward(loss)
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p <= 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.dropout_seed, self.dropout_calls));
        self.dropout_calls += 1;
        let keep = 1.0 - p;
        let shape = self.g.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.g.constant(mask);
        self.g.mul(x, m)
    }

    /// Ends the pass, returning the gradients of every bound parameter and
    /// any running-statistic updates.
    pub fn into_updates(self) -> Updates {
        let grads = self
            .bindings
            .iter()
            .filter_map(|(name, &v)| self.g.grad(v).map(|g| (name.clone(), g.clone())))
            .collect();
        Updates { grads, buffers: self.buffer_updates }
    }
}

/// Deferred writes produced by one [`Forward`].
#[derive(Debug, Default)]
pub struct Updates {
    pub grads: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl Updates {
    /// Adds gradients onto the store's accumulators and installs new
    /// running statistics.
    pub fn apply(self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in self.grads {
            let p = store.get_mut(&name).ok_or_else(|| dim_err!("gradient for unknown parameter {}", name))?;
            p.grad.add_assign(&g);
        }
        for (name, b) in self.buffers {
            store.set_buffer(&name, b)?;
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over `(a, b)`; derives independent stream seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Registers parameters under a dotted prefix with deterministic
/// initialization.
pub struct Init<'s> {
    pub store: &'s mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'s> Init<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{}.{}", prefix, name)
    }
}

/// Fully connected layer acting on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Kaiming-uniform weights (bound `sqrt(6 / in_dim)`), zero bias.
    pub fn new(init: &mut Init, prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = (6.0 / in_dim as f64).sqrt();
        let w = Tensor::from_fn(&[in_dim, out_dim], |_| init.rng.gen_range(-bound..bound));
        let weight = join(prefix, "weight");
        init.store.register(weight.clone(), w)?;
        let bias = if bias {
            let b = join(prefix, "bias");
            init.store.register(b.clone(), Tensor::zeros(&[out_dim]))?;
            Some(b)
        } else {
            None
        };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let shape = fw.g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(dim_err!("{}: expects {} input channels, got {:?}", self.weight, self.in_dim, shape));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = if shape.len() == 2 { x } else { fw.g.reshape(x, &[rows, self.in_dim])? };
        let w = fw.param(&self.weight);
        let mut y = fw.g.matmul(flat, w)?;
        if let Some(b) = &self.bias {
            let b = fw.param(b);
            y = fw.g.add_bias(y, b)?;
        }
        if shape.len() != 2 {
            let mut out = shape;
            *out.last_mut().unwrap() = self.out_dim;
            y = fw.g.reshape(y, &out)?;
        }
        Ok(y)
    }
}

/// BatchNorm over all leading axes, with running statistics kept as store
/// buffers `<prefix>.running_mean` / `<prefix>.running_var`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(init: &mut Init, prefix: &str, channels: usize) -> Result<Self> {
        init.store.register(join(prefix, "gamma"), Tensor::ones(&[channels]))?;
        init.store.register(join(prefix, "beta"), Tensor::zeros(&[channels]))?;
        init.store.register_buffer(join(prefix, "running_mean"), Tensor::zeros(&[channels]))?;
        init.store.register_buffer(join(prefix, "running_var"), Tensor::ones(&[channels]))?;
        Ok(Self { prefix: prefix.to_string(), channels })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let shape = fw.g.shape(x).to_vec();
        let rows = shape.iter().product::<usize>() / self.channels;
        let flat = if shape.len() == 2 { x } else { fw.g.reshape(x, &[rows, self.channels])? };
        let gamma = fw.param(&join(&self.prefix, "gamma"));
        let beta = fw.param(&join(&self.prefix, "beta"));
        let mut stats = fw.store.running_stats(&self.prefix);
        let mode = fw.mode;
        let y = fw.g.batchnorm(flat, gamma, beta, &mut stats, mode)?;
        if mode == Mode::Train {
            let c = self.channels;
            fw.buffer_updates
                .insert(join(&self.prefix, "running_mean"), Tensor::new(vec![c], stats.mean)?);
            fw.buffer_updates
                .insert(join(&self.prefix, "running_var"), Tensor::new(vec![c], stats.var)?);
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            fw.g.reshape(y, &shape)
        }
    }
}

/// Linear → BatchNorm → ReLU.
#[derive(Clone, Debug)]
pub struct Lbr {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl Lbr {
    pub fn new(init: &mut Init, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(init, &join(prefix, "linear"), in_dim, out_dim, true)?,
            bn: BatchNorm::new(init, &join(prefix, "bn"), out_dim)?,
        })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let y = self.linear.forward(fw, x)?;
        let y = self.bn.forward(fw, y)?;
        Ok(fw.g.relu(y))
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim
    }
}

/// A stack of [`Lbr`] units, applied pointwise along the last axis.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub layers: Vec<Lbr>,
}

impl MlpBlock {
    pub fn new(init: &mut Init, prefix: &str, in_dim: usize, widths: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Lbr::new(init, &join(prefix, &i.to_string()), d, w)?);
            d = w;
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, fw: &mut Forward, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(fw, x)?;
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Lbr::out_dim)
    }
}

/// Two-layer classifier: Linear → ReLU → Dropout → Linear.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl Classifier {
    pub fn new(init: &mut Init, prefix: &str, in_dim: usize, hidden: usize, classes: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(init, &join(prefix, "fc1"), in_dim, hidden, true)?,
            out: Linear::new(init, &join(prefix, "fc2"), hidden, classes, true)?,
            dropout,
        })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let h = self.hidden.forward(fw, x)?;
        let h = fw.g.relu(h);
        let h = fw.dropout(h, self.dropout)?;
        self.out.forward(fw, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_handles_rank3() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut Init::new(&mut store, 1), "l", 4, 3, true).unwrap();
        let mut fw = Forward::new(&store, Mode::Eval);
        let x = fw.g.constant(Tensor::from_fn(&[2, 5, 4], |i| i as f64 * 0.1));
        let y = lin.forward(&mut fw, x).unwrap();
        assert_eq!(fw.g.shape(y), &[2, 5, 3]);
        let flat = fw.g.constant(fw.g.value(x).clone().reshape(&[10, 4]).unwrap());
        let y2 = lin.forward(&mut fw, flat).unwrap();
        assert_eq!(fw.g.value(y).data(), fw.g.value(y2).data());
    }

    #[test]
    fn batchnorm_updates_are_deferred() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut Init::new(&mut store, 1), "bn", 2).unwrap();
        let before = store.clone();
        let mut fw = Forward::new(&store, Mode::Train);
        let x = fw.g.constant(Tensor::from_fn(&[4, 2], |i| i as f64));
        let y = bn.forward(&mut fw, x).unwrap();
        let s = fw.g.sum(y);
        fw.backward(s).unwrap();
        let up = fw.into_updates();
        assert_eq!(store, before);
        up.apply(&mut store).unwrap();
        assert_ne!(store.buffer("bn.running_mean"), before.buffer("bn.running_mean"));
    }

    #[test]
    fn dropout_is_reproducible_and_off_in_eval() {
        let store = ParamStore::new();
        let run = |seed| {
            let mut fw = Forward::new(&store, Mode::Train).with_dropout_seed(seed);
            let x = fw.g.constant(Tensor::ones(&[64]));
            let y = fw.dropout(x, 0.5).unwrap();
            fw.g.value(y).clone()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        let mut fw = Forward::new(&store, Mode::Eval);
        let x = fw.g.constant(Tensor::ones(&[8]));
        assert_eq!(fw.dropout(x, 0.5).unwrap(), x);
    }
}
