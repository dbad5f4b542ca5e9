//! Dense `f64` tensors, a reverse-mode autodiff tape, and RMSprop.
//!
//! Parameters live in a [`ParamStore`] and are addressed by [`ParamId`].
//! A forward pass binds the store onto a [`Tape`], producing one leaf
//! [`Var`] per parameter; after [`Tape::backward`] the gradients are
//! collected back into store order so that the optimiser and the target
//! network copy can work on plain tensors.

mod checkpoint;
mod optim;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::RmsProp;
pub use tape::{Activation, Gradients, Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

/// Plain row-major tensor with no graph attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Uniform in `±bound`.
    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpretation used on the tape: 1-D tensors are row vectors.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            more => {
                let c = *more.last().unwrap();
                (self.data.len() / c.max(1), c)
            }
        }
    }
}

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
///
/// Ordering is stable: ids are handed out in registration order and the
/// optimiser, checkpoints and target copies all rely on it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a linear layer's `[out, in]` weight and `[out]` bias with
    /// uniform `±1/sqrt(fan_in)` initialisation.
    pub fn register_linear<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.register(
            format!("{name}.weight"),
            Tensor::uniform(vec![fan_out, fan_in], bound, rng),
        );
        let bias = self.register(
            format!("{name}.bias"),
            Tensor::uniform(vec![fan_out], bound, rng),
        );
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites every value from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract(
                "parameter stores have different layouts".into(),
            ));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape != src.shape {
                return Err(Error::shape("copy_from", &dst.shape, &src.shape));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and the raw bits of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.names.iter().zip(&self.tensors) {
            eat(name.as_bytes());
            for d in &t.shape {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Handles for a fully-connected layer computing `x·Wᵀ + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape<'_>, bound: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, bound[self.weight.0], Some(bound[self.bias.0]))
    }
}

/// GRU cell parameters: `W_ih: [3H, I]`, `W_hh: [3H, H]`, biases `[3H]`,
/// gate blocks ordered (reset, update, candidate).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        // ±1/sqrt(fan_in) of the matrix each tensor belongs to
        let in_bound = 1.0 / (input as f64).sqrt();
        let hid_bound = 1.0 / (hidden as f64).sqrt();
        let mut reg = |suffix: &str, shape: Vec<usize>, bound: f64| {
            store.register(format!("{name}.{suffix}"), Tensor::uniform(shape, bound, rng))
        };
        let w_ih = reg("w_ih", vec![3 * hidden, input], in_bound);
        let w_hh = reg("w_hh", vec![3 * hidden, hidden], hid_bound);
        let b_ih = reg("b_ih", vec![3 * hidden], in_bound);
        let b_hh = reg("b_hh", vec![3 * hidden], hid_bound);
        Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            input,
            hidden,
        }
    }

    /// One step for a batch of rows: `x: [R, I]`, `h: [R, H]` → `[R, H]`.
    pub fn forward(&self, tape: &mut Tape<'_>, bound: &[Var], x: Var, h: Var) -> Result<Var> {
        let (_, xc) = tape.shape(x);
        if xc != self.input {
            return Err(Error::shape("gru input", &[xc], &[self.input]));
        }
        let gi = tape.linear(x, bound[self.w_ih.0], Some(bound[self.b_ih.0]))?;
        let gh = tape.linear(h, bound[self.w_hh.0], Some(bound[self.b_hh.0]))?;
        tape.gru_gates(gi, gh, h)
    }
}
