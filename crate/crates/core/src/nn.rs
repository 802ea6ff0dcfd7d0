//! Parametrized layers, the Adam optimizer and the checkpoint archive.
//!
//! Layers hold [`ParamId`]s into a [`ParameterStore`]. A forward pass first
//! binds every parameter onto a [`Tape`] as a leaf ([`ParameterStore::bind`]),
//! then calls layer methods with the resulting [`Bound`] table; gradients are
//! read back in store order with [`ParameterStore::gradients`].

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("gradient for `{name}` has shape {got:?}, parameter has {want:?}")]
    GradientShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("input window is empty")]
    EmptyWindow,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Adam first moment.
    pub m: Tensor,
    /// Adam second moment.
    pub v: Tensor,
    pub step: u64,
}

/// Named trainable tensors with their Adam state, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateName(name));
        }
        let shape = value.shape().to_vec();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Adds a parameter drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
    }

    /// Gradients in store order; `None` where the tape holds none.
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Vec<Option<Tensor>> {
        bound.0.iter().map(|&v| tape.grad(v)).collect()
    }

    /// Flattened copy of every parameter value in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Overwrites parameter values from a flat vector (inverse of [`Self::flat_values`]).
    pub fn set_flat_values(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length");
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    // ── checkpoint archive ──────────────────────────────────────────────
    //
    // Little-endian layout:
    //   magic  b"SFCKPT\0\0"
    //   u32    format version (1)
    //   u32    metadata byte length, then UTF-8 metadata
    //   u32    parameter count
    //   per parameter:
    //     u32 name length, UTF-8 name
    //     u32 rank, u64 x rank extents
    //     u64 Adam step
    //     f64 x n value, f64 x n first moment, f64 x n second moment

    pub fn write_checkpoint(&self, w: &mut impl Write, metadata: &str) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(metadata.len() as u32).to_le_bytes())?;
        w.write_all(metadata.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &e in p.value.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            w.write_all(&p.step.to_le_bytes())?;
            for t in [&p.value, &p.m, &p.v] {
                for x in t.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Reads an archive, returning the store and its metadata string.
    pub fn read_checkpoint(r: &mut impl Read) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let metadata = read_string(r)?;
        let count = read_u32(r)?;
        let mut store = Self::new();
        for _ in 0..count {
            let name = read_string(r)?;
            let rank = read_u32(r)? as usize;
            if rank == 0 || rank > crate::tensor::MAX_RANK {
                return Err(NnError::Checkpoint(format!("bad rank {rank} for `{name}`")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let step = read_u64(r)?;
            let n: usize = shape.iter().product();
            let mut read_tensor = || -> Result<Tensor> {
                let data = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
                Ok(Tensor::new(shape.clone(), data)?)
            };
            let value = read_tensor()?;
            let m = read_tensor()?;
            let v = read_tensor()?;
            let id = store.add(name, value)?;
            let p = store.get_mut(id);
            p.m = m;
            p.v = v;
            p.step = step;
        }
        Ok((store, metadata))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SFCKPT\0\0";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| NnError::Checkpoint(e.to_string()))
}

// ── Adam ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter.
///
/// Nothing is modified unless every parameter has a gradient of the right
/// shape.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &[Option<Tensor>],
    cfg: &AdamConfig,
) -> Result<()> {
    for (p, g) in store.params.iter().zip(grads) {
        let g = g
            .as_ref()
            .ok_or_else(|| NnError::MissingGradient(p.name.clone()))?;
        if g.shape() != p.value.shape() {
            return Err(NnError::GradientShape {
                name: p.name.clone(),
                got: g.shape().to_vec(),
                want: p.value.shape().to_vec(),
            });
        }
    }
    if grads.len() < store.params.len() {
        return Err(NnError::MissingGradient(store.params[grads.len()].name.clone()));
    }
    for (p, g) in store.params.iter_mut().zip(grads) {
        let g = g.as_ref().expect("checked above");
        p.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
        let (value, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
        for i in 0..value.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ── layers ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x)?,
            Activation::Tanh => tape.tanh(x)?,
            Activation::Sigmoid => tape.sigmoid(x)?,
        })
    }
}

/// Affine map `x · W + b` over a `[batch, in]` input.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.w"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = store.add_uniform(format!("{name}.b"), &[out_dim], in_dim, rng)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, p.get(self.weight))?;
        Ok(tape.add(xw, p.get(self.bias))?)
    }
}

/// Feed-forward encoder: hidden layers with one activation, a final layer
/// with another.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardEncoder {
    pub layers: Vec<Linear>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl FeedForwardEncoder {
    /// `dims` lists every width from input to output, e.g. `[32, 64, 64, 64]`.
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        assert!(dims.len() >= 2, "encoder needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "encode_feedforward",
                lhs: shape.to_vec(),
                rhs: vec![self.in_dim()],
            }
            .into());
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            let act = if i == last {
                self.output_activation
            } else {
                self.hidden_activation
            };
            h = act.apply(tape, h)?;
        }
        Ok(h)
    }
}

/// Recurrent state threaded through a sequence.
#[derive(Debug, Clone, Copy)]
pub struct HiddenState {
    pub h: Var,
    pub c: Var,
}

/// Detached recurrent state carried between tapes.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenValues {
    pub h: Tensor,
    pub c: Tensor,
}

impl HiddenValues {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }

    pub fn to_tape(&self, tape: &mut Tape) -> HiddenState {
        HiddenState {
            h: tape.constant(self.h.clone()),
            c: tape.constant(self.c.clone()),
        }
    }

    pub fn from_tape(tape: &Tape, state: HiddenState) -> Self {
        Self {
            h: tape.value(state.h).clone(),
            c: tape.value(state.c).clone(),
        }
    }
}

/// Standard LSTM cell. The four gate blocks in `w_x`, `w_h` and `b` are laid
/// out along the last axis in the order (input, forget, cell, output).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_dim + hidden;
        let w_x = store.add_uniform(format!("{name}.wx"), &[in_dim, 4 * hidden], fan_in, rng)?;
        let w_h = store.add_uniform(format!("{name}.wh"), &[hidden, 4 * hidden], fan_in, rng)?;
        let b = store.add_uniform(format!("{name}.b"), &[4 * hidden], fan_in, rng)?;
        Ok(Self {
            w_x,
            w_h,
            b,
            in_dim,
            hidden,
        })
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> HiddenState {
        HiddenValues::zeros(batch, self.hidden).to_tape(tape)
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, state: HiddenState) -> Result<HiddenState> {
        let hd = self.hidden;
        let gx = tape.matmul(x, p.get(self.w_x))?;
        let gh = tape.matmul(state.h, p.get(self.w_h))?;
        let pre = tape.add(gx, gh)?;
        let pre = tape.add(pre, p.get(self.b))?;
        let gate = |tape: &mut Tape, k: usize| tape.slice(pre, 1, k * hd, (k + 1) * hd);
        let (i, f, g, o) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(HiddenState { h, c })
    }
}

/// Bidirectional LSTM over a window `[batch, m, in]`; the final forward and
/// final backward hidden states are concatenated and linearly projected.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmEncoder {
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
    pub projection: Linear,
}

impl BiLstmEncoder {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            forward_cell: LstmCell::new(store, &format!("{name}.fwd"), in_dim, hidden, rng)?,
            backward_cell: LstmCell::new(store, &format!("{name}.bwd"), in_dim, hidden, rng)?,
            projection: Linear::new(store, &format!("{name}.proj"), 2 * hidden, out_dim, rng)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.projection.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, window: Var) -> Result<Var> {
        let shape = tape.shape(window).to_vec();
        if shape.len() != 3 || shape[2] != self.forward_cell.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "encode_recurrent_bidirectional",
                lhs: shape,
                rhs: vec![self.forward_cell.in_dim],
            }
            .into());
        }
        let (batch, m, dim) = (shape[0], shape[1], shape[2]);
        let mut steps = Vec::with_capacity(m);
        for t in 0..m {
            let s = tape.slice(window, 1, t, t + 1)?;
            steps.push(tape.reshape(s, &[batch, dim])?);
        }
        let mut fwd = self.forward_cell.zero_state(tape, batch);
        for &x in &steps {
            fwd = self.forward_cell.step(tape, p, x, fwd)?;
        }
        let mut bwd = self.backward_cell.zero_state(tape, batch);
        for &x in steps.iter().rev() {
            bwd = self.backward_cell.step(tape, p, x, bwd)?;
        }
        let both = tape.concat(fwd.h, bwd.h, 1)?;
        self.projection.forward(tape, p, both)
    }
}

/// Stacks per-episode sample windows (`m` samples of equal width) into a
/// `[batch, m, width]` tensor.
pub fn window_batch(windows: &[&Vec<Vec<f64>>]) -> Result<Tensor> {
    let first = windows.first().ok_or(NnError::EmptyWindow)?;
    let m = first.len();
    let width = first.first().ok_or(NnError::EmptyWindow)?.len();
    let mut data = Vec::with_capacity(windows.len() * m * width);
    for w in windows {
        if w.is_empty() {
            return Err(NnError::EmptyWindow);
        }
        if w.len() != m || w.iter().any(|s| s.len() != width) {
            return Err(TensorError::ShapeMismatch {
                op: "window_batch",
                lhs: vec![m, width],
                rhs: vec![w.len(), w[0].len()],
            }
            .into());
        }
        for s in w.iter() {
            data.extend_from_slice(s);
        }
    }
    Ok(Tensor::new(vec![windows.len(), m, width], data)?)
}

/// Recurrent temporal model followed by a fully-connected regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalModel {
    pub cell: LstmCell,
    pub regressor: Linear,
}

impl TemporalModel {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            cell: LstmCell::new(store, &format!("{name}.lstm"), in_dim, hidden, rng)?,
            regressor: Linear::new(store, &format!("{name}.reg"), hidden, out_dim, rng)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.cell.in_dim
    }

    /// One step: returns the raw regression output and the next state.
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        prev: HiddenState,
    ) -> Result<(Var, HiddenState)> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "temporal_step",
                lhs: shape.to_vec(),
                rhs: vec![self.in_dim()],
            }
            .into());
        }
        let next = self.cell.step(tape, p, z, prev)?;
        let y = self.regressor.forward(tape, p, next.h)?;
        Ok((y, next))
    }
}
