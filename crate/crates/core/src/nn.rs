//! Attention, multi-head attention, feed-forward and initialization.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{LiftError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How a parameter is filled when first created.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    XavierUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Receives parameter declarations from model constructors.
///
/// [`Initializer`] creates fresh tensors; [`Binder`] resolves declarations
/// against an existing store (e.g. one loaded from a checkpoint).
pub trait ParamSink {
    fn declare(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId>;
}

pub struct Initializer<'a, T: Scalar, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> ParamSink for Initializer<'_, T, R> {
    fn declare(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::XavierUniform { fan_in, fan_out } => xavier_uniform(self.rng, fan_in, fan_out, numel),
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| LiftError::config("init.std", e.to_string()))?;
                (0..numel).map(|_| T::from_f64_lossy(dist.sample(self.rng))).collect()
            }
        };
        self.store.insert(name, Tensor::from_vec(shape, data)?)
    }
}

pub struct Binder<'a, T: Scalar> {
    pub store: &'a ParamStore<T>,
}

impl<T: Scalar> ParamSink for Binder<'_, T> {
    fn declare(&mut self, name: String, shape: &[usize], _init: Init) -> Result<ParamId> {
        let id = self
            .store
            .id_of(&name)
            .ok_or_else(|| LiftError::StructureMismatch(format!("missing parameter `{name}`")))?;
        let found = self.store.get(id).shape();
        if found != shape {
            return Err(LiftError::StructureMismatch(format!(
                "`{name}` has shape {found:?}, expected {shape:?}"
            )));
        }
        Ok(id)
    }
}

/// Xavier/Glorot uniform samples: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    count: usize,
) -> Vec<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    (0..count).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
}

/// Affine map `x·W + b` with `W: d_in×d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = sink.declare(
            format!("{name}.weight"),
            &[d_in, d_out],
            Init::XavierUniform {
                fan_in: d_in,
                fan_out: d_out,
            },
        )?;
        let bias = sink.declare(format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Fresh Xavier-initialized linear layer in its own store.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
) -> Result<(LinearParams, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let p = LinearParams::declare(&mut Initializer { store: &mut store, rng }, "linear", fan_in, fan_out)?;
    Ok((p, store))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: sink.declare(format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: sink.declare(format!("{name}.beta"), &[d], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, T::from_f64_lossy(self.eps))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
}

/// Per-head query/key/value projections (`d × d/h` each) and the shared
/// output projection `W_O` (`d × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub heads: Vec<HeadProjection>,
    pub output: LinearParams,
    /// Divisor inside the softmax is `sqrt(scale_dim)`.
    pub scale_dim: usize,
}

impl MhaParams {
    pub fn declare(
        sink: &mut dyn ParamSink,
        name: &str,
        d: usize,
        heads: usize,
        scale_dim: usize,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(LiftError::config("heads", format!("width {d} is not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let heads = (0..heads)
            .map(|i| {
                Ok(HeadProjection {
                    query: LinearParams::declare(sink, &format!("{name}.head{i}.q"), d, dh)?,
                    key: LinearParams::declare(sink, &format!("{name}.head{i}.k"), d, dh)?,
                    value: LinearParams::declare(sink, &format!("{name}.head{i}.v"), d, dh)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let output = LinearParams::declare(sink, &format!("{name}.out"), d, d)?;
        Ok(Self {
            heads,
            output,
            scale_dim,
        })
    }
}

/// Three `d × d` layers with ReLU after the first two.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub layers: [LinearParams; 3],
}

impl FfnParams {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            layers: [
                LinearParams::declare(sink, &format!("{name}.fc0"), d, d)?,
                LinearParams::declare(sink, &format!("{name}.fc1"), d, d)?,
                LinearParams::declare(sink, &format!("{name}.fc2"), d, d)?,
            ],
        })
    }
}

/// Dropout settings for one forward pass. `rng = None` means eval mode.
pub struct ForwardCtx<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut dyn RngCore>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: &'r mut dyn RngCore) -> Self {
        Self {
            dropout,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => tape.dropout(x, self.dropout, Some(rng)),
            None => Ok(x),
        }
    }
}

/// `softmax(q·kᵀ / sqrt(scale_dim)) · v`
pub fn attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    scale_dim: usize,
) -> Result<Var> {
    if tape.shape(q).last() != tape.shape(k).last() {
        return Err(LiftError::shape("attention(q, k)", tape.shape(q), tape.shape(k)));
    }
    if tape.shape(k).first() != tape.shape(v).first() {
        return Err(LiftError::shape("attention(k, v)", tape.shape(k), tape.shape(v)));
    }
    if scale_dim == 0 {
        return Err(LiftError::config("attention_scale", "scale dimension must be positive"));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::one() / T::from_usize(scale_dim).unwrap().sqrt());
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

/// Per-head projection and attention, concatenated and mapped through `W_O`.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &MhaParams,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let d = p.output.d_in;
    for (name, x) in [("mha(q)", q), ("mha(k)", k), ("mha(v)", v)] {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != d {
            return Err(LiftError::shape(name, tape.shape(x), &[0, d]));
        }
    }
    let mut heads = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let qh = h.query.forward(tape, q)?;
        let kh = h.key.forward(tape, k)?;
        let vh = h.value.forward(tape, v)?;
        heads.push(attention(tape, qh, kh, vh, p.scale_dim)?);
    }
    let cat = tape.concat_last_dim(&heads)?;
    p.output.forward(tape, cat)
}

/// linear → ReLU → linear → ReLU → linear, dropout on the hidden activations.
pub fn feed_forward<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &FfnParams,
    x: Var,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let d = p.layers[0].d_in;
    if tape.shape(x).len() != 2 || tape.shape(x)[1] != d {
        return Err(LiftError::shape("feed_forward", tape.shape(x), &[0, d]));
    }
    let mut h = x;
    for layer in &p.layers[..2] {
        h = layer.forward(tape, h)?;
        h = tape.relu(h);
        h = ctx.dropout(tape, h)?;
    }
    p.layers[2].forward(tape, h)
}
