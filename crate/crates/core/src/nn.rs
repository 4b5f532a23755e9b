//! Parameter storage and the layers the encoders and heads are built from.
//!
//! Layers hold only ids into a [`ParamStore`] and a [`BufferStore`]; the values live in the
//! stores, which keeps online and EMA-target networks structurally identical while owning
//! separate state.

use ndarray::{Array1, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ops::{self, NormMode};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies; false for biases and normalization affine parameters.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.value.len()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect()
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.entries.iter().map(|e| tape.constant(e.value.clone())).collect()
    }

    /// The first `n` parameters.
    pub fn prefix(&self, n: usize) -> ParamStore {
        ParamStore { entries: self.entries[..n].to_vec() }
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

/// Non-trainable state: batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BufferStore {
    entries: Vec<(String, Array1<f64>)>,
}

impl BufferStore {
    pub fn add(&mut self, name: impl Into<String>, value: Array1<f64>) -> BufferId {
        self.entries.push((name.into(), value));
        BufferId(self.entries.len() - 1)
    }

    pub fn get(&self, id: BufferId) -> &Array1<f64> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: BufferId) -> &mut Array1<f64> {
        &mut self.entries[id.0].1
    }

    pub fn entries(&self) -> &[(String, Array1<f64>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Array1<f64>)] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prefix(&self, n: usize) -> BufferStore {
        BufferStore { entries: self.entries[..n].to_vec() }
    }
}

/// Trainable parameters plus buffers of one network instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetState {
    pub params: ParamStore,
    pub buffers: BufferStore,
}

impl NetState {
    /// The leading parameters and buffers, i.e. the networks registered first.
    pub fn prefix(&self, params: usize, buffers: usize) -> NetState {
        NetState { params: self.params.prefix(params), buffers: self.buffers.prefix(buffers) }
    }
}

/// Forward-pass context: bound parameters, mutable buffers, and the train/eval switch.
pub struct Ctx<'a, 't> {
    pub tape: &'t Tape,
    pub params: &'a [Var<'t>],
    pub buffers: &'a mut BufferStore,
    pub train: bool,
}

impl<'a, 't> Ctx<'a, 't> {
    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }
}

/// Weight/bias initialisation for a fresh network.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    fn kaiming_normal(&mut self, shape: &[usize], fan: usize) -> Tensor {
        let std = (2.0 / fan as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        Tensor::from_shape_fn(IxDyn(shape), |_| dist.sample(self.rng))
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        Tensor::from_shape_fn(IxDyn(shape), |_| dist.sample(self.rng))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `+-1/sqrt(in_dim)` initialisation for weight and bias.
    pub fn new<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.uniform(&[out_dim, in_dim], bound), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), init.uniform(&[out_dim], bound), false));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Var<'t> {
        ops::linear(x, ctx.param(self.weight), self.bias.map(|b| ctx.param(b)))
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Bias-free convolution (always followed by batch norm), Kaiming-normal in fan-out mode.
    pub fn new<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let w = init.kaiming_normal(&[out_ch, in_ch, kernel, kernel], out_ch * kernel * kernel);
        Conv2d { weight: store.add(format!("{name}.weight"), w, true), stride, pad }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Var<'t> {
        ops::conv2d(x, ctx.param(self.weight), None, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(state: &mut NetState, name: &str, features: usize) -> Self {
        BatchNorm {
            gamma: state.params.add(format!("{name}.gamma"), Tensor::ones(IxDyn(&[features])), false),
            beta: state.params.add(format!("{name}.beta"), Tensor::zeros(IxDyn(&[features])), false),
            running_mean: state.buffers.add(format!("{name}.running_mean"), Array1::zeros(features)),
            running_var: state.buffers.add(format!("{name}.running_var"), Array1::ones(features)),
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'_, 't>, x: Var<'t>) -> Var<'t> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.train {
            let (y, stats) = ops::batch_norm(x, gamma, beta, NormMode::Batch);
            let stats = stats.expect("training-mode batch norm yields statistics");
            let mean = ctx.buffers.get_mut(self.running_mean);
            *mean = &*mean * (1.0 - BN_MOMENTUM) + &stats.mean * BN_MOMENTUM;
            let var = ctx.buffers.get_mut(self.running_var);
            *var = &*var * (1.0 - BN_MOMENTUM) + &stats.var * BN_MOMENTUM;
            y
        } else {
            let mean = ctx.buffers.get(self.running_mean).clone();
            let var = ctx.buffers.get(self.running_var).clone();
            ops::batch_norm(x, gamma, beta, NormMode::Running { mean: &mean, var: &var }).0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden: usize,
    pub output: usize,
    /// Batch norm between the two layers.
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_true() -> bool {
    true
}

impl HeadSpec {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.hidden == 0 || self.output == 0 {
            return Err(Error::config(format!("{what} head dims must be positive")));
        }
        Ok(())
    }
}

/// Two-layer MLP head: `linear -> [batch norm] -> relu -> linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub bn: Option<BatchNorm>,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(state: &mut NetState, init: &mut Init<'_, R>, name: &str, in_dim: usize, spec: &HeadSpec) -> Self {
        let fc1 = Linear::new(&mut state.params, init, &format!("{name}.fc1"), in_dim, spec.hidden, !spec.batch_norm);
        let bn = spec.batch_norm.then(|| BatchNorm::new(state, &format!("{name}.bn"), spec.hidden));
        let fc2 = Linear::new(&mut state.params, init, &format!("{name}.fc2"), spec.hidden, spec.output, true);
        Mlp { fc1, bn, fc2 }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'_, 't>, x: Var<'t>) -> Var<'t> {
        let mut h = self.fc1.forward(ctx, x);
        if let Some(bn) = &self.bn {
            h = bn.forward(ctx, h);
        }
        self.fc2.forward(ctx, ops::relu(h))
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params() + self.bn.as_ref().map_or(0, |_| 2 * self.fc1.out_dim)
    }
}
