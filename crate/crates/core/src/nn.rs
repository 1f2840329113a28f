//! Named parameter storage and the forward-pass context shared by all
//! network components.

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::ops::{self, BnRunning, Mode};
use crate::tensor::{Element, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Learnable, updated by the optimizer.
    Param,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T: Element> {
    pub kind: EntryKind,
    pub tensor: Tensor<T>,
}

/// Every learnable parameter and batch-norm running statistic, addressed by
/// hierarchical dotted names in registration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NetworkState<T: Element = f32> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Element> NetworkState<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: EntryKind, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid("NetworkState::insert", format!("duplicate entry {name}")));
        }
        self.entries.insert(name, Entry { kind, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Entry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid("NetworkState::get", format!("no entry named {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::invalid("NetworkState::tensor_mut", format!("no entry named {name}")))
    }

    /// Replaces an existing entry's tensor; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self.tensor_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(
                "NetworkState::set",
                format!("{name}: {:?} vs {:?}", slot.shape(), tensor.shape()),
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, e)| e.kind == EntryKind::Param)
            .map(|(k, e)| (k, &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> NetworkState<U> {
        NetworkState {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            kind: e.kind,
                            tensor: e.tensor.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Whether parameters enter the graph as gradient-tracked leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grad {
    Track,
    Off,
}

/// State threaded through one forward pass.
///
/// Parameters are read from a frozen [`NetworkState`]; batch-norm running
/// statistics computed in train mode are collected and applied afterwards
/// with [`Ctx::into_updates`].
pub struct Ctx<'a, T: Element> {
    state: &'a NetworkState<T>,
    mode: Mode,
    grad: Grad,
    leaves: RefCell<HashMap<String, Var<T>>>,
    bn_updates: RefCell<Vec<(String, BnRunning<T>)>>,
    rng: RefCell<ChaCha8Rng>,
    trace: Option<RefCell<Vec<(String, Vec<usize>)>>>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(state: &'a NetworkState<T>, mode: Mode, grad: Grad) -> Self {
        Self {
            state,
            mode,
            grad,
            leaves: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
            trace: None,
        }
    }

    /// Seeds the generator used by stochastic layers.
    pub fn with_seed(self, seed: u64) -> Self {
        *self.rng.borrow_mut() = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// Records the shape of every named intermediate passed to [`Ctx::record`].
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn state(&self) -> &NetworkState<T> {
        self.state
    }

    /// Graph leaf for a parameter; repeated lookups share one leaf.
    pub fn param(&self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return Ok(v.clone());
        }
        let tensor = self.state.tensor(name)?.clone();
        let var = match self.grad {
            Grad::Track => Var::parameter(tensor),
            Grad::Off => Var::constant(tensor),
        };
        self.leaves.borrow_mut().insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub(crate) fn sample_unit(&self) -> f64 {
        self.rng.borrow_mut().random::<f64>()
    }

    pub fn record(&self, name: impl Into<String>, v: &Var<T>) {
        if let Some(trace) = &self.trace {
            trace.borrow_mut().push((name.into(), v.shape().to_vec()));
        }
    }

    pub fn trace(&self) -> Vec<(String, Vec<usize>)> {
        self.trace
            .as_ref()
            .map(|t| t.borrow().clone())
            .unwrap_or_default()
    }

    /// Leaves created for tracked parameters, by name.
    pub fn leaves(&self) -> HashMap<String, Var<T>> {
        self.leaves.borrow().clone()
    }

    fn push_bn_update(&self, prefix: &str, running: BnRunning<T>) {
        self.bn_updates.borrow_mut().push((prefix.to_string(), running));
    }

    /// Batch-norm running statistics produced in train mode.
    pub fn into_updates(self) -> Vec<(String, BnRunning<T>)> {
        self.bn_updates.into_inner()
    }
}

/// Applies collected batch-norm updates to a state.
pub fn apply_bn_updates<T: Element>(
    state: &mut NetworkState<T>,
    updates: Vec<(String, BnRunning<T>)>,
) -> Result<()> {
    for (prefix, running) in updates {
        state.set(&format!("{prefix}.running_mean"), running.mean)?;
        state.set(&format!("{prefix}.running_var"), running.var)?;
    }
    Ok(())
}

/// A convolution layer addressed by name.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, spec: ConvSpec) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            spec,
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.spec.kernel;
        vec![self.out_channels, self.in_channels / self.spec.groups, k, k]
    }

    /// Registers Kaiming-normal weights (fan-in, ReLU gain) and zero bias.
    pub fn register<T: Element>(&self, state: &mut NetworkState<T>, rng: &mut impl Rng) -> Result<()> {
        let shape = self.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let std = (2.0 / fan_in as f64).sqrt();
        state.insert(self.weight_name(), EntryKind::Param, Tensor::randn(shape, std, rng))?;
        if self.bias {
            state.insert(self.bias_name(), EntryKind::Param, Tensor::zeros(vec![self.out_channels]))?;
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(&self.weight_name())?;
        let b = if self.bias {
            Some(ctx.param(&self.bias_name())?)
        } else {
            None
        };
        ops::conv2d(x, &w, b.as_ref(), self.spec).map_err(|e| context(&self.name, e))
    }
}

/// Batch normalization with affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
}

impl Norm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn register<T: Element>(&self, state: &mut NetworkState<T>) -> Result<()> {
        let c = self.channels;
        state.insert(format!("{}.gamma", self.name), EntryKind::Param, Tensor::ones(vec![c]))?;
        state.insert(format!("{}.beta", self.name), EntryKind::Param, Tensor::zeros(vec![c]))?;
        state.insert(format!("{}.running_mean", self.name), EntryKind::Buffer, Tensor::zeros(vec![c]))?;
        state.insert(format!("{}.running_var", self.name), EntryKind::Buffer, Tensor::ones(vec![c]))?;
        Ok(())
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        let running = BnRunning {
            mean: ctx.state.tensor(&format!("{}.running_mean", self.name))?.clone(),
            var: ctx.state.tensor(&format!("{}.running_var", self.name))?.clone(),
        };
        let (y, update) =
            ops::batch_norm(x, &gamma, &beta, &running, ctx.mode).map_err(|e| context(&self.name, e))?;
        if let Some(update) = update {
            ctx.push_bn_update(&self.name, update);
        }
        Ok(y)
    }
}

/// Prefixes shape errors with the layer that raised them.
pub(crate) fn context(layer: &str, err: Error) -> Error {
    match err {
        Error::Shape { op, detail } => Error::Shape {
            op,
            detail: format!("{layer}: {detail}"),
        },
        other => other,
    }
}
