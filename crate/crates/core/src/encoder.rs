//! Dilated convolution blocks, the per-path feature encoder and the
//! probability-map head attached to it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv, Ctx, NetworkState, Norm};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::ops;
use crate::tensor::{Element, Var};

/// Receptive extent of a `k`-tap kernel at dilation `d`: `k + (k − 1)(d − 1)`.
pub fn effective_kernel_size(k: usize, d: usize) -> usize {
    k + (k - 1) * (d - 1)
}

/// Dilation of block `j` on path `i` with dilation constant `r`.
pub fn dilation_rate(path: usize, block: usize, r: usize) -> usize {
    path * block * r
}

/// One residual block: two `{1×1 conv → 3×3 dilated conv → BN → ReLU}`
/// units plus a 1×1 bottleneck on the skip path, summed and rectified.
#[derive(Clone, Debug)]
pub struct DilatedBlock {
    pub path: usize,
    pub block: usize,
    pub dilation: usize,
    pub channels: usize,
    units: Vec<(Conv, Conv, Norm)>,
    residual: Conv,
}

impl DilatedBlock {
    pub fn new(prefix: &str, path: usize, block: usize, dilation: usize, channels: usize) -> Self {
        let units = (1..=2)
            .map(|u| {
                (
                    Conv::new(format!("{prefix}.unit{u}.pointwise"), channels, channels, ConvSpec::new(1, 1, 0, 1))
                        .with_bias(),
                    Conv::new(format!("{prefix}.unit{u}.dilated"), channels, channels, ConvSpec::same(3, dilation)),
                    Norm::new(format!("{prefix}.unit{u}.bn"), channels),
                )
            })
            .collect();
        let residual =
            Conv::new(format!("{prefix}.residual"), channels, channels, ConvSpec::new(1, 1, 0, 1)).with_bias();
        Self {
            path,
            block,
            dilation,
            channels,
            units,
            residual,
        }
    }

    pub fn register<T: Element>(&self, state: &mut NetworkState<T>, rng: &mut impl Rng) -> Result<()> {
        for (pw, dil, bn) in &self.units {
            pw.register(state, rng)?;
            dil.register(state, rng)?;
            bn.register(state)?;
        }
        self.residual.register(state, rng)
    }

    pub fn layers(&self) -> impl Iterator<Item = &Conv> {
        self.units
            .iter()
            .flat_map(|(a, b, _)| [a, b])
            .chain(std::iter::once(&self.residual))
    }

    pub fn residual(&self) -> &Conv {
        &self.residual
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, c, _, _) = x.value().dims4()?;
        if c != self.channels {
            return Err(Error::shape(
                "dilated_block",
                format!("path {} block {}: input has {c} channels, block expects {}", self.path, self.block, self.channels),
            ));
        }
        let mut main = x.clone();
        for (pw, dil, bn) in &self.units {
            main = pw.forward(ctx, &main)?;
            main = dil.forward(ctx, &main)?;
            main = ops::relu(&bn.forward(ctx, &main)?);
        }
        let skip = self.residual.forward(ctx, x)?;
        Ok(ops::relu(&ops::add(&main, &skip)?))
    }
}

/// `J` dilated blocks in series at constant width.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    pub path: usize,
    pub channels: usize,
    pub blocks: Vec<DilatedBlock>,
}

impl FeatureEncoder {
    /// Encoder for `path` (1-based). With `dilated == false` every block
    /// uses dilation 1.
    pub fn new(prefix: &str, path: usize, blocks: usize, r: usize, channels: usize, dilated: bool) -> Self {
        let blocks = (1..=blocks)
            .map(|j| {
                let d = if dilated { dilation_rate(path, j, r) } else { 1 };
                DilatedBlock::new(&format!("{prefix}.block{j}"), path, j, d, channels)
            })
            .collect();
        Self {
            path,
            channels,
            blocks,
        }
    }

    pub fn register<T: Element>(&self, state: &mut NetworkState<T>, rng: &mut impl Rng) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.register(state, rng))
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dilation).collect()
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, g: &Var<T>) -> Result<Var<T>> {
        let (_, c, _, _) = g.value().dims4()?;
        if c != self.channels {
            return Err(Error::shape(
                "feature_encoder",
                format!("path {}: input has {c} channels, expected {}", self.path, self.channels),
            ));
        }
        self.blocks.iter().try_fold(g.clone(), |x, b| b.forward(ctx, &x))
    }
}

/// Probability-map head: three `{3×3 conv → BN → ReLU}` units at the
/// incoming width, then a per-pixel 1×1 projection to one channel and a
/// sigmoid.
#[derive(Clone, Debug)]
pub struct Dpmg {
    pub path: usize,
    pub channels: usize,
    units: Vec<(Conv, Norm)>,
    head: Conv,
}

impl Dpmg {
    pub fn new(prefix: &str, path: usize, channels: usize) -> Self {
        let units = (1..=3)
            .map(|u| {
                (
                    Conv::new(format!("{prefix}.unit{u}.conv"), channels, channels, ConvSpec::new(3, 1, 1, 1)),
                    Norm::new(format!("{prefix}.unit{u}.bn"), channels),
                )
            })
            .collect();
        let head = Conv::new(format!("{prefix}.head"), channels, 1, ConvSpec::new(1, 1, 0, 1)).with_bias();
        Self {
            path,
            channels,
            units,
            head,
        }
    }

    pub fn register<T: Element>(&self, state: &mut NetworkState<T>, rng: &mut impl Rng) -> Result<()> {
        for (conv, bn) in &self.units {
            conv.register(state, rng)?;
            bn.register(state)?;
        }
        self.head.register(state, rng)
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, f: &Var<T>) -> Result<Var<T>> {
        let (_, c, _, _) = f.value().dims4()?;
        if c != self.channels {
            return Err(Error::shape(
                "dpmg",
                format!("path {}: feature has {c} channels, expected {}", self.path, self.channels),
            ));
        }
        let mut x = f.clone();
        for (conv, bn) in &self.units {
            x = ops::relu(&bn.forward(ctx, &conv.forward(ctx, &x)?)?);
        }
        Ok(ops::sigmoid(&self.head.forward(ctx, &x)?))
    }
}
