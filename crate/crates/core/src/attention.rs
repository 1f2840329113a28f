//! Probability-map-guided attention: attention-weighted index-pooling
//! downsampling (DAMIP) and spatial/channel attention with upsampling
//! (DAMSCA).

use rand::Rng;

use crate::error::{Error, Result};
use crate::index_pooling::{delta_weight, depthwise_mix, index_pool_var};
use crate::nn::{Conv, Ctx, EntryKind, NetworkState, Norm};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::ops;
use crate::tensor::{Element, Var};

/// Index pooling window used between paths.
pub const POOL_WINDOW: usize = 2;

fn check_map_pair<T: Element>(op: &'static str, f: &Var<T>, m: &Var<T>) -> Result<()> {
    let (n, _, h, w) = f.value().dims4()?;
    let (mn, mc, mh, mw) = m.value().dims4()?;
    if mc != 1 || (mn, mh, mw) != (n, h, w) {
        return Err(Error::shape(
            op,
            format!("probability map {:?} does not match feature {:?}", m.shape(), f.shape()),
        ));
    }
    Ok(())
}

/// `IP(g) ⊙ IP(m) + IP(g)` in the flattened slice-major layout, the single
/// map slice `q` of `IP(m)` scaling every channel of feature slice `q`.
pub fn damip_combine<T: Element>(g: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
    check_map_pair("damip", g, m)?;
    if m.value().data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::invalid("damip", "probability map values must lie in [0, 1]"));
    }
    let pg = index_pool_var(g, POOL_WINDOW)?;
    let pm = index_pool_var(m, POOL_WINDOW)?;
    ops::add(&ops::mul_groups(&pg, &pm)?, &pg)
}

/// Attention-guided lossless downsampling from `C'` to `2C'` channels at
/// half resolution.
#[derive(Clone, Debug)]
pub struct Damip {
    pub name: String,
    pub in_channels: usize,
    reduce: Conv,
    conv7: Conv,
    bn: Norm,
}

impl Damip {
    pub fn new(prefix: &str, in_channels: usize) -> Self {
        let (c4, c2) = (4 * in_channels, 2 * in_channels);
        Self {
            name: prefix.to_string(),
            in_channels,
            reduce: Conv::new(format!("{prefix}.reduce"), c4, c2, ConvSpec::new(1, 1, 0, 1)).with_bias(),
            conv7: Conv::new(format!("{prefix}.conv7"), c2, c2, ConvSpec::new(7, 1, 3, 1)),
            bn: Norm::new(format!("{prefix}.bn"), c2),
        }
    }

    pub fn mix_name(&self) -> String {
        format!("{}.mix.weight", self.name)
    }

    pub fn register<T: Element>(&self, state: &mut NetworkState<T>, rng: &mut impl Rng) -> Result<()> {
        state.insert(self.mix_name(), EntryKind::Param, delta_weight(4 * self.in_channels))?;
        self.reduce.register(state, rng)?;
        self.conv7.register(state, rng)?;
        self.bn.register(state)
    }

    /// The combined tensor after depthwise mixing, before any channel
    /// reduction.
    pub fn mixed<T: Element>(&self, ctx: &Ctx<'_, T>, g: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
        let (_, c, _, _) = g.value().dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "damip",
                format!("{}: feature has {c} channels, expected {}", self.name, self.in_channels),
            ));
        }
        let h = damip_combine(g, m)?;
        depthwise_mix(&h, &ctx.param(&self.mix_name())?)
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, g: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
        let h = self.mixed(ctx, g, m)?;
        let h = self.reduce.forward(ctx, &h)?;
        let h = self.conv7.forward(ctx, &h)?;
        Ok(ops::relu(&self.bn.forward(ctx, &h)?))
    }
}

/// Spatial branch: every channel of `f` scaled by the map.
pub fn damsca_spatial<T: Element>(f: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
    check_map_pair("damsca_spatial", f, m)?;
    ops::mul_groups(f, m)
}

/// Channel gate `sigmoid(GAP(conv1×1(m)))`, shape `[n, C', 1, 1]`.
pub fn damsca_gate<T: Element>(ctx: &Ctx<'_, T>, lift: &Conv, m: &Var<T>) -> Result<Var<T>> {
    let lifted = lift.forward(ctx, m)?;
    Ok(ops::sigmoid(&ops::global_avg_pool(&lifted)?))
}

/// Spatial/channel attention driven by a probability map, followed by
/// bilinear upsampling to a common resolution.
#[derive(Clone, Debug)]
pub struct Damsca {
    pub name: String,
    pub channels: usize,
    pub lift: Conv,
}

impl Damsca {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            name: prefix.to_string(),
            channels,
            lift: Conv::new(format!("{prefix}.lift"), 1, channels, ConvSpec::new(1, 1, 0, 1)).with_bias(),
        }
    }

    pub fn register<T: Element>(&self, state: &mut NetworkState<T>, rng: &mut impl Rng) -> Result<()> {
        self.lift.register(state, rng)
    }

    pub fn channel<T: Element>(&self, ctx: &Ctx<'_, T>, f: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
        check_map_pair("damsca_channel", f, m)?;
        let gate = damsca_gate(ctx, &self.lift, m)?;
        ops::scale_channels(f, &gate)
    }

    pub fn forward<T: Element>(
        &self,
        ctx: &Ctx<'_, T>,
        f: &Var<T>,
        m: &Var<T>,
        target: (usize, usize),
    ) -> Result<Var<T>> {
        let (_, c, _, _) = f.value().dims4()?;
        if c != self.channels {
            return Err(Error::shape(
                "damsca",
                format!("{}: feature has {c} channels, expected {}", self.name, self.channels),
            ));
        }
        let spatial = damsca_spatial(f, m)?;
        let channel = self.channel(ctx, f, m)?;
        let fused = ops::relu(&ops::add(&spatial, &channel)?);
        ops::bilinear_upsample(&fused, target)
    }
}
