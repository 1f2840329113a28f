//! Differentiable primitives over [`Var`].

use super::autograd::BackwardOp;
use super::kernels::{
    add_channel_bias, channel_sums, check_bias, conv_data_grad, conv_forward, conv_weight_grad,
    ConvSpec, Geometry,
};
use super::{Element, Tensor, Var};
use crate::error::{Error, Result};

/// Batch-norm running statistics and hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning<T: Element> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// Convolutions

struct Conv2d {
    geom: Geometry,
    has_bias: bool,
}

impl<T: Element> BackwardOp<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = &self.geom;
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            conv_data_grad(g, grad.data(), w.data(), &mut dx);
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); w.len()];
            conv_weight_grad(g, x.data(), grad.data(), &mut dw);
            Tensor::from_parts(w.shape().to_vec(), dw)
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let sums = channel_sums(grad.data(), g.n, g.cout, g.ho * g.wo);
                Tensor::from_parts(vec![g.cout], sums)
            }));
        }
        Ok(out)
    }
}

/// Cross-correlation of `x` [n, c_in, h, w] with `weight`
/// [c_out, c_in/groups, k, k], zero padding.
pub fn conv2d<T: Element>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    spec: ConvSpec,
) -> Result<Var<T>> {
    let geom = Geometry::forward("conv2d", x.shape(), weight.shape(), spec)?;
    let mut y = vec![T::zero(); geom.n * geom.cout * geom.ho * geom.wo];
    conv_forward(&geom, x.value().data(), weight.value().data(), &mut y);
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        check_bias("conv2d", b.value(), geom.cout)?;
        add_channel_bias(&mut y, b.value().data(), geom.n, geom.ho * geom.wo);
        inputs.push(b);
    }
    let value = Tensor::from_parts(vec![geom.n, geom.cout, geom.ho, geom.wo], y);
    Ok(Var::from_op(
        value,
        &inputs,
        Conv2d {
            geom,
            has_bias: bias.is_some(),
        },
    ))
}

struct TransposedConv2d {
    /// Geometry of the adjoint forward convolution.
    geom: Geometry,
    has_bias: bool,
}

impl<T: Element> BackwardOp<T> for TransposedConv2d {
    fn name(&self) -> &'static str {
        "transposed_conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = &self.geom;
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            conv_forward(g, grad.data(), w.data(), &mut dx);
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); w.len()];
            conv_weight_grad(g, grad.data(), x.data(), &mut dw);
            Tensor::from_parts(w.shape().to_vec(), dw)
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let sums = channel_sums(grad.data(), g.n, g.cin, g.h * g.w);
                Tensor::from_parts(vec![g.cin], sums)
            }));
        }
        Ok(out)
    }
}

/// Adjoint of [`conv2d`]: `weight` is `[c_in, c_out/groups, k, k]` and the
/// output extent is `(h − 1)·s − 2p + d·(k − 1) + 1`.
pub fn transposed_conv2d<T: Element>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    spec: ConvSpec,
) -> Result<Var<T>> {
    let geom = Geometry::transposed("transposed_conv2d", x.shape(), weight.shape(), spec)?;
    let mut y = vec![T::zero(); geom.n * geom.cin * geom.h * geom.w];
    conv_data_grad(&geom, x.value().data(), weight.value().data(), &mut y);
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        check_bias("transposed_conv2d", b.value(), geom.cin)?;
        add_channel_bias(&mut y, b.value().data(), geom.n, geom.h * geom.w);
        inputs.push(b);
    }
    let value = Tensor::from_parts(vec![geom.n, geom.cin, geom.h, geom.w], y);
    Ok(Var::from_op(
        value,
        &inputs,
        TransposedConv2d {
            geom,
            has_bias: bias.is_some(),
        },
    ))
}

// ---------------------------------------------------------------------------
// Batch normalization

struct BatchNorm<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Element> BackwardOp<T> for BatchNorm<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let count = T::of((n * plane) as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (m, is) = (self.mean[ch], self.inv_std[ch]);
                for (&xv, &gv) in x.data()[off..off + plane].iter().zip(&grad.data()[off..off + plane]) {
                    dbeta[ch] += gv;
                    dgamma[ch] += gv * (xv - m) * is;
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    let (m, is, gm) = (self.mean[ch], self.inv_std[ch], gamma.data()[ch]);
                    let xs = &x.data()[off..off + plane];
                    let gs = &grad.data()[off..off + plane];
                    let out = &mut dx[off..off + plane];
                    if self.train {
                        let (sb, sg) = (dbeta[ch] / count, dgamma[ch] / count);
                        for ((o, &xv), &gv) in out.iter_mut().zip(xs).zip(gs) {
                            let xhat = (xv - m) * is;
                            *o = gm * is * (gv - sb - xhat * sg);
                        }
                    } else {
                        for (o, &gv) in out.iter_mut().zip(gs) {
                            *o = gm * is * gv;
                        }
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        Ok(vec![
            dx,
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

/// Per-channel batch normalization of `x` [n, c, h, w].
///
/// In train mode the batch statistics (biased variance) normalize the input
/// and the updated running statistics are returned; eval mode uses
/// `running` and returns `None`.
pub fn batch_norm<T: Element>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running: &BnRunning<T>,
    mode: Mode,
) -> Result<(Var<T>, Option<BnRunning<T>>)> {
    let (n, c, h, w) = x.value().dims4()?;
    for (name, t) in [
        ("gamma", gamma.value()),
        ("beta", beta.value()),
        ("running mean", &running.mean),
        ("running var", &running.var),
    ] {
        if t.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} has {} elements, input has {c} channels", t.len()),
            ));
        }
    }
    let plane = h * w;
    let xd = x.value().data();
    let eps = T::of(BN_EPS);
    let (mean, var) = match mode {
        Mode::Train => {
            let count = T::of((n * plane) as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    mean[ch] += xd[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for b in 0..n {
                for ch in 0..c {
                    let m = mean[ch];
                    var[ch] += xd[(b * c + ch) * plane..][..plane]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            (mean, var)
        }
        Mode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let mut y = vec![T::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, is, gm, bt) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
            for (o, &v) in y[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                *o = gm * (v - m) * is + bt;
            }
        }
    }
    let updated = (mode == Mode::Train).then(|| {
        let mo = T::of(BN_MOMENTUM);
        let keep = T::one() - mo;
        BnRunning {
            mean: Tensor::from_parts(
                vec![c],
                running.mean.data().iter().zip(&mean).map(|(&r, &m)| keep * r + mo * m).collect(),
            ),
            var: Tensor::from_parts(
                vec![c],
                running.var.data().iter().zip(&var).map(|(&r, &v)| keep * r + mo * v).collect(),
            ),
        }
    });
    let op = BatchNorm {
        mean,
        inv_std,
        train: mode == Mode::Train,
    };
    let value = Tensor::from_parts(x.shape().to_vec(), y);
    Ok((Var::from_op(value, &[x, gamma, beta], op), updated))
}

// ---------------------------------------------------------------------------
// Elementwise

struct Relu;

impl<T: Element> BackwardOp<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(inputs[0].zip_map(grad, |x, g| {
            if x > T::zero() {
                g
            } else {
                T::zero()
            }
        })?)])
    }
}

pub fn relu<T: Element>(x: &Var<T>) -> Var<T> {
    let value = x.value().map(|v| if v > T::zero() { v } else { T::zero() });
    Var::from_op(value, &[x], Relu)
}

struct Sigmoid;

impl<T: Element> BackwardOp<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(output.zip_map(grad, |y, g| g * y * (T::one() - y))?)])
    }
}

/// Logistic sigmoid, kept strictly inside `(0, 1)` even where the exact
/// value rounds to an endpoint.
pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    let y = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::of(2.0);
    y.max(T::min_positive_value()).min(hi)
}

pub fn sigmoid<T: Element>(x: &Var<T>) -> Var<T> {
    Var::from_op(x.value().map(sigmoid_scalar), &[x], Sigmoid)
}

struct Add;

impl<T: Element> BackwardOp<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(needs.iter().map(|&n| n.then(|| grad.clone())).collect())
    }
}

pub fn add<T: Element>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let value = a.value().zip_map(b.value(), |x, y| x + y)?;
    Ok(Var::from_op(value, &[a, b], Add))
}

/// Sum of equally shaped tensors.
pub fn add_all<T: Element>(terms: &[Var<T>]) -> Result<Var<T>> {
    let first = terms
        .first()
        .ok_or_else(|| Error::invalid("add_all", "no terms"))?;
    let mut value = first.value().clone();
    for t in &terms[1..] {
        value.add_assign(t.value())?;
    }
    let inputs: Vec<&Var<T>> = terms.iter().collect();
    Ok(Var::from_op(value, &inputs, Add))
}

struct Mul;

impl<T: Element> BackwardOp<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let da = needs[0].then(|| grad.zip_map(inputs[1], |g, b| g * b)).transpose()?;
        let db = needs[1].then(|| grad.zip_map(inputs[0], |g, a| g * a)).transpose()?;
        Ok(vec![da, db])
    }
}

pub fn mul<T: Element>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let value = a.value().zip_map(b.value(), |x, y| x * y)?;
    Ok(Var::from_op(value, &[a, b], Mul))
}

struct Scale<T>(T);

impl<T: Element> BackwardOp<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.scale(self.0))])
    }
}

pub fn scale<T: Element>(x: &Var<T>, alpha: T) -> Var<T> {
    Var::from_op(x.value().scale(alpha), &[x], Scale(alpha))
}

// ---------------------------------------------------------------------------
// Broadcasting products

struct MulGroups {
    groups: usize,
}

impl<T: Element> BackwardOp<T> for MulGroups {
    fn name(&self) -> &'static str {
        "mul_groups"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, m) = (inputs[0], inputs[1]);
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let per = c / self.groups;
        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dm = needs[1].then(|| vec![T::zero(); m.len()]);
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let moff = (b * self.groups + ch / per) * plane;
                let gs = &grad.data()[off..off + plane];
                if let Some(dx) = dx.as_mut() {
                    let ms = &m.data()[moff..moff + plane];
                    for ((o, &gv), &mv) in dx[off..off + plane].iter_mut().zip(gs).zip(ms) {
                        *o = gv * mv;
                    }
                }
                if let Some(dm) = dm.as_mut() {
                    let xs = &x.data()[off..off + plane];
                    for ((o, &gv), &xv) in dm[moff..moff + plane].iter_mut().zip(gs).zip(xs) {
                        *o += gv * xv;
                    }
                }
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dm.map(|d| Tensor::from_parts(m.shape().to_vec(), d)),
        ])
    }
}

/// Product of `x` [n, c, h, w] with `m` [n, g, h, w], where channel `ch` of
/// `x` is paired with map `ch / (c / g)`. With `g == 1` this broadcasts a
/// single map over every channel.
pub fn mul_groups<T: Element>(x: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    let (mn, g, mh, mw) = m.value().dims4()?;
    if (mn, mh, mw) != (n, h, w) {
        return Err(Error::shape(
            "mul_groups",
            format!("feature {:?} vs map {:?}", x.shape(), m.shape()),
        ));
    }
    if c % g != 0 {
        return Err(Error::shape(
            "mul_groups",
            format!("map count {g} does not divide channel count {c}"),
        ));
    }
    let plane = h * w;
    let per = c / g;
    let mut y = vec![T::zero(); x.value().len()];
    let (xd, md) = (x.value().data(), m.value().data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let moff = (b * g + ch / per) * plane;
            for ((o, &xv), &mv) in y[off..off + plane]
                .iter_mut()
                .zip(&xd[off..off + plane])
                .zip(&md[moff..moff + plane])
            {
                *o = xv * mv;
            }
        }
    }
    let value = Tensor::from_parts(x.shape().to_vec(), y);
    Ok(Var::from_op(value, &[x, m], MulGroups { groups: g }))
}

struct ScaleChannels;

impl<T: Element> BackwardOp<T> for ScaleChannels {
    fn name(&self) -> &'static str {
        "scale_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gate) = (inputs[0], inputs[1]);
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dg = needs[1].then(|| vec![T::zero(); n * c]);
        for i in 0..n * c {
            let off = i * plane;
            let gs = &grad.data()[off..off + plane];
            if let Some(dx) = dx.as_mut() {
                let gv = gate.data()[i];
                for (o, &g) in dx[off..off + plane].iter_mut().zip(gs) {
                    *o = g * gv;
                }
            }
            if let Some(dg) = dg.as_mut() {
                dg[i] = gs.iter().zip(&x.data()[off..off + plane]).map(|(&g, &v)| g * v).sum();
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dg.map(|d| Tensor::from_parts(gate.shape().to_vec(), d)),
        ])
    }
}

/// Multiplies channel `c` of `x` [n, c, h, w] by `gate` [n, c, 1, 1].
pub fn scale_channels<T: Element>(x: &Var<T>, gate: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    if gate.value().dims4()? != (n, c, 1, 1) {
        return Err(Error::shape(
            "scale_channels",
            format!("gate {:?} does not match feature {:?}", gate.shape(), x.shape()),
        ));
    }
    let plane = h * w;
    let mut y = x.value().data().to_vec();
    for (i, &gv) in gate.value().data().iter().enumerate() {
        y[i * plane..(i + 1) * plane].iter_mut().for_each(|v| *v *= gv);
    }
    let value = Tensor::from_parts(x.shape().to_vec(), y);
    Ok(Var::from_op(value, &[x, gate], ScaleChannels))
}

// ---------------------------------------------------------------------------
// Reductions and resampling

struct GlobalAvgPool;

impl<T: Element> BackwardOp<T> for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let (_, _, h, w) = x.dims4()?;
        let plane = h * w;
        let inv = T::one() / T::of(plane as f64);
        let mut dx = vec![T::zero(); x.len()];
        for (i, &g) in grad.data().iter().enumerate() {
            dx[i * plane..(i + 1) * plane].fill(g * inv);
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

/// Per-channel spatial mean: [n, c, h, w] → [n, c, 1, 1].
pub fn global_avg_pool<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    let plane = h * w;
    let denom = T::of(plane as f64);
    let means = x
        .value()
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() / denom)
        .collect();
    let value = Tensor::from_parts(vec![n, c, 1, 1], means);
    Ok(Var::from_op(value, &[x], GlobalAvgPool))
}

/// Source index pair and interpolation weight for one output coordinate
/// under the half-pixel-center convention.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn bilinear_taps<T: Element>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            Tap {
                lo,
                hi,
                frac: T::of(frac),
            }
        })
        .collect()
}

struct Bilinear<T> {
    ys: Vec<Tap<T>>,
    xs: Vec<Tap<T>>,
}

impl<T: Element> BackwardOp<T> for Bilinear<T> {
    fn name(&self) -> &'static str {
        "bilinear_upsample"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4()?;
        let (ho, wo) = (self.ys.len(), self.xs.len());
        let mut dx = vec![T::zero(); x.len()];
        for i in 0..n * c {
            let plane = &mut dx[i * h * w..(i + 1) * h * w];
            let gp = &grad.data()[i * ho * wo..(i + 1) * ho * wo];
            for (oy, ty) in self.ys.iter().enumerate() {
                let (wy1, wy0) = (ty.frac, T::one() - ty.frac);
                for (ox, tx) in self.xs.iter().enumerate() {
                    let g = gp[oy * wo + ox];
                    let (wx1, wx0) = (tx.frac, T::one() - tx.frac);
                    plane[ty.lo * w + tx.lo] += g * wy0 * wx0;
                    plane[ty.lo * w + tx.hi] += g * wy0 * wx1;
                    plane[ty.hi * w + tx.lo] += g * wy1 * wx0;
                    plane[ty.hi * w + tx.hi] += g * wy1 * wx1;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

/// Bilinear upsampling with half-pixel centers. Interpolation is written
/// as `a + t·(b − a)` so constant inputs reproduce the constant exactly.
pub fn bilinear_upsample<T: Element>(x: &Var<T>, target: (usize, usize)) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    let (ho, wo) = target;
    if ho < h || wo < w {
        return Err(Error::invalid(
            "bilinear_upsample",
            format!("target {ho}×{wo} is smaller than input {h}×{w}"),
        ));
    }
    if (ho, wo) == (h, w) {
        return Ok(Var::from_op(
            x.value().clone(),
            &[x],
            Bilinear {
                ys: bilinear_taps::<T>(h, h),
                xs: bilinear_taps::<T>(w, w),
            },
        ));
    }
    let ys = bilinear_taps::<T>(h, ho);
    let xs = bilinear_taps::<T>(w, wo);
    let mut y = vec![T::zero(); n * c * ho * wo];
    let xd = x.value().data();
    for i in 0..n * c {
        let src = &xd[i * h * w..(i + 1) * h * w];
        let dst = &mut y[i * ho * wo..(i + 1) * ho * wo];
        for (oy, ty) in ys.iter().enumerate() {
            let (r0, r1) = (&src[ty.lo * w..][..w], &src[ty.hi * w..][..w]);
            for (ox, tx) in xs.iter().enumerate() {
                let top = r0[tx.lo] + tx.frac * (r0[tx.hi] - r0[tx.lo]);
                let bottom = r1[tx.lo] + tx.frac * (r1[tx.hi] - r1[tx.lo]);
                dst[oy * wo + ox] = top + ty.frac * (bottom - top);
            }
        }
    }
    let value = Tensor::from_parts(vec![n, c, ho, wo], y);
    Ok(Var::from_op(value, &[x], Bilinear { ys, xs }))
}

struct ConcatChannels {
    channels: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for ConcatChannels {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (n, total, h, w) = grad.dims4()?;
        let plane = h * w;
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for ((input, &c), &need) in inputs.iter().zip(&self.channels).zip(needs) {
            if need {
                let mut d = Vec::with_capacity(input.len());
                for b in 0..n {
                    d.extend_from_slice(&grad.data()[(b * total + offset) * plane..][..c * plane]);
                }
                out.push(Some(Tensor::from_parts(input.shape().to_vec(), d)));
            } else {
                out.push(None);
            }
            offset += c;
        }
        Ok(out)
    }
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels<T: Element>(parts: &[Var<T>]) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let (n, _, h, w) = first.value().dims4()?;
    let mut channels = Vec::with_capacity(parts.len());
    for (i, p) in parts.iter().enumerate() {
        let (pn, pc, ph, pw) = p.value().dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("input {i} has shape {:?}, expected [{n}, _, {h}, {w}]", p.shape()),
            ));
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut y = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&channels) {
            y.extend_from_slice(&p.value().data()[b * c * plane..][..c * plane]);
        }
    }
    let value = Tensor::from_parts(vec![n, total, h, w], y);
    let inputs: Vec<&Var<T>> = parts.iter().collect();
    Ok(Var::from_op(value, &inputs, ConcatChannels { channels }))
}

struct SumAll;

impl<T: Element> BackwardOp<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape().to_vec(), grad.item()?))])
    }
}

/// Sum of every element, as a one-element tensor.
pub fn sum<T: Element>(x: &Var<T>) -> Var<T> {
    Var::from_op(Tensor::scalar(x.value().sum()), &[x], SumAll)
}

pub fn mean<T: Element>(x: &Var<T>) -> Var<T> {
    let n = T::of(x.value().len() as f64);
    scale(&sum(x), T::one() / n)
}
