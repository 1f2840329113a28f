//! Convolution kernels over raw rank-4 tensors.
//!
//! Dense convolutions are lowered to GEMM over im2col buffers built in
//! chunks of output rows, so the scratch space stays bounded even for
//! 512×512 feature maps. Depthwise convolutions use direct loops.

use super::{gemm, Element, MatRef, Tensor};
use crate::error::{Error, Result};

/// Target element count for one im2col chunk.
const CHUNK_ELEMS: usize = 1 << 18;

/// Square-kernel convolution hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Stride-1 convolution that preserves spatial extents (`k` odd).
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(kernel, 1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn validate(&self, op: &'static str) -> Result<()> {
        if self.kernel == 0 {
            return Err(Error::invalid(op, "kernel must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::invalid(op, "stride must be at least 1"));
        }
        if self.dilation == 0 {
            return Err(Error::invalid(op, "dilation must be at least 1"));
        }
        if self.groups == 0 {
            return Err(Error::invalid(op, "groups must be at least 1"));
        }
        Ok(())
    }

    /// Output extent of a forward convolution along one axis.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn transposed_extent(&self, input: usize) -> Option<usize> {
        let full = (input - 1) * self.stride + self.dilation * (self.kernel - 1) + 1;
        full.checked_sub(2 * self.padding).filter(|&v| v >= 1)
    }
}

/// Resolved extents of a convolution between an input plane `(h, w)` and an
/// output plane `(ho, wo)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn patch_len(&self) -> usize {
        self.cin_g() * self.spec.kernel * self.spec.kernel
    }

    fn is_pointwise(&self) -> bool {
        let s = self.spec;
        s.kernel == 1 && s.stride == 1 && s.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn rows_per_chunk(&self) -> usize {
        (CHUNK_ELEMS / (self.patch_len() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Validates a forward convolution of `x` [n, cin, h, w] with `weight`
    /// [cout, cin/groups, k, k].
    pub fn forward(
        op: &'static str,
        x: &[usize],
        weight: &[usize],
        spec: ConvSpec,
    ) -> Result<Self> {
        spec.validate(op)?;
        let [n, cin, h, w] = rank4(op, "input", x)?;
        let [cout, cin_g, kh, kw] = rank4(op, "weight", weight)?;
        check_kernel(op, spec, kh, kw)?;
        check_groups(op, spec, cin, cout)?;
        if cin_g * spec.groups != cin {
            return Err(Error::shape(
                op,
                format!(
                    "weight input channels {cin_g} × groups {} != input channels {cin}",
                    spec.groups
                ),
            ));
        }
        let ho = spec
            .output_extent(h)
            .ok_or_else(|| Error::shape(op, format!("height {h} yields zero-size output")))?;
        let wo = spec
            .output_extent(w)
            .ok_or_else(|| Error::shape(op, format!("width {w} yields zero-size output")))?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            ho,
            wo,
            spec,
        })
    }

    /// Validates a transposed convolution of `x` [n, c, h, w] with `weight`
    /// [c, cout/groups, k, k]. The returned geometry describes the adjoint
    /// forward convolution: its input plane is the transposed output.
    pub fn transposed(
        op: &'static str,
        x: &[usize],
        weight: &[usize],
        spec: ConvSpec,
    ) -> Result<Self> {
        spec.validate(op)?;
        let [n, c, h, w] = rank4(op, "input", x)?;
        let [wc, cout_g, kh, kw] = rank4(op, "weight", weight)?;
        check_kernel(op, spec, kh, kw)?;
        if wc != c {
            return Err(Error::shape(
                op,
                format!("weight leading extent {wc} != input channels {c}"),
            ));
        }
        let cout = cout_g * spec.groups;
        check_groups(op, spec, c, cout)?;
        let ho = spec
            .transposed_extent(h)
            .ok_or_else(|| Error::shape(op, format!("height {h} yields zero-size output")))?;
        let wo = spec
            .transposed_extent(w)
            .ok_or_else(|| Error::shape(op, format!("width {w} yields zero-size output")))?;
        let g = Self {
            n,
            cin: cout,
            h: ho,
            w: wo,
            cout: c,
            ho: h,
            wo: w,
            spec,
        };
        // Output extent is floor-divided when stride does not tile exactly;
        // the adjoint forward must reproduce the transposed input plane.
        if spec.output_extent(ho) != Some(h) || spec.output_extent(wo) != Some(w) {
            return Err(Error::shape(op, "transposed geometry is not invertible"));
        }
        Ok(g)
    }
}

fn rank4(op: &'static str, what: &str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(
            op,
            format!("{what} must be rank 4, got {shape:?}"),
        )),
    }
}

fn check_kernel(op: &'static str, spec: ConvSpec, kh: usize, kw: usize) -> Result<()> {
    if kh != spec.kernel || kw != spec.kernel {
        return Err(Error::shape(
            op,
            format!("weight kernel {kh}×{kw} != spec kernel {}", spec.kernel),
        ));
    }
    Ok(())
}

fn check_groups(op: &'static str, spec: ConvSpec, cin: usize, cout: usize) -> Result<()> {
    if cin % spec.groups != 0 {
        return Err(Error::shape(
            op,
            format!("groups {} does not divide input channels {cin}", spec.groups),
        ));
    }
    if cout % spec.groups != 0 {
        return Err(Error::shape(
            op,
            format!("groups {} does not divide output channels {cout}", spec.groups),
        ));
    }
    Ok(())
}

/// Fills `col` with the `[patch_len, (y1 - y0) * wo]` im2col block of one
/// group's input plane set `x` ([cin_g, h, w]) for output rows `y0..y1`.
fn im2col<T: Element>(g: &Geometry, x: &[T], y0: usize, y1: usize, col: &mut [T]) {
    let ConvSpec {
        kernel: k,
        stride: s,
        padding: p,
        dilation: d,
        ..
    } = g.spec;
    let (h, w, wo) = (g.h as isize, g.w as isize, g.wo);
    let cols = (y1 - y0) * wo;
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..k {
            for b in 0..k {
                let row = (c * k + a) * k + b;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let dx = (b * d) as isize - p as isize;
                for (r, oy) in (y0..y1).enumerate() {
                    let iy = (oy * s + a * d) as isize - p as isize;
                    let out = &mut dst[r * wo..(r + 1) * wo];
                    if iy < 0 || iy >= h {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if s == 1 {
                        // Valid ox range: 0 <= ox + dx < w.
                        let lo = (-dx).clamp(0, wo as isize) as usize;
                        let hi = (w - dx).clamp(0, wo as isize) as usize;
                        out[..lo].fill(T::zero());
                        if hi > lo {
                            let start = (lo as isize + dx) as usize;
                            out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                        out[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, v) in out.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + dx;
                            *v = if ix < 0 || ix >= w {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds an im2col block back onto `dx` ([cin_g, h, w]).
fn col2im<T: Element>(g: &Geometry, col: &[T], y0: usize, y1: usize, dx: &mut [T]) {
    let ConvSpec {
        kernel: k,
        stride: s,
        padding: p,
        dilation: d,
        ..
    } = g.spec;
    let (h, w, wo) = (g.h as isize, g.w as isize, g.wo);
    let cols = (y1 - y0) * wo;
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for a in 0..k {
            for b in 0..k {
                let row = (c * k + a) * k + b;
                let src = &col[row * cols..(row + 1) * cols];
                let dxo = (b * d) as isize - p as isize;
                for (r, oy) in (y0..y1).enumerate() {
                    let iy = (oy * s + a * d) as isize - p as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let vals = &src[r * wo..(r + 1) * wo];
                    if s == 1 {
                        let lo = (-dxo).clamp(0, wo as isize) as usize;
                        let hi = (w - dxo).clamp(0, wo as isize) as usize;
                        if hi > lo {
                            let start = (lo as isize + dxo) as usize;
                            for (o, &v) in dst[start..start + hi - lo].iter_mut().zip(&vals[lo..hi]) {
                                *o += v;
                            }
                        }
                    } else {
                        for (ox, &v) in vals.iter().enumerate() {
                            let ix = (ox * s) as isize + dxo;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, weight)` without bias; `y` is overwritten.
pub(crate) fn conv_forward<T: Element>(g: &Geometry, x: &[T], weight: &[T], y: &mut [T]) {
    if g.is_depthwise() {
        return depthwise_forward(g, x, weight, y);
    }
    let (cin_g, cout_g, kl) = (g.cin_g(), g.cout_g(), g.patch_len());
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let rows = g.rows_per_chunk();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kl * rows * g.wo]
    };
    for n in 0..g.n {
        for grp in 0..g.spec.groups {
            let xg = &x[(n * g.cin + grp * cin_g) * in_plane..][..cin_g * in_plane];
            let wg = MatRef::new(&weight[grp * cout_g * kl..][..cout_g * kl], cout_g, kl);
            let yg = &mut y[(n * g.cout + grp * cout_g) * out_plane..][..cout_g * out_plane];
            if g.is_pointwise() {
                gemm(T::one(), wg, MatRef::new(xg, cin_g, in_plane), T::zero(), yg, out_plane);
                continue;
            }
            let mut y0 = 0;
            while y0 < g.ho {
                let y1 = (y0 + rows).min(g.ho);
                let cols = (y1 - y0) * g.wo;
                im2col(g, xg, y0, y1, &mut col[..kl * cols]);
                gemm(
                    T::one(),
                    wg,
                    MatRef::new(&col[..kl * cols], kl, cols),
                    T::zero(),
                    &mut yg[y0 * g.wo..],
                    out_plane,
                );
                y0 = y1;
            }
        }
    }
}

/// `dx += convᵀ(dy, weight)`: the data gradient of a forward convolution,
/// which is also the forward pass of a transposed convolution.
pub(crate) fn conv_data_grad<T: Element>(g: &Geometry, dy: &[T], weight: &[T], dx: &mut [T]) {
    if g.is_depthwise() {
        return depthwise_data_grad(g, dy, weight, dx);
    }
    let (cin_g, cout_g, kl) = (g.cin_g(), g.cout_g(), g.patch_len());
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let rows = g.rows_per_chunk();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kl * rows * g.wo]
    };
    for n in 0..g.n {
        for grp in 0..g.spec.groups {
            let wg = MatRef::new(&weight[grp * cout_g * kl..][..cout_g * kl], cout_g, kl);
            let dyg = &dy[(n * g.cout + grp * cout_g) * out_plane..][..cout_g * out_plane];
            let dxg = &mut dx[(n * g.cin + grp * cin_g) * in_plane..][..cin_g * in_plane];
            if g.is_pointwise() {
                gemm(
                    T::one(),
                    wg.t(),
                    MatRef::new(dyg, cout_g, out_plane),
                    T::one(),
                    dxg,
                    in_plane,
                );
                continue;
            }
            let mut y0 = 0;
            while y0 < g.ho {
                let y1 = (y0 + rows).min(g.ho);
                let cols = (y1 - y0) * g.wo;
                let dy_chunk = MatRef {
                    data: &dyg[y0 * g.wo..],
                    rows: cout_g,
                    cols,
                    transposed: false,
                    ld: out_plane,
                };
                gemm(T::one(), wg.t(), dy_chunk, T::zero(), &mut col[..kl * cols], cols);
                col2im(g, &col[..kl * cols], y0, y1, dxg);
                y0 = y1;
            }
        }
    }
}

/// `dw += dy · im2col(x)ᵀ`: the weight gradient of a forward convolution.
pub(crate) fn conv_weight_grad<T: Element>(g: &Geometry, x: &[T], dy: &[T], dw: &mut [T]) {
    if g.is_depthwise() {
        return depthwise_weight_grad(g, x, dy, dw);
    }
    let (cin_g, cout_g, kl) = (g.cin_g(), g.cout_g(), g.patch_len());
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    let rows = g.rows_per_chunk();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kl * rows * g.wo]
    };
    for n in 0..g.n {
        for grp in 0..g.spec.groups {
            let xg = &x[(n * g.cin + grp * cin_g) * in_plane..][..cin_g * in_plane];
            let dyg = &dy[(n * g.cout + grp * cout_g) * out_plane..][..cout_g * out_plane];
            let dwg = &mut dw[grp * cout_g * kl..][..cout_g * kl];
            if g.is_pointwise() {
                gemm(
                    T::one(),
                    MatRef::new(dyg, cout_g, out_plane),
                    MatRef::new(xg, cin_g, in_plane).t(),
                    T::one(),
                    dwg,
                    kl,
                );
                continue;
            }
            let mut y0 = 0;
            while y0 < g.ho {
                let y1 = (y0 + rows).min(g.ho);
                let cols = (y1 - y0) * g.wo;
                im2col(g, xg, y0, y1, &mut col[..kl * cols]);
                let dy_chunk = MatRef {
                    data: &dyg[y0 * g.wo..],
                    rows: cout_g,
                    cols,
                    transposed: false,
                    ld: out_plane,
                };
                gemm(
                    T::one(),
                    dy_chunk,
                    MatRef::new(&col[..kl * cols], kl, cols).t(),
                    T::one(),
                    dwg,
                    kl,
                );
                y0 = y1;
            }
        }
    }
}

/// Visits every (output index, input index, tap) triple of a depthwise
/// convolution on one plane.
#[inline]
fn depthwise_taps(g: &Geometry, mut f: impl FnMut(usize, usize, usize)) {
    let ConvSpec {
        kernel: k,
        stride: s,
        padding: p,
        dilation: d,
        ..
    } = g.spec;
    for a in 0..k {
        for b in 0..k {
            let tap = a * k + b;
            for oy in 0..g.ho {
                let iy = (oy * s + a * d) as isize - p as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for ox in 0..g.wo {
                    let ix = (ox * s + b * d) as isize - p as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    f(oy * g.wo + ox, iy as usize * g.w + ix as usize, tap);
                }
            }
        }
    }
}

fn depthwise_forward<T: Element>(g: &Geometry, x: &[T], weight: &[T], y: &mut [T]) {
    let kk = g.spec.kernel * g.spec.kernel;
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    y.fill(T::zero());
    for n in 0..g.n {
        for c in 0..g.cin {
            let xp = &x[(n * g.cin + c) * ip..][..ip];
            let yp = &mut y[(n * g.cout + c) * op..][..op];
            let wc = &weight[c * kk..][..kk];
            depthwise_taps(g, |o, i, t| yp[o] += wc[t] * xp[i]);
        }
    }
}

fn depthwise_data_grad<T: Element>(g: &Geometry, dy: &[T], weight: &[T], dx: &mut [T]) {
    let kk = g.spec.kernel * g.spec.kernel;
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for c in 0..g.cin {
            let dyp = &dy[(n * g.cout + c) * op..][..op];
            let dxp = &mut dx[(n * g.cin + c) * ip..][..ip];
            let wc = &weight[c * kk..][..kk];
            depthwise_taps(g, |o, i, t| dxp[i] += wc[t] * dyp[o]);
        }
    }
}

fn depthwise_weight_grad<T: Element>(g: &Geometry, x: &[T], dy: &[T], dw: &mut [T]) {
    let kk = g.spec.kernel * g.spec.kernel;
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for c in 0..g.cin {
            let xp = &x[(n * g.cin + c) * ip..][..ip];
            let dyp = &dy[(n * g.cout + c) * op..][..op];
            let dwc = &mut dw[c * kk..][..kk];
            depthwise_taps(g, |o, i, t| dwc[t] += xp[i] * dyp[o]);
        }
    }
}

/// Adds `bias[c]` to every element of channel `c`.
pub(crate) fn add_channel_bias<T: Element>(y: &mut [T], bias: &[T], n: usize, plane: usize) {
    let c = bias.len();
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate() {
            for v in &mut y[(b * c + ch) * plane..][..plane] {
                *v += bv;
            }
        }
    }
}

/// Per-channel sums over batch and spatial axes.
pub(crate) fn channel_sums<T: Element>(y: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            *acc += y[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    out
}

/// Forward convolution of raw tensors. Used directly by tests and oracles;
/// differentiable code goes through [`super::ops::conv2d`].
pub fn conv2d_tensor<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::forward("conv2d", x.shape(), weight.shape(), spec)?;
    let mut y = vec![T::zero(); g.n * g.cout * g.ho * g.wo];
    conv_forward(&g, x.data(), weight.data(), &mut y);
    if let Some(b) = bias {
        check_bias("conv2d", b, g.cout)?;
        add_channel_bias(&mut y, b.data(), g.n, g.ho * g.wo);
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], y))
}

/// Transposed convolution of raw tensors; weight is `[c_in, c_out/groups, k, k]`.
pub fn transposed_conv2d_tensor<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::transposed("transposed_conv2d", x.shape(), weight.shape(), spec)?;
    let mut y = vec![T::zero(); g.n * g.cin * g.h * g.w];
    conv_data_grad(&g, x.data(), weight.data(), &mut y);
    if let Some(b) = bias {
        check_bias("transposed_conv2d", b, g.cin)?;
        add_channel_bias(&mut y, b.data(), g.n, g.h * g.w);
    }
    Ok(Tensor::from_parts(vec![g.n, g.cin, g.h, g.w], y))
}

pub(crate) fn check_bias<T: Element>(op: &'static str, b: &Tensor<T>, c: usize) -> Result<()> {
    if b.len() != c {
        return Err(Error::shape(
            op,
            format!("bias has {} elements, expected {c}", b.len()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the convolution sum, one output at a time.
    fn direct_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        spec: ConvSpec,
    ) -> Tensor<f64> {
        let (n, _, h, wd) = x.dims4().unwrap();
        let (cout, cin_g, k, _) = w.dims4().unwrap();
        let ho = spec.output_extent(h).unwrap();
        let wo = spec.output_extent(wd).unwrap();
        let cout_g = cout / spec.groups;
        let mut out = Tensor::zeros(vec![n, cout, ho, wo]);
        for b in 0..n {
            for o in 0..cout {
                let grp = o / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..cin_g {
                            for a in 0..k {
                                for bb in 0..k {
                                    let iy = (oy * spec.stride + a * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let ix = (ox * spec.stride + bb * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.at4(o, c, a, bb)
                                        * x.at4(b, grp * cin_g + c, iy as usize, ix as usize);
                                }
                            }
                        }
                        let idx = ((b * cout + o) * ho + oy) * wo + ox;
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let scale = b.max_abs().max(1.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn gemm_path_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (ConvSpec::new(3, 1, 1, 1), 2, 3, 7, 6),
            (ConvSpec::new(3, 1, 2, 2), 1, 1, 5, 5),
            (ConvSpec::new(7, 2, 3, 1), 3, 4, 9, 11),
            (ConvSpec::new(1, 1, 0, 1), 5, 3, 4, 4),
            (ConvSpec::new(2, 2, 0, 1), 2, 2, 6, 6),
            (ConvSpec::new(3, 1, 1, 1).with_groups(2), 4, 6, 5, 5),
            (ConvSpec::new(3, 1, 1, 1).with_groups(3), 3, 3, 6, 5),
            (ConvSpec::new(3, 2, 4, 4), 2, 2, 8, 8),
        ];
        for (spec, cin, cout, h, w) in cases {
            let x = Tensor::<f64>::randn(vec![2, cin, h, w], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(vec![cout, cin / spec.groups, spec.kernel, spec.kernel], 1.0, &mut rng);
            let got = conv2d_tensor(&x, &wt, None, spec).unwrap();
            assert_close(&got, &direct_conv(&x, &wt, spec), 1e-12);
        }
    }

    #[test]
    fn chunked_im2col_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Large enough that rows_per_chunk < ho.
        let spec = ConvSpec::new(3, 1, 1, 1);
        let x = Tensor::<f64>::randn(vec![1, 64, 40, 200], 1.0, &mut rng);
        let wt = Tensor::<f64>::randn(vec![2, 64, 3, 3], 1.0, &mut rng);
        let g = Geometry::forward("t", x.shape(), wt.shape(), spec).unwrap();
        assert!(g.rows_per_chunk() < g.ho);
        let got = conv2d_tensor(&x, &wt, None, spec).unwrap();
        assert_close(&got, &direct_conv(&x, &wt, spec), 1e-12);
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![2, 3, 7, 7]);
        let err = conv2d_tensor(&x, &w, None, ConvSpec::new(7, 1, 0, 1)).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let w = Tensor::<f32>::zeros(vec![4, 1, 3, 3]);
        let err = conv2d_tensor(&x, &w, None, ConvSpec::new(3, 1, 1, 1).with_groups(2)).unwrap_err();
        assert!(err.to_string().contains("groups"), "{err}");
    }

    #[test]
    fn extent_arithmetic() {
        assert_eq!(ConvSpec::new(2, 2, 0, 1).output_extent(512), Some(256));
        assert_eq!(ConvSpec::new(4, 2, 1, 1).transposed_extent(256), Some(512));
        assert_eq!(ConvSpec::new(7, 2, 3, 1).output_extent(512), Some(256));
    }
}
