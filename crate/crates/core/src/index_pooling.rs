//! Lossless index pooling.
//!
//! Index pooling with a `k×k` window splits every window into `k²` slices,
//! slice `q` holding the window cell `(q / k, q % k)`. It equals a stride-`k`
//! convolution with `k²` one-hot kernels but is computed as a pure
//! rearrangement (space-to-depth). Slices are laid out slice-major: after
//! flattening `[k², C, h, w]` to `[k²·C, h, w]`, slice `q` occupies channels
//! `q·C .. (q+1)·C`.

use crate::error::{Error, Result};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::ops::conv2d;
use crate::tensor::{Element, Tensor, Var};

/// The `k²` one-hot `k×k` kernels in raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexKernelSet {
    pub k: usize,
    /// Kernel `q` is a row-major `k×k` mask with a single one at `(q / k, q % k)`.
    pub kernels: Vec<Vec<u8>>,
}

impl IndexKernelSet {
    /// Position of the one in kernel `q`.
    pub fn one_position(&self, q: usize) -> (usize, usize) {
        (q / self.k, q % self.k)
    }

    /// Grouped-convolution weight `[k²·c, 1, k, k]` that reproduces index
    /// pooling of a `c`-channel map in the canonical slice-major layout when
    /// applied to the input repeated `k²` times along channels.
    pub fn conv_weight<T: Element>(&self, channels: usize) -> Tensor<T> {
        let kk = self.k * self.k;
        let mut data = Vec::with_capacity(kk * channels * kk);
        for kernel in &self.kernels {
            for _ in 0..channels {
                data.extend(kernel.iter().map(|&b| T::of(b as f64)));
            }
        }
        Tensor::from_parts(vec![kk * channels, 1, self.k, self.k], data)
    }
}

pub fn make_index_kernels(k: usize) -> Result<IndexKernelSet> {
    if k == 0 {
        return Err(Error::invalid("make_index_kernels", "window size must be at least 1"));
    }
    let kernels = (0..k * k)
        .map(|q| {
            let mut mask = vec![0u8; k * k];
            mask[q] = 1;
            mask
        })
        .collect();
    Ok(IndexKernelSet { k, kernels })
}

/// Padding rule for [`pooled_dims`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `p` zeros on each side.
    Symmetric(usize),
    /// Total padding `k·⌈n/k⌉ − n` per axis, giving `⌈n/k⌉` outputs at stride `k`.
    Ceil,
}

/// Output extents of a `k×k` window sliding at stride `s` with dilation `r`:
/// `⌊(n + 2p − r(k − 1) − 1) / s + 1⌋` per axis.
pub fn pooled_dims(
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    padding: Padding,
    r: usize,
) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || k == 0 || s == 0 || r == 0 {
        return Err(Error::invalid(
            "pooled_dims",
            format!("extents, window, stride and dilation must be positive (h={h}, w={w}, k={k}, s={s}, r={r})"),
        ));
    }
    let axis = |n: usize, name: &str| -> Result<usize> {
        let total_pad = match padding {
            Padding::Symmetric(p) => 2 * p,
            Padding::Ceil => k * n.div_ceil(k) - n,
        };
        let span = r * (k - 1) + 1;
        let padded = n + total_pad;
        if padded < span {
            return Err(Error::invalid(
                "pooled_dims",
                format!("{name} {n} is smaller than the dilated window {span}"),
            ));
        }
        Ok((padded - span) / s + 1)
    };
    Ok((axis(h, "height")?, axis(w, "width")?))
}

fn check_divisible(op: &'static str, h: usize, w: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid(op, "window size must be at least 1"));
    }
    if h % k != 0 {
        return Err(Error::shape(op, format!("height {h} is not divisible by {k}")));
    }
    if w % k != 0 {
        return Err(Error::shape(op, format!("width {w} is not divisible by {k}")));
    }
    Ok(())
}

/// Space-to-depth on raw data: `[n, c, h, w]` → `[n, k²·c, h/k, w/k]`.
fn pool_raw<T: Element>(x: &[T], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for q in 0..k * k {
            let (dy, dx) = (q / k, q % k);
            for ch in 0..c {
                let src = &x[(b * c + ch) * h * w..][..h * w];
                let dst = &mut out[((b * k * k + q) * c + ch) * ho * wo..][..ho * wo];
                for y in 0..ho {
                    let row = &src[(y * k + dy) * w..][..w];
                    let drow = &mut dst[y * wo..(y + 1) * wo];
                    for (xo, v) in drow.iter_mut().enumerate() {
                        *v = row[xo * k + dx];
                    }
                }
            }
        }
    }
    out
}

/// Depth-to-space on raw data, the exact inverse of [`pool_raw`].
fn unpool_raw<T: Element>(y: &[T], n: usize, c: usize, ho: usize, wo: usize, k: usize) -> Vec<T> {
    let (h, w) = (ho * k, wo * k);
    let mut out = vec![T::zero(); y.len()];
    for b in 0..n {
        for q in 0..k * k {
            let (dy, dx) = (q / k, q % k);
            for ch in 0..c {
                let src = &y[((b * k * k + q) * c + ch) * ho * wo..][..ho * wo];
                let dst = &mut out[(b * c + ch) * h * w..][..h * w];
                for yy in 0..ho {
                    let srow = &src[yy * wo..(yy + 1) * wo];
                    let row = &mut dst[(yy * k + dy) * w..][..w];
                    for (xo, &v) in srow.iter().enumerate() {
                        row[xo * k + dx] = v;
                    }
                }
            }
        }
    }
    out
}

/// Index pooling of a tensor.
///
/// A rank-3 input `[C, H, W]` yields the slice view `[k², C, H/k, W/k]`;
/// a rank-4 batch `[N, C, H, W]` yields the flattened `[N, k²·C, H/k, W/k]`.
/// Both share the same memory layout per image.
pub fn index_pool<T: Element>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w, batched) = match *x.shape() {
        [c, h, w] => (1, c, h, w, false),
        [n, c, h, w] => (n, c, h, w, true),
        _ => {
            return Err(Error::shape(
                "index_pool",
                format!("expected [C, H, W] or [N, C, H, W], got {:?}", x.shape()),
            ))
        }
    };
    check_divisible("index_pool", h, w, k)?;
    let data = pool_raw(x.data(), n, c, h, w, k);
    let shape = if batched {
        vec![n, k * k * c, h / k, w / k]
    } else {
        vec![k * k, c, h / k, w / k]
    };
    Ok(Tensor::from_parts(shape, data))
}

/// Exact inverse of [`index_pool`] for either layout.
///
/// A rank-4 input whose leading extent is `k²` is read as the slice view
/// `[k², C, h, w]` and yields `[C, h·k, w·k]`; pass `batched = true` to
/// read `[N, k²·C, h, w]` instead.
pub fn index_unpool<T: Element>(y: &Tensor<T>, k: usize, batched: bool) -> Result<Tensor<T>> {
    let [a, b, ho, wo] = match *y.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(Error::shape(
                "index_unpool",
                format!("expected a rank-4 tensor, got {:?}", y.shape()),
            ))
        }
    };
    if k == 0 {
        return Err(Error::invalid("index_unpool", "window size must be at least 1"));
    }
    let kk = k * k;
    if batched {
        if b % kk != 0 {
            return Err(Error::shape(
                "index_unpool",
                format!("channel extent {b} is not a multiple of k² = {kk}"),
            ));
        }
        let c = b / kk;
        let data = unpool_raw(y.data(), a, c, ho, wo, k);
        Ok(Tensor::from_parts(vec![a, c, ho * k, wo * k], data))
    } else {
        if a != kk {
            return Err(Error::shape(
                "index_unpool",
                format!("leading extent {a} != k² = {kk}"),
            ));
        }
        let data = unpool_raw(y.data(), 1, b, ho, wo, k);
        Ok(Tensor::from_parts(vec![b, ho * k, wo * k], data))
    }
}

struct IndexPool {
    k: usize,
}

impl<T: Element> crate::tensor::BackwardOp<T> for IndexPool {
    fn name(&self) -> &'static str {
        "index_pool"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(index_unpool(grad, self.k, true)?)])
    }
}

/// Differentiable index pooling of a batch `[N, C, H, W]` →
/// `[N, k²·C, H/k, W/k]`.
pub fn index_pool_var<T: Element>(x: &Var<T>, k: usize) -> Result<Var<T>> {
    x.value().dims4()?;
    let value = index_pool(x.value(), k)?;
    Ok(Var::from_op(value, &[x], IndexPool { k }))
}

/// Depthwise 3×3 convolution (stride 1, padding 1, one filter per channel)
/// over `y` `[N, C, h, w]` with `weight` `[C, 1, 3, 3]`.
pub fn depthwise_mix<T: Element>(y: &Var<T>, weight: &Var<T>) -> Result<Var<T>> {
    let (_, c, _, _) = y.value().dims4()?;
    if weight.shape() != [c, 1, 3, 3] {
        return Err(Error::shape(
            "depthwise_mix",
            format!("weight {:?} must be [{c}, 1, 3, 3]", weight.shape()),
        ));
    }
    conv2d(y, weight, None, ConvSpec::new(3, 1, 1, 1).with_groups(c))
}

/// Centered-delta depthwise weight: [`depthwise_mix`] with it is the identity.
pub fn delta_weight<T: Element>(channels: usize) -> Tensor<T> {
    Tensor::from_fn(vec![channels, 1, 3, 3], |i| {
        if i % 9 == 4 {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::conv2d_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernels_in_raster_order() {
        let set = make_index_kernels(2).unwrap();
        let ones: Vec<_> = (0..4).map(|q| set.one_position(q)).collect();
        assert_eq!(ones, [(0, 0), (0, 1), (1, 0), (1, 1)]);
        for (q, kernel) in set.kernels.iter().enumerate() {
            assert_eq!(kernel.iter().map(|&v| v as u32).sum::<u32>(), 1);
            let (a, b) = set.one_position(q);
            assert_eq!(kernel[a * 2 + b], 1);
        }
        let single = make_index_kernels(1).unwrap();
        assert_eq!(single.kernels, vec![vec![1u8]]);
        assert!(make_index_kernels(0).is_err());
    }

    #[test]
    fn kernel_positions_cover_window() {
        for k in 1..6 {
            let set = make_index_kernels(k).unwrap();
            let mut seen = vec![false; k * k];
            for kernel in &set.kernels {
                let pos = kernel.iter().position(|&v| v == 1).unwrap();
                assert!(!seen[pos]);
                seen[pos] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn dims_formulas() {
        assert_eq!(pooled_dims(512, 512, 2, 2, Padding::Symmetric(0), 1).unwrap(), (256, 256));
        assert_eq!(pooled_dims(5, 5, 2, 2, Padding::Ceil, 1).unwrap(), (3, 3));
        assert_eq!(pooled_dims(7, 9, 1, 1, Padding::Symmetric(0), 1).unwrap(), (7, 9));
        assert_eq!(pooled_dims(5, 5, 2, 2, Padding::Symmetric(0), 1).unwrap(), (2, 2));
        assert!(pooled_dims(1, 5, 3, 1, Padding::Symmetric(0), 1).is_err());
        assert!(pooled_dims(0, 5, 2, 2, Padding::Symmetric(0), 1).is_err());
    }

    #[test]
    fn two_by_two_example() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = index_pool(&x, 2).unwrap();
        assert_eq!(y.shape(), [4, 1, 1, 1]);
        assert_eq!(y.data(), [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn indivisible_extent_names_axis() {
        let x = Tensor::<f32>::zeros(vec![1, 4, 5]);
        let err = index_pool(&x, 2).unwrap_err().to_string();
        assert!(err.contains("width 5"), "{err}");
        let x = Tensor::<f32>::zeros(vec![1, 3, 4]);
        let err = index_pool(&x, 2).unwrap_err().to_string();
        assert!(err.contains("height 3"), "{err}");
    }

    #[test]
    fn unpool_rejects_wrong_leading_extent() {
        let y = Tensor::<f32>::zeros(vec![3, 1, 2, 2]);
        assert!(index_unpool(&y, 2, false).is_err());
        let y = Tensor::<f32>::zeros(vec![1, 6, 2, 2]);
        assert!(index_unpool(&y, 2, true).is_err());
    }

    #[test]
    fn round_trip_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(vec![2, 4, 4], 1.0, &mut rng);
        let back = index_unpool(&index_pool(&x, 2).unwrap(), 2, false).unwrap();
        assert_eq!(back, x);
        let id = index_pool(&x, 1).unwrap();
        assert_eq!(id.data(), x.data());
    }

    #[test]
    fn matches_one_hot_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, k) = (3, 2);
        let x = Tensor::<f32>::randn(vec![1, c, 8, 8], 1.0, &mut rng);
        // Repeat the input k² times along channels, then apply the grouped
        // one-hot kernels at stride k.
        let mut rep = Vec::new();
        for _ in 0..k * k {
            rep.extend_from_slice(x.data());
        }
        let rep = Tensor::new(vec![1, k * k * c, 8, 8], rep).unwrap();
        let set = make_index_kernels(k).unwrap();
        let spec = ConvSpec::new(k, k, 0, 1).with_groups(k * k * c);
        let oracle = conv2d_tensor(&rep, &set.conv_weight::<f32>(c), None, spec).unwrap();
        assert_eq!(index_pool(&x, k).unwrap(), oracle);
    }

    #[test]
    fn delta_mix_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = Var::constant(Tensor::<f32>::randn(vec![2, 8, 5, 5], 1.0, &mut rng));
        let w = Var::constant(delta_weight::<f32>(8));
        let out = depthwise_mix(&y, &w).unwrap();
        assert_eq!(out.value(), y.value());
    }

    #[test]
    fn depthwise_mix_keeps_channels_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = Tensor::<f64>::randn(vec![1, 4, 6, 6], 1.0, &mut rng);
        let w = Var::constant(Tensor::<f64>::randn(vec![4, 1, 3, 3], 1.0, &mut rng));
        let before = depthwise_mix(&Var::constant(base.clone()), &w).unwrap();
        let mut bumped = base.clone();
        // Perturb channel 2 only.
        for v in &mut bumped.data_mut()[2 * 36..3 * 36] {
            *v += 1.0;
        }
        let after = depthwise_mix(&Var::constant(bumped), &w).unwrap();
        for c in 0..4 {
            let a = &before.value().data()[c * 36..(c + 1) * 36];
            let b = &after.value().data()[c * 36..(c + 1) * 36];
            assert_eq!(a != b, c == 2, "channel {c}");
        }
    }

    #[test]
    fn depthwise_mix_matches_grouped_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c, h, w) = (3, 5, 4);
        let x = Tensor::<f64>::randn(vec![1, c, h, w], 1.0, &mut rng);
        let wt = Tensor::<f64>::randn(vec![c, 1, 3, 3], 1.0, &mut rng);
        let got = depthwise_mix(&Var::constant(x.clone()), &Var::constant(wt.clone())).unwrap();
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            let (iy, ix) = (y as isize + a as isize - 1, xx as isize + b as isize - 1);
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                acc += wt.at4(ch, 0, a, b) * x.at4(0, ch, iy as usize, ix as usize);
                            }
                        }
                    }
                    let v = got.value().at4(0, ch, y, xx);
                    assert!((v - acc).abs() <= 1e-6 * acc.abs().max(1.0));
                }
            }
        }
    }
}
