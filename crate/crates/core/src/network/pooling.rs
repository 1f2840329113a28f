//! 2×2 pooling substitutes used when attention-guided index pooling is
//! ablated away.

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::ops::Mode;
use crate::tensor::{BackwardOp, Element, Tensor, Var};

use super::config::PoolMode;

const K: usize = 2;

fn check_input<T: Element>(op: &'static str, x: &Var<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.value().dims4()?;
    if h % K != 0 || w % K != 0 {
        return Err(Error::shape(op, format!("extents {h}×{w} are not divisible by {K}")));
    }
    Ok((n, c, h, w))
}

/// Flat input indices of the window feeding output `(plane, oy, ox)`.
#[inline]
fn window(plane_off: usize, w: usize, oy: usize, ox: usize) -> [usize; 4] {
    let base = plane_off + oy * K * w + ox * K;
    [base, base + 1, base + w, base + w + 1]
}

/// Pools each 2×2 window to one value; `pick` returns the output and, per
/// cell, the derivative of the output with respect to that cell.
fn pool_with<T: Element>(
    x: &Tensor<T>,
    mut pick: impl FnMut([T; 4]) -> (T, [T; 4]),
) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4().expect("checked rank");
    let (ho, wo) = (h / K, w / K);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut partials = Vec::with_capacity(n * c * ho * wo * 4);
    let xd = x.data();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let idx = window(p * h * w, w, oy, ox);
                let (v, d) = pick(idx.map(|i| xd[i]));
                out.push(v);
                partials.extend_from_slice(&d);
            }
        }
    }
    (Tensor::from_parts(vec![n, c, ho, wo], out), partials)
}

/// Backward shared by every window pooling: scatter `grad · ∂out/∂cell`.
struct WindowPool<T> {
    name: &'static str,
    partials: Vec<T>,
}

impl<T: Element> BackwardOp<T> for WindowPool<T> {
    fn name(&self) -> &'static str {
        self.name
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
        let (ho, wo) = (h / K, w / K);
        let mut dx = vec![T::zero(); x.len()];
        let gd = grad.data();
        let mut o = 0;
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = gd[o];
                    for (cell, &i) in window(p * h * w, w, oy, ox).iter().enumerate() {
                        dx[i] += g * self.partials[o * 4 + cell];
                    }
                    o += 1;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))])
    }
}

/// 2×2 max pooling; ties route the gradient to the first cell in raster order.
pub fn max_pool2<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    check_input("max_pool2", x)?;
    let (value, partials) = pool_with(x.value(), |cells| {
        let mut best = 0;
        for i in 1..4 {
            if cells[i] > cells[best] {
                best = i;
            }
        }
        let mut d = [T::zero(); 4];
        d[best] = T::one();
        (cells[best], d)
    });
    Ok(Var::from_op(value, &[x], WindowPool { name: "max_pool2", partials }))
}

pub fn avg_pool2<T: Element>(x: &Var<T>) -> Result<Var<T>> {
    check_input("avg_pool2", x)?;
    let quarter = T::of(0.25);
    let (value, partials) = pool_with(x.value(), |cells| {
        let s = cells[0] + cells[1] + cells[2] + cells[3];
        (s * quarter, [quarter; 4])
    });
    Ok(Var::from_op(value, &[x], WindowPool { name: "avg_pool2", partials }))
}

/// Stochastic 2×2 pooling over the rectified activations `a⁺`.
///
/// Train mode samples one cell with probability `a⁺ᵢ / Σa⁺` and passes its
/// value through. Eval mode returns the expectation `Σ (a⁺ᵢ)² / Σa⁺`.
/// Windows with no positive activation yield zero.
pub fn stochastic_pool2<T: Element>(x: &Var<T>, mode: Mode, mut uniform: impl FnMut() -> f64) -> Result<Var<T>> {
    check_input("stochastic_pool2", x)?;
    let (value, partials) = pool_with(x.value(), |cells| {
        let pos = cells.map(|v| v.max(T::zero()));
        let s = pos[0] + pos[1] + pos[2] + pos[3];
        let mut d = [T::zero(); 4];
        if s <= T::zero() {
            return (T::zero(), d);
        }
        match mode {
            Mode::Train => {
                let target = T::of(uniform()) * s;
                let mut acc = T::zero();
                let mut chosen = 3;
                for (i, &p) in pos.iter().enumerate() {
                    acc += p;
                    if p > T::zero() && target < acc {
                        chosen = i;
                        break;
                    }
                }
                // Rounding can leave the last positive cell unmatched.
                while pos[chosen] <= T::zero() {
                    chosen -= 1;
                }
                d[chosen] = T::one();
                (pos[chosen], d)
            }
            Mode::Eval => {
                let q = pos.iter().map(|&p| p * p).sum::<T>();
                for i in 0..4 {
                    if pos[i] > T::zero() {
                        d[i] = (T::of(2.0) * pos[i] * s - q) / (s * s);
                    }
                }
                (q / s, d)
            }
        }
    });
    Ok(Var::from_op(value, &[x], WindowPool { name: "stochastic_pool2", partials }))
}

/// Applies the pooling selected by `mode` (which must not be `Damip`).
pub fn pool2<T: Element>(ctx: &Ctx<'_, T>, mode: PoolMode, x: &Var<T>) -> Result<Var<T>> {
    match mode {
        PoolMode::MaxPool => max_pool2(x),
        PoolMode::AvgPool => avg_pool2(x),
        PoolMode::Stochastic => stochastic_pool2(x, ctx.mode(), || ctx.sample_unit()),
        PoolMode::Damip => Err(Error::invalid("pool2", "index pooling is not a plain window pool")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index_pooling::index_pool;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn max_and_avg_agree_with_index_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::randn(vec![2, 3, 6, 8], 1.0, &mut rng);
        let slices = index_pool(&x, 2).unwrap();
        let v = Var::constant(x);
        let mx = max_pool2(&v).unwrap();
        let av = avg_pool2(&v).unwrap();
        let (n, c, h, w) = (2, 3, 3, 4);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let cells: Vec<f32> = (0..4).map(|q| slices.at4(b, q * c + ch, y, xx)).collect();
                        let m = cells.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        assert_eq!(mx.value().at4(b, ch, y, xx), m);
                        let mean = (cells[0] + cells[1] + cells[2] + cells[3]) * 0.25;
                        assert_eq!(av.value().at4(b, ch, y, xx), mean);
                    }
                }
            }
        }
    }

    #[test]
    fn stochastic_train_picks_positive_cells() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![-1.0f64, 0.0, 3.0, 1.0]).unwrap();
        let v = Var::constant(x);
        let mut draws = [0.0, 0.5, 0.74, 0.76, 0.999].into_iter();
        for expect in [3.0, 3.0, 3.0, 1.0, 1.0] {
            let y = stochastic_pool2(&v, Mode::Train, || draws.next().unwrap()).unwrap();
            assert_eq!(y.value().data()[0], expect);
        }
        let e = stochastic_pool2(&v, Mode::Eval, || unreachable!()).unwrap();
        assert!((e.value().data()[0] - 10.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn stochastic_all_negative_window_is_zero() {
        let v = Var::constant(Tensor::new(vec![1, 1, 2, 2], vec![-1.0f32, -2.0, -3.0, 0.0]).unwrap());
        let y = stochastic_pool2(&v, Mode::Train, || 0.3).unwrap();
        assert_eq!(y.value().data()[0], 0.0);
    }

    #[test]
    fn rejects_odd_extent() {
        let v = Var::constant(Tensor::<f32>::zeros(vec![1, 1, 3, 4]));
        assert!(max_pool2(&v).is_err());
    }
}
