//! Full network assembly: stem, `L` paths of {downsampling, encoder,
//! probability head, attention}, channel concatenation and decoder.
//!
//! Wiring per path `i`: `f_i = G_i(g_i)`, `m_i = F_i(f_i)`,
//! `f̃_i = A_i(f_i, m_i)`, and for `i < L` the next path input
//! `g_{i+1} = P_{i+1}(g_i, m_i)`. Both `g_i` and `m_i` are consumed twice.

mod config;
pub mod pooling;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Ablation, ModelConfig, PoolMode};

use crate::attention::{Damip, Damsca};
use crate::encoder::{Dpmg, FeatureEncoder};
use crate::error::{Error, Result};
use crate::nn::{context, Conv, Ctx, EntryKind, Grad, NetworkState, Norm};
use crate::tensor::kernels::ConvSpec;
use crate::tensor::ops;
use crate::tensor::{Element, Tensor, Var};

/// The supervised outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ProbabilityPyramid<T: Element = f32> {
    /// `m_1 … m_L` at `(H/2^i, W/2^i)`.
    pub maps: Vec<Var<T>>,
    /// Decoder output at `(H, W)`.
    pub out: Var<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Element = f32> {
    pub pyramid: ProbabilityPyramid<T>,
    pub f_dec: Var<T>,
}

/// Downsampling between paths.
#[derive(Clone, Debug)]
pub enum Downsample {
    Damip(Damip),
    /// Plain 2×2 pooling followed by a 1×1 convolution doubling channels.
    Pool { mode: PoolMode, conv: Conv },
}

impl Downsample {
    fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, g: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
        match self {
            Downsample::Damip(d) => d.forward(ctx, g, m),
            Downsample::Pool { mode, conv } => {
                let pooled = pooling::pool2(ctx, *mode, g)?;
                conv.forward(ctx, &pooled)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Path {
    pub index: usize,
    pub channels: usize,
    /// Produces this path's input from the previous path (absent for path 1).
    pub down: Option<Downsample>,
    pub encoder: FeatureEncoder,
    pub dpmg: Dpmg,
    /// `None` when spatial/channel attention is ablated.
    pub damsca: Option<Damsca>,
}

/// Transposed 4×4/s2/p1 convolution to `2C`, then three 3×3 convolutions
/// `2C → C → C/2 → 1` and a sigmoid. ReLU separates consecutive layers.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub in_channels: usize,
    pub base_channels: usize,
    convs: Vec<Conv>,
}

impl Decoder {
    const UP: ConvSpec = ConvSpec {
        kernel: 4,
        stride: 2,
        padding: 1,
        dilation: 1,
        groups: 1,
    };

    pub fn new(in_channels: usize, base_channels: usize) -> Self {
        let c = base_channels;
        let widths = [2 * c, c, c / 2, 1];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv::new(format!("decoder.conv{}", i + 1), w[0], w[1], ConvSpec::new(3, 1, 1, 1)).with_bias())
            .collect();
        Self {
            in_channels,
            base_channels,
            convs,
        }
    }

    fn up_weight_shape(&self) -> Vec<usize> {
        vec![self.in_channels, 2 * self.base_channels, 4, 4]
    }

    pub fn register<T: Element>(&self, state: &mut NetworkState<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        // Each output pixel of a stride-2 4×4 transposed conv sees 2×2 taps.
        let fan_in = self.in_channels * 4;
        let std = (2.0 / fan_in as f64).sqrt();
        state.insert("decoder.up.weight", EntryKind::Param, Tensor::randn(self.up_weight_shape(), std, rng))?;
        state.insert("decoder.up.bias", EntryKind::Param, Tensor::zeros(vec![2 * self.base_channels]))?;
        self.convs.iter().try_for_each(|c| c.register(state, rng))
    }

    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, f_dec: &Var<T>) -> Result<Var<T>> {
        let (_, c, _, _) = f_dec.value().dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(
                "decoder",
                format!("input has {c} channels, expected {}", self.in_channels),
            ));
        }
        let w = ctx.param("decoder.up.weight")?;
        let b = ctx.param("decoder.up.bias")?;
        let mut x = ops::transposed_conv2d(f_dec, &w, Some(&b), Self::UP).map_err(|e| context("decoder.up", e))?;
        for conv in &self.convs {
            x = conv.forward(ctx, &ops::relu(&x))?;
        }
        Ok(ops::sigmoid(&x))
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    stem_conv: Conv,
    stem_bn: Norm,
    pub paths: Vec<Path>,
    pub decoder: Decoder,
}

impl Network {
    /// Builds the network variant described by `config`, including its
    /// ablation substitutions.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let ab = config.ablation;
        let paths = (1..=config.paths)
            .map(|i| {
                let ci = config.path_channels(i);
                let down = (i > 1).then(|| {
                    let prefix = format!("path{i}.down");
                    let cin = config.path_channels(i - 1);
                    match ab.pool_mode {
                        PoolMode::Damip => Downsample::Damip(Damip::new(&prefix, cin)),
                        mode => Downsample::Pool {
                            mode,
                            conv: Conv::new(format!("{prefix}.conv"), cin, ci, ConvSpec::new(1, 1, 0, 1)).with_bias(),
                        },
                    }
                });
                Path {
                    index: i,
                    channels: ci,
                    down,
                    encoder: FeatureEncoder::new(
                        &format!("path{i}.encoder"),
                        i,
                        config.blocks_per_path,
                        config.dilation_constant,
                        ci,
                        ab.dilation_enabled,
                    ),
                    dpmg: Dpmg::new(&format!("path{i}.dpmg"), i, ci),
                    damsca: ab.damsca_enabled.then(|| Damsca::new(&format!("path{i}.damsca"), ci)),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            stem_conv: Conv::new("stem.conv", 3, c, ConvSpec::new(7, 2, 3, 1)),
            stem_bn: Norm::new("stem.bn", c),
            paths,
            decoder: Decoder::new(config.decoder_channels(), c),
        })
    }

    /// Freshly initialized parameters; deterministic in `seed`.
    pub fn init_state<T: Element>(&self, seed: u64) -> Result<NetworkState<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = NetworkState::new();
        self.stem_conv.register(&mut state, &mut rng)?;
        self.stem_bn.register(&mut state)?;
        for p in &self.paths {
            match &p.down {
                Some(Downsample::Damip(d)) => d.register(&mut state, &mut rng)?,
                Some(Downsample::Pool { conv, .. }) => conv.register(&mut state, &mut rng)?,
                None => {}
            }
            p.encoder.register(&mut state, &mut rng)?;
            p.dpmg.register(&mut state, &mut rng)?;
            if let Some(a) = &p.damsca {
                a.register(&mut state, &mut rng)?;
            }
        }
        self.decoder.register(&mut state, &mut rng)?;
        Ok(state)
    }

    /// 7×7/s2 convolution `3 → C`, batch norm and ReLU.
    pub fn stem<T: Element>(&self, ctx: &Ctx<'_, T>, image: &Var<T>) -> Result<Var<T>> {
        let (_, c, _, _) = image.value().dims4()?;
        if c != 3 {
            return Err(Error::shape("stem", format!("image has {c} channels, expected 3")));
        }
        let x = self.stem_conv.forward(ctx, image)?;
        Ok(ops::relu(&self.stem_bn.forward(ctx, &x)?))
    }

    /// Full forward pass over a batch `[N, 3, H, W]` whose extents are
    /// multiples of `2^L`.
    pub fn forward<T: Element>(&self, ctx: &Ctx<'_, T>, image: &Var<T>) -> Result<ForwardOutput<T>> {
        let (_, _, h, w) = image.value().dims4()?;
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                "network",
                format!("input {h}×{w} is not a multiple of 2^paths = {m}"),
            ));
        }
        let target = (h / 2, w / 2);
        let mut g = self.stem(ctx, image)?;
        ctx.record("g1", &g);
        let mut maps = Vec::with_capacity(self.paths.len());
        let mut attended = Vec::with_capacity(self.paths.len());
        let mut prev_map: Option<Var<T>> = None;
        for p in &self.paths {
            let tag = |e: Error| path_context(p.index, e);
            if let (Some(down), Some(m_prev)) = (&p.down, &prev_map) {
                g = down.forward(ctx, &g, m_prev).map_err(tag)?;
                ctx.record(format!("g{}", p.index), &g);
            }
            let f = p.encoder.forward(ctx, &g).map_err(tag)?;
            ctx.record(format!("f{}", p.index), &f);
            let m = p.dpmg.forward(ctx, &f).map_err(tag)?;
            ctx.record(format!("m{}", p.index), &m);
            let ft = match &p.damsca {
                Some(a) => a.forward(ctx, &f, &m, target),
                None => ops::bilinear_upsample(&f, target),
            }
            .map_err(tag)?;
            ctx.record(format!("f~{}", p.index), &ft);
            attended.push(ft);
            maps.push(m.clone());
            prev_map = Some(m);
        }
        let f_dec = ops::concat_channels(&attended)?;
        drop(attended);
        ctx.record("f_dec", &f_dec);
        let out = self.decoder.forward(ctx, &f_dec)?;
        ctx.record("m_out", &out);
        Ok(ForwardOutput {
            pyramid: ProbabilityPyramid { maps, out },
            f_dec,
        })
    }
}

impl Network {
    /// Shape of every named intermediate (`g_i`, `f_i`, `m_i`, `f~_i`,
    /// `f_dec`, `m_out`) for one eval-mode forward of a zero image at the
    /// configured input size, batch dimension dropped.
    pub fn shape_trace(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let (h, w) = self.config.input_size;
        let state = self.init_state::<f32>(0)?;
        let ctx = Ctx::new(&state, ops::Mode::Eval, Grad::Off).with_trace();
        self.forward(&ctx, &Var::constant(Tensor::zeros(vec![1, 3, h, w])))?;
        Ok(ctx.trace().into_iter().map(|(n, s)| (n, s[1..].to_vec())).collect())
    }
}

fn path_context(path: usize, err: Error) -> Error {
    match err {
        Error::Shape { op, detail } => Error::Shape {
            op,
            detail: format!("path {path}: {detail}"),
        },
        other => other,
    }
}

/// Zero-pads a batch on the bottom/right so both extents are multiples of
/// `multiple`; returns the padded batch and the original extents.
pub fn pad_to_multiple<T: Element>(x: &Tensor<T>, multiple: usize) -> Result<(Tensor<T>, (usize, usize))> {
    let (n, c, h, w) = x.dims4()?;
    let (ph, pw) = (h.next_multiple_of(multiple), w.next_multiple_of(multiple));
    if (ph, pw) == (h, w) {
        return Ok((x.clone(), (h, w)));
    }
    let mut out = Tensor::zeros(vec![n, c, ph, pw]);
    for p in 0..n * c {
        for y in 0..h {
            let src = &x.data()[(p * h + y) * w..][..w];
            out.data_mut()[(p * ph + y) * pw..][..w].copy_from_slice(src);
        }
    }
    Ok((out, (h, w)))
}

/// Top-left `h×w` crop of a batch.
pub fn crop<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, xh, xw) = x.dims4()?;
    if h > xh || w > xw || h == 0 || w == 0 {
        return Err(Error::shape("crop", format!("cannot crop {xh}×{xw} to {h}×{w}")));
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        for y in 0..h {
            data.extend_from_slice(&x.data()[(p * xh + y) * xw..][..w]);
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Grad;
    use crate::tensor::ops::Mode;

    fn tiny(c: usize, size: usize) -> ModelConfig {
        ModelConfig {
            base_channels: c,
            input_size: (size, size),
            ..ModelConfig::paper()
        }
    }

    fn run(cfg: &ModelConfig, seed: u64) -> (ForwardOutput<f32>, Vec<(String, Vec<usize>)>) {
        let net = Network::new(cfg).unwrap();
        let state = net.init_state::<f32>(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let (h, w) = cfg.input_size;
        let image = Var::constant(Tensor::uniform(vec![1, 3, h, w], 0.0, 1.0, &mut rng));
        let ctx = Ctx::new(&state, Mode::Train, Grad::Off).with_trace();
        let out = net.forward(&ctx, &image).unwrap();
        let trace = ctx.trace();
        (out, trace)
    }

    #[test]
    fn pyramid_extents_halve() {
        let (out, _) = run(&tiny(2, 128), 0);
        let shapes: Vec<_> = out.pyramid.maps.iter().map(|m| m.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 1, 64, 64], vec![1, 1, 32, 32], vec![1, 1, 16, 16], vec![1, 1, 8, 8]]);
        assert_eq!(out.pyramid.out.shape(), [1, 1, 128, 128]);
        assert_eq!(out.f_dec.shape(), [1, 30, 64, 64]);
    }

    #[test]
    fn stem_arithmetic() {
        let (_, trace) = run(&tiny(2, 32), 1);
        assert_eq!(trace[0], ("g1".to_string(), vec![1, 2, 16, 16]));
    }

    #[test]
    fn maps_match_feature_extents() {
        let (_, trace) = run(&tiny(4, 64), 2);
        let get = |n: &str| trace.iter().find(|(k, _)| k == n).unwrap().1.clone();
        for i in 1..=4 {
            let f = get(&format!("f{i}"));
            let m = get(&format!("m{i}"));
            assert_eq!(&f[2..], &m[2..]);
            assert_eq!(get(&format!("f~{i}"))[2..], [32, 32]);
        }
    }

    #[test]
    fn ablations_keep_shapes() {
        let full = run(&tiny(2, 32), 3).1;
        for v in Ablation::VARIANTS {
            let mut cfg = tiny(2, 32);
            cfg.ablation = Ablation::variant(v).unwrap();
            let (out, trace) = run(&cfg, 3);
            assert_eq!(trace, full, "{v}");
            assert!(out.pyramid.out.value().data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn deterministic_forward() {
        let (a, _) = run(&tiny(2, 32), 4);
        let (b, _) = run(&tiny(2, 32), 4);
        assert_eq!(a.pyramid.out.value(), b.pyramid.out.value());
        for (x, y) in a.pyramid.maps.iter().zip(&b.pyramid.maps) {
            assert_eq!(x.value(), y.value());
        }
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = tiny(2, 32);
        let net = Network::new(&cfg).unwrap();
        let state = net.init_state::<f32>(0).unwrap();
        let ctx = Ctx::new(&state, Mode::Eval, Grad::Off);
        let err = net.forward(&ctx, &Var::constant(Tensor::zeros(vec![1, 3, 24, 32]))).unwrap_err();
        assert!(err.to_string().contains("multiple"), "{err}");
        let err = net.forward(&ctx, &Var::constant(Tensor::zeros(vec![1, 1, 32, 32]))).unwrap_err();
        assert!(err.to_string().contains("3"), "{err}");
    }

    #[test]
    fn param_count_is_stable() {
        let cfg = tiny(4, 32);
        let net = Network::new(&cfg).unwrap();
        let a = net.init_state::<f32>(0).unwrap().param_count();
        let b = Network::new(&cfg).unwrap().init_state::<f32>(9).unwrap().param_count();
        assert_eq!(a, b);
        assert!(a > 0);
    }

    #[test]
    fn pad_and_crop() {
        let x = Tensor::<f32>::from_fn(vec![1, 2, 5, 7], |i| i as f32);
        let (p, (h, w)) = pad_to_multiple(&x, 4).unwrap();
        assert_eq!(p.shape(), [1, 2, 8, 8]);
        assert_eq!(crop(&p, h, w).unwrap(), x);
    }
}
