//! U-Net that maps a standardized single-channel image to `K` signal samples
//! per pixel.
//!
//! Each encoder level applies two 3x3 convolutions with ReLU and a 2x2
//! max-pool; the bottleneck repeats the convolution pair; each decoder level
//! upsamples (nearest neighbour), concatenates the matching encoder output
//! and applies two more convolutions. A final 1x1 convolution produces the
//! `K` output channels. Convolutions zero-pad, so spatial size is preserved.

mod gradcheck;
mod layers;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use gradcheck::{grad_check, GradCheckReport};
use layers::Conv;
pub use tensor::{SampleTensor, Tensor};

/// Relative size of the per-channel part of the head initialization.
pub const HEAD_SPREAD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub depth: usize,
    pub in_channels: usize,
    /// Number of predicted samples `K` (1 for direct-prediction networks).
    pub out_channels: usize,
    pub base_features: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

impl UNetConfig {
    /// Depth 3, 64 initial features, 800 samples.
    pub fn full_scale() -> Self {
        UNetConfig { depth: 3, in_channels: 1, out_channels: 800, base_features: 64, kernel_size: 3, seed: 0 }
    }

    /// Depth 3, 16 initial features, 100 samples: trainable on a CPU.
    pub fn desk_scale() -> Self {
        UNetConfig { out_channels: 100, base_features: 16, ..Self::full_scale() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.depth == 0 {
            return bad("depth must be >= 1");
        }
        if self.depth > 8 {
            return bad("depth must be <= 8");
        }
        if self.in_channels != 1 {
            return bad("only single-channel input is supported");
        }
        if self.out_channels == 0 || self.base_features == 0 {
            return bad("output channels and base features must be >= 1");
        }
        if self.kernel_size != 3 {
            return bad("kernel size must be 3");
        }
        Ok(())
    }

    /// Feature count at encoder level `level` (`depth` is the bottleneck).
    pub fn features(&self, level: usize) -> usize {
        self.base_features << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Largest distance, in input pixels along one axis, between an output
    /// pixel and any input pixel that can influence it.
    pub fn receptive_field_radius(&self) -> usize {
        receptive_field_radius(self.depth)
    }
}

/// Interval `[lo, hi]` of positions along one axis.
type Span = (i64, i64);

fn widen((lo, hi): Span, by: i64) -> Span {
    (lo - by, hi + by)
}

fn union(a: Span, b: Span) -> Span {
    (a.0.min(b.0), a.1.max(b.1))
}

/// Input span feeding encoder level `level` outputs `span`.
fn encoder_span(level: usize, span: Span) -> Span {
    let pre = widen(span, 2);
    if level == 0 {
        pre
    } else {
        encoder_span(level - 1, (2 * pre.0, 2 * pre.1 + 1))
    }
}

/// Input span feeding decoder level `level` outputs `span`.
fn decoder_span(level: usize, depth: usize, span: Span) -> Span {
    let pre = widen(span, 2);
    let coarse = (pre.0.div_euclid(2), pre.1.div_euclid(2));
    let deep = if level + 1 == depth { encoder_span(depth, coarse) } else { decoder_span(level + 1, depth, coarse) };
    union(encoder_span(level, pre), deep)
}

fn receptive_field_radius(depth: usize) -> usize {
    (0..1i64 << depth)
        .map(|p| {
            let (lo, hi) = decoder_span(0, depth, (p, p));
            (p - lo).max(hi - p) as usize
        })
        .max()
        .unwrap_or(0)
}

/// Network parameters plus the layer layout indexing into them.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    convs: Vec<Conv>,
    names: Vec<String>,
    params: Vec<T>,
}

pub type UNet32 = UNet<f32>;
pub type UNet64 = UNet<f64>;

/// Activations retained by [`UNet::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    shape: [usize; 4],
    items: Vec<ItemTape<T>>,
}

#[derive(Debug, Clone)]
struct ItemTape<T> {
    /// Input and output of every convolution, in layer order.
    conv_io: Vec<(Vec<T>, Vec<T>)>,
    /// Max-pool winners per encoder level.
    pool_arg: Vec<Vec<u32>>,
}

impl<T: Scalar> Tape<T> {
    /// Fingerprint of every ReLU on/off state and max-pool winner. Two
    /// forward passes with equal fingerprints ran through the same linear
    /// piece of the network.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for item in &self.items {
            for arg in &item.pool_arg {
                out.extend(arg.iter().map(|&a| a as u64));
            }
            for (_, y) in &item.conv_io {
                out.extend(y.chunks(64).map(|c| {
                    c.iter().enumerate().fold(0u64, |acc, (i, v)| acc | (((*v > T::zero()) as u64) << i))
                }));
            }
        }
        out
    }
}

/// Gradients returned by [`UNet::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// Same layout as [`UNet::params`].
    pub params: Vec<T>,
    pub input: Tensor<T>,
}

impl<T: Scalar> UNet<T> {
    /// He-initialized network (normal, std `sqrt(2 / fan_in)`), zero biases.
    pub fn new(config: UNetConfig) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let convs = net.convs.clone();
        let (head, body) = convs.split_last().expect("network has a head");
        for conv in body {
            let fan_in = (conv.cin * conv.k * conv.k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for w in &mut net.params[conv.weight..conv.weight + conv.weight_len()] {
                *w = T::of(normal.sample(&mut rng));
            }
        }
        // Head rows share one He-distributed vector plus a small per-channel
        // offset, so the predicted samples start clustered.
        let normal = Normal::new(0.0, (2.0 / head.cin as f64).sqrt()).expect("positive std");
        let shared: Vec<f64> = (0..head.cin).map(|_| normal.sample(&mut rng)).collect();
        let rows = net.params[head.weight..head.weight + head.weight_len()].chunks_exact_mut(head.cin);
        for row in rows {
            for (w, a) in row.iter_mut().zip(&shared) {
                *w = T::of(a + HEAD_SPREAD * normal.sample(&mut rng));
            }
        }
        Ok(net)
    }

    /// Network with all parameters zero.
    pub fn zeros(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut names = Vec::new();
        let mut offset = 0;
        let mut push = |cin: usize, cout: usize, k: usize, name: String| {
            let conv = Conv { cin, cout, k, weight: offset, bias: offset + cout * cin * k * k };
            offset += conv.param_len();
            convs.push(conv);
            names.push(name);
        };
        let k = config.kernel_size;
        let mut cin = config.in_channels;
        for level in 0..=config.depth {
            let f = config.features(level);
            let tag = if level == config.depth { "bottleneck".to_owned() } else { format!("enc{level}") };
            push(cin, f, k, format!("{tag}.conv0"));
            push(f, f, k, format!("{tag}.conv1"));
            cin = f;
        }
        for level in (0..config.depth).rev() {
            let f = config.features(level);
            push(config.features(level + 1) + f, f, k, format!("dec{level}.conv0"));
            push(f, f, k, format!("dec{level}.conv1"));
        }
        push(config.base_features, config.out_channels, 1, "head".to_owned());
        Ok(UNet { config, convs, names, params: vec![T::zero(); offset] })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// `(name, offset, length)` for every parameter block, e.g.
    /// `("enc0.conv1.weight", 160, 2304)`.
    pub fn parameter_blocks(&self) -> Vec<(String, usize, usize)> {
        self.convs
            .iter()
            .zip(&self.names)
            .flat_map(|(c, n)| [(format!("{n}.weight"), c.weight, c.weight_len()), (format!("{n}.bias"), c.bias, c.cout)])
            .collect()
    }

    /// Replaces the parameter vector; its length must match the layout.
    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Same network at another precision.
    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            config: self.config,
            convs: self.convs.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let [b, c, h, w] = input.shape();
        if b == 0 {
            return Err(Error::EmptyInput("forward needs a non-empty batch"));
        }
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!("expected {} input channel(s), got {c}", self.config.in_channels)));
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::ShapeMismatch(format!("spatial size {h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }

    /// `B x 1 x H x W` standardized input to `B x K x H x W` samples.
    pub fn forward(&self, input: &Tensor<T>) -> Result<SampleTensor<T>> {
        self.check_input(input)?;
        let [b, _, h, w] = input.shape();
        let outs: Vec<Vec<T>> = (0..b).into_par_iter().map(|i| self.forward_item(input.item(i), h, w, None)).collect();
        Tensor::new([b, self.config.out_channels, h, w], outs.concat())
    }

    /// Like [`forward`](Self::forward), also returning the activations that
    /// [`backward`](Self::backward) needs.
    pub fn forward_train(&self, input: &Tensor<T>) -> Result<(SampleTensor<T>, Tape<T>)> {
        self.check_input(input)?;
        let [b, _, h, w] = input.shape();
        let items: Vec<(Vec<T>, ItemTape<T>)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let mut tape = ItemTape { conv_io: Vec::with_capacity(self.convs.len()), pool_arg: Vec::new() };
                let out = self.forward_item(input.item(i), h, w, Some(&mut tape));
                (out, tape)
            })
            .collect();
        let mut data = Vec::with_capacity(b * self.config.out_channels * h * w);
        let mut tapes = Vec::with_capacity(b);
        for (o, t) in items {
            data.extend(o);
            tapes.push(t);
        }
        Ok((Tensor::new([b, self.config.out_channels, h, w], data)?, Tape { shape: input.shape(), items: tapes }))
    }

    fn forward_item(&self, input: &[T], h: usize, w: usize, mut tape: Option<&mut ItemTape<T>>) -> Vec<T> {
        let depth = self.config.depth;
        let mut scratch = Vec::new();
        let mut layer = 0;
        let mut run = |x: Vec<T>, hh: usize, ww: usize, relu: bool, tape: &mut Option<&mut ItemTape<T>>| {
            let y = layers::conv_forward(&self.convs[layer], &self.params, &x, hh, ww, relu, &mut scratch);
            layer += 1;
            if let Some(t) = tape.as_deref_mut() {
                t.conv_io.push((x, y.clone()));
            }
            y
        };
        let mut skips = Vec::with_capacity(depth);
        let mut cur = input.to_vec();
        let (mut hh, mut ww) = (h, w);
        for level in 0..depth {
            cur = run(cur, hh, ww, true, &mut tape);
            cur = run(cur, hh, ww, true, &mut tape);
            let (pooled, arg) = layers::max_pool(&cur, self.config.features(level), hh, ww);
            if let Some(t) = tape.as_deref_mut() {
                t.pool_arg.push(arg);
            }
            skips.push(std::mem::replace(&mut cur, pooled));
            hh /= 2;
            ww /= 2;
        }
        cur = run(cur, hh, ww, true, &mut tape);
        cur = run(cur, hh, ww, true, &mut tape);
        for level in (0..depth).rev() {
            let mut cat = layers::upsample(&cur, self.config.features(level + 1), hh, ww);
            hh *= 2;
            ww *= 2;
            cat.extend_from_slice(&skips[level]);
            cur = run(cat, hh, ww, true, &mut tape);
            cur = run(cur, hh, ww, true, &mut tape);
        }
        run(cur, hh, ww, false, &mut tape)
    }

    /// Gradients of `sum(upstream * output)` w.r.t. every parameter and the
    /// input, for the batch recorded in `tape`.
    pub fn backward(&self, tape: &Tape<T>, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        let [b, _, h, w] = tape.shape;
        if upstream.shape() != [b, self.config.out_channels, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?} does not match forward output {:?}",
                upstream.shape(),
                [b, self.config.out_channels, h, w]
            )));
        }
        if tape.items.iter().any(|t| t.conv_io.len() != self.convs.len()) {
            return Err(Error::ShapeMismatch("tape was recorded by a different network".into()));
        }
        let per_item: Vec<(Vec<T>, Vec<T>)> = (0..b)
            .into_par_iter()
            .map(|i| self.backward_item(&tape.items[i], upstream.item(i).to_vec(), h, w))
            .collect();
        let mut params = vec![T::zero(); self.params.len()];
        let mut input = Vec::with_capacity(b * h * w);
        // Fixed item order keeps the reduction bitwise reproducible.
        for (g, gi) in per_item {
            for (a, v) in params.iter_mut().zip(g) {
                *a = *a + v;
            }
            input.extend(gi);
        }
        Ok(Gradients { params, input: Tensor::new(tape.shape, input)? })
    }

    fn backward_item(&self, tape: &ItemTape<T>, grad_out: Vec<T>, h: usize, w: usize) -> (Vec<T>, Vec<T>) {
        let depth = self.config.depth;
        let mut grads = vec![T::zero(); self.params.len()];
        let mut scratch = Vec::new();
        let mut layer = self.convs.len();
        let mut back = |g: Vec<T>, hh: usize, ww: usize, relu: bool, grads: &mut Vec<T>| {
            layer -= 1;
            let (x, y) = &tape.conv_io[layer];
            layers::conv_backward(&self.convs[layer], &self.params, x, y, g, hh, ww, relu, grads, &mut scratch)
        };
        let mut g = back(grad_out, h, w, false, &mut grads);
        let (mut hh, mut ww) = (h, w);
        let mut skip_grads = vec![Vec::new(); depth];
        for level in 0..depth {
            g = back(g, hh, ww, true, &mut grads);
            let g_cat = back(g, hh, ww, true, &mut grads);
            let up_len = self.config.features(level + 1) * hh * ww;
            skip_grads[level] = g_cat[up_len..].to_vec();
            hh /= 2;
            ww /= 2;
            g = layers::upsample_backward(&g_cat[..up_len], self.config.features(level + 1), hh, ww);
        }
        g = back(g, hh, ww, true, &mut grads);
        g = back(g, hh, ww, true, &mut grads);
        for level in (0..depth).rev() {
            hh *= 2;
            ww *= 2;
            let mut g_level = std::mem::take(&mut skip_grads[level]);
            layers::max_pool_backward(&g, &tape.pool_arg[level], &mut g_level);
            g = back(g_level, hh, ww, true, &mut grads);
            g = back(g, hh, ww, true, &mut grads);
        }
        (grads, g)
    }
}
