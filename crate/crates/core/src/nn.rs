//! Layers and networks with hand-written reverse mode.
//!
//! A network is a body of layers producing the final feature maps, followed by
//! global average pooling and a linear classifier head. Every BatchNorm layer
//! reports the batch statistics of its input on each forward pass, in either
//! mode, so losses on those statistics can be backpropagated.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update running statistics.
    Train,
    /// Normalize with running statistics; batch statistics are still captured.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    #[serde(skip)]
    slot: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    #[serde(skip)]
    slot: usize,
    #[serde(skip)]
    index: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `out_features x in_features`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    #[serde(skip)]
    slot: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu,
    AvgPool2,
    /// `relu(main(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual { main: Vec<Layer<T>>, shortcut: Vec<Layer<T>> },
}

/// Body plus classifier head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network<T> {
    pub body: Vec<Layer<T>>,
    pub head: Linear<T>,
    pub input_shape: [usize; 3],
    #[serde(skip)]
    num_slots: usize,
    #[serde(skip)]
    num_bn: usize,
}

/// Batch statistics of one BatchNorm layer's input.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Cache<T> {
    Conv { input: Tensor<T> },
    BatchNorm { input: Tensor<T>, mean: Vec<T>, inv_std: Vec<T>, mode: Mode },
    Relu { output: Tensor<T> },
    AvgPool2 { in_shape: Vec<usize> },
    Residual { main: Vec<Cache<T>>, shortcut: Vec<Cache<T>>, output: Tensor<T> },
}

/// Everything a forward pass produces, plus what backward needs.
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    pub features: Tensor<T>,
    pub bn_stats: Vec<BnBatchStats<T>>,
    pooled: Tensor<T>,
    caches: Vec<Cache<T>>,
    pub mode: Mode,
}

/// Upstream gradients entering the backward pass.
pub struct TraceGrad<T> {
    pub logits: Tensor<T>,
    /// Per BatchNorm layer, gradient w.r.t. (batch mean, batch var).
    pub bn_stats: Vec<Option<(Vec<T>, Vec<T>)>>,
}

pub struct Backward<T> {
    pub input: Option<Tensor<T>>,
    pub params: Option<Vec<Vec<T>>>,
}

fn kaiming<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| T::lit(normal.sample(rng))).collect()
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: kaiming(rng, out_channels * fan_in, fan_in),
            bias: bias.then(|| vec![T::zero(); out_channels]),
            slot: 0,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = dims4(x);
        debug_assert_eq!(c, self.in_channels);
        let (ho, wo) = self.out_hw(h, w);
        let kk = c * self.kernel * self.kernel;
        let mut col = vec![T::zero(); kk * ho * wo];
        let mut out = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        for i in 0..n {
            self.im2col(x.item(i), h, w, &mut col);
            let y = out.item_mut(i);
            T::gemm(self.out_channels, kk, ho * wo, T::one(), &self.weight, false, &col, false, T::zero(), y);
            if let Some(b) = &self.bias {
                for (o, &bv) in b.iter().enumerate() {
                    y[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    fn backward(
        &self,
        input: &Tensor<T>,
        dy: &Tensor<T>,
        grads: Option<&mut [Vec<T>]>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let [n, c, h, w] = dims4(input);
        let (ho, wo) = self.out_hw(h, w);
        let kk = c * self.kernel * self.kernel;
        let mut col = vec![T::zero(); kk * ho * wo];
        let mut dcol = vec![T::zero(); kk * ho * wo];
        let mut dx = need_dx.then(|| Tensor::zeros(input.shape()));
        let mut grads = grads;
        for i in 0..n {
            let dyi = dy.item(i);
            if let Some(g) = grads.as_deref_mut() {
                self.im2col(input.item(i), h, w, &mut col);
                T::gemm(self.out_channels, ho * wo, kk, T::one(), dyi, false, &col, true, T::one(), &mut g[self.slot]);
                if self.bias.is_some() {
                    let gb = &mut g[self.slot + 1];
                    for o in 0..self.out_channels {
                        gb[o] += dyi[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(kk, self.out_channels, ho * wo, T::one(), &self.weight, true, dyi, false, T::zero(), &mut dcol);
                self.col2im(&dcol, h, w, dx.item_mut(i));
            }
        }
        dx
    }
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            slot: 0,
            index: 0,
        }
    }

    /// Exponential moving update with the unbiased batch variance.
    fn update_running(&mut self, stats: &BnBatchStats<T>, count: usize) {
        let unbias = if count > 1 { T::lit(count as f64 / (count as f64 - 1.0)) } else { T::one() };
        let mom = T::lit(self.momentum);
        for ch in 0..self.channels {
            self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * stats.mean[ch];
            self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * stats.var[ch] * unbias;
        }
    }

    fn batch_stats(x: &Tensor<T>) -> BnBatchStats<T> {
        let [n, c, h, w] = dims4(x);
        let m = T::lit((n * h * w) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                s += x.item(i)[ch * h * w..(ch + 1) * h * w].iter().copied().sum::<T>();
            }
            let mu = s / m;
            let mut v = T::zero();
            for i in 0..n {
                for &a in &x.item(i)[ch * h * w..(ch + 1) * h * w] {
                    v += (a - mu) * (a - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = v / m;
        }
        BnBatchStats { mean, var }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, BnBatchStats<T>, Vec<T>, Vec<T>) {
        let [n, c, h, w] = dims4(x);
        let stats = Self::batch_stats(x);
        let eps = T::lit(self.eps);
        let (mean, var) = match mode {
            Mode::Train => (stats.mean.clone(), stats.var.clone()),
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            let xi = x.item(i);
            let yi = out.item_mut(i);
            for ch in 0..c {
                let (g, b, mu, is) = (self.gamma[ch], self.beta[ch], mean[ch], inv_std[ch]);
                for p in ch * h * w..(ch + 1) * h * w {
                    yi[p] = g * (xi[p] - mu) * is + b;
                }
            }
        }
        (out, stats, mean, inv_std)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        input: &Tensor<T>,
        mean: &[T],
        inv_std: &[T],
        mode: Mode,
        dy: &Tensor<T>,
        stat_grad: Option<&(Vec<T>, Vec<T>)>,
        grads: Option<&mut [Vec<T>]>,
    ) -> Tensor<T> {
        let [n, c, h, w] = dims4(input);
        let hw = h * w;
        let m = T::lit((n * hw) as f64);
        let mut dx = Tensor::zeros(input.shape());
        let mut grads = grads;
        let batch_mean = match (mode, stat_grad) {
            (Mode::Eval, Some(_)) => Some(Self::batch_stats(input).mean),
            (Mode::Train, Some(_)) => Some(mean.to_vec()),
            _ => None,
        };
        for ch in 0..c {
            let (g, mu, is) = (self.gamma[ch], mean[ch], inv_std[ch]);
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let xi = &input.item(i)[ch * hw..(ch + 1) * hw];
                let di = &dy.item(i)[ch * hw..(ch + 1) * hw];
                for p in 0..hw {
                    sum_dy += di[p];
                    sum_dy_xhat += di[p] * (xi[p] - mu) * is;
                }
            }
            if let Some(gr) = grads.as_deref_mut() {
                gr[self.slot][ch] += sum_dy_xhat;
                gr[self.slot + 1][ch] += sum_dy;
            }
            match mode {
                Mode::Train => {
                    let k = g * is / m;
                    for i in 0..n {
                        let xi = &input.item(i)[ch * hw..(ch + 1) * hw];
                        let di = &dy.item(i)[ch * hw..(ch + 1) * hw];
                        let out = &mut dx.item_mut(i)[ch * hw..(ch + 1) * hw];
                        for p in 0..hw {
                            let xhat = (xi[p] - mu) * is;
                            out[p] = k * (m * di[p] - sum_dy - xhat * sum_dy_xhat);
                        }
                    }
                }
                Mode::Eval => {
                    let k = g * is;
                    for i in 0..n {
                        let di = &dy.item(i)[ch * hw..(ch + 1) * hw];
                        let out = &mut dx.item_mut(i)[ch * hw..(ch + 1) * hw];
                        for p in 0..hw {
                            out[p] = k * di[p];
                        }
                    }
                }
            }
            if let (Some((dmean, dvar)), Some(bm)) = (stat_grad, batch_mean.as_ref()) {
                let a = dmean[ch] / m;
                let b = dvar[ch] * T::lit(2.0) / m;
                let mu_b = bm[ch];
                for i in 0..n {
                    let xi = &input.item(i)[ch * hw..(ch + 1) * hw];
                    let out = &mut dx.item_mut(i)[ch * hw..(ch + 1) * hw];
                    for p in 0..hw {
                        out[p] += a + b * (xi[p] - mu_b);
                    }
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut ChaCha8Rng, in_features: usize, out_features: usize) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = (0..in_features * out_features)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Self { in_features, out_features, weight, bias: vec![T::zero(); out_features], slot: 0 }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.shape()[0];
        let mut out = Tensor::zeros(&[n, self.out_features]);
        T::gemm(n, self.in_features, self.out_features, T::one(), x.data(), false, &self.weight, true, T::zero(), out.data_mut());
        for i in 0..n {
            for (o, b) in out.item_mut(i).iter_mut().zip(&self.bias) {
                *o += *b;
            }
        }
        out
    }
}

fn dims4<T: Scalar>(x: &Tensor<T>) -> [usize; 4] {
    let s = x.shape();
    [s[0], s[1], s[2], s[3]]
}

fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn relu_backward<T: Scalar>(output: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &d)| if o > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::from_vec(output.shape(), data).unwrap()
}

fn avgpool_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dims4(x);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for i in 0..n {
        let xi = x.item(i);
        let yi = out.item_mut(i);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    yi[ch * ho * wo + oy * wo + ox] = (xi[base] + xi[base + 1] + xi[base + w] + xi[base + w + 1]) * quarter;
                }
            }
        }
    }
    out
}

fn avgpool_backward<T: Scalar>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = Tensor::zeros(in_shape);
    for i in 0..n {
        let di = dy.item(i);
        let xi = dx.item_mut(i);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = di[ch * ho * wo + oy * wo + ox] * quarter;
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    xi[base] = g;
                    xi[base + 1] = g;
                    xi[base + w] = g;
                    xi[base + w + 1] = g;
                }
            }
        }
    }
    dx
}

fn forward_layers<T: Scalar>(
    layers: &[Layer<T>],
    mut x: Tensor<T>,
    mode: Mode,
    stats: &mut Vec<BnBatchStats<T>>,
    caches: &mut Vec<Cache<T>>,
) -> Tensor<T> {
    for layer in layers {
        x = match layer {
            Layer::Conv(conv) => {
                let y = conv.forward(&x);
                caches.push(Cache::Conv { input: x });
                y
            }
            Layer::BatchNorm(bn) => {
                let (y, st, mean, inv_std) = bn.forward(&x, mode);
                debug_assert_eq!(stats.len(), bn.index);
                stats.push(st);
                caches.push(Cache::BatchNorm { input: x, mean, inv_std, mode });
                y
            }
            Layer::Relu => {
                let y = relu_forward(&x);
                caches.push(Cache::Relu { output: y.clone() });
                y
            }
            Layer::AvgPool2 => {
                let y = avgpool_forward(&x);
                caches.push(Cache::AvgPool2 { in_shape: x.shape().to_vec() });
                y
            }
            Layer::Residual { main, shortcut } => {
                let mut main_cache = Vec::new();
                let mut short_cache = Vec::new();
                let a = forward_layers(main, x.clone(), mode, stats, &mut main_cache);
                let b = forward_layers(shortcut, x, mode, stats, &mut short_cache);
                let sum: Vec<T> = a.data().iter().zip(b.data()).map(|(&p, &q)| p + q).collect();
                let y = relu_forward(&Tensor::from_vec(a.shape(), sum).unwrap());
                caches.push(Cache::Residual { main: main_cache, shortcut: short_cache, output: y.clone() });
                y
            }
        };
    }
    x
}

fn backward_layers<T: Scalar>(
    layers: &[Layer<T>],
    caches: &[Cache<T>],
    mut dy: Tensor<T>,
    stat_grads: &[Option<(Vec<T>, Vec<T>)>],
    mut grads: Option<&mut [Vec<T>]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    for (idx, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let first = idx == 0;
        dy = match (layer, cache) {
            (Layer::Conv(conv), Cache::Conv { input }) => {
                match conv.backward(input, &dy, grads.as_deref_mut(), need_dx || !first) {
                    Some(d) => d,
                    None => return None,
                }
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm { input, mean, inv_std, mode }) => {
                let sg = stat_grads.get(bn.index).and_then(|g| g.as_ref());
                bn.backward(input, mean, inv_std, *mode, &dy, sg, grads.as_deref_mut())
            }
            (Layer::Relu, Cache::Relu { output }) => relu_backward(output, &dy),
            (Layer::AvgPool2, Cache::AvgPool2 { in_shape }) => avgpool_backward(in_shape, &dy),
            (Layer::Residual { main, shortcut }, Cache::Residual { main: mc, shortcut: sc, output }) => {
                let d = relu_backward(output, &dy);
                let da = backward_layers(main, mc, d.clone(), stat_grads, grads.as_deref_mut(), true)
                    .expect("residual branch input gradient");
                let db = if shortcut.is_empty() {
                    d
                } else {
                    backward_layers(shortcut, sc, d, stat_grads, grads.as_deref_mut(), true)
                        .expect("shortcut input gradient")
                };
                let sum = da.data().iter().zip(db.data()).map(|(&p, &q)| p + q).collect();
                Tensor::from_vec(da.shape(), sum).unwrap()
            }
            _ => unreachable!("cache does not match layer"),
        };
    }
    Some(dy)
}

/// Element count per channel seen by each BatchNorm layer, in index order.
fn bn_inputs<T: Scalar>(caches: &[Cache<T>]) -> Vec<usize> {
    let mut out = Vec::new();
    for c in caches {
        match c {
            Cache::BatchNorm { input, .. } => {
                let s = input.shape();
                out.push(s[0] * s[2] * s[3]);
            }
            Cache::Residual { main, shortcut, .. } => {
                out.extend(bn_inputs(main));
                out.extend(bn_inputs(shortcut));
            }
            _ => {}
        }
    }
    out
}

fn visit_params<'a, T: Scalar>(layers: &'a [Layer<T>], out: &mut Vec<(&'a [T], ParamKind)>) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                out.push((&c.weight, ParamKind::Weight));
                if let Some(b) = &c.bias {
                    out.push((b, ParamKind::Bias));
                }
            }
            Layer::BatchNorm(bn) => {
                out.push((&bn.gamma, ParamKind::Norm));
                out.push((&bn.beta, ParamKind::Norm));
            }
            Layer::Residual { main, shortcut } => {
                visit_params(main, out);
                visit_params(shortcut, out);
            }
            _ => {}
        }
    }
}

fn visit_params_mut<'a, T: Scalar>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut Vec<T>>) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                out.push(&mut c.weight);
                if let Some(b) = &mut c.bias {
                    out.push(b);
                }
            }
            Layer::BatchNorm(bn) => {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
            Layer::Residual { main, shortcut } => {
                visit_params_mut(main, out);
                visit_params_mut(shortcut, out);
            }
            _ => {}
        }
    }
}

fn assign(layers: &mut [Layer<impl Scalar>], slot: &mut usize, bn: &mut usize) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                c.slot = *slot;
                *slot += 1 + usize::from(c.bias.is_some());
            }
            Layer::BatchNorm(b) => {
                b.slot = *slot;
                b.index = *bn;
                *slot += 2;
                *bn += 1;
            }
            Layer::Residual { main, shortcut } => {
                assign(main, slot, bn);
                assign(shortcut, slot, bn);
            }
            _ => {}
        }
    }
}

fn visit_bn_mut<'a, T: Scalar>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut BatchNorm2d<T>>) {
    for layer in layers {
        match layer {
            Layer::BatchNorm(b) => out.push(b),
            Layer::Residual { main, shortcut } => {
                visit_bn_mut(main, out);
                visit_bn_mut(shortcut, out);
            }
            _ => {}
        }
    }
}

fn visit_bn<'a, T: Scalar>(layers: &'a [Layer<T>], out: &mut Vec<&'a BatchNorm2d<T>>) {
    for layer in layers {
        match layer {
            Layer::BatchNorm(b) => out.push(b),
            Layer::Residual { main, shortcut } => {
                visit_bn(main, out);
                visit_bn(shortcut, out);
            }
            _ => {}
        }
    }
}

impl<T: Scalar> Network<T> {
    pub fn new(body: Vec<Layer<T>>, head: Linear<T>, input_shape: [usize; 3]) -> Self {
        let mut net = Self { body, head, input_shape, num_slots: 0, num_bn: 0 };
        net.reindex();
        net
    }

    /// Recomputes parameter slots and BatchNorm indices; required after deserialization.
    pub fn reindex(&mut self) {
        let mut slot = 0;
        let mut bn = 0;
        assign(&mut self.body, &mut slot, &mut bn);
        self.head.slot = slot;
        self.num_slots = slot + 2;
        self.num_bn = bn;
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features
    }

    pub fn feature_channels(&self) -> usize {
        self.head.in_features
    }

    pub fn num_bn_layers(&self) -> usize {
        self.num_bn
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm2d<T>> {
        let mut out = Vec::new();
        visit_bn(&self.body, &mut out);
        out
    }

    /// Parameters in slot order.
    pub fn params(&self) -> Vec<(&[T], ParamKind)> {
        let mut out = Vec::new();
        visit_params(&self.body, &mut out);
        out.push((&self.head.weight, ParamKind::Weight));
        out.push((&self.head.bias, ParamKind::Bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        visit_params_mut(&mut self.body, &mut out);
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|(p, _)| vec![T::zero(); p.len()]).collect()
    }

    /// Pure forward pass; running statistics are never touched here.
    pub fn forward_mode(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        self.check_input(x)?;
        let mut stats = Vec::with_capacity(self.num_bn);
        let mut caches = Vec::new();
        let features = forward_layers(&self.body, x.clone(), mode, &mut stats, &mut caches);
        let [n, f, h, w] = dims4(&features);
        let inv = T::one() / T::lit((h * w) as f64);
        let mut pooled = Tensor::zeros(&[n, f]);
        for i in 0..n {
            let fi = features.item(i);
            for (c, p) in pooled.item_mut(i).iter_mut().enumerate() {
                *p = fi[c * h * w..(c + 1) * h * w].iter().copied().sum::<T>() * inv;
            }
        }
        let logits = self.head.forward(&pooled);
        Ok(ForwardPass { logits, features, bn_stats: stats, pooled, caches, mode })
    }

    /// Eval-mode forward: BatchNorm normalizes with running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardPass<T>> {
        self.forward_mode(x, Mode::Eval)
    }

    /// Train-mode forward that also folds the batch statistics into the running ones.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<ForwardPass<T>> {
        let pass = self.forward_mode(x, Mode::Train)?;
        let mut bns = Vec::new();
        visit_bn_mut(&mut self.body, &mut bns);
        for (bn, (st, cache)) in bns.into_iter().zip(pass.bn_stats.iter().zip(bn_inputs(&pass.caches))) {
            bn.update_running(st, cache);
        }
        Ok(pass)
    }

    pub fn backward(&self, pass: &ForwardPass<T>, grad: &TraceGrad<T>, need_input: bool, need_params: bool) -> Backward<T> {
        let n = pass.logits.shape()[0];
        let mut params = need_params.then(|| self.zero_grads());
        let f = self.head.in_features;
        let k = self.head.out_features;
        if let Some(g) = params.as_mut() {
            T::gemm(k, n, f, T::one(), grad.logits.data(), true, pass.pooled.data(), false, T::one(), &mut g[self.head.slot]);
            let gb = &mut g[self.head.slot + 1];
            for i in 0..n {
                for (b, &d) in gb.iter_mut().zip(grad.logits.item(i)) {
                    *b += d;
                }
            }
        }
        let mut dpooled = Tensor::zeros(&[n, f]);
        T::gemm(n, k, f, T::one(), grad.logits.data(), false, &self.head.weight, false, T::zero(), dpooled.data_mut());
        let [_, _, h, w] = dims4(&pass.features);
        let inv = T::one() / T::lit((h * w) as f64);
        let mut dfeat = Tensor::zeros(pass.features.shape());
        for i in 0..n {
            let dp = dpooled.item(i).to_vec();
            let di = dfeat.item_mut(i);
            for (c, g) in dp.into_iter().enumerate() {
                di[c * h * w..(c + 1) * h * w].fill(g * inv);
            }
        }
        let input = backward_layers(&self.body, &pass.caches, dfeat, &grad.bn_stats, params.as_deref_mut(), need_input);
        Backward { input: if need_input { input } else { None }, params }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Shape(format!("batch shape {:?} does not match input {:?}", s, self.input_shape)));
        }
        if s[0] == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }
}

/// Architecture family selected by identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    /// Conv-BN-ReLU blocks, average pooling between blocks.
    ConvNet { depth: usize, batch_norm: bool },
    /// Basic-block residual net with 2-2-2-2 stages.
    ResNet18,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub id: String,
    pub kind: ArchKind,
    pub width: usize,
}

impl ArchSpec {
    /// Parses `convnetN`, `convnetN-nobn` or `resnet18`.
    pub fn parse(id: &str, width: usize) -> Result<Self> {
        let kind = if id == "resnet18" {
            ArchKind::ResNet18
        } else if let Some(rest) = id.strip_prefix("convnet") {
            let (depth, batch_norm) = match rest.strip_suffix("-nobn") {
                Some(d) => (d, false),
                None => (rest, true),
            };
            let depth: usize = depth
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("unknown architecture `{id}`")))?;
            if depth == 0 {
                return Err(Error::InvalidArgument("convnet depth must be positive".into()));
            }
            ArchKind::ConvNet { depth, batch_norm }
        } else {
            return Err(Error::InvalidArgument(format!("unknown architecture `{id}`")));
        };
        if width == 0 {
            return Err(Error::InvalidArgument("width must be positive".into()));
        }
        Ok(Self { id: id.to_string(), kind, width })
    }

    pub fn has_batch_norm(&self) -> bool {
        !matches!(self.kind, ArchKind::ConvNet { batch_norm: false, .. })
    }

    pub fn build<T: Scalar>(&self, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Network<T>> {
        let [c, h, w] = input_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = self.width;
        let (body, features) = match self.kind {
            ArchKind::ConvNet { depth, batch_norm } => {
                let pools = depth - 1;
                if h % (1 << pools) != 0 || w % (1 << pools) != 0 {
                    return Err(Error::Shape(format!("input {h}x{w} not divisible by 2^{pools}")));
                }
                let mut body = Vec::new();
                let mut in_c = c;
                for d in 0..depth {
                    body.push(Layer::Conv(Conv2d::new(&mut rng, in_c, width, 3, 1, 1, !batch_norm)));
                    if batch_norm {
                        body.push(Layer::BatchNorm(BatchNorm2d::new(width)));
                    }
                    body.push(Layer::Relu);
                    if d + 1 < depth {
                        body.push(Layer::AvgPool2);
                    }
                    in_c = width;
                }
                (body, width)
            }
            ArchKind::ResNet18 => {
                if h % 8 != 0 || w % 8 != 0 {
                    return Err(Error::Shape(format!("input {h}x{w} not divisible by 8")));
                }
                let mut body = vec![
                    Layer::Conv(Conv2d::new(&mut rng, c, width, 3, 1, 1, false)),
                    Layer::BatchNorm(BatchNorm2d::new(width)),
                    Layer::Relu,
                ];
                let mut in_c = width;
                for stage in 0..4 {
                    let out_c = width << stage;
                    for block in 0..2 {
                        let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                        let main = vec![
                            Layer::Conv(Conv2d::new(&mut rng, in_c, out_c, 3, stride, 1, false)),
                            Layer::BatchNorm(BatchNorm2d::new(out_c)),
                            Layer::Relu,
                            Layer::Conv(Conv2d::new(&mut rng, out_c, out_c, 3, 1, 1, false)),
                            Layer::BatchNorm(BatchNorm2d::new(out_c)),
                        ];
                        let shortcut = if stride != 1 || in_c != out_c {
                            vec![
                                Layer::Conv(Conv2d::new(&mut rng, in_c, out_c, 1, stride, 0, false)),
                                Layer::BatchNorm(BatchNorm2d::new(out_c)),
                            ]
                        } else {
                            Vec::new()
                        };
                        body.push(Layer::Residual { main, shortcut });
                        in_c = out_c;
                    }
                }
                (body, in_c)
            }
        };
        let head = Linear::new(&mut rng, features, num_classes);
        Ok(Network::new(body, head, input_shape))
    }
}
