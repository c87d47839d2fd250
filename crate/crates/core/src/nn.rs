//! Minimal convolutional network substrate: layers, backprop, Adam, and the
//! mini-batch training loop shared by the autoencoder and the classifiers.
//!
//! Tensors are `(batch, channels, height, width)` in standard (row-major)
//! layout. Convolutions are stride-1 with `same` zero padding and are lowered
//! to GEMM through an im2col buffer that is rebuilt during the backward pass
//! instead of cached, which keeps peak memory proportional to one batch.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation / gradient tensor: `(N, C, H, W)`.
pub type Tensor = Array4<f32>;

/// Largest im2col buffer, in f32 elements, before the batch is chunked.
const COLS_BUDGET: usize = 12 << 20;

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

/// Serializable layer description; the runtime network is built from this.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride-1 convolution with `same` zero padding; kernel must be odd.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    /// 2x2 max pooling with stride 2 (floor semantics on odd sizes).
    MaxPool,
    /// Nearest-neighbor upsampling by an integer factor.
    Upsample { factor: usize },
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    if in_channels == 0 || out_channels == 0 {
                        return Err(Error::Config("conv channels must be positive".into()));
                    }
                    if kernel == 0 || kernel % 2 == 0 {
                        return Err(Error::Config(format!(
                            "conv kernel must be odd and positive, got {kernel}"
                        )));
                    }
                }
                LayerSpec::Upsample { factor } => {
                    if factor < 2 {
                        return Err(Error::Config("upsample factor must be >= 2".into()));
                    }
                }
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => {
                    if in_features == 0 || out_features == 0 {
                        return Err(Error::Config("dense features must be positive".into()));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Index of the last convolution layer, if any. Grad-CAM hooks here.
    pub fn last_conv(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Conv { .. }))
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// A trainable tensor flattened to 2-D, with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Array2<f32>,
    pub grad: Array2<f32>,
}

impl Param {
    fn zeros(rows: usize, cols: usize) -> Self {
        Param {
            value: Array2::zeros((rows, cols)),
            grad: Array2::zeros((rows, cols)),
        }
    }

    fn he_init(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in as f32).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| {
            let z: f32 = rng.sample(StandardNormal);
            z * std
        });
        Param {
            grad: Array2::zeros((rows, cols)),
            value,
        }
    }
}

// ---------------------------------------------------------------------------
// Runtime layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ConvLayer {
    ic: usize,
    oc: usize,
    k: usize,
    /// (oc, ic*k*k)
    weight: Param,
    /// (1, oc)
    bias: Param,
    cached_x: Option<Tensor>,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    in_features: usize,
    out_features: usize,
    /// (out, in)
    weight: Param,
    /// (1, out)
    bias: Param,
    cached_x: Option<Tensor>,
}

#[derive(Debug, Clone)]
enum LayerState {
    Conv(ConvLayer),
    Relu { mask: Option<Tensor> },
    MaxPool { argmax: Option<(Array4<u32>, (usize, usize))> },
    Upsample { factor: usize, in_hw: Option<(usize, usize)> },
    GlobalAvgPool { in_hw: Option<(usize, usize)> },
    Dense(DenseLayer),
    Sigmoid { out: Option<Tensor> },
}

fn plane(t: &Tensor, n: usize, c: usize) -> &[f32] {
    let (_, ch, h, w) = t.dim();
    let hw = h * w;
    &t.as_slice().expect("standard layout")[(n * ch + c) * hw..][..hw]
}

/// Fill `cols` (ic*k*k, chunk*H*W) with the im2col lowering of images
/// `n0..n0+chunk` of `x`. `cols` must be pre-zeroed.
fn im2col(x: &Tensor, n0: usize, chunk: usize, k: usize, cols: &mut Array2<f32>) {
    let (_, ic, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let hw = h * w;
    let cols_w = chunk * hw;
    let cs = cols.as_slice_mut().expect("standard layout");
    for i in 0..chunk {
        for c in 0..ic {
            let src = plane(x, n0 + i, c);
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let row = (c * k + ky) * k + kx;
                    let x_lo = 0.max(-dx) as usize;
                    let x_hi = (w as isize).min(w as isize - dx) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_off = sy as usize * w + (x_lo as isize + dx) as usize;
                        let dst_off = row * cols_w + i * hw + y * w + x_lo;
                        let len = x_hi - x_lo;
                        cs[dst_off..dst_off + len]
                            .copy_from_slice(&src[src_off..src_off + len]);
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of im2col: accumulate `dcols` back into `dx`.
fn col2im(dcols: &Array2<f32>, n0: usize, chunk: usize, k: usize, dx: &mut Tensor) {
    let (_, ic, h, w) = dx.dim();
    let pad = (k / 2) as isize;
    let hw = h * w;
    let cols_w = chunk * hw;
    let cs = dcols.as_slice().expect("standard layout");
    let ds = dx.as_slice_mut().expect("standard layout");
    for i in 0..chunk {
        for c in 0..ic {
            let dst_base = ((n0 + i) * ic + c) * hw;
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx_off = kx as isize - pad;
                    let row = (c * k + ky) * k + kx;
                    let x_lo = 0.max(-dx_off) as usize;
                    let x_hi = (w as isize).min(w as isize - dx_off) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_off = row * cols_w + i * hw + y * w + x_lo;
                        let dst_off =
                            dst_base + sy as usize * w + (x_lo as isize + dx_off) as usize;
                        let len = x_hi - x_lo;
                        for j in 0..len {
                            ds[dst_off + j] += cs[src_off + j];
                        }
                    }
                }
            }
        }
    }
}

impl ConvLayer {
    fn chunk_size(&self, hw: usize) -> usize {
        let per_image = self.ic * self.k * self.k * hw;
        (COLS_BUDGET / per_image.max(1)).max(1)
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dim();
        if c != self.ic {
            return Err(Error::Data(format!(
                "conv expected {} input channels, got {c}",
                self.ic
            )));
        }
        let hw = h * w;
        let mut out = Tensor::zeros((n, self.oc, h, w));
        let chunk_max = self.chunk_size(hw);
        let bias = self.bias.value.as_slice().unwrap().to_vec();
        let mut n0 = 0;
        while n0 < n {
            let chunk = chunk_max.min(n - n0);
            let mut cols = Array2::zeros((self.ic * self.k * self.k, chunk * hw));
            im2col(x, n0, chunk, self.k, &mut cols);
            let prod = self.weight.value.dot(&cols); // (oc, chunk*hw)
            let ps = prod.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for i in 0..chunk {
                for o in 0..self.oc {
                    let src = &ps[o * (chunk * hw) + i * hw..][..hw];
                    let dst = &mut os[((n0 + i) * self.oc + o) * hw..][..hw];
                    let b = bias[o];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + b;
                    }
                }
            }
            n0 += chunk;
        }
        if train {
            self.cached_x = Some(x.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .cached_x
            .take()
            .ok_or_else(|| Error::State("conv backward without cached forward".into()))?;
        let (n, _, h, w) = x.dim();
        let hw = h * w;
        let mut dx = Tensor::zeros(x.dim());
        let chunk_max = self.chunk_size(hw);
        let mut n0 = 0;
        while n0 < n {
            let chunk = chunk_max.min(n - n0);
            let mut cols = Array2::zeros((self.ic * self.k * self.k, chunk * hw));
            im2col(&x, n0, chunk, self.k, &mut cols);
            // gather dy chunk into (oc, chunk*hw)
            let mut dy_r = Array2::zeros((self.oc, chunk * hw));
            {
                let ds = dy.as_slice().unwrap();
                let rs = dy_r.as_slice_mut().unwrap();
                for i in 0..chunk {
                    for o in 0..self.oc {
                        let src = &ds[((n0 + i) * self.oc + o) * hw..][..hw];
                        rs[o * (chunk * hw) + i * hw..][..hw].copy_from_slice(src);
                    }
                }
            }
            self.weight.grad += &dy_r.dot(&cols.t());
            {
                let bg = self.bias.grad.as_slice_mut().unwrap();
                let rs = dy_r.as_slice().unwrap();
                for o in 0..self.oc {
                    let mut acc = 0.0f32;
                    for v in &rs[o * (chunk * hw)..(o + 1) * (chunk * hw)] {
                        acc += v;
                    }
                    bg[o] += acc;
                }
            }
            let dcols = self.weight.value.t().dot(&dy_r); // (ic*k*k, chunk*hw)
            col2im(&dcols, n0, chunk, self.k, &mut dx);
            n0 += chunk;
        }
        Ok(dx)
    }
}

impl DenseLayer {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dim();
        if c * h * w != self.in_features {
            return Err(Error::Data(format!(
                "dense expected {} input features, got {}",
                self.in_features,
                c * h * w
            )));
        }
        let flat = x
            .view()
            .into_shape_with_order((n, self.in_features))
            .expect("standard layout");
        let mut out = flat.dot(&self.weight.value.t()); // (n, out)
        for mut row in out.rows_mut() {
            row += &self.bias.value.row(0);
        }
        if train {
            self.cached_x = Some(x.clone());
        }
        Ok(out
            .into_shape_with_order((n, self.out_features, 1, 1))
            .expect("reshape"))
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .cached_x
            .take()
            .ok_or_else(|| Error::State("dense backward without cached forward".into()))?;
        let (n, c, h, w) = x.dim();
        let flat = x
            .view()
            .into_shape_with_order((n, self.in_features))
            .expect("standard layout");
        let dy_m = dy
            .view()
            .into_shape_with_order((n, self.out_features))
            .expect("standard layout");
        self.weight.grad += &dy_m.t().dot(&flat);
        for j in 0..self.out_features {
            let mut acc = 0.0f32;
            for i in 0..n {
                acc += dy_m[[i, j]];
            }
            self.bias.grad[[0, j]] += acc;
        }
        let dx = dy_m.dot(&self.weight.value); // (n, in)
        Ok(dx.into_shape_with_order((n, c, h, w)).expect("reshape"))
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// A feed-forward stack of layers built from a [`NetworkSpec`].
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerState>,
}

impl Network {
    /// Build a network with He-initialized weights drawn from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    LayerState::Conv(ConvLayer {
                        ic: in_channels,
                        oc: out_channels,
                        k: kernel,
                        weight: Param::he_init(out_channels, fan_in, fan_in, &mut rng),
                        bias: Param::zeros(1, out_channels),
                        cached_x: None,
                    })
                }
                LayerSpec::Relu => LayerState::Relu { mask: None },
                LayerSpec::MaxPool => LayerState::MaxPool { argmax: None },
                LayerSpec::Upsample { factor } => LayerState::Upsample {
                    factor,
                    in_hw: None,
                },
                LayerSpec::GlobalAvgPool => LayerState::GlobalAvgPool { in_hw: None },
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => LayerState::Dense(DenseLayer {
                    in_features,
                    out_features,
                    weight: Param::he_init(out_features, in_features, in_features, &mut rng),
                    bias: Param::zeros(1, out_features),
                    cached_x: None,
                }),
                LayerSpec::Sigmoid => LayerState::Sigmoid { out: None },
            })
            .collect();
        Ok(Network { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Forward pass. With `train` set, per-layer state needed by
    /// [`Network::backward`] is cached.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_tapped(x, None, train)?.0)
    }

    /// Forward pass that additionally returns the output of layer `tap`.
    pub fn forward_tapped(
        &mut self,
        x: &Tensor,
        tap: Option<usize>,
        train: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let mut cur = x.clone();
        let mut tapped = None;
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            cur = match layer {
                LayerState::Conv(conv) => conv.forward(&cur, train)?,
                LayerState::Relu { mask } => {
                    let out = cur.mapv(|v| if v > 0.0 { v } else { 0.0 });
                    if train {
                        *mask = Some(cur.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                    }
                    out
                }
                LayerState::MaxPool { argmax } => {
                    let (n, c, h, w) = cur.dim();
                    let (oh, ow) = (h / 2, w / 2);
                    if oh == 0 || ow == 0 {
                        return Err(Error::Data(format!(
                            "max pool input {h}x{w} too small"
                        )));
                    }
                    let mut out = Tensor::zeros((n, c, oh, ow));
                    let mut idx_arr = Array4::<u32>::zeros((n, c, oh, ow));
                    for ni in 0..n {
                        for ci in 0..c {
                            let src = plane(&cur, ni, ci);
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let mut best = f32::NEG_INFINITY;
                                    let mut best_i = 0u32;
                                    for py in 0..2 {
                                        for px in 0..2 {
                                            let off = (2 * y + py) * w + 2 * xx + px;
                                            let v = src[off];
                                            if v > best {
                                                best = v;
                                                best_i = off as u32;
                                            }
                                        }
                                    }
                                    out[[ni, ci, y, xx]] = best;
                                    idx_arr[[ni, ci, y, xx]] = best_i;
                                }
                            }
                        }
                    }
                    if train {
                        *argmax = Some((idx_arr, (h, w)));
                    }
                    out
                }
                LayerState::Upsample { factor, in_hw } => {
                    let (n, c, h, w) = cur.dim();
                    let f = *factor;
                    let mut out = Tensor::zeros((n, c, h * f, w * f));
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..h * f {
                                for xx in 0..w * f {
                                    out[[ni, ci, y, xx]] = cur[[ni, ci, y / f, xx / f]];
                                }
                            }
                        }
                    }
                    if train {
                        *in_hw = Some((h, w));
                    }
                    out
                }
                LayerState::GlobalAvgPool { in_hw } => {
                    let (n, c, h, w) = cur.dim();
                    let scale = 1.0 / (h * w) as f32;
                    let mut out = Tensor::zeros((n, c, 1, 1));
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut acc = 0.0f32;
                            for v in plane(&cur, ni, ci) {
                                acc += v;
                            }
                            out[[ni, ci, 0, 0]] = acc * scale;
                        }
                    }
                    if train {
                        *in_hw = Some((h, w));
                    }
                    out
                }
                LayerState::Dense(dense) => dense.forward(&cur, train)?,
                LayerState::Sigmoid { out } => {
                    let o = cur.mapv(|v| 1.0 / (1.0 + (-v).exp()));
                    if train {
                        *out = Some(o.clone());
                    }
                    o
                }
            };
            if tap == Some(idx) {
                tapped = Some(cur.clone());
            }
        }
        Ok((cur, tapped))
    }

    /// Full backward pass; accumulates parameter gradients and returns the
    /// gradient with respect to the network input.
    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        self.backward_until(dy, 0)
    }

    /// Backward pass stopping after layer `stop`: returns the gradient with
    /// respect to the *output* of layer `stop - 1` — equivalently, the
    /// gradient arriving at layer `stop`'s input. `stop = 0` runs all layers.
    pub fn backward_until(&mut self, dy: &Tensor, stop: usize) -> Result<Tensor> {
        let mut cur = dy.clone();
        for i in (stop..self.layers.len()).rev() {
            cur = match &mut self.layers[i] {
                LayerState::Conv(conv) => conv.backward(&cur)?,
                LayerState::Relu { mask } => {
                    let m = mask
                        .take()
                        .ok_or_else(|| Error::State("relu backward without forward".into()))?;
                    &cur * &m
                }
                LayerState::MaxPool { argmax } => {
                    let (idx_arr, (h, w)) = argmax
                        .take()
                        .ok_or_else(|| Error::State("pool backward without forward".into()))?;
                    let (n, c, oh, ow) = cur.dim();
                    let mut dx = Tensor::zeros((n, c, h, w));
                    {
                        let ds = dx.as_slice_mut().unwrap();
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * h * w;
                                for y in 0..oh {
                                    for xx in 0..ow {
                                        let off = idx_arr[[ni, ci, y, xx]] as usize;
                                        ds[base + off] += cur[[ni, ci, y, xx]];
                                    }
                                }
                            }
                        }
                    }
                    dx
                }
                LayerState::Upsample { factor, in_hw } => {
                    let (h, w) = in_hw
                        .take()
                        .ok_or_else(|| Error::State("upsample backward without forward".into()))?;
                    let f = *factor;
                    let (n, c, _, _) = cur.dim();
                    let mut dx = Tensor::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..h * f {
                                for xx in 0..w * f {
                                    dx[[ni, ci, y / f, xx / f]] += cur[[ni, ci, y, xx]];
                                }
                            }
                        }
                    }
                    dx
                }
                LayerState::GlobalAvgPool { in_hw } => {
                    let (h, w) = in_hw
                        .take()
                        .ok_or_else(|| Error::State("gap backward without forward".into()))?;
                    let (n, c, _, _) = cur.dim();
                    let scale = 1.0 / (h * w) as f32;
                    let mut dx = Tensor::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = cur[[ni, ci, 0, 0]] * scale;
                            for v in dx
                                .as_slice_mut()
                                .unwrap()
                                .iter_mut()
                                .skip((ni * c + ci) * h * w)
                                .take(h * w)
                            {
                                *v = g;
                            }
                        }
                    }
                    dx
                }
                LayerState::Dense(dense) => dense.backward(&cur)?,
                LayerState::Sigmoid { out } => {
                    let o = out
                        .take()
                        .ok_or_else(|| Error::State("sigmoid backward without forward".into()))?;
                    let mut dx = cur.clone();
                    for (d, y) in dx.iter_mut().zip(o.iter()) {
                        *d *= y * (1.0 - y);
                    }
                    dx
                }
            };
        }
        Ok(cur)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LayerState::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                LayerState::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerState::Conv(c) => {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
                LayerState::Dense(d) => {
                    out.push(&d.weight);
                    out.push(&d.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam options. `decay` applies a `lr / (1 + decay * step)` schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamOptions {
    pub lr: f32,
    pub decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamOptions {
    pub fn with_lr(lr: f32, decay: f32) -> Self {
        AdamOptions {
            lr,
            decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state aligned with the network's parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    opts: AdamOptions,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(net: &Network, opts: AdamOptions) -> Adam {
        let shapes: Vec<_> = net.params().iter().map(|p| p.value.dim()).collect();
        Adam {
            opts,
            m: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            v: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            step: 0,
        }
    }

    /// Apply one update from the accumulated gradients; does not zero them.
    pub fn step(&mut self, net: &mut Network) {
        let lr_t = self.opts.lr / (1.0 + self.opts.decay * self.step as f32);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.opts.beta1.powi(t);
        let bc2 = 1.0 - self.opts.beta2.powi(t);
        for (idx, p) in net.params_mut().into_iter().enumerate() {
            let m = self.m[idx].as_slice_mut().unwrap();
            let v = self.v[idx].as_slice_mut().unwrap();
            let g = p.grad.as_slice().unwrap();
            let w = p.value.as_slice_mut().unwrap();
            for i in 0..g.len() {
                m[i] = self.opts.beta1 * m[i] + (1.0 - self.opts.beta1) * g[i];
                v[i] = self.opts.beta2 * v[i] + (1.0 - self.opts.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr_t * m_hat / (v_hat.sqrt() + self.opts.epsilon);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Numerically stable binary cross-entropy on logits.
/// Returns the mean loss and the gradient w.r.t. the logits.
pub fn bce_with_logits(logits: &Tensor, targets: &[f32]) -> Result<(f32, Tensor)> {
    let n = logits.dim().0;
    if n != targets.len() || logits.len() != n {
        return Err(Error::Data(format!(
            "bce expects one logit per target: {} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut grad = Tensor::zeros(logits.dim());
    let mut loss = 0.0f64;
    let scale = 1.0 / n as f32;
    {
        let ls = logits.as_slice().unwrap();
        let gs = grad.as_slice_mut().unwrap();
        for i in 0..n {
            let z = ls[i];
            let t = targets[i];
            loss += (z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln()) as f64;
            let sig = 1.0 / (1.0 + (-z).exp());
            gs[i] = (sig - t) * scale;
        }
    }
    Ok(((loss / n as f64) as f32, grad))
}

/// Mean squared error; returns the mean loss and gradient w.r.t. predictions.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor)> {
    if pred.dim() != target.dim() {
        return Err(Error::Data(format!(
            "mse shape mismatch: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let numel = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.dim());
    let mut loss = 0.0f64;
    {
        let ps = pred.as_slice().unwrap();
        let ts = target.as_slice().unwrap();
        let gs = grad.as_slice_mut().unwrap();
        let scale = 2.0 / numel as f32;
        for i in 0..ps.len() {
            let d = ps[i] - ts[i];
            loss += (d as f64) * (d as f64);
            gs[i] = d * scale;
        }
    }
    Ok(((loss / numel) as f32, grad))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Supervision for [`fit`]: scalar labels (BCE on logits) or a full target
/// tensor (MSE), matching the classifier and autoencoder cases.
pub enum FitTarget<'a> {
    /// One 0/1 label per sample; network must emit one logit per sample.
    Labels(&'a [f32]),
    /// Dense regression target with the same shape as the network output.
    Tensor(&'a Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamOptions,
    pub shuffle_seed: u64,
    /// Stop after this many epochs without training-loss improvement.
    pub patience: Option<usize>,
}

fn gather_batch(data: &Tensor, idx: &[usize]) -> Tensor {
    let (_, c, h, w) = data.dim();
    let chw = c * h * w;
    let mut out = Tensor::zeros((idx.len(), c, h, w));
    let src = data.as_slice().unwrap();
    let dst = out.as_slice_mut().unwrap();
    for (bi, &si) in idx.iter().enumerate() {
        dst[bi * chw..(bi + 1) * chw].copy_from_slice(&src[si * chw..(si + 1) * chw]);
    }
    out
}

/// Mini-batch gradient descent over the full dataset tensor. Returns the
/// per-epoch mean training loss. Errors with `Divergence` on non-finite loss.
pub fn fit(
    net: &mut Network,
    inputs: &Tensor,
    target: FitTarget<'_>,
    opts: &FitOptions,
) -> Result<Vec<f32>> {
    let n = inputs.dim().0;
    if n == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if let FitTarget::Labels(t) = &target {
        if t.len() != n {
            return Err(Error::Data("label count mismatch".into()));
        }
    }
    let mut adam = Adam::new(net, opts.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    let mut best = f32::INFINITY;
    let mut stale = 0usize;
    for epoch in 0..opts.epochs {
        // Fisher-Yates over a stream that continues across epochs
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let xb = gather_batch(inputs, chunk);
            let out = net.forward(&xb, true)?;
            let (loss, dy) = match &target {
                FitTarget::Labels(t) => {
                    let tb: Vec<f32> = chunk.iter().map(|&i| t[i]).collect();
                    bce_with_logits(&out, &tb)?
                }
                FitTarget::Tensor(t) => {
                    let tb = gather_batch(t, chunk);
                    mse(&out, &tb)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}")));
            }
            net.zero_grads();
            net.backward(&dy)?;
            adam.step(net);
            epoch_loss += loss as f64;
            batches += 1;
        }
        let mean = (epoch_loss / batches as f64) as f32;
        history.push(mean);
        if let Some(p) = opts.patience {
            if mean + 1e-12 < best {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= p {
                    break;
                }
            }
        }
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    spec: NetworkSpec,
    params: Vec<ParamRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    file: String,
    rows: usize,
    cols: usize,
}

/// Persist a network as one container file per parameter tensor plus a
/// structured text index.
pub fn save_network(net: &Network, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for (i, p) in net.params().iter().enumerate() {
        let file = format!("param_{i:03}.pac");
        crate::container::write_grid(&dir.join(&file), &p.value)?;
        let (rows, cols) = p.value.dim();
        records.push(ParamRecord { file, rows, cols });
    }
    let index = CheckpointIndex {
        spec: net.spec.clone(),
        params: records,
    };
    let text = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Format(format!("checkpoint index: {e}")))?;
    std::fs::write(dir.join("network.json"), text)?;
    Ok(())
}

/// Load a network persisted by [`save_network`].
pub fn load_network(dir: &std::path::Path) -> Result<Network> {
    let text = std::fs::read_to_string(dir.join("network.json"))?;
    let index: CheckpointIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("checkpoint index: {e}")))?;
    let mut net = Network::new(index.spec, 0)?;
    {
        let params = net.params_mut();
        if params.len() != index.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, network expects {}",
                index.params.len(),
                params.len()
            )));
        }
    }
    for (i, rec) in index.params.iter().enumerate() {
        let grid = crate::container::read_grid(&dir.join(&rec.file))?;
        let mut params = net.params_mut();
        let p = &mut params[i];
        if grid.dim() != (rec.rows, rec.cols) || grid.dim() != p.value.dim() {
            return Err(Error::Format(format!(
                "parameter {} has shape {:?}, expected {:?}",
                rec.file,
                grid.dim(),
                p.value.dim()
            )));
        }
        p.value = grid;
    }
    Ok(net)
}
