//! Feed-forward convolutional engine.
//!
//! Networks are plain layer chains evaluated on a single [`Tensor`]. Fully
//! connected layers can be rewritten as convolutions
//! ([`convert_fc_to_conv`]), after which the network accepts any input at
//! least as large as its standard size and produces one activation vector
//! per sliding window.

mod dense;
mod netfile;

pub use dense::{
    dense_activations, dense_activations_counted, naive_activations, AxisField, LayerWindow,
    NetGeometry, PatchGeometry, ReceptiveField, ScaleFragment,
};
pub use netfile::{
    parse_manifest, read_network, read_network_from, save_network, toy_network, write_network,
    TOY_MANIFEST,
};

use rayon::prelude::*;

use crate::error::{config, input, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out × in × kh × kw`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return config("conv stride and kernel must be at least 1");
        }
        if weights.len() != out_channels * in_channels * kernel_h * kernel_w {
            return config(format!(
                "conv weight payload has {} values, expected {out_channels}x{in_channels}x{kernel_h}x{kernel_w}",
                weights.len()
            ));
        }
        if bias.len() != out_channels {
            return config(format!(
                "conv bias has {} values, expected {out_channels}",
                bias.len()
            ));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            weights,
            bias,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Cross-channel local response normalization,
/// `b = a / (k + alpha/size * sum a^2)^beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    pub size: usize,
    pub alpha: f32,
    pub beta: f32,
    pub k: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub out_features: usize,
    pub in_features: usize,
    /// `out × in`, the input flattened channel-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl FcLayer {
    pub fn new(
        out_features: usize,
        in_features: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if weights.len() != out_features * in_features || bias.len() != out_features {
            return config(format!(
                "fc payload sizes {}/{} do not match {out_features}x{in_features}",
                weights.len(),
                bias.len()
            ));
        }
        Ok(Self {
            out_features,
            in_features,
            weights,
            bias,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv(ConvLayer),
    Relu,
    MaxPool(PoolGeometry),
    Lrn(LrnParams),
    FullyConnected(FcLayer),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool(_) => "maxpool",
            LayerSpec::Lrn(_) => "lrn",
            LayerSpec::FullyConnected(_) => "fc",
        }
    }

    /// Output shape for an input of shape `(c, h, w)`.
    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match self {
            LayerSpec::Conv(l) => {
                if c != l.in_channels {
                    return config(format!(
                        "conv expects {} input channels, got {c}",
                        l.in_channels
                    ));
                }
                let oh = window_count(h, l.kernel_h, l.stride, l.pad)?;
                let ow = window_count(w, l.kernel_w, l.stride, l.pad)?;
                Ok((l.out_channels, oh, ow))
            }
            LayerSpec::MaxPool(p) => {
                if p.stride == 0 || p.kernel == 0 || p.pad >= p.kernel {
                    return config("maxpool needs kernel, stride >= 1 and pad < kernel");
                }
                Ok((
                    c,
                    window_count(h, p.kernel, p.stride, p.pad)?,
                    window_count(w, p.kernel, p.stride, p.pad)?,
                ))
            }
            LayerSpec::Relu | LayerSpec::Lrn(_) => Ok((c, h, w)),
            LayerSpec::FullyConnected(l) => {
                if c * h * w != l.in_features {
                    return config(format!(
                        "fc expects {} inputs, got {c}x{h}x{w}",
                        l.in_features
                    ));
                }
                Ok((l.out_features, 1, 1))
            }
        }
    }
}

fn window_count(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if n + 2 * p < k {
        return config(format!(
            "input extent {n} (pad {p}) smaller than kernel {k}"
        ));
    }
    Ok((n + 2 * p - k) / s + 1)
}

/// An immutable layer chain plus the input geometry it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    input_channels: usize,
    standard_size: usize,
    layers: Vec<LayerSpec>,
    target: usize,
}

impl NetworkSpec {
    /// Validates that the chain is shape-consistent at the standard size and
    /// that `target` indexes a layer.
    pub fn new(
        input_channels: usize,
        standard_size: usize,
        layers: Vec<LayerSpec>,
        target: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return config("network has no layers");
        }
        if target >= layers.len() {
            return config(format!(
                "target layer {target} out of range ({} layers)",
                layers.len()
            ));
        }
        if standard_size == 0 || input_channels == 0 {
            return config("standard size and input channels must be positive");
        }
        let net = Self {
            input_channels,
            standard_size,
            layers,
            target,
        };
        net.shapes_at(standard_size, standard_size)?;
        Ok(net)
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn standard_size(&self) -> usize {
        self.standard_size
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Shapes after every layer up to and including the target.
    pub fn shapes_at(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        let mut shape = (self.input_channels, h, w);
        let mut out = Vec::with_capacity(self.target + 1);
        for (i, layer) in self.layers[..=self.target].iter().enumerate() {
            shape = layer
                .output_shape(shape)
                .map_err(|e| Error::Config(format!("layer {i} ({}): {e}", layer.kind())))?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Target activation shape for an `h × w` input.
    pub fn output_shape(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        Ok(*self.shapes_at(h, w)?.last().expect("non-empty chain"))
    }

    /// Channel count of the target layer, i.e. the descriptor dimension.
    pub fn descriptor_dim(&self) -> usize {
        self.output_shape(self.standard_size, self.standard_size)
            .map(|s| s.0)
            .expect("validated at construction")
    }

    pub fn has_fully_connected(&self) -> bool {
        self.layers[..=self.target]
            .iter()
            .any(|l| matches!(l, LayerSpec::FullyConnected(_)))
    }

    pub fn geometry(&self) -> NetGeometry {
        NetGeometry::from_network(self)
    }
}

/// Multiply-accumulate counter for conv and fully-connected layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub macs: u64,
}

pub fn forward(net: &NetworkSpec, input: &Tensor) -> Result<Tensor> {
    forward_counted(net, input, &mut MacCounter::default())
}

/// Runs the chain up to the target layer, adding executed multiply-accumulates
/// to `counter`.
pub fn forward_counted(
    net: &NetworkSpec,
    input: &Tensor,
    counter: &mut MacCounter,
) -> Result<Tensor> {
    if input.channels() != net.input_channels {
        return config(format!(
            "input has {} channels, network expects {}",
            input.channels(),
            net.input_channels
        ));
    }
    if input.height() < net.standard_size || input.width() < net.standard_size {
        return input_err_small(input, net.standard_size);
    }
    let mut x = std::borrow::Cow::Borrowed(input);
    for (i, layer) in net.layers[..=net.target].iter().enumerate() {
        let y = match layer {
            LayerSpec::Conv(l) => {
                if x.channels() != l.in_channels {
                    return config(format!(
                        "layer {i}: conv expects {} channels",
                        l.in_channels
                    ));
                }
                conv2d(&x, l, counter)?
            }
            LayerSpec::Relu => {
                let mut y = x.into_owned();
                y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                y
            }
            LayerSpec::MaxPool(p) => max_pool(&x, p)?,
            LayerSpec::Lrn(p) => lrn(&x, p),
            LayerSpec::FullyConnected(l) => {
                if x.data().len() != l.in_features {
                    return config(format!(
                        "layer {i}: fc expects {} inputs, got {}x{}x{}",
                        l.in_features,
                        x.channels(),
                        x.height(),
                        x.width()
                    ));
                }
                fully_connected(&x, l, counter)
            }
        };
        if !y.is_finite() {
            return Err(Error::Numeric {
                layer: i,
                kind: layer.kind(),
            });
        }
        x = std::borrow::Cow::Owned(y);
    }
    Ok(x.into_owned())
}

fn input_err_small<T>(t: &Tensor, standard: usize) -> Result<T> {
    input(format!(
        "input {}x{} is smaller than the standard size {standard}",
        t.height(),
        t.width()
    ))
}

fn padded(x: &Tensor, pad: usize, fill: f32) -> Tensor {
    if pad == 0 {
        return x.clone();
    }
    let (c, h, w) = x.shape();
    let mut out = Tensor::filled(c, h + 2 * pad, w + 2 * pad, fill);
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out.set(ci, y + pad, xx + pad, x.at(ci, y, xx));
            }
        }
    }
    out
}

fn conv2d(x: &Tensor, l: &ConvLayer, counter: &mut MacCounter) -> Result<Tensor> {
    let oh = window_count(x.height(), l.kernel_h, l.stride, l.pad)?;
    let ow = window_count(x.width(), l.kernel_w, l.stride, l.pad)?;
    let owned;
    let xp = if l.pad > 0 {
        owned = padded(x, l.pad, 0.0);
        &owned
    } else {
        x
    };
    let (c, hp, wp) = xp.shape();
    let src = xp.data();
    let (kh, kw, s) = (l.kernel_h, l.kernel_w, l.stride);
    let mut out = vec![0.0f32; l.out_channels * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(o, plane)| {
            plane.fill(l.bias[o]);
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = l.weights[((o * c + ci) * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            let row = &src
                                [(ci * hp + oy * s + ky) * wp..(ci * hp + oy * s + ky + 1) * wp];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                for (acc, &v) in orow.iter_mut().zip(&row[kx..kx + ow]) {
                                    *acc += wv * v;
                                }
                            } else {
                                for (ox, acc) in orow.iter_mut().enumerate() {
                                    *acc += wv * row[ox * s + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
    counter.macs += (l.out_channels * c * kh * kw * oh * ow) as u64;
    Tensor::new(l.out_channels, oh, ow, out)
}

fn fully_connected(x: &Tensor, l: &FcLayer, counter: &mut MacCounter) -> Tensor {
    let src = x.data();
    let out: Vec<f32> = (0..l.out_features)
        .into_par_iter()
        .map(|o| {
            let mut acc = l.bias[o];
            for (w, v) in l.weights[o * l.in_features..(o + 1) * l.in_features]
                .iter()
                .zip(src)
            {
                acc += w * v;
            }
            acc
        })
        .collect();
    counter.macs += (l.out_features * l.in_features) as u64;
    Tensor::new(l.out_features, 1, 1, out).expect("sized by construction")
}

fn max_pool(x: &Tensor, p: &PoolGeometry) -> Result<Tensor> {
    let oh = window_count(x.height(), p.kernel, p.stride, p.pad)?;
    let ow = window_count(x.width(), p.kernel, p.stride, p.pad)?;
    let xp = padded(x, p.pad, f32::NEG_INFINITY);
    Ok(Tensor::from_fn(x.channels(), oh, ow, |c, oy, ox| {
        let mut m = f32::NEG_INFINITY;
        for ky in 0..p.kernel {
            for kx in 0..p.kernel {
                m = m.max(xp.at(c, oy * p.stride + ky, ox * p.stride + kx));
            }
        }
        m
    }))
}

fn lrn(x: &Tensor, p: &LrnParams) -> Tensor {
    let (c, _, _) = x.shape();
    let half = p.size / 2;
    Tensor::from_fn(c, x.height(), x.width(), |ci, y, xx| {
        let lo = ci.saturating_sub(half);
        let hi = (ci + half).min(c - 1);
        let sq: f32 = (lo..=hi).map(|j| x.at(j, y, xx).powi(2)).sum();
        x.at(ci, y, xx) / (p.k + p.alpha / p.size as f32 * sq).powf(p.beta)
    })
}

/// Rewrites every fully-connected layer as an equivalent convolution.
///
/// A layer fed by a `c × h × w` map at the standard size becomes a conv with
/// kernel `h × w` over `c` channels; the weight payload is reused as is
/// because both layouts are channel-major. Nonlinearities are untouched.
pub fn convert_fc_to_conv(net: &NetworkSpec) -> Result<NetworkSpec> {
    let mut shape = (net.input_channels, net.standard_size, net.standard_size);
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let next = match layer {
            LayerSpec::FullyConnected(fc) => {
                let (c, h, w) = shape;
                if c * h * w != fc.in_features {
                    return config(format!(
                        "layer {i}: fc input extent is ambiguous ({} inputs vs {c}x{h}x{w} map)",
                        fc.in_features
                    ));
                }
                LayerSpec::Conv(ConvLayer::new(
                    fc.out_features,
                    c,
                    h,
                    w,
                    1,
                    0,
                    fc.weights.clone(),
                    fc.bias.clone(),
                )?)
            }
            other => other.clone(),
        };
        shape = next
            .output_shape(shape)
            .map_err(|e| Error::Config(format!("layer {i} ({}): {e}", layer.kind())))?;
        layers.push(next);
    }
    NetworkSpec::new(net.input_channels, net.standard_size, layers, net.target)
}
