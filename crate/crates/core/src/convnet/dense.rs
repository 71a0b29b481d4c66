use super::{forward_counted, LayerSpec, MacCounter, NetworkSpec};
use crate::error::{config, input, Result};
use crate::tensor::Tensor;

/// Sliding-window geometry of one layer; pointwise layers are `1×1/1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerWindow {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl LayerWindow {
    pub const POINTWISE: LayerWindow = LayerWindow {
        kernel_h: 1,
        kernel_w: 1,
        stride: 1,
        pad: 0,
    };

    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
        }
    }
}

/// Weight-free view of a network: just enough to do stride/padding
/// arithmetic (output map sizes, receptive fields) for any input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetGeometry {
    pub standard_size: usize,
    pub windows: Vec<LayerWindow>,
}

/// One spatial axis of a receptive field: output unit `i` sees input pixels
/// `[offset + i*jump, offset + i*jump + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisField {
    pub jump: usize,
    pub size: usize,
    pub offset: isize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub y: AxisField,
    pub x: AxisField,
}

impl NetGeometry {
    pub fn new(standard_size: usize, windows: Vec<LayerWindow>) -> Self {
        Self {
            standard_size,
            windows,
        }
    }

    pub fn from_network(net: &NetworkSpec) -> Self {
        let std = net.standard_size();
        let shapes = net.shapes_at(std, std).expect("validated at construction");
        let mut prev = (net.input_channels(), std, std);
        let windows = net.layers()[..=net.target()]
            .iter()
            .zip(&shapes)
            .map(|(layer, &shape)| {
                let w = match layer {
                    LayerSpec::Conv(c) => LayerWindow {
                        kernel_h: c.kernel_h,
                        kernel_w: c.kernel_w,
                        stride: c.stride,
                        pad: c.pad,
                    },
                    LayerSpec::MaxPool(p) => LayerWindow::square(p.kernel, p.stride, p.pad),
                    LayerSpec::FullyConnected(_) => LayerWindow {
                        kernel_h: prev.1,
                        kernel_w: prev.2,
                        stride: 1,
                        pad: 0,
                    },
                    LayerSpec::Relu | LayerSpec::Lrn(_) => LayerWindow::POINTWISE,
                };
                prev = shape;
                w
            })
            .collect();
        Self {
            standard_size: std,
            windows,
        }
    }

    /// Caffe reference ("Alex") network up to its second fully-connected
    /// layer, with pooling rounded down.
    pub fn alexnet() -> Self {
        let p = LayerWindow::POINTWISE;
        Self::new(
            227,
            vec![
                LayerWindow::square(11, 4, 0),
                p,
                p,
                LayerWindow::square(3, 2, 0),
                LayerWindow::square(5, 1, 2),
                p,
                p,
                LayerWindow::square(3, 2, 0),
                LayerWindow::square(3, 1, 1),
                p,
                LayerWindow::square(3, 1, 1),
                p,
                LayerWindow::square(3, 1, 1),
                p,
                LayerWindow::square(3, 2, 0),
                LayerWindow::square(6, 1, 0),
                p,
                LayerWindow::square(1, 1, 0),
                p,
            ],
        )
    }

    /// Output map size for an `h × w` input, `None` if the input is too small.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for l in &self.windows {
            if h + 2 * l.pad < l.kernel_h || w + 2 * l.pad < l.kernel_w {
                return None;
            }
            h = (h + 2 * l.pad - l.kernel_h) / l.stride + 1;
            w = (w + 2 * l.pad - l.kernel_w) / l.stride + 1;
        }
        Some((h, w))
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        let mut y = AxisField {
            jump: 1,
            size: 1,
            offset: 0,
        };
        let mut x = y;
        for l in &self.windows {
            for (axis, k) in [(&mut y, l.kernel_h), (&mut x, l.kernel_w)] {
                axis.size += (k - 1) * axis.jump;
                axis.offset -= (l.pad * axis.jump) as isize;
                axis.jump *= l.stride;
            }
        }
        ReceptiveField { y, x }
    }
}

/// Where a descriptor came from: pyramid level and the receptive field in
/// normalized `[0, 1]` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchGeometry {
    /// 1-based pyramid level.
    pub scale: u32,
    pub cx: f32,
    pub cy: f32,
    pub edge: f32,
}

impl PatchGeometry {
    /// Normalized `[x0, x1) × [y0, y1)` box.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let h = f64::from(self.edge) / 2.0;
        let (cx, cy) = (f64::from(self.cx), f64::from(self.cy));
        (cx - h, cx + h, cy - h, cy + h)
    }
}

/// Descriptors of one pyramid level in row-major map order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleFragment {
    pub scale: u32,
    pub dim: usize,
    pub rows: usize,
    pub cols: usize,
    /// `rows * cols * dim` values, one descriptor after another.
    pub data: Vec<f32>,
    pub geometry: Vec<PatchGeometry>,
}

impl ScaleFragment {
    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn patch_geometry(
    rf: &ReceptiveField,
    scale: u32,
    i: usize,
    j: usize,
    h: usize,
    w: usize,
) -> PatchGeometry {
    let norm = |axis: &AxisField, idx: usize, extent: usize| {
        let lo = (axis.offset + (idx * axis.jump) as isize) as f64;
        let hi = lo + axis.size as f64;
        let e = extent as f64;
        ((lo / e).clamp(0.0, 1.0), (hi / e).clamp(0.0, 1.0))
    };
    let (y0, y1) = norm(&rf.y, i, h);
    let (x0, x1) = norm(&rf.x, j, w);
    let edge = (x1 - x0).max(y1 - y0).clamp(f64::MIN_POSITIVE, 1.0);
    PatchGeometry {
        scale,
        cx: ((x0 + x1) / 2.0) as f32,
        cy: ((y0 + y1) / 2.0) as f32,
        edge: edge as f32,
    }
}

pub fn dense_activations(net: &NetworkSpec, image: &Tensor, scale: u32) -> Result<ScaleFragment> {
    dense_activations_counted(net, image, scale, &mut MacCounter::default())
}

/// One forward pass of a convolutionalized network over a whole pyramid
/// level; every output location becomes a descriptor.
pub fn dense_activations_counted(
    net: &NetworkSpec,
    image: &Tensor,
    scale: u32,
    counter: &mut MacCounter,
) -> Result<ScaleFragment> {
    if net.has_fully_connected() {
        return config(
            "dense extraction needs a converted network (fully-connected layers present)",
        );
    }
    if image.height() < net.standard_size() || image.width() < net.standard_size() {
        return input(format!(
            "image {}x{} is smaller than the standard size {}",
            image.height(),
            image.width(),
            net.standard_size()
        ));
    }
    let map = forward_counted(net, image, counter)?;
    let rf = net.geometry().receptive_field();
    let (dim, rows, cols) = map.shape();
    let mut data = Vec::with_capacity(dim * rows * cols);
    let mut geometry = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.extend((0..dim).map(|c| map.at(c, i, j)));
            geometry.push(patch_geometry(
                &rf,
                scale,
                i,
                j,
                image.height(),
                image.width(),
            ));
        }
    }
    Ok(ScaleFragment {
        scale,
        dim,
        rows,
        cols,
        data,
        geometry,
    })
}

/// The crop-and-forward baseline: every window the dense pass would cover is
/// cut out at the standard size and pushed through the network on its own.
///
/// Only defined for unpadded networks, where each window is exactly one
/// standard-size crop.
pub fn naive_activations(
    net: &NetworkSpec,
    image: &Tensor,
    scale: u32,
    counter: &mut MacCounter,
) -> Result<ScaleFragment> {
    let std = net.standard_size();
    let geo = net.geometry();
    let rf = geo.receptive_field();
    if rf.y.size != std || rf.x.size != std || rf.y.offset != 0 || rf.x.offset != 0 {
        return config(
            "naive extraction needs an unpadded network whose receptive field is the standard size",
        );
    }
    let (rows, cols) = geo
        .output_size(image.height(), image.width())
        .ok_or_else(|| crate::Error::Input("image smaller than the standard size".into()))?;
    let dim = net.descriptor_dim();
    let mut data = Vec::with_capacity(dim * rows * cols);
    let mut geometry = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let crop = image.crop((i * rf.y.jump) as isize, (j * rf.x.jump) as isize, std, std);
            let out = forward_counted(net, &crop, counter)?;
            data.extend_from_slice(out.data());
            geometry.push(patch_geometry(
                &rf,
                scale,
                i,
                j,
                image.height(),
                image.width(),
            ));
        }
    }
    Ok(ScaleFragment {
        scale,
        dim,
        rows,
        cols,
        data,
        geometry,
    })
}
