//! Scale pyramids and the tagged descriptor container they feed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::convnet::{
    dense_activations_counted, MacCounter, NetworkSpec, PatchGeometry, ScaleFragment,
};
use crate::error::{config, input, Result};
use crate::tensor::Tensor;

/// Edge growth between consecutive pyramid levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleStep {
    /// Edge doubles per level: `standard * 2^(s-1)`.
    #[default]
    Octave,
    /// Pixel count doubles per level: `ceil(standard * 2^((s-1)/2))`.
    HalfOctave,
}

impl ScaleStep {
    pub fn name(self) -> &'static str {
        match self {
            ScaleStep::Octave => "octave",
            ScaleStep::HalfOctave => "half-octave",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "octave" => Ok(ScaleStep::Octave),
            "half-octave" => Ok(ScaleStep::HalfOctave),
            other => config(format!("unknown scale step `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalePyramid {
    pub standard: usize,
    pub step: ScaleStep,
    edges: Vec<usize>,
}

impl ScalePyramid {
    pub fn new(standard: usize, n: usize, step: ScaleStep) -> Result<Self> {
        if n == 0 {
            return config("a pyramid needs at least one scale");
        }
        if standard == 0 {
            return config("standard size must be positive");
        }
        let edges = (0..n)
            .map(|s| match step {
                ScaleStep::Octave => standard << s,
                ScaleStep::HalfOctave => {
                    // exact for even levels, rounded up for odd ones
                    let base = standard << (s / 2);
                    if s % 2 == 0 {
                        base
                    } else {
                        (base as f64 * std::f64::consts::SQRT_2).ceil() as usize
                    }
                }
            })
            .collect();
        Ok(Self {
            standard,
            step,
            edges,
        })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edge of 1-based level `s`.
    pub fn edge(&self, s: usize) -> usize {
        self.edges[s - 1]
    }

    pub fn edges(&self) -> &[usize] {
        &self.edges
    }
}

/// Per-output-sample source taps for one axis of a triangle-filter resample.
fn axis_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = (center - support).floor().max(0.0) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .filter_map(|j| {
                    let w = 1.0 - ((j as f64 + 0.5 - center) / support).abs();
                    (w > 0.0).then_some((j, w))
                })
                .collect();
            if taps.is_empty() {
                taps.push((((center - 0.5).round().max(0.0) as usize).min(src - 1), 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers. When shrinking, the
/// triangle filter is widened by the shrink factor so every source pixel
/// contributes.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Tensor {
    let (c, h, w) = image.shape();
    let ty = axis_taps(h, height);
    let tx = axis_taps(w, width);
    let mut out = Tensor::zeros(c, height, width);
    let mut rows = vec![0.0f64; h * width];
    for ci in 0..c {
        let plane = image.plane(ci);
        for y in 0..h {
            for (x, taps) in tx.iter().enumerate() {
                rows[y * width + x] = taps
                    .iter()
                    .map(|&(j, wt)| f64::from(plane[y * w + j]) * wt)
                    .sum();
            }
        }
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..width {
                let v: f64 = taps.iter().map(|&(j, wt)| rows[j * width + x] * wt).sum();
                out.set(ci, y, x, v as f32);
            }
        }
    }
    out
}

/// `n` levels doubling in edge length from `standard`.
pub fn build_pyramid(image: &Tensor, n: usize, standard: usize) -> Result<Vec<Tensor>> {
    Ok(build_pyramid_with(
        image,
        &ScalePyramid::new(standard, n, ScaleStep::Octave)?,
    ))
}

pub fn build_pyramid_with(image: &Tensor, pyramid: &ScalePyramid) -> Vec<Tensor> {
    pyramid
        .edges()
        .iter()
        .map(|&e| resize_bilinear(image, e, e))
        .collect()
}

/// Descriptors from every pyramid level, ordered by (scale, row-major map
/// position), with `scale_counts[s-1] = |x_s|`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    data: Vec<f32>,
    geometry: Vec<PatchGeometry>,
    scale_counts: Vec<usize>,
}

impl DescriptorSet {
    pub fn new(dim: usize, n_scales: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            geometry: Vec::new(),
            scale_counts: vec![0; n_scales],
        }
    }

    /// Checks sizes, scale range and ordering, and derives the counts.
    pub fn from_parts(
        dim: usize,
        n_scales: usize,
        data: Vec<f32>,
        geometry: Vec<PatchGeometry>,
    ) -> Result<Self> {
        if data.len() != dim * geometry.len() {
            return input(format!(
                "{} values for {} descriptors of dim {dim}",
                data.len(),
                geometry.len()
            ));
        }
        let mut counts = vec![0; n_scales];
        let mut last = 1;
        for g in &geometry {
            let s = g.scale as usize;
            if s == 0 || s > n_scales {
                return input(format!("scale {s} outside 1..={n_scales}"));
            }
            if s < last {
                return input("descriptors must be ordered by scale");
            }
            last = s;
            counts[s - 1] += 1;
        }
        Ok(Self {
            dim,
            data,
            geometry,
            scale_counts: counts,
        })
    }

    /// Appends one level. Levels must arrive in non-decreasing scale order.
    pub fn push_fragment(&mut self, frag: ScaleFragment) -> Result<()> {
        let s = frag.scale as usize;
        if frag.dim != self.dim {
            return input(format!("fragment dim {} != set dim {}", frag.dim, self.dim));
        }
        if s == 0 || s > self.scale_counts.len() {
            return input(format!("scale {s} outside 1..={}", self.scale_counts.len()));
        }
        if self.geometry.last().is_some_and(|g| g.scale as usize > s) {
            return input("fragments must be pushed in scale order");
        }
        self.scale_counts[s - 1] += frag.len();
        self.data.extend_from_slice(&frag.data);
        self.geometry.extend_from_slice(&frag.geometry);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn n_scales(&self) -> usize {
        self.scale_counts.len()
    }

    pub fn scale_counts(&self) -> &[usize] {
        &self.scale_counts
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn geometry(&self) -> &[PatchGeometry] {
        &self.geometry
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Index range of 1-based scale `s`.
    pub fn scale_range(&self, s: usize) -> Range<usize> {
        let start: usize = self.scale_counts[..s - 1].iter().sum();
        start..start + self.scale_counts[s - 1]
    }

    /// Flat descriptor values of scale `s`.
    pub fn scale_data(&self, s: usize) -> &[f32] {
        let r = self.scale_range(s);
        &self.data[r.start * self.dim..r.end * self.dim]
    }

    /// Keeps only descriptors whose scale is listed; the scale count is
    /// unchanged and dropped scales report zero descriptors.
    pub fn subset_scales(&self, scales: &[usize]) -> DescriptorSet {
        self.filter(|g| scales.contains(&(g.scale as usize)))
    }

    pub fn filter(&self, mut keep: impl FnMut(&PatchGeometry) -> bool) -> DescriptorSet {
        let mut out = DescriptorSet::new(self.dim, self.n_scales());
        for (i, g) in self.geometry.iter().enumerate() {
            if keep(g) {
                out.data.extend_from_slice(self.descriptor(i));
                out.geometry.push(*g);
                out.scale_counts[g.scale as usize - 1] += 1;
            }
        }
        out
    }

    /// Same geometry, new descriptor values (e.g. after projection).
    pub fn with_data(&self, dim: usize, data: Vec<f32>) -> Result<DescriptorSet> {
        if data.len() != dim * self.len() {
            return input(format!(
                "{} values for {} descriptors of dim {dim}",
                data.len(),
                self.len()
            ));
        }
        Ok(DescriptorSet {
            dim,
            data,
            geometry: self.geometry.clone(),
            scale_counts: self.scale_counts.clone(),
        })
    }

    /// Concatenates sets of equal dimension (used to gather training
    /// samples across images); ordering is by scale within each input only,
    /// so the result is a plain bag.
    pub fn concat_rows(sets: &[DescriptorSet]) -> (usize, Vec<f32>) {
        let dim = sets.first().map_or(0, |s| s.dim);
        let data = sets.iter().flat_map(|s| s.data.iter().copied()).collect();
        (dim, data)
    }
}

/// Dense extraction over an octave pyramid of `n` levels.
pub fn extract_all(net: &NetworkSpec, image: &Tensor, n: usize) -> Result<DescriptorSet> {
    let pyramid = ScalePyramid::new(net.standard_size(), n, ScaleStep::Octave)?;
    extract_pyramid(net, image, &pyramid, &mut MacCounter::default())
}

/// Resamples and extracts one level at a time so only one level's image
/// and activation map are alive at once.
pub fn extract_pyramid(
    net: &NetworkSpec,
    image: &Tensor,
    pyramid: &ScalePyramid,
    counter: &mut MacCounter,
) -> Result<DescriptorSet> {
    if pyramid.standard != net.standard_size() {
        return config(format!(
            "pyramid standard size {} != network standard size {}",
            pyramid.standard,
            net.standard_size()
        ));
    }
    let mut set = DescriptorSet::new(net.descriptor_dim(), pyramid.len());
    for (i, &edge) in pyramid.edges().iter().enumerate() {
        let level = resize_bilinear(image, edge, edge);
        set.push_fragment(dense_activations_counted(
            net,
            &level,
            (i + 1) as u32,
            counter,
        )?)?;
    }
    Ok(set)
}

const MAGIC: &[u8; 4] = b"MPPD";

/// `MPPD` container: magic, version, d, N, N per-scale counts, then per
/// entry d f32 values followed by scale:u32 cx:f32 cy:f32 edge:f32.
pub fn write_descriptors(set: &DescriptorSet, w: impl Write) -> Result<()> {
    let mut w = Writer::new(w);
    w.magic(MAGIC)?;
    w.usize(set.dim)?;
    w.usize(set.n_scales())?;
    for &c in &set.scale_counts {
        w.usize(c)?;
    }
    for (i, g) in set.geometry.iter().enumerate() {
        w.f32s(set.descriptor(i))?;
        w.u32(g.scale)?;
        w.f32(g.cx)?;
        w.f32(g.cy)?;
        w.f32(g.edge)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_descriptors(r: impl Read) -> Result<DescriptorSet> {
    let mut r = Reader::new(r, "descriptor");
    r.magic(MAGIC)?;
    let dim = r.usize()?;
    let n = r.usize()?;
    let counts: Vec<usize> = (0..n).map(|_| r.usize()).collect::<Result<_>>()?;
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity((total * dim).min(1 << 26));
    let mut geometry = Vec::with_capacity(total.min(1 << 20));
    for _ in 0..total {
        data.extend(r.f32s(dim)?);
        geometry.push(PatchGeometry {
            scale: r.u32()?,
            cx: r.f32()?,
            cy: r.f32()?,
            edge: r.f32()?,
        });
    }
    r.end()?;
    let set = DescriptorSet::from_parts(dim, n, data, geometry)?;
    if set.scale_counts != counts {
        return Err(crate::Error::Format {
            what: "descriptor",
            msg: "per-scale counts disagree with entries".into(),
        });
    }
    Ok(set)
}

pub fn save_descriptors(set: &DescriptorSet, path: &Path) -> Result<()> {
    write_descriptors(set, BufWriter::new(File::create(path)?))
}

pub fn load_descriptors(path: &Path) -> Result<DescriptorSet> {
    read_descriptors(BufReader::new(File::open(path)?))
}
