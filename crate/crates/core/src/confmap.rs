//! Per-patch confidence maps: every descriptor is scored on its own and its
//! score is spread over the grid cells its receptive field covers.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::convnet::PatchGeometry;
use crate::error::{input, Result};
use crate::fisher::{l2_normalize_slice, power_normalize_slice};
use crate::gmm::GmmModel;
use crate::image::encode_pgm;
use crate::pooling::{PooledRepresentation, Strategy, POWER_ALPHA};
use crate::pyramid::DescriptorSet;
use crate::svm::LinearModel;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub class: String,
    pub height: usize,
    pub width: usize,
    /// Mean contribution per cell; `None` where nothing landed.
    pub cells: Vec<Option<f64>>,
    pub counts: Vec<u32>,
}

impl ConfidenceMap {
    pub fn at(&self, r: usize, c: usize) -> Option<f64> {
        self.cells[r * self.width + c]
    }

    /// Min and max over cells holding data.
    pub fn range(&self) -> Option<(f64, f64)> {
        let mut it = self.cells.iter().flatten();
        let first = *it.next()?;
        Some(it.fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))))
    }

    /// Row-major position of the largest valid cell (first one on ties).
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in self.cells.iter().enumerate() {
            if let Some(v) = *v {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        best.map(|(i, _)| (i / self.width, i % self.width))
    }

    pub fn nodata_cells(&self) -> Vec<(usize, usize)> {
        (0..self.cells.len())
            .filter(|&i| self.cells[i].is_none())
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }
}

/// Improved Fisher vector of a single descriptor, tagged as `Mpp`.
pub fn patch_representation(model: &GmmModel, descriptor: &[f32]) -> Result<PooledRepresentation> {
    if descriptor.len() != model.d() {
        return input(format!(
            "descriptor dim {} != gmm dim {}",
            descriptor.len(),
            model.d()
        ));
    }
    let mut payload = crate::fisher::encode_fv(model, descriptor)?.into_vec();
    power_normalize_slice(&mut payload, POWER_ALPHA);
    let zero = !l2_normalize_slice(&mut payload);
    Ok(PooledRepresentation {
        strategy: Strategy::Mpp,
        k: model.k(),
        d: model.d(),
        payload,
        scales: Vec::new(),
        scale_counts: vec![1],
        power_normalized: true,
        zero,
        zero_blocks: Vec::new(),
    })
}

/// Grid cells whose centers fall inside the patch box; if none does, the
/// cell holding the patch center.
pub fn covered_cells(g: &PatchGeometry, height: usize, width: usize) -> Vec<(usize, usize)> {
    let (x0, x1, y0, y1) = g.bounds();
    let mut out = Vec::new();
    for r in 0..height {
        let cy = (r as f64 + 0.5) / height as f64;
        if cy < y0 || cy >= y1 {
            continue;
        }
        for c in 0..width {
            let cx = (c as f64 + 0.5) / width as f64;
            if cx >= x0 && cx < x1 {
                out.push((r, c));
            }
        }
    }
    if out.is_empty() {
        let r = ((f64::from(g.cy) * height as f64) as usize).min(height - 1);
        let c = ((f64::from(g.cx) * width as f64) as usize).min(width - 1);
        out.push((r, c));
    }
    out
}

/// Scores every descriptor of `set` (already in the GMM's space) for one
/// class and averages the scores per cell.
pub fn build_map(
    set: &DescriptorSet,
    gmm: &GmmModel,
    svm: &LinearModel,
    class: &str,
    grid: (usize, usize),
) -> Result<ConfidenceMap> {
    let (height, width) = grid;
    if height == 0 || width == 0 {
        return input(format!("grid {height}x{width} is empty"));
    }
    let Some(ci) = svm.class_index(class) else {
        return input(format!("unknown class `{class}`"));
    };
    if !matches!(svm.strategy(), Strategy::Mpp | Strategy::Nfk)
        || svm.dim() != 2 * gmm.k() * gmm.d()
    {
        return input(format!(
            "confidence maps need a `mpp` or `nfk` model of length {}, got `{}` of length {}",
            2 * gmm.k() * gmm.d(),
            svm.strategy(),
            svm.dim()
        ));
    }
    let scores: Vec<f64> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            patch_representation(gmm, set.descriptor(i)).map(|r| svm.score_class(ci, &r.payload))
        })
        .collect::<Result<_>>()?;
    let mut contrib: Vec<Vec<f64>> = vec![Vec::new(); height * width];
    for (g, &s) in set.geometry().iter().zip(&scores) {
        for (r, c) in covered_cells(g, height, width) {
            contrib[r * width + c].push(s);
        }
    }
    let mut cells = Vec::with_capacity(height * width);
    let mut counts = Vec::with_capacity(height * width);
    for mut v in contrib {
        counts.push(v.len() as u32);
        if v.is_empty() {
            cells.push(None);
        } else {
            v.sort_by(f64::total_cmp);
            cells.push(Some(v.iter().sum::<f64>() / v.len() as f64));
        }
    }
    Ok(ConfidenceMap {
        class: class.to_string(),
        height,
        width,
        cells,
        counts,
    })
}

/// 8-bit pixels after min-max scaling over valid cells. A constant map
/// renders as 255; cells without data render as 0.
pub fn render(map: &ConfidenceMap) -> Vec<u8> {
    let Some((lo, hi)) = map.range() else {
        return vec![0; map.cells.len()];
    };
    map.cells
        .iter()
        .map(|v| match *v {
            None => 0,
            Some(_) if hi == lo => 255,
            Some(v) => (255.0 * (v - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8,
        })
        .collect()
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".nodata");
    PathBuf::from(s)
}

/// Writes a binary PGM plus `<path>.nodata` listing empty cells as
/// `row col` lines.
pub fn export_map(map: &ConfidenceMap, path: &Path) -> Result<()> {
    let bytes = encode_pgm(map.width, map.height, &render(map))?;
    std::fs::write(path, bytes)?;
    let mut side = String::new();
    for (r, c) in map.nodata_cells() {
        side.push_str(&format!("{r} {c}\n"));
    }
    std::fs::write(sidecar_path(path), side)?;
    Ok(())
}
