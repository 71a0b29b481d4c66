//! Linear dimension reduction fitted on sampled descriptors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::error::{input, Result};
use crate::pyramid::DescriptorSet;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    d_in: usize,
    d_out: usize,
    mean: Vec<f64>,
    /// `d_out × d_in`, orthonormal rows sorted by decreasing variance.
    components: Vec<f64>,
    /// Variance along each kept row.
    variances: Vec<f64>,
    whiten: bool,
}

#[derive(Debug, Clone)]
pub struct PcaFit {
    pub model: PcaModel,
    /// All `d_in` covariance eigenvalues, descending.
    pub explained_variance: Vec<f64>,
    pub rank: usize,
    /// Set when the samples span fewer than `d_out` directions; the
    /// remaining rows are an arbitrary orthonormal completion.
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn new(
        mean: Vec<f64>,
        components: Vec<f64>,
        variances: Vec<f64>,
        whiten: bool,
    ) -> Result<Self> {
        let d_in = mean.len();
        let d_out = variances.len();
        if d_out > d_in || components.len() != d_in * d_out {
            return input(format!(
                "pca shapes: mean {d_in}, {d_out} variances, {} matrix entries",
                components.len()
            ));
        }
        Ok(Self {
            d_in,
            d_out,
            mean,
            components,
            variances,
            whiten,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.components[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn whiten(&self) -> bool {
        self.whiten
    }

    pub fn project_row(&self, x: &[f32], out: &mut [f32]) {
        let centered: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .map(|(&v, m)| f64::from(v) - m)
            .collect();
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc: f64 = self.row(i).iter().zip(&centered).map(|(a, b)| a * b).sum();
            if self.whiten {
                acc /= (self.variances[i] + WHITEN_EPS).sqrt();
            }
            *o = acc as f32;
        }
    }
}

const WHITEN_EPS: f64 = 1e-12;

/// Uniform sample of at most `max_rows` rows without replacement, kept in
/// their original order.
pub fn sample_rows(data: &[f32], dim: usize, max_rows: usize, seed: u64) -> Vec<f32> {
    let n = data.len() / dim;
    if n <= max_rows {
        return data.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, max_rows).into_vec();
    idx.sort_unstable();
    idx.iter()
        .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
        .collect()
}

pub fn fit_pca(samples: &DescriptorSet, d_out: usize) -> Result<PcaFit> {
    fit_pca_rows(samples.data(), samples.dim(), d_out, false)
}

/// Fits on flat row-major samples via the covariance eigendecomposition.
pub fn fit_pca_rows(data: &[f32], dim: usize, d_out: usize, whiten: bool) -> Result<PcaFit> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return input("sample buffer is not a whole number of rows");
    }
    let n = data.len() / dim;
    if d_out == 0 || d_out > dim {
        return input(format!("output dim {d_out} must be in 1..={dim}"));
    }
    if n < d_out {
        return input(format!("{n} samples cannot fit {d_out} components"));
    }
    let mut mean = vec![0.0f64; dim];
    for row in data.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    const CHUNK: usize = 1024;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for rows in data.chunks(CHUNK * dim) {
        let r = rows.len() / dim;
        let block = DMatrix::from_fn(r, dim, |i, j| f64::from(rows[i * dim + j]) - mean[j]);
        cov += block.tr_mul(&block);
    }
    cov /= (n.max(2) - 1) as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let explained: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let top = explained[0];
    let tol = top.max(f64::MIN_POSITIVE) * dim as f64 * 1e-12;
    let rank = explained.iter().filter(|&&v| v > tol).count();

    let mut components = Vec::with_capacity(d_out * dim);
    for &col in &order[..d_out] {
        let v = eig.eigenvectors.column(col);
        let pivot = (0..dim)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("dim > 0");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        components.extend(v.iter().map(|x| x * sign));
    }
    let rank_deficient = rank < d_out;
    if rank_deficient {
        log::warn!(
            "pca: samples have rank {rank} < {d_out}; trailing rows are an orthonormal completion"
        );
    }
    let model = PcaModel::new(mean, components, explained[..d_out].to_vec(), whiten)?;
    Ok(PcaFit {
        model,
        explained_variance: explained,
        rank,
        rank_deficient,
    })
}

/// Projects every descriptor; geometry and scale tags are carried over.
pub fn project(model: &PcaModel, set: &DescriptorSet) -> Result<DescriptorSet> {
    if set.dim() != model.d_in {
        return input(format!(
            "descriptor dim {} != pca input dim {}",
            set.dim(),
            model.d_in
        ));
    }
    let mut out = vec![0.0f32; set.len() * model.d_out];
    out.par_chunks_mut(model.d_out.max(1))
        .zip(set.data().par_chunks(model.d_in.max(1)))
        .for_each(|(o, x)| model.project_row(x, o));
    set.with_data(model.d_out, out)
}

const MAGIC: &[u8; 4] = b"MPPP";

/// `MPPP`: magic, version, d_in, d_out, flags (bit 0 = whiten), mean
/// f32[d_in], row-major matrix f32[d_out*d_in], variances f32[d_out].
pub fn write_pca(model: &PcaModel, w: impl Write) -> Result<()> {
    let mut w = Writer::new(w);
    w.magic(MAGIC)?;
    w.usize(model.d_in)?;
    w.usize(model.d_out)?;
    w.u32(u32::from(model.whiten))?;
    w.f64s_as_f32(&model.mean)?;
    w.f64s_as_f32(&model.components)?;
    w.f64s_as_f32(&model.variances)?;
    w.finish()?;
    Ok(())
}

pub fn read_pca(r: impl Read) -> Result<PcaModel> {
    let mut r = Reader::new(r, "pca");
    r.magic(MAGIC)?;
    let d_in = r.usize()?;
    let d_out = r.usize()?;
    let flags = r.u32()?;
    let mean = r.f32s_as_f64(d_in)?;
    let components = r.f32s_as_f64(d_in * d_out)?;
    let variances = r.f32s_as_f64(d_out)?;
    r.end()?;
    PcaModel::new(mean, components, variances, flags & 1 == 1)
}

pub fn save_pca(model: &PcaModel, path: &Path) -> Result<()> {
    write_pca(model, BufWriter::new(File::create(path)?))
}

pub fn load_pca(path: &Path) -> Result<PcaModel> {
    read_pca(BufReader::new(File::open(path)?))
}
