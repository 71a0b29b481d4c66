//! Diagonal-covariance Gaussian mixtures trained by EM.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::error::{input, Error, Result};
use crate::pyramid::DescriptorSet;
use crate::reduce::{add_into, tree_reduce};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `K` components over `d` dimensions: weights, means and per-dimension
/// standard deviations, all in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    k: usize,
    d: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    sigmas: Vec<f64>,
    log_norm: Vec<f64>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0
            || !means.len().is_multiple_of(k)
            || means.len() != sigmas.len()
            || means.is_empty()
        {
            return input(format!(
                "gmm shapes: {k} weights, {} means, {} sigmas",
                means.len(),
                sigmas.len()
            ));
        }
        let d = means.len() / k;
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w.is_nan() || w <= 0.0) {
            return input(format!(
                "gmm weights must be positive and sum to 1 (sum {total})"
            ));
        }
        if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || means.iter().any(|m| !m.is_finite())
        {
            return input("gmm sigmas must be positive and all parameters finite");
        }
        let log_norm = (0..k)
            .map(|c| {
                weights[c].ln()
                    - sigmas[c * d..(c + 1) * d]
                        .iter()
                        .map(|s| s.ln())
                        .sum::<f64>()
                    - 0.5 * d as f64 * LN_2PI
            })
            .collect();
        Ok(Self {
            k,
            d,
            weights,
            means,
            sigmas,
            log_norm,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.d..(c + 1) * self.d]
    }

    pub fn sigma(&self, c: usize) -> &[f64] {
        &self.sigmas[c * self.d..(c + 1) * self.d]
    }

    /// `ln(w_c) + ln N(x; mu_c, diag sigma_c^2)` for every component.
    pub fn component_log_densities(&self, x: &[f32], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mu = self.mean(c);
            let sd = self.sigma(c);
            let mut q = 0.0;
            for j in 0..self.d {
                let z = (f64::from(x[j]) - mu[j]) / sd[j];
                q += z * z;
            }
            *o = self.log_norm[c] - 0.5 * q;
        }
    }

    /// Fills `gamma` with normalized responsibilities and returns `ln p(x)`.
    pub fn posteriors_into(&self, x: &[f32], gamma: &mut [f64]) -> f64 {
        self.component_log_densities(x, gamma);
        let m = gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for g in gamma.iter_mut() {
            *g = (*g - m).exp();
            s += *g;
        }
        gamma.iter_mut().for_each(|g| *g /= s);
        m + s.ln()
    }

    pub fn log_likelihood(&self, x: &[f32]) -> f64 {
        let mut g = vec![0.0; self.k];
        self.posteriors_into(x, &mut g)
    }
}

pub fn posteriors(model: &GmmModel, x: &[f32]) -> Result<Vec<f64>> {
    if x.len() != model.d {
        return input(format!("descriptor dim {} != gmm dim {}", x.len(), model.d));
    }
    let mut g = vec![0.0; model.k];
    model.posteriors_into(x, &mut g);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop when the mean log-likelihood improves by less than this
    /// fraction.
    pub tol: f64,
    pub kmeans_iters: usize,
    pub weight_floor: f64,
    /// Variance floor as a fraction of the mean per-dimension data variance.
    pub var_floor_rel: f64,
    pub min_samples_per_component: usize,
    pub max_reseeds: usize,
}

impl GmmConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 200,
            tol: 1e-5,
            kmeans_iters: 10,
            weight_floor: 1e-6,
            var_floor_rel: 1e-8,
            min_samples_per_component: 10,
            max_reseeds: 3 * k.max(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood of the model entering each iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeds: usize,
}

pub fn fit_gmm(samples: &DescriptorSet, k: usize, seed: u64) -> Result<GmmFit> {
    fit_gmm_rows(samples.data(), samples.dim(), &GmmConfig::new(k, seed))
}

struct Stats {
    s0: Vec<f64>,
    /// sum of gamma * (x - mu_old)
    s1: Vec<f64>,
    /// sum of gamma * (x - mu_old)^2
    s2: Vec<f64>,
    ll: f64,
    /// lowest per-sample log-likelihood and its row
    worst: (f64, usize),
}

fn e_step(model: &GmmModel, data: &[f32]) -> Stats {
    let (k, d) = (model.k, model.d);
    let n = data.len() / d;
    tree_reduce(
        n,
        |rows| {
            let mut st = Stats {
                s0: vec![0.0; k],
                s1: vec![0.0; k * d],
                s2: vec![0.0; k * d],
                ll: 0.0,
                worst: (f64::INFINITY, 0),
            };
            let mut g = vec![0.0; k];
            for i in rows {
                let x = &data[i * d..(i + 1) * d];
                let ll = model.posteriors_into(x, &mut g);
                st.ll += ll;
                if ll < st.worst.0 {
                    st.worst = (ll, i);
                }
                for (c, &gc) in g.iter().enumerate() {
                    if gc == 0.0 {
                        continue;
                    }
                    st.s0[c] += gc;
                    let mu = model.mean(c);
                    let s1 = &mut st.s1[c * d..(c + 1) * d];
                    let s2 = &mut st.s2[c * d..(c + 1) * d];
                    for j in 0..d {
                        let dx = f64::from(x[j]) - mu[j];
                        s1[j] += gc * dx;
                        s2[j] += gc * dx * dx;
                    }
                }
            }
            st
        },
        |a, b| Stats {
            s0: add_into(a.s0, b.s0),
            s1: add_into(a.s1, b.s1),
            s2: add_into(a.s2, b.s2),
            ll: a.ll + b.ll,
            worst: if b.worst.0 < a.worst.0 {
                b.worst
            } else {
                a.worst
            },
        },
    )
    .expect("non-empty data")
}

fn blend_weights(mass: &[f64], n: f64, floor: f64) -> Vec<f64> {
    let k = mass.len();
    if k == 1 {
        return vec![1.0];
    }
    let free = 1.0 - k as f64 * floor;
    mass.iter().map(|m| floor + free * m / n).collect()
}

struct DataStats {
    var: Vec<f64>,
    var_floor: f64,
}

fn data_stats(data: &[f32], d: usize, rel: f64) -> DataStats {
    let n = (data.len() / d) as f64;
    let (s, s2) = tree_reduce(
        data.len() / d,
        |rows| {
            let mut s = vec![0.0; d];
            let mut s2 = vec![0.0; d];
            for i in rows {
                for j in 0..d {
                    let v = f64::from(data[i * d + j]);
                    s[j] += v;
                    s2[j] += v * v;
                }
            }
            (s, s2)
        },
        |a, b| (add_into(a.0, b.0), add_into(a.1, b.1)),
    )
    .expect("non-empty data");
    let var: Vec<f64> = s
        .iter()
        .zip(&s2)
        .map(|(a, b)| (b / n - (a / n).powi(2)).max(0.0))
        .collect();
    let mean_var = var.iter().sum::<f64>() / d as f64;
    let var_floor = (rel * mean_var).max(f64::MIN_POSITIVE);
    DataStats { var, var_floor }
}

/// Starved component and the row to reseed it from.
type Starved = Option<(usize, usize)>;

/// One EM update. Returns the updated model, the mean log-likelihood of
/// the input model, and the index of a starved component (if any) with the
/// row to reseed it from.
fn em_update(
    model: &GmmModel,
    data: &[f32],
    cfg: &GmmConfig,
    ds: &DataStats,
) -> Result<(GmmModel, f64, Starved)> {
    let (k, d) = (model.k, model.d);
    let n = (data.len() / d) as f64;
    let st = e_step(model, data);
    let mut means = model.means.clone();
    let mut sigmas = vec![0.0; k * d];
    let mut starved = None;
    for c in 0..k {
        let m = st.s0[c];
        if m < cfg.weight_floor * n || m <= 0.0 {
            starved.get_or_insert((c, st.worst.1));
            sigmas[c * d..(c + 1) * d].copy_from_slice(model.sigma(c));
            continue;
        }
        for j in 0..d {
            let delta = st.s1[c * d + j] / m;
            means[c * d + j] += delta;
            let var = (st.s2[c * d + j] / m - delta * delta).max(ds.var_floor);
            sigmas[c * d + j] = var.sqrt();
        }
    }
    let weights = blend_weights(&st.s0, n, cfg.weight_floor);
    Ok((GmmModel::new(weights, means, sigmas)?, st.ll / n, starved))
}

/// Single EM step from `model` on flat samples (exposed for fixed-point
/// checks).
pub fn em_step(model: &GmmModel, data: &[f32], cfg: &GmmConfig) -> Result<GmmModel> {
    let ds = data_stats(data, model.d, cfg.var_floor_rel);
    Ok(em_update(model, data, cfg, &ds)?.0)
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &m)| (f64::from(x) - m).powi(2))
        .sum()
}

fn nearest(x: &[f32], centroids: &[f64], d: usize) -> (usize, f64) {
    centroids
        .chunks_exact(d)
        .enumerate()
        .map(|(c, m)| (c, sq_dist(x, m)))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

/// k-means++ seeding followed by Lloyd iterations; returns centroids.
pub fn kmeans(data: &[f32], d: usize, k: usize, iters: usize, seed: u64) -> Vec<f64> {
    let n = data.len() / d;
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<f64> = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend(row(first).iter().map(|&v| f64::from(v)));
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(row(i), &centroids[..d]))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.extend(row(pick).iter().map(|&v| f64::from(v)));
        let newest = &centroids[c * d..(c + 1) * d];
        d2.par_iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = v.min(sq_dist(row(i), newest)));
    }
    for _ in 0..iters {
        let (sums, counts) = tree_reduce(
            n,
            |rows| {
                let mut sums = vec![0.0; k * d];
                let mut counts = vec![0.0; k];
                for i in rows {
                    let (c, _) = nearest(row(i), &centroids, d);
                    counts[c] += 1.0;
                    for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                        *s += f64::from(v);
                    }
                }
                (sums, counts)
            },
            |a, b| (add_into(a.0, b.0), add_into(a.1, b.1)),
        )
        .expect("non-empty data");
        for c in 0..k {
            if counts[c] > 0.0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c];
                }
            }
        }
    }
    centroids
}

fn init_from_kmeans(data: &[f32], d: usize, cfg: &GmmConfig, ds: &DataStats) -> Result<GmmModel> {
    let k = cfg.k;
    let n = data.len() / d;
    let means = kmeans(data, d, k, cfg.kmeans_iters, cfg.seed);
    let (counts, s2) = tree_reduce(
        n,
        |rows| {
            let mut counts = vec![0.0; k];
            let mut s2 = vec![0.0; k * d];
            for i in rows {
                let x = &data[i * d..(i + 1) * d];
                let (c, _) = nearest(x, &means, d);
                counts[c] += 1.0;
                for j in 0..d {
                    s2[c * d + j] += (f64::from(x[j]) - means[c * d + j]).powi(2);
                }
            }
            (counts, s2)
        },
        |a, b| (add_into(a.0, b.0), add_into(a.1, b.1)),
    )
    .expect("non-empty data");
    let mut sigmas = vec![0.0; k * d];
    for c in 0..k {
        for j in 0..d {
            let var = if counts[c] >= 2.0 {
                s2[c * d + j] / counts[c]
            } else {
                ds.var[j]
            };
            sigmas[c * d + j] = var.max(ds.var_floor).sqrt();
        }
    }
    GmmModel::new(
        blend_weights(&counts, n as f64, cfg.weight_floor),
        means,
        sigmas,
    )
}

/// EM on flat row-major samples.
pub fn fit_gmm_rows(data: &[f32], d: usize, cfg: &GmmConfig) -> Result<GmmFit> {
    if d == 0 || !data.len().is_multiple_of(d) {
        return input("sample buffer is not a whole number of rows");
    }
    let n = data.len() / d;
    if cfg.k == 0 {
        return input("gmm needs at least one component");
    }
    if n < cfg.min_samples_per_component * cfg.k {
        return input(format!(
            "{n} samples is fewer than {} per component for K={}",
            cfg.min_samples_per_component, cfg.k
        ));
    }
    let ds = data_stats(data, d, cfg.var_floor_rel);
    let mut model = init_from_kmeans(data, d, cfg, &ds)?;
    let mut lls = Vec::new();
    let mut reseeds = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let (next, ll, starved) = em_update(&model, data, cfg, &ds)?;
        iterations += 1;
        let prev = lls.last().copied();
        lls.push(ll);
        if let Some((c, row)) = starved {
            reseeds += 1;
            if reseeds > cfg.max_reseeds {
                return Err(Error::Training(format!(
                    "gmm component {c} keeps collapsing after {reseeds} reseeds"
                )));
            }
            log::debug!("gmm: reseeding component {c} from sample {row}");
            model = reseed(&next, c, &data[row * d..(row + 1) * d], &ds)?;
            continue;
        }
        if let Some(p) = prev {
            if (ll - p) / p.abs().max(f64::MIN_POSITIVE) < cfg.tol {
                converged = true;
                break;
            }
        }
        model = next;
    }
    Ok(GmmFit {
        model,
        log_likelihood: lls,
        iterations,
        converged,
        reseeds,
    })
}

fn reseed(model: &GmmModel, c: usize, x: &[f32], ds: &DataStats) -> Result<GmmModel> {
    let d = model.d;
    let mut means = model.means.clone();
    let mut sigmas = model.sigmas.clone();
    for j in 0..d {
        means[c * d + j] = f64::from(x[j]);
        sigmas[c * d + j] = ds.var[j].max(ds.var_floor).sqrt();
    }
    let mut weights = model.weights.clone();
    weights[c] = 1.0 / model.k as f64;
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= s);
    GmmModel::new(weights, means, sigmas)
}

const MAGIC: &[u8; 4] = b"MPPG";

/// `MPPG`: magic, version, K, d, then weights, means and sigmas as f64.
pub fn write_gmm(model: &GmmModel, w: impl Write) -> Result<()> {
    let mut w = Writer::new(w);
    w.magic(MAGIC)?;
    w.usize(model.k)?;
    w.usize(model.d)?;
    w.f64s(&model.weights)?;
    w.f64s(&model.means)?;
    w.f64s(&model.sigmas)?;
    w.finish()?;
    Ok(())
}

pub fn read_gmm(r: impl Read) -> Result<GmmModel> {
    let mut r = Reader::new(r, "gmm");
    r.magic(MAGIC)?;
    let k = r.usize()?;
    let d = r.usize()?;
    let weights = r.f64s(k)?;
    let means = r.f64s(k * d)?;
    let sigmas = r.f64s(k * d)?;
    r.end()?;
    GmmModel::new(weights, means, sigmas)
}

pub fn save_gmm(model: &GmmModel, path: &Path) -> Result<()> {
    write_gmm(model, BufWriter::new(File::create(path)?))
}

pub fn load_gmm(path: &Path) -> Result<GmmModel> {
    read_gmm(BufReader::new(File::open(path)?))
}
