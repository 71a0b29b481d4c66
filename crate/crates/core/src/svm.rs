//! One-vs-rest linear SVMs minimizing `(lambda/2)|w|^2 + mean hinge loss`
//! with an unregularized bias.
//!
//! Each binary problem is solved exactly in the dual (box `0 <= a <= C` with
//! `C = 1/(lambda n)`, equality `y.a = 0`) by SMO with second-order working
//! set selection over a shared linear Gram matrix.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::error::{config, input, Error, Result};
use crate::pooling::{PooledRepresentation, Strategy};

pub const LAMBDA_GRID: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    /// `None` selects lambda by cross-validation over [`LAMBDA_GRID`].
    pub lambda: Option<f64>,
    pub seed: u64,
    /// Stop when the maximal KKT violation drops below this.
    pub tol: f64,
    /// Pair updates per class before giving up, as a multiple of `n`.
    pub max_epochs: usize,
    pub cv_folds: usize,
}

impl SvmConfig {
    pub fn new(lambda: Option<f64>, seed: u64) -> Self {
        Self {
            lambda,
            seed,
            tol: 1e-9,
            max_epochs: 2_000,
            cv_folds: 3,
        }
    }
}

/// Per-class optimization record. One epoch is `n` pair updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassTrace {
    pub epochs: usize,
    pub iterations: usize,
    /// Primal objective at the end of every epoch, plus the final value.
    pub objective: Vec<f64>,
    pub final_objective: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    classes: Vec<String>,
    strategy: Strategy,
    dim: usize,
    lambda: f64,
    /// `n_classes × dim`, row per class.
    weights: Vec<f64>,
    biases: Vec<f64>,
    traces: Vec<ClassTrace>,
}

impl LinearModel {
    pub fn new(
        classes: Vec<String>,
        strategy: Strategy,
        lambda: f64,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        let n = classes.len();
        if n == 0 || biases.len() != n || !weights.len().is_multiple_of(n) {
            return input(format!(
                "{} classes with {} weights and {} biases",
                n,
                weights.len(),
                biases.len()
            ));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::Training("non-finite svm parameter".into()));
        }
        let dim = weights.len() / n;
        let traces = vec![ClassTrace::default(); n];
        Ok(Self {
            classes,
            strategy,
            dim,
            lambda,
            weights,
            biases,
            traces,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn weights(&self, c: usize) -> &[f64] {
        &self.weights[c * self.dim..(c + 1) * self.dim]
    }

    pub fn bias(&self, c: usize) -> f64 {
        self.biases[c]
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn traces(&self) -> &[ClassTrace] {
        &self.traces
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Multiplies every weight and bias by `c`.
    pub fn scale(&mut self, c: f64) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .for_each(|w| *w *= c);
    }

    /// `w_c . x + b_c` for every class.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_classes())
            .map(|c| self.score_class(c, x))
            .collect()
    }

    pub fn score_class(&self, c: usize, x: &[f64]) -> f64 {
        dot(self.weights(c), x) + self.biases[c]
    }

    /// Checks length and pooling strategy before scoring.
    pub fn score_rep(&self, rep: &PooledRepresentation) -> Result<Vec<f64>> {
        self.check_rep(rep)?;
        Ok(self.score(&rep.payload))
    }

    pub fn check_rep(&self, rep: &PooledRepresentation) -> Result<()> {
        if rep.strategy != self.strategy {
            return input(format!(
                "model trained on `{}` vectors, got `{}`",
                self.strategy, rep.strategy
            ));
        }
        if rep.len() != self.dim {
            return input(format!(
                "model dim {} != representation length {}",
                self.dim,
                rep.len()
            ));
        }
        Ok(())
    }

    /// Index of the highest score; ties go to the lower class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.score(x))
    }
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric linear-kernel matrix of the training rows.
#[derive(Debug, Clone)]
pub struct Gram {
    n: usize,
    k: Vec<f64>,
}

impl Gram {
    pub fn new(rows: &[f64], dim: usize) -> Self {
        let n = rows.len().checked_div(dim).unwrap_or(0);
        let row = |i: usize| &rows[i * dim..(i + 1) * dim];
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (i..n).map(|j| dot(row(i), row(j))).collect())
            .collect();
        let mut k = vec![0.0; n * n];
        for (i, r) in upper.iter().enumerate() {
            for (o, &v) in r.iter().enumerate() {
                k[i * n + i + o] = v;
                k[(i + o) * n + i] = v;
            }
        }
        Self { n, k }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.n + j]
    }

    pub fn subset(&self, idx: &[usize]) -> Gram {
        let n = idx.len();
        let mut k = Vec::with_capacity(n * n);
        for &i in idx {
            k.extend(idx.iter().map(|&j| self.at(i, j)));
        }
        Gram { n, k }
    }
}

struct BinarySolution {
    alpha: Vec<f64>,
    rho: f64,
    trace: ClassTrace,
}

const TAU: f64 = 1e-12;

fn solve_binary(gram: &Gram, y: &[f64], lambda: f64, cfg: &SvmConfig, seed: u64) -> BinarySolution {
    let n = gram.len();
    let c = 1.0 / (lambda * n as f64);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let q = |i: usize, j: usize| y[i] * y[j] * gram.at(i, j);
    let max_iter = cfg.max_epochs.saturating_mul(n.max(1));
    let mut trace = ClassTrace::default();
    let mut iter = 0;
    loop {
        let up = |t: usize| (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
        let low = |t: usize| (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for &t in &order {
            if up(t) && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        if i != usize::MAX {
            for &t in &order {
                if !low(t) {
                    continue;
                }
                let v = -y[t] * grad[t];
                gmin = gmin.min(v);
                let b = gmax - v;
                if b > 0.0 {
                    let a = gram.at(i, i) + gram.at(t, t) - 2.0 * gram.at(i, t);
                    let obj = -(b * b) / if a > 0.0 { a } else { TAU };
                    if obj < best {
                        best = obj;
                        j = t;
                    }
                }
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < cfg.tol {
            trace.converged = true;
            break;
        }
        if iter >= max_iter {
            log::debug!(
                "svm solver stopped after {iter} updates with violation {:e}",
                gmax - gmin
            );
            break;
        }
        let (ai, aj) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for (t, g) in grad.iter_mut().enumerate() {
            *g += q(t, i) * di + q(t, j) * dj;
        }
        iter += 1;
        if iter % n == 0 {
            trace.objective.push(primal(&alpha, &grad, y, c, lambda));
        }
    }
    let rho = compute_rho(&alpha, &grad, y, c);
    let fin = primal_with_rho(&alpha, &grad, y, lambda, rho);
    trace.objective.push(fin);
    trace.final_objective = fin;
    trace.iterations = iter;
    trace.epochs = iter.div_ceil(n.max(1));
    BinarySolution { alpha, rho, trace }
}

fn compute_rho(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum, mut nfree) = (0.0, 0usize);
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            sum += yg;
            nfree += 1;
        }
    }
    if nfree > 0 {
        sum / nfree as f64
    } else if ub.is_finite() && lb.is_finite() {
        (ub + lb) / 2.0
    } else if ub.is_finite() {
        ub
    } else if lb.is_finite() {
        lb
    } else {
        0.0
    }
}

/// `(lambda/2)|w|^2 + mean hinge` using `y_i w.x_i = G_i + 1`.
fn primal_with_rho(alpha: &[f64], grad: &[f64], y: &[f64], lambda: f64, rho: f64) -> f64 {
    let n = alpha.len() as f64;
    let w2: f64 = alpha.iter().zip(grad).map(|(a, g)| a * (g + 1.0)).sum();
    let hinge: f64 = grad
        .iter()
        .zip(y)
        .map(|(g, yi)| (yi * rho - g).max(0.0))
        .sum();
    lambda / 2.0 * w2 + hinge / n
}

fn primal(alpha: &[f64], grad: &[f64], y: &[f64], c: f64, lambda: f64) -> f64 {
    primal_with_rho(alpha, grad, y, lambda, compute_rho(alpha, grad, y, c))
}

/// Trains one binary problem per class on flat rows (`n × dim`). `labels[i]`
/// lists the classes of sample `i`.
pub fn train_rows(
    rows: &[f64],
    dim: usize,
    labels: &[Vec<usize>],
    classes: &[String],
    strategy: Strategy,
    cfg: &SvmConfig,
) -> Result<LinearModel> {
    let n = labels.len();
    if rows.len() != n * dim {
        return input(format!(
            "{} values for {n} samples of dim {dim}",
            rows.len()
        ));
    }
    check_labels(labels, classes)?;
    let gram = Gram::new(rows, dim);
    let lambda = match cfg.lambda {
        Some(l) if l > 0.0 && l.is_finite() => l,
        Some(l) => return config(format!("lambda must be positive, got {l}")),
        None => select_lambda(&gram, labels, classes.len(), cfg)?,
    };
    let (weights, biases, traces) = fit_all(&gram, rows, dim, labels, classes.len(), lambda, cfg);
    let mut model = LinearModel::new(classes.to_vec(), strategy, lambda, weights, biases)?;
    model.traces = traces;
    Ok(model)
}

fn check_labels(labels: &[Vec<usize>], classes: &[String]) -> Result<()> {
    if classes.len() < 2 {
        return input("need at least two classes");
    }
    let mut seen = vec![false; classes.len()];
    for l in labels {
        for &c in l {
            if c >= classes.len() {
                return input(format!("label {c} outside the class table"));
            }
            seen[c] = true;
        }
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return input("training data covers a single class");
    }
    if let Some(c) = seen.iter().position(|&s| !s) {
        return input(format!("class `{}` has no training examples", classes[c]));
    }
    Ok(())
}

type Fitted = (Vec<f64>, Vec<f64>, Vec<ClassTrace>);

fn fit_all(
    gram: &Gram,
    rows: &[f64],
    dim: usize,
    labels: &[Vec<usize>],
    n_classes: usize,
    lambda: f64,
    cfg: &SvmConfig,
) -> Fitted {
    let per: Vec<(Vec<f64>, f64, ClassTrace)> = (0..n_classes)
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = labels
                .iter()
                .map(|l| if l.contains(&c) { 1.0 } else { -1.0 })
                .collect();
            let sol = solve_binary(gram, &y, lambda, cfg, cfg.seed.wrapping_add(c as u64));
            let mut w = vec![0.0; dim];
            for (i, (&a, &yi)) in sol.alpha.iter().zip(&y).enumerate() {
                if a != 0.0 {
                    let r = &rows[i * dim..(i + 1) * dim];
                    w.iter_mut().zip(r).for_each(|(wj, xj)| *wj += a * yi * xj);
                }
            }
            // Stored parameters are f32; round now so reloaded models score identically.
            w.iter_mut().for_each(|v| *v = f64::from(*v as f32));
            (w, f64::from(-sol.rho as f32), sol.trace)
        })
        .collect();
    let mut weights = Vec::with_capacity(n_classes * dim);
    let mut biases = Vec::with_capacity(n_classes);
    let mut traces = Vec::with_capacity(n_classes);
    for (w, b, t) in per {
        weights.extend(w);
        biases.push(b);
        traces.push(t);
    }
    (weights, biases, traces)
}

/// K-fold top-1 accuracy for each grid value; ties go to the larger lambda.
pub fn cv_scores(
    gram: &Gram,
    labels: &[Vec<usize>],
    n_classes: usize,
    cfg: &SvmConfig,
) -> Vec<(f64, f64)> {
    let n = labels.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_cf01d));
    let folds = cfg.cv_folds.max(2);
    LAMBDA_GRID
        .iter()
        .map(|&lambda| {
            let mut correct = 0usize;
            let mut total = 0usize;
            for f in 0..folds {
                let test: Vec<usize> = perm
                    .iter()
                    .enumerate()
                    .filter(|(p, _)| p % folds == f)
                    .map(|(_, &i)| i)
                    .collect();
                let train: Vec<usize> = perm
                    .iter()
                    .enumerate()
                    .filter(|(p, _)| p % folds != f)
                    .map(|(_, &i)| i)
                    .collect();
                if train.is_empty() || test.is_empty() {
                    continue;
                }
                let sub = gram.subset(&train);
                let scores: Vec<Vec<f64>> = (0..n_classes)
                    .into_par_iter()
                    .map(|c| {
                        let y: Vec<f64> = train
                            .iter()
                            .map(|&i| if labels[i].contains(&c) { 1.0 } else { -1.0 })
                            .collect();
                        let sol =
                            solve_binary(&sub, &y, lambda, cfg, cfg.seed.wrapping_add(c as u64));
                        test.iter()
                            .map(|&t| {
                                let s: f64 = train
                                    .iter()
                                    .zip(&sol.alpha)
                                    .zip(&y)
                                    .map(|((&i, &a), &yi)| a * yi * gram.at(i, t))
                                    .sum();
                                s - sol.rho
                            })
                            .collect()
                    })
                    .collect();
                for (ti, &t) in test.iter().enumerate() {
                    let s: Vec<f64> = (0..n_classes).map(|c| scores[c][ti]).collect();
                    if labels[t].contains(&argmax(&s)) {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            (
                lambda,
                if total == 0 {
                    0.0
                } else {
                    correct as f64 / total as f64
                },
            )
        })
        .collect()
}

fn select_lambda(
    gram: &Gram,
    labels: &[Vec<usize>],
    n_classes: usize,
    cfg: &SvmConfig,
) -> Result<f64> {
    let scores = cv_scores(gram, labels, n_classes, cfg);
    let mut best = scores[0];
    for &(l, a) in &scores[1..] {
        if a >= best.1 {
            best = (l, a);
        }
    }
    log::info!(
        "lambda {:e} selected by cross-validation (accuracy {:.4})",
        best.0,
        best.1
    );
    Ok(best.0)
}

/// Trains over pooled representations with single labels.
pub fn train_ovr(
    reps: &[PooledRepresentation],
    labels: &[usize],
    classes: &[String],
    cfg: &SvmConfig,
) -> Result<LinearModel> {
    let sets: Vec<Vec<usize>> = labels.iter().map(|&l| vec![l]).collect();
    train_ovr_multi(reps, &sets, classes, cfg)
}

pub fn train_ovr_multi(
    reps: &[PooledRepresentation],
    labels: &[Vec<usize>],
    classes: &[String],
    cfg: &SvmConfig,
) -> Result<LinearModel> {
    let Some(first) = reps.first() else {
        return input("no training representations");
    };
    if reps.len() != labels.len() {
        return input(format!(
            "{} representations but {} labels",
            reps.len(),
            labels.len()
        ));
    }
    let (strategy, dim) = (first.strategy, first.len());
    let mut rows = Vec::with_capacity(reps.len() * dim);
    for r in reps {
        if r.strategy != strategy {
            return input(format!(
                "mixed pooling strategies `{strategy}` and `{}`",
                r.strategy
            ));
        }
        if r.len() != dim {
            return input(format!(
                "representation lengths {dim} and {} differ",
                r.len()
            ));
        }
        rows.extend_from_slice(&r.payload);
    }
    train_rows(&rows, dim, labels, classes, strategy, cfg)
}

const MAGIC: &[u8; 4] = b"MPPS";

/// `MPPS`: magic, version, classes, dim, strategy tag, lambda, class names,
/// then per class epochs, final objective, f32 weights and f32 bias.
pub fn write_svm(model: &LinearModel, w: impl Write) -> Result<()> {
    let mut w = Writer::new(w);
    w.magic(MAGIC)?;
    w.usize(model.n_classes())?;
    w.usize(model.dim)?;
    w.u8(model.strategy.tag())?;
    w.f64(model.lambda)?;
    for c in &model.classes {
        w.str(c)?;
    }
    for c in 0..model.n_classes() {
        w.usize(model.traces[c].epochs)?;
        w.f64(model.traces[c].final_objective)?;
        w.f64s_as_f32(model.weights(c))?;
        w.f32(model.biases[c] as f32)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_svm(r: impl Read) -> Result<LinearModel> {
    let mut r = Reader::new(r, "svm model");
    r.magic(MAGIC)?;
    let n = r.usize()?;
    let dim = r.usize()?;
    let tag = r.u8()?;
    let strategy = match Strategy::from_tag(tag) {
        Some(s) => s,
        None => return r.err(format!("unknown strategy tag {tag}")),
    };
    let lambda = r.f64()?;
    let classes = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let mut weights = Vec::with_capacity(n * dim);
    let mut biases = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for _ in 0..n {
        let epochs = r.usize()?;
        let fin = r.f64()?;
        weights.extend(r.f32s_as_f64(dim)?);
        biases.push(f64::from(r.f32()?));
        traces.push(ClassTrace {
            epochs,
            final_objective: fin,
            converged: true,
            ..Default::default()
        });
    }
    r.end()?;
    let mut model = LinearModel::new(classes, strategy, lambda, weights, biases)?;
    model.traces = traces;
    Ok(model)
}

pub fn save_svm(model: &LinearModel, path: &Path) -> Result<()> {
    write_svm(model, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_svm(path: &Path) -> Result<LinearModel> {
    read_svm(std::io::BufReader::new(std::fs::File::open(path)?))
}
