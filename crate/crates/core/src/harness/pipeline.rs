//! End-to-end stages with on-disk caching.
//!
//! Every stage writes its artifacts under the cache directory in a folder
//! named after a fingerprint of the settings it depends on, and every later
//! stage reads them back from disk. A rerun with the same settings reuses
//! the files and reproduces the same report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::dataset::{load_record, match_channels, DatasetManifest, Split};
use crate::convnet::{
    convert_fc_to_conv, dense_activations_counted, naive_activations, read_network, toy_network,
    MacCounter, NetworkSpec,
};
use crate::error::{config, Error, Result};
use crate::fisher::l2_normalize_slice;
use crate::gmm::{fit_gmm_rows, load_gmm, save_gmm, GmmConfig, GmmModel};
use crate::metrics::{average_precision_11pt, mean, top1_accuracy};
use crate::pca::{fit_pca_rows, load_pca, project, sample_rows, save_pca, PcaModel};
use crate::pooling::{load_pooled, pool, pool_ap, save_pooled, PooledRepresentation, Strategy};
use crate::pyramid::{
    extract_pyramid, load_descriptors, resize_bilinear, save_descriptors, DescriptorSet,
    ScalePyramid,
};
use crate::svm::{load_svm, save_svm, train_ovr_multi, LinearModel, SvmConfig};
use crate::tensor::Tensor;

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Network named by the config, with fully-connected layers converted.
pub fn load_net(cfg: &PipelineConfig) -> Result<NetworkSpec> {
    let net = if cfg.net == "toy" {
        toy_network(cfg.net_seed)
    } else {
        read_network(Path::new(&cfg.net))?
    };
    convert_fc_to_conv(&net)
}

pub fn pyramid_for(cfg: &PipelineConfig, net: &NetworkSpec) -> Result<ScalePyramid> {
    ScalePyramid::new(net.standard_size(), cfg.scales, cfg.scale_step)
}

/// Edge at which synthetic images are rendered: the largest pyramid level.
pub fn render_size(cfg: &PipelineConfig, net: &NetworkSpec) -> Result<usize> {
    Ok(*pyramid_for(cfg, net)?
        .edges()
        .last()
        .expect("at least one scale"))
}

/// Cache folders for one configuration.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    keys: BTreeMap<&'static str, u64>,
}

impl Workspace {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let file_hash = |spec: &str, h: u64| -> Result<u64> {
            let p = Path::new(spec);
            Ok(if p.is_file() {
                fnv1a(&std::fs::read(p)?, h)
            } else {
                h
            })
        };
        let text = |keys: &[&str], h: u64| {
            keys.iter().fold(h, |h, k| {
                fnv1a(
                    format!("{k}={};", cfg.get(k).unwrap_or_default()).as_bytes(),
                    h,
                )
            })
        };
        let mut h = text(
            &["net", "net_seed", "scales", "scale_step", "dataset"],
            FNV_OFFSET,
        );
        if cfg.net != "toy" {
            h = file_hash(&cfg.net, h)?;
        }
        if !cfg.dataset.starts_with("synth:") {
            h = file_hash(&cfg.dataset, h)?;
        }
        let mut keys = BTreeMap::new();
        keys.insert("extract", h);
        let h = text(
            &[
                "descriptor_l2",
                "pca_dim",
                "pca_whiten",
                "pca_samples",
                "seed",
            ],
            h,
        );
        keys.insert("fit-pca", h);
        let h = text(&["gmm_k", "gmm_samples", "gmm_max_iter"], h);
        keys.insert("fit-gmm", h);
        let h = text(&["pool"], h);
        keys.insert("encode", h);
        let h = text(&["svm_lambda"], h);
        keys.insert("train-svm", h);
        Ok(Self {
            root: cfg.resolved_cache_dir(),
            keys,
        })
    }

    pub fn stage_dir(&self, stage: &'static str) -> PathBuf {
        self.root.join(format!("{stage}-{:016x}", self.keys[stage]))
    }

    pub fn descriptor_path(&self, i: usize) -> PathBuf {
        self.stage_dir("extract").join(format!("{i:05}.mppd"))
    }

    pub fn extract_stats_path(&self) -> PathBuf {
        self.stage_dir("extract").join("stats.json")
    }

    pub fn pca_path(&self) -> PathBuf {
        self.stage_dir("fit-pca").join("pca.mppp")
    }

    pub fn gmm_path(&self) -> PathBuf {
        self.stage_dir("fit-gmm").join("gmm.mppg")
    }

    pub fn encoding_path(&self, i: usize) -> PathBuf {
        self.stage_dir("encode").join(format!("{i:05}.mppf"))
    }

    pub fn svm_path(&self) -> PathBuf {
        self.stage_dir("train-svm").join("svm.mpps")
    }

    pub fn report_path(&self) -> PathBuf {
        self.stage_dir("train-svm").join("report.json")
    }
}

fn require(stage: &'static str, path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { stage, path })
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

/// Multiply-accumulate totals of the extraction stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractStats {
    pub images: u64,
    pub descriptors: u64,
    pub macs: u64,
}

/// Dense multi-scale descriptors of one image.
pub fn extract_image(
    cfg: &PipelineConfig,
    net: &NetworkSpec,
    image: &Tensor,
    counter: &mut MacCounter,
) -> Result<DescriptorSet> {
    extract_pyramid(net, image, &pyramid_for(cfg, net)?, counter)
}

/// Extracts every record that has no cached descriptor file yet.
pub fn stage_extract(
    cfg: &PipelineConfig,
    ws: &Workspace,
    manifest: &DatasetManifest,
) -> Result<ExtractStats> {
    let stats_path = ws.extract_stats_path();
    if stats_path.is_file() {
        return Ok(serde_json::from_slice(&std::fs::read(&stats_path)?)?);
    }
    create_dir(&ws.stage_dir("extract"))?;
    let net = load_net(cfg)?;
    let size = render_size(cfg, &net)?;
    log::info!(
        "extracting {} images at {} scales",
        manifest.records.len(),
        cfg.scales
    );
    let per: Vec<(u64, u64)> = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let image = load_record(rec, net.input_channels(), size)?;
            let mut counter = MacCounter::default();
            let set = extract_image(cfg, &net, &image, &mut counter)?;
            save_descriptors(&set, &ws.descriptor_path(i))?;
            Ok((set.len() as u64, counter.macs))
        })
        .collect::<Result<_>>()?;
    let stats = ExtractStats {
        images: per.len() as u64,
        descriptors: per.iter().map(|p| p.0).sum(),
        macs: per.iter().map(|p| p.1).sum(),
    };
    std::fs::write(&stats_path, serde_json::to_vec_pretty(&stats)?)?;
    Ok(stats)
}

pub fn load_extracted(ws: &Workspace, i: usize) -> Result<DescriptorSet> {
    load_descriptors(&require("extract", ws.descriptor_path(i))?)
}

/// Optional per-descriptor l2 step applied to raw activations.
pub fn prenormalize(cfg: &PipelineConfig, set: DescriptorSet) -> Result<DescriptorSet> {
    if !cfg.descriptor_l2 {
        return Ok(set);
    }
    let d = set.dim();
    let mut data = set.data().to_vec();
    for row in data.chunks_mut(d.max(1)) {
        let mut v: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
        l2_normalize_slice(&mut v);
        row.iter_mut().zip(&v).for_each(|(r, &x)| *r = x as f32);
    }
    set.with_data(d, data)
}

fn gather(sets: &[DescriptorSet], scales: &[usize]) -> (usize, Vec<f32>) {
    let subsets: Vec<DescriptorSet> = sets.iter().map(|s| s.subset_scales(scales)).collect();
    DescriptorSet::concat_rows(&subsets)
}

/// PCA fitted on a seeded sample of the selected scales of `train`.
pub fn fit_pca_on(
    cfg: &PipelineConfig,
    train: &[DescriptorSet],
    scales: &[usize],
) -> Result<PcaModel> {
    let (dim, rows) = gather(train, scales);
    let sample = sample_rows(&rows, dim, cfg.pca_samples, cfg.seed);
    Ok(fit_pca_rows(&sample, dim, cfg.pca_dim, cfg.pca_whiten)?.model)
}

/// GMM fitted on a seeded sample of projected descriptors.
pub fn fit_gmm_on(
    cfg: &PipelineConfig,
    train: &[DescriptorSet],
    scales: &[usize],
) -> Result<GmmModel> {
    let (dim, rows) = gather(train, scales);
    let sample = sample_rows(&rows, dim, cfg.gmm_samples, cfg.seed.wrapping_add(1));
    let mut gc = GmmConfig::new(cfg.gmm_k, cfg.seed);
    gc.max_iter = cfg.gmm_max_iter;
    Ok(fit_gmm_rows(&sample, dim, &gc)?.model)
}

pub fn project_all(pca: &PcaModel, sets: &[DescriptorSet]) -> Result<Vec<DescriptorSet>> {
    sets.iter().map(|s| project(pca, s)).collect()
}

fn all_scales(cfg: &PipelineConfig) -> Vec<usize> {
    (1..=cfg.scales).collect()
}

fn train_indices(manifest: &DatasetManifest) -> Vec<usize> {
    (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split == Split::Train)
        .collect()
}

fn test_indices(manifest: &DatasetManifest) -> Vec<usize> {
    (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split == Split::Test)
        .collect()
}

fn load_train_raw(
    cfg: &PipelineConfig,
    ws: &Workspace,
    manifest: &DatasetManifest,
) -> Result<Vec<DescriptorSet>> {
    train_indices(manifest)
        .into_par_iter()
        .map(|i| prenormalize(cfg, load_extracted(ws, i)?))
        .collect()
}

pub fn stage_fit_pca(
    cfg: &PipelineConfig,
    ws: &Workspace,
    manifest: &DatasetManifest,
) -> Result<PcaModel> {
    let path = ws.pca_path();
    if !path.is_file() {
        let train = load_train_raw(cfg, ws, manifest)?;
        let pca = fit_pca_on(cfg, &train, &all_scales(cfg))?;
        create_dir(&ws.stage_dir("fit-pca"))?;
        save_pca(&pca, &path)?;
    }
    load_pca(&path)
}

pub fn stage_fit_gmm(
    cfg: &PipelineConfig,
    ws: &Workspace,
    manifest: &DatasetManifest,
) -> Result<GmmModel> {
    let path = ws.gmm_path();
    if !path.is_file() {
        let pca = load_pca(&require("fit-pca", ws.pca_path())?)?;
        let train = project_all(&pca, &load_train_raw(cfg, ws, manifest)?)?;
        let gmm = fit_gmm_on(cfg, &train, &all_scales(cfg))?;
        create_dir(&ws.stage_dir("fit-gmm"))?;
        save_gmm(&gmm, &path)?;
    }
    load_gmm(&path)
}

fn flip_horizontal(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.channels(), t.height(), t.width(), |c, y, x| {
        t.at(c, y, t.width() - 1 - x)
    })
}

/// Raw target-layer activations of five standard-size crops (corners and
/// center of the image resized to 5/4 of the standard edge) and their
/// horizontal mirrors.
pub fn ap_vectors(
    net: &NetworkSpec,
    image: &Tensor,
    counter: &mut MacCounter,
) -> Result<Vec<Vec<f32>>> {
    let std = net.standard_size();
    let big = (std * 5).div_ceil(4);
    let src = resize_bilinear(image, big, big);
    let m = (big - std) as isize;
    let origins = [(0, 0), (0, m), (m, 0), (m, m), (m / 2, m / 2)];
    let mut out = Vec::with_capacity(10);
    for (top, left) in origins {
        let crop = src.crop(top, left, std, std);
        for view in [flip_horizontal(&crop), crop] {
            let frag = dense_activations_counted(net, &view, 1, counter)?;
            out.push(frag.descriptor(0).to_vec());
        }
    }
    Ok(out)
}

/// Pooled representation of raw descriptors under the configured models.
pub fn represent(
    cfg: &PipelineConfig,
    pca: &PcaModel,
    gmm: &GmmModel,
    raw: DescriptorSet,
    mask: Option<&[usize]>,
) -> Result<PooledRepresentation> {
    let set = project(pca, &prenormalize(cfg, raw)?)?;
    pool(cfg.pool, gmm, &set, mask)
}

pub fn stage_encode(
    cfg: &PipelineConfig,
    ws: &Workspace,
    manifest: &DatasetManifest,
) -> Result<()> {
    let n = manifest.records.len();
    if (0..n).all(|i| ws.encoding_path(i).is_file()) {
        return Ok(());
    }
    create_dir(&ws.stage_dir("encode"))?;
    if cfg.pool == Strategy::Ap {
        let net = load_net(cfg)?;
        let size = render_size(cfg, &net)?;
        return manifest
            .records
            .par_iter()
            .enumerate()
            .try_for_each(|(i, rec)| {
                let image = load_record(rec, net.input_channels(), size)?;
                let rep = pool_ap(&ap_vectors(&net, &image, &mut MacCounter::default())?)?;
                save_pooled(&rep, &ws.encoding_path(i))
            });
    }
    let pca = load_pca(&require("fit-pca", ws.pca_path())?)?;
    let gmm = load_gmm(&require("fit-gmm", ws.gmm_path())?)?;
    (0..n).into_par_iter().try_for_each(|i| {
        let rep = represent(cfg, &pca, &gmm, load_extracted(ws, i)?, None)?;
        save_pooled(&rep, &ws.encoding_path(i))
    })
}

fn load_encodings(ws: &Workspace, idx: &[usize]) -> Result<Vec<PooledRepresentation>> {
    idx.par_iter()
        .map(|&i| load_pooled(&require("encode", ws.encoding_path(i))?))
        .collect()
}

fn labels_of(manifest: &DatasetManifest, idx: &[usize]) -> Vec<Vec<usize>> {
    idx.iter()
        .map(|&i| manifest.records[i].labels.clone())
        .collect()
}

pub fn stage_train_svm(
    cfg: &PipelineConfig,
    ws: &Workspace,
    manifest: &DatasetManifest,
) -> Result<LinearModel> {
    let path = ws.svm_path();
    if !path.is_file() {
        let idx = train_indices(manifest);
        let reps = load_encodings(ws, &idx)?;
        let model = train_ovr_multi(
            &reps,
            &labels_of(manifest, &idx),
            &manifest.classes,
            &svm_config(cfg),
        )?;
        create_dir(&ws.stage_dir("train-svm"))?;
        save_svm(&model, &path)?;
    }
    load_svm(&path)
}

pub fn svm_config(cfg: &PipelineConfig) -> SvmConfig {
    SvmConfig::new(cfg.svm_lambda, cfg.seed)
}

/// Metrics of one (scale range, strategy) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// `1~N` style label of the scales used.
    pub scales: String,
    pub n_scales: usize,
    pub strategy: Strategy,
    pub lambda: f64,
    pub per_class_ap: Vec<f64>,
    pub map: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub images: u64,
    pub descriptors: u64,
    pub extract_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: BTreeMap<String, String>,
    pub classes: Vec<String>,
    pub fv_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub results: Vec<RunResult>,
    pub counters: Counters,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn find(&self, n_scales: usize, strategy: Strategy) -> Option<&RunResult> {
        self.results
            .iter()
            .find(|r| r.n_scales == n_scales && r.strategy == strategy)
    }

    /// Plain-text table of the results.
    pub fn table(&self) -> String {
        let mut s = format!("{:<8} {:<8} {:>8} {:>8}\n", "scales", "pool", "top1", "mAP");
        for r in &self.results {
            s.push_str(&format!(
                "{:<8} {:<8} {:>8.4} {:>8.4}\n",
                r.scales,
                r.strategy.name(),
                r.top1,
                r.map
            ));
        }
        s
    }
}

pub fn scale_label(scales: &[usize]) -> String {
    match scales {
        [] => String::new(),
        [one] => format!("{one}~{one}"),
        _ if scales.windows(2).all(|w| w[1] == w[0] + 1) => {
            format!("{}~{}", scales[0], scales[scales.len() - 1])
        }
        _ => scales
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(","),
    }
}

/// Per-class AP over the test scores, mAP and top-1 accuracy.
pub fn evaluate(
    model: &LinearModel,
    reps: &[PooledRepresentation],
    labels: &[Vec<usize>],
    scales: &[usize],
) -> Result<RunResult> {
    let scores: Vec<Vec<f64>> = reps
        .iter()
        .map(|r| model.score_rep(r))
        .collect::<Result<_>>()?;
    let per_class_ap: Vec<f64> = (0..model.n_classes())
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|v| v[c]).collect();
            let rel: Vec<bool> = labels.iter().map(|l| l.contains(&c)).collect();
            average_precision_11pt(&s, &rel)
        })
        .collect();
    let predicted: Vec<usize> = scores.iter().map(|s| crate::svm::argmax(s)).collect();
    Ok(RunResult {
        scales: scale_label(scales),
        n_scales: scales.len(),
        strategy: model.strategy(),
        lambda: model.lambda(),
        map: mean(&per_class_ap),
        per_class_ap,
        top1: top1_accuracy(&predicted, labels),
    })
}

fn counters(stats: ExtractStats) -> Counters {
    Counters {
        images: stats.images,
        descriptors: stats.descriptors,
        extract_macs: stats.macs,
    }
}

fn report_shell(
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
    stats: ExtractStats,
) -> EvalReport {
    EvalReport {
        config: cfg.echo(),
        classes: manifest.classes.clone(),
        fv_len: cfg.fv_len(),
        n_train: train_indices(manifest).len(),
        n_test: test_indices(manifest).len(),
        results: Vec::new(),
        counters: counters(stats),
    }
}

pub fn stage_eval(
    cfg: &PipelineConfig,
    ws: &Workspace,
    manifest: &DatasetManifest,
) -> Result<EvalReport> {
    let stats: ExtractStats = serde_json::from_slice(&std::fs::read(require(
        "extract",
        ws.extract_stats_path(),
    )?)?)?;
    let model = load_svm(&require("train-svm", ws.svm_path())?)?;
    let idx = test_indices(manifest);
    let reps = load_encodings(ws, &idx)?;
    let mut report = report_shell(cfg, manifest, stats);
    report.results.push(evaluate(
        &model,
        &reps,
        &labels_of(manifest, &idx),
        &all_scales(cfg),
    )?);
    std::fs::write(ws.report_path(), report.to_json()?)?;
    Ok(report)
}

/// extract → PCA → GMM → encode → SVM → evaluate, reusing cached artifacts.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvalReport> {
    let manifest = DatasetManifest::from_spec(&cfg.dataset)?;
    let ws = Workspace::new(cfg)?;
    stage_extract(cfg, &ws, &manifest)?;
    if cfg.pool != Strategy::Ap {
        stage_fit_pca(cfg, &ws, &manifest)?;
        stage_fit_gmm(cfg, &ws, &manifest)?;
    }
    stage_encode(cfg, &ws, &manifest)?;
    stage_train_svm(cfg, &ws, &manifest)?;
    stage_eval(cfg, &ws, &manifest)
}

/// For every upper scale `s` in `ranges`, fits PCA and GMM on scales `1..=s`
/// and evaluates MPP and NFK with those scales.
pub fn scale_sweep(cfg: &PipelineConfig, ranges: &[usize]) -> Result<EvalReport> {
    if let Some(&bad) = ranges.iter().find(|&&s| s == 0 || s > cfg.scales) {
        return config(format!(
            "scale range 1~{bad} outside the {} extracted scales",
            cfg.scales
        ));
    }
    let manifest = DatasetManifest::from_spec(&cfg.dataset)?;
    let ws = Workspace::new(cfg)?;
    let stats = stage_extract(cfg, &ws, &manifest)?;
    let (tr, te) = (train_indices(&manifest), test_indices(&manifest));
    let load = |idx: &[usize]| -> Result<Vec<DescriptorSet>> {
        idx.par_iter()
            .map(|&i| prenormalize(cfg, load_extracted(&ws, i)?))
            .collect()
    };
    let (train_raw, test_raw) = (load(&tr)?, load(&te)?);
    let (ytr, yte) = (labels_of(&manifest, &tr), labels_of(&manifest, &te));
    let mut report = report_shell(cfg, &manifest, stats);
    for &s in ranges {
        let scales: Vec<usize> = (1..=s).collect();
        log::info!("sweep: scales {}", scale_label(&scales));
        let pca = fit_pca_on(cfg, &train_raw, &scales)?;
        let train = project_all(&pca, &train_raw)?;
        let test = project_all(&pca, &test_raw)?;
        let gmm = fit_gmm_on(cfg, &train, &scales)?;
        for strategy in [Strategy::Mpp, Strategy::Nfk] {
            let enc = |sets: &[DescriptorSet]| -> Result<Vec<PooledRepresentation>> {
                sets.par_iter()
                    .map(|set| pool(strategy, &gmm, set, Some(&scales)))
                    .collect()
            };
            let model = train_ovr_multi(&enc(&train)?, &ytr, &manifest.classes, &svm_config(cfg))?;
            report
                .results
                .push(evaluate(&model, &enc(&test)?, &yte, &scales)?);
        }
    }
    Ok(report)
}

/// MAC totals of dense and crop-and-forward extraction over `n` scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub scales: usize,
    pub patches: usize,
    pub dense_macs: u64,
    pub naive_macs: u64,
}

/// Runs both extraction paths on `image` for every scale count in `ns` and
/// reports their multiply-accumulate counters.
pub fn extraction_comparison(
    net: &NetworkSpec,
    image: &Tensor,
    ns: &[usize],
    step: crate::pyramid::ScaleStep,
) -> Result<Vec<EfficiencyRow>> {
    ns.iter()
        .map(|&n| {
            let pyr = ScalePyramid::new(net.standard_size(), n, step)?;
            let mut dense = MacCounter::default();
            let mut naive = MacCounter::default();
            let mut patches = 0;
            for (i, &edge) in pyr.edges().iter().enumerate() {
                let level = resize_bilinear(image, edge, edge);
                patches +=
                    dense_activations_counted(net, &level, (i + 1) as u32, &mut dense)?.len();
                naive_activations(net, &level, (i + 1) as u32, &mut naive)?;
            }
            Ok(EfficiencyRow {
                scales: n,
                patches,
                dense_macs: dense.macs,
                naive_macs: naive.macs,
            })
        })
        .collect()
}

/// Image named by `train:N` or `test:N` (the N-th record of that split of the
/// configured dataset) or by a PGM/PPM path.
pub fn input_image(cfg: &PipelineConfig, spec: &str) -> Result<Tensor> {
    let net = load_net(cfg)?;
    let split = match spec.split_once(':') {
        Some(("train", n)) => Some((Split::Train, n)),
        Some(("test", n)) => Some((Split::Test, n)),
        _ => None,
    };
    let Some((split, n)) = split else {
        return match_channels(
            crate::image::read_pnm(Path::new(spec))?,
            net.input_channels(),
        );
    };
    let i: usize = n
        .parse()
        .map_err(|_| Error::Config(format!("bad record index in `{spec}`")))?;
    let manifest = DatasetManifest::from_spec(&cfg.dataset)?;
    let records = manifest.split(split);
    let Some(rec) = records.get(i) else {
        return config(format!("`{spec}`: the split has {} records", records.len()));
    };
    load_record(rec, net.input_channels(), render_size(cfg, &net)?)
}

/// Confidence map of one image under cached PCA, GMM and SVM models.
pub fn image_confidence_map(
    cfg: &PipelineConfig,
    ws: &Workspace,
    image: &Tensor,
    class: &str,
    grid: (usize, usize),
) -> Result<crate::confmap::ConfidenceMap> {
    let net = load_net(cfg)?;
    let pca = load_pca(&require("fit-pca", ws.pca_path())?)?;
    let gmm = load_gmm(&require("fit-gmm", ws.gmm_path())?)?;
    let svm = load_svm(&require("train-svm", ws.svm_path())?)?;
    let raw = extract_image(cfg, &net, image, &mut MacCounter::default())?;
    let set = project(&pca, &prenormalize(cfg, raw)?)?;
    crate::confmap::build_map(&set, &gmm, &svm, class, grid)
}

/// Scores one image with the cached models.
pub fn predict_image(
    cfg: &PipelineConfig,
    ws: &Workspace,
    image: &Tensor,
) -> Result<(LinearModel, Vec<f64>)> {
    let net = load_net(cfg)?;
    let svm = load_svm(&require("train-svm", ws.svm_path())?)?;
    let rep = if cfg.pool == Strategy::Ap {
        pool_ap(&ap_vectors(&net, image, &mut MacCounter::default())?)?
    } else {
        let pca = load_pca(&require("fit-pca", ws.pca_path())?)?;
        let gmm = load_gmm(&require("fit-gmm", ws.gmm_path())?)?;
        represent(
            cfg,
            &pca,
            &gmm,
            extract_image(cfg, &net, image, &mut MacCounter::default())?,
            None,
        )?
    };
    let scores = svm.score_rep(&rep)?;
    Ok((svm, scores))
}
