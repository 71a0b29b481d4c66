//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines show in `cargo test`
//! output. Exits non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpp::convnet::{convert_fc_to_conv, dense_activations, forward, toy_network, PatchGeometry};
use mpp::fisher::{encode_fv, improved};
use mpp::gmm::GmmModel;
use mpp::harness::dataset::{render, SynthKind};
use mpp::harness::pipeline::{extraction_comparison, image_confidence_map, load_net, render_size};
use mpp::harness::{run_pipeline, scale_sweep, PipelineConfig, Workspace};
use mpp::metrics::average_precision_11pt;
use mpp::pooling::{pool, pool_ap, pool_csf, pool_mpp, pool_mpp_sp, scale_contributions, Strategy};
use mpp::pyramid::{build_pyramid, DescriptorSet, ScaleStep};
use mpp::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_gmm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GmmModel {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means = (0..k * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let sigmas = (0..k * d).map(|_| rng.random_range(0.5..1.5)).collect();
    GmmModel::new(weights, means, sigmas).unwrap()
}

/// Descriptors with uniformly random centers; `counts[s]` rows at scale `s + 1`.
fn random_set(rng: &mut ChaCha8Rng, d: usize, counts: &[usize]) -> DescriptorSet {
    let mut data = Vec::new();
    let mut geometry = Vec::new();
    for (s, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            data.extend((0..d).map(|_| rng.random_range(-2.5f32..2.5)));
            let edge = 1.0 / (s + 1) as f32;
            let cx = rng.random_range(edge / 2.0..=1.0 - edge / 2.0);
            let cy = rng.random_range(edge / 2.0..=1.0 - edge / 2.0);
            geometry.push(PatchGeometry {
                scale: (s + 1) as u32,
                cx,
                cy,
                edge,
            });
        }
    }
    DescriptorSet::from_parts(d, counts.len(), data, geometry).unwrap()
}

/// Mean log-likelihood, straight from the mixture density.
fn mean_log_likelihood(w: &[f64], mu: &[f64], sd: &[f64], d: usize, x: &[f64]) -> f64 {
    let n = x.len() / d;
    let mut total = 0.0;
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let logs: Vec<f64> = (0..w.len())
            .map(|c| {
                let mut l = w[c].ln();
                for j in 0..d {
                    let s = sd[c * d + j];
                    let z = (row[j] - mu[c * d + j]) / s;
                    l += -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                }
                l
            })
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        total += m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    }
    total / n as f64
}

/// Unnormalized FV by direct loops over descriptors and components.
fn oracle_fv(w: &[f64], mu: &[f64], sd: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    let k = w.len();
    let n = x.len() / d;
    let mut out = vec![0.0; 2 * k * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let logs: Vec<f64> = (0..k)
            .map(|c| {
                let mut l = w[c].ln();
                for j in 0..d {
                    let s = sd[c * d + j];
                    let z = (row[j] - mu[c * d + j]) / s;
                    l += -0.5 * z * z - s.ln();
                }
                l
            })
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        for c in 0..k {
            let g = (logs[c] - m).exp() / z;
            for j in 0..d {
                let u = (row[j] - mu[c * d + j]) / sd[c * d + j];
                out[c * d + j] += g * u / (n as f64 * w[c].sqrt());
                out[(k + c) * d + j] += g * (u * u - 1.0) / (n as f64 * (2.0 * w[c]).sqrt());
            }
        }
    }
    out
}

fn params(model: &GmmModel) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (k, _) = (model.k(), model.d());
    let mu = (0..k).flat_map(|c| model.mean(c).to_vec()).collect();
    let sd = (0..k).flat_map(|c| model.sigma(c).to_vec()).collect();
    (model.weights().to_vec(), mu, sd)
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    const TOL: f64 = 1e-5;
    const LIMIT: Duration = Duration::from_secs(30);
    const STRIDE: usize = 4;
    let start = Instant::now();
    let original = toy_network(11);
    let net = convert_fc_to_conv(&original).unwrap();
    let std = net.standard_size();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let top = std * 4;
    let image = Tensor::new(
        1,
        top,
        top,
        (0..top * top)
            .map(|_| rng.random_range(0.0f32..1.0))
            .collect(),
    )
    .unwrap();
    let levels = build_pyramid(&image, 3, std).unwrap();
    let (mut worst, mut count) = (0.0f64, 0usize);
    for (s, level) in levels.iter().enumerate() {
        let frag = dense_activations(&net, level, (s + 1) as u32).unwrap();
        let side = (level.height() - std) / STRIDE + 1;
        assert_eq!(
            (frag.rows, frag.cols),
            (side, side),
            "scale {} map size",
            s + 1
        );
        for i in 0..side {
            for j in 0..side {
                let crop = level.crop((i * STRIDE) as isize, (j * STRIDE) as isize, std, std);
                let want = forward(&original, &crop).unwrap();
                let got = frag.descriptor(i * side + j);
                for (&a, &b) in got.iter().zip(want.data()) {
                    let (a, b) = (f64::from(a), f64::from(b));
                    let scale = a.abs().max(b.abs());
                    let rel = if scale == 0.0 {
                        0.0
                    } else {
                        (a - b).abs() / scale
                    };
                    worst = worst.max(rel);
                    count += 1;
                }
            }
        }
    }
    let took = start.elapsed();
    outcome(
        worst <= TOL && took < LIMIT,
        format!("dense vs crop-and-forward on the unconverted net: {count} values over 3 scales, max rel err {worst:.2e} (tol {TOL:e}), {took:.1?} (limit {LIMIT:?})"),
    )
}

fn criterion_2() -> Outcome {
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(1..=3);
        let d = rng.random_range(1..=4);
        let n = rng.random_range(3..=40);
        let model = random_gmm(&mut rng, k, d);
        let x32: Vec<f32> = (0..n * d).map(|_| rng.random_range(-2.5f32..2.5)).collect();
        let x = widen(&x32);
        let fv = encode_fv(&model, &x32).unwrap();
        let (w, mu, sd) = params(&model);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for c in 0..k {
            for j in 0..d {
                let i = c * d + j;
                let h = 1e-6;
                let (mut up, mut dn) = (mu.clone(), mu.clone());
                up[i] += h;
                dn[i] -= h;
                let dl = (mean_log_likelihood(&w, &up, &sd, d, &x)
                    - mean_log_likelihood(&w, &dn, &sd, d, &x))
                    / (2.0 * h);
                numeric.push(dl * sd[i] / w[c].sqrt());
                analytic.push(fv.g_mu(c)[j]);
                let (mut up, mut dn) = (sd.clone(), sd.clone());
                up[i] += h;
                dn[i] -= h;
                let dl = (mean_log_likelihood(&w, &mu, &up, d, &x)
                    - mean_log_likelihood(&w, &mu, &dn, d, &x))
                    / (2.0 * h);
                numeric.push(dl * sd[i] / (2.0 * w[c]).sqrt());
                analytic.push(fv.g_sigma(c)[j]);
            }
        }
        let num: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
    }
    outcome(worst < TOL, format!("FV vs central differences of mean log-likelihood, 20 configs (K<=3, d<=4): max rel err {worst:.2e} (tol {TOL:e})"))
}

fn criterion_3() -> Outcome {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (k, d) = (rng.random_range(1..=4), rng.random_range(1..=5));
        let counts: Vec<usize> = (0..rng.random_range(2..=4))
            .map(|_| rng.random_range(1..=50))
            .collect();
        let model = random_gmm(&mut rng, k, d);
        let set = random_set(&mut rng, d, &counts);
        let whole = encode_fv(&model, set.data()).unwrap();
        let (w, mu, sd) = params(&model);
        let total: usize = counts.iter().sum();
        let mut expanded = vec![0.0; 2 * k * d];
        for s in 1..=counts.len() {
            let fv = oracle_fv(&w, &mu, &sd, d, &widen(set.scale_data(s)));
            let share = counts[s - 1] as f64 / total as f64;
            expanded
                .iter_mut()
                .zip(&fv)
                .for_each(|(e, v)| *e += share * v);
        }
        worst = worst.max(max_abs_diff(whole.as_slice(), &expanded));
        let parts = scale_contributions(Strategy::Nfk, &model, &set, None).unwrap();
        let mut summed = vec![0.0; 2 * k * d];
        for p in &parts {
            summed.iter_mut().zip(p).for_each(|(e, v)| *e += v);
        }
        worst = worst.max(max_abs_diff(whole.as_slice(), &summed));
    }
    outcome(worst <= TOL, format!("unnormalized NFK vs sum of count-weighted scale FVs, 10 sets: max abs diff {worst:.2e} (tol {TOL:e})"))
}

fn criterion_4() -> Outcome {
    const NORM_TOL: f64 = 1e-9;
    const IDENTITY_TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut single, mut same, mut norm_dev) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let (k, d) = (rng.random_range(1..=4), rng.random_range(1..=5));
        let model = random_gmm(&mut rng, k, d);

        let n1 = rng.random_range(1..=40);
        let one = random_set(&mut rng, d, &[n1]);
        let mpp = pool_mpp(&model, &one, None).unwrap();
        let ifk = improved(encode_fv(&model, one.data()).unwrap()).unwrap();
        single = single.max(max_abs_diff(&mpp.payload, ifk.as_slice()));

        let n0 = rng.random_range(1..=40);
        let base = random_set(&mut rng, d, &[n0]);
        let n = base.len();
        let mut data = Vec::new();
        let mut geometry = Vec::new();
        for s in 1..=3u32 {
            data.extend_from_slice(base.data());
            geometry.extend(
                base.geometry()
                    .iter()
                    .map(|g| PatchGeometry { scale: s, ..*g }),
            );
        }
        let tripled = DescriptorSet::from_parts(d, 3, data, geometry).unwrap();
        assert_eq!(tripled.len(), 3 * n);
        let all = pool_mpp(&model, &tripled, None).unwrap();
        let first = pool_mpp(&model, &tripled, Some(&[1])).unwrap();
        same = same.max(max_abs_diff(&all.payload, &first.payload));

        let counts: Vec<usize> = (0..3).map(|_| rng.random_range(1..=30)).collect();
        let set = random_set(&mut rng, d, &counts);
        for strategy in [Strategy::Mpp, Strategy::Nfk, Strategy::Csf, Strategy::MppSp] {
            let rep = pool(strategy, &model, &set, None).unwrap();
            norm_dev = norm_dev.max((rep.norm() - 1.0).abs());
        }
        let vectors: Vec<Vec<f32>> = (0..10)
            .map(|_| (0..d * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        norm_dev = norm_dev.max((pool_ap(&vectors).unwrap().norm() - 1.0).abs());
    }
    outcome(
        single <= IDENTITY_TOL && same <= IDENTITY_TOL && norm_dev <= NORM_TOL,
        format!(
            "N=1 MPP vs improved FK {single:.1e}, identical scales vs single scale {same:.1e} (tol {IDENTITY_TOL:e}); max | |p| - 1 | over mpp/nfk/csf/ap/mpp-sp {norm_dev:.1e} (tol {NORM_TOL:e})"
        ),
    )
}

fn criterion_5(cache: &Path) -> Outcome {
    const NFK_DROP: f64 = 0.05;
    const MPP_SLACK: f64 = 0.02;
    const LIMIT: Duration = Duration::from_secs(600);
    let mut cfg = PipelineConfig::desk_defaults();
    cfg.cache_dir = Some(cache.join("c5"));
    assert_eq!(
        cfg.dataset,
        "synth:noise-fine-scale:train=300:test=300:seed=0"
    );
    let start = Instant::now();
    let report = scale_sweep(&cfg, &[1, 2, 3]).unwrap();
    let took = start.elapsed();
    let top1 = |n, s| report.find(n, s).unwrap().top1;
    let (mpp1, nfk1) = (top1(1, Strategy::Mpp), top1(1, Strategy::Nfk));
    let (mpp3, nfk3) = (top1(3, Strategy::Mpp), top1(3, Strategy::Nfk));
    let (nfk2, mpp2) = (top1(2, Strategy::Nfk), top1(2, Strategy::Mpp));
    let pass = nfk3 <= nfk1 - NFK_DROP && mpp3 > mpp1 - MPP_SLACK && took < LIMIT;
    outcome(
        pass,
        format!(
            "top-1 1~1 mpp {mpp1:.4} nfk {nfk1:.4} | 1~2 mpp {mpp2:.4} nfk {nfk2:.4} | 1~3 mpp {mpp3:.4} nfk {nfk3:.4}; nfk drop {:.1} pts (need >= 5), mpp change {:+.1} pts (need > -2), {took:.0?} (limit {LIMIT:?})",
            100.0 * (nfk1 - nfk3),
            100.0 * (mpp3 - mpp1),
        ),
    )
}

fn criterion_6() -> Outcome {
    let full = PipelineConfig::full_defaults();
    let fv = full.fv_len();
    let mut ok = fv == 2 * 256 * 128 && full.representation_len() == 65_536;
    ok &= Strategy::Csf.payload_len(256, 128, 7) == 7 * 65_536;
    ok &= Strategy::MppSp.payload_len(256, 128, 7) == 4 * 65_536;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut built = Vec::new();
    for (k, d, n) in [(2, 3, 3), (4, 2, 5), (3, 4, 1)] {
        let model = random_gmm(&mut rng, k, d);
        let set = random_set(&mut rng, d, &vec![12; n]);
        let csf = pool_csf(&model, &set, None).unwrap().len();
        let sp = pool_mpp_sp(&model, &set, None).unwrap().len();
        ok &= csf == n * 2 * k * d && sp == 4 * 2 * k * d;
        built.push(format!("K{k} d{d} N{n}: csf {csf}, sp {sp}"));
    }
    outcome(
        ok,
        format!(
            "full preset FV length {fv} (= 2*256*128); pooled lengths {}",
            built.join("; ")
        ),
    )
}

fn criterion_7() -> Outcome {
    let net = convert_fc_to_conv(&toy_network(7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let image = Tensor::new(
        1,
        96,
        96,
        (0..96 * 96)
            .map(|_| rng.random_range(0.0f32..1.0))
            .collect(),
    )
    .unwrap();
    let rows = extraction_comparison(&net, &image, &[2, 3, 4], ScaleStep::Octave).unwrap();
    let gaps: Vec<i128> = rows
        .iter()
        .map(|r| r.naive_macs as i128 - r.dense_macs as i128)
        .collect();
    let pass = gaps.iter().all(|&g| g > 0) && gaps.windows(2).all(|w| w[1] > w[0]);
    let text: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "N={} dense {} naive {}",
                r.scales, r.dense_macs, r.naive_macs
            )
        })
        .collect();
    outcome(
        pass,
        format!(
            "MACs {}; gap widening {}",
            text.join(", "),
            gaps.windows(2).all(|w| w[1] > w[0])
        ),
    )
}

fn criterion_8(cache: &Path) -> Outcome {
    const NEED: usize = 90;
    const GRID: usize = 16;
    let mut cfg = PipelineConfig::desk_defaults();
    cfg.cache_dir = Some(cache.join("c8"));
    cfg.dataset = "synth:planted-square:train=200:test=100:seed=3".into();
    cfg.scales = 4;
    cfg.gmm_k = 1;
    let report = run_pipeline(&cfg).unwrap();
    let ws = Workspace::new(&cfg).unwrap();
    let size = render_size(&cfg, &load_net(&cfg).unwrap()).unwrap();
    let mut hits = 0;
    for i in 0..100u64 {
        let img = render(SynthKind::PlantedSquare, 1, 0x5eed_0000 + i, size);
        let (x0, x1, y0, y1) = img.square.unwrap();
        let map = image_confidence_map(&cfg, &ws, &img.image, "square", (GRID, GRID)).unwrap();
        let (r, c) = map.argmax().unwrap();
        let (u, v) = (
            (c as f64 + 0.5) / GRID as f64,
            (r as f64 + 0.5) / GRID as f64,
        );
        if u >= x0 && u < x1 && v >= y0 && v < y1 {
            hits += 1;
        }
    }
    outcome(
        hits >= NEED,
        format!("map argmax inside the square for {hits}/100 images (need >= {NEED}); classifier top-1 {:.3}", report.results[0].top1),
    )
}

fn criterion_9(cache: &Path) -> Outcome {
    let files = |cfg: &PipelineConfig| -> Vec<Vec<u8>> {
        let ws = Workspace::new(cfg).unwrap();
        [
            ws.pca_path(),
            ws.gmm_path(),
            ws.svm_path(),
            ws.report_path(),
        ]
        .iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect()
    };
    let mut runs = Vec::new();
    for (i, threads) in [1usize, 1, 8, 8].into_iter().enumerate() {
        let mut cfg = PipelineConfig::desk_defaults();
        cfg.dataset = "synth:noise-fine-scale:train=90:test=45:seed=9".into();
        cfg.cache_dir = Some(cache.join(format!("c9-{i}")));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let report = pool.install(|| run_pipeline(&cfg)).unwrap();
        runs.push((threads, report, files(&cfg)));
    }
    let (_, report0, files0) = &runs[0];
    let mut same = true;
    for (_, report, f) in &runs[1..] {
        same &= report == report0 && f == files0;
    }
    let sizes: Vec<usize> = files0.iter().map(Vec::len).collect();
    outcome(
        same,
        format!("2 runs at 1 thread and 2 at 8 threads: pca/gmm/svm/report.json bytes identical = {same} (sizes {sizes:?})"),
    )
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=60);
        let mut ranks: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            ranks.swap(i, rng.random_range(0..=i));
        }
        let scores: Vec<f64> = ranks.iter().map(|&r| r as f64 + 0.5).collect();
        let mut relevant: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        relevant[rng.random_range(0..n)] = true;

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let npos = relevant.iter().filter(|&&r| r).count();
        let mut sum = 0.0;
        for level in 0..=10 {
            let mut best = 0.0f64;
            for cut in 1..=n {
                let tp = order[..cut].iter().filter(|&&i| relevant[i]).count();
                if tp as f64 / npos as f64 >= level as f64 / 10.0 {
                    best = best.max(tp as f64 / cut as f64);
                }
            }
            sum += best;
        }
        if average_precision_11pt(&scores, &relevant) != sum / 11.0 {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!(
            "11-point AP vs brute-force enumeration on 50 random rankings: {mismatches} mismatches"
        ),
    )
}

fn main() {
    let cache = tempfile::tempdir().unwrap();
    let dir = cache.path();
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(usize, &str, Check)> = vec![
        (1, "FC->conv sliding equivalence", Box::new(criterion_1)),
        (2, "Fisher gradient check", Box::new(criterion_2)),
        (3, "NFK scale decomposition", Box::new(criterion_3)),
        (4, "MPP identities and unit norms", Box::new(criterion_4)),
        (
            5,
            "fine-scale noise sweep",
            Box::new(move || criterion_5(dir)),
        ),
        (6, "dimensionality contract", Box::new(criterion_6)),
        (7, "extraction efficiency", Box::new(criterion_7)),
        (
            8,
            "planted-square localization",
            Box::new(move || criterion_8(dir)),
        ),
        (
            9,
            "determinism across runs and threads",
            Box::new(move || criterion_9(dir)),
        ),
        (10, "11-point AP oracle", Box::new(criterion_10)),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {} {name}: {} [{:.1?}]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
