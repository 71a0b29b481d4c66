use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpp::confmap::{build_map, render};
use mpp::convnet::{convert_fc_to_conv, toy_network, PatchGeometry};
use mpp::fisher::{encode_fv, norm};
use mpp::gmm::{fit_gmm_rows, posteriors, GmmConfig, GmmModel};
use mpp::harness::pipeline::{evaluate, extraction_comparison};
use mpp::pca::fit_pca_rows;
use mpp::pooling::{pool, pool_ap, pool_mpp, pool_nfk, scale_contributions, Strategy};
use mpp::pyramid::{DescriptorSet, ScalePyramid, ScaleStep};
use mpp::svm::{argmax, train_rows, LinearModel, SvmConfig};
use mpp::Tensor;

fn random_gmm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GmmModel {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    GmmModel::new(
        raw.iter().map(|w| w / total).collect(),
        (0..k * d).map(|_| rng.random_range(-1.5..1.5)).collect(),
        (0..k * d).map(|_| rng.random_range(0.5..1.5)).collect(),
    )
    .unwrap()
}

fn random_set(rng: &mut ChaCha8Rng, d: usize, counts: &[usize]) -> DescriptorSet {
    let mut data = Vec::new();
    let mut geometry = Vec::new();
    for (s, &n) in counts.iter().enumerate() {
        let edge = 1.0 / (s + 1) as f32;
        for _ in 0..n {
            data.extend((0..d).map(|_| rng.random_range(-2.5f32..2.5)));
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

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn shuffled<T: Clone>(rng: &mut ChaCha8Rng, items: &[T]) -> Vec<T> {
    let mut v = items.to_vec();
    for i in (1..v.len()).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

/// Same descriptors with rows shuffled inside each scale.
fn shuffle_within_scales(rng: &mut ChaCha8Rng, set: &DescriptorSet) -> DescriptorSet {
    let mut data = Vec::new();
    let mut geometry = Vec::new();
    for s in 1..=set.n_scales() {
        let idx: Vec<usize> = set.scale_range(s).collect();
        for i in shuffled(rng, &idx) {
            data.extend_from_slice(set.descriptor(i));
            geometry.push(set.geometry()[i]);
        }
    }
    DescriptorSet::from_parts(set.dim(), set.n_scales(), data, geometry).unwrap()
}

fn counts_strategy() -> impl proptest::strategy::Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..30, 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scale_tags_partition_the_set(seed in any::<u64>(), counts in counts_strategy(), d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, d, &counts);
        prop_assert_eq!(set.scale_counts(), &counts[..]);
        let mut next = 0;
        for s in 1..=counts.len() {
            let r = set.scale_range(s);
            prop_assert_eq!(r.start, next);
            prop_assert!(set.geometry()[r.clone()].iter().all(|g| g.scale as usize == s));
            next = r.end;
        }
        prop_assert_eq!(next, set.len());
        for s in 1..=counts.len() {
            let keep: Vec<usize> = (1..=counts.len()).filter(|&t| t != s).collect();
            prop_assert_eq!(set.subset_scales(&keep).len(), set.len() - counts[s - 1]);
        }
    }

    #[test]
    fn octave_edges_double(standard in 1usize..300, n in 1usize..8) {
        let p = ScalePyramid::new(standard, n, ScaleStep::Octave).unwrap();
        prop_assert_eq!(p.edge(1), standard);
        prop_assert!(p.edges().windows(2).all(|w| w[1] == 2 * w[0]));
    }

    #[test]
    fn pca_centers_orders_and_is_orthonormal(seed in any::<u64>(), dim in 2usize..7, extra in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dim + 5 + extra;
        let spread: Vec<f32> = (0..dim).map(|_| rng.random_range(0.1f32..3.0)).collect();
        let data: Vec<f32> = (0..n * dim).map(|i| rng.random_range(-1.0f32..1.0) * spread[i % dim] + 4.0).collect();
        let d_out = rng.random_range(1..=dim);
        let pca = fit_pca_rows(&data, dim, d_out, false).unwrap().model;

        for a in 0..d_out {
            for b in 0..d_out {
                let dot: f64 = pca.row(a).iter().zip(pca.row(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() <= 1e-6, "rows {} {}: {}", a, b, dot);
            }
        }

        let scale = data.iter().map(|v| v.abs()).fold(0.0f32, f32::max) as f64;
        let mut out = vec![0.0f32; d_out];
        let mut sums = vec![0.0f64; d_out];
        for row in data.chunks_exact(dim) {
            pca.project_row(row, &mut out);
            sums.iter_mut().zip(&out).for_each(|(s, &v)| *s += f64::from(v));
        }
        for s in &sums {
            prop_assert!((s / n as f64).abs() <= 1e-6 * scale);
        }

        let var: Vec<f64> = (0..d_out)
            .map(|i| {
                data.chunks_exact(dim)
                    .map(|x| {
                        let p: f64 = x.iter().zip(pca.mean()).zip(pca.row(i)).map(|((&v, m), r)| (f64::from(v) - m) * r).sum();
                        p * p
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .collect();
        for w in var.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-9 * var[0], "{:?}", var);
        }
    }

    #[test]
    fn posteriors_sum_to_one_and_follow_component_order(seed in any::<u64>(), k in 1usize..5, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_gmm(&mut rng, k, d);
        let perm = shuffled(&mut rng, &(0..k).collect::<Vec<_>>());
        let pick = |v: &[f64], width: usize| -> Vec<f64> {
            perm.iter().flat_map(|&c| v[c * width..(c + 1) * width].to_vec()).collect()
        };
        let permuted = GmmModel::new(pick(model.weights(), 1), pick(model.means(), d), pick(model.sigmas(), d)).unwrap();
        for _ in 0..10 {
            let x: Vec<f32> = (0..d).map(|_| rng.random_range(-4.0f32..4.0)).collect();
            let g = posteriors(&model, &x).unwrap();
            prop_assert!(g.iter().all(|&v| v >= 0.0));
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let h = posteriors(&permuted, &x).unwrap();
            for (j, &c) in perm.iter().enumerate() {
                prop_assert!((h[j] - g[c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn em_log_likelihood_never_drops(seed in any::<u64>(), k in 1usize..4, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<f32> = (0..k * d).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        let n = 40 * k;
        let data: Vec<f32> = (0..n)
            .flat_map(|i| {
                let c = i % k;
                (0..d).map(|j| centers[c * d + j] + rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()
            })
            .collect();
        let fit = fit_gmm_rows(&data, d, &GmmConfig::new(k, seed)).unwrap();
        prop_assume!(fit.reseeds == 0);
        for w in fit.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8, "{:?}", fit.log_likelihood);
        }
    }

    #[test]
    fn fv_is_additive_and_order_free(seed in any::<u64>(), k in 1usize..4, d in 1usize..5, na in 1usize..60, nb in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_gmm(&mut rng, k, d);
        let a: Vec<f32> = (0..na * d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let b: Vec<f32> = (0..nb * d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let both: Vec<f32> = a.iter().chain(&b).copied().collect();
        let whole = encode_fv(&model, &both).unwrap();
        let (fa, fb) = (encode_fv(&model, &a).unwrap(), encode_fv(&model, &b).unwrap());
        let n = (na + nb) as f64;
        let mixed: Vec<f64> = fa
            .as_slice()
            .iter()
            .zip(fb.as_slice())
            .map(|(x, y)| (na as f64 * x + nb as f64 * y) / n)
            .collect();
        prop_assert!(max_abs_diff(whole.as_slice(), &mixed) <= 1e-12);

        let rows: Vec<Vec<f32>> = both.chunks_exact(d).map(<[f32]>::to_vec).collect();
        let reordered: Vec<f32> = shuffled(&mut rng, &rows).concat();
        let again = encode_fv(&model, &reordered).unwrap();
        prop_assert!(max_abs_diff(whole.as_slice(), again.as_slice()) <= 1e-12);
    }

    #[test]
    fn pooled_vectors_have_unit_norm(seed in any::<u64>(), k in 1usize..4, d in 1usize..4, counts in counts_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_gmm(&mut rng, k, d);
        let set = random_set(&mut rng, d, &counts);
        for strategy in [Strategy::Mpp, Strategy::Nfk, Strategy::Csf, Strategy::MppSp] {
            let rep = pool(strategy, &model, &set, None).unwrap();
            prop_assert!((rep.norm() - 1.0).abs() <= 1e-9, "{}", strategy);
        }
        let vectors: Vec<Vec<f32>> = (0..set.n_scales()).map(|s| set.scale_data(s + 1).to_vec()).collect();
        let vectors: Vec<Vec<f32>> = vectors.iter().map(|v| v[..d].to_vec()).collect();
        prop_assert!((pool_ap(&vectors).unwrap().norm() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn scale_contribution_norms(seed in any::<u64>(), k in 1usize..4, d in 1usize..4, counts in counts_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_gmm(&mut rng, k, d);
        let set = random_set(&mut rng, d, &counts);
        let n = counts.len() as f64;
        let total: usize = counts.iter().sum();
        let mpp = scale_contributions(Strategy::Mpp, &model, &set, None).unwrap();
        let nfk = scale_contributions(Strategy::Nfk, &model, &set, None).unwrap();
        for s in 1..=counts.len() {
            prop_assert!((norm(&mpp[s - 1]) - 1.0 / n).abs() <= 1e-12);
            let g = encode_fv(&model, set.scale_data(s)).unwrap().norm();
            let want = counts[s - 1] as f64 / total as f64 * g;
            prop_assert!((norm(&nfk[s - 1]) - want).abs() <= 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn mpp_and_nfk_agree_when_scales_balance(seed in any::<u64>(), d in 1usize..5, count in 1usize..40, scales in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = GmmModel::new(vec![1.0], vec![0.0; d], (0..d).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap();
        let base = random_set(&mut rng, d, &[count]);
        let mut data = Vec::new();
        let mut geometry = Vec::new();
        for s in 0..scales {
            let sign = if s % 2 == 0 { 1.0 } else { -1.0 };
            data.extend(base.data().iter().map(|v| sign * v));
            geometry.extend(base.geometry().iter().map(|g| PatchGeometry { scale: s as u32 + 1, ..*g }));
        }
        let set = DescriptorSet::from_parts(d, scales, data, geometry).unwrap();
        let a = pool_mpp(&model, &set, None).unwrap();
        let b = pool_nfk(&model, &set, None).unwrap();
        prop_assert!(max_abs_diff(&a.payload, &b.payload) <= 1e-9);
    }

    #[test]
    fn argmax_survives_monotone_maps(scores in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let top = argmax(&scores);
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| s.tanh() + 0.5 * s).collect();
        prop_assert_eq!(argmax(&cubed), top);
        prop_assert_eq!(argmax(&squashed), top);
    }

    #[test]
    fn confmap_ignores_order_and_weight_scale(seed in any::<u64>(), counts in counts_strategy(), exp in -3i32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d) = (2, 3);
        let gmm = random_gmm(&mut rng, k, d);
        let set = random_set(&mut rng, d, &counts);
        let weights = (0..2 * 2 * k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut svm = LinearModel::new(vec!["a".into(), "b".into()], Strategy::Mpp, 1e-3, weights, vec![0.3, -0.2]).unwrap();
        let map = build_map(&set, &gmm, &svm, "b", (5, 7)).unwrap();

        let other = build_map(&shuffle_within_scales(&mut rng, &set), &gmm, &svm, "b", (5, 7)).unwrap();
        prop_assert_eq!(&map, &other);

        let c = 2f64.powi(exp);
        svm.scale(c);
        let scaled = build_map(&set, &gmm, &svm, "b", (5, 7)).unwrap();
        for (x, y) in map.cells.iter().zip(&scaled.cells) {
            prop_assert_eq!(x.map(|v| v * c), *y);
        }
        prop_assert_eq!(render(&map), render(&scaled));
    }

    #[test]
    fn map_is_the_mean_of_class_aps(seed in any::<u64>(), n_classes in 2usize..5, n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 6;
        let classes: Vec<String> = (0..n_classes).map(|c| format!("c{c}")).collect();
        let weights = (0..n_classes * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = LinearModel::new(classes, Strategy::Ap, 1e-3, weights, vec![0.0; n_classes]).unwrap();
        let reps: Vec<_> = (0..n)
            .map(|_| {
                let v: Vec<Vec<f32>> = (0..2).map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
                pool_ap(&v).unwrap()
            })
            .collect();
        let labels: Vec<Vec<usize>> = (0..n).map(|i| vec![i % n_classes]).collect();
        let result = evaluate(&model, &reps, &labels, &[1, 2]).unwrap();
        prop_assert!(result.per_class_ap.iter().all(|ap| (0.0..=1.0).contains(ap)));
        let mut sum = 0.0;
        for ap in &result.per_class_ap {
            sum += ap;
        }
        prop_assert_eq!(result.map, sum / n_classes as f64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn svm_ignores_duplicated_data(seed in any::<u64>(), n in 6usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 4;
        let rows: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<Vec<usize>> = (0..n).map(|i| vec![usize::from(rows[i * dim] + rows[i * dim + 1] > 0.0)]).collect();
        prop_assume!(labels.iter().any(|l| l[0] == 0) && labels.iter().any(|l| l[0] == 1));
        let classes = vec!["neg".to_string(), "pos".to_string()];
        let cfg = SvmConfig::new(Some(1e-2), 1);
        let once = train_rows(&rows, dim, &labels, &classes, Strategy::Mpp, &cfg).unwrap();
        let rows2: Vec<f64> = rows.iter().chain(&rows).copied().collect();
        let labels2: Vec<Vec<usize>> = labels.iter().chain(&labels).cloned().collect();
        let twice = train_rows(&rows2, dim, &labels2, &classes, Strategy::Mpp, &cfg).unwrap();
        for c in 0..2 {
            prop_assert!(max_abs_diff(once.weights(c), twice.weights(c)) <= 1e-6);
            let trace = &once.traces()[c];
            prop_assert!(trace.final_objective <= trace.objective[0] + 1e-12);
        }
    }

    #[test]
    fn dense_extraction_needs_fewer_macs(seed in any::<u64>(), n in 2usize..8) {
        let net = convert_fc_to_conv(&toy_network(seed)).unwrap();
        let image = Tensor::new(1, 40, 40, vec![0.5; 1600]).unwrap();
        let rows = extraction_comparison(&net, &image, &[n], ScaleStep::HalfOctave).unwrap();
        prop_assert!(rows[0].dense_macs < rows[0].naive_macs);
    }
}
