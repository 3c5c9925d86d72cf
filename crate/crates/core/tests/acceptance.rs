//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//! Criterion 8 (CLI byte-determinism) lives in the CLI crate's own
//! acceptance suite, next to the binary it drives.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tripletlearn::data_io::{generate_synthetic, SyntheticSpec};
use tripletlearn::embed_net::{embedding_distance, Activation, EmbeddingNet, GradientBundle};
use tripletlearn::evaluation::{eval_reference, eval_regression, srocc};
use tripletlearn::losses::{
    regression_loss, triplet_loss_grads, LossWeights, MarginMode, RegressionKind,
};
use tripletlearn::sampling::{
    adaptive_margin, generate_quadruplets_single, FeatureDataset, Quadruplet,
};
use tripletlearn::training::{train, OptimizerSpec, RegressionHead, TrainConfig};

fn pass(criterion: &str) {
    println!("ACCEPTANCE {criterion}: PASS");
}

/// Relative gradient comparison with an absolute floor of 1e-8: central
/// differences of an O(1) loss carry ~1e-12 of rounding noise, so entries
/// that are numerically zero on both sides count as matching.
fn grads_match(analytic: f64, fd: f64) -> bool {
    let diff = (analytic - fd).abs();
    diff <= 1e-8 || diff / (analytic.abs() + fd.abs()) < 1e-4
}

#[derive(Clone)]
struct LossCase {
    net: EmbeddingNet,
    head: Option<RegressionHead>,
    x_a: Vec<f64>,
    x_p: Vec<f64>,
    x_n: Vec<f64>,
    margin: f64,
    mos_norm: f64,
    weights: LossWeights,
    kind: RegressionKind,
}

impl LossCase {
    fn param_vector(&self) -> Vec<f64> {
        let mut flat = self.net.flatten_params();
        if let Some(head) = &self.head {
            flat.extend_from_slice(&head.w);
            flat.push(head.b);
        }
        flat
    }

    fn with_params(&self, flat: &[f64]) -> LossCase {
        let mut case = self.clone();
        let net_n = case.net.param_count();
        case.net.assign_params(&flat[..net_n]).unwrap();
        if let Some(head) = &mut case.head {
            let tail = &flat[net_n..];
            let dim = head.w.len();
            head.w.copy_from_slice(&tail[..dim]);
            head.b = tail[dim];
        }
        case
    }

    /// Full per-quadruplet loss recomputed from plain forward passes; this
    /// is the only thing finite differences ever evaluate.
    fn loss(&self) -> f64 {
        let e_a = self.net.embed(&self.x_a).unwrap();
        let e_p = self.net.embed(&self.x_p).unwrap();
        let e_n = self.net.embed(&self.x_n).unwrap();
        let d_ap = embedding_distance(&e_a, &e_p).unwrap();
        let d_an = embedding_distance(&e_a, &e_n).unwrap();
        let triplet = (d_ap - d_an + self.margin).max(0.0);
        let regression = match &self.head {
            None => 0.0,
            Some(head) => {
                let r = head.predict(&e_a) - self.mos_norm;
                match self.kind {
                    RegressionKind::Mae => r.abs(),
                    RegressionKind::Mse => r * r,
                }
            }
        };
        self.weights.alpha * triplet + self.weights.beta * regression
    }

    /// Analytic gradient of the full loss, assembled from the library's
    /// gradient operations in the same order as `param_vector`.
    fn analytic_gradient(&self) -> Vec<f64> {
        let (alpha, beta) = (self.weights.alpha, self.weights.beta);
        let e_a = self.net.embed(&self.x_a).unwrap();
        let e_p = self.net.embed(&self.x_p).unwrap();
        let e_n = self.net.embed(&self.x_n).unwrap();
        let (_, g_a, g_p, g_n) = triplet_loss_grads(&e_a, &e_p, &e_n, self.margin).unwrap();

        let mut upstream_a: Vec<f64> = g_a.iter().map(|g| alpha * g).collect();
        let mut head_grads = Vec::new();
        if let Some(head) = &self.head {
            let pred = head.predict(&e_a);
            let (_, dpred) = regression_loss(pred, self.mos_norm, self.kind).unwrap();
            for (u, w) in upstream_a.iter_mut().zip(&head.w) {
                *u += beta * dpred * w;
            }
            head_grads.extend(e_a.iter().map(|e| beta * dpred * e));
            head_grads.push(beta * dpred);
        }

        let mut total = GradientBundle::zeros_like(&self.net);
        let (gb, _) = self.net.backward(&self.x_a, &upstream_a).unwrap();
        total.accumulate(&gb);
        for (x, g) in [(&self.x_p, g_p), (&self.x_n, g_n)] {
            let upstream: Vec<f64> = g.iter().map(|v| alpha * v).collect();
            let (gb, _) = self.net.backward(x, &upstream).unwrap();
            total.accumulate(&gb);
        }
        let mut flat = total.flatten();
        flat.extend(head_grads);
        flat
    }
}

fn random_loss_case(rng: &mut ChaCha8Rng, with_head: bool) -> LossCase {
    let act = if rng.gen_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Tanh
    };
    let n_hidden = rng.gen_range(0..=2);
    let mut dims = vec![rng.gen_range(2..=8)];
    for _ in 0..n_hidden {
        dims.push(rng.gen_range(2..=8));
    }
    dims.push(rng.gen_range(2..=8));
    let net = EmbeddingNet::seeded(&dims, act, rng.gen()).unwrap();
    let embed_dim = *dims.last().unwrap();
    let draw_x = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dims[0]).map(|_| rng.gen_range(-1.5..1.5)).collect()
    };
    LossCase {
        head: with_head.then(|| RegressionHead::seeded(embed_dim, rng.gen())),
        x_a: draw_x(rng),
        x_p: draw_x(rng),
        x_n: draw_x(rng),
        margin: rng.gen_range(0.0..1.0),
        mos_norm: rng.gen_range(0.0..1.0),
        weights: LossWeights {
            alpha: 1.0,
            beta: if with_head {
                [0.1, 0.5, 1.0][rng.gen_range(0..3)]
            } else {
                0.0
            },
        },
        kind: if rng.gen_bool(0.5) {
            RegressionKind::Mae
        } else {
            RegressionKind::Mse
        },
        net,
    }
}

/// Central differences are meaningless within the step of a kink; reject
/// configurations sitting on the hinge, a relu corner, the MAE corner, or
/// a coincident-embedding pair.
fn near_kink(case: &LossCase) -> bool {
    let e_a = case.net.embed(&case.x_a).unwrap();
    let e_p = case.net.embed(&case.x_p).unwrap();
    let e_n = case.net.embed(&case.x_n).unwrap();
    let d_ap = embedding_distance(&e_a, &e_p).unwrap();
    let d_an = embedding_distance(&e_a, &e_n).unwrap();
    if (d_ap - d_an + case.margin).abs() < 1e-3 || d_ap < 1e-3 || d_an < 1e-3 {
        return true;
    }
    for x in [&case.x_a, &case.x_p, &case.x_n] {
        let raw = case.net.forward(x).unwrap();
        let norm: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-6 {
            return true;
        }
        if case.net.activation == Activation::Relu {
            // Walk the hidden layers and check every pre-activation.
            let mut a = x.clone();
            for (k, layer) in case.net.layers.iter().enumerate() {
                if k + 1 == case.net.layers.len() {
                    break;
                }
                let z: Vec<f64> = layer
                    .w
                    .iter()
                    .zip(&layer.b)
                    .map(|(row, &b)| row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>() + b)
                    .collect();
                if z.iter().any(|v| v.abs() < 1e-3) {
                    return true;
                }
                a = z.iter().map(|&v| v.max(0.0)).collect();
            }
        }
    }
    if let Some(head) = &case.head {
        if case.kind == RegressionKind::Mae && (head.predict(&e_a) - case.mos_norm).abs() < 1e-3 {
            return true;
        }
    }
    false
}

#[test]
fn acceptance_1_gradient_fidelity() {
    let start = Instant::now();
    let step = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC1);
    let mut checked = 0;
    while checked < 100 {
        let case = random_loss_case(&mut rng, checked % 2 == 1);
        if near_kink(&case) {
            continue;
        }
        let analytic = case.analytic_gradient();
        let base = case.param_vector();
        assert_eq!(analytic.len(), base.len());
        for p in 0..base.len() {
            let mut plus = base.clone();
            plus[p] += step;
            let mut minus = base.clone();
            minus[p] -= step;
            let fd = (case.with_params(&plus).loss() - case.with_params(&minus).loss())
                / (2.0 * step);
            assert!(
                grads_match(analytic[p], fd),
                "config {checked}, param {p}: analytic {} vs fd {fd}",
                analytic[p]
            );
        }
        checked += 1;
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(10),
        "gradient check took {elapsed:?}"
    );
    pass("1 gradient fidelity (100 configs, rel err < 1e-4, <10s)");
}

#[test]
fn acceptance_2_margin_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC2);
    for scale_n in [2u32, 5, 10, 100] {
        let hi = scale_n as f64;
        for _ in 0..10_000 {
            let a = rng.gen_range(1.0..=hi);
            let p = rng.gen_range(1.0..=hi);
            let n = rng.gen_range(1.0..=hi);
            let d_ap = (a - p).abs();
            let d_an = (a - n).abs();
            let m = adaptive_margin(d_ap, d_an, scale_n).unwrap();
            assert!((0.0..=1.0).contains(&m));
            // Bit-exact against the defining expression.
            let expected = (d_ap - d_an).abs() / (scale_n - 1) as f64;
            assert_eq!(m.to_bits(), expected.to_bits());
        }
    }
    pass("2 margin law (4 scales x 10,000 triples, bit-exact, in [0,1])");
}

// Classic tie-free Spearman formula, usable only when all ranks are distinct.
fn srocc_classic(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in order.iter().enumerate() {
            r[i] = (pos + 1) as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let k = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 - 6.0 * d2 / (k * (k * k - 1.0))
}

// Brute-force average-rank Pearson oracle (counting-based ranks).
fn srocc_bruteforce(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        (0..v.len())
            .map(|i| {
                let less = v.iter().filter(|&&u| u < v[i]).count();
                let equal = v.iter().filter(|&&u| u == v[i]).count();
                less as f64 + (equal as f64 + 1.0) / 2.0
            })
            .collect()
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..rx.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[test]
fn acceptance_3_srocc_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC3);
    // Tie-free vectors against the classic formula.
    for _ in 0..1000 {
        let k = rng.gen_range(2..=12);
        let x: Vec<f64> = (0..k).map(|i| i as f64 + rng.gen_range(0.0..0.45)).collect();
        let mut y = x.clone();
        y.shuffle(&mut rng);
        let got = srocc(&x, &y).unwrap();
        assert!((got - srocc_classic(&x, &y)).abs() < 1e-12);
    }
    // Vectors with injected ties against the brute-force oracle.
    for _ in 0..1000 {
        let k = rng.gen_range(2..=12);
        let x: Vec<f64> = (0..k).map(|_| rng.gen_range(0..5) as f64).collect();
        let y: Vec<f64> = (0..k).map(|_| rng.gen_range(0..5) as f64).collect();
        let got = srocc(&x, &y).unwrap();
        assert!((got - srocc_bruteforce(&x, &y)).abs() < 1e-12);
    }
    pass("3 srocc oracle equivalence (1000 tie-free + 1000 tied, <1e-12)");
}

#[test]
fn acceptance_4_sampler_counts() {
    let start = Instant::now();
    let spec = SyntheticSpec {
        n_items: 800,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let quads = generate_quadruplets_single(&ds, 150, 4).unwrap();
    assert_eq!(quads.len(), 120_000);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(30), "sampler took {elapsed:?}");
    // Counting law at small scale as well: items * pairs_per_anchor.
    let small = generate_quadruplets_single(&ds, 7, 9).unwrap();
    assert_eq!(small.len(), 800 * 7);
    pass("4 sampler counts (800 items x 150 pairs = 120,000, <30s)");
}

// Full-scale mirror of the sampler-count law: 8,000 anchors times 150
// pairs. Roughly 10x the CI-scale cost, so opt in with `--ignored`.
#[test]
#[ignore = "full-scale sampler mirror; run with --ignored"]
fn sampler_count_full_scale() {
    let spec = SyntheticSpec {
        n_items: 8000,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let quads = generate_quadruplets_single(&ds, 150, 4).unwrap();
    assert_eq!(quads.len(), 1_200_000);
}

// Full-scale pairwise enumeration: 1,302 references with 24 evaluated
// images each give 1302 * C(24,2) = 359,352 candidate triplets before
// tie skips.
#[test]
#[ignore = "full-scale pairwise mirror; run with --ignored"]
fn pairwise_candidate_count_full_scale() {
    let spec = SyntheticSpec {
        n_items: 1302 * 25,
        seed: 12,
        ..SyntheticSpec::default()
    };
    let ds = tripletlearn::data_io::generate_synthetic_pairwise(&spec, 1302, 24).unwrap();
    let report = tripletlearn::sampling::generate_quadruplets_pairwise(&ds, 0).unwrap();
    assert_eq!(
        report.quadruplets.len() as u64 + report.ties_skipped,
        359_352
    );
}

struct Replicate {
    train_ds: FeatureDataset,
    quads: Vec<Quadruplet>,
    test_ids: Vec<String>,
    net: EmbeddingNet,
}

/// Default synthetic benchmark: 2,000 items, seeded 80/20 split, shared
/// quadruplets and initialization per replicate.
fn benchmark_replicate(ds: &FeatureDataset, seed: u64) -> Replicate {
    let mut order: Vec<usize> = (0..ds.items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_test = ds.items.len() / 5;
    let (test_idx, train_idx) = order.split_at(n_test);
    let train_items: Vec<_> = train_idx.iter().map(|&i| ds.items[i].clone()).collect();
    let test_ids: Vec<String> = test_idx.iter().map(|&i| ds.items[i].id.clone()).collect();
    let train_ds = FeatureDataset::new(train_items, ds.scale_n).unwrap();
    let quads = generate_quadruplets_single(&train_ds, 5, seed).unwrap();
    let net = EmbeddingNet::seeded(&[ds.feature_dim(), 32, 16], Activation::Relu, seed).unwrap();
    Replicate {
        train_ds,
        quads,
        test_ids,
        net,
    }
}

fn base_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        seed,
        optimizer: OptimizerSpec::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        ..TrainConfig::default()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

#[test]
fn acceptance_5_fixed_vs_adaptive_analogue() {
    let start = Instant::now();
    let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let mut adaptive = Vec::new();
    let mut fixed = Vec::new();
    let mut regression = Vec::new();
    for seed in 0..5u64 {
        let rep = benchmark_replicate(&ds, seed);

        let cfg = TrainConfig {
            margin_mode: MarginMode::Adaptive,
            ..base_config(seed)
        };
        let (net, _, _) = train(&rep.net, None, &rep.train_ds.items, 5, &rep.quads, &cfg).unwrap();
        adaptive.push(eval_reference(&net, &ds, &rep.test_ids).unwrap().srocc);

        let cfg = TrainConfig {
            margin_mode: MarginMode::Fixed { margin: 0.5 },
            ..base_config(seed)
        };
        let (net, _, _) = train(&rep.net, None, &rep.train_ds.items, 5, &rep.quads, &cfg).unwrap();
        fixed.push(eval_reference(&net, &ds, &rep.test_ids).unwrap().srocc);

        let cfg = TrainConfig {
            loss_weights: LossWeights {
                alpha: 0.0,
                beta: 1.0,
            },
            regression: Some(RegressionKind::Mae),
            ..base_config(seed)
        };
        let head = RegressionHead::seeded(16, seed.wrapping_add(1));
        let (net, head, _) =
            train(&rep.net, Some(&head), &rep.train_ds.items, 5, &rep.quads, &cfg).unwrap();
        regression.push(
            eval_regression(&net, &head.unwrap(), &ds, &rep.test_ids)
                .unwrap()
                .srocc,
        );
    }
    let med_adaptive = median(&mut adaptive);
    let med_fixed = median(&mut fixed);
    let med_regression = median(&mut regression);
    println!(
        "  median srocc: adaptive {med_adaptive:.4}, fixed {med_fixed:.4}, regression {med_regression:.4}"
    );
    assert!(
        med_adaptive >= med_fixed - 0.02,
        "adaptive {med_adaptive} vs fixed {med_fixed}"
    );
    assert!(
        med_adaptive >= med_regression - 0.02,
        "adaptive {med_adaptive} vs regression {med_regression}"
    );
    assert!(med_adaptive > 0.6, "adaptive {med_adaptive} not above 0.6");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    pass("5 fixed-vs-adaptive analogue (median over 5 seeds, <5min)");
}

#[test]
fn acceptance_6_stability_analogue() {
    let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
    for seed in 0..10u64 {
        let rep = benchmark_replicate(&ds, seed);
        let cfg = TrainConfig {
            margin_mode: MarginMode::Adaptive,
            ..base_config(seed)
        };
        let (_, _, report) =
            train(&rep.net, None, &rep.train_ds.items, 5, &rep.quads, &cfg).unwrap();
        assert!(!report.collapsed, "seed {seed} collapsed");
        assert_eq!(report.collapse_epoch, None);
    }
    pass("6 stability analogue (10 adaptive seeds, zero collapses)");
}

#[test]
fn acceptance_7_two_branch_consistency() {
    let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let mut gaps = Vec::new();
    for seed in 0..5u64 {
        let rep = benchmark_replicate(&ds, seed);
        let cfg = TrainConfig {
            loss_weights: LossWeights {
                alpha: 1.0,
                beta: 0.1,
            },
            regression: Some(RegressionKind::Mae),
            ..base_config(seed)
        };
        let head = RegressionHead::seeded(16, seed.wrapping_add(1));
        let (net, head, _) =
            train(&rep.net, Some(&head), &rep.train_ds.items, 5, &rep.quads, &cfg).unwrap();
        let by_reference = eval_reference(&net, &ds, &rep.test_ids).unwrap().srocc;
        let by_regression = eval_regression(&net, &head.unwrap(), &ds, &rep.test_ids)
            .unwrap()
            .srocc;
        gaps.push((by_reference - by_regression).abs());
    }
    let med_gap = median(&mut gaps);
    println!("  median |srocc_reference - srocc_regression| = {med_gap:.4}");
    assert!(med_gap <= 0.05, "branch gap {med_gap}");
    pass("7 two-branch consistency (median gap <= 0.05 over 5 seeds)");
}

#[test]
fn acceptance_9_zero_loss_fixed_point() {
    let ds = generate_synthetic(&SyntheticSpec {
        n_items: 60,
        seed: 9,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let net = EmbeddingNet::seeded(&[ds.feature_dim(), 16, 8], Activation::Relu, 9).unwrap();
    // Assign P/N by current embedding distance with margin 0: every hinge
    // is satisfied from the start.
    let embeddings: Vec<Vec<f64>> = ds
        .items
        .iter()
        .map(|it| net.embed(&it.features).unwrap())
        .collect();
    let mut quads = Vec::new();
    for a in 0..ds.items.len() {
        let x = (a + 1) % ds.items.len();
        let y = (a + 2) % ds.items.len();
        let d_x = embedding_distance(&embeddings[a], &embeddings[x]).unwrap();
        let d_y = embedding_distance(&embeddings[a], &embeddings[y]).unwrap();
        let (p, n) = if d_x <= d_y { (x, y) } else { (y, x) };
        quads.push(Quadruplet {
            anchor_id: ds.items[a].id.clone(),
            positive_id: ds.items[p].id.clone(),
            negative_id: ds.items[n].id.clone(),
            margin: 0.0,
        });
    }
    for optimizer in [OptimizerSpec::Sgd { lr: 0.1 }, OptimizerSpec::default()] {
        let cfg = TrainConfig {
            epochs: 5,
            optimizer,
            ..base_config(9)
        };
        let (trained, _, report) = train(&net, None, &ds.items, 5, &quads, &cfg).unwrap();
        assert_eq!(trained, net, "parameters changed under satisfied hinges");
        assert_eq!(report.mean_triplet_loss, vec![0.0; 5]);
    }
    pass("9 zero-loss fixed point (5 epochs, parameters bit-unchanged)");
}
