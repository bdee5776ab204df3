//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers (visible with `--nocapture`; the harness line itself
//! is the pass/fail record).
//!
//! Heavier end-to-end criteria build a small geo benchmark: 20 classes in 6
//! single-cell locations, trained at desk scale, converted to 8 experts at 2
//! MoE layers.

use std::collections::BTreeSet;
use std::time::Instant;

use geomoe_core::analysis::{self, build_routing_graph, threshold_prune, PercentileMode};
use geomoe_core::data::{self, SyntheticConfig};
use geomoe_core::geocell::{self, CellId, LatLng};
use geomoe_core::model::{
    evaluate, mix_batch, supcon_loss, total_loss, train, BlockSpec, ForwardOpts, GroupLrs,
    LocBlocks, Model, ModelConfig, TrainConfig, TrainSample,
};
use geomoe_core::moe::{self, ConvertOptions, MoeSettings, RouteRecord, RouteTraces};
use geomoe_core::tensor::{finite_diff_check, Graph, Tensor};
use geomoe_core::{checkpoint, Rng};

// ---------------------------------------------------------------- helpers

fn tiny_model_config(num_classes: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        channels: 3,
        blocks: vec![
            BlockSpec {
                layers: 2,
                dim: 24,
                heads: 2,
            },
            BlockSpec {
                layers: 2,
                dim: 32,
                heads: 2,
            },
        ],
        num_classes,
        classifier_expand: 64,
        classifier_bottleneck: 32,
        expert_layers: vec![1, 3],
        loc_encoder: geomoe_core::locenc::GridEncoderConfig {
            num_scales: 6,
            ffn_hidden: 16,
            out_dim: 16,
            ..Default::default()
        },
        seed,
        ..ModelConfig::default()
    }
}

struct GeoBenchmark {
    train: Vec<TrainSample<f32>>,
    val: Vec<TrainSample<f32>>,
    test: Vec<TrainSample<f32>>,
    train_locations: Vec<(LatLng, u32)>,
    /// The six location cells; `cells[0]` holds classes 0..5.
    cells: Vec<CellId>,
}

/// 20 classes spread over 6 distinct level-1 cells: the first location holds
/// 5 classes, the rest 3 each.
fn geo_benchmark(seed: u64) -> GeoBenchmark {
    let centers = [
        (10.0, 10.0),
        (10.0, 100.0),
        (10.0, -100.0),
        (-10.0, 170.0),
        (70.0, 10.0),
        (-70.0, 10.0),
    ];
    let groups: [&[u32]; 6] = [
        &[0, 1, 2, 3, 4],
        &[5, 6, 7],
        &[8, 9, 10],
        &[11, 12, 13],
        &[14, 15, 16],
        &[17, 18, 19],
    ];
    let cells: Vec<CellId> = centers
        .iter()
        .map(|&(lat, lng)| geocell::cell_from_latlng(&LatLng::new(lat, lng).unwrap(), 1).unwrap())
        .collect();
    let distinct: BTreeSet<&CellId> = cells.iter().collect();
    assert_eq!(distinct.len(), 6, "location cells must be distinct");

    let img_cfg = SyntheticConfig {
        num_classes: 20,
        image_size: 16,
        patch_size: 4,
        noise: 0.05,
        seed,
        ..SyntheticConfig::default()
    };
    let mut rng = Rng::new(seed).derive(0xbeec);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut id = 0u64;
    for (g, classes) in groups.iter().enumerate() {
        let (clat, clng) = centers[g];
        for &class in classes.iter() {
            for k in 0..32 {
                let location = LatLng::new(
                    (clat + rng.uniform_range(-2.0, 2.0)).clamp(-89.0, 89.0),
                    (clng + rng.uniform_range(-2.0, 2.0)).clamp(-179.0, 179.0),
                )
                .unwrap();
                assert!(cells[g].contains_point(&location));
                let sample = TrainSample {
                    id,
                    image: data::render_image::<f32>(&img_cfg, class, id),
                    label: class,
                    location,
                };
                id += 1;
                match k {
                    0..=15 => train.push(sample),
                    16..=23 => val.push(sample),
                    _ => test.push(sample),
                }
            }
        }
    }
    let train_locations = train.iter().map(|s| (s.location, s.label)).collect();
    GeoBenchmark {
        train,
        val,
        test,
        train_locations,
        cells,
    }
}

fn dense_train_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        warmup_epochs: 2,
        lrs: GroupLrs::dense_phase(),
        loc_blocks: LocBlocks::All,
        encoder_warm_epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn moe_finetune_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        warmup_epochs: 1,
        lrs: GroupLrs::default(), // experts 1e-3, head 1e-6, backbone 1e-4
        loc_blocks: LocBlocks::All,
        encoder_warm_epochs: 0,
        seed,
        ..TrainConfig::default()
    }
}

/// Train dense -> convert to 8 experts at layers [1,3] -> fine-tune.
fn trained_moe_model(bench: &GeoBenchmark, seed: u64) -> (Model<f32>, f64) {
    let mut model = Model::<f32>::new(tiny_model_config(20, seed)).unwrap();
    let report = train(
        &mut model,
        &bench.train,
        &bench.val,
        &dense_train_config(seed, 24),
    )
    .unwrap();
    assert!(!report.diverged);
    let dense_acc = evaluate(&model, &bench.test, 32).unwrap().accuracy;

    let opts = ConvertOptions {
        settings: MoeSettings {
            experts: 8,
            hidden: 4,
            rank: 8,
            temperature: moe::GATE_TEMPERATURE,
        },
        refine_iters: 5,
        seed,
        ..ConvertOptions::default()
    };
    let (mut converted, _) = moe::convert_to_moe(&model, &bench.train, &opts).unwrap();
    let report = train(
        &mut converted,
        &bench.train,
        &bench.val,
        &moe_finetune_config(seed, 12),
    )
    .unwrap();
    assert!(!report.diverged);
    (converted, dense_acc)
}

// --------------------------------------------------------------- criteria

/// Criterion 1: finite-difference gradient suite on the full training
/// objective of a tiny model, 64-bit, rel err <= 1e-3, under 2 minutes.
#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 4,
        channels: 1,
        blocks: vec![
            BlockSpec {
                layers: 1,
                dim: 16,
                heads: 2,
            },
            BlockSpec {
                layers: 1,
                dim: 16,
                heads: 2,
            },
        ],
        num_classes: 4,
        classifier_expand: 16,
        classifier_bottleneck: 8,
        expert_layers: vec![0, 1],
        loc_encoder: geomoe_core::locenc::GridEncoderConfig {
            num_scales: 4,
            ffn_hidden: 8,
            out_dim: 8,
            ..Default::default()
        },
        seed: 3,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(cfg).unwrap();
    let mut rng = Rng::new(17);
    let images = Tensor::<f64>::randn(&[4, 1, 16, 16], 0.5, &mut rng);
    let labels = [0u32, 1, 2, 0];
    let points: Vec<LatLng> = (0..4)
        .map(|i| LatLng::new(10.0 * i as f64 - 15.0, 20.0 * i as f64 - 30.0).unwrap())
        .collect();
    let mixed = mix_batch(&images, &labels, &points, 4, 0.1, 0.05, &mut rng).unwrap();
    let tcfg = TrainConfig {
        contrastive_weight: 0.01,
        loc_blocks: LocBlocks::All,
        ..TrainConfig::default()
    };

    // eval-mode graph (dropout off) keeps the loss deterministic
    let loss_of = |m: &Model<f64>| -> Result<(f64, _, _), geomoe_core::model::TrainError> {
        let mut r = Rng::new(0);
        let mut fp = m.forward(&mixed.images, &ForwardOpts::eval_hooked(), &mut r)?;
        let breakdown = total_loss(
            m,
            &mut fp,
            &mixed.targets,
            &mixed.dominant_labels,
            &mixed.dominant_points,
            &tcfg,
            false,
            &mut r,
        )?;
        let v = fp.graph.value(breakdown.total).item();
        Ok((v, fp, breakdown))
    };

    let (_, fp, breakdown) = loss_of(&model).unwrap();
    let grads = fp.graph.backward(breakdown.total).unwrap();
    model.params.zero_grads();
    model.params.accumulate(&fp.binding, &grads);

    let mut params = model.params.clone();
    let mut coord_rng = Rng::new(23);
    let report = finite_diff_check(&mut params, 1e-5, 3, &mut coord_rng, |set| {
        model.params = set.clone();
        loss_of(&model)
            .map(|(v, _, _)| v)
            .map_err(|_| geomoe_core::TensorError::NonFinite { op: "total_loss" })
    })
    .unwrap();

    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        report.max_rel_err <= 1e-3,
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
    assert!(elapsed < 120.0, "took {elapsed:.1}s, budget 120s");
    println!(
        "criterion 01 PASS: gradient suite rel err {:.2e} over {} coords in {:.1}s",
        report.max_rel_err, report.coords_checked, elapsed
    );
}

/// Criterion 2: ablating a routed expert zeroes the post-layer patch vector
/// (<= 1e-6 in 32-bit; the residual sum is exact).
#[test]
fn criterion_02_ablation_exactness() {
    let bench = geo_benchmark(2);
    let (mut model, _) = trained_moe_model(&bench, 2);
    let samples = &bench.val[..8.min(bench.val.len())];
    let traces = moe::trace_dataset(&model, samples, 1, 8).unwrap();

    // ablate one expert per MoE layer, then check every routed patch
    for &layer in &[1usize, 3] {
        for target in 0..8usize {
            let routed: Vec<&RouteRecord> = traces
                .records
                .iter()
                .filter(|r| r.layer == layer && r.expert == target)
                .collect();
            if routed.is_empty() {
                continue;
            }
            model.set_ablated(layer, &[target]).unwrap();
            let mut rng = Rng::new(0);
            let per = samples[0].image.numel();
            let mut data = Vec::with_capacity(per * samples.len());
            for s in samples {
                data.extend_from_slice(s.image.data());
            }
            let images = Tensor::from_vec(vec![samples.len(), 3, 16, 16], data).unwrap();
            let fp = model
                .forward(&images, &ForwardOpts::eval(), &mut rng)
                .unwrap();
            let out = fp.graph.value(fp.layer_outputs[layer]);
            let (p, d) = (out.shape()[1], out.shape()[2]);
            for r in &routed {
                let b = samples.iter().position(|s| s.id == r.sample_id).unwrap();
                let row = b * p + r.patch;
                let patch = &out.data()[row * d..(row + 1) * d];
                let max_abs = patch.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
                assert!(
                    max_abs <= 1e-6,
                    "layer {layer} expert {target} patch {} has |v| = {max_abs}",
                    r.patch
                );
            }
            model.set_ablated(layer, &[]).unwrap();
        }
    }
    println!("criterion 02 PASS: ablated patches are exactly zero");
}

fn random_traces(seed: u64, samples: usize) -> RouteTraces {
    let mut rng = Rng::new(seed);
    let mut records = Vec::new();
    for s in 0..samples as u64 {
        for &(layer, patches) in &[(1usize, 16usize), (3, 4)] {
            for p in 0..patches {
                records.push(RouteRecord {
                    sample_id: s,
                    class_id: (s % 7) as u32,
                    cell_token: format!("{}/", s % 6),
                    layer,
                    patch: p,
                    expert: rng.below(8),
                });
            }
        }
    }
    RouteTraces {
        records,
        num_experts: 8,
        moe_layers: vec![1, 3],
    }
}

/// Criterion 3: per-layer-pair weights sum to 1 +- 1e-6 over 1,000 random
/// traces; merging 4 random shardings reproduces the same graph.
#[test]
fn criterion_03_routing_graph_normalization() {
    let traces = random_traces(31, 1000);
    let graph = build_routing_graph(&traces).unwrap();
    for (pi, w) in graph.weights.iter().enumerate() {
        let sum: f64 = w.iter().sum();
        assert!(
            (sum - 1.0).abs() <= 1e-6,
            "pair {:?} weights sum {sum}",
            graph.layer_pairs[pi]
        );
    }

    let mut shard_rng = Rng::new(77);
    for trial in 0..4 {
        let k = 2 + shard_rng.below(4);
        let assignment: Vec<usize> = (0..1000).map(|_| shard_rng.below(k)).collect();
        let mut shards: Vec<RouteTraces> = (0..k)
            .map(|g| RouteTraces {
                records: traces
                    .records
                    .iter()
                    .filter(|r| assignment[r.sample_id as usize] == g)
                    .cloned()
                    .collect(),
                num_experts: 8,
                moe_layers: vec![1, 3],
            })
            .collect();
        // merge order must not matter
        shards.reverse();
        let merged = RouteTraces::merge(shards);
        let g2 = build_routing_graph(&merged).unwrap();
        assert_eq!(graph.counts, g2.counts, "sharding trial {trial}");
        assert_eq!(graph.hash(), g2.hash());
    }
    println!("criterion 03 PASS: normalization and shard-merge invariance on 1000 traces");
}

/// Criterion 4: prune sets grow monotonically over the percentile ladder;
/// p = 0 reproduces baseline accuracy bitwise.
#[test]
fn criterion_04_pruning_monotonicity() {
    let bench = geo_benchmark(4);
    let (mut model, _) = trained_moe_model(&bench, 4);
    let traces = moe::trace_dataset(&model, &bench.val, 1, 32).unwrap();
    let graph = build_routing_graph(&traces).unwrap();

    let ladder = [0.0, 25.0, 50.0, 75.0, 90.0, 99.9];
    let mut prev: Option<BTreeSet<(usize, usize)>> = None;
    for &p in &ladder {
        let set = threshold_prune(&graph, p, PercentileMode::Pooled)
            .unwrap()
            .nodes;
        if let Some(prev) = &prev {
            assert!(
                prev.is_subset(&set),
                "p={p}: prune set shrank from {prev:?} to {set:?}"
            );
        }
        prev = Some(set);
    }

    // p = 0 prunes nothing, so accuracy equals the baseline bitwise
    let p0 = threshold_prune(&graph, 0.0, PercentileMode::Pooled).unwrap();
    assert!(p0.nodes.is_empty());
    let outcome = analysis::evaluate_pruned(&mut model, &p0, &bench.test, 32).unwrap();
    assert_eq!(
        outcome.baseline_acc.to_bits(),
        outcome.pruned_acc.to_bits(),
        "empty prune set must reproduce baseline bitwise"
    );
    println!("criterion 04 PASS: monotone prune ladder; p=0 baseline bitwise");
}

/// Criterion 5: per-expert-importance pruning matches or beats threshold
/// pruning at matched dropped counts in >= 8 of 10 seeds, within 20 minutes.
#[test]
fn criterion_05_method_comparison() {
    let start = Instant::now();
    let mut wins = 0usize;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let bench = geo_benchmark(100 + seed);
        let (mut model, _) = trained_moe_model(&bench, 100 + seed);
        let cell = &bench.cells[0];
        let val_loc = analysis::location_filter(&bench.val, &bench.train_locations, cell).unwrap();
        let test_loc =
            analysis::location_filter(&bench.test, &bench.train_locations, cell).unwrap();

        let traces = moe::trace_dataset(&model, &val_loc, 1, 32).unwrap();
        let graph = build_routing_graph(&traces).unwrap();
        let th = threshold_prune(&graph, 50.0, PercentileMode::Pooled).unwrap();
        let count = th.nodes.len();

        let th_eval = analysis::evaluate_pruned(&mut model, &th, &test_loc, 32).unwrap();
        let baseline = th_eval.baseline_acc;
        let table = analysis::per_expert_importance(&mut model, &val_loc, 32).unwrap();
        let pe = table.least_important_with_loads(count, &graph);
        let pe_eval = analysis::evaluate_pruned(&mut model, &pe, &test_loc, 32).unwrap();

        let ok = pe_eval.pruned_acc >= th_eval.pruned_acc;
        if ok {
            wins += 1;
        }
        lines.push(format!(
            "  seed {seed}: baseline {baseline:.1}%, dropped {count}, threshold {:.2}%, per-expert {:.2}% -> {}",
            th_eval.pruned_acc,
            pe_eval.pruned_acc,
            if ok { "ok" } else { "loss" }
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    for l in &lines {
        println!("{l}");
    }
    assert!(
        wins >= 8,
        "per-expert won only {wins}/10 seeds:\n{}",
        lines.join("\n")
    );
    assert!(elapsed <= 1200.0, "took {elapsed:.0}s, budget 1200s");
    println!("criterion 05 PASS: per-expert >= threshold in {wins}/10 seeds ({elapsed:.0}s)");
}

/// Criterion 6: end-to-end geo specialization. Dense loc-all training beats
/// 3x chance; at the 5-of-20-class location, p50 threshold pruning drops
/// >= 25% of nodes at <= 5 accuracy points, in >= 7 of 10 seeds.
#[test]
fn criterion_06_geo_specialization() {
    let mut ok_seeds = 0usize;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let t0 = Instant::now();
        let bench = geo_benchmark(200 + seed);
        let (mut model, dense_acc) = trained_moe_model(&bench, 200 + seed);
        let chance = 100.0 / 20.0;
        let trained = dense_acc >= 3.0 * chance;

        let cell = &bench.cells[0];
        let val_loc = analysis::location_filter(&bench.val, &bench.train_locations, cell).unwrap();
        let test_loc =
            analysis::location_filter(&bench.test, &bench.train_locations, cell).unwrap();
        let classes: BTreeSet<u32> = test_loc.iter().map(|s| s.label).collect();
        assert_eq!(classes.len(), 5, "location must hold exactly 5 classes");

        let traces = moe::trace_dataset(&model, &val_loc, 1, 32).unwrap();
        let graph = build_routing_graph(&traces).unwrap();
        let prune = threshold_prune(&graph, 50.0, PercentileMode::Pooled).unwrap();
        let total_nodes = graph.layers.len() * graph.num_experts;
        let removed_frac = prune.nodes.len() as f64 / total_nodes as f64;
        let outcome = analysis::evaluate_pruned(&mut model, &prune, &test_loc, 32).unwrap();
        let drop = outcome.baseline_acc - outcome.pruned_acc;

        let per_seed = t0.elapsed().as_secs_f64();
        let ok = trained && removed_frac >= 0.25 && drop <= 5.0;
        if ok {
            ok_seeds += 1;
        }
        lines.push(format!(
            "  seed {seed}: dense {dense_acc:.1}% (3x chance {}), removed {}/{} nodes, drop {drop:.2}pt, {per_seed:.0}s -> {}",
            if trained { "yes" } else { "NO" },
            prune.nodes.len(),
            total_nodes,
            if ok { "ok" } else { "fail" }
        ));
        assert!(
            per_seed <= 900.0,
            "seed {seed} took {per_seed:.0}s, budget 900s"
        );
    }
    for l in &lines {
        println!("{l}");
    }
    assert!(
        ok_seeds >= 7,
        "only {ok_seeds}/10 seeds passed:\n{}",
        lines.join("\n")
    );
    println!("criterion 06 PASS: geo specialization in {ok_seeds}/10 seeds");
}

/// Criterion 7: k-means against the brute-force 2-partition oracle, and
/// Lloyd monotonicity over 100 random 2-D instances.
#[test]
fn criterion_07_kmeans_oracle() {
    // brute force over all 2-partitions of {0, 1, 9, 10}
    let values = [0.0, 1.0, 9.0, 10.0];
    let mut best = (f64::INFINITY, vec![]);
    for mask in 1..15u32 {
        let (mut a, mut b): (Vec<f64>, Vec<f64>) = (vec![], vec![]);
        for (i, &v) in values.iter().enumerate() {
            if mask & (1 << i) != 0 {
                a.push(v)
            } else {
                b.push(v)
            }
        }
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let m = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let (ma, mb) = (m(&a), m(&b));
        let inertia: f64 = a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>()
            + b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>();
        if inertia < best.0 {
            best = (inertia, vec![ma, mb]);
        }
    }
    assert_eq!(best.0, 1.0, "oracle inertia");

    let pts = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![9.0], vec![10.0]]).unwrap();
    let res = moe::kmeans(&pts, 2, 5, &mut Rng::new(9)).unwrap();
    assert!((res.inertia - 1.0).abs() < 1e-12, "inertia {}", res.inertia);
    let mut got: Vec<f64> = res.centroids.data().to_vec();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut want = best.1.clone();
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, want);

    let mut rng = Rng::new(41);
    for trial in 0..100 {
        let pts = Tensor::<f64>::randn(&[50, 2], 1.0, &mut rng);
        let res = moe::kmeans(&pts, 4, 12, &mut Rng::new(trial)).unwrap();
        for w in res.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "trial {trial}: {} -> {}", w[0], w[1]);
        }
    }
    println!("criterion 07 PASS: k-means oracle {{0.5, 9.5}} inertia 1.0; Lloyd monotone x100");
}

/// Criterion 8: analytic SupCon values — ln 3 for identical single-class
/// views, brute-force equality on the orthogonal two-class case.
#[test]
fn criterion_08_supcon_analytic() {
    let mut g = Graph::<f64>::new();
    let row = vec![0.0, 1.0, 0.0];
    let views =
        g.constant(Tensor::from_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap());
    let out = supcon_loss(&mut g, views, &[0, 0, 0, 0], 0.07).unwrap();
    let ln3 = 3.0f64.ln();
    let got = g.value(out.loss).item();
    assert!((got - ln3).abs() <= 1e-5, "got {got}, want ln3 {ln3}");

    // orthogonal 2-class case vs direct summation
    let views_raw = [
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0],
    ];
    let labels = [0u32, 1, 0, 1];
    let tau = 1.0;
    let mut reference = 0.0;
    for i in 0..4 {
        let pos: Vec<usize> = (0..4)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        let denom: f64 = (0..4)
            .filter(|&a| a != i)
            .map(|a| {
                (views_raw[i]
                    .iter()
                    .zip(&views_raw[a])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    / tau)
                    .exp()
            })
            .sum();
        for &p in &pos {
            let num = (views_raw[i]
                .iter()
                .zip(&views_raw[p])
                .map(|(x, y)| x * y)
                .sum::<f64>()
                / tau)
                .exp();
            reference -= (num / denom).ln() / pos.len() as f64;
        }
    }
    reference /= 4.0;

    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::from_rows(&views_raw).unwrap());
    let out = supcon_loss(&mut g, v, &labels, tau).unwrap();
    let got = g.value(out.loss).item();
    assert!(
        (got - reference).abs() <= 1e-6,
        "got {got}, oracle {reference}"
    );
    println!("criterion 08 PASS: supcon ln3 and brute-force equality");
}

/// Criterion 9: geocell suite over 10,000 seeded points and levels 1..12,
/// plus the adaptive partition honoring n_max.
#[test]
fn criterion_09_geocell_suite() {
    let mut rng = Rng::new(2025);
    for _ in 0..10_000 {
        let z = rng.uniform_range(-1.0, 1.0);
        let p = LatLng::new(z.asin().to_degrees(), rng.uniform_range(-180.0, 180.0)).unwrap();
        let mut prev: Option<CellId> = None;
        for level in 1..=12u8 {
            let cell = geocell::cell_from_latlng(&p, level).unwrap();
            // token round-trip
            assert_eq!(CellId::parse(&cell.token()).unwrap(), cell);
            // geometric containment of the point
            assert!(cell.contains_point(&p));
            if let Some(parent) = &prev {
                assert!(parent.contains(&cell));
                let (ps0, ps1, pt0, pt1) = parent.st_bounds();
                let (s0, s1, t0, t1) = cell.st_bounds();
                assert!(s0 >= ps0 && s1 <= ps1 && t0 >= pt0 && t1 <= pt1);
            }
            prev = Some(cell);
        }
    }

    // sibling disjointness at a few random parents
    for _ in 0..200 {
        let z = rng.uniform_range(-1.0, 1.0);
        let p = LatLng::new(z.asin().to_degrees(), rng.uniform_range(-180.0, 180.0)).unwrap();
        let parent = geocell::cell_from_latlng(&p, 6).unwrap();
        let kids = parent.children();
        let (ps0, ps1, pt0, pt1) = parent.st_bounds();
        let mut area = 0.0;
        for (i, a) in kids.iter().enumerate() {
            let (s0, s1, t0, t1) = a.st_bounds();
            area += (s1 - s0) * (t1 - t0);
            for b in kids.iter().skip(i + 1) {
                let (u0, u1, v0, v1) = b.st_bounds();
                let overlap =
                    (s1.min(u1) - s0.max(u0)).max(0.0) * (t1.min(v1) - t0.max(v0)).max(0.0);
                assert_eq!(overlap, 0.0);
            }
        }
        assert!((area - (ps1 - ps0) * (pt1 - pt0)).abs() < 1e-15);
    }

    // adaptive partition honors n_max (default 10,000; smaller here to
    // force splits on a constructed clustered dataset)
    let mut records: Vec<(LatLng, u32)> = Vec::new();
    for k in 0..40 {
        records.push((
            LatLng::new(20.0 + (k % 5) as f64 * 8.0, 15.0 + (k / 5) as f64 * 9.0).unwrap(),
            0,
        ));
    }
    let part = geocell::adaptive_partition(&records, 12, 10).unwrap();
    assert!(!part.truncated);
    assert!(part.max_class_counts.iter().all(|&c| c <= 12));
    let covered: usize = part.counts.iter().sum();
    assert_eq!(covered, records.len());
    // the headline configuration value parses through unchanged
    let big = geocell::adaptive_partition(&records, 10_000, 10).unwrap();
    assert_eq!(big.n_max, 10_000);
    println!("criterion 09 PASS: 10k points x levels 1-12; partition honors n_max");
}

/// Criterion 10: coverage of 200 synthetic classes at the 1% threshold is
/// heavy-tailed: top-decile mean >= 5x the median.
#[test]
fn criterion_10_coverage_power_law() {
    let cfg = SyntheticConfig {
        num_classes: 200,
        samples_per_class: 1,
        seed: 5,
        ..SyntheticConfig::default()
    };
    let manifest = data::generate_synthetic(&cfg).unwrap();
    let prov = manifest.synthetic.as_ref().unwrap();
    let cells = CellId::all_at_level(4);
    let scores = data::range_scores(prov, &cells);
    let stats = analysis::coverage_density(&scores, cells.len(), 0.01, 20).unwrap();
    let median = stats.median();
    let top = stats.top_decile_mean();
    assert!(median > 0.0);
    assert!(
        top >= 5.0 * median,
        "top decile {top:.4} below 5x median {median:.4}"
    );
    println!("criterion 10 PASS: top-decile coverage {top:.3} >= 5x median {median:.4}");
}

/// Criterion 11: checkpoint round trip is bitwise; a corrupted header makes
/// the CLI reject the file with exit code 2.
#[test]
fn criterion_11_checkpoint_round_trip() {
    let dir = std::env::temp_dir().join(format!("geomoe_acc11_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let model = Model::<f32>::new(tiny_model_config(4, 99)).unwrap();
    let path = dir.join("model.gmoe");
    checkpoint::save_model(&model, &path).unwrap();
    let loaded = checkpoint::load_model::<f32>(&path).unwrap();
    let a = model.named_tensors();
    let b = loaded.named_tensors();
    assert_eq!(a.len(), b.len());
    for (name, t) in &a {
        let bits_a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b[name].data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "{name}");
    }

    // corrupt the magic and drive the real binary
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    let bad = dir.join("corrupt.gmoe");
    std::fs::write(&bad, &bytes).unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_geomoe"))
        .args([
            "trace",
            "--ckpt",
            bad.to_str().unwrap(),
            "--data",
            dir.to_str().unwrap(),
            "--out",
            dir.join("t.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("magic"), "stderr: {stderr}");
    std::fs::remove_dir_all(&dir).ok();
    println!("criterion 11 PASS: bitwise round trip; corrupted magic exits 2");
}
