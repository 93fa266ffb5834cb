//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! All criteria run sequentially inside a single test so the timed ones
//! (gradient checks, desk-scale training) do not compete with other tests
//! for the CPU. Lines go straight to stderr and show up without
//! `--nocapture`.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use gapnet::attention::GapLayer;
use gapnet::config::{RunConfig, Task};
use gapnet::dataset::PointCloud;
use gapnet::graph::{knn_build, BatchGraph};
use gapnet::model::{ClassifierConfig, Model, ModelConfig, SegmenterConfig};
use gapnet::nn::Ctx;
use gapnet::params::ParamStore;
use gapnet::train::{
    bn_momentum_at_epoch, evaluate, evaluate_miou, lr_at_epoch, mean_part_iou, prepare_eval, shape_iou,
    train_loop, EvalMetrics, SegmentedShape, TrainOptions, TrainOutcome,
};
use gapnet::verify::{micro_classifier_config, micro_segmenter_config, model_gradcheck, randomize_store};
use gapnet::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cls = model_gradcheck(&ModelConfig::Classifier(micro_classifier_config(5)), 1, 7, None).unwrap();
    let seg = model_gradcheck(&ModelConfig::Segmenter(micro_segmenter_config(4)), 1, 7, None).unwrap();
    let elapsed = start.elapsed();
    outcome(
        cls.max_rel_error < 1e-4 && seg.max_rel_error < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "classifier {:.2e} over {} coords, segmenter {:.2e} over {} coords (tol 1e-4), {:.1}s (limit 60s)",
            cls.max_rel_error,
            cls.coordinates,
            seg.max_rel_error,
            seg.coordinates,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn random_layer<T: Real>(rng: &mut ChaCha8Rng, c: usize, heads: usize, channels: usize) -> (GapLayer, ParamStore<T>) {
    let mut store = ParamStore::<f64>::new();
    let layer = GapLayer::new(&mut store, "g", c, heads, channels, rng);
    randomize_store(&mut store, rng);
    (layer, store.cast())
}

fn coefficient_rows<T: Real>(
    layer: &GapLayer,
    store: &ParamStore<T>,
    nodes: &[Vec<f64>],
    k: usize,
) -> Vec<Vec<f64>> {
    let n = nodes.len();
    let c = nodes[0].len();
    let points: Tensor<T> = tensor_of(nodes).cast();
    let graph = knn_build(&points, k).unwrap();
    let mut ctx = Ctx::inference(store);
    let x = ctx.tape.leaf(points.reshape([1, n, c]).unwrap());
    let out = layer
        .forward_on_graph(&mut ctx, x, &BatchGraph::new(&[graph]).unwrap(), false)
        .unwrap();
    out.coefficients
        .iter()
        .flat_map(|&a| rows_of(ctx.value(a)))
        .collect()
}

fn softmax_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst32, mut worst64, mut min_coef, mut rows) = (0.0f64, 0.0f64, f64::INFINITY, 0usize);
    for _ in 0..1000 {
        let n = rng.random_range(2..=40);
        let k = rng.random_range(1..=n.min(20));
        let c = rng.random_range(1..=8);
        let heads = rng.random_range(1..=4);
        let channels = rng.random_range(1..=16);
        let scale = rng.random_range(0.1..3.0);
        let nodes: Vec<Vec<f64>> = random_rows(n, c, &mut rng)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v * scale).collect())
            .collect();
        let seed = rng.random();
        let (layer, store32) = random_layer::<f32>(&mut ChaCha8Rng::seed_from_u64(seed), c, heads, channels);
        let (_, store64) = random_layer::<f64>(&mut ChaCha8Rng::seed_from_u64(seed), c, heads, channels);
        for (store_rows, worst) in [
            (coefficient_rows(&layer, &store32, &nodes, k), &mut worst32),
            (coefficient_rows(&layer, &store64, &nodes, k), &mut worst64),
        ] {
            for row in store_rows {
                *worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                min_coef = min_coef.min(row.iter().cloned().fold(f64::INFINITY, f64::min));
                rows += 1;
            }
        }
    }
    outcome(
        worst32 < 1e-6 && worst64 < 1e-6 && min_coef > 0.0,
        format!(
            "{rows} rows: worst |sum - 1| f32 {worst32:.2e}, f64 {worst64:.2e} (tol 1e-6); min coefficient {min_coef:.2e} (> 0)"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn forward_rows(model: &Model, store: &ParamStore<f32>, rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let points: Tensor<f32> = tensor_of(rows).cast();
    let graph = knn_build(&points, k).unwrap();
    let mut ctx = Ctx::inference(store);
    let x = ctx.tape.leaf(points.reshape([1, rows.len(), 3]).unwrap());
    let out = model.forward(&mut ctx, x, &BatchGraph::new(&[graph]).unwrap()).unwrap();
    rows_of(ctx.value(out))
}

fn permutation_symmetry() -> Outcome {
    let build = |cfg: ModelConfig, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let model = cfg.build(&mut store, &mut rng).unwrap();
        randomize_store(&mut store, &mut rng);
        (model, store.cast::<f32>())
    };
    let (cls, cls_store) = build(ModelConfig::Classifier(ClassifierConfig::default()), 30);
    let (seg, seg_store) = build(ModelConfig::Segmenter(SegmenterConfig::default()), 31);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_cls, mut worst_seg, mut logit_scale) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let rows = random_rows(128, 3, &mut rng);
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();

        let a = forward_rows(&cls, &cls_store, &rows, 20);
        let b = forward_rows(&cls, &cls_store, &shuffled, 20);
        worst_cls = worst_cls.max(max_abs(&a, &b));
        logit_scale = logit_scale.max(a.iter().flatten().fold(0.0, |m, v| m.max(v.abs())));

        let a = forward_rows(&seg, &seg_store, &rows, 20);
        let b = forward_rows(&seg, &seg_store, &shuffled, 20);
        let a_permuted: Vec<Vec<f64>> = perm.iter().map(|&i| a[i].clone()).collect();
        worst_seg = worst_seg.max(max_abs(&a_permuted, &b));
    }
    outcome(
        worst_cls < 1e-4 && worst_seg < 1e-4 && logit_scale > 1e-2,
        format!(
            "100 clouds of 128 points: classifier max |Δlogit| {worst_cls:.2e}, segmenter max |Δrow| {worst_seg:.2e} (tol 1e-4); largest |logit| {logit_scale:.2}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn knn_case(t: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rng.random_range(1..=256);
    match t % 3 {
        0 => random_rows(n, 3, rng),
        // Integer lattice: many exactly equal distances.
        1 => (0..n)
            .map(|_| (0..3).map(|_| rng.random_range(-3i32..=3) as f64).collect())
            .collect(),
        // Duplicated points: equal distances to distinct indices.
        _ => {
            let base = random_rows(n.div_ceil(3).max(1), 3, rng);
            (0..n).map(|_| base[rng.random_range(0..base.len())].clone()).collect()
        }
    }
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut mismatched, mut tie_rows) = (0usize, 0usize);
    for t in 0..200 {
        let rows = knn_case(t, &mut rng);
        let k = rng.random_range(1..=rows.len().min(32));
        let expected = knn_full_sort(&rows, k);
        let got = knn_build(&tensor_of(&rows), k).unwrap();
        for (i, e) in expected.iter().enumerate() {
            mismatched += usize::from(got.row(i) != e.as_slice());
            if k < rows.len() {
                let d = |j: usize| -> f64 { rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum() };
                let mut others: Vec<f64> = (0..rows.len()).filter(|&j| j != i).map(d).collect();
                others.sort_by(f64::total_cmp);
                tie_rows += usize::from(k >= 2 && others[k - 2] == others[k - 1]);
            }
        }
    }

    let (mut head_err, mut pool_err) = (0.0f64, 0.0f64);
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + case);
        let (n, c) = (rng.random_range(4..=24), rng.random_range(1..=6));
        let k = rng.random_range(1..=n.min(8));
        let (heads, channels) = (rng.random_range(1..=3), rng.random_range(1..=8));
        let mut store = ParamStore::<f64>::new();
        let layer = GapLayer::new(&mut store, "g", c, heads, channels, &mut rng);
        randomize_store(&mut store, &mut rng);
        let nodes = random_rows(n, c, &mut rng);
        let neighbors = knn_full_sort(&nodes, k);

        let graph = knn_build(&tensor_of(&nodes), k).unwrap();
        let mut ctx = Ctx::inference(&store);
        let x = ctx.tape.leaf(tensor_of(&nodes).reshape([1, n, c]).unwrap());
        let out = layer
            .forward_on_graph(&mut ctx, x, &BatchGraph::new(&[graph]).unwrap(), false)
            .unwrap();
        let pooled = gapnet::attention::attention_pooling(&mut ctx, out.graph_features).unwrap();

        let refs: Vec<HeadReference> = layer
            .heads()
            .iter()
            .map(|h| head_reference(&store, h, &nodes, &neighbors, false))
            .collect();
        let attention: Vec<Vec<f64>> = (0..n)
            .map(|i| refs.iter().flat_map(|r| r.attention[i].clone()).collect())
            .collect();
        let edges: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|i| {
                (0..k)
                    .map(|j| refs.iter().flat_map(|r| r.encoded_edges[i][j].clone()).collect())
                    .collect()
            })
            .collect();
        head_err = head_err.max(max_abs(&rows_of(ctx.value(out.attention_features)), &attention));
        pool_err = pool_err.max(max_abs(&rows_of(ctx.value(pooled)), &pooling_reference(&edges)));
    }
    outcome(
        mismatched == 0 && head_err < 1e-6 && pool_err < 1e-6,
        format!(
            "kNN: 200 clouds, {mismatched} mismatched rows, {tie_rows} rows with a distance tie at the cut; head vs loop {head_err:.2e}, pooling vs loop {pool_err:.2e} (tol 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn ablation_identity() -> Outcome {
    let (mut mean_err, mut zeroed_err) = (0.0f64, 0.0f64);
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + case);
        let (n, c) = (rng.random_range(3..=24), rng.random_range(1..=6));
        let k = rng.random_range(1..=n.min(8));
        let (heads, channels) = (rng.random_range(1..=4), rng.random_range(1..=8));
        let mut store = ParamStore::<f64>::new();
        let layer = GapLayer::new(&mut store, "g", c, heads, channels, &mut rng);
        randomize_store(&mut store, &mut rng);
        let nodes = random_rows(n, c, &mut rng);
        let neighbors = knn_full_sort(&nodes, k);
        let graph = BatchGraph::new(&[knn_build(&tensor_of(&nodes), k).unwrap()]).unwrap();
        let run = |store: &ParamStore<f64>, constant: bool| {
            let mut ctx = Ctx::inference(store);
            let x = ctx.tape.leaf(tensor_of(&nodes).reshape([1, n, c]).unwrap());
            let out = layer.forward_on_graph(&mut ctx, x, &graph, constant).unwrap();
            rows_of(ctx.value(out.attention_features))
        };
        let constant = run(&store, true);

        let mean: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                layer
                    .heads()
                    .iter()
                    .flat_map(|h| {
                        let r = head_reference(&store, h, &nodes, &neighbors, false);
                        let e = &r.encoded_edges[i];
                        (0..h.out_channels())
                            .map(|f| (e.iter().map(|y| y[f]).sum::<f64>() / k as f64).max(0.0))
                            .collect::<Vec<_>>()
                    })
                    .collect()
            })
            .collect();
        mean_err = mean_err.max(max_abs(&constant, &mean));

        let mut zeroed = store.clone();
        for h in layer.heads() {
            for id in [h.self_proj.weight, h.self_proj.bias, h.edge_proj.weight, h.edge_proj.bias] {
                let shape = zeroed.value(id).shape().to_vec();
                zeroed.get_mut(id).value = Tensor::zeros(shape);
            }
        }
        zeroed_err = zeroed_err.max(max_abs(&run(&zeroed, false), &constant));
    }

    // The constant-coefficient network builds and runs end to end.
    let cfg = ClassifierConfig {
        constant_coefficients: true,
        ..micro_classifier_config(4)
    };
    let mut store = ParamStore::<f32>::new();
    let model = ModelConfig::Classifier(cfg)
        .build(&mut store, &mut ChaCha8Rng::seed_from_u64(5))
        .unwrap();
    let logits = forward_rows(&model, &store, &random_rows(32, 3, &mut ChaCha8Rng::seed_from_u64(6)), 8);
    let runs = logits.len() == 1 && logits[0].len() == 4 && logits[0].iter().all(|v| v.is_finite());

    outcome(
        mean_err < 1e-6 && zeroed_err < 1e-7 && runs,
        format!(
            "constant vs relu(neighbour mean) {mean_err:.2e} (tol 1e-6); vs zeroed projections {zeroed_err:.2e} (tol 1e-7); constant classifier runs: {runs}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn desk_options(task: Task, overrides: &[(&str, &str)]) -> TrainOptions {
    let mut cfg = RunConfig::defaults(task);
    for (k, v) in overrides {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    TrainOptions {
        out_dir: None,
        ..cfg.train_options()
    }
}

fn eval_on(out: &TrainOutcome, opts: &TrainOptions, clouds: &[PointCloud]) -> EvalMetrics {
    let segment = opts.model.is_segmenter();
    let set = prepare_eval(clouds, opts.num_points, opts.k, opts.seed, segment).unwrap();
    evaluate(
        &out.model,
        &out.store,
        &set,
        opts.batch_size,
        opts.model.outputs(),
        out.part_sets.as_deref(),
    )
    .unwrap()
}

fn desk_scale_learning() -> Outcome {
    let train = classification_set(&FOUR_SHAPES, 400, 512, 60);
    let test = classification_set(&FOUR_SHAPES, 100, 512, 61);
    let opts = desk_options(
        Task::Classify,
        &[
            ("num_points", "256"),
            ("k", "10"),
            ("heads", "4"),
            ("channels", "16"),
            ("num_classes", "4"),
            ("width_divisor", "2"),
            ("epochs", "30"),
            ("seed", "6"),
        ],
    );
    let start = Instant::now();
    let out = train_loop(&opts, &train, Some(&test)).unwrap();
    let elapsed = start.elapsed();
    let train_acc = eval_on(&out, &opts, &train).overall;
    let test_acc = out.final_eval.as_ref().unwrap().overall;
    let cls_ok = train_acc >= 0.95 && test_acc >= 0.90 && elapsed < Duration::from_secs(600);

    let seg_train = dumbbell_set(96, 512, 62);
    let seg_test = dumbbell_set(32, 512, 63);
    let seg_opts = desk_options(
        Task::Segment,
        &[
            ("num_points", "256"),
            ("k", "10"),
            ("num_parts", "2"),
            ("width_divisor", "4"),
            ("batch_size", "8"),
            ("epochs", "15"),
            ("seed", "6"),
            ("augment", "false"),
        ],
    );
    let seg_start = Instant::now();
    let seg = train_loop(&seg_opts, &seg_train, Some(&seg_test)).unwrap();
    let seg_elapsed = seg_start.elapsed();
    let m = seg.final_eval.as_ref().unwrap();
    let miou = m.miou.unwrap();
    let seg_ok = m.overall >= 0.90 && miou >= 0.85;

    outcome(
        cls_ok && seg_ok,
        format!(
            "classification: train {train_acc:.4} (>= 0.95), test {test_acc:.4} (>= 0.90), {:.0}s (limit 600s), last-epoch running train acc {:.4}; dumbbell: point accuracy {:.4} (>= 0.90), mIoU {miou:.4} (>= 0.85), {:.0}s",
            elapsed.as_secs_f64(),
            out.rows.last().unwrap().train_acc,
            m.overall,
            seg_elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn schedule_reproduction() -> Outcome {
    let lr_ok = lr_at_epoch(0) == 0.005 && lr_at_epoch(19) == 0.005 && lr_at_epoch(20) == 0.0025;
    let floor_ok = lr_at_epoch(10_000) == 1e-5 && (0..2000).all(|e| lr_at_epoch(e) >= 1e-5);
    let monotone = (1..2000).all(|e| lr_at_epoch(e) <= lr_at_epoch(e - 1));
    let bn_ok = bn_momentum_at_epoch(0) == 0.7
        && bn_momentum_at_epoch(10_000) == 0.99
        && (0..2000).all(|e| bn_momentum_at_epoch(e) <= 0.99);
    outcome(
        lr_ok && floor_ok && monotone && bn_ok,
        format!(
            "lr(0) {}, lr(20) {}, lr(10000) {}, non-increasing {monotone}; bn(0) {}, bn(10000) {}",
            lr_at_epoch(0),
            lr_at_epoch(20),
            lr_at_epoch(10_000),
            bn_momentum_at_epoch(0),
            bn_momentum_at_epoch(10_000)
        ),
    )
}

// ---------------------------------------------------------------- 8

fn miou_definition() -> Outcome {
    let truth = [0, 0, 1, 1, 0, 1];
    let perfect = evaluate_miou(
        &[SegmentedShape {
            predictions: &truth,
            truth: &truth,
            category: 0,
        }],
        &[vec![0, 1]],
    )
    .unwrap()
    .miou;
    // Part 0: 50 shared points out of a 100-point union; part 1 absent from both.
    let half = mean_part_iou(&[(50, 100), (0, 0)]);
    let disjoint = shape_iou(&[1, 1, 0, 0], &[0, 0, 1, 1], &[0, 1]).unwrap();
    outcome(
        perfect == 1.0 && half == 0.75 && disjoint == 0.0,
        format!("perfect {perfect}, half overlap with absent part {half}, disjoint {disjoint}"),
    )
}

// ---------------------------------------------------------------- 9

fn micro_run(dir: &std::path::Path) -> String {
    let train = classification_set(&FOUR_SHAPES, 24, 128, 90);
    let test = classification_set(&FOUR_SHAPES, 12, 128, 91);
    let mut opts = desk_options(
        Task::Classify,
        &[
            ("num_points", "64"),
            ("k", "8"),
            ("heads", "2"),
            ("channels", "4"),
            ("num_classes", "4"),
            ("width_divisor", "8"),
            ("batch_size", "8"),
            ("epochs", "3"),
            ("seed", "9"),
        ],
    );
    opts.out_dir = Some(dir.to_path_buf());
    train_loop(&opts, &train, Some(&test)).unwrap();
    std::fs::read_to_string(dir.join("metrics.csv")).unwrap()
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (la, lb) = (micro_run(a.path()), micro_run(b.path()));
    let ckpt_same = std::fs::read(a.path().join("checkpoint.ckpt")).unwrap()
        == std::fs::read(b.path().join("checkpoint.ckpt")).unwrap();
    outcome(
        la == lb && la.lines().count() == 4 && ckpt_same,
        format!(
            "{} metric rows, logs identical: {}, checkpoints identical: {ckpt_same}",
            la.lines().count() - 1,
            la == lb
        ),
    )
}

// ---------------------------------------------------------------- 10

fn ablation_trend() -> Outcome {
    let mut full = Vec::new();
    let mut constant = Vec::new();
    for seed in 0..3u64 {
        let train = classification_set(&FOUR_SHAPES, 200, 256, 100 + seed);
        let test = classification_set(&FOUR_SHAPES, 100, 256, 200 + seed);
        for (flag, acc) in [("false", &mut full), ("true", &mut constant)] {
            let opts = desk_options(
                Task::Classify,
                &[
                    ("num_points", "64"),
                    ("k", "10"),
                    ("num_classes", "4"),
                    ("width_divisor", "4"),
                    ("epochs", "4"),
                    ("seed", &seed.to_string()),
                    ("constant_coefficients", flag),
                ],
            );
            let out = train_loop(&opts, &train, Some(&test)).unwrap();
            acc.push(out.final_eval.unwrap().overall);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    outcome(
        mean(&full) >= mean(&constant),
        format!(
            "mean test accuracy full {:.4} {:?} vs constant {:.4} {:?} (soft, not gated)",
            mean(&full),
            full,
            mean(&constant),
            constant
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(u32, &str, bool, fn() -> Outcome); 10] = [
        (1, "gradient fidelity", true, gradient_fidelity),
        (2, "softmax/attention contracts", true, softmax_contracts),
        (3, "permutation symmetry", true, permutation_symmetry),
        (4, "oracle equivalence", true, oracle_equivalence),
        (5, "ablation identity", true, ablation_identity),
        (6, "desk-scale learning", true, desk_scale_learning),
        (7, "schedule reproduction", true, schedule_reproduction),
        (8, "mIoU definition", true, miou_definition),
        (9, "determinism", true, determinism),
        (10, "relative ablation trend", false, ablation_trend),
    ];
    // `GAPNET_ACCEPTANCE=6,9` runs a subset; skipped criteria are reported as such.
    let only: Option<Vec<u32>> = std::env::var("GAPNET_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, gated, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            let _ = writeln!(std::io::stderr(), "acceptance SKIP {id:>2} {name}");
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let status = if result.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(
            std::io::stderr(),
            "acceptance {status} {id:>2} {name}: {} [{:.1}s]",
            result.detail,
            start.elapsed().as_secs_f64()
        );
        if gated && !result.passed {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
