mod common;

use common::*;
use gapnet::graph::{knn_build, BatchGraph};
use gapnet::model::{
    parameter_count, read_checkpoint, write_checkpoint, Checkpoint, ClassifierConfig, Model, ModelConfig,
    SegmenterConfig, Stn, StnConfig,
};
use gapnet::nn::{Ctx, Dense};
use gapnet::params::ParamStore;
use gapnet::train::{train_loop, Schedule, TrainOptions};
use gapnet::verify::{micro_classifier_config, micro_segmenter_config, randomize_store};
use gapnet::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, seed: u64) -> Vec<Vec<f64>> {
    random_rows(n, 3, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn forward<T: gapnet::Real>(model: &Model, store: &ParamStore<T>, rows: &[Vec<f64>], k: usize) -> Tensor<T> {
    let points: Tensor<T> = tensor_of(rows).cast();
    let graph = knn_build(&points, k).unwrap();
    let mut ctx = Ctx::inference(store);
    let x = ctx.tape.leaf(points.reshape([1, rows.len(), 3]).unwrap());
    let out = model.forward(&mut ctx, x, &BatchGraph::new(&[graph]).unwrap()).unwrap();
    ctx.value(out).clone()
}

fn randomized(cfg: &ModelConfig, seed: u64) -> (Model, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = cfg.build(&mut store, &mut rng).unwrap();
    randomize_store(&mut store, &mut rng);
    (model, store)
}

#[test]
fn stn_starts_at_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let stn = Stn::new(&StnConfig::default().scaled(4), &mut store, &mut rng);
    for n in [5, 17] {
        let points: Tensor<f32> = tensor_of(&cloud(n, n as u64)).cast();
        let graph = knn_build(&points, 4).unwrap();
        let mut ctx = Ctx::inference(&store);
        let x = ctx.tape.leaf(points.reshape([1, n, 3]).unwrap());
        let (t, moved) = stn.forward(&mut ctx, x, &BatchGraph::new(&[graph]).unwrap()).unwrap();
        assert_eq!(ctx.value(t).shape(), &[1, 3, 3]);
        assert_eq!(ctx.value(t).data(), &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(ctx.value(moved).data(), points.data());
    }
}

#[test]
fn disabling_fresh_stn_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f32>::new();
    let cfg = micro_classifier_config(3);
    let Model::Classifier(with) = Model::build_classifier(&cfg, &mut store, &mut rng).unwrap() else {
        unreachable!()
    };
    let without = Model::Classifier(gapnet::model::Classifier {
        stn: None,
        ..with.clone()
    });
    let rows = cloud(20, 3);
    let a = forward(&Model::Classifier(with), &store, &rows, 5);
    let b = forward(&without, &store, &rows, 5);
    assert_eq!(a.data(), b.data());
}

#[test]
fn output_shapes_follow_config() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = cloud(32, 4);
    let mut store = ParamStore::<f32>::new();
    let cls = ModelConfig::Classifier(ClassifierConfig::default()).build(&mut store, &mut rng).unwrap();
    assert_eq!(forward(&cls, &store, &rows, 20).shape(), &[1, 40]);
    let mut store = ParamStore::<f32>::new();
    let seg = ModelConfig::Segmenter(SegmenterConfig::default()).build(&mut store, &mut rng).unwrap();
    assert_eq!(forward(&seg, &store, &rows, 20).shape(), &[1, 32, 50]);
}

#[test]
fn fresh_models_predict_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f32>::new();
    let model = ModelConfig::Classifier(micro_classifier_config(6)).build(&mut store, &mut rng).unwrap();
    assert!(forward(&model, &store, &cloud(16, 5), 4).data().iter().all(|&v| v == 0.0));
}

#[test]
fn classifier_is_permutation_invariant() {
    let cfg = ModelConfig::Classifier(micro_classifier_config(5));
    let (model, store) = randomized(&cfg, 5);
    let store: ParamStore<f32> = store.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..5 {
        let rows = cloud(48, 100 + trial);
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let a = forward(&model, &store, &rows, 8);
        let b = forward(&model, &store, &shuffled, 8);
        assert!(a.max_abs_diff(&b) < 1e-4);
        assert!(a.data().iter().any(|&v| v.abs() > 1e-3));
    }
}

#[test]
fn segmenter_is_permutation_equivariant() {
    let cfg = ModelConfig::Segmenter(micro_segmenter_config(3));
    let (model, store) = randomized(&cfg, 7);
    let store: ParamStore<f32> = store.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows = cloud(40, 9);
    let mut perm: Vec<usize> = (0..rows.len()).collect();
    perm.shuffle(&mut rng);
    let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let a = rows_of(&forward(&model, &store, &rows, 6));
    let b = rows_of(&forward(&model, &store, &shuffled, 6));
    let a_permuted: Vec<Vec<f64>> = perm.iter().map(|&i| a[i].clone()).collect();
    assert!(max_abs(&a_permuted, &b) < 1e-4);
}

#[test]
fn hidden_activations_are_non_negative() {
    let cfg = ModelConfig::Classifier(micro_classifier_config(4));
    let (model, store) = randomized(&cfg, 10);
    let Model::Classifier(c) = &model else { unreachable!() };
    let mut ctx = Ctx::inference(&store);
    let width = 3 + c.gap.out_channels();
    let x = ctx.tape.leaf(Tensor::new([1, 10, width], (0..10 * width).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
    for h in c.mlp.forward_all(&mut ctx, x).unwrap() {
        assert!(ctx.value(h).data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn parameter_counts() {
    let mut store = ParamStore::<f32>::new();
    Dense::new(&mut store, "a", 3, 64, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(parameter_count(&store), 256);

    let count = |seed| {
        let mut store = ParamStore::<f32>::new();
        ModelConfig::Classifier(ClassifierConfig::default())
            .build(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        parameter_count(&store)
    };
    let full = count(1);
    assert_eq!(full, count(2));
    let mb = full as f64 * 4.0 / 1e6;
    eprintln!("full classifier: {full} parameters, {mb:.1} MB at 4 bytes each (reference figure 22.9 MB)");
    assert!((2.29..229.0).contains(&mb));
}

#[test]
fn checkpoint_restores_outputs() {
    let cfg = ModelConfig::Segmenter(micro_segmenter_config(4));
    let (model, store) = randomized(&cfg, 11);
    let store: ParamStore<f32> = store.cast();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&path, &Checkpoint::from_store("task = segment\n".into(), &store)).unwrap();

    let mut fresh = ParamStore::<f32>::new();
    let rebuilt = cfg.build(&mut fresh, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let ckpt = read_checkpoint(&path).unwrap();
    fresh.load_named(&ckpt.tensors).unwrap();
    let rows = cloud(24, 12);
    assert_eq!(forward(&model, &store, &rows, 5).data(), forward(&rebuilt, &fresh, &rows, 5).data());
    assert_eq!(ckpt.config, "task = segment\n");
}

fn overfit_options(model: ModelConfig, epochs: usize) -> TrainOptions {
    TrainOptions {
        model,
        k: 8,
        num_points: 64,
        batch_size: 8,
        epochs,
        seed: 3,
        schedule: Schedule {
            decay_every: 10_000,
            ..Schedule::default()
        },
        augment: None,
        part_sets: None,
        out_dir: None,
        config_echo: String::new(),
    }
}

#[test]
fn single_batch_overfit() {
    let clouds = classification_set(&FOUR_SHAPES, 8, 64, 21);
    let cfg = ClassifierConfig {
        keep_prob: 1.0,
        ..micro_classifier_config(4)
    };
    let out = train_loop(&overfit_options(ModelConfig::Classifier(cfg), 300), &clouds, None).unwrap();
    let losses: Vec<f64> = out.rows.iter().map(|r| r.train_loss).collect();
    let reached = losses.iter().position(|&l| l < 0.01);
    assert!(reached.is_some(), "final loss {}", losses.last().unwrap());

    let windows: Vec<f64> = losses[..50].chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn segmenter_overfit_trend() {
    let clouds = dumbbell_set(8, 64, 22);
    let cfg = SegmenterConfig {
        keep_prob: 1.0,
        ..micro_segmenter_config(2)
    };
    let out = train_loop(&overfit_options(ModelConfig::Segmenter(cfg), 60), &clouds, None).unwrap();
    let losses: Vec<f64> = out.rows.iter().map(|r| r.train_loss).collect();
    let windows: Vec<f64> = losses[..50].chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    assert!(out.rows.last().unwrap().train_acc >= 0.95, "{:?}", out.rows.last());
}
