use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{adam_step, evaluate_classification, evaluate_miou, AdamState, Schedule, SegmentedShape};
use crate::dataset::{augment, normalize_unit_sphere, sample_points, AugmentParams, PointCloud};
use crate::error::{Error, Result};
use crate::graph::{knn_build, BatchGraph, KnnGraph};
use crate::model::{write_checkpoint, Checkpoint, Model, ModelConfig};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "epoch,lr,train_loss,train_acc,eval_overall,eval_meanclass,eval_miou";

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub model: ModelConfig,
    pub k: usize,
    pub num_points: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// `None` disables augmentation.
    pub augment: Option<AugmentParams>,
    /// Category → part labels. Derived from the training clouds when `None`.
    pub part_sets: Option<Vec<Vec<usize>>>,
    /// Artifacts (metric log, checkpoints) are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Configuration text stored in checkpoints.
    pub config_echo: String,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.num_points == 0 {
            return Err(Error::config("num_points", "must be positive"));
        }
        if self.k == 0 || self.k > self.num_points {
            return Err(Error::config("k", format!("must be in 1..={}", self.num_points)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "batch norm needs at least 2 clouds per batch"));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_overall: Option<f64>,
    pub eval_meanclass: Option<f64>,
    pub eval_miou: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EpochRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_acc,
            opt(self.eval_overall),
            opt(self.eval_meanclass),
            opt(self.eval_miou)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    /// Cloud accuracy (classification) or point accuracy (segmentation).
    pub overall: f64,
    pub mean_class: Option<f64>,
    pub miou: Option<f64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_category_iou: Vec<Option<f64>>,
}

/// Evaluation clouds after deterministic sampling, normalisation and graph construction.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub points: Vec<Tensor<f32>>,
    pub graphs: Vec<KnnGraph>,
    /// Class label (classification) or category (segmentation).
    pub labels: Vec<usize>,
    pub parts: Vec<Option<Vec<usize>>>,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub rows: Vec<EpochRow>,
    pub part_sets: Option<Vec<Vec<usize>>>,
    pub final_eval: Option<EvalMetrics>,
}

fn prepare_one(
    cloud: &PointCloud,
    num_points: usize,
    k: usize,
    augmentation: Option<&AugmentParams>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, KnnGraph, Option<Vec<usize>>)> {
    let sampled = sample_points(cloud, num_points, rng)?;
    let mut c = normalize_unit_sphere(&sampled).cloud;
    if let Some(a) = augmentation {
        c = augment(&c, rng, a);
    }
    let points: Tensor<f32> = c.points.cast();
    let graph = knn_build(&points, k)?;
    Ok((points, graph, c.part_labels))
}

fn label_of(cloud: &PointCloud, segment: bool) -> Result<usize> {
    let l = if segment { cloud.category.or(Some(0)) } else { cloud.label };
    l.ok_or_else(|| Error::domain("cloud without class label"))
}

/// Sampling uses stream `i` of a generator seeded with `seed`, so cloud `i`
/// always sees the same points.
pub fn prepare_eval(clouds: &[PointCloud], num_points: usize, k: usize, seed: u64, segment: bool) -> Result<PreparedSet> {
    let prepared: Vec<_> = clouds
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let label = label_of(c, segment)?;
            prepare_one(c, num_points, k, None, &mut rng).map(|p| (p, label))
        })
        .collect::<Result<_>>()?;
    let mut set = PreparedSet {
        points: Vec::new(),
        graphs: Vec::new(),
        labels: Vec::new(),
        parts: Vec::new(),
    };
    for ((p, g, parts), label) in prepared {
        set.points.push(p);
        set.graphs.push(g);
        set.parts.push(parts);
        set.labels.push(label);
    }
    Ok(set)
}

/// Sorted part labels seen per category.
pub fn derive_part_sets(clouds: &[PointCloud]) -> Result<Vec<Vec<usize>>> {
    let mut sets: Vec<BTreeSet<usize>> = Vec::new();
    for c in clouds {
        let cat = c.category.unwrap_or(0);
        let parts = c
            .part_labels
            .as_ref()
            .ok_or_else(|| Error::domain("segmentation cloud without part labels"))?;
        if sets.len() <= cat {
            sets.resize_with(cat + 1, BTreeSet::new);
        }
        sets[cat].extend(parts.iter().copied());
    }
    Ok(sets.into_iter().map(|s| s.into_iter().collect()).collect())
}

fn stack(points: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let n = points[0].shape()[0];
    let data = points.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(vec![points.len(), n, 3], data)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn restricted_argmax(row: &[f32], allowed: &[usize]) -> usize {
    let mut best = allowed[0];
    for &p in allowed {
        if row[p] > row[best] {
            best = p;
        }
    }
    best
}

/// Inference-mode metrics. Segmentation predictions are restricted to the
/// parts of each shape's category.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    set: &PreparedSet,
    batch_size: usize,
    num_outputs: usize,
    part_sets: Option<&[Vec<usize>]>,
) -> Result<EvalMetrics> {
    if set.is_empty() {
        return Err(Error::domain("cannot evaluate an empty dataset"));
    }
    let segment = matches!(model, Model::Segmenter(_));
    let mut predictions: Vec<Vec<usize>> = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let pts: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &set.points[i]).collect();
        let graphs: Vec<KnnGraph> = chunk.iter().map(|&i| set.graphs[i].clone()).collect();
        let mut ctx = Ctx::inference(store);
        let x = ctx.tape.leaf(stack(&pts)?);
        let logits = model.forward(&mut ctx, x, &BatchGraph::new(&graphs)?)?;
        let values = ctx.value(logits);
        if segment {
            let n = pts[0].shape()[0];
            for (row_block, &i) in values.data().chunks(n * num_outputs).zip(chunk) {
                let allowed = part_sets.and_then(|s| s.get(set.labels[i]));
                predictions.push(
                    row_block
                        .chunks(num_outputs)
                        .map(|r| match allowed {
                            Some(a) if !a.is_empty() => restricted_argmax(r, a),
                            _ => argmax(r),
                        })
                        .collect(),
                );
            }
        } else {
            predictions.extend(values.data().chunks(num_outputs).map(|r| vec![argmax(r)]));
        }
    }
    if segment {
        let truths: Vec<&Vec<usize>> = set
            .parts
            .iter()
            .map(|p| p.as_ref().ok_or_else(|| Error::domain("evaluation cloud without part labels")))
            .collect::<Result<_>>()?;
        let (mut hit, mut total) = (0usize, 0usize);
        for (p, t) in predictions.iter().zip(&truths) {
            hit += p.iter().zip(t.iter()).filter(|(a, b)| a == b).count();
            total += t.len();
        }
        let derived;
        let sets = match part_sets {
            Some(s) => s,
            None => {
                derived = (0..=set.labels.iter().copied().max().unwrap_or(0))
                    .map(|_| (0..num_outputs).collect())
                    .collect::<Vec<Vec<usize>>>();
                &derived
            }
        };
        let shapes: Vec<SegmentedShape<'_>> = predictions
            .iter()
            .zip(&truths)
            .zip(&set.labels)
            .map(|((p, t), &category)| SegmentedShape {
                predictions: p,
                truth: t,
                category,
            })
            .collect();
        let report = evaluate_miou(&shapes, sets)?;
        Ok(EvalMetrics {
            overall: hit as f64 / total as f64,
            mean_class: None,
            miou: Some(report.miou),
            per_class_accuracy: Vec::new(),
            per_category_iou: report.per_category,
        })
    } else {
        let flat: Vec<usize> = predictions.iter().map(|p| p[0]).collect();
        let m = evaluate_classification(&flat, &set.labels, num_outputs)?;
        Ok(EvalMetrics {
            overall: m.overall_accuracy,
            mean_class: Some(m.mean_class_accuracy),
            miou: None,
            per_class_accuracy: m.per_class_accuracy,
            per_category_iou: Vec::new(),
        })
    }
}

pub fn format_part_sets(sets: &[Vec<usize>]) -> String {
    sets.iter()
        .map(|s| s.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn parse_part_sets(text: &str) -> Result<Vec<Vec<usize>>> {
    text.split(';')
        .map(|group| {
            let parts: Vec<usize> = group
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::config("part_sets", format!("invalid part `{t}`"))))
                .collect::<Result<_>>()?;
            if parts.is_empty() {
                return Err(Error::config("part_sets", "empty category"));
            }
            Ok(parts)
        })
        .collect()
}

fn save(dir: &Path, name: &str, echo: &str, store: &ParamStore<f32>) -> Result<()> {
    write_checkpoint(&dir.join(name), &Checkpoint::from_store(echo.to_string(), store))
}

/// Runs `opts.epochs` epochs of shuffled mini-batch Adam on `train`,
/// evaluating on `eval` after every epoch when given.
pub fn train_loop(opts: &TrainOptions, train: &[PointCloud], eval: Option<&[PointCloud]>) -> Result<TrainOutcome> {
    opts.validate()?;
    let segment = opts.model.is_segmenter();
    let outputs = opts.model.outputs();
    if train.len() < 2 {
        return Err(Error::domain("need at least two training clouds"));
    }
    for c in train.iter().chain(eval.into_iter().flatten()) {
        if segment {
            let parts = c
                .part_labels
                .as_ref()
                .ok_or_else(|| Error::domain("segmentation cloud without part labels"))?;
            if let Some(&bad) = parts.iter().find(|&&p| p >= outputs) {
                return Err(Error::config("num_parts", format!("part label {bad} needs num_parts > {bad}")));
            }
        } else {
            let l = label_of(c, false)?;
            if l >= outputs {
                return Err(Error::config("num_classes", format!("label {l} needs num_classes > {l}")));
            }
        }
    }
    let part_sets = if segment {
        Some(match &opts.part_sets {
            Some(s) => s.clone(),
            None => derive_part_sets(train)?,
        })
    } else {
        None
    };
    let mut echo = opts.config_echo.clone();
    if let Some(s) = &part_sets {
        let _ = writeln!(echo, "part_sets = {}", format_part_sets(s));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::<f32>::new();
    let model = opts.model.build(&mut store, &mut rng)?;
    let mut adam = AdamState::new(&store);
    let eval_set = match eval {
        Some(e) if !e.is_empty() => Some(prepare_eval(e, opts.num_points, opts.k, opts.seed, segment)?),
        _ => None,
    };

    let mut csv = format!("{CSV_HEADER}\n");
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(dir.join("metrics.csv"), &csv).map_err(|e| Error::io(dir, e))?;
    }

    let mut rows = Vec::with_capacity(opts.epochs);
    let mut final_eval = None;
    let mut best = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..opts.epochs {
        let lr = opts.schedule.lr(epoch);
        let momentum = opts.schedule.bn_momentum(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen, mut hits, mut judged) = (0.0f64, 0usize, 0usize, 0usize);
        for batch in order.chunks(opts.batch_size).filter(|b| b.len() > 1) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let prepared: Vec<_> = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &s)| {
                    let mut r = ChaCha8Rng::seed_from_u64(s);
                    prepare_one(&train[i], opts.num_points, opts.k, opts.augment.as_ref(), &mut r)
                })
                .collect::<Result<_>>()?;
            let pts: Vec<&Tensor<f32>> = prepared.iter().map(|p| &p.0).collect();
            let graphs: Vec<KnnGraph> = prepared.iter().map(|p| p.1.clone()).collect();
            let labels: Vec<usize> = if segment {
                prepared.iter().flat_map(|p| p.2.clone().unwrap_or_default()).collect()
            } else {
                batch.iter().map(|&i| label_of(&train[i], false)).collect::<Result<_>>()?
            };

            let mut ctx = Ctx::new(&store, true, rng.random());
            let x = ctx.tape.leaf(stack(&pts)?);
            let logits = model.forward(&mut ctx, x, &BatchGraph::new(&graphs)?)?;
            let flat = ctx.tape.reshape(logits, &[labels.len(), outputs])?;
            let loss = ctx.tape.softmax_cross_entropy(flat, &labels)?;
            let loss_value = ctx.value(loss).item() as f64;
            hits += ctx
                .value(flat)
                .data()
                .chunks(outputs)
                .zip(&labels)
                .filter(|(r, &l)| argmax(r) == l)
                .count();
            judged += labels.len();
            let mut tape = ctx.into_tape();
            let grads = tape.backward(loss)?;
            let stats = tape.take_bn_stats();
            drop(tape);
            grads.accumulate_into(&mut store);
            adam_step(&mut store, &mut adam, lr);
            for s in &stats {
                s.apply(&mut store, momentum);
            }
            loss_sum += loss_value * batch.len() as f64;
            seen += batch.len();
        }
        let metrics = match &eval_set {
            Some(set) => Some(evaluate(&model, &store, set, opts.batch_size, outputs, part_sets.as_deref())?),
            None => None,
        };
        let row = EpochRow {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: hits as f64 / judged.max(1) as f64,
            eval_overall: metrics.as_ref().map(|m| m.overall),
            eval_meanclass: metrics.as_ref().and_then(|m| m.mean_class),
            eval_miou: metrics.as_ref().and_then(|m| m.miou),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} train acc {:.4} eval {:?}",
            row.train_loss,
            row.train_acc,
            row.eval_overall
        );
        let score = row.eval_miou.or(row.eval_overall).unwrap_or(row.train_acc);
        let _ = writeln!(csv, "{}", row.to_csv());
        if let Some(dir) = &opts.out_dir {
            fs::write(dir.join("metrics.csv"), &csv).map_err(|e| Error::io(dir, e))?;
            if score > best {
                save(dir, "best.ckpt", &echo, &store)?;
            }
        }
        best = best.max(score);
        rows.push(row);
        final_eval = metrics;
    }
    if let Some(dir) = &opts.out_dir {
        save(dir, "checkpoint.ckpt", &echo, &store)?;
    }
    Ok(TrainOutcome {
        model,
        store,
        rows,
        part_sets,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::Generator;
    use crate::model::{shrink, ClassifierConfig, SegmenterConfig};

    fn clouds(shapes: &[Generator], count: usize, n: usize, seed: u64) -> Vec<PointCloud> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let class = i % shapes.len();
                let mut c = shapes[class].generate(n, &mut rng).unwrap();
                c.label = Some(class);
                c.category = Some(class);
                c
            })
            .collect()
    }

    fn tiny_classifier(classes: usize) -> ModelConfig {
        ModelConfig::Classifier(ClassifierConfig {
            stn: None,
            heads: 2,
            channels: 4,
            mlp: shrink(&[64, 64, 64, 128], 8),
            fuse: 32,
            head: vec![16],
            num_classes: classes,
            ..ClassifierConfig::default()
        })
    }

    fn options(model: ModelConfig, epochs: usize) -> TrainOptions {
        TrainOptions {
            model,
            k: 4,
            num_points: 32,
            batch_size: 4,
            epochs,
            seed: 3,
            schedule: Schedule::default(),
            augment: Some(AugmentParams::default()),
            part_sets: None,
            out_dir: None,
            config_echo: String::new(),
        }
    }

    #[test]
    fn first_epoch_loss_near_uniform() {
        let shapes = [Generator::Sphere, Generator::Cube, Generator::Plane, Generator::Dumbbell];
        let train = clouds(&shapes, 16, 40, 1);
        let out = train_loop(&options(tiny_classifier(4), 1), &train, None).unwrap();
        assert!(out.rows[0].train_loss <= (4f64).ln() + 0.5, "{:?}", out.rows[0]);
    }

    #[test]
    fn zero_epochs_writes_header_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = options(tiny_classifier(2), 0);
        opts.out_dir = Some(dir.path().to_path_buf());
        let train = clouds(&[Generator::Sphere, Generator::Cube], 4, 40, 2);
        let out = train_loop(&opts, &train, None).unwrap();
        assert!(out.rows.is_empty());
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv, format!("{CSV_HEADER}\n"));
        assert!(dir.path().join("checkpoint.ckpt").exists());
    }

    #[test]
    fn invalid_options_rejected_before_training() {
        let mut opts = options(tiny_classifier(2), 1);
        opts.k = 100;
        let train = clouds(&[Generator::Sphere, Generator::Cube], 4, 40, 2);
        assert!(matches!(train_loop(&opts, &train, None), Err(Error::Config { field, .. }) if field == "k"));
        let opts = options(tiny_classifier(1), 1);
        assert!(matches!(
            train_loop(&opts, &train, None),
            Err(Error::Config { field, .. }) if field == "num_classes"
        ));
    }

    #[test]
    fn segmentation_runs_and_derives_parts() {
        let model = ModelConfig::Segmenter(SegmenterConfig {
            stn: None,
            heads: 2,
            channels: 4,
            mlp1: vec![8, 8],
            heads2: 2,
            channels2: 4,
            mlp2: vec![8, 16],
            fuse: 16,
            head: vec![8],
            num_parts: 2,
            ..SegmenterConfig::default()
        });
        let train = clouds(&[Generator::Dumbbell], 6, 40, 5);
        let out = train_loop(&options(model, 1), &train, Some(&train[..2])).unwrap();
        assert_eq!(out.part_sets, Some(vec![vec![0, 1]]));
        let m = out.final_eval.unwrap();
        assert!(m.miou.is_some() && m.mean_class.is_none());
        let csv = out.rows[0].to_csv();
        let fields: Vec<&str> = csv.split(',').collect();
        assert_eq!(fields[5], "");
        assert!(!fields[6].is_empty());
    }

    #[test]
    fn part_set_text_round_trip() {
        let sets = vec![vec![0, 1], vec![2, 3, 4]];
        assert_eq!(format_part_sets(&sets), "0 1; 2 3 4");
        assert_eq!(parse_part_sets(&format_part_sets(&sets)).unwrap(), sets);
        assert!(parse_part_sets("0 1;;2").is_err());
    }

    #[test]
    fn csv_row_leaves_missing_fields_empty() {
        let row = EpochRow {
            epoch: 2,
            lr: 0.005,
            train_loss: 1.5,
            train_acc: 0.25,
            eval_overall: Some(0.5),
            eval_meanclass: Some(0.5),
            eval_miou: None,
        };
        assert_eq!(row.to_csv(), "2,0.005,1.5,0.25,0.5,0.5,");
    }
}
