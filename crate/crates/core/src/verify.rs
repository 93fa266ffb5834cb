//! Self-verification suites: finite-difference gradient checks, the kNN
//! full-sort oracle and hand-computed metric cases.

use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients_with_fault, GradCheckReport};
use crate::graph::{knn_build, BatchGraph, KnnGraph};
use crate::model::{shrink, ClassifierConfig, ModelConfig, SegmenterConfig, StnConfig};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{bn_momentum_at_epoch, evaluate_classification, lr_at_epoch, mean_part_iou, shape_iou};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Gradcheck,
    Knn,
    Metrics,
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Scope::Gradcheck),
            "knn" => Ok(Scope::Knn),
            "metrics" => Ok(Scope::Metrics),
            "all" => Ok(Scope::All),
            other => Err(Error::config("scope", format!("unknown scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (relative for gradients, mismatch count for oracles).
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, worst: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: worst <= tolerance,
            worst,
            tolerance,
            detail: detail.into(),
        }
    }
}

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Scale applied to model outputs before contraction. The relative error has
/// an absolute floor of 1e-8, while f64 roundoff in an O(1) objective is about
/// 1e-10 at this step; a small objective keeps roundoff on structurally zero
/// gradients (softmax shift invariance) below the tolerance.
pub const GRADCHECK_OBJECTIVE_SCALE: f64 = 1e-3;

/// Micro classifier: `M = 2`, `F' = 4`, every other width divided by 8.
pub fn micro_classifier_config(num_classes: usize) -> ClassifierConfig {
    let base = ClassifierConfig::default();
    ClassifierConfig {
        stn: Some(StnConfig::default().scaled(8)),
        heads: 2,
        channels: 4,
        mlp: shrink(&base.mlp, 8),
        fuse: base.fuse / 8,
        head: shrink(&base.head, 8),
        num_classes,
        ..base
    }
}

/// Micro segmenter: `M = 2`, `F' = 4` in both attention layers, widths divided by 8.
pub fn micro_segmenter_config(num_parts: usize) -> SegmenterConfig {
    let base = SegmenterConfig::default();
    SegmenterConfig {
        stn: Some(StnConfig::default().scaled(8)),
        heads: 2,
        channels: 4,
        mlp1: shrink(&base.mlp1, 8),
        heads2: 2,
        channels2: 4,
        mlp2: shrink(&base.mlp2, 8),
        fuse: base.fuse / 8,
        head: shrink(&base.head, 8),
        num_parts,
        ..base
    }
}

/// Moves every parameter and running statistic away from its structured
/// initial value so no gradient is trivially zero.
pub fn randomize_store<R: Rng + ?Sized>(store: &mut ParamStore<f64>, rng: &mut R) {
    for (name, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = if name.ends_with(".gamma") {
                rng.random_range(0.5..1.5)
            } else {
                *v + rng.random_range(-0.1..0.1)
            };
        }
    }
    for (name, t) in store.buffers_mut() {
        for v in t.data_mut() {
            *v = if name.ends_with("running_var") {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-0.1..0.1)
            };
        }
    }
}

/// `b` clouds of `n` uniform points in the unit cube with their kNN graphs.
pub fn random_batch(b: usize, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, Vec<KnnGraph>)> {
    let mut data = Vec::with_capacity(b * n * 3);
    let mut graphs = Vec::with_capacity(b);
    for _ in 0..b {
        let pts: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::new(vec![n, 3], pts.clone())?;
        graphs.push(knn_build(&t, k)?);
        data.extend(pts);
    }
    Ok((Tensor::new(vec![b, n, 3], data)?, graphs))
}

/// Contracts `out` with a fixed random tensor so every output coordinate
/// contributes with a distinct weight.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let len = shape.iter().product();
    let w = Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = tape.leaf(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// End-to-end gradient check of a model in inference mode on `batch` clouds
/// of 16 points with `k = 4`.
pub fn model_gradcheck(model: &ModelConfig, batch: usize, seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let net = model.build(&mut store, &mut rng)?;
    randomize_store(&mut store, &mut rng);
    let (points, graphs) = random_batch(batch, 16, 4, &mut rng)?;
    let graph = BatchGraph::new(&graphs)?;
    check_gradients_with_fault(&store, GRADCHECK_STEP, fault, |s, tape| {
        let mut ctx = Ctx::with_tape(s, std::mem::take(tape), false, 0);
        let x = ctx.tape.leaf(points.clone());
        let logits = net.forward(&mut ctx, x, &graph)?;
        *tape = ctx.into_tape();
        let logits = tape.scale(logits, GRADCHECK_OBJECTIVE_SCALE);
        contract(tape, logits, seed ^ 0x5eed)
    })
}

fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(0.2..1.0);
    if rng.random::<bool>() {
        m
    } else {
        -m
    }
}

fn param_tensor(store: &mut ParamStore<f64>, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> crate::params::ParamId {
    let len = shape.iter().product();
    let data = (0..len).map(|_| away_from_zero(rng)).collect();
    store.add(name, Tensor::new(shape.to_vec(), data).expect("probe shape"))
}

/// Gradient check of a small graph exercising `kind`.
pub fn op_gradcheck(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let x = param_tensor(&mut store, "x", &[2, 3, 4], &mut rng);
    let y = param_tensor(&mut store, "y", &[2, 3, 4], &mut rng);
    let w = param_tensor(&mut store, "w", &[4, 5], &mut rng);
    let b = param_tensor(&mut store, "b", &[5], &mut rng);
    let nb: Arc<[usize]> = (0..6).flat_map(|r| [r, (r + 1) % 6, (r + 4) % 6]).collect();
    check_gradients_with_fault(&store, GRADCHECK_STEP, fault, move |s, tape| {
        let (xv, yv, wv, bv) = (tape.param(s, x), tape.param(s, y), tape.param(s, w), tape.param(s, b));
        let out = match kind {
            OpKind::Leaf | OpKind::Param | OpKind::Mul | OpKind::Sum => tape.mul(xv, yv)?,
            OpKind::Affine => tape.affine(xv, wv, bv)?,
            OpKind::LeakyRelu => tape.leaky_relu(xv, 0.2)?,
            OpKind::Relu => tape.relu(xv),
            OpKind::Softmax => {
                let a = tape.softmax(xv, 2)?;
                let b = tape.softmax(yv, 1)?;
                tape.add(a, b)?
            }
            OpKind::MaxAxis => {
                let (a, _) = tape.max_axis(xv, 1)?;
                let (b, _) = tape.max_axis(yv, 2)?;
                let b = tape.reshape(b, &[2, 3, 1])?;
                let a = tape.reshape(a, &[2, 4, 1])?;
                tape.concat(&[a, b], 1)?
            }
            OpKind::Concat => {
                let a = tape.concat(&[xv, yv], 2)?;
                let b = tape.concat(&[yv, xv], 0)?;
                let b = tape.reshape(b, &[2, 3, 8])?;
                tape.add(a, b)?
            }
            OpKind::Narrow => tape.narrow(xv, 2, 1, 2)?,
            OpKind::BatchNorm => {
                let gamma = tape.narrow(bv, 0, 0, 4)?;
                let beta = tape.narrow(bv, 0, 1, 4)?;
                let mean = [0.1, -0.2, 0.05, 0.0];
                let var = [1.2, 0.7, 0.9, 1.0];
                let (train, _) = tape.batch_norm(xv, gamma, beta, &mean, &var, true)?;
                let (infer, _) = tape.batch_norm(yv, gamma, beta, &mean, &var, false)?;
                tape.add(train, infer)?
            }
            OpKind::Dropout => {
                let mut r = ChaCha8Rng::seed_from_u64(11);
                tape.dropout(xv, 0.6, true, &mut r)?
            }
            OpKind::SoftmaxCrossEntropy => {
                let logits = tape.reshape(xv, &[6, 4])?;
                return tape.softmax_cross_entropy(logits, &[0, 3, 1, 2, 2, 0]);
            }
            OpKind::EdgeFeatures => tape.edge_features(xv, nb.clone(), 3)?,
            OpKind::AddExpandLast => {
                let z = tape.narrow(yv, 2, 0, 1)?;
                let z = tape.reshape(z, &[2, 3])?;
                tape.add_expand_last(xv, z)?
            }
            OpKind::WeightedNeighborSum => {
                let e = tape.edge_features(yv, nb.clone(), 3)?;
                let wts = tape.narrow(xv, 2, 0, 3)?;
                let wts = tape.softmax(wts, 2)?;
                tape.weighted_neighbor_sum(wts, e)?
            }
            OpKind::BatchMatmul => {
                let t = tape.narrow(yv, 1, 0, 3)?;
                let t = tape.narrow(t, 2, 0, 3)?;
                let pts = tape.narrow(xv, 2, 0, 3)?;
                tape.batch_matmul(pts, t)?
            }
            OpKind::Expand => {
                let r = tape.narrow(xv, 1, 0, 1)?;
                let r = tape.reshape(r, &[2, 4])?;
                tape.expand(r, 3)?
            }
            OpKind::Reshape => tape.reshape(xv, &[6, 4])?,
            OpKind::Add => tape.add(xv, yv)?,
            OpKind::Scale => tape.scale(xv, -1.7),
        };
        contract(tape, out, seed ^ 0xc0ffee)
    })
}

fn gradcheck_detail(r: &GradCheckReport) -> String {
    match &r.worst {
        Some(w) => format!(
            "{} coords, worst {}[{}] analytic {:.6e} numeric {:.6e}",
            r.coordinates, w.param, w.index, w.analytic, w.numeric
        ),
        None => format!("{} coords", r.coordinates),
    }
}

fn gradcheck_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        if kind == OpKind::Leaf {
            continue;
        }
        let r = op_gradcheck(kind, seed, fault)?;
        out.push(CheckResult::new(
            format!("gradcheck/op/{kind}"),
            r.max_rel_error,
            GRADCHECK_TOLERANCE,
            gradcheck_detail(&r),
        ));
    }
    let models = [
        ("classifier", ModelConfig::Classifier(micro_classifier_config(5))),
        ("segmenter", ModelConfig::Segmenter(micro_segmenter_config(4))),
    ];
    for (name, cfg) in models {
        let start = Instant::now();
        let r = model_gradcheck(&cfg, 1, seed, fault)?;
        out.push(CheckResult::new(
            format!("gradcheck/{name}"),
            r.max_rel_error,
            GRADCHECK_TOLERANCE,
            format!("{} in {:.1}s", gradcheck_detail(&r), start.elapsed().as_secs_f64()),
        ));
    }
    Ok(out)
}

/// Every other index of row `i` ordered by `(squared distance, index)`.
fn sorted_others(points: &Tensor<f64>, i: usize) -> Vec<(f64, usize)> {
    let (n, c) = (points.shape()[0], points.shape()[1]);
    let d = points.data();
    let mut all: Vec<(f64, usize)> = (0..n)
        .filter(|&j| j != i)
        .map(|j| {
            let mut s = 0.0;
            for a in 0..c {
                let diff = d[i * c + a] - d[j * c + a];
                s += diff * diff;
            }
            (s, j)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all
}

/// Full-sort oracle for [`knn_build`]: self first, then the `k − 1` nearest others.
pub fn knn_oracle(points: &Tensor<f64>, k: usize) -> Vec<usize> {
    (0..points.shape()[0])
        .flat_map(|i| std::iter::once(i).chain(sorted_others(points, i).into_iter().take(k - 1).map(|(_, j)| j)))
        .collect()
}

/// Random clouds, plus lattices and duplicated points that force distance ties.
pub fn knn_cases(count: usize, seed: u64) -> Vec<(Tensor<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|c| {
            let n = rng.random_range(1..=256usize);
            let pts: Vec<f64> = match c % 3 {
                0 => (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                1 => (0..n * 3).map(|_| rng.random_range(0..4) as f64).collect(),
                _ => {
                    let base: Vec<f64> = (0..(n.div_ceil(2)) * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
                    base.iter().chain(&base).copied().take(n * 3).collect()
                }
            };
            let k = rng.random_range(1..=n.min(32));
            (Tensor::new(vec![n, 3], pts).expect("cloud"), k)
        })
        .collect()
}

fn knn_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let cases = knn_cases(200, seed);
    let mut mismatched = 0usize;
    let mut ties = 0usize;
    for (pts, k) in &cases {
        let g = knn_build(pts, *k)?;
        if g.indices() != knn_oracle(pts, *k).as_slice() {
            mismatched += 1;
        }
        for i in 0..pts.shape()[0] {
            let row = sorted_others(pts, i);
            ties += usize::from(*k >= 2 && *k <= row.len() && row[*k - 2].0 == row[*k - 1].0);
        }
    }
    Ok(vec![CheckResult::new(
        "knn/full-sort-oracle",
        mismatched as f64,
        0.0,
        format!("{} clouds, {} rows with boundary ties, {} mismatches", cases.len(), ties, mismatched),
    )])
}

fn metrics_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let perfect = [0, 0, 1, 1];
    let cases = [
        ("perfect", shape_iou(&perfect, &perfect, &[0, 1])?, 1.0),
        ("half-overlap-absent-part", mean_part_iou(&[(50, 100), (0, 0)]), 0.75),
        ("disjoint", shape_iou(&[1, 1, 0, 0], &perfect, &[0, 1])?, 0.0),
    ];
    let worst = cases.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let detail = cases
        .iter()
        .map(|(n, got, _)| format!("{n}={got}"))
        .collect::<Vec<_>>()
        .join(" ");
    out.push(CheckResult::new("metrics/miou-hand-cases", worst, 0.0, detail));

    let m1 = evaluate_classification(&[0, 0, 0, 0], &[0, 0, 1, 1], 2)?;
    let truth: Vec<usize> = (0..10).map(|i| usize::from(i == 9)).collect();
    let m2 = evaluate_classification(&[0; 10], &truth, 2)?;
    let worst = [
        (m1.overall_accuracy - 0.5).abs(),
        (m1.mean_class_accuracy - 0.5).abs(),
        (m2.overall_accuracy - 0.9).abs(),
        (m2.mean_class_accuracy - 0.5).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    out.push(CheckResult::new("metrics/classification-hand-cases", worst, 1e-12, ""));

    let worst = [
        (lr_at_epoch(0) - 0.005).abs(),
        (lr_at_epoch(20) - 0.0025).abs(),
        (lr_at_epoch(1000) - 1e-5).abs(),
        (bn_momentum_at_epoch(0) - 0.7).abs(),
        (bn_momentum_at_epoch(50) - 0.845).abs(),
        (bn_momentum_at_epoch(1000) - 0.99).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    out.push(CheckResult::new("metrics/schedules", worst, 1e-12, ""));
    Ok(out)
}

/// Runs the suites selected by `scope`. `fault` corrupts one backward rule.
pub fn run_verify(scope: Scope, seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Gradcheck | Scope::All) {
        out.extend(gradcheck_suite(seed, fault)?);
    }
    if matches!(scope, Scope::Knn | Scope::All) {
        out.extend(knn_suite(seed)?);
    }
    if matches!(scope, Scope::Metrics | Scope::All) {
        out.extend(metrics_suite()?);
    }
    Ok(out)
}
