//! Command-line front end: `train`, `eval`, `verify`, `synth`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::autodiff::OpKind;
use crate::config::{RunConfig, Task};
use crate::dataset::synth::{parse_shapes, synth_dataset};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::{parameter_count, read_checkpoint};
use crate::params::ParamStore;
use crate::train::{evaluate, prepare_eval, train_loop, EvalMetrics};
use crate::verify::{run_verify, Scope};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gapnet", version, about = "Graph attention point networks for point cloud classification and segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier or part segmenter.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Run the built-in oracle suites.
    Verify(VerifyArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Neighbours per point.
    #[arg(long)]
    pub k: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Encoding channels per head.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Replace learned attention coefficients by the neighbour mean.
    #[arg(long)]
    pub constant_coefficients: bool,
    /// Drop the local signature from the skip connections.
    #[arg(long)]
    pub no_attention_pooling: bool,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl CommonArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(kv.as_str(), "expected KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(h) = self.heads {
            cfg.heads = h;
        }
        if let Some(c) = self.channels {
            cfg.channels = c;
        }
        if self.constant_coefficients {
            cfg.constant_coefficients = true;
        }
        if self.no_attention_pooling {
            cfg.attention_pooling = false;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `classify` or `segment`; ignored when the config file sets it.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// gradcheck, knn, metrics or all.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Corrupts one backward rule to prove the suite notices.
    #[arg(long, hide = true)]
    pub corrupt_rule: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated generators: sphere, cube, plane, dumbbell.
    #[arg(long, default_value = "sphere,cube,plane,dumbbell")]
    pub shapes: String,
    #[arg(long, default_value_t = 400)]
    pub train_clouds: usize,
    #[arg(long, default_value_t = 100)]
    pub test_clouds: usize,
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Usage(_) | Error::Checkpoint(_) => EXIT_CONFIG,
        Error::Parse { .. } | Error::Io { .. } | Error::Domain(_) | Error::Dimension { .. } => EXIT_DATA,
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path)
}

fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.common.config, &a.task) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(t)) => RunConfig::defaults(t.parse()?),
        (None, None) => RunConfig::defaults(Task::Classify),
    };
    a.common.apply(&mut cfg)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(p) = &a.train_manifest {
        cfg.train_manifest = Some(p.clone());
    }
    if let Some(p) = &a.test_manifest {
        cfg.test_manifest = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = train_config(a)?;
    let train_path = cfg
        .train_manifest
        .clone()
        .ok_or_else(|| Error::config("train_manifest", "no training manifest given"))?;
    let train = load_manifest(&train_path)?.load_clouds()?;
    let test = match &cfg.test_manifest {
        Some(p) => Some(load_manifest(p)?.load_clouds()?),
        None => None,
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let opts = cfg.train_options();
    let outcome = train_loop(&opts, &train, test.as_deref())?;
    println!(
        "trained {} epochs, {} parameters, artifacts in {}",
        outcome.rows.len(),
        parameter_count(&outcome.store),
        cfg.out_dir.display()
    );
    if let Some(row) = outcome.rows.last() {
        println!("final: {}", row.to_csv());
    }
    Ok(EXIT_OK)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.4}", x)).unwrap_or_else(|| "-".into())
}

fn report_json(cfg: &RunConfig, a: &EvalArgs, names: &[String], clouds: usize, m: &EvalMetrics) -> Value {
    let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
    let mut report = json!({
        "task": cfg.task.name(),
        "checkpoint": a.checkpoint.display().to_string(),
        "manifest": a.manifest.display().to_string(),
        "clouds": clouds,
        "overall_accuracy": m.overall,
    });
    let obj = report.as_object_mut().expect("object literal");
    match cfg.task {
        Task::Classify => {
            obj.insert("mean_class_accuracy".into(), json!(m.mean_class));
            let per: Vec<Value> = m
                .per_class_accuracy
                .iter()
                .enumerate()
                .map(|(i, v)| json!({ "class": name(i), "accuracy": v }))
                .collect();
            obj.insert("per_class_accuracy".into(), Value::Array(per));
        }
        Task::Segment => {
            obj.insert("miou".into(), json!(m.miou));
            let per: Vec<Value> = m
                .per_category_iou
                .iter()
                .enumerate()
                .map(|(i, v)| json!({ "category": name(i), "iou": v }))
                .collect();
            obj.insert("per_class_iou".into(), Value::Array(per));
        }
    }
    report
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let mut cfg = RunConfig::parse(&ckpt.config, Path::new("."))?;
    a.common.apply(&mut cfg)?;
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let mut store = ParamStore::<f32>::new();
    let model = model_cfg.build(&mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_named(&ckpt.tensors)?;

    let manifest = load_manifest(&a.manifest)?;
    let clouds = manifest.load_clouds()?;
    let segment = cfg.task == Task::Segment;
    let set = prepare_eval(&clouds, cfg.num_points, cfg.k, cfg.seed, segment)?;
    let m = evaluate(&model, &store, &set, cfg.batch_size, model_cfg.outputs(), cfg.part_sets.as_deref())?;

    println!("task: {}  clouds: {}", cfg.task.name(), clouds.len());
    println!("overall accuracy: {:.4}", m.overall);
    match cfg.task {
        Task::Classify => println!("mean class accuracy: {}", fmt_opt(m.mean_class)),
        Task::Segment => {
            println!("mIoU: {}", fmt_opt(m.miou));
            for (i, v) in m.per_category_iou.iter().enumerate() {
                let name = manifest.class_names.get(i).map_or("?", String::as_str);
                println!("  {name:<16} {}", fmt_opt(*v));
            }
        }
    }
    let out_dir = a
        .common
        .out
        .clone()
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let report = report_json(&cfg, a, &manifest.class_names, clouds.len(), &m);
    let path = out_dir.join("eval.json");
    let text = serde_json::to_string_pretty(&report).expect("json values serialise");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(EXIT_OK)
}

fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let scope: Scope = a.scope.parse()?;
    let fault = match &a.corrupt_rule {
        Some(name) => {
            let kind: OpKind = name.parse().map_err(|e: String| Error::config("corrupt-rule", e))?;
            if kind == OpKind::Leaf {
                return Err(Error::config("corrupt-rule", "leaf has no gradient rule"));
            }
            Some(kind)
        }
        None => None,
    };
    let results = run_verify(scope, a.seed, fault)?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{} {:<40} worst {:.3e} (tol {:.0e}) {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.worst,
            r.tolerance,
            r.detail
        );
        if !r.passed {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(EXIT_OK)
    } else {
        println!("failed checks: {}", failed.join(", "));
        Ok(EXIT_VERIFY_FAILED)
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let shapes = parse_shapes(&a.shapes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let out = synth_dataset(&a.out, &shapes, a.points, a.train_clouds, a.test_clouds, &mut rng)?;
    println!("wrote {} clouds to {}", out.files, a.out.display());
    Ok(EXIT_OK)
}
