//! Flat `key = value` run configuration with per-task defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::AugmentParams;
use crate::error::{Error, Result};
use crate::model::{shrink, ClassifierConfig, ModelConfig, SegmenterConfig, StnConfig};
use crate::train::{format_part_sets, parse_part_sets, Schedule, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Segment,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "segment" => Ok(Task::Segment),
            other => Err(Error::config("task", format!("expected classify or segment, got `{other}`"))),
        }
    }
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub num_points: usize,
    pub k: usize,
    pub heads: usize,
    pub channels: usize,
    /// Second attention layer of the segmenter.
    pub heads2: usize,
    pub channels2: usize,
    /// Divides every MLP and fully connected width.
    pub width_divisor: usize,
    pub stn: bool,
    pub num_classes: usize,
    pub num_parts: usize,
    pub keep_prob: f64,
    pub constant_coefficients: bool,
    pub attention_pooling: bool,
    pub schedule: Schedule,
    pub augment: bool,
    pub augmentation: AugmentParams,
    pub part_sets: Option<Vec<Vec<usize>>>,
}

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        let (batch_size, num_points, k, keep_prob) = match task {
            Task::Classify => (32, 1024, 20, 0.5),
            Task::Segment => (8, 2048, 30, 0.4),
        };
        Self {
            task,
            train_manifest: None,
            test_manifest: None,
            out_dir: PathBuf::from("runs/gapnet"),
            seed: 0,
            epochs: 250,
            batch_size,
            num_points,
            k,
            heads: 4,
            channels: 16,
            heads2: 4,
            channels2: 128,
            width_divisor: 1,
            stn: true,
            num_classes: 40,
            num_parts: 50,
            keep_prob,
            constant_coefficients: false,
            attention_pooling: true,
            schedule: Schedule::default(),
            augment: true,
            augmentation: AugmentParams::default(),
            part_sets: None,
        }
    }

    /// Parses config text. Relative data paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", no + 1), "expected `key = value`"))?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        let task = match pairs.iter().find(|(k, _)| k == "task") {
            Some((_, v)) => v.parse()?,
            None => Task::Classify,
        };
        let mut cfg = Self::defaults(task);
        for (key, value) in &pairs {
            cfg.set(key, value)?;
        }
        for p in [&mut cfg.train_manifest, &mut cfg.test_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(key, format!("invalid value `{value}`")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
            }
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "task" => self.task = value.parse()?,
            "train_manifest" => self.train_manifest = path(value),
            "test_manifest" => self.test_manifest = path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "num_points" => self.num_points = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "heads2" => self.heads2 = num(key, value)?,
            "channels2" => self.channels2 = num(key, value)?,
            "width_divisor" => self.width_divisor = num(key, value)?,
            "stn" => self.stn = flag(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "num_parts" => self.num_parts = num(key, value)?,
            "keep_prob" => self.keep_prob = num(key, value)?,
            "constant_coefficients" => self.constant_coefficients = flag(key, value)?,
            "attention_pooling" => self.attention_pooling = flag(key, value)?,
            "lr" => self.schedule.lr0 = num(key, value)?,
            "lr_decay_every" => self.schedule.decay_every = num(key, value)?,
            "lr_decay_factor" => self.schedule.decay_factor = num(key, value)?,
            "lr_floor" => self.schedule.lr_floor = num(key, value)?,
            "bn_momentum_start" => self.schedule.bn_momentum_start = num(key, value)?,
            "bn_momentum_end" => self.schedule.bn_momentum_end = num(key, value)?,
            "bn_ramp_epochs" => self.schedule.bn_ramp_epochs = num(key, value)?,
            "augment" => self.augment = flag(key, value)?,
            "rotate" => self.augmentation.rotate = flag(key, value)?,
            "scale_lo" => self.augmentation.scale_lo = num(key, value)?,
            "scale_hi" => self.augmentation.scale_hi = num(key, value)?,
            "jitter_sigma" => self.augmentation.jitter_sigma = num(key, value)?,
            "jitter_clip" => self.augmentation.jitter_clip = num(key, value)?,
            "part_sets" => self.part_sets = (!value.is_empty()).then(|| parse_part_sets(value)).transpose()?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("num_points", self.num_points),
            ("k", self.k),
            ("heads", self.heads),
            ("channels", self.channels),
            ("heads2", self.heads2),
            ("channels2", self.channels2),
            ("width_divisor", self.width_divisor),
            ("num_classes", self.num_classes),
            ("num_parts", self.num_parts),
            ("lr_decay_every", self.schedule.decay_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*name, "must be positive"));
        }
        if self.k > self.num_points {
            return Err(Error::config("k", format!("{} exceeds num_points {}", self.k, self.num_points)));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::config("keep_prob", "must be in (0, 1]"));
        }
        let s = &self.schedule;
        if !(s.lr0 > 0.0 && s.lr_floor >= 0.0 && s.decay_factor > 0.0 && s.decay_factor <= 1.0) {
            return Err(Error::config("lr", "need lr > 0, lr_floor >= 0, decay factor in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&s.bn_momentum_start) || !(0.0..=1.0).contains(&s.bn_momentum_end) {
            return Err(Error::config("bn_momentum_start", "momenta must lie in [0, 1]"));
        }
        if self.augment {
            self.augmentation.validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let d = self.width_divisor.max(1);
        let stn = self.stn.then(|| {
            let full = StnConfig::default();
            StnConfig {
                channels: full.channels,
                ..full.scaled(d)
            }
        });
        match self.task {
            Task::Classify => {
                let base = ClassifierConfig::default();
                ModelConfig::Classifier(ClassifierConfig {
                    stn,
                    heads: self.heads,
                    channels: self.channels,
                    mlp: shrink(&base.mlp, d),
                    fuse: (base.fuse / d).max(1),
                    head: shrink(&base.head, d),
                    num_classes: self.num_classes,
                    keep_prob: self.keep_prob,
                    constant_coefficients: self.constant_coefficients,
                    attention_pooling: self.attention_pooling,
                })
            }
            Task::Segment => {
                let base = SegmenterConfig::default();
                ModelConfig::Segmenter(SegmenterConfig {
                    stn,
                    heads: self.heads,
                    channels: self.channels,
                    mlp1: shrink(&base.mlp1, d),
                    heads2: self.heads2,
                    channels2: self.channels2,
                    mlp2: shrink(&base.mlp2, d),
                    fuse: (base.fuse / d).max(1),
                    head: shrink(&base.head, d),
                    num_parts: self.num_parts,
                    keep_prob: self.keep_prob,
                    constant_coefficients: self.constant_coefficients,
                    attention_pooling: self.attention_pooling,
                })
            }
        }
    }

    /// Options for the epoch loop; derived part sets are appended to the
    /// stored echo by the loop itself.
    pub fn train_options(&self) -> TrainOptions {
        let echo = RunConfig {
            part_sets: None,
            ..self.clone()
        };
        TrainOptions {
            model: self.model_config(),
            k: self.k,
            num_points: self.num_points,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            schedule: self.schedule.clone(),
            augment: self.augment.then(|| self.augmentation.clone()),
            part_sets: self.part_sets.clone(),
            out_dir: Some(self.out_dir.clone()),
            config_echo: echo.to_text(),
        }
    }

    /// Serialises every key; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let s = &self.schedule;
        let a = &self.augmentation;
        let mut out = String::new();
        let pairs: Vec<(&str, String)> = vec![
            ("task", self.task.name().into()),
            ("train_manifest", p(&self.train_manifest)),
            ("test_manifest", p(&self.test_manifest)),
            ("out_dir", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("num_points", self.num_points.to_string()),
            ("k", self.k.to_string()),
            ("heads", self.heads.to_string()),
            ("channels", self.channels.to_string()),
            ("heads2", self.heads2.to_string()),
            ("channels2", self.channels2.to_string()),
            ("width_divisor", self.width_divisor.to_string()),
            ("stn", self.stn.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("num_parts", self.num_parts.to_string()),
            ("keep_prob", self.keep_prob.to_string()),
            ("constant_coefficients", self.constant_coefficients.to_string()),
            ("attention_pooling", self.attention_pooling.to_string()),
            ("lr", s.lr0.to_string()),
            ("lr_decay_every", s.decay_every.to_string()),
            ("lr_decay_factor", s.decay_factor.to_string()),
            ("lr_floor", s.lr_floor.to_string()),
            ("bn_momentum_start", s.bn_momentum_start.to_string()),
            ("bn_momentum_end", s.bn_momentum_end.to_string()),
            ("bn_ramp_epochs", s.bn_ramp_epochs.to_string()),
            ("augment", self.augment.to_string()),
            ("rotate", a.rotate.to_string()),
            ("scale_lo", a.scale_lo.to_string()),
            ("scale_hi", a.scale_hi.to_string()),
            ("jitter_sigma", a.jitter_sigma.to_string()),
            ("jitter_clip", a.jitter_clip.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        if let Some(sets) = &self.part_sets {
            let _ = writeln!(out, "part_sets = {}", format_part_sets(sets));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_defaults() {
        let c = RunConfig::defaults(Task::Classify);
        assert_eq!((c.batch_size, c.k, c.keep_prob), (32, 20, 0.5));
        let s = RunConfig::defaults(Task::Segment);
        assert_eq!((s.batch_size, s.k, s.num_points, s.keep_prob), (8, 30, 2048, 0.4));
    }

    #[test]
    fn parse_with_comments_and_task_first_lookup() {
        let cfg = RunConfig::parse("k = 7 # neighbours\n\n# note\ntask = segment\n", Path::new("/data")).unwrap();
        assert_eq!(cfg.task, Task::Segment);
        assert_eq!(cfg.k, 7);
        assert_eq!(cfg.batch_size, 8);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = RunConfig::parse("kk = 3\n", Path::new(".")).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "kk"), "{err}");
    }

    #[test]
    fn bad_value_names_the_key() {
        let err = RunConfig::parse("epochs = many\n", Path::new(".")).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "epochs"));
    }

    #[test]
    fn relative_manifests_resolve_against_base() {
        let cfg = RunConfig::parse("train_manifest = d/train.manifest\n", Path::new("/cfg")).unwrap();
        assert_eq!(cfg.train_manifest.unwrap(), PathBuf::from("/cfg/d/train.manifest"));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::defaults(Task::Segment);
        cfg.part_sets = Some(vec![vec![0, 1], vec![2]]);
        cfg.train_manifest = Some("/x/train.manifest".into());
        cfg.constant_coefficients = true;
        cfg.schedule.lr0 = 0.001;
        let back = RunConfig::parse(&cfg.to_text(), Path::new("/")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn reference_widths_at_divisor_one() {
        let ModelConfig::Classifier(c) = RunConfig::defaults(Task::Classify).model_config() else {
            panic!("task mismatch");
        };
        assert_eq!(c, ClassifierConfig::default());
        let ModelConfig::Segmenter(s) = RunConfig::defaults(Task::Segment).model_config() else {
            panic!("task mismatch");
        };
        assert_eq!(s, SegmenterConfig::default());
    }

    #[test]
    fn validation_names_fields() {
        let mut cfg = RunConfig::defaults(Task::Classify);
        cfg.k = 5000;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "k"));
        let mut cfg = RunConfig::defaults(Task::Classify);
        cfg.keep_prob = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "keep_prob"));
    }
}
