//! Network assemblies: spatial transformer, classifier, part segmenter.

mod checkpoint;
mod classifier;
mod segmenter;
mod stn;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use classifier::Classifier;
pub use segmenter::Segmenter;
pub use stn::Stn;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::graph::BatchGraph;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct StnConfig {
    /// Encoding width of the single attention head.
    pub channels: usize,
    pub mlp: Vec<usize>,
    pub fc: Vec<usize>,
}

impl Default for StnConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            mlp: vec![64, 128, 1024],
            fc: vec![512, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    /// `None` skips the spatial transformer.
    pub stn: Option<StnConfig>,
    pub heads: usize,
    pub channels: usize,
    pub mlp: Vec<usize>,
    pub fuse: usize,
    /// Hidden widths of the classification head; a dropout follows each.
    pub head: Vec<usize>,
    pub num_classes: usize,
    pub keep_prob: f64,
    pub constant_coefficients: bool,
    pub attention_pooling: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            stn: Some(StnConfig::default()),
            heads: 4,
            channels: 16,
            mlp: vec![64, 64, 64, 128],
            fuse: 1024,
            head: vec![512, 256],
            num_classes: 40,
            keep_prob: 0.5,
            constant_coefficients: false,
            attention_pooling: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterConfig {
    pub stn: Option<StnConfig>,
    pub heads: usize,
    pub channels: usize,
    pub mlp1: Vec<usize>,
    pub heads2: usize,
    pub channels2: usize,
    pub mlp2: Vec<usize>,
    pub fuse: usize,
    /// Hidden widths of the per-point head; a dropout follows each.
    pub head: Vec<usize>,
    pub num_parts: usize,
    pub keep_prob: f64,
    pub constant_coefficients: bool,
    pub attention_pooling: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            stn: Some(StnConfig::default()),
            heads: 4,
            channels: 16,
            mlp1: vec![64, 64, 128],
            heads2: 4,
            channels2: 128,
            mlp2: vec![128, 128, 512],
            fuse: 1024,
            head: vec![256, 256, 128],
            num_parts: 50,
            keep_prob: 0.4,
            constant_coefficients: false,
            attention_pooling: true,
        }
    }
}

pub(crate) fn shrink(widths: &[usize], divisor: usize) -> Vec<usize> {
    widths.iter().map(|&w| (w / divisor).max(1)).collect()
}

impl StnConfig {
    /// Every width divided by `divisor` (at least 1).
    pub fn scaled(&self, divisor: usize) -> Self {
        Self {
            channels: (self.channels / divisor).max(1),
            mlp: shrink(&self.mlp, divisor),
            fc: shrink(&self.fc, divisor),
        }
    }
}

/// Configuration of either task network.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Classifier(ClassifierConfig),
    Segmenter(SegmenterConfig),
}

impl ModelConfig {
    pub fn build<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<Model> {
        match self {
            ModelConfig::Classifier(c) => Model::build_classifier(c, store, rng),
            ModelConfig::Segmenter(c) => Model::build_segmenter(c, store, rng),
        }
    }

    /// Class count or part count.
    pub fn outputs(&self) -> usize {
        match self {
            ModelConfig::Classifier(c) => c.num_classes,
            ModelConfig::Segmenter(c) => c.num_parts,
        }
    }

    pub fn is_segmenter(&self) -> bool {
        matches!(self, ModelConfig::Segmenter(_))
    }
}

/// Either task network.
#[derive(Debug, Clone)]
pub enum Model {
    Classifier(Classifier),
    Segmenter(Segmenter),
}

impl Model {
    /// Batched forward: `points` is `[B, N, 3]`; returns `[B, C]` class logits
    /// or `[B, N, S]` part logits.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, points: Var, graph: &BatchGraph) -> Result<Var> {
        match self {
            Model::Classifier(m) => m.forward(ctx, points, graph),
            Model::Segmenter(m) => m.forward(ctx, points, graph),
        }
    }

    pub fn build_classifier<T: Real, R: Rng + ?Sized>(
        cfg: &ClassifierConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Model::Classifier(Classifier::new(cfg, store, rng)?))
    }

    pub fn build_segmenter<T: Real, R: Rng + ?Sized>(
        cfg: &SegmenterConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Model::Segmenter(Segmenter::new(cfg, store, rng)?))
    }
}

/// Number of learnable scalars, batch-norm scale and shift included and
/// running statistics excluded.
pub fn parameter_count<T: Real>(store: &ParamStore<T>) -> usize {
    store.scalar_count()
}
