use rand::Rng;

use super::{ClassifierConfig, Stn};
use crate::attention::{attention_pooling, GapLayer};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::{BatchGraph, KnnGraph};
use crate::nn::{Ctx, Dense, DenseBnRelu, Mlp};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Shape classification network.
///
/// STN → GAPLayer → [xyz ‖ attention features] → shared MLP stack. The
/// neighbourhood max of the multi-graph features (the local signature) is
/// concatenated with every MLP output, lifted by a shared 1024 layer,
/// max-pooled over points and classified by a dropout-regularised head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub stn: Option<Stn>,
    pub gap: GapLayer,
    pub mlp: Mlp,
    pub fuse: DenseBnRelu,
    pub head: Mlp,
    pub out: Dense,
}

impl Classifier {
    pub fn new<T: Real, R: Rng + ?Sized>(
        cfg: &ClassifierConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.heads == 0 || cfg.channels == 0 {
            return Err(Error::config("heads", "heads and channels must be positive"));
        }
        if cfg.mlp.is_empty() || cfg.num_classes == 0 {
            return Err(Error::config("mlp", "need at least one MLP layer and one class"));
        }
        let stn = cfg.stn.as_ref().map(|s| Stn::new(s, store, rng));
        let gap = GapLayer::new(store, "gap", 3, cfg.heads, cfg.channels, rng);
        let mlp = Mlp::new(store, "mlp", 3 + gap.out_channels(), &cfg.mlp, rng);
        let mut skip_width: usize = cfg.mlp.iter().sum();
        if cfg.attention_pooling {
            skip_width += gap.out_channels();
        }
        let fuse = DenseBnRelu::new(store, "fuse", skip_width, cfg.fuse, rng);
        let head = Mlp::new(store, "head", cfg.fuse, &cfg.head, rng);
        let head_out = if cfg.head.is_empty() { cfg.fuse } else { head.out_features() };
        // Zero logit weights: the untrained network predicts the uniform distribution.
        let out = Dense::zeroed(store, "head.out", head_out, cfg.num_classes);
        Ok(Self {
            config: cfg.clone(),
            stn,
            gap,
            mlp,
            fuse,
            head,
            out,
        })
    }

    /// `points` `[B, N, 3]` → logits `[B, num_classes]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, points: Var, graph: &BatchGraph) -> Result<Var> {
        let x = match &self.stn {
            Some(stn) => stn.forward(ctx, points, graph)?.1,
            None => points,
        };
        let gap = self
            .gap
            .forward_on_graph(ctx, x, graph, self.config.constant_coefficients)?;
        let contextual = ctx.tape.concat(&[x, gap.attention_features], 2)?;
        let mut skips = self.mlp.forward_all(ctx, contextual)?;
        if self.config.attention_pooling {
            skips.push(attention_pooling(ctx, gap.graph_features)?);
        }
        let fused_in = ctx.tape.concat(&skips, 2)?;
        let fused = self.fuse.forward(ctx, fused_in)?;
        let (mut g, _) = ctx.tape.max_axis(fused, 1)?;
        for layer in &self.head.layers {
            g = layer.forward(ctx, g)?;
            g = ctx.tape.dropout(g, self.config.keep_prob, ctx.training, &mut ctx.rng)?;
        }
        self.out.forward(ctx, g)
    }

    /// Inference on a single cloud `[N, 3]`.
    pub fn classify<T: Real>(&self, store: &ParamStore<T>, cloud: &Tensor<T>, graph: &KnnGraph) -> Result<Tensor<T>> {
        let mut ctx = Ctx::inference(store);
        let n = cloud.shape()[0];
        let pts = ctx.tape.leaf(cloud.reshape([1, n, 3])?);
        let logits = self.forward(&mut ctx, pts, &BatchGraph::new(std::slice::from_ref(graph))?)?;
        ctx.value(logits).reshape([self.config.num_classes])
    }
}
