use rand::Rng;

use super::{SegmenterConfig, Stn};
use crate::attention::{attention_pooling, GapLayer};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::{BatchGraph, KnnGraph};
use crate::nn::{Ctx, Dense, DenseBnRelu, Mlp};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Per-point part segmentation network.
///
/// STN → GAPLayer → MLP stack → second GAPLayer on the learned features →
/// MLP stack. The last stack's output and the second layer's local signature
/// go through a shared 1024 layer and a max pool; the resulting global
/// feature is copied to every point and concatenated with the per-point
/// features before the per-point head.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub config: SegmenterConfig,
    pub stn: Option<Stn>,
    pub gap1: GapLayer,
    pub mlp1: Mlp,
    pub gap2: GapLayer,
    pub mlp2: Mlp,
    pub fuse: DenseBnRelu,
    pub head: Mlp,
    pub out: Dense,
}

impl Segmenter {
    pub fn new<T: Real, R: Rng + ?Sized>(
        cfg: &SegmenterConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.heads == 0 || cfg.channels == 0 || cfg.heads2 == 0 || cfg.channels2 == 0 {
            return Err(Error::config("heads", "heads and channels must be positive"));
        }
        if cfg.mlp1.is_empty() || cfg.mlp2.is_empty() || cfg.num_parts == 0 {
            return Err(Error::config("mlp", "need non-empty MLP stacks and at least one part"));
        }
        let stn = cfg.stn.as_ref().map(|s| Stn::new(s, store, rng));
        let gap1 = GapLayer::new(store, "gap1", 3, cfg.heads, cfg.channels, rng);
        let mlp1 = Mlp::new(store, "mlp1", 3 + gap1.out_channels(), &cfg.mlp1, rng);
        let gap2 = GapLayer::new(store, "gap2", mlp1.out_features(), cfg.heads2, cfg.channels2, rng);
        let mlp2 = Mlp::new(store, "mlp2", gap2.out_channels(), &cfg.mlp2, rng);
        let local = if cfg.attention_pooling { gap2.out_channels() } else { 0 };
        let fuse = DenseBnRelu::new(store, "fuse", mlp2.out_features() + local, cfg.fuse, rng);
        let per_point = cfg.fuse + mlp1.out_features() + mlp2.out_features() + local;
        let head = Mlp::new(store, "head", per_point, &cfg.head, rng);
        let head_out = if cfg.head.is_empty() { per_point } else { head.out_features() };
        // Zero logit weights: the untrained network predicts the uniform distribution.
        let out = Dense::zeroed(store, "head.out", head_out, cfg.num_parts);
        Ok(Self {
            config: cfg.clone(),
            stn,
            gap1,
            mlp1,
            gap2,
            mlp2,
            fuse,
            head,
            out,
        })
    }

    /// `points` `[B, N, 3]` → part logits `[B, N, num_parts]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, points: Var, graph: &BatchGraph) -> Result<Var> {
        let n = ctx.tape.shape(points)[1];
        let constant = self.config.constant_coefficients;
        let x = match &self.stn {
            Some(stn) => stn.forward(ctx, points, graph)?.1,
            None => points,
        };
        let gap1 = self.gap1.forward_on_graph(ctx, x, graph, constant)?;
        let contextual = ctx.tape.concat(&[x, gap1.attention_features], 2)?;
        let h1 = self.mlp1.forward(ctx, contextual)?;
        let gap2 = self.gap2.forward_on_graph(ctx, h1, graph, constant)?;
        let h2 = self.mlp2.forward(ctx, gap2.attention_features)?;
        let mut fuse_in = vec![h2];
        if self.config.attention_pooling {
            fuse_in.push(attention_pooling(ctx, gap2.graph_features)?);
        }
        let local = fuse_in.get(1).copied();
        let cat = if fuse_in.len() == 1 { h2 } else { ctx.tape.concat(&fuse_in, 2)? };
        let fused = self.fuse.forward(ctx, cat)?;
        let (global, _) = ctx.tape.max_axis(fused, 1)?;
        let global = ctx.tape.expand(global, n)?;
        let mut per_point = vec![global, h1, h2];
        per_point.extend(local);
        let mut h = ctx.tape.concat(&per_point, 2)?;
        for layer in &self.head.layers {
            h = layer.forward(ctx, h)?;
            h = ctx.tape.dropout(h, self.config.keep_prob, ctx.training, &mut ctx.rng)?;
        }
        self.out.forward(ctx, h)
    }

    /// Inference on a single cloud `[N, 3]` → `[N, num_parts]`.
    pub fn segment<T: Real>(&self, store: &ParamStore<T>, cloud: &Tensor<T>, graph: &KnnGraph) -> Result<Tensor<T>> {
        let mut ctx = Ctx::inference(store);
        let n = cloud.shape()[0];
        let pts = ctx.tape.leaf(cloud.reshape([1, n, 3])?);
        let logits = self.forward(&mut ctx, pts, &BatchGraph::new(std::slice::from_ref(graph))?)?;
        ctx.value(logits).reshape([n, self.config.num_parts])
    }
}
