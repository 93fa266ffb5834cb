//! Graph attention over kNN neighbourhoods.
//!
//! A single head encodes every node and every edge with its own
//! affine + LeakyReLU layer, scores each edge by fusing a 1-d projection of the
//! encoded node with a 1-d projection of the encoded edge, normalises the
//! scores with a softmax over the neighbourhood, and returns the ReLU of the
//! score-weighted sum of encoded edges. A [`GapLayer`] runs `M` independent
//! heads and concatenates their outputs channel-wise.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::BatchGraph;
use crate::nn::{Ctx, Dense};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Negative slope of every LeakyReLU in the attention path.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Parameters of one attention head.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub node_encoder: Dense,
    pub edge_encoder: Dense,
    pub self_proj: Dense,
    pub edge_proj: Dense,
}

/// Everything one head produces.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[.., N, F']`, non-negative.
    pub attention: Var,
    /// Encoded edges `[.., N, k, F']`.
    pub encoded_edges: Var,
    /// Normalised coefficients `[.., N, k]`.
    pub coefficients: Var,
}

impl HeadParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            node_encoder: Dense::new(store, &format!("{name}.node_enc"), in_channels, out_channels, rng),
            edge_encoder: Dense::new(store, &format!("{name}.edge_enc"), in_channels, out_channels, rng),
            self_proj: Dense::new(store, &format!("{name}.self_coef"), out_channels, 1, rng),
            edge_proj: Dense::new(store, &format!("{name}.local_coef"), out_channels, 1, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.node_encoder.in_features
    }

    pub fn out_channels(&self) -> usize {
        self.node_encoder.out_features
    }

    /// Encoded nodes `[.., N, F']` and encoded edges `[.., N, k, F']`.
    pub fn encode<T: Real>(&self, ctx: &mut Ctx<'_, T>, nodes: Var, edges: Var) -> Result<(Var, Var)> {
        let cin = self.in_channels();
        for v in [nodes, edges] {
            if ctx.tape.shape(v).last() != Some(&cin) {
                return Err(Error::dim("encode", ctx.tape.shape(v), &[cin]));
            }
        }
        let x = self.node_encoder.forward(ctx, nodes)?;
        let x = ctx.tape.leaky_relu(x, LEAKY_SLOPE)?;
        let y = self.edge_encoder.forward(ctx, edges)?;
        let y = ctx.tape.leaky_relu(y, LEAKY_SLOPE)?;
        Ok((x, y))
    }

    /// Softmax-normalised attention coefficients `[.., N, k]`.
    pub fn coefficients<T: Real>(&self, ctx: &mut Ctx<'_, T>, encoded_nodes: Var, encoded_edges: Var) -> Result<Var> {
        let self_coef = self.self_proj.forward(ctx, encoded_nodes)?;
        let local_coef = self.edge_proj.forward(ctx, encoded_edges)?;
        let node_shape = drop_last(ctx.tape.shape(self_coef));
        let edge_shape = drop_last(ctx.tape.shape(local_coef));
        let self_coef = ctx.tape.reshape(self_coef, &node_shape)?;
        let local_coef = ctx.tape.reshape(local_coef, &edge_shape)?;
        let fused = ctx.tape.add_expand_last(local_coef, self_coef)?;
        let fused = ctx.tape.leaky_relu(fused, LEAKY_SLOPE)?;
        let axis = edge_shape.len() - 1;
        ctx.tape.softmax(fused, axis)
    }

    /// Single-head forward pass.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, nodes: Var, edges: Var) -> Result<HeadOutput> {
        let (x, y) = self.encode(ctx, nodes, edges)?;
        let alpha = self.coefficients(ctx, x, y)?;
        let combined = ctx.tape.weighted_neighbor_sum(alpha, y)?;
        Ok(HeadOutput {
            attention: ctx.tape.relu(combined),
            encoded_edges: y,
            coefficients: alpha,
        })
    }

    /// Same as [`HeadParams::forward`] but with every coefficient fixed to
    /// `1/k`; the projections are not evaluated.
    pub fn forward_constant<T: Real>(&self, ctx: &mut Ctx<'_, T>, nodes: Var, edges: Var) -> Result<HeadOutput> {
        let (_, y) = self.encode(ctx, nodes, edges)?;
        let shape = drop_last(ctx.tape.shape(y));
        let k = *shape.last().unwrap();
        let alpha = ctx.tape.leaf(Tensor::full(shape, T::one() / T::lit(k as f64)));
        let combined = ctx.tape.weighted_neighbor_sum(alpha, y)?;
        Ok(HeadOutput {
            attention: ctx.tape.relu(combined),
            encoded_edges: y,
            coefficients: alpha,
        })
    }
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len() - 1].to_vec()
}

/// Multi-attention and multi-graph features of a [`GapLayer`].
#[derive(Debug, Clone)]
pub struct GapLayerOutput {
    /// `[.., N, M·F']`
    pub attention_features: Var,
    /// `[.., N, k, M·F']`
    pub graph_features: Var,
    /// Per-head coefficients `[.., N, k]`.
    pub coefficients: Vec<Var>,
}

/// `M` independent heads concatenated over channels.
#[derive(Debug, Clone)]
pub struct GapLayer {
    heads: Vec<HeadParams>,
}

impl GapLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        heads: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let heads = (0..heads)
            .map(|m| HeadParams::new(store, &format!("{name}.head{m}"), in_channels, channels, rng))
            .collect();
        Self { heads }
    }

    pub fn from_heads(heads: Vec<HeadParams>) -> Result<Self> {
        let first = heads.first().ok_or_else(|| Error::config("heads", "at least one head"))?;
        let (cin, cout) = (first.in_channels(), first.out_channels());
        if heads.iter().any(|h| h.out_channels() != cout || h.in_channels() != cin) {
            return Err(Error::config("channels", "all heads must share input and encoding widths"));
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.heads
    }

    /// `M · F'`.
    pub fn out_channels(&self) -> usize {
        self.heads.iter().map(HeadParams::out_channels).sum()
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, nodes: Var, edges: Var) -> Result<GapLayerOutput> {
        self.run(ctx, nodes, edges, false)
    }

    /// Ablation with uniform coefficients.
    pub fn forward_constant<T: Real>(&self, ctx: &mut Ctx<'_, T>, nodes: Var, edges: Var) -> Result<GapLayerOutput> {
        self.run(ctx, nodes, edges, true)
    }

    /// Builds edge features from `nodes` (`[B, N, C]`) over `graph` and runs the layer.
    pub fn forward_on_graph<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        nodes: Var,
        graph: &BatchGraph,
        constant: bool,
    ) -> Result<GapLayerOutput> {
        let edges = ctx.tape.edge_features(nodes, graph.neighbors(), graph.k())?;
        self.run(ctx, nodes, edges, constant)
    }

    fn run<T: Real>(&self, ctx: &mut Ctx<'_, T>, nodes: Var, edges: Var, constant: bool) -> Result<GapLayerOutput> {
        let mut attention = Vec::with_capacity(self.heads.len());
        let mut encoded = Vec::with_capacity(self.heads.len());
        let mut coefficients = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let out = if constant {
                head.forward_constant(ctx, nodes, edges)?
            } else {
                head.forward(ctx, nodes, edges)?
            };
            attention.push(out.attention);
            encoded.push(out.encoded_edges);
            coefficients.push(out.coefficients);
        }
        let node_axis = ctx.tape.shape(attention[0]).len() - 1;
        let edge_axis = ctx.tape.shape(encoded[0]).len() - 1;
        let (attention_features, graph_features) = if self.heads.len() == 1 {
            (attention[0], encoded[0])
        } else {
            (
                ctx.tape.concat(&attention, node_axis)?,
                ctx.tape.concat(&encoded, edge_axis)?,
            )
        };
        Ok(GapLayerOutput {
            attention_features,
            graph_features,
            coefficients,
        })
    }
}

/// Per-channel maximum over the neighbour axis of `[.., N, k, C]` → `[.., N, C]`.
pub fn attention_pooling<T: Real>(ctx: &mut Ctx<'_, T>, graph_features: Var) -> Result<Var> {
    let rank = ctx.tape.shape(graph_features).len();
    if rank < 2 {
        return Err(Error::dim("attention_pooling", ctx.tape.shape(graph_features), &[0, 0]));
    }
    Ok(ctx.tape.max_axis(graph_features, rank - 2)?.0)
}
