use rand::Rng;

use super::StnConfig;
use crate::attention::HeadParams;
use crate::autodiff::Var;
use crate::error::Result;
use crate::graph::BatchGraph;
use crate::nn::{Ctx, Dense, Mlp};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Attention-aware spatial transformer predicting a 3×3 matrix per cloud.
#[derive(Debug, Clone)]
pub struct Stn {
    pub head: HeadParams,
    pub mlp: Mlp,
    pub fc: Mlp,
    pub out: Dense,
}

impl Stn {
    /// The output projection starts at zero weights and identity bias so the
    /// initial transform is exactly `I₃`.
    pub fn new<T: Real, R: Rng + ?Sized>(cfg: &StnConfig, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let head = HeadParams::new(store, "stn.gap", 3, cfg.channels, rng);
        let mlp = Mlp::new(store, "stn.mlp", cfg.channels, &cfg.mlp, rng);
        let fc = Mlp::new(store, "stn.fc", mlp.out_features(), &cfg.fc, rng);
        let out = Dense::new(store, "stn.out", fc.out_features(), 9, rng);
        let fan_in = fc.out_features();
        store.get_mut(out.weight).value = Tensor::zeros([fan_in, 9]);
        let identity = [1., 0., 0., 0., 1., 0., 0., 0., 1.];
        store.get_mut(out.bias).value = Tensor::from_f64([9], &identity).expect("3x3");
        Self { head, mlp, fc, out }
    }

    /// Returns `(transform [B,3,3], points · transform [B,N,3])`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, points: Var, graph: &BatchGraph) -> Result<(Var, Var)> {
        let batch = ctx.tape.shape(points)[0];
        let edges = ctx.tape.edge_features(points, graph.neighbors(), graph.k())?;
        let head = self.head.forward(ctx, points, edges)?;
        let h = self.mlp.forward(ctx, head.attention)?;
        let (global, _) = ctx.tape.max_axis(h, 1)?;
        let g = self.fc.forward(ctx, global)?;
        let t = self.out.forward(ctx, g)?;
        let transform = ctx.tape.reshape(t, &[batch, 3, 3])?;
        let transformed = ctx.tape.batch_matmul(points, transform)?;
        Ok((transform, transformed))
    }
}
