//! Layer building blocks and the per-pass forward context.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnStats, Tape, Var};
use crate::error::Result;
use crate::params::{glorot_uniform, BufferId, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// State of a single forward pass: parameter snapshot, tape, mode and the
/// dropout generator.
pub struct Ctx<'a, T: Real> {
    pub store: &'a ParamStore<T>,
    pub tape: Tape<T>,
    pub training: bool,
    pub rng: ChaCha8Rng,
    params: HashMap<ParamId, Var>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, training: bool, seed: u64) -> Self {
        Self {
            store,
            tape: Tape::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: HashMap::new(),
        }
    }

    /// Continues recording on an existing tape, e.g. one carrying an injected fault.
    pub fn with_tape(store: &'a ParamStore<T>, tape: Tape<T>, training: bool, seed: u64) -> Self {
        Self {
            tape,
            ..Self::new(store, training, seed)
        }
    }

    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::new(store, false, 0)
    }

    /// Parameter leaf, recorded at most once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

/// Affine map over the trailing axis, shared by every leading position.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(in_features, out_features, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// Same as [`Dense::new`] but with zero weights, so the layer starts out
    /// emitting its (zero) bias for every input.
    pub fn zeroed<T: Real>(store: &mut ParamStore<T>, name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::zeros([in_features, out_features])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([out_features])),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.affine(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones([channels])),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let store = ctx.store;
        let (out, batch) = ctx.tape.batch_norm(
            x,
            gamma,
            beta,
            store.buffer(self.running_mean).data(),
            store.buffer(self.running_var).data(),
            ctx.training,
        )?;
        if let Some((mean, var)) = batch {
            ctx.tape.record_bn_stats(BnStats {
                mean_buffer: self.running_mean,
                var_buffer: self.running_var,
                mean,
                var,
            });
        }
        Ok(out)
    }
}

/// Affine → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct DenseBnRelu {
    pub dense: Dense,
    pub bn: BatchNorm,
}

impl DenseBnRelu {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            dense: Dense::new(store, name, in_features, out_features, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_features),
        }
    }

    pub fn out_features(&self) -> usize {
        self.dense.out_features
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.dense.forward(ctx, x)?;
        let h = self.bn.forward(ctx, h)?;
        Ok(ctx.tape.relu(h))
    }
}

/// Stack of [`DenseBnRelu`] layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseBnRelu>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut cin = in_features;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(DenseBnRelu::new(store, &format!("{name}.{i}"), cin, w, rng));
            cin = w;
        }
        Self { layers }
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_features())
    }

    /// Output of every layer, in order.
    pub fn forward_all<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(ctx, h)?;
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_all(ctx, x)?.pop().unwrap_or(x))
    }
}
