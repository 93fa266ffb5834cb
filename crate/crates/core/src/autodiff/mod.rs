//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every differentiable operation executed during a forward
//! pass. [`Tape::backward`] replays the record in reverse and returns the
//! gradient of a scalar root with respect to every parameter leaf.

mod ops;
mod tape;

use std::fmt;
use std::str::FromStr;

pub use tape::{BnStats, Gradients, Tape, Var};

/// Operation tags, used for diagnostics and for fault injection in the
/// verification harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    Affine,
    LeakyRelu,
    Relu,
    Softmax,
    MaxAxis,
    Concat,
    Narrow,
    BatchNorm,
    Dropout,
    SoftmaxCrossEntropy,
    EdgeFeatures,
    AddExpandLast,
    WeightedNeighborSum,
    BatchMatmul,
    Expand,
    Reshape,
    Add,
    Mul,
    Sum,
    Scale,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::Param,
        OpKind::Affine,
        OpKind::LeakyRelu,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::MaxAxis,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::BatchNorm,
        OpKind::Dropout,
        OpKind::SoftmaxCrossEntropy,
        OpKind::EdgeFeatures,
        OpKind::AddExpandLast,
        OpKind::WeightedNeighborSum,
        OpKind::BatchMatmul,
        OpKind::Expand,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Sum,
        OpKind::Scale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::Affine => "affine",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::MaxAxis => "reduce_max",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Dropout => "dropout",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::EdgeFeatures => "edge_features",
            OpKind::AddExpandLast => "add_expand_last",
            OpKind::WeightedNeighborSum => "weighted_neighbor_sum",
            OpKind::BatchMatmul => "batch_matmul",
            OpKind::Expand => "expand",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sum => "sum",
            OpKind::Scale => "scale",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op `{s}`"))
    }
}
