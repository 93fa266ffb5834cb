//! Optimisation, schedules, metrics and the epoch loop.

mod adam;
mod metrics;
mod schedule;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use metrics::{
    evaluate_classification, evaluate_miou, mean_part_iou, shape_iou, ClassificationMetrics, MiouReport, SegmentedShape,
};
pub use schedule::{bn_momentum_at_epoch, lr_at_epoch, Schedule};
pub use trainer::{
    derive_part_sets, evaluate, format_part_sets, parse_part_sets, prepare_eval, train_loop, EpochRow, EvalMetrics, PreparedSet, TrainOptions,
    TrainOutcome, CSV_HEADER,
};
