//! Optimisation loop, distillation objective and gradient verification.

pub mod epoch;
pub mod gradcheck;
pub mod optim;
pub mod suite;

pub use epoch::{
    distill_epoch, distill_loss, evaluate, evaluate_with_logits, fit, train_epoch, BatchEvent, EpochRow,
    EpochStats, Evaluation, FitOptions, Lambda, Observer, TrainOptions, TrainReport,
};
pub use gradcheck::{relative_error, GradCheck, GradCheckReport, Probe, ProbeGroup};
pub use optim::{lr_schedule, Sgd, SgdConfig};
pub use suite::{cell_suite, network_suite, primitive_suite};
