//! Run configuration, the training loop, evaluation and the experiment drivers.

mod config;
mod experiments;
mod model;
mod optim;
mod train;

#[cfg(test)]
mod tests;

pub use config::{LossToggles, MaskStrategy, RunConfig};
pub use experiments::{
    compare_losses, emit_plots, gradcheck_cmd, GRADCHECK_LOSSES, OPERATING_POINT, sweep_mask_ratio, CompareRow, GradcheckReport, SweepRow,
};
pub use model::Model;
pub use optim::Adam;
pub use train::{
    keep_set_signal_fraction, make_batches, train, Components, EpochLog, RunLog, StepLog, TrainOutput, COMPONENTS,
};
