//! Adam with a triangular cyclical learning rate, checkpointing and the
//! training loop.

mod optim;
mod schedule;
mod trainer;

pub use optim::{adam_step, collect_grads, AdamConfig, Gradients, OptimState};
pub use schedule::{cyclical_lr, LRSchedule};
pub use trainer::{
    build_pools, evaluate_pairs, load_optim_state, save_optim_state, state_path, train,
    trainable_names, DataSource, HeldOutScores, StepLog, TrainConfig, TrainReport, CSV_HEADER,
    STATE_TAG,
};
