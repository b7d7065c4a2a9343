//! Maximum-likelihood training and evaluation.

pub mod loss;
pub mod optim;
pub mod run;

pub use loss::nll_bits;
pub use optim::{adamw_step, decayed_names, ema_update, global_norm, lr_schedule};
pub use run::{
    batch_gradients, checkpoint_path, derive_seed, epoch_order, evaluate_checkpoint, evaluate_nll,
    list_checkpoints, train, EvalReport, StepMetrics, TrainOutcome, METRICS_FILE,
};
