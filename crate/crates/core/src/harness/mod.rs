//! Everything around the network: phantoms, volume files, configuration,
//! checkpoints, training, evaluation and diagnostics.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod gradsuite;
pub mod metrics;
pub mod phantom;
pub mod run;
pub mod vol3d;

pub use bench::{attention_budget, AttnBudget};
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, TrainOptions};
pub use metrics::{class_dice, dice_metric};
pub use phantom::{gen_phantom, PhantomSpec};
pub use run::{
    dump_embeddings, evaluate_dir, evaluate_heldout, infer, predict_volume, train, train_from, write_phantoms, EpochMetrics, EvalReport,
    TrainOutcome,
};
pub use vol3d::{VolData, Vol3d};
