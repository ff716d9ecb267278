//! Stage-1 pretraining, stage-2 fine-tuning, the optimizer and learning-rate
//! schedules, and dataset preparation.

mod data;
mod optim;
mod stages;

pub use data::{streams, Dataset, Prepared, CATALOG_FILE, CUBE_A_FILE, CUBE_B_FILE, LABELS_FILE};
pub use optim::{lr_at, Adam, LrSchedule, STEP_EPOCHS, STEP_FACTOR};
pub use stages::{finetune, init_finetune_model, init_pretrain_model, pretrain, TrainRecord};
