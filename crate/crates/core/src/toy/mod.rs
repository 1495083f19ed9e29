//! Desk-scale unlearning lab: synthetic tasks, a LoRA-adapted toy
//! classifier and the training objectives that produce real adapters.

pub mod loss;
pub mod model;
pub mod task;
pub mod train;

pub use loss::{loss_ga, loss_gd, loss_retain, loss_rmu, LossOutput};
pub use model::{LoraConfig, ToyModel};
pub use task::{gen_task, Dataset, DomainSpec, SyntheticTask, TaskSpec};
pub use train::{pretrain, train_adapter, train_lora, Objective, PretrainConfig, TrainConfig, TrainingSets};
