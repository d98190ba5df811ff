//! Label-free fine-tuning of the quantization scales: a fake-quantized
//! student is trained to reproduce the float teacher's logits.

pub mod adam;
pub mod finetune;
pub mod loss;
pub mod schedule;
pub mod student;

pub use adam::AdamState;
pub use finetune::{distillation_rmse, finetune, student_logits, teacher_logits, FinetuneOutput, StepLog};
pub use loss::{distillation_loss, distillation_loss_grad};
pub use schedule::{cosine_lr, TrainConfig, TrainGroups};
pub use student::{LayerScales, PointwiseScales, SiteGrads, Student, StudentGrads, StudentTrace, POINTWISE_RANGE};
