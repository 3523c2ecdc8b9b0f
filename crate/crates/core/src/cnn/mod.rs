//! Convolutional malware classifier implemented from scratch.

mod io;
mod layers;
mod metrics;
mod model;
mod tensor;
mod train;

pub use io::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use metrics::{auc, bce_from_logit, sigmoid};
pub use model::{Architecture, CnnModel, Evaluation, Workspace};
pub use tensor::Tensor;
pub use train::{
    evaluate_set, fold_assignment, kfold_train, predict, train, EpochMetrics, FoldOutcome,
    LabeledImage, TrainConfig, TrainReport, METRICS_CSV_HEADER,
};
