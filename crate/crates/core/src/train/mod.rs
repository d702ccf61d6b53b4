//! Training and evaluation: cross-entropy, Adam, accuracy / AUC, the
//! early-stopped training loop and Grad-CAM.

mod adam;
mod gradcam;
mod loss;
mod metrics;
mod trainer;

pub use adam::{adam_step, AdamConfig};
pub use gradcam::{cam_from_features, colormap, gradcam, resolve_layer, Heatmap};
pub use loss::cross_entropy_value;
pub use metrics::{accuracy, argmax, auc_macro_ovr, binary_auc, softmax_rows, EvalReport};
pub use trainer::{
    check_compatible, epoch_order, evaluate, predict_logits, read_metrics_csv, train, EarlyStopping, EpochRecord,
    Flow, MetricsCsv, TrainConfig, TrainOutcome, CSV_HEADER,
};
