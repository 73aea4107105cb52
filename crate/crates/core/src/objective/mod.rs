//! Training objective and evaluation metrics.

pub mod loss;
pub mod metrics;

pub use loss::{dice_loss, focal_loss, pixel_loss, LossConfig, Targets};
pub use metrics::{hiou, Confusion, MetricsReport};
