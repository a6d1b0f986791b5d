//! Sample-quality and alignment metrics.

mod metrics;
mod report;

pub use metrics::{cond_accuracy, ffd, projection_frames, sliced_w2, w2_squared_sorted, FFD_DIAG_REG};
pub use report::*;
