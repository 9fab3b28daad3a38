//! Single-stage anchor detection on booster outputs.

mod anchors;
mod boxes;
mod head;
mod loss;
mod nms;

pub use anchors::{generate_anchors, AnchorAssignment, AnchorLayout, AspectRatio};
pub use boxes::{decode_box, encode_box, iou, BoundingBox, BoxDeltas, MAX_LOG_SCALE};
pub use head::{head_backward, head_forward, HeadCache, HeadConfig, HeadOutput, HeadParams};
pub use loss::{
    assign_targets, detection_loss, sample_anchors, AnchorLabel, Assignment, AssignmentConfig,
    DetectionLoss, LossConfig,
};
pub use nms::nms;

use serde::{Deserialize, Serialize};

/// A scored box on one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub score: f64,
}
