//! Visual features: backbone, region pooling, and text detection.

mod backbone;
mod detect;
pub mod ops;
mod roi;

pub use backbone::{images_to_tensor, Backbone, BackboneConfig, Conv2d, FeatureMap, MIN_IMAGE_SIDE};
pub use detect::{cell_targets, decode, nms, oracle_boxes, DetectConfig, DetectionHead, DetectionOutput, ScoredBox};
pub use roi::{InstanceFeatures, InstanceProjector, RoiAlignConfig};
