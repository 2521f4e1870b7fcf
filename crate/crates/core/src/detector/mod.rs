//! Desk-scale two-stage detector.

mod boxes;
mod model;

pub use boxes::{anchor_grid, decode, encode, iou, nms, Anchor, BBox, Detection};
pub use model::{
    assign_anchors, backbone_forward, backbone_specs, box_region, build_backbone, classifier_forward, detect,
    detect_from_features, detection_loss, extract_features, roi_pool, rpn_forward, select_proposals, DetLossTerms,
    DetectorConfig, DetectorHead, GroundTruth, HeadBinding, Proposal, RpnOutput, FEATURE_STRIDE, SMOOTH_L1_BETA,
};
