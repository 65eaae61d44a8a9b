//! Center-regression panoptic segmentation.
//!
//! Training-target encoding, the three training losses, the inference-time
//! fusion of semantic, center and offset predictions into a panoptic map, and
//! the evaluation metrics (PQ, mIoU, mask AP).
//!
//! All grids are row-major with `(row, col)` coordinates; offsets are stored
//! as `[d_row, d_col]`. Panoptic ids are `category * label_divisor + instance`.

pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod postprocess;
pub mod selftest;
pub mod synth;
pub mod targets;
pub mod tensor_io;
pub mod types;

pub use losses::{
    l1_offset_loss, mse_heatmap_loss, total_loss, weighted_bootstrapped_ce, LossError, LossValue, LossWeights,
};
pub use metrics::{
    mask_ap, match_segments, mean_iou, panoptic_quality, ApAccumulator, ApParams, ApReport, IoUReport,
    IouAccumulator, MeanOver, PqAccumulator, PqReport, SegmentMatch,
};
pub use postprocess::{
    extract_centers, filter_small_stuff, group_pixels, keypoint_nms, merge_panoptic, panoptic_inference,
    score_instances, InstanceRecord, PanopticResult, PostprocError, PostprocParams, ScoreMode, SemanticInput,
    StuffSegments,
};
pub use targets::{encode_targets, TargetBundle, TargetError, TargetParams};
pub use tensor_io::{read_tensor, write_tensor, Tensor, TensorError};
pub use types::{
    decode_panoptic_id, encode_panoptic_id, BoolGrid, CategorySpec, DatasetSpec, Dims, Grid, Heatmap,
    InstanceCenter, LabelMap, OffsetField, ScoreVolume, ShapeError, Volume, WeightMap,
};
