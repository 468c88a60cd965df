//! Layer-wise checkpoint merging and structured-output evaluation.
//!
//! The merging side reads two checkpoints of the same architecture, scores
//! each projection layer pair by mean row-wise cosine similarity, and builds
//! a merged checkpoint by taking whole layers from one side or the other
//! (winner-takes-all), or by task-arithmetic interpolation as a baseline.
//! LoRA adapters can be folded into either checkpoint beforehand.
//!
//! The evaluation side parses the two structured response grammars
//! (`{YYY,PPP,RRR}` Euler angles and `[[x0,y0,x1,y1;...]]` boxes), classifies
//! invalid responses, and computes circular MAE, geodesic rotation error,
//! IoU accuracy and invalid-answer ratios.

pub mod error;
pub mod lora;
pub mod merge;
pub mod metrics;
pub mod rehearsal;
pub mod responses;
pub mod similarity;
pub mod tensorstore;

pub use error::{Error, Result};
pub use lora::{accumulate_checkpoint, adapters_from_checkpoint, apply_lora, LoraAdapter, Matrix};
pub use merge::{
    merge_task_arithmetic, merge_wta, replacement_report, select_layers, Decision, MergeConfig,
    MergeMode, MergePlan, Reason, ReplacementReport, Source,
};
pub use metrics::{
    bbox_accuracy, circular_abs_diff, circular_mae, error_ratios, euler_to_rotmat,
    front_back_split, geodesic_error, iou, AngleRecord, BBoxEvalRecord, EulerConvention,
    AngleSummary, BBoxSummary, Metric, MetricsSummary, RotationMatrix, ValidityCounts,
};
pub use rehearsal::{mix, Manifest, ManifestEntry, MixConfig, RatioBase};
pub use responses::{
    apply_mask, build_vocab_mask, classify_invalid, encode_angles, parse_angles_loose,
    parse_angles_strict, parse_bboxes, BBox, EulerTriple, InvalidReason, ParsedResponse, Payload,
    Task,
};
pub use similarity::{
    classify_tensors, layer_similarity, rowwise_cosine, similarity_table, LayerClassification,
    LayerKind, LayerPatterns, LayerSimilarity,
};
pub use tensorstore::{read_checkpoint, write_checkpoint, Checkpoint, DType, TensorRecord};
