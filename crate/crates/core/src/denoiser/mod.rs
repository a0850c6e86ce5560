//! Affinity-guided pooling of dense features, text matching, and
//! background refinement.

pub mod affinity;
pub mod background;
pub mod heads;
pub mod matching;
pub mod pipeline;
pub mod pooling;
pub mod upsample;

pub use affinity::{compute_affinity, threshold_affinity, AffinityMatrix, AffinitySource, PoolingWeights};
pub use background::refine_background;
pub use heads::{predict_affinity, predict_objectness, AffinityHead, Heads, ObjectnessHead, ObjectnessMap};
pub use matching::{similarity_map, SegmentationResult};
pub use pipeline::{
    maskclip_baseline, segment_features, BackgroundSource, Pipeline, PipelineConfig, PoolingSource,
    Segmentation, TeacherSignals,
};
pub use pooling::guided_pool;
pub use upsample::{upsample_to_pixels, LabelMap, PixelAccumulator, PixelScores};
