//! Gradient-weighted activation maps for diffusion multimodal language
//! models, four refinement stages, and the metrics used to score them.

pub mod attribution;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod map;
pub mod metrics;
pub mod refine;
pub mod render;
pub mod synth;

pub use config::{BaselineMode, PipelineConfig};
pub use data::{
    ClassMask, FeatureStack, GradientStack, GroundTruthMaskSet, MaskRef, SampleMetadata,
    SequenceFeatures, StepRecord, TokenInfo, VariantLabel,
};
pub use error::{Error, Result};
pub use map::{map_stats, normalize_minmax, ActivationMap, MapStats};
pub use metrics::{evaluate, f3_score, otsu_threshold, Metric, MetricReport, MetricSummary};
pub use refine::{refine, Module, RefineParams, RefineTrace};
