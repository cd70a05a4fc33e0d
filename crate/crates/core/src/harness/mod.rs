//! Batch runs, sweeps and reports over a sample manifest.

pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod sweep;
pub mod timing;
pub mod variants;

pub use manifest::{Manifest, ManifestRecord};
pub use pipeline::{
    attributed_inputs, load_manifest, load_masks, load_sample, process, run_attribution, run_eval,
    run_inputs, run_pipeline, run_refine, BatchReport, EvalReport, FeasibilityDoc, Provenance,
    SampleEntry, SampleErrors, SampleInput, SampleOutcome,
};
pub use report::{write_csv, SummaryRow};
pub use sweep::{sweep, SweepSpec, SweepTable};
pub use timing::{time_report, TimingRow};
pub use variants::{variant_report, VariantReport};
