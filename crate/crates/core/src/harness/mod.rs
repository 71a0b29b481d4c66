//! Configuration, datasets, the staged pipeline and evaluation reports.

pub mod config;
pub mod dataset;
pub mod pipeline;

pub use config::PipelineConfig;
pub use dataset::{DatasetManifest, Record, Source, Split, SynthImage, SynthKind};
pub use pipeline::{run_pipeline, scale_sweep, EvalReport, RunResult, Workspace};
