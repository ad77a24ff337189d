//! Config-driven end-to-end runs over a metadata file and its embeddings.

pub mod config;
pub mod report;
mod run;
pub mod synthetic;

pub use config::{Inputs, PipelineConfig, Stages, TextSection};
pub use report::{explain_uid, render_report, render_trace, Decision, RunReport, StageReport, StageTrace};
pub use run::{run_pipeline, RunOutput, STAGE_ORDER};
