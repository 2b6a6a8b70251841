//! Everything around the mapping core: sequence ingestion, synthetic scenes,
//! the end-to-end driver, reports, ablations and artifact export.

pub mod ablation;
pub mod config;
pub mod error;
pub mod export;
pub mod pipeline;
pub mod report;
pub mod sequence;
pub mod synth;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use pipeline::{run_online, run_pipeline, Run, RunOutput};
pub use report::RunReport;
pub use sequence::{load_sequence, Sequence};
