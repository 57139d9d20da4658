//! End-to-end experiments, their CSV/JSON outputs and the acceptance criteria.

pub mod config;
pub mod convolution;
pub mod correlation;
pub mod criteria;
pub mod gff;
pub mod green;
pub mod run;

pub use config::{AnalysisConfig, Experiment, KernelConfig, QConfig, RunConfig};
pub use convolution::{convolution_bound_check, shifted_norm, ConvolutionReport, Regime};
pub use correlation::{
    correlation_map, correlation_map_with, theorem_comparison, CorrelationReport, Status, TheoremVerdicts, Verdict,
};
pub use criteria::{CriterionOutcome, Profile, CRITERIA};
pub use green::{corrector_moments, green_decay, GreenDecayReport, MomentTable};
pub use run::{execute, run, run_into, Artifacts, CriterionSummary, RunOutcome, Summary};
pub use crate::fit::decay_fit;
