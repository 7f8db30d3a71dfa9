//! Experiment harness: cross-validated comparison, injection sweep,
//! ablation, label-shift stress test and reporting.

mod config;
mod harness;
mod records;
mod report;

pub use config::{ExperimentConfig, Method, Precision};
pub use harness::{Harness, RunOutcome, RunSpec, NO_SHIFT};
pub use records::{read_records, records_from_jsonl, records_to_jsonl, write_records, RunRecord, SCHEMA_VERSION};
pub use report::{ablation_table, histogram_data, make_report, mean_std, method_table, quantile, stress_table, sweep_table};

use crate::error::Result;

macro_rules! dispatch {
    ($cfg:expr, |$h:ident| $body:expr) => {
        match $cfg.precision {
            Precision::F32 => {
                let mut $h = Harness::<f32>::new($cfg.clone())?;
                $body
            }
            Precision::F64 => {
                let mut $h = Harness::<f64>::new($cfg.clone())?;
                $body
            }
        }
    };
}

/// Cross-validated runs of `method`: one record per (seed, fold).
pub fn run_cv(cfg: &ExperimentConfig, method: Method) -> Result<Vec<RunRecord>> {
    dispatch!(cfg, |h| h.run_cv(method))
}

/// The adversarial model at every configured injection ratio and seed.
pub fn injection_sweep(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    dispatch!(cfg, |h| h.injection_sweep())
}

/// Coarse-only, fine-only and full variants on paired splits.
pub fn ablation(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    dispatch!(cfg, |h| h.ablation())
}

/// The adversarial model and DANN under each source label shift.
pub fn stress_test(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    dispatch!(cfg, |h| h.stress_test())
}
