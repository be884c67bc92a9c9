//! Round-robin evaluation: each non-test task takes one turn as the
//! held-out validation target while the others meta-train, repeated over
//! seeded runs and aggregated after Tukey-fence filtering.

mod aggregate;
mod plan;
mod report;
mod run;

pub use aggregate::{aggregate, mean_std, Removed, RunValue, Summary};
pub use plan::{
    normalize_split, plan_round_robin, prepare_task, round_data, test_task_name, RoundData,
    RoundPlan,
};
pub use report::{
    build_report, emit_report, report_json, tables_csv, HarnessOutput, OverallReport, Report,
    RoundReport, Spectrum, REPORT_SCHEMA,
};
pub use run::{
    prepare_metaset, round_tag, run_protocol, run_round, run_rounds, HarnessConfig, ProtocolRuns,
    RoundJob, RunResult,
};
