//! Trust quantification and classification metrics.

mod classification;
pub mod trust;
mod tukey;

pub use classification::{micro_accuracy, roc_auc};
pub use trust::{
    condition_name, conditional_trust, nts, qa_trust, trust_density, trust_report,
    write_spectrum_csv, ConditionTrust, PredictionRecord, TrustConfig, TrustDensity, TrustReport,
    DENSITY_HI, DENSITY_LO, DENSITY_POINTS,
};
pub use tukey::{quantile_sorted, tukey_filter, TukeySplit, TUKEY_K};
