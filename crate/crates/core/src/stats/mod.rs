//! Univariate screening and multivariate regression on patient records.

pub mod analysis;
pub mod correlation;
pub mod records;
pub mod regression;

pub use analysis::{report_csv, report_table, run_analysis, write_reports, OutcomeAnalysis, ScreenMethod, Variable};
pub use correlation::{pearson, phi, phi_from_table, Correlation};
pub use records::{read_patv_csv, read_records, write_clinical_csv, write_patv_csv, PatientRecord};
pub use regression::{logistic_fit, ols_fit, Coefficient, Design, ModelKind, RegressionReport, ALPHA};
