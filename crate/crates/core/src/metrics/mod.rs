//! Inter-coder reliability and criteria pass-rates over label matrices.
//!
//! Everything here is a pure function of its inputs.

mod gate;
mod matrix;
mod records;
mod reliability;
mod report;
mod scale;

pub use gate::{evaluate_gate, FailedCondition, GateThresholds, Verdict};
pub use matrix::{LabelMatrix, Rater, RaterKind};
pub use records::{
    matrices_from_records, read_label_records, records_from_matrix, write_label_records,
    LabelRecord,
};
pub use reliability::{
    cohens_kappa, krippendorff_alpha, pairwise_table, pass_rate, percent_agreement, unanimity,
    Coefficient, Distance, PairKind, PairwiseAgreement, PassRule,
};
pub use report::{AgreementReport, CriterionAgreement, IcrMetric, MetricPolicy, UndefinedPolicy};
pub use scale::{ScaleDescriptor, ScaleKind};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("invalid scale: {0}")]
    InvalidScale(String),
    #[error("invalid matrix: {0}")]
    Shape(String),
    #[error("label {0:?} is not on the scale")]
    LabelOutOfScale(String),
    #[error("no item carries two or more labels")]
    EmptyMatrix,
    #[error("cohen's kappa needs exactly 2 raters, got {0}; use the pairwise table")]
    WrongArity(usize),
    #[error("inconsistent matrices: {0}")]
    Inconsistent(String),
    #[error("gate references metric {0:?} which the report does not carry")]
    MissingMetric(String),
    #[error("label record: {0}")]
    Record(String),
}
