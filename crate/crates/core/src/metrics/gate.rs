use serde::{Deserialize, Serialize};

use super::{AgreementReport, MetricsError};

/// Threshold conditions a round must satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    /// Minimum ICR on every criterion.
    pub icr: f64,
    /// Minimum consensus pass-rate, when the phase checks it.
    pub pass_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "condition", rename_all = "snake_case")]
pub enum FailedCondition {
    Icr {
        criterion: String,
        observed: Option<f64>,
        threshold: f64,
    },
    PassRate {
        observed: f64,
        threshold: f64,
    },
}

impl FailedCondition {
    pub fn is_icr(&self) -> bool {
        matches!(self, FailedCondition::Icr { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub failed_conditions: Vec<FailedCondition>,
}

/// Checks a report (and optional pass-rate) against gate thresholds.
///
/// The ICR value per criterion follows the report's metric policy. A
/// configured pass-rate threshold with no pass-rate supplied is an error, as
/// is a report with no criteria.
pub fn evaluate_gate(
    report: &AgreementReport,
    pass_rate: Option<f64>,
    gate: &GateThresholds,
) -> Result<Verdict, MetricsError> {
    if report.criteria.is_empty() {
        return Err(MetricsError::MissingMetric("icr".into()));
    }
    let mut failed = Vec::new();
    for (criterion, entry) in &report.criteria {
        let observed = entry.icr_value(&report.policy);
        if !observed.is_some_and(|v| v >= gate.icr) {
            failed.push(FailedCondition::Icr {
                criterion: criterion.clone(),
                observed,
                threshold: gate.icr,
            });
        }
    }
    if let Some(threshold) = gate.pass_rate {
        let observed = pass_rate.ok_or_else(|| MetricsError::MissingMetric("pass_rate".into()))?;
        if observed < threshold {
            failed.push(FailedCondition::PassRate {
                observed,
                threshold,
            });
        }
    }
    Ok(Verdict {
        passed: failed.is_empty(),
        failed_conditions: failed,
    })
}
