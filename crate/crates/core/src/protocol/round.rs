use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{GateConfig, PhaseKind};
use crate::codebook::{Criterion, TaskKind};
use crate::corpus::SampleAllocation;
use crate::gateway::{GenerationRecord, ItemFailure};
use crate::metrics::{
    evaluate_gate, pass_rate, AgreementReport, FailedCondition, GateThresholds, LabelMatrix,
    MetricsError, PassRule, Rater, Verdict,
};

/// One thing assessors label: a parsed probe for generation tasks, or the
/// input item itself for classification tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    pub item_id: String,
    pub text: String,
    /// The primary model's predicted label (classification tasks).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_label: Option<String>,
}

/// unit id → criterion id → label; `None` is an explicit skip.
pub type Labels = BTreeMap<String, BTreeMap<String, Option<String>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub rater: String,
    pub labels: Labels,
    pub submitted_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Open,
    GatedFail,
    GatedPass,
}

/// A unit on which at least two assessors gave different labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub unit_id: String,
    pub criteria: Vec<String>,
    /// rater → criterion → label, side by side.
    pub labels: BTreeMap<String, BTreeMap<String, Option<String>>>,
}

/// Everything `gate_round` derives from a closed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateComputation {
    pub report: AgreementReport,
    /// Humans plus model raters, when model columns exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixed_report: Option<AgreementReport>,
    pub pass_rate: Option<f64>,
    pub thresholds: GateThresholds,
    pub verdict: Verdict,
    pub disagreements: Vec<Disagreement>,
    /// Where a failed validation round sends the project.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routed_to: Option<PhaseKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub id: String,
    pub phase: PhaseKind,
    pub ordinal: u32,
    pub codebook_version: u32,
    pub prompt_version: u32,
    pub allocation: SampleAllocation,
    /// Responses of the primary model.
    pub records: Vec<GenerationRecord>,
    /// Responses of the other configured models (classification validation).
    #[serde(default)]
    pub comparison_records: Vec<GenerationRecord>,
    #[serde(default)]
    pub failures: Vec<ItemFailure>,
    pub units: Vec<Unit>,
    pub assignees: Vec<String>,
    /// model rater id → unit id → label.
    #[serde(default)]
    pub model_labels: BTreeMap<String, BTreeMap<String, String>>,
    pub assessments: BTreeMap<String, Assessment>,
    /// Bumped on every submission; clients may pass it for optimistic concurrency.
    pub version: u64,
    pub opened_at: u64,
    pub outcome: Outcome,
    pub gate: Option<GateComputation>,
    pub gated_at: Option<u64>,
    pub deliberation_ids: Vec<String>,
    /// Revision that resolved a failed gate.
    pub resolution: Option<String>,
}

impl Round {
    pub fn labeling_closed(&self) -> bool {
        self.assignees.iter().all(|a| self.assessments.contains_key(a))
    }

    pub fn awaiting(&self) -> Vec<String> {
        self.assignees
            .iter()
            .filter(|a| !self.assessments.contains_key(*a))
            .cloned()
            .collect()
    }

    pub fn unit_ids(&self) -> Vec<String> {
        self.units.iter().map(|u| u.id.clone()).collect()
    }

    /// Units a deliberation may cite: disagreements, plus units that failed
    /// consensus when the gate checked pass-rate.
    pub fn deliberable_units(&self, criteria: &[Criterion]) -> BTreeSet<String> {
        let Some(gate) = &self.gate else {
            return BTreeSet::new();
        };
        let mut out: BTreeSet<String> =
            gate.disagreements.iter().map(|d| d.unit_id.clone()).collect();
        if gate.thresholds.pass_rate.is_some() {
            for u in &self.units {
                let passes = self.assignees.iter().all(|r| {
                    criteria.iter().all(|c| {
                        self.assessments
                            .get(r)
                            .and_then(|a| a.labels.get(&u.id))
                            .and_then(|l| l.get(&c.id))
                            .and_then(Option::as_deref)
                            .is_some_and(|l| c.scale.is_passing(l))
                    })
                });
                if !passes {
                    out.insert(u.id.clone());
                }
            }
        }
        out
    }
}

fn label_of<'a>(
    assessments: &'a BTreeMap<String, Assessment>,
    rater: &str,
    unit: &str,
    criterion: &str,
) -> Option<&'a str> {
    assessments
        .get(rater)?
        .labels
        .get(unit)?
        .get(criterion)?
        .as_deref()
}

/// One matrix per criterion over units × human assessors.
pub fn human_matrices(
    unit_ids: &[String],
    assignees: &[String],
    assessments: &BTreeMap<String, Assessment>,
    criteria: &[Criterion],
) -> Result<BTreeMap<String, LabelMatrix>, MetricsError> {
    let raters: Vec<Rater> = assignees.iter().map(Rater::human).collect();
    let mut out = BTreeMap::new();
    for c in criteria {
        let mut m = LabelMatrix::new(unit_ids.to_vec(), raters.clone(), c.scale.clone())?;
        for unit in unit_ids {
            for rater in assignees {
                if let Some(label) = label_of(assessments, rater, unit, &c.id) {
                    m.set(unit, rater, label)?;
                }
            }
        }
        out.insert(c.id.clone(), m);
    }
    Ok(out)
}

/// Humans plus one column per model for `criterion`.
pub fn mixed_matrices(
    unit_ids: &[String],
    assignees: &[String],
    assessments: &BTreeMap<String, Assessment>,
    model_labels: &BTreeMap<String, BTreeMap<String, String>>,
    criterion: &Criterion,
) -> Result<LabelMatrix, MetricsError> {
    let mut raters: Vec<Rater> = assignees.iter().map(Rater::human).collect();
    raters.extend(model_labels.keys().map(Rater::model));
    let mut m = LabelMatrix::new(unit_ids.to_vec(), raters, criterion.scale.clone())?;
    for unit in unit_ids {
        for rater in assignees {
            if let Some(label) = label_of(assessments, rater, unit, &criterion.id) {
                m.set(unit, rater, label)?;
            }
        }
        for (model, labels) in model_labels {
            if let Some(label) = labels.get(unit) {
                m.set(unit, model, label)?;
            }
        }
    }
    Ok(m)
}

pub(crate) fn disagreements_for(
    unit_ids: &[String],
    assignees: &[String],
    assessments: &BTreeMap<String, Assessment>,
    criteria: &[Criterion],
) -> Vec<Disagreement> {
    let mut out = Vec::new();
    for unit in unit_ids {
        let differing: Vec<String> = criteria
            .iter()
            .filter(|c| {
                let present: BTreeSet<&str> = assignees
                    .iter()
                    .filter_map(|r| label_of(assessments, r, unit, &c.id))
                    .collect();
                present.len() > 1
            })
            .map(|c| c.id.clone())
            .collect();
        if differing.is_empty() {
            continue;
        }
        let labels = assignees
            .iter()
            .map(|r| {
                let row = criteria
                    .iter()
                    .map(|c| (c.id.clone(), label_of(assessments, r, unit, &c.id).map(str::to_string)))
                    .collect();
                (r.clone(), row)
            })
            .collect();
        out.push(Disagreement {
            unit_id: unit.clone(),
            criteria: differing,
            labels,
        });
    }
    out
}

/// Thresholds a round of `phase` is held to.
pub fn thresholds_for(phase: PhaseKind, task: TaskKind, gate: &GateConfig) -> GateThresholds {
    let checks_pass_rate = task == TaskKind::Generation
        && matches!(phase, PhaseKind::PromptDevelopment | PhaseKind::Validation);
    GateThresholds {
        icr: gate.icr_threshold,
        pass_rate: checks_pass_rate.then_some(gate.pass_rate_threshold),
    }
}

/// Computes the agreement report, pass-rate and verdict for a closed round.
#[allow(clippy::too_many_arguments)]
pub fn compute_gate(
    phase: PhaseKind,
    thresholds: &GateThresholds,
    policy: crate::metrics::MetricPolicy,
    unit_ids: &[String],
    assignees: &[String],
    assessments: &BTreeMap<String, Assessment>,
    model_labels: &BTreeMap<String, BTreeMap<String, String>>,
    criteria: &[Criterion],
    computed_at: u64,
) -> Result<GateComputation, MetricsError> {
    let matrices = human_matrices(unit_ids, assignees, assessments, criteria)?;
    let report = AgreementReport::compute(
        matrices.iter().map(|(c, m)| (c.as_str(), m)),
        policy,
        computed_at,
    );
    let mixed_report = match (model_labels.is_empty(), criteria.first()) {
        (false, Some(first)) => {
            let m = mixed_matrices(unit_ids, assignees, assessments, model_labels, first)?;
            Some(AgreementReport::compute([(first.id.as_str(), &m)], policy, computed_at))
        }
        _ => None,
    };
    let rate = match thresholds.pass_rate {
        Some(_) => {
            let refs: Vec<&LabelMatrix> = matrices.values().collect();
            Some(pass_rate(&refs, PassRule::Consensus)?)
        }
        None => None,
    };
    let verdict = evaluate_gate(&report, rate, thresholds)?;
    let routed_to = (phase == PhaseKind::Validation && !verdict.passed).then(|| {
        if verdict.failed_conditions.iter().any(FailedCondition::is_icr) {
            PhaseKind::CriteriaCalibration
        } else {
            PhaseKind::PromptDevelopment
        }
    });
    Ok(GateComputation {
        report,
        mixed_report,
        pass_rate: rate,
        thresholds: thresholds.clone(),
        verdict,
        disagreements: disagreements_for(unit_ids, assignees, assessments, criteria),
        routed_to,
    })
}
