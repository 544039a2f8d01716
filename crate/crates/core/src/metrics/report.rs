use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    cohens_kappa, krippendorff_alpha, pairwise_table, percent_agreement, unanimity, Coefficient,
    Distance, LabelMatrix, MetricsError, PairwiseAgreement, ScaleKind,
};

/// Which reliability coefficient a gate reads, and what to do when it is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcrMetric {
    KrippendorffAlpha,
    CohensKappa,
    PercentAgreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedPolicy {
    /// An undefined coefficient fails the gate.
    Fail,
    /// An undefined coefficient is replaced by percent agreement.
    FallBackToPercentAgreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricPolicy {
    pub icr_metric: IcrMetric,
    pub undefined: UndefinedPolicy,
}

impl Default for MetricPolicy {
    fn default() -> Self {
        Self {
            icr_metric: IcrMetric::KrippendorffAlpha,
            undefined: UndefinedPolicy::FallBackToPercentAgreement,
        }
    }
}

/// Reliability figures for one criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionAgreement {
    pub percent_agreement: Coefficient,
    /// Fraction of includable items with a unanimous label.
    pub unanimity: Coefficient,
    /// Present only for two-rater matrices; see `pairwise` otherwise.
    pub cohens_kappa: Option<Coefficient>,
    pub pairwise: Vec<PairwiseAgreement>,
    pub krippendorff_alpha: Coefficient,
    pub distance: Distance,
    pub n_items_used: usize,
    pub n_items_excluded: usize,
    pub n_raters: usize,
}

impl CriterionAgreement {
    pub fn compute(matrix: &LabelMatrix) -> Self {
        let distance = match matrix.scale().kind() {
            ScaleKind::Ordinal => Distance::Ordinal,
            ScaleKind::Nominal | ScaleKind::Binary => Distance::Nominal,
        };
        let empty = |_: MetricsError| Coefficient::Undefined {
            reason: "no item carries two or more labels".into(),
        };
        let fraction = |r: Result<f64, MetricsError>| {
            r.map(|value| Coefficient::Defined { value }).unwrap_or_else(empty)
        };
        let n_used = matrix.included_items().len();
        Self {
            percent_agreement: fraction(percent_agreement(matrix)),
            unanimity: fraction(unanimity(matrix)),
            cohens_kappa: (matrix.raters().len() == 2)
                .then(|| cohens_kappa(matrix).unwrap_or_else(empty)),
            pairwise: pairwise_table(matrix),
            krippendorff_alpha: krippendorff_alpha(matrix, distance).unwrap_or_else(empty),
            distance,
            n_items_used: n_used,
            n_items_excluded: matrix.items().len() - n_used,
            n_raters: matrix.raters().len(),
        }
    }

    /// The value a gate compares against its ICR threshold. Kappa over more
    /// than two raters reads the weakest defined pair.
    pub fn icr_value(&self, policy: &MetricPolicy) -> Option<f64> {
        let primary = match policy.icr_metric {
            IcrMetric::KrippendorffAlpha => self.krippendorff_alpha.value(),
            IcrMetric::PercentAgreement => self.percent_agreement.value(),
            IcrMetric::CohensKappa => match &self.cohens_kappa {
                Some(k) => k.value(),
                None => {
                    let values: Vec<f64> =
                        self.pairwise.iter().filter_map(|p| p.cohens_kappa.value()).collect();
                    if values.len() == self.pairwise.len() && !values.is_empty() {
                        values.into_iter().reduce(f64::min)
                    } else {
                        None
                    }
                }
            },
        };
        match (primary, policy.undefined) {
            (Some(v), _) => Some(v),
            (None, UndefinedPolicy::FallBackToPercentAgreement) => self.percent_agreement.value(),
            (None, UndefinedPolicy::Fail) => None,
        }
    }
}

/// Per-criterion agreement over one round's labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub criteria: BTreeMap<String, CriterionAgreement>,
    pub policy: MetricPolicy,
    /// Logical timestamp (event sequence number) at which the report was produced.
    pub computed_at: u64,
}

impl AgreementReport {
    pub fn compute<'a>(
        matrices: impl IntoIterator<Item = (&'a str, &'a LabelMatrix)>,
        policy: MetricPolicy,
        computed_at: u64,
    ) -> Self {
        Self {
            criteria: matrices
                .into_iter()
                .map(|(c, m)| (c.to_string(), CriterionAgreement::compute(m)))
                .collect(),
            policy,
            computed_at,
        }
    }
}
