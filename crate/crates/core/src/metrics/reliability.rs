use serde::{Deserialize, Serialize};

use super::{LabelMatrix, MetricsError, RaterKind};

/// A reliability coefficient that may be undefined for the given data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Coefficient {
    Defined { value: f64 },
    Undefined { reason: String },
}

impl Coefficient {
    pub fn value(&self) -> Option<f64> {
        match self {
            Coefficient::Defined { value } => Some(*value),
            Coefficient::Undefined { .. } => None,
        }
    }

    fn undefined(reason: &str) -> Self {
        Coefficient::Undefined {
            reason: reason.to_string(),
        }
    }
}

/// Distance function used by Krippendorff's alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Nominal,
    Ordinal,
}

/// Fraction of agreeing rater pairs, averaged over includable items.
///
/// With two raters this is the plain fraction of items labeled identically.
pub fn percent_agreement(matrix: &LabelMatrix) -> Result<f64, MetricsError> {
    let included = matrix.included_items();
    if included.is_empty() {
        return Err(MetricsError::EmptyMatrix);
    }
    let total: f64 = included
        .iter()
        .map(|&i| {
            let labels: Vec<usize> = matrix.row(i).collect();
            let mut agree = 0usize;
            let mut pairs = 0usize;
            for a in 0..labels.len() {
                for b in a + 1..labels.len() {
                    pairs += 1;
                    if labels[a] == labels[b] {
                        agree += 1;
                    }
                }
            }
            agree as f64 / pairs as f64
        })
        .sum();
    Ok(total / included.len() as f64)
}

/// Fraction of includable items on which every present label is identical.
pub fn unanimity(matrix: &LabelMatrix) -> Result<f64, MetricsError> {
    let included = matrix.included_items();
    if included.is_empty() {
        return Err(MetricsError::EmptyMatrix);
    }
    let unanimous = included
        .iter()
        .filter(|&&i| {
            let mut row = matrix.row(i);
            let first = row.next();
            row.all(|v| Some(v) == first)
        })
        .count();
    Ok(unanimous as f64 / included.len() as f64)
}

/// Cohen's kappa for exactly two raters over jointly labeled items.
///
/// Computed in integer counts: `(n·agree − Σ a_k b_k) / (n² − Σ a_k b_k)`,
/// which equals `(p_o − p_e) / (1 − p_e)` with chance agreement from the
/// product of the two raters' marginals.
pub fn cohens_kappa(matrix: &LabelMatrix) -> Result<Coefficient, MetricsError> {
    if matrix.raters().len() != 2 {
        return Err(MetricsError::WrongArity(matrix.raters().len()));
    }
    let k = matrix.scale().values().len();
    let mut marg_a = vec![0u64; k];
    let mut marg_b = vec![0u64; k];
    let mut n = 0u64;
    let mut agree = 0u64;
    for i in 0..matrix.items().len() {
        if let (Some(a), Some(b)) = (matrix.cell(i, 0), matrix.cell(i, 1)) {
            n += 1;
            marg_a[a] += 1;
            marg_b[b] += 1;
            if a == b {
                agree += 1;
            }
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let chance: u64 = marg_a.iter().zip(&marg_b).map(|(a, b)| a * b).sum();
    let denom = n * n - chance;
    if denom == 0 {
        return Ok(Coefficient::undefined(
            "both raters used a single identical category throughout (p_e = 1)",
        ));
    }
    let numer = (n * agree) as f64 - chance as f64;
    Ok(Coefficient::Defined {
        value: numer / denom as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    HumanHuman,
    HumanModel,
    ModelModel,
}

/// Agreement between one pair of raters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseAgreement {
    pub rater_a: String,
    pub rater_b: String,
    pub kind: PairKind,
    pub n_items: usize,
    pub percent_agreement: Coefficient,
    pub cohens_kappa: Coefficient,
}

/// Cohen's kappa and percent agreement for every pair of raters, in rater order.
pub fn pairwise_table(matrix: &LabelMatrix) -> Vec<PairwiseAgreement> {
    let raters = matrix.raters();
    let mut out = Vec::new();
    for a in 0..raters.len() {
        for b in a + 1..raters.len() {
            let pair = matrix.pair(a, b);
            let kind = match (raters[a].kind, raters[b].kind) {
                (RaterKind::Human, RaterKind::Human) => PairKind::HumanHuman,
                (RaterKind::Model, RaterKind::Model) => PairKind::ModelModel,
                _ => PairKind::HumanModel,
            };
            let empty = |_| Coefficient::undefined("no jointly labeled items");
            out.push(PairwiseAgreement {
                rater_a: raters[a].id.clone(),
                rater_b: raters[b].id.clone(),
                kind,
                n_items: pair.included_items().len(),
                percent_agreement: percent_agreement(&pair)
                    .map(|value| Coefficient::Defined { value })
                    .unwrap_or_else(empty),
                cohens_kappa: cohens_kappa(&pair).unwrap_or_else(empty),
            });
        }
    }
    out
}

/// Krippendorff's alpha in coincidence-matrix form, `1 − D_o / D_e`.
pub fn krippendorff_alpha(
    matrix: &LabelMatrix,
    distance: Distance,
) -> Result<Coefficient, MetricsError> {
    let included = matrix.included_items();
    if included.is_empty() {
        return Err(MetricsError::EmptyMatrix);
    }
    let k = matrix.scale().values().len();
    let mut coincidence = vec![vec![0.0f64; k]; k];
    for &i in &included {
        let labels: Vec<usize> = matrix.row(i).collect();
        let weight = 1.0 / (labels.len() - 1) as f64;
        for (x, &c) in labels.iter().enumerate() {
            for (y, &d) in labels.iter().enumerate() {
                if x != y {
                    coincidence[c][d] += weight;
                }
            }
        }
    }
    let marginals: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    let delta = squared_distances(&marginals, distance);

    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..k {
        for d in 0..k {
            observed += coincidence[c][d] * delta[c][d];
            expected += marginals[c] * marginals[d] * delta[c][d];
        }
    }
    if expected == 0.0 {
        return Ok(Coefficient::undefined(
            "expected disagreement is zero (a single category in use)",
        ));
    }
    Ok(Coefficient::Defined {
        value: 1.0 - (n - 1.0) * observed / expected,
    })
}

fn squared_distances(marginals: &[f64], distance: Distance) -> Vec<Vec<f64>> {
    let k = marginals.len();
    let mut delta = vec![vec![0.0; k]; k];
    for c in 0..k {
        for d in 0..k {
            delta[c][d] = match distance {
                Distance::Nominal => f64::from(u8::from(c != d)),
                Distance::Ordinal => {
                    let (lo, hi) = if c <= d { (c, d) } else { (d, c) };
                    let span: f64 = marginals[lo..=hi].iter().sum();
                    let x = span - (marginals[c] + marginals[d]) / 2.0;
                    x * x
                }
            };
        }
    }
    delta
}

/// How per-rater, per-criterion judgments combine into an item-level pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassRule {
    /// Every rater's label on every criterion lies in that criterion's passing set.
    #[default]
    Consensus,
}

/// Fraction of items that pass under `rule` across a set of per-criterion matrices.
///
/// A missing label counts as not passing.
pub fn pass_rate(matrices: &[&LabelMatrix], rule: PassRule) -> Result<f64, MetricsError> {
    let Some(first) = matrices.first() else {
        return Err(MetricsError::EmptyMatrix);
    };
    for m in &matrices[1..] {
        if m.items() != first.items() {
            return Err(MetricsError::Inconsistent("criteria cover different item sets".into()));
        }
        let ids = |m: &LabelMatrix| m.raters().iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        if ids(m) != ids(first) {
            return Err(MetricsError::Inconsistent("criteria cover different raters".into()));
        }
    }
    let n_items = first.items().len();
    let n_raters = first.raters().len();
    let PassRule::Consensus = rule;
    let passed = (0..n_items)
        .filter(|&i| {
            matrices.iter().all(|m| {
                (0..n_raters).all(|r| m.cell(i, r).is_some_and(|v| m.scale().passing_index(v)))
            })
        })
        .count();
    Ok(passed as f64 / n_items as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Rater, ScaleDescriptor};

    fn two(rows: &[(&str, &str)], values: [&'static str; 3]) -> LabelMatrix {
        let rows: Vec<Vec<Option<&str>>> =
            rows.iter().map(|(a, b)| vec![Some(*a), Some(*b)]).collect();
        LabelMatrix::from_rows(
            vec![Rater::human("A"), Rater::human("B")],
            ScaleDescriptor::nominal(values, []),
            &rows,
        )
        .unwrap()
    }

    #[test]
    fn kappa_undefined_when_single_shared_category() {
        let m = two(&[("x", "x"), ("x", "x")], ["x", "y", "z"]);
        assert!(matches!(cohens_kappa(&m).unwrap(), Coefficient::Undefined { .. }));
        assert!(matches!(
            krippendorff_alpha(&m, Distance::Nominal).unwrap(),
            Coefficient::Undefined { .. }
        ));
    }

    #[test]
    fn kappa_wrong_arity() {
        let m = LabelMatrix::from_rows(
            vec![Rater::human("A"), Rater::human("B"), Rater::human("C")],
            ScaleDescriptor::nominal(["x", "y"], []),
            &[vec![Some("x"), Some("y"), Some("x")]],
        )
        .unwrap();
        assert!(matches!(cohens_kappa(&m), Err(MetricsError::WrongArity(3))));
    }

    #[test]
    fn kappa_no_joint_items() {
        let m = LabelMatrix::from_rows(
            vec![Rater::human("A"), Rater::human("B")],
            ScaleDescriptor::nominal(["x", "y"], []),
            &[vec![Some("x"), None], vec![None, Some("y")]],
        )
        .unwrap();
        assert!(matches!(cohens_kappa(&m), Err(MetricsError::EmptyMatrix)));
        assert!(matches!(percent_agreement(&m), Err(MetricsError::EmptyMatrix)));
        assert!(matches!(
            krippendorff_alpha(&m, Distance::Nominal),
            Err(MetricsError::EmptyMatrix)
        ));
    }

    #[test]
    fn ordinal_alpha_penalizes_far_disagreement_more() {
        let near = LabelMatrix::from_rows(
            vec![Rater::human("A"), Rater::human("B")],
            ScaleDescriptor::ordinal(["low", "med", "high"], []),
            &[
                vec![Some("low"), Some("low")],
                vec![Some("med"), Some("med")],
                vec![Some("high"), Some("high")],
                vec![Some("low"), Some("med")],
            ],
        )
        .unwrap();
        let far = LabelMatrix::from_rows(
            vec![Rater::human("A"), Rater::human("B")],
            ScaleDescriptor::ordinal(["low", "med", "high"], []),
            &[
                vec![Some("low"), Some("low")],
                vec![Some("med"), Some("med")],
                vec![Some("high"), Some("high")],
                vec![Some("low"), Some("high")],
            ],
        )
        .unwrap();
        let a_near = krippendorff_alpha(&near, Distance::Ordinal).unwrap().value().unwrap();
        let a_far = krippendorff_alpha(&far, Distance::Ordinal).unwrap().value().unwrap();
        assert!(a_near > a_far, "{a_near} vs {a_far}");
    }

    #[test]
    fn pass_rate_inconsistent_items() {
        let a = two(&[("x", "x")], ["x", "y", "z"]);
        let b = two(&[("x", "x"), ("y", "y")], ["x", "y", "z"]);
        assert!(matches!(
            pass_rate(&[&a, &b], PassRule::Consensus),
            Err(MetricsError::Inconsistent(_))
        ));
    }
}
