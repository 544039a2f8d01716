use serde::{Deserialize, Serialize};

use super::MetricsError;

/// How labels on a scale relate to one another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleKind {
    Nominal,
    /// Values are listed in rank order, lowest first.
    Ordinal,
    Binary,
}

/// The label vocabulary of one criterion together with the subset of labels
/// that count as meeting the criterion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawScale", into = "RawScale")]
pub struct ScaleDescriptor {
    kind: ScaleKind,
    values: Vec<String>,
    passing: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawScale {
    kind: ScaleKind,
    values: Vec<String>,
    passing: Vec<String>,
}

impl TryFrom<RawScale> for ScaleDescriptor {
    type Error = MetricsError;

    fn try_from(raw: RawScale) -> Result<Self, Self::Error> {
        ScaleDescriptor::new(raw.kind, raw.values, raw.passing)
    }
}

impl From<ScaleDescriptor> for RawScale {
    fn from(s: ScaleDescriptor) -> Self {
        RawScale {
            kind: s.kind,
            values: s.values,
            passing: s.passing,
        }
    }
}

impl ScaleDescriptor {
    pub fn new<V, P>(kind: ScaleKind, values: V, passing: P) -> Result<Self, MetricsError>
    where
        V: IntoIterator,
        V::Item: Into<String>,
        P: IntoIterator,
        P::Item: Into<String>,
    {
        let values: Vec<String> = values.into_iter().map(Into::into).collect();
        let passing: Vec<String> = passing.into_iter().map(Into::into).collect();
        if values.is_empty() {
            return Err(MetricsError::InvalidScale("scale has no values".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if v.is_empty() {
                return Err(MetricsError::InvalidScale("empty label value".into()));
            }
            if values[..i].contains(v) {
                return Err(MetricsError::InvalidScale(format!("duplicate value {v:?}")));
            }
        }
        if kind == ScaleKind::Binary && values.len() != 2 {
            return Err(MetricsError::InvalidScale(format!(
                "binary scale needs exactly 2 values, got {}",
                values.len()
            )));
        }
        for (i, p) in passing.iter().enumerate() {
            if !values.contains(p) {
                return Err(MetricsError::InvalidScale(format!(
                    "passing value {p:?} is not on the scale"
                )));
            }
            if passing[..i].contains(p) {
                return Err(MetricsError::InvalidScale(format!("duplicate passing value {p:?}")));
            }
        }
        Ok(Self {
            kind,
            values,
            passing,
        })
    }

    /// Convenience constructor for literal scales; panics on an invalid scale.
    pub fn nominal<const N: usize, const M: usize>(values: [&str; N], passing: [&str; M]) -> Self {
        Self::new(ScaleKind::Nominal, values, passing).expect("valid nominal scale")
    }

    /// Convenience constructor for literal scales; panics on an invalid scale.
    pub fn ordinal<const N: usize, const M: usize>(values: [&str; N], passing: [&str; M]) -> Self {
        Self::new(ScaleKind::Ordinal, values, passing).expect("valid ordinal scale")
    }

    /// Convenience constructor for literal scales; panics on an invalid scale.
    pub fn binary<const M: usize>(values: [&str; 2], passing: [&str; M]) -> Self {
        Self::new(ScaleKind::Binary, values, passing).expect("valid binary scale")
    }

    pub fn kind(&self) -> ScaleKind {
        self.kind
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn passing(&self) -> &[String] {
        &self.passing
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.values.iter().position(|v| v == label)
    }

    /// Case-insensitive lookup returning the canonical spelling.
    pub fn match_label(&self, label: &str) -> Option<&str> {
        let wanted = label.trim();
        self.values
            .iter()
            .find(|v| v.eq_ignore_ascii_case(wanted) || v.to_lowercase() == wanted.to_lowercase())
            .map(String::as_str)
    }

    pub fn is_passing(&self, label: &str) -> bool {
        self.passing.iter().any(|p| p == label)
    }

    pub(crate) fn passing_index(&self, index: usize) -> bool {
        self.values
            .get(index)
            .is_some_and(|v| self.is_passing(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_scales() {
        assert!(ScaleDescriptor::new(ScaleKind::Nominal, Vec::<String>::new(), Vec::<String>::new()).is_err());
        assert!(ScaleDescriptor::new(ScaleKind::Nominal, ["a", "a"], Vec::<&str>::new()).is_err());
        assert!(ScaleDescriptor::new(ScaleKind::Binary, ["a", "b", "c"], Vec::<&str>::new()).is_err());
        assert!(ScaleDescriptor::new(ScaleKind::Ordinal, ["low", "high"], ["mid"]).is_err());
    }

    #[test]
    fn serde_validates() {
        let ok: ScaleDescriptor =
            serde_json::from_str(r#"{"kind":"binary","values":["no","yes"],"passing":["yes"]}"#).unwrap();
        assert!(ok.is_passing("yes"));
        let bad = serde_json::from_str::<ScaleDescriptor>(
            r#"{"kind":"binary","values":["no"],"passing":[]}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn case_insensitive_match() {
        let s = ScaleDescriptor::nominal(["Informational", "Navigational"], []);
        assert_eq!(s.match_label(" informational "), Some("Informational"));
        assert_eq!(s.match_label("maybe-intent-x"), None);
    }
}
