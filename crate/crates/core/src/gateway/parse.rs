use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::ScaleDescriptor;

/// How a response breaks into assessable units.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitSpec {
    /// An enumerated or newline-delimited list; each entry is one unit.
    Generation,
    /// A single predicted label that must lie on this scale.
    Classification(ScaleDescriptor),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum ParseError {
    #[error("response contains no list entries")]
    UnparseableResponse,
    #[error("label {0:?} is not on the scale")]
    UnparseableLabel(String),
}

fn strip_enumeration(line: &str) -> Option<&str> {
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    rest.strip_prefix('.')
        .or_else(|| rest.strip_prefix(')'))
        .map(str::trim)
}

/// Splits a response into units. Pure in `(response, spec)`.
///
/// Generation responses: when any line is numbered (`N.` or `N)`), the
/// numbered lines are the units and anything else is treated as preamble;
/// otherwise every non-empty line is a unit. Classification responses:
/// the trimmed text, minus trailing periods, matched case-insensitively.
pub fn parse_units(response: &str, spec: &UnitSpec) -> Result<Vec<String>, ParseError> {
    match spec {
        UnitSpec::Generation => {
            let lines: Vec<&str> = response
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let numbered: Vec<&str> = lines.iter().filter_map(|l| strip_enumeration(l)).collect();
            let units: Vec<String> = if numbered.is_empty() {
                lines.iter().map(|l| l.to_string()).collect()
            } else {
                numbered.into_iter().filter(|u| !u.is_empty()).map(str::to_string).collect()
            };
            if units.is_empty() {
                Err(ParseError::UnparseableResponse)
            } else {
                Ok(units)
            }
        }
        UnitSpec::Classification(scale) => {
            let cleaned = response.trim().trim_end_matches('.').trim();
            scale
                .match_label(cleaned)
                .map(|l| vec![l.to_string()])
                .ok_or_else(|| ParseError::UnparseableLabel(cleaned.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerated_list() {
        let r = "1. a?\n2. b?\n3. c?\n4. d?\n5. e?";
        assert_eq!(parse_units(r, &UnitSpec::Generation).unwrap().len(), 5);
    }

    #[test]
    fn paren_numbering_and_preamble() {
        let r = "Here are the variants:\n\n1) first\n2) second\n";
        assert_eq!(
            parse_units(r, &UnitSpec::Generation).unwrap(),
            vec!["first".to_string(), "second".to_string()]
        );
    }

    #[test]
    fn bare_lines() {
        assert_eq!(parse_units("x\n\ny\n", &UnitSpec::Generation).unwrap().len(), 2);
        assert_eq!(
            parse_units("  \n", &UnitSpec::Generation),
            Err(ParseError::UnparseableResponse)
        );
    }

    #[test]
    fn classification_labels() {
        let scale = ScaleDescriptor::nominal(["Informational", "Navigational"], []);
        let spec = UnitSpec::Classification(scale);
        assert_eq!(parse_units("Informational", &spec).unwrap(), vec!["Informational".to_string()]);
        assert_eq!(parse_units(" navigational.\n", &spec).unwrap(), vec!["Navigational".to_string()]);
        assert_eq!(
            parse_units("maybe-intent-x", &spec),
            Err(ParseError::UnparseableLabel("maybe-intent-x".into()))
        );
    }
}
