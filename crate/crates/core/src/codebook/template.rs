use std::collections::BTreeMap;

use super::CodebookError;

/// A `{{ name }}` occurrence in template text.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Slot<'a> {
    start: usize,
    end: usize,
    name: &'a str,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

fn scan(text: &str) -> Vec<Slot<'_>> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(open) = text[from..].find("{{") {
        let start = from + open;
        let Some(close) = text[start + 2..].find("}}") else {
            break;
        };
        let end = start + 2 + close + 2;
        let name = text[start + 2..end - 2].trim();
        if valid_name(name) {
            out.push(Slot { start, end, name });
            from = end;
        } else {
            from = start + 2;
        }
    }
    out
}

/// Slot names referenced by `text`, deduplicated in order of first use.
pub fn referenced_slots(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in scan(text) {
        if !out.iter().any(|n| n == s.name) {
            out.push(s.name.to_string());
        }
    }
    out
}

/// Substitutes every `{{ slot }}` in `text` from `payload` in a single pass;
/// substituted values are never rescanned.
pub fn render(text: &str, payload: &BTreeMap<String, String>) -> Result<String, CodebookError> {
    let slots = scan(text);
    if let Some(missing) = slots.iter().find(|s| !payload.contains_key(s.name)) {
        return Err(CodebookError::MissingSlot(missing.name.to_string()));
    }
    let mut out = String::with_capacity(text.len());
    let mut at = 0;
    for s in slots {
        out.push_str(&text[at..s.start]);
        out.push_str(&payload[s.name]);
        at = s.end;
    }
    out.push_str(&text[at..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn scans_names_and_skips_malformed() {
        assert_eq!(
            referenced_slots("a {{x}} b {{ y }} {{x}} {{not valid}} {{"),
            vec!["x".to_string(), "y".to_string()]
        );
    }

    #[test]
    fn values_are_not_rescanned() {
        let out = render("<{{a}}>", &payload(&[("a", "{{a}}")])).unwrap();
        assert_eq!(out, "<{{a}}>");
    }

    #[test]
    fn missing_slot() {
        assert_eq!(
            render("{{question}}", &payload(&[])),
            Err(CodebookError::MissingSlot("question".into()))
        );
    }
}
