//! Line-delimited label records: one JSON object per (item, rater, criterion).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{LabelMatrix, MetricsError, Rater, RaterKind, ScaleDescriptor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub item_id: String,
    pub rater_id: String,
    pub criterion_id: String,
    pub label: String,
    #[serde(default = "default_kind", skip_serializing_if = "is_human")]
    pub rater_kind: RaterKind,
}

fn default_kind() -> RaterKind {
    RaterKind::Human
}

fn is_human(k: &RaterKind) -> bool {
    *k == RaterKind::Human
}

pub fn read_label_records(reader: impl BufRead) -> Result<Vec<LabelRecord>, MetricsError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MetricsError::Record(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| MetricsError::Record(format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_label_records(
    mut writer: impl Write,
    records: &[LabelRecord],
) -> Result<(), MetricsError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| MetricsError::Record(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| MetricsError::Record(e.to_string()))?;
    }
    Ok(())
}

/// Groups records into one matrix per criterion. Items and raters keep their
/// order of first appearance across the whole record set, so every matrix
/// shares the same axes.
pub fn matrices_from_records(
    records: &[LabelRecord],
    scales: &BTreeMap<String, ScaleDescriptor>,
) -> Result<BTreeMap<String, LabelMatrix>, MetricsError> {
    let mut items: Vec<String> = Vec::new();
    let mut raters: Vec<Rater> = Vec::new();
    for r in records {
        if !items.contains(&r.item_id) {
            items.push(r.item_id.clone());
        }
        match raters.iter().find(|x| x.id == r.rater_id) {
            Some(x) if x.kind != r.rater_kind => {
                return Err(MetricsError::Record(format!(
                    "rater {:?} tagged both human and model",
                    r.rater_id
                )))
            }
            Some(_) => {}
            None => raters.push(Rater {
                id: r.rater_id.clone(),
                kind: r.rater_kind,
            }),
        }
    }
    let mut out = BTreeMap::new();
    for r in records {
        let scale = scales
            .get(&r.criterion_id)
            .ok_or_else(|| MetricsError::Record(format!("unknown criterion {:?}", r.criterion_id)))?;
        if !out.contains_key(&r.criterion_id) {
            out.insert(
                r.criterion_id.clone(),
                LabelMatrix::new(items.clone(), raters.clone(), scale.clone())?,
            );
        }
        let m = out.get_mut(&r.criterion_id).expect("inserted above");
        m.set(&r.item_id, &r.rater_id, &r.label)?;
    }
    Ok(out)
}

/// The inverse of [`matrices_from_records`] for one criterion.
pub fn records_from_matrix(criterion: &str, matrix: &LabelMatrix) -> Vec<LabelRecord> {
    let mut out = Vec::new();
    for (i, item) in matrix.items().iter().enumerate() {
        for (r, rater) in matrix.raters().iter().enumerate() {
            if let Some(label) = matrix.get(i, r) {
                out.push(LabelRecord {
                    item_id: item.clone(),
                    rater_id: rater.id.clone(),
                    criterion_id: criterion.to_string(),
                    label: label.to_string(),
                    rater_kind: rater.kind,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_groups() {
        let text = r#"{"item_id":"u1","rater_id":"A","criterion_id":"rel","label":"high"}
{"item_id":"u1","rater_id":"B","criterion_id":"rel","label":"med"}

{"item_id":"u1","rater_id":"gpt","criterion_id":"rel","label":"med","rater_kind":"model"}
"#;
        let recs = read_label_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        let mut scales = BTreeMap::new();
        scales.insert("rel".to_string(), ScaleDescriptor::ordinal(["low", "med", "high"], ["med", "high"]));
        let ms = matrices_from_records(&recs, &scales).unwrap();
        let m = &ms["rel"];
        assert_eq!(m.raters().len(), 3);
        assert_eq!(m.raters()[2].kind, RaterKind::Model);

        let mut buf = Vec::new();
        write_label_records(&mut buf, &records_from_matrix("rel", m)).unwrap();
        assert_eq!(read_label_records(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn unknown_criterion_rejected() {
        let recs = vec![LabelRecord {
            item_id: "u".into(),
            rater_id: "A".into(),
            criterion_id: "nope".into(),
            label: "x".into(),
            rater_kind: RaterKind::Human,
        }];
        assert!(matrices_from_records(&recs, &BTreeMap::new()).is_err());
    }
}
