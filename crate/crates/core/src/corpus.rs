//! Dataset ingestion and seeded, allocation-tracked sampling.
//!
//! Dataset files hold one JSON record per line:
//! `{"id": "q1", "text": "...", "meta": {...}}` with `meta` optional.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("duplicate item id {0:?}")]
    Duplicate(String),
    #[error("dataset is empty")]
    Empty,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("asked for {requested} items but only {available} remain")]
    Exhausted { requested: usize, available: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Map<String, serde_json::Value>>,
}

impl DatasetItem {
    /// Values available to prompt slots: the item text under `input_slot`
    /// plus every string-valued metadata field under its own key.
    pub fn payload(&self, input_slot: &str) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        if let Some(meta) = &self.meta {
            for (k, v) in meta {
                if let Some(s) = v.as_str() {
                    out.insert(k.clone(), s.to_string());
                }
            }
        }
        out.insert(input_slot.to_string(), self.text.clone());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub source: String,
    /// Hex SHA-256 of the ingested bytes.
    pub content_hash: String,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.id.as_str())
    }

    /// Serializes back to the line-delimited record format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(item).expect("dataset items serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn ingest(id: &str, source: &str, bytes: &[u8]) -> Result<Dataset, CorpusError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CorpusError::Parse { line: 0, reason: format!("not UTF-8: {e}") })?;
    let mut items: Vec<DatasetItem> = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: DatasetItem = serde_json::from_str(line)
            .map_err(|e| CorpusError::Parse { line: n + 1, reason: e.to_string() })?;
        if item.id.is_empty() {
            return Err(CorpusError::Parse { line: n + 1, reason: "empty id".into() });
        }
        if item.text.trim().is_empty() {
            return Err(CorpusError::Parse { line: n + 1, reason: "empty text".into() });
        }
        if !seen.insert(item.id.clone()) {
            return Err(CorpusError::Duplicate(item.id));
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(Dataset {
        id: id.to_string(),
        source: source.to_string(),
        content_hash: hex::encode(Sha256::digest(bytes)),
        items,
    })
}

/// Which items a round or run drew, and how.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleAllocation {
    pub scope: String,
    pub item_ids: Vec<String>,
    pub seed: u64,
    pub exclusions: BTreeSet<String>,
    /// Set when fewer than the requested number of items remained and the
    /// caller accepted a partial draw.
    #[serde(default)]
    pub partial: bool,
}

fn rng_for(dataset_hash: &str, tag: &str, n: usize, seed: u64, exclusions: &BTreeSet<String>) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(dataset_hash.as_bytes());
    h.update([0]);
    h.update(tag.as_bytes());
    h.update((n as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    for e in exclusions {
        h.update(e.as_bytes());
        h.update([0]);
    }
    ChaCha20Rng::from_seed(h.finalize().into())
}

/// Draws `n` distinct items uniformly without replacement from the dataset
/// minus `exclusions`. The draw depends only on (dataset hash, n, seed,
/// exclusions).
pub fn sample(
    dataset: &Dataset,
    scope: &str,
    n: usize,
    seed: u64,
    exclusions: &BTreeSet<String>,
    allow_partial: bool,
) -> Result<SampleAllocation, CorpusError> {
    if n == 0 {
        return Err(CorpusError::Invalid("sample size must be at least 1".into()));
    }
    let pool: Vec<&str> = dataset.ids().filter(|id| !exclusions.contains(*id)).collect();
    let (take, partial) = if n > pool.len() {
        if !allow_partial || pool.is_empty() {
            return Err(CorpusError::Exhausted { requested: n, available: pool.len() });
        }
        (pool.len(), true)
    } else {
        (n, false)
    };
    let mut rng = rng_for(&dataset.content_hash, "sample", n, seed, exclusions);
    let picked = index::sample(&mut rng, pool.len(), take);
    Ok(SampleAllocation {
        scope: scope.to_string(),
        item_ids: picked.into_iter().map(|i| pool[i].to_string()).collect(),
        seed,
        exclusions: exclusions.clone(),
        partial,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSplit {
    pub development: Vec<String>,
    pub validation: Vec<String>,
    pub fraction: f64,
    pub seed: u64,
}

/// Splits the dataset into a development part and a validation part holding
/// `round(fraction · n)` items (at least one of each). Both parts keep
/// dataset order.
pub fn holdout_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<HoldoutSplit, CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::Invalid(format!("holdout fraction {fraction} not in (0, 1)")));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(CorpusError::Invalid("need at least 2 items to split".into()));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = rng_for(&dataset.content_hash, "holdout", k, seed, &BTreeSet::new());
    let chosen: BTreeSet<usize> = index::sample(&mut rng, n, k).into_iter().collect();
    let (mut development, mut validation) = (Vec::new(), Vec::new());
    for (i, id) in dataset.ids().enumerate() {
        if chosen.contains(&i) {
            validation.push(id.to_string());
        } else {
            development.push(id.to_string());
        }
    }
    Ok(HoldoutSplit { development, validation, fraction, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(n: usize) -> String {
        (0..n)
            .map(|i| format!("{{\"id\":\"q{i}\",\"text\":\"Question number {i}?\"}}\n"))
            .collect()
    }

    #[test]
    fn ingest_errors() {
        assert_eq!(ingest("d", "mem", b""), Err(CorpusError::Empty));
        assert_eq!(ingest("d", "mem", b"\n\n"), Err(CorpusError::Empty));
        let dup = "{\"id\":\"q1\",\"text\":\"a\"}\n{\"id\":\"q1\",\"text\":\"b\"}\n";
        assert_eq!(ingest("d", "mem", dup.as_bytes()), Err(CorpusError::Duplicate("q1".into())));
        assert!(matches!(
            ingest("d", "mem", b"{\"id\":\"q1\",\"text\":\"  \"}"),
            Err(CorpusError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            ingest("d", "mem", b"{\"id\":\"q1\",\"txt\":\"a\"}"),
            Err(CorpusError::Parse { .. })
        ));
    }

    #[test]
    fn payload_binds_input_and_meta() {
        let d = ingest(
            "d",
            "mem",
            br#"{"id":"q1","text":"Why?","meta":{"category":"Misconceptions","n":3}}"#,
        )
        .unwrap();
        let p = d.items[0].payload("question");
        assert_eq!(p["question"], "Why?");
        assert_eq!(p["category"], "Misconceptions");
        assert!(!p.contains_key("n"));
    }

    #[test]
    fn sampling_is_seeded_and_respects_exclusions() {
        let d = ingest("d", "mem", lines(30).as_bytes()).unwrap();
        let none = BTreeSet::new();
        let a = sample(&d, "r1", 10, 42, &none, false).unwrap();
        let b = sample(&d, "r1", 10, 42, &none, false).unwrap();
        assert_eq!(a, b);
        let excl: BTreeSet<String> = a.item_ids.iter().cloned().collect();
        let c = sample(&d, "r2", 10, 42, &excl, false).unwrap();
        assert!(c.item_ids.iter().all(|id| !excl.contains(id)));
        let mut uniq = c.item_ids.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 10);
    }

    #[test]
    fn exhaustion() {
        let d = ingest("d", "mem", lines(14).as_bytes()).unwrap();
        let excl: BTreeSet<String> = (0..10).map(|i| format!("q{i}")).collect();
        assert_eq!(
            sample(&d, "r", 10, 1, &excl, false),
            Err(CorpusError::Exhausted { requested: 10, available: 4 })
        );
        let partial = sample(&d, "r", 10, 1, &excl, true).unwrap();
        assert!(partial.partial);
        assert_eq!(partial.item_ids.len(), 4);
        assert!(sample(&d, "r", 0, 1, &excl, true).is_err());
    }

    #[test]
    fn holdout_partition() {
        let d = ingest("d", "mem", lines(25).as_bytes()).unwrap();
        let s = holdout_split(&d, 0.2, 7).unwrap();
        assert_eq!(s, holdout_split(&d, 0.2, 7).unwrap());
        assert_eq!(s.validation.len(), 5);
        let mut all: Vec<String> = s.development.iter().chain(&s.validation).cloned().collect();
        all.sort();
        let mut expected: Vec<String> = d.ids().map(str::to_string).collect();
        expected.sort();
        assert_eq!(all, expected);
        assert!(holdout_split(&d, 1.0, 7).is_err());
        assert!(holdout_split(&d, 0.0, 7).is_err());
    }
}
