use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GatewayError, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptKey {
    pub config: ModelConfig,
    pub prompt_hash: String,
    pub item_id: String,
}

impl TranscriptKey {
    pub fn new(config: &ModelConfig, prompt_hash: &str, item_id: &str) -> Self {
        Self {
            config: config.clone(),
            prompt_hash: prompt_hash.to_string(),
            item_id: item_id.to_string(),
        }
    }

    /// `sha256(canonical config ‖ "\n" ‖ prompt hash ‖ "\n" ‖ item id)`, hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.canonical().as_bytes());
        h.update(b"\n");
        h.update(self.prompt_hash.as_bytes());
        h.update(b"\n");
        h.update(self.item_id.as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    #[serde(flatten)]
    pub key: TranscriptKey,
    pub response: String,
    pub attempts: u32,
    pub requested_at: u64,
    pub completed_at: u64,
}

/// Recorded responses addressed by key digest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    entries: BTreeMap<String, TranscriptEntry>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, digest: &str) -> Option<&TranscriptEntry> {
        self.entries.get(digest)
    }

    /// Inserts an entry; the first response recorded for a key wins.
    pub fn insert(&mut self, entry: TranscriptEntry) {
        self.entries.entry(entry.key.digest()).or_insert(entry);
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &TranscriptEntry)> {
        self.entries.iter()
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, GatewayError> {
        let mut t = Transcript::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| GatewayError::Transcript(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(&line)
                .map_err(|e| GatewayError::Transcript(format!("line {}: {e}", n + 1)))?;
            let digest = entry.key.digest();
            if t.entries.contains_key(&digest) {
                return Err(GatewayError::Transcript(format!(
                    "line {}: duplicate key {digest}",
                    n + 1
                )));
            }
            t.entries.insert(digest, entry);
        }
        Ok(t)
    }

    /// One entry per line, sorted by key digest.
    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<(), GatewayError> {
        for entry in self.entries.values() {
            let line = serde_json::to_string(entry).map_err(|e| GatewayError::Transcript(e.to_string()))?;
            writeln!(writer, "{line}").map_err(|e| GatewayError::Transcript(e.to_string()))?;
        }
        Ok(())
    }
}
