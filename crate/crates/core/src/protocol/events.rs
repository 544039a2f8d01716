use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::engine::{ProductionExport, RevisionRequest};
use super::round::{GateComputation, Labels, Round};
use super::{EngineError, GateConfig, ProjectConfig};
use crate::codebook::{Changes, Codebook, DeliberationRecord, PromptTemplate};
use crate::corpus::{Dataset, HoldoutSplit};

/// A state change. Every mutating engine call appends exactly one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    /// Records Setup and opens CriteriaCalibration.
    ProjectStarted {
        config: ProjectConfig,
        dataset: Dataset,
        codebook: Codebook,
        prompt: PromptTemplate,
        split: HoldoutSplit,
    },
    RoundOpened {
        round: Box<Round>,
    },
    AssessmentSubmitted {
        round_id: String,
        rater: String,
        labels: Labels,
    },
    /// A successful read of `target`'s labels by `reader`.
    LabelsRead {
        round_id: String,
        reader: String,
        target: String,
    },
    RoundGated {
        round_id: String,
        gate: Box<GateComputation>,
    },
    DeliberationRecorded {
        record: DeliberationRecord,
    },
    FailResolved {
        round_id: String,
        deliberation_id: String,
        changes: Changes,
    },
    PhaseFinalized {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        revision: Option<RevisionRequest>,
    },
    ProductionRun {
        export: Box<ProductionExport>,
    },
    GateUpdated {
        gate: GateConfig,
    },
}

impl Action {
    /// The entity the action concerns: a round, deliberation, or the project.
    pub fn entity(&self) -> String {
        match self {
            Action::RoundOpened { round } => round.id.clone(),
            Action::AssessmentSubmitted { round_id, .. }
            | Action::LabelsRead { round_id, .. }
            | Action::RoundGated { round_id, .. }
            | Action::FailResolved { round_id, .. } => round_id.clone(),
            Action::DeliberationRecorded { record } => record.id.clone(),
            Action::ProductionRun { export } => export.id.clone(),
            Action::ProjectStarted { .. }
            | Action::PhaseFinalized { .. }
            | Action::GateUpdated { .. } => "project".to_string(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Action::ProjectStarted { .. } => "project_started",
            Action::RoundOpened { .. } => "round_opened",
            Action::AssessmentSubmitted { .. } => "assessment_submitted",
            Action::LabelsRead { .. } => "labels_read",
            Action::RoundGated { .. } => "round_gated",
            Action::DeliberationRecorded { .. } => "deliberation_recorded",
            Action::FailResolved { .. } => "fail_resolved",
            Action::PhaseFinalized { .. } => "phase_finalized",
            Action::ProductionRun { .. } => "production_run",
            Action::GateUpdated { .. } => "gate_updated",
        }
    }
}

/// One entry of the hash-chained log. `seq` doubles as the logical clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub actor: String,
    pub entity: String,
    pub action: Action,
    pub payload_hash: String,
    pub prev_hash: String,
    pub hash: String,
}

const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

fn payload_hash(action: &Action) -> String {
    let json = serde_json::to_string(action).expect("actions serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn chain_hash(prev: &str, seq: u64, actor: &str, entity: &str, payload: &str) -> String {
    let mut h = Sha256::new();
    for part in [prev, &seq.to_string(), actor, entity, payload] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Append-only event log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.events.len() as u64 + 1
    }

    pub fn head(&self) -> &str {
        self.events.last().map_or(GENESIS, |e| e.hash.as_str())
    }

    pub fn append(&mut self, actor: &str, action: Action) -> &Event {
        let seq = self.next_seq();
        let entity = action.entity();
        let payload = payload_hash(&action);
        let hash = chain_hash(self.head(), seq, actor, &entity, &payload);
        self.events.push(Event {
            seq,
            actor: actor.to_string(),
            entity,
            action,
            payload_hash: payload,
            prev_hash: self.head().to_string(),
            hash,
        });
        self.events.last().expect("just pushed")
    }

    /// Checks sequence numbers, payload hashes and the hash chain.
    pub fn verify_chain(events: &[Event]) -> Result<(), EngineError> {
        let mut prev = GENESIS.to_string();
        for (i, e) in events.iter().enumerate() {
            let bad = |what: &str| EngineError::Log(format!("event {}: {what}", e.seq));
            if e.seq != i as u64 + 1 {
                return Err(bad("sequence gap"));
            }
            if e.prev_hash != prev {
                return Err(bad("broken chain"));
            }
            if e.entity != e.action.entity() || e.payload_hash != payload_hash(&e.action) {
                return Err(bad("payload hash mismatch"));
            }
            if e.hash != chain_hash(&prev, e.seq, &e.actor, &e.entity, &e.payload_hash) {
                return Err(bad("hash mismatch"));
            }
            prev = e.hash.clone();
        }
        Ok(())
    }

    pub fn from_events(events: Vec<Event>) -> Result<Self, EngineError> {
        Self::verify_chain(&events)?;
        Ok(Self { events })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EngineError> {
        let events = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| EngineError::Log(format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<Event>, _>>()?;
        Self::from_events(events)
    }
}
