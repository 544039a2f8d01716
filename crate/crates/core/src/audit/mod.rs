//! Audit bundles: a self-contained, deterministic record of a protocol run,
//! a verifier that re-derives every stored agreement value, and a Markdown
//! report.

mod render;
mod verify;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Codebook, DeliberationRecord, PromptTemplate, Revision};
use crate::corpus::{HoldoutSplit, SampleAllocation};
use crate::gateway::{sha256_hex, ItemFailure, ModelConfig, ParseError, TranscriptKey};
use crate::protocol::{
    Action, Assessment, Engine, GateComputation, GateConfig, Outcome, PhaseKind, PhaseVisit,
    ProductionExport, ProjectConfig, Round,
};

pub use render::render_report;
pub use verify::{verify, verify_transcript, Violation};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("malformed bundle: {0}")]
    Malformed(String),
    #[error("bundle has {} violation(s); refusing to render", .0.len())]
    RefusesToRender(Vec<Violation>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleStatus {
    InProgress,
    Complete,
    NonConvergent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub id: String,
    pub source: String,
    pub content_hash: String,
    pub n_items: usize,
    pub split: HoldoutSplit,
}

/// A gate configuration and the event from which it applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEpoch {
    pub from_seq: u64,
    pub gate: GateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRead {
    pub seq: u64,
    pub round_id: String,
    pub reader: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleUnit {
    pub id: String,
    pub item_id: String,
    pub text_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_label: Option<String>,
}

/// A generation referenced by hash; full responses live in the side-car transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationDigest {
    pub digest: String,
    pub item_id: String,
    pub model: String,
    pub prompt_hash: String,
    pub response_hash: String,
    pub n_units: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<ParseError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleRound {
    pub id: String,
    pub phase: PhaseKind,
    pub ordinal: u32,
    pub codebook_version: u32,
    pub prompt_version: u32,
    pub allocation: SampleAllocation,
    pub generations: Vec<GenerationDigest>,
    #[serde(default)]
    pub failures: Vec<ItemFailure>,
    pub units: Vec<BundleUnit>,
    pub assignees: Vec<String>,
    pub assessments: BTreeMap<String, Assessment>,
    #[serde(default)]
    pub model_labels: BTreeMap<String, BTreeMap<String, String>>,
    pub opened_at: u64,
    pub outcome: Outcome,
    pub gate: Option<GateComputation>,
    pub gated_at: Option<u64>,
    pub deliberation_ids: Vec<String>,
    pub resolution: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalArtifacts {
    pub codebook_version: u32,
    pub prompt_version: u32,
    pub codebook_text: String,
    pub prompt_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub digest: String,
    pub item_id: String,
    pub model: String,
    pub prompt_hash: String,
    pub response_hash: String,
}

/// The exported record of a project. All timestamps are logical event
/// sequence numbers, so equal event logs give byte-identical bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditBundle {
    pub schema_version: u32,
    pub status: BundleStatus,
    pub project: ProjectConfig,
    pub gate_history: Vec<GateEpoch>,
    pub dataset: DatasetSummary,
    pub codebook_version: u32,
    pub prompt_version: u32,
    pub codebooks: Vec<Codebook>,
    pub prompts: Vec<PromptTemplate>,
    pub revisions: Vec<Revision>,
    pub phases: Vec<PhaseVisit>,
    pub rounds: Vec<BundleRound>,
    pub deliberations: Vec<DeliberationRecord>,
    pub label_reads: Vec<LabelRead>,
    pub productions: Vec<ProductionExport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_artifacts: Option<FinalArtifacts>,
    pub transcript_manifest: Vec<ManifestEntry>,
    pub event_count: usize,
    pub event_head: String,
}

fn digest_of(config: &ModelConfig, prompt_hash: &str, item_id: &str) -> String {
    TranscriptKey::new(config, prompt_hash, item_id).digest()
}

fn bundle_round(round: &Round) -> BundleRound {
    let generations = round
        .records
        .iter()
        .chain(&round.comparison_records)
        .map(|r| GenerationDigest {
            digest: digest_of(&r.config, &r.prompt_hash, &r.item_id),
            item_id: r.item_id.clone(),
            model: r.config.rater_id(),
            prompt_hash: r.prompt_hash.clone(),
            response_hash: r.response_hash.clone(),
            n_units: r.units.len(),
            parse_error: r.parse_error.clone(),
        })
        .collect();
    BundleRound {
        id: round.id.clone(),
        phase: round.phase,
        ordinal: round.ordinal,
        codebook_version: round.codebook_version,
        prompt_version: round.prompt_version,
        allocation: round.allocation.clone(),
        generations,
        failures: round.failures.clone(),
        units: round
            .units
            .iter()
            .map(|u| BundleUnit {
                id: u.id.clone(),
                item_id: u.item_id.clone(),
                text_hash: sha256_hex(&u.text),
                model_label: u.model_label.clone(),
            })
            .collect(),
        assignees: round.assignees.clone(),
        assessments: round.assessments.clone(),
        model_labels: round.model_labels.clone(),
        opened_at: round.opened_at,
        outcome: round.outcome,
        gate: round.gate.clone(),
        gated_at: round.gated_at,
        deliberation_ids: round.deliberation_ids.clone(),
        resolution: round.resolution.clone(),
    }
}

/// Builds the bundle for the engine's current state. Pure in the event log.
pub fn export(engine: &Engine) -> AuditBundle {
    let s = engine.state();
    let status = match s.phase {
        PhaseKind::Complete => BundleStatus::Complete,
        PhaseKind::NonConvergent => BundleStatus::NonConvergent,
        _ => BundleStatus::InProgress,
    };
    let mut gate_history = Vec::new();
    let mut label_reads = Vec::new();
    for e in engine.events() {
        match &e.action {
            Action::ProjectStarted { config, .. } => {
                gate_history.push(GateEpoch { from_seq: e.seq, gate: config.gate.clone() })
            }
            Action::GateUpdated { gate } => {
                gate_history.push(GateEpoch { from_seq: e.seq, gate: gate.clone() })
            }
            Action::LabelsRead { round_id, reader, target } => label_reads.push(LabelRead {
                seq: e.seq,
                round_id: round_id.clone(),
                reader: reader.clone(),
                target: target.clone(),
            }),
            _ => {}
        }
    }
    let rounds: Vec<BundleRound> = s.rounds.iter().map(bundle_round).collect();
    let mut manifest: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    for g in rounds.iter().flat_map(|r| &r.generations) {
        manifest.entry(g.digest.clone()).or_insert_with(|| ManifestEntry {
            digest: g.digest.clone(),
            item_id: g.item_id.clone(),
            model: g.model.clone(),
            prompt_hash: g.prompt_hash.clone(),
            response_hash: g.response_hash.clone(),
        });
    }
    for p in &s.productions {
        for o in &p.outputs {
            let digest = digest_of(&p.model, &o.prompt_hash, &o.item_id);
            manifest.entry(digest.clone()).or_insert_with(|| ManifestEntry {
                digest,
                item_id: o.item_id.clone(),
                model: p.model.rater_id(),
                prompt_hash: o.prompt_hash.clone(),
                response_hash: o.response_hash.clone(),
            });
        }
    }
    let final_artifacts = (status == BundleStatus::Complete).then(|| FinalArtifacts {
        codebook_version: s.codebook_version,
        prompt_version: s.prompt_version,
        codebook_text: s.codebook().render(),
        prompt_text: s.prompt().text.clone(),
    });
    AuditBundle {
        schema_version: SCHEMA_VERSION,
        status,
        project: s.config.clone(),
        gate_history,
        dataset: DatasetSummary {
            id: s.dataset.id.clone(),
            source: s.dataset.source.clone(),
            content_hash: s.dataset.content_hash.clone(),
            n_items: s.dataset.len(),
            split: s.split.clone(),
        },
        codebook_version: s.codebook_version,
        prompt_version: s.prompt_version,
        codebooks: s.store.codebooks().cloned().collect(),
        prompts: s.store.prompts().cloned().collect(),
        revisions: s.store.revisions().to_vec(),
        phases: s.phase_history.clone(),
        rounds,
        deliberations: s.deliberations.clone(),
        label_reads,
        productions: s.productions.clone(),
        final_artifacts,
        transcript_manifest: manifest.into_values().collect(),
        event_count: engine.events().len(),
        event_head: engine.log().head().to_string(),
    }
}

impl AuditBundle {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bundles serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, AuditError> {
        let bundle: Self =
            serde_json::from_str(text).map_err(|e| AuditError::Malformed(e.to_string()))?;
        if bundle.schema_version != SCHEMA_VERSION {
            return Err(AuditError::Malformed(format!(
                "unsupported schema version {}",
                bundle.schema_version
            )));
        }
        Ok(bundle)
    }

    pub fn round(&self, id: &str) -> Option<&BundleRound> {
        self.rounds.iter().find(|r| r.id == id)
    }

    /// The gate configuration in force at event `seq`.
    pub fn gate_at(&self, seq: u64) -> &GateConfig {
        self.gate_history
            .iter()
            .rev()
            .find(|g| g.from_seq <= seq)
            .map_or(&self.project.gate, |g| &g.gate)
    }
}
