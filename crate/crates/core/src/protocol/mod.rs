//! The four-phase protocol as an event-sourced state machine.
//!
//! A project moves Setup → CriteriaCalibration → PromptDevelopment →
//! (Validation) → Complete. Each calibration or development round samples
//! fresh items, generates responses, collects blind labels from every
//! assigned assessor, and is gated on reliability (and, for generation
//! tasks in later phases, consensus pass-rate). A failed round blocks the
//! phase until a deliberation and a substantive revision of the phase's
//! artifact are recorded.

mod engine;
mod events;
mod round;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{ArtifactKind, CodebookError, TaskKind};
use crate::corpus::CorpusError;
use crate::gateway::{GatewayError, ModelConfig};
use crate::metrics::{MetricPolicy, MetricsError};

pub use engine::{
    Engine, PhaseVisit, ProductionExport, ProductionOutput, ProductionScope, ProjectSetup,
    ProjectState, ProjectStatus, RevisionRequest, RoundStatus, SubmissionAck,
};
pub use events::{Action, Event, EventLog};
pub use round::{
    compute_gate, human_matrices, mixed_matrices, thresholds_for, Assessment, Disagreement, GateComputation,
    Labels, Outcome, Round, Unit,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Setup,
    CriteriaCalibration,
    PromptDevelopment,
    Validation,
    Complete,
    /// Terminal: the round budget ran out without a passing round.
    NonConvergent,
}

impl PhaseKind {
    pub fn slug(self) -> &'static str {
        match self {
            PhaseKind::Setup => "setup",
            PhaseKind::CriteriaCalibration => "calibration",
            PhaseKind::PromptDevelopment => "prompt",
            PhaseKind::Validation => "validation",
            PhaseKind::Complete => "complete",
            PhaseKind::NonConvergent => "non-convergent",
        }
    }

    /// The artifact a failed round of this phase must revise.
    pub fn artifact(self) -> Option<ArtifactKind> {
        match self {
            PhaseKind::CriteriaCalibration => Some(ArtifactKind::Codebook),
            PhaseKind::PromptDevelopment => Some(ArtifactKind::Prompt),
            _ => None,
        }
    }

    pub fn has_rounds(self) -> bool {
        matches!(
            self,
            PhaseKind::CriteriaCalibration | PhaseKind::PromptDevelopment | PhaseKind::Validation
        )
    }
}

impl std::fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PhaseKind::Setup => "Setup",
            PhaseKind::CriteriaCalibration => "CriteriaCalibration",
            PhaseKind::PromptDevelopment => "PromptDevelopment",
            PhaseKind::Validation => "Validation",
            PhaseKind::Complete => "Complete",
            PhaseKind::NonConvergent => "NonConvergent",
        };
        f.write_str(s)
    }
}

/// Thresholds and sizes that govern rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    #[serde(default)]
    pub policy: MetricPolicy,
    pub icr_threshold: f64,
    /// Consensus pass-rate threshold for generation tasks in
    /// PromptDevelopment and Validation.
    pub pass_rate_threshold: f64,
    pub batch_size: usize,
    pub min_assessors: usize,
    pub validation_sample_size: usize,
    pub validation_enabled: bool,
    /// Validation samples that must each pass before the phase can finalize.
    pub validation_rounds: usize,
    pub max_rounds_per_phase: u32,
    #[serde(default)]
    pub allow_partial_batches: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            policy: MetricPolicy::default(),
            icr_threshold: 0.70,
            pass_rate_threshold: 0.75,
            batch_size: 10,
            min_assessors: 2,
            validation_sample_size: 10,
            validation_enabled: true,
            validation_rounds: 1,
            max_rounds_per_phase: 10,
            allow_partial_batches: false,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.icr_threshold) || !unit(self.pass_rate_threshold) {
            return Err(EngineError::InvalidConfig("thresholds must lie in (0, 1]".into()));
        }
        if self.min_assessors < 2 {
            return Err(EngineError::InvalidConfig("at least 2 assessors are required".into()));
        }
        if self.batch_size == 0 || self.validation_sample_size == 0 {
            return Err(EngineError::InvalidConfig("batch sizes must be at least 1".into()));
        }
        if self.max_rounds_per_phase == 0 || self.validation_rounds == 0 {
            return Err(EngineError::InvalidConfig("round counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub id: String,
    pub task_kind: TaskKind,
    /// The first entry is the primary model; classification validation runs
    /// every entry as an extra rater column.
    pub models: Vec<ModelConfig>,
    pub gate: GateConfig,
    /// Assessors for calibration and development rounds.
    pub assessors: Vec<String>,
    /// Assessors for validation rounds; must not have labeled earlier rounds.
    #[serde(default)]
    pub validation_assessors: Vec<String>,
    /// Senior researcher who may approve readability-only edits at finalization.
    #[serde(default)]
    pub lead: Option<String>,
    /// Prompt slot that receives each item's text.
    pub input_slot: String,
    pub holdout_fraction: f64,
    pub split_seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    4
}

impl ProjectConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        self.gate.validate()?;
        if self.id.trim().is_empty() {
            return Err(EngineError::InvalidConfig("project id is empty".into()));
        }
        if self.models.is_empty() {
            return Err(EngineError::InvalidConfig("at least one model config is required".into()));
        }
        for m in &self.models {
            m.validate()?;
        }
        let mut people = self.assessors.clone();
        people.sort();
        people.dedup();
        if people.len() != self.assessors.len() {
            return Err(EngineError::InvalidConfig("duplicate assessor ids".into()));
        }
        if self.assessors.len() < self.gate.min_assessors {
            return Err(EngineError::InvalidConfig(format!(
                "{} assessors configured, {} required",
                self.assessors.len(),
                self.gate.min_assessors
            )));
        }
        Ok(())
    }

    pub fn primary_model(&self) -> &ModelConfig {
        &self.models[0]
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("project setup incomplete: {0}")]
    Incomplete(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("operation not allowed in phase {actual}: {detail}")]
    WrongPhase { actual: PhaseKind, detail: String },
    #[error("round {0} is still open")]
    AlreadyOpen(String),
    #[error("round {0} failed its gate and awaits a deliberation and revision")]
    BlockedOnDeliberation(String),
    #[error("the phase already has a passing round; finalize it")]
    PhasePassed,
    #[error("the round budget is exhausted without convergence")]
    NonConvergent,
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("co-rater labels stay hidden until every assigned assessor has submitted")]
    Blindness,
    #[error("{0} already submitted for this round")]
    AlreadySubmitted(String),
    #[error("stale round version: expected {expected}, current {actual}")]
    Conflict { expected: u64, actual: u64 },
    #[error("invalid labels for units {units:?}: {reason}")]
    InvalidLabels { units: Vec<String>, reason: String },
    #[error("not ready: {0}")]
    NotReady(String),
    #[error("round {0} has already been gated")]
    AlreadyGated(String),
    #[error("round {0} did not fail its gate")]
    NotFailed(String),
    #[error("round {0} is already resolved")]
    AlreadyResolved(String),
    #[error("revision targets the {got} but this round requires a {expected} revision")]
    WrongArtifact { expected: ArtifactKind, got: ArtifactKind },
    #[error("insufficient revision: {0}")]
    InsufficientRevision(String),
    #[error("the phase has no passing round to finalize")]
    NotPassed,
    #[error("only readability-only revisions may accompany finalization")]
    SubstantiveAtFinalize,
    #[error("no fresh assessors: {0}")]
    NoFreshAssessors(String),
    #[error("project is complete and immutable")]
    Immutable,
    #[error("unknown round {0}")]
    UnknownRound(String),
    #[error("unknown deliberation {0}")]
    UnknownDeliberation(String),
    #[error("invalid deliberation: {0}")]
    InvalidDeliberation(String),
    #[error("no assessable units were produced")]
    NoAssessableUnits,
    #[error("event log: {0}")]
    Log(String),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl EngineError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::Incomplete(_) => "incomplete",
            EngineError::InvalidConfig(_) => "invalid_config",
            EngineError::WrongPhase { .. } => "wrong_phase",
            EngineError::AlreadyOpen(_) => "already_open",
            EngineError::BlockedOnDeliberation(_) => "blocked_on_deliberation",
            EngineError::PhasePassed => "phase_passed",
            EngineError::NonConvergent => "non_convergent",
            EngineError::Forbidden(_) => "forbidden",
            EngineError::Blindness => "blindness",
            EngineError::AlreadySubmitted(_) => "already_submitted",
            EngineError::Conflict { .. } => "conflict",
            EngineError::InvalidLabels { .. } => "invalid_labels",
            EngineError::NotReady(_) => "not_ready",
            EngineError::AlreadyGated(_) => "already_gated",
            EngineError::NotFailed(_) => "not_failed",
            EngineError::AlreadyResolved(_) => "already_resolved",
            EngineError::WrongArtifact { .. } => "wrong_artifact",
            EngineError::InsufficientRevision(_) => "insufficient_revision",
            EngineError::NotPassed => "not_passed",
            EngineError::SubstantiveAtFinalize => "substantive_at_finalize",
            EngineError::NoFreshAssessors(_) => "no_fresh_assessors",
            EngineError::Immutable => "immutable",
            EngineError::UnknownRound(_) => "unknown_round",
            EngineError::UnknownDeliberation(_) => "unknown_deliberation",
            EngineError::InvalidDeliberation(_) => "invalid_deliberation",
            EngineError::NoAssessableUnits => "no_assessable_units",
            EngineError::Log(_) => "event_log",
            EngineError::Codebook(CodebookError::Immutable(_)) => "immutable",
            EngineError::Codebook(CodebookError::MissingDeliberation) => "missing_deliberation",
            EngineError::Codebook(_) => "codebook",
            EngineError::Corpus(CorpusError::Exhausted { .. }) => "exhausted",
            EngineError::Corpus(_) => "corpus",
            EngineError::Gateway(GatewayError::CacheMiss(_)) => "cache_miss",
            EngineError::Gateway(GatewayError::ProviderUnavailable { .. }) => "provider_unavailable",
            EngineError::Gateway(_) => "gateway",
            EngineError::Metrics(_) => "metrics",
        }
    }
}
