use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::events::{Action, Event, EventLog};
use super::round::{
    compute_gate, disagreements_for, thresholds_for, Assessment, Disagreement, GateComputation,
    Labels, Outcome, Round, Unit,
};
use super::{EngineError, GateConfig, PhaseKind, ProjectConfig};
use crate::codebook::{
    ArtifactKind, ArtifactRef, ArtifactStore, Changes, Codebook, Criterion, DeliberationRecord,
    PromptTemplate, RevisionKind, Status, TaskKind,
};
use crate::corpus::{holdout_split, sample, Dataset, HoldoutSplit, SampleAllocation};
use crate::gateway::{
    BatchOutcome, Gateway, GenerationRecord, ItemFailure, ModelConfig, ParseError, UnitSpec,
};

/// Everything `start_project` needs; missing pieces yield `Incomplete`.
#[derive(Debug, Clone)]
pub struct ProjectSetup {
    pub config: ProjectConfig,
    pub dataset: Option<Dataset>,
    pub codebook: Option<Codebook>,
    pub prompt: Option<PromptTemplate>,
}

/// Requested artifact edit together with its claimed kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionRequest {
    pub changes: Changes,
    pub kind: RevisionKind,
}

impl RevisionRequest {
    pub fn substantive(changes: Changes) -> Self {
        Self { changes, kind: RevisionKind::Substantive }
    }

    pub fn readability(changes: Changes) -> Self {
        Self { changes, kind: RevisionKind::ReadabilityOnly }
    }
}

/// One stay in a phase. Validation failures can send a project back to an
/// earlier phase, so a phase may be visited more than once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseVisit {
    pub phase: PhaseKind,
    pub entered_at: u64,
    pub exited_at: Option<u64>,
    pub rounds: Vec<String>,
    /// Artifact version finalized when the visit ended.
    pub finalized: Option<ArtifactRef>,
    /// Readability-only revision attached at finalization.
    pub readability_revision: Option<String>,
}

impl PhaseVisit {
    fn enter(phase: PhaseKind, at: u64) -> Self {
        Self {
            phase,
            entered_at: at,
            exited_at: None,
            rounds: Vec::new(),
            finalized: None,
            readability_revision: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum ProductionScope {
    /// The held-out validation portion of the dataset.
    Holdout,
    All,
    Items { ids: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductionOutput {
    pub item_id: String,
    pub prompt_hash: String,
    pub response_hash: String,
    /// Parsed units (generation tasks).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub units: Vec<String>,
    /// Predicted label (classification tasks).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<ParseError>,
}

/// Outputs of a production run stamped with the artifact versions used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductionExport {
    pub id: String,
    pub scope: ProductionScope,
    pub prompt_version: u32,
    pub codebook_version: u32,
    pub model: ModelConfig,
    pub outputs: Vec<ProductionOutput>,
    #[serde(default)]
    pub failures: Vec<ItemFailure>,
    pub produced_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStatus {
    pub id: String,
    pub phase: PhaseKind,
    pub ordinal: u32,
    pub outcome: Outcome,
    pub labeling_closed: bool,
    pub awaiting: Vec<String>,
    pub version: u64,
    pub n_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectStatus {
    pub project_id: String,
    pub task_kind: TaskKind,
    pub phase: PhaseKind,
    pub codebook_version: u32,
    pub prompt_version: u32,
    /// Latest round of the current phase visit.
    pub round: Option<RoundStatus>,
    pub rounds_in_phase: usize,
    pub total_rounds: usize,
    pub event_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionAck {
    pub round_id: String,
    pub rater: String,
    pub version: u64,
    pub labeling_closed: bool,
    pub awaiting: Vec<String>,
}

/// Project state; a pure fold over the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectState {
    pub config: ProjectConfig,
    pub dataset: Dataset,
    pub split: HoldoutSplit,
    pub store: ArtifactStore,
    pub phase: PhaseKind,
    pub codebook_version: u32,
    pub prompt_version: u32,
    pub rounds: Vec<Round>,
    pub phase_history: Vec<PhaseVisit>,
    pub deliberations: Vec<DeliberationRecord>,
    pub productions: Vec<ProductionExport>,
}

impl ProjectState {
    fn genesis(action: &Action) -> Result<Self, EngineError> {
        let Action::ProjectStarted { config, dataset, codebook, prompt, split } = action else {
            return Err(EngineError::Log("the first event must start the project".into()));
        };
        let store = ArtifactStore::new(codebook.clone(), prompt.clone())?;
        let mut setup = PhaseVisit::enter(PhaseKind::Setup, 1);
        setup.exited_at = Some(1);
        Ok(Self {
            config: config.clone(),
            dataset: dataset.clone(),
            split: split.clone(),
            store,
            phase: PhaseKind::CriteriaCalibration,
            codebook_version: 1,
            prompt_version: 1,
            rounds: Vec::new(),
            phase_history: vec![setup, PhaseVisit::enter(PhaseKind::CriteriaCalibration, 1)],
            deliberations: Vec::new(),
            productions: Vec::new(),
        })
    }

    pub fn round(&self, id: &str) -> Result<&Round, EngineError> {
        self.rounds
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| EngineError::UnknownRound(id.to_string()))
    }

    fn round_mut(&mut self, id: &str) -> Result<&mut Round, EngineError> {
        self.rounds
            .iter_mut()
            .find(|r| r.id == id)
            .ok_or_else(|| EngineError::UnknownRound(id.to_string()))
    }

    pub fn deliberation(&self, id: &str) -> Option<&DeliberationRecord> {
        self.deliberations.iter().find(|d| d.id == id)
    }

    pub fn codebook(&self) -> &Codebook {
        self.store.codebook(self.codebook_version).expect("current codebook exists")
    }

    pub fn prompt(&self) -> &PromptTemplate {
        self.store.prompt(self.prompt_version).expect("current prompt exists")
    }

    pub fn criteria_for(&self, round: &Round) -> &[Criterion] {
        &self
            .store
            .codebook(round.codebook_version)
            .expect("round codebook exists")
            .criteria
    }

    pub fn visit(&self) -> &PhaseVisit {
        self.phase_history.last().expect("history starts with Setup")
    }

    fn visit_mut(&mut self) -> &mut PhaseVisit {
        self.phase_history.last_mut().expect("history starts with Setup")
    }

    /// Rounds of the current phase visit, oldest first.
    pub fn visit_rounds(&self) -> impl Iterator<Item = &Round> {
        self.visit()
            .rounds
            .iter()
            .map(|id| self.round(id).expect("visit rounds exist"))
    }

    pub fn open_round(&self) -> Option<&Round> {
        self.rounds.last().filter(|r| r.outcome == Outcome::Open)
    }

    /// Passing rounds at the end of the current visit.
    fn trailing_passes(&self) -> usize {
        let rounds: Vec<&Round> = self.visit_rounds().collect();
        rounds
            .iter()
            .rev()
            .take_while(|r| r.outcome == Outcome::GatedPass)
            .count()
    }

    fn passes_required(&self) -> usize {
        if self.phase == PhaseKind::Validation {
            self.config.gate.validation_rounds
        } else {
            1
        }
    }

    pub fn phase_passed(&self) -> bool {
        self.phase.has_rounds() && self.trailing_passes() >= self.passes_required()
    }

    fn enter(&mut self, phase: PhaseKind, at: u64) {
        self.visit_mut().exited_at = Some(at);
        self.phase = phase;
        self.phase_history.push(PhaseVisit::enter(phase, at));
    }

    fn current_version(&self, kind: ArtifactKind) -> u32 {
        match kind {
            ArtifactKind::Codebook => self.codebook_version,
            ArtifactKind::Prompt => self.prompt_version,
        }
    }

    fn set_version(&mut self, kind: ArtifactKind, version: u32) {
        match kind {
            ArtifactKind::Codebook => self.codebook_version = version,
            ArtifactKind::Prompt => self.prompt_version = version,
        }
    }

    /// Applies one action. Deterministic; never performs I/O.
    fn apply(&mut self, action: &Action, seq: u64) -> Result<(), EngineError> {
        match action {
            Action::ProjectStarted { .. } => {
                return Err(EngineError::Log("project already started".into()))
            }
            Action::RoundOpened { round } => {
                self.visit_mut().rounds.push(round.id.clone());
                self.rounds.push((**round).clone());
            }
            Action::AssessmentSubmitted { round_id, rater, labels } => {
                let round = self.round_mut(round_id)?;
                round.assessments.insert(
                    rater.clone(),
                    Assessment { rater: rater.clone(), labels: labels.clone(), submitted_at: seq },
                );
                round.version += 1;
            }
            Action::LabelsRead { round_id, .. } => {
                self.round(round_id)?;
            }
            Action::RoundGated { round_id, gate } => {
                let max = self.config.gate.max_rounds_per_phase as usize;
                let round = self.round_mut(round_id)?;
                round.outcome = if gate.verdict.passed { Outcome::GatedPass } else { Outcome::GatedFail };
                round.gate = Some((**gate).clone());
                round.gated_at = Some(seq);
                if !gate.verdict.passed && self.visit().rounds.len() >= max {
                    self.enter(PhaseKind::NonConvergent, seq);
                }
            }
            Action::DeliberationRecorded { record } => {
                self.round_mut(&record.round_id)?.deliberation_ids.push(record.id.clone());
                self.deliberations.push(record.clone());
            }
            Action::FailResolved { round_id, deliberation_id, changes } => {
                let kind = changes.kind();
                let base = ArtifactRef { kind, version: self.current_version(kind) };
                let rev = self.store.revise(
                    base,
                    changes,
                    RevisionKind::Substantive,
                    Some(deliberation_id),
                )?;
                if rev.diff.is_empty() {
                    return Err(EngineError::InsufficientRevision(
                        "the revision does not change the artifact".into(),
                    ));
                }
                let (rev_id, to) = (rev.id.clone(), rev.to_version);
                self.set_version(kind, to);
                let round = self.round_mut(round_id)?;
                round.resolution = Some(rev_id);
                let routed = round.gate.as_ref().and_then(|g| g.routed_to);
                if let Some(phase) = routed {
                    self.enter(phase, seq);
                }
            }
            Action::PhaseFinalized { revision } => {
                let artifact = self.phase.artifact();
                if let (Some(req), Some(kind)) = (revision, artifact) {
                    let base = ArtifactRef { kind, version: self.current_version(kind) };
                    let rev = self.store.revise(base, &req.changes, RevisionKind::ReadabilityOnly, None)?;
                    let (rev_id, to) = (rev.id.clone(), rev.to_version);
                    self.set_version(kind, to);
                    self.visit_mut().readability_revision = Some(rev_id);
                }
                if let Some(kind) = artifact {
                    let at = ArtifactRef { kind, version: self.current_version(kind) };
                    if self.store.status(at)? == Status::Draft {
                        self.store.finalize(at)?;
                    }
                    self.visit_mut().finalized = Some(at);
                }
                let next = match self.phase {
                    PhaseKind::CriteriaCalibration => PhaseKind::PromptDevelopment,
                    PhaseKind::PromptDevelopment if self.config.gate.validation_enabled => {
                        PhaseKind::Validation
                    }
                    _ => PhaseKind::Complete,
                };
                self.enter(next, seq);
            }
            Action::ProductionRun { export } => self.productions.push((**export).clone()),
            Action::GateUpdated { gate } => self.config.gate = gate.clone(),
        }
        Ok(())
    }
}

fn unit_spec(task: TaskKind, codebook: &Codebook) -> UnitSpec {
    match task {
        TaskKind::Generation => UnitSpec::Generation,
        TaskKind::Classification => UnitSpec::Classification(codebook.criteria[0].scale.clone()),
    }
}

fn build_units(task: TaskKind, dataset: &Dataset, records: &[GenerationRecord]) -> Vec<Unit> {
    let mut units = Vec::new();
    for rec in records {
        match task {
            TaskKind::Generation => {
                for (k, text) in rec.units.iter().enumerate() {
                    units.push(Unit {
                        id: format!("{}#{}", rec.item_id, k + 1),
                        item_id: rec.item_id.clone(),
                        text: text.clone(),
                        model_label: None,
                    });
                }
            }
            TaskKind::Classification => units.push(Unit {
                id: rec.item_id.clone(),
                item_id: rec.item_id.clone(),
                text: dataset.get(&rec.item_id).map(|i| i.text.clone()).unwrap_or_default(),
                model_label: rec.units.first().cloned(),
            }),
        }
    }
    units
}

fn split_outcome(outcome: BatchOutcome) -> (Vec<GenerationRecord>, Vec<ItemFailure>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in outcome.results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    (records, failures)
}

/// The protocol engine: validates commands, appends events, folds state.
#[derive(Debug, Clone)]
pub struct Engine {
    state: ProjectState,
    log: EventLog,
}

impl Engine {
    /// Records Setup and opens CriteriaCalibration with zero rounds.
    pub fn start_project(setup: ProjectSetup, actor: &str) -> Result<Self, EngineError> {
        let ProjectSetup { config, dataset, codebook, prompt } = setup;
        config.validate()?;
        let dataset = dataset.ok_or_else(|| EngineError::Incomplete("no dataset ingested".into()))?;
        let codebook = codebook.ok_or_else(|| EngineError::Incomplete("codebook v1 is missing".into()))?;
        let prompt = prompt.ok_or_else(|| EngineError::Incomplete("prompt v1 is missing".into()))?;
        if prompt.task_kind != config.task_kind {
            return Err(EngineError::InvalidConfig(format!(
                "prompt is for {:?} but the project is {:?}",
                prompt.task_kind, config.task_kind
            )));
        }
        if !prompt.slots.contains(&config.input_slot) {
            return Err(EngineError::InvalidConfig(format!(
                "prompt does not declare the input slot {:?}",
                config.input_slot
            )));
        }
        let split = holdout_split(&dataset, config.holdout_fraction, config.split_seed)?;
        let action = Action::ProjectStarted { config, dataset, codebook, prompt, split };
        let state = ProjectState::genesis(&action)?;
        let mut log = EventLog::new();
        log.append(actor, action);
        Ok(Self { state, log })
    }

    /// Rebuilds an engine by replaying a verified event log.
    pub fn from_events(events: Vec<Event>) -> Result<Self, EngineError> {
        let log = EventLog::from_events(events)?;
        let first = log
            .events()
            .first()
            .ok_or_else(|| EngineError::Log("event log is empty".into()))?;
        let mut state = ProjectState::genesis(&first.action)?;
        for e in &log.events()[1..] {
            state.apply(&e.action, e.seq)?;
        }
        Ok(Self { state, log })
    }

    pub fn state(&self) -> &ProjectState {
        &self.state
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn events(&self) -> &[Event] {
        self.log.events()
    }

    /// sha256 of the serialized state.
    pub fn state_hash(&self) -> String {
        let json = serde_json::to_string(&self.state).expect("state serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn commit(&mut self, actor: &str, action: Action) -> Result<(), EngineError> {
        let mut next = self.state.clone();
        next.apply(&action, self.log.next_seq())?;
        self.state = next;
        self.log.append(actor, action);
        Ok(())
    }

    fn guard_new_round(&self) -> Result<(), EngineError> {
        let s = &self.state;
        if s.phase == PhaseKind::NonConvergent {
            return Err(EngineError::NonConvergent);
        }
        if let Some(open) = s.open_round() {
            return Err(EngineError::AlreadyOpen(open.id.clone()));
        }
        if let Some(last) = s.visit_rounds().last() {
            if last.outcome == Outcome::GatedFail && last.resolution.is_none() {
                return Err(EngineError::BlockedOnDeliberation(last.id.clone()));
            }
        }
        if s.phase_passed() {
            return Err(EngineError::PhasePassed);
        }
        if s.visit().rounds.len() >= s.config.gate.max_rounds_per_phase as usize {
            return Err(EngineError::NonConvergent);
        }
        Ok(())
    }

    fn next_round_id(&self, phase: PhaseKind) -> (String, u32) {
        let ordinal = self.state.rounds.iter().filter(|r| r.phase == phase).count() as u32 + 1;
        (format!("{}-{}", phase.slug(), ordinal), ordinal)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble_round(
        &self,
        id: String,
        ordinal: u32,
        allocation: SampleAllocation,
        records: Vec<GenerationRecord>,
        comparison_records: Vec<GenerationRecord>,
        failures: Vec<ItemFailure>,
        model_labels: BTreeMap<String, BTreeMap<String, String>>,
        assignees: Vec<String>,
    ) -> Result<Round, EngineError> {
        let s = &self.state;
        let units = build_units(s.config.task_kind, &s.dataset, &records);
        if units.is_empty() {
            return Err(EngineError::NoAssessableUnits);
        }
        Ok(Round {
            id,
            phase: s.phase,
            ordinal,
            codebook_version: s.codebook_version,
            prompt_version: s.prompt_version,
            allocation,
            records,
            comparison_records,
            failures,
            units,
            assignees,
            model_labels,
            assessments: BTreeMap::new(),
            version: 0,
            opened_at: self.log.next_seq(),
            outcome: Outcome::Open,
            gate: None,
            gated_at: None,
            deliberation_ids: Vec::new(),
            resolution: None,
        })
    }

    /// Samples fresh items, generates responses under the current prompt and
    /// assigns every configured assessor.
    pub fn open_round(&mut self, gateway: &Gateway, seed: u64, actor: &str) -> Result<&Round, EngineError> {
        match self.state.phase {
            PhaseKind::CriteriaCalibration | PhaseKind::PromptDevelopment => {}
            PhaseKind::NonConvergent => return Err(EngineError::NonConvergent),
            PhaseKind::Validation => {
                return Err(EngineError::WrongPhase {
                    actual: PhaseKind::Validation,
                    detail: "validation rounds are opened by run_validation".into(),
                })
            }
            actual => {
                return Err(EngineError::WrongPhase { actual, detail: "no rounds in this phase".into() })
            }
        }
        self.guard_new_round()?;
        let s = &self.state;
        let (id, ordinal) = self.next_round_id(s.phase);
        let mut exclusions: BTreeSet<String> = s
            .rounds
            .iter()
            .flat_map(|r| r.allocation.item_ids.iter().cloned())
            .collect();
        exclusions.extend(s.split.validation.iter().cloned());
        let gate = &s.config.gate;
        let allocation = sample(&s.dataset, &id, gate.batch_size, seed, &exclusions, gate.allow_partial_batches)?;
        let spec = unit_spec(s.config.task_kind, s.codebook());
        let outcome = gateway.generate_batch(
            &s.dataset,
            &allocation,
            s.prompt(),
            &s.config.input_slot,
            s.config.primary_model(),
            &spec,
            s.config.parallelism,
        )?;
        let (records, failures) = split_outcome(outcome);
        let assignees = s.config.assessors.clone();
        let round = self.assemble_round(
            id, ordinal, allocation, records, Vec::new(), failures, BTreeMap::new(), assignees,
        )?;
        tracing::info!(round = %round.id, units = round.units.len(), "round opened");
        self.commit(actor, Action::RoundOpened { round: Box::new(round) })?;
        Ok(self.state.rounds.last().expect("just opened"))
    }

    /// Runs the full pipeline on the holdout portion and assigns the
    /// validation assessors, who must not have labeled any earlier round.
    pub fn run_validation(&mut self, gateway: &Gateway, seed: u64, actor: &str) -> Result<&Round, EngineError> {
        if self.state.phase != PhaseKind::Validation {
            return Err(EngineError::WrongPhase {
                actual: self.state.phase,
                detail: "validation runs after PromptDevelopment is finalized".into(),
            });
        }
        self.guard_new_round()?;
        let s = &self.state;
        let cfg = &s.config;
        let earlier: BTreeSet<&String> = s
            .rounds
            .iter()
            .filter(|r| r.phase != PhaseKind::Validation)
            .flat_map(|r| r.assignees.iter())
            .collect();
        let overlap: Vec<&String> = cfg.validation_assessors.iter().filter(|a| earlier.contains(a)).collect();
        if !overlap.is_empty() {
            return Err(EngineError::NoFreshAssessors(format!(
                "{overlap:?} labeled earlier rounds"
            )));
        }
        if cfg.validation_assessors.len() < cfg.gate.min_assessors {
            return Err(EngineError::NoFreshAssessors(format!(
                "{} validation assessors configured, {} required",
                cfg.validation_assessors.len(),
                cfg.gate.min_assessors
            )));
        }
        let (id, ordinal) = self.next_round_id(PhaseKind::Validation);
        let holdout: BTreeSet<&String> = s.split.validation.iter().collect();
        let mut exclusions: BTreeSet<String> =
            s.dataset.ids().filter(|i| !holdout.contains(&i.to_string())).map(str::to_string).collect();
        exclusions.extend(
            s.rounds
                .iter()
                .filter(|r| r.phase == PhaseKind::Validation)
                .flat_map(|r| r.allocation.item_ids.iter().cloned()),
        );
        let allocation = sample(
            &s.dataset,
            &id,
            cfg.gate.validation_sample_size,
            seed,
            &exclusions,
            cfg.gate.allow_partial_batches,
        )?;
        let spec = unit_spec(cfg.task_kind, s.codebook());
        let run = |config: &ModelConfig| {
            gateway.generate_batch(
                &s.dataset,
                &allocation,
                s.prompt(),
                &cfg.input_slot,
                config,
                &spec,
                cfg.parallelism,
            )
        };
        let (records, failures) = split_outcome(run(cfg.primary_model())?);
        let mut comparison_records = Vec::new();
        let mut model_labels = BTreeMap::new();
        if cfg.task_kind == TaskKind::Classification {
            let scale = &s.codebook().criteria[0].scale;
            let mut columns = vec![(cfg.primary_model().rater_id(), records.clone())];
            for config in &cfg.models[1..] {
                let (recs, _) = split_outcome(run(config)?);
                comparison_records.extend(recs.iter().cloned());
                columns.push((config.rater_id(), recs));
            }
            for (rater, recs) in columns {
                let labels: BTreeMap<String, String> = recs
                    .iter()
                    .filter_map(|r| {
                        let label = r.units.first().filter(|l| scale.index_of(l).is_some())?;
                        Some((r.item_id.clone(), label.clone()))
                    })
                    .collect();
                model_labels.insert(rater, labels);
            }
        }
        let assignees = cfg.validation_assessors.clone();
        let round = self.assemble_round(
            id, ordinal, allocation, records, comparison_records, failures, model_labels, assignees,
        )?;
        self.commit(actor, Action::RoundOpened { round: Box::new(round) })?;
        Ok(self.state.rounds.last().expect("just opened"))
    }

    fn normalize_labels(round: &Round, criteria: &[Criterion], labels: &Labels) -> Result<Labels, EngineError> {
        let unit_ids: BTreeSet<&String> = round.units.iter().map(|u| &u.id).collect();
        let unknown: Vec<String> = labels.keys().filter(|k| !unit_ids.contains(k)).cloned().collect();
        if !unknown.is_empty() {
            return Err(EngineError::InvalidLabels { units: unknown, reason: "unknown unit ids".into() });
        }
        let mut out = Labels::new();
        let mut missing = Vec::new();
        let mut off_scale = Vec::new();
        let mut bad_criterion = Vec::new();
        for unit in &round.units {
            let Some(given) = labels.get(&unit.id) else {
                missing.push(unit.id.clone());
                continue;
            };
            if given.keys().any(|c| !criteria.iter().any(|k| &k.id == c)) {
                bad_criterion.push(unit.id.clone());
            }
            let mut row = BTreeMap::new();
            for c in criteria {
                match given.get(&c.id) {
                    None => missing.push(unit.id.clone()),
                    Some(None) => {
                        row.insert(c.id.clone(), None);
                    }
                    Some(Some(l)) => match c.scale.match_label(l) {
                        Some(v) => {
                            row.insert(c.id.clone(), Some(v.to_string()));
                        }
                        None => off_scale.push(unit.id.clone()),
                    },
                }
            }
            out.insert(unit.id.clone(), row);
        }
        let fail = |mut units: Vec<String>, reason: &str| {
            units.dedup();
            Err(EngineError::InvalidLabels { units, reason: reason.into() })
        };
        if !bad_criterion.is_empty() {
            return fail(bad_criterion, "unknown criterion ids");
        }
        if !off_scale.is_empty() {
            return fail(off_scale, "label outside the criterion scale");
        }
        if !missing.is_empty() {
            return fail(missing, "every unit needs a label or an explicit skip for each criterion");
        }
        Ok(out)
    }

    /// Stores one rater's labels. Labeling closes when the last assignee submits.
    pub fn submit_assessment(
        &mut self,
        round_id: &str,
        rater: &str,
        labels: &Labels,
        expected_version: Option<u64>,
    ) -> Result<SubmissionAck, EngineError> {
        let round = self.state.round(round_id)?;
        if !round.assignees.iter().any(|a| a == rater) {
            return Err(EngineError::Forbidden(format!("{rater} is not assigned to {round_id}")));
        }
        if round.assessments.contains_key(rater) {
            return Err(EngineError::AlreadySubmitted(rater.to_string()));
        }
        if let Some(expected) = expected_version {
            if expected != round.version {
                return Err(EngineError::Conflict { expected, actual: round.version });
            }
        }
        let labels = Self::normalize_labels(round, self.state.criteria_for(round), labels)?;
        self.commit(
            rater,
            Action::AssessmentSubmitted { round_id: round_id.into(), rater: rater.into(), labels },
        )?;
        let round = self.state.round(round_id)?;
        Ok(SubmissionAck {
            round_id: round_id.into(),
            rater: rater.into(),
            version: round.version,
            labeling_closed: round.labeling_closed(),
            awaiting: round.awaiting(),
        })
    }

    fn may_view(&self, round: &Round, who: &str) -> bool {
        round.assignees.iter().any(|a| a == who) || self.state.config.lead.as_deref() == Some(who)
    }

    /// Returns `target`'s labels to `reader` and logs the read. Before
    /// labeling closes only a rater's own labels are readable.
    pub fn read_labels(&mut self, round_id: &str, reader: &str, target: &str) -> Result<Labels, EngineError> {
        let round = self.state.round(round_id)?;
        if !self.may_view(round, reader) {
            return Err(EngineError::Forbidden(format!("{reader} has no access to {round_id}")));
        }
        if reader != target && !round.labeling_closed() {
            return Err(EngineError::Blindness);
        }
        let labels = round
            .assessments
            .get(target)
            .map(|a| a.labels.clone())
            .ok_or_else(|| EngineError::NotReady(format!("{target} has not submitted")))?;
        self.commit(
            reader,
            Action::LabelsRead { round_id: round_id.into(), reader: reader.into(), target: target.into() },
        )?;
        Ok(labels)
    }

    /// Units where any two assessors differ, once labeling is closed.
    pub fn disagreements(&self, round_id: &str, requester: &str) -> Result<Vec<Disagreement>, EngineError> {
        let round = self.state.round(round_id)?;
        if !self.may_view(round, requester) {
            return Err(EngineError::Forbidden(format!("{requester} has no access to {round_id}")));
        }
        if !round.labeling_closed() {
            return Err(EngineError::NotReady(format!("{round_id} labeling is still open")));
        }
        Ok(match &round.gate {
            Some(g) => g.disagreements.clone(),
            None => disagreements_for(
                &round.unit_ids(),
                &round.assignees,
                &round.assessments,
                self.state.criteria_for(round),
            ),
        })
    }

    /// Computes the agreement report and applies the gate.
    pub fn gate_round(&mut self, round_id: &str, actor: &str) -> Result<&GateComputation, EngineError> {
        let s = &self.state;
        let round = s.round(round_id)?;
        if round.outcome != Outcome::Open {
            return Err(EngineError::AlreadyGated(round_id.into()));
        }
        if !round.labeling_closed() {
            return Err(EngineError::NotReady(format!("awaiting {:?}", round.awaiting())));
        }
        let thresholds = thresholds_for(round.phase, s.config.task_kind, &s.config.gate);
        let gate = compute_gate(
            round.phase,
            &thresholds,
            s.config.gate.policy,
            &round.unit_ids(),
            &round.assignees,
            &round.assessments,
            &round.model_labels,
            s.criteria_for(round),
            self.log.next_seq(),
        )?;
        tracing::info!(round = round_id, passed = gate.verdict.passed, "round gated");
        self.commit(actor, Action::RoundGated { round_id: round_id.into(), gate: Box::new(gate) })?;
        Ok(self.state.round(round_id)?.gate.as_ref().expect("just gated"))
    }

    /// Records deliberation minutes for a failed round.
    pub fn record_deliberation(&mut self, record: DeliberationRecord, actor: &str) -> Result<(), EngineError> {
        let round = self.state.round(&record.round_id)?;
        if round.outcome != Outcome::GatedFail {
            return Err(EngineError::NotFailed(round.id.clone()));
        }
        if round.resolution.is_some() {
            return Err(EngineError::AlreadyResolved(round.id.clone()));
        }
        record
            .validate()
            .map_err(|e| EngineError::InvalidDeliberation(e.to_string()))?;
        if self.state.deliberation(&record.id).is_some() {
            return Err(EngineError::InvalidDeliberation(format!("duplicate id {:?}", record.id)));
        }
        let lead = self.state.config.lead.as_deref();
        if let Some(p) = record
            .participants
            .iter()
            .find(|p| !round.assignees.contains(p) && Some(p.as_str()) != lead)
        {
            return Err(EngineError::InvalidDeliberation(format!(
                "{p} neither labeled {} nor leads the project",
                round.id
            )));
        }
        let allowed = round.deliberable_units(self.state.criteria_for(round));
        if let Some(r) = record.disagreed_item_refs.iter().find(|r| !allowed.contains(*r)) {
            return Err(EngineError::InvalidDeliberation(format!(
                "{r} is neither a disagreed nor a failing unit of {}",
                round.id
            )));
        }
        self.commit(actor, Action::DeliberationRecorded { record })
    }

    /// Links a deliberation and a substantive revision to a failed round,
    /// unblocking the next round. Failed validation rounds send the project
    /// back to the phase named by the gate.
    pub fn resolve_fail(
        &mut self,
        round_id: &str,
        deliberation_id: &str,
        revision: RevisionRequest,
        actor: &str,
    ) -> Result<&str, EngineError> {
        let round = self.state.round(round_id)?;
        if round.outcome != Outcome::GatedFail {
            return Err(EngineError::NotFailed(round_id.into()));
        }
        if round.resolution.is_some() {
            return Err(EngineError::AlreadyResolved(round_id.into()));
        }
        match self.state.deliberation(deliberation_id) {
            Some(d) if d.round_id == round_id => {}
            _ => return Err(EngineError::UnknownDeliberation(deliberation_id.into())),
        }
        let target_phase = round.gate.as_ref().and_then(|g| g.routed_to).unwrap_or(round.phase);
        let expected = target_phase.artifact().expect("round phases map to artifacts");
        let got = revision.changes.kind();
        if got != expected {
            return Err(EngineError::WrongArtifact { expected, got });
        }
        if revision.kind != RevisionKind::Substantive {
            return Err(EngineError::InsufficientRevision(
                "a failed gate needs a substantive revision".into(),
            ));
        }
        self.commit(
            actor,
            Action::FailResolved {
                round_id: round_id.into(),
                deliberation_id: deliberation_id.into(),
                changes: revision.changes,
            },
        )?;
        Ok(self
            .state
            .round(round_id)?
            .resolution
            .as_deref()
            .expect("just resolved"))
    }

    /// Finalizes the current phase's artifact, optionally after one
    /// readability-only edit, and opens the next phase.
    pub fn finalize_phase(&mut self, revision: Option<RevisionRequest>, actor: &str) -> Result<PhaseKind, EngineError> {
        let s = &self.state;
        if !s.phase.has_rounds() {
            return Err(EngineError::WrongPhase { actual: s.phase, detail: "nothing to finalize".into() });
        }
        if !s.phase_passed() {
            return Err(EngineError::NotPassed);
        }
        if let Some(req) = &revision {
            if req.kind != RevisionKind::ReadabilityOnly {
                return Err(EngineError::SubstantiveAtFinalize);
            }
            if let Some(lead) = &s.config.lead {
                if lead != actor {
                    return Err(EngineError::Forbidden(format!(
                        "only the lead ({lead}) may approve readability edits"
                    )));
                }
            }
            let expected = s.phase.artifact().ok_or(EngineError::WrongPhase {
                actual: s.phase,
                detail: "validation has no artifact to edit".into(),
            })?;
            if req.changes.kind() != expected {
                return Err(EngineError::WrongArtifact { expected, got: req.changes.kind() });
            }
        }
        self.commit(actor, Action::PhaseFinalized { revision })?;
        Ok(self.state.phase)
    }

    /// Applies the final prompt across `scope` with the primary model.
    pub fn production_run(
        &mut self,
        gateway: &Gateway,
        scope: ProductionScope,
        actor: &str,
    ) -> Result<&ProductionExport, EngineError> {
        let s = &self.state;
        if s.phase != PhaseKind::Complete {
            return Err(EngineError::NotReady(format!("project is in {}", s.phase)));
        }
        let item_ids: Vec<String> = match &scope {
            ProductionScope::Holdout => s.split.validation.clone(),
            ProductionScope::All => s.dataset.ids().map(str::to_string).collect(),
            ProductionScope::Items { ids } => {
                if let Some(bad) = ids.iter().find(|i| s.dataset.get(i).is_none()) {
                    return Err(EngineError::InvalidConfig(format!("unknown item {bad:?}")));
                }
                ids.clone()
            }
        };
        let id = format!("production-{}", s.productions.len() + 1);
        let allocation = SampleAllocation {
            scope: id.clone(),
            item_ids,
            seed: 0,
            exclusions: BTreeSet::new(),
            partial: false,
        };
        let spec = unit_spec(s.config.task_kind, s.codebook());
        let outcome = gateway.generate_batch(
            &s.dataset,
            &allocation,
            s.prompt(),
            &s.config.input_slot,
            s.config.primary_model(),
            &spec,
            s.config.parallelism,
        )?;
        let (records, failures) = split_outcome(outcome);
        let classification = s.config.task_kind == TaskKind::Classification;
        let outputs = records
            .into_iter()
            .map(|r| ProductionOutput {
                item_id: r.item_id,
                prompt_hash: r.prompt_hash,
                response_hash: r.response_hash,
                label: if classification { r.units.first().cloned() } else { None },
                units: if classification { Vec::new() } else { r.units },
                parse_error: r.parse_error,
            })
            .collect();
        let export = ProductionExport {
            id,
            scope,
            prompt_version: s.prompt_version,
            codebook_version: s.codebook_version,
            model: s.config.primary_model().clone(),
            outputs,
            failures,
            produced_at: self.log.next_seq(),
        };
        self.commit(actor, Action::ProductionRun { export: Box::new(export) })?;
        Ok(self.state.productions.last().expect("just produced"))
    }

    /// Replaces the gate configuration; thresholds already applied to gated
    /// rounds are kept with those rounds.
    pub fn update_gate(&mut self, gate: GateConfig, actor: &str) -> Result<(), EngineError> {
        if self.state.phase == PhaseKind::Complete {
            return Err(EngineError::Immutable);
        }
        gate.validate()?;
        let mut probe = self.state.config.clone();
        probe.gate = gate.clone();
        probe.validate()?;
        self.commit(actor, Action::GateUpdated { gate })
    }

    pub fn status(&self) -> ProjectStatus {
        let s = &self.state;
        let round = s.visit_rounds().last().map(|r| RoundStatus {
            id: r.id.clone(),
            phase: r.phase,
            ordinal: r.ordinal,
            outcome: r.outcome,
            labeling_closed: r.labeling_closed(),
            awaiting: r.awaiting(),
            version: r.version,
            n_units: r.units.len(),
        });
        ProjectStatus {
            project_id: s.config.id.clone(),
            task_kind: s.config.task_kind,
            phase: s.phase,
            codebook_version: s.codebook_version,
            prompt_version: s.prompt_version,
            round,
            rounds_in_phase: s.visit().rounds.len(),
            total_rounds: s.rounds.len(),
            event_count: self.log.len(),
        }
    }
}
