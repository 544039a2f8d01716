//! Random protocol traces and the invariants every accepted trace must
//! satisfy. Each trace drives a real engine with a mix of well-formed and ill-formed
//! commands (noisy labels, premature reads, wrong artifacts, outsiders).
//! Whatever subset the engine accepts, the resulting event log must satisfy
//! every invariant below.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use proptest::prelude::*;

use promptsci::audit::{export, verify};
use promptsci::codebook::{ArtifactKind, Changes, DeliberationRecord, PromptChanges};
use promptsci::corpus::Dataset;
use promptsci::gateway::Gateway;
use promptsci::protocol::{
    Action, Engine, Event, Labels, Outcome, PhaseKind, ProductionScope, ProjectSetup, RevisionRequest,
};
use promptsci::service::{DatasetUpload, ProjectSpec};
use promptsci::simulation::{probe_generation, taxonomy_classification, SimulationFixture};

#[derive(Debug, Clone)]
pub enum Op {
    Open(u64),
    Validation(u64),
    /// `assignee` picks among the round's assignees rather than everyone;
    /// `step` of `None` uses the fixture script matching the round.
    Submit { assignee: bool, rater: usize, step: Option<usize>, noise: Vec<(usize, usize)> },
    Read { reader: usize, target: usize },
    Gate,
    Resolve { refs: usize, substantive: bool, change: usize, wrong_artifact: bool },
    Finalize { readability: bool, by_lead: bool },
    Produce,
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => (0u64..1000).prop_map(Op::Open),
        1 => (0u64..1000).prop_map(Op::Validation),
        8 => (prop::bool::weighted(0.8), 0usize..8, prop::option::weighted(0.8, 0usize..8), prop::collection::vec((0usize..200, 0usize..4), 0..4))
            .prop_map(|(assignee, rater, step, noise)| Op::Submit { assignee, rater, step, noise }),
        2 => (0usize..8, 0usize..8).prop_map(|(reader, target)| Op::Read { reader, target }),
        3 => Just(Op::Gate),
        3 => (1usize..6, prop::bool::weighted(0.85), 0usize..8, prop::bool::weighted(0.15))
            .prop_map(|(refs, substantive, change, wrong_artifact)| Op::Resolve { refs, substantive, change, wrong_artifact }),
        2 => (any::<bool>(), prop::bool::weighted(0.8)).prop_map(|(readability, by_lead)| Op::Finalize { readability, by_lead }),
        1 => Just(Op::Produce),
    ]
}

pub struct Trace {
    f: SimulationFixture,
    gateway: Gateway,
    pub engine: Engine,
    dataset: Dataset,
    pub people: Vec<String>,
}

impl Trace {
    pub fn new(f: SimulationFixture) -> Self {
        let setup: ProjectSetup = ProjectSpec {
            config: f.config.clone(),
            codebook: Some(f.codebook.clone()),
            prompt: Some(f.prompt.clone()),
            dataset: Some(DatasetUpload { id: f.dataset_id.clone(), source: String::new(), jsonl: f.dataset_jsonl.clone() }),
            transcript: Vec::new(),
        }
        .setup()
        .unwrap();
        let lead = f.config.lead.clone().unwrap_or_else(|| "lead".into());
        let engine = Engine::start_project(setup, &lead).unwrap();
        let gateway = Gateway::replay(f.transcript().unwrap());
        let mut people: Vec<String> = f.config.assessors.clone();
        people.extend(f.config.validation_assessors.iter().cloned());
        people.push(lead);
        people.push("outsider".into());
        let dataset = f.dataset().unwrap();
        Self { f, gateway, engine, dataset, people }
    }

    fn person(&self, i: usize) -> String {
        self.people[i % self.people.len()].clone()
    }

    fn lead(&self) -> String {
        self.f.config.lead.clone().unwrap_or_else(|| "lead".into())
    }

    pub fn current_round(&self) -> Option<String> {
        self.engine.state().rounds.last().map(|r| r.id.clone())
    }

    /// Scripted labels of fixture step `step` for `rater` (or the first
    /// scripted rater), with `noise` overwriting single cells.
    fn labels(&self, round_id: &str, rater: &str, step: usize, noise: &[(usize, usize)]) -> Option<Labels> {
        let round = self.engine.state().round(round_id).ok()?;
        let criteria = self.engine.state().criteria_for(round).to_vec();
        let script_step = &self.f.rounds[step % self.f.rounds.len()];
        let script = script_step.raters.get(rater).or_else(|| script_step.raters.values().next())?;
        let mut labels = script
            .labels_for(round_id, &round.units, &criteria, &self.dataset, rater)
            .ok()?;
        for &(u, v) in noise {
            let unit = &round.units[u % round.units.len()];
            let criterion = &criteria[v % criteria.len()];
            let values = criterion.scale.values();
            let label = values[(u + v) % values.len()].clone();
            labels.entry(unit.id.clone()).or_default().insert(criterion.id.clone(), Some(label));
        }
        Some(labels)
    }

    pub fn apply(&mut self, op: &Op) {
        let before_len = self.engine.events().len();
        let before_hash = self.engine.state_hash();
        let lead = self.lead();
        let accepted = match op {
            Op::Open(seed) => self.engine.open_round(&self.gateway, *seed, &lead).is_ok(),
            Op::Validation(seed) => self.engine.run_validation(&self.gateway, *seed, &lead).is_ok(),
            Op::Submit { assignee, rater, step, noise } => {
                let Some(round) = self.current_round() else { return };
                let assignees = &self.engine.state().round(&round).unwrap().assignees;
                let rater = if *assignee { assignees[rater % assignees.len()].clone() } else { self.person(*rater) };
                let step = step.unwrap_or(self.engine.state().rounds.len() - 1);
                match self.labels(&round, &rater, step, noise) {
                    Some(l) => self.engine.submit_assessment(&round, &rater, &l, None).is_ok(),
                    None => false,
                }
            }
            Op::Read { reader, target } => {
                let Some(round) = self.current_round() else { return };
                let (reader, target) = (self.person(*reader), self.person(*target));
                self.engine.read_labels(&round, &reader, &target).is_ok()
            }
            Op::Gate => {
                let Some(round) = self.current_round() else { return };
                self.engine.gate_round(&round, &lead).is_ok()
            }
            Op::Resolve { refs, substantive, change, wrong_artifact } => {
                let Some(round_id) = self.current_round() else { return };
                let round = self.engine.state().round(&round_id).unwrap();
                let cited: Vec<String> = round
                    .deliberable_units(self.engine.state().criteria_for(round))
                    .into_iter()
                    .take(*refs)
                    .collect();
                let deliberation = DeliberationRecord {
                    id: format!("d-{round_id}-{}", self.engine.events().len()),
                    round_id: round_id.clone(),
                    participants: round.assignees.clone(),
                    disagreed_item_refs: cited,
                    notes: "discussed".into(),
                    resolution: "revise".into(),
                    lead: None,
                };
                let did = deliberation.id.clone();
                let recorded = self.engine.record_deliberation(deliberation, &lead).is_ok();
                self.check_rejection(recorded, before_len, &before_hash);
                let (len, hash) = (self.engine.events().len(), self.engine.state_hash());
                let changes = self.changes(*change, *wrong_artifact, &round_id);
                let revision = if *substantive {
                    RevisionRequest::substantive(changes)
                } else {
                    RevisionRequest::readability(changes)
                };
                let resolved = self.engine.resolve_fail(&round_id, &did, revision, &lead).is_ok();
                self.check_rejection(resolved, len, &hash);
                return;
            }
            Op::Finalize { readability, by_lead } => {
                let actor = if *by_lead { lead.clone() } else { self.person(0) };
                let revision = readability.then(|| {
                    let phase = self.engine.state().phase;
                    RevisionRequest::readability(self.readability_edit(phase))
                });
                self.engine.finalize_phase(revision, &actor).is_ok()
            }
            Op::Produce => self.engine.production_run(&self.gateway, ProductionScope::Holdout, &lead).is_ok(),
        };
        self.check_rejection(accepted, before_len, &before_hash);
    }

    /// A rejected command leaves the log and the state untouched; an accepted
    /// one appends exactly one event.
    fn check_rejection(&self, accepted: bool, before_len: usize, before_hash: &str) {
        if accepted {
            assert_eq!(self.engine.events().len(), before_len + 1);
        } else {
            assert_eq!(self.engine.events().len(), before_len);
            assert_eq!(self.engine.state_hash(), before_hash);
        }
    }

    fn changes(&self, pick: usize, wrong_artifact: bool, round_id: &str) -> Changes {
        let scripted: Vec<&Changes> =
            self.f.rounds.iter().filter_map(|r| r.resolution.as_ref().map(|x| &x.changes)).collect();
        let round = self.engine.state().round(round_id).unwrap();
        let phase = round.gate.as_ref().and_then(|g| g.routed_to).unwrap_or(round.phase);
        let want = phase.artifact();
        let matching: Vec<&&Changes> = scripted
            .iter()
            .filter(|c| (Some(c.kind()) == want) != wrong_artifact)
            .collect();
        match matching.get(pick % matching.len().max(1)) {
            Some(c) => (**c).clone(),
            None => Changes::Prompt(PromptChanges {
                text: format!("{} Answer carefully.", self.engine.state().prompt().text),
                slots: None,
            }),
        }
    }

    fn readability_edit(&self, phase: PhaseKind) -> Changes {
        self.f
            .rounds
            .iter()
            .filter_map(|r| r.finalize.as_ref().and_then(|f| f.readability.clone()))
            .find(|c| Some(c.kind()) == phase.artifact())
            .unwrap_or_else(|| {
                Changes::Prompt(PromptChanges { text: self.engine.state().prompt().text.clone(), slots: None })
            })
    }
}

fn round_opened(events: &[Event]) -> HashMap<String, (PhaseKind, Vec<String>, BTreeSet<String>)> {
    events
        .iter()
        .filter_map(|e| match &e.action {
            Action::RoundOpened { round } => Some((
                round.id.clone(),
                (round.phase, round.assignees.clone(), round.allocation.item_ids.iter().cloned().collect()),
            )),
            _ => None,
        })
        .collect()
}

/// No assessor or lead reads another rater's labels before every assignee
/// of the round has submitted.
fn check_blindness(events: &[Event]) {
    let rounds = round_opened(events);
    let mut submitted: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for e in events {
        match &e.action {
            Action::AssessmentSubmitted { round_id, rater, .. } => {
                submitted.entry(round_id).or_default().insert(rater);
            }
            Action::LabelsRead { round_id, reader, target } if reader != target => {
                let done = submitted.get(round_id.as_str()).cloned().unwrap_or_default();
                let (_, assignees, _) = &rounds[round_id];
                assert!(
                    assignees.iter().all(|a| done.contains(a.as_str())),
                    "seq {}: {reader} read {target} in {round_id} before closure",
                    e.seq
                );
            }
            _ => {}
        }
    }
}

/// Every finalization follows a passing gate whose stored values meet the
/// stored thresholds, and the exported bundle recomputes cleanly.
fn check_gate_soundness(engine: &Engine) {
    let mut last_gate = None;
    for e in engine.events() {
        match &e.action {
            Action::RoundGated { gate, .. } => last_gate = Some(gate.clone()),
            Action::RoundOpened { .. } => last_gate = None,
            Action::PhaseFinalized { .. } => {
                let gate = last_gate.as_ref().unwrap_or_else(|| panic!("seq {}: finalized without a gate", e.seq));
                assert!(gate.verdict.passed, "seq {}: finalized after a failing gate", e.seq);
                for (criterion, agreement) in &gate.report.criteria {
                    let icr = agreement
                        .icr_value(&gate.report.policy)
                        .unwrap_or_else(|| panic!("{criterion}: undefined ICR at a passing gate"));
                    assert!(icr >= gate.thresholds.icr, "{criterion}: {icr} < {}", gate.thresholds.icr);
                }
                if let Some(threshold) = gate.thresholds.pass_rate {
                    assert!(gate.pass_rate.expect("pass-rate computed") >= threshold);
                }
            }
            _ => {}
        }
    }
    let violations = verify(&export(engine));
    assert!(violations.is_empty(), "{violations:#?}");
}

/// Every artifact revision traces to a deliberation over a round whose gate
/// failed, and revises the artifact that round's phase owns.
fn check_deliberations_and_pairing(events: &[Event]) {
    let rounds = round_opened(events);
    let mut gated: HashMap<&str, (bool, Option<PhaseKind>)> = HashMap::new();
    let mut deliberations: HashMap<&str, &str> = HashMap::new();
    let mut edits = BTreeMap::<ArtifactKind, u32>::new();
    let mut resolved = BTreeSet::new();
    for (i, e) in events.iter().enumerate() {
        match &e.action {
            Action::RoundGated { round_id, gate } => {
                gated.insert(round_id, (gate.verdict.passed, gate.routed_to));
            }
            Action::DeliberationRecorded { record } => {
                deliberations.insert(&record.id, &record.round_id);
            }
            Action::FailResolved { round_id, deliberation_id, changes } => {
                let (passed, routed) = gated.get(round_id.as_str()).copied().expect("resolved an ungated round");
                assert!(!passed, "seq {}: revision after a passing gate", e.seq);
                assert_eq!(deliberations.get(deliberation_id.as_str()).copied(), Some(round_id.as_str()));
                assert!(resolved.insert(round_id.clone()), "{round_id} resolved twice");
                let phase = routed.unwrap_or(rounds[round_id].0);
                assert_eq!(Some(changes.kind()), phase.artifact(), "seq {}: wrong artifact", e.seq);
                *edits.entry(changes.kind()).or_default() += 1;
            }
            Action::PhaseFinalized { revision: Some(r) } => {
                assert_ne!(r.kind, RevisionRequest::substantive(r.changes.clone()).kind);
                let phase = Engine::from_events(events[..i].to_vec()).unwrap().state().phase;
                assert_eq!(Some(r.changes.kind()), phase.artifact());
                *edits.entry(r.changes.kind()).or_default() += 1;
            }
            // Artifact versions move only on resolutions and finalizations.
            Action::RoundOpened { round } => {
                let count = |k| 1 + edits.get(&k).copied().unwrap_or(0);
                assert_eq!(round.codebook_version, count(ArtifactKind::Codebook), "{}", round.id);
                assert_eq!(round.prompt_version, count(ArtifactKind::Prompt), "{}", round.id);
            }
            _ => {}
        }
    }
}

/// Round allocations never share an item, and calibration or development
/// rounds only allocate from the development pool.
fn check_freshness(engine: &Engine) {
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    let holdout: BTreeSet<&String> = engine.state().split.validation.iter().collect();
    for round in &engine.state().rounds {
        for item in &round.allocation.item_ids {
            if let Some(prev) = seen.insert(item.clone(), round.id.clone()) {
                panic!("{item} allocated to {prev} and {}", round.id);
            }
            if round.phase != PhaseKind::Validation {
                assert!(!holdout.contains(item), "{} drew holdout item {item}", round.id);
            }
        }
    }
}

/// Validation rounds are labeled only by assessors who labeled nothing earlier.
fn check_validation_assessors(engine: &Engine) {
    let mut earlier: BTreeSet<&str> = BTreeSet::new();
    for round in &engine.state().rounds {
        if round.phase == PhaseKind::Validation {
            for a in &round.assignees {
                assert!(!earlier.contains(a.as_str()), "{a} labeled before validation");
            }
        } else {
            earlier.extend(round.assessments.keys().map(String::as_str));
        }
    }
}

pub fn check_all(trace: &Trace) {
    let events = trace.engine.events();
    let replayed = Engine::from_events(events.to_vec()).unwrap();
    assert_eq!(replayed.state_hash(), trace.engine.state_hash());
    check_blindness(events);
    check_gate_soundness(&trace.engine);
    check_deliberations_and_pairing(events);
    check_freshness(&trace.engine);
    check_validation_assessors(&trace.engine);
    for r in &trace.engine.state().rounds {
        if r.outcome != Outcome::Open {
            assert!(r.labeling_closed());
        }
    }
}

pub fn fixture(which: bool) -> SimulationFixture {
    if which {
        taxonomy_classification()
    } else {
        probe_generation()
    }
}


/// Runs the fixture's script in order, with `noise` injected into the first
/// assessor's labels of each step and an extra label read before each submission.
pub fn scripted_trace(which: bool, noise: &[Vec<(usize, usize)>], reads: &[(usize, usize)]) -> Trace {
    let f = fixture(which);
    let steps = f.rounds.len();
    let mut trace = Trace::new(f);
    for step in 0..steps {
        trace.apply(&Op::Open(step as u64));
        trace.apply(&Op::Validation(step as u64));
        let assignees = trace
            .current_round()
            .map(|r| trace.engine.state().round(&r).unwrap().assignees.clone())
            .unwrap_or_default();
        let (reader, target) = reads[step % reads.len()];
        for (k, a) in assignees.iter().enumerate() {
            trace.apply(&Op::Read { reader, target });
            let rater = trace.people.iter().position(|p| p == a).unwrap();
            let noise = if k == 0 { noise[step % noise.len()].clone() } else { Vec::new() };
            trace.apply(&Op::Submit { assignee: false, rater, step: Some(step), noise });
        }
        trace.apply(&Op::Gate);
        trace.apply(&Op::Resolve { refs: 5, substantive: true, change: step, wrong_artifact: false });
        trace.apply(&Op::Finalize { readability: step % 2 == 0, by_lead: true });
    }
    trace.apply(&Op::Produce);
    trace
}
