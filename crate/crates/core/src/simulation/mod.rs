//! Scripted end-to-end runs: replayed model transcripts plus scripted
//! assessors drive the engine, and the realized trajectory is compared with
//! the one the fixture expects.

mod fixtures;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{create_codebook, Changes, Criterion, DeliberationRecord, PromptTemplate};
use crate::corpus::{ingest, Dataset};
use crate::gateway::{Gateway, Transcript, TranscriptEntry};
use crate::protocol::{
    Engine, EngineError, Labels, PhaseKind, ProductionScope, ProjectConfig, ProjectSetup,
    RevisionRequest, Round, Unit,
};

pub use fixtures::{bundled, bundled_names, probe_generation, taxonomy_classification};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("unknown fixture {0:?}")]
    UnknownFixture(String),
    #[error("invalid fixture: {0}")]
    Fixture(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub slots: Vec<String>,
}

/// How one scripted assessor labels a round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RaterScript {
    /// criterion → labels by unit position; `null` is an explicit skip.
    #[serde(default)]
    pub labels: BTreeMap<String, Vec<Option<String>>>,
    /// criterion → item metadata field holding the label to give.
    #[serde(default)]
    pub from_meta: BTreeMap<String, String>,
    /// criterion → unit positions where the rater picks the scale value
    /// after the reference label (wrapping), i.e. a scripted slip.
    #[serde(default)]
    pub shift: BTreeMap<String, Vec<usize>>,
    /// criterion → unit position → label, applied last.
    #[serde(default)]
    pub overrides: BTreeMap<String, BTreeMap<usize, Option<String>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailedKind {
    Icr,
    PassRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    pub passed: bool,
    #[serde(default)]
    pub failed: Vec<FailedKind>,
    #[serde(default)]
    pub pass_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResolution {
    pub participants: Vec<String>,
    pub notes: String,
    pub resolution: String,
    pub changes: Changes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeStep {
    pub actor: String,
    #[serde(default)]
    pub readability: Option<Changes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRound {
    pub phase: PhaseKind,
    pub raters: BTreeMap<String, RaterScript>,
    pub expect: ExpectedOutcome,
    /// Deliberation and revision recorded when the round fails.
    #[serde(default)]
    pub resolution: Option<ScriptedResolution>,
    /// Finalization performed after the round passes.
    #[serde(default)]
    pub finalize: Option<FinalizeStep>,
}

/// A self-contained, replayable protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationFixture {
    pub name: String,
    pub description: String,
    pub config: ProjectConfig,
    pub dataset_id: String,
    pub dataset_jsonl: String,
    pub codebook: Vec<Criterion>,
    pub prompt: PromptSpec,
    pub transcript: Vec<TranscriptEntry>,
    pub seed: u64,
    pub rounds: Vec<ScriptedRound>,
    #[serde(default)]
    pub production: Option<ProductionScope>,
    pub expected_final_phase: PhaseKind,
}

/// A difference between the expected and the realized trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub step: String,
    pub expected: String,
    pub realized: String,
}

impl std::fmt::Display for Deviation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: expected {}, realized {}", self.step, self.expected, self.realized)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedRound {
    pub id: String,
    pub phase: PhaseKind,
    pub n_units: usize,
    pub passed: bool,
    pub failed: Vec<FailedKind>,
    pub pass_rate: Option<f64>,
    pub icr: BTreeMap<String, Option<f64>>,
}

#[derive(Debug)]
pub struct SimulationOutcome {
    pub engine: Engine,
    pub transcript: Transcript,
    pub rounds: Vec<RealizedRound>,
    pub deviations: Vec<Deviation>,
}

impl SimulationOutcome {
    pub fn ok(&self) -> bool {
        self.deviations.is_empty()
    }
}

impl SimulationFixture {
    pub fn dataset(&self) -> Result<Dataset, SimulationError> {
        ingest(&self.dataset_id, &format!("fixture:{}", self.name), self.dataset_jsonl.as_bytes())
            .map_err(|e| SimulationError::Fixture(e.to_string()))
    }

    pub fn transcript(&self) -> Result<Transcript, SimulationError> {
        let mut t = Transcript::new();
        for e in &self.transcript {
            if t.get(&e.key.digest()).is_some() {
                return Err(SimulationError::Fixture(format!(
                    "duplicate transcript entry for {}",
                    e.key.item_id
                )));
            }
            t.insert(e.clone());
        }
        Ok(t)
    }

    fn setup(&self) -> Result<ProjectSetup, SimulationError> {
        let codebook = create_codebook(self.codebook.clone())
            .map_err(|e| SimulationError::Fixture(e.to_string()))?;
        let prompt = PromptTemplate::new(&self.prompt.text, self.prompt.slots.clone(), self.config.task_kind)
            .map_err(|e| SimulationError::Fixture(e.to_string()))?;
        Ok(ProjectSetup {
            config: self.config.clone(),
            dataset: Some(self.dataset()?),
            codebook: Some(codebook),
            prompt: Some(prompt),
        })
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.rounds.is_empty() {
            return Err(SimulationError::Fixture("the trajectory has no rounds".into()));
        }
        self.setup()?;
        self.transcript()?;
        Ok(())
    }
}

impl RaterScript {
    /// Labels this script assigns to `units`, in order.
    pub fn labels_for(
        &self,
        round_id: &str,
        units: &[Unit],
        criteria: &[Criterion],
        dataset: &Dataset,
        rater: &str,
    ) -> Result<Labels, SimulationError> {
        let script = self;
        let mut labels = Labels::new();
        for (pos, unit) in units.iter().enumerate() {
            let mut row = BTreeMap::new();
            for c in criteria {
                let mut label = match (script.labels.get(&c.id), script.from_meta.get(&c.id)) {
                    (Some(list), _) => list.get(pos).cloned().ok_or_else(|| {
                        SimulationError::Fixture(format!(
                            "{rater} has {} {} labels for {} units in {}",
                            list.len(),
                            c.id,
                            units.len(),
                            round_id
                        ))
                    })?,
                    (None, Some(field)) => dataset
                        .get(&unit.item_id)
                        .and_then(|i| i.meta.as_ref())
                        .and_then(|m| m.get(field))
                        .and_then(|v| v.as_str())
                        .map(str::to_string),
                    (None, None) => {
                        return Err(SimulationError::Fixture(format!(
                            "{rater} has no script for criterion {} in {}",
                            c.id, round_id
                        )))
                    }
                };
                if script.shift.get(&c.id).is_some_and(|p| p.contains(&pos)) {
                    label = label.map(|l| {
                        let values = c.scale.values();
                        let i = values.iter().position(|v| *v == l).unwrap_or(0);
                        values[(i + 1) % values.len()].clone()
                    });
                }
                if let Some(o) = script.overrides.get(&c.id).and_then(|o| o.get(&pos)) {
                    label = o.clone();
                }
                row.insert(c.id.clone(), label);
            }
            labels.insert(unit.id.clone(), row);
        }
        Ok(labels)
    }
}

fn realized(round: &Round) -> RealizedRound {
    let gate = round.gate.as_ref().expect("realized rounds are gated");
    let failed = gate
        .verdict
        .failed_conditions
        .iter()
        .map(|f| if f.is_icr() { FailedKind::Icr } else { FailedKind::PassRate })
        .fold(Vec::new(), |mut acc, k| {
            if !acc.contains(&k) {
                acc.push(k);
            }
            acc
        });
    let icr = gate
        .report
        .criteria
        .iter()
        .map(|(c, a)| (c.clone(), a.icr_value(&gate.report.policy)))
        .collect();
    RealizedRound {
        id: round.id.clone(),
        phase: round.phase,
        n_units: round.units.len(),
        passed: gate.verdict.passed,
        failed,
        pass_rate: gate.pass_rate,
        icr,
    }
}

fn compare(step: &str, expect: &ExpectedOutcome, got: &RealizedRound, out: &mut Vec<Deviation>) {
    let mut dev = |what: &str, e: String, r: String| {
        out.push(Deviation { step: format!("{step} {what}"), expected: e, realized: r });
    };
    if expect.passed != got.passed {
        dev("outcome", pass_word(expect.passed), pass_word(got.passed));
    }
    let mut want = expect.failed.clone();
    let mut have = got.failed.clone();
    want.sort_by_key(|k| *k as u8);
    have.sort_by_key(|k| *k as u8);
    if want != have {
        dev("failed conditions", format!("{want:?}"), format!("{have:?}"));
    }
    if let Some(p) = expect.pass_rate {
        match got.pass_rate {
            Some(r) if (r - p).abs() <= 1e-9 => {}
            other => dev("pass rate", format!("{p:.2}"), format!("{other:?}")),
        }
    }
}

fn pass_word(p: bool) -> String {
    if p { "gated-pass".into() } else { "gated-fail".into() }
}

/// Runs a fixture in replay mode. Engine errors end the run and are
/// reported as a deviation.
pub fn simulate(fixture: &SimulationFixture, seed: Option<u64>) -> Result<SimulationOutcome, SimulationError> {
    fixture.validate()?;
    let seed = seed.unwrap_or(fixture.seed);
    let gateway = Gateway::replay(fixture.transcript()?);
    let dataset = fixture.dataset()?;
    let mut engine = Engine::start_project(fixture.setup()?, "simulator")?;
    let mut rounds = Vec::new();
    let mut deviations = Vec::new();

    let result = drive(fixture, seed, &gateway, &dataset, &mut engine, &mut rounds, &mut deviations);
    match result {
        Ok(()) => {
            let phase = engine.state().phase;
            if phase != fixture.expected_final_phase {
                deviations.push(Deviation {
                    step: "final phase".into(),
                    expected: fixture.expected_final_phase.to_string(),
                    realized: phase.to_string(),
                });
            }
        }
        Err(SimulationError::Engine(e)) => deviations.push(Deviation {
            step: format!("step {}", rounds.len() + 1),
            expected: "the scripted operation to succeed".into(),
            realized: format!("{} ({})", e, e.code()),
        }),
        Err(other) => return Err(other),
    }
    Ok(SimulationOutcome { engine, transcript: gateway.transcript(), rounds, deviations })
}

fn drive(
    fixture: &SimulationFixture,
    seed: u64,
    gateway: &Gateway,
    dataset: &Dataset,
    engine: &mut Engine,
    rounds: &mut Vec<RealizedRound>,
    deviations: &mut Vec<Deviation>,
) -> Result<(), SimulationError> {
    for (i, step) in fixture.rounds.iter().enumerate() {
        let phase = engine.state().phase;
        if phase != step.phase {
            deviations.push(Deviation {
                step: format!("step {}", i + 1),
                expected: format!("a {} round", step.phase),
                realized: format!("project in {phase}"),
            });
            return Ok(());
        }
        let round_seed = seed.wrapping_add(i as u64);
        let round = if phase == PhaseKind::Validation {
            engine.run_validation(gateway, round_seed, "simulator")?
        } else {
            engine.open_round(gateway, round_seed, "simulator")?
        }
        .clone();
        let criteria = engine.state().criteria_for(&round).to_vec();
        for rater in &round.assignees {
            let script = step.raters.get(rater).ok_or_else(|| {
                SimulationError::Fixture(format!("no script for {rater} in {}", round.id))
            })?;
            let labels = script.labels_for(&round.id, &round.units, &criteria, dataset, rater)?;
            engine.submit_assessment(&round.id, rater, &labels, None)?;
        }
        engine.gate_round(&round.id, "simulator")?;
        let got = realized(engine.state().round(&round.id)?);
        compare(&round.id, &step.expect, &got, deviations);
        let passed = got.passed;
        rounds.push(got);

        if !passed {
            let Some(res) = &step.resolution else {
                continue;
            };
            let gated = engine.state().round(&round.id)?;
            let refs: Vec<String> = gated.deliberable_units(&criteria).into_iter().take(5).collect();
            let id = format!("delib-{}", round.id);
            engine.record_deliberation(
                DeliberationRecord {
                    id: id.clone(),
                    round_id: round.id.clone(),
                    participants: res.participants.clone(),
                    disagreed_item_refs: refs,
                    notes: res.notes.clone(),
                    resolution: res.resolution.clone(),
                    lead: fixture.config.lead.clone(),
                },
                "simulator",
            )?;
            engine.resolve_fail(&round.id, &id, RevisionRequest::substantive(res.changes.clone()), "simulator")?;
        } else if let Some(fin) = &step.finalize {
            let request = fin.readability.clone().map(RevisionRequest::readability);
            engine.finalize_phase(request, &fin.actor)?;
        }
    }
    if let Some(scope) = &fixture.production {
        engine.production_run(gateway, scope.clone(), "simulator")?;
    }
    Ok(())
}
