use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AuditBundle, BundleRound, BundleStatus};
use crate::codebook::{
    ArtifactDiff, ArtifactKind, ArtifactStore, Criterion, RevisionKind, Status,
};
use crate::gateway::{sha256_hex, Transcript};
use crate::protocol::{compute_gate, thresholds_for, Assessment, Outcome, PhaseKind};

const TOLERANCE: f64 = 1e-9;

/// One failed bundle check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub check: String,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}", self.check, self.detail)
    }
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn fail(&mut self, check: &str, detail: impl Into<String>) {
        self.out.push(Violation { check: check.into(), detail: detail.into() });
    }
}

/// Structural equality with numbers compared within `tol`.
fn approx_eq(a: &Value, b: &Value, tol: f64) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_f64(), y.as_f64()) {
            (Some(x), Some(y)) => (x - y).abs() <= tol,
            _ => x == y,
        },
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(a, b)| approx_eq(a, b, tol))
        }
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len()
                && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| approx_eq(v, w, tol)))
        }
        _ => a == b,
    }
}

/// Checks every bundle invariant and recomputes every stored agreement
/// value. An empty list means the bundle is sound.
pub fn verify(bundle: &AuditBundle) -> Vec<Violation> {
    let mut c = Checker { out: Vec::new() };
    let store = ArtifactStore::from_parts(
        bundle.codebooks.clone(),
        bundle.prompts.clone(),
        bundle.revisions.clone(),
    );
    check_artifacts(bundle, &store, &mut c);
    check_rounds(bundle, &store, &mut c);
    check_deliberations(bundle, &mut c);
    check_phases(bundle, &store, &mut c);
    check_freshness(bundle, &mut c);
    check_blindness(bundle, &mut c);
    check_manifest(bundle, &mut c);
    c.out
}

/// Violations for manifest entries whose response is missing from, or
/// differs in, the side-car transcript.
pub fn verify_transcript(bundle: &AuditBundle, transcript: &Transcript) -> Vec<Violation> {
    let mut c = Checker { out: Vec::new() };
    for m in &bundle.transcript_manifest {
        match transcript.get(&m.digest) {
            None => c.fail("transcript", format!("no transcript entry for {} ({})", m.item_id, m.model)),
            Some(e) if sha256_hex(&e.response) != m.response_hash => {
                c.fail("transcript", format!("response hash mismatch for {} ({})", m.item_id, m.model))
            }
            Some(_) => {}
        }
    }
    c.out
}

fn check_artifacts(b: &AuditBundle, store: &ArtifactStore, c: &mut Checker) {
    for cb in &b.codebooks {
        match store.replay_codebook(cb.meta.version) {
            Ok(criteria) if criteria == cb.criteria => {}
            Ok(_) => c.fail("diff chain", format!("replayed codebook v{} differs from the stored version", cb.meta.version)),
            Err(e) => c.fail("diff chain", format!("codebook v{}: {e}", cb.meta.version)),
        }
    }
    for p in &b.prompts {
        match store.replay_prompt(p.meta.version) {
            Ok((text, slots)) if text == p.text && slots == p.slots => {}
            Ok(_) => c.fail("diff chain", format!("replayed prompt v{} differs from the stored version", p.meta.version)),
            Err(e) => c.fail("diff chain", format!("prompt v{}: {e}", p.meta.version)),
        }
    }
    let mut ids = BTreeSet::new();
    for rev in &b.revisions {
        if !ids.insert(&rev.id) {
            c.fail("closure", format!("duplicate revision id {}", rev.id));
        }
        let exists = |v: u32| match rev.artifact {
            ArtifactKind::Codebook => store.codebook(v).is_ok(),
            ArtifactKind::Prompt => store.prompt(v).is_ok(),
        };
        if !exists(rev.from_version) || !exists(rev.to_version) {
            c.fail("closure", format!("revision {} names a missing version", rev.id));
        }
        let kind_ok = matches!(
            (&rev.diff, rev.artifact),
            (ArtifactDiff::Codebook(_), ArtifactKind::Codebook) | (ArtifactDiff::Prompt(_), ArtifactKind::Prompt)
        );
        if !kind_ok {
            c.fail("closure", format!("revision {} carries a diff for the other artifact", rev.id));
        }
        match rev.kind {
            RevisionKind::Substantive => match &rev.deliberation_id {
                None => c.fail("deliberation completeness", format!("substantive revision {} has no deliberation", rev.id)),
                Some(d) if !b.deliberations.iter().any(|x| &x.id == d) => c.fail(
                    "deliberation completeness",
                    format!("revision {} links missing deliberation {d}", rev.id),
                ),
                Some(_) => {}
            },
            RevisionKind::ReadabilityOnly => {
                if let ArtifactDiff::Codebook(d) = &rev.diff {
                    let scales_kept = d.changed.iter().all(|ch| ch.before.scale == ch.after.scale);
                    if !d.added.is_empty() || !d.removed.is_empty() || d.order.is_some() || !scales_kept {
                        c.fail("readability", format!("readability-only revision {} changes assessment semantics", rev.id));
                    }
                }
                if rev.artifact == ArtifactKind::Prompt && !rev.unverified_readability {
                    c.fail("readability", format!("prompt revision {} is not flagged unverified", rev.id));
                }
            }
        }
    }
    if store.codebook(b.codebook_version).is_err() || store.prompt(b.prompt_version).is_err() {
        c.fail("closure", "current artifact versions are missing");
    }
    match (&b.final_artifacts, b.status) {
        (Some(f), BundleStatus::Complete) => {
            let finalized = |kind, v| {
                store
                    .status(crate::codebook::ArtifactRef { kind, version: v })
                    .is_ok_and(|s| s == Status::Finalized)
            };
            if f.codebook_version != b.codebook_version || f.prompt_version != b.prompt_version {
                c.fail("final artifacts", "final versions differ from the current versions");
            }
            if !finalized(ArtifactKind::Codebook, f.codebook_version) || !finalized(ArtifactKind::Prompt, f.prompt_version) {
                c.fail("final artifacts", "final artifacts are not finalized");
            }
            if store.codebook(f.codebook_version).map(|cb| cb.render()).ok().as_ref() != Some(&f.codebook_text)
                || store.prompt(f.prompt_version).map(|p| p.text.clone()).ok().as_ref() != Some(&f.prompt_text)
            {
                c.fail("final artifacts", "final artifact text differs from the stored version");
            }
        }
        (None, BundleStatus::Complete) => c.fail("final artifacts", "complete bundle has no final artifacts"),
        (Some(_), _) => c.fail("final artifacts", "in-progress bundle carries final artifacts"),
        (None, _) => {}
    }
}

fn criteria_of<'a>(store: &'a ArtifactStore, round: &BundleRound) -> Option<&'a [Criterion]> {
    store.codebook(round.codebook_version).ok().map(|cb| cb.criteria.as_slice())
}

fn check_assessments(round: &BundleRound, criteria: &[Criterion], c: &mut Checker) {
    let units: BTreeSet<&String> = round.units.iter().map(|u| &u.id).collect();
    for (rater, a) in &round.assessments {
        if !round.assignees.contains(rater) || &a.rater != rater {
            c.fail("assessments", format!("{} holds labels from unassigned {rater}", round.id));
        }
        let labeled: BTreeSet<&String> = a.labels.keys().collect();
        if labeled != units {
            c.fail("assessments", format!("{rater}'s labels in {} do not cover the round's units", round.id));
        }
        for row in a.labels.values() {
            for crit in criteria {
                match row.get(&crit.id) {
                    None => c.fail("assessments", format!("{rater} omits {} in {}", crit.id, round.id)),
                    Some(Some(l)) if crit.scale.index_of(l).is_none() => {
                        c.fail("assessments", format!("{rater} used off-scale label {l:?} in {}", round.id))
                    }
                    Some(_) => {}
                }
            }
        }
    }
}

fn closed_at(round: &BundleRound) -> Option<u64> {
    if round.assignees.iter().all(|a| round.assessments.contains_key(a)) {
        round.assessments.values().map(|a: &Assessment| a.submitted_at).max()
    } else {
        None
    }
}

fn check_rounds(b: &AuditBundle, store: &ArtifactStore, c: &mut Checker) {
    let mut ids = BTreeSet::new();
    let mut ordinals: BTreeMap<PhaseKind, u32> = BTreeMap::new();
    let open = b.rounds.iter().filter(|r| r.outcome == Outcome::Open).count();
    if open > 1 || b.rounds.iter().rev().skip(1).any(|r| r.outcome == Outcome::Open) {
        c.fail("ordinals", "more than one open round, or an open round before the latest");
    }
    for round in &b.rounds {
        if !ids.insert(&round.id) {
            c.fail("closure", format!("duplicate round id {}", round.id));
        }
        let next = ordinals.entry(round.phase).or_insert(0);
        *next += 1;
        if round.ordinal != *next || round.id != format!("{}-{}", round.phase.slug(), round.ordinal) {
            c.fail("ordinals", format!("{} breaks the 1..k ordinal sequence of {}", round.id, round.phase));
        }
        if store.prompt(round.prompt_version).is_err() {
            c.fail("closure", format!("{} uses missing prompt v{}", round.id, round.prompt_version));
        }
        let Some(criteria) = criteria_of(store, round) else {
            c.fail("closure", format!("{} uses missing codebook v{}", round.id, round.codebook_version));
            continue;
        };
        let allocated: BTreeSet<&String> = round.allocation.item_ids.iter().collect();
        if round.units.iter().any(|u| !allocated.contains(&u.item_id)) {
            c.fail("closure", format!("{} has units outside its allocation", round.id));
        }
        check_assessments(round, criteria, c);
        for d in &round.deliberation_ids {
            if !b.deliberations.iter().any(|x| &x.id == d && x.round_id == round.id) {
                c.fail("closure", format!("{} links missing deliberation {d}", round.id));
            }
        }
        if let Some(rev) = &round.resolution {
            if !b.revisions.iter().any(|r| &r.id == rev) {
                c.fail("closure", format!("{} links missing revision {rev}", round.id));
            }
        }
        check_gate(b, round, criteria, c);
    }
}

fn check_gate(b: &AuditBundle, round: &BundleRound, criteria: &[Criterion], c: &mut Checker) {
    let (Some(stored), Some(gated_at)) = (&round.gate, round.gated_at) else {
        if round.outcome != Outcome::Open || round.gate.is_some() {
            c.fail("gate", format!("{} has an outcome without a gate record", round.id));
        }
        return;
    };
    if closed_at(round).is_none_or(|t| t > gated_at) {
        c.fail("gate", format!("{} was gated before labeling closed", round.id));
    }
    let gate_config = b.gate_at(gated_at);
    let expected = thresholds_for(round.phase, b.project.task_kind, gate_config);
    if stored.thresholds != expected {
        c.fail("gate", format!("{} was gated with thresholds other than the configured ones", round.id));
    }
    let unit_ids: Vec<String> = round.units.iter().map(|u| u.id.clone()).collect();
    match compute_gate(
        round.phase,
        &stored.thresholds,
        gate_config.policy,
        &unit_ids,
        &round.assignees,
        &round.assessments,
        &round.model_labels,
        criteria,
        gated_at,
    ) {
        Ok(recomputed) => {
            if !same(&stored.report, &recomputed.report) || !same(&stored.mixed_report, &recomputed.mixed_report) {
                c.fail("recomputation", format!("report mismatch, round {}", round.id));
            }
            if !same(&stored.pass_rate, &recomputed.pass_rate) {
                c.fail("recomputation", format!("pass-rate mismatch, round {}", round.id));
            }
            if stored.verdict != recomputed.verdict && !same(&stored.verdict, &recomputed.verdict) {
                c.fail("recomputation", format!("verdict mismatch, round {}", round.id));
            }
            if stored.disagreements != recomputed.disagreements {
                c.fail("recomputation", format!("disagreement set mismatch, round {}", round.id));
            }
            if stored.routed_to != recomputed.routed_to {
                c.fail("recomputation", format!("correction routing mismatch, round {}", round.id));
            }
            let outcome = if recomputed.verdict.passed { Outcome::GatedPass } else { Outcome::GatedFail };
            if round.outcome != outcome {
                c.fail("gate soundness", format!("{} outcome contradicts its recomputed verdict", round.id));
            }
        }
        Err(e) => c.fail("recomputation", format!("{}: {e}", round.id)),
    }
}

fn same<T: Serialize>(a: &T, b: &T) -> bool {
    let json = |v: &T| serde_json::to_value(v).expect("serializable");
    approx_eq(&json(a), &json(b), TOLERANCE)
}

fn check_deliberations(b: &AuditBundle, c: &mut Checker) {
    let mut ids = BTreeSet::new();
    for d in &b.deliberations {
        if !ids.insert(&d.id) {
            c.fail("closure", format!("duplicate deliberation id {}", d.id));
        }
        if let Err(e) = d.validate() {
            c.fail("deliberation", format!("{}: {e}", d.id));
        }
        let Some(round) = b.round(&d.round_id) else {
            c.fail("closure", format!("deliberation {} names missing round {}", d.id, d.round_id));
            continue;
        };
        if round.outcome != Outcome::GatedFail {
            c.fail("deliberation completeness", format!("deliberation {} follows {}, which did not fail", d.id, round.id));
        }
        if !round.deliberation_ids.contains(&d.id) {
            c.fail("closure", format!("{} does not list deliberation {}", round.id, d.id));
        }
        let units: BTreeSet<&String> = round.units.iter().map(|u| &u.id).collect();
        if let Some(r) = d.disagreed_item_refs.iter().find(|r| !units.contains(r)) {
            c.fail("closure", format!("deliberation {} cites unknown unit {r}", d.id));
        }
    }
    for rev in b.revisions.iter().filter(|r| r.kind == RevisionKind::Substantive) {
        let Some(d) = rev.deliberation_id.as_ref().and_then(|id| b.deliberations.iter().find(|x| &x.id == id)) else {
            continue;
        };
        let Some(round) = b.round(&d.round_id) else { continue };
        if round.resolution.as_ref() != Some(&rev.id) {
            c.fail("deliberation completeness", format!("{} is not recorded as resolving {}", rev.id, round.id));
        }
        let target = round
            .gate
            .as_ref()
            .and_then(|g| g.routed_to)
            .unwrap_or(round.phase)
            .artifact();
        if target != Some(rev.artifact) {
            c.fail("phase/artifact pairing", format!("{} revises the {} after a failed {} round", rev.id, rev.artifact, round.phase));
        }
    }
    for round in &b.rounds {
        if round.outcome == Outcome::GatedFail {
            if let Some(rev) = &round.resolution {
                let linked = b.revisions.iter().find(|r| &r.id == rev).and_then(|r| r.deliberation_id.as_ref());
                if !linked.is_some_and(|d| round.deliberation_ids.contains(d)) {
                    c.fail("deliberation completeness", format!("{} resolution lacks a deliberation of that round", round.id));
                }
            }
        } else if round.resolution.is_some() {
            c.fail("deliberation completeness", format!("{} did not fail but records a resolution", round.id));
        }
    }
}

fn check_phases(b: &AuditBundle, store: &ArtifactStore, c: &mut Checker) {
    let mut seen = BTreeSet::new();
    for (i, visit) in b.phases.iter().enumerate() {
        let last = i + 1 == b.phases.len();
        for id in &visit.rounds {
            if !seen.insert(id) {
                c.fail("closure", format!("round {id} listed in two phase visits"));
            }
            match b.round(id) {
                Some(r) if r.phase == visit.phase => {}
                Some(r) => c.fail("phase/artifact pairing", format!("{} ran during a {} visit", r.id, visit.phase)),
                None => c.fail("closure", format!("phase visit lists missing round {id}")),
            }
        }
        let rounds: Vec<&BundleRound> = visit.rounds.iter().filter_map(|id| b.round(id)).collect();
        match visit.phase {
            PhaseKind::CriteriaCalibration => {
                if rounds.windows(2).any(|w| w[0].prompt_version != w[1].prompt_version) {
                    c.fail("phase/artifact pairing", "a calibration visit advanced the prompt");
                }
            }
            PhaseKind::PromptDevelopment => {
                if rounds.windows(2).any(|w| w[0].codebook_version != w[1].codebook_version) {
                    c.fail("phase/artifact pairing", "a prompt development visit advanced the codebook");
                }
            }
            _ => {}
        }
        if let Some(rev_id) = &visit.readability_revision {
            match b.revisions.iter().find(|r| &r.id == rev_id) {
                Some(rev) if rev.kind == RevisionKind::ReadabilityOnly && Some(rev.artifact) == visit.phase.artifact() => {}
                Some(rev) => c.fail("phase/artifact pairing", format!("{} is not a readability edit of the {} artifact", rev.id, visit.phase)),
                None => c.fail("closure", format!("phase visit links missing revision {rev_id}")),
            }
        }
        let Some(at) = visit.finalized else { continue };
        if visit.phase.artifact() != Some(at.kind) {
            c.fail("phase/artifact pairing", format!("{} visit finalized the {}", visit.phase, at.kind));
        }
        if !store.status(at).is_ok_and(|s| s == Status::Finalized) {
            c.fail("gate soundness", format!("{at} is recorded as finalized but is a draft"));
        }
        let required = if visit.phase == PhaseKind::Validation {
            visit.exited_at.map_or(1, |t| b.gate_at(t).validation_rounds)
        } else {
            1
        };
        let passes = rounds.iter().rev().take_while(|r| {
            r.outcome == Outcome::GatedPass && r.gate.as_ref().is_some_and(|g| g.verdict.passed)
        });
        if passes.count() < required {
            c.fail("gate soundness", format!("{} was finalized without a passing final round", visit.phase));
        }
        if last {
            c.fail("closure", "the current phase visit is marked finalized");
        }
    }
    let all_listed = b.rounds.iter().all(|r| seen.contains(&r.id));
    if !all_listed {
        c.fail("closure", "some rounds belong to no phase visit");
    }
    let current = b.phases.last().map(|v| v.phase);
    let expected_status = match current {
        Some(PhaseKind::Complete) => BundleStatus::Complete,
        Some(PhaseKind::NonConvergent) => BundleStatus::NonConvergent,
        _ => BundleStatus::InProgress,
    };
    if b.status != expected_status {
        c.fail("closure", format!("status {:?} contradicts the phase history", b.status));
    }
    if b.status == BundleStatus::Complete {
        for phase in [PhaseKind::CriteriaCalibration, PhaseKind::PromptDevelopment] {
            if !b.phases.iter().any(|v| v.phase == phase && v.finalized.is_some()) {
                c.fail("gate soundness", format!("complete project never finalized {phase}"));
            }
        }
    }
}

fn check_freshness(b: &AuditBundle, c: &mut Checker) {
    let holdout: BTreeSet<&String> = b.dataset.split.validation.iter().collect();
    let mut used: BTreeMap<&String, &String> = BTreeMap::new();
    let mut labelers: BTreeSet<&String> = BTreeSet::new();
    for round in &b.rounds {
        for item in &round.allocation.item_ids {
            if let Some(prev) = used.insert(item, &round.id) {
                c.fail("freshness", format!("item {item} drawn by both {prev} and {}", round.id));
            }
            let in_holdout = holdout.contains(item);
            if in_holdout != (round.phase == PhaseKind::Validation) {
                c.fail("freshness", format!("{} drew {item} from the wrong side of the holdout split", round.id));
            }
        }
        if round.phase == PhaseKind::Validation {
            if let Some(a) = round.assignees.iter().find(|a| labelers.contains(a)) {
                c.fail("validation freshness", format!("{a} labeled an earlier round and validated in {}", round.id));
            }
        } else {
            labelers.extend(round.assignees.iter());
        }
    }
}

fn check_blindness(b: &AuditBundle, c: &mut Checker) {
    for read in &b.label_reads {
        let Some(round) = b.round(&read.round_id) else {
            c.fail("closure", format!("label read names missing round {}", read.round_id));
            continue;
        };
        if read.reader != read.target && closed_at(round).is_none_or(|t| read.seq < t) {
            c.fail(
                "blindness",
                format!("{} read {}'s labels in {} before labeling closed", read.reader, read.target, round.id),
            );
        }
    }
}

fn check_manifest(b: &AuditBundle, c: &mut Checker) {
    let manifest: BTreeMap<&String, &String> = b
        .transcript_manifest
        .iter()
        .map(|m| (&m.digest, &m.response_hash))
        .collect();
    for round in &b.rounds {
        for g in &round.generations {
            if manifest.get(&g.digest) != Some(&&g.response_hash) {
                c.fail("manifest", format!("{} generation for {} is not in the transcript manifest", round.id, g.item_id));
            }
        }
    }
}
