use std::fmt::Write;

use super::{verify, AuditBundle, AuditError, BundleRound};
use crate::metrics::{Coefficient, CriterionAgreement, FailedCondition, PairKind};
use crate::protocol::{Outcome, PhaseKind};

fn coef(c: &Coefficient) -> String {
    match c.value() {
        Some(v) => format!("{v:.3}"),
        None => "undefined".into(),
    }
}

fn agreement_table(out: &mut String, rows: &[(&String, &CriterionAgreement)]) {
    out.push_str("| criterion | alpha | kappa | percent agreement | items used |\n");
    out.push_str("|---|---|---|---|---|\n");
    for (id, a) in rows {
        let kappa = a.cohens_kappa.as_ref().map_or("see pairs".to_string(), coef);
        let _ = writeln!(
            out,
            "| {id} | {} | {kappa} | {} | {} |",
            coef(&a.krippendorff_alpha),
            coef(&a.percent_agreement),
            a.n_items_used
        );
    }
}

fn pair_kind(k: PairKind) -> &'static str {
    match k {
        PairKind::HumanHuman => "human-human",
        PairKind::HumanModel => "human-model",
        PairKind::ModelModel => "model-model",
    }
}

fn outcome_word(o: Outcome) -> &'static str {
    match o {
        Outcome::Open => "open",
        Outcome::GatedFail => "gated-fail",
        Outcome::GatedPass => "gated-pass",
    }
}

fn render_round(out: &mut String, b: &AuditBundle, r: &BundleRound) {
    let _ = writeln!(out, "### {} ({}, round {})\n", r.id, r.phase, r.ordinal);
    let _ = writeln!(
        out,
        "Codebook v{}, prompt v{}. {} items, {} units, assessors: {}.\n",
        r.codebook_version,
        r.prompt_version,
        r.allocation.item_ids.len(),
        r.units.len(),
        r.assignees.join(", ")
    );
    if !r.failures.is_empty() {
        let _ = writeln!(out, "{} items failed generation.\n", r.failures.len());
    }
    let Some(g) = &r.gate else {
        let _ = writeln!(out, "Outcome: {}.\n", outcome_word(r.outcome));
        return;
    };
    let rows: Vec<_> = g.report.criteria.iter().collect();
    agreement_table(out, &rows);
    out.push('\n');
    if let Some(p) = g.pass_rate {
        let _ = writeln!(out, "Consensus pass-rate: {p:.2}.\n");
    }
    if let Some(mixed) = &g.mixed_report {
        out.push_str("Humans and models together:\n\n");
        let rows: Vec<_> = mixed.criteria.iter().collect();
        agreement_table(out, &rows);
        out.push_str("\n| pair | kind | kappa | percent agreement |\n|---|---|---|---|\n");
        for a in mixed.criteria.values() {
            for p in &a.pairwise {
                let _ = writeln!(
                    out,
                    "| {} / {} | {} | {} | {} |",
                    p.rater_a,
                    p.rater_b,
                    pair_kind(p.kind),
                    coef(&p.cohens_kappa),
                    coef(&p.percent_agreement)
                );
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "Outcome: {}", outcome_word(r.outcome));
    let failed: Vec<String> = g
        .verdict
        .failed_conditions
        .iter()
        .map(|f| match f {
            FailedCondition::Icr { criterion, observed, threshold } => format!(
                "ICR on {criterion} {} < {threshold:.2}",
                observed.map_or("undefined".into(), |v| format!("{v:.3}"))
            ),
            FailedCondition::PassRate { observed, threshold } => {
                format!("pass-rate {observed:.2} < {threshold:.2}")
            }
        })
        .collect();
    if failed.is_empty() {
        out.push_str(".\n\n");
    } else {
        let _ = writeln!(out, " ({}).\n", failed.join("; "));
    }
    if let Some(to) = g.routed_to {
        let _ = writeln!(out, "Correction routed to {to}.\n");
    }
    let _ = writeln!(out, "Units with disagreements: {}.\n", g.disagreements.len());
    for id in &r.deliberation_ids {
        if let Some(d) = b.deliberations.iter().find(|d| &d.id == id) {
            let _ = writeln!(out, "Deliberation {} with {}:\n", d.id, d.participants.join(", "));
            for line in d.notes.lines() {
                let _ = writeln!(out, "> {line}");
            }
            let _ = writeln!(out, "\nResolution: {}\n", d.resolution);
        }
    }
    if let Some(rev_id) = &r.resolution {
        if let Some(rev) = b.revisions.iter().find(|x| &x.id == rev_id) {
            let _ = writeln!(out, "Revision {} ({} v{} to v{}):\n", rev.id, rev.artifact, rev.from_version, rev.to_version);
            let _ = writeln!(out, "```diff\n{}```\n", rev.diff.render());
        }
    }
}

/// Chronological Markdown narrative of a bundle. Refuses to render a bundle
/// that does not verify.
pub fn render_report(bundle: &AuditBundle) -> Result<String, AuditError> {
    let violations = verify(bundle);
    if !violations.is_empty() {
        return Err(AuditError::RefusesToRender(violations));
    }
    let b = bundle;
    let mut out = String::new();
    let _ = writeln!(out, "# Audit report: {}\n", b.project.id);
    let _ = writeln!(out, "Status: {:?}. Task: {:?}.\n", b.status, b.project.task_kind);
    let _ = writeln!(
        out,
        "Dataset {} ({} items, sha256 {}); {} items held out for validation.\n",
        b.dataset.id,
        b.dataset.n_items,
        b.dataset.content_hash,
        b.dataset.split.validation.len()
    );
    let models: Vec<String> = b.project.models.iter().map(|m| m.rater_id()).collect();
    let _ = writeln!(out, "Models: {}.\n", models.join(", "));
    let gate = &b.project.gate;
    let _ = writeln!(
        out,
        "Gate: ICR >= {:.2} ({:?}), pass-rate >= {:.2}, batch {} items, validation {}.\n",
        gate.icr_threshold,
        gate.policy.icr_metric,
        gate.pass_rate_threshold,
        gate.batch_size,
        if gate.validation_enabled { "enabled" } else { "disabled" }
    );
    let _ = writeln!(out, "Assessors: {}.", b.project.assessors.join(", "));
    if !b.project.validation_assessors.is_empty() {
        let _ = writeln!(out, "Validation assessors: {}.", b.project.validation_assessors.join(", "));
    }
    if let Some(lead) = &b.project.lead {
        let _ = writeln!(out, "Lead: {lead}.");
    }
    out.push('\n');

    if b.rounds.is_empty() {
        out.push_str("No rounds have been run.\n");
        return Ok(out);
    }

    out.push_str("## Phases\n\n| phase | rounds | finalized |\n|---|---|---|\n");
    for v in &b.phases {
        let fin = v.finalized.map_or("-".to_string(), |a| a.to_string());
        let _ = writeln!(out, "| {} | {} | {fin} |", v.phase, v.rounds.len());
    }
    out.push('\n');

    let rates: Vec<String> = b
        .rounds
        .iter()
        .filter(|r| r.phase == PhaseKind::PromptDevelopment)
        .filter_map(|r| r.gate.as_ref()?.pass_rate.map(|p| format!("{p:.2}")))
        .collect();
    if !rates.is_empty() {
        let _ = writeln!(out, "Prompt development pass-rates: {}.\n", rates.join(" → "));
    }

    out.push_str("## Rounds\n\n");
    for r in &b.rounds {
        render_round(&mut out, b, r);
    }

    let readability: Vec<_> = b.phases.iter().filter_map(|v| v.readability_revision.as_ref()).collect();
    if !readability.is_empty() {
        out.push_str("## Readability edits at finalization\n\n");
        for id in readability {
            if let Some(rev) = b.revisions.iter().find(|r| &r.id == id) {
                let flag = if rev.unverified_readability { " (accepted on the lead's authority)" } else { "" };
                let _ = writeln!(out, "{}{flag}:\n\n```diff\n{}```\n", rev.id, rev.diff.render());
            }
        }
    }

    out.push_str("## Prompt versions\n\n");
    for p in &b.prompts {
        let parent = p.meta.parent.map_or(String::new(), |v| format!(", from v{v}"));
        let _ = writeln!(out, "### v{} ({:?}{parent})\n\n```text\n{}\n```\n", p.meta.version, p.meta.status, p.text.trim_end());
    }

    if let Some(f) = &b.final_artifacts {
        out.push_str("## Final artifacts\n\n");
        let _ = writeln!(out, "```text\n{}```\n", f.codebook_text);
        let _ = writeln!(out, "Final prompt: v{}.\n", f.prompt_version);
    }

    if !b.productions.is_empty() {
        out.push_str("## Production runs\n\n");
        for p in &b.productions {
            let _ = writeln!(
                out,
                "- {}: {} outputs, {} failures, prompt v{}, codebook v{}, model {}",
                p.id,
                p.outputs.len(),
                p.failures.len(),
                p.prompt_version,
                p.codebook_version,
                p.model.rater_id()
            );
        }
        out.push('\n');
    }
    Ok(out)
}
