//! Versioned codebooks and prompt templates.
//!
//! Both artifact kinds live in version trees: every revision creates a new
//! draft version with a parent link and a stored structured diff, and
//! finalized versions never change again.

mod store;
mod template;
mod text_diff;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::ScaleDescriptor;

pub use store::ArtifactStore;
pub use template::referenced_slots;
pub use text_diff::{LineHunk, TextDiff};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodebookError {
    #[error("duplicate {0}")]
    Duplicate(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("substantive revisions require a deliberation")]
    MissingDeliberation,
    #[error("{0} is finalized and cannot change")]
    Immutable(ArtifactRef),
    #[error("readability-only revision changes assessment semantics: {0}")]
    ReadabilityViolation(String),
    #[error("cannot diff {0} against {1}")]
    Mismatch(ArtifactRef, ArtifactRef),
    #[error("{0} not found")]
    NotFound(ArtifactRef),
    #[error("no value for slot {{{{{0}}}}}")]
    MissingSlot(String),
    #[error("template references undeclared slot {0:?}")]
    UndeclaredSlot(String),
    #[error("stored diff does not apply: {0}")]
    DiffDoesNotApply(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Codebook,
    Prompt,
}

impl std::fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArtifactKind::Codebook => "codebook",
            ArtifactKind::Prompt => "prompt",
        })
    }
}

/// A specific version of a codebook or prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub kind: ArtifactKind,
    pub version: u32,
}

impl ArtifactRef {
    pub fn codebook(version: u32) -> Self {
        Self {
            kind: ArtifactKind::Codebook,
            version,
        }
    }

    pub fn prompt(version: u32) -> Self {
        Self {
            kind: ArtifactKind::Prompt,
            version,
        }
    }
}

impl std::fmt::Display for ArtifactRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} v{}", self.kind, self.version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Draft,
    Finalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionMeta {
    pub version: u32,
    pub parent: Option<u32>,
    pub status: Status,
}

impl VersionMeta {
    fn initial() -> Self {
        Self {
            version: 1,
            parent: None,
            status: Status::Draft,
        }
    }
}

/// One assessment criterion with its label scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: String,
    pub name: String,
    pub definition: String,
    pub scale: ScaleDescriptor,
}

impl Criterion {
    pub fn new(
        id: impl Into<String>,
        name: impl Into<String>,
        definition: impl Into<String>,
        scale: ScaleDescriptor,
    ) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            definition: definition.into(),
            scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    #[serde(flatten)]
    pub meta: VersionMeta,
    pub criteria: Vec<Criterion>,
}

impl Codebook {
    pub fn criterion(&self, id: &str) -> Option<&Criterion> {
        self.criteria.iter().find(|c| c.id == id)
    }

    pub fn scales(&self) -> BTreeMap<String, ScaleDescriptor> {
        self.criteria
            .iter()
            .map(|c| (c.id.clone(), c.scale.clone()))
            .collect()
    }

    /// Plain-text rendering shown to assessors next to their queue.
    pub fn render(&self) -> String {
        let mut out = format!("Codebook v{}\n", self.meta.version);
        for c in &self.criteria {
            out.push_str(&format!("\n## {} ({})\n{}\n", c.name, c.id, c.definition));
            out.push_str(&format!(
                "labels: {} | passing: {}\n",
                c.scale.values().join(", "),
                c.scale.passing().join(", ")
            ));
        }
        out
    }
}

fn validate_criteria(criteria: &[Criterion], finalized: bool) -> Result<(), CodebookError> {
    if criteria.is_empty() {
        return Err(CodebookError::Invalid("a codebook needs at least one criterion".into()));
    }
    for (i, c) in criteria.iter().enumerate() {
        if c.id.trim().is_empty() || c.name.trim().is_empty() {
            return Err(CodebookError::Invalid("criterion id and name must be non-empty".into()));
        }
        if finalized && c.definition.trim().is_empty() {
            return Err(CodebookError::Invalid(format!(
                "criterion {:?} has no definition",
                c.name
            )));
        }
        let earlier = &criteria[..i];
        if earlier.iter().any(|o| o.id == c.id) {
            return Err(CodebookError::Duplicate(format!("criterion id {:?}", c.id)));
        }
        if earlier.iter().any(|o| o.name.eq_ignore_ascii_case(&c.name)) {
            return Err(CodebookError::Duplicate(format!("criterion name {:?}", c.name)));
        }
    }
    Ok(())
}

/// Builds version 1 of a codebook in draft status.
pub fn create_codebook(criteria: Vec<Criterion>) -> Result<Codebook, CodebookError> {
    validate_criteria(&criteria, false)?;
    Ok(Codebook {
        meta: VersionMeta::initial(),
        criteria,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(flatten)]
    pub meta: VersionMeta,
    pub text: String,
    /// Declared slot names; every `{{slot}}` in `text` must be among them.
    pub slots: Vec<String>,
    pub task_kind: TaskKind,
}

impl PromptTemplate {
    /// Builds version 1 of a prompt template in draft status.
    pub fn new(
        text: impl Into<String>,
        slots: Vec<String>,
        task_kind: TaskKind,
    ) -> Result<Self, CodebookError> {
        let text = text.into();
        check_slots(&text, &slots)?;
        Ok(Self {
            meta: VersionMeta::initial(),
            text,
            slots,
            task_kind,
        })
    }
}

fn check_slots(text: &str, slots: &[String]) -> Result<(), CodebookError> {
    if text.trim().is_empty() {
        return Err(CodebookError::Invalid("prompt text is empty".into()));
    }
    for s in referenced_slots(text) {
        if !slots.contains(&s) {
            return Err(CodebookError::UndeclaredSlot(s));
        }
    }
    Ok(())
}

/// Fills the template's slots from `payload`. Keys not referenced by the
/// template are ignored.
pub fn render_prompt(
    template: &PromptTemplate,
    payload: &BTreeMap<String, String>,
) -> Result<String, CodebookError> {
    template::render(&template.text, payload)
}

/// Requested edits to a codebook.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CodebookChanges {
    /// Replaces criteria with matching ids in place; others are appended.
    #[serde(default)]
    pub upsert: Vec<Criterion>,
    /// Criterion ids to drop.
    #[serde(default)]
    pub remove: Vec<String>,
}

/// Requested edits to a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptChanges {
    pub text: String,
    /// New slot declarations; `None` keeps the current ones.
    #[serde(default)]
    pub slots: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "artifact", rename_all = "snake_case")]
pub enum Changes {
    Codebook(CodebookChanges),
    Prompt(PromptChanges),
}

impl Changes {
    pub fn kind(&self) -> ArtifactKind {
        match self {
            Changes::Codebook(_) => ArtifactKind::Codebook,
            Changes::Prompt(_) => ArtifactKind::Prompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionChange {
    pub id: String,
    pub before: Criterion,
    pub after: Criterion,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CodebookDiff {
    pub added: Vec<Criterion>,
    pub removed: Vec<Criterion>,
    pub changed: Vec<CriterionChange>,
    /// Final criterion order, present only when it differs from what the
    /// edits alone produce.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<String>>,
}

impl CodebookDiff {
    pub fn between(old: &[Criterion], new: &[Criterion]) -> Self {
        let find = |list: &[Criterion], id: &str| list.iter().find(|c| c.id == id).cloned();
        let added: Vec<Criterion> = new
            .iter()
            .filter(|c| find(old, &c.id).is_none())
            .cloned()
            .collect();
        let removed: Vec<Criterion> = old
            .iter()
            .filter(|c| find(new, &c.id).is_none())
            .cloned()
            .collect();
        let changed = old
            .iter()
            .filter_map(|before| {
                let after = find(new, &before.id)?;
                (after != *before).then(|| CriterionChange {
                    id: before.id.clone(),
                    before: before.clone(),
                    after,
                })
            })
            .collect();
        let mut diff = CodebookDiff {
            added,
            removed,
            changed,
            order: None,
        };
        let naive: Vec<String> = diff
            .apply_unordered(old)
            .into_iter()
            .map(|c| c.id)
            .collect();
        let target: Vec<String> = new.iter().map(|c| c.id.clone()).collect();
        if naive != target {
            diff.order = Some(target);
        }
        diff
    }

    fn apply_unordered(&self, old: &[Criterion]) -> Vec<Criterion> {
        let mut out: Vec<Criterion> = old
            .iter()
            .filter(|c| !self.removed.iter().any(|r| r.id == c.id))
            .map(|c| {
                self.changed
                    .iter()
                    .find(|ch| ch.id == c.id)
                    .map_or_else(|| c.clone(), |ch| ch.after.clone())
            })
            .collect();
        out.extend(self.added.iter().cloned());
        out
    }

    pub fn apply(&self, old: &[Criterion]) -> Result<Vec<Criterion>, CodebookError> {
        for ch in &self.changed {
            if !old.iter().any(|c| *c == ch.before) {
                return Err(CodebookError::DiffDoesNotApply(format!(
                    "criterion {:?} differs from the recorded base",
                    ch.id
                )));
            }
        }
        let mut out = self.apply_unordered(old);
        if let Some(order) = &self.order {
            let mut ordered = Vec::with_capacity(order.len());
            for id in order {
                let pos = out.iter().position(|c| &c.id == id).ok_or_else(|| {
                    CodebookError::DiffDoesNotApply(format!("order names unknown criterion {id:?}"))
                })?;
                ordered.push(out.remove(pos));
            }
            if !out.is_empty() {
                return Err(CodebookError::DiffDoesNotApply("order omits criteria".into()));
            }
            out = ordered;
        }
        Ok(out)
    }

    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty() && self.order.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptDiff {
    pub text: TextDiff,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<Vec<String>>,
}

impl PromptDiff {
    pub fn between(old: &PromptTemplate, new: &PromptTemplate) -> Self {
        Self {
            text: TextDiff::between(&old.text, &new.text),
            slots: (old.slots != new.slots).then(|| new.slots.clone()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_identity() && self.slots.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "artifact", rename_all = "snake_case")]
pub enum ArtifactDiff {
    Codebook(CodebookDiff),
    Prompt(PromptDiff),
}

impl ArtifactDiff {
    pub fn is_empty(&self) -> bool {
        match self {
            ArtifactDiff::Codebook(d) => d.is_empty(),
            ArtifactDiff::Prompt(d) => d.is_empty(),
        }
    }

    pub fn render(&self) -> String {
        match self {
            ArtifactDiff::Codebook(d) => {
                let mut out = String::new();
                for c in &d.added {
                    out.push_str(&format!("+ criterion {} ({})\n", c.name, c.id));
                }
                for c in &d.removed {
                    out.push_str(&format!("- criterion {} ({})\n", c.name, c.id));
                }
                for ch in &d.changed {
                    out.push_str(&format!("~ criterion {}\n", ch.id));
                    if ch.before.definition != ch.after.definition {
                        out.push_str(&format!("  - {}\n  + {}\n", ch.before.definition, ch.after.definition));
                    }
                    if ch.before.name != ch.after.name {
                        out.push_str(&format!("  name: {} -> {}\n", ch.before.name, ch.after.name));
                    }
                    if ch.before.scale != ch.after.scale {
                        out.push_str("  scale changed\n");
                    }
                }
                if let Some(order) = &d.order {
                    out.push_str(&format!("order: {}\n", order.join(", ")));
                }
                out
            }
            ArtifactDiff::Prompt(d) => {
                let mut out = d.text.render();
                if let Some(slots) = &d.slots {
                    out.push_str(&format!("slots: {}\n", slots.join(", ")));
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevisionKind {
    Substantive,
    ReadabilityOnly,
}

/// A stored transition between two versions of one artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub id: String,
    pub artifact: ArtifactKind,
    pub from_version: u32,
    pub to_version: u32,
    pub diff: ArtifactDiff,
    pub kind: RevisionKind,
    pub deliberation_id: Option<String>,
    /// Readability-only prompt edits cannot be machine-checked; they are
    /// accepted on the lead's authority and carry this flag into the audit.
    #[serde(default)]
    pub unverified_readability: bool,
}

/// Minutes of a discussion that resolved disagreements in one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliberationRecord {
    pub id: String,
    pub round_id: String,
    pub participants: Vec<String>,
    pub disagreed_item_refs: Vec<String>,
    pub notes: String,
    pub resolution: String,
    #[serde(default)]
    pub lead: Option<String>,
}

impl DeliberationRecord {
    pub fn validate(&self) -> Result<(), CodebookError> {
        let mut people = self.participants.clone();
        people.sort();
        people.dedup();
        if people.len() < 2 {
            return Err(CodebookError::Invalid(
                "a deliberation needs at least two distinct participants".into(),
            ));
        }
        if self.disagreed_item_refs.is_empty() {
            return Err(CodebookError::Invalid(
                "a deliberation must reference at least one disagreed item".into(),
            ));
        }
        if self.notes.trim().is_empty() {
            return Err(CodebookError::Invalid("deliberation notes are empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crit(id: &str, def: &str) -> Criterion {
        Criterion::new(id, id, def, ScaleDescriptor::binary(["no", "yes"], ["yes"]))
    }

    #[test]
    fn create_rejects_empty_and_duplicates() {
        assert!(matches!(create_codebook(vec![]), Err(CodebookError::Invalid(_))));
        let mut b = crit("b", "x");
        b.name = "A".into();
        assert!(matches!(
            create_codebook(vec![crit("a", "x"), b]),
            Err(CodebookError::Duplicate(_))
        ));
    }

    #[test]
    fn undeclared_slot_rejected() {
        assert_eq!(
            PromptTemplate::new("{{q}} and {{r}}", vec!["q".into()], TaskKind::Generation),
            Err(CodebookError::UndeclaredSlot("r".into()))
        );
    }

    #[test]
    fn codebook_diff_roundtrip_with_reorder() {
        let old = vec![crit("a", "1"), crit("b", "2"), crit("c", "3")];
        let new = vec![crit("c", "3"), crit("d", "4"), crit("a", "1!")];
        let d = CodebookDiff::between(&old, &new);
        assert_eq!(d.added.len(), 1);
        assert_eq!(d.removed.len(), 1);
        assert_eq!(d.changed.len(), 1);
        assert!(d.order.is_some());
        assert_eq!(d.apply(&old).unwrap(), new);
        assert!(CodebookDiff::between(&old, &old).is_empty());
    }

    #[test]
    fn deliberation_validation() {
        let mut d = DeliberationRecord {
            id: "d1".into(),
            round_id: "r1".into(),
            participants: vec!["A".into(), "B".into()],
            disagreed_item_refs: vec!["u1".into()],
            notes: "talked".into(),
            resolution: "firmed up".into(),
            lead: None,
        };
        assert!(d.validate().is_ok());
        d.participants = vec!["A".into(), "A".into()];
        assert!(d.validate().is_err());
        d.participants = vec!["A".into(), "B".into()];
        d.disagreed_item_refs.clear();
        assert!(d.validate().is_err());
    }
}
