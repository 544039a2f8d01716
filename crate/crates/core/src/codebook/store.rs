use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    check_slots, validate_criteria, ArtifactDiff, ArtifactKind, ArtifactRef, Changes, Codebook,
    CodebookChanges, CodebookDiff, CodebookError, Criterion, PromptChanges, PromptDiff,
    PromptTemplate, Revision, RevisionKind, Status, VersionMeta,
};

/// Append-only store of codebook and prompt versions plus the revisions
/// linking them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactStore {
    codebooks: BTreeMap<u32, Codebook>,
    prompts: BTreeMap<u32, PromptTemplate>,
    revisions: Vec<Revision>,
}

impl ArtifactStore {
    pub fn new(codebook: Codebook, prompt: PromptTemplate) -> Result<Self, CodebookError> {
        if codebook.meta != VersionMeta::initial() || prompt.meta != VersionMeta::initial() {
            return Err(CodebookError::Invalid(
                "initial artifacts must be draft version 1 without a parent".into(),
            ));
        }
        validate_criteria(&codebook.criteria, false)?;
        check_slots(&prompt.text, &prompt.slots)?;
        Ok(Self {
            codebooks: BTreeMap::from([(1, codebook)]),
            prompts: BTreeMap::from([(1, prompt)]),
            revisions: Vec::new(),
        })
    }

    pub fn codebook(&self, version: u32) -> Result<&Codebook, CodebookError> {
        self.codebooks
            .get(&version)
            .ok_or(CodebookError::NotFound(ArtifactRef::codebook(version)))
    }

    pub fn prompt(&self, version: u32) -> Result<&PromptTemplate, CodebookError> {
        self.prompts
            .get(&version)
            .ok_or(CodebookError::NotFound(ArtifactRef::prompt(version)))
    }

    pub fn codebooks(&self) -> impl Iterator<Item = &Codebook> {
        self.codebooks.values()
    }

    pub fn prompts(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.prompts.values()
    }

    pub fn revisions(&self) -> &[Revision] {
        &self.revisions
    }

    pub fn revision(&self, id: &str) -> Option<&Revision> {
        self.revisions.iter().find(|r| r.id == id)
    }

    fn meta(&self, at: ArtifactRef) -> Result<&VersionMeta, CodebookError> {
        Ok(match at.kind {
            ArtifactKind::Codebook => &self.codebook(at.version)?.meta,
            ArtifactKind::Prompt => &self.prompt(at.version)?.meta,
        })
    }

    pub fn status(&self, at: ArtifactRef) -> Result<Status, CodebookError> {
        Ok(self.meta(at)?.status)
    }

    fn next_version(&self, kind: ArtifactKind) -> u32 {
        let last = match kind {
            ArtifactKind::Codebook => self.codebooks.keys().next_back(),
            ArtifactKind::Prompt => self.prompts.keys().next_back(),
        };
        last.copied().unwrap_or(0) + 1
    }

    fn has_children(&self, at: ArtifactRef) -> bool {
        self.revisions
            .iter()
            .any(|r| r.artifact == at.kind && r.from_version == at.version)
    }

    /// Creates a new draft version derived from `base`.
    ///
    /// Substantive revisions need a deliberation id. Readability-only
    /// codebook revisions may reword names and definitions but must keep
    /// every criterion and its scale; readability-only prompt revisions are
    /// accepted and flagged as unverified.
    pub fn revise(
        &mut self,
        base: ArtifactRef,
        changes: &Changes,
        kind: RevisionKind,
        deliberation_id: Option<&str>,
    ) -> Result<&Revision, CodebookError> {
        if changes.kind() != base.kind {
            return Err(CodebookError::Invalid(format!(
                "{} changes cannot revise {base}",
                changes.kind()
            )));
        }
        if kind == RevisionKind::Substantive && deliberation_id.is_none() {
            return Err(CodebookError::MissingDeliberation);
        }
        let version = self.next_version(base.kind);
        let meta = VersionMeta {
            version,
            parent: Some(base.version),
            status: Status::Draft,
        };
        let (diff, unverified) = match changes {
            Changes::Codebook(c) => {
                let old = self.codebook(base.version)?;
                let criteria = apply_codebook_changes(&old.criteria, c)?;
                if kind == RevisionKind::ReadabilityOnly {
                    check_readability(&old.criteria, &criteria)?;
                }
                let diff = CodebookDiff::between(&old.criteria, &criteria);
                self.codebooks.insert(version, Codebook { meta, criteria });
                (ArtifactDiff::Codebook(diff), false)
            }
            Changes::Prompt(p) => {
                let old = self.prompt(base.version)?;
                let next = prompt_with_changes(old, p, meta)?;
                let diff = PromptDiff::between(old, &next);
                self.prompts.insert(version, next);
                (ArtifactDiff::Prompt(diff), kind == RevisionKind::ReadabilityOnly)
            }
        };
        self.revisions.push(Revision {
            id: format!("{}-v{}-v{}", base.kind, base.version, version),
            artifact: base.kind,
            from_version: base.version,
            to_version: version,
            diff,
            kind,
            deliberation_id: deliberation_id.map(str::to_string),
            unverified_readability: unverified,
        });
        Ok(self.revisions.last().expect("just pushed"))
    }

    /// Edits a draft version in place. Only drafts that no revision derives
    /// from may be amended.
    pub fn amend(&mut self, at: ArtifactRef, changes: &Changes) -> Result<(), CodebookError> {
        if self.status(at)? == Status::Finalized {
            return Err(CodebookError::Immutable(at));
        }
        if self.has_children(at) {
            return Err(CodebookError::Invalid(format!("{at} already has derived versions")));
        }
        match (changes, at.kind) {
            (Changes::Codebook(c), ArtifactKind::Codebook) => {
                let cb = self.codebooks.get_mut(&at.version).expect("status checked");
                cb.criteria = apply_codebook_changes(&cb.criteria, c)?;
            }
            (Changes::Prompt(p), ArtifactKind::Prompt) => {
                let old = self.prompt(at.version)?;
                let next = prompt_with_changes(old, p, old.meta.clone())?;
                self.prompts.insert(at.version, next);
            }
            _ => {
                return Err(CodebookError::Invalid(format!(
                    "{} changes cannot amend {at}",
                    changes.kind()
                )))
            }
        }
        Ok(())
    }

    pub fn finalize(&mut self, at: ArtifactRef) -> Result<(), CodebookError> {
        match at.kind {
            ArtifactKind::Codebook => {
                let cb = self
                    .codebooks
                    .get_mut(&at.version)
                    .ok_or(CodebookError::NotFound(at))?;
                if cb.meta.status == Status::Finalized {
                    return Err(CodebookError::Immutable(at));
                }
                validate_criteria(&cb.criteria, true)?;
                cb.meta.status = Status::Finalized;
            }
            ArtifactKind::Prompt => {
                let p = self
                    .prompts
                    .get_mut(&at.version)
                    .ok_or(CodebookError::NotFound(at))?;
                if p.meta.status == Status::Finalized {
                    return Err(CodebookError::Immutable(at));
                }
                p.meta.status = Status::Finalized;
            }
        }
        Ok(())
    }

    /// Structured diff from `a` to `b`; deterministic, and empty when `a == b`.
    pub fn diff(&self, a: ArtifactRef, b: ArtifactRef) -> Result<ArtifactDiff, CodebookError> {
        if a.kind != b.kind {
            return Err(CodebookError::Mismatch(a, b));
        }
        Ok(match a.kind {
            ArtifactKind::Codebook => ArtifactDiff::Codebook(CodebookDiff::between(
                &self.codebook(a.version)?.criteria,
                &self.codebook(b.version)?.criteria,
            )),
            ArtifactKind::Prompt => {
                ArtifactDiff::Prompt(PromptDiff::between(self.prompt(a.version)?, self.prompt(b.version)?))
            }
        })
    }

    /// Revisions leading from version 1 to `at`, oldest first.
    pub fn lineage(&self, at: ArtifactRef) -> Result<Vec<&Revision>, CodebookError> {
        let mut chain = Vec::new();
        let mut version = at.version;
        self.meta(at)?;
        while version != 1 {
            let rev = self
                .revisions
                .iter()
                .find(|r| r.artifact == at.kind && r.to_version == version)
                .ok_or_else(|| {
                    CodebookError::DiffDoesNotApply(format!("no revision produces {at}"))
                })?;
            chain.push(rev);
            version = rev.from_version;
        }
        chain.reverse();
        Ok(chain)
    }

    /// Rebuilds the criteria of a codebook version by replaying stored diffs from v1.
    pub fn replay_codebook(&self, version: u32) -> Result<Vec<Criterion>, CodebookError> {
        let mut criteria = self.codebook(1)?.criteria.clone();
        for rev in self.lineage(ArtifactRef::codebook(version))? {
            match &rev.diff {
                ArtifactDiff::Codebook(d) => criteria = d.apply(&criteria)?,
                ArtifactDiff::Prompt(_) => {
                    return Err(CodebookError::DiffDoesNotApply(format!("{} is not a codebook diff", rev.id)))
                }
            }
        }
        Ok(criteria)
    }

    /// Rebuilds the text and slots of a prompt version by replaying stored diffs from v1.
    pub fn replay_prompt(&self, version: u32) -> Result<(String, Vec<String>), CodebookError> {
        let first = self.prompt(1)?;
        let (mut text, mut slots) = (first.text.clone(), first.slots.clone());
        for rev in self.lineage(ArtifactRef::prompt(version))? {
            match &rev.diff {
                ArtifactDiff::Prompt(d) => {
                    text = d.text.apply(&text)?;
                    if let Some(s) = &d.slots {
                        slots = s.clone();
                    }
                }
                ArtifactDiff::Codebook(_) => {
                    return Err(CodebookError::DiffDoesNotApply(format!("{} is not a prompt diff", rev.id)))
                }
            }
        }
        Ok((text, slots))
    }

    /// Rebuilds a store from its parts, e.g. when loading an audit bundle.
    pub fn from_parts(
        codebooks: Vec<Codebook>,
        prompts: Vec<PromptTemplate>,
        revisions: Vec<Revision>,
    ) -> Self {
        Self {
            codebooks: codebooks.into_iter().map(|c| (c.meta.version, c)).collect(),
            prompts: prompts.into_iter().map(|p| (p.meta.version, p)).collect(),
            revisions,
        }
    }
}

fn apply_codebook_changes(
    old: &[Criterion],
    changes: &CodebookChanges,
) -> Result<Vec<Criterion>, CodebookError> {
    for id in &changes.remove {
        if !old.iter().any(|c| &c.id == id) {
            return Err(CodebookError::Invalid(format!("cannot remove unknown criterion {id:?}")));
        }
    }
    let mut out: Vec<Criterion> = old
        .iter()
        .filter(|c| !changes.remove.contains(&c.id))
        .cloned()
        .collect();
    for c in &changes.upsert {
        match out.iter_mut().find(|o| o.id == c.id) {
            Some(slot) => *slot = c.clone(),
            None => out.push(c.clone()),
        }
    }
    validate_criteria(&out, false)?;
    Ok(out)
}

fn check_readability(old: &[Criterion], new: &[Criterion]) -> Result<(), CodebookError> {
    if old.len() != new.len() {
        return Err(CodebookError::ReadabilityViolation("criteria added or removed".into()));
    }
    for (a, b) in old.iter().zip(new) {
        if a.id != b.id {
            return Err(CodebookError::ReadabilityViolation("criteria reordered or replaced".into()));
        }
        if a.scale != b.scale {
            return Err(CodebookError::ReadabilityViolation(format!(
                "scale or passing subset of {:?} changed",
                a.id
            )));
        }
    }
    Ok(())
}

fn prompt_with_changes(
    old: &PromptTemplate,
    changes: &PromptChanges,
    meta: VersionMeta,
) -> Result<PromptTemplate, CodebookError> {
    let slots = changes.slots.clone().unwrap_or_else(|| old.slots.clone());
    check_slots(&changes.text, &slots)?;
    Ok(PromptTemplate {
        meta,
        text: changes.text.clone(),
        slots,
        task_kind: old.task_kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{create_codebook, TaskKind};
    use crate::metrics::ScaleDescriptor;

    fn relevance(def: &str, passing: &[&str]) -> Criterion {
        Criterion::new(
            "relevance",
            "relevance",
            def,
            ScaleDescriptor::new(
                crate::metrics::ScaleKind::Ordinal,
                ["low", "medium", "high"],
                passing.to_vec(),
            )
            .unwrap(),
        )
    }

    fn store() -> ArtifactStore {
        let cb = create_codebook(vec![relevance("same meaning", &["medium", "high"])]).unwrap();
        let p = PromptTemplate::new(
            "Generate five different questions for the following question.\n{{question}}\n",
            vec!["question".into()],
            TaskKind::Generation,
        )
        .unwrap();
        ArtifactStore::new(cb, p).unwrap()
    }

    #[test]
    fn substantive_revision_needs_deliberation() {
        let mut s = store();
        let ch = Changes::Codebook(CodebookChanges {
            upsert: vec![relevance("same meaning and same answer", &["medium", "high"])],
            remove: vec![],
        });
        assert_eq!(
            s.revise(ArtifactRef::codebook(1), &ch, RevisionKind::Substantive, None)
                .unwrap_err(),
            CodebookError::MissingDeliberation
        );
        let rev = s
            .revise(ArtifactRef::codebook(1), &ch, RevisionKind::Substantive, Some("d7"))
            .unwrap()
            .clone();
        assert_eq!(rev.to_version, 2);
        match &rev.diff {
            ArtifactDiff::Codebook(d) => assert_eq!(d.changed.len(), 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn readability_cannot_touch_passing_set() {
        let mut s = store();
        let ch = Changes::Codebook(CodebookChanges {
            upsert: vec![relevance("same meaning", &["high"])],
            remove: vec![],
        });
        assert!(matches!(
            s.revise(ArtifactRef::codebook(1), &ch, RevisionKind::ReadabilityOnly, None),
            Err(CodebookError::ReadabilityViolation(_))
        ));
    }

    #[test]
    fn finalize_then_readability_revision() {
        let mut s = store();
        s.finalize(ArtifactRef::codebook(1)).unwrap();
        assert_eq!(
            s.finalize(ArtifactRef::codebook(1)),
            Err(CodebookError::Immutable(ArtifactRef::codebook(1)))
        );
        let reword = Changes::Codebook(CodebookChanges {
            upsert: vec![relevance("Shares the meaning of the source question.", &["medium", "high"])],
            remove: vec![],
        });
        assert_eq!(
            s.amend(ArtifactRef::codebook(1), &reword),
            Err(CodebookError::Immutable(ArtifactRef::codebook(1)))
        );
        let rev = s
            .revise(ArtifactRef::codebook(1), &reword, RevisionKind::ReadabilityOnly, None)
            .unwrap();
        assert_eq!(rev.kind, RevisionKind::ReadabilityOnly);
        assert_eq!(s.status(ArtifactRef::codebook(2)).unwrap(), Status::Draft);
    }

    #[test]
    fn prompt_revision_records_hunks_and_replays() {
        let mut s = store();
        let text = "Generate five different questions for the following question.\nThe questions audit an LLM for consistency.\n{{question}}\n";
        let rev = s
            .revise(
                ArtifactRef::prompt(1),
                &Changes::Prompt(PromptChanges { text: text.into(), slots: None }),
                RevisionKind::Substantive,
                Some("d1"),
            )
            .unwrap()
            .clone();
        match &rev.diff {
            ArtifactDiff::Prompt(d) => assert!(!d.text.is_identity()),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.replay_prompt(2).unwrap().0, text);
        assert!(s.diff(ArtifactRef::prompt(1), ArtifactRef::prompt(1)).unwrap().is_empty());
        assert_eq!(
            s.diff(ArtifactRef::prompt(1), ArtifactRef::codebook(1)),
            Err(CodebookError::Mismatch(ArtifactRef::prompt(1), ArtifactRef::codebook(1)))
        );
    }

    #[test]
    fn adding_a_criterion_shows_as_added() {
        let mut s = store();
        let div = Criterion::new("diversity", "diversity", "differs in form", ScaleDescriptor::binary(["no", "yes"], ["yes"]));
        s.revise(
            ArtifactRef::codebook(1),
            &Changes::Codebook(CodebookChanges { upsert: vec![div.clone()], remove: vec![] }),
            RevisionKind::Substantive,
            Some("d1"),
        )
        .unwrap();
        match s.diff(ArtifactRef::codebook(1), ArtifactRef::codebook(2)).unwrap() {
            ArtifactDiff::Codebook(d) => {
                assert_eq!(d.added, vec![div]);
                assert!(d.removed.is_empty() && d.changed.is_empty());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_tree_allows_branching_with_increasing_ids() {
        let mut s = store();
        let ch = |d: &str| {
            Changes::Codebook(CodebookChanges { upsert: vec![relevance(d, &["medium", "high"])], remove: vec![] })
        };
        s.revise(ArtifactRef::codebook(1), &ch("x"), RevisionKind::Substantive, Some("d")).unwrap();
        s.revise(ArtifactRef::codebook(1), &ch("y"), RevisionKind::Substantive, Some("d")).unwrap();
        s.revise(ArtifactRef::codebook(2), &ch("z"), RevisionKind::Substantive, Some("d")).unwrap();
        for v in 1..=4 {
            assert_eq!(s.replay_codebook(v).unwrap(), s.codebook(v).unwrap().criteria);
        }
        assert_eq!(s.codebook(3).unwrap().meta.parent, Some(1));
        assert_eq!(s.codebook(4).unwrap().meta.parent, Some(2));
    }
}
