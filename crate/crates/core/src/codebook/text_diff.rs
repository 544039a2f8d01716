use serde::{Deserialize, Serialize};
use similar::{DiffOp, TextDiff as Differ};

use super::CodebookError;

/// One hunk of a line diff. Lines keep their terminators so that applying a
/// diff reproduces the target text byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LineHunk {
    Keep { lines: usize },
    Delete { lines: Vec<String> },
    Insert { lines: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TextDiff {
    pub hunks: Vec<LineHunk>,
}

fn split_lines(text: &str) -> Vec<&str> {
    text.split_inclusive('\n').collect()
}

impl TextDiff {
    pub fn between(old: &str, new: &str) -> Self {
        let old_lines = split_lines(old);
        let new_lines = split_lines(new);
        let diff = Differ::configure().diff_slices(&old_lines, &new_lines);
        let mut hunks = Vec::new();
        let owned = |s: &[&str]| s.iter().map(|l| l.to_string()).collect::<Vec<_>>();
        for op in diff.ops() {
            match *op {
                DiffOp::Equal { len, .. } => hunks.push(LineHunk::Keep { lines: len }),
                DiffOp::Delete {
                    old_index, old_len, ..
                } => hunks.push(LineHunk::Delete {
                    lines: owned(&old_lines[old_index..old_index + old_len]),
                }),
                DiffOp::Insert {
                    new_index, new_len, ..
                } => hunks.push(LineHunk::Insert {
                    lines: owned(&new_lines[new_index..new_index + new_len]),
                }),
                DiffOp::Replace {
                    old_index,
                    old_len,
                    new_index,
                    new_len,
                } => {
                    hunks.push(LineHunk::Delete {
                        lines: owned(&old_lines[old_index..old_index + old_len]),
                    });
                    hunks.push(LineHunk::Insert {
                        lines: owned(&new_lines[new_index..new_index + new_len]),
                    });
                }
            }
        }
        TextDiff { hunks }
    }

    /// True when the diff changes nothing.
    pub fn is_identity(&self) -> bool {
        self.hunks.iter().all(|h| matches!(h, LineHunk::Keep { .. }))
    }

    pub fn apply(&self, old: &str) -> Result<String, CodebookError> {
        let lines = split_lines(old);
        let mut at = 0usize;
        let mut out = String::with_capacity(old.len());
        for hunk in &self.hunks {
            match hunk {
                LineHunk::Keep { lines: n } => {
                    let end = at + n;
                    if end > lines.len() {
                        return Err(CodebookError::DiffDoesNotApply("keep past end of text".into()));
                    }
                    lines[at..end].iter().for_each(|l| out.push_str(l));
                    at = end;
                }
                LineHunk::Delete { lines: gone } => {
                    for g in gone {
                        if lines.get(at) != Some(&g.as_str()) {
                            return Err(CodebookError::DiffDoesNotApply(format!(
                                "expected to delete {g:?}"
                            )));
                        }
                        at += 1;
                    }
                }
                LineHunk::Insert { lines: added } => added.iter().for_each(|l| out.push_str(l)),
            }
        }
        if at != lines.len() {
            return Err(CodebookError::DiffDoesNotApply("diff leaves trailing lines".into()));
        }
        Ok(out)
    }

    /// Unified-style rendering: unchanged runs collapsed, removed lines
    /// prefixed `-`, added lines `+`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for hunk in &self.hunks {
            match hunk {
                LineHunk::Keep { lines } => out.push_str(&format!("  ({lines} unchanged)\n")),
                LineHunk::Delete { lines } => {
                    for l in lines {
                        out.push_str(&format!("- {}\n", l.trim_end_matches('\n')));
                    }
                }
                LineHunk::Insert { lines } => {
                    for l in lines {
                        out.push_str(&format!("+ {}\n", l.trim_end_matches('\n')));
                    }
                }
            }
        }
        out
    }
}
