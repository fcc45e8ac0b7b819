//! Samples, tasks and task sequences.
//!
//! A [`Sample`] is stored in *marked* form: the token sequence already
//! contains one `[E1]` token immediately before the head entity and one
//! `[E2]` token immediately before the tail entity. Entity spans index into
//! the marked sequence.

mod jsonl;
mod synthetic;

pub use jsonl::{load_jsonl, parse_jsonl, write_jsonl};
pub use synthetic::{generate_synthetic_sequence, SyntheticConfig, SIGNATURE_TOKENS};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Vocabulary entry of the `[E1]` marker.
pub const HEAD_MARKER: TokenId = 0;
/// Vocabulary entry of the `[E2]` marker.
pub const TAIL_MARKER: TokenId = 1;

pub const HEAD_MARKER_TEXT: &str = "[E1]";
pub const TAIL_MARKER_TEXT: &str = "[E2]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityRole {
    Head,
    Tail,
}

impl EntityRole {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityRole::Head => "head",
            EntityRole::Tail => "tail",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: SampleId,
    pub tokens: Vec<TokenId>,
    pub head_marker_pos: usize,
    pub tail_marker_pos: usize,
    pub head_span: Range<usize>,
    pub tail_span: Range<usize>,
    pub relation: RelationId,
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

impl Sample {
    /// Builds a marked sample from a raw token sequence by inserting `[E1]`
    /// and `[E2]` at the starts of the head and tail spans.
    pub fn from_unmarked(
        id: SampleId,
        raw: &[TokenId],
        head: Range<usize>,
        tail: Range<usize>,
        relation: RelationId,
    ) -> Result<Sample> {
        for (name, span) in [("head", &head), ("tail", &tail)] {
            if span.start >= span.end || span.end > raw.len() {
                return Err(Error::validation(format!(
                    "sample {id}: {name} span {}..{} is empty or out of bounds (len {})",
                    span.start,
                    span.end,
                    raw.len()
                )));
            }
        }
        if overlaps(&head, &tail) {
            return Err(Error::validation(format!("sample {id}: entity spans overlap")));
        }
        if raw.iter().any(|&t| t == HEAD_MARKER || t == TAIL_MARKER) {
            return Err(Error::validation(format!(
                "sample {id}: raw tokens contain a reserved marker"
            )));
        }

        let mut tokens = Vec::with_capacity(raw.len() + 2);
        let (mut head_marker_pos, mut tail_marker_pos) = (0, 0);
        for (i, &tok) in raw.iter().enumerate() {
            if i == head.start {
                head_marker_pos = tokens.len();
                tokens.push(HEAD_MARKER);
            }
            if i == tail.start {
                tail_marker_pos = tokens.len();
                tokens.push(TAIL_MARKER);
            }
            tokens.push(tok);
        }
        // every raw index maps to itself plus the number of markers before it
        let shift = |i: usize| i + usize::from(head.start <= i) + usize::from(tail.start <= i);
        let head_span = shift(head.start)..shift(head.end - 1) + 1;
        let tail_span = shift(tail.start)..shift(tail.end - 1) + 1;

        Ok(Sample {
            id,
            tokens,
            head_marker_pos,
            tail_marker_pos,
            head_span,
            tail_span,
            relation,
        })
    }

    /// Inverse of [`Sample::from_unmarked`]: raw tokens and spans.
    pub fn unmarked(&self) -> (Vec<TokenId>, Range<usize>, Range<usize>) {
        let markers = [self.head_marker_pos, self.tail_marker_pos];
        let raw: Vec<TokenId> = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| !markers.contains(i))
            .map(|(_, &t)| t)
            .collect();
        let unshift = |i: usize| i - markers.iter().filter(|&&m| m < i).count();
        let head = unshift(self.head_span.start)..unshift(self.head_span.end);
        let tail = unshift(self.tail_span.start)..unshift(self.tail_span.end);
        (raw, head, tail)
    }

    pub fn span(&self, role: EntityRole) -> &Range<usize> {
        match role {
            EntityRole::Head => &self.head_span,
            EntityRole::Tail => &self.tail_span,
        }
    }

    pub fn marker_pos(&self, role: EntityRole) -> usize {
        match role {
            EntityRole::Head => self.head_marker_pos,
            EntityRole::Tail => self.tail_marker_pos,
        }
    }

    pub fn entity_tokens(&self, role: EntityRole) -> &[TokenId] {
        &self.tokens[self.span(role).clone()]
    }

    /// Returns a copy with the entity of `role` replaced by `surface`.
    /// Every position after the replaced span is shifted by the length change.
    pub fn with_entity_replaced(
        &self,
        role: EntityRole,
        surface: &[TokenId],
        new_id: SampleId,
    ) -> Result<Sample> {
        if surface.is_empty() {
            return Err(Error::contract("replacement entity must be non-empty"));
        }
        let span = self.span(role).clone();
        let mut tokens = Vec::with_capacity(self.tokens.len() + surface.len());
        tokens.extend_from_slice(&self.tokens[..span.start]);
        tokens.extend_from_slice(surface);
        tokens.extend_from_slice(&self.tokens[span.end..]);

        let (old_len, new_len) = (span.len(), surface.len());
        let shift = |i: usize| if i >= span.end { i + new_len - old_len } else { i };
        let shift_range = |r: &Range<usize>| shift(r.start)..shift(r.end);

        let mut out = Sample {
            id: new_id,
            tokens,
            head_marker_pos: shift(self.head_marker_pos),
            tail_marker_pos: shift(self.tail_marker_pos),
            head_span: shift_range(&self.head_span),
            tail_span: shift_range(&self.tail_span),
            relation: self.relation,
        };
        match role {
            EntityRole::Head => out.head_span = span.start..span.start + new_len,
            EntityRole::Tail => out.tail_span = span.start..span.start + new_len,
        }
        out.validate(None)?;
        Ok(out)
    }

    /// Checks the structural invariants. With `vocab_size`, token ids are
    /// range-checked too.
    pub fn validate(&self, vocab_size: Option<usize>) -> Result<()> {
        let n = self.tokens.len();
        let id = self.id;
        if self.head_marker_pos == self.tail_marker_pos {
            return Err(Error::validation(format!("sample {id}: marker positions coincide")));
        }
        if self.head_marker_pos >= n || self.tail_marker_pos >= n {
            return Err(Error::validation(format!("sample {id}: marker out of bounds")));
        }
        if self.tokens[self.head_marker_pos] != HEAD_MARKER
            || self.tokens[self.tail_marker_pos] != TAIL_MARKER
        {
            return Err(Error::validation(format!(
                "sample {id}: marker positions do not hold marker tokens"
            )));
        }
        let head_count = self.tokens.iter().filter(|&&t| t == HEAD_MARKER).count();
        let tail_count = self.tokens.iter().filter(|&&t| t == TAIL_MARKER).count();
        if head_count != 1 || tail_count != 1 {
            return Err(Error::validation(format!(
                "sample {id}: expected exactly one marker of each kind"
            )));
        }
        for span in [&self.head_span, &self.tail_span] {
            if span.start >= span.end || span.end > n {
                return Err(Error::validation(format!(
                    "sample {id}: entity span {}..{} empty or out of bounds",
                    span.start, span.end
                )));
            }
            if span.contains(&self.head_marker_pos) || span.contains(&self.tail_marker_pos) {
                return Err(Error::validation(format!("sample {id}: span covers a marker")));
            }
        }
        if overlaps(&self.head_span, &self.tail_span) {
            return Err(Error::validation(format!("sample {id}: entity spans overlap")));
        }
        if let Some(v) = vocab_size {
            if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= v) {
                return Err(Error::Input(format!(
                    "sample {id}: token id {bad} >= vocab size {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// 1-based position in the sequence.
    pub index: usize,
    /// Sorted relation ids.
    pub relations: Vec<RelationId>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 2 || tokens[0] != HEAD_MARKER_TEXT || tokens[1] != TAIL_MARKER_TEXT {
            return Err(Error::validation(format!(
                "vocabulary must start with {HEAD_MARKER_TEXT} and {TAIL_MARKER_TEXT}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::validation(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path)?;
        Vocab::new(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for tok in &self.tokens {
            writeln!(out, "{tok}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    pub vocab: Vocab,
    /// Display name per relation id.
    pub relation_names: Vec<String>,
    pub n_ways: usize,
    pub k_shots: usize,
}

impl TaskSequence {
    /// Validates the cross-task invariants and infers `n_ways` / `k_shots`.
    ///
    /// `n_ways` and `k_shots` come from the few-shot tasks (2..J); a
    /// single-task sequence reports its own relation count and the smallest
    /// per-relation training count.
    pub fn new(tasks: Vec<Task>, vocab: Vocab, relation_names: Vec<String>) -> Result<TaskSequence> {
        if tasks.is_empty() {
            return Err(Error::validation("task sequence is empty"));
        }
        let mut owner: BTreeMap<RelationId, usize> = BTreeMap::new();
        for (pos, task) in tasks.iter().enumerate() {
            if task.index != pos + 1 {
                return Err(Error::validation(format!(
                    "task at position {pos} has index {}",
                    task.index
                )));
            }
            if task.relations.is_empty() || task.train.is_empty() || task.test.is_empty() {
                return Err(Error::validation(format!(
                    "task {} needs relations, training and test samples",
                    task.index
                )));
            }
            let rel_set: BTreeSet<RelationId> = task.relations.iter().copied().collect();
            for &r in &rel_set {
                if (r.0 as usize) >= relation_names.len() {
                    return Err(Error::validation(format!("relation {r} has no name")));
                }
                if let Some(prev) = owner.insert(r, task.index) {
                    return Err(Error::validation(format!(
                        "relation {:?} appears in tasks {prev} and {}",
                        relation_names[r.0 as usize], task.index
                    )));
                }
            }
            for s in task.train.iter().chain(&task.test) {
                s.validate(Some(vocab.len()))?;
                if !rel_set.contains(&s.relation) {
                    return Err(Error::validation(format!(
                        "sample {} has relation {} outside task {}",
                        s.id, s.relation, task.index
                    )));
                }
            }
        }

        let shots_of = |task: &Task| -> BTreeMap<RelationId, usize> {
            let mut counts: BTreeMap<RelationId, usize> =
                task.relations.iter().map(|&r| (r, 0)).collect();
            for s in &task.train {
                *counts.entry(s.relation).or_default() += 1;
            }
            counts
        };

        let (n_ways, k_shots) = if tasks.len() == 1 {
            let counts = shots_of(&tasks[0]);
            (tasks[0].relations.len(), counts.values().copied().min().unwrap_or(0))
        } else {
            let n_ways = tasks[1].relations.len();
            let k_shots = shots_of(&tasks[1]).values().copied().min().unwrap_or(0);
            for task in &tasks[1..] {
                if task.relations.len() != n_ways {
                    return Err(Error::validation(format!(
                        "few-shot task {} has {} relations, expected {n_ways}",
                        task.index,
                        task.relations.len()
                    )));
                }
                for (r, c) in shots_of(task) {
                    if c != k_shots {
                        return Err(Error::validation(format!(
                            "few-shot task {}: relation {:?} has {c} training samples, expected {k_shots}",
                            task.index, relation_names[r.0 as usize]
                        )));
                    }
                }
            }
            (n_ways, k_shots)
        };
        if k_shots == 0 {
            return Err(Error::validation("a relation has no training samples"));
        }

        Ok(TaskSequence {
            tasks,
            vocab,
            relation_names,
            n_ways,
            k_shots,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn relation_count(&self) -> usize {
        self.tasks.iter().map(|t| t.relations.len()).sum()
    }

    /// Largest sample id in the sequence; augmented samples are numbered above it.
    pub fn max_sample_id(&self) -> SampleId {
        self.tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.test))
            .map(|s| s.id)
            .max()
            .unwrap_or(SampleId(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        // raw: a b c d e ; head = [1,2) "b", tail = [3,5) "d e"
        Sample::from_unmarked(SampleId(3), &[10, 11, 12, 13, 14], 1..2, 3..5, RelationId(0)).unwrap()
    }

    #[test]
    fn markers_are_inserted_at_span_starts() {
        let s = sample();
        assert_eq!(s.tokens, vec![10, HEAD_MARKER, 11, 12, TAIL_MARKER, 13, 14]);
        assert_eq!(s.head_marker_pos, 1);
        assert_eq!(s.tail_marker_pos, 4);
        assert_eq!(s.head_span, 2..3);
        assert_eq!(s.tail_span, 5..7);
        s.validate(Some(20)).unwrap();
        assert_eq!(s.unmarked(), (vec![10, 11, 12, 13, 14], 1..2, 3..5));
    }

    #[test]
    fn tail_before_head_is_supported() {
        let s = Sample::from_unmarked(SampleId(0), &[5, 6, 7], 2..3, 0..1, RelationId(1)).unwrap();
        assert_eq!(s.tokens, vec![TAIL_MARKER, 5, 6, HEAD_MARKER, 7]);
        assert_eq!(s.unmarked(), (vec![5, 6, 7], 2..3, 0..1));
    }

    #[test]
    fn overlapping_or_empty_spans_are_rejected() {
        assert!(Sample::from_unmarked(SampleId(0), &[5, 6, 7], 0..2, 1..3, RelationId(0)).is_err());
        assert!(Sample::from_unmarked(SampleId(0), &[5, 6, 7], 1..1, 2..3, RelationId(0)).is_err());
        assert!(Sample::from_unmarked(SampleId(0), &[5, 6, 7], 0..1, 2..4, RelationId(0)).is_err());
        assert!(Sample::from_unmarked(SampleId(0), &[0, 6, 7], 1..2, 2..3, RelationId(0)).is_err());
    }

    #[test]
    fn entity_replacement_reindexes_positions() {
        let s = sample();
        let longer = s.with_entity_replaced(EntityRole::Head, &[20, 21, 22], SampleId(99)).unwrap();
        assert_eq!(longer.tokens, vec![10, HEAD_MARKER, 20, 21, 22, 12, TAIL_MARKER, 13, 14]);
        assert_eq!(longer.head_span, 2..5);
        assert_eq!(longer.tail_marker_pos, 6);
        assert_eq!(longer.tail_span, 7..9);
        assert_eq!(longer.relation, s.relation);

        let shorter = s.with_entity_replaced(EntityRole::Tail, &[30], SampleId(100)).unwrap();
        assert_eq!(shorter.tokens, vec![10, HEAD_MARKER, 11, 12, TAIL_MARKER, 30]);
        assert_eq!(shorter.tail_span, 5..6);
        assert_eq!(shorter.head_span, s.head_span);
    }

    #[test]
    fn validation_catches_bad_tokens() {
        let s = sample();
        assert!(matches!(s.validate(Some(12)), Err(Error::Input(_))));
        let mut broken = s.clone();
        broken.tokens[1] = 11;
        assert!(broken.validate(None).is_err());
    }

    #[test]
    fn vocab_requires_reserved_markers() {
        assert!(Vocab::new(vec!["a".into(), "b".into()]).is_err());
        let v = Vocab::new(vec!["[E1]".into(), "[E2]".into(), "x".into()]).unwrap();
        assert_eq!(v.id("x"), Some(2));
        assert_eq!(v.token(1), Some("[E2]"));
    }
}
