use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RelationId, Sample, SampleId, Task, TaskSequence, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    task: usize,
    relation: String,
    split: Split,
    tokens: Vec<String>,
    head: [usize; 2],
    tail: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Test,
}

/// Loads a dataset in the line-delimited record format. Sample ids are
/// assigned in file order; relation ids in order of first appearance.
pub fn load_jsonl(data_path: &Path, vocab_path: &Path) -> Result<TaskSequence> {
    let vocab = Vocab::load(vocab_path)?;
    let text = fs::read_to_string(data_path)?;
    parse_jsonl(&text, vocab)
}

pub fn parse_jsonl(text: &str, vocab: Vocab) -> Result<TaskSequence> {
    let mut relation_ids: HashMap<String, RelationId> = HashMap::new();
    let mut relation_names: Vec<String> = Vec::new();
    let mut relation_task: HashMap<RelationId, usize> = HashMap::new();
    let mut tasks: BTreeMap<usize, Task> = BTreeMap::new();
    let mut next_id = 0u64;

    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.task == 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "task numbers are 1-based".into(),
            });
        }
        let raw = rec
            .tokens
            .iter()
            .map(|t| {
                vocab.id(t).ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("token {t:?} not in vocabulary"),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let relation = *relation_ids.entry(rec.relation.clone()).or_insert_with(|| {
            relation_names.push(rec.relation.clone());
            RelationId(relation_names.len() as u32 - 1)
        });
        match relation_task.get(&relation) {
            Some(&t) if t != rec.task => {
                return Err(Error::validation(format!(
                    "line {line_no}: relation {:?} appears in tasks {t} and {}",
                    rec.relation, rec.task
                )))
            }
            _ => {
                relation_task.insert(relation, rec.task);
            }
        }

        let sample = Sample::from_unmarked(
            SampleId(next_id),
            &raw,
            rec.head[0]..rec.head[1],
            rec.tail[0]..rec.tail[1],
            relation,
        )
        .map_err(|e| match e {
            Error::Validation(m) => Error::validation(format!("line {line_no}: {m}")),
            other => other,
        })?;
        next_id += 1;

        let task = tasks.entry(rec.task).or_insert_with(|| Task {
            index: rec.task,
            relations: Vec::new(),
            train: Vec::new(),
            test: Vec::new(),
        });
        if !task.relations.contains(&relation) {
            task.relations.push(relation);
        }
        match rec.split {
            Split::Train => task.train.push(sample),
            Split::Test => task.test.push(sample),
        }
    }

    if tasks.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "dataset contains no records".into(),
        });
    }
    let mut ordered = Vec::with_capacity(tasks.len());
    for (pos, (index, mut task)) in tasks.into_iter().enumerate() {
        if index != pos + 1 {
            return Err(Error::validation(format!(
                "task numbers must be contiguous from 1; missing task {}",
                pos + 1
            )));
        }
        task.relations.sort();
        ordered.push(task);
    }
    TaskSequence::new(ordered, vocab, relation_names)
}

/// Writes `seq` as line-delimited records plus its vocabulary file. Records
/// are emitted task by task, training split first, in stored order, so a
/// sequence with sequential ids reloads to an equal value.
pub fn write_jsonl(seq: &TaskSequence, data_path: &Path, vocab_path: &Path) -> Result<()> {
    seq.vocab.save(vocab_path)?;
    let mut out = BufWriter::new(fs::File::create(data_path)?);
    for task in &seq.tasks {
        for (split, samples) in [(Split::Train, &task.train), (Split::Test, &task.test)] {
            for s in samples {
                let (raw, head, tail) = s.unmarked();
                let tokens = raw
                    .iter()
                    .map(|&t| {
                        seq.vocab
                            .token(t)
                            .map(str::to_owned)
                            .ok_or_else(|| Error::Input(format!("token id {t} not in vocabulary")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let rec = Record {
                    task: task.index,
                    relation: seq.relation_names[s.relation.0 as usize].clone(),
                    split,
                    tokens,
                    head: [head.start, head.end],
                    tail: [tail.start, tail.end],
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
