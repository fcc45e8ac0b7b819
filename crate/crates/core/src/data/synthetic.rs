//! Synthetic continual few-shot relation sequences.
//!
//! Each relation owns a few signature tokens. A sentence of relation `r` has
//! the layout
//!
//! ```text
//! filler* HEAD filler* TRIGGER filler* TAIL filler*
//! ```
//!
//! where the head and tail entities are one or two signature tokens of `r`
//! and the trigger is one more. With probability `cluster_spread` each
//! signature slot is replaced by a signature token of a uniformly random
//! relation, so small spreads give separable relations and large spreads
//! confusable ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RelationId, Sample, SampleId, Task, TaskSequence, TokenId, Vocab};
use crate::error::{Error, Result};

pub const SIGNATURE_TOKENS: usize = 3;
const MIN_FILLER_TOKENS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_tasks: usize,
    pub n_ways: usize,
    pub k_shots: usize,
    pub first_task_samples: usize,
    pub test_per_relation: usize,
    pub vocab_size: usize,
    pub cluster_spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            n_tasks: 8,
            n_ways: 10,
            k_shots: 5,
            first_task_samples: 100,
            test_per_relation: 20,
            vocab_size: 400,
            cluster_spread: 0.3,
        }
    }
}

struct Layout {
    n_relations: usize,
    filler_start: usize,
    vocab_size: usize,
}

impl Layout {
    fn signature(&self, r: usize, k: usize) -> TokenId {
        (2 + r * SIGNATURE_TOKENS + k) as TokenId
    }

    fn sig_token<R: Rng>(&self, r: usize, spread: f64, rng: &mut R) -> TokenId {
        let owner = if rng.random::<f64>() < spread {
            rng.random_range(0..self.n_relations)
        } else {
            r
        };
        self.signature(owner, rng.random_range(0..SIGNATURE_TOKENS))
    }

    fn filler<R: Rng>(&self, rng: &mut R, count: usize, out: &mut Vec<TokenId>) {
        for _ in 0..count {
            out.push(rng.random_range(self.filler_start..self.vocab_size) as TokenId);
        }
    }

    fn sentence<R: Rng>(&self, id: SampleId, r: usize, spread: f64, rng: &mut R) -> Result<Sample> {
        let mut raw = Vec::with_capacity(16);
        let pre = rng.random_range(0..=3);
        self.filler(rng, pre, &mut raw);
        let head_len = rng.random_range(1..=2);
        let head_start = raw.len();
        for _ in 0..head_len {
            raw.push(self.sig_token(r, spread, rng));
        }
        let head = head_start..raw.len();
        let gap = rng.random_range(0..=2);
        self.filler(rng, gap, &mut raw);
        raw.push(self.sig_token(r, spread, rng));
        let gap = rng.random_range(0..=2);
        self.filler(rng, gap, &mut raw);
        let tail_len = rng.random_range(1..=2);
        let tail_start = raw.len();
        for _ in 0..tail_len {
            raw.push(self.sig_token(r, spread, rng));
        }
        let tail = tail_start..raw.len();
        let post = rng.random_range(0..=3);
        self.filler(rng, post, &mut raw);
        Sample::from_unmarked(id, &raw, head, tail, RelationId(r as u32))
    }
}

/// Generates a task sequence. Relation `r` of task `j` (both 0-based) has
/// id `j * n_ways + r`; sample ids run sequentially over tasks, training
/// split before test split.
pub fn generate_synthetic_sequence(cfg: &SyntheticConfig) -> Result<TaskSequence> {
    let counts = [
        ("n_tasks", cfg.n_tasks),
        ("n_ways", cfg.n_ways),
        ("k_shots", cfg.k_shots),
        ("first_task_samples", cfg.first_task_samples),
        ("test_per_relation", cfg.test_per_relation),
    ];
    if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
        return Err(Error::config(format!("{name} must be at least 1")));
    }
    if !(0.0..=1.0).contains(&cfg.cluster_spread) {
        return Err(Error::config("cluster_spread must lie in [0, 1]"));
    }
    let n_relations = cfg.n_tasks * cfg.n_ways;
    let filler_start = 2 + n_relations * SIGNATURE_TOKENS;
    if cfg.vocab_size < filler_start + MIN_FILLER_TOKENS {
        return Err(Error::config(format!(
            "vocab_size {} too small: {n_relations} relations need {} signature tokens, \
             2 markers and at least {MIN_FILLER_TOKENS} filler tokens",
            cfg.vocab_size,
            n_relations * SIGNATURE_TOKENS
        )));
    }
    let layout = Layout {
        n_relations,
        filler_start,
        vocab_size: cfg.vocab_size,
    };

    let mut words = vec![super::HEAD_MARKER_TEXT.to_string(), super::TAIL_MARKER_TEXT.to_string()];
    for r in 0..n_relations {
        for k in 0..SIGNATURE_TOKENS {
            words.push(format!("r{r}_s{k}"));
        }
    }
    for i in filler_start..cfg.vocab_size {
        words.push(format!("w{i}"));
    }
    let vocab = Vocab::new(words)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut next_id = 0u64;
    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for j in 0..cfg.n_tasks {
        let relations: Vec<usize> = (j * cfg.n_ways..(j + 1) * cfg.n_ways).collect();
        let per_relation_train = if j == 0 { cfg.first_task_samples } else { cfg.k_shots };
        let mut make = |count: usize| -> Result<Vec<Sample>> {
            let mut out = Vec::with_capacity(count * relations.len());
            for &r in &relations {
                for _ in 0..count {
                    out.push(layout.sentence(SampleId(next_id), r, cfg.cluster_spread, &mut rng)?);
                    next_id += 1;
                }
            }
            Ok(out)
        };
        let train = make(per_relation_train)?;
        let test = make(cfg.test_per_relation)?;
        tasks.push(Task {
            index: j + 1,
            relations: relations.iter().map(|&r| RelationId(r as u32)).collect(),
            train,
            test,
        });
    }
    let names = (0..n_relations).map(|r| format!("rel{r}")).collect();
    TaskSequence::new(tasks, vocab, names)
}
