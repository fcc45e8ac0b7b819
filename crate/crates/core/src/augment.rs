//! Entity-swap data augmentation.
//!
//! Entities from the current training data and the memory are compared by
//! the encoder's marker-token states. When two entities with different
//! surface forms are more similar than `tau`, each host sentence gets a
//! copy with its entity replaced by the other one's surface form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::data::{EntityRole, Sample, SampleId, TokenId};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::tape::NORM_FLOOR;

/// Default maximum number of augmented variants per original sample.
pub const DEFAULT_CAP: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct EntityOccurrence {
    pub sample: SampleId,
    pub role: EntityRole,
    pub surface: Vec<TokenId>,
    pub representation: Vec<f64>,
}

/// Head and tail occurrences of every sample, representations in eval mode.
pub fn collect_entities(model: &Model, samples: &[Sample]) -> Result<Vec<EntityOccurrence>> {
    let mut out = Vec::with_capacity(2 * samples.len());
    for s in samples {
        let (head, tail) = model.encode_markers(s)?;
        for (role, rep) in [(EntityRole::Head, head), (EntityRole::Tail, tail)] {
            out.push(EntityOccurrence {
                sample: s.id,
                role,
                surface: s.entity_tokens(role).to_vec(),
                representation: rep,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcceptedPair {
    pub sample_a: SampleId,
    pub role_a: EntityRole,
    pub sample_b: SampleId,
    pub role_b: EntityRole,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub dataset: Vec<Sample>,
    pub memory: Vec<Sample>,
    pub pairs: Vec<AcceptedPair>,
}

impl Augmented {
    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("sample_a,entity_a,sample_b,entity_b,cosine\n");
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.sample_a,
                p.role_a.as_str(),
                p.sample_b,
                p.role_b.as_str(),
                p.cosine
            );
        }
        out
    }
}

struct Candidate {
    cosine: f64,
    role: EntityRole,
    surface: Vec<TokenId>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    v.iter().map(|x| x / n).collect()
}

/// Augments `dataset` and `memory` from a shared occurrence pool over both.
/// Pairs are scanned in pool order; a sample is never paired with itself.
/// Each original keeps at most `cap` distinct variants, preferring higher
/// similarity. New samples get ids counting up from `next_id`, which is
/// advanced past the last one used.
pub fn augment(
    dataset: &[Sample],
    memory: &[Sample],
    model: &Model,
    tau: f64,
    cap: usize,
    next_id: &mut u64,
) -> Result<Augmented> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::config(format!("tau must lie in (0, 1], got {tau}")));
    }
    let mut pool: BTreeMap<SampleId, &Sample> = BTreeMap::new();
    for s in dataset.iter().chain(memory) {
        pool.entry(s.id).or_insert(s);
    }
    let samples: Vec<Sample> = pool.values().map(|s| (*s).clone()).collect();
    let occurrences = collect_entities(model, &samples)?;
    let units: Vec<Vec<f64>> = occurrences.iter().map(|o| unit(&o.representation)).collect();

    let mut candidates: BTreeMap<SampleId, Vec<Candidate>> = BTreeMap::new();
    let mut pairs = Vec::new();
    for i in 0..occurrences.len() {
        for j in i + 1..occurrences.len() {
            let (a, b) = (&occurrences[i], &occurrences[j]);
            if a.sample == b.sample || a.surface == b.surface {
                continue;
            }
            let cosine: f64 = units[i].iter().zip(&units[j]).map(|(x, y)| x * y).sum();
            if cosine <= tau {
                continue;
            }
            pairs.push(AcceptedPair {
                sample_a: a.sample,
                role_a: a.role,
                sample_b: b.sample,
                role_b: b.role,
                cosine,
            });
            candidates.entry(a.sample).or_default().push(Candidate {
                cosine,
                role: a.role,
                surface: b.surface.clone(),
            });
            candidates.entry(b.sample).or_default().push(Candidate {
                cosine,
                role: b.role,
                surface: a.surface.clone(),
            });
        }
    }

    let mut variants: BTreeMap<SampleId, Vec<Sample>> = BTreeMap::new();
    for (id, mut cands) in candidates {
        // stable sort keeps scan order among equal similarities
        cands.sort_by(|x, y| y.cosine.total_cmp(&x.cosine));
        let original = pool[&id];
        let mut seen: BTreeSet<Vec<TokenId>> = BTreeSet::new();
        let mut out = Vec::new();
        for c in cands {
            if out.len() >= cap {
                break;
            }
            let variant = original.with_entity_replaced(c.role, &c.surface, SampleId(0))?;
            if variant.tokens == original.tokens || !seen.insert(variant.tokens.clone()) {
                continue;
            }
            out.push(variant);
        }
        for v in &mut out {
            v.id = SampleId(*next_id);
            *next_id += 1;
        }
        variants.insert(id, out);
    }

    let extend = |base: &[Sample]| {
        let mut out = base.to_vec();
        for s in base {
            if let Some(vs) = variants.get(&s.id) {
                out.extend(vs.iter().cloned());
            }
        }
        out
    };
    Ok(Augmented {
        dataset: extend(dataset),
        memory: extend(memory),
        pairs,
    })
}
