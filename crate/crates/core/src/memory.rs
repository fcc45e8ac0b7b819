//! Exemplar memory, prototypes, deviations and pseudo samples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{RelationId, Sample, SampleId};
use crate::encoder::Model;
use crate::error::{Error, Result};

/// Floor applied to every per-dimension deviation.
pub const DEVIATION_FLOOR: f64 = 1e-4;

/// Iteration cap for Lloyd's algorithm.
pub const KMEANS_MAX_ITER: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding. Returns the indices of the chosen initial centres.
/// The first centre is uniform; each further centre is drawn with
/// probability proportional to the squared distance to the nearest chosen
/// centre. When every remaining distance is zero the lowest unchosen index
/// is taken.
pub fn kmeans_pp_init<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centre) in centroids.iter().enumerate() {
                let d = sq_dist(p, centre);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

fn centroids_of(points: &[Vec<f64>], assignments: &[usize], k: usize, previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (s, n))| {
            if n == 0 {
                previous[c].clone()
            } else {
                s.into_iter().map(|x| x / n as f64).collect()
            }
        })
        .collect()
}

/// Gives every empty cluster the point farthest from the centroid of the
/// currently largest cluster.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], centroids: &[Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
        if counts[largest] < 2 {
            return;
        }
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if assignments[i] == largest {
                let d = sq_dist(p, &centroids[largest]);
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
        }
        assignments[far.expect("largest cluster is non-empty")] = empty;
    }
}

/// Lloyd's algorithm from the given initial centres, run until assignments
/// stop changing or [`KMEANS_MAX_ITER`] is reached.
pub fn lloyd(points: &[Vec<f64>], init: Vec<Vec<f64>>) -> KMeans {
    let k = init.len();
    let mut centroids = init;
    let mut assignments: Option<Vec<usize>> = None;
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut next = assign(points, &centroids);
        repair_empty(points, &mut next, &centroids);
        let stable = assignments.as_ref() == Some(&next);
        centroids = centroids_of(points, &next, k, &centroids);
        assignments = Some(next);
        if stable {
            break;
        }
    }
    KMeans {
        assignments: assignments.unwrap_or_default(),
        centroids,
        iterations,
    }
}

/// Picks `min(l, n)` typical samples: k-means over the hidden vectors, then
/// the member nearest each centroid (ties to the lowest sample id).
/// Returned ids are sorted.
pub fn select_typical<R: Rng>(ids: &[SampleId], hiddens: &[Vec<f64>], l: usize, rng: &mut R) -> Result<Vec<SampleId>> {
    if ids.is_empty() {
        return Err(Error::contract("cannot select exemplars from an empty sample list"));
    }
    if ids.len() != hiddens.len() {
        return Err(Error::contract("ids and hiddens differ in length"));
    }
    if l == 0 {
        return Err(Error::contract("memory size must be at least 1"));
    }
    let k = l.min(ids.len());
    let init = kmeans_pp_init(hiddens, k, rng);
    let km = lloyd(hiddens, init.iter().map(|&i| hiddens[i].clone()).collect());
    let mut picked = Vec::with_capacity(k);
    for (c, centre) in km.centroids.iter().enumerate() {
        let mut best: Option<(f64, SampleId)> = None;
        for (i, h) in hiddens.iter().enumerate() {
            if km.assignments[i] != c {
                continue;
            }
            let d = sq_dist(h, centre);
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && ids[i] < bid),
            };
            if better {
                best = Some((d, ids[i]));
            }
        }
        if let Some((_, id)) = best {
            picked.push(id);
        }
    }
    picked.sort();
    Ok(picked)
}

/// Mean of the exemplar hidden vectors.
pub fn compute_prototype(hiddens: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = hiddens
        .first()
        .ok_or_else(|| Error::contract("prototype of an empty exemplar set"))?;
    let mut sum = vec![0.0; first.len()];
    for h in hiddens {
        for (s, x) in sum.iter_mut().zip(h) {
            *s += x;
        }
    }
    let n = hiddens.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Per-dimension population standard deviation, floored at [`DEVIATION_FLOOR`].
pub fn compute_deviation(hiddens: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mean = compute_prototype(hiddens)
        .map_err(|_| Error::contract("deviation of an empty sample set"))?;
    let n = hiddens.len() as f64;
    let mut var = vec![0.0; mean.len()];
    for h in hiddens {
        for ((v, x), m) in var.iter_mut().zip(h).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    Ok(var.into_iter().map(|v| (v / n).sqrt().max(DEVIATION_FLOOR)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSample {
    pub relation: RelationId,
    pub vector: Vec<f64>,
}

/// `s = p + η ⊙ δ` with `η` drawn i.i.d. standard normal per dimension.
pub fn pseudo_from_noise(prototype: &[f64], deviation: &[f64], eta: &[f64]) -> Vec<f64> {
    prototype
        .iter()
        .zip(deviation)
        .zip(eta)
        .map(|((p, d), e)| p + e * d)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationStats {
    pub relation: RelationId,
    pub exemplars: Vec<SampleId>,
    pub prototype: Vec<f64>,
    pub deviation: Vec<f64>,
    pub first_task: usize,
}

impl RelationStats {
    pub fn generate_pseudo<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<PseudoSample>> {
        if n == 0 {
            return Err(Error::contract("pseudo sample count must be positive"));
        }
        if self.prototype.len() != self.deviation.len() {
            return Err(Error::contract("prototype and deviation differ in length"));
        }
        Ok((0..n)
            .map(|_| {
                let eta: Vec<f64> = (0..self.prototype.len()).map(|_| StandardNormal.sample(rng)).collect();
                PseudoSample {
                    relation: self.relation,
                    vector: pseudo_from_noise(&self.prototype, &self.deviation, &eta),
                }
            })
            .collect())
    }
}

/// Accumulated exemplars and statistics for every observed relation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryStore {
    stats: BTreeMap<RelationId, RelationStats>,
    samples: BTreeMap<SampleId, Sample>,
}

impl MemoryStore {
    pub fn new() -> Self {
        MemoryStore::default()
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn get(&self, relation: RelationId) -> Option<&RelationStats> {
        self.stats.get(&relation)
    }

    pub fn stats(&self) -> impl Iterator<Item = &RelationStats> {
        self.stats.values()
    }

    pub fn total_exemplars(&self) -> usize {
        self.samples.len()
    }

    /// Exemplar samples, in sample-id order.
    pub fn samples(&self) -> Vec<Sample> {
        self.samples.values().cloned().collect()
    }

    pub fn contains_sample(&self, id: SampleId) -> bool {
        self.samples.contains_key(&id)
    }

    /// Selects exemplars for each relation in `relations` from `train` and
    /// fixes its deviation from all of its training samples. Prototypes are
    /// set from the exemplars with the same model.
    pub fn admit<R: Rng>(
        &mut self,
        model: &Model,
        task_index: usize,
        relations: &[RelationId],
        train: &[Sample],
        l: usize,
        rng: &mut R,
    ) -> Result<()> {
        for &relation in relations {
            if self.stats.contains_key(&relation) {
                return Err(Error::contract(format!("relation {relation} already in memory")));
            }
            let members: Vec<&Sample> = train.iter().filter(|s| s.relation == relation).collect();
            if members.is_empty() {
                return Err(Error::contract(format!("relation {relation} has no training samples")));
            }
            let ids: Vec<SampleId> = members.iter().map(|s| s.id).collect();
            let hiddens = members.iter().map(|s| model.hidden_of(s)).collect::<Result<Vec<_>>>()?;
            let exemplars = select_typical(&ids, &hiddens, l, rng)?;
            let deviation = compute_deviation(&hiddens)?;
            let chosen: Vec<Vec<f64>> = ids
                .iter()
                .zip(&hiddens)
                .filter(|(id, _)| exemplars.contains(id))
                .map(|(_, h)| h.clone())
                .collect();
            let prototype = compute_prototype(&chosen)?;
            for s in &members {
                if exemplars.contains(&s.id) {
                    self.samples.insert(s.id, (*s).clone());
                }
            }
            self.stats.insert(
                relation,
                RelationStats {
                    relation,
                    exemplars,
                    prototype,
                    deviation,
                    first_task: task_index,
                },
            );
        }
        Ok(())
    }

    /// Recomputes every prototype from its exemplars with `model` in eval
    /// mode. Deviations are left as first computed.
    pub fn refresh_prototypes(&mut self, model: &Model) -> Result<()> {
        for st in self.stats.values_mut() {
            let hiddens = st
                .exemplars
                .iter()
                .map(|id| model.hidden_of(&self.samples[id]))
                .collect::<Result<Vec<_>>>()?;
            st.prototype = compute_prototype(&hiddens)?;
        }
        Ok(())
    }

    /// `n` fresh pseudo samples per relation, in relation order.
    pub fn generate_pseudo<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<PseudoSample>> {
        let mut out = Vec::with_capacity(n * self.stats.len());
        for st in self.stats.values() {
            out.extend(st.generate_pseudo(n, rng)?);
        }
        Ok(out)
    }

    /// Diagnostic dump: relation, exemplar ids, prototype, deviation.
    /// Vector fields are space separated.
    pub fn to_csv(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let mut out = String::from("relation,exemplars,prototype,deviation\n");
        for st in self.stats.values() {
            let ids = st.exemplars.iter().map(|i| i.0.to_string()).collect::<Vec<_>>().join(" ");
            let _ = writeln!(out, "{},{},{},{}", st.relation, ids, join(&st.prototype), join(&st.deviation));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn ids(n: usize) -> Vec<SampleId> {
        (0..n as u64).map(SampleId).collect()
    }

    #[test]
    fn one_dimensional_clusters_pick_the_middle_points() {
        let pts: Vec<Vec<f64>> = [0.0, 1.0, 5.0, 20.0, 21.0, 25.0].iter().map(|&x| vec![x]).collect();
        for seed in 0..20 {
            let got = select_typical(&ids(6), &pts, 2, &mut seeded(seed)).unwrap();
            assert_eq!(got, vec![SampleId(1), SampleId(4)], "seed {seed}");
        }
    }

    #[test]
    fn saturated_memory_selects_everything() {
        let pts: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, -(i as f64)]).collect();
        let got = select_typical(&ids(4), &pts, 10, &mut seeded(1)).unwrap();
        assert_eq!(got, ids(4));
    }

    #[test]
    fn identical_points_give_distinct_lowest_ids() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let got = select_typical(&ids(5), &pts, 1, &mut seeded(3)).unwrap();
        assert_eq!(got, vec![SampleId(0)]);
        let got = select_typical(&ids(5), &pts, 3, &mut seeded(3)).unwrap();
        assert_eq!(got.len(), 3);
        let mut dedup = got.clone();
        dedup.dedup();
        assert_eq!(dedup, got);
    }

    #[test]
    fn empty_selection_is_a_contract_error() {
        assert!(matches!(select_typical(&[], &[], 1, &mut seeded(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn prototype_examples() {
        assert_eq!(compute_prototype(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        let one = vec![0.25, -3.5, 7.0];
        assert_eq!(compute_prototype(std::slice::from_ref(&one)).unwrap(), one);
        assert!(compute_prototype(&[]).is_err());
    }

    #[test]
    fn deviation_examples() {
        assert_eq!(compute_deviation(&[vec![3.0, 4.0]]).unwrap(), vec![DEVIATION_FLOOR; 2]);
        assert_eq!(
            compute_deviation(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap(),
            vec![1.0, DEVIATION_FLOOR]
        );
        assert!(compute_deviation(&[]).is_err());
    }

    #[test]
    fn forced_noise_arithmetic() {
        let s = pseudo_from_noise(&[1.0, 1.0], &[2.0, DEVIATION_FLOOR], &[0.5, 0.0]);
        assert_eq!(s, vec![2.0, 1.0]);
    }

    #[test]
    fn zero_pseudo_count_is_rejected() {
        let st = RelationStats {
            relation: RelationId(0),
            exemplars: vec![],
            prototype: vec![0.0],
            deviation: vec![1.0],
            first_task: 1,
        };
        assert!(st.generate_pseudo(0, &mut seeded(0)).is_err());
        assert_eq!(st.generate_pseudo(10, &mut seeded(0)).unwrap().len(), 10);
    }
}
