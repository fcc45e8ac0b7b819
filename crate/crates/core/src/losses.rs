//! Classification and distillation losses.
//!
//! Plain functions compute loss values from vectors; the `*_term` builders
//! record the same quantities on a [`Tape`] so they can be differentiated.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::RelationId;
use crate::error::{Error, Result};
use crate::tape::{log_sum_exp, Tape, Var, NORM_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    /// Weight of the representation term inside the hidden contrastive loss.
    pub rd_weight: f64,
    /// Weight of the triplet term inside the hidden contrastive loss.
    pub dtr_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            temperature: 0.08,
            rd_weight: 1.0,
            dtr_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.beta,
            self.gamma,
            self.lambda1,
            self.lambda2,
            self.temperature,
            self.rd_weight,
            self.dtr_weight,
        ];
        if all.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("loss weights must be finite"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }

    /// Coefficients of (csf, fd, rd, dtr, pd) in the final loss.
    pub fn coefficients(&self) -> [f64; 5] {
        [
            self.lambda1,
            self.lambda2 * self.alpha,
            self.lambda2 * self.beta * self.rd_weight,
            self.lambda2 * self.beta * self.dtr_weight,
            self.lambda2 * self.gamma,
        ]
    }
}

/// Mined triplet targets; constants with respect to the student.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletTargets {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    v.iter().map(|x| x / n).collect()
}

fn softmax_t(logits: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let lse = log_sum_exp(&z);
    z.iter().map(|x| (x - lse).exp()).collect()
}

/// Mean negative log-likelihood of the labels under softmax(logits).
pub fn classification_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::contract("logits and labels must be paired and non-empty"));
    }
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::contract("label out of range"));
        }
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / logits.len() as f64)
}

/// Mean cosine distance `1 - â·b̂`; used for both feature and hidden distillation.
pub fn cosine_distill_loss(prev: &[Vec<f64>], cur: &[Vec<f64>]) -> Result<f64> {
    if prev.len() != cur.len() || prev.is_empty() {
        return Err(Error::contract("distillation inputs must be paired and non-empty"));
    }
    let mut total = 0.0;
    for (a, b) in prev.iter().zip(cur) {
        if a.len() != b.len() {
            return Err(Error::contract("distillation vectors differ in length"));
        }
        let (ua, ub) = (unit(a), unit(b));
        total += 1.0 - ua.iter().zip(&ub).map(|(x, y)| x * y).sum::<f64>();
    }
    Ok(total / prev.len() as f64)
}

pub fn feature_distill_loss(f_prev: &[Vec<f64>], f_cur: &[Vec<f64>]) -> Result<f64> {
    cosine_distill_loss(f_prev, f_cur)
}

pub fn representation_distill_loss(h_prev: &[Vec<f64>], h_cur: &[Vec<f64>]) -> Result<f64> {
    cosine_distill_loss(h_prev, h_cur)
}

/// Farthest same-relation and nearest other-relation pool entries, measured
/// from the teacher's hidden vector. Ties go to the lowest pool index.
pub fn mine_triplet(anchor: &[f64], relation: RelationId, pool: &[(&[f64], RelationId)]) -> Result<TripletTargets> {
    let mut pos: Option<(f64, usize)> = None;
    let mut neg: Option<(f64, usize)> = None;
    for (i, (v, r)) in pool.iter().enumerate() {
        let d = dist(anchor, v);
        if *r == relation {
            if pos.is_none_or(|(best, _)| d > best) {
                pos = Some((d, i));
            }
        } else if neg.is_none_or(|(best, _)| d < best) {
            neg = Some((d, i));
        }
    }
    match (pos, neg) {
        (Some((_, p)), Some((_, n))) => Ok(TripletTargets {
            positive: pool[p].0.to_vec(),
            negative: pool[n].0.to_vec(),
        }),
        (None, _) => Err(Error::Mining(format!("no positive for relation {relation}"))),
        (_, None) => Err(Error::Mining(format!("no negative for relation {relation}"))),
    }
}

/// Mean hinge `max(0, ‖h − z⁺‖ − ‖h − z⁻‖)`.
pub fn distillation_triplet_loss(h_cur: &[Vec<f64>], targets: &[TripletTargets]) -> Result<f64> {
    if h_cur.len() != targets.len() || h_cur.is_empty() {
        return Err(Error::contract("triplet inputs must be paired and non-empty"));
    }
    let total: f64 = h_cur
        .iter()
        .zip(targets)
        .map(|(h, t)| (dist(h, &t.positive) - dist(h, &t.negative)).max(0.0))
        .sum();
    Ok(total / h_cur.len() as f64)
}

pub fn hidden_contrastive_loss(rd: f64, dtr: f64) -> f64 {
    rd + dtr
}

/// Temperature-softened cross-entropy between the teacher and student
/// distributions over the teacher's relations. Both softmaxes are
/// normalised over the first `logits_prev[i].len()` entries only.
pub fn prediction_distill_loss(logits_prev: &[Vec<f64>], logits_cur: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    if logits_prev.len() != logits_cur.len() || logits_prev.is_empty() {
        return Err(Error::contract("prediction distillation inputs must be paired and non-empty"));
    }
    let mut total = 0.0;
    for (p, c) in logits_prev.iter().zip(logits_cur) {
        let m = p.len();
        if c.len() < m {
            return Err(Error::contract("current logits narrower than previous logits"));
        }
        let cp = softmax_t(p, temperature);
        let z: Vec<f64> = c[..m].iter().map(|x| x / temperature).collect();
        let lse = log_sum_exp(&z);
        total -= cp.iter().zip(&z).map(|(t, zi)| t * (zi - lse)).sum::<f64>();
    }
    Ok(total / logits_prev.len() as f64)
}

pub fn total_distillation_loss(fd: f64, hcd: f64, pd: f64, w: &LossWeights) -> f64 {
    w.alpha * fd + w.beta * hcd + w.gamma * pd
}

pub fn final_loss(csf: f64, dst: f64, w: &LossWeights) -> f64 {
    w.lambda1 * csf + w.lambda2 * dst
}

fn zero(tape: &mut Tape<'_>) -> Var {
    tape.constant_owned(Array2::zeros((1, 1)))
}

/// Mean cross-entropy of 1×C logit rows.
pub fn csf_term(tape: &mut Tape<'_>, logits: &[Var], labels: &[usize]) -> Var {
    let terms: Vec<Var> = logits.iter().zip(labels).map(|(&o, &y)| tape.cross_entropy(o, y)).collect();
    tape.mean(&terms)
}

/// Mean cosine distance between each row and its constant target.
pub fn cosine_term(tape: &mut Tape<'_>, cur: &[Var], targets: &[Vec<f64>]) -> Var {
    let terms: Vec<Var> = cur.iter().zip(targets).map(|(&v, t)| tape.cosine_distance(v, t)).collect();
    tape.mean(&terms)
}

/// Mean triplet hinge; samples without targets contribute zero.
pub fn triplet_term(tape: &mut Tape<'_>, hidden: &[Var], targets: &[Option<TripletTargets>]) -> Var {
    let w = 1.0 / hidden.len() as f64;
    let mut terms = Vec::new();
    for (&h, t) in hidden.iter().zip(targets) {
        if let Some(t) = t {
            let dp = tape.distance(h, &t.positive);
            let dn = tape.distance(h, &t.negative);
            let gap = tape.weighted_sum(&[(dp, 1.0), (dn, -1.0)]);
            terms.push((tape.relu(gap), w));
        }
    }
    if terms.is_empty() {
        zero(tape)
    } else {
        tape.weighted_sum(&terms)
    }
}

/// Mean prediction distillation against constant teacher logits.
pub fn pd_term(tape: &mut Tape<'_>, logits: &[Var], prev_logits: &[Vec<f64>], temperature: f64) -> Var {
    let terms: Vec<Var> = logits
        .iter()
        .zip(prev_logits)
        .map(|(&o, p)| tape.soft_target_cross_entropy(o, softmax_t(p, temperature), temperature))
        .collect();
    tape.mean(&terms)
}

/// The five loss components of one batch, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub csf: Var,
    pub fd: Var,
    pub rd: Var,
    pub dtr: Var,
    pub pd: Var,
}

impl LossTerms {
    /// `λ1·csf + λ2·(α·fd + β·(rd + dtr) + γ·pd)`, expanded into one weighted sum.
    pub fn combine(&self, tape: &mut Tape<'_>, w: &LossWeights) -> Var {
        let [c0, c1, c2, c3, c4] = w.coefficients();
        tape.weighted_sum(&[(self.csf, c0), (self.fd, c1), (self.rd, c2), (self.dtr, c3), (self.pd, c4)])
    }

    pub fn values(&self, tape: &Tape<'_>) -> [f64; 5] {
        [self.csf, self.fd, self.rd, self.dtr, self.pd].map(|v| tape.scalar(v))
    }
}
