//! Per-task training loop, the two baselines and the distillation steps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AcceptedPair};
use crate::config::{Mode, RunConfig, TeacherInput};
use crate::data::{RelationId, Sample, SampleId, Task, TaskSequence};
use crate::encoder::{Forward, Gradients, Model, ModelSnapshot};
use crate::error::{Error, Result};
use crate::eval::{strict_accuracy, AccuracyMatrix};
use crate::losses::{self, mine_triplet, LossTerms, LossWeights, TripletTargets};
use crate::memory::{MemoryStore, PseudoSample};
use crate::optim::Adam;
use crate::rng::{stream, Rng, Stream};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Classification-only training on the new task (or, for joint
    /// training, on everything seen so far).
    Adapt,
    /// Distillation on the (augmented) current-task data.
    Current,
    /// Distillation on the (augmented) memory.
    Replay,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Adapt => "adapt",
            Phase::Current => "current",
            Phase::Replay => "replay",
        }
    }
}

/// Loss values of one optimiser step, averaged over its micro-batches.
/// Distillation components are absent for classification-only steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub phase: Phase,
    pub csf: f64,
    pub distill: Option<[f64; 4]>,
    pub total: f64,
}

pub fn loss_trace_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,phase,csf,fd,rd,dtr,pd,total\n");
    for r in records {
        let _ = write!(out, "{},{},{}", r.step, r.phase.as_str(), r.csf);
        match r.distill {
            Some(d) => {
                for v in d {
                    let _ = write!(out, ",{v}");
                }
            }
            None => out.push_str(",,,,"),
        }
        let _ = writeln!(out, ",{}", r.total);
    }
    out
}

/// Teacher-side constants for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets {
    pub f_prev: Vec<Vec<f64>>,
    pub h_prev: Vec<Vec<f64>>,
    pub o_prev: Vec<Vec<f64>>,
    pub triplets: Vec<Option<TripletTargets>>,
}

/// Student tape nodes for one batch.
struct StudentPass {
    features: Vec<Var>,
    hidden: Vec<Var>,
    logits: Vec<Var>,
}

fn student_pass<'a>(
    tape: &mut Tape<'a>,
    model: &'a Model,
    bound: &crate::encoder::Bound,
    batch: &[Sample],
    mut dropout: Option<&mut Rng>,
) -> Result<StudentPass> {
    let mut pass = StudentPass {
        features: Vec::with_capacity(batch.len()),
        hidden: Vec::with_capacity(batch.len()),
        logits: Vec::with_capacity(batch.len()),
    };
    for s in batch {
        let f = model.features_on(tape, bound, s)?;
        let h = model.hidden_on(tape, bound, f, dropout.as_deref_mut())?;
        let o = model.logits_on(tape, bound, h)?;
        pass.features.push(f);
        pass.hidden.push(h);
        pass.logits.push(o);
    }
    Ok(pass)
}

fn labels(model: &Model, batch: &[Sample]) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|s| {
            model
                .class_of(s.relation)
                .ok_or_else(|| Error::contract(format!("relation {} has no classifier row", s.relation)))
        })
        .collect()
}

fn row_values(tape: &Tape<'_>, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter().map(|&v| tape.value(v).iter().copied().collect()).collect()
}

/// Gradients of the mean classification loss over `batch`.
pub fn classification_gradients(
    model: &Model,
    batch: &[Sample],
    dropout: Option<&mut Rng>,
) -> Result<(Gradients, LossRecord)> {
    let y = labels(model, batch)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let pass = student_pass(&mut tape, model, &bound, batch, dropout)?;
    let csf = losses::csf_term(&mut tape, &pass.logits, &y);
    let value = tape.scalar(csf);
    let grads = model.compute_gradients(&tape, &bound, csf)?;
    let record = LossRecord {
        step: 0,
        phase: Phase::Adapt,
        csf: value,
        distill: None,
        total: value,
    };
    Ok((grads, record))
}

/// Eval-mode teacher outputs, cached per sample id for the current task.
pub struct TeacherCache<'t> {
    teacher: &'t Model,
    cache: HashMap<SampleId, Forward>,
}

impl<'t> TeacherCache<'t> {
    pub fn new(teacher: &'t Model) -> Self {
        TeacherCache {
            teacher,
            cache: HashMap::new(),
        }
    }

    fn forward(&mut self, sample: &Sample) -> Result<&Forward> {
        if !self.cache.contains_key(&sample.id) {
            let fwd = self.teacher.forward(sample)?;
            self.cache.insert(sample.id, fwd);
        }
        Ok(&self.cache[&sample.id])
    }

    /// Teacher features, hidden vectors and logits for `batch`, plus mined
    /// triplets. `f_cur`/`h_cur` are the student's values, used in serial
    /// mode as inputs to the teacher's projection and classifier.
    pub fn targets(
        &mut self,
        batch: &[Sample],
        f_cur: &[Vec<f64>],
        h_cur: &[Vec<f64>],
        pseudo: &[PseudoSample],
        mode: TeacherInput,
    ) -> Result<BatchTargets> {
        let mut t = BatchTargets {
            f_prev: Vec::with_capacity(batch.len()),
            h_prev: Vec::with_capacity(batch.len()),
            o_prev: Vec::with_capacity(batch.len()),
            triplets: Vec::with_capacity(batch.len()),
        };
        for (k, s) in batch.iter().enumerate() {
            let fwd = self.forward(s)?.clone();
            let (h, o) = match mode {
                TeacherInput::Independent => (fwd.hidden, fwd.logits),
                TeacherInput::Serial => (
                    self.teacher.project_hidden(&f_cur[k], None)?,
                    self.teacher.classify(&h_cur[k])?,
                ),
            };
            t.f_prev.push(fwd.features);
            t.h_prev.push(h);
            t.o_prev.push(o);
        }
        let mut pool: Vec<(&[f64], RelationId)> = pseudo.iter().map(|p| (p.vector.as_slice(), p.relation)).collect();
        pool.extend(t.h_prev.iter().zip(batch).map(|(h, s)| (h.as_slice(), s.relation)));
        for (h, s) in t.h_prev.iter().zip(batch) {
            t.triplets.push(match mine_triplet(h, s.relation, &pool) {
                Ok(tr) => Some(tr),
                Err(Error::Mining(_)) => None,
                Err(e) => return Err(e),
            });
        }
        Ok(t)
    }
}

fn distill_terms(
    tape: &mut Tape<'_>,
    pass: &StudentPass,
    labels: &[usize],
    targets: &BatchTargets,
    temperature: f64,
) -> LossTerms {
    LossTerms {
        csf: losses::csf_term(tape, &pass.logits, labels),
        fd: losses::cosine_term(tape, &pass.features, &targets.f_prev),
        rd: losses::cosine_term(tape, &pass.hidden, &targets.h_prev),
        dtr: losses::triplet_term(tape, &pass.hidden, &targets.triplets),
        pd: losses::pd_term(tape, &pass.logits, &targets.o_prev, temperature),
    }
}

fn distill_record(values: [f64; 5], total: f64, phase: Phase) -> LossRecord {
    LossRecord {
        step: 0,
        phase,
        csf: values[0],
        distill: Some([values[1], values[2], values[3], values[4]]),
        total,
    }
}

/// Gradients of the final loss on `batch` against a teacher. Teacher
/// quantities and mined triplets are constants.
pub fn distillation_gradients(
    model: &Model,
    teacher: &mut TeacherCache<'_>,
    batch: &[Sample],
    pseudo: &[PseudoSample],
    weights: &LossWeights,
    mode: TeacherInput,
    dropout: Option<&mut Rng>,
) -> Result<(Gradients, LossRecord)> {
    let y = labels(model, batch)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let pass = student_pass(&mut tape, model, &bound, batch, dropout)?;
    let f_cur = row_values(&tape, &pass.features);
    let h_cur = row_values(&tape, &pass.hidden);
    let targets = teacher.targets(batch, &f_cur, &h_cur, pseudo, mode)?;
    let terms = distill_terms(&mut tape, &pass, &y, &targets, weights.temperature);
    let loss = terms.combine(&mut tape, weights);
    let record = distill_record(terms.values(&tape), tape.scalar(loss), Phase::Current);
    let grads = model.compute_gradients(&tape, &bound, loss)?;
    Ok((grads, record))
}

/// The final loss on `batch` with fixed teacher targets: its value, the
/// five component values and the gradients. Used for gradient checks.
pub fn distillation_objective(
    model: &Model,
    batch: &[Sample],
    targets: &BatchTargets,
    weights: &LossWeights,
) -> Result<(f64, [f64; 5], Gradients)> {
    let y = labels(model, batch)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let pass = student_pass(&mut tape, model, &bound, batch, None)?;
    let terms = distill_terms(&mut tape, &pass, &y, targets, weights.temperature);
    let loss = terms.combine(&mut tape, weights);
    let grads = model.compute_gradients(&tape, &bound, loss)?;
    Ok((tape.scalar(loss), terms.values(&tape), grads))
}

/// Shuffled micro-batch schedule: epochs × groups of up to `accum`
/// micro-batches of up to `batch_size` samples.
pub fn schedule(n: usize, epochs: usize, batch_size: usize, accum: usize, rng: &mut Rng) -> Vec<Vec<Vec<usize>>> {
    let mut steps = Vec::new();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let micro: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        for group in micro.chunks(accum) {
            steps.push(group.to_vec());
        }
    }
    steps
}

/// Runs one optimiser step per schedule entry, summing the gradients of
/// the entry's micro-batches. Returns one loss record per step.
pub fn train_steps<F>(
    model: &mut Model,
    adam: &mut Adam,
    data: &[Sample],
    steps: &[Vec<Vec<usize>>],
    phase: Phase,
    mut grad_fn: F,
) -> Result<Vec<LossRecord>>
where
    F: FnMut(&Model, &[Sample]) -> Result<(Gradients, LossRecord)>,
{
    let mut records = Vec::with_capacity(steps.len());
    for group in steps {
        let mut total: Option<Gradients> = None;
        let mut acc = LossRecord {
            step: 0,
            phase,
            csf: 0.0,
            distill: None,
            total: 0.0,
        };
        for idx in group {
            let batch: Vec<Sample> = idx.iter().map(|&i| data[i].clone()).collect();
            let (g, rec) = grad_fn(model, &batch)?;
            match &mut total {
                Some(t) => t.accumulate(&g),
                None => total = Some(g),
            }
            let w = 1.0 / group.len() as f64;
            acc.csf += w * rec.csf;
            acc.total += w * rec.total;
            if let Some(d) = rec.distill {
                let a = acc.distill.get_or_insert([0.0; 4]);
                for (x, y) in a.iter_mut().zip(d) {
                    *x += w * y;
                }
            }
        }
        if let Some(g) = total {
            adam.step(model, &g)?;
            if !model.all_finite() {
                return Err(Error::Training {
                    param: "model".into(),
                    message: "non-finite parameter after update".into(),
                });
            }
        }
        records.push(acc);
    }
    Ok(records)
}

/// What a single task produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub accuracies: Vec<f64>,
    pub average_accuracy: f64,
    pub seconds: f64,
    pub memory_exemplars: usize,
    pub augmented_current: usize,
    pub augmented_replay: usize,
    pub trace: Vec<LossRecord>,
    #[serde(skip)]
    pub accepted_pairs: Vec<AcceptedPair>,
}

/// Inputs of the two distillation phases of one task.
#[derive(Clone, Debug)]
pub struct DistillInputs {
    pub current: Vec<Sample>,
    pub replay: Vec<Sample>,
    pub pseudo: Vec<PseudoSample>,
    pub pairs: Vec<AcceptedPair>,
}

/// Training state across a task sequence.
pub struct Trainer<'s> {
    seq: &'s TaskSequence,
    cfg: RunConfig,
    model: Option<Model>,
    teacher: Option<ModelSnapshot>,
    memory: MemoryStore,
    adam: Adam,
    observed: Vec<RelationId>,
    matrix: AccuracyMatrix,
    next_id: u64,
    step: usize,
    trace: Vec<LossRecord>,
    data_rng: Rng,
    dropout_rng: Rng,
    current_task: usize,
}

impl<'s> Trainer<'s> {
    pub fn new(seq: &'s TaskSequence, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.encoder_config(seq.vocab_size()).validate()?;
        let adam = Adam::new(cfg.adam.clone());
        Ok(Trainer {
            seq,
            adam,
            model: None,
            teacher: None,
            memory: MemoryStore::new(),
            observed: Vec::new(),
            matrix: AccuracyMatrix::new(seq.tasks.len()),
            next_id: seq.max_sample_id().0 + 1,
            step: 0,
            trace: Vec::new(),
            data_rng: stream(cfg.seed, 0, Stream::Data),
            dropout_rng: stream(cfg.seed, 0, Stream::Dropout),
            current_task: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> Option<&Model> {
        self.model.as_ref()
    }

    pub fn model_mut(&mut self) -> Option<&mut Model> {
        self.model.as_mut()
    }

    pub fn teacher(&self) -> Option<&ModelSnapshot> {
        self.teacher.as_ref()
    }

    pub fn memory(&self) -> &MemoryStore {
        &self.memory
    }

    pub fn observed(&self) -> &[RelationId] {
        &self.observed
    }

    pub fn matrix(&self) -> &AccuracyMatrix {
        &self.matrix
    }

    pub fn trace(&self) -> &[LossRecord] {
        &self.trace
    }

    fn task(&self, j: usize) -> Result<&'s Task> {
        j.checked_sub(1)
            .and_then(|k| self.seq.tasks.get(k))
            .ok_or_else(|| Error::contract(format!("task {j} does not exist")))
    }

    fn record(&mut self, records: Vec<LossRecord>) {
        for mut r in records {
            self.step += 1;
            r.step = self.step;
            self.trace.push(r);
        }
    }

    /// Starts task `j`: grows (or, for joint training, rebuilds) the
    /// classifier and trains on the new data with the classification loss.
    pub fn adapt(&mut self, j: usize) -> Result<()> {
        let task = self.task(j)?;
        if task.train.is_empty() {
            return Err(Error::contract(format!("task {j} has no training data")));
        }
        if task.relations.iter().any(|r| self.observed.contains(r)) {
            return Err(Error::contract(format!("task {j} repeats an observed relation")));
        }
        self.current_task = j;
        self.trace.clear();
        self.data_rng = stream(self.cfg.seed, j, Stream::Data);
        self.dropout_rng = stream(self.cfg.seed, j, Stream::Dropout);
        let mut init_rng = stream(self.cfg.seed, j, Stream::Init);
        self.observed.extend(task.relations.iter().copied());

        let train: Vec<Sample> = if self.cfg.mode == Mode::Joint {
            let enc = self.cfg.encoder_config(self.seq.vocab_size());
            self.model = Some(Model::new(enc, &self.observed, &mut init_rng)?);
            self.adam = Adam::new(self.cfg.adam.clone());
            self.seq.tasks[..j].iter().flat_map(|t| t.train.iter().cloned()).collect()
        } else {
            match &mut self.model {
                Some(m) => m.extend_classifier(&task.relations, &mut init_rng)?,
                None => {
                    let enc = self.cfg.encoder_config(self.seq.vocab_size());
                    self.model = Some(Model::new(enc, &task.relations, &mut init_rng)?);
                }
            }
            task.train.clone()
        };

        let steps = schedule(
            train.len(),
            self.cfg.epochs_adapt,
            self.cfg.batch_size,
            self.cfg.grad_accum,
            &mut self.data_rng,
        );
        let model = self.model.as_mut().expect("model initialised above");
        let dropout = &mut self.dropout_rng;
        let records = train_steps(model, &mut self.adam, &train, &steps, Phase::Adapt, |m, b| {
            classification_gradients(m, b, Some(dropout))
        })?;
        self.record(records);
        Ok(())
    }

    /// Admits exemplars for task `j`'s relations and refreshes every prototype.
    pub fn build_memory(&mut self, j: usize) -> Result<()> {
        let task = self.task(j)?;
        let model = self.model.as_ref().ok_or_else(|| Error::contract("no model to build memory with"))?;
        let mut rng = stream(self.cfg.seed, j, Stream::Memory);
        self.memory
            .admit(model, j, &task.relations, &task.train, self.cfg.memory_size, &mut rng)?;
        self.memory.refresh_prototypes(model)
    }

    /// Augmented current data and memory plus fresh pseudo samples.
    pub fn distillation_inputs(&mut self, j: usize) -> Result<DistillInputs> {
        let task = self.task(j)?;
        let model = self.model.as_ref().ok_or_else(|| Error::contract("no model"))?;
        let memory = self.memory.samples();
        let (current, replay, pairs) = if self.cfg.augment {
            let out = augment(&task.train, &memory, model, self.cfg.tau, self.cfg.augment_cap, &mut self.next_id)?;
            (out.dataset, out.memory, out.pairs)
        } else {
            (task.train.clone(), memory, Vec::new())
        };
        let mut noise = stream(self.cfg.seed, j, Stream::Noise);
        let pseudo = self.memory.generate_pseudo(self.cfg.pseudo_per_relation, &mut noise)?;
        Ok(DistillInputs {
            current,
            replay,
            pseudo,
            pairs,
        })
    }

    /// `epochs_sckd` epochs of distillation training on `data`.
    pub fn sckd_phase(&mut self, phase: Phase, data: &[Sample], pseudo: &[PseudoSample]) -> Result<()> {
        let teacher = self
            .teacher
            .as_ref()
            .ok_or_else(|| Error::contract("distillation needs a teacher"))?;
        if data.is_empty() {
            return Ok(());
        }
        let steps = schedule(
            data.len(),
            self.cfg.epochs_sckd,
            self.cfg.batch_size,
            self.cfg.grad_accum,
            &mut self.data_rng,
        );
        let model = self.model.as_mut().ok_or_else(|| Error::contract("no model"))?;
        let mut cache = TeacherCache::new(teacher);
        let dropout = &mut self.dropout_rng;
        let (weights, mode) = (&self.cfg.weights, self.cfg.teacher_input);
        let records = train_steps(model, &mut self.adam, data, &steps, phase, |m, b| {
            let (g, mut r) = distillation_gradients(m, &mut cache, b, pseudo, weights, mode, Some(dropout))?;
            r.phase = phase;
            Ok((g, r))
        })?;
        self.record(records);
        Ok(())
    }

    /// Evaluates on every seen task and snapshots the teacher for the next task.
    pub fn finish_task(&mut self, j: usize) -> Result<Vec<f64>> {
        let model = self.model.as_ref().ok_or_else(|| Error::contract("no model"))?;
        let row = self.seq.tasks[..j]
            .iter()
            .map(|t| strict_accuracy(model, &t.test))
            .collect::<Result<Vec<_>>>()?;
        self.matrix.push_row(row.clone())?;
        self.teacher = Some(model.snapshot());
        Ok(row)
    }

    /// Runs every stage of task `j` in order.
    pub fn train_task(&mut self, j: usize) -> Result<TaskReport> {
        let start = Instant::now();
        self.adapt(j)?;
        let mut report_aug = (0, 0, Vec::new());
        if self.cfg.mode == Mode::Sckd {
            self.build_memory(j)?;
            if self.teacher.is_some() {
                let inputs = self.distillation_inputs(j)?;
                let task = self.task(j)?;
                report_aug = (
                    inputs.current.len() - task.train.len(),
                    inputs.replay.len() - self.memory.total_exemplars(),
                    inputs.pairs,
                );
                self.sckd_phase(Phase::Current, &inputs.current, &inputs.pseudo)?;
                self.sckd_phase(Phase::Replay, &inputs.replay, &inputs.pseudo)?;
            }
        }
        let accuracies = self.finish_task(j)?;
        let average_accuracy = self.matrix.average_accuracy(j)?;
        log::info!("task {j}: average accuracy {average_accuracy:.4}");
        Ok(TaskReport {
            task: j,
            accuracies,
            average_accuracy,
            seconds: start.elapsed().as_secs_f64(),
            memory_exemplars: self.memory.total_exemplars(),
            augmented_current: report_aug.0,
            augmented_replay: report_aug.1,
            trace: self.trace.clone(),
            accepted_pairs: report_aug.2,
        })
    }
}

/// Result of a full run.
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub reports: Vec<TaskReport>,
    pub model: Model,
    pub memory: MemoryStore,
}

impl RunOutcome {
    pub fn final_average(&self) -> f64 {
        self.matrix.final_average().unwrap_or(0.0)
    }

    pub fn bwt(&self) -> Option<f64> {
        self.matrix.bwt().ok().flatten()
    }
}

/// Trains over the whole sequence, calling `on_task` after each task.
pub fn run_sequence<F>(seq: &TaskSequence, cfg: &RunConfig, mut on_task: F) -> Result<RunOutcome>
where
    F: FnMut(&TaskReport, &Trainer<'_>) -> Result<()>,
{
    let mut trainer = Trainer::new(seq, cfg.clone())?;
    let mut reports = Vec::with_capacity(seq.tasks.len());
    for j in 1..=seq.tasks.len() {
        let report = trainer.train_task(j)?;
        on_task(&report, &trainer)?;
        reports.push(report);
    }
    Ok(RunOutcome {
        matrix: trainer.matrix.clone(),
        reports,
        model: trainer.model.take().expect("at least one task"),
        memory: trainer.memory,
    })
}

/// [`run_sequence`] with the given mode, ignoring per-task callbacks.
pub fn run_baseline(seq: &TaskSequence, cfg: &RunConfig, mode: Mode) -> Result<AccuracyMatrix> {
    let cfg = RunConfig { mode, ..cfg.clone() };
    Ok(run_sequence(seq, &cfg, |_, _| Ok(()))?.matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_sequence, SyntheticConfig};

    fn tiny_seq() -> TaskSequence {
        generate_synthetic_sequence(&SyntheticConfig {
            seed: 1,
            n_tasks: 3,
            n_ways: 3,
            k_shots: 2,
            first_task_samples: 6,
            test_per_relation: 3,
            vocab_size: 60,
            cluster_spread: 0.1,
        })
        .unwrap()
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            epochs_adapt: 2,
            epochs_sckd: 1,
            model_dim: 8,
            heads: 2,
            ffn_dim: 8,
            hidden_dim: 8,
            ..RunConfig::default()
        }
    }

    #[test]
    fn schedule_covers_every_sample_each_epoch() {
        let mut rng = stream(1, 1, Stream::Data);
        let steps = schedule(70, 2, 16, 4, &mut rng);
        assert_eq!(steps.len(), 4);
        assert_eq!(steps[1].len(), 1);
        let mut seen: Vec<usize> = steps[..2].iter().flatten().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..70).collect::<Vec<_>>());
    }

    #[test]
    fn zero_adapt_epochs_only_extend_the_classifier() {
        let seq = tiny_seq();
        let cfg = RunConfig {
            epochs_adapt: 0,
            ..tiny_cfg()
        };
        let mut t = Trainer::new(&seq, cfg.clone()).unwrap();
        t.adapt(1).unwrap();
        let fresh = Model::new(
            cfg.encoder_config(seq.vocab_size()),
            &seq.tasks[0].relations,
            &mut stream(cfg.seed, 1, Stream::Init),
        )
        .unwrap();
        assert_eq!(t.model().unwrap(), &fresh);
        assert!(t.trace().is_empty());
    }

    #[test]
    fn first_task_has_no_distillation() {
        let seq = tiny_seq();
        let mut t = Trainer::new(&seq, tiny_cfg()).unwrap();
        let report = t.train_task(1).unwrap();
        assert!(report.trace.iter().all(|r| r.phase == Phase::Adapt && r.distill.is_none()));
        assert!(t.teacher().is_some());
        let report = t.train_task(2).unwrap();
        assert!(report.trace.iter().any(|r| r.phase == Phase::Replay && r.distill.is_some()));
    }

    #[test]
    fn loss_trace_has_empty_distill_columns_for_adapt_steps() {
        let recs = vec![
            LossRecord {
                step: 1,
                phase: Phase::Adapt,
                csf: 0.5,
                distill: None,
                total: 0.5,
            },
            LossRecord {
                step: 2,
                phase: Phase::Replay,
                csf: 0.5,
                distill: Some([1.0, 2.0, 3.0, 4.0]),
                total: 6.0,
            },
        ];
        assert_eq!(
            loss_trace_csv(&recs),
            "step,phase,csf,fd,rd,dtr,pd,total\n1,adapt,0.5,,,,,0.5\n2,replay,0.5,1,2,3,4,6\n"
        );
    }

    #[test]
    fn missing_teacher_is_a_contract_error() {
        let seq = tiny_seq();
        let mut t = Trainer::new(&seq, tiny_cfg()).unwrap();
        t.adapt(1).unwrap();
        let data = seq.tasks[0].train.clone();
        assert!(matches!(t.sckd_phase(Phase::Current, &data, &[]), Err(Error::Contract(_))));
    }
}
