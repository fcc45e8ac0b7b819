//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints its verdict line even when it passes; exits non-zero if
//! any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use continual_fewshot::config::{Ablation, Mode, RunConfig, TeacherInput};
use continual_fewshot::data::{generate_synthetic_sequence, RelationId, Sample, SampleId, SyntheticConfig, TaskSequence};
use continual_fewshot::encoder::{EncoderConfig, Model, ParamGroup, ParamId};
use continual_fewshot::eval::AccuracyMatrix;
use continual_fewshot::losses::{cosine_distill_loss, prediction_distill_loss, LossWeights};
use continual_fewshot::memory::{kmeans_pp_init, select_typical, PseudoSample};
use continual_fewshot::optim::{Adam, AdamConfig};
use continual_fewshot::rng::{stream, Stream};
use continual_fewshot::trainer::{
    classification_gradients, distillation_gradients, distillation_objective, run_baseline, schedule, train_steps,
    Phase, TeacherCache, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bits(m: &Model) -> Vec<u64> {
    m.params().flat_map(|(_, a)| a.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
}

fn tiny_encoder(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        model_dim: 8,
        heads: 2,
        ffn_dim: 8,
        hidden_dim: 8,
        ..EncoderConfig::new(vocab)
    }
}

fn small_sequence(seed: u64, tasks: usize, ways: usize, shots: usize) -> TaskSequence {
    generate_synthetic_sequence(&SyntheticConfig {
        seed,
        n_tasks: tasks,
        n_ways: ways,
        k_shots: shots,
        first_task_samples: shots + 3,
        test_per_relation: 3,
        vocab_size: 2 + tasks * ways * 3 + 40,
        cluster_spread: 0.3,
    })
    .unwrap()
}

// ---------------------------------------------------------------- 1

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let seq = small_sequence(3, 2, 3, 4);
    let enc = tiny_encoder(seq.vocab_size());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut model = Model::new(enc.clone(), &seq.tasks[0].relations, &mut rng).unwrap();
    let teacher = Model::new(enc, &seq.tasks[0].relations, &mut rng).unwrap().snapshot();
    model.extend_classifier(&seq.tasks[1].relations, &mut rng).unwrap();
    let batch: Vec<Sample> = seq.tasks[1].train.iter().step_by(2).chain(seq.tasks[0].train.iter().step_by(5)).cloned().collect();

    let f: Vec<Vec<f64>> = batch.iter().map(|s| model.encode_features(s).unwrap()).collect();
    let h: Vec<Vec<f64>> = f.iter().map(|x| model.project_hidden(x, None).unwrap()).collect();
    let pseudo: Vec<PseudoSample> = batch
        .iter()
        .map(|s| PseudoSample {
            relation: s.relation,
            vector: teacher.hidden_of(s).unwrap().iter().map(|x| x + rng.random::<f64>() - 0.5).collect(),
        })
        .collect();
    let targets = TeacherCache::new(&teacher)
        .targets(&batch, &f, &h, &pseudo, TeacherInput::Serial)
        .unwrap();
    ensure(targets.triplets.iter().all(Option::is_some), || "triplet pool incomplete".into())?;

    let zero = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        lambda1: 0.0,
        lambda2: 1.0,
        rd_weight: 0.0,
        dtr_weight: 0.0,
        ..LossWeights::default()
    };
    let settings = [
        ("csf", LossWeights { lambda1: 1.0, ..zero.clone() }),
        ("fd", LossWeights { alpha: 1.0, ..zero.clone() }),
        ("rd", LossWeights { beta: 1.0, rd_weight: 1.0, ..zero.clone() }),
        ("dtr", LossWeights { beta: 1.0, dtr_weight: 1.0, ..zero.clone() }),
        ("pd", LossWeights { gamma: 1.0, ..zero.clone() }),
        ("final", LossWeights::default()),
    ];

    let mut coords = Vec::new();
    let mut pick = ChaCha8Rng::seed_from_u64(99);
    for id in ParamId::ALL {
        let (r, c) = model.param(id).dim();
        for _ in 0..3 {
            coords.push((id, pick.random_range(0..r), pick.random_range(0..c)));
        }
    }
    for g in [ParamGroup::Encoder, ParamGroup::Projection, ParamGroup::Classifier] {
        ensure(coords.iter().any(|(id, _, _)| id.group() == g), || format!("no {g:?} coordinate"))?;
    }

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, w) in &settings {
        let (value, _, grads) = distillation_objective(&model, &batch, &targets, w).unwrap();
        ensure(value.is_finite() && value > 0.0, || format!("{name}: degenerate loss {value}"))?;
        for &(id, r, c) in &coords {
            let mut probe = model.clone();
            let x0 = probe.param(id)[[r, c]];
            probe.param_mut(id)[[r, c]] = x0 + step;
            let up = distillation_objective(&probe, &batch, &targets, w).unwrap().0;
            probe.param_mut(id)[[r, c]] = x0 - step;
            let down = distillation_objective(&probe, &batch, &targets, w).unwrap().0;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id)[[r, c]];
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            worst = worst.max(err);
            ensure(err <= 1e-4, || format!("{name} {}[{r},{c}]: analytic {analytic} numeric {numeric}", id.name()))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} coordinates x 6 losses, worst relative error {worst:.2e}, {secs:.1}s", coords.len()))
}

// ---------------------------------------------------------------- 2

fn loss_oracles() -> Outcome {
    let oracle = |prev: &[f64], cur: &[f64], t: f64| -> f64 {
        let soft = |z: &[f64]| {
            let e: Vec<f64> = z.iter().map(|x| (x / t).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (soft(prev), soft(&cur[..prev.len()]));
        -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>()
    };
    let pd = |prev: Vec<f64>, cur: Vec<f64>, t: f64| prediction_distill_loss(&[prev], &[cur], t).unwrap();

    let v = pd(vec![1.0, 0.0], vec![0.0, 1.0], 1.0);
    ensure((v - oracle(&[1.0, 0.0], &[0.0, 1.0], 1.0)).abs() <= 1e-10, || format!("[1,0]/[0,1]: {v}"))?;
    ensure((v - 1.0445).abs() <= 5e-4, || format!("[1,0]/[0,1] far from 1.0445: {v}"))?;
    let u = pd(vec![0.0, 0.0], vec![0.0, 0.0], 1.0);
    ensure((u - 2f64.ln()).abs() <= 1e-10, || format!("uniform: {u}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let m = rng.random_range(1..6);
        let prev: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let cur: Vec<f64> = (0..m + rng.random_range(0..3)).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let t = [0.08, 0.5, 1.0, 2.0][rng.random_range(0..4)];
        let (a, b) = (pd(prev.clone(), cur.clone(), t), oracle(&prev, &cur, t));
        ensure((a - b).abs() <= 1e-10 * b.max(1.0), || format!("random case: {a} vs {b}"))?;
    }
    let e = [1.0, 0.0, 0.0];
    for (cur, want) in [([1.0, 0.0, 0.0], 0.0), ([0.0, 1.0, 0.0], 1.0), ([-1.0, 0.0, 0.0], 2.0)] {
        let got = cosine_distill_loss(&[e.to_vec()], &[cur.to_vec()]).unwrap();
        ensure(got == want, || format!("cosine {cur:?}: {got} != {want}"))?;
    }
    Ok(format!("[1,0] vs [0,1] at T=1 = {v:.7}, uniform = ln 2, cosine 0/1/2 exact"))
}

// ---------------------------------------------------------------- 3

fn kmeans_oracle() -> Outcome {
    let ids = |n: usize| (0..n as u64).map(SampleId).collect::<Vec<_>>();
    let pts: Vec<Vec<f64>> = [0.0, 1.0, 5.0, 20.0, 21.0, 25.0].iter().map(|&x| vec![x]).collect();
    let got = select_typical(&ids(6), &pts, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let init = kmeans_pp_init(&pts, 2, &mut ChaCha8Rng::seed_from_u64(1));
    ensure(got == common::brute_force_typical(&ids(6), &pts, &init), || "1-D instance differs from oracle".into())?;
    ensure(got == vec![SampleId(1), SampleId(4)], || format!("1-D instance picked {got:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let n = rng.random_range(1..=8);
        let dim = rng.random_range(1..=3);
        let k = rng.random_range(1..=2);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>() * 10.0).collect()).collect();
        let seed = rng.random::<u64>();
        let got = select_typical(&ids(n), &pts, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let init = kmeans_pp_init(&pts, k, &mut ChaCha8Rng::seed_from_u64(seed));
        let want = common::brute_force_typical(&ids(n), &pts, &init);
        ensure(got == want, || format!("case {case}: {got:?} vs {want:?}"))?;
    }
    Ok("1-D instance -> {1, 21}; 20 random instances identical".into())
}

// ---------------------------------------------------------------- 4

fn structural_exactness() -> Outcome {
    let seq = small_sequence(5, 8, 3, 3);
    let l = 2;
    let cfg = RunConfig {
        epochs_adapt: 2,
        epochs_sckd: 1,
        memory_size: l,
        model_dim: 8,
        heads: 2,
        ffn_dim: 8,
        hidden_dim: 8,
        adam: desk_adam(),
        ..RunConfig::default()
    };
    let mut trainer = Trainer::new(&seq, cfg).unwrap();
    let mut expected = 0;
    for j in 1..=seq.tasks.len() {
        trainer.adapt(j).unwrap();
        trainer.build_memory(j).unwrap();
        expected += l * seq.tasks[j - 1].relations.len();
        let got = trainer.memory().total_exemplars();
        ensure(got == expected, || format!("task {j}: {got} exemplars, expected {expected}"))?;
        if j > 1 {
            let inputs = trainer.distillation_inputs(j).unwrap();
            let before = bits(trainer.teacher().unwrap());
            trainer.sckd_phase(Phase::Current, &inputs.current, &inputs.pseudo).unwrap();
            ensure(bits(trainer.teacher().unwrap()) == before, || format!("task {j}: teacher moved in current phase"))?;
            trainer.sckd_phase(Phase::Replay, &inputs.replay, &inputs.pseudo).unwrap();
            ensure(bits(trainer.teacher().unwrap()) == before, || format!("task {j}: teacher moved in replay phase"))?;
        }
        trainer.finish_task(j).unwrap();
    }

    let mut model = trainer.model().unwrap().clone();
    let probe: Vec<&Sample> = seq.tasks.iter().flat_map(|t| &t.test).collect();
    let before: Vec<Vec<f64>> = probe.iter().map(|s| model.forward(s).unwrap().logits).collect();
    model
        .extend_classifier(&[RelationId(900), RelationId(901)], &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    for (s, old) in probe.iter().zip(&before) {
        let new = model.forward(s).unwrap().logits;
        let same = old.iter().zip(&new).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && new.len() == old.len() + 2, || "extension changed old logits".into())?;
    }

    let m = trainer.matrix();
    let rows = m.rows();
    let n = rows.len();
    for j in 1..=n {
        let mut s = 0.0;
        for x in &rows[j - 1] {
            s += x;
        }
        let d = (m.average_accuracy(j).unwrap() - s / j as f64).abs();
        ensure(d <= 1e-15, || format!("average accuracy row {j} off by {d}"))?;
    }
    let mut s = 0.0;
    for i in 0..n - 1 {
        s += rows[n - 1][i] - rows[i][i];
    }
    let d = (m.bwt().unwrap().unwrap() - s / (n - 1) as f64).abs();
    ensure(d <= 1e-15, || format!("bwt off by {d}"))?;
    Ok(format!("{expected} exemplars after 8 tasks; teacher fixed in 14 phases; old logits bit-identical; metrics exact"))
}

// ---------------------------------------------------------------- 5

fn ablation_identity() -> Outcome {
    let seq = small_sequence(6, 2, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let enc = EncoderConfig {
        model_dim: 16,
        heads: 2,
        ffn_dim: 16,
        hidden_dim: 16,
        ..EncoderConfig::new(seq.vocab_size())
    };
    let mut model = Model::new(enc, &seq.tasks[0].relations, &mut rng).unwrap();
    let teacher = model.snapshot();
    model.extend_classifier(&seq.tasks[1].relations, &mut rng).unwrap();
    let pseudo: Vec<PseudoSample> = seq.tasks[0]
        .train
        .iter()
        .map(|s| PseudoSample {
            relation: s.relation,
            vector: teacher.hidden_of(s).unwrap(),
        })
        .collect();
    let mut cfg = RunConfig::default();
    cfg.ablate(Ablation::NoDst);
    cfg.ablate(Ablation::NoAug);
    ensure(!cfg.augment && cfg.weights.lambda2 == 0.0, || "ablation switches not applied".into())?;

    let data = &seq.tasks[1].train;
    let steps = schedule(data.len(), 1, 4, cfg.grad_accum, &mut ChaCha8Rng::seed_from_u64(4));
    let one = &steps[..1];
    ensure(one[0].len() > 1, || "step has a single micro-batch".into())?;

    let mut sckd = model.clone();
    let mut adam_a = Adam::new(desk_adam());
    let mut drop_a = stream(1, 2, Stream::Dropout);
    let mut cache = TeacherCache::new(&teacher);
    let weights = cfg.weights.clone();
    train_steps(&mut sckd, &mut adam_a, data, one, Phase::Current, |m, b| {
        distillation_gradients(m, &mut cache, b, &pseudo, &weights, TeacherInput::Serial, Some(&mut drop_a))
    })
    .unwrap();

    let mut finetune = model.clone();
    let mut adam_b = Adam::new(desk_adam());
    let mut drop_b = stream(1, 2, Stream::Dropout);
    train_steps(&mut finetune, &mut adam_b, data, one, Phase::Adapt, |m, b| {
        classification_gradients(m, b, Some(&mut drop_b))
    })
    .unwrap();

    ensure(bits(&sckd) != bits(&model), || "step did not move the parameters".into())?;
    ensure(bits(&sckd) == bits(&finetune), || "updates differ".into())?;
    let n: usize = model.params().map(|(_, a)| a.len()).sum();
    Ok(format!("{n} parameters bit-identical after one accumulated step"))
}

// ---------------------------------------------------------------- 6-9

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn desk_adam() -> AdamConfig {
    AdamConfig {
        lr_encoder: 1e-3,
        lr_projection: 1e-3,
        lr_classifier: 1e-3,
        ..AdamConfig::default()
    }
}

/// 8 tasks, 10-way 5-shot, L = 1 and Table 6 weights; learning rates and
/// distillation epochs sized for a randomly initialised encoder.
fn desk_run(seed: u64) -> (TaskSequence, RunConfig) {
    let seq = generate_synthetic_sequence(&SyntheticConfig {
        seed,
        first_task_samples: 30,
        test_per_relation: 20,
        cluster_spread: 0.3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cfg = RunConfig {
        seed,
        epochs_sckd: 30,
        adam: desk_adam(),
        ..RunConfig::default()
    };
    (seq, cfg)
}

struct Stats {
    final_avg: f64,
    bwt: f64,
}

fn mean_over_seeds(mode: Mode, tweak: impl Fn(&mut RunConfig)) -> (Stats, Vec<AccuracyMatrix>) {
    let mut matrices = Vec::new();
    for seed in SEEDS {
        let (seq, mut cfg) = desk_run(seed);
        tweak(&mut cfg);
        matrices.push(run_baseline(&seq, &cfg, mode).unwrap());
    }
    let n = matrices.len() as f64;
    let stats = Stats {
        final_avg: matrices.iter().map(|m| m.final_average().unwrap()).sum::<f64>() / n,
        bwt: matrices.iter().map(|m| m.bwt().unwrap().unwrap()).sum::<f64>() / n,
    };
    (stats, matrices)
}

struct Directional {
    sckd: Stats,
    sckd_matrices: Vec<AccuracyMatrix>,
}

fn table1(d: &mut Option<Directional>) -> Outcome {
    let start = Instant::now();
    let (sckd, sckd_matrices) = mean_over_seeds(Mode::Sckd, |_| {});
    let (fine, _) = mean_over_seeds(Mode::Finetune, |_| {});
    let (joint, _) = mean_over_seeds(Mode::Joint, |_| {});
    let secs = start.elapsed().as_secs_f64();
    let line = format!(
        "final avg sckd {:.4} / finetune {:.4} / joint {:.4}; bwt sckd {:.4} / finetune {:.4}; {secs:.0}s",
        sckd.final_avg, fine.final_avg, joint.final_avg, sckd.bwt, fine.bwt
    );
    let checks = [
        (fine.final_avg < 0.35 * joint.final_avg, "(a) finetune not below 0.35x joint"),
        (sckd.final_avg >= fine.final_avg + 0.15, "(b) sckd not 15 points above finetune"),
        (sckd.bwt > fine.bwt, "(c) sckd bwt not above finetune"),
        (secs < 900.0, "runtime over 15 minutes"),
    ];
    *d = Some(Directional { sckd, sckd_matrices });
    match checks.iter().find(|(ok, _)| !ok) {
        None => Ok(line),
        Some((_, why)) => Err(format!("{why}: {line}")),
    }
}

fn table2(d: &Option<Directional>) -> Outcome {
    let d = d.as_ref().ok_or("criterion 6 runs unavailable")?;
    let full = d.sckd.final_avg;
    let no_aug = mean_over_seeds(Mode::Sckd, |c| c.ablate(Ablation::NoAug)).0.final_avg;
    let no_dst = mean_over_seeds(Mode::Sckd, |c| c.ablate(Ablation::NoDst)).0.final_avg;
    let no_both = mean_over_seeds(Mode::Sckd, |c| {
        c.ablate(Ablation::NoAug);
        c.ablate(Ablation::NoDst);
    })
    .0
    .final_avg;
    let line = format!("full {full:.4}, w/o aug {no_aug:.4}, w/o dst {no_dst:.4}, w/o both {no_both:.4}");
    if full >= no_aug && no_aug >= no_both && full > no_dst {
        Ok(line)
    } else {
        Err(format!("ordering violated: {line}"))
    }
}

fn table5(d: &Option<Directional>) -> Outcome {
    let d = d.as_ref().ok_or("criterion 6 runs unavailable")?;
    let l1 = d.sckd.final_avg;
    let l2 = mean_over_seeds(Mode::Sckd, |c| c.memory_size = 2).0.final_avg;
    let l3 = mean_over_seeds(Mode::Sckd, |c| c.memory_size = 3).0.final_avg;
    let line = format!("L=1 {l1:.4}, L=2 {l2:.4}, L=3 {l3:.4}");
    if l1 <= l2 && l2 <= l3 {
        Ok(line)
    } else {
        Err(format!("not non-decreasing: {line}"))
    }
}

fn determinism(d: &Option<Directional>) -> Outcome {
    let d = d.as_ref().ok_or("criterion 6 runs unavailable")?;
    let (seq, cfg) = desk_run(SEEDS[0]);
    let again = run_baseline(&seq, &cfg, Mode::Sckd).unwrap();
    let first = &d.sckd_matrices[0];
    let mut worst: f64 = 0.0;
    let mut identical = true;
    for (a, b) in first.rows().iter().zip(again.rows()) {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
            identical &= x.to_bits() == y.to_bits();
        }
    }
    ensure(first.rows().len() == again.rows().len(), || "row count differs".into())?;
    ensure(identical && worst <= 1e-12, || format!("max difference {worst:e}"))?;
    Ok("repeated run bit-identical".into())
}

fn main() {
    let verdicts: Vec<(u32, &str, Outcome)> = {
        let mut out = Vec::new();
        let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
            let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
                Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
            });
            println!("criterion {n} [{}] {name}: {}", if r.is_ok() { "PASS" } else { "FAIL" }, match &r {
                Ok(m) | Err(m) => m,
            });
            out.push((n, name, r));
        };
        let mut dir = None;
        run(1, "gradient correctness", &mut gradient_check);
        run(2, "loss oracles", &mut loss_oracles);
        run(3, "k-means oracle", &mut kmeans_oracle);
        run(4, "structural exactness", &mut structural_exactness);
        run(5, "ablation identity", &mut ablation_identity);
        run(6, "finetune collapse, sckd gain", &mut || table1(&mut dir));
        run(7, "module ablation ordering", &mut || table2(&dir));
        run(8, "memory size ordering", &mut || table5(&dir));
        run(9, "determinism", &mut || determinism(&dir));
        out
    };
    let failed: Vec<u32> = verdicts.iter().filter(|(_, _, r)| r.is_err()).map(|(n, _, _)| *n).collect();
    println!("acceptance: {} of {} criteria passed", verdicts.len() - failed.len(), verdicts.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
