//! `cfs`: train and evaluate continual few-shot relation classifiers.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use continual_fewshot::artifacts::{reps_csv, sweep_aggregate_csv, sweep_runs_csv, ArtifactWriter, SweepRun};
use continual_fewshot::config::{parse_key_values, RunConfig};
use continual_fewshot::data::{generate_synthetic_sequence, load_jsonl, write_jsonl, SyntheticConfig, TaskSequence};
use continual_fewshot::trainer::run_sequence;

#[derive(Parser)]
#[command(name = "cfs", version, about = "Continual few-shot relation classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over a task sequence and write metrics and artifacts.
    Run(RunArgs),
    /// Run a grid over memory sizes and seeds and aggregate the results.
    Sweep(SweepArgs),
    /// Write a synthetic task sequence as JSONL plus a vocabulary file.
    Generate(GenerateArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generate a synthetic sequence instead of loading a dataset.
    #[arg(long)]
    synthetic: bool,
    /// JSONL dataset file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Vocabulary file (defaults to vocab.txt next to the dataset).
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    first_task_samples: Option<usize>,
    #[arg(long)]
    test_per_relation: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    cluster_spread: Option<f64>,
    /// Seed for synthetic data (defaults to the run seed).
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    pseudo: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    epochs_adapt: Option<usize>,
    #[arg(long)]
    epochs_sckd: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_encoder: Option<f64>,
    #[arg(long)]
    lr_projection: Option<f64>,
    #[arg(long)]
    lr_classifier: Option<f64>,
    /// Baseline to run instead of the distillation pipeline.
    #[arg(long, value_parser = ["finetune", "joint"])]
    baseline: Option<String>,
    /// Ablation switch; may be repeated.
    #[arg(long, value_parser = ["no-dst", "no-aug", "no-fd", "no-rd", "no-dtr", "no-pd"])]
    ablate: Vec<String>,
    /// Any other configuration key, as key=value; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    memory: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write hidden representations of all test samples.
    #[arg(long)]
    dump_reps: bool,
    /// Also write the final model checkpoint and memory dump.
    #[arg(long)]
    save_model: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Memory sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    memory: Vec<usize>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "7")]
    seeds: Vec<u64>,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
}

/// Where the task sequence comes from.
#[derive(Clone, Debug)]
enum DataSource {
    Synthetic { cfg: SyntheticConfig, seed_fixed: bool },
    Jsonl { data: PathBuf, vocab: PathBuf },
}

impl DataSource {
    fn load(&self, run_seed: u64) -> Result<(TaskSequence, serde_json::Value)> {
        match self {
            DataSource::Synthetic { cfg, seed_fixed } => {
                let mut cfg = cfg.clone();
                if !seed_fixed {
                    cfg.seed = run_seed;
                }
                let seq = generate_synthetic_sequence(&cfg)?;
                let desc = serde_json::json!({
                    "source": "synthetic",
                    "seed": cfg.seed,
                    "tasks": cfg.n_tasks,
                    "ways": cfg.n_ways,
                    "shots": cfg.k_shots,
                    "first_task_samples": cfg.first_task_samples,
                    "test_per_relation": cfg.test_per_relation,
                    "vocab_size": cfg.vocab_size,
                    "cluster_spread": cfg.cluster_spread,
                });
                Ok((seq, desc))
            }
            DataSource::Jsonl { data, vocab } => {
                let seq = load_jsonl(data, vocab)
                    .with_context(|| format!("loading {}", data.display()))?;
                let desc = serde_json::json!({
                    "source": "jsonl",
                    "dataset": data.display().to_string(),
                    "vocab": vocab.display().to_string(),
                });
                Ok((seq, desc))
            }
        }
    }
}

struct Resolved {
    run: RunConfig,
    data: DataSource,
    dump_reps: bool,
}

fn set_data_key(syn: &mut SyntheticConfig, paths: &mut (Option<PathBuf>, Option<PathBuf>), flags: &mut (bool, bool), key: &str, value: &str) -> Result<bool> {
    let num = |v: &str| v.parse::<usize>().with_context(|| format!("invalid value '{v}' for {key}"));
    match key {
        "synthetic" => flags.0 = matches!(value, "true" | "yes" | "1" | "on"),
        "dataset" => paths.0 = Some(PathBuf::from(value)),
        "vocab" => paths.1 = Some(PathBuf::from(value)),
        "tasks" => syn.n_tasks = num(value)?,
        "ways" => syn.n_ways = num(value)?,
        "shots" => syn.k_shots = num(value)?,
        "first_task_samples" => syn.first_task_samples = num(value)?,
        "test_per_relation" => syn.test_per_relation = num(value)?,
        "vocab_size" => syn.vocab_size = num(value)?,
        "cluster_spread" => {
            syn.cluster_spread = value.parse().with_context(|| format!("invalid value '{value}' for {key}"))?
        }
        "data_seed" => {
            syn.seed = value.parse().with_context(|| format!("invalid value '{value}' for {key}"))?;
            flags.1 = true;
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Config file first, then flags, applied in that order.
fn resolve(common: &CommonArgs, extra: Vec<(String, String)>) -> Result<Resolved> {
    let mut pairs = Vec::new();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        pairs.extend(parse_key_values(&text)?);
    }
    let c = common;
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    let s = |x: Option<usize>| x.map(|v| v.to_string());
    let f = |x: Option<f64>| x.map(|v| v.to_string());
    flag("synthetic", c.synthetic.then(|| "true".to_string()));
    flag("dataset", c.dataset.as_ref().map(|p| p.display().to_string()));
    flag("vocab", c.vocab.as_ref().map(|p| p.display().to_string()));
    flag("tasks", s(c.tasks));
    flag("ways", s(c.ways));
    flag("shots", s(c.shots));
    flag("first_task_samples", s(c.first_task_samples));
    flag("test_per_relation", s(c.test_per_relation));
    flag("vocab_size", s(c.vocab_size));
    flag("cluster_spread", f(c.cluster_spread));
    flag("data_seed", c.data_seed.map(|v| v.to_string()));
    flag("pseudo", s(c.pseudo));
    flag("tau", f(c.tau));
    flag("temp", f(c.temp));
    flag("alpha", f(c.alpha));
    flag("beta", f(c.beta));
    flag("gamma", f(c.gamma));
    flag("lambda1", f(c.lambda1));
    flag("lambda2", f(c.lambda2));
    flag("epochs_adapt", s(c.epochs_adapt));
    flag("epochs_sckd", s(c.epochs_sckd));
    flag("batch_size", s(c.batch_size));
    flag("lr_encoder", f(c.lr_encoder));
    flag("lr_projection", f(c.lr_projection));
    flag("lr_classifier", f(c.lr_classifier));
    flag("mode", c.baseline.clone());
    for a in &c.ablate {
        flag("ablate", Some(a.clone()));
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        flag(k.trim(), Some(v.trim().to_string()));
    }
    pairs.extend(extra);

    let mut run = RunConfig::default();
    let mut syn = SyntheticConfig::default();
    let mut paths = (None, None);
    let mut flags = (false, false);
    let mut dump_reps = false;
    for (k, v) in &pairs {
        if k == "dump_reps" {
            dump_reps = matches!(v.as_str(), "true" | "yes" | "1" | "on");
            continue;
        }
        if set_data_key(&mut syn, &mut paths, &mut flags, k, v)? {
            continue;
        }
        if !run.set(k, v)? {
            bail!("unknown configuration key '{k}'");
        }
    }
    run.validate()?;
    let data = match (flags.0, paths.0) {
        (true, Some(_)) => bail!("--synthetic and --dataset are mutually exclusive"),
        (true, None) => DataSource::Synthetic {
            cfg: syn,
            seed_fixed: flags.1,
        },
        (false, Some(data)) => {
            let vocab = paths
                .1
                .unwrap_or_else(|| data.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
            DataSource::Jsonl { data, vocab }
        }
        (false, None) => bail!("either --synthetic or --dataset is required"),
    };
    Ok(Resolved { run, data, dump_reps })
}

struct RunResult {
    final_average: f64,
    bwt: Option<f64>,
    matrix: continual_fewshot::eval::AccuracyMatrix,
}

fn execute(cfg: &RunConfig, data: &DataSource, out: &Path, dump_reps: bool, save_model: bool) -> Result<RunResult> {
    let (seq, desc) = data.load(cfg.seed)?;
    let mut writer = ArtifactWriter::create(out, cfg, desc)?;
    let outcome = run_sequence(&seq, cfg, |report, trainer| {
        writer.task_done(report, trainer.matrix())?;
        if !report.accepted_pairs.is_empty() {
            let csv = continual_fewshot::augment::Augmented {
                dataset: Vec::new(),
                memory: Vec::new(),
                pairs: report.accepted_pairs.clone(),
            }
            .pairs_csv();
            writer.write_file(&format!("aug_pairs_task{}.csv", report.task), &csv)?;
        }
        Ok(())
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            writer.fail(&e)?;
            return Err(e.into());
        }
    };
    if dump_reps {
        let tests: Vec<_> = seq.tasks.iter().flat_map(|t| t.test.iter().cloned()).collect();
        writer.write_file("reps.csv", &reps_csv(&outcome.model, &tests)?)?;
    }
    if save_model {
        continual_fewshot::checkpoint::save(&outcome.model, &out.join("model"))?;
        outcome.memory.write_csv(&out.join("memory.csv"))?;
    }
    Ok(RunResult {
        final_average: outcome.final_average(),
        bwt: outcome.bwt(),
        matrix: outcome.matrix,
    })
}

fn fmt_bwt(b: Option<f64>) -> String {
    b.map_or_else(|| "n/a".to_string(), |b| format!("{b:.4}"))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(m) = args.memory {
        extra.push(("memory".to_string(), m.to_string()));
    }
    if let Some(s) = args.seed {
        extra.push(("seed".to_string(), s.to_string()));
    }
    let r = resolve(&args.common, extra)?;
    let res = execute(&r.run, &r.data, &args.common.out, r.dump_reps || args.dump_reps, args.save_model)?;
    println!("final average accuracy: {:.4}", res.final_average);
    println!("bwt: {}", fmt_bwt(res.bwt));
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.memory.is_empty() || args.seeds.is_empty() {
        bail!("sweep grid is empty");
    }
    let r = resolve(&args.common, Vec::new())?;
    let cells: Vec<(usize, u64)> = args
        .memory
        .iter()
        .flat_map(|&l| args.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs.max(1)).build()?;
    let results: Vec<Result<SweepRun>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(l, seed)| {
                let cfg = RunConfig {
                    memory_size: l,
                    seed,
                    ..r.run.clone()
                };
                let dir = args.common.out.join(format!("memory{l}_seed{seed}"));
                let res = execute(&cfg, &r.data, &dir, false, false)?;
                println!("memory {l} seed {seed}: final average accuracy {:.4}, bwt {}", res.final_average, fmt_bwt(res.bwt));
                Ok(SweepRun {
                    memory_size: l,
                    seed,
                    matrix: res.matrix,
                })
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&args.common.out)?;
    std::fs::write(args.common.out.join("runs.csv"), sweep_runs_csv(&runs)?)?;
    let agg = sweep_aggregate_csv(&runs)?;
    std::fs::write(args.common.out.join("aggregate.csv"), &agg)?;
    print!("{agg}");
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut c = args.common.clone();
    c.synthetic = true;
    let mut extra = Vec::new();
    if let Some(s) = args.seed {
        extra.push(("seed".to_string(), s.to_string()));
    }
    let r = resolve(&c, extra)?;
    let (seq, _) = r.data.load(r.run.seed)?;
    std::fs::create_dir_all(&c.out)?;
    let data = c.out.join("data.jsonl");
    let vocab = c.out.join("vocab.txt");
    write_jsonl(&seq, &data, &vocab)?;
    println!("wrote {} and {}", data.display(), vocab.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
