//! The `pha` command line: train, adapt, export-similarity, verify,
//! param-count and init-config.
//!
//! Exit codes are a stable contract: 0 success, 1 verification failure,
//! 2 configuration error, 3 numerical abort.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{self, load_file, save_file};
use crate::config::RunConfig;
use crate::error::{PhaError, Result};
use crate::model::PhaModel;
use crate::optim::AdamW;
use crate::pha::{count_parameters, write_embedding_csv, write_similarity_csv, ParamReport};
use crate::tasks::{generate_examples, split_few_shot, TaskSpec};
use crate::tensor::Tensor;
use crate::train::{
    adapt_few_shot, adapt_from_key, build_datasets, diagonally_dominant, evaluate, pretrain_backbone, random_key,
    similarity_rows, train_multitask, EvalMetrics, EvalMode, FewShotConfig, MetricRecord, PretrainReport,
    TrainObserver,
};
use crate::verify::{census_matches, check_gradients, zero_init_mismatches};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Gradient-check tolerance used by `verify`.
const GRAD_TOL: f64 = 1e-4;
const ZERO_INIT_BATCHES: usize = 100;
/// Central-difference step; smaller steps drown gradients near 1e-6 in
/// rounding noise.
pub const FD_EPS: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "pha", version, about = "Prototype-conditioned hypernetwork adapters on synthetic seq2seq tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train (or load) a backbone, then run multi-task PHA training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse the backbone from this checkpoint instead of pre-training.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Few-shot adaptation to one task from its retrieved prototype.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 16)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for adapt_result.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Task definitions, when the checkpoint does not carry its run config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Mean cosine of each probe task's retrieval vectors to every prototype.
    ExportSimilarity {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON list of task specs to probe; defaults to the registered tasks.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        examples: usize,
        /// Also write the raw retrieval vectors here.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Gradient check, parameter census and zero-init equivalence.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Take the census from this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the trainable-parameter breakdown for a config.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a preset config as JSON.
    InitConfig {
        #[arg(long, value_enum, default_value_t = Preset::Reference)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Preset {
    Reference,
    Tiny,
}

pub fn exit_code(e: &PhaError) -> i32 {
    match e {
        PhaError::Config(_) | PhaError::Tokenize(_) | PhaError::Checkpoint(_) | PhaError::Io(_) => EXIT_CONFIG,
        PhaError::Numerical { .. } => EXIT_NUMERICAL,
        _ => EXIT_VERIFY,
    }
}

/// Run one command; errors are left for the caller to map with [`exit_code`].
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, out, backbone } => cmd_train(&config, &out, backbone.as_deref()),
        Command::Adapt {
            checkpoint,
            task,
            shots,
            seed,
            out,
            config,
        } => cmd_adapt(&checkpoint, &task, shots, seed, &out, config.as_deref()),
        Command::ExportSimilarity {
            checkpoint,
            suite,
            out,
            examples,
            embeddings,
        } => cmd_export_similarity(&checkpoint, suite.as_deref(), &out, examples, embeddings.as_deref()),
        Command::Verify { config, checkpoint } => cmd_verify(&config, checkpoint.as_deref()),
        Command::ParamCount { config } => cmd_param_count(&config),
        Command::InitConfig { preset, out } => {
            let cfg = match preset {
                Preset::Reference => RunConfig::reference(),
                Preset::Tiny => RunConfig::tiny(),
            };
            write_json(&out, &cfg)?;
            Ok(EXIT_OK)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Streams metrics to JSONL and writes a checkpoint at every eval point.
struct RunObserver<'a> {
    metrics: BufWriter<File>,
    dir: PathBuf,
    run: &'a RunConfig,
    last_good: Option<PathBuf>,
}

impl TrainObserver for RunObserver<'_> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, rec)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn checkpoint(&mut self, step: usize, model: &PhaModel, opt: &AdamW) -> Result<()> {
        self.metrics.flush()?;
        let path = self.dir.join(format!("step_{step}.ckpt"));
        save_file(&path, model, Some(opt), step, Some(self.run))?;
        self.last_good = Some(path);
        Ok(())
    }
}

#[derive(Serialize)]
struct TaskSummary {
    task: String,
    #[serde(flatten)]
    metrics: EvalMetrics,
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    mean_accuracy: f64,
    per_task: Vec<TaskSummary>,
    pretrain: Option<PretrainReport>,
}

fn cmd_train(config: &Path, out: &Path, backbone: Option<&Path>) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    write_json(&out.join("config.json"), &cfg)?;

    let (bb, pretrain) = match backbone {
        Some(p) => (load_file(p)?.model, None),
        None => {
            let (m, r) = pretrain_backbone(&cfg.model, &cfg.pretrain)?;
            log::info!("backbone pre-trained: {} steps, copy accuracy {:.3}", r.steps, r.copy_accuracy);
            (m, Some(r))
        }
    };
    save_file(&out.join("backbone.ckpt"), &bb, None, 0, Some(&cfg))?;

    let mut model = PhaModel::new(
        cfg.model.clone(),
        cfg.pha.clone(),
        cfg.train.ablations.clone(),
        &cfg.task_names(),
        init_seed(&cfg),
    )?;
    model.load_backbone(&bb.store)?;
    let (train_sets, eval_sets) = build_datasets(&cfg.tasks, cfg.data.train_examples, cfg.data.eval_examples)?;

    let mut obs = RunObserver {
        metrics: BufWriter::new(File::create(out.join("metrics.jsonl"))?),
        dir: ckpt_dir,
        run: &cfg,
        last_good: None,
    };
    let result = train_multitask(&mut model, &train_sets, &eval_sets, &cfg.train, &mut obs);
    obs.metrics.flush()?;
    let report = match result {
        Ok(r) => r,
        Err(e @ PhaError::Numerical { .. }) => {
            match &obs.last_good {
                Some(p) => eprintln!("last good checkpoint: {}", p.display()),
                None => eprintln!("no checkpoint was written before the abort"),
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    save_file(&out.join("final.ckpt"), &model, None, report.steps, Some(&cfg))?;
    let summary = TrainSummary {
        steps: report.steps,
        mean_accuracy: report.mean_accuracy,
        per_task: report
            .per_task
            .into_iter()
            .map(|(task, metrics)| TaskSummary { task, metrics })
            .collect(),
        pretrain,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!("mean sequence accuracy {:.4}", summary.mean_accuracy);
    Ok(EXIT_OK)
}

/// Seed for PHA parameter initialisation, kept apart from the batch stream.
pub fn init_seed(cfg: &RunConfig) -> u64 {
    cfg.train.seed.wrapping_add(100)
}

fn run_config(meta_run: Option<RunConfig>, config: Option<&Path>) -> Result<RunConfig> {
    match (config, meta_run) {
        (Some(p), _) => RunConfig::load(p),
        (None, Some(r)) => Ok(r),
        (None, None) => Err(PhaError::Config(
            "checkpoint carries no run config; pass --config".into(),
        )),
    }
}

#[derive(Debug, Serialize)]
pub struct AdaptResult {
    pub task: String,
    pub shots: usize,
    pub seed: u64,
    pub retrieved_task: String,
    /// Cosine score against every registered prototype, in task order.
    pub scores: Vec<f64>,
    pub task_names: Vec<String>,
    /// Retrieved prototype, no fine-tuning.
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// Same budget, started from a random embedding.
    pub accuracy_random_init: f64,
}

fn cmd_adapt(ckpt: &Path, task: &str, shots: usize, seed: u64, out: &Path, config: Option<&Path>) -> Result<i32> {
    let loaded = load_file(ckpt)?;
    let cfg = run_config(loaded.meta.run.clone(), config)?;
    let spec = cfg
        .find_task(task)
        .ok_or_else(|| PhaError::Config(format!("unknown task {task:?}")))?
        .clone();
    if shots == 0 {
        return Err(PhaError::Config("--shots must be >= 1".into()));
    }
    let model = loaded.model;
    let result = adapt_once(&model, &spec, shots, seed, &cfg.few_shot)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("adapt_result.json"), &result)?;
    println!(
        "{task}: retrieved {} | accuracy {:.3} -> {:.3} (random init {:.3})",
        result.retrieved_task, result.accuracy_before, result.accuracy_after, result.accuracy_random_init
    );
    Ok(EXIT_OK)
}

/// One few-shot episode: retrieve, adapt, and the random-init control.
pub fn adapt_once(model: &PhaModel, spec: &TaskSpec, shots: usize, seed: u64, fc: &FewShotConfig) -> Result<AdaptResult> {
    let task_id = model.task_names().iter().position(|n| *n == spec.name).unwrap_or(model.task_names().len());
    let data = generate_examples(spec, task_id, shots + fc.test_examples, seed)?;
    let (support, test) = split_few_shot(&data, shots, seed)?;

    let adapted = adapt_few_shot(model, &support, fc)?;
    let after = evaluate(&adapted.model, &test, EvalMode::Key(adapted.key))?;

    let proto = Tensor::new(
        vec![model.key_dim()],
        model.store.value(model.bank.prototypes).row(adapted.retrieved).to_vec(),
    )?;
    let untouched = FewShotConfig { steps: 0, ..fc.clone() };
    let (m0, k0) = adapt_from_key(model, &support, proto, &untouched)?;
    let before = evaluate(&m0, &test, EvalMode::Key(k0))?;

    let (mr, kr) = adapt_from_key(model, &support, random_key(model, seed), fc)?;
    let random = evaluate(&mr, &test, EvalMode::Key(kr))?;

    Ok(AdaptResult {
        task: spec.name.clone(),
        shots,
        seed,
        retrieved_task: model.task_names()[adapted.retrieved].clone(),
        scores: adapted.scores,
        task_names: model.task_names().to_vec(),
        accuracy_before: before.sequence_accuracy,
        accuracy_after: after.sequence_accuracy,
        accuracy_random_init: random.sequence_accuracy,
    })
}

fn cmd_export_similarity(
    ckpt: &Path,
    suite: Option<&Path>,
    out: &Path,
    examples: usize,
    embeddings: Option<&Path>,
) -> Result<i32> {
    let loaded = load_file(ckpt)?;
    let specs: Vec<TaskSpec> = match suite {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| PhaError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| PhaError::Config(format!("suite: {e}")))?
        }
        None => run_config(loaded.meta.run.clone(), None)?.tasks,
    };
    if specs.is_empty() || examples == 0 {
        return Err(PhaError::Config("need at least one probe task and one example".into()));
    }
    for s in &specs {
        s.validate()?;
    }
    let model = loaded.model;
    let mut probes = Vec::with_capacity(specs.len());
    for (i, s) in specs.iter().enumerate() {
        probes.push((s.name.clone(), generate_examples(s, i, examples, 2)?));
    }
    let rows = similarity_rows(&model, &probes)?;
    write_similarity_csv(File::create(out)?, model.task_names(), &rows)?;
    if let Some(path) = embeddings {
        let all: Vec<Vec<usize>> = probes.iter().flat_map(|(_, ex)| ex.iter().map(|e| e.input.clone())).collect();
        let ids: Vec<usize> = probes.iter().flat_map(|(_, ex)| ex.iter().map(|e| e.task_id)).collect();
        write_embedding_csv(File::create(path)?, &ids, &model.embed_inputs(&all)?)?;
    }
    let names: Vec<&String> = rows.iter().map(|(n, _)| n).collect();
    if names.iter().copied().eq(model.task_names().iter()) {
        println!("diagonally dominant: {}", diagonally_dominant(&rows));
    }
    Ok(EXIT_OK)
}

fn report(name: &str, ok: bool, detail: &str) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn cmd_verify(config: &Path, ckpt: Option<&Path>) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let ablations = cfg.train.ablations.clone();
    let mut ok = true;

    let g = check_gradients(&cfg, ablations.clone(), 0, FD_EPS)?;
    ok &= report(
        "gradients",
        g.max_rel_error < GRAD_TOL,
        &format!(
            "max relative error {:.3e} over {} coordinates (worst {:?})",
            g.max_rel_error, g.coordinates, g.worst
        ),
    );

    let census = match ckpt {
        Some(p) => checkpoint::load_file(p).map(|l| l.model),
        None => PhaModel::new(cfg.model.clone(), cfg.pha.clone(), ablations.clone(), &cfg.task_names(), 0),
    };
    ok &= match census {
        Ok(m) => {
            let (formula, counted) = census_matches(&m);
            report("census", formula == counted, &format!("formula {formula}, registry {counted}"))
        }
        Err(e) => report("census", false, &format!("could not build the model: {e}")),
    };

    if ablations.literal_eq8 {
        println!("SKIP zero-init: the sequential adapter form is not the identity at zero");
    } else {
        let bad = zero_init_mismatches(&cfg, ablations, ZERO_INIT_BATCHES, 0)?;
        ok &= report(
            "zero-init",
            bad == 0,
            &format!("{bad}/{ZERO_INIT_BATCHES} batches differ from the frozen backbone"),
        );
    }
    Ok(if ok { EXIT_OK } else { EXIT_VERIFY })
}

fn cmd_param_count(config: &Path) -> Result<i32> {
    let cfg = RunConfig::load(config)?;
    let r: ParamReport = count_parameters(&cfg.model, cfg.pha.retrieval_dim, cfg.pha.hyper_dim, cfg.tasks.len());
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(EXIT_OK)
}
