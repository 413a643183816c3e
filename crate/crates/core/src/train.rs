//! Backbone pre-training, multi-task PHA training, few-shot adaptation and
//! evaluation.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{PhaError, Result};
use crate::model::{Ablations, Conditioning, PhaModel};
use crate::optim::{clip_grad_norm, lr_at, AdamW, AdamWConfig};
use crate::params::ParamId;
use crate::pha::{match_prototype, PhaConfig};
use crate::tasks::{generate_examples, sample_multitask_batch, tokenize, Example, TaskBatch, TaskSpec, CHARSET, PAD};
use crate::tensor::Tensor;
use crate::transformer::{ModelConfig, BACKBONE_PREFIX};

const EVAL_CHUNK: usize = 64;

fn default_max_grad_norm() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Examples per task used for the periodic and final evaluation.
    pub eval_examples: usize,
    #[serde(default)]
    pub ablations: Ablations,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(PhaError::Config(m.into()));
        if self.total_steps == 0 {
            return err("train.total_steps must be >= 1");
        }
        if self.warmup_steps >= self.total_steps {
            return err("train.warmup_steps must be < train.total_steps");
        }
        if !(self.lambda >= 0.0) {
            return err("train.lambda must be >= 0");
        }
        if !(self.peak_lr > 0.0) {
            return err("train.peak_lr must be > 0");
        }
        if self.batch_size < 2 {
            return err("train.batch_size must be >= 2");
        }
        if self.eval_every == 0 || self.eval_examples == 0 {
            return err("train.eval_every and train.eval_examples must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_examples: usize,
    /// Longest clean string in the copy/denoise stream.
    pub max_chars: usize,
    pub target_accuracy: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.warmup_steps >= self.max_steps {
            return Err(PhaError::Config(
                "pretrain.warmup_steps must be < pretrain.max_steps".into(),
            ));
        }
        if self.batch_size < 1 || self.eval_every == 0 || self.eval_examples == 0 {
            return Err(PhaError::Config(
                "pretrain.batch_size, eval_every and eval_examples must be >= 1".into(),
            ));
        }
        if self.max_chars == 0 || 2 * self.max_chars + 2 > crate::tasks::MAX_LEN {
            return Err(PhaError::Config("pretrain.max_chars out of range".into()));
        }
        Ok(())
    }
}

/// Which parameters move during few-shot adaptation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    /// The cloned task embedding only.
    #[default]
    Key,
    KeyAndHypernet,
    KeyHypernetAndShared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotConfig {
    pub steps: usize,
    pub peak_lr: f64,
    #[serde(default)]
    pub trainable: TrainableSet,
    /// Test examples generated for the held-out evaluation.
    pub test_examples: usize,
}

/// Sequence exact match, per-position token accuracy and teacher-forced loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub sequence_accuracy: f64,
    pub token_accuracy: f64,
    pub mean_loss: f64,
    pub examples: usize,
}

/// Evaluation conditioning; `Tasks` takes each example's own task id.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode {
    Tasks,
    Key(ParamId),
    Backbone,
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var("PHA_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(1);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
    })
}

struct ChunkStats {
    exact: usize,
    tokens_right: usize,
    tokens: usize,
    loss_sum: f64,
    loss_tokens: usize,
}

fn eval_chunk(model: &PhaModel, chunk: &[Example], mode: EvalMode) -> Result<ChunkStats> {
    let cond = match mode {
        EvalMode::Tasks => Conditioning::Tasks(chunk.iter().map(|e| e.task_id).collect()),
        EvalMode::Key(id) => Conditioning::Key(id),
        EvalMode::Backbone => Conditioning::Backbone,
    };
    let inputs: Vec<Vec<usize>> = chunk.iter().map(|e| e.input.clone()).collect();
    let longest = chunk.iter().map(|e| e.target.len()).max().unwrap_or(2);
    let preds = model.greedy_decode(&inputs, &cond, longest + 2)?;
    let mut s = ChunkStats {
        exact: 0,
        tokens_right: 0,
        tokens: 0,
        loss_sum: 0.0,
        loss_tokens: 0,
    };
    for (e, p) in chunk.iter().zip(&preds) {
        let want = &e.target[1..e.target.len() - 1];
        if p.as_slice() == want {
            s.exact += 1;
        }
        // Position-wise over the target including its EOS.
        let want_eos = &e.target[1..];
        let mut got = p.clone();
        got.push(crate::tasks::EOS);
        s.tokens += want_eos.len();
        s.tokens_right += want_eos.iter().zip(&got).filter(|(a, b)| a == b).count();
    }
    let refs: Vec<&Example> = chunk.iter().collect();
    let batch = TaskBatch::from_examples(&refs)?;
    let mut tape = Tape::new();
    let logits = model.logits(&mut tape, &batch, &cond)?;
    let ce = tape.softmax_cross_entropy(logits, &batch.labels, PAD)?;
    let n = batch.labels.iter().filter(|&&t| t != PAD).count();
    s.loss_sum = tape.value(ce).item() * n as f64;
    s.loss_tokens = n;
    Ok(s)
}

/// Greedy-decoding metrics over `data`; chunks are evaluated on the
/// `PHA_THREADS` pool and combined in order, so results do not depend on
/// the thread count.
pub fn evaluate(model: &PhaModel, data: &[Example], mode: EvalMode) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Ok(EvalMetrics::default());
    }
    let stats: Vec<Result<ChunkStats>> =
        pool().install(|| data.par_chunks(EVAL_CHUNK).map(|c| eval_chunk(model, c, mode)).collect());
    let (mut exact, mut right, mut tokens, mut loss, mut lt) = (0, 0, 0, 0.0, 0);
    for s in stats {
        let s = s?;
        exact += s.exact;
        right += s.tokens_right;
        tokens += s.tokens;
        loss += s.loss_sum;
        lt += s.loss_tokens;
    }
    Ok(EvalMetrics {
        sequence_accuracy: exact as f64 / data.len() as f64,
        token_accuracy: right as f64 / tokens.max(1) as f64,
        mean_loss: loss / lt.max(1) as f64,
        examples: data.len(),
    })
}

/// One JSONL record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricRecord {
    Step {
        step: usize,
        lr: f64,
        l_plm: f64,
        l_ir: Option<f64>,
        l_pro: Option<f64>,
        l_total: f64,
    },
    Eval {
        step: usize,
        task: String,
        accuracy: f64,
    },
}

/// Receives log records and periodic checkpoints from the training loop.
pub trait TrainObserver {
    fn record(&mut self, _rec: &MetricRecord) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _step: usize, _model: &PhaModel, _opt: &AdamW) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NoObserver;
impl TrainObserver for NoObserver {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub l_plm: Vec<f64>,
    pub per_task: Vec<(String, EvalMetrics)>,
    pub mean_accuracy: f64,
}

fn finite_or_abort(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(PhaError::Numerical {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

/// Per-task sequence accuracy on `eval_sets`, each truncated to `n`.
pub fn evaluate_tasks(model: &PhaModel, eval_sets: &[Vec<Example>], n: usize) -> Result<Vec<(String, EvalMetrics)>> {
    eval_sets
        .iter()
        .enumerate()
        .map(|(t, set)| {
            let m = evaluate(model, &set[..n.min(set.len())], EvalMode::Tasks)?;
            Ok((model.task_names()[t].clone(), m))
        })
        .collect()
}

/// Multi-task training of every trainable (PHA) parameter with
/// `L_PLM + λ·(L_IR + L_Pro)`.
pub fn train_multitask(
    model: &mut PhaModel,
    train_sets: &[Vec<Example>],
    eval_sets: &[Vec<Example>],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_sets.len() < 2 || train_sets.len() != model.task_names().len() {
        return Err(PhaError::Contract(format!(
            "{} training sets for {} registered tasks (need >= 2)",
            train_sets.len(),
            model.task_names().len()
        )));
    }
    if model.store.iter().any(|(_, p)| p.requires_grad && p.name.starts_with(BACKBONE_PREFIX)) {
        return Err(PhaError::Contract("backbone must be frozen before PHA training".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw.clone());
    let ids = model.store.trainable_ids();
    let mut l_plm_hist = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let batch = sample_multitask_batch(train_sets, cfg.batch_size, &mut rng)?;
        let mut tape = Tape::new();
        let parts = model.losses(&mut tape, &batch, &Conditioning::Tasks(batch.task_ids.clone()), cfg.lambda)?;
        let total = tape.value(parts.total).item();
        finite_or_abort(step, "l_total", total)?;
        let grads = tape.backward(parts.total)?;
        model.store.zero_grads();
        model.store.accumulate_grads(&tape, &grads);
        if let Some(max) = cfg.max_grad_norm {
            let n = clip_grad_norm(&mut model.store, &ids, max);
            finite_or_abort(step, "gradient norm", n)?;
        }
        let lr = lr_at(step + 1, cfg.total_steps, cfg.warmup_steps, cfg.peak_lr);
        opt.step(&mut model.store, &ids, lr)?;
        let l_plm = tape.value(parts.l_plm).item();
        l_plm_hist.push(l_plm);
        observer.record(&MetricRecord::Step {
            step,
            lr,
            l_plm,
            l_ir: parts.l_ir.map(|v| tape.value(v).item()),
            l_pro: parts.l_pro.map(|v| tape.value(v).item()),
            l_total: total,
        })?;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_steps {
            for (task, m) in evaluate_tasks(model, eval_sets, cfg.eval_examples)? {
                observer.record(&MetricRecord::Eval {
                    step: done,
                    task,
                    accuracy: m.sequence_accuracy,
                })?;
            }
            observer.checkpoint(done, model, &opt)?;
        }
    }
    let per_task = evaluate_tasks(model, eval_sets, cfg.eval_examples)?;
    let mean_accuracy = per_task.iter().map(|(_, m)| m.sequence_accuracy).sum::<f64>() / per_task.len() as f64;
    Ok(TrainReport {
        steps: cfg.total_steps,
        l_plm: l_plm_hist,
        per_task,
        mean_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub copy_accuracy: f64,
}

fn noise_stream(pc: &PretrainConfig, n: usize, seed: u64) -> Result<Vec<Example>> {
    let chars: Vec<char> = CHARSET.chars().filter(|&c| c != '#').collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=pc.max_chars);
            let clean: String = (0..len).map(|_| chars[rng.random_range(0..chars.len())]).collect();
            // Even examples are plain copies, odd ones carry '#' noise to delete.
            let input = if i % 2 == 0 {
                clean.clone()
            } else {
                let mut s = String::new();
                for c in clean.chars() {
                    if rng.random_bool(0.3) {
                        s.push('#');
                    }
                    s.push(c);
                }
                s
            };
            Ok(Example {
                input: tokenize(&input)?,
                target: tokenize(&clean)?,
                task_id: i % 2,
            })
        })
        .collect()
}

/// Train the backbone on a copy/denoise stream until held-out copy accuracy
/// reaches the target (or the step cap), then freeze it.
pub fn pretrain_backbone(model_cfg: &ModelConfig, pc: &PretrainConfig) -> Result<(PhaModel, PretrainReport)> {
    pc.validate()?;
    let pha = PhaConfig {
        retrieval_dim: 1,
        hyper_dim: 1,
        temperature: 1.0,
        prototype_std: 0.02,
    };
    let names = vec!["copy".to_string(), "denoise".to_string()];
    let mut model = PhaModel::new(model_cfg.clone(), pha, Ablations::default(), &names, pc.seed)?;
    let bb_ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with(BACKBONE_PREFIX))
        .map(|(id, _)| id)
        .collect();
    for (id, _) in model.store.clone().iter() {
        model.store.set_requires_grad(id, bb_ids.contains(&id));
    }
    let held_out: Vec<Example> = noise_stream(pc, pc.eval_examples * 2, pc.seed ^ 0x9e37_79b9)?
        .into_iter()
        .filter(|e| e.task_id == 0)
        .collect();
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed.wrapping_add(1));
    let mut accuracy = 0.0;
    let mut steps = 0;
    for step in 0..pc.max_steps {
        let examples = noise_stream(pc, pc.batch_size, rng.random())?;
        let batch = TaskBatch::from_examples(&examples.iter().collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let parts = model.losses(&mut tape, &batch, &Conditioning::Backbone, 0.0)?;
        finite_or_abort(step, "pretrain loss", tape.value(parts.total).item())?;
        let grads = tape.backward(parts.total)?;
        model.store.zero_grads();
        model.store.accumulate_grads(&tape, &grads);
        clip_grad_norm(&mut model.store, &bb_ids, 1.0);
        let lr = lr_at(step + 1, pc.max_steps, pc.warmup_steps, pc.peak_lr);
        opt.step(&mut model.store, &bb_ids, lr)?;
        steps = step + 1;
        if steps % pc.eval_every == 0 || steps == pc.max_steps {
            accuracy = evaluate(&model, &held_out, EvalMode::Backbone)?.sequence_accuracy;
            log::info!("pretrain step {steps}: copy accuracy {accuracy:.3}");
            if accuracy >= pc.target_accuracy {
                break;
            }
        }
    }
    if accuracy < 0.5 {
        return Err(PhaError::Numerical {
            step: steps,
            detail: format!("backbone reached only {accuracy:.3} copy accuracy; model too small or broken"),
        });
    }
    model.store.zero_grads();
    model.store.freeze_prefix(BACKBONE_PREFIX);
    Ok((
        model,
        PretrainReport {
            steps,
            copy_accuracy: accuracy,
        },
    ))
}

/// Build training and evaluation sets for every spec; evaluation streams use
/// a different generation seed than training streams.
pub fn build_datasets(specs: &[TaskSpec], train_n: usize, eval_n: usize) -> Result<(Vec<Vec<Example>>, Vec<Vec<Example>>)> {
    let mut train = Vec::with_capacity(specs.len());
    let mut eval = Vec::with_capacity(specs.len());
    for (i, s) in specs.iter().enumerate() {
        train.push(generate_examples(s, i, train_n, 0)?);
        eval.push(generate_examples(s, i, eval_n, 1)?);
    }
    Ok((train, eval))
}

/// Result of few-shot adaptation.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub model: PhaModel,
    /// The new task embedding inside `model.store`.
    pub key: ParamId,
    pub retrieved: usize,
    pub scores: Vec<f64>,
}

fn single_task(support: &[Example]) -> Result<()> {
    let first = support
        .first()
        .ok_or_else(|| PhaError::Contract("empty support set".into()))?
        .task_id;
    if support.iter().any(|e| e.task_id != first) {
        return Err(PhaError::Contract("support set mixes several tasks".into()));
    }
    Ok(())
}

/// Add `init` as a new embedding, select the trainable set and fine-tune on
/// `support` with cross-entropy only.
pub fn adapt_from_key(model: &PhaModel, support: &[Example], init: Tensor, fc: &FewShotConfig) -> Result<(PhaModel, ParamId)> {
    single_task(support)?;
    let mut m = model.clone();
    for id in m.store.ids().collect::<Vec<_>>() {
        let name = m.store.get(id).name.clone();
        let on = match fc.trainable {
            TrainableSet::Key => false,
            TrainableSet::KeyAndHypernet => name.starts_with("pha.hypernet.") || name == "pha.layer_embeddings",
            TrainableSet::KeyHypernetAndShared => {
                name.starts_with("pha.hypernet.")
                    || name == "pha.layer_embeddings"
                    || name.starts_with("pha.shared_adapter.")
            }
        };
        m.store.set_requires_grad(id, on);
    }
    let key = m.store.insert("pha.adapt_key", init, true)?;
    let ids = m.store.trainable_ids();
    let refs: Vec<&Example> = support.iter().collect();
    let batch = TaskBatch::from_examples(&refs)?;
    let mut opt = AdamW::new(AdamWConfig::default());
    for step in 0..fc.steps {
        let mut tape = Tape::new();
        let parts = m.losses(&mut tape, &batch, &Conditioning::Key(key), 0.0)?;
        finite_or_abort(step, "adaptation loss", tape.value(parts.total).item())?;
        let grads = tape.backward(parts.total)?;
        m.store.zero_grads();
        m.store.accumulate_grads(&tape, &grads);
        clip_grad_norm(&mut m.store, &ids, 1.0);
        opt.step(&mut m.store, &ids, lr_at(step + 1, fc.steps + 1, 0, fc.peak_lr))?;
    }
    m.store.zero_grads();
    Ok((m, key))
}

/// Retrieve the closest prototype for `support` and adapt from it.
pub fn adapt_few_shot(model: &PhaModel, support: &[Example], fc: &FewShotConfig) -> Result<Adapted> {
    single_task(support)?;
    let (retrieved, scores) = retrieve_prototype(model, support)?;
    let init = Tensor::new(
        vec![model.key_dim()],
        model.store.value(model.bank.prototypes).row(retrieved).to_vec(),
    )?;
    let (model, key) = adapt_from_key(model, support, init, fc)?;
    Ok(Adapted {
        model,
        key,
        retrieved,
        scores,
    })
}

/// `match_prototype` on the support set's retrieval vectors.
pub fn retrieve_prototype(model: &PhaModel, support: &[Example]) -> Result<(usize, Vec<f64>)> {
    let inputs: Vec<Vec<usize>> = support.iter().map(|e| e.input.clone()).collect();
    let z = model.embed_inputs(&inputs)?;
    match_prototype(&z, model.store.value(model.bank.prototypes))
}

/// Embedding drawn like a freshly initialised prototype.
pub fn random_key(model: &PhaModel, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[model.key_dim()], model.pha_cfg.prototype_std.max(1e-3), &mut rng)
}

/// Mean cosine of each probe set's retrieval vectors against every
/// prototype, one row per probe.
pub fn similarity_rows(model: &PhaModel, probes: &[(String, Vec<Example>)]) -> Result<Vec<(String, Vec<f64>)>> {
    probes
        .iter()
        .map(|(name, ex)| Ok((name.clone(), retrieve_prototype(model, ex)?.1)))
        .collect()
}

/// Whether every row's maximum sits on the diagonal (strictly).
pub fn diagonally_dominant(rows: &[(String, Vec<f64>)]) -> bool {
    rows.iter().enumerate().all(|(i, (_, r))| {
        r.iter().enumerate().all(|(j, &v)| j == i || v < r[i])
    })
}
