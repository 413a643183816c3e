//! Retriever, prototype bank, hypernetwork and the two contrastive objectives.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ContrastTerm, Tape, Var};
use crate::error::{PhaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{adapter_size, AdapterVars, ModelConfig};

fn default_temperature() -> f64 {
    1.0
}

fn default_prototype_std() -> f64 {
    0.02
}

/// Widths of the PHA components on top of the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaConfig {
    /// d′: retrieval / prototype / layer-embedding width.
    pub retrieval_dim: usize,
    /// d_h: width of the mixed embedding fed to the generator.
    pub hyper_dim: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_prototype_std")]
    pub prototype_std: f64,
}

impl PhaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retrieval_dim == 0 || self.hyper_dim == 0 {
            return Err(PhaError::Config(
                "pha.retrieval_dim and pha.hyper_dim must be >= 1".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(PhaError::Config("pha.temperature must be > 0".into()));
        }
        if !(self.prototype_std >= 0.0) {
            return Err(PhaError::Config("pha.prototype_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// `z = W2·ReLU(W1·h)`, no biases.
#[derive(Clone, Debug)]
pub struct RetrieverParams {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl RetrieverParams {
    pub fn init<R: Rng>(store: &mut ParamStore, d: usize, d_r: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w1: store.insert("pha.retriever.w1", Tensor::randn(&[d_r, d], (2.0 / d as f64).sqrt(), rng), true)?,
            w2: store.insert("pha.retriever.w2", Tensor::randn(&[d_r, d_r], (1.0 / d_r as f64).sqrt(), rng), true)?,
        })
    }
}

pub fn retrieve_vector(store: &ParamStore, tape: &mut Tape, h: Var, r: &RetrieverParams) -> Result<Var> {
    let w1 = tape.bind(store, r.w1);
    let w2 = tape.bind(store, r.w2);
    let a = tape.matmul_t(h, w1)?;
    let a = tape.relu(a);
    tape.matmul_t(a, w2)
}

/// Task prototypes `K: [τ × key_dim]` and decoder-layer embeddings
/// `E: [L_dec × d′]`. `key_dim` is d′ unless the retriever is ablated away,
/// in which case prototypes live directly in the encoder's d-space.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub prototypes: ParamId,
    pub layer_embeddings: ParamId,
    pub task_names: Vec<String>,
}

impl PrototypeBank {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        task_names: &[String],
        key_dim: usize,
        pha: &PhaConfig,
        dec_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if task_names.is_empty() {
            return Err(PhaError::Config("at least one task is required".into()));
        }
        Ok(Self {
            prototypes: store.insert(
                "pha.prototypes",
                Tensor::randn(&[task_names.len(), key_dim], pha.prototype_std, rng),
                true,
            )?,
            layer_embeddings: store.insert(
                "pha.layer_embeddings",
                Tensor::randn(&[dec_layers, pha.retrieval_dim], 1.0, rng),
                true,
            )?,
            task_names: task_names.to_vec(),
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.task_names.iter().position(|n| n == name)
    }
}

/// Projection `C: [d_h × (key_dim + d′)]` and generator `H: [(2db+b+d) × d_h]`.
#[derive(Clone, Debug)]
pub struct HyperNetParams {
    pub proj: ParamId,
    pub generator: ParamId,
}

/// Offsets of the four pieces inside a generated flat vector, in the fixed
/// order `[D | U | bias_u | bias_d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterLayout {
    pub down: (usize, usize),
    pub up: (usize, usize),
    pub bias_up: (usize, usize),
    pub bias_down: (usize, usize),
}

impl AdapterLayout {
    pub fn new(d: usize, b: usize) -> Self {
        let down = (0, d * b);
        let up = (down.1, down.1 + b * d);
        let bias_up = (up.1, up.1 + b);
        let bias_down = (bias_up.1, bias_up.1 + d);
        Self {
            down,
            up,
            bias_up,
            bias_down,
        }
    }
}

impl HyperNetParams {
    /// `C` is Gaussian. Rows of `H` that produce `D` and `bias_d` start at
    /// zero so every generated adapter is a zero map; the `U`/`bias_u` rows
    /// are small and random. With all of `H` at zero neither `U` nor `D`
    /// would ever receive gradient.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        key_dim: usize,
        pha: &PhaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, b, dh) = (cfg.d_model, cfg.bottleneck, pha.hyper_dim);
        let input = key_dim + pha.retrieval_dim;
        let proj = Tensor::randn(&[dh, input], (1.0 / input as f64).sqrt(), rng);
        let size = adapter_size(d, b);
        let mut gen = Tensor::zeros(&[size, dh]);
        let layout = AdapterLayout::new(d, b);
        let std = 1.0 / ((d * dh) as f64).sqrt();
        let noise = Tensor::randn(&[layout.bias_up.1 - layout.up.0, dh], std, rng);
        gen.data_mut()[layout.up.0 * dh..layout.bias_up.1 * dh].copy_from_slice(noise.data());
        Ok(Self {
            proj: store.insert("pha.hypernet.proj", proj, true)?,
            generator: store.insert("pha.hypernet.generator", gen, true)?,
        })
    }
}

/// `I = C·[k; e]`, `flat = H·I`, split into an adapter. `k` and `e` are
/// 1-D (or single-row) tape nodes.
pub fn generate_adapter(
    store: &ParamStore,
    tape: &mut Tape,
    k: Var,
    e: Var,
    hp: &HyperNetParams,
    cfg: &ModelConfig,
) -> Result<AdapterVars> {
    let (d, b) = (cfg.d_model, cfg.bottleneck);
    let c = tape.bind(store, hp.proj);
    let h = tape.bind(store, hp.generator);
    let k1 = tape.reshape(k, &[1, tape.value(k).numel()])?;
    let e1 = tape.reshape(e, &[1, tape.value(e).numel()])?;
    let ke = tape.concat_cols(&[k1, e1])?;
    let mixed = tape.matmul_t(ke, c)?;
    let flat = tape.matmul_t(mixed, h)?;
    if tape.value(flat).numel() != adapter_size(d, b) {
        return Err(PhaError::dim("generate_adapter", tape.shape(flat), &[adapter_size(d, b)]));
    }
    let l = AdapterLayout::new(d, b);
    Ok(AdapterVars {
        down: tape.slice(flat, l.down.0, &[d, b])?,
        up: tape.slice(flat, l.up.0, &[b, d])?,
        bias_up: tape.slice(flat, l.bias_up.0, &[b])?,
        bias_down: tape.slice(flat, l.bias_down.0, &[d])?,
    })
}

/// One adapter per decoder layer from `key` (a `[1, key_dim]` node).
pub fn generate_decoder_adapters_for_key(
    store: &ParamStore,
    tape: &mut Tape,
    key: Var,
    bank: &PrototypeBank,
    hp: &HyperNetParams,
    cfg: &ModelConfig,
) -> Result<Vec<AdapterVars>> {
    let emb = tape.bind(store, bank.layer_embeddings);
    (0..cfg.dec_layers)
        .map(|m| {
            let e = tape.gather_rows(emb, &[m])?;
            generate_adapter(store, tape, key, e, hp, cfg)
        })
        .collect()
}

pub fn generate_all_decoder_adapters(
    store: &ParamStore,
    tape: &mut Tape,
    task_index: usize,
    bank: &PrototypeBank,
    hp: &HyperNetParams,
    cfg: &ModelConfig,
) -> Result<Vec<AdapterVars>> {
    if task_index >= bank.num_tasks() {
        return Err(PhaError::Index(format!(
            "task index {task_index} >= {} prototypes",
            bank.num_tasks()
        )));
    }
    let protos = tape.bind(store, bank.prototypes);
    let key = tape.gather_rows(protos, &[task_index])?;
    generate_decoder_adapters_for_key(store, tape, key, bank, hp, cfg)
}

/// Retrieval vectors with their task identities and in-batch task counts.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub z: Var,
    pub task_ids: Vec<usize>,
    /// In-batch count `N_i` per present task.
    pub counts: BTreeMap<usize, usize>,
}

impl ContrastiveBatch {
    pub fn new(tape: &Tape, z: Var, task_ids: Vec<usize>) -> Result<Self> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[0] != task_ids.len() {
            return Err(PhaError::dim("contrastive batch", shape, &[task_ids.len()]));
        }
        let mut counts = BTreeMap::new();
        for &t in &task_ids {
            *counts.entry(t).or_insert(0) += 1;
        }
        Ok(Self { z, task_ids, counts })
    }

    /// Number of distinct tasks present.
    pub fn tasks_in_batch(&self) -> usize {
        self.counts.len()
    }

    /// Same-task indices other than `anchor`.
    pub fn positives(&self, anchor: usize) -> Vec<usize> {
        let t = self.task_ids[anchor];
        (0..self.task_ids.len())
            .filter(|&j| j != anchor && self.task_ids[j] == t)
            .collect()
    }

    /// Indices belonging to other tasks.
    pub fn negatives(&self, anchor: usize) -> Vec<usize> {
        let t = self.task_ids[anchor];
        (0..self.task_ids.len()).filter(|&j| self.task_ids[j] != t).collect()
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(PhaError::Contract(format!("temperature must be positive, got {t}")))
    }
}

/// Norm floor inside the contrastive losses: an all-off retriever ReLU layer
/// yields an exactly zero vector, which then scores 0 against everything.
pub const MIN_NORM: f64 = 1e-8;

/// Cosine-similarity matrix `[rows(a) × rows(b)] / t`.
fn cosine_scores(tape: &mut Tape, a: Var, b: Var, temperature: f64) -> Result<Var> {
    let an = tape.normalize_rows(a, MIN_NORM)?;
    let bn = tape.normalize_rows(b, MIN_NORM)?;
    let s = tape.matmul_t(an, bn)?;
    Ok(tape.scale(s, 1.0 / temperature))
}

/// Supervised InfoNCE over retrieval vectors. Anchors whose task has a
/// single in-batch sample have no positive and are skipped. With
/// `include_positive` the positive pair sits in its own denominator; without
/// it only negatives are summed there.
pub fn info_nce_loss(tape: &mut Tape, cb: &ContrastiveBatch, temperature: f64, include_positive: bool) -> Result<Var> {
    check_temperature(temperature)?;
    if cb.tasks_in_batch() < 2 {
        return Err(PhaError::Contract(
            "instance contrastive loss needs at least two tasks in the batch".into(),
        ));
    }
    let scores = cosine_scores(tape, cb.z, cb.z, temperature)?;
    let tau_batch = cb.tasks_in_batch() as f64;
    let mut terms = Vec::new();
    let mut skipped = 0;
    for anchor in 0..cb.task_ids.len() {
        let n_i = cb.counts[&cb.task_ids[anchor]];
        if n_i < 2 {
            skipped += 1;
            continue;
        }
        let negatives = cb.negatives(anchor);
        let weight = 1.0 / ((n_i - 1) as f64 * tau_batch);
        for j in cb.positives(anchor) {
            terms.push(ContrastTerm {
                row: anchor,
                positive: j,
                negatives: negatives.clone(),
                weight,
            });
        }
    }
    if skipped > 0 {
        log::debug!("info_nce: skipped {skipped} anchors without a positive");
    }
    tape.contrastive_nll(scores, terms, include_positive)
}

/// Each retrieval vector against every prototype, softmax over all τ rows
/// of `prototypes`.
pub fn prototype_loss(
    tape: &mut Tape,
    cb: &ContrastiveBatch,
    prototypes: Var,
    temperature: f64,
    include_positive: bool,
) -> Result<Var> {
    check_temperature(temperature)?;
    let tau = tape.shape(prototypes)[0];
    if tau < 2 {
        return Err(PhaError::Contract("prototype loss needs at least two prototypes".into()));
    }
    if let Some(&bad) = cb.task_ids.iter().find(|&&t| t >= tau) {
        return Err(PhaError::Index(format!("task id {bad} >= {tau} prototypes")));
    }
    let scores = cosine_scores(tape, cb.z, prototypes, temperature)?;
    let tau_batch = cb.tasks_in_batch() as f64;
    let terms = cb
        .task_ids
        .iter()
        .enumerate()
        .map(|(row, &t)| ContrastTerm {
            row,
            positive: t,
            negatives: (0..tau).filter(|&m| m != t).collect(),
            weight: 1.0 / ((cb.counts[&t].saturating_sub(1)).max(1) as f64 * tau_batch),
        })
        .collect();
    tape.contrastive_nll(scores, terms, include_positive)
}

/// `l_plm + λ·(l_ir + l_pro)`; absent auxiliary terms count as zero.
pub fn total_loss(tape: &mut Tape, l_plm: Var, l_ir: Option<Var>, l_pro: Option<Var>, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(PhaError::Contract(format!("lambda must be >= 0, got {lambda}")));
    }
    let aux = match (l_ir, l_pro) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (a, b) => a.or(b),
    };
    // At lambda = 0 the auxiliary terms stay on the tape so the retriever
    // and prototypes still receive (zero) gradients.
    match aux {
        Some(a) => {
            let s = tape.scale(a, lambda);
            tape.add(l_plm, s)
        }
        _ => Ok(l_plm),
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PhaError::dim("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(PhaError::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean cosine of the support vectors against each prototype; returns the
/// argmax (lowest index on ties) and all scores. Zero-norm support rows are
/// skipped.
pub fn match_prototype(support_z: &Tensor, prototypes: &Tensor) -> Result<(usize, Vec<f64>)> {
    if support_z.shape().len() != 2 || prototypes.shape().len() != 2 || support_z.last_dim() != prototypes.last_dim() {
        return Err(PhaError::dim("match_prototype", support_z.shape(), prototypes.shape()));
    }
    let tau = prototypes.rows();
    let mut scores = vec![0.0; tau];
    let mut used = 0;
    for r in 0..support_z.rows() {
        let z = support_z.row(r);
        if z.iter().all(|&v| v == 0.0) {
            log::warn!("match_prototype: skipping zero-norm support vector {r}");
            continue;
        }
        used += 1;
        for (i, s) in scores.iter_mut().enumerate() {
            *s += cosine_similarity(z, prototypes.row(i))?;
        }
    }
    if used == 0 {
        return Err(PhaError::Degenerate("no usable support vector".into()));
    }
    scores.iter_mut().for_each(|s| *s /= used as f64);
    let mut best = 0;
    for i in 1..tau {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Trainable parameters of each PHA component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub retriever: usize,
    pub embeddings: usize,
    pub projection: usize,
    pub hypernet: usize,
    pub shared_adapters: usize,
    pub total: usize,
}

pub fn count_parameters(cfg: &ModelConfig, d_r: usize, d_h: usize, tau: usize) -> ParamReport {
    let d = cfg.d_model;
    let a = cfg.adapter_size();
    let retriever = d * d_r + d_r * d_r;
    let embeddings = (tau + cfg.dec_layers) * d_r;
    let projection = 2 * d_r * d_h;
    let hypernet = d_h * a;
    let shared_adapters = cfg.enc_layers * a;
    ParamReport {
        retriever,
        embeddings,
        projection,
        hypernet,
        shared_adapters,
        total: retriever + embeddings + projection + hypernet + shared_adapters,
    }
}

/// Rows are probes, columns the prototypes named in `columns`.
pub fn write_similarity_csv<W: Write>(out: W, columns: &[String], rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["task".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (name, scores) in rows {
        if scores.len() != columns.len() {
            return Err(PhaError::dim("similarity row", &[scores.len()], &[columns.len()]));
        }
        let mut rec = vec![name.clone()];
        rec.extend(scores.iter().map(|s| format!("{s:.6}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `task_id, dim_0 .. dim_{n-1}`.
pub fn write_embedding_csv<W: Write>(out: W, task_ids: &[usize], z: &Tensor) -> Result<()> {
    if z.rows() != task_ids.len() {
        return Err(PhaError::dim("embedding export", z.shape(), &[task_ids.len()]));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["task_id".to_string()];
    header.extend((0..z.last_dim()).map(|i| format!("dim_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (r, t) in task_ids.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(z.row(r).iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> PhaError {
    PhaError::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    #[test]
    fn cosine_hand_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(PhaError::Degenerate(_))
        ));
    }

    #[test]
    fn retriever_of_zero_is_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = RetrieverParams::init(&mut store, 6, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[4, 6]));
        let z = retrieve_vector(&store, &mut tape, h, &r).unwrap();
        assert_eq!(tape.shape(z), &[4, 3]);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layout_is_contiguous() {
        let l = AdapterLayout::new(4, 2);
        assert_eq!(l.down, (0, 8));
        assert_eq!(l.up, (8, 16));
        assert_eq!(l.bias_up, (16, 18));
        assert_eq!(l.bias_down, (18, 22));
        assert_eq!(l.bias_down.1, adapter_size(4, 2));
    }

    #[test]
    fn uniform_vectors_give_log_of_denominator() {
        let mut tape = Tape::new();
        let z = tape.constant(rows(&vec![vec![1.0, 1.0]; 4]));
        let cb = ContrastiveBatch::new(&tape, z, vec![0, 0, 1, 1]).unwrap();
        let l = info_nce_loss(&mut tape, &cb, 1.0, true).unwrap();
        // every anchor: log(1 + |S|) = log 3, summed over 4 anchors / τ_batch = 2
        assert!((tape.value(l).item() - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_task_batch_is_rejected() {
        let mut tape = Tape::new();
        let z = tape.constant(rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let cb = ContrastiveBatch::new(&tape, z, vec![3, 3]).unwrap();
        assert!(matches!(info_nce_loss(&mut tape, &cb, 1.0, true), Err(PhaError::Contract(_))));
    }

    #[test]
    fn prototype_loss_needs_two_prototypes() {
        let mut tape = Tape::new();
        let z = tape.constant(rows(&[vec![1.0, 0.0]]));
        let k = tape.constant(rows(&[vec![1.0, 0.0]]));
        let cb = ContrastiveBatch::new(&tape, z, vec![0]).unwrap();
        assert!(matches!(prototype_loss(&mut tape, &cb, k, 1.0, true), Err(PhaError::Contract(_))));
    }

    #[test]
    fn total_loss_combinations() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(2.0));
        let i = tape.constant(Tensor::scalar(0.5));
        let r = tape.constant(Tensor::scalar(0.3));
        let t = total_loss(&mut tape, p, Some(i), Some(r), 0.1).unwrap();
        assert!((tape.value(t).item() - 2.08).abs() < 1e-12);
        let t = total_loss(&mut tape, p, Some(i), Some(r), 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 2.0);
        assert!(total_loss(&mut tape, p, None, None, -1.0).is_err());
    }

    #[test]
    fn match_prototype_ties_and_scale() {
        let k = rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let (i, s) = match_prototype(&rows(&[vec![0.0, 2.0, 0.0]]), &k).unwrap();
        assert_eq!(i, 1);
        assert_eq!(s[1], 1.0);
        let (i, s) = match_prototype(&rows(&[vec![1.0, 0.0, 1.0]]), &k).unwrap();
        assert_eq!(i, 0);
        assert!((s[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((s[2] - s[0]).abs() < 1e-15);
        assert!(match_prototype(&rows(&[vec![0.0, 0.0, 0.0]]), &k).is_err());
    }

    #[test]
    fn hand_derived_parameter_total() {
        let cfg = ModelConfig {
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            d_ff: 128,
            bottleneck: 8,
            vocab_size: 44,
            max_len: 32,
            ln_eps: 1e-5,
        };
        let r = count_parameters(&cfg, 16, 8, 3);
        assert_eq!(r.retriever, 1280);
        assert_eq!(r.embeddings, 80);
        assert_eq!(r.projection, 256);
        assert_eq!(r.hypernet, 8768);
        assert_eq!(r.shared_adapters, 2192);
        assert_eq!(r.total, 12_576);
        assert_eq!(count_parameters(&cfg, 16, 8, 4).total, 12_576 + 16);
    }

    #[test]
    fn similarity_csv_shape() {
        let mut buf = Vec::new();
        let cols = vec!["a".to_string(), "b".to_string()];
        write_similarity_csv(&mut buf, &cols, &[("a".into(), vec![1.0, 0.25])]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "task,a,b");
        assert_eq!(lines[1].split(',').count(), 3);
    }
}
