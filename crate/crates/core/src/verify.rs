//! Self-checks shared by the `verify` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::model::{Ablations, Conditioning, PhaModel};
use crate::params::ParamId;
use crate::pha::count_parameters;
use crate::tasks::{generate_examples, Example, TaskBatch};
use crate::tensor::Tensor;

/// A model whose backbone and PHA parameters are all random (no zero
/// blocks), so every gradient path is live.
pub fn random_point_model(cfg: &RunConfig, ablations: Ablations, seed: u64) -> Result<PhaModel> {
    let mut m = PhaModel::new(cfg.model.clone(), cfg.pha.clone(), ablations, &cfg.task_names(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in m.store.trainable_ids() {
        let shape = m.store.value(id).shape().to_vec();
        let noise = Tensor::randn(&shape, 0.3, &mut rng);
        m.store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(v, n)| *v += n);
    }
    Ok(m)
}

/// A small mixed batch with `per_task` examples of each registered task.
pub fn mixed_batch(cfg: &RunConfig, per_task: usize, seed: u64) -> Result<TaskBatch> {
    let mut all: Vec<Example> = Vec::new();
    for (i, t) in cfg.tasks.iter().enumerate() {
        all.extend(generate_examples(t, i, per_task, seed)?);
    }
    TaskBatch::from_examples(&all.iter().collect::<Vec<_>>())
}

/// Central-difference check of the full training objective with respect
/// to every trainable parameter.
pub fn check_gradients(cfg: &RunConfig, ablations: Ablations, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut m = random_point_model(cfg, ablations, seed)?;
    let batch = mixed_batch(cfg, 2, seed)?;
    let ids: Vec<ParamId> = m.store.trainable_ids();
    let lambda = cfg.train.lambda.max(0.1);
    let cond = Conditioning::Tasks(batch.task_ids.clone());
    let probe = m.clone();
    // Detaching h means training follows the gradient of the loss with h
    // held at its current value; check against that function.
    let fixed_h = if m.ablations.stop_grad_h {
        Some(m.pooled(&mut Tape::new(), &batch)?)
    } else {
        None
    };
    finite_diff_check(&mut m.store, &ids, eps, |store, tape| {
        let view = PhaModel {
            store: store.clone(),
            ..probe.clone()
        };
        // Parameters are rebound from `store` through `view`; tape binding
        // records the ids, which are shared with `store`.
        Ok(view.losses_with(tape, &batch, &cond, lambda, fixed_h.as_ref())?.total)
    })
}

/// Trainable-parameter total predicted by the closed-form count, adjusted
/// for ablations that remove or re-shape components.
pub fn expected_census(model: &PhaModel) -> usize {
    let (d, d_r, d_h) = (model.model_cfg.d_model, model.pha_cfg.retrieval_dim, model.pha_cfg.hyper_dim);
    let tau = model.bank.num_tasks();
    let report = count_parameters(&model.model_cfg, d_r, d_h, tau);
    let mut total = report.total;
    if model.ablations.no_retriever {
        // Prototypes and the projection's key half are d-wide instead of d'.
        total = total - report.retriever - tau * d_r - d_r * d_h + tau * d + d * d_h;
    }
    if model.ablations.no_prototype {
        total -= tau * model.key_dim();
    }
    total
}

/// Formula total versus the registry's trainable census.
pub fn census_matches(model: &PhaModel) -> (usize, usize) {
    (expected_census(model), model.store.trainable_census())
}

/// Zero `H` and every shared adapter tensor.
pub fn zero_adapters(model: &mut PhaModel) {
    model.store.value_mut(model.hypernet.generator).fill(0.0);
    for a in model.backbone.shared_adapters.clone() {
        for id in a.ids() {
            model.store.value_mut(id).fill(0.0);
        }
    }
}

/// Number of batches (out of `batches`) whose PHA logits differ in any bit
/// from the plain backbone's.
pub fn zero_init_mismatches(cfg: &RunConfig, ablations: Ablations, batches: usize, seed: u64) -> Result<usize> {
    let mut m = random_point_model(cfg, ablations, seed)?;
    zero_adapters(&mut m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..batches {
        let per_task = rng.random_range(1..=3);
        let batch = mixed_batch(cfg, per_task, rng.random())?;
        let mut tape = Tape::new();
        let a = m.logits(&mut tape, &batch, &Conditioning::Tasks(batch.task_ids.clone()))?;
        let b = m.logits(&mut tape, &batch, &Conditioning::Backbone)?;
        let same = tape
            .value(a)
            .data()
            .iter()
            .zip(tape.value(b).data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            bad += 1;
        }
    }
    Ok(bad)
}
