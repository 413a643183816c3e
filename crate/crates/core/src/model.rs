//! The full PHA model: frozen backbone, shared encoder adapters, retriever,
//! prototype bank and hypernetwork, plus greedy decoding.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{PhaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::pha::{
    generate_decoder_adapters_for_key, info_nce_loss, prototype_loss, retrieve_vector, total_loss,
    ContrastiveBatch, HyperNetParams, PhaConfig, PrototypeBank, RetrieverParams,
};
use crate::tasks::{TaskBatch, BOS, EOS, PAD};
use crate::tensor::Tensor;
use crate::transformer::{
    decode, encode, AdapterGroup, AdapterVars, BackboneParams, BlockOptions, DecoderAdapters, ModelConfig, TokenGrid,
    BACKBONE_PREFIX,
};

/// Switches that remove or alter parts of the method.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Condition the hypernetwork on each instance's retrieval vector
    /// instead of a task prototype; no prototype loss.
    pub no_prototype: bool,
    /// Drop the retriever: prototypes live in the pooled encoder space and
    /// there is no instance contrastive loss.
    pub no_retriever: bool,
    /// Detach pooled encoder states before the retriever.
    pub stop_grad_h: bool,
    /// Use the sequential adapter (with its own residual) as the FFN branch.
    pub literal_eq8: bool,
    /// Contrastive denominators over negatives only.
    pub literal_negatives_only: bool,
}

/// What the decoder adapters are generated from.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    /// Each example's own task prototype (or its own retrieval vector
    /// under `no_prototype`).
    Tasks(Vec<usize>),
    /// One stored embedding for every example.
    Key(ParamId),
    /// No adapters anywhere: the plain backbone.
    Backbone,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub l_plm: Var,
    pub l_ir: Option<Var>,
    pub l_pro: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct PhaModel {
    pub store: ParamStore,
    pub model_cfg: ModelConfig,
    pub pha_cfg: PhaConfig,
    pub ablations: Ablations,
    pub backbone: BackboneParams,
    pub retriever: Option<RetrieverParams>,
    pub bank: PrototypeBank,
    pub hypernet: HyperNetParams,
}

impl PhaModel {
    /// Fresh model; the backbone is randomly initialised and frozen.
    pub fn new(
        model_cfg: ModelConfig,
        pha_cfg: PhaConfig,
        ablations: Ablations,
        task_names: &[String],
        seed: u64,
    ) -> Result<Self> {
        model_cfg.validate()?;
        pha_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = BackboneParams::init(&mut store, &model_cfg, &mut rng)?;
        let retriever = if ablations.no_retriever {
            None
        } else {
            Some(RetrieverParams::init(&mut store, model_cfg.d_model, pha_cfg.retrieval_dim, &mut rng)?)
        };
        let key_dim = if ablations.no_retriever {
            model_cfg.d_model
        } else {
            pha_cfg.retrieval_dim
        };
        let bank = PrototypeBank::init(&mut store, task_names, key_dim, &pha_cfg, model_cfg.dec_layers, &mut rng)?;
        let hypernet = HyperNetParams::init(&mut store, &model_cfg, key_dim, &pha_cfg, &mut rng)?;
        if ablations.no_prototype {
            // Prototypes neither condition generation nor enter any loss.
            store.set_requires_grad(bank.prototypes, false);
        }
        store.freeze_prefix(BACKBONE_PREFIX);
        Ok(Self {
            store,
            model_cfg,
            pha_cfg,
            ablations,
            backbone,
            retriever,
            bank,
            hypernet,
        })
    }

    /// Overwrite every backbone parameter with the same-named value in `src`.
    pub fn load_backbone(&mut self, src: &ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = self
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with(BACKBONE_PREFIX))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            let sid = src
                .id(&name)
                .ok_or_else(|| PhaError::Checkpoint(format!("backbone parameter {name} missing")))?;
            let v = src.value(sid);
            if v.shape() != self.store.value(id).shape() {
                return Err(PhaError::dim("load_backbone", v.shape(), self.store.value(id).shape()));
            }
            *self.store.value_mut(id) = v.clone();
        }
        Ok(())
    }

    pub fn key_dim(&self) -> usize {
        self.store.value(self.bank.prototypes).last_dim()
    }

    pub fn task_names(&self) -> &[String] {
        &self.bank.task_names
    }

    fn opts(&self) -> BlockOptions {
        BlockOptions {
            literal_eq8: self.ablations.literal_eq8,
        }
    }

    fn shared_vars(&self, tape: &mut Tape) -> Vec<AdapterVars> {
        self.backbone
            .shared_adapters
            .iter()
            .map(|a| a.bind(&self.store, tape))
            .collect()
    }

    /// Encoder output `[B, T, d]`; adapters only when not in backbone mode.
    pub fn encode(&self, tape: &mut Tape, src: &TokenGrid, with_adapters: bool) -> Result<Var> {
        let shared = with_adapters.then(|| self.shared_vars(tape));
        encode(&self.store, tape, &self.backbone, &self.model_cfg, src, shared.as_deref(), self.opts())
    }

    /// Retrieval vectors `[B, key_dim]` from encoder output.
    pub fn retrieval_vectors(&self, tape: &mut Tape, enc: Var, src_mask: &[bool]) -> Result<Var> {
        self.retrieval_vectors_with(tape, enc, src_mask, None)
    }

    /// Pooled encoder state, as the retriever sees it.
    pub fn pooled(&self, tape: &mut Tape, batch: &TaskBatch) -> Result<Tensor> {
        let enc = self.encode(tape, &batch.src, true)?;
        let h = tape.mean_pool(enc, &batch.src.mask)?;
        Ok(tape.value(h).clone())
    }

    fn retrieval_vectors_with(&self, tape: &mut Tape, enc: Var, src_mask: &[bool], fixed_h: Option<&Tensor>) -> Result<Var> {
        let h = match fixed_h {
            Some(t) => tape.constant(t.clone()),
            None => tape.mean_pool(enc, src_mask)?,
        };
        let h = if self.ablations.stop_grad_h { tape.detach(h) } else { h };
        match &self.retriever {
            Some(r) => retrieve_vector(&self.store, tape, h, r),
            None => Ok(h),
        }
    }

    fn decoder_adapters(&self, tape: &mut Tape, cond: &Conditioning, z: Option<Var>) -> Result<DecoderAdapters> {
        let (store, bank, hp, cfg) = (&self.store, &self.bank, &self.hypernet, &self.model_cfg);
        match cond {
            Conditioning::Backbone => Ok(DecoderAdapters::None),
            Conditioning::Key(id) => {
                let k = tape.bind(store, *id);
                let k = tape.reshape(k, &[1, tape.value(k).numel()])?;
                Ok(DecoderAdapters::Shared(generate_decoder_adapters_for_key(store, tape, k, bank, hp, cfg)?))
            }
            Conditioning::Tasks(task_ids) => {
                if self.ablations.no_prototype {
                    let z = z.ok_or_else(|| PhaError::Contract("per-instance conditioning needs z".into()))?;
                    let groups = (0..task_ids.len())
                        .map(|i| {
                            let key = tape.gather_rows(z, &[i])?;
                            Ok(AdapterGroup {
                                examples: vec![i],
                                layers: generate_decoder_adapters_for_key(store, tape, key, bank, hp, cfg)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    return Ok(DecoderAdapters::Grouped(groups));
                }
                let mut by_task: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, &t) in task_ids.iter().enumerate() {
                    if t >= bank.num_tasks() {
                        return Err(PhaError::Index(format!("task id {t} >= {} prototypes", bank.num_tasks())));
                    }
                    by_task.entry(t).or_default().push(i);
                }
                let protos = tape.bind(store, bank.prototypes);
                let groups = by_task
                    .into_iter()
                    .map(|(t, examples)| {
                        let key = tape.gather_rows(protos, &[t])?;
                        Ok(AdapterGroup {
                            examples,
                            layers: generate_decoder_adapters_for_key(store, tape, key, bank, hp, cfg)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DecoderAdapters::Grouped(groups))
            }
        }
    }

    /// Teacher-forced logits `[B, T, vocab]`.
    pub fn logits(&self, tape: &mut Tape, batch: &TaskBatch, cond: &Conditioning) -> Result<Var> {
        let with_adapters = *cond != Conditioning::Backbone;
        let enc = self.encode(tape, &batch.src, with_adapters)?;
        let z = if self.ablations.no_prototype && matches!(cond, Conditioning::Tasks(_)) {
            Some(self.retrieval_vectors(tape, enc, &batch.src.mask)?)
        } else {
            None
        };
        let adapters = self.decoder_adapters(tape, cond, z)?;
        decode(
            &self.store,
            tape,
            &self.backbone,
            &self.model_cfg,
            enc,
            &batch.src.mask,
            &batch.tgt_in,
            &adapters,
            self.opts(),
        )
    }

    /// Task cross-entropy plus, when conditioning on task ids, the two
    /// contrastive terms weighted by `lambda`.
    pub fn losses(&self, tape: &mut Tape, batch: &TaskBatch, cond: &Conditioning, lambda: f64) -> Result<LossParts> {
        self.losses_with(tape, batch, cond, lambda, None)
    }

    /// As [`losses`](Self::losses), but the retriever reads `fixed_h` instead
    /// of pooling the live encoder output. With `stop_grad_h` this is the
    /// function whose exact gradient training follows.
    pub fn losses_with(
        &self,
        tape: &mut Tape,
        batch: &TaskBatch,
        cond: &Conditioning,
        lambda: f64,
        fixed_h: Option<&Tensor>,
    ) -> Result<LossParts> {
        let with_adapters = *cond != Conditioning::Backbone;
        let enc = self.encode(tape, &batch.src, with_adapters)?;
        let contrastive = matches!(cond, Conditioning::Tasks(_));
        let z = if contrastive {
            Some(self.retrieval_vectors_with(tape, enc, &batch.src.mask, fixed_h)?)
        } else {
            None
        };
        let adapters = self.decoder_adapters(tape, cond, z)?;
        let logits = decode(
            &self.store,
            tape,
            &self.backbone,
            &self.model_cfg,
            enc,
            &batch.src.mask,
            &batch.tgt_in,
            &adapters,
            self.opts(),
        )?;
        let l_plm = tape.softmax_cross_entropy(logits, &batch.labels, PAD)?;
        let (mut l_ir, mut l_pro) = (None, None);
        if let Some(z) = z {
            let include_positive = !self.ablations.literal_negatives_only;
            let cb = ContrastiveBatch::new(tape, z, batch.task_ids.clone())?;
            if !self.ablations.no_retriever && cb.tasks_in_batch() >= 2 {
                l_ir = Some(info_nce_loss(tape, &cb, self.pha_cfg.temperature, include_positive)?);
            }
            if !self.ablations.no_prototype {
                let k = tape.bind(&self.store, self.bank.prototypes);
                l_pro = Some(prototype_loss(tape, &cb, k, self.pha_cfg.temperature, include_positive)?);
            }
        }
        let total = total_loss(tape, l_plm, l_ir, l_pro, lambda)?;
        Ok(LossParts {
            l_plm,
            l_ir,
            l_pro,
            total,
        })
    }

    /// Retrieval vectors for a list of encoder inputs, as a plain tensor.
    pub fn embed_inputs(&self, inputs: &[Vec<usize>]) -> Result<Tensor> {
        let src = TokenGrid::from_sequences(inputs, PAD)?;
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, &src, true)?;
        let z = self.retrieval_vectors(&mut tape, enc, &src.mask)?;
        Ok(tape.value(z).clone())
    }

    /// Greedy decoding. Returns, per input, the generated tokens after BOS
    /// up to (excluding) EOS.
    pub fn greedy_decode(&self, inputs: &[Vec<usize>], cond: &Conditioning, max_steps: usize) -> Result<Vec<Vec<usize>>> {
        let src = TokenGrid::from_sequences(inputs, PAD)?;
        let b = src.batch;
        if let Conditioning::Tasks(t) = cond {
            if t.len() != b {
                return Err(PhaError::dim("greedy_decode", &[t.len()], &[b]));
            }
        }
        let mut tape = Tape::new();
        let with_adapters = *cond != Conditioning::Backbone;
        let enc = self.encode(&mut tape, &src, with_adapters)?;
        let z = if self.ablations.no_prototype && matches!(cond, Conditioning::Tasks(_)) {
            Some(self.retrieval_vectors(&mut tape, enc, &src.mask)?)
        } else {
            None
        };
        let adapters = self.decoder_adapters(&mut tape, cond, z)?;
        let steps = max_steps.min(self.model_cfg.max_len - 1);
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; b];
        let mut done = vec![false; b];
        let v = self.model_cfg.vocab_size;
        for _ in 0..steps {
            let len = seqs[0].len();
            let grid = TokenGrid::new(seqs.concat(), vec![true; b * len], b, len)?;
            let logits = decode(
                &self.store,
                &mut tape,
                &self.backbone,
                &self.model_cfg,
                enc,
                &src.mask,
                &grid,
                &adapters,
                self.opts(),
            )?;
            let lv = tape.value(logits).data();
            for (i, seq) in seqs.iter_mut().enumerate() {
                let row = &lv[((i * len) + len - 1) * v..][..v];
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                let tok = if done[i] { PAD } else { best };
                done[i] |= tok == EOS;
                seq.push(tok);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(seqs
            .into_iter()
            .map(|s| s[1..].iter().copied().take_while(|&t| t != EOS && t != PAD).collect())
            .collect())
    }
}
