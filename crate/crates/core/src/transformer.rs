//! Tiny pre-norm encoder-decoder transformer with adapter slots at every FFN
//! sub-layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionSpec, Tape, Var};
use crate::error::{PhaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn default_ln_eps() -> f64 {
    1e-5
}

/// Backbone dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Adapter bottleneck width.
    pub bottleneck: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PhaError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return err(format!(
                "model.d_model ({}) must be a positive multiple of model.heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.bottleneck == 0 || self.bottleneck >= self.d_model {
            return err(format!(
                "model.bottleneck ({}) must satisfy 1 <= b < d_model ({})",
                self.bottleneck, self.d_model
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return err("model.enc_layers and model.dec_layers must be >= 1".into());
        }
        if self.d_ff == 0 || self.vocab_size < 4 || self.max_len < 3 {
            return err("model.d_ff, model.vocab_size or model.max_len too small".into());
        }
        if self.ln_eps <= 0.0 {
            return err("model.ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Scalars in one adapter: `2db + b + d`.
    pub fn adapter_size(&self) -> usize {
        adapter_size(self.d_model, self.bottleneck)
    }
}

pub fn adapter_size(d: usize, b: usize) -> usize {
    2 * d * b + b + d
}

/// How an adapter's output is combined with its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterMode {
    /// `D·ReLU(U·x + b_u) + b_d + x`
    Sequential,
    /// `D·ReLU(U·x + b_u) + b_d`, added beside the FFN.
    ParallelBranch,
}

/// A stored adapter. `up: [b × d]` projects into the bottleneck,
/// `down: [d × b]` back out.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub up: ParamId,
    pub down: ParamId,
    pub bias_up: ParamId,
    pub bias_down: ParamId,
}

impl AdapterParams {
    /// `up` random, everything else zero: the branch outputs exactly zero
    /// but `down` still receives gradient on the first step.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, b) = (cfg.d_model, cfg.bottleneck);
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            up: store.insert(&format!("{prefix}.up"), Tensor::randn(&[b, d], std, rng), true)?,
            down: store.insert(&format!("{prefix}.down"), Tensor::zeros(&[d, b]), true)?,
            bias_up: store.insert(&format!("{prefix}.bias_up"), Tensor::zeros(&[b]), true)?,
            bias_down: store.insert(&format!("{prefix}.bias_down"), Tensor::zeros(&[d]), true)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.up, self.down, self.bias_up, self.bias_down]
    }

    pub fn bind(&self, store: &ParamStore, tape: &mut Tape) -> AdapterVars {
        AdapterVars {
            up: tape.bind(store, self.up),
            down: tape.bind(store, self.down),
            bias_up: tape.bind(store, self.bias_up),
            bias_down: tape.bind(store, self.bias_down),
        }
    }
}

/// Adapter weights as tape nodes (bound parameters or hypernetwork output).
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub up: Var,
    pub down: Var,
    pub bias_up: Var,
    pub bias_down: Var,
}

pub fn adapter_forward(tape: &mut Tape, x: Var, p: &AdapterVars, mode: AdapterMode) -> Result<Var> {
    let d = tape.value(x).last_dim();
    if tape.shape(p.up).get(1) != Some(&d) || tape.shape(p.down).first() != Some(&d) {
        return Err(PhaError::dim("adapter_forward", tape.shape(x), tape.shape(p.up)));
    }
    let h = tape.matmul_t(x, p.up)?;
    let h = tape.add_row(h, p.bias_up)?;
    let h = tape.relu(h);
    let out = tape.matmul_t(h, p.down)?;
    let out = tape.add_row(out, p.bias_down)?;
    match mode {
        AdapterMode::ParallelBranch => Ok(out),
        AdapterMode::Sequential => tape.add(out, x),
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(&format!("{prefix}.gain"), Tensor::full(&[d], 1.0), true)?,
            bias: store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[d]), true)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
        let g = tape.bind(store, self.gain);
        let b = tape.bind(store, self.bias);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Bias-free multi-head attention projections, all `[d × d]`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    fn init<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let out_std = std / ((cfg.enc_layers + cfg.dec_layers) as f64).sqrt();
        let mut mk = |name: &str, s: f64| store.insert(&format!("{prefix}.{name}"), Tensor::randn(&[d, d], s, rng), true);
        Ok(Self {
            wq: mk("wq", std)?,
            wk: mk("wk", std)?,
            wv: mk("wv", std)?,
            wo: mk("wo", out_std)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl FfnParams {
    fn init<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let layers = (cfg.enc_layers + cfg.dec_layers) as f64;
        Ok(Self {
            w_in: store.insert(
                &format!("{prefix}.w_in"),
                Tensor::randn(&[f, d], 1.0 / (d as f64).sqrt(), rng),
                true,
            )?,
            b_in: store.insert(&format!("{prefix}.b_in"), Tensor::zeros(&[f]), true)?,
            w_out: store.insert(
                &format!("{prefix}.w_out"),
                Tensor::randn(&[d, f], 1.0 / (f as f64 * layers).sqrt(), rng),
                true,
            )?,
            b_out: store.insert(&format!("{prefix}.b_out"), Tensor::zeros(&[d]), true)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let w_in = tape.bind(store, self.w_in);
        let b_in = tape.bind(store, self.b_in);
        let w_out = tape.bind(store, self.w_out);
        let b_out = tape.bind(store, self.b_out);
        let h = tape.matmul_t(x, w_in)?;
        let h = tape.add_row(h, b_in)?;
        let h = tape.relu(h);
        let o = tape.matmul_t(h, w_out)?;
        tape.add_row(o, b_out)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub ln_attn: LayerNormParams,
    pub attn: AttentionParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub ln_self: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln_cross: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FfnParams,
}

/// The frozen backbone plus the task-shared encoder adapters it carries.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    pub enc_final: LayerNormParams,
    pub decoder: Vec<DecoderLayerParams>,
    pub dec_final: LayerNormParams,
    pub out_head: ParamId,
    /// One shared adapter per encoder layer, registered under `pha.`.
    pub shared_adapters: Vec<AdapterParams>,
}

pub const BACKBONE_PREFIX: &str = "backbone.";

impl BackboneParams {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok_emb = store.insert("backbone.tok_emb", Tensor::randn(&[cfg.vocab_size, d], 1.0, rng), true)?;
        let pos_emb = store.insert("backbone.pos_emb", Tensor::randn(&[cfg.max_len, d], 1.0, rng), true)?;
        let mut encoder = Vec::with_capacity(cfg.enc_layers);
        for l in 0..cfg.enc_layers {
            let p = format!("backbone.enc.{l}");
            encoder.push(EncoderLayerParams {
                ln_attn: LayerNormParams::init(store, &format!("{p}.ln_attn"), d)?,
                attn: AttentionParams::init(store, &format!("{p}.attn"), cfg, rng)?,
                ln_ffn: LayerNormParams::init(store, &format!("{p}.ln_ffn"), d)?,
                ffn: FfnParams::init(store, &format!("{p}.ffn"), cfg, rng)?,
            });
        }
        let enc_final = LayerNormParams::init(store, "backbone.enc_final", d)?;
        let mut decoder = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let p = format!("backbone.dec.{l}");
            decoder.push(DecoderLayerParams {
                ln_self: LayerNormParams::init(store, &format!("{p}.ln_self"), d)?,
                self_attn: AttentionParams::init(store, &format!("{p}.self_attn"), cfg, rng)?,
                ln_cross: LayerNormParams::init(store, &format!("{p}.ln_cross"), d)?,
                cross_attn: AttentionParams::init(store, &format!("{p}.cross_attn"), cfg, rng)?,
                ln_ffn: LayerNormParams::init(store, &format!("{p}.ln_ffn"), d)?,
                ffn: FfnParams::init(store, &format!("{p}.ffn"), cfg, rng)?,
            });
        }
        let dec_final = LayerNormParams::init(store, "backbone.dec_final", d)?;
        let out_head = store.insert(
            "backbone.out_head",
            Tensor::randn(&[cfg.vocab_size, d], 1.0 / (d as f64).sqrt(), rng),
            true,
        )?;
        let mut shared_adapters = Vec::with_capacity(cfg.enc_layers);
        for l in 0..cfg.enc_layers {
            shared_adapters.push(AdapterParams::init(store, &format!("pha.shared_adapter.{l}"), cfg, rng)?);
        }
        Ok(Self {
            tok_emb,
            pos_emb,
            encoder,
            enc_final,
            decoder,
            dec_final,
            out_head,
            shared_adapters,
        })
    }

    pub fn shared_adapter_ids(&self) -> Vec<ParamId> {
        self.shared_adapters.iter().flat_map(|a| a.ids()).collect()
    }
}

/// Token ids laid out `[batch, len]` with a `true`-for-real-token mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenGrid {
    pub fn new(ids: Vec<usize>, mask: Vec<bool>, batch: usize, len: usize) -> Result<Self> {
        if ids.len() != batch * len || mask.len() != batch * len {
            return Err(PhaError::dim("token grid", &[ids.len(), mask.len()], &[batch, len]));
        }
        Ok(Self { ids, mask, batch, len })
    }

    /// Pad ragged sequences with `pad` up to the longest one.
    pub fn from_sequences(seqs: &[Vec<usize>], pad: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(PhaError::Contract("empty batch".into()));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat(true).take(s.len()));
            ids.extend(std::iter::repeat(pad).take(len - s.len()));
            mask.extend(std::iter::repeat(false).take(len - s.len()));
        }
        Self::new(ids, mask, seqs.len(), len)
    }

    /// Rows `index` of this grid.
    pub fn select(&self, index: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(index.len() * self.len);
        let mut mask = Vec::with_capacity(index.len() * self.len);
        for &i in index {
            ids.extend_from_slice(&self.ids[i * self.len..(i + 1) * self.len]);
            mask.extend_from_slice(&self.mask[i * self.len..(i + 1) * self.len]);
        }
        Self {
            ids,
            mask,
            batch: index.len(),
            len: self.len,
        }
    }
}

/// Decoder adapters for one forward pass.
#[derive(Clone, Debug)]
pub enum DecoderAdapters {
    /// No adapter branch at all: the plain backbone.
    None,
    /// One adapter per decoder layer, used by every example.
    Shared(Vec<AdapterVars>),
    /// Disjoint example groups, each with its own per-layer adapters.
    Grouped(Vec<AdapterGroup>),
}

#[derive(Clone, Debug)]
pub struct AdapterGroup {
    pub examples: Vec<usize>,
    pub layers: Vec<AdapterVars>,
}

/// How generated/shared adapters attach to the FFN sub-layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockOptions {
    /// Use the sequential adapter (with its own residual) as the parallel
    /// branch, i.e. the literal composition that also adds `LN(x)`.
    pub literal_eq8: bool,
}

impl BlockOptions {
    fn mode(self) -> AdapterMode {
        if self.literal_eq8 {
            AdapterMode::Sequential
        } else {
            AdapterMode::ParallelBranch
        }
    }
}

/// `x + FFN(LN(x)) + A(LN(x))`, where `A` is applied per example group.
#[allow(clippy::too_many_arguments)]
pub fn ffn_block_forward(
    store: &ParamStore,
    tape: &mut Tape,
    x: Var,
    ln: &LayerNormParams,
    ffn: &FfnParams,
    branch: BranchAdapters<'_>,
    eps: f64,
    opts: BlockOptions,
) -> Result<Var> {
    let n = ln.forward(store, tape, x, eps)?;
    let f = ffn.forward(store, tape, n)?;
    let y = tape.add(x, f)?;
    let a = match branch {
        BranchAdapters::None => return Ok(y),
        BranchAdapters::All(p) => adapter_forward(tape, n, p, opts.mode())?,
        BranchAdapters::Groups(groups) => {
            let shape = tape.shape(n).to_vec();
            let mut parts = Vec::with_capacity(groups.len());
            for (examples, p) in groups {
                let rows = tape.gather_rows(n, examples)?;
                let out = adapter_forward(tape, rows, p, opts.mode())?;
                parts.push((out, examples.to_vec()));
            }
            tape.scatter_add_rows(&parts, &shape)?
        }
    };
    tape.add(y, a)
}

/// Adapter branch for one FFN sub-layer.
#[derive(Clone, Copy, Debug)]
pub enum BranchAdapters<'a> {
    None,
    All(&'a AdapterVars),
    /// `(example indices along the batch axis, adapter)`
    Groups(&'a [(Vec<usize>, AdapterVars)]),
}

/// Pre-norm multi-head attention with residual: `x + Wo·Attn(LN(x), kv)`.
/// `x: [B, Tq, d]`; `kv` is `[B, Tk, d]` for cross-attention or `None` for
/// self-attention.
#[allow(clippy::too_many_arguments)]
pub fn attention_block_forward(
    store: &ParamStore,
    tape: &mut Tape,
    x: Var,
    kv: Option<Var>,
    ln: &LayerNormParams,
    p: &AttentionParams,
    heads: usize,
    causal: bool,
    key_mask: &[bool],
    eps: f64,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(PhaError::dim("attention_block", &shape, &[3]));
    }
    let (batch, q_len) = (shape[0], shape[1]);
    let n = ln.forward(store, tape, x, eps)?;
    let source = kv.unwrap_or(n);
    let k_len = tape.shape(source)[1];
    if key_mask.len() != batch * k_len {
        return Err(PhaError::dim("attention mask", &[key_mask.len()], &[batch, k_len]));
    }
    let (wq, wk, wv, wo) = (
        tape.bind(store, p.wq),
        tape.bind(store, p.wk),
        tape.bind(store, p.wv),
        tape.bind(store, p.wo),
    );
    let q = tape.matmul_t(n, wq)?;
    let k = tape.matmul_t(source, wk)?;
    let v = tape.matmul_t(source, wv)?;
    let a = tape.attention(
        q,
        k,
        v,
        AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            causal,
            key_mask: Some(key_mask.to_vec()),
        },
    )?;
    let o = tape.matmul_t(a, wo)?;
    tape.add(x, o)
}

fn embed(store: &ParamStore, tape: &mut Tape, bb: &BackboneParams, grid: &TokenGrid, cfg: &ModelConfig) -> Result<Var> {
    if let Some(&bad) = grid.ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(PhaError::Index(format!("token {bad} >= vocab size {}", cfg.vocab_size)));
    }
    if grid.len > cfg.max_len {
        return Err(PhaError::Contract(format!(
            "sequence length {} exceeds max_len {}; truncate first",
            grid.len, cfg.max_len
        )));
    }
    let tok = tape.bind(store, bb.tok_emb);
    let pos = tape.bind(store, bb.pos_emb);
    let t = tape.gather_rows(tok, &grid.ids)?;
    let positions: Vec<usize> = (0..grid.batch).flat_map(|_| 0..grid.len).collect();
    let p = tape.gather_rows(pos, &positions)?;
    let x = tape.add(t, p)?;
    tape.reshape(x, &[grid.batch, grid.len, cfg.d_model])
}

/// Encoder stack. `shared` holds one adapter per encoder layer, or `None`
/// for the plain backbone. Returns `[B, T, d]` after the final layer norm.
pub fn encode(
    store: &ParamStore,
    tape: &mut Tape,
    bb: &BackboneParams,
    cfg: &ModelConfig,
    src: &TokenGrid,
    shared: Option<&[AdapterVars]>,
    opts: BlockOptions,
) -> Result<Var> {
    if let Some(s) = shared {
        if s.len() != bb.encoder.len() {
            return Err(PhaError::Contract(format!(
                "{} shared adapters for {} encoder layers",
                s.len(),
                bb.encoder.len()
            )));
        }
    }
    let mut x = embed(store, tape, bb, src, cfg)?;
    for (l, layer) in bb.encoder.iter().enumerate() {
        x = attention_block_forward(
            store,
            tape,
            x,
            None,
            &layer.ln_attn,
            &layer.attn,
            cfg.heads,
            false,
            &src.mask,
            cfg.ln_eps,
        )?;
        let branch = match shared {
            Some(s) => BranchAdapters::All(&s[l]),
            None => BranchAdapters::None,
        };
        x = ffn_block_forward(store, tape, x, &layer.ln_ffn, &layer.ffn, branch, cfg.ln_eps, opts)?;
    }
    bb.enc_final.forward(store, tape, x, cfg.ln_eps)
}

/// Teacher-forced decoder pass returning logits `[B, T, vocab]`.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    store: &ParamStore,
    tape: &mut Tape,
    bb: &BackboneParams,
    cfg: &ModelConfig,
    enc_out: Var,
    src_mask: &[bool],
    tgt: &TokenGrid,
    adapters: &DecoderAdapters,
    opts: BlockOptions,
) -> Result<Var> {
    let layers = bb.decoder.len();
    let per_layer: Vec<Vec<(Vec<usize>, AdapterVars)>> = match adapters {
        DecoderAdapters::None => Vec::new(),
        DecoderAdapters::Shared(list) => {
            if list.len() != layers {
                return Err(PhaError::Contract(format!(
                    "{} decoder adapters for {layers} decoder layers",
                    list.len()
                )));
            }
            Vec::new()
        }
        DecoderAdapters::Grouped(groups) => {
            let mut seen = vec![false; tgt.batch];
            for g in groups {
                if g.layers.len() != layers {
                    return Err(PhaError::Contract(format!(
                        "{} decoder adapters for {layers} decoder layers",
                        g.layers.len()
                    )));
                }
                for &e in &g.examples {
                    if e >= tgt.batch || seen[e] {
                        return Err(PhaError::Contract(format!(
                            "adapter groups must partition the batch (example {e})"
                        )));
                    }
                    seen[e] = true;
                }
            }
            (0..layers)
                .map(|m| groups.iter().map(|g| (g.examples.clone(), g.layers[m])).collect())
                .collect()
        }
    };
    let enc_shape = tape.shape(enc_out).to_vec();
    if enc_shape.len() != 3 || enc_shape[0] != tgt.batch {
        return Err(PhaError::dim("decode", &enc_shape, &[tgt.batch, tgt.len]));
    }
    let mut x = embed(store, tape, bb, tgt, cfg)?;
    for (m, layer) in bb.decoder.iter().enumerate() {
        x = attention_block_forward(
            store,
            tape,
            x,
            None,
            &layer.ln_self,
            &layer.self_attn,
            cfg.heads,
            true,
            &tgt.mask,
            cfg.ln_eps,
        )?;
        x = attention_block_forward(
            store,
            tape,
            x,
            Some(enc_out),
            &layer.ln_cross,
            &layer.cross_attn,
            cfg.heads,
            false,
            src_mask,
            cfg.ln_eps,
        )?;
        let branch = match adapters {
            DecoderAdapters::None => BranchAdapters::None,
            DecoderAdapters::Shared(list) => BranchAdapters::All(&list[m]),
            DecoderAdapters::Grouped(_) => BranchAdapters::Groups(&per_layer[m]),
        };
        x = ffn_block_forward(store, tape, x, &layer.ln_ffn, &layer.ffn, branch, cfg.ln_eps, opts)?;
    }
    let x = bb.dec_final.forward(store, tape, x, cfg.ln_eps)?;
    let head = tape.bind(store, bb.out_head);
    tape.matmul_t(x, head)
}
