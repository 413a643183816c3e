//! Checkpoint files: one JSON manifest line, a newline, then every tensor as
//! little-endian f64 in manifest order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{PhaError, Result};
use crate::model::{Ablations, PhaModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::pha::PhaConfig;
use crate::tensor::Tensor;
use crate::transformer::ModelConfig;

const FORMAT: &str = "pha-checkpoint";
const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub pha: PhaConfig,
    pub ablations: Ablations,
    pub task_names: Vec<String>,
    pub step: usize,
    pub optimizer_step: Option<u64>,
    pub adamw: Option<AdamWConfig>,
    /// The run that produced this checkpoint, when known.
    pub run: Option<RunConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    requires_grad: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    meta: CheckpointMeta,
    tensors: Vec<Entry>,
}

pub fn save<W: Write>(out: &mut W, model: &PhaModel, opt: Option<&AdamW>, step: usize, run: Option<&RunConfig>) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor, bool)> =
        model.store.iter().map(|(_, p)| (p.name.clone(), &p.value, p.requires_grad)).collect();
    if let Some(o) = opt {
        for (name, (m, v)) in &o.moments {
            tensors.push((format!("{ADAM_M}{name}"), m, false));
            tensors.push((format!("{ADAM_V}{name}"), v, false));
        }
    }
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t, rg)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                requires_grad: *rg,
            };
            offset += t.numel() * 8;
            e
        })
        .collect();
    let manifest = Manifest {
        meta: CheckpointMeta {
            format: FORMAT.into(),
            version: VERSION,
            model: model.model_cfg.clone(),
            pha: model.pha_cfg.clone(),
            ablations: model.ablations.clone(),
            task_names: model.task_names().to_vec(),
            step,
            optimizer_step: opt.map(|o| o.step),
            adamw: opt.map(|o| o.cfg.clone()),
            run: run.cloned(),
        },
        tensors: entries,
    };
    serde_json::to_writer(&mut *out, &manifest)?;
    out.write_all(b"\n")?;
    let mut blob = Vec::with_capacity(offset);
    for (_, t, _) in &tensors {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&blob)?;
    Ok(())
}

pub fn save_file(path: &Path, model: &PhaModel, opt: Option<&AdamW>, step: usize, run: Option<&RunConfig>) -> Result<()> {
    let mut buf = Vec::new();
    save(&mut buf, model, opt, step, run)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// A loaded checkpoint: the rebuilt model, optimizer state if present, and
/// the metadata.
pub struct Loaded {
    pub model: PhaModel,
    pub optimizer: Option<AdamW>,
    pub meta: CheckpointMeta,
}

pub fn load<R: Read>(input: R) -> Result<Loaded> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let manifest: Manifest =
        serde_json::from_str(line.trim_end()).map_err(|e| PhaError::Checkpoint(format!("bad manifest: {e}")))?;
    let meta = manifest.meta;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(PhaError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            meta.format, meta.version
        )));
    }
    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;
    let mut model = PhaModel::new(meta.model.clone(), meta.pha.clone(), meta.ablations.clone(), &meta.task_names, 0)?;
    let mut optimizer = meta.adamw.clone().map(|cfg| {
        let mut o = AdamW::new(cfg);
        o.step = meta.optimizer_step.unwrap_or(0);
        o
    });
    let mut seen = vec![false; model.store.len()];
    let mut moments: std::collections::BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = Default::default();
    let mut end = 0;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let bytes = blob
            .get(e.offset..e.offset + n * 8)
            .ok_or_else(|| PhaError::Checkpoint(format!("tensor {} runs past the end of the file", e.name)))?;
        end = end.max(e.offset + n * 8);
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| PhaError::Checkpoint(err.to_string()))?;
        if let Some(name) = e.name.strip_prefix(ADAM_M) {
            moments.entry(name.to_string()).or_default().0 = Some(t);
        } else if let Some(name) = e.name.strip_prefix(ADAM_V) {
            moments.entry(name.to_string()).or_default().1 = Some(t);
        } else {
            let id = match model.store.id(&e.name) {
                Some(id) => id,
                // Extra embeddings such as a few-shot key are appended.
                None => model.store.insert(&e.name, t.clone(), e.requires_grad)?,
            };
            if id.index() < seen.len() {
                if model.store.value(id).shape() != t.shape() {
                    return Err(PhaError::Checkpoint(format!(
                        "tensor {} has shape {:?}, model expects {:?}",
                        e.name,
                        t.shape(),
                        model.store.value(id).shape()
                    )));
                }
                seen[id.index()] = true;
            }
            *model.store.value_mut(id) = t;
            model.store.set_requires_grad(id, e.requires_grad);
        }
    }
    if end != blob.len() {
        return Err(PhaError::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            blob.len() as isize - end as isize
        )));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(PhaError::Checkpoint(format!(
            "tensor {} missing from checkpoint",
            model.store.get(crate::params::ParamId(i)).name
        )));
    }
    if let Some(o) = optimizer.as_mut() {
        for (name, (m, v)) in moments {
            match (m, v) {
                (Some(m), Some(v)) => {
                    o.moments.insert(name, (m, v));
                }
                _ => return Err(PhaError::Checkpoint(format!("incomplete optimizer moments for {name}"))),
            }
        }
    }
    Ok(Loaded { model, optimizer, meta })
}

pub fn load_file(path: &Path) -> Result<Loaded> {
    let f = std::fs::File::open(path)
        .map_err(|e| PhaError::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    load(f)
}
