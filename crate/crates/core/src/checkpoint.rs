//! Binary model checkpoints.
//!
//! Layout: 8 magic bytes, a little-endian `u32` format version, a `u64`
//! header length, a JSON header (encoder config, head dropout, task specs,
//! vocabulary, tensor directory), then every tensor as little-endian `f64`
//! in directory order. Loading rebuilds the parameter trees from the config
//! and rejects any directory entry whose name or shape differs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams, TextEncoder, TransformerEncoder};
use crate::error::{Error, Result};
use crate::multitask::{HeadParams, MultiTaskModel, TaskSpec};
use crate::params::{ParamTree, TensorRef};
use crate::tokenization::Vocabulary;

pub const MAGIC: &[u8; 8] = b"MMTLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    head_dropout: f64,
    tasks: Vec<TaskSpec>,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

fn directory(model: &MultiTaskModel) -> Vec<TensorRef<'_>> {
    let mut out = model.encoder().params().tensors();
    for h in model.heads() {
        out.extend(h.head.tensors().into_iter().map(|mut t| {
            t.name = format!("heads.{}.{}", h.spec.name, t.name);
            t
        }));
    }
    out
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &MultiTaskModel, vocab: &Vocabulary) -> Result<()> {
    if vocab.size() != model.encoder().config().vocab_size {
        return Err(ckpt_err(format!(
            "vocabulary has {} tokens but the encoder expects {}",
            vocab.size(),
            model.encoder().config().vocab_size
        )));
    }
    let tensors = directory(model);
    let header = Header {
        encoder: model.encoder().config().clone(),
        head_dropout: model.head_dropout(),
        tasks: model.tasks().cloned().collect(),
        vocab: vocab.tokens().to_vec(),
        tensors: tensors.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.dims() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for t in &tensors {
        for x in t.data {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(MultiTaskModel, Vocabulary)> {
    let io = |e| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ckpt_err("file too short for a checkpoint"))?;
    if &magic != MAGIC {
        return Err(ckpt_err("not a checkpoint (bad magic bytes)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(ckpt_err(format!("unsupported format version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let len = usize::try_from(u64::from_le_bytes(b8)).map_err(|_| ckpt_err("header too large"))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| ckpt_err("truncated header"))?;
    let header: Header = serde_json::from_slice(&json)?;

    header.encoder.validate()?;
    let vocab = Vocabulary::from_tokens(header.vocab.iter().skip(3))?;
    if vocab.tokens() != header.vocab.as_slice() {
        return Err(ckpt_err("vocabulary does not start with the reserved tokens"));
    }
    if vocab.size() != header.encoder.vocab_size {
        return Err(ckpt_err("vocabulary size disagrees with the encoder config"));
    }
    let d = header.encoder.embed_dim;
    let encoder = TransformerEncoder::from_params(header.encoder.clone(), EncoderParams::zeros(&header.encoder))?;
    let mut model = MultiTaskModel::new(encoder).with_head_dropout(header.head_dropout)?;
    for spec in &header.tasks {
        let classes = spec.num_classes();
        model.insert_head(spec.clone(), HeadParams::init(d, d, classes, 0))?;
    }

    let expected: Vec<TensorEntry> =
        directory(&model).iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.dims() }).collect();
    if expected.len() != header.tensors.len() {
        return Err(ckpt_err(format!("expected {} tensors, found {}", expected.len(), header.tensors.len())));
    }
    if let Some((e, f)) = expected.iter().zip(&header.tensors).find(|(e, f)| e != f) {
        return Err(ckpt_err(format!(
            "schema mismatch: expected `{}` {:?}, found `{}` {:?}",
            e.name, e.shape, f.name, f.shape
        )));
    }

    let mut fill = |dst: &mut [f64]| -> Result<()> {
        for x in dst.iter_mut() {
            r.read_exact(&mut b8).map_err(|_| ckpt_err("truncated tensor data"))?;
            *x = f64::from_le_bytes(b8);
        }
        Ok(())
    };
    for t in model.encoder_mut().params_mut().tensors_mut() {
        fill(t)?;
    }
    for name in model.task_names() {
        for t in model.head_mut(&name)?.tensors_mut() {
            fill(t)?;
        }
    }
    if r.read(&mut b8).map_err(io)? != 0 {
        return Err(ckpt_err("trailing bytes after tensor data"));
    }
    Ok((model, vocab))
}

pub fn save_checkpoint(path: &Path, model: &MultiTaskModel, vocab: &Vocabulary) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), model, vocab)
}

pub fn load_checkpoint(path: &Path) -> Result<(MultiTaskModel, Vocabulary)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
