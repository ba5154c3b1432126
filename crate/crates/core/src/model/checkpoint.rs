//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "R2D2CKPT"
//! version    u32       currently 1
//! header_len u32
//! header     JSON      {"config": ModelConfig, "vocab": [token, ...] | null}
//! n_blocks   u32
//! n_blocks × { name_len u32, name utf-8, rows u32, cols u32, rows*cols f64 }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::{ModelConfig, ModelError, Seq2Seq};
use crate::corpus::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"R2D2CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Option<Vec<String>>,
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint("value exceeds u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

impl Seq2Seq {
    pub fn write_checkpoint<W: Write>(
        &self,
        w: &mut W,
        vocab: Option<&Vocabulary>,
    ) -> Result<(), ModelError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = Header {
            config: self.config.clone(),
            vocab: vocab.map(|v| v.tokens().to_vec()),
        };
        let json =
            serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        write_u32(w, json.len())?;
        w.write_all(&json)?;
        write_u32(w, self.params.len())?;
        for (name, t) in self.params.iter() {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.rows)?;
            write_u32(w, t.cols)?;
            for x in &t.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_checkpoint(
        &self,
        path: impl AsRef<Path>,
        vocab: Option<&Vocabulary>,
    ) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w, vocab)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Self, Option<Vocabulary>), ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(r)? as u32;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = read_u32(r)?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let vocab = header
            .vocab
            .map(Vocabulary::from_tokens)
            .transpose()
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if let Some(v) = &vocab {
            if v.len() != header.config.vocab_size {
                return Err(ModelError::ConfigMismatch(format!(
                    "vocabulary has {} tokens but config says {}",
                    v.len(),
                    header.config.vocab_size
                )));
            }
        }
        let mut model = Seq2Seq::new(header.config)?;
        let n = read_u32(r)?;
        if n != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter blocks, found {n}",
                model.params.len()
            )));
        }
        for _ in 0..n {
            let name_len = read_u32(r)?;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            let rows = read_u32(r)?;
            let cols = read_u32(r)?;
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if model.params.get(id).shape() != (rows, cols) {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{name}` has shape {rows}x{cols}, expected {:?}",
                    model.params.get(id).shape()
                )));
            }
            let mut bytes = vec![0u8; rows * cols * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *model.params.get_mut(id) = Tensor::from_vec(rows, cols, data);
        }
        Ok((model, vocab))
    }

    pub fn load_checkpoint(
        path: impl AsRef<Path>,
    ) -> Result<(Self, Option<Vocabulary>), ModelError> {
        Self::read_checkpoint(&mut BufReader::new(File::open(path)?))
    }

    /// Loads a checkpoint and checks it matches `expected`'s layout.
    pub fn load_compatible(
        path: impl AsRef<Path>,
        expected: &ModelConfig,
    ) -> Result<(Self, Option<Vocabulary>), ModelError> {
        let (m, v) = Self::load_checkpoint(path)?;
        expected.check_compatible(&m.config)?;
        Ok((m, v))
    }

    /// Loads generator parameters from a (warmup) checkpoint and draws fresh
    /// discrimination heads.
    pub fn load_with_fresh_heads(
        path: impl AsRef<Path>,
        head_seed: u64,
        sentence_head: bool,
        token_head: bool,
    ) -> Result<(Self, Option<Vocabulary>), ModelError> {
        let (mut m, v) = Self::load_checkpoint(path)?;
        m.reinit_heads(head_seed);
        m.set_heads(sentence_head, token_head);
        Ok((m, v))
    }
}
