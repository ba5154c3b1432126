//! A small pre-LN transformer encoder-decoder with sentence- and token-level
//! discrimination heads.
//!
//! Encoder inputs get token, position and table-structure embeddings (row
//! and cell ordinals derived from the `<row>`/`<cell>` markers of the
//! linearization). The decoder is teacher-forced on `<s> y_1 … y_n` and
//! predicts `y_1 … y_n </s>`, so a trace over a sentence of `n` tokens has
//! `n + 1` steps. Step `t` has seen `y_1 … y_t`; the last step has seen the
//! whole sentence and is where the sentence head reads.
//!
//! Output logits reuse the token embedding matrix.

mod checkpoint;
mod decode;
pub mod tape;
pub mod tensor;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenSequence, BOS_ID, CELL_ID, EOS_ID, META_ID, QUERY_ID, ROW_ID};
use crate::seed::{self, Rng};
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{greedy_decode, nucleus_filter, nucleus_sample, StepModel};
use tape::{NodeId, ParamStore, Tape};
use tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{which} sequence length {len} exceeds maximum {max}")]
    SequenceTooLong {
        which: &'static str,
        len: usize,
        max: usize,
    },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("{0} head is disabled")]
    HeadDisabled(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub max_rows: usize,
    pub max_cells: usize,
    pub dropout: f64,
    pub seed: u64,
    pub sentence_head: bool,
    pub token_head: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            encoder_layers: 2,
            decoder_layers: 2,
            max_input_len: 256,
            max_output_len: 64,
            max_rows: 32,
            max_cells: 16,
            dropout: 0.1,
            seed: 0,
            sentence_head: false,
            token_head: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("decoder_layers", self.decoder_layers),
            ("max_input_len", self.max_input_len),
            ("max_output_len", self.max_output_len),
            ("max_rows", self.max_rows),
            ("max_cells", self.max_cells),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Whether two configs describe the same parameter layout.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<(), ModelError> {
        let pairs = [
            ("vocab_size", self.vocab_size, other.vocab_size),
            ("d_model", self.d_model, other.d_model),
            ("n_heads", self.n_heads, other.n_heads),
            ("d_ff", self.d_ff, other.d_ff),
            ("encoder_layers", self.encoder_layers, other.encoder_layers),
            ("decoder_layers", self.decoder_layers, other.decoder_layers),
            ("max_input_len", self.max_input_len, other.max_input_len),
            ("max_output_len", self.max_output_len, other.max_output_len),
            ("max_rows", self.max_rows, other.max_rows),
            ("max_cells", self.max_cells, other.max_cells),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(ModelError::ConfigMismatch(format!("{name}: {a} vs {b}")));
            }
        }
        Ok(())
    }
}

/// Teacher-forced decoding record: one entry per target step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub distributions: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub targets: Vec<u32>,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// `p(y_t | y_<t, X)` for each target token.
    pub fn gold_probs(&self) -> Vec<f64> {
        self.distributions
            .iter()
            .zip(&self.targets)
            .map(|(d, &t)| d[t as usize])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutput {
    pub sentence_prob: Option<f64>,
    pub token_probs: Vec<f64>,
}

/// Dropout switch for a forward pass.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Mode<'_> {
    fn dropout(&mut self, tape: &mut Tape, x: NodeId, rate: f64) -> NodeId {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let n = tape.value(x).len();
                let keep = 1.0 / (1.0 - rate);
                let mask = (0..n)
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                tape.mask(x, mask)
            }
            _ => x,
        }
    }
}

/// Nodes produced by a decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct DecoderNodes {
    /// `T × d` final-layer hidden states.
    pub hidden: NodeId,
    /// `T × V` next-token distributions.
    pub probs: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: ParamStore,
}

// Parameter names of the discrimination heads.
pub const SENTENCE_HEAD_PARAMS: [&str; 2] = ["head.sentence.w", "head.sentence.b"];
pub const TOKEN_HEAD_PARAMS: [&str; 2] = ["head.token.w", "head.token.b"];

fn init(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect(),
    )
}

impl Seq2Seq {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng_for(config.seed, &["model-init"]);
        let d = config.d_model;
        let f = config.d_ff;
        let emb_std = 0.02;
        let lin_std = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        let n_res = (2 * (config.encoder_layers + config.decoder_layers)) as f64;
        let res_std = lin_std(d, d) / n_res.sqrt();
        let mut p = ParamStore::new();
        p.insert("embed.token", init(&mut rng, config.vocab_size, d, emb_std));
        p.insert(
            "embed.enc_pos",
            init(&mut rng, config.max_input_len, d, emb_std),
        );
        p.insert(
            "embed.dec_pos",
            init(&mut rng, config.max_output_len + 1, d, emb_std),
        );
        p.insert("embed.row", init(&mut rng, config.max_rows, d, emb_std));
        p.insert("embed.cell", init(&mut rng, config.max_cells, d, emb_std));

        let ln = |p: &mut ParamStore, name: &str| {
            p.insert(format!("{name}.g"), Tensor::filled(1, d, 1.0));
            p.insert(format!("{name}.b"), Tensor::zeros(1, d));
        };
        let attn = |p: &mut ParamStore, rng: &mut Rng, name: &str| {
            for w in ["wq", "wk", "wv"] {
                p.insert(format!("{name}.{w}"), init(rng, d, d, lin_std(d, d)));
            }
            p.insert(format!("{name}.wo"), init(rng, d, d, res_std));
        };
        let ffn = |p: &mut ParamStore, rng: &mut Rng, name: &str| {
            p.insert(format!("{name}.w1"), init(rng, d, f, lin_std(d, f)));
            p.insert(format!("{name}.b1"), Tensor::zeros(1, f));
            p.insert(format!("{name}.w2"), init(rng, f, d, res_std));
            p.insert(format!("{name}.b2"), Tensor::zeros(1, d));
        };
        for l in 0..config.encoder_layers {
            ln(&mut p, &format!("enc.{l}.ln1"));
            attn(&mut p, &mut rng, &format!("enc.{l}.self"));
            ln(&mut p, &format!("enc.{l}.ln2"));
            ffn(&mut p, &mut rng, &format!("enc.{l}.ffn"));
        }
        ln(&mut p, "enc.ln_f");
        for l in 0..config.decoder_layers {
            ln(&mut p, &format!("dec.{l}.ln1"));
            attn(&mut p, &mut rng, &format!("dec.{l}.self"));
            ln(&mut p, &format!("dec.{l}.ln2"));
            attn(&mut p, &mut rng, &format!("dec.{l}.cross"));
            ln(&mut p, &format!("dec.{l}.ln3"));
            ffn(&mut p, &mut rng, &format!("dec.{l}.ffn"));
        }
        ln(&mut p, "dec.ln_f");
        p.insert("out.bias", Tensor::zeros(1, config.vocab_size));
        p.insert(SENTENCE_HEAD_PARAMS[0], Tensor::zeros(d, 1));
        p.insert(SENTENCE_HEAD_PARAMS[1], Tensor::zeros(1, 1));
        p.insert(TOKEN_HEAD_PARAMS[0], Tensor::zeros(d, 1));
        p.insert(TOKEN_HEAD_PARAMS[1], Tensor::zeros(1, 1));
        let mut model = Self { config, params: p };
        model.reinit_heads(seed::derive_seed(model.config.seed, &["heads"]));
        Ok(model)
    }

    /// Draws fresh random head parameters (biases zero).
    pub fn reinit_heads(&mut self, seed: u64) {
        let mut rng = seed::rng_for(seed, &["head-init"]);
        let d = self.config.d_model;
        let std = (1.0 / d as f64).sqrt();
        for names in [SENTENCE_HEAD_PARAMS, TOKEN_HEAD_PARAMS] {
            let w = self.params.id(names[0]).unwrap();
            *self.params.get_mut(w) = init(&mut rng, d, 1, std);
            let b = self.params.id(names[1]).unwrap();
            *self.params.get_mut(b) = Tensor::zeros(1, 1);
        }
    }

    pub fn set_heads(&mut self, sentence: bool, token: bool) {
        self.config.sentence_head = sentence;
        self.config.token_head = token;
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[u32]) -> Result<(), ModelError> {
        if x.len() > self.config.max_input_len {
            return Err(ModelError::SequenceTooLong {
                which: "input",
                len: x.len(),
                max: self.config.max_input_len,
            });
        }
        self.check_ids(x)
    }

    fn check_output(&self, decoder_len: usize) -> Result<(), ModelError> {
        if decoder_len > self.config.max_output_len + 1 {
            return Err(ModelError::SequenceTooLong {
                which: "output",
                len: decoder_len - 1,
                max: self.config.max_output_len,
            });
        }
        Ok(())
    }

    /// Row and cell ordinals for each input position, from the markers.
    pub fn structure_ids(&self, x: &[u32]) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::with_capacity(x.len());
        let mut cells = Vec::with_capacity(x.len());
        let (mut row, mut cell) = (0usize, 0usize);
        for &id in x {
            match id {
                ROW_ID => {
                    row += 1;
                    cell = 0;
                }
                CELL_ID => cell += 1,
                QUERY_ID | META_ID => {
                    row = 0;
                    cell = 0;
                }
                _ => {}
            }
            rows.push(row.min(self.config.max_rows - 1));
            cells.push(cell.min(self.config.max_cells - 1));
        }
        (rows, cells)
    }

    fn block_attention(
        &self,
        tape: &mut Tape,
        name: &str,
        query_in: NodeId,
        memory: NodeId,
        causal: bool,
    ) -> NodeId {
        let wq = tape.param_by_name(&format!("{name}.wq"));
        let wk = tape.param_by_name(&format!("{name}.wk"));
        let wv = tape.param_by_name(&format!("{name}.wv"));
        let wo = tape.param_by_name(&format!("{name}.wo"));
        let q = tape.matmul(query_in, wq);
        let k = tape.matmul(memory, wk);
        let v = tape.matmul(memory, wv);
        let a = tape.attention(q, k, v, self.config.n_heads, causal);
        tape.matmul(a, wo)
    }

    fn block_ffn(&self, tape: &mut Tape, name: &str, x: NodeId) -> NodeId {
        let w1 = tape.param_by_name(&format!("{name}.w1"));
        let b1 = tape.param_by_name(&format!("{name}.b1"));
        let w2 = tape.param_by_name(&format!("{name}.w2"));
        let b2 = tape.param_by_name(&format!("{name}.b2"));
        let h = tape.linear(x, w1, Some(b1));
        let h = tape.gelu(h);
        tape.linear(h, w2, Some(b2))
    }

    fn norm(&self, tape: &mut Tape, name: &str, x: NodeId) -> NodeId {
        let g = tape.param_by_name(&format!("{name}.g"));
        let b = tape.param_by_name(&format!("{name}.b"));
        tape.layer_norm(x, g, b)
    }

    /// Encoder states (`M × d`) for input ids.
    pub fn encode(
        &self,
        tape: &mut Tape,
        x: &[u32],
        mode: &mut Mode,
    ) -> Result<NodeId, ModelError> {
        self.check_input(x)?;
        let rate = self.config.dropout;
        let ids: Vec<usize> = x.iter().map(|&i| i as usize).collect();
        let (rows, cells) = self.structure_ids(x);
        let positions: Vec<usize> = (0..x.len()).collect();
        let tok = tape.param_by_name("embed.token");
        let pos = tape.param_by_name("embed.enc_pos");
        let row = tape.param_by_name("embed.row");
        let cell = tape.param_by_name("embed.cell");
        let e_tok = tape.gather(tok, &ids);
        let e_pos = tape.gather(pos, &positions);
        let e_row = tape.gather(row, &rows);
        let e_cell = tape.gather(cell, &cells);
        let mut h = tape.add(e_tok, e_pos);
        h = tape.add(h, e_row);
        h = tape.add(h, e_cell);
        h = mode.dropout(tape, h, rate);
        for l in 0..self.config.encoder_layers {
            let n = self.norm(tape, &format!("enc.{l}.ln1"), h);
            let a = self.block_attention(tape, &format!("enc.{l}.self"), n, n, false);
            let a = mode.dropout(tape, a, rate);
            h = tape.add(h, a);
            let n = self.norm(tape, &format!("enc.{l}.ln2"), h);
            let f = self.block_ffn(tape, &format!("enc.{l}.ffn"), n);
            let f = mode.dropout(tape, f, rate);
            h = tape.add(h, f);
        }
        Ok(self.norm(tape, "enc.ln_f", h))
    }

    /// Decoder pass over `decoder_in` (starting with `<s>`), attending to
    /// `memory` from [`Seq2Seq::encode`].
    pub fn decode(
        &self,
        tape: &mut Tape,
        memory: NodeId,
        decoder_in: &[u32],
        mode: &mut Mode,
    ) -> Result<DecoderNodes, ModelError> {
        self.check_output(decoder_in.len())?;
        self.check_ids(decoder_in)?;
        let rate = self.config.dropout;
        let ids: Vec<usize> = decoder_in.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.param_by_name("embed.token");
        let pos = tape.param_by_name("embed.dec_pos");
        let e_tok = tape.gather(tok, &ids);
        let e_pos = tape.gather(pos, &positions);
        let mut h = tape.add(e_tok, e_pos);
        h = mode.dropout(tape, h, rate);
        for l in 0..self.config.decoder_layers {
            let n = self.norm(tape, &format!("dec.{l}.ln1"), h);
            let a = self.block_attention(tape, &format!("dec.{l}.self"), n, n, true);
            let a = mode.dropout(tape, a, rate);
            h = tape.add(h, a);
            let n = self.norm(tape, &format!("dec.{l}.ln2"), h);
            let c = self.block_attention(tape, &format!("dec.{l}.cross"), n, memory, false);
            let c = mode.dropout(tape, c, rate);
            h = tape.add(h, c);
            let n = self.norm(tape, &format!("dec.{l}.ln3"), h);
            let f = self.block_ffn(tape, &format!("dec.{l}.ffn"), n);
            let f = mode.dropout(tape, f, rate);
            h = tape.add(h, f);
        }
        let hidden = self.norm(tape, "dec.ln_f", h);
        let bias = tape.param_by_name("out.bias");
        let logits = tape.matmul_t(hidden, tok);
        let logits = tape.add_row(logits, bias);
        let probs = tape.softmax(logits);
        Ok(DecoderNodes { hidden, probs })
    }

    /// Sentence-head probability of "entailed", read at `step`.
    pub fn sentence_head_node(
        &self,
        tape: &mut Tape,
        hidden: NodeId,
        step: usize,
    ) -> Result<NodeId, ModelError> {
        if !self.config.sentence_head {
            return Err(ModelError::HeadDisabled("sentence"));
        }
        let h = tape.select_rows(hidden, &[step]);
        let w = tape.param_by_name(SENTENCE_HEAD_PARAMS[0]);
        let b = tape.param_by_name(SENTENCE_HEAD_PARAMS[1]);
        let z = tape.linear(h, w, Some(b));
        Ok(tape.sigmoid(z))
    }

    /// Per-step probability that the prefix seen so far is faithful (`T × 1`).
    pub fn token_head_node(&self, tape: &mut Tape, hidden: NodeId) -> Result<NodeId, ModelError> {
        if !self.config.token_head {
            return Err(ModelError::HeadDisabled("token"));
        }
        let w = tape.param_by_name(TOKEN_HEAD_PARAMS[0]);
        let b = tape.param_by_name(TOKEN_HEAD_PARAMS[1]);
        let z = tape.linear(hidden, w, Some(b));
        Ok(tape.sigmoid(z))
    }

    /// Teacher-forced evaluation pass over `y` (without markers; `<s>` and
    /// `</s>` are added here).
    pub fn forward_teacher_forced(
        &self,
        x: &TokenSequence,
        y: &TokenSequence,
    ) -> Result<DecodeTrace, ModelError> {
        self.check_ids(&y.ids)?;
        let mut tape = Tape::new(&self.params);
        let memory = self.encode(&mut tape, &x.ids, &mut Mode::Eval)?;
        let (decoder_in, targets) = teacher_forcing_pair(&y.ids);
        let nodes = self.decode(&mut tape, memory, &decoder_in, &mut Mode::Eval)?;
        Ok(DecodeTrace {
            distributions: tape.value(nodes.probs).to_rows(),
            hidden: tape.value(nodes.hidden).to_rows(),
            targets,
        })
    }

    pub fn sentence_discriminate(&self, trace: &DecodeTrace) -> Result<f64, ModelError> {
        if !self.config.sentence_head {
            return Err(ModelError::HeadDisabled("sentence"));
        }
        let last = trace
            .hidden
            .last()
            .ok_or_else(|| ModelError::InvalidConfig("empty trace".into()))?;
        let w = self.params.by_name(SENTENCE_HEAD_PARAMS[0]).unwrap();
        let b = self.params.by_name(SENTENCE_HEAD_PARAMS[1]).unwrap();
        Ok(tape::sigmoid(tensor::dot(last, &w.data) + b.data[0]))
    }

    pub fn token_discriminate(&self, trace: &DecodeTrace) -> Result<Vec<f64>, ModelError> {
        if !self.config.token_head {
            return Err(ModelError::HeadDisabled("token"));
        }
        let w = self.params.by_name(TOKEN_HEAD_PARAMS[0]).unwrap();
        let b = self.params.by_name(TOKEN_HEAD_PARAMS[1]).unwrap();
        Ok(trace
            .hidden
            .iter()
            .map(|h| tape::sigmoid(tensor::dot(h, &w.data) + b.data[0]))
            .collect())
    }

    pub fn discriminate(&self, trace: &DecodeTrace) -> Result<DiscriminatorOutput, ModelError> {
        let sentence_prob = if self.config.sentence_head {
            Some(self.sentence_discriminate(trace)?)
        } else {
            None
        };
        let token_probs = if self.config.token_head {
            self.token_discriminate(trace)?
        } else {
            Vec::new()
        };
        Ok(DiscriminatorOutput {
            sentence_prob,
            token_probs,
        })
    }
}

/// Decoder input `<s> y` and targets `y </s>`.
pub fn teacher_forcing_pair(y: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut decoder_in = Vec::with_capacity(y.len() + 1);
    decoder_in.push(BOS_ID);
    decoder_in.extend_from_slice(y);
    let mut targets = y.to_vec();
    targets.push(EOS_ID);
    (decoder_in, targets)
}
