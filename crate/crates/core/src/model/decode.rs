//! Greedy and nucleus (top-p) decoding.

use rand::Rng as _;

use super::tape::Tape;
use super::tensor::Tensor;
use super::{Mode, ModelError, Seq2Seq};
use crate::corpus::{BOS_ID, EOS_ID};
use crate::seed::Rng;

/// A model that yields next-token distributions for a decoded prefix.
pub trait StepModel {
    /// Whatever is computed once per input (encoder states).
    type Context;

    fn prepare(&self, x: &[u32]) -> Result<Self::Context, ModelError>;

    /// Distribution over the vocabulary for the token after `prefix`
    /// (`prefix` excludes `<s>`).
    fn next_distribution(
        &self,
        ctx: &Self::Context,
        prefix: &[u32],
    ) -> Result<Vec<f64>, ModelError>;
}

impl StepModel for Seq2Seq {
    type Context = Tensor;

    fn prepare(&self, x: &[u32]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new(&self.params);
        let memory = self.encode(&mut tape, x, &mut Mode::Eval)?;
        Ok(tape.value(memory).clone())
    }

    fn next_distribution(&self, memory: &Tensor, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let mem = tape.constant(memory.clone());
        let mut decoder_in = Vec::with_capacity(prefix.len() + 1);
        decoder_in.push(BOS_ID);
        decoder_in.extend_from_slice(prefix);
        let nodes = self.decode(&mut tape, mem, &decoder_in, &mut Mode::Eval)?;
        let probs = tape.value(nodes.probs);
        Ok(probs.row(probs.rows - 1).to_vec())
    }
}

/// The smallest set of highest-probability tokens whose mass reaches
/// `top_p`, renormalized. Ties are broken by lower token id.
pub fn nucleus_filter(dist: &[f64], top_p: f64) -> Vec<(u32, f64)> {
    assert!(top_p > 0.0 && top_p <= 1.0, "top_p must be in (0, 1]");
    let mut order: Vec<u32> = (0..dist.len() as u32).collect();
    order.sort_by(|&a, &b| {
        dist[b as usize]
            .partial_cmp(&dist[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let total: f64 = dist.iter().sum();
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for id in order {
        let p = dist[id as usize];
        if p <= 0.0 {
            break;
        }
        kept.push((id, p));
        mass += p;
        // Relative slack so `top_p = 1` keeps exactly the non-zero support.
        if mass >= top_p * total * (1.0 - 1e-12) {
            break;
        }
    }
    for (_, p) in &mut kept {
        *p /= mass;
    }
    kept
}

fn sample_from(support: &[(u32, f64)], rng: &mut Rng) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, p) in support {
        acc += p;
        if u < acc {
            return id;
        }
    }
    support.last().map(|&(id, _)| id).unwrap_or(EOS_ID)
}

/// Samples a continuation of `prefix` with nucleus sampling until `</s>` or
/// `max_len` new tokens. The returned ids exclude the prefix and `</s>`.
pub fn nucleus_sample<M: StepModel>(
    model: &M,
    ctx: &M::Context,
    prefix: &[u32],
    top_p: f64,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<u32>, ModelError> {
    let mut seq = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let dist = model.next_distribution(ctx, &seq)?;
        let support = nucleus_filter(&dist, top_p);
        let tok = sample_from(&support, rng);
        if tok == EOS_ID {
            break;
        }
        seq.push(tok);
        out.push(tok);
    }
    Ok(out)
}

/// Argmax decoding from an empty prefix.
pub fn greedy_decode<M: StepModel>(
    model: &M,
    x: &[u32],
    max_len: usize,
) -> Result<Vec<u32>, ModelError> {
    let ctx = model.prepare(x)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let dist = model.next_distribution(&ctx, &out)?;
        let best = dist
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &p)| {
                if p > acc.1 {
                    (i, p)
                } else {
                    acc
                }
            })
            .0 as u32;
        if best == EOS_ID {
            break;
        }
        out.push(best);
    }
    Ok(out)
}
