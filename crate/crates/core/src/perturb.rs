//! Contradictory sentence sampling by entity replacement.
//!
//! A target entity is drawn from the reference (biased towards the end of
//! the sentence) and swapped for an alternative. Alternatives come either
//! from the same table column ([`KnowledgeSource`]) or from continuations
//! sampled from a trained generator ([`ModelSource`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{detokenize, linearize, split_words, TableExample, TokenSequence, Vocabulary};
use crate::entities::{table_entity_sets, EntityRecognizer, EntitySpan};
use crate::exec::Execution;
use crate::model::ModelError;
use crate::model::{nucleus_sample, StepModel};
use crate::seed::{self, Rng};

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("sentence has no entities")]
    NoEntities,
    #[error("entity `{0}` does not occur in any table column")]
    NotGrounded(String),
    #[error("replacement `{0}` equals the original entity")]
    SameEntity(String),
    #[error("span {start}..{end} is invalid for a sentence of {len} tokens")]
    InvalidSpan {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("top_p must be in (0, 1], got {0}")]
    InvalidTopP(f64),
    #[error("unknown {kind} `{value}`; expected one of {expected}")]
    UnknownName {
        kind: &'static str,
        value: String,
        expected: &'static str,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Knowledge,
    Model,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Knowledge => "knowledge",
            Method::Model => "model",
        })
    }
}

impl FromStr for Method {
    type Err = PerturbError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knowledge" => Ok(Method::Knowledge),
            "model" => Ok(Method::Model),
            _ => Err(PerturbError::UnknownName {
                kind: "method",
                value: s.into(),
                expected: "knowledge, model",
            }),
        }
    }
}

/// How many contradictory sentences to keep per example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePolicy {
    XSmall,
    Small,
    Medium,
    Large,
    Full,
}

impl SizePolicy {
    pub const ALL: [SizePolicy; 5] = [
        SizePolicy::XSmall,
        SizePolicy::Small,
        SizePolicy::Medium,
        SizePolicy::Large,
        SizePolicy::Full,
    ];

    /// `None` means unbounded.
    pub fn cap(self) -> Option<usize> {
        match self {
            SizePolicy::XSmall => Some(1),
            SizePolicy::Small => Some(3),
            SizePolicy::Medium => Some(5),
            SizePolicy::Large => Some(10),
            SizePolicy::Full => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizePolicy::XSmall => "xsmall",
            SizePolicy::Small => "small",
            SizePolicy::Medium => "medium",
            SizePolicy::Large => "large",
            SizePolicy::Full => "full",
        }
    }
}

impl fmt::Display for SizePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SizePolicy {
    type Err = PerturbError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SizePolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PerturbError::UnknownName {
                kind: "size policy",
                value: s.into(),
                expected: "xsmall, small, medium, large, full",
            })
    }
}

/// Per-token label scheme for a perturbed sentence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelConvention {
    /// 1 strictly before the replaced span, 0 from its start onward.
    #[default]
    Prefix,
    /// 0 on replaced tokens only.
    ReplacedOnly,
}

pub fn token_labels(len: usize, span: (usize, usize), convention: LabelConvention) -> Vec<u8> {
    (0..len)
        .map(|t| match convention {
            LabelConvention::Prefix => u8::from(t < span.0),
            LabelConvention::ReplacedOnly => u8::from(t < span.0 || t >= span.1),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PerturbedSentence {
    pub source_example_id: String,
    pub tokens: TokenSequence,
    /// Replacement tokens in the perturbed sentence.
    pub replaced_span: (usize, usize),
    /// The replaced entity's tokens in the source sentence.
    pub original_span: (usize, usize),
    pub original_entity: String,
    pub replacement_entity: String,
    pub method: Method,
    pub token_labels: Vec<u8>,
}

impl PerturbedSentence {
    pub fn validate(&self) -> Result<(), String> {
        let (s, e) = self.replaced_span;
        if s >= e || e > self.tokens.len() {
            return Err(format!("replaced span {s}..{e} out of range"));
        }
        if self.original_span.0 != s || self.original_span.0 >= self.original_span.1 {
            return Err("original span does not align with replaced span".into());
        }
        if self.original_entity == self.replacement_entity {
            return Err("replacement equals original".into());
        }
        if self.token_labels.len() != self.tokens.len() {
            return Err(format!(
                "{} labels for {} tokens",
                self.token_labels.len(),
                self.tokens.len()
            ));
        }
        if self.token_labels.iter().any(|&l| l > 1) {
            return Err("labels must be 0 or 1".into());
        }
        Ok(())
    }

    /// Puts `original` (the source entity tokens) back into the sentence.
    pub fn restore(&self, original: &TokenSequence) -> TokenSequence {
        let (s, e) = self.replaced_span;
        self.tokens
            .slice(0, s)
            .concat(original)
            .concat(&self.tokens.slice(e, self.tokens.len()))
    }

    pub fn text(&self) -> String {
        self.tokens.text()
    }
}

/// Draws a span with probability proportional to `start + 1`.
pub fn select_target_entity(
    spans: &[EntitySpan],
    rng: &mut Rng,
) -> Result<EntitySpan, PerturbError> {
    select_index(spans, rng).map(|i| spans[i].clone())
}

fn select_index(spans: &[EntitySpan], rng: &mut Rng) -> Result<usize, PerturbError> {
    if spans.is_empty() {
        return Err(PerturbError::NoEntities);
    }
    let dist = WeightedIndex::new(spans.iter().map(|s| s.start as f64 + 1.0))
        .expect("weights are positive");
    Ok(dist.sample(rng))
}

/// Same-column alternatives of `target` over every column that contains it.
pub fn knowledge_candidates(
    example: &TableExample,
    target: &EntitySpan,
) -> Result<BTreeSet<String>, PerturbError> {
    let sets = table_entity_sets(example);
    let cols = sets.columns_containing(&target.normalized);
    if cols.is_empty() {
        return Err(PerturbError::NotGrounded(target.normalized.clone()));
    }
    let mut out = BTreeSet::new();
    for c in cols {
        out.extend(sets.columns[&c].iter().cloned());
    }
    out.remove(&target.normalized);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSampling {
    pub top_p: f64,
    pub k_samples: usize,
    /// Upper bound on sampled continuation length.
    pub max_len: usize,
}

impl Default for ModelSampling {
    fn default() -> Self {
        Self {
            top_p: 0.9,
            k_samples: 10,
            max_len: 32,
        }
    }
}

impl ModelSampling {
    pub fn validate(&self) -> Result<(), PerturbError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(PerturbError::InvalidTopP(self.top_p));
        }
        Ok(())
    }
}

/// Alternatives found by sampling continuations of `Y[0:target.start]`.
///
/// For each draw, the first entity starting at or after the target position
/// is collected when its normalized form differs from the original.
#[allow(clippy::too_many_arguments)]
pub fn model_candidates<M: StepModel>(
    model: &M,
    ctx: &M::Context,
    y: &TokenSequence,
    target: &EntitySpan,
    example: &TableExample,
    recognizer: &dyn EntityRecognizer,
    vocab: &Vocabulary,
    sampling: &ModelSampling,
    rng: &mut Rng,
) -> Result<BTreeSet<String>, PerturbError> {
    sampling.validate()?;
    let prefix = &y.ids[..target.start];
    let mut out = BTreeSet::new();
    for _ in 0..sampling.k_samples {
        let cont = nucleus_sample(model, ctx, prefix, sampling.top_p, sampling.max_len, rng)?;
        let full = y.slice(0, target.start).concat(&vocab.decode(&cont));
        let found = recognizer
            .extract(&full, Some(example))
            .into_iter()
            .find(|s| s.start >= target.start);
        if let Some(span) = found {
            if span.normalized != target.normalized {
                out.insert(span.normalized);
            }
        }
    }
    Ok(out)
}

/// Substitutes `replacement` for the target span.
pub fn apply_replacement(
    y: &TokenSequence,
    target: &EntitySpan,
    replacement: &str,
    vocab: &Vocabulary,
    method: Method,
    convention: LabelConvention,
) -> Result<PerturbedSentence, PerturbError> {
    if target.start >= target.end || target.end > y.len() {
        return Err(PerturbError::InvalidSpan {
            start: target.start,
            end: target.end,
            len: y.len(),
        });
    }
    if replacement == target.normalized {
        return Err(PerturbError::SameEntity(replacement.into()));
    }
    let inserted = vocab.encode_surface(split_words(replacement));
    if inserted.is_empty() {
        return Err(PerturbError::InvalidSpan {
            start: target.start,
            end: target.start,
            len: y.len(),
        });
    }
    let tokens = y
        .slice(0, target.start)
        .concat(&inserted)
        .concat(&y.slice(target.end, y.len()));
    let replaced_span = (target.start, target.start + inserted.len());
    let token_labels = token_labels(tokens.len(), replaced_span, convention);
    Ok(PerturbedSentence {
        source_example_id: String::new(),
        tokens,
        replaced_span,
        original_span: (target.start, target.end),
        original_entity: target.normalized.clone(),
        replacement_entity: replacement.to_string(),
        method,
        token_labels,
    })
}

/// Where replacement candidates come from.
pub trait CandidateSource: Sync {
    fn method(&self) -> Method;

    /// Candidate sets for each span, in span order. A span whose candidates
    /// cannot be determined gets an empty set.
    fn candidates(
        &self,
        example: &TableExample,
        y: &TokenSequence,
        spans: &[EntitySpan],
        rng: &mut Rng,
    ) -> Result<Vec<BTreeSet<String>>, PerturbError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct KnowledgeSource;

impl CandidateSource for KnowledgeSource {
    fn method(&self) -> Method {
        Method::Knowledge
    }

    fn candidates(
        &self,
        example: &TableExample,
        _y: &TokenSequence,
        spans: &[EntitySpan],
        _rng: &mut Rng,
    ) -> Result<Vec<BTreeSet<String>>, PerturbError> {
        Ok(spans
            .iter()
            .map(|s| knowledge_candidates(example, s).unwrap_or_default())
            .collect())
    }
}

pub struct ModelSource<'a, M> {
    pub model: &'a M,
    pub vocab: &'a Vocabulary,
    pub recognizer: &'a dyn EntityRecognizer,
    pub sampling: ModelSampling,
}

impl<M: StepModel + Sync> CandidateSource for ModelSource<'_, M> {
    fn method(&self) -> Method {
        Method::Model
    }

    fn candidates(
        &self,
        example: &TableExample,
        y: &TokenSequence,
        spans: &[EntitySpan],
        rng: &mut Rng,
    ) -> Result<Vec<BTreeSet<String>>, PerturbError> {
        let x = linearize(example, self.vocab);
        let ctx = self.model.prepare(&x.ids)?;
        spans
            .iter()
            .map(|s| {
                model_candidates(
                    self.model,
                    &ctx,
                    y,
                    s,
                    example,
                    self.recognizer,
                    self.vocab,
                    &self.sampling,
                    rng,
                )
            })
            .collect()
    }
}

/// Why an example produced no perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    NoEntities,
    NoCandidates,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExamplePerturbations {
    pub example_id: String,
    pub sentences: Vec<PerturbedSentence>,
    pub diagnostic: Option<Diagnostic>,
}

/// Up to `policy.cap()` distinct contradictory sentences for one example.
///
/// Capped policies sample (target, candidate) pairs without replacement:
/// the target is redrawn for every output by [`select_target_entity`]
/// among spans with remaining candidates, then a candidate is drawn
/// uniformly. `Full` enumerates every pair in span order.
#[allow(clippy::too_many_arguments)]
pub fn generate_perturbations(
    example: &TableExample,
    y: &TokenSequence,
    source: &dyn CandidateSource,
    policy: SizePolicy,
    recognizer: &dyn EntityRecognizer,
    vocab: &Vocabulary,
    convention: LabelConvention,
    rng: &mut Rng,
) -> Result<ExamplePerturbations, PerturbError> {
    let mut result = ExamplePerturbations {
        example_id: example.table_id.clone(),
        sentences: Vec::new(),
        diagnostic: None,
    };
    let spans = recognizer.extract(y, Some(example));
    if spans.is_empty() {
        result.diagnostic = Some(Diagnostic::NoEntities);
        return Ok(result);
    }
    let mut pools: Vec<Vec<String>> = source
        .candidates(example, y, &spans, rng)?
        .into_iter()
        .map(|set| set.into_iter().collect())
        .collect();

    let mut seen = BTreeSet::new();
    let mut push = |span: &EntitySpan,
                    cand: &str,
                    out: &mut Vec<PerturbedSentence>|
     -> Result<(), PerturbError> {
        let mut p = apply_replacement(y, span, cand, vocab, source.method(), convention)?;
        if seen.insert(p.tokens.surface.clone()) {
            p.source_example_id = example.table_id.clone();
            out.push(p);
        }
        Ok(())
    };

    match policy.cap() {
        None => {
            for (span, pool) in spans.iter().zip(&pools) {
                for cand in pool {
                    push(span, cand, &mut result.sentences)?;
                }
            }
        }
        Some(cap) => {
            while result.sentences.len() < cap {
                let live: Vec<usize> = (0..spans.len()).filter(|&i| !pools[i].is_empty()).collect();
                if live.is_empty() {
                    break;
                }
                let live_spans: Vec<EntitySpan> = live.iter().map(|&i| spans[i].clone()).collect();
                let i = live[select_index(&live_spans, rng)?];
                let j = rng.gen_range(0..pools[i].len());
                let cand = pools[i].remove(j);
                push(&spans[i], &cand, &mut result.sentences)?;
            }
        }
    }
    if result.sentences.is_empty() {
        result.diagnostic = Some(Diagnostic::NoCandidates);
    }
    Ok(result)
}

/// Runs [`generate_perturbations`] over a corpus with a per-example seed
/// derived from `(seed, table_id)`, so results do not depend on `exec`.
#[allow(clippy::too_many_arguments)]
pub fn perturb_corpus(
    examples: &[TableExample],
    source: &dyn CandidateSource,
    policy: SizePolicy,
    recognizer: &dyn EntityRecognizer,
    vocab: &Vocabulary,
    convention: LabelConvention,
    seed: u64,
    exec: Execution,
) -> Result<Vec<ExamplePerturbations>, PerturbError> {
    exec.map(examples, |ex| {
        let y = crate::corpus::tokenize(&ex.reference, vocab);
        let mut rng = seed::rng_for(seed, &["perturb", &ex.table_id]);
        generate_perturbations(
            ex, &y, source, policy, recognizer, vocab, convention, &mut rng,
        )
    })
    .into_iter()
    .collect()
}

/// On-disk form of a [`PerturbedSentence`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationRecord {
    pub source_id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub replaced_span: (usize, usize),
    pub original_span: (usize, usize),
    pub original_entity: String,
    pub replacement_entity: String,
    pub method: Method,
    /// Run-length encoded token labels as `(label, count)` pairs.
    pub labels_rle: Vec<(u8, usize)>,
}

pub fn rle_encode(labels: &[u8]) -> Vec<(u8, usize)> {
    let mut out: Vec<(u8, usize)> = Vec::new();
    for &l in labels {
        match out.last_mut() {
            Some((v, n)) if *v == l => *n += 1,
            _ => out.push((l, 1)),
        }
    }
    out
}

pub fn rle_decode(runs: &[(u8, usize)]) -> Vec<u8> {
    runs.iter()
        .flat_map(|&(l, n)| std::iter::repeat_n(l, n))
        .collect()
}

impl PerturbationRecord {
    pub fn from_sentence(p: &PerturbedSentence) -> Self {
        Self {
            source_id: p.source_example_id.clone(),
            text: detokenize(&p.tokens.surface),
            tokens: p.tokens.surface.clone(),
            replaced_span: p.replaced_span,
            original_span: p.original_span,
            original_entity: p.original_entity.clone(),
            replacement_entity: p.replacement_entity.clone(),
            method: p.method,
            labels_rle: rle_encode(&p.token_labels),
        }
    }

    pub fn into_sentence(self, vocab: &Vocabulary) -> Result<PerturbedSentence, String> {
        let p = PerturbedSentence {
            source_example_id: self.source_id,
            tokens: vocab.encode_surface(self.tokens),
            replaced_span: self.replaced_span,
            original_span: self.original_span,
            original_entity: self.original_entity,
            replacement_entity: self.replacement_entity,
            method: self.method,
            token_labels: rle_decode(&self.labels_rle),
        };
        p.validate()?;
        Ok(p)
    }
}

pub fn write_perturbations<W: Write>(
    mut w: W,
    sentences: &[PerturbedSentence],
) -> Result<(), PerturbError> {
    for p in sentences {
        let line = serde_json::to_string(&PerturbationRecord::from_sentence(p)).map_err(|e| {
            PerturbError::Parse {
                line: 0,
                message: e.to_string(),
            }
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_perturbations(
    path: impl AsRef<Path>,
    sentences: &[PerturbedSentence],
) -> Result<(), PerturbError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_perturbations(&mut w, sentences)?;
    w.flush()?;
    Ok(())
}

pub fn read_perturbations<R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
) -> Result<Vec<PerturbedSentence>, PerturbError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| PerturbError::Parse {
            line: i + 1,
            message,
        };
        let rec: PerturbationRecord =
            serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        out.push(rec.into_sentence(vocab).map_err(parse)?);
    }
    Ok(out)
}

pub fn load_perturbations(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
) -> Result<Vec<PerturbedSentence>, PerturbError> {
    read_perturbations(BufReader::new(File::open(path)?), vocab)
}

/// Groups sentences by source example id.
pub fn group_by_source(
    sentences: Vec<PerturbedSentence>,
) -> BTreeMap<String, Vec<PerturbedSentence>> {
    let mut map: BTreeMap<String, Vec<PerturbedSentence>> = BTreeMap::new();
    for p in sentences {
        map.entry(p.source_example_id.clone()).or_default().push(p);
    }
    map
}
