//! Metric reliability under controlled reference contamination.
//!
//! Each reference is paired with one unfaithful parallel. Variant `p`
//! replaces `floor(p * n / 100)` references with their parallels; the
//! replaced sets are nested across percentages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TableExample;
use crate::entities::EntityRecognizer;
use crate::eval::{
    corpus_bleu, corpus_ner_metrics, external_score, spearman, Averaging, EvalError, ScorerRegistry,
};
use crate::exec::Execution;
use crate::perturb::PerturbedSentence;
use crate::seed;

#[derive(Debug, Error)]
pub enum ContaminationError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("{0} references but {1} parallels")]
    LengthMismatch(usize, usize),
    #[error("no reference has a parallel")]
    NothingToContaminate,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContaminationPlan {
    pub percentages: Vec<f64>,
    pub seed: u64,
}

impl Default for ContaminationPlan {
    fn default() -> Self {
        Self {
            percentages: vec![0.0, 25.0, 50.0, 75.0, 100.0],
            seed: 0,
        }
    }
}

impl ContaminationPlan {
    pub fn validate(&self) -> Result<(), ContaminationError> {
        if self.percentages.is_empty() {
            return Err(ContaminationError::InvalidPlan("no percentages".into()));
        }
        if self.percentages.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(ContaminationError::InvalidPlan(
                "percentages must lie in [0, 100]".into(),
            ));
        }
        if self.percentages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ContaminationError::InvalidPlan(
                "percentages must be strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

/// The perturbation whose replaced span starts latest; first on ties.
pub fn choose_parallel(candidates: &[PerturbedSentence]) -> Option<&PerturbedSentence> {
    candidates
        .iter()
        .enumerate()
        .max_by_key(|(i, p)| (p.replaced_span.0, std::cmp::Reverse(*i)))
        .map(|(_, p)| p)
}

/// One parallel text per example (or `None`), in example order.
pub fn pair_parallels(
    examples: &[TableExample],
    perturbations: &BTreeMap<String, Vec<PerturbedSentence>>,
) -> Vec<Option<String>> {
    examples
        .iter()
        .map(|ex| {
            perturbations
                .get(&ex.table_id)
                .and_then(|ps| choose_parallel(ps))
                .map(PerturbedSentence::text)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub percentage: f64,
    pub sentences: Vec<String>,
    /// Positions (within the kept references) that were replaced.
    pub replaced: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variants {
    /// Indices into the original reference list that have a parallel.
    pub kept: Vec<usize>,
    pub excluded: usize,
    pub variants: Vec<Variant>,
}

pub fn build_variants(
    references: &[String],
    parallels: &[Option<String>],
    plan: &ContaminationPlan,
) -> Result<Variants, ContaminationError> {
    plan.validate()?;
    if references.len() != parallels.len() {
        return Err(ContaminationError::LengthMismatch(
            references.len(),
            parallels.len(),
        ));
    }
    let kept: Vec<usize> = (0..references.len())
        .filter(|&i| parallels[i].is_some())
        .collect();
    if kept.is_empty() {
        return Err(ContaminationError::NothingToContaminate);
    }
    let n = kept.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(plan.seed, &["contaminate"]));
    let variants = plan
        .percentages
        .iter()
        .map(|&p| {
            let k = (p * n as f64 / 100.0).floor() as usize;
            let replaced: BTreeSet<usize> = order[..k].iter().copied().collect();
            let sentences = kept
                .iter()
                .enumerate()
                .map(|(pos, &i)| {
                    if replaced.contains(&pos) {
                        parallels[i].clone().expect("kept entries have parallels")
                    } else {
                        references[i].clone()
                    }
                })
                .collect();
            Variant {
                percentage: p,
                sentences,
                replaced,
            }
        })
        .collect();
    Ok(Variants {
        kept,
        excluded: references.len() - n,
        variants,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub percentage: f64,
    /// Metric name to value, e.g. `bleu`, `rc`, `mi`.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    StrictlyDecreasing,
    StrictlyIncreasing,
    Other,
}

pub fn trend(values: &[f64]) -> Trend {
    if values.len() >= 2 && values.windows(2).all(|w| w[1] < w[0]) {
        Trend::StrictlyDecreasing
    } else if values.len() >= 2 && values.windows(2).all(|w| w[1] > w[0]) {
        Trend::StrictlyIncreasing
    } else {
        Trend::Other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// Spearman correlation of the metric with the contamination percentage.
    pub spearman: Option<f64>,
    pub trend: Trend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub n_references: usize,
    pub excluded: usize,
    pub averaging: Averaging,
    pub rows: Vec<ReliabilityRow>,
    pub verdicts: BTreeMap<String, Verdict>,
}

impl ReliabilityTable {
    pub fn series(&self, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.metrics.get(metric).copied().unwrap_or(f64::NAN))
            .collect()
    }

    /// Tab-separated layout: one row per percentage, one column per metric.
    pub fn to_tsv(&self) -> String {
        let metrics: Vec<&String> = self
            .rows
            .first()
            .map(|r| r.metrics.keys().collect())
            .unwrap_or_default();
        let mut out = String::from("percentage");
        for m in &metrics {
            write!(out, "\t{m}").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{}", row.percentage).unwrap();
            for m in &metrics {
                write!(out, "\t{:.4}", row.metrics[*m]).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Scores each variant as predictions against the kept references.
pub fn reliability_table(
    examples: &[TableExample],
    variants: &Variants,
    recognizer: &dyn EntityRecognizer,
    averaging: Averaging,
    external: Option<(&ScorerRegistry, &[String])>,
    exec: Execution,
) -> Result<ReliabilityTable, ContaminationError> {
    let kept: Vec<TableExample> = variants.kept.iter().map(|&i| examples[i].clone()).collect();
    let refs: Vec<String> = kept.iter().map(|e| e.reference.clone()).collect();
    let rows = exec.map(
        &variants.variants,
        |v| -> Result<ReliabilityRow, ContaminationError> {
            let ner = corpus_ner_metrics(
                &kept,
                &v.sentences,
                recognizer,
                averaging,
                Execution::Sequential,
            )?;
            let mut metrics = BTreeMap::new();
            metrics.insert("bleu".to_string(), corpus_bleu(&v.sentences, &refs, 4)?);
            for (name, value) in [
                ("rc", ner.rc),
                ("ri", ner.ri),
                ("rm", ner.rm),
                ("mi", ner.mi),
                ("mm", ner.mm),
            ] {
                metrics.insert(name.to_string(), value);
            }
            if let Some((registry, names)) = external {
                for name in names {
                    let s = external_score(registry, name, &v.sentences, &refs, &kept)?;
                    metrics.insert(name.clone(), s.mean());
                }
            }
            Ok(ReliabilityRow {
                percentage: v.percentage,
                metrics,
            })
        },
    );
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let pcts: Vec<f64> = rows.iter().map(|r| r.percentage).collect();
    let mut verdicts = BTreeMap::new();
    if let Some(first) = rows.first() {
        for metric in first.metrics.keys() {
            let values: Vec<f64> = rows.iter().map(|r| r.metrics[metric]).collect();
            verdicts.insert(
                metric.clone(),
                Verdict {
                    spearman: spearman(&pcts, &values),
                    trend: trend(&values),
                },
            );
        }
    }
    Ok(ReliabilityTable {
        n_references: variants.kept.len(),
        excluded: variants.excluded,
        averaging,
        rows,
        verdicts,
    })
}
