//! Faithfulness metrics over entity sets, corpus BLEU, external scores and
//! correlation reports.
//!
//! The five entity indicators for a prediction are:
//!
//! - `rc`: share of reference entities that appear in the prediction;
//! - `ri`, `rm`, `mi`, `mm`: partition of predicted entities by membership
//!   in the reference (R/M) and in the input table (I/M), each as a share
//!   of the predicted set.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{split_words, tokenize, TableExample, Vocabulary};
use crate::entities::{entity_set, visible_input_entities, EntityRecognizer};
use crate::exec::Execution;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: expected {expected} items, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown scorer `{name}`; available: {available}")]
    UnknownScorer { name: String, available: String },
    #[error("scorer `{scorer}` returned {value} at index {index}, outside [{lo}, {hi}]")]
    OutOfRange {
        scorer: String,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("scorer `{0}` failed: {1}")]
    Scorer(String, String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw counts behind the five indicators.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerCounts {
    pub reference: usize,
    pub covered: usize,
    pub predicted: usize,
    pub ri: usize,
    pub rm: usize,
    pub mi: usize,
    pub mm: usize,
}

impl NerCounts {
    pub fn from_sets(
        pred: &BTreeSet<String>,
        reference: &BTreeSet<String>,
        input: &BTreeSet<String>,
    ) -> Self {
        let mut c = NerCounts {
            reference: reference.len(),
            covered: reference.intersection(pred).count(),
            predicted: pred.len(),
            ..Default::default()
        };
        for e in pred {
            match (reference.contains(e), input.contains(e)) {
                (true, true) => c.ri += 1,
                (true, false) => c.rm += 1,
                (false, true) => c.mi += 1,
                (false, false) => c.mm += 1,
            }
        }
        c
    }

    fn add(&mut self, o: &NerCounts) {
        self.reference += o.reference;
        self.covered += o.covered;
        self.predicted += o.predicted;
        self.ri += o.ri;
        self.rm += o.rm;
        self.mi += o.mi;
        self.mm += o.mm;
    }

    fn percentages(&self) -> Percentages {
        let pct = |n: usize, d: usize| 100.0 * n as f64 / d as f64;
        let rc = if self.reference == 0 {
            100.0
        } else {
            pct(self.covered, self.reference)
        };
        if self.predicted == 0 {
            return Percentages {
                rc,
                ri: 0.0,
                rm: 0.0,
                mi: 0.0,
                mm: 0.0,
            };
        }
        let p = self.predicted;
        Percentages {
            rc,
            ri: pct(self.ri, p),
            rm: pct(self.rm, p),
            mi: pct(self.mi, p),
            mm: pct(self.mm, p),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Percentages {
    rc: f64,
    ri: f64,
    rm: f64,
    mi: f64,
    mm: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Pool entity counts over the corpus, then take percentages.
    #[default]
    Micro,
    /// Average per-example percentages.
    Macro,
}

/// Entity sets retained per example for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleEntities {
    pub id: String,
    pub predicted: BTreeSet<String>,
    pub reference: BTreeSet<String>,
    pub input: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerMetricReport {
    pub rc: f64,
    pub ri: f64,
    pub rm: f64,
    pub mi: f64,
    pub mm: f64,
    pub averaging: Averaging,
    pub counts: NerCounts,
    /// The (pooled) predicted set is empty; `ri..mm` are reported as 0.
    pub empty_prediction: bool,
    /// The (pooled) reference set is empty; `rc` is reported as 100.
    pub empty_reference: bool,
    pub examples_with_empty_prediction: usize,
    pub examples_with_empty_reference: usize,
    pub per_example: Vec<ExampleEntities>,
}

impl NerMetricReport {
    pub fn partition_sum(&self) -> f64 {
        self.ri + self.rm + self.mi + self.mm
    }
}

/// Indicators for a single example.
pub fn ner_metrics(
    pred: &BTreeSet<String>,
    reference: &BTreeSet<String>,
    input: &BTreeSet<String>,
) -> NerMetricReport {
    aggregate(
        vec![ExampleEntities {
            id: String::new(),
            predicted: pred.clone(),
            reference: reference.clone(),
            input: input.clone(),
        }],
        Averaging::Micro,
    )
}

/// Aggregates retained per-example sets.
pub fn aggregate(per_example: Vec<ExampleEntities>, averaging: Averaging) -> NerMetricReport {
    let counts_each: Vec<NerCounts> = per_example
        .iter()
        .map(|e| NerCounts::from_sets(&e.predicted, &e.reference, &e.input))
        .collect();
    let mut pooled = NerCounts::default();
    for c in &counts_each {
        pooled.add(c);
    }
    let p = match averaging {
        Averaging::Micro => pooled.percentages(),
        Averaging::Macro => {
            let mean = |xs: Vec<f64>| {
                if xs.is_empty() {
                    0.0
                } else {
                    xs.iter().sum::<f64>() / xs.len() as f64
                }
            };
            let each: Vec<Percentages> = counts_each.iter().map(NerCounts::percentages).collect();
            let nonempty: Vec<&Percentages> = counts_each
                .iter()
                .zip(&each)
                .filter(|(c, _)| c.predicted > 0)
                .map(|(_, p)| p)
                .collect();
            Percentages {
                rc: mean(each.iter().map(|p| p.rc).collect()),
                ri: mean(nonempty.iter().map(|p| p.ri).collect()),
                rm: mean(nonempty.iter().map(|p| p.rm).collect()),
                mi: mean(nonempty.iter().map(|p| p.mi).collect()),
                mm: mean(nonempty.iter().map(|p| p.mm).collect()),
            }
        }
    };
    NerMetricReport {
        rc: p.rc,
        ri: p.ri,
        rm: p.rm,
        mi: p.mi,
        mm: p.mm,
        averaging,
        counts: pooled,
        empty_prediction: pooled.predicted == 0,
        empty_reference: pooled.reference == 0,
        examples_with_empty_prediction: counts_each.iter().filter(|c| c.predicted == 0).count(),
        examples_with_empty_reference: counts_each.iter().filter(|c| c.reference == 0).count(),
        per_example,
    }
}

/// Extracts entities from predictions and references and aggregates.
pub fn corpus_ner_metrics(
    examples: &[TableExample],
    predictions: &[String],
    recognizer: &dyn EntityRecognizer,
    averaging: Averaging,
    exec: Execution,
) -> Result<NerMetricReport, EvalError> {
    if examples.len() != predictions.len() {
        return Err(EvalError::CountMismatch {
            what: "predictions",
            expected: examples.len(),
            got: predictions.len(),
        });
    }
    let pairs: Vec<(&TableExample, &String)> = examples.iter().zip(predictions).collect();
    // Recognition runs on surface tokens; ids are irrelevant here.
    let vocab = Vocabulary::from_words(std::iter::empty::<&str>());
    let per_example = exec.map(&pairs, |(ex, pred)| {
        let p = tokenize(pred, &vocab);
        let r = tokenize(&ex.reference, &vocab);
        ExampleEntities {
            id: ex.table_id.clone(),
            predicted: entity_set(&recognizer.extract(&p, Some(ex))),
            reference: entity_set(&recognizer.extract(&r, Some(ex))),
            input: visible_input_entities(ex),
        }
    });
    Ok(aggregate(per_example, averaging))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of corpus BLEU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
    pub sys_len: usize,
    pub ref_len: usize,
}

pub const BLEU_FLOOR: f64 = 0.1;

/// Lowercased word tokens used for BLEU.
pub fn bleu_tokens(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .map(|w| w.to_lowercase())
        .collect()
}

pub fn bleu_stats(
    predictions: &[String],
    references: &[String],
    max_n: usize,
) -> Result<BleuStats, EvalError> {
    if predictions.len() != references.len() {
        return Err(EvalError::CountMismatch {
            what: "references",
            expected: predictions.len(),
            got: references.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut s = BleuStats {
        correct: vec![0; max_n],
        total: vec![0; max_n],
        sys_len: 0,
        ref_len: 0,
    };
    for (p, r) in predictions.iter().zip(references) {
        let p = bleu_tokens(p);
        let r = bleu_tokens(r);
        s.sys_len += p.len();
        s.ref_len += r.len();
        for n in 1..=max_n {
            let pc = ngram_counts(&p, n);
            let rc = ngram_counts(&r, n);
            s.total[n - 1] += p.len().saturating_sub(n - 1);
            s.correct[n - 1] += pc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    Ok(s)
}

impl BleuStats {
    /// Score in `[0, 100]`: geometric mean of clipped precisions times the
    /// brevity penalty. A zero-match order gets precision `BLEU_FLOOR /
    /// total`; a corpus with no matches at all scores 0.
    pub fn score(&self) -> f64 {
        if self.correct.iter().all(|&c| c == 0) {
            return 0.0;
        }
        let max_n = self.correct.len();
        let mut log_sum = 0.0;
        for n in 0..max_n {
            if self.total[n] == 0 {
                return 0.0;
            }
            let p = if self.correct[n] == 0 {
                BLEU_FLOOR / self.total[n] as f64
            } else {
                self.correct[n] as f64 / self.total[n] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.sys_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.sys_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * (log_sum / max_n as f64).exp()
    }
}

pub fn corpus_bleu(
    predictions: &[String],
    references: &[String],
    max_n: usize,
) -> Result<f64, EvalError> {
    Ok(bleu_stats(predictions, references, max_n)?.score())
}

/// A learned or external metric. Implementations declare their value range.
pub trait ExternalScorer: Send + Sync {
    fn name(&self) -> &str;
    fn range(&self) -> (f64, f64);
    fn score(
        &self,
        predictions: &[String],
        references: &[String],
        inputs: &[TableExample],
    ) -> Result<Vec<f64>, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalScores {
    pub scorer: String,
    /// Where the numbers came from (plugin name or file path).
    pub provenance: String,
    pub values: Vec<f64>,
}

impl ExternalScores {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Default)]
pub struct ScorerRegistry {
    scorers: BTreeMap<String, Box<dyn ExternalScorer>>,
}

impl ScorerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, scorer: Box<dyn ExternalScorer>) {
        self.scorers.insert(scorer.name().to_string(), scorer);
    }

    pub fn names(&self) -> Vec<&str> {
        self.scorers.keys().map(String::as_str).collect()
    }
}

/// One score per line, either a bare number or `{"score": x}`.
pub fn read_prescored<R: BufRead>(reader: R) -> Result<Vec<f64>, EvalError> {
    #[derive(Deserialize)]
    struct Line {
        score: f64,
    }
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v = match t.parse::<f64>() {
            Ok(v) => v,
            Err(_) => {
                serde_json::from_str::<Line>(t)
                    .map_err(|e| EvalError::Parse {
                        line: i + 1,
                        message: e.to_string(),
                    })?
                    .score
            }
        };
        out.push(v);
    }
    Ok(out)
}

/// Looks `name` up in `registry`, or reads `file:<path>` as pre-scored
/// values. Values are passed through unchanged apart from a range check.
pub fn external_score(
    registry: &ScorerRegistry,
    name: &str,
    predictions: &[String],
    references: &[String],
    inputs: &[TableExample],
) -> Result<ExternalScores, EvalError> {
    let (values, provenance, range) = if let Some(path) = name.strip_prefix("file:") {
        let values = read_prescored(BufReader::new(File::open(path)?))?;
        (
            values,
            format!("file:{path}"),
            (f64::NEG_INFINITY, f64::INFINITY),
        )
    } else {
        let scorer = registry.scorers.get(name).ok_or_else(|| {
            let mut available = registry.names().join(", ");
            if !available.is_empty() {
                available.push_str(", ");
            }
            available.push_str("file:<path>");
            EvalError::UnknownScorer {
                name: name.into(),
                available,
            }
        })?;
        let values = scorer
            .score(predictions, references, inputs)
            .map_err(|e| EvalError::Scorer(name.into(), e))?;
        (values, format!("plugin:{name}"), scorer.range())
    };
    if values.len() != predictions.len() {
        return Err(EvalError::CountMismatch {
            what: "external scores",
            expected: predictions.len(),
            got: values.len(),
        });
    }
    for (index, &value) in values.iter().enumerate() {
        if !(value >= range.0 && value <= range.1) {
            return Err(EvalError::OutOfRange {
                scorer: name.into(),
                index,
                value,
                lo: range.0,
                hi: range.1,
            });
        }
    }
    Ok(ExternalScores {
        scorer: name.into(),
        provenance,
        values,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub a: String,
    pub b: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n_variants: usize,
    pub rows: Vec<CorrelationRow>,
}

/// Pairwise correlations over series that share one value per variant.
pub fn correlation_report(
    series: &BTreeMap<String, Vec<f64>>,
) -> Result<CorrelationReport, EvalError> {
    let n = series.values().next().map_or(0, Vec::len);
    for v in series.values() {
        if v.len() != n {
            return Err(EvalError::CountMismatch {
                what: "series values",
                expected: n,
                got: v.len(),
            });
        }
    }
    let names: Vec<&String> = series.keys().collect();
    let mut rows = Vec::new();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let (a, b) = (&series[names[i]], &series[names[j]]);
            rows.push(CorrelationRow {
                a: names[i].clone(),
                b: names[j].clone(),
                pearson: pearson(a, b),
                spearman: spearman(a, b),
            });
        }
    }
    Ok(CorrelationReport {
        n_variants: n,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

/// One `(variant, metric, value)` JSON line per point.
pub fn write_scatter<W: Write>(
    mut w: W,
    variants: &[String],
    series: &BTreeMap<String, Vec<f64>>,
) -> Result<(), EvalError> {
    for (metric, values) in series {
        if values.len() != variants.len() {
            return Err(EvalError::CountMismatch {
                what: "scatter values",
                expected: variants.len(),
                got: values.len(),
            });
        }
        for (variant, &value) in variants.iter().zip(values) {
            let point = ScatterPoint {
                variant: variant.clone(),
                metric: metric.clone(),
                value,
            };
            writeln!(
                w,
                "{}",
                serde_json::to_string(&point).expect("plain struct serializes")
            )?;
        }
    }
    Ok(())
}

pub fn save_scatter(
    path: impl AsRef<Path>,
    variants: &[String],
    series: &BTreeMap<String, Vec<f64>>,
) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    write_scatter(&mut f, variants, series)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entities::TableGroundedRecognizer;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn single_example_fixture() {
        let r = ner_metrics(
            &set(&["a", "b", "c"]),
            &set(&["a", "b", "d"]),
            &set(&["a", "b", "c", "d"]),
        );
        assert!(close(r.rc, 200.0 / 3.0));
        assert!(close(r.ri, 200.0 / 3.0));
        assert!(close(r.rm, 0.0));
        assert!(close(r.mi, 100.0 / 3.0));
        assert!(close(r.mm, 0.0));
        assert!(close(r.partition_sum(), 100.0));
    }

    #[test]
    fn identity_and_hallucination() {
        let s = set(&["x", "y"]);
        let r = ner_metrics(&s, &s, &s);
        assert_eq!(
            (r.rc, r.ri, r.rm, r.mi, r.mm),
            (100.0, 100.0, 0.0, 0.0, 0.0)
        );
        let r = ner_metrics(&set(&["z"]), &set(&["x"]), &set(&["x"]));
        assert_eq!(r.mm, 100.0);
        assert_eq!(r.rc, 0.0);
    }

    #[test]
    fn empty_sets_are_flagged() {
        let r = ner_metrics(&set(&[]), &set(&["a"]), &set(&["a"]));
        assert!(r.empty_prediction);
        assert_eq!(r.partition_sum(), 0.0);
        let r = ner_metrics(&set(&["a"]), &set(&[]), &set(&["a"]));
        assert!(r.empty_reference);
        assert_eq!(r.rc, 100.0);
    }

    #[test]
    fn micro_and_macro_differ_when_sizes_differ() {
        let ex = |p: &[&str], r: &[&str]| ExampleEntities {
            id: String::new(),
            predicted: set(p),
            reference: set(r),
            input: set(&["a", "b", "c", "d"]),
        };
        let data = vec![ex(&["a"], &["a"]), ex(&["b", "c", "d"], &["x"])];
        let micro = aggregate(data.clone(), Averaging::Micro);
        let macro_ = aggregate(data, Averaging::Macro);
        assert!(close(micro.ri, 25.0));
        assert!(close(macro_.ri, 50.0));
        assert!(close(micro.rc, 50.0));
        assert!(close(macro_.rc, 50.0));
        assert_eq!(micro.averaging, Averaging::Micro);
    }

    fn example(reference: &str) -> TableExample {
        TableExample {
            table_id: "t".into(),
            header: vec!["Country".into(), "Year".into()],
            rows: vec![
                vec!["Sweden".into(), "1998".into()],
                vec!["Norway".into(), "2002".into()],
            ],
            metadata: Default::default(),
            query: None,
            highlighted_cells: None,
            reference: reference.into(),
        }
    }

    #[test]
    fn corpus_metrics_on_references() {
        let exs = vec![
            example("Sweden won in 1998."),
            example("Norway won in 2002."),
        ];
        let preds: Vec<String> = exs.iter().map(|e| e.reference.clone()).collect();
        let r = corpus_ner_metrics(
            &exs,
            &preds,
            &TableGroundedRecognizer,
            Averaging::Micro,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!((r.rc, r.mi, r.mm), (100.0, 0.0, 0.0));
        let single = corpus_ner_metrics(
            &exs[..1],
            &preds[..1],
            &TableGroundedRecognizer,
            Averaging::Micro,
            Execution::default(),
        )
        .unwrap();
        let e = &single.per_example[0];
        let direct = ner_metrics(&e.predicted, &e.reference, &e.input);
        assert_eq!(single.rc, direct.rc);
        assert!(corpus_ner_metrics(
            &exs,
            &preds[..1],
            &TableGroundedRecognizer,
            Averaging::Micro,
            Execution::Sequential
        )
        .is_err());
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let refs = vec![
            "the cat sat on the mat".to_string(),
            "a b c d e".to_string(),
        ];
        assert!(close(corpus_bleu(&refs, &refs, 4).unwrap(), 100.0));
        let preds = vec!["x y z w v u".to_string(), "q r s t u".to_string()];
        assert_eq!(corpus_bleu(&preds, &refs, 4).unwrap(), 0.0);
        assert!(corpus_bleu(&[], &[], 4).is_err());
    }

    #[test]
    fn bleu_brevity_penalty_and_floor() {
        let refs = vec!["one two three four five six".to_string()];
        let preds = vec!["one two three".to_string()];
        let s = bleu_stats(&preds, &refs, 4).unwrap();
        assert_eq!(s.correct, vec![3, 2, 1, 0]);
        assert_eq!(s.total, vec![3, 2, 1, 0]);
        assert_eq!(corpus_bleu(&preds, &refs, 4).unwrap(), 0.0);
        let v = corpus_bleu(&preds, &refs, 3).unwrap();
        assert!(close(v, 100.0 * (1.0f64 - 2.0).exp()));
    }

    struct Stub(Vec<f64>);

    impl ExternalScorer for Stub {
        fn name(&self) -> &str {
            "stub"
        }
        fn range(&self) -> (f64, f64) {
            (0.0, 1.0)
        }
        fn score(
            &self,
            _: &[String],
            _: &[String],
            _: &[TableExample],
        ) -> Result<Vec<f64>, String> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn external_scorers() {
        let preds = vec!["a".to_string(), "b".to_string()];
        let mut reg = ScorerRegistry::new();
        reg.register(Box::new(Stub(vec![0.2, 0.9])));
        let s = external_score(&reg, "stub", &preds, &preds, &[]).unwrap();
        assert_eq!(s.values, vec![0.2, 0.9]);
        assert_eq!(s.provenance, "plugin:stub");
        let err = external_score(&reg, "nli", &preds, &preds, &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("stub") && err.contains("file:"), "{err}");

        let mut bad = ScorerRegistry::new();
        bad.register(Box::new(Stub(vec![0.2, 1.5])));
        assert!(matches!(
            external_score(&bad, "stub", &preds, &preds, &[]),
            Err(EvalError::OutOfRange { index: 1, .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.txt");
        std::fs::write(&path, "0.5\n{\"score\": 0.25}\n").unwrap();
        let name = format!("file:{}", path.display());
        let s = external_score(&reg, &name, &preds, &preds, &[]).unwrap();
        assert_eq!(s.values, vec![0.5, 0.25]);
        assert!(external_score(&reg, &name, &preds[..1], &preds[..1], &[]).is_err());
    }

    #[test]
    fn correlations() {
        let a = vec![1.0, 2.0, 3.0];
        assert!(close(pearson(&a, &a).unwrap(), 1.0));
        assert!(close(pearson(&a, &[2.0, 4.0, 6.0]).unwrap(), 1.0));
        assert!(close(spearman(&a, &[9.0, 5.0, 1.0]).unwrap(), -1.0));
        assert!(pearson(&a, &[1.0, 1.0, 1.0]).is_none());
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);

        let mut series = BTreeMap::new();
        series.insert("bleu".to_string(), vec![100.0, 80.0, 60.0]);
        series.insert("rc".to_string(), vec![100.0, 90.0, 70.0]);
        let rep = correlation_report(&series).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert!(rep.rows[0].pearson.unwrap() > 0.9);
        series.insert("bad".to_string(), vec![1.0]);
        assert!(correlation_report(&series).is_err());

        let mut buf = Vec::new();
        series.remove("bad");
        write_scatter(&mut buf, &["0".into(), "50".into(), "100".into()], &series).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
    }
}
