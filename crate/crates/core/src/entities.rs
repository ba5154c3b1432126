//! Entity extraction and comparison.
//!
//! Entities are compared by normalized string equality. The default
//! recognizer, [`TableGroundedRecognizer`], finds table cell values inside a
//! sentence. External NER output can be injected through
//! [`PreExtractedRecognizer`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{detokenize, split_words, TableExample, TokenSequence};

#[derive(Debug, Error)]
pub enum EntityError {
    #[error("unknown recognizer `{name}`; available: {available}")]
    UnknownRecognizer { name: String, available: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub normalized: String,
}

impl EntitySpan {
    pub fn new(sentence: &TokenSequence, start: usize, end: usize) -> Self {
        let surface = detokenize(&sentence.surface[start..end]);
        let normalized = normalize_entity(&surface);
        Self {
            start,
            end,
            surface,
            normalized,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

const ARTICLES: [&str; 3] = ["the ", "a ", "an "];

fn normalize_step(s: &str) -> String {
    let lower = s.to_lowercase();
    let mut out = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    for article in ARTICLES {
        if let Some(rest) = out.strip_prefix(article) {
            out = rest.to_string();
            break;
        }
    }
    let trimmed = out.trim_end_matches(|c: char| !c.is_alphanumeric() && !c.is_whitespace());
    trimmed.trim().to_string()
}

/// Case-folds, collapses whitespace, strips leading articles and trailing
/// punctuation. Applied to a fixpoint, so the result is idempotent.
pub fn normalize_entity(surface: &str) -> String {
    let mut cur = normalize_step(surface);
    loop {
        let next = normalize_step(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Normalizes a raw cell as if it had been tokenized and detokenized, so it
/// compares equal to the same text found inside a tokenized sentence.
pub fn normalize_cell(cell: &str) -> String {
    normalize_entity(&detokenize(&split_words(cell)))
}

/// Anything that can find entity spans in a tokenized sentence.
///
/// Implementations must return spans that are sorted by start and do not
/// overlap.
pub trait EntityRecognizer: Send + Sync {
    fn name(&self) -> &str;
    fn extract(&self, sentence: &TokenSequence, context: Option<&TableExample>) -> Vec<EntitySpan>;
}

/// Matches normalized table cell values against the sentence, leftmost-longest.
#[derive(Debug, Clone, Copy, Default)]
pub struct TableGroundedRecognizer;

impl EntityRecognizer for TableGroundedRecognizer {
    fn name(&self) -> &str {
        "table"
    }

    fn extract(&self, sentence: &TokenSequence, context: Option<&TableExample>) -> Vec<EntitySpan> {
        let Some(table) = context else {
            return Vec::new();
        };
        let mut lexicon = Lexicon::default();
        lexicon.add_table(table);
        lexicon.find(sentence)
    }
}

/// Normalized entity strings plus the longest entry length in tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeSet<String>,
    longest: usize,
}

impl Lexicon {
    pub fn add_cell(&mut self, cell: &str) {
        let norm = normalize_cell(cell);
        if !norm.is_empty() {
            self.longest = self.longest.max(split_words(cell).len());
            self.entries.insert(norm);
        }
    }

    pub fn add_table(&mut self, table: &TableExample) {
        for row in &table.rows {
            for cell in row {
                self.add_cell(cell);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.entries.contains(normalized)
    }

    /// Leftmost-longest, non-overlapping matches.
    pub fn find(&self, sentence: &TokenSequence) -> Vec<EntitySpan> {
        // Leading articles are stripped by normalization, so allow one extra
        // token for a span like "the bahamas".
        let longest = self.longest + 1;
        let n = sentence.len();
        let mut spans = Vec::new();
        let mut i = 0;
        while i < n {
            let found = (i + 1..=n.min(i + longest)).rev().find(|&j| {
                let norm = normalize_entity(&detokenize(&sentence.surface[i..j]));
                !norm.is_empty() && self.entries.contains(&norm)
            });
            match found {
                Some(mut j) => {
                    // "1988 ." normalizes like "1988"; keep punctuation out of the span.
                    while j > i + 1 && normalize_entity(&sentence.surface[j - 1]).is_empty() {
                        j -= 1;
                    }
                    spans.push(EntitySpan::new(sentence, i, j));
                    i = j;
                }
                None => i += 1,
            }
        }
        spans
    }
}

/// Matches cell values drawn from a whole corpus, plus the context table.
///
/// Unlike [`TableGroundedRecognizer`] it also finds entities that belong to
/// other tables, which is what makes out-of-input mentions visible.
#[derive(Debug, Clone, Default)]
pub struct GazetteerRecognizer {
    lexicon: Lexicon,
}

impl GazetteerRecognizer {
    pub fn from_corpus(examples: &[TableExample]) -> Self {
        let mut lexicon = Lexicon::default();
        for ex in examples {
            lexicon.add_table(ex);
        }
        Self { lexicon }
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }
}

impl EntityRecognizer for GazetteerRecognizer {
    fn name(&self) -> &str {
        "gazetteer"
    }

    fn extract(&self, sentence: &TokenSequence, context: Option<&TableExample>) -> Vec<EntitySpan> {
        match context {
            Some(table) => {
                let mut lexicon = self.lexicon.clone();
                lexicon.add_table(table);
                lexicon.find(sentence)
            }
            None => self.lexicon.find(sentence),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreExtractedRecord {
    pub id: String,
    pub text: String,
    pub spans: Vec<(usize, usize)>,
}

/// Serves spans produced by an external recognizer, keyed by sentence text
/// (lowercased tokens joined by single spaces).
#[derive(Debug, Clone, Default)]
pub struct PreExtractedRecognizer {
    by_text: HashMap<String, Vec<(usize, usize)>>,
}

fn sentence_key<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(|t| t.as_ref().to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

impl PreExtractedRecognizer {
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, EntityError> {
        let mut by_text = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| EntityError::Parse {
                line: i + 1,
                message,
            };
            let rec: PreExtractedRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let tokens = split_words(&rec.text);
            let mut prev_end = 0;
            for &(s, e) in &rec.spans {
                if s >= e || e > tokens.len() || s < prev_end {
                    return Err(parse_err(format!(
                        "record `{}`: span ({s}, {e}) is empty, out of range or overlapping",
                        rec.id
                    )));
                }
                prev_end = e;
            }
            by_text.insert(sentence_key(&tokens), rec.spans);
        }
        Ok(Self { by_text })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, EntityError> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    pub fn len(&self) -> usize {
        self.by_text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_text.is_empty()
    }
}

impl EntityRecognizer for PreExtractedRecognizer {
    fn name(&self) -> &str {
        "file"
    }

    fn extract(
        &self,
        sentence: &TokenSequence,
        _context: Option<&TableExample>,
    ) -> Vec<EntitySpan> {
        self.by_text
            .get(&sentence_key(&sentence.surface))
            .map(|spans| {
                spans
                    .iter()
                    .filter(|(_, e)| *e <= sentence.len())
                    .map(|&(s, e)| EntitySpan::new(sentence, s, e))
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Looks a recognizer up by name: `table`, `gazetteer` (built from
/// `corpus`), or `file:<path>` for pre-extracted spans.
pub fn recognizer_by_name(
    name: &str,
    corpus: &[TableExample],
) -> Result<Box<dyn EntityRecognizer>, EntityError> {
    match name.split_once(':') {
        None if name == "table" => Ok(Box::new(TableGroundedRecognizer)),
        None if name == "gazetteer" => Ok(Box::new(GazetteerRecognizer::from_corpus(corpus))),
        Some(("file", path)) => Ok(Box::new(PreExtractedRecognizer::from_path(path)?)),
        _ => Err(EntityError::UnknownRecognizer {
            name: name.to_string(),
            available: "table, gazetteer, file:<path>".into(),
        }),
    }
}

pub fn extract_entities(
    sentence: &TokenSequence,
    context: Option<&TableExample>,
    recognizer: &dyn EntityRecognizer,
) -> Vec<EntitySpan> {
    recognizer.extract(sentence, context)
}

pub fn entity_set(spans: &[EntitySpan]) -> BTreeSet<String> {
    spans.iter().map(|s| s.normalized.clone()).collect()
}

/// Per-column normalized entity sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableEntitySets {
    /// Every column over the full table.
    pub columns: BTreeMap<usize, BTreeSet<String>>,
    /// Only highlighted cells, when the example has highlights.
    pub highlighted: Option<BTreeMap<usize, BTreeSet<String>>>,
}

impl TableEntitySets {
    pub fn all(&self) -> BTreeSet<String> {
        self.columns.values().flatten().cloned().collect()
    }

    /// Columns whose entity set contains `entity`.
    pub fn columns_containing(&self, entity: &str) -> Vec<usize> {
        self.columns
            .iter()
            .filter(|(_, set)| set.contains(entity))
            .map(|(c, _)| *c)
            .collect()
    }
}

pub fn table_entity_sets(example: &TableExample) -> TableEntitySets {
    let mut columns: BTreeMap<usize, BTreeSet<String>> = (0..example.header.len())
        .map(|c| (c, BTreeSet::new()))
        .collect();
    for row in &example.rows {
        for (c, cell) in row.iter().enumerate() {
            let norm = normalize_cell(cell);
            if !norm.is_empty() {
                columns.get_mut(&c).unwrap().insert(norm);
            }
        }
    }
    let highlighted = example.sorted_highlights().map(|cells| {
        let mut map: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        for (r, c) in cells {
            let norm = normalize_cell(example.cell(r, c));
            if !norm.is_empty() {
                map.entry(c).or_default().insert(norm);
            }
        }
        map
    });
    TableEntitySets {
        columns,
        highlighted,
    }
}

/// All normalized cell values of the table.
pub fn input_entities(example: &TableExample) -> BTreeSet<String> {
    table_entity_sets(example).all()
}

/// Entities of the cells the model is shown: the highlighted cells when the
/// example has highlights, otherwise the whole table.
pub fn visible_input_entities(example: &TableExample) -> BTreeSet<String> {
    let sets = table_entity_sets(example);
    match sets.highlighted {
        Some(h) => h.into_values().flatten().collect(),
        None => sets.columns.into_values().flatten().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;

    fn table(cells: &[&[&str]]) -> TableExample {
        TableExample {
            table_id: "t".into(),
            header: (0..cells[0].len()).map(|c| format!("c{c}")).collect(),
            rows: cells
                .iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
            metadata: Default::default(),
            query: None,
            highlighted_cells: None,
            reference: "r".into(),
        }
    }

    fn seq(text: &str) -> TokenSequence {
        let v = Vocabulary::from_words(split_words(text));
        crate::corpus::tokenize(text, &v)
    }

    #[test]
    fn normalize_rules() {
        assert_eq!(normalize_entity("The Netherlands "), "netherlands");
        assert_eq!(normalize_entity("1998."), "1998");
        assert_eq!(normalize_entity("  New   York!! "), "new york");
        assert_eq!(normalize_entity("the the x"), "x");
        assert_eq!(normalize_entity("7.5"), "7.5");
        assert_eq!(normalize_entity(""), "");
    }

    #[test]
    fn spans_exclude_trailing_punctuation() {
        let t = table(&[&["Sweden", "1998"]]);
        let spans = TableGroundedRecognizer.extract(&seq("Sweden won in 1998."), Some(&t));
        let got: Vec<_> = spans.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(got, vec![(0, 1), (3, 4)]);
    }

    #[test]
    fn extracts_table_values() {
        let t = table(&[&["Sweden", "1998"], &["Norway", "2002"]]);
        let spans = TableGroundedRecognizer.extract(&seq("sweden won in 1998"), Some(&t));
        let got: Vec<_> = spans
            .iter()
            .map(|s| (s.start, s.end, s.normalized.as_str()))
            .collect();
        assert_eq!(got, vec![(0, 1, "sweden"), (3, 4, "1998")]);
    }

    #[test]
    fn no_overlap_yields_empty() {
        let t = table(&[&["Sweden", "1998"]]);
        assert!(TableGroundedRecognizer
            .extract(&seq("nothing to see here"), Some(&t))
            .is_empty());
        assert!(TableGroundedRecognizer
            .extract(&seq("sweden"), None)
            .is_empty());
    }

    #[test]
    fn leftmost_longest() {
        let t = table(&[&["New York"], &["York"]]);
        let spans = TableGroundedRecognizer.extract(&seq("she moved to new york"), Some(&t));
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end), (3, 5));
        assert_eq!(spans[0].normalized, "new york");
    }

    #[test]
    fn column_sets_dedup() {
        let t = table(&[&["Sweden", "1"], &["Norway", "2"], &["Sweden", "3"]]);
        let sets = table_entity_sets(&t);
        assert_eq!(sets.columns.len(), 2);
        assert_eq!(
            sets.columns[&0],
            ["norway", "sweden"].iter().map(|s| s.to_string()).collect()
        );
        assert!(sets.highlighted.is_none());
    }

    #[test]
    fn highlighted_sets_keep_full_mapping() {
        let mut t = table(&[&["Sweden", "1"], &["Norway", "2"]]);
        t.highlighted_cells = Some(vec![(1, 0)]);
        let sets = table_entity_sets(&t);
        assert_eq!(sets.columns[&0].len(), 2);
        let hl = sets.highlighted.unwrap();
        assert_eq!(hl.len(), 1);
        assert!(hl[&0].contains("norway"));
    }

    #[test]
    fn pre_extracted_spans_are_served_verbatim() {
        let text = r#"{"id": "s1", "text": "Sweden won in 1998.", "spans": [[0, 1], [3, 4]]}
{"id": "s2", "text": "Nothing.", "spans": []}"#;
        let rec = PreExtractedRecognizer::from_reader(text.as_bytes()).unwrap();
        assert_eq!(rec.len(), 2);
        let spans = rec.extract(&seq("sweden won in 1998."), None);
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[1].normalized, "1998");
        let bad = r#"{"id": "s", "text": "a b", "spans": [[1, 2], [0, 1]]}"#;
        assert!(PreExtractedRecognizer::from_reader(bad.as_bytes()).is_err());
    }

    #[test]
    fn gazetteer_sees_other_tables() {
        let a = table(&[&["Sweden", "1998"]]);
        let b = table(&[&["Chile", "2004"]]);
        let g = GazetteerRecognizer::from_corpus(&[a.clone(), b]);
        let s = seq("chile won in 1998");
        assert_eq!(entity_set(&g.extract(&s, Some(&a))).len(), 2);
        assert_eq!(
            entity_set(&TableGroundedRecognizer.extract(&s, Some(&a))).len(),
            1
        );
        assert_eq!(g.extract(&seq("no entity"), None).len(), 0);
    }

    #[test]
    fn registry() {
        assert_eq!(recognizer_by_name("table", &[]).unwrap().name(), "table");
        assert_eq!(
            recognizer_by_name("gazetteer", &[]).unwrap().name(),
            "gazetteer"
        );
        let err = recognizer_by_name("roberta", &[])
            .err()
            .unwrap()
            .to_string();
        assert!(err.contains("table"), "{err}");
    }
}
