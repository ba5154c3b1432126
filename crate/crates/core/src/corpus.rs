//! Data model for table-to-text instances: linearization, tokenization,
//! dataset files and a seeded synthetic generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const QUERY_MARK: &str = "<q>";
pub const META_MARK: &str = "<meta>";
pub const ROW_MARK: &str = "<row>";
pub const CELL_MARK: &str = "<cell>";

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const QUERY_ID: u32 = 4;
pub const META_ID: u32 = 5;
pub const ROW_ID: u32 = 6;
pub const CELL_ID: u32 = 7;

const RESERVED: [&str; 8] = [
    PAD, BOS, EOS, UNK, QUERY_MARK, META_MARK, ROW_MARK, CELL_MARK,
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: record `{table_id}` violates invariant: {reason}")]
    Invariant {
        line: usize,
        table_id: String,
        reason: String,
    },
    #[error("invalid example `{table_id}`: {reason}")]
    InvalidExample { table_id: String, reason: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One data-to-text instance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableExample {
    pub table_id: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub highlighted_cells: Option<Vec<(usize, usize)>>,
    pub reference: String,
}

impl TableExample {
    pub fn validate(&self) -> Result<(), String> {
        let width = self.header.len();
        for (r, row) in self.rows.iter().enumerate() {
            if row.len() != width {
                return Err(format!(
                    "row {r} has {} cells but header has {width}",
                    row.len()
                ));
            }
        }
        if let Some(cells) = &self.highlighted_cells {
            for &(r, c) in cells {
                if r >= self.rows.len() || c >= width {
                    return Err(format!("highlighted cell ({r}, {c}) out of range"));
                }
            }
        }
        if self.reference.trim().is_empty() {
            return Err("reference is empty".into());
        }
        Ok(())
    }

    pub fn cell(&self, row: usize, col: usize) -> &str {
        &self.rows[row][col]
    }

    /// Row-major, deduplicated highlighted cells, if any.
    pub fn sorted_highlights(&self) -> Option<Vec<(usize, usize)>> {
        self.highlighted_cells.as_ref().map(|cells| {
            let set: BTreeSet<(usize, usize)> = cells.iter().copied().collect();
            set.into_iter().collect()
        })
    }
}

/// Token ids paired with their surface strings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub surface: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions whose token was not in the vocabulary.
    pub fn unknown_count(&self) -> usize {
        self.ids
            .iter()
            .zip(&self.surface)
            .filter(|(id, s)| **id == UNK_ID && s.as_str() != UNK)
            .count()
    }

    pub fn slice(&self, start: usize, end: usize) -> TokenSequence {
        TokenSequence {
            ids: self.ids[start..end].to_vec(),
            surface: self.surface[start..end].to_vec(),
        }
    }

    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut out = self.clone();
        out.ids.extend_from_slice(&other.ids);
        out.surface.extend(other.surface.iter().cloned());
        out
    }

    pub fn text(&self) -> String {
        detokenize(&self.surface)
    }
}

/// Bijective token/id mapping with reserved markers at ids 0..8.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from lowercased word types, sorted for determinism.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !RESERVED.contains(&w.as_str()) {
                set.insert(w);
            }
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect::<Vec<_>>();
        Self::from_tokens(tokens).expect("constructed vocabulary is valid")
    }

    /// Every word appearing in linearized inputs or references.
    pub fn from_corpus(examples: &[TableExample]) -> Self {
        let mut words = Vec::new();
        for ex in examples {
            words.extend(linearize_surface(ex));
            words.extend(split_words(&ex.reference));
        }
        Self::from_words(words)
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < RESERVED.len() {
            return Err(CorpusError::InvalidVocabulary(
                "missing reserved tokens".into(),
            ));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(CorpusError::InvalidVocabulary(format!(
                    "id {i} must be `{r}`, found `{}`",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CorpusError::InvalidVocabulary(format!(
                    "duplicate token `{t}`"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index
            .get(token)
            .copied()
            .or_else(|| self.index.get(&token.to_lowercase()).copied())
            .unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&token.to_lowercase())
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK)
    }

    /// Sequence from ids, using vocabulary strings as surface.
    pub fn decode(&self, ids: &[u32]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            surface: ids.iter().map(|&i| self.token(i).to_string()).collect(),
        }
    }

    pub fn encode_surface(&self, surface: Vec<String>) -> TokenSequence {
        let ids = surface.iter().map(|s| self.id(s)).collect();
        TokenSequence { ids, surface }
    }
}

fn is_number_glue(c: char) -> bool {
    c == '.' || c == ','
}

/// Splits on whitespace and punctuation. Numbers such as `7.5` or `1,200`
/// stay single tokens. Case is preserved.
pub fn split_words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric()
            || is_number_glue(c)
                && !cur.is_empty()
                && cur.chars().all(|d| d.is_ascii_digit() || is_number_glue(d))
                && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())
        {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        }
        i += 1;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    vocab.encode_surface(split_words(text))
}

/// Joins tokens with single spaces, attaching closing punctuation to the
/// preceding token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    const NO_SPACE_BEFORE: [&str; 9] = [".", ",", "!", "?", ";", ":", ")", "%", "'"];
    const NO_SPACE_AFTER: [&str; 2] = ["(", "$"];
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for t in tokens {
        let t = t.as_ref();
        if let Some(p) = prev {
            if !NO_SPACE_BEFORE.contains(&t) && !NO_SPACE_AFTER.contains(&p) {
                out.push(' ');
            }
        }
        out.push_str(t);
        prev = Some(t);
    }
    out
}

/// The linearized input as surface tokens.
///
/// Layout: `<q> query`, then `<meta> key value` per metadata pair, then the
/// cells. Without highlights every row starts with `<row>` and every cell is
/// `<cell> column value`. With highlights only the highlighted cells are
/// emitted, row-major, as `<cell> column value` segments.
pub fn linearize_surface(example: &TableExample) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(q) = &example.query {
        out.push(QUERY_MARK.to_string());
        out.extend(split_words(q));
    }
    for (k, v) in &example.metadata {
        out.push(META_MARK.to_string());
        out.extend(split_words(k));
        out.extend(split_words(v));
    }
    let push_cell = |out: &mut Vec<String>, r: usize, c: usize| {
        out.push(CELL_MARK.to_string());
        out.extend(split_words(&example.header[c]));
        out.extend(split_words(example.cell(r, c)));
    };
    match example.sorted_highlights() {
        Some(cells) => {
            for (r, c) in cells {
                push_cell(&mut out, r, c);
            }
        }
        None => {
            for r in 0..example.rows.len() {
                out.push(ROW_MARK.to_string());
                for c in 0..example.header.len() {
                    push_cell(&mut out, r, c);
                }
            }
        }
    }
    out
}

/// Linearizes and encodes an example. Words missing from the vocabulary map
/// to the unknown id; see [`TokenSequence::unknown_count`].
pub fn linearize(example: &TableExample, vocab: &Vocabulary) -> TokenSequence {
    vocab.encode_surface(linearize_surface(example))
}

pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Vec<TableExample>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let example: TableExample =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        example
            .validate()
            .map_err(|reason| CorpusError::Invariant {
                line: line_no,
                table_id: example.table_id.clone(),
                reason,
            })?;
        out.push(example);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TableExample>, CorpusError> {
    parse_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset<W: Write>(mut w: W, examples: &[TableExample]) -> Result<(), CorpusError> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[TableExample]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, examples)?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Person,
    Country,
    Year,
    Score,
}

impl ColumnKind {
    pub fn header(self) -> &'static str {
        match self {
            ColumnKind::Person => "Athlete",
            ColumnKind::Country => "Country",
            ColumnKind::Year => "Year",
            ColumnKind::Score => "Score",
        }
    }
}

/// Question/answer templates. Each needs the person column plus the listed
/// answer columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Country,
    Year,
    Score,
    CountryYear,
    YearScore,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::Country,
        TemplateKind::Year,
        TemplateKind::Score,
        TemplateKind::CountryYear,
        TemplateKind::YearScore,
    ];

    pub fn answer_columns(self) -> &'static [ColumnKind] {
        match self {
            TemplateKind::Country => &[ColumnKind::Country],
            TemplateKind::Year => &[ColumnKind::Year],
            TemplateKind::Score => &[ColumnKind::Score],
            TemplateKind::CountryYear => &[ColumnKind::Country, ColumnKind::Year],
            TemplateKind::YearScore => &[ColumnKind::Year, ColumnKind::Score],
        }
    }

    fn render(self, person: &str, answers: &[&str]) -> (String, String) {
        match self {
            TemplateKind::Country => (
                format!("Which country did {person} represent?"),
                format!("{person} represented {}.", answers[0]),
            ),
            TemplateKind::Year => (
                format!("In which year did {person} compete?"),
                format!("{person} competed in {}.", answers[0]),
            ),
            TemplateKind::Score => (
                format!("What score did {person} receive?"),
                format!("{person} received a score of {}.", answers[0]),
            ),
            TemplateKind::CountryYear => (
                format!("Which country did {person} represent, and when?"),
                format!("{person} represented {} in {}.", answers[0], answers[1]),
            ),
            TemplateKind::YearScore => (
                format!("When did {person} compete and what was the score?"),
                format!("In {}, {person} scored {}.", answers[0], answers[1]),
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazetteerSizes {
    pub persons: usize,
    pub countries: usize,
    pub years: usize,
    pub scores: usize,
}

impl Default for GazetteerSizes {
    fn default() -> Self {
        Self {
            persons: 60,
            countries: 24,
            years: 40,
            scores: 40,
        }
    }
}

/// Parameters of the synthetic corpus.
///
/// ```toml
/// seed = 7
/// n_examples = 500
/// highlight_queried = false
/// templates = ["country", "year", "score", "country_year", "year_score"]
///
/// [rows]
/// min = 3
/// max = 8
///
/// [columns]      # includes the person column
/// min = 4
/// max = 4
///
/// [gazetteer]
/// persons = 60
/// countries = 24
/// years = 40
/// scores = 40
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_examples: usize,
    pub rows: SizeRange,
    pub columns: SizeRange,
    #[serde(default)]
    pub gazetteer: GazetteerSizes,
    #[serde(default = "default_templates")]
    pub templates: Vec<TemplateKind>,
    /// Emit the queried cells as `highlighted_cells` (highlight-only input).
    #[serde(default)]
    pub highlight_queried: bool,
}

fn default_templates() -> Vec<TemplateKind> {
    TemplateKind::ALL.to_vec()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_examples: 500,
            rows: SizeRange { min: 3, max: 8 },
            columns: SizeRange { min: 4, max: 4 },
            gazetteer: GazetteerSizes::default(),
            templates: default_templates(),
            highlight_queried: false,
        }
    }
}

const FIRST_NAMES: [&str; 16] = [
    "Anna", "Boris", "Carla", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Ingrid", "Jonas",
    "Katja", "Lars", "Mara", "Nils", "Olga", "Pavel",
];
const LAST_NAMES: [&str; 16] = [
    "Berg",
    "Costa",
    "Dahl",
    "Eriksen",
    "Fischer",
    "Gruber",
    "Horvat",
    "Ivanova",
    "Jansen",
    "Kowalski",
    "Lindqvist",
    "Moreau",
    "Novak",
    "Okafor",
    "Petrov",
    "Quist",
];
const COUNTRIES: [&str; 32] = [
    "Sweden",
    "Norway",
    "Denmark",
    "Finland",
    "Iceland",
    "Estonia",
    "Latvia",
    "Poland",
    "Germany",
    "Austria",
    "Hungary",
    "Croatia",
    "Italy",
    "Spain",
    "Portugal",
    "France",
    "Belgium",
    "Ireland",
    "Canada",
    "Mexico",
    "Brazil",
    "Chile",
    "Kenya",
    "Japan",
    "New Zealand",
    "South Korea",
    "Costa Rica",
    "Sri Lanka",
    "South Africa",
    "United States",
    "Czech Republic",
    "Saudi Arabia",
];
const EVENTS: [&str; 6] = [
    "Regional Games",
    "Coastal Open",
    "Winter Cup",
    "Summer Classic",
    "Grand Prix",
    "Invitational",
];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        if self.rows.min == 0 || self.rows.min > self.rows.max {
            return bad("rows range must satisfy 0 < min <= max");
        }
        if self.columns.min < 2 || self.columns.min > self.columns.max || self.columns.max > 4 {
            return bad("columns range must satisfy 2 <= min <= max <= 4");
        }
        let g = &self.gazetteer;
        if g.persons < self.rows.max || g.persons > FIRST_NAMES.len() * LAST_NAMES.len() {
            return bad("gazetteer.persons must be in [rows.max, 256]");
        }
        if g.countries < 2 || g.countries > COUNTRIES.len() {
            return bad("gazetteer.countries must be in [2, 32]");
        }
        if g.years < 2 || g.years > 60 {
            return bad("gazetteer.years must be in [2, 60]");
        }
        if g.scores < 2 || g.scores > 50 {
            return bad("gazetteer.scores must be in [2, 50]");
        }
        if self.templates.is_empty() {
            return bad("at least one template is required");
        }
        if !self
            .templates
            .iter()
            .any(|t| t.answer_columns().len() < self.columns.max)
        {
            return bad("no template fits within columns.max");
        }
        Ok(())
    }

    fn gazetteers(&self) -> Gazetteers {
        // Person names interleave first/last so a small gazetteer still
        // varies both name parts.
        let mut persons = Vec::new();
        'outer: for k in 0..LAST_NAMES.len() {
            for (i, first) in FIRST_NAMES.iter().enumerate() {
                if persons.len() == self.gazetteer.persons {
                    break 'outer;
                }
                persons.push(format!(
                    "{first} {}",
                    LAST_NAMES[(i + k) % LAST_NAMES.len()]
                ));
            }
        }
        Gazetteers {
            persons,
            countries: COUNTRIES[..self.gazetteer.countries]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            years: (0..self.gazetteer.years)
                .map(|k| (1960 + k).to_string())
                .collect(),
            scores: (0..self.gazetteer.scores)
                .map(|k| format!("{}.{}", 5 + k / 10, k % 10))
                .collect(),
        }
    }
}

struct Gazetteers {
    persons: Vec<String>,
    countries: Vec<String>,
    years: Vec<String>,
    scores: Vec<String>,
}

/// A generated example with the cells its reference was built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticExample {
    pub example: TableExample,
    pub template: TemplateKind,
    /// Person cell followed by answer cells, as (row, col).
    pub queried_cells: Vec<(usize, usize)>,
}

pub fn generate_synthetic_detailed(
    spec: &SyntheticSpec,
) -> Result<Vec<SyntheticExample>, CorpusError> {
    spec.validate()?;
    let gaz = spec.gazetteers();
    let optional = [ColumnKind::Country, ColumnKind::Year, ColumnKind::Score];
    let mut out = Vec::with_capacity(spec.n_examples);
    for i in 0..spec.n_examples {
        let table_id = format!("synth-{}-{i:06}", spec.seed);
        let mut rng = seed::rng_for(spec.seed, &["synthetic", &i.to_string()]);

        // Pick a column set that admits at least one enabled template.
        let (columns, template) = loop {
            let n_cols = rng.gen_range(spec.columns.min..=spec.columns.max);
            let mut extra = optional.to_vec();
            extra.shuffle(&mut rng);
            extra.truncate(n_cols - 1);
            extra.sort();
            let fits: Vec<TemplateKind> = spec
                .templates
                .iter()
                .copied()
                .filter(|t| t.answer_columns().iter().all(|c| extra.contains(c)))
                .collect();
            if let Some(&t) = fits.choose(&mut rng) {
                let mut cols = vec![ColumnKind::Person];
                cols.extend(extra);
                break (cols, t);
            }
        };

        let n_rows = rng.gen_range(spec.rows.min..=spec.rows.max);
        let persons: Vec<&String> = gaz.persons.choose_multiple(&mut rng, n_rows).collect();
        let mut rows = Vec::with_capacity(n_rows);
        for person in &persons {
            let row = columns
                .iter()
                .map(|kind| match kind {
                    ColumnKind::Person => (*person).clone(),
                    ColumnKind::Country => gaz.countries.choose(&mut rng).unwrap().clone(),
                    ColumnKind::Year => gaz.years.choose(&mut rng).unwrap().clone(),
                    ColumnKind::Score => gaz.scores.choose(&mut rng).unwrap().clone(),
                })
                .collect::<Vec<_>>();
            rows.push(row);
        }

        let target_row = rng.gen_range(0..n_rows);
        let col_of = |k: ColumnKind| columns.iter().position(|c| *c == k).unwrap();
        let mut queried = vec![(target_row, 0)];
        let answers: Vec<&str> = template
            .answer_columns()
            .iter()
            .map(|&k| {
                let c = col_of(k);
                queried.push((target_row, c));
                rows[target_row][c].as_str()
            })
            .collect();
        let (question, reference) = template.render(&rows[target_row][0], &answers);

        let mut metadata = BTreeMap::new();
        metadata.insert(
            "title".to_string(),
            EVENTS.choose(&mut rng).unwrap().to_string(),
        );

        let example = TableExample {
            table_id,
            header: columns.iter().map(|c| c.header().to_string()).collect(),
            rows,
            metadata,
            query: Some(question),
            highlighted_cells: spec.highlight_queried.then(|| queried.clone()),
            reference,
        };
        debug_assert!(example.validate().is_ok());
        out.push(SyntheticExample {
            example,
            template,
            queried_cells: queried,
        });
    }
    Ok(out)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<TableExample>, CorpusError> {
    Ok(generate_synthetic_detailed(spec)?
        .into_iter()
        .map(|s| s.example)
        .collect())
}
