use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use r2d2::contamination::{build_variants, pair_parallels, reliability_table, ContaminationPlan};
use r2d2::corpus::{generate_synthetic, load_dataset, save_dataset, SyntheticSpec, Vocabulary};
use r2d2::entities::recognizer_by_name;
use r2d2::eval::{save_scatter, Averaging, NerMetricReport};
use r2d2::exec::Execution;
use r2d2::model::{ModelConfig, Seq2Seq};
use r2d2::perturb::{
    group_by_source, load_perturbations, perturb_corpus, save_perturbations, CandidateSource,
    KnowledgeSource, LabelConvention, Method, ModelSampling, ModelSource, PerturbedSentence,
    SizePolicy,
};
use r2d2::trainer::{
    evaluate_predictions, generate, prepare_r2d2_groups, prepare_warmup_groups, r2d2_finetune,
    warmup_finetune, write_generations, Discrimination, TrainConfig, TrainLog, TrainMode,
};

use crate::layers::{resolve, Flags};
use crate::manifest::{default_path, RunManifest};
use crate::{CliError, Common};

fn exec(common: &Common) -> Execution {
    if common.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn manifest_path(common: &Common, primary: &Path) -> PathBuf {
    common
        .manifest
        .clone()
        .unwrap_or_else(|| default_path(primary))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

fn finish(w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.into_inner()
        .map_err(|e| CliError::io(path, e.into_error()))?
        .sync_all()
        .map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("plain data serializes")
}

// ----------------------------------------------------------------- synth

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output dataset (JSON lines).
    #[arg(long, value_name = "FILE", env = "R2D2_SYNTH_OUT")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of examples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    rows_min: Option<usize>,
    #[arg(long)]
    rows_max: Option<usize>,
    /// Mark the queried cells as highlighted.
    #[arg(long)]
    highlight: bool,
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut flags = Flags::new();
    flags
        .set("seed", a.seed)
        .set("n_examples", a.n)
        .set("rows.min", a.rows_min)
        .set("rows.max", a.rows_max)
        .set("highlight_queried", a.highlight.then_some(true));
    let spec: SyntheticSpec =
        resolve(&SyntheticSpec::default(), a.common.config.as_deref(), flags)?;
    let mut m = RunManifest::start("synth", &spec);
    m.seed("seed", spec.seed);
    let examples = generate_synthetic(&spec)?;
    ensure_parent(&a.out)?;
    save_dataset(&a.out, &examples)?;
    m.output("dataset", &a.out)?;
    m.summary = serde_json::json!({ "examples": examples.len() });
    m.finish(&manifest_path(&a.common, &a.out))
}

// ----------------------------------------------------------------- perturb

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSettings {
    pub method: Method,
    pub size: SizePolicy,
    pub seed: u64,
    pub labels: LabelConvention,
    pub recognizer: String,
    pub sampling: ModelSampling,
}

impl Default for PerturbSettings {
    fn default() -> Self {
        Self {
            method: Method::Knowledge,
            size: SizePolicy::Medium,
            seed: 0,
            labels: LabelConvention::Prefix,
            recognizer: "table".into(),
            sampling: ModelSampling::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    common: Common,
    /// Input dataset.
    #[arg(long, value_name = "FILE", env = "R2D2_DATA")]
    data: PathBuf,
    /// Output perturbation records (JSON lines).
    #[arg(long, value_name = "FILE", env = "R2D2_PERTURB_OUT")]
    out: PathBuf,
    #[arg(long, value_parser = ["knowledge", "model"])]
    method: Option<String>,
    #[arg(long, value_parser = ["xsmall", "small", "medium", "large", "full"])]
    size: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Token label scheme for contradictory sentences.
    #[arg(long, value_parser = ["prefix", "replaced_only"])]
    labels: Option<String>,
    /// Entity recognizer: table, gazetteer or file:<path>.
    #[arg(long)]
    recognizer: Option<String>,
    /// Generator checkpoint, required for the model method.
    #[arg(long, value_name = "FILE", env = "R2D2_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Nucleus mass for model-based sampling.
    #[arg(long)]
    top_p: Option<f64>,
    /// Continuations sampled per target entity.
    #[arg(long)]
    k_samples: Option<usize>,
}

pub fn perturb(a: PerturbArgs) -> Result<(), CliError> {
    let mut flags = Flags::new();
    flags
        .set("method", a.method)
        .set("size", a.size)
        .set("seed", a.seed)
        .set("labels", a.labels)
        .set("recognizer", a.recognizer)
        .set("sampling.top_p", a.top_p)
        .set("sampling.k_samples", a.k_samples);
    let cfg: PerturbSettings = resolve(
        &PerturbSettings::default(),
        a.common.config.as_deref(),
        flags,
    )?;
    let mut m = RunManifest::start("perturb", &cfg);
    m.seed("seed", cfg.seed).input("data", &a.data)?;
    let examples = load_dataset(&a.data)?;
    let recognizer = recognizer_by_name(&cfg.recognizer, &examples)?;

    let loaded = match (&cfg.method, &a.checkpoint) {
        (Method::Model, None) => {
            return Err(CliError::Config(
                "--checkpoint is required for --method model".into(),
            ))
        }
        (Method::Model, Some(path)) => {
            m.input("checkpoint", path)?;
            Some(Seq2Seq::load_checkpoint(path)?)
        }
        (Method::Knowledge, _) => None,
    };
    let vocab = match &loaded {
        Some((_, Some(v))) => v.clone(),
        _ => Vocabulary::from_corpus(&examples),
    };
    let model_source;
    let source: &dyn CandidateSource = match &loaded {
        Some((model, _)) => {
            model_source = ModelSource {
                model,
                vocab: &vocab,
                recognizer: recognizer.as_ref(),
                sampling: cfg.sampling,
            };
            &model_source
        }
        None => &KnowledgeSource,
    };
    let per_example = perturb_corpus(
        &examples,
        source,
        cfg.size,
        recognizer.as_ref(),
        &vocab,
        cfg.labels,
        cfg.seed,
        exec(&a.common),
    )?;
    let mut diagnostics: BTreeMap<String, usize> = BTreeMap::new();
    for p in &per_example {
        if let Some(d) = p.diagnostic {
            let key = to_json(&d).as_str().unwrap_or("other").to_string();
            *diagnostics.entry(key).or_default() += 1;
        }
    }
    let sentences: Vec<PerturbedSentence> =
        per_example.into_iter().flat_map(|p| p.sentences).collect();
    ensure_parent(&a.out)?;
    save_perturbations(&a.out, &sentences)?;
    m.output("perturbations", &a.out)?;
    m.summary = serde_json::json!({
        "examples": examples.len(),
        "sentences": sentences.len(),
        "diagnostics": diagnostics,
    });
    m.finish(&manifest_path(&a.common, &a.out))
}

// ----------------------------------------------------------------- training

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupSettings {
    pub train: TrainConfig,
    /// `vocab_size` is taken from the data and ignored here.
    pub model: ModelConfig,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training log (JSON lines).
    #[arg(long, value_name = "FILE", env = "R2D2_TRAIN_LOG")]
    log: Option<PathBuf>,
    /// Directory for per-epoch checkpoints.
    #[arg(long, value_name = "DIR", env = "R2D2_CHECKPOINT_DIR")]
    checkpoint_dir: Option<PathBuf>,
}

impl TrainFlags {
    fn apply(&self, flags: &mut Flags) {
        flags
            .set("train.epochs", self.epochs)
            .set("train.learning_rate", self.lr)
            .set("train.batch_size", self.batch_size)
            .set("train.seed", self.seed)
            .set("train.checkpoint_dir", self.checkpoint_dir.clone());
    }

    fn log(&self) -> Result<TrainLog, CliError> {
        match &self.log {
            Some(path) => Ok(TrainLog::to_writer(Box::new(create(path)?))),
            None => Ok(TrainLog::in_memory()),
        }
    }
}

#[derive(Debug, Args)]
pub struct WarmupArgs {
    #[command(flatten)]
    common: Common,
    /// Training dataset.
    #[arg(long, value_name = "FILE", env = "R2D2_DATA")]
    data: PathBuf,
    /// Output checkpoint.
    #[arg(long, value_name = "FILE", env = "R2D2_CHECKPOINT_OUT")]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

pub fn train_warmup(a: WarmupArgs) -> Result<(), CliError> {
    let mut flags = Flags::new();
    a.train.apply(&mut flags);
    flags
        .set("model.seed", a.train.seed)
        .set("model.d_model", a.d_model)
        .set("model.n_heads", a.n_heads)
        .set("model.d_ff", a.d_ff)
        .set("model.encoder_layers", a.encoder_layers)
        .set("model.decoder_layers", a.decoder_layers)
        .set("model.dropout", a.dropout);
    let default = WarmupSettings {
        train: TrainConfig::default(),
        model: ModelConfig::new(0),
    };
    let mut cfg: WarmupSettings = resolve(&default, a.common.config.as_deref(), flags)?;
    cfg.train.mode = TrainMode::Warmup;

    let examples = load_dataset(&a.data)?;
    let vocab = Vocabulary::from_corpus(&examples);
    cfg.model.vocab_size = vocab.len();
    let mut m = RunManifest::start("train-warmup", &cfg);
    m.seed("train", cfg.train.seed)
        .seed("model", cfg.model.seed)
        .input("data", &a.data)?;

    let mut model = Seq2Seq::new(cfg.model.clone())?;
    let groups = prepare_warmup_groups(&examples, &vocab, &cfg.model)?;
    let mut log = a.train.log()?;
    let summary = warmup_finetune(&mut model, &groups, &cfg.train, exec(&a.common), &mut log)?;
    ensure_parent(&a.out)?;
    model.save_checkpoint(&a.out, Some(&vocab))?;
    m.output("checkpoint", &a.out)?;
    if let Some(p) = &a.train.log {
        m.output("log", p)?;
    }
    m.summary = to_json(&summary);
    m.finish(&manifest_path(&a.common, &a.out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct R2d2Settings {
    pub train: TrainConfig,
    /// Seed for the freshly initialized discrimination heads
    /// [default: train seed + 1000].
    pub head_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct R2d2Args {
    #[command(flatten)]
    common: Common,
    /// Training dataset.
    #[arg(long, value_name = "FILE", env = "R2D2_DATA")]
    data: PathBuf,
    /// Perturbation records covering the training (and held-out) examples.
    #[arg(long, value_name = "FILE", env = "R2D2_PERTURBATIONS")]
    perturbations: Option<PathBuf>,
    /// Warmup checkpoint to start from.
    #[arg(long, value_name = "FILE", env = "R2D2_INIT")]
    init: Option<PathBuf>,
    /// Held-out dataset scored after every epoch.
    #[arg(long, value_name = "FILE", env = "R2D2_HELDOUT")]
    heldout: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long, value_name = "FILE", env = "R2D2_CHECKPOINT_OUT")]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Weight of the generation terms against the discrimination terms.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = ["none", "sentence", "token"])]
    discrimination: Option<String>,
    /// Disable the unlikelihood term.
    #[arg(long)]
    no_unlikelihood: bool,
    /// Contradictory sentences kept per example.
    #[arg(long, value_parser = ["xsmall", "small", "medium", "large", "full"])]
    size: Option<String>,
    #[arg(long)]
    head_seed: Option<u64>,
}

pub fn train_r2d2(a: R2d2Args) -> Result<(), CliError> {
    let mut flags = Flags::new();
    a.train.apply(&mut flags);
    flags
        .set("train.lambda", a.lambda)
        .set("train.discrimination", a.discrimination)
        .set("train.unlikelihood", a.no_unlikelihood.then_some(false))
        .set("train.size", a.size)
        .set("train.perturbations", a.perturbations.clone())
        .set("train.init_checkpoint", a.init.clone())
        .set("head_seed", a.head_seed);
    let default = R2d2Settings {
        train: TrainConfig::r2d2(),
        head_seed: None,
    };
    let mut cfg: R2d2Settings = resolve(&default, a.common.config.as_deref(), flags)?;
    cfg.train.mode = TrainMode::R2d2;
    let head_seed = cfg.head_seed.unwrap_or(cfg.train.seed.wrapping_add(1000));
    cfg.head_seed = Some(head_seed);
    let init = cfg
        .train
        .init_checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("a warmup checkpoint is required (--init)".into()))?;
    let pert_path = cfg
        .train
        .perturbations
        .clone()
        .ok_or(r2d2::trainer::TrainError::MissingPerturbations)?;

    let mut m = RunManifest::start("train-r2d2", &cfg);
    m.seed("train", cfg.train.seed).seed("heads", head_seed);
    m.input("data", &a.data)?
        .input("init", &init)?
        .input("perturbations", &pert_path)?;
    let d = cfg.train.discrimination;
    let (mut model, vocab) = Seq2Seq::load_with_fresh_heads(
        &init,
        head_seed,
        d == Discrimination::Sentence,
        d == Discrimination::Token,
    )?;
    let vocab = vocab.ok_or_else(|| {
        CliError::Config(format!("{}: checkpoint has no vocabulary", init.display()))
    })?;
    let examples = load_dataset(&a.data)?;
    let store = group_by_source(load_perturbations(&pert_path, &vocab)?);
    let groups = prepare_r2d2_groups(&examples, &vocab, &store, &cfg.train, &model.config)?;
    let heldout = match &a.heldout {
        Some(p) => {
            m.input("heldout", p)?;
            Some(prepare_r2d2_groups(
                &load_dataset(p)?,
                &vocab,
                &store,
                &cfg.train,
                &model.config,
            )?)
        }
        None => None,
    };
    let mut log = a.train.log()?;
    let summary = r2d2_finetune(
        &mut model,
        &groups,
        heldout.as_deref(),
        &cfg.train,
        exec(&a.common),
        &mut log,
    )?;
    ensure_parent(&a.out)?;
    model.save_checkpoint(&a.out, Some(&vocab))?;
    m.output("checkpoint", &a.out)?;
    if let Some(p) = &a.train.log {
        m.output("log", p)?;
    }
    m.summary = to_json(&summary);
    m.finish(&manifest_path(&a.common, &a.out))
}

// ----------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub metrics: Vec<String>,
    pub recognizer: String,
    pub averaging: Averaging,
    pub system: String,
    pub split: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            metrics: vec!["ner".into(), "bleu".into()],
            recognizer: "table".into(),
            averaging: Averaging::Micro,
            system: "system".into(),
            split: "test".into(),
        }
    }
}

/// One row of the results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub system: String,
    pub split: String,
    pub examples: usize,
    pub bleu: Option<f64>,
    pub ner: Option<NerMetricReport>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset with the references.
    #[arg(long, value_name = "FILE", env = "R2D2_DATA")]
    data: PathBuf,
    /// Predictions: one line per example, plain text or JSON with a `prediction` field.
    #[arg(
        long,
        value_name = "FILE",
        env = "R2D2_PRED",
        conflicts_with = "checkpoint",
        required_unless_present = "checkpoint"
    )]
    pred: Option<PathBuf>,
    /// Generate predictions greedily from this checkpoint instead.
    #[arg(long, value_name = "FILE", env = "R2D2_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Where to write generated predictions (with --checkpoint).
    #[arg(long, value_name = "FILE", env = "R2D2_GENERATIONS_OUT")]
    generations: Option<PathBuf>,
    /// Output report (JSON).
    #[arg(long, value_name = "FILE", env = "R2D2_REPORT_OUT")]
    out: PathBuf,
    /// Comma-separated subset of ner,bleu.
    #[arg(long, value_delimiter = ',', value_parser = ["ner", "bleu"])]
    metrics: Option<Vec<String>>,
    /// Entity recognizer: table, gazetteer or file:<path>.
    #[arg(long)]
    recognizer: Option<String>,
    #[arg(long, value_parser = ["micro", "macro"])]
    averaging: Option<String>,
    /// System name recorded in the report.
    #[arg(long)]
    system: Option<String>,
    /// Split name recorded in the report.
    #[arg(long)]
    split: Option<String>,
}

fn read_predictions(path: &Path) -> Result<Vec<String>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let parsed = serde_json::from_str::<serde_json::Value>(&line).ok();
        match parsed
            .as_ref()
            .and_then(|v| v.get("prediction"))
            .and_then(|p| p.as_str())
        {
            Some(p) => out.push(p.to_string()),
            None => out.push(line),
        }
    }
    Ok(out)
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let mut flags = Flags::new();
    flags
        .set("metrics", a.metrics)
        .set("recognizer", a.recognizer)
        .set("averaging", a.averaging)
        .set("system", a.system)
        .set("split", a.split);
    let cfg: EvalSettings = resolve(&EvalSettings::default(), a.common.config.as_deref(), flags)?;
    if let Some(bad) = cfg
        .metrics
        .iter()
        .find(|m| !["ner", "bleu"].contains(&m.as_str()))
    {
        return Err(CliError::Config(format!(
            "unknown metric `{bad}` (expected ner, bleu)"
        )));
    }
    let mut m = RunManifest::start("evaluate", &cfg);
    m.input("data", &a.data)?;
    let examples = load_dataset(&a.data)?;
    let ex = exec(&a.common);
    let predictions = match (&a.pred, &a.checkpoint) {
        (Some(p), _) => {
            m.input("predictions", p)?;
            read_predictions(p)?
        }
        (None, Some(c)) => {
            m.input("checkpoint", c)?;
            let (model, vocab) = Seq2Seq::load_checkpoint(c)?;
            let vocab = vocab.ok_or_else(|| {
                CliError::Config(format!("{}: checkpoint has no vocabulary", c.display()))
            })?;
            let preds = generate(&model, &vocab, &examples, ex)?;
            if let Some(g) = &a.generations {
                let mut w = create(g)?;
                write_generations(&mut w, &examples, &preds)?;
                finish(w, g)?;
                m.output("generations", g)?;
            }
            preds
        }
        (None, None) => {
            return Err(CliError::Config(
                "either --pred or --checkpoint is required".into(),
            ))
        }
    };
    let recognizer = recognizer_by_name(&cfg.recognizer, &examples)?;
    let report = evaluate_predictions(
        &examples,
        predictions,
        recognizer.as_ref(),
        cfg.averaging,
        ex,
    )?;
    let wants = |name: &str| cfg.metrics.iter().any(|m| m == name);
    let row = EvaluationRow {
        system: cfg.system.clone(),
        split: cfg.split.clone(),
        examples: examples.len(),
        bleu: wants("bleu").then_some(report.bleu),
        ner: wants("ner").then_some(report.ner),
    };
    let mut w = create(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &row).expect("report serializes");
    writeln!(w).map_err(|e| CliError::io(&a.out, e))?;
    finish(w, &a.out)?;
    m.output("report", &a.out)?;
    m.finish(&manifest_path(&a.common, &a.out))
}

// ----------------------------------------------------------------- contaminate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContaminateSettings {
    pub plan: ContaminationPlan,
    pub recognizer: String,
    pub averaging: Averaging,
    /// Size policy used when perturbations are generated on the fly.
    pub size: SizePolicy,
}

impl Default for ContaminateSettings {
    fn default() -> Self {
        Self {
            plan: ContaminationPlan::default(),
            recognizer: "table".into(),
            averaging: Averaging::Micro,
            size: SizePolicy::Full,
        }
    }
}

#[derive(Debug, Args)]
pub struct ContaminateArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset whose references are contaminated.
    #[arg(long, value_name = "FILE", env = "R2D2_DATA")]
    data: PathBuf,
    /// Perturbation records to draw unfaithful parallels from
    /// [default: knowledge-based, generated in place].
    #[arg(long, value_name = "FILE", env = "R2D2_PERTURBATIONS")]
    perturbations: Option<PathBuf>,
    /// Output reliability table (JSON).
    #[arg(long, value_name = "FILE", env = "R2D2_CONTAMINATE_OUT")]
    out: PathBuf,
    /// Tab-separated copy of the table.
    #[arg(long, value_name = "FILE")]
    tsv: Option<PathBuf>,
    /// Scatter data: one (variant, metric, value) JSON line per point.
    #[arg(long, value_name = "FILE")]
    scatter: Option<PathBuf>,
    /// Comma-separated contamination percentages.
    #[arg(long, value_delimiter = ',')]
    percent: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Entity recognizer: table, gazetteer or file:<path>.
    #[arg(long)]
    recognizer: Option<String>,
    #[arg(long, value_parser = ["micro", "macro"])]
    averaging: Option<String>,
}

pub fn contaminate(a: ContaminateArgs) -> Result<(), CliError> {
    let mut flags = Flags::new();
    flags
        .set("plan.percentages", a.percent)
        .set("plan.seed", a.seed)
        .set("recognizer", a.recognizer)
        .set("averaging", a.averaging);
    let cfg: ContaminateSettings = resolve(
        &ContaminateSettings::default(),
        a.common.config.as_deref(),
        flags,
    )?;
    cfg.plan.validate()?;
    let mut m = RunManifest::start("contaminate", &cfg);
    m.seed("plan", cfg.plan.seed).input("data", &a.data)?;
    let examples = load_dataset(&a.data)?;
    let vocab = Vocabulary::from_corpus(&examples);
    let recognizer = recognizer_by_name(&cfg.recognizer, &examples)?;
    let ex = exec(&a.common);
    let sentences = match &a.perturbations {
        Some(p) => {
            m.input("perturbations", p)?;
            load_perturbations(p, &vocab)?
        }
        None => perturb_corpus(
            &examples,
            &KnowledgeSource,
            cfg.size,
            recognizer.as_ref(),
            &vocab,
            LabelConvention::Prefix,
            cfg.plan.seed,
            ex,
        )?
        .into_iter()
        .flat_map(|p| p.sentences)
        .collect(),
    };
    let parallels = pair_parallels(&examples, &group_by_source(sentences));
    let references: Vec<String> = examples.iter().map(|e| e.reference.clone()).collect();
    let variants = build_variants(&references, &parallels, &cfg.plan)?;
    let table = reliability_table(
        &examples,
        &variants,
        recognizer.as_ref(),
        cfg.averaging,
        None,
        ex,
    )?;

    let mut w = create(&a.out)?;
    serde_json::to_writer_pretty(&mut w, &table).expect("table serializes");
    writeln!(w).map_err(|e| CliError::io(&a.out, e))?;
    finish(w, &a.out)?;
    m.output("table", &a.out)?;
    if let Some(p) = &a.tsv {
        ensure_parent(p)?;
        std::fs::write(p, table.to_tsv()).map_err(|e| CliError::io(p, e))?;
        m.output("tsv", p)?;
    }
    if let Some(p) = &a.scatter {
        let names: Vec<String> = table
            .rows
            .iter()
            .map(|r| format!("{}%", r.percentage))
            .collect();
        let metrics: Vec<String> = table
            .rows
            .first()
            .map(|r| r.metrics.keys().cloned().collect())
            .unwrap_or_default();
        let series: BTreeMap<String, Vec<f64>> = metrics
            .into_iter()
            .map(|k| (k.clone(), table.series(&k)))
            .collect();
        ensure_parent(p)?;
        save_scatter(p, &names, &series)?;
        m.output("scatter", p)?;
    }
    m.summary = serde_json::json!({
        "references": table.n_references,
        "excluded": table.excluded,
        "verdicts": table.verdicts,
    });
    m.finish(&manifest_path(&a.common, &a.out))
}

// ----------------------------------------------------------------- report

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Evaluation reports written by `evaluate`.
    #[arg(long = "input", value_name = "FILE", required = true)]
    inputs: Vec<PathBuf>,
    /// Output table (tab-separated, one row per system and split).
    #[arg(long, value_name = "FILE", env = "R2D2_REPORT_TABLE")]
    out: PathBuf,
    /// Scatter data: one (variant, metric, value) JSON line per point.
    #[arg(long, value_name = "FILE")]
    scatter: Option<PathBuf>,
}

const REPORT_METRICS: [&str; 6] = ["bleu", "rc", "ri", "rm", "mi", "mm"];

fn row_values(row: &EvaluationRow) -> [Option<f64>; 6] {
    let ner = row.ner.as_ref();
    [
        row.bleu,
        ner.map(|n| n.rc),
        ner.map(|n| n.ri),
        ner.map(|n| n.rm),
        ner.map(|n| n.mi),
        ner.map(|n| n.mm),
    ]
}

pub fn report(a: ReportArgs) -> Result<(), CliError> {
    let mut m = RunManifest::start("report", &serde_json::json!({ "inputs": a.inputs }));
    let mut rows = Vec::new();
    for (i, path) in a.inputs.iter().enumerate() {
        m.input(&format!("report_{i}"), path)?;
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let row: EvaluationRow = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    let mut w = create(&a.out)?;
    let io = |e| CliError::io(&a.out, e);
    writeln!(w, "system\tsplit\texamples\t{}", REPORT_METRICS.join("\t")).map_err(io)?;
    for row in &rows {
        let cells: Vec<String> = row_values(row)
            .iter()
            .map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()))
            .collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            row.system,
            row.split,
            row.examples,
            cells.join("\t")
        )
        .map_err(io)?;
    }
    finish(w, &a.out)?;
    m.output("table", &a.out)?;
    if let Some(p) = &a.scatter {
        let names: Vec<String> = rows
            .iter()
            .map(|r| format!("{}/{}", r.system, r.split))
            .collect();
        let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (k, name) in REPORT_METRICS.iter().enumerate() {
            let values: Option<Vec<f64>> = rows.iter().map(|r| row_values(r)[k]).collect();
            if let Some(v) = values {
                series.insert(name.to_string(), v);
            }
        }
        ensure_parent(p)?;
        save_scatter(p, &names, &series)?;
        m.output("scatter", p)?;
    }
    m.finish(&manifest_path(&a.common, &a.out))
}
