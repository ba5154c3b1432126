//! Warmup (likelihood only) and R2D2 fine-tuning loops.
//!
//! Each training instance group holds one input and its targets: the
//! entailed reference first, then any contradictory sentences. Per-group
//! gradients are computed independently (in parallel under the `parallel`
//! feature) and summed in a fixed order, so results do not depend on the
//! execution mode.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{detokenize, linearize, tokenize, TableExample, Vocabulary};
use crate::entities::EntityRecognizer;
use crate::eval::{corpus_bleu, corpus_ner_metrics, ranks, Averaging, EvalError, NerMetricReport};
use crate::exec::Execution;
use crate::losses::{
    nll_grad, nll_loss, r2d2_weights, rd_sentence_grad, rd_sentence_loss, rd_token_grad,
    rd_token_loss, unlikelihood_grad, unlikelihood_loss, LossBreakdown, LossError, TokenReduction,
};
use crate::model::tape::{Gradients, ParamStore, Tape};
use crate::model::tensor::Tensor;
use crate::model::{greedy_decode, teacher_forcing_pair, Mode, ModelConfig, ModelError, Seq2Seq};
use crate::perturb::{LabelConvention, Method, PerturbedSentence, SizePolicy};
use crate::seed::{self, Rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: u64,
        detail: String,
    },
    #[error("example `{id}`: {reason}")]
    BadExample { id: String, reason: String },
    #[error("perturbation store required for R2D2 training")]
    MissingPerturbations,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Warmup,
    R2d2,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discrimination {
    None,
    Sentence,
    #[default]
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Everything that determines a training run besides data and model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub discrimination: Discrimination,
    pub unlikelihood: bool,
    pub method: Method,
    pub size: SizePolicy,
    pub label_convention: LabelConvention,
    pub token_reduction: TokenReduction,
    /// Stop discrimination gradients at the heads instead of the trunk.
    pub detach_heads: bool,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub adam: AdamConfig,
    pub checkpoint_dir: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub perturbations: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Warmup,
            epochs: 15,
            batch_size: 8,
            learning_rate: 5e-5,
            lambda: 0.5,
            discrimination: Discrimination::Token,
            unlikelihood: true,
            method: Method::Knowledge,
            size: SizePolicy::Medium,
            label_convention: LabelConvention::Prefix,
            token_reduction: TokenReduction::Sum,
            detach_heads: false,
            max_grad_norm: None,
            seed: 0,
            adam: AdamConfig::default(),
            checkpoint_dir: None,
            init_checkpoint: None,
            perturbations: None,
        }
    }
}

impl TrainConfig {
    pub fn r2d2() -> Self {
        Self {
            mode: TrainMode::R2d2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if let Some(g) = self.max_grad_norm {
            if g <= 0.0 {
                return bad("max_grad_norm must be positive");
            }
        }
        if self.mode == TrainMode::R2d2
            && self.discrimination == Discrimination::None
            && !self.unlikelihood
        {
            return bad("r2d2 mode needs discrimination or unlikelihood enabled");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn settings(&self) -> LossSettings {
        LossSettings {
            mode: self.mode,
            lambda: self.lambda,
            discrimination: if self.mode == TrainMode::Warmup {
                Discrimination::None
            } else {
                self.discrimination
            },
            unlikelihood: self.mode == TrainMode::R2d2 && self.unlikelihood,
            reduction: self.token_reduction,
            detach_heads: self.detach_heads,
        }
    }
}

/// Parameter update rule.
pub trait Optimizer: Send {
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients);
    fn steps(&self) -> u64;
}

pub struct Adam {
    lr: f64,
    cfg: AdamConfig,
    t: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig, n_params: usize) -> Self {
        Self {
            lr,
            cfg,
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(id);
            let m = self.m[id].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self.v[id].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    fn steps(&self) -> u64 {
        self.t
    }
}

/// One decoder target with its supervision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pub ids: Vec<u32>,
    pub entailed: bool,
    /// Discrimination label per decoder step (`len + 1` steps).
    pub step_labels: Vec<u8>,
    /// Unlikelihood span mask per target token (`len + 1` positions).
    pub ul_mask: Vec<u8>,
}

impl Target {
    pub fn entailed(ids: Vec<u32>) -> Self {
        let n = ids.len() + 1;
        Self {
            ids,
            entailed: true,
            step_labels: vec![1; n],
            ul_mask: vec![0; n],
        }
    }

    pub fn contradictory(p: &PerturbedSentence) -> Self {
        let n = p.tokens.len();
        let mut step_labels = Vec::with_capacity(n + 1);
        step_labels.push(1);
        step_labels.extend_from_slice(&p.token_labels);
        let (s, e) = p.replaced_span;
        let ul_mask = (0..=n).map(|t| u8::from(t >= s && t < e)).collect();
        Self {
            ids: p.tokens.ids.clone(),
            entailed: false,
            step_labels,
            ul_mask,
        }
    }
}

/// One input with its entailed target first, then contradictory ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceGroup {
    pub example_id: String,
    pub x: Vec<u32>,
    pub targets: Vec<Target>,
}

impl InstanceGroup {
    pub fn n_false(&self) -> usize {
        self.targets.len() - 1
    }
}

fn check_lengths(id: &str, x: usize, y: usize, model: &ModelConfig) -> Result<(), TrainError> {
    if x > model.max_input_len {
        return Err(TrainError::BadExample {
            id: id.into(),
            reason: format!("input has {x} tokens, model allows {}", model.max_input_len),
        });
    }
    if y > model.max_output_len {
        return Err(TrainError::BadExample {
            id: id.into(),
            reason: format!(
                "target has {y} tokens, model allows {}",
                model.max_output_len
            ),
        });
    }
    Ok(())
}

/// The entailed instance plus one contradictory instance per perturbation.
pub fn build_r2d2_batch(
    example: &TableExample,
    vocab: &Vocabulary,
    perturbations: &[PerturbedSentence],
    config: &TrainConfig,
) -> Result<InstanceGroup, TrainError> {
    if let Some(cap) = config.size.cap() {
        if perturbations.len() > cap {
            return Err(TrainError::BadExample {
                id: example.table_id.clone(),
                reason: format!(
                    "{} perturbations exceed the `{}` cap of {cap}",
                    perturbations.len(),
                    config.size
                ),
            });
        }
    }
    let x = linearize(example, vocab).ids;
    let y = tokenize(&example.reference, vocab).ids;
    let mut targets = vec![Target::entailed(y)];
    for p in perturbations {
        if p.method != config.method {
            return Err(TrainError::BadExample {
                id: example.table_id.clone(),
                reason: format!(
                    "perturbation method `{}` but config uses `{}`",
                    p.method, config.method
                ),
            });
        }
        targets.push(Target::contradictory(p));
    }
    Ok(InstanceGroup {
        example_id: example.table_id.clone(),
        x,
        targets,
    })
}

/// Entailed-only groups for likelihood training.
pub fn prepare_warmup_groups(
    examples: &[TableExample],
    vocab: &Vocabulary,
    model: &ModelConfig,
) -> Result<Vec<InstanceGroup>, TrainError> {
    examples
        .iter()
        .map(|ex| {
            let g = InstanceGroup {
                example_id: ex.table_id.clone(),
                x: linearize(ex, vocab).ids,
                targets: vec![Target::entailed(tokenize(&ex.reference, vocab).ids)],
            };
            check_lengths(&ex.table_id, g.x.len(), g.targets[0].ids.len(), model)?;
            Ok(g)
        })
        .collect()
}

/// Groups for R2D2 training; examples without perturbations keep only
/// their entailed target.
pub fn prepare_r2d2_groups(
    examples: &[TableExample],
    vocab: &Vocabulary,
    perturbations: &BTreeMap<String, Vec<PerturbedSentence>>,
    config: &TrainConfig,
    model: &ModelConfig,
) -> Result<Vec<InstanceGroup>, TrainError> {
    examples
        .iter()
        .map(|ex| {
            let ps = perturbations
                .get(&ex.table_id)
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let g = build_r2d2_batch(ex, vocab, ps, config)?;
            let longest = g.targets.iter().map(|t| t.ids.len()).max().unwrap_or(0);
            check_lengths(&ex.table_id, g.x.len(), longest, model)?;
            Ok(g)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub mode: TrainMode,
    pub lambda: f64,
    pub discrimination: Discrimination,
    pub unlikelihood: bool,
    pub reduction: TokenReduction,
    pub detach_heads: bool,
}

/// Loss, parameter gradients and discriminator hits for one group.
#[derive(Debug, Clone)]
pub struct GroupResult {
    pub loss: LossBreakdown,
    pub grads: Gradients,
    pub disc_correct: usize,
    pub disc_total: usize,
}

fn seed_at(rows: usize, cols: usize, entries: impl Iterator<Item = (usize, usize, f64)>) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for (r, c, v) in entries {
        t.set(r, c, v);
    }
    t
}

/// Forward and backward pass over one group.
pub fn group_loss_and_grad(
    model: &Seq2Seq,
    group: &InstanceGroup,
    settings: &LossSettings,
    dropout_rng: Option<&mut Rng>,
) -> Result<GroupResult, TrainError> {
    let mut tape = Tape::new(&model.params);
    let mut mode = match dropout_rng {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let memory = model.encode(&mut tape, &group.x, &mut mode)?;
    let n_false = group.n_false();
    let warmup = settings.mode == TrainMode::Warmup;
    let (wg, wd) = if warmup {
        (1.0, 0.0)
    } else {
        r2d2_weights(n_false, settings.lambda)?
    };

    let mut seeds = Vec::new();
    let mut nll = 0.0;
    let mut ul = Vec::with_capacity(n_false);
    let mut rd_true = 0.0;
    let mut rd_false = Vec::with_capacity(n_false);
    let (mut disc_correct, mut disc_total) = (0, 0);

    for target in &group.targets {
        let (decoder_in, gold_ids) = teacher_forcing_pair(&target.ids);
        let nodes = model.decode(&mut tape, memory, &decoder_in, &mut mode)?;
        let steps = gold_ids.len();
        let factor = settings.reduction.factor(steps);

        let (gen_loss, gen_grad) = {
            let probs = tape.value(nodes.probs);
            let gold: Vec<f64> = gold_ids
                .iter()
                .enumerate()
                .map(|(t, &id)| probs.get(t, id as usize))
                .collect();
            if target.entailed {
                (nll_loss(&gold) * factor, Some(nll_grad(&gold)))
            } else if settings.unlikelihood {
                (
                    unlikelihood_loss(&gold, &target.ul_mask)? * factor,
                    Some(unlikelihood_grad(&gold, &target.ul_mask)?),
                )
            } else {
                (0.0, None)
            }
        };
        if let Some(g) = gen_grad {
            if wg != 0.0 {
                let vocab = tape.value(nodes.probs).cols;
                let k = wg * factor;
                let seed = seed_at(
                    steps,
                    vocab,
                    gold_ids
                        .iter()
                        .enumerate()
                        .map(|(t, &id)| (t, id as usize, k * g[t])),
                );
                seeds.push((nodes.probs, seed));
            }
        }
        if target.entailed {
            nll = gen_loss;
        } else {
            ul.push(gen_loss);
        }

        let hidden = if settings.detach_heads && settings.discrimination != Discrimination::None {
            let h = tape.value(nodes.hidden).clone();
            tape.constant(h)
        } else {
            nodes.hidden
        };
        let label = u8::from(target.entailed);
        let (rd, sentence_score) = match settings.discrimination {
            Discrimination::None => (0.0, None),
            Discrimination::Sentence => {
                let node = model.sentence_head_node(&mut tape, hidden, steps - 1)?;
                let p = tape.value(node).data[0];
                if wd != 0.0 {
                    seeds.push((
                        node,
                        Tensor::from_vec(1, 1, vec![wd * rd_sentence_grad(p, label)?]),
                    ));
                }
                (rd_sentence_loss(p, label)?, Some(p))
            }
            Discrimination::Token => {
                let node = model.token_head_node(&mut tape, hidden)?;
                let p = tape.value(node).data.clone();
                if wd != 0.0 {
                    let g = rd_token_grad(&p, &target.step_labels)?;
                    let k = wd * factor;
                    seeds.push((
                        node,
                        Tensor::from_vec(steps, 1, g.iter().map(|x| k * x).collect()),
                    ));
                }
                (
                    rd_token_loss(&p, &target.step_labels)? * factor,
                    p.last().copied(),
                )
            }
        };
        if target.entailed {
            rd_true = rd;
        } else {
            rd_false.push(rd);
        }
        if let Some(s) = sentence_score {
            disc_total += 1;
            if (s >= 0.5) == target.entailed {
                disc_correct += 1;
            }
        }
    }

    let loss = if warmup {
        LossBreakdown::nll_only(nll)
    } else {
        LossBreakdown::new(nll, ul, rd_true, rd_false, settings.lambda)?
    };
    let grads = tape.backward(seeds);
    Ok(GroupResult {
        loss,
        grads,
        disc_correct,
        disc_total,
    })
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: usize,
    /// Mean combined loss over the batch.
    pub loss: f64,
    /// Per-group loss parts, in batch order.
    pub groups: Vec<LossBreakdown>,
    pub disc_accuracy: Option<f64>,
    pub grad_norm: f64,
    pub elapsed_secs: f64,
}

/// Held-out discriminator and generator statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutMetrics {
    /// Sentence-discrimination AUC (entailed positive).
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    /// Mean generator probability of replaced-span tokens.
    pub replaced_token_prob: Option<f64>,
    pub mean_nll: f64,
    pub n_entailed: usize,
    pub n_contradictory: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: u64,
    pub heldout: Option<HeldOutMetrics>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogEntry {
    Step(TrainLogRecord),
    Epoch(EpochRecord),
}

/// Collects log entries and optionally mirrors them as JSON lines.
#[derive(Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    writer: Option<Box<dyn Write + Send>>,
    /// Keep per-step records in memory (epoch records are always kept).
    pub keep_steps: bool,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self {
            keep_steps: true,
            ..Self::default()
        }
    }

    pub fn to_writer(writer: Box<dyn Write + Send>) -> Self {
        Self {
            entries: Vec::new(),
            writer: Some(writer),
            keep_steps: false,
        }
    }

    fn push(&mut self, entry: LogEntry) -> Result<(), TrainError> {
        if let Some(w) = &mut self.writer {
            let line = serde_json::to_string(&entry)
                .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        if self.keep_steps || matches!(entry, LogEntry::Epoch(_)) {
            self.entries.push(entry);
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Step(r) => Some(r.loss),
                _ => None,
            })
            .collect()
    }

    pub fn epochs(&self) -> Vec<&EpochRecord> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Epoch(r) => Some(r),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub epoch_losses: Vec<f64>,
    pub final_heldout: Option<HeldOutMetrics>,
}

fn batch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(seed, &["shuffle", &epoch.to_string()]));
    order
}

/// Runs `config.epochs` epochs over `groups`. Held-out metrics are logged
/// after every epoch when `heldout` is given.
pub fn train(
    model: &mut Seq2Seq,
    groups: &[InstanceGroup],
    heldout: Option<&[InstanceGroup]>,
    config: &TrainConfig,
    exec: Execution,
    log: &mut TrainLog,
) -> Result<TrainSummary, TrainError> {
    config.validate()?;
    let settings = config.settings();
    if settings.discrimination == Discrimination::Sentence {
        model.set_heads(true, model.config.token_head);
    }
    if settings.discrimination == Discrimination::Token {
        model.set_heads(model.config.sentence_head, true);
    }
    let mut opt = Adam::new(config.learning_rate, config.adam, model.params.len());
    let start = Instant::now();
    let mut step = 0u64;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut final_heldout = None;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 1..=config.epochs {
        let order = batch_order(groups.len(), config.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let m: &Seq2Seq = model;
            let results = exec.map_indexed(batch, |i, &gi| {
                let mut rng =
                    seed::rng_for(config.seed, &["dropout", &step.to_string(), &i.to_string()]);
                group_loss_and_grad(m, &groups[gi], &settings, Some(&mut rng))
            });
            let mut total = Gradients::empty(model.params.len());
            let mut parts = Vec::with_capacity(batch.len());
            let (mut hits, mut seen) = (0, 0);
            for r in results {
                let r = r?;
                total.accumulate(&r.grads);
                hits += r.disc_correct;
                seen += r.disc_total;
                parts.push(r.loss);
            }
            total.scale(1.0 / batch.len() as f64);
            let loss = parts.iter().map(|p| p.combined).sum::<f64>() / batch.len() as f64;
            let grad_norm = total.norm();
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    detail: format!("loss {loss}, gradient norm {grad_norm}"),
                });
            }
            if let Some(max) = config.max_grad_norm {
                if grad_norm > max {
                    total.scale(max / grad_norm);
                }
            }
            opt.step(&mut model.params, &total);
            epoch_loss += loss * batch.len() as f64;
            log.push(LogEntry::Step(TrainLogRecord {
                step,
                epoch,
                loss,
                groups: parts,
                disc_accuracy: (seen > 0).then(|| hits as f64 / seen as f64),
                grad_norm,
                elapsed_secs: start.elapsed().as_secs_f64(),
            }))?;
        }
        let mean_loss = epoch_loss / groups.len().max(1) as f64;
        epoch_losses.push(mean_loss);
        let heldout_metrics = match heldout {
            Some(h) => Some(heldout_metrics(model, h, settings.discrimination, exec)?),
            None => None,
        };
        let checkpoint = match &config.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("epoch-{epoch:03}.ckpt"));
                model.save_checkpoint(&path, None)?;
                Some(path)
            }
            None => None,
        };
        final_heldout = heldout_metrics.clone();
        log.push(LogEntry::Epoch(EpochRecord {
            epoch,
            mean_loss,
            steps: step,
            heldout: heldout_metrics,
            checkpoint,
        }))?;
    }
    log.flush()?;
    Ok(TrainSummary {
        epochs: config.epochs,
        steps: step,
        epoch_losses,
        final_heldout,
    })
}

/// Likelihood-only fine-tuning.
pub fn warmup_finetune(
    model: &mut Seq2Seq,
    groups: &[InstanceGroup],
    config: &TrainConfig,
    exec: Execution,
    log: &mut TrainLog,
) -> Result<TrainSummary, TrainError> {
    if config.mode != TrainMode::Warmup {
        return Err(TrainError::InvalidConfig(
            "warmup_finetune needs mode = warmup".into(),
        ));
    }
    train(model, groups, None, config, exec, log)
}

/// Combined-objective fine-tuning from a warmed-up model whose heads have
/// been freshly initialized.
pub fn r2d2_finetune(
    model: &mut Seq2Seq,
    groups: &[InstanceGroup],
    heldout: Option<&[InstanceGroup]>,
    config: &TrainConfig,
    exec: Execution,
    log: &mut TrainLog,
) -> Result<TrainSummary, TrainError> {
    if config.mode != TrainMode::R2d2 {
        return Err(TrainError::InvalidConfig(
            "r2d2_finetune needs mode = r2d2".into(),
        ));
    }
    train(model, groups, heldout, config, exec, log)
}

/// Mann-Whitney AUC of `scores` with `labels` (true = positive); ties count
/// one half. `None` when either class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let r = ranks(scores);
    let pos_rank_sum: f64 = r
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(x, _)| x)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

struct TargetEval {
    entailed: bool,
    score: Option<f64>,
    nll: f64,
    replaced_probs: Vec<f64>,
}

/// Discriminator AUC/accuracy, mean NLL of entailed targets, and the mean
/// probability the generator gives to replaced-span tokens.
pub fn heldout_metrics(
    model: &Seq2Seq,
    groups: &[InstanceGroup],
    discrimination: Discrimination,
    exec: Execution,
) -> Result<HeldOutMetrics, TrainError> {
    let per_group = exec.map(groups, |g| -> Result<Vec<TargetEval>, TrainError> {
        let mut tape = Tape::new(&model.params);
        let memory = model.encode(&mut tape, &g.x, &mut Mode::Eval)?;
        let mut out = Vec::with_capacity(g.targets.len());
        for t in &g.targets {
            let (decoder_in, gold_ids) = teacher_forcing_pair(&t.ids);
            let nodes = model.decode(&mut tape, memory, &decoder_in, &mut Mode::Eval)?;
            let probs = tape.value(nodes.probs);
            let gold: Vec<f64> = gold_ids
                .iter()
                .enumerate()
                .map(|(s, &id)| probs.get(s, id as usize))
                .collect();
            let score = match discrimination {
                Discrimination::None => None,
                Discrimination::Sentence => {
                    let n =
                        model.sentence_head_node(&mut tape, nodes.hidden, gold_ids.len() - 1)?;
                    Some(tape.value(n).data[0])
                }
                Discrimination::Token => {
                    let n = model.token_head_node(&mut tape, nodes.hidden)?;
                    tape.value(n).data.last().copied()
                }
            };
            let replaced_probs = gold
                .iter()
                .zip(&t.ul_mask)
                .filter(|(_, &m)| m == 1)
                .map(|(p, _)| *p)
                .collect();
            out.push(TargetEval {
                entailed: t.entailed,
                score,
                nll: if t.entailed { nll_loss(&gold) } else { 0.0 },
                replaced_probs,
            });
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for g in per_group {
        all.extend(g?);
    }
    let n_entailed = all.iter().filter(|t| t.entailed).count();
    let n_contradictory = all.len() - n_entailed;
    let (scores, labels): (Vec<f64>, Vec<bool>) = all
        .iter()
        .filter_map(|t| t.score.map(|s| (s, t.entailed)))
        .unzip();
    let auc = auc(&scores, &labels);
    let accuracy = (!scores.is_empty()).then(|| {
        scores
            .iter()
            .zip(&labels)
            .filter(|(&s, &l)| (s >= 0.5) == l)
            .count() as f64
            / scores.len() as f64
    });
    let replaced: Vec<f64> = all
        .iter()
        .flat_map(|t| t.replaced_probs.iter().copied())
        .collect();
    let replaced_token_prob =
        (!replaced.is_empty()).then(|| replaced.iter().sum::<f64>() / replaced.len() as f64);
    let mean_nll = all.iter().map(|t| t.nll).sum::<f64>() / n_entailed.max(1) as f64;
    Ok(HeldOutMetrics {
        auc,
        accuracy,
        replaced_token_prob,
        mean_nll,
        n_entailed,
        n_contradictory,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub ner: NerMetricReport,
    pub bleu: f64,
    pub predictions: Vec<String>,
}

/// Greedy-decoded predictions for `examples`.
pub fn generate(
    model: &Seq2Seq,
    vocab: &Vocabulary,
    examples: &[TableExample],
    exec: Execution,
) -> Result<Vec<String>, TrainError> {
    exec.map(examples, |ex| {
        let x = linearize(ex, vocab);
        let ids = greedy_decode(model, &x.ids, model.config.max_output_len)?;
        Ok(detokenize(&vocab.decode(&ids).surface))
    })
    .into_iter()
    .collect()
}

/// Scores fixed predictions against the examples' references.
pub fn evaluate_predictions(
    examples: &[TableExample],
    predictions: Vec<String>,
    recognizer: &dyn EntityRecognizer,
    averaging: Averaging,
    exec: Execution,
) -> Result<EvaluationReport, TrainError> {
    let ner = corpus_ner_metrics(examples, &predictions, recognizer, averaging, exec)?;
    let refs: Vec<String> = examples.iter().map(|e| e.reference.clone()).collect();
    let bleu = corpus_bleu(&predictions, &refs, 4)?;
    Ok(EvaluationReport {
        ner,
        bleu,
        predictions,
    })
}

pub fn evaluate_checkpoint(
    model: &Seq2Seq,
    vocab: &Vocabulary,
    examples: &[TableExample],
    recognizer: &dyn EntityRecognizer,
    averaging: Averaging,
    exec: Execution,
) -> Result<EvaluationReport, TrainError> {
    let predictions = generate(model, vocab, examples, exec)?;
    evaluate_predictions(examples, predictions, recognizer, averaging, exec)
}

#[derive(Serialize)]
struct GenerationLine<'a> {
    id: &'a str,
    prediction: &'a str,
    reference: &'a str,
}

/// One JSON line per example for manual inspection.
pub fn write_generations<W: Write>(
    mut w: W,
    examples: &[TableExample],
    predictions: &[String],
) -> Result<(), TrainError> {
    for (ex, pred) in examples.iter().zip(predictions) {
        let line = GenerationLine {
            id: &ex.table_id,
            prediction: pred,
            reference: &ex.reference,
        };
        writeln!(
            w,
            "{}",
            serde_json::to_string(&line).expect("plain struct serializes")
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSequence;
    use crate::entities::EntitySpan;
    use crate::losses::r2d2_loss;
    use crate::perturb::apply_replacement;

    fn tiny_model(vocab: usize) -> Seq2Seq {
        let mut c = ModelConfig::new(vocab);
        c.d_model = 8;
        c.n_heads = 2;
        c.d_ff = 16;
        c.encoder_layers = 1;
        c.decoder_layers = 1;
        c.max_input_len = 64;
        c.max_output_len = 16;
        c.dropout = 0.0;
        c.seed = 3;
        Seq2Seq::new(c).unwrap()
    }

    fn toy() -> (Vec<TableExample>, Vocabulary) {
        let mk = |id: &str, c: &str, y: &str| TableExample {
            table_id: id.into(),
            header: vec!["Country".into(), "Year".into()],
            rows: vec![vec![c.into(), y.into()], vec!["Peru".into(), "1990".into()]],
            metadata: Default::default(),
            query: None,
            highlighted_cells: None,
            reference: format!("{c} won in {y}."),
        };
        let exs = vec![
            mk("a", "Chile", "2001"),
            mk("b", "Fiji", "2004"),
            mk("c", "Chile", "2007"),
        ];
        let v = Vocabulary::from_corpus(&exs);
        (exs, v)
    }

    fn perturbed(ex: &TableExample, vocab: &Vocabulary) -> Vec<PerturbedSentence> {
        let y = tokenize(&ex.reference, vocab);
        let mut out = Vec::new();
        for (s, e, repl) in [(0, 1, "peru"), (3, 4, "1990")] {
            let mut p = apply_replacement(
                &y,
                &EntitySpan::new(&y, s, e),
                repl,
                vocab,
                Method::Knowledge,
                LabelConvention::Prefix,
            )
            .unwrap();
            p.source_example_id = ex.table_id.clone();
            out.push(p);
        }
        out
    }

    #[test]
    fn config_invariants() {
        let mut c = TrainConfig::r2d2();
        c.discrimination = Discrimination::None;
        c.unlikelihood = false;
        assert!(c.validate().is_err());
        c.unlikelihood = true;
        assert!(c.validate().is_ok());
        assert!(TrainConfig::from_toml("epochs = 2\nbogus = 1").is_err());
        let c = TrainConfig::from_toml("mode = \"r2d2\"\nlambda = 0.3\nsize = \"small\"").unwrap();
        assert_eq!(c.mode, TrainMode::R2d2);
        assert_eq!(c.size, SizePolicy::Small);
        assert_eq!(c.learning_rate, 5e-5);
    }

    #[test]
    fn batch_structure() {
        let (exs, vocab) = toy();
        let ps = perturbed(&exs[0], &vocab);
        let g = build_r2d2_batch(&exs[0], &vocab, &ps, &TrainConfig::r2d2()).unwrap();
        assert_eq!(g.targets.len(), 3);
        assert!(g.targets[0].step_labels.iter().all(|&l| l == 1));
        // "chile won in 2001 ." with the year replaced: steps 0..=3 have
        // seen only faithful tokens.
        assert_eq!(g.targets[2].step_labels, vec![1, 1, 1, 1, 0, 0]);
        assert_eq!(g.targets[2].ul_mask, vec![0, 0, 0, 1, 0, 0]);
        assert_eq!(g.targets[1].step_labels, vec![1, 0, 0, 0, 0, 0]);
        let mut small = TrainConfig::r2d2();
        small.size = SizePolicy::XSmall;
        assert!(build_r2d2_batch(&exs[0], &vocab, &ps, &small).is_err());
    }

    #[test]
    fn group_loss_matches_direct_computation() {
        let (exs, vocab) = toy();
        let mut model = tiny_model(vocab.len());
        model.set_heads(true, true);
        model.reinit_heads(5);
        let ps = perturbed(&exs[0], &vocab);
        let g = build_r2d2_batch(&exs[0], &vocab, &ps, &TrainConfig::r2d2()).unwrap();
        for disc in [
            Discrimination::Token,
            Discrimination::Sentence,
            Discrimination::None,
        ] {
            let settings = LossSettings {
                mode: TrainMode::R2d2,
                lambda: 0.3,
                discrimination: disc,
                unlikelihood: true,
                reduction: TokenReduction::Sum,
                detach_heads: false,
            };
            let r = group_loss_and_grad(&model, &g, &settings, None).unwrap();
            // monolithic recomputation through the evaluation API
            let x = TokenSequence {
                ids: g.x.clone(),
                surface: vec![String::new(); g.x.len()],
            };
            let mut nll = 0.0;
            let mut ul = Vec::new();
            let mut rd_t = 0.0;
            let mut rd_f = Vec::new();
            for t in &g.targets {
                let y = vocab.decode(&t.ids);
                let trace = model.forward_teacher_forced(&x, &y).unwrap();
                let gold = trace.gold_probs();
                let rd = match disc {
                    Discrimination::Token => {
                        rd_token_loss(&model.token_discriminate(&trace).unwrap(), &t.step_labels)
                            .unwrap()
                    }
                    Discrimination::Sentence => rd_sentence_loss(
                        model.sentence_discriminate(&trace).unwrap(),
                        u8::from(t.entailed),
                    )
                    .unwrap(),
                    Discrimination::None => 0.0,
                };
                if t.entailed {
                    nll = nll_loss(&gold);
                    rd_t = rd;
                } else {
                    ul.push(unlikelihood_loss(&gold, &t.ul_mask).unwrap());
                    rd_f.push(rd);
                }
            }
            let direct = r2d2_loss(nll, &ul, rd_t, &rd_f, 0.3).unwrap();
            assert!((r.loss.combined - direct).abs() < 1e-9, "{disc:?}");
            assert!((r.loss.combined - r.loss.recombine()).abs() < 1e-9);
            if disc == Discrimination::None {
                assert_eq!(r.loss.rd_true, 0.0);
                assert!(r.loss.rd_false.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn unlikelihood_off_zeroes_its_terms() {
        let (exs, vocab) = toy();
        let mut model = tiny_model(vocab.len());
        model.set_heads(false, true);
        let ps = perturbed(&exs[1], &vocab);
        let g = build_r2d2_batch(&exs[1], &vocab, &ps, &TrainConfig::r2d2()).unwrap();
        let settings = LossSettings {
            mode: TrainMode::R2d2,
            lambda: 0.5,
            discrimination: Discrimination::Token,
            unlikelihood: false,
            reduction: TokenReduction::Sum,
            detach_heads: false,
        };
        let r = group_loss_and_grad(&model, &g, &settings, None).unwrap();
        assert_eq!(r.loss.ul, vec![0.0, 0.0]);
        assert_eq!(r.loss.n_false, 2);
    }

    #[test]
    fn detached_heads_leave_trunk_untouched_by_discrimination() {
        let (exs, vocab) = toy();
        let mut model = tiny_model(vocab.len());
        model.set_heads(false, true);
        model.reinit_heads(1);
        let ps = perturbed(&exs[0], &vocab);
        let g = build_r2d2_batch(&exs[0], &vocab, &ps, &TrainConfig::r2d2()).unwrap();
        let settings = LossSettings {
            mode: TrainMode::R2d2,
            lambda: 0.0,
            discrimination: Discrimination::Token,
            unlikelihood: false,
            reduction: TokenReduction::Sum,
            detach_heads: true,
        };
        let r = group_loss_and_grad(&model, &g, &settings, None).unwrap();
        for (id, grad) in r.grads.grads.iter().enumerate() {
            let name = model.params.name(id);
            assert_eq!(grad.is_some(), name.starts_with("head.token"), "{name}");
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op_and_training_is_deterministic() {
        let (exs, vocab) = toy();
        let model0 = tiny_model(vocab.len());
        let groups = prepare_warmup_groups(&exs, &vocab, &model0.config).unwrap();
        let mut cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut m = model0.clone();
        warmup_finetune(
            &mut m,
            &groups,
            &cfg,
            Execution::Sequential,
            &mut TrainLog::in_memory(),
        )
        .unwrap();
        assert_eq!(m, model0);

        cfg.epochs = 3;
        cfg.batch_size = 2;
        cfg.learning_rate = 1e-2;
        let run = |exec| {
            let mut m = model0.clone();
            let mut log = TrainLog::in_memory();
            warmup_finetune(&mut m, &groups, &cfg, exec, &mut log).unwrap();
            (m, log.step_losses())
        };
        let (a, la) = run(Execution::Sequential);
        let (b, lb) = run(Execution::default());
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert!(la.last().unwrap() < la.first().unwrap());
    }

    #[test]
    fn r2d2_requires_matching_mode() {
        let (exs, vocab) = toy();
        let mut m = tiny_model(vocab.len());
        let groups = prepare_warmup_groups(&exs, &vocab, &m.config).unwrap();
        let cfg = TrainConfig::default();
        assert!(r2d2_finetune(
            &mut m,
            &groups,
            None,
            &cfg,
            Execution::Sequential,
            &mut TrainLog::in_memory()
        )
        .is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(
            auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]),
            Some(1.0)
        );
        assert_eq!(auc(&[0.1, 0.9], &[true, false]), Some(0.0));
        assert_eq!(auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auc(&[0.5], &[true]), None);
    }

    #[test]
    fn reference_predictions_give_full_coverage() {
        let (exs, _) = toy();
        let preds = exs.iter().map(|e| e.reference.clone()).collect();
        let r = evaluate_predictions(
            &exs,
            preds,
            &crate::entities::TableGroundedRecognizer,
            Averaging::Micro,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(r.ner.rc, 100.0);
        assert!((r.bleu - 100.0).abs() < 1e-9);
    }

    #[test]
    fn evaluation_is_repeatable() {
        let (exs, vocab) = toy();
        let m = tiny_model(vocab.len());
        let rec = crate::entities::TableGroundedRecognizer;
        let a = evaluate_checkpoint(
            &m,
            &vocab,
            &exs,
            &rec,
            Averaging::Micro,
            Execution::Sequential,
        )
        .unwrap();
        let b = evaluate_checkpoint(
            &m,
            &vocab,
            &exs,
            &rec,
            Averaging::Micro,
            Execution::default(),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
