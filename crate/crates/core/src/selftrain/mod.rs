//! Training regimes: supervised base system, on-the-fly self-training,
//! the UDA soft-target baseline and one-shot pseudo-labels.
//!
//! The semi-supervised regimes minimize
//!
//! ```text
//! (1/N_l) sum_i L(X_i, Y_i) + (gamma/N_u) sum_j L(X_j, Y*_j)
//! ```
//!
//! alternating between decoding `Y*_j` for a mini-batch of unlabeled
//! utterances with the current model and one gradient step on the weights.
//! `N_l` and `N_u` count attempted training pairs (utterances times
//! augmentation variants) and stay fixed when pairs are skipped.

mod uda;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_variant, AugmentConfig, AugmentError};
use crate::corpus::{stack_frames, Corpus, UnlabeledUtterance, Utterance};
use crate::ctc::{ctc_loss_grad, CtcError};
use crate::decode::{beam_decode, Posteriorgram};
use crate::eval::{evaluate, pseudo_label_oracle_error, EvalError};
use crate::matrix::Matrix;
use crate::model::{adam_step, AcousticModel, AdamConfig, Checkpoint, Gradients, Mode, ModelConfig, ModelError, OptimizerState, RngCursor};
use crate::rng::{derive_seed, rng_from_seed, stable_hash};

pub use uda::{align_soft_targets, soft_target_loss};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("ctc: {0}")]
    Ctc(#[from] CtcError),
    #[error("soft targets have {expected} frames but the model produced {got}")]
    FrameMismatch { expected: usize, got: usize },
    #[error("epoch {0} had no trainable utterance")]
    NoValidUtterance(u64),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

// Seed stream tags.
const TAG_ORDER: u64 = 1;
const TAG_AUG: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_SUP_ORDER: u64 = 4;
const TAG_UNSUP_ORDER: u64 = 5;
const TAG_UNSUP_AUG: u64 = 6;
const TAG_UNSUP_DROPOUT: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Continued supervised training (the gamma = 0 control).
    Supervised,
    /// Pseudo-labels decoded on the fly every step.
    SelfTraining,
    /// Per-frame cross-entropy against the previous model's posteriors.
    Uda,
    /// Pseudo-labels decoded once with the base model, then frozen.
    OneShot,
}

/// Feature pipeline shared by every regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Frames stacked after augmentation.
    pub stack: usize,
    /// Beam size for dev/test evaluation.
    pub eval_beam: usize,
    /// Augmentation of supervised data; `None` trains on clean features.
    pub augment: Option<AugmentConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { stack: 3, eval_beam: 20, augment: Some(AugmentConfig::default()) }
    }
}

impl PipelineConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.stack == 0 || self.eval_beam == 0 {
            return Err(TrainError::InvalidConfig("stack and eval_beam must be positive".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    fn variants(&self) -> usize {
        self.augment.as_ref().map_or(1, |a| a.speed_factors.len())
    }

    /// Training input for variant `v` of `features`.
    fn prepare(&self, features: &Matrix, v: usize, seed: u64) -> Result<Matrix, AugmentError> {
        match &self.augment {
            Some(a) => Ok(stack_frames(&augment_variant(features, a, v, seed)?, self.stack)),
            None => Ok(stack_frames(features, self.stack)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub pipeline: PipelineConfig,
    pub batch_size: usize,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub regime: Regime,
    /// Discount on the unsupervised loss.
    pub gamma: f64,
    /// Beam size for on-the-fly pseudo-labels; 1 is greedy.
    pub beam: usize,
    /// Beam size for the one-shot regime's single decoding pass.
    pub one_shot_beam: usize,
    pub batch_supervised: usize,
    pub batch_unsupervised: usize,
    pub augment_unsupervised: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            regime: Regime::SelfTraining,
            gamma: 1.0,
            beam: 1,
            one_shot_beam: 20,
            batch_supervised: 8,
            batch_unsupervised: 32,
            augment_unsupervised: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and nonnegative");
        }
        if self.beam == 0 || self.one_shot_beam == 0 {
            return bad("beam sizes must be at least 1");
        }
        if self.batch_supervised == 0 {
            return bad("batch_supervised must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiConfig {
    pub objective: ObjectiveConfig,
    pub optimizer: AdamConfig,
    pub pipeline: PipelineConfig,
    /// Overrides the base model's dropout rate for this phase.
    pub dropout: Option<f64>,
    /// Score pseudo-labels against hidden labels each epoch.
    pub oracle_diagnostics: bool,
}

impl SemiConfig {
    fn validate(&self) -> Result<(), TrainError> {
        self.objective.validate()?;
        self.optimizer.validate()?;
        self.pipeline.validate()?;
        if self.objective.augment_unsupervised && self.pipeline.augment.is_none() {
            return Err(TrainError::InvalidConfig("augment_unsupervised needs an augment config".into()));
        }
        Ok(())
    }

    fn unsup_variants(&self) -> usize {
        if self.objective.augment_unsupervised {
            self.pipeline.variants()
        } else {
            1
        }
    }
}

/// A pseudo-label `Y*_j` for one unlabeled utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub id: String,
    pub labels: Vec<usize>,
    pub log_score: f64,
    pub epoch: u64,
    /// Model parameter version the label was decoded with.
    pub model_version: u64,
    /// Empty decodes are not trained on.
    pub skipped: bool,
}

/// One learning-curve row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub dev_token_error: f64,
    pub pseudo_label_oracle_error: Option<f64>,
    pub seconds_per_update: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub epoch: u64,
    pub dev_token_error: f64,
    pub model: AcousticModel,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: AcousticModel,
    pub optimizer: OptimizerState,
    pub cursor: RngCursor,
    pub history: Vec<EpochRecord>,
    pub best: BestSnapshot,
    /// Hidden-label reads that happened inside training steps. Always 0.
    pub trainer_label_reads: usize,
}

impl TrainState {
    fn fresh(model: AcousticModel, optimizer: AdamConfig, seed: u64, corpus: &Corpus, pipeline: &PipelineConfig) -> Result<Self, TrainError> {
        let dev = dev_error(&model, corpus, pipeline)?;
        let optimizer = OptimizerState::new(&model, optimizer);
        Ok(Self {
            best: BestSnapshot { epoch: 0, dev_token_error: dev, model: model.clone() },
            history: vec![EpochRecord {
                epoch: 0,
                step: 0,
                sup_loss: f64::NAN,
                unsup_loss: f64::NAN,
                dev_token_error: dev,
                pseudo_label_oracle_error: None,
                seconds_per_update: 0.0,
            }],
            model,
            optimizer,
            cursor: RngCursor { seed, epoch: 0, step: 0 },
            trainer_label_reads: 0,
        })
    }

    /// Rebuilds a state from a checkpoint; history restarts at the checkpoint epoch.
    pub fn from_checkpoint(ckpt: Checkpoint, corpus: &Corpus, pipeline: &PipelineConfig) -> Result<Self, TrainError> {
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint has no optimizer state".into()))?;
        let dev = dev_error(&ckpt.model, corpus, pipeline)?;
        Ok(Self {
            best: BestSnapshot { epoch: ckpt.rng.epoch, dev_token_error: dev, model: ckpt.model.clone() },
            history: Vec::new(),
            model: ckpt.model,
            optimizer,
            cursor: ckpt.rng,
            trainer_label_reads: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.model.clone(), optimizer: Some(self.optimizer.clone()), rng: self.cursor }
    }

    pub fn best_checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.best.model.clone(), optimizer: None, rng: RngCursor { epoch: self.best.epoch, ..self.cursor } }
    }

    fn finish_epoch(&mut self, record: EpochRecord) {
        log::info!(
            "epoch {} step {} sup {:.4} unsup {:.4} dev {:.4}",
            record.epoch,
            record.step,
            record.sup_loss,
            record.unsup_loss,
            record.dev_token_error
        );
        if record.dev_token_error < self.best.dev_token_error {
            self.best = BestSnapshot { epoch: record.epoch, dev_token_error: record.dev_token_error, model: self.model.clone() };
        }
        self.history.push(record);
    }
}

fn dev_error(model: &AcousticModel, corpus: &Corpus, pipeline: &PipelineConfig) -> Result<f64, TrainError> {
    Ok(evaluate(model, &corpus.dev, pipeline.stack, corpus.vocab.blank(), pipeline.eval_beam)?.token_error_rate)
}

/// Writes the learning curve. `with_timing = false` leaves the wall-clock
/// column empty so the file is reproducible bit for bit.
pub fn write_learning_curve(history: &[EpochRecord], path: impl AsRef<Path>, with_timing: bool) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,step,sup_loss,unsup_loss,dev_token_error,pseudo_label_oracle_error,seconds_per_update")?;
    let num = |x: f64| if x.is_nan() { String::new() } else { format!("{x}") };
    for r in history {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            num(r.sup_loss),
            num(r.unsup_loss),
            r.dev_token_error,
            r.pseudo_label_oracle_error.map(num).unwrap_or_default(),
            if with_timing { format!("{:.6}", r.seconds_per_update) } else { String::new() }
        )?;
    }
    f.flush()
}

enum Target {
    Labels(Vec<usize>),
    Soft(Matrix),
}

struct Example {
    input: Matrix,
    target: Target,
    dropout_seed: u64,
}

/// Loss and gradient of every example, in input order. Infeasible CTC pairs
/// yield `None`.
fn losses_and_grads(model: &AcousticModel, examples: &[Example], blank: usize) -> Result<Vec<Option<(f64, Gradients)>>, TrainError> {
    examples
        .par_iter()
        .map(|ex| {
            let (logits, tape) = model.forward(&ex.input, Mode::Train, ex.dropout_seed)?;
            let (loss, grad_logits) = match &ex.target {
                Target::Labels(labels) => match ctc_loss_grad(&logits, labels, blank) {
                    Ok(r) => (r.loss, r.grad_logits),
                    Err(CtcError::Infeasible { .. }) => return Ok(None),
                    Err(e) => return Err(e.into()),
                },
                Target::Soft(q) => soft_target_loss(&logits, q)?,
            };
            Ok(Some((loss, model.backward(&tape, &grad_logits)?)))
        })
        .collect()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    idx
}

/// Initializes a model and trains it on the supervised split only.
pub fn train_supervised(corpus: &Corpus, cfg: &SupervisedConfig, epochs: u64, seed: u64) -> Result<TrainState, TrainError> {
    cfg.model.validate()?;
    cfg.optimizer.validate()?;
    cfg.pipeline.validate()?;
    if cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
    }
    if corpus.supervised.is_empty() {
        return Err(TrainError::InvalidConfig("supervised split is empty".into()));
    }
    let model = AcousticModel::new(cfg.model.clone(), cfg.init_seed)?;
    let mut state = TrainState::fresh(model, cfg.optimizer.clone(), seed, corpus, &cfg.pipeline)?;
    run_supervised_epochs(&mut state, corpus, cfg, epochs)?;
    Ok(state)
}

/// Runs `epochs` more supervised epochs from `state.cursor`. Each epoch
/// presents every (utterance, speed variant) pair once in shuffled order,
/// in mini-batches of `cfg.batch_size`, averaging the CTC loss over the
/// feasible pairs of a batch.
pub fn run_supervised_epochs(state: &mut TrainState, corpus: &Corpus, cfg: &SupervisedConfig, epochs: u64) -> Result<(), TrainError> {
    let blank = corpus.vocab.blank();
    let seed = state.cursor.seed;
    let variants = cfg.pipeline.variants();
    for _ in 0..epochs {
        let epoch = state.cursor.epoch + 1;
        let pairs: Vec<(usize, usize)> = shuffled(corpus.supervised.len() * variants, derive_seed(seed, &[TAG_ORDER, epoch]))
            .into_iter()
            .map(|k| (k / variants, k % variants))
            .collect();
        let (mut loss_sum, mut updates, mut trained, mut seconds) = (0.0, 0u64, 0usize, 0.0);
        for batch in pairs.chunks(cfg.batch_size) {
            let started = Instant::now();
            let examples = batch
                .iter()
                .map(|&(i, v)| {
                    let u = &corpus.supervised[i];
                    let h = stable_hash(&u.id);
                    Ok(Example {
                        input: cfg.pipeline.prepare(&u.features, v, derive_seed(seed, &[TAG_AUG, epoch, h]))?,
                        target: Target::Labels(u.labels.clone().unwrap_or_default()),
                        dropout_seed: derive_seed(seed, &[TAG_DROPOUT, epoch, h, v as u64]),
                    })
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let results = losses_and_grads(&state.model, &examples, blank)?;
            let feasible: Vec<&(f64, Gradients)> = results.iter().flatten().collect();
            if feasible.len() < results.len() {
                log::warn!("epoch {epoch}: skipped {} infeasible pairs", results.len() - feasible.len());
            }
            if feasible.is_empty() {
                continue;
            }
            let scale = 1.0 / feasible.len() as f64;
            let mut grads = Gradients::zeros_like(&state.model);
            let mut batch_loss = 0.0;
            for (loss, g) in feasible.iter().map(|x| (x.0, &x.1)) {
                grads.add_scaled(g, scale);
                batch_loss += loss * scale;
            }
            adam_step(&mut state.model, &mut state.optimizer, &grads)?;
            state.cursor.step += 1;
            trained += feasible.len();
            loss_sum += batch_loss;
            updates += 1;
            seconds += started.elapsed().as_secs_f64();
        }
        if trained == 0 {
            return Err(TrainError::NoValidUtterance(epoch));
        }
        state.cursor.epoch = epoch;
        let dev = dev_error(&state.model, corpus, &cfg.pipeline)?;
        state.finish_epoch(EpochRecord {
            epoch,
            step: state.cursor.step,
            sup_loss: loss_sum / updates as f64,
            unsup_loss: f64::NAN,
            dev_token_error: dev,
            pseudo_label_oracle_error: None,
            seconds_per_update: seconds / updates as f64,
        });
    }
    Ok(())
}

/// Outcome of one semi-supervised update.
#[derive(Clone, Debug, Default)]
pub struct StepReport {
    /// `(1/N_l) sum L` over supervised pairs.
    pub sup_loss: f64,
    /// `(1/N_u) sum L` over unsupervised pairs, before the gamma discount.
    pub unsup_loss: f64,
    /// `sup_loss + gamma * unsup_loss`.
    pub total_loss: f64,
    pub attempted_supervised: usize,
    pub attempted_unsupervised: usize,
    pub skipped_supervised: usize,
    pub skipped_unsupervised: usize,
    pub records: Vec<PseudoLabelRecord>,
    pub updated: bool,
    pub seconds: f64,
}

/// Where the unsupervised targets of a step come from.
pub enum UnsupSource<'a> {
    /// Decode with the current model (self-training and UDA).
    Current,
    /// Frozen pseudo-labels by utterance id (one-shot).
    Frozen(&'a HashMap<String, PseudoLabelRecord>),
}

/// Step position, used to derive augmentation and dropout seeds.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

/// One alternating-optimization update: decode pseudo-labels for
/// `unsup_batch` with the current model (eval mode, clean features), build
/// training pairs, and take one Adam step on the combined objective.
pub fn semi_supervised_step(
    state: &mut TrainState,
    sup_batch: &[&Utterance],
    unsup_batch: &[UnlabeledUtterance<'_>],
    cfg: &SemiConfig,
    source: UnsupSource<'_>,
    blank: usize,
    ctx: StepContext,
) -> Result<StepReport, TrainError> {
    let started = Instant::now();
    let obj = &cfg.objective;
    let pipe = &cfg.pipeline;
    let sup_variants = pipe.variants();
    let mut report = StepReport { attempted_supervised: sup_batch.len() * sup_variants, ..StepReport::default() };

    let mut examples = Vec::with_capacity(report.attempted_supervised);
    for u in sup_batch {
        let h = stable_hash(&u.id);
        for v in 0..sup_variants {
            examples.push(Example {
                input: pipe.prepare(&u.features, v, derive_seed(ctx.seed, &[TAG_AUG, ctx.epoch, ctx.step, h]))?,
                target: Target::Labels(u.labels.clone().unwrap_or_default()),
                dropout_seed: derive_seed(ctx.seed, &[TAG_DROPOUT, ctx.epoch, ctx.step, h, v as u64]),
            });
        }
    }
    let n_sup_examples = examples.len();

    let use_unsup = obj.regime != Regime::Supervised && obj.gamma > 0.0 && !unsup_batch.is_empty();
    if use_unsup {
        let variants = cfg.unsup_variants();
        report.attempted_unsupervised = unsup_batch.len() * variants;
        let targets = unsupervised_targets(state, unsup_batch, cfg, source, blank, ctx)?;
        for (u, target) in unsup_batch.iter().zip(targets) {
            let h = stable_hash(u.id);
            let aug_seed = derive_seed(ctx.seed, &[TAG_UNSUP_AUG, ctx.epoch, ctx.step, h]);
            let target = match target {
                UnsupTarget::Skip(record) => {
                    report.skipped_unsupervised += variants;
                    report.records.push(record);
                    continue;
                }
                UnsupTarget::Labels(record) => {
                    let labels = record.labels.clone();
                    report.records.push(record);
                    Target::Labels(labels)
                }
                UnsupTarget::Soft(probs) => Target::Soft(probs),
            };
            for v in 0..variants {
                let (input, target) = if obj.augment_unsupervised {
                    let aug = pipe.augment.as_ref().expect("validated");
                    let input = stack_frames(&augment_variant(u.features, aug, v, aug_seed)?, pipe.stack);
                    let target = match &target {
                        Target::Labels(l) => Target::Labels(l.clone()),
                        Target::Soft(q) => Target::Soft(align_soft_targets(q, u.features.rows(), aug.speed_factors[v], pipe.stack)?),
                    };
                    (input, target)
                } else {
                    let target = match &target {
                        Target::Labels(l) => Target::Labels(l.clone()),
                        Target::Soft(q) => Target::Soft(q.clone()),
                    };
                    (stack_frames(u.features, pipe.stack), target)
                };
                examples.push(Example {
                    input,
                    target,
                    dropout_seed: derive_seed(ctx.seed, &[TAG_UNSUP_DROPOUT, ctx.epoch, ctx.step, h, v as u64]),
                });
            }
        }
    }

    let results = losses_and_grads(&state.model, &examples, blank)?;
    let mut grads = Gradients::zeros_like(&state.model);
    let sup_w = 1.0 / report.attempted_supervised as f64;
    let mut any = false;
    for (k, r) in results.iter().enumerate() {
        let is_sup = k < n_sup_examples;
        match r {
            None if is_sup => report.skipped_supervised += 1,
            None => report.skipped_unsupervised += 1,
            Some((loss, g)) => {
                any = true;
                if is_sup {
                    report.sup_loss += loss * sup_w;
                    grads.add_scaled(g, sup_w);
                } else {
                    let w = 1.0 / report.attempted_unsupervised as f64;
                    report.unsup_loss += loss * w;
                    grads.add_scaled(g, obj.gamma * w);
                }
            }
        }
    }
    report.total_loss = report.sup_loss + if use_unsup { obj.gamma * report.unsup_loss } else { 0.0 };
    if report.skipped_supervised + report.skipped_unsupervised > 0 {
        log::debug!(
            "epoch {} step {}: skipped {} supervised and {} unsupervised pairs",
            ctx.epoch,
            ctx.step,
            report.skipped_supervised,
            report.skipped_unsupervised
        );
    }
    if any {
        adam_step(&mut state.model, &mut state.optimizer, &grads)?;
        report.updated = true;
    } else {
        log::warn!("epoch {} step {}: no trainable pair, update skipped", ctx.epoch, ctx.step);
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

enum UnsupTarget {
    Labels(PseudoLabelRecord),
    Skip(PseudoLabelRecord),
    /// Clean-feature posteriors at the stacked frame rate.
    Soft(Matrix),
}

fn unsupervised_targets(
    state: &TrainState,
    batch: &[UnlabeledUtterance<'_>],
    cfg: &SemiConfig,
    source: UnsupSource<'_>,
    blank: usize,
    ctx: StepContext,
) -> Result<Vec<UnsupTarget>, TrainError> {
    let model = &state.model;
    let stack = cfg.pipeline.stack;
    let as_target = |record: PseudoLabelRecord| if record.skipped { UnsupTarget::Skip(record) } else { UnsupTarget::Labels(record) };
    match (cfg.objective.regime, source) {
        (Regime::OneShot, UnsupSource::Frozen(labels)) => batch
            .iter()
            .map(|u| {
                labels
                    .get(u.id)
                    .cloned()
                    .map(as_target)
                    .ok_or_else(|| TrainError::InvalidConfig(format!("no frozen pseudo-label for {}", u.id)))
            })
            .collect(),
        (Regime::OneShot, UnsupSource::Current) => Err(TrainError::InvalidConfig("one-shot steps need frozen labels".into())),
        (Regime::Uda, _) => batch
            .par_iter()
            .map(|u| Ok(UnsupTarget::Soft(model.infer(&stack_frames(u.features, stack))?.softmax_rows())))
            .collect(),
        (_, _) => batch
            .par_iter()
            .map(|u| {
                let logits = model.infer(&stack_frames(u.features, stack))?;
                let hyp = beam_decode(&Posteriorgram::from_logits(&logits), blank, cfg.objective.beam);
                Ok(as_target(PseudoLabelRecord {
                    id: u.id.to_string(),
                    skipped: hyp.labels.is_empty(),
                    labels: hyp.labels,
                    log_score: hyp.log_score,
                    epoch: ctx.epoch,
                    model_version: model.version(),
                }))
            })
            .collect(),
    }
}

/// Number of updates per epoch: enough for both splits to be consumed once.
pub fn steps_per_epoch(n_sup: usize, n_unsup: usize, obj: &ObjectiveConfig) -> usize {
    let sup = n_sup.div_ceil(obj.batch_supervised);
    if obj.batch_unsupervised == 0 || n_unsup == 0 {
        sup
    } else {
        sup.max(n_unsup.div_ceil(obj.batch_unsupervised))
    }
}

/// Decodes every unlabeled utterance once with `model`.
pub fn decode_unsupervised(model: &AcousticModel, corpus: &Corpus, stack: usize, beam: usize, epoch: u64) -> Result<Vec<PseudoLabelRecord>, TrainError> {
    let blank = corpus.vocab.blank();
    let utts: Vec<UnlabeledUtterance<'_>> = corpus.unsupervised.iter().collect();
    utts.par_iter()
        .map(|u| {
            let logits = model.infer(&stack_frames(u.features, stack))?;
            let hyp = beam_decode(&Posteriorgram::from_logits(&logits), blank, beam);
            Ok(PseudoLabelRecord {
                id: u.id.to_string(),
                skipped: hyp.labels.is_empty(),
                labels: hyp.labels,
                log_score: hyp.log_score,
                epoch,
                model_version: model.version(),
            })
        })
        .collect()
}

/// Continues training `base` with the configured semi-supervised regime.
pub fn train_semi(corpus: &Corpus, base: &AcousticModel, cfg: &SemiConfig, epochs: u64, seed: u64) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    let mut model = base.clone();
    if let Some(rate) = cfg.dropout {
        model.set_dropout(rate)?;
    }
    let mut state = TrainState::fresh(model, cfg.optimizer.clone(), seed, corpus, &cfg.pipeline)?;
    let blank = corpus.vocab.blank();
    let obj = &cfg.objective;

    let frozen: Option<HashMap<String, PseudoLabelRecord>> = if obj.regime == Regime::OneShot {
        let records = decode_unsupervised(&state.model, corpus, cfg.pipeline.stack, obj.one_shot_beam, 0)?;
        if cfg.oracle_diagnostics {
            let err = pseudo_label_oracle_error(&records, corpus)?.token_error_rate;
            state.history[0].pseudo_label_oracle_error = Some(err);
        }
        Some(records.into_iter().map(|r| (r.id.clone(), r)).collect())
    } else {
        None
    };

    let n_sup = corpus.supervised.len();
    let n_unsup = corpus.unsupervised.len();
    let steps = steps_per_epoch(n_sup, n_unsup, obj);
    for _ in 0..epochs {
        let epoch = state.cursor.epoch + 1;
        let sup_order = shuffled(n_sup, derive_seed(seed, &[TAG_SUP_ORDER, epoch]));
        let unsup_order = shuffled(n_unsup, derive_seed(seed, &[TAG_UNSUP_ORDER, epoch]));
        let mut records = Vec::new();
        let (mut sup_loss, mut unsup_loss, mut seconds, mut updates) = (0.0, 0.0, 0.0, 0u64);
        for j in 0..steps {
            let sup_batch: Vec<&Utterance> = (0..obj.batch_supervised)
                .map(|k| &corpus.supervised[sup_order[(j * obj.batch_supervised + k) % n_sup]])
                .collect();
            let lo = (j * obj.batch_unsupervised).min(n_unsup);
            let hi = ((j + 1) * obj.batch_unsupervised).min(n_unsup);
            let unsup_batch: Vec<UnlabeledUtterance<'_>> = unsup_order[lo..hi].iter().map(|&i| corpus.unsupervised.get(i)).collect();
            let source = match &frozen {
                Some(map) => UnsupSource::Frozen(map),
                None => UnsupSource::Current,
            };
            let ctx = StepContext { seed, epoch, step: state.cursor.step };
            let reads_before = corpus.unsupervised.label_reads();
            let report = semi_supervised_step(&mut state, &sup_batch, &unsup_batch, cfg, source, blank, ctx)?;
            state.trainer_label_reads += corpus.unsupervised.label_reads() - reads_before;
            state.cursor.step += 1;
            sup_loss += report.sup_loss;
            unsup_loss += report.unsup_loss;
            seconds += report.seconds;
            updates += 1;
            records.extend(report.records);
        }
        state.cursor.epoch = epoch;
        let dev = dev_error(&state.model, corpus, &cfg.pipeline)?;
        let oracle = if cfg.oracle_diagnostics && !records.is_empty() {
            Some(pseudo_label_oracle_error(&records, corpus)?.token_error_rate)
        } else {
            None
        };
        let n = updates.max(1) as f64;
        state.finish_epoch(EpochRecord {
            epoch,
            step: state.cursor.step,
            sup_loss: sup_loss / n,
            unsup_loss: unsup_loss / n,
            dev_token_error: dev,
            pseudo_label_oracle_error: oracle,
            seconds_per_update: seconds / n,
        });
    }
    Ok(state)
}

fn with_regime(cfg: &SemiConfig, regime: Regime) -> SemiConfig {
    let mut c = cfg.clone();
    c.objective.regime = regime;
    c
}

/// On-the-fly self-training from a base model.
pub fn train_self(corpus: &Corpus, base: &AcousticModel, cfg: &SemiConfig, epochs: u64, seed: u64) -> Result<TrainState, TrainError> {
    train_semi(corpus, base, &with_regime(cfg, Regime::SelfTraining), epochs, seed)
}

/// UDA baseline: soft per-frame targets from the current model on clean features.
pub fn train_uda(corpus: &Corpus, base: &AcousticModel, cfg: &SemiConfig, epochs: u64, seed: u64) -> Result<TrainState, TrainError> {
    train_semi(corpus, base, &with_regime(cfg, Regime::Uda), epochs, seed)
}

/// Pseudo-labels decoded once with the base model and never refreshed.
pub fn train_one_shot(corpus: &Corpus, base: &AcousticModel, cfg: &SemiConfig, epochs: u64, seed: u64) -> Result<TrainState, TrainError> {
    train_semi(corpus, base, &with_regime(cfg, Regime::OneShot), epochs, seed)
}
