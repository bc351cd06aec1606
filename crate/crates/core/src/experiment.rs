//! Config-driven experiment runner: corpus preparation, the training
//! regimes, sweeps and result reports.
//!
//! Every file a run writes lives under its output directory:
//!
//! | file | contents |
//! |------|----------|
//! | `config.json` | resolved configuration, enough to rerun |
//! | `base_learning_curve.csv`, `base.ckpt` | base phase, when a semi phase follows |
//! | `learning_curve.csv`, `best.ckpt` | final phase |
//! | `eval_dev.json`, `eval_test.json` | best model, `eval_beam` |
//! | `summary.json` | best dev error and timing |
//! | `FAILED` | error message of an aborted run |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::corpus::{generate_corpus, load_corpus, normalize, Corpus, CorpusError, CorpusSpec, Split};
use crate::eval::{evaluate_split, EvalError, EvalRecord};
use crate::model::{load_checkpoint, save_checkpoint, AcousticModel, AdamConfig, ModelConfig, ModelError};
use crate::selftrain::{
    run_supervised_epochs, train_semi, train_supervised, write_learning_curve, EpochRecord, ObjectiveConfig, PipelineConfig, Regime, SemiConfig,
    SupervisedConfig, TrainError, TrainState,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Generated from a spec with `seeds.corpus`.
    Spec(CorpusSpec),
    /// A corpus file written by `gen-corpus`.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { layers: 1, hidden: 24, dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs_base: u64,
    pub epochs_semi: u64,
    /// Mini-batch size of the base phase.
    pub batch_base: usize,
    /// Semi-phase learning rate is the base rate times this factor.
    pub semi_lr_factor: f64,
    /// Semi-phase dropout; `None` keeps the base rate.
    pub semi_dropout: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { epochs_base: 20, epochs_semi: 0, batch_base: 4, semi_lr_factor: 0.2, semi_dropout: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub corpus: u64,
    pub init: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { corpus: 1, init: 2, train: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Named preset the remaining keys are layered on. Resolved on load.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub corpus: CorpusSource,
    pub normalize: bool,
    pub stack: usize,
    pub network: NetworkConfig,
    pub optimizer: AdamConfig,
    /// `None` disables augmentation everywhere.
    pub augment: Option<AugmentConfig>,
    pub objective: ObjectiveConfig,
    pub schedule: Schedule,
    pub seeds: Seeds,
    pub eval_beam: usize,
    /// Start the semi phase from this checkpoint instead of training a base.
    pub base_checkpoint: Option<PathBuf>,
    /// Log pseudo-label error against hidden labels each epoch.
    pub oracle_diagnostics: bool,
    /// Write wall-clock timing into the learning curve and summary.
    pub record_timing: bool,
    /// Default output directory for `sweep`.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            corpus: CorpusSource::Spec(CorpusSpec::default()),
            normalize: true,
            stack: 3,
            network: NetworkConfig::default(),
            optimizer: AdamConfig::default(),
            augment: Some(AugmentConfig::default()),
            objective: ObjectiveConfig { regime: Regime::Supervised, ..ObjectiveConfig::default() },
            schedule: Schedule::default(),
            seeds: Seeds::default(),
            eval_beam: 20,
            base_checkpoint: None,
            oracle_diagnostics: true,
            record_timing: true,
            output_dir: None,
        }
    }
}

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: &[&str] = &["base", "base-noaug", "continue-supervised", "selftrain-g1-w1", "selftrain-noaug-unsup", "uda", "one-shot"];

impl ExperimentConfig {
    /// Built-in experiments. All semi-supervised presets start from the
    /// `base` recipe.
    pub fn preset(name: &str) -> Result<Self, ExperimentError> {
        let mut c = Self { preset: Some(name.to_string()), ..Self::default() };
        let semi = |c: &mut Self, regime: Regime| {
            c.objective.regime = regime;
            c.schedule.epochs_semi = 15;
        };
        match name {
            "base" => {}
            "base-noaug" => c.augment = None,
            "continue-supervised" => semi(&mut c, Regime::Supervised),
            "selftrain-g1-w1" => semi(&mut c, Regime::SelfTraining),
            "selftrain-noaug-unsup" => {
                semi(&mut c, Regime::SelfTraining);
                c.objective.augment_unsupervised = false;
            }
            "uda" => semi(&mut c, Regime::Uda),
            "one-shot" => semi(&mut c, Regime::OneShot),
            _ => return Err(ExperimentError::Config(format!("unknown preset {name:?}; known: {}", PRESETS.join(", ")))),
        }
        Ok(c)
    }

    /// Parses JSON. A `preset` key selects the starting point; every other
    /// key overrides it, merging objects recursively.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(map) = &value else {
            return Err(ExperimentError::Config("top level must be an object".into()));
        };
        let cfg: Self = match map.get("preset") {
            None => serde_json::from_value(value)?,
            Some(Value::String(name)) => {
                let mut base = serde_json::to_value(Self::preset(name)?)?;
                merge(&mut base, value);
                serde_json::from_value(base)?
            }
            Some(_) => return Err(ExperimentError::Config("preset must be a string".into())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if let CorpusSource::Spec(s) = &self.corpus {
            s.validate()?;
            if s.stack != self.stack {
                return bad(format!("corpus.spec.stack ({}) must equal stack ({})", s.stack, self.stack));
            }
        }
        if self.stack == 0 || self.eval_beam == 0 {
            return bad("stack and eval_beam must be positive".into());
        }
        if self.network.layers == 0 || self.network.hidden == 0 {
            return bad("network.layers and network.hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.network.dropout) {
            return bad(format!("network.dropout must be in [0, 1), got {}", self.network.dropout));
        }
        if let Some(d) = self.schedule.semi_dropout {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("schedule.semi_dropout must be in [0, 1), got {d}"));
            }
        }
        if !(self.schedule.semi_lr_factor > 0.0 && self.schedule.semi_lr_factor.is_finite()) {
            return bad("schedule.semi_lr_factor must be positive".into());
        }
        if self.schedule.batch_base == 0 {
            return bad("schedule.batch_base must be positive".into());
        }
        self.optimizer.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if let Some(a) = &self.augment {
            a.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        self.objective.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.objective.augment_unsupervised && self.augment.is_none() && self.has_semi_phase() {
            return bad("objective.augment_unsupervised needs augment".into());
        }
        if self.base_checkpoint.is_some() && !self.has_semi_phase() {
            return bad("base_checkpoint only applies to runs with a semi phase".into());
        }
        Ok(())
    }

    /// Whether a second phase follows the base phase.
    pub fn has_semi_phase(&self) -> bool {
        self.schedule.epochs_semi > 0
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig { stack: self.stack, eval_beam: self.eval_beam, augment: self.augment.clone() }
    }

    pub fn supervised_config(&self, corpus: &Corpus) -> SupervisedConfig {
        SupervisedConfig {
            model: ModelConfig {
                input_dim: corpus.spec.feature_dim * self.stack,
                hidden: self.network.hidden,
                layers: self.network.layers,
                classes: corpus.vocab.len(),
                dropout: self.network.dropout,
            },
            optimizer: self.optimizer.clone(),
            pipeline: self.pipeline(),
            batch_size: self.schedule.batch_base,
            init_seed: self.seeds.init,
        }
    }

    pub fn semi_config(&self) -> SemiConfig {
        SemiConfig {
            objective: self.objective.clone(),
            optimizer: AdamConfig { lr: self.optimizer.lr * self.schedule.semi_lr_factor, ..self.optimizer.clone() },
            pipeline: self.pipeline(),
            dropout: self.schedule.semi_dropout,
            oracle_diagnostics: self.oracle_diagnostics,
        }
    }

    /// Loads or generates the corpus and applies normalization.
    pub fn prepare_corpus(&self) -> Result<Corpus, ExperimentError> {
        let raw = match &self.corpus {
            CorpusSource::Spec(s) => generate_corpus(s, self.seeds.corpus)?,
            CorpusSource::Path(p) => load_corpus(p)?,
        };
        Ok(if self.normalize { normalize(&raw) } else { raw })
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Final metrics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub regime: Regime,
    pub best_epoch: u64,
    pub best_dev_error: f64,
    pub test_error: f64,
    /// Mean over the final phase's epochs; absent without `record_timing`.
    pub mean_seconds_per_update: Option<f64>,
    pub trainer_label_reads: usize,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn mean_seconds(history: &[EpochRecord]) -> f64 {
    let trained: Vec<f64> = history.iter().filter(|r| r.epoch > 0).map(|r| r.seconds_per_update).collect();
    if trained.is_empty() {
        0.0
    } else {
        trained.iter().sum::<f64>() / trained.len() as f64
    }
}

/// Runs one experiment into `out`. On error a `FAILED` file holding the
/// message is written next to whatever outputs were already produced.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, ExperimentError> {
    run_with_base(cfg, out, None)
}

fn run_with_base(cfg: &ExperimentConfig, out: &Path, base: Option<&AcousticModel>) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let failed = out.join("FAILED");
    if failed.exists() {
        std::fs::remove_file(&failed).map_err(io_err(&failed))?;
    }
    let result = run_inner(cfg, out, base);
    if let Err(e) = &result {
        let _ = std::fs::write(&failed, format!("{e}\n"));
    }
    result
}

fn run_inner(cfg: &ExperimentConfig, out: &Path, base: Option<&AcousticModel>) -> Result<RunSummary, ExperimentError> {
    write_file(&out.join("config.json"), cfg.to_json() + "\n")?;
    let corpus = cfg.prepare_corpus()?;
    let state = if cfg.has_semi_phase() {
        let base_model = match (base, &cfg.base_checkpoint) {
            (Some(m), _) => m.clone(),
            (None, Some(p)) => load_checkpoint(p, Some(corpus.vocab.len()))?.model,
            (None, None) => train_base(cfg, &corpus, out, "base_learning_curve.csv", "base.ckpt")?.best.model,
        };
        let state = train_semi(&corpus, &base_model, &cfg.semi_config(), cfg.schedule.epochs_semi, cfg.seeds.train)?;
        write_learning_curve(&state.history, out.join("learning_curve.csv"), cfg.record_timing).map_err(io_err(out))?;
        save_checkpoint(&state.best_checkpoint(), out.join("best.ckpt"))?;
        state
    } else {
        train_base(cfg, &corpus, out, "learning_curve.csv", "best.ckpt")?
    };

    let checkpoint = "best.ckpt".to_string();
    let mut reports = Vec::new();
    for (split, name) in [(Split::Dev, "eval_dev.json"), (Split::Test, "eval_test.json")] {
        let report = evaluate_split(&state.best.model, &corpus, split, cfg.stack, cfg.eval_beam, false)?;
        write_json(&out.join(name), &EvalRecord { split, beam: cfg.eval_beam, checkpoint: checkpoint.clone(), report })?;
        reports.push(report);
    }
    let summary = RunSummary {
        regime: if cfg.has_semi_phase() { cfg.objective.regime } else { Regime::Supervised },
        best_epoch: state.best.epoch,
        best_dev_error: state.best.dev_token_error,
        test_error: reports[1].token_error_rate,
        mean_seconds_per_update: cfg.record_timing.then(|| mean_seconds(&state.history)),
        trainer_label_reads: state.trainer_label_reads,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn train_base(cfg: &ExperimentConfig, corpus: &Corpus, out: &Path, curve: &str, ckpt: &str) -> Result<TrainState, ExperimentError> {
    let sup = cfg.supervised_config(corpus);
    let state = train_supervised(corpus, &sup, cfg.schedule.epochs_base, cfg.seeds.train)?;
    write_learning_curve(&state.history, out.join(curve), cfg.record_timing).map_err(io_err(out))?;
    save_checkpoint(&state.best_checkpoint(), out.join(ckpt))?;
    Ok(state)
}

/// Continues a base checkpoint's training with supervised data only.
pub fn resume_supervised(cfg: &ExperimentConfig, corpus: &Corpus, state: &mut TrainState, epochs: u64) -> Result<(), ExperimentError> {
    run_supervised_epochs(state, corpus, &cfg.supervised_config(corpus), epochs)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "gamma")]
    Gamma,
    #[serde(rename = "W")]
    Beam,
    #[serde(rename = "dropout")]
    Dropout,
    #[serde(rename = "lr")]
    Lr,
}

impl std::str::FromStr for SweepParam {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gamma" => Ok(Self::Gamma),
            "W" | "w" | "beam" => Ok(Self::Beam),
            "dropout" => Ok(Self::Dropout),
            "lr" => Ok(Self::Lr),
            _ => Err(ExperimentError::Config(format!("unknown sweep parameter {s:?}; expected gamma, W, dropout or lr"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gamma => "gamma",
            Self::Beam => "W",
            Self::Dropout => "dropout",
            Self::Lr => "lr",
        }
    }

    /// Applies `value` to the phase the parameter belongs to: the semi
    /// phase when there is one, else the base phase.
    fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<(), ExperimentError> {
        let semi = cfg.has_semi_phase();
        match self {
            Self::Gamma | Self::Beam if !semi => {
                return Err(ExperimentError::Config(format!("sweeping {} needs a semi phase (schedule.epochs_semi > 0)", self.name())))
            }
            Self::Gamma => cfg.objective.gamma = value,
            Self::Beam => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(ExperimentError::Config(format!("W must be a positive integer, got {value}")));
                }
                cfg.objective.beam = value as usize;
            }
            Self::Dropout if semi => cfg.schedule.semi_dropout = Some(value),
            Self::Dropout => cfg.network.dropout = value,
            Self::Lr if semi => cfg.schedule.semi_lr_factor = value / cfg.optimizer.lr,
            Self::Lr => cfg.optimizer.lr = value,
        }
        Ok(())
    }
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub best_dev_error: f64,
    pub mean_seconds_per_update: Option<f64>,
}

pub fn parse_values(csv: &str) -> Result<Vec<f64>, ExperimentError> {
    let values: Vec<f64> = csv
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| ExperimentError::Config(format!("not a number: {s:?}"))))
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(ExperimentError::Config("sweep needs at least one value".into()));
    }
    Ok(values)
}

/// Runs `cfg` once per value in sibling directories `out/<param>=<value>`
/// and writes `out/summary.csv`. With a semi phase the base model is
/// trained once into `out/base` and shared by every run.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64], out: &Path) -> Result<Vec<SweepRow>, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::Config("sweep needs at least one value".into()));
    }
    let mut runs = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        param.apply(&mut c, v)?;
        c.validate()?;
        runs.push((v, c));
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;

    let base = if cfg.has_semi_phase() && cfg.base_checkpoint.is_none() {
        let dir = out.join("base");
        let base_cfg = ExperimentConfig { schedule: Schedule { epochs_semi: 0, ..cfg.schedule.clone() }, ..cfg.clone() };
        run(&base_cfg, &dir)?;
        Some(load_checkpoint(dir.join("best.ckpt"), None)?.model)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(runs.len());
    for (v, c) in runs {
        let dir = out.join(format!("{}={v}", param.name()));
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_json(&dir.join("sweep.json"), &serde_json::json!({ "param": param.name(), "value": v }))?;
        let s = run_with_base(&c, &dir, base.as_ref())?;
        rows.push(SweepRow { value: v, best_dev_error: s.best_dev_error, mean_seconds_per_update: s.mean_seconds_per_update });
    }
    rows.sort_by(|a, b| a.value.total_cmp(&b.value));
    let mut csv = String::from("value,best_dev_error,mean_seconds_per_update\n");
    for r in &rows {
        let secs = r.mean_seconds_per_update.map(|s| format!("{s:.6}")).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{}", r.value, r.best_dev_error, secs);
    }
    write_file(&out.join("summary.csv"), csv)?;
    Ok(rows)
}

/// One row of a consolidated report. Missing artifacts are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub swept: Option<(String, f64)>,
    pub best_dev_error: Option<f64>,
    pub dev_error: Option<f64>,
    pub test_error: Option<f64>,
    pub mean_seconds_per_update: Option<f64>,
    pub missing: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

fn read_json(path: &Path) -> Option<Value> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

fn report_row(dir: &Path, name: String) -> ReportRow {
    let mut missing = Vec::new();
    let mut get = |file: &str| {
        let v = read_json(&dir.join(file));
        if v.is_none() {
            missing.push(file.to_string());
        }
        v
    };
    let summary = get("summary.json");
    let dev = get("eval_dev.json");
    let test = get("eval_test.json");
    let num = |v: &Option<Value>, key: &str| v.as_ref().and_then(|v| v.get(key)).and_then(Value::as_f64);
    let swept = read_json(&dir.join("sweep.json"))
        .and_then(|v| Some((v.get("param")?.as_str()?.to_string(), v.get("value")?.as_f64()?)));
    ReportRow {
        run: name,
        swept,
        best_dev_error: num(&summary, "best_dev_error"),
        dev_error: num(&dev, "token_error_rate"),
        test_error: num(&test, "token_error_rate"),
        mean_seconds_per_update: num(&summary, "mean_seconds_per_update"),
        missing,
    }
}

/// Collects every run under `dir` (the directory itself when it holds a
/// run, else its immediate subdirectories). Rows are sorted by swept value,
/// then by name.
pub fn report(dir: &Path) -> Result<Report, ExperimentError> {
    let meta = std::fs::metadata(dir).map_err(io_err(dir))?;
    if !meta.is_dir() {
        return Err(ExperimentError::Config(format!("{} is not a directory", dir.display())));
    }
    let mut rows = Vec::new();
    if dir.join("config.json").exists() {
        rows.push(report_row(dir, dir.file_name().map_or(".".into(), |n| n.to_string_lossy().into_owned())));
    } else {
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("config.json").exists())
            .collect();
        subdirs.sort();
        for d in subdirs {
            let name = d.file_name().unwrap_or_default().to_string_lossy().into_owned();
            rows.push(report_row(&d, name));
        }
    }
    rows.sort_by(|a, b| match (&a.swept, &b.swept) {
        (Some((_, x)), Some((_, y))) => x.total_cmp(y).then_with(|| a.run.cmp(&b.run)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.run.cmp(&b.run),
    });
    Ok(Report { rows })
}

impl Report {
    /// CSV with `NA` for missing values.
    pub fn to_csv(&self) -> String {
        let na = |x: Option<f64>| x.map_or("NA".to_string(), |v| v.to_string());
        let mut s = String::from("run,param,value,best_dev_error,dev_error,test_error,mean_seconds_per_update,missing\n");
        for r in &self.rows {
            let (p, v) = match &r.swept {
                Some((p, v)) => (p.clone(), v.to_string()),
                None => ("NA".into(), "NA".into()),
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.run,
                p,
                v,
                na(r.best_dev_error),
                na(r.dev_error),
                na(r.test_error),
                na(r.mean_seconds_per_update),
                r.missing.join(";")
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.corpus = CorpusSource::Spec(CorpusSpec { n_supervised: 4, n_unsupervised: 6, n_dev: 3, n_test: 3, label_len: (2, 3), ..CorpusSpec::default() });
        c.network = NetworkConfig { layers: 1, hidden: 4, dropout: 0.0 };
        c.schedule.epochs_base = 1;
        c.objective.batch_supervised = 2;
        c.objective.batch_unsupervised = 3;
        c
    }

    #[test]
    fn presets_are_valid_and_round_trip() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
            assert_eq!(back, c);
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn preset_keys_are_overridden_recursively() {
        let c = ExperimentConfig::from_json(r#"{"preset": "uda", "objective": {"gamma": 0.1}, "seeds": {"train": 9}}"#).unwrap();
        assert_eq!(c.objective.regime, Regime::Uda);
        assert_eq!(c.objective.gamma, 0.1);
        assert_eq!(c.objective.beam, 1);
        assert_eq!(c.seeds.train, 9);
        assert_eq!(c.seeds.init, Seeds::default().init);
    }

    #[test]
    fn invalid_configs_are_diagnosed() {
        for bad in [
            r#"{"unknown": 1}"#,
            r#"{"network": {"dropout": 1.5}}"#,
            r#"{"objective": {"gamma": -1}}"#,
            r#"{"preset": 3}"#,
            r#"[1]"#,
            r#"{"stack": 0}"#,
        ] {
            assert!(ExperimentConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn run_writes_artifacts_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.record_timing = false;
        c.schedule.epochs_semi = 1;
        c.objective.regime = Regime::SelfTraining;
        let a = run(&c, &dir.path().join("a")).unwrap();
        let b = run(&c, &dir.path().join("b")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trainer_label_reads, 0);
        for f in ["config.json", "learning_curve.csv", "base_learning_curve.csv", "best.ckpt", "base.ckpt", "eval_dev.json", "eval_test.json", "summary.json"] {
            let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        let snap = ExperimentConfig::load(dir.path().join("a/config.json")).unwrap();
        assert_eq!(snap, c);
    }

    #[test]
    fn failures_leave_a_marker() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.corpus = CorpusSource::Path(dir.path().join("missing.bin"));
        assert!(run(&c, dir.path()).is_err());
        assert!(dir.path().join("FAILED").exists());
        assert!(dir.path().join("config.json").exists());
    }

    #[test]
    fn sweep_sorts_rows_and_reports_them() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.schedule.epochs_semi = 1;
        c.objective.regime = Regime::SelfTraining;
        assert!(sweep(&c, SweepParam::Gamma, &[], dir.path()).is_err());
        let rows = sweep(&c, SweepParam::Gamma, &[1.0, 0.0], dir.path()).unwrap();
        assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![0.0, 1.0]);
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 3);

        std::fs::remove_file(dir.path().join("gamma=1/eval_test.json")).unwrap();
        let r = report(dir.path()).unwrap();
        let swept: Vec<_> = r.rows.iter().filter_map(|x| x.swept.clone()).collect();
        assert_eq!(swept, vec![("gamma".to_string(), 0.0), ("gamma".to_string(), 1.0)]);
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[1].missing, vec!["eval_test.json".to_string()]);
        assert!(r.to_csv().contains(",NA,"));
    }

    #[test]
    fn beam_sweep_needs_integers_and_a_semi_phase() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        assert!(sweep(&c, SweepParam::Beam, &[1.0], dir.path()).is_err());
        let mut s = c.clone();
        s.schedule.epochs_semi = 1;
        assert!(sweep(&s, SweepParam::Beam, &[1.5], dir.path()).is_err());
        assert!(parse_values(" , ").is_err());
        assert_eq!(parse_values("1, 5,10").unwrap(), vec![1.0, 5.0, 10.0]);
        assert_eq!("W".parse::<SweepParam>().unwrap(), SweepParam::Beam);
        assert!("momentum".parse::<SweepParam>().is_err());
    }
}
