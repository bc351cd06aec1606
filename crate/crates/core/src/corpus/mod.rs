//! Synthetic corpus: generation, preprocessing and persistence.
//!
//! Every utterance renders a random label sequence as blocks of frames. Each
//! token owns a fixed prototype vector; a token occupies a random number of
//! consecutive frames, each equal to the prototype plus Gaussian noise.

mod format;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::rng::{derive_seed, rng_from_seed};

pub use format::{load_corpus, read_corpus, save_corpus, write_corpus, CORPUS_VERSION};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("corpus parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("corpus validation error in record {id}: {message}")]
    Validation { id: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token inventory with a reserved blank symbol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    blank_index: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, blank_index: usize) -> Result<Self, CorpusError> {
        let v = Self { tokens, blank_index };
        v.validate()?;
        Ok(v)
    }

    /// `<blank>` at index 0 followed by `n` real tokens `t0..t{n-1}`.
    pub fn with_blank_first(n: usize) -> Self {
        let mut tokens = vec!["<blank>".to_string()];
        tokens.extend((0..n).map(|i| format!("t{i}")));
        Self { tokens, blank_index: 0 }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.tokens.len() < 2 {
            return Err(CorpusError::InvalidSpec("vocabulary needs a real token and a blank".into()));
        }
        if self.blank_index >= self.tokens.len() {
            return Err(CorpusError::InvalidSpec(format!(
                "blank index {} outside vocabulary of size {}",
                self.blank_index,
                self.tokens.len()
            )));
        }
        let mut sorted: Vec<&String> = self.tokens.iter().collect();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CorpusError::InvalidSpec("duplicate token identifiers".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn blank(&self) -> usize {
        self.blank_index
    }

    /// Number of classes including blank.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Indices of the real (non-blank) tokens, in order.
    pub fn real_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.tokens.len()).filter(move |&i| i != self.blank_index)
    }
}

/// One utterance. For the unsupervised split the labels are hidden ground
/// truth and only reachable through [`crate::eval::Oracle`].
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
}

/// Borrowed view of an unlabeled utterance: features only.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledUtterance<'a> {
    pub id: &'a str,
    pub features: &'a Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Supervised,
    Unsupervised,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Supervised, Split::Unsupervised, Split::Dev, Split::Test];

    pub fn code(self) -> u8 {
        match self {
            Split::Supervised => 0,
            Split::Unsupervised => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Split> {
        Split::ALL.get(usize::from(c)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Supervised => "sup",
            Split::Unsupervised => "unsup",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// The unsupervised split. Features are public; ground-truth labels are kept
/// for diagnostics and every read of them is counted.
#[derive(Debug, Default)]
pub struct UnlabeledSplit {
    items: Vec<Utterance>,
    label_reads: AtomicUsize,
}

impl Clone for UnlabeledSplit {
    fn clone(&self) -> Self {
        Self { items: self.items.clone(), label_reads: AtomicUsize::new(0) }
    }
}

impl PartialEq for UnlabeledSplit {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl UnlabeledSplit {
    pub(crate) fn new(items: Vec<Utterance>) -> Self {
        Self { items, label_reads: AtomicUsize::new(0) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> UnlabeledUtterance<'_> {
        let u = &self.items[i];
        UnlabeledUtterance { id: &u.id, features: &u.features }
    }

    pub fn iter(&self) -> impl Iterator<Item = UnlabeledUtterance<'_>> {
        self.items.iter().map(|u| UnlabeledUtterance { id: &u.id, features: &u.features })
    }

    /// Total number of hidden-label reads since construction.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Hidden labels of utterance `i`. Crate-private: the oracle is the only caller.
    pub(crate) fn reveal_labels(&self, i: usize) -> Option<&[usize]> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.items[i].labels.as_deref()
    }

    pub(crate) fn position(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|u| u.id == id)
    }

    pub(crate) fn raw_items(&self) -> &[Utterance] {
        &self.items
    }

    fn map_features(&self, f: impl Fn(&Matrix) -> Matrix) -> Self {
        Self::new(
            self.items
                .iter()
                .map(|u| Utterance { features: f(&u.features), ..u.clone() })
                .collect(),
        )
    }
}

fn default_stack() -> usize {
    3
}

/// Generation parameters for the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub prototype_seed: u64,
    pub label_len: (usize, usize),
    pub frames_per_token: (usize, usize),
    pub noise_stddev: f64,
    pub n_supervised: usize,
    pub n_unsupervised: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Frame-stacking factor the corpus must stay CTC-feasible under.
    #[serde(default = "default_stack")]
    pub stack: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            feature_dim: 8,
            prototype_seed: 1,
            label_len: (2, 5),
            frames_per_token: (2, 4),
            noise_stddev: 0.3,
            n_supervised: 50,
            n_unsupervised: 200,
            n_dev: 20,
            n_test: 20,
            stack: 3,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        if self.vocab_size < 1 {
            return bad("vocab_size must be at least 1");
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be at least 1");
        }
        if self.label_len.0 < 1 || self.label_len.0 > self.label_len.1 {
            return bad("label_len range must be nonempty and start at 1 or more");
        }
        if self.frames_per_token.0 < 1 {
            return bad("frames_per_token minimum must be at least 1");
        }
        if self.frames_per_token.0 > self.frames_per_token.1 {
            return bad("frames_per_token range is empty");
        }
        if !(self.noise_stddev >= 0.0 && self.noise_stddev.is_finite()) {
            return bad("noise_stddev must be finite and nonnegative");
        }
        if self.n_supervised == 0 || self.n_dev == 0 || self.n_test == 0 {
            return bad("supervised, dev and test splits need at least one utterance");
        }
        if self.stack < 1 {
            return bad("stack must be at least 1");
        }
        Ok(())
    }

    fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Supervised => self.n_supervised,
            Split::Unsupervised => self.n_unsupervised,
            Split::Dev => self.n_dev,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocab: Vocabulary,
    pub supervised: Vec<Utterance>,
    pub unsupervised: UnlabeledSplit,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    /// Labeled utterances of a split. `None` for the unsupervised split.
    pub fn labeled(&self, split: Split) -> Option<&[Utterance]> {
        match split {
            Split::Supervised => Some(&self.supervised),
            Split::Dev => Some(&self.dev),
            Split::Test => Some(&self.test),
            Split::Unsupervised => None,
        }
    }

    /// All records in file order with their split.
    pub(crate) fn all_records(&self) -> impl Iterator<Item = (Split, &Utterance)> {
        self.supervised
            .iter()
            .map(|u| (Split::Supervised, u))
            .chain(self.unsupervised.raw_items().iter().map(|u| (Split::Unsupervised, u)))
            .chain(self.dev.iter().map(|u| (Split::Dev, u)))
            .chain(self.test.iter().map(|u| (Split::Test, u)))
    }

    /// Checks the corpus invariants: label validity, feature shapes and id
    /// uniqueness across splits.
    pub fn validate(&self) -> Result<(), CorpusError> {
        self.spec.validate()?;
        self.vocab.validate()?;
        let mut ids = std::collections::HashSet::new();
        for (split, u) in self.all_records() {
            let err = |m: String| CorpusError::Validation { id: u.id.clone(), message: m };
            if !ids.insert(u.id.as_str()) {
                return Err(err("duplicate utterance id".into()));
            }
            if u.features.rows() == 0 || u.features.cols() == 0 {
                return Err(err("empty feature matrix".into()));
            }
            if u.features.cols() != self.spec.feature_dim {
                return Err(err(format!(
                    "feature dim {} differs from spec {}",
                    u.features.cols(),
                    self.spec.feature_dim
                )));
            }
            if u.features.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(err("non-finite feature value".into()));
            }
            match &u.labels {
                None if split != Split::Unsupervised => {
                    return Err(err(format!("{} utterance without labels", split.name())))
                }
                None => {}
                Some(l) => {
                    if l.is_empty() {
                        return Err(err("empty label sequence".into()));
                    }
                    if let Some(&bad) = l.iter().find(|&&t| t == self.vocab.blank() || t >= self.vocab.len()) {
                        return Err(err(format!("label {bad} is blank or outside the vocabulary")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Number of adjacent repeated labels in `labels`.
pub fn repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Minimum frame count CTC needs to emit `labels`.
pub fn min_ctc_frames(labels: &[usize]) -> usize {
    labels.len() + repeats(labels)
}

/// Renders a labeled synthetic corpus. Deterministic in `(spec, seed)`.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let vocab = Vocabulary::with_blank_first(spec.vocab_size);
    let prototypes = prototypes(spec);
    let mut splits: Vec<Vec<Utterance>> = Vec::with_capacity(4);
    for split in Split::ALL {
        let utts = (0..spec.split_size(split))
            .map(|i| {
                let useed = derive_seed(seed, &[u64::from(split.code()), i as u64]);
                render_utterance(spec, &vocab, &prototypes, useed, format!("{}-{i:05}", split.name()))
            })
            .collect();
        splits.push(utts);
    }
    let test = splits.pop().unwrap_or_default();
    let dev = splits.pop().unwrap_or_default();
    let unsup = splits.pop().unwrap_or_default();
    let supervised = splits.pop().unwrap_or_default();
    Ok(Corpus {
        spec: spec.clone(),
        vocab,
        supervised,
        unsupervised: UnlabeledSplit::new(unsup),
        dev,
        test,
    })
}

/// One prototype row per real token, drawn from N(0, 1) under `prototype_seed`.
pub fn prototypes(spec: &CorpusSpec) -> Matrix {
    let mut rng = rng_from_seed(spec.prototype_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..spec.vocab_size * spec.feature_dim).map(|_| normal.sample(&mut rng)).collect();
    Matrix::from_vec(spec.vocab_size, spec.feature_dim, data)
}

fn render_utterance(spec: &CorpusSpec, vocab: &Vocabulary, protos: &Matrix, seed: u64, id: String) -> Utterance {
    let mut rng = rng_from_seed(seed);
    let len = rng.gen_range(spec.label_len.0..=spec.label_len.1);
    let real: Vec<usize> = vocab.real_tokens().collect();
    let labels: Vec<usize> = (0..len).map(|_| real[rng.gen_range(0..real.len())]).collect();
    let mut durations: Vec<usize> = (0..len)
        .map(|_| rng.gen_range(spec.frames_per_token.0..=spec.frames_per_token.1))
        .collect();

    // Stretch durations round-robin until the stacked sequence is long enough.
    let needed_raw = spec.stack * (min_ctc_frames(&labels) - 1) + 1;
    let mut k = 0;
    while durations.iter().sum::<usize>() < needed_raw {
        durations[k % len] += 1;
        k += 1;
    }

    let d = spec.feature_dim;
    let total: usize = durations.iter().sum();
    let noise = Normal::new(0.0, spec.noise_stddev.max(0.0)).expect("valid stddev");
    let mut data = Vec::with_capacity(total * d);
    for (&tok, &dur) in labels.iter().zip(&durations) {
        let proto = protos.row(tok - 1);
        for _ in 0..dur {
            for &p in proto {
                let n = if spec.noise_stddev > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                // Stored values are f32-representable so the container round-trips exactly.
                data.push(f64::from((p + n) as f32));
            }
        }
    }
    Utterance { id, features: Matrix::from_vec(total, d, data), labels: Some(labels) }
}

/// Subtracts the per-dimension mean computed over the utterance's frames.
pub fn normalize_features(features: &Matrix) -> Matrix {
    let (t, d) = (features.rows(), features.cols());
    let mut mean = vec![0.0; d];
    for row in features.iter_rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut out = features.clone();
    for r in 0..t {
        for (x, m) in out.row_mut(r).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    out
}

/// Per-utterance mean normalization of every split.
pub fn normalize(corpus: &Corpus) -> Corpus {
    let norm = |v: &Vec<Utterance>| {
        v.iter()
            .map(|u| Utterance { features: normalize_features(&u.features), ..u.clone() })
            .collect::<Vec<_>>()
    };
    Corpus {
        spec: corpus.spec.clone(),
        vocab: corpus.vocab.clone(),
        supervised: norm(&corpus.supervised),
        unsupervised: corpus.unsupervised.map_features(normalize_features),
        dev: norm(&corpus.dev),
        test: norm(&corpus.test),
    }
}

/// Concatenates every `k` consecutive frames into one row of width `k * D`.
/// The final row is zero-padded when `T` is not a multiple of `k`.
pub fn stack_frames(features: &Matrix, k: usize) -> Matrix {
    assert!(k >= 1, "stack factor must be at least 1");
    if k == 1 {
        return features.clone();
    }
    let (t, d) = (features.rows(), features.cols());
    let rows = t.div_ceil(k);
    let mut out = Matrix::zeros(rows, k * d);
    for src in 0..t {
        let (r, slot) = (src / k, src % k);
        out.row_mut(r)[slot * d..(slot + 1) * d].copy_from_slice(features.row(src));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> CorpusSpec {
        CorpusSpec { n_supervised: 3, n_unsupervised: 4, n_dev: 2, n_test: 2, ..CorpusSpec::default() }
    }

    #[test]
    fn noise_free_rendering_repeats_prototype() {
        let spec = CorpusSpec {
            vocab_size: 1,
            label_len: (1, 1),
            frames_per_token: (3, 3),
            noise_stddev: 0.0,
            stack: 1,
            ..tiny_spec()
        };
        let c = generate_corpus(&spec, 5).unwrap();
        let protos = prototypes(&spec);
        let u = &c.supervised[0];
        assert_eq!(u.labels.as_deref(), Some(&[1][..]));
        assert_eq!(u.features.rows(), 3);
        for r in u.features.iter_rows() {
            for (x, p) in r.iter().zip(protos.row(0)) {
                assert_eq!(*x, f64::from(*p as f32));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&tiny_spec(), 11).unwrap();
        let b = generate_corpus(&tiny_spec(), 11).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&tiny_spec(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_zero_frames_per_token() {
        let spec = CorpusSpec { frames_per_token: (0, 3), ..tiny_spec() };
        assert!(matches!(generate_corpus(&spec, 1), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn every_utterance_is_ctc_feasible_after_stacking() {
        let spec = CorpusSpec { n_supervised: 200, frames_per_token: (1, 2), ..tiny_spec() };
        let c = generate_corpus(&spec, 3).unwrap();
        for (_, u) in c.all_records() {
            let labels = u.labels.as_ref().unwrap();
            let stacked = u.features.rows().div_ceil(spec.stack);
            assert!(stacked >= min_ctc_frames(labels), "{}", u.id);
        }
        c.validate().unwrap();
    }

    #[test]
    fn split_ids_are_disjoint() {
        let c = generate_corpus(&tiny_spec(), 2).unwrap();
        let mut ids: Vec<&str> = c.all_records().map(|(_, u)| u.id.as_str()).collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn constant_utterance_normalizes_to_zero() {
        let m = Matrix::from_rows(&[vec![2.0, -1.0], vec![2.0, -1.0], vec![2.0, -1.0]]);
        assert!(normalize_features(&m).as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalized_means_vanish_and_offsets_cancel() {
        let c = generate_corpus(&tiny_spec(), 4).unwrap();
        let u = &c.supervised[0].features;
        let n = normalize_features(u);
        for col in 0..n.cols() {
            let mean: f64 = (0..n.rows()).map(|r| n.get(r, col)).sum::<f64>() / n.rows() as f64;
            assert!(mean.abs() < 1e-9);
        }
        let mut shifted = u.clone();
        for r in 0..shifted.rows() {
            for (c, x) in shifted.row_mut(r).iter_mut().enumerate() {
                *x += c as f64 * 0.5 + 3.0;
            }
        }
        let ns = normalize_features(&shifted);
        for (a, b) in n.as_slice().iter().zip(ns.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stacking_shapes_and_padding() {
        let m = Matrix::from_vec(6, 2, (0..12).map(f64::from).collect());
        let s = stack_frames(&m, 3);
        assert_eq!((s.rows(), s.cols()), (2, 6));
        assert_eq!(s.row(1), &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(stack_frames(&m, 1), m);

        let m7 = Matrix::from_vec(7, 2, (1..=14).map(f64::from).collect());
        let s7 = stack_frames(&m7, 3);
        assert_eq!(s7.rows(), 3);
        assert_eq!(s7.row(2), &[13.0, 14.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn vocabulary_invariants() {
        assert!(Vocabulary::new(vec!["<b>".into()], 0).is_err());
        assert!(Vocabulary::new(vec!["<b>".into(), "a".into()], 2).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], 0).is_err());
        let v = Vocabulary::with_blank_first(3);
        assert_eq!(v.len(), 4);
        assert_eq!(v.real_tokens().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn unlabeled_view_counts_reveals() {
        let c = generate_corpus(&tiny_spec(), 9).unwrap();
        let _features: Vec<_> = c.unsupervised.iter().map(|u| u.features.rows()).collect();
        assert_eq!(c.unsupervised.label_reads(), 0);
        assert!(c.unsupervised.reveal_labels(0).is_some());
        assert_eq!(c.unsupervised.label_reads(), 1);
    }
}
