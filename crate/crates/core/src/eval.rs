//! Token error rate, dev/test evaluation and oracle diagnostics.
//!
//! Rates are micro-averaged: total edit operations over total reference
//! tokens. Hidden labels of the unsupervised split are read only through
//! [`Oracle`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{stack_frames, Corpus, Split, Utterance};
use crate::decode::{beam_decode, Hypothesis, Posteriorgram};
use crate::matrix::Matrix;
use crate::model::{AcousticModel, ModelError};
use crate::selftrain::PseudoLabelRecord;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the unsupervised split can only be scored with the oracle flag")]
    OracleRequired,
    #[error("utterance {0} has no reference labels")]
    MissingReference(String),
    #[error("pseudo-label record {0} does not name an unsupervised utterance")]
    UnknownRecord(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Edit operations of a minimal unit-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Levenshtein alignment of `hyp` against `reference`. On ties the backtrace
/// prefers a diagonal move, then a deletion, then an insertion.
pub fn edit_distance(hyp: &[usize], reference: &[usize]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, c) in cost[0].iter_mut().enumerate() {
        *c = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            cost[i][j] = diag.min(cost[i - 1][j] + 1).min(cost[i][j - 1] + 1);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub = usize::from(reference[i - 1] != hyp[j - 1]);
            if cost[i][j] == cost[i - 1][j - 1] + sub {
                counts.substitutions += sub;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[i][j] == cost[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Corpus-level error counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_tokens: usize,
    pub token_error_rate: f64,
}

impl ErrorReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> Self {
        let mut r = ErrorReport::default();
        for (hyp, reference) in pairs {
            let c = edit_distance(hyp, reference);
            r.substitutions += c.substitutions;
            r.insertions += c.insertions;
            r.deletions += c.deletions;
            r.ref_tokens += reference.len();
        }
        r.token_error_rate = if r.ref_tokens == 0 { 0.0 } else { r.errors() as f64 / r.ref_tokens as f64 };
        r
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Serialized evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub split: Split,
    pub beam: usize,
    pub checkpoint: String,
    #[serde(flatten)]
    pub report: ErrorReport,
}

/// Model input for raw (normalized) features.
pub fn model_input(features: &Matrix, stack: usize) -> Matrix {
    stack_frames(features, stack)
}

/// Eval-mode decode of one utterance.
pub fn decode_utterance(model: &AcousticModel, features: &Matrix, stack: usize, blank: usize, beam: usize) -> Result<Hypothesis, ModelError> {
    let logits = model.infer(&model_input(features, stack))?;
    Ok(beam_decode(&Posteriorgram::from_logits(&logits), blank, beam))
}

/// Decodes every utterance and scores against its labels.
pub fn evaluate(model: &AcousticModel, utts: &[Utterance], stack: usize, blank: usize, beam: usize) -> Result<ErrorReport, EvalError> {
    let hyps: Vec<Vec<usize>> = utts
        .par_iter()
        .map(|u| decode_utterance(model, &u.features, stack, blank, beam).map(|h| h.labels))
        .collect::<Result<_, _>>()?;
    let mut pairs = Vec::with_capacity(utts.len());
    for (u, h) in utts.iter().zip(&hyps) {
        let r = u.labels.as_deref().ok_or_else(|| EvalError::MissingReference(u.id.clone()))?;
        pairs.push((h.as_slice(), r));
    }
    Ok(ErrorReport::from_pairs(pairs))
}

/// Privileged read access to the unsupervised split's hidden labels.
pub struct Oracle<'a> {
    corpus: &'a Corpus,
}

impl<'a> Oracle<'a> {
    pub fn new(corpus: &'a Corpus) -> Self {
        Self { corpus }
    }

    pub fn hidden_labels(&self, index: usize) -> Option<&'a [usize]> {
        self.corpus.unsupervised.reveal_labels(index)
    }

    pub fn hidden_labels_by_id(&self, id: &str) -> Option<&'a [usize]> {
        self.corpus.unsupervised.position(id).and_then(|i| self.hidden_labels(i))
    }
}

/// Scores a split. The unsupervised split requires `oracle = true`.
pub fn evaluate_split(
    model: &AcousticModel,
    corpus: &Corpus,
    split: Split,
    stack: usize,
    beam: usize,
    oracle: bool,
) -> Result<ErrorReport, EvalError> {
    let blank = corpus.vocab.blank();
    if let Some(utts) = corpus.labeled(split) {
        return evaluate(model, utts, stack, blank, beam);
    }
    if !oracle {
        return Err(EvalError::OracleRequired);
    }
    let o = Oracle::new(corpus);
    let unsup = &corpus.unsupervised;
    let hyps: Vec<Vec<usize>> = (0..unsup.len())
        .into_par_iter()
        .map(|i| decode_utterance(model, unsup.get(i).features, stack, blank, beam).map(|h| h.labels))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&[usize]> = (0..unsup.len())
        .map(|i| o.hidden_labels(i).ok_or_else(|| EvalError::MissingReference(unsup.get(i).id.to_string())))
        .collect::<Result<_, _>>()?;
    Ok(ErrorReport::from_pairs(hyps.iter().map(Vec::as_slice).zip(refs)))
}

/// Token error of pseudo-labels against hidden ground truth. Skipped
/// (empty) records count as full deletions of their references.
pub fn pseudo_label_oracle_error(records: &[PseudoLabelRecord], corpus: &Corpus) -> Result<ErrorReport, EvalError> {
    let o = Oracle::new(corpus);
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let reference = o.hidden_labels_by_id(&r.id).ok_or_else(|| EvalError::UnknownRecord(r.id.clone()))?;
        let hyp: &[usize] = if r.skipped { &[] } else { &r.labels };
        pairs.push((hyp, reference));
    }
    Ok(ErrorReport::from_pairs(pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use proptest::prelude::*;

    #[test]
    fn identical_sequences_cost_nothing() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), EditCounts::default());
    }

    #[test]
    fn missing_tail_is_a_deletion() {
        let c = edit_distance(&[1, 2], &[1, 2, 3]);
        assert_eq!(c, EditCounts { substitutions: 0, insertions: 0, deletions: 1 });
        let r = ErrorReport::from_pairs([(&[1usize, 2][..], &[1usize, 2, 3][..])]);
        assert!((r.token_error_rate - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_prefer_substitution() {
        // (a) vs (b): one substitution rather than deletion + insertion
        assert_eq!(edit_distance(&[2], &[1]), EditCounts { substitutions: 1, insertions: 0, deletions: 0 });
        let c = edit_distance(&[], &[1, 2]);
        assert_eq!(c.deletions, 2);
        let c = edit_distance(&[1, 2], &[]);
        assert_eq!(c.insertions, 2);
    }

    #[test]
    fn rate_can_exceed_one() {
        let r = ErrorReport::from_pairs([(&[1usize, 2, 3][..], &[4usize][..])]);
        assert_eq!(r.errors(), 3);
        assert_eq!(r.token_error_rate, 3.0);
    }

    fn levenshtein_plain(a: &[usize], b: &[usize]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = levenshtein_plain(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        sub.min(levenshtein_plain(&a[1..], b) + 1).min(levenshtein_plain(a, &b[1..]) + 1)
    }

    proptest! {
        #[test]
        fn edit_distance_properties(
            a in proptest::collection::vec(1usize..4, 0..7),
            b in proptest::collection::vec(1usize..4, 0..7),
            c in proptest::collection::vec(1usize..4, 0..7),
        ) {
            let ab = edit_distance(&a, &b);
            let ba = edit_distance(&b, &a);
            prop_assert_eq!(ab.total(), levenshtein_plain(&a, &b));
            prop_assert_eq!(ab.total(), ba.total());
            prop_assert_eq!(a.len() + ab.deletions, b.len() + ab.insertions);
            prop_assert_eq!(ab.total() == 0, a == b);
            prop_assert!(ab.total() <= a.len().max(b.len()));
            let ac = edit_distance(&a, &c).total();
            let cb = edit_distance(&c, &b).total();
            prop_assert!(ab.total() <= ac + cb);
        }
    }

    #[test]
    fn micro_average_is_total_over_total() {
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = vec![(vec![1], vec![1, 2]), (vec![3, 3], vec![3]), (vec![], vec![1, 2, 3])];
        let r = ErrorReport::from_pairs(pairs.iter().map(|(h, r)| (h.as_slice(), r.as_slice())));
        let per: usize = pairs.iter().map(|(h, r)| edit_distance(h, r).total()).sum();
        assert_eq!(r.errors(), per);
        assert_eq!(r.token_error_rate, per as f64 / 6.0);
    }

    fn tiny_corpus() -> Corpus {
        let spec = CorpusSpec { n_supervised: 2, n_unsupervised: 3, n_dev: 2, n_test: 2, ..CorpusSpec::default() };
        generate_corpus(&spec, 1).unwrap()
    }

    #[test]
    fn unsupervised_scoring_needs_the_oracle_flag() {
        let c = tiny_corpus();
        let m = AcousticModel::new(
            crate::model::ModelConfig { input_dim: 24, hidden: 2, layers: 1, classes: 5, dropout: 0.0 },
            0,
        )
        .unwrap();
        assert!(matches!(evaluate_split(&m, &c, Split::Unsupervised, 3, 2, false), Err(EvalError::OracleRequired)));
        assert_eq!(c.unsupervised.label_reads(), 0);
        let hash = m.param_hash();
        let a = evaluate_split(&m, &c, Split::Unsupervised, 3, 2, true).unwrap();
        let b = evaluate_split(&m, &c, Split::Dev, 3, 20, false).unwrap();
        assert_eq!(b, evaluate_split(&m, &c, Split::Dev, 3, 20, false).unwrap());
        assert!(a.ref_tokens > 0);
        assert_eq!(m.param_hash(), hash);
    }

    #[test]
    fn pseudo_label_oracle_conventions() {
        let c = tiny_corpus();
        let o = Oracle::new(&c);
        let exact: Vec<PseudoLabelRecord> = (0..c.unsupervised.len())
            .map(|i| PseudoLabelRecord {
                id: c.unsupervised.get(i).id.to_string(),
                labels: o.hidden_labels(i).unwrap().to_vec(),
                log_score: 0.0,
                epoch: 1,
                model_version: 0,
                skipped: false,
            })
            .collect();
        assert_eq!(pseudo_label_oracle_error(&exact, &c).unwrap().token_error_rate, 0.0);

        let mut skipped = exact.clone();
        skipped[0].labels.clear();
        skipped[0].skipped = true;
        let r = pseudo_label_oracle_error(&skipped, &c).unwrap();
        assert_eq!(r.deletions, o.hidden_labels(0).unwrap().len());

        let mut unknown = exact;
        unknown[0].id = "nope".into();
        assert!(matches!(pseudo_label_oracle_error(&unknown, &c), Err(EvalError::UnknownRecord(_))));
    }
}
