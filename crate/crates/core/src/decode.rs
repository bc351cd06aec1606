//! Token-level decoders over CTC posteriorgrams.
//!
//! Scores are comparable only within one decoder: [`greedy_decode`] reports
//! the log-probability of the single best path, while [`beam_decode`] and
//! [`exact_decode`] report the log of the summed mass of all paths that
//! collapse to the returned labels.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::ctc::{collapse, for_each_path};
use crate::matrix::{log_add, log_sum_exp, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("posteriorgram row {row} is not a log-distribution (log-sum-exp {lse})")]
    NotNormalized { row: usize, lse: f64 },
    #[error("exhaustive search over {0} paths exceeds the limit")]
    TooLarge(f64),
}

/// Per-frame log-posteriors over tokens plus blank.
#[derive(Clone, Debug, PartialEq)]
pub struct Posteriorgram {
    log_probs: Matrix,
}

impl Posteriorgram {
    pub fn from_logits(logits: &Matrix) -> Self {
        Self { log_probs: logits.log_softmax_rows() }
    }

    /// Wraps log-probabilities, checking each row normalizes within 1e-6.
    pub fn from_log_probs(log_probs: Matrix) -> Result<Self, DecodeError> {
        for (row, r) in log_probs.iter_rows().enumerate() {
            let lse = log_sum_exp(r);
            if lse.is_nan() || lse.abs() > 1e-6 || r.iter().any(|&x| x > 1e-12) {
                return Err(DecodeError::NotNormalized { row, lse });
            }
        }
        Ok(Self { log_probs })
    }

    pub fn log_probs(&self) -> &Matrix {
        &self.log_probs
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn probs(&self) -> Matrix {
        let mut m = self.log_probs.clone();
        m.as_mut_slice().iter_mut().for_each(|x| *x = x.exp());
        m
    }
}

/// A decoded label sequence (blank-free, collapsed) and its log score.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub log_score: f64,
}

/// Best path: per-frame argmax (lowest index wins ties), then collapse.
pub fn greedy_decode(post: &Posteriorgram, blank: usize) -> Hypothesis {
    let mut path = Vec::with_capacity(post.frames());
    let mut score = 0.0;
    for row in post.log_probs.iter_rows() {
        let (best, &lp) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |acc, (k, v)| if *v > *acc.1 { (k, v) } else { acc });
        path.push(best);
        score += lp;
    }
    Hypothesis { labels: collapse(&path, blank), log_score: score }
}

/// Prefix trie: every beam entry is a node, so prefixes are never copied.
struct Trie {
    parent: Vec<usize>,
    token: Vec<usize>,
    depth: Vec<usize>,
    children: HashMap<(usize, usize), usize>,
}

const ROOT: usize = 0;

impl Trie {
    fn new() -> Self {
        Self { parent: vec![ROOT], token: vec![usize::MAX], depth: vec![0], children: HashMap::new() }
    }

    fn child(&mut self, node: usize, token: usize) -> usize {
        let next = self.parent.len();
        let id = *self.children.entry((node, token)).or_insert(next);
        if id == next {
            self.parent.push(node);
            self.token.push(token);
            self.depth.push(self.depth[node] + 1);
        }
        id
    }

    fn last(&self, node: usize) -> Option<usize> {
        (node != ROOT).then(|| self.token[node])
    }

    fn labels(&self, mut node: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.depth[node]);
        while node != ROOT {
            out.push(self.token[node]);
            node = self.parent[node];
        }
        out.reverse();
        out
    }

    /// Higher mass first, then shorter, then lexicographically smaller.
    fn rank(&self, a: (usize, f64), b: (usize, f64)) -> Ordering {
        b.1.total_cmp(&a.1)
            .then(self.depth[a.0].cmp(&self.depth[b.0]))
            .then_with(|| self.labels(a.0).cmp(&self.labels(b.0)))
    }
}

#[derive(Clone, Copy)]
struct Mass {
    blank: f64,
    non_blank: f64,
}

impl Mass {
    const ZERO: Mass = Mass { blank: f64::NEG_INFINITY, non_blank: f64::NEG_INFINITY };

    fn total(self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// Prefix beam search keeping the `beam` most probable collapsed prefixes at
/// every frame. `beam == 1` is the greedy best-path decoder.
pub fn beam_decode(post: &Posteriorgram, blank: usize, beam: usize) -> Hypothesis {
    assert!(beam >= 1, "beam size must be at least 1");
    if beam == 1 {
        return greedy_decode(post, blank);
    }
    let mut trie = Trie::new();
    let mut entries: Vec<(usize, Mass)> = vec![(ROOT, Mass { blank: 0.0, non_blank: f64::NEG_INFINITY })];
    let mut next: HashMap<usize, Mass> = HashMap::new();
    for row in post.log_probs.iter_rows() {
        next.clear();
        for &(node, mass) in &entries {
            let total = mass.total();
            let e = next.entry(node).or_insert(Mass::ZERO);
            e.blank = log_add(e.blank, total + row[blank]);
            let last = trie.last(node);
            for (tok, &lp) in row.iter().enumerate() {
                if tok == blank {
                    continue;
                }
                let child = trie.child(node, tok);
                if last == Some(tok) {
                    // A repeat only extends the prefix after a blank.
                    let c = next.entry(child).or_insert(Mass::ZERO);
                    c.non_blank = log_add(c.non_blank, mass.blank + lp);
                    let s = next.entry(node).or_insert(Mass::ZERO);
                    s.non_blank = log_add(s.non_blank, mass.non_blank + lp);
                } else {
                    let c = next.entry(child).or_insert(Mass::ZERO);
                    c.non_blank = log_add(c.non_blank, total + lp);
                }
            }
        }
        let mut ranked: Vec<(usize, Mass)> = next.drain().collect();
        ranked.sort_by(|a, b| trie.rank((a.0, a.1.total()), (b.0, b.1.total())));
        ranked.truncate(beam);
        entries = ranked;
    }
    let (node, mass) = entries[0];
    Hypothesis { labels: trie.labels(node), log_score: mass.total().min(0.0) }
}

/// Largest path count [`exact_decode`] accepts.
pub const EXACT_LIMIT: f64 = 1e6;

/// Exhaustive `argmax_Y P(Y|X)`: enumerates every frame-level path and sums
/// the mass of each collapsed label sequence. Oracle for small inputs.
pub fn exact_decode(post: &Posteriorgram, blank: usize) -> Result<Hypothesis, DecodeError> {
    let paths = (post.classes() as f64).powi(post.frames() as i32);
    if paths > EXACT_LIMIT {
        return Err(DecodeError::TooLarge(paths));
    }
    let probs = post.probs();
    let mut mass: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut path = vec![0usize; post.frames()];
    for_each_path(&mut path, 0, post.classes(), &mut |p| {
        let pr: f64 = p.iter().enumerate().map(|(t, &k)| probs.get(t, k)).product();
        *mass.entry(collapse(p, blank)).or_insert(0.0) += pr;
    });
    let (labels, best) = mass
        .into_iter()
        .min_by(|a, b| b.1.total_cmp(&a.1).then(a.0.len().cmp(&b.0.len())).then_with(|| a.0.cmp(&b.0)))
        .expect("at least one path");
    Ok(Hypothesis { labels, log_score: best.ln().min(0.0) })
}
