//! Word-alignment scoring from per-word embeddings.
//!
//! The pipeline: embed source and hypothesis words, form bidirectional
//! row-softmax similarity matrices from dot products, intersect both
//! directions against a threshold `c`, and turn the surviving pairs into a
//! coverage F1. Precision and recall count *distinct* covered indices, so
//! both stay in `[0, 1]` even for many-to-many pair sets. Extra hypothesis
//! words depress precision (over-translation) and uncovered source words
//! depress recall (under-translation).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::TokenSentence;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("embedding dimension mismatch: source has {src_dim}, hypothesis has {hyp_dim}")]
    DimensionMismatch { src_dim: usize, hyp_dim: usize },
    #[error("embedding matrix must have at least one row")]
    EmptyMatrix,
    #[error("embedding matrix contains a non-finite entry at row {row}")]
    NonFiniteEntry { row: usize },
    #[error("ragged embedding matrix: row {row} has {got} entries, expected {expected}")]
    RaggedRow {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("no embedding for word {0:?}")]
    UnknownWord(String),
    #[error("malformed embedding file {path} at line {line}: {reason}")]
    MalformedEmbeddingFile {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One embedding row per word.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl EmbeddingMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, AlignError> {
        if rows.is_empty() {
            return Err(AlignError::EmptyMatrix);
        }
        let dim = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(AlignError::RaggedRow {
                    row: i,
                    got: row.len(),
                    expected: dim,
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(AlignError::NonFiniteEntry { row: i });
            }
        }
        Ok(Self { rows, dim })
    }

    pub fn word_count(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Row-stochastic similarity grids for both alignment directions.
///
/// `sim_xy[i][j]` is the softmax over hypothesis words `j` of the dot
/// products with source word `i`; `sim_yx` is the fresh softmax in the
/// opposite direction (not the transpose).
#[derive(Debug, Clone)]
pub struct SimilarityPair {
    pub sim_xy: Vec<Vec<f64>>,
    pub sim_yx: Vec<Vec<f64>>,
}

/// Alignment pair set plus coverage precision/recall/F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// `(source index, hypothesis index)` pairs surviving both thresholds.
    pub pairs: BTreeSet<(usize, usize)>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold_c: f64,
}

impl AlignmentResult {
    fn empty(threshold_c: f64) -> Self {
        Self {
            pairs: BTreeSet::new(),
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            threshold_c,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable row softmax: subtract the row max before
/// exponentiating.
fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Computes both direction similarity matrices from dot products.
pub fn similarity_matrices(
    h_x: &EmbeddingMatrix,
    h_y: &EmbeddingMatrix,
) -> Result<SimilarityPair, AlignError> {
    if h_x.dim() != h_y.dim() {
        return Err(AlignError::DimensionMismatch {
            src_dim: h_x.dim(),
            hyp_dim: h_y.dim(),
        });
    }
    let sim_xy: Vec<Vec<f64>> = h_x
        .rows()
        .iter()
        .map(|x_row| {
            let logits: Vec<f64> = h_y.rows().iter().map(|y_row| dot(x_row, y_row)).collect();
            softmax_row(&logits)
        })
        .collect();
    let sim_yx: Vec<Vec<f64>> = h_y
        .rows()
        .iter()
        .map(|y_row| {
            let logits: Vec<f64> = h_x.rows().iter().map(|x_row| dot(y_row, x_row)).collect();
            softmax_row(&logits)
        })
        .collect();
    Ok(SimilarityPair { sim_xy, sim_yx })
}

/// Keeps `(i, j)` iff both directions strictly exceed the threshold:
/// `sim_xy[i][j] > c` and `sim_yx[j][i] > c`. A value exactly at `c` is
/// excluded.
pub fn extract_alignment(
    sims: &SimilarityPair,
    c: f64,
) -> Result<BTreeSet<(usize, usize)>, AlignError> {
    if !(c > 0.0 && c < 1.0) {
        return Err(AlignError::BadThreshold(c));
    }
    let mut pairs = BTreeSet::new();
    for (i, row) in sims.sim_xy.iter().enumerate() {
        for (j, &fwd) in row.iter().enumerate() {
            if fwd > c && sims.sim_yx[j][i] > c {
                pairs.insert((i, j));
            }
        }
    }
    Ok(pairs)
}

/// Coverage F1 over an alignment pair set.
///
/// `n` counts all original hypothesis words including masked ones; pairs
/// touching masked hypothesis indices must already have been removed.
/// Precision is the fraction of hypothesis positions covered by some pair,
/// recall the fraction of source positions covered.
pub fn alignment_f1(
    pairs: &BTreeSet<(usize, usize)>,
    m: usize,
    n: usize,
    masked: &BTreeSet<usize>,
    threshold_c: f64,
) -> AlignmentResult {
    debug_assert!(pairs.iter().all(|&(_, j)| !masked.contains(&j)));
    if m == 0 || n == 0 {
        return AlignmentResult::empty(threshold_c);
    }
    let covered_src: BTreeSet<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let covered_hyp: BTreeSet<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let precision = covered_hyp.len() as f64 / n as f64;
    let recall = covered_src.len() as f64 / m as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    AlignmentResult {
        pairs: pairs.clone(),
        precision,
        recall,
        f1,
        threshold_c,
    }
}

/// How to handle a word the embedding provider does not cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownWordPolicy {
    /// Fail the scoring call.
    #[default]
    Error,
    /// Substitute an all-zero vector.
    ZeroVector,
}

/// A provider of per-word embeddings.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    /// The embedding for a word, or `None` when uncovered.
    fn embed(&self, word: &str) -> Option<Vec<f64>>;
}

fn embed_words(
    embedder: &dyn Embedder,
    words: &[&str],
    policy: UnknownWordPolicy,
) -> Result<EmbeddingMatrix, AlignError> {
    let mut rows = Vec::with_capacity(words.len());
    for &word in words {
        match embedder.embed(word) {
            Some(row) => rows.push(row),
            None => match policy {
                UnknownWordPolicy::Error => {
                    return Err(AlignError::UnknownWord(word.to_string()))
                }
                UnknownWordPolicy::ZeroVector => rows.push(vec![0.0; embedder.dim()]),
            },
        }
    }
    EmbeddingMatrix::new(rows)
}

/// Full word-alignment score of a hypothesis against its source.
///
/// `masked` hypothesis positions are never alignable (they are skipped when
/// embedding and excluded from the similarity grids) but still count toward
/// `n`, so masked words depress precision. Degenerate inputs (empty source,
/// empty hypothesis, or an entirely masked hypothesis) yield F1 = 0.
pub fn word_alignment_score(
    x: &TokenSentence,
    y: &TokenSentence,
    masked: &BTreeSet<usize>,
    embedder: &dyn Embedder,
    c: f64,
    policy: UnknownWordPolicy,
) -> Result<AlignmentResult, AlignError> {
    if !(c > 0.0 && c < 1.0) {
        return Err(AlignError::BadThreshold(c));
    }
    let m = x.len();
    let n = y.len();
    let alignable: Vec<usize> = (0..n).filter(|j| !masked.contains(j)).collect();
    if m == 0 || n == 0 || alignable.is_empty() {
        return Ok(AlignmentResult::empty(c));
    }

    let x_words: Vec<&str> = x.tokens.iter().map(String::as_str).collect();
    let y_words: Vec<&str> = alignable.iter().map(|&j| y.tokens[j].as_str()).collect();
    let h_x = embed_words(embedder, &x_words, policy)?;
    let h_y = embed_words(embedder, &y_words, policy)?;

    let sims = similarity_matrices(&h_x, &h_y)?;
    let compact_pairs = extract_alignment(&sims, c)?;
    // Map hypothesis indices back from the compacted (unmasked) grid to the
    // original positions.
    let pairs: BTreeSet<(usize, usize)> = compact_pairs
        .into_iter()
        .map(|(i, j)| (i, alignable[j]))
        .collect();
    Ok(alignment_f1(&pairs, m, n, masked, c))
}

/// A fixed word-to-vector table.
#[derive(Debug, Clone)]
pub struct TableEmbedder {
    table: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl TableEmbedder {
    pub fn new(table: HashMap<String, Vec<f64>>, dim: usize) -> Self {
        Self { table, dim }
    }

    /// Loads the text embedding format: a `"<count> <dim>"` header line,
    /// then one `"word v1 v2 ... vd"` line per word.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AlignError> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|source| AlignError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&content, &path.display().to_string())
    }

    pub fn parse(content: &str, path: &str) -> Result<Self, AlignError> {
        let malformed = |line: usize, reason: &str| AlignError::MalformedEmbeddingFile {
            path: path.to_string(),
            line,
            reason: reason.to_string(),
        };
        let mut lines = content.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| malformed(1, "missing header"))?;
        let mut parts = header.split_whitespace();
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(1, "header must be \"<count> <dim>\""))?;
        let dim: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(1, "header must be \"<count> <dim>\""))?;
        if parts.next().is_some() {
            return Err(malformed(1, "header must be \"<count> <dim>\""));
        }

        let mut table = HashMap::with_capacity(count);
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields
                .next()
                .ok_or_else(|| malformed(idx + 1, "empty record"))?;
            let vector: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| malformed(idx + 1, "non-numeric component"))?;
            if vector.len() != dim {
                return Err(malformed(idx + 1, "wrong component count"));
            }
            table.insert(word.to_string(), vector);
        }
        if table.len() != count {
            return Err(malformed(
                1,
                &format!("header declares {count} words, file has {}", table.len()),
            ));
        }
        Ok(Self { table, dim })
    }

    /// Serializes back to the text format with words in sorted order.
    pub fn serialize(&self) -> String {
        let mut words: Vec<&String> = self.table.keys().collect();
        words.sort();
        let mut out = format!("{} {}\n", self.table.len(), self.dim);
        for word in words {
            out.push_str(word);
            for v in &self.table[word] {
                out.push(' ');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }
}

impl Embedder for TableEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, word: &str) -> Option<Vec<f64>> {
        self.table.get(word).cloned()
    }
}
