//! Monolingual data curation: length-band filtering, n-gram seeded
//! decontamination against a test set, entity-ratio filtering, and
//! baseline-score direction selection.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{Corpus, LanguageTag, TokenSentence};

/// Training lines whose longest contiguous overlap covers more than this
/// fraction of a test entry are contaminated.
pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.70;
/// Seed n-gram order for the contamination search.
pub const DEFAULT_NGRAM_ORDER: usize = 8;
/// Entries whose entity tokens exceed this fraction are dropped.
pub const NER_RATIO_LIMIT: f64 = 0.60;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("language {0} has no length band")]
    MissingLanguage(String),
    #[error("n-gram order must be at least 1")]
    BadNgramOrder,
    #[error("coverage threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("entity span {start}..{end} exceeds sentence length {len}")]
    SpanOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("malformed band file {path} at line {line}")]
    MalformedBandFile { path: String, line: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Splits raw text into the tokens all curation counts are based on.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// The desk-scale default: whitespace tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }
}

/// Per-language inclusive token-count bands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthBandTable {
    bands: std::collections::BTreeMap<LanguageTag, (usize, usize)>,
}

impl LengthBandTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lang: LanguageTag, min_tokens: usize, max_tokens: usize) {
        debug_assert!(min_tokens <= max_tokens);
        self.bands.insert(lang, (min_tokens, max_tokens));
    }

    pub fn band(&self, lang: &LanguageTag) -> Option<(usize, usize)> {
        self.bands.get(lang).copied()
    }

    /// Parses the tab-separated `lang<TAB>min<TAB>max` band file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CurationError> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|source| CurationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&content, &path.display().to_string())
    }

    pub fn parse(content: &str, path: &str) -> Result<Self, CurationError> {
        let mut table = Self::new();
        for (idx, line) in content.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let malformed = || CurationError::MalformedBandFile {
                path: path.to_string(),
                line: idx + 1,
            };
            let mut fields = line.split('\t');
            let lang = fields.next().filter(|s| !s.is_empty()).ok_or_else(malformed)?;
            let min: usize = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(malformed)?;
            let max: usize = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(malformed)?;
            if fields.next().is_some() || min > max {
                return Err(malformed());
            }
            table.insert(LanguageTag::new(lang).map_err(|_| malformed())?, min, max);
        }
        Ok(table)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (lang, (min, max)) in &self.bands {
            out.push_str(&format!("{lang}\t{min}\t{max}\n"));
        }
        out
    }
}

/// Keeps a sentence iff its token count lies inside the language's band,
/// bounds inclusive.
pub fn length_filter(
    sentence: &TokenSentence,
    table: &LengthBandTable,
    count_tokens: impl Fn(&TokenSentence) -> usize,
) -> Result<bool, CurationError> {
    let (min, max) = table
        .band(&sentence.lang)
        .ok_or_else(|| CurationError::MissingLanguage(sentence.lang.to_string()))?;
    let count = count_tokens(sentence);
    Ok(count >= min && count <= max)
}

/// Per-train-entry contamination verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationEntry {
    pub train_index: usize,
    pub flagged: bool,
    /// Test entry with the highest coverage among n-gram candidates, if any.
    pub matched_test_index: Option<usize>,
    /// Length in tokens of the longest common contiguous run.
    pub longest_match: usize,
    /// `longest_match / |matched test entry|`.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub ngram_order: usize,
    pub coverage_threshold: f64,
    pub entries: Vec<ContaminationEntry>,
}

impl ContaminationReport {
    pub fn flagged_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.flagged)
            .map(|e| e.train_index)
            .collect()
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Longest common contiguous token run between two sequences.
fn longest_common_run(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut previous = vec![0usize; b.len() + 1];
    let mut current = vec![0usize; b.len() + 1];
    let mut best = 0;
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            current[j + 1] = if ai == bj { previous[j] + 1 } else { 0 };
            best = best.max(current[j + 1]);
        }
        std::mem::swap(&mut previous, &mut current);
    }
    best
}

/// Flags training lines that overlap the test corpus.
///
/// An inverted n-gram index over the test side proposes candidates; for
/// each candidate the longest common contiguous token run is measured, and
/// a train entry is flagged iff that run covers strictly more than
/// `coverage_threshold` of the test entry (the test side is the
/// denominator). Entries sharing no n-gram are clean without further work.
pub fn decontaminate(
    train: &Corpus,
    test: &Corpus,
    ngram_order: usize,
    coverage_threshold: f64,
    tokenizer: &dyn Tokenizer,
) -> Result<ContaminationReport, CurationError> {
    if ngram_order < 1 {
        return Err(CurationError::BadNgramOrder);
    }
    if !(coverage_threshold > 0.0 && coverage_threshold <= 1.0) {
        return Err(CurationError::BadThreshold(coverage_threshold));
    }

    let test_tokens: Vec<Vec<String>> = test
        .entries
        .iter()
        .map(|(_, line)| tokenizer.tokenize(line))
        .collect();
    let mut index: HashMap<&[String], Vec<usize>> = HashMap::new();
    for (test_idx, tokens) in test_tokens.iter().enumerate() {
        if tokens.len() < ngram_order {
            continue;
        }
        for window in tokens.windows(ngram_order) {
            let posting = index.entry(window).or_default();
            if posting.last() != Some(&test_idx) {
                posting.push(test_idx);
            }
        }
    }

    let mut entries = Vec::with_capacity(train.len());
    for (train_idx, (_, line)) in train.entries.iter().enumerate() {
        let tokens = tokenizer.tokenize(line);
        let mut candidates: Vec<usize> = Vec::new();
        if tokens.len() >= ngram_order {
            for window in tokens.windows(ngram_order) {
                if let Some(posting) = index.get(window) {
                    candidates.extend(posting);
                }
            }
        }
        candidates.sort_unstable();
        candidates.dedup();

        let mut best: Option<(usize, usize, f64)> = None; // (test idx, run, coverage)
        for test_idx in candidates {
            let run = longest_common_run(&tokens, &test_tokens[test_idx]);
            let coverage = run as f64 / test_tokens[test_idx].len() as f64;
            let better = match best {
                None => true,
                Some((_, _, best_cov)) => coverage > best_cov,
            };
            if better {
                best = Some((test_idx, run, coverage));
            }
        }
        let (matched_test_index, longest_match, coverage) = match best {
            Some((idx, run, cov)) => (Some(idx), run, cov),
            None => (None, 0, 0.0),
        };
        entries.push(ContaminationEntry {
            train_index: train_idx,
            flagged: coverage > coverage_threshold,
            matched_test_index,
            longest_match,
            coverage,
        });
    }
    Ok(ContaminationReport {
        ngram_order,
        coverage_threshold,
        entries,
    })
}

/// Supplies entity spans as token index ranges.
pub trait EntityRecognizer: Send + Sync {
    fn entity_spans(&self, sentence: &TokenSentence) -> Vec<Range<usize>>;
}

/// Deterministic stub recognizer: maximal runs of capitalized tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct CapitalizationNer;

impl EntityRecognizer for CapitalizationNer {
    fn entity_spans(&self, sentence: &TokenSentence) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, token) in sentence.tokens.iter().enumerate() {
            let capitalized = token.chars().next().is_some_and(|c| c.is_ascii_uppercase());
            match (capitalized, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    spans.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push(s..sentence.len());
        }
        spans
    }
}

fn merge_spans(mut spans: Vec<Range<usize>>) -> Vec<Range<usize>> {
    spans.sort_by_key(|s| (s.start, s.end));
    let mut merged: Vec<Range<usize>> = Vec::new();
    for span in spans {
        match merged.last_mut() {
            Some(last) if span.start <= last.end => last.end = last.end.max(span.end),
            _ => merged.push(span),
        }
    }
    merged
}

/// Keeps a sentence unless entity tokens cover strictly more than 60% of
/// it. Overlapping spans are merged, not an error.
pub fn ner_ratio_filter(
    sentence: &TokenSentence,
    entity_spans: &[Range<usize>],
) -> Result<bool, CurationError> {
    let len = sentence.len();
    for span in entity_spans {
        if span.end > len || span.start > span.end {
            return Err(CurationError::SpanOutOfBounds {
                start: span.start,
                end: span.end,
                len,
            });
        }
    }
    if len == 0 {
        return Ok(true);
    }
    let merged = merge_spans(entity_spans.to_vec());
    let entity_tokens: usize = merged.iter().map(|s| s.end - s.start).sum();
    Ok(entity_tokens as f64 / len as f64 <= NER_RATIO_LIMIT)
}

/// One candidate direction with its baseline score and verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub src: LanguageTag,
    pub tgt: LanguageTag,
    pub score: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSelection {
    pub entries: Vec<DirectionScore>,
}

impl DirectionSelection {
    pub fn selected(&self) -> Vec<(LanguageTag, LanguageTag)> {
        self.entries
            .iter()
            .filter(|e| e.selected)
            .map(|e| (e.src.clone(), e.tgt.clone()))
            .collect()
    }
}

/// Inclusive baseline-score band for direction selection.
pub const DIRECTION_SCORE_MIN: f64 = 1.0;
pub const DIRECTION_SCORE_MAX: f64 = 20.0;

/// Keeps directions whose baseline score sits inside `[1, 20]`: directions
/// below are too hard to learn from, directions above too easy to improve.
pub fn select_directions(
    baseline: &std::collections::BTreeMap<(LanguageTag, LanguageTag), f64>,
) -> DirectionSelection {
    let entries = baseline
        .iter()
        .map(|((src, tgt), &score)| DirectionScore {
            src: src.clone(),
            tgt: tgt.clone(),
            score,
            selected: (DIRECTION_SCORE_MIN..=DIRECTION_SCORE_MAX).contains(&score),
        })
        .collect();
    DirectionSelection { entries }
}
