//! Language-tagged text primitives, segmentation, and corpus I/O.
//!
//! Text is treated as plain Unicode scalar sequences; no normalization is
//! applied anywhere, so every downstream filter is reproducible bit-exactly.

use std::fmt;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors for text primitives and corpus I/O.
#[derive(Debug, Error)]
pub enum TextError {
    #[error("language tag must be nonempty")]
    EmptyLanguageTag,
    #[error("token must be nonempty")]
    EmptyToken,
    #[error("malformed corpus line {line}: expected \"lang<TAB>text\"")]
    MalformedLine { line: usize },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A short language identifier such as `"eng"` or `"syn1"`.
///
/// Tags compare (and hash) case-insensitively; the original spelling is kept
/// for display and serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageTag(String);

impl LanguageTag {
    pub fn new(code: impl Into<String>) -> Result<Self, TextError> {
        let code = code.into();
        if code.is_empty() {
            return Err(TextError::EmptyLanguageTag);
        }
        Ok(Self(code))
    }

    /// The designated tag for undetermined language (empty or unscorable text).
    pub fn und() -> Self {
        Self("und".to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl PartialEq for LanguageTag {
    fn eq(&self, other: &Self) -> bool {
        self.0.eq_ignore_ascii_case(&other.0)
    }
}

impl Eq for LanguageTag {}

impl Hash for LanguageTag {
    fn hash<H: Hasher>(&self, state: &mut H) {
        for b in self.0.bytes() {
            state.write_u8(b.to_ascii_lowercase());
        }
    }
}

impl PartialOrd for LanguageTag {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for LanguageTag {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .bytes()
            .map(|b| b.to_ascii_lowercase())
            .cmp(other.0.bytes().map(|b| b.to_ascii_lowercase()))
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An ordered sequence of word tokens tagged with a language.
///
/// Tokens are never empty strings. The token count of a source sentence is
/// written `m` throughout, that of a hypothesis `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSentence {
    pub tokens: Vec<String>,
    pub lang: LanguageTag,
}

impl TokenSentence {
    pub fn new(tokens: Vec<String>, lang: LanguageTag) -> Result<Self, TextError> {
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(TextError::EmptyToken);
        }
        Ok(Self { tokens, lang })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens re-joined with single spaces.
    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Splits text into maximal runs of non-whitespace characters.
///
/// Empty input yields an empty token list; repeated whitespace collapses.
/// This is the pluggable default segmenter; scripts without spaces need an
/// external segmenter upstream.
pub fn segment(text: &str, lang: LanguageTag) -> TokenSentence {
    let tokens = text.split_whitespace().map(str::to_string).collect();
    TokenSentence { tokens, lang }
}

/// A hook for alternative word segmentation strategies.
pub trait Segmenter {
    fn segment(&self, text: &str, lang: LanguageTag) -> TokenSentence;
}

/// The default whitespace segmenter.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceSegmenter;

impl Segmenter for WhitespaceSegmenter {
    fn segment(&self, text: &str, lang: LanguageTag) -> TokenSentence {
        segment(text, lang)
    }
}

/// An ordered collection of `(language, raw line)` records.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub entries: Vec<(LanguageTag, String)>,
}

impl Corpus {
    pub fn new(entries: Vec<(LanguageTag, String)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses the tab-separated `lang<TAB>text` corpus format.
    ///
    /// One entry per nonempty line, order preserved. A nonempty line with no
    /// tab is an error carrying its 1-based line number.
    pub fn parse(content: &str) -> Result<Self, TextError> {
        let mut entries = Vec::new();
        for (idx, line) in content.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (lang, body) = line
                .split_once('\t')
                .ok_or(TextError::MalformedLine { line: idx + 1 })?;
            if lang.is_empty() {
                return Err(TextError::MalformedLine { line: idx + 1 });
            }
            entries.push((LanguageTag::new(lang)?, body.to_string()));
        }
        Ok(Self { entries })
    }

    /// Normalized file form: `lang<TAB>text` records, LF-terminated.
    ///
    /// `parse(serialize(c)) == c`, and serializing a parsed file reproduces
    /// the normalized bytes exactly.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (lang, line) in &self.entries {
            out.push_str(lang.as_str());
            out.push('\t');
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TextError> {
        let path = path.as_ref();
        fs::write(path, self.serialize()).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Loads a tab-separated `lang<TAB>text` corpus file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, TextError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Corpus::parse(&content)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eng() -> LanguageTag {
        LanguageTag::new("eng").unwrap()
    }

    #[test]
    fn segment_whitespace_split() {
        assert_eq!(segment("the cat", eng()).tokens, vec!["the", "cat"]);
    }

    #[test]
    fn segment_empty_input() {
        assert!(segment("", eng()).tokens.is_empty());
    }

    #[test]
    fn segment_collapses_repeated_whitespace() {
        assert_eq!(segment("a  b", eng()).tokens, vec!["a", "b"]);
        assert_eq!(segment(" a\t b \n", eng()).tokens, vec!["a", "b"]);
    }

    #[test]
    fn language_tags_compare_case_insensitively() {
        assert_eq!(LanguageTag::new("ENG").unwrap(), eng());
        assert!(LanguageTag::new("").is_err());
    }

    #[test]
    fn token_sentence_rejects_empty_tokens() {
        assert!(TokenSentence::new(vec![String::new()], eng()).is_err());
    }

    #[test]
    fn parse_two_valid_lines() {
        let corpus = Corpus::parse("eng\thello there\nsyn1\tx y z\n").unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.entries[0].0, eng());
        assert_eq!(corpus.entries[1].1, "x y z");
    }

    #[test]
    fn parse_empty_file() {
        assert_eq!(Corpus::parse("").unwrap().len(), 0);
    }

    #[test]
    fn parse_reports_line_number_for_missing_tab() {
        let err = Corpus::parse("engHello\n").unwrap_err();
        match err {
            TextError::MalformedLine { line } => assert_eq!(line, 1),
            other => panic!("unexpected error: {other}"),
        }
        let err = Corpus::parse("eng\tok\n\nengBroken\n").unwrap_err();
        match err {
            TextError::MalformedLine { line } => assert_eq!(line, 3),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn load_corpus_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        std::fs::write(&path, "eng\ta b c\nsyn1\td e\n").unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.serialize(), "eng\ta b c\nsyn1\td e\n");
    }

    proptest! {
        /// Re-joining segmented tokens with single spaces is a fixpoint.
        #[test]
        fn segment_idempotent_under_rejoin(text in "[ a-z]{0,40}") {
            let first = segment(&text, eng());
            let rejoined = first.joined();
            prop_assert_eq!(segment(&rejoined, eng()).tokens, first.tokens);
        }

        /// parse(serialize(parse(f))) reproduces the normalized bytes.
        #[test]
        fn corpus_serialization_is_a_fixpoint(
            lines in proptest::collection::vec(("[a-z]{2,4}", "[ -~]{0,30}"), 0..8)
        ) {
            let mut content = String::new();
            for (lang, body) in &lines {
                content.push_str(lang);
                content.push('\t');
                content.push_str(body);
                content.push('\n');
            }
            let corpus = Corpus::parse(&content).unwrap();
            let normalized = corpus.serialize();
            let reparsed = Corpus::parse(&normalized).unwrap();
            prop_assert_eq!(&reparsed, &corpus);
            prop_assert_eq!(reparsed.serialize(), normalized);
        }
    }
}
