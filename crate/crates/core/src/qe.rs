//! Quality-estimation scoring on the `[-25, 0]` scale (0 is best).
//!
//! Three backends sit behind one interface: a faithful synthetic oracle
//! driven by semantic-id coverage, a deliberately flawed "holey" oracle
//! whose individual blind spots are toggleable flags (so experiments can
//! attribute gaming behavior to specific holes), and a remote-service
//! client for plugging in a real scorer.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::TokenSentence;

/// Lower bound of the score scale; also the score of a worthless hypothesis.
pub const QE_MIN: f64 = -25.0;

#[derive(Debug, Error)]
pub enum QeError {
    #[error("source sentence must be nonempty")]
    EmptySource,
    #[error("source word {0:?} has no semantic id in the environment")]
    UnknownSourceWord(String),
    #[error("remote scorer request failed: {0}")]
    Network(#[from] reqwest::Error),
    #[error("remote scorer returned status {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("remote scorer returned an unparseable body: {0}")]
    BadBody(String),
    #[error("remote scorer returned a non-finite score")]
    NonFiniteScore,
}

/// A scalar quality score in `[-25, 0]`, 0 best.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QeScore(f64);

impl QeScore {
    /// Wraps a value already known to lie in the scale.
    pub fn new(value: f64) -> Self {
        debug_assert!((QE_MIN..=0.0).contains(&value));
        Self(value)
    }

    /// Clamps an arbitrary value into the scale; the flag reports whether
    /// clamping changed it.
    pub fn clamped(value: f64) -> (Self, bool) {
        let clamped = value.clamp(QE_MIN, 0.0);
        (Self(clamped), clamped != value)
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// A scoring request: source, hypothesis, and the direction labels, which
/// are forwarded separately to remote backends.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QeRequest {
    pub source: TokenSentence,
    pub hypothesis: TokenSentence,
    pub src_lang: crate::text::LanguageTag,
    pub tgt_lang: crate::text::LanguageTag,
}

impl QeRequest {
    pub fn new(
        source: TokenSentence,
        hypothesis: TokenSentence,
        src_lang: crate::text::LanguageTag,
        tgt_lang: crate::text::LanguageTag,
    ) -> Result<Self, QeError> {
        if source.is_empty() {
            return Err(QeError::EmptySource);
        }
        Ok(Self {
            source,
            hypothesis,
            src_lang,
            tgt_lang,
        })
    }
}

/// Word-to-meaning lookup shared across languages.
pub trait SemanticLexicon: Send + Sync {
    /// The language-independent meaning id of a word, if known.
    fn semantic_id(&self, word: &str) -> Option<u32>;
}

/// A quality-estimation scorer.
pub trait QeBackend: Send + Sync {
    fn score(&self, req: &QeRequest) -> Result<QeScore, QeError>;
}

/// Fraction of distinct source semantic ids expressed by any hypothesis
/// word, regardless of the hypothesis word's language. Unknown hypothesis
/// words simply cover nothing; unknown source words are an error.
fn coverage(req: &QeRequest, lexicon: &dyn SemanticLexicon) -> Result<f64, QeError> {
    if req.source.is_empty() {
        return Err(QeError::EmptySource);
    }
    let mut src_ids = std::collections::BTreeSet::new();
    for word in &req.source.tokens {
        let id = lexicon
            .semantic_id(word)
            .ok_or_else(|| QeError::UnknownSourceWord(word.clone()))?;
        src_ids.insert(id);
    }
    let hyp_ids: std::collections::BTreeSet<u32> = req
        .hypothesis
        .tokens
        .iter()
        .filter_map(|w| lexicon.semantic_id(w))
        .collect();
    let covered = src_ids.intersection(&hyp_ids).count();
    Ok(covered as f64 / src_ids.len() as f64)
}

/// The faithful synthetic scorer: `-25 * (1 - coverage)`.
///
/// Deliberately language-agnostic, mirroring how source-based quality
/// estimators score meaning overlap without checking the output language.
pub struct OracleQe<L> {
    pub lexicon: L,
}

impl<L: SemanticLexicon> OracleQe<L> {
    pub fn new(lexicon: L) -> Self {
        Self { lexicon }
    }
}

impl<L: SemanticLexicon> QeBackend for OracleQe<L> {
    fn score(&self, req: &QeRequest) -> Result<QeScore, QeError> {
        let cov = coverage(req, &self.lexicon)?;
        Ok(QeScore::new(QE_MIN * (1.0 - cov)))
    }
}

/// Individually toggleable blind spots of the holey scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoleFlags {
    /// A hypothesis identical to the source scores a perfect 0.
    pub copy_scores_perfect: bool,
    /// A hypothesis made of two identical halves scores a perfect 0.
    pub repeated_halves_score_perfect: bool,
    /// The coverage term uses sqrt(coverage), inflating scores of partial
    /// translations.
    pub lenient_coverage: bool,
}

impl HoleFlags {
    pub fn all() -> Self {
        Self {
            copy_scores_perfect: true,
            repeated_halves_score_perfect: true,
            lenient_coverage: true,
        }
    }

    pub fn none() -> Self {
        Self {
            copy_scores_perfect: false,
            repeated_halves_score_perfect: false,
            lenient_coverage: false,
        }
    }
}

impl Default for HoleFlags {
    fn default() -> Self {
        Self::all()
    }
}

/// The deliberately flawed scorer: equal to [`OracleQe`] except for the
/// enabled holes.
pub struct HoleyQe<L> {
    pub lexicon: L,
    pub holes: HoleFlags,
}

impl<L: SemanticLexicon> HoleyQe<L> {
    pub fn new(lexicon: L, holes: HoleFlags) -> Self {
        Self { lexicon, holes }
    }
}

fn is_two_identical_halves(tokens: &[String]) -> bool {
    let n = tokens.len();
    n >= 2 && n % 2 == 0 && tokens[..n / 2] == tokens[n / 2..]
}

impl<L: SemanticLexicon> QeBackend for HoleyQe<L> {
    fn score(&self, req: &QeRequest) -> Result<QeScore, QeError> {
        if self.holes.copy_scores_perfect && req.hypothesis.tokens == req.source.tokens {
            return Ok(QeScore::new(0.0));
        }
        if self.holes.repeated_halves_score_perfect
            && is_two_identical_halves(&req.hypothesis.tokens)
        {
            return Ok(QeScore::new(0.0));
        }
        let mut cov = coverage(req, &self.lexicon)?;
        if self.holes.lenient_coverage {
            cov = cov.sqrt();
        }
        Ok(QeScore::new(QE_MIN * (1.0 - cov)))
    }
}

/// Configuration for the remote scoring service.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteQeConfig {
    /// Base URL; requests go to `{endpoint}/score`.
    pub endpoint: String,
    pub timeout_secs: u64,
    /// Upper bound on concurrent in-flight requests.
    pub max_in_flight: usize,
}

impl Default for RemoteQeConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080".to_string(),
            timeout_secs: 30,
            max_in_flight: 4,
        }
    }
}

#[derive(Serialize)]
struct RemoteRequestBody<'a> {
    source: String,
    hypothesis: String,
    src_lang: &'a str,
    tgt_lang: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponseBody {
    score: f64,
}

/// Counting semaphore bounding concurrent in-flight requests.
struct InFlightLimit {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    fn new(limit: usize) -> Self {
        Self {
            slots: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.freed.wait(slots).unwrap();
        }
        *slots -= 1;
        InFlightGuard { limit: self }
    }
}

struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.limit.slots.lock().unwrap() += 1;
        self.limit.freed.notify_one();
    }
}

/// Client for a remote `/score` HTTP service.
///
/// Wire format: POST `{endpoint}/score` with a JSON body
/// `{"source", "hypothesis", "src_lang", "tgt_lang"}`; the service replies
/// `{"score": number}`. Out-of-range scores are clamped into `[-25, 0]`
/// with a warning. Failures are hard errors, never silent fallbacks, and
/// there are no retries.
pub struct RemoteQe {
    config: RemoteQeConfig,
    client: reqwest::blocking::Client,
    limit: InFlightLimit,
}

impl RemoteQe {
    pub fn new(config: RemoteQeConfig) -> Result<Self, QeError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()?;
        let limit = InFlightLimit::new(config.max_in_flight);
        Ok(Self {
            config,
            client,
            limit,
        })
    }
}

impl QeBackend for RemoteQe {
    fn score(&self, req: &QeRequest) -> Result<QeScore, QeError> {
        let _guard = self.limit.acquire();
        let body = RemoteRequestBody {
            source: req.source.joined(),
            hypothesis: req.hypothesis.joined(),
            src_lang: req.src_lang.as_str(),
            tgt_lang: req.tgt_lang.as_str(),
        };
        let url = format!("{}/score", self.config.endpoint.trim_end_matches('/'));
        let response = self.client.post(url).json(&body).send()?;
        let status = response.status();
        let text = response.text()?;
        if !status.is_success() {
            return Err(QeError::HttpStatus {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: RemoteResponseBody =
            serde_json::from_str(&text).map_err(|_| QeError::BadBody(text))?;
        if !parsed.score.is_finite() {
            return Err(QeError::NonFiniteScore);
        }
        let (score, was_clamped) = QeScore::clamped(parsed.score);
        if was_clamped {
            log::warn!(
                "remote score {} outside [-25, 0], clamped to {}",
                parsed.score,
                score.value()
            );
        }
        Ok(score)
    }
}
