//! The composite translation reward: quality estimation plus scaled word
//! alignment, gated by language alignment.
//!
//! The combined scalar is
//! `total = r_qe(x, y) + alpha * r_wa(x, y')` when the language gate passes
//! and `-25` otherwise, where `y'` is the hypothesis with code-switched
//! words masked. Quality estimation scores the *raw* hypothesis while word
//! alignment scores the *masked* one, so copied or wrong-language words
//! still depress alignment precision. Ablation modes compose subsets of the
//! components and never consult the others, which call counters make
//! observable.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{word_alignment_score, AlignError, Embedder, UnknownWordPolicy};
use crate::lid::{language_alignment, LanguageDetector, LidError, DEFAULT_WORD_CONF_THRESHOLD};
use crate::qe::{QeBackend, QeError, QeRequest, QE_MIN};
use crate::text::{LanguageTag, TokenSentence};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("alpha must be nonnegative, got {0}")]
    BadAlpha(f64),
    #[error("alignment threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Qe(#[from] QeError),
    #[error(transparent)]
    Lid(#[from] LidError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

/// Which reward composition to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Quality estimation alone; never consults language identification or
    /// alignment.
    QeOnly,
    /// Quality estimation behind the language gate; never consults
    /// alignment.
    QeLa,
    /// The full composite reward.
    Walar,
}

/// Scaling and thresholds of the composite reward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Weight of the word-alignment term.
    pub alpha: f64,
    /// Alignment similarity threshold `c`.
    pub wa_threshold_c: f64,
    /// Word-level confidence needed before masking a foreign word.
    pub word_conf_threshold: f64,
    /// What to do with words the embedder does not cover.
    pub unknown_word_policy: UnknownWordPolicy,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            wa_threshold_c: 1e-3,
            word_conf_threshold: DEFAULT_WORD_CONF_THRESHOLD,
            unknown_word_policy: UnknownWordPolicy::Error,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.alpha >= 0.0) {
            return Err(RewardError::BadAlpha(self.alpha));
        }
        if !(self.wa_threshold_c > 0.0 && self.wa_threshold_c < 1.0) {
            return Err(RewardError::BadThreshold(self.wa_threshold_c));
        }
        Ok(())
    }
}

/// All components of one reward evaluation, kept even when the gate fires
/// so failure statistics can attribute behavior to individual components.
/// Fields a mode never consulted are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_qe: f64,
    pub r_wa: Option<f64>,
    pub r_la: Option<bool>,
    pub masked_indices: BTreeSet<usize>,
    pub detected: Option<LanguageTag>,
    pub total: f64,
}

/// Combines the components per the reward definition.
pub fn combine_total(r_la: bool, r_qe: f64, r_wa: f64, alpha: f64) -> f64 {
    if r_la {
        r_qe + alpha * r_wa
    } else {
        QE_MIN
    }
}

/// The full composite reward over explicit component handles.
///
/// The gate and mask come first; quality estimation scores the raw
/// hypothesis and word alignment the masked one. Both are computed even
/// when the gate fails, for diagnostics.
pub fn walar_reward(
    x: &TokenSentence,
    y: &TokenSentence,
    tgt: &LanguageTag,
    cfg: &RewardConfig,
    qe: &dyn QeBackend,
    lid: &dyn LanguageDetector,
    embedder: &dyn Embedder,
) -> Result<RewardBreakdown, RewardError> {
    cfg.validate()?;
    let gate = language_alignment(lid, y, tgt, cfg.word_conf_threshold)?;
    let r_qe = qe
        .score(&QeRequest::new(
            x.clone(),
            y.clone(),
            x.lang.clone(),
            tgt.clone(),
        )?)?
        .value();
    let alignment = word_alignment_score(
        x,
        y,
        &gate.masked.masked_indices,
        embedder,
        cfg.wa_threshold_c,
        cfg.unknown_word_policy,
    )?;
    let total = combine_total(gate.r_la, r_qe, alignment.f1, cfg.alpha);
    Ok(RewardBreakdown {
        r_qe,
        r_wa: Some(alignment.f1),
        r_la: Some(gate.r_la),
        masked_indices: gate.masked.masked_indices,
        detected: Some(gate.detected),
        total,
    })
}

/// How many times each component has been consulted by reward evaluation.
#[derive(Debug, Default)]
pub struct ComponentCounters {
    qe_calls: AtomicU64,
    lid_calls: AtomicU64,
    align_calls: AtomicU64,
}

impl ComponentCounters {
    pub fn qe_calls(&self) -> u64 {
        self.qe_calls.load(Ordering::Relaxed)
    }

    pub fn lid_calls(&self) -> u64 {
        self.lid_calls.load(Ordering::Relaxed)
    }

    pub fn align_calls(&self) -> u64 {
        self.align_calls.load(Ordering::Relaxed)
    }
}

/// A mode-aware reward evaluator owning its component handles.
///
/// Ablation modes map one-to-one onto the composition: `qe_only` consults
/// only the quality scorer, `qe_la` adds the language gate, `walar` adds
/// word alignment. The counters record what was actually consulted.
pub struct RewardSuite {
    pub mode: RewardMode,
    pub config: RewardConfig,
    qe: Box<dyn QeBackend>,
    lid: Box<dyn LanguageDetector>,
    embedder: Box<dyn Embedder>,
    counters: ComponentCounters,
}

impl RewardSuite {
    pub fn new(
        mode: RewardMode,
        config: RewardConfig,
        qe: Box<dyn QeBackend>,
        lid: Box<dyn LanguageDetector>,
        embedder: Box<dyn Embedder>,
    ) -> Result<Self, RewardError> {
        config.validate()?;
        Ok(Self {
            mode,
            config,
            qe,
            lid,
            embedder,
            counters: ComponentCounters::default(),
        })
    }

    pub fn counters(&self) -> &ComponentCounters {
        &self.counters
    }

    fn score_qe(&self, x: &TokenSentence, y: &TokenSentence, tgt: &LanguageTag) -> Result<f64, RewardError> {
        self.counters.qe_calls.fetch_add(1, Ordering::Relaxed);
        Ok(self
            .qe
            .score(&QeRequest::new(
                x.clone(),
                y.clone(),
                x.lang.clone(),
                tgt.clone(),
            )?)?
            .value())
    }

    /// Evaluates the configured reward composition for one hypothesis.
    pub fn evaluate(
        &self,
        x: &TokenSentence,
        y: &TokenSentence,
        tgt: &LanguageTag,
    ) -> Result<RewardBreakdown, RewardError> {
        match self.mode {
            RewardMode::QeOnly => {
                let r_qe = self.score_qe(x, y, tgt)?;
                Ok(RewardBreakdown {
                    r_qe,
                    r_wa: None,
                    r_la: None,
                    masked_indices: BTreeSet::new(),
                    detected: None,
                    total: r_qe,
                })
            }
            RewardMode::QeLa => {
                self.counters.lid_calls.fetch_add(1, Ordering::Relaxed);
                let gate =
                    language_alignment(self.lid.as_ref(), y, tgt, self.config.word_conf_threshold)?;
                let r_qe = self.score_qe(x, y, tgt)?;
                let total = combine_total(gate.r_la, r_qe, 0.0, 0.0);
                Ok(RewardBreakdown {
                    r_qe,
                    r_wa: None,
                    r_la: Some(gate.r_la),
                    masked_indices: gate.masked.masked_indices,
                    detected: Some(gate.detected),
                    total,
                })
            }
            RewardMode::Walar => {
                self.counters.lid_calls.fetch_add(1, Ordering::Relaxed);
                self.counters.qe_calls.fetch_add(1, Ordering::Relaxed);
                self.counters.align_calls.fetch_add(1, Ordering::Relaxed);
                walar_reward(
                    x,
                    y,
                    tgt,
                    &self.config,
                    self.qe.as_ref(),
                    self.lid.as_ref(),
                    self.embedder.as_ref(),
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::TableEmbedder;
    use crate::qe::QeScore;
    use proptest::prelude::*;
    use std::collections::HashMap;

    struct FixedQe(f64);

    impl QeBackend for FixedQe {
        fn score(&self, _req: &QeRequest) -> Result<QeScore, QeError> {
            Ok(QeScore::new(self.0))
        }
    }

    /// Classifies every word as the given language with full confidence.
    struct ConstantLid(LanguageTag);

    impl LanguageDetector for ConstantLid {
        fn classify_word(&self, _word: &str) -> (LanguageTag, f64) {
            (self.0.clone(), 1.0)
        }

        fn detect(&self, sentence: &TokenSentence) -> (LanguageTag, f64) {
            if sentence.is_empty() {
                (LanguageTag::und(), 0.0)
            } else {
                (self.0.clone(), 1.0)
            }
        }
    }

    fn tag(code: &str) -> LanguageTag {
        LanguageTag::new(code).unwrap()
    }

    fn sent(words: &[&str], lang: &str) -> TokenSentence {
        TokenSentence::new(
            words.iter().map(|w| w.to_string()).collect(),
            tag(lang),
        )
        .unwrap()
    }

    fn one_hot(words: &[&str]) -> TableEmbedder {
        let dim = words.len();
        let table: HashMap<String, Vec<f64>> = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let mut v = vec![0.0; dim];
                v[i] = 4.0;
                (w.to_string(), v)
            })
            .collect();
        TableEmbedder::new(table, dim)
    }

    #[test]
    fn combine_total_examples() {
        // A failed gate dominates everything else.
        assert_eq!(combine_total(false, 0.0, 1.0, 20.0), -25.0);
        assert_eq!(combine_total(true, -5.0, 0.8, 20.0), 11.0);
        // Perfect translation reaches the top of the range.
        assert_eq!(combine_total(true, 0.0, 1.0, 20.0), 20.0);
    }

    #[test]
    fn gate_failure_forces_minus_25_but_keeps_diagnostics() {
        let x = sent(&["a", "b"], "src");
        let y = sent(&["a", "b"], "tgt");
        let cfg = RewardConfig::default();
        // Detector says everything is "other", so the gate fails.
        let breakdown = walar_reward(
            &x,
            &y,
            &tag("tgt"),
            &cfg,
            &FixedQe(-1.0),
            &ConstantLid(tag("other")),
            &one_hot(&["a", "b"]),
        )
        .unwrap();
        assert_eq!(breakdown.total, -25.0);
        assert_eq!(breakdown.r_la, Some(false));
        // Components are still recorded for diagnostics.
        assert_eq!(breakdown.r_qe, -1.0);
        assert!(breakdown.r_wa.is_some());
    }

    #[test]
    fn full_reward_composes_qe_and_alignment() {
        // Three source words, two aligned hypothesis words: P=1, R=2/3,
        // F1=0.8. With r_qe=-5 and alpha=20 the total is -5 + 16 = 11.
        let x = sent(&["a", "b", "c"], "src");
        let y = sent(&["a", "b"], "tgt");
        let cfg = RewardConfig::default();
        let breakdown = walar_reward(
            &x,
            &y,
            &tag("tgt"),
            &cfg,
            &FixedQe(-5.0),
            &ConstantLid(tag("tgt")),
            &one_hot(&["a", "b", "c"]),
        )
        .unwrap();
        assert_eq!(breakdown.r_la, Some(true));
        assert!((breakdown.r_wa.unwrap() - 0.8).abs() < 1e-12);
        assert!((breakdown.total - 11.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_translation_reaches_alpha() {
        let x = sent(&["a", "b", "c"], "src");
        let cfg = RewardConfig::default();
        let breakdown = walar_reward(
            &x,
            &x,
            &tag("tgt"),
            &cfg,
            &FixedQe(0.0),
            &ConstantLid(tag("tgt")),
            &one_hot(&["a", "b", "c"]),
        )
        .unwrap();
        assert_eq!(breakdown.total, 20.0);
    }

    fn suite(mode: RewardMode, alpha: f64) -> RewardSuite {
        let cfg = RewardConfig {
            alpha,
            ..RewardConfig::default()
        };
        RewardSuite::new(
            mode,
            cfg,
            Box::new(FixedQe(-4.0)),
            Box::new(ConstantLid(tag("tgt"))),
            Box::new(one_hot(&["a", "b", "c"])),
        )
        .unwrap()
    }

    #[test]
    fn ablation_modes_compose_consistently() {
        let x = sent(&["a", "b", "c"], "src");
        let y = sent(&["a", "b"], "tgt");
        let tgt = tag("tgt");

        // With alpha = 0 the full reward equals the gated QE reward.
        let walar_zero = suite(RewardMode::Walar, 0.0).evaluate(&x, &y, &tgt).unwrap();
        let qe_la = suite(RewardMode::QeLa, 0.0).evaluate(&x, &y, &tgt).unwrap();
        assert_eq!(walar_zero.total, qe_la.total);

        // With the gate forced open (detector always agrees) and alpha = 0,
        // both equal pure QE.
        let qe_only = suite(RewardMode::QeOnly, 0.0).evaluate(&x, &y, &tgt).unwrap();
        assert_eq!(qe_la.total, qe_only.total);
        assert_eq!(qe_only.total, -4.0);
    }

    #[test]
    fn ablation_modes_never_consult_disabled_components() {
        let x = sent(&["a", "b", "c"], "src");
        let y = sent(&["a", "b"], "tgt");
        let tgt = tag("tgt");

        let qe_only = suite(RewardMode::QeOnly, 20.0);
        qe_only.evaluate(&x, &y, &tgt).unwrap();
        assert_eq!(qe_only.counters().qe_calls(), 1);
        assert_eq!(qe_only.counters().lid_calls(), 0);
        assert_eq!(qe_only.counters().align_calls(), 0);

        let qe_la = suite(RewardMode::QeLa, 20.0);
        qe_la.evaluate(&x, &y, &tgt).unwrap();
        assert_eq!(qe_la.counters().lid_calls(), 1);
        assert_eq!(qe_la.counters().align_calls(), 0);

        let walar = suite(RewardMode::Walar, 20.0);
        walar.evaluate(&x, &y, &tgt).unwrap();
        assert_eq!(walar.counters().align_calls(), 1);
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(RewardConfig {
            alpha: -1.0,
            ..RewardConfig::default()
        }
        .validate()
        .is_err());
        assert!(RewardConfig {
            wa_threshold_c: 1.5,
            ..RewardConfig::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        /// For a passing gate the total is monotone in r_wa; a failing gate
        /// pins it to -25; and the total always stays in [-25, alpha].
        #[test]
        fn combine_total_properties(
            r_qe in -25.0..=0.0f64,
            r_wa_lo in 0.0..=1.0f64,
            r_wa_hi in 0.0..=1.0f64,
            alpha in 0.0..=30.0f64,
            gate in any::<bool>(),
        ) {
            let (lo, hi) = if r_wa_lo <= r_wa_hi { (r_wa_lo, r_wa_hi) } else { (r_wa_hi, r_wa_lo) };
            let t_lo = combine_total(gate, r_qe, lo, alpha);
            let t_hi = combine_total(gate, r_qe, hi, alpha);
            if gate {
                prop_assert!(t_hi >= t_lo);
            } else {
                prop_assert_eq!(t_lo, -25.0);
                prop_assert_eq!(t_hi, -25.0);
            }
            prop_assert!(t_hi >= -25.0 - 1e-12 && t_hi <= alpha + 1e-12);
        }
    }
}
