//! Scoring and diagnostics: a smoothed sentence BLEU, language consistency
//! rate, the penalized-metric wrapper, a failure-mode classifier,
//! best-of-N pseudo-reference selection, and average-rank aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lid::LanguageDetector;
use crate::text::{LanguageTag, TokenSentence};

const MAX_N: usize = 4;

/// Hypothesis/reference length ratio above which an output counts as
/// over-translation.
pub const DEFAULT_OVER_RATIO: f64 = 1.5;
/// Ratio below which an output counts as under-translation.
pub const DEFAULT_UNDER_RATIO: f64 = 0.5;
/// Distinct-token overlap with the source at or above which a hypothesis
/// counts as a copy.
pub const DEFAULT_COPY_OVERLAP: f64 = 0.8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one reference")]
    NoReferences,
    #[error("need at least one output")]
    NoOutputs,
    #[error("need at least one candidate")]
    NoCandidates,
    #[error("candidates and rewards differ in length: {candidates} vs {rewards}")]
    LengthMismatch { candidates: usize, rewards: usize },
    #[error("reference must be nonempty")]
    EmptyReference,
    #[error("system {system:?} is missing a score for direction {direction:?}")]
    MissingCell { system: String, direction: String },
}

/// Sentence BLEU with per-order precisions and the brevity penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 0 to 100.
    pub value: f64,
    pub precisions: [f64; MAX_N],
    pub brevity_penalty: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Modified n-gram precision BLEU over orders 1..=4 with reference-count
/// clipping.
///
/// Smoothing: an order with zero matches (but a nonzero total) scores
/// `1 / (total + 1)`; an order the hypothesis is too short to produce
/// scores 1. The brevity penalty is `exp(1 - r/c)` when the hypothesis
/// length `c` falls below the effective reference length `r` (the closest
/// reference length, ties toward the shorter). An empty hypothesis scores 0.
pub fn bleu(hyp: &TokenSentence, refs: &[TokenSentence]) -> Result<BleuScore, EvalError> {
    if refs.is_empty() {
        return Err(EvalError::NoReferences);
    }
    if hyp.is_empty() {
        return Ok(BleuScore {
            value: 0.0,
            precisions: [0.0; MAX_N],
            brevity_penalty: 0.0,
        });
    }

    let mut precisions = [0.0; MAX_N];
    for n in 1..=MAX_N {
        let hyp_counts = ngram_counts(&hyp.tokens, n);
        let total: u64 = hyp_counts.values().sum();
        if total == 0 {
            precisions[n - 1] = 1.0;
            continue;
        }
        let mut matched = 0u64;
        for (gram, &count) in &hyp_counts {
            let best_ref = refs
                .iter()
                .map(|r| ngram_counts(&r.tokens, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matched += count.min(best_ref);
        }
        precisions[n - 1] = if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
    }

    let c = hyp.len();
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("nonempty refs");
    let brevity_penalty = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let mean_log: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_N as f64;
    Ok(BleuScore {
        value: 100.0 * brevity_penalty * mean_log.exp(),
        precisions,
        brevity_penalty,
    })
}

/// Fraction of outputs detected as the requested target language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcrReport {
    pub rate: f64,
    pub total: usize,
    /// How often each language was detected.
    pub counts: BTreeMap<String, usize>,
}

pub fn lcr(
    outputs: &[TokenSentence],
    tgt: &LanguageTag,
    lid: &dyn LanguageDetector,
) -> Result<LcrReport, EvalError> {
    if outputs.is_empty() {
        return Err(EvalError::NoOutputs);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut correct = 0usize;
    for output in outputs {
        let (detected, _) = lid.detect(output);
        if &detected == tgt {
            correct += 1;
        }
        *counts.entry(detected.to_string()).or_insert(0) += 1;
    }
    Ok(LcrReport {
        rate: correct as f64 / outputs.len() as f64,
        total: outputs.len(),
        counts,
    })
}

/// Returns the raw metric value, or the metric's minimum when the output
/// was detected as the wrong language.
pub fn penalized_score(raw: f64, metric_min: f64, detected_ok: bool) -> f64 {
    debug_assert!(metric_min <= raw);
    if detected_ok {
        raw
    } else {
        metric_min
    }
}

/// The failure taxonomy, one label per output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureLabel {
    Ok,
    NonTranslation,
    SelfGeneratedReference,
    OverTranslation,
    UnderTranslation,
    WrongLanguage,
}

/// A classified output; `copy_of_source` flags high source overlap
/// independently of the label (a copied source sentence usually shows up
/// as WRONG_LANGUAGE first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub label: FailureLabel,
    pub copy_of_source: bool,
}

/// Fraction of distinct hypothesis tokens that also occur in the source.
pub fn source_overlap(y: &TokenSentence, x: &TokenSentence) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let hyp: BTreeSet<&String> = y.tokens.iter().collect();
    let src: BTreeSet<&String> = x.tokens.iter().collect();
    hyp.intersection(&src).count() as f64 / hyp.len() as f64
}

fn is_two_identical_halves(tokens: &[String]) -> bool {
    let n = tokens.len();
    n >= 2 && n % 2 == 0 && tokens[..n / 2] == tokens[n / 2..]
}

/// Classifies one output by precedence: wrong language, then hypothesis
/// duplication, then source copying, then length-ratio deviations.
#[allow(clippy::too_many_arguments)]
pub fn diagnose_failures(
    x: &TokenSentence,
    y: &TokenSentence,
    reference: &TokenSentence,
    tgt: &LanguageTag,
    lid: &dyn LanguageDetector,
    over_ratio: f64,
    under_ratio: f64,
) -> Result<Diagnosis, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let copy_of_source = source_overlap(y, x) >= DEFAULT_COPY_OVERLAP;
    let (detected, _) = lid.detect(y);
    let label = if &detected != tgt {
        FailureLabel::WrongLanguage
    } else if is_two_identical_halves(&y.tokens) {
        FailureLabel::SelfGeneratedReference
    } else if copy_of_source {
        FailureLabel::NonTranslation
    } else {
        let ratio = y.len() as f64 / reference.len() as f64;
        if ratio > over_ratio {
            FailureLabel::OverTranslation
        } else if ratio < under_ratio {
            FailureLabel::UnderTranslation
        } else {
            FailureLabel::Ok
        }
    };
    Ok(Diagnosis {
        label,
        copy_of_source,
    })
}

/// Sampling setup used when generating pseudo-reference candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoReferenceGenConfig {
    pub num_candidates: usize,
    pub min_p: f64,
}

impl Default for PseudoReferenceGenConfig {
    fn default() -> Self {
        Self {
            num_candidates: 32,
            min_p: 0.01,
        }
    }
}

/// Index of the highest-reward candidate; ties go to the lowest index.
pub fn select_pseudo_reference(
    candidates: &[TokenSentence],
    rewards: &[f64],
) -> Result<usize, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    if candidates.len() != rewards.len() {
        return Err(EvalError::LengthMismatch {
            candidates: candidates.len(),
            rewards: rewards.len(),
        });
    }
    let mut best = 0;
    for (i, &r) in rewards.iter().enumerate() {
        if r > rewards[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Average rank of each system across directions (rank 1 is best; ties
/// share the mean of the tied ranks).
pub fn aggregate_ranks(
    scores: &BTreeMap<String, BTreeMap<String, f64>>,
    higher_better: bool,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let directions: BTreeSet<&String> = scores.values().flat_map(|m| m.keys()).collect();
    for (system, per_direction) in scores {
        for direction in &directions {
            if !per_direction.contains_key(*direction) {
                return Err(EvalError::MissingCell {
                    system: system.clone(),
                    direction: (*direction).clone(),
                });
            }
        }
    }

    let mut totals: BTreeMap<String, f64> = scores.keys().map(|s| (s.clone(), 0.0)).collect();
    for direction in &directions {
        let mut entries: Vec<(&String, f64)> = scores
            .iter()
            .map(|(system, m)| (system, m[*direction]))
            .collect();
        entries.sort_by(|a, b| {
            let ord = a.1.partial_cmp(&b.1).expect("finite scores");
            if higher_better {
                ord.reverse()
            } else {
                ord
            }
        });
        // Assign shared mean ranks to tied runs.
        let mut i = 0;
        while i < entries.len() {
            let mut j = i;
            while j + 1 < entries.len() && entries[j + 1].1 == entries[i].1 {
                j += 1;
            }
            let shared = (i + 1 + j + 1) as f64 / 2.0;
            for entry in &entries[i..=j] {
                *totals.get_mut(entry.0).expect("known system") += shared;
            }
            i = j + 1;
        }
    }
    let num_directions = directions.len().max(1) as f64;
    Ok(totals
        .into_iter()
        .map(|(system, total)| (system, total / num_directions))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lid::PrefixLid;
    use crate::text::segment;

    fn tag(code: &str) -> LanguageTag {
        LanguageTag::new(code).unwrap()
    }

    fn sent(text: &str, lang: &str) -> TokenSentence {
        segment(text, tag(lang))
    }

    #[test]
    fn bleu_identity_is_100() {
        let y = sent("the quick brown fox", "eng");
        let score = bleu(&y, &[y.clone()]).unwrap();
        assert!((score.value - 100.0).abs() < 1e-9);
        assert_eq!(score.brevity_penalty, 1.0);
    }

    #[test]
    fn bleu_empty_hypothesis_is_0() {
        let score = bleu(&sent("", "eng"), &[sent("a b", "eng")]).unwrap();
        assert_eq!(score.value, 0.0);
    }

    #[test]
    fn bleu_no_references_is_an_error() {
        assert!(matches!(
            bleu(&sent("a b", "eng"), &[]),
            Err(EvalError::NoReferences)
        ));
    }

    #[test]
    fn bleu_hand_counted_ngrams() {
        // hyp "a b c d" vs ref "a b c e": unigrams 3/4, bigrams 2/3,
        // trigrams 1/2, fourgrams 0/1 smoothed to 1/2.
        let score = bleu(&sent("a b c d", "eng"), &[sent("a b c e", "eng")]).unwrap();
        assert_eq!(score.precisions[0], 3.0 / 4.0);
        assert_eq!(score.precisions[1], 2.0 / 3.0);
        assert_eq!(score.precisions[2], 1.0 / 2.0);
        assert_eq!(score.precisions[3], 1.0 / 2.0);
        assert_eq!(score.brevity_penalty, 1.0);
        assert!((score.value - 59.4604).abs() < 5e-5);
    }

    #[test]
    fn bleu_brevity_penalty_and_short_hypotheses() {
        // "a b" vs "a b c d": all produced orders perfect, orders 3 and 4
        // unproduced score 1, BP = exp(1 - 4/2).
        let score = bleu(&sent("a b", "eng"), &[sent("a b c d", "eng")]).unwrap();
        assert_eq!(score.precisions, [1.0, 1.0, 1.0, 1.0]);
        assert!((score.brevity_penalty - (-1.0f64).exp()).abs() < 1e-12);
        assert!((score.value - 36.7879).abs() < 5e-5);
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // "a a a a" vs "a b c d": the four unigram hits clip at the single
        // reference count.
        let score = bleu(&sent("a a a a", "eng"), &[sent("a b c d", "eng")]).unwrap();
        assert_eq!(score.precisions[0], 1.0 / 4.0);
        assert_eq!(score.precisions[1], 1.0 / 4.0);
        assert_eq!(score.precisions[2], 1.0 / 3.0);
        assert_eq!(score.precisions[3], 1.0 / 2.0);
        assert!((score.value - 31.9472).abs() < 5e-5);
    }

    #[test]
    fn bleu_multi_reference_takes_best_counts() {
        let refs = [sent("a b c d", "eng"), sent("b c d e f", "eng")];
        let score = bleu(&sent("a b c d e", "eng"), &refs).unwrap();
        // Every n-gram occurs in one of the references and the closest
        // reference length equals the hypothesis length.
        assert_eq!(score.precisions, [1.0, 1.0, 1.0, 1.0]);
        assert!((score.value - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_permutation_sensitive() {
        let reference = sent("a b c d e", "eng");
        let straight = bleu(&reference, &[reference.clone()]).unwrap();
        let shuffled = bleu(&sent("e d c b a", "eng"), &[reference]).unwrap();
        assert!(shuffled.value < straight.value);
    }

    #[test]
    fn lcr_counts_detected_languages() {
        let outputs = vec![
            sent("L1_w1 L1_w2", "L1"),
            sent("L1_w3 L1_w4", "L1"),
            sent("L0_w1 L0_w2", "L1"),
            sent("L0_w3 L0_w4", "L1"),
        ];
        let report = lcr(&outputs, &tag("L1"), &PrefixLid).unwrap();
        assert_eq!(report.rate, 0.5);
        assert_eq!(report.counts["L0"], 2);
        assert_eq!(report.counts["L1"], 2);
        assert!(matches!(
            lcr(&[], &tag("L1"), &PrefixLid),
            Err(EvalError::NoOutputs)
        ));
        let all_target = vec![sent("L1_w1", "L1"); 3];
        assert_eq!(lcr(&all_target, &tag("L1"), &PrefixLid).unwrap().rate, 1.0);
    }

    #[test]
    fn lcr_report_formats_reference_rates() {
        // Report-formatting fixture: rates echo back exactly.
        for rate in [0.8329, 0.9619] {
            let total = 10_000;
            let correct = (rate * total as f64).round() as usize;
            let mut outputs = vec![sent("L1_w1 L1_w2", "L1"); correct];
            outputs.extend(vec![sent("L0_w1 L0_w2", "L1"); total - correct]);
            let report = lcr(&outputs, &tag("L1"), &PrefixLid).unwrap();
            assert!((report.rate - rate).abs() < 1e-12);
        }
    }

    #[test]
    fn penalized_score_contract() {
        assert_eq!(penalized_score(-3.0, -25.0, false), -25.0);
        assert_eq!(penalized_score(0.9, 0.0, true), 0.9);
        assert_eq!(penalized_score(0.9, 0.0, false), 0.0);
    }

    fn diagnose(x: &TokenSentence, y: &TokenSentence, reference: &TokenSentence) -> Diagnosis {
        diagnose_failures(
            x,
            y,
            reference,
            &tag("L1"),
            &PrefixLid,
            DEFAULT_OVER_RATIO,
            DEFAULT_UNDER_RATIO,
        )
        .unwrap()
    }

    #[test]
    fn diagnosis_covers_every_label() {
        let x = sent("L0_w1 L0_w2 L0_w3 L0_w4", "L0");
        let reference = sent("L1_w1 L1_w2 L1_w3 L1_w4", "L1");

        // Copying the source fires wrong-language first, with the copy flag.
        let copied = diagnose(&x, &x, &reference);
        assert_eq!(copied.label, FailureLabel::WrongLanguage);
        assert!(copied.copy_of_source);

        // Wrong language without copying.
        let wrong = diagnose(&x, &sent("L2_w1 L2_w2 L2_w3 L2_w4", "L1"), &reference);
        assert_eq!(wrong.label, FailureLabel::WrongLanguage);
        assert!(!wrong.copy_of_source);

        // Two identical halves in the right language.
        let doubled = diagnose(&x, &sent("L1_w1 L1_w2 L1_w1 L1_w2", "L1"), &reference);
        assert_eq!(doubled.label, FailureLabel::SelfGeneratedReference);

        // NON_TRANSLATION: detected as the target by plurality (five L1
        // tokens vs four L0), yet 4 of 5 distinct tokens come from the
        // source. The 9/4 length ratio shows copy precedence beats the
        // over-translation check.
        let copy_heavy = diagnose(
            &x,
            &sent(
                "L0_w1 L0_w2 L0_w3 L0_w4 L1_w9 L1_w9 L1_w9 L1_w9 L1_w9",
                "L1",
            ),
            &reference,
        );
        assert_eq!(copy_heavy.label, FailureLabel::NonTranslation);
        assert!(copy_heavy.copy_of_source);

        // A clean over-translation: right language, junk padding.
        let over = diagnose(
            &x,
            &sent("L1_w1 L1_w2 L1_w3 L1_w4 L1_w9 L1_w8 L1_w7", "L1"),
            &reference,
        );
        assert_eq!(over.label, FailureLabel::OverTranslation);

        // Under-translation: one word of four.
        let under = diagnose(&x, &sent("L1_w1", "L1"), &reference);
        assert_eq!(under.label, FailureLabel::UnderTranslation);

        // A faithful translation.
        let ok = diagnose(&x, &sent("L1_w1 L1_w2 L1_w3 L1_w4", "L1"), &reference);
        assert_eq!(ok.label, FailureLabel::Ok);
        assert!(!ok.copy_of_source);
    }

    #[test]
    fn empty_reference_is_rejected() {
        let x = sent("L0_w1", "L0");
        assert!(matches!(
            diagnose_failures(
                &x,
                &sent("L1_w1", "L1"),
                &sent("", "L1"),
                &tag("L1"),
                &PrefixLid,
                DEFAULT_OVER_RATIO,
                DEFAULT_UNDER_RATIO,
            ),
            Err(EvalError::EmptyReference)
        ));
    }

    #[test]
    fn pseudo_reference_selection() {
        let candidates = vec![
            sent("L1_w1", "L1"),
            sent("L1_w2", "L1"),
            sent("L1_w3", "L1"),
        ];
        assert_eq!(
            select_pseudo_reference(&candidates, &[-10.0, -3.0, -7.0]).unwrap(),
            1
        );
        assert_eq!(
            select_pseudo_reference(&candidates, &[2.0, 2.0, 2.0]).unwrap(),
            0
        );
        assert!(select_pseudo_reference(&[], &[]).is_err());
        assert!(select_pseudo_reference(&candidates, &[1.0]).is_err());
        // Default candidate generation setup.
        let config = PseudoReferenceGenConfig::default();
        assert_eq!(config.num_candidates, 32);
        assert_eq!(config.min_p, 0.01);
    }

    fn grid(entries: &[(&str, &[(&str, f64)])]) -> BTreeMap<String, BTreeMap<String, f64>> {
        entries
            .iter()
            .map(|(system, cells)| {
                (
                    system.to_string(),
                    cells
                        .iter()
                        .map(|(d, v)| (d.to_string(), *v))
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn rank_aggregation_examples() {
        // A beats B on both directions.
        let scores = grid(&[
            ("A", &[("d1", 0.9), ("d2", 0.8)]),
            ("B", &[("d1", 0.5), ("d2", 0.6)]),
        ]);
        let ranks = aggregate_ranks(&scores, true).unwrap();
        assert_eq!(ranks["A"], 1.0);
        assert_eq!(ranks["B"], 2.0);

        // Lower-is-better flips the ordering.
        let ranks = aggregate_ranks(&scores, false).unwrap();
        assert_eq!(ranks["A"], 2.0);
        assert_eq!(ranks["B"], 1.0);

        // Identical scores share the mean rank (n + 1) / 2.
        let tied = grid(&[
            ("A", &[("d1", 0.5), ("d2", 0.5)]),
            ("B", &[("d1", 0.5), ("d2", 0.5)]),
            ("C", &[("d1", 0.5), ("d2", 0.5)]),
        ]);
        let ranks = aggregate_ranks(&tied, true).unwrap();
        for rank in ranks.values() {
            assert_eq!(*rank, 2.0);
        }

        // A hand-ranked 3x3 grid.
        let three = grid(&[
            ("A", &[("d1", 3.0), ("d2", 1.0), ("d3", 2.0)]),
            ("B", &[("d1", 2.0), ("d2", 2.0), ("d3", 2.0)]),
            ("C", &[("d1", 1.0), ("d2", 3.0), ("d3", 2.0)]),
        ]);
        let ranks = aggregate_ranks(&three, true).unwrap();
        // d1: A=1, B=2, C=3; d2: A=3, B=2, C=1; d3: all tied at 2.
        assert_eq!(ranks["A"], 2.0);
        assert_eq!(ranks["B"], 2.0);
        assert_eq!(ranks["C"], 2.0);
        let ranks = aggregate_ranks(
            &grid(&[
                ("A", &[("d1", 3.0), ("d2", 3.0)]),
                ("B", &[("d1", 2.0), ("d2", 2.0)]),
                ("C", &[("d1", 1.0), ("d2", 2.0)]),
            ]),
            true,
        )
        .unwrap();
        assert_eq!(ranks["A"], 1.0);
        assert_eq!(ranks["B"], 2.25); // ranks 2 and tied 2.5
        assert_eq!(ranks["C"], 2.75); // ranks 3 and tied 2.5

        // Missing cells are named in the error.
        let missing = grid(&[
            ("A", &[("d1", 1.0), ("d2", 2.0)]),
            ("B", &[("d1", 1.0)]),
        ]);
        match aggregate_ranks(&missing, true) {
            Err(EvalError::MissingCell { system, direction }) => {
                assert_eq!(system, "B");
                assert_eq!(direction, "d2");
            }
            other => panic!("expected missing cell, got {other:?}"),
        }
    }

    #[test]
    fn source_overlap_measures_distinct_token_fraction() {
        let x = sent("a b c d", "src");
        assert_eq!(source_overlap(&x, &x), 1.0);
        assert_eq!(source_overlap(&sent("", "t"), &x), 0.0);
        assert_eq!(source_overlap(&sent("a b z z", "t"), &x), 2.0 / 3.0);
    }
}
