//! Experiment orchestration: validated JSON configs, full training +
//! evaluation runs, and alpha sweeps, all bit-reproducible given a seed.
//!
//! An experiment trains the policy on a set of directions, then evaluates
//! the greedy decoder on fresh prompt sets for both the training directions
//! and any held-out directions, writing a metrics log, a per-instance
//! evaluation report, a summary, a policy checkpoint, the trained language
//! identifier, and a manifest. The manifest's creation timestamp is the
//! only nondeterministic byte in the artifact directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{Embedder, TableEmbedder};
use crate::env::{
    eval_prompts, greedy_decode, synth_lid_corpus, EnvConfig, EnvError, PolicyCheckpoint,
    SemanticEmbedder, SynthEnv,
};
use crate::eval::{
    bleu, diagnose_failures, source_overlap, Diagnosis, EvalError, FailureLabel,
    DEFAULT_COPY_OVERLAP, DEFAULT_OVER_RATIO, DEFAULT_UNDER_RATIO,
};
use crate::grpo::{dictionary_accuracy, metrics_to_ndjson, train, GrpoConfig, GrpoError};
use crate::lid::{train_ngram_lid, LanguageDetector, LidError, LidModel};
use crate::qe::{HoleFlags, HoleyQe, OracleQe, QeBackend, RemoteQe, RemoteQeConfig};
use crate::reward::{RewardConfig, RewardError, RewardMode, RewardSuite};
use crate::text::{LanguageTag, TokenSentence};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config version {got} unsupported (expected {expected})")]
    ConfigVersion { got: u32, expected: u32 },
    #[error("invalid experiment config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("referenced file {0} does not exist")]
    MissingFile(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Lid(#[from] LidError),
    #[error(transparent)]
    Qe(#[from] crate::qe::QeError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Align(#[from] crate::align::AlignError),
}

/// Which quality-estimation backend to run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum QeBackendSpec {
    /// The faithful coverage oracle.
    Oracle,
    /// The deliberately flawed oracle with the configured holes.
    Holey,
    /// A remote `/score` service.
    Remote {
        endpoint: String,
        timeout_secs: u64,
        max_in_flight: usize,
    },
}

/// Which embedding provider backs word alignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum EmbedderSpec {
    /// The deterministic semantic-id table.
    Synthetic { scale: f64 },
    /// Precomputed embeddings from the text format.
    File { path: String },
}

/// Reward composition and component selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub mode: RewardMode,
    pub alpha: f64,
    pub wa_threshold_c: f64,
    pub word_conf_threshold: f64,
    pub holes: HoleFlags,
    pub qe_backend: QeBackendSpec,
    pub embedder: EmbedderSpec,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            mode: RewardMode::Walar,
            alpha: 20.0,
            wa_threshold_c: 1e-3,
            word_conf_threshold: 0.5,
            holes: HoleFlags::all(),
            qe_backend: QeBackendSpec::Holey,
            embedder: EmbedderSpec::Synthetic {
                scale: SemanticEmbedder::DEFAULT_SCALE,
            },
        }
    }
}

/// Language-identifier training setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidSpec {
    pub order_lo: usize,
    pub order_hi: usize,
    pub lines_per_lang: usize,
}

impl Default for LidSpec {
    fn default() -> Self {
        Self {
            order_lo: 1,
            order_hi: 3,
            lines_per_lang: 200,
        }
    }
}

/// A full experiment description. Unknown JSON keys are rejected so typos
/// cannot silently change a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub env: EnvConfig,
    pub reward: RewardSpec,
    pub grpo: GrpoConfig,
    /// `(src, tgt)` language tags trained on, e.g. `["L0", "L1"]`.
    pub directions: Vec<(String, String)>,
    /// Directions excluded from training and evaluated separately.
    #[serde(default)]
    pub held_out: Vec<(String, String)>,
    /// Greedy-decoded prompts per direction set at evaluation time.
    pub eval_prompts: usize,
    pub lid: LidSpec,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            env: EnvConfig::default(),
            reward: RewardSpec::default(),
            grpo: GrpoConfig::default(),
            directions: vec![
                ("L0".into(), "L1".into()),
                ("L0".into(), "L2".into()),
                ("L0".into(), "L3".into()),
                ("L1".into(), "L2".into()),
            ],
            held_out: Vec::new(),
            eval_prompts: 200,
            lid: LidSpec::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self, RunnerError> {
        let config: Self = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunnerError> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|source| RunnerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&content)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.version != CONFIG_VERSION {
            return Err(RunnerError::ConfigVersion {
                got: self.version,
                expected: CONFIG_VERSION,
            });
        }
        let env = SynthEnv::new(self.env.clone())?;
        if self.directions.is_empty() {
            return Err(RunnerError::Invalid("no training directions".into()));
        }
        for (src, tgt) in self.directions.iter().chain(&self.held_out) {
            let src_tag = LanguageTag::new(src.clone())
                .map_err(|_| RunnerError::Invalid("empty language tag".into()))?;
            let tgt_tag = LanguageTag::new(tgt.clone())
                .map_err(|_| RunnerError::Invalid("empty language tag".into()))?;
            env.lang_index(&src_tag)?;
            env.lang_index(&tgt_tag)?;
            if src_tag == tgt_tag {
                return Err(RunnerError::Invalid(format!(
                    "direction ({src}, {tgt}) maps a language to itself"
                )));
            }
        }
        for held in &self.held_out {
            if self.directions.contains(held) {
                return Err(RunnerError::Invalid(format!(
                    "held-out direction ({}, {}) also appears in the training set",
                    held.0, held.1
                )));
            }
        }
        if self.eval_prompts == 0 {
            return Err(RunnerError::Invalid("eval_prompts must be >= 1".into()));
        }
        if self.lid.order_lo == 0
            || self.lid.order_lo > self.lid.order_hi
            || self.lid.lines_per_lang == 0
        {
            return Err(RunnerError::Invalid("bad lid spec".into()));
        }
        if let EmbedderSpec::File { path } = &self.reward.embedder {
            if !Path::new(path).exists() {
                return Err(RunnerError::MissingFile(path.clone()));
            }
        }
        self.grpo.validate()?;
        let reward_config = RewardConfig {
            alpha: self.reward.alpha,
            wa_threshold_c: self.reward.wa_threshold_c,
            word_conf_threshold: self.reward.word_conf_threshold,
            unknown_word_policy: Default::default(),
        };
        reward_config.validate()?;
        Ok(())
    }

    fn direction_indices(
        &self,
        env: &SynthEnv,
        directions: &[(String, String)],
    ) -> Result<Vec<(usize, usize)>, RunnerError> {
        directions
            .iter()
            .map(|(src, tgt)| {
                let src_idx = env.lang_index(&LanguageTag::new(src.clone()).expect("validated"))?;
                let tgt_idx = env.lang_index(&LanguageTag::new(tgt.clone()).expect("validated"))?;
                Ok((src_idx, tgt_idx))
            })
            .collect()
    }
}

/// Builds the reward components an experiment asked for.
pub fn build_suite(config: &ExperimentConfig, env: &SynthEnv, lid: LidModel) -> Result<RewardSuite, RunnerError> {
    let qe: Box<dyn QeBackend> = match &config.reward.qe_backend {
        QeBackendSpec::Oracle => Box::new(OracleQe::new(env.clone())),
        QeBackendSpec::Holey => Box::new(HoleyQe::new(env.clone(), config.reward.holes)),
        QeBackendSpec::Remote {
            endpoint,
            timeout_secs,
            max_in_flight,
        } => Box::new(RemoteQe::new(RemoteQeConfig {
            endpoint: endpoint.clone(),
            timeout_secs: *timeout_secs,
            max_in_flight: *max_in_flight,
        })?),
    };
    let embedder: Box<dyn Embedder> = match &config.reward.embedder {
        EmbedderSpec::Synthetic { scale } => Box::new(SemanticEmbedder::new(env, *scale)),
        EmbedderSpec::File { path } => Box::new(TableEmbedder::load(path)?),
    };
    let reward_config = RewardConfig {
        alpha: config.reward.alpha,
        wa_threshold_c: config.reward.wa_threshold_c,
        word_conf_threshold: config.reward.word_conf_threshold,
        unknown_word_policy: Default::default(),
    };
    Ok(RewardSuite::new(
        config.reward.mode,
        reward_config,
        qe,
        Box::new(lid),
        embedder,
    )?)
}

/// Aggregate evaluation of one direction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSetSummary {
    pub num_instances: usize,
    pub mean_bleu: f64,
    pub lcr: f64,
    pub copy_rate: f64,
    pub wrong_or_copy_rate: f64,
    pub mean_len_ratio: f64,
    /// `|mean_len_ratio - 1|`.
    pub len_ratio_dev: f64,
    pub dict_acc: f64,
    pub mean_reward: f64,
    pub mean_r_qe: f64,
    pub mean_r_wa: f64,
    pub failure_counts: BTreeMap<String, usize>,
}

/// Whole-run summary written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RewardMode,
    pub alpha: f64,
    pub seed: u64,
    pub steps: usize,
    pub train: DirectionSetSummary,
    pub held_out: Option<DirectionSetSummary>,
}

#[derive(Debug, Serialize)]
struct InstanceRecord {
    record: &'static str,
    src_lang: String,
    tgt_lang: String,
    source: String,
    hypothesis: String,
    reference: String,
    bleu: f64,
    reward_total: f64,
    r_qe: f64,
    r_wa: Option<f64>,
    r_la: Option<bool>,
    failure: FailureLabel,
    copy_of_source: bool,
    detected: String,
}

/// Greedy-decodes and scores one prompt set.
fn evaluate_direction_set(
    env: &SynthEnv,
    policy: &crate::env::ToyPolicy,
    suite: &RewardSuite,
    lid: &dyn LanguageDetector,
    prompts: &[(TokenSentence, LanguageTag)],
    report: &mut String,
) -> Result<DirectionSetSummary, RunnerError> {
    let mut mean_bleu = 0.0;
    let mut lcr_hits = 0usize;
    let mut copy_hits = 0usize;
    let mut wrong_or_copy_hits = 0usize;
    let mut mean_len_ratio = 0.0;
    let mut mean_reward = 0.0;
    let mut mean_r_qe = 0.0;
    let mut mean_r_wa = 0.0;
    let mut failure_counts: BTreeMap<String, usize> = BTreeMap::new();

    for (x, tgt) in prompts {
        let gold = env.gold_translate(x, tgt)?;
        let decoded = greedy_decode(policy, env, x, tgt)?;
        let y = &decoded.hypothesis;
        let breakdown = suite.evaluate(x, y, tgt)?;
        let score = bleu(y, std::slice::from_ref(&gold))?;
        let Diagnosis {
            label,
            copy_of_source,
        } = diagnose_failures(x, y, &gold, tgt, lid, DEFAULT_OVER_RATIO, DEFAULT_UNDER_RATIO)?;
        let (detected, _) = lid.detect(y);
        let wrong_language = &detected != tgt;

        mean_bleu += score.value;
        lcr_hits += usize::from(!wrong_language);
        let is_copy = source_overlap(y, x) >= DEFAULT_COPY_OVERLAP;
        copy_hits += usize::from(is_copy);
        wrong_or_copy_hits += usize::from(wrong_language || is_copy);
        mean_len_ratio += y.len() as f64 / gold.len() as f64;
        mean_reward += breakdown.total;
        mean_r_qe += breakdown.r_qe;
        mean_r_wa += breakdown.r_wa.unwrap_or(0.0);
        *failure_counts.entry(format!("{label:?}")).or_insert(0) += 1;

        let instance = InstanceRecord {
            record: "instance",
            src_lang: x.lang.to_string(),
            tgt_lang: tgt.to_string(),
            source: x.joined(),
            hypothesis: y.joined(),
            reference: gold.joined(),
            bleu: score.value,
            reward_total: breakdown.total,
            r_qe: breakdown.r_qe,
            r_wa: breakdown.r_wa,
            r_la: breakdown.r_la,
            failure: label,
            copy_of_source,
            detected: detected.to_string(),
        };
        report.push_str(&serde_json::to_string(&instance).expect("record serializes"));
        report.push('\n');
    }

    let n = prompts.len() as f64;
    let mean_len_ratio = mean_len_ratio / n;
    Ok(DirectionSetSummary {
        num_instances: prompts.len(),
        mean_bleu: mean_bleu / n,
        lcr: lcr_hits as f64 / n,
        copy_rate: copy_hits as f64 / n,
        wrong_or_copy_rate: wrong_or_copy_hits as f64 / n,
        mean_len_ratio,
        len_ratio_dev: (mean_len_ratio - 1.0).abs(),
        dict_acc: dictionary_accuracy(policy, env, prompts)?,
        mean_reward: mean_reward / n,
        mean_r_qe: mean_r_qe / n,
        mean_r_wa: mean_r_wa / n,
        failure_counts,
    })
}

/// Paths and summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub summary: RunSummary,
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), RunnerError> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|source| RunnerError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Trains per the config, evaluates training and held-out directions, and
/// writes the artifact directory. Fully deterministic given the seed; the
/// manifest's `created_unix_secs` field is the only timestamp.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: impl AsRef<Path>,
) -> Result<RunArtifacts, RunnerError> {
    config.validate()?;
    let out_dir = out_dir.as_ref().to_path_buf();
    fs::create_dir_all(&out_dir).map_err(|source| RunnerError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    let env = SynthEnv::new(config.env.clone())?;
    let lid_corpus = synth_lid_corpus(&env, config.lid.lines_per_lang, config.seed);
    let lid = train_ngram_lid(&lid_corpus, config.lid.order_lo, config.lid.order_hi)?;
    // One identifier instance scores rewards, an identical twin serves
    // evaluation, keeping reward-path call counters meaningful.
    let eval_lid = train_ngram_lid(&lid_corpus, config.lid.order_lo, config.lid.order_hi)?;
    let suite = build_suite(config, &env, lid)?;

    let train_dirs = config.direction_indices(&env, &config.directions)?;
    let mut grpo_config = config.grpo.clone();
    grpo_config.seed = config.seed;
    let state = train(&env, &suite, &grpo_config, &train_dirs, &eval_lid)?;

    // Evaluation prompt streams are disjoint from training streams (the
    // trainer uses nonzero ChaCha streams, these use the default).
    let train_prompts = eval_prompts(&env, &train_dirs, config.eval_prompts, config.seed)?;
    let mut report = String::new();
    let train_summary = evaluate_direction_set(
        &env,
        &state.policy,
        &suite,
        &eval_lid,
        &train_prompts,
        &mut report,
    )?;
    let held_out_summary = if config.held_out.is_empty() {
        None
    } else {
        let held_dirs = config.direction_indices(&env, &config.held_out)?;
        let held_prompts =
            eval_prompts(&env, &held_dirs, config.eval_prompts, config.seed.wrapping_add(1))?;
        Some(evaluate_direction_set(
            &env,
            &state.policy,
            &suite,
            &eval_lid,
            &held_prompts,
            &mut report,
        )?)
    };

    let summary = RunSummary {
        mode: config.reward.mode,
        alpha: config.reward.alpha,
        seed: config.seed,
        steps: config.grpo.total_steps,
        train: train_summary,
        held_out: held_out_summary,
    };
    report.push_str(
        &serde_json::to_string(&serde_json::json!({
            "record": "summary",
            "summary": summary,
        }))
        .expect("summary serializes"),
    );
    report.push('\n');

    let checkpoint = PolicyCheckpoint::new(
        &state.policy,
        &env,
        config.seed,
        0,
        state.step,
        config.directions.clone(),
    );

    write_file(&out_dir, "metrics.ndjson", &metrics_to_ndjson(&state.metrics))?;
    write_file(&out_dir, "eval_report.ndjson", &report)?;
    write_file(
        &out_dir,
        "summary.json",
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    checkpoint.save(out_dir.join("checkpoint.json")).map_err(RunnerError::Env)?;
    write_file(&out_dir, "lid_model.txt", &eval_lid.serialize())?;
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = serde_json::json!({
        "version": CONFIG_VERSION,
        "created_unix_secs": created,
        "config": config,
        "files": [
            "metrics.ndjson",
            "eval_report.ndjson",
            "summary.json",
            "checkpoint.json",
            "lid_model.txt"
        ],
    });
    write_file(
        &out_dir,
        "manifest.json",
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;

    Ok(RunArtifacts { out_dir, summary })
}

/// One row of an alpha sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub bleu: Option<f64>,
    pub lcr: Option<f64>,
    pub mean_reward: Option<f64>,
    pub len_ratio: Option<f64>,
    pub len_ratio_dev: Option<f64>,
    pub error: Option<String>,
}

/// Runs the base config once per alpha, sharing every seed. A failing run
/// contributes an error row; the other runs continue.
pub fn sweep_alpha(
    base: &ExperimentConfig,
    alphas: &[f64],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<SweepRow>, RunnerError> {
    if alphas.is_empty() {
        return Err(RunnerError::Invalid("alpha sweep needs at least one value".into()));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|source| RunnerError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut config = base.clone();
        config.reward.alpha = alpha;
        let run_dir = out_dir.join(format!("alpha_{alpha}"));
        match run_experiment(&config, &run_dir) {
            Ok(artifacts) => rows.push(SweepRow {
                alpha,
                bleu: Some(artifacts.summary.train.mean_bleu),
                lcr: Some(artifacts.summary.train.lcr),
                mean_reward: Some(artifacts.summary.train.mean_reward),
                len_ratio: Some(artifacts.summary.train.mean_len_ratio),
                len_ratio_dev: Some(artifacts.summary.train.len_ratio_dev),
                error: None,
            }),
            Err(err) => rows.push(SweepRow {
                alpha,
                bleu: None,
                lcr: None,
                mean_reward: None,
                len_ratio: None,
                len_ratio_dev: None,
                error: Some(err.to_string()),
            }),
        }
    }
    let table = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write_file(out_dir, "sweep.json", &table)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            env: EnvConfig {
                num_langs: 3,
                vocab_size: 8,
                min_len: 2,
                max_len: 3,
                seed: 0,
            },
            grpo: GrpoConfig {
                total_steps: 4,
                prompts_per_step: 2,
                group_size: 4,
                ..GrpoConfig::default()
            },
            directions: vec![("L0".into(), "L1".into()), ("L1".into(), "L2".into())],
            held_out: vec![("L2".into(), "L0".into())],
            eval_prompts: 6,
            lid: LidSpec {
                lines_per_lang: 30,
                ..LidSpec::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(ExperimentConfig::default()).unwrap();
        value["mystery_knob"] = serde_json::json!(7);
        let err = ExperimentConfig::from_json(&value.to_string()).unwrap_err();
        assert!(matches!(err, RunnerError::Parse(_)));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut config = ExperimentConfig::default();
        config.version = 9;
        assert!(matches!(
            config.validate(),
            Err(RunnerError::ConfigVersion { got: 9, .. })
        ));
    }

    #[test]
    fn held_out_overlap_is_rejected() {
        let mut config = small_config();
        config.held_out = vec![("L0".into(), "L1".into())];
        assert!(matches!(config.validate(), Err(RunnerError::Invalid(_))));
    }

    #[test]
    fn unknown_direction_language_is_rejected() {
        let mut config = small_config();
        config.directions.push(("L7".into(), "L0".into()));
        assert!(config.validate().is_err());
        let mut config = small_config();
        config.directions.push(("L0".into(), "L0".into()));
        assert!(config.validate().is_err());
    }

    #[test]
    fn missing_embedding_file_is_rejected() {
        let mut config = small_config();
        config.reward.embedder = EmbedderSpec::File {
            path: "/nonexistent/embeddings.txt".into(),
        };
        assert!(matches!(
            config.validate(),
            Err(RunnerError::MissingFile(_))
        ));
    }

    #[test]
    fn zero_step_run_evaluates_the_untrained_policy() {
        let mut config = small_config();
        config.grpo.total_steps = 0;
        let dir = tempfile::tempdir().unwrap();
        let artifacts = run_experiment(&config, dir.path().join("run")).unwrap();
        // The untrained policy emits near-uniform junk: the summary exists
        // and the metrics log is empty.
        let metrics = fs::read_to_string(artifacts.out_dir.join("metrics.ndjson")).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(artifacts.summary.train.num_instances, 6);
        assert!(artifacts.summary.held_out.is_some());
        for name in [
            "metrics.ndjson",
            "eval_report.ndjson",
            "summary.json",
            "checkpoint.json",
            "lid_model.txt",
            "manifest.json",
        ] {
            assert!(artifacts.out_dir.join(name).exists(), "{name} missing");
        }
    }

    fn dir_bytes_except_manifest(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut contents = BTreeMap::new();
        for entry in fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            let name = entry.file_name().to_string_lossy().to_string();
            if name == "manifest.json" {
                continue;
            }
            contents.insert(name, fs::read(entry.path()).unwrap());
        }
        contents
    }

    #[test]
    fn artifacts_are_byte_identical_across_runs() {
        let config = small_config();
        let dir = tempfile::tempdir().unwrap();
        let a = run_experiment(&config, dir.path().join("a")).unwrap();
        let b = run_experiment(&config, dir.path().join("b")).unwrap();
        assert_eq!(
            dir_bytes_except_manifest(&a.out_dir),
            dir_bytes_except_manifest(&b.out_dir)
        );
        // Manifests differ at most in the timestamp field.
        let read = |p: &Path| -> serde_json::Value {
            serde_json::from_str(&fs::read_to_string(p.join("manifest.json")).unwrap()).unwrap()
        };
        let mut ma = read(&a.out_dir);
        let mut mb = read(&b.out_dir);
        ma["created_unix_secs"] = serde_json::json!(0);
        mb["created_unix_secs"] = serde_json::json!(0);
        assert_eq!(ma, mb);
    }

    #[test]
    fn sweep_produces_one_row_per_alpha_and_survives_failures() {
        let config = small_config();
        let dir = tempfile::tempdir().unwrap();
        let rows = sweep_alpha(&config, &[0.0, 20.0], dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.error.is_none()));
        assert!(dir.path().join("sweep.json").exists());
        assert!(dir.path().join("alpha_0/summary.json").exists());

        // A single-alpha sweep mirrors run_experiment's summary.
        let single = sweep_alpha(&config, &[20.0], dir.path().join("single")).unwrap();
        assert_eq!(single.len(), 1);
        let direct = run_experiment(&config, dir.path().join("direct")).unwrap();
        // Both runs used alpha 20 (the config default), same seeds.
        assert_eq!(single[0].bleu.unwrap(), direct.summary.train.mean_bleu);

        // An invalid alpha fails its row but not the sweep.
        let rows = sweep_alpha(&config, &[-1.0, 20.0], dir.path().join("partial")).unwrap();
        assert!(rows[0].error.is_some());
        assert!(rows[1].error.is_none());
    }
}
