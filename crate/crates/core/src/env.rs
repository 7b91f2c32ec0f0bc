//! Synthetic multilingual translation environment and a small parametric
//! policy with exact log-probabilities.
//!
//! Languages `L0..L{K-1}` each carry `W` tokens named `L<k>_w<id>`; the
//! shared numeric id is the token's meaning, so gold translation is the
//! position-wise id-preserving map into the target vocabulary. The policy
//! conditions each position on `(source semantic id, target language)` and
//! a per-target TAIL context, choosing among every vocabulary token plus
//! SKIP (per position) or STOP (tail). The action space deliberately spans
//! copying the source, switching language, skipping, padding, and
//! duplicating the hypothesis, so every reward-gaming behavior is
//! expressible. Gradients of log-probabilities are closed form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::Embedder;
use crate::qe::SemanticLexicon;
use crate::reward::RewardBreakdown;
use crate::text::{LanguageTag, TokenSentence};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    BadConfig(String),
    #[error("prompt generation needs at least 2 languages, got {0}")]
    TooFewLanguages(usize),
    #[error("token {0:?} is not part of the environment vocabulary")]
    UnknownToken(String),
    #[error("language {0:?} is not part of the environment")]
    UnknownLanguage(String),
    #[error("group size must be at least 1")]
    EmptyGroup,
    #[error("sampling temperature must be nonnegative and finite, got {0}")]
    BadTemperature(f64),
    #[error("malformed action sequence: {0}")]
    MalformedActions(String),
    #[error("policy parameters became non-finite")]
    NonFiniteLogits,
    #[error("checkpoint version {got} unsupported (expected {expected})")]
    CheckpointVersion { got: u32, expected: u32 },
    #[error("checkpoint environment hash {got} does not match {expected}")]
    CheckpointEnvMismatch { got: String, expected: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint (de)serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Shape of the synthetic environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Number of languages `K`.
    pub num_langs: usize,
    /// Tokens per language `W`.
    pub vocab_size: usize,
    /// Inclusive source sentence length range.
    pub min_len: usize,
    pub max_len: usize,
    /// Base seed for corpus and prompt derivation.
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_langs: 4,
            vocab_size: 50,
            min_len: 3,
            max_len: 6,
            seed: 0,
        }
    }
}

/// FNV-1a over the canonical JSON of the config; identifies an environment
/// inside checkpoints.
pub fn env_config_hash(config: &EnvConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in canonical.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// The synthetic translation environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthEnv {
    config: EnvConfig,
    langs: Vec<LanguageTag>,
}

pub fn token_name(lang: usize, id: u32) -> String {
    format!("L{lang}_w{id}")
}

impl SynthEnv {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        if config.num_langs == 0 || config.vocab_size == 0 {
            return Err(EnvError::BadConfig(
                "need at least one language and one token".to_string(),
            ));
        }
        if config.min_len == 0 || config.min_len > config.max_len {
            return Err(EnvError::BadConfig(format!(
                "bad length range [{}, {}]",
                config.min_len, config.max_len
            )));
        }
        if config.max_len > config.vocab_size {
            return Err(EnvError::BadConfig(format!(
                "max_len {} exceeds vocab size {} (prompts use distinct ids)",
                config.max_len, config.vocab_size
            )));
        }
        let langs = (0..config.num_langs)
            .map(|k| LanguageTag::new(format!("L{k}")).expect("nonempty"))
            .collect();
        Ok(Self { config, langs })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn num_langs(&self) -> usize {
        self.config.num_langs
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn languages(&self) -> &[LanguageTag] {
        &self.langs
    }

    pub fn lang_tag(&self, index: usize) -> &LanguageTag {
        &self.langs[index]
    }

    pub fn lang_index(&self, tag: &LanguageTag) -> Result<usize, EnvError> {
        self.langs
            .iter()
            .position(|l| l == tag)
            .ok_or_else(|| EnvError::UnknownLanguage(tag.to_string()))
    }

    /// Splits `L<k>_w<id>` into its language index and semantic id,
    /// validating both against the environment.
    pub fn parse_token(&self, word: &str) -> Result<(usize, u32), EnvError> {
        let unknown = || EnvError::UnknownToken(word.to_string());
        let rest = word.strip_prefix('L').ok_or_else(unknown)?;
        let (lang, id) = rest.split_once("_w").ok_or_else(unknown)?;
        let lang: usize = lang.parse().map_err(|_| unknown())?;
        let id: u32 = id.parse().map_err(|_| unknown())?;
        if lang >= self.config.num_langs || id as usize >= self.config.vocab_size {
            return Err(unknown());
        }
        Ok((lang, id))
    }

    /// Draws a prompt: a source sentence in a random language paired with a
    /// different random target language. Source tokens carry distinct
    /// semantic ids; the length is uniform on the configured range.
    pub fn gen_prompt(&self, rng: &mut ChaCha20Rng) -> Result<(TokenSentence, LanguageTag), EnvError> {
        if self.config.num_langs < 2 {
            return Err(EnvError::TooFewLanguages(self.config.num_langs));
        }
        let src = rng.gen_range(0..self.config.num_langs);
        let offset = rng.gen_range(1..self.config.num_langs);
        let tgt = (src + offset) % self.config.num_langs;
        Ok((self.gen_source(src, rng), self.lang_tag(tgt).clone()))
    }

    /// Draws a prompt for a fixed `(src, tgt)` direction.
    pub fn gen_prompt_in(
        &self,
        src: usize,
        tgt: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<(TokenSentence, LanguageTag), EnvError> {
        if src >= self.config.num_langs || tgt >= self.config.num_langs {
            return Err(EnvError::BadConfig(format!(
                "direction ({src}, {tgt}) outside {} languages",
                self.config.num_langs
            )));
        }
        Ok((self.gen_source(src, rng), self.lang_tag(tgt).clone()))
    }

    fn gen_source(&self, src: usize, rng: &mut ChaCha20Rng) -> TokenSentence {
        let len = rng.gen_range(self.config.min_len..=self.config.max_len);
        let ids = rand::seq::index::sample(rng, self.config.vocab_size, len);
        let tokens = ids.iter().map(|id| token_name(src, id as u32)).collect();
        TokenSentence {
            tokens,
            lang: self.lang_tag(src).clone(),
        }
    }

    /// The reference translation: the position-wise id-preserving map into
    /// the target vocabulary. Used only for evaluation, never inside the
    /// reward.
    pub fn gold_translate(
        &self,
        x: &TokenSentence,
        tgt: &LanguageTag,
    ) -> Result<TokenSentence, EnvError> {
        let tgt_idx = self.lang_index(tgt)?;
        let tokens = x
            .tokens
            .iter()
            .map(|tok| self.parse_token(tok).map(|(_, id)| token_name(tgt_idx, id)))
            .collect::<Result<_, _>>()?;
        Ok(TokenSentence {
            tokens,
            lang: tgt.clone(),
        })
    }
}

impl SemanticLexicon for SynthEnv {
    fn semantic_id(&self, word: &str) -> Option<u32> {
        self.parse_token(word).ok().map(|(_, id)| id)
    }
}

/// Deterministic synthetic embedding table keyed by semantic id.
///
/// Every token embeds as a one-hot vector at its semantic id, scaled so
/// matching ids produce a large dot product; the vector is shared across
/// languages, so true translations align.
#[derive(Debug, Clone)]
pub struct SemanticEmbedder {
    num_langs: usize,
    vocab_size: usize,
    scale: f64,
}

impl SemanticEmbedder {
    /// Default scale: matching ids dot to 16, non-matching to 0, keeping
    /// softmax mass on true matches far above the usual threshold and
    /// non-matches far below it whenever a match exists.
    pub const DEFAULT_SCALE: f64 = 4.0;

    pub fn new(env: &SynthEnv, scale: f64) -> Self {
        Self {
            num_langs: env.num_langs(),
            vocab_size: env.vocab_size(),
            scale,
        }
    }
}

impl Embedder for SemanticEmbedder {
    fn dim(&self) -> usize {
        self.vocab_size
    }

    fn embed(&self, word: &str) -> Option<Vec<f64>> {
        let rest = word.strip_prefix('L')?;
        let (lang, id) = rest.split_once("_w")?;
        let lang: usize = lang.parse().ok()?;
        let id: usize = id.parse().ok()?;
        if lang >= self.num_langs || id >= self.vocab_size {
            return None;
        }
        let mut v = vec![0.0; self.vocab_size];
        v[id] = self.scale;
        Some(v)
    }
}

/// One decision of a rollout: the context it was made in and the raw
/// action index that was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionStep {
    pub context: usize,
    pub action: usize,
}

/// One sampled hypothesis with its exact log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub hypothesis: TokenSentence,
    pub steps: Vec<ActionStep>,
    pub log_prob_total: f64,
    pub reward: Option<RewardBreakdown>,
}

impl Rollout {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }
}

/// `G` rollouts for one prompt, with group advantages filled in after
/// rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub source: TokenSentence,
    pub tgt: LanguageTag,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

/// Tabular policy over `(source semantic id, target language)` position
/// contexts plus one TAIL context per target language.
///
/// Actions `0..W*K` emit vocabulary token `lang * W + id`; the final action
/// index means SKIP in a position context and STOP in a tail context. The
/// distribution per context is the softmax of its logit row divided by the
/// policy temperature.
#[derive(Debug)]
pub struct ToyPolicy {
    vocab_size: usize,
    num_langs: usize,
    temperature: f64,
    /// Row-major `(num_contexts, num_actions)` table.
    logits: Vec<f64>,
    /// Memo of per-context log-softmax rows at the policy temperature,
    /// cleared on any parameter change. Contexts repeat heavily within a
    /// rollout batch, so this removes most softmax work.
    row_cache: std::sync::Mutex<std::collections::HashMap<usize, std::sync::Arc<Vec<f64>>>>,
}

impl Clone for ToyPolicy {
    fn clone(&self) -> Self {
        Self {
            vocab_size: self.vocab_size,
            num_langs: self.num_langs,
            temperature: self.temperature,
            logits: self.logits.clone(),
            row_cache: std::sync::Mutex::new(std::collections::HashMap::new()),
        }
    }
}

impl PartialEq for ToyPolicy {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.num_langs == other.num_langs
            && self.temperature == other.temperature
            && self.logits == other.logits
    }
}

impl ToyPolicy {
    pub fn new_uniform(vocab_size: usize, num_langs: usize, temperature: f64) -> Self {
        let contexts = vocab_size * num_langs + num_langs;
        let actions = vocab_size * num_langs + 1;
        Self {
            vocab_size,
            num_langs,
            temperature,
            logits: vec![0.0; contexts * actions],
            row_cache: std::sync::Mutex::new(std::collections::HashMap::new()),
        }
    }

    pub fn for_env(env: &SynthEnv) -> Self {
        Self::new_uniform(env.vocab_size(), env.num_langs(), 1.0)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_langs(&self) -> usize {
        self.num_langs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_contexts(&self) -> usize {
        self.vocab_size * self.num_langs + self.num_langs
    }

    pub fn num_actions(&self) -> usize {
        self.vocab_size * self.num_langs + 1
    }

    pub fn num_params(&self) -> usize {
        self.num_contexts() * self.num_actions()
    }

    pub fn position_context(&self, id: u32, tgt: usize) -> usize {
        id as usize * self.num_langs + tgt
    }

    pub fn tail_context(&self, tgt: usize) -> usize {
        self.vocab_size * self.num_langs + tgt
    }

    pub fn emit_action(&self, lang: usize, id: u32) -> usize {
        lang * self.vocab_size + id as usize
    }

    /// SKIP in position contexts, STOP in tail contexts.
    pub fn extra_action(&self) -> usize {
        self.vocab_size * self.num_langs
    }

    /// The `(language, id)` a non-extra action emits.
    pub fn action_token(&self, action: usize) -> Option<(usize, u32)> {
        (action < self.extra_action())
            .then(|| (action / self.vocab_size, (action % self.vocab_size) as u32))
    }

    pub fn logit(&self, context: usize, action: usize) -> f64 {
        self.logits[context * self.num_actions() + action]
    }

    pub fn set_logit(&mut self, context: usize, action: usize, value: f64) {
        let idx = context * self.num_actions() + action;
        self.logits[idx] = value;
        self.row_cache.lock().unwrap().clear();
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// One gradient-ascent step over the whole table.
    pub fn apply_ascent_step(&mut self, learning_rate: f64, grad: &[f64]) -> Result<(), EnvError> {
        debug_assert_eq!(grad.len(), self.logits.len());
        self.row_cache.lock().unwrap().clear();
        for (logit, g) in self.logits.iter_mut().zip(grad) {
            *logit += learning_rate * g;
            if !logit.is_finite() {
                return Err(EnvError::NonFiniteLogits);
            }
        }
        Ok(())
    }

    fn row(&self, context: usize) -> &[f64] {
        let n = self.num_actions();
        &self.logits[context * n..(context + 1) * n]
    }

    /// Log-probabilities of every action in a context at a given
    /// temperature, computed stably via max subtraction.
    fn log_softmax_at(&self, context: usize, temperature: f64) -> Vec<f64> {
        let row = self.row(context);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scaled: Vec<f64> = row.iter().map(|&l| (l - max) / temperature).collect();
        let z = scaled.iter().map(|&s| s.exp()).sum::<f64>().ln();
        scaled.into_iter().map(|s| s - z).collect()
    }

    /// Log-probabilities under the policy's own temperature, memoized.
    pub fn log_softmax_row(&self, context: usize) -> std::sync::Arc<Vec<f64>> {
        let mut cache = self.row_cache.lock().unwrap();
        cache
            .entry(context)
            .or_insert_with(|| std::sync::Arc::new(self.log_softmax_at(context, self.temperature)))
            .clone()
    }

    /// Probabilities under the policy's own temperature.
    pub fn probs_row(&self, context: usize) -> Vec<f64> {
        self.log_softmax_row(context)
            .iter()
            .map(|l| l.exp())
            .collect()
    }

    fn argmax(&self, context: usize) -> usize {
        let row = self.row(context);
        let mut best = 0;
        for (i, &l) in row.iter().enumerate() {
            if l > row[best] {
                best = i;
            }
        }
        best
    }

    /// Chooses an action: argmax when `temperature == 0`, otherwise a draw
    /// from the tempered softmax.
    fn choose(&self, context: usize, temperature: f64, rng: &mut ChaCha20Rng) -> usize {
        if temperature == 0.0 {
            return self.argmax(context);
        }
        let probs: Vec<f64> = if temperature == self.temperature {
            self.log_softmax_row(context).iter().map(|l| l.exp()).collect()
        } else {
            self.log_softmax_at(context, temperature)
                .into_iter()
                .map(f64::exp)
                .collect()
        };
        let draw: f64 = rng.gen();
        let mut cumulative = 0.0;
        for (action, p) in probs.iter().enumerate() {
            cumulative += p;
            if draw < cumulative {
                return action;
            }
        }
        probs.len() - 1
    }
}

fn prompt_ids(env: &SynthEnv, x: &TokenSentence) -> Result<Vec<u32>, EnvError> {
    x.tokens
        .iter()
        .map(|tok| env.parse_token(tok).map(|(_, id)| id))
        .collect()
}

fn rollout_once(
    policy: &ToyPolicy,
    ids: &[u32],
    tgt_idx: usize,
    tgt: &LanguageTag,
    temperature: f64,
    rng: &mut ChaCha20Rng,
) -> Rollout {
    let cap = 2 * ids.len();
    let mut steps = Vec::with_capacity(ids.len() + 1);
    let mut tokens: Vec<String> = Vec::new();
    let mut log_prob_total = 0.0;

    let record = |policy: &ToyPolicy, context: usize, action: usize, lp: &mut f64| {
        *lp += policy.log_softmax_row(context)[action];
    };

    for &id in ids {
        let context = policy.position_context(id, tgt_idx);
        let action = policy.choose(context, temperature, rng);
        record(policy, context, action, &mut log_prob_total);
        steps.push(ActionStep { context, action });
        if let Some((lang, wid)) = policy.action_token(action) {
            tokens.push(token_name(lang, wid));
        }
    }

    let tail = policy.tail_context(tgt_idx);
    while tokens.len() < cap {
        let action = policy.choose(tail, temperature, rng);
        record(policy, tail, action, &mut log_prob_total);
        steps.push(ActionStep {
            context: tail,
            action,
        });
        match policy.action_token(action) {
            Some((lang, wid)) => tokens.push(token_name(lang, wid)),
            None => break, // STOP
        }
    }

    Rollout {
        hypothesis: TokenSentence {
            tokens,
            lang: tgt.clone(),
        },
        steps,
        log_prob_total,
        reward: None,
    }
}

/// Samples `G` hypotheses for one prompt.
///
/// Each source position draws over `{EMIT(token), SKIP}`; the tail context
/// then draws over `{EMIT(token), STOP}` until STOP or the hypothesis
/// reaches the hard cap of twice the source length. `temperature` skews the
/// sampling distribution only; recorded log-probabilities are always under
/// the policy's own distribution, and `temperature == 0` decodes greedily.
pub fn sample_rollouts(
    policy: &ToyPolicy,
    env: &SynthEnv,
    x: &TokenSentence,
    tgt: &LanguageTag,
    group_size: usize,
    temperature: f64,
    rng: &mut ChaCha20Rng,
) -> Result<RolloutGroup, EnvError> {
    if group_size == 0 {
        return Err(EnvError::EmptyGroup);
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(EnvError::BadTemperature(temperature));
    }
    let tgt_idx = env.lang_index(tgt)?;
    let ids = prompt_ids(env, x)?;
    let rollouts = (0..group_size)
        .map(|_| rollout_once(policy, &ids, tgt_idx, tgt, temperature, rng))
        .collect();
    Ok(RolloutGroup {
        source: x.clone(),
        tgt: tgt.clone(),
        rollouts,
        advantages: Vec::new(),
    })
}

/// Greedy (argmax) decode of one prompt.
pub fn greedy_decode(
    policy: &ToyPolicy,
    env: &SynthEnv,
    x: &TokenSentence,
    tgt: &LanguageTag,
) -> Result<Rollout, EnvError> {
    let tgt_idx = env.lang_index(tgt)?;
    let ids = prompt_ids(env, x)?;
    // Greedy never consults the generator.
    let mut unused = <ChaCha20Rng as rand::SeedableRng>::seed_from_u64(0);
    Ok(rollout_once(policy, &ids, tgt_idx, tgt, 0.0, &mut unused))
}

/// Exact log-probability of an action sequence under the current policy
/// parameters.
///
/// The sequence must be well-formed for the prompt: one action per source
/// position, then tail actions that either end in STOP or run the
/// hypothesis exactly to the cap. Any continuation past STOP or the cap is
/// malformed.
pub fn sequence_log_prob(
    policy: &ToyPolicy,
    env: &SynthEnv,
    x: &TokenSentence,
    tgt: &LanguageTag,
    actions: &[usize],
) -> Result<f64, EnvError> {
    let tgt_idx = env.lang_index(tgt)?;
    let ids = prompt_ids(env, x)?;
    let m = ids.len();
    let cap = 2 * m;
    if actions.len() < m {
        return Err(EnvError::MalformedActions(format!(
            "expected at least {m} position actions, got {}",
            actions.len()
        )));
    }
    let num_actions = policy.num_actions();
    if let Some(&bad) = actions.iter().find(|&&a| a >= num_actions) {
        return Err(EnvError::MalformedActions(format!(
            "action index {bad} out of range"
        )));
    }

    let mut total = 0.0;
    let mut emitted = 0usize;
    for (pos, &id) in ids.iter().enumerate() {
        let context = policy.position_context(id, tgt_idx);
        let action = actions[pos];
        total += policy.log_softmax_row(context)[action];
        if policy.action_token(action).is_some() {
            emitted += 1;
        }
    }

    let tail = policy.tail_context(tgt_idx);
    let mut stopped = false;
    for &action in &actions[m..] {
        if stopped {
            return Err(EnvError::MalformedActions(
                "action after STOP".to_string(),
            ));
        }
        if emitted >= cap {
            return Err(EnvError::MalformedActions(
                "tail action past the length cap".to_string(),
            ));
        }
        total += policy.log_softmax_row(tail)[action];
        match policy.action_token(action) {
            Some(_) => emitted += 1,
            None => stopped = true,
        }
    }
    if !stopped && emitted < cap {
        return Err(EnvError::MalformedActions(
            "sequence neither stopped nor reached the cap".to_string(),
        ));
    }
    Ok(total)
}

/// Serialized form of a policy plus enough state to resume or evaluate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub env: EnvConfig,
    pub env_hash: String,
    pub temperature: f64,
    pub logits: Vec<f64>,
    pub seed: u64,
    pub rng_word_pos: u128,
    pub step: u64,
    /// `(src, tgt)` language tags the policy was trained on.
    pub directions: Vec<(String, String)>,
}

impl PolicyCheckpoint {
    pub fn new(
        policy: &ToyPolicy,
        env: &SynthEnv,
        seed: u64,
        rng_word_pos: u128,
        step: u64,
        directions: Vec<(String, String)>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            env: env.config().clone(),
            env_hash: env_config_hash(env.config()),
            temperature: policy.temperature(),
            logits: policy.logits().to_vec(),
            seed,
            rng_word_pos,
            step,
            directions,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EnvError> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|source| EnvError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|source| EnvError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let checkpoint: Self = serde_json::from_str(&content)?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(EnvError::CheckpointVersion {
                got: checkpoint.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let expected = env_config_hash(&checkpoint.env);
        if checkpoint.env_hash != expected {
            return Err(EnvError::CheckpointEnvMismatch {
                got: checkpoint.env_hash,
                expected,
            });
        }
        Ok(checkpoint)
    }

    /// Rebuilds the environment and policy this checkpoint captured.
    pub fn restore(&self) -> Result<(SynthEnv, ToyPolicy), EnvError> {
        let env = SynthEnv::new(self.env.clone())?;
        let mut policy =
            ToyPolicy::new_uniform(env.vocab_size(), env.num_langs(), self.temperature);
        if self.logits.len() != policy.num_params() {
            return Err(EnvError::BadConfig(format!(
                "checkpoint has {} logits, environment needs {}",
                self.logits.len(),
                policy.num_params()
            )));
        }
        policy.logits = self.logits.clone();
        Ok((env, policy))
    }
}

/// Per-language corpus lines drawn from the environment vocabulary, for
/// training the language identifier. Deterministic given the seed.
pub fn synth_lid_corpus(env: &SynthEnv, lines_per_lang: usize, seed: u64) -> crate::text::Corpus {
    let mut rng = <ChaCha20Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut entries = Vec::new();
    for lang in 0..env.num_langs() {
        for _ in 0..lines_per_lang {
            let len = rng.gen_range(env.config().min_len..=env.config().max_len);
            let words: Vec<String> = (0..len)
                .map(|_| token_name(lang, rng.gen_range(0..env.vocab_size()) as u32))
                .collect();
            entries.push((env.lang_tag(lang).clone(), words.join(" ")));
        }
    }
    crate::text::Corpus::new(entries)
}

/// Deterministic evaluation prompt set, round-robin over directions.
pub fn eval_prompts(
    env: &SynthEnv,
    directions: &[(usize, usize)],
    count: usize,
    seed: u64,
) -> Result<Vec<(TokenSentence, LanguageTag)>, EnvError> {
    let mut rng = <ChaCha20Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut prompts = Vec::with_capacity(count);
    for i in 0..count {
        let (src, tgt) = directions[i % directions.len()];
        prompts.push(env.gen_prompt_in(src, tgt, &mut rng)?);
    }
    Ok(prompts)
}

/// Frequency map of the hypothesis' detected-vs-emitted languages; handy in
/// diagnostics and tests.
pub fn language_histogram(env: &SynthEnv, y: &TokenSentence) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for tok in &y.tokens {
        if let Ok((lang, _)) = env.parse_token(tok) {
            *counts.entry(lang).or_insert(0) += 1;
        }
    }
    counts
}
