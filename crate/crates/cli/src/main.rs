//! Command-line runner: training, evaluation, curation, diagnostics,
//! language-identifier training, and alpha sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use walar_core::curation::{
    decontaminate, length_filter, ner_ratio_filter, CapitalizationNer, EntityRecognizer,
    LengthBandTable, WhitespaceTokenizer, DEFAULT_COVERAGE_THRESHOLD, DEFAULT_NGRAM_ORDER,
};
use walar_core::env::{eval_prompts, PolicyCheckpoint};
use walar_core::eval::{
    diagnose_failures, DEFAULT_OVER_RATIO, DEFAULT_UNDER_RATIO,
};
use walar_core::lid::{train_ngram_lid, LanguageDetector, LidModel};
use walar_core::runner::{run_experiment, sweep_alpha, ExperimentConfig};
use walar_core::text::{load_corpus, segment, Corpus, LanguageTag};

#[derive(Parser)]
#[command(
    name = "walar",
    about = "Composite-reward translation lab: train, evaluate, curate, diagnose, sweep",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRunArgs {
    /// Experiment config (JSON).
    #[arg(long, env = "WALAR_CONFIG")]
    config: PathBuf,
    /// Seed override; defaults to the config's seed.
    #[arg(long, env = "WALAR_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "WALAR_OUT")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy per an experiment config and evaluate it.
    Train(CommonRunArgs),
    /// Evaluate a saved checkpoint on generated prompts.
    Eval {
        /// Policy checkpoint (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Optional test set: `src_lang<TAB>tgt_lang<TAB>source text` lines.
        #[arg(long)]
        testset: Option<PathBuf>,
        /// Prompts to generate when no test set is given.
        #[arg(long, default_value_t = 200)]
        num_prompts: usize,
        /// Trained language-identifier model file; retrained from the
        /// checkpoint's environment when omitted.
        #[arg(long)]
        lid: Option<PathBuf>,
        #[arg(long, env = "WALAR_SEED")]
        seed: Option<u64>,
        /// Output report file (newline-delimited JSON).
        #[arg(long, env = "WALAR_OUT")]
        out: PathBuf,
    },
    /// Filter a monolingual corpus and decontaminate it against a test set.
    Curate {
        /// Training corpus, `lang<TAB>text` lines.
        #[arg(long)]
        train: PathBuf,
        /// Test corpus to decontaminate against.
        #[arg(long)]
        test: PathBuf,
        /// Length-band table, `lang<TAB>min<TAB>max` lines.
        #[arg(long)]
        bands: PathBuf,
        /// Output directory.
        #[arg(long, env = "WALAR_OUT")]
        out: PathBuf,
    },
    /// Classify failure modes of hypothesis translations.
    Diagnose {
        /// TSV with `src_lang tgt_lang source hypothesis reference` columns.
        #[arg(long)]
        pairs: PathBuf,
        /// Trained language-identifier model file.
        #[arg(long)]
        lid: PathBuf,
        /// Output report file (newline-delimited JSON).
        #[arg(long, env = "WALAR_OUT")]
        out: PathBuf,
    },
    /// Run the experiment once per alpha value, sharing seeds.
    SweepAlpha {
        #[command(flatten)]
        run: CommonRunArgs,
        /// Comma-separated alpha values.
        #[arg(long, value_delimiter = ',', default_value = "0,5,10,15,20,25")]
        alphas: Vec<f64>,
    },
    /// Train the character-n-gram language identifier on a corpus.
    LidTrain {
        /// Training corpus, `lang<TAB>text` lines.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        order_lo: usize,
        #[arg(long, default_value_t = 3)]
        order_hi: usize,
        /// Output model file.
        #[arg(long, env = "WALAR_OUT")]
        out: PathBuf,
    },
}

fn load_config(args: &CommonRunArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config)
        .with_context(|| format!("loading config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn cmd_train(args: &CommonRunArgs) -> Result<()> {
    let config = load_config(args)?;
    let artifacts = run_experiment(&config, &args.out)?;
    println!(
        "run complete: dict_acc={:.4} lcr={:.4} copy_rate={:.4} len_ratio={:.4} mean_reward={:.4}",
        artifacts.summary.train.dict_acc,
        artifacts.summary.train.lcr,
        artifacts.summary.train.copy_rate,
        artifacts.summary.train.mean_len_ratio,
        artifacts.summary.train.mean_reward,
    );
    if let Some(held) = &artifacts.summary.held_out {
        println!(
            "held-out: dict_acc={:.4} lcr={:.4}",
            held.dict_acc, held.lcr
        );
    }
    println!("artifacts in {}", artifacts.out_dir.display());
    Ok(())
}

fn cmd_eval(
    model: &PathBuf,
    testset: Option<&PathBuf>,
    num_prompts: usize,
    lid_path: Option<&PathBuf>,
    seed: Option<u64>,
    out: &PathBuf,
) -> Result<()> {
    let checkpoint = PolicyCheckpoint::load(model)?;
    let (env, policy) = checkpoint.restore()?;
    let seed = seed.unwrap_or(checkpoint.seed);

    let lid: LidModel = match lid_path {
        Some(path) => LidModel::load(path)?,
        None => {
            let corpus = walar_core::env::synth_lid_corpus(&env, 200, seed);
            train_ngram_lid(&corpus, 1, 3)?
        }
    };

    let prompts: Vec<(walar_core::text::TokenSentence, LanguageTag)> = match testset {
        Some(path) => {
            let content = fs::read_to_string(path)
                .with_context(|| format!("reading test set {}", path.display()))?;
            let mut prompts = Vec::new();
            for (idx, line) in content.lines().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let mut fields = line.splitn(3, '\t');
                match (fields.next(), fields.next(), fields.next()) {
                    (Some(src), Some(tgt), Some(text)) => {
                        let src_tag = LanguageTag::new(src)?;
                        prompts.push((segment(text, src_tag), LanguageTag::new(tgt)?));
                    }
                    _ => bail!(
                        "malformed test set line {}: expected src<TAB>tgt<TAB>text",
                        idx + 1
                    ),
                }
            }
            prompts
        }
        None => {
            let directions: Vec<(usize, usize)> = checkpoint
                .directions
                .iter()
                .map(|(src, tgt)| {
                    Ok((
                        env.lang_index(&LanguageTag::new(src.clone())?)?,
                        env.lang_index(&LanguageTag::new(tgt.clone())?)?,
                    ))
                })
                .collect::<Result<_>>()?;
            if directions.is_empty() {
                bail!("checkpoint records no directions; pass --testset");
            }
            eval_prompts(&env, &directions, num_prompts, seed)?
        }
    };

    let mut report = String::new();
    let mut correct_language = 0usize;
    for (x, tgt) in &prompts {
        let decoded = walar_core::env::greedy_decode(&policy, &env, x, tgt)?;
        let gold = env.gold_translate(x, tgt)?;
        let score = walar_core::eval::bleu(&decoded.hypothesis, std::slice::from_ref(&gold))?;
        let diagnosis = diagnose_failures(
            x,
            &decoded.hypothesis,
            &gold,
            tgt,
            &lid,
            DEFAULT_OVER_RATIO,
            DEFAULT_UNDER_RATIO,
        )?;
        let (detected, _) = lid.detect(&decoded.hypothesis);
        correct_language += usize::from(&detected == tgt);
        let record = serde_json::json!({
            "record": "instance",
            "src_lang": x.lang.as_str(),
            "tgt_lang": tgt.as_str(),
            "source": x.joined(),
            "hypothesis": decoded.hypothesis.joined(),
            "reference": gold.joined(),
            "bleu": score.value,
            "failure": diagnosis.label,
            "copy_of_source": diagnosis.copy_of_source,
            "detected": detected.as_str(),
        });
        report.push_str(&record.to_string());
        report.push('\n');
    }
    let lcr = correct_language as f64 / prompts.len().max(1) as f64;
    report.push_str(
        &serde_json::json!({
            "record": "summary",
            "instances": prompts.len(),
            "lcr": lcr,
        })
        .to_string(),
    );
    report.push('\n');
    fs::write(out, report).with_context(|| format!("writing {}", out.display()))?;
    println!("evaluated {} prompts, lcr={lcr:.4}", prompts.len());
    Ok(())
}

fn cmd_curate(train: &PathBuf, test: &PathBuf, bands: &PathBuf, out: &PathBuf) -> Result<()> {
    let train_corpus = load_corpus(train)?;
    let test_corpus = load_corpus(test)?;
    let bands = LengthBandTable::load(bands)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let recognizer = CapitalizationNer;
    let mut kept_after_filters = Vec::new();
    let mut dropped_length = 0usize;
    let mut dropped_ner = 0usize;
    for (lang, line) in &train_corpus.entries {
        let sentence = segment(line, lang.clone());
        if !length_filter(&sentence, &bands, |s| s.len())? {
            dropped_length += 1;
            continue;
        }
        let spans = recognizer.entity_spans(&sentence);
        if !ner_ratio_filter(&sentence, &spans)? {
            dropped_ner += 1;
            continue;
        }
        kept_after_filters.push((lang.clone(), line.clone()));
    }

    let filtered = Corpus::new(kept_after_filters);
    let report = decontaminate(
        &filtered,
        &test_corpus,
        DEFAULT_NGRAM_ORDER,
        DEFAULT_COVERAGE_THRESHOLD,
        &WhitespaceTokenizer,
    )?;
    let contaminated: std::collections::BTreeSet<usize> =
        report.flagged_indices().into_iter().collect();
    let kept = Corpus::new(
        filtered
            .entries
            .iter()
            .enumerate()
            .filter(|(i, _)| !contaminated.contains(i))
            .map(|(_, e)| e.clone())
            .collect(),
    );

    kept.save(out.join("kept.tsv"))?;
    fs::write(out.join("contamination_report.ndjson"), report.to_ndjson())
        .context("writing contamination report")?;
    let summary = serde_json::json!({
        "input_lines": train_corpus.len(),
        "dropped_length": dropped_length,
        "dropped_ner": dropped_ner,
        "dropped_contaminated": contaminated.len(),
        "kept": kept.len(),
    });
    fs::write(
        out.join("curation_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )
    .context("writing curation summary")?;
    println!(
        "curated {} lines: {} kept, {} dropped by length, {} by entity ratio, {} contaminated",
        train_corpus.len(),
        kept.len(),
        dropped_length,
        dropped_ner,
        contaminated.len()
    );
    Ok(())
}

fn cmd_diagnose(pairs: &PathBuf, lid: &PathBuf, out: &PathBuf) -> Result<()> {
    let lid = LidModel::load(lid)?;
    let content =
        fs::read_to_string(pairs).with_context(|| format!("reading {}", pairs.display()))?;
    let mut report = String::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(5, '\t').collect();
        let [src_lang, tgt_lang, source, hypothesis, reference] = fields.as_slice() else {
            bail!(
                "malformed pairs line {}: expected 5 tab-separated columns",
                idx + 1
            );
        };
        let src_tag = LanguageTag::new(*src_lang)?;
        let tgt_tag = LanguageTag::new(*tgt_lang)?;
        let x = segment(source, src_tag);
        let y = segment(hypothesis, tgt_tag.clone());
        let reference = segment(reference, tgt_tag.clone());
        let diagnosis = diagnose_failures(
            &x,
            &y,
            &reference,
            &tgt_tag,
            &lid,
            DEFAULT_OVER_RATIO,
            DEFAULT_UNDER_RATIO,
        )?;
        *counts.entry(format!("{:?}", diagnosis.label)).or_insert(0) += 1;
        let record = serde_json::json!({
            "line": idx + 1,
            "tgt_lang": tgt_tag.as_str(),
            "failure": diagnosis.label,
            "copy_of_source": diagnosis.copy_of_source,
        });
        report.push_str(&record.to_string());
        report.push('\n');
    }
    fs::write(out, report).with_context(|| format!("writing {}", out.display()))?;
    println!("label counts: {counts:?}");
    Ok(())
}

fn cmd_sweep(run: &CommonRunArgs, alphas: &[f64]) -> Result<()> {
    let config = load_config(run)?;
    let rows = sweep_alpha(&config, alphas, &run.out)?;
    println!("alpha     bleu      lcr   reward  len_ratio");
    for row in &rows {
        match &row.error {
            Some(err) => println!("{:<8} failed: {err}", row.alpha),
            None => println!(
                "{:<8} {:>7.2} {:>7.3} {:>8.3} {:>9.3}",
                row.alpha,
                row.bleu.unwrap_or(f64::NAN),
                row.lcr.unwrap_or(f64::NAN),
                row.mean_reward.unwrap_or(f64::NAN),
                row.len_ratio.unwrap_or(f64::NAN)
            ),
        }
    }
    if rows.iter().any(|r| r.error.is_some()) {
        bail!("one or more sweep runs failed");
    }
    Ok(())
}

fn cmd_lid_train(corpus: &PathBuf, order_lo: usize, order_hi: usize, out: &PathBuf) -> Result<()> {
    let corpus = load_corpus(corpus)?;
    let model = train_ngram_lid(&corpus, order_lo, order_hi)?;
    model.save(out)?;
    println!(
        "trained {} languages on orders {order_lo}..{order_hi}, saved to {}",
        model.languages().len(),
        out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval {
            model,
            testset,
            num_prompts,
            lid,
            seed,
            out,
        } => cmd_eval(model, testset.as_ref(), *num_prompts, lid.as_ref(), *seed, out),
        Command::Curate {
            train,
            test,
            bands,
            out,
        } => cmd_curate(train, test, bands, out),
        Command::Diagnose { pairs, lid, out } => cmd_diagnose(pairs, lid, out),
        Command::SweepAlpha { run, alphas } => cmd_sweep(run, alphas),
        Command::LidTrain {
            corpus,
            order_lo,
            order_hi,
            out,
        } => cmd_lid_train(corpus, *order_lo, *order_hi, out),
    }
}
