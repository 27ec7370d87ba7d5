//! Command-line front end: a plain-text `section.key = value` configuration
//! with `--set` overrides, and subcommands wiring synthesis, ingestion,
//! training, evaluation, decoding, gradient checking, parameter accounting,
//! ablation sweeps, and report consolidation.
//!
//! Every artifact filename embeds a configuration fingerprint — a 64-bit
//! FNV-1a hash of the resolved `model.*` entries plus `run.seed` — so runs
//! that share a model configuration share artifacts, and eval rows join
//! accounting rows in `report` without any extra bookkeeping. Environment
//! variables are never consulted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::accounting::AccountingRecord;
use crate::corpus::{
    build_candidate_sets, build_explanation_splits, build_sequential_splits, fingerprint64,
    ingest, synthesize, Corpus, EvalSplit, SynthSpec,
};
use crate::decode::{
    build_item_trie, decode_ranked_items, decode_text, DecodeConfig, ItemTrie,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalData, EvalReport};
use crate::model::{
    load_checkpoint, save_checkpoint, ModelConfig, ParameterStore, TuningMode,
};
use crate::prompts::{render, RenderTask, TaskGroup, TemplateSet};
use crate::tokenizer::{build_vocab, Vocabulary};
use crate::training::{grad_check, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "mfm",
    about = "Multimodal prompt recommendation models: train, decode, evaluate",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Configuration file of `section.key = value` lines.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one configuration entry (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Directory receiving all artifacts.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write it in the ingestion format.
    Synth(CommonArgs),
    /// Read an interactions/features pair, validate it, and write the
    /// normalized corpus artifacts.
    Ingest(CommonArgs),
    /// Train a model and write checkpoint, vocabulary, log, and accounting.
    Train(CommonArgs),
    /// Score one template on the validation or test split.
    Evaluate(CommonArgs),
    /// Dump ranked decodes (or generated text) for every evaluation user.
    Decode(CommonArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(CommonArgs),
    /// Write the parameter-count record for the configured model.
    Account(CommonArgs),
    /// Per-axis ablation sweep over reduction rate, image tokens, and
    /// tuning modes; writes one accounting record per grid point.
    Sweep(CommonArgs),
    /// Consolidate eval and accounting artifacts from a run directory.
    Report(CommonArgs),
}

/// Every key the configuration understands; anything else is a typo.
const KNOWN_KEYS: &[&str] = &[
    "run.seed",
    "run.vocab_target",
    "model.l",
    "model.d",
    "model.h",
    "model.d_ff",
    "model.v",
    "model.d_v",
    "model.k",
    "model.r",
    "model.max_len",
    "model.max_whole_words",
    "model.tuning_mode",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.weight_decay",
    "train.clip_norm",
    "train.candidate_size",
    "train.groups",
    "decode.beam_size",
    "decode.max_len",
    "decode.alpha",
    "synth.users",
    "synth.items",
    "synth.d_v",
    "synth.min_seq",
    "synth.max_seq",
    "synth.pattern_prob",
    "synth.pattern_period",
    "synth.candidate_size",
    "synth.explanation_rate",
    "synth.image_coverage",
    "synth.visual_clusters",
    "synth.cluster_noise",
    "paths.interactions",
    "paths.features",
    "paths.checkpoint",
    "paths.vocab",
    "paths.templates",
    "eval.group",
    "eval.template",
    "eval.split",
    "gradcheck.probes",
    "gradcheck.tolerance",
    "gradcheck.batch",
    "sweep.train",
];

/// Flat key → value map resolved from the config file plus overrides.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    entries: BTreeMap<String, String>,
}

impl Settings {
    fn check_key(key: &str) -> Result<()> {
        if KNOWN_KEYS.contains(&key) {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown configuration key '{key}'")))
        }
    }

    fn parse_file(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected 'section.key = value'".into(),
            })?;
            let key = key.trim();
            Settings::check_key(key).map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("unknown configuration key '{key}'"),
            })?;
            s.entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(s)
    }

    fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set '{kv}' is not of the form section.key=value"))
        })?;
        let key = key.trim();
        Settings::check_key(key)?;
        self.entries.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    fn set_default(&mut self, key: &str, value: String) {
        self.entries.entry(key.to_string()).or_insert(value);
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("bad value '{raw}' for configuration key '{key}'"))
            }),
        }
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.parsed(key)?
            .ok_or_else(|| Error::Config(format!("configuration key '{key}' is required")))
    }

    fn require_str(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("configuration key '{key}' is required")))
    }
}

/// One command invocation: resolved settings, output directory, fingerprint.
pub struct Run {
    settings: Settings,
    out: PathBuf,
    fingerprint: String,
}

impl Run {
    fn new(args: &CommonArgs) -> Result<Run> {
        let mut settings = match &args.config {
            Some(path) => Settings::parse_file(path)?,
            None => Settings::default(),
        };
        for kv in &args.set {
            settings.apply_override(kv)?;
        }
        // Materialize model defaults so the fingerprint sees one canonical
        // form whether a value was written out or left implicit.
        let base = ModelConfig::desk_default();
        settings.set_default("model.l", base.l.to_string());
        settings.set_default("model.d", base.d.to_string());
        settings.set_default("model.h", base.h.to_string());
        settings.set_default("model.d_ff", base.d_ff.to_string());
        settings.set_default("model.v", base.v.to_string());
        settings.set_default("model.d_v", base.d_v.to_string());
        settings.set_default("model.k", base.k.to_string());
        settings.set_default("model.r", base.r.to_string());
        settings.set_default("model.max_len", base.max_len.to_string());
        settings.set_default(
            "model.max_whole_words",
            base.max_whole_words.to_string(),
        );
        settings.set_default(
            "model.tuning_mode",
            base.tuning_mode.as_str().to_string(),
        );
        std::fs::create_dir_all(&args.out)?;
        let fingerprint = fingerprint_of(&settings);
        Ok(Run {
            settings,
            out: args.out.clone(),
            fingerprint,
        })
    }

    fn seed(&self) -> Result<u64> {
        self.settings.require("run.seed")
    }

    /// Artifact path with the fingerprint embedded.
    fn artifact(&self, stem: &str, ext: &str) -> PathBuf {
        self.out.join(format!("{stem}_{}.{ext}", self.fingerprint))
    }

    /// A `paths.*` override, or the default artifact location.
    fn path_or_artifact(&self, key: &str, stem: &str, ext: &str) -> PathBuf {
        match self.settings.get(key) {
            Some(p) => PathBuf::from(p),
            None => self.artifact(stem, ext),
        }
    }

    /// Write the exact resolved configuration next to the artifacts.
    fn write_resolved(&self, command: &str) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.settings.entries {
            text.push_str(&format!("{k} = {v}\n"));
        }
        let path = self
            .out
            .join(format!("resolved_{command}_{}.txt", self.fingerprint));
        std::fs::write(path, text)?;
        Ok(())
    }

    fn model_config(&self) -> Result<ModelConfig> {
        let s = &self.settings;
        let base = ModelConfig::desk_default();
        let mode_str: String = s.or("model.tuning_mode", base.tuning_mode.as_str().into())?;
        let tuning_mode = TuningMode::parse(&mode_str).ok_or_else(|| {
            Error::Config(format!(
                "unknown tuning mode '{mode_str}' (expected self-attn, all-attn, or full)"
            ))
        })?;
        let cfg = ModelConfig {
            l: s.or("model.l", base.l)?,
            d: s.or("model.d", base.d)?,
            h: s.or("model.h", base.h)?,
            d_ff: s.or("model.d_ff", base.d_ff)?,
            v: s.or("model.v", base.v)?,
            d_v: s.or("model.d_v", base.d_v)?,
            k: s.or("model.k", base.k)?,
            r: s.or("model.r", base.r)?,
            max_len: s.or("model.max_len", base.max_len)?,
            max_whole_words: s.or("model.max_whole_words", base.max_whole_words)?,
            tuning_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let s = &self.settings;
        let mut tc = TrainConfig::desk_default(self.seed()?);
        tc.epochs = s.or("train.epochs", tc.epochs)?;
        tc.batch_size = s.or("train.batch_size", tc.batch_size)?;
        tc.learning_rate = s.or("train.learning_rate", tc.learning_rate)?;
        tc.weight_decay = s.or("train.weight_decay", tc.weight_decay)?;
        tc.clip_norm = s.or("train.clip_norm", tc.clip_norm)?;
        tc.candidate_size = s.or("train.candidate_size", tc.candidate_size)?;
        if let Some(raw) = s.get("train.groups") {
            let mut groups = Vec::new();
            for part in raw.split(',') {
                let name = part.trim();
                let g = TaskGroup::parse(name).ok_or_else(|| {
                    Error::Config(format!("unknown task group '{name}' in train.groups"))
                })?;
                groups.push(g);
            }
            tc.groups = groups;
        }
        tc.validate()?;
        Ok(tc)
    }

    fn decode_config(&self) -> Result<DecodeConfig> {
        let s = &self.settings;
        let base = DecodeConfig::desk_default();
        let dc = DecodeConfig {
            beam_size: s.or("decode.beam_size", base.beam_size)?,
            max_len: s.or("decode.max_len", base.max_len)?,
            alpha: s.or("decode.alpha", base.alpha)?,
        };
        dc.validate()?;
        Ok(dc)
    }

    fn synth_spec(&self) -> Result<SynthSpec> {
        let s = &self.settings;
        let model = self.model_config()?;
        let mut spec = SynthSpec::desk_default(
            s.or("synth.users", 20usize)?,
            s.or("synth.items", 30usize)?,
        );
        // The corpus feature width follows the model unless pinned.
        spec.d_v = s.or("synth.d_v", model.d_v)?;
        spec.min_seq = s.or("synth.min_seq", spec.min_seq)?;
        spec.max_seq = s.or("synth.max_seq", spec.max_seq)?;
        spec.pattern_prob = s.or("synth.pattern_prob", spec.pattern_prob)?;
        spec.pattern_period = s.or("synth.pattern_period", spec.pattern_period)?;
        spec.candidate_size = s.or("synth.candidate_size", spec.candidate_size)?;
        spec.explanation_rate = s.or("synth.explanation_rate", spec.explanation_rate)?;
        spec.image_coverage = s.or("synth.image_coverage", spec.image_coverage)?;
        spec.visual_clusters = s.or("synth.visual_clusters", spec.visual_clusters)?;
        spec.cluster_noise = s.or("synth.cluster_noise", spec.cluster_noise)?;
        Ok(spec)
    }

    fn templates(&self) -> Result<TemplateSet> {
        match self.settings.get("paths.templates") {
            Some(path) => TemplateSet::load(Path::new(path)),
            None => Ok(TemplateSet::builtin()),
        }
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let interactions = self.path_or_artifact("paths.interactions", "interactions", "tsv");
        let features = self.path_or_artifact("paths.features", "features", "txt");
        for p in [&interactions, &features] {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "corpus file '{}' does not exist; run `synth` or `ingest` first, \
                     or point paths.interactions/paths.features at your data",
                    p.display()
                )));
            }
        }
        let (corpus, _) = ingest(&interactions, &features)?;
        let model = self.model_config()?;
        if corpus.d_v != model.d_v {
            return Err(Error::Config(format!(
                "corpus feature width {} does not match model.d_v {}",
                corpus.d_v, model.d_v
            )));
        }
        Ok(corpus)
    }

    /// Deterministic vocabulary over corpus ids, explanation text, and
    /// template literals.
    fn build_vocabulary(&self, corpus: &Corpus, templates: &TemplateSet) -> Result<Vocabulary> {
        let model = self.model_config()?;
        let target: usize = self.settings.or("run.vocab_target", model.v)?;
        let mut texts: Vec<String> = corpus.users.clone();
        texts.extend(corpus.items.keys().cloned());
        for it in &corpus.interactions {
            if let Some(e) = &it.explanation {
                texts.push(e.clone());
            }
        }
        texts.extend(templates.literal_texts());
        let vocab = build_vocab(&texts, target)?;
        if vocab.size() > model.v {
            return Err(Error::Config(format!(
                "vocabulary of {} pieces exceeds the model's {} embedding rows; \
                 raise model.v or lower run.vocab_target",
                vocab.size(),
                model.v
            )));
        }
        Ok(vocab)
    }

    fn eval_split(&self) -> Result<EvalSplit> {
        match self.settings.or("eval.split", "test".to_string())?.as_str() {
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            other => Err(Error::Config(format!(
                "eval.split must be 'val' or 'test', not '{other}'"
            ))),
        }
    }

    fn eval_group(&self) -> Result<TaskGroup> {
        let raw = self.settings.require_str("eval.group")?;
        TaskGroup::parse(raw)
            .ok_or_else(|| Error::Config(format!("unknown task group '{raw}' in eval.group")))
    }
}

/// Fingerprint of the model identity: the resolved `model.*` entries plus
/// the seed, hashed with 64-bit FNV-1a and rendered as hex.
fn fingerprint_of(settings: &Settings) -> String {
    let mut canonical = String::new();
    for (k, v) in &settings.entries {
        if k.starts_with("model.") || k == "run.seed" {
            canonical.push_str(&format!("{k}={v}\n"));
        }
    }
    format!("{:016x}", fingerprint64(canonical.as_bytes()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&Run::new(&a)?),
        Command::Ingest(a) => cmd_ingest(&Run::new(&a)?),
        Command::Train(a) => cmd_train(&Run::new(&a)?),
        Command::Evaluate(a) => cmd_evaluate(&Run::new(&a)?),
        Command::Decode(a) => cmd_decode(&Run::new(&a)?),
        Command::Gradcheck(a) => cmd_gradcheck(&Run::new(&a)?),
        Command::Account(a) => cmd_account(&Run::new(&a)?),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Report(a) => cmd_report(&Run::new(&a)?),
    }
}

/// Parse command-line words (for tests and the binary alike).
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)
        .map_err(|e| Error::Config(e.to_string().lines().next().unwrap_or("bad usage").into()))?;
    run(cli)
}

fn cmd_synth(run: &Run) -> Result<()> {
    let seed = run.seed()?;
    let spec = run.synth_spec()?;
    let corpus = synthesize(&spec, seed)?;
    let interactions = run.artifact("interactions", "tsv");
    let features = run.artifact("features", "txt");
    corpus.save(&interactions, &features)?;
    run.write_resolved("synth")?;
    println!(
        "synth: {} users, {} items, {} interactions (seed {seed})",
        corpus.users.len(),
        corpus.items.len(),
        corpus.interactions.len()
    );
    println!("wrote {}", interactions.display());
    println!("wrote {}", features.display());
    Ok(())
}

fn cmd_ingest(run: &Run) -> Result<()> {
    let interactions_in = PathBuf::from(run.settings.require_str("paths.interactions")?);
    let features_in = PathBuf::from(run.settings.require_str("paths.features")?);
    let (corpus, summary) = ingest(&interactions_in, &features_in)?;
    let interactions = run.artifact("interactions", "tsv");
    let features = run.artifact("features", "txt");
    corpus.save(&interactions, &features)?;
    run.write_resolved("ingest")?;
    println!(
        "ingest: kept {} users ({} dropped below 3 interactions, {} interactions dropped), \
         {} items without an image",
        summary.users_kept,
        summary.users_dropped,
        summary.interactions_dropped,
        summary.items_without_image
    );
    println!("wrote {}", interactions.display());
    println!("wrote {}", features.display());
    Ok(())
}

fn cmd_train(run: &Run) -> Result<()> {
    let seed = run.seed()?;
    let model = run.model_config()?;
    let tc = run.train_config()?;
    let corpus = run.load_corpus()?;
    let templates = run.templates()?;
    let vocab = run.build_vocabulary(&corpus, &templates)?;
    let splits = build_sequential_splits(&corpus);
    let expl = if tc.groups.contains(&TaskGroup::Explanation) {
        Some(build_explanation_splits(&corpus, seed)?)
    } else {
        None
    };

    let mut store = ParameterStore::init(&model, seed)?;
    let report = train(
        &mut store,
        &tc,
        &corpus,
        &splits,
        expl.as_ref(),
        &templates,
        &vocab,
    )?;

    let mut log = String::new();
    for s in &report.steps {
        log.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.3}\n",
            s.epoch, s.step, s.loss, s.grad_norm, s.wall_ms
        ));
    }
    let log_path = run.artifact("trainlog", "tsv");
    std::fs::write(&log_path, log)?;
    let vocab_path = run.path_or_artifact("paths.vocab", "vocab", "txt");
    vocab.save(&vocab_path)?;
    let ckpt_path = run.path_or_artifact("paths.checkpoint", "checkpoint", "bin");
    save_checkpoint(&store, &ckpt_path)?;
    let acct = AccountingRecord::from_config(&model, &run.fingerprint)?;
    std::fs::write(run.artifact("accounting", "tsv"), acct.to_record())?;
    run.write_resolved("train")?;

    println!(
        "train: {} epochs, {} steps, final loss {}, {} instances skipped",
        report.epochs_run,
        report.steps.len(),
        report
            .final_loss()
            .map(|l| format!("{l:.6}"))
            .unwrap_or_else(|| "n/a".into()),
        report.instances_skipped
    );
    println!("wrote {}", log_path.display());
    println!("wrote {}", vocab_path.display());
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

/// Shared loader for commands that consume a trained model.
fn load_trained(run: &Run) -> Result<(ParameterStore, Corpus, TemplateSet, Vocabulary)> {
    let model = run.model_config()?;
    let corpus = run.load_corpus()?;
    let templates = run.templates()?;
    let vocab_path = run.path_or_artifact("paths.vocab", "vocab", "txt");
    let ckpt_path = run.path_or_artifact("paths.checkpoint", "checkpoint", "bin");
    for p in [&vocab_path, &ckpt_path] {
        if !p.exists() {
            return Err(Error::Config(format!(
                "model file '{}' does not exist; run `train` first or set \
                 paths.checkpoint/paths.vocab",
                p.display()
            )));
        }
    }
    let vocab = Vocabulary::load(&vocab_path)?;
    let store = load_checkpoint(&ckpt_path, &model)?;
    Ok((store, corpus, templates, vocab))
}

fn evaluate_one(
    run: &Run,
    store: &ParameterStore,
    corpus: &Corpus,
    templates: &TemplateSet,
    vocab: &Vocabulary,
    group: TaskGroup,
    template_id: &str,
    which: EvalSplit,
) -> Result<EvalReport> {
    let seed = run.seed()?;
    let dc = run.decode_config()?;
    let splits = build_sequential_splits(corpus);
    let candidates = if group == TaskGroup::Direct {
        let size = run.train_config()?.candidate_size;
        Some(build_candidate_sets(corpus, &splits, seed, size)?)
    } else {
        None
    };
    let explanations = if group == TaskGroup::Explanation {
        Some(build_explanation_splits(corpus, seed)?)
    } else {
        None
    };
    let data = EvalData {
        splits: &splits,
        candidates: candidates.as_ref(),
        explanations: explanations.as_ref(),
    };
    evaluate(
        store,
        corpus,
        &data,
        templates,
        vocab,
        &dc,
        group,
        template_id,
        which,
        &run.fingerprint,
    )
}

fn cmd_evaluate(run: &Run) -> Result<()> {
    let group = run.eval_group()?;
    let template_id = run.settings.require_str("eval.template")?.to_string();
    let which = run.eval_split()?;
    let (store, corpus, templates, vocab) = load_trained(run)?;
    let report = evaluate_one(
        run, &store, &corpus, &templates, &vocab, group, &template_id, which,
    )?;
    let split_name = if which == EvalSplit::Val { "val" } else { "test" };
    let path = run
        .out
        .join(format!("eval_{template_id}_{split_name}_{}.tsv", run.fingerprint));
    std::fs::write(&path, report.to_records())?;
    run.write_resolved("evaluate")?;
    print!("{}", report.to_table());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_decode(run: &Run) -> Result<()> {
    let seed = run.seed()?;
    let group = run.eval_group()?;
    let template_id = run.settings.require_str("eval.template")?.to_string();
    let which = run.eval_split()?;
    let dc = run.decode_config()?;
    let (store, corpus, templates, vocab) = load_trained(run)?;
    let template = templates
        .get(&template_id)
        .ok_or_else(|| Error::Config(format!("unknown template '{template_id}'")))?;
    if template.task_group != group {
        return Err(Error::Config(format!(
            "template '{template_id}' belongs to the {} task group, not {group}",
            template.task_group
        )));
    }
    let splits = build_sequential_splits(&corpus);
    let k = store.config.k;
    let max_len = store.config.max_len;

    let mut rows = String::new();
    match group {
        TaskGroup::Sequential => {
            let trie = build_item_trie(&corpus, &vocab)?;
            for (user, split) in &splits.per_user {
                let (history, truth) = split_history(split, which);
                let task = RenderTask::Sequential {
                    history: &history,
                    target: &truth,
                };
                let prompt = render(template, &corpus, user, k, max_len, &task, &vocab)?;
                for (rank, (item, score)) in decode_ranked_items(&store, &prompt, &dc, &trie, &vocab)?
                    .into_iter()
                    .enumerate()
                {
                    rows.push_str(&format!(
                        "{user}\t{template_id}\t{}\t{item}\t{score:.6}\n",
                        rank + 1
                    ));
                }
            }
        }
        TaskGroup::Direct => {
            let size = run.train_config()?.candidate_size;
            let sets = build_candidate_sets(&corpus, &splits, seed, size)?;
            let sets = if which == EvalSplit::Val { &sets.val } else { &sets.test };
            for set in sets {
                let split = &splits.per_user[&set.user_id];
                let (history, truth) = split_history(split, which);
                let task = RenderTask::Direct {
                    history: &history,
                    candidates: &set.candidates,
                    target: &truth,
                };
                let prompt =
                    render(template, &corpus, &set.user_id, k, max_len, &task, &vocab)?;
                let trie = ItemTrie::build(set.candidates.iter().map(|s| s.as_str()), &vocab)?;
                for (rank, (item, score)) in decode_ranked_items(&store, &prompt, &dc, &trie, &vocab)?
                    .into_iter()
                    .enumerate()
                {
                    rows.push_str(&format!(
                        "{}\t{template_id}\t{}\t{item}\t{score:.6}\n",
                        set.user_id,
                        rank + 1
                    ));
                }
            }
        }
        TaskGroup::Explanation => {
            let expl = build_explanation_splits(&corpus, seed)?;
            let indices = if which == EvalSplit::Val { &expl.val } else { &expl.test };
            for &idx in indices {
                let record = &corpus.interactions[idx];
                let reference = record.explanation.as_deref().unwrap_or_default();
                let hint = record.hint_word.as_deref();
                if template.uses_hint() && hint.is_none() {
                    continue;
                }
                let task = RenderTask::Explanation {
                    item: &record.item_id,
                    explanation: reference,
                    hint,
                };
                let prompt =
                    render(template, &corpus, &record.user_id, k, max_len, &task, &vocab)?;
                let (text, score) = decode_text(&store, &prompt, &dc, &vocab)?;
                rows.push_str(&format!(
                    "{}\t{template_id}\t1\t{text}\t{score:.6}\n",
                    record.user_id
                ));
            }
        }
    }

    let split_name = if which == EvalSplit::Val { "val" } else { "test" };
    let path = run
        .out
        .join(format!("decode_{template_id}_{split_name}_{}.tsv", run.fingerprint));
    std::fs::write(&path, rows)?;
    run.write_resolved("decode")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn split_history(split: &crate::corpus::UserSplit, which: EvalSplit) -> (Vec<String>, String) {
    match which {
        EvalSplit::Val => (split.train.clone(), split.val.clone()),
        EvalSplit::Test => {
            let mut h = split.train.clone();
            h.push(split.val.clone());
            (h, split.test.clone())
        }
    }
}

fn cmd_gradcheck(run: &Run) -> Result<()> {
    let seed = run.seed()?;
    let model = run.model_config()?;
    let corpus = run.load_corpus()?;
    let templates = run.templates()?;
    let vocab = run.build_vocabulary(&corpus, &templates)?;
    let splits = build_sequential_splits(&corpus);
    let probes: usize = run.settings.or("gradcheck.probes", 200usize)?;
    let tolerance: f64 = run.settings.or("gradcheck.tolerance", 1e-4)?;
    let batch_size: usize = run.settings.or("gradcheck.batch", 4usize)?;

    // A fresh model is checked (gradient verification jitters parameters
    // itself); the batch is one sequential prompt per user.
    let store = ParameterStore::init(&model, seed)?;
    let template = templates.training_pool(TaskGroup::Sequential)[0];
    let mut batch = Vec::new();
    for (user, split) in splits.per_user.iter().take(batch_size) {
        let n = split.train.len();
        let task = RenderTask::Sequential {
            history: &split.train[..n - 1],
            target: &split.train[n - 1],
        };
        batch.push(render(
            template,
            &corpus,
            user,
            model.k,
            model.max_len,
            &task,
            &vocab,
        )?);
    }

    let report = grad_check(&store, &batch, probes, seed, tolerance)?;
    let mut text = String::new();
    for p in &report.probes {
        text.push_str(&format!(
            "{}\t{}\t{}\t{:.10e}\t{:.10e}\t{:.3e}\n",
            p.tensor, p.row, p.col, p.analytic, p.numeric, p.rel_err
        ));
    }
    text.push_str(&format!(
        "max_rel_err\t{:.3e}\ttolerance\t{:.3e}\n",
        report.max_rel_err, tolerance
    ));
    let path = run.artifact("gradcheck", "txt");
    std::fs::write(&path, text)?;
    run.write_resolved("gradcheck")?;
    println!(
        "gradcheck: {} probes, max relative error {:.3e} (tolerance {:.1e})",
        report.probes.len(),
        report.max_rel_err,
        tolerance
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_account(run: &Run) -> Result<()> {
    let model = run.model_config()?;
    let record = AccountingRecord::from_config(&model, &run.fingerprint)?;
    let path = run.artifact("accounting", "tsv");
    std::fs::write(&path, record.to_record())?;
    run.write_resolved("account")?;
    println!(
        "account: mode {} r {} k {} — {} of {} parameters trainable ({:.4}%)",
        record.mode.as_str(),
        record.r,
        record.k,
        record.counts.trainable,
        record.counts.total,
        record.counts.percent()
    );
    println!("wrote {}", path.display());
    Ok(())
}

/// Per-axis ablation grids mirroring the reduction-rate, image-token, and
/// tuning-mode studies.
const SWEEP_RATES: [usize; 5] = [1, 2, 4, 8, 16];
const SWEEP_IMAGE_TOKENS: [usize; 4] = [1, 2, 3, 5];
const SWEEP_MODES: [TuningMode; 3] = [
    TuningMode::SelfAttnAdapters,
    TuningMode::AllAttnAdapters,
    TuningMode::Full,
];

fn cmd_sweep(args: &CommonArgs) -> Result<()> {
    let base_run = Run::new(args)?;
    base_run.seed()?; // sweeps must be reproducible
    let base = base_run.model_config()?;
    let train_points: bool = base_run.settings.or("sweep.train", false)?;

    let mut points: Vec<(TuningMode, usize, usize)> = Vec::new();
    for mode in SWEEP_MODES {
        points.push((mode, base.r, base.k));
    }
    for r in SWEEP_RATES {
        points.push((base.tuning_mode, r, base.k));
    }
    for k in SWEEP_IMAGE_TOKENS {
        points.push((base.tuning_mode, base.r, k));
    }
    points.sort();
    points.dedup();

    for (mode, r, k) in points {
        let mut sub_args = CommonArgs {
            config: args.config.clone(),
            set: args.set.clone(),
            out: args.out.clone(),
        };
        sub_args.set.push(format!("model.tuning_mode={}", mode.as_str()));
        sub_args.set.push(format!("model.r={r}"));
        sub_args.set.push(format!("model.k={k}"));
        let point = Run::new(&sub_args)?;
        let model = point.model_config()?;
        let record = AccountingRecord::from_config(&model, &point.fingerprint)?;
        std::fs::write(point.artifact("accounting", "tsv"), record.to_record())?;
        point.write_resolved("sweep")?;
        println!(
            "sweep: mode {} r {} k {} → trainable {:.4}% (config {})",
            mode.as_str(),
            r,
            k,
            record.counts.percent(),
            point.fingerprint
        );
        if train_points {
            cmd_train(&point)?;
            let (store, corpus, templates, vocab) = load_trained(&point)?;
            for (group, template_id) in TemplateSet::reporting_templates() {
                let report = evaluate_one(
                    &point, &store, &corpus, &templates, &vocab, group, template_id,
                    EvalSplit::Test,
                )?;
                let path = point.out.join(format!(
                    "eval_{template_id}_test_{}.tsv",
                    point.fingerprint
                ));
                std::fs::write(&path, report.to_records())?;
            }
        }
    }
    Ok(())
}

fn cmd_report(run: &Run) -> Result<()> {
    let mut evals: Vec<EvalReport> = Vec::new();
    let mut accounting: BTreeMap<String, AccountingRecord> = BTreeMap::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&run.out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if name.starts_with("eval_") && name.ends_with(".tsv") {
            let text = std::fs::read_to_string(&path)?;
            evals.extend(EvalReport::parse_records(&text)?);
        } else if name.starts_with("accounting_") && name.ends_with(".tsv") {
            let text = std::fs::read_to_string(&path)?;
            for rec in AccountingRecord::parse_records(&text)? {
                accounting.insert(rec.config_fingerprint.clone(), rec);
            }
        }
    }

    if evals.is_empty() && accounting.is_empty() {
        println!("report: no artifacts found in {}", run.out.display());
        return Ok(());
    }

    println!(
        "{:<12} {:<9} {:<10} {:>3} {:>3} {:<10} {:>12} {:>9} {}",
        "group", "template", "mode", "r", "k", "metric", "value", "instances", "config"
    );
    let mut covered: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    evals.sort_by(|a, b| {
        (a.task_group.to_string(), &a.template_id, &a.config_fingerprint)
            .cmp(&(b.task_group.to_string(), &b.template_id, &b.config_fingerprint))
    });
    for report in &evals {
        covered.insert(report.config_fingerprint.clone());
        let (mode, r, k) = match accounting.get(&report.config_fingerprint) {
            Some(a) => (a.mode.as_str().to_string(), a.r.to_string(), a.k.to_string()),
            // Explicit gap: no accounting artifact for this configuration.
            None => ("-".into(), "-".into(), "-".into()),
        };
        for (metric, value) in &report.metrics {
            println!(
                "{:<12} {:<9} {:<10} {:>3} {:>3} {:<10} {:>12.6} {:>9} {}",
                report.task_group.to_string(),
                report.template_id,
                mode,
                r,
                k,
                metric,
                value,
                report.instances,
                report.config_fingerprint
            );
        }
    }
    let mut rest: Vec<&AccountingRecord> = accounting
        .values()
        .filter(|a| !covered.contains(&a.config_fingerprint))
        .collect();
    rest.sort_by(|a, b| a.counts.percent().partial_cmp(&b.counts.percent()).unwrap());
    for a in rest {
        println!(
            "{:<12} {:<9} {:<10} {:>3} {:>3} {:<10} {:>12.6} {:>9} {}",
            "-",
            "-",
            a.mode.as_str(),
            a.r,
            a.k,
            "params%",
            a.counts.percent(),
            "-",
            a.config_fingerprint
        );
    }
    Ok(())
}
