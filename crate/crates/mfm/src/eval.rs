//! Ranking metrics (hit ratio, NDCG), text metrics (corpus BLEU-4,
//! ROUGE-1/2/L), and the per-task-group evaluation driver.

use std::collections::BTreeMap;

use crate::corpus::{CandidateSets, Corpus, EvalSplit, ExplanationSplits, SequentialSplits};
use crate::decode::{build_item_trie, decode_ranked_items, decode_text, DecodeConfig, ItemTrie};
use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::prompts::{render, RenderTask, TaskGroup, TemplateSet};
use crate::tokenizer::Vocabulary;

/// One ranked recommendation list against its single ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingResult {
    /// Distinct item ids, best first.
    pub ranked: Vec<String>,
    pub truth: String,
}

impl RankingResult {
    pub fn new(ranked: Vec<String>, truth: String) -> Self {
        debug_assert!(
            {
                let mut seen = std::collections::BTreeSet::new();
                ranked.iter().all(|r| seen.insert(r))
            },
            "ranked ids must be distinct"
        );
        RankingResult { ranked, truth }
    }

    fn rank_of_truth(&self) -> Option<usize> {
        self.ranked.iter().position(|r| *r == self.truth).map(|p| p + 1)
    }
}

/// 1 if the truth sits in the top `k`, else 0.
pub fn hr_at_k(r: &RankingResult, k: usize) -> f64 {
    match r.rank_of_truth() {
        Some(rank) if rank <= k => 1.0,
        _ => 0.0,
    }
}

/// Single-truth normalized discounted cumulative gain: 1/log2(rank+1)
/// inside the cutoff, 0 outside. The ideal ranking scores exactly 1.
pub fn ndcg_at_k(r: &RankingResult, k: usize) -> f64 {
    match r.rank_of_truth() {
        Some(rank) if rank <= k => 1.0 / ((rank as f64) + 1.0).log2(),
        _ => 0.0,
    }
}

/// A generated text next to its reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPair {
    pub candidate: String,
    pub reference: String,
}

/// Metric tokenization: lowercase, punctuation split into its own tokens,
/// whitespace discarded.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            for lc in c.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with up-to-4-gram clipped precisions, geometric mean,
/// and brevity penalty. No smoothing: an empty 4-gram match count gives 0.
pub fn bleu4(pairs: &[TextPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyTask("BLEU needs at least one pair".into()));
    }
    let tokenized: Vec<(Vec<String>, Vec<String>)> = pairs
        .iter()
        .map(|p| (metric_tokens(&p.candidate), metric_tokens(&p.reference)))
        .collect();
    let cand_len: usize = tokenized.iter().map(|(c, _)| c.len()).sum();
    let ref_len: usize = tokenized.iter().map(|(_, r)| r.len()).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (c, r) in &tokenized {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            for (gram, &count) in &cc {
                total += count;
                matched += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * (log_sum / 4.0).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    R1,
    R2,
    RL,
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f1(matched: f64, cand_total: f64, ref_total: f64) -> f64 {
    if cand_total == 0.0 && ref_total == 0.0 {
        return 1.0; // two empty texts agree perfectly
    }
    if cand_total == 0.0 || ref_total == 0.0 {
        return 0.0;
    }
    let p = matched / cand_total;
    let r = matched / ref_total;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Balanced-F (β=1) ROUGE, averaged over pairs: clipped n-gram overlap for
/// R1/R2, longest common subsequence for RL.
pub fn rouge(pairs: &[TextPair], variant: RougeVariant) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyTask("ROUGE needs at least one pair".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        let c = metric_tokens(&p.candidate);
        let r = metric_tokens(&p.reference);
        let score = match variant {
            RougeVariant::RL => f1(lcs_len(&c, &r) as f64, c.len() as f64, r.len() as f64),
            RougeVariant::R1 | RougeVariant::R2 => {
                let n = if variant == RougeVariant::R1 { 1 } else { 2 };
                let cc = ngram_counts(&c, n);
                let rc = ngram_counts(&r, n);
                let matched: usize = cc
                    .iter()
                    .map(|(g, &cnt)| cnt.min(rc.get(g).copied().unwrap_or(0)))
                    .sum();
                let ct: usize = cc.values().sum();
                let rt: usize = rc.values().sum();
                f1(matched as f64, ct as f64, rt as f64)
            }
        };
        total += score;
    }
    Ok(total / pairs.len() as f64)
}

/// Metrics for one (task group, template) evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task_group: TaskGroup,
    pub template_id: String,
    /// Metric name → value. HR/NDCG lie in [0,1]; BLEU/ROUGE are percents.
    pub metrics: BTreeMap<String, f64>,
    pub instances: usize,
    /// Ranking entries dropped as duplicates or non-items, plus eval
    /// records skipped as unrenderable.
    pub dropped: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "task group {}  template {}  instances {}  dropped {}  config {}\n",
            self.task_group, self.template_id, self.instances, self.dropped,
            self.config_fingerprint
        ));
        out.push_str(&format!("{:<10} {:>12}\n", "metric", "value"));
        for (name, value) in &self.metrics {
            out.push_str(&format!("{name:<10} {value:>12.6}\n"));
        }
        out
    }

    /// Line-delimited machine-readable records, one metric per line.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (name, value) in &self.metrics {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.10}\t{}\t{}\t{}\n",
                self.task_group,
                self.template_id,
                name,
                value,
                self.instances,
                self.dropped,
                self.config_fingerprint
            ));
        }
        out
    }

    /// Parse records written by [`EvalReport::to_records`], possibly from
    /// several concatenated reports.
    pub fn parse_records(text: &str) -> Result<Vec<EvalReport>> {
        let mut by_key: BTreeMap<(String, String, String), EvalReport> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 7 {
                return Err(Error::Parse {
                    path: "eval records".into(),
                    line: lineno + 1,
                    msg: format!("expected 7 tab-separated fields, found {}", parts.len()),
                });
            }
            let group = TaskGroup::parse(parts[0]).ok_or_else(|| Error::Parse {
                path: "eval records".into(),
                line: lineno + 1,
                msg: format!("unknown task group '{}'", parts[0]),
            })?;
            let value: f64 = parts[3].parse().map_err(|_| Error::Parse {
                path: "eval records".into(),
                line: lineno + 1,
                msg: format!("bad metric value '{}'", parts[3]),
            })?;
            let instances: usize = parts[4].parse().map_err(|_| Error::Parse {
                path: "eval records".into(),
                line: lineno + 1,
                msg: format!("bad instance count '{}'", parts[4]),
            })?;
            let dropped: usize = parts[5].parse().map_err(|_| Error::Parse {
                path: "eval records".into(),
                line: lineno + 1,
                msg: format!("bad dropped count '{}'", parts[5]),
            })?;
            let key = (
                parts[0].to_string(),
                parts[1].to_string(),
                parts[6].to_string(),
            );
            let entry = by_key.entry(key).or_insert_with(|| EvalReport {
                task_group: group,
                template_id: parts[1].to_string(),
                metrics: BTreeMap::new(),
                instances,
                dropped,
                config_fingerprint: parts[6].to_string(),
            });
            entry.metrics.insert(parts[2].to_string(), value);
        }
        Ok(by_key.into_values().collect())
    }
}

/// Average a metric over ranking results.
fn mean_over<F: Fn(&RankingResult) -> f64>(results: &[RankingResult], f: F) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(&f).sum::<f64>() / results.len() as f64
}

/// Deduplicate a decoded ranking, keeping first occurrences and counting
/// entries that are dropped as duplicates or unknown items.
fn clean_ranking(
    decoded: Vec<(String, f64)>,
    corpus: &Corpus,
    dropped: &mut usize,
) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for (id, _) in decoded {
        if corpus.items.contains_key(&id) && seen.insert(id.clone()) {
            out.push(id);
        } else {
            *dropped += 1;
        }
    }
    out
}

/// History visible at evaluation time: the training prefix for the
/// validation target, and training prefix plus validation item for test.
fn eval_history(split: &crate::corpus::UserSplit, which: EvalSplit) -> (Vec<String>, String) {
    match which {
        EvalSplit::Val => (split.train.clone(), split.val.clone()),
        EvalSplit::Test => {
            let mut h = split.train.clone();
            h.push(split.val.clone());
            (h, split.test.clone())
        }
    }
}

/// Evaluation inputs that depend on the task group.
pub struct EvalData<'a> {
    pub splits: &'a SequentialSplits,
    /// Candidate lists, required for direct recommendation.
    pub candidates: Option<&'a CandidateSets>,
    /// Explanation splits, required for explanation generation.
    pub explanations: Option<&'a ExplanationSplits>,
}

/// Run one template over one eval split. Sequential templates rank the full
/// item space through a trie-constrained beam; direct templates rank only
/// the prompt's candidate list; explanation templates decode greedily and
/// score BLEU/ROUGE in percent.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    store: &ParameterStore,
    corpus: &Corpus,
    data: &EvalData<'_>,
    templates: &TemplateSet,
    vocab: &Vocabulary,
    dc: &DecodeConfig,
    group: TaskGroup,
    template_id: &str,
    which: EvalSplit,
    config_fingerprint: &str,
) -> Result<EvalReport> {
    dc.validate()?;
    let template = templates
        .get(template_id)
        .ok_or_else(|| Error::Config(format!("unknown template '{template_id}'")))?;
    if template.task_group != group {
        return Err(Error::Config(format!(
            "template '{template_id}' belongs to the {} task group, not {group}",
            template.task_group
        )));
    }
    let k = store.config.k;
    let max_len = store.config.max_len;
    let mut dropped = 0usize;
    let mut metrics = BTreeMap::new();
    let instances;

    match group {
        TaskGroup::Sequential => {
            let trie = build_item_trie(corpus, vocab)?;
            let mut results = Vec::new();
            for (user, split) in &data.splits.per_user {
                let (history, truth) = eval_history(split, which);
                if history.is_empty() {
                    dropped += 1;
                    continue;
                }
                let task = RenderTask::Sequential {
                    history: &history,
                    target: &truth,
                };
                let prompt = render(template, corpus, user, k, max_len, &task, vocab)?;
                let decoded = decode_ranked_items(store, &prompt, dc, &trie, vocab)?;
                let ranked = clean_ranking(decoded, corpus, &mut dropped);
                results.push(RankingResult::new(ranked, truth));
            }
            instances = results.len();
            for kk in [5usize, 10] {
                metrics.insert(format!("hr@{kk}"), mean_over(&results, |r| hr_at_k(r, kk)));
                metrics.insert(
                    format!("ndcg@{kk}"),
                    mean_over(&results, |r| ndcg_at_k(r, kk)),
                );
            }
        }
        TaskGroup::Direct => {
            let sets = data.candidates.ok_or_else(|| {
                Error::Config("direct-recommendation evaluation needs candidate sets".into())
            })?;
            let sets = match which {
                EvalSplit::Val => &sets.val,
                EvalSplit::Test => &sets.test,
            };
            let mut results = Vec::new();
            for set in sets {
                let split = data.splits.per_user.get(&set.user_id).ok_or_else(|| {
                    Error::Config(format!("user '{}' missing from splits", set.user_id))
                })?;
                let (history, truth) = eval_history(split, which);
                if truth != set.ground_truth {
                    return Err(Error::Config(format!(
                        "candidate set for user '{}' targets '{}' but the {} split expects '{}'",
                        set.user_id,
                        set.ground_truth,
                        match which {
                            EvalSplit::Val => "validation",
                            EvalSplit::Test => "test",
                        },
                        truth
                    )));
                }
                let task = RenderTask::Direct {
                    history: &history,
                    candidates: &set.candidates,
                    target: &truth,
                };
                let prompt = render(template, corpus, &set.user_id, k, max_len, &task, vocab)?;
                let trie = ItemTrie::build(set.candidates.iter().map(|s| s.as_str()), vocab)?;
                let decoded = decode_ranked_items(store, &prompt, dc, &trie, vocab)?;
                let ranked = clean_ranking(decoded, corpus, &mut dropped);
                results.push(RankingResult::new(ranked, truth));
            }
            instances = results.len();
            metrics.insert("hr@1".into(), mean_over(&results, |r| hr_at_k(r, 1)));
            for kk in [5usize, 10] {
                metrics.insert(format!("hr@{kk}"), mean_over(&results, |r| hr_at_k(r, kk)));
                metrics.insert(
                    format!("ndcg@{kk}"),
                    mean_over(&results, |r| ndcg_at_k(r, kk)),
                );
            }
        }
        TaskGroup::Explanation => {
            let expl = data.explanations.ok_or_else(|| {
                Error::Config("explanation evaluation needs explanation splits".into())
            })?;
            let indices = match which {
                EvalSplit::Val => &expl.val,
                EvalSplit::Test => &expl.test,
            };
            let mut pairs = Vec::new();
            for &idx in indices {
                let record = &corpus.interactions[idx];
                let reference = record
                    .explanation
                    .as_deref()
                    .expect("explanation splits index explanation records");
                let hint = record.hint_word.as_deref();
                if template.uses_hint() && hint.is_none() {
                    dropped += 1;
                    continue;
                }
                let task = RenderTask::Explanation {
                    item: &record.item_id,
                    explanation: reference,
                    hint,
                };
                let prompt = render(template, corpus, &record.user_id, k, max_len, &task, vocab)?;
                let (generated, _) = decode_text(store, &prompt, dc, vocab)?;
                pairs.push(TextPair {
                    candidate: generated,
                    reference: reference.to_string(),
                });
            }
            instances = pairs.len();
            if pairs.is_empty() {
                return Err(Error::EmptyTask(format!(
                    "no explanation records to evaluate for template {template_id}"
                )));
            }
            metrics.insert("bleu4".into(), 100.0 * bleu4(&pairs)?);
            metrics.insert("rouge1".into(), 100.0 * rouge(&pairs, RougeVariant::R1)?);
            metrics.insert("rouge2".into(), 100.0 * rouge(&pairs, RougeVariant::R2)?);
            metrics.insert("rougeL".into(), 100.0 * rouge(&pairs, RougeVariant::RL)?);
        }
    }

    Ok(EvalReport {
        task_group: group,
        template_id: template_id.to_string(),
        metrics,
        instances,
        dropped,
        config_fingerprint: config_fingerprint.to_string(),
    })
}
