//! Beam search over decoder steps, greedy decoding, and prefix-trie
//! constrained generation that can only emit valid catalog item ids.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{decoder_logits, encoder_states, ParameterStore};
use crate::prompts::RenderedPrompt;
use crate::tokenizer::{Vocabulary, EOS_ID, PAD_ID};

/// Decoding hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum generated tokens (including the closing end-of-sequence).
    pub max_len: usize,
    /// Length-normalization exponent; 0 ranks by raw log-probability.
    pub alpha: f64,
}

impl DecodeConfig {
    pub fn desk_default() -> Self {
        DecodeConfig {
            beam_size: 20,
            max_len: 8,
            alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Decode("beam size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Decode("max length must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Decode(format!(
                "length-normalization exponent {} outside [0,1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// One partial or complete decode, including the leading pad start token.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens: everything after the start pad.
    fn generated(&self) -> &[u32] {
        &self.tokens[1..]
    }

    fn score(&self, alpha: f64) -> f64 {
        let len = self.generated().len().max(1) as f64;
        self.log_prob / len.powf(alpha)
    }
}

/// Anything that scores the next token given a decoder prefix. The prefix
/// always starts with the pad id.
pub trait StepScorer {
    /// Raw (unnormalized) logits over the vocabulary for the next position.
    fn step_logits(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
    fn vocab_size(&self) -> usize;
}

/// The real model as a scorer: encoder states are computed once per prompt
/// and reused across every decode step and hypothesis.
pub struct TransformerScorer<'a> {
    store: &'a ParameterStore,
    enc: Array2<f64>,
}

impl<'a> TransformerScorer<'a> {
    pub fn new(store: &'a ParameterStore, prompt: &RenderedPrompt) -> Result<Self> {
        let enc = encoder_states(store, prompt)?;
        Ok(TransformerScorer { store, enc })
    }
}

impl StepScorer for TransformerScorer<'_> {
    fn step_logits(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let logits = decoder_logits(self.store, &self.enc, prefix)?;
        Ok(logits.row(logits.nrows() - 1).to_vec())
    }

    fn vocab_size(&self) -> usize {
        self.store.config.v
    }
}

/// Log-softmax of one logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|&z| (z - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&z| z - lse).collect()
}

#[derive(Debug, Default)]
struct TrieNode {
    children: BTreeMap<u32, TrieNode>,
    terminal: Option<String>,
}

/// Prefix tree over tokenized item ids; constrained decoding walks it so
/// every finished hypothesis is exactly one catalog item.
#[derive(Debug, Default)]
pub struct ItemTrie {
    root: TrieNode,
    items: usize,
}

impl ItemTrie {
    /// Build from item ids. Two distinct ids must not share one token
    /// sequence.
    pub fn build<'i>(ids: impl IntoIterator<Item = &'i str>, vocab: &Vocabulary) -> Result<Self> {
        let mut trie = ItemTrie::default();
        for id in ids {
            let field = crate::tokenizer::encode(vocab, id);
            let mut node = &mut trie.root;
            for &t in &field.token_ids {
                node = node.children.entry(t).or_default();
            }
            if let Some(existing) = &node.terminal {
                return Err(Error::Decode(format!(
                    "items '{existing}' and '{id}' tokenize to the same sequence; \
                     constrained decoding cannot tell them apart"
                )));
            }
            node.terminal = Some(id.to_string());
            trie.items += 1;
        }
        if trie.items == 0 {
            return Err(Error::Decode("cannot build a trie over zero items".into()));
        }
        Ok(trie)
    }

    pub fn len(&self) -> usize {
        self.items
    }

    pub fn is_empty(&self) -> bool {
        self.items == 0
    }

    /// Walk a full token sequence; the item id if it ends at a terminal.
    pub fn lookup(&self, tokens: &[u32]) -> Option<&str> {
        let mut node = &self.root;
        for &t in tokens {
            node = node.children.get(&t)?;
        }
        node.terminal.as_deref()
    }

    fn walk(&self, tokens: &[u32]) -> Option<&TrieNode> {
        let mut node = &self.root;
        for &t in tokens {
            node = node.children.get(&t)?;
        }
        Some(node)
    }
}

/// Trie over every item id in the corpus.
pub fn build_item_trie(corpus: &Corpus, vocab: &Vocabulary) -> Result<ItemTrie> {
    ItemTrie::build(corpus.items.keys().map(|s| s.as_str()), vocab)
}

/// Candidate successor tokens for a hypothesis. Under a trie these are the
/// legal continuations (plus end-of-sequence at a terminal); otherwise every
/// renderable token except the reserved pad — `v` here is already capped to
/// the vocabulary, since ids past it are unused embedding rows.
fn successors(trie: Option<&ItemTrie>, generated: &[u32], v: usize) -> Result<Vec<u32>> {
    match trie {
        Some(trie) => {
            let node = trie.walk(generated).ok_or_else(|| {
                Error::Decode("hypothesis wandered off the item trie".into())
            })?;
            let mut out: Vec<u32> = node.children.keys().copied().collect();
            if node.terminal.is_some() {
                out.push(EOS_ID);
            }
            out.sort_unstable();
            if out.is_empty() {
                return Err(Error::Decode(
                    "no legal continuation under the item constraint".into(),
                ));
            }
            Ok(out)
        }
        None => Ok((0..v as u32).filter(|&t| t != PAD_ID).collect()),
    }
}

fn detokenize(
    hyp: &Hypothesis,
    trie: Option<&ItemTrie>,
    vocab: &Vocabulary,
) -> Result<Option<String>> {
    let mut tokens = hyp.generated().to_vec();
    if tokens.last() == Some(&EOS_ID) {
        tokens.pop();
    }
    match trie {
        Some(trie) => {
            // Only hypotheses that closed at a terminal name an item; a
            // hypothesis truncated mid-path cannot.
            if !hyp.finished || hyp.generated().last() != Some(&EOS_ID) {
                return Ok(None);
            }
            Ok(trie.lookup(&tokens).map(|s| s.to_string()))
        }
        None => Ok(Some(crate::tokenizer::decode(vocab, &tokens)?)),
    }
}

/// Standard beam search. Each step expands every live hypothesis over its
/// legal successors, keeps the `beam_size` best by cumulative
/// log-probability (ties broken toward lower token ids), and retires
/// hypotheses that emit end-of-sequence; retired hypotheses compete at the
/// end by `log_prob / length^alpha`. Returns de-tokenized strings, best
/// first.
pub fn beam_search(
    scorer: &mut (impl StepScorer + ?Sized),
    vocab: &Vocabulary,
    dc: &DecodeConfig,
    trie: Option<&ItemTrie>,
) -> Result<Vec<(String, f64)>> {
    dc.validate()?;
    let v = scorer.vocab_size();
    let v_legal = v.min(vocab.size());
    let mut active = vec![Hypothesis {
        tokens: vec![PAD_ID],
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..dc.max_len {
        if active.is_empty() {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &active {
            let logits = scorer.step_logits(&hyp.tokens)?;
            if logits.len() != v {
                return Err(Error::Dimension {
                    what: "scorer logits".into(),
                    expected: v.to_string(),
                    got: logits.len().to_string(),
                });
            }
            let logp = log_softmax(&logits);
            for t in successors(trie, hyp.generated(), v_legal)? {
                let mut tokens = hyp.tokens.clone();
                tokens.push(t);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + logp[t as usize],
                    finished: t == EOS_ID,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .expect("log-probabilities are finite")
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(dc.beam_size);
        active = Vec::new();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                active.push(c);
            }
        }
    }
    // Hypotheses alive at the length cap finish unterminated.
    for mut hyp in active {
        hyp.finished = true;
        finished.push(hyp);
    }

    finished.sort_by(|a, b| {
        b.score(dc.alpha)
            .partial_cmp(&a.score(dc.alpha))
            .expect("scores are finite")
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let mut out = Vec::new();
    for hyp in &finished {
        if out.len() == dc.beam_size {
            break;
        }
        if let Some(text) = detokenize(hyp, trie, vocab)? {
            out.push((text, hyp.score(dc.alpha)));
        }
    }
    Ok(out)
}

/// Argmax decoding: one token per step, ties toward the lower id, until
/// end-of-sequence or the length cap. Identical to beam search with beam
/// size 1.
pub fn greedy_decode(
    scorer: &mut (impl StepScorer + ?Sized),
    vocab: &Vocabulary,
    dc: &DecodeConfig,
) -> Result<(String, f64)> {
    dc.validate()?;
    let v = scorer.vocab_size();
    let mut hyp = Hypothesis {
        tokens: vec![PAD_ID],
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..dc.max_len {
        let logits = scorer.step_logits(&hyp.tokens)?;
        if logits.len() != v {
            return Err(Error::Dimension {
                what: "scorer logits".into(),
                expected: v.to_string(),
                got: logits.len().to_string(),
            });
        }
        let logp = log_softmax(&logits);
        let mut best: Option<(u32, f64)> = None;
        for t in 0..v.min(vocab.size()) as u32 {
            if t == PAD_ID {
                continue;
            }
            let p = logp[t as usize];
            if best.map(|(_, bp)| p > bp).unwrap_or(true) {
                best = Some((t, p));
            }
        }
        let (t, p) = best.expect("vocabulary has non-pad tokens");
        hyp.tokens.push(t);
        hyp.log_prob += p;
        if t == EOS_ID {
            hyp.finished = true;
            break;
        }
    }
    hyp.finished = true;
    let text = detokenize(&hyp, None, vocab)?.expect("unconstrained decode always yields text");
    Ok((text, hyp.score(dc.alpha)))
}

/// Rank items for a prompt with the trie-constrained beam.
pub fn decode_ranked_items(
    store: &ParameterStore,
    prompt: &RenderedPrompt,
    dc: &DecodeConfig,
    trie: &ItemTrie,
    vocab: &Vocabulary,
) -> Result<Vec<(String, f64)>> {
    let mut scorer = TransformerScorer::new(store, prompt)?;
    beam_search(&mut scorer, vocab, dc, Some(trie))
}

/// Generate free text for a prompt greedily.
pub fn decode_text(
    store: &ParameterStore,
    prompt: &RenderedPrompt,
    dc: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<(String, f64)> {
    let mut scorer = TransformerScorer::new(store, prompt)?;
    greedy_decode(&mut scorer, vocab, dc)
}
