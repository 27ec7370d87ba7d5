//! Graph-based forward passes over a [`ParameterStore`]: multimodal sequence
//! embedding, the adapter-augmented encoder/decoder stacks, the tied output
//! head, and the teacher-forced loss graph used by training.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;

use super::ParameterStore;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::prompts::RenderedPrompt;
use crate::tokenizer::PAD_ID;

const LN_EPS: f64 = 1e-6;
const MASK_NEG: f64 = -1e30;

fn annotate(e: Error, ctx: &str) -> Error {
    match e {
        Error::Dimension {
            what,
            expected,
            got,
        } => Error::Dimension {
            what: format!("{ctx}: {what}"),
            expected,
            got,
        },
        Error::Range(msg) => Error::Range(format!("{ctx}: {msg}")),
        Error::Config(msg) => Error::Config(format!("{ctx}: {msg}")),
        other => other,
    }
}

struct Builder<'a> {
    store: &'a ParameterStore,
    g: Graph,
    leaves: HashMap<String, NodeId>,
    with_grads: bool,
}

impl<'a> Builder<'a> {
    fn new(store: &'a ParameterStore, with_grads: bool) -> Self {
        Builder {
            store,
            g: Graph::new(),
            leaves: HashMap::new(),
            with_grads,
        }
    }

    /// Fetch (or create) the graph leaf for a named tensor. Leaves are cached
    /// so repeated uses share one node and gradients accumulate.
    fn leaf(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing tensor '{name}'")))?;
        let rg = self.with_grads && !t.frozen;
        let id = self.g.leaf(t.data.clone(), rg);
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    fn has_site(&self, site: &str) -> bool {
        self.store.contains(&format!("{site}.down.w"))
    }

    /// Bottleneck adapter at `site`, or exact identity when the site does not
    /// exist under the current tuning mode.
    fn adapter(&mut self, site: &str, s: NodeId) -> Result<NodeId> {
        if !self.has_site(site) {
            return Ok(s);
        }
        let down_w = self.leaf(&format!("{site}.down.w"))?;
        let down_b = self.leaf(&format!("{site}.down.b"))?;
        let up_w = self.leaf(&format!("{site}.up.w"))?;
        let up_b = self.leaf(&format!("{site}.up.b"))?;
        let h = self.g.matmul(s, down_w)?;
        let h = self.g.add_row(h, down_b)?;
        let h = self.g.gelu(h);
        let u = self.g.matmul(h, up_w)?;
        let u = self.g.add_row(u, up_b)?;
        self.g.add(u, s)
    }

    fn norm(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.leaf(&format!("{prefix}.gamma"))?;
        let beta = self.leaf(&format!("{prefix}.beta"))?;
        self.g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Position-wise feed-forward. GELU keeps the whole network smooth,
    /// which finite-difference gradient verification at ε=1e-3 relies on.
    fn ffn(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w1 = self.leaf(&format!("{prefix}.w1"))?;
        let b1 = self.leaf(&format!("{prefix}.b1"))?;
        let w2 = self.leaf(&format!("{prefix}.w2"))?;
        let b2 = self.leaf(&format!("{prefix}.b2"))?;
        let h = self.g.matmul(x, w1)?;
        let h = self.g.add_row(h, b1)?;
        let h = self.g.gelu(h);
        let o = self.g.matmul(h, w2)?;
        self.g.add_row(o, b2)
    }

    fn multihead(
        &mut self,
        prefix: &str,
        q_in: NodeId,
        kv_in: NodeId,
        mask: Option<&Array2<f64>>,
    ) -> Result<NodeId> {
        let cfg = &self.store.config;
        let wq = self.leaf(&format!("{prefix}.wq"))?;
        let wk = self.leaf(&format!("{prefix}.wk"))?;
        let wv = self.leaf(&format!("{prefix}.wv"))?;
        let q = self.g.matmul(q_in, wq)?;
        let k = self.g.matmul(kv_in, wk)?;
        let v = self.g.matmul(kv_in, wv)?;
        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let mask_leaf = mask.map(|m| self.g.leaf(m.clone(), false));
        let mut heads = Vec::with_capacity(cfg.h);
        for i in 0..cfg.h {
            let qi = self.g.slice_cols(q, i * dh, dh)?;
            let ki = self.g.slice_cols(k, i * dh, dh)?;
            let vi = self.g.slice_cols(v, i * dh, dh)?;
            let kt = self.g.transpose(ki);
            let scores = self.g.matmul(qi, kt)?;
            let scaled = self.g.scale(scores, scale);
            let masked = match mask_leaf {
                Some(m) => self.g.add(scaled, m)?,
                None => scaled,
            };
            let probs = self.g.softmax_rows(masked);
            heads.push(self.g.matmul(probs, vi)?);
        }
        let cat = self.g.concat_cols(&heads)?;
        let wo = self.leaf(&format!("{prefix}.wo"))?;
        self.g.matmul(cat, wo)
    }

    /// Additive multimodal embedding of the rendered input: token (or mapped
    /// image token) + position + whole-word + category.
    fn embed_encoder(&mut self, prompt: &RenderedPrompt) -> Result<NodeId> {
        let cfg = &self.store.config;
        let field = &prompt.input;
        let n = field.len();
        if n == 0 {
            return Err(Error::Range("cannot embed an empty prompt".into()));
        }
        if n > cfg.max_len {
            return Err(Error::Range(format!(
                "prompt length {n} exceeds maximum input length {}",
                cfg.max_len
            )));
        }
        let mut visual_rows = Vec::new();
        for (i, &cat) in field.category_ids.iter().enumerate() {
            match cat {
                0 => {}
                1 => visual_rows.push(i),
                other => {
                    return Err(Error::Range(format!(
                        "category id {other} at position {i} (expected 0 or 1)"
                    )))
                }
            }
        }
        for (i, &t) in field.token_ids.iter().enumerate() {
            if t as usize >= cfg.v {
                return Err(Error::Range(format!(
                    "token id {t} at position {i} exceeds vocabulary size {}",
                    cfg.v
                )));
            }
        }
        for (i, &w) in field.whole_word_ids.iter().enumerate() {
            if w as usize >= cfg.max_whole_words {
                return Err(Error::Range(format!(
                    "whole-word id {w} at position {i} exceeds table size {}",
                    cfg.max_whole_words
                )));
            }
        }
        let groups = prompt.image_features.len();
        if groups * cfg.k != visual_rows.len() {
            return Err(Error::Dimension {
                what: "visual positions".into(),
                expected: format!("{} feature groups x k={}", groups, cfg.k),
                got: format!("{}", visual_rows.len()),
            });
        }
        for (gi, f) in prompt.image_features.iter().enumerate() {
            if f.len() != cfg.d_v {
                return Err(Error::Dimension {
                    what: format!("image feature {gi}"),
                    expected: format!("{}", cfg.d_v),
                    got: format!("{}", f.len()),
                });
            }
        }

        let ids: Vec<usize> = field.token_ids.iter().map(|&t| t as usize).collect();
        let tok_table = self.leaf("token_embedding")?;
        let mut x = self.g.gather_rows(tok_table, &ids)?;

        if !visual_rows.is_empty() {
            // Zero out the token rows at visual positions, then place the
            // mapped image tokens there.
            let mut mask = Array2::ones((n, cfg.d));
            for &r in &visual_rows {
                mask.row_mut(r).fill(0.0);
            }
            x = self.g.mul_mask(x, mask)?;

            let w1 = self.leaf("mapnet.w1")?;
            let b1 = self.leaf("mapnet.b1")?;
            let w2 = self.leaf("mapnet.w2")?;
            let b2 = self.leaf("mapnet.b2")?;
            let mut mapped = Vec::with_capacity(groups);
            for f in &prompt.image_features {
                let xr = Array2::from_shape_vec((1, cfg.d_v), f.clone()).expect("row vector");
                let fx = self.g.leaf(xr, false);
                let h = self.g.matmul(fx, w1)?;
                let h = self.g.add_row(h, b1)?;
                let h = self.g.gelu(h);
                let o = self.g.matmul(h, w2)?;
                let o = self.g.add_row(o, b2)?;
                mapped.push(self.g.reshape(o, cfg.k, cfg.d)?);
            }
            let stacked = self.g.concat_rows(&mapped)?;
            let placed = self.g.scatter_rows(stacked, &visual_rows, n)?;
            x = self.g.add(x, placed)?;
        }

        let pos_table = self.leaf("position_embedding")?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = self.g.gather_rows(pos_table, &positions)?;
        x = self.g.add(x, pos)?;

        let word_table = self.leaf("whole_word_embedding")?;
        let words: Vec<usize> = field.whole_word_ids.iter().map(|&w| w as usize).collect();
        let word = self.g.gather_rows(word_table, &words)?;
        x = self.g.add(x, word)?;

        let cat_table = self.leaf("category_embedding")?;
        let cats: Vec<usize> = field.category_ids.iter().map(|&c| c as usize).collect();
        let cat = self.g.gather_rows(cat_table, &cats)?;
        self.g.add(x, cat)
    }

    fn encoder(&mut self, prompt: &RenderedPrompt) -> Result<NodeId> {
        let mut x = self
            .embed_encoder(prompt)
            .map_err(|e| annotate(e, "encoder embedding"))?;
        for layer in 0..self.store.config.l {
            let p = format!("enc.{layer}");
            let ctx = format!("encoder layer {layer}");
            let sa = self
                .multihead(&format!("{p}.attn"), x, x, None)
                .map_err(|e| annotate(e, &ctx))?;
            let a = self
                .adapter(&format!("{p}.attn_adapter"), sa)
                .map_err(|e| annotate(e, &ctx))?;
            let res = self.g.add(x, a).map_err(|e| annotate(e, &ctx))?;
            x = self
                .norm(&format!("{p}.attn_norm"), res)
                .map_err(|e| annotate(e, &ctx))?;
            let f = self
                .ffn(&format!("{p}.ffn"), x)
                .map_err(|e| annotate(e, &ctx))?;
            let a2 = self
                .adapter(&format!("{p}.ffn_adapter"), f)
                .map_err(|e| annotate(e, &ctx))?;
            let res = self.g.add(x, a2).map_err(|e| annotate(e, &ctx))?;
            x = self
                .norm(&format!("{p}.ffn_norm"), res)
                .map_err(|e| annotate(e, &ctx))?;
        }
        Ok(x)
    }

    fn embed_decoder(&mut self, prefix: &[u32]) -> Result<NodeId> {
        let cfg = &self.store.config;
        if prefix.is_empty() {
            return Err(Error::Range("decoder prefix is empty".into()));
        }
        if prefix.len() > cfg.max_len {
            return Err(Error::Range(format!(
                "decoder prefix length {} exceeds maximum {}",
                prefix.len(),
                cfg.max_len
            )));
        }
        for (i, &t) in prefix.iter().enumerate() {
            if t as usize >= cfg.v {
                return Err(Error::Range(format!(
                    "decoder token id {t} at step {i} exceeds vocabulary size {}",
                    cfg.v
                )));
            }
        }
        let ids: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
        let tok_table = self.leaf("token_embedding")?;
        let x = self.g.gather_rows(tok_table, &ids)?;
        let pos_table = self.leaf("position_embedding")?;
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let pos = self.g.gather_rows(pos_table, &positions)?;
        self.g.add(x, pos)
    }

    /// Decoder stack over a prefix, returning per-step logits (t × V).
    fn decoder(&mut self, enc: NodeId, prefix: &[u32]) -> Result<NodeId> {
        let t = prefix.len();
        let mut x = self
            .embed_decoder(prefix)
            .map_err(|e| annotate(e, "decoder embedding"))?;
        let mut causal = Array2::zeros((t, t));
        for i in 0..t {
            for j in (i + 1)..t {
                causal[[i, j]] = MASK_NEG;
            }
        }
        for layer in 0..self.store.config.l {
            let p = format!("dec.{layer}");
            let ctx = format!("decoder layer {layer}");
            let sa = self
                .multihead(&format!("{p}.self_attn"), x, x, Some(&causal))
                .map_err(|e| annotate(e, &ctx))?;
            let a = self
                .adapter(&format!("{p}.self_attn_adapter"), sa)
                .map_err(|e| annotate(e, &ctx))?;
            let res = self.g.add(x, a).map_err(|e| annotate(e, &ctx))?;
            x = self
                .norm(&format!("{p}.self_attn_norm"), res)
                .map_err(|e| annotate(e, &ctx))?;

            let ca = self
                .multihead(&format!("{p}.cross_attn"), x, enc, None)
                .map_err(|e| annotate(e, &ctx))?;
            let a = self
                .adapter(&format!("{p}.cross_attn_adapter"), ca)
                .map_err(|e| annotate(e, &ctx))?;
            let res = self.g.add(x, a).map_err(|e| annotate(e, &ctx))?;
            x = self
                .norm(&format!("{p}.cross_attn_norm"), res)
                .map_err(|e| annotate(e, &ctx))?;

            let f = self
                .ffn(&format!("{p}.ffn"), x)
                .map_err(|e| annotate(e, &ctx))?;
            let a = self
                .adapter(&format!("{p}.ffn_adapter"), f)
                .map_err(|e| annotate(e, &ctx))?;
            let res = self.g.add(x, a).map_err(|e| annotate(e, &ctx))?;
            x = self
                .norm(&format!("{p}.ffn_norm"), res)
                .map_err(|e| annotate(e, &ctx))?;
        }
        // Tied head: logits = states · Eᵀ.
        let tok_table = self.leaf("token_embedding")?;
        let head = self.g.transpose(tok_table);
        self.g.matmul(x, head)
    }
}

/// Embedded input sequence as plain values (no gradients).
pub fn embed_sequence(store: &ParameterStore, prompt: &RenderedPrompt) -> Result<Array2<f64>> {
    let mut b = Builder::new(store, false);
    let id = b.embed_encoder(prompt)?;
    Ok(b.g.value(id).clone())
}

/// Encoder output states as plain values, for reuse across decode steps.
pub fn encoder_states(store: &ParameterStore, prompt: &RenderedPrompt) -> Result<Array2<f64>> {
    let mut b = Builder::new(store, false);
    let id = b.encoder(prompt)?;
    Ok(b.g.value(id).clone())
}

/// Per-step logits (t × V) for a decoder prefix against cached encoder
/// states.
pub fn decoder_logits(
    store: &ParameterStore,
    enc_states: &Array2<f64>,
    prefix: &[u32],
) -> Result<Array2<f64>> {
    let mut b = Builder::new(store, false);
    let enc = b.g.leaf(enc_states.clone(), false);
    let id = b.decoder(enc, prefix)?;
    Ok(b.g.value(id).clone())
}

/// Full forward (encoder + decoder) without gradients.
pub fn forward_logits(
    store: &ParameterStore,
    prompt: &RenderedPrompt,
    prefix: &[u32],
) -> Result<Array2<f64>> {
    let mut b = Builder::new(store, false);
    let enc = b.encoder(prompt)?;
    let id = b.decoder(enc, prefix)?;
    Ok(b.g.value(id).clone())
}

/// A training graph for one prompt: teacher-forced decoder over the target
/// with the summed token NLL as root.
pub struct LossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    /// Leaf ids of trainable tensors touched by this graph, by name.
    pub trainable_leaves: BTreeMap<String, NodeId>,
    /// Non-pad target tokens contributing to the loss.
    pub target_tokens: usize,
}

impl LossGraph {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss)[[0, 0]]
    }
}

/// Build the teacher-forced loss graph: decoder input is the target shifted
/// right with the pad id as start-of-sequence.
pub fn build_loss_graph(store: &ParameterStore, prompt: &RenderedPrompt) -> Result<LossGraph> {
    let target = &prompt.target.token_ids;
    if target.is_empty() {
        return Err(Error::EmptyTask("prompt has an empty target".into()));
    }
    let mut prefix = Vec::with_capacity(target.len());
    prefix.push(PAD_ID);
    prefix.extend_from_slice(&target[..target.len() - 1]);

    let mut b = Builder::new(store, true);
    let enc = b.encoder(prompt)?;
    let logits = b.decoder(enc, &prefix)?;
    let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    let loss = b
        .g
        .cross_entropy_sum(logits, &targets, Some(PAD_ID as usize))?;
    let target_tokens = targets
        .iter()
        .filter(|&&t| t != PAD_ID as usize)
        .count();
    let trainable_leaves = b
        .leaves
        .into_iter()
        .filter(|(name, _)| store.get(name).map(|t| !t.frozen).unwrap_or(false))
        .collect();
    Ok(LossGraph {
        graph: b.g,
        loss,
        trainable_leaves,
        target_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize, Corpus, SynthSpec};
    use crate::model::{ModelConfig, ParameterStore, TuningMode};
    use crate::prompts::{render, RenderTask, TemplateSet};
    use crate::tokenizer::{build_vocab, Vocabulary};

    fn fixture() -> (Corpus, Vocabulary) {
        let spec = SynthSpec {
            explanation_rate: 1.0,
            ..SynthSpec::desk_default(4, 20)
        };
        let corpus = synthesize(&spec, 5).unwrap();
        let mut texts: Vec<String> = corpus.items.keys().cloned().collect();
        texts.extend(corpus.users.iter().cloned());
        for it in &corpus.interactions {
            if let Some(e) = &it.explanation {
                texts.push(e.clone());
            }
        }
        texts.extend(TemplateSet::builtin().literal_texts());
        let vocab = build_vocab(&texts, 300).unwrap();
        (corpus, vocab)
    }

    fn sample_prompt(corpus: &Corpus, vocab: &Vocabulary, user_idx: usize, k: usize) -> RenderedPrompt {
        let set = TemplateSet::builtin();
        let user = corpus.users[user_idx].clone();
        let history: Vec<String> = corpus
            .user_sequence(&user)
            .iter()
            .map(|it| it.item_id.clone())
            .collect();
        let target = history.last().unwrap().clone();
        let task = RenderTask::Sequential {
            history: &history[..history.len() - 1],
            target: &target,
        };
        render(set.get("A-1").unwrap(), corpus, &user, k, 256, &task, vocab).unwrap()
    }

    #[test]
    fn adapter_mode_forward_matches_full_backbone_at_init() {
        let (corpus, vocab) = fixture();
        let mut cfg = ModelConfig::desk_default();
        let seed = 31;
        let with_adapters = ParameterStore::init(&cfg, seed).unwrap();
        cfg.tuning_mode = TuningMode::Full;
        let bare = ParameterStore::init(&cfg, seed).unwrap();
        for u in 0..corpus.users.len() {
            let prompt = sample_prompt(&corpus, &vocab, u, 2);
            let prefix = vec![PAD_ID, 5, 9];
            let a = forward_logits(&with_adapters, &prompt, &prefix).unwrap();
            let b = forward_logits(&bare, &prompt, &prefix).unwrap();
            let max_diff = (&a - &b).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            assert!(
                max_diff < 1e-6,
                "zero-initialized adapters must be identity (max diff {max_diff})"
            );
        }
    }

    #[test]
    fn self_and_all_attn_modes_agree_at_shared_parameters() {
        let (corpus, vocab) = fixture();
        let mut cfg = ModelConfig::desk_default();
        let mut self_store = ParameterStore::init(&cfg, 17).unwrap();
        cfg.tuning_mode = TuningMode::AllAttnAdapters;
        let mut all_store = ParameterStore::init(&cfg, 17).unwrap();
        // Give the shared adapter sites nonzero values in both stores; the
        // cross-attention sites (all-attn only) keep zero up-projections,
        // i.e. stay exact identities.
        for name in self_store.trainable_names() {
            if name.contains("adapter") {
                let mut data = self_store.get(&name).unwrap().data.clone();
                data.mapv_inplace(|x| x + 0.01);
                self_store.set_data(&name, data.clone()).unwrap();
                all_store.set_data(&name, data).unwrap();
            }
        }
        let prompt = sample_prompt(&corpus, &vocab, 0, 2);
        let prefix = vec![PAD_ID, 3];
        let a = forward_logits(&self_store, &prompt, &prefix).unwrap();
        let b = forward_logits(&all_store, &prompt, &prefix).unwrap();
        let max_diff = (&a - &b).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(
            max_diff < 1e-9,
            "modes differ only in gradient partition (max diff {max_diff})"
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let (corpus, vocab) = fixture();
        let store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let prompt = sample_prompt(&corpus, &vocab, 1, 2);
        let prefix = vec![PAD_ID, 7, 2, 4];
        let a = forward_logits(&store, &prompt, &prefix).unwrap();
        let b = forward_logits(&store, &prompt, &prefix).unwrap();
        assert_eq!(a, b, "bit-identical logits for identical inputs");
    }

    #[test]
    fn causal_mask_protects_earlier_steps() {
        let (corpus, vocab) = fixture();
        let store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let prompt = sample_prompt(&corpus, &vocab, 0, 2);
        let base = vec![PAD_ID, 7, 2, 4, 9];
        let mut changed = base.clone();
        changed[3] = 11;
        let a = forward_logits(&store, &prompt, &base).unwrap();
        let b = forward_logits(&store, &prompt, &changed).unwrap();
        for step in 0..3 {
            let diff: f64 = (&a.row(step) - &b.row(step))
                .iter()
                .fold(0.0f64, |m, &x| m.max(x.abs()));
            assert!(
                diff < 1e-12,
                "step {step} saw a change at a later prefix position (diff {diff})"
            );
        }
        let later: f64 = (&a.row(3) - &b.row(3))
            .iter()
            .fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(later > 1e-9, "the changed position itself must differ");
    }

    #[test]
    fn cached_encoder_states_reproduce_full_forward() {
        let (corpus, vocab) = fixture();
        let store = ParameterStore::init(&ModelConfig::desk_default(), 23).unwrap();
        let prompt = sample_prompt(&corpus, &vocab, 2, 2);
        let prefix = vec![PAD_ID, 3, 8];
        let full = forward_logits(&store, &prompt, &prefix).unwrap();
        let enc = encoder_states(&store, &prompt).unwrap();
        let cached = decoder_logits(&store, &enc, &prefix).unwrap();
        let max_diff = (&full - &cached).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn straight_line_oracle_single_layer_single_head() {
        // Independent evaluation of the whole forward with plain matrix code
        // (no graph), mirroring the layer wiring exactly.
        use crate::model::{adapter_apply, attention, map_image_feature};
        let (corpus, vocab) = fixture();
        let cfg = ModelConfig {
            l: 1,
            d: 8,
            h: 1,
            d_ff: 16,
            v: 512,
            d_v: 16,
            k: 1,
            r: 4,
            max_len: 128,
            max_whole_words: 128,
            tuning_mode: TuningMode::AllAttnAdapters,
        };
        let mut store = ParameterStore::init(&cfg, 77).unwrap();
        // Non-trivial adapters: perturb every adapter tensor so identity
        // bugs cannot hide.
        for name in store.trainable_names() {
            let mut data = store.get(&name).unwrap().data.clone();
            let mut c = 0.0;
            data.mapv_inplace(|x| {
                c += 0.01;
                x + 0.05 * (c as f64).sin()
            });
            store.set_data(&name, data).unwrap();
        }
        let prompt = sample_prompt(&corpus, &vocab, 0, 1);
        let prefix = vec![PAD_ID, 4, 6];
        let got = forward_logits(&store, &prompt, &prefix).unwrap();

        let t = |name: &str| store.get(name).unwrap().data.clone();
        let ln = |x: &Array2<f64>, gamma: &Array2<f64>, beta: &Array2<f64>| {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let mean = row.mean().unwrap();
                let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                let denom = (var + LN_EPS).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = gamma[[0, j]] * ((*v - mean) / denom) + beta[[0, j]];
                }
            }
            out
        };
        let adapter = |site: &str, s: &Array2<f64>| {
            adapter_apply(
                &t(&format!("{site}.down.w")),
                &t(&format!("{site}.down.b")),
                &t(&format!("{site}.up.w")),
                &t(&format!("{site}.up.b")),
                s,
            )
            .unwrap()
        };
        let mha = |p: &str, q_in: &Array2<f64>, kv: &Array2<f64>, mask: Option<&Array2<f64>>| {
            let q = q_in.dot(&t(&format!("{p}.wq")));
            let k = kv.dot(&t(&format!("{p}.wk")));
            let v = kv.dot(&t(&format!("{p}.wv")));
            attention(&q, &k, &v, mask).unwrap().dot(&t(&format!("{p}.wo")))
        };
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
        let ffn = |p: &str, x: &Array2<f64>| {
            let h = (x.dot(&t(&format!("{p}.w1"))) + &t(&format!("{p}.b1"))).mapv(gelu);
            h.dot(&t(&format!("{p}.w2"))) + &t(&format!("{p}.b2"))
        };

        // Encoder embedding by hand.
        let field = &prompt.input;
        let n = field.len();
        let tok = t("token_embedding");
        let pos = t("position_embedding");
        let word = t("whole_word_embedding");
        let cat = t("category_embedding");
        let mut x = Array2::zeros((n, cfg.d));
        let mut group = 0;
        let mut within = 0;
        for i in 0..n {
            if field.category_ids[i] == 1 {
                let mapped = map_image_feature(
                    &t("mapnet.w1"),
                    &t("mapnet.b1"),
                    &t("mapnet.w2"),
                    &t("mapnet.b2"),
                    &prompt.image_features[group],
                    cfg.k,
                    cfg.d,
                )
                .unwrap();
                for j in 0..cfg.d {
                    x[[i, j]] = mapped[[within, j]];
                }
                within += 1;
                if within == cfg.k {
                    within = 0;
                    group += 1;
                }
            } else {
                for j in 0..cfg.d {
                    x[[i, j]] = tok[[field.token_ids[i] as usize, j]];
                }
            }
            for j in 0..cfg.d {
                x[[i, j]] += pos[[i, j]]
                    + word[[field.whole_word_ids[i] as usize, j]]
                    + cat[[field.category_ids[i] as usize, j]];
            }
        }
        // Encoder layer 0.
        let sa = mha("enc.0.attn", &x, &x, None);
        let x1 = ln(
            &(&x + &adapter("enc.0.attn_adapter", &sa)),
            &t("enc.0.attn_norm.gamma"),
            &t("enc.0.attn_norm.beta"),
        );
        let f = ffn("enc.0.ffn", &x1);
        let enc_out = ln(
            &(&x1 + &adapter("enc.0.ffn_adapter", &f)),
            &t("enc.0.ffn_norm.gamma"),
            &t("enc.0.ffn_norm.beta"),
        );
        // Decoder.
        let steps = prefix.len();
        let mut y = Array2::zeros((steps, cfg.d));
        for i in 0..steps {
            for j in 0..cfg.d {
                y[[i, j]] = tok[[prefix[i] as usize, j]] + pos[[i, j]];
            }
        }
        let mut causal = Array2::zeros((steps, steps));
        for i in 0..steps {
            for j in (i + 1)..steps {
                causal[[i, j]] = MASK_NEG;
            }
        }
        let sa = mha("dec.0.self_attn", &y, &y, Some(&causal));
        let y1 = ln(
            &(&y + &adapter("dec.0.self_attn_adapter", &sa)),
            &t("dec.0.self_attn_norm.gamma"),
            &t("dec.0.self_attn_norm.beta"),
        );
        let ca = mha("dec.0.cross_attn", &y1, &enc_out, None);
        let y2 = ln(
            &(&y1 + &adapter("dec.0.cross_attn_adapter", &ca)),
            &t("dec.0.cross_attn_norm.gamma"),
            &t("dec.0.cross_attn_norm.beta"),
        );
        let f = ffn("dec.0.ffn", &y2);
        let y3 = ln(
            &(&y2 + &adapter("dec.0.ffn_adapter", &f)),
            &t("dec.0.ffn_norm.gamma"),
            &t("dec.0.ffn_norm.beta"),
        );
        let want = y3.dot(&tok.t());

        assert_eq!(got.dim(), want.dim());
        let max_diff = (&got - &want).iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(max_diff < 1e-9, "graph vs straight-line mismatch {max_diff}");
    }

    #[test]
    fn zero_embedding_tables_zero_text_rows() {
        let (corpus, vocab) = fixture();
        let cfg = ModelConfig::desk_default();
        let mut store = ParameterStore::init(&cfg, 9).unwrap();
        for name in [
            "token_embedding",
            "position_embedding",
            "whole_word_embedding",
            "category_embedding",
        ] {
            let shape = store.get(name).unwrap().data.dim();
            store.set_data(name, Array2::zeros(shape)).unwrap();
        }
        let prompt = sample_prompt(&corpus, &vocab, 0, 2);
        let x = embed_sequence(&store, &prompt).unwrap();
        for (i, &c) in prompt.input.category_ids.iter().enumerate() {
            if c == 0 {
                assert!(
                    x.row(i).iter().all(|&v| v == 0.0),
                    "text position {i} must be zero"
                );
            }
        }
    }

    #[test]
    fn pieces_of_one_word_share_their_whole_word_addend() {
        let (corpus, vocab) = fixture();
        let cfg = ModelConfig::desk_default();
        let mut store = ParameterStore::init(&cfg, 9).unwrap();
        for name in ["token_embedding", "position_embedding", "category_embedding"] {
            let shape = store.get(name).unwrap().data.dim();
            store.set_data(name, Array2::zeros(shape)).unwrap();
        }
        let prompt = sample_prompt(&corpus, &vocab, 0, 2);
        let x = embed_sequence(&store, &prompt).unwrap();
        let field = &prompt.input;
        for i in 1..field.len() {
            if field.whole_word_ids[i] == field.whole_word_ids[i - 1]
                && field.category_ids[i] == 0
                && field.category_ids[i - 1] == 0
            {
                let diff: f64 = (&x.row(i) - &x.row(i - 1))
                    .iter()
                    .fold(0.0f64, |m, &v| m.max(v.abs()));
                assert!(diff < 1e-15, "same word, same addend at {i}");
            }
        }
    }

    #[test]
    fn category_rows_reach_visual_positions() {
        let (corpus, vocab) = fixture();
        let cfg = ModelConfig::desk_default();
        let mut store = ParameterStore::init(&cfg, 9).unwrap();
        for name in [
            "token_embedding",
            "position_embedding",
            "whole_word_embedding",
            "mapnet.w1",
            "mapnet.w2",
            "mapnet.b1",
            "mapnet.b2",
        ] {
            let shape = store.get(name).unwrap().data.dim();
            store.set_data(name, Array2::zeros(shape)).unwrap();
        }
        let prompt = sample_prompt(&corpus, &vocab, 0, 2);
        let x = embed_sequence(&store, &prompt).unwrap();
        let cat = store.get("category_embedding").unwrap().data.clone();
        for (i, &c) in prompt.input.category_ids.iter().enumerate() {
            let want = cat.row(c as usize);
            let diff: f64 = (&x.row(i) - &want)
                .iter()
                .fold(0.0f64, |m, &v| m.max(v.abs()));
            assert!(diff < 1e-15, "position {i} must carry category row {c}");
        }
    }

    #[test]
    fn prompt_longer_than_max_len_is_range_error() {
        let (corpus, vocab) = fixture();
        let mut cfg = ModelConfig::desk_default();
        cfg.max_len = 4;
        let store = ParameterStore::init(&cfg, 9).unwrap();
        let prompt = sample_prompt(&corpus, &vocab, 0, 2);
        assert!(prompt.input.len() > 4);
        let err = embed_sequence(&store, &prompt).unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn loss_graph_reports_positive_finite_loss() {
        let (corpus, vocab) = fixture();
        let store = ParameterStore::init(&ModelConfig::desk_default(), 13).unwrap();
        let prompt = sample_prompt(&corpus, &vocab, 1, 2);
        let lg = build_loss_graph(&store, &prompt).unwrap();
        let loss = lg.loss_value();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(lg.target_tokens, prompt.target.len());
        assert!(
            lg.trainable_leaves.keys().all(|n| {
                n.contains("adapter") || n.starts_with("mapnet") || n == "category_embedding"
            }),
            "only trainable tensors may appear: {:?}",
            lg.trainable_leaves.keys().collect::<Vec<_>>()
        );
    }
}
