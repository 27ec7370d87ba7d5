//! Seq2seq training under a tuning mode: summed-NLL loss, reverse-mode
//! batch gradients over trainable tensors only, finite-difference gradient
//! verification, decoupled weight-decay updates, and the epoch loop.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    fingerprint64, sample_candidates, Corpus, ExplanationSplits, SequentialSplits,
};
use crate::error::{Error, Result};
use crate::model::{build_loss_graph, ParameterStore};
use crate::prompts::{render, RenderTask, RenderedPrompt, TaskGroup, TemplateSet};
use crate::tokenizer::{Vocabulary, PAD_ID};

/// Hyperparameters for one training run. The tuning mode lives on the
/// parameter store's model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip.
    pub clip_norm: f64,
    pub seed: u64,
    /// Candidate-list size for direct-recommendation training instances.
    pub candidate_size: usize,
    /// Task groups to draw training instances from.
    pub groups: Vec<TaskGroup>,
}

impl TrainConfig {
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed,
            candidate_size: 5,
            groups: TaskGroup::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "clip norm {} must be positive",
                self.clip_norm
            )));
        }
        if self.candidate_size < 2 {
            return Err(Error::Config(format!(
                "candidate size {} must be at least 2",
                self.candidate_size
            )));
        }
        if self.groups.is_empty() {
            return Err(Error::Config("no task groups selected".into()));
        }
        Ok(())
    }
}

/// Per-optimizer-step measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: f64,
    /// Non-pad target tokens in the step's batch.
    pub tokens: usize,
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepStats>,
    /// How often each template id was rendered into a training batch.
    pub template_usage: BTreeMap<String, u64>,
    pub epochs_run: usize,
    /// Instances skipped because a user lacked the data for a task group.
    pub instances_skipped: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Summed negative log-likelihood of `targets` under per-step `logits`
/// (a |targets| × V matrix). Pad targets contribute nothing.
pub fn nll_loss(logits: &Array2<f64>, targets: &[u32]) -> Result<f64> {
    let (rows, v) = logits.dim();
    if rows != targets.len() {
        return Err(Error::Dimension {
            what: "loss logits".into(),
            expected: format!("{} rows", targets.len()),
            got: format!("{rows}"),
        });
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD_ID {
            continue;
        }
        if t as usize >= v {
            return Err(Error::Range(format!(
                "target id {t} at step {i} exceeds vocabulary size {v}"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t as usize];
    }
    Ok(total)
}

/// Loss and gradients for one batch: per-example summed NLL averaged over
/// the batch, differentiated with respect to every trainable tensor.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: BTreeMap<String, Array2<f64>>,
    pub tokens: usize,
}

/// Forward-only batch loss (mean over examples of the summed NLL).
pub fn batch_loss(store: &ParameterStore, batch: &[RenderedPrompt]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for prompt in batch {
        total += build_loss_graph(store, prompt)?.loss_value();
    }
    Ok(total / batch.len() as f64)
}

/// Run forward + reverse over each example and accumulate gradients. A
/// non-finite loss or gradient rejects the batch with a diagnostic naming
/// the offender; the store is never touched.
pub fn compute_batch_gradients(
    store: &ParameterStore,
    batch: &[RenderedPrompt],
) -> Result<BatchGradients> {
    let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    let mut total = 0.0;
    let mut tokens = 0;
    for prompt in batch {
        let lg = build_loss_graph(store, prompt)?;
        let loss = lg.loss_value();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                tensor: format!("user '{}' template {}", prompt.user_id, prompt.template_id),
            });
        }
        total += loss;
        tokens += lg.target_tokens;
        let g = lg.graph.backward(lg.loss)?;
        for (name, &node) in &lg.trainable_leaves {
            if let Some(grad) = g.get(node) {
                grads
                    .entry(name.clone())
                    .and_modify(|a| *a += grad)
                    .or_insert_with(|| grad.clone());
            }
        }
    }
    if !batch.is_empty() {
        let inv = 1.0 / batch.len() as f64;
        total *= inv;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * inv);
        }
    }
    for (name, g) in &grads {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                tensor: name.clone(),
            });
        }
    }
    Ok(BatchGradients {
        loss: total,
        grads,
        tokens,
    })
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns
/// the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Adam with decoupled weight decay. Moments live here, keyed by tensor
/// name, so one optimizer follows one run.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update to every tensor named in `grads`.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Array2<f64>>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let lr = self.learning_rate;
            let wd = self.weight_decay;
            let eps = self.eps;
            let m = &self.m[name];
            let v = &self.v[name];
            store.update(name, |p| {
                ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
            })?;
        }
        Ok(())
    }
}

/// One verified coordinate of the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradProbe {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
    pub max_rel_err: f64,
}

const FD_EPS: f64 = 1e-3;

/// Verify reverse-mode gradients against central finite differences on
/// `probe_count` coordinates sampled round-robin across trainable tensor
/// kinds. Probing happens at a jittered parameter point so zero-initialized
/// tensors do not sit in degenerate regions. Any probe whose relative error
/// exceeds `tolerance` fails the check.
pub fn grad_check(
    store: &ParameterStore,
    batch: &[RenderedPrompt],
    probe_count: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::EmptyTask("gradient check needs a batch".into()));
    }
    let mut jittered = store.clone();
    for name in jittered.trainable_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fingerprint64(name.as_bytes()));
        let mut data = jittered.get(&name).unwrap().data.clone();
        data.mapv_inplace(|x| x + 0.05 * (rng.gen::<f64>() - 0.5));
        jittered.set_data(&name, data).unwrap();
    }

    let analytic = compute_batch_gradients(&jittered, batch)?;

    // Partition trainable tensors by kind so every kind is probed.
    let names = jittered.trainable_names();
    let mut kinds: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
    for n in &names {
        let kind = if n.contains("adapter") {
            "adapter"
        } else if n.starts_with("mapnet") {
            "mapnet"
        } else if n == "category_embedding" {
            "category"
        } else {
            "backbone"
        };
        kinds.entry(kind).or_default().push(n);
    }
    let kind_list: Vec<&Vec<&String>> = kinds.values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(probe_count);
    let mut max_rel = 0.0f64;
    for p in 0..probe_count {
        let pool = kind_list[p % kind_list.len()];
        let name = pool[rng.gen_range(0..pool.len())].clone();
        let (rows, cols) = jittered.get(&name).unwrap().data.dim();
        let r = rng.gen_range(0..rows);
        let c = rng.gen_range(0..cols);
        let g = analytic
            .grads
            .get(&name)
            .map(|m| m[[r, c]])
            .unwrap_or(0.0);

        let probe_at = |delta: f64| -> Result<f64> {
            let mut s = jittered.clone();
            let mut data = s.get(&name).unwrap().data.clone();
            data[[r, c]] += delta;
            s.set_data(&name, data).unwrap();
            batch_loss(&s, batch)
        };
        let plus = probe_at(FD_EPS)?;
        let minus = probe_at(-FD_EPS)?;
        let numeric = (plus - minus) / (2.0 * FD_EPS);
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-8);
        if rel > tolerance {
            return Err(Error::GradCheck(format!(
                "tensor '{name}' [{r},{c}]: analytic {g:.10e} vs central difference \
                 {numeric:.10e} (relative error {rel:.3e} > {tolerance:.1e})"
            )));
        }
        max_rel = max_rel.max(rel);
        probes.push(GradProbe {
            tensor: name,
            row: r,
            col: c,
            analytic: g,
            numeric,
            rel_err: rel,
        });
    }
    Ok(GradCheckReport {
        probes,
        max_rel_err: max_rel,
    })
}

/// All rendered instances for one epoch, in deterministic user order: per
/// user and task group, one uniformly sampled training template (never an
/// unseen-eval template) applied at a uniformly sampled split point of the
/// training sequence, so successive epochs see varied (history, target)
/// pairs instead of re-fitting one fixed pair per user.
#[allow(clippy::too_many_arguments)]
fn epoch_instances(
    store: &ParameterStore,
    cfg: &TrainConfig,
    corpus: &Corpus,
    splits: &SequentialSplits,
    expl_train_by_user: &BTreeMap<&str, Vec<usize>>,
    templates: &TemplateSet,
    vocab: &Vocabulary,
    epoch: usize,
    usage: &mut BTreeMap<String, u64>,
) -> Result<(Vec<RenderedPrompt>, usize)> {
    let mcfg = &store.config;
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ fingerprint64(format!("epoch {epoch}").as_bytes()),
    );
    let mut instances = Vec::new();
    let mut skipped = 0;
    for user in &corpus.users {
        for &group in &cfg.groups {
            let pool = templates.training_pool(group);
            if pool.is_empty() {
                return Err(Error::Config(format!(
                    "no training templates for task group {group}"
                )));
            }
            match group {
                TaskGroup::Sequential | TaskGroup::Direct => {
                    let split = splits.per_user.get(user.as_str()).ok_or_else(|| {
                        Error::Config(format!("user '{user}' missing from splits"))
                    })?;
                    if split.train.len() < 2 {
                        skipped += 1;
                        continue;
                    }
                    let m = split.train.len();
                    let j = rng.gen_range(1..m);
                    let history = &split.train[..j];
                    let target = split.train[j].clone();
                    let template = *pool.choose(&mut rng).expect("nonempty pool");
                    let task = if group == TaskGroup::Sequential {
                        RenderTask::Sequential {
                            history,
                            target: &target,
                        }
                    } else {
                        let set = sample_candidates(
                            corpus,
                            user,
                            &target,
                            cfg.candidate_size,
                            &mut rng,
                        )?;
                        RenderTask::Direct {
                            history,
                            candidates: &set.candidates.clone(),
                            target: &target,
                        }
                    };
                    let prompt = render(
                        template, corpus, user, mcfg.k, mcfg.max_len, &task, vocab,
                    )?;
                    *usage.entry(template.id.clone()).or_insert(0) += 1;
                    instances.push(prompt);
                }
                TaskGroup::Explanation => {
                    let Some(records) = expl_train_by_user.get(user.as_str()) else {
                        skipped += 1;
                        continue;
                    };
                    let &idx = records.choose(&mut rng).expect("nonempty record list");
                    let record = &corpus.interactions[idx];
                    let explanation = record
                        .explanation
                        .as_deref()
                        .expect("explanation split holds explanation records");
                    let hint = record.hint_word.as_deref();
                    let eligible: Vec<_> = pool
                        .iter()
                        .filter(|t| hint.is_some() || !t.uses_hint())
                        .copied()
                        .collect();
                    if eligible.is_empty() {
                        skipped += 1;
                        continue;
                    }
                    let template = *eligible.choose(&mut rng).expect("nonempty");
                    let task = RenderTask::Explanation {
                        item: &record.item_id,
                        explanation,
                        hint,
                    };
                    let prompt = render(
                        template, corpus, user, mcfg.k, mcfg.max_len, &task, vocab,
                    )?;
                    *usage.entry(template.id.clone()).or_insert(0) += 1;
                    instances.push(prompt);
                }
            }
        }
    }
    Ok((instances, skipped))
}

/// Train the store in place. Deterministic for a fixed seed; frozen tensors
/// are never written; a non-finite loss or gradient aborts before the step
/// is applied, so the store retains the last good parameters.
pub fn train(
    store: &mut ParameterStore,
    cfg: &TrainConfig,
    corpus: &Corpus,
    splits: &SequentialSplits,
    expl_splits: Option<&ExplanationSplits>,
    templates: &TemplateSet,
    vocab: &Vocabulary,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut expl_train_by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    if cfg.groups.contains(&TaskGroup::Explanation) {
        let splits = expl_splits.ok_or_else(|| {
            Error::Config("explanation training requested without explanation splits".into())
        })?;
        for &idx in &splits.train {
            expl_train_by_user
                .entry(corpus.interactions[idx].user_id.as_str())
                .or_default()
                .push(idx);
        }
    }

    let mut optimizer = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut steps = Vec::new();
    let mut usage = BTreeMap::new();
    let mut skipped_total = 0;
    let mut step_no = 0usize;
    for epoch in 0..cfg.epochs {
        let (instances, skipped) = epoch_instances(
            store,
            cfg,
            corpus,
            splits,
            &expl_train_by_user,
            templates,
            vocab,
            epoch,
            &mut usage,
        )?;
        skipped_total += skipped;
        for chunk in instances.chunks(cfg.batch_size) {
            let t0 = Instant::now();
            let bg = compute_batch_gradients(store, chunk).map_err(|e| match e {
                Error::NonFinite { what, tensor } => Error::TrainAborted {
                    epoch,
                    step: step_no,
                    msg: format!("non-finite {what} ({tensor}); last good parameters retained"),
                },
                other => other,
            })?;
            let mut grads = bg.grads;
            let grad_norm = clip_gradients(&mut grads, cfg.clip_norm);
            optimizer.step(store, &grads)?;
            steps.push(StepStats {
                epoch,
                step: step_no,
                loss: bg.loss,
                grad_norm,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                tokens: bg.tokens,
            });
            step_no += 1;
        }
    }
    Ok(TrainReport {
        steps,
        template_usage: usage,
        epochs_run: cfg.epochs,
        instances_skipped: skipped_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_explanation_splits, build_sequential_splits, synthesize, SynthSpec};
    use crate::model::{forward_logits, ModelConfig, TuningMode};
    use crate::tokenizer::build_vocab;

    struct Fixture {
        corpus: Corpus,
        splits: SequentialSplits,
        expl: ExplanationSplits,
        templates: TemplateSet,
        vocab: Vocabulary,
    }

    fn fixture() -> Fixture {
        let spec = SynthSpec {
            explanation_rate: 1.0,
            ..SynthSpec::desk_default(4, 20)
        };
        let corpus = synthesize(&spec, 11).unwrap();
        let splits = build_sequential_splits(&corpus);
        let expl = build_explanation_splits(&corpus, 11).unwrap();
        let templates = TemplateSet::builtin();
        let mut texts: Vec<String> = corpus.items.keys().cloned().collect();
        texts.extend(corpus.users.iter().cloned());
        for it in &corpus.interactions {
            if let Some(e) = &it.explanation {
                texts.push(e.clone());
            }
        }
        texts.extend(templates.literal_texts());
        let vocab = build_vocab(&texts, 300).unwrap();
        Fixture {
            corpus,
            splits,
            expl,
            templates,
            vocab,
        }
    }

    fn micro_batch(f: &Fixture, store: &ParameterStore, n: usize) -> Vec<RenderedPrompt> {
        let mut out = Vec::new();
        for user in f.corpus.users.iter().take(n) {
            let split = &f.splits.per_user[user.as_str()];
            let m = split.train.len();
            let task = RenderTask::Sequential {
                history: &split.train[..m - 1],
                target: &split.train[m - 1],
            };
            out.push(
                render(
                    f.templates.get("A-1").unwrap(),
                    &f.corpus,
                    user,
                    store.config.k,
                    store.config.max_len,
                    &task,
                    &f.vocab,
                )
                .unwrap(),
            );
        }
        out
    }

    #[test]
    fn nll_uniform_logits_is_length_times_log_vocab() {
        let logits = Array2::zeros((3, 4));
        let loss = nll_loss(&logits, &[1, 2, 3]).unwrap();
        assert!(
            (loss - 4.1588830833596718565).abs() < 1e-6,
            "3·ln4 expected, got {loss}"
        );
    }

    #[test]
    fn nll_perfect_prediction_is_negligible() {
        let mut logits = Array2::zeros((2, 5));
        logits[[0, 3]] = 40.0;
        logits[[1, 1]] = 40.0;
        let loss = nll_loss(&logits, &[3, 1]).unwrap();
        assert!(loss <= 1e-9, "margin 40 leaves loss {loss}");
    }

    #[test]
    fn nll_matches_independent_formulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Array2::from_shape_fn((6, 9), |_| rng.gen_range(-2.0..2.0));
        let targets: Vec<u32> = (0..6).map(|_| rng.gen_range(1..9) as u32).collect();
        let got = nll_loss(&logits, &targets).unwrap();
        // Direct exponentiation is safe at this magnitude.
        let mut want = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let sum: f64 = logits.row(i).iter().map(|&z| z.exp()).sum();
            want += sum.ln() - logits[[i, t as usize]];
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn nll_skips_pad_and_rejects_out_of_range() {
        let logits = Array2::zeros((2, 4));
        let loss = nll_loss(&logits, &[PAD_ID, 2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            nll_loss(&logits, &[2, 9]).unwrap_err(),
            Error::Range(_)
        ));
        assert!(matches!(
            nll_loss(&logits, &[2]).unwrap_err(),
            Error::Dimension { .. }
        ));
    }

    #[test]
    fn graph_loss_equals_nll_of_forward_logits() {
        let f = fixture();
        let store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let prompt = &micro_batch(&f, &store, 1)[0];
        let lg = build_loss_graph(&store, prompt).unwrap();
        let target = &prompt.target.token_ids;
        let mut prefix = vec![PAD_ID];
        prefix.extend_from_slice(&target[..target.len() - 1]);
        let logits = forward_logits(&store, prompt, &prefix).unwrap();
        let want = nll_loss(&logits, target).unwrap();
        assert!(
            (lg.loss_value() - want).abs() < 1e-9,
            "{} vs {want}",
            lg.loss_value()
        );
    }

    #[test]
    fn gradients_cover_exactly_the_trainable_set() {
        let f = fixture();
        let store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let batch = micro_batch(&f, &store, 2);
        let bg = compute_batch_gradients(&store, &batch).unwrap();
        let got: Vec<&String> = bg.grads.keys().collect();
        let want = store.trainable_names();
        let want: Vec<&String> = want.iter().collect();
        assert_eq!(got, want, "every trainable tensor sits in the forward path");
        assert!(bg.loss.is_finite() && bg.loss > 0.0);
        assert!(bg.tokens > 0);
    }

    #[test]
    fn empty_batch_is_zero_loss_no_gradients() {
        let store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let bg = compute_batch_gradients(&store, &[]).unwrap();
        assert_eq!(bg.loss, 0.0);
        assert!(bg.grads.is_empty());
        assert_eq!(bg.tokens, 0);
    }

    #[test]
    fn micro_sgd_step_does_not_increase_loss() {
        let f = fixture();
        let mut store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let batch = micro_batch(&f, &store, 2);
        let before = batch_loss(&store, &batch).unwrap();
        let bg = compute_batch_gradients(&store, &batch).unwrap();
        for (name, g) in &bg.grads {
            store.update(name, |p| *p -= &(1e-4 * g)).unwrap();
        }
        let after = batch_loss(&store, &batch).unwrap();
        assert!(
            after <= before + 1e-12,
            "descent step raised the loss: {before} -> {after}"
        );
    }

    #[test]
    fn grad_check_passes_on_desk_config() {
        let f = fixture();
        let store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let batch = micro_batch(&f, &store, 2);
        let report = grad_check(&store, &batch, 24, 7, 1e-4).unwrap();
        assert_eq!(report.probes.len(), 24);
        assert!(
            report.max_rel_err < 1e-4,
            "max relative error {}",
            report.max_rel_err
        );
        let kinds: std::collections::BTreeSet<&str> = report
            .probes
            .iter()
            .map(|p| {
                if p.tensor.contains("adapter") {
                    "adapter"
                } else if p.tensor.starts_with("mapnet") {
                    "mapnet"
                } else {
                    "category"
                }
            })
            .collect();
        assert_eq!(kinds.len(), 3, "probes must span all trainable kinds");
    }

    #[test]
    fn adamw_drives_a_quadratic_toward_zero() {
        let mut store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let name = "category_embedding".to_string();
        let start = store.get(&name).unwrap().data.clone();
        let mut opt = AdamW::new(1e-2, 0.0);
        for _ in 0..400 {
            let p = store.get(&name).unwrap().data.clone();
            let grads = BTreeMap::from([(name.clone(), 2.0 * &p)]);
            opt.step(&mut store, &grads).unwrap();
        }
        let end = store.get(&name).unwrap().data.clone();
        let n0: f64 = start.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1: f64 = end.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n1 < n0 / 100.0, "norm {n0} only fell to {n1}");
    }

    #[test]
    fn adamw_refuses_frozen_tensors() {
        let mut store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let mut opt = AdamW::new(1e-3, 0.0);
        let grads = BTreeMap::from([(
            "token_embedding".to_string(),
            Array2::zeros(store.get("token_embedding").unwrap().data.dim()),
        )]);
        assert!(opt.step(&mut store, &grads).is_err());
    }

    #[test]
    fn clip_rescales_only_when_needed() {
        let mut grads = BTreeMap::from([
            ("a".to_string(), Array2::from_elem((1, 2), 3.0)),
            ("b".to_string(), Array2::from_elem((1, 2), 4.0)),
        ]);
        // norm = sqrt(9+9+16+16) = sqrt(50)
        let norm = clip_gradients(&mut grads, 1.0);
        assert!((norm - 50f64.sqrt()).abs() < 1e-12);
        let mut sq = 0.0;
        for g in grads.values() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-12, "clipped to the ceiling");

        let mut small = BTreeMap::from([("a".to_string(), Array2::from_elem((1, 1), 0.3))]);
        let norm = clip_gradients(&mut small, 1.0);
        assert!((norm - 0.3).abs() < 1e-12);
        assert_eq!(small["a"][[0, 0]], 0.3, "small gradients pass through");
    }

    #[test]
    fn zero_epochs_leaves_parameters_untouched() {
        let f = fixture();
        let mut store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let before = store.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::desk_default(1)
        };
        let report = train(
            &mut store,
            &cfg,
            &f.corpus,
            &f.splits,
            Some(&f.expl),
            &f.templates,
            &f.vocab,
        )
        .unwrap();
        assert_eq!(store, before);
        assert!(report.steps.is_empty());
    }

    #[test]
    fn training_updates_trainable_and_freezes_backbone() {
        let f = fixture();
        let mut store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let before = store.clone();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::desk_default(1)
        };
        let report = train(
            &mut store,
            &cfg,
            &f.corpus,
            &f.splits,
            Some(&f.expl),
            &f.templates,
            &f.vocab,
        )
        .unwrap();
        assert!(!report.steps.is_empty());
        for s in &report.steps {
            assert!(s.loss.is_finite() && s.loss >= 0.0);
            assert!(s.grad_norm.is_finite());
        }
        let mut moved = 0;
        for (name, t) in before.iter() {
            let now = store.get(name).unwrap();
            if t.frozen {
                assert_eq!(
                    t.data.as_slice().unwrap(),
                    now.data.as_slice().unwrap(),
                    "frozen tensor {name} changed"
                );
            } else if t.data != now.data {
                moved += 1;
            }
        }
        assert!(moved > 0, "training must move trainable tensors");
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let f = fixture();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::desk_default(9)
        };
        let run = |f: &Fixture| {
            let mut store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
            let report = train(
                &mut store,
                &cfg,
                &f.corpus,
                &f.splits,
                Some(&f.expl),
                &f.templates,
                &f.vocab,
            )
            .unwrap();
            (store, report)
        };
        let (s1, r1) = run(&f);
        let (s2, r2) = run(&f);
        assert_eq!(s1, s2, "parameter trajectories must match bit-for-bit");
        assert_eq!(r1.template_usage, r2.template_usage);
        let l1: Vec<f64> = r1.steps.iter().map(|s| s.loss).collect();
        let l2: Vec<f64> = r2.steps.iter().map(|s| s.loss).collect();
        assert_eq!(l1, l2);
    }

    #[test]
    fn training_never_renders_unseen_templates() {
        let f = fixture();
        let mut store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::desk_default(2)
        };
        let report = train(
            &mut store,
            &cfg,
            &f.corpus,
            &f.splits,
            Some(&f.expl),
            &f.templates,
            &f.vocab,
        )
        .unwrap();
        for unseen in ["A-9", "B-8", "C-12"] {
            assert!(
                !report.template_usage.contains_key(unseen),
                "unseen-eval template {unseen} appeared in training"
            );
        }
        assert!(!report.template_usage.is_empty());
    }

    #[test]
    fn non_finite_loss_aborts_without_touching_parameters() {
        let f = fixture();
        let mut store = ParameterStore::init(&ModelConfig::desk_default(), 3).unwrap();
        let shape = store.get("token_embedding").unwrap().data.dim();
        store
            .set_data("token_embedding", Array2::from_elem(shape, 1e308))
            .unwrap();
        let before = store.clone();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::desk_default(4)
        };
        let err = train(
            &mut store,
            &cfg,
            &f.corpus,
            &f.splits,
            Some(&f.expl),
            &f.templates,
            &f.vocab,
        )
        .unwrap_err();
        assert!(matches!(err, Error::TrainAborted { .. }), "got {err}");
        assert_eq!(store, before, "abort must retain last good parameters");
    }

    #[test]
    fn invalid_train_config_is_rejected() {
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::desk_default(1)
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::desk_default(1)
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            groups: vec![],
            ..TrainConfig::desk_default(1)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn full_mode_training_moves_backbone() {
        let f = fixture();
        let mut cfg_m = ModelConfig::desk_default();
        cfg_m.tuning_mode = TuningMode::Full;
        let mut store = ParameterStore::init(&cfg_m, 3).unwrap();
        let before = store.get("token_embedding").unwrap().data.clone();
        let cfg = TrainConfig {
            epochs: 1,
            groups: vec![TaskGroup::Sequential],
            ..TrainConfig::desk_default(5)
        };
        train(
            &mut store,
            &cfg,
            &f.corpus,
            &f.splits,
            None,
            &f.templates,
            &f.vocab,
        )
        .unwrap();
        assert_ne!(
            before,
            store.get("token_embedding").unwrap().data,
            "full tuning trains the embedding"
        );
    }
}
