//! Randomized invariants over the public API: tokenizer round trips, split
//! partitions, candidate-set construction, metric bounds/monotonicity, and
//! beam-search behavior as the beam widens.

use proptest::prelude::*;

use mfm::corpus::{
    build_candidate_sets, build_sequential_splits, synthesize, SynthSpec,
};
use mfm::decode::{beam_search, greedy_decode, DecodeConfig, StepScorer};
use mfm::eval::{bleu4, hr_at_k, ndcg_at_k, rouge, RankingResult, RougeVariant, TextPair};
use mfm::tokenizer::{build_vocab, decode, encode};
use mfm::Result;

fn normalized(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Encoding then decoding returns the text up to whitespace
    /// normalization, whenever the vocabulary was built over the same texts.
    #[test]
    fn tokenizer_round_trips(texts in proptest::collection::vec("[a-z ]{1,30}", 1..6)) {
        let texts: Vec<String> = texts.into_iter().map(|t| t.to_string()).collect();
        prop_assume!(texts.iter().any(|t| !t.trim().is_empty()));
        let vocab = build_vocab(&texts, 96).unwrap();
        for t in &texts {
            let field = encode(&vocab, t);
            let back = decode(&vocab, &field.token_ids).unwrap();
            prop_assert_eq!(back, normalized(t));
        }
    }

    /// Every token of a word shares that word's ordinal, and ordinals are
    /// non-decreasing along the sequence.
    #[test]
    fn whole_word_ids_are_monotone(text in "[a-z ]{1,40}") {
        let texts = vec![text.to_string()];
        prop_assume!(!text.trim().is_empty());
        let vocab = build_vocab(&texts, 96).unwrap();
        let field = encode(&vocab, &text);
        for w in field.whole_word_ids.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    /// Per user, the leave-one-out split partitions the chronological item
    /// sequence: training prefix, then the validation item, then the test
    /// item, with nothing lost or reordered.
    #[test]
    fn splits_partition_each_user_sequence(
        users in 3usize..7,
        items in 10usize..18,
        seed in any::<u64>(),
    ) {
        let corpus = synthesize(&SynthSpec::desk_default(users, items), seed).unwrap();
        let splits = build_sequential_splits(&corpus);
        prop_assert_eq!(splits.per_user.len(), corpus.users.len());
        for user in &corpus.users {
            let seq: Vec<String> = corpus
                .interactions
                .iter()
                .filter(|it| &it.user_id == user)
                .map(|it| it.item_id.clone())
                .collect();
            let split = &splits.per_user[user];
            let mut rebuilt = split.train.clone();
            rebuilt.push(split.val.clone());
            rebuilt.push(split.test.clone());
            prop_assert_eq!(rebuilt, seq);
        }
    }

    /// Candidate sets hold exactly `size` distinct items, contain the ground
    /// truth, and pad with items the user never interacted with.
    #[test]
    fn candidate_sets_are_well_formed(seed in any::<u64>(), size in 2usize..6) {
        let corpus = synthesize(&SynthSpec::desk_default(4, 14), seed).unwrap();
        let splits = build_sequential_splits(&corpus);
        let sets = build_candidate_sets(&corpus, &splits, seed, size).unwrap();
        for (which, batch) in [("val", &sets.val), ("test", &sets.test)] {
            prop_assert_eq!(batch.len(), corpus.users.len(), "{}", which);
            for set in batch {
                prop_assert_eq!(set.candidates.len(), size);
                let distinct: std::collections::BTreeSet<_> = set.candidates.iter().collect();
                prop_assert_eq!(distinct.len(), size);
                prop_assert!(set.candidates.contains(&set.ground_truth));
                let touched: std::collections::BTreeSet<_> = corpus
                    .interactions
                    .iter()
                    .filter(|it| it.user_id == set.user_id)
                    .map(|it| it.item_id.as_str())
                    .collect();
                for c in &set.candidates {
                    if *c != set.ground_truth {
                        prop_assert!(!touched.contains(c.as_str()));
                    }
                }
            }
        }
    }

    /// HR and NDCG never decrease as the cutoff grows, stay in [0,1], and
    /// NDCG never exceeds HR at the same cutoff.
    #[test]
    fn ranking_metrics_bounds(
        n in 1usize..15,
        truth_pos in 0usize..20,
        k in 1usize..15,
    ) {
        let ranked: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let r = RankingResult::new(ranked, format!("i{truth_pos}"));
        let hr = hr_at_k(&r, k);
        let nd = ndcg_at_k(&r, k);
        prop_assert!((0.0..=1.0).contains(&hr));
        prop_assert!((0.0..=1.0).contains(&nd));
        prop_assert!(nd <= hr + 1e-12);
        prop_assert!(hr_at_k(&r, k + 1) >= hr);
        prop_assert!(ndcg_at_k(&r, k + 1) >= nd);
    }

    /// Text metrics stay in [0,1] and hit 1 exactly on equal texts.
    #[test]
    fn text_metrics_bounds(
        cand in "[a-d ]{0,24}",
        reference in "[a-d ]{0,24}",
    ) {
        let pairs = vec![TextPair { candidate: cand.clone(), reference: reference.clone() }];
        let b = bleu4(&pairs).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        for v in [RougeVariant::R1, RougeVariant::R2, RougeVariant::RL] {
            let r = rouge(&pairs, v).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        }
        let same = vec![TextPair { candidate: cand.clone(), reference: cand.clone() }];
        for v in [RougeVariant::R1, RougeVariant::R2, RougeVariant::RL] {
            prop_assert!((rouge(&same, v).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

/// Deterministic prefix-dependent toy scorer: logits are a hash of the
/// prefix, so beam search faces genuinely sequential decisions.
struct HashScorer {
    v: usize,
    salt: u64,
}

impl StepScorer for HashScorer {
    fn step_logits(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut h = self.salt ^ 0xcbf2_9ce4_8422_2325;
        for &t in prefix {
            h ^= t as u64 + 1;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        Ok((0..self.v)
            .map(|i| {
                let x = h.wrapping_mul(i as u64 * 2 + 3);
                ((x >> 16) % 1000) as f64 / 250.0 - 2.0
            })
            .collect())
    }

    fn vocab_size(&self) -> usize {
        self.v
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Widening the beam never worsens the best finished score, and a beam
    /// of one reproduces greedy decoding.
    #[test]
    fn wider_beams_never_hurt(salt in any::<u64>()) {
        let vocab = build_vocab(&["a b c d".to_string()], 64).unwrap();
        let v = vocab.size();
        let base = DecodeConfig { beam_size: 1, max_len: 3, alpha: 0.0 };
        let mut best_prev = f64::NEG_INFINITY;
        for b in 1..=6 {
            let mut scorer = HashScorer { v, salt };
            let dc = DecodeConfig { beam_size: b, ..base };
            let ranked = beam_search(&mut scorer, &vocab, &dc, None).unwrap();
            prop_assert!(!ranked.is_empty());
            let best = ranked[0].1;
            prop_assert!(best >= best_prev - 1e-12, "beam {} got {} < {}", b, best, best_prev);
            best_prev = best;
            if b == 1 {
                let mut scorer = HashScorer { v, salt };
                let (text, score) = greedy_decode(&mut scorer, &vocab, &dc).unwrap();
                // Greedy normalizes by length; compare the decoded text.
                prop_assert_eq!(&ranked[0].0, &text);
                prop_assert!(score.is_finite());
            }
        }
    }

    /// Beam results are sorted by score and contain no duplicate outputs.
    #[test]
    fn beam_output_is_sorted_and_distinct(salt in any::<u64>(), b in 1usize..8) {
        let vocab = build_vocab(&["a b c".to_string()], 64).unwrap();
        let mut scorer = HashScorer { v: vocab.size(), salt };
        let dc = DecodeConfig { beam_size: b, max_len: 3, alpha: 0.0 };
        let ranked = beam_search(&mut scorer, &vocab, &dc, None).unwrap();
        prop_assert!(ranked.len() <= b);
        for w in ranked.windows(2) {
            prop_assert!(w[0].1 >= w[1].1 - 1e-12);
        }
    }
}
